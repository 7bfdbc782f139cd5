/// Inputs are `u32 LE manifest length ‖ manifest ‖ payload`.
pub fn split(data: &[u8]) -> Option<(&[u8], &[u8])> {
    let (len, rest) = data.split_first_chunk::<4>()?;
    let n = (u32::from_le_bytes(*len) as usize).min(rest.len());
    Some(rest.split_at(n))
}
