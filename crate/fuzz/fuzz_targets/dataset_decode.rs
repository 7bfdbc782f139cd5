#![no_main]

use duoflow::world::dataset::Dataset;
use libfuzzer_sys::fuzz_target;

#[path = "split.rs"]
mod split;

fuzz_target!(|data: &[u8]| {
    let Some((manifest, payload)) = split::split(data) else { return };
    if let Ok(ds) = Dataset::decode(manifest, payload) {
        let (m, p) = ds.encode().expect("decoded dataset encodes");
        assert_eq!(Dataset::decode(&m, &p).expect("re-decode"), ds);
    }
});
