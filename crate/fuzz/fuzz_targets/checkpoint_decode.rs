#![no_main]

use duoflow::model::checkpoint::{Checkpoint, CheckpointKind};
use libfuzzer_sys::fuzz_target;

#[path = "split.rs"]
mod split;

fuzz_target!(|data: &[u8]| {
    let Some((manifest, payload)) = split::split(data) else { return };
    if let Ok(ck) = Checkpoint::decode(manifest, payload) {
        let (m, p) = ck.encode().expect("decoded checkpoint encodes");
        assert_eq!(Checkpoint::decode(&m, &p).expect("re-decode"), ck);
        // Building the model may fail (missing tensors) but must not panic.
        match ck.manifest.kind {
            CheckpointKind::Branch => drop(ck.to_branch()),
            CheckpointKind::Bundle => drop(ck.to_bundle()),
        }
    }
});
