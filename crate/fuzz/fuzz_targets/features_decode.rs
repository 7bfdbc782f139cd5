#![no_main]

use duoflow::metrics::FeatureSet;
use libfuzzer_sys::fuzz_target;

#[path = "split.rs"]
mod split;

fuzz_target!(|data: &[u8]| {
    let Some((manifest, payload)) = split::split(data) else { return };
    if let Ok(fs) = FeatureSet::decode(manifest, payload) {
        let (m, p) = fs.encode().expect("decoded features encode");
        assert_eq!(FeatureSet::decode(&m, &p).expect("re-decode"), fs);
    }
});
