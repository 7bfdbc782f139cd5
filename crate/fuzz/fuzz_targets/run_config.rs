#![no_main]

use duoflow_cli::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::from_json(text) {
        let _ = cfg.validate();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).expect("resolved config parses"), cfg);
    }
});
