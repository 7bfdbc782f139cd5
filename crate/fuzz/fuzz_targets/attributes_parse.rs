#![no_main]

use duoflow::world::Attributes;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(a) = Attributes::parse(text) {
        assert_eq!(Attributes::parse(&a.to_string()).expect("display parses"), a);
        assert_eq!(Attributes::from_token_ids(&a.token_ids()).expect("tokens decode"), a);
    }
});
