#![no_main]

use libfuzzer_sys::fuzz_target;
use martlab::scenario::Scenario;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(s) = Scenario::parse(text) {
        // whatever parses must survive its own canonical form
        if let Ok(canonical) = s.to_toml() {
            assert_eq!(Scenario::parse(&canonical).ok(), Some(s));
        }
    }
});
