#![no_main]

use libfuzzer_sys::fuzz_target;
use martlab::scenario::parse_space_arg;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(space) = parse_space_arg(text) {
        assert!(space.dim() > 0);
    }
});
