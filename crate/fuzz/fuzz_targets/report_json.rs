#![no_main]

use libfuzzer_sys::fuzz_target;
use martlab::scenario::Report;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(r) = Report::from_json(text) {
        let _ = r.failures().count();
        let _ = r.to_json();
    }
});
