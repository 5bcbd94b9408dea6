#![no_main]

use libfuzzer_sys::fuzz_target;
use martlab::process::LabeledPath;
use martlab::space::NormKind;

fuzz_target!(|data: &[u8]| {
    for norm in [NormKind::Lq(1.0), NormKind::Lq(2.0), NormKind::Sup] {
        let _ = LabeledPath::read_csv(data, norm);
    }
});
