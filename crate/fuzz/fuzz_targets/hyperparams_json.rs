//! Learned hyper-parameter (`omega.json`) decoding.

#![no_main]

use libfuzzer_sys::fuzz_target;
use metacal::losses::HyperParams;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(om) = HyperParams::from_json(text) {
        let again = HyperParams::from_json(&om.to_json().expect("serializes")).expect("written omega parses");
        assert_eq!(om, again);
    }
});
