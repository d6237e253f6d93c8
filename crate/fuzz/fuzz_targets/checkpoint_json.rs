//! Model checkpoint decoding.

#![no_main]

use libfuzzer_sys::fuzz_target;
use metacal::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(params) = Checkpoint::parse(text) {
        let json = Checkpoint::from_params(&params).to_json().expect("serializes");
        assert_eq!(Checkpoint::parse(&json).expect("written checkpoint parses"), params);
    }
});
