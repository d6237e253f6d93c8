//! Dataset CSV decoding: arbitrary text must not panic, and anything that
//! parses must survive a write/read round trip.

#![no_main]

use libfuzzer_sys::fuzz_target;
use metacal::data::Dataset;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(ds) = Dataset::from_csv(text, "fuzz") {
        let again = Dataset::from_csv(&ds.to_csv(), "fuzz").expect("written CSV parses");
        assert_eq!(ds, again);
    }
});
