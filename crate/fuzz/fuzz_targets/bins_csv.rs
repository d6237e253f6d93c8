//! Reliability-bin CSV decoding.

#![no_main]

use libfuzzer_sys::fuzz_target;
use metacal::metrics::BinStats;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(stats) = BinStats::from_csv(text) {
        let again = BinStats::from_csv(&stats.to_csv()).expect("written bins parse");
        assert_eq!(stats, again);
    }
});
