//! Metric-comparison CSV decoding and the correlation summary over it.

#![no_main]

use libfuzzer_sys::fuzz_target;
use metacal::fidelity::{rows_from_csv, rows_to_csv, summarize};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(rows) = rows_from_csv(text) {
        if let Ok(csv) = rows_to_csv(&rows) {
            assert_eq!(rows_from_csv(&csv).expect("written rows parse"), rows);
        }
        let _ = summarize(&rows);
    }
});
