//! Run report decoding and schema validation.

#![no_main]

use libfuzzer_sys::fuzz_target;
use metacal::meta::RunReport;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(report) = RunReport::from_json(text) {
        let again = RunReport::from_json(&report.to_json().expect("serializes")).expect("written report parses");
        assert_eq!(report, again);
        let _ = report.trajectory_csv();
    }
});
