//! Config files and `key=value` overrides. The first line is the config
//! file, every further line one override.

#![no_main]

use libfuzzer_sys::fuzz_target;
use metacal::meta::TrainConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let mut lines = text.lines();
    let file = lines.next().unwrap_or("{}");
    if let Ok(cfg) = TrainConfig::from_json(file) {
        let again = TrainConfig::from_json(&cfg.to_json().expect("serializes")).expect("written config parses");
        assert_eq!(cfg, again);
    }
    let overrides: Vec<String> = lines.map(str::to_string).collect();
    if let Ok(base) = serde_json::from_str(file) {
        let _ = TrainConfig::with_overrides(base, &overrides);
    }
});
