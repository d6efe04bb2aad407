#![no_main]

use gnskit::trainer::TrainConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = TrainConfig::from_json(text) {
        let back = TrainConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }
});
