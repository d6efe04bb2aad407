#![no_main]

use gnskit::trainer::logs::{component_series, read_layer_log};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = read_layer_log(data) {
        assert!(rows.iter().all(|r| r.g2_raw.is_finite() && r.s_raw.is_finite()));
        let _ = component_series(&rows);
    }
});
