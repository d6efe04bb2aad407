#![no_main]

use gnskit::costmodel::DimRange;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(r) = DimRange::parse(text) {
        assert!(!r.values().is_empty());
        assert!(r.values().iter().all(|&v| v > 0));
    }
});
