#![no_main]

use gnskit::tensor::{contract, ContractionSpec};
use gnskit::Tensor;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if ContractionSpec::parse(text).is_err() {
        return;
    }
    // Small operands of every rank up to 3 so valid specs also exercise evaluation.
    let shapes: [&[usize]; 4] = [&[], &[2], &[2, 2], &[2, 2, 2]];
    let ops: Vec<Tensor> = shapes
        .iter()
        .map(|s| Tensor::new(s.to_vec(), vec![1.0; s.iter().product()]).unwrap())
        .collect();
    for a in &ops {
        let _ = contract(text, &[a]);
        for b in &ops {
            let _ = contract(text, &[a, b]);
        }
    }
});
