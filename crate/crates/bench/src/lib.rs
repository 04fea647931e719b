//! Fixtures shared by the benchmarks.

use lexshort_core::data::EOS;
use lexshort_core::rng::SeedStream;
use lexshort_core::{Batch, Tensor};

/// Deterministic pseudo-random tensor in `[-1, 1)`.
pub fn tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut state = SeedStream::new(seed).split("bench").seed();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            state = state
                .wrapping_mul(6_364_136_223_846_793_005)
                .wrapping_add(1_442_695_040_888_963_407);
            ((state >> 40) as f32 / (1u64 << 23) as f32) - 1.0
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// `sentences` copy-task pairs of length `len` (EOS included) over ids `4..vocab`.
pub fn copy_batch(sentences: usize, len: usize, vocab: usize) -> Batch {
    let seqs: Vec<Vec<usize>> = (0..sentences)
        .map(|s| {
            let mut v: Vec<usize> = (0..len - 1).map(|i| 4 + (s * 7 + i * 3) % (vocab - 4)).collect();
            v.push(EOS);
            v
        })
        .collect();
    Batch::new(seqs.clone(), seqs).expect("non-empty batch")
}
