//! Shared fixtures for the criterion benchmarks under `benches/`.

use versemi_core::data::{generate_synthetic_corpus, split_corpus, BinaryMask, Corpus, Shape3, SplitPlan};
use versemi_core::TaskRegistry;

/// Solid ball of radius `r` centred at `c`.
pub fn ball(shape: Shape3, c: [f64; 3], r: f64) -> BinaryMask {
    BinaryMask::from_fn(shape, |z, y, x| {
        let d = [z as f64 - c[0], y as f64 - c[1], x as f64 - c[2]];
        d.iter().map(|v| v * v).sum::<f64>() <= r * r
    })
}

/// Desk-scale corpus: four tasks of `n` volumes with side `side`.
pub fn desk_corpus(n: usize, side: usize) -> (TaskRegistry, Corpus, SplitPlan) {
    let reg = TaskRegistry::new(&["lumpy", "sphere", "bean", "multifocal"]).expect("valid names");
    let corpus = generate_synthetic_corpus(n, Shape3::cube(side), &reg, 7).expect("valid corpus request");
    let split = split_corpus(&corpus.manifest, 0.1, 7).expect("enough samples");
    (reg, corpus, split)
}
