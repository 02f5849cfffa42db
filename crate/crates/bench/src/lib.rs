//! Deterministic inputs for the kernel benchmarks in `benches/`.

use ordseg_core::maps::{softmax, LogitMap, ProbabilityMap, SegmentationMask};
use ordseg_core::trainer::generate_scene;

/// Square side lengths benchmarked for every kernel.
pub const SIDES: [usize; 3] = [32, 64, 128];

pub struct Fixture {
    pub logits: LogitMap,
    pub probs: ProbabilityMap,
    pub target: SegmentationMask,
}

/// Noisy synthetic scene with `k` chain classes on a `side`×`side` grid.
pub fn fixture(k: usize, side: usize) -> Fixture {
    let scene = generate_scene(k, side, side, 0.3, 7).expect("valid scene parameters");
    let probs = softmax(&scene.logits).expect("finite logits");
    Fixture {
        logits: scene.logits,
        probs,
        target: scene.clean,
    }
}
