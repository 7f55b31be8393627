//! Deterministic fixtures shared by the benchmarks in `benches/`.

use fundus_core::synthdata::{generate_image, SynthSpec};
use fundus_core::{Label, PlanarImage, Tensor};

/// Tensor of the given shape filled with a fixed pseudo-random pattern in `[-1, 1]`.
pub fn pattern(shape: &[usize], seed: f32) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|i| (i as f32 * 0.618 + seed).sin()).collect())
}

/// Logits and labels for a batch of `b` binary examples.
pub fn logits(b: usize, seed: f64) -> (Vec<f64>, Vec<usize>) {
    let z = (0..2 * b).map(|i| 3.0 * (i as f64 * 1.7 + seed).sin()).collect();
    let y = (0..b).map(|i| i % 2).collect();
    (z, y)
}

pub fn fundus_image(size: usize) -> PlanarImage {
    let spec = SynthSpec {
        image_size: size,
        ..SynthSpec::default()
    };
    generate_image(Label::Cataract, &spec, 0)
}
