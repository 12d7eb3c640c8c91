use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;

/// Uniform in `±sqrt(6 / (fan_in + fan_out))` for a `fan_in × fan_out` weight.
pub fn glorot<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    glorot_shaped(rng, &[fan_in, fan_out], fan_in, fan_out)
}

pub fn glorot_shaped<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
    t
}

/// Normal(0, 0.01) entries, used for embedding tables.
pub fn embedding<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let normal = Normal::new(0.0, 0.01).expect("valid normal");
    let mut t = Tensor::zeros(&[rows, cols]);
    for v in t.data_mut() {
        *v = normal.sample(rng);
    }
    t
}
