#![allow(dead_code)]

use csrnet::autograd::LayerGraph;
use csrnet::model::init_params;
use csrnet::tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-1.0..1.0)).unwrap())
}

/// Random values with magnitude in `[lo, 1]` and random sign.
pub fn away_from_zero(shape: &[usize], lo: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(lo..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Fill every parameter (biases included) with uniform noise in ±`scale`.
pub fn randomize_params(g: &mut LayerGraph<f64>, scale: f64, rng: &mut ChaCha8Rng) {
    for p in g.params_mut() {
        for v in p.value.data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

/// Seed-initialised weights plus small random biases, so that no bias sits
/// exactly at a ReLU kink.
pub fn init_with_biases(g: &mut LayerGraph<f64>, seed: u64) {
    init_params(g, seed);
    let mut r = rng(seed ^ 0xb1a5);
    for p in g.params_mut() {
        if p.name.ends_with(".bias") {
            for v in p.value.data_mut() {
                *v = r.random_range(-0.1..0.1);
            }
        }
    }
}

pub fn assert_bitwise<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) {
    assert_eq!(a.shape(), b.shape());
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        assert!(
            x.to_f64().unwrap().to_bits() == y.to_f64().unwrap().to_bits(),
            "element {i}: {x:?} vs {y:?}"
        );
    }
}
