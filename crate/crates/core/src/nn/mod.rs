//! Minimal dense tensors, reverse-mode differentiation, optimizers and
//! augmentation: exactly what the classifier and the guard need.

pub mod augment;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tensor;

pub use augment::{light_spec_aug, AugmentConfig, AugmentRecord};
pub use graph::{Gradients, Graph, Var};
pub use optim::{adamw_step, lr_schedule, Schedule, TrainHyper};
pub use params::{Param, ParamKind, ParamStore};
pub use tensor::Tensor;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::frontend::LogMelSpectrogram;

/// Stacks spectrograms into an `(n, 1, mels, frames)` batch.
pub fn batch_tensor(specs: &[&LogMelSpectrogram]) -> Tensor {
    let (h, w) = specs.first().map_or((0, 0), |s| s.shape());
    let mut data = Vec::with_capacity(specs.len() * h * w);
    for s in specs {
        debug_assert_eq!(s.shape(), (h, w));
        data.extend_from_slice(&s.values);
    }
    Tensor::new(vec![specs.len(), 1, h, w], data).expect("consistent spectrogram shapes")
}

/// He (fan-in) normal initialization.
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| {
        let z: f64 = rng.sample(StandardNormal);
        (z * std) as f32
    })
}
