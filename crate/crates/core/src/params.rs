//! Declaring learnable parameters once for both initialization and lookup.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{ParamId, ParamStore};
use crate::error::{IqaError, Result};

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    /// Normal with the given std, resampled outside two standard deviations.
    TruncNormal(f64),
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))` for a `fan_in x fan_out` matrix.
    GlorotUniform,
    Zeros,
    Ones,
}

fn sample(init: Init, shape: (usize, usize), rng: &mut ChaCha8Rng) -> Array2<f64> {
    match init {
        Init::Zeros => Array2::zeros(shape),
        Init::Ones => Array2::ones(shape),
        Init::GlorotUniform => {
            let limit = (6.0 / (shape.0 + shape.1) as f64).sqrt();
            Array2::from_shape_fn(shape, |_| rng.random_range(-limit..limit))
        }
        Init::TruncNormal(std) => Array2::from_shape_fn(shape, |_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        }),
    }
}

/// Either creates fresh parameters or resolves existing ones by name.
pub(crate) enum Registry<'a> {
    Init {
        store: &'a mut ParamStore,
        rng: &'a mut ChaCha8Rng,
    },
    Bind {
        store: &'a ParamStore,
    },
}

impl Registry<'_> {
    pub(crate) fn param(
        &mut self,
        name: &str,
        shape: (usize, usize),
        init: Init,
    ) -> Result<ParamId> {
        match self {
            Registry::Init { store, rng } => {
                let value = sample(init, shape, rng);
                Ok(store.insert(name, value))
            }
            Registry::Bind { store } => {
                let id = store
                    .id(name)
                    .ok_or_else(|| IqaError::Config(format!("missing parameter {name}")))?;
                let found = store.get(id).dim();
                if found != shape {
                    return Err(IqaError::Config(format!(
                        "parameter {name} has shape {found:?}, expected {shape:?}"
                    )));
                }
                Ok(id)
            }
        }
    }
}

/// Inverted-dropout mask: kept entries are scaled by `1 / (1 - rate)`.
pub(crate) fn dropout_mask(shape: (usize, usize), rate: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let keep = 1.0 - rate;
    Array2::from_shape_fn(shape, |_| {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    })
}
