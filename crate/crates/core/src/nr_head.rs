//! Five-level quality classifier on the encoder's quality token.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{IqaError, Result};
use crate::params::{dropout_mask, Init, Registry};

pub const NUM_LEVELS: usize = 5;
const SUM_TOLERANCE: f64 = 1e-6;

/// Probability mass over quality levels 1..=5.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QualityDistribution([f64; NUM_LEVELS]);

impl QualityDistribution {
    /// Validates nonnegativity and unit sum (within `1e-6`).
    pub fn new(probs: [f64; NUM_LEVELS]) -> Result<Self> {
        Self::with_tolerance(probs, SUM_TOLERANCE)
    }

    pub(crate) fn with_tolerance(probs: [f64; NUM_LEVELS], tol: f64) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(IqaError::validation(format!(
                "distribution has negative or non-finite entries: {probs:?}"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > tol {
            return Err(IqaError::validation(format!(
                "distribution sums to {sum}, not 1"
            )));
        }
        Ok(Self(probs))
    }

    pub fn uniform() -> Self {
        Self([1.0 / NUM_LEVELS as f64; NUM_LEVELS])
    }

    pub fn one_hot(level: usize) -> Self {
        assert!(
            (1..=NUM_LEVELS).contains(&level),
            "level {level} outside 1..=5"
        );
        let mut p = [0.0; NUM_LEVELS];
        p[level - 1] = 1.0;
        Self(p)
    }

    pub fn probs(&self) -> &[f64; NUM_LEVELS] {
        &self.0
    }

    pub fn to_row(&self) -> Array2<f64> {
        Array2::from_shape_fn((1, NUM_LEVELS), |(_, k)| self.0[k])
    }
}

/// Expected level `sum_k k * p_k`, in `[1, 5]`.
pub fn nr_score(dist: &QualityDistribution) -> f64 {
    dist.0
        .iter()
        .enumerate()
        .map(|(k, p)| (k + 1) as f64 * p)
        .sum()
}

/// Parameters of `linear2(relu(dropout(linear1(x))))`.
#[derive(Clone, Debug)]
pub struct NrHead {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    hidden: usize,
    dropout: f64,
}

impl NrHead {
    pub fn new(
        store: &mut ParamStore,
        dim: usize,
        hidden: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Self::declare(Registry::Init { store, rng }, dim, hidden, dropout)
    }

    pub fn bind(store: &ParamStore, dim: usize, hidden: usize, dropout: f64) -> Result<Self> {
        Self::declare(Registry::Bind { store }, dim, hidden, dropout)
    }

    fn declare(mut reg: Registry<'_>, dim: usize, hidden: usize, dropout: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout) || hidden == 0 {
            return Err(IqaError::Config(format!(
                "invalid head configuration: hidden {hidden}, dropout {dropout}"
            )));
        }
        Ok(Self {
            w1: reg.param("head.fc1.weight", (dim, hidden), Init::GlorotUniform)?,
            b1: reg.param("head.fc1.bias", (1, hidden), Init::Zeros)?,
            w2: reg.param("head.fc2.weight", (hidden, NUM_LEVELS), Init::GlorotUniform)?,
            b2: reg.param("head.fc2.bias", (1, NUM_LEVELS), Init::Zeros)?,
            hidden,
            dropout,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn output_ids(&self) -> (ParamId, ParamId) {
        (self.w2, self.b2)
    }

    /// Class probabilities (`1 x 5`) for a `1 x D` quality token.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        token: Var,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let [w1, b1, w2, b2] = [self.w1, self.b1, self.w2, self.b2].map(|id| g.param(store, id));
        let mut h = g.linear(token, w1, b1);
        if let Some(rng) = dropout_rng {
            if self.dropout > 0.0 {
                let mask = dropout_mask(g.value(h).dim(), self.dropout, rng);
                h = g.mul_const(h, mask);
            }
        }
        let h = g.relu(h);
        let logits = g.linear(h, w2, b2);
        let probs = g.softmax_rows(logits);
        if g.value(probs).iter().any(|v| !v.is_finite()) {
            return Err(IqaError::NonFinite {
                location: "quality head".into(),
            });
        }
        Ok(probs)
    }

    /// Inference-mode classification of a plain quality token.
    pub fn classify(&self, token: &Array1<f64>, store: &ParamStore) -> Result<QualityDistribution> {
        if token.iter().any(|v| !v.is_finite()) {
            return Err(IqaError::NonFinite {
                location: "quality token".into(),
            });
        }
        let mut g = Graph::new();
        let x = g.constant(token.clone().insert_axis(ndarray::Axis(0)));
        let p = self.forward(&mut g, store, x, None)?;
        row_to_distribution(g.value(p).row(0).as_slice().expect("contiguous"))
    }
}

pub(crate) fn row_to_distribution(row: &[f64]) -> Result<QualityDistribution> {
    let mut p = [0.0; NUM_LEVELS];
    p.copy_from_slice(row);
    QualityDistribution::new(p)
}
