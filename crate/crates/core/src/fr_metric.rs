//! Attention-weighted structural comparison of two feature pyramids.
//!
//! For every stage and every channel (or embedding dimension) the mean and
//! covariance similarities
//!
//! ```text
//! s_mu    = (2 mu_r mu_d + c1) / (mu_r^2 + mu_d^2 + c1)
//! s_sigma = (2 cov_rd + c2)    / (var_r + var_d + c2)
//! ```
//!
//! are combined with nonnegative weights into
//! `score = 1 - sum_ij (w_mu_ij s_mu_ij + w_sigma_ij s_sigma_ij) / sum(w)`.
//! Dividing by the global weight sum makes `score(x, x) = 0` and bounds the
//! score to `[0, 2]`.

use ndarray::{Array1, Array2, Array3, Axis};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::backbone::{FeaturePyramid, FeatureStage, StageData};
use crate::error::{IqaError, Result};
use crate::params::{Init, Registry};

pub const C1: f64 = 1e-6;
pub const C2: f64 = 1e-6;

/// Below this global weight mass the uniform fallback is used.
pub const DEGENERATE_WEIGHT_SUM: f64 = 1e-12;

/// Population moments of one stage, per channel or embedding dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct StageStatistics {
    pub mu: Array1<f64>,
    pub var: Array1<f64>,
    /// Cross-covariance with the paired image's stage.
    pub cov: Array1<f64>,
}

/// `samples x channels` view of a stage: spatial positions or feature tokens
/// (the quality token in row 0 is excluded).
pub fn stage_samples(stage: &FeatureStage) -> Array2<f64> {
    match &stage.data {
        StageData::Spatial(a) => spatial_samples(a),
        StageData::Tokens(t) => t.slice(ndarray::s![1.., ..]).to_owned(),
    }
}

fn spatial_samples(a: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = a.dim();
    a.to_shape((c, h * w))
        .expect("contiguous stage")
        .t()
        .to_owned()
}

fn moments(r: &Array2<f64>, d: &Array2<f64>) -> (StageStatistics, StageStatistics) {
    let n = r.nrows() as f64;
    let mu_r = r.sum_axis(Axis(0)) / n;
    let mu_d = d.sum_axis(Axis(0)) / n;
    let cr = r - &mu_r;
    let cd = d - &mu_d;
    let var_r = (&cr * &cr).sum_axis(Axis(0)) / n;
    let var_d = (&cd * &cd).sum_axis(Axis(0)) / n;
    let cov = (&cr * &cd).sum_axis(Axis(0)) / n;
    (
        StageStatistics {
            mu: mu_r,
            var: var_r,
            cov: cov.clone(),
        },
        StageStatistics {
            mu: mu_d,
            var: var_d,
            cov,
        },
    )
}

fn check_pair(fr: &FeatureStage, fd: &FeatureStage) -> Result<()> {
    let ok = match (&fr.data, &fd.data) {
        (StageData::Spatial(a), StageData::Spatial(b)) => a.dim() == b.dim(),
        (StageData::Tokens(a), StageData::Tokens(b)) => a.dim() == b.dim() && a.nrows() >= 2,
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(IqaError::validation(format!(
            "stage {} and stage {} differ in kind or shape",
            fr.index, fd.index
        )))
    }
}

/// Per-channel mean, variance and cross-covariance of a stage pair.
pub fn stage_statistics(
    fr: &FeatureStage,
    fd: &FeatureStage,
) -> Result<(StageStatistics, StageStatistics)> {
    check_pair(fr, fd)?;
    Ok(moments(&stage_samples(fr), &stage_samples(fd)))
}

/// Mean and structure similarity terms for one channel.
pub fn similarity(
    mu_r: f64,
    mu_d: f64,
    var_r: f64,
    var_d: f64,
    cov: f64,
    c1: f64,
    c2: f64,
) -> (f64, f64) {
    let s_mu = (2.0 * (mu_r * mu_d) + c1) / ((mu_r * mu_r + mu_d * mu_d) + c1);
    let s_sigma = (2.0 * cov + c2) / ((var_r + var_d) + c2);
    (s_mu, s_sigma)
}

/// `(s_mu, s_sigma)` rows (`1 x channels`) for a constant spatial stage pair.
pub fn spatial_similarity(r: &Array3<f64>, d: &Array3<f64>) -> (Array2<f64>, Array2<f64>) {
    let (sr, sd) = moments(&spatial_samples(r), &spatial_samples(d));
    let c = sr.mu.len();
    let mut s_mu = Array2::zeros((1, c));
    let mut s_sigma = Array2::zeros((1, c));
    for j in 0..c {
        let (a, b) = similarity(sr.mu[j], sd.mu[j], sr.var[j], sd.var[j], sr.cov[j], C1, C2);
        s_mu[[0, j]] = a;
        s_sigma[[0, j]] = b;
    }
    (s_mu, s_sigma)
}

/// Scalar quality difference; 0 means identical, larger is worse.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct FrScore(pub f64);

/// Learnable nonnegative per-stage, per-channel weights on the similarity terms.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    mu: Vec<ParamId>,
    sigma: Vec<ParamId>,
    widths: Vec<usize>,
}

impl AttentionWeights {
    /// Registers weights for stages of the given widths, all initialized to 1.
    pub fn new(store: &mut ParamStore, widths: &[usize]) -> Result<Self> {
        // initialization is deterministic, no randomness needed
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        Self::declare(
            Registry::Init {
                store,
                rng: &mut rng,
            },
            widths,
        )
    }

    pub fn bind(store: &ParamStore, widths: &[usize]) -> Result<Self> {
        Self::declare(Registry::Bind { store }, widths)
    }

    fn declare(mut reg: Registry<'_>, widths: &[usize]) -> Result<Self> {
        let mut mu = Vec::new();
        let mut sigma = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            mu.push(reg.param(&format!("attention.stage{i}.mu"), (1, w), Init::Ones)?);
            sigma.push(reg.param(&format!("attention.stage{i}.sigma"), (1, w), Init::Ones)?);
        }
        Ok(Self {
            mu,
            sigma,
            widths: widths.to_vec(),
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn num_stages(&self) -> usize {
        self.widths.len()
    }

    /// `(w_mu, w_sigma)` handles of one stage.
    pub fn stage_ids(&self, stage: usize) -> (ParamId, ParamId) {
        (self.mu[stage], self.sigma[stage])
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.mu.iter().chain(&self.sigma).copied()
    }

    /// Replaces every negative entry with 0.
    pub fn clip(&self, store: &mut ParamStore) {
        for id in self.mu.iter().chain(&self.sigma) {
            clip_weights(store.get_mut(*id));
        }
    }

    pub fn total(&self, store: &ParamStore) -> f64 {
        self.ids().map(|id| store.get(id).sum()).sum()
    }

    pub fn min_entry(&self, store: &ParamStore) -> f64 {
        self.ids()
            .flat_map(|id| store.get(id).iter().copied().collect::<Vec<_>>())
            .fold(f64::INFINITY, f64::min)
    }

    /// Weights divided by their global sum, `(w_mu, w_sigma)` per stage.
    pub fn normalized(&self, store: &ParamStore) -> Vec<(Array1<f64>, Array1<f64>)> {
        let total = self.total(store);
        let (fallback, total) = if total < DEGENERATE_WEIGHT_SUM {
            (true, 2.0 * self.widths.iter().sum::<usize>() as f64)
        } else {
            (false, total)
        };
        (0..self.num_stages())
            .map(|i| {
                let get = |id: ParamId| {
                    if fallback {
                        Array1::from_elem(self.widths[i], 1.0 / total)
                    } else {
                        store.get(id).row(0).mapv(|v| v / total)
                    }
                };
                (get(self.mu[i]), get(self.sigma[i]))
            })
            .collect()
    }
}

/// In-place `max(w, 0)`.
pub fn clip_weights(w: &mut Array2<f64>) {
    w.mapv_inplace(|v| v.max(0.0));
}

/// One aligned stage pair as seen by the differentiable score.
#[derive(Clone, Copy, Debug)]
pub enum StagePair<'a> {
    /// Fixed similarity rows, e.g. pixel and CNN stages.
    Fixed {
        s_mu: &'a Array2<f64>,
        s_sigma: &'a Array2<f64>,
    },
    /// Encoder outputs `(N + 1) x D` for reference and distorted inputs.
    Tokens { reference: Var, distorted: Var },
}

fn token_similarity(g: &mut Graph, r: Var, d: Var) -> (Var, Var) {
    let n = g.value(r).nrows() - 1;
    let fr = g.slice_rows(r, 1, n);
    let fd = g.slice_rows(d, 1, n);
    let mu_r = g.mean_rows(fr);
    let mu_d = g.mean_rows(fd);
    let cr = g.sub(fr, mu_r);
    let cd = g.sub(fd, mu_d);
    let sq_r = g.mul(cr, cr);
    let sq_d = g.mul(cd, cd);
    let cross = g.mul(cr, cd);
    let var_r = g.mean_rows(sq_r);
    let var_d = g.mean_rows(sq_d);
    let cov = g.mean_rows(cross);

    let prod = g.mul(mu_r, mu_d);
    let num = g.scale(prod, 2.0);
    let num = g.add_scalar(num, C1);
    let mr2 = g.mul(mu_r, mu_r);
    let md2 = g.mul(mu_d, mu_d);
    let den = g.add(mr2, md2);
    let den = g.add_scalar(den, C1);
    let s_mu = g.div(num, den);

    let num = g.scale(cov, 2.0);
    let num = g.add_scalar(num, C2);
    let den = g.add(var_r, var_d);
    let den = g.add_scalar(den, C2);
    let s_sigma = g.div(num, den);
    (s_mu, s_sigma)
}

/// Builds the score on `g`. Gradients flow into the attention weights and,
/// through token stages, into whatever produced those tokens.
pub fn fr_score_graph(
    g: &mut Graph,
    store: &ParamStore,
    weights: &AttentionWeights,
    stages: &[StagePair<'_>],
) -> Result<Var> {
    if stages.len() != weights.num_stages() {
        return Err(IqaError::validation(format!(
            "{} stage pairs but {} weighted stages",
            stages.len(),
            weights.num_stages()
        )));
    }
    let fallback = weights.total(store) < DEGENERATE_WEIGHT_SUM;
    if fallback {
        log::warn!("attention weights sum to ~0 after clipping; using uniform weights");
    }
    let mut terms = Vec::with_capacity(stages.len());
    let mut masses = Vec::with_capacity(stages.len());
    for (i, pair) in stages.iter().enumerate() {
        let (s_mu, s_sigma) = match *pair {
            StagePair::Fixed { s_mu, s_sigma } => {
                (g.constant(s_mu.clone()), g.constant(s_sigma.clone()))
            }
            StagePair::Tokens {
                reference,
                distorted,
            } => token_similarity(g, reference, distorted),
        };
        let width = g.value(s_mu).ncols();
        if width != weights.widths[i] {
            return Err(IqaError::validation(format!(
                "stage {i} has width {width}, weights expect {}",
                weights.widths[i]
            )));
        }
        let (w_mu, w_sigma) = if fallback {
            let ones = Array2::ones((1, width));
            (g.constant(ones.clone()), g.constant(ones))
        } else {
            (
                g.param(store, weights.mu[i]),
                g.param(store, weights.sigma[i]),
            )
        };
        let a = g.mul(w_mu, s_mu);
        let b = g.mul(w_sigma, s_sigma);
        let a = g.sum_all(a);
        let b = g.sum_all(b);
        terms.push(g.add(a, b));
        let ma = g.sum_all(w_mu);
        let mb = g.sum_all(w_sigma);
        masses.push(g.add(ma, mb));
    }
    let weighted = sum_vars(g, &terms);
    let mass = sum_vars(g, &masses);
    let ratio = g.div(weighted, mass);
    let neg = g.scale(ratio, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

fn sum_vars(g: &mut Graph, vars: &[Var]) -> Var {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v);
    }
    acc
}

/// Score of two fully populated, stage-aligned pyramids.
pub fn fr_score(
    reference: &FeaturePyramid,
    distorted: &FeaturePyramid,
    weights: &AttentionWeights,
    store: &ParamStore,
) -> Result<FrScore> {
    if reference.stages.len() != distorted.stages.len() {
        return Err(IqaError::validation(format!(
            "pyramids have {} and {} stages",
            reference.stages.len(),
            distorted.stages.len()
        )));
    }
    let mut g = Graph::new();
    let mut fixed = Vec::new();
    for (r, d) in reference.stages.iter().zip(&distorted.stages) {
        check_pair(r, d)?;
        if let (StageData::Spatial(a), StageData::Spatial(b)) = (&r.data, &d.data) {
            fixed.push(Some(spatial_similarity(a, b)));
        } else {
            fixed.push(None);
        }
    }
    let mut pairs = Vec::with_capacity(fixed.len());
    for ((r, d), f) in reference.stages.iter().zip(&distorted.stages).zip(&fixed) {
        match (f, &r.data, &d.data) {
            (Some((s_mu, s_sigma)), _, _) => pairs.push(StagePair::Fixed { s_mu, s_sigma }),
            (None, StageData::Tokens(a), StageData::Tokens(b)) => {
                let reference = g.constant(a.clone());
                let distorted = g.constant(b.clone());
                pairs.push(StagePair::Tokens {
                    reference,
                    distorted,
                });
            }
            _ => unreachable!("checked by check_pair"),
        }
    }
    let score = fr_score_graph(&mut g, store, weights, &pairs)?;
    Ok(FrScore(g.scalar(score)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spatial(index: usize, data: Array3<f64>) -> FeatureStage {
        FeatureStage {
            index,
            data: StageData::Spatial(data),
        }
    }

    #[test]
    fn constant_stages_have_zero_spread() {
        let r = spatial(0, Array3::from_elem((2, 3, 3), 0.7));
        let d = spatial(0, Array3::from_elem((2, 3, 3), 0.2));
        let (sr, sd) = stage_statistics(&r, &d).unwrap();
        assert!(sr
            .var
            .iter()
            .chain(sd.var.iter())
            .chain(sr.cov.iter())
            .all(|&v| v.abs() < 1e-15));
        assert!((sr.mu[0] - 0.7).abs() < 1e-15 && (sd.mu[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn self_covariance_equals_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = spatial(1, Array3::from_shape_fn((3, 4, 5), |_| rng.random()));
        let (sr, _) = stage_statistics(&a, &a).unwrap();
        assert_eq!(sr.cov, sr.var);
    }

    #[test]
    fn two_pixel_hand_example() {
        let r = spatial(
            0,
            Array3::from_shape_vec((1, 1, 2), vec![0.0, 2.0]).unwrap(),
        );
        let d = spatial(
            0,
            Array3::from_shape_vec((1, 1, 2), vec![1.0, 3.0]).unwrap(),
        );
        let (sr, sd) = stage_statistics(&r, &d).unwrap();
        assert_eq!((sr.mu[0], sd.mu[0]), (1.0, 2.0));
        assert_eq!((sr.var[0], sd.var[0]), (1.0, 1.0));
        assert_eq!(sr.cov[0], 1.0);
    }

    #[test]
    fn token_statistics_skip_the_quality_token() {
        let r = FeatureStage {
            index: 6,
            data: StageData::Tokens(array![[100.0], [0.0], [2.0]]),
        };
        let d = FeatureStage {
            index: 6,
            data: StageData::Tokens(array![[-50.0], [1.0], [3.0]]),
        };
        let (sr, sd) = stage_statistics(&r, &d).unwrap();
        assert_eq!((sr.mu[0], sd.mu[0], sr.cov[0]), (1.0, 2.0, 1.0));
    }

    #[test]
    fn mismatched_stages_are_rejected() {
        let r = spatial(0, Array3::zeros((1, 2, 2)));
        let d = spatial(0, Array3::zeros((1, 2, 3)));
        assert!(stage_statistics(&r, &d).is_err());
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(similarity(0.4, 0.4, 0.2, 0.2, 0.2, C1, C2), (1.0, 1.0));
        let (s_mu, _) = similarity(1.0, 0.0, 0.0, 0.0, 0.0, 1e-6, 1e-6);
        assert!((s_mu - 1e-6 / (1.0 + 1e-6)).abs() < 1e-18);
        assert_eq!(similarity(0.0, 0.0, 0.0, 0.0, 0.0, C1, 1e-3).1, 1.0);
    }

    #[test]
    fn toy_pyramid_score() {
        let mut store = ParamStore::new();
        let w = AttentionWeights::new(&mut store, &[1]).unwrap();
        store.get_mut(w.mu[0]).fill(0.6);
        store.get_mut(w.sigma[0]).fill(0.4);
        let pyr = |v: f64| FeaturePyramid {
            stages: vec![spatial(0, Array3::from_elem((1, 4, 4), v))],
            backbone_id: "toy".into(),
        };
        let score = fr_score(&pyr(1.0), &pyr(0.0), &w, &store).unwrap().0;
        let expected = 1.0 - (0.6 * (1e-6 / (1.0 + 1e-6)) + 0.4);
        assert!((score - expected).abs() < 1e-12);
        assert!((score - 0.6).abs() < 1e-5);
        assert_eq!(fr_score(&pyr(0.3), &pyr(0.3), &w, &store).unwrap().0, 0.0);
    }

    #[test]
    fn clipping() {
        let mut w = array![[-0.3, 0.5, 0.0]];
        clip_weights(&mut w);
        assert_eq!(w, array![[0.0, 0.5, 0.0]]);
        let mut neg = array![[-1.0, -2.0]];
        clip_weights(&mut neg);
        assert_eq!(neg, array![[0.0, 0.0]]);
    }

    #[test]
    fn degenerate_weights_fall_back_to_uniform() {
        let mut store = ParamStore::new();
        let w = AttentionWeights::new(&mut store, &[2]).unwrap();
        store.get_mut(w.mu[0]).fill(-1.0);
        store.get_mut(w.sigma[0]).fill(-1.0);
        w.clip(&mut store);
        assert_eq!(w.total(&store), 0.0);
        let norm = w.normalized(&store);
        assert_eq!(norm[0].0, array![0.25, 0.25]);
        let r = FeaturePyramid {
            stages: vec![spatial(0, Array3::from_elem((2, 2, 2), 1.0))],
            backbone_id: "toy".into(),
        };
        let d = FeaturePyramid {
            stages: vec![spatial(0, Array3::from_elem((2, 2, 2), 0.0))],
            backbone_id: "toy".into(),
        };
        let s = fr_score(&r, &d, &w, &store).unwrap().0;
        assert!(s.is_finite() && s > 0.0);
    }
}
