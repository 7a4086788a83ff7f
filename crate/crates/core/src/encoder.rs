//! Shallow post-norm transformer encoder over the deepest CNN stage.
//!
//! The stage is projected to `D` dimensions by a 1x1 convolution, flattened
//! row-major into `N` tokens, prefixed with a learnable quality token and
//! offset by learnable positional embeddings. Each layer then applies
//!
//! ```text
//! y* = LN(MHA(y) + y)
//! y' = LN(MLP(y*) + y*)
//! ```
//!
//! One [`Encoder`] instance is shared by the reference and distorted inputs
//! and by both scoring branches.

use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::backbone::{FeatureStage, StageData};
use crate::error::{IqaError, Result};
use crate::params::{dropout_mask, Init, Registry};

pub const LAYER_NORM_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
    pub max_tokens: usize,
}

impl EncoderConfig {
    /// Full-reference preset: 2 layers, D = 256, 4 heads, MLP 1024.
    pub fn fr_preset() -> Self {
        Self {
            layers: 2,
            dim: 256,
            heads: 4,
            mlp_hidden: 1024,
            dropout: 0.0,
            max_tokens: 512,
        }
    }

    /// No-reference preset: 2 layers, D = 32, 8 heads, MLP 64, dropout 0.1.
    pub fn nr_preset() -> Self {
        Self {
            layers: 2,
            dim: 32,
            heads: 8,
            mlp_hidden: 64,
            dropout: 0.1,
            max_tokens: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(IqaError::Config("encoder needs at least one layer".into()));
        }
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(IqaError::Config(format!(
                "model dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.max_tokens == 0 || self.mlp_hidden == 0 {
            return Err(IqaError::Config(
                "max_tokens and mlp_hidden must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(IqaError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Encoder output rows: index 0 is the quality token, the rest are the
/// `grid.0 * grid.1` feature tokens in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Array2<f64>,
    pub grid_shape: (usize, usize),
}

impl TokenSequence {
    pub fn num_feature_tokens(&self) -> usize {
        self.tokens.nrows() - 1
    }
}

/// Flattened CNN features ready for projection: `N x C`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub features: Array2<f64>,
    pub grid_shape: (usize, usize),
}

/// Average-pools by 2 per axis until `H * W <= max_tokens`, then flattens
/// row-major so token `y * W + x` holds position `(y, x)`.
pub fn grid_tokens(feature: &Array3<f64>, max_tokens: usize) -> TokenGrid {
    let mut x = feature.clone();
    while x.dim().1 * x.dim().2 > max_tokens {
        x = avg_pool2(&x);
    }
    let (c, h, w) = x.dim();
    let features = Array2::from_shape_fn((h * w, c), |(t, ch)| x[[ch, t / w, t % w]]);
    TokenGrid {
        features,
        grid_shape: (h, w),
    }
}

fn avg_pool2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let (fy, fx) = (if h >= 2 { 2 } else { 1 }, if w >= 2 { 2 } else { 1 });
    let norm = (fy * fx) as f64;
    Array3::from_shape_fn((c, h / fy, w / fx), |(ch, y, xx)| {
        let mut acc = 0.0;
        for dy in 0..fy {
            for dx in 0..fx {
                acc += x[[ch, y * fy + dy, xx * fx + dx]];
            }
        }
        acc / norm
    })
}

#[derive(Clone, Debug)]
struct LayerParams {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_gamma: ParamId,
    ln1_beta: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_gamma: ParamId,
    ln2_beta: ParamId,
}

/// Parameter handles of the encoder; values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    in_channels: usize,
    proj_w: ParamId,
    proj_b: ParamId,
    quality_token: ParamId,
    pos_embed: ParamId,
    layers: Vec<LayerParams>,
}

impl Encoder {
    /// Registers freshly initialized parameters.
    pub fn new(
        store: &mut ParamStore,
        config: EncoderConfig,
        in_channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Self::declare(Registry::Init { store, rng }, config, in_channels)
    }

    /// Resolves parameters already present in `store`.
    pub fn bind(store: &ParamStore, config: EncoderConfig, in_channels: usize) -> Result<Self> {
        Self::declare(Registry::Bind { store }, config, in_channels)
    }

    fn declare(mut reg: Registry<'_>, config: EncoderConfig, in_channels: usize) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let h = config.mlp_hidden;
        let tn = Init::TruncNormal(INIT_STD);
        let proj_w = reg.param("encoder.proj.weight", (in_channels, d), tn)?;
        let proj_b = reg.param("encoder.proj.bias", (1, d), Init::Zeros)?;
        let quality_token = reg.param("encoder.quality_token", (1, d), tn)?;
        let pos_embed = reg.param("encoder.pos_embed", (config.max_tokens + 1, d), tn)?;
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = |s: &str| format!("encoder.layers.{l}.{s}");
            layers.push(LayerParams {
                wq: reg.param(&p("attn.q.weight"), (d, d), Init::GlorotUniform)?,
                bq: reg.param(&p("attn.q.bias"), (1, d), Init::Zeros)?,
                wk: reg.param(&p("attn.k.weight"), (d, d), Init::GlorotUniform)?,
                bk: reg.param(&p("attn.k.bias"), (1, d), Init::Zeros)?,
                wv: reg.param(&p("attn.v.weight"), (d, d), Init::GlorotUniform)?,
                bv: reg.param(&p("attn.v.bias"), (1, d), Init::Zeros)?,
                wo: reg.param(&p("attn.out.weight"), (d, d), Init::GlorotUniform)?,
                bo: reg.param(&p("attn.out.bias"), (1, d), Init::Zeros)?,
                ln1_gamma: reg.param(&p("norm1.gamma"), (1, d), Init::Ones)?,
                ln1_beta: reg.param(&p("norm1.beta"), (1, d), Init::Zeros)?,
                w1: reg.param(&p("mlp.fc1.weight"), (d, h), Init::GlorotUniform)?,
                b1: reg.param(&p("mlp.fc1.bias"), (1, h), Init::Zeros)?,
                w2: reg.param(&p("mlp.fc2.weight"), (h, d), Init::GlorotUniform)?,
                b2: reg.param(&p("mlp.fc2.bias"), (1, d), Init::Zeros)?,
                ln2_gamma: reg.param(&p("norm2.gamma"), (1, d), Init::Ones)?,
                ln2_beta: reg.param(&p("norm2.beta"), (1, d), Init::Zeros)?,
            });
        }
        Ok(Self {
            config,
            in_channels,
            proj_w,
            proj_b,
            quality_token,
            pos_embed,
            layers,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn quality_token_id(&self) -> ParamId {
        self.quality_token
    }

    pub fn pos_embed_id(&self) -> ParamId {
        self.pos_embed
    }

    pub fn projection_ids(&self) -> (ParamId, ParamId) {
        (self.proj_w, self.proj_b)
    }

    /// Builds `y0 = [f_q + p_q, f_1 + p_1, ..., f_N + p_N]` on the graph.
    pub fn project(&self, g: &mut Graph, store: &ParamStore, grid: &TokenGrid) -> Result<Var> {
        let c = grid.features.ncols();
        if c != self.in_channels {
            return Err(IqaError::Config(format!(
                "encoder projection expects {} channels, stage has {c}",
                self.in_channels
            )));
        }
        let n = grid.features.nrows();
        if n > self.config.max_tokens {
            return Err(IqaError::Config(format!(
                "{n} tokens exceed max_tokens {}",
                self.config.max_tokens
            )));
        }
        let x = g.constant(grid.features.clone());
        let w = g.param(store, self.proj_w);
        let b = g.param(store, self.proj_b);
        let feats = g.linear(x, w, b);
        let q = g.param(store, self.quality_token);
        let seq = g.concat_rows(&[q, feats]);
        let table = g.param(store, self.pos_embed);
        let pos = g.slice_rows(table, 0, n + 1);
        Ok(g.add(seq, pos))
    }

    /// Runs all layers, returning every layer's output. Dropout is applied
    /// inside the MLP blocks only when `dropout_rng` is given.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        y0: Var,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<Var>> {
        let d = self.config.dim;
        let heads = self.config.heads;
        let head_dim = d / heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut y = y0;
        let mut outputs = Vec::with_capacity(self.layers.len());
        for (l, p) in self.layers.iter().enumerate() {
            let [wq, bq, wk, bk, wv, bv, wo, bo] =
                [p.wq, p.bq, p.wk, p.bk, p.wv, p.bv, p.wo, p.bo].map(|id| g.param(store, id));
            let q = g.linear(y, wq, bq);
            let k = g.linear(y, wk, bk);
            let v = g.linear(y, wv, bv);
            let mut head_outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = g.slice_cols(q, h * head_dim, head_dim);
                let kh = g.slice_cols(k, h * head_dim, head_dim);
                let vh = g.slice_cols(v, h * head_dim, head_dim);
                let kt = g.transpose(kh);
                let logits = g.matmul(qh, kt);
                let logits = g.scale(logits, scale);
                let attn = g.softmax_rows(logits);
                head_outs.push(g.matmul(attn, vh));
            }
            let cat = if heads == 1 {
                head_outs[0]
            } else {
                g.concat_cols(&head_outs)
            };
            let mha = g.linear(cat, wo, bo);
            let res1 = g.add(mha, y);
            let [g1, b1n] = [p.ln1_gamma, p.ln1_beta].map(|id| g.param(store, id));
            let y_star = g.layer_norm(res1, g1, b1n, LAYER_NORM_EPS);

            let [w1, b1, w2, b2] = [p.w1, p.b1, p.w2, p.b2].map(|id| g.param(store, id));
            let hidden = g.linear(y_star, w1, b1);
            let mut hidden = g.gelu(hidden);
            if let Some(rng) = dropout_rng.as_deref_mut() {
                if self.config.dropout > 0.0 {
                    let mask = dropout_mask(g.value(hidden).dim(), self.config.dropout, rng);
                    hidden = g.mul_const(hidden, mask);
                }
            }
            let mlp = g.linear(hidden, w2, b2);
            let res2 = g.add(mlp, y_star);
            let [g2, b2n] = [p.ln2_gamma, p.ln2_beta].map(|id| g.param(store, id));
            y = g.layer_norm(res2, g2, b2n, LAYER_NORM_EPS);
            if g.value(y).iter().any(|v| !v.is_finite()) {
                return Err(IqaError::NonFinite {
                    location: format!("encoder layer {}", l + 1),
                });
            }
            outputs.push(y);
        }
        Ok(outputs)
    }

    /// Projects a spatial stage into the pre-encoding sequence `y0`.
    pub fn project_tokens(
        &self,
        stage: &FeatureStage,
        store: &ParamStore,
    ) -> Result<TokenSequence> {
        let StageData::Spatial(map) = &stage.data else {
            return Err(IqaError::Config(
                "projection requires a spatial stage".into(),
            ));
        };
        let grid = grid_tokens(map, self.config.max_tokens);
        let mut g = Graph::new();
        let y0 = self.project(&mut g, store, &grid)?;
        Ok(TokenSequence {
            tokens: g.value(y0).clone(),
            grid_shape: grid.grid_shape,
        })
    }

    /// Inference-mode encoding of an existing `y0`.
    pub fn encode_tokens(
        &self,
        y0: &TokenSequence,
        store: &ParamStore,
    ) -> Result<Vec<TokenSequence>> {
        if y0.tokens.ncols() != self.config.dim {
            return Err(IqaError::Config(format!(
                "token width {} differs from model dim {}",
                y0.tokens.ncols(),
                self.config.dim
            )));
        }
        let mut g = Graph::new();
        let y = g.constant(y0.tokens.clone());
        let outs = self.encode(&mut g, store, y, None)?;
        Ok(outs
            .into_iter()
            .map(|v| TokenSequence {
                tokens: g.value(v).clone(),
                grid_shape: y0.grid_shape,
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn toy(dim: usize, heads: usize, in_ch: usize, seed: u64) -> (ParamStore, Encoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = EncoderConfig {
            layers: 2,
            dim,
            heads,
            mlp_hidden: 2 * dim,
            dropout: 0.1,
            max_tokens: 512,
        };
        let enc = Encoder::new(&mut store, cfg, in_ch, &mut rng).unwrap();
        (store, enc)
    }

    fn spatial(c: usize, h: usize, w: usize, seed: u64) -> FeatureStage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureStage {
            index: 5,
            data: StageData::Spatial(Array3::from_shape_fn((c, h, w), |_| rng.random::<f64>())),
        }
    }

    #[test]
    fn projection_shapes() {
        let (store, enc) = toy(256, 4, 512, 0);
        let y0 = enc.project_tokens(&spatial(512, 8, 8, 1), &store).unwrap();
        assert_eq!(y0.tokens.dim(), (65, 256));
        assert_eq!(y0.grid_shape, (8, 8));
        let outs = enc.encode_tokens(&y0, &store).unwrap();
        assert_eq!(outs.len(), 2);
        assert!(outs.iter().all(|o| o.tokens.dim() == (65, 256)));
    }

    #[test]
    fn large_grid_is_pooled_below_max_tokens() {
        let grid = grid_tokens(&Array3::zeros((4, 32, 32)), 512);
        assert_eq!(grid.grid_shape, (16, 16));
        assert_eq!(grid.features.dim(), (256, 4));
        let grid = grid_tokens(&Array3::zeros((4, 32, 32)), 1024);
        assert_eq!(grid.grid_shape, (32, 32));
    }

    #[test]
    fn flattening_is_row_major() {
        let map = Array3::from_shape_fn((2, 3, 4), |(c, y, x)| (c * 100 + y * 10 + x) as f64);
        let grid = grid_tokens(&map, 512);
        assert_eq!(grid.features[[0, 0]], 0.0);
        assert_eq!(grid.features[[5, 1]], 111.0); // token 5 = (1, 1)
        assert_eq!(grid.features[[11, 0]], 23.0);
    }

    #[test]
    fn zero_embeddings_and_identity_projection_pass_features_through() {
        let (mut store, enc) = toy(4, 2, 4, 2);
        *store.get_mut(enc.proj_w) = Array2::eye(4);
        store.get_mut(enc.pos_embed).fill(0.0);
        store.get_mut(enc.quality_token).fill(0.0);
        let stage = spatial(4, 2, 3, 3);
        let y0 = enc.project_tokens(&stage, &store).unwrap();
        let grid = grid_tokens(
            match &stage.data {
                StageData::Spatial(a) => a,
                _ => unreachable!(),
            },
            512,
        );
        assert!(y0.tokens.row(0).iter().all(|&v| v == 0.0));
        for j in 0..6 {
            assert_eq!(y0.tokens.row(j + 1), grid.features.row(j));
        }
    }

    #[test]
    fn channel_mismatch_is_a_config_error() {
        let (store, enc) = toy(8, 2, 16, 0);
        assert!(matches!(
            enc.project_tokens(&spatial(8, 4, 4, 0), &store),
            Err(IqaError::Config(_))
        ));
    }

    #[test]
    fn inference_is_deterministic_and_training_dropout_is_not() {
        let (store, enc) = toy(16, 4, 8, 5);
        let y0 = enc.project_tokens(&spatial(8, 4, 4, 6), &store).unwrap();
        assert_eq!(
            enc.encode_tokens(&y0, &store).unwrap(),
            enc.encode_tokens(&y0, &store).unwrap()
        );
        let mut g = Graph::new();
        let y = g.constant(y0.tokens.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let train = enc.encode(&mut g, &store, y, Some(&mut rng)).unwrap();
        let eval = enc.encode_tokens(&y0, &store).unwrap();
        assert_ne!(g.value(train[1]), &eval[1].tokens);
    }

    #[test]
    fn permutation_equivariant_without_positions() {
        let (mut store, enc) = toy(16, 4, 8, 7);
        store.get_mut(enc.pos_embed).fill(0.0);
        let y0 = enc.project_tokens(&spatial(8, 3, 3, 8), &store).unwrap();
        let perm = [4usize, 2, 7, 0, 8, 1, 3, 6, 5];
        let mut permuted = y0.clone();
        for (dst, &src) in perm.iter().enumerate() {
            permuted
                .tokens
                .row_mut(dst + 1)
                .assign(&y0.tokens.row(src + 1));
        }
        let a = enc.encode_tokens(&y0, &store).unwrap();
        let b = enc.encode_tokens(&permuted, &store).unwrap();
        for (la, lb) in a.iter().zip(&b) {
            for d in 0..16 {
                assert!((la.tokens[[0, d]] - lb.tokens[[0, d]]).abs() < 1e-12);
            }
            for (dst, &src) in perm.iter().enumerate() {
                for d in 0..16 {
                    assert!((lb.tokens[[dst + 1, d]] - la.tokens[[src + 1, d]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn layer_outputs_are_normalized_per_token() {
        let (store, enc) = toy(16, 4, 8, 9);
        let y0 = enc.project_tokens(&spatial(8, 4, 4, 10), &store).unwrap();
        // gamma = 1, beta = 0 at initialization
        for out in enc.encode_tokens(&y0, &store).unwrap() {
            for row in out.tokens.rows() {
                let mean = row.mean().unwrap();
                let var = row.mapv(|v| (v - mean).powi(2)).mean().unwrap();
                assert!(mean.abs() < 1e-10);
                assert!((var - 1.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn bind_resolves_the_same_ids() {
        let (store, enc) = toy(8, 2, 4, 0);
        let bound = Encoder::bind(&store, enc.config.clone(), 4).unwrap();
        assert_eq!(bound.pos_embed, enc.pos_embed);
        assert!(Encoder::bind(&store, enc.config.clone(), 5).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = EncoderConfig::fr_preset();
        assert!(cfg.validate().is_ok());
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = EncoderConfig::nr_preset();
        cfg.layers = 0;
        assert!(cfg.validate().is_err());
    }
}
