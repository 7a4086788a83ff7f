//! The unified model: frozen backbone, shared encoder, FR attention weights
//! and the NR head, with all learnable values in one [`ParamStore`].

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::backbone::{Backbone, FeaturePyramid, StageData, NUM_CNN_STAGES};
use crate::data::tile_positions;
use crate::encoder::{grid_tokens, Encoder, EncoderConfig, TokenGrid};
use crate::error::{IqaError, Result};
use crate::fr_metric::{fr_score_graph, spatial_similarity, AttentionWeights, FrScore, StagePair};
use crate::image::ImageTensor;
use crate::nr_head::{nr_score, row_to_distribution, NrHead, QualityDistribution, NUM_LEVELS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head_hidden: usize,
    pub head_dropout: f64,
}

/// Inputs of one FR training pair that do not depend on learnable values.
#[derive(Clone, Debug)]
pub struct PreparedPair {
    /// `(s_mu, s_sigma)` rows for pixels and every CNN stage.
    pub fixed: Vec<(Array2<f64>, Array2<f64>)>,
    pub reference: TokenGrid,
    pub distorted: TokenGrid,
}

#[derive(Clone, Debug)]
pub struct Model {
    backbone: Arc<Backbone>,
    config: ModelConfig,
    pub store: ParamStore,
    encoder: Encoder,
    attention: AttentionWeights,
    head: NrHead,
}

impl Model {
    /// Fresh parameters drawn from `seed` (encoder, then attention, then head).
    pub fn new(backbone: Arc<Backbone>, config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let in_ch = deepest_channels(&backbone);
        let encoder = Encoder::new(&mut store, config.encoder.clone(), in_ch, &mut rng)?;
        let widths = stage_widths(&backbone, &config.encoder);
        let attention = AttentionWeights::new(&mut store, &widths)?;
        let head = NrHead::new(
            &mut store,
            config.encoder.dim,
            config.head_hidden,
            config.head_dropout,
            &mut rng,
        )?;
        Ok(Self {
            backbone,
            config,
            store,
            encoder,
            attention,
            head,
        })
    }

    /// Rebuilds a model around existing parameter values.
    pub fn from_store(
        backbone: Arc<Backbone>,
        config: ModelConfig,
        store: ParamStore,
    ) -> Result<Self> {
        let in_ch = deepest_channels(&backbone);
        let encoder = Encoder::bind(&store, config.encoder.clone(), in_ch)?;
        let widths = stage_widths(&backbone, &config.encoder);
        let attention = AttentionWeights::bind(&store, &widths)?;
        let head = NrHead::bind(
            &store,
            config.encoder.dim,
            config.head_hidden,
            config.head_dropout,
        )?;
        let expected = encoder_param_count(&config.encoder) + 2 * widths.len() + 4;
        if store.len() != expected {
            return Err(IqaError::Config(format!(
                "parameter store holds {} tensors, model expects {expected}",
                store.len()
            )));
        }
        Ok(Self {
            backbone,
            config,
            store,
            encoder,
            attention,
            head,
        })
    }

    pub fn backbone(&self) -> &Arc<Backbone> {
        &self.backbone
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn attention(&self) -> &AttentionWeights {
        &self.attention
    }

    pub fn head(&self) -> &NrHead {
        &self.head
    }

    /// Widths of every weighted stage: pixels, CNN stages, encoder layers.
    pub fn stage_widths(&self) -> Vec<usize> {
        self.attention.widths().to_vec()
    }

    /// Backbone stages 0..=5 with the deepest map already tokenized.
    pub fn cnn_features(&self, image: &ImageTensor) -> Result<(FeaturePyramid, TokenGrid)> {
        let pyr = self.backbone.extract(image)?;
        let deepest = pyr
            .deepest_spatial()
            .expect("backbone emits spatial stages");
        let grid = grid_tokens(deepest, self.config.encoder.max_tokens);
        Ok((pyr, grid))
    }

    /// Fully populated pyramid: pixels, CNN stages, then every encoder layer.
    pub fn pyramid(&self, image: &ImageTensor) -> Result<FeaturePyramid> {
        let (mut pyr, grid) = self.cnn_features(image)?;
        let mut g = Graph::new();
        let outs = self.encode_grid(&mut g, &grid, None)?;
        for v in outs {
            pyr.push_tokens(g.value(v).clone());
        }
        Ok(pyr)
    }

    pub fn encode_grid(
        &self,
        g: &mut Graph,
        grid: &TokenGrid,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<Var>> {
        let y0 = self.encoder.project(g, &self.store, grid)?;
        self.encoder.encode(g, &self.store, y0, dropout)
    }

    /// Precomputes the fixed part of an FR pair.
    pub fn prepare_pair(
        &self,
        reference: &ImageTensor,
        distorted: &ImageTensor,
    ) -> Result<PreparedPair> {
        if reference.data().dim() != distorted.data().dim() {
            return Err(IqaError::validation(format!(
                "reference {:?} and distorted {:?} differ in size",
                reference.data().dim(),
                distorted.data().dim()
            )));
        }
        let (pr, gr) = self.cnn_features(reference)?;
        let (pd, gd) = self.cnn_features(distorted)?;
        let fixed = pr
            .stages
            .iter()
            .zip(&pd.stages)
            .map(|(a, b)| match (&a.data, &b.data) {
                (StageData::Spatial(a), StageData::Spatial(b)) => spatial_similarity(a, b),
                _ => unreachable!("backbone stages are spatial"),
            })
            .collect();
        Ok(PreparedPair {
            fixed,
            reference: gr,
            distorted: gd,
        })
    }

    /// Differentiable FR score of a prepared pair. Both inputs run through the
    /// same encoder parameters on the same graph.
    pub fn fr_graph(
        &self,
        g: &mut Graph,
        pair: &PreparedPair,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let r = self.encode_grid(g, &pair.reference, dropout.as_deref_mut())?;
        let d = self.encode_grid(g, &pair.distorted, dropout)?;
        let mut stages: Vec<StagePair<'_>> = pair
            .fixed
            .iter()
            .map(|(s_mu, s_sigma)| StagePair::Fixed { s_mu, s_sigma })
            .collect();
        stages.extend(
            r.iter()
                .zip(&d)
                .map(|(&reference, &distorted)| StagePair::Tokens {
                    reference,
                    distorted,
                }),
        );
        fr_score_graph(g, &self.store, &self.attention, &stages)
    }

    pub fn fr_score(&self, reference: &ImageTensor, distorted: &ImageTensor) -> Result<FrScore> {
        let pair = self.prepare_pair(reference, distorted)?;
        let mut g = Graph::new();
        let s = self.fr_graph(&mut g, &pair, None)?;
        Ok(FrScore(g.scalar(s)))
    }

    /// Differentiable `1 x 5` class probabilities from the quality token.
    pub fn nr_graph(
        &self,
        g: &mut Graph,
        grid: &TokenGrid,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let outs = self.encode_grid(g, grid, dropout.as_deref_mut())?;
        let last = *outs.last().expect("at least one layer");
        let token = g.slice_rows(last, 0, 1);
        self.head.forward(g, &self.store, token, dropout)
    }

    /// Distribution for one input treated as a single patch.
    pub fn nr_distribution(&self, image: &ImageTensor) -> Result<QualityDistribution> {
        let (_, grid) = self.cnn_features(image)?;
        let mut g = Graph::new();
        let p = self.nr_graph(&mut g, &grid, None)?;
        row_to_distribution(g.value(p).row(0).as_slice().expect("contiguous"))
    }

    /// Average distribution over a deterministic 3x3 grid of `patch` crops
    /// (fewer when crops coincide). The mean score equals the score of the
    /// mean distribution.
    pub fn nr_distribution_tiled(
        &self,
        image: &ImageTensor,
        patch: usize,
    ) -> Result<QualityDistribution> {
        let positions = tile_positions(image.height(), image.width(), patch, 3)?;
        let mut acc = Array1::<f64>::zeros(NUM_LEVELS);
        for &(top, left) in &positions {
            let crop = image.crop(top, left, patch, patch)?;
            let d = self.nr_distribution(&crop)?;
            acc += &Array1::from_iter(d.probs().iter().copied());
        }
        acc /= positions.len() as f64;
        row_to_distribution(acc.as_slice().expect("contiguous"))
    }

    pub fn nr_score_tiled(&self, image: &ImageTensor, patch: usize) -> Result<f64> {
        Ok(nr_score(&self.nr_distribution_tiled(image, patch)?))
    }

    /// Clamps attention weights to be nonnegative.
    pub fn clip_attention(&mut self) {
        self.attention.clip(&mut self.store);
    }
}

fn deepest_channels(backbone: &Backbone) -> usize {
    *backbone
        .spec()
        .stage_channels()
        .last()
        .expect("non-empty backbone")
}

fn stage_widths(backbone: &Backbone, enc: &EncoderConfig) -> Vec<usize> {
    debug_assert_eq!(backbone.spec().blocks.len(), NUM_CNN_STAGES);
    let mut widths = vec![3];
    widths.extend(backbone.spec().stage_channels());
    widths.extend(std::iter::repeat_n(enc.dim, enc.layers));
    widths
}

fn encoder_param_count(enc: &EncoderConfig) -> usize {
    4 + 16 * enc.layers
}
