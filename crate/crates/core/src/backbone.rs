//! Frozen VGG-topology feature extractor.
//!
//! The network is five conv blocks (3x3 convs, ReLU) separated by 2x2 max
//! pooling; the pyramid taps the output of each block, so a `H x W` input
//! yields stage sizes `H, H/2, H/4, H/8, H/16`. Stage 0 is the raw `[0, 1]`
//! pixels; ImageNet mean/std normalization happens only on the path into
//! the first conv.
//!
//! Layer names follow the torchvision `features.{i}` indexing of VGG16:
//! conv layers sit at 0, 2, 5, 7, 10, 12, 14, 17, 19, 21, 24, 26, 28, each
//! with a `weight` of shape `[out, in, 3, 3]` and a `bias` of shape `[out]`.
//! The same names apply to the desk-scale tiny topology.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::error::{IqaError, LayerMismatch, Result};
use crate::image::ImageTensor;

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Number of CNN stages tapped by every supported topology.
pub const NUM_CNN_STAGES: usize = 5;

/// Smallest spatial extent a stage may have; below this a stage has no spread.
const MIN_STAGE_EXTENT: usize = 2;

/// Convolutional topology of a backbone.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: String,
    /// `(conv count, output channels)` per block.
    pub blocks: Vec<(usize, usize)>,
}

impl BackboneSpec {
    pub fn vgg16() -> Self {
        Self {
            name: "vgg16".into(),
            blocks: vec![(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)],
        }
    }

    /// Desk-scale variant with the VGG16 layout and 8/16/32/64/64 channels.
    pub fn tiny() -> Self {
        Self {
            name: "tiny".into(),
            blocks: vec![(2, 8), (2, 16), (3, 32), (3, 64), (3, 64)],
        }
    }

    pub fn stage_channels(&self) -> Vec<usize> {
        self.blocks.iter().map(|&(_, c)| c).collect()
    }

    /// `(name prefix, in channels, out channels)` for every conv, in order.
    pub fn conv_layers(&self) -> Vec<(String, usize, usize)> {
        let mut layers = Vec::new();
        let mut index = 0;
        let mut in_ch = 3;
        for (b, &(convs, out_ch)) in self.blocks.iter().enumerate() {
            if b > 0 {
                index += 1; // max-pool slot
            }
            for _ in 0..convs {
                layers.push((format!("features.{index}"), in_ch, out_ch));
                in_ch = out_ch;
                index += 2; // conv + relu
            }
        }
        layers
    }

    /// Expected tensor names and shapes of a weight container.
    pub fn expected_tensors(&self) -> Vec<(String, Vec<usize>)> {
        self.conv_layers()
            .into_iter()
            .flat_map(|(name, i, o)| {
                [
                    (format!("{name}.weight"), vec![o, i, 3, 3]),
                    (format!("{name}.bias"), vec![o]),
                ]
            })
            .collect()
    }

    /// Rejects inputs whose deepest stage would collapse below 2x2.
    pub fn check_input_size(&self, height: usize, width: usize) -> Result<()> {
        for stage in 1..=self.blocks.len() {
            let (sh, sw) = (height >> (stage - 1), width >> (stage - 1));
            if sh < MIN_STAGE_EXTENT || sw < MIN_STAGE_EXTENT {
                return Err(IqaError::ImageTooSmall {
                    stage,
                    height,
                    width,
                    stage_height: sh,
                    stage_width: sw,
                });
            }
        }
        Ok(())
    }
}

struct Conv {
    /// `out x (in * 9)`, row-major over `(in, ky, kx)`.
    weight: Array2<f64>,
    bias: Array1<f64>,
}

/// Raw `f32` tensor as stored in a weight container.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Loaded, frozen backbone. Holds no mutable state and is safe to share.
pub struct Backbone {
    spec: BackboneSpec,
    id: String,
    convs: Vec<Vec<Conv>>,
    raw: Vec<(String, RawTensor)>,
}

impl std::fmt::Debug for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backbone").field("id", &self.id).finish()
    }
}

/// What a pyramid stage holds.
#[derive(Clone, Debug, PartialEq)]
pub enum StageData {
    /// `channels x height x width`.
    Spatial(Array3<f64>),
    /// `(N + 1) x D` token rows; row 0 is the quality token.
    Tokens(Array2<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStage {
    pub index: usize,
    pub data: StageData,
}

impl FeatureStage {
    /// Channel count for spatial stages, embedding width for token stages.
    pub fn width(&self) -> usize {
        match &self.data {
            StageData::Spatial(a) => a.dim().0,
            StageData::Tokens(t) => t.ncols(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub stages: Vec<FeatureStage>,
    pub backbone_id: String,
}

impl FeaturePyramid {
    /// The deepest CNN stage, which feeds the transformer encoder.
    pub fn deepest_spatial(&self) -> Option<&Array3<f64>> {
        self.stages.iter().rev().find_map(|s| match &s.data {
            StageData::Spatial(a) => Some(a),
            StageData::Tokens(_) => None,
        })
    }

    pub fn push_tokens(&mut self, tokens: Array2<f64>) {
        let index = self.stages.len();
        self.stages.push(FeatureStage {
            index,
            data: StageData::Tokens(tokens),
        });
    }
}

impl Backbone {
    /// Builds a backbone from named `f32` tensors, reporting every missing or
    /// misshapen layer at once.
    pub fn from_tensors(
        spec: BackboneSpec,
        mut tensors: HashMap<String, RawTensor>,
    ) -> Result<Self> {
        let mut mismatches = Vec::new();
        for (name, shape) in spec.expected_tensors() {
            match tensors.get(&name) {
                None => mismatches.push(LayerMismatch {
                    layer: name,
                    expected: shape,
                    found: None,
                }),
                Some(t) if t.shape != shape => mismatches.push(LayerMismatch {
                    layer: name,
                    expected: shape,
                    found: Some(t.shape.clone()),
                }),
                Some(_) => {}
            }
        }
        if !mismatches.is_empty() {
            return Err(IqaError::ShapeMismatch(mismatches));
        }

        let mut raw = Vec::new();
        let mut convs: Vec<Vec<Conv>> = Vec::new();
        let layers = spec.conv_layers();
        let mut layer_iter = layers.iter();
        for &(count, _) in &spec.blocks {
            let mut block = Vec::new();
            for _ in 0..count {
                let (name, in_ch, out_ch) = layer_iter.next().expect("layer count");
                let w = tensors.remove(&format!("{name}.weight")).unwrap();
                let b = tensors.remove(&format!("{name}.bias")).unwrap();
                let weight = Array2::from_shape_vec(
                    (*out_ch, in_ch * 9),
                    w.data.iter().map(|&v| v as f64).collect(),
                )
                .expect("checked shape");
                let bias = Array1::from_iter(b.data.iter().map(|&v| v as f64));
                if weight.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
                    return Err(IqaError::validation(format!(
                        "non-finite backbone weights in {name}"
                    )));
                }
                block.push(Conv { weight, bias });
                raw.push((format!("{name}.weight"), w));
                raw.push((format!("{name}.bias"), b));
            }
            convs.push(block);
        }
        let id = format!("{}-maxpool", spec.name);
        Ok(Self {
            spec,
            id,
            convs,
            raw,
        })
    }

    /// Fixed random He-normal weights, zero biases; deterministic in `seed`.
    pub fn random(spec: BackboneSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = HashMap::new();
        for (name, in_ch, out_ch) in spec.conv_layers() {
            let std = (2.0 / (in_ch as f64 * 9.0)).sqrt();
            let normal = Normal::new(0.0, std).unwrap();
            let data: Vec<f32> = (0..out_ch * in_ch * 9)
                .map(|_| normal.sample(&mut rng) as f32)
                .collect();
            tensors.insert(
                format!("{name}.weight"),
                RawTensor {
                    shape: vec![out_ch, in_ch, 3, 3],
                    data,
                },
            );
            tensors.insert(
                format!("{name}.bias"),
                RawTensor {
                    shape: vec![out_ch],
                    data: vec![0.0; out_ch],
                },
            );
        }
        Self::from_tensors(spec, tensors).expect("generated tensors match spec")
    }

    /// Desk-scale backbone with fixed random weights.
    pub fn tiny(seed: u64) -> Self {
        Self::random(BackboneSpec::tiny(), seed)
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// Backbone parameters are never exposed to an optimizer.
    pub fn is_trainable(&self) -> bool {
        false
    }

    /// Stored tensors in layer order, as they would be written to a container.
    pub fn raw_tensors(&self) -> &[(String, RawTensor)] {
        &self.raw
    }

    pub fn num_conv_layers(&self) -> usize {
        self.convs.iter().map(Vec::len).sum()
    }

    /// Pixels as stage 0 plus one stage per conv block.
    pub fn extract(&self, image: &ImageTensor) -> Result<FeaturePyramid> {
        self.spec.check_input_size(image.height(), image.width())?;
        let pixels = image.data().clone();
        let mut x = pixels.clone();
        for c in 0..3 {
            x.index_axis_mut(Axis(0), c)
                .mapv_inplace(|v| (v - IMAGENET_MEAN[c]) / IMAGENET_STD[c]);
        }
        let mut stages = vec![FeatureStage {
            index: 0,
            data: StageData::Spatial(pixels),
        }];
        for (b, block) in self.convs.iter().enumerate() {
            if b > 0 {
                x = max_pool2(&x);
            }
            for conv in block {
                x = conv3x3_relu(&x, conv);
            }
            stages.push(FeatureStage {
                index: b + 1,
                data: StageData::Spatial(x.clone()),
            });
        }
        Ok(FeaturePyramid {
            stages,
            backbone_id: self.id.clone(),
        })
    }

    /// Reads a safetensors container holding `f32` tensors named per [`BackboneSpec::expected_tensors`].
    pub fn load(path: impl AsRef<Path>, spec: BackboneSpec) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| IqaError::io(path, e))?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| IqaError::Corrupt {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_tensors(spec, read_f32_tensors(&st, "", path)?)
    }
}

/// Collects every `f32` tensor whose name starts with `prefix` (prefix stripped).
pub(crate) fn read_f32_tensors(
    st: &SafeTensors<'_>,
    prefix: &str,
    path: &Path,
) -> Result<HashMap<String, RawTensor>> {
    let mut out = HashMap::new();
    for (name, view) in st.tensors() {
        let Some(stripped) = name.strip_prefix(prefix) else {
            continue;
        };
        if view.dtype() != Dtype::F32 {
            return Err(IqaError::Corrupt {
                path: path.to_path_buf(),
                message: format!("tensor {name} has dtype {:?}, expected F32", view.dtype()),
            });
        }
        let data = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.insert(
            stripped.to_string(),
            RawTensor {
                shape: view.shape().to_vec(),
                data,
            },
        );
    }
    Ok(out)
}

/// Number of output positions converted per im2col chunk.
const IM2COL_CHUNK: usize = 4096;

fn conv3x3_relu(x: &Array3<f64>, conv: &Conv) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let out_ch = conv.weight.nrows();
    let mut out = Array2::<f64>::zeros((out_ch, h * w));
    let mut start = 0;
    while start < h * w {
        let end = (start + IM2COL_CHUNK).min(h * w);
        let mut cols = Array2::<f64>::zeros((c * 9, end - start));
        for ci in 0..c {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = ci * 9 + ky * 3 + kx;
                    for (j, pos) in (start..end).enumerate() {
                        let (py, px) = (pos / w, pos % w);
                        let (sy, sx) =
                            (py as isize + ky as isize - 1, px as isize + kx as isize - 1);
                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                            cols[[row, j]] = x[[ci, sy as usize, sx as usize]];
                        }
                    }
                }
            }
        }
        let mut block = conv.weight.dot(&cols);
        for (mut row, &b) in block.rows_mut().into_iter().zip(conv.bias.iter()) {
            row.mapv_inplace(|v| (v + b).max(0.0));
        }
        out.slice_mut(s![.., start..end]).assign(&block);
        start = end;
    }
    out.into_shape_with_order((out_ch, h, w))
        .expect("conv output shape")
}

fn max_pool2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h / 2, w / 2), |(ci, y, xx)| {
        let (y0, x0) = (2 * y, 2 * xx);
        x[[ci, y0, x0]]
            .max(x[[ci, y0 + 1, x0]])
            .max(x[[ci, y0, x0 + 1]])
            .max(x[[ci, y0 + 1, x0 + 1]])
    })
}
