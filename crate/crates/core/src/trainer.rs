//! FR-only, NR-only and joint training.
//!
//! Every step builds one graph per sample, backpropagates it, and averages
//! the parameter gradients over the batch, so memory stays bounded by a
//! single sample. A joint step sums the mean FR loss and the mean NR loss
//! and updates the one shared parameter store. Attention weights are clipped
//! to be nonnegative after every optimizer step.
//!
//! Randomness is derived from the config seed only: data order, patch
//! positions and per-sample dropout masks each get their own stream, so a
//! run is reproducible bit for bit.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamGrads};
use crate::checkpoint::Checkpoint;
use crate::config::{Mode, TrainConfig};
use crate::data::{split, DatasetKind, DatasetManifest};
use crate::error::{IqaError, Result};
use crate::evaluator::{inference_patch, AffineMap};
use crate::image::ImageTensor;
use crate::losses::{emd_graph, squared_error_graph};
use crate::model::{Model, PreparedPair};
use crate::nr_head::{nr_score, QualityDistribution};
use crate::optim::Optimizer;

/// Images kept decoded in memory up to this many bytes.
const IMAGE_CACHE_BYTES: usize = 1 << 30;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub l_fr: Option<f64>,
    pub l_nr: Option<f64>,
    pub l_all: f64,
    /// Smallest attention-weight entry after clipping.
    pub min_weight: f64,
}

pub const LOG_HEADER: &str = "step\tepoch\tl_fr\tl_nr\tl_all\tmin_weight";

impl StepLog {
    /// Tab-separated row matching [`LOG_HEADER`]; absent terms print `-`.
    pub fn tsv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.8}")).unwrap_or_else(|| "-".into());
        format!(
            "{}\t{}\t{}\t{}\t{:.8}\t{:.8}",
            self.step,
            self.epoch,
            opt(self.l_fr),
            opt(self.l_nr),
            self.l_all,
            self.min_weight
        )
    }
}

pub fn write_log(history: &[StepLog], path: &Path) -> Result<()> {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for h in history {
        s.push_str(&h.tsv());
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| IqaError::io(path, e))
}

/// Validation snapshot taken at the end of an epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    pub val_fr: Option<f64>,
    pub val_nr: Option<f64>,
}

impl EpochLog {
    pub fn val_total(&self) -> Option<f64> {
        match (self.val_fr, self.val_nr) {
            (None, None) => None,
            (a, b) => Some(a.unwrap_or(0.0) + b.unwrap_or(0.0)),
        }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Best-validation state (final state when there is no validation split).
    pub checkpoint: Checkpoint,
    pub history: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    /// Parameters after the last step.
    pub final_model: Model,
}

pub struct TrainOptions<'a> {
    /// Draw FR batches in joint mode; off reduces a joint run to NR-only.
    pub fr_enabled: bool,
    /// Called after every step.
    pub on_step: Option<&'a mut dyn FnMut(&StepLog)>,
    /// Use this backbone instead of building one from the config.
    pub backbone: Option<Arc<crate::backbone::Backbone>>,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        Self {
            fr_enabled: true,
            on_step: None,
            backbone: None,
        }
    }
}

pub fn train_fr(config: &TrainConfig, manifest: &DatasetManifest) -> Result<TrainOutcome> {
    require(config, Mode::Fr)?;
    run(config, Some(manifest), None, TrainOptions::default())
}

pub fn train_nr(config: &TrainConfig, manifest: &DatasetManifest) -> Result<TrainOutcome> {
    require(config, Mode::Nr)?;
    run(config, None, Some(manifest), TrainOptions::default())
}

pub fn train_joint(
    config: &TrainConfig,
    fr: &DatasetManifest,
    nr: &DatasetManifest,
) -> Result<TrainOutcome> {
    require(config, Mode::Uni)?;
    run(config, Some(fr), Some(nr), TrainOptions::default())
}

fn require(config: &TrainConfig, mode: Mode) -> Result<()> {
    if config.mode != mode {
        return Err(IqaError::Config(format!(
            "config is for mode {}, this trainer needs {mode}",
            config.mode
        )));
    }
    Ok(())
}

/// Mixes seed parts into one 64-bit seed (splitmix64 finalizer per part).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

const STREAM_SPLIT: u64 = 1;
const STREAM_FR_ORDER: u64 = 2;
const STREAM_NR_ORDER: u64 = 3;
const STREAM_FR_DROPOUT: u64 = 4;
const STREAM_NR_DROPOUT: u64 = 5;

struct ImageStore {
    cache: HashMap<PathBuf, Arc<ImageTensor>>,
    bytes: usize,
}

impl ImageStore {
    fn new() -> Self {
        Self {
            cache: HashMap::new(),
            bytes: 0,
        }
    }

    fn get(&mut self, path: &Path) -> Result<Arc<ImageTensor>> {
        if let Some(img) = self.cache.get(path) {
            return Ok(img.clone());
        }
        let img = Arc::new(ImageTensor::load(path)?);
        let size = img.data().len() * std::mem::size_of::<f64>();
        if self.bytes + size <= IMAGE_CACHE_BYTES {
            self.bytes += size;
            self.cache.insert(path.to_path_buf(), img.clone());
        }
        Ok(img)
    }
}

struct FrItem {
    reference: PathBuf,
    distorted: PathBuf,
    label: f64,
}

struct NrItem {
    image: PathBuf,
    target: QualityDistribution,
    quality_mos: f64,
}

fn fr_items(m: &DatasetManifest) -> Result<Vec<FrItem>> {
    Ok(m.fr_records()?
        .iter()
        .map(|r| FrItem {
            reference: m.resolve(&r.ref_path),
            distorted: m.resolve(&r.dist_path),
            label: r.label(),
        })
        .collect())
}

fn nr_items(m: &DatasetManifest) -> Result<Vec<NrItem>> {
    Ok(m.nr_records()?
        .iter()
        .map(|r| NrItem {
            image: m.resolve(&r.image_path),
            target: r.target(),
            quality_mos: r.quality_mos(),
        })
        .collect())
}

/// Splits off the validation part; `None` when the fraction is zero or the
/// manifest is too small to hold out anything.
fn train_val(
    m: &DatasetManifest,
    fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, Option<DatasetManifest>)> {
    if fraction == 0.0 {
        return Ok((m.clone(), None));
    }
    match split(m, 1.0 - fraction, derive_seed(&[seed, STREAM_SPLIT])) {
        Ok((train, val)) => Ok((train, Some(val))),
        Err(IqaError::Validation(msg)) => {
            log::warn!("no validation split for {}: {msg}", m.name);
            Ok((m.clone(), None))
        }
        Err(e) => Err(e),
    }
}

/// A sample drawn for one step: item index plus crop corner (`None` means
/// the whole image).
type Draw = (usize, Option<(usize, usize)>);

/// Endless shuffled sequence of batches; each pass over the data reshuffles
/// and redraws crop positions.
struct Stream {
    rng: ChaCha8Rng,
    batch: usize,
    queue: Vec<Draw>,
    pos: usize,
    steps_per_pass: usize,
}

impl Stream {
    fn new(seed: u64, batch: usize, draws_per_pass: usize) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            batch,
            queue: Vec::new(),
            pos: 0,
            steps_per_pass: draws_per_pass.div_ceil(batch),
        }
    }

    fn next_batch(&mut self, refill: impl FnOnce(&mut ChaCha8Rng) -> Vec<Draw>) -> Vec<Draw> {
        if self.pos >= self.queue.len() {
            let mut q = refill(&mut self.rng);
            q.shuffle(&mut self.rng);
            self.queue = q;
            self.pos = 0;
        }
        let end = (self.pos + self.batch).min(self.queue.len());
        let out = self.queue[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}

fn crop_corner(rng: &mut ChaCha8Rng, h: usize, w: usize, patch: usize) -> Option<(usize, usize)> {
    if h <= patch && w <= patch {
        None
    } else {
        let ph = patch.min(h);
        let pw = patch.min(w);
        Some((rng.random_range(0..=h - ph), rng.random_range(0..=w - pw)))
    }
}

fn apply_crop(
    img: &ImageTensor,
    corner: Option<(usize, usize)>,
    patch: usize,
) -> Result<ImageTensor> {
    match corner {
        None => Ok(img.clone()),
        Some((top, left)) => img.crop(top, left, patch.min(img.height()), patch.min(img.width())),
    }
}

struct Branches {
    fr: Option<FrBranch>,
    nr: Option<NrBranch>,
}

struct FrBranch {
    train: Vec<FrItem>,
    val: Vec<FrItem>,
    dims: Vec<(usize, usize)>,
    stream: Stream,
    prepared: HashMap<usize, Arc<PreparedPair>>,
}

struct NrBranch {
    train: Vec<NrItem>,
    val: Vec<NrItem>,
    dims: Vec<(usize, usize)>,
    stream: Stream,
}

/// Shared driver behind the three public entry points.
pub fn run(
    config: &TrainConfig,
    fr: Option<&DatasetManifest>,
    nr: Option<&DatasetManifest>,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let fr = fr.filter(|_| opts.fr_enabled);
    if fr.is_none() && nr.is_none() {
        return Err(IqaError::Config(
            "training needs at least one manifest".into(),
        ));
    }
    for (m, kind) in [(fr, DatasetKind::Fr), (nr, DatasetKind::Nr)] {
        if let Some(m) = m {
            if m.kind() != kind {
                return Err(IqaError::validation(format!(
                    "manifest {} is not {kind}",
                    m.name
                )));
            }
            if m.is_empty() {
                return Err(IqaError::validation(format!(
                    "manifest {} is empty",
                    m.name
                )));
            }
        }
    }

    let backbone = match opts.backbone.take() {
        Some(b) => b,
        None => Arc::new(config.build_backbone()?),
    };
    let mut model = Model::new(backbone, config.model(), config.seed)?;
    let mut images = ImageStore::new();
    let patch = config.patch_size;

    let mut branches = Branches { fr: None, nr: None };
    if let Some(m) = fr {
        let (train, val) = train_val(m, config.validation_fraction, config.seed)?;
        let train = fr_items(&train)?;
        let val = val.map(|v| fr_items(&v)).transpose()?.unwrap_or_default();
        let mut dims = Vec::with_capacity(train.len());
        for it in &train {
            let r = images.get(&it.reference)?;
            let d = images.get(&it.distorted)?;
            if r.data().dim() != d.data().dim() {
                return Err(IqaError::validation(format!(
                    "{} and {} differ in size",
                    it.reference.display(),
                    it.distorted.display()
                )));
            }
            dims.push((r.height(), r.width()));
        }
        let stream = Stream::new(
            derive_seed(&[config.seed, STREAM_FR_ORDER]),
            config.fr_batch_size,
            train.len(),
        );
        branches.fr = Some(FrBranch {
            train,
            val,
            dims,
            stream,
            prepared: HashMap::new(),
        });
    }
    if let Some(m) = nr {
        let (train, val) = train_val(m, config.validation_fraction, config.seed)?;
        let train = nr_items(&train)?;
        let val = val.map(|v| nr_items(&v)).transpose()?.unwrap_or_default();
        let mut dims = Vec::with_capacity(train.len());
        for it in &train {
            let img = images.get(&it.image)?;
            dims.push((img.height(), img.width()));
        }
        let draws = train.len() * config.patches_per_image;
        let stream = Stream::new(
            derive_seed(&[config.seed, STREAM_NR_ORDER]),
            config.nr_batch_size,
            draws,
        );
        branches.nr = Some(NrBranch {
            train,
            val,
            dims,
            stream,
        });
    }

    let steps_per_epoch = branches
        .fr
        .iter()
        .map(|b| b.stream.steps_per_pass)
        .chain(branches.nr.iter().map(|b| b.stream.steps_per_pass))
        .max()
        .expect("at least one branch");
    let total_steps = config
        .max_steps
        .unwrap_or(usize::MAX)
        .min(steps_per_epoch * config.epochs);

    let mut optimizer = Optimizer::new(
        config.optimizer,
        config.learning_rate,
        config.momentum,
        model.store.len(),
    );
    let mut history = Vec::with_capacity(total_steps);
    let mut epochs = Vec::new();
    let mut best: Option<(f64, Model, usize, usize)> = None;
    let mut step = 0;
    let mut epoch = 0;
    while step < total_steps {
        let end = (step + steps_per_epoch).min(total_steps);
        while step < end {
            let log = train_step(
                config,
                &mut model,
                &mut optimizer,
                &mut branches,
                &mut images,
                step,
                epoch,
            )?;
            if let Some(cb) = opts.on_step.as_mut() {
                cb(&log);
            }
            history.push(log);
            step += 1;
        }
        let val = EpochLog {
            epoch,
            step,
            val_fr: match &branches.fr {
                Some(b) if !b.val.is_empty() => {
                    Some(fr_val_loss(&model, &b.val, &mut images, patch)?)
                }
                _ => None,
            },
            val_nr: match &branches.nr {
                Some(b) if !b.val.is_empty() => {
                    Some(nr_val_loss(&model, &b.val, &mut images, patch)?)
                }
                _ => None,
            },
        };
        log::info!(
            "epoch {epoch} step {step}: train l_all {:.6}, val {:?}",
            history.last().map(|h| h.l_all).unwrap_or(f64::NAN),
            val.val_total()
        );
        if let Some(v) = val.val_total() {
            if !v.is_finite() {
                return Err(IqaError::Diverged {
                    step,
                    message: format!("validation loss {v} at epoch {epoch}"),
                });
            }
            if best.as_ref().is_none_or(|(b, ..)| v < *b) {
                best = Some((v, model.clone(), epoch, step));
            }
        }
        epochs.push(val);
        epoch += 1;
    }

    let final_model = model.clone();
    let (chosen, best_epoch, best_step, best_val) = match best {
        Some((v, m, e, s)) => (m, e, s, Some(v)),
        None => (model, epoch.saturating_sub(1), step, None),
    };

    let mut metrics = BTreeMap::new();
    if let Some(last) = history.last() {
        metrics.insert("train_l_all_last".to_string(), last.l_all);
        if let Some(v) = last.l_fr {
            metrics.insert("train_l_fr_last".to_string(), v);
        }
        if let Some(v) = last.l_nr {
            metrics.insert("train_l_nr_last".to_string(), v);
        }
    }
    if let Some(v) = best_val {
        metrics.insert("val_loss_best".to_string(), v);
    }
    let nr_affine = match &branches.nr {
        Some(b) => Some(fit_nr_affine(
            &chosen,
            &b.train,
            &mut images,
            patch,
            nr.expect("nr manifest").mos_scale,
        )?),
        None => None,
    };
    let checkpoint = Checkpoint {
        mode: config.mode,
        config: config.clone(),
        model: chosen,
        epoch: best_epoch,
        step: best_step,
        metrics,
        nr_affine,
    };
    if let Some(dir) = &config.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| IqaError::io(dir, e))?;
        checkpoint.save(dir.join("best.safetensors"))?;
        write_log(&history, &dir.join("train_log.tsv"))?;
    }
    Ok(TrainOutcome {
        checkpoint,
        history,
        epochs,
        final_model,
    })
}

fn train_step(
    config: &TrainConfig,
    model: &mut Model,
    optimizer: &mut Optimizer,
    branches: &mut Branches,
    images: &mut ImageStore,
    step: usize,
    epoch: usize,
) -> Result<StepLog> {
    let patch = config.patch_size;
    let mut grads = ParamGrads::zeros_like(&model.store);
    let mut l_fr = None;
    let mut l_nr = None;

    if let Some(b) = branches.fr.as_mut() {
        let dims = &b.dims;
        let batch = b.stream.next_batch(|rng| {
            (0..dims.len())
                .map(|i| (i, crop_corner(rng, dims[i].0, dims[i].1, patch)))
                .collect()
        });
        let mut total = 0.0;
        for (k, &(idx, corner)) in batch.iter().enumerate() {
            let pair = fr_pair(model, b, images, idx, corner, patch)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
                config.seed,
                STREAM_FR_DROPOUT,
                step as u64,
                k as u64,
            ]));
            let mut g = Graph::new();
            let s = model.fr_graph(&mut g, &pair, Some(&mut rng))?;
            let loss = squared_error_graph(&mut g, s, b.train[idx].label);
            total += g.scalar(loss);
            let mut pg = g.param_grads(&g.backward(loss), &model.store);
            pg.scale(1.0 / batch.len() as f64);
            grads.accumulate(&pg);
        }
        l_fr = Some(total / batch.len() as f64);
    }

    if let Some(b) = branches.nr.as_mut() {
        let dims = &b.dims;
        let per_image = config.patches_per_image;
        let batch = b.stream.next_batch(|rng| {
            let mut v = Vec::with_capacity(dims.len() * per_image);
            for (i, &(h, w)) in dims.iter().enumerate() {
                for _ in 0..per_image {
                    v.push((i, crop_corner(rng, h, w, patch)));
                }
            }
            v
        });
        let mut total = 0.0;
        for (k, &(idx, corner)) in batch.iter().enumerate() {
            let item = &b.train[idx];
            let img = apply_crop(images.get(&item.image)?.as_ref(), corner, patch)?;
            let (_, grid) = model.cnn_features(&img)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
                config.seed,
                STREAM_NR_DROPOUT,
                step as u64,
                k as u64,
            ]));
            let mut g = Graph::new();
            let probs = model.nr_graph(&mut g, &grid, Some(&mut rng))?;
            let loss = emd_graph(&mut g, probs, &item.target);
            total += g.scalar(loss);
            let mut pg = g.param_grads(&g.backward(loss), &model.store);
            pg.scale(1.0 / batch.len() as f64);
            grads.accumulate(&pg);
        }
        l_nr = Some(total / batch.len() as f64);
    }

    let l_all = l_fr.unwrap_or(0.0) + l_nr.unwrap_or(0.0);
    if !l_all.is_finite() || !grads.all_finite() {
        return Err(IqaError::Diverged {
            step,
            message: format!(
                "l_fr = {l_fr:?}, l_nr = {l_nr:?}, gradients finite = {}",
                grads.all_finite()
            ),
        });
    }
    optimizer.step(&mut model.store, &grads);
    model.clip_attention();
    if model
        .store
        .iter()
        .any(|(_, _, v)| v.iter().any(|x| !x.is_finite()))
    {
        return Err(IqaError::Diverged {
            step,
            message: "parameters became non-finite after the update".into(),
        });
    }
    Ok(StepLog {
        step,
        epoch,
        l_fr,
        l_nr,
        l_all,
        min_weight: model.attention().min_entry(&model.store),
    })
}

fn fr_pair(
    model: &Model,
    b: &mut FrBranch,
    images: &mut ImageStore,
    idx: usize,
    corner: Option<(usize, usize)>,
    patch: usize,
) -> Result<Arc<PreparedPair>> {
    if corner.is_none() {
        if let Some(p) = b.prepared.get(&idx) {
            return Ok(p.clone());
        }
    }
    let it = &b.train[idx];
    let r = apply_crop(images.get(&it.reference)?.as_ref(), corner, patch)?;
    let d = apply_crop(images.get(&it.distorted)?.as_ref(), corner, patch)?;
    let pair = Arc::new(model.prepare_pair(&r, &d)?);
    if corner.is_none() {
        b.prepared.insert(idx, pair.clone());
    }
    Ok(pair)
}

fn fr_val_loss(
    model: &Model,
    items: &[FrItem],
    images: &mut ImageStore,
    _patch: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for it in items {
        let s = model
            .fr_score(&*images.get(&it.reference)?, &*images.get(&it.distorted)?)?
            .0;
        total += (s - it.label).powi(2);
    }
    Ok(total / items.len() as f64)
}

fn nr_val_loss(
    model: &Model,
    items: &[NrItem],
    images: &mut ImageStore,
    patch: usize,
) -> Result<f64> {
    let mut p = Vec::with_capacity(items.len());
    let mut q = Vec::with_capacity(items.len());
    for it in items {
        let img = images.get(&it.image)?;
        let d = model.nr_distribution_tiled(&img, inference_patch(&img, patch))?;
        p.push(*d.probs());
        q.push(*it.target.probs());
    }
    Ok(crate::losses::emd_loss(&p, &q, 2.0)?.value)
}

fn fit_nr_affine(
    model: &Model,
    items: &[NrItem],
    images: &mut ImageStore,
    patch: usize,
    scale: crate::data::MosScale,
) -> Result<AffineMap> {
    let mut x = Vec::with_capacity(items.len());
    let mut y = Vec::with_capacity(items.len());
    for it in items {
        let img = images.get(&it.image)?;
        let d = model.nr_distribution_tiled(&img, inference_patch(&img, patch))?;
        x.push(nr_score(&d));
        y.push(it.quality_mos);
    }
    Ok(AffineMap::fit(&x, &y, scale))
}

/// Parameter gradients of the FR batch loss, the NR batch loss, and of their
/// sum built as one graph in which both branches use the same parameter
/// nodes.
pub struct BranchGradients {
    pub fr: ParamGrads,
    pub nr: ParamGrads,
    pub joint: ParamGrads,
}

/// `pairs` carry `(prepared pair, label)`, `patches` carry
/// `(image, target)`; no dropout is applied.
pub fn branch_gradients(
    model: &Model,
    pairs: &[(PreparedPair, f64)],
    patches: &[(ImageTensor, QualityDistribution)],
) -> Result<BranchGradients> {
    if pairs.is_empty() || patches.is_empty() {
        return Err(IqaError::validation("gradient check needs both batches"));
    }
    let grids = patches
        .iter()
        .map(|(img, t)| Ok((model.cnn_features(img)?.1, *t)))
        .collect::<Result<Vec<_>>>()?;

    let fr_loss = |g: &mut Graph| -> Result<_> {
        let mut terms = Vec::new();
        for (pair, label) in pairs {
            let s = model.fr_graph(g, pair, None)?;
            terms.push(squared_error_graph(g, s, *label));
        }
        let sum = sum_all(g, &terms);
        Ok(g.scale(sum, 1.0 / pairs.len() as f64))
    };
    let nr_loss = |g: &mut Graph| -> Result<_> {
        let mut terms = Vec::new();
        for (grid, target) in &grids {
            let p = model.nr_graph(g, grid, None)?;
            terms.push(emd_graph(g, p, target));
        }
        let sum = sum_all(g, &terms);
        Ok(g.scale(sum, 1.0 / grids.len() as f64))
    };

    let mut g = Graph::new();
    let l = fr_loss(&mut g)?;
    let fr = g.param_grads(&g.backward(l), &model.store);
    let mut g = Graph::new();
    let l = nr_loss(&mut g)?;
    let nr = g.param_grads(&g.backward(l), &model.store);
    let mut g = Graph::new();
    let a = fr_loss(&mut g)?;
    let b = nr_loss(&mut g)?;
    let l = g.add(a, b);
    let joint = g.param_grads(&g.backward(l), &model.store);
    Ok(BranchGradients { fr, nr, joint })
}

fn sum_all(g: &mut Graph, vars: &[crate::autodiff::Var]) -> crate::autodiff::Var {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v);
    }
    acc
}

/// Streams step logs as tab-separated lines to `out`, header first.
pub fn tsv_logger<W: Write>(mut out: W) -> impl FnMut(&StepLog) {
    let _ = writeln!(out, "{LOG_HEADER}");
    move |log| {
        let _ = writeln!(out, "{}", log.tsv());
        let _ = out.flush();
    }
}
