//! Correlation metrics, dataset evaluation and report output.
//!
//! PLCC is computed on raw predictions with no logistic remapping.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::Mode;
use crate::data::{DatasetKind, DatasetManifest, MosScale};
use crate::error::{IqaError, Result};
use crate::image::ImageTensor;
use crate::model::Model;

/// Smallest sample count a report is computed on.
pub const MIN_EVAL_SAMPLES: usize = 3;

fn check_pair(pred: &[f64], mos: &[f64], min: usize) -> Result<()> {
    if pred.len() != mos.len() {
        return Err(IqaError::validation(format!(
            "prediction and label lengths differ: {} vs {}",
            pred.len(),
            mos.len()
        )));
    }
    if pred.len() < min {
        return Err(IqaError::validation(format!(
            "need at least {min} samples, got {}",
            pred.len()
        )));
    }
    if pred.iter().chain(mos).any(|v| !v.is_finite()) {
        return Err(IqaError::validation("non-finite value in metric input"));
    }
    Ok(())
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(IqaError::UndefinedCorrelation(
            "one input has zero variance".into(),
        ));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn srocc(pred: &[f64], mos: &[f64]) -> Result<f64> {
    check_pair(pred, mos, MIN_EVAL_SAMPLES)?;
    pearson(&average_ranks(pred), &average_ranks(mos))
}

/// Pearson linear correlation on raw values.
pub fn plcc(pred: &[f64], mos: &[f64]) -> Result<f64> {
    check_pair(pred, mos, MIN_EVAL_SAMPLES)?;
    pearson(pred, mos)
}

pub fn rmse(pred: &[f64], mos: &[f64]) -> Result<f64> {
    check_pair(pred, mos, 1)?;
    let sum: f64 = pred.iter().zip(mos).map(|(p, m)| (p - m) * (p - m)).sum();
    Ok((sum / pred.len() as f64).sqrt())
}

/// `y = slope * x + intercept`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub slope: f64,
    pub intercept: f64,
}

impl AffineMap {
    pub fn apply(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }

    /// Least-squares fit. Falls back to mapping `[1, 5]` linearly onto
    /// `scale` when `x` has no spread.
    pub fn fit(x: &[f64], y: &[f64], scale: MosScale) -> Self {
        let fallback = Self {
            slope: (scale.hi - scale.lo) / 4.0,
            intercept: scale.lo - (scale.hi - scale.lo) / 4.0,
        };
        if x.len() < 2 || x.len() != y.len() {
            return fallback;
        }
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
        if sxx <= 1e-24 {
            return fallback;
        }
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let slope = sxy / sxx;
        Self {
            slope,
            intercept: my - slope * mx,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub mode: DatasetKind,
    pub plcc: f64,
    pub srocc: f64,
    pub rmse: f64,
    pub n: usize,
}

impl EvalReport {
    /// Metrics of `pred` against `mos`; RMSE against `rmse_target`.
    pub fn from_predictions(
        dataset: &str,
        mode: DatasetKind,
        pred: &[f64],
        mos: &[f64],
        rmse_pred: &[f64],
        rmse_target: &[f64],
    ) -> Result<Self> {
        Ok(Self {
            dataset: dataset.to_string(),
            mode,
            plcc: plcc(pred, mos)?,
            srocc: srocc(pred, mos)?,
            rmse: rmse(rmse_pred, rmse_target)?,
            n: pred.len(),
        })
    }
}

/// Per-record predictions of a model on a manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    /// Oriented like the dataset's MOS (so positive correlation is good).
    pub aligned: Vec<f64>,
    pub mos: Vec<f64>,
    /// Values compared by RMSE and their targets.
    pub rmse_pred: Vec<f64>,
    pub rmse_target: Vec<f64>,
}

/// Patch edge used for NR inference on an image: the configured patch
/// size, or the whole image when it is smaller.
pub fn inference_patch(image: &ImageTensor, patch_size: usize) -> usize {
    patch_size.min(image.height()).min(image.width())
}

/// FR: `-score` when higher MOS is better, else `score`; RMSE is taken
/// between the raw score and the `[0, 1]` normalized label.
/// NR: tiled score mapped through `affine` onto the MOS scale.
pub fn predict(
    model: &Model,
    manifest: &DatasetManifest,
    patch_size: usize,
    affine: Option<AffineMap>,
) -> Result<Predictions> {
    let mut out = Predictions {
        aligned: Vec::new(),
        mos: Vec::new(),
        rmse_pred: Vec::new(),
        rmse_target: Vec::new(),
    };
    match manifest.kind() {
        DatasetKind::Fr => {
            for r in manifest.fr_records()? {
                let reference = ImageTensor::load(manifest.resolve(&r.ref_path))?;
                let distorted = ImageTensor::load(manifest.resolve(&r.dist_path))?;
                let s = model.fr_score(&reference, &distorted)?.0;
                out.aligned.push(if r.higher_is_better { -s } else { s });
                out.mos.push(r.mos);
                out.rmse_pred.push(s);
                out.rmse_target.push(r.label());
            }
        }
        DatasetKind::Nr => {
            let affine = affine.unwrap_or_else(|| AffineMap::fit(&[], &[], manifest.mos_scale));
            for r in manifest.nr_records()? {
                let img = ImageTensor::load(manifest.resolve(&r.image_path))?;
                let score = model.nr_score_tiled(&img, inference_patch(&img, patch_size))?;
                let quality = affine.apply(score);
                let aligned = if r.higher_is_better {
                    quality
                } else {
                    r.mos_scale.hi + r.mos_scale.lo - quality
                };
                out.aligned.push(aligned);
                out.mos.push(r.mos);
                out.rmse_pred.push(aligned);
                out.rmse_target.push(r.mos);
            }
        }
    }
    Ok(out)
}

/// Evaluates `ckpt` on every record of `manifest`, which must be of kind
/// `mode` and compatible with the checkpoint's training mode.
pub fn evaluate(
    ckpt: &Checkpoint,
    manifest: &DatasetManifest,
    mode: DatasetKind,
) -> Result<EvalReport> {
    if manifest.kind() != mode {
        return Err(IqaError::validation(format!(
            "manifest {} is {}, evaluation requested {mode}",
            manifest.name,
            manifest.kind()
        )));
    }
    match mode {
        DatasetKind::Fr => ckpt.require_mode(&[Mode::Fr, Mode::Uni])?,
        DatasetKind::Nr => ckpt.require_mode(&[Mode::Nr, Mode::Uni])?,
    }
    if manifest.len() < MIN_EVAL_SAMPLES {
        return Err(IqaError::validation(format!(
            "evaluation needs at least {MIN_EVAL_SAMPLES} records, {} has {}",
            manifest.name,
            manifest.len()
        )));
    }
    let p = predict(
        &ckpt.model,
        manifest,
        ckpt.config.patch_size,
        ckpt.nr_affine,
    )?;
    EvalReport::from_predictions(
        &manifest.name,
        mode,
        &p.aligned,
        &p.mos,
        &p.rmse_pred,
        &p.rmse_target,
    )
}

/// Reference figures reported for the full-scale models; never produced
/// locally.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceRow {
    pub model: &'static str,
    pub dataset: &'static str,
    pub plcc: f64,
    pub srocc: f64,
    pub rmse: Option<f64>,
}

pub const REFERENCE_LABEL: &str = "paper-reported, not locally reproduced";

pub const REFERENCE_ROWS: &[ReferenceRow] = &[
    ReferenceRow {
        model: "fr",
        dataset: "LIVE",
        plcc: 0.947,
        srocc: 0.958,
        rmse: None,
    },
    ReferenceRow {
        model: "fr",
        dataset: "CSIQ",
        plcc: 0.941,
        srocc: 0.938,
        rmse: None,
    },
    ReferenceRow {
        model: "fr",
        dataset: "TID2013",
        plcc: 0.858,
        srocc: 0.832,
        rmse: None,
    },
    ReferenceRow {
        model: "nr",
        dataset: "KONIQ-10K",
        plcc: 0.808,
        srocc: 0.769,
        rmse: Some(0.349),
    },
    ReferenceRow {
        model: "uni",
        dataset: "KONIQ-10K",
        plcc: 0.853,
        srocc: 0.836,
        rmse: Some(0.291),
    },
];

pub const REPORT_COLUMNS: [&str; 8] = [
    "source", "model", "dataset", "mode", "n", "plcc", "srocc", "rmse",
];

/// Machine-readable report: local rows first, then the reference rows.
pub fn report_csv(model_mode: Mode, reports: &[EvalReport]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_COLUMNS).expect("in-memory write");
    for r in reports {
        w.write_record([
            "local".to_string(),
            model_mode.to_string(),
            r.dataset.clone(),
            r.mode.to_string(),
            r.n.to_string(),
            format!("{:.6}", r.plcc),
            format!("{:.6}", r.srocc),
            format!("{:.6}", r.rmse),
        ])
        .expect("in-memory write");
    }
    for row in REFERENCE_ROWS {
        w.write_record([
            REFERENCE_LABEL.to_string(),
            row.model.to_string(),
            row.dataset.to_string(),
            if row.model == "fr" { "fr" } else { "nr" }.to_string(),
            String::new(),
            format!("{:.3}", row.plcc),
            format!("{:.3}", row.srocc),
            row.rmse.map(|v| format!("{v:.3}")).unwrap_or_default(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

pub fn report_text(model_mode: Mode, reports: &[EvalReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<28} {:<5} {:<14} {:>5} {:>8} {:>8} {:>8}",
        "source", "model", "dataset", "n", "plcc", "srocc", "rmse"
    );
    for r in reports {
        let _ = writeln!(
            s,
            "{:<28} {:<5} {:<14} {:>5} {:>8.4} {:>8.4} {:>8.4}",
            "local",
            model_mode.to_string(),
            r.dataset,
            r.n,
            r.plcc,
            r.srocc,
            r.rmse
        );
    }
    let _ = writeln!(s, "\n{REFERENCE_LABEL}:");
    for row in REFERENCE_ROWS {
        let rmse = row
            .rmse
            .map(|v| format!("{v:.3}"))
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{:<28} {:<5} {:<14} {:>5} {:>8.3} {:>8.3} {:>8}",
            "reference", row.model, row.dataset, "-", row.plcc, row.srocc, rmse
        );
    }
    let _ = writeln!(s, "\nPLCC and RMSE use raw predictions (no logistic fit).");
    s
}

/// Writes `<stem>.csv` and `<stem>.txt` into `dir`.
pub fn write_reports(
    dir: &Path,
    stem: &str,
    model_mode: Mode,
    reports: &[EvalReport],
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| IqaError::io(dir, e))?;
    let csv_path = dir.join(format!("{stem}.csv"));
    std::fs::write(&csv_path, report_csv(model_mode, reports))
        .map_err(|e| IqaError::io(&csv_path, e))?;
    let txt_path = dir.join(format!("{stem}.txt"));
    std::fs::write(&txt_path, report_text(model_mode, reports))
        .map_err(|e| IqaError::io(&txt_path, e))
}
