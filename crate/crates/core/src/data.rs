//! Dataset manifests, splits, label conversion and patch sampling.
//!
//! Manifests are CSV files with a header row:
//!
//! * full-reference: `ref_path,dist_path,mos`
//! * no-reference: `image_path,mos` optionally followed by `p1,p2,p3,p4,p5`
//!   (a rating histogram over the five quality levels)
//!
//! Each manifest has a sidecar `<stem>.meta.toml` next to it with the keys
//! `mos_lo`, `mos_hi`, `higher_is_better` and optionally `name`. Image paths
//! are relative to the manifest's directory.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IqaError, Result};
use crate::image::ImageTensor;
use crate::nr_head::{QualityDistribution, NUM_LEVELS};

/// Width of the Gaussian used to soft-bin a MOS onto the five levels.
pub const SOFT_BIN_SIGMA: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MosScale {
    pub lo: f64,
    pub hi: f64,
}

impl MosScale {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(IqaError::validation(format!(
                "invalid MOS scale ({lo}, {hi})"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn contains(&self, v: f64) -> bool {
        (self.lo..=self.hi).contains(&v)
    }

    /// Position of `v` within the scale, `0` at `lo` and `1` at `hi`.
    pub fn unit(&self, v: f64) -> f64 {
        (v - self.lo) / (self.hi - self.lo)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Fr,
    Nr,
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetKind::Fr => "fr",
            DatasetKind::Nr => "nr",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrRecord {
    pub ref_path: PathBuf,
    pub dist_path: PathBuf,
    pub mos: f64,
    pub mos_scale: MosScale,
    pub higher_is_better: bool,
}

impl FrRecord {
    /// Regression target in `[0, 1]` with 0 = best, 1 = worst, so that it
    /// shares the orientation of the FR score.
    pub fn label(&self) -> f64 {
        let u = self.mos_scale.unit(self.mos);
        if self.higher_is_better {
            1.0 - u
        } else {
            u
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NrRecord {
    pub image_path: PathBuf,
    pub mos: f64,
    pub mos_scale: MosScale,
    pub higher_is_better: bool,
    pub histogram: Option<[f64; NUM_LEVELS]>,
}

impl NrRecord {
    /// MOS oriented so that larger means better.
    pub fn quality_mos(&self) -> f64 {
        if self.higher_is_better {
            self.mos
        } else {
            self.mos_scale.hi + self.mos_scale.lo - self.mos
        }
    }

    /// The histogram when present, otherwise the soft-binned MOS.
    pub fn target(&self) -> QualityDistribution {
        match self.histogram {
            Some(h) => QualityDistribution::new(h).expect("validated at load"),
            None => mos_to_distribution(self.quality_mos(), self.mos_scale),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Records {
    Fr(Vec<FrRecord>),
    Nr(Vec<NrRecord>),
}

impl Records {
    pub fn len(&self) -> usize {
        match self {
            Records::Fr(r) => r.len(),
            Records::Nr(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> DatasetKind {
        match self {
            Records::Fr(_) => DatasetKind::Fr,
            Records::Nr(_) => DatasetKind::Nr,
        }
    }

    fn select(&self, idx: &[usize]) -> Records {
        match self {
            Records::Fr(r) => Records::Fr(idx.iter().map(|&i| r[i].clone()).collect()),
            Records::Nr(r) => Records::Nr(idx.iter().map(|&i| r[i].clone()).collect()),
        }
    }
}

/// Sidecar metadata of a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub mos_lo: f64,
    pub mos_hi: f64,
    pub higher_is_better: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    /// Directory image paths are resolved against.
    pub root: PathBuf,
    pub mos_scale: MosScale,
    pub higher_is_better: bool,
    pub records: Records,
}

impl DatasetManifest {
    pub fn kind(&self) -> DatasetKind {
        self.records.kind()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    pub fn fr_records(&self) -> Result<&[FrRecord]> {
        match &self.records {
            Records::Fr(r) => Ok(r),
            Records::Nr(_) => Err(IqaError::validation(format!(
                "manifest {} is not full-reference",
                self.name
            ))),
        }
    }

    pub fn nr_records(&self) -> Result<&[NrRecord]> {
        match &self.records {
            Records::Nr(r) => Ok(r),
            Records::Fr(_) => Err(IqaError::validation(format!(
                "manifest {} is not no-reference",
                self.name
            ))),
        }
    }

    fn with_records(&self, records: Records, suffix: &str) -> Self {
        Self {
            name: format!("{}-{suffix}", self.name),
            root: self.root.clone(),
            mos_scale: self.mos_scale,
            higher_is_better: self.higher_is_better,
            records,
        }
    }

    pub(crate) fn subset(&self, idx: &[usize], suffix: &str) -> Self {
        self.with_records(self.records.select(idx), suffix)
    }

    fn meta(&self) -> ManifestMeta {
        ManifestMeta {
            name: Some(self.name.clone()),
            mos_lo: self.mos_scale.lo,
            mos_hi: self.mos_scale.hi,
            higher_is_better: self.higher_is_better,
        }
    }
}

/// `<dir>/<stem>.meta.toml` for a manifest path.
pub fn sidecar_path(manifest: &Path) -> PathBuf {
    let stem = manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    manifest.with_file_name(format!("{stem}.meta.toml"))
}

fn read_meta(manifest: &Path) -> Result<ManifestMeta> {
    let path = sidecar_path(manifest);
    let text = std::fs::read_to_string(&path).map_err(|e| IqaError::io(&path, e))?;
    toml::from_str(&text).map_err(|e| IqaError::Config(format!("{}: {e}", path.display())))
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| IqaError::MissingColumn(name.to_string()))
}

fn parse_num(rec: &csv::StringRecord, idx: usize, name: &str, line: u64) -> Result<f64> {
    let raw = rec.get(idx).unwrap_or("").trim();
    raw.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| IqaError::Row {
            line,
            message: format!("cannot parse {name} value {raw:?}"),
        })
}

fn parse_path(rec: &csv::StringRecord, idx: usize, name: &str, line: u64) -> Result<PathBuf> {
    let raw = rec.get(idx).unwrap_or("").trim();
    if raw.is_empty() {
        return Err(IqaError::Row {
            line,
            message: format!("empty {name}"),
        });
    }
    Ok(PathBuf::from(raw))
}

/// Reads a manifest CSV and its sidecar metadata.
pub fn load_manifest(path: impl AsRef<Path>, kind: DatasetKind) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let meta = read_meta(path)?;
    let scale = MosScale::new(meta.mos_lo, meta.mos_hi)?;
    let file = std::fs::File::open(path).map_err(|e| IqaError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| IqaError::Row {
            line: 1,
            message: e.to_string(),
        })?
        .clone();

    let check_mos = |mos: f64, line: u64| {
        if scale.contains(mos) {
            Ok(())
        } else {
            Err(IqaError::Row {
                line,
                message: format!(
                    "mos {mos} outside declared scale [{}, {}]",
                    scale.lo, scale.hi
                ),
            })
        }
    };

    let records = match kind {
        DatasetKind::Fr => {
            let (ri, di, mi) = (
                column(&headers, "ref_path")?,
                column(&headers, "dist_path")?,
                column(&headers, "mos")?,
            );
            let mut out = Vec::new();
            let mut seen = HashSet::new();
            for (n, row) in reader.records().enumerate() {
                let line = n as u64 + 2;
                let row = row.map_err(|e| IqaError::Row {
                    line,
                    message: e.to_string(),
                })?;
                let rec = FrRecord {
                    ref_path: parse_path(&row, ri, "ref_path", line)?,
                    dist_path: parse_path(&row, di, "dist_path", line)?,
                    mos: parse_num(&row, mi, "mos", line)?,
                    mos_scale: scale,
                    higher_is_better: meta.higher_is_better,
                };
                check_mos(rec.mos, line)?;
                if !seen.insert((rec.ref_path.clone(), rec.dist_path.clone())) {
                    return Err(IqaError::Row {
                        line,
                        message: "duplicate (ref_path, dist_path) pair".into(),
                    });
                }
                out.push(rec);
            }
            Records::Fr(out)
        }
        DatasetKind::Nr => {
            let (ii, mi) = (column(&headers, "image_path")?, column(&headers, "mos")?);
            let hist_cols = if headers.iter().any(|h| h.trim() == "p1") {
                Some(
                    (1..=NUM_LEVELS)
                        .map(|k| column(&headers, &format!("p{k}")))
                        .collect::<Result<Vec<_>>>()?,
                )
            } else {
                None
            };
            let mut out = Vec::new();
            let mut seen = HashSet::new();
            for (n, row) in reader.records().enumerate() {
                let line = n as u64 + 2;
                let row = row.map_err(|e| IqaError::Row {
                    line,
                    message: e.to_string(),
                })?;
                let histogram = match &hist_cols {
                    None => None,
                    Some(cols) => {
                        let mut h = [0.0; NUM_LEVELS];
                        for (k, &c) in cols.iter().enumerate() {
                            h[k] = parse_num(&row, c, &format!("p{}", k + 1), line)?;
                        }
                        QualityDistribution::new(h).map_err(|e| IqaError::Row {
                            line,
                            message: e.to_string(),
                        })?;
                        Some(h)
                    }
                };
                let rec = NrRecord {
                    image_path: parse_path(&row, ii, "image_path", line)?,
                    mos: parse_num(&row, mi, "mos", line)?,
                    mos_scale: scale,
                    higher_is_better: meta.higher_is_better,
                    histogram,
                };
                check_mos(rec.mos, line)?;
                if !seen.insert(rec.image_path.clone()) {
                    return Err(IqaError::Row {
                        line,
                        message: "duplicate image_path".into(),
                    });
                }
                out.push(rec);
            }
            Records::Nr(out)
        }
    };

    let name = meta.name.clone().unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "manifest".into())
    });
    Ok(DatasetManifest {
        name,
        root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        mos_scale: scale,
        higher_is_better: meta.higher_is_better,
        records,
    })
}

/// Writes the CSV and its sidecar. Paths are written as stored.
pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| IqaError::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    match &manifest.records {
        Records::Fr(recs) => {
            w.write_record(["ref_path", "dist_path", "mos"])
                .map_err(csv_err)?;
            for r in recs {
                w.write_record([
                    r.ref_path.to_string_lossy().as_ref(),
                    r.dist_path.to_string_lossy().as_ref(),
                    &r.mos.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        Records::Nr(recs) => {
            let with_hist = recs.iter().any(|r| r.histogram.is_some());
            if with_hist && recs.iter().any(|r| r.histogram.is_none()) {
                return Err(IqaError::validation(
                    "histograms must be present on all records or none",
                ));
            }
            let mut header = vec!["image_path".to_string(), "mos".to_string()];
            if with_hist {
                header.extend((1..=NUM_LEVELS).map(|k| format!("p{k}")));
            }
            w.write_record(&header).map_err(csv_err)?;
            for r in recs {
                let mut row = vec![
                    r.image_path.to_string_lossy().into_owned(),
                    r.mos.to_string(),
                ];
                if let Some(h) = r.histogram {
                    row.extend(h.iter().map(|v| v.to_string()));
                }
                w.write_record(&row).map_err(csv_err)?;
            }
        }
    }
    w.flush().map_err(|e| IqaError::io(path, e))?;
    let meta = toml::to_string(&manifest.meta()).map_err(|e| IqaError::Config(e.to_string()))?;
    let sidecar = sidecar_path(path);
    std::fs::write(&sidecar, meta).map_err(|e| IqaError::io(&sidecar, e))
}

/// Seeded train/test split. Full-reference manifests are split by reference
/// content, so no reference image lands on both sides.
pub fn split(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(IqaError::validation(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    // groups of record indices that must stay together
    let groups: Vec<Vec<usize>> = match &manifest.records {
        Records::Nr(r) => (0..r.len()).map(|i| vec![i]).collect(),
        Records::Fr(r) => {
            let mut order: Vec<&Path> = Vec::new();
            let mut by_ref: HashMap<&Path, Vec<usize>> = HashMap::new();
            for (i, rec) in r.iter().enumerate() {
                let key = rec.ref_path.as_path();
                by_ref
                    .entry(key)
                    .or_insert_with(|| {
                        order.push(key);
                        Vec::new()
                    })
                    .push(i);
            }
            order
                .into_iter()
                .map(|k| by_ref.remove(k).unwrap())
                .collect()
        }
    };
    let n_train = (groups.len() as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train == groups.len() {
        return Err(IqaError::validation(format!(
            "{} split units cannot be divided at fraction {train_fraction}",
            groups.len()
        )));
    }
    let mut perm: Vec<usize> = (0..groups.len()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let collect = |sel: &[usize]| {
        let mut idx: Vec<usize> = sel
            .iter()
            .flat_map(|&g| groups[g].iter().copied())
            .collect();
        idx.sort_unstable();
        idx
    };
    let train = collect(&perm[..n_train]);
    let test = collect(&perm[n_train..]);
    Ok((
        manifest.subset(&train, "train"),
        manifest.subset(&test, "test"),
    ))
}

/// Maps a (higher-is-better) MOS onto `[1, 5]` and soft-bins it with a
/// Gaussian of width [`SOFT_BIN_SIGMA`] centred there. `mos` is expected to
/// lie within `scale`.
pub fn mos_to_distribution(mos: f64, scale: MosScale) -> QualityDistribution {
    let centre = 1.0 + 4.0 * scale.unit(mos);
    let mut p = [0.0; NUM_LEVELS];
    for (k, v) in p.iter_mut().enumerate() {
        let d = (k + 1) as f64 - centre;
        *v = (-d * d / (2.0 * SOFT_BIN_SIGMA * SOFT_BIN_SIGMA)).exp();
    }
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= sum);
    QualityDistribution::new(p).expect("normalized by construction")
}

/// A training crop and where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub image: ImageTensor,
    pub top: usize,
    pub left: usize,
}

/// Uniformly random `patch x patch` crops, deterministic in `seed`. Images
/// smaller than the patch are rejected; callers may reflect-pad first.
pub fn sample_patches(
    image: &ImageTensor,
    patch: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Patch>> {
    let (h, w) = (image.height(), image.width());
    if patch == 0 || h < patch || w < patch {
        return Err(IqaError::validation(format!(
            "image {h}x{w} smaller than patch {patch}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let top = rng.random_range(0..=h - patch);
            let left = rng.random_range(0..=w - patch);
            Ok(Patch {
                image: image.crop(top, left, patch, patch)?,
                top,
                left,
            })
        })
        .collect()
}

/// Evenly spaced `n x n` grid of crop corners, with duplicates removed.
pub fn tile_positions(h: usize, w: usize, patch: usize, n: usize) -> Result<Vec<(usize, usize)>> {
    if patch == 0 || h < patch || w < patch || n == 0 {
        return Err(IqaError::validation(format!(
            "image {h}x{w} smaller than patch {patch}"
        )));
    }
    let coords = |extent: usize| -> Vec<usize> {
        let span = extent - patch;
        let mut v: Vec<usize> = if n == 1 {
            vec![span / 2]
        } else {
            (0..n).map(|i| (i * span + (n - 1) / 2) / (n - 1)).collect()
        };
        v.dedup();
        v
    };
    let ys = coords(h);
    let xs = coords(w);
    Ok(ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| (y, x)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nr_head::nr_score;

    fn write(dir: &Path, name: &str, csv: &str, meta: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, csv).unwrap();
        std::fs::write(sidecar_path(&p), meta).unwrap();
        p
    }

    const UNIT_META: &str = "mos_lo = 0.0\nmos_hi = 1.0\nhigher_is_better = true\n";

    #[test]
    fn fr_row_maps_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "fr.csv",
            "ref_path,dist_path,mos\nref/i01.png,dist/i01_05_3.png,0.62\n",
            UNIT_META,
        );
        let m = load_manifest(&p, DatasetKind::Fr).unwrap();
        let r = &m.fr_records().unwrap()[0];
        assert_eq!(r.ref_path, PathBuf::from("ref/i01.png"));
        assert_eq!(r.dist_path, PathBuf::from("dist/i01_05_3.png"));
        assert_eq!(r.mos, 0.62);
        assert!((r.label() - 0.38).abs() < 1e-12);
        assert_eq!(m.resolve(&r.ref_path), dir.path().join("ref/i01.png"));
    }

    #[test]
    fn out_of_scale_mos_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "fr.csv",
            "ref_path,dist_path,mos\na.png,b.png,1.5\n",
            UNIT_META,
        );
        assert!(matches!(
            load_manifest(&p, DatasetKind::Fr),
            Err(IqaError::Row { line: 2, .. })
        ));
    }

    #[test]
    fn nr_histogram_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "nr.csv",
            "image_path,mos,p1,p2,p3,p4,p5\nimg.png,0.5,0.1,0.2,0.3,0.2,0.2\n",
            UNIT_META,
        );
        let m = load_manifest(&p, DatasetKind::Nr).unwrap();
        let r = &m.nr_records().unwrap()[0];
        assert_eq!(r.histogram, Some([0.1, 0.2, 0.3, 0.2, 0.2]));
        assert_eq!(r.target().probs(), &[0.1, 0.2, 0.3, 0.2, 0.2]);
    }

    #[test]
    fn schema_and_row_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", "ref_path,mos\na.png,0.5\n", UNIT_META);
        match load_manifest(&p, DatasetKind::Fr) {
            Err(IqaError::MissingColumn(c)) => assert_eq!(c, "dist_path"),
            other => panic!("unexpected {other:?}"),
        }
        let p = write(
            dir.path(),
            "b.csv",
            "image_path,mos\na.png,0.5\nb.png,abc\n",
            UNIT_META,
        );
        assert!(matches!(
            load_manifest(&p, DatasetKind::Nr),
            Err(IqaError::Row { line: 3, .. })
        ));
        let p = write(
            dir.path(),
            "c.csv",
            "image_path,mos\na.png,0.5\na.png,0.4\n",
            UNIT_META,
        );
        assert!(load_manifest(&p, DatasetKind::Nr).is_err());
        let p = dir.path().join("nometa.csv");
        std::fs::write(&p, "image_path,mos\n").unwrap();
        assert!(matches!(
            load_manifest(&p, DatasetKind::Nr),
            Err(IqaError::Io { .. })
        ));
    }

    fn nr_manifest(n: usize) -> DatasetManifest {
        DatasetManifest {
            name: "toy".into(),
            root: PathBuf::from("."),
            mos_scale: MosScale::new(0.0, 1.0).unwrap(),
            higher_is_better: true,
            records: Records::Nr(
                (0..n)
                    .map(|i| NrRecord {
                        image_path: PathBuf::from(format!("{i}.png")),
                        mos: i as f64 / n as f64,
                        mos_scale: MosScale::new(0.0, 1.0).unwrap(),
                        higher_is_better: true,
                        histogram: None,
                    })
                    .collect(),
            ),
        }
    }

    #[test]
    fn nr_split_sizes_and_determinism() {
        let m = nr_manifest(100);
        let (tr, te) = split(&m, 0.8, 7).unwrap();
        assert_eq!((tr.len(), te.len()), (80, 20));
        let a: HashSet<_> = tr
            .nr_records()
            .unwrap()
            .iter()
            .map(|r| r.image_path.clone())
            .collect();
        assert!(te
            .nr_records()
            .unwrap()
            .iter()
            .all(|r| !a.contains(&r.image_path)));
        assert_eq!(split(&m, 0.8, 7).unwrap(), (tr, te));
        assert!(split(&nr_manifest(1), 0.8, 0).is_err());
        assert!(split(&m, 1.0, 0).is_err());
    }

    #[test]
    fn fr_split_by_reference() {
        let scale = MosScale::new(0.0, 1.0).unwrap();
        let recs = (0..10)
            .flat_map(|r| {
                (0..5).map(move |d| FrRecord {
                    ref_path: PathBuf::from(format!("ref{r}.png")),
                    dist_path: PathBuf::from(format!("d{r}_{d}.png")),
                    mos: d as f64 / 5.0,
                    mos_scale: scale,
                    higher_is_better: true,
                })
            })
            .collect();
        let m = DatasetManifest {
            name: "fr".into(),
            root: PathBuf::new(),
            mos_scale: scale,
            higher_is_better: true,
            records: Records::Fr(recs),
        };
        let (tr, te) = split(&m, 0.8, 3).unwrap();
        assert_eq!((tr.len(), te.len()), (40, 10));
        let refs = |m: &DatasetManifest| -> HashSet<PathBuf> {
            m.fr_records()
                .unwrap()
                .iter()
                .map(|r| r.ref_path.clone())
                .collect()
        };
        assert_eq!(refs(&tr).len(), 8);
        assert_eq!(refs(&te).len(), 2);
        assert!(refs(&tr).is_disjoint(&refs(&te)));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = nr_manifest(5);
        if let Records::Nr(r) = &mut m.records {
            for rec in r.iter_mut() {
                rec.histogram = Some([0.1, 0.2, 0.3, 0.2, 0.2]);
            }
        }
        let p = dir.path().join("m.csv");
        write_manifest(&m, &p).unwrap();
        let back = load_manifest(&p, DatasetKind::Nr).unwrap();
        assert_eq!(back.records, m.records);
    }

    #[test]
    fn midpoint_distribution() {
        let d = mos_to_distribution(0.5, MosScale::new(0.0, 1.0).unwrap());
        let z = 1.0 + 2.0 * (-2.0f64).exp() + 2.0 * (-8.0f64).exp();
        let exact = [
            (-8.0f64).exp() / z,
            (-2.0f64).exp() / z,
            1.0 / z,
            (-2.0f64).exp() / z,
            (-8.0f64).exp() / z,
        ];
        let quoted = [0.000264, 0.10646, 0.78655, 0.10646, 0.000264];
        for ((a, b), c) in d.probs().iter().zip(exact).zip(quoted) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
            assert!((a - c).abs() < 1e-4, "{a} vs {c}");
        }
    }

    #[test]
    fn top_of_scale_concentrates_on_level_five() {
        let d = mos_to_distribution(10.0, MosScale::new(0.0, 10.0).unwrap());
        let p = d.probs();
        assert!(p[4] > 0.85);
        assert!(p.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn soft_binning_bias_is_bounded_on_interior() {
        let scale = MosScale::new(1.0, 5.0).unwrap();
        let mut m = 1.5;
        while m <= 4.5 + 1e-12 {
            let d = mos_to_distribution(m, scale);
            assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!((nr_score(&d) - m).abs() < 0.25, "m = {m}");
            m += 0.01;
        }
    }

    #[test]
    fn patches() {
        let img = ImageTensor::filled(384, 512, 0.5).unwrap();
        let p = sample_patches(&img, 224, 3, 11).unwrap();
        assert_eq!(p.len(), 3);
        for patch in &p {
            assert_eq!((patch.image.height(), patch.image.width()), (224, 224));
            assert!(patch.top + 224 <= 384 && patch.left + 224 <= 512);
        }
        let q = sample_patches(&img, 224, 3, 11).unwrap();
        let coords = |v: &[Patch]| v.iter().map(|p| (p.top, p.left)).collect::<Vec<_>>();
        assert_eq!(coords(&p), coords(&q));

        let exact = ImageTensor::filled(224, 224, 0.25).unwrap();
        let only = sample_patches(&exact, 224, 2, 0).unwrap();
        assert!(only
            .iter()
            .all(|p| p.top == 0 && p.left == 0 && p.image == exact));
        assert!(sample_patches(&exact, 225, 1, 0).is_err());
    }

    #[test]
    fn tiling() {
        assert_eq!(tile_positions(224, 224, 224, 3).unwrap(), vec![(0, 0)]);
        let t = tile_positions(384, 512, 224, 3).unwrap();
        assert_eq!(t.len(), 9);
        assert_eq!(t[0], (0, 0));
        assert_eq!(t[8], (160, 288));
        assert_eq!(t[4], (80, 144));
    }
}
