//! Procedural images and distortions for desk-scale experiments.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{DatasetManifest, FrRecord, MosScale, NrRecord, Records};
use crate::error::{IqaError, Result};
use crate::image::ImageTensor;

/// Gaussian blur sigma (pixels) per distortion level 1..=5.
pub const BLUR_SIGMAS: [f64; 5] = [0.6, 1.0, 1.5, 2.2, 3.2];
/// Additive Gaussian noise std per distortion level 1..=5.
pub const NOISE_STDS: [f64; 5] = [0.02, 0.04, 0.07, 0.11, 0.16];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distortion {
    Blur,
    Noise,
}

impl Distortion {
    pub fn tag(self) -> &'static str {
        match self {
            Distortion::Blur => "blur",
            Distortion::Noise => "noise",
        }
    }
}

/// Textured RGB image in roughly `[0.15, 0.85]`: oriented sinusoids of mixed
/// frequency plus soft discs, deterministic in `seed`.
pub fn base_image(height: usize, width: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    struct Wave {
        fx: f64,
        fy: f64,
        phase: f64,
        amp: [f64; 3],
    }
    struct Disc {
        cy: f64,
        cx: f64,
        r: f64,
        amp: [f64; 3],
    }
    let waves: Vec<Wave> = (0..6)
        .map(|i| {
            let freq = [0.02, 0.05, 0.09, 0.14, 0.2, 0.28][i] * rng.random_range(0.8..1.25);
            let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
            Wave {
                fx: freq * angle.cos(),
                fy: freq * angle.sin(),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
                amp: [0; 3].map(|_| rng.random_range(0.3..1.0)),
            }
        })
        .collect();
    let discs: Vec<Disc> = (0..4)
        .map(|_| Disc {
            cy: rng.random_range(0.0..height as f64),
            cx: rng.random_range(0.0..width as f64),
            r: rng.random_range(0.08..0.25) * height.min(width) as f64,
            amp: [0; 3].map(|_| rng.random_range(-1.0..1.0)),
        })
        .collect();
    let tint = [0; 3].map(|_| rng.random_range(-0.3..0.3));

    let mut raw = Array3::<f64>::zeros((3, height, width));
    for ((c, y, x), v) in raw.indexed_iter_mut() {
        let (yf, xf) = (y as f64, x as f64);
        let mut s = tint[c];
        for w in &waves {
            s += w.amp[c] * (std::f64::consts::TAU * (w.fx * xf + w.fy * yf) + w.phase).sin();
        }
        for d in &discs {
            let dist = ((yf - d.cy).powi(2) + (xf - d.cx).powi(2)).sqrt();
            s += 1.5 * d.amp[c] / (1.0 + ((dist - d.r) / 1.5).exp());
        }
        *v = s;
    }
    let peak = raw.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    raw.mapv_inplace(|v| 0.5 + 0.35 * v / peak);
    ImageTensor::new(raw).expect("values within range")
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|v| v / sum).collect()
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
    }
    i as usize
}

/// Separable Gaussian blur with symmetric (reflect) borders.
pub fn gaussian_blur(image: &ImageTensor, sigma: f64) -> ImageTensor {
    if sigma <= 0.0 {
        return image.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let src = image.data();
    let (c, h, w) = src.dim();
    let mut tmp = Array3::<f64>::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    acc += kv * src[[ch, y, reflect(x as isize + j as isize - r, w)]];
                }
                tmp[[ch, y, x]] = acc;
            }
        }
    }
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    acc += kv * tmp[[ch, reflect(y as isize + j as isize - r, h), x]];
                }
                out[[ch, y, x]] = acc.clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor::new(out).expect("convex combination of valid pixels")
}

/// Adds `std`-scaled standard normal noise drawn from `seed`, clamped to
/// `[0, 1]`. One seed gives one noise field at every strength.
pub fn gaussian_noise(image: &ImageTensor, std: f64, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = image.data().mapv(|v| {
        let z: f64 = StandardNormal.sample(&mut rng);
        (v + std * z).clamp(0.0, 1.0)
    });
    ImageTensor::new(out).expect("clamped")
}

/// Applies `kind` at `level` (1..=5).
pub fn distort(image: &ImageTensor, kind: Distortion, level: usize, seed: u64) -> ImageTensor {
    assert!(
        (1..=5).contains(&level),
        "distortion level {level} outside 1..=5"
    );
    match kind {
        Distortion::Blur => gaussian_blur(image, BLUR_SIGMAS[level - 1]),
        Distortion::Noise => gaussian_noise(image, NOISE_STDS[level - 1], seed),
    }
}

/// Layout of a generated full-reference set.
#[derive(Clone, Debug)]
pub struct FrBenchmark {
    pub references: usize,
    pub size: usize,
    pub kinds: Vec<Distortion>,
    pub levels: Vec<usize>,
    pub seed: u64,
}

impl FrBenchmark {
    /// Differential MOS of a distortion level: `level` on a `(0, 10)`
    /// worse-is-higher scale.
    pub fn dmos(level: usize) -> f64 {
        level as f64
    }

    pub const DMOS_SCALE: (f64, f64) = (0.0, 10.0);

    /// Writes PNGs under `dir` and the manifest `dir/<name>.csv`.
    pub fn write(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(dir.join("ref")).map_err(|e| IqaError::io(dir, e))?;
        std::fs::create_dir_all(dir.join("dist")).map_err(|e| IqaError::io(dir, e))?;
        let scale = MosScale::new(Self::DMOS_SCALE.0, Self::DMOS_SCALE.1)?;
        let mut records = Vec::new();
        for i in 0..self.references {
            let img_seed = self.seed.wrapping_mul(1000).wrapping_add(i as u64);
            let base = base_image(self.size, self.size, img_seed);
            let ref_path = PathBuf::from(format!("ref/r{i:03}.png"));
            base.save_png(dir.join(&ref_path))?;
            for &kind in &self.kinds {
                for &level in &self.levels {
                    let d = distort(&base, kind, level, img_seed ^ 0x9e37_79b9);
                    let dist_path =
                        PathBuf::from(format!("dist/r{i:03}_{}_{level}.png", kind.tag()));
                    d.save_png(dir.join(&dist_path))?;
                    records.push(FrRecord {
                        ref_path: ref_path.clone(),
                        dist_path,
                        mos: Self::dmos(level),
                        mos_scale: scale,
                        higher_is_better: false,
                    });
                }
            }
        }
        let manifest = DatasetManifest {
            name: name.to_string(),
            root: dir.to_path_buf(),
            mos_scale: scale,
            higher_is_better: false,
            records: Records::Fr(records),
        };
        let path = dir.join(format!("{name}.csv"));
        crate::data::write_manifest(&manifest, &path)?;
        Ok(path)
    }
}

/// Layout of a generated no-reference set. Level 0 is the pristine image.
#[derive(Clone, Debug)]
pub struct NrBenchmark {
    pub contents: usize,
    pub size: usize,
    pub kinds: Vec<Distortion>,
    pub levels: Vec<usize>,
    pub seed: u64,
}

impl NrBenchmark {
    /// MOS on a `(1, 5)` higher-is-better scale: `5 - 0.8 * level`.
    pub fn mos(level: usize) -> f64 {
        5.0 - 0.8 * level as f64
    }

    pub fn write(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(dir.join("img")).map_err(|e| IqaError::io(dir, e))?;
        let scale = MosScale::new(1.0, 5.0)?;
        let mut records = Vec::new();
        for i in 0..self.contents {
            let img_seed = self.seed.wrapping_mul(1000).wrapping_add(500 + i as u64);
            let base = base_image(self.size, self.size, img_seed);
            for &kind in &self.kinds {
                for &level in &self.levels {
                    let (img, tag) = if level == 0 {
                        if kind != self.kinds[0] {
                            continue;
                        }
                        (base.clone(), "pristine".to_string())
                    } else {
                        (
                            distort(&base, kind, level, img_seed ^ 0x85eb_ca6b),
                            format!("{}_{level}", kind.tag()),
                        )
                    };
                    let image_path = PathBuf::from(format!("img/c{i:03}_{tag}.png"));
                    img.save_png(dir.join(&image_path))?;
                    records.push(NrRecord {
                        image_path,
                        mos: Self::mos(level),
                        mos_scale: scale,
                        higher_is_better: true,
                        histogram: None,
                    });
                }
            }
        }
        let manifest = DatasetManifest {
            name: name.to_string(),
            root: dir.to_path_buf(),
            mos_scale: scale,
            higher_is_better: true,
            records: Records::Nr(records),
        };
        let path = dir.join(format!("{name}.csv"));
        crate::data::write_manifest(&manifest, &path)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn energy(img: &ImageTensor) -> f64 {
        // sum of squared horizontal differences
        let d = img.data();
        let (c, h, w) = d.dim();
        let mut s = 0.0;
        for ch in 0..c {
            for y in 0..h {
                for x in 1..w {
                    s += (d[[ch, y, x]] - d[[ch, y, x - 1]]).powi(2);
                }
            }
        }
        s
    }

    #[test]
    fn base_images_are_deterministic_and_in_range() {
        let a = base_image(48, 40, 5);
        assert_eq!(a, base_image(48, 40, 5));
        assert_ne!(a, base_image(48, 40, 6));
        assert!(a.data().iter().all(|v| (0.149..=0.851).contains(v)));
    }

    #[test]
    fn blur_removes_detail_monotonically() {
        let img = base_image(32, 32, 1);
        let e: Vec<f64> = (1..=5)
            .map(|l| energy(&distort(&img, Distortion::Blur, l, 0)))
            .collect();
        assert!(energy(&img) > e[0]);
        assert!(e.windows(2).all(|w| w[1] < w[0]), "{e:?}");
    }

    #[test]
    fn blur_preserves_constants() {
        let img = ImageTensor::filled(16, 16, 0.3).unwrap();
        let b = gaussian_blur(&img, 2.0);
        assert!(b.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn noise_shares_one_field() {
        let img = ImageTensor::filled(8, 8, 0.5).unwrap();
        let a = gaussian_noise(&img, 0.01, 3);
        let b = gaussian_noise(&img, 0.02, 3);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!(((y - 0.5) - 2.0 * (x - 0.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn benchmarks_write_loadable_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let fr = FrBenchmark {
            references: 2,
            size: 32,
            kinds: vec![Distortion::Blur],
            levels: vec![1, 3],
            seed: 0,
        }
        .write(dir.path(), "fr")
        .unwrap();
        let m = crate::data::load_manifest(&fr, crate::data::DatasetKind::Fr).unwrap();
        assert_eq!(m.len(), 4);
        assert!(!m.higher_is_better);
        let r = &m.fr_records().unwrap()[1];
        assert_eq!(r.mos, 3.0);
        let d = ImageTensor::load(m.resolve(&r.dist_path)).unwrap();
        assert_eq!((d.height(), d.width()), (32, 32));

        let nr = NrBenchmark {
            contents: 2,
            size: 32,
            kinds: vec![Distortion::Blur, Distortion::Noise],
            levels: vec![0, 2],
            seed: 0,
        }
        .write(dir.path(), "nr")
        .unwrap();
        let m = crate::data::load_manifest(&nr, crate::data::DatasetKind::Nr).unwrap();
        assert_eq!(m.len(), 6);
    }
}
