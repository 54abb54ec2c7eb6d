//! Datasets: CIFAR-10 binary batches and synthetic generators.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndcore::Array;

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_SHAPE: [usize; 3] = [3, 32, 32];
const CIFAR_PIXELS: usize = 3072;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}: size {size} is not a multiple of {CIFAR_RECORD}")]
    Truncated { path: String, size: usize },
    #[error("{path}: record {record} has label {label} (expected < 10)")]
    BadLabel { path: String, record: usize, label: u8 },
    #[error("no CIFAR-10 .bin files under {0}")]
    NoBatches(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Images `[N, ...]` in `[0,1]` with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Array,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        images: Array,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
        provenance: impl Into<String>,
    ) -> Result<Self, DataError> {
        if images.ndim() < 2 || images.rows() == 0 {
            return Err(DataError::Invalid(format!("need [N, ...] images with N > 0, got {:?}", images.shape())));
        }
        if labels.len() != images.rows() {
            return Err(DataError::Invalid(format!("{} labels for {} images", labels.len(), images.rows())));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(DataError::Invalid(format!("label {y} >= {num_classes} classes")));
        }
        if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DataError::Invalid(format!("pixel {v} outside [0,1]")));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            split,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape, e.g. `[3, 32, 32]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Rows at `idx`, in that order. Panics on out-of-range indices.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
            provenance: self.provenance.clone(),
        }
    }

    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn class_indices(&self, y: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == y).collect()
    }

    /// Seeded random holdout: returns `(rest, holdout)` with
    /// `holdout.len() = floor(fraction * N)`. Either side may be empty only if
    /// the fraction rounds it away, in which case `None` is returned for it.
    pub fn split_holdout(&self, fraction: f64, seed: u64) -> (Dataset, Option<Dataset>) {
        let n = self.len();
        let k = ((fraction * n as f64).floor() as usize).min(n.saturating_sub(1));
        if k == 0 {
            return (self.clone(), None);
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (hold, rest) = idx.split_at(k);
        let mut hold = hold.to_vec();
        let mut rest = rest.to_vec();
        hold.sort_unstable();
        rest.sort_unstable();
        let mut h = self.subset(&hold);
        h.split = Split::Validation;
        (self.subset(&rest), Some(h))
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Parses concatenated 3073-byte records.
pub fn parse_cifar10(bytes: &[u8], origin: &str) -> Result<(Vec<f64>, Vec<usize>), DataError> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(DataError::Truncated {
            path: origin.into(),
            size: bytes.len(),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (record, chunk) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if chunk[0] >= 10 {
            return Err(DataError::BadLabel {
                path: origin.into(),
                record,
                label: chunk[0],
            });
        }
        labels.push(chunk[0] as usize);
        pixels.extend(chunk[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((pixels, labels))
}

/// Loads a CIFAR-10 binary batch file, or every `*.bin` file of a directory in
/// name order. `subset` keeps the first `count` records.
pub fn load_cifar10_binary(path: &Path, subset: Option<usize>) -> Result<Dataset, DataError> {
    let files = if path.is_dir() {
        let mut files: Vec<_> = fs::read_dir(path)
            .map_err(io_err(path))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "bin"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(DataError::NoBatches(path.display().to_string()));
        }
        files
    } else {
        vec![path.to_path_buf()]
    };
    let limit = subset.unwrap_or(usize::MAX);
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in &files {
        if labels.len() >= limit {
            break;
        }
        let mut bytes = Vec::new();
        fs::File::open(f)
            .and_then(|mut h| h.read_to_end(&mut bytes))
            .map_err(io_err(f))?;
        let (p, l) = parse_cifar10(&bytes, &f.display().to_string())?;
        pixels.extend(p);
        labels.extend(l);
    }
    labels.truncate(limit);
    pixels.truncate(labels.len() * CIFAR_PIXELS);
    if labels.is_empty() {
        return Err(DataError::Invalid(format!("{} holds no records", path.display())));
    }
    let split = if path.file_name().is_some_and(|n| n.to_string_lossy().contains("test")) {
        Split::Test
    } else {
        Split::Train
    };
    let images = Array::new(vec![labels.len(), 3, 32, 32], pixels).expect("record arithmetic");
    Dataset::new(images, labels, 10, split, format!("cifar10:{}", path.display()))
}

/// Serializes a `[N,3,32,32]` dataset into the 3073-byte record layout.
/// Pixels are rounded to the nearest of the 256 levels.
pub fn write_cifar10_binary(data: &Dataset, w: &mut impl Write) -> Result<(), DataError> {
    if data.sample_shape() != CIFAR_SHAPE {
        return Err(DataError::Invalid(format!("expected [N,3,32,32], got {:?}", data.images.shape())));
    }
    if data.num_classes > 10 {
        return Err(DataError::Invalid("CIFAR-10 records hold labels < 10".into()));
    }
    let mut buf = Vec::with_capacity(data.len() * CIFAR_RECORD);
    for i in 0..data.len() {
        buf.push(data.labels[i] as u8);
        buf.extend(data.images.row(i).iter().map(|&v| (v * 255.0).round() as u8));
    }
    w.write_all(&buf).map_err(io_err(Path::new("<writer>")))
}

/// Isotropic Gaussian blobs, one per class.
///
/// Class anchors are the vertices of a centred simplex with pairwise distance
/// `separation` (in units of the noise σ = 1), so two classes at separation
/// 6 have Bayes accuracy Φ(3) ≈ 99.87 %. Samples are then mapped affinely into
/// `[0,1]` with a data-independent scale and clipped.
pub fn synth_mixture(
    k_classes: usize,
    n_per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    if k_classes < 2 || n_per_class == 0 || dim < k_classes - 1 || dim == 0 {
        return Err(DataError::Invalid(format!(
            "synth_mixture needs k >= 2, n >= 1, dim >= k-1 (got k={k_classes}, n={n_per_class}, dim={dim})"
        )));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(DataError::Invalid(format!("separation must be finite and >= 0, got {separation}")));
    }
    let anchors = simplex_anchors(k_classes, dim, separation);
    let reach = anchors.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = 2.0 * (reach + 4.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let n = k_classes * n_per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % k_classes;
        labels.push(y);
        for a in &anchors[y] {
            let raw = a + normal.sample(&mut rng);
            data.push((0.5 + raw / scale).clamp(0.0, 1.0));
        }
    }
    let images = Array::new(vec![n, dim], data).expect("sizes");
    Dataset::new(
        images,
        labels,
        k_classes,
        Split::Train,
        format!("synth_mixture:k={k_classes},n={n_per_class},dim={dim},sep={separation},seed={seed}"),
    )
}

/// Noise σ of `synth_mixture` after the affine map into `[0,1]`.
pub fn synth_mixture_sigma(k_classes: usize, dim: usize, separation: f64) -> f64 {
    let reach = simplex_anchors(k_classes, dim, separation)
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    1.0 / (2.0 * (reach + 4.0))
}

fn simplex_anchors(k: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    if k == 2 {
        // the two-class simplex lives on one axis
        let mut a = vec![0.0; dim];
        let mut b = vec![0.0; dim];
        a[0] = -separation / 2.0;
        b[0] = separation / 2.0;
        return vec![a, b];
    }
    // e_i - mean(e) embedded in the first k coordinates; needs dim >= k
    let c = separation / std::f64::consts::SQRT_2;
    (0..k)
        .map(|i| {
            (0..dim)
                .map(|d| {
                    if d >= k {
                        0.0
                    } else if d == i {
                        c * (1.0 - 1.0 / k as f64)
                    } else {
                        -c / k as f64
                    }
                })
                .collect()
        })
        .collect()
}

/// Amplitudes of the `synth_images` generator, in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthImageParams {
    /// Class-specific high-frequency pattern (scaled per sample by U(0.5, 1.5)).
    pub fine: f64,
    /// Low-frequency pattern shared by each pair of classes `(2j, 2j+1)`.
    pub coarse: f64,
    /// Per-sample low-frequency nuisance field.
    pub nuisance: f64,
    /// Per-pixel white noise.
    pub noise: f64,
}

impl Default for SynthImageParams {
    fn default() -> Self {
        SynthImageParams {
            fine: 0.02,
            coarse: 0.1,
            nuisance: 0.15,
            noise: 0.05,
        }
    }
}

/// Class-structured images with the CIFAR-10 layout, for runs where the real
/// dataset is unavailable.
///
/// Classes come in sibling pairs: a strong low-frequency template separates
/// pairs, while siblings differ only by a faint high-frequency pattern whose
/// amplitude is below the usual 8/255 attack radius. A natural classifier
/// therefore leans on non-robust features, much as on natural images where a
/// few class pairs (cat/dog, car/truck) are close. Sample `i` has label `i % k`.
pub fn synth_images(
    k_classes: usize,
    n: usize,
    shape: [usize; 3],
    params: SynthImageParams,
    seed: u64,
) -> Result<Dataset, DataError> {
    let [c, h, w] = shape;
    if k_classes < 2 || n == 0 || c == 0 || h == 0 || w == 0 {
        return Err(DataError::Invalid("synth_images needs k >= 2, n >= 1 and a non-empty shape".into()));
    }
    let d = c * h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let field = |passes: usize, rng: &mut ChaCha8Rng| {
        let mut v: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
        for _ in 0..passes {
            v = blur(&v, shape);
        }
        normalize_rms(&mut v);
        v
    };
    let fine: Vec<Vec<f64>> = (0..k_classes).map(|_| field(1, &mut rng)).collect();
    let coarse: Vec<Vec<f64>> = (0..k_classes.div_ceil(2)).map(|_| field(12, &mut rng)).collect();
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % k_classes;
        labels.push(y);
        let nuisance = field(8, &mut rng);
        let a = rng.random_range(0.5..1.5);
        for j in 0..d {
            let v = 0.5
                + a * params.fine * fine[y][j]
                + params.coarse * coarse[y / 2][j]
                + params.nuisance * nuisance[j]
                + params.noise * normal.sample(&mut rng);
            data.push(v.clamp(0.0, 1.0));
        }
    }
    let images = Array::new(vec![n, c, h, w], data).expect("sizes");
    Dataset::new(
        images,
        labels,
        k_classes,
        Split::Train,
        format!("synth_images:k={k_classes},n={n},shape={shape:?},seed={seed}"),
    )
}

/// One pass of a 5-point average per channel, edges renormalized.
fn blur(v: &[f64], [c, h, w]: [usize; 3]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for r in 0..h {
            for q in 0..w {
                let mut s = v[base + r * w + q];
                let mut k = 1.0;
                if r > 0 {
                    s += v[base + (r - 1) * w + q];
                    k += 1.0;
                }
                if r + 1 < h {
                    s += v[base + (r + 1) * w + q];
                    k += 1.0;
                }
                if q > 0 {
                    s += v[base + r * w + q - 1];
                    k += 1.0;
                }
                if q + 1 < w {
                    s += v[base + r * w + q + 1];
                    k += 1.0;
                }
                out[base + r * w + q] = s / k;
            }
        }
    }
    out
}

fn normalize_rms(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
    let rms = (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
    if rms > 0.0 {
        v.iter_mut().for_each(|x| *x /= rms);
    }
}
