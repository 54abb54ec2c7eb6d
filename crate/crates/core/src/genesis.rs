//! Class-conditional sampling from a trained classifier.
//!
//! Chains start from a per-class PCA draw `x₀ = μ_y + Σ λ_i α_i U_i`,
//! `α_i ~ N(0, σ)`, and descend the joint energy `E(x, y)` with momentum
//! Langevin steps:
//!
//! ```text
//! ν ← ζ ν − (η/2) ∇ₓ E(x, y)
//! x ← clamp(x + ν + N(0, γ I))
//! ```

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::{self, rows};
use crate::ndcore::{Array, NdError, Tape};
use crate::nets::{ModelState, NetError};

const CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum GenesisError {
    #[error("class {0} has no images")]
    EmptyClass(usize),
    #[error("invalid sampler config: {0}")]
    InvalidConfig(String),
    #[error("pixel {value} at index {index} outside the clamp range")]
    OutOfRange { index: usize, value: f64 },
    #[error("numerical failure at step {step}: {source}")]
    Numerical { step: usize, source: NdError },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Nd(#[from] NdError),
    #[error("png: {0}")]
    Png(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Principal directions of one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPCA {
    pub label: usize,
    pub sample_shape: Vec<usize>,
    /// Flattened class mean.
    pub mean: Vec<f64>,
    /// Orthonormal rows, strongest first.
    pub components: Vec<Vec<f64>>,
    /// Standard deviation of the centered data along each component.
    pub scales: Vec<f64>,
    /// Variance fraction actually captured by `components`.
    pub retained_variance: f64,
    pub total_variance: f64,
}

impl ClassPCA {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Largest |G − I| entry of the component Gram matrix.
    pub fn gram_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for (i, a) in self.components.iter().enumerate() {
            for (j, b) in self.components.iter().enumerate() {
                let g: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g - target).abs());
            }
        }
        worst
    }

    /// `μ + Σ_i c_i U_i` for the first `coeffs.len()` components.
    pub fn reconstruct(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut x = self.mean.clone();
        for (c, u) in coeffs.iter().zip(&self.components) {
            for (xi, ui) in x.iter_mut().zip(u) {
                *xi += c * ui;
            }
        }
        x
    }

    /// Coordinates of `x − μ` along each component.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|u| u.iter().zip(x).zip(&self.mean).map(|((ui, xi), mi)| ui * (xi - mi)).sum())
            .collect()
    }
}

/// Mean-centred PCA keeping the fewest components that reach `retained_variance`.
///
/// `images` is `[n, ...]`; every row is flattened. Scales are the singular
/// values of the centred data divided by `√(n−1)`.
pub fn fit_class_pca(images: &Array, label: usize, retained_variance: f64) -> Result<ClassPCA, GenesisError> {
    if !(retained_variance > 0.0 && retained_variance <= 1.0) {
        return Err(GenesisError::InvalidConfig(format!(
            "retained variance must lie in (0, 1], got {retained_variance}"
        )));
    }
    let n = images.rows();
    if n == 0 || images.ndim() < 2 {
        return Err(GenesisError::EmptyClass(label));
    }
    let d = images.row_len();
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(images.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let sample_shape = images.shape()[1..].to_vec();
    let empty = |total: f64| ClassPCA {
        label,
        sample_shape: sample_shape.clone(),
        mean: mean.clone(),
        components: Vec::new(),
        scales: Vec::new(),
        retained_variance: 1.0,
        total_variance: total,
    };
    if n == 1 {
        return Ok(empty(0.0));
    }
    let centred = DMatrix::from_fn(n, d, |r, c| images.row(r)[c] - mean[c]);
    let svd = centred.svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let denom = (n - 1) as f64;
    let variances: Vec<f64> = order.iter().map(|&i| svd.singular_values[i].powi(2) / denom).collect();
    let total: f64 = variances.iter().sum();
    // relative floor below which a direction is numerical noise
    if total <= f64::EPSILON * d as f64 * mean.iter().fold(1.0f64, |m, v| m.max(v.abs())) {
        return Ok(empty(total));
    }
    let mut kept = 0;
    let mut acc = 0.0;
    while kept < variances.len() && acc < retained_variance * total * (1.0 - 1e-12) {
        acc += variances[kept];
        kept += 1;
    }
    let components = order[..kept]
        .iter()
        .map(|&i| v_t.row(i).iter().copied().collect())
        .collect();
    let scales = variances[..kept].iter().map(|v| v.sqrt()).collect();
    Ok(ClassPCA {
        label,
        sample_shape,
        mean,
        components,
        scales,
        retained_variance: acc / total,
        total_variance: total,
    })
}

/// PCA per class of a labelled image set.
pub fn fit_all_classes(
    images: &Array,
    labels: &[usize],
    num_classes: usize,
    retained_variance: f64,
) -> Result<Vec<ClassPCA>, GenesisError> {
    (0..num_classes)
        .map(|y| {
            let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == y).collect();
            if idx.is_empty() {
                return Err(GenesisError::EmptyClass(y));
            }
            fit_class_pca(&images.select_rows(&idx), y, retained_variance)
        })
        .collect()
}

/// One PCA draw before clamping.
pub fn sample_init_raw(pca: &ClassPCA, sigma: f64, rng: &mut impl Rng) -> Result<Vec<f64>, GenesisError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(GenesisError::InvalidConfig(format!("sigma must be positive, got {sigma}")));
    }
    let normal = Normal::new(0.0, sigma).expect("validated sigma");
    let coeffs: Vec<f64> = pca.scales.iter().map(|l| l * normal.sample(rng)).collect();
    Ok(pca.reconstruct(&coeffs))
}

/// `count` clamped PCA draws `[count, ...sample_shape]`, plus the fraction of
/// pixels the clamp moved.
pub fn sample_init(
    pca: &ClassPCA,
    sigma: f64,
    count: usize,
    clamp: [f64; 2],
    rng: &mut impl Rng,
) -> Result<(Array, f64), GenesisError> {
    let mut data = Vec::with_capacity(count * pca.dim());
    let mut clamped = 0usize;
    for _ in 0..count {
        for v in sample_init_raw(pca, sigma, rng)? {
            let c = v.clamp(clamp[0], clamp[1]);
            if c != v {
                clamped += 1;
            }
            data.push(c);
        }
    }
    let mut shape = vec![count];
    shape.extend_from_slice(&pca.sample_shape);
    let frac = if data.is_empty() {
        0.0
    } else {
        clamped as f64 / data.len() as f64
    };
    if frac > 0.0 {
        log::info!("class {}: clamp moved {:.3}% of init pixels", pca.label, 100.0 * frac);
    }
    Ok((Array::new(shape, data)?, frac))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SGLDConfig {
    pub steps: usize,
    /// Momentum retention ζ.
    pub friction: f64,
    /// η; the gradient enters as `η/2 ∇E`.
    pub step_size: f64,
    /// γ; per-pixel noise has standard deviation `√γ`.
    pub noise_variance: f64,
    pub sigma_pca: f64,
    pub clamp: [f64; 2],
}

impl Default for SGLDConfig {
    fn default() -> Self {
        SGLDConfig {
            steps: 150,
            friction: 0.8,
            step_size: 0.05,
            noise_variance: 0.001,
            sigma_pca: 0.01,
            clamp: [0.0, 1.0],
        }
    }
}

impl SGLDConfig {
    /// Settings for TRADES-style models.
    pub fn trades_style() -> Self {
        Self::default()
    }

    /// Shorter, lower-momentum chains for SAT-style models.
    pub fn sat_style() -> Self {
        SGLDConfig {
            steps: 20,
            friction: 0.5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), GenesisError> {
        let bad = |m: &str| Err(GenesisError::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.friction) {
            return bad("friction must lie in [0, 1]");
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad("step_size must be positive");
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return bad("noise_variance must be non-negative");
        }
        if !(self.sigma_pca > 0.0 && self.sigma_pca.is_finite()) {
            return bad("sigma_pca must be positive");
        }
        if !(self.clamp[0] < self.clamp[1]) {
            return bad("clamp range must satisfy lo < hi");
        }
        Ok(())
    }
}

/// Anything that can report `E(x, y)`, `E(x)` and `∇ₓ Σ E(x, y)` for a batch.
pub trait EnergyModel {
    fn num_classes(&self) -> usize;

    /// Per-row joint and marginal energies and the gradient of the summed joint energy.
    fn joint_energy_grad(&self, x: &Array, y: &[usize]) -> Result<(Vec<f64>, Vec<f64>, Array), GenesisError>;
}

impl EnergyModel for ModelState {
    fn num_classes(&self) -> usize {
        ModelState::num_classes(self)
    }

    fn joint_energy_grad(&self, x: &Array, y: &[usize]) -> Result<(Vec<f64>, Vec<f64>, Array), GenesisError> {
        let n = x.rows();
        let mut joint = Vec::with_capacity(n);
        let mut marginal = Vec::with_capacity(n);
        let mut grads = Vec::new();
        for lo in (0..n).step_by(CHUNK) {
            let idx: Vec<usize> = (lo..(lo + CHUNK).min(n)).collect();
            let tape = Tape::new();
            let params = self.bind(&tape, false);
            let xv = tape.leaf(x.select_rows(&idx));
            let logits = self.forward(&params, xv)?;
            let ej = rows::joint(logits, &y[lo..lo + idx.len()])?;
            let em = rows::marginal(logits)?;
            joint.extend_from_slice(ej.value().data());
            marginal.extend_from_slice(em.value().data());
            let root = ej.sum()?;
            grads.push(match tape.backward(root) {
                Ok(g) => g.wrt(xv),
                Err(NdError::Detached) => Array::zeros(xv.value().shape()),
                Err(e) => return Err(e.into()),
            });
        }
        if grads.is_empty() {
            return Ok((joint, marginal, x.clone()));
        }
        Ok((joint, marginal, Array::concat_rows(&grads)?))
    }
}

/// `E(x, y) = ½‖x − c‖²` (and the same value as the marginal); a test hook
/// with a closed-form descent path.
#[derive(Clone, Debug)]
pub struct QuadraticEnergy {
    pub center: Vec<f64>,
}

impl EnergyModel for QuadraticEnergy {
    fn num_classes(&self) -> usize {
        1
    }

    fn joint_energy_grad(&self, x: &Array, _y: &[usize]) -> Result<(Vec<f64>, Vec<f64>, Array), GenesisError> {
        if x.row_len() != self.center.len() {
            return Err(NdError::ShapeMismatch {
                op: "QuadraticEnergy",
                expected: vec![self.center.len()],
                found: x.shape().to_vec(),
            }
            .into());
        }
        let mut e = Vec::with_capacity(x.rows());
        let mut g = x.clone();
        for r in 0..x.rows() {
            let row = g.row_mut(r);
            let mut s = 0.0;
            for (v, c) in row.iter_mut().zip(&self.center) {
                *v -= c;
                s += *v * *v;
            }
            e.push(0.5 * s);
        }
        Ok((e.clone(), e, g))
    }
}

/// Chains for one class and their energy paths.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationResult {
    pub label: usize,
    /// Final samples, `[chains, ...]`.
    pub samples: Array,
    /// Mean `E(x, y)` over chains at steps `0..=N`.
    pub joint_energy_trajectory: Vec<f64>,
    pub marginal_energy_trajectory: Vec<f64>,
    /// `[chain][step]` joint energies.
    pub chain_joint: Vec<Vec<f64>>,
    pub chain_marginal: Vec<Vec<f64>>,
    /// Mean and standard deviation of `E(x, y)` over real images of the class, when supplied.
    pub reference_energy: Option<(f64, f64)>,
}

impl GenerationResult {
    /// Fraction of chains whose final joint energy is below their initial one.
    pub fn descent_fraction(&self) -> f64 {
        if self.chain_joint.is_empty() {
            return 0.0;
        }
        let down = self
            .chain_joint
            .iter()
            .filter(|c| c.last().expect("N+1 records") < c.first().expect("N+1 records"))
            .count();
        down as f64 / self.chain_joint.len() as f64
    }
}

/// Momentum SGLD on `E(x, y)` from `x0 = [chains, ...]`.
pub fn sgld_momentum(
    model: &impl EnergyModel,
    y: usize,
    x0: &Array,
    cfg: &SGLDConfig,
    rng: &mut impl Rng,
) -> Result<GenerationResult, GenesisError> {
    cfg.validate()?;
    if y >= model.num_classes() {
        return Err(GenesisError::LabelOutOfRange {
            label: y,
            classes: model.num_classes(),
        });
    }
    if let Some((index, &value)) = x0
        .data()
        .iter()
        .enumerate()
        .find(|(_, v)| !(cfg.clamp[0]..=cfg.clamp[1]).contains(*v))
    {
        return Err(GenesisError::OutOfRange { index, value });
    }
    let chains = x0.rows();
    let labels = vec![y; chains];
    let noise = if cfg.noise_variance > 0.0 {
        Some(Normal::new(0.0, cfg.noise_variance.sqrt()).expect("validated variance"))
    } else {
        None
    };
    let mut x = x0.clone();
    let mut v = vec![0.0; x.len()];
    let mut chain_joint = vec![Vec::with_capacity(cfg.steps + 1); chains];
    let mut chain_marginal = vec![Vec::with_capacity(cfg.steps + 1); chains];
    for step in 0..=cfg.steps {
        let (ej, em, grad) = model
            .joint_energy_grad(&x, &labels)
            .map_err(|e| match e {
                GenesisError::Nd(source) => GenesisError::Numerical { step, source },
                other => other,
            })?;
        for c in 0..chains {
            chain_joint[c].push(ej[c]);
            chain_marginal[c].push(em[c]);
        }
        if step == cfg.steps {
            break;
        }
        if let Some(index) = grad.data().iter().position(|g| !g.is_finite()) {
            return Err(GenesisError::Numerical {
                step,
                source: NdError::NonFinite {
                    op: "sgld gradient",
                    index,
                },
            });
        }
        for ((xi, vi), gi) in x.data_mut().iter_mut().zip(v.iter_mut()).zip(grad.data()) {
            *vi = cfg.friction * *vi - 0.5 * cfg.step_size * gi;
            let eps = noise.map_or(0.0, |n| n.sample(rng));
            *xi = (*xi + *vi + eps).clamp(cfg.clamp[0], cfg.clamp[1]);
        }
    }
    let mean_at = |series: &[Vec<f64>], s: usize| {
        if chains == 0 {
            f64::NAN
        } else {
            series.iter().map(|c| c[s]).sum::<f64>() / chains as f64
        }
    };
    let steps = if chains == 0 { 0 } else { cfg.steps + 1 };
    Ok(GenerationResult {
        label: y,
        samples: x,
        joint_energy_trajectory: (0..steps).map(|s| mean_at(&chain_joint, s)).collect(),
        marginal_energy_trajectory: (0..steps).map(|s| mean_at(&chain_marginal, s)).collect(),
        chain_joint,
        chain_marginal,
        reference_energy: None,
    })
}

/// Mean and population std of `E(x, y)` over `images`, all labelled `y`.
pub fn reference_joint_energy(model: &ModelState, images: &Array, y: usize) -> Result<(f64, f64), GenesisError> {
    let logits = model.logits(images)?;
    let e: Vec<f64> = (0..logits.rows()).map(|r| -logits.row(r)[y]).collect();
    Ok(energy::mean_std(&e))
}

/// Samples for every class, laid out one class per row.
#[derive(Clone, Debug)]
pub struct Grid {
    pub per_class: usize,
    pub results: Vec<GenerationResult>,
}

impl Grid {
    /// Trajectory CSV: `chain_id,step,joint_energy,marginal_energy`; chain ids
    /// run class-major.
    pub fn write_trajectory_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "chain_id,step,joint_energy,marginal_energy")?;
        let mut id = 0;
        for r in &self.results {
            for (j, m) in r.chain_joint.iter().zip(&r.chain_marginal) {
                for (s, (ej, em)) in j.iter().zip(m).enumerate() {
                    writeln!(w, "{id},{s},{ej},{em}")?;
                }
                id += 1;
            }
        }
        Ok(())
    }

    /// 8-bit RGB PNG with one row of `[3, H, W]` (or `[1, H, W]`) tiles per class.
    pub fn write_png(&self, path: &Path) -> Result<(), GenesisError> {
        let first = self
            .results
            .first()
            .filter(|r| r.samples.rows() > 0)
            .ok_or_else(|| GenesisError::InvalidConfig("empty grid has no image".into()))?;
        let shape = &first.samples.shape()[1..];
        let (c, h, w) = match *shape {
            [c @ (1 | 3), h, w] => (c, h, w),
            _ => return Err(GenesisError::InvalidConfig(format!("cannot tile samples of shape {shape:?}"))),
        };
        let (cols, grid_rows) = (self.per_class, self.results.len());
        let (width, height) = (cols * w, grid_rows * h);
        let mut buf = vec![0u8; width * height * 3];
        for (gy, r) in self.results.iter().enumerate() {
            for gx in 0..r.samples.rows().min(cols) {
                let img = r.samples.row(gx);
                for py in 0..h {
                    for px in 0..w {
                        let o = ((gy * h + py) * width + gx * w + px) * 3;
                        for ch in 0..3 {
                            let v = img[(ch % c) * h * w + py * w + px];
                            buf[o + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                        }
                    }
                }
            }
        }
        let file = std::fs::File::create(path)?;
        let mut enc = png::Encoder::new(std::io::BufWriter::new(file), width as u32, height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| GenesisError::Png(e.to_string()))?;
        writer.write_image_data(&buf).map_err(|e| GenesisError::Png(e.to_string()))?;
        writer.finish().map_err(|e| GenesisError::Png(e.to_string()))?;
        Ok(())
    }
}

/// Runs `per_class` chains for every fitted class. `reference` supplies real
/// images and labels for the per-class reference energies.
pub fn generate_grid(
    model: &ModelState,
    pcas: &[ClassPCA],
    cfg: &SGLDConfig,
    per_class: usize,
    reference: Option<(&Array, &[usize])>,
    rng: &mut impl Rng,
) -> Result<Grid, GenesisError> {
    cfg.validate()?;
    let mut results = Vec::with_capacity(pcas.len());
    for pca in pcas {
        let (x0, _) = sample_init(pca, cfg.sigma_pca, per_class, cfg.clamp, rng)?;
        let mut res = sgld_momentum(model, pca.label, &x0, cfg, rng)?;
        if let Some((images, labels)) = reference {
            let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == pca.label).collect();
            if !idx.is_empty() {
                res.reference_energy = Some(reference_joint_energy(model, &images.select_rows(&idx), pca.label)?);
            }
        }
        results.push(res);
    }
    Ok(Grid { per_class, results })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::ModelSpec;
    use crate::testutil::{rng, uniform};

    #[test]
    fn single_image_has_no_components() {
        let img = Array::new(vec![1, 4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let p = fit_class_pca(&img, 0, 0.99).unwrap();
        assert!(p.components.is_empty());
        assert_eq!(p.mean, vec![0.1, 0.2, 0.3, 0.4]);
        let (x, _) = sample_init(&p, 0.5, 1, [0.0, 1.0], &mut rng(0)).unwrap();
        assert_eq!(x.data(), &[0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn two_point_closed_form() {
        let a = [0.2, 0.5, 0.9];
        let b = [0.6, 0.1, 0.4];
        let imgs = Array::new(vec![2, 3], a.iter().chain(&b).copied().collect()).unwrap();
        let p = fit_class_pca(&imgs, 3, 0.99).unwrap();
        assert_eq!(p.components.len(), 1);
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        // projections are ±norm/2, sample std with n-1 = 1
        assert!((p.scales[0] - norm / 2f64.sqrt()).abs() < 1e-12);
        let cos: f64 = p.components[0].iter().zip(&d).map(|(u, v)| u * v).sum::<f64>() / norm;
        assert!((cos.abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_rank_reconstruction() {
        let imgs = uniform(&[6, 10], 0.0, 1.0, &mut rng(4));
        let p = fit_class_pca(&imgs, 0, 1.0).unwrap();
        assert!(p.gram_residual() < 1e-10);
        for r in 0..6 {
            let x = imgs.row(r);
            let back = p.reconstruct(&p.project(x));
            let err = back.iter().zip(x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-8, "row {r}: {err}");
        }
    }

    #[test]
    fn scales_sorted_and_variance_met() {
        let imgs = uniform(&[30, 12], 0.0, 1.0, &mut rng(5));
        let p = fit_class_pca(&imgs, 0, 0.9).unwrap();
        assert!(p.scales.windows(2).all(|w| w[0] >= w[1]));
        let kept: f64 = p.scales.iter().map(|s| s * s).sum();
        assert!(kept / p.total_variance >= 0.9);
        let fewer: f64 = p.scales[..p.scales.len() - 1].iter().map(|s| s * s).sum();
        assert!(fewer / p.total_variance < 0.9);
    }

    #[test]
    fn tiny_sigma_returns_mean() {
        let imgs = uniform(&[8, 5], 0.2, 0.8, &mut rng(6));
        let p = fit_class_pca(&imgs, 0, 0.99).unwrap();
        let x = sample_init_raw(&p, 1e-12, &mut rng(1)).unwrap();
        for (a, b) in x.iter().zip(&p.mean) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_friction_no_noise_is_one_gradient_step() {
        let q = QuadraticEnergy {
            center: vec![0.5, 0.2, 0.9],
        };
        let x0 = Array::new(vec![1, 3], vec![0.1, 0.4, 0.6]).unwrap();
        let cfg = SGLDConfig {
            steps: 1,
            friction: 0.0,
            noise_variance: 0.0,
            step_size: 0.3,
            ..SGLDConfig::default()
        };
        let r = sgld_momentum(&q, 0, &x0, &cfg, &mut rng(0)).unwrap();
        for ((x, x0), c) in r.samples.data().iter().zip(x0.data()).zip(&q.center) {
            let expected = (x0 - 0.5 * 0.3 * (x0 - c)).clamp(0.0, 1.0);
            assert_eq!(*x, expected);
        }
        assert_eq!(r.joint_energy_trajectory.len(), 2);
    }

    #[test]
    fn zero_weight_model_stays_put() {
        let mut m = ModelState::init(ModelSpec::mlp(4, &[3], 2), 0).unwrap();
        for (_, p) in m.params.iter_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x0 = uniform(&[3, 4], 0.0, 1.0, &mut rng(2));
        let cfg = SGLDConfig {
            steps: 25,
            friction: 1.0,
            noise_variance: 0.0,
            ..SGLDConfig::default()
        };
        let r = sgld_momentum(&m, 1, &x0, &cfg, &mut rng(0)).unwrap();
        assert_eq!(r.samples, x0);
    }

    #[test]
    fn rejects_out_of_range_start_and_bad_label() {
        let q = QuadraticEnergy { center: vec![0.0; 2] };
        let x0 = Array::new(vec![1, 2], vec![0.5, 1.5]).unwrap();
        assert!(matches!(
            sgld_momentum(&q, 0, &x0, &SGLDConfig::default(), &mut rng(0)),
            Err(GenesisError::OutOfRange { index: 1, .. })
        ));
        let x0 = Array::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        assert!(matches!(
            sgld_momentum(&q, 1, &x0, &SGLDConfig::default(), &mut rng(0)),
            Err(GenesisError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(SGLDConfig::default().validate().is_ok());
        assert_eq!(SGLDConfig::sat_style().steps, 20);
        for bad in [
            SGLDConfig { friction: 1.5, ..Default::default() },
            SGLDConfig { step_size: 0.0, ..Default::default() },
            SGLDConfig { noise_variance: -1.0, ..Default::default() },
            SGLDConfig { sigma_pca: 0.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn empty_grid() {
        let m = ModelState::init(ModelSpec::mlp(4, &[3], 2), 0).unwrap();
        let imgs = uniform(&[4, 4], 0.0, 1.0, &mut rng(3));
        let pcas = fit_all_classes(&imgs, &[0, 1, 0, 1], 2, 0.99).unwrap();
        let g = generate_grid(&m, &pcas, &SGLDConfig::default(), 0, None, &mut rng(0)).unwrap();
        assert!(g.results.iter().all(|r| r.samples.rows() == 0));
        let mut csv = Vec::new();
        g.write_trajectory_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap(), "chain_id,step,joint_energy,marginal_energy\n");
    }

    /// `[v; d]` after `n` steps of `v ← ζv − a d, d ← d + v`, by repeated squaring.
    fn momentum_gd_oracle(zeta: f64, a: f64, n: usize, d0: f64) -> f64 {
        let mul = |p: [[f64; 2]; 2], q: [[f64; 2]; 2]| {
            let mut r = [[0.0; 2]; 2];
            for i in 0..2 {
                for j in 0..2 {
                    r[i][j] = p[i][0] * q[0][j] + p[i][1] * q[1][j];
                }
            }
            r
        };
        let mut base = [[zeta, -a], [zeta, 1.0 - a]];
        let mut acc = [[1.0, 0.0], [0.0, 1.0]];
        let mut k = n;
        while k > 0 {
            if k & 1 == 1 {
                acc = mul(acc, base);
            }
            base = mul(base, base);
            k >>= 1;
        }
        acc[1][1] * d0
    }

    #[test]
    fn quadratic_surrogate_follows_momentum_recurrence() {
        let c = vec![0.5, 0.45, 0.55, 0.5];
        let q = QuadraticEnergy { center: c.clone() };
        let x0 = Array::new(vec![2, 4], vec![0.2, 0.7, 0.3, 0.8, 0.75, 0.3, 0.65, 0.25]).unwrap();
        let cfg = SGLDConfig {
            steps: 150,
            friction: 0.8,
            step_size: 0.05,
            noise_variance: 0.0,
            ..SGLDConfig::default()
        };
        let r = sgld_momentum(&q, 0, &x0, &cfg, &mut rng(0)).unwrap();
        let mut d0 = 0.0;
        let mut d_n = 0.0;
        for (i, (&x, &s)) in x0.data().iter().zip(r.samples.data()).enumerate() {
            let ci = c[i % 4];
            let expected = ci + momentum_gd_oracle(0.8, 0.025, 150, x - ci);
            assert!((s - expected).abs() < 1e-12, "coord {i}: {s} vs {expected}");
            d0 += (x - ci).powi(2);
            d_n += (s - ci).powi(2);
        }
        assert!(d_n.sqrt() < 0.01 * d0.sqrt());
        // shorter horizons agree too
        let r10 = sgld_momentum(&q, 0, &x0, &SGLDConfig { steps: 10, ..cfg }, &mut rng(0)).unwrap();
        let e = c[0] + momentum_gd_oracle(0.8, 0.025, 10, 0.2 - c[0]);
        assert!((r10.samples.data()[0] - e).abs() < 1e-12);
    }

    #[test]
    fn noiseless_chains_ignore_the_rng() {
        let q = QuadraticEnergy { center: vec![0.3; 3] };
        let x0 = uniform(&[4, 3], 0.0, 1.0, &mut rng(7));
        let cfg = SGLDConfig {
            noise_variance: 0.0,
            steps: 30,
            ..SGLDConfig::default()
        };
        let a = sgld_momentum(&q, 0, &x0, &cfg, &mut rng(1)).unwrap();
        let b = sgld_momentum(&q, 0, &x0, &cfg, &mut rng(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noisy_chains_stay_in_range() {
        let m = ModelState::init(ModelSpec::mlp(6, &[5], 3), 4).unwrap();
        let x0 = uniform(&[5, 6], 0.0, 1.0, &mut rng(8));
        let cfg = SGLDConfig {
            noise_variance: 0.5,
            step_size: 5.0,
            steps: 40,
            ..SGLDConfig::default()
        };
        let r = sgld_momentum(&m, 2, &x0, &cfg, &mut rng(3)).unwrap();
        assert!(r.samples.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(r.chain_joint.len(), 5);
        assert!(r.chain_joint.iter().all(|c| c.len() == 41));
    }

    #[test]
    fn init_covariance_matches_scales() {
        let imgs = uniform(&[40, 8], 0.0, 1.0, &mut rng(11));
        let p = fit_class_pca(&imgs, 0, 0.99).unwrap();
        assert!(p.gram_residual() < 1e-8);
        let sigma = 0.7;
        let draws = 10_000;
        let mut r = rng(12);
        let k = p.components.len();
        let mut sum = vec![0.0; k];
        let mut sq = vec![0.0; k];
        for _ in 0..draws {
            let x = sample_init_raw(&p, sigma, &mut r).unwrap();
            for (i, c) in p.project(&x).iter().enumerate() {
                sum[i] += c;
                sq[i] += c * c;
            }
        }
        for i in 0..k {
            let mean = sum[i] / draws as f64;
            let var = sq[i] / draws as f64 - mean * mean;
            let want = (p.scales[i] * sigma).powi(2);
            assert!((var / want - 1.0).abs() < 0.1, "component {i}: {var} vs {want}");
        }
    }
}
