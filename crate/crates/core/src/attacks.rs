//! ℓ∞ projected sign-gradient attacks with per-step energy logging.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::{self, rows, EnergyError};
use crate::ndcore::{argmax, Array, NdError, Tape};
use crate::nets::{ModelState, NetError};

/// Rows per tape when computing attack gradients.
const CHUNK: usize = 128;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{labels} labels for {rows} inputs")]
    LabelCount { labels: usize, rows: usize },
    #[error("input value {value} at index {index} outside clamp range")]
    InputOutOfRange { index: usize, value: f64 },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("numerical failure during attack step {step}: {source}")]
    Numerical { step: usize, source: NdError },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerLoss {
    CeUntargeted,
    CeTargeted,
    KlTrades,
    CwMargin,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RandomStart {
    None,
    UniformBall,
    Gaussian { sigma: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// Every sample is pushed toward this class.
    Class(usize),
    /// Each sample gets a uniformly drawn class different from its label.
    RandomOther,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub loss: InnerLoss,
    pub target: Option<Target>,
    pub random_start: RandomStart,
    pub clamp: [f64; 2],
    /// Confidence floor for the margin loss.
    pub kappa: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 8.0 / 255.0,
            alpha: 2.0 / 255.0,
            steps: 20,
            loss: InnerLoss::CeUntargeted,
            target: None,
            random_start: RandomStart::UniformBall,
            clamp: [0.0, 1.0],
            kappa: 0.0,
        }
    }
}

impl AttackConfig {
    /// CE ascent from a uniform random start, as used for SAT.
    pub fn sat() -> Self {
        Self::default()
    }

    /// KL inner maximization from a small Gaussian start, as used for TRADES and WEAT.
    pub fn trades() -> Self {
        AttackConfig {
            loss: InnerLoss::KlTrades,
            random_start: RandomStart::Gaussian { sigma: 0.001 },
            ..Self::default()
        }
    }

    /// Deterministic trajectory: CE ascent with no random start.
    pub fn analysis() -> Self {
        AttackConfig {
            random_start: RandomStart::None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        let bad = |m: &str| Err(AttackError::InvalidConfig(m.to_string()));
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be finite and non-negative");
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be positive");
        }
        if !(self.clamp[0] < self.clamp[1]) {
            return bad("clamp range must satisfy lo < hi");
        }
        if !(self.kappa >= 0.0) {
            return bad("kappa must be non-negative");
        }
        if let RandomStart::Gaussian { sigma } = self.random_start {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return bad("gaussian start sigma must be positive");
            }
        }
        match (self.loss, self.target) {
            (InnerLoss::CeTargeted, None) => bad("ce_targeted requires a target"),
            (InnerLoss::CeTargeted, Some(_)) => Ok(()),
            (_, Some(_)) => bad("target is only valid with ce_targeted"),
            (_, None) => Ok(()),
        }
    }
}

/// Adversarial batch plus the energy series along the attack path.
///
/// Series entries are indexed by step: index 0 is the (possibly randomly
/// started) initialization, index `s` the point after `s` updates.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub adversarial: Array,
    pub per_step_marginal: Vec<f64>,
    pub per_step_joint: Vec<f64>,
    pub per_step_marginal_std: Vec<f64>,
    pub per_step_joint_std: Vec<f64>,
    /// Untargeted: prediction differs from the label. Targeted: prediction equals the target.
    pub success_mask: Vec<bool>,
    /// Labels used for the joint energies and success test.
    pub labels: Vec<usize>,
    pub targets: Option<Vec<usize>>,
    /// Logits at the returned adversarial points.
    pub final_logits: Array,
}

impl AttackResult {
    pub fn success_rate(&self) -> f64 {
        if self.success_mask.is_empty() {
            return 0.0;
        }
        self.success_mask.iter().filter(|&&s| s).count() as f64 / self.success_mask.len() as f64
    }

    /// Fraction of samples whose adversarial prediction still equals the label.
    pub fn robust_accuracy(&self) -> f64 {
        let n = self.labels.len();
        if n == 0 {
            return 0.0;
        }
        let correct = (0..n)
            .filter(|&r| argmax(self.final_logits.row(r)) == self.labels[r])
            .count();
        correct as f64 / n as f64
    }

    /// CSV with columns `step,mean_marginal,mean_joint,std_marginal,std_joint`.
    pub fn write_energy_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "step,mean_marginal,mean_joint,std_marginal,std_joint")?;
        for s in 0..self.per_step_marginal.len() {
            writeln!(
                w,
                "{},{},{},{},{}",
                s,
                self.per_step_marginal[s],
                self.per_step_joint[s],
                self.per_step_marginal_std[s],
                self.per_step_joint_std[s]
            )?;
        }
        Ok(())
    }
}

/// Clips `candidate` into the ε-box around `origin`, then into the clamp range.
pub fn project_linf(candidate: &Array, origin: &Array, epsilon: f64, clamp: [f64; 2]) -> Result<Array, AttackError> {
    if candidate.shape() != origin.shape() {
        return Err(AttackError::ShapeMismatch(
            candidate.shape().to_vec(),
            origin.shape().to_vec(),
        ));
    }
    candidate
        .zip_map(origin, |c, o| c.clamp(o - epsilon, o + epsilon).clamp(clamp[0], clamp[1]))
        .map_err(|_| AttackError::ShapeMismatch(candidate.shape().to_vec(), origin.shape().to_vec()))
}

fn check_inputs(model: &ModelState, x: &Array, labels: &[usize], cfg: &AttackConfig) -> Result<(), AttackError> {
    cfg.validate()?;
    if labels.len() != x.rows() {
        return Err(AttackError::LabelCount {
            labels: labels.len(),
            rows: x.rows(),
        });
    }
    let k = model.num_classes();
    if let Some(&label) = labels.iter().find(|&&y| y >= k) {
        return Err(AttackError::LabelOutOfRange { label, classes: k });
    }
    if let Some((index, &value)) = x
        .data()
        .iter()
        .enumerate()
        .find(|(_, &v)| !(v >= cfg.clamp[0] && v <= cfg.clamp[1]))
    {
        return Err(AttackError::InputOutOfRange { index, value });
    }
    Ok(())
}

fn resolve_targets(
    cfg: &AttackConfig,
    labels: &[usize],
    classes: usize,
    rng: &mut impl Rng,
) -> Result<Option<Vec<usize>>, AttackError> {
    match cfg.target {
        None => Ok(None),
        Some(Target::Class(t)) if t < classes => Ok(Some(vec![t; labels.len()])),
        Some(Target::Class(t)) => Err(AttackError::LabelOutOfRange { label: t, classes }),
        Some(Target::RandomOther) if classes < 2 => {
            Err(AttackError::InvalidConfig("random targets need two or more classes".into()))
        }
        Some(Target::RandomOther) => Ok(Some(
            labels
                .iter()
                .map(|&y| {
                    let t = rng.random_range(0..classes - 1);
                    if t >= y {
                        t + 1
                    } else {
                        t
                    }
                })
                .collect(),
        )),
    }
}

fn random_start(x: &Array, cfg: &AttackConfig, rng: &mut impl Rng) -> Result<Array, AttackError> {
    let start = match cfg.random_start {
        RandomStart::None => x.clone(),
        RandomStart::UniformBall if cfg.epsilon > 0.0 => x.map(|v| v + rng.random_range(-cfg.epsilon..=cfg.epsilon)),
        RandomStart::UniformBall => x.clone(),
        RandomStart::Gaussian { sigma } => {
            let normal = Normal::new(0.0, sigma).expect("validated sigma");
            x.map(|v| v + normal.sample(rng))
        }
    };
    project_linf(&start, x, cfg.epsilon, cfg.clamp)
}

/// Per-sample objective that the attack ascends.
enum Objective<'a> {
    Ce(&'a [usize]),
    NegCe(&'a [usize]),
    Kl(&'a Array),
    NegMargin(&'a [usize], f64),
}

/// Gradient of the summed objective w.r.t. `x`, plus the logits at `x`.
fn objective_grad(model: &ModelState, x: &Array, objective: &Objective<'_>) -> Result<(Array, Array), NdError> {
    let n = x.rows();
    let chunks: Vec<(usize, usize)> = (0..n).step_by(CHUNK).map(|s| (s, (s + CHUNK).min(n))).collect();
    let parts: Result<Vec<(Array, Array)>, NdError> = chunks
        .par_iter()
        .map(|&(lo, hi)| {
            let idx: Vec<usize> = (lo..hi).collect();
            let tape = Tape::new();
            let params = model.bind(&tape, false);
            let xv = tape.leaf(x.select_rows(&idx));
            let logits = model.forward(&params, xv).map_err(|e| match e {
                NetError::Nd(e) => e,
                other => panic!("input validated before attack: {other}"),
            })?;
            let per_sample = match objective {
                Objective::Ce(y) => rows::cross_entropy(logits, &y[lo..hi])?,
                Objective::NegCe(t) => rows::cross_entropy(logits, &t[lo..hi])?.neg()?,
                Objective::Kl(reference) => {
                    let r = tape.constant(reference.select_rows(&idx));
                    rows::kl(r, logits)?
                }
                Objective::NegMargin(y, kappa) => rows::cw_margin(logits, &y[lo..hi], *kappa)?.neg()?,
            };
            let root = per_sample.sum()?;
            let grad = match tape.backward(root) {
                Ok(g) => g.wrt(xv),
                Err(NdError::Detached) => Array::zeros(xv.value().shape()),
                Err(e) => return Err(e),
            };
            let l = logits.value().clone();
            Ok((grad, l))
        })
        .collect();
    let (grads, logits): (Vec<Array>, Vec<Array>) = parts?.into_iter().unzip();
    Ok((Array::concat_rows(&grads)?, Array::concat_rows(&logits)?))
}

fn energy_stats(logits: &Array, labels: &[usize]) -> Result<(f64, f64, f64, f64), AttackError> {
    let pairs = energy::energy_pairs(logits, labels)?;
    let marg: Vec<f64> = pairs.iter().map(|p| p.marginal).collect();
    let joint: Vec<f64> = pairs.iter().map(|p| p.joint).collect();
    let (mm, sm) = energy::mean_std(&marg);
    let (mj, sj) = energy::mean_std(&joint);
    Ok((mm, mj, sm, sj))
}

fn run(
    model: &ModelState,
    x: &Array,
    labels: &[usize],
    targets: Option<Vec<usize>>,
    objective: Objective<'_>,
    cfg: &AttackConfig,
    rng: &mut impl Rng,
) -> Result<AttackResult, AttackError> {
    let mut adv = random_start(x, cfg, rng)?;
    let mut result = AttackResult {
        adversarial: Array::zeros(&[0]),
        per_step_marginal: Vec::with_capacity(cfg.steps + 1),
        per_step_joint: Vec::with_capacity(cfg.steps + 1),
        per_step_marginal_std: Vec::with_capacity(cfg.steps + 1),
        per_step_joint_std: Vec::with_capacity(cfg.steps + 1),
        success_mask: Vec::new(),
        labels: labels.to_vec(),
        targets: None,
        final_logits: Array::zeros(&[0]),
    };
    let record = |logits: &Array, result: &mut AttackResult| -> Result<(), AttackError> {
        let (mm, mj, sm, sj) = energy_stats(logits, labels)?;
        result.per_step_marginal.push(mm);
        result.per_step_joint.push(mj);
        result.per_step_marginal_std.push(sm);
        result.per_step_joint_std.push(sj);
        Ok(())
    };
    for step in 0..cfg.steps {
        let (grad, logits) =
            objective_grad(model, &adv, &objective).map_err(|source| AttackError::Numerical { step, source })?;
        record(&logits, &mut result)?;
        let stepped = adv
            .zip_map(&grad, |v, g| v + cfg.alpha * sign(g))
            .expect("gradient has input shape");
        adv = project_linf(&stepped, x, cfg.epsilon, cfg.clamp)?;
    }
    let final_logits = model.logits(&adv)?;
    record(&final_logits, &mut result)?;
    result.success_mask = (0..labels.len())
        .map(|r| {
            let pred = argmax(final_logits.row(r));
            match &targets {
                Some(t) => pred == t[r],
                None => pred != labels[r],
            }
        })
        .collect();
    result.adversarial = adv;
    result.final_logits = final_logits;
    result.targets = targets;
    Ok(result)
}

fn sign(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projected sign-gradient attack.
///
/// `labels` are the true classes. For `ce_targeted` the targets come from
/// `cfg.target`; for `kl_trades` the labels only feed the logged joint
/// energies and the success test.
pub fn pgd(
    model: &ModelState,
    x: &Array,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut impl Rng,
) -> Result<AttackResult, AttackError> {
    check_inputs(model, x, labels, cfg)?;
    let targets = resolve_targets(cfg, labels, model.num_classes(), rng)?;
    let reference;
    let target_labels = targets.clone().unwrap_or_default();
    let objective = match cfg.loss {
        InnerLoss::CeUntargeted => Objective::Ce(labels),
        InnerLoss::CeTargeted => Objective::NegCe(&target_labels),
        InnerLoss::KlTrades => {
            reference = model.logits(x)?;
            Objective::Kl(&reference)
        }
        InnerLoss::CwMargin => {
            if model.num_classes() < 2 {
                return Err(EnergyError::TooFewClasses.into());
            }
            Objective::NegMargin(labels, cfg.kappa)
        }
    };
    run(model, x, labels, targets, objective, cfg, rng)
}

/// Label-free TRADES inner maximization of `KL(p(·|x) ‖ p(·|x'))`.
///
/// The natural distribution is computed once and held fixed. Logged joint
/// energies and the success test use the natural predictions as labels.
pub fn pgd_kl(model: &ModelState, x: &Array, cfg: &AttackConfig, rng: &mut impl Rng) -> Result<AttackResult, AttackError> {
    if cfg.loss != InnerLoss::KlTrades {
        return Err(AttackError::InvalidConfig("pgd_kl requires loss = kl_trades".into()));
    }
    let predicted = model.predict(x)?;
    pgd(model, x, &predicted, cfg, rng)
}

/// Mean marginal energy before and after an attack.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyShift {
    pub mean_natural: f64,
    pub mean_adversarial: f64,
    /// `mean E(x') - mean E(x)`
    pub shift: f64,
    pub samples: usize,
    pub success_rate: f64,
}

/// Runs `cfg` on the batch and reports how far it moves the mean marginal energy.
pub fn energy_shift(
    model: &ModelState,
    x: &Array,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut impl Rng,
) -> Result<EnergyShift, AttackError> {
    let natural = model.logits(x)?;
    let (mean_natural, ..) = energy_stats(&natural, labels)?;
    let res = pgd(model, x, labels, cfg, rng)?;
    let mean_adversarial = *res.per_step_marginal.last().expect("final record");
    Ok(EnergyShift {
        mean_natural,
        mean_adversarial,
        shift: mean_adversarial - mean_natural,
        samples: labels.len(),
        success_rate: res.success_rate(),
    })
}

/// Energy shift under a targeted attack with random wrong-class targets.
pub fn targeted_energy_shift(
    model: &ModelState,
    x: &Array,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut impl Rng,
) -> Result<EnergyShift, AttackError> {
    if cfg.loss != InnerLoss::CeTargeted || cfg.target != Some(Target::RandomOther) {
        return Err(AttackError::InvalidConfig(
            "targeted_energy_shift requires ce_targeted with random_other targets".into(),
        ));
    }
    energy_shift(model, x, labels, cfg, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::ModelSpec;
    use crate::testutil::{rng, uniform};

    fn linear_1d(w: f64) -> ModelState {
        // two-layer mlp with a single hidden unit reproducing f(x) = [w x, 0] on x >= 0
        let mut m = ModelState::init(ModelSpec::mlp(1, &[1], 2), 0).unwrap();
        *m.param_mut("fc1.weight").unwrap() = Array::new(vec![1, 1], vec![1.0]).unwrap();
        *m.param_mut("fc1.bias").unwrap() = Array::zeros(&[1]);
        *m.param_mut("fc2.weight").unwrap() = Array::new(vec![2, 1], vec![w, 0.0]).unwrap();
        *m.param_mut("fc2.bias").unwrap() = Array::zeros(&[2]);
        m
    }

    #[test]
    fn projection_examples() {
        let o = Array::from_vec(vec![0.5, 0.5, 0.98]);
        let inside = Array::from_vec(vec![0.51, 0.49, 0.99]);
        assert_eq!(project_linf(&inside, &o, 0.05, [0.0, 1.0]).unwrap(), inside);
        let c = Array::from_vec(vec![0.9, 0.1, 0.0]);
        assert_eq!(project_linf(&c, &o, 0.0, [0.0, 1.0]).unwrap(), o);
        let far = o.map(|v| v + 0.1);
        let p = project_linf(&far, &o, 0.05, [0.0, 1.0]).unwrap();
        assert_eq!(p.data(), &[0.55, 0.55, 1.0]);
        assert_eq!(project_linf(&p, &o, 0.05, [0.0, 1.0]).unwrap(), p);
        assert!(project_linf(&Array::zeros(&[2]), &o, 0.1, [0.0, 1.0]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::default().validate().is_ok());
        assert!(AttackConfig::trades().validate().is_ok());
        let mut c = AttackConfig::default();
        c.loss = InnerLoss::CeTargeted;
        assert!(c.validate().is_err());
        c.target = Some(Target::RandomOther);
        assert!(c.validate().is_ok());
        c.loss = InnerLoss::CeUntargeted;
        assert!(c.validate().is_err());
        let c = AttackConfig {
            alpha: 0.0,
            ..AttackConfig::default()
        };
        assert!(c.validate().is_err());
        let c = AttackConfig {
            epsilon: -0.1,
            ..AttackConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_radius_returns_input() {
        let m = ModelState::init(ModelSpec::mlp(4, &[8], 3), 1).unwrap();
        let x = uniform(&[5, 4], 0.0, 1.0, &mut rng(1));
        let cfg = AttackConfig {
            epsilon: 0.0,
            steps: 7,
            ..AttackConfig::default()
        };
        let r = pgd(&m, &x, &[0, 1, 2, 0, 1], &cfg, &mut rng(2)).unwrap();
        assert_eq!(r.adversarial, x);
        assert_eq!(r.per_step_marginal.len(), 8);
    }

    #[test]
    fn linear_classifier_single_step_closed_form() {
        let w = 2.0;
        let m = linear_1d(w);
        let x = Array::new(vec![3, 1], vec![0.5, 0.2, 0.01]).unwrap();
        let cfg = AttackConfig {
            epsilon: 0.1,
            alpha: 0.05,
            steps: 1,
            random_start: RandomStart::None,
            ..AttackConfig::default()
        };
        let r = pgd(&m, &x, &[0, 0, 0], &cfg, &mut rng(0)).unwrap();
        // dCE/dx = -w (1 - p_0) < 0, so the step moves x down by alpha, clamped at 0
        assert_eq!(r.adversarial.data(), &[0.5 - 0.05, 0.2 - 0.05, 0.0]);
    }

    #[test]
    fn feasibility_across_configs() {
        let m = ModelState::init(ModelSpec::smallcnn([3, 6, 6], 4), 5).unwrap();
        let x = uniform(&[9, 3, 6, 6], 0.0, 1.0, &mut rng(3));
        let y = [0, 1, 2, 3, 0, 1, 2, 3, 0];
        let eps = 0.05;
        let losses = [
            (InnerLoss::CeUntargeted, None),
            (InnerLoss::CeTargeted, Some(Target::RandomOther)),
            (InnerLoss::CeTargeted, Some(Target::Class(2))),
            (InnerLoss::KlTrades, None),
            (InnerLoss::CwMargin, None),
        ];
        let starts = [RandomStart::None, RandomStart::UniformBall, RandomStart::Gaussian { sigma: 0.2 }];
        for (loss, target) in losses {
            for start in starts {
                let cfg = AttackConfig {
                    epsilon: eps,
                    alpha: 0.02,
                    steps: 4,
                    loss,
                    target,
                    random_start: start,
                    ..AttackConfig::default()
                };
                let r = pgd(&m, &x, &y, &cfg, &mut rng(4)).unwrap();
                for (a, o) in r.adversarial.data().iter().zip(x.data()) {
                    assert!((a - o).abs() <= eps + 1e-9);
                    assert!((0.0..=1.0).contains(a));
                }
            }
        }
    }

    #[test]
    fn kl_attack_from_near_identity_start() {
        let m = ModelState::init(ModelSpec::mlp(6, &[8], 3), 2).unwrap();
        let x = uniform(&[4, 6], 0.1, 0.9, &mut rng(6));
        let cfg = AttackConfig {
            steps: 0,
            ..AttackConfig::trades()
        };
        let r = pgd_kl(&m, &x, &cfg, &mut rng(7)).unwrap();
        let moved = r.adversarial.max_abs_diff(&x).unwrap();
        assert!(moved <= cfg.epsilon && moved < 0.01);
        let nat = m.logits(&x).unwrap();
        for i in 0..4 {
            assert!(energy::kl_direct(nat.row(i), r.final_logits.row(i)).unwrap() < 1e-4);
        }
        assert!(pgd_kl(&m, &x, &AttackConfig::default(), &mut rng(7)).is_err());
    }

    #[test]
    fn identical_logits_give_zero_kl_gradient() {
        let m = ModelState::init(ModelSpec::mlp(3, &[5], 3), 3).unwrap();
        let x = uniform(&[2, 3], 0.0, 1.0, &mut rng(8));
        let reference = m.logits(&x).unwrap();
        let (g, _) = objective_grad(&m, &x, &Objective::Kl(&reference)).unwrap();
        assert!(g.max_abs() < 1e-12);
    }

    #[test]
    fn deterministic_given_seed() {
        let m = ModelState::init(ModelSpec::mlp(5, &[7], 3), 9).unwrap();
        let x = uniform(&[6, 5], 0.0, 1.0, &mut rng(1));
        let y = [0, 1, 2, 0, 1, 2];
        let cfg = AttackConfig {
            loss: InnerLoss::CeTargeted,
            target: Some(Target::RandomOther),
            steps: 3,
            ..AttackConfig::default()
        };
        let a = pgd(&m, &x, &y, &cfg, &mut rng(11)).unwrap();
        let b = pgd(&m, &x, &y, &cfg, &mut rng(11)).unwrap();
        assert_eq!(a, b);
        let t = a.targets.unwrap();
        assert!(t.iter().zip(&y).all(|(t, y)| t != y));
    }

    #[test]
    fn zero_weight_model_has_no_energy_shift() {
        let mut m = ModelState::init(ModelSpec::mlp(4, &[5], 3), 0).unwrap();
        for (_, a) in &mut m.params {
            a.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = uniform(&[5, 4], 0.0, 1.0, &mut rng(2));
        let cfg = AttackConfig {
            loss: InnerLoss::CeTargeted,
            target: Some(Target::RandomOther),
            steps: 5,
            ..AttackConfig::default()
        };
        let s = targeted_energy_shift(&m, &x, &[0, 1, 2, 0, 1], &cfg, &mut rng(3)).unwrap();
        assert_eq!(s.shift, 0.0);
        assert!(targeted_energy_shift(&m, &x, &[0, 1, 2, 0, 1], &AttackConfig::default(), &mut rng(3)).is_err());
    }

    #[test]
    fn bad_inputs_rejected() {
        let m = ModelState::init(ModelSpec::mlp(2, &[3], 2), 0).unwrap();
        let x = Array::new(vec![1, 2], vec![0.5, 1.5]).unwrap();
        assert!(matches!(
            pgd(&m, &x, &[0], &AttackConfig::default(), &mut rng(0)),
            Err(AttackError::InputOutOfRange { index: 1, .. })
        ));
        let x = Array::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        assert!(matches!(
            pgd(&m, &x, &[2], &AttackConfig::default(), &mut rng(0)),
            Err(AttackError::LabelOutOfRange { .. })
        ));
        assert!(matches!(
            pgd(&m, &x, &[0, 1], &AttackConfig::default(), &mut rng(0)),
            Err(AttackError::LabelCount { .. })
        ));
    }

    #[test]
    fn energy_csv_layout() {
        let m = ModelState::init(ModelSpec::mlp(2, &[3], 2), 0).unwrap();
        let x = Array::new(vec![2, 2], vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        let cfg = AttackConfig {
            steps: 2,
            ..AttackConfig::analysis()
        };
        let r = pgd(&m, &x, &[0, 1], &cfg, &mut rng(0)).unwrap();
        let mut buf = Vec::new();
        r.write_energy_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,mean_marginal,mean_joint,std_marginal,std_joint");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("2,"));
    }
}
