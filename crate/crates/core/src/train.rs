//! Adversarial training loops with per-epoch energy tracing.
//!
//! Every method is an instance of one loss assembly: an inner maximization
//! (CE or KL), an outer classification term on natural or adversarial points,
//! an optional KL regularizer, and an optional per-sample weight computed on
//! detached natural-point quantities.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{self, AttackConfig, AttackError, InnerLoss};
use crate::data::Dataset;
use crate::energy::{self, rows, EnergyError};
use crate::ndcore::{argmax, Array, NdError, Tape, Var};
use crate::nets::{ModelSpec, ModelState, NetError};

/// Largest tolerated gap between the energy-form and softmax-form CE.
pub const CE_IDENTITY_TOL: f64 = 1e-9;

/// Rows per tape inside one training batch.
const CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: {reason}")]
    Diverged {
        epoch: usize,
        batch: usize,
        reason: String,
        /// Parameters after the last fully completed epoch.
        last_good: Box<ModelState>,
        trace: EnergyTrace,
    },
    #[error("energy-form cross-entropy drifted from the softmax form by {0:e}")]
    IdentityAudit(f64),
    #[error("trace has {0} epochs; phase detection needs at least 10")]
    TraceTooShort(usize),
    #[error("subset fraction {fraction} needs {needed} samples from a pool of {available}")]
    PoolTooSmall {
        fraction: f64,
        needed: usize,
        available: usize,
    },
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Nd(#[from] NdError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sat,
    Trades,
    WeatNat,
    WeatAdv,
    AblationVariant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerKind {
    Ce,
    Kl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterKind {
    /// `CE(f(x'), y)`
    CeAdv,
    /// `CE(f(x), y)`
    CeNat,
    /// Boosted CE on `x'`.
    BceAdv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    None,
    /// `1/ln(1+e^{|E(x)|})` on every term.
    Weat,
    /// `1 - p(y|x)` on the KL term only.
    Mart,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossAssembly {
    pub inner: InnerKind,
    pub outer: OuterKind,
    pub kl: bool,
    pub weight: Weighting,
}

impl LossAssembly {
    pub const SAT: LossAssembly = LossAssembly {
        inner: InnerKind::Ce,
        outer: OuterKind::CeAdv,
        kl: false,
        weight: Weighting::None,
    };
    pub const TRADES: LossAssembly = LossAssembly {
        inner: InnerKind::Kl,
        outer: OuterKind::CeNat,
        kl: true,
        weight: Weighting::None,
    };
    pub const WEAT_NAT: LossAssembly = LossAssembly {
        inner: InnerKind::Kl,
        outer: OuterKind::CeNat,
        kl: true,
        weight: Weighting::Weat,
    };
    pub const WEAT_ADV: LossAssembly = LossAssembly {
        inner: InnerKind::Kl,
        outer: OuterKind::CeAdv,
        kl: true,
        weight: Weighting::Weat,
    };
    pub const MART: LossAssembly = LossAssembly {
        inner: InnerKind::Ce,
        outer: OuterKind::BceAdv,
        kl: true,
        weight: Weighting::Mart,
    };

    fn uses_beta(&self) -> bool {
        self.kl
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    /// KL coefficient; ignored by methods without a KL term.
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_peak: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Inner maximization.
    pub attack: AttackConfig,
    /// Loss terms for `ablation_variant`; must be absent otherwise.
    pub ablation: Option<LossAssembly>,
    pub validation_fraction: f64,
    pub probe_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Sat,
            beta: 6.0,
            epochs: 30,
            batch_size: 128,
            lr_peak: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            attack: AttackConfig::sat(),
            ablation: None,
            validation_fraction: 0.05,
            probe_size: 512,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn sat() -> Self {
        Self::default()
    }

    pub fn trades() -> Self {
        TrainConfig {
            method: Method::Trades,
            attack: AttackConfig::trades(),
            ..Self::default()
        }
    }

    pub fn weat_nat() -> Self {
        TrainConfig {
            method: Method::WeatNat,
            ..Self::trades()
        }
    }

    pub fn weat_adv() -> Self {
        TrainConfig {
            method: Method::WeatAdv,
            ..Self::trades()
        }
    }

    /// SAT with a zero-radius inner attack, i.e. plain empirical risk minimization.
    pub fn natural() -> Self {
        TrainConfig {
            attack: AttackConfig {
                epsilon: 0.0,
                steps: 0,
                ..AttackConfig::sat()
            },
            ..Self::default()
        }
    }

    pub fn assembly(&self) -> Result<LossAssembly, TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        match (self.method, self.ablation) {
            (Method::AblationVariant, Some(a)) => Ok(a),
            (Method::AblationVariant, None) => bad("ablation_variant needs an `ablation` loss assembly".into()),
            (m, Some(_)) => bad(format!("`ablation` is only valid with ablation_variant, not {m:?}")),
            (Method::Sat, None) => Ok(LossAssembly::SAT),
            (Method::Trades, None) => Ok(LossAssembly::TRADES),
            (Method::WeatNat, None) => Ok(LossAssembly::WEAT_NAT),
            (Method::WeatAdv, None) => Ok(LossAssembly::WEAT_ADV),
        }
    }

    pub fn validate(&self) -> Result<LossAssembly, TrainError> {
        let asm = self.assembly()?;
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        self.attack.validate()?;
        if asm.uses_beta() && !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be positive for methods with a KL term");
        }
        let expected = match asm.inner {
            InnerKind::Ce => InnerLoss::CeUntargeted,
            InnerKind::Kl => InnerLoss::KlTrades,
        };
        if self.attack.loss != expected {
            return Err(TrainError::InvalidConfig(format!(
                "{:?} needs attack.loss = {expected:?}, got {:?}",
                self.method, self.attack.loss
            )));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return bad("lr_peak must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..0.5).contains(&self.validation_fraction) {
            return bad("validation_fraction must lie in [0, 0.5)");
        }
        if self.probe_size == 0 {
            return bad("probe_size must be positive");
        }
        Ok(asm)
    }

    /// CE-PGD with the training budget; used for validation and the trace's robust error.
    pub fn eval_attack(&self) -> AttackConfig {
        AttackConfig {
            loss: InnerLoss::CeUntargeted,
            target: None,
            ..self.attack.clone()
        }
    }
}

/// One triangular cycle: 0 → peak over the first half of training, back to 0
/// over the second. `progress` is the fraction of training completed.
pub fn cyclic_lr(peak: f64, progress: f64) -> f64 {
    let t = progress.clamp(0.0, 1.0);
    if t < 0.5 {
        peak * 2.0 * t
    } else {
        peak * 2.0 * (1.0 - t)
    }
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(model: &ModelState, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: model.params.iter().map(|(_, a)| vec![0.0; a.len()]).collect(),
        }
    }

    /// `v ← μ v + (g + λ θ)`, `θ ← θ − lr v`.
    pub fn step(&mut self, model: &mut ModelState, grads: &[Array], lr: f64) {
        for (((_, p), g), v) in model.params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((th, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *th;
                *th -= lr * *vi;
            }
        }
    }
}

/// Loss value and parameter gradients for one batch.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub loss: f64,
    pub grads: Vec<Array>,
    /// Per-sample weights applied (all ones without weighting).
    pub weights: Vec<f64>,
    /// Largest |energy CE − softmax CE| over the batch's outer term.
    pub ce_identity_residual: f64,
}

/// Mean batch objective of `asm` and its gradient w.r.t. every parameter.
///
/// Weights are computed from the natural logits and detached, so they act as
/// constants in the gradient.
pub fn batch_loss(
    model: &ModelState,
    x: &Array,
    x_adv: &Array,
    y: &[usize],
    asm: &LossAssembly,
    beta: f64,
) -> Result<BatchLoss, TrainError> {
    batch_loss_inner(model, x, x_adv, y, asm, beta, None)
}

/// As [`batch_loss`] but with caller-supplied constant weights; the oracle
/// for the detach audit and for finite-difference checks.
pub fn batch_loss_with_weights(
    model: &ModelState,
    x: &Array,
    x_adv: &Array,
    y: &[usize],
    asm: &LossAssembly,
    beta: f64,
    weights: &[f64],
) -> Result<BatchLoss, TrainError> {
    if weights.len() != y.len() {
        return Err(TrainError::InvalidConfig(format!("{} weights for {} samples", weights.len(), y.len())));
    }
    batch_loss_inner(model, x, x_adv, y, asm, beta, Some(weights))
}

fn batch_loss_inner(
    model: &ModelState,
    x: &Array,
    x_adv: &Array,
    y: &[usize],
    asm: &LossAssembly,
    beta: f64,
    fixed: Option<&[f64]>,
) -> Result<BatchLoss, TrainError> {
    let n = y.len();
    if n == 0 || x.rows() != n || x_adv.shape() != x.shape() {
        return Err(TrainError::InvalidConfig(format!(
            "batch shapes disagree: x {:?}, x' {:?}, {} labels",
            x.shape(),
            x_adv.shape(),
            n
        )));
    }
    let k = model.num_classes();
    if let Some(&label) = y.iter().find(|&&l| l >= k) {
        return Err(EnergyError::LabelOutOfRange { label, classes: k }.into());
    }
    let mut out = BatchLoss {
        loss: 0.0,
        grads: model.params.iter().map(|(_, a)| Array::zeros(a.shape())).collect(),
        weights: Vec::with_capacity(n),
        ce_identity_residual: 0.0,
    };
    for lo in (0..n).step_by(CHUNK) {
        let hi = (lo + CHUNK).min(n);
        let idx: Vec<usize> = (lo..hi).collect();
        let tape = Tape::new();
        let params = model.bind(&tape, true);
        let xb = tape.constant(x.select_rows(&idx));
        let xab = tape.constant(x_adv.select_rows(&idx));
        let yb = &y[lo..hi];
        let (root, w, residual) = chunk_objective(
            model,
            &params,
            &tape,
            xb,
            xab,
            yb,
            asm,
            beta,
            fixed.map(|f| &f[lo..hi]),
            n,
        )?;
        out.loss += root.value().item()?;
        let grads = tape.backward(root)?;
        for (acc, p) in out.grads.iter_mut().zip(&params) {
            if let Some(g) = grads.get(*p) {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
        out.weights.extend(w);
        out.ce_identity_residual = out.ce_identity_residual.max(residual);
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn chunk_objective<'t>(
    model: &ModelState,
    params: &[Var<'t>],
    tape: &'t Tape,
    x: Var<'t>,
    x_adv: Var<'t>,
    y: &[usize],
    asm: &LossAssembly,
    beta: f64,
    fixed: Option<&[f64]>,
    n_total: usize,
) -> Result<(Var<'t>, Vec<f64>, f64), TrainError> {
    let need_nat = asm.outer == OuterKind::CeNat || asm.kl || asm.weight != Weighting::None;
    let need_adv = asm.outer != OuterKind::CeNat || asm.kl;
    let nat = if need_nat { Some(model.forward(params, x)?) } else { None };
    let adv = if need_adv { Some(model.forward(params, x_adv)?) } else { None };

    let weights: Vec<f64> = match (fixed, asm.weight) {
        (Some(f), _) => f.to_vec(),
        (None, Weighting::None) => vec![1.0; y.len()],
        (None, Weighting::Weat) => {
            let e = tape.detach(rows::marginal(nat.expect("natural logits"))?);
            let w = e.value().data().iter().map(|&v| energy::weat_weight(v)).collect();
            w
        }
        (None, Weighting::Mart) => {
            let p = tape.detach(nat.expect("natural logits").softmax()?);
            let w = y.iter().enumerate().map(|(r, &l)| 1.0 - p.value().row(r)[l]).collect();
            w
        }
    };
    let wv = tape.constant(Array::from_vec(weights.clone()));

    let outer_logits = match asm.outer {
        OuterKind::CeNat => nat.expect("natural logits"),
        OuterKind::CeAdv | OuterKind::BceAdv => adv.expect("adversarial logits"),
    };
    let ce = rows::cross_entropy(outer_logits, y)?;
    let residual = {
        let logits = outer_logits.value();
        let ce_vals = ce.value();
        let mut worst = 0.0f64;
        for (r, &label) in y.iter().enumerate() {
            let direct = energy::softmax_cross_entropy(logits.row(r), label)?;
            worst = worst.max((ce_vals.data()[r] - direct).abs());
        }
        worst
    };
    let outer = match asm.outer {
        OuterKind::BceAdv => rows::boosted_cross_entropy(outer_logits, y)?,
        _ => ce,
    };
    // caller-supplied weights stand in for whatever the assembly would compute;
    // with no weighting named they scale every term
    let weight_outer = asm.weight == Weighting::Weat || (fixed.is_some() && asm.weight == Weighting::None);
    let weight_kl = asm.weight != Weighting::None || fixed.is_some();
    let outer = if weight_outer { outer.mul(wv)? } else { outer };
    let mut total = outer.sum()?;
    if asm.kl {
        let kl = rows::kl(nat.expect("natural logits"), adv.expect("adversarial logits"))?;
        let kl = if weight_kl { kl.mul(wv)? } else { kl };
        total = total.add(kl.sum()?.scale(beta)?)?;
    }
    Ok((total.scale(1.0 / n_total as f64)?, weights, residual))
}

/// Per-epoch probe and evaluation statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch index.
    pub epoch: usize,
    pub e_nat: f64,
    pub e_adv: f64,
    /// `e_nat - e_adv`
    pub delta_e: f64,
    pub e_joint_nat: f64,
    pub e_joint_adv: f64,
    pub train_loss: f64,
    pub nat_err: f64,
    pub rob_err: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyTrace {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were selected (best validation robust accuracy).
    pub best_epoch: Option<usize>,
    /// Worst energy-vs-softmax CE gap seen across all training batches.
    pub ce_identity_residual: f64,
}

impl EnergyTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn delta_e(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.delta_e).collect()
    }

    pub fn rob_err(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.rob_err).collect()
    }

    pub const CSV_HEADER: &'static str = "epoch,e_nat,e_adv,delta_e,e_joint_nat,e_joint_adv,train_loss,nat_err,rob_err";

    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                r.epoch, r.e_nat, r.e_adv, r.delta_e, r.e_joint_nat, r.e_joint_adv, r.train_loss, r.nat_err, r.rob_err
            )?;
        }
        Ok(())
    }
}

/// Everything a training run produces.
#[derive(Clone, Debug)]
pub struct TrainRun {
    /// Parameters of the best validation epoch (the final ones if no validation split).
    pub best: ModelState,
    pub last: ModelState,
    pub trace: EnergyTrace,
}

fn check_method(cfg: &TrainConfig, allowed: &[Method]) -> Result<(), TrainError> {
    if allowed.contains(&cfg.method) {
        Ok(())
    } else {
        Err(TrainError::InvalidConfig(format!(
            "method {:?} not accepted here (expected one of {allowed:?})",
            cfg.method
        )))
    }
}

/// Standard adversarial training: PGD-CE inner, CE on `x'` outer.
pub fn train_sat(data: &Dataset, spec: &ModelSpec, cfg: &TrainConfig) -> Result<(ModelState, EnergyTrace), TrainError> {
    check_method(cfg, &[Method::Sat])?;
    train(data, spec, cfg).map(|r| (r.best, r.trace))
}

/// TRADES: PGD-KL inner, `CE(x) + β KL(x ‖ x')` outer.
pub fn train_trades(data: &Dataset, spec: &ModelSpec, cfg: &TrainConfig) -> Result<(ModelState, EnergyTrace), TrainError> {
    check_method(cfg, &[Method::Trades])?;
    train(data, spec, cfg).map(|r| (r.best, r.trace))
}

/// WEAT: TRADES-style loss with every term scaled by the detached natural-point weight.
pub fn train_weat(data: &Dataset, spec: &ModelSpec, cfg: &TrainConfig) -> Result<(ModelState, EnergyTrace), TrainError> {
    check_method(cfg, &[Method::WeatNat, Method::WeatAdv])?;
    train(data, spec, cfg).map(|r| (r.best, r.trace))
}

struct EvalStats {
    e_nat: f64,
    e_adv: f64,
    e_joint_nat: f64,
    e_joint_adv: f64,
}

fn probe_energies(
    model: &ModelState,
    probe: &Dataset,
    attack: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<EvalStats, TrainError> {
    let nat = model.logits(&probe.images)?;
    let pairs = energy::energy_pairs(&nat, &probe.labels)?;
    let res = attacks::pgd(model, &probe.images, &probe.labels, attack, rng)?;
    let adv_pairs = energy::energy_pairs(&res.final_logits, &probe.labels)?;
    let mean = |v: &[energy::EnergyPair], f: fn(&energy::EnergyPair) -> f64| {
        v.iter().map(f).sum::<f64>() / v.len() as f64
    };
    Ok(EvalStats {
        e_nat: mean(&pairs, |p| p.marginal),
        e_adv: mean(&adv_pairs, |p| p.marginal),
        e_joint_nat: mean(&pairs, |p| p.joint),
        e_joint_adv: mean(&adv_pairs, |p| p.joint),
    })
}

/// Natural and robust error of `model` on `set`.
pub fn evaluate(
    model: &ModelState,
    set: &Dataset,
    attack: &AttackConfig,
    rng: &mut impl rand::Rng,
) -> Result<(f64, f64), TrainError> {
    let pred = model.predict(&set.images)?;
    let nat_err = pred.iter().zip(&set.labels).filter(|(p, y)| p != y).count() as f64 / set.len() as f64;
    let res = attacks::pgd(model, &set.images, &set.labels, attack, rng)?;
    Ok((nat_err, 1.0 - res.robust_accuracy()))
}

fn is_numerical(e: &TrainError) -> bool {
    let nd = |e: &NdError| matches!(e, NdError::NonFinite { .. } | NdError::NonFiniteGradient { .. });
    match e {
        TrainError::Nd(e) | TrainError::Net(NetError::Nd(e)) => nd(e),
        TrainError::Attack(AttackError::Numerical { .. }) => true,
        TrainError::Attack(AttackError::Net(NetError::Nd(e))) => nd(e),
        TrainError::Energy(EnergyError::Nd(e)) => nd(e),
        TrainError::Energy(EnergyError::Net(NetError::Nd(e))) => nd(e),
        _ => false,
    }
}

/// Runs the configured method. Shared by the per-method entry points.
pub fn train(data: &Dataset, spec: &ModelSpec, cfg: &TrainConfig) -> Result<TrainRun, TrainError> {
    let asm = cfg.validate()?;
    if spec.num_classes != data.num_classes {
        return Err(TrainError::InvalidConfig(format!(
            "model has {} classes, data has {}",
            spec.num_classes, data.num_classes
        )));
    }
    let mut model = ModelState::init(spec.clone(), cfg.seed)?;
    let mut trace = EnergyTrace::default();
    if cfg.epochs == 0 {
        return Ok(TrainRun {
            best: model.clone(),
            last: model,
            trace,
        });
    }
    let (train_set, val_set) = data.split_holdout(cfg.validation_fraction, cfg.seed ^ 0x5eed_0a1d);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let probe = {
        let mut idx: Vec<usize> = (0..train_set.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(cfg.probe_size);
        idx.sort_unstable();
        train_set.subset(&idx)
    };
    let eval_set = val_set.as_ref().unwrap_or(&probe);
    let eval_attack = cfg.eval_attack();
    let mut opt = Sgd::new(&model, cfg.momentum, cfg.weight_decay);
    let n = train_set.len();
    let batches = n.div_ceil(cfg.batch_size);
    let total_iters = (cfg.epochs * batches) as f64;
    let mut best: Option<(f64, ModelState)> = None;
    let mut last_good = model.clone();

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let diverged = |reason: String, trace: &EnergyTrace, last_good: &ModelState| TrainError::Diverged {
                epoch,
                batch: b,
                reason,
                last_good: Box::new(last_good.clone()),
                trace: trace.clone(),
            };
            let batch = train_set.subset(chunk);
            let x_adv = if cfg.attack.epsilon == 0.0 {
                batch.images.clone()
            } else {
                match attacks::pgd(&model, &batch.images, &batch.labels, &cfg.attack, &mut rng).map_err(TrainError::from) {
                    Ok(r) => r.adversarial,
                    Err(e) if is_numerical(&e) => return Err(diverged(format!("attack: {e}"), &trace, &last_good)),
                    Err(e) => return Err(e),
                }
            };
            let bl = match batch_loss(&model, &batch.images, &x_adv, &batch.labels, &asm, cfg.beta) {
                Ok(bl) => bl,
                Err(e) if is_numerical(&e) => return Err(diverged(e.to_string(), &trace, &last_good)),
                Err(e) => return Err(e),
            };
            if !bl.loss.is_finite() {
                return Err(diverged(format!("loss {}", bl.loss), &trace, &last_good));
            }
            if bl.ce_identity_residual > CE_IDENTITY_TOL {
                return Err(TrainError::IdentityAudit(bl.ce_identity_residual));
            }
            trace.ce_identity_residual = trace.ce_identity_residual.max(bl.ce_identity_residual);
            let iter = ((epoch - 1) * batches + b) as f64;
            let lr = cyclic_lr(cfg.lr_peak, (iter + 0.5) / total_iters);
            opt.step(&mut model, &bl.grads, lr);
            loss_sum += bl.loss * chunk.len() as f64;
        }
        if model.params.iter().any(|(_, p)| !p.all_finite()) {
            return Err(TrainError::Diverged {
                epoch,
                batch: batches - 1,
                reason: "non-finite parameters".into(),
                last_good: Box::new(last_good),
                trace,
            });
        }
        let measured = probe_energies(&model, &probe, &cfg.attack, &mut rng)
            .and_then(|s| Ok((s, evaluate(&model, eval_set, &eval_attack, &mut rng)?)));
        let (stats, (nat_err, rob_err)) = match measured {
            Ok(v) => v,
            Err(e) if is_numerical(&e) => {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: batches - 1,
                    reason: format!("evaluation: {e}"),
                    last_good: Box::new(last_good),
                    trace,
                })
            }
            Err(e) => return Err(e),
        };
        trace.records.push(EpochRecord {
            epoch,
            e_nat: stats.e_nat,
            e_adv: stats.e_adv,
            delta_e: stats.e_nat - stats.e_adv,
            e_joint_nat: stats.e_joint_nat,
            e_joint_adv: stats.e_joint_adv,
            train_loss: loss_sum / n as f64,
            nat_err,
            rob_err,
        });
        log::debug!(
            "epoch {epoch}: loss {:.4} dE {:.4} nat_err {nat_err:.3} rob_err {rob_err:.3}",
            loss_sum / n as f64,
            stats.e_nat - stats.e_adv
        );
        if val_set.is_some() && best.as_ref().is_none_or(|(e, _)| rob_err < *e) {
            best = Some((rob_err, model.clone()));
            trace.best_epoch = Some(epoch);
        }
        last_good = model.clone();
    }
    let best = match best {
        Some((_, m)) => m,
        None => {
            trace.best_epoch = Some(cfg.epochs);
            model.clone()
        }
    };
    Ok(TrainRun {
        best,
        last: model,
        trace,
    })
}

/// Phase structure of an energy trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    /// First epoch of each phase after the first (strictly increasing, 1-based).
    pub boundaries: Vec<usize>,
    pub overfit_flag: bool,
    /// Phase-3 onset: first second-half epoch whose smoothed ΔE drops below the threshold.
    pub divergence_epoch: Option<usize>,
    pub smoothed_delta_e: Vec<f64>,
    /// `median(first half) - 2 IQR(first half)` of the smoothed ΔE.
    pub threshold: f64,
}

/// Centered moving average; windows are truncated at the ends.
pub fn moving_average(v: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..v.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(v.len());
            v[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Linear-interpolation quantile of unsorted data.
pub fn quantile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

pub const PHASE_WINDOW: usize = 5;
pub const PHASE_IQR_FACTOR: f64 = 2.0;
pub const OVERFIT_RISE: f64 = 0.01;

/// Splits a trace into up to three phases.
///
/// Phase 3 starts where the smoothed ΔE first falls below
/// `median − 2·IQR` of its first half (searching the second half). Phase 2
/// starts at the epoch of lowest robust error before that onset, when that
/// epoch lies strictly inside phase 1's span. The overfit flag additionally
/// needs the robust error to climb at least one point above its running
/// minimum at or after the onset.
pub fn detect_phases(trace: &EnergyTrace) -> Result<PhaseReport, TrainError> {
    let n = trace.len();
    if n < 10 {
        return Err(TrainError::TraceTooShort(n));
    }
    let smoothed = moving_average(&trace.delta_e(), PHASE_WINDOW);
    let first = &smoothed[..n / 2];
    let iqr = quantile(first, 0.75) - quantile(first, 0.25);
    let threshold = quantile(first, 0.5) - PHASE_IQR_FACTOR * iqr;
    let onset = (n / 2..n).find(|&i| smoothed[i] < threshold);
    let rob = trace.rob_err();
    let mut boundaries = Vec::new();
    let mut overfit_flag = false;
    if let Some(o) = onset {
        let best = (0..o).min_by(|&a, &b| rob[a].total_cmp(&rob[b])).unwrap_or(0);
        if best > 0 {
            boundaries.push(best + 1);
        }
        boundaries.push(o + 1);
        let mut running_min = f64::INFINITY;
        for (i, &r) in rob.iter().enumerate() {
            if i >= o && r >= running_min + OVERFIT_RISE {
                overfit_flag = true;
                break;
            }
            running_min = running_min.min(r);
        }
    }
    Ok(PhaseReport {
        boundaries,
        overfit_flag,
        divergence_epoch: onset.map(|o| o + 1),
        smoothed_delta_e: smoothed,
        threshold,
    })
}

/// The four ablation datasets and their bookkeeping.
#[derive(Clone, Debug)]
pub struct EnergySubsets {
    /// Random correctly classified samples removed.
    pub c: Dataset,
    /// Misclassified samples removed.
    pub i: Dataset,
    /// Highest-energy correctly classified samples removed.
    pub h: Dataset,
    /// Lowest-energy samples removed.
    pub l: Dataset,
    pub removed: usize,
    pub n_correct: usize,
    pub n_incorrect: usize,
    /// Smallest energy among the samples removed for `h`.
    pub high_threshold: f64,
    /// Largest energy among the samples removed for `l`.
    pub low_threshold: f64,
    pub mean_energy_correct: f64,
    pub mean_energy_incorrect: f64,
}

/// Builds C/I/H/L by removing `round(fraction · N)` samples each.
///
/// When fewer samples are requested than misclassified ones exist, `I`
/// removes a random subset of them.
pub fn ablate_energy_subsets(
    data: &Dataset,
    base_model: &ModelState,
    fraction: f64,
    seed: u64,
) -> Result<EnergySubsets, TrainError> {
    if !(fraction > 0.0 && fraction < 0.5) {
        return Err(TrainError::InvalidConfig(format!("fraction must lie in (0, 0.5), got {fraction}")));
    }
    let n = data.len();
    let m = (fraction * n as f64).round() as usize;
    let logits = base_model.logits(&data.images)?;
    let mut energies = Vec::with_capacity(n);
    let mut correct = Vec::new();
    let mut incorrect = Vec::new();
    for i in 0..n {
        energies.push(energy::marginal_energy(logits.row(i))?);
        if argmax(logits.row(i)) == data.labels[i] {
            correct.push(i);
        } else {
            incorrect.push(i);
        }
    }
    let available = correct.len().min(incorrect.len());
    if m == 0 || m > available {
        return Err(TrainError::PoolTooSmall {
            fraction,
            needed: m,
            available,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = |pool: &[usize], rng: &mut ChaCha8Rng| -> Vec<usize> {
        let mut p = pool.to_vec();
        p.shuffle(rng);
        p.truncate(m);
        p
    };
    let drop_c = pick(&correct, &mut rng);
    let drop_i = pick(&incorrect, &mut rng);
    let by_energy = |pool: &[usize]| {
        let mut p = pool.to_vec();
        p.sort_by(|&a, &b| energies[a].total_cmp(&energies[b]).then(a.cmp(&b)));
        p
    };
    let sorted_correct = by_energy(&correct);
    let drop_h: Vec<usize> = sorted_correct[sorted_correct.len() - m..].to_vec();
    let all: Vec<usize> = (0..n).collect();
    let drop_l: Vec<usize> = by_energy(&all)[..m].to_vec();
    let keep = |dropped: &[usize]| {
        let mut mask = vec![true; n];
        for &d in dropped {
            mask[d] = false;
        }
        let idx: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
        data.subset(&idx)
    };
    let mean_of = |idx: &[usize]| {
        if idx.is_empty() {
            f64::NAN
        } else {
            idx.iter().map(|&i| energies[i]).sum::<f64>() / idx.len() as f64
        }
    };
    Ok(EnergySubsets {
        c: keep(&drop_c),
        i: keep(&drop_i),
        h: keep(&drop_h),
        l: keep(&drop_l),
        removed: m,
        n_correct: correct.len(),
        n_incorrect: incorrect.len(),
        high_threshold: drop_h.iter().map(|&i| energies[i]).fold(f64::INFINITY, f64::min),
        low_threshold: drop_l.iter().map(|&i| energies[i]).fold(f64::NEG_INFINITY, f64::max),
        mean_energy_correct: mean_of(&correct),
        mean_energy_incorrect: mean_of(&incorrect),
    })
}
