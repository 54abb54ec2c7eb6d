//! Energy calculus over classifier logits.
//!
//! With logits `f(x)`, the marginal energy is `E(x) = -logsumexp f(x)` and the
//! joint energy is `E(x, y) = -f(x)[y]`. Cross-entropy, KL divergence and the
//! TRADES objective are all expressible through these two scalars; this module
//! provides both the energy form and a direct probability-space form of each,
//! so the identities can be audited numerically.
//!
//! All values are in nats. The scalar functions work on plain slices; the
//! [`rows`] submodule builds the same quantities on a tape for training.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndcore::{self, argmax_excluding, Array, NdError, Tape};
use crate::nets::{ModelState, NetError};

#[derive(Debug, Error)]
pub enum EnergyError {
    #[error("empty logits")]
    Empty,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("logit vectors differ in length ({0} vs {1})")]
    ShapeMismatch(usize, usize),
    #[error("beta must be positive and finite, got {0}")]
    InvalidBeta(f64),
    #[error("margin loss needs at least two classes")]
    TooFewClasses,
    #[error(transparent)]
    Nd(#[from] NdError),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Per-sample `(E(x), E(x, y))` record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyPair {
    pub marginal: f64,
    pub joint: f64,
    pub label: usize,
}

impl EnergyPair {
    pub fn from_logits(logits: &[f64], label: usize) -> Result<Self, EnergyError> {
        Ok(EnergyPair {
            marginal: marginal_energy(logits)?,
            joint: joint_energy(logits, label)?,
            label,
        })
    }

    /// Cross-entropy `E(x, y) - E(x)`.
    pub fn cross_entropy(&self) -> f64 {
        self.joint - self.marginal
    }
}

/// KL divergence split into its conditional-energy and marginal-energy parts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KLDecomposition {
    /// `Σ_k p(k|x) [E(x', k) - E(x, k)]`
    pub conditional_term: f64,
    /// `E(x) - E(x')`
    pub marginal_term: f64,
    pub total: f64,
}

fn check_label(logits: &[f64], y: usize) -> Result<(), EnergyError> {
    if logits.is_empty() {
        return Err(EnergyError::Empty);
    }
    if y >= logits.len() {
        return Err(EnergyError::LabelOutOfRange {
            label: y,
            classes: logits.len(),
        });
    }
    Ok(())
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<(), EnergyError> {
    if a.is_empty() {
        return Err(EnergyError::Empty);
    }
    if a.len() != b.len() {
        return Err(EnergyError::ShapeMismatch(a.len(), b.len()));
    }
    Ok(())
}

fn check_beta(beta: f64) -> Result<(), EnergyError> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(EnergyError::InvalidBeta(beta))
    }
}

fn lse(v: &[f64]) -> Result<f64, EnergyError> {
    ndcore::logsumexp(v).map_err(|e| match e {
        NdError::Empty(_) => EnergyError::Empty,
        other => other.into(),
    })
}

pub fn marginal_energy(logits: &[f64]) -> Result<f64, EnergyError> {
    Ok(-lse(logits)?)
}

pub fn joint_energy(logits: &[f64], y: usize) -> Result<f64, EnergyError> {
    check_label(logits, y)?;
    Ok(-logits[y])
}

/// Cross-entropy as `E(x, y) - E(x)`.
pub fn ce_energy(logits: &[f64], y: usize) -> Result<f64, EnergyError> {
    Ok(joint_energy(logits, y)? - marginal_energy(logits)?)
}

/// Cross-entropy through the probability route, `-ln softmax(logits)[y]`.
pub fn softmax_cross_entropy(logits: &[f64], y: usize) -> Result<f64, EnergyError> {
    check_label(logits, y)?;
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
    Ok(-((logits[y] - m).exp() / z).ln())
}

/// `KL(softmax(a) ‖ softmax(b))` via log-softmax.
pub fn kl_direct(logits_a: &[f64], logits_b: &[f64]) -> Result<f64, EnergyError> {
    check_pair(logits_a, logits_b)?;
    let la = ndcore::log_softmax(logits_a)?;
    let lb = ndcore::log_softmax(logits_b)?;
    Ok(la.iter().zip(&lb).map(|(a, b)| a.exp() * (a - b)).sum())
}

/// KL divergence written with energies; `logits_a` plays the natural point.
pub fn kl_ebm(logits_a: &[f64], logits_b: &[f64]) -> Result<KLDecomposition, EnergyError> {
    check_pair(logits_a, logits_b)?;
    let e_a = marginal_energy(logits_a)?;
    let e_b = marginal_energy(logits_b)?;
    // E(x', k) - E(x, k) = f(x)[k] - f(x')[k]
    let conditional_term = logits_a
        .iter()
        .zip(logits_b)
        .map(|(fa, fb)| (fa + e_a).exp() * (fa - fb))
        .sum::<f64>();
    let marginal_term = e_a - e_b;
    Ok(KLDecomposition {
        conditional_term,
        marginal_term,
        total: conditional_term + marginal_term,
    })
}

/// `CE(f(x), y) + β · KL(p(·|x) ‖ p(·|x'))`.
pub fn trades_loss(logits_nat: &[f64], logits_adv: &[f64], y: usize, beta: f64) -> Result<f64, EnergyError> {
    check_beta(beta)?;
    check_pair(logits_nat, logits_adv)?;
    Ok(softmax_cross_entropy(logits_nat, y)? + beta * kl_direct(logits_nat, logits_adv)?)
}

/// TRADES objective in energy form:
/// `E(x,y) + (β-1)E(x) - β{E(x') + Σ_k p(k|x)[E(x,k) - E(x',k)]}`.
pub fn trades_loss_ebm(logits_nat: &[f64], logits_adv: &[f64], y: usize, beta: f64) -> Result<f64, EnergyError> {
    check_beta(beta)?;
    check_pair(logits_nat, logits_adv)?;
    let e_xy = joint_energy(logits_nat, y)?;
    let e_x = marginal_energy(logits_nat)?;
    let e_adv = marginal_energy(logits_adv)?;
    // E(x,k) - E(x',k) = f(x')[k] - f(x)[k]
    let expectation: f64 = logits_nat
        .iter()
        .zip(logits_adv)
        .map(|(fa, fb)| (fa + e_x).exp() * (fb - fa))
        .sum();
    Ok(e_xy + (beta - 1.0) * e_x - beta * (e_adv + expectation))
}

/// Sample weight `1 / ln(1 + exp(|E|))`, largest (`1/ln 2`) at zero energy.
pub fn weat_weight(marginal: f64) -> f64 {
    let a = marginal.abs();
    // ln(1 + e^a) = a + ln(1 + e^-a), stable for large a
    1.0 / (a + (-a).exp().ln_1p())
}

/// `max(f[y] - max_{i≠y} f[i], -κ)`; ties in the inner max go to the lowest index.
pub fn cw_margin(logits: &[f64], y: usize, kappa: f64) -> Result<f64, EnergyError> {
    if logits.len() < 2 {
        return Err(EnergyError::TooFewClasses);
    }
    check_label(logits, y)?;
    let j = argmax_excluding(logits, y).expect("two or more classes");
    Ok((logits[y] - logits[j]).max(-kappa))
}

/// Score `∇_x log p(x) = -∇_x E(x)` for every row of `x`.
pub fn score(model: &ModelState, x: &Array) -> Result<Array, EnergyError> {
    let tape = Tape::new();
    let params = model.bind(&tape, false);
    let xv = tape.leaf(x.clone());
    let logits = model.forward(&params, xv)?;
    let root = logits.logsumexp()?.sum()?;
    match tape.backward(root) {
        Ok(g) => Ok(g.wrt(xv)),
        // constant energy: the graph never reaches x
        Err(NdError::Detached) => Ok(Array::zeros(x.shape())),
        Err(e) => Err(e.into()),
    }
}

/// Per-sample energies for a batch of logits `[B, K]`.
pub fn energy_pairs(logits: &Array, labels: &[usize]) -> Result<Vec<EnergyPair>, EnergyError> {
    if logits.rows() != labels.len() {
        return Err(EnergyError::ShapeMismatch(logits.rows(), labels.len()));
    }
    labels
        .iter()
        .enumerate()
        .map(|(r, &y)| EnergyPair::from_logits(logits.row(r), y))
        .collect()
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Row-wise tape versions of the energy quantities, for `[B, K]` logits.
pub mod rows {
    use crate::ndcore::{NdError, Var};

    /// `E(x)` per row.
    pub fn marginal<'t>(logits: Var<'t>) -> Result<Var<'t>, NdError> {
        logits.logsumexp()?.neg()
    }

    /// `E(x, y)` per row.
    pub fn joint<'t>(logits: Var<'t>, y: &[usize]) -> Result<Var<'t>, NdError> {
        logits.gather(y)?.neg()
    }

    /// Cross-entropy as `E(x, y) - E(x)`.
    pub fn cross_entropy<'t>(logits: Var<'t>, y: &[usize]) -> Result<Var<'t>, NdError> {
        joint(logits, y)?.sub(marginal(logits)?)
    }

    /// `KL(softmax(a) ‖ softmax(b))` per row.
    pub fn kl<'t>(logits_a: Var<'t>, logits_b: Var<'t>) -> Result<Var<'t>, NdError> {
        let la = logits_a.log_softmax()?;
        let lb = logits_b.log_softmax()?;
        la.exp()?.mul(la.sub(lb)?)?.row_sum()
    }

    /// `max(f[y] - max_{i≠y} f[i], -κ)` per row.
    pub fn cw_margin<'t>(logits: Var<'t>, y: &[usize], kappa: f64) -> Result<Var<'t>, NdError> {
        logits.gather(y)?.sub(logits.max_excluding(y)?)?.clamp_min(-kappa)
    }

    /// Boosted cross-entropy: `CE - ln(1.0001 - max_{k≠y} p(k|x))`.
    pub fn boosted_cross_entropy<'t>(logits: Var<'t>, y: &[usize]) -> Result<Var<'t>, NdError> {
        let top_other = logits.softmax()?.max_excluding(y)?;
        let margin = top_other.neg()?.add_scalar(1.0001)?.ln()?;
        cross_entropy(logits, y)?.sub(margin)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::ModelSpec;
    use crate::testutil::{assert_grad_matches, rng, uniform};
    use proptest::prelude::*;
    use rand::Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn marginal_examples() {
        assert!((marginal_energy(&[0.0, 0.0]).unwrap() + LN2).abs() < 1e-15);
        assert!((marginal_energy(&[2.0, -1.0]).unwrap() + 2.048_587_351_573_742).abs() < 1e-12);
        let v = [0.3, -1.2, 2.5];
        let shifted: Vec<f64> = v.iter().map(|x| x + 4.0).collect();
        let d = marginal_energy(&shifted).unwrap() - marginal_energy(&v).unwrap();
        assert!((d + 4.0).abs() < 1e-12);
        assert!(matches!(marginal_energy(&[]), Err(EnergyError::Empty)));
    }

    #[test]
    fn joint_examples() {
        assert_eq!(joint_energy(&[2.0, -1.0], 0).unwrap(), -2.0);
        assert_eq!(joint_energy(&[2.0, -1.0], 1).unwrap(), 1.0);
        assert_eq!(joint_energy(&[0.0; 4], 3).unwrap(), 0.0);
        assert!(matches!(
            joint_energy(&[0.0; 4], 4),
            Err(EnergyError::LabelOutOfRange { label: 4, classes: 4 })
        ));
    }

    #[test]
    fn ce_examples() {
        assert!((ce_energy(&[0.0; 10], 3).unwrap() - 10f64.ln()).abs() < 1e-12);
        // ln(1 + e^-3), 50-digit reference
        assert!((ce_energy(&[2.0, -1.0], 0).unwrap() - 0.048_587_351_573_742_06).abs() < 1e-12);
        let refs = [
            (1.0, 1.461_150_171_734_474_8),
            (5.0, 0.058_873_935_427_632_18),
            (10.0, 0.000_408_515_913_872_712_6),
        ];
        let mut prev = f64::INFINITY;
        for (t, want) in refs {
            let mut v = vec![0.0; 10];
            v[0] = t;
            let ce = ce_energy(&v, 0).unwrap();
            assert!((ce - want).abs() < 1e-12);
            assert!(ce < prev);
            prev = ce;
        }
    }

    #[test]
    fn energy_pair_invariants() {
        let mut r = rng(3);
        for _ in 0..200 {
            let v: Vec<f64> = (0..7).map(|_| r.random_range(-10.0..10.0)).collect();
            let y = r.random_range(0..7);
            let p = EnergyPair::from_logits(&v, y).unwrap();
            let top = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(p.joint >= p.marginal);
            assert!(p.marginal <= -top && -top <= p.joint);
            assert!(p.cross_entropy() >= 0.0);
        }
    }

    #[test]
    fn kl_examples() {
        let a = [0.5, -1.0, 2.0];
        assert_eq!(kl_direct(&a, &a).unwrap(), 0.0);
        let b: Vec<f64> = a.iter().map(|x| x + 3.0).collect();
        assert!(kl_direct(&a, &b).unwrap().abs() < 1e-15);
        let a10: Vec<f64> = (0..10).map(|k| 3.0 * ((k + 1) as f64).sin()).collect();
        let b10: Vec<f64> = (0..10).map(|k| 2.0 * (2.0 * k as f64).cos() - 0.5 * k as f64).collect();
        // 50-digit reference
        assert!((kl_direct(&a10, &b10).unwrap() - 2.217_403_300_838_573_8).abs() < 1e-10);
        assert!(matches!(kl_direct(&a, &a10), Err(EnergyError::ShapeMismatch(3, 10))));
    }

    #[test]
    fn kl_ebm_examples() {
        let a = [0.5, -1.0, 2.0];
        let d = kl_ebm(&a, &a).unwrap();
        assert_eq!(d.conditional_term, 0.0);
        assert_eq!(d.marginal_term, 0.0);
        let c = 1.75;
        let b: Vec<f64> = a.iter().map(|x| x + c).collect();
        let d = kl_ebm(&a, &b).unwrap();
        assert!((d.marginal_term - c).abs() < 1e-12);
        assert!((d.conditional_term + c).abs() < 1e-12);
        assert!(d.total.abs() < 1e-12);
        assert_eq!(d.total, d.conditional_term + d.marginal_term);
    }

    #[test]
    fn trades_examples() {
        let nat = [1.0, -0.5, 0.25];
        assert!((trades_loss(&nat, &nat, 1, 6.0).unwrap() - softmax_cross_entropy(&nat, 1).unwrap()).abs() < 1e-15);
        assert!((trades_loss_ebm(&nat, &nat, 1, 1.0).unwrap() - ce_energy(&nat, 1).unwrap()).abs() < 1e-12);
        assert!(matches!(trades_loss(&nat, &nat, 0, 0.0), Err(EnergyError::InvalidBeta(_))));
        assert!(matches!(trades_loss_ebm(&nat, &nat, 0, -1.0), Err(EnergyError::InvalidBeta(_))));
        assert!(trades_loss(&nat, &nat, 0, f64::NAN).is_err());
    }

    #[test]
    fn trades_beta_one_confident_limit_is_adversarial_ce() {
        let mut nat = vec![0.0; 10];
        nat[0] = 20.0;
        let mut r = rng(8);
        for _ in 0..50 {
            let adv: Vec<f64> = (0..10).map(|_| r.random_range(-5.0..5.0)).collect();
            let lhs = trades_loss_ebm(&nat, &adv, 0, 1.0).unwrap();
            let rhs = softmax_cross_entropy(&adv, 0).unwrap();
            assert!((lhs - rhs).abs() < 1e-3, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn weat_weight_examples() {
        assert!((weat_weight(0.0) - 1.0 / LN2).abs() < 1e-12);
        assert!((weat_weight(-10.0) - 0.099_999_546_013_068_88).abs() < 1e-12);
        for e in [1.0, 5.0, 20.0] {
            assert_eq!(weat_weight(e), weat_weight(-e));
        }
        assert!(weat_weight(800.0) > 0.0);
    }

    #[test]
    fn weat_weight_strictly_decreasing_on_grid() {
        let grid: Vec<f64> = (0..1000).map(|i| i as f64 * 0.05).collect();
        for w in grid.windows(2) {
            let (a, b) = (weat_weight(w[0]), weat_weight(w[1]));
            assert!(b < a);
            assert!(b > 0.0 && a <= 1.0 / LN2);
        }
    }

    #[test]
    fn cw_margin_examples() {
        assert_eq!(cw_margin(&[3.0, 1.0], 0, 0.0).unwrap(), 2.0);
        assert_eq!(cw_margin(&[1.0, 3.0], 0, 0.0).unwrap(), 0.0);
        assert_eq!(cw_margin(&[0.0, 0.0, 0.0], 0, 5.0).unwrap(), 0.0);
        assert!(matches!(cw_margin(&[1.0], 0, 0.0), Err(EnergyError::TooFewClasses)));
    }

    #[test]
    fn score_of_zero_model_is_zero() {
        let mut m = ModelState::init(ModelSpec::mlp(3, &[4], 2), 0).unwrap();
        for (_, a) in &mut m.params {
            a.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = uniform(&[2, 3], 0.0, 1.0, &mut rng(1));
        assert_eq!(score(&m, &x).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn score_matches_finite_differences_of_negative_energy() {
        let m = ModelState::init(ModelSpec::mlp(4, &[6], 3), 2).unwrap();
        let x = uniform(&[3, 4], -2.0, 2.0, &mut rng(4));
        let s = score(&m, &x).unwrap();
        let neg_energy = |z: &Array| -> f64 {
            let l = m.logits(z).unwrap();
            (0..l.rows()).map(|r| -marginal_energy(l.row(r)).unwrap()).sum()
        };
        assert_grad_matches(&mut |z| neg_energy(z), &x, &s, 1e-4);

        // score is the negated gradient of the marginal energy
        let tape = Tape::new();
        let params = m.bind(&tape, false);
        let xv = tape.leaf(x.clone());
        let e = rows::marginal(m.forward(&params, xv).unwrap()).unwrap().sum().unwrap();
        let ge = tape.backward(e).unwrap().wrt(xv);
        assert_eq!(ge.map(|v| -v), s);
    }

    #[test]
    fn row_versions_agree_with_scalar_versions() {
        let mut r = rng(6);
        let a = uniform(&[5, 4], -3.0, 3.0, &mut r);
        let b = uniform(&[5, 4], -3.0, 3.0, &mut r);
        let y = [0, 3, 1, 2, 2];
        let tape = Tape::new();
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let ce = rows::cross_entropy(av, &y).unwrap().value().clone();
        let kl = rows::kl(av, bv).unwrap().value().clone();
        let cw = rows::cw_margin(av, &y, 0.5).unwrap().value().clone();
        let bce = rows::boosted_cross_entropy(av, &y).unwrap().value().clone();
        for i in 0..5 {
            assert!((ce.data()[i] - ce_energy(a.row(i), y[i]).unwrap()).abs() < 1e-12);
            assert!((kl.data()[i] - kl_direct(a.row(i), b.row(i)).unwrap()).abs() < 1e-12);
            assert_eq!(cw.data()[i], cw_margin(a.row(i), y[i], 0.5).unwrap());
            let row = a.row(i);
            let lse = ndcore::logsumexp(row).unwrap();
            let top = (0..4).filter(|&k| k != y[i]).map(|k| (row[k] - lse).exp()).fold(0.0, f64::max);
            let want = ce_energy(row, y[i]).unwrap() - (1.0001 - top).ln();
            assert!((bce.data()[i] - want).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn shift_invariance(v in prop::collection::vec(-30.0f64..30.0, 2..12), c in -20.0f64..20.0, seed in 0u64..1000) {
            let k = v.len();
            let y = (seed as usize) % k;
            let s: Vec<f64> = v.iter().map(|x| x + c).collect();
            prop_assert!((marginal_energy(&s).unwrap() - (marginal_energy(&v).unwrap() - c)).abs() < 1e-9);
            prop_assert!((ce_energy(&s, y).unwrap() - ce_energy(&v, y).unwrap()).abs() < 1e-9);
            prop_assert!((cw_margin(&s, y, 1.0).unwrap() - cw_margin(&v, y, 1.0).unwrap()).abs() < 1e-9);
            let w: Vec<f64> = v.iter().rev().cloned().collect();
            let ws: Vec<f64> = w.iter().map(|x| x + c).collect();
            prop_assert!((kl_direct(&s, &ws).unwrap() - kl_direct(&v, &w).unwrap()).abs() < 1e-9);
            prop_assert!((kl_ebm(&s, &ws).unwrap().total - kl_ebm(&v, &w).unwrap().total).abs() < 1e-9);
        }

        #[test]
        fn non_negativity(v in prop::collection::vec(-30.0f64..30.0, 2..12), w_seed in 0u64..1000) {
            let mut r = rng(w_seed);
            let w: Vec<f64> = (0..v.len()).map(|_| r.random_range(-30.0..30.0)).collect();
            prop_assert!(ce_energy(&v, 0).unwrap() >= 0.0);
            prop_assert!(kl_direct(&v, &w).unwrap() >= -1e-9);
            prop_assert!(kl_ebm(&v, &w).unwrap().total >= -1e-9);
        }
    }
}
