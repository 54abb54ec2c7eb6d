use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::energy::{self, EnergyError};
use crate::ndcore::Array;

use super::CliError;

/// Shared-bin histogram of natural vs adversarial values.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub natural: Vec<usize>,
    pub adversarial: Vec<usize>,
}

impl Histogram {
    /// Equal-width bins over the union range of both samples; the last bin is closed.
    pub fn shared(natural: &[f64], adversarial: &[f64], bins: usize) -> Result<Self, CliError> {
        if bins == 0 {
            return Err(CliError::Config("histogram needs at least one bin".into()));
        }
        let all = natural.iter().chain(adversarial);
        let (mut lo, mut hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        if !lo.is_finite() || !hi.is_finite() {
            return Err(CliError::Numerical("histogram input empty or non-finite".into()));
        }
        if lo == hi {
            lo -= 0.5;
            hi += 0.5;
        }
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins)
            .map(|i| if i == bins { hi } else { lo + i as f64 * width })
            .collect();
        let count = |v: &[f64]| {
            let mut c = vec![0usize; bins];
            for &x in v {
                let b = (((x - lo) / width).floor() as usize).min(bins - 1);
                c[b] += 1;
            }
            c
        };
        Ok(Histogram {
            natural: count(natural),
            adversarial: count(adversarial),
            edges,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_left,bin_right,count_natural,count_adversarial\n");
        for b in 0..self.natural.len() {
            writeln!(
                s,
                "{},{},{},{}",
                self.edges[b],
                self.edges[b + 1],
                self.natural[b],
                self.adversarial[b]
            )
            .expect("string write");
        }
        s
    }

    /// Count-weighted mean of bin centres.
    pub fn mean_center(counts: &[usize], edges: &[f64]) -> f64 {
        let total: usize = counts.iter().sum();
        counts
            .iter()
            .enumerate()
            .map(|(b, &c)| c as f64 * 0.5 * (edges[b] + edges[b + 1]))
            .sum::<f64>()
            / total as f64
    }
}

/// Marginal and joint energy histograms of natural vs adversarial logits.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyHistograms {
    pub marginal: Histogram,
    pub joint: Histogram,
}

/// Builds both histograms; joint energies use the true labels.
pub fn emit_energy_histograms(
    natural_logits: &Array,
    adv_logits: &Array,
    labels: &[usize],
    bins: usize,
) -> Result<EnergyHistograms, CliError> {
    if natural_logits.shape() != adv_logits.shape() {
        return Err(CliError::Config(format!(
            "natural logits {:?} vs adversarial {:?}",
            natural_logits.shape(),
            adv_logits.shape()
        )));
    }
    let nat = energy::energy_pairs(natural_logits, labels).map_err(energy_err)?;
    let adv = energy::energy_pairs(adv_logits, labels).map_err(energy_err)?;
    let col = |v: &[energy::EnergyPair], f: fn(&energy::EnergyPair) -> f64| v.iter().map(f).collect::<Vec<_>>();
    Ok(EnergyHistograms {
        marginal: Histogram::shared(&col(&nat, |p| p.marginal), &col(&adv, |p| p.marginal), bins)?,
        joint: Histogram::shared(&col(&nat, |p| p.joint), &col(&adv, |p| p.joint), bins)?,
    })
}

fn energy_err(e: EnergyError) -> CliError {
    CliError::Config(e.to_string())
}

/// Largest absolute residuals of the energy identities over random draws.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IdentityResiduals {
    pub trials: usize,
    /// `|ce_energy - softmax CE|`
    pub cross_entropy: f64,
    /// `|kl_ebm.total - kl_direct|`
    pub kl: f64,
    /// `|trades_loss - trades_loss_ebm|`
    pub trades: f64,
}

/// Draws logits in `[-30, 30]^K`, `K ∈ {2, 10, 100}`, and `β ∈ {1, 6}`.
pub fn identity_residuals(trials: usize, rng: &mut impl Rng) -> Result<IdentityResiduals, EnergyError> {
    let mut r = IdentityResiduals {
        trials,
        ..Default::default()
    };
    for t in 0..trials {
        let k = [2, 10, 100][t % 3];
        let a: Vec<f64> = (0..k).map(|_| rng.random_range(-30.0..=30.0)).collect();
        let b: Vec<f64> = (0..k).map(|_| rng.random_range(-30.0..=30.0)).collect();
        let y = rng.random_range(0..k);
        let beta = if t % 2 == 0 { 1.0 } else { 6.0 };
        r.cross_entropy = r
            .cross_entropy
            .max((energy::ce_energy(&a, y)? - energy::softmax_cross_entropy(&a, y)?).abs());
        r.kl = r.kl.max((energy::kl_ebm(&a, &b)?.total - energy::kl_direct(&a, &b)?).abs());
        r.trades = r
            .trades
            .max((energy::trades_loss(&a, &b, y, beta)? - energy::trades_loss_ebm(&a, &b, y, beta)?).abs());
    }
    Ok(r)
}

/// Per-run record written next to the outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: Option<String>,
    pub seed: u64,
    pub version: String,
    pub threads: usize,
    pub wall_time_seconds: f64,
    /// `(file name, sha256)` of every artifact, sorted by name.
    pub outputs: Vec<(String, String)>,
}

/// Single-writer artifact sink for one run directory.
pub struct OutputDir {
    root: std::path::PathBuf,
    written: Vec<(String, String)>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(root).map_err(|e| CliError::Io(format!("{}: {e}", root.display())))?;
        Ok(OutputDir {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> std::path::PathBuf {
        self.root.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let p = self.path(name);
        std::fs::write(&p, bytes).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
        self.record(name, bytes);
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Registers a file written by someone else.
    pub fn track(&mut self, name: &str) -> Result<(), CliError> {
        let p = self.path(name);
        let bytes = std::fs::read(&p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
        self.record(name, &bytes);
        Ok(())
    }

    fn record(&mut self, name: &str, bytes: &[u8]) {
        self.written.retain(|(n, _)| n != name);
        self.written.push((name.to_string(), hex::encode(Sha256::digest(bytes))));
    }

    pub fn finish(mut self, mut manifest: Manifest) -> Result<(), CliError> {
        self.written.sort();
        manifest.outputs = std::mem::take(&mut self.written);
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Io(e.to_string()))?;
        text.push('\n');
        let p = self.path("manifest.json");
        std::fs::write(&p, text).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))
    }
}
