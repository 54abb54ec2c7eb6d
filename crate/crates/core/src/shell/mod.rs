//! Command-line front end: config loading, pipelines, and report files.

mod config;
mod report;

use std::ffi::OsString;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::attacks::{self, AttackConfig, AttackError, InnerLoss, Target};
use crate::data::{self, Dataset};
use crate::energy::EnergyError;
use crate::genesis::{self, GenesisError};
use crate::ndcore::{Array, NdError};
use crate::nets::{ModelState, NetError};
use crate::train::{self, InnerKind, Method, TrainError};

pub use config::{AblationConfig, AnalysisConfig, DataConfig, ExperimentConfig, GenerateConfig};
pub use report::{
    emit_energy_histograms, identity_residuals, EnergyHistograms, Histogram, IdentityResiduals, Manifest, OutputDir,
};

/// Environment variable capping the worker pool.
pub const THREADS_ENV: &str = "EBM_LENS_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("io error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

fn nd_is_numerical(e: &NdError) -> bool {
    matches!(e, NdError::NonFinite { .. } | NdError::NonFiniteGradient { .. })
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match &e {
            NetError::Nd(nd) if nd_is_numerical(nd) => CliError::Numerical(e.to_string()),
            NetError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<EnergyError> for CliError {
    fn from(e: EnergyError) -> Self {
        match e {
            EnergyError::Nd(nd) if nd_is_numerical(&nd) => CliError::Numerical(nd.to_string()),
            EnergyError::Net(n) => n.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<AttackError> for CliError {
    fn from(e: AttackError) -> Self {
        match e {
            AttackError::Numerical { .. } => CliError::Numerical(e.to_string()),
            AttackError::Net(n) => n.into(),
            AttackError::Energy(en) => en.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } | TrainError::IdentityAudit(_) => CliError::Numerical(e.to_string()),
            TrainError::Nd(nd) if nd_is_numerical(&nd) => CliError::Numerical(nd.to_string()),
            TrainError::Attack(a) => a.into(),
            TrainError::Energy(en) => en.into(),
            TrainError::Net(n) => n.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<GenesisError> for CliError {
    fn from(e: GenesisError) -> Self {
        match e {
            GenesisError::Numerical { .. } => CliError::Numerical(e.to_string()),
            GenesisError::Nd(nd) if nd_is_numerical(&nd) => CliError::Numerical(nd.to_string()),
            GenesisError::Net(n) => n.into(),
            GenesisError::Io(_) | GenesisError::Png(_) => CliError::Io(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ebm-lens", version, about = "Energy-based analysis of robust classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a classifier with the configured method.
    Train(Overrides),
    /// Attack the test set and record energies along the attack path.
    Attack(Overrides),
    /// Natural vs adversarial energy histograms and targeted/untargeted shifts.
    AnalyzeEnergy(Overrides),
    /// Train and report the phase structure of the energy trace.
    TraceOverfit(Overrides),
    /// Class-conditional sampling with momentum SGLD.
    Generate(Overrides),
    /// Build the C/I/H/L energy subsets of the training set.
    AblateSubsets(Overrides),
    /// Check the energy identities on random logits.
    VerifyIdentities {
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Args)]
struct Overrides {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Perturbation radius for both the training and the evaluation attack.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// sat, trades, weat_nat, weat_adv or ablation_variant.
    #[arg(long)]
    method: Option<String>,
    /// Attack steps for both the training and the evaluation attack.
    #[arg(long)]
    steps: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Overrides {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = ExperimentConfig::from_path(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(e) = self.epsilon {
            cfg.attack.epsilon = e;
            cfg.train.attack.epsilon = e;
        }
        if let Some(b) = self.beta {
            cfg.train.beta = b;
        }
        if let Some(s) = self.steps {
            cfg.attack.steps = s;
            cfg.train.attack.steps = s;
        }
        if let Some(m) = &self.method {
            let method: Method = serde_json::from_value(serde_json::Value::String(m.clone()))
                .map_err(|_| CliError::Config(format!("unknown method `{m}`")))?;
            cfg.train.method = method;
            if method != Method::AblationVariant {
                cfg.train.ablation = None;
                // keep the inner loss consistent with the method
                cfg.train.attack.loss = match cfg.train.assembly()?.inner {
                    InnerKind::Ce => InnerLoss::CeUntargeted,
                    InnerKind::Kl => InnerLoss::KlTrades,
                };
            }
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code: 0 success, 2 config/usage error, 3 numerical abort.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    configure_threads();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("ebm-lens: {e}");
            e.exit_code()
        }
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        if n > 0 {
            // a pool may already exist when embedded; keep it
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    let start = Instant::now();
    let (name, cfg) = match &cmd {
        Command::VerifyIdentities { trials, seed } => return verify_identities(*trials, *seed, start),
        Command::Train(o) => ("train", o.load()?),
        Command::Attack(o) => ("attack", o.load()?),
        Command::AnalyzeEnergy(o) => ("analyze-energy", o.load()?),
        Command::TraceOverfit(o) => ("trace-overfit", o.load()?),
        Command::Generate(o) => ("generate", o.load()?),
        Command::AblateSubsets(o) => ("ablate-subsets", o.load()?),
    };
    let (train_set, test_set) = cfg.data.load(cfg.seed)?;
    let mut out = OutputDir::create(&cfg.output_dir)?;
    out.write("config.json", format!("{}\n", cfg.canonical_json()).as_bytes())?;
    let ctx = Ctx {
        cfg: &cfg,
        train_set: &train_set,
        test_set: &test_set,
    };
    match cmd {
        Command::Train(_) => ctx.train(&mut out)?,
        Command::Attack(_) => ctx.attack(&mut out)?,
        Command::AnalyzeEnergy(_) => ctx.analyze_energy(&mut out)?,
        Command::TraceOverfit(_) => ctx.trace_overfit(&mut out)?,
        Command::Generate(_) => ctx.generate(&mut out)?,
        Command::AblateSubsets(_) => ctx.ablate_subsets(&mut out)?,
        Command::VerifyIdentities { .. } => unreachable!("handled above"),
    }
    out.finish(Manifest {
        command: name.into(),
        config_hash: Some(cfg.hash()),
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION").into(),
        threads: rayon::current_num_threads(),
        wall_time_seconds: start.elapsed().as_secs_f64(),
        outputs: Vec::new(),
    })
}

fn verify_identities(trials: usize, seed: u64, start: Instant) -> Result<(), CliError> {
    if trials == 0 {
        return Err(CliError::Config("--trials must be positive".into()));
    }
    let r = identity_residuals(trials, &mut ChaCha8Rng::seed_from_u64(seed))?;
    println!("trials {trials} seed {seed}");
    println!("max |ce_energy - softmax_ce|         = {:e}", r.cross_entropy);
    println!("max |kl_ebm - kl_direct|             = {:e}", r.kl);
    println!("max |trades_loss - trades_loss_ebm|  = {:e}", r.trades);
    log::info!("verify-identities took {:.3}s", start.elapsed().as_secs_f64());
    let worst = r.cross_entropy.max(r.kl).max(r.trades);
    if worst < 1e-9 {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("identity residual {worst:e} exceeds 1e-9")))
    }
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    train_set: &'a Dataset,
    test_set: &'a Dataset,
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| CliError::Io(e.to_string()))?;
    Ok(buf)
}

fn checkpoint_bytes(m: &ModelState) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    m.write_checkpoint(&mut buf)?;
    Ok(buf)
}

impl Ctx<'_> {
    fn rng(&self, salt: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.cfg.seed ^ salt)
    }

    fn analysis_set(&self) -> Dataset {
        match self.cfg.analysis.samples {
            0 => self.test_set.clone(),
            n => self.test_set.head(n),
        }
    }

    /// Runs training, saving what survives a divergence before reporting it.
    fn run_training(&self, out: &mut OutputDir) -> Result<train::TrainRun, CliError> {
        match train::train(self.train_set, &self.cfg.model, &self.cfg.train_config()) {
            Ok(run) => Ok(run),
            Err(TrainError::Diverged {
                epoch,
                batch,
                reason,
                last_good,
                trace,
            }) => {
                out.write("last_good.ckpt", &checkpoint_bytes(&last_good)?)?;
                out.write("energy_trace.csv", &csv_bytes(|w| trace.write_csv(w))?)?;
                Err(CliError::Numerical(format!("training diverged at epoch {epoch}, batch {batch}: {reason}")))
            }
            Err(e) => Err(e.into()),
        }
    }

    /// The configured checkpoint, or a model trained from the `train` section.
    fn model(&self, out: &mut OutputDir) -> Result<ModelState, CliError> {
        match &self.cfg.checkpoint {
            Some(p) => {
                let m = ModelState::load(p)?;
                if m.spec != self.cfg.model {
                    return Err(CliError::Config(format!(
                        "checkpoint {} does not match the `model` section",
                        p.display()
                    )));
                }
                Ok(m)
            }
            None => {
                log::info!("no checkpoint given; training one from the `train` section");
                let run = self.run_training(out)?;
                out.write("model.ckpt", &checkpoint_bytes(&run.best)?)?;
                Ok(run.best)
            }
        }
    }

    fn train(&self, out: &mut OutputDir) -> Result<(), CliError> {
        let run = self.run_training(out)?;
        out.write("best.ckpt", &checkpoint_bytes(&run.best)?)?;
        out.write("last.ckpt", &checkpoint_bytes(&run.last)?)?;
        out.write("energy_trace.csv", &csv_bytes(|w| run.trace.write_csv(w))?)?;
        let eval = self.analysis_set();
        let (nat_err, rob_err) = train::evaluate(&run.best, &eval, &self.cfg.train.eval_attack(), &mut self.rng(0xe7a1))?;
        out.write_json(
            "metrics.json",
            &serde_json::json!({
                "best_epoch": run.trace.best_epoch,
                "epochs": run.trace.len(),
                "test_samples": eval.len(),
                "test_natural_error": nat_err,
                "test_robust_error": rob_err,
                "ce_identity_residual": run.trace.ce_identity_residual,
            }),
        )
    }

    fn attack(&self, out: &mut OutputDir) -> Result<(), CliError> {
        let model = self.model(out)?;
        let set = self.analysis_set();
        let res = attacks::pgd(&model, &set.images, &set.labels, &self.cfg.attack, &mut self.rng(0xa77a))?;
        out.write("attack_energy.csv", &csv_bytes(|w| res.write_energy_csv(w))?)?;
        let bytes: Vec<u8> = res.adversarial.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        out.write("adversarial.f64", &bytes)?;
        let max_pert = res.adversarial.max_abs_diff(&set.images).expect("attack keeps the input shape");
        out.write_json(
            "attack_summary.json",
            &serde_json::json!({
                "samples": set.len(),
                "shape": res.adversarial.shape(),
                "success_rate": res.success_rate(),
                "robust_accuracy": res.robust_accuracy(),
                "max_abs_perturbation": max_pert,
                "identical_to_input": res.adversarial == set.images,
            }),
        )
    }

    fn analyze_energy(&self, out: &mut OutputDir) -> Result<(), CliError> {
        let model = self.model(out)?;
        let set = self.analysis_set();
        let untargeted = AttackConfig {
            loss: InnerLoss::CeUntargeted,
            target: None,
            ..self.cfg.attack.clone()
        };
        let natural = model.logits(&set.images)?;
        let res = attacks::pgd(&model, &set.images, &set.labels, &untargeted, &mut self.rng(0xa7a1))?;
        let hist = emit_energy_histograms(&natural, &res.final_logits, &set.labels, self.cfg.analysis.bins)?;
        out.write("marginal_histogram.csv", hist.marginal.to_csv().as_bytes())?;
        out.write("joint_histogram.csv", hist.joint.to_csv().as_bytes())?;
        out.write("energy_vs_steps.csv", &csv_bytes(|w| res.write_energy_csv(w))?)?;
        let targeted = AttackConfig {
            loss: InnerLoss::CeTargeted,
            target: Some(Target::RandomOther),
            ..untargeted.clone()
        };
        let shift_u = attacks::energy_shift(&model, &set.images, &set.labels, &untargeted, &mut self.rng(0x5a1))?;
        let shift_t =
            attacks::targeted_energy_shift(&model, &set.images, &set.labels, &targeted, &mut self.rng(0x5a2))?;
        out.write_json(
            "energy_shift.json",
            &serde_json::json!({ "untargeted": shift_u, "targeted": shift_t }),
        )
    }

    fn trace_overfit(&self, out: &mut OutputDir) -> Result<(), CliError> {
        let run = self.run_training(out)?;
        out.write("energy_trace.csv", &csv_bytes(|w| run.trace.write_csv(w))?)?;
        out.write("best.ckpt", &checkpoint_bytes(&run.best)?)?;
        let report = train::detect_phases(&run.trace)?;
        out.write_json("phases.json", &report)
    }

    fn generate(&self, out: &mut OutputDir) -> Result<(), CliError> {
        let model = self.model(out)?;
        let k = model.num_classes();
        let pcas = genesis::fit_all_classes(
            &self.train_set.images,
            &self.train_set.labels,
            k,
            self.cfg.generate.retained_variance,
        )?;
        let grid = genesis::generate_grid(
            &model,
            &pcas,
            &self.cfg.sgld,
            self.cfg.generate.per_class,
            Some((&self.train_set.images, &self.train_set.labels)),
            &mut self.rng(0x6e4),
        )?;
        out.write("sgld_trajectories.csv", &csv_bytes(|w| grid.write_trajectory_csv(w))?)?;
        if matches!(self.train_set.sample_shape(), [1 | 3, _, _]) && self.cfg.generate.per_class > 0 {
            grid.write_png(&out.path("samples.png"))?;
            out.track("samples.png")?;
        }
        let classes: Vec<_> = grid
            .results
            .iter()
            .zip(&pcas)
            .map(|(r, p)| {
                serde_json::json!({
                    "label": r.label,
                    "pca_components": p.components.len(),
                    "pca_retained_variance": p.retained_variance,
                    "descent_fraction": r.descent_fraction(),
                    "initial_joint_energy": r.joint_energy_trajectory.first(),
                    "final_joint_energy": r.joint_energy_trajectory.last(),
                    "reference_joint_energy": r.reference_energy,
                })
            })
            .collect();
        out.write_json("generation_summary.json", &serde_json::json!({ "classes": classes }))
    }

    fn ablate_subsets(&self, out: &mut OutputDir) -> Result<(), CliError> {
        let model = self.model(out)?;
        let s = train::ablate_energy_subsets(self.train_set, &model, self.cfg.ablation.fraction, self.cfg.seed)?;
        let mut sizes = String::from("subset,size,removed\n");
        for (name, d) in [("C", &s.c), ("I", &s.i), ("H", &s.h), ("L", &s.l)] {
            sizes.push_str(&format!("{name},{},{}\n", d.len(), self.train_set.len() - d.len()));
            if d.sample_shape() == data::CIFAR_SHAPE {
                let mut buf = Vec::new();
                data::write_cifar10_binary(d, &mut buf).map_err(|e| CliError::Config(e.to_string()))?;
                out.write(&format!("subset_{name}.bin"), &buf)?;
            }
        }
        out.write("subset_sizes.csv", sizes.as_bytes())?;
        out.write_json(
            "subsets.json",
            &serde_json::json!({
                "fraction": self.cfg.ablation.fraction,
                "removed": s.removed,
                "n": self.train_set.len(),
                "n_correct": s.n_correct,
                "n_incorrect": s.n_incorrect,
                "high_threshold": s.high_threshold,
                "low_threshold": s.low_threshold,
                "mean_energy_correct": s.mean_energy_correct,
                "mean_energy_incorrect": s.mean_energy_incorrect,
            }),
        )
    }
}

/// Reads an `adversarial.f64` file written by the `attack` command.
pub fn read_f64_le(path: &std::path::Path, shape: Vec<usize>) -> Result<Array, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    if bytes.len() % 8 != 0 {
        return Err(CliError::Io(format!("{}: length not a multiple of 8", path.display())));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Array::new(shape, data).map_err(|e| CliError::Io(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg_json(extra: &str) -> String {
        format!(
            r#"{{
                "seed": 3,
                "data": {{"source": "synth_mixture", "k_classes": 2, "n_per_class": 20, "dim": 4, "separation": 6.0, "test_per_class": 10}},
                "model": {{"kind": "mlp", "input_shape": [4], "hidden": [8], "num_classes": 2}}{extra}
            }}"#
        )
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let c = ExperimentConfig::from_json(&cfg_json("")).unwrap();
        c.validate().unwrap();
        assert_eq!(c.train.epochs, 30);
        assert_eq!(c.analysis.bins, 50);
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn unknown_keys_rejected_everywhere() {
        for extra in [
            r#", "bogus": 1"#,
            r#", "train": {"epochs": 2, "lr": 0.1}"#,
            r#", "attack": {"eps": 0.1}"#,
            r#", "sgld": {"steps": 3, "temperature": 1}"#,
            r#", "analysis": {"bins": 3, "x": 0}"#,
        ] {
            let e = ExperimentConfig::from_json(&cfg_json(extra)).unwrap_err();
            assert!(matches!(e, CliError::Config(_)), "{extra}");
        }
        let e = ExperimentConfig::from_json(&cfg_json("").replace("\"dim\": 4", "\"dim\": 4, \"extra\": 1")).unwrap_err();
        assert!(matches!(e, CliError::Config(_)));
    }

    #[test]
    fn type_mismatch_rejected() {
        assert!(ExperimentConfig::from_json(&cfg_json(r#", "train": {"epochs": "ten"}"#)).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::from_json(&cfg_json("")).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn semantic_validation() {
        let c = ExperimentConfig::from_json(&cfg_json(r#", "analysis": {"bins": 0}"#)).unwrap();
        assert!(matches!(c.validate(), Err(CliError::Config(_))));
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run_cli(["ebm-lens", "frobnicate"]), 2);
        assert_eq!(run_cli(["ebm-lens", "verify-identities", "--bogus"]), 2);
        assert_eq!(run_cli(["ebm-lens", "train"]), 2);
        assert_eq!(run_cli(["ebm-lens", "train", "--config", "/nonexistent/c.json"]), 2);
    }

    #[test]
    fn verify_identities_succeeds() {
        assert_eq!(run_cli(["ebm-lens", "verify-identities", "--trials", "500", "--seed", "1"]), 0);
        assert_eq!(run_cli(["ebm-lens", "verify-identities", "--trials", "0"]), 2);
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        let nd = NdError::NonFinite { op: "x", index: 0 };
        assert_eq!(CliError::from(TrainError::Nd(nd)).exit_code(), 3);
        assert_eq!(CliError::from(TrainError::IdentityAudit(1.0)).exit_code(), 3);
        assert_eq!(CliError::from(TrainError::InvalidConfig("x".into())).exit_code(), 2);
        assert_eq!(CliError::from(TrainError::TraceTooShort(3)).exit_code(), 2);
    }
}
