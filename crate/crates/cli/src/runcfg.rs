//! Run configuration: defaults, `key = value` config files, and flag
//! overrides, with precedence flags > file > defaults. Every run writes a
//! resolved snapshot into its run directory so results can be reproduced
//! byte-identically.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use maskdistill_core::distill::{DistillConfig, LossKind, MaskSetting, TeacherTrainConfig};
use maskdistill_core::masking::SelectionStrategy;
use maskdistill_core::model::ModelConfig;
use maskdistill_core::schedule::ThresholdMode;

use crate::CliError;

pub const OUT_ROOT_ENV: &str = "MASKDISTILL_OUT_ROOT";

#[derive(Debug, Clone)]
pub struct RunConfig {
    // distillation
    pub tau: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    pub epsilon: f64,
    pub loss: String,
    pub mask: String,
    pub strategy: String,
    pub threshold_mode: String,
    pub threshold_param: f64,
    pub aux_weight_shared: bool,
    pub exclude_immediate_prev: bool,
    pub aux_kl_tau_scaled: bool,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    // teacher supervised training
    pub teacher_lr: f64,
    pub teacher_epochs: usize,
    pub teacher_batch_size: usize,
    // architectures
    pub teacher_layers: usize,
    pub teacher_d_model: usize,
    pub teacher_heads: usize,
    pub student_layers: usize,
    pub student_d_model: usize,
    pub student_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    // corpus
    pub corpus_n: usize,
    pub n_facts: usize,
    pub hops: u8,
    // run
    pub diag_interval: usize,
    pub max_new: usize,
    pub k_intervals: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            tau: 2.0,
            rho_min: 0.3,
            rho_max: 0.5,
            epsilon: 1e-8,
            loss: "reverse".into(),
            mask: "salient".into(),
            strategy: "high".into(),
            threshold_mode: "cumulative".into(),
            threshold_param: 0.0,
            aux_weight_shared: true,
            exclude_immediate_prev: true,
            aux_kl_tau_scaled: true,
            lr: 1e-3,
            epochs: 2,
            batch_size: 8,
            seed: 0,
            teacher_lr: 1e-3,
            teacher_epochs: 3,
            teacher_batch_size: 8,
            teacher_layers: 4,
            teacher_d_model: 64,
            teacher_heads: 4,
            student_layers: 2,
            student_d_model: 32,
            student_heads: 2,
            vocab_size: 64,
            max_seq_len: 128,
            corpus_n: 10_000,
            n_facts: 6,
            hops: 2,
            diag_interval: 100,
            max_new: 40,
            k_intervals: 8,
        }
    }
}

impl RunConfig {
    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
            value
                .parse()
                .map_err(|_| CliError::usage(format!("invalid value '{value}' for {key}")))
        }
        match key {
            "tau" => self.tau = parse(key, value)?,
            "rho_min" => self.rho_min = parse(key, value)?,
            "rho_max" => self.rho_max = parse(key, value)?,
            "epsilon" => self.epsilon = parse(key, value)?,
            "loss" => self.loss = value.to_string(),
            "mask" => self.mask = value.to_string(),
            "strategy" => self.strategy = value.to_string(),
            "threshold_mode" => self.threshold_mode = value.to_string(),
            "threshold_param" => self.threshold_param = parse(key, value)?,
            "aux_weight_shared" => self.aux_weight_shared = parse(key, value)?,
            "exclude_immediate_prev" => self.exclude_immediate_prev = parse(key, value)?,
            "aux_kl_tau_scaled" => self.aux_kl_tau_scaled = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "teacher_lr" => self.teacher_lr = parse(key, value)?,
            "teacher_epochs" => self.teacher_epochs = parse(key, value)?,
            "teacher_batch_size" => self.teacher_batch_size = parse(key, value)?,
            "teacher_layers" => self.teacher_layers = parse(key, value)?,
            "teacher_d_model" => self.teacher_d_model = parse(key, value)?,
            "teacher_heads" => self.teacher_heads = parse(key, value)?,
            "student_layers" => self.student_layers = parse(key, value)?,
            "student_d_model" => self.student_d_model = parse(key, value)?,
            "student_heads" => self.student_heads = parse(key, value)?,
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "max_seq_len" => self.max_seq_len = parse(key, value)?,
            "corpus_n" => self.corpus_n = parse(key, value)?,
            "n_facts" => self.n_facts = parse(key, value)?,
            "hops" => self.hops = parse(key, value)?,
            "diag_interval" => self.diag_interval = parse(key, value)?,
            "max_new" => self.max_new = parse(key, value)?,
            "k_intervals" => self.k_intervals = parse(key, value)?,
            other => return Err(CliError::usage(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Load `key = value` lines; '#' starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::runtime(format!("config {}: {e}", path.display())))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::usage(format!(
                    "{}:{}: expected 'key = value', got '{raw}'",
                    path.display(),
                    lineno + 1
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<(), CliError> {
        for pair in sets {
            let Some((key, value)) = pair.split_once('=') else {
                return Err(CliError::usage(format!(
                    "--set expects key=value, got '{pair}'"
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn distill_config(&self) -> Result<DistillConfig, CliError> {
        let cfg = DistillConfig {
            tau: self.tau,
            rho_min: self.rho_min,
            rho_max: self.rho_max,
            epsilon: self.epsilon,
            loss_kind: self.loss.parse::<LossKind>().map_err(CliError::usage_from)?,
            mask_kind: self.mask.parse::<MaskSetting>().map_err(CliError::usage_from)?,
            selection_strategy: self
                .strategy
                .parse::<SelectionStrategy>()
                .map_err(CliError::usage_from)?,
            threshold_mode: self
                .threshold_mode
                .parse::<ThresholdMode>()
                .map_err(CliError::usage_from)?,
            threshold_param: self.threshold_param,
            aux_weight_shared: self.aux_weight_shared,
            exclude_immediate_prev: self.exclude_immediate_prev,
            aux_kl_tau_scaled: self.aux_kl_tau_scaled,
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
        };
        cfg.validate().map_err(CliError::usage_from)?;
        Ok(cfg)
    }

    pub fn teacher_model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size,
            d_model: self.teacher_d_model,
            n_heads: self.teacher_heads,
            n_layers: self.teacher_layers,
            max_seq_len: self.max_seq_len,
            seed: self.seed,
        }
    }

    pub fn student_model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size,
            d_model: self.student_d_model,
            n_heads: self.student_heads,
            n_layers: self.student_layers,
            max_seq_len: self.max_seq_len,
            // offset so a student never shares its init stream with the
            // teacher built from the same run seed
            seed: self.seed ^ 0x7374_7564,
        }
    }

    pub fn teacher_train_config(&self) -> TeacherTrainConfig {
        TeacherTrainConfig {
            model: self.teacher_model_config(),
            lr: self.teacher_lr,
            epochs: self.teacher_epochs,
            batch_size: self.teacher_batch_size,
            seed: self.seed,
            log_every: 50,
        }
    }

    /// Sorted `key = value` rendering of the resolved configuration.
    pub fn render(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("tau", self.tau.to_string());
        put("rho_min", self.rho_min.to_string());
        put("rho_max", self.rho_max.to_string());
        put("epsilon", self.epsilon.to_string());
        put("loss", self.loss.clone());
        put("mask", self.mask.clone());
        put("strategy", self.strategy.clone());
        put("threshold_mode", self.threshold_mode.clone());
        put("threshold_param", self.threshold_param.to_string());
        put("aux_weight_shared", self.aux_weight_shared.to_string());
        put(
            "exclude_immediate_prev",
            self.exclude_immediate_prev.to_string(),
        );
        put("aux_kl_tau_scaled", self.aux_kl_tau_scaled.to_string());
        put("lr", self.lr.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("seed", self.seed.to_string());
        put("teacher_lr", self.teacher_lr.to_string());
        put("teacher_epochs", self.teacher_epochs.to_string());
        put("teacher_batch_size", self.teacher_batch_size.to_string());
        put("teacher_layers", self.teacher_layers.to_string());
        put("teacher_d_model", self.teacher_d_model.to_string());
        put("teacher_heads", self.teacher_heads.to_string());
        put("student_layers", self.student_layers.to_string());
        put("student_d_model", self.student_d_model.to_string());
        put("student_heads", self.student_heads.to_string());
        put("vocab_size", self.vocab_size.to_string());
        put("max_seq_len", self.max_seq_len.to_string());
        put("corpus_n", self.corpus_n.to_string());
        put("n_facts", self.n_facts.to_string());
        put("hops", self.hops.to_string());
        put("diag_interval", self.diag_interval.to_string());
        put("max_new", self.max_new.to_string());
        put("k_intervals", self.k_intervals.to_string());
        m
    }
}

/// Resolve the output root: --out-dir flag, else the environment variable,
/// else ./runs.
pub fn resolve_out_root(flag: Option<&Path>) -> (PathBuf, Option<String>) {
    let env_val = std::env::var(OUT_ROOT_ENV).ok();
    let root = match flag {
        Some(p) => p.to_path_buf(),
        None => env_val
            .as_deref()
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs")),
    };
    (root, env_val)
}

/// Create the unique run directory; refuses to reuse a name without --force.
pub fn create_run_dir(root: &Path, run_name: &str, force: bool) -> Result<PathBuf, CliError> {
    let dir = root.join(run_name);
    if dir.exists() {
        if !force {
            return Err(CliError::runtime(format!(
                "run directory {} exists; pass --force to overwrite",
                dir.display()
            )));
        }
        std::fs::remove_dir_all(&dir)
            .map_err(|e| CliError::runtime(format!("clearing {}: {e}", dir.display())))?;
    }
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::runtime(format!("creating {}: {e}", dir.display())))?;
    Ok(dir)
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::runtime(format!("hashing {}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex::encode(hasher.finalize()))
}

/// Write the resolved config snapshot with provenance entries.
pub fn write_snapshot(
    dir: &Path,
    cfg: &RunConfig,
    extra: &[(&str, String)],
) -> Result<PathBuf, CliError> {
    let mut text = String::new();
    for (k, v) in cfg.render() {
        writeln!(text, "{k} = {v}").expect("string write");
    }
    for (k, v) in extra {
        writeln!(text, "{k} = {v}").expect("string write");
    }
    let path = dir.join("config.snapshot");
    std::fs::write(&path, text)
        .map_err(|e| CliError::runtime(format!("writing {}: {e}", path.display())))?;
    Ok(path)
}
