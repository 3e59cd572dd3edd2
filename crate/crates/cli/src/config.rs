//! Flat `key = value` run configuration with dotted namespaces.
//!
//! Parsing is strict: unknown keys, repeated keys, malformed lines, type
//! errors and out-of-range values are all rejected with the offending key
//! (and line, when it came from a file) named. Command-line overrides are
//! applied after the file and win over it.

use std::fmt;
use std::path::Path;

use stm_core::distill::{DistillConfig, InitMode};
use stm_core::nets::{ArchDescriptor, Norm};
use stm_core::teacher::{format_ops, parse_ops, AugmentOp, SgdConfig};

/// First line of every manifest; a file starting with it is read back as a
/// config by taking its `config.` entries.
pub const MANIFEST_HEADER: &str = "# stm manifest";

#[derive(Debug, Clone, PartialEq)]
pub enum Origin {
    Line(usize),
    Override,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Line(n) => write!(f, "line {n}"),
            Origin::Override => write!(f, "--set"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    Read { path: String, reason: String },
    Syntax { origin: Origin, text: String },
    UnknownKey { origin: Origin, key: String },
    DuplicateKey { origin: Origin, key: String },
    Type { origin: Origin, key: String, value: String, expected: &'static str },
    Range { key: String, value: String, rule: &'static str },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Read { path, reason } => write!(f, "cannot read config {path}: {reason}"),
            ConfigError::Syntax { origin, text } => write!(f, "{origin}: expected key=value, got {text:?}"),
            ConfigError::UnknownKey { origin, key } => write!(f, "{origin}: unknown key {key}"),
            ConfigError::DuplicateKey { origin, key } => write!(f, "{origin}: duplicate key {key}"),
            ConfigError::Type { origin, key, value, expected } => {
                write!(f, "{origin}: key {key}: {value:?} is not {expected}")
            }
            ConfigError::Range { key, value, rule } => write!(f, "key {key}: {value} violates {rule}"),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub io_dataset: String,
    pub io_trajectories: String,
    pub io_checkpoint: String,
    pub io_out: String,

    pub gen_size: usize,
    pub gen_channels: usize,
    pub gen_per_class: usize,
    pub gen_noise: f64,
    pub gen_seed: u64,

    pub curate_k_per_class: usize,
    pub curate_train_per_class: usize,
    pub curate_rotations: usize,
    pub curate_rotation_step: f64,
    pub curate_seed: u64,

    pub arch_depth: usize,
    pub arch_width: usize,
    pub arch_norm: Norm,

    pub teacher_epochs: usize,
    pub teacher_lr: f64,
    pub teacher_momentum: f64,
    pub teacher_batch_size: usize,
    pub teacher_augment: Vec<AugmentOp>,
    pub teacher_count: usize,
    pub teacher_seed: u64,

    pub distill_ipc: usize,
    pub distill_syn_steps: usize,
    pub distill_lr_pixels: f64,
    pub distill_alpha_init: f64,
    pub distill_lr_alpha: f64,
    pub distill_lambda: f64,
    pub distill_max_iter: usize,
    pub distill_max_total_iter: u64,
    pub distill_grad_clip: f64,
    pub distill_expand_increment: usize,
    pub distill_validation_stride: usize,
    pub distill_init: InitMode,
    pub distill_zca: bool,
    pub distill_zca_eps: f64,
    pub distill_standardize: bool,
    pub distill_checkpoint_every: u64,
    pub distill_resume: bool,
    pub distill_seed: u64,

    pub eval_n_nets: usize,
    pub eval_epochs: usize,
    pub eval_lr: f64,
    pub eval_momentum: f64,
    pub eval_batch_size: usize,
    pub eval_full: bool,
    pub eval_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            io_dataset: String::new(),
            io_trajectories: String::new(),
            io_checkpoint: String::new(),
            io_out: String::new(),
            gen_size: 16,
            gen_channels: 3,
            gen_per_class: 300,
            gen_noise: 0.05,
            gen_seed: 7,
            curate_k_per_class: 250,
            curate_train_per_class: 200,
            curate_rotations: 1,
            curate_rotation_step: 36.0,
            curate_seed: 7,
            arch_depth: 3,
            arch_width: 32,
            arch_norm: Norm::None,
            teacher_epochs: 8,
            teacher_lr: 0.02,
            teacher_momentum: 0.5,
            teacher_batch_size: 64,
            teacher_augment: Vec::new(),
            teacher_count: 10,
            teacher_seed: 100,
            distill_ipc: 1,
            distill_syn_steps: 20,
            distill_lr_pixels: 100.0,
            distill_alpha_init: 0.01,
            distill_lr_alpha: 1e-4,
            distill_lambda: 5.0,
            distill_max_iter: 1000,
            distill_max_total_iter: 200,
            distill_grad_clip: 0.05,
            distill_expand_increment: 1,
            distill_validation_stride: 1,
            distill_init: InitMode::Real,
            distill_zca: false,
            distill_zca_eps: 0.1,
            distill_standardize: true,
            distill_checkpoint_every: 50,
            distill_resume: false,
            distill_seed: 0,
            eval_n_nets: 3,
            eval_epochs: 100,
            eval_lr: 0.02,
            eval_momentum: 0.0,
            eval_batch_size: 256,
            eval_full: false,
            eval_seed: 0,
        }
    }
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "io.dataset",
    "io.trajectories",
    "io.checkpoint",
    "io.out",
    "gen.size",
    "gen.channels",
    "gen.per_class",
    "gen.noise",
    "gen.seed",
    "curate.k_per_class",
    "curate.train_per_class",
    "curate.rotations",
    "curate.rotation_step",
    "curate.seed",
    "arch.depth",
    "arch.width",
    "arch.norm",
    "teacher.epochs",
    "teacher.lr",
    "teacher.momentum",
    "teacher.batch_size",
    "teacher.augment",
    "teacher.count",
    "teacher.seed",
    "distill.ipc",
    "distill.syn_steps",
    "distill.lr_pixels",
    "distill.alpha_init",
    "distill.lr_alpha",
    "distill.lambda",
    "distill.max_iter",
    "distill.max_total_iter",
    "distill.grad_clip",
    "distill.expand_increment",
    "distill.validation_stride",
    "distill.init",
    "distill.zca",
    "distill.zca_eps",
    "distill.standardize",
    "distill.checkpoint_every",
    "distill.resume",
    "distill.seed",
    "eval.n_nets",
    "eval.epochs",
    "eval.lr",
    "eval.momentum",
    "eval.batch_size",
    "eval.full",
    "eval.seed",
];

fn parse_num<T: std::str::FromStr>(origin: &Origin, key: &str, v: &str, expected: &'static str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| ConfigError::Type { origin: origin.clone(), key: key.into(), value: v.into(), expected })
}

fn parse_bool(origin: &Origin, key: &str, v: &str) -> Result<bool, ConfigError> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "y" | "1" => Ok(true),
        "false" | "no" | "n" | "0" => Ok(false),
        _ => Err(ConfigError::Type { origin: origin.clone(), key: key.into(), value: v.into(), expected: "a boolean (true/false, Y/N)" }),
    }
}

impl RunConfig {
    /// Assigns one key from its text form.
    pub fn set(&mut self, key: &str, value: &str, origin: &Origin) -> Result<(), ConfigError> {
        let o = origin;
        let uint = |v: &str| parse_num::<usize>(o, key, v, "a non-negative integer");
        let u64_ = |v: &str| parse_num::<u64>(o, key, v, "a non-negative integer");
        let real = |v: &str| parse_num::<f64>(o, key, v, "a number");
        let v = value;
        match key {
            "io.dataset" => self.io_dataset = v.into(),
            "io.trajectories" => self.io_trajectories = v.into(),
            "io.checkpoint" => self.io_checkpoint = v.into(),
            "io.out" => self.io_out = v.into(),
            "gen.size" => self.gen_size = uint(v)?,
            "gen.channels" => self.gen_channels = uint(v)?,
            "gen.per_class" => self.gen_per_class = uint(v)?,
            "gen.noise" => self.gen_noise = real(v)?,
            "gen.seed" => self.gen_seed = u64_(v)?,
            "curate.k_per_class" => self.curate_k_per_class = uint(v)?,
            "curate.train_per_class" => self.curate_train_per_class = uint(v)?,
            "curate.rotations" => self.curate_rotations = uint(v)?,
            "curate.rotation_step" => self.curate_rotation_step = real(v)?,
            "curate.seed" => self.curate_seed = u64_(v)?,
            "arch.depth" => self.arch_depth = uint(v)?,
            "arch.width" => self.arch_width = uint(v)?,
            "arch.norm" => {
                self.arch_norm = Norm::parse(v).ok_or_else(|| ConfigError::Type {
                    origin: o.clone(),
                    key: key.into(),
                    value: v.into(),
                    expected: "none or instance",
                })?
            }
            "teacher.epochs" => self.teacher_epochs = uint(v)?,
            "teacher.lr" => self.teacher_lr = real(v)?,
            "teacher.momentum" => self.teacher_momentum = real(v)?,
            "teacher.batch_size" => self.teacher_batch_size = uint(v)?,
            "teacher.augment" => {
                self.teacher_augment = parse_ops(v).map_err(|_| ConfigError::Type {
                    origin: o.clone(),
                    key: key.into(),
                    value: v.into(),
                    expected: "a comma list of hflip, random_crop_pad4, cutout, rotate (or none)",
                })?
            }
            "teacher.count" => self.teacher_count = uint(v)?,
            "teacher.seed" => self.teacher_seed = u64_(v)?,
            "distill.ipc" => self.distill_ipc = uint(v)?,
            "distill.syn_steps" => self.distill_syn_steps = uint(v)?,
            "distill.lr_pixels" => self.distill_lr_pixels = real(v)?,
            "distill.alpha_init" => self.distill_alpha_init = real(v)?,
            "distill.lr_alpha" => self.distill_lr_alpha = real(v)?,
            "distill.lambda" => self.distill_lambda = real(v)?,
            "distill.max_iter" => self.distill_max_iter = uint(v)?,
            "distill.max_total_iter" => self.distill_max_total_iter = u64_(v)?,
            "distill.grad_clip" => self.distill_grad_clip = real(v)?,
            "distill.expand_increment" => self.distill_expand_increment = uint(v)?,
            "distill.validation_stride" => self.distill_validation_stride = uint(v)?,
            "distill.init" => {
                self.distill_init = InitMode::parse(v).ok_or_else(|| ConfigError::Type {
                    origin: o.clone(),
                    key: key.into(),
                    value: v.into(),
                    expected: "real or noise",
                })?
            }
            "distill.zca" => self.distill_zca = parse_bool(o, key, v)?,
            "distill.zca_eps" => self.distill_zca_eps = real(v)?,
            "distill.standardize" => self.distill_standardize = parse_bool(o, key, v)?,
            "distill.checkpoint_every" => self.distill_checkpoint_every = u64_(v)?,
            "distill.resume" => self.distill_resume = parse_bool(o, key, v)?,
            "distill.seed" => self.distill_seed = u64_(v)?,
            "eval.n_nets" => self.eval_n_nets = uint(v)?,
            "eval.epochs" => self.eval_epochs = uint(v)?,
            "eval.lr" => self.eval_lr = real(v)?,
            "eval.momentum" => self.eval_momentum = real(v)?,
            "eval.batch_size" => self.eval_batch_size = uint(v)?,
            "eval.full" => self.eval_full = parse_bool(o, key, v)?,
            "eval.seed" => self.eval_seed = u64_(v)?,
            _ => return Err(ConfigError::UnknownKey { origin: o.clone(), key: key.into() }),
        }
        Ok(())
    }

    /// Canonical text of one key's current value.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "io.dataset" => self.io_dataset.clone(),
            "io.trajectories" => self.io_trajectories.clone(),
            "io.checkpoint" => self.io_checkpoint.clone(),
            "io.out" => self.io_out.clone(),
            "gen.size" => self.gen_size.to_string(),
            "gen.channels" => self.gen_channels.to_string(),
            "gen.per_class" => self.gen_per_class.to_string(),
            "gen.noise" => self.gen_noise.to_string(),
            "gen.seed" => self.gen_seed.to_string(),
            "curate.k_per_class" => self.curate_k_per_class.to_string(),
            "curate.train_per_class" => self.curate_train_per_class.to_string(),
            "curate.rotations" => self.curate_rotations.to_string(),
            "curate.rotation_step" => self.curate_rotation_step.to_string(),
            "curate.seed" => self.curate_seed.to_string(),
            "arch.depth" => self.arch_depth.to_string(),
            "arch.width" => self.arch_width.to_string(),
            "arch.norm" => self.arch_norm.as_str().into(),
            "teacher.epochs" => self.teacher_epochs.to_string(),
            "teacher.lr" => self.teacher_lr.to_string(),
            "teacher.momentum" => self.teacher_momentum.to_string(),
            "teacher.batch_size" => self.teacher_batch_size.to_string(),
            "teacher.augment" => format_ops(&self.teacher_augment),
            "teacher.count" => self.teacher_count.to_string(),
            "teacher.seed" => self.teacher_seed.to_string(),
            "distill.ipc" => self.distill_ipc.to_string(),
            "distill.syn_steps" => self.distill_syn_steps.to_string(),
            "distill.lr_pixels" => self.distill_lr_pixels.to_string(),
            "distill.alpha_init" => self.distill_alpha_init.to_string(),
            "distill.lr_alpha" => self.distill_lr_alpha.to_string(),
            "distill.lambda" => self.distill_lambda.to_string(),
            "distill.max_iter" => self.distill_max_iter.to_string(),
            "distill.max_total_iter" => self.distill_max_total_iter.to_string(),
            "distill.grad_clip" => self.distill_grad_clip.to_string(),
            "distill.expand_increment" => self.distill_expand_increment.to_string(),
            "distill.validation_stride" => self.distill_validation_stride.to_string(),
            "distill.init" => self.distill_init.as_str().into(),
            "distill.zca" => self.distill_zca.to_string(),
            "distill.zca_eps" => self.distill_zca_eps.to_string(),
            "distill.standardize" => self.distill_standardize.to_string(),
            "distill.checkpoint_every" => self.distill_checkpoint_every.to_string(),
            "distill.resume" => self.distill_resume.to_string(),
            "distill.seed" => self.distill_seed.to_string(),
            "eval.n_nets" => self.eval_n_nets.to_string(),
            "eval.epochs" => self.eval_epochs.to_string(),
            "eval.lr" => self.eval_lr.to_string(),
            "eval.momentum" => self.eval_momentum.to_string(),
            "eval.batch_size" => self.eval_batch_size.to_string(),
            "eval.full" => self.eval_full.to_string(),
            "eval.seed" => self.eval_seed.to_string(),
            _ => return None,
        })
    }

    /// All keys as `key=value` lines in [`KEYS`] order.
    pub fn echo(&self) -> String {
        KEYS.iter().map(|k| format!("{k}={}\n", self.get(k).expect("listed key"))).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        fn range(ok: bool, key: &str, value: impl fmt::Display, rule: &'static str) -> Result<(), ConfigError> {
            if ok { Ok(()) } else { Err(ConfigError::Range { key: key.into(), value: value.to_string(), rule }) }
        }
        let positive = |key: &str, v: f64| range(v > 0.0 && v.is_finite(), key, v, "must be > 0");
        let at_least_one = |key: &str, v: usize| range(v >= 1, key, v, "must be >= 1");
        at_least_one("gen.size", self.gen_size)?;
        range(matches!(self.gen_channels, 1 | 3), "gen.channels", self.gen_channels, "must be 1 or 3")?;
        at_least_one("gen.per_class", self.gen_per_class)?;
        range(self.gen_noise >= 0.0 && self.gen_noise.is_finite(), "gen.noise", self.gen_noise, "must be >= 0")?;
        at_least_one("curate.k_per_class", self.curate_k_per_class)?;
        range(
            self.curate_train_per_class < self.curate_k_per_class,
            "curate.train_per_class",
            self.curate_train_per_class,
            "must be < curate.k_per_class",
        )?;
        at_least_one("curate.rotations", self.curate_rotations)?;
        range(self.curate_rotation_step.is_finite(), "curate.rotation_step", self.curate_rotation_step, "must be finite")?;
        at_least_one("arch.depth", self.arch_depth)?;
        at_least_one("arch.width", self.arch_width)?;
        at_least_one("teacher.epochs", self.teacher_epochs)?;
        positive("teacher.lr", self.teacher_lr)?;
        range((0.0..1.0).contains(&self.teacher_momentum), "teacher.momentum", self.teacher_momentum, "must be in [0, 1)")?;
        at_least_one("teacher.batch_size", self.teacher_batch_size)?;
        at_least_one("teacher.count", self.teacher_count)?;
        at_least_one("distill.ipc", self.distill_ipc)?;
        at_least_one("distill.syn_steps", self.distill_syn_steps)?;
        positive("distill.lr_pixels", self.distill_lr_pixels)?;
        positive("distill.alpha_init", self.distill_alpha_init)?;
        range(self.distill_lr_alpha >= 0.0 && self.distill_lr_alpha.is_finite(), "distill.lr_alpha", self.distill_lr_alpha, "must be >= 0")?;
        positive("distill.lambda", self.distill_lambda)?;
        at_least_one("distill.max_iter", self.distill_max_iter)?;
        range(self.distill_grad_clip >= 0.0 && self.distill_grad_clip.is_finite(), "distill.grad_clip", self.distill_grad_clip, "must be >= 0")?;
        at_least_one("distill.expand_increment", self.distill_expand_increment)?;
        at_least_one("distill.validation_stride", self.distill_validation_stride)?;
        range(self.distill_zca_eps >= 0.0 && self.distill_zca_eps.is_finite(), "distill.zca_eps", self.distill_zca_eps, "must be >= 0")?;
        at_least_one("eval.n_nets", self.eval_n_nets)?;
        at_least_one("eval.epochs", self.eval_epochs)?;
        positive("eval.lr", self.eval_lr)?;
        range((0.0..1.0).contains(&self.eval_momentum), "eval.momentum", self.eval_momentum, "must be in [0, 1)")?;
        at_least_one("eval.batch_size", self.eval_batch_size)?;
        Ok(())
    }

    pub fn arch(&self, channels: usize, height: usize, width: usize, classes: usize) -> ArchDescriptor {
        ArchDescriptor {
            depth: self.arch_depth,
            width: self.arch_width,
            in_channels: channels,
            in_height: height,
            in_width: width,
            classes,
            norm: self.arch_norm,
        }
    }

    pub fn teacher_sgd(&self) -> SgdConfig {
        SgdConfig {
            epochs: self.teacher_epochs,
            lr: self.teacher_lr,
            momentum: self.teacher_momentum,
            batch_size: self.teacher_batch_size,
            augment: self.teacher_augment.clone(),
        }
    }

    pub fn eval_sgd(&self) -> SgdConfig {
        SgdConfig {
            epochs: self.eval_epochs,
            lr: self.eval_lr,
            momentum: self.eval_momentum,
            batch_size: self.eval_batch_size,
            augment: Vec::new(),
        }
    }

    pub fn distill(&self) -> DistillConfig {
        DistillConfig {
            syn_steps: self.distill_syn_steps,
            lr_pixels: self.distill_lr_pixels,
            lr_alpha: self.distill_lr_alpha,
            lambda: self.distill_lambda,
            max_iter: self.distill_max_iter,
            expand_increment: self.distill_expand_increment,
            validation_stride: self.distill_validation_stride,
            max_total_iter: (self.distill_max_total_iter > 0).then_some(self.distill_max_total_iter),
            seed: self.distill_seed,
            grad_clip: (self.distill_grad_clip > 0.0).then_some(self.distill_grad_clip),
        }
    }
}

/// Splits `key=value` text into entries with their line numbers. A
/// manifest contributes only its `config.` entries.
fn entries(text: &str) -> Result<Vec<(String, String, Origin)>, ConfigError> {
    let manifest = text.lines().next().is_some_and(|l| l.trim() == MANIFEST_HEADER);
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let origin = Origin::Line(i + 1);
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax { origin, text: line.into() });
        };
        let (k, v) = (k.trim(), v.trim());
        let k = if manifest {
            match k.strip_prefix("config.") {
                Some(k) => k,
                None => continue,
            }
        } else {
            k
        };
        if k.is_empty() {
            return Err(ConfigError::Syntax { origin, text: line.into() });
        }
        out.push((k.to_string(), v.to_string(), origin));
    }
    Ok(out)
}

/// Parses config text and `key=value` overrides into a validated config.
pub fn parse_config_str(text: &str, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    let mut seen = std::collections::HashSet::new();
    for (k, v, origin) in entries(text)? {
        if !seen.insert(k.clone()) {
            return Err(ConfigError::DuplicateKey { origin, key: k });
        }
        cfg.set(&k, &v, &origin)?;
    }
    let mut overridden = std::collections::HashSet::new();
    for o in overrides {
        let Some((k, v)) = o.split_once('=') else {
            return Err(ConfigError::Syntax { origin: Origin::Override, text: o.clone() });
        };
        let k = k.trim();
        if !overridden.insert(k.to_string()) {
            return Err(ConfigError::DuplicateKey { origin: Origin::Override, key: k.into() });
        }
        cfg.set(k, v.trim(), &Origin::Override)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| ConfigError::Read { path: p.display().to_string(), reason: e.to_string() })?,
        None => String::new(),
    };
    parse_config_str(&text, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips_through_echo() {
        let cfg = RunConfig::default();
        let again = parse_config_str(&cfg.echo(), &[]).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(KEYS.len(), cfg.echo().lines().count());
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let cfg = parse_config_str("# comment\n\n distill.lambda = 7 \n", &[]).unwrap();
        assert_eq!(cfg.distill_lambda, 7.0);
    }

    #[test]
    fn missing_equals_is_a_syntax_error() {
        let err = parse_config_str("distill.lambda 7\n", &[]).unwrap_err();
        assert_eq!(err, ConfigError::Syntax { origin: Origin::Line(1), text: "distill.lambda 7".into() });
    }
}
