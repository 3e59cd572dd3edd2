//! Train fresh networks on a (distilled or selected) training set and
//! report test accuracy, plus the stratified random baseline and the
//! comparison table.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;

use crate::curate::{stratified_indices, LabeledDataset};
use crate::distill::SyntheticDataset;
use crate::error::{Error, Result};
use crate::io::sha256_hex;
use crate::nets::{accuracy, init_params, ArchDescriptor};
use crate::teacher::{format_ops, sgd_train, SgdConfig};

/// Where the training step size came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSource {
    Fixed,
    Distilled,
}

impl LrSource {
    pub fn as_str(self) -> &'static str {
        match self {
            LrSource::Fixed => "fixed",
            LrSource::Distilled => "distilled_alpha",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracies: Vec<f64>,
    /// Runs whose training diverged; their accuracy is that of the last
    /// finite epoch.
    pub diverged: Vec<bool>,
    pub mean: f64,
    /// Sample standard deviation (n − 1 divisor); 0 for a single network.
    pub std: f64,
    pub arch: ArchDescriptor,
    pub lr: f64,
    pub lr_source: LrSource,
    pub config_fingerprint: String,
    pub train_fingerprint: String,
    pub test_fingerprint: String,
    pub seconds: f64,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn config_text(arch: &ArchDescriptor, n_nets: usize, cfg: &SgdConfig, source: LrSource, seed: u64) -> String {
    format!(
        "arch={arch}\nn_nets={n_nets}\nepochs={}\nlr={}\nlr_source={}\nmomentum={}\nbatch_size={}\naugment={}\nseed={seed}\n",
        cfg.epochs,
        cfg.lr,
        source.as_str(),
        cfg.momentum,
        cfg.batch_size,
        format_ops(&cfg.augment)
    )
}

fn evaluate_with(
    train: &LabeledDataset,
    test: &LabeledDataset,
    arch: &ArchDescriptor,
    n_nets: usize,
    cfg: &SgdConfig,
    source: LrSource,
    seed: u64,
) -> Result<EvalReport> {
    if n_nets == 0 {
        return Err(Error::InvalidArgument("n_nets must be at least 1".into()));
    }
    if train.is_empty() {
        return Err(Error::Empty("evaluation training set"));
    }
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    train.check_arch(arch)?;
    test.check_arch(arch)?;
    let started = Instant::now();
    let runs: Vec<(f64, bool)> = (0..n_nets as u64)
        .into_par_iter()
        .map(|i| -> Result<(f64, bool)> {
            let s = seed + i;
            let start = init_params(arch, s)?;
            let mut last = start.clone();
            let (params, diverged) = match sgd_train(start, train, cfg, s, |_, p, _| last = p.clone()) {
                Ok(p) => (p, false),
                Err(Error::Divergence { .. }) => (last, true),
                Err(e) => return Err(e),
            };
            Ok((accuracy(&params, test.pixels(), test.labels())?, diverged))
        })
        .collect::<Result<_>>()?;
    let accuracies: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let (mean, std) = mean_std(&accuracies);
    Ok(EvalReport {
        diverged: runs.iter().map(|r| r.1).collect(),
        accuracies,
        mean,
        std,
        arch: *arch,
        lr: cfg.lr,
        lr_source: source,
        config_fingerprint: sha256_hex(config_text(arch, n_nets, cfg, source, seed).as_bytes()),
        train_fingerprint: train.fingerprint(),
        test_fingerprint: test.fingerprint(),
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Trains `n_nets` networks (init seeds `seed..seed+n_nets`) on `train`
/// with the fixed step size in `cfg` and scores them on `test`.
pub fn evaluate(
    train: &LabeledDataset,
    test: &LabeledDataset,
    arch: &ArchDescriptor,
    n_nets: usize,
    cfg: &SgdConfig,
    seed: u64,
) -> Result<EvalReport> {
    evaluate_with(train, test, arch, n_nets, cfg, LrSource::Fixed, seed)
}

/// As [`evaluate`], training with the distilled step size α in place of
/// `cfg.lr`.
pub fn evaluate_syn(
    syn: &SyntheticDataset,
    test: &LabeledDataset,
    arch: &ArchDescriptor,
    n_nets: usize,
    cfg: &SgdConfig,
    seed: u64,
) -> Result<EvalReport> {
    let cfg = SgdConfig { lr: syn.alpha() as f64, ..cfg.clone() };
    evaluate_with(&syn.to_dataset()?, test, arch, n_nets, &cfg, LrSource::Distilled, seed)
}

/// `ipc` real training images per class, stratified and uniform without
/// replacement.
pub fn random_baseline(dataset: &LabeledDataset, ipc: usize, seed: u64) -> Result<LabeledDataset> {
    let train = dataset.training_view();
    let idx = stratified_indices(&train, ipc, seed)?;
    Ok(train.subset(&idx))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub distilled: (f64, f64),
    pub random: (f64, f64),
    pub full: Option<(f64, f64)>,
    pub delta_vs_random: f64,
    pub delta_vs_full: Option<f64>,
    /// Distilled mean exceeds random mean by more than the sum of stds.
    pub distilled_wins: bool,
}

/// Requires all reports to share the architecture and test set.
pub fn compare(distilled: &EvalReport, random: &EvalReport, full: Option<&EvalReport>) -> Result<Comparison> {
    for (name, r) in [("random", Some(random)), ("full", full)] {
        let Some(r) = r else { continue };
        if r.test_fingerprint != distilled.test_fingerprint {
            return Err(Error::FingerprintMismatch(format!("{name} report was scored on a different test set")));
        }
        if r.arch != distilled.arch {
            return Err(Error::FingerprintMismatch(format!("{name} report used {}", r.arch)));
        }
    }
    Ok(Comparison {
        distilled: (distilled.mean, distilled.std),
        random: (random.mean, random.std),
        full: full.map(|f| (f.mean, f.std)),
        delta_vs_random: distilled.mean - random.mean,
        delta_vs_full: full.map(|f| distilled.mean - f.mean),
        distilled_wins: distilled.mean - random.mean > distilled.std + random.std,
    })
}

impl Comparison {
    pub fn to_table(&self) -> String {
        let cell = |(m, s): (f64, f64)| format!("{:.1}±{:.1}", 100.0 * m, 100.0 * s);
        let full = self.full.map(cell).unwrap_or_else(|| "-".into());
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:<12} {:<12}", "Random", "Distilled", "Full");
        let _ = writeln!(out, "{:<12} {:<12} {:<12}", cell(self.random), cell(self.distilled), full);
        let _ = write!(out, "distilled - random = {:+.1} pts; ", 100.0 * self.delta_vs_random);
        if let Some(d) = self.delta_vs_full {
            let _ = write!(out, "distilled - full = {:+.1} pts; ", 100.0 * d);
        }
        let _ = writeln!(out, "distilled wins: {}", if self.distilled_wins { "yes" } else { "no" });
        out
    }

    pub fn to_key_values(&self) -> String {
        let mut out = format!(
            "distilled_mean={}\ndistilled_std={}\nrandom_mean={}\nrandom_std={}\n",
            self.distilled.0, self.distilled.1, self.random.0, self.random.1
        );
        if let (Some(f), Some(d)) = (self.full, self.delta_vs_full) {
            let _ = write!(out, "full_mean={}\nfull_std={}\ndelta_vs_full={}\n", f.0, f.1, d);
        }
        let _ = write!(out, "delta_vs_random={}\ndistilled_wins={}\n", self.delta_vs_random, self.distilled_wins);
        out
    }
}

impl EvalReport {
    /// Everything except the wall-clock time, so reruns compare equal.
    pub fn to_key_values(&self) -> String {
        let accs: Vec<String> = self.accuracies.iter().map(|a| a.to_string()).collect();
        let div: Vec<&str> = self.diverged.iter().map(|&d| if d { "1" } else { "0" }).collect();
        format!(
            "arch={}\naccuracies={}\ndiverged={}\nmean={}\nstd={}\nlr={}\nlr_source={}\nconfig_fingerprint={}\ntrain_fingerprint={}\ntest_fingerprint={}\n",
            self.arch,
            accs.join(","),
            div.join(","),
            self.mean,
            self.std,
            self.lr,
            self.lr_source.as_str(),
            self.config_fingerprint,
            self.train_fingerprint,
            self.test_fingerprint
        )
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for (i, (a, d)) in self.accuracies.iter().zip(&self.diverged).enumerate() {
            let _ = writeln!(out, "net {i}: {:.2}%{}", 100.0 * a, if *d { " (diverged)" } else { "" });
        }
        let _ = writeln!(out, "mean {:.2}% ± {:.2}% (lr {} from {}, {:.1}s)",
            100.0 * self.mean,
            100.0 * self.std,
            self.lr,
            self.lr_source.as_str(),
            self.seconds
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(mean: f64, std: f64) -> EvalReport {
        EvalReport {
            accuracies: vec![mean],
            diverged: vec![false],
            mean,
            std,
            arch: ArchDescriptor::convnet(3, 16, 16, 9),
            lr: 0.01,
            lr_source: LrSource::Fixed,
            config_fingerprint: "c".into(),
            train_fingerprint: "a".into(),
            test_fingerprint: "t".into(),
            seconds: 0.0,
        }
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
    }

    #[test]
    fn comparison_flags_and_deltas() {
        let c = compare(&report(0.55, 0.02), &report(0.30, 0.05), Some(&report(0.9, 0.01))).unwrap();
        assert!(c.distilled_wins);
        assert!((c.delta_vs_random - 0.25).abs() < 1e-12);
        let same = compare(&report(0.4, 0.1), &report(0.4, 0.1), Some(&report(0.4, 0.1))).unwrap();
        assert_eq!((same.delta_vs_random, same.delta_vs_full), (0.0, Some(0.0)));
        assert!(!same.distilled_wins);
        let mut other = report(0.3, 0.0);
        other.test_fingerprint = "u".into();
        assert!(matches!(compare(&report(0.5, 0.0), &other, None), Err(Error::FingerprintMismatch(_))));
    }
}
