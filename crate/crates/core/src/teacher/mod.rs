//! Teacher trajectories: train a network on real data and keep one
//! parameter snapshot per epoch. Also the input preprocessing (channel
//! standardization, ZCA whitening) and the training-time augmentation set.

mod augment;
mod standardize;
mod trajectory;
mod zca;

use rand::seq::SliceRandom;
use rayon::prelude::*;

pub use augment::{augment, crop_shift, cutout, format_ops, hflip, parse_ops, rotate, AugmentOp};
pub use standardize::ChannelStats;
pub use trajectory::{load_trajectory, save_trajectory, TrainingMeta, TrajectoryBuffer, TrajectorySet};
pub use zca::{covariance_distance_from_identity, zca_apply, zca_fit, zca_inverse, ZcaTransform};

use crate::curate::LabeledDataset;
use crate::error::{Error, Result};
use crate::nets::{accuracy, ce_loss, init_params, one_hot, ArchDescriptor, ParamVector};
use crate::seed;
use crate::tensor::{gradient, Graph, Tensor, TensorError};

pub const DEFAULT_MOMENTUM: f64 = 0.5;

/// Minibatch SGD with heavy-ball momentum: `v ← m·v + g`, `θ ← θ − lr·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub augment: Vec<AugmentOp>,
}

impl SgdConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("lr {} / momentum {}", self.lr, self.momentum)));
        }
        Ok(())
    }
}

fn divergence(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Tensor(TensorError::NonFinite { .. }) => Error::Divergence { epoch },
        other => other,
    }
}

/// Trains from `start`, calling `on_epoch(epoch, params, mean_loss)` after
/// every epoch (1-based). Shuffling and augmentation draw from streams
/// keyed by `(seed, epoch, batch)`.
pub fn sgd_train(
    start: ParamVector,
    data: &LabeledDataset,
    cfg: &SgdConfig,
    seed: u64,
    mut on_epoch: impl FnMut(usize, &ParamVector, f64),
) -> Result<ParamVector> {
    cfg.validate()?;
    let arch = *start.arch();
    data.check_arch(&arch)?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let dims = data.dims();
    let len = data.image_len();
    let mut theta = start.as_slice().to_vec();
    let mut velocity = vec![0.0f32; theta.len()];
    let (lr, mom) = (cfg.lr as f32, cfg.momentum as f32);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut params = start;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut seed::rng(seed, &[0, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut pixels = Vec::with_capacity(idx.len() * len);
            for &i in idx {
                pixels.extend_from_slice(data.image(i));
            }
            if !cfg.augment.is_empty() {
                pixels = augment(&pixels, dims, &cfg.augment, seed::derive(seed, &[1, epoch as u64, b as u64]));
            }
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels()[i]).collect();
            let (loss, grad) = loss_and_grad(&arch, &theta, pixels, &labels).map_err(divergence(epoch))?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            for ((p, v), &g) in theta.iter_mut().zip(velocity.iter_mut()).zip(grad.data()) {
                *v = mom * *v + g;
                *p -= lr * *v;
            }
            if theta.iter().any(|p| !p.is_finite()) {
                return Err(Error::Divergence { epoch });
            }
            loss_sum += loss;
            batches += 1;
        }
        params = ParamVector::new(arch, theta.clone())?;
        on_epoch(epoch, &params, loss_sum / batches as f64);
    }
    Ok(params)
}

fn loss_and_grad(arch: &ArchDescriptor, theta: &[f32], pixels: Vec<f32>, labels: &[usize]) -> Result<(f64, Tensor<f32>)> {
    let g = Graph::<f32>::new();
    let p = g.leaf(Tensor::vector(theta.to_vec())?)?;
    let x = g.leaf(Tensor::new(vec![labels.len(), arch.in_channels, arch.in_height, arch.in_width], pixels)?)?;
    let y = g.leaf(one_hot(labels, arch.classes)?)?;
    let loss = ce_loss(arch, &p, &x, &y)?;
    let grad = gradient(&loss, &[p])?.remove(0);
    Ok((loss.item(), grad.value()))
}

#[derive(Debug, Clone)]
pub struct TeacherRun {
    pub buffer: TrajectoryBuffer,
    pub epoch_losses: Vec<f64>,
    pub final_train_accuracy: f64,
}

/// One teacher: snapshot 0 is `init_params(arch, seed)`, then one snapshot
/// per epoch.
pub fn train_teacher(dataset: &LabeledDataset, arch: &ArchDescriptor, cfg: &SgdConfig, seed: u64) -> Result<TeacherRun> {
    let start = init_params(arch, seed)?;
    let mut snapshots = vec![start.clone()];
    let mut losses = Vec::with_capacity(cfg.epochs);
    let end = sgd_train(start, dataset, cfg, seed, |_, p, l| {
        snapshots.push(p.clone());
        losses.push(l);
    })?;
    let acc = accuracy(&end, dataset.pixels(), dataset.labels())?;
    let meta = TrainingMeta {
        seed,
        lr: cfg.lr,
        momentum: cfg.momentum,
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        dataset_fingerprint: dataset.fingerprint(),
        augment: format_ops(&cfg.augment),
        final_train_accuracy: acc,
        epoch_losses: losses.clone(),
    };
    Ok(TeacherRun { buffer: TrajectoryBuffer::new(snapshots, meta)?, epoch_losses: losses, final_train_accuracy: acc })
}

/// Independent teachers for each seed, trained in parallel; results keep
/// the order of `seeds`.
pub fn train_teachers(dataset: &LabeledDataset, arch: &ArchDescriptor, cfg: &SgdConfig, seeds: &[u64]) -> Result<Vec<TeacherRun>> {
    seeds.par_iter().map(|&s| train_teacher(dataset, arch, cfg, s)).collect()
}
