use super::syn::{SynLeaves, SyntheticDataset};
use crate::error::{Error, Result};
use crate::nets::{ce_loss, ArchDescriptor, ParamVector};
use crate::tensor::{gradient, Element, Graph, Tensor, TensorError, Var};

/// Denominators at or below this are treated as zero.
pub const MIN_DENOMINATOR: f64 = 1e-20;

/// Normalized trajectory distance and its two parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchLoss {
    pub numerator: f64,
    pub denominator: f64,
    pub value: f64,
}

/// `n_steps` full-batch steps `θ ← θ − α·∇ℓ(θ; images, labels)` starting
/// from `theta_start`. Every step's gradient is recorded, so the result
/// stays differentiable in the images and α.
pub fn inner_unroll<E: Element>(
    arch: &ArchDescriptor,
    theta_start: &Var<E>,
    syn: &SynLeaves<E>,
    n_steps: usize,
) -> Result<Var<E>> {
    let mut theta = theta_start.clone();
    for step in 1..=n_steps {
        let diverged = |e: Error| match e {
            Error::Tensor(TensorError::NonFinite { .. }) => Error::UnrollDiverged { step },
            other => other,
        };
        let loss = ce_loss(arch, &theta, &syn.images, &syn.labels).map_err(diverged)?;
        if !loss.item().is_finite() {
            return Err(Error::UnrollDiverged { step });
        }
        let g = gradient(&loss, std::slice::from_ref(&theta)).map_err(|e| diverged(e.into()))?.remove(0);
        theta = theta.sub(&g.mul_scalar(&syn.alpha)?).map_err(|e| diverged(e.into()))?;
    }
    Ok(theta)
}

/// Value-only unroll from a stored snapshot.
pub fn unroll_params(theta_start: &ParamVector, syn: &SyntheticDataset, n_steps: usize) -> Result<ParamVector> {
    let arch = *theta_start.arch();
    syn.check_arch(&arch)?;
    let g = Graph::<f32>::new();
    let leaves = syn.leaves(&g)?;
    let start = g.leaf(theta_start.values().clone())?;
    let end = inner_unroll(&arch, &start, &leaves, n_steps)?;
    ParamVector::new(arch, end.value().to_vec())
}

fn denominator<E: Element>(anchor: &Tensor<E>, target: &Tensor<E>) -> Result<f64> {
    if anchor.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "match_loss",
            shapes: vec![anchor.shape().to_vec(), target.shape().to_vec()],
        }
        .into());
    }
    let d: f64 = anchor
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| {
            let x = a.as_f64() - b.as_f64();
            x * x
        })
        .sum();
    if d <= MIN_DENOMINATOR {
        return Err(Error::VanishingDenominator(d));
    }
    Ok(d)
}

/// `‖student − target‖² / ‖anchor − target‖²`, differentiable in `student`.
pub fn match_loss_var<E: Element>(
    student_end: &Var<E>,
    anchor: &Tensor<E>,
    target: &Tensor<E>,
) -> Result<(Var<E>, MatchLoss)> {
    let den = denominator(anchor, target)?;
    let g = student_end.graph();
    let num = student_end.sub(&g.leaf(target.clone())?)?.sum_sq()?;
    let value = num.scale(1.0 / den)?;
    let numerator = num.item();
    Ok((value.clone(), MatchLoss { numerator, denominator: den, value: numerator / den }))
}

pub fn match_loss(student_end: &ParamVector, anchor_start: &ParamVector, teacher_target: &ParamVector) -> Result<MatchLoss> {
    student_end.check_comparable(anchor_start)?;
    student_end.check_comparable(teacher_target)?;
    let den = denominator(anchor_start.values(), teacher_target.values())?;
    let numerator = student_end.distance_sq(teacher_target)?;
    Ok(MatchLoss { numerator, denominator: den, value: numerator / den })
}

/// Match loss after unrolling from `anchor` and its gradients with respect
/// to the synthetic images and α.
#[derive(Debug, Clone)]
pub struct Hypergradient<E: Element = f32> {
    pub loss: MatchLoss,
    pub d_images: Tensor<E>,
    pub d_alpha: f64,
}

/// Records the unroll on a fresh graph in `E`, evaluates the match loss
/// against `target` and differentiates it.
pub fn hypergradient<E: Element>(
    arch: &ArchDescriptor,
    anchor: &Tensor<E>,
    target: &Tensor<E>,
    images: &Tensor<E>,
    labels: &Tensor<E>,
    alpha: E,
    n_steps: usize,
) -> Result<Hypergradient<E>> {
    let g = Graph::<E>::new();
    let syn = SynLeaves { images: g.leaf(images.clone())?, labels: g.leaf(labels.clone())?, alpha: g.scalar(alpha)? };
    let start = g.leaf(anchor.clone())?;
    let end = inner_unroll(arch, &start, &syn, n_steps)?;
    let (value, loss) = match_loss_var(&end, anchor, target)?;
    if n_steps == 0 {
        // the student never touched the synthetic data
        return Ok(Hypergradient { loss, d_images: Tensor::zeros(images.shape()), d_alpha: 0.0 });
    }
    let grads = gradient(&value, &[syn.images.clone(), syn.alpha.clone()])?;
    Ok(Hypergradient { loss, d_images: grads[0].value(), d_alpha: grads[1].item() })
}
