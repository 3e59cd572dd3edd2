//! ConvNet classifier: architecture descriptor, flat parameter vectors,
//! forward pass, loss and accuracy.
//!
//! A block is `conv3×3 → bias → [instance norm] → relu → avgpool2×2`; `depth`
//! blocks are followed by one linear layer on the flattened features.
//!
//! Parameters live in one flat vector in this canonical order:
//!
//! ```text
//! for each block b in 0..depth:
//!     conv weight  [width, c_in(b), 3, 3]   c_in(0) = input channels, else width
//!     conv bias    [width]
//!     norm scale   [width]                  instance norm only
//!     norm shift   [width]                  instance norm only
//! linear weight    [features, classes]      features = width · (H/2^depth) · (W/2^depth)
//! linear bias      [classes]
//! ```

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Tensor, Var};

const INSTANCE_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Norm {
    None,
    Instance,
}

impl Norm {
    pub fn as_str(self) -> &'static str {
        match self {
            Norm::None => "none",
            Norm::Instance => "instance_norm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Norm::None),
            "instance_norm" | "instance" => Some(Norm::Instance),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ArchDescriptor {
    pub depth: usize,
    pub width: usize,
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub classes: usize,
    pub norm: Norm,
}

impl fmt::Display for ArchDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "convnet(depth={}, width={}, input={}x{}x{}, classes={}, norm={})",
            self.depth,
            self.width,
            self.in_channels,
            self.in_height,
            self.in_width,
            self.classes,
            self.norm.as_str()
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// Kaiming-uniform initialized, with the given fan-in.
    Weight { fan_in: usize },
    Bias,
    NormScale,
    NormShift,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub kind: BlockKind,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ArchDescriptor {
    /// Desk-scale default: depth 3, width 32.
    pub fn convnet(in_channels: usize, in_height: usize, in_width: usize, classes: usize) -> Self {
        Self { depth: 3, width: 32, in_channels, in_height, in_width, classes, norm: Norm::None }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArch(m));
        if self.depth == 0 || self.width == 0 {
            return fail(format!("depth and width must be >= 1 ({self})"));
        }
        if self.in_channels == 0 || self.classes == 0 {
            return fail(format!("channels and classes must be >= 1 ({self})"));
        }
        let div = 1usize.checked_shl(self.depth as u32).unwrap_or(0);
        if div == 0 || self.in_height % div != 0 || self.in_width % div != 0 || self.in_height < div || self.in_width < div {
            return fail(format!("input {}x{} not divisible by 2^{}", self.in_height, self.in_width, self.depth));
        }
        Ok(())
    }

    pub fn features(&self) -> usize {
        self.width * (self.in_height >> self.depth) * (self.in_width >> self.depth)
    }

    pub fn layout(&self) -> Vec<ParamBlock> {
        let mut blocks = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, kind, shape: Vec<usize>| {
            let len: usize = shape.iter().product();
            blocks.push(ParamBlock { name, kind, shape, offset });
            offset += len;
        };
        let mut c_in = self.in_channels;
        for b in 0..self.depth {
            push(format!("block{b}.conv.weight"), BlockKind::Weight { fan_in: c_in * 9 }, vec![self.width, c_in, 3, 3]);
            push(format!("block{b}.conv.bias"), BlockKind::Bias, vec![self.width]);
            if self.norm == Norm::Instance {
                push(format!("block{b}.norm.scale"), BlockKind::NormScale, vec![self.width]);
                push(format!("block{b}.norm.shift"), BlockKind::NormShift, vec![self.width]);
            }
            c_in = self.width;
        }
        let features = self.features();
        push("fc.weight".into(), BlockKind::Weight { fan_in: features }, vec![features, self.classes]);
        push("fc.bias".into(), BlockKind::Bias, vec![self.classes]);
        blocks
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(ParamBlock::len).sum()
    }

    pub fn image_len(&self) -> usize {
        self.in_channels * self.in_height * self.in_width
    }
}

/// One flattened parameter snapshot tied to its architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    arch: ArchDescriptor,
    values: Tensor<f32>,
}

impl ParamVector {
    pub fn new(arch: ArchDescriptor, values: Vec<f32>) -> Result<Self> {
        arch.validate()?;
        if values.len() != arch.param_count() {
            return Err(Error::InvalidArgument(format!(
                "{} values for {arch}, which has {} parameters",
                values.len(),
                arch.param_count()
            )));
        }
        Ok(Self { arch, values: Tensor::vector(values)? })
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn values(&self) -> &Tensor<f32> {
        &self.values
    }

    pub fn as_slice(&self) -> &[f32] {
        self.values.data()
    }

    pub fn len(&self) -> usize {
        self.values.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn check_comparable(&self, other: &ParamVector) -> Result<()> {
        if self.arch != other.arch {
            return Err(Error::ArchMismatch { expected: self.arch.to_string(), found: other.arch.to_string() });
        }
        Ok(())
    }

    /// `‖self − other‖²`, accumulated in f64.
    pub fn distance_sq(&self, other: &ParamVector) -> Result<f64> {
        self.check_comparable(other)?;
        Ok(self
            .as_slice()
            .iter()
            .zip(other.as_slice())
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum())
    }
}

/// Kaiming-uniform (fan-in, ReLU gain) weights, zero biases, unit norm
/// scales. Deterministic per seed.
pub fn init_params(arch: &ArchDescriptor, seed: u64) -> Result<ParamVector> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(arch.param_count());
    for block in arch.layout() {
        match block.kind {
            BlockKind::Weight { fan_in } => {
                let bound = (6.0 / fan_in as f64).sqrt() as f32;
                values.extend((0..block.len()).map(|_| rng.random_range(-bound..bound)));
            }
            BlockKind::Bias | BlockKind::NormShift => values.extend(std::iter::repeat_n(0.0, block.len())),
            BlockKind::NormScale => values.extend(std::iter::repeat_n(1.0, block.len())),
        }
    }
    ParamVector::new(*arch, values)
}

fn instance_norm<E: Element>(x: &Var<E>, scale: &Var<E>, shift: &Var<E>) -> Result<Var<E>> {
    let shape = x.shape();
    let centered = x.sub(&x.plane_mean_broadcast()?)?;
    let var = centered.mul(&centered)?.plane_mean_broadcast()?;
    let normed = centered.mul(&var.add_pow(INSTANCE_NORM_EPS, -0.5)?)?;
    Ok(normed.mul(&scale.broadcast_axis1(&shape)?)?.add(&shift.broadcast_axis1(&shape)?)?)
}

/// Logits `[B, classes]` for `images: [B, C, H, W]` under flat `params`.
/// Differentiable in both.
pub fn forward<E: Element>(arch: &ArchDescriptor, params: &Var<E>, images: &Var<E>) -> Result<Var<E>> {
    arch.validate()?;
    let ps = params.shape();
    if ps != [arch.param_count()] {
        return Err(Error::InvalidArgument(format!("parameter shape {ps:?} does not match {arch}")));
    }
    let s = images.shape();
    if s.len() != 4 || s[1..] != [arch.in_channels, arch.in_height, arch.in_width] {
        return Err(crate::tensor::TensorError::ShapeMismatch {
            op: "forward",
            shapes: vec![s, vec![arch.in_channels, arch.in_height, arch.in_width]],
        }
        .into());
    }
    let batch = s[0];
    let layout = arch.layout();
    let mut blocks = layout.iter();
    let mut take = || {
        let b = blocks.next().expect("layout covers every block");
        params.slice(b.offset, &b.shape)
    };
    let mut x = images.clone();
    for _ in 0..arch.depth {
        let weight = take()?;
        let bias = take()?;
        x = x.conv2d(&weight)?;
        x = x.add(&bias.broadcast_axis1(&x.shape())?)?;
        if arch.norm == Norm::Instance {
            let scale = take()?;
            let shift = take()?;
            x = instance_norm(&x, &scale, &shift)?;
        }
        x = x.relu()?.avgpool2()?;
    }
    let weight = take()?;
    let bias = take()?;
    let logits = x.flatten()?.matmul(&weight)?;
    Ok(logits.add(&bias.broadcast_axis1(&[batch, arch.classes])?)?)
}

/// Mean softmax cross-entropy; label rows must sum to 1 (within 1e-5).
pub fn ce_loss<E: Element>(arch: &ArchDescriptor, params: &Var<E>, images: &Var<E>, labels: &Var<E>) -> Result<Var<E>> {
    let y = labels.value();
    if y.shape().len() != 2 || y.shape()[1] != arch.classes {
        return Err(Error::InvalidArgument(format!("label shape {:?} for {} classes", y.shape(), arch.classes)));
    }
    for (row, chunk) in y.data().chunks(arch.classes).enumerate() {
        let sum: f64 = chunk.iter().map(|v| v.as_f64()).sum();
        if (sum - 1.0).abs() > 1e-5 {
            return Err(Error::LabelRow { row, sum });
        }
    }
    let logits = forward(arch, params, images)?;
    Ok(logits.softmax_cross_entropy(labels)?)
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor<f32>> {
    let mut data = vec![0.0f32; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::LabelRange { label: l, classes });
        }
        data[i * classes + l] = 1.0;
    }
    Ok(Tensor::new(vec![labels.len(), classes], data)?)
}

/// Index of the largest logit; ties go to the lowest class index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Logits for a batch of flat images, evaluated in chunks without keeping a
/// graph around.
pub fn predict(params: &ParamVector, images: &[f32], n: usize) -> Result<Vec<f32>> {
    const CHUNK: usize = 256;
    let arch = params.arch();
    let len = arch.image_len();
    if images.len() != n * len {
        return Err(Error::InvalidArgument(format!("{} pixels for {n} images of {len}", images.len())));
    }
    let mut out = Vec::with_capacity(n * arch.classes);
    for start in (0..n).step_by(CHUNK) {
        let m = CHUNK.min(n - start);
        let g = Graph::<f32>::new();
        let p = g.leaf(params.values().clone())?;
        let x = g.leaf(Tensor::from_slice(
            &[m, arch.in_channels, arch.in_height, arch.in_width],
            &images[start * len..(start + m) * len],
        )?)?;
        out.extend_from_slice(forward(arch, &p, &x)?.value().data());
    }
    Ok(out)
}

/// Fraction of images whose argmax logit equals the label.
pub fn accuracy(params: &ParamVector, images: &[f32], labels: &[usize]) -> Result<f64> {
    let arch = params.arch();
    if labels.is_empty() {
        return Err(Error::Empty("accuracy on an empty set"));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= arch.classes) {
        return Err(Error::LabelRange { label: l, classes: arch.classes });
    }
    let logits = predict(params, images, labels.len())?;
    let correct = logits
        .chunks(arch.classes)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference, gradient, max_relative_error, rng_tensor, Distribution};

    fn small_arch() -> ArchDescriptor {
        ArchDescriptor { depth: 2, width: 8, in_channels: 3, in_height: 8, in_width: 8, classes: 4, norm: Norm::None }
    }

    #[test]
    fn param_count_closed_form() {
        let arch = ArchDescriptor { width: 128, ..ArchDescriptor::convnet(3, 32, 32, 10) };
        // conv: w·c_in·9 + w per block; linear: (w·(32/8)²)·10 + 10
        let (w, c) = (128usize, 3usize);
        let expected = (w * c * 9 + w) + 2 * (w * w * 9 + w) + (w * 4 * 4) * 10 + 10;
        assert_eq!(expected, 319_242);
        assert_eq!(arch.param_count(), expected);
        let with_norm = ArchDescriptor { norm: Norm::Instance, ..arch };
        assert_eq!(with_norm.param_count(), expected + 3 * 2 * w);
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let arch = small_arch();
        let a = init_params(&arch, 5).unwrap();
        assert_eq!(a, init_params(&arch, 5).unwrap());
        assert_ne!(a, init_params(&arch, 6).unwrap());
        for b in arch.layout() {
            let vals = &a.as_slice()[b.offset..b.offset + b.len()];
            match b.kind {
                BlockKind::Bias => assert!(vals.iter().all(|&v| v == 0.0)),
                BlockKind::Weight { fan_in } => {
                    let bound = (6.0 / fan_in as f32).sqrt();
                    assert!(vals.iter().all(|v| v.abs() <= bound));
                }
                _ => {}
            }
        }
    }

    #[test]
    fn invalid_arch_rejected() {
        let mut a = small_arch();
        a.in_height = 6;
        assert!(init_params(&a, 0).is_err());
        a = small_arch();
        a.depth = 0;
        assert!(a.validate().is_err());
    }

    #[test]
    fn zero_params_give_zero_logits_and_ln_k_loss() {
        let arch = small_arch();
        let g = Graph::<f32>::new();
        let p = g.leaf(Tensor::zeros(&[arch.param_count()])).unwrap();
        let x = g.leaf(rng_tensor(&[3, 3, 8, 8], Distribution::StandardNormal, 1).unwrap()).unwrap();
        let logits = forward(&arch, &p, &x).unwrap();
        assert!(logits.value().data().iter().all(|&v| v == 0.0));
        let y = g.leaf(one_hot(&[0, 3, 1], 4).unwrap()).unwrap();
        let l = ce_loss(&arch, &p, &x, &y).unwrap();
        assert!((l.item() - 4f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn duplicated_rows_give_duplicated_logits() {
        let arch = small_arch();
        let params = init_params(&arch, 2).unwrap();
        let img = rng_tensor(&[1, 3, 8, 8], Distribution::StandardNormal, 4).unwrap();
        let mut twice = img.to_vec();
        twice.extend_from_slice(img.data());
        let logits = predict(&params, &twice, 2).unwrap();
        assert_eq!(logits[..4], logits[4..]);
    }

    #[test]
    fn two_class_loss_by_hand() {
        // logits come straight from the bias: depth 1, zero weights, bias (1, -1)
        let arch = ArchDescriptor { depth: 1, width: 1, in_channels: 1, in_height: 2, in_width: 2, classes: 2, norm: Norm::None };
        let mut v = vec![0.0f64; arch.param_count()];
        let n = v.len();
        v[n - 2] = 1.0;
        v[n - 1] = -1.0;
        let g = Graph::<f64>::new();
        let p = g.leaf(Tensor::vector(v).unwrap()).unwrap();
        let x = g.leaf(Tensor::full(&[1, 1, 2, 2], 0.3)).unwrap();
        let y = g.leaf(Tensor::from_slice(&[1, 2], &[0.0, 1.0]).unwrap()).unwrap();
        let l = ce_loss(&arch, &p, &x, &y).unwrap();
        // -log(e^-1 / (e^1 + e^-1)) = log(1 + e^2)
        let expected = (1.0 + 2f64.exp()).ln();
        assert!((l.item() - expected).abs() < 1e-6);
    }

    #[test]
    fn confident_logits_drive_loss_to_zero() {
        let arch = ArchDescriptor { depth: 1, width: 1, in_channels: 1, in_height: 2, in_width: 2, classes: 3, norm: Norm::None };
        let n = arch.param_count();
        let mut last = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 60.0] {
            let mut v = vec![0.0f64; n];
            v[n - 3] = margin;
            let g = Graph::<f64>::new();
            let p = g.leaf(Tensor::vector(v).unwrap()).unwrap();
            let x = g.leaf(Tensor::full(&[1, 1, 2, 2], 1.0)).unwrap();
            let y = g.leaf(one_hot(&[0], 3).unwrap().cast()).unwrap();
            let l = ce_loss(&arch, &p, &x, &y).unwrap().item();
            assert!(l >= 0.0 && l < last);
            last = l;
        }
        assert!(last < 1e-20);
    }

    #[test]
    fn label_rows_must_sum_to_one() {
        let arch = small_arch();
        let g = Graph::<f32>::new();
        let p = g.leaf(init_params(&arch, 0).unwrap().values().clone()).unwrap();
        let x = g.leaf(Tensor::zeros(&[1, 3, 8, 8])).unwrap();
        let y = g.leaf(Tensor::from_slice(&[1, 4], &[0.5, 0.2, 0.0, 0.0]).unwrap()).unwrap();
        assert!(matches!(ce_loss(&arch, &p, &x, &y), Err(Error::LabelRow { row: 0, .. })));
    }

    #[test]
    fn accuracy_edge_cases() {
        let arch = small_arch();
        let zero = ParamVector::new(arch, vec![0.0; arch.param_count()]).unwrap();
        let imgs = rng_tensor(&[8, 3, 8, 8], Distribution::StandardNormal, 9).unwrap();
        // balanced labels; zero logits tie-break to class 0
        let labels = [0, 1, 2, 3, 0, 1, 2, 3];
        assert_eq!(accuracy(&zero, imgs.data(), &labels).unwrap(), 0.25);
        assert!(matches!(accuracy(&zero, &[], &[]), Err(Error::Empty(_))));
        // predictions constructed to match
        let params = init_params(&arch, 1).unwrap();
        let logits = predict(&params, imgs.data(), 8).unwrap();
        let preds: Vec<usize> = logits.chunks(4).map(argmax).collect();
        assert_eq!(accuracy(&params, imgs.data(), &preds).unwrap(), 1.0);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let arch = small_arch();
        let p0 = init_params(&arch, 3).unwrap().values().cast::<f64>();
        let x = rng_tensor(&[4, 3, 8, 8], Distribution::StandardNormal, 5).unwrap().cast::<f64>();
        let y = one_hot(&[0, 1, 2, 3], 4).unwrap().cast::<f64>();
        let loss_at = |p: &Tensor<f64>| -> Result<Var<f64>> {
            let g = Graph::<f64>::new();
            let pv = g.leaf(p.clone())?;
            ce_loss(&arch, &pv, &g.leaf(x.clone())?, &g.leaf(y.clone())?)
        };
        let g = Graph::<f64>::new();
        let pv = g.leaf(p0.clone()).unwrap();
        let l = ce_loss(&arch, &pv, &g.leaf(x.clone()).unwrap(), &g.leaf(y.clone()).unwrap()).unwrap();
        let analytic = gradient(&l, &[pv]).unwrap().remove(0).value();
        // with 1e-3 steps some first-layer pre-activations cross the relu kink
        let numeric = finite_difference(|p| loss_at(p).map(|v| v.item()), &p0, 1e-6).unwrap();
        let err = max_relative_error(&analytic, &numeric, 1e-6).unwrap();
        assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn mean_logit_input_gradient_matches_finite_differences() {
        let arch = ArchDescriptor { norm: Norm::Instance, ..small_arch() };
        let p = init_params(&arch, 8).unwrap().values().cast::<f64>();
        let x0 = rng_tensor(&[2, 3, 8, 8], Distribution::StandardNormal, 6).unwrap().cast::<f64>();
        let mean_logit = |x: &Tensor<f64>| -> Result<Var<f64>> {
            let g = Graph::<f64>::new();
            let l = forward(&arch, &g.leaf(p.clone())?, &g.leaf(x.clone())?)?;
            Ok(l.sum()?.scale(1.0 / 8.0)?)
        };
        let g = Graph::<f64>::new();
        let xl = g.leaf(x0.clone()).unwrap();
        let out = forward(&arch, &g.leaf(p.clone()).unwrap(), &xl).unwrap().sum().unwrap().scale(1.0 / 8.0).unwrap();
        let analytic = gradient(&out, &[xl]).unwrap().remove(0).value();
        let numeric = finite_difference(|x| mean_logit(x).map(|v| v.item()), &x0, 1e-3).unwrap();
        let err = max_relative_error(&analytic, &numeric, 1e-6).unwrap();
        assert!(err < 1e-3, "relative error {err}");
    }
}
