use crate::curate::{stratified_indices, LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::nets::{one_hot, ArchDescriptor};
use crate::tensor::{rng_tensor, Distribution, Element, Graph, Tensor, Var};

/// Smallest step size the distiller lets α reach.
pub const ALPHA_FLOOR: f32 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    Noise,
    Real,
}

impl InitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InitMode::Noise => "noise",
            InitMode::Real => "real",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "noise" => Some(InitMode::Noise),
            "real" => Some(InitMode::Real),
            _ => None,
        }
    }
}

/// Learnable images `[K·ipc, C, H, W]` (image `j` belongs to class
/// `j / ipc`), their fixed one-hot labels and the learnable step size α.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    classes: usize,
    ipc: usize,
    images: Tensor<f32>,
    alpha: f32,
}

/// A synthetic set recorded on a graph.
pub struct SynLeaves<E: Element> {
    pub images: Var<E>,
    pub labels: Var<E>,
    pub alpha: Var<E>,
}

impl SyntheticDataset {
    pub fn new(images: Tensor<f32>, classes: usize, ipc: usize, alpha: f32) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || classes == 0 || ipc == 0 || s[0] != classes * ipc {
            return Err(Error::InvalidArgument(format!(
                "synthetic images {s:?} for {classes} classes x {ipc} per class"
            )));
        }
        if !images.is_finite() {
            return Err(Error::InvalidArgument("non-finite synthetic pixel".into()));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("step size must be positive, got {alpha}")));
        }
        Ok(Self { classes, ipc, images, alpha })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn ipc(&self) -> usize {
        self.ipc
    }

    pub fn len(&self) -> usize {
        self.classes * self.ipc
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn alpha(&self) -> f32 {
        self.alpha
    }

    pub fn label_indices(&self) -> Vec<usize> {
        (0..self.len()).map(|j| j / self.ipc).collect()
    }

    pub fn labels(&self) -> Tensor<f32> {
        one_hot(&self.label_indices(), self.classes).expect("labels are in range by construction")
    }

    /// Replaces pixels and α, clamping α to [`ALPHA_FLOOR`].
    pub fn updated(&self, images: Tensor<f32>, alpha: f32) -> Result<Self> {
        if images.shape() != self.images.shape() {
            return Err(Error::InvalidArgument("synthetic image shape changed".into()));
        }
        if !alpha.is_finite() {
            return Err(Error::InvalidArgument("non-finite step size".into()));
        }
        Self::new(images, self.classes, self.ipc, alpha.max(ALPHA_FLOOR))
    }

    pub fn check_arch(&self, arch: &ArchDescriptor) -> Result<()> {
        if (arch.in_channels, arch.in_height, arch.in_width) != self.dims() || arch.classes != self.classes {
            return Err(Error::ArchMismatch {
                expected: arch.to_string(),
                found: format!("synthetic set {:?} with {} classes", self.dims(), self.classes),
            });
        }
        Ok(())
    }

    pub fn leaves<E: Element>(&self, g: &Graph<E>) -> Result<SynLeaves<E>> {
        Ok(SynLeaves {
            images: g.leaf(self.images.cast())?,
            labels: g.leaf(self.labels().cast())?,
            alpha: g.leaf(Tensor::scalar(E::from_f64_lossy(self.alpha as f64)))?,
        })
    }

    /// The images as a training set (full confidence, train split).
    pub fn to_dataset(&self) -> Result<LabeledDataset> {
        let n = self.len();
        LabeledDataset::new(
            self.dims(),
            self.classes,
            self.images.to_vec(),
            self.label_indices(),
            vec![1.0; n],
            vec![Split::Train; n],
        )
    }
}

/// Initial synthetic set drawn from `real`.
///
/// `Noise`: standard-normal pixels rescaled to each channel's mean and
/// standard deviation over `real`. `Real`: a class-stratified uniform
/// sample without replacement.
pub fn init_syn(mode: InitMode, real: &LabeledDataset, ipc: usize, alpha: f32, seed: u64) -> Result<SyntheticDataset> {
    if ipc == 0 {
        return Err(Error::InvalidArgument("ipc must be at least 1".into()));
    }
    if real.is_empty() {
        return Err(Error::Empty("real dataset"));
    }
    let (c, h, w) = real.dims();
    let k = real.classes();
    let shape = [k * ipc, c, h, w];
    let images = match mode {
        InitMode::Real => {
            let idx = stratified_indices(real, ipc, seed)?;
            Tensor::new(shape.to_vec(), real.subset(&idx).pixels().to_vec())?
        }
        InitMode::Noise => {
            let plane = h * w;
            let mut stats = Vec::with_capacity(c);
            for ch in 0..c {
                let vals = (0..real.len()).flat_map(|i| &real.image(i)[ch * plane..(ch + 1) * plane]);
                let (mut s, mut s2, mut n) = (0.0f64, 0.0f64, 0.0f64);
                for &v in vals {
                    s += v as f64;
                    s2 += v as f64 * v as f64;
                    n += 1.0;
                }
                let mean = s / n;
                stats.push((mean, (s2 / n - mean * mean).max(0.0).sqrt()));
            }
            let z = rng_tensor(&shape, Distribution::StandardNormal, seed)?;
            let data = z
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let (m, sd) = stats[(i / plane) % c];
                    (m + sd * v as f64) as f32
                })
                .collect();
            Tensor::new(shape.to_vec(), data)?
        }
    };
    SyntheticDataset::new(images, k, ipc, alpha)
}
