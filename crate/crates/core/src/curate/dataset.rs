use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::io::{sha256_hex, Decoder, Encoder};
use crate::nets::{one_hot, ArchDescriptor};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"STMD";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Unsplit,
    Train,
    Test,
}

impl Split {
    fn tag(self) -> u8 {
        match self {
            Split::Unsplit => 0,
            Split::Train => 1,
            Split::Test => 2,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Split::Unsplit),
            1 => Some(Split::Train),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

/// Images `[n, C, H, W]` with integer labels, per-image confidence and a
/// split tag.
///
/// Curated and generated sets hold pixels in `[0, 1]`; whitened copies do
/// not, so the type only insists on finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    channels: usize,
    height: usize,
    width: usize,
    classes: usize,
    pixels: Vec<f32>,
    labels: Vec<usize>,
    confidences: Vec<f32>,
    splits: Vec<Split>,
}

impl LabeledDataset {
    pub fn new(
        (channels, height, width): (usize, usize, usize),
        classes: usize,
        pixels: Vec<f32>,
        labels: Vec<usize>,
        confidences: Vec<f32>,
        splits: Vec<Split>,
    ) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 || classes == 0 {
            return Err(Error::InvalidArgument(format!(
                "dataset dims {channels}x{height}x{width} with {classes} classes"
            )));
        }
        let n = labels.len();
        if pixels.len() != n * channels * height * width || confidences.len() != n || splits.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{} pixels, {} confidences, {} split tags for {n} images of {channels}x{height}x{width}",
                pixels.len(),
                confidences.len(),
                splits.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelRange { label, classes });
        }
        if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Error::InvalidArgument(format!("confidence {c} outside [0, 1]")));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument("non-finite pixel".into()));
        }
        Ok(Self { channels, height, width, classes, pixels, labels, confidences, splits })
    }

    /// Full confidence, unsplit.
    pub fn from_images(dims: (usize, usize, usize), classes: usize, pixels: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        let n = labels.len();
        Self::new(dims, classes, pixels, labels, vec![1.0; n], vec![Split::Unsplit; n])
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn confidences(&self) -> &[f32] {
        &self.confidences
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let len = self.image_len();
        &self.pixels[i * len..(i + 1) * len]
    }

    pub fn mean_confidence(&self) -> Option<f64> {
        if self.is_empty() {
            return None;
        }
        Some(self.confidences.iter().map(|&c| c as f64).sum::<f64>() / self.len() as f64)
    }

    /// Indices of images with the given label, in storage order.
    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let len = self.image_len();
        let mut pixels = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Self {
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            confidences: indices.iter().map(|&i| self.confidences[i]).collect(),
            splits: indices.iter().map(|&i| self.splits[i]).collect(),
            ..*self
        }
    }

    /// Images tagged `split`.
    pub fn select_split(&self, split: Split) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.splits[i] == split).collect();
        self.subset(&idx)
    }

    /// Images usable for training: tagged train, or everything when no image
    /// carries a split tag.
    pub fn training_view(&self) -> Self {
        if self.splits.iter().all(|&s| s == Split::Unsplit) {
            return self.clone();
        }
        self.select_split(Split::Train)
    }

    pub fn with_splits(mut self, splits: Vec<Split>) -> Result<Self> {
        if splits.len() != self.len() {
            return Err(Error::InvalidArgument(format!("{} split tags for {} images", splits.len(), self.len())));
        }
        self.splits = splits;
        Ok(self)
    }

    /// Same metadata with replaced pixels.
    pub fn with_pixels(&self, pixels: Vec<f32>) -> Result<Self> {
        Self::new(
            self.dims(),
            self.classes,
            pixels,
            self.labels.clone(),
            self.confidences.clone(),
            self.splits.clone(),
        )
    }

    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.dims() != other.dims() || self.classes != other.classes {
            return Err(Error::InvalidArgument("concatenating datasets of different shape".into()));
        }
        let mut out = self.clone();
        out.pixels.extend_from_slice(&other.pixels);
        out.labels.extend_from_slice(&other.labels);
        out.confidences.extend_from_slice(&other.confidences);
        out.splits.extend_from_slice(&other.splits);
        Ok(out)
    }

    pub fn images_tensor(&self) -> Result<Tensor<f32>> {
        if self.is_empty() {
            return Err(Error::Empty("dataset has no images"));
        }
        Ok(Tensor::from_slice(&[self.len(), self.channels, self.height, self.width], &self.pixels)?)
    }

    pub fn one_hot(&self) -> Result<Tensor<f32>> {
        if self.is_empty() {
            return Err(Error::Empty("dataset has no images"));
        }
        one_hot(&self.labels, self.classes)
    }

    /// Errors unless the images fit `arch`'s input and class count.
    pub fn check_arch(&self, arch: &ArchDescriptor) -> Result<()> {
        if (arch.in_channels, arch.in_height, arch.in_width) != self.dims() || arch.classes != self.classes {
            return Err(Error::ArchMismatch {
                expected: arch.to_string(),
                found: format!(
                    "dataset {}x{}x{} with {} classes",
                    self.channels, self.height, self.width, self.classes
                ),
            });
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new(MAGIC, VERSION);
        for v in [self.len(), self.channels, self.height, self.width, self.classes] {
            e.u32(v as u32);
        }
        e.f32s(&self.pixels);
        for &l in &self.labels {
            e.i32(l as i32);
        }
        e.f32s(&self.confidences);
        for &s in &self.splits {
            e.u8(s.tag());
        }
        e.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::open(bytes, MAGIC, VERSION)?;
        let n = d.u32("image count")? as usize;
        let c = d.u32("channels")? as usize;
        let h = d.u32("height")? as usize;
        let w = d.u32("width")? as usize;
        let k = d.u32("class count")? as usize;
        let pixels = d.f32s(n * c * h * w, "pixels")?;
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let l = d.i32("labels")?;
            labels.push(usize::try_from(l).map_err(|_| FormatError::Malformed(format!("negative label {l}")))?);
        }
        let confidences = d.f32s(n, "confidences")?;
        let mut splits = Vec::with_capacity(n);
        for _ in 0..n {
            let t = d.u8("split tags")?;
            splits.push(Split::from_tag(t).ok_or_else(|| FormatError::Malformed(format!("split tag {t}")))?);
        }
        d.finish()?;
        Self::new((c, h, w), k, pixels, labels, confidences, splits)
            .map_err(|e| FormatError::Malformed(e.to_string()).into())
    }

    /// SHA-256 of the encoded container.
    pub fn fingerprint(&self) -> String {
        sha256_hex(&self.encode())
    }
}

pub fn save_dataset(dataset: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, dataset.encode())?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let bytes = std::fs::read(path).map_err(FormatError::Io)?;
    LabeledDataset::decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> LabeledDataset {
        LabeledDataset::new(
            (1, 2, 2),
            3,
            (0..12).map(|v| v as f32 / 12.0).collect(),
            vec![0, 2, 1],
            vec![0.5, 1.0, 0.25],
            vec![Split::Train, Split::Test, Split::Unsplit],
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let d = tiny();
        let back = LabeledDataset::decode(&d.encode()).unwrap();
        assert_eq!(d, back);
    }

    #[test]
    fn empty_round_trips() {
        let d = LabeledDataset::from_images((3, 4, 4), 2, vec![], vec![]).unwrap();
        let back = LabeledDataset::decode(&d.encode()).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.classes(), 2);
        assert!(matches!(back.images_tensor(), Err(Error::Empty(_))));
    }

    #[test]
    fn truncation_is_named() {
        let bytes = tiny().encode();
        let err = LabeledDataset::decode(&bytes[..bytes.len() - 5]).unwrap_err();
        assert!(matches!(err, Error::Format(FormatError::Truncated { .. })), "{err}");
    }

    #[test]
    fn rejects_bad_labels_and_confidences() {
        assert!(matches!(
            LabeledDataset::from_images((1, 1, 1), 2, vec![0.0], vec![2]),
            Err(Error::LabelRange { label: 2, classes: 2 })
        ));
        assert!(LabeledDataset::new((1, 1, 1), 2, vec![0.0], vec![0], vec![1.5], vec![Split::Train]).is_err());
    }

    #[test]
    fn subset_and_split_selection() {
        let d = tiny();
        let s = d.subset(&[2, 0]);
        assert_eq!(s.labels(), &[1, 0]);
        assert_eq!(s.image(1), d.image(0));
        assert_eq!(d.select_split(Split::Test).labels(), &[2]);
        assert_eq!(d.training_view().len(), 1);
        assert_eq!(d.class_counts(), vec![1, 1, 1]);
    }
}
