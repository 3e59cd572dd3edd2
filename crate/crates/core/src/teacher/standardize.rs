use crate::curate::LabeledDataset;
use crate::error::{Error, Result};

/// Per-channel mean and standard deviation (population) of a fitting set.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// A channel with zero spread keeps std 1, so it is only centred.
    pub fn fit(ds: &LabeledDataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::InsufficientData { need: 1, got: 0 });
        }
        let (c, h, w) = ds.dims();
        let plane = h * w;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for img in ds.pixels().chunks_exact(c * plane) {
            for ch in 0..c {
                for &v in &img[ch * plane..(ch + 1) * plane] {
                    sum[ch] += v as f64;
                    sq[ch] += v as f64 * v as f64;
                }
            }
        }
        let n = (ds.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / n - m * m).max(0.0);
                if var > 0.0 { var.sqrt() } else { 1.0 }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// `(x − mean) / std` per channel.
    pub fn apply(&self, ds: &LabeledDataset) -> Result<LabeledDataset> {
        self.map(ds, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, ds: &LabeledDataset) -> Result<LabeledDataset> {
        self.map(ds, |v, m, s| v * s + m)
    }

    /// Inverse transform of raw planar images with the fitted layout.
    pub fn invert_pixels(&self, pixels: &[f32], plane: usize) -> Vec<f32> {
        let c = self.channels();
        pixels
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / plane) % c;
                (v as f64 * self.std[ch] + self.mean[ch]) as f32
            })
            .collect()
    }

    fn map(&self, ds: &LabeledDataset, f: impl Fn(f64, f64, f64) -> f64) -> Result<LabeledDataset> {
        let (c, h, w) = ds.dims();
        if c != self.channels() {
            return Err(Error::InvalidArgument(format!(
                "stats cover {} channels, dataset has {c}",
                self.channels()
            )));
        }
        let plane = h * w;
        let px = ds
            .pixels()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / plane) % c;
                f(v as f64, self.mean[ch], self.std[ch]) as f32
            })
            .collect();
        ds.with_pixels(px)
    }
}
