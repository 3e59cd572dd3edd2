//! Confidence-ranked class-balanced selection, rotational augmentation, the
//! dataset container and a synthetic galaxy-like image generator.

mod dataset;
mod generator;
mod import;

use rand::seq::SliceRandom;
use rayon::prelude::*;

pub use dataset::{load_dataset, save_dataset, LabeledDataset, Split};
pub use generator::{generate_synthetic, Archetype, ConfidenceModel, GeneratorSpec};
pub use import::import_png_dir;

use crate::error::{Error, Result};
use crate::seed;

/// Keeps the `k_per_class` most confident images of every class and tags a
/// seeded uniform `train_per_class` of them as train, the rest as test.
///
/// Confidence ties keep the original storage order. Output is grouped by
/// class, each group in rank order.
pub fn curate_topk(dataset: &LabeledDataset, k_per_class: usize, train_per_class: usize, seed: u64) -> Result<LabeledDataset> {
    if k_per_class == 0 || train_per_class >= k_per_class {
        return Err(Error::InvalidArgument(format!(
            "need 0 <= train_per_class < k_per_class, got {train_per_class} and {k_per_class}"
        )));
    }
    let mut chosen = Vec::with_capacity(k_per_class * dataset.classes());
    let mut splits = Vec::with_capacity(chosen.capacity());
    for class in 0..dataset.classes() {
        let mut idx = dataset.class_indices(class);
        if idx.len() < k_per_class {
            return Err(Error::ClassTooSmall { class, have: idx.len(), need: k_per_class });
        }
        let conf = dataset.confidences();
        idx.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]));
        idx.truncate(k_per_class);
        let mut order: Vec<usize> = (0..k_per_class).collect();
        order.shuffle(&mut seed::rng(seed, &[class as u64]));
        let mut tags = vec![Split::Test; k_per_class];
        for &o in &order[..train_per_class] {
            tags[o] = Split::Train;
        }
        chosen.extend(idx);
        splits.extend(tags);
    }
    dataset.subset(&chosen).with_splits(splits)
}

/// `per_class` distinct indices of every class, drawn uniformly without
/// replacement; class-major, each class in draw order.
pub fn stratified_indices(dataset: &LabeledDataset, per_class: usize, seed: u64) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(per_class * dataset.classes());
    for class in 0..dataset.classes() {
        let mut idx = dataset.class_indices(class);
        if idx.len() < per_class {
            return Err(Error::ClassTooSmall { class, have: idx.len(), need: per_class });
        }
        let (picked, _) = idx.partial_shuffle(&mut seed::rng(seed, &[class as u64]), per_class);
        out.extend_from_slice(picked);
    }
    Ok(out)
}

/// Each image rotated by `0, step, 2·step, …, (count−1)·step` degrees,
/// grouped per source image. Only train (or unsplit) images are accepted.
pub fn rotate_augment(dataset: &LabeledDataset, angle_step_deg: f64, count: usize) -> Result<LabeledDataset> {
    if count == 0 {
        return Err(Error::InvalidArgument("rotation count must be at least 1".into()));
    }
    if dataset.splits().contains(&Split::Test) {
        return Err(Error::TestSplitAugment);
    }
    let (c, h, w) = dataset.dims();
    let rotated: Vec<Vec<f32>> = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let img = dataset.image(i);
            let fill = corner_median(img, c, h, w);
            let mut out = Vec::with_capacity(img.len() * count);
            for k in 0..count {
                out.extend(rotate_image(img, (c, h, w), k as f64 * angle_step_deg, &fill));
            }
            out
        })
        .collect();
    let reps: Vec<usize> = (0..dataset.len()).flat_map(|i| std::iter::repeat_n(i, count)).collect();
    dataset.subset(&reps).with_pixels(rotated.concat())
}

/// Per-channel median of the four corner pixels.
pub fn corner_median(img: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    (0..c)
        .map(|ch| {
            let p = &img[ch * h * w..(ch + 1) * h * w];
            let mut v = [p[0], p[w - 1], p[(h - 1) * w], p[h * w - 1]];
            v.sort_by(f32::total_cmp);
            (v[1] + v[2]) / 2.0
        })
        .collect()
}

/// Counter-clockwise rotation about the image centre with bilinear sampling;
/// samples falling outside the source take the per-channel `fill`.
pub fn rotate_image(img: &[f32], (c, h, w): (usize, usize, usize), degrees: f64, fill: &[f32]) -> Vec<f32> {
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = vec![0.0f32; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            // inverse rotation maps the output pixel back into the source
            let sx = cos * dx - sin * dy + cx;
            let sy = sin * dx + cos * dy + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let taps = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x0 + 1.0, (1.0 - fy) * fx),
                (y0 + 1.0, x0, fy * (1.0 - fx)),
                (y0 + 1.0, x0 + 1.0, fy * fx),
            ];
            for ch in 0..c {
                let plane = &img[ch * h * w..(ch + 1) * h * w];
                let mut acc = 0.0f64;
                for &(ty, tx, wt) in &taps {
                    if wt == 0.0 {
                        continue;
                    }
                    let v = if ty >= 0.0 && tx >= 0.0 && (ty as usize) < h && (tx as usize) < w {
                        plane[ty as usize * w + tx as usize]
                    } else {
                        fill[ch]
                    };
                    acc += wt * v as f64;
                }
                out[ch * h * w + y * w + x] = acc as f32;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranked() -> LabeledDataset {
        // class 0: confidences 0.1, 0.9, 0.5 ; class 1: 0.3, 0.3, 0.3
        LabeledDataset::new(
            (1, 1, 1),
            2,
            (0..6).map(|v| v as f32 / 10.0).collect(),
            vec![0, 0, 0, 1, 1, 1],
            vec![0.1, 0.9, 0.5, 0.3, 0.3, 0.3],
            vec![Split::Unsplit; 6],
        )
        .unwrap()
    }

    #[test]
    fn topk_picks_most_confident() {
        let out = curate_topk(&ranked(), 2, 1, 0).unwrap();
        assert_eq!(out.confidences(), &[0.9, 0.5, 0.3, 0.3]);
        // ties keep storage order: pixels 0.3 and 0.4 come first in class 1
        assert_eq!(out.pixels(), &[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(out.splits().iter().filter(|&&s| s == Split::Train).count(), 2);
    }

    #[test]
    fn topk_names_small_class() {
        let err = curate_topk(&ranked(), 4, 1, 0).unwrap_err();
        assert!(matches!(err, Error::ClassTooSmall { class: 0, have: 3, need: 4 }));
    }

    #[test]
    fn stratified_sampling() {
        let d = ranked();
        let idx = stratified_indices(&d, 2, 4).unwrap();
        assert_eq!(idx.len(), 4);
        assert!(idx[..2].iter().all(|&i| d.labels()[i] == 0));
        assert_ne!(idx[0], idx[1]);
        let mut all = stratified_indices(&d, 3, 4).unwrap();
        all.sort();
        assert_eq!(all, (0..6).collect::<Vec<_>>());
        assert!(matches!(stratified_indices(&d, 4, 0), Err(Error::ClassTooSmall { .. })));
    }

    #[test]
    fn full_turn_is_identity() {
        let img: Vec<f32> = (0..2 * 5 * 6).map(|v| (v as f32 * 0.37).sin().abs()).collect();
        let out = rotate_image(&img, (2, 5, 6), 360.0, &[0.0, 0.0]);
        for (a, b) in img.iter().zip(&out) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn quarter_turn_moves_pixels() {
        // 3x3 single channel, one bright pixel at the right-middle
        let mut img = vec![0.0f32; 9];
        img[5] = 1.0;
        let out = rotate_image(&img, (1, 3, 3), 90.0, &[0.0]);
        // counter-clockwise as displayed (y down) sends right-middle to top-middle
        assert!((out[1] - 1.0).abs() < 1e-6, "{out:?}");
    }

    #[test]
    fn rotate_rejects_test_split() {
        let d = ranked().with_splits(vec![Split::Train, Split::Test, Split::Train, Split::Train, Split::Train, Split::Train]).unwrap();
        assert!(matches!(rotate_augment(&d, 36.0, 10), Err(Error::TestSplitAugment)));
    }

    #[test]
    fn rotate_multiplies_size() {
        let out = rotate_augment(&ranked(), 36.0, 10).unwrap();
        assert_eq!(out.len(), 60);
        assert_eq!(out.labels()[..10], [0; 10]);
    }
}
