use std::path::Path;

use image::ColorType;

use super::{LabeledDataset, Split};
use crate::error::{Error, Result};

/// Reads PNGs listed in a `filename,label[,confidence]` CSV (header row
/// required) relative to `dir`. Grayscale files give one channel, anything
/// else three; alpha is dropped. Pixels map to `[0, 1]`.
///
/// `classes` defaults to the largest label plus one.
pub fn import_png_dir(dir: impl AsRef<Path>, csv_path: impl AsRef<Path>, classes: Option<usize>) -> Result<LabeledDataset> {
    let dir = dir.as_ref();
    let mut reader = csv::Reader::from_path(csv_path.as_ref())
        .map_err(|e| Error::Import(format!("{}: {e}", csv_path.as_ref().display())))?;
    let headers = reader.headers().map_err(|e| Error::Import(e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let file_col = col("filename").ok_or_else(|| Error::Import("sidecar lacks a filename column".into()))?;
    let label_col = col("label").ok_or_else(|| Error::Import("sidecar lacks a label column".into()))?;
    let conf_col = col("confidence");

    let mut dims: Option<(usize, usize, usize)> = None;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut confidences = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Import(e.to_string()))?;
        let row = line + 2;
        let field = |i: usize| record.get(i).map(str::trim).unwrap_or("");
        let name = field(file_col);
        let label: usize = field(label_col)
            .parse()
            .map_err(|_| Error::Import(format!("line {row}: bad label {:?}", field(label_col))))?;
        let conf: f32 = match conf_col {
            Some(c) if !field(c).is_empty() => field(c)
                .parse()
                .map_err(|_| Error::Import(format!("line {row}: bad confidence {:?}", field(c))))?,
            _ => 1.0,
        };
        let path = dir.join(name);
        let img = image::open(&path).map_err(|e| Error::Import(format!("{}: {e}", path.display())))?;
        let gray = matches!(img.color(), ColorType::L8 | ColorType::L16 | ColorType::La8 | ColorType::La16);
        let (w, h) = (img.width() as usize, img.height() as usize);
        let (c, planar) = if gray {
            (1, img.to_luma8().into_raw())
        } else {
            let raw = img.to_rgb8().into_raw();
            // interleaved RGB to planar CHW
            let mut planar = vec![0u8; raw.len()];
            for (i, px) in raw.chunks_exact(3).enumerate() {
                for ch in 0..3 {
                    planar[ch * w * h + i] = px[ch];
                }
            }
            (3, planar)
        };
        match dims {
            None => dims = Some((c, h, w)),
            Some(d) if d != (c, h, w) => {
                return Err(Error::Import(format!(
                    "{}: {c}x{h}x{w} differs from earlier images {}x{}x{}",
                    path.display(),
                    d.0,
                    d.1,
                    d.2
                )))
            }
            _ => {}
        }
        pixels.extend(planar.iter().map(|&b| b as f32 / 255.0));
        labels.push(label);
        confidences.push(conf);
    }
    let dims = dims.ok_or_else(|| Error::Import("sidecar lists no images".into()))?;
    let k = classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    let n = labels.len();
    LabeledDataset::new(dims, k, pixels, labels, confidences, vec![Split::Unsplit; n])
}
