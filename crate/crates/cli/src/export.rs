//! Image export: one row per class plus a class-by-IPC grid, each as a
//! binary PPM (P6) and a PNG of the same pixels.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::CliError;

/// Value given to every pixel of a constant image.
pub const FLAT_GRAY: u8 = 128;

/// Per-image min-max mapping to `[0, 255]` across all channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mapping {
    pub min: f32,
    pub max: f32,
}

pub fn map_image(img: &[f32]) -> (Vec<u8>, Mapping) {
    let min = img.iter().copied().fold(f32::INFINITY, f32::min);
    let max = img.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = max - min;
    let px = img
        .iter()
        .map(|&v| if span > 0.0 { ((v - min) / span * 255.0).round().clamp(0.0, 255.0) as u8 } else { FLAT_GRAY })
        .collect();
    (px, Mapping { min, max })
}

/// Interleaved RGB raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Raster {
    fn new(width: usize, height: usize) -> Self {
        Self { width, height, rgb: vec![0; width * height * 3] }
    }

    /// Copies planar `c`-channel bytes into the tile at `(row, col)`.
    fn blit(&mut self, planar: &[u8], (c, h, w): (usize, usize, usize), row: usize, col: usize) {
        for y in 0..h {
            for x in 0..w {
                let dst = ((row * h + y) * self.width + col * w + x) * 3;
                for k in 0..3 {
                    let ch = if c == 1 { 0 } else { k };
                    self.rgb[dst + k] = planar[ch * h * w + y * w + x];
                }
            }
        }
    }

    pub fn ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<Vec<String>, CliError> {
        let ppm = format!("{stem}.ppm");
        let png = format!("{stem}.png");
        std::fs::write(dir.join(&ppm), self.ppm()).map_err(|e| CliError::io(dir.join(&ppm), e))?;
        image::save_buffer(dir.join(&png), &self.rgb, self.width as u32, self.height as u32, image::ColorType::Rgb8)
            .map_err(|e| CliError::io(dir.join(&png), e))?;
        Ok(vec![ppm, png])
    }
}

pub struct Export {
    pub rows: Vec<Raster>,
    pub grid: Raster,
    pub mappings: Vec<Mapping>,
}

/// Lays out `classes × ipc` images (class-major, planar `dims`) as one row
/// raster per class and a grid with one row per class.
pub fn layout(pixels: &[f32], dims: (usize, usize, usize), classes: usize, ipc: usize) -> Result<Export, CliError> {
    let (c, h, w) = dims;
    if !(c == 1 || c == 3) {
        return Err(CliError::new("invalid", format!("can only export 1- or 3-channel images, got {c}")));
    }
    let len = c * h * w;
    if pixels.len() != classes * ipc * len {
        return Err(CliError::new("invalid", "pixel count does not match classes x ipc images"));
    }
    let mut grid = Raster::new(ipc * w, classes * h);
    let mut rows = Vec::with_capacity(classes);
    let mut mappings = Vec::with_capacity(classes * ipc);
    for k in 0..classes {
        let mut row = Raster::new(ipc * w, h);
        for j in 0..ipc {
            let i = k * ipc + j;
            let (bytes, m) = map_image(&pixels[i * len..(i + 1) * len]);
            row.blit(&bytes, dims, 0, j);
            grid.blit(&bytes, dims, k, j);
            mappings.push(m);
        }
        rows.push(row);
    }
    Ok(Export { rows, grid, mappings })
}

/// Sidecar text describing the pixel mapping of every exported image.
pub fn sidecar(e: &Export, ipc: usize) -> String {
    let mut s = String::from(
        "# per-image min-max to [0,255] over all channels, rounded; constant images map to 128\n",
    );
    for (i, m) in e.mappings.iter().enumerate() {
        let _ = writeln!(s, "class={} index={} min={} max={}", i / ipc, i % ipc, m.min, m.max);
    }
    s
}
