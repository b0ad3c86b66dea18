//! Visual report primitives: grayscale axial slices, 1-pixel contour
//! overlays, side-by-side montages, and simple histograms with PNG bar
//! charts. Rendering uses a fixed grayscale window over normalized
//! intensities so repeated runs produce identical images.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::volume::Volume;

pub const CONTOUR_TRUTH: Rgb<u8> = Rgb([40, 220, 70]);
pub const CONTOUR_PREDICTED: Rgb<u8> = Rgb([235, 60, 50]);

/// Render one axial slice as grayscale, clamping intensities to [0, 1].
pub fn axial_slice(v: &Volume, z: usize) -> RgbImage {
    let d = v.dims();
    assert!(z < d.nz, "slice {z} out of range for {} slices", d.nz);
    let mut img = RgbImage::new(d.nx as u32, d.ny as u32);
    for y in 0..d.ny {
        for x in 0..d.nx {
            let g = (v.at(x, y, z).clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, Rgb([g, g, g]));
        }
    }
    img
}

/// Mark the in-slice contour of a binary mask: set voxels with at least one
/// unset 4-neighbor within the slice (slice edges count as unset).
pub fn overlay_contour(img: &mut RgbImage, mask: &Volume, z: usize, color: Rgb<u8>) {
    let d = mask.dims();
    assert_eq!((img.width(), img.height()), (d.nx as u32, d.ny as u32), "image/mask size mismatch");
    assert!(z < d.nz);
    let set = |x: isize, y: isize| -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < d.nx
            && (y as usize) < d.ny
            && mask.at(x as usize, y as usize, z) != 0.0
    };
    for y in 0..d.ny as isize {
        for x in 0..d.nx as isize {
            if !set(x, y) {
                continue;
            }
            if !set(x - 1, y) || !set(x + 1, y) || !set(x, y - 1) || !set(x, y + 1) {
                img.put_pixel(x as u32, y as u32, color);
            }
        }
    }
}

/// Nearest-neighbor upscale.
pub fn upscale(img: &RgbImage, factor: u32) -> RgbImage {
    assert!(factor >= 1);
    let mut out = RgbImage::new(img.width() * factor, img.height() * factor);
    for (x, y, px) in out.enumerate_pixels_mut() {
        *px = *img.get_pixel(x / factor, y / factor);
    }
    out
}

/// Stack panels left to right with a separator gap, top-aligned.
pub fn hstack(panels: &[RgbImage], gap: u32) -> RgbImage {
    assert!(!panels.is_empty());
    let width: u32 =
        panels.iter().map(|p| p.width()).sum::<u32>() + gap * (panels.len() as u32 - 1);
    let height = panels.iter().map(|p| p.height()).max().unwrap();
    let mut out = RgbImage::from_pixel(width, height, Rgb([20, 20, 20]));
    let mut x0 = 0;
    for p in panels {
        for (x, y, px) in p.enumerate_pixels() {
            out.put_pixel(x0 + x, y, *px);
        }
        x0 += p.width() + gap;
    }
    out
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    img.save(path).map_err(|e| Error::format(path, format!("png encode: {e}")))
}

/// Uniform-bin histogram over a closed value range.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn bin_edges(&self, i: usize) -> (f64, f64) {
        let w = (self.hi - self.lo) / self.counts.len() as f64;
        (self.lo + i as f64 * w, self.lo + (i + 1) as f64 * w)
    }
}

/// Bin values into `n_bins` uniform bins spanning [min, max]. The top edge
/// is inclusive so every finite value lands in a bin. An empty input yields
/// all-zero counts over [0, 1]; a degenerate range is widened by one.
pub fn histogram(values: &[f64], n_bins: usize) -> Histogram {
    assert!(n_bins >= 1);
    if values.is_empty() {
        return Histogram { lo: 0.0, hi: 1.0, counts: vec![0; n_bins] };
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        hi = lo + 1.0;
    }
    let mut counts = vec![0usize; n_bins];
    let w = (hi - lo) / n_bins as f64;
    for &v in values {
        let i = (((v - lo) / w) as usize).min(n_bins - 1);
        counts[i] += 1;
    }
    Histogram { lo, hi, counts }
}

/// Write a histogram as `bin_lo,bin_hi,count` CSV.
pub fn write_histogram_csv(path: &Path, hist: &Histogram) -> Result<()> {
    let mut text = String::from("bin_lo,bin_hi,count\n");
    for (i, c) in hist.counts.iter().enumerate() {
        let (lo, hi) = hist.bin_edges(i);
        text.push_str(&format!("{lo},{hi},{c}\n"));
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Render a histogram as a bar chart.
pub fn bar_chart(hist: &Histogram, width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([245, 245, 245]));
    let peak = hist.counts.iter().max().copied().unwrap_or(0).max(1) as f64;
    let n = hist.counts.len() as u32;
    for (i, &c) in hist.counts.iter().enumerate() {
        let x0 = i as u32 * width / n;
        let x1 = (i as u32 + 1) * width / n;
        let h = ((c as f64 / peak) * (height as f64 - 2.0)).round() as u32;
        for x in x0..x1.saturating_sub(1) {
            for y in height - h..height {
                img.put_pixel(x, y, Rgb([70, 110, 180]));
            }
        }
    }
    img
}
