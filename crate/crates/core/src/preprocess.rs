//! Tissue masking and moving-window patch extraction.

use std::path::Path;

use image::{imageops, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An RGB slide (or slide region) held in memory.
#[derive(Debug, Clone)]
pub struct SlideImage {
    pub id: String,
    pub pixels: RgbImage,
}

impl SlideImage {
    pub fn new(id: impl Into<String>, pixels: RgbImage) -> Self {
        Self {
            id: id.into(),
            pixels,
        }
    }

    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }
}

/// Boolean foreground map in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TissueMask {
    pub width: u32,
    pub height: u32,
    pub data: Vec<bool>,
}

impl TissueMask {
    pub fn filled(width: u32, height: u32, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value; width as usize * height as usize],
        }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let w = self.width as usize;
        self.data[y as usize * w + x as usize] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }
}

/// A tile extracted from a slide, addressed by its position on the tiling grid.
#[derive(Debug, Clone)]
pub struct Patch {
    pub pixels: RgbImage,
    pub grid_col: u32,
    pub grid_row: u32,
    pub x: u32,
    pub y: u32,
    pub tissue_fraction: f64,
}

impl Patch {
    pub fn name(&self, slide_id: &str) -> String {
        patch_name(slide_id, self.grid_col, self.grid_row)
    }
}

pub fn patch_name(slide_id: &str, grid_col: u32, grid_row: u32) -> String {
    format!("{slide_id}_x{grid_col}_y{grid_row}")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TilingConfig {
    pub window: u32,
    pub stride: u32,
    pub min_tissue: f64,
}

impl Default for TilingConfig {
    fn default() -> Self {
        Self {
            window: 512,
            stride: 256,
            min_tissue: 0.20,
        }
    }
}

impl TilingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.stride == 0 {
            return Err(Error::InvalidConfig(
                "tiling.window and tiling.stride must be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.min_tissue) {
            return Err(Error::InvalidConfig(
                "tiling.min_tissue must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Otsu threshold over a 256-bin histogram. Pixels with intensity `<= t`
/// form the lower class. Among equal maximizers the smallest `t` wins.
pub fn otsu_threshold(histogram: &[u64; 256]) -> Result<u8> {
    let total: u64 = histogram.iter().sum();
    let occupied: Vec<usize> = (0..256).filter(|&i| histogram[i] > 0).collect();
    match occupied.as_slice() {
        [] => return Err(Error::EmptySlide),
        [bin] => return Err(Error::DegenerateHistogram { bin: *bin as u8 }),
        _ => {}
    }
    let weighted_total: u64 = histogram
        .iter()
        .enumerate()
        .map(|(i, c)| i as u64 * c)
        .sum();

    let n = total as f64;
    let s = weighted_total as f64;
    let mut n0 = 0u64;
    let mut s0 = 0u64;
    let mut best = (0u8, -1.0f64);
    for t in 0..255usize {
        n0 += histogram[t];
        s0 += t as u64 * histogram[t];
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        // between-class variance scaled by n^2: (n*s0 - n0*s)^2 / (n0*n1)
        let diff = n * s0 as f64 - n0 as f64 * s;
        let var = diff * diff / (n0 as f64 * n1 as f64);
        if var > best.1 {
            best = (t as u8, var);
        }
    }
    Ok(best.0)
}

/// Grayscale as the unweighted channel mean, truncated.
#[inline]
pub fn gray(px: &image::Rgb<u8>) -> u8 {
    ((px[0] as u16 + px[1] as u16 + px[2] as u16) / 3) as u8
}

pub fn gray_histogram(image: &RgbImage) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for px in image.pixels() {
        hist[gray(px) as usize] += 1;
    }
    hist
}

/// Tissue is the darker Otsu class. A degenerate (single-intensity) image is
/// treated as background.
pub fn tissue_mask(image: &SlideImage) -> Result<TissueMask> {
    let (w, h) = image.pixels.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::EmptySlide);
    }
    let threshold = match otsu_threshold(&gray_histogram(&image.pixels)) {
        Ok(t) => t,
        Err(Error::DegenerateHistogram { .. }) => return Ok(TissueMask::filled(w, h, false)),
        Err(e) => return Err(e),
    };
    let data = image.pixels.pixels().map(|p| gray(p) <= threshold).collect();
    Ok(TissueMask {
        width: w,
        height: h,
        data,
    })
}

/// Valid window offsets along one axis: 0, stride, ... up to `len - window`.
pub fn grid_offsets(len: u32, window: u32, stride: u32) -> Vec<u32> {
    if window > len || stride == 0 {
        return Vec::new();
    }
    (0..=(len - window) / stride).map(|i| i * stride).collect()
}

struct IntegralImage {
    width: usize,
    sums: Vec<u64>,
}

impl IntegralImage {
    fn new(mask: &TissueMask) -> Self {
        let (w, h) = (mask.width as usize, mask.height as usize);
        let mut sums = vec![0u64; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0u64;
            for x in 0..w {
                row += mask.data[y * w + x] as u64;
                sums[(y + 1) * (w + 1) + x + 1] = sums[y * (w + 1) + x + 1] + row;
            }
        }
        Self { width: w, sums }
    }

    fn rect(&self, x: usize, y: usize, w: usize, h: usize) -> u64 {
        let s = |xx: usize, yy: usize| self.sums[yy * (self.width + 1) + xx];
        s(x + w, y + h) + s(x, y) - s(x + w, y) - s(x, y + h)
    }
}

/// Tiles a slide, keeping windows whose tissue fraction is at least
/// `min_tissue`. Output is row-major over the grid.
pub fn tile_slide(image: &SlideImage, config: &TilingConfig) -> Result<Vec<Patch>> {
    let mask = tissue_mask(image)?;
    tile_slide_with_mask(image, &mask, config)
}

pub fn tile_slide_with_mask(
    image: &SlideImage,
    mask: &TissueMask,
    config: &TilingConfig,
) -> Result<Vec<Patch>> {
    config.validate()?;
    let (w, h) = image.pixels.dimensions();
    if (mask.width, mask.height) != (w, h) {
        return Err(Error::ShapeMismatch {
            expected: format!("{w}x{h} mask"),
            found: format!("{}x{}", mask.width, mask.height),
        });
    }
    let window = config.window;
    if window > w || window > h {
        return Err(Error::SlideSmallerThanWindow {
            width: w,
            height: h,
            window,
        });
    }
    let integral = IntegralImage::new(mask);
    let area = (window as u64 * window as u64) as f64;
    let mut patches = Vec::new();
    for y in grid_offsets(h, window, config.stride) {
        for x in grid_offsets(w, window, config.stride) {
            let tissue = integral.rect(x as usize, y as usize, window as usize, window as usize);
            let tissue_fraction = tissue as f64 / area;
            if tissue_fraction >= config.min_tissue {
                let pixels = imageops::crop_imm(&image.pixels, x, y, window, window).to_image();
                patches.push(Patch {
                    pixels,
                    grid_col: x / config.stride,
                    grid_row: y / config.stride,
                    x,
                    y,
                    tissue_fraction,
                });
            }
        }
    }
    Ok(patches)
}

/// One row of a per-slide patch index file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchIndexRow {
    pub patch_id: String,
    pub grid_col: u32,
    pub grid_row: u32,
    pub x: u32,
    pub y: u32,
    pub window: u32,
    pub stride: u32,
    pub tissue_fraction: f64,
}

pub const PATCH_INDEX_FILE: &str = "index.csv";

/// Writes patches as `{slide_id}_x{col}_y{row}.png` plus `index.csv` into `dir`.
pub fn write_patches(
    dir: &Path,
    slide_id: &str,
    patches: &[Patch],
    stride: u32,
) -> Result<Vec<PatchIndexRow>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rows = Vec::with_capacity(patches.len());
    for p in patches {
        let name = p.name(slide_id);
        p.pixels.save(dir.join(format!("{name}.png")))?;
        rows.push(PatchIndexRow {
            patch_id: name,
            grid_col: p.grid_col,
            grid_row: p.grid_row,
            x: p.x,
            y: p.y,
            window: p.pixels.width(),
            stride,
            tissue_fraction: p.tissue_fraction,
        });
    }
    crate::io::write_csv(&dir.join(PATCH_INDEX_FILE), &rows)?;
    Ok(rows)
}
