//! Pixel-level heatmaps interpolated from patch-grid probabilities.

use image::{Rgba, RgbaImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grading::NUM_CLASSES;
use crate::model::argmax;
use crate::preprocess::TissueMask;

/// Patch probabilities on the tiling grid. Cells with no patch hold `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbGrid {
    pub rows: usize,
    pub cols: usize,
    pub stride: u32,
    pub window: u32,
    cells: Vec<Option<[f64; NUM_CLASSES]>>,
}

/// Value used for grid cells without a patch.
pub const EMPTY_CELL: [f64; NUM_CLASSES] = [1.0, 0.0, 0.0, 0.0];

impl ProbGrid {
    pub fn new(rows: usize, cols: usize, stride: u32, window: u32) -> Result<Self> {
        if rows == 0 || cols == 0 || stride == 0 || window == 0 {
            return Err(Error::InvalidConfig("probability grid must be non-empty".into()));
        }
        Ok(Self {
            rows,
            cols,
            stride,
            window,
            cells: vec![None; rows * cols],
        })
    }

    /// Builds the smallest grid holding every `(col, row, probs)` entry.
    pub fn from_patches(entries: &[(u32, u32, [f64; NUM_CLASSES])], stride: u32, window: u32) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptySlide);
        }
        let cols = entries.iter().map(|e| e.0).max().expect("non-empty") as usize + 1;
        let rows = entries.iter().map(|e| e.1).max().expect("non-empty") as usize + 1;
        let mut g = Self::new(rows, cols, stride, window)?;
        for &(c, r, p) in entries {
            g.set(r as usize, c as usize, p)?;
        }
        Ok(g)
    }

    pub fn set(&mut self, row: usize, col: usize, probs: [f64; NUM_CLASSES]) -> Result<()> {
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::NonFinite("patch probabilities must form a distribution"));
        }
        if row >= self.rows || col >= self.cols {
            return Err(Error::ShapeMismatch {
                expected: format!("cell within {}x{}", self.rows, self.cols),
                found: format!("row {row}, col {col}"),
            });
        }
        self.cells[row * self.cols + col] = Some(probs);
        Ok(())
    }

    pub fn get(&self, row: usize, col: usize) -> [f64; NUM_CLASSES] {
        self.cells[row * self.cols + col].unwrap_or(EMPTY_CELL)
    }

    pub fn has_patch(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.cols + col].is_some()
    }

    /// Width and height in slide pixels covered by the grid's patches.
    pub fn extent(&self) -> (u32, u32) {
        (
            (self.cols as u32 - 1) * self.stride + self.window,
            (self.rows as u32 - 1) * self.stride + self.window,
        )
    }

    /// Slide-pixel union of the footprints of populated cells, sampled at the
    /// same pixel centers as [`probability_map`].
    pub fn footprint_mask(&self, out_h: usize, out_w: usize) -> TissueMask {
        let (ew, eh) = self.extent();
        let mut mask = TissueMask::filled(out_w as u32, out_h as u32, false);
        for y in 0..out_h {
            let sy = (y as f64 + 0.5) * eh as f64 / out_h as f64;
            for x in 0..out_w {
                let sx = (x as f64 + 0.5) * ew as f64 / out_w as f64;
                let covered = (0..self.rows).any(|r| {
                    let y0 = (r as u32 * self.stride) as f64;
                    sy >= y0
                        && sy < y0 + self.window as f64
                        && (0..self.cols).any(|c| {
                            let x0 = (c as u32 * self.stride) as f64;
                            self.has_patch(r, c) && sx >= x0 && sx < x0 + self.window as f64
                        })
                });
                mask.set(x as u32, y as u32, covered);
            }
        }
        mask
    }
}

/// `height x width` grid of per-pixel class distributions, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<[f64; NUM_CLASSES]>,
}

impl ProbMap {
    pub fn get(&self, y: usize, x: usize) -> [f64; NUM_CLASSES] {
        self.data[y * self.width + x]
    }
}

/// Continuous grid coordinate of a slide position, clamped to the anchors.
fn grid_coord(s: f64, stride: u32, window: u32, n: usize) -> (usize, usize, f64) {
    let u = ((s - window as f64 / 2.0) / stride as f64).clamp(0.0, (n - 1) as f64);
    let i0 = u.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, u - i0 as f64)
}

/// Bilinear interpolation between patch-center anchors. Output pixel
/// `(x, y)` samples the slide at its pixel center scaled to the grid extent.
pub fn probability_map(grid: &ProbGrid, out_h: usize, out_w: usize) -> Result<ProbMap> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidConfig("output size must be >= 1".into()));
    }
    let (ew, eh) = grid.extent();
    let cols: Vec<(usize, usize, f64)> = (0..out_w)
        .map(|x| grid_coord((x as f64 + 0.5) * ew as f64 / out_w as f64, grid.stride, grid.window, grid.cols))
        .collect();
    let mut data = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (r0, r1, ty) = grid_coord(
            (y as f64 + 0.5) * eh as f64 / out_h as f64,
            grid.stride,
            grid.window,
            grid.rows,
        );
        for &(c0, c1, tx) in &cols {
            let (a, b, c, d) = (grid.get(r0, c0), grid.get(r0, c1), grid.get(r1, c0), grid.get(r1, c1));
            let mut px = [0.0; NUM_CLASSES];
            for k in 0..NUM_CLASSES {
                let top = a[k] * (1.0 - tx) + b[k] * tx;
                let bottom = c[k] * (1.0 - tx) + d[k] * tx;
                px[k] = top * (1.0 - ty) + bottom * ty;
            }
            data.push(px);
        }
    }
    Ok(ProbMap {
        height: out_h,
        width: out_w,
        data,
    })
}

/// RGB colors for GG3, GG4 and GG5 and the alpha of cancerous pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Palette {
    pub gg3: [u8; 3],
    pub gg4: [u8; 3],
    pub gg5: [u8; 3],
    pub alpha: u8,
}

impl Default for Palette {
    fn default() -> Self {
        Self {
            gg3: [0, 255, 0],
            gg4: [0, 0, 255],
            gg5: [255, 0, 0],
            // 0.45 opacity
            alpha: 115,
        }
    }
}

/// Per-pixel argmax overlay; NC and non-tissue pixels are transparent.
pub fn class_overlay(map: &ProbMap, mask: Option<&TissueMask>, palette: &Palette) -> Result<RgbaImage> {
    if let Some(m) = mask {
        if (m.width as usize, m.height as usize) != (map.width, map.height) {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{} mask", map.width, map.height),
                found: format!("{}x{}", m.width, m.height),
            });
        }
    }
    let mut img = RgbaImage::new(map.width as u32, map.height as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        if mask.is_some_and(|m| !m.get(x, y)) {
            continue;
        }
        let color = match argmax(&map.get(y as usize, x as usize)) {
            1 => palette.gg3,
            2 => palette.gg4,
            3 => palette.gg5,
            _ => continue,
        };
        *px = Rgba([color[0], color[1], color[2], palette.alpha]);
    }
    Ok(img)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbMapRow {
    pub x: usize,
    pub y: usize,
    pub p_nc: f64,
    pub p_gg3: f64,
    pub p_gg4: f64,
    pub p_gg5: f64,
}

impl ProbMap {
    pub fn rows(&self) -> Vec<ProbMapRow> {
        self.data
            .iter()
            .enumerate()
            .map(|(i, p)| ProbMapRow {
                x: i % self.width,
                y: i / self.width,
                p_nc: p[0],
                p_gg3: p[1],
                p_gg4: p[2],
                p_gg5: p[3],
            })
            .collect()
    }
}
