//! Seeded synthetic slides with known patch grades.
//!
//! Each grade has its own spatial texture (GG3: sparse small rings, GG4:
//! fused blob clusters, GG5: dense speckle) drawn in a shared stain palette.
//! NC tissue has two looks, stroma (smooth low-frequency field) and benign
//! glands (one large thick ring), mixed differently in benign and cancerous
//! slides. Per-patch hue, amplitude and noise jitter make the classes
//! overlap in color.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Manifest, ManifestEntry, PatchRecord, Slide, Split, TruthRow};
use crate::error::{Error, Result};
use crate::grading::{score_from_patch_labels, GleasonGrade, GleasonScore, NUM_CLASSES};
use crate::preprocess::{patch_name, write_patches, Patch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextureConfig {
    /// Std-dev of additive per-channel pixel noise (0-255 scale).
    pub noise_std: f64,
    /// Half-width of the uniform per-patch hue jitter (0-255 scale).
    pub hue_jitter: f64,
    /// Relative half-width of the per-patch structure amplitude jitter.
    pub amplitude_jitter: f64,
    /// Blend of every patch toward the class-agnostic mean texture, in [0, 1).
    pub blend: f64,
}

impl Default for TextureConfig {
    fn default() -> Self {
        Self {
            noise_std: 10.0,
            hue_jitter: 14.0,
            amplitude_jitter: 0.3,
            blend: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_slides: usize,
    pub instances_min: usize,
    pub instances_max: usize,
    pub patch_side: u32,
    /// Sampling weights over the ten scores in [`GleasonScore::all`] order.
    pub score_prior: Vec<f64>,
    /// Range of the NC fraction in cancerous slides.
    pub nc_fraction: [f64; 2],
    /// Probability that an NC patch is stroma rather than a benign gland,
    /// in benign and in cancerous slides.
    pub stroma_share: [f64; 2],
    /// Range of the secondary grade's share of cancerous patches in
    /// two-grade slides.
    pub secondary_share: [f64; 2],
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub texture: TextureConfig,
    /// Global RGB offset applied to every patch.
    pub color_shift: Option<[i16; 3]>,
    /// Also write each slide as one stitched image on a white background.
    pub slide_images: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_slides: 250,
            instances_min: 16,
            instances_max: 64,
            patch_side: 32,
            score_prior: vec![0.25, 0.15, 0.12, 0.04, 0.10, 0.10, 0.07, 0.04, 0.07, 0.06],
            nc_fraction: [0.2, 0.6],
            stroma_share: [0.25, 0.85],
            secondary_share: [0.15, 0.45],
            val_fraction: 0.0,
            test_fraction: 0.2,
            texture: TextureConfig::default(),
            color_shift: None,
            slide_images: false,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.instances_min < 4 || self.instances_max < self.instances_min {
            return bad(format!(
                "synth instance range {}..={} must satisfy 4 <= min <= max",
                self.instances_min, self.instances_max
            ));
        }
        if self.patch_side < 8 {
            return bad("synth.patch_side must be >= 8".into());
        }
        if self.score_prior.len() != 10
            || self.score_prior.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || self.score_prior.iter().sum::<f64>() <= 0.0
        {
            return bad("synth.score_prior needs ten nonnegative weights with positive sum".into());
        }
        for (name, [lo, hi]) in [("nc_fraction", self.nc_fraction), ("secondary_share", self.secondary_share)] {
            if !(0.0 <= lo && lo <= hi && hi < 1.0) {
                return bad(format!("synth.{name} must satisfy 0 <= lo <= hi < 1"));
            }
        }
        if self.secondary_share[1] >= 0.5 {
            return bad("synth.secondary_share must stay below 0.5".into());
        }
        if !(0.0..=1.0).contains(&self.val_fraction)
            || !(0.0..=1.0).contains(&self.test_fraction)
            || self.val_fraction + self.test_fraction > 1.0
        {
            return bad("synth split fractions must lie in [0, 1] and sum to <= 1".into());
        }
        if !self.stroma_share.iter().all(|p| (0.0..=1.0).contains(p)) {
            return bad("synth stroma_share entries must lie in [0, 1]".into());
        }
        let t = &self.texture;
        if !(t.noise_std >= 0.0 && t.hue_jitter >= 0.0 && t.amplitude_jitter >= 0.0 && t.amplitude_jitter < 1.0)
        {
            return bad("synth.texture jitters must be >= 0 and amplitude_jitter < 1".into());
        }
        if !(0.0..1.0).contains(&t.blend) {
            return bad("synth.texture.blend must lie in [0, 1)".into());
        }
        Ok(())
    }

    /// Split of slide `index`: the last slides form the test split, the ones
    /// before them validation.
    pub fn split_of(&self, index: usize) -> Split {
        let n = self.n_slides;
        let n_test = (n as f64 * self.test_fraction).round() as usize;
        let n_val = (n as f64 * self.val_fraction).round() as usize;
        if index >= n.saturating_sub(n_test) {
            Split::Test
        } else if index >= n.saturating_sub(n_test + n_val) {
            Split::Val
        } else {
            Split::Train
        }
    }
}

/// Seed of slide `index` derived from the dataset seed.
pub fn slide_seed(seed: u64, index: usize) -> u64 {
    let mut x = seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(index as u64 + 1));
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

const TISSUE: [f64; 3] = [232.0, 178.0, 206.0];
const NUCLEI: [f64; 3] = [96.0, 52.0, 136.0];

/// Mean RGB offset of each class before jitter.
const CLASS_HUE: [[f64; 3]; NUM_CLASSES] = [
    [6.0, 4.0, -4.0],
    [0.0, 0.0, 0.0],
    [-4.0, -2.0, 4.0],
    [-8.0, -4.0, 8.0],
];

fn gauss(d2: f64, sigma: f64) -> f64 {
    (-d2 / (2.0 * sigma * sigma)).exp()
}

/// What a patch depicts. NC tissue comes in two looks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Appearance {
    Stroma,
    BenignGland,
    Tumor(GleasonGrade),
}

impl Appearance {
    pub fn grade(self) -> GleasonGrade {
        match self {
            Appearance::Stroma | Appearance::BenignGland => GleasonGrade::Nc,
            Appearance::Tumor(g) => g,
        }
    }

    fn into_texture(self) -> Texture {
        match self {
            Appearance::BenignGland => Texture::BenignGland,
            a => Texture::Grade(a.grade()),
        }
    }
}

impl From<GleasonGrade> for Appearance {
    /// NC maps to stroma.
    fn from(g: GleasonGrade) -> Self {
        match g {
            GleasonGrade::Nc => Appearance::Stroma,
            g => Appearance::Tumor(g),
        }
    }
}

/// Structure intensity in [0, 1] for one appearance.
fn structure(appearance: Appearance, side: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = side as f64;
    let mut t = vec![0.0; side * side];
    let at = |x: usize, y: usize| y * side + x;
    match appearance.into_texture() {
        Texture::BenignGland => {
            let cx = rng.random_range(0.4 * s..0.6 * s);
            let cy = rng.random_range(0.4 * s..0.6 * s);
            let r = rng.random_range(0.3 * s..0.38 * s);
            for y in 0..side {
                for x in 0..side {
                    let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                    t[at(x, y)] = 0.1 + 0.6 * gauss((d - r).powi(2), 0.12 * s);
                }
            }
        }
        Texture::Grade(GleasonGrade::Nc) => {
            let waves: Vec<(f64, f64, f64, f64)> = (0..3)
                .map(|_| {
                    let period = rng.random_range(0.8..2.0) * s;
                    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    let k = std::f64::consts::TAU / period;
                    (k * angle.cos(), k * angle.sin(), rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.05..0.12))
                })
                .collect();
            for y in 0..side {
                for x in 0..side {
                    let v: f64 = waves
                        .iter()
                        .map(|(kx, ky, ph, a)| a * (kx * x as f64 + ky * y as f64 + ph).sin())
                        .sum();
                    t[at(x, y)] = 0.18 + v;
                }
            }
        }
        Texture::Grade(GleasonGrade::Gg3) => {
            let rings = rng.random_range(2..=3);
            for _ in 0..rings {
                let cx = rng.random_range(0.2 * s..0.8 * s);
                let cy = rng.random_range(0.2 * s..0.8 * s);
                let r = rng.random_range(0.14 * s..0.24 * s);
                for y in 0..side {
                    for x in 0..side {
                        let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                        t[at(x, y)] += 0.75 * gauss((d - r).powi(2), 0.045 * s);
                    }
                }
            }
            t.iter_mut().for_each(|v| *v += 0.08);
        }
        Texture::Grade(GleasonGrade::Gg4) => {
            let cx = rng.random_range(0.3 * s..0.7 * s);
            let cy = rng.random_range(0.3 * s..0.7 * s);
            let blobs = rng.random_range(6..=10);
            for _ in 0..blobs {
                let bx = cx + rng.random_range(-0.3 * s..0.3 * s);
                let by = cy + rng.random_range(-0.3 * s..0.3 * s);
                let sigma = rng.random_range(0.07 * s..0.12 * s);
                for y in 0..side {
                    for x in 0..side {
                        let d2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
                        t[at(x, y)] += 0.45 * gauss(d2, sigma);
                    }
                }
            }
            t.iter_mut().for_each(|v| *v += 0.1);
        }
        Texture::Grade(GleasonGrade::Gg5) => {
            let density = rng.random_range(0.2..0.35);
            for v in t.iter_mut() {
                *v = 0.12 + if rng.random_bool(density) { 0.6 } else { 0.0 };
            }
        }
    }
    t.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    t
}

enum Texture {
    BenignGland,
    Grade(GleasonGrade),
}

/// One patch image of the given appearance.
pub fn generate_patch(
    appearance: Appearance,
    side: u32,
    texture: &TextureConfig,
    color_shift: Option<[i16; 3]>,
    rng: &mut ChaCha8Rng,
) -> RgbImage {
    let n = side as usize;
    let grade = appearance.grade();
    let mut t = structure(appearance, n, rng);
    if texture.blend > 0.0 {
        // pull toward a flat field of the average structure level
        t.iter_mut().for_each(|v| *v = (1.0 - texture.blend) * *v + texture.blend * 0.3);
    }
    let amp = 1.0 + rng.random_range(-1.0..=1.0) * texture.amplitude_jitter;
    let hue: [f64; 3] = std::array::from_fn(|c| {
        CLASS_HUE[grade.index()][c] + rng.random_range(-1.0..=1.0) * texture.hue_jitter
    });
    let shift = color_shift.unwrap_or([0; 3]);
    let noise = Normal::new(0.0, texture.noise_std.max(1e-12)).expect("valid std");
    RgbImage::from_fn(side, side, |x, y| {
        let v = (t[y as usize * n + x as usize] * amp).clamp(0.0, 1.0);
        Rgb(std::array::from_fn(|c| {
            let base = TISSUE[c] * (1.0 - v) + NUCLEI[c] * v + hue[c] + shift[c] as f64;
            let e = if texture.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
            (base + e).round().clamp(0.0, 255.0) as u8
        }))
    })
}

pub fn sample_score(prior: &[f64], rng: &mut ChaCha8Rng) -> GleasonScore {
    let total: f64 = prior.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (i, w) in prior.iter().enumerate() {
        if u < *w {
            return GleasonScore::all()[i];
        }
        u -= w;
    }
    // floating-point remainder lands on the last positive weight
    let last = prior.iter().rposition(|w| *w > 0.0).expect("positive prior");
    GleasonScore::all()[last]
}

/// Patch grades of one slide, in grid order.
pub fn sample_grades(
    score: GleasonScore,
    n: usize,
    config: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<GleasonGrade>> {
    let mut grades = match score {
        GleasonScore::Benign => vec![GleasonGrade::Nc; n],
        GleasonScore::Cancerous { primary, secondary } => {
            if n < 4 {
                return Err(Error::InvalidConfig(format!(
                    "{n} patches cannot hold score {score}"
                )));
            }
            let [lo, hi] = config.nc_fraction;
            let nc_frac = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let n_nc = ((nc_frac * n as f64).round() as usize).min(n - 3);
            let n_cancer = n - n_nc;
            let n_sec = if primary == secondary {
                0
            } else {
                let [lo, hi] = config.secondary_share;
                let share = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                // primary strictly outnumbers secondary, secondary >= 1
                ((share * n_cancer as f64).round() as usize).clamp(1, (n_cancer - 1) / 2)
            };
            let mut g = vec![GleasonGrade::Nc; n_nc];
            g.extend(std::iter::repeat_n(secondary, n_sec));
            g.extend(std::iter::repeat_n(primary, n_cancer - n_sec));
            g
        }
    };
    grades.shuffle(rng);
    Ok(grades)
}

/// A generated slide with the true grade of each patch (same order).
#[derive(Debug, Clone)]
pub struct SynthSlide {
    pub slide: Slide,
    pub truth: Vec<GleasonGrade>,
}

fn grid_cols(n: usize) -> u32 {
    (n as f64).sqrt().ceil() as u32
}

pub fn generate_slide(
    id: &str,
    score: GleasonScore,
    n: usize,
    split: Split,
    config: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SynthSlide> {
    let grades = sample_grades(score, n, config, rng)?;
    let cols = grid_cols(n);
    let stroma = config.stroma_share[usize::from(!score.is_benign())];
    let patches = grades
        .iter()
        .enumerate()
        .map(|(i, &g)| {
            let (col, row) = (i as u32 % cols, i as u32 / cols);
            let look = match g {
                GleasonGrade::Nc if !rng.random_bool(stroma) => Appearance::BenignGland,
                g => Appearance::from(g),
            };
            PatchRecord {
                id: patch_name(id, col, row),
                grid_col: col,
                grid_row: row,
                pixels: generate_patch(look, config.patch_side, &config.texture, config.color_shift, rng),
            }
        })
        .collect();
    debug_assert_eq!(score_from_patch_labels(&grades).ok(), Some(score));
    Ok(SynthSlide {
        slide: Slide::new(id, score, split, patches),
        truth: grades,
    })
}

/// Generates slide `index` of a dataset.
pub fn generate_indexed_slide(config: &SynthConfig, index: usize) -> Result<SynthSlide> {
    let mut rng = ChaCha8Rng::seed_from_u64(slide_seed(config.seed, index));
    let score = sample_score(&config.score_prior, &mut rng);
    let n = rng.random_range(config.instances_min..=config.instances_max);
    generate_slide(&format!("slide_{index:04}"), score, n, config.split_of(index), config, &mut rng)
}

/// Every slide of the dataset in memory.
pub fn generate_slides(config: &SynthConfig) -> Result<Vec<SynthSlide>> {
    config.validate()?;
    (0..config.n_slides)
        .into_par_iter()
        .map(|i| generate_indexed_slide(config, i))
        .collect()
}

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const IMAGE_MANIFEST_FILE: &str = "manifest_images.csv";
pub const TRUTH_FILE: &str = "truth.csv";

/// Paths written by [`generate_dataset`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetFiles {
    pub manifest: PathBuf,
    pub truth: PathBuf,
    pub image_manifest: Option<PathBuf>,
}

/// Stitches the patches of a slide on a white background.
pub fn stitch_slide(slide: &Slide, side: u32) -> RgbImage {
    let cols = slide.patches.iter().map(|p| p.grid_col).max().unwrap_or(0) + 1;
    let rows = slide.patches.iter().map(|p| p.grid_row).max().unwrap_or(0) + 1;
    let mut img = RgbImage::from_pixel(cols * side, rows * side, Rgb([255, 255, 255]));
    for p in &slide.patches {
        image::imageops::replace(
            &mut img,
            &p.pixels,
            (p.grid_col * side) as i64,
            (p.grid_row * side) as i64,
        );
    }
    img
}

/// Writes the manifest, one patch directory per slide, and the truth file.
pub fn generate_dataset(config: &SynthConfig, out: &Path) -> Result<DatasetFiles> {
    let slides = generate_slides(config)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let side = config.patch_side;
    slides.par_iter().try_for_each(|s| -> Result<()> {
        let patches: Vec<Patch> = s
            .slide
            .patches
            .iter()
            .map(|p| Patch {
                pixels: p.pixels.clone(),
                grid_col: p.grid_col,
                grid_row: p.grid_row,
                x: p.grid_col * side,
                y: p.grid_row * side,
                tissue_fraction: 1.0,
            })
            .collect();
        let dir = out.join("slides").join(&s.slide.id);
        write_patches(&dir, &s.slide.id, &patches, side)?;
        if config.slide_images {
            let images = out.join("images");
            std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
            stitch_slide(&s.slide, side).save(images.join(format!("{}.png", s.slide.id)))?;
        }
        Ok(())
    })?;

    let manifest_path = out.join(MANIFEST_FILE);
    let entry = |s: &SynthSlide, path: PathBuf| ManifestEntry {
        slide_id: s.slide.id.clone(),
        path,
        score: s.slide.score,
        split: s.slide.split,
    };
    Manifest {
        entries: slides
            .iter()
            .map(|s| entry(s, out.join("slides").join(&s.slide.id)))
            .collect(),
    }
    .write(&manifest_path)?;
    let image_manifest = if config.slide_images {
        let p = out.join(IMAGE_MANIFEST_FILE);
        Manifest {
            entries: slides
                .iter()
                .map(|s| entry(s, out.join("images").join(format!("{}.png", s.slide.id))))
                .collect(),
        }
        .write(&p)?;
        Some(p)
    } else {
        None
    };

    let truth: Vec<TruthRow> = slides
        .iter()
        .flat_map(|s| {
            s.slide.patches.iter().zip(&s.truth).map(|(p, g)| TruthRow {
                slide_id: s.slide.id.clone(),
                patch_id: p.id.clone(),
                true_grade: g.to_string(),
            })
        })
        .collect();
    let truth_path = out.join(TRUTH_FILE);
    if truth.is_empty() {
        crate::io::write_string(&truth_path, "slide_id,patch_id,true_grade\n")?;
    } else {
        crate::io::write_csv(&truth_path, &truth)?;
    }
    Ok(DatasetFiles {
        manifest: manifest_path,
        truth: truth_path,
        image_manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grading::{score_to_grade_group, slide_label_from_score};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn patches_are_deterministic_and_class_dependent() {
        let t = TextureConfig::default();
        for g in GleasonGrade::ALL {
            let a = generate_patch(g.into(), 32, &t, None, &mut rng(5));
            let b = generate_patch(g.into(), 32, &t, None, &mut rng(5));
            assert_eq!(a, b);
        }
        let a = generate_patch(GleasonGrade::Gg3.into(), 32, &t, None, &mut rng(5));
        let b = generate_patch(GleasonGrade::Gg5.into(), 32, &t, None, &mut rng(5));
        assert_ne!(a, b);
    }

    #[test]
    fn benign_slide_is_all_nc() {
        let cfg = SynthConfig::default();
        let s = generate_slide("b", GleasonScore::Benign, 20, Split::Train, &cfg, &mut rng(1)).unwrap();
        assert!(s.truth.iter().all(|g| *g == GleasonGrade::Nc));
        assert!(s.slide.label.is_benign());
    }

    #[test]
    fn mixture_constraint() {
        let cfg = SynthConfig::default();
        let score = GleasonScore::from_patterns(3, 4).unwrap();
        for seed in 0..50 {
            let g = sample_grades(score, 20, &cfg, &mut rng(seed)).unwrap();
            let n3 = g.iter().filter(|x| **x == GleasonGrade::Gg3).count();
            let n4 = g.iter().filter(|x| **x == GleasonGrade::Gg4).count();
            assert!(n3 > n4 && n4 >= 1, "{n3} {n4}");
            assert_eq!(n3 + n4 + g.iter().filter(|x| **x == GleasonGrade::Nc).count(), 20);
        }
        assert!(sample_grades(score, 3, &cfg, &mut rng(0)).is_err());
    }

    #[test]
    fn labels_are_consistent_for_every_score_and_size() {
        let cfg = SynthConfig::default();
        for score in GleasonScore::all() {
            for n in 4..70 {
                let g = sample_grades(score, n, &cfg, &mut rng(n as u64)).unwrap();
                assert_eq!(g.len(), n);
                assert_eq!(score_from_patch_labels(&g).unwrap(), score, "n={n}");
            }
        }
    }

    #[test]
    fn grade_group_histogram_follows_prior() {
        // 3-sigma multinomial bounds per Grade Group over 100 slides
        let cfg = SynthConfig {
            n_slides: 100,
            ..SynthConfig::default()
        };
        let n = cfg.n_slides as f64;
        let total: f64 = cfg.score_prior.iter().sum();
        let mut expected = [0.0; 6];
        for (s, w) in GleasonScore::all().into_iter().zip(&cfg.score_prior) {
            expected[score_to_grade_group(s).value() as usize] += w / total;
        }
        let mut counts = [0usize; 6];
        for i in 0..cfg.n_slides {
            let mut r = rng(slide_seed(cfg.seed, i));
            counts[score_to_grade_group(sample_score(&cfg.score_prior, &mut r)).value() as usize] += 1;
        }
        for g in 0..6 {
            let mu = n * expected[g];
            let sigma = (n * expected[g] * (1.0 - expected[g])).sqrt();
            assert!(
                (counts[g] as f64 - mu).abs() <= 3.0 * sigma,
                "GG{g}: {} vs {mu}",
                counts[g]
            );
        }
    }

    /// Nearest-centroid classification on mean patch color. The accuracy is
    /// a property of the generator: color alone must not separate the
    /// classes, yet it carries some signal.
    #[test]
    fn mean_color_is_only_weakly_informative() {
        let cfg = SynthConfig::default();
        let mean_color = |img: &RgbImage| -> [f64; 3] {
            let mut m = [0.0; 3];
            for p in img.pixels() {
                for c in 0..3 {
                    m[c] += p[c] as f64;
                }
            }
            m.map(|v| v / (img.width() * img.height()) as f64)
        };
        let sample = |seed: u64| -> Vec<(usize, [f64; 3])> {
            let mut r = rng(seed);
            (0..800)
                .map(|i| {
                    let g = GleasonGrade::ALL[i % 4];
                    (g.index(), mean_color(&generate_patch(g.into(), 32, &cfg.texture, None, &mut r)))
                })
                .collect()
        };
        let train = sample(1);
        let mut centroids = [[0.0; 3]; 4];
        for (c, m) in &train {
            for k in 0..3 {
                centroids[*c][k] += m[k] / 200.0;
            }
        }
        let test = sample(2);
        let correct = test
            .iter()
            .filter(|(c, m)| {
                let d = |k: usize| -> f64 { (0..3).map(|j| (m[j] - centroids[k][j]).powi(2)).sum() };
                (0..4).min_by(|a, b| d(*a).total_cmp(&d(*b))).unwrap() == *c
            })
            .count();
        let acc = correct as f64 / test.len() as f64;
        assert!(acc > 0.3 && acc < 0.9, "nearest-centroid accuracy {acc}");
    }

    #[test]
    fn dataset_round_trips_through_loader() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_slides: 6,
            instances_min: 4,
            instances_max: 9,
            patch_side: 8,
            test_fraction: 0.34,
            slide_images: true,
            seed: 3,
            ..SynthConfig::default()
        };
        let files = generate_dataset(&cfg, dir.path()).unwrap();
        let manifest = Manifest::read(&files.manifest).unwrap();
        assert_eq!(manifest.entries.len(), 6);
        assert_eq!(manifest.entries.iter().filter(|e| e.split == Split::Test).count(), 2);
        let slides = crate::data::load_slides(&manifest).unwrap();
        let mem = generate_slides(&cfg).unwrap();
        let truth: Vec<TruthRow> = crate::io::read_csv(&files.truth).unwrap();
        for (disk, m) in slides.iter().zip(&mem) {
            assert_eq!(disk.id, m.slide.id);
            assert_eq!(disk.score, m.slide.score);
            assert_eq!(disk.label, slide_label_from_score(m.slide.score));
            for (a, b) in disk.patches.iter().zip(&m.slide.patches) {
                assert_eq!(a.id, b.id);
                assert_eq!(a.pixels, b.pixels);
            }
            let grades: Vec<GleasonGrade> = truth
                .iter()
                .filter(|t| t.slide_id == disk.id)
                .map(|t| t.grade().unwrap())
                .collect();
            assert_eq!(score_from_patch_labels(&grades).unwrap(), disk.score);
        }
        assert!(files.image_manifest.is_some());
        assert!(Manifest::read(files.image_manifest.as_ref().unwrap()).is_ok());

        // same seed, byte-identical files
        let dir2 = tempfile::tempdir().unwrap();
        let files2 = generate_dataset(&cfg, dir2.path()).unwrap();
        assert_eq!(
            std::fs::read(&files.truth).unwrap(),
            std::fs::read(&files2.truth).unwrap()
        );
        let first = &manifest.entries[0].slide_id;
        let p = format!("slides/{first}/{first}_x0_y0.png");
        assert_eq!(
            std::fs::read(dir.path().join(&p)).unwrap(),
            std::fs::read(dir2.path().join(&p)).unwrap()
        );
    }

    #[test]
    fn empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_slides: 0,
            ..SynthConfig::default()
        };
        let files = generate_dataset(&cfg, dir.path()).unwrap();
        assert!(Manifest::read(&files.manifest).unwrap().entries.is_empty());
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            SynthConfig {
                instances_min: 2,
                ..SynthConfig::default()
            },
            SynthConfig {
                score_prior: vec![1.0; 3],
                ..SynthConfig::default()
            },
            SynthConfig {
                secondary_share: [0.2, 0.6],
                ..SynthConfig::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        }
    }
}
