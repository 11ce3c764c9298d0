//! Channel-wise histogram matching to a reference image.

use std::path::Path;

use image::RgbImage;

use crate::error::{Error, Result};
use crate::preprocess::SlideImage;

/// Per-channel cumulative intensity distributions of a reference image.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceProfile {
    cdf: [[f64; 256]; 3],
}

fn channel_cdfs(image: &RgbImage) -> [[f64; 256]; 3] {
    let mut counts = [[0u64; 256]; 3];
    for px in image.pixels() {
        for c in 0..3 {
            counts[c][px[c] as usize] += 1;
        }
    }
    let total = (image.width() as u64 * image.height() as u64) as f64;
    let mut cdf = [[0.0; 256]; 3];
    for c in 0..3 {
        let mut acc = 0u64;
        for v in 0..256 {
            acc += counts[c][v];
            cdf[c][v] = acc as f64 / total;
        }
    }
    cdf
}

impl ReferenceProfile {
    pub fn cdf(&self, channel: usize) -> &[f64; 256] {
        &self.cdf[channel]
    }

    pub fn from_cdfs(cdf: [[f64; 256]; 3]) -> Result<Self> {
        for channel in &cdf {
            let monotone = channel.windows(2).all(|w| w[0] <= w[1]);
            if !monotone || channel[255] != 1.0 || channel[0] < 0.0 {
                return Err(Error::InvalidConfig(
                    "reference CDF must be nondecreasing and end at 1.0".into(),
                ));
            }
        }
        Ok(Self { cdf })
    }

    /// Three lines of 256 whitespace-separated values, one per channel.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for channel in &self.cdf {
            let line: Vec<String> = channel.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cdf = [[0.0; 256]; 3];
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        for (c, channel) in cdf.iter_mut().enumerate() {
            let line = lines
                .next()
                .ok_or_else(|| Error::InvalidConfig(format!("profile missing channel {c}")))?;
            let values: Vec<f64> = line
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidConfig(format!("profile channel {c}: {e}")))?;
            if values.len() != 256 {
                return Err(Error::InvalidConfig(format!(
                    "profile channel {c} has {} values, expected 256",
                    values.len()
                )));
            }
            channel.copy_from_slice(&values);
        }
        Self::from_cdfs(cdf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_string(path, &self.to_text())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Reads a reference image, or a profile saved with [`Self::save`].
    pub fn from_path(path: &Path) -> Result<Self> {
        match image::open(path) {
            Ok(img) => build_reference(&SlideImage::new("reference", img.to_rgb8())),
            Err(_) => Self::load(path),
        }
    }
}

pub fn build_reference(image: &SlideImage) -> Result<ReferenceProfile> {
    if image.width() == 0 || image.height() == 0 {
        return Err(Error::EmptySlide);
    }
    Ok(ReferenceProfile {
        cdf: channel_cdfs(&image.pixels),
    })
}

/// Lookup tables mapping each source intensity to the smallest reference
/// intensity whose CDF reaches the source CDF.
pub fn matching_tables(source: &RgbImage, reference: &ReferenceProfile) -> [[u8; 256]; 3] {
    let src = channel_cdfs(source);
    let mut tables = [[0u8; 256]; 3];
    for c in 0..3 {
        let refc = &reference.cdf[c];
        let mut u = 0usize;
        for v in 0..256 {
            // source CDF is nondecreasing, so the search can resume from u
            while u < 255 && refc[u] < src[c][v] {
                u += 1;
            }
            tables[c][v] = u as u8;
        }
    }
    tables
}

pub fn histogram_match(image: &SlideImage, reference: &ReferenceProfile) -> SlideImage {
    let tables = matching_tables(&image.pixels, reference);
    let mut out = image.pixels.clone();
    for px in out.pixels_mut() {
        for c in 0..3 {
            px[c] = tables[c][px[c] as usize];
        }
    }
    SlideImage::new(image.id.clone(), out)
}

/// Stain normalization stage. Structure-preserving methods plug in here
/// after (or instead of) histogram matching.
pub trait StainNormalizer: Send + Sync {
    fn normalize(&self, image: &SlideImage) -> SlideImage;
}

#[derive(Debug, Clone)]
pub struct HistogramMatcher {
    pub reference: ReferenceProfile,
}

impl StainNormalizer for HistogramMatcher {
    fn normalize(&self, image: &SlideImage) -> SlideImage {
        histogram_match(image, &self.reference)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use proptest::prelude::*;

    fn img(w: u32, h: u32, f: impl Fn(u32, u32) -> [u8; 3]) -> SlideImage {
        SlideImage::new("t", RgbImage::from_fn(w, h, |x, y| Rgb(f(x, y))))
    }

    #[test]
    fn constant_reference_is_a_step() {
        let p = build_reference(&img(4, 4, |_, _| [128; 3])).unwrap();
        for c in 0..3 {
            for v in 0..256 {
                assert_eq!(p.cdf(c)[v], if v >= 128 { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn uniform_image_has_linear_cdf() {
        let p = build_reference(&img(256, 1, |x, _| [x as u8; 3])).unwrap();
        for v in 0..256 {
            assert!((p.cdf(1)[v] - (v + 1) as f64 / 256.0).abs() < 1e-15);
        }
    }

    #[test]
    fn cdf_matches_counting() {
        let image = img(17, 13, |x, y| {
            [(x * 31 + y * 7) as u8, (x * y) as u8, (x ^ y) as u8 * 9]
        });
        let p = build_reference(&image).unwrap();
        for c in 0..3 {
            for v in 0..256usize {
                let below = image.pixels.pixels().filter(|px| px[c] as usize <= v).count();
                assert_eq!(p.cdf(c)[v], below as f64 / (17.0 * 13.0));
            }
        }
    }

    #[test]
    fn self_match_is_identity() {
        let image = img(256, 2, |x, y| [x as u8, 255 - x as u8, (x as u8).wrapping_add(y as u8)]);
        let p = build_reference(&image).unwrap();
        assert_eq!(histogram_match(&image, &p).pixels, image.pixels);
    }

    #[test]
    fn constant_to_constant() {
        let p = build_reference(&img(3, 3, |_, _| [200; 3])).unwrap();
        let out = histogram_match(&img(5, 5, |_, _| [50; 3]), &p);
        assert!(out.pixels.pixels().all(|px| px.0 == [200; 3]));
    }

    #[test]
    fn two_level_match() {
        let p = build_reference(&img(2, 1, |x, _| [if x == 0 { 100 } else { 200 }; 3])).unwrap();
        let out = histogram_match(&img(4, 1, |x, _| [if x < 2 { 0 } else { 255 }; 3]), &p);
        let values: Vec<u8> = out.pixels.pixels().map(|px| px[0]).collect();
        assert_eq!(values, vec![100, 100, 200, 200]);
    }

    #[test]
    fn text_round_trip() {
        let image = img(9, 7, |x, y| [(x * 13) as u8, (y * 29) as u8, (x + y) as u8]);
        let p = build_reference(&image).unwrap();
        assert_eq!(ReferenceProfile::from_text(&p.to_text()).unwrap(), p);
        assert!(ReferenceProfile::from_text("1 2 3").is_err());
    }

    fn arb_image() -> impl Strategy<Value = SlideImage> {
        (1u32..12, 1u32..12, 0u8..=255, 1u8..=255).prop_flat_map(|(w, h, lo, span)| {
            proptest::collection::vec(any::<[u8; 3]>(), (w * h) as usize).prop_map(move |data| {
                img(w, h, |x, y| {
                    data[(y * w + x) as usize].map(|v| lo.saturating_add(v % span))
                })
            })
        })
    }

    proptest! {
        #[test]
        fn matching_is_monotone_and_idempotent(src in arb_image(), reference in arb_image()) {
            let p = build_reference(&reference).unwrap();
            let tables = matching_tables(&src.pixels, &p);
            for t in &tables {
                prop_assert!(t.windows(2).all(|w| w[0] <= w[1]));
            }
            let once = histogram_match(&src, &p);
            let twice = histogram_match(&once, &p);
            prop_assert_eq!(once.pixels, twice.pixels);
        }
    }
}
