//! In-memory slides (bags of patches) and their on-disk manifest.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grading::{slide_label_from_score, GleasonGrade, GleasonScore, SlideLabel};
use crate::preprocess::{PatchIndexRow, PATCH_INDEX_FILE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidLabel(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PatchRecord {
    pub id: String,
    pub grid_col: u32,
    pub grid_row: u32,
    pub pixels: RgbImage,
}

/// A slide as a bag of patch instances.
#[derive(Debug, Clone)]
pub struct Slide {
    pub id: String,
    pub score: GleasonScore,
    pub label: SlideLabel,
    pub split: Split,
    pub patches: Vec<PatchRecord>,
}

impl Slide {
    pub fn new(id: impl Into<String>, score: GleasonScore, split: Split, patches: Vec<PatchRecord>) -> Self {
        Self {
            id: id.into(),
            score,
            label: slide_label_from_score(score),
            split,
            patches,
        }
    }
}

/// Manifest row as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub slide_id: String,
    pub path: String,
    pub gleason_primary: String,
    pub gleason_secondary: String,
    pub split: String,
}

/// Validated manifest entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub slide_id: String,
    /// Patch directory or slide image, resolved against the manifest's directory.
    pub path: PathBuf,
    pub score: GleasonScore,
    pub split: Split,
}

impl ManifestEntry {
    pub fn to_row(&self, base: &Path) -> ManifestRow {
        let (p, s) = self.score.patterns();
        let path = self.path.strip_prefix(base).unwrap_or(&self.path);
        ManifestRow {
            slide_id: self.slide_id.clone(),
            path: path.to_string_lossy().into_owned(),
            gleason_primary: p.to_string(),
            gleason_secondary: s.to_string(),
            split: self.split.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new(""));
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::Reader::from_reader(file);
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, record) in reader.deserialize::<ManifestRow>().enumerate() {
            let row_no = i + 1;
            let bad = |message: String| Error::Manifest {
                path: path.to_path_buf(),
                row: row_no,
                message,
            };
            let row = record.map_err(|e| bad(e.to_string()))?;
            if row.slide_id.is_empty() {
                return Err(bad("empty slide_id".into()));
            }
            if !seen.insert(row.slide_id.clone()) {
                return Err(bad(format!("duplicate slide_id {}", row.slide_id)));
            }
            let p = crate::grading::parse_pattern(&row.gleason_primary).map_err(|e| bad(e.to_string()))?;
            let s = crate::grading::parse_pattern(&row.gleason_secondary).map_err(|e| bad(e.to_string()))?;
            let score = GleasonScore::from_patterns(p, s).map_err(|e| bad(e.to_string()))?;
            let split = row.split.parse().map_err(|e: Error| bad(e.to_string()))?;
            entries.push(ManifestEntry {
                slide_id: row.slide_id,
                path: base.join(&row.path),
                score,
                split,
            });
        }
        Ok(Self { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        let rows: Vec<ManifestRow> = self.entries.iter().map(|e| e.to_row(base)).collect();
        if rows.is_empty() {
            // header-only manifest
            crate::io::ensure_parent(path)?;
            let mut w = csv::Writer::from_path(path)?;
            w.write_record(["slide_id", "path", "gleason_primary", "gleason_secondary", "split"])?;
            w.flush().map_err(|e| Error::io(path, e))?;
            return Ok(());
        }
        crate::io::write_csv(path, &rows)
    }
}

/// Loads the patches of one slide from a directory holding `index.csv` and
/// the PNG files it lists.
pub fn load_patch_dir(dir: &Path) -> Result<Vec<PatchRecord>> {
    let index: Vec<PatchIndexRow> = crate::io::read_csv(&dir.join(PATCH_INDEX_FILE))?;
    index
        .into_iter()
        .map(|row| {
            let file = dir.join(format!("{}.png", row.patch_id));
            let pixels = image::open(&file)
                .map_err(|e| Error::format(&file, e.to_string()))?
                .to_rgb8();
            Ok(PatchRecord {
                id: row.patch_id,
                grid_col: row.grid_col,
                grid_row: row.grid_row,
                pixels,
            })
        })
        .collect()
}

pub fn load_slides(manifest: &Manifest) -> Result<Vec<Slide>> {
    use rayon::prelude::*;
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let patches = load_patch_dir(&e.path)?;
            Ok(Slide::new(e.slide_id.clone(), e.score, e.split, patches))
        })
        .collect()
}

/// Patch-level ground truth, written only by the synthetic generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthRow {
    pub slide_id: String,
    pub patch_id: String,
    pub true_grade: String,
}

impl TruthRow {
    pub fn grade(&self) -> Result<GleasonGrade> {
        self.true_grade.parse()
    }
}
