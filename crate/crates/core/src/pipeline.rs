//! Stage functions shared by the command line and the end-to-end tests.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::data::{load_patch_dir, Manifest, ManifestEntry, Slide, Split};
use crate::error::{Error, Result};
use crate::grading::{score_to_grade_group, GleasonGrade, GleasonScore, GradeGroup, SlideLabel};
use crate::heatmap::{class_overlay, probability_map, Palette, ProbGrid, ProbMap};
use crate::metrics::{EvaluationReport, GRADE_GROUP_NAMES, PATCH_CLASS_NAMES};
use crate::model::{predict_images, ModelParameters, Prediction};
use crate::preprocess::{
    tile_slide, tissue_mask, write_patches, PatchIndexRow, SlideImage, TilingConfig, PATCH_INDEX_FILE,
};
use crate::selflearn::{refine_labels, PseudoLabelRecord, PseudoLabelRow, TeacherPrediction};
use crate::slide_score::{
    grade_percentages, slide_embedding, soft_grade_percentages, Descriptor, ScoringConfig,
    ScoringMethod, SlideClassifier,
};
use crate::stain::{matching_tables, ReferenceProfile};

/// Features and predictions for every patch of one slide.
#[derive(Debug, Clone)]
pub struct SlideInference {
    pub slide_id: String,
    pub patch_ids: Vec<String>,
    pub grid: Vec<(u32, u32)>,
    pub features: Vec<Vec<f64>>,
    pub preds: Vec<Prediction>,
}

pub fn infer_slide(params: &ModelParameters, slide: &Slide) -> Result<SlideInference> {
    let images: Vec<&RgbImage> = slide.patches.iter().map(|p| &p.pixels).collect();
    let out = predict_images(params, &images)?;
    let (features, preds) = out.into_iter().unzip();
    Ok(SlideInference {
        slide_id: slide.id.clone(),
        patch_ids: slide.patches.iter().map(|p| p.id.clone()).collect(),
        grid: slide.patches.iter().map(|p| (p.grid_col, p.grid_row)).collect(),
        features,
        preds,
    })
}

pub fn infer_slides(params: &ModelParameters, slides: &[Slide]) -> Result<Vec<SlideInference>> {
    slides.iter().map(|s| infer_slide(params, s)).collect()
}

pub fn teacher_predictions(inference: &[SlideInference]) -> Vec<TeacherPrediction> {
    inference
        .iter()
        .flat_map(|s| {
            s.patch_ids.iter().zip(&s.preds).map(|(id, p)| TeacherPrediction {
                slide_id: s.slide_id.clone(),
                patch_id: id.clone(),
                probs: p.probs,
            })
        })
        .collect()
}

/// Teacher inference on `slides` followed by label refinement.
pub fn pseudo_label(params: &ModelParameters, slides: &[Slide]) -> Result<Vec<PseudoLabelRecord>> {
    let inference = infer_slides(params, slides)?;
    let labels: HashMap<String, SlideLabel> = slides.iter().map(|s| (s.id.clone(), s.label)).collect();
    refine_labels(&teacher_predictions(&inference), &labels)
}

pub fn write_pseudo_labels(path: &Path, records: &[PseudoLabelRecord]) -> Result<()> {
    let rows: Vec<PseudoLabelRow> = records.iter().map(PseudoLabelRow::from).collect();
    write_rows(path, &rows, "slide_id,patch_id,p_nc,p_gg3,p_gg4,p_gg5,refined")
}

pub fn read_pseudo_labels(path: &Path) -> Result<Vec<PseudoLabelRecord>> {
    crate::io::read_csv::<PseudoLabelRow>(path)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            PseudoLabelRecord::try_from(r)
                .map_err(|e| Error::format(path, format!("row {}: {e}", i + 1)))
        })
        .collect()
}

/// Writes rows, or only `header` when there are none.
fn write_rows<T: Serialize>(path: &Path, rows: &[T], header: &str) -> Result<()> {
    if rows.is_empty() {
        crate::io::write_string(path, &format!("{header}\n"))
    } else {
        crate::io::write_csv(path, rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchPredictionRow {
    pub slide_id: String,
    pub patch_id: String,
    pub pred_grade: String,
    pub p_nc: f64,
    pub p_gg3: f64,
    pub p_gg4: f64,
    pub p_gg5: f64,
}

pub fn patch_prediction_rows(inference: &[SlideInference]) -> Vec<PatchPredictionRow> {
    inference
        .iter()
        .flat_map(|s| {
            s.patch_ids.iter().zip(&s.preds).map(|(id, p)| PatchPredictionRow {
                slide_id: s.slide_id.clone(),
                patch_id: id.clone(),
                pred_grade: p.grade().to_string(),
                p_nc: p.probs[0],
                p_gg3: p.probs[1],
                p_gg4: p.probs[2],
                p_gg5: p.probs[3],
            })
        })
        .collect()
}

pub fn write_patch_predictions(path: &Path, rows: &[PatchPredictionRow]) -> Result<()> {
    write_rows(path, rows, "slide_id,patch_id,pred_grade,p_nc,p_gg3,p_gg4,p_gg5")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub slide_id: String,
    pub true_score: String,
    pub pred_score: String,
    pub true_gg: u8,
    pub pred_gg: u8,
}

pub fn write_scores(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    write_rows(path, rows, "slide_id,true_score,pred_score,true_gg,pred_gg")
}

pub fn slide_descriptor(inference: &SlideInference, descriptor: Descriptor, soft: bool) -> Result<Vec<f64>> {
    match descriptor {
        Descriptor::Features => slide_embedding(&inference.features),
        Descriptor::GradePercentages if soft => Ok(soft_grade_percentages(&inference.preds)?.to_vec()),
        Descriptor::GradePercentages => {
            let grades: Vec<GleasonGrade> = inference.preds.iter().map(|p| p.grade()).collect();
            Ok(grade_percentages(&grades)?.to_vec())
        }
    }
}

/// Fits score and Grade Group classifiers on the train split and predicts
/// every val/test slide. `inference` and `slides` are aligned.
pub fn score_slides(
    inference: &[SlideInference],
    slides: &[Slide],
    method: ScoringMethod,
    config: &ScoringConfig,
) -> Result<Vec<ScoreRow>> {
    if inference.len() != slides.len() {
        return Err(Error::LengthMismatch {
            left: inference.len(),
            right: slides.len(),
        });
    }
    let descriptors: Vec<Vec<f64>> = inference
        .iter()
        .map(|i| slide_descriptor(i, method.descriptor, config.soft_percentages))
        .collect::<Result<_>>()?;
    let train: Vec<usize> = (0..slides.len()).filter(|&i| slides[i].split == Split::Train).collect();
    let by_score: Vec<(Vec<f64>, usize)> = train
        .iter()
        .map(|&i| (descriptors[i].clone(), slides[i].score.class_index()))
        .collect();
    let by_gg: Vec<(Vec<f64>, usize)> = train
        .iter()
        .map(|&i| (descriptors[i].clone(), score_to_grade_group(slides[i].score).value() as usize))
        .collect();
    let score_model = SlideClassifier::fit(method.classifier, &by_score, config)?;
    let gg_model = SlideClassifier::fit(method.classifier, &by_gg, config)?;
    (0..slides.len())
        .filter(|&i| slides[i].split != Split::Train)
        .map(|i| {
            let s = &slides[i];
            let pred_score = GleasonScore::from_class_index(score_model.predict(&descriptors[i])?)
                .expect("score classes come from training labels");
            Ok(ScoreRow {
                slide_id: s.id.clone(),
                true_score: s.score.to_string(),
                pred_score: pred_score.to_string(),
                true_gg: score_to_grade_group(s.score).value(),
                pred_gg: gg_model.predict(&descriptors[i])? as u8,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalLevel {
    Patch,
    Slide,
}

/// Reads `(key, label)` pairs from a CSV with headers. The key joins the
/// `key_cols`; the label is the first present column of `label_cols`.
fn read_labels(path: &Path, key_cols: &[&str], label_cols: &[&str]) -> Result<Vec<(String, String)>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let keys: Vec<usize> = key_cols
        .iter()
        .map(|k| col(k).ok_or_else(|| Error::format(path, format!("missing column {k}"))))
        .collect::<Result<_>>()?;
    let label = label_cols.iter().find_map(|c| col(c)).ok_or_else(|| {
        Error::format(path, format!("needs one of the columns {}", label_cols.join(", ")))
    })?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, format!("row {}: {e}", i + 1)))?;
        let key = keys.iter().map(|&k| &rec[k]).collect::<Vec<_>>().join("/");
        out.push((key, rec[label].to_string()));
    }
    Ok(out)
}

fn parse_slide_label(path: &Path, text: &str) -> Result<usize> {
    if let Ok(g) = text.parse::<GradeGroup>() {
        return Ok(g.value() as usize);
    }
    text.parse::<GleasonScore>()
        .map(|s| score_to_grade_group(s).value() as usize)
        .map_err(|_| Error::format(path, format!("invalid slide label {text:?}")))
}

fn slide_truth_labels(path: &Path) -> Result<Vec<(String, String)>> {
    match read_labels(path, &["slide_id"], &["true_gg", "pred_gg"]) {
        Ok(rows) => Ok(rows),
        Err(Error::Format { .. }) => {
            // a manifest: derive Grade Groups from the score columns
            let m = Manifest::read(path)?;
            Ok(m.entries
                .iter()
                .map(|e| (e.slide_id.clone(), score_to_grade_group(e.score).value().to_string()))
                .collect())
        }
        Err(e) => Err(e),
    }
}

/// Joins predictions with ground truth and computes the report. Every
/// predicted item must have a truth entry.
pub fn evaluate_files(pred: &Path, truth: &Path, level: EvalLevel) -> Result<EvaluationReport> {
    let (preds, truths) = match level {
        EvalLevel::Patch => (
            read_labels(pred, &["slide_id", "patch_id"], &["pred_grade", "true_grade"])?,
            read_labels(truth, &["slide_id", "patch_id"], &["true_grade", "pred_grade"])?,
        ),
        EvalLevel::Slide => (
            read_labels(pred, &["slide_id"], &["pred_gg", "true_gg"])?,
            slide_truth_labels(truth)?,
        ),
    };
    let truth_map: HashMap<&str, &str> = truths.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
    let parse = |path: &Path, text: &str| -> Result<usize> {
        match level {
            EvalLevel::Patch => text
                .parse::<GleasonGrade>()
                .map(|g| g.index())
                .map_err(|_| Error::format(path, format!("invalid grade {text:?}"))),
            EvalLevel::Slide => parse_slide_label(path, text),
        }
    };
    let mut y_true = Vec::with_capacity(preds.len());
    let mut y_pred = Vec::with_capacity(preds.len());
    for (key, p) in &preds {
        let t = truth_map
            .get(key.as_str())
            .ok_or_else(|| Error::format(truth, format!("no ground truth for {key}")))?;
        y_true.push(parse(truth, t)?);
        y_pred.push(parse(pred, p)?);
    }
    let names: &[&str] = match level {
        EvalLevel::Patch => &PATCH_CLASS_NAMES,
        EvalLevel::Slide => &GRADE_GROUP_NAMES,
    };
    EvaluationReport::compute(&y_true, &y_pred, names)
}

pub fn write_report(path: &Path, report: &EvaluationReport) -> Result<PathBuf> {
    write_rows(path, &report.rows(), "metric,value")?;
    let text_path = path.with_extension("txt");
    crate::io::write_string(&text_path, &report.text())?;
    Ok(text_path)
}

/// Patch evaluation on in-memory inference against known grades.
pub fn evaluate_inference(
    inference: &[SlideInference],
    truth: &HashMap<(String, String), GleasonGrade>,
) -> Result<EvaluationReport> {
    let mut y_true = Vec::new();
    let mut y_pred = Vec::new();
    for s in inference {
        for (id, p) in s.patch_ids.iter().zip(&s.preds) {
            let t = truth
                .get(&(s.slide_id.clone(), id.clone()))
                .ok_or_else(|| Error::InvalidLabel(format!("no ground truth for {}/{id}", s.slide_id)))?;
            y_true.push(t.index());
            y_pred.push(p.argmax());
        }
    }
    EvaluationReport::compute(&y_true, &y_pred, &PATCH_CLASS_NAMES)
}

/// Window and stride recorded in a patch directory's index.
pub fn patch_geometry(dir: &Path) -> Result<(u32, u32)> {
    let rows: Vec<PatchIndexRow> = crate::io::read_csv(&dir.join(PATCH_INDEX_FILE))?;
    let first = rows.first().ok_or(Error::EmptySlide)?;
    Ok((first.window, first.stride))
}

/// Probability map and overlay of one slide at `scale` output pixels per
/// slide pixel. The overlay mask is the union of patch footprints.
pub fn slide_heatmap(
    params: &ModelParameters,
    slide: &Slide,
    window: u32,
    stride: u32,
    scale: f64,
) -> Result<(ProbMap, image::RgbaImage)> {
    let inference = infer_slide(params, slide)?;
    let entries: Vec<(u32, u32, [f64; 4])> = inference
        .grid
        .iter()
        .zip(&inference.preds)
        .map(|(&(c, r), p)| (c, r, p.probs))
        .collect();
    let grid = ProbGrid::from_patches(&entries, stride, window)?;
    let (w, h) = grid.extent();
    let out_w = ((w as f64 * scale).round() as usize).max(1);
    let out_h = ((h as f64 * scale).round() as usize).max(1);
    let map = probability_map(&grid, out_h, out_w)?;
    let mask = grid.footprint_mask(out_h, out_w);
    let overlay = class_overlay(&map, Some(&mask), &Palette::default())?;
    Ok((map, overlay))
}

fn entry_with_path(e: &ManifestEntry, path: PathBuf) -> ManifestEntry {
    ManifestEntry {
        slide_id: e.slide_id.clone(),
        path,
        score: e.score,
        split: e.split,
    }
}

/// Tiles every slide image of a manifest into `out/<slide_id>/` and writes
/// `out/manifest.csv` pointing at the patch directories.
pub fn tile_manifest(manifest: &Manifest, config: &TilingConfig, out: &Path) -> Result<PathBuf> {
    config.validate()?;
    let mut entries = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let pixels = image::open(&e.path)
            .map_err(|err| Error::format(&e.path, err.to_string()))?
            .to_rgb8();
        let slide = SlideImage::new(e.slide_id.clone(), pixels);
        let patches = tile_slide(&slide, config)?;
        let dir = out.join(&e.slide_id);
        write_patches(&dir, &e.slide_id, &patches, config.stride)?;
        entries.push(entry_with_path(e, dir));
    }
    let path = out.join("manifest.csv");
    Manifest { entries }.write(&path)?;
    Ok(path)
}

/// Debug helper kept public for the tiling command: the tissue mask of an image.
pub fn mask_of(image: &SlideImage) -> Result<crate::preprocess::TissueMask> {
    tissue_mask(image)
}

fn apply_tables(img: &mut RgbImage, tables: &[[u8; 256]; 3]) {
    for px in img.pixels_mut() {
        for c in 0..3 {
            px[c] = tables[c][px[c] as usize];
        }
    }
}

/// Histogram-matches every slide to `reference`. Patch directories are
/// matched with one table per slide computed over all of its patches.
pub fn normalize_manifest(manifest: &Manifest, reference: &ReferenceProfile, out: &Path) -> Result<PathBuf> {
    let mut entries = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        if e.path.is_dir() {
            let patches = load_patch_dir(&e.path)?;
            let (w, h) = patches.first().map(|p| p.pixels.dimensions()).ok_or(Error::EmptySlide)?;
            let mut stacked = RgbImage::new(w, h * patches.len() as u32);
            for (i, p) in patches.iter().enumerate() {
                image::imageops::replace(&mut stacked, &p.pixels, 0, (i as u32 * h) as i64);
            }
            let tables = matching_tables(&stacked, reference);
            let dir = out.join(&e.slide_id);
            std::fs::create_dir_all(&dir).map_err(|err| Error::io(&dir, err))?;
            for p in &patches {
                let mut px = p.pixels.clone();
                apply_tables(&mut px, &tables);
                px.save(dir.join(format!("{}.png", p.id)))?;
            }
            std::fs::copy(e.path.join(PATCH_INDEX_FILE), dir.join(PATCH_INDEX_FILE))
                .map_err(|err| Error::io(&dir, err))?;
            entries.push(entry_with_path(e, dir));
        } else {
            let mut px = image::open(&e.path)
                .map_err(|err| Error::format(&e.path, err.to_string()))?
                .to_rgb8();
            let tables = matching_tables(&px, reference);
            apply_tables(&mut px, &tables);
            let file = out.join(format!("{}.png", e.slide_id));
            crate::io::ensure_parent(&file)?;
            px.save(&file)?;
            entries.push(entry_with_path(e, file));
        }
    }
    let path = out.join("manifest.csv");
    Manifest { entries }.write(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, SynthConfig};

    fn small() -> SynthConfig {
        SynthConfig {
            n_slides: 8,
            instances_min: 4,
            instances_max: 6,
            patch_side: 8,
            test_fraction: 0.25,
            slide_images: true,
            seed: 2,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn evaluating_truth_against_itself_is_perfect() {
        let dir = tempfile::tempdir().unwrap();
        let files = generate_dataset(&small(), dir.path()).unwrap();
        let r = evaluate_files(&files.truth, &files.truth, EvalLevel::Patch).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.kappa, Some(1.0));
        let r = evaluate_files(&files.manifest, &files.manifest, EvalLevel::Slide);
        // a manifest has no GG columns on the prediction side
        assert!(r.is_err());
    }

    #[test]
    fn tiling_and_normalizing_synthetic_images() {
        let dir = tempfile::tempdir().unwrap();
        let files = generate_dataset(&small(), dir.path()).unwrap();
        let images = Manifest::read(files.image_manifest.as_ref().unwrap()).unwrap();
        let cfg = TilingConfig {
            window: 8,
            stride: 8,
            min_tissue: 0.5,
        };
        let tiled = tile_manifest(&images, &cfg, &dir.path().join("tiles")).unwrap();
        let tiled = Manifest::read(&tiled).unwrap();
        let original = Manifest::read(&files.manifest).unwrap();
        let mut kept = 0;
        for (t, o) in tiled.entries.iter().zip(&original.entries) {
            let a = load_patch_dir(&t.path).unwrap();
            let b = load_patch_dir(&o.path).unwrap();
            // tiles land on the stitched grid, so each one is an original patch
            assert!(a.len() <= b.len(), "{}", t.slide_id);
            kept += a.len();
            for p in &a {
                let q = b.iter().find(|q| (q.grid_col, q.grid_row) == (p.grid_col, p.grid_row));
                assert_eq!(q.map(|q| &q.pixels), Some(&p.pixels), "{}", p.id);
            }
        }
        assert!(kept > 0);

        let reference = crate::stain::build_reference(&SlideImage::new(
            "ref",
            image::open(&images.entries[0].path).unwrap().to_rgb8(),
        ))
        .unwrap();
        let normed = normalize_manifest(&original, &reference, &dir.path().join("norm")).unwrap();
        let normed = Manifest::read(&normed).unwrap();
        assert_eq!(normed.entries.len(), original.entries.len());
        assert!(load_patch_dir(&normed.entries[0].path).is_ok());
        let normed_img = normalize_manifest(&images, &reference, &dir.path().join("norm_img")).unwrap();
        assert!(Manifest::read(&normed_img).unwrap().entries[0].path.is_file());
    }
}
