use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grading::{GleasonGrade, SlideLabel, NUM_CLASSES};
use crate::model::argmax;

/// Refined hard pseudo-label of a patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RefinedLabel {
    Grade(GleasonGrade),
    Discard,
}

impl RefinedLabel {
    pub fn grade(self) -> Option<GleasonGrade> {
        match self {
            RefinedLabel::Grade(g) => Some(g),
            RefinedLabel::Discard => None,
        }
    }
}

impl fmt::Display for RefinedLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RefinedLabel::Grade(g) => g.fmt(f),
            RefinedLabel::Discard => f.write_str("DISCARD"),
        }
    }
}

impl FromStr for RefinedLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "DISCARD" => Ok(RefinedLabel::Discard),
            other => other.parse().map(RefinedLabel::Grade),
        }
    }
}

/// Teacher output for one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherPrediction {
    pub slide_id: String,
    pub patch_id: String,
    pub probs: [f64; NUM_CLASSES],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelRecord {
    pub slide_id: String,
    pub patch_id: String,
    pub teacher_probs: [f64; NUM_CLASSES],
    pub refined: RefinedLabel,
}

/// CSV form of a [`PseudoLabelRecord`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelRow {
    pub slide_id: String,
    pub patch_id: String,
    pub p_nc: f64,
    pub p_gg3: f64,
    pub p_gg4: f64,
    pub p_gg5: f64,
    pub refined: String,
}

impl From<&PseudoLabelRecord> for PseudoLabelRow {
    fn from(r: &PseudoLabelRecord) -> Self {
        let [p_nc, p_gg3, p_gg4, p_gg5] = r.teacher_probs;
        Self {
            slide_id: r.slide_id.clone(),
            patch_id: r.patch_id.clone(),
            p_nc,
            p_gg3,
            p_gg4,
            p_gg5,
            refined: r.refined.to_string(),
        }
    }
}

impl TryFrom<PseudoLabelRow> for PseudoLabelRecord {
    type Error = Error;

    fn try_from(r: PseudoLabelRow) -> Result<Self> {
        Ok(Self {
            refined: r.refined.parse()?,
            teacher_probs: [r.p_nc, r.p_gg3, r.p_gg4, r.p_gg5],
            slide_id: r.slide_id,
            patch_id: r.patch_id,
        })
    }
}

/// The refinement rule for one patch: benign slides yield NC, cancerous
/// slides keep a predicted grade only when the slide contains it, and
/// everything else is discarded.
pub fn refine_one(probs: &[f64; NUM_CLASSES], label: &SlideLabel) -> RefinedLabel {
    if label.is_benign() {
        return RefinedLabel::Grade(GleasonGrade::Nc);
    }
    let predicted = GleasonGrade::ALL[argmax(probs)];
    if predicted.is_cancerous() && label.contains(predicted) {
        RefinedLabel::Grade(predicted)
    } else {
        RefinedLabel::Discard
    }
}

pub fn refine_labels(
    predictions: &[TeacherPrediction],
    labels: &HashMap<String, SlideLabel>,
) -> Result<Vec<PseudoLabelRecord>> {
    predictions
        .iter()
        .map(|p| {
            let label = labels
                .get(&p.slide_id)
                .ok_or_else(|| Error::MissingSlideLabel(p.slide_id.clone()))?;
            Ok(PseudoLabelRecord {
                slide_id: p.slide_id.clone(),
                patch_id: p.patch_id.clone(),
                teacher_probs: p.probs,
                refined: refine_one(&p.probs, label),
            })
        })
        .collect()
}
