//! Gleason label algebra: grades, scores, Grade Groups and slide-level
//! multi-hot labels.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Number of patch-level classes (NC plus three cancerous grades).
pub const NUM_CLASSES: usize = 4;

/// Patch-level tissue class. The discriminant is the ordinal class index
/// used everywhere (probability vectors, confusion matrices, files).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GleasonGrade {
    Nc = 0,
    Gg3 = 1,
    Gg4 = 2,
    Gg5 = 3,
}

impl GleasonGrade {
    pub const ALL: [GleasonGrade; 4] = [
        GleasonGrade::Nc,
        GleasonGrade::Gg3,
        GleasonGrade::Gg4,
        GleasonGrade::Gg5,
    ];
    pub const CANCEROUS: [GleasonGrade; 3] =
        [GleasonGrade::Gg3, GleasonGrade::Gg4, GleasonGrade::Gg5];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    #[inline]
    pub fn is_cancerous(self) -> bool {
        self != GleasonGrade::Nc
    }

    /// Gleason pattern number (3, 4, 5); `None` for non-cancerous tissue.
    pub fn pattern(self) -> Option<u8> {
        match self {
            GleasonGrade::Nc => None,
            GleasonGrade::Gg3 => Some(3),
            GleasonGrade::Gg4 => Some(4),
            GleasonGrade::Gg5 => Some(5),
        }
    }

    pub fn from_pattern(pattern: u8) -> Option<Self> {
        match pattern {
            3 => Some(GleasonGrade::Gg3),
            4 => Some(GleasonGrade::Gg4),
            5 => Some(GleasonGrade::Gg5),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GleasonGrade::Nc => "NC",
            GleasonGrade::Gg3 => "GG3",
            GleasonGrade::Gg4 => "GG4",
            GleasonGrade::Gg5 => "GG5",
        }
    }
}

impl fmt::Display for GleasonGrade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GleasonGrade {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "NC" => Ok(GleasonGrade::Nc),
            "GG3" => Ok(GleasonGrade::Gg3),
            "GG4" => Ok(GleasonGrade::Gg4),
            "GG5" => Ok(GleasonGrade::Gg5),
            other => Err(Error::InvalidLabel(format!("unknown grade {other:?}"))),
        }
    }
}

/// Biopsy-level Gleason score: the two most prominent cancerous patterns,
/// or benign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GleasonScore {
    Benign,
    Cancerous {
        primary: GleasonGrade,
        secondary: GleasonGrade,
    },
}

impl GleasonScore {
    /// Every valid score: benign followed by the nine cancerous pairs.
    pub fn all() -> Vec<GleasonScore> {
        let mut out = vec![GleasonScore::Benign];
        for p in GleasonGrade::CANCEROUS {
            for s in GleasonGrade::CANCEROUS {
                out.push(GleasonScore::Cancerous {
                    primary: p,
                    secondary: s,
                });
            }
        }
        out
    }

    pub fn new(primary: GleasonGrade, secondary: GleasonGrade) -> Result<Self> {
        match (primary.is_cancerous(), secondary.is_cancerous()) {
            (false, false) => Ok(GleasonScore::Benign),
            (true, true) => Ok(GleasonScore::Cancerous { primary, secondary }),
            _ => Err(Error::InvalidLabel(format!(
                "score {primary}+{secondary} mixes benign and cancerous patterns"
            ))),
        }
    }

    /// Builds a score from pattern numbers; 0 on both sides means benign.
    pub fn from_patterns(primary: u8, secondary: u8) -> Result<Self> {
        match (primary, secondary) {
            (0, 0) => Ok(GleasonScore::Benign),
            (p, s) => {
                let primary = GleasonGrade::from_pattern(p)
                    .ok_or_else(|| Error::InvalidLabel(format!("invalid pattern {p}")))?;
                let secondary = GleasonGrade::from_pattern(s)
                    .ok_or_else(|| Error::InvalidLabel(format!("invalid pattern {s}")))?;
                Ok(GleasonScore::Cancerous { primary, secondary })
            }
        }
    }

    pub fn is_benign(self) -> bool {
        self == GleasonScore::Benign
    }

    /// (primary, secondary) pattern numbers, (0, 0) when benign.
    pub fn patterns(self) -> (u8, u8) {
        match self {
            GleasonScore::Benign => (0, 0),
            GleasonScore::Cancerous { primary, secondary } => (
                primary.pattern().unwrap_or(0),
                secondary.pattern().unwrap_or(0),
            ),
        }
    }

    pub fn sum(self) -> u8 {
        let (p, s) = self.patterns();
        p + s
    }

    /// Dense index over [`GleasonScore::all`], used as a class label.
    pub fn class_index(self) -> usize {
        match self {
            GleasonScore::Benign => 0,
            GleasonScore::Cancerous { primary, secondary } => {
                1 + (primary.index() - 1) * 3 + (secondary.index() - 1)
            }
        }
    }

    pub fn from_class_index(index: usize) -> Option<Self> {
        Self::all().get(index).copied()
    }
}

impl fmt::Display for GleasonScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (p, s) = self.patterns();
        write!(f, "{p}+{s}")
    }
}

impl FromStr for GleasonScore {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("benign") || s == "NC" {
            return Ok(GleasonScore::Benign);
        }
        let (p, q) = s
            .split_once('+')
            .ok_or_else(|| Error::InvalidLabel(format!("score {s:?} is not of the form P+S")))?;
        Self::from_patterns(parse_pattern(p)?, parse_pattern(q)?)
    }
}

/// Parses one side of a score: a pattern number, or `0`/`NC` for benign.
pub fn parse_pattern(s: &str) -> Result<u8> {
    let s = s.trim();
    if s == "NC" || s.eq_ignore_ascii_case("benign") {
        return Ok(0);
    }
    match s.parse::<u8>() {
        Ok(v @ (0 | 3 | 4 | 5)) => Ok(v),
        _ => Err(Error::InvalidLabel(format!("invalid Gleason pattern {s:?}"))),
    }
}

/// ISUP Grade Group, 0 for benign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GradeGroup(u8);

impl GradeGroup {
    pub const COUNT: usize = 6;

    pub fn new(value: u8) -> Result<Self> {
        if value <= 5 {
            Ok(GradeGroup(value))
        } else {
            Err(Error::InvalidLabel(format!("grade group {value} out of range")))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

impl fmt::Display for GradeGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for GradeGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let v = s
            .trim()
            .parse::<u8>()
            .map_err(|_| Error::InvalidLabel(format!("invalid grade group {s:?}")))?;
        GradeGroup::new(v)
    }
}

pub fn score_to_grade_group(score: GleasonScore) -> GradeGroup {
    let group = match score.patterns() {
        (0, 0) => 0,
        (3, 4) => 2,
        (4, 3) => 3,
        (p, s) => match p + s {
            0..=6 => 1,
            7 => unreachable!("7 is only reachable as 3+4 or 4+3"),
            8 => 4,
            _ => 5,
        },
    };
    GradeGroup(group)
}

/// Slide-level multi-hot presence vector over (NC, GG3, GG4, GG5).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SlideLabel {
    presence: [bool; NUM_CLASSES],
}

impl SlideLabel {
    pub fn presence(&self) -> [bool; NUM_CLASSES] {
        self.presence
    }

    pub fn contains(&self, grade: GleasonGrade) -> bool {
        self.presence[grade.index()]
    }

    pub fn is_benign(&self) -> bool {
        GleasonGrade::CANCEROUS.iter().all(|g| !self.contains(*g))
    }

    /// Targets for the three cancerous classes, in (GG3, GG4, GG5) order.
    pub fn cancerous_targets(&self) -> [f64; 3] {
        [1, 2, 3].map(|k| if self.presence[k] { 1.0 } else { 0.0 })
    }
}

pub fn slide_label_from_score(score: GleasonScore) -> SlideLabel {
    let mut presence = [true, false, false, false];
    if let GleasonScore::Cancerous { primary, secondary } = score {
        presence[primary.index()] = true;
        presence[secondary.index()] = true;
    }
    SlideLabel { presence }
}

/// Derives the score of a slide from the grades of its patches. Ties in
/// frequency resolve toward the more severe grade; a single cancerous grade
/// yields primary = secondary.
pub fn score_from_patch_labels(labels: &[GleasonGrade]) -> Result<GleasonScore> {
    if labels.is_empty() {
        return Err(Error::EmptySlide);
    }
    let mut counts = [0usize; NUM_CLASSES];
    for g in labels {
        counts[g.index()] += 1;
    }
    let mut ranked: Vec<GleasonGrade> = GleasonGrade::CANCEROUS
        .into_iter()
        .filter(|g| counts[g.index()] > 0)
        .collect();
    // descending count, then descending severity
    ranked.sort_by(|a, b| {
        counts[b.index()]
            .cmp(&counts[a.index()])
            .then(b.index().cmp(&a.index()))
    });
    Ok(match ranked.as_slice() {
        [] => GleasonScore::Benign,
        [only] => GleasonScore::Cancerous {
            primary: *only,
            secondary: *only,
        },
        [first, second, ..] => GleasonScore::Cancerous {
            primary: *first,
            secondary: *second,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use GleasonGrade::*;

    fn score(p: u8, s: u8) -> GleasonScore {
        GleasonScore::from_patterns(p, s).unwrap()
    }

    #[test]
    fn grade_group_table() {
        assert_eq!(score_to_grade_group(score(3, 4)).value(), 2);
        assert_eq!(score_to_grade_group(score(4, 3)).value(), 3);
        assert_eq!(score_to_grade_group(GleasonScore::Benign).value(), 0);
        // ISUP 2014 lookup
        let table = [
            ((3, 3), 1),
            ((3, 4), 2),
            ((4, 3), 3),
            ((4, 4), 4),
            ((3, 5), 4),
            ((5, 3), 4),
            ((4, 5), 5),
            ((5, 4), 5),
            ((5, 5), 5),
        ];
        for ((p, s), gg) in table {
            assert_eq!(score_to_grade_group(score(p, s)).value(), gg, "{p}+{s}");
        }
    }

    #[test]
    fn grade_group_monotone_except_seven_split() {
        let all = GleasonScore::all();
        assert_eq!(all.len(), 10);
        for a in &all {
            for b in &all {
                if a.sum() < b.sum() {
                    assert!(score_to_grade_group(*a) <= score_to_grade_group(*b));
                }
            }
            assert!(slide_label_from_score(*a)
                .presence()
                .iter()
                .skip(1)
                .filter(|p| **p)
                .count()
                <= 2);
        }
    }

    #[test]
    fn slide_labels() {
        assert_eq!(
            slide_label_from_score(score(3, 5)).presence(),
            [true, true, false, true]
        );
        assert_eq!(
            slide_label_from_score(GleasonScore::Benign).presence(),
            [true, false, false, false]
        );
        assert_eq!(
            slide_label_from_score(score(4, 4)).presence(),
            [true, false, true, false]
        );
    }

    #[test]
    fn scores_from_patch_labels() {
        let mut m = vec![Gg3; 6];
        m.extend([Gg4; 3]);
        m.extend([Nc; 10]);
        assert_eq!(score_from_patch_labels(&m).unwrap(), score(3, 4));
        assert_eq!(
            score_from_patch_labels(&[Nc; 5]).unwrap(),
            GleasonScore::Benign
        );
        let tie = [Gg4, Gg4, Gg4, Gg5, Gg5, Gg5];
        assert_eq!(score_from_patch_labels(&tie).unwrap(), score(5, 4));
        assert_eq!(score_from_patch_labels(&[Nc, Gg4]).unwrap(), score(4, 4));
        assert!(matches!(
            score_from_patch_labels(&[]),
            Err(Error::EmptySlide)
        ));
    }

    #[test]
    fn text_forms() {
        for g in GleasonGrade::ALL {
            assert_eq!(g.to_string().parse::<GleasonGrade>().unwrap(), g);
        }
        for s in GleasonScore::all() {
            assert_eq!(s.to_string().parse::<GleasonScore>().unwrap(), s);
            assert_eq!(GleasonScore::from_class_index(s.class_index()), Some(s));
        }
        assert_eq!("3+4".parse::<GleasonScore>().unwrap(), score(3, 4));
        assert!("3+0".parse::<GleasonScore>().is_err());
        assert!("6".parse::<GleasonScore>().is_err());
        assert!(GleasonScore::new(Nc, Gg3).is_err());
        assert!(GradeGroup::new(6).is_err());
    }

    proptest::proptest! {
        #[test]
        fn round_trip_presence(n3 in 0usize..20, n4 in 0usize..20, n5 in 0usize..20, nc in 0usize..20, pick in 0usize..3) {
            // at most two cancerous grades with distinct counts
            let mut counts = [n3, n4, n5];
            counts[pick] = 0;
            let nonzero: Vec<usize> = counts.iter().copied().filter(|c| *c > 0).collect();
            proptest::prop_assume!(nonzero.len() < 2 || nonzero[0] != nonzero[1]);
            proptest::prop_assume!(nc + counts.iter().sum::<usize>() > 0);
            let mut m = vec![Nc; nc];
            for (g, c) in GleasonGrade::CANCEROUS.iter().zip(counts) {
                m.extend(std::iter::repeat_n(*g, c));
            }
            let label = slide_label_from_score(score_from_patch_labels(&m).unwrap());
            for (g, c) in GleasonGrade::CANCEROUS.iter().zip(counts) {
                proptest::prop_assert_eq!(label.contains(*g), c > 0);
            }
            proptest::prop_assert!(label.contains(Nc));
        }
    }
}
