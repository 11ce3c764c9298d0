//! Ordinal and per-class evaluation metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes() + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn row_sum(&self, i: usize) -> u64 {
        (0..self.classes()).map(|j| self.get(i, j)).sum()
    }

    fn col_sum(&self, j: usize) -> u64 {
        (0..self.classes()).map(|i| self.get(i, j)).sum()
    }
}

pub fn confusion(y_true: &[usize], y_pred: &[usize], class_names: &[&str]) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::LengthMismatch {
            left: y_true.len(),
            right: y_pred.len(),
        });
    }
    if y_true.is_empty() {
        return Err(Error::EmptyDataset("no labels to evaluate".into()));
    }
    let k = class_names.len();
    let mut counts = vec![0u64; k * k];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        for label in [t, p] {
            if label >= k {
                return Err(Error::LabelOutOfRange { label, classes: k });
            }
        }
        counts[t * k + p] += 1;
    }
    Ok(ConfusionMatrix {
        class_names: class_names.iter().map(|s| s.to_string()).collect(),
        counts,
    })
}

/// Quadratic-weighted Cohen's kappa.
pub fn quadratic_kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let k = cm.classes();
    let n = cm.total() as f64;
    if n == 0.0 || k < 2 {
        return Err(Error::KappaUndefined);
    }
    let norm = ((k - 1) * (k - 1)) as f64;
    let rows: Vec<f64> = (0..k).map(|i| cm.row_sum(i) as f64 / n).collect();
    let cols: Vec<f64> = (0..k).map(|j| cm.col_sum(j) as f64 / n).collect();
    let (mut observed, mut expected) = (0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            let w = ((i as f64 - j as f64).powi(2)) / norm;
            observed += w * cm.get(i, j) as f64 / n;
            expected += w * rows[i] * cols[j];
        }
    }
    if expected == 0.0 {
        return Err(Error::KappaUndefined);
    }
    Ok(1.0 - observed / expected)
}

pub fn accuracy(cm: &ConfusionMatrix) -> f64 {
    let diag: u64 = (0..cm.classes()).map(|i| cm.get(i, i)).sum();
    diag as f64 / cm.total() as f64
}

/// Per-class F1 (0 when precision + recall is 0) and the macro average.
pub fn per_class_f1(cm: &ConfusionMatrix) -> (Vec<f64>, f64) {
    let f1: Vec<f64> = (0..cm.classes())
        .map(|c| {
            let tp = cm.get(c, c) as f64;
            let predicted = cm.col_sum(c) as f64;
            let actual = cm.row_sum(c) as f64;
            let p = if predicted > 0.0 { tp / predicted } else { 0.0 };
            let r = if actual > 0.0 { tp / actual } else { 0.0 };
            if p + r > 0.0 {
                2.0 * p * r / (p + r)
            } else {
                0.0
            }
        })
        .collect();
    let macro_f1 = f1.iter().sum::<f64>() / f1.len() as f64;
    (f1, macro_f1)
}

/// Which side of the cancer / non-cancer split counts as positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositiveClass {
    Cancerous,
    NonCancerous,
}

/// `None` marks a zero denominator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinaryMetrics {
    pub precision: Option<f64>,
    pub sensitivity: Option<f64>,
}

/// Binary precision and sensitivity; label 0 is non-cancerous and every
/// other label cancerous.
pub fn binary_cancer_metrics(
    y_true: &[usize],
    y_pred: &[usize],
    positive: PositiveClass,
) -> Result<BinaryMetrics> {
    if y_true.len() != y_pred.len() {
        return Err(Error::LengthMismatch {
            left: y_true.len(),
            right: y_pred.len(),
        });
    }
    if y_true.is_empty() {
        return Err(Error::EmptyDataset("no labels to evaluate".into()));
    }
    let is_pos = |l: usize| match positive {
        PositiveClass::Cancerous => l != 0,
        PositiveClass::NonCancerous => l == 0,
    };
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (&t, &p) in y_true.iter().zip(y_pred) {
        match (is_pos(t), is_pos(p)) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => {}
        }
    }
    let ratio = |a: u64, b: u64| (a + b > 0).then(|| a as f64 / (a + b) as f64);
    Ok(BinaryMetrics {
        precision: ratio(tp, fp),
        sensitivity: ratio(tp, fn_),
    })
}

pub const PATCH_CLASS_NAMES: [&str; 4] = ["NC", "GG3", "GG4", "GG5"];
pub const GRADE_GROUP_NAMES: [&str; 6] = ["GG0", "GG1", "GG2", "GG3", "GG4", "GG5"];

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub n: usize,
    pub class_names: Vec<String>,
    pub accuracy: f64,
    pub f1: Vec<f64>,
    pub macro_f1: f64,
    /// `None` when kappa is undefined for this label set.
    pub kappa: Option<f64>,
    pub cancer: BinaryMetrics,
    pub non_cancer: BinaryMetrics,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportRow {
    pub metric: String,
    pub value: String,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"))
}

impl EvaluationReport {
    pub fn compute(y_true: &[usize], y_pred: &[usize], class_names: &[&str]) -> Result<Self> {
        let cm = confusion(y_true, y_pred, class_names)?;
        let (f1, macro_f1) = per_class_f1(&cm);
        let kappa = match quadratic_kappa(&cm) {
            Ok(k) => Some(k),
            Err(Error::KappaUndefined) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            n: y_true.len(),
            class_names: cm.class_names.clone(),
            accuracy: accuracy(&cm),
            f1,
            macro_f1,
            kappa,
            cancer: binary_cancer_metrics(y_true, y_pred, PositiveClass::Cancerous)?,
            non_cancer: binary_cancer_metrics(y_true, y_pred, PositiveClass::NonCancerous)?,
        })
    }

    pub fn rows(&self) -> Vec<ReportRow> {
        let row = |metric: String, value: String| ReportRow { metric, value };
        let mut out = vec![
            row("n".into(), self.n.to_string()),
            row("accuracy".into(), format!("{:.6}", self.accuracy)),
        ];
        for (name, f) in self.class_names.iter().zip(&self.f1) {
            out.push(row(format!("f1_{name}"), format!("{f:.6}")));
        }
        out.push(row("f1_macro".into(), format!("{:.6}", self.macro_f1)));
        out.push(row("kappa".into(), fmt_opt(self.kappa)));
        out.push(row("cancer_precision".into(), fmt_opt(self.cancer.precision)));
        out.push(row("cancer_sensitivity".into(), fmt_opt(self.cancer.sensitivity)));
        out.push(row("nc_precision".into(), fmt_opt(self.non_cancer.precision)));
        out.push(row("nc_sensitivity".into(), fmt_opt(self.non_cancer.sensitivity)));
        out
    }

    pub fn text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n = {}", self.n);
        let _ = write!(s, "{:>8}", "ACC");
        for name in &self.class_names {
            let _ = write!(s, " {:>8}", format!("F1 {name}"));
        }
        let _ = writeln!(s, " {:>8} {:>9} {:>9} {:>9}", "F1 avg", "kappa", "C sens", "C prec");
        let _ = write!(s, "{:>8.4}", self.accuracy);
        for f in &self.f1 {
            let _ = write!(s, " {f:>8.4}");
        }
        let opt = |v: Option<f64>| v.map_or_else(|| "undefined".into(), |x| format!("{x:.4}"));
        let _ = writeln!(
            s,
            " {:>8.4} {:>9} {:>9} {:>9}",
            self.macro_f1,
            opt(self.kappa),
            opt(self.cancer.sensitivity),
            opt(self.cancer.precision)
        );
        let _ = writeln!(
            s,
            "non-cancerous as positive: sensitivity {} precision {}",
            opt(self.non_cancer.sensitivity),
            opt(self.non_cancer.precision)
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names(k: usize) -> Vec<&'static str> {
        ["a", "b", "c", "d", "e", "f"][..k].to_vec()
    }

    fn kappa(t: &[usize], p: &[usize], k: usize) -> Result<f64> {
        quadratic_kappa(&confusion(t, p, &names(k))?)
    }

    #[test]
    fn confusion_examples() {
        let cm = confusion(&[0, 1], &[0, 1], &names(2)).unwrap();
        assert_eq!((cm.get(0, 0), cm.get(1, 1), cm.get(0, 1), cm.get(1, 0)), (1, 1, 0, 0));
        let cm = confusion(&[0], &[1], &names(2)).unwrap();
        assert_eq!(cm.get(0, 1), 1);
        assert_eq!(cm.total(), 1);
        assert!(matches!(
            confusion(&[0, 1], &[0], &names(2)),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            confusion(&[0], &[2], &names(2)),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(kappa(&[0, 1, 2, 2], &[0, 1, 2, 2], 3).unwrap(), 1.0);
        assert!((kappa(&[0, 1, 2], &[0, 2, 1], 3).unwrap() - 0.5).abs() < 1e-12);
        assert!((kappa(&[0, 1], &[1, 0], 2).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(kappa(&[1, 1], &[1, 1], 3), Err(Error::KappaUndefined)));
    }

    /// Item-level oracle: observed disagreement averages the weight over
    /// matched pairs, expected disagreement over every (truth, prediction)
    /// cross pair.
    fn kappa_oracle(t: &[usize], p: &[usize], k: usize) -> Option<f64> {
        let w = |a: usize, b: usize| ((a as f64 - b as f64) / (k as f64 - 1.0)).powi(2);
        let n = t.len() as f64;
        let obs: f64 = t.iter().zip(p).map(|(&a, &b)| w(a, b)).sum::<f64>() / n;
        let mut exp = 0.0;
        for &a in t {
            for &b in p {
                exp += w(a, b);
            }
        }
        exp /= n * n;
        (exp != 0.0).then(|| 1.0 - obs / exp)
    }

    #[test]
    fn kappa_invariant_under_order_reversal_exhaustive() {
        // every pair of length-3 label vectors over 3 classes
        let k = 3;
        let all: Vec<[usize; 3]> = (0..27).map(|i| [i % 3, (i / 3) % 3, i / 9]).collect();
        for t in &all {
            for p in &all {
                let rt: Vec<usize> = t.iter().map(|l| k - 1 - l).collect();
                let rp: Vec<usize> = p.iter().map(|l| k - 1 - l).collect();
                match (kappa(t, p, k), kappa(&rt, &rp, k)) {
                    (Ok(a), Ok(b)) => assert!((a - b).abs() < 1e-12),
                    (Err(_), Err(_)) => {}
                    other => panic!("{t:?} {p:?}: {other:?}"),
                }
            }
        }
    }

    #[test]
    fn f1_examples() {
        let t = [0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
        let cm = confusion(&t, &t, &names(2)).unwrap();
        assert_eq!(per_class_f1(&cm), (vec![1.0, 1.0], 1.0));
        assert_eq!(accuracy(&cm), 1.0);
        let cm = confusion(&[0, 1], &[0, 1], &names(3)).unwrap();
        let (f1, m) = per_class_f1(&cm);
        assert_eq!(f1, vec![1.0, 1.0, 0.0]);
        assert!((m - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn binary_examples() {
        let all = binary_cancer_metrics(&[0, 1, 2, 3], &[0, 1, 2, 3], PositiveClass::Cancerous).unwrap();
        assert_eq!(all.precision, Some(1.0));
        assert_eq!(all.sensitivity, Some(1.0));
        let none = binary_cancer_metrics(&[0, 0], &[0, 0], PositiveClass::Cancerous).unwrap();
        assert_eq!(none.precision, None);
        assert_eq!(none.sensitivity, None);
        // truth C C C N N, pred C N C C N: TP 2, FN 1, FP 1, TN 1
        let t = [1, 2, 3, 0, 0];
        let p = [3, 0, 1, 2, 0];
        let c = binary_cancer_metrics(&t, &p, PositiveClass::Cancerous).unwrap();
        assert_eq!(c.precision, Some(2.0 / 3.0));
        assert_eq!(c.sensitivity, Some(2.0 / 3.0));
        let nc = binary_cancer_metrics(&t, &p, PositiveClass::NonCancerous).unwrap();
        assert_eq!(nc.precision, Some(0.5));
        assert_eq!(nc.sensitivity, Some(0.5));
    }

    #[test]
    fn report_marks_undefined_values() {
        let r = EvaluationReport::compute(&[0, 0], &[0, 0], &PATCH_CLASS_NAMES).unwrap();
        assert_eq!(r.kappa, None);
        let rows = r.rows();
        assert!(rows.iter().any(|row| row.metric == "kappa" && row.value == "undefined"));
        assert!(r.text().contains("undefined"));
        let r = EvaluationReport::compute(&[0, 1, 2, 3], &[0, 1, 2, 3], &PATCH_CLASS_NAMES).unwrap();
        assert_eq!(r.kappa, Some(1.0));
    }

    fn labels(k: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
        (1usize..=200).prop_flat_map(move |n| {
            (prop::collection::vec(0..k, n), prop::collection::vec(0..k, n))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn kappa_matches_oracle((k, (t, p)) in (2usize..=6).prop_flat_map(|k| (Just(k), labels(k)))) {
            let got = kappa(&t, &p, k).ok();
            let want = kappa_oracle(&t, &p, k);
            match (got, want) {
                (Some(a), Some(b)) => {
                    prop_assert!((a - b).abs() < 1e-10, "{a} vs {b}");
                    prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&a));
                }
                (None, None) => {}
                other => prop_assert!(false, "{:?}", other),
            }
        }

        #[test]
        fn confusion_matches_counter((t, p) in labels(5)) {
            let cm = confusion(&t, &p, &names(5)).unwrap();
            prop_assert_eq!(cm.total() as usize, t.len());
            for i in 0..5 {
                for j in 0..5 {
                    let n = t.iter().zip(&p).filter(|(a, b)| **a == i && **b == j).count();
                    prop_assert_eq!(cm.get(i, j) as usize, n);
                }
            }
        }

        #[test]
        fn f1_matches_scalar_oracle((t, p) in labels(4)) {
            let cm = confusion(&t, &p, &names(4)).unwrap();
            let (f1, m) = per_class_f1(&cm);
            for c in 0..4 {
                let tp = t.iter().zip(&p).filter(|(a, b)| **a == c && **b == c).count() as f64;
                let fp = t.iter().zip(&p).filter(|(a, b)| **a != c && **b == c).count() as f64;
                let fn_ = t.iter().zip(&p).filter(|(a, b)| **a == c && **b != c).count() as f64;
                // F1 = 2TP / (2TP + FP + FN)
                let want = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
                prop_assert!((f1[c] - want).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&f1[c]));
            }
            prop_assert!((0.0..=1.0).contains(&m));
            let acc = t.iter().zip(&p).filter(|(a, b)| a == b).count() as f64 / t.len() as f64;
            prop_assert!((accuracy(&cm) - acc).abs() < 1e-15);
        }
    }
}
