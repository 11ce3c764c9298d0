//! Slide-level scoring from patch features or grade percentages.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grading::{GleasonGrade, NUM_CLASSES};
use crate::model::optim::{Optimizer, OptimizerKind};
use crate::model::{argmax, softmax, Prediction};

/// Mean of the instance feature vectors.
pub fn slide_embedding(features: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = features.first().ok_or(Error::EmptyBag)?;
    let mut sum = vec![0.0; first.len()];
    for z in features {
        if z.len() != sum.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} features", sum.len()),
                found: format!("{}", z.len()),
            });
        }
        for (s, v) in sum.iter_mut().zip(z) {
            *s += v;
        }
    }
    let n = features.len() as f64;
    let mean: Vec<f64> = sum.into_iter().map(|s| s / n).collect();
    if mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("slide embedding"));
    }
    Ok(mean)
}

/// Fraction of patches predicted as each class (hard argmax).
pub fn grade_percentages(preds: &[GleasonGrade]) -> Result<[f64; NUM_CLASSES]> {
    if preds.is_empty() {
        return Err(Error::EmptyBag);
    }
    let mut counts = [0usize; NUM_CLASSES];
    for g in preds {
        counts[g.index()] += 1;
    }
    Ok(counts.map(|c| c as f64 / preds.len() as f64))
}

/// Mean predicted probability per class, the soft counterpart of
/// [`grade_percentages`].
pub fn soft_grade_percentages(preds: &[Prediction]) -> Result<[f64; NUM_CLASSES]> {
    if preds.is_empty() {
        return Err(Error::EmptyBag);
    }
    let mut out = [0.0; NUM_CLASSES];
    for p in preds {
        for (o, v) in out.iter_mut().zip(&p.probs) {
            *o += v;
        }
    }
    let total: f64 = out.iter().sum();
    Ok(out.map(|v| v / total))
}

/// Nearest-neighbor classifier over arbitrary integer labels.
#[derive(Debug, Clone)]
pub struct Knn {
    k: usize,
    points: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

impl Knn {
    pub fn fit(train: &[(Vec<f64>, usize)], k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidConfig("k must be >= 1".into()));
        }
        if train.len() < k {
            return Err(Error::TrainTooSmall {
                required: k,
                found: train.len(),
            });
        }
        let dim = train[0].0.len();
        if let Some((x, _)) = train.iter().find(|(x, _)| x.len() != dim) {
            return Err(Error::ShapeMismatch {
                expected: format!("{dim} features"),
                found: format!("{}", x.len()),
            });
        }
        Ok(Self {
            k,
            points: train.iter().map(|(x, _)| x.clone()).collect(),
            labels: train.iter().map(|(_, y)| *y).collect(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Majority label among the `k` nearest points. Equal distances keep
    /// insertion order; equal votes go to the lowest label.
    pub fn predict(&self, query: &[f64]) -> Result<usize> {
        if query.len() != self.points[0].len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} features", self.points[0].len()),
                found: format!("{}", query.len()),
            });
        }
        let mut dist: Vec<(f64, usize)> = self
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| (p.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum(), i))
            .collect();
        // stable sort: ties stay in insertion order
        dist.sort_by(|a, b| a.0.total_cmp(&b.0));
        let max_label = self.labels.iter().copied().max().unwrap_or(0);
        let mut votes = vec![0usize; max_label + 1];
        for &(_, i) in &dist[..self.k] {
            votes[self.labels[i]] += 1;
        }
        let best = *votes.iter().max().expect("non-empty");
        Ok(votes.iter().position(|&v| v == best).expect("max exists"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpConfig {
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            lr: 1e-2,
            epochs: 20,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "mlp hidden, epochs and batch_size must be >= 1".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig("mlp lr must be > 0".into()));
        }
        Ok(())
    }
}

/// One-hidden-layer ReLU network with a softmax output, trained with Adam on
/// standardized inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    mean: Vec<f64>,
    scale: Vec<f64>,
    hidden: usize,
    classes: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl Mlp {
    pub fn fit(train: &[(Vec<f64>, usize)], config: &MlpConfig) -> Result<Self> {
        config.validate()?;
        let Some((first, _)) = train.first() else {
            return Err(Error::EmptyDataset("no training slides".into()));
        };
        let dim = first.len();
        if train.iter().any(|(x, _)| x.len() != dim) {
            return Err(Error::ShapeMismatch {
                expected: format!("{dim} features"),
                found: "ragged training set".into(),
            });
        }
        let y0 = train[0].1;
        if train.iter().all(|(_, y)| *y == y0) {
            return Err(Error::SingleClass);
        }
        let classes = train.iter().map(|(_, y)| *y).max().expect("non-empty") + 1;
        let n = train.len() as f64;
        let mut mean = vec![0.0; dim];
        for (x, _) in train {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v / n;
            }
        }
        let mut scale = vec![0.0; dim];
        for (x, _) in train {
            for ((s, v), m) in scale.iter_mut().zip(x).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        for s in &mut scale {
            *s = if *s > 1e-24 { 1.0 / s.sqrt() } else { 1.0 };
        }

        let h = config.hidden;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let b_in = (6.0 / dim as f64).sqrt();
        let b_out = 1.0 / (h as f64).sqrt();
        let mut mlp = Self {
            mean,
            scale,
            hidden: h,
            classes,
            w1: (0..h * dim).map(|_| rng.random_range(-b_in..b_in)).collect(),
            b1: vec![0.0; h],
            w2: (0..classes * h).map(|_| rng.random_range(-b_out..b_out)).collect(),
            b2: vec![0.0; classes],
        };

        let xs: Vec<Vec<f64>> = train.iter().map(|(x, _)| mlp.standardize(x)).collect();
        let shapes = [mlp.w1.len(), mlp.b1.len(), mlp.w2.len(), mlp.b2.len()];
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.0, &shapes);
        let mut order: Vec<usize> = (0..train.len()).collect();
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(config.batch_size) {
                let mut g = [
                    vec![0.0; mlp.w1.len()],
                    vec![0.0; h],
                    vec![0.0; mlp.w2.len()],
                    vec![0.0; classes],
                ];
                let inv_b = 1.0 / batch.len() as f64;
                for &i in batch {
                    let x = &xs[i];
                    let (a, p) = mlp.forward(x);
                    let mut dlogit = p;
                    dlogit[train[i].1] -= 1.0;
                    let mut da = vec![0.0; h];
                    for c in 0..classes {
                        let d = dlogit[c] * inv_b;
                        g[3][c] += d;
                        for j in 0..h {
                            g[2][c * h + j] += d * a[j];
                            da[j] += d * mlp.w2[c * h + j];
                        }
                    }
                    for j in 0..h {
                        if a[j] <= 0.0 {
                            continue;
                        }
                        g[1][j] += da[j];
                        for (gw, xv) in g[0][j * dim..(j + 1) * dim].iter_mut().zip(x) {
                            *gw += da[j] * xv;
                        }
                    }
                }
                opt.step(
                    vec![&mut mlp.w1, &mut mlp.b1, &mut mlp.w2, &mut mlp.b2],
                    g.iter().map(|v| v.as_slice()).collect(),
                    config.lr,
                );
            }
        }
        Ok(mlp)
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }

    /// Hidden activations and output distribution for a standardized input.
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let dim = x.len();
        let a: Vec<f64> = (0..self.hidden)
            .map(|j| {
                let z = self.b1[j]
                    + self.w1[j * dim..(j + 1) * dim].iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
                z.max(0.0)
            })
            .collect();
        let logits: Vec<f64> = (0..self.classes)
            .map(|c| {
                self.b2[c]
                    + self.w2[c * self.hidden..(c + 1) * self.hidden]
                        .iter()
                        .zip(&a)
                        .map(|(w, v)| w * v)
                        .sum::<f64>()
            })
            .collect();
        (a, softmax(&logits))
    }

    pub fn predict_proba(&self, query: &[f64]) -> Result<Vec<f64>> {
        if query.len() != self.mean.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} features", self.mean.len()),
                found: format!("{}", query.len()),
            });
        }
        Ok(self.forward(&self.standardize(query)).1)
    }

    pub fn predict(&self, query: &[f64]) -> Result<usize> {
        Ok(argmax(&self.predict_proba(query)?))
    }
}

/// Slide descriptor fed to the slide-level classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Descriptor {
    #[default]
    Features,
    GradePercentages,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Classifier {
    #[default]
    Knn,
    Mlp,
}

/// Scoring method named as on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoringMethod {
    pub descriptor: Descriptor,
    pub classifier: Classifier,
}

impl std::str::FromStr for ScoringMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (descriptor, classifier) = match s {
            "knn" => (Descriptor::Features, Classifier::Knn),
            "mlp" => (Descriptor::Features, Classifier::Mlp),
            "ggpct-knn" => (Descriptor::GradePercentages, Classifier::Knn),
            "ggpct-mlp" => (Descriptor::GradePercentages, Classifier::Mlp),
            other => return Err(Error::InvalidConfig(format!("unknown scoring method {other:?}"))),
        };
        Ok(Self {
            descriptor,
            classifier,
        })
    }
}

impl std::fmt::Display for ScoringMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let prefix = match self.descriptor {
            Descriptor::Features => "",
            Descriptor::GradePercentages => "ggpct-",
        };
        let clf = match self.classifier {
            Classifier::Knn => "knn",
            Classifier::Mlp => "mlp",
        };
        write!(f, "{prefix}{clf}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringConfig {
    pub k: usize,
    /// Use mean probabilities instead of hard-prediction counts for GG%.
    pub soft_percentages: bool,
    pub mlp: MlpConfig,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            k: 20,
            soft_percentages: false,
            mlp: MlpConfig::default(),
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("scoring.k must be >= 1".into()));
        }
        self.mlp.validate()
    }
}

/// A fitted classifier of either kind.
#[derive(Debug, Clone)]
pub enum SlideClassifier {
    Knn(Knn),
    Mlp(Mlp),
}

impl SlideClassifier {
    pub fn fit(
        classifier: Classifier,
        train: &[(Vec<f64>, usize)],
        config: &ScoringConfig,
    ) -> Result<Self> {
        match classifier {
            Classifier::Knn => Knn::fit(train, config.k).map(SlideClassifier::Knn),
            Classifier::Mlp => Mlp::fit(train, &config.mlp).map(SlideClassifier::Mlp),
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        match self {
            SlideClassifier::Knn(m) => m.predict(x),
            SlideClassifier::Mlp(m) => m.predict(x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn embedding_examples() {
        assert_eq!(slide_embedding(&[vec![1.0, 2.0]]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(
            slide_embedding(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(),
            vec![2.0, 3.0]
        );
        assert!(matches!(slide_embedding(&[]), Err(Error::EmptyBag)));
        assert!(slide_embedding(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn percentage_examples() {
        use GleasonGrade::*;
        assert_eq!(grade_percentages(&[Nc, Gg3, Gg3, Gg4]).unwrap(), [0.25, 0.5, 0.25, 0.0]);
        assert_eq!(grade_percentages(&[Nc; 7]).unwrap(), [1.0, 0.0, 0.0, 0.0]);
        assert!(grade_percentages(&[]).is_err());
        let soft = soft_grade_percentages(&[
            Prediction { probs: [1.0, 0.0, 0.0, 0.0] },
            Prediction { probs: [0.0, 0.5, 0.5, 0.0] },
        ])
        .unwrap();
        assert_eq!(soft, [0.5, 0.25, 0.25, 0.0]);
    }

    #[test]
    fn knn_examples() {
        let train = vec![(vec![0.0], 4), (vec![1.0], 1), (vec![5.0], 3)];
        let m = Knn::fit(&train, 1).unwrap();
        assert_eq!(m.predict(&[5.0]).unwrap(), 3);

        let train = vec![
            (vec![0.0], 2),
            (vec![0.1], 2),
            (vec![0.2], 5),
            (vec![9.0], 1),
        ];
        assert_eq!(Knn::fit(&train, 3).unwrap().predict(&[0.0]).unwrap(), 2);
        // 1-1 vote tie goes to the lower label
        assert_eq!(Knn::fit(&train, 2).unwrap().predict(&[0.15]).unwrap(), 2);
        assert!(matches!(
            Knn::fit(&train, 20),
            Err(Error::TrainTooSmall { required: 20, found: 4 })
        ));
    }

    #[test]
    fn knn_distance_ties_keep_insertion_order() {
        let train = vec![(vec![1.0], 3), (vec![-1.0], 0), (vec![5.0], 0)];
        assert_eq!(Knn::fit(&train, 1).unwrap().predict(&[0.0]).unwrap(), 3);
    }

    /// Independent oracle: repeated linear scans pick the next nearest unused
    /// point (lowest index on equal distance), then count votes.
    fn brute_knn(train: &[(Vec<f64>, usize)], q: &[f64], k: usize) -> usize {
        let d = |x: &[f64]| -> f64 { x.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum() };
        let mut used = vec![false; train.len()];
        let mut votes = std::collections::BTreeMap::new();
        for _ in 0..k {
            let mut best: Option<usize> = None;
            for i in 0..train.len() {
                if used[i] {
                    continue;
                }
                if best.is_none_or(|b| d(&train[i].0) < d(&train[b].0)) {
                    best = Some(i);
                }
            }
            let b = best.unwrap();
            used[b] = true;
            *votes.entry(train[b].1).or_insert(0usize) += 1;
        }
        let top = *votes.values().max().unwrap();
        *votes.iter().find(|(_, v)| **v == top).unwrap().0
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn knn_matches_brute_force(
            train in prop::collection::vec(
                (prop::collection::vec(-3i32..3, 3), 0usize..6), 20..60),
            q in prop::collection::vec(-3i32..3, 3),
            k in 1usize..20,
        ) {
            // integer grid coordinates produce many exact distance ties
            let train: Vec<(Vec<f64>, usize)> = train
                .into_iter()
                .map(|(x, y)| (x.into_iter().map(f64::from).collect(), y))
                .collect();
            let q: Vec<f64> = q.into_iter().map(f64::from).collect();
            let m = Knn::fit(&train, k).unwrap();
            prop_assert_eq!(m.predict(&q).unwrap(), brute_knn(&train, &q, k));
        }

        #[test]
        fn embedding_is_permutation_invariant(
            feats in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 4), 1..100),
            seed in any::<u64>(),
        ) {
            let mut shuffled = feats.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let a = slide_embedding(&feats).unwrap();
            let b = slide_embedding(&shuffled).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn percentages_match_counter(labels in prop::collection::vec(0usize..4, 1..1000), seed in any::<u64>()) {
            let grades: Vec<GleasonGrade> = labels.iter().map(|&i| GleasonGrade::ALL[i]).collect();
            let p = grade_percentages(&grades).unwrap();
            for c in 0..4 {
                let n = labels.iter().filter(|&&l| l == c).count();
                prop_assert_eq!(p[c], n as f64 / labels.len() as f64);
            }
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            let mut shuffled = grades.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(grade_percentages(&shuffled).unwrap(), p);
        }
    }

    fn separable(seed: u64) -> Vec<(Vec<f64>, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..80)
            .map(|i| {
                let y = i % 2;
                let x0: f64 = rng.random_range(0.5..3.0) * if y == 1 { 1.0 } else { -1.0 };
                (vec![x0, rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)], y)
            })
            .collect()
    }

    #[test]
    fn mlp_fits_separable_data() {
        let train = separable(1);
        // the first coordinate's sign separates the classes exactly
        assert!(train.iter().all(|(x, y)| (x[0] > 0.0) == (*y == 1)));
        let m = Mlp::fit(&train, &MlpConfig::default()).unwrap();
        for (x, y) in &train {
            let p = m.predict_proba(x).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert_eq!(m.predict(x).unwrap(), *y);
        }
        let again = Mlp::fit(&train, &MlpConfig::default()).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn mlp_rejects_single_class() {
        let train = vec![(vec![0.0], 1), (vec![1.0], 1)];
        assert!(matches!(Mlp::fit(&train, &MlpConfig::default()), Err(Error::SingleClass)));
    }

    #[test]
    fn method_names_round_trip() {
        for s in ["knn", "mlp", "ggpct-knn", "ggpct-mlp"] {
            assert_eq!(s.parse::<ScoringMethod>().unwrap().to_string(), s);
        }
        assert!("svm".parse::<ScoringMethod>().is_err());
    }
}
