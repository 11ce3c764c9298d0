//! Bag-level aggregation of instance predictions and the teacher objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grading::{SlideLabel, NUM_CLASSES};
use crate::model::{sigmoid, Prediction};

/// Probability clamp used in every log term.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Max,
    Attention,
}

/// How attention logits are normalized: jointly over every (instance, class)
/// pair, or over instances separately for each class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionNormalization {
    #[default]
    Joint,
    PerClass,
}

/// Gated attention weights: `V`, `U` are `hidden x feature_dim`, `W` is
/// `hidden x classes`, all row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParameters {
    feature_dim: usize,
    hidden: usize,
    classes: usize,
    pub normalization: AttentionNormalization,
    pub(crate) v: Vec<f64>,
    pub(crate) u: Vec<f64>,
    pub(crate) w: Vec<f64>,
}

impl AttentionParameters {
    pub fn zeros(
        feature_dim: usize,
        hidden: usize,
        classes: usize,
        normalization: AttentionNormalization,
    ) -> Self {
        Self {
            feature_dim,
            hidden,
            classes,
            normalization,
            v: vec![0.0; hidden * feature_dim],
            u: vec![0.0; hidden * feature_dim],
            w: vec![0.0; hidden * classes],
        }
    }

    /// Parameters from explicit `V`, `U` and `W` matrices.
    pub fn from_parts(
        hidden: usize,
        classes: usize,
        normalization: AttentionNormalization,
        v: Vec<f64>,
        u: Vec<f64>,
        w: Vec<f64>,
    ) -> Result<Self> {
        let feature_dim = if hidden == 0 { 0 } else { v.len() / hidden };
        if hidden == 0 || v.len() != hidden * feature_dim || u.len() != v.len() || w.len() != hidden * classes {
            return Err(Error::ShapeMismatch {
                expected: format!("V, U of {hidden} x m and W of {hidden} x {classes}"),
                found: format!("V {}, U {}, W {}", v.len(), u.len(), w.len()),
            });
        }
        Ok(Self {
            feature_dim,
            hidden,
            classes,
            normalization,
            v,
            u,
            w,
        })
    }

    /// Uniform `±1/sqrt(fan_in)` initialization from a seeded ChaCha stream.
    pub fn init(
        feature_dim: usize,
        hidden: usize,
        classes: usize,
        normalization: AttentionNormalization,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(feature_dim, hidden, classes, normalization);
        let bm = 1.0 / (feature_dim as f64).sqrt();
        let bl = 1.0 / (hidden as f64).sqrt();
        p.v.iter_mut().for_each(|x| *x = rng.random_range(-bm..bm));
        p.u.iter_mut().for_each(|x| *x = rng.random_range(-bm..bm));
        p.w.iter_mut().for_each(|x| *x = rng.random_range(-bl..bl));
        p
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Class index of attention column 0; `W` may cover all four classes or
    /// only the three cancerous ones.
    fn class_offset(&self) -> usize {
        NUM_CLASSES - self.classes
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        vec![&self.v, &self.u, &self.w]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.v, &mut self.u, &mut self.w]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BagOutput {
    /// Bag probabilities for (GG3, GG4, GG5).
    pub bag_probs: [f64; 3],
    pub per_instance: Vec<Prediction>,
    /// `I x K` attention weights, row per instance.
    pub attention: Option<Vec<Vec<f64>>>,
}

/// Index of the maximizing instance for each cancerous class; the earliest
/// instance wins ties.
pub fn max_indices(preds: &[Prediction]) -> [usize; 3] {
    [1, 2, 3].map(|k| {
        let mut best = 0;
        for (i, p) in preds.iter().enumerate() {
            if p.probs[k] > preds[best].probs[k] {
                best = i;
            }
        }
        best
    })
}

pub fn aggregate_max(preds: &[Prediction]) -> Result<BagOutput> {
    if preds.is_empty() {
        return Err(Error::EmptyBag);
    }
    let idx = max_indices(preds);
    let bag_probs = [0, 1, 2].map(|j| preds[idx[j]].probs[j + 1]);
    Ok(BagOutput {
        bag_probs,
        per_instance: preds.to_vec(),
        attention: None,
    })
}

/// Routes bag gradients to the maximizing instances only.
pub fn max_backward(preds: &[Prediction], grad_bag: [f64; 3]) -> Vec<Option<[f64; NUM_CLASSES]>> {
    let idx = max_indices(preds);
    let mut out = vec![None; preds.len()];
    for j in 0..3 {
        let slot = out[idx[j]].get_or_insert([0.0; NUM_CLASSES]);
        slot[j + 1] += grad_bag[j];
    }
    out
}

/// Intermediate values of the gated attention branch.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    tanh_v: Vec<Vec<f64>>,
    sigm_u: Vec<Vec<f64>>,
    weights: Vec<Vec<f64>>,
}

fn matvec(mat: &[f64], rows: usize, x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    (0..rows)
        .map(|r| mat[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn attention_forward(
    features: &[Vec<f64>],
    attn: &AttentionParameters,
) -> Result<AttentionCache> {
    let (l, k) = (attn.hidden, attn.classes);
    if !(3..=NUM_CLASSES).contains(&k) {
        return Err(Error::ShapeMismatch {
            expected: "3 or 4 attention classes".into(),
            found: format!("{k}"),
        });
    }
    let mut tanh_v = Vec::with_capacity(features.len());
    let mut sigm_u = Vec::with_capacity(features.len());
    let mut scores = Vec::with_capacity(features.len());
    for z in features {
        if z.len() != attn.feature_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{} features", attn.feature_dim),
                found: format!("{}", z.len()),
            });
        }
        let h: Vec<f64> = matvec(&attn.v, l, z).into_iter().map(f64::tanh).collect();
        let g: Vec<f64> = matvec(&attn.u, l, z).into_iter().map(sigmoid).collect();
        let s: Vec<f64> = (0..k)
            .map(|c| (0..l).map(|j| attn.w[j * k + c] * h[j] * g[j]).sum())
            .collect();
        tanh_v.push(h);
        sigm_u.push(g);
        scores.push(s);
    }
    let weights = match attn.normalization {
        AttentionNormalization::Joint => {
            let max = scores.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<Vec<f64>> = scores
                .iter()
                .map(|s| s.iter().map(|v| (v - max).exp()).collect())
                .collect();
            let total: f64 = exps.iter().flatten().sum();
            exps.into_iter()
                .map(|row| row.into_iter().map(|e| e / total).collect())
                .collect()
        }
        AttentionNormalization::PerClass => {
            let mut w = vec![vec![0.0; k]; scores.len()];
            for c in 0..k {
                let max = scores.iter().map(|s| s[c]).fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = scores.iter().map(|s| (s[c] - max).exp()).sum();
                for (i, s) in scores.iter().enumerate() {
                    w[i][c] = (s[c] - max).exp() / total;
                }
            }
            w
        }
    };
    Ok(AttentionCache {
        tanh_v,
        sigm_u,
        weights,
    })
}

pub fn aggregate_attention(
    features: &[Vec<f64>],
    preds: &[Prediction],
    attn: &AttentionParameters,
) -> Result<BagOutput> {
    aggregate_attention_cached(features, preds, attn).map(|(out, _)| out)
}

pub fn aggregate_attention_cached(
    features: &[Vec<f64>],
    preds: &[Prediction],
    attn: &AttentionParameters,
) -> Result<(BagOutput, AttentionCache)> {
    if features.is_empty() {
        return Err(Error::EmptyBag);
    }
    if features.len() != preds.len() {
        return Err(Error::LengthMismatch {
            left: features.len(),
            right: preds.len(),
        });
    }
    let cache = attention_forward(features, attn)?;
    let off = attn.class_offset();
    let mut bag_probs = [0.0; 3];
    for (j, bp) in bag_probs.iter_mut().enumerate() {
        let class = j + 1;
        let col = class - off;
        *bp = preds
            .iter()
            .zip(&cache.weights)
            .map(|(p, a)| a[col] * p.probs[class])
            .sum();
    }
    let out = BagOutput {
        bag_probs,
        per_instance: preds.to_vec(),
        attention: Some(cache.weights.clone()),
    };
    Ok((out, cache))
}

/// Gradients of the attention aggregator.
#[derive(Debug, Clone)]
pub struct AttentionBackward {
    pub grad_preds: Vec<[f64; NUM_CLASSES]>,
    pub grad_features: Vec<Vec<f64>>,
}

/// Backpropagates `grad_bag` through the attention aggregator, accumulating
/// parameter gradients into `grads`.
pub fn attention_backward(
    features: &[Vec<f64>],
    preds: &[Prediction],
    attn: &AttentionParameters,
    cache: &AttentionCache,
    grad_bag: [f64; 3],
    grads: &mut AttentionParameters,
) -> AttentionBackward {
    let (m, l, k) = (attn.feature_dim, attn.hidden, attn.classes);
    let off = attn.class_offset();
    let n = features.len();
    // dL/da_ik and dL/dp_ik
    let mut grad_preds = vec![[0.0; NUM_CLASSES]; n];
    let mut grad_a = vec![vec![0.0; k]; n];
    for j in 0..3 {
        let class = j + 1;
        let col = class - off;
        for i in 0..n {
            grad_preds[i][class] = grad_bag[j] * cache.weights[i][col];
            grad_a[i][col] = grad_bag[j] * preds[i].probs[class];
        }
    }
    // softmax backward
    let mut grad_s = vec![vec![0.0; k]; n];
    match attn.normalization {
        AttentionNormalization::Joint => {
            let dot: f64 = (0..n)
                .flat_map(|i| (0..k).map(move |c| (i, c)))
                .map(|(i, c)| cache.weights[i][c] * grad_a[i][c])
                .sum();
            for i in 0..n {
                for c in 0..k {
                    grad_s[i][c] = cache.weights[i][c] * (grad_a[i][c] - dot);
                }
            }
        }
        AttentionNormalization::PerClass => {
            for c in 0..k {
                let dot: f64 = (0..n).map(|i| cache.weights[i][c] * grad_a[i][c]).sum();
                for i in 0..n {
                    grad_s[i][c] = cache.weights[i][c] * (grad_a[i][c] - dot);
                }
            }
        }
    }
    let mut grad_features = vec![vec![0.0; m]; n];
    for i in 0..n {
        let h = &cache.tanh_v[i];
        let g = &cache.sigm_u[i];
        let z = &features[i];
        let mut dv = vec![0.0; l];
        let mut du = vec![0.0; l];
        for j in 0..l {
            let q = h[j] * g[j];
            let mut dq = 0.0;
            for c in 0..k {
                grads.w[j * k + c] += grad_s[i][c] * q;
                dq += grad_s[i][c] * attn.w[j * k + c];
            }
            dv[j] = dq * g[j] * (1.0 - h[j] * h[j]);
            du[j] = dq * h[j] * g[j] * (1.0 - g[j]);
        }
        let dz = &mut grad_features[i];
        for j in 0..l {
            let (vrow, urow) = (&attn.v[j * m..(j + 1) * m], &attn.u[j * m..(j + 1) * m]);
            let gv = &mut grads.v[j * m..(j + 1) * m];
            for t in 0..m {
                gv[t] += dv[j] * z[t];
            }
            let gu = &mut grads.u[j * m..(j + 1) * m];
            for t in 0..m {
                gu[t] += du[j] * z[t];
                dz[t] += dv[j] * vrow[t] + du[j] * urow[t];
            }
        }
    }
    AttentionBackward {
        grad_preds,
        grad_features,
    }
}

/// Mean binary cross-entropy over the cancerous classes, with `PROB_EPS`
/// clamping.
pub fn teacher_bag_loss(bag: &BagOutput, label: &SlideLabel) -> f64 {
    let targets = label.cancerous_targets();
    bag.bag_probs
        .iter()
        .zip(targets)
        .map(|(p, y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / 3.0
}

/// Gradient of [`teacher_bag_loss`] w.r.t. the bag probabilities. The
/// clamp is passed through so saturated classes still receive a signal.
pub fn teacher_bag_loss_grad(bag: &BagOutput, label: &SlideLabel) -> [f64; 3] {
    let targets = label.cancerous_targets();
    [0, 1, 2].map(|j| {
        let p = bag.bag_probs[j].clamp(1e-12, 1.0 - 1e-12);
        let y = targets[j];
        (-y / p + (1.0 - y) / (1.0 - p)) / 3.0
    })
}
