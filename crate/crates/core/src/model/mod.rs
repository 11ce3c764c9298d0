//! Instance encoder and four-way classifier head.

mod checkpoint;
pub mod encoder;
pub mod optim;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, FORMAT_VERSION};
pub use encoder::{input_from_rgb, EncoderGrads, EncoderTrace, EncoderView, Real};

use crate::error::{Error, Result};
use crate::grading::{GleasonGrade, NUM_CLASSES};
use crate::mil::AttentionParameters;
use encoder::ConvShape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HeadActivation {
    #[default]
    Softmax,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub input_side: usize,
    pub feature_dim: usize,
    pub architecture: String,
    /// Widths of the pooled conv blocks preceding the feature conv.
    pub channels: Vec<usize>,
    pub precision: Precision,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_side: 32,
            feature_dim: 64,
            architecture: "convnet".into(),
            channels: vec![8, 16],
            precision: Precision::F32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.architecture != "convnet" {
            return Err(Error::InvalidConfig(format!(
                "unsupported encoder architecture {:?}",
                self.architecture
            )));
        }
        if self.feature_dim < 1 {
            return Err(Error::InvalidConfig("model.feature_dim must be >= 1".into()));
        }
        if self.input_side < 8 {
            return Err(Error::InvalidConfig("model.input_side must be >= 8".into()));
        }
        if self.channels.iter().any(|c| *c == 0) {
            return Err(Error::InvalidConfig("model.channels must be >= 1".into()));
        }
        let div = 1usize << self.channels.len();
        if self.input_side % div != 0 {
            return Err(Error::InvalidConfig(format!(
                "model.input_side {} must be divisible by {div}",
                self.input_side
            )));
        }
        Ok(())
    }

    pub(crate) fn conv_shapes(&self) -> Vec<ConvShape> {
        let mut shapes = Vec::new();
        let mut in_channels = 3;
        let mut side = self.input_side;
        for &c in &self.channels {
            shapes.push(ConvShape {
                in_channels,
                out_channels: c,
                side,
            });
            in_channels = c;
            side /= 2;
        }
        shapes.push(ConvShape {
            in_channels,
            out_channels: self.feature_dim,
            side,
        });
        shapes
    }
}

/// Class probabilities over (NC, GG3, GG4, GG5).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub probs: [f64; NUM_CLASSES],
}

impl Prediction {
    /// Index of the largest probability; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn grade(&self) -> GleasonGrade {
        GleasonGrade::ALL[self.argmax()]
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradient arriving at the head output.
#[derive(Debug, Clone, Copy)]
pub enum OutputGrad {
    Probs([f64; NUM_CLASSES]),
    Logits([f64; NUM_CLASSES]),
}

/// Encoder, head and optional attention weights. Every tensor is stored in
/// `f64`; the encoder is cast to the configured precision for compute.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub config: EncoderConfig,
    pub head_activation: HeadActivation,
    pub init_seed: u64,
    pub(crate) conv_weights: Vec<Vec<f64>>,
    pub(crate) conv_biases: Vec<Vec<f64>>,
    /// Row-major `NUM_CLASSES x feature_dim`.
    pub(crate) head_weight: Vec<f64>,
    pub(crate) head_bias: Vec<f64>,
    pub attention: Option<AttentionParameters>,
}

/// Per-instance forward state kept for backpropagation.
#[derive(Debug, Clone)]
pub struct InstanceState<T> {
    pub trace: EncoderTrace<T>,
    pub features: Vec<f64>,
    pub logits: [f64; NUM_CLASSES],
    pub prediction: Prediction,
}

impl ModelParameters {
    /// He-uniform conv weights, zero biases, and `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// for the head, all drawn from a ChaCha stream seeded with `seed`.
    pub fn init(config: EncoderConfig, head_activation: HeadActivation, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut conv_weights = Vec::new();
        let mut conv_biases = Vec::new();
        for shape in config.conv_shapes() {
            let bound = (6.0 / (shape.in_channels * 9) as f64).sqrt();
            conv_weights.push(
                (0..shape.weight_len())
                    .map(|_| rng.random_range(-bound..bound))
                    .collect(),
            );
            conv_biases.push(vec![0.0; shape.out_channels]);
        }
        let m = config.feature_dim;
        let bound = 1.0 / (m as f64).sqrt();
        let head_weight = (0..NUM_CLASSES * m)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Ok(Self {
            config,
            head_activation,
            init_seed: seed,
            conv_weights,
            conv_biases,
            head_weight,
            head_bias: vec![0.0; NUM_CLASSES],
            attention: None,
        })
    }

    pub fn with_attention(mut self, attention: AttentionParameters) -> Result<Self> {
        if attention.feature_dim() != self.config.feature_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("attention over {} features", self.config.feature_dim),
                found: format!("{}", attention.feature_dim()),
            });
        }
        self.attention = Some(attention);
        Ok(self)
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    /// Every tensor in a fixed order (conv layers, head, attention).
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for (w, b) in self.conv_weights.iter().zip(&self.conv_biases) {
            out.push(w);
            out.push(b);
        }
        out.push(&self.head_weight);
        out.push(&self.head_bias);
        if let Some(att) = &self.attention {
            out.extend(att.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for (w, b) in self.conv_weights.iter_mut().zip(self.conv_biases.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        if let Some(att) = &mut self.attention {
            out.extend(att.tensors_mut());
        }
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn encoder_view<T: Real>(&self) -> EncoderView<T> {
        let cast = |v: &Vec<f64>| v.iter().map(|x| T::from_f64(*x)).collect::<Vec<T>>();
        EncoderView {
            shapes: self.config.conv_shapes(),
            weights: self.conv_weights.iter().map(cast).collect(),
            biases: self.conv_biases.iter().map(cast).collect(),
        }
    }

    pub(crate) fn add_encoder_grads<T: Real>(&mut self, grads: &EncoderGrads<T>) {
        for (dst, src) in self.conv_weights.iter_mut().zip(&grads.weights) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s.to_f64();
            }
        }
        for (dst, src) in self.conv_biases.iter_mut().zip(&grads.biases) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s.to_f64();
            }
        }
    }

    pub fn head_logits(&self, features: &[f64]) -> [f64; NUM_CLASSES] {
        let m = self.feature_dim();
        let mut logits = [0.0; NUM_CLASSES];
        for (c, l) in logits.iter_mut().enumerate() {
            let row = &self.head_weight[c * m..(c + 1) * m];
            *l = self.head_bias[c] + row.iter().zip(features).map(|(w, z)| w * z).sum::<f64>();
        }
        logits
    }

    pub fn activate(&self, logits: &[f64; NUM_CLASSES]) -> Prediction {
        let probs = match self.head_activation {
            HeadActivation::Softmax => {
                let p = softmax(logits);
                [p[0], p[1], p[2], p[3]]
            }
            HeadActivation::Sigmoid => logits.map(sigmoid),
        };
        Prediction { probs }
    }

    /// Backpropagates through the head, accumulating into `grads` and
    /// returning the gradient w.r.t. the features.
    pub fn head_backward(
        &self,
        features: &[f64],
        prediction: &Prediction,
        grad: OutputGrad,
        grads: &mut ModelParameters,
    ) -> Vec<f64> {
        let p = &prediction.probs;
        let dlogits = match grad {
            OutputGrad::Logits(d) => d,
            OutputGrad::Probs(dp) => match self.head_activation {
                HeadActivation::Softmax => {
                    let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    [0, 1, 2, 3].map(|c| p[c] * (dp[c] - dot))
                }
                HeadActivation::Sigmoid => [0, 1, 2, 3].map(|c| dp[c] * p[c] * (1.0 - p[c])),
            },
        };
        let m = self.feature_dim();
        let mut dz = vec![0.0; m];
        for c in 0..NUM_CLASSES {
            let d = dlogits[c];
            if d == 0.0 {
                continue;
            }
            grads.head_bias[c] += d;
            let row = &self.head_weight[c * m..(c + 1) * m];
            let grow = &mut grads.head_weight[c * m..(c + 1) * m];
            for j in 0..m {
                grow[j] += d * features[j];
                dz[j] += d * row[j];
            }
        }
        dz
    }

    fn check_input<T: Real>(&self, view: &EncoderView<T>, input: &[T]) -> Result<()> {
        if input.len() != view.input_len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} input values", view.input_len()),
                found: format!("{}", input.len()),
            });
        }
        Ok(())
    }

    pub fn forward_instance<T: Real>(
        &self,
        view: &EncoderView<T>,
        input: &[T],
    ) -> Result<InstanceState<T>> {
        self.check_input(view, input)?;
        let trace = view.forward(input);
        let features: Vec<f64> = trace.features.iter().map(|v| v.to_f64()).collect();
        let logits = self.head_logits(&features);
        let prediction = self.activate(&logits);
        Ok(InstanceState {
            trace,
            features,
            logits,
            prediction,
        })
    }

    pub fn forward_batch<T: Real>(
        &self,
        view: &EncoderView<T>,
        inputs: &[Vec<T>],
    ) -> Result<Vec<InstanceState<T>>> {
        inputs
            .par_iter()
            .map(|x| self.forward_instance(view, x))
            .collect()
    }

    /// Full backward for one instance: head (when `output` is set), plus any
    /// extra feature gradient (from attention), then the encoder.
    #[allow(clippy::too_many_arguments)]
    pub fn backward_instance<T: Real>(
        &self,
        view: &EncoderView<T>,
        state: &InstanceState<T>,
        output: Option<OutputGrad>,
        extra_feature_grad: Option<&[f64]>,
        grads: &mut ModelParameters,
        encoder_grads: &mut EncoderGrads<T>,
        want_input: bool,
    ) -> Option<Vec<T>> {
        let mut dz = match output {
            Some(g) => self.head_backward(&state.features, &state.prediction, g, grads),
            None => vec![0.0; self.feature_dim()],
        };
        if let Some(extra) = extra_feature_grad {
            for (d, e) in dz.iter_mut().zip(extra) {
                *d += e;
            }
        }
        let dz_t: Vec<T> = dz.iter().map(|v| T::from_f64(*v)).collect();
        view.backward(&state.trace, &dz_t, encoder_grads, want_input)
    }

    /// Backward over a batch. Head gradients accumulate directly; encoder
    /// gradients are computed per instance in parallel and summed in order.
    pub fn backward_batch<T: Real>(
        &self,
        view: &EncoderView<T>,
        states: &[InstanceState<T>],
        outputs: &[Option<OutputGrad>],
        extra_feature_grads: Option<&[Vec<f64>]>,
        grads: &mut ModelParameters,
    ) {
        let active: Vec<usize> = (0..states.len())
            .filter(|&i| {
                outputs[i].is_some()
                    || extra_feature_grads.is_some_and(|e| e[i].iter().any(|v| *v != 0.0))
            })
            .collect();
        let mut dzs = Vec::with_capacity(active.len());
        for &i in &active {
            let mut dz = match outputs[i] {
                Some(g) => self.head_backward(
                    &states[i].features,
                    &states[i].prediction,
                    g,
                    grads,
                ),
                None => vec![0.0; self.feature_dim()],
            };
            if let Some(extra) = extra_feature_grads {
                for (d, e) in dz.iter_mut().zip(&extra[i]) {
                    *d += e;
                }
            }
            dzs.push(dz);
        }
        let partials: Vec<EncoderGrads<T>> = active
            .par_iter()
            .zip(dzs.par_iter())
            .map(|(&i, dz)| {
                let mut g = view.zero_grads();
                let dz_t: Vec<T> = dz.iter().map(|v| T::from_f64(*v)).collect();
                view.backward(&states[i].trace, &dz_t, &mut g, false);
                g
            })
            .collect();
        for g in &partials {
            grads.add_encoder_grads(g);
        }
    }
}

fn patch_input<T: Real>(params: &ModelParameters, pixels: &RgbImage) -> Result<Vec<T>> {
    let side = params.config.input_side as u32;
    if pixels.dimensions() != (side, side) {
        return Err(Error::ShapeMismatch {
            expected: format!("{side}x{side} patch"),
            found: format!("{}x{}", pixels.width(), pixels.height()),
        });
    }
    Ok(input_from_rgb(pixels))
}

fn encode_with<T: Real>(pixels: &RgbImage, params: &ModelParameters) -> Result<Vec<f64>> {
    let view = params.encoder_view::<T>();
    let input = patch_input::<T>(params, pixels)?;
    Ok(view.forward(&input).features.iter().map(|v| v.to_f64()).collect())
}

/// Feature vector of one patch image.
pub fn encode(pixels: &RgbImage, params: &ModelParameters) -> Result<Vec<f64>> {
    match params.config.precision {
        Precision::F32 => encode_with::<f32>(pixels, params),
        Precision::F64 => encode_with::<f64>(pixels, params),
    }
}

pub fn classify(features: &[f64], params: &ModelParameters) -> Result<Prediction> {
    if features.len() != params.feature_dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} features", params.feature_dim()),
            found: format!("{}", features.len()),
        });
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("features"));
    }
    Ok(params.activate(&params.head_logits(features)))
}

/// Features and prediction for every image, in input order.
pub fn predict_images(
    params: &ModelParameters,
    images: &[&RgbImage],
) -> Result<Vec<(Vec<f64>, Prediction)>> {
    fn run<T: Real>(
        params: &ModelParameters,
        images: &[&RgbImage],
    ) -> Result<Vec<(Vec<f64>, Prediction)>> {
        let view = params.encoder_view::<T>();
        images
            .par_iter()
            .map(|img| {
                let input = patch_input::<T>(params, img)?;
                let state = params.forward_instance(&view, &input)?;
                Ok((state.features, state.prediction))
            })
            .collect()
    }
    match params.config.precision {
        Precision::F32 => run::<f32>(params, images),
        Precision::F64 => run::<f64>(params, images),
    }
}
