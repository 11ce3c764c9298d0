use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{epoch_seed, learning_rate, EpochLoss, LossHistory, TrainConfig};
use crate::data::Slide;
use crate::error::{Error, Result};
use crate::mil::{
    aggregate_attention_cached, aggregate_max, attention_backward, max_backward, teacher_bag_loss,
    teacher_bag_loss_grad, Aggregation, AttentionParameters,
};
use crate::model::optim::Optimizer;
use crate::model::{
    input_from_rgb, EncoderConfig, ModelParameters, OutputGrad, Precision, Prediction, Real,
};

const SAMPLE_STREAM: u64 = 1;
const ORDER_STREAM: u64 = 2;
const ATTENTION_SEED_SALT: u64 = 0xa77e;

fn validate_bags(slides: &[Slide]) -> Result<()> {
    if slides.is_empty() {
        return Err(Error::EmptyDataset("no training slides".into()));
    }
    if let Some(s) = slides.iter().find(|s| s.patches.is_empty()) {
        return Err(Error::EmptyDataset(format!("slide {} has no patches", s.id)));
    }
    if !slides.iter().any(|s| s.score.is_benign()) {
        return Err(Error::EmptyDataset("teacher needs at least one benign slide".into()));
    }
    if !slides.iter().any(|s| !s.score.is_benign()) {
        return Err(Error::EmptyDataset("teacher needs at least one cancerous slide".into()));
    }
    Ok(())
}

pub fn train_teacher(
    slides: &[Slide],
    model: &EncoderConfig,
    config: &TrainConfig,
) -> Result<(ModelParameters, LossHistory)> {
    train_teacher_with(slides, model, config, &mut |_| {})
}

/// Trains the MIL teacher with one optimization step per slide per epoch,
/// calling `on_epoch` after each epoch.
pub fn train_teacher_with(
    slides: &[Slide],
    model: &EncoderConfig,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLoss),
) -> Result<(ModelParameters, LossHistory)> {
    config.validate()?;
    validate_bags(slides)?;
    let mut params = ModelParameters::init(model.clone(), config.head_activation, config.seed)?;
    if config.aggregation == Aggregation::Attention {
        let att = AttentionParameters::init(
            model.feature_dim,
            config.attention_hidden,
            crate::grading::NUM_CLASSES,
            config.attention_normalization,
            config.seed ^ ATTENTION_SEED_SALT,
        );
        params = params.with_attention(att)?;
    }
    match model.precision {
        Precision::F32 => run::<f32>(slides, params, config, on_epoch),
        Precision::F64 => run::<f64>(slides, params, config, on_epoch),
    }
}

fn run<T: Real>(
    slides: &[Slide],
    mut params: ModelParameters,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLoss),
) -> Result<(ModelParameters, LossHistory)> {
    let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let mut optimizer = Optimizer::new(config.optimizer, config.momentum, &shapes);
    let mut history = LossHistory::default();

    for epoch in 0..config.epochs {
        let lr = learning_rate(epoch, config);
        let mut sample_rng = ChaCha8Rng::seed_from_u64(epoch_seed(config.seed, epoch, SAMPLE_STREAM));
        let mut order: Vec<usize> = (0..slides.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(config.seed, epoch, ORDER_STREAM)));
        let mut epoch_loss = 0.0;

        for (step, &si) in order.iter().enumerate() {
            let slide = &slides[si];
            let n = slide.patches.len();
            let take = n.min(config.max_patches_per_bag);
            let mut picked = index::sample(&mut sample_rng, n, take).into_vec();
            picked.sort_unstable();

            let view = params.encoder_view::<T>();
            let inputs: Vec<Vec<T>> = picked
                .iter()
                .map(|&i| input_from_rgb::<T>(&slide.patches[i].pixels))
                .collect();
            let states = params.forward_batch(&view, &inputs)?;
            let preds: Vec<Prediction> = states.iter().map(|s| s.prediction).collect();
            let mut grads = params.zeros_like();

            let loss = match config.aggregation {
                Aggregation::Max => {
                    let bag = aggregate_max(&preds)?;
                    let loss = teacher_bag_loss(&bag, &slide.label);
                    let outputs: Vec<Option<OutputGrad>> =
                        max_backward(&preds, teacher_bag_loss_grad(&bag, &slide.label))
                            .into_iter()
                            .map(|g| g.map(OutputGrad::Probs))
                            .collect();
                    params.backward_batch(&view, &states, &outputs, None, &mut grads);
                    loss
                }
                Aggregation::Attention => {
                    let attn = params.attention.as_ref().expect("attention initialized");
                    let features: Vec<Vec<f64>> = states.iter().map(|s| s.features.clone()).collect();
                    let (bag, cache) = aggregate_attention_cached(&features, &preds, attn)?;
                    let loss = teacher_bag_loss(&bag, &slide.label);
                    let back = attention_backward(
                        &features,
                        &preds,
                        attn,
                        &cache,
                        teacher_bag_loss_grad(&bag, &slide.label),
                        grads.attention.as_mut().expect("attention grads"),
                    );
                    let outputs: Vec<Option<OutputGrad>> = back
                        .grad_preds
                        .iter()
                        .map(|g| Some(OutputGrad::Probs(*g)))
                        .collect();
                    params.backward_batch(&view, &states, &outputs, Some(&back.grad_features), &mut grads);
                    loss
                }
            };
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    slide: slide.id.clone(),
                });
            }
            optimizer.step(params.tensors_mut(), grads.tensors(), lr);
            if !params.all_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    slide: slide.id.clone(),
                });
            }
            history.steps.push(loss);
            epoch_loss += loss;
        }
        let summary = EpochLoss {
            epoch,
            mean_loss: epoch_loss / slides.len() as f64,
            lr,
        };
        on_epoch(&summary);
        history.epochs.push(summary);
    }
    Ok((params, history))
}

/// Max-aggregated bag probabilities (GG3, GG4, GG5) of a bag given as
/// raw `f64` input tensors.
pub fn bag_probs_from_inputs(params: &ModelParameters, inputs: &[Vec<f64>]) -> Result<[f64; 3]> {
    let view = params.encoder_view::<f64>();
    let states = params.forward_batch(&view, inputs)?;
    let preds: Vec<Prediction> = states.iter().map(|s| s.prediction).collect();
    Ok(aggregate_max(&preds)?.bag_probs)
}

/// Analytic gradient of max-aggregated `bag_probs[class]` with respect to the
/// input tensor of every instance (computed in `f64`).
pub fn bag_prob_input_gradients(
    params: &ModelParameters,
    inputs: &[Vec<f64>],
    class: usize,
) -> Result<Vec<Vec<f64>>> {
    if class >= 3 {
        return Err(Error::LabelOutOfRange { label: class, classes: 3 });
    }
    let view = params.encoder_view::<f64>();
    let states = params.forward_batch(&view, inputs)?;
    let preds: Vec<Prediction> = states.iter().map(|s| s.prediction).collect();
    let mut seed = [0.0; 3];
    seed[class] = 1.0;
    let routed = max_backward(&preds, seed);
    let mut scratch = params.zeros_like();
    Ok(states
        .iter()
        .zip(routed)
        .zip(inputs)
        .map(|((state, g), input)| match g {
            Some(dp) => {
                let mut eg = view.zero_grads();
                params
                    .backward_instance(&view, state, Some(OutputGrad::Probs(dp)), None, &mut scratch, &mut eg, true)
                    .expect("input gradient requested")
            }
            None => vec![0.0; input.len()],
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{PatchRecord, Split};
    use crate::grading::GleasonScore;
    use crate::model::HeadActivation;
    use image::RgbImage;
    use rand::Rng;

    fn tiny_model() -> EncoderConfig {
        EncoderConfig {
            input_side: 8,
            feature_dim: 4,
            architecture: "convnet".into(),
            channels: vec![3],
            precision: Precision::F64,
        }
    }

    fn toy_slides(n: usize, seed: u64) -> Vec<Slide> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let score = if i % 2 == 0 {
                    GleasonScore::Benign
                } else {
                    GleasonScore::from_patterns(3, 3).unwrap()
                };
                let patches = (0..4)
                    .map(|j| {
                        let dark = !score.is_benign() && j == 0;
                        PatchRecord {
                            id: format!("s{i}_p{j}"),
                            grid_col: j,
                            grid_row: 0,
                            pixels: RgbImage::from_fn(8, 8, |_, _| {
                                let base: u8 = if dark { 60 } else { 200 };
                                image::Rgb([base + rng.random_range(0..30u8); 3])
                            }),
                        }
                    })
                    .collect();
                Slide::new(format!("s{i}"), score, Split::Train, patches)
            })
            .collect()
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = TrainConfig::default();
        assert!(matches!(
            train_teacher(&[], &tiny_model(), &cfg),
            Err(Error::EmptyDataset(_))
        ));
        let benign_only: Vec<Slide> = toy_slides(4, 1).into_iter().step_by(2).collect();
        assert!(train_teacher(&benign_only, &tiny_model(), &cfg).is_err());
        let zero_epochs = TrainConfig {
            epochs: 0,
            ..cfg
        };
        assert!(matches!(
            train_teacher(&toy_slides(4, 1), &tiny_model(), &zero_epochs),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn seeded_runs_are_identical() {
        let slides = toy_slides(6, 2);
        for aggregation in [Aggregation::Max, Aggregation::Attention] {
            let cfg = TrainConfig {
                epochs: 3,
                aggregation,
                attention_hidden: 3,
                seed: 9,
                ..TrainConfig::default()
            };
            let (a, ha) = train_teacher(&slides, &tiny_model(), &cfg).unwrap();
            let (b, hb) = train_teacher(&slides, &tiny_model(), &cfg).unwrap();
            assert_eq!(a, b);
            assert_eq!(ha, hb);
            assert_eq!(ha.steps.len(), 3 * slides.len());
            assert_eq!(a.attention.is_some(), aggregation == Aggregation::Attention);
        }
    }

    #[test]
    fn loss_decreases_on_separable_bags() {
        let slides = toy_slides(12, 3);
        let cfg = TrainConfig {
            epochs: 20,
            lr_init: 0.1,
            seed: 4,
            ..TrainConfig::default()
        };
        let (_, h) = train_teacher(&slides, &tiny_model(), &cfg).unwrap();
        assert!(h.epochs.last().unwrap().mean_loss < h.epochs[0].mean_loss);
    }

    #[test]
    fn non_argmax_instances_get_zero_gradient() {
        let params = ModelParameters::init(tiny_model(), HeadActivation::Softmax, 5).unwrap();
        let slides = toy_slides(2, 7);
        let inputs: Vec<Vec<f64>> = slides[1]
            .patches
            .iter()
            .map(|p| input_from_rgb::<f64>(&p.pixels))
            .collect();
        for class in 0..3 {
            let g = bag_prob_input_gradients(&params, &inputs, class).unwrap();
            let nonzero = g.iter().filter(|gi| gi.iter().any(|v| *v != 0.0)).count();
            assert_eq!(nonzero, 1);
        }
    }
}
