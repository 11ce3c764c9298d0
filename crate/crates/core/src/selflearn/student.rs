use std::collections::HashMap;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::refine::{PseudoLabelRecord, RefinedLabel};
use super::{epoch_seed, learning_rate, EpochLoss, LossHistory, TrainConfig};
use crate::data::Slide;
use crate::error::{Error, Result};
use crate::grading::{GleasonGrade, GleasonScore, NUM_CLASSES};
use crate::mil::PROB_EPS;
use crate::model::optim::Optimizer;
use crate::model::{
    input_from_rgb, EncoderConfig, HeadActivation, ModelParameters, OutputGrad, Precision,
    Prediction, Real,
};

const SHUFFLE_STREAM: u64 = 3;

/// A patch with a hard training label.
#[derive(Debug, Clone)]
pub struct LabeledPatch {
    pub slide_id: String,
    pub patch_id: String,
    pub pixels: RgbImage,
    pub grade: GleasonGrade,
}

/// `w_c = C * N / N_c`; classes with no samples get weight 0.
pub fn class_weights(counts: [usize; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let n: usize = counts.iter().sum();
    counts.map(|nc| {
        if nc == 0 {
            0.0
        } else {
            (NUM_CLASSES * n) as f64 / nc as f64
        }
    })
}

/// Weighted cross-entropy of one prediction against a hard class.
pub fn student_loss(pred: &Prediction, class: GleasonGrade, weights: &[f64; NUM_CLASSES]) -> f64 {
    let c = class.index();
    let w = weights[c];
    if w == 0.0 {
        return 0.0;
    }
    -(w / NUM_CLASSES as f64) * pred.probs[c].max(PROB_EPS).ln()
}

fn class_counts(patches: &[LabeledPatch]) -> [usize; NUM_CLASSES] {
    let mut counts = [0; NUM_CLASSES];
    for p in patches {
        counts[p.grade.index()] += 1;
    }
    counts
}

/// Mini-batch supervised training from a fresh initialization with the
/// shared epoch schedule.
pub fn train_supervised(
    patches: &[LabeledPatch],
    model: &EncoderConfig,
    config: &TrainConfig,
) -> Result<(ModelParameters, LossHistory)> {
    config.validate()?;
    if patches.is_empty() {
        return Err(Error::EmptyDataset("no labeled patches".into()));
    }
    let counts = class_counts(patches);
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::DegeneratePseudoDataset(format!(
            "need at least two classes, counts {counts:?}"
        )));
    }
    let weights = if config.class_weighting {
        class_weights(counts)
    } else {
        [NUM_CLASSES as f64; NUM_CLASSES]
    };
    let params = ModelParameters::init(model.clone(), config.head_activation, config.seed)?;
    match model.precision {
        Precision::F32 => run::<f32>(patches, params, &weights, config),
        Precision::F64 => run::<f64>(patches, params, &weights, config),
    }
}

fn output_grad(params: &ModelParameters, pred: &Prediction, c: usize, scale: f64) -> OutputGrad {
    match params.head_activation {
        // softmax + CE fused into the logits
        HeadActivation::Softmax => {
            let mut d = pred.probs.map(|p| scale * p);
            d[c] -= scale;
            OutputGrad::Logits(d)
        }
        HeadActivation::Sigmoid => {
            let mut d = [0.0; NUM_CLASSES];
            d[c] = -scale / pred.probs[c].max(PROB_EPS);
            OutputGrad::Probs(d)
        }
    }
}

fn run<T: Real>(
    patches: &[LabeledPatch],
    mut params: ModelParameters,
    weights: &[f64; NUM_CLASSES],
    config: &TrainConfig,
) -> Result<(ModelParameters, LossHistory)> {
    let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let mut optimizer = Optimizer::new(config.optimizer, config.momentum, &shapes);
    let mut history = LossHistory::default();
    let kept: Vec<usize> = (0..patches.len())
        .filter(|&i| weights[patches[i].grade.index()] > 0.0)
        .collect();

    for epoch in 0..config.epochs {
        let lr = learning_rate(epoch, config);
        let mut order = kept.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(config.seed, epoch, SHUFFLE_STREAM)));
        let mut epoch_loss = 0.0;

        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let view = params.encoder_view::<T>();
            let inputs: Vec<Vec<T>> = batch
                .iter()
                .map(|&i| input_from_rgb::<T>(&patches[i].pixels))
                .collect();
            let states = params.forward_batch(&view, &inputs)?;
            let b = batch.len() as f64;
            let mut loss = 0.0;
            let outputs: Vec<Option<OutputGrad>> = batch
                .iter()
                .zip(&states)
                .map(|(&i, s)| {
                    let grade = patches[i].grade;
                    loss += student_loss(&s.prediction, grade, weights);
                    let scale = weights[grade.index()] / NUM_CLASSES as f64 / b;
                    Some(output_grad(&params, &s.prediction, grade.index(), scale))
                })
                .collect();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    slide: patches[batch[0]].slide_id.clone(),
                });
            }
            let mut grads = params.zeros_like();
            params.backward_batch(&view, &states, &outputs, None, &mut grads);
            optimizer.step(params.tensors_mut(), grads.tensors(), lr);
            if !params.all_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    slide: patches[batch[0]].slide_id.clone(),
                });
            }
            history.steps.push(loss / b);
            epoch_loss += loss;
        }
        let summary = EpochLoss {
            epoch,
            mean_loss: epoch_loss / kept.len() as f64,
            lr,
        };
        history.epochs.push(summary);
    }
    Ok((params, history))
}

/// Trains the student on the non-discarded pseudo-labels.
pub fn train_student(
    records: &[PseudoLabelRecord],
    slides: &[Slide],
    model: &EncoderConfig,
    config: &TrainConfig,
) -> Result<(ModelParameters, LossHistory)> {
    let lookup: HashMap<(&str, &str), &RgbImage> = slides
        .iter()
        .flat_map(|s| s.patches.iter().map(move |p| ((s.id.as_str(), p.id.as_str()), &p.pixels)))
        .collect();
    let mut patches = Vec::new();
    for r in records {
        let RefinedLabel::Grade(grade) = r.refined else {
            continue;
        };
        let pixels = lookup
            .get(&(r.slide_id.as_str(), r.patch_id.as_str()))
            .ok_or_else(|| {
                Error::InvalidLabel(format!("unknown patch {} in slide {}", r.patch_id, r.slide_id))
            })?;
        patches.push(LabeledPatch {
            slide_id: r.slide_id.clone(),
            patch_id: r.patch_id.clone(),
            pixels: (*pixels).clone(),
            grade,
        });
    }
    if patches.is_empty() {
        return Err(Error::DegeneratePseudoDataset("no kept pseudo-labels".into()));
    }
    train_supervised(&patches, model, config)
}

/// Every patch of benign and single-grade slides, labeled with the slide's
/// grade. Mixed-grade slides are skipped.
pub fn global_assignment_dataset(slides: &[Slide]) -> Vec<LabeledPatch> {
    let mut out = Vec::new();
    for s in slides {
        let grade = match s.score {
            GleasonScore::Benign => GleasonGrade::Nc,
            GleasonScore::Cancerous { primary, secondary } if primary == secondary => primary,
            _ => continue,
        };
        out.extend(s.patches.iter().map(|p| LabeledPatch {
            slide_id: s.id.clone(),
            patch_id: p.id.clone(),
            pixels: p.pixels.clone(),
            grade,
        }));
    }
    out
}

pub fn train_global_baseline(
    slides: &[Slide],
    model: &EncoderConfig,
    config: &TrainConfig,
) -> Result<(ModelParameters, LossHistory)> {
    train_supervised(&global_assignment_dataset(slides), model, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{PatchRecord, Split};
    use crate::model::predict_images;
    use proptest::prelude::*;

    #[test]
    fn weight_examples() {
        assert_eq!(class_weights([200, 100, 50, 50]), [8.0, 16.0, 32.0, 32.0]);
        assert_eq!(class_weights([100; 4]), [16.0; 4]);
        assert_eq!(class_weights([1; 4]), [16.0; 4]);
        assert_eq!(class_weights([0, 10, 10, 0]), [0.0, 8.0, 8.0, 0.0]);
    }

    #[test]
    fn loss_examples() {
        let uniform = Prediction { probs: [0.25; 4] };
        let l = student_loss(&uniform, GleasonGrade::Gg3, &[16.0; 4]);
        assert!((l - 4.0 * 4f64.ln()).abs() < 1e-12);
        assert!((l - 5.5452).abs() < 1e-4);
        let sure = Prediction { probs: [0.0, 1.0, 0.0, 0.0] };
        assert_eq!(student_loss(&sure, GleasonGrade::Gg3, &[16.0; 4]), 0.0);
        assert_eq!(student_loss(&uniform, GleasonGrade::Nc, &[0.0, 4.0, 4.0, 4.0]), 0.0);
        let zero = Prediction { probs: [1.0, 0.0, 0.0, 0.0] };
        assert!(student_loss(&zero, GleasonGrade::Gg5, &[16.0; 4]).is_finite());
    }

    proptest! {
        #[test]
        fn weights_equalize_class_mass(counts in prop::array::uniform4(0usize..500)) {
            let w = class_weights(counts);
            let n: usize = counts.iter().sum();
            for c in 0..4 {
                if counts[c] > 0 {
                    // every present class carries the same total weight C*N
                    prop_assert!((w[c] * counts[c] as f64 - (4 * n) as f64).abs() < 1e-6);
                } else {
                    prop_assert_eq!(w[c], 0.0);
                }
            }
        }
    }

    fn tiny_model() -> EncoderConfig {
        EncoderConfig {
            input_side: 8,
            feature_dim: 4,
            architecture: "convnet".into(),
            channels: vec![3],
            precision: Precision::F64,
        }
    }

    fn solid(v: u8) -> RgbImage {
        RgbImage::from_pixel(8, 8, image::Rgb([v, v / 2, 255 - v]))
    }

    fn slide(id: &str, p: u8, s: u8, n: usize) -> Slide {
        let patches = (0..n)
            .map(|j| PatchRecord {
                id: format!("{id}_x{j}_y0"),
                grid_col: j as u32,
                grid_row: 0,
                pixels: solid((40 + 30 * j) as u8),
            })
            .collect();
        Slide::new(id, GleasonScore::from_patterns(p, s).unwrap(), Split::Train, patches)
    }

    #[test]
    fn global_assignment_rule() {
        let slides = vec![slide("a", 4, 4, 30), slide("b", 3, 4, 5), slide("c", 0, 0, 3)];
        let d = global_assignment_dataset(&slides);
        assert_eq!(d.iter().filter(|p| p.grade == GleasonGrade::Gg4).count(), 30);
        assert!(d.iter().all(|p| p.slide_id != "b"));
        assert_eq!(d.iter().filter(|p| p.grade == GleasonGrade::Nc).count(), 3);
        assert_eq!(d.len(), 33);
    }

    fn record(slide: &str, patch: &str, refined: RefinedLabel) -> PseudoLabelRecord {
        PseudoLabelRecord {
            slide_id: slide.into(),
            patch_id: patch.into(),
            teacher_probs: [0.25; 4],
            refined,
        }
    }

    #[test]
    fn degenerate_sets_are_rejected() {
        let slides = vec![slide("a", 3, 3, 2)];
        let cfg = TrainConfig::default();
        assert!(matches!(
            train_student(&[], &slides, &tiny_model(), &cfg),
            Err(Error::DegeneratePseudoDataset(_))
        ));
        let single = vec![
            record("a", "a_x0_y0", RefinedLabel::Grade(GleasonGrade::Gg3)),
            record("a", "a_x1_y0", RefinedLabel::Grade(GleasonGrade::Gg3)),
        ];
        assert!(matches!(
            train_student(&single, &slides, &tiny_model(), &cfg),
            Err(Error::DegeneratePseudoDataset(_))
        ));
        let unknown = vec![record("a", "nope", RefinedLabel::Grade(GleasonGrade::Gg3))];
        assert!(train_student(&unknown, &slides, &tiny_model(), &cfg).is_err());
    }

    #[test]
    fn learns_separable_labels_deterministically() {
        let slides = vec![slide("a", 0, 0, 4), slide("b", 5, 5, 4)];
        let mut records = Vec::new();
        for s in &slides {
            for (j, p) in s.patches.iter().enumerate() {
                let grade = if j < 2 { GleasonGrade::Nc } else { GleasonGrade::Gg5 };
                let refined = if s.id == "a" && j == 3 {
                    RefinedLabel::Discard
                } else {
                    RefinedLabel::Grade(grade)
                };
                records.push(record(&s.id, &p.id, refined));
            }
        }
        let cfg = TrainConfig {
            epochs: 60,
            lr_init: 0.1,
            batch_size: 4,
            seed: 3,
            ..TrainConfig::default()
        };
        let (a, ha) = train_student(&records, &slides, &tiny_model(), &cfg).unwrap();
        let (b, _) = train_student(&records, &slides, &tiny_model(), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha.epochs.len(), 60);
        assert!(ha.epochs.last().unwrap().mean_loss < ha.epochs[0].mean_loss);
        let imgs: Vec<&RgbImage> = slides[1].patches.iter().map(|p| &p.pixels).collect();
        let preds = predict_images(&a, &imgs).unwrap();
        assert_eq!(preds[0].1.grade(), GleasonGrade::Nc);
        assert_eq!(preds[3].1.grade(), GleasonGrade::Gg5);
    }
}
