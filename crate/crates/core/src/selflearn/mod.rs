//! Teacher training on bag labels, pseudo-label refinement, and supervised
//! training of the student and the global-assignment baseline.

mod refine;
mod student;
mod teacher;

use serde::{Deserialize, Serialize};

pub use refine::{refine_labels, refine_one, PseudoLabelRecord, PseudoLabelRow, RefinedLabel, TeacherPrediction};
pub use student::{
    class_weights, global_assignment_dataset, student_loss, train_global_baseline, train_student,
    train_supervised, LabeledPatch,
};
pub use teacher::{bag_prob_input_gradients, bag_probs_from_inputs, train_teacher, train_teacher_with};

use crate::error::{Error, Result};
use crate::mil::{Aggregation, AttentionNormalization};
use crate::model::optim::OptimizerKind;
use crate::model::HeadActivation;

/// Which epoch index drives the exponential tail decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DecayIndex {
    #[default]
    TailStart,
    TrainingStart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub lr_init: f64,
    pub lr_drop_factor: f64,
    pub decay_tail_epochs: usize,
    pub decay_index: DecayIndex,
    pub max_patches_per_bag: usize,
    pub batch_size: usize,
    /// Apply per-class loss weights in supervised training.
    pub class_weighting: bool,
    pub seed: u64,
    pub aggregation: Aggregation,
    pub attention_hidden: usize,
    pub attention_normalization: AttentionNormalization,
    pub head_activation: HeadActivation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.0,
            lr_init: 1e-2,
            lr_drop_factor: 10.0,
            decay_tail_epochs: 5,
            decay_index: DecayIndex::TailStart,
            max_patches_per_bag: 200,
            batch_size: 32,
            class_weighting: true,
            seed: 0,
            aggregation: Aggregation::Max,
            attention_hidden: 16,
            attention_normalization: AttentionNormalization::Joint,
            head_activation: HeadActivation::Softmax,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.epochs < 1 {
            return bad("epochs must be >= 1");
        }
        if !(self.lr_init > 0.0 && self.lr_init.is_finite()) {
            return bad("lr_init must be > 0");
        }
        if !(self.lr_drop_factor >= 1.0) {
            return bad("lr_drop_factor must be >= 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.max_patches_per_bag < 1 {
            return bad("max_patches_per_bag must be >= 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1");
        }
        if self.attention_hidden < 1 {
            return bad("attention_hidden must be >= 1");
        }
        Ok(())
    }
}

/// Step schedule: `lr_init` for the first half, divided by `lr_drop_factor`
/// afterwards, and an exponential decay `(lr_init/drop) * exp(-0.1 t)` over the
/// last `decay_tail_epochs` epochs. The tail never overlaps the first dropped
/// epoch, so short runs clip it.
pub fn learning_rate(epoch: usize, config: &TrainConfig) -> f64 {
    let half = config.epochs.div_ceil(2);
    if epoch < half {
        return config.lr_init;
    }
    let dropped = config.lr_init / config.lr_drop_factor;
    let tail_start = config
        .epochs
        .saturating_sub(config.decay_tail_epochs)
        .max(half + 1);
    if epoch < tail_start {
        return dropped;
    }
    let t = match config.decay_index {
        DecayIndex::TailStart => epoch - tail_start + 1,
        DecayIndex::TrainingStart => epoch + 1,
    };
    dropped * (-0.1 * t as f64).exp()
}

/// Mean loss and learning rate of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossHistory {
    /// One entry per optimization step.
    pub steps: Vec<f64>,
    pub epochs: Vec<EpochLoss>,
}

/// Seed for a per-epoch stream derived from the run seed.
pub(crate) fn epoch_seed(seed: u64, epoch: usize, stream: u64) -> u64 {
    let mut x = seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(epoch as u64 + 1) ^ stream.rotate_left(32);
    // splitmix64 finalizer
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
