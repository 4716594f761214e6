//! Comparison methods: KL-DRO, Wasserstein DRO and data augmentation.

mod augment;
mod kl;
mod wdro;

pub use augment::{augment, train_augmented, AugmentConfig, AugmentKind};
pub use kl::{kl_worst_case, train_kl_dro, KlDroConfig, WorstCase};
pub use wdro::{perturb_batch, train_w_dro, PerturbReport, WDroConfig};

use crate::predictor::TrainConfig;

/// Baseline training schedule: lr 2e-5, 100 epochs, batch 64.
pub fn baseline_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 100,
        batch: 64,
        lr: 2e-5,
        ..TrainConfig::default()
    }
}
