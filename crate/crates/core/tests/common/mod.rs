#![allow(dead_code)]

use std::path::Path;

use pipenet_core::augment::AugmentConfig;
use pipenet_core::dataset::{generate_synthetic, SyntheticSpec, VideoSample};
use pipenet_core::model::{build_pipenet, named_portfolio_with, ArchWidths, ModelHandle};
use pipenet_core::schedule::ScheduleConfig;
use pipenet_core::trainer::TrainConfig;

pub fn tiny_widths() -> ArchWidths {
    ArchWidths {
        stem_channels: 4,
        stage_channels: (8, 16),
        cardinality: 4,
        fusion_channels: 16,
        fusion_repeats: 1,
        srb_repeats: (1, 1),
    }
}

pub fn tiny_augment() -> AugmentConfig {
    AugmentConfig {
        resize_to: 24,
        patch_size: 16,
        ..AugmentConfig::default()
    }
}

pub fn tiny_model(portfolio: &str, seed: u64) -> ModelHandle {
    let aug = tiny_augment();
    let spec = named_portfolio_with(portfolio, &tiny_widths()).unwrap();
    build_pipenet(&spec, aug.input_channels(), aug.patch_size, seed).unwrap()
}

pub fn tiny_train_config(cycles: usize, epochs_per_cycle: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        frames_per_video: 2,
        schedule: ScheduleConfig {
            cycles,
            epochs_per_cycle,
            ..ScheduleConfig::default()
        },
        ..TrainConfig::default()
    }
}

pub fn videos(dir: &Path, n_live: usize, n_attack: usize, frames: usize, seed: u64) -> Vec<VideoSample> {
    let spec = SyntheticSpec {
        n_live,
        n_attack,
        frames_per_video: frames,
        image_size: 24,
        seed,
        ..SyntheticSpec::default()
    };
    generate_synthetic(&spec, dir).unwrap().load_all().unwrap()
}
