//! Per-modality preprocessing: colour conversion, resizing, patch cropping,
//! tensor conversion and modal dropout.
//!
//! Only the RGB stream is colour converted; depth and IR are single-channel
//! already. Patch origins are drawn from a seeded ChaCha stream so a crop is
//! reproducible from `(frames, config, seed)`.

use image::imageops::{self, FilterType};
use image::{GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Frame, VideoSample};
use crate::modality::{ModalityId, PerModality};
use crate::model::ModalBatch;
use crate::nn::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("colour mode {mode:?} needs a 3-channel frame, got {channels} channels")]
    ChannelMismatch { mode: ColorMode, channels: usize },
    #[error("patch size {patch} exceeds frame size {frame}")]
    PatchTooLarge { patch: usize, frame: usize },
    #[error("frame is {width}x{height}, expected {expected}x{expected}")]
    FrameSize { width: usize, height: usize, expected: usize },
    #[error("invalid augment config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorMode {
    None,
    Gray,
    Hsv,
    Ycbcr,
}

impl ColorMode {
    /// Channel count after conversion of a frame with `input` channels.
    pub fn output_channels(self, input: usize) -> usize {
        match self {
            ColorMode::None => input,
            ColorMode::Gray => 1,
            ColorMode::Hsv | ColorMode::Ycbcr => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropMode {
    Random,
    Center,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub resize_to: usize,
    pub patch_size: usize,
    pub rgb_color_mode: ColorMode,
    pub shared_patch_coords: bool,
    pub modal_dropout_p: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            resize_to: 112,
            patch_size: 64,
            rgb_color_mode: ColorMode::Gray,
            shared_patch_coords: true,
            modal_dropout_p: 0.3,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if self.patch_size == 0 {
            return Err(AugmentError::InvalidConfig("patch_size must be at least 1".into()));
        }
        if self.patch_size > self.resize_to {
            return Err(AugmentError::PatchTooLarge {
                patch: self.patch_size,
                frame: self.resize_to,
            });
        }
        if !(0.0..=1.0).contains(&self.modal_dropout_p) {
            return Err(AugmentError::InvalidConfig(format!(
                "modal_dropout_p {} outside [0, 1]",
                self.modal_dropout_p
            )));
        }
        Ok(())
    }

    /// Network input channels per modality (RGB source frames have 3).
    pub fn input_channels(&self) -> PerModality<usize> {
        PerModality::new(self.rgb_color_mode.output_channels(3), 1, 1)
    }
}

/// One patch per modality plus the origin `(x, y)` it was cut from.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTriplet {
    pub patches: PerModality<Frame>,
    pub origins: PerModality<(usize, usize)>,
}

fn round_u8(v: f64) -> u8 {
    v.round_ties_even().clamp(0.0, 255.0) as u8
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// HSV in the 8-bit convention: `H` in degrees halved to `[0, 180)`,
/// `S` and `V` scaled to `[0, 255]`.
fn rgb_to_hsv(r: f64, g: f64, b: f64) -> [u8; 3] {
    let v = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = v - min;
    let s = if v > 0.0 { 255.0 * delta / v } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if v == r {
        60.0 * (g - b) / delta
    } else if v == g {
        120.0 + 60.0 * (b - r) / delta
    } else {
        240.0 + 60.0 * (r - g) / delta
    };
    let h = if h < 0.0 { h + 360.0 } else { h };
    let h = (h / 2.0).round_ties_even();
    [if h >= 180.0 { 0 } else { h as u8 }, round_u8(s), round_u8(v)]
}

/// Full-range BT.601 YCbCr.
fn rgb_to_ycbcr(r: f64, g: f64, b: f64) -> [u8; 3] {
    [
        round_u8(luma(r, g, b)),
        round_u8(128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b),
        round_u8(128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b),
    ]
}

pub fn to_color_space(frame: &Frame, mode: ColorMode) -> Result<Frame, AugmentError> {
    if mode == ColorMode::None {
        return Ok(frame.clone());
    }
    if frame.channels != 3 {
        return Err(AugmentError::ChannelMismatch {
            mode,
            channels: frame.channels,
        });
    }
    let px = frame.data.chunks_exact(3).map(|p| (p[0] as f64, p[1] as f64, p[2] as f64));
    let data: Vec<u8> = match mode {
        ColorMode::Gray => px.map(|(r, g, b)| round_u8(luma(r, g, b))).collect(),
        ColorMode::Hsv => px.flat_map(|(r, g, b)| rgb_to_hsv(r, g, b)).collect(),
        ColorMode::Ycbcr => px.flat_map(|(r, g, b)| rgb_to_ycbcr(r, g, b)).collect(),
        ColorMode::None => unreachable!(),
    };
    Ok(Frame::new(frame.width, frame.height, mode.output_channels(3), data))
}

/// Bilinear resize to `size x size`; frames already at that size are copied.
pub fn resize(frame: &Frame, size: usize) -> Frame {
    if frame.width == size && frame.height == size {
        return frame.clone();
    }
    let (w, h, s) = (frame.width as u32, frame.height as u32, size as u32);
    let data = match frame.channels {
        1 => {
            let img = GrayImage::from_raw(w, h, frame.data.clone()).expect("buffer matches dimensions");
            imageops::resize(&img, s, s, FilterType::Triangle).into_raw()
        }
        3 => {
            let img = RgbImage::from_raw(w, h, frame.data.clone()).expect("buffer matches dimensions");
            imageops::resize(&img, s, s, FilterType::Triangle).into_raw()
        }
        c => panic!("unsupported channel count {c}"),
    };
    Frame::new(size, size, frame.channels, data)
}

/// Colour-converts and resizes every frame of a video once, ahead of cropping.
pub fn prepare_video(video: &VideoSample, cfg: &AugmentConfig) -> Result<PerModality<Vec<Frame>>, AugmentError> {
    let mut out = PerModality::new(Vec::new(), Vec::new(), Vec::new());
    for m in ModalityId::ALL {
        for frame in &video.frames[m] {
            let converted = if m == ModalityId::Rgb {
                to_color_space(frame, cfg.rgb_color_mode)?
            } else {
                frame.clone()
            };
            out[m].push(resize(&converted, cfg.resize_to));
        }
    }
    Ok(out)
}

pub fn crop_patch(
    frames: PerModality<&Frame>,
    cfg: &AugmentConfig,
    mode: CropMode,
    seed: u64,
) -> Result<PatchTriplet, AugmentError> {
    let size = cfg.resize_to;
    if cfg.patch_size > size {
        return Err(AugmentError::PatchTooLarge {
            patch: cfg.patch_size,
            frame: size,
        });
    }
    for (_, f) in frames.iter() {
        if f.width != size || f.height != size {
            return Err(AugmentError::FrameSize {
                width: f.width,
                height: f.height,
                expected: size,
            });
        }
    }
    let range = size - cfg.patch_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || match mode {
        CropMode::Center => (range / 2, range / 2),
        CropMode::Random => (rng.random_range(0..=range), rng.random_range(0..=range)),
    };
    let origins = if cfg.shared_patch_coords {
        let o = draw();
        PerModality::new(o, o, o)
    } else {
        PerModality::from_fn(|_| draw())
    };
    let patches = PerModality::from_fn(|m| frames[m].crop(origins[m].0, origins[m].1, cfg.patch_size));
    Ok(PatchTriplet { patches, origins })
}

/// Maps 8-bit values to `[-1, 1]` in planar (CHW) order.
pub fn frame_to_chw(frame: &Frame, out: &mut [f64]) {
    let plane = frame.width * frame.height;
    assert_eq!(out.len(), plane * frame.channels);
    for (i, px) in frame.data.chunks_exact(frame.channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            out[c * plane + i] = (v as f64 / 255.0 - 0.5) * 2.0;
        }
    }
}

/// Stacks patch triplets into one tensor batch per modality.
pub fn to_batch(triplets: &[PatchTriplet]) -> ModalBatch {
    PerModality::from_fn(|m| {
        let first = &triplets[0].patches[m];
        let mut t = Tensor::zeros([triplets.len(), first.channels, first.height, first.width]);
        for (i, tri) in triplets.iter().enumerate() {
            frame_to_chw(&tri.patches[m], t.sample_mut(i));
        }
        t
    })
}

/// Zeroes one uniformly chosen modality of each element with probability `p`.
/// Returns the erased modality per element.
pub fn modal_dropout(batch: &mut ModalBatch, p: f64, seed: u64) -> Vec<Option<ModalityId>> {
    let n = batch.rgb.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            if rng.random::<f64>() < p {
                let m = ModalityId::ALL[rng.random_range(0..3)];
                batch[m].sample_mut(i).fill(0.0);
                Some(m)
            } else {
                None
            }
        })
        .collect()
}
