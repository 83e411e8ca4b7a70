//! Deterministic synthetic multi-modal face clips.
//!
//! Live clips show a curved face in depth (a dome with a nose bump), a
//! textured skin response in IR and a shaded skin tone in RGB. Attack clips
//! carry instrument-specific defects:
//!
//! - `flat_print`: a sheet of paper, so depth is a constant plane and IR has
//!   no curvature;
//! - `replay`: a screen, so depth is flat and RGB / IR carry a periodic
//!   moire texture;
//! - `mask3d`: a curved mask, so depth looks live but IR is anomalously bright
//!   and untextured.
//!
//! Output is a pure function of the spec: each sample draws from its own
//! ChaCha stream keyed by `(seed, sample index)`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{load_manifest, DatasetError, DatasetIndex, Label, SubProtocol, MANIFEST_FILE};
use crate::modality::ModalityId;

pub const SPEC_ECHO_FILE: &str = "spec.echo";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackType {
    FlatPrint,
    Replay,
    Mask3d,
}

impl AttackType {
    pub const ALL: [AttackType; 3] = [AttackType::FlatPrint, AttackType::Replay, AttackType::Mask3d];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackType::FlatPrint => "flat_print",
            AttackType::Replay => "replay",
            AttackType::Mask3d => "mask3d",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_live: usize,
    pub n_attack: usize,
    pub frames_per_video: usize,
    pub image_size: usize,
    pub attack_type_mix: BTreeMap<AttackType, f64>,
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_live: 20,
            n_attack: 20,
            frames_per_video: 8,
            image_size: 48,
            attack_type_mix: AttackType::ALL.iter().map(|&t| (t, 1.0 / 3.0)).collect(),
            noise_level: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::InvalidSpec(m));
        if self.n_live == 0 || self.n_attack == 0 || self.frames_per_video == 0 {
            return bad("n_live, n_attack and frames_per_video must be at least 1".into());
        }
        if self.image_size < 16 {
            return bad(format!("image_size {} is below the 16 pixel minimum", self.image_size));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return bad(format!("noise_level {} outside [0, 1]", self.noise_level));
        }
        if self.attack_type_mix.values().any(|&p| !(p >= 0.0)) {
            return bad("attack proportions must be non-negative".into());
        }
        let total: f64 = self.attack_type_mix.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("attack proportions sum to {total}, expected 1"));
        }
        Ok(())
    }

    /// Attack types for attack samples `0..n_attack`, allocated by largest remainder.
    pub fn attack_schedule(&self) -> Vec<AttackType> {
        let n = self.n_attack as f64;
        let quotas: Vec<(AttackType, f64)> = self.attack_type_mix.iter().map(|(&t, &p)| (t, p * n)).collect();
        let mut counts: Vec<(AttackType, usize)> = quotas.iter().map(|&(t, q)| (t, q.floor() as usize)).collect();
        let mut order: Vec<usize> = (0..quotas.len()).collect();
        order.sort_by(|&a, &b| {
            let fa = quotas[a].1 - quotas[a].1.floor();
            let fb = quotas[b].1 - quotas[b].1.floor();
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        let mut left = self.n_attack - counts.iter().map(|c| c.1).sum::<usize>().min(self.n_attack);
        for &i in order.iter().cycle().take(left * quotas.len().max(1)) {
            if left == 0 {
                break;
            }
            counts[i].1 += 1;
            left -= 1;
        }
        counts.into_iter().flat_map(|(t, c)| std::iter::repeat_n(t, c)).collect()
    }
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    Live,
    Attack(AttackType),
}

/// Per-sample appearance parameters.
struct Appearance {
    centre: (f64, f64),
    radii: (f64, f64),
    drift_phase: f64,
    skin: [f64; 3],
    background: [f64; 3],
    texture: Vec<f64>,
    stripe_period: f64,
    stripe_phase: f64,
}

const TEXTURE_GRID: usize = 8;

impl Appearance {
    fn draw(size: f64, rng: &mut ChaCha8Rng) -> Self {
        let tones = [[224.0, 172.0, 140.0], [198.0, 134.0, 96.0], [141.0, 85.0, 54.0], [236.0, 192.0, 160.0]];
        let tone = tones[rng.random_range(0..tones.len())];
        let jitter = |rng: &mut ChaCha8Rng, v: f64| (v + rng.random_range(-12.0..12.0)).clamp(0.0, 255.0);
        let skin = [jitter(rng, tone[0]), jitter(rng, tone[1]), jitter(rng, tone[2])];
        let background = [
            rng.random_range(20.0..90.0),
            rng.random_range(20.0..90.0),
            rng.random_range(20.0..90.0),
        ];
        let rx = size * rng.random_range(0.30..0.36);
        Self {
            centre: (
                size / 2.0 + size * rng.random_range(-0.04..0.04),
                size / 2.0 + size * rng.random_range(-0.04..0.04),
            ),
            radii: (rx, rx * rng.random_range(1.15..1.3)),
            drift_phase: rng.random_range(0.0..2.0 * PI),
            skin,
            background,
            texture: (0..TEXTURE_GRID * TEXTURE_GRID)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
            stripe_period: rng.random_range(3.0..4.5),
            stripe_phase: rng.random_range(0.0..2.0 * PI),
        }
    }

    /// Bilinear value noise in `[-1, 1]`.
    fn texture_at(&self, x: f64, y: f64, size: f64) -> f64 {
        let scale = (TEXTURE_GRID - 1) as f64 / size;
        let (gx, gy) = ((x * scale).clamp(0.0, 6.999), (y * scale).clamp(0.0, 6.999));
        let (ix, iy) = (gx as usize, gy as usize);
        let (fx, fy) = (gx - ix as f64, gy - iy as f64);
        let at = |i: usize, j: usize| self.texture[j * TEXTURE_GRID + i];
        let top = at(ix, iy) * (1.0 - fx) + at(ix + 1, iy) * fx;
        let bottom = at(ix, iy + 1) * (1.0 - fx) + at(ix + 1, iy + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

struct RenderedFrame {
    rgb: Vec<f64>,
    depth: Vec<f64>,
    ir: Vec<f64>,
}

fn render(kind: Kind, look: &Appearance, size: usize, frame: usize, frames: usize) -> RenderedFrame {
    let s = size as f64;
    let angle = 2.0 * PI * frame as f64 / frames as f64 + look.drift_phase;
    let (cx, cy) = (look.centre.0 + 0.03 * s * angle.sin(), look.centre.1 + 0.03 * s * angle.cos());
    let (rx, ry) = look.radii;
    let nose_sigma = 0.22 * rx;
    let mut out = RenderedFrame {
        rgb: Vec::with_capacity(size * size * 3),
        depth: Vec::with_capacity(size * size),
        ir: Vec::with_capacity(size * size),
    };
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
            let (u, v) = ((xf - cx) / rx, (yf - cy) / ry);
            let r2 = u * u + v * v;
            let inside = r2 < 1.0;
            let height = (1.0 - r2).max(0.0).sqrt();
            let nose = (-((xf - cx).powi(2) + (yf - cy - 0.1 * ry).powi(2)) / (2.0 * nose_sigma * nose_sigma)).exp();
            let tex = look.texture_at(xf, yf, s);
            let stripes = (2.0 * PI * yf / look.stripe_period + look.stripe_phase).sin();
            let shaded = |k: f64| look.skin.map(|c| c * k);

            let (rgb, depth, ir) = match kind {
                Kind::Live => {
                    if inside {
                        let c = shaded(0.55 + 0.45 * height);
                        (c.map(|v| v + 10.0 * tex), 70.0 + 150.0 * height + 25.0 * nose, 110.0 + 50.0 * height + 18.0 * tex)
                    } else {
                        (look.background, 15.0, 25.0)
                    }
                }
                Kind::Attack(AttackType::FlatPrint) => {
                    if inside {
                        let c = look.skin.map(|c| (0.7 * c + 60.0) * (0.85 + 0.15 * height));
                        (c, 90.0, 100.0 + 8.0 * tex)
                    } else {
                        ([210.0, 208.0, 200.0], 90.0, 80.0)
                    }
                }
                Kind::Attack(AttackType::Replay) => {
                    let base = if inside {
                        let c = shaded(0.55 + 0.45 * height);
                        [c[0] * 0.9, c[1] * 0.95, c[2] + 15.0]
                    } else {
                        look.background
                    };
                    (base.map(|v| v + 18.0 * stripes), 70.0, 40.0 + 12.0 * stripes)
                }
                Kind::Attack(AttackType::Mask3d) => {
                    if inside {
                        let c = look.skin.map(|c| 0.85 * c + 25.0);
                        (c, 70.0 + 140.0 * height, 215.0 + 5.0 * tex)
                    } else {
                        (look.background, 15.0, 25.0)
                    }
                }
            };
            out.rgb.extend_from_slice(&rgb);
            out.depth.push(depth);
            out.ir.push(ir);
        }
    }
    out
}

fn quantise(values: &[f64], noise: &Normal<f64>, rng: &mut ChaCha8Rng) -> Vec<u8> {
    values
        .iter()
        .map(|&v| (v + noise.sample(rng)).round().clamp(0.0, 255.0) as u8)
        .collect()
}

fn write_png(path: &Path, data: &[u8], size: usize, color: image::ExtendedColorType) -> Result<(), DatasetError> {
    image::save_buffer(path, data, size as u32, size as u32, color).map_err(|e| match e {
        image::ImageError::IoError(io) => DatasetError::io(path, io),
        other => DatasetError::io(path, std::io::Error::other(other.to_string())),
    })
}

/// Writes a manifest, a `spec.echo` file and the sample tree under
/// `out_dir`, then loads it back.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<DatasetIndex, DatasetError> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| DatasetError::io(out_dir, e))?;
    let echo = serde_json::to_string_pretty(spec).expect("spec serialises");
    let echo_path = out_dir.join(SPEC_ECHO_FILE);
    fs::write(&echo_path, echo + "\n").map_err(|e| DatasetError::io(&echo_path, e))?;

    let attacks = spec.attack_schedule();
    let kinds = (0..spec.n_live)
        .map(|i| (i, Kind::Live))
        .chain(attacks.iter().enumerate().map(|(i, &t)| (i, Kind::Attack(t))));
    let noise = Normal::new(0.0, 25.0 * spec.noise_level).expect("valid noise std");
    let mut manifest = String::new();
    for (stream, (class_idx, kind)) in kinds.enumerate() {
        let protocol = SubProtocol::ALL[class_idx % 3];
        let (dir_name, label) = match kind {
            Kind::Live => (format!("live_{class_idx:03}"), Label::Live),
            Kind::Attack(t) => (format!("attack_{class_idx:03}_{}", t.as_str()), Label::Attack),
        };
        let rel = format!("{protocol}/{dir_name}");
        let root = out_dir.join(&rel);
        for m in ModalityId::ALL {
            let dir = root.join(m.as_str());
            fs::create_dir_all(&dir).map_err(|e| DatasetError::io(&dir, e))?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream as u64);
        let look = Appearance::draw(spec.image_size as f64, &mut rng);
        for f in 0..spec.frames_per_video {
            let frame = render(kind, &look, spec.image_size, f, spec.frames_per_video);
            let name = format!("{f:03}.png");
            let rgb = quantise(&frame.rgb, &noise, &mut rng);
            let depth = quantise(&frame.depth, &noise, &mut rng);
            let ir = quantise(&frame.ir, &noise, &mut rng);
            write_png(&root.join("rgb").join(&name), &rgb, spec.image_size, image::ExtendedColorType::Rgb8)?;
            write_png(&root.join("depth").join(&name), &depth, spec.image_size, image::ExtendedColorType::L8)?;
            write_png(&root.join("ir").join(&name), &ir, spec.image_size, image::ExtendedColorType::L8)?;
        }
        manifest.push_str(&format!("{rel} {}\n", label.class_index()));
    }
    let manifest_path = out_dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, manifest).map_err(|e| DatasetError::io(&manifest_path, e))?;
    load_manifest(&manifest_path)
}
