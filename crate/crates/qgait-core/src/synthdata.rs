//! Deterministic synthetic silhouette sequences.
//!
//! Each identity is an articulated stick figure — ellipse torso, circle
//! head, two oscillating leg capsules — whose proportions come from a
//! seeded per-identity parameter draw. Sequences vary the gait phase and
//! flip a fixed number of noise pixels per frame. All content is a pure
//! function of `(seed, config)`: every random draw is keyed by
//! `(seed, id, seq, frame)`, never by generation order.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::rng::{keyed, SplitMix64};
use crate::tensor::Tensor;

/// Per-identity body-shape parameters. Ratios are relative to the frame
/// extents; ranges are fixed in [`IdentitySpec::draw`].
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IdentitySpec {
    pub id: u32,
    pub torso_width_ratio: f64,
    pub leg_length_ratio: f64,
    pub stride_amplitude: f64,
    pub head_radius_ratio: f64,
    pub base_phase: f64,
}

impl IdentitySpec {
    /// Documented draw ranges: torso width in [0.30, 0.58] (of W/2),
    /// leg length in [0.30, 0.42] (of H), stride amplitude in
    /// [0.30, 0.75] rad, head radius in [0.055, 0.105] (of H).
    pub fn draw(seed: u64, id: u32) -> Self {
        let mut r = keyed(&[seed, 0x1d, id as u64]);
        IdentitySpec {
            id,
            torso_width_ratio: r.uniform(0.30, 0.58),
            leg_length_ratio: r.uniform(0.30, 0.42),
            stride_amplitude: r.uniform(0.30, 0.75),
            head_radius_ratio: r.uniform(0.055, 0.105),
            base_phase: r.uniform(0.0, core::f64::consts::TAU),
        }
    }
}

/// Covariate tag carried by a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Covariate {
    None,
    Carry,
    Dilate,
}

/// A T×1×H×W binary frame stack with identity label and covariate tag.
#[derive(Debug, Clone, PartialEq)]
pub struct SilhouetteSequence {
    pub frames: Vec<u8>,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub identity: u32,
    pub seq_id: u32,
    pub covariate: Covariate,
}

impl SilhouetteSequence {
    pub fn frame(&self, t: usize) -> &[u8] {
        &self.frames[t * self.h * self.w..(t + 1) * self.h * self.w]
    }

    /// Frames as a `[T, 1, H, W]` float tensor.
    pub fn to_tensor(&self) -> Tensor {
        let data: Vec<f64> = self.frames.iter().map(|&b| b as f64).collect();
        Tensor::from_vec(vec![self.t, 1, self.h, self.w], data)
    }

    pub fn foreground_fraction(&self, t: usize) -> f64 {
        let f = self.frame(t);
        f.iter().map(|&b| b as usize).sum::<usize>() as f64 / f.len() as f64
    }
}

/// Dataset geometry and sampling parameters.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DatasetConfig {
    pub n_train_ids: usize,
    pub n_eval_ids: usize,
    pub seqs_per_id: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub covariate_rate: f64,
    pub noise_flips_per_frame: usize,
    /// Sequences per eval identity placed in the gallery; the rest probe.
    pub gallery_per_id: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_train_ids: 16,
            n_eval_ids: 8,
            seqs_per_id: 8,
            frames: 8,
            height: 32,
            width: 24,
            covariate_rate: 0.25,
            noise_flips_per_frame: 3,
            gallery_per_id: 4,
        }
    }
}

impl DatasetConfig {
    /// The paper-scale 64×44 geometry behind a constructor instead of the
    /// desk-scale default.
    pub fn paper_scale() -> Self {
        DatasetConfig {
            height: 64,
            width: 44,
            ..DatasetConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train_ids + self.n_eval_ids < 4 {
            return Err(Error::Config("need at least 4 identities".into()));
        }
        if self.seqs_per_id < 2 {
            return Err(Error::Config("need at least 2 sequences per identity".into()));
        }
        if self.height < 16 || self.width < 12 || self.frames < 4 {
            return Err(Error::Config(format!(
                "frame geometry too small: T={} H={} W={} (need T>=4, H>=16, W>=12)",
                self.frames, self.height, self.width
            )));
        }
        if !(0.0..=1.0).contains(&self.covariate_rate) {
            return Err(Error::Config("covariate_rate must be in [0, 1]".into()));
        }
        if self.noise_flips_per_frame * 100 > self.height * self.width {
            return Err(Error::Config(
                "noise budget exceeds 1% of pixels per frame".into(),
            ));
        }
        if self.gallery_per_id == 0 || self.gallery_per_id >= self.seqs_per_id {
            return Err(Error::Config(
                "gallery_per_id must be in 1..seqs_per_id".into(),
            ));
        }
        Ok(())
    }
}

/// Train/gallery/probe sequences. Gallery and probe identities coincide;
/// train identities are disjoint from them.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<SilhouetteSequence>,
    pub gallery: Vec<SilhouetteSequence>,
    pub probe: Vec<SilhouetteSequence>,
    pub config: DatasetConfig,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn train_identities(&self) -> Vec<u32> {
        (0..self.config.n_train_ids as u32).collect()
    }

    pub fn eval_identities(&self) -> Vec<u32> {
        let lo = self.config.n_train_ids as u32;
        (lo..lo + self.config.n_eval_ids as u32).collect()
    }
}

/// Generate the full split. Identical `(seed, config)` produce
/// byte-identical data.
pub fn generate_dataset(seed: u64, config: &DatasetConfig) -> Result<DatasetSplit> {
    config.validate()?;
    let mut train = Vec::new();
    let mut gallery = Vec::new();
    let mut probe = Vec::new();
    let n_total = config.n_train_ids + config.n_eval_ids;
    for id in 0..n_total as u32 {
        let spec = IdentitySpec::draw(seed, id);
        for s in 0..config.seqs_per_id as u32 {
            let seq = render_sequence(seed, &spec, s, config)?;
            if (id as usize) < config.n_train_ids {
                train.push(seq);
            } else if (s as usize) < config.gallery_per_id {
                gallery.push(seq);
            } else {
                probe.push(seq);
            }
        }
    }
    Ok(DatasetSplit {
        train,
        gallery,
        probe,
        config: config.clone(),
        seed,
    })
}

fn pick_covariate(r: &mut SplitMix64, rate: f64) -> Covariate {
    if r.next_f64() < rate {
        if r.next_f64() < 0.5 {
            Covariate::Carry
        } else {
            Covariate::Dilate
        }
    } else {
        Covariate::None
    }
}

fn render_sequence(
    seed: u64,
    spec: &IdentitySpec,
    seq_id: u32,
    config: &DatasetConfig,
) -> Result<SilhouetteSequence> {
    let (t, h, w) = (config.frames, config.height, config.width);
    let mut seq_rng = keyed(&[seed, 0x5e, spec.id as u64, seq_id as u64]);
    let phase = seq_rng.uniform(0.0, core::f64::consts::TAU);
    let amp_jitter = seq_rng.uniform(0.9, 1.1);
    let covariate = pick_covariate(&mut seq_rng, config.covariate_rate);

    let mut frames = vec![0u8; t * h * w];
    for ft in 0..t {
        let cycle = core::f64::consts::TAU * ft as f64 / t as f64;
        let swing = spec.stride_amplitude * amp_jitter * fmath::sin(cycle + spec.base_phase + phase);
        let frame = &mut frames[ft * h * w..(ft + 1) * h * w];
        rasterize(frame, spec, swing, h, w);
        if covariate != Covariate::None {
            apply_covariate_frame(frame, covariate, h, w);
        }
        flip_noise_pixels(
            frame,
            config.noise_flips_per_frame,
            &[seed, 0xf1, spec.id as u64, seq_id as u64, ft as u64],
            h * w,
        );
    }
    Ok(SilhouetteSequence {
        frames,
        t,
        h,
        w,
        identity: spec.id,
        seq_id,
        covariate,
    })
}

/// Analytic rasterizer: point-in-ellipse / point-in-circle /
/// point-near-segment tests per pixel center.
fn rasterize(frame: &mut [u8], spec: &IdentitySpec, swing: f64, h: usize, w: usize) {
    let hf = h as f64;
    let wf = w as f64;
    let cx = wf / 2.0;
    let head_y = 0.12 * hf;
    let head_r = spec.head_radius_ratio * hf;
    let torso_y = 0.36 * hf;
    let torso_a = spec.torso_width_ratio * wf / 2.0;
    let torso_b = 0.20 * hf;
    let hip_y = torso_y + torso_b * 0.9;
    let leg_len = spec.leg_length_ratio * hf;
    let leg_half_thick = (0.055 * wf).max(0.9);
    let hip_dx = 0.35 * torso_a;

    let legs = [
        (cx - hip_dx, swing),
        (cx + hip_dx, -swing),
    ];

    for py in 0..h {
        let y = py as f64 + 0.5;
        for px in 0..w {
            let x = px as f64 + 0.5;
            let mut on = false;
            // head
            let (dx, dy) = (x - cx, y - head_y);
            if dx * dx + dy * dy <= head_r * head_r {
                on = true;
            }
            // torso
            if !on {
                let (ex, ey) = ((x - cx) / torso_a, (y - torso_y) / torso_b);
                if ex * ex + ey * ey <= 1.0 {
                    on = true;
                }
            }
            // legs (capsules from the hip)
            if !on {
                for &(hx, ang) in &legs {
                    let (ux, uy) = (fmath::sin(ang), fmath::cos(ang));
                    let (rx, ry) = (x - hx, y - hip_y);
                    let proj = (rx * ux + ry * uy).clamp(0.0, leg_len);
                    let (qx, qy) = (rx - proj * ux, ry - proj * uy);
                    if fmath::hypot(qx, qy) <= leg_half_thick {
                        on = true;
                        break;
                    }
                }
            }
            if on {
                frame[py * w + px] = 1;
            }
        }
    }
}

/// Flip exactly `count` distinct pixels chosen by the keyed stream.
fn flip_noise_pixels(frame: &mut [u8], count: usize, key: &[u64], npix: usize) {
    let mut r = keyed(key);
    let mut flipped = 0usize;
    let mut chosen: Vec<usize> = Vec::with_capacity(count);
    while flipped < count {
        let p = r.below(npix);
        if chosen.contains(&p) {
            continue;
        }
        chosen.push(p);
        frame[p] ^= 1;
        flipped += 1;
    }
}

fn apply_covariate_frame(frame: &mut [u8], kind: Covariate, h: usize, w: usize) {
    match kind {
        Covariate::None => {}
        Covariate::Carry => {
            // rectangular blob at a fixed torso-side offset
            let x0 = (0.70 * w as f64) as usize;
            let x1 = ((0.88 * w as f64) as usize).min(w);
            let y0 = (0.34 * h as f64) as usize;
            let y1 = ((0.52 * h as f64) as usize).min(h);
            for y in y0..y1 {
                for x in x0..x1 {
                    frame[y * w + x] = 1;
                }
            }
        }
        Covariate::Dilate => {
            let src = frame.to_vec();
            for y in 0..h {
                for x in 0..w {
                    if src[y * w + x] == 1 {
                        continue;
                    }
                    let up = y > 0 && src[(y - 1) * w + x] == 1;
                    let down = y + 1 < h && src[(y + 1) * w + x] == 1;
                    let left = x > 0 && src[y * w + x - 1] == 1;
                    let right = x + 1 < w && src[y * w + x + 1] == 1;
                    if up || down || left || right {
                        frame[y * w + x] = 1;
                    }
                }
            }
        }
    }
}

/// Apply a covariate to a whole sequence. `None` is the identity.
pub fn apply_covariate(seq: &SilhouetteSequence, kind: Covariate) -> SilhouetteSequence {
    let mut out = seq.clone();
    out.covariate = kind;
    if kind == Covariate::None {
        out.covariate = seq.covariate;
        return out;
    }
    let (h, w) = (seq.h, seq.w);
    for ft in 0..seq.t {
        let frame = &mut out.frames[ft * h * w..(ft + 1) * h * w];
        apply_covariate_frame(frame, kind, h, w);
    }
    out
}
