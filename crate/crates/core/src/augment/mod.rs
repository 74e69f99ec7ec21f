//! Random cropping and the stochastic augmentation chain used to build
//! positive pairs.
//!
//! A chain is sampled once ([`sample_chain`]) with every parameter resolved,
//! then applied deterministically ([`apply_chain`]). Transforms always run in
//! the fixed order of [`TransformKind::ORDER`] and the signal is clipped to
//! `[-1, 1]` after each one.

mod filter;
mod pitch;
mod reverb;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::audio::AudioBuffer;
use crate::error::{input_err, Result};

pub use filter::Biquad;
pub use pitch::pitch_shift;
pub use reverb::{reverb, ReverbParams};

/// Closed interval `[min, max]` sampled uniformly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite() && self.min <= self.max) {
            return Err(input_err!("{name} range [{}, {}] is not ordered", self.min, self.max));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.min == self.max {
            self.min
        } else {
            rng.gen_range(self.min..=self.max)
        }
    }
}

/// Application probabilities and parameter ranges for every transform.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSpec {
    pub polarity_p: f64,
    pub noise_p: f64,
    /// Signal-to-noise ratio in dB.
    pub noise_snr_db: Range,
    pub gain_p: f64,
    pub gain_db: Range,
    /// Probability of applying a filter; low-pass vs high-pass is a fair coin.
    pub filter_p: f64,
    pub lowpass_hz: Range,
    pub highpass_hz: Range,
    pub delay_p: f64,
    /// Delay times are drawn from `{min, min + step, ..., max}` milliseconds.
    pub delay_ms_min: u32,
    pub delay_ms_max: u32,
    pub delay_ms_step: u32,
    pub delay_mix: f64,
    pub pitch_p: f64,
    pub pitch_semitones: Range,
    pub reverb_p: f64,
    pub reverb_room: Range,
    pub reverb_reverberation: Range,
    pub reverb_damping: Range,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            polarity_p: 0.8,
            noise_p: 0.01,
            noise_snr_db: Range::new(40.0, 80.0),
            gain_p: 0.3,
            gain_db: Range::new(-6.0, 0.0),
            filter_p: 0.8,
            lowpass_hz: Range::new(2200.0, 4000.0),
            highpass_hz: Range::new(200.0, 1200.0),
            delay_p: 0.3,
            delay_ms_min: 200,
            delay_ms_max: 500,
            delay_ms_step: 50,
            delay_mix: 0.5,
            pitch_p: 0.6,
            pitch_semitones: Range::new(-7.0, 7.0),
            reverb_p: 0.6,
            reverb_room: Range::new(0.0, 100.0),
            reverb_reverberation: Range::new(0.0, 100.0),
            reverb_damping: Range::new(0.0, 100.0),
        }
    }
}

impl AugmentSpec {
    /// Every transform disabled.
    pub fn identity() -> Self {
        Self::default().with_all_probabilities(0.0)
    }

    pub fn with_all_probabilities(mut self, p: f64) -> Self {
        for slot in self.probabilities_mut() {
            *slot = p;
        }
        self
    }

    fn probabilities_mut(&mut self) -> [&mut f64; 7] {
        [
            &mut self.polarity_p,
            &mut self.noise_p,
            &mut self.gain_p,
            &mut self.filter_p,
            &mut self.delay_p,
            &mut self.pitch_p,
            &mut self.reverb_p,
        ]
    }

    /// Application probability of each transform, in chain order.
    pub fn probabilities(&self) -> [(TransformKind, f64); 7] {
        use TransformKind::*;
        [
            (Polarity, self.polarity_p),
            (Noise, self.noise_p),
            (Gain, self.gain_p),
            (Filter, self.filter_p),
            (Delay, self.delay_p),
            (PitchShift, self.pitch_p),
            (Reverb, self.reverb_p),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (kind, p) in self.probabilities() {
            if !(0.0..=1.0).contains(&p) {
                return Err(input_err!("{kind:?} probability {p} outside [0, 1]"));
            }
        }
        self.noise_snr_db.validate("noise SNR")?;
        self.gain_db.validate("gain")?;
        self.lowpass_hz.validate("low-pass cutoff")?;
        self.highpass_hz.validate("high-pass cutoff")?;
        self.pitch_semitones.validate("pitch shift")?;
        self.reverb_room.validate("reverb room size")?;
        self.reverb_reverberation.validate("reverberation")?;
        self.reverb_damping.validate("reverb damping")?;
        if self.lowpass_hz.min <= 0.0 || self.highpass_hz.min <= 0.0 {
            return Err(input_err!("filter cutoffs must be positive"));
        }
        if self.delay_ms_step == 0 || self.delay_ms_min > self.delay_ms_max {
            return Err(input_err!("delay grid must have a positive step and min <= max"));
        }
        if !(0.0..=1.0).contains(&self.delay_mix) {
            return Err(input_err!("delay mix {} outside [0, 1]", self.delay_mix));
        }
        Ok(())
    }

    fn delay_choices(&self) -> Vec<u32> {
        (self.delay_ms_min..=self.delay_ms_max)
            .step_by(self.delay_ms_step as usize)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TransformKind {
    Polarity,
    Noise,
    Gain,
    Filter,
    Delay,
    PitchShift,
    Reverb,
}

impl TransformKind {
    pub const ORDER: [TransformKind; 7] = [
        TransformKind::Polarity,
        TransformKind::Noise,
        TransformKind::Gain,
        TransformKind::Filter,
        TransformKind::Delay,
        TransformKind::PitchShift,
        TransformKind::Reverb,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterKind {
    LowPass,
    HighPass,
}

/// One transform with all parameters resolved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transform {
    Polarity,
    /// White Gaussian noise at the given SNR; `seed` drives the noise draw.
    Noise {
        snr_db: f64,
        seed: u64,
    },
    Gain {
        db: f64,
    },
    Filter {
        kind: FilterKind,
        cutoff_hz: f64,
    },
    Delay {
        ms: u32,
        mix: f64,
    },
    PitchShift {
        semitones: f64,
    },
    Reverb {
        room_size: f64,
        reverberation: f64,
        damping: f64,
    },
}

impl Transform {
    pub fn kind(&self) -> TransformKind {
        match self {
            Transform::Polarity => TransformKind::Polarity,
            Transform::Noise { .. } => TransformKind::Noise,
            Transform::Gain { .. } => TransformKind::Gain,
            Transform::Filter { .. } => TransformKind::Filter,
            Transform::Delay { .. } => TransformKind::Delay,
            Transform::PitchShift { .. } => TransformKind::PitchShift,
            Transform::Reverb { .. } => TransformKind::Reverb,
        }
    }

    /// Applies the transform in place, then clips to `[-1, 1]`.
    pub fn apply(&self, x: &mut Vec<f64>, sample_rate: f64) {
        match *self {
            Transform::Polarity => x.iter_mut().for_each(|v| *v = -*v),
            Transform::Noise { snr_db, seed } => add_noise(x, snr_db, seed),
            Transform::Gain { db } => {
                let g = 10f64.powf(db / 20.0);
                x.iter_mut().for_each(|v| *v *= g);
            }
            Transform::Filter { kind, cutoff_hz } => {
                let f = match kind {
                    FilterKind::LowPass => Biquad::lowpass(cutoff_hz, sample_rate),
                    FilterKind::HighPass => Biquad::highpass(cutoff_hz, sample_rate),
                };
                f.process(x);
            }
            Transform::Delay { ms, mix } => {
                let shift = delay_samples(ms, sample_rate);
                for i in (shift..x.len()).rev() {
                    x[i] += mix * x[i - shift];
                }
            }
            Transform::PitchShift { semitones } => *x = pitch_shift(x, semitones, sample_rate),
            Transform::Reverb {
                room_size,
                reverberation,
                damping,
            } => {
                let params = ReverbParams::from_controls(room_size, reverberation, damping);
                *x = reverb(x, params, sample_rate);
            }
        }
        x.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    }
}

/// Delay length in samples, `round(ms * sr / 1000)`.
pub fn delay_samples(ms: u32, sample_rate: f64) -> usize {
    (ms as f64 * sample_rate / 1000.0).round() as usize
}

fn add_noise(x: &mut [f64], snr_db: f64, seed: u64) {
    let power = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    if power == 0.0 {
        return;
    }
    let std = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in x.iter_mut() {
        *v += normal.sample(&mut rng);
    }
}

/// A sampled element of the augmentation set: transforms in chain order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AugmentChain {
    pub transforms: Vec<Transform>,
}

impl AugmentChain {
    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    pub fn contains(&self, kind: TransformKind) -> bool {
        self.transforms.iter().any(|t| t.kind() == kind)
    }
}

/// Draws a chain: each transform is included independently with its
/// probability and its parameters are drawn uniformly from their ranges.
pub fn sample_chain(spec: &AugmentSpec, rng: &mut impl Rng) -> AugmentChain {
    let mut transforms = Vec::new();
    if rng.gen_bool(spec.polarity_p) {
        transforms.push(Transform::Polarity);
    }
    if rng.gen_bool(spec.noise_p) {
        transforms.push(Transform::Noise {
            snr_db: spec.noise_snr_db.sample(rng),
            seed: rng.gen(),
        });
    }
    if rng.gen_bool(spec.gain_p) {
        transforms.push(Transform::Gain {
            db: spec.gain_db.sample(rng),
        });
    }
    if rng.gen_bool(spec.filter_p) {
        let t = if rng.gen_bool(0.5) {
            Transform::Filter {
                kind: FilterKind::LowPass,
                cutoff_hz: spec.lowpass_hz.sample(rng),
            }
        } else {
            Transform::Filter {
                kind: FilterKind::HighPass,
                cutoff_hz: spec.highpass_hz.sample(rng),
            }
        };
        transforms.push(t);
    }
    if rng.gen_bool(spec.delay_p) {
        let choices = spec.delay_choices();
        transforms.push(Transform::Delay {
            ms: choices[rng.gen_range(0..choices.len())],
            mix: spec.delay_mix,
        });
    }
    if rng.gen_bool(spec.pitch_p) {
        transforms.push(Transform::PitchShift {
            semitones: spec.pitch_semitones.sample(rng),
        });
    }
    if rng.gen_bool(spec.reverb_p) {
        transforms.push(Transform::Reverb {
            room_size: spec.reverb_room.sample(rng),
            reverberation: spec.reverb_reverberation.sample(rng),
            damping: spec.reverb_damping.sample(rng),
        });
    }
    AugmentChain { transforms }
}

/// Applies every transform of `chain` in order. Length and sample rate are
/// preserved; an empty chain returns the input unchanged.
pub fn apply_chain(excerpt: &AudioBuffer, chain: &AugmentChain) -> AudioBuffer {
    if chain.is_empty() {
        return excerpt.clone();
    }
    let sr = excerpt.sample_rate_hz();
    let mut x: Vec<f64> = excerpt.samples().iter().map(|&v| v as f64).collect();
    for t in &chain.transforms {
        t.apply(&mut x, sr as f64);
    }
    let samples = x.into_iter().map(|v| v as f32).collect();
    AudioBuffer::clipped(samples, sr).expect("transforms keep samples finite")
}

/// Uniform start index for an excerpt of `excerpt_len` in a track of
/// `track_len` samples (0 when the track is not longer than the excerpt).
pub fn crop_start(track_len: usize, excerpt_len: usize, rng: &mut impl Rng) -> usize {
    if track_len <= excerpt_len {
        0
    } else {
        rng.gen_range(0..=track_len - excerpt_len)
    }
}

/// Crops `excerpt_len` samples at a uniformly random position. Tracks shorter
/// than the excerpt are zero-padded on the right first.
pub fn rand_crop(track: &AudioBuffer, excerpt_len: usize, rng: &mut impl Rng) -> Result<AudioBuffer> {
    if excerpt_len == 0 {
        return Err(input_err!("excerpt length must be positive"));
    }
    if track.is_empty() {
        return Err(input_err!("cannot crop an empty track"));
    }
    let start = crop_start(track.len(), excerpt_len, rng);
    Ok(excerpt_at(track, start, excerpt_len))
}

/// The window `[start, start + len)`, zero-padded past the end of the track.
pub fn excerpt_at(track: &AudioBuffer, start: usize, len: usize) -> AudioBuffer {
    let src = track.samples();
    let mut samples = vec![0.0f32; len];
    if start < src.len() {
        let end = (start + len).min(src.len());
        samples[..end - start].copy_from_slice(&src[start..end]);
    }
    AudioBuffer::new(samples, track.sample_rate_hz()).expect("window of a valid buffer")
}
