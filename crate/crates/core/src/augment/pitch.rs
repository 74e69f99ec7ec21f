//! Duration-preserving pitch shift: phase-vocoder time stretch by the pitch
//! ratio followed by resampling back to the original length.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::filter::Biquad;

const MAX_FRAME: usize = 512;
const MIN_FRAME: usize = 32;

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

fn wrap_phase(p: f64) -> f64 {
    p - 2.0 * PI * (p / (2.0 * PI)).round()
}

/// Stretches `x` in time by `factor` without changing its pitch.
fn time_stretch(x: &[f64], factor: f64, frame: usize) -> Vec<f64> {
    let hop_s = frame / 4;
    let hop_a = hop_s as f64 / factor;
    let out_len = (x.len() as f64 * factor).ceil() as usize + 1;
    let n_frames = out_len / hop_s + 2;
    let half = frame as isize / 2;
    let window = hann(frame);

    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(frame);
    let inv = planner.plan_fft_inverse(frame);

    let mut out = vec![0.0; out_len + frame];
    let mut norm = vec![0.0; out_len + frame];
    let mut prev_phase = vec![0.0; frame];
    let mut syn_phase = vec![0.0; frame];
    let mut prev_start: Option<isize> = None;
    let mut buf = vec![Complex::new(0.0, 0.0); frame];

    for f in 0..n_frames {
        let start = (f as f64 * hop_a).round() as isize - half;
        for (i, c) in buf.iter_mut().enumerate() {
            let idx = start + i as isize;
            let s = if idx >= 0 && (idx as usize) < x.len() {
                x[idx as usize]
            } else {
                0.0
            };
            *c = Complex::new(s * window[i], 0.0);
        }
        fwd.process(&mut buf);
        for (k, c) in buf.iter_mut().enumerate() {
            let (mag, phase) = c.to_polar();
            match prev_start {
                None => syn_phase[k] = phase,
                Some(ps) => {
                    let actual_hop = (start - ps) as f64;
                    let omega = 2.0 * PI * k as f64 / frame as f64;
                    let dev = wrap_phase(phase - prev_phase[k] - omega * actual_hop);
                    let inst = if actual_hop > 0.0 {
                        omega + dev / actual_hop
                    } else {
                        omega
                    };
                    syn_phase[k] += inst * hop_s as f64;
                }
            }
            prev_phase[k] = phase;
            *c = Complex::from_polar(mag, syn_phase[k]);
        }
        prev_start = Some(start);
        inv.process(&mut buf);
        let out_start = (f * hop_s) as isize - half;
        for (i, c) in buf.iter().enumerate() {
            let idx = out_start + i as isize;
            if idx >= 0 && (idx as usize) < out.len() {
                out[idx as usize] += c.re / frame as f64 * window[i];
                norm[idx as usize] += window[i] * window[i];
            }
        }
    }
    for (o, n) in out.iter_mut().zip(&norm) {
        if *n > 1e-6 {
            *o /= n;
        }
    }
    out.truncate(out_len);
    out
}

/// Shifts the pitch of `x` by `semitones`, keeping its length.
pub fn pitch_shift(x: &[f64], semitones: f64, sample_rate: f64) -> Vec<f64> {
    if semitones == 0.0 || x.len() < MIN_FRAME {
        return x.to_vec();
    }
    let ratio = 2f64.powf(semitones / 12.0);
    let frame = MAX_FRAME.min(x.len().next_power_of_two() / 2).max(MIN_FRAME);
    let mut stretched = time_stretch(x, ratio, frame);
    if ratio > 1.0 {
        // content above the new Nyquist would alias when decimating
        Biquad::lowpass(0.45 * sample_rate / ratio, sample_rate).process(&mut stretched);
    }
    (0..x.len())
        .map(|n| {
            let pos = n as f64 * ratio;
            let i = pos.floor() as usize;
            let frac = pos - i as f64;
            let a = stretched.get(i).copied().unwrap_or(0.0);
            let b = stretched.get(i + 1).copied().unwrap_or(0.0);
            a + (b - a) * frac
        })
        .collect()
}
