//! Schroeder/Freeverb-style reverberator: parallel damped feedback combs
//! followed by series allpasses.

const COMB_TUNING: [usize; 8] = [1116, 1188, 1277, 1356, 1422, 1491, 1557, 1617];
const ALLPASS_TUNING: [usize; 4] = [556, 441, 341, 225];
const TUNING_RATE: f64 = 44_100.0;
const ALLPASS_FEEDBACK: f64 = 0.5;
const MAX_FEEDBACK: f64 = 0.97;
const MAX_DAMPING: f64 = 0.9;
const MIN_ROOM_SCALE: f64 = 0.25;
const DRY: f64 = 0.7;
const WET: f64 = 0.3;

/// Internal reverberator settings derived from `[0, 100]` controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReverbParams {
    /// Multiplier on the comb/allpass delay lengths.
    pub room_scale: f64,
    pub feedback: f64,
    pub damping: f64,
}

impl ReverbParams {
    pub fn from_controls(room_size: f64, reverberation: f64, damping: f64) -> Self {
        let unit = |v: f64| (v / 100.0).clamp(0.0, 1.0);
        Self {
            room_scale: MIN_ROOM_SCALE + (1.0 - MIN_ROOM_SCALE) * unit(room_size),
            feedback: MAX_FEEDBACK * unit(reverberation),
            damping: MAX_DAMPING * unit(damping),
        }
    }
}

fn scaled_delay(tuning: usize, room_scale: f64, sample_rate: f64) -> usize {
    ((tuning as f64 * room_scale * sample_rate / TUNING_RATE).round() as usize).max(1)
}

pub fn reverb(x: &[f64], params: ReverbParams, sample_rate: f64) -> Vec<f64> {
    let n = x.len();
    let mut wet = vec![0.0; n];
    for tuning in COMB_TUNING {
        let delay = scaled_delay(tuning, params.room_scale, sample_rate);
        let mut line = vec![0.0; delay];
        let mut pos = 0;
        let mut lp_state = 0.0;
        for (i, &input) in x.iter().enumerate() {
            let out = line[pos];
            lp_state = out * (1.0 - params.damping) + lp_state * params.damping;
            line[pos] = input + lp_state * params.feedback;
            pos = (pos + 1) % delay;
            wet[i] += out / COMB_TUNING.len() as f64;
        }
    }
    for tuning in ALLPASS_TUNING {
        let delay = scaled_delay(tuning, params.room_scale, sample_rate);
        let mut line = vec![0.0; delay];
        let mut pos = 0;
        for v in wet.iter_mut() {
            let buffered = line[pos];
            let out = buffered - *v;
            line[pos] = *v + buffered * ALLPASS_FEEDBACK;
            pos = (pos + 1) % delay;
            *v = out;
        }
    }
    x.iter().zip(&wet).map(|(d, w)| DRY * d + WET * w).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn control_mapping_is_linear() {
        let p = ReverbParams::from_controls(0.0, 50.0, 100.0);
        assert_eq!(p.room_scale, MIN_ROOM_SCALE);
        assert!((p.feedback - 0.485).abs() < 1e-12);
        assert!((p.damping - MAX_DAMPING).abs() < 1e-12);
        assert_eq!(ReverbParams::from_controls(100.0, 100.0, 0.0).feedback, MAX_FEEDBACK);
    }

    #[test]
    fn impulse_grows_a_tail() {
        let mut x = vec![0.0; 22050];
        x[0] = 1.0;
        let y = reverb(&x, ReverbParams::from_controls(50.0, 80.0, 20.0), 22050.0);
        assert_eq!(y.len(), x.len());
        assert!((y[0] - DRY).abs() < 1e-12);
        let tail_energy: f64 = y[2000..].iter().map(|v| v * v).sum();
        assert!(tail_energy > 1e-6);
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn more_reverberation_means_longer_tail() {
        let mut x = vec![0.0; 22050];
        x[0] = 1.0;
        let energy = |rev: f64| {
            let y = reverb(&x, ReverbParams::from_controls(50.0, rev, 20.0), 22050.0);
            y[8000..].iter().map(|v| v * v).sum::<f64>()
        };
        assert!(energy(90.0) > energy(30.0));
    }
}
