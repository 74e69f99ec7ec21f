#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssml_core::autodiff::{Graph, Tensor, Var};
use ssml_core::Result;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// One probed coordinate: analytic vs central-difference derivative.
#[derive(Debug, Clone, Copy)]
pub struct Probe {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    /// `|a - n| / max(|a|, |n|)`, with an absolute floor for derivatives
    /// that vanish (both below 1e-7 counts as agreement).
    pub fn rel_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale < 1e-7 {
            return 0.0;
        }
        (self.analytic - self.numeric).abs() / scale
    }
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` with central
/// differences at `probes_per_input` random coordinates of every input.
pub fn fd_check<F>(inputs: &[Tensor], probes_per_input: usize, seed: u64, f: F) -> Vec<Probe>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &vars).unwrap();
        g.value(out).item().expect("scalar output")
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars).unwrap();
    g.backward(out).unwrap();
    let mut r = rng(seed);
    let mut probes = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        let grad = g
            .grad(vars[i])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        for _ in 0..probes_per_input {
            let idx = r.gen_range(0..t.numel());
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[idx] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[idx] -= FD_STEP;
            probes.push(Probe {
                input: i,
                index: idx,
                analytic: grad[idx],
                numeric: (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP),
            });
        }
    }
    probes
}

/// Contracts any tensor to a scalar with fixed random weights so that every
/// output element influences the result differently.
pub fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let w = random_tensor(&shape, -1.0, 1.0, &mut rng(seed));
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    g.sum_all(p)
}

/// Naive double-loop contrastive loss over rows `2k, 2k+1` as positives.
pub fn nt_xent_oracle(rows: &[Vec<f64>], tau: f64) -> f64 {
    let n = rows.len();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let sim = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b));
    let pair = |i: usize, j: usize| {
        let num = (sim(&rows[i], &rows[j]) / tau).exp();
        let mut den = 0.0;
        for k in 0..n {
            if k != i {
                den += (sim(&rows[i], &rows[k]) / tau).exp();
            }
        }
        -(num / den).ln()
    };
    let mut total = 0.0;
    for k in 0..n / 2 {
        total += pair(2 * k, 2 * k + 1) + pair(2 * k + 1, 2 * k);
    }
    total / n as f64
}
