//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Tolerances are pinned below next to each check.
//!
//! `ACCEPTANCE_ONLY=3,5` restricts the run to the listed criteria.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::Instant;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use ssml_core::augment::{sample_chain, AugmentSpec, Transform, TransformKind};
use ssml_core::autodiff::{Graph, Tensor};
use ssml_core::checkpoint::Checkpoint;
use ssml_core::data::{generate_synthetic, Dataset, Split, SyntheticSpec};
use ssml_core::encoder::{embed, encode, tag_probs, EncoderConfig, ModelParams};
use ssml_core::eval::{evaluate_split, pr_auc, recall_at_k, roc_auc};
use ssml_core::inference::{embed_tracks, store_from_bytes, store_to_bytes, track_embedding, TrackEmbedding};
use ssml_core::losses::{
    estimate_balance_factor, ml_loss, ml_loss_graph, ssl_loss, BalanceFactor, ContrastiveBatch, LabeledMask,
    MAGNATAGATUNE_R, MTG_JAMENDO_R,
};
use ssml_core::training::{eval_loss, finetune, pretrain, step_grads, Objective, RunConfig, TrainState, Trainer};

use common::{fd_check, nt_xent_oracle, random_tensor, rng, weighted_sum, Probe};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn tiny_encoder(tags: usize) -> EncoderConfig {
    EncoderConfig {
        levels: 4,
        base_channels: 4,
        embed_dim: 6,
        proj_dim: 5,
        tag_count: tags,
    }
}

fn desk_corpus(seed: u64) -> Dataset {
    generate_synthetic(&SyntheticSpec {
        seed,
        ..SyntheticSpec::default()
    })
    .expect("synthetic corpus")
}

// ---------------------------------------------------------------- 1

const GRAD_TOL: f64 = 1e-4;
const MIN_PROBES: usize = 100;

fn gradient_correctness() -> Outcome {
    type Build = Box<dyn Fn(&mut Graph, &[ssml_core::autodiff::Var]) -> ssml_core::Result<ssml_core::autodiff::Var>>;
    let mut r = rng(11);
    let m = |shape: &[usize], r: &mut rand_chacha::ChaCha8Rng| random_tensor(shape, -1.0, 1.0, r);
    let pos = |shape: &[usize], r: &mut rand_chacha::ChaCha8Rng| random_tensor(shape, 0.5, 2.0, r);

    let cases: Vec<(&str, Vec<Tensor>, Build)> = vec![
        (
            "add",
            vec![m(&[3, 4], &mut r), m(&[3, 4], &mut r)],
            Box::new(|g, v| {
                let y = g.add(v[0], v[1])?;
                weighted_sum(g, y, 1)
            }),
        ),
        (
            "sub",
            vec![m(&[3, 4], &mut r), m(&[3, 4], &mut r)],
            Box::new(|g, v| {
                let y = g.sub(v[0], v[1])?;
                weighted_sum(g, y, 2)
            }),
        ),
        (
            "mul",
            vec![m(&[3, 4], &mut r), m(&[3, 4], &mut r)],
            Box::new(|g, v| {
                let y = g.mul(v[0], v[1])?;
                weighted_sum(g, y, 3)
            }),
        ),
        (
            "neg",
            vec![m(&[5], &mut r)],
            Box::new(|g, v| {
                let y = g.neg(v[0])?;
                weighted_sum(g, y, 4)
            }),
        ),
        (
            "scale",
            vec![m(&[5], &mut r)],
            Box::new(|g, v| {
                let y = g.scale(v[0], -2.5)?;
                weighted_sum(g, y, 5)
            }),
        ),
        (
            "add_scalar",
            vec![m(&[5], &mut r)],
            Box::new(|g, v| {
                let y = g.add_scalar(v[0], 0.7)?;
                let y = g.mul(y, y)?;
                weighted_sum(g, y, 6)
            }),
        ),
        (
            "add_col",
            vec![m(&[3, 4], &mut r), m(&[3], &mut r)],
            Box::new(|g, v| {
                let y = g.add_col(v[0], v[1])?;
                let y = g.mul(y, y)?;
                weighted_sum(g, y, 7)
            }),
        ),
        (
            "exp",
            vec![m(&[6], &mut r)],
            Box::new(|g, v| {
                let y = g.exp(v[0])?;
                weighted_sum(g, y, 8)
            }),
        ),
        (
            "log",
            vec![pos(&[6], &mut r)],
            Box::new(|g, v| {
                let y = g.log(v[0])?;
                weighted_sum(g, y, 9)
            }),
        ),
        (
            "relu",
            vec![m(&[8], &mut r)],
            Box::new(|g, v| {
                let y = g.relu(v[0])?;
                weighted_sum(g, y, 10)
            }),
        ),
        (
            "sigmoid",
            vec![m(&[6], &mut r)],
            Box::new(|g, v| {
                let y = g.sigmoid(v[0])?;
                weighted_sum(g, y, 11)
            }),
        ),
        (
            "clamp",
            vec![m(&[8], &mut r)],
            Box::new(|g, v| {
                let y = g.clamp(v[0], -0.5, 0.5)?;
                weighted_sum(g, y, 12)
            }),
        ),
        (
            "softmax",
            vec![m(&[3, 5], &mut r)],
            Box::new(|g, v| {
                let y = g.softmax(v[0])?;
                weighted_sum(g, y, 13)
            }),
        ),
        (
            "layer_norm",
            vec![m(&[3, 5], &mut r), pos(&[5], &mut r), m(&[5], &mut r)],
            Box::new(|g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(g, y, 14)
            }),
        ),
        (
            "l2_normalize",
            vec![m(&[3, 5], &mut r)],
            Box::new(|g, v| {
                let y = g.l2_normalize(v[0], 1e-12)?;
                weighted_sum(g, y, 15)
            }),
        ),
        (
            "matmul",
            vec![m(&[2, 3], &mut r), m(&[3, 4], &mut r)],
            Box::new(|g, v| {
                let y = g.matmul(v[0], v[1])?;
                weighted_sum(g, y, 16)
            }),
        ),
        (
            "transpose",
            vec![m(&[2, 3], &mut r)],
            Box::new(|g, v| {
                let y = g.transpose(v[0])?;
                let y = g.mul(y, y)?;
                weighted_sum(g, y, 17)
            }),
        ),
        (
            "linear",
            vec![m(&[3, 4], &mut r), m(&[2, 4], &mut r), m(&[2], &mut r)],
            Box::new(|g, v| {
                let y = g.linear(v[0], v[1], Some(v[2]))?;
                let y = g.mul(y, y)?;
                weighted_sum(g, y, 18)
            }),
        ),
        (
            "conv1d_pad",
            vec![m(&[2, 3, 9], &mut r), m(&[4, 3, 3], &mut r), m(&[4], &mut r)],
            Box::new(|g, v| {
                let y = g.conv1d(v[0], v[1], Some(v[2]), 1, 1)?;
                weighted_sum(g, y, 19)
            }),
        ),
        (
            "conv1d_stride",
            vec![m(&[2, 2, 9], &mut r), m(&[3, 2, 3], &mut r)],
            Box::new(|g, v| {
                let y = g.conv1d(v[0], v[1], None, 3, 0)?;
                let y = g.mul(y, y)?;
                weighted_sum(g, y, 20)
            }),
        ),
        (
            "max_pool1d",
            vec![m(&[2, 2, 9], &mut r)],
            Box::new(|g, v| {
                let y = g.max_pool1d(v[0], 3)?;
                weighted_sum(g, y, 21)
            }),
        ),
        (
            "sum_axis",
            vec![m(&[3, 4], &mut r)],
            Box::new(|g, v| {
                let y = g.sum_axis(v[0], 0)?;
                let y = g.mul(y, y)?;
                weighted_sum(g, y, 22)
            }),
        ),
        (
            "mean_axis",
            vec![m(&[3, 4], &mut r)],
            Box::new(|g, v| {
                let y = g.mean_axis(v[0], 1)?;
                let y = g.mul(y, y)?;
                weighted_sum(g, y, 23)
            }),
        ),
        (
            "sum_all",
            vec![m(&[3, 4], &mut r)],
            Box::new(|g, v| {
                let y = g.mul(v[0], v[0])?;
                g.sum_all(y)
            }),
        ),
        (
            "mean_all",
            vec![m(&[3, 4], &mut r)],
            Box::new(|g, v| {
                let y = g.exp(v[0])?;
                g.mean_all(y)
            }),
        ),
        (
            "select_rows",
            vec![m(&[4, 3], &mut r)],
            Box::new(|g, v| {
                let y = g.select_rows(v[0], &[2, 0, 2])?;
                let y = g.mul(y, y)?;
                weighted_sum(g, y, 24)
            }),
        ),
        (
            "gather",
            vec![m(&[3, 4], &mut r)],
            Box::new(|g, v| {
                let y = g.gather(v[0], &[1, 3, 0])?;
                let y = g.mul(y, y)?;
                weighted_sum(g, y, 25)
            }),
        ),
        (
            "reshape",
            vec![m(&[2, 6], &mut r)],
            Box::new(|g, v| {
                let y = g.reshape(v[0], vec![3, 4])?;
                let y = g.softmax(y)?;
                weighted_sum(g, y, 26)
            }),
        ),
    ];

    let mut probes: Vec<(String, Probe)> = Vec::new();
    for (i, (name, inputs, build)) in cases.iter().enumerate() {
        for p in fd_check(inputs, 2, 100 + i as u64, build) {
            probes.push((name.to_string(), p));
        }
    }

    // End to end: lambda * L_ssl + L_ml through the whole encoder.
    let enc = tiny_encoder(3);
    let params = ModelParams::init(enc, &mut rng(5)).map_err(|e| e.to_string())?;
    let views = random_tensor(&[6, enc.excerpt_len()], -0.8, 0.8, &mut rng(6));
    let tags = vec![vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 0.0], vec![1.0, 1.0, 0.0]];
    let mask = LabeledMask::new(vec![0, 2], 3).map_err(|e| e.to_string())?;
    let objective = Objective {
        ssl_weight: Some(0.5),
        supervised: true,
        temperature: 0.5,
    };
    let analytic = step_grads(&params, &views, &tags, &mask, &objective)
        .map_err(|e| e.to_string())?
        .ok_or("no loss")?;
    let loss_at = |p: &ModelParams| eval_loss(p, &views, &tags, &mask, &objective).unwrap().unwrap();
    let mut r = rng(7);
    for _ in 0..60 {
        let t = r.gen_range(0..params.tensors().len());
        let idx = r.gen_range(0..params.tensors()[t].numel());
        let mut plus = params.clone();
        plus.tensors_mut()[t].data_mut()[idx] += common::FD_STEP;
        let mut minus = params.clone();
        minus.tensors_mut()[t].data_mut()[idx] -= common::FD_STEP;
        probes.push((
            format!("ssml:{}", params.names()[t]),
            Probe {
                input: t,
                index: idx,
                analytic: analytic.grads[t][idx],
                numeric: (loss_at(&plus) - loss_at(&minus)) / (2.0 * common::FD_STEP),
            },
        ));
    }

    let (worst_name, worst) = probes
        .iter()
        .max_by(|a, b| a.1.rel_error().total_cmp(&b.1.rel_error()))
        .expect("probes");
    ensure(probes.len() >= MIN_PROBES, || format!("only {} probes", probes.len()))?;
    ensure(worst.rel_error() < GRAD_TOL, || {
        format!(
            "{worst_name} probe {worst:?} has relative error {:.3e}",
            worst.rel_error()
        )
    })?;
    Ok(format!(
        "{} probes over {} primitives + end-to-end loss, max rel err {:.2e} < {GRAD_TOL:e}",
        probes.len(),
        cases.len(),
        worst.rel_error()
    ))
}

// ---------------------------------------------------------------- 2

const LOSS_ORACLE_TOL: f64 = 1e-10;
const ML_HAND_TOL: f64 = 1e-12;

fn loss_oracles() -> Outcome {
    let mut worst: f64 = 0.0;
    for b in [1usize, 2, 4] {
        for seed in 0..5 {
            let t = random_tensor(&[2 * b, 7], -1.0, 1.0, &mut rng(1000 + seed + 10 * b as u64));
            let rows: Vec<Vec<f64>> = t.rows().map(<[f64]>::to_vec).collect();
            let ours =
                ssl_loss(&ContrastiveBatch::new(t, 0.5).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
            let oracle = nt_xent_oracle(&rows, 0.5);
            worst = worst.max((ours - oracle).abs());
            if b == 1 {
                ensure(ours == 0.0, || format!("B=1 loss is {ours:e}, not exactly 0"))?;
            }
        }
    }
    ensure(worst < LOSS_ORACLE_TOL, || {
        format!("ssl loss differs from oracle by {worst:e}")
    })?;

    let same = Tensor::new(vec![4, 3], [0.3, -0.2, 0.9].repeat(4)).unwrap();
    let identical = ssl_loss(&ContrastiveBatch::new(same, 0.5).unwrap()).unwrap();
    ensure(identical == 3f64.ln(), || {
        format!("identical projections give {identical:.17}, not log 3")
    })?;

    // B = 2, T = 2 by hand: track 0 tags [1,0], track 1 tags [0,1].
    let probs = Tensor::new(vec![4, 2], vec![0.9, 0.2, 0.8, 0.1, 0.3, 0.6, 0.4, 0.7]).unwrap();
    let tags = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let both = ml_loss(&probs, &tags, &LabeledMask::all(2)).unwrap().value;
    let hand_both = ((-(0.9f64.ln()) - 0.8f64.ln()) / 2.0
        + (-(0.8f64.ln()) - 0.9f64.ln()) / 2.0
        + (-(0.7f64.ln()) - 0.6f64.ln()) / 2.0
        + (-(0.6f64.ln()) - 0.7f64.ln()) / 2.0)
        / 2.0;
    let second = ml_loss(&probs, &tags, &LabeledMask::new(vec![1], 2).unwrap())
        .unwrap()
        .value;
    let hand_second = (-(0.7f64.ln()) - 0.6f64.ln()) / 2.0 + (-(0.6f64.ln()) - 0.7f64.ln()) / 2.0;
    ensure((both - hand_both).abs() < ML_HAND_TOL, || {
        format!("ml loss {both} vs hand {hand_both}")
    })?;
    ensure((second - hand_second).abs() < ML_HAND_TOL, || {
        format!("masked ml loss {second} vs hand {hand_second}")
    })?;
    Ok(format!(
        "ssl vs double-loop oracle max diff {worst:.1e} (B=1,2,4); B=1 -> 0; identical -> log 3 exactly; ml hand cases within {ML_HAND_TOL:e}"
    ))
}

// ---------------------------------------------------------------- 3

const NORM_TOL: f64 = 1e-6;
const LN_SCALE_TOL: f64 = 1e-6;

fn normalization_invariants() -> Outcome {
    let enc = EncoderConfig {
        embed_dim: 16,
        ..EncoderConfig::default()
    };
    let mut r = rng(31);
    let mut worst_embed: f64 = 0.0;
    let mut worst_track: f64 = 0.0;
    let mut worst_scale: f64 = 0.0;
    let base = ModelParams::init(enc, &mut rng(32)).unwrap();
    for i in 0..1000 {
        let mut params = base.clone();
        let (lo, hi) = if i % 2 == 0 { (0.1, 3.0) } else { (-3.0, 3.0) };
        *params.get_mut("ln.gain").unwrap() = random_tensor(&[16], lo, hi, &mut r);
        *params.get_mut("ln.bias").unwrap() = random_tensor(&[16], -1.0, 1.0, &mut r);
        let scale = 10f64.powf(r.gen_range(-3.0..3.0));
        let h = random_tensor(&[4, 16], -scale, scale, &mut r);
        let mut g = Graph::new();
        let bound = params.bind_with(&mut g, false);
        let hv = g.constant(h);
        let z = embed(&mut g, &bound, hv).unwrap();
        for row in g.value(z).rows() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            worst_embed = worst_embed.max((n - 1.0).abs());
        }
        let excerpts: Vec<&[f64]> = g.value(z).rows().take(1 + i % 4).collect();
        let t = track_embedding("t", &excerpts).unwrap();
        let n = t.vector.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        worst_track = worst_track.max((n - 1.0).abs());
    }
    // Scale invariance with gain 1, bias 0.
    for i in 0..200 {
        let h = random_tensor(&[3, 16], -2.0, 2.0, &mut rng(400 + i));
        let run = |c: f64| {
            let mut g = Graph::new();
            let bound = base.bind_with(&mut g, false);
            let scaled: Vec<f64> = h.data().iter().map(|v| v * c).collect();
            let x = g.constant(Tensor::new(vec![3, 16], scaled).unwrap());
            let z = embed(&mut g, &bound, x).unwrap();
            g.value(z).data().to_vec()
        };
        let reference = run(1.0);
        for c in [0.1, 1.0, 10.0] {
            let d = run(c)
                .iter()
                .zip(&reference)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            worst_scale = worst_scale.max(d);
        }
    }
    ensure(worst_embed < NORM_TOL, || format!("embed norm off by {worst_embed:e}"))?;
    ensure(worst_track < NORM_TOL, || {
        format!("track embedding norm off by {worst_track:e}")
    })?;
    ensure(worst_scale < LN_SCALE_TOL, || {
        format!("LN scale invariance off by {worst_scale:e}")
    })?;
    Ok(format!(
        "1000 inputs: | ||z||-1 | <= {worst_embed:.1e}, track <= {worst_track:.1e}; scale invariance <= {worst_scale:.1e}"
    ))
}

// ---------------------------------------------------------------- 4

const AUC_TOL: f64 = 1e-12;

fn recall_oracle(emb: &[TrackEmbedding], tags: &[Vec<bool>], k: usize) -> Option<f64> {
    let n = emb.len();
    let mut hits = 0usize;
    let mut evaluated = 0usize;
    for q in 0..n {
        let relevant = |j: usize| (0..tags[q].len()).any(|t| tags[q][t] && tags[j][t]);
        if !(0..n).any(|j| j != q && relevant(j)) {
            continue;
        }
        evaluated += 1;
        let mut others: Vec<(f64, &str, usize)> = (0..n)
            .filter(|&j| j != q)
            .map(|j| (emb[q].dot(&emb[j]), emb[j].track_id.as_str(), j))
            .collect();
        // full sort: score descending, id ascending
        others.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
        if others.iter().take(k).any(|&(_, _, j)| relevant(j)) {
            hits += 1;
        }
    }
    (evaluated > 0).then(|| 100.0 * hits as f64 / evaluated as f64)
}

fn roc_oracle(s: &[f64], y: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if y[i] && !y[j] {
                den += 1.0;
                num += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn ap_oracle(s: &[f64], y: &[bool]) -> f64 {
    // rank of i = items placed at or before it (higher score, or equal score and lower index)
    let before = |i: usize, j: usize| s[j] > s[i] || (s[j] == s[i] && j <= i);
    let positives: Vec<usize> = (0..s.len()).filter(|&i| y[i]).collect();
    let mut total = 0.0;
    for &p in &positives {
        let rank = (0..s.len()).filter(|&j| before(p, j)).count();
        let pos_at_or_before = positives.iter().filter(|&&j| before(p, j)).count();
        total += pos_at_or_before as f64 / rank as f64;
    }
    total / positives.len() as f64
}

fn metric_oracles() -> Outcome {
    let mut r = rng(44);
    let (mut recall_cases, mut auc_tags) = (0usize, 0usize);
    let mut worst_auc: f64 = 0.0;
    for inst in 0..200 {
        let n = r.gen_range(2..=32);
        let t = r.gen_range(2..=5);
        let levels: f64 = if inst % 3 == 0 { 3.0 } else { 1000.0 };
        let emb: Vec<TrackEmbedding> = (0..n)
            .map(|i| TrackEmbedding {
                track_id: format!("t{:03}", (i * 7919) % 1000),
                vector: (0..4)
                    .map(|_| ((r.gen_range(-1.0f64..1.0) * levels).round() / levels) as f32)
                    .collect(),
            })
            .collect();
        let tags: Vec<Vec<bool>> = (0..n).map(|_| (0..t).map(|_| r.gen_bool(0.3)).collect()).collect();
        let scores: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..t)
                    .map(|_| (r.gen_range(0.0..1.0f64) * levels).round() / levels)
                    .collect()
            })
            .collect();

        let ks = [1, 2, 4, 8];
        let ours = recall_at_k(&emb, &tags, &ks);
        let oracle: Vec<Option<f64>> = ks.iter().map(|&k| recall_oracle(&emb, &tags, k)).collect();
        match (&ours, oracle[0]) {
            (Ok(v), Some(_)) => {
                recall_cases += 1;
                for (i, &k) in ks.iter().enumerate() {
                    ensure(Some(v[i]) == oracle[i], || {
                        format!("instance {inst}: R@{k} {} vs oracle {:?}", v[i], oracle[i])
                    })?;
                }
                ensure(v.windows(2).all(|w| w[0] <= w[1]), || {
                    format!("instance {inst}: R@K not monotone {v:?}")
                })?;
            }
            (Err(_), None) => {}
            (o, e) => return Err(format!("instance {inst}: recall {o:?} vs oracle {e:?}")),
        }

        let (roc, pr) = (roc_auc(&scores, &tags), pr_auc(&scores, &tags));
        let mut roc_vals = Vec::new();
        let mut pr_vals = Vec::new();
        for tag in 0..t {
            let s: Vec<f64> = scores.iter().map(|row| row[tag]).collect();
            let y: Vec<bool> = tags.iter().map(|row| row[tag]).collect();
            let p = y.iter().filter(|&&b| b).count();
            if p == 0 || p == n {
                continue;
            }
            let (ro, ao) = (roc_oracle(&s, &y), ap_oracle(&s, &y));
            let (Ok(rm), Ok(pm)) = (&roc, &pr) else {
                return Err(format!("instance {inst}: metric failed on a valid tag"));
            };
            worst_auc = worst_auc
                .max((rm.per_tag[tag].unwrap() - ro).abs())
                .max((pm.per_tag[tag].unwrap() - ao).abs());
            roc_vals.push(ro);
            pr_vals.push(ao);
            auc_tags += 1;
        }
        if let (Ok(rm), Ok(pm)) = (&roc, &pr) {
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            worst_auc = worst_auc
                .max((rm.mean - mean(&roc_vals)).abs())
                .max((pm.mean - mean(&pr_vals)).abs());
        }
    }
    ensure(worst_auc < AUC_TOL, || {
        format!("AUC differs from oracle by {worst_auc:e}")
    })?;
    ensure(recall_cases >= 150, || {
        format!("only {recall_cases} instances had a relevant pair")
    })?;
    Ok(format!(
        "200 instances: R@K exact on {recall_cases}, monotone; {auc_tags} tag AUCs within {worst_auc:.1e}"
    ))
}

// ---------------------------------------------------------------- 5

const GRAD_EQ_TOL: f64 = 1e-12;

fn flag_semantics() -> Outcome {
    let data = desk_corpus(5);
    let enc = EncoderConfig::default();
    let params = ModelParams::init(enc, &mut rng(50)).unwrap();
    let config = RunConfig {
        seed: 5,
        fine_tune_contrastive: false,
        ..RunConfig::default()
    };
    let trainer = Trainer::new(&data, config.clone(), &enc).map_err(|e| e.to_string())?;
    let batch = trainer.epoch_batches(0).unwrap().remove(0);

    // (a) contrastive off == pure supervised gradients
    let flagged = trainer.batch_grads(&params, &batch, 0, 0).unwrap().ok_or("no loss")?;
    let views = trainer.batch_views(&batch, 0, 0).unwrap();
    let (tags, mask) = trainer.batch_targets(&batch);
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let x = g.constant(views);
    let h = encode(&mut g, &bound, x).unwrap();
    let z = embed(&mut g, &bound, h).unwrap();
    let y = tag_probs(&mut g, &bound, z).unwrap();
    let loss = ml_loss_graph(&mut g, y, &tags, &mask).unwrap().unwrap();
    g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in bound.vars().iter().enumerate() {
        let direct = g
            .grad(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; params.tensors()[i].numel()]);
        for (a, b) in flagged.grads[i].iter().zip(&direct) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= GRAD_EQ_TOL, || {
        format!("contrastive-off gradients differ from supervised by {worst:e}")
    })?;
    ensure(flagged.loss == g.value(loss).item().unwrap(), || {
        "contrastive-off loss differs from ml loss".into()
    })?;

    // (b) label rate 1.0: masked == unmasked
    ensure(trainer.train.iter().all(|&i| trainer.labeled[i]), || {
        "rate 1.0 left a track unlabeled".into()
    })?;
    let views = trainer.batch_views(&batch, 0, 0).unwrap();
    let obj = config.objective().unwrap();
    let masked = eval_loss(&params, &views, &tags, &mask, &obj).unwrap();
    let unmasked = eval_loss(&params, &views, &tags, &LabeledMask::all(batch.len()), &obj).unwrap();
    ensure(masked == unmasked, || {
        format!("masked {masked:?} vs unmasked {unmasked:?}")
    })?;

    // (c) one fine-tune step from a loaded checkpoint moves every tensor
    let pre_cfg = RunConfig {
        seed: 5,
        max_epochs: 1,
        ..RunConfig::default()
    };
    let pre = pretrain(&data, enc, &pre_cfg, |_| {}).unwrap();
    let bytes = pre.to_checkpoint().to_bytes();
    let loaded = TrainState::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap())
        .unwrap()
        .params;
    let ft_cfg = RunConfig {
        seed: 5,
        fine_tune_contrastive: true,
        load_pretrain: true,
        alpha: 1.0,
        ..RunConfig::default()
    };
    let ft = Trainer::new(&data, ft_cfg.clone(), &enc).unwrap();
    let mut state = TrainState::new(loaded.clone(), &ft_cfg).unwrap();
    let batch = ft.epoch_batches(0).unwrap().remove(0);
    ft.train_step(&mut state, &batch, 0).unwrap();
    let frozen: Vec<&str> = loaded
        .named()
        .zip(state.params.tensors())
        .filter(|((_, before), after)| before.data().iter().zip(after.data()).all(|(a, b)| a == b))
        .map(|((n, _), _)| n)
        .collect();
    ensure(frozen.is_empty(), || format!("unchanged after one step: {frozen:?}"))?;
    Ok(format!(
        "contrastive-off grads == supervised (max diff {worst:.1e}); rate 1.0 masked == unmasked; all {} tensors moved",
        loaded.tensors().len()
    ))
}

// ---------------------------------------------------------------- 6

/// Seeds, epoch budgets and the encoder used for the desk-scale trend.
const TREND_SEEDS: [u64; 3] = [0, 1, 2];
const TREND_PRETRAIN_EPOCHS: usize = 20;
const TREND_FINETUNE_EPOCHS: usize = 30;
const TREND_RATES: [f64; 2] = [1.0, 0.1];

fn desk_trend() -> Outcome {
    let enc = EncoderConfig::default();
    // (rate, supervised R@1, ours-G R@1) per seed
    let mut rows = Vec::new();
    for &seed in &TREND_SEEDS {
        let data = desk_corpus(seed);
        let base = RunConfig {
            seed,
            ..RunConfig::default()
        };
        let mut ssl_final = f64::NAN;
        let pre = pretrain(
            &data,
            enc,
            &RunConfig {
                max_epochs: TREND_PRETRAIN_EPOCHS,
                ..base.clone()
            },
            |l| ssl_final = l.train_loss,
        )
        .map_err(|e| e.to_string())?;
        let mut r = None;
        for &rate in &TREND_RATES {
            let sup_cfg = RunConfig {
                label_rate: rate,
                max_epochs: TREND_FINETUNE_EPOCHS,
                ..base.clone()
            };
            let mut ml_final = f64::NAN;
            let sup = finetune(&data, enc, &sup_cfg, None, |l| ml_final = l.train_loss).map_err(|e| e.to_string())?;
            // r from the single-objective runs with all labels
            let r = *r.get_or_insert_with(|| estimate_balance_factor(ml_final, ssl_final).expect("positive losses").r);
            let g_cfg = RunConfig {
                fine_tune_contrastive: true,
                load_pretrain: true,
                fine_tune_augment: false,
                alpha: 1.0,
                balance_r: r,
                ..sup_cfg.clone()
            };
            let ours = finetune(&data, enc, &g_cfg, Some(&pre.params), |_| {}).map_err(|e| e.to_string())?;
            let r1 = |p: &ModelParams| evaluate_split(p, &data, Split::Test).map(|m| m.recall_at(1).unwrap());
            let (s, o) = (
                r1(&sup.best_params).map_err(|e| e.to_string())?,
                r1(&ours.best_params).map_err(|e| e.to_string())?,
            );
            println!("    seed {seed} rate {rate}: supervised R@1 {s:.2}, ours-G R@1 {o:.2} (r = {r:.4})");
            rows.push((rate, s, o));
        }
    }
    let mean = |rate: f64, f: fn(&(f64, f64, f64)) -> f64| {
        let v: Vec<f64> = rows.iter().filter(|x| x.0 == rate).map(f).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (sup_low, ours_low) = (mean(0.1, |x| x.1), mean(0.1, |x| x.2));
    let (sup_full, ours_full) = (mean(1.0, |x| x.1), mean(1.0, |x| x.2));
    let gap_low = ours_low - sup_low;
    let gap_full = ours_full - sup_full;
    let summary = format!(
        "rate 0.1: ours-G {ours_low:.2} vs sup {sup_low:.2} (gap {gap_low:+.2}); rate 1.0: ours-G {ours_full:.2} vs sup {sup_full:.2} (gap {gap_full:+.2})"
    );
    ensure(ours_low >= sup_low, || format!("(a) failed: {summary}"))?;
    ensure(gap_low >= gap_full, || format!("(b) failed: {summary}"))?;
    Ok(summary)
}

// ---------------------------------------------------------------- 7

fn balancing_factor() -> Outcome {
    let mut r = rng(70);
    for _ in 0..1000 {
        let ml = r.gen_range(1e-3..10.0);
        let ssl = r.gen_range(1e-3..10.0);
        let b = estimate_balance_factor(ml, ssl).map_err(|e| e.to_string())?;
        ensure(b.r == ml / ssl, || format!("r = {} for {ml}/{ssl}", b.r))?;
        let alpha = r.gen_range(0.01..10.0);
        ensure(b.lambda(alpha).unwrap() == alpha / b.r, || "lambda != alpha / r".into())?;
    }
    ensure(MAGNATAGATUNE_R == 22.00 && MTG_JAMENDO_R == 18.95, || {
        "reference r values changed".into()
    })?;
    let candidates = BalanceFactor::new(MAGNATAGATUNE_R)
        .unwrap()
        .candidates(&[0.1, 1.0, 10.0])
        .unwrap();
    ensure(candidates == vec![0.1 / 22.0, 1.0 / 22.0, 10.0 / 22.0], || {
        format!("{candidates:?}")
    })?;

    let mut shown = Vec::new();
    for (preset, r_value) in [("mtat", 22.00), ("mtg", 18.95)] {
        let out = Command::new(env!("CARGO_BIN_EXE_ssml"))
            .args([
                "finetune",
                "--data",
                "unused",
                "--dry-run",
                "--contrastive",
                "--alpha",
                "1",
                "--balance-r",
                preset,
            ])
            .output()
            .map_err(|e| e.to_string())?;
        let stdout = String::from_utf8_lossy(&out.stdout);
        ensure(out.status.success(), || {
            format!("cli failed: {}", String::from_utf8_lossy(&out.stderr))
        })?;
        let lambda: f64 = stdout
            .split_whitespace()
            .find_map(|kv| kv.strip_prefix("lambda="))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| format!("no lambda in {stdout:?}"))?;
        ensure(lambda == 1.0 / r_value, || {
            format!("cli lambda {lambda} for preset {preset}")
        })?;
        shown.push(format!("{preset}: lambda={lambda:.5}"));
    }
    Ok(format!(
        "r = ml/ssl exact on 1000 draws; CLI presets {}",
        shown.join(", ")
    ))
}

// ---------------------------------------------------------------- 8

fn determinism_and_persistence() -> Outcome {
    let data = desk_corpus(8);
    let enc = EncoderConfig::default();
    let config = RunConfig {
        seed: 8,
        fine_tune_contrastive: true,
        fine_tune_augment: true,
        alpha: 1.0,
        ..RunConfig::default()
    };
    let trainer = Trainer::new(&data, config.clone(), &enc).unwrap();
    let batches = trainer.epoch_batches(0).unwrap();
    let run = || {
        let mut state = TrainState::init(enc, &config).unwrap();
        let losses: Vec<u64> = (0..5)
            .map(|s| {
                trainer
                    .train_step(&mut state, &batches[s], s)
                    .unwrap()
                    .unwrap()
                    .to_bits()
            })
            .collect();
        (losses, state)
    };
    let (a, state) = run();
    let (b, _) = run();
    ensure(a == b, || {
        format!("losses differ between identical runs: {a:?} vs {b:?}")
    })?;

    let restored =
        TrainState::from_checkpoint(&Checkpoint::from_bytes(&state.to_checkpoint().to_bytes()).unwrap()).unwrap();
    let (mut s1, mut s2) = (state, restored);
    let next1 = trainer.train_step(&mut s1, &batches[5], 5).unwrap().unwrap();
    let next2 = trainer.train_step(&mut s2, &batches[5], 5).unwrap().unwrap();
    ensure(next1.to_bits() == next2.to_bits(), || {
        format!("next-step loss {next1} vs {next2} after reload")
    })?;
    ensure(s1.params == s2.params, || "parameters diverge after reload".into())?;

    let test: Vec<_> = data
        .split_indices(Split::Test)
        .iter()
        .map(|&i| &data.records[i])
        .collect();
    let (emb, _) = embed_tracks(&s1.params, &test, 64).unwrap();
    let bytes = store_to_bytes(&emb).unwrap();
    let back = store_from_bytes(&bytes).unwrap();
    let bit_equal = back.len() == emb.len()
        && back.iter().zip(&emb).all(|(x, y)| {
            x.track_id == y.track_id && x.vector.iter().zip(&y.vector).all(|(p, q)| p.to_bits() == q.to_bits())
        });
    ensure(bit_equal && store_to_bytes(&back).unwrap() == bytes, || {
        "embedding store round trip is not exact".into()
    })?;
    Ok(format!(
        "5-step losses bit-identical; reload keeps next loss {next1:.6} bit-exact; store of {} embeddings round-trips",
        emb.len()
    ))
}

// ---------------------------------------------------------------- 9

const RATE_TOL: f64 = 0.01;
const SNR_TOL_DB: f64 = 1.0;
const GAIN_TOL: f64 = 1e-3;

fn sine(freq: f64, n: usize, sr: f64, amp: f64) -> Vec<f64> {
    (0..n)
        .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr).sin())
        .collect()
}

fn augmentation_statistics() -> Outcome {
    // probabilities as published, in chain order
    let published = [
        (TransformKind::Polarity, 0.8),
        (TransformKind::Noise, 0.01),
        (TransformKind::Gain, 0.3),
        (TransformKind::Filter, 0.8),
        (TransformKind::Delay, 0.3),
        (TransformKind::PitchShift, 0.6),
        (TransformKind::Reverb, 0.6),
    ];
    let spec = AugmentSpec::default();
    let mut r = rng(90);
    let n = 100_000;
    let mut counts = [0usize; 7];
    for _ in 0..n {
        let chain = sample_chain(&spec, &mut r);
        for (i, (kind, _)) in published.iter().enumerate() {
            if chain.contains(*kind) {
                counts[i] += 1;
            }
        }
    }
    let mut worst_rate: f64 = 0.0;
    for (i, (kind, p)) in published.iter().enumerate() {
        let rate = counts[i] as f64 / n as f64;
        worst_rate = worst_rate.max((rate - p).abs());
        ensure((rate - p).abs() <= RATE_TOL, || {
            format!("{kind:?} included at {rate}, expected {p}")
        })?;
    }

    let sr = 22050.0;
    let x = sine(440.0, 22050, sr, 0.5);
    let mut worst_snr: f64 = 0.0;
    for (k, target) in [40.0, 55.0, 70.0, 80.0].into_iter().enumerate() {
        let mut y = x.clone();
        Transform::Noise {
            snr_db: target,
            seed: k as u64,
        }
        .apply(&mut y, sr);
        let ps: f64 = x.iter().map(|v| v * v).sum();
        let pn: f64 = x.iter().zip(&y).map(|(a, b)| (b - a) * (b - a)).sum();
        let snr = 10.0 * (ps / pn).log10();
        worst_snr = worst_snr.max((snr - target).abs());
    }
    ensure(worst_snr <= SNR_TOL_DB, || {
        format!("noise SNR off by {worst_snr:.3} dB")
    })?;

    let mut y = x.clone();
    Transform::Gain { db: -6.0 }.apply(&mut y, sr);
    let ratio = y[100] / x[100];
    ensure((ratio - 0.5012).abs() <= GAIN_TOL, || {
        format!("-6 dB gain ratio {ratio}")
    })?;

    let mut y = x.clone();
    Transform::PitchShift { semitones: 7.0 }.apply(&mut y, sr);
    let mut spectrum: Vec<Complex<f64>> = y.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new()
        .plan_fft_forward(spectrum.len())
        .process(&mut spectrum);
    let half = spectrum.len() / 2;
    let peak = (1..half)
        .max_by(|&a, &b| spectrum[a].norm().total_cmp(&spectrum[b].norm()))
        .unwrap();
    let bin_hz = sr / spectrum.len() as f64;
    let peak_hz = peak as f64 * bin_hz;
    ensure((peak_hz - 659.3).abs() <= bin_hz, || {
        format!("+7 semitone peak at {peak_hz} Hz")
    })?;

    Ok(format!(
        "inclusion rates within {worst_rate:.4} over 1e5 chains; SNR within {worst_snr:.3} dB; gain ratio {ratio:.5}; +7 st peak {peak_hz:.1} Hz"
    ))
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "gradient correctness", gradient_correctness),
        (2, "loss oracles", loss_oracles),
        (3, "normalization invariants", normalization_invariants),
        (4, "metric oracles", metric_oracles),
        (5, "flag semantics", flag_semantics),
        (6, "desk-scale trend", desk_trend),
        (7, "balancing factor", balancing_factor),
        (8, "determinism & persistence", determinism_and_persistence),
        (9, "augmentation statistics", augmentation_statistics),
    ];
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    for (n, name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS — {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL — {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("acceptance: {failed} criterion(s) failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
