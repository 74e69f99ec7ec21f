//! Contrastive (NT-Xent) loss, tag-classification metric-learning loss, the
//! combined objective and the balancing-factor procedure.
//!
//! Batches follow the positive-pair layout: rows `2k` and `2k + 1` are the
//! two views of track `k` (0-based).

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{input_err, shape_err, Error, Result};

/// Temperature used unless configured otherwise (the SimCLR default).
pub const DEFAULT_TEMPERATURE: f64 = 0.5;

/// Predicted probabilities are clamped into `[BCE_CLAMP, 1 - BCE_CLAMP]`
/// before taking logs.
pub const BCE_CLAMP: f64 = 1e-7;

const NORM_EPS: f64 = 1e-12;

/// Balancing-factor reference values for the two benchmark corpora.
pub const MAGNATAGATUNE_R: f64 = 22.00;
pub const MTG_JAMENDO_R: f64 = 18.95;

/// Candidate multipliers for `lambda = alpha / r`.
pub const ALPHA_CANDIDATES: [f64; 4] = [0.05, 0.1, 1.0, 10.0];
pub const MAGNATAGATUNE_ALPHAS: [f64; 3] = [0.1, 1.0, 10.0];
pub const MTG_JAMENDO_ALPHAS: [f64; 3] = [0.05, 0.1, 1.0];

pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(shape_err!("cosine_sim: lengths {} and {}", u.len(), v.len()));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Projections of `2B` augmented excerpts plus the softmax temperature.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    projections: Tensor,
    temperature: f64,
}

impl ContrastiveBatch {
    pub fn new(projections: Tensor, temperature: f64) -> Result<Self> {
        let shape = projections.shape();
        if shape.len() != 2 || !shape[0].is_multiple_of(2) {
            return Err(shape_err!(
                "contrastive batch needs [2B, dim] projections, got {shape:?}"
            ));
        }
        if !(temperature > 0.0) {
            return Err(input_err!("temperature must be positive, got {temperature}"));
        }
        Ok(Self {
            projections,
            temperature,
        })
    }

    pub fn projections(&self) -> &Tensor {
        &self.projections
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn rows(&self) -> usize {
        self.projections.shape()[0]
    }
}

/// Index of the other view of the same track.
pub fn partner(i: usize) -> usize {
    i ^ 1
}

/// Contrastive loss for anchor `i` with positive `j`: the negative log of
/// the softmax weight of `j` among all rows except `i`.
pub fn nt_xent_pair(i: usize, j: usize, batch: &ContrastiveBatch) -> Result<f64> {
    let n = batch.rows();
    if i == j || i >= n || j >= n {
        return Err(input_err!("invalid pair ({i}, {j}) for {n} rows"));
    }
    let o = &batch.projections;
    let tau = batch.temperature;
    let positive = cosine_sim(o.row(i), o.row(j))? / tau;
    let mut denom = 0.0;
    for l in (0..n).filter(|&l| l != i) {
        denom += (cosine_sim(o.row(i), o.row(l))? / tau - positive).exp();
    }
    Ok(denom.ln())
}

/// Mean contrastive loss over both directions of every positive pair.
pub fn ssl_loss(batch: &ContrastiveBatch) -> Result<f64> {
    let mut g = Graph::new();
    let o = g.constant(batch.projections.clone());
    let loss = ssl_loss_graph(&mut g, o, batch.temperature)?;
    Ok(g.value(loss).data()[0])
}

/// Differentiable contrastive loss of `projections: [2B, dim]`.
///
/// Each row's term is evaluated as `log sum_{l != i} exp(s_il - s_ij)`,
/// which equals the ratio form and is exactly zero for a single pair.
pub fn ssl_loss_graph(g: &mut Graph, projections: Var, temperature: f64) -> Result<Var> {
    let shape = g.shape(projections).to_vec();
    if shape.len() != 2 || !shape[0].is_multiple_of(2) || shape[0] == 0 {
        return Err(shape_err!("ssl loss needs [2B, dim] projections, got {shape:?}"));
    }
    if !(temperature > 0.0) {
        return Err(input_err!("temperature must be positive, got {temperature}"));
    }
    let n = shape[0];
    let unit = g.l2_normalize(projections, NORM_EPS)?;
    let unit_t = g.transpose(unit)?;
    let cos = g.matmul(unit, unit_t)?;
    let logits = g.scale(cos, 1.0 / temperature)?;
    let partners: Vec<usize> = (0..n).map(partner).collect();
    let positive = g.gather(logits, &partners)?;
    let neg_positive = g.neg(positive)?;
    let shifted = g.add_col(logits, neg_positive)?;
    let exps = g.exp(shifted)?;
    let mut mask = Tensor::filled(vec![n, n], 1.0);
    for i in 0..n {
        mask.data_mut()[i * n + i] = 0.0;
    }
    let mask = g.constant(mask);
    let masked = g.mul(exps, mask)?;
    let denom = g.sum_axis(masked, 1)?;
    let per_row = g.log(denom)?;
    g.mean_all(per_row)
}

/// Batch indices `k` (track positions, 0-based) whose tracks carry tags.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabeledMask {
    labeled: Vec<usize>,
}

impl LabeledMask {
    pub fn new(mut labeled: Vec<usize>, batch_tracks: usize) -> Result<Self> {
        labeled.sort_unstable();
        labeled.dedup();
        if let Some(&k) = labeled.iter().find(|&&k| k >= batch_tracks) {
            return Err(input_err!("labeled index {k} outside batch of {batch_tracks} tracks"));
        }
        Ok(Self { labeled })
    }

    pub fn all(batch_tracks: usize) -> Self {
        Self {
            labeled: (0..batch_tracks).collect(),
        }
    }

    pub fn from_flags(flags: &[bool]) -> Self {
        Self {
            labeled: flags.iter().enumerate().filter_map(|(k, &f)| f.then_some(k)).collect(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.labeled
    }

    pub fn len(&self) -> usize {
        self.labeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labeled.is_empty()
    }
}

/// Value of the metric-learning loss; `no_labels` is set when the batch had
/// no labeled track and the value is a placeholder zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlLoss {
    pub value: f64,
    pub no_labels: bool,
}

/// Binary cross-entropy averaged over tags, summed over both views of every
/// labeled track and divided by the number of labeled tracks.
pub fn ml_loss(probs: &Tensor, tags: &[Vec<f64>], mask: &LabeledMask) -> Result<MlLoss> {
    let mut g = Graph::new();
    let p = g.constant(probs.clone());
    Ok(match ml_loss_graph(&mut g, p, tags, mask)? {
        Some(v) => MlLoss {
            value: g.value(v).data()[0],
            no_labels: false,
        },
        None => MlLoss {
            value: 0.0,
            no_labels: true,
        },
    })
}

/// Differentiable metric-learning loss. `probs` is `[2B, T]`; `tags[k]` is
/// the binary target of track `k` and is read only for labeled `k`.
/// Returns `None` when the mask is empty.
pub fn ml_loss_graph(g: &mut Graph, probs: Var, tags: &[Vec<f64>], mask: &LabeledMask) -> Result<Option<Var>> {
    let shape = g.shape(probs).to_vec();
    if shape.len() != 2 || !shape[0].is_multiple_of(2) {
        return Err(shape_err!("ml loss needs [2B, T] probabilities, got {shape:?}"));
    }
    let (rows, n_tags) = (shape[0], shape[1]);
    let batch_tracks = rows / 2;
    if tags.len() != batch_tracks {
        return Err(shape_err!("{} tag vectors for {batch_tracks} tracks", tags.len()));
    }
    if mask.is_empty() {
        return Ok(None);
    }
    let mut selected = Vec::with_capacity(2 * mask.len());
    let mut targets = Vec::with_capacity(2 * mask.len() * n_tags);
    for &k in mask.indices() {
        if k >= batch_tracks {
            return Err(input_err!("labeled index {k} outside batch of {batch_tracks} tracks"));
        }
        let y = &tags[k];
        if y.len() != n_tags {
            return Err(shape_err!("track {k} has {} tags, expected {n_tags}", y.len()));
        }
        if y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(input_err!("tags of track {k} are not binary"));
        }
        for view in [2 * k, 2 * k + 1] {
            selected.push(view);
            targets.extend_from_slice(y);
        }
    }
    let target_shape = vec![selected.len(), n_tags];
    let inverse: Vec<f64> = targets.iter().map(|y| 1.0 - y).collect();

    let p = g.select_rows(probs, &selected)?;
    let p = g.clamp(p, BCE_CLAMP, 1.0 - BCE_CLAMP)?;
    let log_p = g.log(p)?;
    let neg_p = g.neg(p)?;
    let one_minus_p = g.add_scalar(neg_p, 1.0)?;
    let log_one_minus = g.log(one_minus_p)?;
    let y = g.constant(Tensor::new(target_shape.clone(), targets)?);
    let y_inv = g.constant(Tensor::new(target_shape, inverse)?);
    let pos = g.mul(y, log_p)?;
    let neg = g.mul(y_inv, log_one_minus)?;
    let ll = g.add(pos, neg)?;
    let total = g.sum_all(ll)?;
    let loss = g.scale(total, -1.0 / (n_tags as f64 * mask.len() as f64))?;
    Ok(Some(loss))
}

/// `lambda * ssl + ml`.
pub fn ssml_loss(ssl: f64, ml: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(input_err!("lambda must be non-negative, got {lambda}"));
    }
    Ok(lambda * ssl + ml)
}

/// Graph form of [`ssml_loss`]; either term may be absent.
pub fn ssml_loss_graph(g: &mut Graph, ssl: Option<Var>, ml: Option<Var>, lambda: f64) -> Result<Option<Var>> {
    if !(lambda >= 0.0) {
        return Err(input_err!("lambda must be non-negative, got {lambda}"));
    }
    let weighted = match ssl {
        Some(s) => Some(g.scale(s, lambda)?),
        None => None,
    };
    Ok(match (weighted, ml) {
        (Some(s), Some(m)) => Some(g.add(s, m)?),
        (Some(s), None) => Some(s),
        (None, Some(m)) => Some(m),
        (None, None) => None,
    })
}

/// Ratio `r` of converged single-objective losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BalanceFactor {
    pub r: f64,
}

impl BalanceFactor {
    pub fn new(r: f64) -> Result<Self> {
        if !(r > 0.0 && r.is_finite()) {
            return Err(input_err!("balance factor must be positive, got {r}"));
        }
        Ok(Self { r })
    }

    /// `lambda = alpha / r`.
    pub fn lambda(&self, alpha: f64) -> Result<f64> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(input_err!("alpha must be positive, got {alpha}"));
        }
        Ok(alpha / self.r)
    }

    pub fn candidates(&self, alphas: &[f64]) -> Result<Vec<f64>> {
        alphas.iter().map(|&a| self.lambda(a)).collect()
    }
}

/// `r = converged_ml / converged_ssl`.
pub fn estimate_balance_factor(converged_ml: f64, converged_ssl: f64) -> Result<BalanceFactor> {
    if !(converged_ml > 0.0 && converged_ssl > 0.0) {
        return Err(input_err!(
            "converged losses must be positive, got ml={converged_ml}, ssl={converged_ssl}"
        ));
    }
    BalanceFactor::new(converged_ml / converged_ssl)
}
