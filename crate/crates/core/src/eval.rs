//! Retrieval (R@K) and tag-wise ranking metrics (ROC-AUC, PR-AUC).

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::data::{Dataset, Split, TrackRecord};
use crate::encoder::ModelParams;
use crate::error::{input_err, Error, Result};
use crate::inference::{embed_tracks, retrieve, TrackEmbedding};

pub const RECALL_KS: [usize; 4] = [1, 2, 4, 8];

/// Two tracks are relevant to each other when they share at least one tag.
pub fn shares_tag(a: &[bool], b: &[bool]) -> bool {
    a.iter().zip(b).any(|(&x, &y)| x && y)
}

/// Percentage of queries with a relevant track among their top `K`
/// neighbours, for every `K` in `ks`. Queries without any relevant track in
/// the database are left out of the denominator.
pub fn recall_at_k(embeddings: &[TrackEmbedding], tags: &[Vec<bool>], ks: &[usize]) -> Result<Vec<f64>> {
    if embeddings.len() != tags.len() {
        return Err(Error::InvalidShape(format!(
            "{} embeddings but {} tag vectors",
            embeddings.len(),
            tags.len()
        )));
    }
    if embeddings.len() < 2 {
        return Err(input_err!("recall needs at least two tracks"));
    }
    let index: std::collections::HashMap<&str, usize> = embeddings
        .iter()
        .enumerate()
        .map(|(i, e)| (e.track_id.as_str(), i))
        .collect();
    if index.len() != embeddings.len() {
        return Err(input_err!("track ids must be unique"));
    }
    let k_max = ks.iter().copied().max().unwrap_or(0);
    let mut hits = vec![0usize; ks.len()];
    let mut evaluated = 0usize;
    for (q, query) in embeddings.iter().enumerate() {
        let achievable = (0..tags.len()).any(|j| j != q && shares_tag(&tags[q], &tags[j]));
        if !achievable {
            continue;
        }
        evaluated += 1;
        let ranked = retrieve(query, embeddings, k_max)?;
        let first = ranked
            .hits
            .iter()
            .position(|(id, _)| shares_tag(&tags[q], &tags[index[id.as_str()]]));
        for (h, &k) in hits.iter_mut().zip(ks) {
            if first.is_some_and(|p| p < k) {
                *h += 1;
            }
        }
    }
    if evaluated == 0 {
        return Err(Error::Degenerate("no query has a relevant track".into()));
    }
    Ok(hits.iter().map(|&h| 100.0 * h as f64 / evaluated as f64).collect())
}

/// Per-tag values plus their mean over tags that had both classes.
#[derive(Debug, Clone, PartialEq)]
pub struct TagMetric {
    pub mean: f64,
    /// `None` for skipped tags.
    pub per_tag: Vec<Option<f64>>,
}

impl TagMetric {
    pub fn skipped(&self) -> Vec<usize> {
        self.per_tag
            .iter()
            .enumerate()
            .filter_map(|(t, v)| v.is_none().then_some(t))
            .collect()
    }
}

fn columns(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<usize> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::InvalidShape(format!(
            "{} score rows vs {} label rows",
            scores.len(),
            labels.len()
        )));
    }
    let t = scores[0].len();
    if scores.iter().any(|r| r.len() != t) || labels.iter().any(|r| r.len() != t) {
        return Err(Error::InvalidShape("ragged score or label rows".into()));
    }
    if scores.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite score".into()));
    }
    Ok(t)
}

fn per_tag(scores: &[Vec<f64>], labels: &[Vec<bool>], metric: impl Fn(&[f64], &[bool]) -> f64) -> Result<TagMetric> {
    let t = columns(scores, labels)?;
    let mut values = Vec::with_capacity(t);
    for tag in 0..t {
        let s: Vec<f64> = scores.iter().map(|r| r[tag]).collect();
        let y: Vec<bool> = labels.iter().map(|r| r[tag]).collect();
        let pos = y.iter().filter(|&&b| b).count();
        values.push((pos > 0 && pos < y.len()).then(|| metric(&s, &y)));
    }
    let valid: Vec<f64> = values.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::Degenerate("no tag has both positive and negative tracks".into()));
    }
    Ok(TagMetric {
        mean: valid.iter().sum::<f64>() / valid.len() as f64,
        per_tag: values,
    })
}

/// Normalized Mann-Whitney U from mid-ranks (ties count one half).
fn auc_one(scores: &[f64], labels: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    // Twice the mid-rank keeps the arithmetic in integers.
    let mut twice_rank_sum_pos: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_mid = (i + 1 + j + 1) as u64;
        for &k in &order[i..=j] {
            if labels[k] {
                twice_rank_sum_pos += twice_mid;
            }
        }
        i = j + 1;
    }
    let n_pos = labels.iter().filter(|&&b| b).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    let twice_u = twice_rank_sum_pos - n_pos * (n_pos + 1);
    twice_u as f64 / (2 * n_pos * n_neg) as f64
}

/// Average precision: descending score, ties in index order.
fn ap_one(scores: &[f64], labels: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    let (mut tp, mut sum) = (0usize, 0.0);
    for (rank, &k) in order.iter().enumerate() {
        if labels[k] {
            tp += 1;
            sum += tp as f64 / (rank + 1) as f64;
        }
    }
    sum / tp as f64
}

/// Tag-wise ROC-AUC; `scores[track][tag]`.
pub fn roc_auc(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<TagMetric> {
    per_tag(scores, labels, auc_one)
}

/// Tag-wise PR-AUC as average precision.
pub fn pr_auc(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<TagMetric> {
    per_tag(scores, labels, ap_one)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    /// `(K, percentage)` for `K` in [`RECALL_KS`].
    pub recall: Vec<(usize, f64)>,
    pub roc_auc: f64,
    pub pr_auc: f64,
    pub tag_names: Vec<String>,
    pub per_tag_roc: Vec<Option<f64>>,
    pub per_tag_pr: Vec<Option<f64>>,
}

impl MetricReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|(kk, _)| *kk == k).map(|&(_, v)| v)
    }

    /// `key=value` lines: `R@1`, `R@2`, `R@4`, `R@8`, `ROC-AUC`, `PR-AUC`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.recall {
            let _ = writeln!(out, "R@{k}={v:.4}");
        }
        let _ = writeln!(out, "ROC-AUC={:.6}", self.roc_auc);
        let _ = writeln!(out, "PR-AUC={:.6}", self.pr_auc);
        out
    }

    /// `tag<TAB>roc<TAB>pr` lines; skipped tags print `skipped`.
    pub fn per_tag_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "skipped".to_string(), |x| format!("{x:.6}"));
        let mut out = String::new();
        for ((name, roc), pr) in self.tag_names.iter().zip(&self.per_tag_roc).zip(&self.per_tag_pr) {
            let _ = writeln!(out, "{name}\t{}\t{}", fmt(*roc), fmt(*pr));
        }
        out
    }
}

/// Full report: R@K on embeddings, AUCs on (pre-softmax) tag scores.
pub fn evaluate(
    embeddings: &[TrackEmbedding],
    tag_scores: &[Vec<f64>],
    truth: &[Vec<bool>],
    tag_names: &[String],
) -> Result<MetricReport> {
    let recall = recall_at_k(embeddings, truth, &RECALL_KS)?;
    let roc = roc_auc(tag_scores, truth)?;
    let pr = pr_auc(tag_scores, truth)?;
    Ok(MetricReport {
        recall: RECALL_KS.iter().copied().zip(recall).collect(),
        roc_auc: roc.mean,
        pr_auc: pr.mean,
        tag_names: tag_names.to_vec(),
        per_tag_roc: roc.per_tag,
        per_tag_pr: pr.per_tag,
    })
}

/// Embeds every track of `split` and scores it against the tracks' true
/// tags (unlabeled tracks count as having no tag).
pub fn evaluate_split(params: &ModelParams, data: &Dataset, split: Split) -> Result<MetricReport> {
    let tracks: Vec<&TrackRecord> = data.split_indices(split).iter().map(|&i| &data.records[i]).collect();
    let (embeddings, scores) = embed_tracks(params, &tracks, 64)?;
    let t = data.tag_count();
    let truth: Vec<Vec<bool>> = tracks
        .iter()
        .map(|r| r.tags.clone().unwrap_or_else(|| vec![false; t]))
        .collect();
    let probs: Vec<Vec<f64>> = scores.into_iter().map(|s| s.mean_probs).collect();
    evaluate(&embeddings, &probs, &truth, &data.tag_names)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(id: &str, v: &[f32]) -> TrackEmbedding {
        TrackEmbedding {
            track_id: id.into(),
            vector: v.to_vec(),
        }
    }

    #[test]
    fn recall_trivial_cases() {
        let e = vec![emb("a", &[1.0, 0.0]), emb("b", &[0.0, 1.0])];
        let tags = vec![vec![true, false], vec![true, false]];
        assert_eq!(recall_at_k(&e, &tags, &[1]).unwrap(), vec![100.0]);
        // c's tag is unique: excluded rather than counted as a miss
        let e = vec![emb("a", &[1.0, 0.0]), emb("b", &[0.0, 1.0]), emb("c", &[1.0, 0.0])];
        let tags = vec![vec![true, false], vec![true, false], vec![false, true]];
        assert_eq!(recall_at_k(&e, &tags, &[1, 2]).unwrap(), vec![50.0, 100.0]);
    }

    #[test]
    fn auc_hand_cases() {
        let y = vec![vec![true], vec![false], vec![true], vec![false]];
        let perfect = vec![vec![0.9], vec![0.1], vec![0.8], vec![0.2]];
        assert_eq!(roc_auc(&perfect, &y).unwrap().mean, 1.0);
        assert_eq!(pr_auc(&perfect, &y).unwrap().mean, 1.0);
        let flat = vec![vec![0.5]; 4];
        assert_eq!(roc_auc(&flat, &y).unwrap().mean, 0.5);
        let last = vec![vec![0.0], vec![0.5], vec![0.6], vec![0.7], vec![0.8]];
        let y_last = vec![vec![true], vec![false], vec![false], vec![false], vec![false]];
        assert_eq!(pr_auc(&last, &y_last).unwrap().mean, 0.2);
    }

    #[test]
    fn skips_single_class_tags() {
        let s = vec![vec![0.1, 0.3], vec![0.2, 0.4]];
        let y = vec![vec![true, false], vec![false, false]];
        let m = roc_auc(&s, &y).unwrap();
        assert_eq!(m.skipped(), vec![1]);
        assert_eq!(m.mean, 0.0);
        assert!(roc_auc(&s, &[vec![false, false], vec![false, false]]).is_err());
    }

    #[test]
    fn report_has_exact_keys() {
        let r = MetricReport {
            recall: RECALL_KS.iter().map(|&k| (k, 50.0)).collect(),
            roc_auc: 0.9,
            pr_auc: 0.4,
            tag_names: vec!["x".into()],
            per_tag_roc: vec![Some(0.9)],
            per_tag_pr: vec![None],
        };
        let keys: Vec<String> = r
            .to_text()
            .lines()
            .map(|l| l.split('=').next().unwrap().to_string())
            .collect();
        assert_eq!(keys, ["R@1", "R@2", "R@4", "R@8", "ROC-AUC", "PR-AUC"]);
        assert_eq!(r.per_tag_text(), "x\t0.900000\tskipped\n");
    }
}
