//! Track-level embeddings and tag scores by excerpt aggregation, plus
//! inner-product retrieval and the embedding store format.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use crate::audio::AudioBuffer;
use crate::autodiff::softmax_in_place;
use crate::data::TrackRecord;
use crate::encoder::{infer, ModelParams};
use crate::error::{input_err, Error, Result};

/// Norm below which a mean embedding is rejected as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// `floor(len / excerpt_len)` consecutive windows from offset 0; a track
/// shorter than one excerpt is zero-padded to exactly one.
pub fn slice_track(track: &AudioBuffer, excerpt_len: usize) -> Vec<AudioBuffer> {
    let s = track.samples();
    let sr = track.sample_rate_hz();
    if s.len() < excerpt_len {
        let mut padded = s.to_vec();
        padded.resize(excerpt_len, 0.0);
        return vec![AudioBuffer::new(padded, sr).expect("padding keeps a valid buffer")];
    }
    s.chunks_exact(excerpt_len)
        .map(|w| AudioBuffer::new(w.to_vec(), sr).expect("window of a valid buffer"))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackEmbedding {
    pub track_id: String,
    /// Unit l2-norm.
    pub vector: Vec<f32>,
}

impl TrackEmbedding {
    pub fn dot(&self, other: &TrackEmbedding) -> f64 {
        self.vector
            .iter()
            .zip(&other.vector)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    }
}

/// Mean of excerpt embeddings, renormalized.
pub fn track_embedding(track_id: &str, excerpts: &[&[f64]]) -> Result<TrackEmbedding> {
    let Some(first) = excerpts.first() else {
        return Err(input_err!("track {track_id} has no excerpts"));
    };
    let dim = first.len();
    let mut mean = vec![0.0; dim];
    for z in excerpts {
        if z.len() != dim {
            return Err(Error::InvalidShape(format!(
                "excerpt embeddings of {track_id} differ in size"
            )));
        }
        mean.iter_mut().zip(z.iter()).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= excerpts.len() as f64);
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm >= DEGENERATE_NORM) {
        return Err(Error::Degenerate(format!(
            "mean embedding of {track_id} has norm {norm:e}"
        )));
    }
    Ok(TrackEmbedding {
        track_id: track_id.to_string(),
        vector: mean.iter().map(|v| (v / norm) as f32).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackTagScores {
    pub track_id: String,
    /// Softmax of the mean excerpt probabilities; sums to one.
    pub scores: Vec<f64>,
    /// Mean excerpt probabilities (used for tag-wise AUC).
    pub mean_probs: Vec<f64>,
}

pub fn track_tags(track_id: &str, excerpts: &[&[f64]]) -> Result<TrackTagScores> {
    let Some(first) = excerpts.first() else {
        return Err(input_err!("track {track_id} has no excerpts"));
    };
    let mut mean = vec![0.0; first.len()];
    for y in excerpts {
        if y.len() != mean.len() {
            return Err(Error::InvalidShape(format!(
                "excerpt tag vectors of {track_id} differ in size"
            )));
        }
        mean.iter_mut().zip(y.iter()).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= excerpts.len() as f64);
    let mut scores = mean.clone();
    softmax_in_place(&mut scores);
    Ok(TrackTagScores {
        track_id: track_id.to_string(),
        scores,
        mean_probs: mean,
    })
}

/// Embeddings and tag scores of whole tracks.
pub fn embed_tracks(
    params: &ModelParams,
    tracks: &[&TrackRecord],
    chunk: usize,
) -> Result<(Vec<TrackEmbedding>, Vec<TrackTagScores>)> {
    let excerpt_len = params.config().excerpt_len();
    let mut embeddings = Vec::with_capacity(tracks.len());
    let mut tags = Vec::with_capacity(tracks.len());
    for r in tracks {
        let excerpts = slice_track(&r.audio, excerpt_len);
        let (z, y) = infer(params, &excerpts, chunk)?;
        let zr: Vec<&[f64]> = z.rows().collect();
        let yr: Vec<&[f64]> = y.rows().collect();
        embeddings.push(track_embedding(&r.id, &zr)?);
        tags.push(track_tags(&r.id, &yr)?);
    }
    Ok((embeddings, tags))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieved {
    /// `(track_id, inner product)` in rank order.
    pub hits: Vec<(String, f64)>,
    /// Set when fewer than the requested `K` candidates existed.
    pub truncated: bool,
}

fn rank_order(a: &(f64, &str), b: &(f64, &str)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.1.cmp(b.1))
}

/// The `k` entries of `db` with the largest inner product with `query`,
/// ties by ascending track id. Entries with the query's id are skipped.
pub fn retrieve(query: &TrackEmbedding, db: &[TrackEmbedding], k: usize) -> Result<Retrieved> {
    let mut scored: Vec<(f64, &str)> = Vec::with_capacity(db.len());
    for e in db {
        if e.track_id == query.track_id {
            continue;
        }
        if e.vector.len() != query.vector.len() {
            return Err(Error::InvalidShape(format!(
                "embedding {} has dimension {}, query has {}",
                e.track_id,
                e.vector.len(),
                query.vector.len()
            )));
        }
        scored.push((query.dot(e), &e.track_id));
    }
    scored.sort_by(rank_order);
    let truncated = k > scored.len();
    scored.truncate(k);
    Ok(Retrieved {
        hits: scored.into_iter().map(|(s, id)| (id.to_string(), s)).collect(),
        truncated,
    })
}

/// `query<TAB>rank<TAB>result<TAB>score` lines, ranks from 1.
pub fn format_retrieval(query_id: &str, r: &Retrieved) -> String {
    let mut out = String::new();
    for (rank, (id, score)) in r.hits.iter().enumerate() {
        let _ = writeln!(out, "{query_id}\t{}\t{id}\t{score:.9}", rank + 1);
    }
    out
}

/// Serializes embeddings: `u32 count, u32 dim`, then per record a
/// `u32`-length-prefixed id followed by `dim` little-endian `f32`s.
pub fn store_to_bytes(embeddings: &[TrackEmbedding]) -> Result<Vec<u8>> {
    let dim = embeddings.first().map_or(0, |e| e.vector.len());
    let mut out = Vec::new();
    out.extend_from_slice(&(embeddings.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for e in embeddings {
        if e.vector.len() != dim {
            return Err(Error::InvalidShape(format!(
                "embedding {} is not {dim}-dimensional",
                e.track_id
            )));
        }
        out.extend_from_slice(&(e.track_id.len() as u32).to_le_bytes());
        out.extend_from_slice(e.track_id.as_bytes());
        for v in &e.vector {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn store_from_bytes(buf: &[u8]) -> Result<Vec<TrackEmbedding>> {
    let bad = || Error::Data("truncated or malformed embedding store".into());
    let mut rest = buf;
    let mut take = |n: usize| -> Result<&[u8]> {
        if rest.len() < n {
            return Err(bad());
        }
        let (head, tail) = rest.split_at(n);
        rest = tail;
        Ok(head)
    };
    let word = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
    let count = word(take(4)?);
    let dim = word(take(4)?);
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let n = word(take(4)?);
        let track_id = String::from_utf8(take(n)?.to_vec()).map_err(|_| bad())?;
        let vector = take(4 * dim)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push(TrackEmbedding { track_id, vector });
    }
    if !rest.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

pub fn write_store(path: &Path, embeddings: &[TrackEmbedding]) -> Result<()> {
    std::fs::write(path, store_to_bytes(embeddings)?).map_err(|e| Error::io(path, e))
}

pub fn read_store(path: &Path) -> Result<Vec<TrackEmbedding>> {
    store_from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
