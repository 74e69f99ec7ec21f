//! Track records, dataset ingestion (WAV + tag/split tables), label masking,
//! batching and the synthetic desk-scale corpus.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::audio::{read_wav, write_wav, AudioBuffer, DEFAULT_SAMPLE_RATE};
use crate::error::{input_err, Error, Result};
use crate::losses::LabeledMask;

pub const TAG_FILE: &str = "tags.tsv";
pub const SPLIT_FILE: &str = "splits.tsv";
pub const AUDIO_DIR: &str = "audio";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "valid" | "validation" | "val" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split {other:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackRecord {
    pub id: String,
    pub audio: AudioBuffer,
    pub path: Option<PathBuf>,
    /// Binary vector over the dataset's selected tags.
    pub tags: Option<Vec<bool>>,
    pub split: Split,
    pub labeled: bool,
}

impl TrackRecord {
    /// Tags as `0.0 / 1.0` values (all zeros when absent).
    pub fn tag_vector(&self, tag_count: usize) -> Vec<f64> {
        match &self.tags {
            Some(t) => t.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            None => vec![0.0; tag_count],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub tag_names: Vec<String>,
    pub records: Vec<TrackRecord>,
}

impl Dataset {
    pub fn tag_count(&self) -> usize {
        self.tag_names.len()
    }

    /// Record indices in `split`, in dataset order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter_map(|(i, r)| (r.split == split).then_some(i))
            .collect()
    }

    pub fn labeled_flags(&self) -> Vec<bool> {
        self.records.iter().map(|r| r.labeled).collect()
    }

    /// Writes `audio/<id>.wav`, `tags.tsv` and `splits.tsv` under `dir`.
    pub fn write_corpus(&self, dir: &Path) -> Result<()> {
        let audio_dir = dir.join(AUDIO_DIR);
        std::fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
        let mut tags = String::new();
        let mut splits = String::new();
        for r in &self.records {
            write_wav(&audio_dir.join(format!("{}.wav", r.id)), &r.audio)?;
            let names: Vec<&str> = r
                .tags
                .iter()
                .flatten()
                .zip(&self.tag_names)
                .filter_map(|(&on, name)| on.then_some(name.as_str()))
                .collect();
            tags.push_str(&format!("{}\t{}\n", r.id, names.join(",")));
            splits.push_str(&format!("{}\t{}\n", r.id, r.split));
        }
        let tag_path = dir.join(TAG_FILE);
        std::fs::write(&tag_path, tags).map_err(|e| Error::io(&tag_path, e))?;
        let split_path = dir.join(SPLIT_FILE);
        std::fs::write(&split_path, splits).map_err(|e| Error::io(&split_path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LoadReport {
    pub missing_audio: usize,
    pub unlabeled: usize,
}

fn read_table(path: &Path) -> Result<Vec<(usize, String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, rest) = line.split_once('\t').unwrap_or((line, ""));
        let id = id.trim();
        if id.is_empty() {
            return Err(Error::Data(format!(
                "{}:{}: empty track id",
                path.display(),
                lineno + 1
            )));
        }
        rows.push((lineno + 1, id.to_string(), rest.to_string()));
    }
    Ok(rows)
}

/// Parses `track_id<TAB>tag1,tag2,...` lines.
pub fn read_tag_file(path: &Path) -> Result<HashMap<String, Vec<String>>> {
    let mut out = HashMap::new();
    for (_, id, rest) in read_table(path)? {
        let tags = rest
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(String::from)
            .collect();
        out.insert(id, tags);
    }
    Ok(out)
}

/// Parses `track_id<TAB>split` lines, rejecting a track assigned twice.
pub fn read_split_file(path: &Path) -> Result<Vec<(String, Split)>> {
    let mut seen: HashMap<String, Split> = HashMap::new();
    let mut out = Vec::new();
    for (lineno, id, rest) in read_table(path)? {
        let split: Split = rest
            .parse()
            .map_err(|e| Error::Data(format!("{}:{lineno}: {e}", path.display())))?;
        match seen.get(&id) {
            Some(&prev) if prev != split => {
                return Err(Error::Data(format!("track {id} assigned to both {prev} and {split}")));
            }
            Some(_) => continue,
            None => {
                seen.insert(id.clone(), split);
                out.push((id, split));
            }
        }
    }
    Ok(out)
}

/// The `tag_count` most frequent tags, ties broken by ascending name.
pub fn top_tags<'a>(tag_lists: impl IntoIterator<Item = &'a [String]>, tag_count: usize) -> Vec<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for list in tag_lists {
        let unique: HashSet<&str> = list.iter().map(String::as_str).collect();
        for t in unique {
            *counts.entry(t).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    ranked.into_iter().take(tag_count).map(|(t, _)| t.to_string()).collect()
}

/// Loads every track listed in `split_file` from `audio_dir/<id>.wav`.
///
/// The `tag_count` most frequent tags over the training split are kept;
/// tracks with none of them stay in the dataset as unlabeled. Tracks whose
/// audio is missing are skipped and counted.
pub fn load_dataset(
    audio_dir: &Path,
    tag_file: &Path,
    split_file: &Path,
    tag_count: usize,
) -> Result<(Dataset, LoadReport)> {
    if tag_count == 0 {
        return Err(input_err!("tag count must be positive"));
    }
    let tag_map = read_tag_file(tag_file)?;
    let splits = read_split_file(split_file)?;
    let mut report = LoadReport::default();
    let mut loaded = Vec::new();
    for (id, split) in splits {
        let path = audio_dir.join(format!("{id}.wav"));
        if !path.exists() {
            log::warn!("missing audio for track {id}: {}", path.display());
            report.missing_audio += 1;
            continue;
        }
        let audio = read_wav(&path)?;
        loaded.push((id, split, audio, path));
    }
    let empty: Vec<String> = Vec::new();
    let train_lists = loaded
        .iter()
        .filter(|(_, s, _, _)| *s == Split::Train)
        .map(|(id, _, _, _)| tag_map.get(id).unwrap_or(&empty).as_slice());
    let tag_names = top_tags(train_lists, tag_count);
    if tag_names.len() < tag_count {
        return Err(Error::Data(format!(
            "training split has only {} distinct tags, {tag_count} requested",
            tag_names.len()
        )));
    }
    let index: HashMap<&str, usize> = tag_names.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let mut records = Vec::with_capacity(loaded.len());
    for (id, split, audio, path) in loaded {
        let mut vector = vec![false; tag_count];
        for t in tag_map.get(&id).unwrap_or(&empty) {
            if let Some(&i) = index.get(t.as_str()) {
                vector[i] = true;
            }
        }
        let labeled = vector.iter().any(|&b| b);
        if !labeled {
            report.unlabeled += 1;
        }
        records.push(TrackRecord {
            id,
            audio,
            path: Some(path),
            tags: labeled.then_some(vector),
            split,
            labeled,
        });
    }
    Ok((Dataset { tag_names, records }, report))
}

/// [`load_dataset`] on the layout written by [`Dataset::write_corpus`].
pub fn load_corpus_dir(dir: &Path, tag_count: usize) -> Result<(Dataset, LoadReport)> {
    load_dataset(
        &dir.join(AUDIO_DIR),
        &dir.join(TAG_FILE),
        &dir.join(SPLIT_FILE),
        tag_count,
    )
}

/// Chooses a fixed random subset of `round(rate * n)` items that keep their
/// labels. Deterministic per seed.
pub fn mask_labels(n: usize, label_rate: f64, seed: u64) -> Result<Vec<bool>> {
    if !(label_rate > 0.0 && label_rate <= 1.0) {
        return Err(input_err!("label rate must lie in (0, 1], got {label_rate}"));
    }
    let keep = ((label_rate * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut flags = vec![false; n];
    for &i in &order[..keep] {
        flags[i] = true;
    }
    Ok(flags)
}

/// One mini-batch: record indices plus the positions that carry labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tracks: Vec<usize>,
    pub mask: LabeledMask,
}

/// One shuffled pass over `indices` in batches of `batch_size`; the final
/// short batch is dropped.
pub fn make_batches(indices: &[usize], labeled: &[bool], batch_size: usize, rng: &mut impl Rng) -> Result<Vec<Batch>> {
    if batch_size < 2 {
        return Err(input_err!("batch size must be at least 2, got {batch_size}"));
    }
    if indices.len() < batch_size {
        return Err(Error::Data(format!(
            "{} tracks cannot fill one batch of {batch_size}",
            indices.len()
        )));
    }
    let mut order = indices.to_vec();
    order.shuffle(rng);
    Ok(order
        .chunks_exact(batch_size)
        .map(|chunk| Batch {
            tracks: chunk.to_vec(),
            mask: LabeledMask::from_flags(&chunk.iter().map(|&i| labeled[i]).collect::<Vec<_>>()),
        })
        .collect())
}

/// Parameters of the synthetic corpus. Tag `t` owns the frequency band
/// `[edge_t, edge_{t+1}]` of a geometric partition of
/// `[band_low_hz, band_high_hz]`; an active tag contributes sinusoids inside
/// its band.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub tracks: usize,
    pub track_len: usize,
    pub tag_count: usize,
    pub sample_rate_hz: u32,
    pub noise_level: f64,
    pub tag_probability: f64,
    pub tones_per_tag: usize,
    pub band_low_hz: f64,
    pub band_high_hz: f64,
    pub test_fraction: f64,
    pub valid_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            tracks: 512,
            track_len: 3 * 2187,
            tag_count: 8,
            sample_rate_hz: DEFAULT_SAMPLE_RATE,
            noise_level: 0.05,
            tag_probability: 0.25,
            tones_per_tag: 2,
            band_low_hz: 110.0,
            band_high_hz: 7040.0,
            test_fraction: 0.2,
            valid_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tracks == 0 || self.track_len == 0 || self.tones_per_tag == 0 {
            return Err(input_err!("track count, length and tones per tag must be positive"));
        }
        if self.tag_count < 2 {
            return Err(input_err!("synthetic corpus needs at least 2 tags"));
        }
        if !(self.band_low_hz > 0.0 && self.band_low_hz < self.band_high_hz)
            || self.band_high_hz >= self.sample_rate_hz as f64 / 2.0
        {
            return Err(input_err!("band edges must satisfy 0 < low < high < Nyquist"));
        }
        if !(0.0..=1.0).contains(&self.tag_probability) || !(self.noise_level >= 0.0) {
            return Err(input_err!("tag probability must be in [0, 1] and noise non-negative"));
        }
        if !(0.0..1.0).contains(&self.test_fraction) || !(0.0..1.0).contains(&self.valid_fraction) {
            return Err(input_err!("split fractions must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Band `t` as `(low_hz, high_hz)`.
    pub fn band(&self, t: usize) -> (f64, f64) {
        let ratio = self.band_high_hz / self.band_low_hz;
        let edge = |i: usize| self.band_low_hz * ratio.powf(i as f64 / self.tag_count as f64);
        (edge(t), edge(t + 1))
    }

    pub fn tag_name(t: usize) -> String {
        format!("band{t}")
    }
}

/// Generates the synthetic corpus; bit-identical for equal specs.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sr = spec.sample_rate_hz as f64;
    let noise = Normal::new(0.0, spec.noise_level).map_err(|e| input_err!("noise level: {e}"))?;
    let mut records = Vec::with_capacity(spec.tracks);
    for k in 0..spec.tracks {
        let mut active: Vec<bool> = (0..spec.tag_count)
            .map(|_| rng.gen_bool(spec.tag_probability))
            .collect();
        if !active.iter().any(|&a| a) {
            active[rng.gen_range(0..spec.tag_count)] = true;
        }
        let mut x = vec![0.0f64; spec.track_len];
        for (t, _) in active.iter().enumerate().filter(|(_, &a)| a) {
            let (lo, hi) = spec.band(t);
            // stay inside the central part of the band (log scale)
            let (llo, lhi) = (lo.ln(), hi.ln());
            let margin = 0.15 * (lhi - llo);
            for _ in 0..spec.tones_per_tag {
                let freq = rng.gen_range(llo + margin..lhi - margin).exp();
                let phase = rng.gen_range(0.0..2.0 * PI);
                let amp = rng.gen_range(0.5..1.0);
                let w = 2.0 * PI * freq / sr;
                for (i, v) in x.iter_mut().enumerate() {
                    *v += amp * (w * i as f64 + phase).sin();
                }
            }
        }
        let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = if peak > 0.0 { 0.7 / peak } else { 0.0 };
        let samples: Vec<f32> = x
            .iter()
            .map(|v| {
                let n = if spec.noise_level > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                (v * scale + n) as f32
            })
            .collect();
        records.push(TrackRecord {
            id: format!("track{k:05}"),
            audio: AudioBuffer::clipped(samples, spec.sample_rate_hz)?,
            path: None,
            tags: Some(active),
            split: Split::Train,
            labeled: true,
        });
    }
    let mut order: Vec<usize> = (0..spec.tracks).collect();
    order.shuffle(&mut rng);
    let n_test = (spec.test_fraction * spec.tracks as f64).round() as usize;
    let n_valid = (spec.valid_fraction * (spec.tracks - n_test) as f64).round() as usize;
    for (pos, &i) in order.iter().enumerate() {
        records[i].split = if pos < n_test {
            Split::Test
        } else if pos < n_test + n_valid {
            Split::Valid
        } else {
            Split::Train
        };
    }
    Ok(Dataset {
        tag_names: (0..spec.tag_count).map(SyntheticSpec::tag_name).collect(),
        records,
    })
}
