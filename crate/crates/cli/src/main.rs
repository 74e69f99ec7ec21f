//! `ssml`: synthesize data, pre-train, fine-tune, embed, retrieve, evaluate
//! and run the learning-technique grid.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numeric error.

mod config;
mod grid;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};

use ssml_core::checkpoint::Checkpoint;
use ssml_core::data::{generate_synthetic, load_corpus_dir, read_tag_file, Dataset, Split, SyntheticSpec, TrackRecord};
use ssml_core::encoder::{EncoderConfig, ModelParams};
use ssml_core::eval::{evaluate, evaluate_split, MetricReport};
use ssml_core::inference::{embed_tracks, format_retrieval, read_store, retrieve, write_store};
use ssml_core::training::{encoder_config_of, finetune, load_model, pretrain, EpochLog, RunConfig};

use config::{balance_preset, Settings};

#[derive(Parser)]
#[command(
    name = "ssml",
    version,
    about = "Metric learning with a contrastive auxiliary loss for music retrieval and tagging"
)]
struct Cli {
    /// Seed for every random choice of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// `key = value` file with RunConfig / EncoderConfig fields; flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic corpus (WAV files, tags.tsv, splits.tsv).
    SynthData(SynthArgs),
    /// Contrastive pre-training.
    Pretrain(PretrainArgs),
    /// Fine-tuning on the combined objective.
    Finetune(FinetuneArgs),
    /// Track embeddings and tag scores for one split.
    Embed(EmbedArgs),
    /// Top-K neighbours from an embedding store.
    Retrieve(RetrieveArgs),
    /// R@K, ROC-AUC and PR-AUC of an embedding store.
    Evaluate(EvaluateArgs),
    /// Fine-tune and evaluate every row of a learning-technique grid.
    Grid(GridArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 512)]
    tracks: usize,
    #[arg(long, default_value_t = 8)]
    tags: usize,
    /// Samples per track.
    #[arg(long, default_value_t = 3 * 2187)]
    length: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Write into an existing, non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct PretrainArgs {
    /// Corpus directory (audio/, tags.tsv, splits.tsv).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Default)]
struct TechniqueArgs {
    #[arg(long)]
    alpha: Option<f64>,
    /// Augment the fine-tuning views.
    #[arg(long, overrides_with = "no_augment")]
    augment: bool,
    #[arg(long)]
    no_augment: bool,
    /// Keep the contrastive term while fine-tuning.
    #[arg(long, overrides_with = "no_contrastive")]
    contrastive: bool,
    #[arg(long)]
    no_contrastive: bool,
    /// Start from the parameters in --init-checkpoint.
    #[arg(long)]
    load_pretrain: bool,
    #[arg(long)]
    init_checkpoint: Option<PathBuf>,
    /// Fraction of training tracks that keep their tags.
    #[arg(long)]
    label_rate: Option<f64>,
    /// Base balancing factor r: a number, or the preset `mtat` (22.00) / `mtg` (18.95).
    #[arg(long)]
    balance_r: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    technique: TechniqueArgs,
    /// Print the resolved lambda = alpha / r and exit without training.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// train, valid, test or all.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    store: PathBuf,
    /// Query track id; every track in the store when omitted.
    #[arg(long)]
    query: Option<String>,
    #[arg(long, default_value_t = 8)]
    k: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    store: PathBuf,
    /// Mean tag probabilities written by `embed` (defaults to tag_probs.tsv next to the store).
    #[arg(long)]
    probs: Option<PathBuf>,
    /// Checkpoint the store was made with; checked for a dimension match.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    data: PathBuf,
    /// mtat (rows A–I) or mtg (rows J–O).
    #[arg(long, default_value = "mtat")]
    preset: String,
    /// Pre-trained checkpoint for rows that load it.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    #[arg(long)]
    label_rate: Option<f64>,
    #[arg(long)]
    balance_r: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    use ssml_core::Error as E;
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<E>() {
            return match err {
                E::InvalidInput(_) => 1,
                E::Numeric(_) | E::Degenerate(_) => 3,
                E::InvalidShape(_) | E::Data(_) | E::Checkpoint(_) | E::Io { .. } | E::Wav { .. } => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn run(cli: Cli) -> Result<()> {
    let mut settings = Settings::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        settings.run.seed = seed;
    }
    let out = cli.out_dir;
    match cli.command {
        Command::SynthData(a) => synth_data(&settings, &out, a),
        Command::Pretrain(a) => cmd_pretrain(settings, &out, a),
        Command::Finetune(a) => cmd_finetune(settings, &out, a),
        Command::Embed(a) => cmd_embed(&out, a),
        Command::Retrieve(a) => cmd_retrieve(&out, a),
        Command::Evaluate(a) => cmd_evaluate(&out, a),
        Command::Grid(a) => cmd_grid(settings, &out, a),
    }
}

fn create_out_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn synth_data(settings: &Settings, out: &Path, a: SynthArgs) -> Result<()> {
    let non_empty = out.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty && !a.force {
        bail!(
            "{} already exists and is not empty; pass --force to overwrite",
            out.display()
        );
    }
    let spec = SyntheticSpec {
        tracks: a.tracks,
        track_len: a.length,
        tag_count: a.tags,
        noise_level: a.noise,
        seed: settings.run.seed,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec)?;
    create_out_dir(out)?;
    data.write_corpus(out)?;
    println!(
        "wrote {} tracks with {} tags to {}",
        data.records.len(),
        data.tag_count(),
        out.display()
    );
    Ok(())
}

fn load_data(dir: &Path, tag_count: usize) -> Result<Dataset> {
    let (data, report) =
        load_corpus_dir(dir, tag_count).with_context(|| format!("loading corpus {}", dir.display()))?;
    if report.missing_audio > 0 {
        eprintln!("warning: {} tracks skipped for missing audio", report.missing_audio);
    }
    if report.unlabeled > 0 {
        log::info!("{} tracks carry none of the selected tags", report.unlabeled);
    }
    Ok(data)
}

struct EpochWriter(BufWriter<File>);

impl EpochWriter {
    fn create(path: &Path) -> Result<Self> {
        Ok(Self(BufWriter::new(
            File::create(path).with_context(|| format!("creating {}", path.display()))?,
        )))
    }

    fn write(&mut self, log: &EpochLog) {
        if let Err(e) = writeln!(self.0, "{log}").and_then(|_| self.0.flush()) {
            log::warn!("cannot write training log: {e}");
        }
    }
}

fn cmd_pretrain(mut settings: Settings, out: &Path, a: PretrainArgs) -> Result<()> {
    if let Some(e) = a.epochs {
        settings.run.max_epochs = e;
    }
    let data = load_data(&a.data, settings.encoder.tag_count)?;
    create_out_dir(out)?;
    let mut log = EpochWriter::create(&out.join("pretrain.log"))?;
    let mut last = None;
    let state = pretrain(&data, settings.encoder, &settings.run, |l| {
        log.write(l);
        last = Some(l.train_loss);
    })?;
    let path = out.join("pretrain.ckpt");
    state.to_checkpoint().save(&path)?;
    println!(
        "final_ssl_loss={:.6} checkpoint={}",
        last.unwrap_or(f64::NAN),
        path.display()
    );
    Ok(())
}

fn apply_technique(run: &mut RunConfig, t: &TechniqueArgs) -> Result<()> {
    if let Some(a) = t.alpha {
        run.alpha = a;
    }
    if t.augment {
        run.fine_tune_augment = true;
    }
    if t.no_augment {
        run.fine_tune_augment = false;
    }
    if t.contrastive {
        run.fine_tune_contrastive = true;
    }
    if t.no_contrastive {
        run.fine_tune_contrastive = false;
    }
    if t.load_pretrain {
        run.load_pretrain = true;
    }
    if let Some(r) = t.label_rate {
        run.label_rate = r;
    }
    if let Some(r) = &t.balance_r {
        run.balance_r = parse_balance(r)?;
    }
    if let Some(e) = t.epochs {
        run.max_epochs = e;
    }
    Ok(())
}

fn parse_balance(s: &str) -> Result<f64> {
    s.parse().or_else(|_| balance_preset(s))
}

/// Parameters of a checkpoint, which must match the configured encoder.
fn load_params(path: &Path, expected: &EncoderConfig) -> Result<ModelParams> {
    let ck = Checkpoint::load(path)?;
    let found = encoder_config_of(&ck)?;
    if found != *expected {
        return Err(ssml_core::Error::InvalidShape(format!(
            "checkpoint {} holds encoder {found:?}, configuration expects {expected:?}",
            path.display()
        ))
        .into());
    }
    Ok(load_model(&ck)?)
}

fn cmd_finetune(mut settings: Settings, out: &Path, a: FinetuneArgs) -> Result<()> {
    apply_technique(&mut settings.run, &a.technique)?;
    let run = &settings.run;
    run.validate()?;
    println!(
        "lambda={} alpha={} r={} contrastive={} augment={} load_pretrain={} label_rate={}",
        run.lambda()?,
        run.alpha,
        run.balance_r,
        run.fine_tune_contrastive,
        run.fine_tune_augment,
        run.load_pretrain,
        run.label_rate
    );
    if a.dry_run {
        return Ok(());
    }
    let init = match (run.load_pretrain, &a.technique.init_checkpoint) {
        (true, None) => bail!("--load-pretrain needs --init-checkpoint"),
        (true, Some(p)) => Some(load_params(p, &settings.encoder)?),
        (false, Some(_)) => bail!("--init-checkpoint is only used together with --load-pretrain"),
        (false, None) => None,
    };
    let data = load_data(&a.data, settings.encoder.tag_count)?;
    create_out_dir(out)?;
    let mut log = EpochWriter::create(&out.join("finetune.log"))?;
    let state = finetune(&data, settings.encoder, run, init.as_ref(), |l| log.write(l))?;
    let path = out.join("finetune.ckpt");
    state.to_checkpoint().save(&path)?;
    println!(
        "epochs={} best_val_loss={:.6} checkpoint={}",
        state.epoch,
        state.early.best,
        path.display()
    );
    Ok(())
}

fn select_split<'a>(data: &'a Dataset, name: &str) -> Result<Vec<&'a TrackRecord>> {
    Ok(if name == "all" {
        data.records.iter().collect()
    } else {
        let split: Split = name.parse()?;
        data.split_indices(split).iter().map(|&i| &data.records[i]).collect()
    })
}

fn cmd_embed(out: &Path, a: EmbedArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let params = load_model(&ck)?;
    let data = load_data(&a.data, params.config().tag_count)?;
    let tracks = select_split(&data, &a.split)?;
    ensure!(!tracks.is_empty(), "split {} has no tracks", a.split);
    let (embeddings, scores) = embed_tracks(&params, &tracks, 64)?;
    create_out_dir(out)?;
    write_store(&out.join("embeddings.bin"), &embeddings)?;
    let header = format!("track_id\t{}\n", data.tag_names.join("\t"));
    let mut softmax = header.clone();
    let mut probs = header;
    for s in &scores {
        let row = |v: &[f64]| v.iter().map(|x| format!("{x:.9}")).collect::<Vec<_>>().join("\t");
        softmax.push_str(&format!("{}\t{}\n", s.track_id, row(&s.scores)));
        probs.push_str(&format!("{}\t{}\n", s.track_id, row(&s.mean_probs)));
    }
    std::fs::write(out.join("tag_scores.tsv"), softmax)?;
    std::fs::write(out.join("tag_probs.tsv"), probs)?;
    println!(
        "embedded {} tracks into {}",
        embeddings.len(),
        out.join("embeddings.bin").display()
    );
    Ok(())
}

fn cmd_retrieve(out: &Path, a: RetrieveArgs) -> Result<()> {
    let store = read_store(&a.store)?;
    let queries: Vec<_> = match &a.query {
        Some(id) => vec![store
            .iter()
            .find(|e| &e.track_id == id)
            .with_context(|| format!("track {id} is not in the store"))
            .map_err(|e| ssml_core::Error::Data(format!("{e:#}")))?],
        None => store.iter().collect(),
    };
    let mut text = String::new();
    for q in queries {
        let r = retrieve(q, &store, a.k)?;
        if r.truncated {
            log::warn!("only {} candidates for {}", r.hits.len(), q.track_id);
        }
        text.push_str(&format_retrieval(&q.track_id, &r));
    }
    create_out_dir(out)?;
    std::fs::write(out.join("retrieval.tsv"), &text)?;
    print!("{text}");
    Ok(())
}

/// `track_id<TAB>v1<TAB>...` with a header naming the columns.
fn read_score_table(path: &Path) -> Result<(Vec<String>, HashMap<String, Vec<f64>>)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().context("empty score table")?;
    let names: Vec<String> = header.split('\t').skip(1).map(String::from).collect();
    let mut rows = HashMap::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let mut cols = line.split('\t');
        let id = cols.next().unwrap_or_default().to_string();
        let values = cols
            .map(|c| {
                c.parse::<f64>()
                    .map_err(|e| ssml_core::Error::Data(format!("{}: {e}", path.display())))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if values.len() != names.len() {
            return Err(
                ssml_core::Error::Data(format!("{}: row {id} has {} values", path.display(), values.len())).into(),
            );
        }
        rows.insert(id, values);
    }
    Ok((names, rows))
}

fn cmd_evaluate(out: &Path, a: EvaluateArgs) -> Result<()> {
    let store = read_store(&a.store)?;
    ensure!(!store.is_empty(), "embedding store is empty");
    if let Some(ck) = &a.checkpoint {
        let cfg = encoder_config_of(&Checkpoint::load(ck)?)?;
        let dim = store[0].vector.len();
        if dim != cfg.embed_dim {
            return Err(ssml_core::Error::InvalidShape(format!(
                "store embeddings have dimension {dim}, checkpoint produces {}",
                cfg.embed_dim
            ))
            .into());
        }
    }
    let probs_path = a
        .probs
        .clone()
        .unwrap_or_else(|| a.store.with_file_name("tag_probs.tsv"));
    let (tag_names, probs) = read_score_table(&probs_path)?;
    let tag_map = read_tag_file(&a.data.join(ssml_core::data::TAG_FILE))?;
    let index: HashMap<&str, usize> = tag_names.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let mut scores = Vec::with_capacity(store.len());
    let mut truth = Vec::with_capacity(store.len());
    for e in &store {
        let p = probs
            .get(&e.track_id)
            .ok_or_else(|| ssml_core::Error::Data(format!("no tag scores for {}", e.track_id)))?;
        scores.push(p.clone());
        let mut y = vec![false; tag_names.len()];
        for t in tag_map.get(&e.track_id).into_iter().flatten() {
            if let Some(&i) = index.get(t.as_str()) {
                y[i] = true;
            }
        }
        truth.push(y);
    }
    let report = evaluate(&store, &scores, &truth, &tag_names)?;
    write_report(out, &report)?;
    print!("{}", report.to_text());
    Ok(())
}

fn write_report(out: &Path, report: &MetricReport) -> Result<()> {
    create_out_dir(out)?;
    std::fs::write(out.join("report.txt"), report.to_text())?;
    std::fs::write(out.join("per_tag.tsv"), report.per_tag_text())?;
    Ok(())
}

fn cmd_grid(mut settings: Settings, out: &Path, a: GridArgs) -> Result<()> {
    let rows = grid::rows(&a.preset)?;
    settings.run.balance_r = match &a.balance_r {
        Some(r) => parse_balance(r)?,
        None => balance_preset(&a.preset)?,
    };
    if let Some(r) = a.label_rate {
        settings.run.label_rate = r;
    }
    if let Some(e) = a.epochs {
        settings.run.max_epochs = e;
    }
    let pretrained = match &a.pretrained {
        Some(p) => Some(load_params(p, &settings.encoder)?),
        None if rows.iter().any(|r| r.load_pretrain) => {
            bail!("preset {} needs --pretrained", a.preset)
        }
        None => None,
    };
    let data = load_data(&a.data, settings.encoder.tag_count)?;
    create_out_dir(out)?;
    let mut table = String::new();
    for row in rows {
        let run = RunConfig {
            fine_tune_augment: row.fine_tune_augment,
            fine_tune_contrastive: row.fine_tune_contrastive,
            load_pretrain: row.load_pretrain,
            alpha: row.alpha.unwrap_or(settings.run.alpha),
            ..settings.run.clone()
        };
        let init = if row.load_pretrain { pretrained.as_ref() } else { None };
        let state = finetune(&data, settings.encoder, &run, init, |_| {})?;
        let report = evaluate_split(&state.best_params, &data, Split::Test)?;
        let metrics: Vec<String> = report.to_text().lines().map(String::from).collect();
        let line = format!("{} {}", row.describe(), metrics.join(" "));
        println!("{line}");
        table.push_str(&line);
        table.push('\n');
    }
    std::fs::write(out.join(format!("grid_{}.txt", a.preset)), table)?;
    Ok(())
}
