//! Two-phase training: contrastive pre-training, then fine-tuning on the
//! combined objective with the three learning-technique switches.
//!
//! All randomness is derived from `(seed, phase, epoch, step)`, so a run
//! resumed from a checkpoint replays exactly the batches and views the
//! uninterrupted run would have drawn.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{apply_chain, rand_crop, sample_chain, AugmentSpec};
use crate::autodiff::{AdamConfig, AdamState, Graph, PlateauSchedule, Tensor};
use crate::checkpoint::Checkpoint;
use crate::data::{make_batches, mask_labels, Dataset, Split};
use crate::encoder::{embed, encode, excerpts_to_tensor, project, tag_probs, EncoderConfig, ModelParams};
use crate::error::{input_err, Error, Result};
use crate::losses::{
    ml_loss_graph, ssl_loss_graph, ssml_loss_graph, BalanceFactor, LabeledMask, DEFAULT_TEMPERATURE, MAGNATAGATUNE_R,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl Phase {
    fn stream(self) -> u64 {
        match self {
            Phase::Pretrain => 1,
            Phase::Finetune => 2,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "finetune" => Ok(Phase::Finetune),
            other => Err(input_err!("unknown phase {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub phase: Phase,
    pub fine_tune_augment: bool,
    pub fine_tune_contrastive: bool,
    pub load_pretrain: bool,
    pub alpha: f64,
    /// Base balancing factor `r`; `lambda = alpha / r`.
    pub balance_r: f64,
    pub label_rate: f64,
    pub batch_size: usize,
    pub pretrain_lr: f64,
    pub finetune_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Applied in fine-tuning only.
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub temperature: f64,
    pub augment: AugmentSpec,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            phase: Phase::Finetune,
            fine_tune_augment: false,
            fine_tune_contrastive: false,
            load_pretrain: false,
            alpha: 1.0,
            balance_r: MAGNATAGATUNE_R,
            label_rate: 1.0,
            batch_size: 48,
            pretrain_lr: 3e-4,
            finetune_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-6,
            max_epochs: 200,
            early_stop_patience: 10,
            plateau_patience: 5,
            plateau_factor: 0.1,
            temperature: DEFAULT_TEMPERATURE,
            augment: AugmentSpec::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.label_rate > 0.0 && self.label_rate <= 1.0) {
            return Err(input_err!("label rate must lie in (0, 1], got {}", self.label_rate));
        }
        if self.batch_size < 2 {
            return Err(input_err!("batch size must be at least 2"));
        }
        if self.max_epochs == 0 || self.early_stop_patience == 0 {
            return Err(input_err!("epoch budget and early-stop patience must be positive"));
        }
        if !(self.temperature > 0.0) {
            return Err(input_err!("temperature must be positive"));
        }
        self.lambda()?;
        self.augment.validate()?;
        self.adam_config().validate()?;
        PlateauSchedule::new(self.plateau_factor, self.plateau_patience)?;
        Ok(())
    }

    /// Weight of the contrastive term in fine-tuning; zero when the term is off.
    pub fn lambda(&self) -> Result<f64> {
        if !self.fine_tune_contrastive {
            return Ok(0.0);
        }
        BalanceFactor::new(self.balance_r)?.lambda(self.alpha)
    }

    pub fn adam_config(&self) -> AdamConfig {
        let (lr, weight_decay) = match self.phase {
            Phase::Pretrain => (self.pretrain_lr, 0.0),
            Phase::Finetune => (self.finetune_lr, self.weight_decay),
        };
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay,
        }
    }

    /// The loss being minimized in this run's phase.
    pub fn objective(&self) -> Result<Objective> {
        Ok(match self.phase {
            Phase::Pretrain => Objective {
                ssl_weight: Some(1.0),
                supervised: false,
                temperature: self.temperature,
            },
            Phase::Finetune => Objective {
                ssl_weight: if self.fine_tune_contrastive {
                    Some(self.lambda()?)
                } else {
                    None
                },
                supervised: true,
                temperature: self.temperature,
            },
        })
    }

    /// Augmentation used to build training views, if any.
    pub fn view_augment(&self) -> Option<&AugmentSpec> {
        match self.phase {
            Phase::Pretrain => Some(&self.augment),
            Phase::Finetune if self.fine_tune_augment => Some(&self.augment),
            Phase::Finetune => None,
        }
    }
}

/// Which loss terms enter a step: `ssl_weight * L_ssl` (when set) plus
/// `L_ml` (when `supervised`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub ssl_weight: Option<f64>,
    pub supervised: bool,
    pub temperature: f64,
}

/// Strict-improvement counter; signals a stop after `patience` stale epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub stale_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            stale_epochs: 0,
        }
    }

    /// Records one validation loss; returns `true` when training should stop.
    pub fn update(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.stale_epochs = 0;
        } else {
            self.stale_epochs += 1;
        }
        self.stale_epochs >= self.patience
    }

    pub fn improved(&self) -> bool {
        self.stale_epochs == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub phase: Phase,
    pub params: ModelParams,
    /// Parameters at the best validation loss seen so far.
    pub best_params: ModelParams,
    pub adam: AdamState,
    pub schedule: PlateauSchedule,
    pub early: EarlyStopping,
    /// Completed epochs.
    pub epoch: usize,
    pub stopped: bool,
    pub seed: u64,
}

impl TrainState {
    pub fn new(params: ModelParams, config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(config.adam_config(), &params.sizes())?;
        Ok(Self {
            phase: config.phase,
            best_params: params.clone(),
            params,
            adam,
            schedule: PlateauSchedule::new(config.plateau_factor, config.plateau_patience)?,
            early: EarlyStopping::new(config.early_stop_patience),
            epoch: 0,
            stopped: false,
            seed: config.seed,
        })
    }

    /// Fresh state from randomly initialized parameters.
    pub fn init(encoder: EncoderConfig, config: &RunConfig) -> Result<Self> {
        let mut rng = derived_rng(config.seed, &[config.phase.stream(), u64::MAX]);
        Self::new(ModelParams::init(encoder, &mut rng)?, config)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        let cfg = self.params.config();
        ck.set("encoder.levels", cfg.levels);
        ck.set("encoder.base_channels", cfg.base_channels);
        ck.set("encoder.embed_dim", cfg.embed_dim);
        ck.set("encoder.proj_dim", cfg.proj_dim);
        ck.set("encoder.tag_count", cfg.tag_count);
        ck.set("phase", self.phase);
        ck.set("epoch", self.epoch);
        ck.set("stopped", self.stopped);
        ck.set("seed", self.seed);
        let a = &self.adam.config;
        ck.set("adam.step", self.adam.step);
        ck.set("adam.lr", a.lr);
        ck.set("adam.beta1", a.beta1);
        ck.set("adam.beta2", a.beta2);
        ck.set("adam.eps", a.eps);
        ck.set("adam.weight_decay", a.weight_decay);
        ck.set("plateau.factor", self.schedule.factor);
        ck.set("plateau.patience", self.schedule.patience);
        ck.set("plateau.best", self.schedule.best);
        ck.set("plateau.stale", self.schedule.stale_epochs);
        ck.set("early.patience", self.early.patience);
        ck.set("early.best", self.early.best);
        ck.set("early.stale", self.early.stale_epochs);
        for (name, t) in self.params.named() {
            ck.push(name, t.clone());
        }
        for (name, t) in self.best_params.named() {
            ck.push(format!("best/{name}"), t.clone());
        }
        for (name, (m, v)) in self.params.names().iter().zip(self.adam.m.iter().zip(&self.adam.v)) {
            ck.push(
                format!("adam.m/{name}"),
                Tensor::new(vec![m.len()], m.clone()).expect("finite moments"),
            );
            ck.push(
                format!("adam.v/{name}"),
                Tensor::new(vec![v.len()], v.clone()).expect("finite moments"),
            );
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let encoder = encoder_config_of(ck)?;
        let params = params_from_checkpoint(ck, encoder, "")?;
        let best_params = params_from_checkpoint(ck, encoder, "best/")?;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for name in params.names() {
            m.push(ck.tensor(&format!("adam.m/{name}"))?.data().to_vec());
            v.push(ck.tensor(&format!("adam.v/{name}"))?.data().to_vec());
        }
        let config = AdamConfig {
            lr: ck.parse("adam.lr")?,
            beta1: ck.parse("adam.beta1")?,
            beta2: ck.parse("adam.beta2")?,
            eps: ck.parse("adam.eps")?,
            weight_decay: ck.parse("adam.weight_decay")?,
        };
        let mut adam = AdamState::new(config, &params.sizes())?;
        let sizes = params.sizes();
        if m.iter()
            .zip(&v)
            .zip(&sizes)
            .any(|((m, v), &n)| m.len() != n || v.len() != n)
        {
            return Err(Error::Checkpoint(
                "optimizer moment sizes do not match parameters".into(),
            ));
        }
        adam.step = ck.parse("adam.step")?;
        adam.m = m;
        adam.v = v;
        Ok(Self {
            phase: ck.parse("phase")?,
            params,
            best_params,
            adam,
            schedule: PlateauSchedule {
                factor: ck.parse("plateau.factor")?,
                patience: ck.parse("plateau.patience")?,
                best: ck.parse("plateau.best")?,
                stale_epochs: ck.parse("plateau.stale")?,
            },
            early: EarlyStopping {
                patience: ck.parse("early.patience")?,
                best: ck.parse("early.best")?,
                stale_epochs: ck.parse("early.stale")?,
            },
            epoch: ck.parse("epoch")?,
            stopped: ck.parse("stopped")?,
            seed: ck.parse("seed")?,
        })
    }
}

/// Encoder configuration stored in a checkpoint's metadata.
pub fn encoder_config_of(ck: &Checkpoint) -> Result<EncoderConfig> {
    let cfg = EncoderConfig {
        levels: ck.parse("encoder.levels")?,
        base_channels: ck.parse("encoder.base_channels")?,
        embed_dim: ck.parse("encoder.embed_dim")?,
        proj_dim: ck.parse("encoder.proj_dim")?,
        tag_count: ck.parse("encoder.tag_count")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn params_from_checkpoint(ck: &Checkpoint, cfg: EncoderConfig, prefix: &str) -> Result<ModelParams> {
    let names: Vec<String> = ModelParams::init(cfg, &mut rand::rngs::mock::StepRng::new(0, 1))?
        .names()
        .to_vec();
    let named = names
        .into_iter()
        .map(|n| Ok((n.clone(), ck.tensor(&format!("{prefix}{n}"))?.clone())))
        .collect::<Result<Vec<_>>>()?;
    ModelParams::from_named(cfg, named).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Model parameters of a checkpoint (the best-validation snapshot when present).
pub fn load_model(ck: &Checkpoint) -> Result<ModelParams> {
    let cfg = encoder_config_of(ck)?;
    params_from_checkpoint(ck, cfg, "best/").or_else(|_| params_from_checkpoint(ck, cfg, ""))
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Independent generator for a `(seed, path...)` coordinate.
pub fn derived_rng(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for &p in path {
        h = splitmix(h ^ splitmix(p));
    }
    ChaCha8Rng::seed_from_u64(h)
}

const SHUFFLE_STREAM: u64 = u64::MAX - 1;
const VALID_STREAM: u64 = u64::MAX - 2;
const MASK_STREAM: u64 = u64::MAX - 3;

/// Two views per track stacked as `[2B, excerpt_len]`; rows `2k` and `2k+1`
/// come from track `tracks[k]`. Each view is an independent random crop,
/// transformed by an independently sampled chain when `augment` is given.
pub fn build_views(
    data: &Dataset,
    tracks: &[usize],
    excerpt_len: usize,
    augment: Option<&AugmentSpec>,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let mut views = Vec::with_capacity(2 * tracks.len());
    for &k in tracks {
        let audio = &data.records[k].audio;
        for _ in 0..2 {
            let crop = rand_crop(audio, excerpt_len, rng)?;
            views.push(match augment {
                Some(spec) => apply_chain(&crop, &sample_chain(spec, rng)),
                None => crop,
            });
        }
    }
    excerpts_to_tensor(&views, excerpt_len)
}

/// Loss terms and parameter gradients of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub loss: f64,
    pub ssl: Option<f64>,
    pub ml: Option<f64>,
    /// One gradient per parameter tensor, in [`ModelParams`] order.
    pub grads: Vec<Vec<f64>>,
}

/// Evaluates `objective` on `views` and back-propagates. Returns `None`
/// when the objective has no term for this batch (supervised-only with no
/// labeled track).
pub fn step_grads(
    params: &ModelParams,
    views: &Tensor,
    tags: &[Vec<f64>],
    mask: &LabeledMask,
    objective: &Objective,
) -> Result<Option<StepOutput>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let x = g.constant(views.clone());
    let h = encode(&mut g, &bound, x)?;
    let ssl = match objective.ssl_weight {
        Some(_) => {
            let o = project(&mut g, &bound, h)?;
            Some(ssl_loss_graph(&mut g, o, objective.temperature)?)
        }
        None => None,
    };
    let ml = if objective.supervised && !mask.is_empty() {
        let z = embed(&mut g, &bound, h)?;
        let y = tag_probs(&mut g, &bound, z)?;
        ml_loss_graph(&mut g, y, tags, mask)?
    } else {
        None
    };
    let Some(loss) = ssml_loss_graph(&mut g, ssl, ml, objective.ssl_weight.unwrap_or(0.0))? else {
        return Ok(None);
    };
    g.backward(loss)?;
    let grads = bound
        .vars()
        .iter()
        .zip(params.sizes())
        .map(|(&v, n)| g.grad(v).map_or_else(|| vec![0.0; n], <[f64]>::to_vec))
        .collect();
    let item = |v: Option<crate::autodiff::Var>| v.map(|v| g.value(v).data()[0]);
    Ok(Some(StepOutput {
        loss: g.value(loss).data()[0],
        ssl: item(ssl),
        ml: item(ml),
        grads,
    }))
}

/// Loss without gradients (validation).
pub fn eval_loss(
    params: &ModelParams,
    views: &Tensor,
    tags: &[Vec<f64>],
    mask: &LabeledMask,
    objective: &Objective,
) -> Result<Option<f64>> {
    let mut g = Graph::new();
    let bound = params.bind_with(&mut g, false);
    let x = g.constant(views.clone());
    let h = encode(&mut g, &bound, x)?;
    let ssl = match objective.ssl_weight {
        Some(_) => {
            let o = project(&mut g, &bound, h)?;
            Some(ssl_loss_graph(&mut g, o, objective.temperature)?)
        }
        None => None,
    };
    let ml = if objective.supervised && !mask.is_empty() {
        let z = embed(&mut g, &bound, h)?;
        let y = tag_probs(&mut g, &bound, z)?;
        ml_loss_graph(&mut g, y, tags, mask)?
    } else {
        None
    };
    Ok(ssml_loss_graph(&mut g, ssl, ml, objective.ssl_weight.unwrap_or(0.0))?.map(|l| g.value(l).data()[0]))
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch={} train_loss={:.6}", self.epoch, self.train_loss)?;
        match self.val_loss {
            Some(v) => write!(f, " val_loss={v:.6}")?,
            None => write!(f, " val_loss=nan")?,
        }
        write!(f, " lr={:e}", self.lr)
    }
}

/// A dataset prepared for one run: split indices and per-record label flags
/// after masking.
#[derive(Debug)]
pub struct Trainer<'a> {
    pub data: &'a Dataset,
    pub config: RunConfig,
    pub objective: Objective,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    /// Per record: whether its tags are used. Masking touches only the
    /// training split.
    pub labeled: Vec<bool>,
    excerpt_len: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a Dataset, config: RunConfig, encoder: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        if encoder.tag_count != data.tag_count() {
            return Err(input_err!(
                "model predicts {} tags, dataset has {}",
                encoder.tag_count,
                data.tag_count()
            ));
        }
        let train = data.split_indices(Split::Train);
        if train.len() < config.batch_size {
            return Err(Error::Data(format!(
                "{} training tracks cannot fill one batch of {}",
                train.len(),
                config.batch_size
            )));
        }
        let valid = data.split_indices(Split::Valid);
        let mut labeled = data.labeled_flags();
        if config.phase == Phase::Finetune {
            let keep = mask_labels(train.len(), config.label_rate, splitmix(config.seed ^ MASK_STREAM))?;
            for (&i, k) in train.iter().zip(keep) {
                labeled[i] &= k;
            }
        }
        Ok(Self {
            objective: config.objective()?,
            data,
            config,
            train,
            valid,
            labeled,
            excerpt_len: encoder.excerpt_len(),
        })
    }

    fn tags_of(&self, tracks: &[usize]) -> Vec<Vec<f64>> {
        let t = self.data.tag_count();
        tracks.iter().map(|&k| self.data.records[k].tag_vector(t)).collect()
    }

    fn mask_of(&self, tracks: &[usize]) -> LabeledMask {
        LabeledMask::from_flags(&tracks.iter().map(|&k| self.labeled[k]).collect::<Vec<_>>())
    }

    /// Batches of epoch `epoch` (0-based), identical for equal seeds.
    pub fn epoch_batches(&self, epoch: usize) -> Result<Vec<Vec<usize>>> {
        let mut rng = derived_rng(
            self.config.seed,
            &[self.config.phase.stream(), epoch as u64, SHUFFLE_STREAM],
        );
        Ok(
            make_batches(&self.train, &self.labeled, self.config.batch_size, &mut rng)?
                .into_iter()
                .map(|b| b.tracks)
                .collect(),
        )
    }

    /// Gradients for one batch at coordinate `(epoch, step)` without
    /// updating anything.
    pub fn batch_grads(
        &self,
        params: &ModelParams,
        tracks: &[usize],
        epoch: usize,
        step: usize,
    ) -> Result<Option<StepOutput>> {
        let views = self.batch_views(tracks, epoch, step)?;
        step_grads(
            params,
            &views,
            &self.tags_of(tracks),
            &self.mask_of(tracks),
            &self.objective,
        )
    }

    /// The `[2B, excerpt_len]` views used at `(epoch, step)`.
    pub fn batch_views(&self, tracks: &[usize], epoch: usize, step: usize) -> Result<Tensor> {
        let mut rng = derived_rng(
            self.config.seed,
            &[self.config.phase.stream(), epoch as u64, step as u64],
        );
        build_views(
            self.data,
            tracks,
            self.excerpt_len,
            self.config.view_augment(),
            &mut rng,
        )
    }

    /// Tag vectors and label mask of a batch.
    pub fn batch_targets(&self, tracks: &[usize]) -> (Vec<Vec<f64>>, LabeledMask) {
        (self.tags_of(tracks), self.mask_of(tracks))
    }

    /// One optimizer step; returns the batch loss (`None` if skipped).
    pub fn train_step(&self, state: &mut TrainState, tracks: &[usize], step: usize) -> Result<Option<f64>> {
        let Some(out) = self.batch_grads(&state.params, tracks, state.epoch, step)? else {
            return Ok(None);
        };
        let grads: Vec<&[f64]> = out.grads.iter().map(Vec::as_slice).collect();
        state.adam.step(state.params.tensors_mut(), &grads)?;
        Ok(Some(out.loss))
    }

    /// Validation objective on the held-out split: no augmentation, crops
    /// fixed for the whole run, partial final batch kept when it has at
    /// least two tracks. `None` when there is nothing to evaluate.
    pub fn validation_loss(&self, params: &ModelParams) -> Result<Option<f64>> {
        let mut rng = derived_rng(self.config.seed, &[self.config.phase.stream(), VALID_STREAM]);
        let (mut total, mut weight) = (0.0, 0usize);
        for chunk in self.valid.chunks(self.config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let views = build_views(self.data, chunk, self.excerpt_len, None, &mut rng)?;
            if let Some(l) = eval_loss(
                params,
                &views,
                &self.tags_of(chunk),
                &self.mask_of(chunk),
                &self.objective,
            )? {
                total += l * chunk.len() as f64;
                weight += chunk.len();
            }
        }
        Ok((weight > 0).then(|| total / weight as f64))
    }

    /// Runs one epoch and applies the schedule / stopping rules (fine-tune
    /// only).
    pub fn run_epoch(&self, state: &mut TrainState) -> Result<EpochLog> {
        let batches = self.epoch_batches(state.epoch)?;
        let (mut total, mut count) = (0.0, 0usize);
        for (step, tracks) in batches.iter().enumerate() {
            if let Some(l) = self.train_step(state, tracks, step)? {
                total += l;
                count += 1;
            }
        }
        let train_loss = if count > 0 { total / count as f64 } else { f64::NAN };
        let val_loss = self.validation_loss(&state.params)?;
        state.epoch += 1;
        let lr_used = state.adam.lr();
        match (self.config.phase, val_loss) {
            (Phase::Finetune, Some(v)) => {
                let stop = state.early.update(v);
                if state.early.improved() {
                    state.best_params = state.params.clone();
                }
                let lr = state.schedule.update(v, state.adam.lr())?;
                state.adam.set_lr(lr);
                state.stopped = stop;
            }
            _ => state.best_params = state.params.clone(),
        }
        Ok(EpochLog {
            epoch: state.epoch,
            train_loss,
            val_loss,
            lr: lr_used,
        })
    }

    /// Trains until the epoch budget is spent or early stopping fires.
    pub fn run(&self, state: &mut TrainState, mut on_epoch: impl FnMut(&EpochLog)) -> Result<()> {
        if state.phase != self.config.phase {
            return Err(input_err!(
                "state is from {}, run is {}",
                state.phase,
                self.config.phase
            ));
        }
        while state.epoch < self.config.max_epochs && !state.stopped {
            let log = self.run_epoch(state)?;
            log::info!("{log}");
            on_epoch(&log);
        }
        Ok(())
    }
}

/// Contrastive pre-training for the configured epoch budget.
pub fn pretrain(
    data: &Dataset,
    encoder: EncoderConfig,
    config: &RunConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainState> {
    let config = RunConfig {
        phase: Phase::Pretrain,
        ..config.clone()
    };
    let trainer = Trainer::new(data, config.clone(), &encoder)?;
    let mut state = TrainState::init(encoder, &config)?;
    trainer.run(&mut state, on_epoch)?;
    Ok(state)
}

/// Fine-tuning on the combined objective. With `load_pretrain`, `init`
/// must hold the pre-trained parameters; every parameter stays trainable.
pub fn finetune(
    data: &Dataset,
    encoder: EncoderConfig,
    config: &RunConfig,
    init: Option<&ModelParams>,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainState> {
    let config = RunConfig {
        phase: Phase::Finetune,
        ..config.clone()
    };
    let trainer = Trainer::new(data, config.clone(), &encoder)?;
    let mut state = match (config.load_pretrain, init) {
        (true, None) => {
            return Err(input_err!(
                "load_pretrain is set but no pre-trained parameters were given"
            ))
        }
        (true, Some(p)) => {
            if *p.config() != encoder {
                return Err(input_err!(
                    "pre-trained encoder {:?} differs from {:?}",
                    p.config(),
                    encoder
                ));
            }
            TrainState::new(p.clone(), &config)?
        }
        (false, _) => TrainState::init(encoder, &config)?,
    };
    trainer.run(&mut state, on_epoch)?;
    Ok(state)
}
