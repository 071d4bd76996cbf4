//! Sequential-training orchestration: method strategies, the optimizer, the
//! per-task loop with checkpointing and resume, joint training, the task
//! order study, the momentum sweep, and report emission.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array4;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{self, BaselineError, ImportanceMap, SiAccumulator};
use crate::ctp::{self, CtpError, CtpStepConfig, MomentumState};
use crate::eval::{self, EvalError, RetrievalReport};
use crate::losses::{self, ForwardHandles, LossError, StepBatch};
use crate::memory::{self, MemoryError, ReplayBuffer, SelectionStrategy};
use crate::model::{self, Bound, ModelConfig, ModelError, ModelState};
use crate::taskstream::{DataError, ImageTextPair, TaskStream, MASK_TOKEN};
use crate::tensor::{Arr, Tape, TensorId};
use crate::util;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss in component {component} (task position {position}, step {step})")]
    NonFiniteLoss {
        position: usize,
        step: u64,
        component: String,
    },
    #[error("unknown method {0}")]
    UnknownMethod(String),
    #[error("invalid run config: {0}")]
    BadConfig(String),
    #[error("task order {0:?} is not a permutation of 0..{1}")]
    BadOrder(Vec<usize>, usize),
    #[error("nothing to report: empty ledger")]
    EmptyLedger,
    #[error("momentum sweep needs at least one value")]
    EmptySweep,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Ctp(#[from] CtpError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

// ── methods ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Seqf,
    Joint,
    Ewc,
    Si,
    Mas,
    Rwalk,
    Afec,
    Lwf,
    Er,
    Kmeans,
    Mof,
    Icarl,
    Lucir,
    Ctp,
    CtpEr,
}

impl Method {
    pub const ALL: [Method; 15] = [
        Method::Seqf,
        Method::Joint,
        Method::Ewc,
        Method::Si,
        Method::Mas,
        Method::Rwalk,
        Method::Afec,
        Method::Lwf,
        Method::Er,
        Method::Kmeans,
        Method::Mof,
        Method::Icarl,
        Method::Lucir,
        Method::Ctp,
        Method::CtpEr,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Seqf => "seqf",
            Method::Joint => "joint",
            Method::Ewc => "ewc",
            Method::Si => "si",
            Method::Mas => "mas",
            Method::Rwalk => "rwalk",
            Method::Afec => "afec",
            Method::Lwf => "lwf",
            Method::Er => "er",
            Method::Kmeans => "kmeans",
            Method::Mof => "mof",
            Method::Icarl => "icarl",
            Method::Lucir => "lucir",
            Method::Ctp => "ctp",
            Method::CtpEr => "ctp-er",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = TrainError;
    fn from_str(s: &str) -> Result<Self, TrainError> {
        Method::ALL
            .iter()
            .find(|m| m.name() == s)
            .copied()
            .ok_or_else(|| TrainError::UnknownMethod(s.to_string()))
    }
}

// ── configuration ──────────────────────────────────────────────────────

/// Training hyperparameters. Defaults are the reference-scale settings
/// (5 epochs/task, batch 128, AdamW at 1e-4 with cosine decay to 1e-6 and
/// weight decay 0.05, queue 1024, momentum 0.9 with 0.995 on the first
/// task); the shipped desk config overrides them for CPU-scale runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub method: String,
    pub epochs_per_task: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub mask_rate: f64,
    pub temperature: f64,
    pub momentum_first_task: f64,
    pub momentum: f64,
    pub queue_k: usize,
    /// 0 selects the default of 1% of the stream's train pairs.
    pub buffer_capacity: usize,
    /// 0 selects `batch_size`.
    pub replay_batch: usize,
    pub lambda: f64,
    pub lambda_e: f64,
    pub si_xi: f64,
    pub afec_warmup_steps: usize,
    pub fisher_batch_size: usize,
    pub importance_samples: usize,
    pub augment: bool,
    pub seed: u64,
    pub task_order: Option<Vec<usize>>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            method: "seqf".into(),
            epochs_per_task: 5,
            batch_size: 128,
            lr: 1e-4,
            lr_min: 1e-6,
            weight_decay: 0.05,
            mask_rate: 0.15,
            temperature: 0.07,
            momentum_first_task: 0.995,
            momentum: 0.9,
            queue_k: 1024,
            buffer_capacity: 0,
            replay_batch: 0,
            lambda: 1.0,
            lambda_e: 1.0,
            si_xi: 0.1,
            afec_warmup_steps: 50,
            fisher_batch_size: 8,
            importance_samples: 512,
            augment: true,
            seed: 0,
            task_order: None,
        }
    }
}

impl TrainSection {
    pub fn effective_buffer_capacity(&self, stream: &TaskStream) -> usize {
        if self.buffer_capacity > 0 {
            self.buffer_capacity
        } else {
            (stream.total_train_pairs() / 100).max(1)
        }
    }

    pub fn effective_replay_batch(&self) -> usize {
        if self.replay_batch > 0 {
            self.replay_batch
        } else {
            self.batch_size
        }
    }
}

/// Full run configuration: data generation, architecture, training.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FileConfig {
    pub data: crate::taskstream::StreamConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
}

/// Parse a TOML config file, then apply environment overrides of the form
/// `VLCP_<SECTION>_<FIELD>=value` (e.g. `VLCP_TRAIN_EPOCHS_PER_TASK=2`).
pub fn load_config(path: &Path) -> Result<FileConfig, TrainError> {
    let text = std::fs::read_to_string(path)?;
    let mut value: toml::Value = text
        .parse()
        .map_err(|e| TrainError::BadConfig(format!("{e}")))?;
    apply_env_overrides(&mut value, std::env::vars());
    value
        .try_into()
        .map_err(|e| TrainError::BadConfig(format!("{e}")))
}

pub fn apply_env_overrides(value: &mut toml::Value, vars: impl Iterator<Item = (String, String)>) {
    for (key, raw) in vars {
        let Some(rest) = key.strip_prefix("VLCP_") else {
            continue;
        };
        let Some((section, field)) = rest.split_once('_') else {
            continue;
        };
        let section = section.to_ascii_lowercase();
        let field = field.to_ascii_lowercase();
        if !["data", "model", "train"].contains(&section.as_str()) {
            continue;
        }
        // parse the value through a one-line TOML document
        let parsed: Result<toml::Value, _> = format!("v = {raw}").parse::<toml::Value>();
        let v = match parsed {
            Ok(t) => t.get("v").cloned().unwrap(),
            Err(_) => toml::Value::String(raw),
        };
        let table = value
            .as_table_mut()
            .unwrap()
            .entry(section)
            .or_insert_with(|| toml::Value::Table(Default::default()));
        if let Some(t) = table.as_table_mut() {
            t.insert(field, v);
        }
    }
}

// ── optimizer ──────────────────────────────────────────────────────────

/// Decoupled-weight-decay adaptive optimizer over the named parameter map.
/// Weight decay applies to matrices only (biases, gains, embeddings of
/// rank 1 are exempt).
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u64,
    m: BTreeMap<String, Arr>,
    v: BTreeMap<String, Arr>,
}

impl AdamW {
    pub fn new(state: &ModelState, weight_decay: f64) -> Self {
        let zeros = |s: &ModelState| {
            s.params
                .iter()
                .map(|(n, a)| (n.clone(), Arr::zeros(a.raw_dim())))
                .collect()
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: zeros(state),
            v: zeros(state),
        }
    }

    /// Apply one update; returns the parameter deltas (new − old).
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Arr>,
        grads: &BTreeMap<String, Arr>,
        lr: f64,
    ) -> BTreeMap<String, Arr> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut delta = BTreeMap::new();
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            let m = self.m.get_mut(name).unwrap();
            let v = self.v.get_mut(name).unwrap();
            let decay = if p.ndim() >= 2 { self.weight_decay } else { 0.0 };
            let mut d = Arr::zeros(p.raw_dim());
            ndarray::Zip::from(&mut d)
                .and(&mut *p)
                .and(g)
                .and(&mut *m)
                .and(&mut *v)
                .for_each(|d, p, &g, m, v| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    let upd = lr * (mhat / (vhat.sqrt() + self.eps) + decay * *p);
                    *p -= upd;
                    *d = -upd;
                });
            delta.insert(name.clone(), d);
        }
        delta
    }
}

/// Cosine decay from `lr` to `lr_min` over `total` steps (restarted per task).
pub fn cosine_lr(step: usize, total: usize, lr: f64, lr_min: f64) -> f64 {
    if total <= 1 {
        return lr;
    }
    let p = (step as f64 / (total - 1) as f64).clamp(0.0, 1.0);
    lr_min + (lr - lr_min) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

// ── batches ────────────────────────────────────────────────────────────

/// Random crop shift (±2 px, zero fill), horizontal flip, per-channel gain.
fn augment_images(images: &mut Array4<f64>, rng: &mut ChaCha8Rng) {
    let (b, h, w, c) = images.dim();
    for i in 0..b {
        let dx = rng.gen_range(-2i64..=2);
        let dy = rng.gen_range(-2i64..=2);
        let flip = rng.gen_range(0.0..1.0) < 0.5;
        let gains: Vec<f64> = (0..c).map(|_| 1.0 + rng.gen_range(-0.1..0.1)).collect();
        let src = images.index_axis(ndarray::Axis(0), i).to_owned();
        let mut dst = images.index_axis_mut(ndarray::Axis(0), i);
        for y in 0..h {
            for x in 0..w {
                let sx0 = if flip { w as i64 - 1 - x as i64 } else { x as i64 };
                let sy = y as i64 + dy;
                let sx = sx0 + dx;
                for ch in 0..c {
                    let v = if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                        src[(sy as usize, sx as usize, ch)] * gains[ch]
                    } else {
                        0.0
                    };
                    dst[(y, x, ch)] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
}

/// Assemble a training batch: pad captions, optionally augment images,
/// and draw the token mask.
pub fn build_step_batch(
    pairs: &[&ImageTextPair],
    model_cfg: &ModelConfig,
    mask_rate: f64,
    mask_seed: u64,
    augment_rng: Option<&mut ChaCha8Rng>,
) -> Result<StepBatch, TrainError> {
    let (mut images, tokens, lens) = eval::batch_arrays(pairs, model_cfg.max_seq_len);
    if let Some(rng) = augment_rng {
        augment_images(&mut images, rng);
    }
    let masked = losses::mask_tokens(&tokens, &lens, mask_rate, mask_seed, MASK_TOKEN)?;
    Ok(StepBatch {
        images,
        tokens,
        lens,
        masked,
    })
}

fn importance_batches(
    train: &[ImageTextPair],
    model_cfg: &ModelConfig,
    mask_rate: f64,
    n_samples: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<StepBatch>, TrainError> {
    let take = n_samples.min(train.len());
    let idx = util::sample_without_replacement(train.len(), take, rng);
    let mut batches = Vec::new();
    for chunk in idx.chunks(batch_size.max(1)) {
        let pairs: Vec<&ImageTextPair> = chunk.iter().map(|&i| &train[i]).collect();
        let seed: u64 = rng.gen();
        batches.push(build_step_batch(&pairs, model_cfg, mask_rate, seed, None)?);
    }
    Ok(batches)
}

/// Projections of a frozen reference model on the batch (no gradients).
fn reference_projections(
    tape: &mut Tape,
    reference: &ModelState,
    batch: &StepBatch,
) -> (ndarray::Array2<f64>, ndarray::Array2<f64>) {
    let cfg = &reference.config;
    let bound = model::bind(tape, reference, false);
    let img_seq = model::encode_image(tape, &bound, cfg, &batch.images);
    let txt_seq = model::encode_text(tape, &bound, cfg, &batch.tokens, &batch.lens);
    let v = model::project_cls(tape, &bound, cfg, img_seq, model::Modality::Image);
    let w = model::project_cls(tape, &bound, cfg, txt_seq, model::Modality::Text);
    let to2 = |t: &Tape, id: TensorId| {
        t.value(id)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned()
    };
    (to2(tape, v), to2(tape, w))
}

// ── strategies ─────────────────────────────────────────────────────────

pub struct StepCtx<'a> {
    pub position: usize,
    pub task_id: usize,
    pub model_ref: Option<&'a ModelState>,
    pub train: &'a TrainSection,
    pub model_cfg: &'a ModelConfig,
}

/// Per-method hooks around the shared training loop.
pub trait Strategy {
    fn replay_pairs(&mut self, _rng: &mut ChaCha8Rng) -> Vec<ImageTextPair> {
        Vec::new()
    }

    fn on_task_start(
        &mut self,
        _model: &ModelState,
        _ctx: &StepCtx,
        _train_pairs: &[ImageTextPair],
        _rng: &mut ChaCha8Rng,
    ) -> Result<(), TrainError> {
        Ok(())
    }

    /// Extra loss terms added to the step tape, labeled for the metrics log.
    fn per_step_loss(
        &mut self,
        _tape: &mut Tape,
        _bound: &Bound,
        _model: &ModelState,
        _fwd: &ForwardHandles,
        _batch: &StepBatch,
        _ctx: &StepCtx,
    ) -> Result<Vec<(&'static str, TensorId)>, TrainError> {
        Ok(Vec::new())
    }

    fn post_step(
        &mut self,
        _grads: &BTreeMap<String, Arr>,
        _delta: &BTreeMap<String, Arr>,
        _model: &ModelState,
        _incoming: &[&ImageTextPair],
        _rng: &mut ChaCha8Rng,
    ) -> Result<(), TrainError> {
        Ok(())
    }

    fn on_task_end(
        &mut self,
        _model: &ModelState,
        _ctx: &StepCtx,
        _train_pairs: &[ImageTextPair],
        _rng: &mut ChaCha8Rng,
    ) -> Result<(), TrainError> {
        Ok(())
    }

    fn save_state(&self, _dir: &Path, _pos: usize) -> Result<(), TrainError> {
        Ok(())
    }

    fn load_state(
        &mut self,
        _dir: &Path,
        _pos: usize,
        _stream: &TaskStream,
    ) -> Result<(), TrainError> {
        Ok(())
    }
}

/// Plain sequential finetuning (and the joint upper bound): no hooks at all.
pub struct NullStrategy;
impl Strategy for NullStrategy {}

#[derive(Clone, Copy, PartialEq)]
enum PenaltyKind {
    Ewc,
    Si,
    Mas,
    Rwalk,
    Afec,
}

struct PenaltyStrategy {
    kind: PenaltyKind,
    omega: Option<ImportanceMap>,
    si: Option<SiAccumulator>,
    theta_star: Option<ModelState>,
    omega_star: Option<ImportanceMap>,
}

impl PenaltyStrategy {
    fn new(kind: PenaltyKind) -> Self {
        Self {
            kind,
            omega: None,
            si: None,
            theta_star: None,
            omega_star: None,
        }
    }

    fn uses_si(&self) -> bool {
        matches!(self.kind, PenaltyKind::Si | PenaltyKind::Rwalk)
    }
}

impl Strategy for PenaltyStrategy {
    fn on_task_start(
        &mut self,
        model: &ModelState,
        ctx: &StepCtx,
        train_pairs: &[ImageTextPair],
        rng: &mut ChaCha8Rng,
    ) -> Result<(), TrainError> {
        if self.uses_si() {
            self.si = Some(SiAccumulator::new(model));
        }
        if self.kind == PenaltyKind::Afec && ctx.model_ref.is_some() {
            // forward-step model: a short plain-objective run on new data only
            let mut star = model.clone_state();
            let mut opt = AdamW::new(&star, ctx.train.weight_decay);
            let steps = ctx.train.afec_warmup_steps;
            for step in 0..steps {
                let idx = util::sample_without_replacement(
                    train_pairs.len(),
                    ctx.train.batch_size.min(train_pairs.len()),
                    rng,
                );
                let pairs: Vec<&ImageTextPair> = idx.iter().map(|&i| &train_pairs[i]).collect();
                let seed: u64 = rng.gen();
                let batch = build_step_batch(
                    &pairs,
                    ctx.model_cfg,
                    ctx.train.mask_rate,
                    seed,
                    None,
                )?;
                let (_, grads) = losses::vlp_step(&star, &batch, ctx.train.temperature)?;
                let lr = cosine_lr(step, steps, ctx.train.lr, ctx.train.lr_min);
                opt.step(&mut star.params, &grads, lr);
            }
            let batches = importance_batches(
                train_pairs,
                ctx.model_cfg,
                ctx.train.mask_rate,
                ctx.train.importance_samples,
                ctx.train.fisher_batch_size,
                rng,
            )?;
            self.omega_star = Some(baselines::fisher_importance(
                &star,
                &batches,
                ctx.train.temperature,
            )?);
            self.theta_star = Some(star);
        }
        Ok(())
    }

    fn per_step_loss(
        &mut self,
        tape: &mut Tape,
        bound: &Bound,
        _model: &ModelState,
        _fwd: &ForwardHandles,
        _batch: &StepBatch,
        ctx: &StepCtx,
    ) -> Result<Vec<(&'static str, TensorId)>, TrainError> {
        let Some(reference) = ctx.model_ref else {
            return Ok(Vec::new());
        };
        let Some(omega) = &self.omega else {
            return Ok(Vec::new());
        };
        let term = match self.kind {
            PenaltyKind::Afec => {
                let (star, omega_star) = (
                    self.theta_star.as_ref().expect("forward-step model"),
                    self.omega_star.as_ref().expect("forward-step importance"),
                );
                baselines::afec_penalty(
                    tape,
                    bound,
                    reference,
                    star,
                    omega,
                    omega_star,
                    ctx.train.lambda,
                    ctx.train.lambda_e,
                )
            }
            _ => baselines::quadratic_penalty(tape, bound, reference, omega, ctx.train.lambda),
        };
        Ok(vec![("penalty", term)])
    }

    fn post_step(
        &mut self,
        grads: &BTreeMap<String, Arr>,
        delta: &BTreeMap<String, Arr>,
        _model: &ModelState,
        _incoming: &[&ImageTextPair],
        _rng: &mut ChaCha8Rng,
    ) -> Result<(), TrainError> {
        if let Some(si) = &mut self.si {
            si.accumulate(grads, delta);
        }
        Ok(())
    }

    fn on_task_end(
        &mut self,
        model: &ModelState,
        ctx: &StepCtx,
        train_pairs: &[ImageTextPair],
        rng: &mut ChaCha8Rng,
    ) -> Result<(), TrainError> {
        let fisher = |rng: &mut ChaCha8Rng| -> Result<ImportanceMap, TrainError> {
            let batches = importance_batches(
                train_pairs,
                ctx.model_cfg,
                ctx.train.mask_rate,
                ctx.train.importance_samples,
                ctx.train.fisher_batch_size,
                rng,
            )?;
            Ok(baselines::fisher_importance(
                model,
                &batches,
                ctx.train.temperature,
            )?)
        };
        self.omega = Some(match self.kind {
            PenaltyKind::Ewc | PenaltyKind::Afec => fisher(rng)?,
            PenaltyKind::Si => self
                .si
                .take()
                .expect("accumulator active")
                .finalize(model, ctx.train.si_xi)?,
            PenaltyKind::Mas => {
                let batches = importance_batches(
                    train_pairs,
                    ctx.model_cfg,
                    ctx.train.mask_rate,
                    ctx.train.importance_samples,
                    1, // per-sample sensitivity
                    rng,
                )?;
                baselines::mas_importance(model, &batches)?
            }
            PenaltyKind::Rwalk => {
                let f = fisher(rng)?.normalized_by_mean();
                let s = self
                    .si
                    .take()
                    .expect("accumulator active")
                    .finalize(model, ctx.train.si_xi)?
                    .normalized_by_mean();
                baselines::rwalk_importance(&f, &s)?
            }
        });
        Ok(())
    }

    fn save_state(&self, dir: &Path, pos: usize) -> Result<(), TrainError> {
        if let Some(omega) = &self.omega {
            omega.save(&dir.join(format!("importance_task_{pos}.bin")))?;
        }
        Ok(())
    }

    fn load_state(
        &mut self,
        dir: &Path,
        pos: usize,
        _stream: &TaskStream,
    ) -> Result<(), TrainError> {
        let path = dir.join(format!("importance_task_{pos}.bin"));
        if path.exists() {
            self.omega = Some(ImportanceMap::load(&path)?);
        }
        Ok(())
    }
}

/// Representation alignment against the previous-step model on new data.
struct LwfStrategy;

impl Strategy for LwfStrategy {
    fn per_step_loss(
        &mut self,
        tape: &mut Tape,
        _bound: &Bound,
        _model: &ModelState,
        fwd: &ForwardHandles,
        batch: &StepBatch,
        ctx: &StepCtx,
    ) -> Result<Vec<(&'static str, TensorId)>, TrainError> {
        let Some(reference) = ctx.model_ref else {
            return Ok(Vec::new());
        };
        let (v_ref, w_ref) = reference_projections(tape, reference, batch);
        let term = baselines::lwf_step_loss(
            tape,
            fwd.v,
            fwd.w,
            &v_ref,
            &w_ref,
            ctx.train.temperature,
        )?;
        Ok(vec![("distill", term)])
    }
}

#[derive(Clone, Copy, PartialEq)]
enum SelectKind {
    Er,
    Kmeans,
    Mof,
}

/// Replay-buffer methods: ER/Kmeans/MoF sampling, optional distillation
/// (ICARL) and optional orientation constraint (LUCIR).
struct ReplayStrategy {
    select: SelectKind,
    distill: bool,
    orientation: bool,
    buffer: ReplayBuffer<ImageTextPair>,
    replay_request: usize,
}

impl ReplayStrategy {
    fn new(select: SelectKind, distill: bool, orientation: bool, capacity: usize) -> Self {
        Self {
            select,
            distill,
            orientation,
            buffer: ReplayBuffer::new(capacity),
            replay_request: 0,
        }
    }
}

impl Strategy for ReplayStrategy {
    fn replay_pairs(&mut self, rng: &mut ChaCha8Rng) -> Vec<ImageTextPair> {
        self.buffer
            .sample(self.replay_request, rng)
            .into_iter()
            .map(|(p, _)| p)
            .collect()
    }

    fn on_task_start(
        &mut self,
        _model: &ModelState,
        ctx: &StepCtx,
        train_pairs: &[ImageTextPair],
        rng: &mut ChaCha8Rng,
    ) -> Result<(), TrainError> {
        self.replay_request = ctx.train.effective_replay_batch();
        self.buffer.begin_task(ctx.task_id, train_pairs.len(), rng);
        Ok(())
    }

    fn per_step_loss(
        &mut self,
        tape: &mut Tape,
        _bound: &Bound,
        _model: &ModelState,
        fwd: &ForwardHandles,
        batch: &StepBatch,
        ctx: &StepCtx,
    ) -> Result<Vec<(&'static str, TensorId)>, TrainError> {
        let Some(reference) = ctx.model_ref else {
            return Ok(Vec::new());
        };
        let mut terms = Vec::new();
        if self.distill || self.orientation {
            let (v_ref, w_ref) = reference_projections(tape, reference, batch);
            if self.distill {
                let term = baselines::lwf_step_loss(
                    tape,
                    fwd.v,
                    fwd.w,
                    &v_ref,
                    &w_ref,
                    ctx.train.temperature,
                )?;
                terms.push(("distill", term));
            }
            if self.orientation {
                let term =
                    baselines::lucir_orientation_loss(tape, fwd.v, fwd.w, &v_ref, &w_ref);
                terms.push(("orientation", term));
            }
        }
        Ok(terms)
    }

    fn post_step(
        &mut self,
        _grads: &BTreeMap<String, Arr>,
        _delta: &BTreeMap<String, Arr>,
        _model: &ModelState,
        incoming: &[&ImageTextPair],
        rng: &mut ChaCha8Rng,
    ) -> Result<(), TrainError> {
        if self.select == SelectKind::Er {
            for p in incoming {
                memory::reservoir_update(&mut self.buffer, (*p).clone(), rng)?;
            }
        }
        Ok(())
    }

    fn on_task_end(
        &mut self,
        model: &ModelState,
        ctx: &StepCtx,
        train_pairs: &[ImageTextPair],
        rng: &mut ChaCha8Rng,
    ) -> Result<(), TrainError> {
        match self.select {
            SelectKind::Er => {
                memory::rebalance_buffer(
                    &mut self.buffer,
                    ctx.task_id,
                    train_pairs,
                    &SelectionStrategy::Reservoir,
                    rng,
                )?;
            }
            SelectKind::Kmeans | SelectKind::Mof => {
                let refs: Vec<&ImageTextPair> = train_pairs.iter().collect();
                let features = eval::fused_features(model, &refs);
                let strategy = if self.select == SelectKind::Kmeans {
                    SelectionStrategy::Kmeans {
                        features: &features,
                    }
                } else {
                    SelectionStrategy::MeanOfFeature {
                        features: &features,
                    }
                };
                memory::rebalance_buffer(&mut self.buffer, ctx.task_id, train_pairs, &strategy, rng)?;
            }
        }
        Ok(())
    }

    fn save_state(&self, dir: &Path, pos: usize) -> Result<(), TrainError> {
        save_buffer(&self.buffer, dir, pos)
    }

    fn load_state(&mut self, dir: &Path, pos: usize, stream: &TaskStream) -> Result<(), TrainError> {
        if let Some(buf) = load_buffer(dir, pos, stream, self.buffer.capacity())? {
            self.buffer = buf;
        }
        Ok(())
    }
}

/// Compatible momentum contrast with topology preservation, optionally mixed
/// with replayed pairs that flow through the same losses.
struct CtpStrategy {
    er: bool,
    ms: Option<MomentumState>,
    buffer: Option<ReplayBuffer<ImageTextPair>>,
    replay_request: usize,
}

impl CtpStrategy {
    fn new(er: bool, capacity: usize) -> Self {
        Self {
            er,
            ms: None,
            buffer: er.then(|| ReplayBuffer::new(capacity)),
            replay_request: 0,
        }
    }
}

impl Strategy for CtpStrategy {
    fn replay_pairs(&mut self, rng: &mut ChaCha8Rng) -> Vec<ImageTextPair> {
        match &self.buffer {
            Some(buf) => buf.sample(self.replay_request, rng).into_iter().map(|(p, _)| p).collect(),
            None => Vec::new(),
        }
    }

    fn on_task_start(
        &mut self,
        model: &ModelState,
        ctx: &StepCtx,
        train_pairs: &[ImageTextPair],
        rng: &mut ChaCha8Rng,
    ) -> Result<(), TrainError> {
        self.replay_request = ctx.train.effective_replay_batch();
        let m = if ctx.position == 0 {
            ctx.train.momentum_first_task
        } else {
            ctx.train.momentum
        };
        let init = ctx.model_ref.unwrap_or(model);
        let max_push = ctx.train.batch_size + if self.er { self.replay_request } else { 0 };
        self.ms = Some(MomentumState::new(init, m, ctx.train.queue_k, max_push));
        if let Some(buf) = &mut self.buffer {
            buf.begin_task(ctx.task_id, train_pairs.len(), rng);
        }
        Ok(())
    }

    fn per_step_loss(
        &mut self,
        tape: &mut Tape,
        _bound: &Bound,
        model: &ModelState,
        fwd: &ForwardHandles,
        batch: &StepBatch,
        ctx: &StepCtx,
    ) -> Result<Vec<(&'static str, TensorId)>, TrainError> {
        let ms = self.ms.as_mut().expect("momentum state initialized");
        let cfg = CtpStepConfig {
            tau: ctx.train.temperature,
            ..CtpStepConfig::default()
        };
        let terms = ctp::ctp_loss_terms(tape, model, fwd, ms, ctx.model_ref, batch, cfg)?;
        Ok(vec![
            ("cmc_ita", terms.cmc_ita),
            ("cmc_mlm", terms.cmc_mlm),
            ("cross_tp", terms.cross_tp),
            ("same_tp", terms.same_tp),
        ])
    }

    fn post_step(
        &mut self,
        _grads: &BTreeMap<String, Arr>,
        _delta: &BTreeMap<String, Arr>,
        _model: &ModelState,
        incoming: &[&ImageTextPair],
        rng: &mut ChaCha8Rng,
    ) -> Result<(), TrainError> {
        if let Some(buf) = &mut self.buffer {
            for p in incoming {
                memory::reservoir_update(buf, (*p).clone(), rng)?;
            }
        }
        Ok(())
    }

    fn on_task_end(
        &mut self,
        _model: &ModelState,
        ctx: &StepCtx,
        train_pairs: &[ImageTextPair],
        rng: &mut ChaCha8Rng,
    ) -> Result<(), TrainError> {
        if let Some(buf) = &mut self.buffer {
            memory::rebalance_buffer(
                buf,
                ctx.task_id,
                train_pairs,
                &SelectionStrategy::Reservoir,
                rng,
            )?;
        }
        Ok(())
    }

    fn save_state(&self, dir: &Path, pos: usize) -> Result<(), TrainError> {
        if let Some(buf) = &self.buffer {
            save_buffer(buf, dir, pos)?;
        }
        Ok(())
    }

    fn load_state(&mut self, dir: &Path, pos: usize, stream: &TaskStream) -> Result<(), TrainError> {
        if let Some(buf) = &self.buffer {
            if let Some(loaded) = load_buffer(dir, pos, stream, buf.capacity())? {
                self.buffer = Some(loaded);
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct BufferManifest {
    entries: Vec<(u64, usize)>,
    capacity: usize,
}

fn save_buffer(
    buffer: &ReplayBuffer<ImageTextPair>,
    dir: &Path,
    pos: usize,
) -> Result<(), TrainError> {
    let manifest = BufferManifest {
        entries: buffer
            .entries()
            .iter()
            .map(|(p, t)| (p.pair_id, *t))
            .collect(),
        capacity: buffer.capacity(),
    };
    let path = dir.join(format!("buffer_task_{pos}.json"));
    std::fs::write(path, serde_json::to_string(&manifest)?)?;
    Ok(())
}

fn load_buffer(
    dir: &Path,
    pos: usize,
    stream: &TaskStream,
    capacity: usize,
) -> Result<Option<ReplayBuffer<ImageTextPair>>, TrainError> {
    let path = dir.join(format!("buffer_task_{pos}.json"));
    if !path.exists() {
        return Ok(None);
    }
    let manifest: BufferManifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let mut by_id: BTreeMap<u64, &ImageTextPair> = BTreeMap::new();
    for t in &stream.tasks {
        for p in &t.train {
            by_id.insert(p.pair_id, p);
        }
    }
    let entries: Vec<(ImageTextPair, usize)> = manifest
        .entries
        .iter()
        .filter_map(|(pid, task)| by_id.get(pid).map(|p| ((*p).clone(), *task)))
        .collect();
    Ok(Some(ReplayBuffer::from_entries(capacity, entries)))
}

fn make_strategy(method: Method, cfg: &TrainSection, stream: &TaskStream) -> Box<dyn Strategy> {
    let cap = cfg.effective_buffer_capacity(stream);
    match method {
        Method::Seqf | Method::Joint => Box::new(NullStrategy),
        Method::Ewc => Box::new(PenaltyStrategy::new(PenaltyKind::Ewc)),
        Method::Si => Box::new(PenaltyStrategy::new(PenaltyKind::Si)),
        Method::Mas => Box::new(PenaltyStrategy::new(PenaltyKind::Mas)),
        Method::Rwalk => Box::new(PenaltyStrategy::new(PenaltyKind::Rwalk)),
        Method::Afec => Box::new(PenaltyStrategy::new(PenaltyKind::Afec)),
        Method::Lwf => Box::new(LwfStrategy),
        Method::Er => Box::new(ReplayStrategy::new(SelectKind::Er, false, false, cap)),
        Method::Kmeans => Box::new(ReplayStrategy::new(SelectKind::Kmeans, false, false, cap)),
        Method::Mof => Box::new(ReplayStrategy::new(SelectKind::Mof, false, false, cap)),
        Method::Icarl => Box::new(ReplayStrategy::new(SelectKind::Mof, true, false, cap)),
        Method::Lucir => Box::new(ReplayStrategy::new(SelectKind::Mof, false, true, cap)),
        Method::Ctp => Box::new(CtpStrategy::new(false, cap)),
        Method::CtpEr => Box::new(CtpStrategy::new(true, cap)),
    }
}

// ── the run ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskRecord {
    pub position: usize,
    pub task_id: usize,
    pub checkpoint: String,
    pub report: RetrievalReport,
}

/// Canonical run outcome. Wall-clock timings live next to the ledger in
/// `timing.json`, outside of this (deterministic) structure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunLedger {
    pub method: String,
    pub seed: u64,
    pub task_order: Vec<usize>,
    pub records: Vec<TaskRecord>,
}

impl RunLedger {
    pub fn final_report(&self) -> Option<&RetrievalReport> {
        self.records.last().map(|r| &r.report)
    }
}

#[derive(Serialize)]
struct StepRecord {
    step: u64,
    task: usize,
    l_ita: f64,
    l_mlm: f64,
    l_cmc_ita: f64,
    l_cmc_mlm: f64,
    l_c: f64,
    l_s: f64,
    l_extra: f64,
    total: f64,
}

fn resolve_order(cfg: &TrainSection, num_tasks: usize) -> Result<Vec<usize>, TrainError> {
    let order = cfg
        .task_order
        .clone()
        .unwrap_or_else(|| (0..num_tasks).collect());
    let mut sorted = order.clone();
    sorted.sort_unstable();
    if sorted != (0..num_tasks).collect::<Vec<_>>() {
        return Err(TrainError::BadOrder(order, num_tasks));
    }
    Ok(order)
}

/// Train one task in place; appends step metrics to `metrics_path`.
#[allow(clippy::too_many_arguments)]
fn train_task(
    model: &mut ModelState,
    strategy: &mut dyn Strategy,
    model_ref: Option<&ModelState>,
    train_pairs: &[ImageTextPair],
    ctx_pos: usize,
    task_id: usize,
    model_cfg: &ModelConfig,
    cfg: &TrainSection,
    seed: u64,
    metrics_path: &Path,
) -> Result<(), TrainError> {
    let ctx = StepCtx {
        position: ctx_pos,
        task_id,
        model_ref,
        train: cfg,
        model_cfg,
    };
    let mut strategy_rng = util::derive_rng_named(seed, "strategy", &[ctx_pos as u64, task_id as u64]);
    strategy.on_task_start(model, &ctx, train_pairs, &mut strategy_rng)?;

    let b = cfg.batch_size.max(1);
    let steps_per_epoch = train_pairs.len().div_ceil(b);
    let total_steps = steps_per_epoch * cfg.epochs_per_task;
    let mut opt = AdamW::new(model, cfg.weight_decay);
    let mut metrics = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(metrics_path)?,
    );
    let mut step: u64 = 0;

    for epoch in 0..cfg.epochs_per_task {
        let mut order: Vec<usize> = (0..train_pairs.len()).collect();
        let mut shuffle_rng =
            util::derive_rng_named(seed, "shuffle", &[ctx_pos as u64, epoch as u64]);
        util::shuffle(&mut order, &mut shuffle_rng);
        for chunk in order.chunks(b) {
            let current: Vec<&ImageTextPair> = chunk.iter().map(|&i| &train_pairs[i]).collect();
            let replayed = strategy.replay_pairs(&mut strategy_rng);
            let mut all: Vec<&ImageTextPair> = current.clone();
            all.extend(replayed.iter());

            let mut aug_rng = util::derive_rng_named(
                seed,
                "augment",
                &[ctx_pos as u64, epoch as u64, step],
            );
            let mask_seed = util::derive_rng_named(seed, "mask", &[ctx_pos as u64, epoch as u64, step])
                .gen::<u64>();
            let batch = build_step_batch(
                &all,
                model_cfg,
                cfg.mask_rate,
                mask_seed,
                cfg.augment.then_some(&mut aug_rng),
            )?;

            let mut tape = Tape::new();
            let bound = model::bind(&mut tape, model, true);
            let fwd = losses::forward_step(&mut tape, &bound, model, &batch);
            let (l_ita, l_mlm) = losses::vlp_terms(&mut tape, &fwd, &batch, cfg.temperature)?;
            let extra = strategy.per_step_loss(&mut tape, &bound, model, &fwd, &batch, &ctx)?;
            let mut total = tape.add(l_ita, l_mlm);
            for (_, id) in &extra {
                total = tape.add(total, *id);
            }

            let mut rec = StepRecord {
                step,
                task: task_id,
                l_ita: tape.scalar(l_ita),
                l_mlm: tape.scalar(l_mlm),
                l_cmc_ita: 0.0,
                l_cmc_mlm: 0.0,
                l_c: 0.0,
                l_s: 0.0,
                l_extra: 0.0,
                total: tape.scalar(total),
            };
            for (name, id) in &extra {
                let v = tape.scalar(*id);
                match *name {
                    "cmc_ita" => rec.l_cmc_ita = v,
                    "cmc_mlm" => rec.l_cmc_mlm = v,
                    "cross_tp" => rec.l_c = v,
                    "same_tp" => rec.l_s = v,
                    _ => rec.l_extra += v,
                }
            }
            for (name, v) in [
                ("ita", rec.l_ita),
                ("mlm", rec.l_mlm),
                ("cmc_ita", rec.l_cmc_ita),
                ("cmc_mlm", rec.l_cmc_mlm),
                ("cross_tp", rec.l_c),
                ("same_tp", rec.l_s),
                ("extra", rec.l_extra),
                ("total", rec.total),
            ] {
                if !v.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        position: ctx_pos,
                        step,
                        component: name.to_string(),
                    });
                }
            }

            let grads_all = tape.backward(total);
            let grads: BTreeMap<String, Arr> = model
                .params
                .iter()
                .map(|(n, a)| (n.clone(), grads_all.get_or_zeros(bound.id(n), a.shape())))
                .collect();
            let lr = cosine_lr(step as usize, total_steps, cfg.lr, cfg.lr_min);
            let delta = opt.step(&mut model.params, &grads, lr);
            strategy.post_step(&grads, &delta, model, &current, &mut strategy_rng)?;
            writeln!(metrics, "{}", serde_json::to_string(&rec)?)?;
            step += 1;
        }
    }
    metrics.flush()?;
    strategy.on_task_end(model, &ctx, train_pairs, &mut strategy_rng)?;
    Ok(())
}

/// Run a method sequentially over the stream in the configured task order:
/// per task, (re)initialize method state, train, rebalance, checkpoint, and
/// evaluate on the merged galleries of everything learned so far. Fully
/// deterministic given the seed; resumable from the last completed task.
pub fn run_sequential(
    stream: &TaskStream,
    model_cfg: &ModelConfig,
    cfg: &TrainSection,
    out_dir: &Path,
    resume: bool,
) -> Result<RunLedger, TrainError> {
    let method: Method = cfg.method.parse()?;
    if method == Method::Joint {
        return run_joint(stream, model_cfg, cfg, out_dir);
    }
    let order = resolve_order(cfg, stream.tasks.len())?;
    std::fs::create_dir_all(out_dir)?;

    let mut model_cfg = model_cfg.clone();
    if method == Method::Lucir {
        model_cfg.cosine_projection = true;
    }
    model_cfg.validate()?;

    let ledger_path = out_dir.join("ledger.json");
    let mut ledger = if resume && ledger_path.exists() {
        let loaded: RunLedger = serde_json::from_str(&std::fs::read_to_string(&ledger_path)?)?;
        if loaded.task_order != order || loaded.method != cfg.method || loaded.seed != cfg.seed {
            return Err(TrainError::BadConfig(
                "existing ledger does not match the requested run".into(),
            ));
        }
        loaded
    } else {
        RunLedger {
            method: cfg.method.clone(),
            seed: cfg.seed,
            task_order: order.clone(),
            records: Vec::new(),
        }
    };
    let completed = ledger.records.len();

    std::fs::write(
        out_dir.join("run.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "method": cfg.method,
            "seed": cfg.seed,
            "task_order": order,
            "model": model_cfg,
            "train": cfg,
        }))?,
    )?;

    let mut model = if completed > 0 {
        ModelState::load_checkpoint_expecting(
            &out_dir.join(format!("ckpt_task_{}.bin", completed - 1)),
            &model_cfg,
        )?
    } else {
        ModelState::init(model_cfg.clone(), util::splitmix64(cfg.seed ^ 0x6d6f64)).unwrap()
    };
    let mut prev: Option<ModelState> = (completed > 0).then(|| model.clone_state());

    let mut strategy = make_strategy(method, cfg, stream);
    if completed > 0 {
        strategy.load_state(out_dir, completed - 1, stream)?;
    }

    let mut timings: Vec<f64> = if completed > 0 {
        read_timings(out_dir).unwrap_or_else(|| vec![0.0; completed])
    } else {
        Vec::new()
    };

    for (pos, &task_id) in order.iter().enumerate().skip(completed) {
        let started = std::time::Instant::now();
        let train_pairs = &stream.tasks[task_id].train;
        let metrics_path = out_dir.join(format!("metrics_task_{pos}.jsonl"));
        if metrics_path.exists() {
            std::fs::remove_file(&metrics_path)?;
        }
        train_task(
            &mut model,
            strategy.as_mut(),
            prev.as_ref(),
            train_pairs,
            pos,
            task_id,
            &model_cfg,
            cfg,
            cfg.seed,
            &metrics_path,
        )?;
        let ckpt_name = format!("ckpt_task_{pos}.bin");
        model.save_checkpoint(&out_dir.join(&ckpt_name))?;
        strategy.save_state(out_dir, pos)?;

        let learned: Vec<usize> = order[..=pos].to_vec();
        let report = eval::evaluate_checkpoint(&model, stream, &learned, pos)?;
        ledger.records.push(TaskRecord {
            position: pos,
            task_id,
            checkpoint: ckpt_name,
            report,
        });
        std::fs::write(&ledger_path, serde_json::to_string_pretty(&ledger)?)?;
        timings.push(started.elapsed().as_secs_f64());
        write_timings(out_dir, &timings)?;
        prev = Some(model.clone_state());
    }
    Ok(ledger)
}

/// Joint upper bound: one model trained on the union of all task data for
/// the same total number of optimization steps as a sequential run, under a
/// single cosine schedule, evaluated once on the full galleries.
pub fn run_joint(
    stream: &TaskStream,
    model_cfg: &ModelConfig,
    cfg: &TrainSection,
    out_dir: &Path,
) -> Result<RunLedger, TrainError> {
    let order = resolve_order(cfg, stream.tasks.len())?;
    std::fs::create_dir_all(out_dir)?;
    let model_cfg = model_cfg.clone();
    model_cfg.validate()?;
    std::fs::write(
        out_dir.join("run.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "method": cfg.method,
            "seed": cfg.seed,
            "task_order": order,
            "model": model_cfg,
            "train": cfg,
        }))?,
    )?;

    let union: Vec<&ImageTextPair> = order
        .iter()
        .flat_map(|&t| stream.tasks[t].train.iter())
        .collect();
    let b = cfg.batch_size.max(1);
    let total_steps: usize = order
        .iter()
        .map(|&t| stream.tasks[t].train.len().div_ceil(b) * cfg.epochs_per_task)
        .sum();

    let mut model = ModelState::init(model_cfg.clone(), util::splitmix64(cfg.seed ^ 0x6d6f64)).unwrap();
    let mut opt = AdamW::new(&model, cfg.weight_decay);
    let metrics_path = out_dir.join("metrics_task_0.jsonl");
    if metrics_path.exists() {
        std::fs::remove_file(&metrics_path)?;
    }
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);

    let started = std::time::Instant::now();
    let mut step: u64 = 0;
    let mut pass = 0u64;
    let mut order_idx: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    while (step as usize) < total_steps {
        if cursor + 1 > order_idx.len() {
            order_idx = (0..union.len()).collect();
            let mut rng = util::derive_rng_named(cfg.seed, "shuffle", &[0, pass]);
            util::shuffle(&mut order_idx, &mut rng);
            cursor = 0;
            pass += 1;
        }
        let end = (cursor + b).min(order_idx.len());
        let pairs: Vec<&ImageTextPair> = order_idx[cursor..end].iter().map(|&i| union[i]).collect();
        cursor = end;

        let mut aug_rng = util::derive_rng_named(cfg.seed, "augment", &[0, pass, step]);
        let mask_seed = util::derive_rng_named(cfg.seed, "mask", &[0, pass, step]).gen::<u64>();
        let batch = build_step_batch(
            &pairs,
            &model_cfg,
            cfg.mask_rate,
            mask_seed,
            cfg.augment.then_some(&mut aug_rng),
        )?;
        let (vlp, grads) = losses::vlp_step(&model, &batch, cfg.temperature)?;
        if !vlp.total.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                position: 0,
                step,
                component: "total".into(),
            });
        }
        let lr = cosine_lr(step as usize, total_steps, cfg.lr, cfg.lr_min);
        opt.step(&mut model.params, &grads, lr);
        let rec = StepRecord {
            step,
            task: usize::MAX,
            l_ita: vlp.ita,
            l_mlm: vlp.mlm,
            l_cmc_ita: 0.0,
            l_cmc_mlm: 0.0,
            l_c: 0.0,
            l_s: 0.0,
            l_extra: 0.0,
            total: vlp.total,
        };
        writeln!(metrics, "{}", serde_json::to_string(&rec)?)?;
        step += 1;
    }
    metrics.flush()?;

    let last_pos = order.len() - 1;
    let ckpt_name = format!("ckpt_task_{last_pos}.bin");
    model.save_checkpoint(&out_dir.join(&ckpt_name))?;
    let report = eval::evaluate_checkpoint(&model, stream, &order, last_pos)?;
    let ledger = RunLedger {
        method: cfg.method.clone(),
        seed: cfg.seed,
        task_order: order.clone(),
        records: vec![TaskRecord {
            position: last_pos,
            task_id: *order.last().unwrap(),
            checkpoint: ckpt_name,
            report,
        }],
    };
    std::fs::write(
        out_dir.join("ledger.json"),
        serde_json::to_string_pretty(&ledger)?,
    )?;
    write_timings(out_dir, &[started.elapsed().as_secs_f64()])?;
    Ok(ledger)
}

fn write_timings(dir: &Path, timings: &[f64]) -> Result<(), TrainError> {
    std::fs::write(
        dir.join("timing.json"),
        serde_json::to_string_pretty(&timings)?,
    )?;
    Ok(())
}

fn read_timings(dir: &Path) -> Option<Vec<f64>> {
    let text = std::fs::read_to_string(dir.join("timing.json")).ok()?;
    serde_json::from_str(&text).ok()
}

// ── studies ────────────────────────────────────────────────────────────

/// Kendall rank correlation between two score lists (ties contribute 0).
pub fn kendall_tau(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    for i in 0..n {
        for j in (i + 1)..n {
            let x = (a[i] - a[j]).signum();
            let y = (b[i] - b[j]).signum();
            let s = x * y;
            if s > 0.0 {
                concordant += 1;
            } else if s < 0.0 {
                discordant += 1;
            }
        }
    }
    (concordant - discordant) as f64 / (n * (n - 1) / 2) as f64
}

pub struct OrderStudyResult {
    /// `ledgers[order_index][method_index]`
    pub ledgers: Vec<Vec<RunLedger>>,
    pub methods: Vec<Method>,
    pub orders: Vec<Vec<usize>>,
    /// Rank correlation of each order's final-Rm method ranking against the
    /// first order's.
    pub tau_vs_first: Vec<f64>,
}

/// Run every method under every task order and summarize how stable the
/// method ranking is across orders.
pub fn run_order_study(
    stream: &TaskStream,
    model_cfg: &ModelConfig,
    cfg: &TrainSection,
    methods: &[Method],
    orders: &[Vec<usize>],
    out_root: &Path,
) -> Result<OrderStudyResult, TrainError> {
    if orders.is_empty() {
        return Err(TrainError::BadConfig("order study needs orders".into()));
    }
    let mut ledgers = Vec::new();
    for (oi, order) in orders.iter().enumerate() {
        let mut row = Vec::new();
        for method in methods {
            let mut c = cfg.clone();
            c.method = method.name().to_string();
            c.task_order = Some(order.clone());
            let dir = out_root.join(format!("order{oi}_{}", method.name()));
            row.push(run_sequential(stream, model_cfg, &c, &dir, false)?);
        }
        ledgers.push(row);
    }
    let rm_rows: Vec<Vec<f64>> = ledgers
        .iter()
        .map(|row| {
            row.iter()
                .map(|l| l.final_report().map(|r| r.rm).unwrap_or(0.0))
                .collect()
        })
        .collect();
    let tau_vs_first: Vec<f64> = rm_rows
        .iter()
        .map(|row| kendall_tau(&rm_rows[0], row))
        .collect();
    let result = OrderStudyResult {
        ledgers,
        methods: methods.to_vec(),
        orders: orders.to_vec(),
        tau_vs_first,
    };
    let mut summary = String::new();
    summary.push_str("order-study final Rm per method\n");
    for (oi, order) in result.orders.iter().enumerate() {
        summary.push_str(&format!("order {oi} {order:?} (tau vs order 0: {:.3})\n", result.tau_vs_first[oi]));
        for (mi, m) in result.methods.iter().enumerate() {
            summary.push_str(&format!("  {:8} Rm {:6.2}\n", m.name(), rm_rows[oi][mi]));
        }
    }
    std::fs::create_dir_all(out_root)?;
    std::fs::write(out_root.join("order_study.txt"), summary)?;
    Ok(result)
}

pub struct SweepRow {
    pub momentum: f64,
    pub final_rm: f64,
    pub ledger: RunLedger,
}

/// One method run per momentum value, summarizing final Rm against `m`.
pub fn run_momentum_sweep(
    stream: &TaskStream,
    model_cfg: &ModelConfig,
    cfg: &TrainSection,
    m_values: &[f64],
    out_root: &Path,
) -> Result<Vec<SweepRow>, TrainError> {
    if m_values.is_empty() {
        return Err(TrainError::EmptySweep);
    }
    let mut rows = Vec::new();
    for (i, &m) in m_values.iter().enumerate() {
        let mut c = cfg.clone();
        c.method = Method::Ctp.name().to_string();
        c.momentum = m;
        let dir = out_root.join(format!("m{i}"));
        let ledger = run_sequential(stream, model_cfg, &c, &dir, false)?;
        let final_rm = ledger.final_report().map(|r| r.rm).unwrap_or(0.0);
        rows.push(SweepRow {
            momentum: m,
            final_rm,
            ledger,
        });
    }
    std::fs::create_dir_all(out_root)?;
    let mut summary = String::from("momentum  final_Rm\n");
    for row in &rows {
        summary.push_str(&format!("{:8.3}  {:8.2}\n", row.momentum, row.final_rm));
    }
    std::fs::write(out_root.join("momentum_sweep.txt"), summary)?;
    Ok(rows)
}

// ── reports ────────────────────────────────────────────────────────────

fn table_header() -> String {
    format!(
        "{:<10} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>7} {:>7} {:>7}\n",
        "row", "TR@1", "TR@5", "TR@10", "IR@1", "IR@5", "IR@10", "Rm", "mAP@1", "mAP@5", "mAP@10"
    )
}

fn table_row(label: &str, r: &RetrievalReport) -> String {
    format!(
        "{:<10} {:>6.2} {:>6.2} {:>6.2} {:>6.2} {:>6.2} {:>6.2} {:>6.2} {:>7.2} {:>7.2} {:>7.2}\n",
        label, r.tr1, r.tr5, r.tr10, r.ir1, r.ir5, r.ir10, r.rm, r.map1, r.map5, r.map10
    )
}

fn svg_curves(series: &[(String, Vec<(f64, f64)>)], title: &str) -> String {
    let (w, h, pad) = (640.0, 400.0, 48.0);
    let mut all_y: Vec<f64> = series.iter().flat_map(|(_, s)| s.iter().map(|p| p.1)).collect();
    all_y.push(0.0);
    let ymax = all_y.iter().copied().fold(1.0f64, f64::max) * 1.05;
    let xmax = series
        .iter()
        .flat_map(|(_, s)| s.iter().map(|p| p.0))
        .fold(1.0f64, f64::max);
    let sx = |x: f64| pad + (w - 2.0 * pad) * x / xmax.max(1.0);
    let sy = |y: f64| h - pad - (h - 2.0 * pad) * y / ymax;
    let palette = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2"];
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n<text x=\"{}\" y=\"24\" font-size=\"14\">{}</text>\n",
        pad, title
    );
    svg.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        pad, h - pad, w - pad, h - pad, pad, pad, pad, h - pad
    ));
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = palette[i % palette.len()];
        let path: Vec<String> = pts.iter().map(|(x, y)| format!("{:.1},{:.1}", sx(*x), sy(*y))).collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"2\" points=\"{}\"/>\n",
            color,
            path.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{}\">{}</text>\n",
            w - pad + 4.0 - 40.0,
            24.0 + 14.0 * i as f64,
            color,
            name
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Write a single run's structured records, a per-task table, and
/// performance-curve files (CSV + SVG).
pub fn emit_report(ledger: &RunLedger, out_dir: &Path) -> Result<(), TrainError> {
    if ledger.records.is_empty() {
        return Err(TrainError::EmptyLedger);
    }
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(ledger)?,
    )?;
    let mut table = table_header();
    for rec in &ledger.records {
        table.push_str(&table_row(&format!("task{}", rec.position), &rec.report));
    }
    std::fs::write(out_dir.join("table.txt"), table)?;

    let curves_dir = out_dir.join("curves");
    std::fs::create_dir_all(&curves_dir)?;
    let mut csv = String::from("position,task_id,rm,map1,map5,map10\n");
    for rec in &ledger.records {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            rec.position, rec.task_id, rec.report.rm, rec.report.map1, rec.report.map5, rec.report.map10
        ));
    }
    std::fs::write(curves_dir.join(format!("{}.csv", ledger.method)), csv)?;
    let rm_series = vec![(
        ledger.method.clone(),
        ledger
            .records
            .iter()
            .map(|r| (r.position as f64, r.report.rm))
            .collect::<Vec<_>>(),
    )];
    std::fs::write(
        curves_dir.join(format!("{}_rm.svg", ledger.method)),
        svg_curves(&rm_series, "Rm over learned tasks"),
    )?;
    Ok(())
}

/// Write a method-comparison table (final-task rows) and joint curves for a
/// set of runs.
pub fn emit_comparison(ledgers: &[RunLedger], out_dir: &Path) -> Result<(), TrainError> {
    if ledgers.is_empty() || ledgers.iter().any(|l| l.records.is_empty()) {
        return Err(TrainError::EmptyLedger);
    }
    std::fs::create_dir_all(out_dir)?;
    let mut table = table_header();
    for l in ledgers {
        table.push_str(&table_row(&l.method, l.final_report().unwrap()));
    }
    std::fs::write(out_dir.join("comparison.txt"), table)?;
    let series: Vec<(String, Vec<(f64, f64)>)> = ledgers
        .iter()
        .map(|l| {
            (
                l.method.clone(),
                l.records
                    .iter()
                    .map(|r| (r.position as f64, r.report.rm))
                    .collect(),
            )
        })
        .collect();
    std::fs::write(
        out_dir.join("rm_curves.svg"),
        svg_curves(&series, "Rm over learned tasks"),
    )?;
    Ok(())
}

/// Convenience: path of the manifest inside a data directory (or the file
/// itself when given directly).
pub fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.jsonl")
    } else {
        data.to_path_buf()
    }
}
