//! RMSprop training with exponential learning-rate decay, validation-based
//! early stopping and an optional second phase on longer chunks.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayViewMutD, ArrayViewD, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attractor::{self, LossNorm, MaskHead, MembershipTensor, Objective, SalienceWeight};
use crate::data::{Chunk, Dataset, Split};
use crate::net::{self, Model, NetConfig, OutputActivation, ParamGrads, Params};
use crate::signal::NormStats;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Curriculum {
    pub chunk_len: usize,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub rms_decay: f64,
    pub rms_eps: f64,
    /// Chunks per optimizer step.
    pub batch: usize,
    pub head: MaskHead,
    pub threshold_pct: u32,
    pub curriculum: Option<Curriculum>,
    pub loss_norm: LossNorm,
    pub flow_through_attractor: bool,
    pub n_layers: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub activation: OutputActivation,
    pub seed: u64,
    /// Worker threads for per-chunk forward/backward; 1 is strictly
    /// sequential, 0 uses all cores. Results do not depend on it.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let net = NetConfig::desk();
        Self {
            lr_start: 1e-4,
            lr_end: 3e-6,
            max_epochs: 30,
            patience: 10,
            rms_decay: 0.9,
            rms_eps: 1e-8,
            batch: 8,
            head: MaskHead::Sigmoid,
            threshold_pct: 0,
            curriculum: None,
            loss_norm: LossNorm::Mean,
            flow_through_attractor: true,
            n_layers: net.n_layers,
            hidden: net.hidden,
            embed_dim: net.embed_dim,
            activation: net.activation,
            seed: 0,
            threads: 0,
        }
    }
}

const CURRICULUM_DEFAULT: Curriculum = Curriculum {
    chunk_len: 400,
    epochs: 10,
};

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_start > self.lr_end && self.lr_end > 0.0) {
            return Err(Error::invalid(format!(
                "need lr_start > lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        if self.patience == 0 || self.max_epochs == 0 || self.batch == 0 {
            return Err(Error::invalid("patience, max_epochs and batch must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.rms_decay) || !(self.rms_eps > 0.0) {
            return Err(Error::invalid("rms_decay must be in [0, 1) and rms_eps positive"));
        }
        if self.threshold_pct >= 100 {
            return Err(Error::invalid("threshold_pct must be below 100"));
        }
        if let Some(c) = self.curriculum {
            if c.chunk_len == 0 || c.epochs == 0 {
                return Err(Error::invalid("curriculum chunk_len and epochs must be positive"));
            }
        }
        Ok(())
    }

    pub fn net_config(&self, n_freq: usize) -> NetConfig {
        NetConfig {
            n_layers: self.n_layers,
            hidden: self.hidden,
            embed_dim: self.embed_dim,
            n_freq,
            activation: self.activation,
        }
    }

    pub fn objective(&self) -> Objective {
        Objective {
            head: self.head,
            norm: self.loss_norm,
            flow_through_attractor: self.flow_through_attractor,
        }
    }

    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are
    /// errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            cfg.set(line).map_err(|msg| Error::Config { line: i + 1, msg })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, line: &str) -> std::result::Result<(), String> {
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| format!("expected key=value, got {line:?}"))?;
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
        }
        fn flag(key: &str, v: &str) -> std::result::Result<bool, String> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(format!("{key}: expected true/false, got {v:?}")),
            }
        }
        match key {
            "lr_start" => self.lr_start = num(key, value)?,
            "lr_end" => self.lr_end = num(key, value)?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "rms_decay" => self.rms_decay = num(key, value)?,
            "rms_eps" => self.rms_eps = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "head" => self.head = value.parse().map_err(|e: Error| e.to_string())?,
            "threshold_pct" => self.threshold_pct = num(key, value)?,
            "curriculum" => {
                self.curriculum = if flag(key, value)? {
                    Some(self.curriculum.unwrap_or(CURRICULUM_DEFAULT))
                } else {
                    None
                }
            }
            "curriculum_chunk_len" => {
                let c = self.curriculum.get_or_insert(CURRICULUM_DEFAULT);
                c.chunk_len = num(key, value)?;
            }
            "curriculum_epochs" => {
                let c = self.curriculum.get_or_insert(CURRICULUM_DEFAULT);
                c.epochs = num(key, value)?;
            }
            "loss_norm" => {
                self.loss_norm = match value {
                    "mean" => LossNorm::Mean,
                    "sum" => LossNorm::Sum,
                    _ => return Err(format!("loss_norm: expected mean or sum, got {value:?}")),
                }
            }
            "flow_through_attractor" => self.flow_through_attractor = flag(key, value)?,
            "n_layers" => self.n_layers = num(key, value)?,
            "hidden" => self.hidden = num(key, value)?,
            "embed_dim" => self.embed_dim = num(key, value)?,
            "activation" => self.activation = value.parse().map_err(|e: Error| e.to_string())?,
            "seed" => self.seed = num(key, value)?,
            "threads" => self.threads = num(key, value)?,
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    /// Every field, defaults included, in the format [`TrainConfig::parse`]
    /// reads.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "lr_start = {}", self.lr_start);
        let _ = writeln!(s, "lr_end = {}", self.lr_end);
        let _ = writeln!(s, "max_epochs = {}", self.max_epochs);
        let _ = writeln!(s, "patience = {}", self.patience);
        let _ = writeln!(s, "rms_decay = {}", self.rms_decay);
        let _ = writeln!(s, "rms_eps = {}", self.rms_eps);
        let _ = writeln!(s, "batch = {}", self.batch);
        let _ = writeln!(s, "head = {}", self.head);
        let _ = writeln!(s, "threshold_pct = {}", self.threshold_pct);
        match self.curriculum {
            Some(c) => {
                let _ = writeln!(s, "curriculum = true");
                let _ = writeln!(s, "curriculum_chunk_len = {}", c.chunk_len);
                let _ = writeln!(s, "curriculum_epochs = {}", c.epochs);
            }
            None => {
                let _ = writeln!(s, "curriculum = false");
            }
        }
        let norm = match self.loss_norm {
            LossNorm::Mean => "mean",
            LossNorm::Sum => "sum",
        };
        let _ = writeln!(s, "loss_norm = {norm}");
        let _ = writeln!(s, "flow_through_attractor = {}", self.flow_through_attractor);
        let _ = writeln!(s, "n_layers = {}", self.n_layers);
        let _ = writeln!(s, "hidden = {}", self.hidden);
        let _ = writeln!(s, "embed_dim = {}", self.embed_dim);
        let _ = writeln!(s, "activation = {}", self.activation);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "threads = {}", self.threads);
        s
    }
}

/// Geometric interpolation from `lr_start` at epoch 0 to `lr_end` at epoch
/// `max_epochs - 1`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch == 0 || cfg.max_epochs <= 1 {
        return cfg.lr_start;
    }
    if epoch + 1 >= cfg.max_epochs {
        return cfg.lr_end;
    }
    let frac = epoch as f64 / (cfg.max_epochs - 1) as f64;
    cfg.lr_start * (cfg.lr_end / cfg.lr_start).powf(frac)
}

/// Running mean-square accumulators, one per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub acc: Params,
    pub step: u64,
}

impl OptState {
    pub fn new(cfg: &NetConfig) -> Self {
        Self {
            acc: Params::zeros(cfg),
            step: 0,
        }
    }
}

/// `acc <- rho acc + (1 - rho) g^2;  p <- p - lr g / sqrt(acc + eps)`.
pub fn rmsprop_update(
    mut p: ArrayViewMutD<f64>,
    g: ArrayViewD<f64>,
    mut acc: ArrayViewMutD<f64>,
    lr: f64,
    rho: f64,
    eps: f64,
) {
    Zip::from(&mut p).and(&g).and(&mut acc).for_each(|p, &g, a| {
        *a = rho * *a + (1.0 - rho) * g * g;
        *p -= lr * g / (*a + eps).sqrt();
    });
}

pub fn rmsprop_step(p: &mut Params, g: &ParamGrads, o: &mut OptState, lr: f64, rho: f64, eps: f64) -> Result<()> {
    if !g.is_finite() {
        return Err(Error::Divergence("non-finite gradient".into()));
    }
    for (((_, pv), (_, gv)), (_, av)) in p.named_mut().into_iter().zip(g.named()).zip(o.acc.named_mut()) {
        rmsprop_update(pv, gv, av, lr, rho, eps);
    }
    o.step += 1;
    Ok(())
}

/// Tracks the best validation loss and signals when `patience` epochs have
/// passed without a decrease.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    seen: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            seen: 0,
        }
    }

    /// Records one epoch's validation loss; returns `(improved, stop)`.
    pub fn observe(&mut self, val_loss: f64) -> (bool, bool) {
        self.seen += 1;
        let improved = val_loss < self.best;
        if improved {
            self.best = val_loss;
            self.best_epoch = self.seen;
        }
        (improved, self.seen - self.best_epoch >= self.patience)
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based, counted across phases.
    pub epoch: usize,
    pub phase: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub initial_train_loss: f64,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    /// Chunks left out because a source had no salient bins.
    pub skipped_chunks: usize,
    /// Set when training stopped on a non-finite gradient or activation.
    pub diverged: Option<String>,
}

impl TrainOutcome {
    pub fn history_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,lr\n");
        for r in &self.history {
            let _ = writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.lr);
        }
        s
    }

    pub fn final_train_loss(&self) -> f64 {
        self.history.last().map_or(self.initial_train_loss, |r| r.train_loss)
    }
}

/// A chunk flattened into bin order, with its salience weight.
pub struct Prepared {
    pub features: Array2<f64>,
    pub x: Array1<f64>,
    pub s: Array2<f64>,
    pub y: MembershipTensor,
    pub w: SalienceWeight,
}

/// Flattens chunks and drops the ones with a source that keeps no bins
/// under the salience threshold. Returns the kept chunks and the number
/// dropped.
pub fn prepare(chunks: &[Chunk], threshold_pct: u32) -> Result<(Vec<Prepared>, usize)> {
    let mut kept = Vec::with_capacity(chunks.len());
    let mut skipped = 0;
    for ch in chunks {
        let w = SalienceWeight::from_log_magnitude(ch.mixture_log_bins().view(), threshold_pct)?;
        let y = ch.membership.clone();
        let ok = (0..y.n_sources()).all(|c| y.y.column(c).iter().zip(&w.w).any(|(a, b)| a * b > 0.0));
        if !ok {
            skipped += 1;
            continue;
        }
        kept.push(Prepared {
            features: ch.features.values.clone(),
            x: ch.mixture_bins(),
            s: ch.source_bins(),
            y,
            w,
        });
    }
    Ok((kept, skipped))
}

fn chunk_loss(p: &Params, cfg: &NetConfig, obj: &Objective, ch: &Prepared) -> Result<f64> {
    let (v, _) = net::forward_values(p, cfg, ch.features.view())?;
    let a = attractor::estimate_attractors(v.v.view(), &ch.y, &ch.w)?;
    let m = attractor::masks(v.v.view(), &a, obj.head)?;
    attractor::loss(ch.x.view(), ch.s.view(), m.view(), obj.norm)
}

fn chunk_grad(p: &Params, cfg: &NetConfig, obj: &Objective, ch: &Prepared) -> Result<(f64, ParamGrads)> {
    let (v, tape) = net::forward_values(p, cfg, ch.features.view())?;
    let lg = attractor::loss_backward(ch.x.view(), ch.s.view(), v.v.view(), &ch.y, &ch.w, obj)?;
    let g = net::backward(p, cfg, &tape, lg.grad_v.view())?;
    Ok((lg.loss, g))
}

/// Mean reconstruction loss over a set of chunks.
pub fn evaluate(p: &Params, cfg: &NetConfig, obj: &Objective, chunks: &[Prepared]) -> Result<f64> {
    let losses: Vec<f64> = chunks
        .par_iter()
        .map(|ch| chunk_loss(p, cfg, obj, ch))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Sum of per-chunk losses and gradients over one batch, reduced in chunk
/// order.
fn batch_grad(p: &Params, cfg: &NetConfig, obj: &Objective, batch: &[&Prepared]) -> Result<(f64, ParamGrads)> {
    let parts: Vec<(f64, ParamGrads)> = batch
        .par_iter()
        .map(|ch| chunk_grad(p, cfg, obj, ch))
        .collect::<Result<_>>()?;
    let mut iter = parts.into_iter();
    let (mut loss, mut grad) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        grad.add_assign(&g);
    }
    Ok((loss, grad))
}

struct Phase<'a> {
    train: &'a [Prepared],
    valid: &'a [Prepared],
    epochs: usize,
    phase: usize,
}

/// One training phase from `params`; returns the best parameters seen
/// (including the starting point) and whether training diverged.
fn run_phase(
    params: Params,
    net_cfg: &NetConfig,
    cfg: &TrainConfig,
    phase: Phase<'_>,
    rng: &mut ChaCha8Rng,
    history: &mut Vec<EpochRecord>,
) -> Result<(Params, f64, Option<String>)> {
    let obj = cfg.objective();
    let mut params = params;
    let mut best = params.clone();
    let mut stopper = EarlyStopping::new(cfg.patience);
    stopper.observe(evaluate(&params, net_cfg, &obj, phase.valid)?);
    let mut opt = OptState::new(net_cfg);
    let sched = TrainConfig {
        max_epochs: phase.epochs,
        ..cfg.clone()
    };
    let mut order: Vec<usize> = (0..phase.train.len()).collect();
    for e in 0..phase.epochs {
        let lr = lr_schedule(e, &sched);
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for idx in order.chunks(cfg.batch) {
            let batch: Vec<&Prepared> = idx.iter().map(|&i| &phase.train[i]).collect();
            let step = batch_grad(&params, net_cfg, &obj, &batch).and_then(|(loss, mut g)| {
                g.scale(1.0 / batch.len() as f64);
                rmsprop_step(&mut params, &g, &mut opt, lr, cfg.rms_decay, cfg.rms_eps)?;
                Ok(loss)
            });
            match step {
                Ok(loss) => epoch_loss += loss,
                Err(Error::Divergence(msg)) => return Ok((best, stopper.best(), Some(msg))),
                Err(e) => return Err(e),
            }
            params.round_to_f32();
        }
        let val = match evaluate(&params, net_cfg, &obj, phase.valid) {
            Ok(v) => v,
            Err(Error::Divergence(msg)) => return Ok((best, stopper.best(), Some(msg))),
            Err(e) => return Err(e),
        };
        history.push(EpochRecord {
            epoch: history.len() + 1,
            phase: phase.phase,
            train_loss: epoch_loss / phase.train.len() as f64,
            val_loss: val,
            lr,
        });
        let (improved, stop) = stopper.observe(val);
        if improved {
            best = params.clone();
        }
        if stop {
            break;
        }
    }
    Ok((best, stopper.best(), None))
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Trains on in-memory chunks. `long` holds the curriculum-length chunks
/// (train, valid) when a curriculum phase is configured.
pub fn train(
    train_chunks: &[Chunk],
    valid_chunks: &[Chunk],
    long: Option<(&[Chunk], &[Chunk])>,
    stats: &NormStats,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_chunks.is_empty() || valid_chunks.is_empty() {
        return Err(Error::invalid("training and validation splits must be non-empty"));
    }
    with_threads(cfg.threads, || train_inner(train_chunks, valid_chunks, long, stats, cfg))?
}

fn train_inner(
    train_chunks: &[Chunk],
    valid_chunks: &[Chunk],
    long: Option<(&[Chunk], &[Chunk])>,
    stats: &NormStats,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let net_cfg = cfg.net_config(train_chunks[0].n_freq());
    let (train_set, skip_t) = prepare(train_chunks, cfg.threshold_pct)?;
    let (valid_set, skip_v) = prepare(valid_chunks, cfg.threshold_pct)?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Error::invalid("no usable chunks left after the salience filter"));
    }
    let obj = cfg.objective();
    let params = net::init_params(&net_cfg, cfg.seed)?;
    let initial_train_loss = evaluate(&params, &net_cfg, &obj, &train_set)?;
    let initial_val_loss = evaluate(&params, &net_cfg, &obj, &valid_set)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7EA1_4E55);
    let mut history = Vec::new();
    let (mut best, mut best_val, mut diverged) = run_phase(
        params,
        &net_cfg,
        cfg,
        Phase {
            train: &train_set,
            valid: &valid_set,
            epochs: cfg.max_epochs,
            phase: 1,
        },
        &mut rng,
        &mut history,
    )?;
    let mut skipped = skip_t + skip_v;

    if let (Some(cur), None) = (cfg.curriculum, &diverged) {
        let (lt, lv) = long.ok_or_else(|| Error::invalid("curriculum configured without long chunks"))?;
        let (lt, s1) = prepare(lt, cfg.threshold_pct)?;
        let (lv, s2) = prepare(lv, cfg.threshold_pct)?;
        skipped += s1 + s2;
        if lt.is_empty() || lv.is_empty() {
            return Err(Error::invalid("no usable curriculum chunks"));
        }
        let phase2 = run_phase(
            best,
            &net_cfg,
            cfg,
            Phase {
                train: &lt,
                valid: &lv,
                epochs: cur.epochs,
                phase: 2,
            },
            &mut rng,
            &mut history,
        )?;
        (best, best_val, diverged) = phase2;
    }

    Ok(TrainOutcome {
        model: Model {
            cfg: net_cfg,
            params: best,
            stats: stats.clone(),
            head: cfg.head,
            threshold_pct: cfg.threshold_pct,
        },
        history,
        initial_train_loss,
        initial_val_loss,
        best_val_loss: best_val,
        skipped_chunks: skipped,
        diverged,
    })
}

/// Trains on a dataset directory, cutting curriculum chunks from its WAVs.
pub fn train_dataset(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let chunk_len = ds.manifest.config.chunk_len;
    let train_chunks = ds.chunks(Split::Train, chunk_len)?;
    let valid_chunks = ds.chunks(Split::Valid, chunk_len)?;
    let long = match cfg.curriculum {
        Some(c) => Some((ds.chunks(Split::Train, c.chunk_len)?, ds.chunks(Split::Valid, c.chunk_len)?)),
        None => None,
    };
    train(
        &train_chunks,
        &valid_chunks,
        long.as_ref().map(|(a, b)| (a.as_slice(), b.as_slice())),
        &ds.stats,
        cfg,
    )
}

pub fn write_history(outcome: &TrainOutcome, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, outcome.history_csv()).map_err(|e| Error::io(path, e))
}
