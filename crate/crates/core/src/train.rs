//! Contrastive fine-tuning: AdamW, polynomial warm-up schedule, per-epoch
//! evaluation and best-checkpoint selection.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{build_pair_instances, DatasetSplit, ImageRecord, PairInstance};
use crate::encoder::checkpoint::save_checkpoint;
use crate::encoder::params::{Grads, ParamStore};
use crate::encoder::{ArchKind, VisionEncoder};
use crate::error::{ReidError, Result};
use crate::eval::{evaluate, EmbeddingSet, EvalOptions, EvalReport};
use crate::images::ImageStore;
use crate::loss::{dual_view_forward, LogitStats, LossConfig};
use crate::par;
use crate::preprocess::{mirror, normalize, NormalizedImage, PreprocessConfig};
use crate::sampler::{sample_epoch, Batch, SamplerConfig};

pub const TRANSFORMER_LR: (f64, f64) = (4e-5, 4e-6);
pub const CONVOLUTIONAL_LR: (f64, f64) = (4e-4, 4e-5);

/// Linear warm-up from 0 to `lr_max` over `warmup_steps`, then polynomial
/// decay to `lr_min` at `total_steps`.
pub fn poly_warmup_lr(
    step: usize,
    total_steps: usize,
    warmup_steps: usize,
    lr_max: f64,
    lr_min: f64,
    power: f64,
) -> Result<f64> {
    if !(warmup_steps > 0 && warmup_steps < total_steps) {
        return Err(ReidError::Invalid(format!(
            "need 0 < warmup_steps ({warmup_steps}) < total_steps ({total_steps})"
        )));
    }
    if step > total_steps {
        return Err(ReidError::Invalid(format!("step {step} beyond total_steps {total_steps}")));
    }
    if !(lr_min > 0.0 && lr_min <= lr_max && power > 0.0) {
        return Err(ReidError::Invalid(format!(
            "need 0 < lr_min ≤ lr_max and power > 0, got {lr_min}, {lr_max}, {power}"
        )));
    }
    if step <= warmup_steps {
        return Ok(lr_max * step as f64 / warmup_steps as f64);
    }
    let t = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(lr_min + (lr_max - lr_min) * (1.0 - t).powf(power))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay. Decay applies to matrices and kernels
/// (ndim ≥ 2) only; biases, norms and embeddings are left undecayed.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    decay: Vec<bool>,
    t: u64,
}

impl AdamW {
    pub fn new(params: &ParamStore, cfg: AdamWConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.data.len()]).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            decay: params.iter().map(|(_, t)| t.shape.len() >= 2).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for id in 0..params.len() {
            let decay = if self.decay[id] { lr * c.weight_decay } else { 0.0 };
            let p = &mut params.get_mut(id).data;
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            for (((p, &g), m), v) in p.iter_mut().zip(grads.get(id)).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                *p -= decay * *p;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
            }
        }
    }
}

/// Adam state for the log-space inverse temperature.
#[derive(Debug, Clone)]
struct ScalarAdam {
    m: f64,
    v: f64,
    t: i32,
}

impl ScalarAdam {
    fn step(&mut self, x: &mut f64, g: f64, lr: f64, c: &AdamWConfig) {
        self.t += 1;
        self.m = c.beta1 * self.m + (1.0 - c.beta1) * g;
        self.v = c.beta2 * self.v + (1.0 - c.beta2) * g * g;
        let mh = self.m / (1.0 - c.beta1.powi(self.t));
        let vh = self.v / (1.0 - c.beta2.powi(self.t));
        *x -= lr * mh / (vh.sqrt() + c.eps);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    MapNoRerank,
    MapRerank,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalEvery {
    Epoch,
    Steps(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// `None` picks the default for the encoder's architecture kind.
    pub lr_max: Option<f64>,
    pub lr_min: Option<f64>,
    pub warmup_epochs: f64,
    pub poly_power: f64,
    pub adamw: AdamWConfig,
    pub flip_probability: f64,
    pub seed: u64,
    pub eval_every: EvalEvery,
    pub resample_pairs_each_epoch: bool,
    pub selection_metric: SelectionMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 16,
            lr_max: None,
            lr_min: None,
            warmup_epochs: 2.0,
            poly_power: 1.0,
            adamw: AdamWConfig::default(),
            flip_probability: 0.5,
            seed: 0,
            eval_every: EvalEvery::Epoch,
            resample_pairs_each_epoch: true,
            selection_metric: SelectionMetric::MapNoRerank,
        }
    }
}

impl TrainConfig {
    pub fn learning_rates(&self, kind: ArchKind) -> (f64, f64) {
        let (hi, lo) = match kind {
            ArchKind::Transformer => TRANSFORMER_LR,
            ArchKind::Convolutional => CONVOLUTIONAL_LR,
        };
        (self.lr_max.unwrap_or(hi), self.lr_min.unwrap_or(lo))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ReidError::Config(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if !(self.warmup_epochs > 0.0 && self.warmup_epochs < self.epochs as f64) {
            return bad("warmup_epochs must be in (0, epochs)");
        }
        if !(self.poly_power > 0.0) {
            return bad("poly_power must be positive");
        }
        if let (Some(hi), Some(lo)) = (self.lr_max, self.lr_min) {
            if !(lo > 0.0 && lo <= hi) {
                return bad("need 0 < lr_min ≤ lr_max");
            }
        }
        if self.lr_max.is_some_and(|x| !(x > 0.0)) || self.lr_min.is_some_and(|x| !(x > 0.0)) {
            return bad("learning rates must be positive");
        }
        if !(self.adamw.weight_decay >= 0.0) {
            return bad("weight_decay must be nonnegative");
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return bad("flip_probability must be in [0,1]");
        }
        if self.eval_every == EvalEvery::Steps(0) {
            return bad("eval_every steps must be positive");
        }
        SamplerConfig {
            batch_size: self.batch_size,
            seed: self.seed,
            drop_last: true,
        }
        .validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub logit_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub step: usize,
    pub map_no_rerank: f64,
    pub map_rerank: Option<f64>,
    pub rank1: Option<f64>,
    pub rank5: Option<f64>,
    pub checkpoint: Option<String>,
}

impl EvalRecord {
    pub fn metric(&self, m: SelectionMetric) -> Option<f64> {
        match m {
            SelectionMetric::MapNoRerank => Some(self.map_no_rerank),
            SelectionMetric::MapRerank => self.map_rerank,
        }
    }
}

/// One line of `history.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum HistoryEvent {
    /// First line of every log.
    Run { config_hash: Option<String> },
    Step(StepRecord),
    Eval(EvalRecord),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    /// Index into `evals` of the selected checkpoint.
    pub best: Option<usize>,
}

impl TrainHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    /// Mean training loss per epoch, in epoch order.
    pub fn epoch_mean_losses(&self) -> Vec<f64> {
        let mut out: Vec<(usize, f64, usize)> = Vec::new();
        for s in &self.steps {
            match out.last_mut() {
                Some((e, sum, n)) if *e == s.epoch => {
                    *sum += s.loss;
                    *n += 1;
                }
                _ => out.push((s.epoch, s.loss, 1)),
            }
        }
        out.into_iter().map(|(_, s, n)| s / n as f64).collect()
    }

    pub fn best_eval(&self) -> Option<&EvalRecord> {
        self.best.map(|i| &self.evals[i])
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ReidError::io(path, e))?;
        let mut h = TrainHistory::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str(line)? {
                HistoryEvent::Step(s) => h.steps.push(s),
                HistoryEvent::Eval(e) => h.evals.push(e),
                HistoryEvent::Run { .. } => {}
            }
        }
        Ok(h)
    }
}

/// Index of the eval row with the highest metric; the earliest row wins ties.
pub fn select_best_checkpoint(history: &TrainHistory, metric: SelectionMetric) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, e) in history.evals.iter().enumerate() {
        let v = e.metric(metric).ok_or_else(|| {
            ReidError::Config(format!("eval row {i} has no value for {metric:?}"))
        })?;
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
        .ok_or_else(|| ReidError::Invalid("training history has no evaluation rows".into()))
}

/// Embeds records in eval mode (no flip), keyed by record id.
pub fn embed_records(enc: &VisionEncoder, records: &[&ImageRecord], images: &ImageStore) -> Result<EmbeddingSet> {
    if images.side() != enc.input_side() {
        return Err(ReidError::Shape(format!(
            "images fitted to {} px but {} expects {} px",
            images.side(),
            enc.name(),
            enc.input_side()
        )));
    }
    let cfg = enc.preprocess_config(0.0);
    let batch = par::try_map_slice(records, |r| images.get(&r.record_id).map(|img| normalize(img, &cfg)))?;
    let ids: Vec<String> = records.iter().map(|r| r.record_id.clone()).collect();
    let emb = enc.encode_normalized(&batch, &ids)?;
    EmbeddingSet::new(emb, records.iter().map(|r| r.player_id.clone()).collect())
}

/// Query and gallery embeddings of a split.
pub fn embed_split(enc: &VisionEncoder, split: &DatasetSplit, images: &ImageStore) -> Result<(EmbeddingSet, EmbeddingSet)> {
    let q: Vec<&ImageRecord> = split.queries().collect();
    let g: Vec<&ImageRecord> = split.gallery().collect();
    Ok((embed_records(enc, &q, images)?, embed_records(enc, &g, images)?))
}

pub fn evaluate_split(
    enc: &VisionEncoder,
    split: &DatasetSplit,
    images: &ImageStore,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let (q, g) = embed_split(enc, split, images)?;
    let mut rep = evaluate(&q, &g, opts)?;
    rep.encoder_name = Some(enc.name().to_string());
    rep.zero_shot = !enc.is_fine_tuned();
    Ok(rep)
}

/// Everything a training run needs besides the encoder and data.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub eval: EvalOptions,
    /// Written into every checkpoint header.
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights of the selected checkpoint.
    pub best: VisionEncoder,
    pub history: TrainHistory,
    pub best_checkpoint: Option<PathBuf>,
    pub best_report: EvalReport,
}

/// Batches for every epoch, fixed before the first step so the schedule
/// knows the exact number of optimizer steps.
pub fn plan_epochs(split: &DatasetSplit, cfg: &TrainConfig) -> Result<Vec<Vec<Batch>>> {
    let mut fixed: Option<Vec<PairInstance>> = None;
    (0..cfg.epochs)
        .map(|e| {
            let instances = if cfg.resample_pairs_each_epoch {
                build_pair_instances(split, cfg.seed.wrapping_add(e as u64)).0
            } else {
                fixed.get_or_insert_with(|| build_pair_instances(split, cfg.seed).0).clone()
            };
            sample_epoch(
                &instances,
                &SamplerConfig {
                    batch_size: cfg.batch_size,
                    seed: cfg.seed ^ (0x5eed_0000 + e as u64),
                    drop_last: true,
                },
            )
        })
        .collect()
}

struct RunFiles {
    dir: PathBuf,
    history: BufWriter<File>,
}

impl RunFiles {
    fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| ReidError::io(dir, e))?;
        let p = dir.join("history.jsonl");
        let f = File::create(&p).map_err(|e| ReidError::io(&p, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            history: BufWriter::new(f),
        })
    }

    fn log(&mut self, ev: &HistoryEvent) -> Result<()> {
        let p = self.dir.join("history.jsonl");
        serde_json::to_writer(&mut self.history, ev)?;
        self.history.write_all(b"\n").map_err(|e| ReidError::io(&p, e))?;
        self.history.flush().map_err(|e| ReidError::io(&p, e))
    }
}

/// Fine-tunes `enc` on `split`, evaluating on `eval_split`.
///
/// With `out_dir`, writes `history.jsonl`, a checkpoint per evaluation
/// (`ckpt-epochN`, or `ckpt-stepN` for step-based evaluation) and a `best`
/// file naming the selected checkpoint.
pub fn train(
    settings: &TrainSettings,
    split: &DatasetSplit,
    eval_split: &DatasetSplit,
    images: &ImageStore,
    mut enc: VisionEncoder,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let cfg = &settings.train;
    cfg.validate()?;
    settings.loss.validate()?;
    if cfg.selection_metric == SelectionMetric::MapRerank && !settings.eval.rerank {
        return Err(ReidError::Config("selection by re-ranked mAP needs re-ranking enabled".into()));
    }
    if images.side() != enc.input_side() {
        return Err(ReidError::Shape(format!(
            "images fitted to {} px but {} expects {} px",
            images.side(),
            enc.name(),
            enc.input_side()
        )));
    }

    let plan = plan_epochs(split, cfg)?;
    let total_steps: usize = plan.iter().map(Vec::len).sum();
    let steps_per_epoch = total_steps as f64 / cfg.epochs as f64;
    let warmup_steps = ((cfg.warmup_epochs * steps_per_epoch).round() as usize).clamp(1, total_steps.saturating_sub(1).max(1));
    let (lr_max, lr_min) = cfg.learning_rates(enc.meta().kind);
    if total_steps < 2 {
        return Err(ReidError::Config(format!("only {total_steps} optimizer steps planned")));
    }
    log::info!("{total_steps} steps, {warmup_steps} warm-up, lr {lr_max:e} → {lr_min:e}");

    let pre = PreprocessConfig {
        flip_probability: cfg.flip_probability,
        ..enc.preprocess_config(cfg.flip_probability)
    };
    let eps = settings.loss.label_smoothing;
    let scale_max = settings.loss.logit_scale_max;
    let mut log_scale = settings.loss.initial_scale(enc.meta().logit_scale).ln();
    let mut scale_opt = ScalarAdam { m: 0.0, v: 0.0, t: 0 };
    let mut opt = AdamW::new(enc.params(), cfg.adamw);
    let mut files = out_dir.map(RunFiles::create).transpose()?;
    if let Some(f) = files.as_mut() {
        f.log(&HistoryEvent::Run {
            config_hash: settings.config_hash.clone(),
        })?;
    }
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, VisionEncoder, EvalReport, Option<PathBuf>)> = None;
    let mut step = 0usize;

    for (e, batches) in plan.iter().enumerate() {
        let epoch = e + 1;
        for (b, batch) in batches.iter().enumerate() {
            step += 1;
            let lr = poly_warmup_lr(step, total_steps, warmup_steps, lr_max, lr_min, cfg.poly_power)?;
            let (qs, gs) = batch_inputs(batch, images, &pre, cfg.seed, step)?;
            let scale = log_scale.exp();
            let out = dual_view_forward(&enc, &qs, &gs, scale, eps, true)?;
            let grads = out.grads.expect("requested gradients");
            if !out.loss.is_finite() || !grads.is_finite() {
                let stats: LogitStats = out.logits.stats();
                return Err(ReidError::Numerical(format!(
                    "non-finite loss at epoch {epoch} step {step}; logits: {}",
                    serde_json::to_string(&stats)?
                )));
            }
            opt.step(enc.params_mut(), &grads, lr);
            if settings.loss.learn_logit_scale {
                scale_opt.step(&mut log_scale, out.d_log_scale, lr, &cfg.adamw);
                log_scale = log_scale.min(scale_max.ln());
            }
            enc.meta_mut().training_step += 1;
            enc.meta_mut().logit_scale = log_scale.exp();

            let rec = StepRecord {
                step,
                epoch,
                lr,
                loss: out.loss,
                logit_scale: scale,
            };
            log::debug!("epoch {epoch} step {step} lr {lr:.3e} loss {:.5}", out.loss);
            if let Some(f) = files.as_mut() {
                f.log(&HistoryEvent::Step(rec.clone()))?;
            }
            history.steps.push(rec);

            let due = match cfg.eval_every {
                EvalEvery::Epoch => b + 1 == batches.len(),
                EvalEvery::Steps(k) => step % k == 0 || step == total_steps,
            };
            if due {
                let report = evaluate_split(&enc, eval_split, images, &settings.eval)?;
                let name = match cfg.eval_every {
                    EvalEvery::Epoch => format!("ckpt-epoch{epoch}"),
                    EvalEvery::Steps(_) => format!("ckpt-step{step}"),
                };
                let ckpt = match files.as_ref() {
                    Some(f) => {
                        let p = f.dir.join(&name);
                        save_checkpoint(&p, &enc, settings.config_hash.as_deref())?;
                        Some(p)
                    }
                    None => None,
                };
                let row = EvalRecord {
                    epoch,
                    step,
                    map_no_rerank: report.map_no_rerank(),
                    map_rerank: report.map_rerank(),
                    rank1: report.raw.rank(1),
                    rank5: report.raw.rank(5),
                    checkpoint: ckpt.as_ref().map(|_| name.clone()),
                };
                log::info!(
                    "epoch {epoch}: mAP {:.4} (re-ranked {:?})",
                    row.map_no_rerank,
                    row.map_rerank
                );
                let metric = row.metric(cfg.selection_metric).expect("validated above");
                if best.as_ref().is_none_or(|(b, ..)| metric > *b) {
                    best = Some((metric, enc.clone(), report, ckpt));
                }
                if let Some(f) = files.as_mut() {
                    f.log(&HistoryEvent::Eval(row.clone()))?;
                }
                history.evals.push(row);
            }
        }
    }

    let idx = select_best_checkpoint(&history, cfg.selection_metric)?;
    history.best = Some(idx);
    let (_, best_enc, best_report, best_ckpt) = best.expect("at least one evaluation");
    if let (Some(f), Some(name)) = (files.as_ref(), history.evals[idx].checkpoint.as_ref()) {
        let p = f.dir.join("best");
        std::fs::write(&p, format!("{name}\n")).map_err(|e| ReidError::io(&p, e))?;
    }
    Ok(TrainOutcome {
        best: best_enc,
        history,
        best_checkpoint: best_ckpt,
        best_report,
    })
}

/// Augmented inputs for one batch. Flip decisions come from a generator
/// seeded by `(seed, step)`, so they do not depend on thread scheduling.
fn batch_inputs(
    batch: &Batch,
    images: &ImageStore,
    pre: &PreprocessConfig,
    seed: u64,
    step: usize,
) -> Result<(Vec<NormalizedImage>, Vec<NormalizedImage>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    let p = pre.flip_probability;
    let jobs: Vec<(&str, bool)> = batch
        .instances
        .iter()
        .map(|i| i.query_record.record_id.as_str())
        .chain(batch.instances.iter().map(|i| i.gallery_record.record_id.as_str()))
        .map(|id| (id, p > 0.0 && rng.random_bool(p)))
        .collect();
    let mut all = par::try_map_slice(&jobs, |&(id, flip)| {
        images.get(id).map(|img| {
            if flip {
                normalize(&mirror(img), pre)
            } else {
                normalize(img, pre)
            }
        })
    })?;
    let gs = all.split_off(batch.len());
    Ok((all, gs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_fixed_points() {
        let f = |s| poly_warmup_lr(s, 100, 25, 4e-5, 4e-6, 1.0).unwrap();
        assert_eq!(f(0), 0.0);
        assert_eq!(f(25), 4e-5);
        assert_eq!(f(100), 4e-6);
        assert!((poly_warmup_lr(60, 95, 25, 4e-5, 4e-6, 1.0).unwrap() - 2.2e-5).abs() < 1e-18);
        let mut prev = f(25);
        for s in 26..=100 {
            let x = f(s);
            assert!(x <= prev && x >= 4e-6 && x <= 4e-5);
            prev = x;
        }
    }

    #[test]
    fn schedule_errors() {
        assert!(poly_warmup_lr(1, 10, 0, 1e-3, 1e-4, 1.0).is_err());
        assert!(poly_warmup_lr(1, 10, 10, 1e-3, 1e-4, 1.0).is_err());
        assert!(poly_warmup_lr(11, 10, 2, 1e-3, 1e-4, 1.0).is_err());
        assert!(poly_warmup_lr(1, 10, 2, 1e-4, 1e-3, 1.0).is_err());
        assert!(poly_warmup_lr(1, 10, 2, 1e-3, 1e-4, 0.0).is_err());
    }

    fn eval_row(epoch: usize, m: f64) -> EvalRecord {
        EvalRecord {
            epoch,
            step: epoch,
            map_no_rerank: m,
            map_rerank: None,
            rank1: None,
            rank5: None,
            checkpoint: None,
        }
    }

    #[test]
    fn best_checkpoint_selection() {
        let h = |ms: &[f64]| TrainHistory {
            evals: ms.iter().enumerate().map(|(i, &m)| eval_row(i + 1, m)).collect(),
            ..Default::default()
        };
        assert_eq!(select_best_checkpoint(&h(&[0.90, 0.95, 0.93]), SelectionMetric::MapNoRerank).unwrap(), 1);
        assert_eq!(select_best_checkpoint(&h(&[0.95, 0.95]), SelectionMetric::MapNoRerank).unwrap(), 0);
        assert!(select_best_checkpoint(&h(&[]), SelectionMetric::MapNoRerank).is_err());
        assert!(select_best_checkpoint(&h(&[0.5]), SelectionMetric::MapRerank).is_err());
    }

    #[test]
    fn lr_defaults_follow_architecture() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rates(ArchKind::Transformer), (4e-5, 4e-6));
        assert_eq!(c.learning_rates(ArchKind::Convolutional), (4e-4, 4e-5));
        let o = TrainConfig {
            lr_max: Some(1e-3),
            ..c.clone()
        };
        assert_eq!(o.learning_rates(ArchKind::Transformer), (1e-3, 4e-6));
        assert!(TrainConfig { warmup_epochs: 8.0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { lr_max: Some(1e-6), lr_min: Some(1e-5), ..c }.validate().is_err());
    }

    #[test]
    fn adamw_first_step_and_decay_mask() {
        let mut ps = ParamStore::new();
        let w = ps.add("w", crate::encoder::params::Tensor::new(vec![1, 2], vec![1.0, -1.0]));
        let b = ps.add("b", crate::encoder::params::Tensor::new(vec![2], vec![1.0, 1.0]));
        let mut g = ps.zeros_like();
        g.get_mut(w).copy_from_slice(&[0.5, 0.0]);
        let mut opt = AdamW::new(&ps, AdamWConfig { weight_decay: 0.1, ..Default::default() });
        opt.step(&mut ps, &g, 0.01);
        // decay first: 1 − 0.001 = 0.999, then the unit Adam step of size lr.
        assert!((ps.get(w).data[0] - (0.999 - 0.01 * 0.5 / (0.5 + 1e-8))).abs() < 1e-12);
        assert!((ps.get(w).data[1] - (-0.999)).abs() < 1e-12);
        assert_eq!(ps.get(b).data, vec![1.0, 1.0]);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn epoch_means() {
        let s = |epoch, loss| StepRecord {
            step: 0,
            epoch,
            lr: 0.0,
            loss,
            logit_scale: 1.0,
        };
        let h = TrainHistory {
            steps: vec![s(1, 2.0), s(1, 4.0), s(2, 1.0)],
            ..Default::default()
        };
        assert_eq!(h.epoch_mean_losses(), vec![3.0, 1.0]);
    }
}
