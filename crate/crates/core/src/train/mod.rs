//! Training loops: pretraining (any arch), DEX adaptation of a pretrained
//! baseline, and checkpoint persistence.

mod checkpoint;
mod optim;

use std::path::PathBuf;

use dexlab_numcore::{Rng, RngState};
use serde::{Deserialize, Serialize};

use crate::dex::{
    calibration_fingerprint, freeze_policy, head_entropy, head_importance, select_heads, DexAdapter,
    DexConfig, HeadSelection, Strategy,
};
use crate::error::{config_err, input_err, CoreError, Result};
use crate::metrics::{append_jsonl, MetricRecord};
use crate::model::{Arch, Batch, ForwardOptions, ModelConfig, TransformerModel};
use crate::tasks::{eval_perplexity, gen_sample, sample_window, Corpus, RetrievalTaskConfig};

pub use checkpoint::{decode, encode, load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION};
pub use optim::{adamw_step, clip_grad_norm, grad_norm, lr_at, OptimizerState, ADAM_EPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub min_lr_ratio: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub grad_clip: f64,
    pub seed: u64,
    /// Validation perplexity every this many steps; 0 disables it.
    pub eval_every: usize,
    pub eval_batches: usize,
    pub log_every: usize,
    /// Periodic checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Share of batch rows drawn from the retrieval task instead of the corpus.
    pub retrieval_fraction: f64,
    /// Queries per training retrieval row.
    pub retrieval_queries: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 3000,
            batch_size: 16,
            seq_len: 256,
            peak_lr: 3e-4,
            warmup_ratio: 0.03,
            min_lr_ratio: 0.1,
            weight_decay: 0.1,
            betas: [0.9, 0.95],
            grad_clip: 1.0,
            seed: 0,
            eval_every: 0,
            eval_batches: 4,
            log_every: 10,
            checkpoint_every: 0,
            retrieval_fraction: 0.0,
            retrieval_queries: 4,
        }
    }
}

impl TrainConfig {
    /// Adaptation defaults: shorter run at a lower rate.
    pub fn adapt_default() -> Self {
        Self {
            total_steps: 2000,
            peak_lr: 1e-4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(config_err("train.warmup_ratio must be in [0, 1)"));
        }
        if !(self.peak_lr > 0.0) {
            return Err(config_err("train.peak_lr must be positive"));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(config_err("train.min_lr_ratio must be in [0, 1]"));
        }
        if self.batch_size == 0 || self.seq_len < 2 {
            return Err(config_err("train.batch_size must be >= 1 and train.seq_len >= 2"));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(config_err("train.betas must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return Err(config_err("train.weight_decay and train.grad_clip must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.retrieval_fraction) {
            return Err(config_err("train.retrieval_fraction must be in [0, 1]"));
        }
        Ok(())
    }
}

/// Where training rows come from.
#[derive(Debug, Clone, Copy)]
pub struct DataMix<'a> {
    pub corpus: &'a Corpus,
    /// Needed when `retrieval_fraction > 0`.
    pub task: Option<&'a RetrievalTaskConfig>,
}

impl DataMix<'_> {
    fn check(&self, cfg: &TrainConfig, vocab: usize) -> Result<()> {
        if self.corpus.train().len() < cfg.seq_len {
            return Err(input_err(format!(
                "training corpus holds {} tokens, shorter than one sequence of {}",
                self.corpus.train().len(),
                cfg.seq_len
            )));
        }
        if cfg.retrieval_fraction > 0.0 {
            let t = self.train_task(cfg)?;
            t.validate(vocab)?;
            for d in [0.0, 0.5, 1.0] {
                gen_sample(&t, &mut Rng::for_purpose(0, "probe"), d, cfg.seq_len, None)?;
            }
        }
        Ok(())
    }

    fn train_task(&self, cfg: &TrainConfig) -> Result<RetrievalTaskConfig> {
        let base = self
            .task
            .ok_or_else(|| config_err("train.retrieval_fraction > 0 needs a retrieval task config"))?;
        Ok(RetrievalTaskConfig {
            n_queries: cfg.retrieval_queries.clamp(1, base.n_needles),
            ..base.clone()
        })
    }

    /// Rows for one step; a pure function of `(rng, step)`.
    pub fn batch(&self, cfg: &TrainConfig, rng: RngState, step: u64, rows: usize) -> Result<Batch> {
        let mut r = Rng::new(RngState::new(rng.seed, rng.stream.wrapping_add(step)));
        let task = if cfg.retrieval_fraction > 0.0 {
            Some(self.train_task(cfg)?)
        } else {
            None
        };
        let mut out = Vec::with_capacity(rows);
        for _ in 0..rows {
            let row = match &task {
                Some(t) if r.uniform() < cfg.retrieval_fraction => {
                    let depth = r.uniform();
                    gen_sample(t, &mut r, depth, cfg.seq_len, Some(self.corpus.train()))?
                        .tokens
                        .into_iter()
                        .map(|x| x as usize)
                        .collect()
                }
                _ => sample_window(&mut r, self.corpus.train(), cfg.seq_len)?,
            };
            out.push(row);
        }
        Batch::from_rows(&out)
    }
}

/// Output locations; both optional so tests can train in memory.
#[derive(Debug, Clone, Default)]
pub struct RunIo {
    pub metrics: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl RunIo {
    fn emit(&self, records: &[MetricRecord]) -> Result<()> {
        match &self.metrics {
            Some(p) => append_jsonl(p, records),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub loss: f64,
    /// Global L2 norm of trainable gradients before clipping.
    pub grad_norm: f64,
    pub lr: f64,
    /// Effective lambda per layer; empty without an adapter.
    pub lambda: Vec<f64>,
    pub phase: String,
}

impl TrainLogRecord {
    pub fn records(&self) -> Vec<MetricRecord> {
        let p = &self.phase;
        let mut out = vec![
            MetricRecord::new(p, "loss", self.loss).step(self.step),
            MetricRecord::new(p, "grad_norm", self.grad_norm).step(self.step),
            MetricRecord::new(p, "lr", self.lr).step(self.step),
        ];
        for (l, &v) in self.lambda.iter().enumerate() {
            out.push(MetricRecord::new(p, "lambda", v).step(self.step).layer(l));
        }
        out
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint<f32>,
    pub log: Vec<TrainLogRecord>,
}

pub fn data_rng(seed: u64) -> RngState {
    RngState::for_purpose(seed, "train.batch")
}

/// One optimizer step on `batch`. Returns the log entry for it.
pub fn train_step(
    model: &mut TransformerModel<f32>,
    opt: &mut OptimizerState<f32>,
    batch: &Batch,
    cfg: &TrainConfig,
    phase: &str,
) -> Result<TrainLogRecord> {
    let step = model.step;
    let lambda = model.dex_lambdas()?;
    let f = model.forward(
        batch,
        &ForwardOptions {
            grad: true,
            ..Default::default()
        },
    )?;
    let loss = f.loss.as_ref().ok_or_else(|| input_err("training rows need two tokens"))?;
    let loss_v = loss.value().item() as f64;
    if !loss_v.is_finite() {
        return Err(CoreError::Diverged {
            op: "train_step",
            detail: format!("loss is {loss_v} at step {step}"),
        });
    }
    loss.backward()?;
    let mut grads = f.grads();
    let norm = clip_grad_norm(&mut grads, cfg.grad_clip)?;
    let lr = lr_at(step as usize, cfg);
    adamw_step(&mut model.params, &grads, opt, lr, cfg)?;
    model.step += 1;
    Ok(TrainLogRecord {
        step,
        loss: loss_v,
        grad_norm: norm,
        lr,
        lambda,
        phase: phase.into(),
    })
}

fn val_record(model: &TransformerModel<f32>, data: &DataMix, cfg: &TrainConfig, phase: &str) -> Result<MetricRecord> {
    let val = data.corpus.val();
    let take = (cfg.eval_batches * cfg.batch_size * cfg.seq_len).min(val.len());
    let ppl = eval_perplexity(model, &val[..take], cfg.seq_len, cfg.batch_size)?;
    Ok(MetricRecord::new(phase, "val_ppl", ppl).step(model.step))
}

/// Steps `model` from its current step up to `cfg.total_steps`.
fn run_loop(
    mut ck: Checkpoint<f32>,
    cfg: &TrainConfig,
    data: &DataMix,
    phase: &str,
    io: &RunIo,
) -> Result<TrainOutcome> {
    let mut opt = ck.optimizer.take().unwrap_or_default();
    let mut log = Vec::new();
    let val_on = cfg.eval_every > 0 && data.corpus.val().len() >= 2;
    while (ck.model.step as usize) < cfg.total_steps {
        let batch = data.batch(cfg, ck.rng, ck.model.step, cfg.batch_size)?;
        let rec = train_step(&mut ck.model, &mut opt, &batch, cfg, phase)?;
        let done = ck.model.step as usize;
        if cfg.log_every > 0 && (rec.step as usize % cfg.log_every == 0 || done == cfg.total_steps) {
            io.emit(&rec.records())?;
        }
        log.push(rec);
        if val_on && done % cfg.eval_every == 0 {
            io.emit(&[val_record(&ck.model, data, cfg, phase)?])?;
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.total_steps {
            if let Some(dir) = &io.checkpoint_dir {
                let snap = Checkpoint {
                    model: ck.model.clone(),
                    optimizer: Some(opt.clone()),
                    rng: ck.rng,
                };
                save_checkpoint(&snap, &dir.join(format!("step_{done}.ckpt")))?;
            }
        }
    }
    ck.optimizer = Some(opt);
    if let Some(dir) = &io.checkpoint_dir {
        save_checkpoint(&ck, &dir.join("final.ckpt"))?;
    }
    Ok(TrainOutcome { checkpoint: ck, log })
}

/// Trains every parameter of a fresh model. `dex_scratch` models get a
/// first-k adapter (from `dex`) attached before step 0.
pub fn pretrain(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    dex: Option<&DexConfig>,
    data: &DataMix,
    io: &RunIo,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.check(cfg, model_cfg.vocab_size)?;
    if cfg.seq_len > model_cfg.max_seq {
        return Err(config_err(format!(
            "train.seq_len {} exceeds model.max_seq {}",
            cfg.seq_len, model_cfg.max_seq
        )));
    }
    let mut model = TransformerModel::init(model_cfg.clone(), cfg.seed)?;
    if model_cfg.arch == Arch::DexScratch {
        let default = DexConfig::default();
        let d = dex.unwrap_or(&default);
        let heads = model_cfg.layout().heads;
        let sel = HeadSelection::first_k(model_cfg.n_layers, d.k_for(heads)?);
        model.attach_adapter(DexAdapter::new(sel, d, model_cfg, cfg.total_steps)?)?;
    }
    let ck = Checkpoint {
        model,
        optimizer: None,
        rng: data_rng(cfg.seed),
    };
    run_loop(ck, cfg, data, "pretrain", io)
}

/// Continues a checkpoint that carries optimizer state up to
/// `cfg.total_steps`.
pub fn resume(ck: Checkpoint<f32>, cfg: &TrainConfig, data: &DataMix, phase: &str, io: &RunIo) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.check(cfg, ck.model.config.vocab_size)?;
    if ck.optimizer.is_none() && ck.model.step > 0 {
        return Err(config_err("cannot resume mid-run without optimizer state"));
    }
    run_loop(ck, cfg, data, phase, io)
}

/// Calibration rows drawn from the training mix with their own stream.
pub fn calibration_batches(
    dex: &DexConfig,
    cfg: &TrainConfig,
    data: &DataMix,
) -> Result<Vec<Batch>> {
    if dex.calib_batches == 0 || dex.calib_batch_size == 0 {
        return Err(config_err("dex.calib_batches and dex.calib_batch_size must be positive"));
    }
    let rng = RngState::for_purpose(cfg.seed, "dex.calib");
    (0..dex.calib_batches as u64)
        .map(|i| data.batch(cfg, rng, i, dex.calib_batch_size))
        .collect()
}

/// Per-head scores and the resulting selection.
pub fn choose_heads(
    model: &TransformerModel<f32>,
    dex: &DexConfig,
    calib: &[Batch],
) -> Result<(Option<Vec<Vec<f64>>>, HeadSelection)> {
    let heads = model.config.layout().heads;
    let k = dex.k_for(heads)?;
    let scores = match dex.strategy {
        Strategy::ImportanceLow => Some(head_importance(model, calib)?),
        Strategy::EntropyHigh | Strategy::EntropyLow => Some(head_entropy(model, calib)?),
        Strategy::All | Strategy::FirstK => None,
    };
    let mut sel = match (&scores, dex.strategy) {
        (Some(s), st) => select_heads(s, st, k)?,
        (None, Strategy::All) => HeadSelection {
            strategy: Strategy::All,
            ..HeadSelection::first_k(model.config.n_layers, heads)
        },
        (None, _) => HeadSelection::first_k(model.config.n_layers, k),
    };
    sel.fingerprint = calibration_fingerprint(calib);
    Ok((scores, sel))
}

/// Selects heads on a calibration slice, attaches a fresh adapter to the
/// base model and trains only the adapted attention path.
pub fn adapt_dex(
    base: &Checkpoint<f32>,
    dex: &DexConfig,
    cfg: &TrainConfig,
    data: &DataMix,
    io: &RunIo,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if base.model.config.arch != Arch::Baseline {
        return Err(config_err(format!(
            "adaptation needs a baseline checkpoint, got {}",
            base.model.config.arch.name()
        )));
    }
    if base.model.adapter.is_some() {
        return Err(config_err("base checkpoint already carries an adapter"));
    }
    data.check(cfg, base.model.config.vocab_size)?;
    let calib = calibration_batches(dex, cfg, data)?;
    let (scores, sel) = choose_heads(&base.model, dex, &calib)?;
    if let Some(s) = &scores {
        let mut recs = Vec::new();
        for (l, row) in s.iter().enumerate() {
            for (h, &v) in row.iter().enumerate() {
                recs.push(MetricRecord::new("select", &format!("head_{}", score_name(dex.strategy)), v).layer(l).head(h));
            }
        }
        for (l, hs) in sel.layers.iter().enumerate() {
            for &h in hs {
                recs.push(MetricRecord::new("select", "selected", 1.0).layer(l).head(h));
            }
        }
        io.emit(&recs)?;
    }
    let mut model = base.model.clone();
    model.step = 0;
    model.attach_adapter(DexAdapter::new(sel, dex, &model.config, cfg.total_steps)?)?;
    freeze_policy(&mut model)?;
    let ck = Checkpoint {
        model,
        optimizer: None,
        rng: data_rng(cfg.seed),
    };
    run_loop(ck, cfg, data, "adapt", io)
}

fn score_name(s: Strategy) -> &'static str {
    match s {
        Strategy::ImportanceLow => "importance",
        _ => "entropy",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            n_kv_heads: 2,
            d_head: 8,
            d_ff: 32,
            max_seq: 32,
            ..Default::default()
        }
    }

    fn corpus() -> Corpus {
        let text = "the quick brown fox jumps over the lazy dog. ".repeat(40);
        Corpus::from_bytes(text.into_bytes(), 0.1).unwrap()
    }

    fn cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            total_steps: steps,
            batch_size: 4,
            seq_len: 16,
            peak_lr: 1e-2,
            log_every: 1,
            ..Default::default()
        }
    }

    #[test]
    fn zero_steps_is_init() {
        let c = corpus();
        let out = pretrain(&tiny(), &cfg(0), None, &DataMix { corpus: &c, task: None }, &RunIo::default()).unwrap();
        assert_eq!(out.checkpoint.model, TransformerModel::init(tiny(), 0).unwrap());
        assert!(out.log.is_empty());
    }

    #[test]
    fn loss_drops_and_is_reproducible() {
        let c = corpus();
        let d = DataMix { corpus: &c, task: None };
        let a = pretrain(&tiny(), &cfg(40), None, &d, &RunIo::default()).unwrap();
        let b = pretrain(&tiny(), &cfg(40), None, &d, &RunIo::default()).unwrap();
        let la: Vec<f64> = a.log.iter().map(|r| r.loss).collect();
        let lb: Vec<f64> = b.log.iter().map(|r| r.loss).collect();
        assert_eq!(la, lb);
        assert!(la.last().unwrap() < &la[0]);
        assert!(a.log.iter().all(|r| r.grad_norm.is_finite()));
    }

    #[test]
    fn resume_matches_straight_run() {
        let c = corpus();
        let d = DataMix { corpus: &c, task: None };
        let full = pretrain(&tiny(), &cfg(10), None, &d, &RunIo::default()).unwrap();
        // Five steps under the ten-step schedule, then a trip through bytes.
        let c10 = cfg(10);
        let mut partial = Checkpoint {
            model: TransformerModel::init(tiny(), 0).unwrap(),
            optimizer: None,
            rng: data_rng(0),
        };
        let mut opt = OptimizerState::default();
        for s in 0..5 {
            let b = d.batch(&c10, partial.rng, s, 4).unwrap();
            train_step(&mut partial.model, &mut opt, &b, &c10, "pretrain").unwrap();
        }
        partial.optimizer = Some(opt);
        let partial = decode::<f32>(&encode(&partial).unwrap()).unwrap();
        let rest = resume(partial, &c10, &d, "pretrain", &RunIo::default()).unwrap();
        assert_eq!(rest.checkpoint.model, full.checkpoint.model);
    }

    #[test]
    fn short_corpus_rejected() {
        let c = Corpus::from_bytes(b"tiny".to_vec(), 0.0).unwrap();
        let e = pretrain(&tiny(), &cfg(1), None, &DataMix { corpus: &c, task: None }, &RunIo::default());
        assert!(matches!(e, Err(CoreError::Input(_))));
    }
}
