use std::path::{Path, PathBuf};

use dexlab_core::analysis::{analyze_traces, importance_distribution, magnitude_correlation};
use dexlab_core::dex::{head_importance, DexConfig, HeadSelection, Strategy};
use dexlab_core::effattn::{
    crosscheck, effective_scores_optim, effective_scores_pinv, effective_traces, Method, DEFAULT_ITERS,
    DEFAULT_LR, DEFAULT_RCOND,
};
use dexlab_core::metrics::{append_jsonl, MetricRecord};
use dexlab_core::model::{Arch, Batch, ForwardOptions, LambdaInit, TransformerModel};
use dexlab_core::tasks::{attention_to_answer, eval_perplexity, eval_retrieval, gen_retrieval, sample_window, Corpus};
use dexlab_core::train::{
    adapt_dex, calibration_batches, choose_heads, load_checkpoint, pretrain, Checkpoint, DataMix, RunIo,
};
use dexlab_core::CoreError;
use dexlab_numcore::Rng;
use serde::Serialize;

use crate::bench::bench;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const METRICS_FILE: &str = "metrics.jsonl";

fn run_io(out: &Path) -> CliResult<RunIo> {
    let ck = out.join("checkpoints");
    std::fs::create_dir_all(&ck)?;
    Ok(RunIo {
        metrics: Some(out.join(METRICS_FILE)),
        checkpoint_dir: Some(ck),
    })
}

fn emit(out: &Path, records: &[MetricRecord]) -> CliResult<()> {
    Ok(append_jsonl(&out.join(METRICS_FILE), records)?)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| CliError::input(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn load(path: &Path) -> CliResult<Checkpoint<f32>> {
    Ok(load_checkpoint(path)?)
}

pub fn cmd_pretrain(cfg: &RunConfig, out: &Path) -> CliResult<PathBuf> {
    let corpus = cfg.corpus.load()?;
    let data = DataMix {
        corpus: &corpus,
        task: Some(&cfg.task),
    };
    let io = run_io(out)?;
    pretrain(&cfg.model, &cfg.train, Some(&cfg.dex), &data, &io)?;
    Ok(out.join("checkpoints").join("final.ckpt"))
}

pub fn cmd_adapt(cfg: &RunConfig, base: &Path, out: &Path) -> CliResult<PathBuf> {
    let corpus = cfg.corpus.load()?;
    let base = load(base)?;
    Ok(adapt_into(cfg, &cfg.dex, &base, &corpus, out)?.0)
}

/// Returns the final checkpoint path and the last training loss.
fn adapt_into(
    cfg: &RunConfig,
    dex: &DexConfig,
    base: &Checkpoint<f32>,
    corpus: &Corpus,
    out: &Path,
) -> CliResult<(PathBuf, Option<f64>)> {
    let data = DataMix {
        corpus,
        task: Some(&cfg.task),
    };
    let io = run_io(out)?;
    let done = adapt_dex(base, dex, &cfg.adapt, &data, &io)?;
    if let Some(a) = &done.checkpoint.model.adapter {
        write_json(&out.join("selection.json"), &a.selection)?;
    }
    Ok((out.join("checkpoints").join("final.ckpt"), done.log.last().map(|r| r.loss)))
}

/// Which knob an ablation sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Sweep {
    LambdaInit,
    K,
}

pub fn sweep_variants(sweep: Sweep, base: &DexConfig, heads: usize) -> Vec<(String, DexConfig)> {
    match sweep {
        Sweep::LambdaInit => [
            LambdaInit::Constant(0.8),
            LambdaInit::Constant(0.5),
            LambdaInit::Constant(0.3),
            LambdaInit::DepthAware,
        ]
        .into_iter()
        .map(|li| {
            (
                format!("lambda_init={}", li.label()),
                DexConfig {
                    lambda_init: li,
                    ..base.clone()
                },
            )
        })
        .collect(),
        Sweep::K => {
            let mut ks: Vec<usize> = [heads / 4, heads / 2, 3 * heads / 4, heads]
                .into_iter()
                .map(|k| k.max(1))
                .collect();
            ks.dedup();
            ks.into_iter()
                .map(|k| {
                    (
                        format!("k={k}"),
                        DexConfig {
                            k: Some(k),
                            ..base.clone()
                        },
                    )
                })
                .collect()
        }
    }
}

/// Adapts one copy of the base per variant, evaluates each, and writes a
/// summary row per variant and metric to the sweep's own metrics file.
pub fn cmd_sweep(cfg: &RunConfig, base_path: &Path, out: &Path, sweep: Sweep) -> CliResult<Vec<MetricRecord>> {
    let corpus = cfg.corpus.load()?;
    let base = load(base_path)?;
    let heads = base.model.config.layout().heads;
    let mut summary = Vec::new();
    for (tag, dex) in sweep_variants(sweep, &cfg.dex, heads) {
        let dir = out.join(tag.replace('=', "_"));
        std::fs::create_dir_all(&dir)?;
        let (ck, loss) = adapt_into(cfg, &dex, &base, &corpus, &dir)?;
        let model = load(&ck)?.model;
        let recs = evaluate(cfg, &model, &corpus, None)?;
        emit(&dir, &recs)?;
        if let Some(l) = loss {
            summary.push(MetricRecord::new("ablation", "final_loss", l).subset(tag.clone()));
        }
        for r in recs.iter().filter(|r| r.subset.is_none()) {
            summary.push(MetricRecord::new("ablation", &r.metric, r.value).subset(tag.clone()));
        }
    }
    emit(out, &summary)?;
    Ok(summary)
}

/// Perplexity, the retrieval grid and attention to the answer.
pub fn evaluate(
    cfg: &RunConfig,
    model: &TransformerModel<f32>,
    corpus: &Corpus,
    heads: Option<&HeadSelection>,
) -> CliResult<Vec<MetricRecord>> {
    let mut recs = Vec::new();
    let val = corpus.val();
    if val.len() >= 2 {
        let take = cfg.eval.ppl_tokens.min(val.len());
        let seq = model.config.max_seq.min(cfg.train.seq_len);
        let ppl = eval_perplexity(model, &val[..take], seq, cfg.train.batch_size)?;
        recs.push(MetricRecord::new("eval", "val_ppl", ppl));
    }
    let samples = gen_retrieval(&cfg.task, Some(val))?;
    recs.extend(eval_retrieval(model, &cfg.task, &samples)?.records("eval"));
    recs.extend(attention_to_answer(model, &samples, cfg.eval.method, heads)?.records("eval"));
    Ok(recs)
}

pub fn cmd_eval(cfg: &RunConfig, ckpt: &Path, heads_from: Option<&Path>, out: &Path) -> CliResult<Vec<MetricRecord>> {
    let corpus = cfg.corpus.load()?;
    let model = load(ckpt)?.model;
    let sel = match heads_from {
        Some(p) => Some(
            load(p)?
                .model
                .adapter
                .ok_or_else(|| CliError::config(format!("{} carries no adapter to take heads from", p.display())))?
                .selection,
        ),
        None => None,
    };
    let recs = evaluate(cfg, &model, &corpus, sel.as_ref())?;
    emit(out, &recs)?;
    Ok(recs)
}

/// Validation windows used by `analyze` and `effattn`.
pub fn analysis_batch(cfg: &RunConfig, corpus: &Corpus, max_seq: usize) -> CliResult<Batch> {
    let len = cfg.eval.analysis_length.min(max_seq);
    let src = if corpus.val().len() >= len { corpus.val() } else { corpus.train() };
    let mut rng = Rng::for_purpose(cfg.train.seed, "analysis.batch");
    let rows: Vec<Vec<usize>> = (0..cfg.eval.analysis_samples.max(1))
        .map(|_| sample_window(&mut rng, src, len))
        .collect::<Result<_, CoreError>>()?;
    Ok(Batch::from_rows(&rows)?)
}

fn traces(model: &TransformerModel<f32>, batch: &Batch, method: Method) -> CliResult<Vec<dexlab_core::model::HeadTrace>> {
    let f = model.forward(
        batch,
        &ForwardOptions {
            trace: true,
            no_loss: true,
            ..Default::default()
        },
    )?;
    let mut t = f.traces;
    effective_traces(model, &mut t, method)?;
    Ok(t)
}

pub fn cmd_analyze(cfg: &RunConfig, ckpt: &Path, compare: Option<&Path>, out: &Path) -> CliResult<Vec<MetricRecord>> {
    let corpus = cfg.corpus.load()?;
    let model = load(ckpt)?.model;
    let batch = analysis_batch(cfg, &corpus, model.config.max_seq)?;
    let tr = traces(&model, &batch, cfg.eval.method)?;
    let mut recs = analyze_traces(&tr, &cfg.analysis, "analyze")?;
    let imp = head_importance(&model, std::slice::from_ref(&batch))?;
    for (l, row) in importance_distribution(&imp)?.iter().enumerate() {
        for (rank, &v) in row.iter().enumerate() {
            recs.push(
                MetricRecord::new("analyze", "importance_sorted", v)
                    .layer(l)
                    .subset(format!("rank={rank}")),
            );
        }
        for (h, &v) in imp[l].iter().enumerate() {
            recs.push(MetricRecord::new("analyze", "head_importance", v).layer(l).head(h));
        }
    }
    if let Some(p) = compare {
        let other = load(p)?.model;
        let tb = traces(&other, &batch, cfg.eval.method)?;
        recs.extend(magnitude_correlation(&tr, &tb, "analyze")?);
    }
    emit(out, &recs)?;
    Ok(recs)
}

#[derive(Debug, Clone, Serialize)]
pub struct EffAttnRow {
    pub sample: usize,
    pub layer: usize,
    pub head: usize,
    pub method: &'static str,
    pub residual: f64,
    pub conditioning: f64,
}

pub fn cmd_effattn(cfg: &RunConfig, ckpt: &Path, out: &Path) -> CliResult<Vec<EffAttnRow>> {
    let corpus = cfg.corpus.load()?;
    let model = load(ckpt)?.model;
    let adapter = model
        .adapter
        .clone()
        .ok_or_else(|| CliError::config("effattn needs a checkpoint with an adapter"))?;
    let batch = analysis_batch(cfg, &corpus, model.config.max_seq)?;
    let f = model.forward(
        &batch,
        &ForwardOptions {
            trace: true,
            no_loss: true,
            ..Default::default()
        },
    )?;
    let mut rows = Vec::new();
    let mut recs = Vec::new();
    for t in f.traces.iter().filter(|t| t.adapted) {
        let w: dexlab_numcore::Tensor<f64> = model.param(&adapter.w_d_name(t.layer, t.head))?.cast();
        let p = effective_scores_pinv(&t.scores, &t.values, &w, t.lambda, DEFAULT_RCOND)?;
        let tag = |r: MetricRecord| r.layer(t.layer).head(t.head).subset(format!("sample={}", t.sample));
        rows.push(EffAttnRow {
            sample: t.sample,
            layer: t.layer,
            head: t.head,
            method: Method::Pinv.name(),
            residual: p.residual,
            conditioning: p.conditioning,
        });
        recs.push(tag(MetricRecord::new("effattn", "residual_pinv", p.residual)));
        match effective_scores_optim(&t.scores, &t.values, &w, t.lambda, DEFAULT_ITERS, DEFAULT_LR) {
            Ok(o) => {
                rows.push(EffAttnRow {
                    sample: t.sample,
                    layer: t.layer,
                    head: t.head,
                    method: Method::Optim.name(),
                    residual: o.residual,
                    conditioning: o.conditioning,
                });
                recs.push(tag(MetricRecord::new("effattn", "residual_optim", o.residual)));
                recs.push(tag(MetricRecord::new("effattn", "crosscheck", crosscheck(&p, &o)?)));
            }
            Err(CoreError::Diverged { .. }) => {
                recs.push(tag(MetricRecord::new("effattn", "optim_diverged", 1.0)));
            }
            Err(e) => return Err(e.into()),
        }
        if p.conditioning.is_finite() {
            recs.push(tag(MetricRecord::new("effattn", "conditioning", p.conditioning)));
        }
    }
    let mut buf = String::new();
    for r in &rows {
        buf.push_str(&serde_json::to_string(r).expect("row serializes"));
        buf.push('\n');
    }
    std::fs::write(out.join("effattn.jsonl"), buf)?;
    emit(out, &recs)?;
    Ok(rows)
}

pub fn cmd_bench(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let reports = bench(&cfg.bench)?;
    let mut buf = String::new();
    let mut recs = Vec::new();
    for r in &reports {
        buf.push_str(&serde_json::to_string(r).expect("report serializes"));
        buf.push('\n');
        recs.extend(r.records());
    }
    std::fs::write(out.join("bench.jsonl"), buf)?;
    emit(out, &recs)?;
    Ok(())
}

pub fn cmd_select_heads(cfg: &RunConfig, ckpt: &Path, out: &Path) -> CliResult<HeadSelection> {
    let corpus = cfg.corpus.load()?;
    let model = load(ckpt)?.model;
    if model.config.arch != Arch::Baseline || model.adapter.is_some() {
        return Err(CliError::config("head selection needs a plain baseline checkpoint"));
    }
    let data = DataMix {
        corpus: &corpus,
        task: Some(&cfg.task),
    };
    let calib = calibration_batches(&cfg.dex, &cfg.adapt, &data)?;
    let (scores, sel) = choose_heads(&model, &cfg.dex, &calib)?;
    let mut recs = Vec::new();
    if let Some(s) = scores {
        let metric = if cfg.dex.strategy == Strategy::ImportanceLow { "head_importance" } else { "head_entropy" };
        for (l, row) in s.iter().enumerate() {
            for (h, &v) in row.iter().enumerate() {
                recs.push(MetricRecord::new("select", metric, v).layer(l).head(h));
            }
        }
    }
    for (l, hs) in sel.layers.iter().enumerate() {
        for &h in hs {
            recs.push(MetricRecord::new("select", "selected", 1.0).layer(l).head(h));
        }
    }
    write_json(&out.join("selection.json"), &sel)?;
    emit(out, &recs)?;
    Ok(sel)
}
