//! Forward-only latency and throughput for each attention variant.

use std::time::Instant;

use dexlab_core::dex::{DexAdapter, DexConfig, HeadSelection, ScheduleMode};
use dexlab_core::metrics::MetricRecord;
use dexlab_core::model::{Arch, Batch, ForwardOptions, TransformerModel};
use dexlab_numcore::Rng;
use serde::Serialize;

use crate::alloc;
use crate::config::BenchConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub arch: String,
    pub seq_len: usize,
    pub batch: usize,
    pub warmup_batches: usize,
    pub measured_batches: usize,
    pub tokens_per_second_mean: f64,
    pub tokens_per_second_median: f64,
    pub latency_ms_mean: f64,
    pub latency_ms_median: f64,
    pub latency_ms_p95: f64,
    /// Allocator high-water mark above the pre-run live size; approximate.
    pub peak_memory_bytes: usize,
}

impl BenchReport {
    pub fn records(&self) -> Vec<MetricRecord> {
        let subset = format!("arch={},seq_len={},batch={}", self.arch, self.seq_len, self.batch);
        [
            ("bench_tokens_per_second_mean", self.tokens_per_second_mean),
            ("bench_tokens_per_second_median", self.tokens_per_second_median),
            ("bench_latency_ms_mean", self.latency_ms_mean),
            ("bench_latency_ms_median", self.latency_ms_median),
            ("bench_latency_ms_p95", self.latency_ms_p95),
            ("bench_peak_memory_bytes", self.peak_memory_bytes as f64),
        ]
        .into_iter()
        .map(|(m, v)| MetricRecord::new("bench", m, v).subset(subset.clone()))
        .collect()
    }
}

/// Builds the benchmarked model. `dex` is a baseline with a first-k
/// adapter, random `W_D` and lambda pinned to `cfg.lambda`.
pub fn bench_model(cfg: &BenchConfig, arch: &str) -> CliResult<TransformerModel<f32>> {
    let mut mc = cfg.model.clone();
    let is_dex = arch == "dex";
    mc.arch = if is_dex {
        Arch::Baseline
    } else {
        Arch::parse(arch).ok_or_else(|| CliError::config(format!("unknown bench arch {arch:?}")))?
    };
    let mut model = TransformerModel::init(mc.clone(), cfg.seed)?;
    if is_dex {
        let dex = DexConfig {
            schedule: ScheduleMode::NoAnneal,
            lambda_init: dexlab_core::model::LambdaInit::Constant(cfg.lambda),
            ..Default::default()
        };
        let heads = mc.layout().heads;
        let sel = HeadSelection::first_k(mc.n_layers, dex.k_for(heads)?);
        model.attach_adapter(DexAdapter::new(sel, &dex, &mc, 1)?)?;
        let mut rng = Rng::for_purpose(cfg.seed, "bench.w_d");
        for (name, p) in model.params.iter_mut() {
            if name.contains(".dex.w_d") {
                let n = p.tensor.numel();
                p.tensor.data_mut().copy_from_slice(&rng.normal_vec(n, 0.02));
            }
        }
    }
    Ok(model)
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn check_run(cfg: &BenchConfig, seq_len: usize) -> CliResult<()> {
    if cfg.batch == 0 {
        return Err(CliError::config("bench.batch must be at least 1"));
    }
    if cfg.measured_batches == 0 {
        return Err(CliError::config("bench.measured_batches must be at least 1"));
    }
    if seq_len > cfg.model.max_seq {
        return Err(CliError::config(format!(
            "bench seq_len {seq_len} exceeds bench.model.max_seq {}",
            cfg.model.max_seq
        )));
    }
    Ok(())
}

fn report(cfg: &BenchConfig, arch: &str, seq_len: usize, lat: &[f64], peak: usize) -> BenchReport {
    let toks = (cfg.batch * seq_len) as f64;
    let tps: Vec<f64> = lat.iter().map(|l| toks / l).collect();
    let ms: Vec<f64> = lat.iter().map(|l| l * 1e3).collect();
    let mut sorted = ms.clone();
    sorted.sort_by(f64::total_cmp);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    BenchReport {
        arch: arch.into(),
        seq_len,
        batch: cfg.batch,
        warmup_batches: cfg.warmup_batches,
        measured_batches: lat.len(),
        tokens_per_second_mean: mean(&tps),
        tokens_per_second_median: median(&tps),
        latency_ms_mean: mean(&ms),
        latency_ms_median: median(&ms),
        latency_ms_p95: percentile(&sorted, 0.95),
        peak_memory_bytes: peak,
    }
}

pub fn bench_one(cfg: &BenchConfig, arch: &str, seq_len: usize) -> CliResult<BenchReport> {
    Ok(bench_seq(cfg, &[arch.to_string()], seq_len)?.remove(0))
}

/// Measures every arch at one length. Measured batches go round-robin over
/// the archs so that drift in machine speed hits all of them alike.
pub fn bench_seq(cfg: &BenchConfig, archs: &[String], seq_len: usize) -> CliResult<Vec<BenchReport>> {
    check_run(cfg, seq_len)?;
    let models = archs
        .iter()
        .map(|a| bench_model(cfg, a))
        .collect::<CliResult<Vec<_>>>()?;
    let mut rng = Rng::for_purpose(cfg.seed, "bench.tokens");
    let vocab = cfg.model.vocab_size;
    let tokens = (0..cfg.batch * seq_len).map(|_| rng.below(vocab)).collect();
    let batch = Batch::new(tokens, cfg.batch, seq_len)?;
    let opts = ForwardOptions {
        no_loss: true,
        ..Default::default()
    };
    for m in &models {
        for _ in 0..cfg.warmup_batches {
            drop(m.forward(&batch, &opts)?);
        }
    }
    let mut lat = vec![Vec::with_capacity(cfg.measured_batches); models.len()];
    let mut peak = vec![0usize; models.len()];
    for _ in 0..cfg.measured_batches {
        for (i, m) in models.iter().enumerate() {
            let base = alloc::current_bytes();
            alloc::reset_peak();
            let t = Instant::now();
            let f = m.forward(&batch, &opts)?;
            lat[i].push(t.elapsed().as_secs_f64());
            drop(f);
            peak[i] = peak[i].max(alloc::peak_bytes().saturating_sub(base));
        }
    }
    Ok(archs
        .iter()
        .zip(lat.iter().zip(&peak))
        .map(|(a, (l, &p))| report(cfg, a, seq_len, l, p))
        .collect())
}

pub fn bench(cfg: &BenchConfig) -> CliResult<Vec<BenchReport>> {
    let mut out = Vec::new();
    for &s in &cfg.seq_lens {
        out.extend(bench_seq(cfg, &cfg.archs, s)?);
    }
    Ok(out)
}
