use std::path::{Path, PathBuf};

use dexlab_core::analysis::AnalysisConfig;
use dexlab_core::dex::DexConfig;
use dexlab_core::effattn::Method;
use dexlab_core::model::{Arch, ModelConfig};
use dexlab_core::tasks::{ingest_text, Corpus, RetrievalTaskConfig, DEFAULT_VAL_FRACTION};
use dexlab_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Files or directories, read in sorted path order.
    pub paths: Vec<PathBuf>,
    pub val_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            paths: vec![],
            val_fraction: DEFAULT_VAL_FRACTION,
        }
    }
}

impl CorpusConfig {
    pub fn load(&self) -> CliResult<Corpus> {
        if self.paths.is_empty() {
            return Err(CliError::config("corpus.paths is empty"));
        }
        Ok(ingest_text(&self.paths, self.val_fraction)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Reconstruction used for adapted heads.
    pub method: Method,
    /// Validation tokens scored for perplexity.
    pub ppl_tokens: usize,
    /// Sequences traced by `analyze` and `effattn`.
    pub analysis_samples: usize,
    pub analysis_length: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            method: Method::Pinv,
            ppl_tokens: 1 << 16,
            analysis_samples: 8,
            analysis_length: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Any of baseline, baseline_half, diff, dex.
    pub archs: Vec<String>,
    pub seq_lens: Vec<usize>,
    pub batch: usize,
    pub warmup_batches: usize,
    pub measured_batches: usize,
    /// Shape of the benchmarked model; `arch` is overridden per run.
    pub model: ModelConfig,
    /// Fixed adapter lambda for the dex arch.
    pub lambda: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            archs: vec!["baseline".into(), "diff".into(), "dex".into()],
            seq_lens: vec![256, 4096],
            batch: 1,
            warmup_batches: 5,
            measured_batches: 30,
            model: ModelConfig {
                n_layers: 1,
                d_model: 128,
                n_heads: 4,
                n_kv_heads: 4,
                d_head: 128,
                d_ff: 256,
                max_seq: 4096,
                ..Default::default()
            },
            lambda: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run_id: String,
    pub out_dir: Option<PathBuf>,
    pub threads: usize,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub adapt: TrainConfig,
    pub dex: DexConfig,
    pub analysis: AnalysisConfig,
    pub task: RetrievalTaskConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            out_dir: None,
            threads: 1,
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            adapt: TrainConfig::adapt_default(),
            dex: DexConfig::default(),
            analysis: AnalysisConfig::default(),
            task: RetrievalTaskConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

/// Recursively overlays `patch` onto `base`; non-object values replace.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Applies one `a.b.c=value` override. The value is read as JSON when it
/// parses, as a plain string otherwise.
pub fn apply_override(v: &mut Value, spec: &str) -> CliResult<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {spec:?}")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
    let mut slot = v;
    for part in key.split('.') {
        slot = match slot {
            Value::Object(m) => m
                .get_mut(part)
                .ok_or_else(|| CliError::config(format!("unknown config key {key}")))?,
            _ => return Err(CliError::config(format!("config key {key} descends into a non-object"))),
        };
    }
    *slot = value;
    Ok(())
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut v = serde_json::to_value(RunConfig::default()).expect("default config serializes");
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::config(format!("reading {}: {e}", p.display())))?;
            let patch: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
            merge(&mut v, patch);
        }
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(v).map_err(|e| CliError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.adapt.validate()?;
        self.analysis.validate()?;
        if self.threads == 0 {
            return Err(CliError::config("threads must be at least 1"));
        }
        for a in &self.bench.archs {
            if a != "dex" && Arch::parse(a).is_none() {
                return Err(CliError::config(format!("bench.archs: unknown arch {a:?}")));
            }
        }
        Ok(())
    }

    /// Writes the resolved configuration to `config.json` in `dir`.
    pub fn echo(&self, dir: &Path) -> CliResult<()> {
        std::fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(dir.join("config.json"), text + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_and_typecheck() {
        let c = RunConfig::load(None, &["train.peak_lr=1e-4".into(), "model.arch=diff".into()]).unwrap();
        assert_eq!(c.train.peak_lr, 1e-4);
        assert_eq!(c.model.arch, Arch::Diff);
        assert!(RunConfig::load(None, &["train.peak_lrr=1".into()]).is_err());
        assert!(RunConfig::load(None, &["train.peak_lr=fast".into()]).is_err());
        assert!(matches!(
            RunConfig::load(None, &["train".into()]),
            Err(CliError::Usage(_))
        ));
    }

    #[test]
    fn echo_reloads_identically() {
        let dir = tempfile::tempdir().unwrap();
        let c = RunConfig::load(None, &["dex.lambda_init=\"depth_aware\"".into(), "dex.k=2".into()]).unwrap();
        c.echo(dir.path()).unwrap();
        let back = RunConfig::load(Some(&dir.path().join("config.json")), &[]).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn file_patch_is_partial() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"model": {"n_layers": 2}, "dex": {"lambda_init": 0.3}}"#).unwrap();
        let c = RunConfig::load(Some(&p), &[]).unwrap();
        assert_eq!(c.model.n_layers, 2);
        assert_eq!(c.model.d_model, 128);
        std::fs::write(&p, r#"{"modle": {}}"#).unwrap();
        assert!(RunConfig::load(Some(&p), &[]).is_err());
    }
}
