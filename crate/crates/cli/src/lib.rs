//! Command-line front end: configuration, run directories, metric emission
//! and the inference benchmark.

pub mod alloc;
pub mod bench;
pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::commands::Sweep;
use crate::config::RunConfig;
use crate::error::CliResult;

#[global_allocator]
static GLOBAL: alloc::Tracking = alloc::Tracking;

pub const THREADS_ENV: &str = "DEXLAB_THREADS";

#[derive(Debug, Parser)]
#[command(name = "dexlab", version, about = "Toy-scale differential attention and DEX experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config; missing fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `train.peak_lr=1e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Run directory; defaults to `out_dir` from the config, then `runs/<run_id>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from scratch.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        arch: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Attach the DEX adapter to a baseline checkpoint and train it.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Run one adaptation per ablation value instead of one.
        #[arg(long, value_enum)]
        sweep: Option<Sweep>,
    },
    /// Perplexity, retrieval accuracy and attention to the answer.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// Measure attention on the heads adapted in this checkpoint.
        #[arg(long)]
        heads_from: Option<PathBuf>,
    },
    /// Attention-map statistics, optionally against a second model.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Effective attention of adapted heads by both reconstruction methods.
    Effattn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Forward latency and throughput per architecture.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        arch: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        seq: Vec<usize>,
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Score heads on calibration data and write the chosen set.
    SelectHeads {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        k: Option<usize>,
    },
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Pretrain { common, .. }
            | Command::Adapt { common, .. }
            | Command::Eval { common, .. }
            | Command::Analyze { common, .. }
            | Command::Effattn { common, .. }
            | Command::Bench { common, .. }
            | Command::SelectHeads { common, .. } => common,
        }
    }

    /// Subcommand flags rewritten as config overrides, applied after `--set`.
    fn overrides(&self) -> Vec<String> {
        let mut o = self.common().set.clone();
        let strategy_k = |strategy: &Option<String>, k: &Option<usize>, o: &mut Vec<String>| {
            if let Some(s) = strategy {
                o.push(format!("dex.strategy={}", json_str(s)));
            }
            if let Some(k) = k {
                o.push(format!("dex.k={k}"));
            }
        };
        match self {
            Command::Pretrain { arch, seed, .. } => {
                if let Some(a) = arch {
                    o.push(format!("model.arch={}", json_str(a)));
                }
                if let Some(s) = seed {
                    o.push(format!("train.seed={s}"));
                }
            }
            Command::Adapt { strategy, k, seed, .. } => {
                strategy_k(strategy, k, &mut o);
                if let Some(s) = seed {
                    o.push(format!("adapt.seed={s}"));
                }
            }
            Command::SelectHeads { strategy, k, .. } => strategy_k(strategy, k, &mut o),
            Command::Bench { arch, seq, batch, .. } => {
                if !arch.is_empty() {
                    o.push(format!("bench.archs={}", serde_json::to_string(arch).unwrap()));
                }
                if !seq.is_empty() {
                    o.push(format!("bench.seq_lens={}", serde_json::to_string(seq).unwrap()));
                }
                if let Some(b) = batch {
                    o.push(format!("bench.batch={b}"));
                }
            }
            _ => {}
        }
        o
    }
}

fn effective_threads(cfg: &RunConfig) -> usize {
    let env = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0);
    match env {
        Some(cap) => cfg.threads.min(cap),
        None => cfg.threads,
    }
}

fn out_dir(cfg: &RunConfig, flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.run_id))
}

pub fn execute(cli: Cli) -> CliResult<()> {
    let cmd = cli.command;
    let common = cmd.common();
    let mut cfg = RunConfig::load(common.config.as_deref(), &cmd.overrides())?;
    let out = out_dir(&cfg, common.out.as_deref());
    cfg.out_dir = Some(out.clone());
    dexlab_numcore::kernels::set_threads(effective_threads(&cfg));
    cfg.echo(&out)?;
    match &cmd {
        Command::Pretrain { .. } => {
            commands::cmd_pretrain(&cfg, &out)?;
        }
        Command::Adapt { base, sweep, .. } => match sweep {
            Some(s) => {
                commands::cmd_sweep(&cfg, base, &out, *s)?;
            }
            None => {
                commands::cmd_adapt(&cfg, base, &out)?;
            }
        },
        Command::Eval { ckpt, heads_from, .. } => {
            commands::cmd_eval(&cfg, ckpt, heads_from.as_deref(), &out)?;
        }
        Command::Analyze { ckpt, compare, .. } => {
            commands::cmd_analyze(&cfg, ckpt, compare.as_deref(), &out)?;
        }
        Command::Effattn { ckpt, .. } => {
            commands::cmd_effattn(&cfg, ckpt, &out)?;
        }
        Command::Bench { .. } => commands::cmd_bench(&cfg, &out)?,
        Command::SelectHeads { ckpt, .. } => {
            commands::cmd_select_heads(&cfg, ckpt, &out)?;
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}: {e}", e.category());
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("dexlab").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_become_overrides() {
        let c = parse(&["pretrain", "--arch", "diff", "--seed", "3", "--set", "train.peak_lr=1e-3"]);
        assert_eq!(
            c.command.overrides(),
            vec!["train.peak_lr=1e-3", "model.arch=\"diff\"", "train.seed=3"]
        );
        let c = parse(&["bench", "--arch", "baseline,dex", "--seq", "64,128", "--batch", "2"]);
        assert_eq!(
            c.command.overrides(),
            vec!["bench.archs=[\"baseline\",\"dex\"]", "bench.seq_lens=[64,128]", "bench.batch=2"]
        );
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run(["dexlab", "--help"]), 0);
        assert_eq!(run(["dexlab", "frobnicate"]), 2);
        assert_eq!(run(["dexlab", "pretrain", "--bogus"]), 2);
        assert_eq!(run(["dexlab", "eval", "--set", "noequals", "--ckpt", "x"]), 2);
    }

    #[test]
    fn threads_capped_by_env() {
        let cfg = RunConfig {
            threads: 4,
            ..Default::default()
        };
        std::env::set_var(THREADS_ENV, "2");
        assert_eq!(effective_threads(&cfg), 2);
        std::env::remove_var(THREADS_ENV);
        assert_eq!(effective_threads(&cfg), 4);
    }
}
