use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dygmamba::pipeline::{self, RunConfig};
use dygmamba::{Error, Result};
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(
    name = "dygmamba",
    version,
    about = "Selective state-space link prediction on temporal graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Write the planted synthetic dataset to --out.
    Synth,
    /// Train one model per seed and evaluate it on the test span.
    Train,
    /// Evaluate saved checkpoints.
    Eval,
    /// Score the EdgeBank baselines.
    Edgebank,
    /// Time the scan against attention over growing lengths.
    Bench,
}

/// Flags override the config file, which overrides the defaults.
#[derive(Args, Debug, Default)]
struct Opts {
    /// `key=value` config file, one setting per line.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Edge CSV, or a directory holding edges.csv.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    rho: Option<usize>,
    #[arg(long, global = true)]
    patch: Option<usize>,
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    d: Option<usize>,
    #[arg(long, global = true, value_parser = ["full", "a", "b"])]
    variant: Option<String>,
    #[arg(long, global = true, value_parser = ["random", "historical", "inductive"])]
    nss: Option<String>,
    #[arg(long, global = true, value_parser = ["transductive", "inductive"])]
    setting: Option<String>,
    /// Checkpoint for eval (default: each seed's training checkpoint).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Any other config key, e.g. `--set lr=0.001`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Opts {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        push("data", path(&self.data));
        push("out", path(&self.out));
        push("checkpoint", path(&self.checkpoint));
        push("seed", self.seed.map(|v| v.to_string()));
        push("rho", self.rho.map(|v| v.to_string()));
        push("patch", self.patch.map(|v| v.to_string()));
        push("k", self.k.map(|v| v.to_string()));
        push("d", self.d.map(|v| v.to_string()));
        push("variant", self.variant.clone());
        push("nss", self.nss.clone());
        push("setting", self.setting.clone());
        Ok(out)
    }

    fn resolve(&self) -> Result<RunConfig> {
        let text = match &self.config {
            Some(p) => Some(
                std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?,
            ),
            None => None,
        };
        RunConfig::resolve(text.as_deref(), &self.overrides()?)
    }
}

fn print_json(v: Value) {
    println!("{v}");
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.opts.resolve()?;
    match cli.command {
        Command::Synth => {
            pipeline::run_synth(&cfg)?;
            print_json(json!({ "written": cfg.out.display().to_string() }));
        }
        Command::Train => {
            let runs = pipeline::run_train(&cfg, |seed, r| {
                eprintln!(
                    "{}",
                    json!({ "seed": seed, "epoch": r.epoch, "train_loss": r.train_loss, "val_ap": r.val_ap })
                );
            })?;
            for r in &runs {
                print_json(json!(r.report));
            }
        }
        Command::Eval => {
            for r in pipeline::run_eval(&cfg)? {
                print_json(json!(r));
            }
        }
        Command::Edgebank => {
            for r in pipeline::run_edgebank(&cfg)? {
                print_json(json!(r));
            }
        }
        Command::Bench => {
            for r in pipeline::run_bench(&cfg)? {
                print_json(json!({
                    "seq_len": r.seq_len,
                    "scan_ns": r.scan_ns,
                    "attention_ns": r.attn_ns,
                    "reps": r.reps,
                    "width": r.channel_width,
                }));
            }
        }
    }
    Ok(())
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message, "exit_code": code }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim_end(), 2),
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => fail(e.kind(), &e.to_string(), 2),
        Err(e) => fail(e.kind(), &e.to_string(), 1),
    }
}
