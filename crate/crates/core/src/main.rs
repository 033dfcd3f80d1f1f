use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use reviewlens::cli::{execute, out_root, rerun, Command};
use reviewlens::config::RunConfig;
use reviewlens::{Error, Result};

/// Layer-wise visual masking probes and contrastive-attention review masking
/// on a toy grid-VQA transformer.
///
/// Any config key can be overridden with `--section.key=value`
/// (or `--set section.key=value`).
#[derive(Parser)]
#[command(name = "reviewlens", version)]
struct Cli {
    /// Output root; defaults to $REVIEWLENS_OUT, then ./runs. Each command
    /// writes into `<root>/<command>`.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Sub,
}

#[derive(Args)]
struct Common {
    /// TOML run config (defaults are used when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct Inputs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSONL eval set; regenerated from [task] when omitted.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Sub {
    /// Write the default config.
    InitConfig { path: PathBuf },
    /// Train the toy model.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Layer-wise masking sweep and fusion/review layer detection.
    Probe {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Contrastive-attention review masking over the eval set.
    Contrast {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        /// fusion_report.toml from `probe`.
        #[arg(long)]
        report: PathBuf,
    },
    /// Accuracy and latency over a grid of mask ratios.
    SweepRatio {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        report: PathBuf,
    },
    /// Re-execute a run from its manifest.
    Rerun { manifest: PathBuf },
}

/// Rewrites `--a.b=v` and `--a.b v` into `--set a.b=v`.
fn expand_dotted(args: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut out = Vec::new();
    let mut it = args.into_iter().peekable();
    while let Some(a) = it.next() {
        let Some(body) = a.strip_prefix("--") else {
            out.push(a);
            continue;
        };
        let key = body.split('=').next().unwrap_or("");
        if !key.contains('.') {
            out.push(a);
            continue;
        }
        out.push("--set".into());
        if body.contains('=') {
            out.push(body.to_string());
        } else {
            let v = it.next().unwrap_or_default();
            out.push(format!("{key}={v}"));
        }
    }
    out
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let base = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let overrides = common
        .set
        .iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::usage(format!("override `{kv}` is not KEY=VALUE")))
        })
        .collect::<Result<Vec<_>>>()?;
    base.with_overrides(&overrides)
}

fn run(cli: Cli) -> Result<()> {
    let root = out_root(cli.out_dir.as_deref());
    let (command, common) = match cli.cmd {
        Sub::InitConfig { path } => {
            let text = RunConfig::default().to_toml();
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            println!("wrote {}", path.display());
            return Ok(());
        }
        Sub::Rerun { manifest } => {
            let m = reviewlens::cli::RunManifest::load(&manifest)?;
            let dir = root.join("rerun").join(&m.command);
            let m = rerun(&manifest, &dir)?;
            report(&m, &dir);
            return Ok(());
        }
        Sub::Train { common } => (Command::Train, common),
        Sub::Probe { common, inputs } => (
            Command::Probe {
                checkpoint: inputs.checkpoint,
                dataset: inputs.dataset,
            },
            common,
        ),
        Sub::Contrast {
            common,
            inputs,
            report,
        } => (
            Command::Contrast {
                checkpoint: inputs.checkpoint,
                dataset: inputs.dataset,
                report,
            },
            common,
        ),
        Sub::SweepRatio {
            common,
            inputs,
            report,
        } => (
            Command::SweepRatio {
                checkpoint: inputs.checkpoint,
                dataset: inputs.dataset,
                report,
            },
            common,
        ),
    };
    let config = resolve(&common)?;
    let dir = root.join(command.name());
    let m = execute(&command, &config, &dir)?;
    report(&m, &dir);
    Ok(())
}

fn report(m: &reviewlens::cli::RunManifest, dir: &Path) {
    for w in &m.warnings {
        eprintln!("warning: {w}");
    }
    println!("{} finished in {:.1}s; outputs in {}", m.command, m.duration_s, dir.display());
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse_from(expand_dotted(std::env::args())) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::expand_dotted;

    #[test]
    fn dotted_flags_become_set() {
        let args = ["x", "train", "--train.n_steps=5", "--model.seed", "3", "--config", "c.toml"];
        let out = expand_dotted(args.iter().map(|s| s.to_string()));
        assert_eq!(
            out,
            ["x", "train", "--set", "train.n_steps=5", "--set", "model.seed=3", "--config", "c.toml"]
        );
    }
}
