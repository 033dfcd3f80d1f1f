//! Subcommand orchestration: each run reads a resolved [`RunConfig`], writes
//! its outputs into one directory and finishes by writing `manifest.toml`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::contrastive::{self, ContrastConfig};
use crate::error::{Error, Result};
use crate::model::{init_model, to_hex, Model};
use crate::probe::{self, FusionReport};
use crate::tasks::{self, generate_dataset, SyntheticSample, Vocab};
use crate::trainer;

pub const OUT_ENV: &str = "REVIEWLENS_OUT";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const LOCK_FILE: &str = ".reviewlens.lock";

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Train,
    Probe {
        checkpoint: PathBuf,
        dataset: Option<PathBuf>,
    },
    Contrast {
        checkpoint: PathBuf,
        dataset: Option<PathBuf>,
        report: PathBuf,
    },
    SweepRatio {
        checkpoint: PathBuf,
        dataset: Option<PathBuf>,
        report: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Probe { .. } => "probe",
            Command::Contrast { .. } => "contrast",
            Command::SweepRatio { .. } => "sweep-ratio",
        }
    }

    fn inputs(&self) -> Vec<(&'static str, &Path)> {
        let mut v = Vec::new();
        match self {
            Command::Train => {}
            Command::Probe { checkpoint, dataset } => {
                v.push(("checkpoint", checkpoint.as_path()));
                if let Some(d) = dataset {
                    v.push(("dataset", d.as_path()));
                }
            }
            Command::Contrast {
                checkpoint,
                dataset,
                report,
            }
            | Command::SweepRatio {
                checkpoint,
                dataset,
                report,
            } => {
                v.push(("checkpoint", checkpoint.as_path()));
                if let Some(d) = dataset {
                    v.push(("dataset", d.as_path()));
                }
                v.push(("report", report.as_path()));
            }
        }
        v
    }

    fn from_inputs(name: &str, inputs: &BTreeMap<String, FileRecord>) -> Result<Self> {
        let get = |role: &str| -> Result<PathBuf> {
            inputs
                .get(role)
                .map(|f| f.path.clone())
                .ok_or_else(|| Error::Format(format!("manifest lacks input `{role}`")))
        };
        let dataset = inputs.get("dataset").map(|f| f.path.clone());
        Ok(match name {
            "train" => Command::Train,
            "probe" => Command::Probe {
                checkpoint: get("checkpoint")?,
                dataset,
            },
            "contrast" => Command::Contrast {
                checkpoint: get("checkpoint")?,
                dataset,
                report: get("report")?,
            },
            "sweep-ratio" => Command::SweepRatio {
                checkpoint: get("checkpoint")?,
                dataset,
                report: get("report")?,
            },
            other => return Err(Error::Format(format!("manifest names unknown command `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub model: u64,
    pub task: u64,
    pub train: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub duration_s: f64,
    pub warnings: Vec<String>,
    pub seeds: Seeds,
    /// Input role (`checkpoint`, `dataset`, `report`) to file.
    pub inputs: BTreeMap<String, FileRecord>,
    /// Output file names, relative to the run directory.
    pub outputs: Vec<FileRecord>,
    pub config: RunConfig,
}

impl RunManifest {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let m: RunManifest = toml::from_str(text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        // re-validate the embedded config strictly
        RunConfig::from_toml(&m.config.to_toml())?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(to_hex(&Sha256::digest(&bytes)))
}

/// `--out-dir` if given, else `$REVIEWLENS_OUT`, else `./runs`.
pub fn out_root(flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var_os(OUT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from("runs"),
    }
}

/// Advisory lock held for the lifetime of a run.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::usage(format!(
                "{} is locked by another run (remove {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

struct Run {
    dir: PathBuf,
    outputs: Vec<String>,
    warnings: Vec<String>,
}

impl Run {
    fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.dir.join(name)
    }
}

/// Runs `command` with `config`, writing everything into `out_dir`.
pub fn execute(command: &Command, config: &RunConfig, out_dir: &Path) -> Result<RunManifest> {
    config.validate()?;
    let start = Instant::now();
    let mut inputs = BTreeMap::new();
    for (role, p) in command.inputs() {
        let path = fs::canonicalize(p).map_err(|e| Error::io(p, e))?;
        let sha256 = sha256_file(&path)?;
        inputs.insert(role.to_string(), FileRecord { path, sha256 });
    }

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let _lock = DirLock::acquire(out_dir)?;
    let mut run = Run {
        dir: out_dir.to_path_buf(),
        outputs: Vec::new(),
        warnings: Vec::new(),
    };
    let mut config = config.clone();

    match command {
        Command::Train => cmd_train(&config, &mut run)?,
        Command::Probe { checkpoint, dataset } => {
            let (model, eval) = load_inputs(&mut config, checkpoint, dataset.as_deref(), &mut run)?;
            cmd_probe(&config, &model, &eval, &mut run)?
        }
        Command::Contrast {
            checkpoint,
            dataset,
            report,
        } => {
            let (model, eval) = load_inputs(&mut config, checkpoint, dataset.as_deref(), &mut run)?;
            let report = FusionReport::load(report)?;
            cmd_contrast(&config, &model, &eval, &report, &mut run)?
        }
        Command::SweepRatio {
            checkpoint,
            dataset,
            report,
        } => {
            let (model, eval) = load_inputs(&mut config, checkpoint, dataset.as_deref(), &mut run)?;
            let report = FusionReport::load(report)?;
            cmd_sweep_ratio(&config, &model, &eval, &report, &mut run)?
        }
    }

    let mut outputs = Vec::with_capacity(run.outputs.len());
    for name in &run.outputs {
        outputs.push(FileRecord {
            path: PathBuf::from(name),
            sha256: sha256_file(&run.dir.join(name))?,
        });
    }
    let manifest = RunManifest {
        command: command.name().to_string(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        duration_s: start.elapsed().as_secs_f64(),
        warnings: run.warnings,
        seeds: Seeds {
            model: config.model.seed,
            task: config.task.seed,
            train: config.train.seed,
        },
        inputs,
        outputs,
        config,
    };
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_toml()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Re-executes the run recorded in `manifest_path`. Inputs must still match
/// their recorded checksums.
pub fn rerun(manifest_path: &Path, out_dir: &Path) -> Result<RunManifest> {
    let m = RunManifest::load(manifest_path)?;
    for (role, f) in &m.inputs {
        let now = sha256_file(&f.path)?;
        if now != f.sha256 {
            return Err(Error::Format(format!(
                "{role} input {} changed since the recorded run",
                f.path.display()
            )));
        }
    }
    let command = Command::from_inputs(&m.command, &m.inputs)?;
    execute(&command, &m.config, out_dir)
}

fn load_inputs(
    config: &mut RunConfig,
    checkpoint: &Path,
    dataset: Option<&Path>,
    run: &mut Run,
) -> Result<(Model, Vec<SyntheticSample>)> {
    let model = checkpoint::load(checkpoint)?;
    if model.config != config.model {
        run.warnings
            .push("checkpoint model config differs from [model]; the checkpoint's config was used".into());
        config.model = model.config.clone();
    }
    config.task.check_fits(model.config.vocab_size, model.config.max_seq_len)?;
    let eval = match dataset {
        Some(p) => {
            let samples = tasks::read_dataset(p)?;
            let vocab = config.task.vocab();
            for s in &samples {
                vocab.sequence(s)?;
            }
            samples
        }
        None => generate_dataset(&config.task, model.config.vocab_size)?.1,
    };
    if eval.is_empty() {
        return Err(Error::usage("evaluation set is empty"));
    }
    Ok((model, eval))
}

fn cmd_train(config: &RunConfig, run: &mut Run) -> Result<()> {
    let (train_set, eval_set) = generate_dataset(&config.task, config.model.vocab_size)?;
    tasks::write_dataset(&run.path("train.jsonl"), &train_set)?;
    tasks::write_dataset(&run.path("eval.jsonl"), &eval_set)?;
    let model = init_model(config.model.clone())?;
    let vocab = config.task.vocab();
    let out = trainer::train(model, &vocab, &train_set, &eval_set, &config.train)?;
    trainer::write_curve_csv(&run.path("curve.csv"), &out.curve)?;
    checkpoint::save(&out.model, &run.path("model.ckpt"))?;
    let chance = 1.0 / config.task.n_colors as f64;
    if out.final_eval_accuracy <= chance + probe::CHANCE_MARGIN {
        run.warnings.push(format!(
            "final eval accuracy {:.4} is at chance level",
            out.final_eval_accuracy
        ));
    }
    Ok(())
}

fn cmd_probe(config: &RunConfig, model: &Model, eval: &[SyntheticSample], run: &mut Run) -> Result<()> {
    let vocab = config.task.vocab();
    let sweep = probe::layer_mask_sweep(model, &vocab, eval, &config.probe.sweep_options())?;
    probe::write_sweep_csv(&run.path("sweep.csv"), &sweep)?;
    run.warnings.extend(sweep.warnings.iter().cloned());

    let chance = 1.0 / config.task.n_colors as f64;
    match FusionReport::from_sweep(&sweep, chance, &config.probe.rule()) {
        Ok(report) => {
            if report.review_layer.is_none() {
                run.warnings.push("no review layer detected".into());
            }
            report.save(&run.path("fusion_report.toml"))?;
        }
        Err(e @ Error::Inapplicable(_)) => run.warnings.push(format!("no fusion report: {e}")),
        Err(e) => return Err(e),
    }

    match probe::distance_to_final_curve(model, &vocab, eval) {
        Ok(curve) => {
            write_distance_csv(&run.path("distance_curve.csv"), &curve)?;
            if curve.n_skipped > 0 {
                run.warnings.push(format!(
                    "distance curve skipped {} samples with no image attention",
                    curve.n_skipped
                ));
            }
        }
        Err(e @ Error::Degenerate(_)) => run.warnings.push(format!("no distance curve: {e}")),
        Err(e) => return Err(e),
    }
    Ok(())
}

fn write_distance_csv(path: &Path, curve: &probe::DistanceCurve) -> Result<()> {
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(fmt)?;
    w.write_record(["layer", "hellinger_to_final"]).map_err(fmt)?;
    for (l, d) in curve.distances.iter().enumerate() {
        w.write_record([l.to_string(), d.to_string()]).map_err(fmt)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastReport {
    pub n_samples: usize,
    pub accuracy: f64,
    pub plain_accuracy: f64,
    pub mean_latency_s: f64,
    pub mean_localization_ia: f64,
    pub mean_localization_post: f64,
    pub mean_localization_pre: f64,
    pub strategy: String,
    pub candidates: Vec<usize>,
    pub review_layer: usize,
    pub post_integrated: usize,
    pub rho: f64,
    pub lambda: f64,
}

fn contrast_config(config: &RunConfig, model: &Model, report: &FusionReport, rho: f64, lambda: f64) -> ContrastConfig {
    ContrastConfig {
        strategy: config.contrast.strategy(model.n_layers(), &report.fusion_set),
        rho,
        lambda,
    }
}

fn cmd_contrast(
    config: &RunConfig,
    model: &Model,
    eval: &[SyntheticSample],
    report: &FusionReport,
    run: &mut Run,
) -> Result<()> {
    let vocab = config.task.vocab();
    let (r, k) = report.review_and_post()?;
    let cfg = contrast_config(config, model, report, config.contrast.rho, config.contrast.lambda);
    let candidates = contrastive::candidate_set(&cfg.strategy, model.n_layers(), k)?;
    let plain_accuracy = tasks::accuracy(model, &vocab, eval, &[])?;
    let res = contrastive::evaluate(
        model,
        &vocab,
        eval,
        report,
        &cfg,
        config.probe.latency_repeats,
        config.probe.latency_batch,
    )?;
    if res.mean_localization_ia.is_nan() {
        run.warnings
            .push("contrastive attention was identically zero on every sample".into());
    }

    let out = ContrastReport {
        n_samples: eval.len(),
        accuracy: res.accuracy,
        plain_accuracy,
        mean_latency_s: res.mean_latency,
        mean_localization_ia: res.mean_localization_ia,
        mean_localization_post: res.mean_localization_post,
        mean_localization_pre: res.mean_localization_pre,
        strategy: cfg.strategy.name().to_string(),
        candidates: candidates.clone(),
        review_layer: r,
        post_integrated: k,
        rho: cfg.rho,
        lambda: cfg.lambda,
    };
    let path = run.path("contrast_report.toml");
    fs::write(&path, toml::to_string(&out).expect("report serializes")).map_err(|e| Error::io(&path, e))?;
    contrastive::write_histogram_csv(&run.path("selection_histogram.csv"), &res.selection_histogram, &candidates)?;

    if config.contrast.diagnostics {
        let path = run.path("diagnostics.jsonl");
        let mut buf = String::new();
        for (i, (r, s)) in res.results.iter().zip(eval).enumerate() {
            let loc = r.localization(&s.relevance)?;
            let line = serde_json::json!({
                "index": i,
                "answer": s.answer,
                "prediction": r.prediction,
                "pre_integrated": r.selection.pre_integrated,
                "masked_indices": r.masked_indices,
                "ia": r.ia,
                "localization_ia": loc.ia,
                "localization_pre": loc.pre,
                "localization_post": loc.post,
            });
            buf.push_str(&line.to_string());
            buf.push('\n');
        }
        fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn cmd_sweep_ratio(
    config: &RunConfig,
    model: &Model,
    eval: &[SyntheticSample],
    report: &FusionReport,
    run: &mut Run,
) -> Result<()> {
    let vocab: Vocab = config.task.vocab();
    report.review_and_post()?;
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    let path = run.path("ratio_sweep.csv");
    let mut w = csv::Writer::from_path(&path).map_err(fmt)?;
    w.write_record(["rho", "accuracy", "mean_latency_s"]).map_err(fmt)?;
    for &rho in &config.sweep.rhos {
        let cfg = contrast_config(config, model, report, rho, config.sweep.lambda);
        let res = contrastive::evaluate(
            model,
            &vocab,
            eval,
            report,
            &cfg,
            config.probe.latency_repeats,
            config.probe.latency_batch,
        )?;
        w.write_record([rho.to_string(), res.accuracy.to_string(), res.mean_latency.to_string()])
            .map_err(fmt)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}
