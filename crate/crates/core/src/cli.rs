//! Command-line surface. Exit codes: 0 ok, 1 runtime failure, 2 usage or
//! configuration error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::degrade::{gen_dataset, load_dataset, DegradeParams, Source};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::gradsuite;
use crate::imageio;
use crate::model::{Model, ModelConfig};
use crate::seg::{naive_segment, MaskSet, MaskSource};
use crate::train::{evaluate, train, Adam, TrainConfig, CSV_HEADER};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { dataset: "data".into(), checkpoint: "run/model.sgsf".into(), reports: "run".into() }
    }
}

impl Paths {
    pub fn loss_csv(&self) -> PathBuf {
        self.reports.join("loss.csv")
    }

    pub fn eval_report(&self) -> PathBuf {
        self.reports.join("eval.json")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub degrade: DegradeParams,
    pub train: TrainConfig,
    pub paths: Paths,
}

impl RunConfig {
    /// Strict parse; errors name the offending key with its section.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if path == "." {
                Error::Config(inner.to_string())
            } else {
                Error::Config(format!("at '{}': {}", path, inner))
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fsutil::read_to_string(path).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {}", path.display(), m)),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.degrade.validate()?;
        self.train.validate()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[derive(Parser, Debug)]
#[command(name = "sgsformer", version, about = "Under-display-camera image restoration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a configuration file with every default filled in.
    Init {
        #[arg(long)]
        out: PathBuf,
        /// Model preset: tiny or paper.
        #[arg(long, default_value = "tiny")]
        preset: String,
    },
    /// Synthesize a paired dataset.
    SimulateDataset {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        /// Crop patches from the PNG files of this directory instead of
        /// drawing procedural scenes.
        #[arg(long)]
        images: Option<PathBuf>,
        /// Sample side length; defaults to train.patch.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Segment a PNG with the built-in segmenter.
    Segment {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        threshold: f64,
    },
    /// Train, writing a checkpoint and the loss log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many total steps.
        #[arg(long)]
        until: Option<u64>,
    },
    /// Mean PSNR/SSIM of a checkpoint over a dataset.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report path; defaults to paths.reports/eval.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Restore one PNG.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// Masks in RLE JSON; the built-in segmenter runs when omitted.
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient suite.
    GradCheck {
        /// Restrict to one module or one check.
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = gradsuite::DEFAULT_SEEDS)]
        seeds: u64,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e);
            exit_code(&e)
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let cfg = RunConfig::load(path)?;
    eprintln!("effective config:\n{}", cfg.to_json());
    Ok(cfg)
}

pub fn run(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Init { out, preset } => {
            let cfg = RunConfig { model: ModelConfig::preset(&preset)?, ..RunConfig::default() };
            fsutil::write_atomic(&out, format!("{}\n", cfg.to_json()).as_bytes())?;
            Ok(0)
        }
        Command::SimulateDataset { config, out, count, images, size } => {
            let cfg = load_config(&config)?;
            let psf = cfg.degrade.psf.build()?;
            let source = images.map_or(Source::Procedural, Source::ImageDir);
            let m = gen_dataset(&source, count, size.unwrap_or(cfg.train.patch), &psf, &cfg.degrade, &out)?;
            eprintln!("wrote {} samples to {}", m.count, out.display());
            Ok(0)
        }
        Command::Segment { input, out, threshold } => {
            if !(threshold > 0.0 && threshold <= 1.0) {
                return Err(Error::Config(format!("--threshold {} outside (0, 1]", threshold)));
            }
            let img = imageio::load_png(&input)?;
            let masks = naive_segment(&img, threshold)?;
            fsutil::write_atomic(&out, masks.to_json()?.as_bytes())?;
            eprintln!("{} masks", masks.len());
            Ok(0)
        }
        Command::Train { config, resume, until } => cmd_train(&load_config(&config)?, resume.as_deref(), until),
        Command::Eval { config, ckpt, data, out } => {
            let cfg = load_config(&config)?;
            let (model, _) = Model::load(&ckpt)?;
            let (_, samples) = load_dataset(&data)?;
            let report = evaluate(&model, &samples)?;
            fsutil::write_json(out.unwrap_or_else(|| cfg.paths.eval_report()), &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(0)
        }
        Command::Infer { ckpt, input, masks, out } => {
            let (model, _) = Model::load(&ckpt)?;
            let img = imageio::load_png(&input)?;
            let &[_, h, w] = img.shape() else { unreachable!("png loads as [3,H,W]") };
            let masks = match masks {
                Some(p) => MaskSet::from_json(&fsutil::read_to_string(&p)?, h, w, MaskSource::File)?,
                None => naive_segment(&img, DegradeParams::default().seg_threshold)?,
            };
            let out_t = model.restore(&img.reshape([1, 3, h, w])?, &[masks])?.reshape([3, h, w])?;
            imageio::save_png(&out, &out_t)?;
            Ok(0)
        }
        Command::GradCheck { module, seeds } => {
            if let Some(m) = &module {
                let known = gradsuite::modules().contains(&m.as_str()) || gradsuite::checks().iter().any(|c| c.name == m);
                if !known {
                    return Err(Error::Config(format!("unknown module '{}' (modules: {})", m, gradsuite::modules().join(", "))));
                }
            }
            let reports = gradsuite::run_suite(module.as_deref(), seeds)?;
            println!("{:<10} {:<24} {:>8} {:>12}  status", "module", "check", "coords", "max_rel_err");
            let mut ok = true;
            for (m, r) in &reports {
                ok &= r.passed();
                let status = if r.passed() { "ok" } else { "FAIL" };
                println!("{:<10} {:<24} {:>8} {:>12.3e}  {}", m, r.name, r.coords(), r.max_rel_err(), status);
            }
            Ok(if ok { 0 } else { 1 })
        }
    }
}

fn cmd_train(cfg: &RunConfig, resume: Option<&Path>, until: Option<u64>) -> Result<i32> {
    let (_, data) = load_dataset(&cfg.paths.dataset)?;
    let (mut model, mut adam, mut rows) = match resume {
        None => {
            let mut model = Model::new(&cfg.model)?;
            model.zero_output_projections();
            let adam = Adam::new(&model.store);
            (model, adam, Vec::new())
        }
        Some(path) => {
            let (model, opt) = Model::load(path)?;
            if model.cfg != cfg.model {
                return Err(Error::Config(format!("checkpoint {} was trained with a different model config", path.display())));
            }
            let adam = Adam::from_entries(&model.store, &opt)?;
            let rows = previous_rows(&cfg.paths.loss_csv(), adam.step)?;
            (model, adam, rows)
        }
    };
    let csv = cfg.paths.loss_csv();
    let ckpt = &cfg.paths.checkpoint;
    let every = cfg.train.checkpoint_every;
    eprintln!("training from step {} ({} parameters)", adam.step, model.param_count());
    train(&mut model, &mut adam, &data, &cfg.train, until, |log, model, adam| {
        rows.push(log.csv_row());
        if log.step % 50 == 0 {
            eprintln!("step {} lr {:.3e} total {:.6}", log.step, log.lr, log.terms.total);
        }
        if every > 0 && adam.step % every == 0 {
            model.save(ckpt, adam.to_entries(&model.store))?;
            write_csv(&csv, &rows)?;
        }
        Ok(())
    })?;
    model.save(ckpt, adam.to_entries(&model.store))?;
    write_csv(&csv, &rows)?;
    eprintln!("stopped at step {}; checkpoint {}", adam.step, ckpt.display());
    Ok(0)
}

fn write_csv(path: &Path, rows: &[String]) -> Result<()> {
    let mut text = String::from(CSV_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    fsutil::write_atomic(path, text.as_bytes())
}

/// Rows of an earlier log for steps before `start`.
fn previous_rows(path: &Path, start: u64) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fsutil::read_to_string(path)?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s < start))
        .map(str::to_string)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_named_with_section() {
        let err = RunConfig::from_json(r#"{"train": {"stpes": 3}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("train.stpes") || msg.contains("stpes"), "{}", msg);
        assert_eq!(exit_code(&err), 2);
    }

    #[test]
    fn defaults_materialize() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }
}
