//! Command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::contrastive::{matched_temperature, mi_bound_study, MiBoundRow};
use crate::error::{Error, Result};
use crate::eval::{evaluate_protocol, histogram, Embedded, ProtocolConfig, HISTOGRAM_BINS};
use crate::gradcheck::{run_gradcheck, TOLERANCE};
use crate::synth::{generate_dataset, load_dataset, save_dataset, DiscreteToyJoint, MultiviewDataset, SynthConfig};
use crate::trainer::{load_checkpoint, save_checkpoint, write_metrics_file, TrainConfig, Trainer};

#[derive(Debug, Parser)]
#[command(
    name = "pacm",
    version,
    about = "Coupled-encoder contrastive training on synthetic two-view data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// JSON config for the subcommand
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the config's seed
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (config: synthetic-data JSON)
    GenData(#[command(flatten)] Common),
    /// Train encoders (config: training JSON)
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset JSON; the reference dataset for the seed when omitted
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
        /// Resume from this checkpoint
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on held-out identities (config: protocol JSON)
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
    },
    /// Finite-difference gradient suite (config: training JSON)
    Gradcheck(#[command(flatten)] Common),
    /// Mutual-information bound study on the discrete toy (config: study JSON)
    MiBound(#[command(flatten)] Common),
    /// Distance histograms of a checkpoint as CSV
    ExportHist {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
    },
}

/// Settings of the toy mutual-information study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiBoundConfig {
    pub classes: usize,
    pub diagonal_mass: f64,
    pub ks: Vec<usize>,
    pub batch_size: usize,
    pub seeds: u64,
    /// Matched to the table when absent.
    pub temperature: Option<f64>,
    pub seed: u64,
}

impl Default for MiBoundConfig {
    fn default() -> Self {
        MiBoundConfig {
            classes: 8,
            diagonal_mass: 0.9,
            ks: vec![4, 16, 32],
            batch_size: 64,
            seeds: 50,
            temperature: None,
            seed: 0,
        }
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn load_or_default<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    path.as_deref().map_or_else(|| Ok(T::default()), read_json)
}

/// `dir/stem<suffix>` for an output path `dir/stem.ext`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn synth_config(common: &Common) -> Result<SynthConfig> {
    let mut cfg = match &common.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::reference(0),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dataset_or_reference(path: &Option<PathBuf>, seed: u64) -> Result<MultiviewDataset> {
    match path {
        Some(p) => load_dataset(p),
        None => generate_dataset(&SynthConfig::reference(seed)),
    }
}

#[derive(Serialize)]
struct HistogramSidecar<'a> {
    source: &'a str,
    bins: usize,
    distance: &'static str,
    protocol: &'a ProtocolConfig,
    train_config: Option<&'a TrainConfig>,
    dataset_config: &'a SynthConfig,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(common) => {
            let cfg = synth_config(&common)?;
            let out = common.out.unwrap_or_else(|| "dataset.json".into());
            let ds = generate_dataset(&cfg)?;
            save_dataset(&ds, &out)?;
            println!(
                "wrote {} ({} frontal, {} profile samples)",
                out.display(),
                ds.frontal().len(),
                ds.profile().len()
            );
        }
        Command::Train {
            common,
            dataset,
            checkpoint,
        } => {
            let out = common.out.clone().unwrap_or_else(|| "checkpoint.pacm".into());
            let ds = dataset_or_reference(&dataset, common.seed.unwrap_or(0))?;
            let mut trainer = match &checkpoint {
                Some(p) => {
                    if common.config.is_some() || common.seed.is_some() {
                        warn!("resuming: --config and --seed are ignored in favor of the checkpoint's");
                    }
                    Trainer::from_checkpoint(load_checkpoint(p)?, &ds)?
                }
                None => Trainer::new(train_config(&common)?, &ds)?,
            };
            while !trainer.is_finished() {
                let epoch = trainer.epoch();
                trainer.run_epoch()?;
                if let Some(r) = trainer.log().last() {
                    info!(
                        "epoch {epoch}: l_pacm {:.4} l_total {:.4} lr {:e}",
                        r.l_pacm, r.l_total, r.lr
                    );
                }
            }
            save_checkpoint(&trainer.checkpoint(), &out)?;
            let metrics = sibling(&out, ".metrics.csv");
            write_metrics_file(trainer.log(), &metrics)?;
            write_json(trainer.config(), &sibling(&out, ".metrics.config.json"))?;
            println!("wrote {} and {}", out.display(), metrics.display());
        }
        Command::Eval {
            common,
            checkpoint,
            dataset,
        } => {
            let mut protocol: ProtocolConfig = load_or_default(&common.config)?;
            if let Some(s) = common.seed {
                protocol.seed = s;
            }
            let ckpt = load_checkpoint(&checkpoint)?;
            let ds = dataset_or_reference(&dataset, ckpt.config.seed)?;
            if ds.train_part()?.fingerprint() != ckpt.dataset_fingerprint {
                warn!("dataset differs from the one the checkpoint was trained on");
            }
            let mut report = evaluate_protocol(&ckpt.encoders, &ds, &protocol)?;
            report.train_config = Some(ckpt.config.clone());
            let out = common.out.unwrap_or_else(|| "report.json".into());
            report.save(&out)?;
            let hist = sibling(&out, ".hist.csv");
            write_csv(&report.histogram, &hist)?;
            write_json(
                &HistogramSidecar {
                    source: "pooled fold pairs",
                    bins: HISTOGRAM_BINS,
                    distance: "1 - cosine",
                    protocol: &report.protocol,
                    train_config: report.train_config.as_ref(),
                    dataset_config: &report.dataset_config,
                },
                &sibling(&out, ".hist.config.json"),
            )?;
            println!(
                "accuracy {:.4} ± {:.4}  EER {:.4}  rank-1 (tier {}) {:.4}  overlap {:.4}",
                report.verification_accuracy,
                report.verification_accuracy_std,
                report.eer,
                report.hardest_tier,
                report.hardest_tier_rank1(),
                report.overlap_coefficient
            );
        }
        Command::Gradcheck(common) => {
            let cfg = train_config(&common)?;
            let report = run_gradcheck(&cfg, 5, cfg.seed)?;
            for m in &report.modules {
                println!(
                    "{:<22} worst relative error {:.3e}  ({} checked, {} skipped at kinks)",
                    m.name, m.worst_relative_error, m.checked, m.skipped
                );
            }
            println!("{} configurations in {:.2}s", report.configurations, report.seconds);
            if let Some(out) = &common.out {
                #[derive(Serialize)]
                struct Suite<'a> {
                    config: &'a TrainConfig,
                    report: &'a crate::gradcheck::GradcheckReport,
                }
                write_json(
                    &Suite {
                        config: &cfg,
                        report: &report,
                    },
                    out,
                )?;
            }
            if !report.passed() {
                return Err(Error::Numeric(format!(
                    "worst relative error {:.3e} exceeds {TOLERANCE:e}",
                    report.worst()
                )));
            }
        }
        Command::MiBound(common) => {
            let mut cfg: MiBoundConfig = load_or_default(&common.config)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let joint = DiscreteToyJoint::noisy_copy(cfg.classes, cfg.diagonal_mass)?;
            let tau = match cfg.temperature {
                Some(t) => t,
                None => matched_temperature(&joint)?,
            };
            println!("k,mean_loss,bound,bound_std_err,exact_mi");
            let mut rows: Vec<MiBoundRow> = Vec::new();
            for &k in &cfg.ks {
                let r = mi_bound_study(&joint, k, cfg.batch_size, cfg.seeds, cfg.seed, tau)?;
                println!(
                    "{},{:.6},{:.6},{:.6},{:.6}",
                    r.k, r.mean_loss, r.bound, r.bound_std_err, r.exact_mi
                );
                rows.push(r);
            }
            if let Some(out) = &common.out {
                #[derive(Serialize)]
                struct Study<'a> {
                    config: &'a MiBoundConfig,
                    temperature: f64,
                    rows: &'a [MiBoundRow],
                }
                write_json(
                    &Study {
                        config: &cfg,
                        temperature: tau,
                        rows: &rows,
                    },
                    out,
                )?;
            }
        }
        Command::ExportHist {
            common,
            checkpoint,
            dataset,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let ds = dataset_or_reference(&dataset, ckpt.config.seed)?;
            let heldout = ds.heldout_part()?;
            let emb = Embedded::new(&ckpt.encoders, &heldout)?;
            let out = common.out.unwrap_or_else(|| "hist.csv".into());
            let hardest = ds.config().hardest_tier();
            let tier_out = sibling(&out, &format!(".tier{hardest}.csv"));
            let all = {
                let mut s = crate::eval::ScoreSet::default();
                for t in 0..ds.config().tiers.len() {
                    let ts = emb.tier_scores(t)?;
                    s.genuine_scores.extend(ts.genuine_scores);
                    s.imposter_scores.extend(ts.imposter_scores);
                }
                s
            };
            write_csv(&histogram(&all, HISTOGRAM_BINS)?, &out)?;
            let h = histogram(&emb.tier_scores(hardest)?, HISTOGRAM_BINS)?;
            write_csv(&h, &tier_out)?;
            #[derive(Serialize)]
            struct Sidecar<'a> {
                checkpoint: &'a Path,
                bins: usize,
                distance: &'static str,
                hardest_tier: usize,
                train_config: &'a TrainConfig,
                dataset_config: &'a SynthConfig,
            }
            write_json(
                &Sidecar {
                    checkpoint: &checkpoint,
                    bins: HISTOGRAM_BINS,
                    distance: "1 - cosine",
                    hardest_tier: hardest,
                    train_config: &ckpt.config,
                    dataset_config: ds.config(),
                },
                &sibling(&out, ".config.json"),
            )?;
            println!(
                "wrote {} and {} (hardest-tier overlap {:.4})",
                out.display(),
                tier_out.display(),
                h.overlap_coefficient()
            );
        }
    }
    Ok(())
}

fn write_csv(h: &crate::eval::Histogram, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    h.write_csv(&mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// 0 on success, 1 on invalid input, 2 on numeric failure.
pub fn exit_code(result: &Result<()>) -> ExitCode {
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is_numeric() => ExitCode::from(2),
        Err(_) => ExitCode::from(1),
    }
}

/// Parses `args`, runs, reports errors on stderr and maps them to an exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = run(cli);
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    exit_code(&result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sibling_paths() {
        assert_eq!(
            sibling(Path::new("out/run.ckpt"), ".metrics.csv"),
            Path::new("out/run.metrics.csv")
        );
        assert_eq!(sibling(Path::new("report"), ".hist.csv"), Path::new("report.hist.csv"));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Ok(())), ExitCode::SUCCESS);
        assert_eq!(exit_code(&Err(Error::Numeric("x".into()))), ExitCode::from(2));
        assert_eq!(exit_code(&Err(Error::Config("x".into()))), ExitCode::from(1));
    }

    #[test]
    fn bad_flags_exit_with_one() {
        assert_eq!(main_with_args(["pacm", "train", "--bogus"]), ExitCode::from(1));
        assert_eq!(main_with_args(["pacm", "--help"]), ExitCode::SUCCESS);
    }
}
