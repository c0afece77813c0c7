//! Command-line entry point. Exit codes: 0 success, 1 invalid configuration
//! or usage, 2 runtime failure.

pub mod config;
pub mod pipeline;
pub mod verify;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{LabError, Result};
use crate::evalreport::{evaluate, files, lowest_bin_tokens, token_histogram, uniform_edges};
use crate::losses::LossSpec;
use crate::model::Model;
use crate::rft;
use crate::tasks;
use config::LabConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "dftlab", version, about = "Desk-scale SFT / DFT fine-tuning lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON config; omitted keys take their defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Dotted-key override applied after the config file, e.g. `train.learning_rate=5e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train, in-distribution and out-of-distribution splits.
    GenData(Common),
    /// Train one model and evaluate it.
    Train {
        #[command(flatten)]
        common: Common,
        /// Start from this checkpoint instead of the warm-start stage.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Train on this JSON-lines file instead of the generated split.
        #[arg(long)]
        train_data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on both splits.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Self-sample, verify and write the filtered training set.
    RftSample {
        #[command(flatten)]
        common: Common,
        /// Sampler checkpoint; defaults to the warm-start model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the gradient-identity and optimizer self-checks.
    Verify,
    /// Token-probability histogram and low-probability tokens of a checkpoint.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = pipeline::LOW_P)]
        threshold: f64,
    },
    /// Consolidate run directories into one comparison table.
    Report {
        runs: Vec<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Learning-rate / batch-size sweep from the shared starting model.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Loss kinds to sweep.
        #[arg(long, value_delimiter = ',', default_value = "SFT,DFT_TOKEN")]
        losses: Vec<String>,
    },
    /// SFT vs DFT learning curves and histograms, the sweep and the
    /// rejection-sampling comparison.
    Reproduce(Common),
}

fn exit_code(e: &LabError) -> i32 {
    if e.is_validation() {
        EXIT_INVALID
    } else {
        EXIT_RUNTIME
    }
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Loads the config and writes it to the output directory before any work.
fn setup(c: &Common) -> Result<LabConfig> {
    let cfg = LabConfig::load(c.config.as_deref(), &c.overrides)?;
    pipeline::write_json(&c.out.join(files::CONFIG), &cfg)?;
    Ok(cfg)
}

fn load_model(path: &Path, cfg: &LabConfig) -> Result<Model> {
    let m = crate::model::checkpoint::load(path)?;
    let mut expected = cfg.train.model.clone();
    expected.seed = m.config().seed;
    if m.config() != &expected {
        return Err(LabError::InvalidConfig(format!(
            "checkpoint {} does not match train.model",
            path.display()
        )));
    }
    Ok(m)
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(c) => {
            let cfg = setup(&c)?;
            pipeline::write_data(&c.out, &pipeline::prepare_data(&cfg)?)?;
            pipeline::write_manifest(&c.out)
        }
        Command::Train {
            common,
            init,
            train_data,
        } => {
            let cfg = setup(&common)?;
            let splits = pipeline::prepare_data(&cfg)?;
            let train_set = match &train_data {
                Some(p) => tasks::read_jsonl(p)?,
                None => splits.train.clone(),
            };
            let base = match &init {
                Some(p) => load_model(p, &cfg)?,
                None => pipeline::warm_base(&cfg, &splits.train)?,
            };
            let run = pipeline::train_and_evaluate(&cfg, base, &train_set, &splits, &common.out)?;
            println!(
                "{}: in-dist {:.4}, ood {:.4}",
                run.dir.display(),
                run.eval_in.avg_at_k,
                run.eval_ood.avg_at_k
            );
            Ok(())
        }
        Command::Eval { common, checkpoint } => {
            let cfg = setup(&common)?;
            let model = load_model(&checkpoint, &cfg)?;
            let splits = pipeline::prepare_data(&cfg)?;
            let opts = cfg.eval_options();
            for (name, file, set) in [
                ("in-dist", files::EVAL_IN, &splits.eval_in),
                ("ood", files::EVAL_OOD, &splits.eval_ood),
            ] {
                let r = evaluate(&model, set, name, &opts)?;
                println!("{name}: avg@{} = {:.4}", r.k, r.avg_at_k);
                pipeline::write_json(&common.out.join(file), &r)?;
            }
            pipeline::write_manifest(&common.out)
        }
        Command::RftSample { common, checkpoint } => {
            let cfg = setup(&common)?;
            let splits = pipeline::prepare_data(&cfg)?;
            let model = match &checkpoint {
                Some(p) => load_model(p, &cfg)?,
                None => pipeline::warm_base(&cfg, &splits.train)?,
            };
            let count = cfg.rft.prompt_count.unwrap_or(splits.train.len()).min(splits.train.len());
            let (kept, stats) = rft::sample_and_filter(&model, &splits.train[..count], rft::task_verifier, &cfg.rft)?;
            rft::write_outputs(&common.out, &kept, &stats)?;
            pipeline::write_manifest(&common.out)?;
            println!("kept {} of {} samples (keep rate {:.4})", stats.retained, stats.prompts * stats.samples_per_prompt, stats.keep_rate);
            if kept.is_empty() {
                return Err(LabError::EmptyFilteredSet);
            }
            Ok(())
        }
        Command::Verify => {
            let checks = verify::run_checks()?;
            let mut all = true;
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                all &= c.passed;
            }
            if all {
                Ok(())
            } else {
                Err(LabError::Verification(format!(
                    "{} of {} checks failed",
                    checks.iter().filter(|c| !c.passed).count(),
                    checks.len()
                )))
            }
        }
        Command::Analyze {
            common,
            checkpoint,
            threshold,
        } => {
            let cfg = setup(&common)?;
            let model = load_model(&checkpoint, &cfg)?;
            let splits = pipeline::prepare_data(&cfg)?;
            let tag = checkpoint.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
            let h = token_histogram(&model, &splits.train, &uniform_edges(cfg.histogram.bins), &tag)?;
            let low = lowest_bin_tokens(&model, &splits.train, threshold)?;
            pipeline::write_json(&common.out.join(files::HISTOGRAM), &h)?;
            pipeline::write_json(&common.out.join(pipeline::LOW_TOKENS), &low)?;
            for (tok, n) in low.iter().take(10) {
                println!("{tok:>6} {n}");
            }
            pipeline::write_manifest(&common.out)
        }
        Command::Report { runs, out } => {
            let report = pipeline::write_report(&out, &runs)?;
            print!("{}", report.to_csv());
            for (dir, err) in &report.errors {
                eprintln!("skipped {dir}: {err}");
            }
            pipeline::write_manifest(&out)
        }
        Command::Sweep { common, losses } => {
            let cfg = setup(&common)?;
            let losses = losses
                .iter()
                .map(|s| s.parse().map(LossSpec::new))
                .collect::<Result<Vec<_>>>()?;
            let splits = pipeline::prepare_data(&cfg)?;
            let base = pipeline::warm_base(&cfg, &splits.train)?;
            let report = pipeline::sweep(&cfg, &losses, &base, &splits, &common.out)?;
            print!("{}", report.to_csv());
            Ok(())
        }
        Command::Reproduce(c) => {
            let cfg = setup(&c)?;
            pipeline::reproduce(&cfg, &c.out)
        }
    }
}
