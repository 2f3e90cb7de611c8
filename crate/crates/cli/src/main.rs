//! `tclab`: config-driven runs of the triplet-center-loss lab.
//!
//! Exit codes: 0 success, 2 config/usage/io error, 3 numeric failure,
//! 4 contract violation. Failures print one line `error[<code>]: <message>`
//! on stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tclab::checks::{gradcheck_table, table_csv, GradcheckOptions};
use tclab::config::{ExperimentConfig, SweepParameter};
use tclab::data::{self, Split};
use tclab::experiment::{self, Checkpoint};
use tclab::retrieval::{Distance, EmbeddingSet, EvalOptions};
use tclab::Error;

#[derive(Parser)]
#[command(
    name = "tclab",
    version,
    about = "Triplet-center loss lab: train, embed, evaluate, compare"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML). Omitted keys take their defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overrides the run seed (for compare/sweep: runs this single seed).
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into `<out>/dataset.jsonl`.
    GenData(Common),
    /// Train one model and write checkpoint, centers, loss curve, embeddings and metrics.
    Train {
        #[command(flatten)]
        common: Common,
        /// Append a 2-d PCA projection to the embeddings CSV.
        #[arg(long)]
        pca2: bool,
    },
    /// Export test-split embeddings of a checkpoint to `<out>/embeddings.csv`.
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Dataset file; defaults to the dataset named by the config.
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
        #[arg(long)]
        pca2: bool,
    },
    /// Retrieval metrics from an embeddings CSV or a checkpoint, written to `<out>/metrics.json`.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH", conflicts_with = "checkpoint")]
        embeddings: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
        /// Domain-1 queries against the domain-0 database.
        #[arg(long)]
        cross_domain: bool,
        /// Add sub-category graded NDCG.
        #[arg(long)]
        graded: bool,
        #[arg(long, value_enum)]
        distance: Option<DistanceArg>,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[arg(long, value_name = "N", default_value_t = 0)]
        seed: u64,
        /// Random configurations per loss.
        #[arg(long, value_name = "N", default_value_t = 100)]
        configs: usize,
        /// Random toy networks.
        #[arg(long, value_name = "N", default_value_t = 5)]
        networks: usize,
    },
    /// Loss comparison over the configured seeds: `<out>/compare.csv`.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Number of runs executed at once.
        #[arg(long, value_name = "N", default_value_t = 1)]
        parallel: usize,
    },
    /// Parameter study of lambda or margin: `<out>/sweep.csv`.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "N", default_value_t = 1)]
        parallel: usize,
        /// Parameter to vary; overrides `sweep.parameter`.
        #[arg(long, value_name = "lambda|margin")]
        param: Option<String>,
        /// Comma-separated values; overrides `sweep.values`.
        #[arg(long, value_name = "LIST", value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum DistanceArg {
    Euclidean,
    Cosine,
}

fn resolve(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, contents: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn split_for(cfg: &ExperimentConfig, dataset: Option<&Path>) -> Result<Split, Error> {
    match dataset {
        Some(path) => data::load(path),
        None => experiment::dataset_for(cfg),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData(common) => {
            let mut cfg = resolve(&common)?;
            if let Some(seed) = common.seed {
                cfg.dataset.seed = seed;
            }
            let path = cfg.out_dir.join("dataset.jsonl");
            let split = experiment::cmd_gen_data(&cfg, &path)?;
            write(&cfg.out_dir.join("config.resolved.toml"), &cfg.to_toml())?;
            println!(
                "wrote {} ({} train, {} test objects)",
                path.display(),
                split.train.len(),
                split.test.len()
            );
        }
        Command::Train { common, pca2 } => {
            let cfg = resolve(&common)?;
            let (art, outcome) = experiment::cmd_train(&cfg, pca2)?;
            let last = outcome.stats.epochs.last().unwrap_or(&outcome.stats.initial);
            println!(
                "trained {} for {} epochs: loss {:.6}, accuracy {:.4}, test mAP {:.4}, AUC {:.4}",
                cfg.loss.kind,
                cfg.epochs,
                last.total,
                last.accuracy,
                outcome.report.micro("map").unwrap_or(f64::NAN),
                outcome.report.micro("auc").unwrap_or(f64::NAN),
            );
            if outcome.stats.skipped_batches > 0 {
                println!(
                    "skipped {} batches without a valid triple",
                    outcome.stats.skipped_batches
                );
            }
            println!(
                "artifacts in {}",
                art.checkpoint.parent().unwrap_or(Path::new(".")).display()
            );
        }
        Command::Embed {
            common,
            checkpoint,
            dataset,
            pca2,
        } => {
            let cfg = resolve(&common)?;
            let split = split_for(&cfg, dataset.as_deref())?;
            let out = cfg.out_dir.join("embeddings.csv");
            fs::create_dir_all(&cfg.out_dir).map_err(|e| io_err(&cfg.out_dir, e))?;
            let set = experiment::cmd_embed(&checkpoint, &split, &out, pca2)?;
            write(&cfg.out_dir.join("config.resolved.toml"), &cfg.to_toml())?;
            println!(
                "wrote {} ({} embeddings of width {})",
                out.display(),
                set.len(),
                set.dim()
            );
        }
        Command::Eval {
            common,
            embeddings,
            checkpoint,
            dataset,
            cross_domain,
            graded,
            distance,
        } => {
            let mut cfg = resolve(&common)?;
            cfg.eval.graded |= graded;
            if let Some(d) = distance {
                cfg.eval.distance = match d {
                    DistanceArg::Euclidean => Distance::Euclidean,
                    DistanceArg::Cosine => Distance::Cosine,
                };
            }
            let set = match (&embeddings, &checkpoint) {
                (Some(csv), _) => EmbeddingSet::read_csv(csv)?,
                (None, Some(ck)) => {
                    let split = split_for(&cfg, dataset.as_deref())?;
                    experiment::test_embeddings(&Checkpoint::load(ck)?.model, &split)?
                }
                (None, None) => return Err(Error::Config("eval needs --embeddings or --checkpoint".into())),
            };
            let opts: EvalOptions = cfg.eval;
            let report = experiment::evaluate_embeddings(&set, cross_domain, &opts)?;
            let out = cfg.out_dir.join("metrics.json");
            write(&out, &report.to_json())?;
            write(&cfg.out_dir.join("config.resolved.toml"), &cfg.to_toml())?;
            let mut line = format!("{} queries", report.num_queries);
            for (name, m) in &report.metrics {
                line.push_str(&format!(", {name} {:.4}", m.micro));
            }
            println!("{line}");
            println!("wrote {}", out.display());
        }
        Command::Gradcheck {
            out,
            seed,
            configs,
            networks,
        } => {
            if configs == 0 || networks == 0 {
                return Err(Error::Config("--configs and --networks must be >= 1".into()));
            }
            let opts = GradcheckOptions {
                seed,
                configs,
                networks,
                ..GradcheckOptions::default()
            };
            let rows = gradcheck_table(&opts)?;
            let table = table_csv(&rows);
            print!("{table}");
            if let Some(dir) = out {
                write(&dir.join("gradcheck.csv"), &table)?;
            }
            if let Some(bad) = rows.iter().find(|r| !r.passed()) {
                return Err(Error::NonFinite(format!(
                    "gradient check `{}` failed: {:e} >= {:e}",
                    bad.name, bad.max_rel_err, bad.tolerance
                )));
            }
        }
        Command::Compare { common, parallel } => {
            let mut cfg = resolve(&common)?;
            if let Some(seed) = common.seed {
                cfg.seeds = vec![seed];
            }
            let rows = experiment::cmd_compare(&cfg, parallel)?;
            println!("loss,auc,map");
            for r in &rows {
                println!("{},{:.4},{:.4}", r.loss, r.auc, r.map);
            }
            println!("wrote {}", cfg.out_dir.join("compare.csv").display());
        }
        Command::Sweep {
            common,
            parallel,
            param,
            values,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(seed) = common.seed {
                cfg.seeds = vec![seed];
            }
            if let Some(p) = param {
                cfg.sweep.parameter = p.parse::<SweepParameter>()?;
            }
            if let Some(v) = values {
                cfg.sweep.values = v;
            }
            cfg.validate()?;
            let rows = experiment::cmd_sweep(&cfg, parallel)?;
            println!("{},auc,map", cfg.sweep.parameter.as_str());
            for r in &rows {
                println!("{},{:.4},{:.4}", r.value, r.auc, r.map);
            }
            println!("wrote {}", cfg.out_dir.join("sweep.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
