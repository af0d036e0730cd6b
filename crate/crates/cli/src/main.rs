//! `wch`: data generation, training, encoding, retrieval and evaluation.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numeric failure,
//! 3 IO or file-format error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;
use thiserror::Error;
use wch_core::ablation::{run_ablation, Variant};
use wch_core::data::{class_histogram, DataConfig, Dataset, LabelSet};
use wch_core::grad_suite::{run_suite, DEFAULT_INSTANCES, MODULES};
use wch_core::io::load_labels;
use wch_core::retrieval::{evaluate_codes, hamming, load_codes, rank, save_codes};
use wch_core::trainer::{encode_images, fit, load_encoder, resume, TrainConfig};
use wch_core::WchError;

#[derive(Debug, Parser)]
#[command(name = "wch", version, about = "Weighted contrastive hashing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-label dataset directory.
    GenData {
        #[arg(long)]
        seed: u64,
        /// Number of train (database) images.
        #[arg(long)]
        count: usize,
        #[arg(long)]
        classes: usize,
        /// Number of query images; defaults to a quarter of `--count`.
        #[arg(long)]
        query_count: Option<usize>,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        #[arg(long, default_value_t = 8)]
        patch_size: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a JSON config and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory from `gen-data`; synthesized from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from the checkpoint of this epoch in `--out`.
        #[arg(long)]
        resume: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode one split of a dataset with a checkpoint.
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Train)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a database code file, optionally assigning ids from a JSON array.
    Index {
        #[arg(long)]
        codes: PathBuf,
        #[arg(long)]
        ids: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank every query code against a database and write the top-k ids.
    Query {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score query codes against database codes with label-overlap relevance.
    Eval {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        database: PathBuf,
        /// Dataset directory, or `query.wlbl,database.wlbl`.
        #[arg(long)]
        labels: String,
        #[arg(long, value_delimiter = ',', default_value = "1,10,100")]
        k: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient suite.
    Gradcheck {
        /// `all` or one module name.
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = DEFAULT_INSTANCES)]
        instances: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the full model and its ablations under one seed set.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "full,no_reg,ma_mean,hard_labels,no_scale"
        )]
        flags: Vec<String>,
        /// Seeds; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Split {
    Train,
    Query,
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] WchError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Numeric(_) => 2,
            CliError::Core(e) => match e {
                WchError::Config(_) | WchError::Parameter(_) | WchError::Dimension { .. } => 1,
                WchError::Numeric(_) => 2,
                WchError::Encoding(_)
                | WchError::Magic { .. }
                | WchError::Format(_)
                | WchError::Io(_)
                | WchError::Json(_) => 3,
            },
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            seed,
            count,
            classes,
            query_count,
            image_size,
            patch_size,
            channels,
            out,
        } => {
            if count == 0 {
                return Err(CliError::Config("--count must be positive".into()));
            }
            let config = DataConfig {
                seed,
                train_count: count,
                query_count: query_count.unwrap_or(count / 4),
                classes,
                image_size,
                patch_size,
                channels,
            };
            echo("gen-data", &config, seed);
            let dataset = Dataset::synthesize(&config)?;
            dataset.save(&out)?;
            for (name, split) in [("train", &dataset.train), ("query", &dataset.query)] {
                let hist = class_histogram(split, classes);
                println!("{name}: {} images, class histogram {hist:?}", split.len());
            }
            Ok(())
        }
        Command::Train {
            config,
            data,
            resume: from,
            out,
        } => {
            let config = read_train_config(&config)?;
            echo("train", &config, config.seed);
            let dataset = match data {
                Some(dir) => {
                    let ds = Dataset::load(dir)?;
                    if ds.config != config.data {
                        return Err(CliError::Config(
                            "dataset.json differs from the config's data section".into(),
                        ));
                    }
                    ds
                }
                None => Dataset::synthesize(&config.data)?,
            };
            let record = match from {
                Some(epoch) => resume(&config, &dataset, &out, epoch)?,
                None => fit(&config, &dataset, &out)?,
            };
            let m = &record.final_metrics;
            println!("steps {} final map {:.6}", record.losses.len(), m.map);
            for (k, v) in &m.map_at_k {
                println!("map@{k} {v:.6}");
            }
            Ok(())
        }
        Command::Encode {
            checkpoint,
            data,
            split,
            out,
        } => {
            let encoder = load_encoder(&checkpoint)?;
            let args = json!({ "checkpoint": checkpoint, "data": data, "split": split, "out": out });
            echo("encode", &args, encoder.config().seed);
            let dataset = Dataset::load(&data)?;
            let items = match split {
                Split::Train => &dataset.train,
                Split::Query => &dataset.query,
            };
            let codes = encode_images(&encoder, items, dataset.config.patch_size)?;
            save_codes(&out, &codes)?;
            println!("{} codes of {} bits", codes.len(), codes.code_length());
            Ok(())
        }
        Command::Index { codes, ids, out } => {
            echo("index", &json!({ "codes": codes, "ids": ids, "out": out }), None::<u64>);
            let mut set = load_codes(&codes)?;
            if let Some(path) = ids {
                let ids: Vec<u64> = serde_json::from_slice(&fs::read(path).map_err(WchError::from)?)
                    .map_err(|e| CliError::Config(format!("ids: {e}")))?;
                set = set.with_ids(ids)?;
            }
            save_codes(&out, &set)?;
            println!("indexed {} codes of {} bits", set.len(), set.code_length());
            Ok(())
        }
        Command::Query { index, queries, k, out } => {
            let args = json!({ "index": index, "queries": queries, "k": k, "out": out });
            echo("query", &args, None::<u64>);
            let db = load_codes(&index)?;
            let q = load_codes(&queries)?;
            let ranked = rank(&q, &db, k)?;
            let mut rows = Vec::with_capacity(ranked.len());
            for (i, positions) in ranked.iter().enumerate() {
                let mut hits = Vec::with_capacity(positions.len());
                for &p in positions {
                    hits.push(json!({ "id": db.ids()[p], "distance": hamming(q.row(i), db.row(p))? }));
                }
                rows.push(json!({ "query": q.ids()[i], "results": hits }));
            }
            write_json(&out, &rows)
        }
        Command::Eval {
            queries,
            database,
            labels,
            k,
            out,
        } => {
            let args = json!({ "queries": queries, "database": database, "labels": labels, "k": k, "out": out });
            echo("eval", &args, None::<u64>);
            let (ql, dl) = read_label_pair(&labels)?;
            let q = load_codes(&queries)?;
            let db = load_codes(&database)?;
            let metrics = evaluate_codes(&q, &ql, &db, &dl, &k)?;
            write_json(&out, &metrics)?;
            println!("map {:.6} excluded queries {}", metrics.map, metrics.excluded_queries);
            Ok(())
        }
        Command::Gradcheck {
            module,
            instances,
            seed,
            out,
        } => {
            let args = json!({ "module": module, "instances": instances, "out": out });
            echo("gradcheck", &args, seed);
            let filter = match module.as_str() {
                "all" => None,
                m if MODULES.contains(&m) => Some(m),
                m => {
                    return Err(CliError::Config(format!(
                        "unknown module {m:?}; expected all or one of {}",
                        MODULES.join(", ")
                    )))
                }
            };
            let results = run_suite(filter, instances, seed)?;
            for r in &results {
                let verdict = if r.passed { "ok" } else { "FAIL" };
                println!(
                    "{verdict:4} {:16} {:24} {:?} max rel error {:.3e} (tol {:.0e})",
                    r.module, r.name, r.kind, r.max_rel_error, r.tolerance
                );
            }
            if let Some(path) = out {
                write_json(&path, &results)?;
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(CliError::Numeric(format!("{failed} gradient cases exceeded tolerance")));
            }
            Ok(())
        }
        Command::Ablate {
            config,
            flags,
            seeds,
            out,
        } => {
            let config = read_train_config(&config)?;
            let variants: Vec<Variant> = flags.iter().map(|f| f.parse()).collect::<wch_core::Result<_>>()?;
            let seeds = if seeds.is_empty() { vec![config.seed] } else { seeds };
            let args = json!({ "config": config, "flags": flags, "seeds": seeds });
            echo("ablate", &args, config.seed);
            fs::create_dir_all(&out).map_err(WchError::from)?;
            write_json(&out.join("ablate.json"), &args)?;
            let report = run_ablation(&config, &variants, &seeds, &out)?;
            print!("{}", report.to_tsv());
            Ok(())
        }
    }
}

/// Print the command, its resolved arguments and the seed as one JSON line.
fn echo(command: &str, args: &impl Serialize, seed: impl Into<Option<u64>>) {
    let line = json!({ "command": command, "args": args, "seed": seed.into() });
    println!("{line}");
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(WchError::from)? + "\n";
    fs::write(path, text).map_err(WchError::from)?;
    Ok(())
}

/// Schema violations are configuration errors that name the offending field.
fn read_train_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(WchError::from)?;
    let config: TrainConfig =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

/// Query and database labels from a dataset directory or a `query,database` file pair.
fn read_label_pair(arg: &str) -> Result<(Vec<LabelSet>, Vec<LabelSet>)> {
    let (q, d) = match arg.split_once(',') {
        Some((q, d)) => (PathBuf::from(q), PathBuf::from(d)),
        None => {
            let dir = Path::new(arg);
            (dir.join("query_labels.wlbl"), dir.join("train_labels.wlbl"))
        }
    };
    Ok((load_labels(q)?.0, load_labels(d)?.0))
}
