use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use reflab::harness::{
    adversarial_records, build_manifest, dataset_stats, diagnose_records, evaluate,
    generate_records, load_checkpoint, perturbation_report, read_dataset, read_jsonl,
    render_csv_report, render_markdown_report, save_checkpoint, to_canonical_json,
    train_from_records, write_jsonl, ExperimentConfig,
};

#[derive(Parser)]
#[command(name = "reflab", version, about = "Synthetic referring-expression grounding lab")]
struct Cli {
    /// Master seed (the REFLAB_SEED environment variable overrides this).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// JSON experiment config; defaults apply for any omitted field.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a raw dataset (train/dev/test pool).
    Generate {
        /// Override the config's instance count.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Run the stage-1 annotator panel; relabels the test pool easy/hard.
    Diagnose {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Build adversarial instances from the hard split (stages 2+3).
    Adversarial {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        votes: Option<PathBuf>,
    },
    /// Train per the config's encoder/regime; writes checkpoints and metrics.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Per-split accuracies for a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Render markdown + CSV reports (accuracy, perturbations, stats).
    Report {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> reflab::Result<()> {
    let seed = match std::env::var("REFLAB_SEED") {
        Ok(s) => s.parse::<u64>().map_err(|_| {
            reflab::Error::BadConfig(format!("REFLAB_SEED must be a u64, got `{s}`"))
        })?,
        Err(_) => cli.seed,
    };
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let out = &cli.out;
    let dataset_path = out.join("dataset.jsonl");
    let votes_path = out.join("votes.jsonl");
    let checkpoint_path = out.join("checkpoint.json");
    let eval_path = out.join("eval.json");
    let pick = |explicit: &Option<PathBuf>, default: &PathBuf| {
        explicit.clone().unwrap_or_else(|| default.clone())
    };

    match &cli.cmd {
        Cmd::Generate { n } => {
            if let Some(n) = n {
                cfg.n_instances = *n;
            }
            let records = generate_records(seed, &cfg)?;
            write_jsonl(&dataset_path, &records)?;
        }
        Cmd::Diagnose { data } => {
            let path = pick(data, &dataset_path);
            let mut records = read_dataset(&path)?;
            let votes = diagnose_records(&mut records, seed, &cfg)?;
            write_jsonl(&dataset_path, &records)?;
            write_jsonl(&votes_path, &votes)?;
        }
        Cmd::Adversarial { data, votes } => {
            let mut records = read_dataset(&pick(data, &dataset_path))?;
            let votes = read_jsonl(&pick(votes, &votes_path))?;
            let adv = adversarial_records(&records, &votes, seed, &cfg)?;
            records.extend(adv);
            write_jsonl(&dataset_path, &records)?;
        }
        Cmd::Train { data } => {
            let records = read_dataset(&pick(data, &dataset_path))?;
            let (params, log) = train_from_records(&records, seed, &cfg)?;
            write_jsonl(&out.join("metrics.jsonl"), &log)?;
            let last_epoch = log.iter().map(|m| m.epoch).max().unwrap_or(0);
            save_checkpoint(&out.join("run").join(format!("epoch_{last_epoch}.json")), &params)?;
            save_checkpoint(&checkpoint_path, &params)?;
        }
        Cmd::Eval { checkpoint, data } => {
            let params = load_checkpoint(&pick(checkpoint, &checkpoint_path))?;
            let records = read_dataset(&pick(data, &dataset_path))?;
            let accs = evaluate(&params, &records, cfg.iou_threshold)?;
            fs::create_dir_all(out)?;
            fs::write(&eval_path, to_canonical_json(&accs)? + "\n")?;
        }
        Cmd::Report {
            data,
            eval,
            checkpoint,
        } => {
            let records = read_dataset(&pick(data, &dataset_path))?;
            let eval_file = pick(eval, &eval_path);
            let text = fs::read_to_string(&eval_file).map_err(|e| reflab::Error::Malformed {
                file: eval_file.display().to_string(),
                line: 0,
                msg: e.to_string(),
            })?;
            let accs: BTreeMap<String, f64> = serde_json::from_str(&text)?;
            let stats = dataset_stats(&records);
            let perturb = match checkpoint {
                Some(path) => {
                    let params = load_checkpoint(path)?;
                    Some(perturbation_report(&params, &records, cfg.iou_threshold, seed)?)
                }
                None => None,
            };
            fs::create_dir_all(out)?;
            fs::write(
                out.join("report.md"),
                render_markdown_report(&accs, &stats, perturb.as_ref()),
            )?;
            fs::write(
                out.join("report.csv"),
                render_csv_report(&accs, &stats, perturb.as_ref()),
            )?;
        }
    }
    fs::write(
        out.join("manifest.json"),
        to_canonical_json(&build_manifest(&cfg, seed)?)? + "\n",
    )?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
