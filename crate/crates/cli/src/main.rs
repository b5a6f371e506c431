//! `qmet`: synthesize data, train, evaluate, gradient-check and compare.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use qmet::backbone::load_checkpoint;
use qmet::data::{
    generate_synthetic, load_manifest, make_split, save_dataset, EvalSplit, Split, SplitProtocol,
    SynthShape, SynthSpec,
};
use qmet::evaluation::{evaluate, RankMode};
use qmet::experiment::{
    compare_csv, compare_table, prepare_data, run_compare, run_gradcheck, ExperimentConfig,
};
use qmet::trainer::{RunOptions, Trainer};
use qmet::{Error, LabeledDataset64};

#[derive(Parser, Debug)]
#[command(
    name = "qmet",
    version,
    about = "Quartet-loss metric learning experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic identity-cluster dataset (manifest + payloads)
    Synth(SynthArgs),
    /// Train a model from an experiment config
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Rank probes against a gallery and write the CMC curve
    Eval(EvalArgs),
    /// Compare analytic and autodiff gradients with finite differences
    Gradcheck {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Train and score every loss mode for triplets and quartets
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the config's output_dir
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    ids: usize,
    #[arg(long)]
    per_id: usize,
    /// Vector dimension
    #[arg(long, conflicts_with = "image", required_unless_present = "image")]
    dim: Option<usize>,
    /// RGB image size as WxH
    #[arg(long, value_parser = parse_size)]
    image: Option<(usize, usize)>,
    #[arg(long, default_value_t = 1.0)]
    stddev: f64,
    #[arg(long, default_value_t = 6.0)]
    sep: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    cameras: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest
    #[arg(long)]
    data: PathBuf,
    /// `half` (half the identities, seeded), `self` (every sample is both
    /// probe and gallery) or a split JSON file written by `train`
    #[arg(long, default_value = "half")]
    split: String,
    #[arg(long, default_value = "distance")]
    mode: RankMode,
    #[arg(long)]
    out: PathBuf,
    /// Seed for `--split half`
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let p = |v: &str| v.parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((p(w)?, p(h)?))
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn usage(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: 2,
            error: error.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::RankOutOfRange { .. } => 2,
            _ => 1,
        };
        Self {
            code,
            error: e.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<Error>() {
            Some(Error::Config(_)) => 2,
            _ => 1,
        };
        Self { code, error }
    }
}

type CmdResult = Result<(), Failure>;

fn write(path: &Path, contents: &str) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    ExperimentConfig::load(path).map_err(|e| match e {
        Error::MissingFile(p) => Failure::usage(anyhow!("config file {} not found", p.display())),
        other => other.into(),
    })
}

fn synth(a: SynthArgs) -> CmdResult {
    let shape = match (a.dim, a.image) {
        (Some(dim), None) => SynthShape::Vector { dim },
        (None, Some((width, height))) => SynthShape::Image { width, height },
        _ => {
            return Err(Failure::usage(anyhow!(
                "give exactly one of --dim or --image"
            )))
        }
    };
    let spec = SynthSpec {
        num_identities: a.ids,
        samples_per_identity: a.per_id,
        shape,
        intra_class_stddev: a.stddev,
        inter_class_separation: a.sep,
        seed: a.seed,
        cameras: a.cameras,
    };
    let ds: LabeledDataset64 = generate_synthetic(&spec)?;
    let manifest = save_dataset(&ds, &a.out)?;
    println!("wrote {} samples to {}", ds.len(), manifest.display());
    Ok(())
}

fn train(config: &Path, resume: Option<&Path>) -> CmdResult {
    let cfg = load_config(config)?;
    let (ds, split) = prepare_data(&cfg)?;
    let train_ds = ds.subset(&split.train);
    fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    split.save(&cfg.output_dir.join("split.json"))?;
    let log_path = cfg.output_dir.join("train_log.jsonl");
    let mut trainer = match resume {
        Some(path) => {
            Trainer::resume_from_path(&train_ds, path, Some(&cfg.backbone), cfg.train.clone())?
        }
        None => {
            if log_path.exists() {
                fs::remove_file(&log_path)
                    .with_context(|| format!("removing stale {}", log_path.display()))?;
            }
            Trainer::new(&train_ds, cfg.backbone.clone(), cfg.train.clone())?
        }
    };
    let start = trainer.iteration();
    let opts = RunOptions {
        checkpoint_dir: Some(cfg.output_dir.join("checkpoints")),
        log_path: Some(log_path),
    };
    let records = trainer.run(&opts)?;
    match records.last() {
        Some(r) => println!(
            "trained iterations {}..{}: final total loss {:.6}",
            start + 1,
            r.iteration,
            r.total
        ),
        None => println!("checkpoint already at iteration {start}; nothing to do"),
    }
    println!(
        "checkpoint: {}",
        opts.checkpoint_dir
            .expect("set above")
            .join(qmet::trainer::FINAL_CHECKPOINT)
            .display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> CmdResult {
    let ckpt = load_checkpoint::<f64>(&a.checkpoint)?;
    let ds: LabeledDataset64 = load_manifest(&a.data)?;
    let split = match a.split.as_str() {
        "half" => make_split(&ds, SplitProtocol::HalfIdentities, a.seed)?.eval,
        "self" => EvalSplit::self_match(ds.len()),
        path => Split::load(Path::new(path))?.eval,
    };
    let network = qmet::backbone::Network::new(ckpt.config.clone())?;
    let (curve, summary) = evaluate(&network, &ckpt.params, &ds, &split, a.mode)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write(&a.out.join("cmc.csv"), &curve.to_csv())?;
    let json = serde_json::to_string_pretty(&summary).map_err(anyhow::Error::from)?;
    write(&a.out.join("summary.json"), &json)?;
    println!("{json}");
    Ok(())
}

fn gradcheck(trials: usize, seed: u64, tol: f64) -> CmdResult {
    if tol.is_nan() || tol < 0.0 {
        return Err(Failure::usage(anyhow!("--tol must be >= 0")));
    }
    let r = run_gradcheck(trials, seed, tol)?;
    println!(
        "quartet gradient ({} cases): worst relative error {:e}",
        r.trials, r.quartet_worst
    );
    println!(
        "network gradient (up to {} parameters): worst relative error {:e}",
        r.network_params, r.network_worst
    );
    println!(
        "worst relative error {:e} (tolerance {:e})",
        r.worst(),
        r.tolerance
    );
    if r.passed {
        Ok(())
    } else {
        Err(Failure {
            code: 1,
            error: anyhow!("gradient check failed: {:e} >= {:e}", r.worst(), tol),
        })
    }
}

fn compare(config: &Path, out: Option<PathBuf>) -> CmdResult {
    let cfg = load_config(config)?;
    let out = out.unwrap_or_else(|| cfg.output_dir.clone());
    let (ds, split) = prepare_data(&cfg)?;
    let rows = run_compare(&ds, &split, &cfg.backbone, &cfg.train)?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let table = compare_table(&rows);
    write(&out.join("compare.csv"), &compare_csv(&rows))?;
    write(&out.join("compare.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train { config, resume } => train(&config, resume.as_deref()),
        Command::Eval(a) => eval(a),
        Command::Gradcheck { trials, seed, tol } => gradcheck(trials, seed, tol),
        Command::Compare { config, out } => compare(&config, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
