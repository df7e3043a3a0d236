//! Command-line surface: dataset generation, training, evaluation,
//! retrieval, oracles, gradient checks, and the fusion ablation, all driven
//! by a JSON run config that is echoed into every output directory.

use crate::data::dataset::{build_dataset, DatasetConfig, MultiViewDataset, FULLY_SUPERVISED};
use crate::error::{CvmimError, Result};
use crate::eval::{
    classifier_accuracy, extract_embeddings, fit_downstream, probe_disentanglement,
    retrieval_stats, retrieve_neighbors, single_shot_protocol, AccuracyMatrix, DownstreamConfig,
    FrozenEmbeddings, Metric, Space,
};
use crate::nets::NetConfig;
use crate::oracle::verify_propositions;
use crate::trainer::checkpoint::{load_checkpoint, save_checkpoint};
use crate::trainer::{train_to, TrainConfig, Trainer};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Everything needed to reproduce a run from one file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub downstream: DownstreamConfig,
    /// Extra checkpoint cadence during training; 0 keeps only the final one.
    pub checkpoint_every: u64,
}

#[derive(Parser)]
#[command(
    name = "cvmim",
    about = "Cross-view MI maximization workbench for view-disentangled 2D pose representations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run config; defaults apply for absent file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the training seed from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct OutArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Allow writing into an existing non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and persist the synthetic multi-view dataset.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Train the full objective; writes checkpoints and train.log.jsonl.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        /// Resume from an existing checkpoint directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a trained checkpoint; writes results.json and results.csv.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        /// Checkpoint directory produced by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Nearest neighbors of one (sequence, frame, view) query.
    Retrieve {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seq: u64,
        #[arg(long)]
        frame: u32,
        #[arg(long)]
        view: u32,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Embedding space: pose or view.
        #[arg(long, default_value = "pose")]
        space: String,
        /// Distance: l2 or cosine.
        #[arg(long, default_value = "l2")]
        metric: String,
    },
    /// Verify the information-theoretic propositions numerically.
    Oracle {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference gradient reports for every network/loss pairing.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train all three fusion modes and emit a comparison table.
    AblateFusion {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
    },
}

fn load_run_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg: RunConfig = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                CvmimError::Config(format!("cannot read {}: {e}", path.display()))
            })?;
            serde_json::from_str(&text)
                .map_err(|e| CvmimError::Config(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
        cfg.dataset.seed = seed.wrapping_add(1);
    }
    cfg.train.validate()?;
    Ok(cfg)
}

/// Creates `out`, refusing a non-empty directory without --force, and writes
/// the config echo before any other artifact.
fn prepare_out_dir(out: &OutArgs, cfg: &RunConfig) -> Result<()> {
    if out.out.exists() {
        let non_empty = fs::read_dir(&out.out)?.next().is_some();
        if non_empty && !out.force {
            return Err(CvmimError::Config(format!(
                "output directory {} is not empty; pass --force to reuse it",
                out.out.display()
            )));
        }
    } else {
        fs::create_dir_all(&out.out)?;
    }
    fs::write(
        out.out.join("config.json"),
        serde_json::to_vec_pretty(cfg)?,
    )?;
    Ok(())
}

fn cmd_gen_data(config: &ConfigArgs, out: &OutArgs) -> Result<()> {
    let cfg = load_run_config(config)?;
    prepare_out_dir(out, &cfg)?;
    let ds = build_dataset(&cfg.dataset)?;
    ds.save(&out.out)?;
    println!(
        "dataset: {} sequences x {} frames x {} views ({} renders) -> {}",
        ds.sequences.len(),
        cfg.dataset.frames,
        cfg.dataset.views,
        ds.renders.len(),
        out.out.display()
    );
    Ok(())
}

fn cmd_train(config: &ConfigArgs, out: &OutArgs, resume: Option<&Path>) -> Result<()> {
    let cfg = load_run_config(config)?;
    prepare_out_dir(out, &cfg)?;
    let ds = build_dataset(&cfg.dataset)?;
    let mut trainer = match resume {
        Some(dir) => load_checkpoint(dir)?,
        None => Trainer::new(cfg.train.clone(), cfg.net)?,
    };
    let log_path = out.out.join("train.log.jsonl");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;
    let total = trainer.cfg.iterations;
    let every = cfg.checkpoint_every;
    while trainer.iteration < total {
        let next = if every > 0 {
            (trainer.iteration + every).min(total)
        } else {
            total
        };
        let bundle = train_to(&mut trainer, &ds, next, Some(&mut log))?;
        save_checkpoint(&trainer, &out.out.join("checkpoint"))?;
        if let Some(b) = bundle {
            println!(
                "iteration {}/{}: e_loss {:.4} q_loss {:.4} d_loss {:.4}",
                trainer.iteration, total, b.e_loss, b.q_loss, b.d_loss
            );
        }
    }
    println!("checkpoint -> {}", out.out.join("checkpoint").display());
    Ok(())
}

#[derive(Serialize)]
struct EvalResults {
    fully_supervised_per_view: Vec<f64>,
    fully_supervised_avg: f64,
    single_shot: AccuracyMatrix,
    probes: crate::eval::DisentanglementReport,
    retrieval: crate::eval::RetrievalStats,
}

fn write_results_csv(path: &Path, per_view: &[f64], matrix: &AccuracyMatrix) -> Result<()> {
    let mut csv = String::from("protocol,train_view,test_view,accuracy\n");
    for (v, acc) in per_view.iter().enumerate() {
        csv.push_str(&format!("fully_supervised,all,{v},{acc}\n"));
    }
    for (i, row) in matrix.acc.iter().enumerate() {
        for (j, acc) in row.iter().enumerate() {
            csv.push_str(&format!("single_shot,{i},{j},{acc}\n"));
        }
    }
    fs::write(path, csv)?;
    Ok(())
}

fn load_embeddings_from_checkpoint(
    checkpoint: &Path,
    ds: &MultiViewDataset,
) -> Result<FrozenEmbeddings> {
    if !checkpoint.join("manifest.json").exists() {
        return Err(CvmimError::Checkpoint(format!(
            "checkpoint not found at {}",
            checkpoint.display()
        )));
    }
    let mut trainer = load_checkpoint(checkpoint)?;
    extract_embeddings(&mut trainer.nets.enc, ds)
}

fn cmd_eval(config: &ConfigArgs, out: &OutArgs, checkpoint: &Path) -> Result<()> {
    let cfg = load_run_config(config)?;
    prepare_out_dir(out, &cfg)?;
    let ds = build_dataset(&cfg.dataset)?;
    let embeds = load_embeddings_from_checkpoint(checkpoint, &ds)?;

    let split = ds
        .splits
        .get(FULLY_SUPERVISED)
        .ok_or_else(|| CvmimError::Dataset("missing fully-supervised split".into()))?;
    let clf = fit_downstream(&embeds, &ds, split, &cfg.downstream)?;
    let mut per_view = Vec::new();
    for v in 0..ds.config.views as u32 {
        per_view.push(classifier_accuracy(&clf, &embeds, &ds, &split.test_seqs, v)?);
    }
    let fully_avg = per_view.iter().sum::<f64>() / per_view.len() as f64;
    let single_shot = single_shot_protocol(&embeds, &ds, &cfg.downstream)?;
    let probes = probe_disentanglement(&embeds, &ds, &cfg.downstream)?;
    let retrieval = retrieval_stats(&embeds, &ds, 200, 5, cfg.train.seed)?;

    let results = EvalResults {
        fully_supervised_per_view: per_view.clone(),
        fully_supervised_avg: fully_avg,
        single_shot,
        probes,
        retrieval,
    };
    fs::write(
        out.out.join("results.json"),
        serde_json::to_vec_pretty(&results)?,
    )?;
    write_results_csv(&out.out.join("results.csv"), &per_view, &results.single_shot)?;
    println!(
        "fully-supervised avg {:.4}; single-shot grand avg {:.4}; view-from-zv {:.4}",
        fully_avg, results.single_shot.grand_avg, results.probes.view_from_zv_acc
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_retrieve(
    config: &ConfigArgs,
    checkpoint: &Path,
    seq: u64,
    frame: u32,
    view: u32,
    k: usize,
    space: &str,
    metric: &str,
) -> Result<()> {
    let cfg = load_run_config(config)?;
    let ds = build_dataset(&cfg.dataset)?;
    let embeds = load_embeddings_from_checkpoint(checkpoint, &ds)?;
    let space = match space {
        "pose" => Space::Pose,
        "view" => Space::View,
        other => {
            return Err(CvmimError::InvalidArgument(format!(
                "unknown space '{other}' (expected pose or view)"
            )))
        }
    };
    let metric = match metric {
        "l2" => Metric::L2,
        "cosine" => Metric::Cosine,
        other => {
            return Err(CvmimError::InvalidArgument(format!(
                "unknown metric '{other}' (expected l2 or cosine)"
            )))
        }
    };
    let neighbors = retrieve_neighbors(&embeds, (seq, frame, view), space, k, metric)?;
    println!("query seq={seq} frame={frame} view={view} (class {})", ds.label_of(seq));
    for (rank, ((s, f, v), dist)) in neighbors.iter().enumerate() {
        println!(
            "{:>3}. seq={s} frame={f} view={v} class={} dist={dist:.6}",
            rank + 1,
            ds.label_of(*s)
        );
    }
    Ok(())
}

fn cmd_oracle(trials: usize, seed: u64) -> Result<()> {
    let report = verify_propositions(trials, seed)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if report.dpi_violations > 0
        || report.prop1_max_residual > 1e-12
        || report.eq4_min_margin < -1e-12
    {
        return Err(CvmimError::InvalidArgument(
            "proposition verification found violations".into(),
        ));
    }
    let sandwich = crate::checks::gaussian_sandwich(&[0.0, 0.5, 0.9], seed)?;
    println!("{}", serde_json::to_string_pretty(&sandwich)?);
    for row in &sandwich {
        if row.lower > row.true_mi + 3.0 * row.lower_se || row.upper < row.true_mi - 3.0 * row.upper_se
        {
            return Err(CvmimError::InvalidArgument(format!(
                "estimator bounds do not bracket the closed-form MI at rho {}",
                row.rho
            )));
        }
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<()> {
    let mut failed = false;
    for report in crate::checks::network_grad_reports(seed)? {
        let status = if report.report.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<28} max rel err {:.3e} (tol {:.0e}) {}",
            report.name, report.report.max_rel_err, report.report.tol, status
        );
        failed |= !report.report.passed();
    }
    if failed {
        return Err(CvmimError::GradCheck("one or more networks failed".into()));
    }
    Ok(())
}

fn cmd_ablate_fusion(config: &ConfigArgs, out: &OutArgs) -> Result<()> {
    use crate::losses::FusionMode;
    let base = load_run_config(config)?;
    prepare_out_dir(out, &base)?;
    let ds = build_dataset(&base.dataset)?;
    let mut table: BTreeMap<String, f64> = BTreeMap::new();
    for fusion in [
        FusionMode::Concat,
        FusionMode::ProductOfExperts,
        FusionMode::MixtureOfExperts,
    ] {
        let mut cfg = base.clone();
        cfg.train.fusion = fusion;
        let mut trainer = Trainer::new(cfg.train.clone(), cfg.net)?;
        train_to(&mut trainer, &ds, cfg.train.iterations, None)?;
        let embeds = extract_embeddings(&mut trainer.nets.enc, &ds)?;
        let matrix = single_shot_protocol(&embeds, &ds, &cfg.downstream)?;
        println!("{:<20} grand avg {:.4}", fusion.name(), matrix.grand_avg);
        table.insert(fusion.name().to_string(), matrix.grand_avg);
    }
    fs::write(
        out.out.join("fusion_ablation.json"),
        serde_json::to_vec_pretty(&table)?,
    )?;
    Ok(())
}

/// Entry point for the binary; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData { config, out } => cmd_gen_data(config, out),
        Command::Train {
            config,
            out,
            checkpoint,
        } => cmd_train(config, out, checkpoint.as_deref()),
        Command::Eval {
            config,
            out,
            checkpoint,
        } => cmd_eval(config, out, checkpoint),
        Command::Retrieve {
            config,
            checkpoint,
            seq,
            frame,
            view,
            k,
            space,
            metric,
        } => cmd_retrieve(config, checkpoint, *seq, *frame, *view, *k, space, metric),
        Command::Oracle { trials, seed } => cmd_oracle(*trials, *seed),
        Command::Gradcheck { seed } => cmd_gradcheck(*seed),
        Command::AblateFusion { config, out } => cmd_ablate_fusion(config, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            1
        }
    }
}
