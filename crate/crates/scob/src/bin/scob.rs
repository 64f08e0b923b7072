//! Command-line driver: dataset generation, training, evaluation,
//! ablation sweeps, and CAM export.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use scob::data::{drop_to_single_positive, generate_dataset, load_dataset, save_dataset, DatasetSpec};
use scob::error::{Result, ScobError};
use scob::eval::{mean_average_precision, plots, prf_metrics};
use scob::export::export_cams;
use scob::rng::mix;
use scob::train::{
    cam_quality, load_checkpoint, mean_predicted_positives, predict_scores, resume_bootstrap,
    run_bootstrap, state_from_checkpoint, write_histograms_csv, write_metrics_csv, TrainConfig,
    TrainOutcome,
};

#[derive(Parser)]
#[command(name = "scob", about = "Semantic contrastive bootstrapping on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file (single-positive labels applied).
    GenData(GenDataArgs),
    /// Train a model on a dataset file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset's validation split.
    Eval(EvalArgs),
    /// Run a set of named training variants and write a comparison CSV.
    Ablate(AblateArgs),
    /// Export activation maps and masks for inspection.
    ExportCam(ExportCamArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output dataset path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 6)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = 2000)]
    train: usize,
    #[arg(long, default_value_t = 500)]
    val: usize,
    #[arg(long, default_value_t = 1)]
    pos_min: usize,
    #[arg(long, default_value_t = 3)]
    pos_max: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Seed for the one-time single-positive label drop (defaults to a
    /// stream derived from --seed).
    #[arg(long)]
    drop_seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset file produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and CSV logs.
    #[arg(long)]
    out: PathBuf,
    /// Optional key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config overrides, e.g. --set epochs=8 (wins over the file).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Resume from a checkpoint instead of initializing.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Start from the small desk preset instead of the full defaults.
    #[arg(long)]
    desk: bool,
    /// Also emit SVG charts of the metric curves and histograms.
    #[arg(long)]
    plots: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output CSV path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Disable the mask-guided second inference pass.
    #[arg(long)]
    no_refine: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated variant names: full, no_cl, no_cam, baseline,
    /// random_negatives, joint_optim, two_stage, gt_masks.
    #[arg(long, default_value = "full,no_cl,baseline")]
    variants: String,
    /// Comma-separated seeds; each variant runs once per seed.
    #[arg(long, default_value = "1,2,3")]
    seeds: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct ExportCamArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of validation samples to export.
    #[arg(long, default_value_t = 32)]
    limit: usize,
}

fn apply_overrides(cfg: &mut TrainConfig, file: &Option<PathBuf>, sets: &[String]) -> Result<()> {
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)?;
        cfg.apply_kv_text(&text)?;
    }
    for kv in sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| ScobError::Config(format!("--set expects key=value, got '{kv}'")))?;
        cfg.set_kv(k.trim(), v.trim())?;
    }
    cfg.validate()
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let spec = DatasetSpec {
        num_classes: args.classes,
        image_size: args.image_size,
        num_train: args.train,
        num_val: args.val,
        positives_range: (args.pos_min, args.pos_max),
        noise_sigma: args.noise,
        seed: args.seed,
    };
    let mut dataset = generate_dataset(&spec)?;
    let drop_seed = args.drop_seed.unwrap_or_else(|| mix(args.seed, 0x64726f70));
    drop_to_single_positive(&mut dataset, drop_seed)?;
    save_dataset(&dataset, &args.out)?;
    println!(
        "wrote {} train / {} val samples ({} classes, {}x{}) to {}",
        dataset.train.len(),
        dataset.val.len(),
        spec.num_classes,
        spec.image_size,
        spec.image_size,
        args.out.display()
    );
    Ok(())
}

fn emit_plots(outcome: &TrainOutcome, dir: &std::path::Path) -> Result<()> {
    let epochs: Vec<f64> = outcome.metrics.iter().map(|m| m.epoch as f64).collect();
    let series = vec![
        (
            "val mAP".to_string(),
            epochs
                .iter()
                .zip(outcome.metrics.iter())
                .map(|(&e, m)| (e, m.val_map))
                .collect(),
        ),
        (
            "val OF1".to_string(),
            epochs
                .iter()
                .zip(outcome.metrics.iter())
                .map(|(&e, m)| (e, m.val_of1))
                .collect(),
        ),
        (
            "unknown-negative mean prob".to_string(),
            epochs
                .iter()
                .zip(outcome.metrics.iter())
                .map(|(&e, m)| (e, m.mean_unknown_neg_prob))
                .collect(),
        ),
    ];
    plots::line_chart("validation metrics", &series, &dir.join("metrics.svg"))?;
    let rows: Vec<Vec<f64>> = outcome.histograms.iter().map(|(_, h)| h.clone()).collect();
    plots::heat_grid(
        "unknown-negative prediction histogram by epoch",
        &rows,
        &dir.join("histograms.svg"),
    )?;
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let dataset = load_dataset(&args.data)?;
    let outcome = if let Some(ckpt) = &args.resume {
        resume_bootstrap(ckpt, &dataset, Some(&args.out))?
    } else {
        let mut cfg = if args.desk { TrainConfig::desk() } else { TrainConfig::default() };
        apply_overrides(&mut cfg, &args.config, &args.sets)?;
        run_bootstrap(&cfg, &dataset, Some(&args.out))?
    };
    write_metrics_csv(&outcome.metrics, &args.out.join("metrics.csv"))?;
    write_histograms_csv(&outcome.histograms, &args.out.join("histograms.csv"))?;
    if args.plots {
        emit_plots(&outcome, &args.out)?;
    }
    let last = outcome.metrics.last().expect("at least one epoch");
    println!(
        "trained to epoch {}: val mAP {:.4}, OF1 {:.4}, unknown-negative mean prob {:.4}",
        last.epoch, last.val_map, last.val_of1, last.mean_unknown_neg_prob
    );
    println!("artifacts in {}", args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let dataset = load_dataset(&args.data)?;
    let data = load_checkpoint(&args.checkpoint)?;
    let state = state_from_checkpoint(data, &dataset)?;
    let refine = state.config.eval_refine && !args.no_refine;
    let scores = predict_scores(
        &state.online,
        &state.model_cfg,
        &dataset.val,
        state.config.gamma_cam,
        refine,
    )?;
    let labels: Vec<Vec<u8>> = dataset.val.iter().map(|s| s.y.clone()).collect();
    let (map, _) = mean_average_precision(&scores, &labels)?;
    let m = prf_metrics(&scores, &labels, args.threshold)?;
    let mut csv = String::from("mAP,OP,OR,OF1,CP,CR,CF1,threshold\n");
    let _ = writeln!(
        csv,
        "{map},{},{},{},{},{},{},{}",
        m.op, m.or_, m.of1, m.cp, m.cr, m.cf1, m.threshold
    );
    match &args.out {
        Some(path) => {
            std::fs::write(path, &csv)?;
            println!("mAP {map:.4}; metrics written to {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let dataset = load_dataset(&args.data)?;
    let mut base = TrainConfig::desk();
    apply_overrides(&mut base, &args.config, &args.sets)?;
    let variants: Vec<&str> = args.variants.split(',').map(|s| s.trim()).collect();
    let seeds: Vec<u64> = args
        .seeds
        .split(',')
        .map(|s| s.trim().parse::<u64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| ScobError::Config("bad --seeds list".into()))?;
    std::fs::create_dir_all(&args.out)?;
    let mut csv =
        String::from("variant,seed,val_mAP,val_OF1,val_CF1,cam_P,cam_R,cam_F1,khat_val,mean_unknown_neg_prob\n");
    let labels: Vec<Vec<u8>> = dataset.val.iter().map(|s| s.y.clone()).collect();
    for variant in &variants {
        for &seed in &seeds {
            let mut cfg = base.variant(variant)?;
            cfg.seed = seed;
            let run_dir = args.out.join(format!("{variant}_seed{seed}"));
            let outcome = run_bootstrap(&cfg, &dataset, Some(&run_dir))?;
            let scores = predict_scores(
                &outcome.state.online,
                &outcome.state.model_cfg,
                &dataset.val,
                cfg.gamma_cam,
                cfg.eval_refine,
            )?;
            let (map, _) = mean_average_precision(&scores, &labels)?;
            let prf = prf_metrics(&scores, &labels, 0.5)?;
            let khat = mean_predicted_positives(&scores);
            let (cp, cr, cf) = if matches!(cfg.arch, scob::nn::Arch::Smt) {
                cam_quality(
                    &outcome.state.online,
                    &outcome.state.model_cfg,
                    &dataset.val,
                    cfg.gamma_cam,
                )?
            } else {
                (0.0, 0.0, 0.0)
            };
            let munp = outcome
                .metrics
                .last()
                .map(|m| m.mean_unknown_neg_prob)
                .unwrap_or(f64::NAN);
            let _ = writeln!(
                csv,
                "{variant},{seed},{map},{},{},{cp},{cr},{cf},{khat},{munp}",
                prf.of1, prf.cf1
            );
            println!("{variant} seed {seed}: val mAP {map:.4}, cam F1 {cf:.4}");
        }
    }
    std::fs::write(args.out.join("comparison.csv"), &csv)?;
    println!("comparison written to {}", args.out.join("comparison.csv").display());
    Ok(())
}

fn cmd_export_cam(args: ExportCamArgs) -> Result<()> {
    let dataset = load_dataset(&args.data)?;
    let data = load_checkpoint(&args.checkpoint)?;
    let state = state_from_checkpoint(data, &dataset)?;
    let csv = export_cams(
        &state.online,
        &state.model_cfg,
        &dataset.val,
        state.config.gamma_cam,
        args.limit,
        &args.out,
    )?;
    println!(
        "exported {} activation/mask rows to {}",
        csv.lines().count().saturating_sub(1),
        args.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::ExportCam(a) => cmd_export_cam(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
