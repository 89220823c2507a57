//! Command-line entry points binding datasets, models, attacks and the
//! evaluation harness into reproducible workflows.
//!
//! Exit codes: 0 success, 1 domain error (bad config, degenerate input,
//! missing files), 2 usage error. Every run writes its resolved
//! configuration (after `--set` overrides) and the tool version into the
//! output directory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vra_core::attacks::DEFAULT_EPSILON;
use vra_core::data::{generate_synthetic_split, load_dataset, save_dataset, Split};
use vra_core::directions::DirectionBasis;
use vra_core::error::Error;
use vra_core::eval::config::{
    self, AttackJobConfig, GenDataConfig, OverlapExpConfig, SweepConfig, TrainJobConfig,
};
use vra_core::eval::{emit_report, parse_results_csv, run_budget_sweep, run_overlap_experiment};
use vra_core::model::features::{extract_features, FeatureSpec};
use vra_core::model::{checkpoint, train_model};
use vra_core::viz::{dump_triptychs, DEFAULT_AMPLIFY};

#[derive(Parser)]
#[command(name = "vra", version, about = "Hard-label black-box attacks on video classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads for per-clip parallelism (default: VRA_WORKERS or
    /// all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Verbose progress output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Args)]
struct JobArgs {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Dotted-key overrides, e.g. --set attack.q_max=10
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for --set seed=N (applied last).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic source/target dataset pair with controlled
    /// class overlap.
    GenData(JobArgs),
    /// Train a model on a dataset root and save a checkpoint.
    Train(JobArgs),
    /// Run a single attack at one query budget over an evaluation set.
    Attack(JobArgs),
    /// Evaluate attacks across query budgets (prefix replay) and emit a
    /// results table, summary and plot.
    Sweep(JobArgs),
    /// Controlled class-overlap experiment: per level, train a fresh
    /// source model and measure deception rate against a fixed target.
    OverlapExp(JobArgs),
    /// Re-emit summary and plot from an existing results table.
    Report {
        /// Existing results.csv.
        #[arg(long)]
        results: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump per-frame triptychs (clean | perturbed | amplified diff) for
    /// one clip using a seeded attack direction.
    Viz {
        /// Source model checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset root containing the clip.
        #[arg(long)]
        data: PathBuf,
        /// Clip id within the dataset.
        #[arg(long)]
        clip: String,
        #[arg(long, default_value_t = DEFAULT_EPSILON)]
        epsilon: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_AMPLIFY)]
        amplify: f64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn overrides_from(args: &JobArgs) -> Result<Vec<(String, String)>, Error> {
    let mut overrides = Vec::new();
    for raw in &args.set {
        overrides.push(config::parse_override_arg(raw)?);
    }
    if let Some(seed) = args.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    Ok(overrides)
}

/// Writes `<out>/resolved_config.json` with the tool version.
fn log_resolved_config(out_dir: &Path, doc: &serde_json::Value) -> Result<(), Error> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let wrapped = serde_json::json!({
        "tool": "vra",
        "version": env!("CARGO_PKG_VERSION"),
        "config_hash": config::config_hash(doc),
        "config": doc,
    });
    let path = out_dir.join("resolved_config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&wrapped).expect("serializes"))
        .map_err(|e| Error::io(&path, e))
}

fn cmd_gen_data(args: &JobArgs, verbose: u8) -> Result<(), Error> {
    let overrides = overrides_from(args)?;
    let (cfg, doc) = config::load_config::<GenDataConfig>(&args.config, &overrides)?;
    cfg.validate()?;
    log_resolved_config(&cfg.output_dir, &doc)?;

    for (split, clips_per_class) in [
        (Split::Train, cfg.clips_per_class_train),
        (Split::Val, cfg.clips_per_class_val),
    ] {
        let (source, target) = generate_synthetic_split(
            &cfg.overlap,
            cfg.n_target_classes,
            clips_per_class,
            cfg.shape,
            split,
        )?;
        let (count, fraction) = vra_core::data::class_overlap(&source.ontology, &target.ontology);
        save_dataset(&source, &cfg.output_dir.join("source").join(split.to_string()))?;
        save_dataset(&target, &cfg.output_dir.join("target").join(split.to_string()))?;
        if verbose > 0 {
            eprintln!(
                "{split}: {} source clips, {} target clips, overlap {count} ({fraction:.3})",
                source.clips.len(),
                target.clips.len()
            );
        }
    }
    println!(
        "datasets written to {} (overlap {} of {} source classes)",
        cfg.output_dir.display(),
        cfg.overlap.n_common_classes,
        cfg.overlap.n_source_classes
    );
    Ok(())
}

fn cmd_train(args: &JobArgs, verbose: u8) -> Result<(), Error> {
    let overrides = overrides_from(args)?;
    let (cfg, doc) = config::load_config::<TrainJobConfig>(&args.config, &overrides)?;
    log_resolved_config(&cfg.output_dir, &doc)?;

    let dataset = load_dataset(&cfg.data_root)?;
    if verbose > 0 {
        eprintln!(
            "training on {} clips, {} classes",
            dataset.clips.len(),
            dataset.ontology.len()
        );
    }
    let arch = cfg.arch.descriptor(dataset.ontology.len())?;
    let model = train_model(&dataset, &arch, &cfg.train)?;
    let ckpt_path = cfg.output_dir.join(&cfg.checkpoint_name);
    checkpoint::save(&model, &ckpt_path)?;
    println!(
        "checkpoint {} written (val top-1 {:.4})",
        ckpt_path.display(),
        model.val_top1()
    );
    Ok(())
}

fn cmd_attack(args: &JobArgs, _verbose: u8) -> Result<(), Error> {
    let overrides = overrides_from(args)?;
    let (cfg, doc) = config::load_config::<AttackJobConfig>(&args.config, &overrides)?;
    cfg.attack.spec.validate()?;
    if cfg.attack.q_max == 0 {
        return Err(Error::Parameter("attack.q_max must be >= 1".into()));
    }
    log_resolved_config(&cfg.output_dir, &doc)?;

    // A single attack at a single budget is a one-cell sweep.
    let sweep = SweepConfig {
        source_checkpoint: cfg.source_checkpoint.clone(),
        target_checkpoint: cfg.target_checkpoint.clone(),
        eval_data: cfg.eval_data.clone(),
        attacks: vec![cfg.attack.spec.clone()],
        budgets: vec![cfg.attack.q_max],
        epsilon: cfg.epsilon,
        seed: cfg.seed,
        max_eval_clips: cfg.max_eval_clips,
        clip_to_valid_range: cfg.clip_to_valid_range,
        output_dir: cfg.output_dir.clone(),
    };
    let outcome = run_budget_sweep(&sweep, &config::config_hash(&doc))?;
    let files = emit_report(&outcome.reports, &cfg.output_dir)?;
    let row = &outcome.reports[0];
    println!(
        "{} @ {} queries: asr={:.4} dr={:.4} (results in {})",
        row.attack,
        row.budget,
        row.asr,
        row.dr,
        files.results_csv.display()
    );
    Ok(())
}

fn cmd_sweep(args: &JobArgs, verbose: u8) -> Result<(), Error> {
    let overrides = overrides_from(args)?;
    let (cfg, doc) = config::load_config::<SweepConfig>(&args.config, &overrides)?;
    cfg.validate()?;
    log_resolved_config(&cfg.output_dir, &doc)?;

    if verbose > 0 {
        eprintln!(
            "sweep: {} attacks x {} budgets",
            cfg.attacks.len(),
            cfg.budgets.len()
        );
    }
    let outcome = run_budget_sweep(&cfg, &config::config_hash(&doc))?;
    let files = emit_report(&outcome.reports, &cfg.output_dir)?;
    println!(
        "{} rows written to {}",
        outcome.reports.len(),
        files.results_csv.display()
    );
    Ok(())
}

fn cmd_overlap_exp(args: &JobArgs, _verbose: u8) -> Result<(), Error> {
    let overrides = overrides_from(args)?;
    let (cfg, doc) = config::load_config::<OverlapExpConfig>(&args.config, &overrides)?;
    cfg.validate()?;
    log_resolved_config(&cfg.output_dir, &doc)?;

    let outcome = run_overlap_experiment(&cfg)?;

    let table_path = cfg.output_dir.join("overlap_results.csv");
    let mut text = String::from(
        "n_source_classes,n_common_classes,level_seed,source_val_top1,clean_top1,asr,dr\n",
    );
    for row in &outcome.rows {
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.n_source_classes,
            row.n_common_classes,
            row.level_seed,
            row.source_val_top1,
            row.clean_top1,
            row.asr,
            row.dr
        ));
    }
    std::fs::write(&table_path, text).map_err(|e| Error::io(&table_path, e))?;

    let mut summary = String::new();
    summary.push_str("overlap  dr\n");
    for row in &outcome.rows {
        summary.push_str(&format!("{:>7}  {:.4}\n", row.n_common_classes, row.dr));
    }
    summary.push_str(&format!("spearman rho = {:.4}\n", outcome.spearman));
    if let Some(dr) = outcome.baseline_dr {
        summary.push_str(&format!("random-perturbation baseline dr = {dr:.4}\n"));
    }
    let summary_path = cfg.output_dir.join("overlap_summary.txt");
    std::fs::write(&summary_path, &summary).map_err(|e| Error::io(&summary_path, e))?;

    print!("{summary}");
    println!("table written to {}", table_path.display());
    Ok(())
}

fn cmd_report(results: &Path, out: &Path) -> Result<(), Error> {
    let bytes = std::fs::read(results)
        .map_err(|e| Error::Load(format!("missing results {}: {e}", results.display())))?;
    let reports = parse_results_csv(&bytes)?;
    if reports.is_empty() {
        return Err(Error::Parameter(format!(
            "results table {} has no rows",
            results.display()
        )));
    }
    let doc = serde_json::json!({"reemitted_from": results.display().to_string()});
    log_resolved_config(out, &doc)?;
    let files = emit_report(&reports, out)?;
    println!("report re-emitted to {}", files.summary_txt.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_viz(
    ckpt: &Path,
    data: &Path,
    clip_id: &str,
    epsilon: f64,
    seed: u64,
    amplify: f64,
    out: &Path,
) -> Result<(), Error> {
    let model = checkpoint::load(ckpt)?;
    let dataset = load_dataset(data)?;
    let clip = dataset
        .clips
        .iter()
        .find(|c| c.clip_id == clip_id)
        .ok_or_else(|| {
            Error::Parameter(format!(
                "clip {clip_id:?} not found in {}",
                data.display()
            ))
        })?;

    let spec = FeatureSpec::penultimate();
    let features = extract_features(&model, &clip.pixels, &spec)?;
    let mut basis = DirectionBasis::init(&features, seed)?;
    let direction = basis.next_direction()?;
    let delta = vra_core::attacks::vra_perturb(&model, &clip.pixels, &direction, epsilon, &spec, true)?;

    let doc = serde_json::json!({
        "checkpoint": ckpt.display().to_string(),
        "data": data.display().to_string(),
        "clip": clip_id,
        "epsilon": epsilon,
        "seed": seed,
        "amplify": amplify,
    });
    log_resolved_config(out, &doc)?;
    let paths = dump_triptychs(clip, &delta, out, amplify)?;
    println!("{} triptychs written to {}", paths.len(), out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Error> {
    match &cli.command {
        Command::GenData(args) => cmd_gen_data(args, cli.verbose),
        Command::Train(args) => cmd_train(args, cli.verbose),
        Command::Attack(args) => cmd_attack(args, cli.verbose),
        Command::Sweep(args) => cmd_sweep(args, cli.verbose),
        Command::OverlapExp(args) => cmd_overlap_exp(args, cli.verbose),
        Command::Report { results, out } => cmd_report(results, out),
        Command::Viz {
            checkpoint,
            data,
            clip,
            epsilon,
            seed,
            amplify,
            out,
        } => cmd_viz(checkpoint, data, clip, *epsilon, *seed, *amplify, out),
    }
}

fn main() -> ExitCode {
    // clap exits with code 2 on usage errors.
    let cli = Cli::parse();

    let workers = cli
        .workers
        .or_else(|| {
            std::env::var("VRA_WORKERS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .filter(|&w| w > 0);
    if let Some(workers) = workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
        {
            eprintln!("warning: worker pool not applied: {e}");
        }
    }

    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
