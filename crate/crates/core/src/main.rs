use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::Device;
use clap::{Parser, Subcommand};
use log::{info, warn};

use trajectory_core::config::{ExperimentConfig, DATA_ROOT_ENV};
use trajectory_core::data::{
    build_cache, build_manifest, in_split, load_cohort, synthesize_cohort_sized, write_synthetic_cache, PatientSeries,
    Split,
};
use trajectory_core::evaluation::{extract_features, linear_probe, EvalReport, Subset};
use trajectory_core::model::checkpoint::{self, file_hash};
use trajectory_core::model::TrajectoryNet;
use trajectory_core::reporting::{
    embedding_rows, feature_map_grid, plot_curves, plot_projection, project_embeddings, read_embeddings_csv,
    save_grid_png, write_curve_csv, write_embeddings_csv, ColorBy,
};
use trajectory_core::trainer::Trainer;
use trajectory_core::{Error, Result};

#[derive(Parser)]
#[command(name = "trajrep", version, about = "Temporal representation learning for treatment-response prediction")]
struct Cli {
    /// Experiment config (TOML). Defaults apply to anything not set.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Use the synthetic longitudinal cohort.
    #[arg(long, global = true)]
    synthetic: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parent directory for run directories.
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the MIP cache and manifest (or generate the synthetic cohort).
    Preprocess {
        #[arg(long, env = DATA_ROOT_ENV)]
        data_root: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
    /// Pre-train the encoder.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        no_mtan: bool,
        #[arg(long)]
        no_temp: bool,
        #[arg(long)]
        no_align: bool,
        /// Align every same-time pair, not only responders.
        #[arg(long)]
        align_all: bool,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Linear-probe evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated: t0, t0t1, t0t3.
        #[arg(long, value_delimiter = ',', value_parser = parse_subset)]
        subsets: Vec<Subset>,
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Projection plots from exported embeddings and feature-map grids.
    Plot {
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Encoder scale for feature-map grids.
        #[arg(long, default_value_t = 0)]
        scale: usize,
    },
}

fn parse_subset(s: &str) -> std::result::Result<Subset, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None if cli.synthetic => ExperimentConfig::synthetic(),
        None => ExperimentConfig::default(),
    };
    if cli.synthetic {
        config.data.synthetic = true;
    }
    config.apply_env();
    if let Some(seed) = cli.seed {
        config.train.seed = seed;
        config.eval.seed = seed;
    }
    Ok(config)
}

fn run_dir(base: &Path, command: &str, config: &ExperimentConfig) -> Result<PathBuf> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let dir = base.join(format!("{stamp}-{command}-{}", config.hash()));
    fs::create_dir_all(&dir).map_err(|e| Error::from(e).at(&dir))?;
    fs::write(dir.join("config.toml"), config.to_toml()?).map_err(|e| Error::from(e).at(&dir))?;
    Ok(dir)
}

fn write_synthetic(config: &ExperimentConfig) -> Result<()> {
    let d = &config.data;
    let cohort = synthesize_cohort_sized(d.synthetic_patients, d.responder_fraction, d.synthetic_seed, d.synthetic_image_size)?;
    let assignment = build_manifest(&cohort.labels_table(), &d.fractions, d.split_seed)?;
    write_synthetic_cache(&cohort, &assignment, &d.cache_dir)?;
    println!(
        "synthetic cohort: {} patients ({} train / {} val / {} test) in {}",
        cohort.len(),
        assignment.count(Split::Train),
        assignment.count(Split::Val),
        assignment.count(Split::Test),
        d.cache_dir.display()
    );
    Ok(())
}

fn preprocess(config: &ExperimentConfig) -> Result<()> {
    if config.data.synthetic {
        return write_synthetic(config);
    }
    let options = config.data.preprocess_options();
    let summary = build_cache(&options)?;
    let path = options.cache_dir.join("preprocess_summary.json");
    fs::write(&path, serde_json::to_vec_pretty(&summary)?).map_err(|e| Error::from(e).at(&path))?;
    println!(
        "cached {} patients: {} volumes read, {} images written, {} up to date, {} excluded",
        summary.patients_cached,
        summary.volumes_read,
        summary.images_written,
        summary.images_up_to_date,
        summary.patients_excluded.len()
    );
    if !summary.errors.is_empty() {
        for e in &summary.errors {
            eprintln!("unreadable: {e}");
        }
        return Err(Error::DataQuality(format!("{} inputs could not be read", summary.errors.len())));
    }
    Ok(())
}

fn cohort(config: &ExperimentConfig) -> Result<Vec<PatientSeries>> {
    let manifest = config.data.cache_dir.join(trajectory_core::data::cache::MANIFEST_FILE);
    if config.data.synthetic && !manifest.is_file() {
        info!("no synthetic cache yet; generating it");
        write_synthetic(config)?;
    }
    load_cohort(&config.data.cache_dir)
}

fn train(config: &ExperimentConfig, out: &Path, resume: Option<&Path>) -> Result<()> {
    let device = Device::Cpu;
    let all = cohort(config)?;
    let (tr, va) = (in_split(&all, Split::Train), in_split(&all, Split::Val));
    let mut trainer = match resume {
        Some(path) => {
            let mut t = Trainer::resume(path, &device)?;
            t.set_epochs(config.train.epochs);
            t
        }
        None => {
            let model = TrajectoryNet::new(config.model.clone(), config.train.seed, &device)?;
            Trainer::new(model, config.train.clone(), config.augmentation.clone())?
        }
    };
    println!("training on {} patients ({} validation); run directory {}", tr.len(), va.len(), out.display());
    let summary = trainer.fit(&tr, &va, Some(out))?;
    for e in &summary.epochs {
        println!(
            "epoch {:>3}  rec {:.5}  temp {:.4}  align {:.4}  total {:.4}{}",
            e.epoch + 1,
            e.mean_rec,
            e.mean_temp,
            e.mean_align,
            e.mean_total,
            e.val_auroc.map(|a| format!("  val_auroc {a:.3}")).unwrap_or_default()
        );
    }
    if let Some(path) = &summary.final_checkpoint {
        println!("final checkpoint {} (sha256 {})", path.display(), file_hash(path)?);
    }
    Ok(())
}

fn eval(config: &ExperimentConfig, out: &Path, ck_path: &Path, subsets: &[Subset], runs: usize) -> Result<()> {
    let device = Device::Cpu;
    let ck = checkpoint::load(ck_path, &device)?;
    if ck.backbone != config.model {
        warn!("checkpoint backbone differs from the configured one; using the checkpoint's");
    }
    let model = ck.build_model(None, &device)?;
    let all = cohort(config)?;
    let (tr, va, te) = (in_split(&all, Split::Train), in_split(&all, Split::Val), in_split(&all, Split::Test));
    let mut reports: Vec<EvalReport> = Vec::new();
    let mut jsonl = String::new();
    for &subset in subsets {
        let ftr = extract_features(&model, &tr, subset, config.eval.fusion)?;
        let fte = extract_features(&model, &te, subset, config.eval.fusion)?;
        let fva = extract_features(&model, &va, subset, config.eval.fusion)?;
        if ftr.is_empty() || fte.is_empty() {
            warn!("subset {} has no complete patients; skipped", subset.as_str());
            continue;
        }
        let val = (!fva.is_empty()).then_some(&fva);
        let report = linear_probe(&ftr, &fte, val, runs, &config.eval.probe, config.eval.seed)?;
        println!("{}", report.table());
        let tag = format!("{subset:?}").to_lowercase();
        fs::write(out.join(format!("report_{tag}.txt")), report.table())?;
        write_curve_csv(&out.join(format!("roc_{tag}.csv")), ["fpr", "tpr"], &report.roc)?;
        write_curve_csv(&out.join(format!("pr_{tag}.csv")), ["recall", "precision"], &report.pr)?;
        jsonl.push_str(&serde_json::to_string(&report)?);
        jsonl.push('\n');
        reports.push(report);
    }
    fs::write(out.join("reports.jsonl"), jsonl)?;
    let curves: Vec<_> = reports.iter().map(|r| (r.subset.as_str().to_string(), r.roc.clone())).collect();
    if !curves.is_empty() {
        plot_curves(&out.join("roc.svg"), "ROC (first probe run)", &curves)?;
    }
    let rows = embedding_rows(&model, &te)?;
    write_embeddings_csv(&out.join("embeddings_test.csv"), &rows)?;
    println!("reports and test embeddings written to {}", out.display());
    Ok(())
}

fn plot(config: &ExperimentConfig, out: &Path, embeddings: Option<&Path>, ck_path: Option<&Path>, scale: usize) -> Result<()> {
    if embeddings.is_none() && ck_path.is_none() {
        return Err(Error::Config("plot needs --embeddings and/or --checkpoint".into()));
    }
    if let Some(path) = embeddings {
        let rows = read_embeddings_csv(path)?;
        let points = project_embeddings(&rows, config.eval.seed)?;
        plot_projection(&out.join("projection_time.svg"), &points, ColorBy::Time, true)?;
        plot_projection(&out.join("projection_outcome.svg"), &points, ColorBy::Outcome, true)?;
        let coords: Vec<(f64, f64)> = points.iter().map(|p| (p.x, p.y)).collect();
        write_curve_csv(&out.join("projection.csv"), ["x", "y"], &coords)?;
    }
    if let Some(path) = ck_path {
        let device = Device::Cpu;
        let model = checkpoint::load(path, &device)?.build_model(None, &device)?;
        let all = cohort(config)?;
        let test = in_split(&all, Split::Test);
        let patient = test.first().or(all.first()).ok_or_else(|| Error::DataQuality("empty cohort".into()))?;
        for (gated, name) in [(true, "gated"), (false, "ungated")] {
            let grid = feature_map_grid(&model, &patient.images[0], scale, gated, 16)?;
            save_grid_png(&out.join(format!("feature_maps_scale{scale}_{name}.png")), &grid)?;
        }
    }
    println!("figures written to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut config = load_config(&cli)?;
    let name = match &cli.command {
        Command::Preprocess { .. } => "preprocess",
        Command::Train { .. } => "train",
        Command::Eval { .. } => "eval",
        Command::Plot { .. } => "plot",
    };
    match &cli.command {
        Command::Preprocess { data_root, labels, cache_dir } => {
            if let Some(p) = data_root {
                config.data.data_root = p.clone();
            }
            if let Some(p) = labels {
                config.data.labels_path = p.clone();
            }
            if let Some(p) = cache_dir {
                config.data.cache_dir = p.clone();
            }
        }
        Command::Train { epochs, no_mtan, no_temp, no_align, align_all, .. } => {
            if let Some(e) = epochs {
                config.train.epochs = *e;
            }
            config.model.mtan_enabled &= !no_mtan;
            config.train.temporal &= !no_temp;
            config.train.align &= !no_align;
            config.train.align_all_labels |= align_all;
        }
        Command::Eval { subsets, runs, .. } => {
            if !subsets.is_empty() {
                config.eval.subsets = subsets.clone();
            }
            if let Some(r) = runs {
                config.eval.runs = *r;
            }
        }
        Command::Plot { .. } => {}
    }
    config.validate()?;
    if let Command::Preprocess { .. } = cli.command {
        return preprocess(&config);
    }
    let out = run_dir(&cli.out_dir, name, &config)?;
    match &cli.command {
        Command::Train { resume, .. } => train(&config, &out, resume.as_deref()),
        Command::Eval { checkpoint, .. } => {
            let subsets = config.eval.subsets.clone();
            eval(&config, &out, checkpoint, &subsets, config.eval.runs)
        }
        Command::Plot { embeddings, checkpoint, scale } => {
            plot(&config, &out, embeddings.as_deref(), checkpoint.as_deref(), *scale)
        }
        Command::Preprocess { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
