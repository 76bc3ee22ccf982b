use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pd_motor::config::RunConfig;
use pd_motor::data::{
    preprocess, read_cohort, read_labels, synth_cohort, write_cohort, PreprocessConfig, Preprocessed, SynthConfig,
};
use pd_motor::eval::{evaluate_dir, render_table, train_run, RunReport};
use pd_motor::loss::LossVariant;
use pd_motor::models::ModelKind;
use pd_motor::train::Scheme;
use pd_motor::{Error, Result};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(
    name = "pd-motor",
    version,
    about = "Nine-level motor-state regression from wrist sensor recordings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort: raw/<id>.csv, labels.csv, cohort.csv.
    Synth {
        #[arg(long, default_value_t = 8)]
        subjects: usize,
        #[arg(long, default_value_t = 120)]
        minutes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Unlabeled subjects for pretraining (defaults to --subjects).
        #[arg(long)]
        pretrain_subjects: Option<usize>,
        /// Recording length of the pretraining subjects.
        #[arg(long)]
        pretrain_minutes: Option<usize>,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Resample, compute sensor norms and cut windows.
    Preprocess {
        /// Directory holding raw/, labels.csv and cohort.csv.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 60.0)]
        window_s: f64,
        #[arg(long, default_value_t = 0.8)]
        overlap: f64,
    },
    /// Train all leave-one-subject-out folds, or a single one.
    Train {
        /// Preprocessed dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Run directory for checkpoints, history and provenance.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse::<ModelKind>)]
        model: Option<ModelKind>,
        #[arg(long, value_parser = parse::<Scheme>)]
        scheme: Option<Scheme>,
        #[arg(long, value_parser = parse::<LossVariant>)]
        loss: Option<LossVariant>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        fold: Option<usize>,
        /// Folds trained concurrently; 0 uses every core.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Select the epoch, predict the held-out subjects and write report.json.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        /// Report path (defaults to <run>/report.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render one or more reports as tables.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Print the merged reports as JSON instead.
        #[arg(long)]
        json: bool,
        /// Also print per-fold metrics and the always-0 baseline.
        #[arg(long)]
        detail: bool,
    },
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn synth(
    subjects: usize,
    minutes: usize,
    seed: u64,
    pretrain: Option<usize>,
    pretrain_minutes: Option<usize>,
    out: &Path,
) -> Result<()> {
    let mut cfg = SynthConfig::new(subjects, minutes, seed);
    if let Some(n) = pretrain {
        cfg.pretrain_subjects = n;
    }
    if let Some(m) = pretrain_minutes {
        cfg.pretrain_minutes = m;
    }
    let cohort = synth_cohort(&cfg)?;
    write_cohort(out, &cohort)?;
    println!(
        "wrote {} recordings ({} labeled) to {}",
        cohort.recordings.len(),
        cohort.labels.len(),
        out.display()
    );
    Ok(())
}

fn run_preprocess(input: &Path, out: &Path, window_s: f64, overlap: f64) -> Result<()> {
    let labels = read_labels(input.join("labels.csv"))?;
    let cohort = read_cohort(input.join("cohort.csv"))?;
    let cfg = PreprocessConfig {
        window_s,
        overlap,
        ..Default::default()
    };
    let prep = preprocess(&input.join("raw"), &labels, &cohort, &cfg)?;
    prep.save(out)?;
    println!(
        "{} subjects, {} windows ({} labeled) written to {}",
        prep.series.len(),
        prep.windows.len(),
        prep.windows.iter().filter(|w| w.label.is_some()).count(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    data: &Path,
    out: &Path,
    config: Option<&Path>,
    model: Option<ModelKind>,
    scheme: Option<Scheme>,
    loss: Option<LossVariant>,
    seed: Option<u64>,
    fold: Option<usize>,
    jobs: Option<usize>,
) -> Result<()> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(m) = model {
        cfg.model.kind = m;
    }
    if let Some(s) = scheme {
        cfg.scheme.scheme = s;
    }
    if let Some(l) = loss {
        cfg.loss.variant = l;
    }
    if let Some(s) = seed {
        cfg.scheme.seed = s;
    }
    if let Some(j) = jobs {
        cfg.eval.jobs = j;
    }
    cfg.validate()?;
    let prep = Preprocessed::load(data)?;
    log::info!(
        "stage=run model={} scheme={} loss={} seed={}",
        cfg.model.kind,
        cfg.scheme.scheme,
        cfg.loss.variant,
        cfg.scheme.seed
    );
    let manifest = train_run(&prep, &cfg, out, fold)?;
    println!(
        "trained {} fold(s) into {}",
        fold.map_or(manifest.folds.len(), |_| 1),
        out.display()
    );
    Ok(())
}

fn evaluate(data: &Path, run: &Path, out: Option<&Path>) -> Result<()> {
    let prep = Preprocessed::load(data)?;
    let report = evaluate_dir(&prep, run)?;
    let path = out.map_or_else(|| run.join("report.json"), Path::to_path_buf);
    report.save(&path)?;
    print!("{}", render_table(std::slice::from_ref(&report)));
    println!(
        "selected epoch {} ({:?}); always-0 baseline Acc-9 {:.3}",
        report.selected_epoch, report.selected_phase, report.baseline.acc9
    );
    Ok(())
}

fn report(paths: &[PathBuf], json: bool, detail: bool) -> Result<()> {
    let reports = paths.iter().map(RunReport::load).collect::<Result<Vec<_>>>()?;
    if json {
        println!("{}", serde_json::to_string_pretty(&reports)?);
        return Ok(());
    }
    print!("{}", render_table(&reports));
    if detail {
        for r in &reports {
            println!();
            println!(
                "{} / {} / {} (epoch {})",
                r.model.display_name(),
                r.scheme,
                r.loss,
                r.selected_epoch
            );
            for f in &r.folds {
                let m = f.metrics;
                println!(
                    "  fold {:>2} {:<8} n={:<5} MAE {:.3} Acc-9 {:.3} Acc±1 {:.3}",
                    f.fold_id, f.test_subject, f.windows, m.mae, m.acc9, m.acc_pm1
                );
            }
            let b = r.baseline;
            println!(
                "  always 0          MAE {:.3} Acc-9 {:.3} Acc±1 {:.3}",
                b.mae, b.acc9, b.acc_pm1
            );
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            subjects,
            minutes,
            seed,
            pretrain_subjects,
            pretrain_minutes,
            out,
        } => synth(subjects, minutes, seed, pretrain_subjects, pretrain_minutes, &out),
        Command::Preprocess {
            input,
            out,
            window_s,
            overlap,
        } => run_preprocess(&input, &out, window_s, overlap),
        Command::Train {
            data,
            out,
            config,
            model,
            scheme,
            loss,
            seed,
            fold,
            jobs,
        } => train(&data, &out, config.as_deref(), model, scheme, loss, seed, fold, jobs),
        Command::Evaluate { data, run, out } => evaluate(&data, &run, out.as_deref()),
        Command::Report { reports, json, detail } => report(&reports, json, detail),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() { 2 } else { 1 })
        }
    }
}
