use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{make_folds, mean_curve, select_epoch, smooth_predictions, Audit, FoldPlan, FoldReport, RunReport, Stage};
use crate::config::RunConfig;
use crate::data::{class_weights, fit_quantile_map, ClassWeights, Preprocessed, QuantileMap};
use crate::error::{Error, Result};
use crate::loss::LossParams;
use crate::metrics::MetricReport;
use crate::models::{HeadKind, Model};
use crate::train::{predict, pretrain, stream_rng, train_supervised, EpochRecord, Target, WindowSet};

const FOLD_SEED_TAG: u64 = 0xf01d;
const HEAD_SEED_TAG: u64 = 0x4ead;

/// Everything needed to evaluate one trained fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldManifest {
    pub plan: FoldPlan,
    pub seed: u64,
    pub class_weights: ClassWeights,
    pub quantile_map: QuantileMap,
    pub records: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub folds: Vec<FoldPlan>,
    #[serde(default)]
    pub pretrain_records: Vec<EpochRecord>,
}

#[derive(Serialize)]
struct HistoryLine<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    fold: Option<usize>,
    #[serde(flatten)]
    record: &'a EpochRecord,
}

fn fold_seed(seed: u64, fold: usize) -> u64 {
    stream_rng(seed, FOLD_SEED_TAG, fold as u64).next_u64()
}

fn fold_dir(run_dir: &Path, fold: usize) -> PathBuf {
    run_dir.join(format!("fold-{fold:02}"))
}

fn epoch_stem(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch-{epoch:03}"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Applies `f` to every item on up to `jobs` threads, keeping item order.
fn parallel_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("no worker panicked while holding the lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}

/// Quantile map fit on the concatenated series of `subjects`.
fn fit_on(prep: &Preprocessed, subjects: &[String], n_q: usize) -> Result<QuantileMap> {
    let mut channels = [Vec::new(), Vec::new()];
    for id in subjects {
        let s = prep
            .series
            .get(id)
            .ok_or_else(|| Error::Data(format!("no series for subject {id}")))?;
        channels[0].extend_from_slice(&s[0]);
        channels[1].extend_from_slice(&s[1]);
    }
    fit_quantile_map(&[&channels[0], &channels[1]], n_q)
}

fn pretrain_stage(
    prep: &Preprocessed,
    cfg: &RunConfig,
    run_dir: &Path,
    audit: &mut Audit,
) -> Result<(Model, Vec<EpochRecord>)> {
    let subjects = prep.pretrain_subjects();
    let labeled: BTreeSet<String> = prep.labeled_subjects().into_iter().collect();
    let overlap: Vec<&String> = subjects.iter().filter(|s| labeled.contains(*s)).collect();
    if !overlap.is_empty() {
        log::warn!("pretraining cohort overlaps labeled subjects: {overlap:?}");
    }
    if subjects.is_empty() {
        return Err(Error::Data(
            "scheme needs pretraining but the dataset has no unlabeled cohort".into(),
        ));
    }
    let map = fit_on(prep, &subjects, cfg.data.n_quantiles)?;
    audit.record(Stage::PretrainQuantileFit, None, subjects.clone(), subjects.len());
    let data = WindowSet::from_preprocessed(prep, &subjects, &map, Target::Cohort, 1)?;
    audit.record(Stage::PretrainBatches, None, data.subjects(), data.len());
    log::info!("stage=pretrain subjects={} windows={}", subjects.len(), data.len());
    let dir = run_dir.join("pretrain");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut hook = |r: &EpochRecord, m: &Model| m.save_checkpoint(epoch_stem(&dir, r.epoch));
    pretrain(
        &cfg.spec(HeadKind::Binary),
        &data,
        cfg.optim,
        &cfg.pretrain_loop_config(cfg.scheme.seed),
        cfg.scheme.epochs_pretrain,
        &mut hook,
    )
}

fn train_fold(
    prep: &Preprocessed,
    plan: &FoldPlan,
    cfg: &RunConfig,
    body: Option<&Model>,
    run_dir: &Path,
) -> Result<(FoldManifest, Audit)> {
    let seed = fold_seed(cfg.scheme.seed, plan.fold_id);
    let mut audit = Audit::default();
    let fold = Some(plan.fold_id);
    let map = fit_on(prep, &plan.train_subjects, cfg.data.n_quantiles)?;
    audit.record(
        Stage::QuantileFit,
        fold,
        plan.train_subjects.clone(),
        plan.train_subjects.len(),
    );
    let train = WindowSet::from_preprocessed(prep, &plan.train_subjects, &map, Target::Motor, 1)?;
    let test = [plan.test_subject.clone()];
    let val = WindowSet::from_preprocessed(prep, &test, &map, Target::Motor, cfg.eval.val_stride)?;
    let weights = class_weights(&train.targets());
    audit.record(Stage::ClassWeights, fold, train.subjects(), train.len());
    audit.record(Stage::TrainBatches, fold, train.subjects(), train.len());
    audit.record(Stage::Validation, fold, val.subjects(), val.len());
    log::info!(
        "stage=fold fold={} test={} train_windows={} val_windows={}",
        plan.fold_id,
        plan.test_subject,
        train.len(),
        val.len()
    );

    let init = match body {
        Some(b) => b.swap_head(HeadKind::Regression, &mut stream_rng(seed, HEAD_SEED_TAG, 0))?,
        None => Model::build(&cfg.spec(HeadKind::Regression), seed)?,
    };
    let dir = fold_dir(run_dir, plan.fold_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let loss = LossParams::for_variant(cfg.loss.variant, weights.clone());
    let mut hook = |r: &EpochRecord, m: &Model| m.save_checkpoint(epoch_stem(&dir, r.epoch));
    let trained = train_supervised(
        init,
        &train,
        Some(&val),
        &loss,
        &cfg.scheme,
        cfg.optim,
        &cfg.loop_config(seed),
        &mut hook,
    )?;
    let manifest = FoldManifest {
        plan: plan.clone(),
        seed,
        class_weights: weights,
        quantile_map: map,
        records: trained.records,
    };
    write_json(&dir.join("fold.json"), &manifest)?;
    Ok((manifest, audit))
}

/// Trains every fold (or only `only_fold`) of a leave-one-subject-out run
/// and writes checkpoints, histories and provenance under `run_dir`.
pub fn train_run(
    prep: &Preprocessed,
    cfg: &RunConfig,
    run_dir: &Path,
    only_fold: Option<usize>,
) -> Result<RunManifest> {
    cfg.validate()?;
    let folds = make_folds(&prep.labeled_subjects())?;
    if let Some(f) = only_fold {
        if f >= folds.len() {
            return Err(Error::Config(format!(
                "fold {f} requested, run has {} folds",
                folds.len()
            )));
        }
    }
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let mut audit = Audit::default();
    let (body, pretrain_records) = if cfg.scheme.scheme.pretrains() {
        let (m, r) = pretrain_stage(prep, cfg, run_dir, &mut audit)?;
        (Some(m), r)
    } else {
        (None, Vec::new())
    };
    let selected: Vec<FoldPlan> = folds
        .iter()
        .filter(|f| only_fold.is_none_or(|o| o == f.fold_id))
        .cloned()
        .collect();
    let outcomes = parallel_map(&selected, cfg.eval.jobs(), |plan| {
        train_fold(prep, plan, cfg, body.as_ref(), run_dir)
    })?;

    let path = run_dir.join("history.jsonl");
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    for record in &pretrain_records {
        serde_json::to_writer(&mut w, &HistoryLine { fold: None, record })?;
        w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    for (manifest, fold_audit) in outcomes {
        for record in &manifest.records {
            serde_json::to_writer(
                &mut w,
                &HistoryLine {
                    fold: Some(manifest.plan.fold_id),
                    record,
                },
            )?;
            w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
        audit.extend(fold_audit);
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    audit.check(&selected)?;
    audit.write_jsonl(run_dir.join("provenance.jsonl"))?;
    let manifest = RunManifest {
        config: cfg.clone(),
        folds,
        pretrain_records,
    };
    write_json(&run_dir.join("run.json"), &manifest)?;
    Ok(manifest)
}

/// Selects the epoch across folds, predicts every test subject with its
/// fold's checkpoint at that epoch, and scores the smoothed predictions.
pub fn evaluate_dir(prep: &Preprocessed, run_dir: &Path) -> Result<RunReport> {
    let run: RunManifest = read_json(&run_dir.join("run.json"))?;
    let cfg = &run.config;
    let mut folds = Vec::with_capacity(run.folds.len());
    for plan in &run.folds {
        let path = fold_dir(run_dir, plan.fold_id).join("fold.json");
        if !path.exists() {
            return Err(Error::Data(format!(
                "fold {} has not been trained ({})",
                plan.fold_id,
                path.display()
            )));
        }
        let f: FoldManifest = read_json(&path)?;
        if f.plan != *plan {
            return Err(Error::Data(format!(
                "{} does not match the run's fold plan",
                path.display()
            )));
        }
        folds.push(f);
    }
    let audit = Audit::read_jsonl(run_dir.join("provenance.jsonl"))?;
    audit.check(&run.folds)?;

    let curves: Vec<Vec<f64>> = folds
        .iter()
        .map(|f| {
            f.records
                .iter()
                .map(|r| {
                    r.val_loss
                        .ok_or_else(|| Error::Data("epoch without validation loss".into()))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let epoch = select_epoch(&curves)?;
    let mean_val_loss = mean_curve(&curves)?;
    let phase = folds[0].records[epoch].phase;
    log::info!(
        "stage=select epoch={epoch} phase={phase:?} mean_val_loss={:.6}",
        mean_val_loss[epoch]
    );

    let scored = parallel_map(&folds, cfg.eval.jobs(), |f| {
        let mut model = Model::load_checkpoint(epoch_stem(&fold_dir(run_dir, f.plan.fold_id), epoch))?;
        let test = WindowSet::from_preprocessed(
            prep,
            std::slice::from_ref(&f.plan.test_subject),
            &f.quantile_map,
            Target::Motor,
            1,
        )?;
        let raw = predict(&mut model, &test, cfg.eval.predict_batch)?;
        let smoothed = smooth_predictions(&raw, cfg.eval.sigma_w);
        let y = test.targets();
        let zeros = vec![0.0; y.len()];
        let report = FoldReport {
            fold_id: f.plan.fold_id,
            test_subject: f.plan.test_subject.clone(),
            windows: y.len(),
            metrics: MetricReport::compute(&y, &smoothed, &f.class_weights)?,
            baseline: MetricReport::compute(&y, &zeros, &f.class_weights)?,
        };
        log::info!(
            "stage=test fold={} subject={} acc9={:.3} acc_pm1={:.3}",
            report.fold_id,
            report.test_subject,
            report.metrics.acc9,
            report.metrics.acc_pm1
        );
        Ok((report, y, smoothed))
    })?;

    let pooled = if cfg.eval.pooled {
        let y: Vec<i32> = scored.iter().flat_map(|(_, y, _)| y.iter().copied()).collect();
        let p: Vec<f64> = scored.iter().flat_map(|(_, _, p)| p.iter().copied()).collect();
        Some(MetricReport::compute(&y, &p, &class_weights(&y))?)
    } else {
        None
    };
    let fold_reports: Vec<FoldReport> = scored.into_iter().map(|(r, _, _)| r).collect();
    let aggregate = MetricReport::mean(&fold_reports.iter().map(|r| r.metrics).collect::<Vec<_>>())?;
    let baseline = MetricReport::mean(&fold_reports.iter().map(|r| r.baseline).collect::<Vec<_>>())?;
    Ok(RunReport {
        model: cfg.model.kind,
        scheme: cfg.scheme.scheme,
        loss: cfg.loss.variant,
        seed: cfg.scheme.seed,
        selected_epoch: epoch,
        selected_phase: phase,
        mean_val_loss,
        aggregate,
        baseline,
        pooled,
        folds: fold_reports,
    })
}

/// Trains and evaluates a full run under `run_dir`.
pub fn evaluate_run(prep: &Preprocessed, cfg: &RunConfig, run_dir: &Path) -> Result<RunReport> {
    train_run(prep, cfg, run_dir, None)?;
    evaluate_dir(prep, run_dir)
}
