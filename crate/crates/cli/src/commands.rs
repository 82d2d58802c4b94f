use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use voxcam::io::{
    apply_checkpoint, infer_spec, read_checkpoint, read_manifest, read_nifti, save_checkpoint, write_nifti,
};
use voxcam::phantom::{generate_cohort, PhantomSpec};
use voxcam::resnet::{BlockKind, Mode, Model, ModelSpec, Stage};
use voxcam::stats::{paired_t_test, report_csv, summarize_runs, threshold_predictions, FoldMetrics};
use voxcam::tensor::trilinear_resample;
use voxcam::train::{
    evaluate_fold, make_folds, prepare_volume, train_fold, DataSource, Fold, FoldPlan, ManifestSource, TrainConfig,
};
use voxcam::xai::{grad_cam, heat_score, mid_axial_pgm, HeatScoreResult, Heatmap, LesionMask};

use crate::config::{parse_extents, FoldSelection, RunArgs, RunConfig};
use crate::error::CliError;
use crate::{GradcamArgs, HeatscoreArgs, InspectArgs, PhantomGenArgs, ReportArgs, TtestArgs};

pub const PLAN_FILE: &str = "plan.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.hsck";

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn read_file(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

pub fn phantom_gen(a: &PhantomGenArgs) -> Result<(), CliError> {
    let base = match a.tier.as_str() {
        "easy" => PhantomSpec::easy(a.seed),
        "subtle" => PhantomSpec::subtle(a.seed),
        other => return Err(CliError::usage(format!("tier must be `easy` or `subtle`, got {other:?}"))),
    };
    // The default radius range is sized for 64³; other grids scale it.
    let scale = a.extent as f32 / 64.0;
    let (lo, hi) = base.lesion_radius;
    let spec = PhantomSpec {
        extent: a.extent,
        lesion_radius: (a.radius_min.unwrap_or(lo * scale), a.radius_max.unwrap_or(hi * scale)),
        lesion_contrast: a.contrast.unwrap_or(base.lesion_contrast),
        noise_sigma: a.noise.unwrap_or(base.noise_sigma),
        ..base
    };
    log::info!(
        "generating {} + {} phantoms at {}³ (contrast {}, radius {:?})",
        a.n_per_class,
        a.n_per_class,
        spec.extent,
        spec.lesion_contrast,
        spec.lesion_radius
    );
    generate_cohort(&spec, a.n_per_class, &a.out)?;
    println!("{}", a.out.join("manifest.csv").display());
    Ok(())
}

fn load_plan(rc: &RunConfig, cfg: &TrainConfig, data: &dyn DataSource) -> Result<FoldPlan, CliError> {
    match rc.path("plan") {
        Some(p) => Ok(FoldPlan::from_csv(&read_file(&p)?)?),
        None => Ok(make_folds(&data.cohort(), cfg.folds, cfg.val_fraction, cfg.seed)?),
    }
}

fn select_folds<'p>(rc: &RunConfig, plan: &'p FoldPlan) -> Result<Vec<&'p Fold>, CliError> {
    match rc.fold_selection()? {
        FoldSelection::All => Ok(plan.folds.iter().collect()),
        FoldSelection::One(k) => plan
            .folds
            .get(k)
            .map(|f| vec![f])
            .ok_or_else(|| CliError::usage(format!("fold {k} does not exist (plan has {})", plan.folds.len()))),
    }
}

fn manifest_source(rc: &RunConfig) -> Result<ManifestSource, CliError> {
    let manifest = read_manifest(rc.require("manifest")?)?;
    Ok(ManifestSource::new(&manifest))
}

pub fn split(args: &RunArgs) -> Result<(), CliError> {
    let rc = RunConfig::from_args(args)?;
    let cfg = rc.train_config()?;
    let out = PathBuf::from(rc.require("out")?);
    let data = manifest_source(&rc)?;
    let plan = make_folds(&data.cohort(), cfg.folds, cfg.val_fraction, cfg.seed)?;
    create_dir(&out)?;
    for f in &plan.folds {
        log::info!("fold {}: train {} val {} test {}", f.index, f.train.len(), f.val.len(), f.test.len());
    }
    write_file(&out.join(PLAN_FILE), plan.to_csv())?;
    rc.write_resolved(&out)?;
    println!("{}", out.join(PLAN_FILE).display());
    Ok(())
}

pub fn train(args: &RunArgs) -> Result<(), CliError> {
    let rc = RunConfig::from_args(args)?;
    let cfg = rc.train_config()?;
    let out = PathBuf::from(rc.require("out")?);
    let data = manifest_source(&rc)?;
    let plan = load_plan(&rc, &cfg, &data)?;
    let all = rc.fold_selection()? == FoldSelection::All;
    let jobs: Vec<(&Fold, PathBuf)> = select_folds(&rc, &plan)?
        .into_iter()
        .map(|f| (f, if all { out.join(format!("fold{}", f.index)) } else { out.clone() }))
        .collect();
    create_dir(&out)?;
    write_file(&out.join(PLAN_FILE), plan.to_csv())?;
    rc.write_resolved(&out)?;

    let run = |fold: &Fold, dir: &Path| -> Result<PathBuf, CliError> {
        log::info!("fold {}: training on {} scans", fold.index, fold.train.len());
        let outcome = train_fold(fold, &cfg, &data)?;
        create_dir(dir)?;
        let ckpt = dir.join(CHECKPOINT_FILE);
        save_checkpoint(&outcome.model, &ckpt)?;
        write_file(&dir.join("epochs.csv"), outcome.epoch_log())?;
        write_file(&dir.join("batches.csv"), outcome.batch_log())?;
        log::info!(
            "fold {}: done after {} epochs, best epoch {}",
            fold.index,
            outcome.epochs.len(),
            outcome.best_epoch
        );
        Ok(ckpt)
    };
    // Folds are independent; spread them over the available cores.
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len()).max(1);
    let results: Vec<Result<PathBuf, CliError>> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .chunks(jobs.len().div_ceil(threads).max(1))
            .map(|chunk| s.spawn(|| chunk.iter().map(|(f, dir)| run(f, dir)).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("training worker panicked")).collect()
    });
    for r in results {
        println!("{}", r?.display());
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<Model, CliError> {
    let ckpt = read_checkpoint(path)?;
    let mut model = Model::new(infer_spec(&ckpt)?, 0)?;
    apply_checkpoint(&ckpt, &mut model)?;
    model.set_mode(Mode::Eval);
    Ok(model)
}

/// The checkpoint of `fold`: a file as given, or the layout `train` writes
/// under a directory.
fn fold_checkpoint(path: &Path, fold: usize, all: bool) -> PathBuf {
    if !path.is_dir() {
        path.to_path_buf()
    } else if all {
        path.join(format!("fold{fold}")).join(CHECKPOINT_FILE)
    } else {
        path.join(CHECKPOINT_FILE)
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, CliError> {
    csv::Writer::from_path(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

pub fn evaluate(args: &RunArgs, with_heat_scores: bool) -> Result<(), CliError> {
    let rc = RunConfig::from_args(args)?;
    let cfg = rc.train_config()?;
    let out = PathBuf::from(rc.require("out")?);
    let data = manifest_source(&rc)?;
    let plan = load_plan(&rc, &cfg, &data)?;
    let all = rc.fold_selection()? == FoldSelection::All;
    let folds = select_folds(&rc, &plan)?;
    create_dir(&out)?;
    rc.write_resolved(&out)?;

    let mut metrics = Vec::new();
    for fold in folds {
        let model = match rc.path("checkpoint") {
            Some(p) => load_model(&fold_checkpoint(&p, fold.index, all))?,
            None => {
                log::info!("fold {}: no checkpoint given, evaluating random weights (seed {})", fold.index, cfg.seed);
                let mut m = Model::new(ModelSpec::resnet(cfg.depth, cfg.base_width)?, cfg.seed)?;
                m.set_mode(Mode::Eval);
                m
            }
        };
        let m = evaluate_fold(&model, fold, &data, &cfg, with_heat_scores)?;
        log::info!(
            "fold {}: accuracy {:.3}, ROC {:.3}, {} Heat-Scores ({} excluded)",
            fold.index,
            m.accuracy,
            m.roc_auc,
            m.heat_scores.len(),
            m.heat_score_failures.len()
        );
        metrics.push(m);
    }
    write_evaluation(&out, &metrics)?;
    print!("{}", read_file(&out.join("metrics.csv"))?);
    Ok(())
}

fn write_evaluation(out: &Path, metrics: &[FoldMetrics]) -> Result<(), CliError> {
    let mut pred = csv_writer(&out.join("predictions.csv"))?;
    pred.write_record(["fold", "subject_id", "label", "score", "prediction"])?;
    let mut hs = csv_writer(&out.join("heat_scores.csv"))?;
    hs.write_record(["fold", "subject_id", "hs", "mean_in", "mean_bkg", "std_bkg", "n_in", "n_bkg"])?;
    let mut fail = csv_writer(&out.join("heat_score_failures.csv"))?;
    fail.write_record(["fold", "subject_id", "reason"])?;
    let mut summary = csv_writer(&out.join("metrics.csv"))?;
    summary.write_record(["fold", "accuracy", "roc_auc", "heat_score", "heat_scored", "heat_excluded"])?;
    for m in metrics {
        let fold = m.fold.to_string();
        let preds = threshold_predictions(&m.scores);
        for i in 0..m.scores.len() {
            pred.write_record([
                fold.clone(),
                m.subject_ids[i].clone(),
                m.labels[i].to_string(),
                m.scores[i].to_string(),
                preds[i].to_string(),
            ])?;
        }
        for (id, r) in &m.heat_scores {
            hs.write_record([
                fold.clone(),
                id.clone(),
                r.hs.to_string(),
                r.mean_in.to_string(),
                r.mean_bkg.to_string(),
                r.std_bkg.to_string(),
                r.n_in.to_string(),
                r.n_bkg.to_string(),
            ])?;
        }
        for (id, reason) in &m.heat_score_failures {
            fail.write_record([fold.as_str(), id, reason])?;
        }
        let pooled = if m.heat_scores.is_empty() {
            "NA".to_string()
        } else {
            (m.heat_scores.iter().map(|(_, r)| r.hs).sum::<f64>() / m.heat_scores.len() as f64).to_string()
        };
        summary.write_record([
            fold.clone(),
            m.accuracy.to_string(),
            m.roc_auc.to_string(),
            pooled,
            m.heat_scores.len().to_string(),
            m.heat_score_failures.len().to_string(),
        ])?;
    }
    for w in [&mut pred, &mut hs, &mut fail, &mut summary] {
        w.flush().map_err(|e| CliError::data(e.to_string()))?;
    }
    Ok(())
}

/// Rows of a headed CSV file as maps from column name to value.
fn read_table(path: &Path) -> Result<Vec<HashMap<String, String>>, CliError> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let headers = r.headers()?.clone();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(headers.iter().zip(rec.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect());
    }
    Ok(rows)
}

fn field<T: std::str::FromStr>(row: &HashMap<String, String>, name: &str, path: &Path) -> Result<T, CliError> {
    let v = row
        .get(name)
        .ok_or_else(|| CliError::data(format!("{}: missing column {name}", path.display())))?;
    v.parse()
        .map_err(|_| CliError::data(format!("{}: bad {name} value {v:?}", path.display())))
}

/// Reconstructs the per-fold metrics written by `evaluate`.
fn read_evaluation(dir: &Path) -> Result<Vec<FoldMetrics>, CliError> {
    let pred_path = dir.join("predictions.csv");
    let mut folds: Vec<(usize, Vec<String>, Vec<f64>, Vec<u8>)> = Vec::new();
    for row in read_table(&pred_path)? {
        let fold: usize = field(&row, "fold", &pred_path)?;
        let idx = match folds.iter().position(|f| f.0 == fold) {
            Some(i) => i,
            None => {
                folds.push((fold, Vec::new(), Vec::new(), Vec::new()));
                folds.len() - 1
            }
        };
        folds[idx].1.push(field(&row, "subject_id", &pred_path)?);
        folds[idx].2.push(field(&row, "score", &pred_path)?);
        folds[idx].3.push(field(&row, "label", &pred_path)?);
    }
    let mut metrics: Vec<FoldMetrics> = folds
        .into_iter()
        .map(|(fold, ids, scores, labels)| FoldMetrics::from_scores(fold, ids, scores, labels))
        .collect::<Result<_, _>>()?;
    let hs_path = dir.join("heat_scores.csv");
    if hs_path.exists() {
        for row in read_table(&hs_path)? {
            let fold: usize = field(&row, "fold", &hs_path)?;
            let r = HeatScoreResult {
                hs: field(&row, "hs", &hs_path)?,
                mean_in: field(&row, "mean_in", &hs_path)?,
                mean_bkg: field(&row, "mean_bkg", &hs_path)?,
                std_bkg: field(&row, "std_bkg", &hs_path)?,
                n_in: field(&row, "n_in", &hs_path)?,
                n_bkg: field(&row, "n_bkg", &hs_path)?,
            };
            if let Some(m) = metrics.iter_mut().find(|m| m.fold == fold) {
                m.heat_scores.push((field(&row, "subject_id", &hs_path)?, r));
            }
        }
    }
    let fail_path = dir.join("heat_score_failures.csv");
    if fail_path.exists() {
        for row in read_table(&fail_path)? {
            let fold: usize = field(&row, "fold", &fail_path)?;
            if let Some(m) = metrics.iter_mut().find(|m| m.fold == fold) {
                m.heat_score_failures
                    .push((field(&row, "subject_id", &fail_path)?, field(&row, "reason", &fail_path)?));
            }
        }
    }
    Ok(metrics)
}

pub fn report(a: &ReportArgs) -> Result<(), CliError> {
    let mut folds = Vec::new();
    for dir in &a.runs {
        folds.extend(read_evaluation(dir)?);
    }
    let report = summarize_runs(&a.model, &a.tl, &a.modality, &folds)?;
    for line in report.render().lines() {
        log::info!("{line}");
    }
    let table = report_csv(&[report]);
    if let Some(path) = &a.out {
        write_file(path, &table)?;
    }
    print!("{table}");
    Ok(())
}

fn prepared_mask(path: &Path, extents: [usize; 3]) -> Result<LesionMask, CliError> {
    let m = read_nifti(path)?;
    let m = if m.extents() == extents {
        m
    } else {
        trilinear_resample(&m, extents).map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
    };
    Ok(LesionMask::new(m)?)
}

pub fn gradcam(a: &GradcamArgs) -> Result<(), CliError> {
    let layer: Stage = a.layer.parse().map_err(|e: voxcam::resnet::ModelError| CliError::usage(e.to_string()))?;
    let resize = a.resize.as_deref().map(parse_extents).transpose()?;
    let model = load_model(&a.checkpoint)?;
    let scan = read_nifti(&a.image)?;
    let x = prepare_volume(&scan, resize)?;
    let mut heat = grad_cam(&model, &x.to_tensor(), a.class as usize, layer)?;
    if resize.is_none() {
        heat.values = heat.values.with_spacing(scan.spacing())?;
    }
    if heat.degenerate_constant {
        log::warn!("the class activation map is constant; the heatmap is all zeros");
    }
    let lesion = a.mask.as_deref().map(|p| prepared_mask(p, x.extents())).transpose()?;
    create_dir(&a.out)?;
    let nii = a.out.join("heatmap.nii");
    write_nifti(&heat.values, &nii)?;
    let pgm = a.out.join("heatmap.pgm");
    write_file(&pgm, mid_axial_pgm(&heat, lesion.as_ref())?)?;
    println!("{}", nii.display());
    println!("{}", pgm.display());
    if let Some(l) = &lesion {
        let r = heat_score(&heat, l, None)?;
        println!("heat_score={:.6}", r.hs);
    }
    Ok(())
}

pub fn heatscore(a: &HeatscoreArgs) -> Result<(), CliError> {
    // The score is invariant under increasing affine maps, so the stored values are used as they are.
    let heat = Heatmap::from_values(read_nifti(&a.heatmap)?, true);
    let lesion = LesionMask::new(read_nifti(&a.mask)?)?;
    let domain = a.domain.as_deref().map(read_nifti).transpose()?;
    let r = heat_score(&heat, &lesion, domain.as_ref())?;
    log::info!(
        "lesion mean {:.6} over {} voxels, background mean {:.6} std {:.6} over {} voxels",
        r.mean_in,
        r.n_in,
        r.mean_bkg,
        r.std_bkg,
        r.n_bkg
    );
    println!("{:.6}", r.hs);
    Ok(())
}

/// One column of numbers. A first row that does not parse is a header.
fn read_column(path: &Path, column: Option<&str>) -> Result<Vec<f64>, CliError> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let rows: Vec<csv::StringRecord> = r.records().collect::<Result<_, _>>()?;
    let Some(first) = rows.first() else {
        return Err(CliError::data(format!("{}: no values", path.display())));
    };
    let has_header = first.iter().any(|v| v.parse::<f64>().is_err());
    let idx = match (column, has_header) {
        (Some(c), _) if c.parse::<usize>().is_ok() => c.parse().expect("checked"),
        (Some(c), true) => first
            .iter()
            .position(|h| h == c)
            .ok_or_else(|| CliError::usage(format!("{}: no column named {c:?}", path.display())))?,
        (Some(c), false) => return Err(CliError::usage(format!("{}: has no header to find {c:?}", path.display()))),
        (None, _) if first.len() == 1 => 0,
        (None, true) => {
            return Err(CliError::usage(format!(
                "{}: several columns; choose one with --column",
                path.display()
            )))
        }
        (None, false) => 0,
    };
    rows.iter()
        .skip(usize::from(has_header))
        .enumerate()
        .map(|(i, rec)| {
            let v = rec.get(idx).unwrap_or("");
            v.parse::<f64>().map_err(|_| {
                CliError::data(format!("{}: row {}: {v:?} is not a number", path.display(), i + 1 + usize::from(has_header)))
            })
        })
        .collect()
}

pub fn ttest(a: &TtestArgs) -> Result<(), CliError> {
    let xs = read_column(&a.a, a.column.as_deref())?;
    let ys = read_column(&a.b, a.column.as_deref())?;
    let r = paired_t_test(&xs, &ys)?;
    let p = if r.p >= 1e-4 { format!("{:.6}", r.p) } else { format!("{:.6e}", r.p) };
    println!("t,df,p");
    println!("{:.6},{},{p}", r.t, r.df);
    Ok(())
}

pub fn inspect_ckpt(a: &InspectArgs) -> Result<(), CliError> {
    let ckpt = read_checkpoint(&a.checkpoint)?;
    match infer_spec(&ckpt) {
        Ok(spec) => {
            println!("depth={}", spec.depth);
            println!("base_width={}", spec.base_width);
            let kind = match spec.block_kind {
                BlockKind::Basic => "basic",
                BlockKind::Bottleneck => "bottleneck",
            };
            println!("block_kind={kind}");
            println!("head_features={}", spec.head_features());
        }
        Err(e) => println!("architecture=unknown ({e})"),
    }
    let values: usize = ckpt.entries.iter().map(|e| e.data.len()).sum();
    println!("tensors={}", ckpt.entries.len());
    println!("values={values}");
    println!("name,shape,numel");
    for e in &ckpt.entries {
        let shape: Vec<String> = e.extents.iter().map(usize::to_string).collect();
        println!("{},{},{}", e.name, shape.join("x"), e.data.len());
    }
    Ok(())
}
