//! Fold training and evaluation.

use std::collections::HashSet;
use std::fmt;
use std::path::PathBuf;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optim::{AdamState, EarlyStop, EarlyStopping, PlateauScheduler};
use super::preprocess::{random_rotation, zscore_normalize};
use super::{Fold, Init, TrainConfig, TrainError};
use crate::io::{apply_checkpoint, read_checkpoint, read_nifti, Checkpoint, Manifest};
use crate::resnet::{ForwardOptions, Model, ModelSpec};
use crate::stats::FoldMetrics;
use crate::tensor::{trilinear_resample, Tape, Tensor};
use crate::volume::Volume;
use crate::xai::{grad_cam, heat_score, HeatScoreResult, LesionMask};

/// Labeled scans addressable by subject id. Implementations must allow
/// concurrent reads.
pub trait DataSource: Sync {
    /// `(subject_id, label)` for every subject, in a stable order.
    fn cohort(&self) -> Vec<(String, u8)>;
    fn label(&self, id: &str) -> Result<u8, TrainError>;
    fn image(&self, id: &str) -> Result<Volume, TrainError>;
    /// Lesion mask, when the subject has one.
    fn mask(&self, id: &str) -> Result<Option<Volume>, TrainError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub label: u8,
    pub image: Volume,
    pub mask: Option<Volume>,
}

#[derive(Debug, Clone, Default)]
pub struct InMemorySource {
    pub subjects: IndexMap<String, Subject>,
}

impl InMemorySource {
    fn get(&self, id: &str) -> Result<&Subject, TrainError> {
        self.subjects.get(id).ok_or_else(|| TrainError::UnknownSubject(id.to_string()))
    }
}

impl DataSource for InMemorySource {
    fn cohort(&self) -> Vec<(String, u8)> {
        self.subjects.iter().map(|(id, s)| (id.clone(), s.label)).collect()
    }

    fn label(&self, id: &str) -> Result<u8, TrainError> {
        Ok(self.get(id)?.label)
    }

    fn image(&self, id: &str) -> Result<Volume, TrainError> {
        Ok(self.get(id)?.image.clone())
    }

    fn mask(&self, id: &str) -> Result<Option<Volume>, TrainError> {
        Ok(self.get(id)?.mask.clone())
    }
}

/// Reads NIfTI files listed in a manifest on demand.
#[derive(Debug, Clone)]
pub struct ManifestSource {
    rows: IndexMap<String, (u8, PathBuf, Option<PathBuf>)>,
}

impl ManifestSource {
    pub fn new(manifest: &Manifest) -> Self {
        Self {
            rows: manifest
                .rows
                .iter()
                .map(|r| (r.subject_id.clone(), (r.label, r.image.clone(), r.mask.clone())))
                .collect(),
        }
    }

    fn get(&self, id: &str) -> Result<&(u8, PathBuf, Option<PathBuf>), TrainError> {
        self.rows.get(id).ok_or_else(|| TrainError::UnknownSubject(id.to_string()))
    }
}

impl DataSource for ManifestSource {
    fn cohort(&self) -> Vec<(String, u8)> {
        self.rows.iter().map(|(id, r)| (id.clone(), r.0)).collect()
    }

    fn label(&self, id: &str) -> Result<u8, TrainError> {
        Ok(self.get(id)?.0)
    }

    fn image(&self, id: &str) -> Result<Volume, TrainError> {
        Ok(read_nifti(&self.get(id)?.1)?)
    }

    fn mask(&self, id: &str) -> Result<Option<Volume>, TrainError> {
        match &self.get(id)?.2 {
            Some(p) => Ok(Some(read_nifti(p)?)),
            None => Ok(None),
        }
    }
}

/// Optional resampling to `resize`, then z-score normalization.
pub fn prepare_volume(v: &Volume, resize: Option<[usize; 3]>) -> Result<Volume, TrainError> {
    match resize {
        Some(ext) if ext != v.extents() => zscore_normalize(&trilinear_resample(v, ext)),
        _ => zscore_normalize(v),
    }
}

fn prepare_mask(m: &Volume, resize: Option<[usize; 3]>) -> Volume {
    match resize {
        Some(ext) if ext != m.extents() => trilinear_resample(m, ext).map(|v| if v >= 0.5 { 1.0 } else { 0.0 }),
        _ => m.clone(),
    }
}

fn load_prepared(data: &dyn DataSource, id: &str, resize: Option<[usize; 3]>) -> Result<Volume, TrainError> {
    data.image(id)
        .and_then(|v| prepare_volume(&v, resize))
        .map_err(|e| TrainError::Subject {
            subject: id.to_string(),
            source: Box::new(e),
        })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

impl EpochRecord {
    pub const HEADER: &'static str = "epoch,train_loss,val_loss,lr";
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{:.8},{:.8},{:e}", self.epoch, self.train_loss, self.val_loss, self.lr)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    pub subjects: Vec<String>,
}

impl BatchRecord {
    pub const HEADER: &'static str = "epoch,batch,subjects";
}

impl fmt::Display for BatchRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.epoch, self.batch, self.subjects.join(";"))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Restored to the best validation epoch.
    pub model: Model,
    pub epochs: Vec<EpochRecord>,
    pub batches: Vec<BatchRecord>,
    pub best_epoch: usize,
    /// Epoch at which early stopping fired.
    pub stopped_at: Option<usize>,
}

impl TrainOutcome {
    pub fn epoch_log(&self) -> String {
        let mut s = format!("{}\n", EpochRecord::HEADER);
        for e in &self.epochs {
            s.push_str(&format!("{e}\n"));
        }
        s
    }

    pub fn batch_log(&self) -> String {
        let mut s = format!("{}\n", BatchRecord::HEADER);
        for b in &self.batches {
            s.push_str(&format!("{b}\n"));
        }
        s
    }
}

fn stack(vols: &[&Volume]) -> Result<Tensor<f32>, TrainError> {
    let ext = vols[0].extents();
    if let Some(v) = vols.iter().find(|v| v.extents() != ext) {
        return Err(TrainError::ShapeMismatch(format!(
            "batch mixes extents {ext:?} and {:?}; set a common resize",
            v.extents()
        )));
    }
    let mut data = Vec::with_capacity(vols.len() * vols[0].len());
    for v in vols {
        data.extend_from_slice(v.data());
    }
    Ok(Tensor::from_vec(&[vols.len(), 1, ext[0], ext[1], ext[2]], data)?)
}

/// Inference-mode logits of one prepared scan.
fn logits_of(model: &Model, v: &Volume) -> Result<[f64; 2], TrainError> {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(v.to_tensor());
    let pass = model.record(
        &mut tape,
        x,
        ForwardOptions {
            train: false,
            params_as_constants: true,
            ..Default::default()
        },
    )?;
    let z = tape.value(pass.logits).data();
    Ok([z[0] as f64, z[1] as f64])
}

fn log_softmax(z: [f64; 2]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
    [z[0] - lse, z[1] - lse]
}

/// Positive-class probability of a prepared scan.
pub fn predict_proba(model: &Model, v: &Volume) -> Result<f64, TrainError> {
    Ok(log_softmax(logits_of(model, v)?)[1].exp())
}

/// Builds the model for a run: fresh weights, an optional checkpoint, then
/// the freeze policy.
pub fn build_model(cfg: &TrainConfig) -> Result<Model, TrainError> {
    let mut model = Model::new(ModelSpec::resnet(cfg.depth, cfg.base_width)?, cfg.seed)?;
    if let Init::Checkpoint(path) = &cfg.init {
        let ckpt = read_checkpoint(path)?;
        apply_checkpoint(&ckpt, &mut model)?;
    }
    model.apply_freeze_policy(cfg.freeze);
    Ok(model)
}

/// Trains one fold: z-scored scans, fresh rotations of every training scan
/// each epoch, Adam on mini-batch cross-entropy, plateau learning-rate
/// reduction and early stopping on validation loss. The returned model
/// carries the weights of the best validation epoch.
pub fn train_fold(fold: &Fold, cfg: &TrainConfig, data: &dyn DataSource) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let test: HashSet<&str> = fold.test.iter().map(String::as_str).collect();
    if let Some(id) = fold.train.iter().chain(&fold.val).find(|id| test.contains(id.as_str())) {
        return Err(TrainError::InvalidPlan(format!(
            "subject {id:?} is in both the test list and the training pool of fold {}",
            fold.index
        )));
    }
    if fold.train.is_empty() || fold.val.is_empty() {
        return Err(TrainError::InvalidPlan(format!(
            "fold {} needs non-empty training and validation lists",
            fold.index
        )));
    }

    let mut model = build_model(cfg)?;
    let load = |ids: &[String]| -> Result<Vec<(String, Volume, usize)>, TrainError> {
        ids.iter()
            .map(|id| Ok((id.clone(), load_prepared(data, id, cfg.resize)?, data.label(id)? as usize)))
            .collect()
    };
    let train = load(&fold.train)?;
    let val = load(&fold.val)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(fold.index as u64 + 1);
    let mut adam = AdamState::default();
    let mut sched = PlateauScheduler::new(cfg.lr0, cfg.scheduler_factor, cfg.scheduler_patience, cfg.min_improvement);
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience, cfg.min_improvement);
    let mut best: Option<Checkpoint> = None;
    let mut epochs = Vec::new();
    let mut batches = Vec::new();
    let mut stopped_at = None;
    let mut lr = cfg.lr0;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut groups: Vec<Vec<usize>> = order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect();
        // A lone trailing sample joins the previous batch so batch statistics stay defined.
        if groups.len() > 1 && groups.last().is_some_and(|g| g.len() == 1) {
            let last = groups.pop().expect("non-empty");
            groups.last_mut().expect("non-empty").extend(last);
        }

        let mut loss_sum = 0.0;
        for (b, group) in groups.iter().enumerate() {
            let augmented: Vec<Volume> = group
                .iter()
                .map(|&i| random_rotation(&train[i].1, &mut rng, cfg.rotation_max_deg))
                .collect();
            let x = stack(&augmented.iter().collect::<Vec<_>>())?;
            let labels: Vec<usize> = group.iter().map(|&i| train[i].2).collect();

            let mut tape = Tape::<f32>::new();
            let xv = tape.constant(x);
            let pass = model.record(
                &mut tape,
                xv,
                ForwardOptions {
                    train: true,
                    ..Default::default()
                },
            )?;
            let loss = tape.cross_entropy(pass.logits, &labels)?;
            let grads = tape.gradients(loss)?;
            model.zero_grad();
            model.accumulate_grads(&pass, &grads)?;
            model.apply_bn_updates(&pass.bn_updates);
            adam.step(&mut model, lr)?;
            loss_sum += tape.value(loss).data()[0] as f64 * group.len() as f64;
            batches.push(BatchRecord {
                epoch,
                batch: b + 1,
                subjects: group.iter().map(|&i| train[i].0.clone()).collect(),
            });
        }
        let train_loss = loss_sum / train.len() as f64;

        let mut val_loss = 0.0;
        for (_, v, label) in &val {
            val_loss -= log_softmax(logits_of(&model, v)?)[*label];
        }
        val_loss /= val.len() as f64;

        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        };
        log::info!("fold {} epoch {record}", fold.index);
        epochs.push(record);
        if !val_loss.is_finite() {
            log::warn!("fold {}: non-finite validation loss at epoch {epoch}", fold.index);
        }

        lr = sched.step(val_loss);
        match stopper.check(val_loss) {
            EarlyStop::Continue { improved } => {
                if improved {
                    best = Some(Checkpoint::from_model(&model));
                }
            }
            EarlyStop::Stop { epoch, best_epoch } => {
                log::info!("fold {}: early stop at epoch {epoch}, best epoch {best_epoch}", fold.index);
                stopped_at = Some(epoch);
                break;
            }
        }
    }
    if let Some(snapshot) = &best {
        apply_checkpoint(snapshot, &mut model)?;
    }
    model.zero_grad();
    Ok(TrainOutcome {
        model,
        epochs,
        batches,
        best_epoch: stopper.best_epoch(),
        stopped_at,
    })
}

/// Grad-CAM (class 1) Heat-Scores of the lesion-positive subjects among
/// `ids`. Subjects without a mask or whose score is undefined are returned
/// as failures with the reason.
#[allow(clippy::type_complexity)]
pub fn scan_heat_scores(
    model: &Model,
    ids: &[String],
    data: &dyn DataSource,
    cfg: &TrainConfig,
) -> Result<(Vec<(String, HeatScoreResult)>, Vec<(String, String)>), TrainError> {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for id in ids {
        if data.label(id)? != 1 {
            continue;
        }
        let Some(mask) = data.mask(id)? else {
            failed.push((id.clone(), "no lesion mask".to_string()));
            continue;
        };
        let v = load_prepared(data, id, cfg.resize)?;
        let mask = prepare_mask(&mask, cfg.resize);
        let lesion = match LesionMask::new(mask) {
            Ok(l) => l,
            Err(e) => {
                failed.push((id.clone(), e.to_string()));
                continue;
            }
        };
        let heat = grad_cam(model, &v.to_tensor(), 1, cfg.cam_layer)?;
        match heat_score(&heat, &lesion, None) {
            Ok(r) => ok.push((id.clone(), r)),
            Err(e) => {
                log::warn!("subject {id}: heat score unavailable: {e}");
                failed.push((id.clone(), e.to_string()));
            }
        }
    }
    Ok((ok, failed))
}

/// Test-set probabilities, accuracy, ROC-AUC and, when `with_heat_scores`,
/// per-scan Heat-Scores of the lesion-positive test scans.
pub fn evaluate_fold(
    model: &Model,
    fold: &Fold,
    data: &dyn DataSource,
    cfg: &TrainConfig,
    with_heat_scores: bool,
) -> Result<FoldMetrics, TrainError> {
    let mut scores = Vec::with_capacity(fold.test.len());
    let mut labels = Vec::with_capacity(fold.test.len());
    for id in &fold.test {
        let v = load_prepared(data, id, cfg.resize)?;
        scores.push(predict_proba(model, &v)?);
        labels.push(data.label(id)?);
    }
    let mut metrics = FoldMetrics::from_scores(fold.index, fold.test.clone(), scores, labels)?;
    if with_heat_scores {
        let (ok, failed) = scan_heat_scores(model, &fold.test, data, cfg)?;
        metrics.heat_scores = ok;
        metrics.heat_score_failures = failed;
    }
    Ok(metrics)
}
