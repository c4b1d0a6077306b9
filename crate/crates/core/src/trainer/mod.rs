//! Joint training, teacher/student baselines, checkpoints and run histories.

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointArch, CHECKPOINT_VERSION};
pub use config::{
    apply_override, DataConfig, DataKind, DistillConfig, EvalConfig, ExperimentConfig, LossSection, ModalityName,
    OptimizerConfig, OptimizerKind, TeacherConfig, TeacherMode,
};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::{augment, batches, load_manifest_dataset, split, Batch};
use crate::error::{Error, Result};
use crate::eval::{evaluate, RecordTag};
use crate::losses::{kd_loss, total_loss, KdConfig, LossReport};
use crate::model::{Classifier, DiscomArch, Model, ModelArch, ModelBundle, PlainArch, MODALITIES};
use crate::optim::{Adam, ParamGroup};
use crate::synth::{generate, PairedDataset, PairedSample};
use crate::tape::Graph;

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: PairedDataset,
    pub val: PairedDataset,
    pub test: PairedDataset,
}

impl Splits {
    pub fn n_classes(&self) -> usize {
        self.train.n_classes
    }

    pub fn obs_shape(&self, m: usize) -> Result<Vec<usize>> {
        self.train
            .obs_shape(m)
            .map(<[usize]>::to_vec)
            .ok_or_else(|| Error::Data("training split is empty".into()))
    }
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<PairedDataset> {
    match cfg.data.kind {
        DataKind::Synth => generate(&cfg.data.synth),
        DataKind::Manifest => {
            let path = cfg
                .data
                .manifest
                .as_ref()
                .ok_or_else(|| Error::Config("data.manifest is unset".into()))?;
            load_manifest_dataset(path, cfg.data.n_classes)
        }
    }
}

pub fn prepare_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    let data = load_dataset(cfg)?;
    if cfg.augment.any_enabled() {
        for m in 0..MODALITIES {
            if let Some(shape) = data.obs_shape(m) {
                cfg.augment.check_shape(shape)?;
            }
        }
    }
    let (train, val, test) = split(&data, &cfg.split)?;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    Ok(Splits { train, val, test })
}

/// Mini-batches of one epoch, augmented when enabled. Order and draws are a
/// function of `(seed, epoch)` only.
fn epoch_batches(cfg: &ExperimentConfig, train: &PairedDataset, seed: u64, epoch: usize) -> Result<Vec<Batch>> {
    let order = batches(train.len(), cfg.optimizer.batch_size, seed, epoch)?;
    if !cfg.augment.any_enabled() {
        return order
            .iter()
            .map(|idx| Batch::from_samples(idx.iter().map(|&i| &train.samples[i])))
            .collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.augment.seed ^ seed.rotate_left(32));
    rng.set_stream(epoch as u64);
    order
        .iter()
        .map(|idx| {
            let samples = idx
                .iter()
                .map(|&i| augment(&train.samples[i], &cfg.augment, &mut rng))
                .collect::<Result<Vec<PairedSample>>>()?;
            Batch::from_samples(&samples)
        })
        .collect()
}

fn with_epoch(e: Error, epoch: usize) -> Error {
    match e {
        Error::Divergence { term, .. } => Error::Divergence { term, epoch },
        other => other,
    }
}

fn val_f1(model: &dyn Classifier, val: &PairedDataset) -> Result<f64> {
    if val.is_empty() {
        return Ok(0.0);
    }
    Ok(evaluate(model, val, RecordTag::default())?.weighted_f1)
}

/// One row of `history.csv`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossReport,
    pub val_f1: [f64; MODALITIES],
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscomRun {
    /// Best-validation deployable model per modality.
    pub models: [Model; MODALITIES],
    pub best_epoch: [usize; MODALITIES],
    pub best_val_f1: [f64; MODALITIES],
    /// Full network after the last epoch.
    pub bundle: ModelBundle,
    pub history: Vec<EpochRecord>,
}

pub fn discom_arch(cfg: &ExperimentConfig, splits: &Splits) -> Result<DiscomArch> {
    let (s1, s2) = (splits.obs_shape(0)?, splits.obs_shape(1)?);
    DiscomArch::new(
        &cfg.model,
        [&s1, &s2],
        splits.n_classes(),
        cfg.loss.grl(),
        cfg.loss.representation,
    )
}

/// Joint training of both branches and all heads with one optimizer.
pub fn train_discom(cfg: &ExperimentConfig, splits: &Splits, seed: u64) -> Result<DiscomRun> {
    cfg.validate()?;
    let mut bundle = ModelBundle::init(discom_arch(cfg, splits)?, seed);
    let mut adam = Adam::new(cfg.optimizer.adam())?.with_group(ParamGroup {
        prefix: format!("{}.", bundle.arch.cl_adv.name),
        lr_scale: cfg.optimizer.adversary_lr_scale,
        weight_decay: cfg.optimizer.adversary_weight_decay,
    })?;
    let loss_cfg = cfg.loss.loss_config();
    let mut models = [bundle.deploy(0), bundle.deploy(1)];
    let mut best_epoch = [0; MODALITIES];
    let mut best_val_f1 = [f64::NEG_INFINITY; MODALITIES];
    let mut history = Vec::with_capacity(cfg.optimizer.epochs);
    for epoch in 1..=cfg.optimizer.epochs {
        let mut reports = Vec::new();
        for batch in epoch_batches(cfg, &splits.train, seed, epoch - 1)? {
            let (report, grads) = {
                let mut g = Graph::new(&bundle.params);
                let x = [g.input(batch.x[0].clone()), g.input(batch.x[1].clone())];
                let fwd = bundle.forward(&mut g, x)?;
                let lg = total_loss(&mut g, &bundle, &fwd, &batch.y, &loss_cfg).map_err(|e| with_epoch(e, epoch))?;
                (lg.report, g.backward(lg.total))
            };
            adam.step(&mut bundle.params, &grads);
            reports.push((report, batch.len()));
        }
        let mut f1 = [0.0; MODALITIES];
        for m in 0..MODALITIES {
            let deployed = bundle.deploy(m);
            f1[m] = val_f1(&deployed, &splits.val)?;
            if f1[m] > best_val_f1[m] {
                best_val_f1[m] = f1[m];
                best_epoch[m] = epoch;
                models[m] = deployed;
            }
        }
        let loss = LossReport::weighted_mean(&reports);
        log::info!(
            "seed {seed} epoch {epoch}: total {:.4} (cl {:.4} adv {:.4} mod {:.4} aux {:.4} orth {:.4}) val f1 {:.4}/{:.4}",
            loss.total,
            loss.cl,
            loss.adv,
            loss.mod_,
            loss.aux,
            loss.orth,
            f1[0],
            f1[1]
        );
        history.push(EpochRecord {
            epoch,
            loss,
            val_f1: f1,
        });
    }
    Ok(DiscomRun {
        models,
        best_epoch,
        best_val_f1,
        bundle,
        history,
    })
}

/// What a conventional classifier is trained against.
#[derive(Clone, Copy, Debug)]
pub enum Objective<'a> {
    CrossEntropy,
    /// Soft targets from a frozen teacher.
    Distill { teacher: &'a Model, kd: KdConfig },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlainEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub val_f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlainRun {
    pub model: Model,
    pub final_model: Model,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub history: Vec<PlainEpoch>,
}

pub fn train_plain(
    cfg: &ExperimentConfig,
    splits: &Splits,
    seed: u64,
    arch: PlainArch,
    objective: Objective<'_>,
) -> Result<PlainRun> {
    cfg.validate()?;
    if let Objective::Distill { teacher, kd } = objective {
        kd.validate()?;
        if teacher.n_classes() != arch.n_classes {
            return Err(Error::Config(format!(
                "teacher predicts {} classes but the student {}",
                teacher.n_classes(),
                arch.n_classes
            )));
        }
    }
    let mut model = Model::init(ModelArch::Plain(arch), seed);
    let mut adam = Adam::new(cfg.optimizer.adam())?;
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_val_f1 = f64::NEG_INFINITY;
    let mut history = Vec::with_capacity(cfg.optimizer.epochs);
    for epoch in 1..=cfg.optimizer.epochs {
        let mut sum = 0.0;
        let mut count = 0;
        for batch in epoch_batches(cfg, &splits.train, seed, epoch - 1)? {
            let teacher_logits = match objective {
                Objective::Distill { teacher, .. } => Some(teacher.logits(&batch)?),
                Objective::CrossEntropy => None,
            };
            let (value, grads) = {
                let mut g = Graph::new(&model.params);
                let x = [Some(g.input(batch.x[0].clone())), Some(g.input(batch.x[1].clone()))];
                let logits = model.forward(&mut g, x)?;
                let loss = match (objective, &teacher_logits) {
                    (Objective::Distill { kd, .. }, Some(t)) => kd_loss(&mut g, logits, t, &batch.y, &kd)?,
                    _ => g.cross_entropy(logits, &batch.y)?,
                };
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Divergence {
                        term: "ce".into(),
                        epoch,
                    });
                }
                (value, g.backward(loss))
            };
            adam.step(&mut model.params, &grads);
            sum += value * batch.len() as f64;
            count += batch.len();
        }
        let f1 = val_f1(&model, &splits.val)?;
        if f1 > best_val_f1 {
            best_val_f1 = f1;
            best_epoch = epoch;
            best = model.clone();
        }
        history.push(PlainEpoch {
            epoch,
            loss: sum / count.max(1) as f64,
            val_f1: f1,
        });
    }
    Ok(PlainRun {
        model: best,
        final_model: model,
        best_epoch,
        best_val_f1,
        history,
    })
}

/// Single-modal classifier with the same backbone and head width as the
/// corresponding DisCoM branch.
pub fn single_arch(cfg: &ExperimentConfig, splits: &Splits, modality: usize) -> Result<PlainArch> {
    PlainArch::single(
        modality,
        cfg.model.backbone(modality),
        &splits.obs_shape(modality)?,
        2 * cfg.model.embed_width,
        splits.n_classes(),
    )
}

pub fn teacher_arch(cfg: &ExperimentConfig, splits: &Splits) -> Result<PlainArch> {
    match cfg.teacher.mode {
        TeacherMode::Fusion => {
            let (s1, s2) = (splits.obs_shape(0)?, splits.obs_shape(1)?);
            PlainArch::fusion(
                [&cfg.model.m1, &cfg.model.m2],
                [&s1, &s2],
                2 * cfg.model.embed_width,
                splits.n_classes(),
            )
        }
        TeacherMode::M1 => single_arch(cfg, splits, 0),
        TeacherMode::M2 => single_arch(cfg, splits, 1),
    }
}

pub fn train_teacher(cfg: &ExperimentConfig, splits: &Splits, seed: u64) -> Result<PlainRun> {
    train_plain(cfg, splits, seed, teacher_arch(cfg, splits)?, Objective::CrossEntropy)
}

/// Plain cross-entropy single-modal baseline.
pub fn train_student(cfg: &ExperimentConfig, splits: &Splits, seed: u64, modality: usize) -> Result<PlainRun> {
    train_plain(cfg, splits, seed, single_arch(cfg, splits, modality)?, Objective::CrossEntropy)
}

pub fn distill_student(
    cfg: &ExperimentConfig,
    splits: &Splits,
    seed: u64,
    teacher: &Model,
    modality: usize,
    kd: KdConfig,
) -> Result<PlainRun> {
    train_plain(
        cfg,
        splits,
        seed,
        single_arch(cfg, splits, modality)?,
        Objective::Distill { teacher, kd },
    )
}

pub fn write_history(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "epoch",
        "loss_cl",
        "loss_adv",
        "loss_mod",
        "loss_aux",
        "loss_orth",
        "loss_total",
        "val_f1_m1",
        "val_f1_m2",
    ])?;
    for r in history {
        let l = r.loss;
        w.write_record(
            std::iter::once(r.epoch.to_string()).chain(
                [l.cl, l.adv, l.mod_, l.aux, l.orth, l.total, r.val_f1[0], r.val_f1[1]]
                    .iter()
                    .map(f64::to_string),
            ),
        )?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_plain_history(path: impl AsRef<Path>, history: &[PlainEpoch]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "loss", "val_f1"])?;
    for r in history {
        w.write_record([r.epoch.to_string(), r.loss.to_string(), r.val_f1.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
