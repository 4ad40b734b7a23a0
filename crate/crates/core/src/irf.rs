//! Image re-representation fine-tuning: deliver (frozen backbone, head only)
//! then calibrate (everything trainable), each with a seeded grid search,
//! plus linear-probe and fine-tune baselines.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DataChoice, IrfSection, OptimizerKind, StageConfig};
use crate::data::{DatasetManifest, Provenance};
use crate::error::{Error, Result};
use crate::model::{predict, Backbone, CnnConfig, FreezePolicy, Preprocess, TaskModel};
use crate::nn::{self, Adam, MultiStepLr, Params, Sgd};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::vq::{rerepresent, VqModel};

/// `n` log-spaced values from `hi` down to `lo`, both included. Integer
/// decades come out as the exact decimal literal (`1e-3`, not
/// `0.0009999...`).
pub fn make_lr_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::Validation(format!("grid needs n >= 2, got {n}")));
    }
    if !(lo > 0.0 && lo < hi && hi.is_finite()) {
        return Err(Error::Validation(format!("grid needs 0 < lo < hi, got [{lo}, {hi}]")));
    }
    let (a, b) = (hi.log10(), lo.log10());
    let step = (a - b) / (n - 1) as f64;
    Ok((0..n)
        .map(|i| {
            if i == 0 {
                return hi;
            }
            if i == n - 1 {
                return lo;
            }
            let e = a - step * i as f64;
            let r = e.round();
            if (e - r).abs() < 1e-9 {
                format!("1e{}", r as i64).parse().expect("decimal literal")
            } else {
                10f64.powf(e)
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub lr: f64,
    pub wd: f64,
    pub val_metric: f64,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    /// Learning-rate-major order: `trials[i * |wd_grid| + j]` is
    /// `(lr_grid[i], wd_grid[j])`.
    pub trials: Vec<Trial>,
    pub winner: usize,
    pub selection_rule: String,
}

impl GridSearchResult {
    pub fn winner_trial(&self) -> &Trial {
        &self.trials[self.winner]
    }
}

pub struct TrainOutcome<S> {
    pub model: TaskModel<S>,
    pub losses: Vec<f64>,
    /// Learning rate applied at each step.
    pub lr_trace: Vec<f64>,
}

enum ClassifierOpt<S> {
    Sgd(Sgd<S>),
    Adam(Adam<S>),
}

impl<S: Scalar> ClassifierOpt<S> {
    fn step<M: Params<S>>(&mut self, p: &mut M, g: &M, lr: f64) {
        match self {
            Self::Sgd(o) => o.step(p, g, lr),
            Self::Adam(o) => o.step(p, g, lr),
        }
    }
}

/// Cross-entropy training with random crops, `cfg.steps` steps from
/// initial rate `lr` under the stage's multi-step schedule. A frozen
/// backbone is never handed to the optimizer.
pub fn train_classifier<S: Scalar>(
    model: &TaskModel<S>,
    pre: &Preprocess<S>,
    labels: &[usize],
    cfg: &StageConfig,
    lr: f64,
    wd: f64,
    rng: &SeededRng,
) -> Result<TrainOutcome<S>> {
    if pre.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= model.num_classes()) {
        return Err(Error::Validation(format!(
            "label {y} >= num_classes {}",
            model.num_classes()
        )));
    }
    let mut model = model.clone();
    let schedule = MultiStepLr::from_fractions(lr, &cfg.lr_schedule.milestones, cfg.lr_schedule.decay, cfg.steps);
    let o = &cfg.optimizer;
    let mut opt = match o.kind {
        OptimizerKind::SgdNesterov => ClassifierOpt::Sgd(Sgd::new(o.momentum, true, wd)),
        OptimizerKind::Sgd => ClassifierOpt::Sgd(Sgd::new(o.momentum, false, wd)),
        OptimizerKind::Adam => ClassifierOpt::Adam(Adam::new(o.momentum, 0.999)),
    };
    let mut batch_rng = rng.derive("batches");
    let mut crop_rng = rng.derive("crops");
    let n = pre.len();
    let batch = cfg.batch_size.clamp(1, n);
    let mut order = Vec::new();
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut lr_trace = Vec::with_capacity(cfg.steps);
    let frozen = model.freeze == FreezePolicy::BackboneFrozen;
    for step in 0..cfg.steps {
        if cursor + batch > order.len() {
            order = batch_rng.permutation(n);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let x = pre.train_batch(idx, &mut crop_rng);
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let (loss, grad) = model.loss_and_grads(&x, &y);
        if !loss.is_finite() || !nn::grads_finite(&grad) {
            return Err(Error::Diverged {
                stage: "train_classifier".into(),
                step,
                loss,
            });
        }
        let rate = schedule.lr_at(step);
        if frozen {
            opt.step(&mut model.head, &grad.head, rate);
        } else {
            opt.step(&mut model, &grad, rate);
        }
        losses.push(loss);
        lr_trace.push(rate);
    }
    Ok(TrainOutcome {
        model,
        losses,
        lr_trace,
    })
}

/// Fraction of `labels` matched by argmax predictions.
pub fn accuracy<S: Scalar>(model: &TaskModel<S>, pre: &Preprocess<S>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predict(model, pre).iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

fn labels_of<S: Scalar>(d: &DatasetManifest<S>) -> Result<Vec<usize>> {
    d.labels()
        .into_iter()
        .map(|l| l.ok_or_else(|| Error::Validation("dataset has unlabeled records".into())))
        .collect()
}

pub struct StageOutcome<S> {
    pub model: TaskModel<S>,
    pub grid: GridSearchResult,
    pub lr_trace: Vec<f64>,
    pub losses: Vec<f64>,
}

/// Train one model per `(lr, wd)` pair on a seeded split of `d`, rank by
/// held-out top-1 and keep the first best. Trials that diverge score 0.
pub fn grid_search<S: Scalar>(
    model: &TaskModel<S>,
    d: &DatasetManifest<S>,
    cfg: &StageConfig,
    rng: &SeededRng,
) -> Result<StageOutcome<S>> {
    cfg.validate_grid()?;
    if d.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let (train, val) = d.split(cfg.val_fraction, &mut rng.derive("split"));
    if val.is_empty() {
        return Err(Error::Validation(format!(
            "validation split of {} records at fraction {} is empty",
            d.len(),
            cfg.val_fraction
        )));
    }
    if train.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    let train_labels = labels_of(&train)?;
    let val_labels = labels_of(&val)?;
    let train_pre = Preprocess::new(&train, &cfg.input_pipeline)?;
    let val_pre = Preprocess::new(&val, &cfg.input_pipeline)?;
    let pairs: Vec<(f64, f64)> = cfg
        .lr_grid
        .iter()
        .flat_map(|&lr| cfg.wd_grid.iter().map(move |&wd| (lr, wd)))
        .collect();
    let runs: Vec<(Trial, Option<TrainOutcome<S>>)> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, &(lr, wd))| {
            match train_classifier(model, &train_pre, &train_labels, cfg, lr, wd, &rng.derive(format!("trial/{i}"))) {
                Ok(out) => {
                    let val_metric = accuracy(&out.model, &val_pre, &val_labels);
                    Ok((
                        Trial {
                            lr,
                            wd,
                            val_metric,
                            diverged: false,
                        },
                        Some(out),
                    ))
                }
                Err(Error::Diverged { .. }) => Ok((
                    Trial {
                        lr,
                        wd,
                        val_metric: 0.0,
                        diverged: true,
                    },
                    None,
                )),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let mut winner: Option<usize> = None;
    for (i, (t, out)) in runs.iter().enumerate() {
        if out.is_some() && winner.is_none_or(|w| t.val_metric > runs[w].0.val_metric) {
            winner = Some(i);
        }
    }
    let winner = winner.ok_or_else(|| Error::Diverged {
        stage: "grid_search".into(),
        step: 0,
        loss: f64::NAN,
    })?;
    let trials = runs.iter().map(|(t, _)| t.clone()).collect();
    let out = runs.into_iter().nth(winner).and_then(|(_, o)| o).expect("winner trained");
    Ok(StageOutcome {
        model: out.model,
        grid: GridSearchResult {
            trials,
            winner,
            selection_rule: "max val top1, first in trial order on ties".into(),
        },
        lr_trace: out.lr_trace,
        losses: out.losses,
    })
}

fn expected_provenance(choice: DataChoice) -> Provenance {
    match choice {
        DataChoice::Original => Provenance::Original,
        DataChoice::Rerep => Provenance::ReRepresented,
    }
}

/// Train the head on delivering data with the backbone frozen. `source`
/// names the data the caller intends to deliver with; it must match the
/// dataset's provenance.
pub fn stage3_deliver<S: Scalar>(
    model: &TaskModel<S>,
    data: &DatasetManifest<S>,
    cfg: &StageConfig,
    rng: &SeededRng,
    source: DataChoice,
) -> Result<StageOutcome<S>> {
    data.require_provenance(expected_provenance(source))?;
    let mut m = model.clone();
    m.freeze = FreezePolicy::BackboneFrozen;
    grid_search(&m, data, cfg, rng)
}

/// Fine-tune every parameter on calibration data.
pub fn stage4_calibrate<S: Scalar>(
    model: &TaskModel<S>,
    data: &DatasetManifest<S>,
    cfg: &StageConfig,
    rng: &SeededRng,
    source: DataChoice,
) -> Result<StageOutcome<S>> {
    data.require_provenance(expected_provenance(source))?;
    let mut m = model.clone();
    m.freeze = FreezePolicy::AllTrainable;
    grid_search(&m, data, cfg, rng)
}

pub struct IrfOutcome<S> {
    pub rerep: DatasetManifest<S>,
    pub stage3: StageOutcome<S>,
    pub stage4: StageOutcome<S>,
}

/// Assemble, deliver and calibrate on `few` (original downstream data)
/// starting from `backbone` with a fresh head.
pub fn run_irf<S: Scalar>(
    backbone: &Backbone<S>,
    few: &DatasetManifest<S>,
    vq: &VqModel<S>,
    cfg: &IrfSection,
    rng: &SeededRng,
) -> Result<IrfOutcome<S>> {
    few.require_provenance(Provenance::Original)?;
    let rerep = rerepresent(few, vq).map_err(|e| e.in_stage("assemble"))?;
    let pick = |c: DataChoice| match c {
        DataChoice::Original => few,
        DataChoice::Rerep => &rerep,
    };
    let model = TaskModel::with_backbone(backbone.clone(), few.num_classes(), &mut rng.derive("head"))?;
    let stage3 = stage3_deliver(
        &model,
        pick(cfg.delivering_data),
        &cfg.stage3,
        &rng.derive("deliver"),
        cfg.delivering_data,
    )
    .map_err(|e| e.in_stage("deliver"))?;
    let stage4 = stage4_calibrate(
        &stage3.model,
        pick(cfg.calibration_data),
        &cfg.stage4,
        &rng.derive("calibrate"),
        cfg.calibration_data,
    )
    .map_err(|e| e.in_stage("calibrate"))?;
    Ok(IrfOutcome { rerep, stage3, stage4 })
}

/// Head-only training on original data from a fresh head.
pub fn linear_probe<S: Scalar>(
    backbone: &Backbone<S>,
    d: &DatasetManifest<S>,
    cfg: &StageConfig,
    rng: &SeededRng,
) -> Result<StageOutcome<S>> {
    d.require_provenance(Provenance::Original)?;
    let mut m = TaskModel::with_backbone(backbone.clone(), d.num_classes(), &mut rng.derive("head"))?;
    m.freeze = FreezePolicy::BackboneFrozen;
    grid_search(&m, d, cfg, &rng.derive("linear_probe"))
}

/// Full fine-tune on original data from a fresh head.
pub fn finetune<S: Scalar>(
    backbone: &Backbone<S>,
    d: &DatasetManifest<S>,
    cfg: &StageConfig,
    rng: &SeededRng,
) -> Result<StageOutcome<S>> {
    d.require_provenance(Provenance::Original)?;
    let m = TaskModel::with_backbone(backbone.clone(), d.num_classes(), &mut rng.derive("head"))?;
    grid_search(&m, d, cfg, &rng.derive("finetune"))
}

/// Supervised upstream training of a backbone (no grid; uses
/// `lr_schedule.initial` and `optimizer.weight_decay`).
pub fn pretrain_backbone<S: Scalar>(
    upstream: &DatasetManifest<S>,
    config: &CnnConfig,
    cfg: &StageConfig,
    rng: &SeededRng,
) -> Result<TrainOutcome<S>> {
    let labels = labels_of(upstream)?;
    let model = TaskModel::new(config.clone(), upstream.num_classes(), &mut rng.derive("init"))?;
    let pre = Preprocess::new(upstream, &cfg.input_pipeline)?;
    train_classifier(
        &model,
        &pre,
        &labels,
        cfg,
        cfg.lr_schedule.initial,
        cfg.optimizer.weight_decay,
        rng,
    )
}

/// Per-stage JSON report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub metrics: serde_json::Value,
    pub lr_trace_path: Option<String>,
}

/// Linear-probe / fine-tune report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub method: String,
    pub dataset: String,
    pub top1: f64,
    pub winner_lr: f64,
    pub winner_wd: f64,
}
