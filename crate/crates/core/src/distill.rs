//! Feature distillation from a frozen teacher backbone into a student,
//! the final downstream fine-tune, and both orderings of the full
//! transfer-then-compress pipeline.

use serde::{Deserialize, Serialize};

use crate::config::{InputPipeline, IrfSection, StageConfig, StudentInit};
use crate::data::{DatasetManifest, Provenance};
use crate::digg::{build_distill_set, DiggConfig, DistillSet};
use crate::error::{Error, Result};
use crate::irf::{accuracy, grid_search, run_irf, IrfOutcome, StageOutcome};
use crate::model::{dataset_features, Backbone, CnnConfig, FreezePolicy, Preprocess, TaskModel};
use crate::nn::{self, Linear, Params, Sgd};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::transformer::LatentTransformer;
use crate::vq::VqModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub epochs: usize,
    /// Small CNNs are steadier at 0.1 than at 1.0.
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Pipeline used to feed teacher and student (centre crop).
    pub input_pipeline: InputPipeline,
    pub final_finetune: StageConfig,
    /// Linear probe first, then fine-tune from the probe's winner.
    pub lp_then_ft: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            epochs: 70,
            lr: 0.1,
            weight_decay: 1e-5,
            momentum: 0.9,
            batch_size: 32,
            input_pipeline: InputPipeline::default(),
            final_finetune: StageConfig::stage4(),
            lp_then_ft: false,
        }
    }
}

/// Student-to-teacher feature map; identity (no parameters) when the
/// widths already agree.
#[derive(Clone, Debug)]
pub struct FeatureAdapter<S> {
    pub linear: Option<Linear<S>>,
}

impl<S: Scalar> Params<S> for FeatureAdapter<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        if let Some(l) = &self.linear {
            l.visit(&nn::join(prefix, "linear"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        if let Some(l) = &mut self.linear {
            l.visit_mut(&nn::join(prefix, "linear"), f);
        }
    }
}

impl<S: Scalar> FeatureAdapter<S> {
    pub fn new(student_dim: usize, teacher_dim: usize, rng: &mut SeededRng) -> Self {
        Self {
            linear: (student_dim != teacher_dim).then(|| Linear::new(student_dim, teacher_dim, rng)),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.linear.is_none()
    }

    pub fn forward(&self, x: &Tensor<S>) -> Tensor<S> {
        match &self.linear {
            Some(l) => l.forward(x),
            None => x.clone(),
        }
    }

    pub fn backward(&self, x: &Tensor<S>, dy: &Tensor<S>, grad: &mut Self) -> Tensor<S> {
        match (&self.linear, &mut grad.linear) {
            (Some(l), Some(g)) => l.backward(x, dy, g),
            _ => dy.clone(),
        }
    }
}

/// Trainable pair updated by distillation.
#[derive(Clone, Debug)]
struct Student<S> {
    backbone: Backbone<S>,
    adapter: FeatureAdapter<S>,
}

impl<S: Scalar> Params<S> for Student<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        self.backbone.visit(&nn::join(prefix, "backbone"), f);
        self.adapter.visit(&nn::join(prefix, "adapter"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        self.backbone.visit_mut(&nn::join(prefix, "backbone"), f);
        self.adapter.visit_mut(&nn::join(prefix, "adapter"), f);
    }
}

/// Mean over samples of `|adapter(f_s(x)) - f_t|^2` and its gradients.
pub fn distill_loss_and_grads<S: Scalar>(
    backbone: &Backbone<S>,
    adapter: &FeatureAdapter<S>,
    x: &Tensor<S>,
    teacher_feats: &Tensor<S>,
) -> Result<(f64, Backbone<S>, FeatureAdapter<S>)> {
    let (fs, cache) = backbone.features_cached(x);
    let pred = adapter.forward(&fs);
    if pred.shape() != teacher_feats.shape() {
        return Err(Error::Shape {
            expected: teacher_feats.shape().to_vec(),
            got: pred.shape().to_vec(),
        });
    }
    let n = pred.shape()[0];
    let inv = S::lit(1.0 / n as f64);
    let mut diff = pred;
    diff.axpy(-S::one(), teacher_feats);
    let loss = diff.sq_norm() * inv;
    let mut dpred = diff;
    dpred.scale(S::lit(2.0) * inv);
    let mut g_adapter = nn::zeros_like(adapter);
    let dfs = adapter.backward(&fs, &dpred, &mut g_adapter);
    let mut g_backbone = nn::zeros_like(backbone);
    backbone.backward(&cache, &dfs, &mut g_backbone);
    Ok((loss.to_f64_lossy(), g_backbone, g_adapter))
}

pub struct DistillOutcome<S> {
    /// Student with its distilled backbone; the head is passed through.
    pub student: TaskModel<S>,
    pub adapter: FeatureAdapter<S>,
    /// Mean batch loss per epoch (each batch loss taken before its update).
    pub epoch_losses: Vec<f64>,
    pub teacher_checksum: String,
}

pub fn distill<S: Scalar>(
    teacher: &Backbone<S>,
    student: &TaskModel<S>,
    corpus: &DatasetManifest<S>,
    cfg: &DistillConfig,
    rng: &SeededRng,
) -> Result<DistillOutcome<S>> {
    if !matches!(corpus.provenance(), Provenance::Pseudo | Provenance::Original) {
        return Err(Error::Provenance {
            expected: "pseudo or original".into(),
            got: corpus.provenance(),
        });
    }
    if corpus.is_empty() {
        return Err(Error::Validation("distillation corpus is empty".into()));
    }
    let teacher_checksum = nn::checksum(teacher);
    let targets = dataset_features(teacher, corpus, &cfg.input_pipeline)?;
    let pre = Preprocess::new(corpus, &cfg.input_pipeline)?;
    let t_dim = teacher.feature_dim();
    let mut model = Student {
        backbone: student.backbone.clone(),
        adapter: FeatureAdapter::new(student.backbone.feature_dim(), t_dim, &mut rng.derive("adapter")),
    };
    let mut opt = Sgd::new(cfg.momentum, false, cfg.weight_decay);
    let mut order_rng = rng.derive("order");
    let n = corpus.len();
    let batch = cfg.batch_size.clamp(1, n);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let order = order_rng.permutation(n);
        let mut total = 0.0;
        for idx in order.chunks(batch) {
            let x = pre.eval_batch(idx);
            let t = Tensor::from_fn(&[idx.len(), t_dim], |k| targets.data()[idx[k / t_dim] * t_dim + k % t_dim]);
            let (loss, gb, ga) = distill_loss_and_grads(&model.backbone, &model.adapter, &x, &t)?;
            let grad = Student {
                backbone: gb,
                adapter: ga,
            };
            if !loss.is_finite() || !nn::grads_finite(&grad) {
                return Err(Error::Diverged {
                    stage: "distill".into(),
                    step,
                    loss,
                });
            }
            opt.step(&mut model, &grad, cfg.lr);
            total += loss * idx.len() as f64;
            step += 1;
        }
        epoch_losses.push(total / n as f64);
    }
    debug_assert_eq!(teacher_checksum, nn::checksum(teacher));
    let mut out = student.clone();
    out.backbone = model.backbone;
    Ok(DistillOutcome {
        student: out,
        adapter: model.adapter,
        epoch_losses,
        teacher_checksum,
    })
}

/// Fine-tune a distilled student on original few-shot data with a fresh
/// head and the stage-4 grid. Pseudo data is refused.
pub fn final_finetune<S: Scalar>(
    student: &Backbone<S>,
    few: &DatasetManifest<S>,
    cfg: &DistillConfig,
    rng: &SeededRng,
) -> Result<StageOutcome<S>> {
    few.require_provenance(Provenance::Original)?;
    let mut model = TaskModel::with_backbone(student.clone(), few.num_classes(), &mut rng.derive("head"))?;
    if cfg.lp_then_ft {
        model.freeze = FreezePolicy::BackboneFrozen;
        model = grid_search(&model, few, &cfg.final_finetune, &rng.derive("lp"))?.model;
    }
    model.freeze = FreezePolicy::AllTrainable;
    grid_search(&model, few, &cfg.final_finetune, &rng.derive("ft"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OtaOrder {
    IrfThenDigg,
    DiggThenIrf,
}

impl OtaOrder {
    pub fn as_str(self) -> &'static str {
        match self {
            OtaOrder::IrfThenDigg => "irf_then_digg",
            OtaOrder::DiggThenIrf => "digg_then_irf",
        }
    }
}

impl std::str::FromStr for OtaOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "irf_then_digg" => Ok(Self::IrfThenDigg),
            "digg_then_irf" => Ok(Self::DiggThenIrf),
            _ => Err(Error::Config(format!("unknown order '{s}'"))),
        }
    }
}

/// Upstream artifacts shared by every downstream run.
pub struct Upstream<'a, S> {
    pub vq: &'a VqModel<S>,
    pub lt: &'a LatentTransformer<S>,
    pub teacher: &'a Backbone<S>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OtaReport {
    pub order: OtaOrder,
    pub dataset: String,
    pub teacher: String,
    pub student: String,
    pub top1: f64,
    pub winner_lr: f64,
    pub winner_wd: f64,
    pub distill_epoch_losses: Vec<f64>,
    pub corpus_size: usize,
    pub seed: u64,
    pub config_digest: String,
}

pub struct OtaOutcome<S> {
    pub model: TaskModel<S>,
    pub report: OtaReport,
    pub corpus: DistillSet<S>,
    pub irf: IrfOutcome<S>,
    pub distill: DistillOutcome<S>,
}

fn describe(c: &CnnConfig) -> String {
    let w: Vec<String> = c.widths.iter().map(|w| w.to_string()).collect();
    format!("cnn[{}]", w.join("-"))
}

pub struct OtaSettings<'a> {
    pub irf: &'a IrfSection,
    pub digg: &'a DiggConfig,
    pub distill: &'a DistillConfig,
    pub student: &'a CnnConfig,
    pub student_init: StudentInit,
    pub dataset_name: &'a str,
    pub config_digest: String,
}

/// Either order of transfer (IRF) and compression (DIGG + distillation),
/// scored by top-1 on `test`.
pub fn run_ota<S: Scalar>(
    order: OtaOrder,
    up: &Upstream<'_, S>,
    few: &DatasetManifest<S>,
    test: &DatasetManifest<S>,
    settings: &OtaSettings<'_>,
    rng: &SeededRng,
) -> Result<OtaOutcome<S>> {
    few.require_provenance(Provenance::Original)?;
    let mut student = TaskModel::with_backbone(
        Backbone::new(settings.student.clone(), &mut rng.derive("student"))?,
        few.num_classes(),
        &mut rng.derive("student_head"),
    )?;
    if settings.student_init == StudentInit::Pretrained {
        if settings.student != &up.teacher.config {
            return Err(Error::Config(
                "pretrained student init needs the student architecture to match the teacher".into(),
            ));
        }
        student.backbone = up.teacher.clone();
    }
    let digg = settings.digg;
    let corpus_for = |rng: &SeededRng| {
        build_distill_set(few, digg.target_count, up.vq, up.lt, &digg.mask, &digg.sampling, rng)
            .map_err(|e| e.in_stage("digg"))
    };
    let (model, corpus, irf, dist) = match order {
        OtaOrder::IrfThenDigg => {
            let irf = run_irf(up.teacher, few, up.vq, settings.irf, &rng.derive("irf")).map_err(|e| e.in_stage("irf"))?;
            let corpus = corpus_for(&rng.derive("digg"))?;
            let dist = distill(
                &irf.stage4.model.backbone,
                &student,
                &corpus.manifest,
                settings.distill,
                &rng.derive("distill"),
            )
            .map_err(|e| e.in_stage("distill"))?;
            let ft = final_finetune(&dist.student.backbone, few, settings.distill, &rng.derive("final_finetune"))
                .map_err(|e| e.in_stage("final_finetune"))?;
            (ft, corpus, irf, dist)
        }
        OtaOrder::DiggThenIrf => {
            let corpus = corpus_for(&rng.derive("digg"))?;
            let dist = distill(up.teacher, &student, &corpus.manifest, settings.distill, &rng.derive("distill"))
                .map_err(|e| e.in_stage("distill"))?;
            let irf = run_irf(&dist.student.backbone, few, up.vq, settings.irf, &rng.derive("irf"))
                .map_err(|e| e.in_stage("irf"))?;
            let ft = StageOutcome {
                model: irf.stage4.model.clone(),
                grid: irf.stage4.grid.clone(),
                lr_trace: irf.stage4.lr_trace.clone(),
                losses: irf.stage4.losses.clone(),
            };
            (ft, corpus, irf, dist)
        }
    };
    let test_labels: Vec<usize> = test
        .labels()
        .into_iter()
        .map(|l| l.ok_or_else(|| Error::Validation("test set has unlabeled records".into())))
        .collect::<Result<_>>()?;
    let pre = Preprocess::new(test, &settings.distill.final_finetune.input_pipeline)?;
    let top1 = accuracy(&model.model, &pre, &test_labels);
    let w = model.grid.winner_trial();
    let report = OtaReport {
        order,
        dataset: settings.dataset_name.to_string(),
        teacher: describe(&up.teacher.config),
        student: describe(settings.student),
        top1,
        winner_lr: w.lr,
        winner_wd: w.wd,
        distill_epoch_losses: dist.epoch_losses.clone(),
        corpus_size: corpus.manifest.len(),
        seed: rng.seed(),
        config_digest: settings.config_digest.clone(),
    };
    Ok(OtaOutcome {
        model: model.model,
        report,
        corpus,
        irf,
        distill: dist,
    })
}

/// One row of the order comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub dataset: String,
    pub baseline: Option<f64>,
    pub irf_then_digg: Option<f64>,
    pub digg_then_irf: Option<f64>,
}

pub const COMPARISON_HEADER: &str = "dataset\tbaseline\tirf_then_digg\tdigg_then_irf";

/// TSV with one row per dataset plus an `average` row; accuracies in
/// percent with one decimal, `NA` where missing.
pub fn comparison_tsv(rows: &[ComparisonRow]) -> String {
    let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{:.1}", 100.0 * x));
    let mean = |f: &dyn Fn(&ComparisonRow) -> Option<f64>| {
        let vals: Option<Vec<f64>> = rows.iter().map(f).collect();
        vals.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
    };
    let mut out = String::from(COMPARISON_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.dataset,
            fmt(r.baseline),
            fmt(r.irf_then_digg),
            fmt(r.digg_then_irf)
        ));
    }
    out.push_str(&format!(
        "average\t{}\t{}\t{}\n",
        fmt(mean(&|r| r.baseline)),
        fmt(mean(&|r| r.irf_then_digg)),
        fmt(mean(&|r| r.digg_then_irf))
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adapter_identity_when_dims_match() {
        let a = FeatureAdapter::<f64>::new(4, 4, &mut SeededRng::new(0, "a"));
        assert!(a.is_identity());
        assert_eq!(nn::param_count(&a), 0);
        let b = FeatureAdapter::<f64>::new(4, 6, &mut SeededRng::new(0, "a"));
        assert_eq!(nn::param_count(&b), 4 * 6 + 6);
    }

    #[test]
    fn distill_gradients_match_finite_differences() {
        let mut rng = SeededRng::new(0, "d");
        let cfg = CnnConfig {
            in_channels: 2,
            widths: vec![3, 4],
        };
        let bb = Backbone::<f64>::new(cfg, &mut rng).unwrap();
        let ad = FeatureAdapter::new(4, 5, &mut rng);
        let x = Tensor::randn(&[2, 2, 5, 5], 1.0, &mut rng);
        let t = Tensor::randn(&[2, 5], 1.0, &mut rng);
        let (_, gb, ga) = distill_loss_and_grads(&bb, &ad, &x, &t).unwrap();
        let pair = Student { backbone: bb, adapter: ad };
        let grads = Student { backbone: gb, adapter: ga };
        for (name, g) in nn::named_params(&grads, "") {
            let idx = g.len() / 2;
            let eval = |delta: f64| {
                let mut p = pair.clone();
                p.visit_mut("", &mut |n, t| {
                    if n == name {
                        t.data_mut()[idx] += delta;
                    }
                });
                distill_loss_and_grads(&p.backbone, &p.adapter, &x, &t).unwrap().0
            };
            let num = (eval(1e-6) - eval(-1e-6)) / 2e-6;
            assert!((num - g.data()[idx]).abs() < 1e-6 * (1.0 + num.abs()), "{name}");
        }
    }

    #[test]
    fn mismatched_widths_without_adapter_error() {
        let mut rng = SeededRng::new(0, "d");
        let bb = Backbone::<f64>::new(CnnConfig { in_channels: 1, widths: vec![3] }, &mut rng).unwrap();
        let ad = FeatureAdapter { linear: None };
        let x = Tensor::zeros(&[1, 1, 4, 4]);
        let t = Tensor::zeros(&[1, 5]);
        assert!(matches!(distill_loss_and_grads(&bb, &ad, &x, &t), Err(Error::Shape { .. })));
    }

    #[test]
    fn tsv_layout() {
        let rows = vec![
            ComparisonRow {
                dataset: "b".into(),
                baseline: Some(0.5),
                irf_then_digg: Some(0.75),
                digg_then_irf: None,
            },
            ComparisonRow {
                dataset: "c".into(),
                baseline: Some(0.25),
                irf_then_digg: Some(0.25),
                digg_then_irf: None,
            },
        ];
        let tsv = comparison_tsv(&rows);
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines[0], COMPARISON_HEADER);
        assert_eq!(lines[1], "b\t50.0\t75.0\tNA");
        assert_eq!(lines[3], "average\t37.5\t50.0\tNA");
    }
}
