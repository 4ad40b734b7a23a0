//! Config-driven experiment runner behind the command-line tool.
//!
//! Each stage writes into `<output_dir>/<stage>-<key>` where `<key>` is a
//! digest of everything the stage depends on (its config sections, the seed
//! and the keys of the stages it consumes). Re-running with the same config
//! reuses finished upstream artifacts. Every command records what it wrote in
//! `<output_dir>/artifacts.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint::{config_digest, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
use crate::config::{DataChoice, RunConfig};
use crate::data::{load_dataset_dir, sample_few_data, save_dataset, DatasetManifest};
use crate::digg::{build_distill_set, contact_sheet, DistillSet};
use crate::distill::{
    comparison_tsv, distill, final_finetune, run_ota, ComparisonRow, DistillOutcome, OtaOrder, OtaReport,
    OtaSettings, Upstream,
};
use crate::error::{Error, Result};
use crate::irf::{
    finetune, linear_probe, pretrain_backbone, run_irf, stage3_deliver, stage4_calibrate, BaselineReport,
    StageOutcome, StageReport,
};
use crate::metrics::{extract_features, fd_bar_chart, fd_score, top1_accuracy, FdResult, FeatureBag};
use crate::model::{Backbone, TaskModel};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::transformer::{train_lt, LatentTransformer};
use crate::vq::{rerepresent, tokenize_dataset, train_vq, VqModel};
use crate::Real;

pub const ARTIFACTS_FILE: &str = "artifacts.json";
pub const REPORT_FILE: &str = "report.json";

/// Where each config value came from, lowest precedence first.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Provenances {
    pub config_file: Option<PathBuf>,
    pub overrides: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageEntry {
    pub stage: String,
    pub dir: PathBuf,
    pub files: Vec<String>,
    pub reused: bool,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ArtifactManifest {
    pub config_digest: String,
    pub precedence: String,
    pub config_file: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub stages: Vec<StageEntry>,
}

pub struct PrimeArtifacts {
    pub vq: VqModel<Real>,
    pub lt: LatentTransformer<Real>,
    pub teacher: TaskModel<Real>,
}

pub struct Runner {
    pub cfg: RunConfig,
    pub sources: Provenances,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Feature bags use the checkpoint container: one `features` array plus the
/// extractor id in the metadata.
pub fn save_features(bag: &FeatureBag, path: &Path, meta: CheckpointMeta) -> Result<()> {
    let t = Tensor::new(vec![bag.n, bag.d], bag.data.clone())?;
    let mut c = Checkpoint::new(meta.with_extra(json!({ "extractor_id": bag.extractor_id })));
    c.insert("features", &t);
    save_checkpoint(&c, path)
}

pub fn load_features(path: &Path) -> Result<FeatureBag> {
    let c = load_checkpoint(path)?;
    let t: Tensor<f64> = c.tensor("features")?;
    let id = c.meta.extra["extractor_id"].as_str().unwrap_or("unknown").to_string();
    FeatureBag::from_tensor(&t, id)
}

fn stage_report(stage: &str, config: Value, seed: u64, metrics: Value, trace: Option<&str>) -> StageReport {
    StageReport {
        stage: stage.into(),
        config,
        seed,
        metrics,
        lr_trace_path: trace.map(String::from),
    }
}

fn outcome_metrics(o: &StageOutcome<Real>) -> Value {
    let w = o.grid.winner_trial();
    json!({
        "winner_lr": w.lr,
        "winner_wd": w.wd,
        "winner_val_top1": w.val_metric,
        "final_train_loss": o.losses.last().copied(),
        "grid": o.grid,
    })
}

impl Runner {
    pub fn new(cfg: RunConfig, sources: Provenances) -> Self {
        Self { cfg, sources }
    }

    /// Cross-section checks that would otherwise only fail deep into a run.
    pub fn validate(&self) -> Result<()> {
        let c = &self.cfg;
        c.vq.model.validate()?;
        c.backbone.teacher.validate()?;
        c.backbone.student.validate()?;
        c.digg.mask.validate()?;
        c.digg.sampling.validate(c.vq.model.codebook_size)?;
        for s in [&c.irf.stage3, &c.irf.stage4, &c.irf.baseline, &c.distill.final_finetune] {
            s.validate_grid()?;
        }
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.cfg.output_dir
    }

    pub fn seed(&self) -> u64 {
        self.cfg.seeds.master
    }

    pub fn rng(&self, stream: &str) -> SeededRng {
        SeededRng::new(self.seed(), stream)
    }

    pub fn meta(&self, stage: &str) -> CheckpointMeta {
        CheckpointMeta::new(stage, self.seed(), self.cfg.digest())
    }

    fn dir_for(&self, stage: &str, key: &Value) -> PathBuf {
        let digest = config_digest(&json!({ "stage": stage, "key": key }));
        self.root().join(format!("{stage}-{}", &digest[..12]))
    }

    pub fn prime_key(&self) -> Value {
        let c = &self.cfg;
        json!({
            "upstream": c.data.upstream,
            "vq": c.vq,
            "lt": c.lt,
            "teacher": c.backbone.teacher,
            "pretrain": c.backbone.pretrain,
            "seed": self.seed(),
        })
    }

    pub fn prime_dir(&self) -> PathBuf {
        self.dir_for("prime", &self.prime_key())
    }

    pub fn assemble_key(&self) -> Value {
        let c = &self.cfg;
        json!({
            "prime": self.prime_key(),
            "downstream": c.data.downstream,
            "few_fraction": c.data.few_fraction,
            "stratified": c.data.stratified,
        })
    }

    pub fn assemble_dir(&self) -> PathBuf {
        self.dir_for("assemble", &self.assemble_key())
    }

    fn deliver_key(&self) -> Value {
        json!({
            "assemble": self.assemble_key(),
            "stage3": self.cfg.irf.stage3,
            "delivering_data": self.cfg.irf.delivering_data,
        })
    }

    pub fn deliver_dir(&self) -> PathBuf {
        self.dir_for("deliver", &self.deliver_key())
    }

    fn calibrate_key(&self) -> Value {
        json!({
            "deliver": self.deliver_key(),
            "stage4": self.cfg.irf.stage4,
            "calibration_data": self.cfg.irf.calibration_data,
        })
    }

    pub fn calibrate_dir(&self) -> PathBuf {
        self.dir_for("calibrate", &self.calibrate_key())
    }

    fn digg_key(&self) -> Value {
        json!({ "assemble": self.assemble_key(), "digg": self.cfg.digg })
    }

    pub fn digg_dir(&self) -> PathBuf {
        self.dir_for("digg", &self.digg_key())
    }

    fn distill_key(&self, teacher: DistillTeacher) -> Value {
        let t = match teacher {
            DistillTeacher::Pretrained => json!("pretrained"),
            DistillTeacher::Irf => self.calibrate_key(),
        };
        json!({
            "digg": self.digg_key(),
            "teacher": t,
            "student": self.cfg.backbone.student,
            "student_init": self.cfg.backbone.student_init,
            "distill": self.cfg.distill,
        })
    }

    pub fn distill_dir(&self, teacher: DistillTeacher) -> PathBuf {
        self.dir_for("distill", &self.distill_key(teacher))
    }

    fn record(&self, stage: &str, dir: &Path, files: &[&str], reused: bool) -> Result<()> {
        let path = self.root().join(ARTIFACTS_FILE);
        let mut m: ArtifactManifest = if path.exists() { read_json(&path)? } else { ArtifactManifest::default() };
        m.config_digest = self.cfg.digest();
        m.precedence = "flags > config file > defaults".into();
        m.config_file = self.sources.config_file.clone();
        m.overrides = self.sources.overrides.clone();
        m.stages.push(StageEntry {
            stage: stage.into(),
            dir: dir.to_path_buf(),
            files: files.iter().map(|f| f.to_string()).collect(),
            reused,
        });
        write_json(&path, &m)?;
        fs::write(self.root().join("config.toml"), self.cfg.to_toml()).map_err(|e| Error::io(self.root(), e))
    }

    fn complete(dir: &Path, files: &[&str]) -> bool {
        files.iter().all(|f| dir.join(f).exists())
    }

    /// Stage 1: tokenizer, latent transformer and teacher backbone, all
    /// trained on the upstream data. Reused when already present.
    pub fn prime(&self) -> Result<PathBuf> {
        self.validate()?;
        const FILES: [&str; 4] = ["vq.ckpt", "lt.ckpt", "teacher.ckpt", REPORT_FILE];
        let dir = self.prime_dir();
        if Self::complete(&dir, &FILES) {
            self.record("prime", &dir, &FILES, true)?;
            return Ok(dir);
        }
        let up = load_dataset_dir::<Real>(&self.cfg.data.upstream).map_err(|e| e.in_stage("prime"))?;
        let c = &self.cfg;
        let vq = train_vq(&up, &c.vq.model, &c.vq.train, &self.rng("vq")).map_err(|e| e.in_stage("prime/vq"))?;
        let tokens = tokenize_dataset(&up, &vq.model)?;
        let lt = train_lt::<Real>(&tokens, c.vq.model.codebook_size, &c.lt.model, &c.lt.train, &self.rng("lt"))
            .map_err(|e| e.in_stage("prime/lt"))?;
        let teacher = pretrain_backbone(&up, &c.backbone.teacher, &c.backbone.pretrain, &self.rng("teacher"))
            .map_err(|e| e.in_stage("prime/teacher"))?;
        save_checkpoint(&vq.model.to_checkpoint(self.meta("prime/vq")), &dir.join("vq.ckpt"))?;
        save_checkpoint(&lt.model.to_checkpoint(self.meta("prime/lt")), &dir.join("lt.ckpt"))?;
        save_checkpoint(&teacher.model.to_checkpoint(self.meta("prime/teacher")), &dir.join("teacher.ckpt"))?;
        write_json(&dir.join("teacher_lr_trace.json"), &teacher.lr_trace)?;
        let metrics = json!({
            "vq_final_loss": vq.losses.last().map(|l| l.total),
            "vq_reseeded": vq.reseeded,
            "lt_final_loss": lt.losses.last(),
            "teacher_final_loss": teacher.losses.last(),
            "upstream_records": up.len(),
        });
        write_json(
            &dir.join(REPORT_FILE),
            &stage_report("prime", self.prime_key(), self.seed(), metrics, Some("teacher_lr_trace.json")),
        )?;
        self.record("prime", &dir, &FILES, false)?;
        Ok(dir)
    }

    pub fn load_prime(&self) -> Result<PrimeArtifacts> {
        let dir = self.prime_dir();
        if !dir.join("teacher.ckpt").exists() {
            return Err(Error::Validation(format!(
                "no stage-1 artifacts at {}; run `prime` first",
                dir.display()
            )));
        }
        Ok(PrimeArtifacts {
            vq: VqModel::from_checkpoint(&load_checkpoint(&dir.join("vq.ckpt"))?)?,
            lt: LatentTransformer::from_checkpoint(&load_checkpoint(&dir.join("lt.ckpt"))?)?,
            teacher: TaskModel::from_checkpoint(&load_checkpoint(&dir.join("teacher.ckpt"))?)?,
        })
    }

    /// Stage 2: sample the few-shot split and re-represent it.
    pub fn assemble(&self) -> Result<PathBuf> {
        const FILES: [&str; 3] = ["few/manifest.tsv", "rerep/manifest.tsv", REPORT_FILE];
        let dir = self.assemble_dir();
        if Self::complete(&dir, &FILES) {
            self.record("assemble", &dir, &FILES, true)?;
            return Ok(dir);
        }
        let prime = self.load_prime()?;
        let down = load_dataset_dir::<Real>(&self.cfg.data.downstream).map_err(|e| e.in_stage("assemble"))?;
        let few = sample_few_data(&down, self.cfg.data.few_fraction, &mut self.rng("few"), self.cfg.data.stratified)?;
        let rerep = rerepresent(&few, &prime.vq).map_err(|e| e.in_stage("assemble"))?;
        save_dataset(&few, &dir.join("few"))?;
        save_dataset(&rerep, &dir.join("rerep"))?;
        let metrics = json!({ "downstream_records": down.len(), "few_records": few.len() });
        write_json(&dir.join(REPORT_FILE), &stage_report("assemble", self.assemble_key(), self.seed(), metrics, None))?;
        self.record("assemble", &dir, &FILES, false)?;
        Ok(dir)
    }

    fn few(&self) -> Result<DatasetManifest<Real>> {
        let dir = self.assemble_dir();
        if !dir.join("few/manifest.tsv").exists() {
            return Err(Error::Validation(format!("no assembled data at {}; run `assemble` first", dir.display())));
        }
        load_dataset_dir(&dir.join("few"))
    }

    fn rerep(&self) -> Result<DatasetManifest<Real>> {
        load_dataset_dir(&self.assemble_dir().join("rerep"))
    }

    fn pick(&self, choice: DataChoice) -> Result<DatasetManifest<Real>> {
        match choice {
            DataChoice::Original => self.few(),
            DataChoice::Rerep => self.rerep(),
        }
    }

    fn test_set(&self) -> Result<DatasetManifest<Real>> {
        load_dataset_dir(&self.cfg.data.downstream_test)
    }

    fn save_stage(&self, stage: &str, dir: &Path, key: Value, o: &StageOutcome<Real>, extra: Value) -> Result<()> {
        let ckpt = format!("{stage}.ckpt");
        save_checkpoint(&o.model.to_checkpoint(self.meta(stage)), &dir.join(&ckpt))?;
        write_json(&dir.join("lr_trace.json"), &o.lr_trace)?;
        let mut metrics = outcome_metrics(o);
        if let (Value::Object(m), Value::Object(e)) = (&mut metrics, extra) {
            m.extend(e);
        }
        write_json(&dir.join(REPORT_FILE), &stage_report(stage, key, self.seed(), metrics, Some("lr_trace.json")))?;
        self.record(stage, dir, &[&ckpt, "lr_trace.json", REPORT_FILE], false)
    }

    /// Stage 3 on the configured delivering data.
    pub fn deliver(&self) -> Result<PathBuf> {
        let prime = self.load_prime()?;
        let choice = self.cfg.irf.delivering_data;
        let data = self.pick(choice)?;
        let base = self.rng("irf");
        let model = TaskModel::with_backbone(prime.teacher.backbone, data.num_classes(), &mut base.derive("head"))?;
        let out = stage3_deliver(&model, &data, &self.cfg.irf.stage3, &base.derive("deliver"), choice)
            .map_err(|e| e.in_stage("deliver"))?;
        let dir = self.deliver_dir();
        self.save_stage("deliver", &dir, self.deliver_key(), &out, json!({ "delivering_data": choice }))?;
        Ok(dir)
    }

    /// Stage 4 from the stage-3 checkpoint.
    pub fn calibrate(&self) -> Result<PathBuf> {
        let src = self.deliver_dir().join("deliver.ckpt");
        if !src.exists() {
            return Err(Error::Validation(format!("no stage-3 checkpoint at {}; run `deliver` first", src.display())));
        }
        let model = TaskModel::from_checkpoint(&load_checkpoint(&src)?)?;
        let choice = self.cfg.irf.calibration_data;
        let data = self.pick(choice)?;
        let out = stage4_calibrate(&model, &data, &self.cfg.irf.stage4, &self.rng("irf").derive("calibrate"), choice)
            .map_err(|e| e.in_stage("calibrate"))?;
        let mut extra = json!({ "calibration_data": choice });
        if let Ok(test) = self.test_set() {
            extra["test_top1"] = json!(top1_accuracy(&out.model, &test, &self.cfg.irf.stage4.input_pipeline)?);
        }
        let dir = self.calibrate_dir();
        self.save_stage("calibrate", &dir, self.calibrate_key(), &out, extra)?;
        Ok(dir)
    }

    /// Stages 2 to 4 in one go, equivalent to `assemble`, `deliver`,
    /// `calibrate` in sequence.
    pub fn irf(&self) -> Result<PathBuf> {
        self.assemble()?;
        let prime = self.load_prime()?;
        let few = self.few()?;
        let out = run_irf(&prime.teacher.backbone, &few, &prime.vq, &self.cfg.irf, &self.rng("irf"))?;
        let dir = self.dir_for("irf", &self.calibrate_key());
        save_checkpoint(&prime.vq.to_checkpoint(self.meta("irf/tokenizer")), &dir.join("tokenizer.ckpt"))?;
        save_checkpoint(&out.stage3.model.to_checkpoint(self.meta("deliver")), &dir.join("deliver.ckpt"))?;
        save_checkpoint(&out.stage4.model.to_checkpoint(self.meta("calibrate")), &dir.join("calibrate.ckpt"))?;
        write_json(&dir.join("lr_trace_deliver.json"), &out.stage3.lr_trace)?;
        write_json(&dir.join("lr_trace_calibrate.json"), &out.stage4.lr_trace)?;
        let mut metrics = json!({
            "deliver": outcome_metrics(&out.stage3),
            "calibrate": outcome_metrics(&out.stage4),
            "delivering_data": self.cfg.irf.delivering_data,
            "calibration_data": self.cfg.irf.calibration_data,
        });
        if let Ok(test) = self.test_set() {
            metrics["test_top1"] = json!(top1_accuracy(&out.stage4.model, &test, &self.cfg.irf.stage4.input_pipeline)?);
        }
        write_json(
            &dir.join(REPORT_FILE),
            &stage_report("irf", self.calibrate_key(), self.seed(), metrics, Some("lr_trace_calibrate.json")),
        )?;
        self.record(
            "irf",
            &dir,
            &["tokenizer.ckpt", "deliver.ckpt", "calibrate.ckpt", "lr_trace_deliver.json", "lr_trace_calibrate.json", REPORT_FILE],
            false,
        )?;
        Ok(dir)
    }

    fn student_backbone(&self, prime: &PrimeArtifacts) -> Result<Backbone<Real>> {
        use crate::config::StudentInit;
        match self.cfg.backbone.student_init {
            StudentInit::Random => Backbone::new(self.cfg.backbone.student.clone(), &mut self.rng("student")),
            StudentInit::Pretrained => {
                if self.cfg.backbone.student != prime.teacher.backbone.config {
                    return Err(Error::Config(
                        "pretrained student init needs the student architecture to match the teacher".into(),
                    ));
                }
                Ok(prime.teacher.backbone.clone())
            }
        }
    }

    /// Linear-probe or fine-tune baseline on the few-shot data.
    pub fn baseline(&self, method: BaselineMethod, backbone: BaselineBackbone) -> Result<PathBuf> {
        let prime = self.load_prime()?;
        let few = self.few()?;
        let bb = match backbone {
            BaselineBackbone::Teacher => prime.teacher.backbone.clone(),
            BaselineBackbone::Student => self.student_backbone(&prime)?,
        };
        let cfg = &self.cfg.irf.baseline;
        let rng = self.rng("baseline");
        let out = match method {
            BaselineMethod::LinearProbe => linear_probe(&bb, &few, cfg, &rng)?,
            BaselineMethod::Finetune => finetune(&bb, &few, cfg, &rng)?,
        };
        let test = self.test_set()?;
        let w = out.grid.winner_trial();
        let report = BaselineReport {
            method: method.as_str().into(),
            dataset: dataset_name(&self.cfg.data.downstream),
            top1: top1_accuracy(&out.model, &test, &cfg.input_pipeline)?,
            winner_lr: w.lr,
            winner_wd: w.wd,
        };
        let key = json!({
            "assemble": self.assemble_key(),
            "baseline": cfg,
            "method": method.as_str(),
            "backbone": backbone.as_str(),
            "student": self.cfg.backbone.student,
        });
        let dir = self.dir_for(&format!("baseline_{}_{}", method.as_str(), backbone.as_str()), &key);
        save_checkpoint(&out.model.to_checkpoint(self.meta("baseline")), &dir.join("model.ckpt"))?;
        write_json(&dir.join("lr_trace.json"), &out.lr_trace)?;
        write_json(&dir.join(REPORT_FILE), &json!({ "kind": "baseline", "backbone": backbone.as_str(), "report": report }))?;
        self.record("baseline", &dir, &["model.ckpt", "lr_trace.json", REPORT_FILE], false)?;
        Ok(dir)
    }

    /// Pseudo-image corpus from the few-shot data.
    pub fn digg(&self) -> Result<PathBuf> {
        const FILES: [&str; 4] = ["corpus/manifest.tsv", "lineage.json", "contact_sheet.png", REPORT_FILE];
        let dir = self.digg_dir();
        if Self::complete(&dir, &FILES) {
            self.record("digg", &dir, &FILES, true)?;
            return Ok(dir);
        }
        let prime = self.load_prime()?;
        let few = self.few()?;
        let g = &self.cfg.digg;
        let set = build_distill_set(&few, g.target_count, &prime.vq, &prime.lt, &g.mask, &g.sampling, &self.rng("digg"))
            .map_err(|e| e.in_stage("digg"))?;
        save_dataset(&set.manifest, &dir.join("corpus"))?;
        write_json(&dir.join("lineage.json"), &set.lineage)?;
        write_sheet(&few, &set, g.sheet_rows, g.sheet_variants, &dir.join("contact_sheet.png"))?;
        let metrics = json!({
            "count": set.manifest.len(),
            "sources": few.len(),
            "lineage_holds": set.lineage.iter().all(|l| l.holds()),
        });
        write_json(&dir.join(REPORT_FILE), &stage_report("digg", self.digg_key(), self.seed(), metrics, None))?;
        self.record("digg", &dir, &FILES, false)?;
        Ok(dir)
    }

    fn teacher_backbone(&self, teacher: DistillTeacher, prime: &PrimeArtifacts) -> Result<Backbone<Real>> {
        match teacher {
            DistillTeacher::Pretrained => Ok(prime.teacher.backbone.clone()),
            DistillTeacher::Irf => {
                let p = self.calibrate_dir().join("calibrate.ckpt");
                if !p.exists() {
                    return Err(Error::Validation(format!(
                        "no calibrated teacher at {}; run `deliver` and `calibrate` first",
                        p.display()
                    )));
                }
                Ok(TaskModel::<Real>::from_checkpoint(&load_checkpoint(&p)?)?.backbone)
            }
        }
    }

    /// Feature distillation on the pseudo corpus.
    pub fn distill(&self, teacher: DistillTeacher) -> Result<PathBuf> {
        let prime = self.load_prime()?;
        let corpus_dir = self.digg_dir().join("corpus");
        if !corpus_dir.join("manifest.tsv").exists() {
            return Err(Error::Validation(format!("no corpus at {}; run `digg` first", corpus_dir.display())));
        }
        let corpus = load_dataset_dir::<Real>(&corpus_dir)?;
        let t = self.teacher_backbone(teacher, &prime)?;
        let student = TaskModel::with_backbone(self.student_backbone(&prime)?, corpus.num_classes(), &mut self.rng("student_head"))?;
        let out: DistillOutcome<Real> = distill(&t, &student, &corpus, &self.cfg.distill, &self.rng("distill"))
            .map_err(|e| e.in_stage("distill"))?;
        let dir = self.distill_dir(teacher);
        save_checkpoint(&out.student.to_checkpoint(self.meta("distill")), &dir.join("student.ckpt"))?;
        save_checkpoint(
            &Checkpoint::from_module(&out.adapter, "", self.meta("distill/adapter")),
            &dir.join("adapter.ckpt"),
        )?;
        let metrics = json!({
            "epoch_losses": out.epoch_losses,
            "teacher": teacher.as_str(),
            "teacher_checksum": out.teacher_checksum,
            "adapter_identity": out.adapter.is_identity(),
        });
        write_json(&dir.join(REPORT_FILE), &stage_report("distill", self.distill_key(teacher), self.seed(), metrics, None))?;
        self.record("distill", &dir, &["student.ckpt", "adapter.ckpt", REPORT_FILE], false)?;
        Ok(dir)
    }

    /// Final fine-tune of a distilled student on the original few-shot data.
    pub fn finetune(&self, teacher: DistillTeacher) -> Result<PathBuf> {
        let src = self.distill_dir(teacher).join("student.ckpt");
        if !src.exists() {
            return Err(Error::Validation(format!("no distilled student at {}; run `distill` first", src.display())));
        }
        let student = TaskModel::<Real>::from_checkpoint(&load_checkpoint(&src)?)?;
        let few = self.few()?;
        let out = final_finetune(&student.backbone, &few, &self.cfg.distill, &self.rng("final_finetune"))
            .map_err(|e| e.in_stage("final_finetune"))?;
        let dir = self.dir_for("finetune", &json!({ "distill": self.distill_key(teacher) }));
        let top1 = match self.test_set() {
            Ok(test) => Some(top1_accuracy(&out.model, &test, &self.cfg.distill.final_finetune.input_pipeline)?),
            Err(_) => None,
        };
        let prime = self.load_prime()?;
        let extra = json!({
            "teacher": describe(&prime.teacher.backbone),
            "student": describe(&student.backbone),
            "order": match teacher {
                DistillTeacher::Irf => "irf_then_digg",
                DistillTeacher::Pretrained => "digg_only",
            },
            "top1": top1,
        });
        self.save_stage("finetune", &dir, json!({ "distill": self.distill_key(teacher) }), &out, extra)?;
        Ok(dir)
    }

    pub fn ota_dir(&self, order: OtaOrder) -> PathBuf {
        let key = json!({
            "assemble": self.assemble_key(),
            "irf": self.cfg.irf,
            "digg": self.cfg.digg,
            "distill": self.cfg.distill,
            "student": self.cfg.backbone.student,
            "student_init": self.cfg.backbone.student_init,
            "order": order,
        });
        self.dir_for(&format!("ota_{}", order.as_str()), &key)
    }

    /// The full pipeline in one order; the report lands in
    /// `<ota dir>/report.json`.
    pub fn ota(&self, order: OtaOrder) -> Result<(PathBuf, OtaReport)> {
        self.validate()?;
        self.prime()?;
        self.assemble()?;
        let prime = self.load_prime()?;
        let few = self.few()?;
        let test = self.test_set()?;
        let up = Upstream {
            vq: &prime.vq,
            lt: &prime.lt,
            teacher: &prime.teacher.backbone,
        };
        let name = dataset_name(&self.cfg.data.downstream);
        let settings = OtaSettings {
            irf: &self.cfg.irf,
            digg: &self.cfg.digg,
            distill: &self.cfg.distill,
            student: &self.cfg.backbone.student,
            student_init: self.cfg.backbone.student_init,
            dataset_name: &name,
            config_digest: self.cfg.digest(),
        };
        let out = run_ota(order, &up, &few, &test, &settings, &self.rng("ota"))?;
        let dir = self.ota_dir(order);
        save_checkpoint(&out.model.to_checkpoint(self.meta(&format!("ota/{}", order.as_str()))), &dir.join("model.ckpt"))?;
        write_json(&dir.join(REPORT_FILE), &json!({ "kind": "ota", "report": out.report }))?;
        self.record(&format!("ota_{}", order.as_str()), &dir, &["model.ckpt", REPORT_FILE], false)?;
        Ok((dir, out.report))
    }

    /// Domain-gap comparison: upstream features against original and
    /// re-represented downstream features, all from the teacher backbone.
    pub fn fdscore(&self) -> Result<(PathBuf, FdTriple)> {
        self.prime()?;
        let prime = self.load_prime()?;
        let up = load_dataset_dir::<Real>(&self.cfg.data.upstream)?;
        let down = load_dataset_dir::<Real>(&self.cfg.data.downstream)?;
        let rerep = rerepresent(&down, &prime.vq)?;
        let pipe = &self.cfg.irf.stage4.input_pipeline;
        let id = format!("teacher:{}", self.prime_dir().file_name().unwrap().to_string_lossy());
        let fa = extract_features(&prime.teacher.backbone, &up, pipe, &id)?;
        let fb = extract_features(&prime.teacher.backbone, &down, pipe, &id)?;
        let fr = extract_features(&prime.teacher.backbone, &rerep, pipe, &id)?;
        let eps = self.cfg.metrics.fd_eps;
        let triple = FdTriple {
            extractor_id: id,
            original: fd_score(&fa, &fb, eps)?,
            rerepresented: fd_score(&fa, &fr, eps)?,
        };
        let dir = self.dir_for("fdscore", &json!({ "prime": self.prime_key(), "downstream": self.cfg.data.downstream }));
        save_features(&fa, &dir.join("upstream.features"), self.meta("fdscore"))?;
        save_features(&fb, &dir.join("downstream.features"), self.meta("fdscore"))?;
        save_features(&fr, &dir.join("rerep.features"), self.meta("fdscore"))?;
        write_json(&dir.join(REPORT_FILE), &json!({ "kind": "fd", "report": triple }))?;
        fd_bar_chart(&[triple.original.value, triple.rerepresented.value], &dir.join("fd.png"))?;
        self.record(
            "fdscore",
            &dir,
            &["upstream.features", "downstream.features", "rerep.features", REPORT_FILE, "fd.png"],
            false,
        )?;
        Ok((dir, triple))
    }

    /// Frechet distance between two stored feature files.
    pub fn fd_files(&self, a: &Path, b: &Path) -> Result<(PathBuf, FdResult)> {
        let fa = load_features(a)?;
        let fb = load_features(b)?;
        let r = fd_score(&fa, &fb, self.cfg.metrics.fd_eps)?;
        let key = json!({
            "a": file_digest(a)?,
            "b": file_digest(b)?,
            "eps": self.cfg.metrics.fd_eps,
        });
        let dir = self.dir_for("fdscore_files", &key);
        let report = json!({
            "kind": "fd_pair",
            "a": a,
            "b": b,
            "extractor_a": fa.extractor_id,
            "extractor_b": fb.extractor_id,
            "report": r,
        });
        write_json(&dir.join(REPORT_FILE), &report)?;
        self.record("fdscore", &dir, &[REPORT_FILE], false)?;
        Ok((dir, r))
    }

    /// Top-1 of a stored task checkpoint on a labeled dataset.
    pub fn eval(&self, checkpoint: &Path, data: &Path) -> Result<(PathBuf, f64)> {
        let model = TaskModel::<Real>::from_checkpoint(&load_checkpoint(checkpoint)?)?;
        let d = load_dataset_dir::<Real>(data)?;
        let pipe = &self.cfg.irf.stage4.input_pipeline;
        let top1 = top1_accuracy(&model, &d, pipe)?;
        let key = json!({ "checkpoint": file_digest(checkpoint)?, "data": data, "pipeline": pipe });
        let dir = self.dir_for("eval", &key);
        let report = json!({
            "kind": "eval",
            "checkpoint": checkpoint,
            "data": data,
            "records": d.len(),
            "top1": top1,
        });
        write_json(&dir.join(REPORT_FILE), &report)?;
        self.record("eval", &dir, &[REPORT_FILE], false)?;
        Ok((dir, top1))
    }

    /// Rebuild tables and figures from stored reports only.
    pub fn report(&self) -> Result<Vec<PathBuf>> {
        let mut rows: Vec<ComparisonRow> = Vec::new();
        let mut written = Vec::new();
        fs::create_dir_all(self.root()).map_err(|e| Error::io(self.root(), e))?;
        let entries = match fs::read_dir(self.root()) {
            Ok(e) => e,
            Err(e) => return Err(Error::io(self.root(), e)),
        };
        let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
        dirs.sort();
        fn row<'a>(rows: &'a mut Vec<ComparisonRow>, name: &str) -> &'a mut ComparisonRow {
            if let Some(i) = rows.iter().position(|r| r.dataset == name) {
                return &mut rows[i];
            }
            rows.push(ComparisonRow {
                dataset: name.into(),
                baseline: None,
                irf_then_digg: None,
                digg_then_irf: None,
            });
            rows.last_mut().unwrap()
        }
        for d in &dirs {
            let p = d.join(REPORT_FILE);
            if !p.exists() {
                continue;
            }
            let v: Value = read_json(&p)?;
            match v.get("kind").and_then(Value::as_str) {
                Some("ota") => {
                    let r: OtaReport = serde_json::from_value(v["report"].clone())
                        .map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
                    let slot = row(&mut rows, &r.dataset);
                    match r.order {
                        OtaOrder::IrfThenDigg => slot.irf_then_digg = Some(r.top1),
                        OtaOrder::DiggThenIrf => slot.digg_then_irf = Some(r.top1),
                    }
                }
                Some("baseline") if v["backbone"] == "student" => {
                    let r: BaselineReport = serde_json::from_value(v["report"].clone())
                        .map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
                    if r.method == BaselineMethod::Finetune.as_str() {
                        row(&mut rows, &r.dataset).baseline = Some(r.top1);
                    }
                }
                Some("fd") => {
                    let t: FdTriple = serde_json::from_value(v["report"].clone())
                        .map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
                    let png = d.join("fd.png");
                    fd_bar_chart(&[t.original.value, t.rerepresented.value], &png)?;
                    written.push(png);
                }
                _ => {}
            }
        }
        let tsv = self.root().join("order_comparison.tsv");
        fs::write(&tsv, comparison_tsv(&rows)).map_err(|e| Error::io(&tsv, e))?;
        written.push(tsv);
        let names: Vec<String> = written
            .iter()
            .map(|p| p.strip_prefix(self.root()).unwrap_or(p).to_string_lossy().into_owned())
            .collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        self.record("report", self.root(), &refs, false)?;
        Ok(written)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdTriple {
    pub extractor_id: String,
    /// Upstream vs original downstream.
    pub original: FdResult,
    /// Upstream vs re-represented downstream.
    pub rerepresented: FdResult,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistillTeacher {
    Pretrained,
    Irf,
}

impl DistillTeacher {
    pub fn as_str(self) -> &'static str {
        match self {
            DistillTeacher::Pretrained => "pretrained",
            DistillTeacher::Irf => "irf",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineMethod {
    LinearProbe,
    Finetune,
}

impl BaselineMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            BaselineMethod::LinearProbe => "linear_probe",
            BaselineMethod::Finetune => "finetune",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineBackbone {
    Teacher,
    Student,
}

impl BaselineBackbone {
    pub fn as_str(self) -> &'static str {
        match self {
            BaselineBackbone::Teacher => "teacher",
            BaselineBackbone::Student => "student",
        }
    }
}

fn file_digest(p: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn describe(b: &Backbone<Real>) -> String {
    let w: Vec<String> = b.config.widths.iter().map(|w| w.to_string()).collect();
    format!("cnn[{}]", w.join("-"))
}

fn dataset_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into())
}

fn write_sheet(few: &DatasetManifest<Real>, set: &DistillSet<Real>, rows: usize, cols: usize, path: &Path) -> Result<()> {
    let n = few.len();
    let sheet: Vec<(Tensor<Real>, Vec<Tensor<Real>>)> = few
        .records()
        .iter()
        .take(rows.max(1))
        .enumerate()
        .map(|(i, r)| {
            let variants = (0..cols)
                .map(|v| i + v * n)
                .take_while(|&j| j < set.manifest.len())
                .map(|j| set.manifest.records()[j].pixels.clone())
                .collect();
            (r.pixels.clone(), variants)
        })
        .collect();
    contact_sheet(&sheet, path)
}
