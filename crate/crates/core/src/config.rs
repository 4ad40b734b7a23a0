//! Stage and run configuration.
//!
//! Every struct deserializes with `deny_unknown_fields` and fills missing
//! keys from its `Default`, so a config file only needs the keys it changes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::config_digest;
use crate::digg::DiggConfig;
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::irf::make_lr_grid;
use crate::model::CnnConfig;
use crate::transformer::LtConfig;
use crate::vq::VqConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdNesterov,
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::SgdNesterov,
            momentum: 0.9,
            weight_decay: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrScheduleConfig {
    /// Used when a stage trains without a grid.
    pub initial: f64,
    /// Milestones as fractions of the step count.
    pub milestones: Vec<f64>,
    pub decay: f64,
}

impl Default for LrScheduleConfig {
    fn default() -> Self {
        Self {
            initial: 0.1,
            milestones: vec![0.6, 0.9],
            decay: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputPipeline {
    /// Images are resized to `resize x resize` first.
    pub resize: usize,
    /// Side of the random square crop taken during training; evaluation
    /// takes the centre crop.
    pub crop: usize,
}

impl Default for InputPipeline {
    fn default() -> Self {
        Self { resize: 32, crop: 28 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub lr_schedule: LrScheduleConfig,
    /// Initial learning rates to search, descending.
    pub lr_grid: Vec<f64>,
    pub wd_grid: Vec<f64>,
    pub input_pipeline: InputPipeline,
    /// Held-out share of the training set used to rank grid trials.
    pub val_fraction: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::stage4()
    }
}

impl StageConfig {
    /// Frozen-backbone head training: lr in {1, 1e-1, 1e-2, 1e-3}, wd 1e-5.
    pub fn stage3() -> Self {
        Self {
            steps: 500,
            batch_size: 64,
            optimizer: OptimizerConfig::default(),
            lr_schedule: LrScheduleConfig::default(),
            lr_grid: make_lr_grid(1e-3, 1.0, 4).expect("static grid"),
            wd_grid: vec![1e-5],
            input_pipeline: InputPipeline::default(),
            val_fraction: 0.2,
        }
    }

    /// Full fine-tune: 4 lrs in [1e-5, 1e-2] by 3 wds in [1e-5, 1e-3].
    pub fn stage4() -> Self {
        Self {
            lr_grid: make_lr_grid(1e-5, 1e-2, 4).expect("static grid"),
            wd_grid: make_lr_grid(1e-5, 1e-3, 3).expect("static grid"),
            ..Self::stage3()
        }
    }

    /// Linear-probe / fine-tune baselines: stage-4 settings, doubled steps.
    pub fn baseline() -> Self {
        Self {
            steps: 1000,
            ..Self::stage4()
        }
    }

    /// Supervised upstream pretraining of the teacher backbone.
    pub fn pretrain() -> Self {
        Self {
            steps: 600,
            batch_size: 32,
            optimizer: OptimizerConfig {
                weight_decay: 1e-4,
                ..OptimizerConfig::default()
            },
            lr_schedule: LrScheduleConfig {
                initial: 0.05,
                ..LrScheduleConfig::default()
            },
            lr_grid: vec![0.05],
            wd_grid: vec![1e-4],
            input_pipeline: InputPipeline::default(),
            val_fraction: 0.0,
        }
    }

    /// Generative-model training (tokenizer and latent transformer).
    pub fn generative(steps: usize, batch_size: usize, lr: f64) -> Self {
        Self {
            steps,
            batch_size,
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Adam,
                momentum: 0.9,
                weight_decay: 0.0,
            },
            lr_schedule: LrScheduleConfig {
                initial: lr,
                milestones: vec![0.8],
                decay: 0.3,
            },
            lr_grid: vec![lr],
            wd_grid: vec![0.0],
            input_pipeline: InputPipeline::default(),
            val_fraction: 0.0,
        }
    }

    pub fn validate_grid(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be > 0".into()));
        }
        if self.lr_grid.is_empty() || self.wd_grid.is_empty() {
            return Err(Error::Config("lr_grid and wd_grid must be non-empty".into()));
        }
        if self.lr_grid.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::Config("lr_grid must be sorted descending".into()));
        }
        if self.input_pipeline.crop == 0 || self.input_pipeline.crop > self.input_pipeline.resize {
            return Err(Error::Config("crop must be in 1..=resize".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub upstream: PathBuf,
    pub downstream: PathBuf,
    pub downstream_test: PathBuf,
    pub few_fraction: f64,
    pub stratified: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            upstream: "data/upstream".into(),
            downstream: "data/downstream".into(),
            downstream_test: "data/downstream_test".into(),
            few_fraction: 0.1,
            stratified: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataChoice {
    Original,
    Rerep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentInit {
    Random,
    Pretrained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqSection {
    pub model: VqConfig,
    pub train: StageConfig,
}

impl Default for VqSection {
    fn default() -> Self {
        Self {
            model: VqConfig::default(),
            train: StageConfig::generative(1500, 16, 2e-3),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LtSection {
    pub model: LtConfig,
    pub train: StageConfig,
}

impl Default for LtSection {
    fn default() -> Self {
        Self {
            model: LtConfig::default(),
            train: StageConfig::generative(1500, 16, 1e-3),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub teacher: CnnConfig,
    pub student: CnnConfig,
    pub pretrain: StageConfig,
    pub student_init: StudentInit,
}

impl Default for BackboneSection {
    fn default() -> Self {
        Self {
            teacher: CnnConfig::teacher(),
            student: CnnConfig::student(),
            pretrain: StageConfig::pretrain(),
            student_init: StudentInit::Random,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IrfSection {
    pub stage3: StageConfig,
    pub stage4: StageConfig,
    pub baseline: StageConfig,
    /// Stage-3 data: `rerep` (default) or `original`.
    pub delivering_data: DataChoice,
    /// Stage-4 data: `original` (default) or `rerep`.
    pub calibration_data: DataChoice,
}

impl Default for IrfSection {
    fn default() -> Self {
        Self {
            stage3: StageConfig::stage3(),
            stage4: StageConfig::stage4(),
            baseline: StageConfig::baseline(),
            delivering_data: DataChoice::Rerep,
            calibration_data: DataChoice::Original,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    /// Ridge added to both covariances before the matrix square root.
    pub fd_eps: f64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self { fd_eps: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct SeedsSection {
    pub master: u64,
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub vq: VqSection,
    pub lt: LtSection,
    pub backbone: BackboneSection,
    pub irf: IrfSection,
    pub digg: DiggConfig,
    pub distill: DistillConfig,
    pub metrics: MetricsSection,
    pub seeds: SeedsSection,
    pub output_dir: PathBuf,
    /// Worker cap for grid trials and generation; 0 means all cores.
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            vq: VqSection::default(),
            lt: LtSection::default(),
            backbone: BackboneSection::default(),
            irf: IrfSection::default(),
            digg: DiggConfig::default(),
            distill: DistillConfig::default(),
            metrics: MetricsSection::default(),
            seeds: SeedsSection::default(),
            output_dir: "runs".into(),
            jobs: 0,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn digest(&self) -> String {
        config_digest(self)
    }

    /// Apply a `section.key=value` override, value parsed as TOML.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
        let mut doc: toml::Table = toml::from_str(&self.to_toml()).expect("round trip");
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .map(|mut t| t.remove("v").unwrap())
            .unwrap_or_else(|_| toml::Value::String(raw.to_string()));
        let parts: Vec<&str> = key.trim().split('.').collect();
        let mut cur = &mut doc;
        for p in &parts[..parts.len() - 1] {
            cur = cur
                .get_mut(*p)
                .and_then(|v| v.as_table_mut())
                .ok_or_else(|| Error::Config(format!("unknown config section '{p}' in '{key}'")))?;
        }
        let last = parts[parts.len() - 1];
        if !cur.contains_key(last) {
            return Err(Error::Config(format!("unknown config key '{key}'")));
        }
        cur.insert(last.to_string(), value);
        *self = toml::from_str(&toml::to_string(&doc).expect("serializes"))
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("[vq]\nbogus = 1\n").is_err());
        assert!(RunConfig::from_toml("bogus = 1\n").is_err());
    }

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(c, back);
        assert_eq!(c.digest(), back.digest());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = RunConfig::from_toml("[seeds]\nmaster = 7\n[irf.stage3]\nsteps = 10\n").unwrap();
        assert_eq!(c.seeds.master, 7);
        assert_eq!(c.irf.stage3.steps, 10);
        assert_eq!(c.irf.stage3.batch_size, 64);
        assert_ne!(c.digest(), RunConfig::default().digest());
    }

    #[test]
    fn overrides() {
        let mut c = RunConfig::default();
        c.set("irf.stage4.steps=3").unwrap();
        c.set("irf.delivering_data=original").unwrap();
        assert_eq!(c.irf.stage4.steps, 3);
        assert_eq!(c.irf.delivering_data, DataChoice::Original);
        assert!(c.set("irf.nope=1").is_err());
    }

    #[test]
    fn reference_grids() {
        let s3 = StageConfig::stage3();
        assert_eq!(s3.lr_grid.len(), 4);
        assert!((s3.lr_grid[0] - 1.0).abs() < 1e-15 && (s3.lr_grid[3] - 1e-3).abs() < 1e-15);
        let s4 = StageConfig::stage4();
        assert_eq!(s4.lr_grid.len() * s4.wd_grid.len(), 12);
        s4.validate_grid().unwrap();
    }
}
