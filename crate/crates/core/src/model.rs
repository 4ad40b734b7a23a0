//! Small CNN backbones and the task model (backbone + linear head).

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::InputPipeline;
use crate::data::{crop, resize_bilinear, to_nchw, DatasetManifest};
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, Layer, Linear, Params, Sequential};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnConfig {
    pub in_channels: usize,
    /// One 3x3 conv + ReLU per entry; every entry after the first uses
    /// stride 2.
    pub widths: Vec<usize>,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self::teacher()
    }
}

impl CnnConfig {
    pub fn teacher() -> Self {
        Self {
            in_channels: 3,
            widths: vec![16, 32, 64],
        }
    }

    pub fn student() -> Self {
        Self {
            in_channels: 3,
            widths: vec![8, 16, 32],
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.widths.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) || self.in_channels == 0 {
            return Err(Error::Config("backbone widths must be non-empty and positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    AllTrainable,
    BackboneFrozen,
}

/// Conv stack followed by global average pooling.
#[derive(Clone, Debug)]
pub struct Backbone<S> {
    pub config: CnnConfig,
    pub convs: Sequential<S>,
}

pub struct BackboneCache<S> {
    inputs: Vec<Tensor<S>>,
    pre_pool: [usize; 4],
}

impl<S: Scalar> Params<S> for Backbone<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        self.convs.visit(&nn::join(prefix, "convs"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        self.convs.visit_mut(&nn::join(prefix, "convs"), f);
    }
}

impl<S: Scalar> Backbone<S> {
    pub fn new(config: CnnConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::new();
        let mut prev = config.in_channels;
        for (i, &w) in config.widths.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            layers.push(Layer::Conv(Conv2d::new(prev, w, 3, stride, 1, rng)));
            layers.push(Layer::Relu);
            prev = w;
        }
        Ok(Self {
            config,
            convs: Sequential::new(layers),
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    fn pool(y: &Tensor<S>) -> Tensor<S> {
        let [n, c, h, w] = nn_dims(y);
        let inv = S::lit(1.0 / (h * w) as f64);
        Tensor::from_fn(&[n, c], |i| y.data()[i * h * w..(i + 1) * h * w].iter().copied().sum::<S>() * inv)
    }

    /// Pooled features `[N, F]` of an NCHW batch.
    pub fn features(&self, x: &Tensor<S>) -> Tensor<S> {
        Self::pool(&self.convs.forward(x))
    }

    pub fn features_cached(&self, x: &Tensor<S>) -> (Tensor<S>, BackboneCache<S>) {
        let (y, inputs) = self.convs.forward_cached(x);
        let pre_pool = nn_dims(&y);
        (Self::pool(&y), BackboneCache { inputs, pre_pool })
    }

    /// Accumulate parameter gradients for `dfeat = dL/dfeatures`.
    pub fn backward(&self, cache: &BackboneCache<S>, dfeat: &Tensor<S>, grad: &mut Self) {
        let [n, c, h, w] = cache.pre_pool;
        let inv = S::lit(1.0 / (h * w) as f64);
        let dy = Tensor::from_fn(&[n, c, h, w], |i| dfeat.data()[i / (h * w)] * inv);
        self.convs.backward(&cache.inputs, dy, &mut grad.convs, false);
    }
}

fn nn_dims<S: Scalar>(t: &Tensor<S>) -> [usize; 4] {
    let s = t.shape();
    [s[0], s[1], s[2], s[3]]
}

#[derive(Clone, Debug)]
pub struct TaskModel<S> {
    pub backbone: Backbone<S>,
    pub head: Linear<S>,
    pub freeze: FreezePolicy,
}

impl<S: Scalar> Params<S> for TaskModel<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        self.backbone.visit(&nn::join(prefix, "backbone"), f);
        self.head.visit(&nn::join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        self.backbone.visit_mut(&nn::join(prefix, "backbone"), f);
        self.head.visit_mut(&nn::join(prefix, "head"), f);
    }
}

impl<S: Scalar> TaskModel<S> {
    pub fn new(config: CnnConfig, num_classes: usize, rng: &mut SeededRng) -> Result<Self> {
        let backbone = Backbone::new(config, rng)?;
        Self::with_backbone(backbone, num_classes, rng)
    }

    /// Attach a freshly initialised head for `num_classes` outputs.
    pub fn with_backbone(backbone: Backbone<S>, num_classes: usize, rng: &mut SeededRng) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Validation("num_classes must be >= 1".into()));
        }
        let head = Linear::new(backbone.feature_dim(), num_classes, rng);
        Ok(Self {
            backbone,
            head,
            freeze: FreezePolicy::AllTrainable,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.head.outputs()
    }

    pub fn logits(&self, x: &Tensor<S>) -> Tensor<S> {
        self.head.forward(&self.backbone.features(x))
    }

    /// Mean softmax cross-entropy on a batch and gradients of the trainable
    /// parameters (backbone gradients stay zero when frozen).
    pub fn loss_and_grads(&self, x: &Tensor<S>, labels: &[usize]) -> (f64, Self) {
        let mut grad = nn::zeros_like(self);
        let frozen = self.freeze == FreezePolicy::BackboneFrozen;
        let (feat, cache) = if frozen {
            (self.backbone.features(x), None)
        } else {
            let (f, c) = self.backbone.features_cached(x);
            (f, Some(c))
        };
        let logits = self.head.forward(&feat);
        let (n, k) = (logits.shape()[0], logits.shape()[1]);
        let inv = S::lit(1.0 / n as f64);
        let mut dlogits = Tensor::zeros(&[n, k]);
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = logits.row(i);
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let z: S = row.iter().map(|&v| (v - m).exp()).sum();
            loss += (z.ln() + m - row[y]).to_f64_lossy();
            for j in 0..k {
                let p = (row[j] - m).exp() / z;
                let t = if j == y { S::one() } else { S::zero() };
                dlogits.data_mut()[i * k + j] = (p - t) * inv;
            }
        }
        let dfeat = self.head.backward(&feat, &dlogits, &mut grad.head);
        if let Some(c) = cache {
            self.backbone.backward(&c, &dfeat, &mut grad.backbone);
        }
        (loss / n as f64, grad)
    }

    pub fn to_checkpoint(&self, meta: CheckpointMeta) -> Checkpoint {
        let meta = meta.with_extra(serde_json::json!({
            "cnn": self.backbone.config,
            "num_classes": self.num_classes(),
            "freeze": self.freeze,
        }));
        Checkpoint::from_module(self, "", meta)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let extra = &c.meta.extra;
        let config: CnnConfig = serde_json::from_value(extra["cnn"].clone())
            .map_err(|e| Error::Format(format!("backbone config in checkpoint: {e}")))?;
        let classes = extra["num_classes"]
            .as_u64()
            .ok_or_else(|| Error::Format("missing num_classes".into()))? as usize;
        let freeze = serde_json::from_value(extra["freeze"].clone()).unwrap_or(FreezePolicy::AllTrainable);
        let mut m = Self::new(config, classes, &mut SeededRng::new(0, "task-shell"))?;
        m.freeze = freeze;
        c.load_into(&mut m, "")?;
        Ok(m)
    }
}

/// Resize / crop policy shared by training, evaluation and feature
/// extraction.
#[derive(Clone, Debug)]
pub struct Preprocess<S> {
    pipeline: InputPipeline,
    resized: Vec<Tensor<S>>,
}

impl<S: Scalar> Preprocess<S> {
    /// Resize every record of `d` once; crops are taken per batch.
    pub fn new(d: &DatasetManifest<S>, pipeline: &InputPipeline) -> Result<Self> {
        if pipeline.crop == 0 || pipeline.crop > pipeline.resize {
            return Err(Error::Config(format!(
                "crop {} must be in 1..={}",
                pipeline.crop, pipeline.resize
            )));
        }
        let r = pipeline.resize;
        let resized = d
            .records()
            .iter()
            .map(|rec| {
                let s = rec.pixels.shape();
                if s[0] == r && s[1] == r {
                    rec.pixels.clone()
                } else {
                    resize_bilinear(&rec.pixels, r, r)
                }
            })
            .collect();
        Ok(Self {
            pipeline: pipeline.clone(),
            resized,
        })
    }

    pub fn len(&self) -> usize {
        self.resized.len()
    }

    pub fn is_empty(&self) -> bool {
        self.resized.is_empty()
    }

    /// Random square crops of the selected records, NCHW.
    pub fn train_batch(&self, indices: &[usize], rng: &mut SeededRng) -> Tensor<S> {
        let span = self.pipeline.resize - self.pipeline.crop + 1;
        let crops: Vec<Tensor<S>> = indices
            .iter()
            .map(|&i| {
                let top = rng.below(span);
                let left = rng.below(span);
                crop(&self.resized[i], top, left, self.pipeline.crop)
            })
            .collect();
        to_nchw(crops.iter())
    }

    /// Centre crops of the selected records, NCHW.
    pub fn eval_batch(&self, indices: &[usize]) -> Tensor<S> {
        let off = (self.pipeline.resize - self.pipeline.crop) / 2;
        let crops: Vec<Tensor<S>> = indices
            .iter()
            .map(|&i| crop(&self.resized[i], off, off, self.pipeline.crop))
            .collect();
        to_nchw(crops.iter())
    }
}

/// Argmax class (lowest index on ties) for every record, centre crop.
pub fn predict<S: Scalar>(model: &TaskModel<S>, pre: &Preprocess<S>) -> Vec<usize> {
    let idx: Vec<usize> = (0..pre.len()).collect();
    let mut out = Vec::with_capacity(pre.len());
    for chunk in idx.chunks(64) {
        let logits = model.logits(&pre.eval_batch(chunk));
        for i in 0..chunk.len() {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            out.push(best);
        }
    }
    out
}

/// Pooled features for every record (centre crop), `[N, F]`.
pub fn dataset_features<S: Scalar>(
    backbone: &Backbone<S>,
    d: &DatasetManifest<S>,
    pipeline: &InputPipeline,
) -> Result<Tensor<S>> {
    if d.is_empty() {
        return Err(Error::Validation("dataset is empty".into()));
    }
    let [_, _, c] = d.image_shape();
    if c != backbone.config.in_channels {
        return Err(Error::Shape {
            expected: vec![backbone.config.in_channels],
            got: vec![c],
        });
    }
    let pre = Preprocess::new(d, pipeline)?;
    let f = backbone.feature_dim();
    let mut out = Vec::with_capacity(d.len() * f);
    let idx: Vec<usize> = (0..d.len()).collect();
    for chunk in idx.chunks(64) {
        out.extend_from_slice(backbone.features(&pre.eval_batch(chunk)).data());
    }
    Tensor::new(vec![d.len(), f], out)
}
