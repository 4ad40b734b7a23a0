//! Vector-quantized image tokenizer: convolutional encoder, codebook and
//! decoder, trained with a straight-through estimator.
//!
//! Training loss per batch (each term a mean over its elements):
//!
//! ```text
//! lambda_rec * |x - D(z_q)|^2  +  |sg[E(x)] - z_q|^2  +  beta * |E(x) - sg[z_q]|^2
//! ```
//!
//! The decoder consumes `z_q`; the gradient arriving at `z_q` is copied to the
//! encoder output unchanged, then the commitment gradient is added.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::{OptimizerKind, StageConfig};
use crate::data::{from_nchw, to_nchw, DatasetManifest, ImageRecord, Provenance};
use crate::error::{Error, Result};
use crate::nn::{self, Adam, Conv2d, Layer, MultiStepLr, Params, Sequential, Sgd};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversarialConfig {
    pub enabled: bool,
    pub weight: f64,
    /// Generator steps before the discriminator loss switches on.
    pub start_step: usize,
    pub disc_lr: f64,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            weight: 0.1,
            start_step: 500,
            disc_lr: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqConfig {
    pub image_size: usize,
    pub channels: usize,
    /// Hidden channel width of encoder and decoder.
    pub width: usize,
    /// Number of stride-2 stages; total stride is `2^downsample`.
    pub downsample: usize,
    pub n_z: usize,
    pub codebook_size: usize,
    pub beta_commit: f64,
    pub lambda_rec: f64,
    /// Re-seed codebook entries unused for a whole epoch.
    pub dead_code_reseed: bool,
    pub adversarial: AdversarialConfig,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            width: 32,
            downsample: 2,
            n_z: 16,
            codebook_size: 256,
            beta_commit: 0.25,
            lambda_rec: 1.0,
            dead_code_reseed: true,
            adversarial: AdversarialConfig::default(),
        }
    }
}

impl VqConfig {
    pub fn stride(&self) -> usize {
        1 << self.downsample
    }

    /// Token grid side `h = w = image_size / stride`.
    pub fn grid_size(&self) -> usize {
        self.image_size / self.stride()
    }

    pub fn validate(&self) -> Result<()> {
        if self.codebook_size == 0 || self.n_z == 0 {
            return Err(Error::Config("codebook_size and n_z must be >= 1".into()));
        }
        if !self.image_size.is_multiple_of(self.stride()) || self.grid_size() == 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by stride {}",
                self.image_size,
                self.stride()
            )));
        }
        if !(self.beta_commit > 0.0 && self.lambda_rec > 0.0) {
            return Err(Error::Config("beta_commit and lambda_rec must be > 0".into()));
        }
        Ok(())
    }
}

/// `h x w` grid of codebook indices in raster order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenGrid {
    pub h: usize,
    pub w: usize,
    pub tokens: Vec<usize>,
}

impl TokenGrid {
    pub fn new(h: usize, w: usize, tokens: Vec<usize>, vocab: usize) -> Result<Self> {
        if tokens.len() != h * w {
            return Err(Error::Shape {
                expected: vec![h, w],
                got: vec![tokens.len()],
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::TokenRange { token: t, size: vocab });
        }
        Ok(Self { h, w, tokens })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            tokens: vec![0; h * w],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> usize {
        self.tokens[i * self.w + j]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Codebook<S> {
    /// `[|Z|, n_z]`
    pub entries: Tensor<S>,
}

impl<S: Scalar> Codebook<S> {
    pub fn new(size: usize, n_z: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / size as f64;
        loop {
            let entries = Tensor::uniform(&[size, n_z], bound, rng);
            let cb = Self { entries };
            if cb.distinct() {
                return cb;
            }
        }
    }

    pub fn from_entries(entries: Tensor<S>) -> Result<Self> {
        if entries.shape().len() != 2 || entries.shape()[0] == 0 || entries.shape()[1] == 0 {
            return Err(Error::Validation(format!(
                "codebook must be a non-empty [|Z|, n_z] matrix, got {:?}",
                entries.shape()
            )));
        }
        if !entries.all_finite() {
            return Err(Error::NonFinite("codebook entry".into()));
        }
        Ok(Self { entries })
    }

    pub fn size(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.entries.shape()[1]
    }

    pub fn entry(&self, k: usize) -> &[S] {
        self.entries.row(k)
    }

    /// No two rows share the exact same bits.
    pub fn distinct(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        (0..self.size()).all(|k| {
            seen.insert(
                self.entry(k)
                    .iter()
                    .map(|v| v.to_f64_lossy().to_bits())
                    .collect::<Vec<_>>(),
            )
        })
    }

    /// Index of the nearest entry by squared Euclidean distance; ties go to
    /// the lowest index.
    pub fn nearest(&self, v: &[S]) -> usize {
        let mut best = 0;
        let mut best_d = S::infinity();
        for k in 0..self.size() {
            let d: S = self
                .entry(k)
                .iter()
                .zip(v)
                .map(|(&e, &x)| (x - e) * (x - e))
                .sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }
}

impl<S: Scalar> Params<S> for Codebook<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        f(&nn::join(prefix, "entries"), &self.entries);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        f(&nn::join(prefix, "entries"), &mut self.entries);
    }
}

/// Nearest-codeword assignment of a `[h, w, n_z]` latent grid.
pub fn quantize<S: Scalar>(latents: &Tensor<S>, z: &Codebook<S>) -> Result<(TokenGrid, Tensor<S>)> {
    let s = latents.shape();
    if s.len() != 3 || s[2] != z.dim() {
        return Err(Error::Shape {
            expected: vec![0, 0, z.dim()],
            got: s.to_vec(),
        });
    }
    if !latents.all_finite() {
        return Err(Error::NonFinite("latent".into()));
    }
    let (h, w, d) = (s[0], s[1], s[2]);
    let mut tokens = Vec::with_capacity(h * w);
    let mut q = Vec::with_capacity(h * w * d);
    for v in latents.data().chunks_exact(d) {
        let k = z.nearest(v);
        tokens.push(k);
        q.extend_from_slice(z.entry(k));
    }
    Ok((
        TokenGrid { h, w, tokens },
        Tensor::new(vec![h, w, d], q).unwrap(),
    ))
}

/// Codebook rows for a token grid, as `[h, w, n_z]`.
pub fn lookup<S: Scalar>(t: &TokenGrid, z: &Codebook<S>) -> Result<Tensor<S>> {
    let mut q = Vec::with_capacity(t.len() * z.dim());
    for &k in &t.tokens {
        if k >= z.size() {
            return Err(Error::TokenRange { token: k, size: z.size() });
        }
        q.extend_from_slice(z.entry(k));
    }
    Ok(Tensor::new(vec![t.h, t.w, z.dim()], q).unwrap())
}

/// `beta * mean |e - q|^2` with `q` held constant.
pub fn commitment_loss<S: Scalar>(encoded: &Tensor<S>, quantized: &Tensor<S>, beta: f64) -> S {
    let n = S::lit(encoded.len() as f64);
    let sum: S = encoded
        .data()
        .iter()
        .zip(quantized.data())
        .map(|(&e, &q)| (e - q) * (e - q))
        .sum();
    S::lit(beta) * sum / n
}

/// Gradient of [`commitment_loss`] with respect to the encoder output.
pub fn commitment_grad<S: Scalar>(encoded: &Tensor<S>, quantized: &Tensor<S>, beta: f64) -> Tensor<S> {
    let scale = S::lit(2.0 * beta / encoded.len() as f64);
    let mut g = encoded.clone();
    for (gi, &q) in g.data_mut().iter_mut().zip(quantized.data()) {
        *gi = scale * (*gi - q);
    }
    g
}

#[derive(Clone, Debug)]
pub struct VqModel<S> {
    pub config: VqConfig,
    pub encoder: Sequential<S>,
    pub decoder: Sequential<S>,
    pub codebook: Codebook<S>,
}

impl<S: Scalar> VqModel<S> {
    pub fn new(config: VqConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let (c, w) = (config.channels, config.width);
        let mut enc = vec![Layer::Conv(Conv2d::new(c, w, 3, 1, 1, rng)), Layer::Relu];
        for _ in 0..config.downsample {
            enc.push(Layer::Conv(Conv2d::new(w, w, 4, 2, 1, rng)));
            enc.push(Layer::Relu);
        }
        enc.push(Layer::Conv(Conv2d::new(w, config.n_z, 1, 1, 0, rng)));
        let mut dec = vec![Layer::Conv(Conv2d::new(config.n_z, w, 1, 1, 0, rng)), Layer::Relu];
        for _ in 0..config.downsample {
            dec.push(Layer::Upsample2);
            dec.push(Layer::Conv(Conv2d::new(w, w, 3, 1, 1, rng)));
            dec.push(Layer::Relu);
        }
        dec.push(Layer::Conv(Conv2d::new(w, c, 3, 1, 1, rng)));
        let codebook = Codebook::new(config.codebook_size, config.n_z, rng);
        Ok(Self {
            config,
            encoder: Sequential::new(enc),
            decoder: Sequential::new(dec),
            codebook,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.config.image_size, self.config.image_size, self.config.channels]
    }

    fn check_input(&self, x: &Tensor<S>) -> Result<()> {
        if x.shape() != self.input_shape() {
            return Err(Error::Shape {
                expected: self.input_shape().to_vec(),
                got: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Encoder output for one `[H, W, C]` image as `[h, w, n_z]`.
    pub fn encode(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_input(x)?;
        let z = self.encoder.forward(&to_nchw([x]));
        Ok(from_nchw(&z, 0))
    }

    /// Decode `[h, w, n_z]` latents to an image clamped to `[0, 1]`.
    pub fn decode_latents(&self, q: &Tensor<S>) -> Tensor<S> {
        let y = self.decoder.forward(&to_nchw([q]));
        from_nchw(&y, 0).map(|v| v.max(S::zero()).min(S::one()))
    }

    pub fn decode(&self, t: &TokenGrid) -> Result<Tensor<S>> {
        let q = lookup(t, &self.codebook)?;
        Ok(self.decode_latents(&q))
    }

    pub fn tokenize(&self, x: &Tensor<S>) -> Result<TokenGrid> {
        Ok(quantize(&self.encode(x)?, &self.codebook)?.0)
    }

    /// `decode(quantize(encode(x)))`
    pub fn reconstruct(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let (_, q) = quantize(&self.encode(x)?, &self.codebook)?;
        Ok(self.decode_latents(&q))
    }

    /// Loss terms and every gradient of one training step on an NCHW batch.
    pub fn loss_and_grads(&self, batch: &Tensor<S>) -> Result<VqStep<S>> {
        let n = batch.shape()[0];
        let (ze, enc_cache) = self.encoder.forward_cached(batch);
        if !ze.all_finite() {
            return Err(Error::NonFinite("encoder output".into()));
        }
        let [_, nz, h, w] = [ze.shape()[0], ze.shape()[1], ze.shape()[2], ze.shape()[3]];
        // Quantize position-wise in NCHW layout.
        let mut zq = Tensor::zeros(ze.shape());
        let mut tokens = Vec::with_capacity(n * h * w);
        let plane = h * w;
        let mut v = vec![S::zero(); nz];
        for img in 0..n {
            let base = img * nz * plane;
            for p in 0..plane {
                for c in 0..nz {
                    v[c] = ze.data()[base + c * plane + p];
                }
                let k = self.codebook.nearest(&v);
                tokens.push(k);
                for (c, &e) in self.codebook.entry(k).iter().enumerate() {
                    zq.data_mut()[base + c * plane + p] = e;
                }
            }
        }

        let (xr, dec_cache) = self.decoder.forward_cached(&zq);
        let nx = S::lit(batch.len() as f64);
        let lam = S::lit(self.config.lambda_rec);
        let mut d_xr = xr.clone();
        let mut rec = S::zero();
        for (d, &x) in d_xr.data_mut().iter_mut().zip(batch.data()) {
            let diff = *d - x;
            rec += diff * diff;
            *d = S::lit(2.0) * lam * diff / nx;
        }
        let reconstruction = lam * rec / nx;

        let mut grads = nn::zeros_like(self);
        let grad_quantized = self
            .decoder
            .backward(&dec_cache, d_xr, &mut grads.decoder, true)
            .expect("decoder input gradient");

        // Straight-through: the decoder-input gradient passes to E(x) as is.
        let grad_encoder_out_recon = grad_quantized.clone();
        let commitment = commitment_loss(&ze, &zq, self.config.beta_commit);
        let mut grad_encoder_out = grad_encoder_out_recon.clone();
        grad_encoder_out.add_assign(&commitment_grad(&ze, &zq, self.config.beta_commit));

        // Codebook term pulls entries towards sg[E(x)].
        let codebook_loss = commitment_loss(&zq, &ze, 1.0);
        let scale = S::lit(2.0 / ze.len() as f64);
        for img in 0..n {
            let base = img * nz * plane;
            for p in 0..plane {
                let k = tokens[img * plane + p];
                let row = &mut grads.codebook.entries.data_mut()[k * nz..(k + 1) * nz];
                for (c, g) in row.iter_mut().enumerate() {
                    let idx = base + c * plane + p;
                    *g += scale * (zq.data()[idx] - ze.data()[idx]);
                }
            }
        }

        self.encoder
            .backward(&enc_cache, grad_encoder_out.clone(), &mut grads.encoder, false);

        Ok(VqStep {
            loss: VqLoss {
                total: (reconstruction + codebook_loss + commitment).to_f64_lossy(),
                reconstruction: reconstruction.to_f64_lossy(),
                codebook: codebook_loss.to_f64_lossy(),
                commitment: commitment.to_f64_lossy(),
            },
            encoded: ze,
            quantized: zq,
            reconstruction: xr,
            grad_quantized,
            grad_encoder_out_recon,
            grad_encoder_out,
            grads,
            tokens,
        })
    }

    pub fn to_checkpoint(&self, meta: CheckpointMeta) -> Checkpoint {
        let meta = meta.with_extra(serde_json::json!({ "vq": self.config }));
        Checkpoint::from_module(self, "", meta)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let config: VqConfig = serde_json::from_value(c.meta.extra["vq"].clone())
            .map_err(|e| Error::Format(format!("vq config in checkpoint: {e}")))?;
        let mut model = Self::new(config, &mut SeededRng::new(0, "vq-shell"))?;
        c.load_into(&mut model, "")?;
        Ok(model)
    }
}

impl<S: Scalar> Params<S> for VqModel<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        self.encoder.visit(&nn::join(prefix, "encoder"), f);
        self.decoder.visit(&nn::join(prefix, "decoder"), f);
        self.codebook.visit(&nn::join(prefix, "codebook"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        self.encoder.visit_mut(&nn::join(prefix, "encoder"), f);
        self.decoder.visit_mut(&nn::join(prefix, "decoder"), f);
        self.codebook.visit_mut(&nn::join(prefix, "codebook"), f);
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VqLoss {
    pub total: f64,
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
}

/// Everything computed in one training step; NCHW layouts throughout.
pub struct VqStep<S> {
    pub loss: VqLoss,
    pub encoded: Tensor<S>,
    pub quantized: Tensor<S>,
    pub reconstruction: Tensor<S>,
    /// `dL/dz_q` delivered by the decoder.
    pub grad_quantized: Tensor<S>,
    /// Reconstruction-term gradient at the encoder output.
    pub grad_encoder_out_recon: Tensor<S>,
    /// Full gradient at the encoder output (reconstruction + commitment).
    pub grad_encoder_out: Tensor<S>,
    pub grads: VqModel<S>,
    pub tokens: Vec<usize>,
}

/// Small patch discriminator used by the optional adversarial term.
fn discriminator<S: Scalar>(channels: usize, width: usize, rng: &mut SeededRng) -> Sequential<S> {
    Sequential::new(vec![
        Layer::Conv(Conv2d::new(channels, width, 4, 2, 1, rng)),
        Layer::Relu,
        Layer::Conv(Conv2d::new(width, 2 * width, 4, 2, 1, rng)),
        Layer::Relu,
        Layer::Conv(Conv2d::new(2 * width, 1, 3, 1, 1, rng)),
    ])
}

pub struct VqTrained<S> {
    pub model: VqModel<S>,
    pub losses: Vec<VqLoss>,
    pub reseeded: usize,
}

pub(crate) enum StageOptimizer<S> {
    Adam(Adam<S>),
    Sgd(Sgd<S>),
}

impl<S: Scalar> StageOptimizer<S> {
    pub(crate) fn from_config(cfg: &StageConfig) -> Self {
        match cfg.optimizer.kind {
            OptimizerKind::Adam => StageOptimizer::Adam(Adam::new(cfg.optimizer.momentum, 0.99)),
            OptimizerKind::Sgd => StageOptimizer::Sgd(Sgd::new(cfg.optimizer.momentum, false, cfg.optimizer.weight_decay)),
            OptimizerKind::SgdNesterov => {
                StageOptimizer::Sgd(Sgd::new(cfg.optimizer.momentum, true, cfg.optimizer.weight_decay))
            }
        }
    }

    pub(crate) fn step<M: Params<S>>(&mut self, params: &mut M, grads: &M, lr: f64) {
        match self {
            StageOptimizer::Adam(a) => a.step(params, grads, lr),
            StageOptimizer::Sgd(s) => s.step(params, grads, lr),
        }
    }
}

/// Train a tokenizer on upstream images. The model is initialised from the
/// `init` child stream of `rng`, so zero steps return that initialisation.
pub fn train_vq<S: Scalar>(
    upstream: &DatasetManifest<S>,
    config: &VqConfig,
    cfg: &StageConfig,
    rng: &SeededRng,
) -> Result<VqTrained<S>> {
    if upstream.is_empty() {
        return Err(Error::Validation("upstream dataset is empty".into()));
    }
    let mut model = VqModel::new(config.clone(), &mut rng.derive("init"))?;
    let [h, w, c] = upstream.image_shape();
    if [h, w, c] != model.input_shape() {
        return Err(Error::Shape {
            expected: model.input_shape().to_vec(),
            got: vec![h, w, c],
        });
    }
    let mut batch_rng = rng.derive("batches");
    let mut reseed_rng = rng.derive("reseed");
    let schedule = MultiStepLr::from_fractions(
        cfg.lr_schedule.initial,
        &cfg.lr_schedule.milestones,
        cfg.lr_schedule.decay,
        cfg.steps,
    );
    let mut opt = StageOptimizer::from_config(cfg);
    let adv = config.adversarial.clone();
    let mut disc = adv
        .enabled
        .then(|| discriminator::<S>(config.channels, config.width, &mut rng.derive("disc")));
    let mut disc_opt = Adam::<S>::new(0.5, 0.9);

    let n = upstream.len();
    let batch_size = cfg.batch_size.min(n).max(1);
    let steps_per_epoch = n.div_ceil(batch_size);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut usage = vec![0usize; config.codebook_size];
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut reseeded = 0;

    for step in 0..cfg.steps {
        if cursor + batch_size > order.len() {
            order = batch_rng.permutation(n);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch_size];
        cursor += batch_size;
        let batch = to_nchw(idx.iter().map(|&i| &upstream.records()[i].pixels));

        let mut out = model.loss_and_grads(&batch)?;
        if let (Some(d), true) = (disc.as_mut(), step >= adv.start_step) {
            adversarial_step(&mut model, d, &mut disc_opt, &batch, &mut out, &adv)?;
        }
        if !out.loss.total.is_finite() || !nn::grads_finite(&out.grads) {
            return Err(Error::Diverged {
                stage: "train_vq".into(),
                step,
                loss: out.loss.total,
            });
        }
        for &t in &out.tokens {
            usage[t] += 1;
        }
        opt.step(&mut model, &out.grads, schedule.lr_at(step));
        losses.push(out.loss);

        if config.dead_code_reseed && (step + 1) % steps_per_epoch == 0 {
            let nz = config.n_z;
            let plane = out.encoded.shape()[2] * out.encoded.shape()[3];
            let count = out.encoded.shape()[0] * plane;
            for k in 0..config.codebook_size {
                if usage[k] == 0 {
                    let pick = reseed_rng.below(count);
                    let (img, p) = (pick / plane, pick % plane);
                    for ch in 0..nz {
                        model.codebook.entries.data_mut()[k * nz + ch] =
                            out.encoded.data()[(img * nz + ch) * plane + p];
                    }
                    reseeded += 1;
                }
            }
            usage.iter_mut().for_each(|u| *u = 0);
        }
    }
    Ok(VqTrained {
        model,
        losses,
        reseeded,
    })
}

/// Hinge-loss adversarial term. Updates the discriminator and adds the
/// generator gradient to `out.grads.decoder`.
fn adversarial_step<S: Scalar>(
    model: &mut VqModel<S>,
    disc: &mut Sequential<S>,
    disc_opt: &mut Adam<S>,
    real: &Tensor<S>,
    out: &mut VqStep<S>,
    adv: &AdversarialConfig,
) -> Result<()> {
    let fake = &out.reconstruction;
    // Generator: minimize -weight * mean D(fake).
    let (d_fake, cache) = disc.forward_cached(fake);
    let nf = S::lit(d_fake.len() as f64);
    let dy = Tensor::full(d_fake.shape(), -S::lit(adv.weight) / nf);
    let mut scratch = nn::zeros_like(disc);
    let d_xr = disc.backward(&cache, dy, &mut scratch, true).expect("input grad");
    let (_, dec_cache) = model.decoder.forward_cached(&out.quantized);
    let mut g_dec = nn::zeros_like(&model.decoder);
    // Decoder only; the encoder sees the reconstruction and commitment terms.
    model.decoder.backward(&dec_cache, d_xr, &mut g_dec, false);
    nn::accumulate(&mut out.grads.decoder, &g_dec);
    out.loss.total += (-S::lit(adv.weight) * d_fake.sum() / nf).to_f64_lossy();

    // Discriminator hinge loss.
    let mut g_disc = nn::zeros_like(disc);
    for (x, sign) in [(real, S::one()), (fake, -S::one())] {
        let (logits, cache) = disc.forward_cached(x);
        let n = S::lit(logits.len() as f64);
        let dy = logits.map(|l| if S::one() - sign * l > S::zero() { -sign / n } else { S::zero() });
        disc.backward(&cache, dy, &mut g_disc, false);
    }
    disc_opt.step(disc, &g_disc, adv.disc_lr);
    Ok(())
}

/// Stage 2: pass every record through the frozen tokenizer.
pub fn rerepresent<S: Scalar>(d: &DatasetManifest<S>, vq: &VqModel<S>) -> Result<DatasetManifest<S>> {
    let records: Vec<ImageRecord<S>> = d
        .records()
        .par_iter()
        .map(|r| {
            Ok(ImageRecord {
                id: r.id.clone(),
                pixels: vq.reconstruct(&r.pixels)?,
                label: r.label,
                source_id: r.source_id.clone(),
            })
        })
        .collect::<Result<_>>()?;
    d.with_records(records, Provenance::ReRepresented)
}

/// Token grids for every record, in manifest order.
pub fn tokenize_dataset<S: Scalar>(d: &DatasetManifest<S>, vq: &VqModel<S>) -> Result<Vec<TokenGrid>> {
    d.records().par_iter().map(|r| vq.tokenize(&r.pixels)).collect()
}
