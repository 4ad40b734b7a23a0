//! Causal next-index model over raster-ordered token grids.
//!
//! The input sequence is `[START, t_0, ..., t_{T-2}]` and position `i`
//! predicts `t_i`, so the empty prefix is served by a learned start token.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::StageConfig;
use crate::error::{Error, Result};
use crate::nn::{self, gelu, gelu_grad, Embedding, LayerNorm, LayerNormCache, Linear, MultiStepLr, Params};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::{gemm, Tensor};
use crate::vq::{StageOptimizer, TokenGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LtConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: usize,
}

impl Default for LtConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            dim: 128,
            mlp_ratio: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_k: usize,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: 100,
        }
    }
}

impl SamplingParams {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Validation("temperature must be > 0".into()));
        }
        if self.top_k == 0 || self.top_k > vocab {
            return Err(Error::Validation(format!("top_k {} outside [1, {vocab}]", self.top_k)));
        }
        Ok(())
    }
}

/// Boolean grid; `true` marks a position to be generated.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskGrid {
    pub h: usize,
    pub w: usize,
    pub cells: Vec<bool>,
}

impl MaskGrid {
    pub fn none(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            cells: vec![false; h * w],
        }
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
}

#[derive(Clone, Debug)]
struct Block<S> {
    ln1: LayerNorm<S>,
    qkv: Linear<S>,
    proj: Linear<S>,
    ln2: LayerNorm<S>,
    fc1: Linear<S>,
    fc2: Linear<S>,
}

impl<S: Scalar> Params<S> for Block<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        self.ln1.visit(&nn::join(prefix, "ln1"), f);
        self.qkv.visit(&nn::join(prefix, "qkv"), f);
        self.proj.visit(&nn::join(prefix, "proj"), f);
        self.ln2.visit(&nn::join(prefix, "ln2"), f);
        self.fc1.visit(&nn::join(prefix, "fc1"), f);
        self.fc2.visit(&nn::join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        self.ln1.visit_mut(&nn::join(prefix, "ln1"), f);
        self.qkv.visit_mut(&nn::join(prefix, "qkv"), f);
        self.proj.visit_mut(&nn::join(prefix, "proj"), f);
        self.ln2.visit_mut(&nn::join(prefix, "ln2"), f);
        self.fc1.visit_mut(&nn::join(prefix, "fc1"), f);
        self.fc2.visit_mut(&nn::join(prefix, "fc2"), f);
    }
}

struct BlockCache<S> {
    x: Tensor<S>,
    a: Tensor<S>,
    ln1: LayerNormCache<S>,
    qkv: Tensor<S>,
    /// Per-head `[L, L]` attention probabilities.
    probs: Vec<Vec<S>>,
    attn: Tensor<S>,
    b: Tensor<S>,
    ln2: LayerNormCache<S>,
    f1: Tensor<S>,
    g: Tensor<S>,
}

/// Copy head `h` of a `[L, 3d]` qkv matrix; `part` 0/1/2 selects q/k/v.
fn head_slice<S: Scalar>(qkv: &Tensor<S>, part: usize, h: usize, dh: usize, d: usize) -> Vec<S> {
    let l = qkv.shape()[0];
    let mut out = Vec::with_capacity(l * dh);
    for i in 0..l {
        let start = i * 3 * d + part * d + h * dh;
        out.extend_from_slice(&qkv.data()[start..start + dh]);
    }
    out
}

fn add_head_slice<S: Scalar>(dst: &mut Tensor<S>, src: &[S], part: usize, h: usize, dh: usize, width: usize, d: usize) {
    let l = dst.shape()[0];
    for i in 0..l {
        let start = i * width + part * d + h * dh;
        for j in 0..dh {
            dst.data_mut()[start + j] += src[i * dh + j];
        }
    }
}

impl<S: Scalar> Block<S> {
    fn new(d: usize, mlp: usize, rng: &mut SeededRng) -> Self {
        Self {
            ln1: LayerNorm::new(d),
            qkv: Linear::new(d, 3 * d, rng),
            proj: Linear::new(d, d, rng),
            ln2: LayerNorm::new(d),
            fc1: Linear::new(d, mlp, rng),
            fc2: Linear::new(mlp, d, rng),
        }
    }

    fn forward(&self, x: Tensor<S>, heads: usize) -> (Tensor<S>, BlockCache<S>) {
        let (l, d) = (x.shape()[0], x.shape()[1]);
        let dh = d / heads;
        let scale = S::lit(1.0 / (dh as f64).sqrt());
        let (a, ln1) = self.ln1.forward(&x);
        let qkv = self.qkv.forward(&a);
        let mut attn = Tensor::zeros(&[l, d]);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = head_slice(&qkv, 0, h, dh, d);
            let k = head_slice(&qkv, 1, h, dh, d);
            let v = head_slice(&qkv, 2, h, dh, d);
            let mut s = vec![S::zero(); l * l];
            gemm(l, dh, l, &q, false, &k, true, S::zero(), &mut s);
            for i in 0..l {
                let row = &mut s[i * l..(i + 1) * l];
                let mut m = S::neg_infinity();
                for (j, v) in row.iter_mut().enumerate() {
                    if j > i {
                        *v = S::zero();
                    } else {
                        *v *= scale;
                        m = m.max(*v);
                    }
                }
                let mut z = S::zero();
                for v in row[..=i].iter_mut() {
                    *v = (*v - m).exp();
                    z += *v;
                }
                for v in row[..=i].iter_mut() {
                    *v /= z;
                }
            }
            let mut o = vec![S::zero(); l * dh];
            gemm(l, l, dh, &s, false, &v, false, S::zero(), &mut o);
            add_head_slice(&mut attn, &o, 0, h, dh, d, d);
            probs.push(s);
        }
        let y = self.proj.forward(&attn);
        let mut x1 = x.clone();
        x1.add_assign(&y);
        let (b, ln2) = self.ln2.forward(&x1);
        let f1 = self.fc1.forward(&b);
        let g = f1.map(gelu);
        let f2 = self.fc2.forward(&g);
        let mut out = x1;
        out.add_assign(&f2);
        let cache = BlockCache {
            x,
            a,
            ln1,
            qkv,
            probs,
            attn,
            b,
            ln2,
            f1,
            g,
        };
        (out, cache)
    }

    fn backward(&self, c: &BlockCache<S>, dout: Tensor<S>, grad: &mut Self, heads: usize) -> Tensor<S> {
        let (l, d) = (c.x.shape()[0], c.x.shape()[1]);
        let dh = d / heads;
        let scale = S::lit(1.0 / (dh as f64).sqrt());
        // MLP branch.
        let dg = self.fc2.backward(&c.g, &dout, &mut grad.fc2);
        let mut df1 = dg;
        for (d, &x) in df1.data_mut().iter_mut().zip(c.f1.data()) {
            *d *= gelu_grad(x);
        }
        let db = self.fc1.backward(&c.b, &df1, &mut grad.fc1);
        let mut dx1 = self.ln2.backward(&c.ln2, &db, &mut grad.ln2);
        dx1.add_assign(&dout);
        // Attention branch.
        let dattn = self.proj.backward(&c.attn, &dx1, &mut grad.proj);
        let mut dqkv = Tensor::zeros(&[l, 3 * d]);
        for h in 0..heads {
            let q = head_slice(&c.qkv, 0, h, dh, d);
            let k = head_slice(&c.qkv, 1, h, dh, d);
            let v = head_slice(&c.qkv, 2, h, dh, d);
            let mut d_o = Vec::with_capacity(l * dh);
            for i in 0..l {
                d_o.extend_from_slice(&dattn.data()[i * d + h * dh..i * d + (h + 1) * dh]);
            }
            let p = &c.probs[h];
            let mut dp = vec![S::zero(); l * l];
            gemm(l, dh, l, &d_o, false, &v, true, S::zero(), &mut dp);
            let mut dv = vec![S::zero(); l * dh];
            gemm(l, l, dh, p, true, &d_o, false, S::zero(), &mut dv);
            let mut ds = vec![S::zero(); l * l];
            for i in 0..l {
                let dot: S = (0..=i).map(|j| dp[i * l + j] * p[i * l + j]).sum();
                for j in 0..=i {
                    ds[i * l + j] = p[i * l + j] * (dp[i * l + j] - dot) * scale;
                }
            }
            let mut dq = vec![S::zero(); l * dh];
            gemm(l, l, dh, &ds, false, &k, false, S::zero(), &mut dq);
            let mut dk = vec![S::zero(); l * dh];
            gemm(l, l, dh, &ds, true, &q, false, S::zero(), &mut dk);
            add_head_slice(&mut dqkv, &dq, 0, h, dh, 3 * d, d);
            add_head_slice(&mut dqkv, &dk, 1, h, dh, 3 * d, d);
            add_head_slice(&mut dqkv, &dv, 2, h, dh, 3 * d, d);
        }
        let da = self.qkv.backward(&c.a, &dqkv, &mut grad.qkv);
        let mut dx = self.ln1.backward(&c.ln1, &da, &mut grad.ln1);
        dx.add_assign(&dx1);
        dx
    }
}

#[derive(Clone, Debug)]
pub struct LatentTransformer<S> {
    pub config: LtConfig,
    vocab: usize,
    context: usize,
    tok_emb: Embedding<S>,
    pos_emb: Embedding<S>,
    blocks: Vec<Block<S>>,
    ln_f: LayerNorm<S>,
    head: Linear<S>,
}

impl<S: Scalar> Params<S> for LatentTransformer<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        self.tok_emb.visit(&nn::join(prefix, "tok_emb"), f);
        self.pos_emb.visit(&nn::join(prefix, "pos_emb"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&nn::join(prefix, &format!("blocks.{i}")), f);
        }
        self.ln_f.visit(&nn::join(prefix, "ln_f"), f);
        self.head.visit(&nn::join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        self.tok_emb.visit_mut(&nn::join(prefix, "tok_emb"), f);
        self.pos_emb.visit_mut(&nn::join(prefix, "pos_emb"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&nn::join(prefix, &format!("blocks.{i}")), f);
        }
        self.ln_f.visit_mut(&nn::join(prefix, "ln_f"), f);
        self.head.visit_mut(&nn::join(prefix, "head"), f);
    }
}

struct ForwardCache<S> {
    ids: Vec<usize>,
    blocks: Vec<BlockCache<S>>,
    h: Tensor<S>,
    ln_f: LayerNormCache<S>,
}

impl<S: Scalar> LatentTransformer<S> {
    pub fn new(config: LtConfig, vocab: usize, context: usize, rng: &mut SeededRng) -> Result<Self> {
        if config.dim == 0 || config.heads == 0 || !config.dim.is_multiple_of(config.heads) {
            return Err(Error::Config(format!(
                "dim {} must be a positive multiple of heads {}",
                config.dim, config.heads
            )));
        }
        if vocab == 0 || context == 0 {
            return Err(Error::Config("vocab and context must be >= 1".into()));
        }
        let d = config.dim;
        let blocks = (0..config.layers)
            .map(|_| Block::new(d, d * config.mlp_ratio, rng))
            .collect();
        Ok(Self {
            tok_emb: Embedding::new(vocab + 1, d, rng),
            pos_emb: Embedding::new(context, d, rng),
            blocks,
            ln_f: LayerNorm::new(d),
            head: Linear::new(d, vocab, rng),
            config,
            vocab,
            context,
        })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn context(&self) -> usize {
        self.context
    }

    fn start_id(&self) -> usize {
        self.vocab
    }

    /// Inputs `[START, tokens...]` truncated to the context length.
    fn input_ids(&self, tokens: &[usize]) -> Vec<usize> {
        let mut ids = Vec::with_capacity(tokens.len() + 1);
        ids.push(self.start_id());
        ids.extend_from_slice(tokens);
        ids.truncate(self.context);
        ids
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.vocab) {
            Some(&t) => Err(Error::TokenRange {
                token: t,
                size: self.vocab,
            }),
            None => Ok(()),
        }
    }

    fn forward_cached(&self, ids: Vec<usize>) -> (Tensor<S>, ForwardCache<S>) {
        let l = ids.len();
        let positions: Vec<usize> = (0..l).collect();
        let mut x = self.tok_emb.forward(&ids);
        x.add_assign(&self.pos_emb.forward(&positions));
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(x, self.config.heads);
            caches.push(c);
            x = y;
        }
        let (hn, ln_f) = self.ln_f.forward(&x);
        let logits = self.head.forward(&hn);
        (
            logits,
            ForwardCache {
                ids,
                blocks: caches,
                h: hn,
                ln_f,
            },
        )
    }

    /// Logits `[L, |Z|]` for every position of `[START, tokens...]`; row `i`
    /// predicts `tokens[i]`.
    pub fn forward_logits(&self, tokens: &[usize]) -> Result<Tensor<S>> {
        self.check_tokens(tokens)?;
        Ok(self.forward_cached(self.input_ids(tokens)).0)
    }

    /// Mean next-token cross-entropy of a full sequence and its gradients.
    pub fn loss_and_grads(&self, tokens: &[usize]) -> Result<(f64, Self)> {
        self.check_tokens(tokens)?;
        if tokens.len() != self.context {
            return Err(Error::Shape {
                expected: vec![self.context],
                got: vec![tokens.len()],
            });
        }
        let (logits, cache) = self.forward_cached(self.input_ids(tokens));
        let (l, v) = (logits.shape()[0], logits.shape()[1]);
        let inv = S::lit(1.0 / l as f64);
        let mut dlogits = Tensor::zeros(&[l, v]);
        let mut loss = 0.0;
        for i in 0..l {
            let row = logits.row(i);
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let z: S = row.iter().map(|&x| (x - m).exp()).sum();
            let target = tokens[i];
            loss += (z.ln() + m - row[target]).to_f64_lossy();
            for j in 0..v {
                let p = (row[j] - m).exp() / z;
                let y = if j == target { S::one() } else { S::zero() };
                dlogits.data_mut()[i * v + j] = (p - y) * inv;
            }
        }
        let mut grad = nn::zeros_like(self);
        let dh = self.head.backward(&cache.h, &dlogits, &mut grad.head);
        let mut dx = self.ln_f.backward(&cache.ln_f, &dh, &mut grad.ln_f);
        for (i, b) in self.blocks.iter().enumerate().rev() {
            dx = b.backward(&cache.blocks[i], dx, &mut grad.blocks[i], self.config.heads);
        }
        self.tok_emb.backward(&cache.ids, &dx, &mut grad.tok_emb);
        let positions: Vec<usize> = (0..l).collect();
        self.pos_emb.backward(&positions, &dx, &mut grad.pos_emb);
        Ok((loss / l as f64, grad))
    }

    /// Incremental decoder state holding only the start token.
    pub fn start(&self) -> DecodeState<'_, S> {
        let mut st = DecodeState {
            model: self,
            keys: vec![Vec::new(); self.blocks.len()],
            values: vec![Vec::new(); self.blocks.len()],
            last: Tensor::zeros(&[1, self.config.dim]),
            len: 0,
        };
        st.feed(self.start_id());
        st
    }

    /// Logits for the token following `prefix` (empty prefix allowed).
    pub fn next_logits(&self, prefix: &[usize]) -> Result<Vec<S>> {
        if prefix.len() >= self.context {
            return Err(Error::Validation(format!(
                "prefix length {} must be < context {}",
                prefix.len(),
                self.context
            )));
        }
        self.check_tokens(prefix)?;
        let mut st = self.start();
        for &t in prefix {
            st.feed(t);
        }
        Ok(st.logits())
    }

    pub fn to_checkpoint(&self, meta: CheckpointMeta) -> Checkpoint {
        let meta = meta.with_extra(serde_json::json!({
            "lt": self.config,
            "vocab": self.vocab,
            "context": self.context,
        }));
        Checkpoint::from_module(self, "", meta)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let extra = &c.meta.extra;
        let config: LtConfig = serde_json::from_value(extra["lt"].clone())
            .map_err(|e| Error::Format(format!("lt config in checkpoint: {e}")))?;
        let vocab = extra["vocab"].as_u64().ok_or_else(|| Error::Format("missing vocab".into()))? as usize;
        let context = extra["context"].as_u64().ok_or_else(|| Error::Format("missing context".into()))? as usize;
        let mut m = Self::new(config, vocab, context, &mut SeededRng::new(0, "lt-shell"))?;
        c.load_into(&mut m, "")?;
        Ok(m)
    }
}

/// Key/value cache for token-by-token decoding.
pub struct DecodeState<'a, S> {
    model: &'a LatentTransformer<S>,
    keys: Vec<Vec<S>>,
    values: Vec<Vec<S>>,
    last: Tensor<S>,
    len: usize,
}

impl<S: Scalar> DecodeState<'_, S> {
    /// Number of inputs consumed, including the start token.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn feed(&mut self, id: usize) {
        let m = self.model;
        assert!(self.len < m.context, "decode state exceeds context");
        let d = m.config.dim;
        let heads = m.config.heads;
        let dh = d / heads;
        let scale = S::lit(1.0 / (dh as f64).sqrt());
        let mut x = m.tok_emb.forward(&[id]);
        x.add_assign(&m.pos_emb.forward(&[self.len]));
        let t = self.len + 1;
        for (li, b) in m.blocks.iter().enumerate() {
            let (a, _) = b.ln1.forward(&x);
            let qkv = b.qkv.forward(&a);
            let row = qkv.data();
            self.keys[li].extend_from_slice(&row[d..2 * d]);
            self.values[li].extend_from_slice(&row[2 * d..3 * d]);
            let keys = &self.keys[li];
            let values = &self.values[li];
            let mut attn = Tensor::zeros(&[1, d]);
            for h in 0..heads {
                let q = &row[h * dh..(h + 1) * dh];
                let mut s: Vec<S> = (0..t)
                    .map(|j| {
                        let k = &keys[j * d + h * dh..j * d + (h + 1) * dh];
                        q.iter().zip(k).map(|(&a, &b)| a * b).sum::<S>() * scale
                    })
                    .collect();
                let mx = s.iter().copied().fold(S::neg_infinity(), S::max);
                let mut z = S::zero();
                for v in s.iter_mut() {
                    *v = (*v - mx).exp();
                    z += *v;
                }
                let out = &mut attn.data_mut()[h * dh..(h + 1) * dh];
                for (j, p) in s.iter().enumerate() {
                    let p = *p / z;
                    let v = &values[j * d + h * dh..j * d + (h + 1) * dh];
                    for (o, &vv) in out.iter_mut().zip(v) {
                        *o += p * vv;
                    }
                }
            }
            let y = b.proj.forward(&attn);
            x.add_assign(&y);
            let (bn, _) = b.ln2.forward(&x);
            let g = b.fc1.forward(&bn).map(gelu);
            x.add_assign(&b.fc2.forward(&g));
        }
        self.last = x;
        self.len += 1;
    }

    /// Append a real or generated token.
    pub fn push(&mut self, token: usize) -> Result<()> {
        self.model.check_tokens(&[token])?;
        if self.len >= self.model.context {
            return Err(Error::Validation("context exhausted".into()));
        }
        self.feed(token);
        Ok(())
    }

    /// Next-token logits given everything fed so far.
    pub fn logits(&self) -> Vec<S> {
        let (h, _) = self.model.ln_f.forward(&self.last);
        self.model.head.forward(&h).into_data()
    }
}

/// Draw from the temperature-scaled softmax restricted to the `top_k`
/// largest logits (ties ranked by lower index). Always consumes one draw.
pub fn sample_logits<S: Scalar>(logits: &[S], params: &SamplingParams, rng: &mut SeededRng) -> usize {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(params.top_k.max(1));
    let u = rng.uniform();
    let top = logits[order[0]].to_f64_lossy();
    let weights: Vec<f64> = order
        .iter()
        .map(|&i| ((logits[i].to_f64_lossy() - top) / params.temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    for (&i, w) in order.iter().zip(&weights) {
        acc += w / total;
        if u < acc {
            return i;
        }
    }
    *order.last().unwrap()
}

/// Fill masked positions in raster order, each conditioned on every earlier
/// position (given or generated). Unmasked positions are copied through.
pub fn complete_tokens<S: Scalar>(
    partial: &TokenGrid,
    mask: &MaskGrid,
    model: &LatentTransformer<S>,
    sampling: &SamplingParams,
    rng: &mut SeededRng,
) -> Result<TokenGrid> {
    if (mask.h, mask.w) != (partial.h, partial.w) {
        return Err(Error::Shape {
            expected: vec![partial.h, partial.w],
            got: vec![mask.h, mask.w],
        });
    }
    if partial.len() != model.context() {
        return Err(Error::Shape {
            expected: vec![model.context()],
            got: vec![partial.len()],
        });
    }
    for (t, &m) in partial.tokens.iter().zip(&mask.cells) {
        if !m && *t >= model.vocab() {
            return Err(Error::TokenRange {
                token: *t,
                size: model.vocab(),
            });
        }
    }
    sampling.validate(model.vocab())?;
    let mut out = partial.clone();
    let Some(last_masked) = mask.cells.iter().rposition(|&m| m) else {
        return Ok(out);
    };
    let mut st = model.start();
    for pos in 0..=last_masked {
        if mask.cells[pos] {
            out.tokens[pos] = sample_logits(&st.logits(), sampling, rng);
        }
        if pos < last_masked {
            st.feed(out.tokens[pos]);
        }
    }
    Ok(out)
}

pub struct LtTrained<S> {
    pub model: LatentTransformer<S>,
    pub losses: Vec<f64>,
}

/// Train on raster-flattened token grids. Initialisation comes from the
/// `init` child stream of `rng`.
pub fn train_lt<S: Scalar>(
    grids: &[TokenGrid],
    vocab: usize,
    config: &LtConfig,
    cfg: &StageConfig,
    rng: &SeededRng,
) -> Result<LtTrained<S>> {
    let first = grids
        .first()
        .ok_or_else(|| Error::Validation("no token grids to train on".into()))?;
    if grids.iter().any(|g| (g.h, g.w) != (first.h, first.w)) {
        return Err(Error::Validation("token grids must share one shape".into()));
    }
    let context = first.len();
    let mut model = LatentTransformer::new(config.clone(), vocab, context, &mut rng.derive("init"))?;
    let schedule = MultiStepLr::from_fractions(
        cfg.lr_schedule.initial,
        &cfg.lr_schedule.milestones,
        cfg.lr_schedule.decay,
        cfg.steps,
    );
    let mut opt = StageOptimizer::from_config(cfg);
    let mut batch_rng = rng.derive("batches");
    let batch = cfg.batch_size.clamp(1, grids.len());
    let mut order = Vec::new();
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if cursor + batch > order.len() {
            order = batch_rng.permutation(grids.len());
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let parts: Vec<(f64, LatentTransformer<S>)> = idx
            .par_iter()
            .map(|&i| model.loss_and_grads(&grids[i].tokens))
            .collect::<Result<_>>()?;
        let mut iter = parts.into_iter();
        let (mut loss, mut grad) = iter.next().unwrap();
        for (l, g) in iter {
            loss += l;
            nn::accumulate(&mut grad, &g);
        }
        loss /= batch as f64;
        nn::scale_params(&mut grad, S::lit(1.0 / batch as f64));
        if !loss.is_finite() || !nn::grads_finite(&grad) {
            return Err(Error::Diverged {
                stage: "train_lt".into(),
                step,
                loss,
            });
        }
        opt.step(&mut model, &grad, schedule.lr_at(step));
        losses.push(loss);
    }
    Ok(LtTrained { model, losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(vocab: usize, context: usize) -> LatentTransformer<f64> {
        let cfg = LtConfig {
            layers: 2,
            heads: 2,
            dim: 8,
            mlp_ratio: 2,
        };
        LatentTransformer::new(cfg, vocab, context, &mut SeededRng::new(0, "lt")).unwrap()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = tiny(5, 6);
        let tokens = vec![1, 4, 0, 2, 2, 3];
        let (_, g) = m.loss_and_grads(&tokens).unwrap();
        let mut names = Vec::new();
        m.visit("", &mut |n, _| names.push(n.to_string()));
        let grads = nn::named_params(&g, "");
        let h = 1e-6;
        for (name, gt) in grads.iter() {
            // Two entries per tensor keeps the check quick.
            for idx in [0, gt.len() / 2] {
                let eval = |delta: f64| {
                    let mut mm = m.clone();
                    mm.visit_mut("", &mut |n, t| {
                        if n == name {
                            t.data_mut()[idx] += delta;
                        }
                    });
                    mm.loss_and_grads(&tokens).unwrap().0
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                let ana = gt.data()[idx];
                assert!((num - ana).abs() < 1e-6 * (1.0 + num.abs()), "{name}[{idx}]: {num} vs {ana}");
            }
        }
    }

    #[test]
    fn incremental_matches_full_forward() {
        let m = tiny(7, 8);
        let tokens = vec![3, 1, 6, 0, 2];
        let full = m.forward_logits(&tokens).unwrap();
        for p in 0..=tokens.len() {
            let inc = m.next_logits(&tokens[..p]).unwrap();
            for (a, b) in inc.iter().zip(full.row(p)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn next_logits_errors() {
        let m = tiny(4, 3);
        assert!(m.next_logits(&[0, 1, 2]).is_err());
        assert!(matches!(m.next_logits(&[9]), Err(Error::TokenRange { .. })));
        assert_eq!(m.next_logits(&[]).unwrap().len(), 4);
    }

    #[test]
    fn top1_sampling_is_argmax_with_low_index_ties() {
        let logits = [0.5f64, 2.0, 2.0, -1.0];
        let p = SamplingParams {
            temperature: 1e-3,
            top_k: 1,
        };
        let mut rng = SeededRng::new(0, "s");
        for _ in 0..10 {
            assert_eq!(sample_logits(&logits, &p, &mut rng), 1);
        }
    }

    #[test]
    fn sampling_respects_top_k() {
        let logits = [3.0f64, 2.9, -5.0, 2.8];
        let p = SamplingParams {
            temperature: 5.0,
            top_k: 2,
        };
        let mut rng = SeededRng::new(1, "s");
        for _ in 0..200 {
            let t = sample_logits(&logits, &p, &mut rng);
            assert!(t == 0 || t == 1);
        }
    }

    #[test]
    fn sampling_params_validation() {
        assert!(SamplingParams { temperature: 0.0, top_k: 1 }.validate(4).is_err());
        assert!(SamplingParams { temperature: 1.0, top_k: 5 }.validate(4).is_err());
        assert!(SamplingParams { temperature: 1.0, top_k: 4 }.validate(4).is_ok());
    }

    #[test]
    fn empty_mask_is_identity() {
        let m = tiny(5, 4);
        let g = TokenGrid::new(2, 2, vec![1, 2, 3, 4], 5).unwrap();
        let out = complete_tokens(&g, &MaskGrid::none(2, 2), &m, &SamplingParams { temperature: 1.0, top_k: 5 }, &mut SeededRng::new(0, "c")).unwrap();
        assert_eq!(out, g);
    }

    #[test]
    fn invalid_unmasked_token_rejected() {
        let m = tiny(5, 4);
        let g = TokenGrid { h: 2, w: 2, tokens: vec![1, 9, 3, 4] };
        let mut mask = MaskGrid::none(2, 2);
        mask.cells[3] = true;
        let r = complete_tokens(&g, &mask, &m, &SamplingParams { temperature: 1.0, top_k: 5 }, &mut SeededRng::new(0, "c"));
        assert!(matches!(r, Err(Error::TokenRange { .. })));
        // Masked positions may hold anything.
        let g2 = TokenGrid { h: 2, w: 2, tokens: vec![1, 2, 3, 99] };
        assert!(complete_tokens(&g2, &mask, &m, &SamplingParams { temperature: 1.0, top_k: 5 }, &mut SeededRng::new(0, "c")).is_ok());
    }
}
