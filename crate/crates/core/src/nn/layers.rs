use rayon::prelude::*;

use super::{join, Params};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::{gemm, Tensor};

/// Fully connected layer, `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear<S> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(inputs: usize, outputs: usize, rng: &mut SeededRng) -> Self {
        Self {
            weight: Tensor::randn(&[inputs, outputs], (1.0 / inputs as f64).sqrt(), rng),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[inputs, outputs]),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<S>) -> Tensor<S> {
        let (n, d_in) = (x.shape()[0], x.shape()[1]);
        let d_out = self.outputs();
        debug_assert_eq!(d_in, self.inputs());
        let mut y = Tensor::zeros(&[n, d_out]);
        for row in y.data_mut().chunks_exact_mut(d_out) {
            row.copy_from_slice(self.bias.data());
        }
        gemm(n, d_in, d_out, x.data(), false, self.weight.data(), false, S::one(), y.data_mut());
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Tensor<S>, dy: &Tensor<S>, grad: &mut Self) -> Tensor<S> {
        let (n, d_in) = (x.shape()[0], x.shape()[1]);
        let d_out = self.outputs();
        gemm(d_in, n, d_out, x.data(), true, dy.data(), false, S::one(), grad.weight.data_mut());
        for row in dy.data().chunks_exact(d_out) {
            for (g, &d) in grad.bias.data_mut().iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut dx = Tensor::zeros(&[n, d_in]);
        gemm(n, d_out, d_in, dy.data(), false, self.weight.data(), true, S::zero(), dx.data_mut());
        dx
    }
}

impl<S: Scalar> Params<S> for Linear<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Unfold a `[c, h, w]` image into `[c*k*k, oh*ow]` patch columns.
pub fn im2col<S: Scalar>(
    x: &[S],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<S>, usize, usize) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut cols = vec![S::zero(); c * k * k * oh * ow];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let src_row = &x[(ci * h + ii as usize) * w..(ci * h + ii as usize + 1) * w];
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            dst[oi * ow + oj] = src_row[jj as usize];
                        }
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `[c, h, w]` image.
pub fn col2im<S: Scalar>(
    cols: &[S],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<S> {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut x = vec![S::zero(); c * h * w];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let base = (ci * h + ii as usize) * w;
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            x[base + jj as usize] += src[oi * ow + oj];
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2-D convolution over NCHW batches. Weight layout `[out, in, k, k]`.
#[derive(Clone, Debug)]
pub struct Conv2d<S> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
    pub stride: usize,
    pub pad: usize,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Self {
            weight: Tensor::randn(&[out_ch, in_ch, kernel, kernel], (2.0 / fan_in as f64).sqrt(), rng),
            bias: Tensor::zeros(&[out_ch]),
            stride,
            pad,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    fn forward_one(&self, img: &[S], chw: (usize, usize, usize)) -> Vec<S> {
        let (k, oc) = (self.kernel(), self.out_channels());
        let (cols, oh, ow) = im2col(img, chw, k, self.stride, self.pad);
        let p = oh * ow;
        let mut out = vec![S::zero(); oc * p];
        for (o, row) in out.chunks_exact_mut(p).enumerate() {
            row.iter_mut().for_each(|v| *v = self.bias.data()[o]);
        }
        gemm(oc, chw.0 * k * k, p, self.weight.data(), false, &cols, false, S::one(), &mut out);
        out
    }

    pub fn forward(&self, x: &Tensor<S>) -> Tensor<S> {
        let [n, c, h, w] = dims4(x);
        assert_eq!(c, self.in_channels(), "conv input channels");
        let (oh, ow) = self.output_hw(h, w);
        let per = c * h * w;
        let outs: Vec<Vec<S>> = x
            .data()
            .par_chunks(per)
            .map(|img| self.forward_one(img, (c, h, w)))
            .collect();
        Tensor::new(vec![n, self.out_channels(), oh, ow], outs.concat()).unwrap()
    }

    /// Accumulates weight/bias gradients; returns `dL/dx` when `need_dx`.
    pub fn backward(
        &self,
        x: &Tensor<S>,
        dy: &Tensor<S>,
        grad: &mut Self,
        need_dx: bool,
    ) -> Option<Tensor<S>> {
        let [n, c, h, w] = dims4(x);
        let (k, oc) = (self.kernel(), self.out_channels());
        let (oh, ow) = self.output_hw(h, w);
        let p = oh * ow;
        let ckk = c * k * k;
        let per_in = c * h * w;
        let per_out = oc * p;
        let parts: Vec<(Vec<S>, Vec<S>, Option<Vec<S>>)> = x
            .data()
            .par_chunks(per_in)
            .zip(dy.data().par_chunks(per_out))
            .map(|(img, dout)| {
                let (cols, _, _) = im2col(img, (c, h, w), k, self.stride, self.pad);
                let mut dw = vec![S::zero(); oc * ckk];
                gemm(oc, p, ckk, dout, false, &cols, true, S::zero(), &mut dw);
                let db: Vec<S> = dout.chunks_exact(p).map(|r| r.iter().copied().sum()).collect();
                let dx = need_dx.then(|| {
                    let mut dcols = vec![S::zero(); ckk * p];
                    gemm(ckk, oc, p, self.weight.data(), true, dout, false, S::zero(), &mut dcols);
                    col2im(&dcols, (c, h, w), k, self.stride, self.pad)
                });
                (dw, db, dx)
            })
            .collect();
        let mut dx_all = need_dx.then(|| Vec::with_capacity(n * per_in));
        for (dw, db, dx) in parts {
            for (g, v) in grad.weight.data_mut().iter_mut().zip(&dw) {
                *g += *v;
            }
            for (g, v) in grad.bias.data_mut().iter_mut().zip(&db) {
                *g += *v;
            }
            if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
                all.extend_from_slice(&dx);
            }
        }
        dx_all.map(|d| Tensor::new(vec![n, c, h, w], d).unwrap())
    }
}

impl<S: Scalar> Params<S> for Conv2d<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

pub(crate) fn dims4<S: Scalar>(x: &Tensor<S>) -> [usize; 4] {
    let s = x.shape();
    assert_eq!(s.len(), 4, "expected NCHW tensor, got {:?}", s);
    [s[0], s[1], s[2], s[3]]
}

fn upsample2<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let [n, c, h, w] = dims4(x);
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[n, c, h2, w2]);
    let src = x.data();
    for (plane, dst) in out.data_mut().chunks_exact_mut(h2 * w2).enumerate() {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        for i in 0..h2 {
            for j in 0..w2 {
                dst[i * w2 + j] = s[(i / 2) * w + j / 2];
            }
        }
    }
    out
}

fn upsample2_backward<S: Scalar>(dy: &Tensor<S>) -> Tensor<S> {
    let [n, c, h2, w2] = dims4(dy);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let src = dy.data();
    for (plane, dst) in dx.data_mut().chunks_exact_mut(h * w).enumerate() {
        let s = &src[plane * h2 * w2..(plane + 1) * h2 * w2];
        for i in 0..h2 {
            for j in 0..w2 {
                dst[(i / 2) * w + j / 2] += s[i * w2 + j];
            }
        }
    }
    dx
}

#[derive(Clone, Debug)]
pub enum Layer<S> {
    Conv(Conv2d<S>),
    Relu,
    /// Nearest-neighbour 2x upsampling.
    Upsample2,
}

/// Feed-forward stack of convolutional layers.
#[derive(Clone, Debug)]
pub struct Sequential<S> {
    pub layers: Vec<Layer<S>>,
}

impl<S: Scalar> Sequential<S> {
    pub fn new(layers: Vec<Layer<S>>) -> Self {
        Self { layers }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Tensor<S> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = apply(layer, &cur);
        }
        cur
    }

    /// Forward pass that also returns the input of every layer.
    pub fn forward_cached(&self, x: &Tensor<S>) -> (Tensor<S>, Vec<Tensor<S>>) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let next = apply(layer, &cur);
            inputs.push(std::mem::replace(&mut cur, next));
        }
        (cur, inputs)
    }

    pub fn backward(
        &self,
        inputs: &[Tensor<S>],
        dy: Tensor<S>,
        grad: &mut Self,
        need_dx: bool,
    ) -> Option<Tensor<S>> {
        let mut cur = dy;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let want = need_dx || i > 0;
            let x = &inputs[i];
            cur = match (layer, &mut grad.layers[i]) {
                (Layer::Conv(conv), Layer::Conv(g)) => conv.backward(x, &cur, g, want)?,
                (Layer::Relu, _) => {
                    let mut d = cur;
                    for (g, &xi) in d.data_mut().iter_mut().zip(x.data()) {
                        if xi <= S::zero() {
                            *g = S::zero();
                        }
                    }
                    d
                }
                (Layer::Upsample2, _) => upsample2_backward(&cur),
                _ => unreachable!("gradient layout mismatch"),
            };
        }
        Some(cur)
    }

    /// Channel count produced by the last convolution.
    pub fn out_channels(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Conv(c) => Some(c.out_channels()),
                _ => None,
            })
            .unwrap_or(0)
    }
}

fn apply<S: Scalar>(layer: &Layer<S>, x: &Tensor<S>) -> Tensor<S> {
    match layer {
        Layer::Conv(c) => c.forward(x),
        Layer::Relu => x.map(|v| if v > S::zero() { v } else { S::zero() }),
        Layer::Upsample2 => upsample2(x),
    }
}

impl<S: Scalar> Params<S> for Sequential<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        for (i, l) in self.layers.iter().enumerate() {
            if let Layer::Conv(c) = l {
                c.visit(&join(prefix, &format!("layers.{i}")), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            if let Layer::Conv(c) = l {
                c.visit_mut(&join(prefix, &format!("layers.{i}")), f);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm<S> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
}

pub struct LayerNormCache<S> {
    xhat: Tensor<S>,
    rstd: Vec<S>,
}

const LN_EPS: f64 = 1e-5;

impl<S: Scalar> LayerNorm<S> {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: Tensor::full(&[d], S::one()),
            beta: Tensor::zeros(&[d]),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> (Tensor<S>, LayerNormCache<S>) {
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let dn = S::lit(d as f64);
        let mut xhat = Tensor::zeros(&[n, d]);
        let mut y = Tensor::zeros(&[n, d]);
        let mut rstd = Vec::with_capacity(n);
        for i in 0..n {
            let row = x.row(i);
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let r = S::one() / (var + S::lit(LN_EPS)).sqrt();
            rstd.push(r);
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat.data_mut()[i * d + j] = h;
                y.data_mut()[i * d + j] = h * self.gamma.data()[j] + self.beta.data()[j];
            }
        }
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LayerNormCache<S>, dy: &Tensor<S>, grad: &mut Self) -> Tensor<S> {
        let (n, d) = (dy.shape()[0], dy.shape()[1]);
        let dn = S::lit(d as f64);
        let mut dx = Tensor::zeros(&[n, d]);
        for i in 0..n {
            let dyr = dy.row(i);
            let xh = cache.xhat.row(i);
            let mut mean_dxh = S::zero();
            let mut mean_dxh_xh = S::zero();
            for j in 0..d {
                grad.gamma.data_mut()[j] += dyr[j] * xh[j];
                grad.beta.data_mut()[j] += dyr[j];
                let dxh = dyr[j] * self.gamma.data()[j];
                mean_dxh += dxh;
                mean_dxh_xh += dxh * xh[j];
            }
            mean_dxh /= dn;
            mean_dxh_xh /= dn;
            for j in 0..d {
                let dxh = dyr[j] * self.gamma.data()[j];
                dx.data_mut()[i * d + j] = cache.rstd[i] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
            }
        }
        dx
    }
}

impl<S: Scalar> Params<S> for LayerNorm<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

#[derive(Clone, Debug)]
pub struct Embedding<S> {
    pub table: Tensor<S>,
}

impl<S: Scalar> Embedding<S> {
    pub fn new(rows: usize, dim: usize, rng: &mut SeededRng) -> Self {
        Self {
            table: Tensor::randn(&[rows, dim], 0.02, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn rows(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn forward(&self, ids: &[usize]) -> Tensor<S> {
        let d = self.dim();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(self.table.row(i));
        }
        Tensor::new(vec![ids.len(), d], out).unwrap()
    }

    pub fn backward(&self, ids: &[usize], dy: &Tensor<S>, grad: &mut Self) {
        let d = self.dim();
        for (r, &i) in ids.iter().enumerate() {
            let dst = &mut grad.table.data_mut()[i * d..(i + 1) * d];
            for (g, &v) in dst.iter_mut().zip(dy.row(r)) {
                *g += v;
            }
        }
    }
}

impl<S: Scalar> Params<S> for Embedding<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        f(&join(prefix, "table"), &self.table);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        f(&join(prefix, "table"), &mut self.table);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu<S: Scalar>(x: S) -> S {
    let c = S::lit(GELU_C);
    let a = S::lit(0.044715);
    let half = S::lit(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::lit(GELU_C);
    let a = S::lit(0.044715);
    let half = S::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::lit(3.0) * a * x * x)
}
