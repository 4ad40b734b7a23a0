//! Minimal layer library with explicit forward caches and backward passes.
//!
//! Every trainable module implements [`Params`]; a module of the same type
//! filled with zeros doubles as its gradient accumulator.

mod layers;
mod optim;

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

pub use layers::{
    col2im, gelu, gelu_grad, im2col, Conv2d, Embedding, Layer, LayerNorm, LayerNormCache, Linear,
    Sequential,
};
pub use optim::{Adam, MultiStepLr, Sgd};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub trait Params<S: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Clone of `m` with every parameter zeroed.
pub fn zeros_like<S: Scalar, M: Params<S> + Clone>(m: &M) -> M {
    let mut g = m.clone();
    g.visit_mut("", &mut |_, t| t.fill(S::zero()));
    g
}

pub fn named_params<S: Scalar, M: Params<S> + ?Sized>(m: &M, prefix: &str) -> Vec<(String, Tensor<S>)> {
    let mut out = Vec::new();
    m.visit(prefix, &mut |name, t| out.push((name.to_string(), t.clone())));
    out
}

pub fn param_count<S: Scalar, M: Params<S> + ?Sized>(m: &M) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, t| n += t.len());
    n
}

/// Overwrite every parameter of `m` from `source`, which must contain each
/// name with a matching shape.
pub fn load_params<S: Scalar, M: Params<S> + ?Sized>(
    m: &mut M,
    prefix: &str,
    source: &BTreeMap<String, Tensor<S>>,
) -> Result<()> {
    let mut err = None;
    m.visit_mut(prefix, &mut |name, t| {
        if err.is_some() {
            return;
        }
        match source.get(name) {
            Some(src) if src.shape() == t.shape() => *t = src.clone(),
            Some(src) => {
                err = Some(Error::Shape {
                    expected: t.shape().to_vec(),
                    got: src.shape().to_vec(),
                })
            }
            None => err = Some(Error::Format(format!("missing parameter '{name}'"))),
        }
    });
    err.map_or(Ok(()), Err)
}

/// SHA-256 over parameter names, shapes and raw bits.
pub fn checksum<S: Scalar, M: Params<S> + ?Sized>(m: &M) -> String {
    let mut hasher = Sha256::new();
    let mut buf = Vec::new();
    m.visit("", &mut |name, t| {
        hasher.update(name.as_bytes());
        for d in t.shape() {
            hasher.update((*d as u64).to_le_bytes());
        }
        buf.clear();
        S::write_le(t.data(), &mut buf);
        hasher.update(&buf);
    });
    hex::encode(hasher.finalize())
}

pub fn grads_finite<S: Scalar, M: Params<S> + ?Sized>(m: &M) -> bool {
    let mut ok = true;
    m.visit("", &mut |_, t| ok &= t.all_finite());
    ok
}

/// Sum `other` into `acc` parameter-wise.
pub fn accumulate<S: Scalar, M: Params<S>>(acc: &mut M, other: &M) {
    let mut srcs = Vec::new();
    other.visit("", &mut |_, t| srcs.push(t.clone()));
    let mut i = 0;
    acc.visit_mut("", &mut |_, t| {
        t.add_assign(&srcs[i]);
        i += 1;
    });
}

pub fn scale_params<S: Scalar, M: Params<S>>(m: &mut M, alpha: S) {
    m.visit_mut("", &mut |_, t| t.scale(alpha));
}
