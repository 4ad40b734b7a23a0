//! Frechet distance between feature sets, feature extraction and top-1.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::InputPipeline;
use crate::data::{write_png, DatasetManifest};
use crate::error::{Error, Result};
use crate::linalg::{matmul, sqrt_psd, sym_eigen};
use crate::model::{dataset_features, predict, Backbone, Preprocess, TaskModel};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `N x d` feature matrix, row-major, in f64.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureBag {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f64>,
    pub extractor_id: String,
}

impl FeatureBag {
    pub fn new(n: usize, d: usize, data: Vec<f64>, extractor_id: impl Into<String>) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::Shape {
                expected: vec![n, d],
                got: vec![data.len()],
            });
        }
        if n == 0 || d == 0 {
            return Err(Error::Validation("feature bag must be non-empty".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature bag".into()));
        }
        Ok(Self {
            n,
            d,
            data,
            extractor_id: extractor_id.into(),
        })
    }

    pub fn from_tensor<S: Scalar>(t: &Tensor<S>, extractor_id: impl Into<String>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 2 {
            return Err(Error::Shape {
                expected: vec![0, 0],
                got: s.to_vec(),
            });
        }
        Self::new(s[0], s[1], t.data().iter().map(|v| v.to_f64_lossy()).collect(), extractor_id)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    /// Fewer than `d + 1` rows: the covariance is rank deficient.
    pub fn degenerate(&self) -> bool {
        self.n < self.d + 1
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut mu = vec![0.0; self.d];
        for i in 0..self.n {
            for (m, v) in mu.iter_mut().zip(self.row(i)) {
                *m += v;
            }
        }
        mu.iter_mut().for_each(|m| *m /= self.n as f64);
        mu
    }

    /// Unbiased covariance (`N - 1` denominator; `N = 1` gives zeros).
    pub fn covariance(&self) -> Vec<f64> {
        let mu = self.mean();
        let d = self.d;
        let mut c = vec![0.0; d * d];
        for i in 0..self.n {
            let r = self.row(i);
            for a in 0..d {
                let da = r[a] - mu[a];
                for b in 0..d {
                    c[a * d + b] += da * (r[b] - mu[b]);
                }
            }
        }
        let denom = (self.n.max(2) - 1) as f64;
        c.iter_mut().for_each(|v| *v /= denom);
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdResult {
    pub value: f64,
    pub mu_a: Vec<f64>,
    pub mu_b: Vec<f64>,
    pub mean_term: f64,
    pub trace_term: f64,
    pub degenerate: bool,
}

/// `|mu_a - mu_b|^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2})` with `eps * I` added to
/// both covariances. The root trace is taken from the eigenvalues of the
/// symmetric `Sa^{1/2} Sb Sa^{1/2}`.
pub fn fd_score(a: &FeatureBag, b: &FeatureBag, eps: f64) -> Result<FdResult> {
    if a.d != b.d {
        return Err(Error::Shape {
            expected: vec![a.d],
            got: vec![b.d],
        });
    }
    let d = a.d;
    let (mu_a, mu_b) = (a.mean(), b.mean());
    let mean_term: f64 = mu_a.iter().zip(&mu_b).map(|(x, y)| (x - y) * (x - y)).sum();
    let ridge = |mut c: Vec<f64>| {
        for i in 0..d {
            c[i * d + i] += eps;
        }
        c
    };
    let (ca, cb) = (ridge(a.covariance()), ridge(b.covariance()));
    let ra = sqrt_psd(&ca, d);
    let inner = matmul(&matmul(&ra, &cb, d), &ra, d);
    let (vals, _) = sym_eigen(&inner, d);
    let root_trace: f64 = vals.iter().map(|l| l.max(0.0).sqrt()).sum();
    let tr = |c: &[f64]| (0..d).map(|i| c[i * d + i]).sum::<f64>();
    let trace_term = tr(&ca) + tr(&cb) - 2.0 * root_trace;
    Ok(FdResult {
        value: mean_term + trace_term,
        mu_a,
        mu_b,
        mean_term,
        trace_term,
        degenerate: a.degenerate() || b.degenerate(),
    })
}

/// Pooled backbone features of every record (centre crop).
pub fn extract_features<S: Scalar>(
    backbone: &Backbone<S>,
    d: &DatasetManifest<S>,
    pipeline: &InputPipeline,
    extractor_id: &str,
) -> Result<FeatureBag> {
    FeatureBag::from_tensor(&dataset_features(backbone, d, pipeline)?, extractor_id)
}

/// Share of records whose argmax logit (lowest index on ties) equals the
/// label.
pub fn top1_accuracy<S: Scalar>(model: &TaskModel<S>, d: &DatasetManifest<S>, pipeline: &InputPipeline) -> Result<f64> {
    if d.is_empty() {
        return Err(Error::Validation("dataset is empty".into()));
    }
    let labels: Vec<usize> = d
        .labels()
        .into_iter()
        .map(|l| l.ok_or_else(|| Error::Validation("top-1 needs a labeled dataset".into())))
        .collect::<Result<_>>()?;
    let pre = Preprocess::new(d, pipeline)?;
    let hits = predict(model, &pre).iter().zip(&labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Bar chart, one bar per value, bars scaled to the largest value.
pub fn fd_bar_chart(values: &[f64], path: &Path) -> Result<()> {
    const PALETTE: [[f64; 3]; 4] = [[0.20, 0.40, 0.80], [0.85, 0.45, 0.15], [0.25, 0.65, 0.30], [0.60, 0.30, 0.65]];
    let (h, bar, gap) = (120usize, 40usize, 20usize);
    let w = gap + values.len() * (bar + gap);
    let top = values.iter().copied().fold(0.0f64, f64::max).max(1e-12);
    let mut img = Tensor::<f64>::full(&[h, w, 3], 1.0);
    for (k, &v) in values.iter().enumerate() {
        let height = ((v.max(0.0) / top) * (h - 10) as f64).round() as usize;
        let left = gap + k * (bar + gap);
        for y in h - height..h {
            for x in left..left + bar {
                for c in 0..3 {
                    img.data_mut()[(y * w + x) * 3 + c] = PALETTE[k % PALETTE.len()][c];
                }
            }
        }
    }
    write_png(&img, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_bags_score_zero() {
        let a = FeatureBag::new(4, 2, vec![0.0, 1.0, 2.0, 0.5, -1.0, 3.0, 0.3, 0.3], "t").unwrap();
        assert!(fd_score(&a, &a, 1e-6).unwrap().value.abs() < 1e-9);
    }

    #[test]
    fn one_dimensional_closed_form() {
        // Sample mean 0 / 1 and unbiased variance 1 each.
        let a = FeatureBag::new(2, 1, vec![-(0.5f64).sqrt(), (0.5f64).sqrt()], "t").unwrap();
        let b = FeatureBag::new(2, 1, vec![1.0 - (0.5f64).sqrt(), 1.0 + (0.5f64).sqrt()], "t").unwrap();
        assert!((fd_score(&a, &b, 1e-6).unwrap().value - 1.0).abs() < 1e-6);
    }

    #[test]
    fn dimension_mismatch() {
        let a = FeatureBag::new(2, 1, vec![0.0, 1.0], "t").unwrap();
        let b = FeatureBag::new(1, 2, vec![0.0, 1.0], "t").unwrap();
        assert!(fd_score(&a, &b, 1e-6).is_err());
    }

    #[test]
    fn degenerate_flag() {
        let a = FeatureBag::new(2, 2, vec![0.0; 4], "t").unwrap();
        assert!(a.degenerate());
        assert!(fd_score(&a, &a, 1e-6).unwrap().degenerate);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(FeatureBag::new(1, 1, vec![f64::NAN], "t").is_err());
    }
}
