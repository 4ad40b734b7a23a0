//! Two-domain synthetic shapes: the same four shape classes drawn with
//! different palettes and backgrounds, so domains differ in colour
//! statistics but share semantics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, ImageRecord, Provenance};
use crate::error::Result;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SHAPE_CLASSES: [&str; 4] = ["circle", "square", "triangle", "bar"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    /// Warm shapes on a dark blue ground.
    A,
    /// Cool shapes on a dark slate ground.
    B,
}

impl Domain {
    fn palette(self) -> (&'static [[f64; 3]], [f64; 3]) {
        match self {
            Domain::A => (&[[0.90, 0.20, 0.10], [0.95, 0.60, 0.10], [0.90, 0.85, 0.20]], [0.10, 0.10, 0.30]),
            Domain::B => (&[[0.10, 0.70, 0.30], [0.10, 0.60, 0.80], [0.50, 0.20, 0.70]], [0.15, 0.20, 0.20]),
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Domain::A),
            "b" => Ok(Domain::B),
            _ => Err(crate::error::Error::Config(format!("unknown domain '{s}'"))),
        }
    }
}

fn inside(class: usize, x: f64, y: f64, cx: f64, cy: f64, r: f64) -> bool {
    let (dx, dy) = (x - cx, y - cy);
    match class {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
        2 => {
            // Upward triangle with apex at cy - r and base at cy + r.
            let t = (dy + r) / (2.0 * r);
            (0.0..=1.0).contains(&t) && dx.abs() <= t * r
        }
        _ => dx.abs() <= r && dy.abs() <= 0.35 * r,
    }
}

/// One `size x size x 3` image of `class` (0..4).
pub fn draw_shape<S: Scalar>(class: usize, size: usize, domain: Domain, rng: &mut SeededRng) -> Tensor<S> {
    let (fgs, bg) = domain.palette();
    let s = size as f64;
    let cx = s * (0.35 + 0.3 * rng.uniform());
    let cy = s * (0.35 + 0.3 * rng.uniform());
    let r = s * (0.18 + 0.12 * rng.uniform());
    let fg = fgs[rng.below(fgs.len())];
    let jitter: Vec<f64> = (0..6).map(|_| 0.08 * (rng.uniform() - 0.5)).collect();
    let mut img = Tensor::zeros(&[size, size, 3]);
    for yi in 0..size {
        for xi in 0..size {
            let mut cover = 0.0;
            for (ox, oy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                if inside(class, xi as f64 + ox, yi as f64 + oy, cx, cy, r) {
                    cover += 0.25;
                }
            }
            for c in 0..3 {
                let f = fg[c] + jitter[c];
                let b = bg[c] + jitter[3 + c];
                let v = cover * f + (1.0 - cover) * b + 0.02 * rng.normal();
                img.data_mut()[(yi * size + xi) * 3 + c] = S::lit(v.clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// `count` labeled images with balanced classes (`label = i % 4`). Each
/// image draws from its own child stream, so the set is independent of
/// thread scheduling.
pub fn shapes_dataset<S: Scalar>(
    domain: Domain,
    count: usize,
    size: usize,
    prefix: &str,
    rng: &SeededRng,
) -> Result<DatasetManifest<S>> {
    let records: Vec<ImageRecord<S>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let class = i % SHAPE_CLASSES.len();
            let pixels = draw_shape(class, size, domain, &mut rng.derive(format!("{prefix}/{i}")));
            ImageRecord::new(format!("{prefix}_{i:05}"), pixels, Some(class))
        })
        .collect();
    DatasetManifest::new(records, SHAPE_CLASSES.len(), Provenance::Original, Some(rng.seed()))
}
