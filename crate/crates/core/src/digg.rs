//! Downstream image-guided generation: mask part of a downstream image's
//! token grid, complete it with the latent transformer and decode the
//! result into a pseudo-image for distillation.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{write_png, DatasetManifest, ImageRecord, Provenance};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::transformer::{complete_tokens, LatentTransformer, MaskGrid, SamplingParams};
use crate::vq::{TokenGrid, VqModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskScheme {
    BottomHalf,
    TopHalf,
    /// Whole rows, chosen at random.
    RandomRows,
    /// One contiguous run of cells in raster order at a random offset.
    RandomBlock,
    /// Nothing masked; generation degenerates to re-representation.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSpec {
    pub scheme: MaskScheme,
    /// Masked share of the grid for the random schemes.
    pub ratio: f64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            scheme: MaskScheme::BottomHalf,
            ratio: 0.5,
        }
    }
}

impl MaskSpec {
    pub fn new(scheme: MaskScheme, ratio: f64) -> Self {
        Self { scheme, ratio }
    }

    pub fn validate(&self) -> Result<()> {
        let randomized = matches!(self.scheme, MaskScheme::RandomRows | MaskScheme::RandomBlock);
        if randomized && !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::Mask(format!("ratio {} outside (0, 1)", self.ratio)));
        }
        Ok(())
    }
}

/// Token-aligned mask; `true` cells are regenerated.
pub fn make_mask(h: usize, w: usize, spec: &MaskSpec, rng: &mut SeededRng) -> Result<MaskGrid> {
    spec.validate()?;
    let mut m = MaskGrid::none(h, w);
    let cells = h * w;
    let target = ((spec.ratio * cells as f64).floor() as usize).max(1).min(cells);
    match spec.scheme {
        MaskScheme::BottomHalf => m.cells[(h - h / 2) * w..].fill(true),
        MaskScheme::TopHalf => m.cells[..(h / 2) * w].fill(true),
        MaskScheme::RandomRows => {
            let rows = (target / w).max(1);
            for &r in &rng.permutation(h)[..rows] {
                m.cells[r * w..(r + 1) * w].fill(true);
            }
        }
        MaskScheme::RandomBlock => {
            let start = rng.below(cells - target + 1);
            m.cells[start..start + target].fill(true);
        }
        MaskScheme::None => {}
    }
    Ok(m)
}

/// Accept empty masks, unions of whole rows and single contiguous raster
/// runs; anything more scattered would need non-causal infilling.
pub fn check_mask(m: &MaskGrid) -> Result<()> {
    if m.cells.len() != m.h * m.w {
        return Err(Error::Mask("mask cell count does not match its shape".into()));
    }
    let whole_rows = m
        .cells
        .chunks(m.w.max(1))
        .all(|row| row.iter().all(|&c| c) || row.iter().all(|&c| !c));
    let runs = m.cells.windows(2).filter(|p| !p[0] && p[1]).count() + usize::from(m.cells.first() == Some(&true));
    if whole_rows || runs <= 1 {
        Ok(())
    } else {
        Err(Error::Mask(format!(
            "scattered mask ({runs} separate runs, not whole rows) cannot be completed causally"
        )))
    }
}

#[derive(Clone, Debug)]
pub struct PseudoImage<S> {
    pub pixels: Tensor<S>,
    pub source_id: String,
    pub mask: MaskGrid,
    pub variant_index: usize,
    pub tokens: TokenGrid,
}

/// Stream for one `(source, variant)` pair; independent of scheduling.
pub fn variant_rng(master: &SeededRng, source_id: &str, variant: usize) -> SeededRng {
    master.derive(format!("digg/{source_id}/{variant}"))
}

pub fn generate_pseudo<S: Scalar>(
    x: &ImageRecord<S>,
    n_variants: usize,
    vq: &VqModel<S>,
    lt: &LatentTransformer<S>,
    spec: &MaskSpec,
    sampling: &SamplingParams,
    master: &SeededRng,
) -> Result<Vec<PseudoImage<S>>> {
    generate_variants(x, 0..n_variants, vq, lt, spec, sampling, master)
}

fn generate_variants<S: Scalar>(
    x: &ImageRecord<S>,
    variants: std::ops::Range<usize>,
    vq: &VqModel<S>,
    lt: &LatentTransformer<S>,
    spec: &MaskSpec,
    sampling: &SamplingParams,
    master: &SeededRng,
) -> Result<Vec<PseudoImage<S>>> {
    if variants.is_empty() {
        return Ok(Vec::new());
    }
    let source = vq.tokenize(&x.pixels)?;
    variants
        .map(|v| {
            let mut rng = variant_rng(master, &x.id, v);
            let mask = make_mask(source.h, source.w, spec, &mut rng)?;
            check_mask(&mask)?;
            let tokens = complete_tokens(&source, &mask, lt, sampling, &mut rng)?;
            Ok(PseudoImage {
                pixels: vq.decode(&tokens)?,
                source_id: x.id.clone(),
                mask,
                variant_index: v,
                tokens,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiggConfig {
    pub mask: MaskSpec,
    pub sampling: SamplingParams,
    pub target_count: usize,
    /// Sources shown in the contact sheet.
    pub sheet_rows: usize,
    pub sheet_variants: usize,
}

impl Default for DiggConfig {
    fn default() -> Self {
        Self {
            mask: MaskSpec::default(),
            sampling: SamplingParams::default(),
            target_count: 5000,
            sheet_rows: 8,
            sheet_variants: 6,
        }
    }
}

/// Token-space lineage of one pseudo-image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lineage {
    pub id: String,
    pub source_id: String,
    pub variant_index: usize,
    pub mask: MaskGrid,
    pub source_tokens: TokenGrid,
    pub tokens: TokenGrid,
}

impl Lineage {
    /// Unmasked cells carry the source tokens unchanged.
    pub fn holds(&self) -> bool {
        self.mask
            .cells
            .iter()
            .zip(self.tokens.tokens.iter().zip(&self.source_tokens.tokens))
            .all(|(&m, (a, b))| m || a == b)
    }
}

pub struct DistillSet<S> {
    pub manifest: DatasetManifest<S>,
    pub lineage: Vec<Lineage>,
}

/// Pseudo-image `j` comes from source `j % |d|` as variant `j / |d|`, so
/// each source contributes `floor` or `ceil` of `target / |d|` images.
pub fn build_distill_set<S: Scalar>(
    d: &DatasetManifest<S>,
    target_count: usize,
    vq: &VqModel<S>,
    lt: &LatentTransformer<S>,
    spec: &MaskSpec,
    sampling: &SamplingParams,
    master: &SeededRng,
) -> Result<DistillSet<S>> {
    let n = d.len();
    if n == 0 {
        return Err(Error::Validation("no source images for generation".into()));
    }
    if target_count < n {
        return Err(Error::Validation(format!(
            "target_count {target_count} is below the {n} source images"
        )));
    }
    spec.validate()?;
    let per_source: Vec<(Vec<PseudoImage<S>>, TokenGrid)> = d
        .records()
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let count = target_count / n + usize::from(i < target_count % n);
            let source = vq.tokenize(&rec.pixels)?;
            let v = generate_variants(rec, 0..count, vq, lt, spec, sampling, master)?;
            Ok((v, source))
        })
        .collect::<Result<_>>()?;
    let mut records = Vec::with_capacity(target_count);
    let mut lineage = Vec::with_capacity(target_count);
    for j in 0..target_count {
        let (src, var) = (j % n, j / n);
        let (variants, source_tokens) = &per_source[src];
        let p = &variants[var];
        let id = format!("{}_v{}", p.source_id, var);
        lineage.push(Lineage {
            id: id.clone(),
            source_id: p.source_id.clone(),
            variant_index: var,
            mask: p.mask.clone(),
            source_tokens: source_tokens.clone(),
            tokens: p.tokens.clone(),
        });
        records.push(ImageRecord {
            id,
            pixels: p.pixels.clone(),
            label: None,
            source_id: Some(p.source_id.clone()),
        });
    }
    let manifest = DatasetManifest::new(records, d.num_classes(), Provenance::Pseudo, Some(master.seed()))?;
    Ok(DistillSet { manifest, lineage })
}

/// Image grid: one row per source, the original leftmost, then variants.
pub fn contact_sheet<S: Scalar>(rows: &[(Tensor<S>, Vec<Tensor<S>>)], path: &Path) -> Result<()> {
    let Some((first, _)) = rows.first() else {
        return Err(Error::Validation("contact sheet needs at least one row".into()));
    };
    let (h, w, c) = (first.shape()[0], first.shape()[1], first.shape()[2]);
    let cols = 1 + rows.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    let gap = 2;
    let (sh, sw) = (rows.len() * (h + gap) + gap, cols * (w + gap) + gap);
    let mut sheet = Tensor::full(&[sh, sw, c], S::one());
    for (r, (orig, variants)) in rows.iter().enumerate() {
        for (col, img) in std::iter::once(orig).chain(variants).enumerate() {
            let (top, left) = (gap + r * (h + gap), gap + col * (w + gap));
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        sheet.data_mut()[((top + y) * sw + left + x) * c + ch] = img.data()[(y * w + x) * c + ch];
                    }
                }
            }
        }
    }
    write_png(&sheet, path)
}
