//! Image records, dataset manifests and the on-disk dataset layout.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! <root>/manifest.tsv    id<TAB>path<TAB>label[<TAB>source_id]
//! <root>/dataset.json    {num_classes, provenance, source_seed, height, width, channels}
//! <root>/images/*.png    one 8-bit PNG per record
//! ```
//!
//! `dataset.json` is optional when loading; without it the dataset is taken
//! to be `original` with `num_classes = max(label) + 1`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const META_FILE: &str = "dataset.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Original,
    ReRepresented,
    Pseudo,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Original => "original",
            Provenance::ReRepresented => "re_represented",
            Provenance::Pseudo => "pseudo",
        })
    }
}

/// One image with its label. Pixels are `[H, W, C]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord<S> {
    pub id: String,
    pub pixels: Tensor<S>,
    pub label: Option<usize>,
    /// Downstream record a pseudo-image was generated from.
    pub source_id: Option<String>,
}

impl<S: Scalar> ImageRecord<S> {
    pub fn new(id: impl Into<String>, pixels: Tensor<S>, label: Option<usize>) -> Self {
        Self {
            id: id.into(),
            pixels,
            label,
            source_id: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest<S> {
    records: Vec<ImageRecord<S>>,
    num_classes: usize,
    provenance: Provenance,
    source_seed: Option<u64>,
    shape: [usize; 3],
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    num_classes: usize,
    provenance: Provenance,
    source_seed: Option<u64>,
    height: usize,
    width: usize,
    channels: usize,
}

impl<S: Scalar> DatasetManifest<S> {
    pub fn new(
        records: Vec<ImageRecord<S>>,
        num_classes: usize,
        provenance: Provenance,
        source_seed: Option<u64>,
    ) -> Result<Self> {
        let shape = match records.first() {
            Some(r) => {
                let s = r.pixels.shape();
                if s.len() != 3 {
                    return Err(Error::Validation(format!(
                        "record '{}' pixels must be [H, W, C], got {:?}",
                        r.id, s
                    )));
                }
                [s[0], s[1], s[2]]
            }
            None => [0, 0, 0],
        };
        let mut ids = HashSet::with_capacity(records.len());
        for r in &records {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Validation(format!("duplicate record id '{}'", r.id)));
            }
            if r.pixels.shape() != shape {
                return Err(Error::Validation(format!(
                    "record '{}' has shape {:?}, dataset shape is {:?}",
                    r.id,
                    r.pixels.shape(),
                    shape
                )));
            }
            match r.label {
                Some(l) if l >= num_classes => {
                    return Err(Error::Validation(format!(
                        "record '{}' label {} >= num_classes {}",
                        r.id, l, num_classes
                    )))
                }
                None if provenance != Provenance::Pseudo => {
                    return Err(Error::Validation(format!(
                        "record '{}' is unlabeled in a {} dataset",
                        r.id, provenance
                    )))
                }
                _ => {}
            }
        }
        Ok(Self {
            records,
            num_classes,
            provenance,
            source_seed,
            shape,
        })
    }

    pub fn records(&self) -> &[ImageRecord<S>] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn source_seed(&self) -> Option<u64> {
        self.source_seed
    }

    /// `[H, W, C]` shared by all records.
    pub fn image_shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn labels(&self) -> Vec<Option<usize>> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn is_labeled(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.label.is_some())
    }

    pub fn require_provenance(&self, expected: Provenance) -> Result<()> {
        if self.provenance == expected {
            Ok(())
        } else {
            Err(Error::Provenance {
                expected: expected.to_string(),
                got: self.provenance,
            })
        }
    }

    /// New manifest over a subset of records, keeping metadata.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            ..self.clone_meta()
        }
    }

    pub fn with_records(&self, records: Vec<ImageRecord<S>>, provenance: Provenance) -> Result<Self> {
        Self::new(records, self.num_classes, provenance, self.source_seed)
    }

    fn clone_meta(&self) -> Self {
        Self {
            records: Vec::new(),
            num_classes: self.num_classes,
            provenance: self.provenance,
            source_seed: self.source_seed,
            shape: self.shape,
        }
    }

    /// Seeded split into `(train, validation)`; each part keeps manifest order.
    pub fn split(&self, val_fraction: f64, rng: &mut SeededRng) -> (Self, Self) {
        let n = self.records.len();
        let n_val = ((val_fraction * n as f64).round() as usize).min(n);
        let perm = rng.permutation(n);
        let mut val: Vec<usize> = perm[..n_val].to_vec();
        let mut train: Vec<usize> = perm[n_val..].to_vec();
        val.sort_unstable();
        train.sort_unstable();
        (self.select(&train), self.select(&val))
    }

    pub fn cast<T: Scalar>(&self) -> DatasetManifest<T> {
        DatasetManifest {
            records: self
                .records
                .iter()
                .map(|r| ImageRecord {
                    id: r.id.clone(),
                    pixels: r.pixels.cast(),
                    label: r.label,
                    source_id: r.source_id.clone(),
                })
                .collect(),
            num_classes: self.num_classes,
            provenance: self.provenance,
            source_seed: self.source_seed,
            shape: self.shape,
        }
    }
}

/// Uniform sample of `ceil(fraction * n)` records without replacement,
/// returned in manifest order. With `stratified`, each class is sampled
/// separately at the same fraction.
pub fn sample_few_data<S: Scalar>(
    d: &DatasetManifest<S>,
    fraction: f64,
    rng: &mut SeededRng,
    stratified: bool,
) -> Result<DatasetManifest<S>> {
    if d.is_empty() {
        return Err(Error::Validation("cannot sample from an empty dataset".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Validation(format!("fraction {fraction} outside (0, 1]")));
    }
    let count = |n: usize| ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let n = d.len();
    if fraction * (n as f64) < 1.0 {
        return Err(Error::Validation(format!(
            "fraction {fraction} of {n} records selects less than one record"
        )));
    }
    let mut chosen = if stratified {
        let mut by_class: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
        for (i, r) in d.records().iter().enumerate() {
            by_class.entry(r.label).or_default().push(i);
        }
        let mut chosen = Vec::new();
        for (label, members) in by_class {
            let mut class_rng = rng.derive(format!("class-{label:?}"));
            let perm = class_rng.permutation(members.len());
            chosen.extend(perm[..count(members.len())].iter().map(|&p| members[p]));
        }
        chosen
    } else {
        let perm = rng.permutation(n);
        perm[..count(n)].to_vec()
    };
    chosen.sort_unstable();
    let mut out = d.select(&chosen);
    out.source_seed = Some(rng.seed());
    Ok(out)
}

/// Read a dataset from `root` using the given manifest file.
pub fn load_dataset<S: Scalar>(root: &Path, manifest_file: &Path) -> Result<DatasetManifest<S>> {
    let text = fs::read_to_string(manifest_file).map_err(|e| Error::io(manifest_file, e))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Validation("manifest is empty".into()))?
        .split('\t')
        .collect();
    if header.len() < 3 || header[..3] != ["id", "path", "label"] {
        return Err(Error::Validation(format!(
            "manifest header must start with id\\tpath\\tlabel, got {header:?}"
        )));
    }
    let has_source = header.get(3) == Some(&"source_id");

    struct Row {
        id: String,
        path: PathBuf,
        label: Option<usize>,
        source_id: Option<String>,
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 3 {
            return Err(Error::Validation(format!(
                "manifest line {} has {} columns",
                lineno + 2,
                cols.len()
            )));
        }
        let label = if cols[2].is_empty() {
            None
        } else {
            Some(cols[2].parse::<usize>().map_err(|_| {
                Error::Validation(format!("record '{}' has invalid label '{}'", cols[0], cols[2]))
            })?)
        };
        rows.push(Row {
            id: cols[0].to_string(),
            path: root.join(cols[1]),
            label,
            source_id: if has_source {
                cols.get(3).filter(|s| !s.is_empty()).map(|s| s.to_string())
            } else {
                None
            },
        });
    }

    let meta_path = root.join(META_FILE);
    let meta: Option<DatasetMeta> = if meta_path.exists() {
        let raw = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        Some(serde_json::from_str(&raw).map_err(|e| Error::Format(format!("{META_FILE}: {e}")))?)
    } else {
        None
    };
    let channels = meta.as_ref().map_or(3, |m| m.channels);

    let records: Vec<ImageRecord<S>> = rows
        .into_par_iter()
        .map(|row| {
            let pixels = read_png(&row.path, channels).map_err(|reason| Error::Load {
                id: row.id.clone(),
                reason,
            })?;
            Ok(ImageRecord {
                id: row.id,
                pixels,
                label: row.label,
                source_id: row.source_id,
            })
        })
        .collect::<Result<_>>()?;

    let (num_classes, provenance, source_seed) = match meta {
        Some(m) => (m.num_classes, m.provenance, m.source_seed),
        None => (
            records.iter().filter_map(|r| r.label).max().map_or(0, |m| m + 1),
            Provenance::Original,
            None,
        ),
    };
    DatasetManifest::new(records, num_classes, provenance, source_seed)
}

/// Load `<root>/manifest.tsv`.
pub fn load_dataset_dir<S: Scalar>(root: &Path) -> Result<DatasetManifest<S>> {
    load_dataset(root, &root.join(MANIFEST_FILE))
}

/// Write the dataset layout under `root`, creating directories as needed.
pub fn save_dataset<S: Scalar>(d: &DatasetManifest<S>, root: &Path) -> Result<()> {
    let images = root.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    d.records()
        .par_iter()
        .map(|r| {
            let path = images.join(format!("{}.png", sanitize(&r.id)));
            write_png(&r.pixels, &path)
        })
        .collect::<Result<Vec<()>>>()?;

    let with_source = d.records().iter().any(|r| r.source_id.is_some());
    let mut manifest = String::from("id\tpath\tlabel");
    if with_source {
        manifest.push_str("\tsource_id");
    }
    manifest.push('\n');
    for r in d.records() {
        let label = r.label.map(|l| l.to_string()).unwrap_or_default();
        manifest.push_str(&format!("{}\timages/{}.png\t{}", r.id, sanitize(&r.id), label));
        if with_source {
            manifest.push('\t');
            manifest.push_str(r.source_id.as_deref().unwrap_or(""));
        }
        manifest.push('\n');
    }
    let mpath = root.join(MANIFEST_FILE);
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;

    let [h, w, c] = d.image_shape();
    let meta = DatasetMeta {
        num_classes: d.num_classes(),
        provenance: d.provenance(),
        source_seed: d.source_seed(),
        height: h,
        width: w,
        channels: if d.is_empty() { 3 } else { c },
    };
    let meta_path = root.join(META_FILE);
    fs::write(&meta_path, serde_json::to_string_pretty(&meta).unwrap())
        .map_err(|e| Error::io(&meta_path, e))?;
    Ok(())
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn read_png<S: Scalar>(path: &Path, channels: usize) -> std::result::Result<Tensor<S>, String> {
    if !path.exists() {
        return Err(format!("missing file {}", path.display()));
    }
    let img = image::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw: Vec<u8> = match channels {
        1 => img.into_luma8().into_raw(),
        3 => img.into_rgb8().into_raw(),
        c => return Err(format!("unsupported channel count {c}")),
    };
    let scale = S::lit(255.0);
    Ok(Tensor::new(vec![h, w, channels], raw.into_iter().map(|v| S::lit(v as f64) / scale).collect())
        .expect("decoded size"))
}

/// Quantize `[H, W, C]` pixels in `[0, 1]` to an 8-bit PNG.
pub fn write_png<S: Scalar>(pixels: &Tensor<S>, path: &Path) -> Result<()> {
    let s = pixels.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let bytes: Vec<u8> = pixels.data().iter().map(|&v| to_u8(v)).collect();
    let color = match c {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        other => return Err(Error::Validation(format!("cannot write {other}-channel PNG"))),
    };
    image::save_buffer(path, &bytes, w as u32, h as u32, color)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

pub fn to_u8<S: Scalar>(v: S) -> u8 {
    (v.to_f64_lossy().clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Bilinear resize of an `[H, W, C]` image (half-pixel centres).
pub fn resize_bilinear<S: Scalar>(img: &Tensor<S>, out_h: usize, out_w: usize) -> Tensor<S> {
    let s = img.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    if h == out_h && w == out_w {
        return img.clone();
    }
    let src = img.data();
    let mut out = Tensor::zeros(&[out_h, out_w, c]);
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for i in 0..out_h {
        let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = S::lit(fy - y0 as f64);
        for j in 0..out_w {
            let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = S::lit(fx - x0 as f64);
            for ch in 0..c {
                let p = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = p(y0, x0) + (p(y0, x1) - p(y0, x0)) * wx;
                let bot = p(y1, x0) + (p(y1, x1) - p(y1, x0)) * wx;
                out.data_mut()[(i * out_w + j) * c + ch] = top + (bot - top) * wy;
            }
        }
    }
    out
}

/// Square crop of side `size` with top-left corner `(top, left)`.
pub fn crop<S: Scalar>(img: &Tensor<S>, top: usize, left: usize, size: usize) -> Tensor<S> {
    let s = img.shape();
    let (w, c) = (s[1], s[2]);
    assert!(top + size <= s[0] && left + size <= w, "crop out of bounds");
    let mut out = Vec::with_capacity(size * size * c);
    for i in top..top + size {
        out.extend_from_slice(&img.data()[(i * w + left) * c..(i * w + left + size) * c]);
    }
    Tensor::new(vec![size, size, c], out).unwrap()
}

/// Stack `[H, W, C]` images into an `[N, C, H, W]` batch.
pub fn to_nchw<'a, S: Scalar>(images: impl IntoIterator<Item = &'a Tensor<S>>) -> Tensor<S> {
    let mut data = Vec::new();
    let mut n = 0;
    let mut dims = [0usize; 3];
    for img in images {
        let s = img.shape();
        let (h, w, c) = (s[0], s[1], s[2]);
        dims = [c, h, w];
        let src = img.data();
        for ch in 0..c {
            for p in 0..h * w {
                data.push(src[p * c + ch]);
            }
        }
        n += 1;
    }
    Tensor::new(vec![n, dims[0], dims[1], dims[2]], data).unwrap()
}

/// Image `i` of an `[N, C, H, W]` batch as `[H, W, C]`.
pub fn from_nchw<S: Scalar>(batch: &Tensor<S>, i: usize) -> Tensor<S> {
    let s = batch.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let src = &batch.data()[i * c * h * w..(i + 1) * c * h * w];
    let mut out = vec![S::zero(); h * w * c];
    for ch in 0..c {
        for p in 0..h * w {
            out[p * c + ch] = src[ch * h * w + p];
        }
    }
    Tensor::new(vec![h, w, c], out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> DatasetManifest<f32> {
        let records = (0..n)
            .map(|i| ImageRecord::new(format!("r{i}"), Tensor::full(&[2, 2, 3], i as f32 / n as f32), Some(i % 3)))
            .collect();
        DatasetManifest::new(records, 3, Provenance::Original, None).unwrap()
    }

    #[test]
    fn full_fraction_is_identity() {
        let d = toy(17);
        let mut rng = SeededRng::new(1, "few");
        let s = sample_few_data(&d, 1.0, &mut rng, false).unwrap();
        assert_eq!(s.records(), d.records());
    }

    #[test]
    fn ten_percent_of_hundred() {
        let d = toy(100);
        let mut rng = SeededRng::new(1, "few");
        let s = sample_few_data(&d, 0.1, &mut rng, false).unwrap();
        assert_eq!(s.len(), 10);
        let ids: HashSet<_> = s.records().iter().map(|r| r.id.clone()).collect();
        assert_eq!(ids.len(), 10);
        assert_eq!(s.provenance(), Provenance::Original);
    }

    #[test]
    fn seeded_sampling_replays() {
        let d = toy(100);
        let a = sample_few_data(&d, 0.1, &mut SeededRng::new(42, "few"), false).unwrap();
        let b = sample_few_data(&d, 0.1, &mut SeededRng::new(42, "few"), false).unwrap();
        assert_eq!(a.records(), b.records());
    }

    #[test]
    fn sampling_errors() {
        let empty = DatasetManifest::<f32>::new(vec![], 1, Provenance::Original, None).unwrap();
        let mut rng = SeededRng::new(0, "x");
        assert!(sample_few_data(&empty, 0.5, &mut rng, false).is_err());
        assert!(sample_few_data(&toy(5), 0.1, &mut rng, false).is_err());
        assert!(sample_few_data(&toy(5), 0.0, &mut rng, false).is_err());
    }

    #[test]
    fn stratified_covers_every_class() {
        let d = toy(30);
        let s = sample_few_data(&d, 0.1, &mut SeededRng::new(3, "s"), true).unwrap();
        let classes: HashSet<_> = s.records().iter().map(|r| r.label).collect();
        assert_eq!(classes.len(), 3);
    }

    #[test]
    fn validation_rejects_bad_labels_and_duplicates() {
        let px = Tensor::<f32>::zeros(&[1, 1, 1]);
        let bad = vec![ImageRecord::new("a", px.clone(), Some(2))];
        assert!(DatasetManifest::new(bad, 2, Provenance::Original, None).is_err());
        let dup = vec![ImageRecord::new("a", px.clone(), Some(0)), ImageRecord::new("a", px.clone(), Some(0))];
        assert!(DatasetManifest::new(dup, 2, Provenance::Original, None).is_err());
        let unlabeled = vec![ImageRecord::new("a", px.clone(), None)];
        assert!(DatasetManifest::new(unlabeled.clone(), 2, Provenance::Original, None).is_err());
        assert!(DatasetManifest::new(unlabeled, 2, Provenance::Pseudo, None).is_ok());
    }

    #[test]
    fn nchw_round_trip() {
        let mut rng = SeededRng::new(5, "nchw");
        let a = Tensor::<f32>::randn(&[3, 4, 2], 1.0, &mut rng);
        let b = Tensor::<f32>::randn(&[3, 4, 2], 1.0, &mut rng);
        let batch = to_nchw([&a, &b]);
        assert_eq!(batch.shape(), &[2, 2, 3, 4]);
        assert_eq!(from_nchw(&batch, 1), b);
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = Tensor::<f64>::full(&[4, 4, 3], 0.25);
        let up = resize_bilinear(&img, 7, 9);
        assert!(up.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert_eq!(resize_bilinear(&img, 4, 4), img);
    }
}
