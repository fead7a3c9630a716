//! Reference alignment, height quantization, patch tiling and splits.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{QuantizerConfig, Target};
use crate::covariance::FeatureCube;
use crate::error::{Error, Result};
use crate::raster::{box_sum, check_window, Grid};
use crate::tensor_io::{read_tensor, write_tensor, Tensor, TensorData};

/// Label value excluded from loss and metrics.
pub const IGNORE: i32 = -1;

/// Uniform height bins: class `k` covers `[h_min + k·step, h_min + (k+1)·step)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeightQuantizer {
    pub h_min: f64,
    pub step: f64,
    #[serde(rename = "K")]
    pub k: usize,
}

impl HeightQuantizer {
    pub fn new(h_min: f64, step: f64, k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::invalid("quantizer.K", format!("{k} classes; at least 2 required")));
        }
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::invalid("quantizer.step", "must be positive"));
        }
        if !h_min.is_finite() {
            return Err(Error::invalid("quantizer.h_min", "must be finite"));
        }
        Ok(HeightQuantizer { h_min, step, k })
    }

    /// Bins covering `[lo, hi]`: `h_min` is `lo` floored to the step and
    /// `K = ceil((hi − h_min) / step)`, unless fixed by the config.
    pub fn from_range(lo: f64, hi: f64, cfg: &QuantizerConfig) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(Error::Empty("reference has no valid heights".into()));
        }
        let h_min = cfg.h_min.unwrap_or((lo / cfg.step).floor() * cfg.step);
        let k = cfg
            .k
            .unwrap_or_else(|| (((hi - h_min) / cfg.step).ceil() as usize).max(2));
        HeightQuantizer::new(h_min, cfg.step, k)
    }

    /// `clamp(floor((h − h_min)/step), 0, K−1)`; NaN maps to [`IGNORE`].
    pub fn class(&self, h: f64) -> i32 {
        if h.is_nan() {
            return IGNORE;
        }
        let c = ((h - self.h_min) / self.step).floor();
        c.clamp(0.0, (self.k - 1) as f64) as i32
    }

    pub fn dequantize(&self, class: usize) -> f64 {
        self.h_min + (class as f64 + 0.5) * self.step
    }

    pub fn quantize(&self, map: &Grid<f64>) -> Grid<i32> {
        Grid { rows: map.rows, cols: map.cols, data: map.data.iter().map(|h| self.class(*h)).collect() }
    }
}

/// Edge-clipped boxcar mean of a reference map. NaN marks no-data: such
/// pixels are left out of every mean, and a window holding no valid pixel
/// yields NaN.
pub fn average_reference(map: &Grid<f64>, window: usize) -> Result<Grid<f64>> {
    check_window(window, map.rows, map.cols)?;
    if window == 1 {
        return Ok(map.clone());
    }
    let vals: Vec<f64> = map.data.iter().map(|v| if v.is_nan() { 0.0 } else { *v }).collect();
    let valid: Vec<f64> = map.data.iter().map(|v| if v.is_nan() { 0.0 } else { 1.0 }).collect();
    let sums = box_sum(&vals, map.rows, map.cols, window);
    let counts = box_sum(&valid, map.rows, map.cols, window);
    let data = sums
        .iter()
        .zip(&counts)
        .map(|(s, n)| if *n == 0.0 { f64::NAN } else { s / n })
        .collect();
    Ok(Grid { rows: map.rows, cols: map.cols, data })
}

pub fn quantize(map: &Grid<f64>, quantizer: &HeightQuantizer) -> Grid<i32> {
    quantizer.quantize(map)
}

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub r0: usize,
    pub c0: usize,
    pub h: usize,
    pub w: usize,
}

impl Rect {
    pub fn contains_patch(&self, r: usize, c: usize, size: usize) -> bool {
        r >= self.r0 && c >= self.c0 && r + size <= self.r0 + self.h && c + size <= self.c0 + self.w
    }

    pub fn intersects_patch(&self, r: usize, c: usize, size: usize) -> bool {
        r < self.r0 + self.h && self.r0 < r + size && c < self.c0 + self.w && self.c0 < c + size
    }

    /// The `size × size` square in the lower-right corner of an image.
    pub fn lower_right(rows: usize, cols: usize, size: usize) -> Rect {
        Rect { r0: rows - size, c0: cols - size, h: size, w: size }
    }
}

/// Patch origins on the stride grid; tiles crossing the border are dropped.
pub fn tile_origins(rows: usize, cols: usize, w: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    if stride == 0 {
        return Err(Error::invalid("stride", "must be at least 1"));
    }
    if w == 0 || rows < w || cols < w {
        return Err(Error::invalid("patch", format!("{rows}x{cols} image is smaller than W = {w}")));
    }
    let rs = (0..=rows - w).step_by(stride);
    Ok(rs.flat_map(|r| (0..=cols - w).step_by(stride).map(move |c| (r, c))).collect())
}

/// Feature/label patches sharing `W` and `M`. Features are `[n, W, W, M]`
/// and labels `[n, W, W, heads]`, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub patch: usize,
    pub channels: usize,
    pub heads: usize,
    pub origins: Vec<(usize, usize)>,
    pub features: Vec<f32>,
    pub labels: Vec<i32>,
}

impl PatchSet {
    pub fn empty(patch: usize, channels: usize, heads: usize) -> Self {
        PatchSet { patch, channels, heads, origins: vec![], features: vec![], labels: vec![] }
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn feature_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn label_len(&self) -> usize {
        self.patch * self.patch * self.heads
    }

    pub fn features_of(&self, i: usize) -> &[f32] {
        let n = self.feature_len();
        &self.features[i * n..(i + 1) * n]
    }

    pub fn labels_of(&self, i: usize) -> &[i32] {
        let n = self.label_len();
        &self.labels[i * n..(i + 1) * n]
    }

    /// Valid-pixel mask of head `head` of patch `i`.
    pub fn mask(&self, i: usize, head: usize) -> Vec<bool> {
        self.labels_of(i).chunks_exact(self.heads).map(|l| l[head] != IGNORE).collect()
    }

    pub fn push(&mut self, origin: (usize, usize), features: &[f32], labels: &[i32]) {
        assert_eq!(features.len(), self.feature_len());
        assert_eq!(labels.len(), self.label_len());
        self.origins.push(origin);
        self.features.extend_from_slice(features);
        self.labels.extend_from_slice(labels);
    }

    pub fn subset(&self, idx: &[usize]) -> PatchSet {
        let mut out = PatchSet::empty(self.patch, self.channels, self.heads);
        for &i in idx {
            out.push(self.origins[i], self.features_of(i), self.labels_of(i));
        }
        out
    }
}

/// Cuts training patches from a feature cube and per-head label maps.
pub fn tile_patches(features: &FeatureCube, labels: &[Grid<i32>], w: usize, stride: usize) -> Result<PatchSet> {
    if labels.iter().any(|l| l.rows != features.rows || l.cols != features.cols) {
        return Err(Error::Shape("label maps must share the feature grid".into()));
    }
    let origins = tile_origins(features.rows, features.cols, w, stride)?;
    let heads = labels.len();
    let m = features.channels;
    let mut set = PatchSet::empty(w, m, heads);
    let mut f = Vec::with_capacity(w * w * m);
    let mut l = Vec::with_capacity(w * w * heads);
    for (r0, c0) in origins {
        f.clear();
        l.clear();
        for r in r0..r0 + w {
            for c in c0..c0 + w {
                f.extend(features.pixel(r, c).iter().map(|v| *v as f32));
                l.extend(labels.iter().map(|g| *g.get(r, c)));
            }
        }
        set.push((r0, c0), &f, &l);
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: PatchSet,
    pub val: PatchSet,
    pub test: PatchSet,
}

/// Test patches are those inside `test`; patches that straddle its border
/// are dropped; the rest are shuffled with `seed` and split 80/20.
pub fn split(patches: &PatchSet, test: Rect, rows: usize, cols: usize, seed: u64) -> Result<Splits> {
    if test.h == 0 || test.w == 0 || test.r0 + test.h > rows || test.c0 + test.w > cols {
        return Err(Error::invalid("experiment.test_size", "test rectangle lies outside the image"));
    }
    let w = patches.patch;
    let mut test_idx = vec![];
    let mut pool = vec![];
    for (i, &(r, c)) in patches.origins.iter().enumerate() {
        if test.contains_patch(r, c, w) {
            test_idx.push(i);
        } else if !test.intersects_patch(r, c, w) {
            pool.push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    let n_train = (pool.len() as f64 * 0.8).round() as usize;
    if n_train == 0 {
        return Err(Error::Empty("training split is empty".into()));
    }
    let (train, val) = pool.split_at(n_train);
    Ok(Splits { train: patches.subset(train), val: patches.subset(val), test: patches.subset(&test_idx) })
}

/// A built dataset: quantized splits plus the metadata needed to decode
/// predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub targets: Vec<Target>,
    pub quantizers: Vec<HeightQuantizer>,
    pub names: Vec<String>,
    pub test_rect: Rect,
    pub seed: u64,
    pub splits: Splits,
}

#[derive(Serialize, Deserialize)]
struct PatchesJson {
    patch: usize,
    channels: usize,
    targets: Vec<Target>,
    quantizers: Vec<HeightQuantizer>,
    channel_names: Vec<String>,
    test_rect: Rect,
    seed: u64,
    train: Vec<(usize, usize)>,
    val: Vec<(usize, usize)>,
    test: Vec<(usize, usize)>,
}

/// Inputs of [`build_dataset`].
pub struct BuildOptions<'a> {
    pub quantizer: &'a QuantizerConfig,
    pub window: usize,
    pub patch: usize,
    pub stride: usize,
    pub test_rect: Rect,
    pub seed: u64,
}

/// Averages and quantizes each reference map, tiles and splits. Quantizer
/// ranges come from the reference outside the test rectangle.
pub fn build_dataset(features: &FeatureCube, references: &[(Target, &Grid<f64>)], opts: &BuildOptions) -> Result<Dataset> {
    let mut quantizers = vec![];
    let mut labels = vec![];
    let rect = opts.test_rect;
    for (_, reference) in references {
        let avg = average_reference(reference, opts.window)?;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for r in 0..avg.rows {
            for c in 0..avg.cols {
                let v = *avg.get(r, c);
                if !v.is_nan() && !rect.intersects_patch(r, c, 1) {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
        }
        let q = HeightQuantizer::from_range(lo, hi, opts.quantizer)?;
        labels.push(q.quantize(&avg));
        quantizers.push(q);
    }
    let patches = tile_patches(features, &labels, opts.patch, opts.stride)?;
    let splits = split(&patches, rect, features.rows, features.cols, opts.seed)?;
    if splits.val.is_empty() {
        return Err(Error::Empty("validation split is empty".into()));
    }
    Ok(Dataset {
        targets: references.iter().map(|(t, _)| *t).collect(),
        quantizers,
        names: features.names.clone(),
        test_rect: rect,
        seed: opts.seed,
        splits,
    })
}

fn set_tensors(set: &PatchSet, split: &str) -> (Tensor, Tensor) {
    let n = set.len();
    let f = Tensor::new(vec![n, set.patch, set.patch, set.channels], TensorData::Real32(set.features.clone()))
        .expect("consistent patch features")
        .with_name(format!("{split}_features"));
    let l = Tensor::new(vec![n, set.patch, set.patch, set.heads], TensorData::Int32(set.labels.clone()))
        .expect("consistent patch labels")
        .with_name(format!("{split}_labels"))
        .with_units("class");
    (f, l)
}

impl Dataset {
    pub fn patch(&self) -> usize {
        self.splits.train.patch
    }

    pub fn channels(&self) -> usize {
        self.splits.train.channels
    }

    /// Writes `{split}_features.ten`, `{split}_labels.ten` and `patches.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let s = &self.splits;
        for (name, set) in [("train", &s.train), ("val", &s.val), ("test", &s.test)] {
            let (f, l) = set_tensors(set, name);
            write_tensor(&f, dir.join(format!("{name}_features.ten")))?;
            write_tensor(&l, dir.join(format!("{name}_labels.ten")))?;
        }
        let meta = PatchesJson {
            patch: self.patch(),
            channels: self.channels(),
            targets: self.targets.clone(),
            quantizers: self.quantizers.clone(),
            channel_names: self.names.clone(),
            test_rect: self.test_rect,
            seed: self.seed,
            train: s.train.origins.clone(),
            val: s.val.origins.clone(),
            test: s.test.origins.clone(),
        };
        let path = dir.join("patches.json");
        std::fs::write(&path, serde_json::to_string_pretty(&meta).expect("metadata serializes"))
            .map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("patches.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: PatchesJson = serde_json::from_str(&text)
            .map_err(|e| Error::Metadata { path: path.clone(), reason: e.to_string() })?;
        let heads = meta.targets.len();
        let load = |name: &str, origins: Vec<(usize, usize)>| -> Result<PatchSet> {
            let f = read_tensor(dir.join(format!("{name}_features.ten")))?;
            let l = read_tensor(dir.join(format!("{name}_labels.ten")))?;
            let expect_f = vec![origins.len(), meta.patch, meta.patch, meta.channels];
            let expect_l = vec![origins.len(), meta.patch, meta.patch, heads];
            if f.shape != expect_f || l.shape != expect_l {
                return Err(Error::Metadata { path: path.clone(), reason: format!("{name} split shape disagrees with patches.json") });
            }
            let (_, features) = f.into_f32()?;
            let labels = match l.data {
                TensorData::Int32(v) => v,
                other => return Err(Error::UnsupportedDtype(format!("{:?} labels", other.dtype()))),
            };
            Ok(PatchSet { patch: meta.patch, channels: meta.channels, heads, origins, features, labels })
        };
        let splits = Splits {
            train: load("train", meta.train)?,
            val: load("val", meta.val)?,
            test: load("test", meta.test)?,
        };
        Ok(Dataset {
            targets: meta.targets,
            quantizers: meta.quantizers,
            names: meta.channel_names,
            test_rect: meta.test_rect,
            seed: meta.seed,
            splits,
        })
    }
}
