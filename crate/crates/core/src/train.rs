//! Training loop, fine-tuning, tiled inference and height metrics.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{NetworkConfig, Target, TrainingConfig};
use crate::covariance::{FeatureCube, FeatureStats};
use crate::dataset::{Dataset, HeightQuantizer, PatchSet, IGNORE};
use crate::error::{Error, Result};
use crate::nn::{loss_and_grad, lr_at, sgd_step, xavier_init, xavier_layer, ModelState, UNetConfig};
use crate::polarization::PolMode;
use crate::raster::{reflect_index, Grid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub epochs: usize,
    pub decay_factor: f64,
    pub decay_period: usize,
    pub seed: u64,
    pub normalize: bool,
    /// Stop once validation pixel accuracy reaches this value.
    pub stop_at_accuracy: Option<f64>,
}

impl TrainOptions {
    pub fn from_config(t: &TrainingConfig) -> Self {
        TrainOptions {
            lr: t.lr,
            momentum: t.momentum,
            batch: t.batch,
            epochs: t.epochs,
            decay_factor: t.decay_factor,
            decay_period: t.decay_period,
            seed: t.seed,
            normalize: t.normalize,
            stop_at_accuracy: None,
        }
    }

    /// Fine-tuning schedule: the base rate scaled by `finetune_lr_scale`.
    pub fn finetune_from_config(t: &TrainingConfig) -> Self {
        TrainOptions {
            lr: t.lr * t.finetune_lr_scale,
            epochs: t.finetune_epochs.unwrap_or(t.epochs),
            ..TrainOptions::from_config(t)
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(epoch, self.lr, self.decay_factor, self.decay_period)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub rows: Vec<EpochRow>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    /// Epoch whose weights were kept (lowest validation loss).
    pub best_epoch: Option<usize>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_accuracy,lr,seconds\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{:.3}\n",
                r.epoch, r.train_loss, r.val_loss, r.val_accuracy, r.lr, r.seconds
            ));
        }
        s
    }
}

/// Statistics over every pixel of the training patches.
pub fn patch_stats(set: &PatchSet) -> Result<FeatureStats> {
    let cube = FeatureCube {
        rows: set.len() * set.patch,
        cols: set.patch,
        channels: set.channels,
        names: vec![],
        data: set.features.iter().map(|v| *v as f64).collect(),
    };
    FeatureStats::compute(&cube, None)
}

fn normalized(set: &PatchSet, stats: &FeatureStats) -> Vec<f32> {
    let m = set.channels;
    let scale: Vec<f64> = stats.std.iter().map(|s| 1.0 / s.max(crate::covariance::STD_FLOOR)).collect();
    set.features
        .iter()
        .enumerate()
        .map(|(i, v)| ((*v as f64 - stats.mean[i % m]) * scale[i % m]) as f32)
        .collect()
}

/// Mean loss (sum over groups) and pixel accuracy of `state` on a patch
/// set whose features are already normalized.
fn evaluate_set(state: &ModelState, features: &[f32], set: &PatchSet) -> Result<(f64, f64)> {
    let w = set.patch;
    let heads = set.heads;
    let groups = &state.config.classes;
    let k_total = state.config.out_channels();
    let chunk = 16;
    let (mut loss_sum, mut counts) = (vec![0.0; heads], vec![0usize; heads]);
    let (mut correct, mut total) = (0usize, 0usize);
    for start in (0..set.len()).step_by(chunk) {
        let n = chunk.min(set.len() - start);
        let fl = set.feature_len();
        let logits = state.forward(&features[start * fl..(start + n) * fl], n, w)?;
        let labels = &set.labels[start * set.label_len()..(start + n) * set.label_len()];
        for (px, lab) in logits.chunks_exact(k_total).zip(labels.chunks_exact(heads)) {
            let mut off = 0;
            for (h, &k) in groups.iter().enumerate() {
                let l = lab[h];
                let z = &px[off..off + k];
                off += k;
                if l == IGNORE {
                    continue;
                }
                let max = z.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
                let lse = z.iter().map(|v| (*v as f64 - max).exp()).sum::<f64>().ln();
                loss_sum[h] += lse - (z[l as usize] as f64 - max);
                counts[h] += 1;
                if argmax(z) == l as usize {
                    correct += 1;
                }
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Empty("no labelled pixel to evaluate".into()));
    }
    let loss = loss_sum.iter().zip(&counts).map(|(s, c)| if *c > 0 { s / *c as f64 } else { 0.0 }).sum();
    Ok((loss, correct as f64 / total as f64))
}

fn argmax(z: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

/// Pixel accuracy of `state` on raw (unnormalized) patches.
pub fn patch_accuracy(state: &ModelState, set: &PatchSet) -> Result<f64> {
    Ok(evaluate_set(state, &normalized(set, &state.stats), set)?.1)
}

fn run(mut state: ModelState, data: &Dataset, opts: &TrainOptions) -> Result<(ModelState, TrainReport)> {
    if opts.batch == 0 {
        return Err(Error::invalid("training.batch", "must be at least 1"));
    }
    let train = &data.splits.train;
    let val = &data.splits.val;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("training needs nonempty train and validation splits".into()));
    }
    let w = train.patch;
    state.config.check_patch(w)?;
    let xs = normalized(train, &state.stats);
    let xv = normalized(val, &state.stats);
    let names = state.param_names();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(0x7261_696e);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainReport::default();
    let mut best: Option<(f64, ModelState)> = None;
    let (fl, ll) = (train.feature_len(), train.label_len());
    let mut bx = Vec::with_capacity(opts.batch * fl);
    let mut by = Vec::with_capacity(opts.batch * ll);
    for epoch in 0..opts.epochs {
        let started = Instant::now();
        let lr = opts.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut losses = vec![];
        for chunk in order.chunks(opts.batch) {
            bx.clear();
            by.clear();
            for &i in chunk {
                bx.extend_from_slice(&xs[i * fl..(i + 1) * fl]);
                by.extend_from_slice(train.labels_of(i));
            }
            let diverged = |state: &ModelState, best: &Option<(f64, ModelState)>| Error::Diverged {
                epoch,
                last_good: Box::new(best.as_ref().map_or_else(|| state.clone(), |b| b.1.clone())),
            };
            let (loss, grads) = loss_and_grad(&state.config, &state.params, &bx, &by, chunk.len(), w)?;
            if !loss.is_finite() {
                return Err(diverged(&state, &best));
            }
            match sgd_step(&mut state.params, &mut state.velocity, &grads, &names, lr, opts.momentum) {
                Ok(()) => {}
                Err(Error::NonFiniteGradient(_)) => return Err(diverged(&state, &best)),
                Err(e) => return Err(e),
            }
            losses.push(loss as f64);
            report.step_losses.push(loss as f64);
        }
        state.epoch = epoch + 1;
        let (val_loss, val_accuracy) = evaluate_set(&state, &xv, val)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch, last_good: Box::new(best.map_or(state, |b| b.1)) });
        }
        let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let row = EpochRow { epoch, train_loss, val_loss, val_accuracy, lr, seconds: started.elapsed().as_secs_f64() };
        log::info!(
            "epoch {epoch:>4}  lr {lr:.2e}  train {train_loss:.4}  val {val_loss:.4}  acc {:.3}",
            val_accuracy
        );
        report.rows.push(row);
        if best.as_ref().is_none_or(|b| val_loss < b.0) {
            best = Some((val_loss, state.clone()));
            report.best_epoch = Some(epoch);
        }
        if opts.stop_at_accuracy.is_some_and(|a| val_accuracy >= a) {
            break;
        }
    }
    Ok((best.map_or(state, |b| b.1), report))
}

fn network_for(data: &Dataset, net: &NetworkConfig) -> Result<UNetConfig> {
    UNetConfig::new(data.channels(), net.base_channels, net.levels, data.quantizers.iter().map(|q| q.k).collect())
}

/// Trains a fresh Xavier-initialized network on `data`. The returned state
/// is the one with the lowest validation loss.
pub fn train(data: &Dataset, net: &NetworkConfig, opts: &TrainOptions, mode: PolMode) -> Result<(ModelState, TrainReport)> {
    let cfg = network_for(data, net)?;
    let mut state = xavier_init(&cfg, opts.seed)?;
    state.targets = data.targets.clone();
    state.quantizers = data.quantizers.clone();
    state.mode = mode;
    state.stats = if opts.normalize { patch_stats(&data.splits.train)? } else { FeatureStats::identity(cfg.in_channels) };
    run(state, data, opts)
}

/// Starting point of fine-tuning: pretrained weights, a fresh optimizer,
/// the new dataset's quantizers and statistics, and a redrawn final layer
/// when the class counts differ.
pub fn prepare_finetune(pretrained: &ModelState, data: &Dataset, opts: &TrainOptions) -> Result<ModelState> {
    if data.channels() != pretrained.config.in_channels {
        return Err(Error::invalid(
            "mode",
            format!("dataset has {} feature channels, model expects {}", data.channels(), pretrained.config.in_channels),
        ));
    }
    if data.targets != pretrained.targets {
        return Err(Error::invalid("training.target", "fine-tuning must keep the model's targets"));
    }
    pretrained.config.check_patch(data.patch())?;
    let mut state = pretrained.clone();
    let classes: Vec<usize> = data.quantizers.iter().map(|q| q.k).collect();
    if classes != state.config.classes {
        state.config.classes = classes;
        let convs = state.config.convs();
        let head = convs.len() - 1;
        let (w, b) = xavier_layer::<f32>(&convs[head], opts.seed, head);
        state.params[2 * head] = w;
        state.params[2 * head + 1] = b;
    }
    state.velocity = state.params.iter().map(|p| vec![0.0; p.len()]).collect();
    state.quantizers = data.quantizers.clone();
    state.stats = if opts.normalize { patch_stats(&data.splits.train)? } else { FeatureStats::identity(data.channels()) };
    state.epoch = 0;
    state.seed = opts.seed;
    Ok(state)
}

pub fn fine_tune(pretrained: &ModelState, data: &Dataset, opts: &TrainOptions) -> Result<(ModelState, TrainReport)> {
    let state = prepare_finetune(pretrained, data, opts)?;
    run(state, data, opts)
}

/// Tile origins along one axis: from `-offset` in steps of `stride` until
/// the axis is covered.
fn axis_origins(len: usize, tile: usize, stride: usize, offset: usize) -> Vec<isize> {
    let mut v = vec![];
    let mut o = -(offset as isize);
    while o < len as isize {
        if o + tile as isize > 0 {
            v.push(o);
        }
        o += stride as isize;
    }
    v
}

/// Per-pixel logits averaged over all covering tiles, `[rows·cols, ΣK]`.
/// Tiles are cut from a reflection-padded extension of the scene.
pub fn predict_logits(state: &ModelState, cube: &FeatureCube, tile: usize, overlap: usize, offset: usize) -> Result<Vec<f32>> {
    state.config.check_patch(tile)?;
    if cube.channels != state.config.in_channels {
        return Err(Error::invalid(
            "mode",
            format!("feature cube has {} channels, model expects {}", cube.channels, state.config.in_channels),
        ));
    }
    if overlap >= tile {
        return Err(Error::invalid("experiment.overlap", "must be smaller than the tile"));
    }
    if cube.rows < tile || cube.cols < tile {
        return Err(Error::invalid("patch", format!("{}x{} scene is smaller than the tile", cube.rows, cube.cols)));
    }
    let normed = state.stats.apply(cube)?;
    let stride = tile - overlap;
    let rows = axis_origins(cube.rows, tile, stride, offset);
    let cols = axis_origins(cube.cols, tile, stride, offset);
    let origins: Vec<(isize, isize)> = rows.iter().flat_map(|r| cols.iter().map(move |c| (*r, *c))).collect();
    let m = cube.channels;
    let k = state.config.out_channels();
    let mut sum = vec![0.0f32; cube.rows * cube.cols * k];
    let mut count = vec![0u32; cube.rows * cube.cols];
    for batch in origins.chunks(16) {
        let mut x = Vec::with_capacity(batch.len() * tile * tile * m);
        for &(r0, c0) in batch {
            for dr in 0..tile as isize {
                let r = reflect_index(r0 + dr, cube.rows);
                for dc in 0..tile as isize {
                    let c = reflect_index(c0 + dc, cube.cols);
                    let i = (r * cube.cols + c) * m;
                    x.extend(normed.data[i..i + m].iter().map(|v| *v as f32));
                }
            }
        }
        let logits = state.forward(&x, batch.len(), tile)?;
        for (t, &(r0, c0)) in batch.iter().enumerate() {
            for dr in 0..tile as isize {
                let r = r0 + dr;
                if r < 0 || r >= cube.rows as isize {
                    continue;
                }
                for dc in 0..tile as isize {
                    let c = c0 + dc;
                    if c < 0 || c >= cube.cols as isize {
                        continue;
                    }
                    let px = r as usize * cube.cols + c as usize;
                    let src = &logits[(t * tile * tile + (dr as usize) * tile + dc as usize) * k..][..k];
                    for (d, s) in sum[px * k..(px + 1) * k].iter_mut().zip(src) {
                        *d += *s;
                    }
                    count[px] += 1;
                }
            }
        }
    }
    for (px, n) in count.iter().enumerate() {
        let inv = 1.0 / *n as f32;
        sum[px * k..(px + 1) * k].iter_mut().for_each(|v| *v *= inv);
    }
    Ok(sum)
}

/// Height maps (one per target) from tiled inference: averaged logits,
/// argmax per class group, dequantized to class centres.
pub fn predict_map(state: &ModelState, cube: &FeatureCube, tile: usize, overlap: usize) -> Result<Vec<Grid<f64>>> {
    predict_map_offset(state, cube, tile, overlap, 0)
}

pub fn predict_map_offset(state: &ModelState, cube: &FeatureCube, tile: usize, overlap: usize, offset: usize) -> Result<Vec<Grid<f64>>> {
    let logits = predict_logits(state, cube, tile, overlap, offset)?;
    Ok(decode_logits(state, &logits, cube.rows, cube.cols))
}

pub fn decode_logits(state: &ModelState, logits: &[f32], rows: usize, cols: usize) -> Vec<Grid<f64>> {
    let k = state.config.out_channels();
    let mut off = 0;
    let mut maps = vec![];
    for (q, &kg) in state.quantizers.iter().zip(&state.config.classes) {
        let data = logits.chunks_exact(k).map(|px| q.dequantize(argmax(&px[off..off + kg]))).collect();
        maps.push(Grid { rows, cols, data });
        off += kg;
    }
    maps
}

fn valid_pairs<'a>(pred: &'a Grid<f64>, reference: &'a Grid<f64>, mask: Option<&'a Grid<bool>>) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    if !pred.same_shape(reference) || mask.is_some_and(|m| !m.same_shape(pred)) {
        return Err(Error::Shape("prediction, reference and mask must share one grid".into()));
    }
    Ok((0..pred.data.len()).filter_map(move |i| {
        let (p, r) = (pred.data[i], reference.data[i]);
        (mask.is_none_or(|m| m.data[i]) && p.is_finite() && r.is_finite()).then_some((p, r))
    }))
}

/// Root-mean-square error over pixels that are unmasked and finite in both
/// maps.
pub fn rmse(pred: &Grid<f64>, reference: &Grid<f64>, mask: Option<&Grid<bool>>) -> Result<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for (p, r) in valid_pairs(pred, reference, mask)? {
        s += (p - r) * (p - r);
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("no pixel to evaluate".into()));
    }
    Ok((s / n as f64).sqrt())
}

/// Mean signed error `pred − reference`.
pub fn bias(pred: &Grid<f64>, reference: &Grid<f64>, mask: Option<&Grid<bool>>) -> Result<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for (p, r) in valid_pairs(pred, reference, mask)? {
        s += p - r;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("no pixel to evaluate".into()));
    }
    Ok(s / n as f64)
}

/// `counts[reference class][predicted class]` under `quantizer`.
pub fn joint_histogram(pred: &Grid<f64>, reference: &Grid<f64>, quantizer: &HeightQuantizer, mask: Option<&Grid<bool>>) -> Result<Vec<Vec<u64>>> {
    let mut h = vec![vec![0u64; quantizer.k]; quantizer.k];
    for (p, r) in valid_pairs(pred, reference, mask)? {
        h[quantizer.class(r) as usize][quantizer.class(p) as usize] += 1;
    }
    Ok(h)
}

pub fn histogram_csv(hist: &[Vec<u64>], quantizer: &HeightQuantizer) -> String {
    let mut s = String::from("reference_m");
    for k in 0..hist.len() {
        s.push_str(&format!(",{}", quantizer.dequantize(k)));
    }
    s.push('\n');
    for (k, row) in hist.iter().enumerate() {
        s.push_str(&quantizer.dequantize(k).to_string());
        for v in row {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub target: Target,
    pub mode: PolMode,
    pub rmse: f64,
    pub bias: f64,
    pub n_pixels: usize,
    pub masked: usize,
    pub histogram: Vec<Vec<u64>>,
}

/// Scores a height map against a reference map.
pub fn evaluate(
    method: &str,
    target: Target,
    mode: PolMode,
    pred: &Grid<f64>,
    reference: &Grid<f64>,
    quantizer: &HeightQuantizer,
    mask: Option<&Grid<bool>>,
) -> Result<EvalReport> {
    let n_pixels = valid_pairs(pred, reference, mask)?.count();
    let histogram = joint_histogram(pred, reference, quantizer, mask)?;
    Ok(EvalReport {
        method: method.to_string(),
        target,
        mode,
        rmse: rmse(pred, reference, mask)?,
        bias: bias(pred, reference, mask)?,
        n_pixels,
        masked: pred.data.len() - n_pixels,
        histogram,
    })
}

pub const METRICS_HEADER: &str = "method,target,mode,rmse_m,bias_m,n_pixels";

pub fn metrics_csv(reports: &[EvalReport]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in reports {
        s.push_str(&format!("{},{},{},{:.6},{:.6},{}\n", r.method, r.target, r.mode, r.rmse, r.bias, r.n_pixels));
    }
    s
}
