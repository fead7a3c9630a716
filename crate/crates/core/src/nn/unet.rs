//! U-Net pixel classifier with same-padded 3×3 convolutions.
//!
//! Encoder level `l` runs two conv+ReLU layers at `base·2^l` channels and
//! max-pools (except at the bottleneck). Each decoder level upsamples by 2,
//! applies a channel-halving 3×3 "up" conv, concatenates the encoder output
//! of the same level (skip first), and runs two conv+ReLU layers. A final
//! 1×1 conv maps `base` channels to the logits of every class group.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::conv::{
    conv_backward, conv_forward, maxpool2, maxpool2_backward, relu_backward, relu_inplace, upsample2,
    upsample2_backward, ConvGeom,
};
use super::loss::{grouped_ce_chw, head_counts};
use super::scalar::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub levels: usize,
    /// Class count of each output group (one for CHM or DTM, two for the
    /// unified model).
    pub classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub relu: bool,
}

impl ConvSpec {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn fan_out(&self) -> usize {
        self.cout * self.k * self.k
    }

    pub fn xavier_bound(&self) -> f64 {
        (6.0 / (self.fan_in() + self.fan_out()) as f64).sqrt()
    }
}

impl UNetConfig {
    pub fn new(in_channels: usize, base_channels: usize, levels: usize, classes: Vec<usize>) -> Result<Self> {
        let cfg = UNetConfig { in_channels, base_channels, levels, classes };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The paper-sized network: base 32, five levels.
    pub fn standard(in_channels: usize, classes: Vec<usize>) -> Self {
        UNetConfig { in_channels, base_channels: 32, levels: 5, classes }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::invalid("network.levels", "must be at least 2"));
        }
        if self.base_channels < 1 {
            return Err(Error::invalid("network.base_channels", "must be at least 1"));
        }
        if self.in_channels < 1 {
            return Err(Error::invalid("mode", "network needs at least one input channel"));
        }
        if self.classes.is_empty() || self.classes.iter().any(|k| *k < 2) {
            return Err(Error::invalid("quantizer.K", "every class group needs at least 2 classes"));
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn out_channels(&self) -> usize {
        self.classes.iter().sum()
    }

    /// Convolutions in forward order.
    pub fn convs(&self) -> Vec<ConvSpec> {
        let spec = |name: String, cin, cout, k, relu| ConvSpec { name, cin, cout, k, relu };
        let mut v = vec![];
        for l in 0..self.levels {
            let cin = if l == 0 { self.in_channels } else { self.width(l - 1) };
            v.push(spec(format!("enc{l}.conv1"), cin, self.width(l), 3, true));
            v.push(spec(format!("enc{l}.conv2"), self.width(l), self.width(l), 3, true));
        }
        for l in (0..self.levels - 1).rev() {
            let c = self.width(l);
            v.push(spec(format!("dec{l}.up"), 2 * c, c, 3, false));
            v.push(spec(format!("dec{l}.conv1"), 2 * c, c, 3, true));
            v.push(spec(format!("dec{l}.conv2"), c, c, 3, true));
        }
        v.push(spec("head".into(), self.base_channels, self.out_channels(), 1, false));
        v
    }

    pub fn conv_count(&self) -> usize {
        2 * self.levels + 3 * (self.levels - 1) + 1
    }

    /// Parameter tensor names and shapes: weight `[cout, cin, k, k]` then
    /// bias `[cout]` for every conv.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.convs()
            .into_iter()
            .flat_map(|c| {
                [
                    (format!("{}.weight", c.name), vec![c.cout, c.cin, c.k, c.k]),
                    (format!("{}.bias", c.name), vec![c.cout]),
                ]
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.convs().iter().map(|c| c.weight_len() + c.cout).sum()
    }

    pub fn check_patch(&self, w: usize) -> Result<()> {
        let div = 1usize << (self.levels - 1);
        if w == 0 || w % div != 0 {
            return Err(Error::invalid("patch", format!("{w} is not divisible by 2^(levels-1) = {div}")));
        }
        Ok(())
    }
}

/// Xavier-uniform weights and zero bias for conv `index`, drawn from its own
/// stream of the seeded generator so any layer can be redrawn alone.
pub fn xavier_layer<T: Scalar>(spec: &ConvSpec, seed: u64, index: usize) -> (Vec<T>, Vec<T>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let b = spec.xavier_bound();
    let dist = Uniform::new_inclusive(-b, b).expect("finite bound");
    let w = (0..spec.weight_len()).map(|_| T::from_f64(dist.sample(&mut rng))).collect();
    (w, vec![T::ZERO; spec.cout])
}

/// All parameters, weight then bias per conv in forward order.
pub fn xavier_params<T: Scalar>(cfg: &UNetConfig, seed: u64) -> Vec<Vec<T>> {
    cfg.convs()
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            let (w, b) = xavier_layer(s, seed, i);
            [w, b]
        })
        .collect()
}

/// Activations of one forward pass kept for the backward pass.
struct Trace<T> {
    /// Input of each conv.
    inputs: Vec<Vec<T>>,
    /// Output of each conv, after ReLU where applicable.
    outputs: Vec<Vec<T>>,
    pool_idx: Vec<Vec<u32>>,
}

struct Runner<'a, T> {
    cfg: &'a UNetConfig,
    convs: Vec<ConvSpec>,
    params: &'a [Vec<T>],
    size: usize,
}

impl<'a, T: Scalar> Runner<'a, T> {
    fn new(cfg: &'a UNetConfig, params: &'a [Vec<T>], size: usize) -> Self {
        Runner { cfg, convs: cfg.convs(), params, size }
    }

    fn side(&self, level: usize) -> usize {
        self.size >> level
    }

    fn geom(&self, i: usize, level: usize) -> ConvGeom {
        let c = &self.convs[i];
        ConvGeom { cin: c.cin, cout: c.cout, k: c.k, h: self.side(level), w: self.side(level) }
    }

    fn dec_index(&self, level: usize) -> usize {
        2 * self.cfg.levels + 3 * (self.cfg.levels - 2 - level)
    }

    fn conv(&self, i: usize, level: usize, x: &[T], col: &mut Vec<T>) -> Vec<T> {
        let g = self.geom(i, level);
        let mut out = vec![T::ZERO; g.cout * g.hw()];
        conv_forward(g, x, &self.params[2 * i], &self.params[2 * i + 1], col, &mut out);
        if self.convs[i].relu {
            relu_inplace(&mut out);
        }
        out
    }

    /// Forward pass of one CHW image; returns `[ΣK, W·W]` logits.
    fn forward(&self, x: Vec<T>, mut trace: Option<&mut Trace<T>>) -> Vec<T> {
        let levels = self.cfg.levels;
        let mut col = Vec::new();
        let mut skips = Vec::with_capacity(levels);
        let mut cur = x;
        let record = |t: &mut Option<&mut Trace<T>>, i: usize, input: &[T], out: &[T]| {
            if let Some(t) = t {
                t.inputs[i] = input.to_vec();
                t.outputs[i] = out.to_vec();
            }
        };
        for l in 0..levels {
            let a = self.conv(2 * l, l, &cur, &mut col);
            record(&mut trace, 2 * l, &cur, &a);
            let b = self.conv(2 * l + 1, l, &a, &mut col);
            record(&mut trace, 2 * l + 1, &a, &b);
            if l + 1 < levels {
                let c = self.cfg.width(l);
                let s = self.side(l);
                let mut pooled = vec![T::ZERO; c * s * s / 4];
                let mut idx = vec![0u32; pooled.len()];
                maxpool2(&b, c, s, s, &mut pooled, &mut idx);
                if let Some(t) = trace.as_mut() {
                    t.pool_idx[l] = idx;
                }
                skips.push(b);
                cur = pooled;
            } else {
                cur = b;
            }
        }
        for l in (0..levels - 1).rev() {
            let i = self.dec_index(l);
            let c = self.cfg.width(l);
            let s = self.side(l + 1);
            let mut up = vec![T::ZERO; 2 * c * 4 * s * s];
            upsample2(&cur, 2 * c, s, s, &mut up);
            let proj = self.conv(i, l, &up, &mut col);
            record(&mut trace, i, &up, &proj);
            let mut cat = skips.pop().expect("one skip per level");
            cat.extend_from_slice(&proj);
            let a = self.conv(i + 1, l, &cat, &mut col);
            record(&mut trace, i + 1, &cat, &a);
            let b = self.conv(i + 2, l, &a, &mut col);
            record(&mut trace, i + 2, &a, &b);
            cur = b;
        }
        let head = self.convs.len() - 1;
        let logits = self.conv(head, 0, &cur, &mut col);
        record(&mut trace, head, &cur, &logits);
        logits
    }

    fn backprop_conv(&self, i: usize, level: usize, t: &Trace<T>, mut g: Vec<T>, grads: &mut [Vec<T>], col: &mut Vec<T>, want_dx: bool) -> Vec<T> {
        if self.convs[i].relu {
            relu_backward(&t.outputs[i], &mut g);
        }
        let geom = self.geom(i, level);
        let mut dx = if want_dx { vec![T::ZERO; geom.cin * geom.hw()] } else { vec![] };
        let (dw, rest) = grads[2 * i..2 * i + 2].split_at_mut(1);
        conv_backward(
            geom,
            &t.inputs[i],
            &g,
            &self.params[2 * i],
            col,
            &mut dw[0],
            &mut rest[0],
            want_dx.then_some(&mut dx[..]),
        );
        dx
    }

    /// Accumulates parameter gradients for logit gradient `dlogits`.
    fn backward(&self, t: &Trace<T>, dlogits: Vec<T>, grads: &mut [Vec<T>]) {
        let levels = self.cfg.levels;
        let mut col = Vec::new();
        let head = self.convs.len() - 1;
        let mut g = self.backprop_conv(head, 0, t, dlogits, grads, &mut col, true);
        let mut dskips: Vec<Vec<T>> = vec![vec![]; levels - 1];
        for l in 0..levels - 1 {
            let i = self.dec_index(l);
            let c = self.cfg.width(l);
            let s = self.side(l);
            g = self.backprop_conv(i + 2, l, t, g, grads, &mut col, true);
            let mut dcat = self.backprop_conv(i + 1, l, t, g, grads, &mut col, true);
            let dproj = dcat.split_off(c * s * s);
            dskips[l] = dcat;
            let dup = self.backprop_conv(i, l, t, dproj, grads, &mut col, true);
            let mut dprev = vec![T::ZERO; 2 * c * s * s / 4];
            upsample2_backward(&dup, 2 * c, s / 2, s / 2, &mut dprev);
            g = dprev;
        }
        for l in (0..levels).rev() {
            if l + 1 < levels {
                let mut d = std::mem::take(&mut dskips[l]);
                maxpool2_backward(&g, &t.pool_idx[l], &mut d);
                g = d;
            }
            g = self.backprop_conv(2 * l + 1, l, t, g, grads, &mut col, true);
            g = self.backprop_conv(2 * l, l, t, g, grads, &mut col, l > 0);
        }
    }

    fn empty_trace(&self) -> Trace<T> {
        let n = self.convs.len();
        Trace { inputs: vec![vec![]; n], outputs: vec![vec![]; n], pool_idx: vec![vec![]; self.cfg.levels] }
    }
}

fn nhwc_to_chw<T: Scalar>(x: &[T], hw: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    for (p, px) in x.chunks_exact(c).enumerate() {
        for (ch, v) in px.iter().enumerate() {
            out[ch * hw + p] = *v;
        }
    }
    out
}

fn chw_to_nhwc<T: Scalar>(x: &[T], hw: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    for ch in 0..c {
        for p in 0..hw {
            out[p * c + ch] = x[ch * hw + p];
        }
    }
    out
}

fn check_batch<T>(cfg: &UNetConfig, params: &[Vec<T>], batch: &[T], n: usize, size: usize) -> Result<()> {
    cfg.check_patch(size)?;
    let shapes = cfg.param_shapes();
    if params.len() != shapes.len()
        || params.iter().zip(&shapes).any(|(p, (_, s))| p.len() != s.iter().product::<usize>())
    {
        return Err(Error::Shape("parameters do not match the network config".into()));
    }
    if batch.len() != n * size * size * cfg.in_channels {
        return Err(Error::Shape(format!(
            "batch of {} values is not {n}x{size}x{size}x{}",
            batch.len(),
            cfg.in_channels
        )));
    }
    Ok(())
}

/// Logits `[n, size, size, ΣK]` for an NHWC batch `[n, size, size, M]`.
pub fn forward<T: Scalar>(cfg: &UNetConfig, params: &[Vec<T>], batch: &[T], n: usize, size: usize) -> Result<Vec<T>> {
    check_batch(cfg, params, batch, n, size)?;
    let hw = size * size;
    let m = cfg.in_channels;
    let k = cfg.out_channels();
    let runner = Runner::new(cfg, params, size);
    let outs: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = nhwc_to_chw(&batch[i * hw * m..(i + 1) * hw * m], hw, m);
            chw_to_nhwc(&runner.forward(x, None), hw, k)
        })
        .collect();
    Ok(outs.concat())
}

/// Total loss (sum over groups of the mean cross-entropy over the batch's
/// valid pixels) and its gradient for every parameter. `labels` is
/// `[n, size, size, groups]`. Per-sample gradients are summed in sample
/// order, so the result does not depend on the thread count.
pub fn loss_and_grad<T: Scalar>(
    cfg: &UNetConfig,
    params: &[Vec<T>],
    batch: &[T],
    labels: &[i32],
    n: usize,
    size: usize,
) -> Result<(T, Vec<Vec<T>>)> {
    check_batch(cfg, params, batch, n, size)?;
    let hw = size * size;
    let m = cfg.in_channels;
    let heads = cfg.classes.len();
    if labels.len() != n * hw * heads {
        return Err(Error::Shape("labels do not match the batch".into()));
    }
    let counts = head_counts(labels, heads);
    if counts.contains(&0) {
        return Err(Error::Empty("a class group has no labelled pixel in the batch".into()));
    }
    let scale: Vec<T> = counts.iter().map(|c| T::ONE / T::from_f64(*c as f64)).collect();
    let runner = Runner::new(cfg, params, size);
    let parts: Vec<Result<(T, Vec<Vec<T>>)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = nhwc_to_chw(&batch[i * hw * m..(i + 1) * hw * m], hw, m);
            let mut trace = runner.empty_trace();
            let logits = runner.forward(x, Some(&mut trace));
            let mut dlogits = vec![T::ZERO; logits.len()];
            let loss = grouped_ce_chw(&logits, &labels[i * hw * heads..(i + 1) * hw * heads], &cfg.classes, &scale, &mut dlogits)?;
            let mut grads: Vec<Vec<T>> = params.iter().map(|p| vec![T::ZERO; p.len()]).collect();
            runner.backward(&trace, dlogits, &mut grads);
            Ok((loss, grads))
        })
        .collect();
    let mut total = T::ZERO;
    let mut grads: Vec<Vec<T>> = params.iter().map(|p| vec![T::ZERO; p.len()]).collect();
    for part in parts {
        let (loss, g) = part?;
        total += loss;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            for (a, v) in acc.iter_mut().zip(gi) {
                *a += *v;
            }
        }
    }
    Ok((total, grads))
}

/// Spatial side and channel count at every stage, as a bookkeeping check:
/// `(level, encoder output channels, concatenated decoder channels)`.
pub fn skip_channels(cfg: &UNetConfig) -> Vec<(usize, usize, usize)> {
    let convs = cfg.convs();
    (0..cfg.levels - 1)
        .map(|l| {
            let i = 2 * cfg.levels + 3 * (cfg.levels - 2 - l);
            (l, convs[2 * l + 1].cout + convs[i].cout, convs[i + 1].cin)
        })
        .collect()
}
