//! AdamW, the cosine schedule, and the supervised, evaluation and
//! pretraining loops.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::{MetricAccumulator, MetricReport};
use crate::model::Caswit;
use crate::nn::ParamStore;
use crate::objectives::{ce_loss, context_labels, LabelMap};
use crate::ssl::{pretrain_forward, MaskSpec, SslHead};
use crate::tensor::{no_grad, Scalar, Tensor};

pub const DEFAULT_LR_MAX: f64 = 6e-5;
pub const DEFAULT_LR_MIN: f64 = 1e-6;
pub const DEFAULT_WEIGHT_DECAY: f64 = 0.01;
pub const DEFAULT_ALPHA: f64 = 0.5;

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total_steps == 0 {
        return lr_max;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// AdamW with decoupled weight decay. Moments are held at f32 precision so
/// they survive a checkpoint round trip exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; off when `None`.
    pub clip_norm: Option<f64>,
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            clip_norm: None,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter that received a gradient.
    pub fn step<T: Scalar>(&mut self, p: &mut ParamStore<T>) -> Result<()> {
        let mut grads: Vec<(String, Vec<f64>)> = Vec::new();
        for (name, t) in p.iter() {
            let Some(g) = t.grad() else { continue };
            let g: Vec<f64> = g.iter().map(|v| v.f64()).collect();
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in `{name}`")));
            }
            grads.push((name.to_string(), g));
        }
        if let Some(max) = self.clip_norm {
            let norm = grads.iter().flat_map(|(_, g)| g).map(|v| v * v).sum::<f64>().sqrt();
            if norm > max {
                let s = max / norm;
                grads.iter_mut().for_each(|(_, g)| g.iter_mut().for_each(|v| *v *= s));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (name, g) in grads {
            let theta = p.get(&name)?;
            let n = g.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            if m.len() != n || v.len() != n {
                return Err(Error::config(format!("optimizer state for `{name}` has the wrong size")));
            }
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                m[i] = (self.beta1 * m[i] + (1.0 - self.beta1) * g[i]) as f32 as f64;
                v[i] = (self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i]) as f32 as f64;
                let (mh, vh) = (m[i] / c1, v[i] / c2);
                let th = theta.data()[i].f64();
                out.push(T::of(th - self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * th)));
            }
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("update produced non-finite values in `{name}`")));
            }
            p.set_data(&name, out)?;
        }
        Ok(())
    }
}

/// One supervised example.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub hr: Tensor<f32>,
    pub lr: Option<Tensor<f32>>,
    pub labels: LabelMap,
}

impl Sample {
    pub fn from_pair(pair: crate::geo::TilePair) -> Result<Self> {
        let labels = pair
            .labels
            .ok_or_else(|| Error::Data(format!("tile `{}` has no labels", pair.tile_id)))?;
        Ok(Self {
            id: pair.tile_id,
            hr: pair.hr,
            lr: Some(pair.lr),
            labels,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    /// Random flips and quarter turns applied identically to HR, LR and labels.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 2,
            lr_max: DEFAULT_LR_MAX,
            lr_min: DEFAULT_LR_MIN,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            alpha: DEFAULT_ALPHA,
            seed: 0,
            clip_norm: None,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::config("batch must be ≥ 1"));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Parameter(format!("alpha must be ≥ 0, got {}", self.alpha)));
        }
        if !(self.lr_max >= 0.0 && self.lr_min >= 0.0) {
            return Err(Error::Parameter("learning rates must be ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub l_hr: f64,
    pub l_lr: f64,
    pub lr: f64,
}

/// Mean batch loss with its two terms, ready for `backward`.
pub fn batch_loss<T: Scalar>(
    model: &Caswit,
    p: &ParamStore<T>,
    batch: &[&Sample],
    alpha: f64,
) -> Result<(Tensor<T>, f64, f64)> {
    let mut total: Option<Tensor<T>> = None;
    let (mut l_hr, mut l_lr) = (0.0, 0.0);
    let inv = 1.0 / batch.len() as f64;
    for s in batch {
        let ctx = |e: Error| match e {
            Error::Data(m) => Error::Data(format!("tile `{}`: {m}", s.id)),
            e => e,
        };
        if s.labels.num_classes != model.num_classes() {
            return Err(Error::config(format!(
                "tile `{}` declares {} classes, model has {}",
                s.id,
                s.labels.num_classes,
                model.num_classes()
            )));
        }
        let hr = s.hr.cast::<T>();
        let lr = s.lr.as_ref().map(Tensor::cast::<T>);
        let out = model.forward_train(p, &hr, lr.as_ref()).map_err(ctx)?;
        let hr_term = ce_loss(&out.hr, &s.labels).map_err(ctx)?;
        l_hr += hr_term.item().f64() * inv;
        let mut loss = hr_term;
        if let (Some(lr_logits), true) = (out.lr, alpha > 0.0) {
            let (h, w) = (lr_logits.shape()[0], lr_logits.shape()[1]);
            let lr_term = ce_loss(&lr_logits, &context_labels(&s.labels, h, w)?).map_err(ctx)?;
            l_lr += lr_term.item().f64() * inv;
            loss = loss.add(&lr_term.scale(alpha))?;
        }
        let loss = loss.scale(inv);
        total = Some(match total {
            Some(t) => t.add(&loss)?,
            None => loss,
        });
    }
    let total = total.ok_or_else(|| Error::Usage("empty batch".into()))?;
    Ok((total, l_hr, l_lr))
}

/// Maps output pixel `(i, j)` of an `n×n` grid to its source under dihedral
/// element `k` (bit 0 transposes, bit 1 flips rows, bit 2 flips columns).
fn dihedral_source(k: u8, n: usize, i: usize, j: usize) -> (usize, usize) {
    let (mut y, mut x) = (i, j);
    if k & 4 != 0 {
        x = n - 1 - x;
    }
    if k & 2 != 0 {
        y = n - 1 - y;
    }
    if k & 1 != 0 {
        (x, y)
    } else {
        (y, x)
    }
}

fn transform_image(x: &Tensor<f32>, k: u8) -> Result<Tensor<f32>> {
    let (n, c) = (x.shape()[0], x.shape()[2]);
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..n {
        for j in 0..n {
            let (y, xx) = dihedral_source(k, n, i, j);
            out.extend_from_slice(&x.data()[(y * n + xx) * c..(y * n + xx + 1) * c]);
        }
    }
    Tensor::from_vec(out, x.shape())
}

/// One of the eight flips/quarter turns of a square sample.
pub fn augment_sample(s: &Sample, k: u8) -> Result<Sample> {
    let n = s.labels.height;
    if n != s.labels.width {
        return Err(Error::dim("augmentation needs square tiles"));
    }
    let mut labels = s.labels.clone();
    for i in 0..n {
        for j in 0..n {
            let (y, x) = dihedral_source(k, n, i, j);
            labels.labels[i * n + j] = s.labels.labels[y * n + x];
        }
    }
    Ok(Sample {
        id: s.id.clone(),
        hr: transform_image(&s.hr, k)?,
        lr: s.lr.as_ref().map(|l| transform_image(l, k)).transpose()?,
        labels,
    })
}

/// Deterministic epoch-shuffled batches.
pub struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut b = Self {
            order: (0..n).collect(),
            pos: n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        b.reshuffle();
        b
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    pub fn next(&mut self, batch: usize) -> Vec<usize> {
        (0..batch)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.reshuffle();
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Supervised training for `cfg.steps` optimizer steps. `on_step` sees every
/// step's log and may stop the run early by returning `false`.
pub fn train<T: Scalar>(
    model: &Caswit,
    p: &mut ParamStore<T>,
    opt: &mut AdamW,
    data: &[Sample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog, &ParamStore<T>) -> Result<bool>,
) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    opt.clip_norm = cfg.clip_norm;
    opt.weight_decay = cfg.weight_decay;
    let mut batcher = Batcher::new(data.len(), cfg.seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA5A5);
    let mut logs = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let lr = cosine_lr(step, cfg.steps, cfg.lr_max, cfg.lr_min);
        opt.lr = lr;
        let idx = batcher.next(cfg.batch.min(data.len()));
        let augmented: Vec<Sample> = if cfg.augment {
            idx.iter()
                .map(|&i| augment_sample(&data[i], aug_rng.random_range(0..8)))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let batch: Vec<&Sample> = if cfg.augment {
            augmented.iter().collect()
        } else {
            idx.iter().map(|&i| &data[i]).collect()
        };
        let (loss, l_hr, l_lr) = batch_loss(model, p, &batch, cfg.alpha)?;
        let value = loss.item().f64();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss became {value} at step {step}")));
        }
        loss.backward()?;
        opt.step(p)?;
        let log = StepLog { step: step + 1, loss: value, l_hr, l_lr, lr };
        logs.push(log);
        if !on_step(&log, p)? {
            break;
        }
    }
    Ok(logs)
}

/// One global confusion matrix over `data`, one forward per tile, HR head only.
pub fn evaluate<T: Scalar>(model: &Caswit, p: &ParamStore<T>, data: &[Sample], radius: usize) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new(model.num_classes(), radius);
    for s in data {
        let _g = no_grad();
        let hr = s.hr.cast::<T>();
        let lr = s.lr.as_ref().map(Tensor::cast::<T>);
        let pred = model.predict(p, &hr, lr.as_ref())?;
        acc.add(&pred, &s.labels)?;
    }
    Ok(acc.report())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub r_hr: f64,
    pub r_lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch: 2,
            lr_max: DEFAULT_LR_MAX,
            lr_min: DEFAULT_LR_MIN,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            r_hr: crate::ssl::DEFAULT_HR_RATIO,
            r_lr: crate::ssl::DEFAULT_LR_RATIO,
            seed: 0,
        }
    }
}

/// Masked-reconstruction pretraining; returns the per-step mean masked ℓ1.
pub fn pretrain<T: Scalar>(
    model: &Caswit,
    head: &SslHead,
    p: &mut ParamStore<T>,
    opt: &mut AdamW,
    images: &[(Tensor<f32>, Option<Tensor<f32>>)],
    cfg: &PretrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if images.is_empty() || cfg.batch == 0 {
        return Err(Error::Data("pretraining needs at least one image and batch ≥ 1".into()));
    }
    let sizes = model.cfg.stream.stage_sizes(model.cfg.tile, model.cfg.tile)?;
    let grid = sizes[0];
    opt.weight_decay = cfg.weight_decay;
    let mut batcher = Batcher::new(images.len(), cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        opt.lr = cosine_lr(step, cfg.steps, cfg.lr_max, cfg.lr_min);
        let idx = batcher.next(cfg.batch.min(images.len()));
        let inv = 1.0 / idx.len() as f64;
        let mut total: Option<Tensor<T>> = None;
        for (b, &i) in idx.iter().enumerate() {
            let seed = cfg.seed ^ ((step as u64) << 20) ^ b as u64;
            let masks = MaskSpec::sample(grid, grid, cfg.r_hr, cfg.r_lr, seed)?;
            let hr = images[i].0.cast::<T>();
            let lr = images[i].1.as_ref().map(Tensor::cast::<T>);
            let out = pretrain_forward(p, model, head, &hr, lr.as_ref(), &masks)?;
            let l = out.loss.scale(inv);
            total = Some(match total {
                Some(t) => t.add(&l)?,
                None => l,
            });
        }
        let loss = total.expect("non-empty batch");
        let value = loss.item().f64();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("pretraining loss became {value} at step {step}")));
        }
        loss.backward()?;
        opt.step(p)?;
        losses.push(value);
        on_step(step + 1, value);
    }
    Ok(losses)
}
