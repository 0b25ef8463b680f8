//! Miniature UNet-style segmentation network and its source-domain trainer.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{invalid_arg, Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels;
use crate::metrics::{dice, BinaryMask};
use crate::optim::Adam;
use crate::tensor::Tensor;
use crate::topomdc::RouterParams;

pub const BN_EPS: f64 = 1e-5;
pub const LOSS_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ModelMeta {
    pub levels: usize,
    pub base_channels: usize,
}

impl ModelMeta {
    /// Desk-scale default: three levels with 8/16/32 channels.
    pub const DEFAULT: ModelMeta = ModelMeta {
        levels: 3,
        base_channels: 8,
    };

    /// Five levels, hence ten encoder 3×3 convolutions.
    pub const FIVE_LEVEL: ModelMeta = ModelMeta {
        levels: 5,
        base_channels: 8,
    };

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_channels == 0 {
            return Err(invalid_arg!("model needs at least one level and one channel"));
        }
        if self.levels > 8 {
            return Err(invalid_arg!("at most 8 levels are supported, got {}", self.levels));
        }
        Ok(())
    }

    /// Required divisor of the input height and width.
    pub fn size_divisor(&self) -> usize {
        1 << self.levels
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

impl Default for ModelMeta {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// How batch normalization obtains its statistics during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Stored running statistics.
    Running,
    /// Statistics of the current batch, differentiated through. Used only
    /// by the source trainer.
    Batch,
}

/// Per-channel statistics observed by a [`BnMode::Batch`] forward pass.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub layer: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Graph handles for a model's parameters (and router, when wrapped).
#[derive(Debug, Clone)]
pub struct Binding {
    pub params: BTreeMap<String, Var>,
    pub router: Option<Vec<Var>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    meta: ModelMeta,
    params: BTreeMap<String, Tensor>,
    stats: BTreeMap<String, Tensor>,
    router_grid: Option<usize>,
}

fn conv_name(stage: &str, level: usize, k: usize) -> String {
    format!("{stage}{level}.conv{k}")
}

fn bn_name(stage: &str, level: usize, k: usize) -> String {
    format!("{stage}{level}.bn{k}")
}

impl SegModel {
    /// He-initialized model; identical seeds give identical weights.
    pub fn new(meta: ModelMeta, seed: u64) -> Result<Self> {
        meta.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        let mut stats = BTreeMap::new();
        let mut add_block = |stage: &str, level: usize, k: usize, cin: usize, cout: usize, rng: &mut ChaCha8Rng| {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let name = conv_name(stage, level, k);
            params.insert(
                format!("{name}.weight"),
                Tensor::from_fn(&[cout, cin, 3, 3], |_| normal.sample(rng)),
            );
            params.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
            let bn = bn_name(stage, level, k);
            params.insert(format!("{bn}.gamma"), Tensor::full(&[cout], 1.0));
            params.insert(format!("{bn}.beta"), Tensor::zeros(&[cout]));
            stats.insert(format!("{bn}.running_mean"), Tensor::zeros(&[cout]));
            stats.insert(format!("{bn}.running_var"), Tensor::full(&[cout], 1.0));
        };
        let mut cin = 1;
        for level in 0..meta.levels {
            let c = meta.channels(level);
            add_block("enc", level, 0, cin, c, &mut rng);
            add_block("enc", level, 1, c, c, &mut rng);
            cin = c;
        }
        for level in (0..meta.levels - 1).rev() {
            let c = meta.channels(level);
            add_block("dec", level, 0, meta.channels(level + 1) + c, c, &mut rng);
            add_block("dec", level, 1, c, c, &mut rng);
        }
        let std = (1.0 / meta.base_channels as f64).sqrt();
        params.insert(
            "head.weight".into(),
            Tensor::from_fn(&[1, meta.base_channels, 1, 1], |_| rng.random_range(-std..std)),
        );
        params.insert("head.bias".into(), Tensor::zeros(&[1]));
        Ok(Self {
            meta,
            params,
            stats,
            router_grid: None,
        })
    }

    pub(crate) fn from_parts(
        meta: ModelMeta,
        params: BTreeMap<String, Tensor>,
        stats: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let reference = SegModel::new(meta, 0)?;
        for (kind, got, want) in [
            ("parameter", &params, &reference.params),
            ("statistic", &stats, &reference.stats),
        ] {
            if got.len() != want.len() {
                return Err(Error::InvalidState(format!(
                    "expected {} {kind} tensors for {:?}, found {}",
                    want.len(),
                    meta,
                    got.len()
                )));
            }
            for (name, t) in want {
                match got.get(name) {
                    Some(g) if g.shape() == t.shape() => {}
                    Some(g) => {
                        return Err(Error::InvalidState(format!(
                            "{kind} {name} has shape {:?}, expected {:?}",
                            g.shape(),
                            t.shape()
                        )))
                    }
                    None => return Err(Error::InvalidState(format!("missing {kind} {name}"))),
                }
            }
        }
        Ok(Self {
            meta,
            params,
            stats,
            router_grid: None,
        })
    }

    pub fn meta(&self) -> ModelMeta {
        self.meta
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn stats(&self) -> &BTreeMap<String, Tensor> {
        &self.stats
    }

    pub(crate) fn stats_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.stats
    }

    pub fn router_grid(&self) -> Option<usize> {
        self.router_grid
    }

    pub(crate) fn set_router_grid(&mut self, grid: Option<usize>) {
        self.router_grid = grid;
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// The encoder 3×3 convolutions, in forward order.
    pub fn encoder_conv_names(&self) -> Vec<String> {
        (0..self.meta.levels)
            .flat_map(|l| (0..2).map(move |k| conv_name("enc", l, k)))
            .collect()
    }

    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Binding {
        let params = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), g.leaf(v.clone(), requires_grad)))
            .collect();
        Binding {
            params,
            router: None,
        }
    }

    /// Adds router leaves to `binding`, one `[n², 8]` leaf per wrapped layer.
    pub fn bind_router(&self, g: &mut Graph, binding: &mut Binding, router: &RouterParams, requires_grad: bool) -> Result<()> {
        let grid = self
            .router_grid
            .ok_or_else(|| Error::InvalidState("router given for an unwrapped model".into()))?;
        if router.grid != grid || router.layers != self.encoder_conv_names() {
            return Err(Error::InvalidState("router does not match the wrapped encoder".into()));
        }
        binding.router = Some(
            (0..router.layers.len())
                .map(|l| g.leaf(router.layer(l), requires_grad))
                .collect(),
        );
        Ok(())
    }

    pub fn check_input_size(&self, h: usize, w: usize) -> Result<()> {
        let div = self.meta.size_divisor();
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(invalid_arg!(
                "input size {h}x{w} is not divisible by {div} (2^levels)"
            ));
        }
        Ok(())
    }

    fn block(
        &self,
        g: &mut Graph,
        x: Var,
        stage: &str,
        level: usize,
        k: usize,
        binding: &Binding,
        bn: BnMode,
        observed: &mut Vec<BatchStats>,
    ) -> Result<Var> {
        let name = conv_name(stage, level, k);
        let p = |s: &str| binding.params[&format!("{name}.{s}")];
        let (w, b) = (p("weight"), p("bias"));
        let conv = match (&binding.router, self.router_grid) {
            (Some(router), Some(grid)) if stage == "enc" => {
                let idx = level * 2 + k;
                g.topomdc(x, w, Some(b), router[idx], grid)?
            }
            (None, Some(_)) => {
                return Err(Error::InvalidState(
                    "wrapped model requires router parameters".into(),
                ))
            }
            _ => g.conv3x3(x, w, Some(b))?,
        };
        let bn_n = bn_name(stage, level, k);
        let gamma = binding.params[&format!("{bn_n}.gamma")];
        let beta = binding.params[&format!("{bn_n}.beta")];
        let normed = match bn {
            BnMode::Running => {
                let mean = &self.stats[&format!("{bn_n}.running_mean")];
                let var = &self.stats[&format!("{bn_n}.running_var")];
                g.batchnorm(conv, gamma, beta, mean.data(), var.data(), BN_EPS)?
            }
            BnMode::Batch => {
                let (out, mean, var) = g.batchnorm_batch(conv, gamma, beta, BN_EPS)?;
                observed.push(BatchStats {
                    layer: bn_n,
                    mean,
                    var,
                });
                out
            }
        };
        g.relu(normed)
    }

    /// Builds the forward pass on `g`. Returns the probability map node and
    /// any batch statistics observed in [`BnMode::Batch`].
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        input: Var,
        binding: &Binding,
        bn: BnMode,
    ) -> Result<(Var, Vec<BatchStats>)> {
        let (_, c, h, w) = g.value(input).dims4()?;
        if c != 1 {
            return Err(invalid_arg!("expected single-channel input, got {c} channels"));
        }
        self.check_input_size(h, w)?;
        let mut observed = Vec::new();
        let mut skips = Vec::with_capacity(self.meta.levels);
        let mut x = input;
        for level in 0..self.meta.levels {
            if level > 0 {
                x = g.maxpool2x2(x)?;
            }
            x = self.block(g, x, "enc", level, 0, binding, bn, &mut observed)?;
            x = self.block(g, x, "enc", level, 1, binding, bn, &mut observed)?;
            skips.push(x);
        }
        for level in (0..self.meta.levels - 1).rev() {
            let up = g.upsample_bilinear(x, 2)?;
            let cat = g.concat_channels(up, skips[level])?;
            x = self.block(g, cat, "dec", level, 0, binding, bn, &mut observed)?;
            x = self.block(g, x, "dec", level, 1, binding, bn, &mut observed)?;
        }
        let logits = g.conv1x1(x, binding.params["head.weight"], Some(binding.params["head.bias"]))?;
        Ok((g.sigmoid(logits)?, observed))
    }

    /// Inference forward pass of a `[n, 1, h, w]` image batch. A wrapped
    /// model needs its router parameters.
    pub fn forward(&self, image: &Tensor, router: Option<&RouterParams>) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut binding = self.bind(&mut g, false);
        if let Some(r) = router {
            self.bind_router(&mut g, &mut binding, r, false)?;
        }
        let x = g.constant(image.clone());
        let (out, _) = self.forward_graph(&mut g, x, &binding, BnMode::Running)?;
        Ok(g.value(out).clone())
    }

    /// Blends batch statistics into the running statistics.
    pub fn update_running_stats(&mut self, observed: &[BatchStats], momentum: f64) {
        for s in observed {
            let mean = self.stats.get_mut(&format!("{}.running_mean", s.layer)).expect("bn layer");
            for (r, m) in mean.data_mut().iter_mut().zip(&s.mean) {
                *r = (1.0 - momentum) * *r + momentum * m;
            }
            let var = self.stats.get_mut(&format!("{}.running_var", s.layer)).expect("bn layer");
            for (r, v) in var.data_mut().iter_mut().zip(&s.var) {
                *r = (1.0 - momentum) * *r + momentum * v;
            }
        }
    }
}

/// `(1 − softDice) + BCE`, both with `LOSS_EPS` clamping. Dice is taken over
/// all elements of the batch; BCE is the element mean.
pub fn dice_bce_loss(g: &mut Graph, pred: Var, label: &Tensor) -> Result<Var> {
    let p = g.value(pred);
    p.same_shape(label, "dice_bce_loss")?;
    let (value, grad) = dice_bce_value_grad(p.data(), label.data());
    g.loss(pred, value, grad, "dice_bce_loss")
}

fn dice_bce_value_grad(pred: &[f64], label: &[f64]) -> (f64, Vec<f64>) {
    let eps = LOSS_EPS;
    let n = pred.len() as f64;
    let inter: f64 = pred.iter().zip(label).map(|(p, y)| p * y).sum();
    let denom = pred.iter().sum::<f64>() + label.iter().sum::<f64>() + eps;
    let numer = 2.0 * inter + eps;
    let soft_dice = numer / denom;
    let mut bce = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &y) in pred.iter().zip(label) {
        let pc = p.clamp(eps, 1.0 - eps);
        bce -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        let d_dice = (2.0 * y * denom - numer) / (denom * denom);
        let d_bce = if p > eps && p < 1.0 - eps {
            (-y / pc + (1.0 - y) / (1.0 - pc)) / n
        } else {
            0.0
        };
        grad.push(-d_dice + d_bce);
    }
    ((1.0 - soft_dice) + bce / n, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 5e-4,
            batch_size: 4,
            val_fraction: 0.1,
            bn_momentum: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_dice: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model from the epoch with the best held-out Dice.
    pub model: SegModel,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub epochs: Vec<EpochRecord>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

fn stack(items: &[&Tensor]) -> Result<Tensor> {
    let (_, c, h, w) = items[0].dims4()?;
    let mut data = Vec::with_capacity(items.len() * c * h * w);
    for t in items {
        if t.dims4()? != (1, c, h, w) {
            return Err(invalid_arg!("batch items differ in shape"));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(vec![items.len(), c, h, w], data)
}

fn flip_tensor(t: &Tensor, horizontal: bool) -> Tensor {
    let (n, c, h, w) = t.dims4().expect("rank-4");
    Tensor::new(t.shape().to_vec(), kernels::flip(t.data(), n * c, h, w, horizontal)).expect("same shape")
}

/// Mean per-image Dice of the binarized prediction.
pub fn evaluate_dice(model: &SegModel, data: &[(Tensor, Tensor)]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (img, label) in data {
        let pred = model.forward(img, None)?;
        total += dice(&BinaryMask::from_tensor(&pred, 0.5)?, &BinaryMask::from_tensor(label, 0.5)?)?;
    }
    Ok(total / data.len() as f64)
}

/// Trains `model` on `(image, label)` pairs with Adam and Dice+BCE, random
/// horizontal/vertical flips, and best-epoch selection on a held-out split.
pub fn train_source(model: &SegModel, dataset: &[(Tensor, Tensor)], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(invalid_arg!("training dataset is empty"));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(invalid_arg!("batch size and epochs must be positive"));
    }
    if model.router_grid().is_some() {
        return Err(Error::InvalidState("cannot source-train a wrapped model".into()));
    }
    for (img, label) in dataset {
        let (h, w) = img.plane_dims()?;
        model.check_input_size(h, w)?;
        img.same_shape(label, "training pair")?;
        if label.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(invalid_arg!("labels must be binary"));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let n_val = if dataset.len() >= 2 {
        ((dataset.len() as f64 * cfg.val_fraction).round() as usize).min(dataset.len() - 1)
    } else {
        0
    };
    let (val_idx, train_idx) = order.split_at(n_val);
    let val: Vec<(Tensor, Tensor)> = val_idx.iter().map(|&i| dataset[i].clone()).collect();
    let mut train_idx = train_idx.to_vec();

    let mut model = model.clone();
    let names: Vec<String> = model.params().keys().cloned().collect();
    let mut adam = Adam::new(cfg.lr);
    let mut best: Option<(SegModel, usize, f64)> = None;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::new();

    for epoch in 0..cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in train_idx.chunks(cfg.batch_size) {
            let mut imgs = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (mut img, mut lab) = dataset[i].clone();
                for horizontal in [true, false] {
                    if rng.random_bool(0.5) {
                        img = flip_tensor(&img, horizontal);
                        lab = flip_tensor(&lab, horizontal);
                    }
                }
                imgs.push(img);
                labels.push(lab);
            }
            let x = stack(&imgs.iter().collect::<Vec<_>>())?;
            let y = stack(&labels.iter().collect::<Vec<_>>())?;

            let mut g = Graph::new();
            let binding = model.bind(&mut g, true);
            let xv = g.constant(x);
            let (pred, observed) = model.forward_graph(&mut g, xv, &binding, BnMode::Batch)?;
            let loss = dice_bce_loss(&mut g, pred, &y)?;
            let lv = g.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::TrainingDiverged(format!("loss {lv} at epoch {epoch}")));
            }
            g.backward(loss).map_err(|e| match e {
                Error::NonFinite(what) => Error::TrainingDiverged(what),
                other => other,
            })?;
            let grads: Vec<Tensor> = names
                .iter()
                .map(|n| g.grad(binding.params[n]).cloned().unwrap_or_else(|| Tensor::zeros(model.params()[n].shape())))
                .collect();
            let params = model.params_mut();
            let mut refs: Vec<&mut Tensor> = Vec::with_capacity(names.len());
            for (name, t) in params.iter_mut() {
                debug_assert!(names.contains(name));
                refs.push(t);
            }
            adam.step(&mut refs, &grads).map_err(|e| match e {
                Error::AdaptationDiverged(m) => Error::TrainingDiverged(m),
                other => other,
            })?;
            model.update_running_stats(&observed, cfg.bn_momentum);
            step_losses.push(lv);
            loss_sum += lv;
            batches += 1;
        }
        let val_dice = if val.is_empty() {
            evaluate_dice(&model, &dataset[..1])?
        } else {
            evaluate_dice(&model, &val)?
        };
        epochs.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / batches as f64,
            val_dice,
        });
        if best.as_ref().is_none_or(|b| val_dice > b.2) {
            best = Some((model.clone(), epoch, val_dice));
        }
    }
    let (model, best_epoch, best_val_dice) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        best_epoch,
        best_val_dice,
        epochs,
        step_losses,
    })
}
