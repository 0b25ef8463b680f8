//! Two-stage per-sample test-time adaptation: router optimization by
//! entropy minimization, then teacher-student consistency on pseudo-break
//! hard samples with an EMA teacher.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{invalid_arg, Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels;
use crate::optim::{Adam, AdamHyper};
use crate::segnet::{BnMode, SegModel};
use crate::tensor::Tensor;
use crate::topohg::{build_plan, HgConfig};
use crate::topomdc::{wrap_encoder, RouterParams};

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptConfig {
    /// Total iterations per sample, split evenly between the stages.
    pub iterations: usize,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub adam: AdamHyper,
    pub ema_rate: f64,
    pub teacher_rounds: usize,
    pub student_rounds: usize,
    pub scales: Vec<f64>,
    /// Keep student, teacher and Stage-2 optimizer state across samples.
    pub continual: bool,
    pub binarize_threshold: f64,
    pub log_eps: f64,
    /// Router patch grid side `n`.
    pub grid: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            iterations: 6,
            lr_stage1: 0.01,
            lr_stage2: 1e-4,
            adam: AdamHyper::default(),
            ema_rate: 0.999,
            teacher_rounds: 4,
            student_rounds: 1,
            scales: vec![0.5, 1.0, 1.25, 1.5],
            continual: true,
            binarize_threshold: 0.5,
            log_eps: 1e-7,
            grid: 4,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 2 || self.iterations % 2 != 0 {
            return Err(invalid_arg!("iterations must be even and at least 2, got {}", self.iterations));
        }
        for (name, lr) in [("lr_stage1", self.lr_stage1), ("lr_stage2", self.lr_stage2)] {
            if !(0.0..=1.0).contains(&lr) {
                return Err(invalid_arg!("{name} must lie in [0, 1], got {lr}"));
            }
        }
        if !(0.0..=1.0).contains(&self.ema_rate) {
            return Err(invalid_arg!("ema_rate must lie in [0, 1], got {}", self.ema_rate));
        }
        if self.teacher_rounds == 0 || self.student_rounds == 0 {
            return Err(invalid_arg!("augmentation rounds must be positive"));
        }
        if self.scales.is_empty() || self.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(invalid_arg!("scales must be a non-empty list of positive numbers"));
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return Err(invalid_arg!("binarize_threshold must lie in (0, 1)"));
        }
        if !(self.log_eps > 0.0 && self.log_eps < 0.5) {
            return Err(invalid_arg!("log_eps must lie in (0, 0.5)"));
        }
        if self.grid == 0 {
            return Err(invalid_arg!("router grid must be at least 1"));
        }
        let (b1, b2, eps) = (self.adam.beta1, self.adam.beta2, self.adam.eps);
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2) && eps > 0.0) {
            return Err(invalid_arg!("adam betas must lie in [0, 1) and eps be positive"));
        }
        Ok(())
    }

    pub fn stage_iterations(&self) -> usize {
        self.iterations / 2
    }
}

fn entropy_value_grad(pred: &[f64], eps: f64) -> (f64, Vec<f64>) {
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for &p in pred {
        let pc = p.clamp(eps, 1.0 - eps);
        value -= pc * pc.ln() + (1.0 - pc) * (1.0 - pc).ln();
        grad.push(if p == pc { ((1.0 - pc) / pc).ln() } else { 0.0 });
    }
    (value, grad)
}

/// Binary entropy of every pixel, summed; predictions are clamped to
/// `[log_eps, 1 − log_eps]`.
pub fn entropy_loss(g: &mut Graph, pred: Var, log_eps: f64) -> Result<Var> {
    let (value, grad) = entropy_value_grad(g.value(pred).data(), log_eps);
    g.loss(pred, value, grad, "entropy_loss")
}

/// Value of [`entropy_loss`] on a plain tensor.
pub fn entropy(pred: &Tensor, log_eps: f64) -> f64 {
    entropy_value_grad(pred.data(), log_eps).0
}

fn consistency_value_grad(teacher: &[f64], student: &[f64], weights: &[f64], eps: f64) -> (f64, Vec<f64>) {
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(student.len());
    for ((&t, &s), &w) in teacher.iter().zip(student).zip(weights) {
        let tc = t.clamp(eps, 1.0 - eps);
        let sc = s.clamp(eps, 1.0 - eps);
        let (ln_t, ln_1t) = (tc.ln(), (1.0 - tc).ln());
        let (ln_s, ln_1s) = (sc.ln(), (1.0 - sc).ln());
        value -= w * (t * ln_s + (1.0 - t) * ln_1s + s * ln_t + (1.0 - s) * ln_1t);
        let through_log = if s == sc { t / sc - (1.0 - t) / (1.0 - sc) } else { 0.0 };
        grad.push(-w * (through_log + ln_t - ln_1t));
    }
    (value, grad)
}

/// Weighted symmetric cross-entropy between the detached teacher map and the
/// student prediction, over the two channels `(p, 1 − p)`.
pub fn weighted_consistency_loss(
    g: &mut Graph,
    teacher: &Tensor,
    student: Var,
    weights: &Tensor,
    log_eps: f64,
) -> Result<Var> {
    let s = g.value(student);
    s.same_shape(teacher, "weighted_consistency_loss")?;
    s.same_shape(weights, "weighted_consistency_loss")?;
    let (value, grad) = consistency_value_grad(teacher.data(), s.data(), weights.data(), log_eps);
    g.loss(student, value, grad, "weighted_consistency_loss")
}

/// `θ′ ← rate·θ′ + (1 − rate)·θ` for every parameter; running statistics are
/// copied from the student.
pub fn ema_update(teacher: &mut SegModel, student: &SegModel, rate: f64) -> Result<()> {
    let same_keys = |a: &std::collections::BTreeMap<String, Tensor>, b: &std::collections::BTreeMap<String, Tensor>| {
        a.len() == b.len() && a.iter().zip(b).all(|((ka, ta), (kb, tb))| ka == kb && ta.shape() == tb.shape())
    };
    if !same_keys(teacher.params(), student.params()) || !same_keys(teacher.stats(), student.stats()) {
        return Err(Error::InvalidState("teacher and student parameter directories differ".into()));
    }
    for (t, s) in teacher.params_mut().values_mut().zip(student.params().values()) {
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = rate * *a + (1.0 - rate) * b;
        }
    }
    for (t, s) in teacher.stats_mut().values_mut().zip(student.stats().values()) {
        t.data_mut().copy_from_slice(s.data());
    }
    Ok(())
}

/// A flip/scale augmentation and its inverse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Augmentation {
    pub flip_h: bool,
    pub flip_v: bool,
    pub scale: f64,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        flip_h: false,
        flip_v: false,
        scale: 1.0,
    };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R, scales: &[f64]) -> Self {
        let flip_h = rng.random_bool(0.5);
        let flip_v = rng.random_bool(0.5);
        let scale = scales[rng.random_range(0..scales.len())];
        Self { flip_h, flip_v, scale }
    }

    pub fn scaled_size(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |n: usize| ((n as f64 * self.scale).round() as usize).max(1);
        (f(h), f(w))
    }

    /// Flips, rescales and edge-pads `image` (`[1, 1, h, w]`) so both sides
    /// are multiples of `divisor`. Returns the network input and the
    /// unpadded scaled size.
    pub fn apply(&self, image: &Tensor, divisor: usize) -> Result<(Tensor, (usize, usize))> {
        let (n, c, h, w) = image.dims4()?;
        let planes = n * c;
        let mut data = image.data().to_vec();
        if self.flip_h {
            data = kernels::flip(&data, planes, h, w, true);
        }
        if self.flip_v {
            data = kernels::flip(&data, planes, h, w, false);
        }
        let (sh, sw) = self.scaled_size(h, w);
        if (sh, sw) != (h, w) {
            data = kernels::resize_bilinear_forward(&data, planes, (h, w), (sh, sw));
        }
        let round_up = |v: usize| v.div_ceil(divisor) * divisor;
        let (ph, pw) = (round_up(sh), round_up(sw));
        if (ph, pw) != (sh, sw) {
            data = kernels::pad_edge(&data, planes, (sh, sw), (ph, pw));
        }
        Ok((Tensor::new(vec![n, c, ph, pw], data)?, (sh, sw)))
    }

    /// Maps a network output back to the original `h × w` frame.
    pub fn invert(&self, g: &mut Graph, out: Var, scaled: (usize, usize), original: (usize, usize)) -> Result<Var> {
        let (_, _, ph, pw) = g.value(out).dims4()?;
        let mut x = out;
        if (ph, pw) != scaled {
            x = g.crop(x, 0, 0, scaled.0, scaled.1)?;
        }
        if scaled != original {
            x = g.resize_bilinear(x, original.0, original.1)?;
        }
        if self.flip_v {
            x = g.flip_v(x)?;
        }
        if self.flip_h {
            x = g.flip_h(x)?;
        }
        Ok(x)
    }
}

/// Prediction of `model` on `image` seen through `aug`, mapped back to the
/// original frame, built on `g` with the given parameter binding.
fn predict_through(
    g: &mut Graph,
    model: &SegModel,
    binding: &crate::segnet::Binding,
    image: &Tensor,
    aug: &Augmentation,
) -> Result<Var> {
    let (h, w) = image.plane_dims()?;
    let (input, scaled) = aug.apply(image, model.meta().size_divisor())?;
    let x = g.constant(input);
    let (out, _) = model.forward_graph(g, x, binding, BnMode::Running)?;
    aug.invert(g, out, scaled, (h, w))
}

/// Average of the teacher's predictions over the given augmentations.
pub fn pseudolabel_with(
    teacher: &SegModel,
    router: &RouterParams,
    image: &Tensor,
    augs: &[Augmentation],
) -> Result<Tensor> {
    if augs.is_empty() {
        return Err(invalid_arg!("at least one augmentation round is required"));
    }
    let mut acc: Option<Vec<f64>> = None;
    for aug in augs {
        let mut g = Graph::new();
        let mut binding = teacher.bind(&mut g, false);
        teacher.bind_router(&mut g, &mut binding, router, false)?;
        let out = predict_through(&mut g, teacher, &binding, image, aug)?;
        let v = g.value(out).data();
        match acc.as_mut() {
            None => acc = Some(v.to_vec()),
            Some(a) => a.iter_mut().zip(v).for_each(|(a, b)| *a += b),
        }
    }
    let n = augs.len() as f64;
    let mut data = acc.expect("non-empty rounds");
    if augs.len() > 1 {
        data.iter_mut().for_each(|v| *v /= n);
    }
    Tensor::new(image.shape().to_vec(), data)
}

fn diverged(e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::AdaptationDiverged(what),
        other => other,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Stage1Record {
    /// Entropy before each update.
    pub entropy: Vec<f64>,
    /// Entropy with the final router parameters.
    pub entropy_after: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Stage2Step {
    pub consistency: f64,
    pub candidates: usize,
    pub keypoints: usize,
    pub rejected: usize,
    /// Mean `|ŷ″ − ŷ′|` over pixels with weight above 1 (0 when none).
    pub break_gap: f64,
    pub student_augmentations: Vec<Augmentation>,
}

/// Per-sample adaptation log record.
#[derive(Debug, Clone, Serialize)]
pub struct SampleLog {
    pub sample: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub stage1: Stage1Record,
    pub stage2: Vec<Stage2Step>,
}

impl SampleLog {
    /// One JSON object on a single line.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("log records serialize")
    }
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub prediction: Tensor,
    pub log: SampleLog,
}

/// Everything that persists along an adaptation stream.
#[derive(Debug, Clone)]
pub struct AdaptState {
    pub cfg: AdaptConfig,
    pub hg: HgConfig,
    source: SegModel,
    pub student: SegModel,
    pub teacher: SegModel,
    pub router: RouterParams,
    stage2_opt: Adam,
    rng: ChaCha8Rng,
    samples: usize,
}

impl AdaptState {
    /// Wraps the source model's encoder; student and teacher both start as
    /// copies of it.
    pub fn new(source: &SegModel, cfg: AdaptConfig, hg: HgConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        hg.validate()?;
        let (wrapped, router) = wrap_encoder(source, cfg.grid)?;
        let stage2_opt = Adam::with_hyper(cfg.lr_stage2, cfg.adam);
        Ok(Self {
            cfg,
            hg,
            source: wrapped.clone(),
            student: wrapped.clone(),
            teacher: wrapped,
            router,
            stage2_opt,
            rng: ChaCha8Rng::seed_from_u64(seed),
            samples: 0,
        })
    }

    pub fn samples_seen(&self) -> usize {
        self.samples
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let (n, c, h, w) = image.dims4()?;
        if (n, c) != (1, 1) {
            return Err(invalid_arg!("adaptation expects one single-channel image, got {:?}", image.shape()));
        }
        self.student.check_input_size(h, w)
    }

    /// Entropy-minimization steps on the router parameters only.
    pub fn stage1(&mut self, image: &Tensor) -> Result<Stage1Record> {
        self.check_image(image)?;
        let mut opt = Adam::with_hyper(self.cfg.lr_stage1, self.cfg.adam);
        let mut entropy = Vec::with_capacity(self.cfg.stage_iterations());
        for _ in 0..self.cfg.stage_iterations() {
            let mut g = Graph::new();
            let mut binding = self.student.bind(&mut g, false);
            self.student.bind_router(&mut g, &mut binding, &self.router, true)?;
            let x = g.constant(image.clone());
            let (pred, _) = self.student.forward_graph(&mut g, x, &binding, BnMode::Running).map_err(diverged)?;
            let loss = entropy_loss(&mut g, pred, self.cfg.log_eps)?;
            let lv = g.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::AdaptationDiverged(format!("entropy loss {lv}")));
            }
            g.backward(loss).map_err(diverged)?;
            let leaves = binding.router.as_ref().expect("router bound");
            let mut grad = Vec::with_capacity(self.router.count());
            for &leaf in leaves {
                match g.grad(leaf) {
                    Some(t) => grad.extend_from_slice(t.data()),
                    None => grad.extend(std::iter::repeat_n(0.0, g.value(leaf).len())),
                }
            }
            let grad = Tensor::new(self.router.delta.shape().to_vec(), grad)?;
            opt.step(&mut [&mut self.router.delta], &[grad])?;
            entropy.push(lv);
        }
        let pred = self.student.forward(image, Some(&self.router)).map_err(diverged)?;
        Ok(Stage1Record {
            entropy,
            entropy_after: crate::adapt::entropy(&pred, self.cfg.log_eps),
        })
    }

    /// Augmentation-averaged teacher prediction with the current router.
    pub fn teacher_pseudolabel(&mut self, image: &Tensor) -> Result<Tensor> {
        let augs: Vec<Augmentation> = (0..self.cfg.teacher_rounds)
            .map(|_| Augmentation::sample(&mut self.rng, &self.cfg.scales))
            .collect();
        pseudolabel_with(&self.teacher, &self.router, image, &augs).map_err(diverged)
    }

    /// Teacher pseudo-label and the pseudo-break plan built from it, without
    /// updating anything.
    pub fn hard_sample(&mut self, image: &Tensor) -> Result<(Tensor, crate::topohg::PseudoBreakPlan)> {
        self.check_image(image)?;
        let pseudo = self.teacher_pseudolabel(image)?;
        let plan = build_plan(image, &pseudo, &self.hg, &mut self.rng)?;
        Ok((pseudo, plan))
    }

    /// One teacher-student consistency update followed by the EMA step.
    pub fn stage2_iteration(&mut self, image: &Tensor) -> Result<Stage2Step> {
        self.check_image(image)?;
        let pseudo = self.teacher_pseudolabel(image)?;
        let plan = build_plan(image, &pseudo, &self.hg, &mut self.rng)?;
        let augs: Vec<Augmentation> = (0..self.cfg.student_rounds)
            .map(|_| Augmentation::sample(&mut self.rng, &self.cfg.scales))
            .collect();

        let mut g = Graph::new();
        let mut binding = self.student.bind(&mut g, true);
        self.student.bind_router(&mut g, &mut binding, &self.router, false)?;
        let mut pred: Option<Var> = None;
        for aug in &augs {
            let p = predict_through(&mut g, &self.student, &binding, &plan.hard_image, aug).map_err(diverged)?;
            pred = Some(match pred {
                None => p,
                Some(acc) => g.add(acc, p)?,
            });
        }
        let mut pred = pred.expect("at least one student round");
        if augs.len() > 1 {
            pred = g.scale(pred, 1.0 / augs.len() as f64)?;
        }
        let loss = weighted_consistency_loss(&mut g, &pseudo, pred, &plan.weight_map, self.cfg.log_eps)?;
        let lv = g.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(Error::AdaptationDiverged(format!("consistency loss {lv}")));
        }
        let break_gap = {
            let s = g.value(pred).data();
            let (mut sum, mut n) = (0.0, 0usize);
            for ((&a, &b), &w) in s.iter().zip(pseudo.data()).zip(plan.weight_map.data()) {
                if w > 1.0 {
                    sum += (a - b).abs();
                    n += 1;
                }
            }
            if n > 0 {
                sum / n as f64
            } else {
                0.0
            }
        };
        g.backward(loss).map_err(diverged)?;
        let grads: Vec<Tensor> = binding
            .params
            .iter()
            .map(|(name, &v)| {
                g.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.student.params()[name].shape()))
            })
            .collect();
        let mut refs: Vec<&mut Tensor> = self.student.params_mut().values_mut().collect();
        self.stage2_opt.step(&mut refs, &grads)?;
        ema_update(&mut self.teacher, &self.student, self.cfg.ema_rate)?;
        Ok(Stage2Step {
            consistency: lv,
            candidates: plan.candidates,
            keypoints: plan.breaks.len(),
            rejected: plan.rejected_count(),
            break_gap,
            student_augmentations: augs,
        })
    }

    /// Full per-sample process: router reset, both stages, and the final
    /// prediction of the unmodified image by the student with its router.
    pub fn adapt_sample(&mut self, image: &Tensor) -> Result<AdaptOutcome> {
        self.check_image(image)?;
        if !self.cfg.continual {
            self.student = self.source.clone();
            self.teacher = self.source.clone();
            self.stage2_opt.reset();
        }
        self.router.reset_to_zero();
        let stage1 = self.stage1(image)?;
        let mut stage2 = Vec::with_capacity(self.cfg.stage_iterations());
        for _ in 0..self.cfg.stage_iterations() {
            stage2.push(self.stage2_iteration(image)?);
        }
        let prediction = self.student.forward(image, Some(&self.router)).map_err(diverged)?;
        let log = SampleLog {
            sample: self.samples,
            stage1_steps: stage1.entropy.len(),
            stage2_steps: stage2.len(),
            stage1,
            stage2,
        };
        self.samples += 1;
        Ok(AdaptOutcome { prediction, log })
    }
}
