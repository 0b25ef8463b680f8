//! The finite-difference gradient suite, shared by the autodiff tests and
//! the acceptance run.

use rand::Rng;
use topotta::adapt::{entropy_loss, weighted_consistency_loss};
use topotta::segnet::{BnMode, ModelMeta, SegModel};
use topotta::topomdc::wrap_encoder;
use topotta::{grad_check, Graph, Tensor, Var};

use super::{random, rng};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const POINTS: u64 = 10;

type CaseFn = Box<dyn Fn(&mut Graph, Var, u64) -> topotta::Result<Var>>;

pub struct GradCase {
    pub group: &'static str,
    pub name: String,
    pub shape: Vec<usize>,
    /// Half-width of the uniform box the check points are drawn from.
    pub radius: f64,
    f: CaseFn,
}

impl GradCase {
    fn new(
        group: &'static str,
        name: impl Into<String>,
        shape: &[usize],
        f: impl Fn(&mut Graph, Var, u64) -> topotta::Result<Var> + 'static,
    ) -> Self {
        Self {
            group,
            name: name.into(),
            shape: shape.to_vec(),
            radius: 1.0,
            f: Box::new(f),
        }
    }

    /// Largest relative error over `POINTS` seeded points.
    pub fn max_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for seed in 0..POINTS {
            let mut r = rng(seed * 131 + self.shape.len() as u64);
            let point = Tensor::from_fn(&self.shape, |_| self.radius * r.random_range(-1.0..1.0));
            let err = grad_check(|g, x| (self.f)(g, x, seed), &point, H).unwrap();
            worst = worst.max(err);
        }
        worst
    }
}

/// Reduces any node to a scalar through a fixed random weighting, so every
/// output element carries a distinct cotangent.
pub fn probe(g: &mut Graph, y: Var, seed: u64) -> topotta::Result<Var> {
    let weights = random(g.value(y).shape(), &mut rng(seed ^ 0xfeed));
    let c = g.constant(weights);
    let prod = g.mul(y, c)?;
    g.sum(prod)
}

pub fn cases() -> Vec<GradCase> {
    let mut out = Vec::new();
    convolutions(&mut out);
    topomdc(&mut out);
    normalization(&mut out);
    shape_ops(&mut out);
    arithmetic(&mut out);
    losses(&mut out);
    composite(&mut out);
    out
}

fn convolutions(out: &mut Vec<GradCase>) {
    let mut r = rng(10);
    let w3 = random(&[3, 2, 3, 3], &mut r);
    let w1 = random(&[3, 2, 1, 1], &mut r);
    let x0 = random(&[2, 2, 5, 6], &mut r);
    let b0 = random(&[3], &mut r);
    let g = "conv";
    {
        let (w3, b0) = (w3.clone(), b0.clone());
        out.push(GradCase::new(g, "conv3x3 input", &[2, 2, 5, 6], move |g, x, s| {
            let (w, b) = (g.constant(w3.clone()), g.constant(b0.clone()));
            let y = g.conv3x3(x, w, Some(b))?;
            probe(g, y, s)
        }));
    }
    {
        let x0 = x0.clone();
        out.push(GradCase::new(g, "conv3x3 weight", &[3, 2, 3, 3], move |g, w, s| {
            let x = g.constant(x0.clone());
            let y = g.conv3x3(x, w, None)?;
            probe(g, y, s)
        }));
    }
    {
        let (x0, w3) = (x0.clone(), w3.clone());
        out.push(GradCase::new(g, "conv3x3 bias", &[3], move |g, b, s| {
            let (x, w) = (g.constant(x0.clone()), g.constant(w3.clone()));
            let y = g.conv3x3(x, w, Some(b))?;
            probe(g, y, s)
        }));
    }
    {
        let (w1, b0) = (w1.clone(), b0.clone());
        out.push(GradCase::new(g, "conv1x1 input", &[2, 2, 5, 6], move |g, x, s| {
            let (w, b) = (g.constant(w1.clone()), g.constant(b0.clone()));
            let y = g.conv1x1(x, w, Some(b))?;
            probe(g, y, s)
        }));
    }
    {
        let x0 = x0.clone();
        out.push(GradCase::new(g, "conv1x1 weight", &[3, 2, 1, 1], move |g, w, s| {
            let x = g.constant(x0.clone());
            let y = g.conv1x1(x, w, None)?;
            probe(g, y, s)
        }));
    }
    out.push(GradCase::new(g, "conv1x1 bias", &[3], move |g, b, s| {
        let (x, w) = (g.constant(x0.clone()), g.constant(w1.clone()));
        let y = g.conv1x1(x, w, Some(b))?;
        probe(g, y, s)
    }));
}

fn topomdc(out: &mut Vec<GradCase>) {
    let mut r = rng(11);
    let w0 = random(&[2, 2, 3, 3], &mut r);
    let x0 = random(&[1, 2, 8, 8], &mut r);
    let d0 = random(&[4, 8], &mut r);
    let b0 = random(&[2], &mut r);
    let g = "topomdc";
    {
        let (w0, d0, b0) = (w0.clone(), d0.clone(), b0.clone());
        out.push(GradCase::new(g, "topomdc input", &[1, 2, 8, 8], move |g, x, s| {
            let (w, d, b) = (g.constant(w0.clone()), g.constant(d0.clone()), g.constant(b0.clone()));
            let y = g.topomdc(x, w, Some(b), d, 2)?;
            probe(g, y, s)
        }));
    }
    {
        let (x0, d0) = (x0.clone(), d0.clone());
        out.push(GradCase::new(g, "topomdc weight", &[2, 2, 3, 3], move |g, w, s| {
            let (x, d) = (g.constant(x0.clone()), g.constant(d0.clone()));
            let y = g.topomdc(x, w, None, d, 2)?;
            probe(g, y, s)
        }));
    }
    {
        let (x0, w0) = (x0.clone(), w0.clone());
        out.push(GradCase::new(g, "topomdc delta", &[4, 8], move |g, d, s| {
            let (x, w) = (g.constant(x0.clone()), g.constant(w0.clone()));
            let y = g.topomdc(x, w, None, d, 2)?;
            probe(g, y, s)
        }));
    }
    out.push(GradCase::new(g, "topomdc bias", &[2], move |g, b, s| {
        let (x, w, d) = (g.constant(x0.clone()), g.constant(w0.clone()), g.constant(d0.clone()));
        let y = g.topomdc(x, w, Some(b), d, 2)?;
        probe(g, y, s)
    }));

    // d(output)/dδ through a whole wrapped encoder-decoder, per router layer.
    let model = SegModel::new(ModelMeta { levels: 2, base_channels: 2 }, 5).unwrap();
    let (wrapped, router) = wrap_encoder(&model, 2).unwrap();
    let image = Tensor::from_fn(&[1, 1, 8, 8], |i| ((i * 37) % 11) as f64 / 10.0);
    for layer in 0..router.layers.len() {
        let (wrapped, router, image) = (wrapped.clone(), router.clone(), image.clone());
        let mut case = GradCase::new(g, format!("wrapped encoder router layer {layer}"), &[4, 8], move |g, d, s| {
            let mut binding = wrapped.bind(g, false);
            let mut leaves: Vec<Var> = (0..router.layers.len()).map(|l| g.constant(router.layer(l))).collect();
            leaves[layer] = d;
            binding.router = Some(leaves);
            let x = g.constant(image.clone());
            let (y, _) = wrapped.forward_graph(g, x, &binding, BnMode::Running)?;
            probe(g, y, s)
        });
        case.radius = 0.3;
        out.push(case);
    }
}

fn normalization(out: &mut Vec<GradCase>) {
    let mut r = rng(12);
    let x0 = random(&[2, 3, 4, 4], &mut r);
    let gamma0 = Tensor::from_fn(&[3], |_| r.random_range(0.5..1.5));
    let beta0 = random(&[3], &mut r);
    let mean = [0.1, -0.2, 0.3];
    let var = [0.5, 1.5, 0.8];
    let g = "batchnorm";
    {
        let (gamma0, beta0) = (gamma0.clone(), beta0.clone());
        out.push(GradCase::new(g, "batchnorm input", &[2, 3, 4, 4], move |g, x, s| {
            let (ga, be) = (g.constant(gamma0.clone()), g.constant(beta0.clone()));
            let y = g.batchnorm(x, ga, be, &mean, &var, 1e-5)?;
            probe(g, y, s)
        }));
    }
    {
        let (x0, beta0) = (x0.clone(), beta0.clone());
        out.push(GradCase::new(g, "batchnorm gamma", &[3], move |g, ga, s| {
            let (x, be) = (g.constant(x0.clone()), g.constant(beta0.clone()));
            let y = g.batchnorm(x, ga, be, &mean, &var, 1e-5)?;
            probe(g, y, s)
        }));
    }
    {
        let (x0, gamma0) = (x0.clone(), gamma0.clone());
        out.push(GradCase::new(g, "batchnorm beta", &[3], move |g, be, s| {
            let (x, ga) = (g.constant(x0.clone()), g.constant(gamma0.clone()));
            let y = g.batchnorm(x, ga, be, &mean, &var, 1e-5)?;
            probe(g, y, s)
        }));
    }
    {
        let (gamma0, beta0) = (gamma0.clone(), beta0.clone());
        out.push(GradCase::new(g, "batch-statistics batchnorm input", &[2, 3, 4, 4], move |g, x, s| {
            let (ga, be) = (g.constant(gamma0.clone()), g.constant(beta0.clone()));
            let (y, _, _) = g.batchnorm_batch(x, ga, be, 1e-5)?;
            probe(g, y, s)
        }));
    }
    out.push(GradCase::new(g, "batch-statistics batchnorm gamma", &[3], move |g, ga, s| {
        let (x, be) = (g.constant(x0.clone()), g.constant(beta0.clone()));
        let (y, _, _) = g.batchnorm_batch(x, ga, be, 1e-5)?;
        probe(g, y, s)
    }));
}

fn shape_ops(out: &mut Vec<GradCase>) {
    let other = random(&[1, 2, 6, 4], &mut rng(13));
    let s = [1, 2, 6, 4];
    let g = "shape";
    out.push(GradCase::new(g, "maxpool2x2", &s, |g, x, s| {
        let y = g.maxpool2x2(x)?;
        probe(g, y, s)
    }));
    out.push(GradCase::new(g, "resize down", &s, |g, x, s| {
        let y = g.resize_bilinear(x, 4, 3)?;
        probe(g, y, s)
    }));
    out.push(GradCase::new(g, "resize up", &s, |g, x, s| {
        let y = g.resize_bilinear(x, 9, 7)?;
        probe(g, y, s)
    }));
    out.push(GradCase::new(g, "upsample", &s, |g, x, s| {
        let y = g.upsample_bilinear(x, 2)?;
        probe(g, y, s)
    }));
    out.push(GradCase::new(g, "concat", &s, move |g, x, s| {
        let o = g.constant(other.clone());
        let y = g.concat_channels(o, x)?;
        probe(g, y, s)
    }));
    out.push(GradCase::new(g, "flip_h", &s, |g, x, s| {
        let y = g.flip_h(x)?;
        probe(g, y, s)
    }));
    out.push(GradCase::new(g, "flip_v", &s, |g, x, s| {
        let y = g.flip_v(x)?;
        probe(g, y, s)
    }));
    out.push(GradCase::new(g, "crop", &s, |g, x, s| {
        let y = g.crop(x, 1, 1, 4, 2)?;
        probe(g, y, s)
    }));
}

fn arithmetic(out: &mut Vec<GradCase>) {
    let other = random(&[3, 4], &mut rng(14));
    let g = "arithmetic";
    out.push(GradCase::new(g, "relu", &[3, 4], |g, x, s| {
        let y = g.relu(x)?;
        probe(g, y, s)
    }));
    out.push(GradCase::new(g, "sigmoid", &[3, 4], |g, x, s| {
        let y = g.sigmoid(x)?;
        probe(g, y, s)
    }));
    {
        let other = other.clone();
        out.push(GradCase::new(g, "add", &[3, 4], move |g, x, s| {
            let o = g.constant(other.clone());
            let y = g.add(x, o)?;
            probe(g, y, s)
        }));
    }
    out.push(GradCase::new(g, "mul", &[3, 4], move |g, x, s| {
        let o = g.constant(other.clone());
        let y = g.mul(x, o)?;
        probe(g, y, s)
    }));
    out.push(GradCase::new(g, "mul self", &[3, 4], |g, x, s| {
        let y = g.mul(x, x)?;
        probe(g, y, s)
    }));
    out.push(GradCase::new(g, "scale", &[3, 4], |g, x, s| {
        let y = g.scale(x, -2.5)?;
        probe(g, y, s)
    }));
    out.push(GradCase::new(g, "sum", &[3, 4], |g, x, _| g.sum(x)));
}

fn losses(out: &mut Vec<GradCase>) {
    let mut r = rng(15);
    let teacher = Tensor::from_fn(&[1, 1, 4, 5], |_| r.random_range(0.05..0.95));
    let weights = Tensor::from_fn(&[1, 1, 4, 5], |i| if i % 3 == 0 { 10.0 } else { 1.0 });
    let g = "loss";
    out.push(GradCase::new(g, "entropy of sigmoid", &[1, 1, 4, 5], |g, x, _| {
        let p = g.sigmoid(x)?;
        entropy_loss(g, p, 1e-7)
    }));
    out.push(GradCase::new(g, "weighted consistency", &[1, 1, 4, 5], move |g, x, _| {
        let p = g.sigmoid(x)?;
        weighted_consistency_loss(g, &teacher, p, &weights, 1e-7)
    }));
}

fn composite(out: &mut Vec<GradCase>) {
    let w0 = random(&[3, 1, 3, 3], &mut rng(16));
    out.push(GradCase::new("composite", "conv-bn-relu-sum", &[1, 1, 6, 6], move |g, x, _| {
        let w = g.constant(w0.clone());
        let c = g.conv3x3(x, w, None)?;
        let ga = g.constant(Tensor::full(&[3], 1.2));
        let be = g.constant(Tensor::full(&[3], 0.1));
        let n = g.batchnorm(c, ga, be, &[0.0, 0.1, -0.1], &[1.0, 2.0, 0.5], 1e-5)?;
        let y = g.relu(n)?;
        g.sum(y)
    }));
}
