//! Tape-based reverse-mode differentiation over the small set of layer
//! primitives the segmentation network and the adaptation stages need.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` is a single reverse sweep.

use crate::error::{invalid_arg, Error, Result};
use crate::kernels::{self, ConvDims, PatchGrid};
use crate::tensor::Tensor;
use crate::topomdc;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv3x3 {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    TopoMdc {
        x: Var,
        w: Var,
        b: Option<Var>,
        delta: Var,
        grid: PatchGrid,
        kernels: Vec<f64>,
    },
    Conv1x1 {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu(Var),
    Sigmoid(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        /// Statistics were computed from `x` itself, so they are
        /// differentiated through as well.
        batch_stats: bool,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Resize(Var),
    Concat(Var, Var),
    Flip {
        x: Var,
        horizontal: bool,
    },
    Crop {
        x: Var,
        top: usize,
        left: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    /// Scalar loss whose gradient with respect to `x` was computed during
    /// the forward pass.
    Loss {
        x: Var,
        grad: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`] call, for leaves.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, value: Tensor, op: Op, parents: &[Var], name: &str) -> Result<Var> {
        value.check_finite(name)?;
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    fn conv_dims(&self, x: Var, w: Var, k: usize, name: &str) -> Result<ConvDims> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let ws = self.value(w).shape();
        if ws.len() != 4 || ws[1] != cin || ws[2] != k || ws[3] != k {
            return Err(invalid_arg!(
                "{name}: weight {:?} does not fit input {:?}",
                ws,
                self.value(x).shape()
            ));
        }
        if h == 0 || wd == 0 {
            return Err(invalid_arg!("{name}: empty spatial extent"));
        }
        Ok(ConvDims {
            n,
            cin,
            cout: ws[0],
            h,
            w: wd,
        })
    }

    fn check_bias(&self, b: Option<Var>, cout: usize, name: &str) -> Result<()> {
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(invalid_arg!(
                    "{name}: bias shape {:?}, expected [{cout}]",
                    self.value(b).shape()
                ));
            }
        }
        Ok(())
    }

    pub fn conv3x3(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let d = self.conv_dims(x, w, 3, "conv3x3")?;
        self.check_bias(b, d.cout, "conv3x3")?;
        let out = kernels::conv3x3_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            d,
            PatchGrid::SINGLE,
        );
        let value = Tensor::new(vec![d.n, d.cout, d.h, d.w], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push_checked(value, Op::Conv3x3 { x, w, b }, &parents, "conv3x3")
    }

    /// Router-weighted directional difference convolution. `delta` has shape
    /// `[grid², 8]`; see [`crate::topomdc`].
    pub fn topomdc(&mut self, x: Var, w: Var, b: Option<Var>, delta: Var, grid: usize) -> Result<Var> {
        let d = self.conv_dims(x, w, 3, "topomdc")?;
        self.check_bias(b, d.cout, "topomdc")?;
        let grid = PatchGrid::square(grid);
        if self.value(delta).shape() != [grid.count(), topomdc::DIRECTIONS] {
            return Err(invalid_arg!(
                "topomdc: router shape {:?}, expected [{}, {}]",
                self.value(delta).shape(),
                grid.count(),
                topomdc::DIRECTIONS
            ));
        }
        let kernels = topomdc::fuse_kernels(self.value(w).data(), self.value(delta).data(), d.cout, d.cin);
        let out = kernels::conv3x3_forward(
            self.value(x).data(),
            &kernels,
            b.map(|b| self.value(b).data()),
            d,
            grid,
        );
        let value = Tensor::new(vec![d.n, d.cout, d.h, d.w], out)?;
        let mut parents = vec![x, w, delta];
        parents.extend(b);
        self.push_checked(
            value,
            Op::TopoMdc {
                x,
                w,
                b,
                delta,
                grid,
                kernels,
            },
            &parents,
            "topomdc",
        )
    }

    pub fn conv1x1(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let d = self.conv_dims(x, w, 1, "conv1x1")?;
        self.check_bias(b, d.cout, "conv1x1")?;
        let out = kernels::conv1x1_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            d,
        );
        let value = Tensor::new(vec![d.n, d.cout, d.h, d.w], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push_checked(value, Op::Conv1x1 { x, w, b }, &parents, "conv1x1")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push_checked(value, Op::Relu(x), &[x], "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(sigmoid);
        self.push_checked(value, Op::Sigmoid(x), &[x], "sigmoid")
    }

    /// Inference-mode batch normalization with fixed statistics. Only `x`,
    /// `gamma` and `beta` receive gradients.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        self.batchnorm_impl(x, gamma, beta, running_mean, running_var, eps, false)
    }

    /// Training-mode batch normalization: per-channel mean and biased
    /// variance over batch and space, differentiated through. Returns the
    /// output together with the statistics used.
    pub fn batchnorm_batch(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (mean, var) = kernels::channel_moments(self.value(x).data(), self.value(x).dims4()?);
        let out = self.batchnorm_impl(x, gamma, beta, &mean, &var, eps, true)?;
        Ok((out, mean, var))
    }

    #[allow(clippy::too_many_arguments)]
    fn batchnorm_impl(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
        batch_stats: bool,
    ) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(invalid_arg!("batchnorm: eps must be positive, got {eps}"));
        }
        let (n, c, h, w) = self.value(x).dims4()?;
        for (name, len) in [
            ("gamma", self.value(gamma).len()),
            ("beta", self.value(beta).len()),
            ("running_mean", running_mean.len()),
            ("running_var", running_var.len()),
        ] {
            if len != c {
                return Err(invalid_arg!("batchnorm: {name} has {len} entries for {c} channels"));
            }
        }
        if running_var.iter().chain(running_mean).any(|v| !v.is_finite()) {
            return Err(Error::InvalidState("batchnorm: non-finite running statistics".into()));
        }
        if running_var.iter().any(|&v| v + eps <= 0.0) {
            return Err(Error::InvalidState("batchnorm: negative running variance".into()));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let plane = h * w;
        let src = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = Vec::with_capacity(src.len());
        for b in 0..n {
            for ch in 0..c {
                let scale = g[ch] * inv_std[ch];
                let shift = bt[ch] - running_mean[ch] * scale;
                out.extend(src[(b * c + ch) * plane..][..plane].iter().map(|v| v * scale + shift));
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        self.push_checked(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
            "batchnorm",
        )
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(invalid_arg!("maxpool2x2: spatial size {h}x{w} is not even"));
        }
        let (out, argmax) = kernels::maxpool2_forward(self.value(x).data(), n * c, h, w);
        let value = Tensor::new(vec![n, c, h / 2, w / 2], out)?;
        self.push_checked(value, Op::MaxPool2 { x, argmax }, &[x], "maxpool2x2")
    }

    /// Half-pixel bilinear resampling to `(oh, ow)`.
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if oh == 0 || ow == 0 || h == 0 || w == 0 {
            return Err(invalid_arg!("resize_bilinear: empty size {h}x{w} -> {oh}x{ow}"));
        }
        let out = kernels::resize_bilinear_forward(self.value(x).data(), n * c, (h, w), (oh, ow));
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        self.push_checked(value, Op::Resize(x), &[x], "resize_bilinear")
    }

    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(invalid_arg!("upsample_bilinear: zero factor"));
        }
        let (_, _, h, w) = self.value(x).dims4()?;
        self.resize_bilinear(x, h * factor, w * factor)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(invalid_arg!(
                "concat_channels: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let plane = h * w;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for i in 0..n {
            out.extend_from_slice(&da[i * ca * plane..][..ca * plane]);
            out.extend_from_slice(&db[i * cb * plane..][..cb * plane]);
        }
        let value = Tensor::new(vec![n, ca + cb, h, w], out)?;
        self.push_checked(value, Op::Concat(a, b), &[a, b], "concat_channels")
    }

    pub fn flip_h(&mut self, x: Var) -> Result<Var> {
        self.flip(x, true)
    }

    pub fn flip_v(&mut self, x: Var) -> Result<Var> {
        self.flip(x, false)
    }

    fn flip(&mut self, x: Var, horizontal: bool) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let out = kernels::flip(self.value(x).data(), n * c, h, w, horizontal);
        let value = Tensor::new(vec![n, c, h, w], out)?;
        self.push_checked(value, Op::Flip { x, horizontal }, &[x], "flip")
    }

    pub fn crop(&mut self, x: Var, top: usize, left: usize, oh: usize, ow: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if top + oh > h || left + ow > w {
            return Err(invalid_arg!(
                "crop: window {oh}x{ow} at ({top},{left}) exceeds {h}x{w}"
            ));
        }
        let out = kernels::crop(self.value(x).data(), n * c, (h, w), (top, left), (oh, ow));
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        self.push_checked(value, Op::Crop { x, top, left }, &[x], "crop")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b), "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push_checked(value, Op::Add(a, b), &[a, b], "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b), "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push_checked(value, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * factor);
        self.push_checked(value, Op::Scale(x, factor), &[x], "scale")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push_checked(value, Op::Sum(x), &[x], "sum")
    }

    /// Records a scalar loss together with its gradient with respect to `x`.
    pub(crate) fn loss(&mut self, x: Var, value: f64, grad: Vec<f64>, name: &str) -> Result<Var> {
        debug_assert_eq!(grad.len(), self.value(x).len());
        self.push_checked(Tensor::scalar(value), Op::Loss { x, grad }, &[x], name)
    }

    /// Reverse sweep from a scalar node. Previous gradients are discarded
    /// first; afterwards [`Graph::grad`] holds `d(loss)/d(leaf)` for every
    /// leaf that requires gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(invalid_arg!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        self.zero_grad();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            g.check_finite("backward")?;
            self.propagate(i, &g)?;
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, data: Vec<f64>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(&data) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), data)?);
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, i: usize, g: &Tensor) -> Result<()> {
        // The op is moved out for the duration so its saved buffers can be
        // read while gradients are accumulated into other nodes.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let result = self.propagate_op(i, &op, g.data());
        self.nodes[i].op = op;
        result
    }

    fn propagate_op(&mut self, i: usize, op: &Op, gd: &[f64]) -> Result<()> {
        match op {
            Op::Leaf => Ok(()),
            &Op::Conv3x3 { x, w, b } => {
                let d = self.conv_dims(x, w, 3, "conv3x3")?;
                if self.needs(x) {
                    let gx = kernels::conv3x3_backward_input(gd, self.value(w).data(), d, PatchGrid::SINGLE);
                    self.accumulate(x, gx)?;
                }
                if self.needs(w) {
                    let gw =
                        kernels::conv3x3_backward_kernels(gd, self.value(x).data(), d, PatchGrid::SINGLE);
                    self.accumulate(w, gw)?;
                }
                if let Some(b) = b.filter(|&b| self.needs(b)) {
                    self.accumulate(b, kernels::channel_sums(gd, d.n, d.cout, d.h * d.w))?;
                }
                Ok(())
            }
            Op::TopoMdc {
                x,
                w,
                b,
                delta,
                grid,
                kernels: k,
            } => {
                let (x, w, b, delta, grid) = (*x, *w, *b, *delta, *grid);
                let d = self.conv_dims(x, w, 3, "topomdc")?;
                let gx = self
                    .needs(x)
                    .then(|| kernels::conv3x3_backward_input(gd, k, d, grid));
                if let Some(gx) = gx {
                    self.accumulate(x, gx)?;
                }
                if self.needs(w) || self.needs(delta) {
                    let gk = kernels::conv3x3_backward_kernels(gd, self.value(x).data(), d, grid);
                    let (gw, gdelta) = topomdc::fuse_kernels_backward(
                        &gk,
                        self.value(w).data(),
                        self.value(delta).data(),
                        d.cout,
                        d.cin,
                    );
                    self.accumulate(w, gw)?;
                    self.accumulate(delta, gdelta)?;
                }
                if let Some(b) = b.filter(|&b| self.needs(b)) {
                    self.accumulate(b, kernels::channel_sums(gd, d.n, d.cout, d.h * d.w))?;
                }
                Ok(())
            }
            &Op::Conv1x1 { x, w, b } => {
                let d = self.conv_dims(x, w, 1, "conv1x1")?;
                let (gx, gw) = kernels::conv1x1_backward(gd, self.value(x).data(), self.value(w).data(), d);
                self.accumulate(x, gx)?;
                self.accumulate(w, gw)?;
                if let Some(b) = b {
                    self.accumulate(b, kernels::channel_sums(gd, d.n, d.cout, d.h * d.w))?;
                }
                Ok(())
            }
            &Op::Relu(x) => {
                let out = self.nodes[i].value.data();
                let gx = gd.iter().zip(out).map(|(g, &y)| if y > 0.0 { *g } else { 0.0 }).collect();
                self.accumulate(x, gx)
            }
            &Op::Sigmoid(x) => {
                let out = self.nodes[i].value.data();
                let gx = gd.iter().zip(out).map(|(g, &y)| g * y * (1.0 - y)).collect();
                self.accumulate(x, gx)
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (n, c, h, w) = self.value(x).dims4()?;
                let plane = h * w;
                let xs = self.value(x).data();
                let gam = self.value(gamma).data();
                let mut gx = Vec::with_capacity(xs.len());
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for bi in 0..n {
                    for ch in 0..c {
                        let off = (bi * c + ch) * plane;
                        let scale = gam[ch] * inv_std[ch];
                        for (gv, xv) in gd[off..off + plane].iter().zip(&xs[off..off + plane]) {
                            gx.push(gv * scale);
                            gg[ch] += gv * (xv - mean[ch]) * inv_std[ch];
                            gb[ch] += gv;
                        }
                    }
                }
                if *batch_stats {
                    // dx = γ/σ · (dy − mean(dy) − x̂ · mean(dy · x̂))
                    let count = (n * plane) as f64;
                    for bi in 0..n {
                        for ch in 0..c {
                            let off = (bi * c + ch) * plane;
                            let scale = gam[ch] * inv_std[ch];
                            let (mg, mgx) = (gb[ch] / count, gg[ch] / count);
                            for (g, xv) in gx[off..off + plane].iter_mut().zip(&xs[off..off + plane]) {
                                let xhat = (xv - mean[ch]) * inv_std[ch];
                                *g -= scale * (mg + xhat * mgx);
                            }
                        }
                    }
                }
                self.accumulate(x, gx)?;
                self.accumulate(gamma, gg)?;
                self.accumulate(beta, gb)
            }
            Op::MaxPool2 { x, argmax } => {
                let x = *x;
                let mut gx = vec![0.0; self.value(x).len()];
                for (gv, &src) in gd.iter().zip(argmax) {
                    gx[src] += gv;
                }
                self.accumulate(x, gx)
            }
            &Op::Resize(x) => {
                let (n, c, h, w) = self.value(x).dims4()?;
                let (_, _, oh, ow) = self.nodes[i].value.dims4()?;
                let gx = kernels::resize_bilinear_backward(gd, n * c, (h, w), (oh, ow));
                self.accumulate(x, gx)
            }
            &Op::Concat(a, b) => {
                let (n, ca, h, w) = self.value(a).dims4()?;
                let cb = self.value(b).dims4()?.1;
                let plane = h * w;
                let mut ga = Vec::with_capacity(n * ca * plane);
                let mut gb = Vec::with_capacity(n * cb * plane);
                for bi in 0..n {
                    let off = bi * (ca + cb) * plane;
                    ga.extend_from_slice(&gd[off..off + ca * plane]);
                    gb.extend_from_slice(&gd[off + ca * plane..off + (ca + cb) * plane]);
                }
                self.accumulate(a, ga)?;
                self.accumulate(b, gb)
            }
            &Op::Flip { x, horizontal } => {
                let (n, c, h, w) = self.value(x).dims4()?;
                self.accumulate(x, kernels::flip(gd, n * c, h, w, horizontal))
            }
            &Op::Crop { x, top, left } => {
                let (n, c, h, w) = self.value(x).dims4()?;
                let (_, _, oh, ow) = self.nodes[i].value.dims4()?;
                let mut gx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for y in 0..oh {
                        let dst = &mut gx[p * h * w + (top + y) * w + left..][..ow];
                        dst.copy_from_slice(&gd[p * oh * ow + y * ow..][..ow]);
                    }
                }
                self.accumulate(x, gx)
            }
            &Op::Add(a, b) => {
                self.accumulate(a, gd.to_vec())?;
                self.accumulate(b, gd.to_vec())
            }
            &Op::Mul(a, b) => {
                let ga = gd.iter().zip(self.value(b).data()).map(|(g, v)| g * v).collect();
                let gb = gd.iter().zip(self.value(a).data()).map(|(g, v)| g * v).collect();
                self.accumulate(a, ga)?;
                self.accumulate(b, gb)
            }
            &Op::Scale(x, f) => self.accumulate(x, gd.iter().map(|g| g * f).collect()),
            &Op::Sum(x) => {
                let n = self.value(x).len();
                self.accumulate(x, vec![gd[0]; n])
            }
            Op::Loss { x, grad } => {
                let x = *x;
                let scaled = grad.iter().map(|v| v * gd[0]).collect();
                self.accumulate(x, scaled)
            }
        }
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Compares the analytic gradient of a scalar function against central
/// differences with step `h`, returning
/// `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(invalid_arg!("grad_check: step must be positive, got {h}"));
    }
    let mut g = Graph::new();
    let x = g.leaf(point.clone(), true);
    let out = f(&mut g, x)?;
    g.backward(out)?;
    let analytic = g
        .grad(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape()));

    let eval = |p: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(p, false);
        let out = f(&mut g, x)?;
        let v = g.value(out);
        if !v.is_scalar() {
            return Err(invalid_arg!("grad_check: function is not scalar-valued"));
        }
        Ok(v.data()[0])
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
