//! Topology-meta difference convolutions.
//!
//! Each direction `i` pairs a three-tap receptive field `R_i` with a single
//! shift `b_i`. With `S = Σ_R w` and `S_i = Σ_{R_i} w` the directional
//! response reduces to
//!
//! ```text
//! C_i(r) = x(r)·(S − S_i) + x(r − b_i)·S_i
//! ```
//!
//! Offsets are `(dx, dy)` with `dx` along columns and `dy` along rows. A
//! weight tap `w(Δ)` multiplies `x(r − Δ)`, so in the usual cross-correlation
//! layout `K[ky][kx]` it sits at `ky = 1 − dy`, `kx = 1 − dx`. The shifted read
//! `x(r − b_i)` lands on the same tap as `w(b_i)`, which is what lets the
//! router-weighted mixture collapse into one 3×3 kernel per patch.

use crate::error::{invalid_arg, Error, Result};
use crate::graph::Graph;
use crate::kernels::{self, ConvDims};
use crate::segnet::SegModel;
use crate::tensor::Tensor;

pub const DIRECTIONS: usize = 8;

/// Receptive field and shift of one directional difference convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DirectionSpec {
    /// 1-based direction index.
    pub index: usize,
    pub receptive: [(i32, i32); 3],
    pub shift: (i32, i32),
}

pub const DIRECTION_TABLE: [DirectionSpec; DIRECTIONS] = [
    DirectionSpec { index: 1, receptive: [(-1, -1), (-1, 0), (0, -1)], shift: (-1, -1) },
    DirectionSpec { index: 2, receptive: [(0, -1), (-1, -1), (1, -1)], shift: (0, -1) },
    DirectionSpec { index: 3, receptive: [(1, -1), (0, -1), (1, 0)], shift: (1, -1) },
    DirectionSpec { index: 4, receptive: [(-1, 0), (-1, -1), (-1, 1)], shift: (-1, 0) },
    DirectionSpec { index: 5, receptive: [(1, 0), (1, 1), (1, -1)], shift: (1, 0) },
    DirectionSpec { index: 6, receptive: [(-1, 1), (-1, 0), (0, 1)], shift: (-1, 1) },
    DirectionSpec { index: 7, receptive: [(0, 1), (1, 1), (-1, 1)], shift: (0, 1) },
    DirectionSpec { index: 8, receptive: [(1, 1), (0, 1), (1, 0)], shift: (1, 1) },
];

pub const CENTER_TAP: usize = 4;

/// Flat index into a 3×3 kernel of the weight `w(Δ)`.
pub const fn tap(offset: (i32, i32)) -> usize {
    ((1 - offset.1) * 3 + (1 - offset.0)) as usize
}

pub fn direction(i: usize) -> Result<&'static DirectionSpec> {
    if (1..=DIRECTIONS).contains(&i) {
        Ok(&DIRECTION_TABLE[i - 1])
    } else {
        Err(invalid_arg!("direction index must be in 1..=8, got {i}"))
    }
}

fn receptive_sum(k: &[f64], dir: &DirectionSpec) -> f64 {
    dir.receptive.iter().map(|&o| k[tap(o)]).sum()
}

/// Builds the per-patch effective kernels of the router-weighted mixture
/// `C_0 − Σ_i δ_{p,i}·C_i`, laid out `[patch][cout][cin][9]`.
pub fn fuse_kernels(weight: &[f64], delta: &[f64], cout: usize, cin: usize) -> Vec<f64> {
    let pairs = cout * cin;
    let patches = delta.len() / DIRECTIONS;
    let mut out = Vec::with_capacity(patches * pairs * 9);
    for p in 0..patches {
        let d = &delta[p * DIRECTIONS..][..DIRECTIONS];
        for pair in 0..pairs {
            let k = &weight[pair * 9..][..9];
            let total: f64 = k.iter().sum();
            let mut eff = [0.0; 9];
            eff.copy_from_slice(k);
            for (dir, &dv) in DIRECTION_TABLE.iter().zip(d) {
                let s_i = receptive_sum(k, dir);
                eff[CENTER_TAP] -= dv * (total - s_i);
                eff[tap(dir.shift)] -= dv * s_i;
            }
            out.extend_from_slice(&eff);
        }
    }
    out
}

/// Chains the gradient of the effective kernels back to the shared weight
/// and the router parameters. Returns `(d weight, d delta)`.
pub fn fuse_kernels_backward(
    grad_kernels: &[f64],
    weight: &[f64],
    delta: &[f64],
    cout: usize,
    cin: usize,
) -> (Vec<f64>, Vec<f64>) {
    let pairs = cout * cin;
    let patches = delta.len() / DIRECTIONS;
    let mut gw = vec![0.0; weight.len()];
    let mut gd = vec![0.0; delta.len()];
    for p in 0..patches {
        let d = &delta[p * DIRECTIONS..][..DIRECTIONS];
        for pair in 0..pairs {
            let k = &weight[pair * 9..][..9];
            let g = &grad_kernels[(p * pairs + pair) * 9..][..9];
            let gc = g[CENTER_TAP];
            let total: f64 = k.iter().sum();
            let gwk = &mut gw[pair * 9..][..9];
            let mut d_total = 0.0;
            for t in 0..9 {
                gwk[t] += g[t];
            }
            for (i, (dir, &dv)) in DIRECTION_TABLE.iter().zip(d).enumerate() {
                let s_i = receptive_sum(k, dir);
                let gs = g[tap(dir.shift)];
                d_total -= gc * dv;
                let d_si = dv * (gc - gs);
                for &o in &dir.receptive {
                    gwk[tap(o)] += d_si;
                }
                gd[p * DIRECTIONS + i] += -gc * (total - s_i) - gs * s_i;
            }
            for v in gwk.iter_mut() {
                *v += d_total;
            }
        }
    }
    (gw, gd)
}

fn conv_dims(input: &Tensor, weight: &Tensor) -> Result<ConvDims> {
    let (n, cin, h, w) = input.dims4()?;
    match weight.shape() {
        &[cout, wc, 3, 3] if wc == cin => Ok(ConvDims { n, cin, cout, h, w }),
        s => Err(invalid_arg!("weight {:?} does not fit input {:?}", s, input.shape())),
    }
}

/// Central difference term: `x(r)·Σ_Δ w(Δ)` per channel pair.
pub fn cdc_central(input: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let d = conv_dims(input, weight)?;
    let summed: Vec<f64> = weight.data().chunks(9).map(|k| k.iter().sum()).collect();
    let out = kernels::conv1x1_forward(input.data(), &summed, None, d);
    Tensor::new(vec![d.n, d.cout, d.h, d.w], out)
}

/// Directional response `C_i` evaluated straight from its closed form, with
/// zero padding for the shifted read. No bias.
pub fn topomdc_direct(input: &Tensor, weight: &Tensor, i: usize) -> Result<Tensor> {
    let dir = direction(i)?;
    let d = conv_dims(input, weight)?;
    let plane = d.h * d.w;
    let (bx, by) = (dir.shift.0 as isize, dir.shift.1 as isize);
    let x = input.data();
    let mut out = vec![0.0; d.n * d.cout * plane];
    for b in 0..d.n {
        for o in 0..d.cout {
            let dst = &mut out[(b * d.cout + o) * plane..][..plane];
            for c in 0..d.cin {
                let k = &weight.data()[(o * d.cin + c) * 9..][..9];
                let s_i = receptive_sum(k, dir);
                let rest = k.iter().sum::<f64>() - s_i;
                let src = &x[(b * d.cin + c) * plane..][..plane];
                for y in 0..d.h {
                    for xx in 0..d.w {
                        let (sy, sx) = (y as isize - by, xx as isize - bx);
                        let shifted = if sy >= 0 && sx >= 0 && (sy as usize) < d.h && (sx as usize) < d.w {
                            src[sy as usize * d.w + sx as usize]
                        } else {
                            0.0
                        };
                        dst[y * d.w + xx] += src[y * d.w + xx] * rest + shifted * s_i;
                    }
                }
            }
        }
    }
    Tensor::new(vec![d.n, d.cout, d.h, d.w], out)
}

/// Router-weighted mixture `C_0(x) + bias − Σ_i δ_{p(r),i}·C_i(x)(r)` through
/// the fused per-patch kernels. `delta_layer` has shape `[n², 8]`.
pub fn topomdc_fused(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    delta_layer: &Tensor,
    n: usize,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let w = g.constant(weight.clone());
    let b = bias.map(|b| g.constant(b.clone()));
    let dl = g.constant(delta_layer.clone());
    let out = g.topomdc(x, w, b, dl, n)?;
    Ok(g.value(out).clone())
}

/// Per-layer, per-patch, per-direction router scalars `δ`, shape
/// `[layers, n², 8]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams {
    pub delta: Tensor,
    pub grid: usize,
    /// Names of the wrapped encoder convolutions, in forward order.
    pub layers: Vec<String>,
}

impl RouterParams {
    pub fn zeros(layers: Vec<String>, grid: usize) -> Self {
        let delta = Tensor::zeros(&[layers.len(), grid * grid, DIRECTIONS]);
        Self { delta, grid, layers }
    }

    pub fn count(&self) -> usize {
        self.delta.len()
    }

    pub fn reset_to_zero(&mut self) {
        self.delta.data_mut().fill(0.0);
    }

    fn per_layer(&self) -> usize {
        self.grid * self.grid * DIRECTIONS
    }

    /// The `[n², 8]` slice belonging to wrapped layer `l`.
    pub fn layer(&self, l: usize) -> Tensor {
        let per = self.per_layer();
        Tensor::new(
            vec![self.grid * self.grid, DIRECTIONS],
            self.delta.data()[l * per..][..per].to_vec(),
        )
        .expect("router slice shape")
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l == name)
    }
}

/// Routes every encoder 3×3 convolution through the router-weighted
/// mixture. The wrapped model shares the original weights; with `δ = 0` its
/// output equals the unwrapped model's.
pub fn wrap_encoder(model: &SegModel, n: usize) -> Result<(SegModel, RouterParams)> {
    if model.router_grid().is_some() {
        return Err(Error::InvalidState("model encoder is already wrapped".into()));
    }
    if n == 0 {
        return Err(invalid_arg!("router grid must be at least 1"));
    }
    let mut wrapped = model.clone();
    wrapped.set_router_grid(Some(n));
    let router = RouterParams::zeros(model.encoder_conv_names(), n);
    Ok((wrapped, router))
}

pub fn unwrap_encoder(model: &SegModel) -> Result<SegModel> {
    if model.router_grid().is_none() {
        return Err(Error::InvalidState("model encoder is not wrapped".into()));
    }
    let mut m = model.clone();
    m.set_router_grid(None);
    Ok(m)
}
