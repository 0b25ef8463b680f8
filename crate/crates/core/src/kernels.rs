//! Raw forward/backward kernels on NCHW buffers.
//!
//! Everything here works on plain slices; shape validation happens in
//! [`crate::graph`]. Loops are ordered so that each output element is
//! accumulated in a fixed order, which keeps results bitwise reproducible.

/// Partition of an `h × w` plane into `rows × cols` rectangular patches.
///
/// Patch `(i, j)` spans rows `[i·ph, (i+1)·ph)` with `ph = max(h / rows, 1)`;
/// the last row (and column) of patches absorbs any remainder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub const SINGLE: PatchGrid = PatchGrid { rows: 1, cols: 1 };

    pub fn square(n: usize) -> Self {
        Self { rows: n, cols: n }
    }

    pub fn count(&self) -> usize {
        self.rows * self.cols
    }

    /// Patch row index for pixel row `y` of a plane with `h` rows.
    pub fn row_of(&self, y: usize, h: usize) -> usize {
        let ph = (h / self.rows).max(1);
        (y / ph).min(self.rows - 1)
    }

    /// Column segments `(x0, x1, patch_col)` covering `0..w`.
    pub fn col_segments(&self, w: usize) -> Vec<(usize, usize, usize)> {
        let pw = (w / self.cols).max(1);
        let mut out = Vec::with_capacity(self.cols);
        for j in 0..self.cols {
            let x0 = j * pw;
            if x0 >= w {
                break;
            }
            let x1 = if j + 1 == self.cols { w } else { ((j + 1) * pw).min(w) };
            out.push((x0, x1, j));
        }
        out
    }

    /// Patch index of pixel `(y, x)`.
    pub fn patch_of(&self, y: usize, x: usize, h: usize, w: usize) -> usize {
        let pw = (w / self.cols).max(1);
        self.row_of(y, h) * self.cols + (x / pw).min(self.cols - 1)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvDims {
    fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// Dot product split over four lanes so the compiler can vectorize it.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Valid output-column range for kernel column `kx` within `[x0, x1)`.
#[inline]
fn tap_range(x0: usize, x1: usize, kx: usize, w: usize) -> (usize, usize) {
    let lo = x0.max(1usize.saturating_sub(kx));
    let hi = x1.min(w + 1 - kx);
    (lo, hi.max(lo))
}

/// Zero-padded 3×3 cross-correlation with a kernel that may vary per patch.
///
/// `kernels` is laid out `[patch][cout][cin][ky][kx]` and produces
/// `out(y, x) = bias + Σ_{c,ky,kx} K[p(y,x)](o,c,ky,kx) · in(c, y+ky-1, x+kx-1)`.
pub fn conv3x3_forward(
    input: &[f64],
    kernels: &[f64],
    bias: Option<&[f64]>,
    d: ConvDims,
    grid: PatchGrid,
) -> Vec<f64> {
    let plane = d.plane();
    let kstride = d.cout * d.cin * 9;
    let segments = grid.col_segments(d.w);
    let mut out = vec![0.0; d.n * d.cout * plane];
    for b in 0..d.n {
        for o in 0..d.cout {
            let out_plane = &mut out[(b * d.cout + o) * plane..][..plane];
            if let Some(bias) = bias {
                out_plane.fill(bias[o]);
            }
            for c in 0..d.cin {
                let in_plane = &input[(b * d.cin + c) * plane..][..plane];
                for ky in 0..3 {
                    for y in 0..d.h {
                        let sy = y + ky;
                        if sy < 1 || sy > d.h {
                            continue;
                        }
                        let sy = sy - 1;
                        let pr = grid.row_of(y, d.h);
                        let in_row = &in_plane[sy * d.w..][..d.w];
                        let out_row = &mut out_plane[y * d.w..][..d.w];
                        for &(x0, x1, pc) in &segments {
                            let k = &kernels[(pr * grid.cols + pc) * kstride + (o * d.cin + c) * 9
                                + ky * 3..][..3];
                            for kx in 0..3 {
                                let wv = k[kx];
                                let (lo, hi) = tap_range(x0, x1, kx, d.w);
                                let src = &in_row[lo + kx - 1..hi + kx - 1];
                                for (dst, &s) in out_row[lo..hi].iter_mut().zip(src) {
                                    *dst += wv * s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of [`conv3x3_forward`] with respect to its input.
pub fn conv3x3_backward_input(
    grad_out: &[f64],
    kernels: &[f64],
    d: ConvDims,
    grid: PatchGrid,
) -> Vec<f64> {
    let plane = d.plane();
    let kstride = d.cout * d.cin * 9;
    let segments = grid.col_segments(d.w);
    let mut gin = vec![0.0; d.n * d.cin * plane];
    for b in 0..d.n {
        for c in 0..d.cin {
            let gin_plane = &mut gin[(b * d.cin + c) * plane..][..plane];
            for o in 0..d.cout {
                let g_plane = &grad_out[(b * d.cout + o) * plane..][..plane];
                for ky in 0..3 {
                    for y in 0..d.h {
                        let sy = y + ky;
                        if sy < 1 || sy > d.h {
                            continue;
                        }
                        let sy = sy - 1;
                        let pr = grid.row_of(y, d.h);
                        let g_row = &g_plane[y * d.w..][..d.w];
                        let gin_row = &mut gin_plane[sy * d.w..][..d.w];
                        for &(x0, x1, pc) in &segments {
                            let k = &kernels[(pr * grid.cols + pc) * kstride + (o * d.cin + c) * 9
                                + ky * 3..][..3];
                            for kx in 0..3 {
                                let wv = k[kx];
                                let (lo, hi) = tap_range(x0, x1, kx, d.w);
                                let dst = &mut gin_row[lo + kx - 1..hi + kx - 1];
                                for (t, &g) in dst.iter_mut().zip(&g_row[lo..hi]) {
                                    *t += wv * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gin
}

/// Gradient of [`conv3x3_forward`] with respect to each patch's kernel,
/// laid out like `kernels`.
pub fn conv3x3_backward_kernels(
    grad_out: &[f64],
    input: &[f64],
    d: ConvDims,
    grid: PatchGrid,
) -> Vec<f64> {
    let plane = d.plane();
    let kstride = d.cout * d.cin * 9;
    let segments = grid.col_segments(d.w);
    let mut gk = vec![0.0; grid.count() * kstride];
    for b in 0..d.n {
        for o in 0..d.cout {
            let g_plane = &grad_out[(b * d.cout + o) * plane..][..plane];
            for c in 0..d.cin {
                let in_plane = &input[(b * d.cin + c) * plane..][..plane];
                for ky in 0..3 {
                    for y in 0..d.h {
                        let sy = y + ky;
                        if sy < 1 || sy > d.h {
                            continue;
                        }
                        let sy = sy - 1;
                        let pr = grid.row_of(y, d.h);
                        let g_row = &g_plane[y * d.w..][..d.w];
                        let in_row = &in_plane[sy * d.w..][..d.w];
                        for &(x0, x1, pc) in &segments {
                            let base = (pr * grid.cols + pc) * kstride + (o * d.cin + c) * 9 + ky * 3;
                            for kx in 0..3 {
                                let (lo, hi) = tap_range(x0, x1, kx, d.w);
                                let src = &in_row[lo + kx - 1..hi + kx - 1];
                                gk[base + kx] += dot(&g_row[lo..hi], src);
                            }
                        }
                    }
                }
            }
        }
    }
    gk
}

/// Sum of `grad_out` over batch and space, per output channel.
pub fn channel_sums(grad_out: &[f64], n: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for b in 0..n {
        for (ch, acc) in out.iter_mut().enumerate() {
            *acc += grad_out[(b * c + ch) * plane..][..plane].iter().sum::<f64>();
        }
    }
    out
}

/// Pointwise convolution: `out(o) = bias(o) + Σ_c w(o, c) · in(c)`.
pub fn conv1x1_forward(input: &[f64], weight: &[f64], bias: Option<&[f64]>, d: ConvDims) -> Vec<f64> {
    let plane = d.plane();
    let mut out = vec![0.0; d.n * d.cout * plane];
    for b in 0..d.n {
        for o in 0..d.cout {
            let dst = &mut out[(b * d.cout + o) * plane..][..plane];
            if let Some(bias) = bias {
                dst.fill(bias[o]);
            }
            for c in 0..d.cin {
                let wv = weight[o * d.cin + c];
                let src = &input[(b * d.cin + c) * plane..][..plane];
                for (t, &s) in dst.iter_mut().zip(src) {
                    *t += wv * s;
                }
            }
        }
    }
    out
}

pub fn conv1x1_backward(
    grad_out: &[f64],
    input: &[f64],
    weight: &[f64],
    d: ConvDims,
) -> (Vec<f64>, Vec<f64>) {
    let plane = d.plane();
    let mut gin = vec![0.0; d.n * d.cin * plane];
    let mut gw = vec![0.0; d.cout * d.cin];
    for b in 0..d.n {
        for o in 0..d.cout {
            let g = &grad_out[(b * d.cout + o) * plane..][..plane];
            for c in 0..d.cin {
                let wv = weight[o * d.cin + c];
                let src = &input[(b * d.cin + c) * plane..][..plane];
                gw[o * d.cin + c] += dot(g, src);
                let dst = &mut gin[(b * d.cin + c) * plane..][..plane];
                for (t, &gv) in dst.iter_mut().zip(g) {
                    *t += wv * gv;
                }
            }
        }
    }
    (gin, gw)
}

/// 2×2 max pooling with stride 2. Returns the pooled values and, for each
/// output, the flat index of the winning input (first maximum on ties).
pub fn maxpool2_forward(input: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut idx = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let cands = [
                    base + 2 * y * w + 2 * x,
                    base + 2 * y * w + 2 * x + 1,
                    base + (2 * y + 1) * w + 2 * x,
                    base + (2 * y + 1) * w + 2 * x + 1,
                ];
                let mut best = cands[0];
                for &i in &cands[1..] {
                    if input[i] > input[best] {
                        best = i;
                    }
                }
                out.push(input[best]);
                idx.push(best);
            }
        }
    }
    (out, idx)
}

/// Per-axis sampling table for half-pixel bilinear resampling.
#[derive(Debug, Clone)]
pub struct LinearTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl LinearTaps {
    pub fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut frac = Vec::with_capacity(dst);
        for i in 0..dst {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(if i1 == i0 { 0.0 } else { pos - i0 as f64 });
        }
        Self { lo, hi, frac }
    }
}

pub fn resize_bilinear_forward(
    input: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let ty = LinearTaps::new(h, oh);
    let tx = LinearTaps::new(w, ow);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &input[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for y in 0..oh {
            let (y0, y1, fy) = (ty.lo[y], ty.hi[y], ty.frac[y]);
            for x in 0..ow {
                let (x0, x1, fx) = (tx.lo[x], tx.hi[x], tx.frac[x]);
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[y * ow + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn resize_bilinear_backward(
    grad_out: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let ty = LinearTaps::new(h, oh);
    let tx = LinearTaps::new(w, ow);
    let mut gin = vec![0.0; planes * h * w];
    for p in 0..planes {
        let g = &grad_out[p * oh * ow..][..oh * ow];
        let dst = &mut gin[p * h * w..][..h * w];
        for y in 0..oh {
            let (y0, y1, fy) = (ty.lo[y], ty.hi[y], ty.frac[y]);
            for x in 0..ow {
                let (x0, x1, fx) = (tx.lo[x], tx.hi[x], tx.frac[x]);
                let gv = g[y * ow + x];
                dst[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += gv * (1.0 - fy) * fx;
                dst[y1 * w + x0] += gv * fy * (1.0 - fx);
                dst[y1 * w + x1] += gv * fy * fx;
            }
        }
    }
    gin
}

/// Per-channel mean and biased variance over batch and space.
pub fn channel_moments(data: &[f64], (n, c, h, w): (usize, usize, usize, usize)) -> (Vec<f64>, Vec<f64>) {
    let plane = h * w;
    let count = (n * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let vals = || (0..n).flat_map(move |b| data[(b * c + ch) * plane..][..plane].iter());
        let m = vals().sum::<f64>() / count;
        mean[ch] = m;
        var[ch] = vals().map(|v| (v - m) * (v - m)).sum::<f64>() / count;
    }
    (mean, var)
}

/// Mirror every plane left-right (`horizontal`) or top-bottom.
pub fn flip(input: &[f64], planes: usize, h: usize, w: usize, horizontal: bool) -> Vec<f64> {
    let mut out = vec![0.0; input.len()];
    for p in 0..planes {
        let src = &input[p * h * w..][..h * w];
        let dst = &mut out[p * h * w..][..h * w];
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = if horizontal { (y, w - 1 - x) } else { (h - 1 - y, x) };
                dst[y * w + x] = src[sy * w + sx];
            }
        }
    }
    out
}

/// Copy the `oh × ow` window at `(top, left)` out of every plane.
pub fn crop(
    input: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (top, left): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        for y in 0..oh {
            let row = &input[p * h * w + (top + y) * w + left..][..ow];
            out.extend_from_slice(row);
        }
    }
    out
}

/// Grow every plane to `oh × ow` by replicating the last row and column.
pub fn pad_edge(input: &[f64], planes: usize, (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<f64> {
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        for y in 0..oh {
            let sy = y.min(h - 1);
            for x in 0..ow {
                out.push(input[p * h * w + sy * w + x.min(w - 1)]);
            }
        }
    }
    out
}
