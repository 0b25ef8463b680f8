//! Overlap and topology metrics for binary segmentation masks.
//!
//! Conventions: foreground components are 8-connected, holes are
//! 4-connected background components that do not touch the image border.

use std::collections::VecDeque;

use serde::Serialize;

use crate::error::{invalid_arg, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != h * w {
            return Err(invalid_arg!("mask {h}x{w} needs {} bits, got {}", h * w, bits.len()));
        }
        Ok(Self { h, w, bits })
    }

    pub fn empty(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            bits: vec![false; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let bits = (0..h * w).map(|i| f(i / w, i % w)).collect();
        Self { h, w, bits }
    }

    /// Foreground where the value is strictly above `threshold`.
    pub fn from_tensor(t: &Tensor, threshold: f64) -> Result<Self> {
        let (h, w) = t.plane_dims()?;
        Ok(Self {
            h,
            w,
            bits: t.data().iter().map(|&v| v > threshold).collect(),
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::image(self.h, self.w, self.bits.iter().map(|&b| f64::from(u8::from(b))).collect())
            .expect("mask dims")
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.w + x] = v;
    }

    /// Out-of-bounds reads are background.
    fn get_signed(&self, y: isize, x: isize) -> bool {
        y >= 0 && x >= 0 && (y as usize) < self.h && (x as usize) < self.w && self.get(y as usize, x as usize)
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn and(&self, other: &BinaryMask) -> BinaryMask {
        self.zip(other, |a, b| a && b)
    }

    pub fn or(&self, other: &BinaryMask) -> BinaryMask {
        self.zip(other, |a, b| a || b)
    }

    fn zip(&self, other: &BinaryMask, f: impl Fn(bool, bool) -> bool) -> BinaryMask {
        BinaryMask {
            h: self.h,
            w: self.w,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    fn same_shape(&self, other: &BinaryMask, what: &str) -> Result<()> {
        if (self.h, self.w) == (other.h, other.w) {
            Ok(())
        } else {
            Err(invalid_arg!(
                "{what}: mask shapes differ ({}x{} vs {}x{})",
                self.h,
                self.w,
                other.h,
                other.w
            ))
        }
    }

    /// Sub-mask of rows `y0..y1` and columns `x0..x1`.
    pub fn window(&self, y0: usize, y1: usize, x0: usize, x1: usize) -> BinaryMask {
        BinaryMask::from_fn(y1 - y0, x1 - x0, |y, x| self.get(y0 + y, x0 + x))
    }
}

/// `2|P∩Y| / (|P| + |Y|)`, defined as 1 when both masks are empty.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.same_shape(gt, "dice")?;
    let total = pred.count() + gt.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * pred.and(gt).count() as f64 / total as f64)
}

const RING: [(isize, isize); 8] = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)];

/// Neighbours `P2..P9` clockwise from north.
fn ring(mask: &BinaryMask, y: usize, x: usize) -> [bool; 8] {
    let mut out = [false; 8];
    for (o, &(dy, dx)) in out.iter_mut().zip(&RING) {
        *o = mask.get_signed(y as isize + dy, x as isize + dx);
    }
    out
}

fn transitions(n: &[bool; 8]) -> usize {
    (0..8).filter(|&i| !n[i] && n[(i + 1) % 8]).count()
}

/// Zhang–Suen thinning to a one-pixel-wide, 8-connected skeleton.
///
/// Each sub-iteration marks candidates in parallel as usual, then deletes
/// them one at a time, re-testing the neighbourhood conditions on the
/// partially thinned image. The re-test keeps two-pixel-thick structures
/// (which plain Zhang–Suen can erase completely) from vanishing.
pub fn skeletonize(mask: &BinaryMask) -> BinaryMask {
    let mut img = mask.clone();
    loop {
        let mut changed = false;
        for first in [true, false] {
            let mut marked = Vec::new();
            for y in 0..img.h {
                for x in 0..img.w {
                    if img.get(y, x) && deletable(&img, y, x, first) {
                        marked.push((y, x));
                    }
                }
            }
            for (y, x) in marked {
                if deletable(&img, y, x, first) {
                    img.set(y, x, false);
                    changed = true;
                }
            }
        }
        if !changed {
            return img;
        }
    }
}

fn deletable(img: &BinaryMask, y: usize, x: usize, first: bool) -> bool {
    let n = ring(img, y, x);
    let b = n.iter().filter(|&&v| v).count();
    if !(2..=6).contains(&b) || transitions(&n) != 1 {
        return false;
    }
    let (p2, p4, p6, p8) = (n[0], n[2], n[4], n[6]);
    if first {
        !(p2 && p4 && p6) && !(p4 && p6 && p8)
    } else {
        !(p2 && p4 && p8) && !(p2 && p6 && p8)
    }
}

/// Component labelling by breadth-first search. Returns the number of
/// components among pixels where `member` is true.
fn count_components(
    h: usize,
    w: usize,
    member: impl Fn(usize, usize) -> bool,
    eight: bool,
    mut on_component: impl FnMut(&[(usize, usize)]),
) -> usize {
    const N4: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
    let neighbours: &[(isize, isize)] = if eight { &RING } else { &N4 };
    let mut seen = vec![false; h * w];
    let mut queue = VecDeque::new();
    let mut comp = Vec::new();
    let mut count = 0;
    for sy in 0..h {
        for sx in 0..w {
            if seen[sy * w + sx] || !member(sy, sx) {
                continue;
            }
            count += 1;
            comp.clear();
            seen[sy * w + sx] = true;
            queue.push_back((sy, sx));
            while let Some((y, x)) = queue.pop_front() {
                comp.push((y, x));
                for &(dy, dx) in neighbours {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny < 0 || nx < 0 || ny as usize >= h || nx as usize >= w {
                        continue;
                    }
                    let (ny, nx) = (ny as usize, nx as usize);
                    if !seen[ny * w + nx] && member(ny, nx) {
                        seen[ny * w + nx] = true;
                        queue.push_back((ny, nx));
                    }
                }
            }
            on_component(&comp);
        }
    }
    count
}

/// Number of 8-connected foreground components.
pub fn count_foreground_components(mask: &BinaryMask) -> usize {
    count_components(mask.h, mask.w, |y, x| mask.get(y, x), true, |_| {})
}

/// `(β0, β1)`: 8-connected foreground components and 4-connected background
/// components that do not reach the border.
pub fn betti_numbers(mask: &BinaryMask) -> (usize, usize) {
    let b0 = count_foreground_components(mask);
    let mut holes = 0;
    count_components(
        mask.h,
        mask.w,
        |y, x| !mask.get(y, x),
        false,
        |comp| {
            let touches = comp
                .iter()
                .any(|&(y, x)| y == 0 || x == 0 || y + 1 == mask.h || x + 1 == mask.w);
            if !touches {
                holes += 1;
            }
        },
    );
    (b0, holes)
}

/// How Betti errors are aggregated over an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BettiConvention {
    /// One error over the whole image.
    WholeImage,
    /// Mean error over a `p × p` grid of patches.
    Patched(usize),
}

impl BettiConvention {
    pub fn describe(&self) -> String {
        let base = "beta0: 8-connected foreground; beta1: 4-connected enclosed background";
        match self {
            BettiConvention::WholeImage => format!("{base}; whole image"),
            BettiConvention::Patched(p) => format!("{base}; mean over {p}x{p} patches"),
        }
    }
}

/// `|β0_pred − β0_gt| + |β1_pred − β1_gt|` over the whole image.
pub fn betti_error(pred: &BinaryMask, gt: &BinaryMask) -> Result<usize> {
    pred.same_shape(gt, "betti_error")?;
    let (p0, p1) = betti_numbers(pred);
    let (g0, g1) = betti_numbers(gt);
    Ok(p0.abs_diff(g0) + p1.abs_diff(g1))
}

pub fn betti_error_with(pred: &BinaryMask, gt: &BinaryMask, convention: BettiConvention) -> Result<f64> {
    match convention {
        BettiConvention::WholeImage => Ok(betti_error(pred, gt)? as f64),
        BettiConvention::Patched(p) => {
            pred.same_shape(gt, "betti_error")?;
            if p == 0 || p > pred.h || p > pred.w {
                return Err(invalid_arg!("patch grid {p} does not fit a {}x{} mask", pred.h, pred.w));
            }
            let mut total = 0.0;
            for i in 0..p {
                for j in 0..p {
                    let (y0, y1) = (i * pred.h / p, (i + 1) * pred.h / p);
                    let (x0, x1) = (j * pred.w / p, (j + 1) * pred.w / p);
                    total += betti_error(&pred.window(y0, y1, x0, x1), &gt.window(y0, y1, x0, x1))? as f64;
                }
            }
            Ok(total / (p * p) as f64)
        }
    }
}

/// Centerline Dice. `None` when either skeleton is empty.
pub fn cldice(pred: &BinaryMask, gt: &BinaryMask) -> Result<Option<f64>> {
    pred.same_shape(gt, "cldice")?;
    let sp = skeletonize(pred);
    let sg = skeletonize(gt);
    let (np, ng) = (sp.count(), sg.count());
    if np == 0 || ng == 0 {
        return Ok(None);
    }
    let tprec = sp.and(gt).count() as f64 / np as f64;
    let tsens = sg.and(pred).count() as f64 / ng as f64;
    if tprec + tsens == 0.0 {
        return Ok(Some(0.0));
    }
    Ok(Some(2.0 * tprec * tsens / (tprec + tsens)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopologyReport {
    pub dice: f64,
    /// `None` is the undefined case where a skeleton is empty.
    pub cldice: Option<f64>,
    pub betti_error: f64,
    pub betti_pred: (usize, usize),
    pub betti_gt: (usize, usize),
}

impl TopologyReport {
    pub fn cldice_undefined(&self) -> bool {
        self.cldice.is_none()
    }
}

pub fn topology_report(pred: &BinaryMask, gt: &BinaryMask, convention: BettiConvention) -> Result<TopologyReport> {
    Ok(TopologyReport {
        dice: dice(pred, gt)?,
        cldice: cldice(pred, gt)?,
        betti_error: betti_error_with(pred, gt, convention)?,
        betti_pred: betti_numbers(pred),
        betti_gt: betti_numbers(gt),
    })
}

/// Aggregate over a set of reports. Undefined clDice entries count as 0 in
/// the mean and are tallied separately.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportSummary {
    pub images: usize,
    pub mean_dice: f64,
    pub mean_cldice: f64,
    pub mean_betti_error: f64,
    pub undefined_cldice: usize,
}

pub fn summarize(reports: &[TopologyReport]) -> ReportSummary {
    let n = reports.len().max(1) as f64;
    ReportSummary {
        images: reports.len(),
        mean_dice: reports.iter().map(|r| r.dice).sum::<f64>() / n,
        mean_cldice: reports.iter().map(|r| r.cldice.unwrap_or(0.0)).sum::<f64>() / n,
        mean_betti_error: reports.iter().map(|r| r.betti_error).sum::<f64>() / n,
        undefined_cldice: reports.iter().filter(|r| r.cldice.is_none()).count(),
    }
}

/// Text table with one row per named report, headed by the Betti
/// convention and closed by an aggregate footer.
pub fn render_report(rows: &[(String, TopologyReport)], convention: BettiConvention) -> String {
    let mut out = format!("# betti convention: {}\n", convention.describe());
    out.push_str("image\tdice\tcldice\tbetti_error\tbetti_pred\tbetti_gt\n");
    for (name, r) in rows {
        let cl = r.cldice.map(|v| format!("{v:.6}")).unwrap_or_else(|| "undefined".into());
        out.push_str(&format!(
            "{name}\t{:.6}\t{cl}\t{}\t{},{}\t{},{}\n",
            r.dice, r.betti_error, r.betti_pred.0, r.betti_pred.1, r.betti_gt.0, r.betti_gt.1
        ));
    }
    let reports: Vec<TopologyReport> = rows.iter().map(|(_, r)| r.clone()).collect();
    let s = summarize(&reports);
    out.push_str(&format!(
        "# aggregate images={} mean_dice={:.6} mean_cldice={:.6} mean_betti_error={:.6} undefined_cldice={}\n",
        s.images, s.mean_dice, s.mean_cldice, s.mean_betti_error, s.undefined_cldice
    ));
    out
}

/// Box-filter resampling: each target pixel is the coverage-weighted mean of
/// the source pixels its footprint overlaps.
pub fn area_interpolate(src: &[f64], h: usize, w: usize, th: usize, tw: usize) -> Vec<f64> {
    let weights = |n: usize, t: usize| -> Vec<Vec<(usize, f64)>> {
        let scale = n as f64 / t as f64;
        (0..t)
            .map(|i| {
                let (a, b) = (i as f64 * scale, (i + 1) as f64 * scale);
                let mut taps = Vec::new();
                let mut k = a.floor() as usize;
                while (k as f64) < b && k < n {
                    let overlap = (b.min(k as f64 + 1.0) - a.max(k as f64)).max(0.0);
                    if overlap > 0.0 {
                        taps.push((k, overlap / scale));
                    }
                    k += 1;
                }
                taps
            })
            .collect()
    };
    let wy = weights(h, th);
    let wx = weights(w, tw);
    let mut out = vec![0.0; th * tw];
    for (ty, ry) in wy.iter().enumerate() {
        for (tx, rx) in wx.iter().enumerate() {
            let mut acc = 0.0;
            for &(sy, fy) in ry {
                for &(sx, fx) in rx {
                    acc += src[sy * w + sx] * fy * fx;
                }
            }
            out[ty * tw + tx] = acc;
        }
    }
    out
}

/// Topology-preserving label resize: area-interpolate, binarize at 0.5 and at
/// 0, skeletonize the permissive mask and OR it into the strict one.
pub fn resize_label(mask: &BinaryMask, target_h: usize, target_w: usize) -> Result<BinaryMask> {
    if target_h == 0 || target_w == 0 {
        return Err(invalid_arg!("target size must be positive, got {target_h}x{target_w}"));
    }
    let src: Vec<f64> = mask.bits.iter().map(|&b| f64::from(u8::from(b))).collect();
    let area = area_interpolate(&src, mask.h, mask.w, target_h, target_w);
    let strict = BinaryMask::new(target_h, target_w, area.iter().map(|&v| v > 0.5).collect())?;
    let loose = BinaryMask::new(target_h, target_w, area.iter().map(|&v| v > 0.0).collect())?;
    Ok(strict.or(&skeletonize(&loose)))
}

/// Nearest-neighbour resize, for comparison with [`resize_label`].
pub fn resize_nearest(mask: &BinaryMask, th: usize, tw: usize) -> BinaryMask {
    BinaryMask::from_fn(th, tw, |y, x| {
        let sy = ((y as f64 + 0.5) * mask.h as f64 / th as f64).floor() as usize;
        let sx = ((x as f64 + 0.5) * mask.w as f64 / tw as f64).floor() as usize;
        mask.get(sy.min(mask.h - 1), sx.min(mask.w - 1))
    })
}
