//! Topology hard-sample generation: pseudo-break images built by swapping
//! the low-frequency content of confident foreground windows with that of
//! a nearby background window.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::error::{invalid_arg, Error, Result};
use crate::tensor::Tensor;

/// Weight given to pseudo-break foreground pixels in the consistency loss.
pub const BREAK_WEIGHT: f64 = 10.0;

/// How the content of a foreground window is replaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum HgVariant {
    FrequencySwap,
    Blur,
    Noise,
    ImageSwap,
}

impl HgVariant {
    pub const ALL: [HgVariant; 4] = [
        HgVariant::FrequencySwap,
        HgVariant::Blur,
        HgVariant::Noise,
        HgVariant::ImageSwap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HgVariant::FrequencySwap => "frequency-swap",
            HgVariant::Blur => "blur",
            HgVariant::Noise => "noise",
            HgVariant::ImageSwap => "image-swap",
        }
    }
}

impl fmt::Display for HgVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HgVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HgVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| invalid_arg!("unknown hard-sample variant {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HgConfig {
    /// Keypoint confidence threshold.
    pub tau: f64,
    /// Fraction of confident pixels drawn as keypoints.
    pub k: f64,
    /// Window side in pixels.
    pub s: usize,
    /// Largest tolerated foreground-pixel ratio in the background window.
    pub tau_bg: f64,
    /// Side of the low-frequency mask as a fraction of `s`.
    pub low_freq_ratio: f64,
    pub variant: HgVariant,
}

impl Default for HgConfig {
    fn default() -> Self {
        Self {
            tau: 0.95,
            k: 0.002,
            s: 30,
            tau_bg: 0.05,
            low_freq_ratio: 0.3,
            variant: HgVariant::FrequencySwap,
        }
    }
}

impl HgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(invalid_arg!("tau must lie in (0, 1), got {}", self.tau));
        }
        if !(self.k > 0.0 && self.k <= 1.0) {
            return Err(invalid_arg!("k must lie in (0, 1], got {}", self.k));
        }
        if self.s < 3 {
            return Err(invalid_arg!("window side must be at least 3, got {}", self.s));
        }
        if !(self.tau_bg >= 0.0 && self.tau_bg < 1.0) {
            return Err(invalid_arg!("tau_bg must lie in [0, 1), got {}", self.tau_bg));
        }
        if !(self.low_freq_ratio > 0.0 && self.low_freq_ratio < 1.0) {
            return Err(invalid_arg!(
                "low_freq_ratio must lie in (0, 1), got {}",
                self.low_freq_ratio
            ));
        }
        Ok(())
    }
}

/// An `size × size` square with top-left corner `(top, left)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Window {
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

impl Window {
    pub fn overlaps(&self, other: &Window) -> bool {
        self.top < other.top + other.size
            && other.top < self.top + self.size
            && self.left < other.left + other.size
            && other.left < self.left + self.size
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.size && x >= self.left && x < self.left + self.size
    }

    /// The window's pixels of an `h × w` row-major plane (`w` = row stride).
    pub fn extract(&self, plane: &[f64], w: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.size * self.size);
        for y in self.top..self.top + self.size {
            out.extend_from_slice(&plane[y * w + self.left..][..self.size]);
        }
        out
    }

    fn paste(&self, plane: &mut [f64], w: usize, patch: &[f64]) {
        for (r, row) in patch.chunks_exact(self.size).enumerate() {
            plane[(self.top + r) * w + self.left..][..self.size].copy_from_slice(row);
        }
    }
}

/// Foreground window of side `s` centred on `(u, v)`, if it fits.
pub fn fg_window(keypoint: (usize, usize), s: usize, h: usize, w: usize) -> Option<Window> {
    let (u, v) = keypoint;
    let top = u.checked_sub(s / 2)?;
    let left = v.checked_sub(s / 2)?;
    (top + s <= h && left + s <= w).then_some(Window { top, left, size: s })
}

/// Row-major confident pixels `ŷ′ > τ`, then `ceil(k·|P|)` of them drawn
/// uniformly without replacement. Points are `(row, col)`.
pub fn select_keypoints<R: Rng + ?Sized>(pred: &Tensor, cfg: &HgConfig, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    let (_, w) = pred.plane_dims()?;
    let confident: Vec<usize> = pred
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > cfg.tau)
        .map(|(i, _)| i)
        .collect();
    if confident.is_empty() {
        return Ok(Vec::new());
    }
    let n = ((cfg.k * confident.len() as f64).ceil() as usize).min(confident.len());
    Ok(rand::seq::index::sample(rng, confident.len(), n)
        .into_iter()
        .map(|i| (confident[i] / w, confident[i] % w))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "reason", rename_all = "kebab-case")]
pub enum Rejection {
    /// The foreground window would leave the image.
    Border,
    /// The foreground window overlaps an already accepted one.
    Overlap,
    /// No background candidate lies inside the image.
    NoCandidate,
    /// The best background window holds too much foreground.
    Foreground { ratio: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SearchOutcome {
    Accepted { fg: Window, bg: Window },
    Rejected(Rejection),
}

/// Candidate background offsets around a window of side `s`, in scan order.
fn neighbour_offsets(s: usize) -> [(isize, isize); 8] {
    let s = s as isize;
    [(-s, -s), (-s, 0), (-s, s), (0, -s), (0, s), (s, -s), (s, 0), (s, s)]
}

/// Picks the tiled neighbour of the keypoint's window with the lowest
/// confidence sum, rejecting the keypoint per the acceptance rules.
pub fn sliding_search(
    pred: &Tensor,
    keypoint: (usize, usize),
    cfg: &HgConfig,
    accepted: &[Window],
) -> Result<SearchOutcome> {
    let (h, w) = pred.plane_dims()?;
    let Some(fg) = fg_window(keypoint, cfg.s, h, w) else {
        return Ok(SearchOutcome::Rejected(Rejection::Border));
    };
    if accepted.iter().any(|a| a.overlaps(&fg)) {
        return Ok(SearchOutcome::Rejected(Rejection::Overlap));
    }
    let p = pred.data();
    let mut best: Option<(Window, f64)> = None;
    for (dy, dx) in neighbour_offsets(cfg.s) {
        let top = fg.top as isize + dy;
        let left = fg.left as isize + dx;
        if top < 0 || left < 0 || top as usize + cfg.s > h || left as usize + cfg.s > w {
            continue;
        }
        let cand = Window {
            top: top as usize,
            left: left as usize,
            size: cfg.s,
        };
        let total: f64 = cand.extract(p, w).iter().sum();
        if best.is_none_or(|(_, b)| total < b) {
            best = Some((cand, total));
        }
    }
    let Some((bg, _)) = best else {
        return Ok(SearchOutcome::Rejected(Rejection::NoCandidate));
    };
    let patch = bg.extract(p, w);
    let ratio = patch.iter().filter(|&&v| v > 0.5).count() as f64 / patch.len() as f64;
    if ratio > cfg.tau_bg {
        return Ok(SearchOutcome::Rejected(Rejection::Foreground { ratio }));
    }
    Ok(SearchOutcome::Accepted { fg, bg })
}

/// Unnormalized 2-D DFT of a real `s × s` patch.
pub fn dft2(patch: &[f64], s: usize) -> Result<Vec<Complex64>> {
    check_square(patch.len(), s)?;
    let mut buf: Vec<Complex64> = patch.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform2(&mut buf, s, false);
    Ok(buf)
}

/// Inverse of [`dft2`], including the `1/s²` normalization.
pub fn idft2(spectrum: &[Complex64], s: usize) -> Result<Vec<Complex64>> {
    check_square(spectrum.len(), s)?;
    let mut buf = spectrum.to_vec();
    transform2(&mut buf, s, true);
    let norm = 1.0 / (s * s) as f64;
    buf.iter_mut().for_each(|c| *c *= norm);
    Ok(buf)
}

fn check_square(len: usize, s: usize) -> Result<()> {
    if s == 0 || len != s * s {
        return Err(invalid_arg!("expected a square {s}x{s} patch, got {len} values"));
    }
    Ok(())
}

fn transform2(buf: &mut [Complex64], s: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let fft = if inverse {
        planner.plan_fft_inverse(s)
    } else {
        planner.plan_fft_forward(s)
    };
    for row in buf.chunks_exact_mut(s) {
        fft.process(row);
    }
    let mut col = vec![Complex64::default(); s];
    for x in 0..s {
        for y in 0..s {
            col[y] = buf[y * s + x];
        }
        fft.process(&mut col);
        for y in 0..s {
            buf[y * s + x] = col[y];
        }
    }
}

/// Centred low-frequency square in unshifted DFT layout.
///
/// A bin is low when both signed frequencies are within `m/2` of zero,
/// `m = max(1, round(ratio·s))`; the region is symmetric, so swapping it
/// keeps the result real.
pub fn low_freq_mask(s: usize, ratio: f64) -> Vec<bool> {
    let m = ((ratio * s as f64).round() as usize).max(1);
    let half = (m / 2) as isize;
    let signed = |k: usize| {
        let k = k as isize;
        if k < (s as isize + 1) / 2 {
            k
        } else {
            k - s as isize
        }
    };
    let mut mask = vec![false; s * s];
    for ky in 0..s {
        for kx in 0..s {
            mask[ky * s + kx] = signed(ky).abs() <= half && signed(kx).abs() <= half;
        }
    }
    mask
}

/// Takes `x_bg`'s spectrum where `mask` is set and `x_fg`'s elsewhere.
pub fn low_freq_swap_masked(x_fg: &[f64], x_bg: &[f64], s: usize, mask: &[bool]) -> Result<Vec<f64>> {
    check_square(x_bg.len(), s)?;
    check_square(mask.len(), s)?;
    let f_fg = dft2(x_fg, s)?;
    let f_bg = dft2(x_bg, s)?;
    let mixed: Vec<Complex64> = f_fg
        .iter()
        .zip(&f_bg)
        .zip(mask)
        .map(|((&a, &b), &low)| if low { b } else { a })
        .collect();
    let out = idft2(&mixed, s)?;
    let residue = out.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
    if residue >= 1e-9 {
        return Err(Error::InvalidState(format!(
            "low-frequency swap left imaginary residue {residue:e}"
        )));
    }
    Ok(out.into_iter().map(|c| c.re).collect())
}

pub fn low_freq_swap(x_fg: &[f64], x_bg: &[f64], s: usize, ratio: f64) -> Result<Vec<f64>> {
    low_freq_swap_masked(x_fg, x_bg, s, &low_freq_mask(s, ratio))
}

/// `x_swap·ŷ′ + x_fg·(1 − ŷ′)` per pixel.
pub fn compose_pseudobreak(x_fg: &[f64], x_swap: &[f64], pseudo: &[f64]) -> Result<Vec<f64>> {
    if x_fg.len() != x_swap.len() || x_fg.len() != pseudo.len() {
        return Err(invalid_arg!("pseudo-break patches differ in size"));
    }
    if pseudo.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(invalid_arg!("pseudo-label values must lie in [0, 1]"));
    }
    Ok(x_fg
        .iter()
        .zip(x_swap)
        .zip(pseudo)
        .map(|((&f, &sw), &p)| sw * p + f * (1.0 - p))
        .collect())
}

/// 5×5 Gaussian blur with edge replication.
pub fn gaussian_blur(patch: &[f64], s: usize, sigma: f64) -> Result<Vec<f64>> {
    check_square(patch.len(), s)?;
    let taps: Vec<f64> = (-2..=2).map(|d: i32| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.iter().map(|t| t / norm).collect();
    let clamp = |i: isize| i.clamp(0, s as isize - 1) as usize;
    let mut tmp = vec![0.0; s * s];
    for y in 0..s {
        for x in 0..s {
            tmp[y * s + x] = (0..5)
                .map(|t| taps[t] * patch[y * s + clamp(x as isize + t as isize - 2)])
                .sum();
        }
    }
    let mut out = vec![0.0; s * s];
    for y in 0..s {
        for x in 0..s {
            out[y * s + x] = (0..5)
                .map(|t| taps[t] * tmp[clamp(y as isize + t as isize - 2) * s + x])
                .sum();
        }
    }
    Ok(out)
}

/// Additive Gaussian noise with standard deviation `rel_sigma` times the
/// patch's dynamic range.
pub fn gaussian_noise<R: Rng + ?Sized>(patch: &[f64], rel_sigma: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(rel_sigma >= 0.0 && rel_sigma.is_finite()) {
        return Err(invalid_arg!("noise sigma must be non-negative"));
    }
    let lo = patch.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = patch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sigma = rel_sigma * (hi - lo).max(0.0);
    if sigma == 0.0 {
        return Ok(patch.to_vec());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| invalid_arg!("noise distribution: {e}"))?;
    Ok(patch.iter().map(|&v| v + normal.sample(rng)).collect())
}

/// Replacement content for a foreground window under `variant`, before the
/// pseudo-label blend.
pub fn variant_augment<R: Rng + ?Sized>(
    x_fg: &[f64],
    x_bg: &[f64],
    s: usize,
    variant: HgVariant,
    low_freq_ratio: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_square(x_fg.len(), s)?;
    match variant {
        HgVariant::FrequencySwap => low_freq_swap(x_fg, x_bg, s, low_freq_ratio),
        HgVariant::Blur => gaussian_blur(x_fg, s, 2.0),
        HgVariant::Noise => gaussian_noise(x_fg, 0.2, rng),
        HgVariant::ImageSwap => {
            check_square(x_bg.len(), s)?;
            Ok(x_bg.to_vec())
        }
    }
}

/// One accepted keypoint with its windows and the window content before
/// and after editing.
#[derive(Debug, Clone, PartialEq)]
pub struct AcceptedBreak {
    pub keypoint: (usize, usize),
    pub fg: Window,
    pub bg: Window,
    pub before: Vec<f64>,
    pub after: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoBreakPlan {
    pub breaks: Vec<AcceptedBreak>,
    pub candidates: usize,
    pub rejected: Vec<Rejection>,
    /// The edited image `x′`, same shape as the input image.
    pub hard_image: Tensor,
    /// Per-pixel loss weights, same shape as the input image.
    pub weight_map: Tensor,
}

impl PseudoBreakPlan {
    pub fn rejected_count(&self) -> usize {
        self.rejected.len()
    }

    pub fn fg_windows(&self) -> Vec<Window> {
        self.breaks.iter().map(|b| b.fg).collect()
    }
}

/// Selection, search, swap and composition for every keypoint, pasted into
/// a copy of `image` in keypoint order. All reads come from the original
/// image.
pub fn build_plan<R: Rng + ?Sized>(image: &Tensor, pred: &Tensor, cfg: &HgConfig, rng: &mut R) -> Result<PseudoBreakPlan> {
    cfg.validate()?;
    let (h, w) = image.plane_dims()?;
    if pred.plane_dims()? != (h, w) {
        return Err(invalid_arg!("image and pseudo-label differ in size"));
    }
    let keypoints = select_keypoints(pred, cfg, rng)?;
    let src = image.data();
    let p = pred.data();
    let mut hard = src.to_vec();
    let mut weights = vec![1.0; h * w];
    let mut breaks: Vec<AcceptedBreak> = Vec::new();
    let mut rejected = Vec::new();
    let mut accepted: Vec<Window> = Vec::new();
    for &kp in &keypoints {
        let (fg, bg) = match sliding_search(pred, kp, cfg, &accepted)? {
            SearchOutcome::Accepted { fg, bg } => (fg, bg),
            SearchOutcome::Rejected(r) => {
                rejected.push(r);
                continue;
            }
        };
        let x_fg = fg.extract(src, w);
        let x_bg = bg.extract(src, w);
        let y_p = fg.extract(p, w);
        let substitute = variant_augment(&x_fg, &x_bg, cfg.s, cfg.variant, cfg.low_freq_ratio, rng)?;
        let after = compose_pseudobreak(&x_fg, &substitute, &y_p)?;
        fg.paste(&mut hard, w, &after);
        for y in fg.top..fg.top + fg.size {
            for x in fg.left..fg.left + fg.size {
                if p[y * w + x] > 0.5 {
                    weights[y * w + x] = BREAK_WEIGHT;
                }
            }
        }
        accepted.push(fg);
        breaks.push(AcceptedBreak {
            keypoint: kp,
            fg,
            bg,
            before: x_fg,
            after,
        });
    }
    let shape = image.shape().to_vec();
    Ok(PseudoBreakPlan {
        breaks,
        candidates: keypoints.len(),
        rejected,
        hard_image: Tensor::new(shape.clone(), hard)?,
        weight_map: Tensor::new(shape, weights)?,
    })
}
