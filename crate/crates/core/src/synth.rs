//! Seeded synthetic tubular images: smooth random curves with optional
//! branches, rasterized at a sampled thickness and rendered under a
//! configurable intensity model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid_arg, Result};
use crate::metrics::{count_foreground_components, BinaryMask};
use crate::tensor::Tensor;

/// Parameters of one synthetic domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    /// Side of the square images.
    pub size: usize,
    pub n_curves: usize,
    /// Tube thickness range in pixels, sampled per curve.
    pub thickness: (f64, f64),
    /// Standard deviation of the heading change per control point (radians).
    pub curvature: f64,
    /// Probability that a curve grows one branch.
    pub branch_prob: f64,
    pub fg_level: f64,
    pub bg_level: f64,
    pub invert: bool,
    pub gamma: f64,
    pub blur_sigma: f64,
    pub noise_sigma: f64,
}

impl DomainSpec {
    /// Bright clean vessels on a dark background.
    pub fn source(size: usize) -> Self {
        Self {
            size,
            n_curves: 3,
            thickness: (1.5, 3.0),
            curvature: 0.35,
            branch_prob: 0.5,
            fg_level: 0.85,
            bg_level: 0.15,
            invert: false,
            gamma: 1.0,
            blur_sigma: 0.6,
            noise_sigma: 0.03,
        }
    }

    /// Inverted contrast, heavy noise and thicker tubes.
    pub fn inverted_shift(size: usize) -> Self {
        let s = Self::source(size);
        Self {
            thickness: (s.thickness.0 * 1.5, s.thickness.1 * 1.5),
            invert: true,
            noise_sigma: 0.15,
            ..s
        }
    }

    /// Faint, blurred, noisier vessels.
    pub fn low_contrast_shift(size: usize) -> Self {
        Self {
            fg_level: 0.45,
            bg_level: 0.2,
            gamma: 1.3,
            blur_sigma: 1.0,
            noise_sigma: 0.06,
            ..Self::source(size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(invalid_arg!("image size must be at least 8, got {}", self.size));
        }
        if self.n_curves == 0 {
            return Err(invalid_arg!("at least one curve is required"));
        }
        let (lo, hi) = self.thickness;
        if !(lo >= 1.0 && hi >= lo && hi.is_finite()) {
            return Err(invalid_arg!("thickness range must satisfy 1 <= min <= max, got {lo}..{hi}"));
        }
        for (name, v) in [("fg_level", self.fg_level), ("bg_level", self.bg_level), ("branch_prob", self.branch_prob)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid_arg!("{name} must lie in [0, 1], got {v}"));
            }
        }
        for (name, v) in [
            ("curvature", self.curvature),
            ("blur_sigma", self.blur_sigma),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid_arg!("{name} must be non-negative, got {v}"));
            }
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(invalid_arg!("gamma must be positive, got {}", self.gamma));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    /// `[1, 1, size, size]` intensities in `[0, 1]`.
    pub image: Tensor,
    /// `[1, 1, size, size]` binary label.
    pub label: Tensor,
    /// Number of 8-connected structures in the label.
    pub structures: usize,
}

/// `n_images` samples; sample `i` depends only on `(spec, seed, i)`.
pub fn generate(spec: &DomainSpec, n_images: usize, seed: u64) -> Result<Vec<SynthSample>> {
    if n_images == 0 {
        return Err(invalid_arg!("n_images must be at least 1"));
    }
    (0..n_images).map(|i| generate_one(spec, seed, i as u64)).collect()
}

pub fn generate_one(spec: &DomainSpec, seed: u64, index: u64) -> Result<SynthSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let n = spec.size;
    let mut label = BinaryMask::empty(n, n);
    while label.is_empty() {
        for _ in 0..spec.n_curves {
            draw_curve(&mut label, spec, &mut rng);
        }
    }
    let structures = count_foreground_components(&label);
    let image = render(&label, spec, &mut rng)?;
    Ok(SynthSample {
        image: Tensor::new(vec![1, 1, n, n], image)?,
        label: label.to_tensor().reshape(vec![1, 1, n, n])?,
        structures,
    })
}

type Point = (f64, f64);

/// Random-walk control points from `start` with heading `angle`.
fn walk<R: Rng + ?Sized>(start: Point, mut angle: f64, steps: usize, step_len: f64, curvature: f64, rng: &mut R) -> Vec<Point> {
    let turn = Normal::new(0.0, curvature.max(1e-12)).expect("finite curvature");
    let mut pts = vec![start];
    let mut p = start;
    for _ in 0..steps {
        angle += turn.sample(rng);
        p = (p.0 + step_len * angle.sin(), p.1 + step_len * angle.cos());
        pts.push(p);
    }
    pts
}

/// Dense Catmull-Rom interpolation through `ctrl`.
fn smooth(ctrl: &[Point], per_segment: usize) -> Vec<Point> {
    if ctrl.len() < 2 {
        return ctrl.to_vec();
    }
    let at = |i: isize| ctrl[i.clamp(0, ctrl.len() as isize - 1) as usize];
    let mut out = Vec::with_capacity(ctrl.len() * per_segment);
    for i in 0..ctrl.len() as isize - 1 {
        let (p0, p1, p2, p3) = (at(i - 1), at(i), at(i + 1), at(i + 2));
        for k in 0..per_segment {
            let t = k as f64 / per_segment as f64;
            let (t2, t3) = (t * t, t * t * t);
            let f = |a: f64, b: f64, c: f64, d: f64| {
                0.5 * (2.0 * b + (c - a) * t + (2.0 * a - 5.0 * b + 4.0 * c - d) * t2 + (3.0 * b - a - 3.0 * c + d) * t3)
            };
            out.push((f(p0.0, p1.0, p2.0, p3.0), f(p0.1, p1.1, p2.1, p3.1)));
        }
    }
    out.push(*ctrl.last().expect("non-empty"));
    out
}

fn stamp(mask: &mut BinaryMask, path: &[Point], thickness: f64) {
    let r = (thickness / 2.0).max(0.75);
    let (h, w) = (mask.height() as isize, mask.width() as isize);
    for &(cy, cx) in path {
        let (y0, y1) = ((cy - r).floor() as isize, (cy + r).ceil() as isize);
        let (x0, x1) = ((cx - r).floor() as isize, (cx + r).ceil() as isize);
        for y in y0.max(0)..=y1.min(h - 1) {
            for x in x0.max(0)..=x1.min(w - 1) {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                if dy * dy + dx * dx <= r * r {
                    mask.set(y as usize, x as usize, true);
                }
            }
        }
    }
}

fn draw_curve<R: Rng + ?Sized>(mask: &mut BinaryMask, spec: &DomainSpec, rng: &mut R) {
    let n = spec.size as f64;
    let start = (rng.random_range(0.1 * n..0.9 * n), rng.random_range(0.1 * n..0.9 * n));
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let step_len = (n / 12.0).max(2.0);
    let steps = rng.random_range(6..=12);
    let thickness = rng.random_range(spec.thickness.0..=spec.thickness.1);
    // Grow in both directions so the start point is not always an endpoint.
    let forward = walk(start, angle, steps / 2 + 1, step_len, spec.curvature, rng);
    let backward = walk(start, angle + std::f64::consts::PI, steps / 2, step_len, spec.curvature, rng);
    let ctrl: Vec<Point> = backward.iter().rev().chain(forward.iter().skip(1)).copied().collect();
    let path = smooth(&ctrl, 16);
    stamp(mask, &path, thickness);
    if rng.random_bool(spec.branch_prob) {
        let at = path[rng.random_range(path.len() / 4..=3 * path.len() / 4)];
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let branch_angle = rng.random_range(0.0..std::f64::consts::TAU) + side * 0.7;
        let ctrl = walk(at, branch_angle, steps / 2, step_len, spec.curvature, rng);
        let branch = smooth(&ctrl, 16);
        stamp(mask, &branch, (thickness * 0.7).max(spec.thickness.0));
    }
}

/// Separable Gaussian blur with edge replication, radius `ceil(3σ)`.
pub fn blur_plane(data: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.iter().map(|t| t / norm).collect();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * data[y * w + (x as isize + k as isize - radius).clamp(0, w as isize - 1) as usize])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * tmp[(y as isize + k as isize - radius).clamp(0, h as isize - 1) as usize * w + x])
                .sum();
        }
    }
    out
}

fn render<R: Rng + ?Sized>(label: &BinaryMask, spec: &DomainSpec, rng: &mut R) -> Result<Vec<f64>> {
    let (h, w) = (label.height(), label.width());
    let mut img: Vec<f64> = label
        .bits()
        .iter()
        .map(|&b| {
            let v = if b { spec.fg_level } else { spec.bg_level };
            let v = if spec.invert { 1.0 - v } else { v };
            v.powf(spec.gamma)
        })
        .collect();
    img = blur_plane(&img, h, w, spec.blur_sigma);
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| invalid_arg!("noise: {e}"))?;
        img.iter_mut().for_each(|v| *v += noise.sample(rng));
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::skeletonize;

    #[test]
    fn clean_domain_thresholds_to_label() {
        let spec = DomainSpec {
            fg_level: 1.0,
            bg_level: 0.0,
            blur_sigma: 0.0,
            noise_sigma: 0.0,
            ..DomainSpec::source(48)
        };
        for s in generate(&spec, 5, 11).unwrap() {
            let thr = BinaryMask::from_tensor(&s.image, 0.5).unwrap();
            assert_eq!(thr, BinaryMask::from_tensor(&s.label, 0.5).unwrap());
        }
    }

    #[test]
    fn labels_have_skeletons_and_counted_structures() {
        for s in generate(&DomainSpec::source(64), 20, 2).unwrap() {
            let m = BinaryMask::from_tensor(&s.label, 0.5).unwrap();
            assert!(!skeletonize(&m).is_empty());
            assert_eq!(s.structures, count_foreground_components(&m));
            assert!(s.image.min() >= 0.0 && s.image.max() <= 1.0);
        }
    }

    #[test]
    fn index_addressable() {
        let spec = DomainSpec::low_contrast_shift(32);
        let all = generate(&spec, 4, 9).unwrap();
        assert_eq!(all[3], generate_one(&spec, 9, 3).unwrap());
    }

    #[test]
    fn invalid_spec_rejected() {
        let bad = DomainSpec {
            thickness: (0.5, 2.0),
            ..DomainSpec::source(32)
        };
        assert!(generate(&bad, 1, 0).is_err());
        assert!(generate(&DomainSpec::source(32), 0, 0).is_err());
    }
}
