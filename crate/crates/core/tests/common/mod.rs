//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

pub mod gradients;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use topotta::metrics::BinaryMask;
use topotta::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

pub fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(&x, &y)| rel_err(x, y)).fold(0.0, f64::max)
}

/// `(R_i, B_i)` for i = 1..=8, written out by hand from the direction definitions.
pub const REFERENCE_SETS: [([(i32, i32); 3], (i32, i32)); 8] = [
    ([(-1, -1), (-1, 0), (0, -1)], (-1, -1)),
    ([(0, -1), (-1, -1), (1, -1)], (0, -1)),
    ([(1, -1), (0, -1), (1, 0)], (1, -1)),
    ([(-1, 0), (-1, -1), (-1, 1)], (-1, 0)),
    ([(1, 0), (1, 1), (1, -1)], (1, 0)),
    ([(-1, 1), (-1, 0), (0, 1)], (-1, 1)),
    ([(0, 1), (1, 1), (-1, 1)], (0, 1)),
    ([(1, 1), (0, 1), (1, 0)], (1, 1)),
];

/// The full 3×3 receptive field `R`.
pub fn receptive_field() -> Vec<(i32, i32)> {
    (-1..=1).flat_map(|dx| (-1..=1).map(move |dy| (dx, dy))).collect()
}

/// `w(Δr_x, Δr_y)` of kernel `(o, c)`. The weight paired with `x(r − Δ)`
/// sits at row `1 − Δr_y`, column `1 − Δr_x` of the cross-correlation layout.
pub fn w_at(weight: &Tensor, cin: usize, o: usize, c: usize, d: (i32, i32)) -> f64 {
    let (ky, kx) = ((1 - d.1) as usize, (1 - d.0) as usize);
    weight.data()[((o * cin + c) * 3 + ky) * 3 + kx]
}

/// `x_in(r_x, r_y)` of plane `(b, c)`, zero outside the image.
pub fn x_at(input: &Tensor, b: usize, c: usize, rx: i64, ry: i64) -> f64 {
    let s = input.shape();
    let (cin, h, w) = (s[1], s[2] as i64, s[3] as i64);
    if rx < 0 || ry < 0 || rx >= w || ry >= h {
        return 0.0;
    }
    input.data()[((b * cin + c) * h as usize + ry as usize) * w as usize + rx as usize]
}

/// Literal per-pixel evaluation of `C_0`, `C_c` or `C_i`.
pub enum Term {
    Vanilla,
    Central,
    Direction(usize),
}

pub fn literal(input: &Tensor, weight: &Tensor, term: Term) -> Tensor {
    let s = input.shape();
    let (n, cin, h, w) = (s[0], s[1], s[2], s[3]);
    let cout = weight.shape()[0];
    let field = receptive_field();
    let mut out = vec![0.0; n * cout * h * w];
    for b in 0..n {
        for o in 0..cout {
            for ry in 0..h as i64 {
                for rx in 0..w as i64 {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        let wt = |d: (i32, i32)| w_at(weight, cin, o, c, d);
                        let x = |dx: i64, dy: i64| x_at(input, b, c, rx + dx, ry + dy);
                        match term {
                            Term::Vanilla => {
                                for &d in &field {
                                    acc += wt(d) * x(-(d.0 as i64), -(d.1 as i64));
                                }
                            }
                            Term::Central => {
                                for &d in &field {
                                    acc += wt(d) * x(0, 0);
                                }
                            }
                            Term::Direction(i) => {
                                let (ri, bi) = REFERENCE_SETS[i - 1];
                                for &d in &field {
                                    acc += wt(d) * x(0, 0);
                                }
                                for &d in &ri {
                                    acc -= wt(d) * x(0, 0);
                                }
                                for &d in &ri {
                                    acc += wt(d) * x(-(bi.0 as i64), -(bi.1 as i64));
                                }
                            }
                        }
                    }
                    out[((b * cout + o) * h + ry as usize) * w + rx as usize] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, cout, h, w], out).unwrap()
}

/// Patch index of row/column `v` in a grid of `n` along an axis of `len`;
/// the last patch absorbs the remainder.
pub fn patch_of(v: usize, len: usize, n: usize) -> usize {
    (v / (len / n)).min(n - 1)
}

/// `C_0(x) + bias − Σ_i δ_{p,i}·C_i(x)` assembled from literal terms.
pub fn mixture(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, delta: &Tensor, n: usize) -> Tensor {
    let s = input.shape();
    let (h, w) = (s[2], s[3]);
    let cout = weight.shape()[0];
    let mut out = literal(input, weight, Term::Vanilla);
    let dirs: Vec<Tensor> = (1..=8).map(|i| literal(input, weight, Term::Direction(i))).collect();
    let plane = h * w;
    for (idx, v) in out.data_mut().iter_mut().enumerate() {
        let o = (idx / plane) % cout;
        let (y, x) = ((idx % plane) / w, idx % w);
        let p = patch_of(y, h, n) * n + patch_of(x, w, n);
        if let Some(b) = bias {
            *v += b.data()[o];
        }
        for (i, d) in dirs.iter().enumerate() {
            *v -= delta.data()[p * 8 + i] * d.data()[idx];
        }
    }
    out
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut a: usize) -> usize {
        while self.parent[a] != a {
            self.parent[a] = self.parent[self.parent[a]];
            a = self.parent[a];
        }
        a
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra] = rb;
        }
    }
}

/// `(β0, β1)` by union-find: 8-connected foreground components, and
/// 4-connected background components that do not reach the border.
pub fn betti_oracle(m: &BinaryMask) -> (usize, usize) {
    let (h, w) = (m.height(), m.width());
    // One extra node stands for "outside the image".
    let outside = h * w;
    let mut uf = UnionFind::new(h * w + 1);
    for y in 0..h {
        for x in 0..w {
            let v = m.get(y, x);
            let here = y * w + x;
            let neighbours: &[(i64, i64)] = if v {
                &[(0, 1), (1, -1), (1, 0), (1, 1)]
            } else {
                &[(0, 1), (1, 0)]
            };
            for &(dy, dx) in neighbours {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                if ny < h as i64 && nx >= 0 && nx < w as i64 && m.get(ny as usize, nx as usize) == v {
                    uf.union(here, ny as usize * w + nx as usize);
                }
            }
            if !v && (y == 0 || x == 0 || y == h - 1 || x == w - 1) {
                uf.union(here, outside);
            }
        }
    }
    let outside_root = uf.find(outside);
    let mut fg = std::collections::BTreeSet::new();
    let mut holes = std::collections::BTreeSet::new();
    for y in 0..h {
        for x in 0..w {
            let r = uf.find(y * w + x);
            if m.get(y, x) {
                fg.insert(r);
            } else if r != outside_root {
                holes.insert(r);
            }
        }
    }
    (fg.len(), holes.len())
}

/// Foreground with probability `density` per pixel.
pub fn random_mask(h: usize, w: usize, density: f64, rng: &mut ChaCha8Rng) -> BinaryMask {
    BinaryMask::from_fn(h, w, |_, _| rng.random_bool(density))
}

/// A connected blob: a random walk of overlapping discs, redrawn until the
/// oracle sees a single component.
pub fn random_blob(h: usize, w: usize, rng: &mut ChaCha8Rng) -> BinaryMask {
    loop {
        let m = disc_walk(h, w, rng);
        if betti_oracle(&m).0 == 1 {
            return m;
        }
    }
}

fn disc_walk(h: usize, w: usize, rng: &mut ChaCha8Rng) -> BinaryMask {
    let mut m = BinaryMask::empty(h, w);
    let (mut cy, mut cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let steps = rng.random_range(3..12);
    for _ in 0..steps {
        let r = rng.random_range(1.5..3.5);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                if dy * dy + dx * dx <= r * r {
                    m.set(y, x, true);
                }
            }
        }
        cy = (cy + rng.random_range(-1.0..1.0)).clamp(2.0, h as f64 - 3.0);
        cx = (cx + rng.random_range(-1.0..1.0)).clamp(2.0, w as f64 - 3.0);
    }
    m
}

/// A default-shape model trained briefly on the clean source domain; good
/// enough to segment simple tubes confidently.
pub fn quick_source_model(size: usize, images: usize, epochs: usize) -> topotta::segnet::SegModel {
    use topotta::segnet::{train_source, ModelMeta, SegModel, TrainConfig};
    use topotta::synth::{generate, DomainSpec};
    let data: Vec<(Tensor, Tensor)> = generate(&DomainSpec::source(size), images, 11)
        .unwrap()
        .into_iter()
        .map(|s| (s.image, s.label))
        .collect();
    let cfg = TrainConfig {
        epochs,
        seed: 11,
        ..TrainConfig::default()
    };
    train_source(&SegModel::new(ModelMeta::DEFAULT, 11).unwrap(), &data, &cfg)
        .unwrap()
        .model
}
