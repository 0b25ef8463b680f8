mod common;

use common::gradients::{cases, H, TOL};
use common::{random, rng};
use topotta::{grad_check, Error, Graph, Tensor, Var};

fn check_group(group: &str) {
    let selected: Vec<_> = cases().into_iter().filter(|c| c.group == group).collect();
    assert!(!selected.is_empty(), "no cases in group {group}");
    for case in selected {
        let err = case.max_error();
        assert!(err < TOL, "{}: relative error {err}", case.name);
    }
}

#[test]
fn conv3x3_matches_direct_sum() {
    let mut r = rng(1);
    let (n, cin, cout, h, w) = (1, 2, 3, 5, 5);
    let x = random(&[n, cin, h, w], &mut r);
    let k = random(&[cout, cin, 3, 3], &mut r);
    let b = random(&[cout], &mut r);
    let mut g = Graph::new();
    let (xv, kv, bv) = (g.constant(x.clone()), g.constant(k.clone()), g.constant(b.clone()));
    let y = g.conv3x3(xv, kv, Some(bv)).unwrap();
    let got = g.value(y).data().to_vec();
    for o in 0..cout {
        for yy in 0..h {
            for xx in 0..w {
                let mut acc = b.data()[o];
                for c in 0..cin {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (sy, sx) = (yy as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            acc += k.data()[((o * cin + c) * 3 + ky) * 3 + kx]
                                * x.data()[(c * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                let v = got[(o * h + yy) * w + xx];
                assert!((v - acc).abs() <= 1e-12 * acc.abs().max(1.0), "{v} vs {acc}");
            }
        }
    }
}

#[test]
fn conv3x3_identity_and_constant_cases() {
    let mut r = rng(2);
    let x = random(&[1, 1, 6, 6], &mut r);
    let mut id = Tensor::zeros(&[1, 1, 3, 3]);
    id.data_mut()[4] = 1.0;
    let mut g = Graph::new();
    let (xv, kv) = (g.constant(x.clone()), g.constant(id));
    let bv = g.constant(Tensor::zeros(&[1]));
    let y = g.conv3x3(xv, kv, Some(bv)).unwrap();
    assert!(g.value(y).bit_eq(&x));

    let c = 0.7;
    let xv = g.constant(Tensor::full(&[1, 1, 5, 5], c));
    let ones = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g.conv3x3(xv, ones, None).unwrap();
    assert!((g.value(y).data()[2 * 5 + 2] - 9.0 * c).abs() < 1e-12);
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_fn(&[1, 1, 2, 3], |i| -(i as f64) - 0.5), true);
    let y = g.relu(x).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));

    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(0.0), true);
    let y = g.sigmoid(x).unwrap();
    assert_eq!(g.value(y).data()[0], 0.5);
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().data()[0], 0.25);
}

#[test]
fn maxpool_picks_block_maxima_and_routes_gradient() {
    let vals: Vec<f64> = vec![
        1.0, 5.0, 2.0, 0.0, //
        3.0, 4.0, 7.0, 6.0, //
        9.0, 8.0, 10.0, 15.0, //
        12.0, 11.0, 14.0, 13.0,
    ];
    let point = Tensor::new(vec![1, 1, 4, 4], vals).unwrap();
    let mut g = Graph::new();
    let x = g.leaf(point.clone(), true);
    let y = g.maxpool2x2(x).unwrap();
    assert_eq!(g.value(y).data(), &[5.0, 7.0, 12.0, 15.0]);
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    let grad = g.grad(x).unwrap().data().to_vec();
    let hot: Vec<usize> = (0..16).filter(|&i| grad[i] != 0.0).collect();
    assert_eq!(hot, vec![1, 6, 11, 12]);
    assert!(grad_check(|g, x| { let y = g.maxpool2x2(x)?; g.sum(y) }, &point, H).unwrap() < TOL);
}

#[test]
fn sum_and_square_gradients() {
    let point = random(&[2, 3, 4], &mut rng(3));
    let mut g = Graph::new();
    let x = g.leaf(point.clone(), true);
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));

    let mut g = Graph::new();
    let x = g.leaf(point.clone(), true);
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    let half = g.scale(s, 0.5).unwrap();
    g.backward(half).unwrap();
    assert!(g.grad(x).unwrap().max_abs_diff(&point) < 1e-15);

    let f = |g: &mut Graph, x: Var| g.sum(x);
    assert!(grad_check(f, &point, H).unwrap() < 1e-9);
}

#[test]
fn backward_and_grad_check_reject_bad_input() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2]), true);
    assert!(matches!(g.backward(x), Err(Error::InvalidArgument(_))));
    let p = Tensor::zeros(&[1]);
    assert!(matches!(grad_check(|g, x| g.sum(x), &p, 0.0), Err(Error::InvalidArgument(_))));
}

#[test]
fn batchnorm_rejects_bad_statistics() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
    let gamma = g.constant(Tensor::full(&[1], 1.0));
    let beta = g.constant(Tensor::zeros(&[1]));
    assert!(matches!(
        g.batchnorm(x, gamma, beta, &[0.0], &[1.0], 0.0),
        Err(Error::InvalidArgument(_))
    ));
    assert!(matches!(
        g.batchnorm(x, gamma, beta, &[0.0], &[f64::NAN], 1e-5),
        Err(Error::InvalidState(_))
    ));
}


#[test]
fn gradients_of_convolutions() {
    check_group("conv");
}

#[test]
fn gradients_of_topomdc_and_wrapped_router() {
    check_group("topomdc");
}

#[test]
fn gradients_of_normalization() {
    check_group("batchnorm");
}

#[test]
fn gradients_of_shape_ops() {
    check_group("shape");
}

#[test]
fn gradients_of_arithmetic() {
    check_group("arithmetic");
}

#[test]
fn gradients_of_adaptation_losses() {
    check_group("loss");
}

#[test]
fn composite_pipeline_gradient() {
    check_group("composite");
}
