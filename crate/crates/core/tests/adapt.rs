mod common;

use std::sync::OnceLock;

use common::{quick_source_model, random, rng};
use rand::Rng;
use topotta::adapt::{
    entropy, entropy_loss, ema_update, pseudolabel_with, weighted_consistency_loss, AdaptConfig, AdaptState,
    Augmentation,
};
use topotta::segnet::{ModelMeta, SegModel};
use topotta::synth::{generate_one, DomainSpec};
use topotta::topohg::HgConfig;
use topotta::topomdc::{wrap_encoder, RouterParams};
use topotta::{grad_check, Error, Graph, Tensor};

const EPS: f64 = 1e-7;

fn model() -> &'static SegModel {
    static MODEL: OnceLock<SegModel> = OnceLock::new();
    MODEL.get_or_init(|| quick_source_model(64, 60, 15))
}

fn shifted(index: u64) -> Tensor {
    generate_one(&DomainSpec::inverted_shift(64), 77, index).unwrap().image
}

fn state(cfg: AdaptConfig) -> AdaptState {
    AdaptState::new(model(), cfg, HgConfig::default(), 5).unwrap()
}

fn probabilities(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.random_range(0.01..0.99))
}

fn params_bit_eq(a: &SegModel, b: &SegModel) -> bool {
    a.params().len() == b.params().len() && a.params().values().zip(b.params().values()).all(|(x, y)| x.bit_eq(y))
}

#[test]
fn entropy_matches_scalar_loop() {
    let p = probabilities(&[1, 1, 9, 7], 40);
    let mut want = 0.0;
    for &v in p.data() {
        want += -(v * v.ln()) - (1.0 - v) * (1.0 - v).ln();
    }
    assert!((entropy(&p, EPS) - want).abs() / want < 1e-12);
    assert!((entropy(&Tensor::scalar(0.5), EPS) - std::f64::consts::LN_2).abs() < 1e-15);
}

fn consistency_value(t: &Tensor, s: &Tensor, w: &Tensor) -> f64 {
    let mut g = Graph::new();
    let sv = g.constant(s.clone());
    let l = weighted_consistency_loss(&mut g, t, sv, w, EPS).unwrap();
    g.value(l).data()[0]
}

#[test]
fn consistency_matches_scalar_loop() {
    let t = probabilities(&[1, 1, 8, 8], 41);
    let s = probabilities(&[1, 1, 8, 8], 42);
    let mut r = rng(43);
    let w = Tensor::from_fn(&[1, 1, 8, 8], |_| if r.random_bool(0.3) { 10.0 } else { 1.0 });
    let mut want = 0.0;
    for i in 0..t.len() {
        let (a, b, wi) = (t.data()[i], s.data()[i], w.data()[i]);
        want -= wi * (a * b.ln() + (1.0 - a) * (1.0 - b).ln() + b * a.ln() + (1.0 - b) * (1.0 - a).ln());
    }
    let got = consistency_value(&t, &s, &w);
    assert!((got - want).abs() / want < 1e-12, "{got} vs {want}");

    let half = Tensor::full(&[1, 1, 1, 1], 0.5);
    let one = Tensor::full(&[1, 1, 1, 1], 1.0);
    assert!((consistency_value(&half, &half, &one) - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn doubling_a_weight_doubles_its_contribution() {
    let t = probabilities(&[1, 1, 4, 4], 44);
    let s = probabilities(&[1, 1, 4, 4], 45);
    let base = Tensor::full(&[1, 1, 4, 4], 1.0);
    let mut only = Tensor::zeros(&[1, 1, 4, 4]);
    only.data_mut()[5] = 1.0;
    let mut doubled = base.clone();
    doubled.data_mut()[5] = 2.0;
    let contribution = consistency_value(&t, &s, &only);
    let got = consistency_value(&t, &s, &doubled) - consistency_value(&t, &s, &base);
    assert!((got - contribution).abs() < 1e-12);
}

#[test]
fn consistency_rejects_shape_mismatch() {
    let mut g = Graph::new();
    let s = g.constant(Tensor::full(&[1, 1, 4, 4], 0.5));
    let e = weighted_consistency_loss(&mut g, &Tensor::full(&[1, 1, 4, 5], 0.5), s, &Tensor::full(&[1, 1, 4, 4], 1.0), EPS)
        .unwrap_err();
    assert!(matches!(e, Error::InvalidArgument(_)));
}

#[test]
fn loss_gradients_pass_finite_differences() {
    for seed in 0..10 {
        let point = random(&[1, 1, 5, 5], &mut rng(seed));
        let err = grad_check(
            |g, x| {
                let p = g.sigmoid(x)?;
                entropy_loss(g, p, EPS)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "entropy at point {seed}: {err}");

        let teacher = probabilities(&[1, 1, 5, 5], 100 + seed);
        let w = Tensor::from_fn(&[1, 1, 5, 5], |i| if i % 3 == 0 { 10.0 } else { 1.0 });
        let err = grad_check(
            |g, x| {
                let p = g.sigmoid(x)?;
                weighted_consistency_loss(g, &teacher, p, &w, EPS)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "consistency at point {seed}: {err}");
    }
}

#[test]
fn ema_matches_closed_form_over_five_steps() {
    let meta = ModelMeta { levels: 2, base_channels: 2 };
    let start = SegModel::new(meta, 1).unwrap();
    let students: Vec<SegModel> = (2..7).map(|s| SegModel::new(meta, s).unwrap()).collect();
    let rate = 0.999;
    let mut teacher = start.clone();
    for s in &students {
        ema_update(&mut teacher, s, rate).unwrap();
    }
    for (name, got) in teacher.params() {
        let mut want = start.params()[name].map(|v| v * rate.powi(5));
        for (j, s) in students.iter().enumerate() {
            let k = rate.powi(4 - j as i32) * (1.0 - rate);
            want.data_mut().iter_mut().zip(s.params()[name].data()).for_each(|(a, b)| *a += k * b);
        }
        assert!(got.max_abs_diff(&want) < 1e-12, "{name}");
    }
    assert_eq!(teacher.stats(), students[4].stats());

    let mut same = start.clone();
    ema_update(&mut same, &students[0], 1.0).unwrap();
    assert!(params_bit_eq(&same, &start));
    ema_update(&mut same, &students[0], 0.0).unwrap();
    assert!(params_bit_eq(&same, &students[0]));

    let other = SegModel::new(ModelMeta { levels: 3, ..meta }, 1).unwrap();
    assert!(matches!(ema_update(&mut same, &other, 0.5), Err(Error::InvalidState(_))));
}

#[test]
fn identity_rounds_reproduce_the_plain_forward() {
    let (wrapped, router) = wrap_encoder(model(), 4).unwrap();
    let image = shifted(0);
    let plain = wrapped.forward(&image, Some(&router)).unwrap();
    let one = pseudolabel_with(&wrapped, &router, &image, &[Augmentation::IDENTITY]).unwrap();
    assert!(one.bit_eq(&plain));
    let four = pseudolabel_with(&wrapped, &router, &image, &[Augmentation::IDENTITY; 4]).unwrap();
    assert!(four.max_abs_diff(&plain) < 1e-15);
    assert!(matches!(pseudolabel_with(&wrapped, &router, &image, &[]), Err(Error::InvalidArgument(_))));
}

#[test]
fn flip_rounds_keep_a_symmetric_input_symmetric() {
    let (wrapped, router) = wrap_encoder(model(), 4).unwrap();
    let base = shifted(1);
    let n = 64;
    let d = base.data();
    let mirrored = Tensor::from_fn(&[1, 1, n, n], |i| {
        let (y, x) = (i / n, i % n);
        d[y * n + x.min(n - 1 - x)]
    });
    let flip = Augmentation { flip_h: true, ..Augmentation::IDENTITY };
    let p = pseudolabel_with(&wrapped, &router, &mirrored, &[Augmentation::IDENTITY, flip]).unwrap();
    for y in 0..n {
        for x in 0..n {
            let (a, b) = (p.data()[y * n + x], p.data()[y * n + n - 1 - x]);
            assert!((a - b).abs() < 1e-10, "({y}, {x})");
        }
    }
    // Scaled rounds come back in the original frame.
    let scaled = Augmentation { scale: 1.25, flip_v: true, ..Augmentation::IDENTITY };
    let q = pseudolabel_with(&wrapped, &router, &mirrored, &[scaled]).unwrap();
    assert_eq!(q.shape(), mirrored.shape());
}

#[test]
fn stage_one_touches_only_the_router() {
    let mut st = state(AdaptConfig::default());
    let image = shifted(2);
    let (student, teacher) = (st.student.clone(), st.teacher.clone());
    let record = st.stage1(&image).unwrap();
    assert_eq!(record.entropy.len(), 3);
    assert!(params_bit_eq(&st.student, &student));
    assert!(params_bit_eq(&st.teacher, &teacher));
    assert!(st.router.delta.data().iter().any(|&v| v != 0.0));
    assert!(record.entropy_after < record.entropy[0], "{record:?}");
}

#[test]
fn stage_two_leaves_the_router_alone() {
    let mut st = state(AdaptConfig::default());
    let image = shifted(3);
    st.stage1(&image).unwrap();
    let delta = st.router.delta.clone();
    let student = st.student.clone();
    for _ in 0..2 {
        st.stage2_iteration(&image).unwrap();
    }
    assert!(st.router.delta.bit_eq(&delta));
    assert!(!params_bit_eq(&st.student, &student));
}

#[test]
fn teacher_follows_the_student_trajectory() {
    let mut st = state(AdaptConfig::default());
    let image = shifted(4);
    let start = st.teacher.clone();
    let mut trajectory = Vec::new();
    for _ in 0..5 {
        st.stage2_iteration(&image).unwrap();
        trajectory.push(st.student.clone());
    }
    let rate = st.cfg.ema_rate;
    for (name, got) in st.teacher.params() {
        let mut want = start.params()[name].map(|v| v * rate.powi(5));
        for (j, s) in trajectory.iter().enumerate() {
            let k = rate.powi(4 - j as i32) * (1.0 - rate);
            want.data_mut().iter_mut().zip(s.params()[name].data()).for_each(|(a, b)| *a += k * b);
        }
        assert!(got.max_abs_diff(&want) < 1e-12, "{name}");
    }
}

#[test]
fn zero_learning_rates_give_the_source_prediction() {
    let cfg = AdaptConfig { lr_stage1: 0.0, lr_stage2: 0.0, ..AdaptConfig::default() };
    let mut st = state(cfg);
    let image = shifted(5);
    let out = st.adapt_sample(&image).unwrap();
    assert!(st.router.delta.data().iter().all(|&v| v == 0.0));
    let (wrapped, zero) = wrap_encoder(model(), 4).unwrap();
    assert!(out.prediction.bit_eq(&wrapped.forward(&image, Some(&zero)).unwrap()));
    assert!(out.prediction.max_abs_diff(&model().forward(&image, None).unwrap()) <= 1e-12);
}

#[test]
fn stage_one_at_zero_rate_keeps_router_zero() {
    let cfg = AdaptConfig { lr_stage1: 0.0, ..AdaptConfig::default() };
    let mut st = state(cfg);
    st.stage1(&shifted(6)).unwrap();
    assert!(st.router.delta.data().iter().all(|&v| v == 0.0));
}

#[test]
fn six_iterations_split_three_and_three() {
    let mut st = state(AdaptConfig::default());
    let out = st.adapt_sample(&shifted(7)).unwrap();
    assert_eq!((out.log.stage1_steps, out.log.stage2_steps), (3, 3));
    assert_eq!((out.log.stage1.entropy.len(), out.log.stage2.len()), (3, 3));
    assert_eq!(st.samples_seen(), 1);
    let line = out.log.to_json();
    assert!(!line.contains('\n') && line.contains("\"stage1_steps\":3"));
}

#[test]
fn router_resets_between_samples() {
    let mut st = state(AdaptConfig::default());
    st.adapt_sample(&shifted(8)).unwrap();
    assert!(st.router.delta.data().iter().any(|&v| v != 0.0));
    let next = shifted(9);
    let zero = RouterParams::zeros(st.router.layers.clone(), st.router.grid);
    let fresh = entropy(&st.student.forward(&next, Some(&zero)).unwrap(), EPS);
    let out = st.adapt_sample(&next).unwrap();
    let first = out.log.stage1.entropy[0];
    assert!((first - fresh).abs() / fresh < 1e-9, "{first} vs {fresh}");
}

#[test]
fn adaptation_is_reproducible() {
    let run = || {
        let mut st = state(AdaptConfig::default());
        (0..2).map(|i| st.adapt_sample(&shifted(10 + i)).unwrap().prediction).collect::<Vec<_>>()
    };
    let (a, b) = (run(), run());
    assert!(a.iter().zip(&b).all(|(x, y)| x.bit_eq(y)));
}

#[test]
fn break_pixels_move_toward_the_teacher() {
    // A clean tube the source model segments confidently, so the plan has
    // accepted breaks to train on.
    let n = 64;
    let image = Tensor::from_fn(&[1, 1, n, n], |i| if (31..34).contains(&(i / n)) { 0.85 } else { 0.15 });
    let hg = HgConfig { s: 16, k: 1e-6, tau: 0.5, ..HgConfig::default() };
    let cfg = AdaptConfig { scales: vec![1.0], ..AdaptConfig::default() };
    let mut st = AdaptState::new(model(), cfg, hg, 5).unwrap();
    let steps: Vec<_> = (0..3).map(|_| st.stage2_iteration(&image).unwrap()).collect();
    assert!(steps.iter().all(|s| s.keypoints > 0), "{steps:?}");
    assert!(steps[2].break_gap < steps[0].break_gap, "{steps:?}");
}

#[test]
fn wrong_input_shapes_are_rejected() {
    let mut st = state(AdaptConfig::default());
    assert!(matches!(st.adapt_sample(&Tensor::zeros(&[1, 1, 30, 30])), Err(Error::InvalidArgument(_))));
    assert!(matches!(st.stage1(&Tensor::zeros(&[2, 1, 64, 64])), Err(Error::InvalidArgument(_))));
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        AdaptConfig { iterations: 5, ..AdaptConfig::default() },
        AdaptConfig { iterations: 0, ..AdaptConfig::default() },
        AdaptConfig { ema_rate: 1.5, ..AdaptConfig::default() },
        AdaptConfig { scales: vec![], ..AdaptConfig::default() },
        AdaptConfig { teacher_rounds: 0, ..AdaptConfig::default() },
    ] {
        assert!(matches!(cfg.validate(), Err(Error::InvalidArgument(_))), "{cfg:?}");
    }
}
