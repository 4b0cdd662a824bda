use gwsel_autodiff::{Adam, AdamConfig, Error, Graph, OneCycle, ParamSet, Tensor};
use proptest::prelude::*;

/// One Adam step on a single scalar parameter with loss `c * p`, so dL/dp = c.
fn scalar_step(adam: &mut Adam, p: &mut ParamSet, c: f64, lr: f64) -> Result<(), Error> {
    let mut g = Graph::new();
    let bound = p.bind(&mut g, true);
    let x = bound.get("p")?;
    let l = g.scale(x, c)?;
    let grads = g.backward(l)?;
    adam.step(p, &bound, &grads, lr)
}

fn scalar(v: f64) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert("p", Tensor::scalar(v)).unwrap();
    p
}

fn value(p: &ParamSet) -> f64 {
    p.get("p").unwrap().item().unwrap()
}

#[test]
fn first_step_matches_hand_computation() {
    // m1 = 0.1 g, v1 = 0.001 g^2; bias correction gives m^ = g, v^ = g^2,
    // so the step is lr * g / (|g| + eps).
    let (g, lr) = (0.5, 0.01);
    let mut p = scalar(1.0);
    let mut adam = Adam::new(AdamConfig::default());
    scalar_step(&mut adam, &mut p, g, lr).unwrap();
    let expected = 1.0 - lr * g / (g + 1e-8);
    assert!((value(&p) - expected).abs() < 1e-15);
    assert_eq!(adam.steps(), 1);
}

#[test]
fn second_step_matches_hand_computation() {
    let (b1, b2, eps, lr) = (0.9_f64, 0.999_f64, 1e-8, 0.1);
    let (g1, g2) = (0.5, -2.0);
    let mut p = scalar(0.0);
    let mut adam = Adam::new(AdamConfig::default());
    scalar_step(&mut adam, &mut p, g1, lr).unwrap();
    scalar_step(&mut adam, &mut p, g2, lr).unwrap();

    let mut x = 0.0;
    let (mut m, mut v) = (0.0, 0.0);
    for (t, g) in [(1, g1), (2, g2)] {
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        x -= lr * mh / (vh.sqrt() + eps);
    }
    assert!((value(&p) - x).abs() < 1e-15);
    assert_eq!(adam.steps(), 2);
}

#[test]
fn zero_moment_decay_is_sign_step() {
    let cfg = AdamConfig {
        beta1: 0.0,
        beta2: 0.0,
        eps: 1e-8,
    };
    let mut p = scalar(3.0);
    let mut adam = Adam::new(cfg);
    for g in [4.0, -0.25, 1e-3] {
        let before = value(&p);
        scalar_step(&mut adam, &mut p, g, 0.1).unwrap();
        let expected = before - 0.1 * g / (g.abs() + 1e-8);
        assert!((value(&p) - expected).abs() < 1e-15);
    }
}

#[test]
fn zero_gradient_never_moves_parameters() {
    let mut p = scalar(2.5);
    let mut adam = Adam::new(AdamConfig::default());
    for _ in 0..20 {
        scalar_step(&mut adam, &mut p, 0.0, 1.0).unwrap();
    }
    assert_eq!(value(&p), 2.5);
}

#[test]
fn adam_rejects_nan_gradient_and_keeps_state() {
    use gwsel_autodiff::checkpoint;
    // Forward stays finite, but the backward pass through the norm floor overflows.
    let mut p = scalar(1e-300);
    let mut adam = Adam::new(AdamConfig::default());
    let mut g = Graph::new();
    let bound = p.bind(&mut g, true);
    let x = bound.get("p").unwrap();
    let n = g.normalize_rows(x).unwrap();
    let l = g.scale(n, 1e300).unwrap();
    let grads = g.backward(l).unwrap();
    let before = checkpoint::to_bytes(&p, 0, 0).unwrap();
    let err = adam.step(&mut p, &bound, &grads, 0.1).unwrap_err();
    assert!(matches!(err, Error::NanGradient { ref name } if name == "p"), "{err}");
    assert_eq!(checkpoint::to_bytes(&p, 0, 0).unwrap(), before);
    assert_eq!(adam.steps(), 0);
}

#[test]
fn onecycle_shape() {
    let s = OneCycle::new(1000, 3e-3);
    let lr0 = s.lr(0).unwrap();
    assert_eq!(s.lr(s.warmup_end()).unwrap(), 3e-3);
    assert!(lr0 < 3e-3);
    assert!(s.lr(1000).unwrap() <= lr0);
    assert!(s.lr(1001).is_err());
    // Continuity: no jump larger than one warmup increment anywhere.
    let inc = (3e-3 - lr0) / s.warmup_end() as f64;
    for t in 0..1000 {
        let d = (s.lr(t + 1).unwrap() - s.lr(t).unwrap()).abs();
        assert!(d <= inc + 1e-15, "jump {d} at {t}");
    }
}

#[test]
fn onecycle_anneal_quarter_point() {
    // total 200, warmup 60, anneal 140 steps; step 95 is a quarter of the way:
    // lr = end + (peak - end) * (1 + cos(pi/4)) / 2
    let s = OneCycle::new(200, 2.0);
    let end = 2.0 * 1e-4;
    let expected = end + (2.0 - end) * (1.0 + std::f64::consts::FRAC_1_SQRT_2) / 2.0;
    assert!((s.lr(95).unwrap() - expected).abs() < 1e-14);
}

proptest! {
    #[test]
    fn zero_learning_rate_is_a_no_op(x in -10.0f64..10.0, grads in prop::collection::vec(-5.0f64..5.0, 1..10)) {
        let mut p = scalar(x);
        let mut adam = Adam::new(AdamConfig::default());
        for g in grads {
            scalar_step(&mut adam, &mut p, g, 0.0).unwrap();
        }
        prop_assert_eq!(value(&p).to_bits(), x.to_bits());
    }
}
