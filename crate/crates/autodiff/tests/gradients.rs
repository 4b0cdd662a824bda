use gwsel_autodiff::gradcheck;
use gwsel_autodiff::{Axis, Bound, Graph, ParamSet, Result, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Contracts an arbitrary-shape output with fixed random weights so every
/// output element contributes a distinct amount to the scalar.
fn contract(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let (r, c) = g.value(y).dims2()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = g.constant(random(&mut rng, r, c, 1.0));
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn assert_grad<F>(params: &ParamSet, f: F)
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    let report = gradcheck::check(params, EPS, f).unwrap();
    let worst = report.worst().unwrap();
    assert!(worst.rel_error < TOL, "{worst:?}");
}

fn params(entries: Vec<(&str, Tensor)>) -> ParamSet {
    let mut p = ParamSet::new();
    for (n, t) in entries {
        p.insert(n, t).unwrap();
    }
    p
}

fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..=4, 1usize..=4, 1usize..=4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_and_broadcast_add((m, k, n) in dims(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = params(vec![
            ("a", random(&mut rng, m, k, 1.0)),
            ("b", random(&mut rng, k, n, 1.0)),
            ("row", random(&mut rng, 1, n, 1.0)),
            ("col", random(&mut rng, m, 1, 1.0)),
            ("s", random(&mut rng, 1, 1, 1.0)),
        ]);
        assert_grad(&p, |g, b| {
            let y = g.matmul(b.get("a")?, b.get("b")?)?;
            let y = g.add(y, b.get("row")?)?;
            let y = g.sub(y, b.get("col")?)?;
            let y = g.mul(y, b.get("s")?)?;
            let y = g.mul(y, b.get("row")?)?;
            contract(g, y, seed)
        });
    }

    #[test]
    fn activations_and_scale((r, c, _) in dims(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = params(vec![("x", random(&mut rng, r, c, 2.0))]);
        assert_grad(&p, |g, b| {
            let x = b.get("x")?;
            let t = g.tanh(x)?;
            let u = g.gelu(x)?;
            let y = g.mul(t, u)?;
            let y = g.scale(y, -1.7)?;
            contract(g, y, seed)
        });
    }

    #[test]
    fn softmax_both_axes((r, c, _) in dims(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = params(vec![("x", random(&mut rng, r, c, 2.0))]);
        assert_grad(&p, |g, b| {
            let x = b.get("x")?;
            let s = g.softmax(x, Axis::Cols)?;
            let l = g.log_softmax(x, Axis::Rows)?;
            let y = g.add(s, l)?;
            contract(g, y, seed)
        });
    }

    #[test]
    fn reductions_and_losses((r, c, _) in dims(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t: Vec<f64> = (0..r * c).map(|_| rng.random::<f64>()).collect();
        let p = params(vec![
            ("x", random(&mut rng, r, c, 2.0)),
            ("y", random(&mut rng, r, c, 2.0)),
            ("t", Tensor::matrix(r, c, t).unwrap()),
        ]);
        assert_grad(&p, |g, b| {
            let (x, y, t) = (b.get("x")?, b.get("y")?, b.get("t")?);
            let l1 = g.mse(x, y)?;
            let l2 = g.bce_with_logits(x, t)?;
            let d = g.dot(x, y)?;
            let l3 = g.mean(d)?;
            let l4 = g.sum(y)?;
            let s = g.concat(&[l1, l2, l3, l4], Axis::Cols)?;
            contract(g, s, seed)
        });
    }

    #[test]
    fn structural_ops((r, c, k) in dims(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = params(vec![
            ("a", random(&mut rng, r, c, 1.0)),
            ("b", random(&mut rng, r, k, 1.0)),
        ]);
        assert_grad(&p, |g, b| {
            let (a, bb) = (b.get("a")?, b.get("b")?);
            let cat = g.concat(&[a, bb, a], Axis::Cols)?;
            let mid = g.slice(cat, Axis::Cols, c, k + 1)?;
            let tr = g.transpose(mid)?;
            let rows = g.concat(&[tr, tr], Axis::Rows)?;
            let part = g.slice(rows, Axis::Rows, 1, k + 1)?;
            contract(g, part, seed)
        });
    }

    #[test]
    fn normalized_similarity_cross_entropy((r, c, _) in dims(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = params(vec![
            ("a", random(&mut rng, r, c + 1, 1.0)),
            ("b", random(&mut rng, r, c + 1, 1.0)),
        ]);
        let targets: Vec<usize> = (0..r).collect();
        assert_grad(&p, |g, b| {
            let na = g.normalize_rows(b.get("a")?)?;
            let nb = g.normalize_rows(b.get("b")?)?;
            let nbt = g.transpose(nb)?;
            let sim = g.matmul(na, nbt)?;
            let sim = g.scale(sim, 1.0 / 0.1)?;
            g.cross_entropy(sim, &targets)
        });
    }

    #[test]
    fn softmax_rows_sum_to_one((r, c, _) in dims(), seed in any::<u64>(), scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let x = g.constant(random(&mut rng, r, c, scale));
        let y = g.softmax(x, Axis::Cols).unwrap();
        for i in 0..r {
            let row = g.value(y).row(i);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn repeated_backward_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::new();
        let w = g.param(random(&mut rng, 8, 8, 1.0));
        let x = g.constant(random(&mut rng, 4, 8, 1.0));
        let h = g.matmul(x, w).unwrap();
        let h = g.tanh(h).unwrap();
        let s = g.softmax(h, Axis::Cols).unwrap();
        let l = g.mean(s).unwrap();
        let l2 = g.mse(h, x).unwrap();
        let l = g.add(l, l2).unwrap();
        let grads = g.backward(l).unwrap();
        grads.get(w).unwrap().data().to_vec()
    };
    let a = run();
    let b = run();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}
