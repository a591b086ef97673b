use proptest::prelude::*;
use radial_bnn::engine::{gradcheck, EngineError, Graph, Rng, Tensor, Var};
use radial_bnn::stats::pearson;

const TOL: f64 = 1e-6;
const EPS: f64 = 1e-4;

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

/// Moves every entry at least `gap` away from zero, keeping its sign.
fn away_from_zero(v: &[f64], gap: f64) -> Vec<f64> {
    v.iter().map(|x| x.signum() * (gap + x.abs())).collect()
}

fn t(shape: &[usize], v: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Contracts `y` against fixed weights so every output coordinate matters.
fn contract(g: &mut Graph, y: Var) -> Result<Var, EngineError> {
    let shape = g.value(y).shape().to_vec();
    let w = Tensor::from_fn(&shape, |i| 0.3 + 0.17 * i as f64);
    let c = g.constant(w);
    let p = g.mul(y, c)?;
    Ok(g.sum(p))
}

fn check_unary(x: Tensor, op: impl Fn(&mut Graph, Var) -> Result<Var, EngineError>) -> f64 {
    gradcheck(
        |g, v| {
            let y = op(g, v[0])?;
            contract(g, y)
        },
        &[x],
        EPS,
    )
    .unwrap()
}

fn check_binary(a: Tensor, b: Tensor, op: impl Fn(&mut Graph, Var, Var) -> Result<Var, EngineError>) -> f64 {
    gradcheck(
        |g, v| {
            let y = op(g, v[0], v[1])?;
            contract(g, y)
        },
        &[a, b],
        EPS,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn smooth_unary_primitives_gradcheck(v in values(6)) {
        let x = t(&[2, 3], v.clone());
        prop_assert!(check_unary(x.clone(), |g, a| Ok(g.exp(a))) < TOL);
        prop_assert!(check_unary(x.clone(), |g, a| Ok(g.softplus(a))) < TOL);
        prop_assert!(check_unary(x.clone(), |g, a| Ok(g.square(a))) < TOL);
        prop_assert!(check_unary(x.clone(), |g, a| Ok(g.scale(a, -1.7))) < TOL);
        prop_assert!(check_unary(x.clone(), |g, a| g.log_softmax(a)) < TOL);
        prop_assert!(check_unary(x.clone(), |g, a| Ok(g.mean(a))) < TOL);
        prop_assert!(check_unary(x, |g, a| g.gather_rows(a, &[1, 0, 1])) < TOL);
    }

    #[test]
    fn domain_restricted_primitives_gradcheck(v in values(6)) {
        let pos = t(&[2, 3], v.iter().map(|x| 0.5 + x.abs()).collect());
        prop_assert!(check_unary(pos.clone(), |g, a| g.ln(a)) < TOL);
        prop_assert!(check_unary(pos, |g, a| g.sqrt(a)) < TOL);
        let off = t(&[2, 3], away_from_zero(&v, 0.1));
        prop_assert!(check_unary(off.clone(), |g, a| Ok(g.relu(a))) < TOL);
        prop_assert!(check_unary(off, |g, a| g.norm(a, 1)) < TOL);
    }

    #[test]
    fn binary_primitives_gradcheck(a in values(6), b in values(6), c in values(3)) {
        let (x, y) = (t(&[2, 3], a), t(&[2, 3], b.clone()));
        prop_assert!(check_binary(x.clone(), y.clone(), |g, p, q| g.add(p, q)) < TOL);
        prop_assert!(check_binary(x.clone(), y.clone(), |g, p, q| g.sub(p, q)) < TOL);
        prop_assert!(check_binary(x.clone(), y.clone(), |g, p, q| g.mul(p, q)) < TOL);
        prop_assert!(check_binary(x.clone(), y.clone(), |g, p, q| g.matmul_bt(p, q)) < TOL);
        prop_assert!(check_binary(x.clone(), t(&[3, 2], b.clone()), |g, p, q| g.matmul(p, q)) < TOL);
        prop_assert!(check_binary(x.clone(), t(&[3], c), |g, p, q| g.add_bias(p, q)) < TOL);
        let denom = t(&[2, 3], b.iter().map(|v| 0.5 + v.abs()).collect());
        prop_assert!(check_binary(x, denom, |g, p, q| g.div(p, q)) < TOL);
    }

    #[test]
    fn backward_is_linear(a in values(4), b in values(4), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let f = |g: &mut Graph, x: Var, y: Var| -> Var {
            let e = g.exp(x);
            let p = g.mul(e, y).unwrap();
            g.sum(p)
        };
        let h = |g: &mut Graph, x: Var, y: Var| -> Var {
            let s = g.square(x);
            let q = g.mul(s, y).unwrap();
            let r = g.softplus(q);
            g.sum(r)
        };
        let grads = |build: &dyn Fn(&mut Graph, Var, Var) -> Var| {
            let mut g = Graph::new();
            let x = g.param(t(&[4], a.clone()));
            let y = g.param(t(&[4], b.clone()));
            let out = build(&mut g, x, y);
            g.backward(out).unwrap();
            [g.grad_or_zeros(x), g.grad_or_zeros(y)]
        };
        let gf = grads(&f);
        let gh = grads(&h);
        let combined = grads(&|g, x, y| {
            let fv = f(g, x, y);
            let hv = h(g, x, y);
            let fa = g.scale(fv, alpha);
            let hb = g.scale(hv, beta);
            g.add(fa, hb).unwrap()
        });
        for k in 0..2 {
            for i in 0..4 {
                let want = alpha * gf[k].data()[i] + beta * gh[k].data()[i];
                let got = combined[k].data()[i];
                prop_assert!((got - want).abs() <= 1e-12 * (1.0 + want.abs()), "{got} vs {want}");
            }
        }
    }

    #[test]
    fn split_is_a_pure_function_of_seed_and_tag(seed in any::<u64>(), tag in any::<u64>()) {
        let root = Rng::new(seed);
        let mut a = root.split(tag);
        let mut b = Rng::new(seed).split(tag);
        for _ in 0..16 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
    }
}

#[test]
fn split_streams_are_uncorrelated() {
    let root = Rng::new(2024);
    let n = 100_000;
    for (ta, tb) in [(0, 1), (1, 2), (7, 1000), (3, u64::MAX)] {
        let mut a = root.split(ta);
        let mut b = root.split(tb);
        let xs: Vec<f64> = (0..n).map(|_| a.normal()).collect();
        let ys: Vec<f64> = (0..n).map(|_| b.normal()).collect();
        let r = pearson(&xs, &ys);
        assert!(r.abs() < 0.02, "tags {ta},{tb}: correlation {r}");
    }
}
