use mmfuse_numcore::{finite_difference_check, FdOptions, Graph, ParamStore, Result, Tensor, Var};
use proptest::prelude::*;

fn vals(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

/// Checks d/dx sum(w ∘ op(x)) against central differences.
fn check_unary(
    shape: Vec<usize>,
    x: Vec<f64>,
    op: impl Fn(&mut Graph, Var) -> Result<Var>,
) -> f64 {
    let mut store = ParamStore::new();
    let id = store.add("x", "t", Tensor::new(shape, x).unwrap()).unwrap();
    let weights = {
        let mut g = Graph::new(&store);
        let xv = g.param(id);
        let y = op(&mut g, xv).unwrap();
        let n = g.value(y).len();
        Tensor::new(
            g.shape(y).to_vec(),
            (0..n).map(|i| 0.3 + ((i * 7919) % 13) as f64 / 10.0).collect(),
        )
        .unwrap()
    };
    let opts = FdOptions {
        max_coords: 64,
        ..FdOptions::default()
    };
    let report = finite_difference_check(
        &mut store,
        |g| {
            let xv = g.param(id);
            let y = op(g, xv)?;
            let w = g.constant(weights.clone());
            let p = g.mul(y, w)?;
            g.sum(p)
        },
        &opts,
    )
    .unwrap();
    report.max_rel_error()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn smooth_ops_match_finite_differences(x in vals(12)) {
        let tol = 1e-4;
        let e = check_unary(vec![3, 4], x.clone(), |g, v| g.softmax(v, 1));
        prop_assert!(e <= tol, "rel err {}", e);
        let e = check_unary(vec![3, 4], x.clone(), |g, v| g.softmax(v, 0));
        prop_assert!(e <= tol, "rel err {}", e);
        let e = check_unary(vec![3, 4], x.clone(), |g, v| g.sigmoid(v));
        prop_assert!(e <= tol, "rel err {}", e);
        let e = check_unary(vec![3, 4], x.clone(), |g, v| g.gelu(v));
        prop_assert!(e <= tol, "rel err {}", e);
        let e = check_unary(vec![3, 4], x.clone(), |g, v| g.tanh(v));
        prop_assert!(e <= tol, "rel err {}", e);
        let e = check_unary(vec![3, 4], x.clone(), |g, v| g.layer_norm(v, 1e-5));
        prop_assert!(e <= tol, "rel err {}", e);
        if x.chunks(4).all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-2) {
            let e = check_unary(vec![3, 4], x.clone(), |g, v| g.l2_normalize(v));
            prop_assert!(e <= tol, "rel err {}", e);
        }
        let e = check_unary(vec![3, 4], x.clone(), |g, v| g.mean_axis(v, 0));
        prop_assert!(e <= tol, "rel err {}", e);
        let e = check_unary(vec![3, 4], x.clone(), |g, v| g.sum_axis(v, 1));
        prop_assert!(e <= tol, "rel err {}", e);
        let e = check_unary(vec![2, 3, 2], x.clone(), |g, v| g.permute(v, &[2, 0, 1]));
        prop_assert!(e <= tol, "rel err {}", e);
        let e = check_unary(vec![3, 4], x.clone(), |g, v| g.slice(v, 1, 1, 2));
        prop_assert!(e <= tol, "rel err {}", e);
        let e = check_unary(vec![3, 4], x.clone(), |g, v| {
            let a = g.slice(v, 0, 0, 1)?;
            g.concat(&[v, a, v], 0)
        });
        prop_assert!(e <= tol, "rel err {}", e);
        let e = check_unary(vec![3, 4], x.clone(), |g, v| {
            let vt = g.transpose(v, 0, 1)?;
            g.matmul(v, vt)
        });
        prop_assert!(e <= tol, "rel err {}", e);
        let e = check_unary(vec![2, 2, 3], x.clone(), |g, v| {
            let vt = g.transpose(v, 1, 2)?;
            g.matmul(v, vt)
        });
        prop_assert!(e <= tol, "rel err {}", e);
        let e = check_unary(vec![3, 4], x.clone(), |g, v| {
            let row = g.slice(v, 0, 0, 1)?;
            let row = g.reshape(row, &[4])?;
            let s = g.sub(v, row)?;
            g.mul(s, v)
        });
        prop_assert!(e <= tol, "rel err {}", e);
        let e = check_unary(vec![4, 3], x.clone(), |g, v| g.gather_rows(v, &[2, 0, 2]));
        prop_assert!(e <= tol, "rel err {}", e);
        let e = check_unary(vec![2, 6], x.clone(), |g, v| {
            let r = g.reshape(v, &[2, 2, 3])?;
            g.masked_softmax(r, &[true, false, true, true, true, false], 2)
        });
        prop_assert!(e <= tol, "rel err {}", e);
        let e = check_unary(vec![3, 4], x, |g, v| {
            let sq = g.slice(v, 1, 0, 3)?;
            g.diag(sq)
        });
        prop_assert!(e <= tol, "rel err {}", e);
    }

    #[test]
    fn kinked_ops_away_from_ties(x in prop::collection::btree_set(-400i32..400, 12)) {
        // distinct values spaced ≥ 5e-3 apart keep max/relu away from kinks
        let x: Vec<f64> = x.into_iter().map(|v| (f64::from(v) + 0.5) * 5e-3).collect();
        let mut shuffled = x.clone();
        shuffled.reverse();
        shuffled.swap(1, 7);
        let e = check_unary(vec![3, 4], shuffled.clone(), |g, v| g.max_axis(v, 0));
        prop_assert!(e <= 1e-4, "rel err {}", e);
        let e = check_unary(vec![3, 4], shuffled, |g, v| g.relu(v));
        prop_assert!(e <= 1e-4, "rel err {}", e);
    }

    #[test]
    fn softmax_rows_are_distributions(x in prop::collection::vec(-30.0f64..30.0, 20)) {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let v = g.constant(Tensor::new(vec![4, 5], x).unwrap());
        let y = g.softmax(v, 1).unwrap();
        for row in g.value(y).chunks(5) {
            prop_assert!(row.iter().all(|&p| p > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn l2_normalize_gives_unit_rows(x in prop::collection::vec(-1e3f64..1e3, 12)) {
        prop_assume!(x.chunks(4).all(|r| r.iter().any(|&v| v != 0.0)));
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let v = g.constant(Tensor::new(vec![3, 4], x).unwrap());
        let y = g.l2_normalize(v).unwrap();
        for row in g.value(y).chunks(4) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic(x in vals(16)) {
        let s = ParamStore::new();
        let run = || {
            let mut g = Graph::new(&s);
            let v = g.constant(Tensor::new(vec![4, 4], x.clone()).unwrap());
            let a = g.gelu(v).unwrap();
            let b = g.matmul(a, v).unwrap();
            let c = g.softmax(b, 1).unwrap();
            g.value(c).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }
}

#[test]
fn gradients_match_shapes_of_reachable_nodes() {
    let s = ParamStore::new();
    let mut g = Graph::new(&s);
    let a = g.variable(Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap());
    let b = g.variable(Tensor::vector(vec![1.0, -1.0, 2.0]));
    let c = g.mul(a, b).unwrap();
    let d = g.softmax(c, 1).unwrap();
    let l = g.sum(d).unwrap();
    g.backward(l).unwrap();
    for v in [a, b, c, d, l] {
        assert_eq!(g.grad(v).unwrap().len(), g.value(v).len());
    }
}
