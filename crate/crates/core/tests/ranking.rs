use mmfuse::retrieval::{compute_metrics, rank_of, ranking, search, Gallery, MetricReport, Precision};
use mmfuse::scoring::{margin_rank_loss, margin_rank_loss_graph, similarity_matrix};
use mmfuse::numcore::{finite_difference_check, FdOptions, Graph, NumError, ParamStore, Tensor};
use proptest::prelude::*;

fn square(max: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2..max).prop_flat_map(|n| prop::collection::vec(prop::collection::vec(-4i8..4, n), n))
        .prop_map(|m| m.into_iter().map(|r| r.into_iter().map(|v| f64::from(v) * 0.25).collect()).collect())
}

proptest! {
    #[test]
    fn rank_matches_position_in_ranking(row in prop::collection::vec(-3i8..3, 1..30), g in any::<prop::sample::Index>()) {
        let scores: Vec<f64> = row.into_iter().map(f64::from).collect();
        let g = g.index(scores.len());
        let pos = ranking(&scores).iter().position(|&j| j == g).unwrap();
        prop_assert_eq!(rank_of(&scores, g), pos + 1);
    }

    #[test]
    fn recalls_are_monotone_and_bounded(s in square(24)) {
        let truth: Vec<usize> = (0..s.len()).collect();
        let m = compute_metrics(&s, &truth).unwrap();
        prop_assert!(0.0 <= m.r1 && m.r1 <= m.r5 && m.r5 <= m.r10 && m.r10 <= 100.0);
        prop_assert!(m.mdr >= 1.0 && m.mnr >= 1.0 && m.mdr <= s.len() as f64);
    }

    #[test]
    fn loss_is_non_negative_and_relabel_invariant(s in square(10), margin in 0.0f64..0.5, seed in any::<u64>()) {
        let l = margin_rank_loss(&s, margin).unwrap();
        prop_assert!(l >= 0.0);
        // the same permutation on both axes keeps pairs aligned
        let n = s.len();
        let mut p: Vec<usize> = (0..n).collect();
        let mut x = seed;
        for i in (1..n).rev() {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1);
            p.swap(i, (x >> 33) as usize % (i + 1));
        }
        let t: Vec<Vec<f64>> = p.iter().map(|&i| p.iter().map(|&j| s[i][j]).collect()).collect();
        prop_assert!((margin_rank_loss(&t, margin).unwrap() - l).abs() < 1e-12);
    }
}

#[test]
fn perfect_separation_gives_zero_loss() {
    let s: Vec<Vec<f64>> = (0..5).map(|i| (0..5).map(|j| if i == j { 1.0 } else { 0.9 }).collect()).collect();
    assert_eq!(margin_rank_loss(&s, 0.05).unwrap(), 0.0);
    assert!(margin_rank_loss(&s, 0.2).unwrap() > 0.0);
}

#[test]
fn loss_matches_hand_computed_value() {
    let s = vec![vec![0.5, 0.6], vec![0.1, 0.2]];
    // i=0,j=1: relu(0.6-0.5+0.1)=0.2 and relu(0.1-0.5+0.1)=0
    // i=1,j=0: relu(0.1-0.2+0.1)=0 and relu(0.6-0.2+0.1)=0.5
    let l = margin_rank_loss(&s, 0.1).unwrap();
    assert!((l - 0.35).abs() < 1e-12, "{l}");
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut store = ParamStore::new();
    let data = vec![0.3, -0.2, 0.5, 0.11, 0.42, -0.07, 0.25, 0.05, 0.61];
    let id = store.add("s", "scores", Tensor::new(vec![3, 3], data).unwrap()).unwrap();
    let report = finite_difference_check(
        &mut store,
        |g| {
            let s = g.param(id);
            margin_rank_loss_graph(g, s, 0.2).map_err(|e| NumError::InvalidArgument {
                op: "loss",
                msg: e.to_string(),
            })
        },
        &FdOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn metrics_reject_bad_truth() {
    let s = vec![vec![1.0, 0.0]];
    assert!(compute_metrics(&s, &[2]).is_err());
    assert!(compute_metrics(&s, &[0, 1]).is_err());
    assert!(MetricReport::from_ranks(&[]).is_err());
}

#[test]
fn gallery_roundtrip_and_search() {
    let rows = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.5, 0.75, 0.0]];
    let g = Gallery {
        ids: vec!["a".into(), "b".into(), "c".into()],
        dim: 3,
        rows: rows.clone(),
        checkpoint_id: "file:0123".into(),
        config_hash: 42,
        precision: Precision::Single,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.mmgl");
    g.save(&path).unwrap();
    let back = Gallery::load(&path).unwrap();
    assert_eq!(back, g);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(search(r, &back, 1).unwrap()[0].0, g.ids[i]);
    }
    let top = search(&[0.0, 1.0, 0.0], &back, 5).unwrap();
    assert_eq!(top.iter().map(|t| t.0.as_str()).collect::<Vec<_>>(), ["b", "c", "a"]);
    assert!(search(&[1.0, 0.0], &back, 1).is_err());
    assert!(search(&[1.0, 0.0, 0.0], &back, 0).is_err());

    std::fs::write(&path, b"MMGLjunk").unwrap();
    assert!(Gallery::load(&path).is_err());
}

#[test]
fn similarity_matrix_is_rectangular() {
    let t = vec![vec![1.0, 2.0]; 3];
    let v = vec![vec![0.5, 0.5]; 5];
    let s = similarity_matrix(&t, &v).unwrap();
    assert_eq!((s.len(), s[0].len()), (3, 5));
    assert!(similarity_matrix(&t, &[vec![1.0]]).is_err());
}

#[test]
fn graph_and_plain_losses_agree() {
    let s = vec![vec![0.2, 0.9, -0.3], vec![0.4, 0.1, 0.0], vec![0.7, 0.2, 0.5]];
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let v = g.constant(Tensor::new(vec![3, 3], s.concat()).unwrap());
    let l = margin_rank_loss_graph(&mut g, v, 0.05).unwrap();
    assert_eq!(g.scalar(l), margin_rank_loss(&s, 0.05).unwrap());
}
