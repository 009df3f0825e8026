use flexmesh::hooks::{flatten, unflatten, Opaque, TreeNode};
use flexmesh::induction::induction_score;
use flexmesh::mesh::{launch, Axis, DeviceMesh};
use flexmesh::parallel::DistTensor;
use flexmesh::tensor::{cross_entropy_per_token, kl_divergence};
use flexmesh::Tensor64;
use proptest::prelude::*;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor64> {
    let n = shape.iter().product::<usize>();
    prop::collection::vec(-5.0f64..5.0, n).prop_map(move |d| Tensor64::new(shape.clone(), d).unwrap())
}

fn matrix() -> impl Strategy<Value = Tensor64> {
    (1usize..6, 2usize..8).prop_flat_map(|(r, c)| tensor(vec![r, c]))
}

proptest! {
    #[test]
    fn split_then_concat_is_identity(
        t in (1usize..4, 1usize..4, 1usize..4).prop_flat_map(|(a, b, c)| tensor(vec![2 * a, 2 * b, 2 * c])),
        dim in 0usize..3,
    ) {
        let parts = t.split(dim, 2).unwrap();
        prop_assert_eq!(Tensor64::concat(&parts, dim).unwrap(), t);
    }

    #[test]
    fn softmax_ignores_row_shift(x in matrix(), c in -50.0f64..50.0) {
        let a = x.softmax_rows().unwrap();
        let b = x.map(|v| v + c).softmax_rows().unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
        let cols = x.dim(1);
        for row in a.data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn cross_entropy_ignores_row_shift(x in matrix(), c in -50.0f64..50.0, seed in any::<u64>()) {
        let v = x.dim(1);
        let targets: Vec<usize> = (0..x.dim(0)).map(|i| (seed as usize).wrapping_add(i * 7) % v).collect();
        let a = cross_entropy_per_token(&x, &targets).unwrap();
        let b = cross_entropy_per_token(&x.map(|z| z + c), &targets).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() <= 1e-10);
        prop_assert!(a.data().iter().all(|&l| l >= 0.0));
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_equal(x in matrix(), y in matrix()) {
        let p = x.softmax_rows().unwrap();
        prop_assert!(kl_divergence(&p, &p).unwrap().value.abs() <= 1e-12);
        if x.shape() == y.shape() {
            let q = y.softmax_rows().unwrap();
            prop_assert!(kl_divergence(&p, &q).unwrap().value >= -1e-12);
        }
    }

    #[test]
    fn induction_score_stays_in_unit_interval(k in 1usize..12, raw in prop::collection::vec(0.0f64..1.0, 576)) {
        let n = 2 * k;
        let mut a = Tensor64::zeros(&[n, n]).unwrap();
        for i in 0..n {
            let w: Vec<f64> = (0..=i).map(|j| raw[(i * n + j) % raw.len()] + 1e-3).collect();
            let z: f64 = w.iter().sum();
            for (j, x) in w.iter().enumerate() {
                a.set(&[i, j], x / z);
            }
        }
        let s = induction_score(&a, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&s), "{}", s);
    }

    #[test]
    fn tree_roundtrip(ls in prop::collection::vec(0usize..3, 1..6)) {
        let mk = |i: usize| TreeNode::Tensor(DistTensor::replicated(Tensor64::full(&[2], i as f64).unwrap()));
        let mut items = Vec::new();
        for (i, &kind) in ls.iter().enumerate() {
            items.push(match kind {
                0 => mk(i),
                1 => TreeNode::Opaque(Opaque::new(i)),
                _ => TreeNode::Map(vec![("a".into(), mk(i)), ("b".into(), TreeNode::List(vec![mk(i + 100)]))]),
            });
        }
        let tree = TreeNode::List(items);
        let (leaves, def) = flatten(tree.clone());
        prop_assert_eq!(def.num_leaves(), leaves.len());
        prop_assert_eq!(unflatten(&def, leaves).unwrap(), tree);
    }

    #[test]
    fn tensor_file_roundtrip(t in matrix()) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t");
        t.save(&p).unwrap();
        prop_assert_eq!(Tensor64::load(&p).unwrap(), t);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn all_gather_then_scatter_is_identity(
        tp in 1usize..4,
        dp in 1usize..3,
        dim in 0usize..2,
        seed in 0u64..1000,
    ) {
        let mesh = DeviceMesh::new(dp, tp, 1).unwrap();
        let out = launch(&mesh, |w| {
            let r = w.rank() as f64;
            let local = Tensor64::from_fn(&[2, 3], |i| r * 100.0 + i as f64 + seed as f64).unwrap();
            let g = w.all_gather(Axis::Tp, &local, dim)?;
            let g = w.all_gather(Axis::Dp, &g, dim)?;
            let s = w.scatter(Axis::Dp, &g, dim)?;
            let s = w.scatter(Axis::Tp, &s, dim)?;
            Ok(s == local && g.dim(dim) == [2, 3][dim] * tp * dp)
        })
        .unwrap();
        prop_assert!(out.results.iter().all(|&ok| ok));
    }
}
