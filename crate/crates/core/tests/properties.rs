//! Randomised invariants of the building blocks.

use std::collections::HashSet;

use mclrd_core::data::sample_kshot;
use mclrd_core::heads::aggregate_predictions;
use mclrd_core::router::{activation_consistency_loss, router_decorrelation_loss, ClassWeightBank, Router, RouterWeights};
use mclrd_core::{Domain, Matrix, MultimodalSample, ParamStore, Session, Tape};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-scale..scale, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn assert_simplex_rows(m: &Matrix) {
    for r in 0..m.rows() {
        let row = m.row(r);
        assert!(row.iter().all(|&p| p >= 0.0), "{row:?}");
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9, "{row:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn router_outputs_are_simplex_points(
        streams in prop::collection::vec(matrix(6, 4, 50.0), 4),
        seed in 0u64..1000,
    ) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let router = Router::new(&mut store, "r", 4, 5, 1.0, &mut rng);
        let mut s = Session::new(&store);
        let v: Vec<_> = streams.iter().map(|m| s.tape.constant(m.clone())).collect();
        let w = router.route(&mut s, [v[0], v[1]], [v[2], v[3]], 3).unwrap();
        for x in [w.unique[0], w.unique[1], w.shared] {
            assert_simplex_rows(s.tape.value(x));
        }
    }

    #[test]
    fn attention_rows_are_simplex_points(q in matrix(8, 4, 20.0), k in matrix(8, 4, 20.0)) {
        let mut t = Tape::new();
        let (qv, kv) = (t.constant(q), t.constant(k));
        let vv = t.constant(Matrix::zeros(8, 4));
        let out = t.attention(qv, kv, vv, 4, 2).unwrap();
        let probs = t.attention_probs(out).unwrap();
        for row in probs.chunks(4) {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn merge_is_linear_in_the_weights(
        outs in prop::collection::vec(matrix(6, 3, 5.0), 4),
        w1 in matrix(2, 4, 1.0),
        w2 in matrix(2, 4, 1.0),
        a in 0.0f64..1.0,
    ) {
        let mut t = Tape::new();
        let o: Vec<_> = outs.into_iter().map(|m| t.constant(m)).collect();
        let mix = w1.zip_map(&w2, |x, y| a * x + (1.0 - a) * y);
        let (v1, v2, vm) = (t.constant(w1), t.constant(w2), t.constant(mix));
        let m1 = t.merge(&o, v1, 3).unwrap();
        let m2 = t.merge(&o, v2, 3).unwrap();
        let mm = t.merge(&o, vm, 3).unwrap();
        let expect = t.value(m1).zip_map(t.value(m2), |x, y| a * x + (1.0 - a) * y);
        prop_assert!(t.value(mm).max_abs_diff(&expect) < 1e-9);
    }

    #[test]
    fn router_decorrelation_is_nonnegative(logits in prop::collection::vec(matrix(3, 6, 30.0), 3)) {
        let mut t = Tape::new();
        let v: Vec<_> = logits.into_iter().map(|m| { let c = t.constant(m); t.softmax(c).unwrap() }).collect();
        let w = RouterWeights { unique: [v[0], v[1]], shared: v[2] };
        let l = router_decorrelation_loss(&mut t, &w).unwrap();
        prop_assert!(t.scalar(l) >= 0.0);
    }

    #[test]
    fn activation_consistency_ignores_a_consistent_block_order(
        w in matrix(4, 9, 1.0),
        means in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 9), 2),
        perm in Just([0usize, 1, 2]).prop_shuffle(),
    ) {
        let permute = |row: &[f64]| -> Vec<f64> { perm.iter().flat_map(|&b| row[3 * b..3 * b + 3].to_vec()).collect() };
        let loss = |w: &Matrix, means: &[Vec<f64>]| {
            let mut bank = ClassWeightBank::new(2, 9, 0.9, false);
            for (c, m) in means.iter().enumerate() {
                bank.update(m, c).unwrap();
            }
            let mut t = Tape::new();
            let v = t.constant(w.clone());
            let l = activation_consistency_loss(&mut t, v, &[(1, 0), (3, 1), (2, 1)], &mut bank).unwrap();
            t.scalar(l)
        };
        let wp = Matrix::from_rows(&(0..w.rows()).map(|r| permute(w.row(r))).collect::<Vec<_>>());
        let mp: Vec<Vec<f64>> = means.iter().map(|m| permute(m)).collect();
        prop_assert!((loss(&w, &means) - loss(&wp, &mp)).abs() < 1e-12);
    }

    #[test]
    fn aggregation_ignores_per_head_logit_offsets(
        heads in prop::collection::vec(matrix(5, 4, 10.0), 3),
        offsets in prop::collection::vec(-100.0f64..100.0, 3),
    ) {
        let refs: Vec<&Matrix> = heads.iter().collect();
        let base = aggregate_predictions(&refs).unwrap();
        let shifted: Vec<Matrix> = heads.iter().zip(&offsets).map(|(h, &o)| h.map(|x| x + o)).collect();
        let refs: Vec<&Matrix> = shifted.iter().collect();
        prop_assert_eq!(aggregate_predictions(&refs).unwrap(), base);
    }

    #[test]
    fn kshot_split_is_a_partition_without_leaks(
        classes in 2usize..6,
        per_class in 2usize..8,
        k in 1usize..4,
        seed in 0u64..1000,
    ) {
        prop_assume!(per_class > k);
        let pool: Vec<MultimodalSample> = (0..classes * per_class)
            .map(|i| MultimodalSample {
                id: format!("s{i}"),
                rgb: Matrix::zeros(2, 1),
                flow: Matrix::zeros(2, 1),
                label: i % classes,
                domain: Domain::Target,
            })
            .collect();
        let (train, test) = sample_kshot(&pool, k, seed).unwrap();
        for c in 0..classes {
            prop_assert_eq!(train.iter().filter(|s| s.label == c).count(), k);
        }
        let a: HashSet<&str> = train.iter().map(|s| s.id.as_str()).collect();
        let b: HashSet<&str> = test.iter().map(|s| s.id.as_str()).collect();
        prop_assert!(a.is_disjoint(&b));
        prop_assert_eq!(a.len() + b.len(), pool.len());
    }

    #[test]
    fn shared_subexpressions_accumulate_gradients(x in matrix(3, 3, 3.0), w in matrix(3, 3, 1.0)) {
        let grad_of = |twice: bool| {
            let mut t = Tape::new();
            let xv = t.var(x.clone());
            let wv = t.constant(w.clone());
            let f = |t: &mut Tape| {
                let h = t.matmul(xv, wv).unwrap();
                let g = t.gelu(h);
                t.sum_all(g)
            };
            let y = if twice {
                let (a, b) = (f(&mut t), f(&mut t));
                t.add(a, b).unwrap()
            } else {
                let a = f(&mut t);
                t.scale(a, 2.0)
            };
            t.backward(y).unwrap();
            t.grad(xv).unwrap().clone()
        };
        prop_assert!(grad_of(true).max_abs_diff(&grad_of(false)) < 1e-12);
    }

    #[test]
    fn primitives_stay_finite_on_large_inputs(x in matrix(6, 4, 1e6), g in matrix(1, 4, 1e6)) {
        let mut t = Tape::new();
        let xv = t.var(x);
        let gv = t.constant(g.clone());
        let bv = t.constant(g);
        let mut outs = vec![
            t.softmax(xv).unwrap(),
            t.layer_norm(xv, gv, bv).unwrap(),
            t.gelu(xv),
            t.relu(xv),
            t.segment_mean(xv, 3).unwrap(),
        ];
        let other = t.scale(xv, -0.5);
        outs.push(t.segment_cosine(xv, other, 3).unwrap());
        outs.push(t.cross_entropy(xv, &[0, 1, 2, 3, 0, 1]).unwrap());
        for o in outs {
            prop_assert!(t.value(o).is_finite());
        }
    }
}
