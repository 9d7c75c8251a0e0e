use neumap_diff::graph::Graph;
use neumap_diff::optim::{halving_lr, OptimKind, Optimizer};
use neumap_diff::params::ParamStore;
use neumap_diff::tensor::{matmul, Tensor};
use neumap_diff::LAYER_NORM_EPS;
use proptest::prelude::*;

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |d| Tensor::from_vec(rows, cols, d).unwrap())
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, s);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_triple_loop(
        (a, b) in (1usize..19, 1usize..21, 1usize..19)
            .prop_flat_map(|(m, k, n)| (tensor(m, k), tensor(k, n)))
    ) {
        let fast = matmul(&a, &b).unwrap();
        prop_assert!(fast.max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
    }

    #[test]
    fn softmax_rows_match_scalar_loop(x in (1usize..5, 1usize..9).prop_flat_map(|(r, c)| tensor(r, c))) {
        let mut g = Graph::new();
        let v = g.constant(x.clone()).unwrap();
        let s = g.softmax_rows(v).unwrap();
        let out = g.value(s);
        for r in 0..x.rows() {
            let row = x.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for c in 0..x.cols() {
                prop_assert!((out.get(r, c) - (row[c] - m).exp() / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_matches_scalar_loop(
        (x, gain, bias) in (1usize..5, 2usize..9)
            .prop_flat_map(|(r, c)| (tensor(r, c), tensor(1, c), tensor(1, c)))
    ) {
        let mut g = Graph::new();
        let (vx, vg, vb) = (
            g.constant(x.clone()).unwrap(),
            g.constant(gain.clone()).unwrap(),
            g.constant(bias.clone()).unwrap(),
        );
        let y = g.layer_norm(vx, vg, vb).unwrap();
        let out = g.value(y);
        let d = x.cols() as f64;
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            for c in 0..x.cols() {
                let want = (row[c] - mean) / (var + LAYER_NORM_EPS).sqrt() * gain.get(0, c) + bias.get(0, c);
                prop_assert!((out.get(r, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn halving_schedule_is_monotone(base in 1e-5f64..1.0, epoch in 0usize..500, period in 1usize..50) {
        let now = halving_lr(base, epoch, period);
        prop_assert!(halving_lr(base, epoch + 1, period) <= now);
        prop_assert_eq!(now, base * 0.5f64.powi((epoch / period) as i32));
    }
}

fn train(steps: usize) -> ParamStore {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::from_rows(&[&[0.3, -0.2], &[0.1, 0.4]]), 0);
    let frozen = store.add("frozen", Tensor::from_rows(&[&[1.0, 2.0]]), 0);
    let idle = store.add("idle", Tensor::from_rows(&[&[5.0]]), 1);
    store.set_frozen(frozen, true);
    let mut opt = Optimizer::new(OptimKind::default(), vec![0.01, 0.01]);
    let x = Tensor::from_rows(&[&[1.0, -1.0], &[0.5, 2.0], &[-0.7, 0.2]]);
    for _ in 0..steps {
        let mut g = Graph::new();
        let vx = g.constant(x.clone()).unwrap();
        let vw = g.param(&store, w).unwrap();
        let vf = g.param(&store, frozen).unwrap();
        let y = g.matmul(vx, vw).unwrap();
        let y = g.add_row(y, vf).unwrap();
        let sq = g.mul(y, y).unwrap();
        let loss = g.mean(sq).unwrap();
        g.backward(loss).unwrap();
        store.absorb(&g).unwrap();
        opt.step(&mut store).unwrap();
    }
    let _ = idle;
    store
}

#[test]
fn training_is_bit_deterministic() {
    let (a, b) = (train(25), train(25));
    for ((_, pa), (_, pb)) in a.iter().zip(b.iter()) {
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(pa.value()), bits(pb.value()), "{}", pa.name());
    }
}

#[test]
fn frozen_and_untouched_params_stay_put() {
    let store = train(10);
    let by_name = |n: &str| store.iter().find(|(_, p)| p.name() == n).unwrap().1;
    assert_eq!(by_name("frozen").value().data(), &[1.0, 2.0]);
    assert_eq!(by_name("idle").value().data(), &[5.0]);
    assert_eq!(by_name("idle").updates(), 0);
    assert_eq!(by_name("w").updates(), 10);
}
