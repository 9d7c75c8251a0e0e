use neumap_diff::gradcheck::{check, GradCheckReport};
use neumap_diff::graph::{Graph, Var};
use neumap_diff::nn::{mlp_forward, AffineVars};
use neumap_diff::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Build = dyn Fn(&mut Graph, &[Var]) -> Var;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

fn run(point: &[Tensor], build: &Build, rel: f64) -> GradCheckReport {
    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|t| g.input(t.clone()).unwrap()).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars.iter().map(|v| g.grad(*v)).collect();
    let names: Vec<String> = (0..point.len()).map(|i| format!("x{i}")).collect();
    let report = check(
        &names,
        point,
        &analytic,
        1e-5,
        rel,
        1e-10,
        |ts| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
            let loss = build(&mut g, &vars);
            g.value(loss).item()
        },
        |_, _, _| false,
    );
    assert!(report.passed(), "{:?}", report.failures);
    report
}

/// Reduces any tensor to a scalar through fixed random weights so every
/// output entry carries a distinct upstream gradient.
fn weighted(g: &mut Graph, x: Var, seed: u64) -> Var {
    let (r, c) = g.shape(x);
    let w = random(&mut ChaCha8Rng::seed_from_u64(seed), r, c, -1.0, 1.0);
    g.dot_const(x, w).unwrap()
}

#[test]
fn matmul_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let point = [random(&mut rng, 5, 7, -1.0, 1.0), random(&mut rng, 7, 3, -1.0, 1.0)];
    let r = run(
        &point,
        &|g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            weighted(g, y, 9)
        },
        1e-6,
    );
    assert_eq!(r.checked, 35 + 21);
}

#[test]
fn two_layer_mlp_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let point = [
        random(&mut rng, 4, 6, -1.0, 1.0),
        random(&mut rng, 6, 8, -0.5, 0.5),
        random(&mut rng, 1, 8, 0.1, 0.3),
        random(&mut rng, 8, 3, -0.5, 0.5),
        random(&mut rng, 1, 3, -0.1, 0.1),
    ];
    run(
        &point,
        &|g, v| {
            let layers = [
                AffineVars { weight: v[1], bias: v[2] },
                AffineVars { weight: v[3], bias: v[4] },
            ];
            let y = mlp_forward(g, v[0], &layers).unwrap();
            let sq = g.mul(y, y).unwrap();
            g.mean(sq).unwrap()
        },
        1e-5,
    );
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pos = [random(&mut rng, 3, 4, 0.5, 2.0)];
    run(&pos, &|g, v| { let y = g.ln(v[0]).unwrap(); weighted(g, y, 1) }, 1e-6);
    run(&pos, &|g, v| { let y = g.abs(v[0]).unwrap(); weighted(g, y, 2) }, 1e-6);
    run(&pos, &|g, v| { let y = g.clamp(v[0], 0.0, 5.0).unwrap(); weighted(g, y, 3) }, 1e-6);
    let any = [random(&mut rng, 3, 4, -2.0, 2.0)];
    run(&any, &|g, v| { let y = g.sigmoid(v[0]).unwrap(); weighted(g, y, 4) }, 1e-6);
    run(&any, &|g, v| { let y = g.mul_scalar(v[0], -1.5).unwrap(); weighted(g, y, 5) }, 1e-6);
    run(&any, &|g, v| { let y = g.add_scalar(v[0], 0.25).unwrap(); let y = g.mul(y, y).unwrap(); g.sum(y).unwrap() }, 1e-6);
}

#[test]
fn binary_and_broadcast_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pair = [random(&mut rng, 3, 4, -1.0, 1.0), random(&mut rng, 3, 4, -1.0, 1.0)];
    run(&pair, &|g, v| { let y = g.sub(v[0], v[1]).unwrap(); let y = g.mul(y, v[0]).unwrap(); weighted(g, y, 6) }, 1e-6);
    run(&pair, &|g, v| { let y = g.matmul_nt(v[0], v[1]).unwrap(); weighted(g, y, 7) }, 1e-6);
    let row = [random(&mut rng, 3, 4, -1.0, 1.0), random(&mut rng, 1, 4, -1.0, 1.0)];
    run(&row, &|g, v| { let y = g.add_row(v[0], v[1]).unwrap(); let y = g.mul(y, y).unwrap(); weighted(g, y, 8) }, 1e-6);
    let col = [random(&mut rng, 3, 4, -1.0, 1.0), random(&mut rng, 3, 1, -1.0, 1.0)];
    run(&col, &|g, v| { let y = g.scale_rows(v[0], v[1]).unwrap(); weighted(g, y, 9) }, 1e-6);
}

#[test]
fn structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = [random(&mut rng, 4, 5, -1.0, 1.0)];
    run(&x, &|g, v| { let y = g.gather_rows(v[0], &[2, 0, 2, 3]).unwrap(); weighted(g, y, 10) }, 1e-6);
    run(&x, &|g, v| { let y = g.col_slice(v[0], 1, 3).unwrap(); weighted(g, y, 11) }, 1e-6);
    run(&x, &|g, v| { let y = g.row_norm(v[0]).unwrap(); weighted(g, y, 12) }, 1e-6);
    run(&x, &|g, v| { let y = g.softmax_rows(v[0]).unwrap(); weighted(g, y, 13) }, 1e-6);
}

#[test]
fn layer_norm_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let point = [
        random(&mut rng, 3, 6, -1.0, 1.0),
        random(&mut rng, 1, 6, 0.5, 1.5),
        random(&mut rng, 1, 6, -0.5, 0.5),
    ];
    run(
        &point,
        &|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2]).unwrap();
            weighted(g, y, 14)
        },
        1e-6,
    );
}
