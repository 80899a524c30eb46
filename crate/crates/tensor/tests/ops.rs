use dcmcs_tensor::gradcheck::{check_gradients, worst};
use dcmcs_tensor::{Adam, AdamConfig, Graph, Matrix, Result, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn triple_loop(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
    let mut c = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a.get(i, k) * b.get(k, j);
            }
            c.set(i, j, s);
        }
    }
    c
}

#[test]
fn matmul_5x4_by_4x3_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random(&mut rng, 5, 4);
    let b = random(&mut rng, 4, 3);
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(va, vb).unwrap();
    assert!(g.value(c).max_abs_diff(&triple_loop(&a, &b)) < 1e-12);
}

proptest! {
    #[test]
    fn matmul_matches_triple_loop(m in 1usize..=16, k in 1usize..=16, n in 1usize..=16, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, m, k);
        let b = random(&mut rng, k, n);
        prop_assert!(a.matmul(&b).unwrap().max_abs_diff(&triple_loop(&a, &b)) < 1e-12);
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..8, cols in 1usize..8, scale in 0.1f64..50.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, rows, cols).map(|v| v * scale);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = g.softmax_rows(xv);
        for r in 0..rows {
            let row = g.value(y).row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            if cols > 1 && scale < 20.0 {
                prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
            }
        }
    }

    #[test]
    fn sum_of_leaves_has_exact_unit_gradient(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let a = g.param(random(&mut rng, rows, cols));
        let b = g.param(random(&mut rng, rows, cols));
        let s = g.add(a, b).unwrap();
        let root = g.sum(s);
        g.backward(root).unwrap();
        prop_assert_eq!(g.grad(a).unwrap(), &Matrix::ones(rows, cols));
        prop_assert_eq!(g.grad(b).unwrap(), &Matrix::ones(rows, cols));
    }
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// Reduce an arbitrary-shaped output to a scalar with non-uniform weights so
/// every output entry affects the root differently.
fn weighted_total(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let (r, c) = g.shape(y);
    let w = g.constant(Matrix::from_fn(r, c, |i, j| {
        0.3 + 0.17 * i as f64 - 0.11 * j as f64
    }));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

#[test]
fn every_differentiable_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cases: Vec<(&str, Vec<Matrix<f64>>, Build)> = vec![
        (
            "matmul",
            vec![random(&mut rng, 3, 4), random(&mut rng, 4, 2)],
            Box::new(|g, x| {
                let y = g.matmul(x[0], x[1])?;
                weighted_total(g, y)
            }),
        ),
        (
            "add",
            vec![random(&mut rng, 3, 2), random(&mut rng, 3, 2)],
            Box::new(|g, x| {
                let y = g.add(x[0], x[1])?;
                weighted_total(g, y)
            }),
        ),
        (
            "sub",
            vec![random(&mut rng, 3, 2), random(&mut rng, 3, 2)],
            Box::new(|g, x| {
                let y = g.sub(x[0], x[1])?;
                weighted_total(g, y)
            }),
        ),
        (
            "mul",
            vec![random(&mut rng, 3, 2), random(&mut rng, 3, 2)],
            Box::new(|g, x| {
                let y = g.mul(x[0], x[1])?;
                weighted_total(g, y)
            }),
        ),
        (
            "add_row_vector",
            vec![random(&mut rng, 4, 3), random(&mut rng, 1, 3)],
            Box::new(|g, x| {
                let y = g.add_row_vector(x[0], x[1])?;
                weighted_total(g, y)
            }),
        ),
        (
            "scale",
            vec![random(&mut rng, 2, 3)],
            Box::new(|g, x| {
                let y = g.scale(x[0], -1.7);
                weighted_total(g, y)
            }),
        ),
        (
            "add_scalar",
            vec![random(&mut rng, 2, 3)],
            Box::new(|g, x| {
                let y = g.add_scalar(x[0], 0.4);
                let y = g.mul(y, y)?;
                weighted_total(g, y)
            }),
        ),
        (
            "scale_by",
            vec![random(&mut rng, 3, 3), random(&mut rng, 1, 1)],
            Box::new(|g, x| {
                let y = g.scale_by(x[0], x[1])?;
                weighted_total(g, y)
            }),
        ),
        (
            "exp",
            vec![random(&mut rng, 3, 3)],
            Box::new(|g, x| {
                let y = g.exp(x[0]);
                weighted_total(g, y)
            }),
        ),
        (
            "log",
            vec![random(&mut rng, 3, 3).map(|v| v.abs() + 0.2)],
            Box::new(|g, x| {
                let y = g.log(x[0]);
                weighted_total(g, y)
            }),
        ),
        (
            "relu",
            vec![random(&mut rng, 4, 4)],
            Box::new(|g, x| {
                let y = g.relu(x[0]);
                weighted_total(g, y)
            }),
        ),
        (
            "transpose",
            vec![random(&mut rng, 2, 5)],
            Box::new(|g, x| {
                let y = g.transpose(x[0]);
                weighted_total(g, y)
            }),
        ),
        (
            "concat_cols",
            vec![
                random(&mut rng, 3, 2),
                random(&mut rng, 3, 1),
                random(&mut rng, 3, 3),
            ],
            Box::new(|g, x| {
                let y = g.concat_cols(x)?;
                weighted_total(g, y)
            }),
        ),
        (
            "sum",
            vec![random(&mut rng, 3, 3)],
            Box::new(|g, x| {
                let y = g.mul(x[0], x[0])?;
                Ok(g.sum(y))
            }),
        ),
        (
            "mean",
            vec![random(&mut rng, 3, 3)],
            Box::new(|g, x| {
                let y = g.mul(x[0], x[0])?;
                Ok(g.mean(y))
            }),
        ),
        (
            "sum_rows",
            vec![random(&mut rng, 3, 4)],
            Box::new(|g, x| {
                let y = g.sum_rows(x[0]);
                weighted_total(g, y)
            }),
        ),
        (
            "sum_cols",
            vec![random(&mut rng, 3, 4)],
            Box::new(|g, x| {
                let y = g.sum_cols(x[0]);
                weighted_total(g, y)
            }),
        ),
        (
            "diag",
            vec![random(&mut rng, 4, 4)],
            Box::new(|g, x| {
                let y = g.diag(x[0])?;
                weighted_total(g, y)
            }),
        ),
        (
            "row_l2_normalize",
            vec![random(&mut rng, 4, 3)],
            Box::new(|g, x| {
                let y = g.row_l2_normalize(x[0]);
                weighted_total(g, y)
            }),
        ),
        (
            "softmax_rows",
            vec![random(&mut rng, 4, 5)],
            Box::new(|g, x| {
                let y = g.softmax_rows(x[0]);
                weighted_total(g, y)
            }),
        ),
        (
            "clamp_min",
            vec![random(&mut rng, 4, 4)],
            Box::new(|g, x| {
                let (y, _) = g.clamp_min(x[0], 0.05);
                weighted_total(g, y)
            }),
        ),
        (
            "select",
            vec![random(&mut rng, 3, 3)],
            Box::new(|g, x| {
                let e = g.exp(x[0]);
                g.select(e, 1, 2)
            }),
        ),
    ];
    for (name, inputs, build) in cases {
        let reports = check_gradients(&*build, &inputs, 1e-4).unwrap();
        let err = worst(&reports);
        assert!(err < 1e-3, "{name}: max relative error {err}");
    }
}

/// Adam written out from its defining recurrences, scalar by scalar.
fn adam_oracle(w0: f64, steps: usize, lr: f64) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
    let mut out = Vec::new();
    for t in 1..=steps {
        let g = 2.0 * w;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t as i32));
        let vh = v / (1.0 - b2.powi(t as i32));
        w -= lr * mh / (vh.sqrt() + eps);
        out.push(w);
    }
    out
}

#[test]
fn adam_trajectory_on_quadratic_matches_oracle() {
    let lr = 0.1;
    let expected = adam_oracle(1.5, 10, lr);
    let mut w = Matrix::<f64>::scalar(1.5);
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: lr,
            ..AdamConfig::default()
        },
        [(1, 1)],
    );
    for want in expected {
        let mut g = Graph::new();
        let wv = g.param(w.clone());
        let sq = g.mul(wv, wv).unwrap();
        let f = g.sum(sq);
        g.backward(f).unwrap();
        let grad = g.grad(wv).unwrap().clone();
        adam.step(&mut [&mut w], &[Some(&grad)]).unwrap();
        assert!((w.item() - want).abs() < 1e-10, "{} vs {want}", w.item());
    }
    assert_eq!(adam.step_count(), 10);
}
