//! Shared fixtures and explicit-loop reference implementations.
#![allow(dead_code)]

use dcmcs_core::model::{Architecture, DcmcsModel, ForwardOutputs, ModelConfig, ParamGroup};
use dcmcs_tensor::gradcheck::{central_difference, relative_error};
use dcmcs_tensor::{Graph, Matrix, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| r.random_range(lo..hi))
}

/// Random row-stochastic matrix with strictly positive entries.
pub fn stochastic(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    let mut m = uniform(r, rows, cols, -2.0, 2.0);
    for i in 0..rows {
        let row = m.row_mut(i);
        let total: f64 = row.iter().map(|x| x.exp()).sum();
        for x in row.iter_mut() {
            *x = x.exp() / total;
        }
    }
    m
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        hidden_dims: vec![5, 4],
        latent_dim: 6,
        semantic_hidden: 5,
        instance_dim: 4,
        ..ModelConfig::default()
    }
}

pub fn tiny_arch(view_dims: Vec<usize>, k: usize) -> Architecture {
    Architecture::new(view_dims, k, tiny_config()).unwrap()
}

pub fn col(m: &Matrix<f64>, j: usize) -> Vec<f64> {
    (0..m.rows()).map(|i| m.get(i, j)).collect()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt().max(1e-12) * nb.sqrt().max(1e-12))
}

pub fn reconstruction(xs: &[Matrix<f64>], recs: &[Matrix<f64>]) -> f64 {
    let mut total = 0.0;
    for (x, r) in xs.iter().zip(recs) {
        for i in 0..x.rows() {
            for j in 0..x.cols() {
                let d = x.get(i, j) - r.get(i, j);
                total += d * d;
            }
        }
    }
    total
}

pub fn entropy(cs: &[Matrix<f64>], c_hat: &Matrix<f64>) -> f64 {
    let mut h = 0.0;
    for m in cs.iter().chain(std::iter::once(c_hat)) {
        let n = m.rows() as f64;
        for j in 0..m.cols() {
            let mut p = 0.0;
            for i in 0..m.rows() {
                p += m.get(i, j);
            }
            p /= n;
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
    }
    h
}

/// Cluster-level loss with the same denominator floor as the library.
pub fn cluster_loss(
    cs: &[Matrix<f64>],
    c_hat: &Matrix<f64>,
    tau: f64,
    eps: f64,
    entropy_on: bool,
) -> f64 {
    let k = c_hat.cols();
    let mut acc = 0.0;
    for j in 0..k {
        let anchor = col(c_hat, j);
        for c in cs {
            let pos = (cos(&anchor, &col(c, j)) / tau).exp();
            let mut den = 0.0;
            for kk in 0..k {
                den += (cos(&anchor, &col(c, kk)) / tau).exp();
            }
            den = (den - (1.0 / tau).exp()).max(eps);
            acc += (pos / den).ln();
        }
    }
    let l = -acc / (2.0 * k as f64);
    if entropy_on {
        l - entropy(cs, c_hat)
    } else {
        l
    }
}

/// Weighted instance-level loss; `r = None` means all weights are zero.
pub fn instance_loss(
    hs: &[Matrix<f64>],
    h_hat: &Matrix<f64>,
    r: Option<&Matrix<f64>>,
    tau: f64,
    eps: f64,
    exclude_positive: bool,
) -> f64 {
    let n = h_hat.rows();
    let mut acc = 0.0;
    for i in 0..n {
        let anchor = h_hat.row(i);
        for h in hs {
            let pos = (cos(anchor, h.row(i)) / tau).exp();
            let mut den = 0.0;
            for j in 0..n {
                let mut w = r.map_or(0.0, |r| r.get(i, j));
                if exclude_positive && i == j {
                    w = 0.0;
                }
                den += ((1.0 - w) * cos(anchor, h.row(j)) / tau).exp();
            }
            den = (den - (1.0 / tau).exp()).max(eps);
            acc += (pos / den).ln();
        }
    }
    -acc / (2.0 * n as f64)
}

/// Plain InfoNCE, averaged over anchors.
pub fn infonce(anchor: &Matrix<f64>, other: &Matrix<f64>, tau: f64) -> f64 {
    let n = anchor.rows();
    let mut total = 0.0;
    for i in 0..n {
        let pos = cos(anchor.row(i), other.row(i)) / tau;
        let mut den = 0.0;
        for j in 0..n {
            den += (cos(anchor.row(i), other.row(j)) / tau).exp();
        }
        total += den.ln() - pos;
    }
    total / n as f64
}

pub fn matmul(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
    assert_eq!(a.cols(), b.rows());
    let mut out = Matrix::zeros(a.rows(), b.cols());
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

pub fn softmax_rows(m: &Matrix<f64>) -> Matrix<f64> {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = row.iter().map(|x| (x - max).exp()).sum();
        for x in row.iter_mut() {
            *x = (*x - max).exp() / total;
        }
    }
    out
}

/// Attention pair weights from the column concatenation of `parts`.
pub fn pair_weights(parts: &[&Matrix<f64>], wq1: &Matrix<f64>, wq2: &Matrix<f64>) -> Matrix<f64> {
    let n = parts[0].rows();
    let m: usize = parts.iter().map(|p| p.cols()).sum();
    let c = Matrix::from_fn(n, m, |i, j| {
        let mut offset = 0;
        for p in parts {
            if j < offset + p.cols() {
                return p.get(i, j - offset);
            }
            offset += p.cols();
        }
        unreachable!()
    });
    let q1 = matmul(&c, wq1);
    let q2 = matmul(&c, wq2);
    let scale = 1.0 / (m as f64).sqrt();
    let logits = Matrix::from_fn(n, n, |i, j| {
        let mut s = 0.0;
        for k in 0..m {
            s += q1.get(i, k) * q2.get(j, k);
        }
        s * scale
    });
    softmax_rows(&logits)
}

/// `x W + b`, optionally followed by ReLU.
pub fn dense(x: &Matrix<f64>, w: &Matrix<f64>, b: &Matrix<f64>, relu: bool) -> Matrix<f64> {
    let mut y = matmul(x, w);
    for i in 0..y.rows() {
        for j in 0..y.cols() {
            let v = y.get(i, j) + b.get(0, j);
            y.set(i, j, if relu { v.max(0.0) } else { v });
        }
    }
    y
}

pub fn max_abs_diff(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Adapts library results to the gradient checker's error type.
pub fn lift<T>(r: dcmcs_core::Result<T>) -> dcmcs_tensor::Result<T> {
    r.map_err(|e| match e {
        dcmcs_core::Error::Tensor(t) => t,
        other => TensorError::Invalid(other.to_string()),
    })
}

/// Accuracy by enumerating every assignment of predicted to true labels.
pub fn brute_force_accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let k = pred.iter().chain(truth).max().map_or(0, |m| m + 1);
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = 0;
    permute(&mut perm, 0, &mut |p| {
        let hits = pred.iter().zip(truth).filter(|(&a, &b)| p[a] == b).count();
        best = best.max(hits);
    });
    best as f64 / pred.len() as f64
}

fn permute(items: &mut Vec<usize>, start: usize, visit: &mut dyn FnMut(&[usize])) {
    if start == items.len() {
        visit(items);
        return;
    }
    for i in start..items.len() {
        items.swap(start, i);
        permute(items, start + 1, visit);
        items.swap(start, i);
    }
}

/// NMI from the textbook sums over label pairs, no contingency shortcuts.
pub fn nmi_oracle(pred: &[usize], truth: &[usize]) -> f64 {
    let n = pred.len() as f64;
    let labels = |xs: &[usize]| {
        let mut v = xs.to_vec();
        v.sort_unstable();
        v.dedup();
        v
    };
    let (ps, ts) = (labels(pred), labels(truth));
    let frac = |f: &dyn Fn(usize) -> bool| (0..pred.len()).filter(|&i| f(i)).count() as f64 / n;
    let h = |xs: &[usize], ls: &[usize]| -> f64 {
        ls.iter()
            .map(|&l| {
                let p = xs.iter().filter(|&&x| x == l).count() as f64 / n;
                -p * p.ln()
            })
            .sum()
    };
    let (hp, ht) = (h(pred, &ps), h(truth, &ts));
    if hp == 0.0 && ht == 0.0 {
        return 1.0;
    }
    if hp == 0.0 || ht == 0.0 {
        return 0.0;
    }
    let mut mi = 0.0;
    for &a in &ps {
        for &b in &ts {
            let pab = frac(&|i| pred[i] == a && truth[i] == b);
            if pab > 0.0 {
                let pa = frac(&|i| pred[i] == a);
                let pb = frac(&|i| truth[i] == b);
                mi += pab * (pab / (pa * pb)).ln();
            }
        }
    }
    mi / (hp * ht).sqrt()
}

/// Random labels in `0..k` for `n` samples.
pub fn random_labels(r: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| r.random_range(0..k)).collect()
}

/// The model's forward pass rebuilt from its parts on graph inputs `xs`, so
/// gradients can flow to the batch itself.
pub fn forward_from_inputs(
    model: &DcmcsModel<f64>,
    g: &mut Graph<f64>,
    xs: &[Var],
) -> dcmcs_core::Result<ForwardOutputs> {
    let arch = model.architecture();
    let b = model.bind(g, |_| false);
    let mut z = Vec::new();
    let mut reconstructions = Vec::new();
    for (v, &x) in xs.iter().enumerate() {
        let zv = model.encode(g, &b, v, x)?;
        reconstructions.push(model.decode(g, &b, v, zv)?);
        z.push(zv);
    }
    let (z_hat, fusion_weights) = model.fuse(g, &b, &z)?;
    let mut c = Vec::new();
    let mut h = Vec::new();
    for (v, &zv) in z.iter().enumerate() {
        let head = arch.head_index(Some(v));
        c.push(model.semantic_features(g, &b, head, zv)?);
        h.push(model.instance_features(g, &b, head, zv)?);
    }
    let fusion_head = arch.head_index(None);
    let c_hat = model.semantic_features(g, &b, fusion_head, z_hat)?;
    let h_hat = model.instance_features(g, &b, fusion_head, z_hat)?;
    let (pair_weights, attention_output) = model.pair_weight_matrix(g, &b, &c, c_hat)?;
    Ok(ForwardOutputs {
        inputs: xs.to_vec(),
        reconstructions,
        z,
        z_hat,
        c,
        c_hat,
        h,
        h_hat,
        fusion_weights,
        pair_weights,
        attention_output,
    })
}

/// Worst relative error between autodiff and central differences for the
/// probe `Σ R ∘ M`, over the query weights and every semantic input.
pub fn pair_weight_gradient_error(
    base: &DcmcsModel<f64>,
    cs: &[Matrix<f64>],
    c_hat: &Matrix<f64>,
    probe: &Matrix<f64>,
) -> f64 {
    let mut inputs = vec![
        base.param("attention.q1").unwrap().value.clone(),
        base.param("attention.q2").unwrap().value.clone(),
    ];
    inputs.extend(cs.iter().cloned());
    inputs.push(c_hat.clone());
    let v = cs.len();
    let build = |xs: &[Matrix<f64>], grads: bool| -> (f64, Vec<Matrix<f64>>) {
        let mut model = base.clone();
        model.param_mut("attention.q1").unwrap().value = xs[0].clone();
        model.param_mut("attention.q2").unwrap().value = xs[1].clone();
        let mut g = Graph::new();
        let b = model.bind(&mut g, |group| grads && group == ParamGroup::AttentionQuery);
        let leaves: Vec<Var> = xs[2..].iter().map(|m| g.leaf(m.clone(), grads)).collect();
        let (rc, _) = model
            .pair_weight_matrix(&mut g, &b, &leaves[..v], leaves[v])
            .unwrap();
        let m = g.constant(probe.clone());
        let prod = g.mul(rc, m).unwrap();
        let root = g.sum(prod);
        let value = g.value(root).item();
        if !grads {
            return (value, Vec::new());
        }
        g.backward(root).unwrap();
        let index = |name: &str| model.params().iter().position(|p| p.name == name).unwrap();
        let mut out = vec![
            g.grad(b.vars()[index("attention.q1")]).unwrap().clone(),
            g.grad(b.vars()[index("attention.q2")]).unwrap().clone(),
        ];
        out.extend(leaves.iter().map(|&l| g.grad(l).unwrap().clone()));
        (value, out)
    };
    let (_, analytic) = build(&inputs, true);
    let f = |xs: &[Matrix<f64>]| -> dcmcs_tensor::Result<f64> { Ok(build(xs, false).0) };
    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let numeric = central_difference(&f, &inputs, i, 1e-4).unwrap();
        for (&x, &y) in a.data().iter().zip(numeric.data()) {
            worst = worst.max(relative_error(x, y));
        }
    }
    worst
}

/// Model with every parameter drawn from `U(-0.5, 0.5)`, biases and logits
/// included.
pub fn randomized(arch: Architecture, seed: u64) -> DcmcsModel<f64> {
    let mut model = DcmcsModel::<f64>::zeroed(arch);
    let mut r = rng(seed);
    for param in model.params_mut() {
        let (rows, cols) = param.value.shape();
        param.value = uniform(&mut r, rows, cols, -0.5, 0.5);
    }
    model
}
