//! Reference implementations used to certify `transduct-core` in tests.
//!
//! Everything here is deliberately slow and written from textbook formulas on
//! plain `Vec<f64>` rows. This crate does not depend on `transduct-core` and
//! shares no numerical kernel with it. Intended for N ≤ 200, K ≤ 10.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};

pub type Rows = Vec<Vec<f64>>;

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Normalized log-density of `x` under N(mean, diag(var)).
pub fn log_gaussian_diag(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let d = x.len() as f64;
    let mut acc = -0.5 * d * (2.0 * std::f64::consts::PI).ln();
    for i in 0..x.len() {
        acc -= 0.5 * var[i].ln();
        acc -= 0.5 * (x[i] - mean[i]) * (x[i] - mean[i]) / var[i];
    }
    acc
}

/// One EM iterate: responsibilities from the E-step, then the M-step.
#[derive(Debug, Clone)]
pub struct EmIterate {
    pub responsibilities: Rows,
    pub means: Rows,
    pub variances: Vec<f64>,
}

/// Balanced (equal weights) Gaussian mixture with one shared diagonal
/// covariance. Each iterate is E-step, mean M-step, and, when
/// `update_variance`, the shared variance M-step using the new means.
pub fn em_reference(
    data: &[Vec<f64>],
    mu0: &[Vec<f64>],
    var0: &[f64],
    iters: usize,
    update_variance: bool,
) -> Vec<EmIterate> {
    let k = mu0.len();
    let d = var0.len();
    let mut means: Rows = mu0.to_vec();
    let mut var: Vec<f64> = var0.to_vec();
    let mut out = Vec::with_capacity(iters);
    for _ in 0..iters {
        let mut resp = Vec::with_capacity(data.len());
        for x in data {
            let logs: Vec<f64> = (0..k)
                .map(|c| (1.0 / k as f64).ln() + log_gaussian_diag(x, &means[c], &var))
                .collect();
            let norm = log_sum_exp(&logs);
            resp.push(logs.iter().map(|l| (l - norm).exp()).collect::<Vec<f64>>());
        }
        for c in 0..k {
            let mass: f64 = resp.iter().map(|r| r[c]).sum();
            for j in 0..d {
                let s: f64 = data.iter().zip(&resp).map(|(x, r)| r[c] * x[j]).sum();
                means[c][j] = s / mass;
            }
        }
        if update_variance {
            for j in 0..d {
                let mut s = 0.0;
                for (x, r) in data.iter().zip(&resp) {
                    for c in 0..k {
                        s += r[c] * (x[j] - means[c][j]).powi(2);
                    }
                }
                var[j] = s / data.len() as f64;
            }
        }
        out.push(EmIterate {
            responsibilities: resp,
            means: means.clone(),
            variances: var.clone(),
        });
    }
    out
}

/// Negative complete-data log-likelihood of a balanced shared-diagonal GMM
/// under the (soft or hard) assignments `z`, including the `log(1/K)`
/// mixture weights and the Gaussian normalizing constants.
pub fn complete_data_nll(
    data: &[Vec<f64>],
    z: &[Vec<f64>],
    means: &[Vec<f64>],
    var: &[f64],
) -> f64 {
    let k = means.len();
    let mut total = 0.0;
    for (x, zi) in data.iter().zip(z) {
        for c in 0..k {
            if zi[c] != 0.0 {
                total -= zi[c] * ((1.0 / k as f64).ln() + log_gaussian_diag(x, &means[c], var));
            }
        }
    }
    total
}

/// Euclidean projection onto the probability simplex (sort-based).
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cumulative += ui;
        let t = (cumulative - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// g(z) = z·a + Σ z log z, with 0 log 0 = 0.
pub fn linear_entropy_objective(a: &[f64], z: &[f64]) -> f64 {
    a.iter()
        .zip(z)
        .map(|(&ai, &zi)| ai * zi + if zi > 0.0 { zi * zi.ln() } else { 0.0 })
        .sum()
}

/// Minimizes `z·a + Σ z log z` over the simplex by projected gradient
/// descent, starting from the uniform vector.
///
/// Step lengths follow the spectral (Barzilai-Borwein) rule, which copes
/// with the large curvature of the entropy near small coordinates. Each
/// step moves along `proj(z - η∇f) - z` and is halved until it either
/// passes a non-monotone sufficient-decrease test or ends at a point where
/// the directional derivative is non-positive. The second test does not
/// depend on resolving tiny differences of f64 function values.
pub fn simplex_pg_minimize(a: &[f64], steps: usize) -> Vec<f64> {
    const MEMORY: usize = 10;
    let k = a.len();
    // Centered: adding a constant to every coordinate changes neither the
    // projection nor any product with a direction inside the simplex, and
    // centering avoids cancellation in those products.
    let gradient = |z: &[f64]| -> Vec<f64> {
        let g: Vec<f64> = a
            .iter()
            .zip(z)
            .map(|(&ai, &zi)| ai + zi.max(1e-300).ln() + 1.0)
            .collect();
        let mean = g.iter().sum::<f64>() / k as f64;
        g.into_iter().map(|v| v - mean).collect()
    };
    let dot = |x: &[f64], y: &[f64]| -> f64 { x.iter().zip(y).map(|(p, q)| p * q).sum() };
    let mut z = vec![1.0 / k as f64; k];
    let mut grad = gradient(&z);
    let mut history = vec![linear_entropy_objective(a, &z)];
    let mut eta = 1.0;
    for _ in 0..steps {
        let trial: Vec<f64> = z.iter().zip(&grad).map(|(zi, g)| zi - eta * g).collect();
        let dir: Vec<f64> = project_simplex(&trial)
            .iter()
            .zip(&z)
            .map(|(c, zi)| c - zi)
            .collect();
        let slope = dot(&dir, &grad);
        if slope.is_nan() || slope >= 0.0 {
            break;
        }
        let reference = history.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut t = 1.0;
        let mut next = z.clone();
        for _ in 0..100 {
            next = z
                .iter()
                .zip(&dir)
                .map(|(zi, d)| (zi + t * d).max(0.0))
                .collect();
            let decrease_ok = linear_entropy_objective(a, &next) <= reference + 1e-4 * t * slope;
            if decrease_ok || dot(&dir, &gradient(&next)) <= 0.0 {
                break;
            }
            t *= 0.5;
        }
        let next_grad = gradient(&next);
        let s: Vec<f64> = next.iter().zip(&z).map(|(p, q)| p - q).collect();
        let y: Vec<f64> = next_grad.iter().zip(&grad).map(|(p, q)| p - q).collect();
        let sy = dot(&s, &y);
        // Bounded so that projecting `z - η∇f` stays accurate in f64.
        if sy > 0.0 {
            eta = (dot(&s, &s) / sy).clamp(1e-30, 1e3);
        }
        z = next;
        grad = next_grad;
        history.push(linear_entropy_objective(a, &z));
        if history.len() > MEMORY {
            history.remove(0);
        }
    }
    z
}

/// Closed-form minimizer of `z·a + Σ z log z` on the simplex: softmax(-a).
pub fn analytic_entropy_minimizer(a: &[f64]) -> Vec<f64> {
    let neg: Vec<f64> = a.iter().map(|v| -v).collect();
    let lse = log_sum_exp(&neg);
    neg.iter().map(|v| (v - lse).exp()).collect()
}

/// Central finite-difference gradient.
pub fn finite_diff_grad<F: Fn(&[f64]) -> f64>(f: F, point: &[f64], h: f64) -> Vec<f64> {
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// All-pairs cosine kNN: for every row the `k` other rows with the largest
/// dot product (ties by lower index), weights clipped at zero.
pub fn brute_knn(rows: &[Vec<f64>], k: usize) -> Vec<Vec<(usize, f64)>> {
    let n = rows.len();
    (0..n)
        .map(|i| {
            let mut cands: Vec<(usize, f64)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (j, rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum()))
                .collect();
            cands.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            cands.truncate(k);
            cands.into_iter().map(|(j, c)| (j, c.max(0.0))).collect()
        })
        .collect()
}

fn exact(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite input")
}

/// Support/query weighted class mean evaluated in exact rational
/// arithmetic:
/// `(γ/|S| Σ_S z f + 1/|Q| Σ_Q z f) / (γ/|S| Σ_S z + 1/|Q| Σ_Q z)`.
pub fn exact_weighted_mean(
    support: &[Vec<f64>],
    z_support: &[Vec<f64>],
    query: &[Vec<f64>],
    z_query: &[Vec<f64>],
    gamma: f64,
    class: usize,
) -> Vec<f64> {
    let d = query[0].len();
    let ws = if support.is_empty() {
        BigRational::zero()
    } else {
        exact(gamma) / BigRational::from_integer(BigInt::from(support.len()))
    };
    let wq = BigRational::new(BigInt::from(1), BigInt::from(query.len()));
    let mut den = BigRational::zero();
    for zi in z_support {
        den += &ws * exact(zi[class]);
    }
    for zi in z_query {
        den += &wq * exact(zi[class]);
    }
    (0..d)
        .map(|j| {
            let mut num = BigRational::zero();
            for (f, zi) in support.iter().zip(z_support) {
                num += &ws * exact(zi[class]) * exact(f[j]);
            }
            for (f, zi) in query.iter().zip(z_query) {
                num += &wq * exact(zi[class]) * exact(f[j]);
            }
            (num / &den).to_f64().unwrap()
        })
        .collect()
}

/// Shared diagonal variance in exact rational arithmetic:
/// `(γ/|S| Σ_S Σ_k z (f-μ_k)² + 1/|Q| Σ_Q Σ_k z (f-μ_k)²) / (γ + 1)`.
pub fn exact_shared_variance(
    support: &[Vec<f64>],
    z_support: &[Vec<f64>],
    query: &[Vec<f64>],
    z_query: &[Vec<f64>],
    means: &[Vec<f64>],
    gamma: f64,
) -> Vec<f64> {
    let d = query[0].len();
    let ws = if support.is_empty() {
        BigRational::zero()
    } else {
        exact(gamma) / BigRational::from_integer(BigInt::from(support.len()))
    };
    let wq = BigRational::new(BigInt::from(1), BigInt::from(query.len()));
    let scale = exact(gamma) + BigRational::from_integer(BigInt::from(1));
    (0..d)
        .map(|j| {
            let mut total = BigRational::zero();
            for (w, rows, zs) in [(&ws, support, z_support), (&wq, query, z_query)] {
                for (f, zi) in rows.iter().zip(zs) {
                    for (c, m) in means.iter().enumerate() {
                        let diff = exact(f[j]) - exact(m[j]);
                        total += w * exact(zi[c]) * &diff * &diff;
                    }
                }
            }
            (total / &scale).to_f64().unwrap()
        })
        .collect()
}
