#![allow(dead_code)]

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transduct_core::{AffinityGraph, EmbeddingMatrix, GmmParams, SolverState};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_unit(n: usize, d: usize, rng: &mut ChaCha8Rng) -> EmbeddingMatrix {
    let data = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
    EmbeddingMatrix::normalized(data, "test").unwrap()
}

/// Random rows on the simplex with entries bounded away from zero.
pub fn random_simplex(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut z = Array2::from_shape_fn((n, k), |_| rng.random_range(0.05..1.0));
    for mut row in z.rows_mut() {
        let s = row.sum();
        row /= s;
    }
    z
}

pub fn random_log_simplex(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    random_simplex(n, k, rng).mapv(f64::ln)
}

pub fn to_rows(a: ArrayView2<'_, f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn random_labels(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n)
        .map(|i| if i < k { i } else { rng.random_range(0..k) })
        .collect()
}

/// A state over `n_support + n_query` random rows with a random GMM and the
/// given graph (empty when `None`).
pub fn random_state(
    n_support: usize,
    n_query: usize,
    k: usize,
    d: usize,
    graph: Option<AffinityGraph>,
    seed: u64,
) -> SolverState {
    let mut r = rng(seed);
    let all = random_unit(n_support + n_query, d, &mut r);
    let labels = random_labels(n_support, k, &mut r);
    let log_y = random_log_simplex(n_query, k, &mut r);
    let mu = Array2::from_shape_fn((k, d), |_| r.random_range(-0.5..0.5));
    let sigma = Array1::from_shape_fn(d, |_| r.random_range(0.05..0.5));
    let graph = graph.unwrap_or_else(|| AffinityGraph::empty(n_support + n_query));
    let mut state = SolverState::from_parts(
        all,
        &labels,
        log_y,
        GmmParams {
            mu,
            sigma_diag: sigma,
        },
        graph,
    )
    .unwrap();
    state
        .set_query_z(random_simplex(n_query, k, &mut r))
        .unwrap();
    state
}
