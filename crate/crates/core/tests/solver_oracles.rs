mod common;

use common::*;
use ndarray::{Array1, Array2};
use rand::Rng;
use transduct_core::solver::gmm_log_probs;
use transduct_core::{AffinityGraph, GmmParams, Hyperparams, ObjectiveKind, SolverState};
use transduct_oracles::*;

const LN_2PI: f64 = 1.8378770664093453;

fn hyper(lambda: f64, gamma: f64) -> Hyperparams {
    Hyperparams {
        lambda,
        gamma,
        ..Hyperparams::zero_shot()
    }
}

fn max_abs_diff<'a>(
    a: impl IntoIterator<Item = &'a f64>,
    b: impl IntoIterator<Item = &'a f64>,
) -> f64 {
    a.into_iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn log_densities_match_gaussian_oracle_up_to_constant() {
    let state = random_state(3, 12, 4, 6, None, 1);
    let lp = state.log_probs();
    let rows = to_rows(state.features());
    let mu = to_rows(state.gmm.mu.view());
    let var = state.gmm.sigma_diag.to_vec();
    for (i, x) in rows.iter().enumerate() {
        for k in 0..4 {
            let oracle = log_gaussian_diag(x, &mu[k], &var) + 0.5 * 6.0 * LN_2PI;
            assert!((lp[[i, k]] - oracle).abs() < 1e-12);
        }
    }
}

#[test]
fn z_step_returns_soft_labels_under_flat_likelihood() {
    let mut state = random_state(0, 9, 3, 5, None, 2);
    let shared = state.gmm.mu.row(0).to_owned();
    for mut row in state.gmm.mu.rows_mut() {
        row.assign(&shared);
    }
    let z = state.z_step(&hyper(1.0, 0.0));
    assert!(max_abs_diff(z.iter(), state.soft_labels().view().iter()) < 1e-12);
}

#[test]
fn z_step_without_prior_is_the_gmm_posterior() {
    let state = random_state(0, 9, 3, 5, None, 3);
    let z = state.z_step(&hyper(0.0, 0.0));
    let rows = to_rows(state.features());
    let mu = to_rows(state.gmm.mu.view());
    let var = state.gmm.sigma_diag.to_vec();
    for (i, x) in rows.iter().enumerate() {
        let a: Vec<f64> = (0..3)
            .map(|k| -log_gaussian_diag(x, &mu[k], &var))
            .collect();
        let post = analytic_entropy_minimizer(&a);
        for k in 0..3 {
            assert!((z[[i, k]] - post[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn z_step_matches_projected_gradient_with_support_neighbor() {
    for seed in 0..10 {
        let mut r = rng(40 + seed);
        let all = random_unit(2, 4, &mut r);
        let w = r.random_range(0.1..1.0);
        let graph = AffinityGraph::from_lists(vec![vec![], vec![(0, w)]]).unwrap();
        let gmm = GmmParams {
            mu: Array2::from_shape_fn((2, 4), |_| r.random_range(-0.5..0.5)),
            sigma_diag: Array1::from_shape_fn(4, |_| r.random_range(0.1..0.6)),
        };
        let log_y = random_log_simplex(1, 2, &mut r);
        let state = SolverState::from_parts(all, &[1], log_y.clone(), gmm, graph).unwrap();
        let h = hyper(0.7, 0.0);
        let z = state.z_step(&h);
        let lp = state.log_probs();
        let a: Vec<f64> = (0..2)
            .map(|k| -(h.lambda * log_y[[0, k]] + lp[[1, k]] + w * if k == 1 { 1.0 } else { 0.0 }))
            .collect();
        let pg = simplex_pg_minimize(&a, 5000);
        assert!(
            max_abs_diff(z.row(0).iter(), pg.iter()) < 1e-6,
            "seed {seed}"
        );
    }
}

#[test]
fn mean_and_variance_steps_match_exact_arithmetic() {
    let mut state = random_state(2, 3, 2, 5, None, 4);
    let h = hyper(0.5, 0.2);
    let rows = to_rows(state.features());
    let z = to_rows(state.z_all());
    let mu = state.mu_step(&h);
    for k in 0..2 {
        let oracle = exact_weighted_mean(&rows[..2], &z[..2], &rows[2..], &z[2..], 0.2, k);
        assert!(max_abs_diff(mu.row(k).iter(), oracle.iter()) < 1e-12);
    }
    state.gmm.mu = mu;
    let sigma = state.sigma_step(&h);
    let oracle = exact_shared_variance(
        &rows[..2],
        &z[..2],
        &rows[2..],
        &z[2..],
        &to_rows(state.gmm.mu.view()),
        0.2,
    );
    assert!(max_abs_diff(sigma.iter(), oracle.iter()) < 1e-12);
}

#[test]
fn mean_step_examples() {
    // One-hot query assignments without support give per-class averages.
    let mut r = rng(5);
    let all = random_unit(6, 3, &mut r);
    let gmm = GmmParams::with_isotropic_init(Array2::zeros((2, 3)));
    let mut state = SolverState::from_parts(
        all.clone(),
        &[],
        Array2::from_elem((6, 2), 0.5f64.ln()),
        gmm,
        AffinityGraph::empty(6),
    )
    .unwrap();
    let labels = [0, 1, 0, 1, 1, 0];
    let mut z = Array2::zeros((6, 2));
    for (i, &l) in labels.iter().enumerate() {
        z[[i, l]] = 1.0;
    }
    state.set_query_z(z).unwrap();
    let mu = state.mu_step(&hyper(1.0, 0.0));
    for k in 0..2 {
        let members: Vec<usize> = (0..6).filter(|&i| labels[i] == k).collect();
        for d in 0..3 {
            let mean = members.iter().map(|&i| all.row(i)[d]).sum::<f64>() / 3.0;
            assert!((mu[[k, d]] - mean).abs() < 1e-12);
        }
    }

    // One support and one query row of the same class with γ = 1 meet halfway.
    let all = random_unit(2, 3, &mut r);
    let gmm = GmmParams::with_isotropic_init(Array2::zeros((2, 3)));
    let mut state = SolverState::from_parts(
        all.clone(),
        &[0],
        Array2::from_elem((1, 2), 0.5f64.ln()),
        gmm,
        AffinityGraph::empty(2),
    )
    .unwrap();
    state
        .set_query_z(Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap())
        .unwrap();
    let mu = state.mu_step(&hyper(1.0, 1.0));
    for d in 0..3 {
        assert!((mu[[0, d]] - 0.5 * (all.row(0)[d] + all.row(1)[d])).abs() < 1e-12);
        assert_eq!(mu[[1, d]], 0.0);
    }
}

#[test]
fn variance_step_examples() {
    // Points sitting on their means hit the floor.
    let mut r = rng(6);
    let all = random_unit(2, 3, &mut r);
    let gmm = GmmParams::with_isotropic_init(all.view().to_owned());
    let mut state = SolverState::from_parts(
        all.clone(),
        &[],
        Array2::from_elem((2, 2), 0.5f64.ln()),
        gmm,
        AffinityGraph::empty(2),
    )
    .unwrap();
    state.set_query_z(Array2::eye(2)).unwrap();
    let sigma = state.sigma_step(&hyper(1.0, 0.0));
    assert!(sigma.iter().all(|&s| s == 1e-12));

    // A single class recovers the population variance.
    let all = random_unit(7, 3, &mut r);
    let mean = all.view().mean_axis(ndarray::Axis(0)).unwrap();
    let gmm = GmmParams::with_isotropic_init(mean.clone().insert_axis(ndarray::Axis(0)));
    let state = SolverState::from_parts(
        all.clone(),
        &[],
        Array2::zeros((7, 1)),
        gmm,
        AffinityGraph::empty(7),
    )
    .unwrap();
    let sigma = state.sigma_step(&hyper(1.0, 0.0));
    for d in 0..3 {
        let var = all
            .view()
            .column(d)
            .iter()
            .map(|x| (x - mean[d]).powi(2))
            .sum::<f64>()
            / 7.0;
        assert!((sigma[d] - var).abs() < 1e-12);
    }
}

#[test]
fn objective_is_log_k_at_the_soft_labels_under_flat_likelihood() {
    let state = random_state(0, 8, 4, 3, None, 7);
    let flat = Array2::from_elem((8, 4), -(4.0f64.ln()));
    let h = hyper(1.0, 0.0);
    let literal = state.objective_with_log_probs(flat.view(), &h, ObjectiveKind::Literal);
    let consistent =
        state.objective_with_log_probs(flat.view(), &h, ObjectiveKind::UpdateConsistent);
    // random_state moves z off ŷ; rebuild at z = ŷ.
    let mut at_prior = state.clone();
    at_prior
        .set_query_z(at_prior.soft_labels().view().to_owned())
        .unwrap();
    let literal_prior = at_prior.objective_with_log_probs(flat.view(), &h, ObjectiveKind::Literal);
    let consistent_prior =
        at_prior.objective_with_log_probs(flat.view(), &h, ObjectiveKind::UpdateConsistent);
    assert!((literal_prior - 4.0f64.ln()).abs() < 1e-12);
    assert!((consistent_prior - 8.0 * 4.0f64.ln()).abs() < 1e-12);
    // Any other z pays a positive divergence.
    assert!(literal > literal_prior);
    assert!(consistent > consistent_prior);
}

#[test]
fn objective_with_hard_assignments_is_the_complete_data_nll() {
    let mut state = random_state(0, 15, 3, 4, None, 8);
    let mut r = rng(9);
    let labels: Vec<usize> = (0..15).map(|_| r.random_range(0..3)).collect();
    let mut z = Array2::zeros((15, 3));
    for (i, &l) in labels.iter().enumerate() {
        z[[i, l]] = 1.0;
    }
    state.set_query_z(z.clone()).unwrap();
    let value = state.objective(&hyper(0.0, 0.0), ObjectiveKind::UpdateConsistent);
    let nll = complete_data_nll(
        &to_rows(state.features()),
        &to_rows(z.view()),
        &to_rows(state.gmm.mu.view()),
        &state.gmm.sigma_diag.to_vec(),
    );
    let shift = 15.0 * 3.0f64.ln() + 15.0 * 2.0 * LN_2PI;
    assert!(
        (value - (nll - shift)).abs() < 1e-10,
        "{value} vs {}",
        nll - shift
    );
}

#[test]
fn doubling_graph_weights_doubles_the_laplacian_term() {
    let mut r = rng(10);
    let all = random_unit(12, 4, &mut r);
    let graph = transduct_core::affinity::build_knn(&all, 3);
    let mut state = random_state(0, 12, 3, 4, Some(graph.clone()), 10);
    let h = hyper(1.0, 0.0);
    // random_state draws its own rows; only the graph matters here.
    let base = {
        state.graph = AffinityGraph::empty(12);
        state.objective(&h, ObjectiveKind::UpdateConsistent)
    };
    state.graph = graph.clone();
    let once = state.objective(&h, ObjectiveKind::UpdateConsistent);
    state.graph = graph.scaled(2.0);
    let twice = state.objective(&h, ObjectiveKind::UpdateConsistent);
    assert!(once < base);
    assert!(((twice - base) - 2.0 * (once - base)).abs() < 1e-10);
}

#[test]
fn block_updates_reproduce_em_without_prior_or_graph() {
    for seed in 0..5 {
        let mut state = random_state(0, 30, 3, 4, None, 20 + seed);
        let data = to_rows(state.features());
        let mu0 = to_rows(state.gmm.mu.view());
        let var0 = state.gmm.sigma_diag.to_vec();
        let em = em_reference(&data, &mu0, &var0, 10, true);
        let h = hyper(0.0, 0.0);
        for it in &em {
            let z = state.z_step(&h);
            state.set_query_z(z).unwrap();
            state.gmm.mu = state.mu_step(&h);
            state.gmm.sigma_diag = state.sigma_step(&h);
            let resp: Vec<f64> = it.responsibilities.concat();
            assert!(max_abs_diff(state.z_query().iter(), resp.iter()) < 1e-10);
            assert!(max_abs_diff(state.gmm.mu.iter(), it.means.concat().iter()) < 1e-10);
            assert!(max_abs_diff(state.gmm.sigma_diag.iter(), it.variances.iter()) < 1e-10);
        }
    }
}

#[test]
fn closed_form_updates_are_stationary() {
    for seed in 0..5 {
        let mut r = rng(60 + seed);
        let all = random_unit(20, 4, &mut r);
        let graph = transduct_core::affinity::build_knn(&all, 3);
        let mut state = random_state(4, 16, 3, 4, Some(graph), 60 + seed);
        let h = hyper(0.5, 0.2);
        state.gmm.mu = state.mu_step(&h);
        let flat_mu: Vec<f64> = state.gmm.mu.iter().cloned().collect();
        let f_mu = |x: &[f64]| {
            let mut s = state.clone();
            s.gmm.mu = Array2::from_shape_vec((3, 4), x.to_vec()).unwrap();
            s.objective(&h, ObjectiveKind::UpdateConsistent)
        };
        let g = finite_diff_grad(f_mu, &flat_mu, 1e-5);
        assert!(g.iter().all(|v| v.abs() <= 1e-4), "{g:?}");

        state.gmm.sigma_diag = state.sigma_step(&h);
        let log_var: Vec<f64> = state.gmm.sigma_diag.iter().map(|v| v.ln()).collect();
        let f_var = |x: &[f64]| {
            let mut s = state.clone();
            s.gmm.sigma_diag = Array1::from_iter(x.iter().map(|v| v.exp()));
            s.objective(&h, ObjectiveKind::UpdateConsistent)
        };
        let g = finite_diff_grad(f_var, &log_var, 1e-5);
        assert!(g.iter().all(|v| v.abs() <= 1e-4), "{g:?}");
    }
}

#[test]
fn every_block_descends_without_graph() {
    for seed in 0..20 {
        let mut state = random_state(3, 25, 3, 5, None, 80 + seed);
        let h = Hyperparams {
            outer_iters: 4,
            ..hyper(0.8, 0.1)
        };
        let mut prev = f64::INFINITY;
        state.optimize(&h, |s, _| {
            let v = s.objective(&h, ObjectiveKind::UpdateConsistent);
            assert!(
                v <= prev + 1e-8 * prev.abs().max(1.0),
                "seed {seed}: {prev} -> {v}"
            );
            prev = v;
        });
    }
}

#[test]
fn iterates_stay_on_the_simplex() {
    for seed in 0..20 {
        let mut r = rng(120 + seed);
        let all = random_unit(40, 6, &mut r);
        let graph = transduct_core::affinity::build_knn(&all, 3).symmetrized();
        let mut state = random_state(5, 35, 4, 6, Some(graph), 120 + seed);
        let h = hyper(1.0, 0.02);
        state.optimize(&h, |s, _| {
            for row in s.z_all().rows() {
                assert!(row.iter().all(|&v| v >= 0.0));
                assert!((row.sum() - 1.0).abs() <= 1e-9);
            }
        });
    }
}

#[test]
fn log_probs_helper_agrees_with_state() {
    let state = random_state(2, 5, 2, 3, None, 11);
    assert_eq!(
        gmm_log_probs(state.features(), &state.gmm),
        state.log_probs()
    );
}
