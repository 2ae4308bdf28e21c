//! Block majorize-minimize solver for the text-regularized GMM objective.
//!
//! The optimization variables are the query assignments `z`, the class
//! means `mu` and one diagonal covariance shared by every class. Each outer
//! iteration runs a few Jacobi sweeps over `z` (the decoupled per-sample
//! softmax update), then the closed-form mean update, then the closed-form
//! variance update.
//!
//! Row layout of every D-sized array: support rows first, query rows after.

use std::fmt;
use std::io::Write;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rayon::prelude::*;

use crate::affinity::build_knn;
use crate::error::Result;
use crate::numeric::{argmax, softmax_in_place, xlogx, PROB_FLOOR};
use crate::types::{
    validate_task, AffinityGraph, EmbeddingMatrix, GmmParams, Hyperparams, SimplexAssignments,
    TaskSpec, VARIANCE_FLOOR,
};
use crate::zero_shot::{class_means, compute_soft_labels, init_prototypes_topk, log_soft_labels};

/// Class-weight mass below which a class keeps its previous mean.
const EMPTY_CLASS_MASS: f64 = 1e-12;

/// Rows per partial sum in the variance update.
const REDUCE_CHUNK: usize = 512;

/// Unnormalized GMM log-density of every row under every class, with one
/// shared diagonal covariance. The `-(d/2) log 2π` constant is dropped.
pub fn gmm_log_probs(features: ArrayView2<'_, f64>, gmm: &GmmParams) -> Array2<f64> {
    let inv_var = gmm.sigma_diag.mapv(|v| 1.0 / v);
    let log_det: f64 = gmm.sigma_diag.iter().map(|v| v.ln()).sum();
    let mut out = Array2::zeros((features.nrows(), gmm.n_classes()));
    Zip::from(out.axis_iter_mut(Axis(0)))
        .and(features.axis_iter(Axis(0)))
        .par_for_each(|mut out_row, f| {
            for (k, mu_k) in gmm.mu.axis_iter(Axis(0)).enumerate() {
                let mut maha = 0.0;
                for ((&fd, &md), &iv) in f.iter().zip(mu_k.iter()).zip(inv_var.iter()) {
                    let diff = fd - md;
                    maha += diff * diff * iv;
                }
                out_row[k] = -0.5 * (log_det + maha);
            }
        });
    out
}

/// Which normalization of the objective to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    /// GMM term averaged over the query set, support cross-entropy weighted
    /// by `gamma / |S|`.
    Literal,
    /// Every query term at unit weight, support term at `gamma |Q| / |S|`.
    /// The z, mu and sigma updates are exact block minimizers of this form.
    UpdateConsistent,
}

/// Where a solver event happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Init,
    /// One Jacobi sweep over the query assignments.
    ZSweep {
        outer: usize,
        inner: usize,
    },
    /// All sweeps of one outer iteration finished.
    ZLoop {
        outer: usize,
    },
    Mu {
        outer: usize,
    },
    Sigma {
        outer: usize,
    },
}

impl Block {
    fn label(&self) -> &'static str {
        match self {
            Block::Init => "init",
            Block::ZSweep { .. } => "z-sweep",
            Block::ZLoop { .. } => "z",
            Block::Mu { .. } => "mu",
            Block::Sigma { .. } => "sigma",
        }
    }

    fn iteration(&self) -> usize {
        match *self {
            Block::Init => 0,
            Block::ZSweep { outer, .. }
            | Block::ZLoop { outer }
            | Block::Mu { outer }
            | Block::Sigma { outer } => outer + 1,
        }
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Objective values recorded after a block update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    /// 0 for the initial point, otherwise the 1-based outer iteration.
    pub iteration: usize,
    pub block: Block,
    pub literal: f64,
    pub update_consistent: f64,
}

/// Writes `iteration,block,literal,update_consistent` CSV.
pub fn write_trace_csv<W: Write>(trace: &[TraceRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "iteration,block,literal,update_consistent")?;
    for r in trace {
        writeln!(
            out,
            "{},{},{},{}",
            r.iteration, r.block, r.literal, r.update_consistent
        )?;
    }
    out.flush()
}

/// Everything the block updates read and write.
#[derive(Debug, Clone)]
pub struct SolverState {
    features: Array2<f64>,
    n_support: usize,
    z: Array2<f64>,
    pub gmm: GmmParams,
    soft_labels: SimplexAssignments,
    log_soft_labels: Array2<f64>,
    pub graph: AffinityGraph,
    pub objective_trace: Vec<TraceRecord>,
}

impl SolverState {
    /// Initial state for a validated task: soft labels, kNN graph over
    /// support and query, initial means, `1/d` variances, `z = ŷ` on the
    /// query and one-hot labels on the support.
    pub fn initialize(spec: &TaskSpec) -> Result<Self> {
        let soft_labels = compute_soft_labels(&spec.query, &spec.text, spec.temperature)?;
        let log_soft_labels = log_soft_labels(&spec.query, &spec.text, spec.temperature)?;
        let (all, mu, support_labels) = match &spec.support {
            Some(support) => (
                support.embeddings.stack(&spec.query)?,
                class_means(support.embeddings.view(), &support.labels, spec.n_classes())?,
                support.labels.as_slice(),
            ),
            None => (
                spec.query.clone(),
                init_prototypes_topk(&spec.query, &soft_labels, spec.hyper.top_m_init)?,
                &[][..],
            ),
        };
        let mut graph = build_knn(&all, spec.hyper.k_nn);
        if spec.hyper.symmetrize_graph {
            graph = graph.symmetrized();
        }
        Self::from_parts(
            all,
            support_labels,
            log_soft_labels,
            GmmParams::with_isotropic_init(mu),
            graph,
        )
    }

    /// Assembles a state from explicit pieces. `all` holds the support rows
    /// followed by the query rows; `log_soft_labels` covers the query rows.
    /// Query assignments start at the soft labels.
    pub fn from_parts(
        all: EmbeddingMatrix,
        support_labels: &[usize],
        log_soft_labels: Array2<f64>,
        gmm: GmmParams,
        graph: AffinityGraph,
    ) -> Result<Self> {
        use crate::error::Error;
        let n_support = support_labels.len();
        let n_classes = gmm.n_classes();
        gmm.validate()?;
        if all.n_rows() <= n_support {
            return Err(Error::Empty {
                what: "query embeddings",
            });
        }
        let n_query = all.n_rows() - n_support;
        if log_soft_labels.dim() != (n_query, n_classes) {
            return Err(Error::LengthMismatch {
                what: "soft label rows",
                expected: n_query,
                found: log_soft_labels.nrows(),
            });
        }
        if gmm.dim() != all.dim() {
            return Err(Error::DimensionMismatch {
                what: "class means",
                expected: all.dim(),
                found: gmm.dim(),
            });
        }
        if graph.n_nodes() != all.n_rows() {
            return Err(Error::LengthMismatch {
                what: "graph nodes",
                expected: all.n_rows(),
                found: graph.n_nodes(),
            });
        }
        let log_soft_labels = log_soft_labels.mapv(|v| v.max(PROB_FLOOR.ln()));
        let soft = SimplexAssignments::from_array_unchecked(log_soft_labels.mapv(f64::exp));
        let mut z = Array2::zeros((all.n_rows(), n_classes));
        z.slice_mut(s![..n_support, ..])
            .assign(&SimplexAssignments::one_hot(support_labels, n_classes)?.view());
        z.slice_mut(s![n_support.., ..]).assign(&soft.view());
        Ok(Self {
            features: all.into_inner(),
            n_support,
            z,
            gmm,
            soft_labels: soft,
            log_soft_labels,
            graph,
            objective_trace: Vec::new(),
        })
    }

    pub fn n_support(&self) -> usize {
        self.n_support
    }

    pub fn n_query(&self) -> usize {
        self.features.nrows() - self.n_support
    }

    pub fn n_classes(&self) -> usize {
        self.gmm.n_classes()
    }

    /// Support rows followed by query rows.
    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    /// Assignments of every row, support first.
    pub fn z_all(&self) -> ArrayView2<'_, f64> {
        self.z.view()
    }

    pub fn z_query(&self) -> ArrayView2<'_, f64> {
        self.z.slice(s![self.n_support.., ..])
    }

    pub fn soft_labels(&self) -> &SimplexAssignments {
        &self.soft_labels
    }

    /// Query assignments as a validated simplex matrix.
    pub fn query_assignments(&self) -> SimplexAssignments {
        SimplexAssignments::from_array_unchecked(self.z_query().to_owned())
    }

    /// Overwrites the query assignments. Every row must be a probability
    /// vector.
    pub fn set_query_z(&mut self, z_query: Array2<f64>) -> Result<()> {
        let checked = SimplexAssignments::new(z_query)?;
        if checked.n_rows() != self.n_query() || checked.n_classes() != self.n_classes() {
            return Err(crate::error::Error::LengthMismatch {
                what: "query assignments",
                expected: self.n_query(),
                found: checked.n_rows(),
            });
        }
        let n_support = self.n_support;
        self.z
            .slice_mut(s![n_support.., ..])
            .assign(&checked.view());
        Ok(())
    }

    fn effective_gamma(&self, hyper: &Hyperparams) -> f64 {
        if self.n_support == 0 {
            0.0
        } else {
            hyper.gamma
        }
    }

    /// Log-densities of every row (support first).
    pub fn log_probs(&self) -> Array2<f64> {
        gmm_log_probs(self.features.view(), &self.gmm)
    }

    fn query_log_probs(&self) -> Array2<f64> {
        gmm_log_probs(self.features.slice(s![self.n_support.., ..]), &self.gmm)
    }

    /// Softmax scores of one query row before normalization:
    /// `λ log ŷ + log p + Σ_j w_ij z_j`.
    fn z_row(
        &self,
        q: usize,
        log_p: ArrayView1<'_, f64>,
        lambda: f64,
        out: ndarray::ArrayViewMut1<'_, f64>,
    ) {
        let mut out = out;
        let i = self.n_support + q;
        let log_y = self.log_soft_labels.row(q);
        for k in 0..out.len() {
            out[k] = lambda * log_y[k] + log_p[k];
        }
        for &(j, w) in self.graph.neighbors(i) {
            if w != 0.0 {
                out.scaled_add(w, &self.z.row(j));
            }
        }
        softmax_in_place(out);
    }

    fn z_sweep(&self, log_p_query: ArrayView2<'_, f64>, lambda: f64) -> Array2<f64> {
        let mut next = Array2::zeros((self.n_query(), self.n_classes()));
        next.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(q, row)| self.z_row(q, log_p_query.row(q), lambda, row));
        next
    }

    /// One Jacobi sweep of the decoupled z-update; every row reads the
    /// current iterate. Returns the new query rows without applying them.
    pub fn z_step(&self, hyper: &Hyperparams) -> Array2<f64> {
        self.z_sweep(self.query_log_probs().view(), hyper.lambda)
    }

    /// Closed-form class means for the current assignments and variances.
    /// A class with (numerically) no mass keeps its previous mean.
    pub fn mu_step(&self, hyper: &Hyperparams) -> Array2<f64> {
        let gamma = self.effective_gamma(hyper);
        let support_w = if self.n_support > 0 {
            gamma / self.n_support as f64
        } else {
            0.0
        };
        let query_w = 1.0 / self.n_query() as f64;
        let n_support = self.n_support;
        let mut mu = self.gmm.mu.clone();
        mu.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(k, mut mu_k)| {
                let d = mu_k.len();
                let mut num_s = Array1::<f64>::zeros(d);
                let mut num_q = Array1::<f64>::zeros(d);
                let mut den_s = 0.0;
                let mut den_q = 0.0;
                for (i, f) in self.features.axis_iter(Axis(0)).enumerate() {
                    let zik = self.z[[i, k]];
                    if zik == 0.0 {
                        continue;
                    }
                    if i < n_support {
                        num_s.scaled_add(zik, &f);
                        den_s += zik;
                    } else {
                        num_q.scaled_add(zik, &f);
                        den_q += zik;
                    }
                }
                let den = support_w * den_s + query_w * den_q;
                if den < EMPTY_CLASS_MASS {
                    return;
                }
                Zip::from(&mut mu_k)
                    .and(&num_s)
                    .and(&num_q)
                    .for_each(|m, &ns, &nq| *m = (support_w * ns + query_w * nq) / den);
            });
        mu
    }

    /// Closed-form shared diagonal variance for the current assignments and
    /// means, floored at the variance floor.
    pub fn sigma_step(&self, hyper: &Hyperparams) -> Array1<f64> {
        let gamma = self.effective_gamma(hyper);
        let support_w = if self.n_support > 0 {
            gamma / self.n_support as f64
        } else {
            0.0
        };
        let query_w = 1.0 / self.n_query() as f64;
        let d = self.features.ncols();
        let n = self.features.nrows();
        let scatter = |start: usize, end: usize| -> Array1<f64> {
            let mut acc = Array1::<f64>::zeros(d);
            for i in start..end {
                let f = self.features.row(i);
                for (k, mu_k) in self.gmm.mu.axis_iter(Axis(0)).enumerate() {
                    let zik = self.z[[i, k]];
                    if zik == 0.0 {
                        continue;
                    }
                    Zip::from(&mut acc)
                        .and(&f)
                        .and(&mu_k)
                        .for_each(|a, &fd, &md| *a += zik * (fd - md) * (fd - md));
                }
            }
            acc
        };
        let partial_sum = |start: usize, end: usize| -> Array1<f64> {
            let chunks: Vec<usize> = (start..end).step_by(REDUCE_CHUNK).collect();
            let partials: Vec<Array1<f64>> = chunks
                .par_iter()
                .map(|&c| scatter(c, (c + REDUCE_CHUNK).min(end)))
                .collect();
            partials
                .into_iter()
                .fold(Array1::zeros(d), |acc, p| acc + p)
        };
        let support_scatter = partial_sum(0, self.n_support);
        let query_scatter = partial_sum(self.n_support, n);
        Zip::from(&support_scatter)
            .and(&query_scatter)
            .map_collect(|&ss, &qs| {
                ((support_w * ss + query_w * qs) / (gamma + 1.0)).max(VARIANCE_FLOOR)
            })
    }

    /// Objective value at the current state.
    pub fn objective(&self, hyper: &Hyperparams, kind: ObjectiveKind) -> f64 {
        self.objective_with_log_probs(self.log_probs().view(), hyper, kind)
    }

    /// Both objective normalizations, sharing one log-density evaluation.
    pub fn objectives(&self, hyper: &Hyperparams) -> (f64, f64) {
        let parts = self.objective_parts(self.log_probs().view());
        (
            parts.combine(self, hyper, ObjectiveKind::Literal),
            parts.combine(self, hyper, ObjectiveKind::UpdateConsistent),
        )
    }

    /// Objective with externally supplied log-densities (support rows
    /// first), e.g. to evaluate under a fixed likelihood table.
    pub fn objective_with_log_probs(
        &self,
        log_p: ArrayView2<'_, f64>,
        hyper: &Hyperparams,
        kind: ObjectiveKind,
    ) -> f64 {
        self.objective_parts(log_p).combine(self, hyper, kind)
    }

    fn objective_parts(&self, log_p: ArrayView2<'_, f64>) -> ObjectiveParts {
        let n_support = self.n_support;
        // Per-row terms computed in parallel, summed in row order.
        let rows: Vec<[f64; 5]> = (0..self.features.nrows())
            .into_par_iter()
            .map(|i| {
                let zi = self.z.row(i);
                let zlogp = zi.dot(&log_p.row(i));
                let lap: f64 = self
                    .graph
                    .neighbors(i)
                    .iter()
                    .map(|&(j, w)| w * zi.dot(&self.z.row(j)))
                    .sum();
                if i < n_support {
                    [0.0, 0.0, 0.0, lap, zlogp]
                } else {
                    let q = i - n_support;
                    let entropy: f64 = zi.iter().map(|&v| xlogx(v)).sum();
                    let prior = zi.dot(&self.log_soft_labels.row(q));
                    [zlogp, entropy, prior, lap, 0.0]
                }
            })
            .collect();
        let mut parts = ObjectiveParts::default();
        for r in rows {
            parts.query_log_lik += r[0];
            parts.neg_entropy += r[1];
            parts.prior += r[2];
            parts.laplacian += r[3];
            parts.support_log_lik += r[4];
        }
        parts
    }

    fn record(&mut self, hyper: &Hyperparams, block: Block) {
        let (literal, update_consistent) = self.objectives(hyper);
        self.objective_trace.push(TraceRecord {
            iteration: block.iteration(),
            block,
            literal,
            update_consistent,
        });
    }

    /// Final query predictions (argmax, lowest index on ties).
    pub fn predictions(&self) -> Vec<usize> {
        self.z_query().axis_iter(Axis(0)).map(argmax).collect()
    }

    /// Runs the block updates in place, calling `observer` after the
    /// initial point and after every sweep or block.
    pub fn optimize<F>(&mut self, hyper: &Hyperparams, mut observer: F)
    where
        F: FnMut(&SolverState, Block),
    {
        self.record(hyper, Block::Init);
        observer(self, Block::Init);
        let n_support = self.n_support;
        for outer in 0..hyper.outer_iters {
            let log_p = self.query_log_probs();
            for inner in 0..hyper.inner_z_iters {
                let next = self.z_sweep(log_p.view(), hyper.lambda);
                self.z.slice_mut(s![n_support.., ..]).assign(&next);
                observer(self, Block::ZSweep { outer, inner });
            }
            self.record(hyper, Block::ZLoop { outer });
            observer(self, Block::ZLoop { outer });

            self.gmm.mu = self.mu_step(hyper);
            self.record(hyper, Block::Mu { outer });
            observer(self, Block::Mu { outer });

            self.gmm.sigma_diag = self.sigma_step(hyper);
            self.record(hyper, Block::Sigma { outer });
            observer(self, Block::Sigma { outer });
        }
    }
}

#[derive(Debug, Default)]
struct ObjectiveParts {
    query_log_lik: f64,
    neg_entropy: f64,
    prior: f64,
    laplacian: f64,
    support_log_lik: f64,
}

impl ObjectiveParts {
    fn combine(&self, state: &SolverState, hyper: &Hyperparams, kind: ObjectiveKind) -> f64 {
        let gamma = state.effective_gamma(hyper);
        let n_q = state.n_query() as f64;
        let n_s = state.n_support as f64;
        let kl = self.neg_entropy - hyper.lambda * self.prior;
        let (gmm_w, support_w) = match kind {
            ObjectiveKind::Literal => (1.0 / n_q, if n_s > 0.0 { gamma / n_s } else { 0.0 }),
            ObjectiveKind::UpdateConsistent => {
                (1.0, if n_s > 0.0 { gamma * n_q / n_s } else { 0.0 })
            }
        };
        -gmm_w * self.query_log_lik - self.laplacian + kl - support_w * self.support_log_lik
    }
}

/// Transduces a task: validates it, initializes, runs the block updates and
/// returns the query assignments with the final state.
pub fn run(spec: &TaskSpec) -> Result<(SimplexAssignments, SolverState)> {
    run_observed(spec, |_, _| {})
}

/// [`run`] with a callback after every sweep and block.
pub fn run_observed<F>(spec: &TaskSpec, observer: F) -> Result<(SimplexAssignments, SolverState)>
where
    F: FnMut(&SolverState, Block),
{
    let spec = validate_task(spec.clone())?;
    let mut state = SolverState::initialize(&spec)?;
    state.optimize(&spec.hyper, observer);
    Ok((state.query_assignments(), state))
}
