//! Validated data types shared by every stage of the pipeline.
//!
//! Nothing in here runs an algorithm. Constructors enforce the invariants
//! once so downstream code can index freely.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Rows whose norm is further than this from 1 are treated as corrupt.
pub const NORM_TOLERANCE: f64 = 1e-2;

/// Rows already this close to unit norm are left bit-for-bit untouched,
/// which makes renormalization idempotent.
const NORM_EXACT: f64 = 1e-12;

/// Lower bound applied to every per-dimension variance.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Row-stochastic tolerance used when validating assignment matrices.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// N×d matrix of unit-norm embedding rows, stored in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    data: Array2<f64>,
}

impl EmbeddingMatrix {
    /// Validates `data` and renormalizes every row to unit length.
    ///
    /// Rows whose norm deviates from 1 by more than [`NORM_TOLERANCE`] are
    /// rejected rather than fixed.
    pub fn new(mut data: Array2<f64>, what: &'static str) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::Empty { what });
        }
        for (row, mut values) in data.axis_iter_mut(Axis(0)).enumerate() {
            if let Some(col) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue { what, row, col });
            }
            let norm = values.dot(&values).sqrt();
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::NormTooFarFromUnit { what, row, norm });
            }
            if (norm - 1.0).abs() > NORM_EXACT {
                values.mapv_inplace(|v| v / norm);
            }
        }
        Ok(Self { data })
    }

    /// Normalizes arbitrary non-zero rows to unit length before validating.
    /// Used by generators, never by file readers.
    pub fn normalized(mut data: Array2<f64>, what: &'static str) -> Result<Self> {
        for mut row in data.axis_iter_mut(Axis(0)) {
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 && norm.is_finite() {
                row.mapv_inplace(|v| v / norm);
            }
        }
        Self::new(data, what)
    }

    pub fn from_f32(data: ArrayView2<'_, f32>, what: &'static str) -> Result<Self> {
        Self::new(data.mapv(f64::from), what)
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.data.row(i)
    }

    pub fn n_rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn to_f32(&self) -> Array2<f32> {
        self.data.mapv(|v| v as f32)
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }

    /// Stacks `self` on top of `other`.
    pub fn stack(&self, other: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                what: "stacked embeddings",
                expected: self.dim(),
                found: other.dim(),
            });
        }
        let data = ndarray::concatenate(Axis(0), &[self.data.view(), other.data.view()])
            .expect("column counts checked above");
        Ok(Self { data })
    }
}

/// N×K row-stochastic matrix: the assignment variable, the soft pseudo-labels,
/// and one-hot support labels all live in this type.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexAssignments {
    z: Array2<f64>,
}

impl SimplexAssignments {
    pub fn new(z: Array2<f64>) -> Result<Self> {
        if z.ncols() == 0 {
            return Err(Error::Empty {
                what: "assignment classes",
            });
        }
        for (row, values) in z.axis_iter(Axis(0)).enumerate() {
            if let Some(col) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue {
                    what: "assignments",
                    row,
                    col,
                });
            }
            let sum: f64 = values.sum();
            if values.iter().any(|&v| !(0.0..=1.0).contains(&v))
                || (sum - 1.0).abs() > SIMPLEX_TOLERANCE
            {
                return Err(Error::InvalidParameter {
                    name: "assignments",
                    reason: format!("row {row} is not a probability vector (sum {sum})"),
                });
            }
        }
        Ok(Self { z })
    }

    /// Caller guarantees every row is a probability vector.
    pub(crate) fn from_array_unchecked(z: Array2<f64>) -> Self {
        debug_assert!(z.axis_iter(Axis(0)).all(|r| (r.sum() - 1.0).abs() <= 1e-6));
        Self { z }
    }

    pub fn one_hot(labels: &[usize], n_classes: usize) -> Result<Self> {
        let mut z = Array2::zeros((labels.len(), n_classes));
        for (index, &label) in labels.iter().enumerate() {
            if label >= n_classes {
                return Err(Error::LabelOutOfRange {
                    index,
                    label,
                    n_classes,
                });
            }
            z[[index, label]] = 1.0;
        }
        Ok(Self { z })
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.z.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.z.row(i)
    }

    pub fn n_rows(&self) -> usize {
        self.z.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.z.ncols()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.z
    }

    /// Row slice `[start, end)` as a new assignment matrix.
    pub fn rows(&self, start: usize, end: usize) -> SimplexAssignments {
        Self {
            z: self.z.slice(ndarray::s![start..end, ..]).to_owned(),
        }
    }
}

/// Class means plus one diagonal covariance shared by all classes.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmParams {
    /// K×d
    pub mu: Array2<f64>,
    /// d
    pub sigma_diag: Array1<f64>,
}

impl GmmParams {
    /// Means as given, variance `1/d` in every dimension.
    pub fn with_isotropic_init(mu: Array2<f64>) -> Self {
        let d = mu.ncols();
        Self {
            mu,
            sigma_diag: Array1::from_elem(d, 1.0 / d as f64),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.mu.nrows()
    }

    pub fn dim(&self) -> usize {
        self.mu.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma_diag.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "sigma_diag",
                expected: self.dim(),
                found: self.sigma_diag.len(),
            });
        }
        if let Some((row, col)) = self
            .mu
            .indexed_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(ix, _)| ix)
        {
            return Err(Error::NonFiniteValue {
                what: "class means",
                row,
                col,
            });
        }
        if let Some(col) = self
            .sigma_diag
            .iter()
            .position(|v| !v.is_finite() || *v < VARIANCE_FLOOR)
        {
            return Err(Error::InvalidParameter {
                name: "sigma_diag",
                reason: format!("entry {col} is below the variance floor or non-finite"),
            });
        }
        Ok(())
    }
}

/// Sparse directed neighbor graph; `neighbors[i]` holds `(j, w_ij)` pairs
/// sorted by descending weight.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityGraph {
    pub(crate) neighbors: Vec<Vec<(usize, f64)>>,
}

impl AffinityGraph {
    /// Graph on `n_nodes` nodes without any edge.
    pub fn empty(n_nodes: usize) -> Self {
        Self {
            neighbors: vec![Vec::new(); n_nodes],
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.neighbors[i]
    }

    pub fn n_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    /// Every edge weight multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            neighbors: self
                .neighbors
                .iter()
                .map(|row| row.iter().map(|&(j, w)| (j, w * factor)).collect())
                .collect(),
        }
    }

    /// Builds a graph from explicit adjacency lists, checking node range,
    /// self-edges and weight sign. Lists are re-sorted by descending weight.
    pub fn from_lists(mut neighbors: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let n = neighbors.len();
        for (i, row) in neighbors.iter_mut().enumerate() {
            for &(j, w) in row.iter() {
                if j >= n || j == i || !(w.is_finite() && w >= 0.0) {
                    return Err(Error::InvalidParameter {
                        name: "graph",
                        reason: format!("bad edge {i} -> {j} with weight {w}"),
                    });
                }
            }
            row.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        }
        Ok(Self { neighbors })
    }
}

/// Labeled shots of a few-shot task.
#[derive(Debug, Clone, PartialEq)]
pub struct Support {
    pub embeddings: EmbeddingMatrix,
    pub labels: Vec<usize>,
}

/// Solver hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    /// Weight of the text-prior term.
    pub lambda: f64,
    /// Weight of the support cross-entropy.
    pub gamma: f64,
    pub outer_iters: usize,
    pub inner_z_iters: usize,
    pub k_nn: usize,
    /// Confident samples per class averaged into the initial means
    /// when no support is available.
    pub top_m_init: usize,
    /// Union the directed kNN graph with its transpose.
    pub symmetrize_graph: bool,
}

impl Hyperparams {
    pub const OUTER_ITERS: usize = 10;
    pub const INNER_Z_ITERS: usize = 5;
    pub const K_NN: usize = 3;
    pub const TOP_M_INIT: usize = 8;
    pub const LAMBDA_ZERO_SHOT: f64 = 1.0;
    pub const LAMBDA_FEW_SHOT: f64 = 0.5;

    pub fn zero_shot() -> Self {
        Self {
            lambda: Self::LAMBDA_ZERO_SHOT,
            gamma: 0.0,
            outer_iters: Self::OUTER_ITERS,
            inner_z_iters: Self::INNER_Z_ITERS,
            k_nn: Self::K_NN,
            top_m_init: Self::TOP_M_INIT,
            symmetrize_graph: false,
        }
    }

    pub fn few_shot(gamma: f64) -> Self {
        Self {
            lambda: Self::LAMBDA_FEW_SHOT,
            gamma,
            ..Self::zero_shot()
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, value) in [("lambda", self.lambda), ("gamma", self.gamma)] {
            if !value.is_finite() || value < 0.0 {
                return Err(Error::InvalidParameter {
                    name,
                    reason: format!("must be a finite non-negative number, got {value}"),
                });
            }
        }
        if self.top_m_init == 0 {
            return Err(Error::InvalidParameter {
                name: "top_m_init",
                reason: "must be at least 1".into(),
            });
        }
        Ok(())
    }
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self::zero_shot()
    }
}

/// One transduction problem.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub query: EmbeddingMatrix,
    /// K×d class prototypes; K is its row count.
    pub text: EmbeddingMatrix,
    pub support: Option<Support>,
    pub temperature: f64,
    pub hyper: Hyperparams,
}

impl TaskSpec {
    pub fn n_classes(&self) -> usize {
        self.text.n_rows()
    }

    pub fn n_support(&self) -> usize {
        self.support.as_ref().map_or(0, |s| s.embeddings.n_rows())
    }
}

/// Checks every invariant of a task and renormalizes its embeddings.
/// Idempotent.
pub fn validate_task(spec: TaskSpec) -> Result<TaskSpec> {
    let TaskSpec {
        query,
        text,
        support,
        temperature,
        hyper,
    } = spec;
    let query = EmbeddingMatrix::new(query.into_inner(), "query embeddings")?;
    let text = EmbeddingMatrix::new(text.into_inner(), "text prototypes")?;
    if text.dim() != query.dim() {
        return Err(Error::DimensionMismatch {
            what: "text prototypes",
            expected: query.dim(),
            found: text.dim(),
        });
    }
    let support = match support {
        None => None,
        Some(Support { embeddings, labels }) => {
            let embeddings = EmbeddingMatrix::new(embeddings.into_inner(), "support embeddings")?;
            if embeddings.dim() != query.dim() {
                return Err(Error::DimensionMismatch {
                    what: "support embeddings",
                    expected: query.dim(),
                    found: embeddings.dim(),
                });
            }
            if labels.len() != embeddings.n_rows() {
                return Err(Error::LengthMismatch {
                    what: "support labels",
                    expected: embeddings.n_rows(),
                    found: labels.len(),
                });
            }
            if let Some((index, &label)) =
                labels.iter().enumerate().find(|(_, &l)| l >= text.n_rows())
            {
                return Err(Error::LabelOutOfRange {
                    index,
                    label,
                    n_classes: text.n_rows(),
                });
            }
            Some(Support { embeddings, labels })
        }
    };
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::InvalidParameter {
            name: "temperature",
            reason: format!("must be finite and positive, got {temperature}"),
        });
    }
    hyper.validate()?;
    Ok(TaskSpec {
        query,
        text,
        support,
        temperature,
        hyper,
    })
}
