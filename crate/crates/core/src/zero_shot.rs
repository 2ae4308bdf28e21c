//! Text-driven pseudo-labels and the initial class means.

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numeric::{argmax, log_softmax_in_place, softmax_in_place};
use crate::types::{EmbeddingMatrix, SimplexAssignments};

fn scaled_logits(
    features: &EmbeddingMatrix,
    text: &EmbeddingMatrix,
    tau: f64,
) -> Result<Array2<f64>> {
    if features.dim() != text.dim() {
        return Err(Error::DimensionMismatch {
            what: "text prototypes",
            expected: features.dim(),
            found: text.dim(),
        });
    }
    if !(tau.is_finite() && tau >= 0.0) {
        return Err(Error::InvalidParameter {
            name: "temperature",
            reason: format!("must be finite and non-negative, got {tau}"),
        });
    }
    let mut logits = features.view().dot(&text.view().t());
    logits.mapv_inplace(|v| v * tau);
    Ok(logits)
}

/// Row-wise softmax of an arbitrary logit matrix.
pub fn softmax_rows(mut logits: Array2<f64>) -> SimplexAssignments {
    logits
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .for_each(softmax_in_place);
    SimplexAssignments::from_array_unchecked(logits)
}

/// Temperature-scaled softmax of the cosine similarities between every
/// embedding row and every text prototype.
pub fn compute_soft_labels(
    features: &EmbeddingMatrix,
    text: &EmbeddingMatrix,
    tau: f64,
) -> Result<SimplexAssignments> {
    Ok(softmax_rows(scaled_logits(features, text, tau)?))
}

/// Logarithm of [`compute_soft_labels`], evaluated in log space so that
/// probabilities below the f64 range stay finite.
pub fn log_soft_labels(
    features: &EmbeddingMatrix,
    text: &EmbeddingMatrix,
    tau: f64,
) -> Result<Array2<f64>> {
    let mut logits = scaled_logits(features, text, tau)?;
    logits
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .for_each(log_softmax_in_place);
    Ok(logits)
}

/// Per-row argmax with ties resolved toward the lowest class index.
pub fn hard_predict(y: &SimplexAssignments) -> Vec<usize> {
    y.view().axis_iter(Axis(0)).map(argmax).collect()
}

/// Class means from the `m` most confident samples of every class.
///
/// Samples are ranked by their soft label for that class (ties by index);
/// one sample may contribute to several classes.
pub fn init_prototypes_topk(
    features: &EmbeddingMatrix,
    y: &SimplexAssignments,
    m: usize,
) -> Result<Array2<f64>> {
    if m == 0 {
        return Err(Error::InvalidParameter {
            name: "top_m_init",
            reason: "must be at least 1".into(),
        });
    }
    if y.n_rows() != features.n_rows() {
        return Err(Error::LengthMismatch {
            what: "soft labels",
            expected: features.n_rows(),
            found: y.n_rows(),
        });
    }
    let n = features.n_rows();
    let take = m.min(n);
    let yv = y.view();
    let mut mu = Array2::zeros((y.n_classes(), features.dim()));
    for (k, mut mu_k) in mu.axis_iter_mut(Axis(0)).enumerate() {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| yv[[b, k]].total_cmp(&yv[[a, k]]).then(a.cmp(&b)));
        for &i in &order[..take] {
            mu_k += &features.row(i);
        }
        mu_k /= take as f64;
    }
    Ok(mu)
}

/// Class-wise average of the labeled shots.
pub fn init_prototypes_support(
    support: &EmbeddingMatrix,
    labels: &[usize],
    n_classes: usize,
) -> Result<Array2<f64>> {
    class_means(support.view(), labels, n_classes)
}

pub(crate) fn class_means(
    rows: ArrayView2<'_, f64>,
    labels: &[usize],
    n_classes: usize,
) -> Result<Array2<f64>> {
    if labels.len() != rows.nrows() {
        return Err(Error::LengthMismatch {
            what: "support labels",
            expected: rows.nrows(),
            found: labels.len(),
        });
    }
    let mut mu = Array2::zeros((n_classes, rows.ncols()));
    let mut counts = vec![0usize; n_classes];
    for (index, (row, &label)) in rows.axis_iter(Axis(0)).zip(labels).enumerate() {
        if label >= n_classes {
            return Err(Error::LabelOutOfRange {
                index,
                label,
                n_classes,
            });
        }
        let mut mu_k = mu.row_mut(label);
        mu_k += &row;
        counts[label] += 1;
    }
    for (class, (mut mu_k, &count)) in mu.axis_iter_mut(Axis(0)).zip(&counts).enumerate() {
        if count == 0 {
            return Err(Error::EmptyClass { class });
        }
        mu_k /= count as f64;
    }
    Ok(mu)
}
