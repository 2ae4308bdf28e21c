//! Few-shot protocol: validation shots, the support-weight grid search and
//! the final solve.

use std::io::Write;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numeric::argmax;
use crate::solver::{run, SolverState};
use crate::types::{
    validate_task, EmbeddingMatrix, Hyperparams, SimplexAssignments, Support, TaskSpec,
};

/// Candidate support weights.
pub const DEFAULT_GAMMA_GRID: [f64; 4] = [0.002, 0.01, 0.02, 0.2];

/// Upper bound on validation shots per class.
pub const MAX_VALIDATION_SHOTS: usize = 4;

/// Validation shots drawn per class for a given shot count.
pub fn validation_shots(shots_per_class: usize) -> usize {
    shots_per_class.min(MAX_VALIDATION_SHOTS)
}

/// Disjoint train and validation shots.
#[derive(Debug, Clone)]
pub struct ShotSplit {
    pub train: Support,
    pub validation: Support,
    /// Rows of the support set kept for training, ascending.
    pub train_indices: Vec<usize>,
    /// Rows of the validation source (pool if given, else support), ascending.
    pub validation_indices: Vec<usize>,
    /// Whether validation came from a separate pool.
    pub from_pool: bool,
}

fn select(set: &Support, indices: &[usize]) -> Result<Support> {
    let rows = set.embeddings.view().select(Axis(0), indices);
    Ok(Support {
        embeddings: EmbeddingMatrix::new(rows, "selected shots")?,
        labels: indices.iter().map(|&i| set.labels[i]).collect(),
    })
}

fn members_by_class(labels: &[usize], n_classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut members = vec![Vec::new(); n_classes];
    for (index, &label) in labels.iter().enumerate() {
        if label >= n_classes {
            return Err(Error::LabelOutOfRange {
                index,
                label,
                n_classes,
            });
        }
        members[label].push(index);
    }
    Ok(members)
}

/// Picks `min(4, shots_per_class)` validation shots per class, sampled
/// without replacement from `pool` when given, otherwise carved out of the
/// support (each class must then keep at least one training shot).
pub fn split_shots(
    support: &Support,
    n_classes: usize,
    shots_per_class: usize,
    pool: Option<&Support>,
    seed: u64,
) -> Result<ShotSplit> {
    if shots_per_class == 0 {
        return Err(Error::InvalidParameter {
            name: "shots_per_class",
            reason: "must be at least 1".into(),
        });
    }
    let per_class = validation_shots(shots_per_class);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let support_members = members_by_class(&support.labels, n_classes)?;

    let (train_indices, validation_indices, validation_source) = match pool {
        Some(pool) => {
            let pool_members = members_by_class(&pool.labels, n_classes)?;
            let mut picked = Vec::new();
            for (class, mut members) in pool_members.into_iter().enumerate() {
                if members.len() < per_class {
                    return Err(Error::InsufficientShots {
                        class,
                        available: members.len(),
                        required: per_class,
                    });
                }
                members.shuffle(&mut rng);
                picked.extend_from_slice(&members[..per_class]);
            }
            if let Some(class) = support_members.iter().position(Vec::is_empty) {
                return Err(Error::EmptyClass { class });
            }
            ((0..support.labels.len()).collect::<Vec<_>>(), picked, pool)
        }
        None => {
            let mut train = Vec::new();
            let mut picked = Vec::new();
            for (class, mut members) in support_members.into_iter().enumerate() {
                if members.len() <= per_class {
                    return Err(Error::InsufficientShots {
                        class,
                        available: members.len(),
                        required: per_class + 1,
                    });
                }
                members.shuffle(&mut rng);
                picked.extend_from_slice(&members[..per_class]);
                train.extend_from_slice(&members[per_class..]);
            }
            (train, picked, support)
        }
    };
    let mut train_indices = train_indices;
    let mut validation_indices = validation_indices;
    train_indices.sort_unstable();
    validation_indices.sort_unstable();
    Ok(ShotSplit {
        train: select(support, &train_indices)?,
        validation: select(validation_source, &validation_indices)?,
        train_indices,
        validation_indices,
        from_pool: pool.is_some(),
    })
}

/// Classifies every validation embedding by the assignment of its
/// cosine-nearest query sample.
pub fn nearest_query_labels(
    query: &EmbeddingMatrix,
    query_predictions: &[usize],
    validation: &EmbeddingMatrix,
) -> Vec<usize> {
    let sims = validation.view().dot(&query.view().t());
    sims.axis_iter(Axis(0))
        .map(|row| query_predictions[argmax(row)])
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaScore {
    pub gamma: f64,
    pub validation_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaSearch {
    pub best_gamma: f64,
    /// One entry per grid value, in grid order.
    pub scores: Vec<GammaScore>,
}

impl GammaSearch {
    /// `gamma,validation_accuracy` CSV.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "gamma,validation_accuracy")?;
        for s in &self.scores {
            writeln!(out, "{},{:.6}", s.gamma, s.validation_accuracy)?;
        }
        out.flush()
    }
}

/// Runs the solver once per grid value on `base` (query plus training
/// shots) and scores each by 1-NN validation accuracy. The best accuracy
/// wins; ties go to the smaller weight.
pub fn search_gamma(base: &TaskSpec, validation: &Support, grid: &[f64]) -> Result<GammaSearch> {
    if grid.is_empty() {
        return Err(Error::Empty { what: "gamma grid" });
    }
    let results: Vec<Result<GammaScore>> = grid
        .par_iter()
        .map(|&gamma| {
            let mut spec = base.clone();
            spec.hyper.gamma = gamma;
            let (_, state) = run(&spec)?;
            let predicted =
                nearest_query_labels(&spec.query, &state.predictions(), &validation.embeddings);
            let hits = predicted
                .iter()
                .zip(&validation.labels)
                .filter(|(p, t)| p == t)
                .count();
            Ok(GammaScore {
                gamma,
                validation_accuracy: hits as f64 / validation.labels.len() as f64,
            })
        })
        .collect();
    let scores = results.into_iter().collect::<Result<Vec<_>>>()?;
    let best = scores
        .iter()
        .copied()
        .reduce(|best, s| {
            let better = s.validation_accuracy > best.validation_accuracy
                || (s.validation_accuracy == best.validation_accuracy && s.gamma < best.gamma);
            if better {
                s
            } else {
                best
            }
        })
        .expect("grid is non-empty");
    Ok(GammaSearch {
        best_gamma: best.gamma,
        scores,
    })
}

#[derive(Debug, Clone)]
pub enum GammaChoice {
    /// Use this weight, no validation.
    Fixed(f64),
    /// Pick by validation over this grid.
    Search(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct FewShotOptions {
    pub gamma: GammaChoice,
    /// Text-prior weight; 0.5 when unset.
    pub lambda: Option<f64>,
    /// Separate labeled pool to draw validation shots from.
    pub validation_pool: Option<Support>,
    pub seed: u64,
}

impl Default for FewShotOptions {
    fn default() -> Self {
        Self {
            gamma: GammaChoice::Search(DEFAULT_GAMMA_GRID.to_vec()),
            lambda: None,
            validation_pool: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FewShotOutcome {
    pub assignments: SimplexAssignments,
    pub predictions: Vec<usize>,
    pub gamma: f64,
    pub search: Option<GammaSearch>,
    pub split: Option<ShotSplit>,
    pub state: SolverState,
}

/// Full few-shot pipeline: choose the support weight, then solve with it
/// on the whole support set.
pub fn run_fewshot(spec: &TaskSpec, options: &FewShotOptions) -> Result<FewShotOutcome> {
    let mut spec = validate_task(spec.clone())?;
    let support = spec.support.clone().ok_or(Error::Empty {
        what: "support set",
    })?;
    spec.hyper.lambda = options.lambda.unwrap_or(Hyperparams::LAMBDA_FEW_SHOT);

    let (gamma, search, split) = match &options.gamma {
        GammaChoice::Fixed(g) => (*g, None, None),
        GammaChoice::Search(grid) => {
            if grid.is_empty() {
                return Err(Error::Empty { what: "gamma grid" });
            }
            let counts = members_by_class(&support.labels, spec.n_classes())?;
            let shots = counts.iter().map(Vec::len).min().unwrap_or(0);
            if shots == 0 {
                let class = counts.iter().position(Vec::is_empty).unwrap_or(0);
                return Err(Error::EmptyClass { class });
            }
            let split = split_shots(
                &support,
                spec.n_classes(),
                shots,
                options.validation_pool.as_ref(),
                options.seed,
            )?;
            let mut base = spec.clone();
            base.support = Some(split.train.clone());
            let search = search_gamma(&base, &split.validation, grid)?;
            (search.best_gamma, Some(search), Some(split))
        }
    };

    spec.hyper.gamma = gamma;
    let (assignments, state) = run(&spec)?;
    Ok(FewShotOutcome {
        predictions: state.predictions(),
        assignments,
        gamma,
        search,
        split,
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_task, SynthParams};

    fn task(shots: usize) -> TaskSpec {
        let mut spec = generate_task(&SynthParams {
            classes: 3,
            dim: 8,
            query_per_class: 20,
            shots_per_class: shots,
            ..SynthParams::default()
        })
        .unwrap()
        .spec;
        spec.hyper = Hyperparams::few_shot(0.0);
        spec
    }

    #[test]
    fn validation_count_rule() {
        assert_eq!(validation_shots(1), 1);
        assert_eq!(validation_shots(4), 4);
        assert_eq!(validation_shots(16), 4);
    }

    #[test]
    fn carving_sixteen_shots_leaves_twelve() {
        let spec = task(16);
        let support = spec.support.as_ref().unwrap();
        let split = split_shots(support, 3, 16, None, 1).unwrap();
        for class in 0..3 {
            assert_eq!(
                split
                    .validation
                    .labels
                    .iter()
                    .filter(|&&l| l == class)
                    .count(),
                4
            );
            assert_eq!(
                split.train.labels.iter().filter(|&&l| l == class).count(),
                12
            );
        }
        assert!(split
            .train_indices
            .iter()
            .all(|i| !split.validation_indices.contains(i)));
    }

    #[test]
    fn one_shot_with_pool_uses_one_validation_shot_per_class() {
        let spec = task(1);
        let pool = task(4).support.unwrap();
        let split = split_shots(spec.support.as_ref().unwrap(), 3, 1, Some(&pool), 3).unwrap();
        assert_eq!(split.train.labels.len(), 3);
        assert_eq!(split.validation.labels.len(), 3);
        assert!(split.from_pool);
    }

    #[test]
    fn one_shot_without_pool_cannot_be_carved() {
        let spec = task(1);
        assert!(matches!(
            split_shots(spec.support.as_ref().unwrap(), 3, 1, None, 3),
            Err(Error::InsufficientShots { .. })
        ));
    }

    #[test]
    fn split_is_seed_deterministic() {
        let spec = task(8);
        let s = spec.support.as_ref().unwrap();
        let a = split_shots(s, 3, 8, None, 42).unwrap();
        let b = split_shots(s, 3, 8, None, 42).unwrap();
        assert_eq!(a.validation_indices, b.validation_indices);
    }

    #[test]
    fn empty_grid_is_an_error() {
        let spec = task(8);
        let opts = FewShotOptions {
            gamma: GammaChoice::Search(vec![]),
            ..FewShotOptions::default()
        };
        assert!(matches!(
            run_fewshot(&spec, &opts),
            Err(Error::Empty { .. })
        ));
        let v = spec.support.clone().unwrap();
        assert!(search_gamma(&spec, &v, &[]).is_err());
    }

    #[test]
    fn single_value_grid_is_returned() {
        let spec = task(8);
        let split = split_shots(spec.support.as_ref().unwrap(), 3, 8, None, 0).unwrap();
        let mut base = spec.clone();
        base.support = Some(split.train);
        let s = search_gamma(&base, &split.validation, &[0.37]).unwrap();
        assert_eq!(s.best_gamma, 0.37);
        assert_eq!(s.scores.len(), 1);
    }

    #[test]
    fn equal_scores_pick_the_smaller_gamma() {
        // A single class makes every validation prediction correct.
        let mut spec = generate_task(&SynthParams {
            classes: 1,
            dim: 4,
            query_per_class: 10,
            shots_per_class: 5,
            ..SynthParams::default()
        })
        .unwrap()
        .spec;
        spec.hyper = Hyperparams::few_shot(0.0);
        let split = split_shots(spec.support.as_ref().unwrap(), 1, 5, None, 0).unwrap();
        let mut base = spec.clone();
        base.support = Some(split.train);
        let s = search_gamma(&base, &split.validation, &[0.2, 0.01, 0.02]).unwrap();
        assert_eq!(s.best_gamma, 0.01);
        assert!(s.scores.iter().all(|x| x.validation_accuracy == 1.0));
    }

    #[test]
    fn nearest_query_uses_query_assignments() {
        let q = EmbeddingMatrix::new(ndarray::array![[1.0, 0.0], [0.0, 1.0]], "q").unwrap();
        let v = EmbeddingMatrix::new(ndarray::array![[0.8, 0.6], [0.6, 0.8]], "v").unwrap();
        assert_eq!(nearest_query_labels(&q, &[5, 7], &v), vec![5, 7]);
    }

    #[test]
    fn score_table_csv() {
        let s = GammaSearch {
            best_gamma: 0.2,
            scores: vec![
                GammaScore {
                    gamma: 0.002,
                    validation_accuracy: 0.5,
                },
                GammaScore {
                    gamma: 0.2,
                    validation_accuracy: 0.75,
                },
            ],
        };
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "gamma,validation_accuracy\n0.002,0.500000\n0.2,0.750000\n"
        );
    }
}
