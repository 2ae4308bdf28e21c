//! Seeded synthetic transduction tasks.
//!
//! Class directions are uniform on the unit sphere. A query sample of class
//! `k` is `normalize(sep · dir_k + ε)` with `ε ~ N(0, I)`, and the text
//! prototype is `normalize(dir_k + noise · ε')`, so `noise` controls how
//! unreliable the text prior is. Support and validation shots follow the
//! query model. Every component draws from its own ChaCha stream, so e.g.
//! the query set does not change with the shot count.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::io::{write_config, write_emb1, write_labels};
use crate::types::{EmbeddingMatrix, Hyperparams, Support, TaskSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub classes: usize,
    pub dim: usize,
    pub query_per_class: usize,
    pub shots_per_class: usize,
    pub class_sep: f64,
    pub prototype_noise: f64,
    pub tau: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    /// The reference task used by the regression suite.
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 32,
            query_per_class: 200,
            shots_per_class: 4,
            class_sep: 3.0,
            prototype_noise: 0.6,
            tau: 30.0,
            seed: 7,
        }
    }
}

impl SynthParams {
    /// `key=value` pairs named after the `synth` command flags.
    pub fn to_config(&self) -> Vec<(String, String)> {
        [
            ("classes", self.classes.to_string()),
            ("dim", self.dim.to_string()),
            ("query-per-class", self.query_per_class.to_string()),
            ("shots", self.shots_per_class.to_string()),
            ("sep", self.class_sep.to_string()),
            ("noise", self.prototype_noise.to_string()),
            ("tau", self.tau.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    fn validate(&self) -> Result<()> {
        let bad = |name: &'static str, reason: &str| {
            Err(Error::InvalidParameter {
                name,
                reason: reason.into(),
            })
        };
        if self.classes == 0 {
            return bad("classes", "must be at least 1");
        }
        if self.dim < 2 {
            return bad("dim", "must be at least 2");
        }
        if self.query_per_class == 0 {
            return bad("query_per_class", "must be at least 1");
        }
        if !(self.class_sep.is_finite() && self.class_sep > 0.0) {
            return bad("class_sep", "must be finite and positive");
        }
        if !(self.prototype_noise.is_finite() && self.prototype_noise >= 0.0) {
            return bad("prototype_noise", "must be finite and non-negative");
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return bad("tau", "must be finite and positive");
        }
        Ok(())
    }
}

/// A generated task with the raw `f32` matrices it was built from, so that
/// writing and re-reading it reproduces the same embeddings exactly.
#[derive(Debug, Clone)]
pub struct SynthTask {
    pub spec: TaskSpec,
    pub truth: Vec<usize>,
    pub query_raw: Array2<f32>,
    pub text_raw: Array2<f32>,
    pub support_raw: Option<(Array2<f32>, Vec<usize>)>,
    /// Held-out labeled shots from the same model, as many per class as
    /// the support, for validating hyper-parameters.
    pub validation: Option<Support>,
    pub validation_raw: Option<(Array2<f32>, Vec<usize>)>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit_f32(v: &[f64]) -> Vec<f32> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / norm) as f32).collect()
}

fn samples(
    directions: &[Vec<f64>],
    labels: &[usize],
    sep: f64,
    rng: &mut ChaCha8Rng,
) -> Array2<f32> {
    let d = directions[0].len();
    let mut out = Array2::zeros((labels.len(), d));
    for (mut row, &label) in out.axis_iter_mut(Axis(0)).zip(labels) {
        let noise = gaussian(rng, d);
        let v: Vec<f64> = directions[label]
            .iter()
            .zip(&noise)
            .map(|(c, e)| sep * c + e)
            .collect();
        for (dst, src) in row.iter_mut().zip(unit_f32(&v)) {
            *dst = src;
        }
    }
    out
}

/// Generates a task fully determined by `params`.
pub fn generate_task(params: &SynthParams) -> Result<SynthTask> {
    params.validate()?;
    let (k, d) = (params.classes, params.dim);

    let mut dir_rng = stream(params.seed, 0);
    let directions: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let g = gaussian(&mut dir_rng, d);
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            g.into_iter().map(|x| x / norm).collect()
        })
        .collect();

    let mut truth: Vec<usize> = (0..k)
        .flat_map(|c| std::iter::repeat_n(c, params.query_per_class))
        .collect();
    truth.shuffle(&mut stream(params.seed, 1));
    let query_raw = samples(
        &directions,
        &truth,
        params.class_sep,
        &mut stream(params.seed, 2),
    );

    let mut proto_rng = stream(params.seed, 3);
    let mut text_raw = Array2::zeros((k, d));
    for (mut row, dir) in text_raw.axis_iter_mut(Axis(0)).zip(&directions) {
        let noise = gaussian(&mut proto_rng, d);
        let v: Vec<f64> = dir
            .iter()
            .zip(&noise)
            .map(|(c, e)| c + params.prototype_noise * e)
            .collect();
        for (dst, src) in row.iter_mut().zip(unit_f32(&v)) {
            *dst = src;
        }
    }

    let shots = |stream_id: u64| {
        (params.shots_per_class > 0).then(|| {
            let labels: Vec<usize> = (0..k)
                .flat_map(|c| std::iter::repeat_n(c, params.shots_per_class))
                .collect();
            let emb = samples(
                &directions,
                &labels,
                params.class_sep,
                &mut stream(params.seed, stream_id),
            );
            (emb, labels)
        })
    };
    let as_support = |raw: &Option<(Array2<f32>, Vec<usize>)>, what| -> Result<Option<Support>> {
        raw.as_ref()
            .map(|(emb, labels)| {
                Ok(Support {
                    embeddings: EmbeddingMatrix::from_f32(emb.view(), what)?,
                    labels: labels.clone(),
                })
            })
            .transpose()
    };
    let support_raw = shots(4);
    let validation_raw = shots(5);
    let support = as_support(&support_raw, "support embeddings")?;
    let validation = as_support(&validation_raw, "validation embeddings")?;
    let spec = TaskSpec {
        query: EmbeddingMatrix::from_f32(query_raw.view(), "query embeddings")?,
        text: EmbeddingMatrix::from_f32(text_raw.view(), "text prototypes")?,
        support,
        temperature: params.tau,
        hyper: Hyperparams::zero_shot(),
    };
    Ok(SynthTask {
        spec,
        truth,
        query_raw,
        text_raw,
        support_raw,
        validation,
        validation_raw,
    })
}

/// File names inside a task directory.
pub mod files {
    pub const QUERY: &str = "query.emb";
    pub const TEXT: &str = "text.emb";
    pub const SUPPORT: &str = "support.emb";
    pub const SUPPORT_LABELS: &str = "support.labels";
    pub const VALIDATION: &str = "validation.emb";
    pub const VALIDATION_LABELS: &str = "validation.labels";
    pub const TRUTH: &str = "truth.labels";
    pub const CONFIG: &str = "task.cfg";
}

/// Writes `query.emb`, `text.emb`, `truth.labels`, `task.cfg` and, when
/// shots were drawn, the support and validation embeddings and labels.
pub fn write_task_dir(task: &SynthTask, params: &SynthParams, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_emb1(dir.join(files::QUERY), task.query_raw.view())?;
    write_emb1(dir.join(files::TEXT), task.text_raw.view())?;
    if let Some((emb, labels)) = &task.support_raw {
        write_emb1(dir.join(files::SUPPORT), emb.view())?;
        write_labels(labels, dir.join(files::SUPPORT_LABELS))?;
    }
    if let Some((emb, labels)) = &task.validation_raw {
        write_emb1(dir.join(files::VALIDATION), emb.view())?;
        write_labels(labels, dir.join(files::VALIDATION_LABELS))?;
    }
    write_labels(&task.truth, dir.join(files::TRUTH))?;
    write_config(&params.to_config(), dir.join(files::CONFIG))
}
