//! Exact kNN affinity graph over unit-norm embeddings.

use std::io::Write;

use ndarray::{s, Axis};
use rayon::prelude::*;

use crate::types::{AffinityGraph, EmbeddingMatrix};

/// Rows per similarity block. Fixed so results never depend on the thread pool.
const BLOCK_ROWS: usize = 256;

/// Keeps the `k` best `(j, cosine)` candidates ordered by descending cosine,
/// lower index first on ties.
struct TopK {
    k: usize,
    items: Vec<(usize, f64)>,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    fn better(a: (usize, f64), b: (usize, f64)) -> bool {
        a.1 > b.1 || (a.1 == b.1 && a.0 < b.0)
    }

    fn offer(&mut self, j: usize, cos: f64) {
        if self.k == 0 {
            return;
        }
        if self.items.len() == self.k && !Self::better((j, cos), self.items[self.k - 1]) {
            return;
        }
        let pos = self
            .items
            .iter()
            .position(|&it| Self::better((j, cos), it))
            .unwrap_or(self.items.len());
        self.items.insert(pos, (j, cos));
        self.items.truncate(self.k);
    }
}

/// Directed kNN graph: every node keeps its `k` most cosine-similar other
/// nodes, with weight `max(0, cos)`.
///
/// Costs O(N²d) time and O(Nk) memory. With `k >= N - 1` this is the full
/// graph minus self-edges.
pub fn build_knn(embeddings: &EmbeddingMatrix, k: usize) -> AffinityGraph {
    let n = embeddings.n_rows();
    let all = embeddings.view();
    let starts: Vec<usize> = (0..n).step_by(BLOCK_ROWS).collect();
    let neighbors = starts
        .into_par_iter()
        .flat_map_iter(|start| {
            let end = (start + BLOCK_ROWS).min(n);
            let sims = all.slice(s![start..end, ..]).dot(&all.t());
            sims.axis_iter(Axis(0))
                .enumerate()
                .map(|(offset, row)| {
                    let i = start + offset;
                    let mut top = TopK::new(k);
                    for (j, &cos) in row.iter().enumerate() {
                        if j != i {
                            top.offer(j, cos);
                        }
                    }
                    top.items
                        .into_iter()
                        .map(|(j, cos)| (j, cos.max(0.0)))
                        .collect::<Vec<_>>()
                })
                .collect::<Vec<_>>()
        })
        .collect();
    AffinityGraph { neighbors }
}

impl AffinityGraph {
    /// Union with the transpose; an edge present in both directions keeps
    /// the larger weight. Lists may then exceed `k`.
    pub fn symmetrized(&self) -> AffinityGraph {
        let n = self.n_nodes();
        let mut lists: Vec<Vec<(usize, f64)>> = self.neighbors.clone();
        for (i, row) in self.neighbors.iter().enumerate() {
            for &(j, w) in row {
                match lists[j].iter_mut().find(|(m, _)| *m == i) {
                    Some(edge) => edge.1 = edge.1.max(w),
                    None => lists[j].push((i, w)),
                }
            }
        }
        for row in &mut lists {
            row.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        }
        debug_assert_eq!(lists.len(), n);
        AffinityGraph { neighbors: lists }
    }

    /// Text dump, one `i j w` line per edge.
    pub fn write_edges<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (i, row) in self.neighbors.iter().enumerate() {
            for &(j, w) in row {
                writeln!(out, "{i} {j} {w}")?;
            }
        }
        out.flush()
    }
}
