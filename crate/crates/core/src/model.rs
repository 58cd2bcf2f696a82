//! Pairwise MRF parameterization and scoring.
//!
//! A model assigns each full assignment y the score
//! sum_j node_j(y_j) + sum_{(j,k) in edges} edge_jk(y_j, y_k).
//! Node and edge tables live in one flat parameter vector: node tables in
//! column order, then edge tables in (j,k) lexicographic order, row-major.
//! The flat layout is what the trainer optimizes over and what the model file
//! stores, so it is fixed.

use crate::error::{Error, Result};
use crate::table::ColumnDomain;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::sync::Arc;

/// Ordered list of pairs (j,k), j<k, over column indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeSet {
    edges: Vec<(usize, usize)>,
}

impl EdgeSet {
    /// Every pair of columns, the default structure.
    pub fn complete(n_cols: usize) -> EdgeSet {
        let mut edges = Vec::with_capacity(n_cols * (n_cols.saturating_sub(1)) / 2);
        for j in 0..n_cols {
            for k in (j + 1)..n_cols {
                edges.push((j, k));
            }
        }
        EdgeSet { edges }
    }

    pub fn from_pairs(pairs: Vec<(usize, usize)>, n_cols: usize) -> Result<EdgeSet> {
        let mut edges: Vec<(usize, usize)> = pairs
            .into_iter()
            .map(|(a, b)| if a < b { (a, b) } else { (b, a) })
            .collect();
        edges.sort_unstable();
        edges.dedup();
        for &(j, k) in &edges {
            if j == k || k >= n_cols {
                return Err(Error::InvalidConfig(format!(
                    "edge ({},{}) invalid for {} columns",
                    j, k, n_cols
                )));
            }
        }
        Ok(EdgeSet { edges })
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

/// Index map between (table, entry) coordinates and the flat vector.
///
/// Shared by every parameter vector of a given shape; cheap to clone via Arc.
#[derive(Debug, Clone, PartialEq)]
pub struct MrfLayout {
    domains: Arc<Vec<ColumnDomain>>,
    edge_set: EdgeSet,
    node_offsets: Vec<usize>,
    edge_offsets: Vec<usize>,
    /// For each column, the edges incident to it as (edge index, other endpoint).
    incident: Vec<Vec<(usize, usize)>>,
    dim: usize,
}

impl MrfLayout {
    pub fn new(domains: Arc<Vec<ColumnDomain>>, edge_set: EdgeSet) -> Result<Arc<MrfLayout>> {
        let k = domains.len();
        for &(_, b) in edge_set.pairs() {
            if b >= k {
                return Err(Error::InvalidConfig(format!(
                    "edge endpoint {} out of range for {} columns",
                    b, k
                )));
            }
        }
        let mut node_offsets = Vec::with_capacity(k);
        let mut dim = 0usize;
        for d in domains.iter() {
            node_offsets.push(dim);
            dim += d.cardinality();
        }
        let mut edge_offsets = Vec::with_capacity(edge_set.len());
        let mut incident = vec![Vec::new(); k];
        for (e, &(j, kk)) in edge_set.pairs().iter().enumerate() {
            edge_offsets.push(dim);
            dim += domains[j].cardinality() * domains[kk].cardinality();
            incident[j].push((e, kk));
            incident[kk].push((e, j));
        }
        Ok(Arc::new(MrfLayout {
            domains,
            edge_set,
            node_offsets,
            edge_offsets,
            incident,
            dim,
        }))
    }

    pub fn complete(domains: Arc<Vec<ColumnDomain>>) -> Result<Arc<MrfLayout>> {
        let k = domains.len();
        MrfLayout::new(domains, EdgeSet::complete(k))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_cols(&self) -> usize {
        self.domains.len()
    }

    pub fn domains(&self) -> &Arc<Vec<ColumnDomain>> {
        &self.domains
    }

    pub fn cardinality(&self, j: usize) -> usize {
        self.domains[j].cardinality()
    }

    pub fn edge_set(&self) -> &EdgeSet {
        &self.edge_set
    }

    /// Edges incident to column j as (edge index, other endpoint).
    pub fn incident(&self, j: usize) -> &[(usize, usize)] {
        &self.incident[j]
    }

    #[inline]
    pub fn node_entry(&self, j: usize, label: usize) -> usize {
        debug_assert!(label < self.cardinality(j));
        self.node_offsets[j] + label
    }

    /// Flat index of edge table entry. `a` labels the lower endpoint of the
    /// edge as stored, `b` the higher one.
    #[inline]
    pub fn edge_entry(&self, e: usize, a: usize, b: usize) -> usize {
        let (j, k) = self.edge_set.pairs()[e];
        debug_assert!(a < self.cardinality(j) && b < self.cardinality(k));
        self.edge_offsets[e] + a * self.cardinality(k) + b
    }

    /// Flat index of the edge entry for columns (col_a, col_b) with labels
    /// (la, lb), in either order.
    #[inline]
    pub fn edge_entry_between(&self, e: usize, col_a: usize, la: usize, lb: usize) -> usize {
        let (j, _) = self.edge_set.pairs()[e];
        if col_a == j {
            self.edge_entry(e, la, lb)
        } else {
            self.edge_entry(e, lb, la)
        }
    }
}

/// Node and edge potential tables over a layout, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct MrfParams {
    layout: Arc<MrfLayout>,
    values: Vec<f64>,
}

impl MrfParams {
    pub fn zeros(layout: Arc<MrfLayout>) -> MrfParams {
        let dim = layout.dim();
        MrfParams {
            layout,
            values: vec![0.0; dim],
        }
    }

    /// Rebuild from a flat vector (the inverse of [`MrfParams::flatten`]).
    pub fn from_flat(layout: Arc<MrfLayout>, values: Vec<f64>) -> Result<MrfParams> {
        if values.len() != layout.dim() {
            return Err(Error::Dimension(format!(
                "flat vector has {} entries, layout needs {}",
                values.len(),
                layout.dim()
            )));
        }
        Ok(MrfParams { layout, values })
    }

    pub fn layout(&self) -> &Arc<MrfLayout> {
        &self.layout
    }

    pub fn flatten(&self) -> &[f64] {
        &self.values
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn node(&self, j: usize, label: usize) -> f64 {
        self.values[self.layout.node_entry(j, label)]
    }

    #[inline]
    pub fn edge(&self, e: usize, a: usize, b: usize) -> f64 {
        self.values[self.layout.edge_entry(e, a, b)]
    }

    /// Full assignment score: all node terms plus all edge terms.
    pub fn score_row(&self, assignment: &[usize]) -> Result<f64> {
        let layout = &self.layout;
        if assignment.len() != layout.n_cols() {
            return Err(Error::Dimension(format!(
                "assignment has {} labels for {} columns",
                assignment.len(),
                layout.n_cols()
            )));
        }
        for (j, &y) in assignment.iter().enumerate() {
            if y >= layout.cardinality(j) {
                return Err(Error::Domain(format!(
                    "label {} out of range for column {}",
                    y, j
                )));
            }
        }
        let mut score = 0.0;
        for (j, &y) in assignment.iter().enumerate() {
            score += self.node(j, y);
        }
        for (e, &(j, k)) in layout.edge_set().pairs().iter().enumerate() {
            score += self.edge(e, assignment[j], assignment[k]);
        }
        Ok(score)
    }

    /// Sum of all score terms that touch at least one variable in `piece_vars`,
    /// with candidate labels for those variables and `context` labels
    /// elsewhere. Edge terms carry full weight, so score differences between
    /// two candidates agree exactly with full-row score differences.
    pub fn piece_margin_score(
        &self,
        context: &[usize],
        piece_vars: &[usize],
        candidate: &[usize],
    ) -> Result<f64> {
        let layout = &self.layout;
        if piece_vars.is_empty() || piece_vars.len() > 2 {
            return Err(Error::InvalidConfig(
                "piece must target one or two variables".into(),
            ));
        }
        if piece_vars.len() != candidate.len() {
            return Err(Error::Dimension(
                "candidate length must match piece variable count".into(),
            ));
        }
        if context.len() != layout.n_cols() {
            return Err(Error::Dimension(format!(
                "context has {} labels for {} columns",
                context.len(),
                layout.n_cols()
            )));
        }
        let label_at = |col: usize| -> usize {
            for (u, &v) in piece_vars.iter().enumerate() {
                if v == col {
                    return candidate[u];
                }
            }
            context[col]
        };
        let mut score = 0.0;
        for (&j, &cand) in piece_vars.iter().zip(candidate.iter()) {
            if cand >= layout.cardinality(j) {
                return Err(Error::Domain(format!(
                    "candidate label {} out of range for column {}",
                    cand, j
                )));
            }
            score += self.node(j, cand);
            for &(e, other) in layout.incident(j) {
                // count each within-piece edge once
                if piece_vars.contains(&other) && other < j {
                    continue;
                }
                let lo = label_at(other);
                if lo >= layout.cardinality(other) {
                    return Err(Error::Domain(format!(
                        "context label {} out of range for column {}",
                        lo, other
                    )));
                }
                score += self.values[layout.edge_entry_between(e, j, cand, lo)];
            }
        }
        Ok(score)
    }

    /// Score of every label of column j with the rest of the row fixed:
    /// node potential plus all incident edge terms.
    pub fn conditional_scores(&self, row: &[usize], j: usize) -> Vec<f64> {
        let layout = &self.layout;
        let card = layout.cardinality(j);
        let mut scores = vec![0.0; card];
        for (a, slot) in scores.iter_mut().enumerate() {
            *slot = self.values[layout.node_entry(j, a)];
        }
        for &(e, other) in layout.incident(j) {
            let lo = row[other];
            for (a, slot) in scores.iter_mut().enumerate() {
                *slot += self.values[layout.edge_entry_between(e, j, a, lo)];
            }
        }
        scores
    }

    /// Per-column tree scores with half-weighted edges. They decompose the
    /// full score exactly: the values sum to `score_row`.
    pub fn tree_scores(&self, assignment: &[usize]) -> Result<Vec<f64>> {
        let layout = &self.layout;
        if assignment.len() != layout.n_cols() {
            return Err(Error::Dimension("assignment length mismatch".into()));
        }
        let mut scores = Vec::with_capacity(layout.n_cols());
        for (j, &y) in assignment.iter().enumerate() {
            let mut s = self.node(j, y);
            for &(e, other) in layout.incident(j) {
                s += 0.5 * self.values[layout.edge_entry_between(e, j, y, assignment[other])];
            }
            scores.push(s);
        }
        Ok(scores)
    }
}

/// Number of positions where two label slices differ.
pub fn delta_hamming(u: &[usize], u_bar: &[usize]) -> usize {
    debug_assert_eq!(u.len(), u_bar.len());
    u.iter().zip(u_bar.iter()).filter(|(a, b)| a != b).count()
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    version: u32,
    domains: Vec<ColumnDomain>,
    edges: Vec<(usize, usize)>,
    values: Vec<f64>,
}

const MODEL_DOC_VERSION: u32 = 1;

/// Versioned text serialization of a model; parameter values round-trip
/// exactly.
pub fn write_model<W: Write>(params: &MrfParams, w: W) -> Result<()> {
    let doc = ModelDoc {
        version: MODEL_DOC_VERSION,
        domains: params.layout().domains().as_ref().clone(),
        edges: params.layout().edge_set().pairs().to_vec(),
        values: params.flatten().to_vec(),
    };
    serde_json::to_writer(w, &doc)?;
    Ok(())
}

pub fn read_model<R: Read>(r: R) -> Result<MrfParams> {
    let doc: ModelDoc = serde_json::from_reader(r)?;
    if doc.version != MODEL_DOC_VERSION {
        return Err(Error::Format(format!(
            "unsupported model document version {}",
            doc.version
        )));
    }
    let domains = Arc::new(doc.domains);
    let k = domains.len();
    let layout = MrfLayout::new(domains, EdgeSet::from_pairs(doc.edges, k)?)?;
    MrfParams::from_flat(layout, doc.values)
}
