//! Per-row MAP completion.
//!
//! Observed cells are folded into the unaries of the missing cells, so a row
//! problem only ranges over its missing variables. Small state spaces are
//! solved exactly by enumeration; larger ones by dual decomposition into
//! single-edge slaves with projected-subgradient updates on the agreement
//! multipliers, which also yields a certificate (dual bound and gap).

use crate::error::{Error, Result};
use crate::model::MrfParams;
use crate::table::Cell;

pub const DEFAULT_STATE_CAP: u128 = 1_000_000;

/// One row's completion problem over its missing cells.
pub struct RowProblem {
    /// Column index of each missing cell, ascending.
    missing: Vec<usize>,
    cards: Vec<usize>,
    /// Folded unary for each missing cell: node potential plus edge terms to
    /// observed neighbors plus any external offset.
    unaries: Vec<Vec<f64>>,
    /// Edges between two missing cells: (low position, high position, values
    /// indexed by low label * high card + high label).
    edges: Vec<(usize, usize, Vec<f64>)>,
    /// For each position, incident missing-missing edges as indices into
    /// `edges`.
    incident: Vec<Vec<usize>>,
}

impl RowProblem {
    /// Build from a partially observed row. `offsets`, when given, has one
    /// vector per missing cell (in ascending column order) added to that
    /// cell's unary.
    pub fn new(params: &MrfParams, row: &[Cell], offsets: Option<&[Vec<f64>]>) -> Result<RowProblem> {
        RowProblem::new_with_edge_offsets(params, row, offsets, &[])
    }

    /// Like [`RowProblem::new`], plus additive pairwise offsets. Each entry is
    /// (col_j, col_k, table) with j < k and the table row-major over the label
    /// product. An offset between two missing cells becomes (or merges into)
    /// an edge of the row problem; between a missing and an observed cell it
    /// folds into the missing cell's unary; between two observed cells it is
    /// a constant and is dropped.
    pub fn new_with_edge_offsets(
        params: &MrfParams,
        row: &[Cell],
        offsets: Option<&[Vec<f64>]>,
        edge_offsets: &[(usize, usize, Vec<f64>)],
    ) -> Result<RowProblem> {
        let layout = params.layout();
        if row.len() != layout.n_cols() {
            return Err(Error::Dimension(format!(
                "row has {} cells for {} columns",
                row.len(),
                layout.n_cols()
            )));
        }
        let missing: Vec<usize> = (0..row.len()).filter(|&j| row[j].is_none()).collect();
        let cards: Vec<usize> = missing.iter().map(|&j| layout.cardinality(j)).collect();
        if let Some(offs) = offsets {
            if offs.len() != missing.len() {
                return Err(Error::Dimension(format!(
                    "{} offset vectors for {} missing cells",
                    offs.len(),
                    missing.len()
                )));
            }
            for (pos, off) in offs.iter().enumerate() {
                if off.len() != cards[pos] {
                    return Err(Error::Dimension(format!(
                        "offset vector for column {} has {} entries, cardinality is {}",
                        missing[pos],
                        off.len(),
                        cards[pos]
                    )));
                }
            }
        }

        let values = params.flatten();
        let mut unaries = Vec::with_capacity(missing.len());
        for (pos, &j) in missing.iter().enumerate() {
            let mut unary = vec![0.0; cards[pos]];
            for (a, slot) in unary.iter_mut().enumerate() {
                *slot = values[layout.node_entry(j, a)];
            }
            for &(e, other) in layout.incident(j) {
                if let Some(y) = row[other] {
                    for (a, slot) in unary.iter_mut().enumerate() {
                        *slot += values[layout.edge_entry_between(e, j, a, y as usize)];
                    }
                }
            }
            if let Some(offs) = offsets {
                for (a, slot) in unary.iter_mut().enumerate() {
                    *slot += offs[pos][a];
                }
            }
            unaries.push(unary);
        }

        let mut edges = Vec::new();
        let mut incident = vec![Vec::new(); missing.len()];
        for (pos, &j) in missing.iter().enumerate() {
            for &(e, other) in layout.incident(j) {
                if other <= j || row[other].is_some() {
                    continue;
                }
                let other_pos = missing.binary_search(&other).expect("missing column index");
                let cj = cards[pos];
                let co = cards[other_pos];
                let mut table = vec![0.0; cj * co];
                for a in 0..cj {
                    for b in 0..co {
                        table[a * co + b] = values[layout.edge_entry_between(e, j, a, b)];
                    }
                }
                incident[pos].push(edges.len());
                incident[other_pos].push(edges.len());
                edges.push((pos, other_pos, table));
            }
        }

        for &(j, k, ref table) in edge_offsets {
            if j >= k || k >= row.len() {
                return Err(Error::InvalidConfig(format!(
                    "pairwise offset columns ({},{}) invalid",
                    j, k
                )));
            }
            let cj = layout.cardinality(j);
            let ck = layout.cardinality(k);
            if table.len() != cj * ck {
                return Err(Error::Dimension(format!(
                    "pairwise offset table for ({},{}) has {} entries, expected {}",
                    j,
                    k,
                    table.len(),
                    cj * ck
                )));
            }
            match (row[j], row[k]) {
                (None, None) => {
                    let pj = missing.binary_search(&j).unwrap();
                    let pk = missing.binary_search(&k).unwrap();
                    let existing = edges.iter_mut().find(|&&mut (u, v, _)| {
                        (u == pj && v == pk) || (u == pk && v == pj)
                    });
                    match existing {
                        Some(&mut (u, _, ref mut t)) => {
                            // stored tables index low-position label first
                            for a in 0..cj {
                                for b in 0..ck {
                                    let idx = if u == pj { a * ck + b } else { b * cj + a };
                                    t[idx] += table[a * ck + b];
                                }
                            }
                        }
                        None => {
                            let (lo, hi) = if pj < pk { (pj, pk) } else { (pk, pj) };
                            let mut t = vec![0.0; cj * ck];
                            for a in 0..cj {
                                for b in 0..ck {
                                    let idx = if lo == pj { a * ck + b } else { b * cj + a };
                                    t[idx] = table[a * ck + b];
                                }
                            }
                            incident[lo].push(edges.len());
                            incident[hi].push(edges.len());
                            edges.push((lo, hi, t));
                        }
                    }
                }
                (None, Some(b)) => {
                    let pj = missing.binary_search(&j).unwrap();
                    for (a, slot) in unaries[pj].iter_mut().enumerate() {
                        *slot += table[a * ck + b as usize];
                    }
                }
                (Some(a), None) => {
                    let pk = missing.binary_search(&k).unwrap();
                    for (b, slot) in unaries[pk].iter_mut().enumerate() {
                        *slot += table[a as usize * ck + b];
                    }
                }
                (Some(_), Some(_)) => {}
            }
        }

        Ok(RowProblem {
            missing,
            cards,
            unaries,
            edges,
            incident,
        })
    }

    pub fn missing_columns(&self) -> &[usize] {
        &self.missing
    }

    pub fn n_missing(&self) -> usize {
        self.missing.len()
    }

    pub fn state_space(&self) -> u128 {
        self.cards.iter().fold(1u128, |acc, &c| acc * c as u128)
    }

    /// Objective over the missing cells: folded unaries plus missing-missing
    /// edge terms.
    pub fn score(&self, assignment: &[usize]) -> f64 {
        let mut s = 0.0;
        for (pos, &a) in assignment.iter().enumerate() {
            s += self.unaries[pos][a];
        }
        for &(u, v, ref table) in &self.edges {
            s += table[assignment[u] * self.cards[v] + assignment[v]];
        }
        s
    }

    #[inline]
    fn edge_value(&self, edge: usize, pos: usize, label: usize, other_label: usize) -> f64 {
        let (u, v, ref table) = self.edges[edge];
        if pos == u {
            table[label * self.cards[v] + other_label]
        } else {
            table[other_label * self.cards[v] + label]
        }
    }

    /// Score of every joint assignment in lexicographic order (last missing
    /// variable fastest), plus the missing columns and their cardinalities.
    /// Only sensible for small state spaces; callers must cap beforehand.
    pub fn enumerate_state_scores(&self) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
        let n = self.n_missing();
        let states = self.state_space() as usize;
        let mut scores = Vec::with_capacity(states);
        if n == 0 {
            return (Vec::new(), Vec::new(), scores);
        }
        let mut edges_by_high: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (e, &(u, v, _)) in self.edges.iter().enumerate() {
            edges_by_high[u.max(v)].push(e);
        }
        let mut current = vec![0usize; n];
        let mut partial = vec![0.0; n + 1];
        let mut depth = 0usize;
        let mut label = 0usize;
        loop {
            if label >= self.cards[depth] {
                if depth == 0 {
                    break;
                }
                depth -= 1;
                label = current[depth] + 1;
                continue;
            }
            current[depth] = label;
            let mut s = partial[depth] + self.unaries[depth][label];
            for &e in &edges_by_high[depth] {
                let (u, v, _) = self.edges[e];
                let other = if u == depth { v } else { u };
                s += self.edge_value(e, depth, label, current[other]);
            }
            if depth + 1 == n {
                scores.push(s);
                label += 1;
            } else {
                partial[depth + 1] = s;
                depth += 1;
                label = 0;
            }
        }
        (self.missing.clone(), self.cards.clone(), scores)
    }
}

/// Exact MAP by depth-first enumeration in lexicographic order; the first
/// best assignment wins, so ties resolve to the lexicographically smallest.
pub fn map_brute_force(problem: &RowProblem, cap: u128) -> Result<(Vec<usize>, f64)> {
    let states = problem.state_space();
    if states > cap {
        return Err(Error::StateSpaceTooLarge { states, cap });
    }
    if problem.n_missing() == 0 {
        return Ok((Vec::new(), 0.0));
    }
    let n = problem.n_missing();
    // edges whose higher endpoint is this position, for incremental scoring
    let mut edges_by_high: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (e, &(u, v, _)) in problem.edges.iter().enumerate() {
        edges_by_high[u.max(v)].push(e);
    }

    let mut best_assignment = vec![0usize; n];
    let mut best_score = f64::NEG_INFINITY;
    let mut current = vec![0usize; n];
    let mut partial = vec![0.0; n + 1];

    // iterative DFS over label vectors in lexicographic order
    let mut depth = 0usize;
    let mut label = 0usize;
    loop {
        if label >= problem.cards[depth] {
            if depth == 0 {
                break;
            }
            depth -= 1;
            label = current[depth] + 1;
            continue;
        }
        current[depth] = label;
        let mut s = partial[depth] + problem.unaries[depth][label];
        for &e in &edges_by_high[depth] {
            let (u, v, _) = problem.edges[e];
            let other = if u == depth { v } else { u };
            s += problem.edge_value(e, depth, label, current[other]);
        }
        if depth + 1 == n {
            if s > best_score {
                best_score = s;
                best_assignment.copy_from_slice(&current);
            }
            label += 1;
        } else {
            partial[depth + 1] = s;
            depth += 1;
            label = 0;
        }
    }
    Ok((best_assignment, best_score))
}

#[derive(Debug, Clone)]
pub struct DdConfig {
    pub max_iterations: usize,
    /// Step at iteration t is alpha0 / (1 + t / tau).
    pub alpha0: f64,
    pub tau: f64,
    /// Stop when (dual - primal) <= tolerance * max(1, |dual|).
    pub gap_tolerance: f64,
}

impl Default for DdConfig {
    fn default() -> Self {
        DdConfig {
            max_iterations: 500,
            alpha0: 1.0,
            tau: 50.0,
            gap_tolerance: 1e-6,
        }
    }
}

impl DdConfig {
    fn validate(&self) -> Result<()> {
        if self.alpha0 <= 0.0 || self.tau <= 0.0 {
            return Err(Error::InvalidConfig(
                "dual decomposition step parameters must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DdResult {
    pub assignment: Vec<usize>,
    pub primal: f64,
    pub dual_bound: f64,
    pub gap: f64,
    pub iterations: usize,
    /// Best-so-far primal per iteration (non-decreasing).
    pub primal_trace: Vec<f64>,
    /// Best-so-far dual bound per iteration (non-increasing).
    pub dual_trace: Vec<f64>,
}

/// MAP by dual decomposition into single-edge slaves.
///
/// Each missing-missing edge becomes a slave holding the edge table plus an
/// equal share of each endpoint's unary. Agreement multipliers are updated by
/// projected subgradient; the primal candidate per iteration is a per-node
/// majority vote over slave assignments (ties to the lowest label), polished
/// by greedy single-variable moves. Returns the best primal found, the final
/// dual bound, and their gap.
pub fn map_dual_decomp(problem: &RowProblem, cfg: &DdConfig) -> Result<DdResult> {
    cfg.validate()?;
    if problem.n_missing() == 0 {
        return Err(Error::InvalidConfig("row has no missing cells".into()));
    }
    let n = problem.n_missing();
    let deg: Vec<usize> = problem.incident.iter().map(|v| v.len()).collect();

    // isolated nodes have no slaves; their exact argmax is fixed up front
    let mut assignment = vec![0usize; n];
    let mut isolated_total = 0.0;
    for p in 0..n {
        if deg[p] == 0 {
            let (mut best, mut best_val) = (0usize, f64::NEG_INFINITY);
            for (a, &u) in problem.unaries[p].iter().enumerate() {
                if u > best_val {
                    best_val = u;
                    best = a;
                }
            }
            assignment[p] = best;
            isolated_total += best_val;
        }
    }

    if problem.edges.is_empty() {
        let primal = problem.score(&assignment);
        return Ok(DdResult {
            assignment,
            primal,
            dual_bound: primal,
            gap: 0.0,
            iterations: 1,
            primal_trace: vec![primal],
            dual_trace: vec![primal],
        });
    }

    // per-slave duals for both endpoints
    let mut duals: Vec<(Vec<f64>, Vec<f64>)> = problem
        .edges
        .iter()
        .map(|&(u, v, _)| (vec![0.0; problem.cards[u]], vec![0.0; problem.cards[v]]))
        .collect();
    let shares: Vec<Vec<f64>> = (0..n)
        .map(|p| {
            if deg[p] == 0 {
                Vec::new()
            } else {
                problem.unaries[p].iter().map(|&u| u / deg[p] as f64).collect()
            }
        })
        .collect();

    let mut slave_choice = vec![(0usize, 0usize); problem.edges.len()];
    let mut best_primal = f64::NEG_INFINITY;
    let mut best_assignment = assignment.clone();
    let mut best_dual = f64::INFINITY;
    let mut primal_trace = Vec::new();
    let mut dual_trace = Vec::new();
    let mut iterations = 0usize;

    for t in 0..cfg.max_iterations {
        iterations = t + 1;
        // solve slaves
        let mut dual_value = isolated_total;
        for (e, &(u, v, ref table)) in problem.edges.iter().enumerate() {
            let (du, dv) = &duals[e];
            let cv = problem.cards[v];
            let mut best = (0usize, 0usize);
            let mut best_val = f64::NEG_INFINITY;
            for a in 0..problem.cards[u] {
                let ua = shares[u][a] + du[a];
                for b in 0..cv {
                    let s = ua + shares[v][b] + dv[b] + table[a * cv + b];
                    if s > best_val {
                        best_val = s;
                        best = (a, b);
                    }
                }
            }
            slave_choice[e] = best;
            dual_value += best_val;
        }
        best_dual = best_dual.min(dual_value);

        // vote per node
        let mut votes: Vec<Vec<usize>> = (0..n).map(|p| vec![0usize; problem.cards[p]]).collect();
        for (e, &(u, v, _)) in problem.edges.iter().enumerate() {
            votes[u][slave_choice[e].0] += 1;
            votes[v][slave_choice[e].1] += 1;
        }
        for p in 0..n {
            if deg[p] == 0 {
                continue;
            }
            let (mut best, mut best_count) = (0usize, 0usize);
            for (a, &c) in votes[p].iter().enumerate() {
                if c > best_count {
                    best_count = c;
                    best = a;
                }
            }
            assignment[p] = best;
        }
        greedy_polish(problem, &mut assignment);
        let primal = problem.score(&assignment);
        if primal > best_primal {
            best_primal = primal;
            best_assignment.copy_from_slice(&assignment);
        }

        // second candidate: sequential decode under the dual-perturbed
        // unaries, which visits different basins as the multipliers move
        let mut decoded = assignment.to_vec();
        for p in 0..n {
            if deg[p] == 0 {
                continue;
            }
            let mut perturbed: Vec<f64> = problem.unaries[p].clone();
            for &e in &problem.incident[p] {
                let (u, _, _) = problem.edges[e];
                let dual = if u == p { &duals[e].0 } else { &duals[e].1 };
                for (slot, d) in perturbed.iter_mut().zip(dual) {
                    *slot += d;
                }
            }
            let mut best = (0usize, f64::NEG_INFINITY);
            for a in 0..problem.cards[p] {
                let mut s = perturbed[a];
                for &e in &problem.incident[p] {
                    let (u, v, _) = problem.edges[e];
                    let other = if u == p { v } else { u };
                    if other < p {
                        s += problem.edge_value(e, p, a, decoded[other]);
                    }
                }
                if s > best.1 {
                    best = (a, s);
                }
            }
            decoded[p] = best.0;
        }
        greedy_polish(problem, &mut decoded);
        let decoded_primal = problem.score(&decoded);
        if decoded_primal > best_primal {
            best_primal = decoded_primal;
            best_assignment.copy_from_slice(&decoded);
        }
        primal_trace.push(best_primal);
        dual_trace.push(best_dual);

        if best_dual - best_primal <= cfg.gap_tolerance * best_dual.abs().max(1.0) {
            break;
        }

        // subgradient step on the agreement duals
        let alpha = cfg.alpha0 / (1.0 + t as f64 / cfg.tau);
        for p in 0..n {
            if deg[p] < 2 {
                continue; // a single slave always agrees with itself
            }
            let inv = 1.0 / deg[p] as f64;
            for &e in &problem.incident[p] {
                let (u, _v, _) = problem.edges[e];
                let chosen = if u == p {
                    slave_choice[e].0
                } else {
                    slave_choice[e].1
                };
                let dual = if u == p { &mut duals[e].0 } else { &mut duals[e].1 };
                for (a, d) in dual.iter_mut().enumerate() {
                    let indicator = if a == chosen { 1.0 } else { 0.0 };
                    // step against the disagreement direction: the master
                    // minimizes the dual bound over the multipliers
                    *d -= alpha * (indicator - votes[p][a] as f64 * inv);
                }
            }
        }
    }

    Ok(DdResult {
        assignment: best_assignment,
        primal: best_primal,
        dual_bound: best_dual,
        gap: best_dual - best_primal,
        iterations,
        primal_trace,
        dual_trace,
    })
}

/// Greedy improvement until a local optimum: single-variable moves, then
/// joint moves over both endpoints of an edge (which escape frustrated-pair
/// traps that single flips cannot). Deterministic sweep order, strict
/// improvement only.
fn greedy_polish(problem: &RowProblem, assignment: &mut [usize]) {
    let single_gain = |assignment: &[usize], p: usize, a: usize| -> f64 {
        let current = assignment[p];
        let mut gain = problem.unaries[p][a] - problem.unaries[p][current];
        for &e in &problem.incident[p] {
            let (u, v, _) = problem.edges[e];
            let other = if u == p { v } else { u };
            gain += problem.edge_value(e, p, a, assignment[other])
                - problem.edge_value(e, p, current, assignment[other]);
        }
        gain
    };
    for _ in 0..50 {
        let mut changed = false;
        for p in 0..problem.n_missing() {
            let mut best = assignment[p];
            let mut best_gain = 0.0;
            for a in 0..problem.cards[p] {
                if a == assignment[p] {
                    continue;
                }
                let gain = single_gain(assignment, p, a);
                if gain > best_gain + 1e-15 {
                    best_gain = gain;
                    best = a;
                }
            }
            if best != assignment[p] {
                assignment[p] = best;
                changed = true;
            }
        }
        for e in 0..problem.edges.len() {
            let (u, v, _) = problem.edges[e];
            let (cu, cv) = (assignment[u], assignment[v]);
            let mut best = (cu, cv);
            let mut best_gain = 0.0;
            for a in 0..problem.cards[u] {
                for b in 0..problem.cards[v] {
                    if a == cu && b == cv {
                        continue;
                    }
                    // endpoint contributions with the shared edge counted once
                    let mut gain = problem.unaries[u][a] - problem.unaries[u][cu]
                        + problem.unaries[v][b]
                        - problem.unaries[v][cv]
                        + problem.edge_value(e, u, a, b)
                        - problem.edge_value(e, u, cu, cv);
                    for &f in &problem.incident[u] {
                        if f == e {
                            continue;
                        }
                        let (fu, fv, _) = problem.edges[f];
                        let other = if fu == u { fv } else { fu };
                        gain += problem.edge_value(f, u, a, assignment[other])
                            - problem.edge_value(f, u, cu, assignment[other]);
                    }
                    for &f in &problem.incident[v] {
                        if f == e {
                            continue;
                        }
                        let (fu, fv, _) = problem.edges[f];
                        let other = if fu == v { fv } else { fu };
                        gain += problem.edge_value(f, v, b, assignment[other])
                            - problem.edge_value(f, v, cv, assignment[other]);
                    }
                    if gain > best_gain + 1e-15 {
                        best_gain = gain;
                        best = (a, b);
                    }
                }
            }
            if best != (cu, cv) {
                assignment[u] = best.0;
                assignment[v] = best.1;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
}

/// Solve a row by enumeration when the state space is small, otherwise by
/// dual decomposition.
pub fn solve_row(problem: &RowProblem, cap: u128, dd: &DdConfig) -> Result<(Vec<usize>, f64)> {
    if problem.state_space() <= cap {
        map_brute_force(problem, cap)
    } else {
        let result = map_dual_decomp(problem, dd)?;
        Ok((result.assignment, result.primal))
    }
}
