//! Joint imputation across rows under label and pairwise count constraints.
//!
//! Targets come from observed-value distributions; each constraint carries a
//! Lagrange multiplier per count entry. The solver alternates per-row MAP
//! under dual-adjusted potentials with subgradient updates on the
//! multipliers, keeps the iterate with the smallest total violation, and
//! finishes with a greedy count-repair pass for label constraints, since an
//! equality-constrained subgradient loop can oscillate around integer count
//! targets without ever landing on them (all rows of a symmetric instance
//! move in lockstep).

use crate::error::{Error, Result};
use crate::infer::{solve_row, DdConfig, RowProblem, DEFAULT_STATE_CAP};
use crate::model::MrfParams;
use crate::table::{CategoricalTable, Mask};
use rayon::prelude::*;

/// A count-target constraint with its dual multipliers.
#[derive(Debug, Clone)]
pub enum DistributionConstraint {
    /// Counts over the originally-missing cells of one column.
    Label {
        col: usize,
        targets: Vec<f64>,
        duals: Vec<f64>,
    },
    /// Counts over rows where at least one of the pair was missing; entry
    /// (a,b) is indexed a * card(k) + b for columns (j,k), j < k.
    Pairwise {
        cols: (usize, usize),
        targets: Vec<f64>,
        duals: Vec<f64>,
    },
}

impl DistributionConstraint {
    pub fn columns(&self) -> Vec<usize> {
        match self {
            DistributionConstraint::Label { col, .. } => vec![*col],
            DistributionConstraint::Pairwise { cols, .. } => vec![cols.0, cols.1],
        }
    }

    fn targets(&self) -> &[f64] {
        match self {
            DistributionConstraint::Label { targets, .. } => targets,
            DistributionConstraint::Pairwise { targets, .. } => targets,
        }
    }

    fn duals(&self) -> &[f64] {
        match self {
            DistributionConstraint::Label { duals, .. } => duals,
            DistributionConstraint::Pairwise { duals, .. } => duals,
        }
    }

    fn duals_mut(&mut self) -> &mut [f64] {
        match self {
            DistributionConstraint::Label { duals, .. } => duals,
            DistributionConstraint::Pairwise { duals, .. } => duals,
        }
    }
}

/// Which constraints to derive from a masked table.
#[derive(Debug, Clone)]
pub struct ConstraintMenu {
    pub label: bool,
    pub pairwise: Option<PairSelection>,
}

impl ConstraintMenu {
    pub fn none() -> Self {
        ConstraintMenu {
            label: false,
            pairwise: None,
        }
    }
    pub fn label_only() -> Self {
        ConstraintMenu {
            label: true,
            pairwise: None,
        }
    }
    pub fn label_and_pairwise() -> Self {
        ConstraintMenu {
            label: true,
            pairwise: Some(PairSelection::TopCorrelated(5)),
        }
    }
}

#[derive(Debug, Clone)]
pub enum PairSelection {
    /// The most associated observed column pairs (Cramer's V on co-observed
    /// rows), bounding the dual dimensionality.
    TopCorrelated(usize),
    All,
    Explicit(Vec<(usize, usize)>),
}

/// Derive constraints from the observed cells of a masked table.
///
/// Label targets for column j distribute the observed label proportions over
/// that column's missing cells, clamping each label at the count it still
/// needs (observed counts may already exceed the proportional share) and
/// rescaling to the number of missing cells. Pairwise targets do the same
/// over rows where at least one of the pair is missing.
pub fn build_constraints(
    masked: &CategoricalTable,
    menu: &ConstraintMenu,
) -> Result<Vec<DistributionConstraint>> {
    let mut out = Vec::new();
    if menu.label {
        for j in 0..masked.n_cols() {
            out.push(build_label_constraint(masked, j)?);
        }
    }
    if let Some(selection) = &menu.pairwise {
        let pairs = match selection {
            PairSelection::Explicit(pairs) => pairs.clone(),
            PairSelection::All => {
                let mut pairs = Vec::new();
                for j in 0..masked.n_cols() {
                    for k in (j + 1)..masked.n_cols() {
                        pairs.push((j, k));
                    }
                }
                pairs
            }
            PairSelection::TopCorrelated(top) => select_correlated_pairs(masked, *top),
        };
        for (j, k) in pairs {
            out.push(build_pairwise_constraint(masked, j, k)?);
        }
    }
    Ok(out)
}

pub fn build_label_constraint(masked: &CategoricalTable, j: usize) -> Result<DistributionConstraint> {
    let card = masked.domain(j).cardinality();
    let mut observed = vec![0usize; card];
    let mut missing = 0usize;
    for i in 0..masked.n_rows() {
        match masked.cell(i, j) {
            Some(v) => observed[v as usize] += 1,
            None => missing += 1,
        }
    }
    let observed_total: usize = observed.iter().sum();
    if observed_total == 0 {
        return Err(Error::NoObservedData(masked.domain(j).name.clone()));
    }
    let n = masked.n_rows() as f64;
    let mut targets = vec![0.0; card];
    if missing > 0 {
        let mut raw_sum = 0.0;
        for (l, t) in targets.iter_mut().enumerate() {
            let p = observed[l] as f64 / observed_total as f64;
            *t = (p * n - observed[l] as f64).max(0.0);
            raw_sum += *t;
        }
        if raw_sum > 0.0 {
            let scale = missing as f64 / raw_sum;
            for t in targets.iter_mut() {
                *t *= scale;
            }
        } else {
            for (l, t) in targets.iter_mut().enumerate() {
                *t = observed[l] as f64 / observed_total as f64 * missing as f64;
            }
        }
    }
    Ok(DistributionConstraint::Label {
        col: j,
        targets,
        duals: vec![0.0; card],
    })
}

pub fn build_pairwise_constraint(
    masked: &CategoricalTable,
    j: usize,
    k: usize,
) -> Result<DistributionConstraint> {
    let (j, k) = if j < k { (j, k) } else { (k, j) };
    let cj = masked.domain(j).cardinality();
    let ck = masked.domain(k).cardinality();
    let mut co_counts = vec![0usize; cj * ck];
    let mut co_total = 0usize;
    let mut open_rows = 0usize;
    for i in 0..masked.n_rows() {
        match (masked.cell(i, j), masked.cell(i, k)) {
            (Some(a), Some(b)) => {
                co_counts[a as usize * ck + b as usize] += 1;
                co_total += 1;
            }
            _ => open_rows += 1,
        }
    }
    if co_total == 0 {
        return Err(Error::NoObservedData(format!(
            "{},{}",
            masked.domain(j).name,
            masked.domain(k).name
        )));
    }
    let n = masked.n_rows() as f64;
    let mut targets = vec![0.0; cj * ck];
    if open_rows > 0 {
        let mut raw_sum = 0.0;
        for (idx, t) in targets.iter_mut().enumerate() {
            let q = co_counts[idx] as f64 / co_total as f64;
            *t = (q * n - co_counts[idx] as f64).max(0.0);
            raw_sum += *t;
        }
        if raw_sum > 0.0 {
            let scale = open_rows as f64 / raw_sum;
            for t in targets.iter_mut() {
                *t *= scale;
            }
        } else {
            for (idx, t) in targets.iter_mut().enumerate() {
                *t = co_counts[idx] as f64 / co_total as f64 * open_rows as f64;
            }
        }
    }
    Ok(DistributionConstraint::Pairwise {
        cols: (j, k),
        targets,
        duals: vec![0.0; cj * ck],
    })
}

/// Rank observed column pairs by Cramer's V over co-observed rows and keep
/// the strongest `top`.
pub fn select_correlated_pairs(masked: &CategoricalTable, top: usize) -> Vec<(usize, usize)> {
    let mut scored: Vec<(f64, (usize, usize))> = Vec::new();
    for j in 0..masked.n_cols() {
        for k in (j + 1)..masked.n_cols() {
            if let Some(v) = cramers_v(masked, j, k) {
                scored.push((v, (j, k)));
            }
        }
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    scored.into_iter().take(top).map(|(_, p)| p).collect()
}

fn cramers_v(masked: &CategoricalTable, j: usize, k: usize) -> Option<f64> {
    let cj = masked.domain(j).cardinality();
    let ck = masked.domain(k).cardinality();
    if cj < 2 || ck < 2 {
        return None;
    }
    let mut counts = vec![0f64; cj * ck];
    let mut total = 0f64;
    for i in 0..masked.n_rows() {
        if let (Some(a), Some(b)) = (masked.cell(i, j), masked.cell(i, k)) {
            counts[a as usize * ck + b as usize] += 1.0;
            total += 1.0;
        }
    }
    if total < 2.0 {
        return None;
    }
    let mut row_tot = vec![0f64; cj];
    let mut col_tot = vec![0f64; ck];
    for a in 0..cj {
        for b in 0..ck {
            row_tot[a] += counts[a * ck + b];
            col_tot[b] += counts[a * ck + b];
        }
    }
    let mut chi2 = 0.0;
    for a in 0..cj {
        for b in 0..ck {
            let expected = row_tot[a] * col_tot[b] / total;
            if expected > 0.0 {
                let d = counts[a * ck + b] - expected;
                chi2 += d * d / expected;
            }
        }
    }
    let m = (cj.min(ck) - 1) as f64;
    Some((chi2 / (total * m)).sqrt())
}

#[derive(Debug, Clone)]
pub struct JointConfig {
    pub max_iterations: usize,
    /// Dual step at iteration t is alpha0 / (1 + t / tau).
    pub alpha0: f64,
    pub tau: f64,
    /// A constraint is satisfied when every count entry deviates by at most
    /// max(1, violation_fraction * its cell population).
    pub violation_fraction: f64,
    /// Rows at or below this state-space size solve exactly; larger rows use
    /// dual decomposition.
    pub state_cap: u128,
    pub dd: DdConfig,
    /// Run the final count-repair pass on label constraints.
    pub repair: bool,
    /// Give up the dual loop early when the best violation has not improved
    /// for this many iterations (the repair pass backstops label counts).
    pub stall_patience: usize,
}

impl Default for JointConfig {
    fn default() -> Self {
        JointConfig {
            max_iterations: 200,
            alpha0: 1.0,
            tau: 50.0,
            violation_fraction: 0.02,
            state_cap: DEFAULT_STATE_CAP,
            dd: DdConfig::default(),
            repair: true,
            stall_patience: 25,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConstrainedOutcome {
    pub table: CategoricalTable,
    /// Total absolute violation across all constraint entries, per iteration.
    pub violation_trace: Vec<f64>,
    /// Lagrangian dual value per iteration (an upper bound on the constrained
    /// optimum).
    pub dual_trace: Vec<f64>,
    /// Per-constraint worst count deviation at the returned table.
    pub final_violations: Vec<f64>,
    pub iterations: usize,
    /// False when the loop ran out of iterations and repair (if enabled)
    /// still left some constraint above tolerance.
    pub satisfied: bool,
}

/// Impute every row independently by MAP; rows without missing cells pass
/// through untouched.
pub fn impute_independent(
    params: &MrfParams,
    masked: &CategoricalTable,
    cfg: &JointConfig,
) -> Result<CategoricalTable> {
    let solved = solve_all_rows(params, masked, &[], cfg)?;
    apply_assignments(masked, &solved)
}

fn row_offsets(
    params: &MrfParams,
    masked: &CategoricalTable,
    constraints: &[DistributionConstraint],
    i: usize,
) -> (Vec<Vec<f64>>, Vec<(usize, usize, Vec<f64>)>) {
    let row = masked.row(i);
    let missing: Vec<usize> = (0..row.len()).filter(|&j| row[j].is_none()).collect();
    let layout = params.layout();
    let mut unary: Vec<Vec<f64>> = missing
        .iter()
        .map(|&j| vec![0.0; layout.cardinality(j)])
        .collect();
    let mut edges: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    for c in constraints {
        match c {
            DistributionConstraint::Label { col, duals, .. } => {
                if let Ok(pos) = missing.binary_search(col) {
                    for (a, u) in unary[pos].iter_mut().enumerate() {
                        *u -= duals[a];
                    }
                }
            }
            DistributionConstraint::Pairwise { cols, duals, .. } => {
                let (j, k) = *cols;
                let ck = layout.cardinality(k);
                match (row[j], row[k]) {
                    (None, None) => {
                        let table: Vec<f64> = duals.iter().map(|&d| -d).collect();
                        edges.push((j, k, table));
                    }
                    (None, Some(b)) => {
                        let pos = missing.binary_search(&j).unwrap();
                        for (a, u) in unary[pos].iter_mut().enumerate() {
                            *u -= duals[a * ck + b as usize];
                        }
                    }
                    (Some(a), None) => {
                        let pos = missing.binary_search(&k).unwrap();
                        for (b, u) in unary[pos].iter_mut().enumerate() {
                            *u -= duals[a as usize * ck + b];
                        }
                    }
                    (Some(_), Some(_)) => {} // fixed contribution, outside the targets
                }
            }
        }
    }
    (unary, edges)
}

struct SolvedRow {
    row: usize,
    assignment: Vec<usize>,
    /// Row objective under the dual-adjusted potentials.
    adjusted_score: f64,
    /// Row objective under the original potentials.
    score: f64,
}

fn solve_all_rows(
    params: &MrfParams,
    masked: &CategoricalTable,
    constraints: &[DistributionConstraint],
    cfg: &JointConfig,
) -> Result<Vec<SolvedRow>> {
    let rows_with_missing: Vec<usize> = (0..masked.n_rows())
        .filter(|&i| masked.row(i).iter().any(|c| c.is_none()))
        .collect();
    rows_with_missing
        .par_iter()
        .map(|&i| {
            let (unary, edge_offsets) = row_offsets(params, masked, constraints, i);
            let problem =
                RowProblem::new_with_edge_offsets(params, masked.row(i), Some(&unary), &edge_offsets)?;
            let (assignment, adjusted_score) = solve_row(&problem, cfg.state_cap, &cfg.dd)?;
            let plain = RowProblem::new(params, masked.row(i), None)?;
            let score = plain.score(&assignment);
            Ok(SolvedRow {
                row: i,
                assignment,
                adjusted_score,
                score,
            })
        })
        .collect()
}

/// Per-state cache size limit for the dual loop; rows above it re-solve from
/// scratch every iteration.
const ROW_CACHE_STATES: u128 = 65_536;

enum RowSolver {
    /// Base score of every joint assignment, enumerated once; dual offsets
    /// are swept over the cached states each iteration.
    Cached {
        row: usize,
        missing: Vec<usize>,
        cards: Vec<usize>,
        base: Vec<f64>,
    },
    Direct {
        row: usize,
    },
}

fn build_row_solvers(
    params: &MrfParams,
    masked: &CategoricalTable,
) -> Result<Vec<RowSolver>> {
    let rows_with_missing: Vec<usize> = (0..masked.n_rows())
        .filter(|&i| masked.row(i).iter().any(|c| c.is_none()))
        .collect();
    rows_with_missing
        .par_iter()
        .map(|&i| {
            let problem = RowProblem::new(params, masked.row(i), None)?;
            if problem.state_space() <= ROW_CACHE_STATES {
                let (missing, cards, base) = problem.enumerate_state_scores();
                Ok(RowSolver::Cached {
                    row: i,
                    missing,
                    cards,
                    base,
                })
            } else {
                Ok(RowSolver::Direct { row: i })
            }
        })
        .collect()
}

/// Argmax over cached states of base score plus per-cell and pairwise
/// offsets; ties resolve to the lexicographically smallest assignment, the
/// same rule the exact enumerator uses.
fn argmax_cached(
    cards: &[usize],
    base: &[f64],
    unary: &[Vec<f64>],
    pairs: &[(usize, usize, Vec<f64>)],
) -> (Vec<usize>, f64, f64) {
    let n = cards.len();
    let mut pairs_by_high: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (idx, &(lo, hi, _)) in pairs.iter().enumerate() {
        debug_assert!(lo < hi);
        pairs_by_high[hi].push(idx);
    }
    let mut best_idx = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    let mut best_offset = 0.0;
    let mut current = vec![0usize; n];
    let mut partial = vec![0.0; n + 1];
    let mut state = 0usize;
    let mut depth = 0usize;
    let mut label = 0usize;
    loop {
        if label >= cards[depth] {
            if depth == 0 {
                break;
            }
            depth -= 1;
            label = current[depth] + 1;
            continue;
        }
        current[depth] = label;
        let mut off = partial[depth] + unary[depth][label];
        for &p in &pairs_by_high[depth] {
            let (lo, _, ref table) = pairs[p];
            off += table[current[lo] * cards[depth] + label];
        }
        if depth + 1 == n {
            let total = base[state] + off;
            if total > best_score {
                best_score = total;
                best_idx = state;
                best_offset = off;
            }
            state += 1;
            label += 1;
        } else {
            partial[depth + 1] = off;
            depth += 1;
            label = 0;
        }
    }
    // decode the winning state index back into labels
    let mut assignment = vec![0usize; n];
    let mut rem = best_idx;
    for d in (0..n).rev() {
        assignment[d] = rem % cards[d];
        rem /= cards[d];
    }
    (assignment, best_score, best_score - best_offset)
}

fn solve_rows_with_duals(
    params: &MrfParams,
    masked: &CategoricalTable,
    solvers: &[RowSolver],
    constraints: &[DistributionConstraint],
    cfg: &JointConfig,
) -> Result<Vec<SolvedRow>> {
    solvers
        .par_iter()
        .map(|solver| match solver {
            RowSolver::Cached {
                row,
                missing,
                cards,
                base,
            } => {
                let (unary, edge_offsets) = row_offsets(params, masked, constraints, *row);
                let pairs: Vec<(usize, usize, Vec<f64>)> = edge_offsets
                    .into_iter()
                    .map(|(j, k, table)| {
                        let lo = missing.binary_search(&j).expect("missing column");
                        let hi = missing.binary_search(&k).expect("missing column");
                        (lo, hi, table)
                    })
                    .collect();
                let (assignment, adjusted_score, score) =
                    argmax_cached(cards, base, &unary, &pairs);
                Ok(SolvedRow {
                    row: *row,
                    assignment,
                    adjusted_score,
                    score,
                })
            }
            RowSolver::Direct { row } => {
                let (unary, edge_offsets) = row_offsets(params, masked, constraints, *row);
                let problem = RowProblem::new_with_edge_offsets(
                    params,
                    masked.row(*row),
                    Some(&unary),
                    &edge_offsets,
                )?;
                let (assignment, adjusted_score) = solve_row(&problem, cfg.state_cap, &cfg.dd)?;
                let plain = RowProblem::new(params, masked.row(*row), None)?;
                let score = plain.score(&assignment);
                Ok(SolvedRow {
                    row: *row,
                    assignment,
                    adjusted_score,
                    score,
                })
            }
        })
        .collect()
}

fn apply_assignments(masked: &CategoricalTable, solved: &[SolvedRow]) -> Result<CategoricalTable> {
    let mut updates = Vec::new();
    for s in solved {
        let missing: Vec<usize> = (0..masked.n_cols())
            .filter(|&j| masked.cell(s.row, j).is_none())
            .collect();
        for (pos, &j) in missing.iter().enumerate() {
            updates.push((s.row, j, s.assignment[pos] as u32));
        }
    }
    masked.with_cells(&updates)
}

fn realized_counts(
    completed: &CategoricalTable,
    masked: &CategoricalTable,
    constraint: &DistributionConstraint,
) -> Vec<f64> {
    match constraint {
        DistributionConstraint::Label { col, targets, .. } => {
            let mut counts = vec![0.0; targets.len()];
            for i in 0..masked.n_rows() {
                if masked.cell(i, *col).is_none() {
                    counts[completed.cell(i, *col).unwrap() as usize] += 1.0;
                }
            }
            counts
        }
        DistributionConstraint::Pairwise { cols, targets, .. } => {
            let (j, k) = *cols;
            let ck = completed.domain(k).cardinality();
            let mut counts = vec![0.0; targets.len()];
            for i in 0..masked.n_rows() {
                if masked.cell(i, j).is_none() || masked.cell(i, k).is_none() {
                    let a = completed.cell(i, j).unwrap() as usize;
                    let b = completed.cell(i, k).unwrap() as usize;
                    counts[a * ck + b] += 1.0;
                }
            }
            counts
        }
    }
}

/// Tolerance for a constraint: max(1, fraction * its cell population).
pub fn satisfaction_tolerance(
    masked: &CategoricalTable,
    constraint: &DistributionConstraint,
    fraction: f64,
) -> f64 {
    let population = match constraint {
        DistributionConstraint::Label { col, .. } => masked.count_missing_in_column(*col),
        DistributionConstraint::Pairwise { cols, .. } => (0..masked.n_rows())
            .filter(|&i| masked.cell(i, cols.0).is_none() || masked.cell(i, cols.1).is_none())
            .count(),
    };
    (fraction * population as f64).max(1.0)
}

/// Impute all rows jointly under the given constraints.
pub fn impute_constrained(
    params: &MrfParams,
    masked: &CategoricalTable,
    constraints: &[DistributionConstraint],
    cfg: &JointConfig,
) -> Result<ConstrainedOutcome> {
    let mut duals: Vec<DistributionConstraint> = constraints.to_vec();
    for c in duals.iter_mut() {
        for d in c.duals_mut() {
            *d = 0.0;
        }
    }
    let tolerances: Vec<f64> = duals
        .iter()
        .map(|c| satisfaction_tolerance(masked, c, cfg.violation_fraction))
        .collect();

    let mut violation_trace = Vec::new();
    let mut dual_trace = Vec::new();
    let mut best: Option<(f64, f64, CategoricalTable)> = None; // (total violation, score, table)
    let mut iterations = 0usize;
    let mut stall = 0usize;
    let solvers = build_row_solvers(params, masked)?;

    for t in 0..cfg.max_iterations.max(1) {
        iterations = t + 1;
        let solved = solve_rows_with_duals(params, masked, &solvers, &duals, cfg)?;
        let completed = apply_assignments(masked, &solved)?;

        let total_score: f64 = solved.iter().map(|s| s.score).sum();
        let adjusted_total: f64 = solved.iter().map(|s| s.adjusted_score).sum();
        let dual_value = adjusted_total
            + duals
                .iter()
                .map(|c| {
                    c.duals()
                        .iter()
                        .zip(c.targets())
                        .map(|(d, t)| d * t)
                        .sum::<f64>()
                })
                .sum::<f64>();
        dual_trace.push(dual_value);

        let realized: Vec<Vec<f64>> = duals
            .iter()
            .map(|c| realized_counts(&completed, masked, c))
            .collect();
        let mut total_violation = 0.0;
        let mut worst_dev: f64 = 0.0;
        let mut all_within = true;
        for (c, (r, tol)) in duals.iter().zip(realized.iter().zip(&tolerances)) {
            let mut worst: f64 = 0.0;
            for (got, want) in r.iter().zip(c.targets()) {
                // the tolerance band counts as satisfied
                let dev = ((got - want).abs() - tol).max(0.0);
                total_violation += dev;
                worst = worst.max(dev);
            }
            worst_dev = worst_dev.max(worst);
            if worst > 0.0 {
                all_within = false;
            }
        }
        violation_trace.push(total_violation);

        let better = match &best {
            None => true,
            Some((bv, bs, _)) => {
                total_violation < *bv || (total_violation == *bv && total_score > *bs)
            }
        };
        if better {
            best = Some((total_violation, total_score, completed));
            stall = 0;
        } else {
            stall += 1;
        }

        if all_within || duals.is_empty() || stall >= cfg.stall_patience {
            break;
        }

        // normalize by the worst deviation so multipliers move at the scale
        // of the potentials, not of the raw counts; entries inside their
        // tolerance band exert no pressure
        let alpha = cfg.alpha0 / ((1.0 + t as f64 / cfg.tau) * worst_dev.max(1.0));
        for ((c, r), tol) in duals.iter_mut().zip(realized.iter()).zip(&tolerances) {
            let targets = c.targets().to_vec();
            let band = *tol;
            for ((d, got), want) in c.duals_mut().iter_mut().zip(r).zip(&targets) {
                let overshoot = if *got > want + band {
                    got - (want + band)
                } else if *got < want - band {
                    got - (want - band)
                } else {
                    0.0
                };
                *d += alpha * overshoot;
            }
        }
    }

    let (_, _, mut table) = best.expect("at least one iterate");

    if cfg.repair {
        repair_label_counts(params, masked, &duals, &tolerances, &mut table)?;
    }

    let mut final_violations = Vec::with_capacity(duals.len());
    let mut satisfied = true;
    for (c, tol) in duals.iter().zip(&tolerances) {
        let realized = realized_counts(&table, masked, c);
        let worst = realized
            .iter()
            .zip(c.targets())
            .map(|(got, want)| (got - want).abs())
            .fold(0.0f64, f64::max);
        if worst > *tol {
            satisfied = false;
        }
        final_violations.push(worst);
    }

    Ok(ConstrainedOutcome {
        table,
        violation_trace,
        dual_trace,
        final_violations,
        iterations,
        satisfied,
    })
}

/// Greedy count repair for label constraints: flip the imputed cells whose
/// score sacrifice is smallest until each label's count matches the rounded
/// target. Only cells that were missing in the masked table move.
fn repair_label_counts(
    params: &MrfParams,
    masked: &CategoricalTable,
    constraints: &[DistributionConstraint],
    tolerances: &[f64],
    table: &mut CategoricalTable,
) -> Result<()> {
    for (c, tol) in constraints.iter().zip(tolerances) {
        let (col, targets) = match c {
            DistributionConstraint::Label { col, targets, .. } => (*col, targets),
            DistributionConstraint::Pairwise { .. } => continue,
        };
        let cells: Vec<usize> = (0..masked.n_rows())
            .filter(|&i| masked.cell(i, col).is_none())
            .collect();
        if cells.is_empty() {
            continue;
        }
        let realized = realized_counts(table, masked, c);
        let worst = realized
            .iter()
            .zip(targets)
            .map(|(got, want)| (got - want).abs())
            .fold(0.0f64, f64::max);
        if worst <= *tol {
            continue;
        }

        let alloc = largest_remainder_round(targets, cells.len());
        let mut counts: Vec<i64> = realized.iter().map(|&r| r as i64).collect();
        let card = targets.len();
        // each flip moves one unit of excess to a deficit label
        loop {
            let excess: Vec<usize> = (0..card).filter(|&l| counts[l] > alloc[l]).collect();
            let deficit: Vec<usize> = (0..card).filter(|&l| counts[l] < alloc[l]).collect();
            if excess.is_empty() || deficit.is_empty() {
                break;
            }
            let mut best: Option<(f64, usize, usize)> = None; // (gain, row, to-label)
            for &i in &cells {
                let current = table.cell(i, col).unwrap() as usize;
                if !excess.contains(&current) {
                    continue;
                }
                let row: Vec<usize> = table.row(i).iter().map(|v| v.unwrap() as usize).collect();
                let scores = params.conditional_scores(&row, col);
                for &b in &deficit {
                    let gain = scores[b] - scores[current];
                    let candidate = (gain, i, b);
                    let take = match best {
                        None => true,
                        Some((g, r, l)) => {
                            gain > g + 1e-12
                                || ((gain - g).abs() <= 1e-12 && (i, b) < (r, l))
                        }
                    };
                    if take {
                        best = Some(candidate);
                    }
                }
            }
            match best {
                Some((_, i, b)) => {
                    let from = table.cell(i, col).unwrap() as usize;
                    *table = table.with_cells(&[(i, col, b as u32)])?;
                    counts[from] -= 1;
                    counts[b] += 1;
                }
                None => break,
            }
        }
    }
    Ok(())
}

/// Round non-negative real targets to integers summing to `total` by largest
/// remainder; ties go to the lower index.
fn largest_remainder_round(targets: &[f64], total: usize) -> Vec<i64> {
    let sum: f64 = targets.iter().sum();
    let scaled: Vec<f64> = if sum > 0.0 {
        targets.iter().map(|&t| t * total as f64 / sum).collect()
    } else {
        vec![total as f64 / targets.len() as f64; targets.len()]
    };
    let mut alloc: Vec<i64> = scaled.iter().map(|&t| t.floor() as i64).collect();
    let assigned: i64 = alloc.iter().sum();
    let mut leftovers: Vec<(f64, usize)> = scaled
        .iter()
        .enumerate()
        .map(|(l, &t)| (t - t.floor(), l))
        .collect();
    leftovers.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut remaining = total as i64 - assigned;
    for (_, l) in leftovers {
        if remaining <= 0 {
            break;
        }
        alloc[l] += 1;
        remaining -= 1;
    }
    alloc
}

pub fn label_counts_over_missing(
    completed: &CategoricalTable,
    masked: &CategoricalTable,
    col: usize,
) -> Vec<usize> {
    let mut counts = vec![0usize; completed.domain(col).cardinality()];
    for i in 0..masked.n_rows() {
        if masked.cell(i, col).is_none() {
            counts[completed.cell(i, col).unwrap() as usize] += 1;
        }
    }
    counts
}

/// Missing positions of a masked table as a mask (convenience for callers
/// that evaluate against ground truth).
pub fn missing_mask(masked: &CategoricalTable) -> Mask {
    masked.missing_positions()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MrfLayout;
    use crate::table::load_csv;
    use std::sync::Arc;

    fn table(text: &str) -> CategoricalTable {
        load_csv(text.as_bytes(), "?", b',').unwrap()
    }

    #[test]
    fn label_targets_proportional_case() {
        // 30 observed (18 a, 12 b), 10 missing: targets {a: 6, b: 4}
        let mut csv = String::from("x,y\n");
        for _ in 0..18 {
            csv.push_str("a,0\n");
        }
        for _ in 0..12 {
            csv.push_str("b,0\n");
        }
        for _ in 0..10 {
            csv.push_str("?,1\n");
        }
        let t = table(&csv);
        let c = build_label_constraint(&t, 0).unwrap();
        match c {
            DistributionConstraint::Label { targets, .. } => {
                assert!((targets[0] - 6.0).abs() < 1e-9, "{:?}", targets);
                assert!((targets[1] - 4.0).abs() < 1e-9);
            }
            _ => panic!(),
        }
    }

    #[test]
    fn label_constraint_without_missing_is_trivial() {
        let t = table("x,y\na,0\nb,1\n");
        let c = build_label_constraint(&t, 0).unwrap();
        match c {
            DistributionConstraint::Label { targets, .. } => {
                assert!(targets.iter().all(|&t| t == 0.0));
            }
            _ => panic!(),
        }
    }

    #[test]
    fn label_targets_on_fixture_match_hand_computation() {
        // 20 rows, 3 labels: observed 8xa 4xb 2xc (14 observed), 6 missing.
        // p = (8,4,2)/14; raw = max(0, p*20 - obs) = (160/14-8, 80/14-4, 40/14-2)
        //   = (3.428571..., 1.714285..., 0.857142...), sum = 6 -> no rescale
        let mut csv = String::from("x,y\n");
        for _ in 0..8 {
            csv.push_str("a,0\n");
        }
        for _ in 0..4 {
            csv.push_str("b,0\n");
        }
        for _ in 0..2 {
            csv.push_str("c,0\n");
        }
        for _ in 0..6 {
            csv.push_str("?,1\n");
        }
        let t = table(&csv);
        let c = build_label_constraint(&t, 0).unwrap();
        match c {
            DistributionConstraint::Label { targets, .. } => {
                assert!((targets[0] - (160.0 / 14.0 - 8.0)).abs() < 1e-9);
                assert!((targets[1] - (80.0 / 14.0 - 4.0)).abs() < 1e-9);
                assert!((targets[2] - (40.0 / 14.0 - 2.0)).abs() < 1e-9);
                let sum: f64 = targets.iter().sum();
                assert!((sum - 6.0).abs() < 1e-9);
            }
            _ => panic!(),
        }
    }

    #[test]
    fn independent_imputation_identity_when_complete() {
        let t = table("x,y\na,0\nb,1\n");
        let layout = MrfLayout::complete(Arc::clone(t.domains())).unwrap();
        let params = crate::model::MrfParams::zeros(layout);
        let out = impute_independent(&params, &t, &JointConfig::default()).unwrap();
        assert_eq!(out, t);
    }

    #[test]
    fn independent_matches_per_row_solves() {
        let t = table("x,y,z\na,0,p\n?,1,q\nb,?,p\na,1,?\n");
        let layout = MrfLayout::complete(Arc::clone(t.domains())).unwrap();
        let mut rng_values = Vec::new();
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(44);
        for _ in 0..layout.dim() {
            rng_values.push(rng.gen_range(-1.0..1.0));
        }
        let params = crate::model::MrfParams::from_flat(layout, rng_values).unwrap();
        let cfg = JointConfig::default();
        let out = impute_independent(&params, &t, &cfg).unwrap();
        for i in 0..t.n_rows() {
            let missing: Vec<usize> = (0..t.n_cols()).filter(|&j| t.cell(i, j).is_none()).collect();
            if missing.is_empty() {
                continue;
            }
            let problem = RowProblem::new(&params, t.row(i), None).unwrap();
            let (assignment, _) = solve_row(&problem, cfg.state_cap, &cfg.dd).unwrap();
            for (pos, &j) in missing.iter().enumerate() {
                assert_eq!(out.cell(i, j), Some(assignment[pos] as u32));
            }
        }
    }

    #[test]
    fn constrained_with_no_constraints_equals_independent() {
        let t = table("x,y,z\na,0,p\n?,1,q\nb,?,p\na,1,?\nb,0,q\n");
        let layout = MrfLayout::complete(Arc::clone(t.domains())).unwrap();
        let params = crate::model::MrfParams::zeros(layout);
        let cfg = JointConfig::default();
        let independent = impute_independent(&params, &t, &cfg).unwrap();
        let outcome = impute_constrained(&params, &t, &[], &cfg).unwrap();
        assert_eq!(outcome.table, independent);
        assert_eq!(outcome.iterations, 1);
    }

    #[test]
    fn satisfied_constraints_stop_after_one_iteration() {
        // single missing cell; target is whatever the model picks anyway
        let mut csv = String::from("x,y\n");
        for _ in 0..9 {
            csv.push_str("a,0\n");
        }
        csv.push_str("?,1\n");
        let t = table(&csv);
        let layout = MrfLayout::complete(Arc::clone(t.domains())).unwrap();
        let params = crate::model::MrfParams::zeros(layout);
        let constraints = vec![build_label_constraint(&t, 0).unwrap()];
        let cfg = JointConfig::default();
        let outcome = impute_constrained(&params, &t, &constraints, &cfg).unwrap();
        assert_eq!(outcome.iterations, 1);
        assert!(outcome.satisfied);
        let independent = impute_independent(&params, &t, &cfg).unwrap();
        assert_eq!(outcome.table, independent);
    }

    #[test]
    fn zero_scores_count_matching() {
        // zero params, 10 missing cells in one column, targets {a:6, b:4}
        let mut csv = String::from("x,y\n");
        for _ in 0..18 {
            csv.push_str("a,0\n");
        }
        for _ in 0..12 {
            csv.push_str("b,0\n");
        }
        for _ in 0..10 {
            csv.push_str("?,1\n");
        }
        let t = table(&csv);
        let layout = MrfLayout::complete(Arc::clone(t.domains())).unwrap();
        let params = crate::model::MrfParams::zeros(layout);
        let constraints = vec![build_label_constraint(&t, 0).unwrap()];
        let outcome = impute_constrained(&params, &t, &constraints, &JointConfig::default()).unwrap();
        let counts = label_counts_over_missing(&outcome.table, &t, 0);
        assert_eq!(counts, vec![6, 4]);
        assert!(outcome.satisfied);
    }

    #[test]
    fn observed_cells_never_modified() {
        let t = table("x,y,z\na,0,?\n?,1,q\nb,?,p\n");
        let layout = MrfLayout::complete(Arc::clone(t.domains())).unwrap();
        let params = crate::model::MrfParams::zeros(layout);
        let constraints = build_constraints(&t, &ConstraintMenu::label_and_pairwise()).unwrap();
        let outcome =
            impute_constrained(&params, &t, &constraints, &JointConfig::default()).unwrap();
        for i in 0..t.n_rows() {
            for j in 0..t.n_cols() {
                if let Some(v) = t.cell(i, j) {
                    assert_eq!(outcome.table.cell(i, j), Some(v));
                }
            }
        }
    }

    #[test]
    fn dual_updates_depend_only_on_count_differences() {
        // shifting targets and realized counts by the same constant leaves
        // the subgradient direction unchanged; verified via the update rule
        // applied to two snapshots
        let realized = [5.0, 3.0];
        let targets = [4.0, 4.0];
        let alpha = 0.7;
        let base: Vec<f64> = realized
            .iter()
            .zip(&targets)
            .map(|(r, t)| alpha * (r - t))
            .collect();
        let shifted: Vec<f64> = realized
            .iter()
            .zip(&targets)
            .map(|(r, t)| alpha * ((r + 10.0) - (t + 10.0)))
            .collect();
        assert_eq!(base, shifted);
    }

    #[test]
    fn correlated_pair_selection_prefers_dependent_columns() {
        // columns x and y are copies; z is independent noise
        let mut csv = String::from("x,y,z\n");
        let vals = ["a", "b"];
        for i in 0..40 {
            let v = vals[i % 2];
            let z = vals[(i / 2 + i) % 2];
            csv.push_str(&format!("{},{},{}\n", v, v, z));
        }
        let t = table(&csv);
        let pairs = select_correlated_pairs(&t, 1);
        assert_eq!(pairs, vec![(0, 1)]);
    }

    #[test]
    fn no_observed_pair_data_is_an_error() {
        // x and y are never observed together
        let t = table("x,y\na,?\n?,0\na,?\n?,1\n");
        assert!(matches!(
            build_pairwise_constraint(&t, 0, 1),
            Err(Error::NoObservedData(_))
        ));
    }

    #[test]
    fn largest_remainder_rounding() {
        assert_eq!(largest_remainder_round(&[6.0, 4.0], 10), vec![6, 4]);
        assert_eq!(largest_remainder_round(&[3.5, 3.5, 3.0], 10), vec![4, 3, 3]);
        assert_eq!(largest_remainder_round(&[0.0, 0.0], 4), vec![2, 2]);
    }
}
