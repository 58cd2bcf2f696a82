//! Piecewise large-margin training.
//!
//! Each training piece targets one or two originally-observed cells of a row;
//! the rest of the row (observed and currently-imputed cells alike) is frozen
//! context. The Weston-Watkins objective puts one squared hinge term on every
//! rival candidate of every piece, which makes it smooth; the Crammer-Singer
//! variant keeps a single hinge on the loss-augmented best rival and is
//! trained by stochastic subgradient instead.

use crate::error::{Error, Result};
use crate::model::{delta_hamming, MrfLayout, MrfParams};
use crate::optim::{
    self, OptimizerConfig, SmoothProblem, StepSchedule, SubgradientOracle,
};
use crate::table::{mode_fill, CategoricalTable, Mask};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PieceType {
    Single,
    Pair,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Formulation {
    /// Squared-hinge Weston-Watkins, minimized by the quasi-Newton optimizer.
    Wwfp,
    /// Crammer-Singer with a single hinge per piece, trained by stochastic
    /// subgradient.
    Csfp,
}

/// One training piece: a row, one or two target columns with their gold
/// labels, and the rest of the row as context.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PieceVars {
    Single { col: usize, gold: usize },
    Pair { cols: [usize; 2], golds: [usize; 2] },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PieceExample {
    pub row: usize,
    pub vars: PieceVars,
}

/// All pieces of a completed table, plus the completed rows they read their
/// context from.
#[derive(Debug, Clone)]
pub struct PieceSet {
    rows: Vec<Vec<usize>>,
    pieces: Vec<PieceExample>,
}

impl PieceSet {
    pub fn pieces(&self) -> &[PieceExample] {
        &self.pieces
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    /// Same context rows, different piece order. Used to check order
    /// invariance of the objective.
    pub fn with_piece_order(&self, order: &[usize]) -> PieceSet {
        PieceSet {
            rows: self.rows.clone(),
            pieces: order.iter().map(|&i| self.pieces[i]).collect(),
        }
    }

    pub fn restricted_to_row(&self, row: usize) -> PieceSet {
        PieceSet {
            rows: self.rows.clone(),
            pieces: self
                .pieces
                .iter()
                .filter(|p| p.row == row)
                .copied()
                .collect(),
        }
    }
}

/// Enumerate pieces over originally-observed cells. `missing` marks the cells
/// that were missing in the masked table; they may appear in contexts but
/// never as targets.
pub fn build_pieces(
    completed: &CategoricalTable,
    missing: &Mask,
    piece_type: PieceType,
) -> Result<PieceSet> {
    if !completed.is_complete() {
        return Err(Error::InvalidConfig(
            "piece construction requires a completed table".into(),
        ));
    }
    let n = completed.n_rows();
    let k = completed.n_cols();
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        rows.push(
            completed
                .row(i)
                .iter()
                .map(|c| c.unwrap() as usize)
                .collect::<Vec<usize>>(),
        );
    }
    let mut pieces = Vec::new();
    for i in 0..n {
        let observed: Vec<usize> = (0..k).filter(|&j| !missing.contains(i, j)).collect();
        if matches!(piece_type, PieceType::Single | PieceType::Both) {
            for &j in &observed {
                pieces.push(PieceExample {
                    row: i,
                    vars: PieceVars::Single {
                        col: j,
                        gold: rows[i][j],
                    },
                });
            }
        }
        if matches!(piece_type, PieceType::Pair | PieceType::Both) {
            for a in 0..observed.len() {
                for b in (a + 1)..observed.len() {
                    let (ja, jb) = (observed[a], observed[b]);
                    pieces.push(PieceExample {
                        row: i,
                        vars: PieceVars::Pair {
                            cols: [ja, jb],
                            golds: [rows[i][ja], rows[i][jb]],
                        },
                    });
                }
            }
        }
    }
    Ok(PieceSet { rows, pieces })
}

/// Candidate margin scores of a single-variable piece: for each label a of
/// column j, the sum of all score terms touching j with the rest of the row
/// fixed at `ctx`.
#[inline]
fn single_candidate_scores(values: &[f64], layout: &MrfLayout, ctx: &[usize], j: usize) -> Vec<f64> {
    let card = layout.cardinality(j);
    let mut scores = vec![0.0; card];
    for (a, slot) in scores.iter_mut().enumerate() {
        *slot = values[layout.node_entry(j, a)];
    }
    for &(e, other) in layout.incident(j) {
        let lo = ctx[other];
        for (a, slot) in scores.iter_mut().enumerate() {
            *slot += values[layout.edge_entry_between(e, j, a, lo)];
        }
    }
    scores
}

/// Accumulate the squared-hinge loss and gradient of one piece into `grad`.
/// Returns the piece's loss contribution (without the lambda/2 factor).
fn piece_loss_grad(
    values: &[f64],
    layout: &MrfLayout,
    rows: &[Vec<usize>],
    piece: &PieceExample,
    lambda: f64,
    grad: Option<&mut [f64]>,
) -> f64 {
    let ctx = &rows[piece.row];
    match piece.vars {
        PieceVars::Single { col: j, gold } => {
            let scores = single_candidate_scores(values, layout, ctx, j);
            let card = scores.len();
            if card < 2 {
                return 0.0;
            }
            let s_gold = scores[gold];
            let mut loss = 0.0;
            let mut weights = vec![0.0; card];
            let mut active = false;
            for a in 0..card {
                if a == gold {
                    continue;
                }
                let psi = scores[a] + 1.0 - s_gold;
                if psi > 0.0 {
                    loss += psi * psi;
                    weights[a] = lambda * psi;
                    weights[gold] -= lambda * psi;
                    active = true;
                }
            }
            if active {
                if let Some(grad) = grad {
                    for (a, &w) in weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        grad[layout.node_entry(j, a)] += w;
                        for &(e, other) in layout.incident(j) {
                            grad[layout.edge_entry_between(e, j, a, ctx[other])] += w;
                        }
                    }
                }
            }
            loss
        }
        PieceVars::Pair { cols, golds } => {
            let [j, k] = cols;
            let cj = layout.cardinality(j);
            let ck = layout.cardinality(k);
            // split the candidate score into per-endpoint parts plus the
            // within-piece edge
            let mut part_j = vec![0.0; cj];
            for (a, slot) in part_j.iter_mut().enumerate() {
                *slot = values[layout.node_entry(j, a)];
            }
            for &(e, other) in layout.incident(j) {
                if other == k {
                    continue;
                }
                for (a, slot) in part_j.iter_mut().enumerate() {
                    *slot += values[layout.edge_entry_between(e, j, a, ctx[other])];
                }
            }
            let mut part_k = vec![0.0; ck];
            for (b, slot) in part_k.iter_mut().enumerate() {
                *slot = values[layout.node_entry(k, b)];
            }
            for &(e, other) in layout.incident(k) {
                if other == j {
                    continue;
                }
                for (b, slot) in part_k.iter_mut().enumerate() {
                    *slot += values[layout.edge_entry_between(e, k, b, ctx[other])];
                }
            }
            let edge_jk = layout
                .incident(j)
                .iter()
                .find(|&&(_, other)| other == k)
                .map(|&(e, _)| e);
            let pair_score = |a: usize, b: usize| -> f64 {
                let mut s = part_j[a] + part_k[b];
                if let Some(e) = edge_jk {
                    s += values[layout.edge_entry_between(e, j, a, b)];
                }
                s
            };
            let s_gold = pair_score(golds[0], golds[1]);
            let mut loss = 0.0;
            let mut w_j = vec![0.0; cj];
            let mut w_k = vec![0.0; ck];
            let mut w_pair = vec![0.0; cj * ck];
            let mut active = false;
            for a in 0..cj {
                for b in 0..ck {
                    if a == golds[0] && b == golds[1] {
                        continue;
                    }
                    let delta = delta_hamming(&[a, b], &[golds[0], golds[1]]) as f64;
                    let psi = pair_score(a, b) + delta - s_gold;
                    if psi > 0.0 {
                        loss += psi * psi;
                        let w = lambda * psi;
                        w_j[a] += w;
                        w_k[b] += w;
                        w_pair[a * ck + b] += w;
                        w_j[golds[0]] -= w;
                        w_k[golds[1]] -= w;
                        w_pair[golds[0] * ck + golds[1]] -= w;
                        active = true;
                    }
                }
            }
            if active {
                if let Some(grad) = grad {
                    for (a, &w) in w_j.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        grad[layout.node_entry(j, a)] += w;
                        for &(e, other) in layout.incident(j) {
                            if other == k {
                                continue;
                            }
                            grad[layout.edge_entry_between(e, j, a, ctx[other])] += w;
                        }
                    }
                    for (b, &w) in w_k.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        grad[layout.node_entry(k, b)] += w;
                        for &(e, other) in layout.incident(k) {
                            if other == j {
                                continue;
                            }
                            grad[layout.edge_entry_between(e, k, b, ctx[other])] += w;
                        }
                    }
                    if let Some(e) = edge_jk {
                        for a in 0..cj {
                            for b in 0..ck {
                                let w = w_pair[a * ck + b];
                                if w != 0.0 {
                                    grad[layout.edge_entry_between(e, j, a, b)] += w;
                                }
                            }
                        }
                    }
                }
            }
            loss
        }
    }
}

const REDUCTION_BLOCK: usize = 512;

/// Combine per-block partial results in a fixed pairwise tree, so the float
/// sums are identical no matter how many workers computed the blocks.
fn tree_combine(mut items: Vec<(f64, Vec<f64>)>) -> (f64, Vec<f64>) {
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut iter = items.into_iter();
        while let Some(mut a) = iter.next() {
            if let Some(b) = iter.next() {
                a.0 += b.0;
                for (x, y) in a.1.iter_mut().zip(&b.1) {
                    *x += y;
                }
            }
            next.push(a);
        }
        items = next;
    }
    items.pop().unwrap()
}

/// Weston-Watkins squared-hinge objective and its exact gradient:
/// |theta|^2/2 + (lambda/2) * sum over pieces and rival candidates of
/// max(0, rival margin violation)^2.
pub fn wwfp_value_grad(
    values: &[f64],
    layout: &MrfLayout,
    pieces: &PieceSet,
    lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    if values.len() != layout.dim() {
        return Err(Error::Dimension(format!(
            "parameter vector has {} entries, layout needs {}",
            values.len(),
            layout.dim()
        )));
    }
    let dim = layout.dim();
    let blocks: Vec<(f64, Vec<f64>)> = pieces
        .pieces
        .par_chunks(REDUCTION_BLOCK)
        .map(|chunk| {
            let mut grad = vec![0.0; dim];
            let mut loss = 0.0;
            for piece in chunk {
                loss += piece_loss_grad(values, layout, &pieces.rows, piece, lambda, Some(&mut grad));
            }
            (loss, grad)
        })
        .collect();

    let (loss, mut grad) = if blocks.is_empty() {
        (0.0, vec![0.0; dim])
    } else {
        tree_combine(blocks)
    };
    let mut value = 0.5 * lambda * loss;
    for (gi, &vi) in grad.iter_mut().zip(values) {
        *gi += vi;
    }
    value += 0.5 * values.iter().map(|v| v * v).sum::<f64>();
    Ok((value, grad))
}

/// Enumerate a piece's candidate space in lexicographic order together with
/// each candidate's margin score and Hamming distance to gold.
fn loss_augmented_best(
    values: &[f64],
    layout: &MrfLayout,
    ctx: &[usize],
    piece: &PieceExample,
) -> (Vec<usize>, f64, Vec<usize>, f64) {
    match piece.vars {
        PieceVars::Single { col: j, gold } => {
            let scores = single_candidate_scores(values, layout, ctx, j);
            let mut best = 0usize;
            let mut best_val = f64::NEG_INFINITY;
            for (a, &s) in scores.iter().enumerate() {
                let aug = s + if a == gold { 0.0 } else { 1.0 };
                if aug > best_val {
                    best_val = aug;
                    best = a;
                }
            }
            (vec![best], best_val, vec![gold], scores[gold])
        }
        PieceVars::Pair { cols, golds } => {
            let [j, k] = cols;
            let ck = layout.cardinality(k);
            let mut best = (0usize, 0usize);
            let mut best_val = f64::NEG_INFINITY;
            let mut gold_score = 0.0;
            for a in 0..layout.cardinality(j) {
                for b in 0..ck {
                    let mut cand_ctx = [a, b];
                    let s = piece_pair_score(values, layout, ctx, j, k, &mut cand_ctx);
                    if a == golds[0] && b == golds[1] {
                        gold_score = s;
                    }
                    let delta = delta_hamming(&[a, b], &[golds[0], golds[1]]) as f64;
                    let aug = s + delta;
                    if aug > best_val {
                        best_val = aug;
                        best = (a, b);
                    }
                }
            }
            (
                vec![best.0, best.1],
                best_val,
                golds.to_vec(),
                gold_score,
            )
        }
    }
}

fn piece_pair_score(
    values: &[f64],
    layout: &MrfLayout,
    ctx: &[usize],
    j: usize,
    k: usize,
    cand: &mut [usize; 2],
) -> f64 {
    let mut s = values[layout.node_entry(j, cand[0])] + values[layout.node_entry(k, cand[1])];
    for &(e, other) in layout.incident(j) {
        if other == k {
            s += values[layout.edge_entry_between(e, j, cand[0], cand[1])];
        } else {
            s += values[layout.edge_entry_between(e, j, cand[0], ctx[other])];
        }
    }
    for &(e, other) in layout.incident(k) {
        if other == j {
            continue;
        }
        s += values[layout.edge_entry_between(e, k, cand[1], ctx[other])];
    }
    s
}

/// Subgradient of lambda * max(0, psi(u_hat)) for one piece, where u_hat is
/// the loss-augmented argmax over the piece's candidates (ties resolved to
/// the lexicographically smallest candidate). The regularization term is the
/// driver's responsibility.
pub fn csfp_subgradient(
    values: &[f64],
    layout: &MrfLayout,
    pieces: &PieceSet,
    piece_index: usize,
    lambda: f64,
) -> Result<Vec<f64>> {
    if values.len() != layout.dim() {
        return Err(Error::Dimension(format!(
            "parameter vector has {} entries, layout needs {}",
            values.len(),
            layout.dim()
        )));
    }
    let piece = &pieces.pieces[piece_index];
    let ctx = &pieces.rows[piece.row];
    let (best, best_aug, gold, gold_score) = loss_augmented_best(values, layout, ctx, piece);
    let mut grad = vec![0.0; layout.dim()];
    let psi = best_aug - gold_score;
    if best == gold || psi <= 0.0 {
        return Ok(grad);
    }
    add_piece_features(layout, ctx, piece, &best, lambda, &mut grad);
    add_piece_features(layout, ctx, piece, &gold, -lambda, &mut grad);
    Ok(grad)
}

/// Add `weight` times the indicator feature vector of `candidate` for the
/// given piece.
fn add_piece_features(
    layout: &MrfLayout,
    ctx: &[usize],
    piece: &PieceExample,
    candidate: &[usize],
    weight: f64,
    grad: &mut [f64],
) {
    match piece.vars {
        PieceVars::Single { col: j, .. } => {
            let a = candidate[0];
            grad[layout.node_entry(j, a)] += weight;
            for &(e, other) in layout.incident(j) {
                grad[layout.edge_entry_between(e, j, a, ctx[other])] += weight;
            }
        }
        PieceVars::Pair { cols, .. } => {
            let [j, k] = cols;
            let (a, b) = (candidate[0], candidate[1]);
            grad[layout.node_entry(j, a)] += weight;
            grad[layout.node_entry(k, b)] += weight;
            for &(e, other) in layout.incident(j) {
                if other == k {
                    grad[layout.edge_entry_between(e, j, a, b)] += weight;
                } else {
                    grad[layout.edge_entry_between(e, j, a, ctx[other])] += weight;
                }
            }
            for &(e, other) in layout.incident(k) {
                if other != j {
                    grad[layout.edge_entry_between(e, k, b, ctx[other])] += weight;
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lambda: f64,
    pub piece_type: PieceType,
    pub formulation: Formulation,
    pub optimizer: OptimizerConfig,
    /// Epochs for the Crammer-Singer subgradient path.
    pub sg_epochs: usize,
    pub sg_schedule: StepSchedule,
    pub sg_seed: u64,
    /// Reuse the previous solution as the starting point when refitting.
    pub warm_start: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1.0,
            piece_type: PieceType::Single,
            formulation: Formulation::Wwfp,
            optimizer: OptimizerConfig::default(),
            sg_epochs: 60,
            sg_schedule: StepSchedule::Decay {
                alpha0: 0.1,
                tau: 200.0,
            },
            sg_seed: 0x5eed,
            warm_start: false,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.lambda <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: MrfParams,
    /// Final training objective value.
    pub objective: f64,
}

struct WwfpProblem<'a> {
    layout: &'a MrfLayout,
    pieces: &'a PieceSet,
    lambda: f64,
}

impl SmoothProblem for WwfpProblem<'_> {
    fn dim(&self) -> usize {
        self.layout.dim()
    }
    fn eval(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        wwfp_value_grad(x, self.layout, self.pieces, self.lambda)
    }
}

struct CsfpOracle<'a> {
    layout: &'a MrfLayout,
    pieces: &'a PieceSet,
    lambda: f64,
}

impl SubgradientOracle for CsfpOracle<'_> {
    fn dim(&self) -> usize {
        self.layout.dim()
    }
    fn n_examples(&self) -> usize {
        self.pieces.len()
    }
    fn subgradient(&self, example: usize, x: &[f64]) -> Result<Vec<f64>> {
        let mut g = csfp_subgradient(x, self.layout, self.pieces, example, self.lambda)?;
        // regularization share of this example
        let scale = 1.0 / self.pieces.len() as f64;
        for (gi, &xi) in g.iter_mut().zip(x) {
            *gi += scale * xi;
        }
        Ok(g)
    }
}

/// Fit model parameters to a completed table.
pub fn train(
    completed: &CategoricalTable,
    missing: &Mask,
    layout: &Arc<MrfLayout>,
    cfg: &TrainConfig,
    warm: Option<&MrfParams>,
) -> Result<TrainedModel> {
    cfg.validate()?;
    let pieces = build_pieces(completed, missing, cfg.piece_type)?;
    train_on_pieces(&pieces, layout, cfg, warm)
}

pub fn train_on_pieces(
    pieces: &PieceSet,
    layout: &Arc<MrfLayout>,
    cfg: &TrainConfig,
    warm: Option<&MrfParams>,
) -> Result<TrainedModel> {
    let x0 = match (cfg.warm_start, warm) {
        (true, Some(p)) => p.flatten().to_vec(),
        _ => vec![0.0; layout.dim()],
    };
    match cfg.formulation {
        Formulation::Wwfp => {
            let problem = WwfpProblem {
                layout,
                pieces,
                lambda: cfg.lambda,
            };
            let minimum = optim::minimize(&problem, &x0, &cfg.optimizer)?;
            Ok(TrainedModel {
                params: MrfParams::from_flat(Arc::clone(layout), minimum.point)?,
                objective: minimum.value,
            })
        }
        Formulation::Csfp => {
            let oracle = CsfpOracle {
                layout,
                pieces,
                lambda: cfg.lambda,
            };
            let x = optim::subgradient_descent(&oracle, &x0, cfg.sg_epochs, cfg.sg_schedule, cfg.sg_seed)?;
            // report the differentiable surrogate value for trace purposes
            let (value, _) = wwfp_value_grad(&x, layout, pieces, cfg.lambda)?;
            Ok(TrainedModel {
                params: MrfParams::from_flat(Arc::clone(layout), x)?,
                objective: value,
            })
        }
    }
}

/// Protocol for selecting the regularization constant.
pub enum CvProtocol<'a> {
    /// Re-mask a fraction of the observed cells per column, train on the
    /// rest, and score 0/1 prediction of the held-out cells.
    Holdout { fraction: f64, seed: u64 },
    /// Predict every observed cell with contexts taken from a supplied
    /// complete reference table. Usable only when ground truth is at hand.
    TruthContexts { truth: &'a CategoricalTable },
}

/// Pick the constant from `grid` with the lowest prediction loss; ties go to
/// the smaller constant. Returns the winner and the per-constant losses.
pub fn cross_validate_lambda(
    masked: &CategoricalTable,
    layout: &Arc<MrfLayout>,
    grid: &[f64],
    protocol: CvProtocol<'_>,
    base: &TrainConfig,
) -> Result<(f64, Vec<(f64, f64)>)> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("lambda grid is empty".into()));
    }
    let mut grid: Vec<f64> = grid.to_vec();
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let losses = match protocol {
        CvProtocol::Holdout { fraction, seed } => {
            holdout_losses(masked, layout, &grid, fraction, seed, base)?
        }
        CvProtocol::TruthContexts { truth } => {
            truth_context_losses(masked, truth, layout, &grid, base)?
        }
    };
    let mut best = (grid[0], f64::INFINITY);
    for &(lambda, loss) in &losses {
        if loss < best.1 {
            best = (lambda, loss);
        }
    }
    Ok((best.0, losses))
}

fn holdout_losses(
    masked: &CategoricalTable,
    layout: &Arc<MrfLayout>,
    grid: &[f64],
    fraction: f64,
    seed: u64,
    base: &TrainConfig,
) -> Result<Vec<(f64, f64)>> {
    let original_missing = masked.missing_positions();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut pseudo = Vec::new();
    for j in 0..masked.n_cols() {
        let mut observed: Vec<usize> = (0..masked.n_rows())
            .filter(|&i| masked.cell(i, j).is_some())
            .collect();
        let count = (fraction * observed.len() as f64).floor() as usize;
        if count == 0 || count == observed.len() {
            continue;
        }
        let (selected, _) = observed.partial_shuffle(&mut rng, count);
        for &i in selected.iter() {
            pseudo.push((i, j));
        }
    }
    let pseudo = Mask::from_cells(pseudo);
    if pseudo.is_empty() {
        // nothing to hold out; fall back to the smallest constant
        return Ok(grid.iter().map(|&l| (l, 0.0)).collect());
    }
    let doubly_masked = masked.with_masked(&pseudo);
    let filled = mode_fill(&doubly_masked)?;
    let train_missing = Mask::from_cells(
        original_missing
            .cells()
            .iter()
            .chain(pseudo.cells().iter())
            .copied()
            .collect(),
    );
    let pieces = build_pieces(&filled, &train_missing, base.piece_type)?;
    let rows: Vec<Vec<usize>> = (0..filled.n_rows())
        .map(|i| filled.row(i).iter().map(|c| c.unwrap() as usize).collect())
        .collect();

    let mut out = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let cfg = TrainConfig {
            lambda,
            warm_start: false,
            ..base.clone()
        };
        let model = train_on_pieces(&pieces, layout, &cfg, None)?;
        let mut wrong = 0usize;
        for &(i, j) in pseudo.cells() {
            let pred = conditional_argmax(&model.params, &rows[i], j);
            let actual = masked.cell(i, j).unwrap() as usize;
            if pred != actual {
                wrong += 1;
            }
        }
        out.push((lambda, wrong as f64 / pseudo.len() as f64));
    }
    Ok(out)
}

fn truth_context_losses(
    masked: &CategoricalTable,
    truth: &CategoricalTable,
    layout: &Arc<MrfLayout>,
    grid: &[f64],
    base: &TrainConfig,
) -> Result<Vec<(f64, f64)>> {
    if truth.n_rows() != masked.n_rows() || truth.n_cols() != masked.n_cols() {
        return Err(Error::Dimension("truth table shape mismatch".into()));
    }
    let missing = masked.missing_positions();
    let filled = mode_fill(masked)?;
    let pieces = build_pieces(&filled, &missing, base.piece_type)?;
    let truth_rows: Vec<Vec<usize>> = (0..truth.n_rows())
        .map(|i| truth.row(i).iter().map(|c| c.unwrap() as usize).collect())
        .collect();

    let mut out = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let cfg = TrainConfig {
            lambda,
            warm_start: false,
            ..base.clone()
        };
        let model = train_on_pieces(&pieces, layout, &cfg, None)?;
        let mut column_losses = Vec::with_capacity(masked.n_cols());
        for j in 0..masked.n_cols() {
            let mut wrong = 0usize;
            let mut total = 0usize;
            for i in 0..masked.n_rows() {
                if masked.cell(i, j).is_none() {
                    continue;
                }
                total += 1;
                let pred = conditional_argmax(&model.params, &truth_rows[i], j);
                if pred != masked.cell(i, j).unwrap() as usize {
                    wrong += 1;
                }
            }
            if total > 0 {
                column_losses.push(wrong as f64 / total as f64);
            }
        }
        let mean = column_losses.iter().sum::<f64>() / column_losses.len().max(1) as f64;
        out.push((lambda, mean));
    }
    Ok(out)
}

/// Best label for column j given the rest of the row; ties go to the lowest
/// label index.
pub fn conditional_argmax(params: &MrfParams, row: &[usize], j: usize) -> usize {
    let scores = single_candidate_scores(params.flatten(), params.layout(), row, j);
    let mut best = 0usize;
    let mut best_val = f64::NEG_INFINITY;
    for (a, &s) in scores.iter().enumerate() {
        if s > best_val {
            best_val = s;
            best = a;
        }
    }
    best
}

/// Default grid for the regularization constant.
pub fn default_lambda_grid() -> Vec<f64> {
    vec![1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MrfLayout;
    use crate::optim::gradient_check;
    use crate::table::{load_csv, ColumnDomain};
    use rand::Rng;

    fn table_from_csv(text: &str) -> CategoricalTable {
        load_csv(text.as_bytes(), "?", b',').unwrap()
    }

    fn random_small_table(seed: u64, n: usize, cards: &[usize]) -> CategoricalTable {
        let domains: Vec<ColumnDomain> = cards
            .iter()
            .enumerate()
            .map(|(j, &c)| {
                ColumnDomain::new(format!("c{}", j), (0..c).map(|l| format!("v{}", l)).collect())
                    .unwrap()
            })
            .collect();
        let domains = Arc::new(domains);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let cells = (0..n * cards.len())
            .map(|idx| Some(rng.gen_range(0..cards[idx % cards.len()]) as u32))
            .collect();
        CategoricalTable::from_parts(domains, cells, n).unwrap()
    }

    #[test]
    fn piece_counts_single_and_pair() {
        let t = table_from_csv("a,b,c,d,e\n0,1,0,1,0\n0,?,?,1,1\n?,?,?,?,?\n1,1,1,1,1\n");
        // row 2 is fully missing; complete it for piece building
        let missing = t.missing_positions();
        let filled = mode_fill(&t).unwrap();
        let single = build_pieces(&filled, &missing, PieceType::Single).unwrap();
        // rows have 5, 3, 0, 5 observed columns
        assert_eq!(single.len(), 5 + 3 + 0 + 5);
        let pair = build_pieces(&filled, &missing, PieceType::Pair).unwrap();
        assert_eq!(pair.len(), 10 + 3 + 0 + 10);
        let both = build_pieces(&filled, &missing, PieceType::Both).unwrap();
        assert_eq!(both.len(), single.len() + pair.len());
    }

    #[test]
    fn pieces_never_target_missing_cells() {
        let t = table_from_csv("a,b,c\n0,?,1\n?,1,0\n1,0,?\n");
        let missing = t.missing_positions();
        let filled = mode_fill(&t).unwrap();
        let pieces = build_pieces(&filled, &missing, PieceType::Both).unwrap();
        for p in pieces.pieces() {
            match p.vars {
                PieceVars::Single { col, .. } => assert!(!missing.contains(p.row, col)),
                PieceVars::Pair { cols, .. } => {
                    assert!(!missing.contains(p.row, cols[0]));
                    assert!(!missing.contains(p.row, cols[1]));
                }
            }
        }
    }

    #[test]
    fn wwfp_value_at_zero_matches_margin_arithmetic() {
        let t = random_small_table(3, 8, &[3, 2, 4]);
        let layout = MrfLayout::complete(Arc::clone(t.domains())).unwrap();
        let pieces = build_pieces(&t, &Mask::default(), PieceType::Single).unwrap();
        let lambda = 2.5;
        let (value, _) = wwfp_value_grad(&vec![0.0; layout.dim()], &layout, &pieces, lambda).unwrap();
        // at zero parameters every rival has psi = 1
        let mut expected = 0.0;
        for p in pieces.pieces() {
            if let PieceVars::Single { col, .. } = p.vars {
                expected += (layout.cardinality(col) - 1) as f64;
            }
        }
        expected *= lambda / 2.0;
        assert!((value - expected).abs() < 1e-10, "{} vs {}", value, expected);
    }

    #[test]
    fn wwfp_value_reduces_to_regularizer_when_margins_met() {
        // two perfectly correlated binary columns; set a strong model by hand
        let t = table_from_csv("a,b\n0,0\n1,1\n0,0\n1,1\n");
        let layout = MrfLayout::complete(Arc::clone(t.domains())).unwrap();
        let mut values = vec![0.0; layout.dim()];
        // edge table rewards agreement heavily
        values[layout.edge_entry(0, 0, 0)] = 10.0;
        values[layout.edge_entry(0, 1, 1)] = 10.0;
        values[layout.edge_entry(0, 0, 1)] = -10.0;
        values[layout.edge_entry(0, 1, 0)] = -10.0;
        let pieces = build_pieces(&t, &Mask::default(), PieceType::Single).unwrap();
        let (value, _) = wwfp_value_grad(&values, &layout, &pieces, 1.0).unwrap();
        let reg = 0.5 * values.iter().map(|v| v * v).sum::<f64>();
        assert!((value - reg).abs() < 1e-12);
    }

    #[test]
    fn wwfp_gradient_matches_finite_differences() {
        let t = random_small_table(11, 10, &[3, 2, 3]);
        let layout = MrfLayout::complete(Arc::clone(t.domains())).unwrap();
        let (masked, _) = crate::table::inject_mcar(
            &t,
            &crate::table::MissingSpec::uniform(0.2, 3, 5).unwrap(),
        )
        .unwrap();
        let missing = masked.missing_positions();
        let filled = mode_fill(&masked).unwrap();
        for piece_type in [PieceType::Single, PieceType::Pair, PieceType::Both] {
            let pieces = build_pieces(&filled, &missing, piece_type).unwrap();
            let problem = WwfpProblem {
                layout: &layout,
                pieces: &pieces,
                lambda: 1.7,
            };
            let mut rng = ChaCha12Rng::seed_from_u64(23);
            let x: Vec<f64> = (0..layout.dim()).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let worst = gradient_check(&problem, &x, 1e-6).unwrap();
            assert!(worst < 1e-5, "{:?}: worst rel err {}", piece_type, worst);
        }
    }

    #[test]
    fn wwfp_value_invariant_to_piece_order() {
        let t = random_small_table(7, 30, &[2, 3, 2, 2]);
        let layout = MrfLayout::complete(Arc::clone(t.domains())).unwrap();
        let pieces = build_pieces(&t, &Mask::default(), PieceType::Single).unwrap();
        let mut order: Vec<usize> = (0..pieces.len()).collect();
        order.reverse();
        let shuffled = pieces.with_piece_order(&order);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..layout.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (v1, g1) = wwfp_value_grad(&x, &layout, &pieces, 0.8).unwrap();
        let (v2, g2) = wwfp_value_grad(&x, &layout, &shuffled, 0.8).unwrap();
        assert!((v1 - v2).abs() <= 1e-12 * v1.abs().max(1.0));
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn wwfp_objective_is_convex() {
        let t = random_small_table(13, 12, &[2, 2, 3]);
        let layout = MrfLayout::complete(Arc::clone(t.domains())).unwrap();
        let pieces = build_pieces(&t, &Mask::default(), PieceType::Single).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        for _ in 0..20 {
            let x1: Vec<f64> = (0..layout.dim()).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let x2: Vec<f64> = (0..layout.dim()).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let tmix: f64 = rng.gen_range(0.05..0.95);
            let xm: Vec<f64> = x1
                .iter()
                .zip(&x2)
                .map(|(a, b)| tmix * a + (1.0 - tmix) * b)
                .collect();
            let (f1, _) = wwfp_value_grad(&x1, &layout, &pieces, 1.3).unwrap();
            let (f2, _) = wwfp_value_grad(&x2, &layout, &pieces, 1.3).unwrap();
            let (fm, _) = wwfp_value_grad(&xm, &layout, &pieces, 1.3).unwrap();
            assert!(fm <= tmix * f1 + (1.0 - tmix) * f2 + 1e-9);
        }
    }

    #[test]
    fn row_loss_untouched_by_unrelated_parameters() {
        // row 0 misses columns 2 and 3: its pieces must not react to the
        // node tables of 2,3 or the (2,3) edge
        let t = table_from_csv("a,b,c,d\n0,1,?,?\n1,0,1,0\n0,0,0,1\n1,1,1,0\n");
        let missing = t.missing_positions();
        let filled = mode_fill(&t).unwrap();
        let layout = MrfLayout::complete(Arc::clone(filled.domains())).unwrap();
        let pieces = build_pieces(&filled, &missing, PieceType::Single).unwrap();
        let row0 = pieces.restricted_to_row(0);

        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..layout.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (f_before, _) = wwfp_value_grad(&x, &layout, &row0, 1.0).unwrap();

        let mut x2 = x.clone();
        x2[layout.node_entry(2, 0)] += 3.0;
        x2[layout.node_entry(3, 1)] -= 2.0;
        let e23 = layout
            .edge_set()
            .pairs()
            .iter()
            .position(|&p| p == (2, 3))
            .unwrap();
        x2[layout.edge_entry(e23, 1, 0)] += 4.0;
        let (f_after, _) = wwfp_value_grad(&x2, &layout, &row0, 1.0).unwrap();
        // remove the regularizer difference before comparing
        let reg1 = 0.5 * x.iter().map(|v| v * v).sum::<f64>();
        let reg2 = 0.5 * x2.iter().map(|v| v * v).sum::<f64>();
        assert!(((f_before - reg1) - (f_after - reg2)).abs() < 1e-10);
    }

    #[test]
    fn csfp_zero_parameters_binary_piece() {
        let t = table_from_csv("a,b\n0,1\n1,0\n");
        let layout = MrfLayout::complete(Arc::clone(t.domains())).unwrap();
        let pieces = build_pieces(&t, &Mask::default(), PieceType::Single).unwrap();
        let lambda = 2.0;
        let zero = vec![0.0; layout.dim()];
        let g = csfp_subgradient(&zero, &layout, &pieces, 0, lambda).unwrap();
        // piece 0: row 0, column a, gold label 0 -> rival is label 1
        let p = &pieces.pieces()[0];
        assert_eq!(
            p.vars,
            PieceVars::Single { col: 0, gold: 0 }
        );
        // subgradient = lambda * (feature(rival) - feature(gold))
        assert_eq!(g[layout.node_entry(0, 1)], lambda);
        assert_eq!(g[layout.node_entry(0, 0)], -lambda);
        // context of row 0 has b=1
        assert_eq!(g[layout.edge_entry(0, 1, 1)], lambda);
        assert_eq!(g[layout.edge_entry(0, 0, 1)], -lambda);
    }

    #[test]
    fn csfp_inactive_when_gold_wins_with_margin() {
        let t = table_from_csv("a,b\n0,0\n1,1\n");
        let layout = MrfLayout::complete(Arc::clone(t.domains())).unwrap();
        let mut values = vec![0.0; layout.dim()];
        values[layout.node_entry(0, 0)] = 5.0;
        values[layout.node_entry(0, 1)] = -5.0;
        let pieces = build_pieces(&t, &Mask::default(), PieceType::Single).unwrap();
        let g = csfp_subgradient(&values, &layout, &pieces, 0, 1.0).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn csfp_matches_directional_derivative_away_from_kinks() {
        let t = random_small_table(19, 6, &[2, 3]);
        let layout = MrfLayout::complete(Arc::clone(t.domains())).unwrap();
        let pieces = build_pieces(&t, &Mask::default(), PieceType::Single).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let lambda = 1.0;
        let mut checked = 0;
        for trial in 0..40 {
            let x: Vec<f64> = (0..layout.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let idx = trial % pieces.len();
            let piece = &pieces.pieces()[idx];
            let ctx = &pieces.rows()[piece.row];
            let (best, best_aug, gold, gold_score) = loss_augmented_best(&x, &layout, ctx, piece);
            let psi = best_aug - gold_score;
            // skip near-kink points where the hinge or argmax may switch
            if psi.abs() < 0.05 || best == gold {
                continue;
            }
            let g = csfp_subgradient(&x, &layout, &pieces, idx, lambda).unwrap();
            let dir: Vec<f64> = (0..layout.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let h = 1e-7;
            let eval = |pt: &[f64]| -> f64 {
                let (_, aug, _, gs) = loss_augmented_best(pt, &layout, ctx, piece);
                lambda * (aug - gs).max(0.0)
            };
            let xp: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + h * d).collect();
            let xm: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a - h * d).collect();
            let numeric = (eval(&xp) - eval(&xm)) / (2.0 * h);
            let analytic: f64 = g.iter().zip(&dir).map(|(a, d)| a * d).sum();
            assert!(
                (numeric - analytic).abs() < 1e-4 * numeric.abs().max(1.0),
                "directional derivative mismatch: {} vs {}",
                numeric,
                analytic
            );
            checked += 1;
        }
        assert!(checked >= 10, "only {} checkable trials", checked);
    }

    #[test]
    fn train_perfectly_dependent_columns() {
        // four copies of one binary column: margins become separable and
        // conditional prediction is perfect
        let mut rng = ChaCha12Rng::seed_from_u64(40);
        let mut csv = String::from("a,b,c,d\n");
        for _ in 0..60 {
            let v = rng.gen_range(0..2);
            csv.push_str(&format!("{v},{v},{v},{v}\n"));
        }
        let t = table_from_csv(&csv);
        let layout = MrfLayout::complete(Arc::clone(t.domains())).unwrap();
        let cfg = TrainConfig {
            lambda: 10.0,
            ..TrainConfig::default()
        };
        let model = train(&t, &Mask::default(), &layout, &cfg, None).unwrap();
        // loss share of the objective is driven to (near) zero
        let reg = 0.5 * model.params.flatten().iter().map(|v| v * v).sum::<f64>();
        let loss_part = model.objective - reg;
        let pieces = build_pieces(&t, &Mask::default(), PieceType::Single).unwrap();
        let (at_zero, _) = wwfp_value_grad(&vec![0.0; layout.dim()], &layout, &pieces, cfg.lambda).unwrap();
        assert!(loss_part < 0.01 * at_zero, "loss part {} vs {}", loss_part, at_zero);
        // held-out prediction: each cell recovered from the rest of its row
        for v in 0..2usize {
            let row = vec![v; 4];
            for j in 0..4 {
                assert_eq!(conditional_argmax(&model.params, &row, j), v);
            }
        }
    }

    #[test]
    fn tiny_lambda_shrinks_parameters() {
        let t = random_small_table(99, 20, &[2, 2, 2]);
        let layout = MrfLayout::complete(Arc::clone(t.domains())).unwrap();
        let cfg = TrainConfig {
            lambda: 1e-8,
            ..TrainConfig::default()
        };
        let model = train(&t, &Mask::default(), &layout, &cfg, None).unwrap();
        let norm: f64 = model.params.flatten().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-4, "norm {}", norm);
    }

    #[test]
    fn train_deterministic() {
        let t = random_small_table(55, 25, &[2, 3, 2]);
        let layout = MrfLayout::complete(Arc::clone(t.domains())).unwrap();
        let cfg = TrainConfig::default();
        let a = train(&t, &Mask::default(), &layout, &cfg, None).unwrap();
        let b = train(&t, &Mask::default(), &layout, &cfg, None).unwrap();
        assert_eq!(a.params.flatten(), b.params.flatten());
        assert_eq!(a.objective, b.objective);
    }

    #[test]
    fn cv_single_element_grid() {
        let t = table_from_csv("a,b\n0,?\n1,1\n0,0\n1,1\n0,0\n1,1\n0,0\n1,1\n0,0\n1,?\n");
        let layout = MrfLayout::complete(Arc::clone(t.domains())).unwrap();
        let (best, losses) = cross_validate_lambda(
            &t,
            &layout,
            &[0.5],
            CvProtocol::Holdout {
                fraction: 0.2,
                seed: 3,
            },
            &TrainConfig::default(),
        )
        .unwrap();
        assert_eq!(best, 0.5);
        assert_eq!(losses.len(), 1);
    }

    #[test]
    fn cv_empty_grid_rejected() {
        let t = table_from_csv("a,b\n0,1\n1,0\n");
        let layout = MrfLayout::complete(Arc::clone(t.domains())).unwrap();
        assert!(cross_validate_lambda(
            &t,
            &layout,
            &[],
            CvProtocol::Holdout {
                fraction: 0.2,
                seed: 3
            },
            &TrainConfig::default()
        )
        .is_err());
    }

    #[test]
    fn cv_picks_the_fitting_side_on_dependent_data() {
        // imbalanced marginals plus perfect dependence: the over-regularized
        // model collapses to majority prediction and misses every minority
        // row, while the fitted model follows the dependence
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let mut csv = String::from("a,b,c\n");
        for _ in 0..120 {
            let v = usize::from(rng.gen_bool(0.15));
            let row = vec![v.to_string(); 3];
            csv.push_str(&row.join(","));
            csv.push('\n');
        }
        let t = table_from_csv(&csv);
        let (masked, _) = crate::table::inject_mcar(
            &t,
            &crate::table::MissingSpec::uniform(0.1, 3, 21).unwrap(),
        )
        .unwrap();
        let layout = MrfLayout::complete(Arc::clone(t.domains())).unwrap();
        let (best, losses) = cross_validate_lambda(
            &masked,
            &layout,
            &[1e-3, 1e3],
            CvProtocol::Holdout {
                fraction: 0.2,
                seed: 4,
            },
            &TrainConfig::default(),
        )
        .unwrap();
        assert_eq!(best, 1e3, "losses: {:?}", losses);
        // the under-regularized side predicts near the majority rate
        let under = losses.iter().find(|&&(l, _)| l == 1e-3).unwrap().1;
        let fit = losses.iter().find(|&&(l, _)| l == 1e3).unwrap().1;
        assert!(under > fit, "losses: {:?}", losses);
    }

    #[test]
    fn cv_tie_goes_to_smaller_lambda() {
        // a table with no usable signal: every constant predicts identically
        let t = table_from_csv("a,b\n0,0\n0,0\n0,0\n0,0\n0,0\n1,1\n");
        let layout = MrfLayout::complete(Arc::clone(t.domains())).unwrap();
        let (best, losses) = cross_validate_lambda(
            &t,
            &layout,
            &[10.0, 0.1, 1.0],
            CvProtocol::Holdout {
                fraction: 0.4,
                seed: 2,
            },
            &TrainConfig::default(),
        )
        .unwrap();
        let min = losses
            .iter()
            .map(|&(_, l)| l)
            .fold(f64::INFINITY, f64::min);
        let smallest_with_min = losses
            .iter()
            .filter(|&&(_, l)| l == min)
            .map(|&(l, _)| l)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(best, smallest_with_min);
    }
}
