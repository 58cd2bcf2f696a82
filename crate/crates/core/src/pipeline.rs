//! End-to-end imputation methods and the experiment harness.
//!
//! The alternating driver repeats [learn on the completed table, re-impute
//! the missing cells] until the training objective stops improving or the
//! imputed cells stop changing. Baselines: column modes, and a deterministic
//! backfitting loop of per-column linear classifiers.

use crate::error::{Error, Result};
use crate::joint::{
    build_constraints, impute_constrained, impute_independent, ConstraintMenu, JointConfig,
};
use crate::learn::{
    cross_validate_lambda, default_lambda_grid, train, CvProtocol, TrainConfig,
};
use crate::model::{EdgeSet, MrfLayout, MrfParams};
use crate::optim::{minimize, OptimizerConfig, SmoothProblem};
use crate::table::{
    derive_seed, hamming_loss, make_splits, mode_fill, CategoricalTable, Mask, MissingSpec,
};
use rayon::prelude::*;
use serde::Serialize;
use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Method {
    Mode,
    Backfit,
    WwfpWo,
    WwfpWc,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Mode => "mo",
            Method::Backfit => "bf",
            Method::WwfpWo => "wwfp-wo",
            Method::WwfpWc => "wwfp-wc",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "mo" => Ok(Method::Mode),
            "bf" => Ok(Method::Backfit),
            "wwfp-wo" => Ok(Method::WwfpWo),
            "wwfp-wc" => Ok(Method::WwfpWc),
            other => Err(Error::InvalidConfig(format!(
                "unknown method {:?} (expected mo|bf|wwfp-wo|wwfp-wc)",
                other
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub enum LambdaChoice {
    Fixed(f64),
    /// Cross-validate over the grid (empty means the default grid).
    Auto(Vec<f64>),
}

impl Default for LambdaChoice {
    fn default() -> Self {
        LambdaChoice::Auto(Vec::new())
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Exit when the relative change of the training objective drops below
    /// this.
    pub tol: f64,
    pub max_outer_iterations: usize,
    pub train: TrainConfig,
    pub joint: JointConfig,
    pub constraints: ConstraintMenu,
    pub method: Method,
    pub lambda: LambdaChoice,
    /// Explicit edge list; the default is the complete graph.
    pub edges: Option<Vec<(usize, usize)>>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            tol: 1e-4,
            max_outer_iterations: 25,
            train: TrainConfig::default(),
            joint: JointConfig::default(),
            constraints: ConstraintMenu::label_and_pairwise(),
            method: Method::WwfpWc,
            lambda: LambdaChoice::default(),
            edges: None,
            seed: 42,
        }
    }
}

impl RunConfig {
    fn validate(&self) -> Result<()> {
        if self.tol <= 0.0 {
            return Err(Error::InvalidConfig("tol must be positive".into()));
        }
        if self.max_outer_iterations == 0 {
            return Err(Error::InvalidConfig(
                "max outer iterations must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ExitReason {
    /// No imputed cell changed during the iteration.
    NoChange,
    /// Relative objective improvement fell below tolerance.
    SmallImprovement,
    MaxIterations,
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct PhaseTimings {
    pub cv_seconds: f64,
    pub train_seconds: f64,
    pub impute_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct ImputationRun {
    pub table: CategoricalTable,
    /// Training objective after each learn phase.
    pub objective_trace: Vec<f64>,
    /// Number of imputed cells that changed in each iteration.
    pub change_trace: Vec<usize>,
    /// Total constraint violation after each impute phase (constrained runs).
    pub violation_trace: Vec<f64>,
    /// Per-constraint worst count deviation at the final table.
    pub final_violations: Vec<f64>,
    /// Matching satisfaction tolerances.
    pub violation_tolerances: Vec<f64>,
    pub iterations: usize,
    pub exit: ExitReason,
    pub lambda: f64,
    pub timings: PhaseTimings,
}

/// Alternate learning and imputation from a mode-filled start.
pub fn run_alternating(masked: &CategoricalTable, cfg: &RunConfig) -> Result<ImputationRun> {
    cfg.validate()?;
    if !matches!(cfg.method, Method::WwfpWo | Method::WwfpWc) {
        return Err(Error::InvalidConfig(
            "alternating driver handles wwfp-wo and wwfp-wc only".into(),
        ));
    }
    let missing = masked.missing_positions();
    let layout = match &cfg.edges {
        Some(pairs) => MrfLayout::new(
            Arc::clone(masked.domains()),
            EdgeSet::from_pairs(pairs.clone(), masked.n_cols())?,
        )?,
        None => MrfLayout::complete(Arc::clone(masked.domains()))?,
    };

    let mut timings = PhaseTimings::default();
    let lambda = match &cfg.lambda {
        LambdaChoice::Fixed(l) => *l,
        LambdaChoice::Auto(grid) => {
            let grid = if grid.is_empty() {
                default_lambda_grid()
            } else {
                grid.clone()
            };
            let started = Instant::now();
            let (best, _) = cross_validate_lambda(
                masked,
                &layout,
                &grid,
                CvProtocol::Holdout {
                    fraction: 0.2,
                    seed: derive_seed(cfg.seed, 0xCF),
                },
                &cfg.train,
            )
            .map_err(|e| e.in_phase("cross-validation"))?;
            timings.cv_seconds = started.elapsed().as_secs_f64();
            best
        }
    };
    let train_cfg = TrainConfig {
        lambda,
        ..cfg.train.clone()
    };

    let constraints = if cfg.method == Method::WwfpWc {
        build_constraints(masked, &cfg.constraints).map_err(|e| e.in_phase("constraints"))?
    } else {
        Vec::new()
    };

    let mut completed = mode_fill(masked).map_err(|e| e.in_phase("initialization"))?;
    let mut objective_trace = Vec::new();
    let mut change_trace = Vec::new();
    let mut violation_trace = Vec::new();
    let mut final_violations = Vec::new();
    let mut violation_tolerances = Vec::new();
    let mut warm: Option<MrfParams> = None;
    let mut exit = ExitReason::MaxIterations;
    let mut iterations = 0usize;

    for r in 0..cfg.max_outer_iterations {
        iterations = r + 1;
        let started = Instant::now();
        let model = train(&completed, &missing, &layout, &train_cfg, warm.as_ref())
            .map_err(|e| e.in_phase("learning"))?;
        timings.train_seconds += started.elapsed().as_secs_f64();
        if train_cfg.warm_start {
            warm = Some(model.params.clone());
        }

        let started = Instant::now();
        let new_table = match cfg.method {
            Method::WwfpWo => {
                violation_trace.push(0.0);
                impute_independent(&model.params, masked, &cfg.joint)
                    .map_err(|e| e.in_phase("imputation"))?
            }
            Method::WwfpWc => {
                let outcome = impute_constrained(&model.params, masked, &constraints, &cfg.joint)
                    .map_err(|e| e.in_phase("imputation"))?;
                violation_trace.push(outcome.violation_trace.last().copied().unwrap_or(0.0));
                final_violations = outcome.final_violations;
                violation_tolerances = constraints
                    .iter()
                    .map(|c| crate::joint::satisfaction_tolerance(masked, c, cfg.joint.violation_fraction))
                    .collect();
                outcome.table
            }
            _ => unreachable!(),
        };
        timings.impute_seconds += started.elapsed().as_secs_f64();

        let changes = completed
            .cells()
            .iter()
            .zip(new_table.cells())
            .filter(|(a, b)| a != b)
            .count();
        completed = new_table;
        objective_trace.push(model.objective);
        change_trace.push(changes);

        if changes == 0 {
            exit = ExitReason::NoChange;
            break;
        }
        if r > 0 {
            let prev = objective_trace[r - 1];
            let rel = (prev - objective_trace[r]).abs() / prev.abs().max(f64::MIN_POSITIVE);
            if rel < cfg.tol {
                exit = ExitReason::SmallImprovement;
                break;
            }
        }
    }

    Ok(ImputationRun {
        table: completed,
        objective_trace,
        change_trace,
        violation_trace,
        final_violations,
        violation_tolerances,
        iterations,
        exit,
        lambda,
        timings,
    })
}

/// One-vs-rest squared-hinge linear classifier over one-hot contexts: the
/// training problem for one backfit column.
struct OneVsRestProblem<'a> {
    /// Active feature indices per training row (one per context column).
    features: &'a [Vec<usize>],
    labels: &'a [usize],
    n_classes: usize,
    n_features: usize,
    lambda: f64,
}

impl SmoothProblem for OneVsRestProblem<'_> {
    fn dim(&self) -> usize {
        self.n_classes * self.n_features
    }

    fn eval(&self, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut value = 0.5 * w.iter().map(|v| v * v).sum::<f64>();
        let mut grad: Vec<f64> = w.to_vec();
        for (row_features, &label) in self.features.iter().zip(self.labels) {
            for c in 0..self.n_classes {
                let base = c * self.n_features;
                let margin: f64 = row_features.iter().map(|&f| w[base + f]).sum();
                let y = if label == c { 1.0 } else { -1.0 };
                let slack = 1.0 - y * margin;
                if slack > 0.0 {
                    value += 0.5 * self.lambda * slack * slack;
                    let coeff = -self.lambda * slack * y;
                    for &f in row_features {
                        grad[base + f] += coeff;
                    }
                }
            }
        }
        Ok((value, grad))
    }
}

fn backfit_column_features(
    completed: &CategoricalTable,
    j: usize,
    rows: &[usize],
) -> (Vec<Vec<usize>>, usize, Vec<usize>) {
    // feature offsets for every column except j
    let mut offsets = vec![usize::MAX; completed.n_cols()];
    let mut dim = 0usize;
    for k in 0..completed.n_cols() {
        if k == j {
            continue;
        }
        offsets[k] = dim;
        dim += completed.domain(k).cardinality();
    }
    let features = rows
        .iter()
        .map(|&i| {
            (0..completed.n_cols())
                .filter(|&k| k != j)
                .map(|k| offsets[k] + completed.cell(i, k).unwrap() as usize)
                .collect()
        })
        .collect();
    (features, dim, offsets)
}

/// Deterministic backfitting: mode-fill, then sweep the columns, refitting a
/// per-column classifier on the originally observed cells and re-predicting
/// that column's missing cells, until a sweep changes nothing.
pub fn backfit(
    masked: &CategoricalTable,
    lambda: &LambdaChoice,
    max_sweeps: usize,
) -> Result<CategoricalTable> {
    let lambda = match lambda {
        LambdaChoice::Fixed(l) => *l,
        LambdaChoice::Auto(grid) => {
            let grid = if grid.is_empty() {
                default_lambda_grid()
            } else {
                grid.clone()
            };
            backfit_cv(masked, &grid, max_sweeps)?
        }
    };
    backfit_fixed(masked, lambda, max_sweeps)
}

fn backfit_fixed(
    masked: &CategoricalTable,
    lambda: f64,
    max_sweeps: usize,
) -> Result<CategoricalTable> {
    let mut completed = mode_fill(masked)?;
    let optimizer = OptimizerConfig {
        max_iterations: 200,
        ..OptimizerConfig::default()
    };
    for _ in 0..max_sweeps.max(1) {
        let mut changes = 0usize;
        for j in 0..masked.n_cols() {
            let observed_rows: Vec<usize> = (0..masked.n_rows())
                .filter(|&i| masked.cell(i, j).is_some())
                .collect();
            let missing_rows: Vec<usize> = (0..masked.n_rows())
                .filter(|&i| masked.cell(i, j).is_none())
                .collect();
            if missing_rows.is_empty() {
                continue;
            }
            let mut seen = vec![false; masked.domain(j).cardinality()];
            for &i in &observed_rows {
                seen[masked.cell(i, j).unwrap() as usize] = true;
            }
            let distinct = seen.iter().filter(|&&s| s).count();
            if distinct < 2 {
                let label = seen.iter().position(|&s| s).ok_or_else(|| {
                    Error::EmptyColumn(masked.domain(j).name.clone())
                })? as u32;
                let updates: Vec<(usize, usize, u32)> = missing_rows
                    .iter()
                    .filter(|&&i| completed.cell(i, j) != Some(label))
                    .map(|&i| (i, j, label))
                    .collect();
                changes += updates.len();
                completed = completed.with_cells(&updates)?;
                continue;
            }

            let (features, dim, _) = backfit_column_features(&completed, j, &observed_rows);
            let labels: Vec<usize> = observed_rows
                .iter()
                .map(|&i| masked.cell(i, j).unwrap() as usize)
                .collect();
            let n_classes = masked.domain(j).cardinality();
            let problem = OneVsRestProblem {
                features: &features,
                labels: &labels,
                n_classes,
                n_features: dim,
                lambda,
            };
            let fit = minimize(&problem, &vec![0.0; problem.dim()], &optimizer)?;
            let (miss_features, _, _) = backfit_column_features(&completed, j, &missing_rows);
            let mut updates = Vec::new();
            for (&i, row_features) in missing_rows.iter().zip(&miss_features) {
                let mut best = 0usize;
                let mut best_score = f64::NEG_INFINITY;
                for c in 0..n_classes {
                    let base = c * dim;
                    let score: f64 = row_features.iter().map(|&f| fit.point[base + f]).sum();
                    if score > best_score {
                        best_score = score;
                        best = c;
                    }
                }
                if completed.cell(i, j) != Some(best as u32) {
                    updates.push((i, j, best as u32));
                }
            }
            changes += updates.len();
            completed = completed.with_cells(&updates)?;
        }
        if changes == 0 {
            break;
        }
    }
    Ok(completed)
}

fn backfit_cv(masked: &CategoricalTable, grid: &[f64], max_sweeps: usize) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("lambda grid is empty".into()));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // hold out a fifth of the observed cells per column, refit, score 0/1
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(derive_seed(0xBF, 0xCF));
    let mut pseudo = Vec::new();
    for j in 0..masked.n_cols() {
        let mut observed: Vec<usize> = (0..masked.n_rows())
            .filter(|&i| masked.cell(i, j).is_some())
            .collect();
        let count = (0.2 * observed.len() as f64).floor() as usize;
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
        return Ok(grid[0]);
    }
    let doubly_masked = masked.with_masked(&pseudo);
    let mut best = (grid[0], f64::INFINITY);
    for &lambda in &grid {
        let filled = backfit_fixed(&doubly_masked, lambda, max_sweeps)?;
        let mut wrong = 0usize;
        for &(i, j) in pseudo.cells() {
            if filled.cell(i, j) != masked.cell(i, j) {
                wrong += 1;
            }
        }
        let loss = wrong as f64 / pseudo.len() as f64;
        if loss < best.1 {
            best = (lambda, loss);
        }
    }
    Ok(best.0)
}

/// Run one method end to end on a masked table.
pub fn run_method(masked: &CategoricalTable, cfg: &RunConfig) -> Result<RunOutput> {
    let started = Instant::now();
    match cfg.method {
        Method::Mode => {
            let table = mode_fill(masked)?;
            Ok(RunOutput {
                table,
                seconds: started.elapsed().as_secs_f64(),
                run: None,
            })
        }
        Method::Backfit => {
            let table = backfit(masked, &cfg.lambda, cfg.max_outer_iterations)?;
            Ok(RunOutput {
                table,
                seconds: started.elapsed().as_secs_f64(),
                run: None,
            })
        }
        Method::WwfpWo | Method::WwfpWc => {
            let run = run_alternating(masked, cfg)?;
            Ok(RunOutput {
                table: run.table.clone(),
                seconds: started.elapsed().as_secs_f64(),
                run: Some(run),
            })
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub table: CategoricalTable,
    pub seconds: f64,
    pub run: Option<ImputationRun>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SplitResult {
    pub split: usize,
    pub loss: Option<f64>,
    pub seconds: f64,
    pub error: Option<String>,
    pub iterations: Option<usize>,
    pub exit: Option<ExitReason>,
    /// Worst per-constraint count deviations of constrained runs.
    pub final_violations: Vec<f64>,
    pub violation_tolerances: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentCell {
    pub fraction: f64,
    pub method: Method,
    pub splits: Vec<SplitResult>,
}

impl ExperimentCell {
    pub fn mean_loss(&self) -> Option<f64> {
        let losses: Vec<f64> = self.splits.iter().filter_map(|s| s.loss).collect();
        if losses.is_empty() {
            None
        } else {
            Some(losses.iter().sum::<f64>() / losses.len() as f64)
        }
    }

    /// Sample standard deviation across splits.
    pub fn std_loss(&self) -> Option<f64> {
        let losses: Vec<f64> = self.splits.iter().filter_map(|s| s.loss).collect();
        if losses.len() < 2 {
            return None;
        }
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        let var = losses.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>()
            / (losses.len() - 1) as f64;
        Some(var.sqrt())
    }

    pub fn mean_seconds(&self) -> f64 {
        if self.splits.is_empty() {
            return 0.0;
        }
        self.splits.iter().map(|s| s.seconds).sum::<f64>() / self.splits.len() as f64
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub cells: Vec<ExperimentCell>,
}

/// Inject each fraction n_splits times and run every method on every split.
/// Per-split sub-seeds derive from `cfg.seed` and the fraction, so the grid
/// is reproducible cell by cell. A failing method is recorded and skipped.
pub fn run_experiment(
    truth: &CategoricalTable,
    fractions: &[f64],
    n_splits: usize,
    methods: &[Method],
    cfg: &RunConfig,
) -> Result<ExperimentReport> {
    if !truth.is_complete() {
        return Err(Error::InvalidConfig(
            "experiment requires a complete truth table".into(),
        ));
    }
    struct Job {
        fraction_idx: usize,
        method_idx: usize,
        split: usize,
        masked: CategoricalTable,
        mask: Mask,
        seed: u64,
    }
    let mut jobs = Vec::new();
    for (fi, &fraction) in fractions.iter().enumerate() {
        let spec = MissingSpec::uniform(
            fraction,
            truth.n_cols(),
            derive_seed(cfg.seed, (fraction * 1000.0).round() as u64),
        )?;
        let splits = make_splits(truth, &spec, n_splits)?;
        for (s, (masked, mask)) in splits.into_iter().enumerate() {
            for mi in 0..methods.len() {
                jobs.push(Job {
                    fraction_idx: fi,
                    method_idx: mi,
                    split: s,
                    masked: masked.clone(),
                    mask: mask.clone(),
                    seed: derive_seed(spec.seed, s as u64 + 1),
                });
            }
        }
    }

    let results: Vec<(usize, usize, SplitResult)> = jobs
        .par_iter()
        .map(|job| {
            let run_cfg = RunConfig {
                method: methods[job.method_idx],
                seed: job.seed,
                ..cfg.clone()
            };
            let result = run_method(&job.masked, &run_cfg).and_then(|out| {
                let loss = hamming_loss(&out.table, truth, &job.mask)?;
                Ok((out, loss))
            });
            let split_result = match result {
                Ok((out, loss)) => SplitResult {
                    split: job.split,
                    loss: Some(loss),
                    seconds: out.seconds,
                    error: None,
                    iterations: out.run.as_ref().map(|r| r.iterations),
                    exit: out.run.as_ref().map(|r| r.exit),
                    final_violations: out
                        .run
                        .as_ref()
                        .map(|r| r.final_violations.clone())
                        .unwrap_or_default(),
                    violation_tolerances: out
                        .run
                        .as_ref()
                        .map(|r| r.violation_tolerances.clone())
                        .unwrap_or_default(),
                },
                Err(e) => SplitResult {
                    split: job.split,
                    loss: None,
                    seconds: 0.0,
                    error: Some(e.to_string()),
                    iterations: None,
                    exit: None,
                    final_violations: Vec::new(),
                    violation_tolerances: Vec::new(),
                },
            };
            (job.fraction_idx, job.method_idx, split_result)
        })
        .collect();

    let mut cells: Vec<ExperimentCell> = Vec::new();
    for (fi, &fraction) in fractions.iter().enumerate() {
        for (mi, &method) in methods.iter().enumerate() {
            let mut splits: Vec<SplitResult> = results
                .iter()
                .filter(|(f, m, _)| *f == fi && *m == mi)
                .map(|(_, _, s)| s.clone())
                .collect();
            splits.sort_by_key(|s| s.split);
            cells.push(ExperimentCell {
                fraction,
                method,
                splits,
            });
        }
    }
    Ok(ExperimentReport { cells })
}

/// TSV rows: dataset, fraction, method, mean_loss_pct, std_loss_pct,
/// mean_seconds. Failed cells carry NA.
pub fn write_experiment_tsv<W: Write>(
    report: &ExperimentReport,
    dataset: &str,
    mut w: W,
) -> Result<()> {
    writeln!(
        w,
        "dataset\tfraction\tmethod\tmean_loss_pct\tstd_loss_pct\tmean_seconds"
    )?;
    for cell in &report.cells {
        let mean = cell
            .mean_loss()
            .map(|l| format!("{:.4}", l * 100.0))
            .unwrap_or_else(|| "NA".into());
        let std = cell
            .std_loss()
            .map(|l| format!("{:.4}", l * 100.0))
            .unwrap_or_else(|| "NA".into());
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{:.3}",
            dataset,
            cell.fraction,
            cell.method.name(),
            mean,
            std,
            cell.mean_seconds()
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct TraceDoc<'a> {
    method: &'static str,
    lambda: f64,
    iterations: usize,
    exit: ExitReason,
    objective_trace: &'a [f64],
    change_trace: &'a [usize],
    violation_trace: &'a [f64],
    final_violations: &'a [f64],
}

/// Write the per-iteration traces of an alternating run as a JSON document.
/// Wall-clock timings are deliberately left out so the file is reproducible
/// byte for byte.
pub fn write_trace<W: Write>(run: &ImputationRun, method: Method, w: W) -> Result<()> {
    let doc = TraceDoc {
        method: method.name(),
        lambda: run.lambda,
        iterations: run.iterations,
        exit: run.exit,
        objective_trace: &run.objective_trace,
        change_trace: &run.change_trace,
        violation_trace: &run.violation_trace,
        final_violations: &run.final_violations,
    };
    serde_json::to_writer_pretty(w, &doc)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::load_csv;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn table(text: &str) -> CategoricalTable {
        load_csv(text.as_bytes(), "?", b',').unwrap()
    }

    /// Three binary columns, strongly dependent through a latent coin.
    fn dependent_truth(n: usize, seed: u64) -> CategoricalTable {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut csv = String::from("a,b,c\n");
        for _ in 0..n {
            let v = rng.gen_range(0..2);
            let mut row = Vec::new();
            for _ in 0..3 {
                let cell = if rng.gen_bool(0.9) { v } else { 1 - v };
                row.push(cell.to_string());
            }
            csv.push_str(&row.join(","));
            csv.push('\n');
        }
        table(&csv)
    }

    #[test]
    fn no_missing_cells_exits_after_one_iteration() {
        let t = dependent_truth(30, 1);
        let cfg = RunConfig {
            method: Method::WwfpWo,
            lambda: LambdaChoice::Fixed(1.0),
            ..RunConfig::default()
        };
        let run = run_alternating(&t, &cfg).unwrap();
        assert_eq!(run.iterations, 1);
        assert_eq!(run.exit, ExitReason::NoChange);
        assert_eq!(run.change_trace, vec![0]);
        assert_eq!(run.table, t);
    }

    #[test]
    fn traces_have_equal_length_and_positive_objective() {
        let truth = dependent_truth(60, 2);
        let (masked, _) = crate::table::inject_mcar(
            &truth,
            &MissingSpec::uniform(0.3, 3, 5).unwrap(),
        )
        .unwrap();
        let cfg = RunConfig {
            method: Method::WwfpWc,
            lambda: LambdaChoice::Fixed(1.0),
            ..RunConfig::default()
        };
        let run = run_alternating(&masked, &cfg).unwrap();
        assert_eq!(run.objective_trace.len(), run.iterations);
        assert_eq!(run.change_trace.len(), run.iterations);
        assert_eq!(run.violation_trace.len(), run.iterations);
        for &v in &run.objective_trace {
            assert!(v.is_finite() && v > 0.0);
        }
        assert!(run.iterations <= cfg.max_outer_iterations);
    }

    #[test]
    fn alternating_run_deterministic() {
        let truth = dependent_truth(50, 3);
        let (masked, _) = crate::table::inject_mcar(
            &truth,
            &MissingSpec::uniform(0.2, 3, 9).unwrap(),
        )
        .unwrap();
        let cfg = RunConfig {
            method: Method::WwfpWo,
            ..RunConfig::default()
        };
        let a = run_alternating(&masked, &cfg).unwrap();
        let b = run_alternating(&masked, &cfg).unwrap();
        assert_eq!(a.table, b.table);
        assert_eq!(a.objective_trace, b.objective_trace);
        assert_eq!(a.change_trace, b.change_trace);
        assert_eq!(a.lambda, b.lambda);
    }

    #[test]
    fn observed_cells_preserved_by_every_method() {
        let truth = dependent_truth(40, 4);
        let (masked, _) = crate::table::inject_mcar(
            &truth,
            &MissingSpec::uniform(0.3, 3, 11).unwrap(),
        )
        .unwrap();
        for method in [Method::Mode, Method::Backfit, Method::WwfpWo, Method::WwfpWc] {
            let cfg = RunConfig {
                method,
                lambda: LambdaChoice::Fixed(1.0),
                ..RunConfig::default()
            };
            let out = run_method(&masked, &cfg).unwrap();
            for i in 0..masked.n_rows() {
                for j in 0..masked.n_cols() {
                    if let Some(v) = masked.cell(i, j) {
                        assert_eq!(out.table.cell(i, j), Some(v), "{:?}", method);
                    }
                }
            }
            assert!(out.table.is_complete());
        }
    }

    #[test]
    fn backfit_recovers_duplicate_columns() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let mut csv = String::from("a,b,c,d\n");
        for _ in 0..50 {
            let v = rng.gen_range(0..2);
            csv.push_str(&format!("{v},{v},{v},{v}\n"));
        }
        let truth = table(&csv);
        // pick the first injection seed that leaves a majority of the
        // duplicates observed in every row; a lone observed cell can be
        // outvoted by mode-filled context, so only then is recovery exact
        let (masked, mask) = (7u64..64)
            .map(|seed| {
                crate::table::inject_mcar(&truth, &MissingSpec::uniform(0.15, 4, seed).unwrap())
                    .unwrap()
            })
            .find(|(m, _)| {
                (0..m.n_rows()).all(|i| m.row(i).iter().filter(|c| c.is_some()).count() >= 2)
            })
            .expect("some seed keeps two duplicates observed per row");
        let filled = backfit(&masked, &LambdaChoice::Fixed(1.0), 25).unwrap();
        let loss = hamming_loss(&filled, &truth, &mask).unwrap();
        assert_eq!(loss, 0.0, "duplicate columns should be fully recovered");
    }

    #[test]
    fn backfit_identity_when_complete() {
        let t = dependent_truth(20, 5);
        let filled = backfit(&t, &LambdaChoice::Fixed(1.0), 25).unwrap();
        assert_eq!(filled, t);
    }

    #[test]
    fn backfit_degenerate_column_filled_with_its_label() {
        let t = table("a,b\nx,0\nx,1\nx,?\n?,0\n");
        let filled = backfit(&t, &LambdaChoice::Fixed(1.0), 25).unwrap();
        // column a has only label x observed
        assert_eq!(filled.cell(3, 0), t.domain(0).index_of("x"));
        assert!(filled.is_complete());
    }

    #[test]
    fn experiment_mode_row_matches_direct_mode_fill() {
        let truth = dependent_truth(60, 6);
        let cfg = RunConfig {
            seed: 21,
            ..RunConfig::default()
        };
        let report = run_experiment(&truth, &[0.2], 3, &[Method::Mode], &cfg).unwrap();
        let cell = &report.cells[0];
        // recompute by hand
        let spec = MissingSpec::uniform(
            0.2,
            3,
            derive_seed(21, (0.2f64 * 1000.0).round() as u64),
        )
        .unwrap();
        let splits = make_splits(&truth, &spec, 3).unwrap();
        for (s, (masked, mask)) in splits.iter().enumerate() {
            let filled = mode_fill(masked).unwrap();
            let loss = hamming_loss(&filled, &truth, mask).unwrap();
            assert_eq!(cell.splits[s].loss, Some(loss));
        }
    }

    #[test]
    fn experiment_schema_one_cell_per_fraction_method() {
        let truth = dependent_truth(40, 7);
        let cfg = RunConfig::default();
        let methods = [Method::Mode, Method::Backfit];
        let report = run_experiment(&truth, &[0.1, 0.3], 2, &methods, &cfg).unwrap();
        assert_eq!(report.cells.len(), 4);
        let mut buf = Vec::new();
        write_experiment_tsv(&report, "toy", &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5); // header + 4 cells
        assert!(text.starts_with("dataset\tfraction\tmethod"));
    }

    #[test]
    fn experiment_single_split_equals_manual_run() {
        let truth = dependent_truth(50, 8);
        let cfg = RunConfig {
            method: Method::WwfpWo,
            seed: 33,
            lambda: LambdaChoice::Fixed(1.0),
            ..RunConfig::default()
        };
        let report = run_experiment(&truth, &[0.3], 1, &[Method::WwfpWo], &cfg).unwrap();
        let spec = MissingSpec::uniform(
            0.3,
            3,
            derive_seed(33, (0.3f64 * 1000.0).round() as u64),
        )
        .unwrap();
        let (masked, mask) = crate::table::inject_mcar(
            &truth,
            &MissingSpec::uniform(0.3, 3, spec.seed.wrapping_add(1)).unwrap(),
        )
        .unwrap();
        let manual_cfg = RunConfig {
            seed: derive_seed(spec.seed, 1),
            ..cfg.clone()
        };
        let manual = run_alternating(&masked, &manual_cfg).unwrap();
        let manual_loss = hamming_loss(&manual.table, &truth, &mask).unwrap();
        assert_eq!(report.cells[0].splits[0].loss, Some(manual_loss));
    }

    #[test]
    fn method_parsing() {
        assert_eq!(Method::parse("mo").unwrap(), Method::Mode);
        assert_eq!(Method::parse("bf").unwrap(), Method::Backfit);
        assert_eq!(Method::parse("wwfp-wo").unwrap(), Method::WwfpWo);
        assert_eq!(Method::parse("wwfp-wc").unwrap(), Method::WwfpWc);
        assert!(Method::parse("nope").is_err());
    }
}
