//! Command-line front end for categorical missing-value imputation.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mrf_impute::joint::ConstraintMenu;
use mrf_impute::learn::{Formulation, PieceType};
use mrf_impute::model::MrfLayout;
use mrf_impute::pipeline::{
    run_method, write_experiment_tsv, write_trace, LambdaChoice, Method, RunConfig,
};
use mrf_impute::table::{
    load_csv, make_splits, read_table_doc, write_csv, write_table_doc, CategoricalTable, Mask,
    MissingSpec,
};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Parser)]
#[command(
    name = "mrf-impute",
    about = "Impute missing values in categorical tables with a pairwise MRF",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct IoOptions {
    /// Token marking a missing cell.
    #[arg(long, default_value = "?")]
    missing_marker: String,
    /// Field delimiter of the input and output tables.
    #[arg(long, default_value = ",")]
    delimiter: char,
}

#[derive(Subcommand)]
enum Command {
    /// Mask a fraction of each column at random, once per split.
    Inject {
        #[arg(long)]
        input: PathBuf,
        /// Comma-separated missing fractions, e.g. 0.1,0.3,0.5.
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5")]
        fractions: Vec<f64>,
        #[arg(long, default_value_t = 6)]
        splits: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        io: IoOptions,
    },
    /// Fit model parameters on a table (missing cells mode-filled first).
    Train {
        #[arg(long)]
        input: PathBuf,
        /// Regularization constant, or "auto" for cross-validated selection.
        #[arg(long, default_value = "auto")]
        lambda: String,
        /// Piece construction: single, pair, or both.
        #[arg(long, default_value = "single")]
        pieces: String,
        /// Training formulation: wwfp or csfp.
        #[arg(long, default_value = "wwfp")]
        formulation: String,
        #[arg(long)]
        model_out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[command(flatten)]
        io: IoOptions,
    },
    /// Fill the missing cells of a table with a trained model.
    Impute {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Constraint set: none, label, or label+pair.
        #[arg(long, default_value = "none")]
        constraints: String,
        #[arg(long)]
        out: PathBuf,
        /// Override the derived targets with an explicit constraint file.
        #[arg(long)]
        constraint_file: Option<PathBuf>,
        #[command(flatten)]
        io: IoOptions,
    },
    /// Run a full imputation method end to end.
    Run {
        #[arg(long)]
        input: PathBuf,
        /// One of mo, bf, wwfp-wo, wwfp-wc.
        #[arg(long)]
        method: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the per-iteration trace (JSON).
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Optional key=value configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        io: IoOptions,
    },
    /// Hamming loss of an imputed table against ground truth over a mask.
    Evaluate {
        #[arg(long)]
        imputed: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[command(flatten)]
        io: IoOptions,
    },
    /// The full grid: fractions x splits x methods, reported as a TSV.
    Experiment {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5")]
        fractions: Vec<f64>,
        #[arg(long, default_value_t = 6)]
        splits: usize,
        /// Comma-separated subset of mo,bf,wwfp-wo,wwfp-wc.
        #[arg(long, value_delimiter = ',', default_value = "mo,bf,wwfp-wo,wwfp-wc")]
        methods: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Optional key=value configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        io: IoOptions,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Inject {
            input,
            fractions,
            splits,
            seed,
            out_dir,
            io,
        } => inject(&input, &fractions, splits, seed, &out_dir, &io),
        Command::Train {
            input,
            lambda,
            pieces,
            formulation,
            model_out,
            seed,
            io,
        } => train_cmd(&input, &lambda, &pieces, &formulation, &model_out, seed, &io),
        Command::Impute {
            input,
            model,
            constraints,
            out,
            constraint_file,
            io,
        } => impute_cmd(&input, &model, &constraints, &out, constraint_file.as_deref(), &io),
        Command::Run {
            input,
            method,
            seed,
            out,
            trace,
            config,
            io,
        } => run_cmd(&input, &method, seed, &out, trace.as_deref(), config.as_deref(), &io),
        Command::Evaluate {
            imputed,
            truth,
            mask,
            io,
        } => evaluate_cmd(&imputed, &truth, &mask, &io),
        Command::Experiment {
            truth,
            fractions,
            splits,
            methods,
            out,
            seed,
            config,
            io,
        } => experiment_cmd(&truth, &fractions, splits, &methods, &out, seed, config.as_deref(), &io),
    }
}

fn load_table(path: &Path, io: &IoOptions) -> Result<CategoricalTable> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "json") {
        Ok(read_table_doc(BufReader::new(file))?)
    } else {
        Ok(load_csv(
            BufReader::new(file),
            &io.missing_marker,
            io.delimiter as u8,
        )?)
    }
}

fn save_table(table: &CategoricalTable, path: &Path, io: &IoOptions) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    if path.extension().is_some_and(|e| e == "json") {
        write_table_doc(table, &mut w)?;
    } else {
        write_csv(table, &mut w, &io.missing_marker, io.delimiter as u8)?;
    }
    w.flush()?;
    Ok(())
}

fn inject(
    input: &Path,
    fractions: &[f64],
    splits: usize,
    seed: u64,
    out_dir: &Path,
    io: &IoOptions,
) -> Result<()> {
    let truth = load_table(input, io)?;
    std::fs::create_dir_all(out_dir)?;
    let stem = input
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("table");
    for &fraction in fractions {
        let spec = MissingSpec::uniform(
            fraction,
            truth.n_cols(),
            mrf_impute::table::derive_seed(seed, (fraction * 1000.0).round() as u64),
        )?;
        let masked_splits = make_splits(&truth, &spec, splits)?;
        for (s, (masked, mask)) in masked_splits.iter().enumerate() {
            let pct = (fraction * 100.0).round() as u32;
            let base = format!("{}_p{}_s{}", stem, pct, s + 1);
            save_table(masked, &out_dir.join(format!("{}.csv", base)), io)?;
            let mask_file = File::create(out_dir.join(format!("{}.mask", base)))?;
            let mut w = BufWriter::new(mask_file);
            mask.write(&mut w, truth.domains())?;
            w.flush()?;
        }
    }
    println!(
        "wrote {} masked tables to {}",
        fractions.len() * splits,
        out_dir.display()
    );
    Ok(())
}

fn parse_pieces(s: &str) -> Result<PieceType> {
    Ok(match s {
        "single" => PieceType::Single,
        "pair" => PieceType::Pair,
        "both" => PieceType::Both,
        other => bail!("unknown piece type {:?} (expected single|pair|both)", other),
    })
}

fn parse_formulation(s: &str) -> Result<Formulation> {
    Ok(match s {
        "wwfp" => Formulation::Wwfp,
        "csfp" => Formulation::Csfp,
        other => bail!("unknown formulation {:?} (expected wwfp|csfp)", other),
    })
}

fn parse_constraints(s: &str) -> Result<ConstraintMenu> {
    Ok(match s {
        "none" => ConstraintMenu::none(),
        "label" => ConstraintMenu::label_only(),
        "label+pair" => ConstraintMenu::label_and_pairwise(),
        other => bail!(
            "unknown constraint set {:?} (expected none|label|label+pair)",
            other
        ),
    })
}

fn train_cmd(
    input: &Path,
    lambda: &str,
    pieces: &str,
    formulation: &str,
    model_out: &Path,
    seed: u64,
    io: &IoOptions,
) -> Result<()> {
    let masked = load_table(input, io)?;
    let missing = masked.missing_positions();
    let filled = mrf_impute::table::mode_fill(&masked)?;
    let layout = MrfLayout::complete(Arc::clone(masked.domains()))?;
    let mut cfg = mrf_impute::learn::TrainConfig {
        piece_type: parse_pieces(pieces)?,
        formulation: parse_formulation(formulation)?,
        ..Default::default()
    };
    cfg.lambda = match lambda {
        "auto" => {
            let (best, _) = mrf_impute::learn::cross_validate_lambda(
                &masked,
                &layout,
                &mrf_impute::learn::default_lambda_grid(),
                mrf_impute::learn::CvProtocol::Holdout {
                    fraction: 0.2,
                    seed: mrf_impute::table::derive_seed(seed, 0xCF),
                },
                &cfg,
            )?;
            best
        }
        s => s
            .parse::<f64>()
            .with_context(|| format!("lambda must be a number or \"auto\", got {:?}", s))?,
    };
    let model = mrf_impute::learn::train(&filled, &missing, &layout, &cfg, None)?;
    let file = File::create(model_out)?;
    let mut w = BufWriter::new(file);
    mrf_impute::model::write_model(&model.params, &mut w)?;
    w.flush()?;
    println!(
        "trained on {} rows ({} pieces implied), lambda {}, objective {:.6}",
        masked.n_rows(),
        masked.cells().iter().filter(|c| c.is_some()).count(),
        cfg.lambda,
        model.objective
    );
    Ok(())
}

fn read_constraint_file(
    path: &Path,
    table: &CategoricalTable,
) -> Result<Vec<mrf_impute::joint::DistributionConstraint>> {
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let col_index = |name: &str| -> Result<usize> {
            table
                .domains()
                .iter()
                .position(|d| d.name == name)
                .with_context(|| format!("line {}: unknown column {:?}", lineno + 1, name))
        };
        match fields.as_slice() {
            ["label", col, dist] => {
                let j = col_index(col)?;
                let p: Vec<f64> = dist
                    .split(',')
                    .map(|v| v.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .with_context(|| format!("line {}: bad distribution", lineno + 1))?;
                if p.len() != table.domain(j).cardinality() {
                    bail!(
                        "line {}: distribution has {} entries, column {:?} has {} labels",
                        lineno + 1,
                        p.len(),
                        col,
                        table.domain(j).cardinality()
                    );
                }
                out.push(label_constraint_from_distribution(table, j, &p));
            }
            ["pair", col_a, col_b, dist] => {
                let j = col_index(col_a)?;
                let k = col_index(col_b)?;
                let (j, k) = if j < k { (j, k) } else { (k, j) };
                let rows: Vec<Vec<f64>> = dist
                    .split('|')
                    .map(|row| {
                        row.split(',')
                            .map(|v| v.parse::<f64>())
                            .collect::<std::result::Result<_, _>>()
                    })
                    .collect::<std::result::Result<_, _>>()
                    .with_context(|| format!("line {}: bad matrix", lineno + 1))?;
                let cj = table.domain(j).cardinality();
                let ck = table.domain(k).cardinality();
                if rows.len() != cj || rows.iter().any(|r| r.len() != ck) {
                    bail!("line {}: matrix shape must be {}x{}", lineno + 1, cj, ck);
                }
                let q: Vec<f64> = rows.into_iter().flatten().collect();
                out.push(pairwise_constraint_from_distribution(table, j, k, &q));
            }
            _ => bail!(
                "line {}: expected 'label <col> <p0,p1,..>' or 'pair <col> <col> <p00,p01|p10,p11>'",
                lineno + 1
            ),
        }
    }
    Ok(out)
}

/// Turn a user-supplied label distribution into missing-cell count targets
/// using the same clamp-and-rescale rule as the derived constraints.
fn label_constraint_from_distribution(
    table: &CategoricalTable,
    j: usize,
    p: &[f64],
) -> mrf_impute::joint::DistributionConstraint {
    let n = table.n_rows() as f64;
    let card = table.domain(j).cardinality();
    let mut observed = vec![0usize; card];
    let mut missing = 0usize;
    for i in 0..table.n_rows() {
        match table.cell(i, j) {
            Some(v) => observed[v as usize] += 1,
            None => missing += 1,
        }
    }
    let mut targets: Vec<f64> = (0..card)
        .map(|l| (p[l] * n - observed[l] as f64).max(0.0))
        .collect();
    let sum: f64 = targets.iter().sum();
    if sum > 0.0 {
        for t in targets.iter_mut() {
            *t *= missing as f64 / sum;
        }
    }
    mrf_impute::joint::DistributionConstraint::Label {
        col: j,
        targets,
        duals: vec![0.0; card],
    }
}

fn pairwise_constraint_from_distribution(
    table: &CategoricalTable,
    j: usize,
    k: usize,
    q: &[f64],
) -> mrf_impute::joint::DistributionConstraint {
    let n = table.n_rows() as f64;
    let ck = table.domain(k).cardinality();
    let mut co = vec![0usize; q.len()];
    let mut open = 0usize;
    for i in 0..table.n_rows() {
        match (table.cell(i, j), table.cell(i, k)) {
            (Some(a), Some(b)) => co[a as usize * ck + b as usize] += 1,
            _ => open += 1,
        }
    }
    let mut targets: Vec<f64> = q
        .iter()
        .zip(&co)
        .map(|(&qv, &c)| (qv * n - c as f64).max(0.0))
        .collect();
    let sum: f64 = targets.iter().sum();
    if sum > 0.0 {
        for t in targets.iter_mut() {
            *t *= open as f64 / sum;
        }
    }
    mrf_impute::joint::DistributionConstraint::Pairwise {
        cols: (j, k),
        targets,
        duals: vec![0.0; q.len()],
    }
}

fn impute_cmd(
    input: &Path,
    model_path: &Path,
    constraints: &str,
    out: &Path,
    constraint_file: Option<&Path>,
    io: &IoOptions,
) -> Result<()> {
    let raw = load_table(input, io)?;
    let params = mrf_impute::model::read_model(BufReader::new(File::open(model_path)?))?;
    let table = raw.reindex_to(params.layout().domains())?;
    let menu = parse_constraints(constraints)?;
    let cfg = mrf_impute::joint::JointConfig::default();
    let completed = if !menu.label && menu.pairwise.is_none() && constraint_file.is_none() {
        mrf_impute::joint::impute_independent(&params, &table, &cfg)?
    } else {
        let constraint_list = match constraint_file {
            Some(path) => read_constraint_file(path, &table)?,
            None => mrf_impute::joint::build_constraints(&table, &menu)?,
        };
        let outcome =
            mrf_impute::joint::impute_constrained(&params, &table, &constraint_list, &cfg)?;
        if !outcome.satisfied {
            eprintln!(
                "warning: some constraints remain above tolerance (worst deviations: {:?})",
                outcome.final_violations
            );
        }
        outcome.table
    };
    save_table(&completed, out, io)?;
    println!("imputed {} cells", table.missing_positions().len());
    Ok(())
}

/// Apply `key=value` overrides from a config file, then the explicit flags.
fn apply_config(cfg: &mut RunConfig, path: &Path) -> Result<()> {
    let mut text = String::new();
    File::open(path)
        .with_context(|| format!("opening config {}", path.display()))?
        .read_to_string(&mut text)?;
    let mut pairs = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .with_context(|| format!("config line {} is not key=value", lineno + 1))?;
        pairs.insert(key.trim().to_string(), value.trim().to_string());
    }
    for (key, value) in pairs {
        match key.as_str() {
            "tol" => cfg.tol = value.parse()?,
            "max-outer-iterations" => cfg.max_outer_iterations = value.parse()?,
            "lambda" => {
                cfg.lambda = if value == "auto" {
                    LambdaChoice::Auto(Vec::new())
                } else {
                    LambdaChoice::Fixed(value.parse()?)
                }
            }
            "pieces" => cfg.train.piece_type = parse_pieces(&value)?,
            "formulation" => cfg.train.formulation = parse_formulation(&value)?,
            "constraints" => cfg.constraints = parse_constraints(&value)?,
            "dual-max-iterations" => cfg.joint.max_iterations = value.parse()?,
            "seed" => cfg.seed = value.parse()?,
            other => bail!("unknown config key {:?}", other),
        }
    }
    Ok(())
}

fn run_cmd(
    input: &Path,
    method: &str,
    seed: u64,
    out: &Path,
    trace: Option<&Path>,
    config: Option<&Path>,
    io: &IoOptions,
) -> Result<()> {
    let masked = load_table(input, io)?;
    let method = Method::parse(method)?;
    let mut cfg = RunConfig {
        method,
        seed,
        ..RunConfig::default()
    };
    if let Some(path) = config {
        apply_config(&mut cfg, path)?;
        cfg.method = method;
        cfg.seed = seed;
    }
    let output = run_method(&masked, &cfg)?;
    save_table(&output.table, out, io)?;
    if let Some(trace_path) = trace {
        let file = File::create(trace_path)?;
        let mut w = BufWriter::new(file);
        match &output.run {
            Some(run) => write_trace(run, method, &mut w)?,
            None => {
                // baselines have no iteration trace
                write!(w, "{{\"method\": \"{}\"}}", method.name())?;
            }
        }
        w.flush()?;
    }
    println!(
        "{}: imputed {} cells",
        method.name(),
        masked.missing_positions().len()
    );
    Ok(())
}

fn evaluate_cmd(imputed: &Path, truth: &Path, mask: &Path, io: &IoOptions) -> Result<()> {
    let truth_table = load_table(truth, io)?;
    let imputed_table = load_table(imputed, io)?.reindex_to(truth_table.domains())?;
    let mask = Mask::read(
        BufReader::new(File::open(mask)?),
        truth_table.domains(),
    )?;
    let loss = mrf_impute::table::hamming_loss(&imputed_table, &truth_table, &mask)?;
    println!("{:.6}", loss);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn experiment_cmd(
    truth: &Path,
    fractions: &[f64],
    splits: usize,
    methods: &[String],
    out: &Path,
    seed: u64,
    config: Option<&Path>,
    io: &IoOptions,
) -> Result<()> {
    let truth_table = load_table(truth, io)?;
    let methods: Vec<Method> = methods
        .iter()
        .map(|m| Method::parse(m).map_err(anyhow::Error::from))
        .collect::<Result<_>>()?;
    let mut cfg = RunConfig {
        seed,
        ..RunConfig::default()
    };
    if let Some(path) = config {
        apply_config(&mut cfg, path)?;
        cfg.seed = seed;
    }
    let report =
        mrf_impute::pipeline::run_experiment(&truth_table, fractions, splits, &methods, &cfg)?;
    let stem = truth
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset");
    let file = File::create(out)?;
    let mut w = BufWriter::new(file);
    write_experiment_tsv(&report, stem, &mut w)?;
    w.flush()?;
    for cell in &report.cells {
        let mean = cell
            .mean_loss()
            .map(|l| format!("{:.2}%", l * 100.0))
            .unwrap_or_else(|| "NA".into());
        println!(
            "{} @ {:.0}%: {} (mean over {} splits)",
            cell.method.name(),
            cell.fraction * 100.0,
            mean,
            cell.splits.len()
        );
    }
    Ok(())
}
