//! Categorical data tables with missingness.
//!
//! A [`CategoricalTable`] is an n-row grid of label indices over per-column
//! [`ColumnDomain`]s, with missing cells tracked explicitly. This module owns
//! CSV ingestion, masked-at-random injection, split generation, mode filling,
//! and Hamming-loss evaluation; everything downstream consumes these tables.

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{BufRead, Read, Write};
use std::sync::Arc;

/// Label set of one column. Labels are stored sorted so that the
/// label-to-index encoding is stable across runs and serialized artifacts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnDomain {
    pub name: String,
    pub labels: Vec<String>,
}

impl ColumnDomain {
    pub fn new(name: impl Into<String>, mut labels: Vec<String>) -> Result<Self> {
        labels.sort();
        labels.dedup();
        if labels.is_empty() {
            return Err(Error::Domain("domain must have at least one label".into()));
        }
        Ok(ColumnDomain {
            name: name.into(),
            labels,
        })
    }

    pub fn cardinality(&self) -> usize {
        self.labels.len()
    }

    pub fn index_of(&self, label: &str) -> Option<u32> {
        self.labels
            .binary_search_by(|l| l.as_str().cmp(label))
            .ok()
            .map(|i| i as u32)
    }
}

/// One cell: a label index into the column domain, or missing.
pub type Cell = Option<u32>;

/// Immutable n x K table of categorical cells.
///
/// Domains are shared between the variants of a table that a run produces
/// (masked, mode-filled, imputed), so the encoding stays consistent.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalTable {
    domains: Arc<Vec<ColumnDomain>>,
    cells: Vec<Cell>,
    n_rows: usize,
}

impl CategoricalTable {
    pub fn from_parts(domains: Arc<Vec<ColumnDomain>>, cells: Vec<Cell>, n_rows: usize) -> Result<Self> {
        let k = domains.len();
        if cells.len() != n_rows * k {
            return Err(Error::Dimension(format!(
                "cell grid has {} entries, expected {} rows x {} columns",
                cells.len(),
                n_rows,
                k
            )));
        }
        for (idx, cell) in cells.iter().enumerate() {
            if let Some(v) = cell {
                let j = idx % k;
                if *v as usize >= domains[j].cardinality() {
                    return Err(Error::Domain(format!(
                        "cell ({},{}) holds index {} but column {:?} has cardinality {}",
                        idx / k,
                        j,
                        v,
                        domains[j].name,
                        domains[j].cardinality()
                    )));
                }
            }
        }
        Ok(CategoricalTable {
            domains,
            cells,
            n_rows,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.domains.len()
    }

    pub fn domains(&self) -> &Arc<Vec<ColumnDomain>> {
        &self.domains
    }

    pub fn domain(&self, j: usize) -> &ColumnDomain {
        &self.domains[j]
    }

    #[inline]
    pub fn cell(&self, i: usize, j: usize) -> Cell {
        self.cells[i * self.domains.len() + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[Cell] {
        let k = self.domains.len();
        &self.cells[i * k..(i + 1) * k]
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn is_complete(&self) -> bool {
        self.cells.iter().all(|c| c.is_some())
    }

    pub fn missing_positions(&self) -> Mask {
        let k = self.domains.len();
        let cells = self
            .cells
            .iter()
            .enumerate()
            .filter(|(_, c)| c.is_none())
            .map(|(idx, _)| (idx / k, idx % k))
            .collect();
        Mask { cells }
    }

    pub fn count_missing_in_column(&self, j: usize) -> usize {
        (0..self.n_rows).filter(|&i| self.cell(i, j).is_none()).count()
    }

    /// Replace cells at `mask` positions with MISSING.
    pub fn with_masked(&self, mask: &Mask) -> CategoricalTable {
        let k = self.domains.len();
        let mut cells = self.cells.clone();
        for &(i, j) in &mask.cells {
            cells[i * k + j] = None;
        }
        CategoricalTable {
            domains: Arc::clone(&self.domains),
            cells,
            n_rows: self.n_rows,
        }
    }

    /// Build a completed copy with the given replacement cells. Positions not
    /// listed keep their current value.
    pub fn with_cells(&self, updates: &[(usize, usize, u32)]) -> Result<CategoricalTable> {
        let k = self.domains.len();
        let mut cells = self.cells.clone();
        for &(i, j, v) in updates {
            if v as usize >= self.domains[j].cardinality() {
                return Err(Error::Domain(format!(
                    "update at ({},{}) index {} out of range",
                    i, j, v
                )));
            }
            cells[i * k + j] = Some(v);
        }
        Ok(CategoricalTable {
            domains: Arc::clone(&self.domains),
            cells,
            n_rows: self.n_rows,
        })
    }

    /// Re-encode this table against a different set of domains (matched by
    /// column name and label string). Used when a CSV is loaded for use with a
    /// previously trained model, whose domains are authoritative.
    pub fn reindex_to(&self, target: &Arc<Vec<ColumnDomain>>) -> Result<CategoricalTable> {
        if target.len() != self.domains.len() {
            return Err(Error::Dimension(format!(
                "table has {} columns, target domains have {}",
                self.domains.len(),
                target.len()
            )));
        }
        let k = target.len();
        for (a, b) in self.domains.iter().zip(target.iter()) {
            if a.name != b.name {
                return Err(Error::Domain(format!(
                    "column name mismatch: {:?} vs {:?}",
                    a.name, b.name
                )));
            }
        }
        let mut cells = Vec::with_capacity(self.cells.len());
        for (idx, cell) in self.cells.iter().enumerate() {
            let j = idx % k;
            match cell {
                None => cells.push(None),
                Some(v) => {
                    let label = &self.domains[j].labels[*v as usize];
                    match target[j].index_of(label) {
                        Some(t) => cells.push(Some(t)),
                        None => {
                            return Err(Error::Domain(format!(
                                "label {:?} in column {:?} is not part of the model domain",
                                label, target[j].name
                            )))
                        }
                    }
                }
            }
        }
        Ok(CategoricalTable {
            domains: Arc::clone(target),
            cells,
            n_rows: self.n_rows,
        })
    }
}

/// Set of (row, column) positions, kept sorted for deterministic iteration.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Mask {
    cells: Vec<(usize, usize)>,
}

impl Mask {
    pub fn from_cells(mut cells: Vec<(usize, usize)>) -> Mask {
        cells.sort_unstable();
        cells.dedup();
        Mask { cells }
    }

    pub fn cells(&self) -> &[(usize, usize)] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.cells.binary_search(&(i, j)).is_ok()
    }

    /// Text form: one `row<TAB>column_name` line per masked cell.
    pub fn write<W: Write>(&self, mut w: W, domains: &[ColumnDomain]) -> Result<()> {
        for &(i, j) in &self.cells {
            writeln!(w, "{}\t{}", i, domains[j].name)?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R, domains: &[ColumnDomain]) -> Result<Mask> {
        let mut cells = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            let (row, name) = line.split_once('\t').ok_or_else(|| Error::Format(format!(
                "mask line {} is not 'row<TAB>column_name'",
                lineno + 1
            )))?;
            let i: usize = row.parse().map_err(|_| Error::Format(format!(
                "mask line {}: bad row index {:?}",
                lineno + 1,
                row
            )))?;
            let j = domains
                .iter()
                .position(|d| d.name == name)
                .ok_or_else(|| Error::Format(format!(
                    "mask line {}: unknown column {:?}",
                    lineno + 1,
                    name
                )))?;
            cells.push((i, j));
        }
        Ok(Mask::from_cells(cells))
    }
}

/// Masked-completely-at-random injection spec: per-column missing fraction
/// (strictly below 1) and the generator seed.
#[derive(Debug, Clone)]
pub struct MissingSpec {
    fractions: Vec<f64>,
    pub seed: u64,
}

impl MissingSpec {
    pub fn uniform(fraction: f64, n_cols: usize, seed: u64) -> Result<Self> {
        MissingSpec::per_column(vec![fraction; n_cols], seed)
    }

    pub fn per_column(fractions: Vec<f64>, seed: u64) -> Result<Self> {
        for &f in &fractions {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::InvalidConfig(format!(
                    "missing fraction {} must be in [0,1)",
                    f
                )));
            }
        }
        Ok(MissingSpec { fractions, seed })
    }

    pub fn fraction(&self, j: usize) -> f64 {
        self.fractions[j]
    }
}

/// Split a seed into independent sub-streams.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 step
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9E3779B97F4A7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Parse a delimited text table with a header row. Cells equal to
/// `missing_marker` become MISSING; per-column domains are inferred from the
/// distinct observed values, sorted lexicographically.
pub fn load_csv<R: Read>(source: R, missing_marker: &str, delimiter: u8) -> Result<CategoricalTable> {
    if missing_marker.is_empty() {
        return Err(Error::InvalidConfig("missing marker must be non-empty".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .delimiter(delimiter)
        .flexible(true)
        .from_reader(source);
    let headers: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let k = headers.len();
    if k == 0 {
        return Err(Error::Format("header row is empty".into()));
    }

    let mut raw_rows: Vec<Vec<Option<String>>> = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != k {
            return Err(Error::Parse {
                row: idx + 1,
                message: format!("expected {} fields, found {}", k, record.len()),
            });
        }
        let row = record
            .iter()
            .map(|field| {
                let field = field.trim();
                if field == missing_marker {
                    None
                } else {
                    Some(field.to_string())
                }
            })
            .collect();
        raw_rows.push(row);
    }

    let mut label_sets: Vec<BTreeSet<String>> = vec![BTreeSet::new(); k];
    for row in &raw_rows {
        for (j, cell) in row.iter().enumerate() {
            if let Some(v) = cell {
                label_sets[j].insert(v.clone());
            }
        }
    }
    let mut domains = Vec::with_capacity(k);
    for (j, set) in label_sets.into_iter().enumerate() {
        if set.is_empty() {
            return Err(Error::EmptyColumn(headers[j].clone()));
        }
        domains.push(ColumnDomain::new(headers[j].clone(), set.into_iter().collect())?);
    }
    let domains = Arc::new(domains);

    let n_rows = raw_rows.len();
    let mut cells = Vec::with_capacity(n_rows * k);
    for row in &raw_rows {
        for (j, cell) in row.iter().enumerate() {
            match cell {
                None => cells.push(None),
                // index_of cannot fail: the domain was built from these values
                Some(v) => cells.push(Some(domains[j].index_of(v).unwrap())),
            }
        }
    }
    CategoricalTable::from_parts(domains, cells, n_rows)
}

/// Write a table back out as delimited text with a header row; missing cells
/// are written as `missing_marker`.
pub fn write_csv<W: Write>(
    table: &CategoricalTable,
    mut w: W,
    missing_marker: &str,
    delimiter: u8,
) -> Result<()> {
    let sep = delimiter as char;
    let header: Vec<&str> = table.domains().iter().map(|d| d.name.as_str()).collect();
    writeln!(w, "{}", header.join(&sep.to_string()))?;
    for i in 0..table.n_rows() {
        let mut line = String::new();
        for j in 0..table.n_cols() {
            if j > 0 {
                line.push(sep);
            }
            match table.cell(i, j) {
                Some(v) => line.push_str(&table.domain(j).labels[v as usize]),
                None => line.push_str(missing_marker),
            }
        }
        writeln!(w, "{}", line)?;
    }
    Ok(())
}

/// Mask exactly floor(fraction * n) cells per column, chosen uniformly
/// without replacement by a seeded generator. The input must be complete.
pub fn inject_mcar(truth: &CategoricalTable, spec: &MissingSpec) -> Result<(CategoricalTable, Mask)> {
    if !truth.is_complete() {
        return Err(Error::InvalidConfig(
            "MCAR injection requires a table without missing cells".into(),
        ));
    }
    if spec.fractions.len() != truth.n_cols() {
        return Err(Error::Dimension(format!(
            "spec has {} fractions for {} columns",
            spec.fractions.len(),
            truth.n_cols()
        )));
    }
    let n = truth.n_rows();
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let mut masked = Vec::new();
    for j in 0..truth.n_cols() {
        let count = (spec.fraction(j) * n as f64).floor() as usize;
        if count >= n {
            return Err(Error::InvalidConfig(format!(
                "column {:?} would be fully missing",
                truth.domain(j).name
            )));
        }
        let mut rows: Vec<usize> = (0..n).collect();
        let (selected, _) = rows.partial_shuffle(&mut rng, count);
        for &i in selected.iter() {
            masked.push((i, j));
        }
    }
    let mask = Mask::from_cells(masked);
    Ok((truth.with_masked(&mask), mask))
}

/// Replace every missing cell with the most frequent observed label of its
/// column (ties broken by lowest label index).
pub fn mode_fill(table: &CategoricalTable) -> Result<CategoricalTable> {
    let modes = column_modes(table)?;
    let mut updates = Vec::new();
    for i in 0..table.n_rows() {
        for j in 0..table.n_cols() {
            if table.cell(i, j).is_none() {
                updates.push((i, j, modes[j]));
            }
        }
    }
    table.with_cells(&updates)
}

/// Most frequent observed label per column, lowest index on ties.
pub fn column_modes(table: &CategoricalTable) -> Result<Vec<u32>> {
    let mut modes = Vec::with_capacity(table.n_cols());
    for j in 0..table.n_cols() {
        let mut counts = vec![0usize; table.domain(j).cardinality()];
        for i in 0..table.n_rows() {
            if let Some(v) = table.cell(i, j) {
                counts[v as usize] += 1;
            }
        }
        let (mode, best) = counts
            .iter()
            .enumerate()
            .fold((0usize, 0usize), |(mj, mc), (idx, &c)| {
                if c > mc {
                    (idx, c)
                } else {
                    (mj, mc)
                }
            });
        if best == 0 {
            return Err(Error::EmptyColumn(table.domain(j).name.clone()));
        }
        modes.push(mode as u32);
    }
    Ok(modes)
}

/// Fraction of masked cells where the two tables disagree.
pub fn hamming_loss(imputed: &CategoricalTable, truth: &CategoricalTable, mask: &Mask) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    if imputed.domains() != truth.domains() || imputed.n_rows() != truth.n_rows() {
        return Err(Error::Domain(
            "tables must share domains and shape for Hamming evaluation".into(),
        ));
    }
    let mut wrong = 0usize;
    for &(i, j) in mask.cells() {
        let a = imputed.cell(i, j).ok_or_else(|| Error::InvalidConfig(format!(
            "imputed table still missing cell ({},{})",
            i, j
        )))?;
        let b = truth.cell(i, j).ok_or_else(|| Error::InvalidConfig(format!(
            "truth table missing cell ({},{})",
            i, j
        )))?;
        if a != b {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / mask.len() as f64)
}

/// Independent MCAR injections with sub-seeds seed+1..seed+n_splits.
pub fn make_splits(
    truth: &CategoricalTable,
    spec: &MissingSpec,
    n_splits: usize,
) -> Result<Vec<(CategoricalTable, Mask)>> {
    if n_splits == 0 {
        return Err(Error::InvalidConfig("n_splits must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(n_splits);
    for s in 1..=n_splits {
        let sub = MissingSpec {
            fractions: spec.fractions.clone(),
            seed: spec.seed.wrapping_add(s as u64),
        };
        out.push(inject_mcar(truth, &sub)?);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct TableDoc {
    version: u32,
    domains: Vec<ColumnDomain>,
    cells: Vec<Vec<i64>>,
}

const TABLE_DOC_VERSION: u32 = 1;

/// Versioned text serialization: domains plus integer rows with -1 for MISSING.
pub fn write_table_doc<W: Write>(table: &CategoricalTable, w: W) -> Result<()> {
    let doc = TableDoc {
        version: TABLE_DOC_VERSION,
        domains: table.domains().as_ref().clone(),
        cells: (0..table.n_rows())
            .map(|i| {
                table
                    .row(i)
                    .iter()
                    .map(|c| c.map(|v| v as i64).unwrap_or(-1))
                    .collect()
            })
            .collect(),
    };
    serde_json::to_writer_pretty(w, &doc)?;
    Ok(())
}

pub fn read_table_doc<R: Read>(r: R) -> Result<CategoricalTable> {
    let doc: TableDoc = serde_json::from_reader(r)?;
    if doc.version != TABLE_DOC_VERSION {
        return Err(Error::Format(format!(
            "unsupported table document version {}",
            doc.version
        )));
    }
    let domains = Arc::new(doc.domains);
    let n_rows = doc.cells.len();
    let k = domains.len();
    let mut cells = Vec::with_capacity(n_rows * k);
    for (i, row) in doc.cells.iter().enumerate() {
        if row.len() != k {
            return Err(Error::Parse {
                row: i,
                message: format!("expected {} cells, found {}", k, row.len()),
            });
        }
        for &v in row {
            if v < 0 {
                cells.push(None);
            } else {
                cells.push(Some(v as u32));
            }
        }
    }
    CategoricalTable::from_parts(domains, cells, n_rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_table(rows: &[&[&str]], headers: &[&str]) -> CategoricalTable {
        let mut csv = headers.join(",");
        csv.push('\n');
        for row in rows {
            csv.push_str(&row.join(","));
            csv.push('\n');
        }
        load_csv(csv.as_bytes(), "?", b',').unwrap()
    }

    #[test]
    fn load_csv_without_missing() {
        let t = small_table(&[&["a", "x"], &["b", "y"], &["a", "x"]], &["c1", "c2"]);
        assert_eq!(t.n_rows(), 3);
        assert_eq!(t.n_cols(), 2);
        assert!(t.is_complete());
        assert_eq!(t.missing_positions().len(), 0);
    }

    #[test]
    fn load_csv_marker_excluded_from_domain() {
        let t = small_table(
            &[&["red", "s"], &["?", "t"], &["blue", "s"]],
            &["color", "size"],
        );
        assert_eq!(t.cell(1, 0), None);
        assert!(t.domain(0).index_of("?").is_none());
        assert_eq!(t.domain(0).labels, vec!["blue".to_string(), "red".to_string()]);
    }

    #[test]
    fn load_csv_ragged_row_is_parse_error() {
        let csv = "a,b\n1,2\n3\n";
        match load_csv(csv.as_bytes(), "?", b',') {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 2),
            // the csv crate may surface length mismatches itself
            Err(Error::Csv(_)) => {}
            other => panic!("expected parse error, got {:?}", other),
        }
    }

    #[test]
    fn load_csv_all_missing_column_rejected() {
        let csv = "a,b\nx,?\ny,?\n";
        match load_csv(csv.as_bytes(), "?", b',') {
            Err(Error::EmptyColumn(name)) => assert_eq!(name, "b"),
            other => panic!("expected empty column error, got {:?}", other),
        }
    }

    #[test]
    fn labels_sorted_lexicographically() {
        let t = small_table(&[&["z"], &["a"], &["m"]], &["col"]);
        assert_eq!(t.domain(0).labels, vec!["a", "m", "z"]);
        assert_eq!(t.cell(0, 0), Some(2));
    }

    #[test]
    fn inject_zero_fraction_is_identity() {
        let t = small_table(&[&["a", "x"], &["b", "y"]], &["c1", "c2"]);
        let spec = MissingSpec::uniform(0.0, 2, 7).unwrap();
        let (masked, mask) = inject_mcar(&t, &spec).unwrap();
        assert_eq!(masked, t);
        assert!(mask.is_empty());
    }

    #[test]
    fn inject_exact_counts_per_column() {
        let rows: Vec<Vec<&str>> = (0..100)
            .map(|i| vec![if i % 2 == 0 { "a" } else { "b" }, if i % 3 == 0 { "x" } else { "y" }])
            .collect();
        let refs: Vec<&[&str]> = rows.iter().map(|r| r.as_slice()).collect();
        let t = small_table(&refs, &["c1", "c2"]);
        let spec = MissingSpec::uniform(0.3, 2, 99).unwrap();
        let (masked, mask) = inject_mcar(&t, &spec).unwrap();
        assert_eq!(mask.len(), 60);
        for j in 0..2 {
            assert_eq!(masked.count_missing_in_column(j), 30);
        }
    }

    #[test]
    fn inject_deterministic_given_seed() {
        let rows: Vec<Vec<&str>> = (0..50).map(|i| vec![if i % 2 == 0 { "a" } else { "b" }]).collect();
        let refs: Vec<&[&str]> = rows.iter().map(|r| r.as_slice()).collect();
        let t = small_table(&refs, &["c"]);
        let spec = MissingSpec::uniform(0.4, 1, 123).unwrap();
        let (m1, k1) = inject_mcar(&t, &spec).unwrap();
        let (m2, k2) = inject_mcar(&t, &spec).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(k1, k2);
    }

    #[test]
    fn inject_never_alters_observed_content() {
        let rows: Vec<Vec<&str>> = (0..40).map(|i| vec![if i % 2 == 0 { "a" } else { "b" }, "x"]).collect();
        let refs: Vec<&[&str]> = rows.iter().map(|r| r.as_slice()).collect();
        let t = small_table(&refs, &["c1", "c2"]);
        let spec = MissingSpec::uniform(0.5, 2, 5).unwrap();
        let (masked, mask) = inject_mcar(&t, &spec).unwrap();
        for i in 0..t.n_rows() {
            for j in 0..t.n_cols() {
                if mask.contains(i, j) {
                    assert_eq!(masked.cell(i, j), None);
                } else {
                    assert_eq!(masked.cell(i, j), t.cell(i, j));
                }
            }
        }
    }

    #[test]
    fn mode_fill_majority_and_tie_rule() {
        let t = small_table(&[&["a"], &["a"], &["b"], &["?"]], &["c"]);
        let filled = mode_fill(&t).unwrap();
        assert_eq!(filled.cell(3, 0), t.domain(0).index_of("a"));

        // two observed labels tied -> lowest index wins
        let t2 = small_table(&[&["a"], &["b"], &["?"]], &["c"]);
        let filled2 = mode_fill(&t2).unwrap();
        assert_eq!(filled2.cell(2, 0), Some(0));
    }

    #[test]
    fn mode_fill_preserves_observed() {
        let t = small_table(&[&["a", "?"], &["b", "y"], &["?", "x"]], &["c1", "c2"]);
        let filled = mode_fill(&t).unwrap();
        assert!(filled.is_complete());
        for i in 0..t.n_rows() {
            for j in 0..t.n_cols() {
                if let Some(v) = t.cell(i, j) {
                    assert_eq!(filled.cell(i, j), Some(v));
                }
            }
        }
    }

    #[test]
    fn hamming_identity_and_counts() {
        let t = small_table(&[&["a", "x"], &["b", "y"]], &["c1", "c2"]);
        let mask = Mask::from_cells(vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(hamming_loss(&t, &t, &mask).unwrap(), 0.0);

        let other = t.with_cells(&[(0, 0, t.cell(0, 0).unwrap() ^ 1)]).unwrap();
        assert_eq!(hamming_loss(&other, &t, &mask).unwrap(), 0.25);

        let flipped = t
            .with_cells(&[
                (0, 0, t.cell(0, 0).unwrap() ^ 1),
                (0, 1, t.cell(0, 1).unwrap() ^ 1),
                (1, 0, t.cell(1, 0).unwrap() ^ 1),
                (1, 1, t.cell(1, 1).unwrap() ^ 1),
            ])
            .unwrap();
        assert_eq!(hamming_loss(&flipped, &t, &mask).unwrap(), 1.0);
    }

    #[test]
    fn hamming_empty_mask_rejected() {
        let t = small_table(&[&["a"], &["b"]], &["c"]);
        assert!(matches!(
            hamming_loss(&t, &t, &Mask::default()),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn hamming_symmetric() {
        let t = small_table(&[&["a", "x"], &["b", "y"], &["a", "y"]], &["c1", "c2"]);
        let u = t.with_cells(&[(0, 0, 1), (2, 1, 0)]).unwrap();
        let mask = Mask::from_cells(vec![(0, 0), (1, 1), (2, 1)]);
        assert_eq!(
            hamming_loss(&t, &u, &mask).unwrap(),
            hamming_loss(&u, &t, &mask).unwrap()
        );
    }

    #[test]
    fn make_splits_distinct_and_deterministic() {
        let rows: Vec<Vec<&str>> = (0..60).map(|i| vec![if i % 2 == 0 { "a" } else { "b" }]).collect();
        let refs: Vec<&[&str]> = rows.iter().map(|r| r.as_slice()).collect();
        let t = small_table(&refs, &["c"]);
        let spec = MissingSpec::uniform(0.3, 1, 11).unwrap();
        let splits = make_splits(&t, &spec, 6).unwrap();
        assert_eq!(splits.len(), 6);
        for a in 0..6 {
            for b in (a + 1)..6 {
                assert_ne!(splits[a].1, splits[b].1, "splits {} and {} share a mask", a, b);
            }
        }
        let again = make_splits(&t, &spec, 6).unwrap();
        assert_eq!(splits, again);

        // single split equals a direct injection with seed+1
        let one = make_splits(&t, &spec, 1).unwrap();
        let direct = inject_mcar(&t, &MissingSpec::uniform(0.3, 1, 12).unwrap()).unwrap();
        assert_eq!(one[0], direct);
    }

    #[test]
    fn unmasking_restores_truth() {
        let rows: Vec<Vec<&str>> = (0..30).map(|i| vec![if i % 3 == 0 { "a" } else { "b" }]).collect();
        let refs: Vec<&[&str]> = rows.iter().map(|r| r.as_slice()).collect();
        let t = small_table(&refs, &["c"]);
        let spec = MissingSpec::uniform(0.4, 1, 3).unwrap();
        let (masked, mask) = inject_mcar(&t, &spec).unwrap();
        let updates: Vec<(usize, usize, u32)> = mask
            .cells()
            .iter()
            .map(|&(i, j)| (i, j, t.cell(i, j).unwrap()))
            .collect();
        assert_eq!(masked.with_cells(&updates).unwrap(), t);
    }

    #[test]
    fn mask_file_round_trip() {
        let t = small_table(&[&["a", "x"], &["b", "y"]], &["alpha", "beta"]);
        let mask = Mask::from_cells(vec![(1, 0), (0, 1)]);
        let mut buf = Vec::new();
        mask.write(&mut buf, t.domains()).unwrap();
        let back = Mask::read(&buf[..], t.domains()).unwrap();
        assert_eq!(mask, back);
    }

    proptest! {
        #[test]
        fn table_doc_round_trip(rows in 1usize..12, cols in 1usize..5, seed in 0u64..1000) {
            use rand::Rng;
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let domains: Vec<ColumnDomain> = (0..cols)
                .map(|j| {
                    let card = rng.gen_range(1..5usize);
                    ColumnDomain::new(
                        format!("c{}", j),
                        (0..card).map(|l| format!("v{}", l)).collect(),
                    ).unwrap()
                })
                .collect();
            let domains = Arc::new(domains);
            let cells: Vec<Cell> = (0..rows * cols)
                .map(|idx| {
                    let j = idx % cols;
                    if rng.gen_bool(0.2) {
                        None
                    } else {
                        Some(rng.gen_range(0..domains[j].cardinality()) as u32)
                    }
                })
                .collect();
            let table = CategoricalTable::from_parts(domains, cells, rows).unwrap();
            let mut buf = Vec::new();
            write_table_doc(&table, &mut buf).unwrap();
            let back = read_table_doc(&buf[..]).unwrap();
            prop_assert_eq!(table, back);
        }

        #[test]
        fn csv_round_trip_complete_tables(rows in 1usize..10, seed in 0u64..500) {
            use rand::Rng;
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let labels = ["aa", "bb", "cc"];
            let mut csv = String::from("c0,c1\n");
            for _ in 0..rows {
                let a = labels[rng.gen_range(0..3)];
                let b = labels[rng.gen_range(0..2)];
                csv.push_str(&format!("{},{}\n", a, b));
            }
            let t = load_csv(csv.as_bytes(), "?", b',').unwrap();
            let mut buf = Vec::new();
            write_csv(&t, &mut buf, "?", b',').unwrap();
            let back = load_csv(&buf[..], "?", b',').unwrap();
            prop_assert_eq!(t, back);
        }
    }
}
