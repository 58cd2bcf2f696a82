//! Generates the benchmark fixtures under data/.
//!
//! Each dataset is drawn from a latent-class mixture: a row picks a cluster,
//! then every column emits its cluster-preferred label with probability
//! `purity` and a uniform other label otherwise. Shared columns (all clusters
//! prefer the same label) keep the column mode strong; split/distinct columns
//! carry the cluster identity and spread the marginals. The two knobs set,
//! respectively, how badly plain mode filling does and how low a
//! dependence-aware method can push its loss.
//!
//! The fixtures are deterministic; re-running overwrites identical files.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

#[derive(Clone, Copy)]
enum Pattern {
    /// Every cluster prefers this label.
    Shared(usize),
    /// Cluster c prefers label c (cardinality must cover the clusters).
    Distinct,
    /// Explicit preferred label per cluster.
    Split(&'static [usize]),
}

struct ColumnSpec {
    cardinality: usize,
    purity: f64,
    pattern: Pattern,
}

/// Emission knobs shared by a dataset: confident cells emit the preferred
/// label at `purity`; ambiguous (cluster, column) pockets spread their mass
/// over a few adjacent labels, which is where count redistribution is cheap.
struct EmissionSpec {
    ambiguous_probs: Vec<f64>,
    /// (cluster + column) % period == 0 marks a pocket.
    ambiguous_period: usize,
}

struct DatasetSpec {
    name: &'static str,
    rows: usize,
    seed: u64,
    cluster_weights: Vec<f64>,
    columns: Vec<ColumnSpec>,
    /// Fraction of rows whose preferred labels are all remapped (cycled by
    /// one). The last column indicates the regime; it makes the remap a
    /// three-way interaction that a pairwise model cannot represent, while
    /// count constraints can still recover the remapped mass.
    contrarian_rate: f64,
    emission: EmissionSpec,
}

const fn col(cardinality: usize, purity: f64, pattern: Pattern) -> ColumnSpec {
    ColumnSpec {
        cardinality,
        purity,
        pattern,
    }
}

fn datasets() -> Vec<DatasetSpec> {
    use Pattern::*;
    vec![
        DatasetSpec {
            name: "flare",
            rows: 800,
            seed: 101,
            cluster_weights: vec![0.34, 0.27, 0.16, 0.10, 0.08, 0.05],
            columns: vec![
                col(5, 0.93, Split(&[0, 0, 0, 0, 1, 2])),
                col(4, 0.93, Split(&[0, 0, 1, 1, 2, 2])),
                col(4, 0.93, Split(&[1, 1, 1, 1, 0, 2])),
                col(3, 0.93, Split(&[0, 0, 1, 1, 2, 2])),
                col(3, 0.93, Split(&[2, 2, 2, 2, 0, 1])),
                col(2, 0.93, Split(&[0, 0, 0, 1, 1, 1])),
                col(2, 0.93, Split(&[0, 0, 1, 0, 1, 1])),
                col(4, 0.93, Split(&[0, 0, 1, 1, 2, 3])),
                col(2, 0.97, Split(&[0, 0, 0, 0, 0, 0])),
            ],
            contrarian_rate: 0.07,
            emission: EmissionSpec {
                ambiguous_probs: vec![0.50, 0.30, 0.20],
                ambiguous_period: 4,
            },
        },
        DatasetSpec {
            name: "spect",
            rows: 267,
            seed: 202,
            cluster_weights: vec![0.34, 0.28, 0.18, 0.12, 0.08],
            columns: vec![
                col(2, 0.94, Split(&[0, 0, 0, 1, 1])),
                col(2, 0.94, Split(&[1, 1, 1, 0, 0])),
                col(2, 0.94, Split(&[0, 0, 1, 1, 0])),
                col(2, 0.94, Split(&[0, 1, 0, 0, 1])),
                col(2, 0.94, Split(&[1, 0, 1, 1, 0])),
                col(2, 0.94, Split(&[0, 0, 0, 1, 1])),
                col(2, 0.94, Split(&[1, 1, 0, 0, 1])),
                col(2, 0.94, Split(&[0, 0, 1, 0, 1])),
                col(2, 0.94, Split(&[1, 1, 0, 1, 0])),
                col(2, 0.94, Split(&[0, 0, 0, 1, 1])),
                col(2, 0.94, Split(&[0, 1, 1, 0, 0])),
                col(2, 0.94, Split(&[1, 0, 0, 1, 1])),
                col(2, 0.94, Split(&[0, 0, 1, 1, 1])),
                col(2, 0.94, Split(&[0, 1, 0, 1, 0])),
                col(2, 0.94, Split(&[1, 1, 1, 0, 0])),
                col(2, 0.94, Split(&[0, 0, 0, 0, 1])),
                col(2, 0.94, Split(&[1, 0, 1, 0, 1])),
                col(2, 0.94, Split(&[1, 1, 0, 0, 0])),
                col(2, 0.94, Split(&[0, 0, 1, 1, 0])),
                col(2, 0.94, Split(&[0, 1, 0, 0, 1])),
                col(2, 0.94, Split(&[1, 1, 1, 1, 0])),
                col(2, 0.97, Split(&[0, 0, 0, 0, 0])),
            ],
            contrarian_rate: 0.08,
            emission: EmissionSpec {
                ambiguous_probs: vec![0.58, 0.42],
                ambiguous_period: 4,
            },
        },
        DatasetSpec {
            name: "mushroom",
            rows: 700,
            seed: 303,
            cluster_weights: vec![0.30, 0.24, 0.16, 0.12, 0.10, 0.08],
            columns: vec![
                col(6, 0.90, Split(&[0, 1, 2, 3, 4, 5])),
                col(4, 0.90, Split(&[0, 0, 0, 0, 1, 2])),
                col(9, 0.90, Split(&[0, 1, 2, 3, 4, 5])),
                col(2, 0.90, Split(&[0, 0, 1, 1, 0, 1])),
                col(3, 0.90, Split(&[1, 1, 1, 0, 0, 2])),
                col(5, 0.90, Split(&[0, 0, 0, 1, 1, 2])),
                col(2, 0.90, Split(&[0, 0, 0, 1, 1, 1])),
                col(4, 0.90, Split(&[2, 2, 2, 2, 1, 0])),
                col(7, 0.90, Split(&[0, 0, 0, 0, 1, 2])),
                col(2, 0.97, Split(&[0, 0, 0, 0, 0, 0])),
            ],
            contrarian_rate: 0.06,
            emission: EmissionSpec {
                ambiguous_probs: vec![0.45, 0.30, 0.25],
                ambiguous_period: 3,
            },
        },
        DatasetSpec {
            name: "yeast",
            rows: 700,
            seed: 404,
            cluster_weights: vec![0.32, 0.26, 0.18, 0.14, 0.10],
            columns: vec![
                col(2, 0.97, Split(&[0, 0, 0, 1, 1])),
                col(2, 0.97, Split(&[1, 1, 0, 0, 0])),
                col(2, 0.97, Split(&[0, 1, 1, 0, 0])),
                col(2, 0.97, Split(&[0, 0, 1, 0, 1])),
                col(2, 0.97, Split(&[1, 0, 0, 1, 0])),
                col(2, 0.97, Split(&[0, 0, 0, 1, 1])),
                col(2, 0.97, Split(&[0, 1, 1, 0, 1])),
                col(2, 0.97, Split(&[0, 0, 0, 0, 1])),
                col(2, 0.97, Split(&[1, 0, 0, 0, 0])),
                col(2, 0.97, Split(&[0, 1, 0, 0, 0])),
                col(2, 0.97, Split(&[0, 0, 1, 1, 0])),
                col(2, 0.97, Split(&[0, 0, 0, 0, 1])),
                col(2, 0.97, Split(&[1, 1, 1, 0, 0])),
                col(2, 0.97, Split(&[0, 0, 0, 0, 0])),
            ],
            contrarian_rate: 0.04,
            emission: EmissionSpec {
                ambiguous_probs: vec![0.60, 0.40],
                ambiguous_period: 14,
            },
        },
    ]
}

fn preferred_label(pattern: Pattern, cluster: usize, cardinality: usize) -> usize {
    match pattern {
        Pattern::Shared(l) => l,
        Pattern::Distinct => cluster % cardinality,
        Pattern::Split(prefs) => prefs[cluster],
    }
}

fn label_string(cardinality: usize, label: usize) -> String {
    if cardinality == 2 {
        label.to_string()
    } else {
        char::from(b'a' + label as u8).to_string()
    }
}

fn sample_cluster(rng: &mut ChaCha12Rng, weights: &[f64]) -> usize {
    let draw: f64 = rng.gen();
    let mut acc = 0.0;
    for (c, &w) in weights.iter().enumerate() {
        acc += w;
        if draw < acc {
            return c;
        }
    }
    weights.len() - 1
}

fn generate(spec: &DatasetSpec, out_dir: &Path) -> std::io::Result<()> {
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let path = out_dir.join(format!("{}.csv", spec.name));
    let mut w = BufWriter::new(File::create(&path)?);
    let header: Vec<String> = (1..=spec.columns.len()).map(|j| format!("c{:02}", j)).collect();
    writeln!(w, "{}", header.join(","))?;

    let mut mode_counts: Vec<Vec<usize>> =
        spec.columns.iter().map(|c| vec![0; c.cardinality]).collect();
    let indicator = spec.columns.len() - 1;
    for _ in 0..spec.rows {
        let cluster = sample_cluster(&mut rng, &spec.cluster_weights);
        let contrarian = rng.gen_bool(spec.contrarian_rate);
        let mut cells = Vec::with_capacity(spec.columns.len());
        for (j, column) in spec.columns.iter().enumerate() {
            let mut preferred = if j == indicator {
                usize::from(contrarian)
            } else {
                preferred_label(column.pattern, cluster, column.cardinality)
            };
            if contrarian && j != indicator {
                preferred = (preferred + 1) % column.cardinality;
            }
            let ambiguous = j != indicator
                && (cluster + j) % spec.emission.ambiguous_period == 0;
            let label = if ambiguous {
                // near-tie pocket over adjacent labels
                let take = spec.emission.ambiguous_probs.len().min(column.cardinality);
                let probs = &spec.emission.ambiguous_probs[..take];
                let total: f64 = probs.iter().sum();
                let mut draw: f64 = rng.gen::<f64>() * total;
                let mut pick = 0usize;
                for (idx, &p) in probs.iter().enumerate() {
                    draw -= p;
                    if draw < 0.0 {
                        pick = idx;
                        break;
                    }
                }
                (preferred + pick) % column.cardinality
            } else if rng.gen_bool(column.purity) {
                preferred
            } else {
                // uniform over the other labels
                let mut other = rng.gen_range(0..column.cardinality - 1);
                if other >= preferred {
                    other += 1;
                }
                other
            };
            mode_counts[j][label] += 1;
            cells.push(label_string(column.cardinality, label));
        }
        writeln!(w, "{}", cells.join(","))?;
    }
    w.flush()?;

    let mode_loss: f64 = mode_counts
        .iter()
        .map(|counts| {
            let max = counts.iter().max().copied().unwrap_or(0);
            1.0 - max as f64 / spec.rows as f64
        })
        .sum::<f64>()
        / spec.columns.len() as f64;
    let floor: f64 = spec
        .columns
        .iter()
        .map(|c| 1.0 - c.purity)
        .sum::<f64>()
        / spec.columns.len() as f64;
    println!(
        "{}: {} rows x {} cols, mode-fill loss {:.2}%, within-cluster floor {:.2}%",
        spec.name,
        spec.rows,
        spec.columns.len(),
        mode_loss * 100.0,
        floor * 100.0
    );
    Ok(())
}

fn main() -> std::io::Result<()> {
    let out_dir = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "data".to_string());
    let out_dir = Path::new(&out_dir);
    std::fs::create_dir_all(out_dir)?;
    for spec in datasets() {
        generate(&spec, out_dir)?;
    }
    Ok(())
}
