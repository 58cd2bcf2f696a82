use mrf_impute::joint::*;
use mrf_impute::learn::*;
use mrf_impute::model::MrfLayout;
use mrf_impute::pipeline::*;
use mrf_impute::table::*;
use std::fs::File;
use std::io::BufReader;
use std::sync::Arc;

#[test]
#[ignore]
fn wc_breakdown() {
    let truth = load_csv(
        BufReader::new(File::open(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/flare.csv")).unwrap()),
        "?",
        b',',
    )
    .unwrap();
    let spec = MissingSpec::uniform(0.1, truth.n_cols(), 99).unwrap();
    let (masked, mask) = inject_mcar(&truth, &spec).unwrap();
    let layout = MrfLayout::complete(Arc::clone(truth.domains())).unwrap();

    // train once via the alternating driver's WO path to get a model
    let cfg = RunConfig {
        method: Method::WwfpWo,
        seed: 7,
        ..RunConfig::default()
    };
    let run = run_alternating(&masked, &cfg).unwrap();
    println!(
        "WO loss {:.4} (lambda {})",
        hamming_loss(&run.table, &truth, &mask).unwrap(),
        run.lambda
    );

    // refit params on the WO completion for a fixed comparison model
    let missing = masked.missing_positions();
    let tc = TrainConfig {
        lambda: run.lambda,
        ..TrainConfig::default()
    };
    let model = train(&run.table, &missing, &layout, &tc, None).unwrap();

    let jc = JointConfig::default();
    let independent = impute_independent(&model.params, &masked, &jc).unwrap();
    println!(
        "independent {:.4}",
        hamming_loss(&independent, &truth, &mask).unwrap()
    );

    // repair only, pinned to the independent output (single dual iteration)
    let label_constraints = build_constraints(&masked, &ConstraintMenu::label_only()).unwrap();
    let repair_only = JointConfig {
        max_iterations: 1,
        ..JointConfig::default()
    };
    let out = impute_constrained(&model.params, &masked, &label_constraints, &repair_only).unwrap();
    println!(
        "repair only from independent: loss {:.4} satisfied {}",
        hamming_loss(&out.table, &truth, &mask).unwrap(),
        out.satisfied
    );

    let no_repair = JointConfig {
        repair: false,
        ..jc.clone()
    };
    let out = impute_constrained(&model.params, &masked, &label_constraints, &no_repair).unwrap();
    println!(
        "label, no repair: loss {:.4} iters {} viol-trace [{:.1} .. {:.1}] satisfied {}",
        hamming_loss(&out.table, &truth, &mask).unwrap(),
        out.iterations,
        out.violation_trace.first().unwrap(),
        out.violation_trace.last().unwrap(),
        out.satisfied
    );

    // label constraints with repair
    let out = impute_constrained(&model.params, &masked, &label_constraints, &jc).unwrap();
    println!(
        "label, repair: loss {:.4} iters {} satisfied {}",
        hamming_loss(&out.table, &truth, &mask).unwrap(),
        out.iterations,
        out.satisfied
    );

    // label + pairwise with repair
    let both = build_constraints(&masked, &ConstraintMenu::label_and_pairwise()).unwrap();
    let out = impute_constrained(&model.params, &masked, &both, &jc).unwrap();
    println!(
        "label+pair, repair: loss {:.4} iters {} satisfied {}",
        hamming_loss(&out.table, &truth, &mask).unwrap(),
        out.iterations,
        out.satisfied
    );

    // independent counts vs targets vs truth counts over the masked cells
    for c in &label_constraints {
        if let DistributionConstraint::Label { col, targets, .. } = c {
            let counts = label_counts_over_missing(&independent, &masked, *col);
            let truth_counts = label_counts_over_missing(&truth, &masked, *col);
            println!(
                "  col {:2}: wo {:?} truth {:?} targets {:?}",
                col,
                counts,
                truth_counts,
                targets.iter().map(|t| (t * 10.0).round() / 10.0).collect::<Vec<_>>()
            );
        }
    }
}
