//! Registration-based baseline on one fold: build the population efficacy
//! map from training positives and score the held-out patients.
//!
//! cargo run --release --example atlas_baseline

use effmap::experiment::{
    baseline_scores, evaluation_records, fold_atlas, fold_plan, oracle_scores, registrations,
    ExperimentConfig,
};
use effmap::phantom::Cohort;
use effmap::report::evaluate;

fn main() -> effmap::Result<()> {
    let mut cfg = ExperimentConfig::smoke();
    cfg.phantom.subjects = 16;
    let cohort = Cohort::generate(&cfg.phantom_config())?;
    let records = evaluation_records(&cohort)?;
    let plan = fold_plan(&cfg, &cohort)?;
    let regs = registrations(&cfg, &cohort);

    let fold = &plan.folds[0];
    let atlas = fold_atlas(&cohort, fold, &records, &regs)?;
    println!(
        "atlas from {} positive stimulations, total mass {:.6}",
        atlas.count,
        atlas.total_mass()
    );
    let baseline = baseline_scores(&cohort, fold, &atlas, &records, &regs)?;
    let oracle = oracle_scores(&cohort, fold, &records)?;
    for (name, rows) in [("baseline", &baseline), ("oracle", &oracle)] {
        let e = evaluate(rows)?;
        println!(
            "{name}: AUC {:.3} on {} positive / {} negative, Youden threshold {:.4}",
            e.auc, e.positives, e.negatives, e.operating_point.threshold
        );
    }
    Ok(())
}
