//! Train the reduced patch CNN on one fold of a small cohort, checkpoint it,
//! and score the held-out patients.
//!
//! cargo run --release --example train_classifier

use effmap::experiment::{
    cnn_scores, evaluation_records, fold_plan, patches_for, train_fold, ExperimentConfig,
};
use effmap::phantom::Cohort;
use effmap::report::evaluate;
use effmap::tinynn::{load_checkpoint, save_checkpoint};

fn main() -> effmap::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut cfg = ExperimentConfig::smoke();
    cfg.train.max_epochs = 15;
    let cohort = Cohort::generate(&cfg.phantom_config())?;
    let records = evaluation_records(&cohort)?;
    let plan = fold_plan(&cfg, &cohort)?;
    let fold = &plan.folds[0];

    let train_set = patches_for(&cohort, &fold.train, &records, &cfg.patch)?;
    let val_set = patches_for(&cohort, &fold.validation, &records, &cfg.patch)?;
    println!(
        "{} parameters, {} training / {} validation patches",
        cfg.model.parameter_count(),
        train_set.len(),
        val_set.len()
    );
    let outcome = train_fold(&cfg, 0, &train_set, &val_set)?;
    let h = &outcome.best.history;
    println!(
        "{} epochs, best epoch {}, stopped early: {}",
        h.epochs.len(),
        h.best_epoch,
        h.stopped_early
    );

    let path = std::env::temp_dir().join("effmap_fold0.tnn");
    save_checkpoint(&outcome.best, &path)?;
    let mut restored = load_checkpoint(&path)?;
    println!("checkpoint {} round-tripped", path.display());

    let test = patches_for(&cohort, &fold.test, &records, &cfg.patch)?;
    let rows = cnn_scores(&mut restored.model, &test, cfg.predict_batch)?;
    match evaluate(&rows) {
        Ok(e) => println!("test AUC {:.3} on {} patches", e.auc, rows.len()),
        Err(e) => println!("test fold not scorable: {e}"),
    }
    Ok(())
}
