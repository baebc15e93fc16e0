//! The whole cross-validated comparison in memory: baseline, CNN and the
//! ground-truth oracle on every fold, then the aggregated report.
//!
//! cargo run --release --example full_pipeline -- [smoke|acceptance]

use std::collections::BTreeMap;

use effmap::experiment::{
    run_comparison, ExperimentConfig, FoldScores, ScoreRow, METHOD_BASELINE, METHOD_CNN,
    METHOD_ORACLE,
};
use effmap::report::{build_report, MethodFolds};

fn main() -> effmap::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let preset = std::env::args().nth(1).unwrap_or_else(|| "smoke".into());
    let cfg = ExperimentConfig::preset(&preset)
        .ok_or_else(|| effmap::Error::Usage(format!("unknown preset {preset}")))?;
    let folds = run_comparison(&cfg, true)?;

    let method = |name: &str, pick: fn(&FoldScores) -> &Vec<ScoreRow>| MethodFolds {
        name: name.into(),
        folds: folds.iter().map(|f| pick(f).clone()).collect(),
    };
    let methods = [
        method(METHOD_CNN, |f| &f.cnn),
        method(METHOD_BASELINE, |f| &f.baseline),
        method(METHOD_ORACLE, |f| &f.oracle),
    ];
    let config = serde_json::to_value(&cfg).expect("config serializes");
    let report = build_report(&methods, config, BTreeMap::new())?;
    for m in &report.methods {
        println!("{:>8}: pooled AUC {:.3}", m.name, m.pooled_auc);
    }
    let c = &report.comparison;
    println!(
        "{} vs {}: b = {}, c = {}, p = {:.4}",
        c.method_a, c.method_b, c.b, c.c, c.p
    );
    Ok(())
}
