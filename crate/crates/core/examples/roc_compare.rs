//! ROC analysis of two synthetic scorers, McNemar at each one's Youden
//! operating point, a rank-sum test and an SVG plot.
//!
//! cargo run --example roc_compare

use effmap::experiment::ScoreRow;
use effmap::metrics::wilcoxon_mann_whitney;
use effmap::report::{compare, evaluate, render_roc_svg};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> effmap::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let labels: Vec<u8> = (0..300).map(|_| u8::from(rng.random_bool(0.3))).collect();
    let scorer = |rng: &mut ChaCha8Rng, separation: f64| -> Vec<ScoreRow> {
        labels
            .iter()
            .enumerate()
            .map(|(i, &l)| ScoreRow {
                patient_id: format!("S{:03}", i / 20),
                position: [i as f64, 0.0, 0.0],
                current_ma: 2.0,
                score: l as f64 * separation + rng.random_range(0.0..1.0),
                label: l,
            })
            .collect()
    };
    let strong = scorer(&mut rng, 0.5);
    let weak = scorer(&mut rng, 0.2);

    let (es, ew) = (evaluate(&strong)?, evaluate(&weak)?);
    println!(
        "strong: AUC {:.3}, sensitivity {:.3}, specificity {:.3}",
        es.auc, es.operating_point.sensitivity, es.operating_point.specificity
    );
    println!(
        "weak:   AUC {:.3}, sensitivity {:.3}, specificity {:.3}",
        ew.auc, ew.operating_point.sensitivity, ew.operating_point.specificity
    );

    let c = compare("strong", &strong, "weak", &weak)?;
    println!(
        "McNemar: b = {}, c = {}, chi2 = {:.3}, p = {:.4}",
        c.b, c.c, c.chi2, c.p
    );

    let pos: Vec<f64> = strong
        .iter()
        .filter(|r| r.label == 1)
        .map(|r| r.score)
        .collect();
    let neg: Vec<f64> = strong
        .iter()
        .filter(|r| r.label == 0)
        .map(|r| r.score)
        .collect();
    let w = wilcoxon_mann_whitney(&pos, &neg)?;
    println!(
        "rank-sum on strong scores: U = {}, p = {:.2e}",
        w.u, w.p_value
    );

    let path = std::env::temp_dir().join("effmap_roc.svg");
    render_roc_svg(&[("strong", &es.curve), ("weak", &ew.curve)], &path)?;
    println!("wrote {}", path.display());
    Ok(())
}
