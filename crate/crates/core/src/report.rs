//! Evaluation summaries, paired method comparison, cross-fold reports and
//! ROC plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::{pair_rows, ScoreRow};
use crate::metrics::{auc, mcnemar, operating_point, roc_curve, OperatingPoint, RocCurve};

/// ROC summary of one scored set.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub curve: RocCurve,
    pub auc: f64,
    pub operating_point: OperatingPoint,
    pub positives: usize,
    pub negatives: usize,
}

fn split(rows: &[ScoreRow]) -> (Vec<f64>, Vec<u8>) {
    (
        rows.iter().map(|r| r.score).collect(),
        rows.iter().map(|r| r.label).collect(),
    )
}

pub fn evaluate(rows: &[ScoreRow]) -> Result<Evaluation> {
    let (s, l) = split(rows);
    let curve = roc_curve(&s, &l)?;
    Ok(Evaluation {
        auc: auc(&s, &l)?,
        operating_point: operating_point(&curve),
        positives: curve.positives,
        negatives: curve.negatives,
        curve,
    })
}

pub fn roc_csv_bytes(curve: &RocCurve) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["threshold", "fpr", "tpr"])?;
    for i in 0..curve.len() {
        w.write_record([
            curve.thresholds[i].to_string(),
            curve.fpr[i].to_string(),
            curve.tpr[i].to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// McNemar comparison of two methods, each thresholded at its own
/// Youden-optimal operating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub method_a: String,
    pub method_b: String,
    pub auc_a: f64,
    pub auc_b: f64,
    pub threshold_a: f64,
    pub threshold_b: f64,
    /// Rows classified correctly by `a` only.
    pub b: usize,
    /// Rows classified correctly by `b` only.
    pub c: usize,
    pub chi2: f64,
    pub p: f64,
    pub note: String,
}

pub const MCNEMAR_NOTE: &str =
    "McNemar on paired classifications, each method thresholded at its own maximal-Youden operating point";

pub fn compare(name_a: &str, a: &[ScoreRow], name_b: &str, b: &[ScoreRow]) -> Result<Comparison> {
    let pairs = pair_rows(a, b)?;
    let (ra, rb): (Vec<ScoreRow>, Vec<ScoreRow>) = pairs.into_iter().unzip();
    let ea = evaluate(&ra)?;
    let eb = evaluate(&rb)?;
    let (ta, tb) = (ea.operating_point.threshold, eb.operating_point.threshold);
    let correct = |rows: &[ScoreRow], t: f64| -> Vec<bool> {
        rows.iter()
            .map(|r| (r.score >= t) == (r.label == 1))
            .collect()
    };
    let m = mcnemar(&correct(&ra, ta), &correct(&rb, tb))?;
    Ok(Comparison {
        method_a: name_a.to_string(),
        method_b: name_b.to_string(),
        auc_a: ea.auc,
        auc_b: eb.auc,
        threshold_a: ta,
        threshold_b: tb,
        b: m.b,
        c: m.c,
        chi2: m.chi2,
        p: m.p_value,
        note: MCNEMAR_NOTE.to_string(),
    })
}

/// Test-fold scores of one method, fold by fold.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodFolds {
    pub name: String,
    pub folds: Vec<Vec<ScoreRow>>,
}

impl MethodFolds {
    pub fn pooled(&self) -> Vec<ScoreRow> {
        self.folds.iter().flatten().cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub name: String,
    pub pooled_auc: f64,
    /// `None` for a fold holding a single class.
    pub fold_aucs: Vec<Option<f64>>,
    pub operating_point: OperatingPoint,
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub methods: Vec<MethodSummary>,
    pub comparison: Comparison,
    pub config: serde_json::Value,
    /// SHA-256 of each input file, keyed by name.
    pub hashes: BTreeMap<String, String>,
}

/// Pooled and per-fold summaries of every method, plus McNemar between the
/// first two. All methods must share the fold count and, fold by fold, the
/// scored coordinates.
pub fn build_report(
    methods: &[MethodFolds],
    config: serde_json::Value,
    hashes: BTreeMap<String, String>,
) -> Result<Report> {
    if methods.len() < 2 {
        return Err(Error::Pairing(
            "a report compares at least two methods".into(),
        ));
    }
    let k = methods[0].folds.len();
    for m in methods {
        if m.folds.len() != k {
            return Err(Error::Pairing(format!(
                "method {} has {} folds, {} has {k}",
                m.name,
                m.folds.len(),
                methods[0].name
            )));
        }
        for (f, (x, y)) in methods[0].folds.iter().zip(&m.folds).enumerate() {
            pair_rows(x, y).map_err(|e| Error::Pairing(format!("fold {f}, {}: {e}", m.name)))?;
        }
    }
    let summaries = methods
        .iter()
        .map(|m| -> Result<MethodSummary> {
            let e = evaluate(&m.pooled())?;
            let fold_aucs = m
                .folds
                .iter()
                .map(|rows| {
                    let (s, l) = split(rows);
                    auc(&s, &l).ok()
                })
                .collect();
            Ok(MethodSummary {
                name: m.name.clone(),
                pooled_auc: e.auc,
                fold_aucs,
                operating_point: e.operating_point,
                positives: e.positives,
                negatives: e.negatives,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let comparison = compare(
        &methods[0].name,
        &methods[0].pooled(),
        &methods[1].name,
        &methods[1].pooled(),
    )?;
    Ok(Report {
        methods: summaries,
        comparison,
        config,
        hashes,
    })
}

const SVG_MARGIN: f64 = 60.0;
const SVG_SIDE: f64 = 400.0;
const SVG_LEGEND_WIDTH: f64 = 220.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// Plot coordinates of an ROC point: the unit square maps onto the plot
/// area with TPR increasing upwards.
pub fn svg_point(fpr: f64, tpr: f64) -> (f64, f64) {
    (
        SVG_MARGIN + fpr * SVG_SIDE,
        SVG_MARGIN + (1.0 - tpr) * SVG_SIDE,
    )
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// ROC figure: framed unit square with ticks, dashed chance diagonal, one
/// polyline per curve and a legend with AUCs to three decimals.
pub fn roc_svg(curves: &[(&str, &RocCurve)]) -> Result<String> {
    if curves.is_empty() {
        return Err(Error::Data("ROC plot needs at least one curve".into()));
    }
    let width = 2.0 * SVG_MARGIN + SVG_SIDE + SVG_LEGEND_WIDTH;
    let height = 2.0 * SVG_MARGIN + SVG_SIDE;
    let mut s = String::new();
    let w = &mut s;
    writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    )
    .unwrap();
    writeln!(
        w,
        r#"<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>"#
    )
    .unwrap();
    let (x0, y1) = svg_point(0.0, 0.0);
    let (x1, y0) = svg_point(1.0, 1.0);
    writeln!(
        w,
        r#"<rect class="axes" x="{x0}" y="{y0}" width="{SVG_SIDE}" height="{SVG_SIDE}" fill="none" stroke="black"/>"#
    )
    .unwrap();
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let (tx, _) = svg_point(v, 0.0);
        let (_, ty) = svg_point(0.0, v);
        writeln!(
            w,
            r#"<line x1="{tx}" y1="{y1}" x2="{tx}" y2="{}" stroke="black"/><text x="{tx}" y="{}" font-size="12" text-anchor="middle">{v:.1}</text>"#,
            y1 + 5.0,
            y1 + 20.0
        )
        .unwrap();
        writeln!(
            w,
            r#"<line x1="{}" y1="{ty}" x2="{x0}" y2="{ty}" stroke="black"/><text x="{}" y="{}" font-size="12" text-anchor="end">{v:.1}</text>"#,
            x0 - 5.0,
            x0 - 8.0,
            ty + 4.0
        )
        .unwrap();
    }
    writeln!(
        w,
        r#"<text x="{}" y="{}" font-size="14" text-anchor="middle">False positive rate</text>"#,
        (x0 + x1) / 2.0,
        y1 + 42.0
    )
    .unwrap();
    writeln!(
        w,
        r#"<text x="{}" y="{}" font-size="14" text-anchor="middle" transform="rotate(-90 {} {})">True positive rate</text>"#,
        x0 - 40.0,
        (y0 + y1) / 2.0,
        x0 - 40.0,
        (y0 + y1) / 2.0
    )
    .unwrap();
    writeln!(
        w,
        r##"<line class="reference" x1="{x0}" y1="{y1}" x2="{x1}" y2="{y0}" stroke="#888888" stroke-dasharray="6 4"/>"##
    )
    .unwrap();
    for (i, (label, curve)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = curve
            .fpr
            .iter()
            .zip(&curve.tpr)
            .map(|(&f, &t)| {
                let (x, y) = svg_point(f, t);
                format!("{x:.3},{y:.3}")
            })
            .collect();
        writeln!(
            w,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        )
        .unwrap();
        let ly = y0 + 20.0 + 22.0 * i as f64;
        let lx = x1 + 20.0;
        writeln!(
            w,
            r#"<g class="legend"><line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}" font-size="12">{} (AUC = {:.3})</text></g>"#,
            lx + 24.0,
            lx + 30.0,
            ly + 4.0,
            escape(label),
            curve.trapezoid_area()
        )
        .unwrap();
    }
    writeln!(w, "</svg>").unwrap();
    Ok(s)
}

pub fn render_roc_svg(curves: &[(&str, &RocCurve)], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, roc_svg(curves)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(scores: &[f64], labels: &[u8], tag: &str) -> Vec<ScoreRow> {
        scores
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (&s, &l))| ScoreRow {
                patient_id: format!("{tag}{}", i % 3),
                position: [i as f64, 0.0, 0.0],
                current_ma: 2.0,
                score: s,
                label: l,
            })
            .collect()
    }

    fn folds(name: &str, scores: &[f64], labels: &[u8]) -> MethodFolds {
        let all = rows(scores, labels, "P");
        let mid = all.len() / 2;
        MethodFolds {
            name: name.into(),
            folds: vec![all[..mid].to_vec(), all[mid..].to_vec()],
        }
    }

    const LABELS: [u8; 8] = [1, 0, 1, 0, 1, 0, 0, 1];
    const SA: [f64; 8] = [0.9, 0.2, 0.7, 0.6, 0.4, 0.1, 0.35, 0.8];
    const SB: [f64; 8] = [0.3, 0.5, 0.9, 0.2, 0.6, 0.7, 0.1, 0.4];

    #[test]
    fn identical_methods_give_mcnemar_p_one() {
        let a = folds("a", &SA, &LABELS);
        let b = MethodFolds {
            name: "b".into(),
            ..a.clone()
        };
        let r = build_report(&[a, b], serde_json::Value::Null, BTreeMap::new()).unwrap();
        assert_eq!(r.comparison.b, 0);
        assert_eq!(r.comparison.c, 0);
        assert_eq!(r.comparison.p, 1.0);
    }

    #[test]
    fn missing_fold_is_pairing_error() {
        let a = folds("a", &SA, &LABELS);
        let mut b = folds("b", &SB, &LABELS);
        b.folds.pop();
        let r = build_report(&[a, b], serde_json::Value::Null, BTreeMap::new());
        assert!(matches!(r, Err(Error::Pairing(_))));
    }

    #[test]
    fn pooled_auc_matches_concatenated_scores() {
        let a = folds("a", &SA, &LABELS);
        let b = folds("b", &SB, &LABELS);
        let r = build_report(&[a, b], serde_json::json!({"k": 2}), BTreeMap::new()).unwrap();
        assert!((r.methods[0].pooled_auc - auc(&SA, &LABELS).unwrap()).abs() <= 1e-12);
        assert!((r.methods[1].pooled_auc - auc(&SB, &LABELS).unwrap()).abs() <= 1e-12);
        assert_eq!(r.methods[0].fold_aucs.len(), 2);
        assert_eq!(r.comparison.auc_a, r.methods[0].pooled_auc);
        assert_eq!(r.config["k"], 2);
    }

    #[test]
    fn compare_counts_discordant_pairs() {
        let a = rows(&SA, &LABELS, "P");
        let b = rows(&SB, &LABELS, "P");
        let c = compare("a", &a, "b", &b).unwrap();
        let (ea, eb) = (evaluate(&a).unwrap(), evaluate(&b).unwrap());
        let (mut nb, mut nc) = (0, 0);
        for i in 0..8 {
            let ok_a = (SA[i] >= ea.operating_point.threshold) == (LABELS[i] == 1);
            let ok_b = (SB[i] >= eb.operating_point.threshold) == (LABELS[i] == 1);
            nb += usize::from(ok_a && !ok_b);
            nc += usize::from(!ok_a && ok_b);
        }
        assert_eq!((c.b, c.c), (nb, nc));
    }

    #[test]
    fn perfect_classifier_evaluates_to_auc_one() {
        let e = evaluate(&rows(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0], "P")).unwrap();
        assert_eq!(e.auc, 1.0);
        assert_eq!(e.operating_point.youden_j, 1.0);
    }

    fn count(hay: &str, needle: &str) -> usize {
        hay.matches(needle).count()
    }

    #[test]
    fn svg_has_one_polyline_per_curve_and_legend() {
        let c1 = roc_curve(&SA, &LABELS).unwrap();
        let c2 = roc_curve(&SB, &LABELS).unwrap();
        let one = roc_svg(&[("cnn", &c1)]).unwrap();
        assert_eq!(count(&one, "<polyline"), 1);
        assert_eq!(count(&one, r#"class="reference""#), 1);
        let two = roc_svg(&[("cnn", &c1), ("atlas <b>", &c2)]).unwrap();
        assert_eq!(count(&two, "<polyline"), 2);
        assert_eq!(count(&two, r#"class="legend""#), 2);
        assert!(two.contains(&format!("cnn (AUC = {:.3})", auc(&SA, &LABELS).unwrap())));
        assert!(two.contains("atlas &lt;b&gt;"));
        assert!(two.starts_with("<svg") && two.trim_end().ends_with("</svg>"));
        assert!(roc_svg(&[]).is_err());
    }

    #[test]
    fn svg_curve_endpoints_hit_plot_corners() {
        let c = roc_curve(&SA, &LABELS).unwrap();
        let svg = roc_svg(&[("m", &c)]).unwrap();
        let pts = svg
            .split(r#"points=""#)
            .nth(1)
            .unwrap()
            .split('"')
            .next()
            .unwrap();
        let parsed: Vec<(f64, f64)> = pts
            .split(' ')
            .map(|p| {
                let (x, y) = p.split_once(',').unwrap();
                (x.parse().unwrap(), y.parse().unwrap())
            })
            .collect();
        let first = parsed[0];
        let last = *parsed.last().unwrap();
        assert_eq!(first, (SVG_MARGIN, SVG_MARGIN + SVG_SIDE));
        assert_eq!(last, (SVG_MARGIN + SVG_SIDE, SVG_MARGIN));
        assert_eq!(parsed.len(), c.len());
    }

    #[test]
    fn roc_csv_has_header_and_one_row_per_point() {
        let c = roc_curve(&SA, &LABELS).unwrap();
        let text = String::from_utf8(roc_csv_bytes(&c).unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "threshold,fpr,tpr");
        assert_eq!(lines.len(), c.len() + 1);
        assert!(lines[1].starts_with("inf,0,0"));
    }
}
