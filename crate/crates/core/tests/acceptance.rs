//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.
//!
//! `cargo test --test acceptance -- 1 4 12` runs only the listed criteria.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::Rng as _;

use effmap::atlasmap::{build_efficacy_map, project_map, score_coordinate, SpatialTransform};
use effmap::experiment::{run_comparison, ExperimentConfig, FoldScores, ScoreRow};
use effmap::metrics::{auc, mcnemar_from_counts, roc_curve, wilcoxon_mann_whitney};
use effmap::patchset::{plan_folds, Patch, PatchMeta};
use effmap::phantom::{sha256_hex, StimRecord};
use effmap::rng::stream;
use effmap::stimkernel::{radius_for_current, rasterize_sphere};
use effmap::tinynn::{grad_check, train, Mode, Model, ModelConfig, StopRule, Tensor, TrainConfig};
use effmap::volgrid::Grid;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

type Check = fn() -> Vec<(String, Verdict)>;

fn single(name: &str, v: Verdict) -> Vec<(String, Verdict)> {
    vec![(name.to_string(), v)]
}

// ---------------------------------------------------------------- 1

fn radius_table() -> Vec<(String, Verdict)> {
    // (current mA, radius mm); the first row stands for every current below 1 mA
    let knots = [
        (0.999, 1.00),
        (1.0, 1.80),
        (2.0, 2.42),
        (3.0, 2.94),
        (4.0, 3.33),
        (5.0, 3.72),
        (6.0, 4.05),
        (7.0, 4.35),
    ];
    let mut worst: f64 = 0.0;
    for (i, r) in knots {
        worst = worst.max((radius_for_current(i).unwrap() - r).abs());
    }
    let mid = radius_for_current(4.5).unwrap();
    let low = radius_for_current(0.5).unwrap();
    worst = worst.max((mid - 3.525).abs()).max((low - 1.00).abs());
    single(
        "radius table knots, 4.5 mA and 0.5 mA",
        Verdict::new(
            worst <= 1e-12,
            format!("max |error| {worst:.1e}, 4.5 mA -> {mid}, 0.5 mA -> {low}"),
        ),
    )
}

// ---------------------------------------------------------------- 2

fn lattice_count(grid: &Grid, c: [f64; 3], r: f64) -> usize {
    let [nx, ny, nz] = grid.dims();
    let mut n = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let d2 = (x as f64 - c[0]).powi(2)
                    + (y as f64 - c[1]).powi(2)
                    + (z as f64 - c[2]).powi(2);
                if d2 <= r * r + 1e-9 {
                    n += 1;
                }
            }
        }
    }
    n
}

fn sphere_kernel() -> Vec<(String, Verdict)> {
    let grid = Grid::isotropic([24, 24, 24], 1.0);
    let mut rng = stream(2, 0);
    let (mut mass_err, mut count_mismatch, mut worst_rel): (f64, usize, f64) = (0.0, 0, 0.0);
    let mut spheres: Vec<([f64; 3], f64)> = (0..100)
        .map(|_| {
            let c = [0; 3].map(|_| 11.5 + rng.random_range(-0.5..0.5));
            (c, rng.random_range(3.0..=4.35))
        })
        .collect();
    // voxel-centered sweep across the radius range
    spheres.extend((0..=135).map(|i| ([12.0; 3], 3.0 + i as f64 * 0.01)));
    for &(c, r) in &spheres {
        let s = rasterize_sphere(&grid, c, r).unwrap();
        mass_err = mass_err.max((s.total_mass() - 1.0).abs());
        let n = lattice_count(&grid, c, r);
        if n != s.len() {
            count_mismatch += 1;
        }
        let v = 4.0 / 3.0 * std::f64::consts::PI * r.powi(3);
        worst_rel = worst_rel.max((s.len() as f64 - v).abs() / v);
    }
    single(
        "sphere mass and voxel count",
        Verdict::new(
            mass_err <= 1e-9 && count_mismatch == 0 && worst_rel <= 0.15,
            format!(
                "{} spheres, max |mass-1| {mass_err:.1e}, lattice mismatches {count_mismatch}, max count deviation {:.1}%",
                spheres.len(),
                100.0 * worst_rel
            ),
        ),
    )
}

// ---------------------------------------------------------------- 3

fn atlas_scoring() -> Vec<(String, Verdict)> {
    let atlas_grid = Grid::isotropic([40, 40, 40], 1.0);
    let subject_grid = Grid::isotropic([36, 38, 40], 1.0);
    let mut rng = stream(3, 0);
    let positives: Vec<StimRecord> = (0..60)
        .map(|i| StimRecord {
            patient_id: format!("P{}", i % 6),
            position: [0; 3].map(|_| rng.random_range(12.0..26.0)),
            current_ma: rng.random_range(0.5..7.5),
            improvement_pct: 80.0,
            pass_effect: false,
            side_effect: String::new(),
        })
        .collect();
    let transforms = (0..6)
        .map(|p| {
            let t = [0; 3].map(|_| rng.random_range(-1.5..1.5));
            (format!("P{p}"), SpatialTransform::translation(t))
        })
        .collect();
    let table = Default::default();
    let map = build_efficacy_map(&positives, &transforms, &atlas_grid, &table).unwrap();
    let to_subject = SpatialTransform::translation([1.25, -0.75, 0.4]);
    let projected = project_map(&map, &to_subject, &subject_grid).unwrap();

    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let c = [0; 3].map(|_| rng.random_range(4.0..32.0));
        let current = rng.random_range(0.3..8.0);
        let got = score_coordinate(&projected, c, current, &table).unwrap();
        let r = radius_for_current(current).unwrap();
        let mut want = 0.0;
        for i in 0..subject_grid.len() {
            let p = subject_grid.voxel_center(i);
            let d2: f64 = p.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum();
            if d2 <= r * r {
                want += projected.value(i);
            }
        }
        worst = worst.max((got - want).abs());
    }
    single(
        "atlas scoring against brute force",
        Verdict::new(
            worst <= 1e-9,
            format!("200 coordinates, max |error| {worst:.1e}"),
        ),
    )
}

// ---------------------------------------------------------------- 4

fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn auc_oracle() -> Vec<(String, Verdict)> {
    let mut rng = stream(4, 0);
    let (mut worst_trap, mut worst_rank): (f64, f64) = (0.0, 0.0);
    let mut done = 0;
    while done < 1000 {
        let n = rng.random_range(2..=200);
        let levels = rng.random_range(2..=n.max(3));
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.4))).collect();
        if labels.iter().all(|&l| l == labels[0]) {
            continue;
        }
        // few levels force ties; a shift makes the classes partly separable
        let scores: Vec<f64> = labels
            .iter()
            .map(|&l| {
                (rng.random_range(0..levels) + l as usize * levels / 3) as f64 / levels as f64
            })
            .collect();
        let want = pairwise_auc(&scores, &labels);
        let trap = roc_curve(&scores, &labels).unwrap().trapezoid_area();
        worst_trap = worst_trap.max((trap - want).abs());
        worst_rank = worst_rank.max((auc(&scores, &labels).unwrap() - want).abs());
        done += 1;
    }
    single(
        "trapezoid AUC against pairwise enumeration",
        Verdict::new(
            worst_trap <= 1e-12 && worst_rank <= 1e-12,
            format!(
                "1000 instances, max |error| trapezoid {worst_trap:.1e}, midrank {worst_rank:.1e}"
            ),
        ),
    )
}

// ---------------------------------------------------------------- 5

fn mcnemar_values() -> Vec<(String, Verdict)> {
    let m = mcnemar_from_counts(15, 5);
    let equal = [(0, 0), (7, 7), (40, 40)].map(|(b, c)| mcnemar_from_counts(b, c).p_value);
    let pass = (m.chi2 - 4.05).abs() <= 1e-12
        && (m.p_value - 0.0441).abs() <= 0.0005
        && equal.iter().all(|&p| p == 1.0);
    single(
        "McNemar statistic and p-value",
        Verdict::new(
            pass,
            format!(
                "b=15 c=5: chi2 {:.4}, p {:.5}; b=c: p {equal:?}",
                m.chi2, m.p_value
            ),
        ),
    )
}

// ---------------------------------------------------------------- 6

fn wmw_exact() -> Vec<(String, Verdict)> {
    let x = [1.0, 2.0, 3.0];
    let y = [4.0, 5.0, 6.0];
    let got = wilcoxon_mann_whitney(&x, &y).unwrap();
    // enumerate every 3-subset of the six ranks as the first sample
    let (mut extreme, mut total) = (0, 0);
    for a in 1..=6 {
        for b in a + 1..=6 {
            for c in b + 1..=6 {
                let u = (a + b + c - 6) as f64;
                total += 1;
                if (u - 4.5).abs() >= 4.5 {
                    extreme += 1;
                }
            }
        }
    }
    let want = extreme as f64 / total as f64;
    single(
        "Wilcoxon-Mann-Whitney exact p",
        Verdict::new(
            got.exact && got.p_value == 0.1 && want == 0.1,
            format!("p {} (enumeration {extreme}/{total})", got.p_value),
        ),
    )
}

// ---------------------------------------------------------------- 7

fn gradient_check() -> Vec<(String, Verdict)> {
    let mut model = Model::<f32>::new(ModelConfig::reduced(), 7).unwrap();
    let mut rng = stream(7, 1);
    let n = 2 * 2 * 11 * 11 * 11;
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x64 = Tensor::new(vec![2, 2, 11, 11, 11], data).unwrap();
    // populate running statistics before freezing them
    model
        .forward(&x64.cast(), Mode::Train { dropout_seed: 1 })
        .unwrap();
    model.clear_cache();
    let r = grad_check(&model, &x64, &[1.0, 0.0], 1e-3).unwrap();
    single(
        "gradient check, reduced model at f32",
        Verdict::new(
            r.max_rel_error <= 1e-2 && r.checked >= 200,
            format!(
                "max rel error {:.2e} at {}[{}], checked {}, skipped {}",
                r.max_rel_error, r.worst.0, r.worst.1, r.checked, r.skipped
            ),
        ),
    )
}

// ---------------------------------------------------------------- 8

fn overfit() -> Vec<(String, Verdict)> {
    let size = 11;
    let mut rng = stream(8, 0);
    let patches: Vec<Patch> = (0..16)
        .map(|i| Patch {
            data: (0..2 * size * size * size)
                .map(|_| rng.random_range(-1.0f32..1.0))
                .collect(),
            channels: 2,
            size,
            label: (i % 2) as u8,
            meta: PatchMeta {
                patient_id: format!("P{i}"),
                position: [0.0; 3],
                current_ma: 1.0,
            },
        })
        .collect();
    let refs: Vec<&Patch> = patches.iter().collect();
    let cfg = TrainConfig {
        lr: 1e-3,
        batch_size: 4,
        max_epochs: 200,
        stop_rule: StopRule::Never,
        track_train_accuracy: true,
        seed: 8,
        ..TrainConfig::default()
    };
    let model = Model::<f32>::new(ModelConfig::reduced(), 8).unwrap();
    let out = train(model, &refs, &refs, &cfg).unwrap();
    let epochs = &out.best.history.epochs;
    let first = epochs
        .iter()
        .find(|e| e.train_accuracy == Some(1.0))
        .map(|e| e.epoch);
    let detail = match first {
        Some(e) => format!("train accuracy 1.0 at epoch {e}"),
        None => format!(
            "best train accuracy {:.3}",
            epochs
                .iter()
                .filter_map(|e| e.train_accuracy)
                .fold(0.0, f64::max)
        ),
    };
    single("overfit 16 patches", Verdict::new(first.is_some(), detail))
}

// ---------------------------------------------------------------- 9

fn pooled_auc(folds: &[FoldScores], pick: fn(&FoldScores) -> &Vec<ScoreRow>) -> f64 {
    let rows: Vec<&ScoreRow> = folds.iter().flat_map(|f| pick(f).iter()).collect();
    let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
    auc(&scores, &labels).unwrap()
}

fn fold_aucs(folds: &[FoldScores], pick: fn(&FoldScores) -> &Vec<ScoreRow>) -> String {
    let v: Vec<String> = folds
        .iter()
        .map(|f| {
            let rows = pick(f);
            let s: Vec<f64> = rows.iter().map(|r| r.score).collect();
            let l: Vec<u8> = rows.iter().map(|r| r.label).collect();
            auc(&s, &l).map_or("n/a".into(), |a| format!("{a:.3}"))
        })
        .collect();
    v.join(" ")
}

fn method_comparison() -> Vec<(String, Verdict)> {
    let cfg = ExperimentConfig::acceptance();
    let folds = run_comparison(&cfg, true).unwrap();
    let cnn = pooled_auc(&folds, |f| &f.cnn);
    let base = pooled_auc(&folds, |f| &f.baseline);
    let oracle = pooled_auc(&folds, |f| &f.oracle);
    let n: usize = folds.iter().map(|f| f.cnn.len()).sum();
    let detail = format!(
        "n={n} pooled AUC cnn {cnn:.4} baseline {base:.4} oracle {oracle:.4}; \
         (a) cnn-baseline {:+.4} >= 0.02, (b) cnn-oracle {:+.4} <= 0.02, (c) baseline > 0.55; \
         per fold cnn [{}] baseline [{}]",
        cnn - base,
        cnn - oracle,
        fold_aucs(&folds, |f| &f.cnn),
        fold_aucs(&folds, |f| &f.baseline),
    );
    let pass = cnn >= base + 0.02 && cnn <= oracle + 0.02 && base > 0.55;

    let decreasing = folds
        .iter()
        .filter(|f| {
            let losses = f
                .history
                .as_ref()
                .map(|h| h.train_losses())
                .unwrap_or_default();
            losses.len() >= 5 && losses[4] < losses[0]
        })
        .count();
    vec![
        (
            "synthetic method comparison".to_string(),
            Verdict::new(pass, detail),
        ),
        (
            "training loss falls over the first 5 epochs".to_string(),
            Verdict::new(
                decreasing * 5 >= 4 * folds.len(),
                format!("{decreasing} of {} folds", folds.len()),
            ),
        ),
    ]
}

// ---------------------------------------------------------------- 10

fn ideal_registration(mut cfg: ExperimentConfig) -> ExperimentConfig {
    cfg.phantom.warp_amplitude_mm = 0.0;
    cfg.baseline.registration_error_mm = 0.0;
    cfg
}

fn baseline_validity() -> Vec<(String, Verdict)> {
    let cfg = ideal_registration(ExperimentConfig::acceptance());
    let folds = run_comparison(&cfg, false).unwrap();
    let base = pooled_auc(&folds, |f| &f.baseline);
    let oracle = pooled_auc(&folds, |f| &f.oracle);

    // diagnostic only: the same cohort design with one stimulation current
    let mut single_current = cfg.clone();
    single_current.phantom.current_set_ma = vec![3.0];
    let sc = run_comparison(&single_current, false).unwrap();
    let sc_base = pooled_auc(&sc, |f| &f.baseline);
    let sc_oracle = pooled_auc(&sc, |f| &f.oracle);

    single(
        "baseline near oracle without warp or registration error",
        Verdict::new(
            (base - oracle).abs() <= 0.05,
            format!(
                "baseline {base:.4} oracle {oracle:.4} |diff| {:.4} <= 0.05; \
                 single 3 mA current: baseline {sc_base:.4} oracle {sc_oracle:.4}",
                (base - oracle).abs()
            ),
        ),
    )
}

// ---------------------------------------------------------------- 11

fn effmap_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_effmap"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn output_hashes(dir: &Path) -> BTreeMap<String, String> {
    let mut files = vec![
        "cohort/manifest.json".to_string(),
        "report.json".into(),
        "roc.svg".into(),
    ];
    let models = fs::read_dir(dir.join("models")).unwrap();
    for e in models {
        files.push(format!(
            "models/{}",
            e.unwrap().file_name().to_string_lossy()
        ));
    }
    files
        .into_iter()
        .map(|f| {
            let h = sha256_hex(&fs::read(dir.join(&f)).unwrap());
            (f, h)
        })
        .collect()
}

fn pipeline(cfg: &str, out: &Path) -> Result<BTreeMap<String, String>, String> {
    let o = out.to_str().unwrap();
    for stage in ["phantom", "atlas", "patches", "train", "predict", "report"] {
        effmap_cli(&[stage, "--config", cfg, "--out", o, "--threads", "1"])?;
    }
    Ok(output_hashes(out))
}

fn determinism() -> Vec<(String, Verdict)> {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("smoke.json");
    fs::write(
        &cfg_path,
        serde_json::to_string(&ExperimentConfig::smoke()).unwrap(),
    )
    .unwrap();
    let cfg = cfg_path.to_str().unwrap();
    let runs = (
        pipeline(cfg, &dir.path().join("a")),
        pipeline(cfg, &dir.path().join("b")),
    );
    let verdict = match runs {
        (Ok(a), Ok(b)) => {
            let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
            Verdict::new(
                a.len() == b.len() && differing.is_empty(),
                format!("{} output files compared, differing {differing:?}", a.len()),
            )
        }
        (Err(e), _) | (_, Err(e)) => Verdict::new(false, e),
    };
    single(
        "phantom, train and report re-runs hash identically",
        verdict,
    )
}

// ---------------------------------------------------------------- 12

fn fold_law() -> Vec<(String, Verdict)> {
    let ids: Vec<String> = (0..187).map(|i| format!("P{i:03}")).collect();
    let plan = plan_folds(&ids, 5, 0.1, 12).unwrap();
    let sizes: Vec<usize> = plan.folds.iter().map(|f| f.test.len()).collect();
    let mut tested: Vec<&String> = plan.folds.iter().flat_map(|f| &f.test).collect();
    tested.sort();
    let once = tested.len() == 187 && tested.windows(2).all(|w| w[0] != w[1]);
    let val_ok = plan.folds.iter().all(|f| {
        let rest = f.train.len() + f.validation.len();
        let mut all: HashSet<&String> = f.test.iter().collect();
        all.extend(&f.train);
        all.extend(&f.validation);
        rest == 187 - f.test.len() && f.validation.len() == rest.div_ceil(10) && all.len() == 187
    });
    let vals: Vec<usize> = plan.folds.iter().map(|f| f.validation.len()).collect();
    single(
        "fold plan for 187 patients",
        Verdict::new(
            sizes == [38, 38, 37, 37, 37] && once && val_ok,
            format!("test sizes {sizes:?}, validation sizes {vals:?}, each tested once: {once}"),
        ),
    )
}

// ----------------------------------------------------------------

fn main() {
    let checks: [(usize, Check); 12] = [
        (1, radius_table),
        (2, sphere_kernel),
        (3, atlas_scoring),
        (4, auc_oracle),
        (5, mcnemar_values),
        (6, wmw_exact),
        (7, gradient_check),
        (8, overfit),
        (9, method_comparison),
        (10, baseline_validity),
        (11, determinism),
        (12, fold_law),
    ];
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = Vec::new();
    for (id, check) in checks {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let verdicts = check();
        let secs = start.elapsed().as_secs_f64();
        for (name, v) in verdicts {
            let status = if v.pass { "PASS" } else { "FAIL" };
            println!(
                "criterion {id:>2} {status} {name}: {} [{secs:.1} s]",
                v.detail
            );
            if !v.pass {
                failed.push(id);
            }
        }
    }
    if !failed.is_empty() {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
    println!("acceptance: all criteria pass");
}
