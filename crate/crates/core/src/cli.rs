//! Command-line surface: one subcommand per pipeline stage, all driven by
//! one experiment config and writing into one output directory.
//!
//! Output layout under `--out`:
//! `config.json`, `cohort/`, `folds.json`, `atlas/fold{k}.mvol`,
//! `patches/manifest.csv` (+ one MVOL per patch, `summary.json`),
//! `models/fold{k}.tnn`, `scores/{method}_fold{k}.csv`,
//! `maps/fold{k}_{subject}.mvol`, `eval/{method}.json`,
//! `eval/{method}_roc.csv`, `compare.json`, `report.json`, `roc.svg`.

use std::collections::{BTreeMap, HashMap};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::experiment::{
    baseline_scores, cnn_scores, evaluation_records, fold_atlas, fold_plan, normalized_intensity,
    oracle_scores, patches_for, read_scores_csv, registrations, subject, train_fold,
    write_scores_csv, ExperimentConfig, ScoreRow, METHOD_BASELINE, METHOD_CNN, METHOD_ORACLE,
};
use crate::patchset::{
    read_dataset_manifest, write_dataset_manifest, DatasetEntry, FoldPlan, Patch, PatchMeta,
};
use crate::phantom::{sha256_hex, Cohort};
use crate::report::{build_report, compare, evaluate, render_roc_svg, roc_csv_bytes, MethodFolds};
use crate::slidemap::{default_roi, sliding_efficacy_map};
use crate::tinynn::{load_checkpoint, save_checkpoint};
use crate::volgrid::Volume;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "effmap",
    version,
    about = "Stimulation-efficacy atlas vs patch CNN on synthetic DBS cohorts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// Experiment config (JSON); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory shared by all stages.
    #[arg(long, default_value = "effmap-out")]
    out: PathBuf,
    /// Master seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 1 gives bitwise-reproducible training.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Args)]
struct FoldArgs {
    #[command(flatten)]
    common: Common,
    /// Run a single fold (0-based); all folds when omitted.
    #[arg(long)]
    fold: Option<usize>,
}

#[derive(Debug, Clone, Args)]
struct MapArgs {
    #[command(flatten)]
    common: Common,
    /// Fold whose checkpoint is used (default 0).
    #[arg(long, default_value_t = 0)]
    fold: usize,
    /// Lattice stride; the config value when omitted.
    #[arg(long)]
    stride: Option<usize>,
    /// Subject to map; the fold's first test subject when omitted.
    #[arg(long)]
    subject: Option<String>,
    /// Score every voxel instead of the non-background region.
    #[arg(long)]
    no_roi: bool,
}

#[derive(Debug, Clone, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Evaluate one scores CSV instead of the pipeline's score files.
    #[arg(long)]
    scores: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
    /// Scores CSV of method A (default: pooled CNN scores).
    #[arg(long)]
    a: Option<PathBuf>,
    /// Scores CSV of method B (default: pooled baseline scores).
    #[arg(long)]
    b: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
struct ConfigArgs {
    /// Preset: default, acceptance or smoke.
    #[arg(long, default_value = "default")]
    preset: String,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate and export the synthetic cohort.
    Phantom(Common),
    /// Build the atlas per fold and score its test coordinates.
    Atlas(FoldArgs),
    /// Label, deduplicate and extract patches; write the oracle scores.
    Patches(Common),
    /// Train the patch CNN per fold.
    Train(FoldArgs),
    /// Score test patches with each fold's checkpoint.
    Predict(FoldArgs),
    /// Sliding-window efficacy map of one subject.
    Map(MapArgs),
    /// ROC, AUC and operating point per method.
    Eval(EvalArgs),
    /// McNemar comparison between two methods.
    Compare(CompareArgs),
    /// Aggregate folds into report.json and roc.svg.
    Report(Common),
    /// Every stage in order.
    All(Common),
    /// Print a complete config preset as JSON.
    Config(ConfigArgs),
}

/// Parse `args` (program name first), run the command and return the exit
/// code: 0 success, 1 usage or config error, 2 data or format error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) | Error::Config(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
}

impl Ctx {
    fn new(c: &Common) -> Result<Self> {
        let mut cfg = match &c.config {
            Some(p) => ExperimentConfig::from_json_file(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = c.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(Self {
            cfg,
            out: c.out.clone(),
        })
    }

    fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.out.join(rel)
    }

    fn dir(&self, rel: &str) -> Result<PathBuf> {
        let d = self.path(rel);
        fs::create_dir_all(&d)?;
        Ok(d)
    }

    fn cohort(&self) -> Result<Cohort> {
        let dir = self.path("cohort");
        if !dir.join(crate::phantom::MANIFEST).exists() {
            return Err(Error::Usage(format!(
                "no cohort under {}; run `effmap phantom` first",
                dir.display()
            )));
        }
        Cohort::import(dir)
    }

    fn plan(&self, cohort: &Cohort) -> Result<FoldPlan> {
        let plan = fold_plan(&self.cfg, cohort)?;
        write_json(&plan, self.path("folds.json"))?;
        Ok(plan)
    }

    fn scores_path(&self, method: &str, fold: usize) -> PathBuf {
        self.path(format!("scores/{method}_fold{fold}.csv"))
    }

    fn model_path(&self, fold: usize) -> PathBuf {
        self.path(format!("models/fold{fold}.tnn"))
    }
}

fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(Error::Usage("--threads must be >= 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Usage(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn folds_to_run(plan: &FoldPlan, fold: Option<usize>) -> Result<Vec<usize>> {
    match fold {
        None => Ok((0..plan.folds.len()).collect()),
        Some(f) if f < plan.folds.len() => Ok(vec![f]),
        Some(f) => Err(Error::Usage(format!(
            "--fold {f} out of range (plan has {} folds)",
            plan.folds.len()
        ))),
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Config(a) => {
            let cfg = ExperimentConfig::preset(&a.preset)
                .ok_or_else(|| Error::Usage(format!("unknown preset {:?}", a.preset)))?;
            println!("{}", serde_json::to_string_pretty(&cfg)?);
            Ok(())
        }
        Command::Phantom(c) => staged(&c, stage_phantom),
        Command::Atlas(a) => staged(&a.common, |ctx| stage_atlas(ctx, a.fold)),
        Command::Patches(c) => staged(&c, stage_patches),
        Command::Train(a) => staged(&a.common, |ctx| stage_train(ctx, a.fold)),
        Command::Predict(a) => staged(&a.common, |ctx| stage_predict(ctx, a.fold)),
        Command::Map(a) => staged(&a.common, |ctx| {
            stage_map(ctx, a.fold, a.stride, a.subject.as_deref(), !a.no_roi)
        }),
        Command::Eval(a) => staged(&a.common, |ctx| stage_eval(ctx, a.scores.as_deref())),
        Command::Compare(a) => staged(&a.common, |ctx| {
            stage_compare(ctx, a.a.as_deref(), a.b.as_deref())
        }),
        Command::Report(c) => staged(&c, stage_report),
        Command::All(c) => staged(&c, |ctx| {
            stage_phantom(ctx)?;
            stage_atlas(ctx, None)?;
            stage_patches(ctx)?;
            stage_train(ctx, None)?;
            stage_predict(ctx, None)?;
            stage_eval(ctx, None)?;
            stage_compare(ctx, None, None)?;
            stage_report(ctx)
        }),
    }
}

fn staged(c: &Common, f: impl FnOnce(&Ctx) -> Result<()> + Send) -> Result<()> {
    let ctx = Ctx::new(c)?;
    fs::create_dir_all(&ctx.out)?;
    with_threads(c.threads, || f(&ctx))?
}

fn stage_phantom(ctx: &Ctx) -> Result<()> {
    let cohort = Cohort::generate(&ctx.cfg.phantom_config())?;
    let hash = cohort.export(ctx.path("cohort"))?;
    write_json(&ctx.cfg, ctx.path("config.json"))?;
    let records: usize = cohort.subjects.iter().map(|s| s.records.len()).sum();
    println!(
        "phantom: {} subjects, {records} stimulation records, cohort hash {hash}",
        cohort.subjects.len()
    );
    Ok(())
}

fn stage_atlas(ctx: &Ctx, fold: Option<usize>) -> Result<()> {
    let cohort = ctx.cohort()?;
    let plan = ctx.plan(&cohort)?;
    let records = evaluation_records(&cohort)?;
    let regs = registrations(&ctx.cfg, &cohort);
    ctx.dir("atlas")?;
    ctx.dir("scores")?;
    for k in folds_to_run(&plan, fold)? {
        let f = &plan.folds[k];
        let atlas = fold_atlas(&cohort, f, &records, &regs)?;
        atlas
            .volume
            .write_mvol(ctx.path(format!("atlas/fold{k}.mvol")))?;
        let rows = baseline_scores(&cohort, f, &atlas, &records, &regs)?;
        write_scores_csv(&rows, ctx.scores_path(METHOD_BASELINE, k))?;
        println!(
            "atlas fold {k}: {} positive records, {} test coordinates",
            atlas.count,
            rows.len()
        );
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct DatasetSummary {
    records: usize,
    excluded_pass_effect: usize,
    positive_before_dedup: usize,
    null_before_dedup: usize,
    positive_after_dedup: usize,
    null_after_dedup: usize,
    patch_size: usize,
    channels: usize,
}

fn stage_patches(ctx: &Ctx) -> Result<()> {
    let cohort = ctx.cohort()?;
    let plan = ctx.plan(&cohort)?;
    let records = evaluation_records(&cohort)?;
    let dir = ctx.dir("patches")?;
    let ids: Vec<String> = cohort.subjects.iter().map(|s| s.id.clone()).collect();
    let patches = patches_for(&cohort, &ids, &records, &ctx.cfg.patch)?;
    let mut entries = Vec::with_capacity(patches.len());
    let mut counter: HashMap<&str, usize> = HashMap::new();
    for p in &patches {
        let n = counter.entry(&p.meta.patient_id).or_default();
        let name = format!("{}_{:03}.mvol", p.meta.patient_id, n);
        *n += 1;
        p.to_volume().write_mvol(dir.join(&name))?;
        entries.push(DatasetEntry {
            patient_id: p.meta.patient_id.clone(),
            position: p.meta.position,
            current_ma: p.meta.current_ma,
            label: p.label,
            patch_file: name,
        });
    }
    write_dataset_manifest(&entries, dir.join("manifest.csv"))?;

    let labeled: Vec<_> = cohort
        .subjects
        .iter()
        .map(|s| crate::patchset::label_records(&s.records))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let count = |r: crate::patchset::Response| labeled.iter().filter(|l| l.label == r).count();
    let summary = DatasetSummary {
        records: labeled.len(),
        excluded_pass_effect: count(crate::patchset::Response::Excluded),
        positive_before_dedup: count(crate::patchset::Response::Positive),
        null_before_dedup: count(crate::patchset::Response::Null),
        positive_after_dedup: entries.iter().filter(|e| e.label == 1).count(),
        null_after_dedup: entries.iter().filter(|e| e.label == 0).count(),
        patch_size: ctx.cfg.patch.size,
        channels: ctx.cfg.patch.encoding.channels(),
    };
    write_json(&summary, dir.join("summary.json"))?;

    ctx.dir("scores")?;
    for (k, f) in plan.folds.iter().enumerate() {
        write_scores_csv(
            &oracle_scores(&cohort, f, &records)?,
            ctx.scores_path(METHOD_ORACLE, k),
        )?;
    }
    println!(
        "patches: {} ({} positive), {}^3 x {} channels",
        entries.len(),
        summary.positive_after_dedup,
        summary.patch_size,
        summary.channels
    );
    Ok(())
}

fn load_patches(ctx: &Ctx, ids: &[String]) -> Result<Vec<Patch>> {
    let dir = ctx.path("patches");
    let manifest = dir.join("manifest.csv");
    if !manifest.exists() {
        return Err(Error::Usage(format!(
            "no patch manifest at {}; run `effmap patches` first",
            manifest.display()
        )));
    }
    let entries = read_dataset_manifest(&manifest)?;
    let mut out = Vec::new();
    for id in ids {
        for e in entries.iter().filter(|e| &e.patient_id == id) {
            let path = dir.join(&e.patch_file);
            let vol = Volume::read_mvol(&path).map_err(|err| Error::load(&path, err))?;
            let meta = PatchMeta {
                patient_id: e.patient_id.clone(),
                position: e.position,
                current_ma: e.current_ma,
            };
            out.push(Patch::from_volume(&vol, e.label, meta)?);
        }
    }
    Ok(out)
}

fn stage_train(ctx: &Ctx, fold: Option<usize>) -> Result<()> {
    let cohort_plan: FoldPlan = read_plan(ctx)?;
    ctx.dir("models")?;
    for k in folds_to_run(&cohort_plan, fold)? {
        let f = &cohort_plan.folds[k];
        let tr = load_patches(ctx, &f.train)?;
        let va = load_patches(ctx, &f.validation)?;
        let outcome = train_fold(&ctx.cfg, k, &tr, &va)?;
        save_checkpoint(&outcome.best, ctx.model_path(k))?;
        let h = &outcome.best.history;
        let best = &h.epochs[h.best_epoch - 1];
        println!(
            "train fold {k}: {} epochs (early stop: {}), best epoch {} val acc {:.3} val loss {:.4}",
            h.epochs.len(),
            h.stopped_early,
            h.best_epoch,
            best.val_accuracy,
            best.val_loss
        );
    }
    Ok(())
}

fn read_plan(ctx: &Ctx) -> Result<FoldPlan> {
    let path = ctx.path("folds.json");
    if !path.exists() {
        return Err(Error::Usage(format!(
            "no fold plan at {}; run `effmap patches` first",
            path.display()
        )));
    }
    let text = fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::load(&path, e))
}

fn load_model(ctx: &Ctx, k: usize) -> Result<crate::tinynn::Checkpoint> {
    let path = ctx.model_path(k);
    if !path.exists() {
        return Err(Error::Usage(format!(
            "no checkpoint at {}; run `effmap train` first",
            path.display()
        )));
    }
    load_checkpoint(&path)
}

fn stage_predict(ctx: &Ctx, fold: Option<usize>) -> Result<()> {
    let plan = read_plan(ctx)?;
    ctx.dir("scores")?;
    for k in folds_to_run(&plan, fold)? {
        let mut ck = load_model(ctx, k)?;
        let te = load_patches(ctx, &plan.folds[k].test)?;
        let rows = cnn_scores(&mut ck.model, &te, ctx.cfg.predict_batch)?;
        write_scores_csv(&rows, ctx.scores_path(METHOD_CNN, k))?;
        println!("predict fold {k}: {} test patches scored", rows.len());
    }
    Ok(())
}

fn stage_map(
    ctx: &Ctx,
    fold: usize,
    stride: Option<usize>,
    subject_id: Option<&str>,
    roi: bool,
) -> Result<()> {
    let plan = read_plan(ctx)?;
    folds_to_run(&plan, Some(fold))?;
    let cohort = ctx.cohort()?;
    let id = match subject_id {
        Some(s) => s.to_string(),
        None => plan.folds[fold].test[0].clone(),
    };
    let s = subject(&cohort, &id).map_err(|_| Error::Usage(format!("unknown subject {id:?}")))?;
    let mut ck = load_model(ctx, fold)?;
    let stride = stride.unwrap_or(ctx.cfg.map.stride);
    if stride == 0 {
        return Err(Error::Usage("--stride must be >= 1".into()));
    }
    let mask = if roi && ctx.cfg.map.roi {
        Some(default_roi(s)?)
    } else {
        None
    };
    let map = sliding_efficacy_map(
        &mut ck.model,
        &normalized_intensity(s)?,
        &s.labels,
        &ctx.cfg.patch,
        stride,
        mask.as_ref(),
        ctx.cfg.map.batch_size,
    )?;
    ctx.dir("maps")?;
    let path = ctx.path(format!("maps/fold{fold}_{id}.mvol"));
    map.write_mvol(&path)?;
    println!("map: {} (stride {stride})", path.display());
    Ok(())
}

/// Per-method fold files present in `scores/`, in fold order.
fn method_folds(ctx: &Ctx, method: &str) -> Result<Option<MethodFolds>> {
    let mut folds = Vec::new();
    for k in 0.. {
        let p = ctx.scores_path(method, k);
        if !p.exists() {
            break;
        }
        folds.push(read_scores_csv(&p)?);
    }
    Ok((!folds.is_empty()).then(|| MethodFolds {
        name: method.to_string(),
        folds,
    }))
}

#[derive(Debug, Serialize)]
struct EvalSummary {
    name: String,
    auc: f64,
    threshold: f64,
    sensitivity: f64,
    specificity: f64,
    youden_j: f64,
    positives: usize,
    negatives: usize,
}

fn eval_one(name: &str, rows: &[ScoreRow], dir: &Path) -> Result<()> {
    let e = evaluate(rows)?;
    let op = e.operating_point;
    let summary = EvalSummary {
        name: name.to_string(),
        auc: e.auc,
        threshold: op.threshold,
        sensitivity: op.sensitivity,
        specificity: op.specificity,
        youden_j: op.youden_j,
        positives: e.positives,
        negatives: e.negatives,
    };
    write_json(&summary, dir.join(format!("{name}.json")))?;
    fs::write(
        dir.join(format!("{name}_roc.csv")),
        roc_csv_bytes(&e.curve)?,
    )?;
    println!(
        "eval {name}: auc = {:.4}, sensitivity {:.3}, specificity {:.3} at threshold {}",
        e.auc, op.sensitivity, op.specificity, op.threshold
    );
    Ok(())
}

fn stage_eval(ctx: &Ctx, scores: Option<&Path>) -> Result<()> {
    let dir = ctx.dir("eval")?;
    if let Some(p) = scores {
        let name = p
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("scores")
            .to_string();
        return eval_one(&name, &read_scores_csv(p)?, &dir);
    }
    let mut any = false;
    for m in [METHOD_CNN, METHOD_BASELINE, METHOD_ORACLE] {
        if let Some(mf) = method_folds(ctx, m)? {
            eval_one(m, &mf.pooled(), &dir)?;
            any = true;
        }
    }
    if !any {
        return Err(Error::Usage(format!(
            "no score files under {}",
            ctx.path("scores").display()
        )));
    }
    Ok(())
}

fn pooled_or_file(ctx: &Ctx, file: Option<&Path>, method: &str) -> Result<(String, Vec<ScoreRow>)> {
    match file {
        Some(p) => Ok((
            p.file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or(method)
                .to_string(),
            read_scores_csv(p)?,
        )),
        None => {
            let mf = method_folds(ctx, method)?.ok_or_else(|| {
                Error::Usage(format!(
                    "no {method} score files under {}",
                    ctx.out.display()
                ))
            })?;
            Ok((method.to_string(), mf.pooled()))
        }
    }
}

fn stage_compare(ctx: &Ctx, a: Option<&Path>, b: Option<&Path>) -> Result<()> {
    let (na, ra) = pooled_or_file(ctx, a, METHOD_CNN)?;
    let (nb, rb) = pooled_or_file(ctx, b, METHOD_BASELINE)?;
    let c = compare(&na, &ra, &nb, &rb)?;
    write_json(&c, ctx.path("compare.json"))?;
    println!(
        "compare {na} vs {nb}: auc {:.4} vs {:.4}, b = {}, c = {}, chi2 = {:.4}, p = {:.4}",
        c.auc_a, c.auc_b, c.b, c.c, c.chi2, c.p
    );
    Ok(())
}

fn stage_report(ctx: &Ctx) -> Result<()> {
    let mut methods = Vec::new();
    let mut hashes = BTreeMap::new();
    for m in [METHOD_CNN, METHOD_BASELINE, METHOD_ORACLE] {
        if let Some(mf) = method_folds(ctx, m)? {
            for k in 0..mf.folds.len() {
                let p = ctx.scores_path(m, k);
                hashes.insert(
                    format!("scores/{m}_fold{k}.csv"),
                    sha256_hex(&fs::read(&p)?),
                );
            }
            methods.push(mf);
        } else if m != METHOD_ORACLE {
            return Err(Error::Usage(format!(
                "no {m} score files under {}",
                ctx.path("scores").display()
            )));
        }
    }
    let report = build_report(&methods, serde_json::to_value(&ctx.cfg)?, hashes)?;
    write_json(&report, ctx.path("report.json"))?;
    let curves: Vec<_> = methods
        .iter()
        .map(|m| evaluate(&m.pooled()).map(|e| (m.name.clone(), e.curve)))
        .collect::<Result<_>>()?;
    let refs: Vec<(&str, &crate::metrics::RocCurve)> =
        curves.iter().map(|(n, c)| (n.as_str(), c)).collect();
    render_roc_svg(&refs, ctx.path("roc.svg"))?;
    for m in &report.methods {
        println!("report {}: pooled auc {:.4}", m.name, m.pooled_auc);
    }
    println!(
        "report: McNemar {} vs {} p = {:.4}",
        report.comparison.method_a, report.comparison.method_b, report.comparison.p
    );
    Ok(())
}
