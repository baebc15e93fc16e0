//! Cross-validated comparison of the atlas baseline, the patch CNN and the
//! phantom's Bayes oracle, kept in memory; the CLI persists each stage.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atlasmap::{
    build_efficacy_map, project_map, score_coordinate, simulated_registration, EfficacyMap,
    SpatialTransform,
};
use crate::error::{Error, Result};
use crate::patchset::{
    extract_patch, plan_folds, prepare_records, Fold, FoldPlan, LabelEncoding, LabeledRecord,
    Patch, PatchMeta,
};
use crate::phantom::{response_probability, Cohort, PhantomConfig, Subject};
use crate::rng::child_seed;
use crate::stimkernel::RadiusTable;
use crate::tinynn::{
    predict_patches, train, History, Model, ModelConfig, TrainConfig, TrainOutcome,
};
use crate::volgrid::Volume;

// child-seed tags under the master seed
const TAG_FOLDS: u64 = 0xF01D;
const TAG_REGISTRATION: u64 = 0x4E6;
const TAG_INIT: u64 = 0x1417;
const TAG_TRAIN: u64 = 0x7A1;

pub const METHOD_BASELINE: &str = "baseline";
pub const METHOD_CNN: &str = "cnn";
pub const METHOD_ORACLE: &str = "oracle";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FoldConfig {
    pub k: usize,
    pub val_frac: f64,
}

impl Default for FoldConfig {
    fn default() -> Self {
        Self {
            k: 5,
            val_frac: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchConfig {
    pub size: usize,
    pub encoding: LabelEncoding,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            size: 51,
            encoding: LabelEncoding::Scaled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    /// Amplitude of the simulated registration error (mm).
    pub registration_error_mm: f64,
    pub registration_smoothness_mm: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            registration_error_mm: 2.0,
            registration_smoothness_mm: 16.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapConfig {
    pub stride: usize,
    /// Restrict the sliding map to non-background voxels.
    pub roi: bool,
    pub batch_size: usize,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            stride: 2,
            roi: true,
            batch_size: 16,
        }
    }
}

/// Everything one experiment needs; `seed` overrides the phantom's seed and
/// derives every other stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub phantom: PhantomConfig,
    pub folds: FoldConfig,
    pub patch: PatchConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub baseline: BaselineConfig,
    pub map: MapConfig,
    pub predict_batch: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            phantom: PhantomConfig::default(),
            folds: FoldConfig::default(),
            patch: PatchConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            baseline: BaselineConfig::default(),
            map: MapConfig::default(),
            predict_batch: 16,
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale comparison: 40 subjects on 64^3 grids, 27^3 patches,
    /// 20 stimulation points per subject, 2 mm registration error, 5 folds.
    pub fn acceptance() -> Self {
        let mut phantom = PhantomConfig::for_dims([64, 64, 64]);
        phantom.subjects = 40;
        Self {
            seed: 42,
            phantom,
            patch: PatchConfig {
                size: 27,
                encoding: LabelEncoding::Scaled,
            },
            ..Self::default()
        }
    }

    /// Seconds-scale end-to-end run: 8 subjects on 32^3 grids, 9^3 patches,
    /// the reduced model and 2 folds of 3 epochs.
    pub fn smoke() -> Self {
        let mut phantom = PhantomConfig::for_dims([32, 32, 32]);
        phantom.subjects = 8;
        Self {
            seed: 42,
            phantom,
            folds: FoldConfig {
                k: 2,
                val_frac: 0.1,
            },
            patch: PatchConfig {
                size: 9,
                encoding: LabelEncoding::Scaled,
            },
            model: ModelConfig::reduced(),
            train: TrainConfig {
                lr: 1e-3,
                batch_size: 8,
                max_epochs: 3,
                ..TrainConfig::default()
            },
            map: MapConfig {
                stride: 4,
                roi: true,
                batch_size: 16,
            },
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "default" => Some(Self::default()),
            "acceptance" => Some(Self::acceptance()),
            "smoke" => Some(Self::smoke()),
            _ => None,
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::load(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::load(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom_config().validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.patch.size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "patch size must be odd, got {}",
                self.patch.size
            )));
        }
        if self.model.input_channels != self.patch.encoding.channels() {
            return Err(Error::Config(format!(
                "model expects {} input channels, patch encoding yields {}",
                self.model.input_channels,
                self.patch.encoding.channels()
            )));
        }
        if self.map.stride == 0 {
            return Err(Error::Config("map stride must be >= 1".into()));
        }
        if !(self.baseline.registration_error_mm >= 0.0) {
            return Err(Error::Config("registration error must be >= 0".into()));
        }
        Ok(())
    }

    pub fn phantom_config(&self) -> PhantomConfig {
        PhantomConfig {
            master_seed: self.seed,
            ..self.phantom.clone()
        }
    }

    pub fn fold_seed(&self) -> u64 {
        child_seed(self.seed, TAG_FOLDS)
    }

    /// Training config for one fold, with its own shuffle/dropout stream.
    pub fn train_config(&self, fold: usize) -> TrainConfig {
        TrainConfig {
            seed: child_seed(child_seed(self.seed, TAG_TRAIN), fold as u64),
            ..self.train.clone()
        }
    }

    pub fn init_seed(&self, fold: usize) -> u64 {
        child_seed(child_seed(self.seed, TAG_INIT), fold as u64)
    }
}

/// One scored evaluation coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub patient_id: String,
    pub position: [f64; 3],
    pub current_ma: f64,
    pub score: f64,
    pub label: u8,
}

impl ScoreRow {
    fn key(&self) -> (String, [u64; 3], u64) {
        (
            self.patient_id.clone(),
            self.position.map(f64::to_bits),
            self.current_ma.to_bits(),
        )
    }
}

pub const SCORE_COLUMNS: [&str; 7] = [
    "patient_id",
    "x_mm",
    "y_mm",
    "z_mm",
    "current_ma",
    "score",
    "label",
];

pub fn scores_csv_bytes(rows: &[ScoreRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SCORE_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.patient_id.clone(),
            r.position[0].to_string(),
            r.position[1].to_string(),
            r.position[2].to_string(),
            r.current_ma.to_string(),
            r.score.to_string(),
            r.label.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn write_scores_csv(rows: &[ScoreRow], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, scores_csv_bytes(rows)?)?;
    Ok(())
}

pub fn read_scores_csv(path: impl AsRef<Path>) -> Result<Vec<ScoreRow>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::load(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let header = rdr.headers().map_err(|e| Error::load(path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != SCORE_COLUMNS {
        return Err(Error::load(path, format!("unexpected header {header:?}")));
    }
    let num = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| Error::load(path, format!("bad number {s:?}")))
    };
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::load(path, e))?;
        let label = match &row[6] {
            "0" => 0,
            "1" => 1,
            other => return Err(Error::load(path, format!("bad label {other:?}"))),
        };
        out.push(ScoreRow {
            patient_id: row[0].to_string(),
            position: [num(&row[1])?, num(&row[2])?, num(&row[3])?],
            current_ma: num(&row[4])?,
            score: num(&row[5])?,
            label,
        });
    }
    Ok(out)
}

/// Reorder `b` to follow `a` row for row; both must cover the same
/// coordinates with the same labels.
pub fn pair_rows(a: &[ScoreRow], b: &[ScoreRow]) -> Result<Vec<(ScoreRow, ScoreRow)>> {
    if a.len() != b.len() {
        return Err(Error::Pairing(format!(
            "{} rows vs {} rows",
            a.len(),
            b.len()
        )));
    }
    let mut index: HashMap<_, Vec<&ScoreRow>> = HashMap::new();
    for r in b {
        index.entry(r.key()).or_default().push(r);
    }
    for v in index.values_mut() {
        v.reverse();
    }
    a.iter()
        .map(|ra| {
            let rb = index
                .get_mut(&ra.key())
                .and_then(|v| v.pop())
                .ok_or_else(|| {
                    Error::Pairing(format!(
                        "no partner for {} at {:?}",
                        ra.patient_id, ra.position
                    ))
                })?;
            if rb.label != ra.label {
                return Err(Error::Pairing(format!(
                    "labels disagree for {} at {:?}",
                    ra.patient_id, ra.position
                )));
            }
            Ok((ra.clone(), rb.clone()))
        })
        .collect()
}

/// Evaluation records per subject: labeled, pass effects dropped, one per site.
pub fn evaluation_records(cohort: &Cohort) -> Result<HashMap<String, Vec<LabeledRecord>>> {
    cohort
        .subjects
        .iter()
        .map(|s| Ok((s.id.clone(), prepare_records(&s.records)?)))
        .collect()
}

pub fn fold_plan(cfg: &ExperimentConfig, cohort: &Cohort) -> Result<FoldPlan> {
    let ids: Vec<String> = cohort.subjects.iter().map(|s| s.id.clone()).collect();
    plan_folds(&ids, cfg.folds.k, cfg.folds.val_frac, cfg.fold_seed())
}

/// Estimated subject-to-atlas transform per subject: the true pull-back
/// warp composed with a smooth registration error.
pub fn registrations(cfg: &ExperimentConfig, cohort: &Cohort) -> HashMap<String, SpatialTransform> {
    let grid = cohort.template.intensity.grid();
    let base = child_seed(cfg.seed, TAG_REGISTRATION);
    cohort
        .subjects
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let t = simulated_registration(
                &SpatialTransform::Warp(s.warp.clone()),
                cfg.baseline.registration_error_mm,
                cfg.baseline.registration_smoothness_mm,
                child_seed(base, i as u64),
                grid,
            );
            (s.id.clone(), t)
        })
        .collect()
}

fn rows_for<'a>(
    ids: &'a [String],
    records: &'a HashMap<String, Vec<LabeledRecord>>,
) -> impl Iterator<Item = &'a LabeledRecord> {
    ids.iter()
        .flat_map(move |id| records.get(id).map(|v| v.as_slice()).unwrap_or(&[]))
}

fn row(r: &LabeledRecord, score: f64) -> ScoreRow {
    ScoreRow {
        patient_id: r.record.patient_id.clone(),
        position: r.record.position,
        current_ma: r.record.current_ma,
        score,
        label: r.binary_label().expect("evaluation records are binary"),
    }
}

/// Atlas map from the positive records of a fold's training and
/// validation patients.
pub fn fold_atlas(
    cohort: &Cohort,
    fold: &Fold,
    records: &HashMap<String, Vec<LabeledRecord>>,
    regs: &HashMap<String, SpatialTransform>,
) -> Result<EfficacyMap> {
    let ids: Vec<String> = fold.train.iter().chain(&fold.validation).cloned().collect();
    let positives: Vec<_> = rows_for(&ids, records)
        .filter(|r| r.is_positive())
        .map(|r| r.record.clone())
        .collect();
    build_efficacy_map(
        &positives,
        regs,
        cohort.template.intensity.grid(),
        &RadiusTable::default(),
    )
}

/// Project the fold's atlas into each test subject and score its records.
pub fn baseline_scores(
    cohort: &Cohort,
    fold: &Fold,
    atlas: &EfficacyMap,
    records: &HashMap<String, Vec<LabeledRecord>>,
    regs: &HashMap<String, SpatialTransform>,
) -> Result<Vec<ScoreRow>> {
    let table = RadiusTable::default();
    let per_subject: Vec<Vec<ScoreRow>> = fold
        .test
        .par_iter()
        .map(|id| -> Result<Vec<ScoreRow>> {
            let subject = subject(cohort, id)?;
            let t = regs
                .get(id)
                .ok_or_else(|| Error::MissingTransform(id.clone()))?;
            let projected = project_map(atlas, t, subject.intensity.grid())?;
            records
                .get(id)
                .map(|v| v.as_slice())
                .unwrap_or(&[])
                .iter()
                .map(|r| {
                    let s = score_coordinate(
                        &projected,
                        r.record.position,
                        r.record.current_ma,
                        &table,
                    )?;
                    Ok(row(r, s))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_subject.into_iter().flatten().collect())
}

/// Ground-truth response probability of every test record.
pub fn oracle_scores(
    cohort: &Cohort,
    fold: &Fold,
    records: &HashMap<String, Vec<LabeledRecord>>,
) -> Result<Vec<ScoreRow>> {
    let table = RadiusTable::default();
    let mut out = Vec::new();
    for id in &fold.test {
        let s = subject(cohort, id)?;
        for r in records.get(id).map(|v| v.as_slice()).unwrap_or(&[]) {
            let p = response_probability(
                &s.efficacy,
                &cohort.config,
                &table,
                r.record.position,
                r.record.current_ma,
            );
            out.push(row(r, p));
        }
    }
    Ok(out)
}

pub fn subject<'a>(cohort: &'a Cohort, id: &str) -> Result<&'a Subject> {
    cohort
        .subject(id)
        .ok_or_else(|| Error::Data(format!("unknown subject {id}")))
}

/// Intensity z-scored over the non-background voxels.
pub fn normalized_intensity(subject: &Subject) -> Result<Volume> {
    subject.intensity.z_normalize(Some(&subject.labels))
}

/// Labeled patches for every evaluation record of the given subjects, in
/// subject then record order.
pub fn patches_for(
    cohort: &Cohort,
    ids: &[String],
    records: &HashMap<String, Vec<LabeledRecord>>,
    patch: &PatchConfig,
) -> Result<Vec<Patch>> {
    let per_subject: Vec<Vec<Patch>> = ids
        .par_iter()
        .map(|id| -> Result<Vec<Patch>> {
            let s = subject(cohort, id)?;
            let norm = normalized_intensity(s)?;
            records
                .get(id)
                .map(|v| v.as_slice())
                .unwrap_or(&[])
                .iter()
                .map(|r| {
                    let mut p = extract_patch(
                        &norm,
                        &s.labels,
                        r.record.position,
                        patch.size,
                        patch.encoding,
                    )?;
                    p.label = r.binary_label().expect("evaluation records are binary");
                    p.meta = PatchMeta {
                        patient_id: id.clone(),
                        position: r.record.position,
                        current_ma: r.record.current_ma,
                    };
                    Ok(p)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_subject.into_iter().flatten().collect())
}

/// Train a fresh model on one fold's patches.
pub fn train_fold(
    cfg: &ExperimentConfig,
    fold_index: usize,
    train_set: &[Patch],
    val_set: &[Patch],
) -> Result<TrainOutcome> {
    let model = Model::<f32>::new(cfg.model.clone(), cfg.init_seed(fold_index))?;
    let tr: Vec<&Patch> = train_set.iter().collect();
    let va: Vec<&Patch> = val_set.iter().collect();
    info!(
        "fold {fold_index}: training on {} patches, validating on {}",
        tr.len(),
        va.len()
    );
    train(model, &tr, &va, &cfg.train_config(fold_index))
}

/// CNN probabilities for test patches, as score rows.
pub fn cnn_scores(model: &mut Model<f32>, test: &[Patch], batch: usize) -> Result<Vec<ScoreRow>> {
    let refs: Vec<&Patch> = test.iter().collect();
    let probs = predict_patches(model, &refs, batch)?;
    Ok(test
        .iter()
        .zip(probs)
        .map(|(p, s)| ScoreRow {
            patient_id: p.meta.patient_id.clone(),
            position: p.meta.position,
            current_ma: p.meta.current_ma,
            score: s,
            label: p.label,
        })
        .collect())
}

/// Per-fold scores of all three methods.
#[derive(Debug, Clone, Default)]
pub struct FoldScores {
    pub baseline: Vec<ScoreRow>,
    pub cnn: Vec<ScoreRow>,
    pub oracle: Vec<ScoreRow>,
    /// Training history of the fold's CNN, when one was trained.
    pub history: Option<History>,
}

/// Whole comparison in memory: cohort, folds, and per fold the baseline,
/// the trained CNN (best validation checkpoint) and the oracle.
pub fn run_comparison(cfg: &ExperimentConfig, with_cnn: bool) -> Result<Vec<FoldScores>> {
    cfg.validate()?;
    let cohort = Cohort::generate(&cfg.phantom_config())?;
    let records = evaluation_records(&cohort)?;
    let plan = fold_plan(cfg, &cohort)?;
    let regs = registrations(cfg, &cohort);
    let mut out = Vec::with_capacity(plan.folds.len());
    for (k, fold) in plan.folds.iter().enumerate() {
        let atlas = fold_atlas(&cohort, fold, &records, &regs)?;
        let mut scores = FoldScores {
            baseline: baseline_scores(&cohort, fold, &atlas, &records, &regs)?,
            oracle: oracle_scores(&cohort, fold, &records)?,
            cnn: Vec::new(),
            history: None,
        };
        if with_cnn {
            let tr = patches_for(&cohort, &fold.train, &records, &cfg.patch)?;
            let va = patches_for(&cohort, &fold.validation, &records, &cfg.patch)?;
            let mut outcome = train_fold(cfg, k, &tr, &va)?;
            drop((tr, va));
            let te = patches_for(&cohort, &fold.test, &records, &cfg.patch)?;
            scores.cnn = cnn_scores(&mut outcome.best.model, &te, cfg.predict_batch)?;
            scores.history = Some(outcome.best.history);
        }
        out.push(scores);
    }
    Ok(out)
}
