//! Supervised dataset construction: response labeling, exclusion,
//! lowest-current deduplication, patch extraction and patient-level folds.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::StimRecord;
use crate::rng::stream;
use crate::volgrid::{Grid, Volume};

/// Improvement (percent) a record must exceed to count as a positive response.
pub const POSITIVE_THRESHOLD_PCT: f64 = 50.0;

/// Coordinates of the same patient closer than this (mm) are one site.
pub const SITE_EPSILON_MM: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Response {
    Positive,
    Null,
    Excluded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRecord {
    pub record: StimRecord,
    pub label: Response,
}

impl LabeledRecord {
    pub fn is_positive(&self) -> bool {
        self.label == Response::Positive
    }

    pub fn binary_label(&self) -> Option<u8> {
        match self.label {
            Response::Positive => Some(1),
            Response::Null => Some(0),
            Response::Excluded => None,
        }
    }
}

/// Pass effect excludes; otherwise improvement strictly above 50% is positive.
pub fn label_records(records: &[StimRecord]) -> Result<Vec<LabeledRecord>> {
    records
        .iter()
        .map(|r| {
            if !(0.0..=100.0).contains(&r.improvement_pct) {
                return Err(Error::Data(format!(
                    "improvement {} outside [0, 100] for patient {}",
                    r.improvement_pct, r.patient_id
                )));
            }
            let label = if r.pass_effect {
                Response::Excluded
            } else if r.improvement_pct > POSITIVE_THRESHOLD_PCT {
                Response::Positive
            } else {
                Response::Null
            };
            Ok(LabeledRecord {
                record: r.clone(),
                label,
            })
        })
        .collect()
}

fn close(a: &StimRecord, b: &StimRecord) -> bool {
    a.patient_id == b.patient_id
        && (0..3)
            .map(|k| (a.position[k] - b.position[k]).powi(2))
            .sum::<f64>()
            .sqrt()
            <= SITE_EPSILON_MM
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// One record per stimulation site. Sites are connected components of
/// same-patient records within [`SITE_EPSILON_MM`]; each keeps, among the
/// records with the site's best improvement, the one with the lowest
/// current (first in input order on ties). Output follows the order in
/// which sites first appear.
pub fn dedup_lowest_current(records: &[LabeledRecord]) -> Vec<LabeledRecord> {
    let n = records.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in i + 1..n {
            if close(&records[i].record, &records[j].record) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut best: Vec<Option<usize>> = vec![None; n];
    let mut order = Vec::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        match best[root] {
            None => {
                best[root] = Some(i);
                order.push(root);
            }
            Some(k) => {
                let (cur, cand) = (&records[k].record, &records[i].record);
                let better = cand.improvement_pct > cur.improvement_pct
                    || (cand.improvement_pct == cur.improvement_pct
                        && cand.current_ma < cur.current_ma);
                if better {
                    best[root] = Some(i);
                }
            }
        }
    }
    order
        .into_iter()
        .map(|root| records[best[root].unwrap()].clone())
        .collect()
}

/// Label, drop excluded records, then deduplicate per site.
pub fn prepare_records(records: &[StimRecord]) -> Result<Vec<LabeledRecord>> {
    let labeled: Vec<LabeledRecord> = label_records(records)?
        .into_iter()
        .filter(|r| r.label != Response::Excluded)
        .collect();
    Ok(dedup_lowest_current(&labeled))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelEncoding {
    /// Two channels: intensity and label codes scaled to {0, 1/3, 2/3, 1}.
    #[default]
    Scaled,
    /// Five channels: intensity and one indicator per tissue class.
    OneHot,
}

impl LabelEncoding {
    pub fn channels(self) -> usize {
        match self {
            LabelEncoding::Scaled => 2,
            LabelEncoding::OneHot => 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchMeta {
    pub patient_id: String,
    pub position: [f64; 3],
    pub current_ma: f64,
}

/// Cubic multi-channel patch, stored channel-major then x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub data: Vec<f32>,
    pub channels: usize,
    pub size: usize,
    pub label: u8,
    pub meta: PatchMeta,
}

impl Patch {
    pub fn voxels(&self) -> usize {
        self.size.pow(3)
    }

    pub fn at(&self, c: usize, x: usize, y: usize, z: usize) -> f32 {
        let s = self.size;
        self.data[c * s * s * s + x + s * (y + s * z)]
    }

    pub fn to_volume(&self) -> Volume {
        Volume::from_f32(
            Grid::isotropic([self.size; 3], 1.0),
            self.channels,
            self.data.clone(),
        )
        .expect("patch shape")
    }

    pub fn from_volume(vol: &Volume, label: u8, meta: PatchMeta) -> Result<Patch> {
        let d = vol.dims();
        if d[0] != d[1] || d[1] != d[2] {
            return Err(Error::Shape(format!(
                "patch volume must be cubic, got {d:?}"
            )));
        }
        let data = vol
            .as_f32()
            .ok_or_else(|| Error::Shape("patch volume must be float32".into()))?
            .to_vec();
        Ok(Patch {
            data,
            channels: vol.channels(),
            size: d[0],
            label,
            meta,
        })
    }
}

/// Extract an `size`^3 patch centered on the voxel nearest `center`.
/// `intensity` should already be normalized; voxels outside the volume are 0.
pub fn extract_patch(
    intensity: &Volume,
    labels: &Volume,
    center: [f64; 3],
    size: usize,
    encoding: LabelEncoding,
) -> Result<Patch> {
    if size.is_multiple_of(2) || size == 0 {
        return Err(Error::Config(format!("patch size must be odd, got {size}")));
    }
    if !intensity.same_shape(labels) {
        return Err(Error::Shape(
            "intensity and label volumes differ in shape".into(),
        ));
    }
    let grid = intensity.grid();
    let c = grid.nearest_voxel(center);
    let half = (size / 2) as i64;
    let s3 = size * size * size;
    let channels = encoding.channels();
    let mut data = vec![0.0f32; channels * s3];
    for pz in 0..size {
        for py in 0..size {
            for px in 0..size {
                let v = [
                    c[0] + px as i64 - half,
                    c[1] + py as i64 - half,
                    c[2] + pz as i64 - half,
                ];
                if !grid.contains(v) {
                    continue;
                }
                let src = grid.index(v[0] as usize, v[1] as usize, v[2] as usize);
                let dst = px + size * (py + size * pz);
                data[dst] = intensity.value(src) as f32;
                let code = labels.value(src).clamp(0.0, 3.0) as usize;
                match encoding {
                    LabelEncoding::Scaled => data[s3 + dst] = code as f32 / 3.0,
                    LabelEncoding::OneHot => data[(1 + code) * s3 + dst] = 1.0,
                }
            }
        }
    }
    Ok(Patch {
        data,
        channels,
        size,
        label: 0,
        meta: PatchMeta {
            patient_id: String::new(),
            position: center,
            current_ma: 0.0,
        },
    })
}

/// Patient-level split for one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<Fold>,
}

/// Shuffle patients with `seed`, cut `k` test folds whose sizes differ by
/// at most one (larger folds first), and hold out `ceil(val_frac * m)` of
/// each fold's `m` remaining patients for validation.
pub fn plan_folds(patient_ids: &[String], k: usize, val_frac: f64, seed: u64) -> Result<FoldPlan> {
    if k == 0 || patient_ids.len() < k {
        return Err(Error::Config(format!(
            "{} patients cannot fill {k} folds",
            patient_ids.len()
        )));
    }
    if !(0.0..1.0).contains(&val_frac) {
        return Err(Error::Config(format!(
            "validation fraction {val_frac} not in [0, 1)"
        )));
    }
    let mut ids: Vec<String> = patient_ids.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() != patient_ids.len() {
        return Err(Error::Config("duplicate patient ids".into()));
    }
    ids.shuffle(&mut stream(seed, 0));
    let n = ids.len();
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let test: Vec<String> = ids[start..start + len].to_vec();
        let mut rest: Vec<String> = ids[..start]
            .iter()
            .chain(&ids[start + len..])
            .cloned()
            .collect();
        rest.shuffle(&mut stream(seed, 1 + f as u64));
        let n_val = ((val_frac * rest.len() as f64) - 1e-9).ceil().max(0.0) as usize;
        let n_val = n_val.min(rest.len().saturating_sub(1));
        let validation = rest[..n_val].to_vec();
        let train = rest[n_val..].to_vec();
        folds.push(Fold {
            train,
            validation,
            test,
        });
        start += len;
    }
    Ok(FoldPlan { k, seed, folds })
}

pub const DATASET_COLUMNS: [&str; 7] = [
    "patient_id",
    "x_mm",
    "y_mm",
    "z_mm",
    "current_ma",
    "label",
    "patch_file",
];

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub patient_id: String,
    pub position: [f64; 3],
    pub current_ma: f64,
    pub label: u8,
    pub patch_file: String,
}

pub fn write_dataset_manifest(entries: &[DatasetEntry], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(DATASET_COLUMNS)?;
    for e in entries {
        w.write_record([
            e.patient_id.clone(),
            e.position[0].to_string(),
            e.position[1].to_string(),
            e.position[2].to_string(),
            e.current_ma.to_string(),
            e.label.to_string(),
            e.patch_file.clone(),
        ])?;
    }
    fs::write(path, w.into_inner().map_err(|e| Error::Io(e.into_error()))?)?;
    Ok(())
}

pub fn read_dataset_manifest(path: impl AsRef<Path>) -> Result<Vec<DatasetEntry>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::load(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != DATASET_COLUMNS {
        return Err(Error::load(path, format!("unexpected header {header:?}")));
    }
    let num = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| Error::load(path, format!("bad number {s:?}")))
    };
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let label = match &row[5] {
            "0" => 0,
            "1" => 1,
            other => return Err(Error::load(path, format!("bad label {other:?}"))),
        };
        out.push(DatasetEntry {
            patient_id: row[0].to_string(),
            position: [num(&row[1])?, num(&row[2])?, num(&row[3])?],
            current_ma: num(&row[4])?,
            label,
            patch_file: row[6].to_string(),
        });
    }
    Ok(out)
}
