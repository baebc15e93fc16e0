//! Registration-based baseline: a population efficacy map built in atlas
//! space from positive-response spheres, projected back into a test
//! subject and read out as the probability mass inside each test sphere.

use std::cmp::Ordering;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::phantom::{displacement_field, StimRecord, WarpField};
use crate::stimkernel::{rasterize_sphere, RadiusTable};
use crate::volgrid::{Affine, Grid, Volume};

const INVERSE_MAX_ITER: usize = 50;
const INVERSE_TOL_MM: f64 = 1e-6;

/// Maps subject space to atlas space (`forward`) and back (`inverse`).
#[derive(Debug, Clone, PartialEq)]
pub enum SpatialTransform {
    Identity,
    Affine {
        matrix: Affine,
        inverse: Affine,
    },
    /// `x -> x + w(x)`, inverted by fixed-point iteration.
    Warp(WarpField),
    /// Applied left to right by `forward`, right to left by `inverse`.
    Chain(Vec<SpatialTransform>),
}

impl SpatialTransform {
    pub fn affine(matrix: Affine) -> Result<Self> {
        // reuse the grid's invertibility check
        let g = Grid::new([1, 1, 1], [1.0; 3], matrix)?;
        Ok(SpatialTransform::Affine {
            matrix,
            inverse: *g.inverse_affine(),
        })
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self::affine([
            [1.0, 0.0, 0.0, t[0]],
            [0.0, 1.0, 0.0, t[1]],
            [0.0, 0.0, 1.0, t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ])
        .expect("translation is invertible")
    }

    pub fn forward(&self, p: [f64; 3]) -> [f64; 3] {
        match self {
            SpatialTransform::Identity => p,
            SpatialTransform::Affine { matrix, .. } => apply(matrix, p),
            SpatialTransform::Warp(w) => w.map_point(p),
            SpatialTransform::Chain(ts) => ts.iter().fold(p, |q, t| t.forward(q)),
        }
    }

    pub fn inverse(&self, p: [f64; 3]) -> [f64; 3] {
        match self {
            SpatialTransform::Identity => p,
            SpatialTransform::Affine { inverse, .. } => apply(inverse, p),
            SpatialTransform::Warp(w) => w.invert_point(p, INVERSE_MAX_ITER, INVERSE_TOL_MM),
            SpatialTransform::Chain(ts) => ts.iter().rev().fold(p, |q, t| t.inverse(q)),
        }
    }
}

fn apply(m: &Affine, p: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (r, o) in out.iter_mut().enumerate() {
        *o = m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2] + m[r][3];
    }
    out
}

/// Stand-in for an imperfect non-rigid registration: the true mapping
/// followed by a smooth random displacement of amplitude `error_mm` in atlas
/// space. Zero amplitude returns the true transform unchanged.
pub fn simulated_registration(
    truth: &SpatialTransform,
    error_mm: f64,
    smoothness_mm: f64,
    seed: u64,
    atlas_grid: &Grid,
) -> SpatialTransform {
    if error_mm == 0.0 {
        return truth.clone();
    }
    let err = displacement_field(atlas_grid, error_mm, smoothness_mm, seed);
    SpatialTransform::Chain(vec![truth.clone(), SpatialTransform::Warp(err)])
}

/// Average of positive-response sphere PDFs on the atlas grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EfficacyMap {
    pub volume: Volume,
    pub count: usize,
}

impl EfficacyMap {
    pub fn total_mass(&self) -> f64 {
        self.volume
            .as_f32()
            .unwrap()
            .iter()
            .map(|&v| v as f64)
            .sum()
    }
}

fn record_order(a: &StimRecord, b: &StimRecord) -> Ordering {
    a.patient_id
        .cmp(&b.patient_id)
        .then_with(|| {
            a.position
                .iter()
                .zip(&b.position)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
        .then_with(|| a.current_ma.total_cmp(&b.current_ma))
        .then_with(|| a.improvement_pct.total_cmp(&b.improvement_pct))
}

/// Map each positive record into atlas space through its patient's
/// transform, rasterize its stimulation sphere, and average the unit-mass
/// PDFs. Records are summed in sorted order so the result does not depend on
/// input order.
pub fn build_efficacy_map(
    positives: &[StimRecord],
    transforms: &HashMap<String, SpatialTransform>,
    atlas_grid: &Grid,
    table: &RadiusTable,
) -> Result<EfficacyMap> {
    let mut sorted: Vec<&StimRecord> = positives.iter().collect();
    sorted.sort_by(|a, b| record_order(a, b));
    let mut acc = vec![0.0f64; atlas_grid.len()];
    for r in &sorted {
        let t = transforms
            .get(&r.patient_id)
            .ok_or_else(|| Error::MissingTransform(r.patient_id.clone()))?;
        let center = t.forward(r.position);
        let radius = table.radius_for_current(r.current_ma)?;
        let sphere = rasterize_sphere(atlas_grid, center, radius)?;
        let m = sphere.mass_per_voxel();
        for &v in &sphere.voxels {
            acc[v] += m;
        }
    }
    let n = sorted.len();
    let data = if n == 0 {
        vec![0.0f32; acc.len()]
    } else {
        acc.iter().map(|&v| (v / n as f64) as f32).collect()
    };
    Ok(EfficacyMap {
        volume: Volume::from_f32(atlas_grid.clone(), 1, data)?,
        count: n,
    })
}

/// Pull the atlas map into a subject grid (`subject(v) = map(T(v))`,
/// trilinear), then rescale to unit total mass.
pub fn project_map(
    map: &EfficacyMap,
    transform: &SpatialTransform,
    subject_grid: &Grid,
) -> Result<Volume> {
    let n = subject_grid.len();
    let mut vals = vec![0.0f64; n];
    for (i, v) in vals.iter_mut().enumerate() {
        let a = transform.forward(subject_grid.voxel_center(i));
        *v = map.volume.trilinear_sample(a, 0);
    }
    let total: f64 = vals.iter().sum();
    let data: Vec<f32> = if total > 0.0 {
        vals.iter().map(|v| (v / total) as f32).collect()
    } else {
        vec![0.0; n]
    };
    Volume::from_f32(subject_grid.clone(), 1, data)
}

/// Cumulative map probability inside the stimulation sphere of a test
/// coordinate.
pub fn score_coordinate(
    subject_map: &Volume,
    coord: [f64; 3],
    current_ma: f64,
    table: &RadiusTable,
) -> Result<f64> {
    let radius = table.radius_for_current(current_ma)?;
    let sphere = rasterize_sphere(subject_map.grid(), coord, radius)?;
    Ok(sphere.voxels.iter().map(|&v| subject_map.value(v)).sum())
}
