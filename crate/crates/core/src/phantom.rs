//! Synthetic cohorts: template anatomy, per-subject smooth deformations, a
//! hidden efficacy field and simulated intraoperative stimulation records.
//!
//! Tissue labels follow the four-class scheme used for anatomical context:
//! 0 background/CSF, 1 cortical gray matter, 2 deep gray matter, 3 white
//! matter. The deep-gray "target" nuclei carry a Gaussian efficacy bump,
//! offset from the nucleus center and mirrored across hemispheres.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{child_seed, stream};
use crate::stimkernel::RadiusTable;
use crate::volgrid::{Grid, Volume, VoxelData};

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_CORTICAL_GM: u8 = 1;
pub const LABEL_DEEP_GM: u8 = 2;
pub const LABEL_WM: u8 = 3;

// child-stream tags inside one subject
const TAG_WARP: u64 = 1;
const TAG_BIAS: u64 = 2;
const TAG_NOISE: u64 = 3;
const TAG_SURGERY: u64 = 4;
const TAG_TEMPLATE: u64 = 0xA11A5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.normalized_sq(p) <= 1.0
    }

    fn normalized_sq(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum()
    }

    pub fn volume(&self) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI * self.radii[0] * self.radii[1] * self.radii[2]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub voxel_size_mm: f64,
    /// Intensity mean per class: background/CSF, cortical GM, deep GM, WM.
    pub class_means: [f64; 4],
    pub class_sigmas: [f64; 4],
    pub brain: Ellipsoid,
    pub cortex_thickness_mm: f64,
    pub ventricles: Vec<Ellipsoid>,
    /// Deep gray-matter nuclei; the first two are the bilateral targets.
    pub nuclei: Vec<Ellipsoid>,
    /// Efficacy bump offset from the left target center; mirrored in x for
    /// the right target.
    pub bump_offset_mm: [f64; 3],
    pub p_max: f64,
    pub p_floor: f64,
    pub sigma_eff_mm: f64,
    pub warp_amplitude_mm: f64,
    pub warp_smoothness_mm: f64,
    pub noise_sigma: f64,
    pub bias_amplitude: f64,
    pub bias_smoothness_mm: f64,
    pub tracks_per_subject: usize,
    pub samples_per_track: usize,
    pub track_jitter_mm: f64,
    /// Half-length of the sampled stretch of each track.
    pub track_half_length_mm: f64,
    pub current_set_ma: Vec<f64>,
    pub pass_effect_prob: f64,
    /// Couples response to current: the distance to the bump shrinks by
    /// `coupling * radius(current)`. Zero leaves current without effect.
    pub current_coupling: f64,
    pub subjects: usize,
    pub master_seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self::for_dims([96, 96, 96])
    }
}

impl PhantomConfig {
    /// Default anatomy laid out for a grid of the given size (1 mm voxels).
    /// Distances scale with the smallest axis relative to 64 voxels; the
    /// nuclei and efficacy bump keep their physical size.
    pub fn for_dims(dims: [usize; 3]) -> Self {
        let c = [
            (dims[0] as f64 - 1.0) / 2.0,
            (dims[1] as f64 - 1.0) / 2.0,
            (dims[2] as f64 - 1.0) / 2.0,
        ];
        let k = *dims.iter().min().unwrap() as f64 / 64.0;
        let at = |dx: f64, dy: f64, dz: f64| [c[0] + dx, c[1] + dy, c[2] + dz];
        Self {
            dims,
            voxel_size_mm: 1.0,
            class_means: [20.0, 60.0, 80.0, 110.0],
            class_sigmas: [3.0, 4.0, 4.0, 4.0],
            brain: Ellipsoid {
                center: c,
                radii: [27.0 * k, 29.0 * k, 25.0 * k],
            },
            cortex_thickness_mm: 3.0 * k,
            ventricles: vec![
                Ellipsoid {
                    center: at(-3.5, 2.0, 6.0),
                    radii: [2.0, 7.0, 3.5],
                },
                Ellipsoid {
                    center: at(3.5, 2.0, 6.0),
                    radii: [2.0, 7.0, 3.5],
                },
            ],
            nuclei: vec![
                Ellipsoid {
                    center: at(-10.0, 0.0, -4.0),
                    radii: [3.0, 4.5, 2.5],
                },
                Ellipsoid {
                    center: at(10.0, 0.0, -4.0),
                    radii: [3.0, 4.5, 2.5],
                },
                Ellipsoid {
                    center: at(-8.0, 4.0, 4.0),
                    radii: [4.0, 5.5, 3.5],
                },
                Ellipsoid {
                    center: at(8.0, 4.0, 4.0),
                    radii: [4.0, 5.5, 3.5],
                },
            ],
            bump_offset_mm: [-1.5, -1.5, -2.0],
            p_max: 0.9,
            p_floor: 0.05,
            sigma_eff_mm: 2.5,
            warp_amplitude_mm: 3.0,
            warp_smoothness_mm: 16.0,
            noise_sigma: 3.0,
            bias_amplitude: 0.05,
            bias_smoothness_mm: 32.0,
            tracks_per_subject: 4,
            samples_per_track: 5,
            track_jitter_mm: 4.0,
            track_half_length_mm: 7.0,
            current_set_ma: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            pass_effect_prob: 0.05,
            current_coupling: 0.0,
            subjects: 40,
            master_seed: 42,
        }
    }

    pub fn grid(&self) -> Grid {
        Grid::isotropic(self.dims, self.voxel_size_mm)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.dims.iter().any(|&d| d < 32) {
            return bad("phantom dims must be at least 32 per axis");
        }
        if !(self.voxel_size_mm > 0.0) {
            return bad("voxel size must be positive");
        }
        if !(0.0 < self.p_floor && self.p_floor < self.p_max && self.p_max <= 1.0) {
            return bad("need 0 < p_floor < p_max <= 1");
        }
        if !(self.sigma_eff_mm > 0.0) {
            return bad("sigma_eff must be positive");
        }
        if !(self.warp_amplitude_mm >= 0.0) || !(self.warp_smoothness_mm > 0.0) {
            return bad("warp amplitude must be >= 0 and smoothness > 0");
        }
        if !(self.bias_amplitude >= 0.0 && self.bias_amplitude < 1.0) {
            return bad("bias amplitude must lie in [0, 1)");
        }
        if self.nuclei.len() < 2 {
            return bad("need at least two (bilateral target) nuclei");
        }
        if self.current_set_ma.is_empty() || self.current_set_ma.iter().any(|&c| !(c > 0.0)) {
            return bad("current set must be non-empty and positive");
        }
        if !(0.0..=1.0).contains(&self.pass_effect_prob) {
            return bad("pass-effect probability must lie in [0, 1]");
        }
        if self.subjects == 0 {
            return bad("cohort needs at least one subject");
        }
        let extent: Vec<f64> = self
            .dims
            .iter()
            .map(|&d| (d as f64 - 1.0) * self.voxel_size_mm)
            .collect();
        for (i, n) in self.nuclei.iter().enumerate() {
            for a in 0..3 {
                if n.center[a] - n.radii[a] < 0.0 || n.center[a] + n.radii[a] > extent[a] {
                    return Err(Error::Config(format!(
                        "nucleus {i} (center {:?}, radii {:?}) extends outside the grid",
                        n.center, n.radii
                    )));
                }
            }
        }
        Ok(())
    }

    fn bump_centers(&self, targets: &[[f64; 3]]) -> Vec<[f64; 3]> {
        let mid = self.brain.center[0];
        targets
            .iter()
            .map(|t| {
                let sx = if t[0] > mid { -1.0 } else { 1.0 };
                [
                    t[0] + sx * self.bump_offset_mm[0],
                    t[1] + self.bump_offset_mm[1],
                    t[2] + self.bump_offset_mm[2],
                ]
            })
            .collect()
    }
}

/// Ground-truth efficacy field: a Gaussian bump around each target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficacyParams {
    pub bump_centers: Vec<[f64; 3]>,
    pub p_max: f64,
    pub p_floor: f64,
    pub sigma_mm: f64,
}

impl EfficacyParams {
    pub fn distance(&self, p: [f64; 3]) -> f64 {
        self.bump_centers
            .iter()
            .map(|c| dist(*c, p))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn probability_at_distance(&self, d: f64) -> f64 {
        self.p_floor
            + (self.p_max - self.p_floor) * (-(d * d) / (2.0 * self.sigma_mm * self.sigma_mm)).exp()
    }

    pub fn probability(&self, p: [f64; 3]) -> f64 {
        self.probability_at_distance(self.distance(p))
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Dense displacement field in mm, three channels (x, y, z components).
#[derive(Debug, Clone, PartialEq)]
pub struct WarpField(Volume);

impl WarpField {
    pub fn new(volume: Volume) -> Result<Self> {
        if volume.channels() != 3 || volume.as_f32().is_none() {
            return Err(Error::Shape(
                "warp field must be a 3-channel float32 volume".into(),
            ));
        }
        Ok(Self(volume))
    }

    pub fn zeros(grid: Grid) -> Self {
        Self(Volume::zeros(grid, 3))
    }

    pub fn volume(&self) -> &Volume {
        &self.0
    }

    pub fn grid(&self) -> &Grid {
        self.0.grid()
    }

    /// Displacement at voxel index (spatial).
    pub fn at_index(&self, index: usize) -> [f64; 3] {
        let n = self.0.grid().len();
        [
            self.0.value(index),
            self.0.value(index + n),
            self.0.value(index + 2 * n),
        ]
    }

    /// Trilinearly interpolated displacement at a world point (0 outside).
    pub fn displacement(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.0.world_to_voxel(p);
        [
            self.0.trilinear_at_voxel(v, 0),
            self.0.trilinear_at_voxel(v, 1),
            self.0.trilinear_at_voxel(v, 2),
        ]
    }

    /// `p + w(p)`: the point this field pulls `p` from.
    pub fn map_point(&self, p: [f64; 3]) -> [f64; 3] {
        let d = self.displacement(p);
        [p[0] + d[0], p[1] + d[1], p[2] + d[2]]
    }

    /// Solve `x + w(x) = y` by fixed-point iteration.
    pub fn invert_point(&self, y: [f64; 3], max_iter: usize, tol: f64) -> [f64; 3] {
        let mut x = y;
        for _ in 0..max_iter {
            let d = self.displacement(x);
            let next = [y[0] - d[0], y[1] - d[1], y[2] - d[2]];
            let step = dist(next, x);
            x = next;
            if step < tol {
                break;
            }
        }
        x
    }

    pub fn max_norm(&self) -> f64 {
        (0..self.grid().len())
            .map(|i| {
                let d = self.at_index(i);
                (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
            })
            .fold(0.0, f64::max)
    }
}

/// Smooth random displacement: i.i.d. uniform node values in `[-a, a]` per
/// component on a coarse lattice with spacing `s` mm, trilinearly upsampled.
/// Each component is bounded by `a` and changes by at most `2a/s` per mm
/// along any axis. Nodes are drawn z-major, then y, then x, components in
/// order.
pub fn displacement_field(grid: &Grid, amplitude: f64, smoothness: f64, seed: u64) -> WarpField {
    assert!(amplitude >= 0.0 && smoothness > 0.0);
    if amplitude == 0.0 {
        return WarpField::zeros(grid.clone());
    }
    let dims = grid.dims();
    let vs = grid.voxel_size();
    let mut nodes = [0usize; 3];
    let mut cell = [0.0; 3];
    for a in 0..3 {
        cell[a] = smoothness / vs[a];
        nodes[a] = (((dims[a] - 1) as f64) / cell[a]).ceil() as usize + 1;
    }
    let mut rng = stream(seed, 0);
    let count = nodes[0] * nodes[1] * nodes[2];
    let mut coarse = vec![[0.0f64; 3]; count];
    for node in coarse.iter_mut() {
        for c in node.iter_mut() {
            *c = amplitude * rng.random_range(-1.0..=1.0);
        }
    }
    let node_at = |x: usize, y: usize, z: usize| coarse[x + nodes[0] * (y + nodes[1] * z)];

    let n = grid.len();
    let mut data = vec![0.0f32; 3 * n];
    for z in 0..dims[2] {
        let (z0, tz) = split(z as f64 / cell[2], nodes[2]);
        for y in 0..dims[1] {
            let (y0, ty) = split(y as f64 / cell[1], nodes[1]);
            for x in 0..dims[0] {
                let (x0, tx) = split(x as f64 / cell[0], nodes[0]);
                let mut acc = [0.0f64; 3];
                for corner in 0..8 {
                    let (bx, by, bz) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
                    let w = if bx == 1 { tx } else { 1.0 - tx }
                        * if by == 1 { ty } else { 1.0 - ty }
                        * if bz == 1 { tz } else { 1.0 - tz };
                    if w == 0.0 {
                        continue;
                    }
                    let v = node_at(x0 + bx, y0 + by, z0 + bz);
                    for c in 0..3 {
                        acc[c] += w * v[c];
                    }
                }
                let i = grid.index(x, y, z);
                for c in 0..3 {
                    data[i + c * n] = acc[c] as f32;
                }
            }
        }
    }
    WarpField(Volume::from_f32(grid.clone(), 3, data).expect("field shape"))
}

fn split(u: f64, nodes: usize) -> (usize, f64) {
    let i = (u.floor() as usize).min(nodes - 2);
    (i, u - i as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

/// Resample `vol` through the field: `out(v) = vol(v + w(v))`. Nearest
/// interpolation keeps the input dtype; trilinear produces float32.
pub fn apply_warp(vol: &Volume, warp: &WarpField, interp: Interpolation) -> Result<Volume> {
    if vol.dims() != warp.grid().dims() {
        return Err(Error::Shape(format!(
            "volume dims {:?} differ from warp dims {:?}",
            vol.dims(),
            warp.grid().dims()
        )));
    }
    let grid = vol.grid().clone();
    let n = grid.len();
    let channels = vol.channels();
    let targets: Vec<[f64; 3]> = (0..n)
        .map(|i| {
            let p = grid.voxel_center(i);
            let d = warp.at_index(i);
            [p[0] + d[0], p[1] + d[1], p[2] + d[2]]
        })
        .collect();
    match interp {
        Interpolation::Trilinear => {
            let mut out = vec![0.0f32; n * channels];
            for c in 0..channels {
                for (i, t) in targets.iter().enumerate() {
                    out[i + c * n] = vol.trilinear_sample(*t, c) as f32;
                }
            }
            Volume::from_f32(grid, channels, out)
        }
        Interpolation::Nearest => {
            let src: Vec<Option<usize>> = targets
                .iter()
                .map(|t| {
                    let v = grid.nearest_voxel(*t);
                    grid.contains(v)
                        .then(|| grid.index(v[0] as usize, v[1] as usize, v[2] as usize))
                })
                .collect();
            match vol.data() {
                VoxelData::U8(d) => {
                    let mut out = vec![0u8; n * channels];
                    for c in 0..channels {
                        for (i, s) in src.iter().enumerate() {
                            if let Some(s) = s {
                                out[i + c * n] = d[s + c * n];
                            }
                        }
                    }
                    Volume::from_u8(grid, channels, out)
                }
                VoxelData::F32(d) => {
                    let mut out = vec![0.0f32; n * channels];
                    for c in 0..channels {
                        for (i, s) in src.iter().enumerate() {
                            if let Some(s) = s {
                                out[i + c * n] = d[s + c * n];
                            }
                        }
                    }
                    Volume::from_f32(grid, channels, out)
                }
            }
        }
    }
}

/// One intraoperative stimulation event.
#[derive(Debug, Clone, PartialEq)]
pub struct StimRecord {
    pub patient_id: String,
    pub position: [f64; 3],
    pub current_ma: f64,
    pub improvement_pct: f64,
    pub pass_effect: bool,
    pub side_effect: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub intensity: Volume,
    pub labels: Volume,
    pub efficacy: EfficacyParams,
    /// Centers of the target nuclei.
    pub targets: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub intensity: Volume,
    pub labels: Volume,
    /// Subject-to-template pull-back field: subject point `x` corresponds
    /// to template point `x + w(x)`.
    pub warp: WarpField,
    pub efficacy: EfficacyParams,
    /// Target nucleus centers in subject space (the planned trajectories).
    pub targets: Vec<[f64; 3]>,
    pub records: Vec<StimRecord>,
}

impl Subject {
    pub fn true_efficacy(&self, p: [f64; 3]) -> f64 {
        true_efficacy(&self.efficacy, p)
    }
}

pub fn true_efficacy(params: &EfficacyParams, p: [f64; 3]) -> f64 {
    params.probability(p)
}

/// Template anatomy: brain ellipsoid with a cortical shell over white matter,
/// CSF ventricles and deep-gray nuclei; intensity is class mean plus
/// Gaussian texture.
pub fn build_template(cfg: &PhantomConfig) -> Result<Template> {
    cfg.validate()?;
    let grid = cfg.grid();
    let inner = Ellipsoid {
        center: cfg.brain.center,
        radii: cfg
            .brain
            .radii
            .map(|r| (r - cfg.cortex_thickness_mm).max(0.5)),
    };
    let n = grid.len();
    let mut labels = vec![LABEL_BACKGROUND; n];
    for (i, l) in labels.iter_mut().enumerate() {
        let p = grid.voxel_center(i);
        *l = if !cfg.brain.contains(p) {
            LABEL_BACKGROUND
        } else if !inner.contains(p) {
            LABEL_CORTICAL_GM
        } else {
            LABEL_WM
        };
        if cfg.ventricles.iter().any(|v| v.contains(p)) {
            *l = LABEL_BACKGROUND;
        }
        if cfg.nuclei.iter().any(|v| v.contains(p)) {
            *l = LABEL_DEEP_GM;
        }
    }
    let mut rng = stream(cfg.master_seed, TAG_TEMPLATE);
    let intensity: Vec<f32> = labels
        .iter()
        .map(|&l| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (cfg.class_means[l as usize] + cfg.class_sigmas[l as usize] * z) as f32
        })
        .collect();
    let targets: Vec<[f64; 3]> = cfg.nuclei[..2].iter().map(|e| e.center).collect();
    Ok(Template {
        intensity: Volume::from_f32(grid.clone(), 1, intensity)?,
        labels: Volume::from_u8(grid, 1, labels)?,
        efficacy: EfficacyParams {
            bump_centers: cfg.bump_centers(&targets),
            p_max: cfg.p_max,
            p_floor: cfg.p_floor,
            sigma_mm: cfg.sigma_eff_mm,
        },
        targets,
    })
}

pub fn subject_id(index: usize) -> String {
    format!("S{index:03}")
}

pub fn subject_seed(master_seed: u64, index: usize) -> u64 {
    child_seed(master_seed, index as u64)
}

/// Warp the template into a new subject and run its simulated surgery.
pub fn synth_subject(
    template: &Template,
    cfg: &PhantomConfig,
    id: &str,
    seed: u64,
) -> Result<Subject> {
    let grid = template.intensity.grid().clone();
    let warp = displacement_field(
        &grid,
        cfg.warp_amplitude_mm,
        cfg.warp_smoothness_mm,
        child_seed(seed, TAG_WARP),
    );
    let labels = apply_warp(&template.labels, &warp, Interpolation::Nearest)?;
    let warped = apply_warp(&template.intensity, &warp, Interpolation::Trilinear)?;
    let mut intensity = warped.as_f32().unwrap().to_vec();
    if cfg.bias_amplitude > 0.0 {
        let bias = displacement_field(
            &grid,
            cfg.bias_amplitude,
            cfg.bias_smoothness_mm,
            child_seed(seed, TAG_BIAS),
        );
        for (i, v) in intensity.iter_mut().enumerate() {
            *v = (*v as f64 * (1.0 + bias.at_index(i)[0])) as f32;
        }
    }
    if cfg.noise_sigma > 0.0 {
        let mut rng = stream(seed, TAG_NOISE);
        for v in intensity.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = (*v as f64 + cfg.noise_sigma * z) as f32;
        }
    }
    let intensity = Volume::from_f32(grid, 1, intensity)?;

    let invert = |p: [f64; 3]| warp.invert_point(p, 100, 1e-9);
    let efficacy = EfficacyParams {
        bump_centers: template
            .efficacy
            .bump_centers
            .iter()
            .map(|&c| invert(c))
            .collect(),
        ..template.efficacy.clone()
    };
    let targets = template.targets.iter().map(|&c| invert(c)).collect();
    let mut subject = Subject {
        id: id.to_string(),
        intensity,
        labels,
        warp,
        efficacy,
        targets,
        records: Vec::new(),
    };
    subject.records = simulate_surgery(&subject, cfg, child_seed(seed, TAG_SURGERY));
    Ok(subject)
}

/// Probability of a positive response at `position` under `current`: the
/// true efficacy, with the distance shortened by the coupled sphere radius.
pub fn response_probability(
    efficacy: &EfficacyParams,
    cfg: &PhantomConfig,
    table: &RadiusTable,
    position: [f64; 3],
    current_ma: f64,
) -> f64 {
    let mut d = efficacy.distance(position);
    if cfg.current_coupling > 0.0 {
        let radius = table.radius_for_current(current_ma).unwrap_or(1.0);
        d = (d - cfg.current_coupling * radius).max(0.0);
    }
    efficacy.probability_at_distance(d)
}

/// Sample stimulation points along jittered, slightly tilted tracks through
/// each target and draw responses from the true efficacy field.
///
/// Per track the draws are: entry offset (radius, angle), tilt (x, y), then
/// per sample: position within its stratum, current, response, improvement,
/// pass effect.
pub fn simulate_surgery(subject: &Subject, cfg: &PhantomConfig, seed: u64) -> Vec<StimRecord> {
    let mut rng = stream(seed, 0);
    let table = RadiusTable::default();
    let mut records = Vec::with_capacity(cfg.tracks_per_subject * cfg.samples_per_track);
    let n_targets = subject.targets.len().max(1);
    for t in 0..cfg.tracks_per_subject {
        let target = subject.targets[t % n_targets];
        let r = cfg.track_jitter_mm * rng.random::<f64>().sqrt();
        let theta = std::f64::consts::TAU * rng.random::<f64>();
        let tilt = [
            rng.random_range(-0.15..=0.15),
            rng.random_range(-0.15..=0.15),
        ];
        let norm = (tilt[0] * tilt[0] + tilt[1] * tilt[1] + 1.0f64).sqrt();
        let dir = [tilt[0] / norm, tilt[1] / norm, 1.0 / norm];
        let origin = [
            target[0] + r * theta.cos(),
            target[1] + r * theta.sin(),
            target[2],
        ];
        let m = cfg.samples_per_track.max(1) as f64;
        for j in 0..cfg.samples_per_track {
            let u: f64 = rng.random();
            let s = -cfg.track_half_length_mm + (j as f64 + u) * 2.0 * cfg.track_half_length_mm / m;
            let position = [
                origin[0] + s * dir[0],
                origin[1] + s * dir[1],
                origin[2] + s * dir[2],
            ];
            let current = cfg.current_set_ma[rng.random_range(0..cfg.current_set_ma.len())];
            let p = response_probability(&subject.efficacy, cfg, &table, position, current);
            let positive = rng.random::<f64>() < p;
            let u: f64 = rng.random();
            let improvement_pct = if positive {
                50.0 + 50.0 * (1.0 - u)
            } else {
                50.0 * u
            };
            let pass_effect = rng.random::<f64>() < cfg.pass_effect_prob;
            records.push(StimRecord {
                patient_id: subject.id.clone(),
                position,
                current_ma: current,
                improvement_pct,
                pass_effect,
                side_effect: String::new(),
            });
        }
    }
    records
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub config: PhantomConfig,
    pub template: Template,
    pub subjects: Vec<Subject>,
}

impl Cohort {
    pub fn generate(cfg: &PhantomConfig) -> Result<Cohort> {
        let template = build_template(cfg)?;
        let subjects = (0..cfg.subjects)
            .into_par_iter()
            .map(|i| {
                synth_subject(
                    &template,
                    cfg,
                    &subject_id(i),
                    subject_seed(cfg.master_seed, i),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Cohort {
            config: cfg.clone(),
            template,
            subjects,
        })
    }

    pub fn subject(&self, id: &str) -> Option<&Subject> {
        self.subjects.iter().find(|s| s.id == id)
    }

    pub fn records(&self) -> impl Iterator<Item = &StimRecord> {
        self.subjects.iter().flat_map(|s| s.records.iter())
    }

    /// SHA-256 over the exported bytes of every file, in manifest order.
    pub fn content_hash(&self) -> String {
        let files = self.file_hashes();
        hash_file_table(&files)
    }

    fn file_hashes(&self) -> Vec<(String, String)> {
        let mut out = vec![
            (
                TEMPLATE_T1.to_string(),
                sha256_hex(&self.template.intensity.to_mvol_bytes()),
            ),
            (
                TEMPLATE_LABELS.to_string(),
                sha256_hex(&self.template.labels.to_mvol_bytes()),
            ),
        ];
        for s in &self.subjects {
            for (name, bytes) in subject_files(s) {
                out.push((format!("{}/{}", s.id, name), sha256_hex(&bytes)));
            }
        }
        out
    }

    pub fn export(&self, dir: impl AsRef<Path>) -> Result<String> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join(TEMPLATE_T1),
            self.template.intensity.to_mvol_bytes(),
        )?;
        fs::write(
            dir.join(TEMPLATE_LABELS),
            self.template.labels.to_mvol_bytes(),
        )?;
        let mut files = BTreeMap::new();
        files.insert(
            TEMPLATE_T1.to_string(),
            sha256_hex(&self.template.intensity.to_mvol_bytes()),
        );
        files.insert(
            TEMPLATE_LABELS.to_string(),
            sha256_hex(&self.template.labels.to_mvol_bytes()),
        );
        let mut entries = Vec::new();
        for s in &self.subjects {
            let sdir = dir.join(&s.id);
            fs::create_dir_all(&sdir)?;
            let mut hashes = BTreeMap::new();
            for (name, bytes) in subject_files(s) {
                fs::write(sdir.join(name), &bytes)?;
                hashes.insert(name.to_string(), sha256_hex(&bytes));
            }
            entries.push(SubjectEntry {
                id: s.id.clone(),
                efficacy: s.efficacy.clone(),
                targets: s.targets.clone(),
                records: s.records.len(),
                files: hashes,
            });
        }
        let content_hash = self.content_hash();
        let manifest = CohortManifest {
            format: COHORT_FORMAT.to_string(),
            subject_ids: self.subjects.iter().map(|s| s.id.clone()).collect(),
            config: self.config.clone(),
            template: TemplateEntry {
                efficacy: self.template.efficacy.clone(),
                targets: self.template.targets.clone(),
                files,
            },
            subjects: entries,
            content_hash: content_hash.clone(),
        };
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        Ok(content_hash)
    }

    pub fn import(dir: impl AsRef<Path>) -> Result<Cohort> {
        let dir = dir.as_ref();
        let manifest = read_manifest(dir)?;
        let load_vol = |path: PathBuf, expected: Option<&String>| -> Result<Volume> {
            let bytes = fs::read(&path).map_err(|e| Error::load(&path, e))?;
            if let Some(h) = expected {
                if &sha256_hex(&bytes) != h {
                    return Err(Error::load(&path, "content hash mismatch"));
                }
            }
            Volume::from_mvol_bytes(&bytes).map_err(|e| Error::load(&path, e))
        };
        let template = Template {
            intensity: load_vol(
                dir.join(TEMPLATE_T1),
                manifest.template.files.get(TEMPLATE_T1),
            )?,
            labels: load_vol(
                dir.join(TEMPLATE_LABELS),
                manifest.template.files.get(TEMPLATE_LABELS),
            )?,
            efficacy: manifest.template.efficacy.clone(),
            targets: manifest.template.targets.clone(),
        };
        let mut subjects = Vec::with_capacity(manifest.subjects.len());
        for entry in &manifest.subjects {
            let sdir = dir.join(&entry.id);
            let warp_path = sdir.join(TRUEWARP);
            let warp = WarpField::new(load_vol(warp_path.clone(), entry.files.get(TRUEWARP))?)
                .map_err(|e| Error::load(&warp_path, e))?;
            let csv_path = sdir.join(STIM_CSV);
            let csv_bytes = fs::read(&csv_path).map_err(|e| Error::load(&csv_path, e))?;
            if let Some(h) = entry.files.get(STIM_CSV) {
                if &sha256_hex(&csv_bytes) != h {
                    return Err(Error::load(&csv_path, "content hash mismatch"));
                }
            }
            let records =
                read_stim_csv(csv_bytes.as_slice()).map_err(|e| Error::load(&csv_path, e))?;
            subjects.push(Subject {
                id: entry.id.clone(),
                intensity: load_vol(sdir.join(T1), entry.files.get(T1))?,
                labels: load_vol(sdir.join(LABELS), entry.files.get(LABELS))?,
                warp,
                efficacy: entry.efficacy.clone(),
                targets: entry.targets.clone(),
                records,
            });
        }
        Ok(Cohort {
            config: manifest.config,
            template,
            subjects,
        })
    }
}

pub const MANIFEST: &str = "manifest.json";
pub const TEMPLATE_T1: &str = "template_t1.mvol";
pub const TEMPLATE_LABELS: &str = "template_labels.mvol";
pub const T1: &str = "t1.mvol";
pub const LABELS: &str = "labels.mvol";
pub const TRUEWARP: &str = "truewarp.mvol";
pub const STIM_CSV: &str = "stim.csv";
const COHORT_FORMAT: &str = "effmap-cohort/1";

fn subject_files(s: &Subject) -> Vec<(&'static str, Vec<u8>)> {
    vec![
        (T1, s.intensity.to_mvol_bytes()),
        (LABELS, s.labels.to_mvol_bytes()),
        (TRUEWARP, s.warp.volume().to_mvol_bytes()),
        (STIM_CSV, stim_csv_bytes(&s.records)),
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortManifest {
    pub format: String,
    pub subject_ids: Vec<String>,
    pub config: PhantomConfig,
    pub template: TemplateEntry,
    pub subjects: Vec<SubjectEntry>,
    pub content_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemplateEntry {
    pub efficacy: EfficacyParams,
    pub targets: Vec<[f64; 3]>,
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub efficacy: EfficacyParams,
    pub targets: Vec<[f64; 3]>,
    pub records: usize,
    pub files: BTreeMap<String, String>,
}

pub fn read_manifest(dir: &Path) -> Result<CohortManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::load(&path, e))?;
    let manifest: CohortManifest =
        serde_json::from_str(&text).map_err(|e| Error::load(&path, e))?;
    if manifest.format != COHORT_FORMAT {
        return Err(Error::load(
            &path,
            format!("unsupported cohort format {:?}", manifest.format),
        ));
    }
    Ok(manifest)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn hash_file_table(files: &[(String, String)]) -> String {
    let mut h = Sha256::new();
    for (name, digest) in files {
        h.update(name.as_bytes());
        h.update(b"\0");
        h.update(digest.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

pub const STIM_COLUMNS: [&str; 8] = [
    "patient_id",
    "x_mm",
    "y_mm",
    "z_mm",
    "current_ma",
    "improvement_pct",
    "pass_effect",
    "side_effect",
];

pub fn stim_csv_bytes(records: &[StimRecord]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(STIM_COLUMNS).expect("in-memory write");
    for r in records {
        w.write_record([
            r.patient_id.clone(),
            r.position[0].to_string(),
            r.position[1].to_string(),
            r.position[2].to_string(),
            r.current_ma.to_string(),
            r.improvement_pct.to_string(),
            (r.pass_effect as u8).to_string(),
            r.side_effect.clone(),
        ])
        .expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn write_stim_csv(records: &[StimRecord], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, stim_csv_bytes(records))?;
    Ok(())
}

pub fn read_stim_csv<R: std::io::Read>(reader: R) -> Result<Vec<StimRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != STIM_COLUMNS {
        return Err(Error::Data(format!(
            "unexpected stim.csv header {header:?}"
        )));
    }
    let num = |s: &str, col: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::Data(format!("bad {col} value {s:?}")))
    };
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        if row.len() != STIM_COLUMNS.len() {
            return Err(Error::Data(format!("row has {} fields", row.len())));
        }
        let pass_effect = match row[6].trim() {
            "0" => false,
            "1" => true,
            other => return Err(Error::Data(format!("bad pass_effect {other:?}"))),
        };
        out.push(StimRecord {
            patient_id: row[0].to_string(),
            position: [
                num(&row[1], "x_mm")?,
                num(&row[2], "y_mm")?,
                num(&row[3], "z_mm")?,
            ],
            current_ma: num(&row[4], "current_ma")?,
            improvement_pct: num(&row[5], "improvement_pct")?,
            pass_effect,
            side_effect: row[7].to_string(),
        });
    }
    Ok(out)
}

pub fn read_stim_csv_file(path: impl AsRef<Path>) -> Result<Vec<StimRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::load(path, e))?;
    read_stim_csv(file)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> PhantomConfig {
        let mut cfg = PhantomConfig::for_dims([40, 40, 40]);
        cfg.subjects = 3;
        cfg
    }

    #[test]
    fn template_has_four_classes_and_nucleus_volume() {
        let cfg = PhantomConfig::for_dims([64, 64, 64]);
        let t = build_template(&cfg).unwrap();
        let labels = t.labels.as_u8().unwrap();
        let mut present = [false; 4];
        for &l in labels {
            present[l as usize] = true;
        }
        assert_eq!(present, [true; 4]);

        // lattice enumeration of the first nucleus vs its labeled voxel count
        let nuc = cfg.nuclei[0];
        let g = t.labels.grid();
        let mut enumerated = 0usize;
        let mut labeled = 0usize;
        for i in 0..g.len() {
            let p = g.voxel_center(i);
            if nuc.contains(p) {
                enumerated += 1;
                if labels[i] == LABEL_DEEP_GM {
                    labeled += 1;
                }
            }
        }
        assert_eq!(enumerated, labeled);
        let rel = (enumerated as f64 - nuc.volume()).abs() / nuc.volume();
        assert!(rel < 0.2, "nucleus count {enumerated} vs {}", nuc.volume());
    }

    #[test]
    fn zero_noise_template_is_piecewise_constant() {
        let mut cfg = small_cfg();
        cfg.class_sigmas = [0.0; 4];
        let t = build_template(&cfg).unwrap();
        for (l, v) in t
            .labels
            .as_u8()
            .unwrap()
            .iter()
            .zip(t.intensity.as_f32().unwrap())
        {
            assert_eq!(*v, cfg.class_means[*l as usize] as f32);
        }
    }

    #[test]
    fn nucleus_outside_grid_is_rejected() {
        let mut cfg = small_cfg();
        cfg.nuclei[0].center = [1.0, 20.0, 20.0];
        assert!(matches!(build_template(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn displacement_field_properties() {
        let g = Grid::isotropic([33, 30, 28], 1.0);
        let zero = displacement_field(&g, 0.0, 8.0, 5);
        assert!(zero.volume().as_f32().unwrap().iter().all(|&v| v == 0.0));

        let a = 2.5;
        let s = 8.0;
        let w1 = displacement_field(&g, a, s, 9);
        let w2 = displacement_field(&g, a, s, 9);
        assert_eq!(w1, w2);
        assert!(w1.max_norm() <= 4.0 * a);
        assert!(w1.max_norm() > 0.0);

        // finite-difference gradient of each component bounded by 4a/s
        let dims = g.dims();
        for z in 0..dims[2] - 1 {
            for y in 0..dims[1] - 1 {
                for x in 0..dims[0] - 1 {
                    let d0 = w1.at_index(g.index(x, y, z));
                    let dx = w1.at_index(g.index(x + 1, y, z));
                    let dy = w1.at_index(g.index(x, y + 1, z));
                    let dz = w1.at_index(g.index(x, y, z + 1));
                    for c in 0..3 {
                        let grad = ((dx[c] - d0[c]).powi(2)
                            + (dy[c] - d0[c]).powi(2)
                            + (dz[c] - d0[c]).powi(2))
                        .sqrt();
                        assert!(grad <= 4.0 * a / s + 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn warp_identity_shift_and_label_closure() {
        let g = Grid::isotropic([12, 10, 8], 1.0);
        let n = g.len();
        let data: Vec<f32> = (0..n).map(|i| (i * 7 % 23) as f32).collect();
        let vol = Volume::from_f32(g.clone(), 1, data).unwrap();

        let zero = WarpField::zeros(g.clone());
        assert_eq!(
            apply_warp(&vol, &zero, Interpolation::Trilinear).unwrap(),
            vol
        );

        let mut shift = vec![0.0f32; 3 * n];
        shift[..n].fill(2.0);
        let shift = WarpField::new(Volume::from_f32(g.clone(), 3, shift).unwrap()).unwrap();
        let out = apply_warp(&vol, &shift, Interpolation::Trilinear).unwrap();
        for z in 0..8 {
            for y in 0..10 {
                for x in 0..10 {
                    assert_eq!(out.get(x, y, z, 0), vol.get(x + 2, y, z, 0));
                }
            }
        }

        let labels: Vec<u8> = (0..n).map(|i| (i % 4) as u8).collect();
        let labels = Volume::from_u8(g.clone(), 1, labels).unwrap();
        let w = displacement_field(&g, 1.7, 4.0, 3);
        let warped = apply_warp(&labels, &w, Interpolation::Nearest).unwrap();
        assert!(warped.as_u8().unwrap().iter().all(|&l| l <= 3));

        let other = Volume::zeros(Grid::isotropic([4, 4, 4], 1.0), 1);
        assert!(matches!(
            apply_warp(&other, &w, Interpolation::Nearest),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn degenerate_subject_equals_template() {
        let mut cfg = small_cfg();
        cfg.warp_amplitude_mm = 0.0;
        cfg.noise_sigma = 0.0;
        cfg.bias_amplitude = 0.0;
        let t = build_template(&cfg).unwrap();
        let s = synth_subject(&t, &cfg, "S000", 11).unwrap();
        assert_eq!(s.intensity, t.intensity);
        assert_eq!(s.labels, t.labels);
        assert_eq!(s.efficacy, t.efficacy);
    }

    #[test]
    fn subjects_differ_and_nuclei_move_within_bound() {
        let cfg = small_cfg();
        let t = build_template(&cfg).unwrap();
        let a = synth_subject(&t, &cfg, "S000", 1).unwrap();
        let b = synth_subject(&t, &cfg, "S001", 2).unwrap();
        let diff = a
            .warp
            .volume()
            .as_f32()
            .unwrap()
            .iter()
            .zip(b.warp.volume().as_f32().unwrap())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(diff > 0.0);

        let centroid = |v: &Volume, nuc: &Ellipsoid| {
            let g = v.grid();
            let (mut sum, mut n) = ([0.0; 3], 0.0);
            for (i, &l) in v.as_u8().unwrap().iter().enumerate() {
                let p = g.voxel_center(i);
                let near = (0..3).all(|k| (p[k] - nuc.center[k]).abs() < nuc.radii[k] + 5.0);
                if l == LABEL_DEEP_GM && near && (p[0] < 19.5) == (nuc.center[0] < 19.5) {
                    for k in 0..3 {
                        sum[k] += p[k];
                    }
                    n += 1.0;
                }
            }
            sum.map(|s| s / n)
        };
        let nuc = cfg.nuclei[0];
        let ct = centroid(&t.labels, &nuc);
        let cs = centroid(&a.labels, &nuc);
        assert!(dist(ct, cs) <= 4.0 * cfg.warp_amplitude_mm);
    }

    #[test]
    fn true_efficacy_closed_form() {
        let params = EfficacyParams {
            bump_centers: vec![[10.0, 10.0, 10.0]],
            p_max: 0.9,
            p_floor: 0.05,
            sigma_mm: 2.5,
        };
        assert!((true_efficacy(&params, [10.0, 10.0, 10.0]) - 0.9).abs() < 1e-15);
        let at_sigma = true_efficacy(&params, [12.5, 10.0, 10.0]);
        assert!((at_sigma - (0.05 + 0.85 * (-0.5f64).exp())).abs() < 1e-12);
        assert!((at_sigma - 0.5656).abs() < 5e-5);
        assert!((true_efficacy(&params, [1e6, 0.0, 0.0]) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn surgery_is_deterministic_and_forced_bernoulli() {
        let mut cfg = small_cfg();
        let t = build_template(&cfg).unwrap();
        let s = synth_subject(&t, &cfg, "S000", 4).unwrap();
        assert_eq!(simulate_surgery(&s, &cfg, 7), simulate_surgery(&s, &cfg, 7));
        assert_eq!(
            s.records.len(),
            cfg.tracks_per_subject * cfg.samples_per_track
        );
        for r in &s.records {
            assert!((0.0..=100.0).contains(&r.improvement_pct));
            assert!(r.current_ma > 0.0);
        }

        cfg.p_floor = 1.0;
        cfg.p_max = 1.0;
        let mut forced = s.clone();
        forced.efficacy.p_floor = 1.0;
        forced.efficacy.p_max = 1.0;
        for r in simulate_surgery(&forced, &cfg, 3) {
            assert!(r.improvement_pct > 50.0 && r.improvement_pct <= 100.0);
        }
    }

    #[test]
    fn positive_rate_matches_mean_probability() {
        let mut cfg = small_cfg();
        cfg.tracks_per_subject = 100;
        cfg.samples_per_track = 20;
        let t = build_template(&cfg).unwrap();
        let s = synth_subject(&t, &cfg, "S000", 99).unwrap();
        let mut total_p = 0.0;
        let mut var = 0.0;
        let mut positives = 0.0;
        let mut n = 0.0;
        for seed in 0..6u64 {
            for r in simulate_surgery(&s, &cfg, seed) {
                let p = s.true_efficacy(r.position);
                total_p += p;
                var += p * (1.0 - p);
                positives += (r.improvement_pct > 50.0) as u8 as f64;
                n += 1.0;
            }
        }
        assert!(n >= 10_000.0);
        assert!((positives - total_p).abs() <= 3.0 * var.sqrt());
    }

    #[test]
    fn stim_csv_round_trip_with_quoting() {
        let records = vec![
            StimRecord {
                patient_id: "S001".into(),
                position: [1.25, -3.0000000000000004, 1e-7],
                current_ma: 2.5,
                improvement_pct: 73.1,
                pass_effect: true,
                side_effect: "paresthesia, left hand".into(),
            },
            StimRecord {
                patient_id: "S001".into(),
                position: [0.0, 0.1, 0.2],
                current_ma: 1.0,
                improvement_pct: 0.0,
                pass_effect: false,
                side_effect: String::new(),
            },
        ];
        let bytes = stim_csv_bytes(&records);
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with(
            "patient_id,x_mm,y_mm,z_mm,current_ma,improvement_pct,pass_effect,side_effect\n"
        ));
        assert_eq!(read_stim_csv(bytes.as_slice()).unwrap(), records);
    }
}
