//! Whole-volume efficacy maps from the patch classifier: a patch centered
//! on every lattice voxel of a region of interest is scored, and the
//! remaining region voxels take the value of their nearest lattice voxel.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::experiment::PatchConfig;
use crate::patchset::{extract_patch, Patch};
use crate::phantom::Subject;
use crate::tinynn::{predict_patches, Model};
use crate::volgrid::Volume;

/// Non-background voxels of the subject's label volume.
pub fn default_roi(subject: &Subject) -> Result<Volume> {
    let mask: Vec<u8> = (0..subject.labels.grid().len())
        .map(|i| u8::from(subject.labels.value(i) != 0.0))
        .collect();
    Volume::from_u8(subject.labels.grid().clone(), 1, mask)
}

/// Lattice coordinate nearest to `c` along an axis of length `len`; halves
/// round up, and the result never passes the last lattice coordinate.
fn nearest_lattice(c: usize, stride: usize, len: usize) -> usize {
    let last = (len - 1) / stride * stride;
    ((c + stride / 2) / stride * stride).min(last)
}

/// Classifier probability map over `intensity`/`labels` (intensity already
/// normalized). Voxels outside `roi` (nonzero = inside) are 0; without a
/// ROI every voxel is scored.
pub fn sliding_efficacy_map(
    model: &mut Model<f32>,
    intensity: &Volume,
    labels: &Volume,
    patch: &PatchConfig,
    stride: usize,
    roi: Option<&Volume>,
    batch_size: usize,
) -> Result<Volume> {
    if stride == 0 {
        return Err(Error::Config("stride must be >= 1".into()));
    }
    if !intensity.same_shape(labels) {
        return Err(Error::Shape(
            "intensity and label volumes differ in shape".into(),
        ));
    }
    if let Some(r) = roi {
        if r.dims() != intensity.dims() {
            return Err(Error::Shape(format!(
                "ROI dims {:?} differ from volume dims {:?}",
                r.dims(),
                intensity.dims()
            )));
        }
    }
    let grid = intensity.grid().clone();
    let [nx, ny, nz] = grid.dims();
    let inside = |i: usize| roi.is_none_or(|r| r.value(i) != 0.0);
    // ROI voxel -> lattice voxel; BTreeMap keeps lattice order deterministic
    let mut assign = Vec::new();
    let mut lattice: BTreeMap<usize, f32> = BTreeMap::new();
    for i in (0..grid.len()).filter(|&i| inside(i)) {
        let [x, y, z] = grid.coords(i);
        let l = grid.index(
            nearest_lattice(x, stride, nx),
            nearest_lattice(y, stride, ny),
            nearest_lattice(z, stride, nz),
        );
        lattice.insert(l, 0.0);
        assign.push((i, l));
    }
    let centers: Vec<usize> = lattice.keys().copied().collect();
    for chunk in centers.chunks(batch_size.max(1) * 4) {
        let patches = chunk
            .par_iter()
            .map(|&l| {
                extract_patch(
                    intensity,
                    labels,
                    grid.voxel_center(l),
                    patch.size,
                    patch.encoding,
                )
            })
            .collect::<Result<Vec<Patch>>>()?;
        let refs: Vec<&Patch> = patches.iter().collect();
        let probs = predict_patches(model, &refs, batch_size)?;
        for (&l, p) in chunk.iter().zip(probs) {
            lattice.insert(l, p as f32);
        }
    }
    let mut data = vec![0.0f32; grid.len()];
    for (i, l) in assign {
        data[i] = lattice[&l];
    }
    Volume::from_f32(grid, 1, data)
}
