//! Stimulation-sphere kernel: applied current to radius, sphere rasterization
//! as a uniform probability mass, and the positive-over-null mask merge.

use log::warn;

use crate::error::{Error, Result};
use crate::volgrid::Grid;

/// Piecewise-linear current (mA) to stimulated-sphere radius (mm) lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct RadiusTable {
    knots: Vec<(f64, f64)>,
    below_first: f64,
}

impl Default for RadiusTable {
    /// The intraoperative lookup table: 1.00 mm below 1 mA, then one knot
    /// per milliampere up to 7 mA.
    fn default() -> Self {
        Self {
            knots: vec![
                (1.0, 1.80),
                (2.0, 2.42),
                (3.0, 2.94),
                (4.0, 3.33),
                (5.0, 3.72),
                (6.0, 4.05),
                (7.0, 4.35),
            ],
            below_first: 1.00,
        }
    }
}

impl RadiusTable {
    pub fn new(knots: Vec<(f64, f64)>, below_first: f64) -> Result<Self> {
        if knots.is_empty() {
            return Err(Error::Config("radius table needs at least one knot".into()));
        }
        for w in knots.windows(2) {
            if !(w[1].0 > w[0].0) || !(w[1].1 > w[0].1) {
                return Err(Error::Config(
                    "radius table currents and radii must be strictly increasing".into(),
                ));
            }
        }
        if !(below_first > 0.0) || below_first > knots[0].1 {
            return Err(Error::Config(
                "radius below the first knot must be positive and not exceed it".into(),
            ));
        }
        Ok(Self { knots, below_first })
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    pub fn max_radius(&self) -> f64 {
        self.knots.last().map(|k| k.1).unwrap_or(self.below_first)
    }

    /// Radius for a current: constant below the first knot, exact at knots,
    /// linear between them, clamped to the last radius beyond the table.
    pub fn radius_for_current(&self, current_ma: f64) -> Result<f64> {
        if !(current_ma > 0.0) || !current_ma.is_finite() {
            return Err(Error::Domain(format!(
                "current must be positive, got {current_ma}"
            )));
        }
        let (first_i, _) = self.knots[0];
        if current_ma < first_i {
            return Ok(self.below_first);
        }
        let &(last_i, last_r) = self.knots.last().unwrap();
        if current_ma >= last_i {
            if current_ma > last_i {
                warn!("current {current_ma} mA beyond table, radius clamped to {last_r} mm");
            }
            return Ok(last_r);
        }
        let k = self.knots.partition_point(|&(i, _)| i <= current_ma);
        let (i0, r0) = self.knots[k - 1];
        let (i1, r1) = self.knots[k];
        if current_ma == i0 {
            return Ok(r0);
        }
        let t = (current_ma - i0) / (i1 - i0);
        Ok(r0 + t * (r1 - r0))
    }
}

/// Convenience wrapper over the default table.
pub fn radius_for_current(current_ma: f64) -> Result<f64> {
    RadiusTable::default().radius_for_current(current_ma)
}

/// Uniform probability mass over the voxels of a rasterized sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct SpherePdf {
    /// Flat spatial indices into the grid, ascending.
    pub voxels: Vec<usize>,
    pub center: [f64; 3],
    pub radius: f64,
}

impl SpherePdf {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn mass_per_voxel(&self) -> f64 {
        1.0 / self.voxels.len() as f64
    }

    pub fn total_mass(&self) -> f64 {
        self.voxels.iter().map(|_| self.mass_per_voxel()).sum()
    }
}

/// Slack on the squared-distance test so centers lying exactly on the
/// sphere survive round-off in the affine.
const MEMBERSHIP_SLACK: f64 = 1e-9;

/// Voxels whose centers lie within `radius` of `center`, as a uniform PDF.
/// When no voxel center qualifies, the nearest in-grid voxel carries all mass.
pub fn rasterize_sphere(grid: &Grid, center: [f64; 3], radius: f64) -> Result<SpherePdf> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::Domain(format!(
            "radius must be positive, got {radius}"
        )));
    }
    let dims = grid.dims();
    let vs = grid.voxel_size();
    let cv = grid.world_to_voxel(center);

    let outside: f64 = (0..3)
        .map(|a| {
            let hi = (dims[a] - 1) as f64;
            let excess = if cv[a] < 0.0 {
                -cv[a]
            } else if cv[a] > hi {
                cv[a] - hi
            } else {
                0.0
            };
            (excess * vs[a]).powi(2)
        })
        .sum::<f64>()
        .sqrt();
    let max_vs = vs.iter().cloned().fold(0.0, f64::max);
    if outside > radius + 2.0 * max_vs {
        return Err(Error::OutOfGrid(format!(
            "center {center:?} lies {outside:.3} mm outside the grid (radius {radius})"
        )));
    }

    let reach = grid.inverse_row_norms();
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut empty_box = false;
    for a in 0..3 {
        let span = radius * reach[a];
        let l = (cv[a] - span).floor().max(0.0);
        let h = (cv[a] + span).ceil().min((dims[a] - 1) as f64);
        if h < l {
            empty_box = true;
        }
        lo[a] = l as usize;
        hi[a] = h.max(l) as usize;
    }

    let r2 = radius * radius + MEMBERSHIP_SLACK;
    let mut voxels = Vec::new();
    if !empty_box {
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let w = grid.voxel_to_world([x as f64, y as f64, z as f64]);
                    let d2 = (w[0] - center[0]).powi(2)
                        + (w[1] - center[1]).powi(2)
                        + (w[2] - center[2]).powi(2);
                    if d2 <= r2 {
                        voxels.push(grid.index(x, y, z));
                    }
                }
            }
        }
    }
    if voxels.is_empty() {
        let mut v = [0usize; 3];
        for a in 0..3 {
            v[a] = cv[a].round().clamp(0.0, (dims[a] - 1) as f64) as usize;
        }
        voxels.push(grid.index(v[0], v[1], v[2]));
    }
    Ok(SpherePdf {
        voxels,
        center,
        radius,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskLabel {
    Unlabeled,
    Null,
    Positive,
}

/// Merge positive and null response voxel sets over a grid of `len` voxels.
/// Overlaps resolve to positive.
pub fn merge_response_masks(len: usize, positive: &[usize], null: &[usize]) -> Vec<MaskLabel> {
    let mut mask = vec![MaskLabel::Unlabeled; len];
    for &i in null {
        mask[i] = MaskLabel::Null;
    }
    for &i in positive {
        mask[i] = MaskLabel::Positive;
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn table_knots_and_interpolation() {
        let t = RadiusTable::default();
        assert_eq!(t.radius_for_current(3.0).unwrap(), 2.94);
        assert_eq!(t.radius_for_current(0.5).unwrap(), 1.00);
        assert!((t.radius_for_current(4.5).unwrap() - 3.525).abs() < 1e-12);
        assert_eq!(t.radius_for_current(8.0).unwrap(), 4.35);
        assert!(matches!(t.radius_for_current(0.0), Err(Error::Domain(_))));
        assert!(matches!(t.radius_for_current(-1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn continuity_at_interpolation_knots() {
        let t = RadiusTable::default();
        for &(i, r) in t.knots() {
            let right = t.radius_for_current(i + 1e-9).unwrap();
            assert!((right - r).abs() < 1e-8);
            if i > 1.0 {
                let left = t.radius_for_current(i - 1e-9).unwrap();
                assert!((left - r).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn small_spheres_by_enumeration() {
        let g = Grid::isotropic([9, 9, 9], 1.0);
        let c = [4.0, 4.0, 4.0];
        let s = rasterize_sphere(&g, c, 0.5).unwrap();
        assert_eq!(s.voxels, vec![g.index(4, 4, 4)]);
        let s = rasterize_sphere(&g, c, 1.0).unwrap();
        assert_eq!(s.len(), 7);
        assert!((s.mass_per_voxel() - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn empty_sphere_falls_back_to_nearest_voxel() {
        let g = Grid::isotropic([9, 9, 9], 2.0);
        let s = rasterize_sphere(&g, [4.9, 4.2, 3.1], 0.3).unwrap();
        assert_eq!(s.voxels, vec![g.index(2, 2, 2)]);
        assert_eq!(s.total_mass(), 1.0);
    }

    #[test]
    fn far_center_is_an_error() {
        let g = Grid::isotropic([9, 9, 9], 1.0);
        assert!(matches!(
            rasterize_sphere(&g, [-10.0, 4.0, 4.0], 2.0),
            Err(Error::OutOfGrid(_))
        ));
        // within radius + 2 voxels: clipped sphere, still valid
        assert!(rasterize_sphere(&g, [-3.0, 4.0, 4.0], 2.0).is_ok());
    }

    #[test]
    fn merge_prefers_positive() {
        let m = merge_response_masks(4, &[1, 2], &[2, 3]);
        assert_eq!(
            m,
            vec![
                MaskLabel::Unlabeled,
                MaskLabel::Positive,
                MaskLabel::Positive,
                MaskLabel::Null
            ]
        );
        assert!(merge_response_masks(3, &[], &[])
            .iter()
            .all(|&l| l == MaskLabel::Unlabeled));
    }

    proptest! {
        #[test]
        fn radius_is_monotone(a in 0.01f64..12.0, b in 0.01f64..12.0) {
            let t = RadiusTable::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(t.radius_for_current(lo).unwrap() <= t.radius_for_current(hi).unwrap());
        }

        #[test]
        fn sphere_is_translation_equivariant(
            c in prop::array::uniform3(8.0f64..12.0),
            r in 0.3f64..4.35,
            shift in prop::array::uniform3(-3i64..=3),
        ) {
            let g = Grid::isotropic([24, 24, 24], 1.0);
            let a = rasterize_sphere(&g, c, r).unwrap();
            let moved = [c[0] + shift[0] as f64, c[1] + shift[1] as f64, c[2] + shift[2] as f64];
            let b = rasterize_sphere(&g, moved, r).unwrap();
            let shifted: Vec<usize> = a.voxels.iter().map(|&i| {
                let v = g.coords(i);
                g.index(
                    (v[0] as i64 + shift[0]) as usize,
                    (v[1] as i64 + shift[1]) as usize,
                    (v[2] as i64 + shift[2]) as usize,
                )
            }).collect();
            let mut shifted = shifted;
            shifted.sort_unstable();
            prop_assert_eq!(shifted, b.voxels);
        }
    }
}
