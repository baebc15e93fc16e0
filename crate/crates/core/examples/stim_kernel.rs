//! Current to radius lookup, sphere rasterization and the positive-over-null
//! mask merge.
//!
//! cargo run --example stim_kernel

use effmap::stimkernel::{merge_response_masks, rasterize_sphere, MaskLabel, RadiusTable};
use effmap::volgrid::Grid;

fn main() -> effmap::Result<()> {
    let table = RadiusTable::default();
    let grid = Grid::isotropic([32, 32, 32], 1.0);
    println!("current (mA)  radius (mm)  voxels  ideal volume");
    for current in [0.5, 1.0, 2.0, 2.5, 3.0, 4.5, 6.0, 7.0, 9.0] {
        let r = table.radius_for_current(current)?;
        let s = rasterize_sphere(&grid, [15.5, 16.0, 16.2], r)?;
        let ideal = 4.0 / 3.0 * std::f64::consts::PI * r.powi(3);
        println!("{current:>12.1}  {r:>11.3}  {:>6}  {ideal:>12.1}", s.len());
    }

    let positive = rasterize_sphere(&grid, [14.0, 16.0, 16.0], 2.94)?;
    let null = rasterize_sphere(&grid, [17.0, 16.0, 16.0], 2.94)?;
    let mask = merge_response_masks(grid.len(), &positive.voxels, &null.voxels);
    let count = |l: MaskLabel| mask.iter().filter(|&&m| m == l).count();
    println!(
        "merged masks: {} positive, {} null (overlap resolved to positive)",
        count(MaskLabel::Positive),
        count(MaskLabel::Null)
    );
    Ok(())
}
