//! Build a volume on an oblique grid, round-trip it through MVOL and sample
//! it between voxels.
//!
//! cargo run --example volume_io

use effmap::volgrid::{Grid, Volume};

fn main() -> effmap::Result<()> {
    // 2 mm voxels, rotated 90 degrees about z, shifted to (-20, 10, 5)
    let affine = [
        [0.0, -2.0, 0.0, -20.0],
        [2.0, 0.0, 0.0, 10.0],
        [0.0, 0.0, 2.0, 5.0],
        [0.0, 0.0, 0.0, 1.0],
    ];
    let grid = Grid::new([16, 12, 8], [2.0; 3], affine)?;
    let data: Vec<f32> = (0..grid.len())
        .map(|i| {
            let [x, y, z] = grid.coords(i);
            (x + 2 * y + 3 * z) as f32
        })
        .collect();
    let vol = Volume::from_f32(grid, 1, data)?;

    let path = std::env::temp_dir().join("effmap_volume_io.mvol");
    vol.write_mvol(&path)?;
    let back = Volume::read_mvol(&path)?;
    println!(
        "wrote {} ({} bytes)",
        path.display(),
        vol.to_mvol_bytes().len()
    );
    println!("round trip identical: {}", back == vol);

    let p = vol.voxel_to_world([3.5, 2.25, 1.0]);
    println!("voxel (3.5, 2.25, 1) is world {p:?}");
    println!("trilinear value there: {}", vol.trilinear_sample(p, 0));
    println!("nearest value there:   {}", vol.nearest_sample(p, 0));

    let z = vol.z_normalize(None)?;
    let vals = z.channel_values(0);
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    println!("z-normalized mean {mean:.2e}");
    Ok(())
}
