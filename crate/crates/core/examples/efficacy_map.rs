//! Sliding-window efficacy map: train the reduced CNN briefly, then score a
//! patch around every other voxel of a subject's brain and save the map.
//!
//! cargo run --release --example efficacy_map

use effmap::experiment::{
    evaluation_records, fold_plan, normalized_intensity, patches_for, subject, train_fold,
    ExperimentConfig,
};
use effmap::phantom::Cohort;
use effmap::slidemap::{default_roi, sliding_efficacy_map};

fn main() -> effmap::Result<()> {
    let cfg = ExperimentConfig::smoke();
    let cohort = Cohort::generate(&cfg.phantom_config())?;
    let records = evaluation_records(&cohort)?;
    let plan = fold_plan(&cfg, &cohort)?;
    let fold = &plan.folds[0];
    let train_set = patches_for(&cohort, &fold.train, &records, &cfg.patch)?;
    let val_set = patches_for(&cohort, &fold.validation, &records, &cfg.patch)?;
    let mut model = train_fold(&cfg, 0, &train_set, &val_set)?.best.model;

    let s = subject(&cohort, &fold.test[0])?;
    let roi = default_roi(s)?;
    let map = sliding_efficacy_map(
        &mut model,
        &normalized_intensity(s)?,
        &s.labels,
        &cfg.patch,
        2,
        Some(&roi),
        cfg.map.batch_size,
    )?;
    let vals = map.as_f32().unwrap();
    let inside = vals.iter().filter(|&&v| v > 0.0).count();
    let peak = (0..vals.len())
        .max_by(|&a, &b| vals[a].total_cmp(&vals[b]))
        .unwrap();
    println!(
        "{}: {} voxels mapped, peak {:.3} at {:?}, true efficacy there {:.3}",
        s.id,
        inside,
        vals[peak],
        map.grid().voxel_center(peak),
        s.true_efficacy(map.grid().voxel_center(peak))
    );
    let path = std::env::temp_dir().join(format!("effmap_map_{}.mvol", s.id));
    map.write_mvol(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}
