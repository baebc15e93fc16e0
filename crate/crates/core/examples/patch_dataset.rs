//! Label, deduplicate and cut patches for one subject, then save one patch
//! as a two-channel MVOL.
//!
//! cargo run --release --example patch_dataset

use effmap::experiment::{evaluation_records, patches_for, ExperimentConfig};
use effmap::patchset::{dedup_lowest_current, label_records, Response};
use effmap::phantom::Cohort;

fn main() -> effmap::Result<()> {
    let cfg = ExperimentConfig::smoke();
    let cohort = Cohort::generate(&cfg.phantom_config())?;
    let subject = &cohort.subjects[0];

    let labeled = label_records(&subject.records)?;
    let count = |r: Response| labeled.iter().filter(|l| l.label == r).count();
    println!(
        "{}: {} positive, {} null, {} excluded",
        subject.id,
        count(Response::Positive),
        count(Response::Null),
        count(Response::Excluded)
    );
    let kept: Vec<_> = labeled
        .into_iter()
        .filter(|l| l.label != Response::Excluded)
        .collect();
    println!(
        "{} sites after lowest-current deduplication",
        dedup_lowest_current(&kept).len()
    );

    let records = evaluation_records(&cohort)?;
    let patches = patches_for(
        &cohort,
        std::slice::from_ref(&subject.id),
        &records,
        &cfg.patch,
    )?;
    for p in patches.iter().take(5) {
        println!(
            "patch at {:?} ({} mA): label {}, {} channels of {}^3",
            p.meta.position, p.meta.current_ma, p.label, p.channels, p.size
        );
    }
    if let Some(p) = patches.first() {
        let path = std::env::temp_dir().join("effmap_patch.mvol");
        p.to_volume().write_mvol(&path)?;
        println!("saved {}", path.display());
    }
    Ok(())
}
