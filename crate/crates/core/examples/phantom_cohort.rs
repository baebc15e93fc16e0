//! Generate a small synthetic cohort and export it to disk.
//!
//! cargo run --release --example phantom_cohort -- [out_dir]

use effmap::patchset::prepare_records;
use effmap::phantom::{Cohort, PhantomConfig};

fn main() -> effmap::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| {
        std::env::temp_dir()
            .join("effmap_cohort")
            .display()
            .to_string()
    });
    let mut cfg = PhantomConfig::for_dims([48, 48, 48]);
    cfg.subjects = 6;
    cfg.master_seed = 11;
    let cohort = Cohort::generate(&cfg)?;

    for s in &cohort.subjects {
        let kept = prepare_records(&s.records)?;
        let positives = kept.iter().filter(|r| r.is_positive()).count();
        let pass = s.records.iter().filter(|r| r.pass_effect).count();
        println!(
            "{}: {} stimulations, {} pass effects, {} evaluated, {} positive, max warp {:.2} mm",
            s.id,
            s.records.len(),
            pass,
            kept.len(),
            positives,
            s.warp.max_norm()
        );
    }
    let hash = cohort.export(&out)?;
    println!("exported to {out}, content hash {hash}");
    let back = Cohort::import(&out)?;
    println!("re-imported hash matches: {}", back.content_hash() == hash);
    Ok(())
}
