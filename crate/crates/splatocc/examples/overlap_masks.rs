//! Computes the cross-view overlap masks for the default surround rig and
//! reports, per camera, how much of the image overlaps a neighbor and how
//! much survives purification + drop.
//!
//! Run with: cargo run --release --example overlap_masks

use splatocc::masks::{compute_overlap_mask, gsp_selection_masks, OverlapConfig};
use splatocc::pipeline::RigLayout;

fn main() -> anyhow::Result<()> {
    let layout = RigLayout::default();
    let rig = layout.build();
    let cfg = OverlapConfig::default();
    let n_cams = rig.cameras.len();

    println!("pairwise overlap fraction (rows: camera, cols: neighbor):");
    for i in 0..n_cams {
        let mut row = format!("cam {i}:");
        for j in 0..n_cams {
            if i == j {
                row.push_str("   -  ");
                continue;
            }
            let m = compute_overlap_mask(&rig.cameras[i], &rig.cameras[j], &cfg)?;
            let frac = m.data.iter().filter(|&&b| b).count() as f64 / m.data.len() as f64;
            row.push_str(&format!(" {frac:.3}"));
        }
        println!("{row}");
    }

    let keeps = gsp_selection_masks(&rig, &cfg)?;
    let out_dir = std::path::Path::new("out/overlap_masks");
    std::fs::create_dir_all(out_dir)?;
    println!("\nkeep masks after erosion (radius {}) and pair-drop:", cfg.erosion_radius);
    for (c, m) in keeps.iter().enumerate() {
        let frac = m.data.iter().filter(|&&b| b).count() as f64 / m.data.len() as f64;
        println!("cam {c}: keeps {:.1}% of pixels", 100.0 * frac);
        splatocc::io::write_pgm_mask(&out_dir.join(format!("keep_cam{c}.pgm")), m)?;
    }
    println!("masks written to {}", out_dir.display());
    Ok(())
}
