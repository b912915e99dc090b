//! Writes a small cube-phantom CT volume and mask as raw files, for driving
//! the CLI by hand: `cargo run -p pvc-core --example make_fixture -- <dir>`.

use pvc_core::io::{write_raw, write_raw_mask, ElementType};
use pvc_core::volume::{BinaryMask, GridGeometry, ScalarVolume};

fn main() {
    let dir = std::env::args().nth(1).expect("usage: make_fixture <dir>");
    let dir = std::path::PathBuf::from(dir);
    std::fs::create_dir_all(&dir).unwrap();

    let g = GridGeometry::new([40, 40, 40], [0.5, 0.5, 1.0], [0.0; 3]).unwrap();
    let mut vals = vec![-100.0f64; g.voxel_count()];
    let mut bits = vec![false; g.voxel_count()];
    for k in 0..40 {
        for j in 0..40usize {
            for i in 0..40usize {
                let dx = (i as f64 - 19.5) * 0.5;
                let dy = (j as f64 - 19.5) * 0.5;
                let r = (dx * dx + dy * dy).sqrt();
                let idx = i + 40 * (j + 40 * k);
                if r <= 8.0 {
                    bits[idx] = true;
                    // Depressed rim mimicking partial-volume averaging.
                    vals[idx] = if r >= 6.0 {
                        if r >= 7.5 { 700.0 } else { 1500.0 }
                    } else {
                        300.0
                    };
                }
            }
        }
    }
    write_raw(
        &ScalarVolume::new(g.clone(), vals).unwrap(),
        ElementType::Float64,
        &dir.join("ct.pvcvol"),
    )
    .unwrap();
    write_raw_mask(&BinaryMask::new(g, bits).unwrap(), &dir.join("mask.pvcvol")).unwrap();
    println!("wrote {}", dir.display());
}
