//! Regenerates the bundled fixture archives and images.

use std::path::PathBuf;

fn main() {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures"));
    mcrp_core::fixtures::write_bundled(&dir).expect("write fixtures");
    println!("wrote fixtures to {}", dir.display());
}
