//! Shared helpers for integration tests: locating and loading the MNIST
//! IDX files shipped in the repository's data directory.

use std::path::PathBuf;
use std::sync::OnceLock;

use driftnet::data::{load_idx, ImageSet};

/// Resolves the MNIST data directory: `DRIFTNET_DATA_DIR` if set, otherwise
/// the repository's `data/mnist`.
pub fn mnist_dir() -> PathBuf {
    if let Ok(dir) = std::env::var("DRIFTNET_DATA_DIR") {
        return PathBuf::from(dir).join("mnist");
    }
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

fn find(dir: &PathBuf, stem: &str) -> PathBuf {
    let raw = dir.join(stem);
    if raw.exists() {
        raw
    } else {
        dir.join(format!("{stem}.gz"))
    }
}

pub fn load_mnist() -> &'static (ImageSet, ImageSet) {
    static MNIST: OnceLock<(ImageSet, ImageSet)> = OnceLock::new();
    MNIST.get_or_init(|| {
        let dir = mnist_dir();
        let train = load_idx(
            &find(&dir, "train-images-idx3-ubyte"),
            &find(&dir, "train-labels-idx1-ubyte"),
        )
        .expect("train IDX pair loads");
        let test = load_idx(
            &find(&dir, "t10k-images-idx3-ubyte"),
            &find(&dir, "t10k-labels-idx1-ubyte"),
        )
        .expect("test IDX pair loads");
        (train, test)
    })
}
