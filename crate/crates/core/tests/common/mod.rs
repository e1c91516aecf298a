#![allow(dead_code)]

pub mod gradcheck;
pub mod oracle;
pub mod synthetic;

use std::path::PathBuf;

/// MNIST directory: `LBADMM_MNIST_DIR`, else `/root/data/mnist`.
pub fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("LBADMM_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("/root/data/mnist"));
    dir.join("train-images-idx3-ubyte").exists().then_some(dir)
}
