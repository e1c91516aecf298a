//! Small MNIST-shaped IDX files: class `k` lights up a 7x7 block whose
//! position depends on `k`, plus noise.

use std::path::Path;

use lbadmm::data::{encode_idx, IMAGES_MAGIC, LABELS_MAGIC};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn images(n: usize, rng: &mut ChaCha8Rng) -> (Vec<u8>, Vec<u8>) {
    let mut pixels = vec![0u8; n * 784];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 10) as u8;
        labels.push(label);
        let (by, bx) = (3 + (label as usize / 5) * 12, 1 + (label as usize % 5) * 5);
        let img = &mut pixels[i * 784..(i + 1) * 784];
        for p in img.iter_mut() {
            *p = rng.random_range(0..40);
        }
        for y in by..by + 7 {
            for x in bx..(bx + 7).min(28) {
                img[y * 28 + x] = rng.random_range(180..=255);
            }
        }
    }
    (pixels, labels)
}

/// Write train/t10k IDX pairs into `dir`.
pub fn write_dataset(dir: &Path, n_train: usize, n_test: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::fs::create_dir_all(dir).unwrap();
    for (prefix, n) in [("train", n_train), ("t10k", n_test)] {
        let (pixels, labels) = images(n, &mut rng);
        std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), encode_idx(IMAGES_MAGIC, &[n, 28, 28], &pixels)).unwrap();
        std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), encode_idx(LABELS_MAGIC, &[n], &labels)).unwrap();
    }
}
