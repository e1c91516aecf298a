mod common;

use lbadmm::data::{load_mnist, Split};

#[test]
fn mnist_checksums() {
    let Some(dir) = common::mnist_dir() else {
        eprintln!("MNIST not found, skipping");
        return;
    };
    let (train, test) = load_mnist::<f64>(&dir).unwrap();
    assert_eq!((train.len(), test.len()), (60000, 10000));
    assert_eq!((train.split, test.split), (Split::Train, Split::Test));
    assert_eq!(train.pixel_checksum, 1567298545);
    assert_eq!(test.pixel_checksum, 264923200);
    assert_eq!(train.labels.iter().sum::<usize>(), 267236);
    assert_eq!(test.labels.iter().sum::<usize>(), 44434);
    assert!((train.mean - 0.1306604762738429).abs() < 1e-12, "{}", train.mean);
    // the test split is centered with the training mean
    assert_eq!(test.mean, train.mean);
    assert_eq!(train.sample_shape(), &[1, 28, 28]);
}
