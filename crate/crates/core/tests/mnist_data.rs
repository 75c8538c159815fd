//! Data-pipeline checks that need the real MNIST files.

mod common;

use driftnet::data::{rotate_image, IMAGE_DIM};

#[test]
fn mnist_train_pair_has_sixty_thousand_rows() {
    let (train, test) = common::load_mnist();
    assert_eq!(train.len(), 60_000);
    assert_eq!(train.images().ncols(), IMAGE_DIM);
    assert_eq!(test.len(), 10_000);
    // byte/255 normalization keeps everything in [0,1]
    assert!(train.images().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn rotating_by_90_then_270_roughly_restores_real_digits() {
    let (train, _) = common::load_mnist();
    let mut worst: f32 = 0.0;
    for i in 0..100 {
        let original: Vec<f32> = train.images().row(i).to_vec();
        let quarter = rotate_image(&original, 90.0).unwrap();
        let back = rotate_image(&quarter, 270.0).unwrap();
        for (a, b) in original.iter().zip(&back) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst < 0.25, "compose-rotation error {worst} on real digits");
}

#[test]
fn label_histogram_matches_the_canonical_distribution() {
    let (train, _) = common::load_mnist();
    let mut counts = [0usize; 10];
    for &l in train.labels() {
        counts[l as usize] += 1;
    }
    assert_eq!(counts, [5923, 6742, 5958, 6131, 5842, 5421, 5918, 6265, 5851, 5949]);
}
