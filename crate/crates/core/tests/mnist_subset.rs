use std::path::PathBuf;

use relaykd::data::{encode_idx, load_idx, parse_idx_images, parse_idx_labels, partition_uniform, subsample};

fn dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist5k")
}

#[test]
fn shipped_subset_loads() {
    let d = dir();
    let train = load_idx(&d.join("train-images-idx3-ubyte.gz"), &d.join("train-labels-idx1-ubyte.gz")).unwrap();
    let test = load_idx(&d.join("t10k-images-idx3-ubyte.gz"), &d.join("t10k-labels-idx1-ubyte.gz")).unwrap();
    assert_eq!((train.len(), train.dim()), (1500, 784));
    assert_eq!((test.len(), test.dim()), (3500, 784));
    assert_eq!(train.classes, 10);
    assert!(train.inputs.data().iter().chain(test.inputs.data()).all(|v| (0.0..=1.0).contains(v)));
    assert!(train.class_counts().iter().all(|&n| n > 100));

    let kept = subsample(&train, 1200, 0, false).unwrap();
    let shards = partition_uniform(&kept, 5, 0).unwrap();
    assert!(shards.iter().all(|s| s.len() == 240));
}

#[test]
fn shipped_subset_round_trips_through_the_writer() {
    let d = dir();
    let train = load_idx(&d.join("train-images-idx3-ubyte.gz"), &d.join("train-labels-idx1-ubyte.gz")).unwrap();
    let head = train.select(&(0..50).collect::<Vec<_>>());
    let (img, lbl) = encode_idx(&head, 28, 28).unwrap();
    let p = std::path::Path::new("mem");
    assert_eq!(parse_idx_images(&img, p).unwrap(), head.inputs);
    assert_eq!(parse_idx_labels(&lbl, p).unwrap(), head.labels);
}
