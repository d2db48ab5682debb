use cvpb::data::{load_cifar10, parse_cifar10, synth_shapes, CifarSplit, ShapesParams};
use cvpb_core::Error;

const RECORD: usize = 1 + 3072;

fn records(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        out.push(l);
        out.extend((0..3072).map(|p| ((p * 7 + i * 13) % 256) as u8));
    }
    out
}

#[test]
fn two_records_parse_with_scaled_pixels() {
    let bytes = records(&[3, 9]);
    let d = parse_cifar10(&bytes).unwrap();
    assert_eq!(d.len(), 2);
    assert_eq!(d.labels, vec![3, 9]);
    assert_eq!(d.images.shape(), &[2, 3, 32, 32]);
    assert_eq!(d.images.data()[0], bytes[1] as f32 / 255.0);
    // Planes are R, G, B in order; image 1 starts at its own record.
    assert_eq!(d.images.data()[1024], bytes[1 + 1024] as f32 / 255.0);
    assert_eq!(d.images.data()[3072 + 5], bytes[RECORD + 1 + 5] as f32 / 255.0);
}

#[test]
fn truncated_record_names_its_offset() {
    let mut bytes = records(&[1, 2]);
    bytes.truncate(RECORD + 100);
    let err = parse_cifar10(&bytes).unwrap_err().to_string();
    assert!(err.contains(&RECORD.to_string()), "{err}");
}

#[test]
fn label_above_nine_is_rejected_with_offset() {
    let mut bytes = records(&[1, 2]);
    bytes[RECORD] = 10;
    let err = parse_cifar10(&bytes).unwrap_err().to_string();
    assert!(err.contains(&RECORD.to_string()) && err.contains("10"), "{err}");
}

#[test]
fn batch_file_needs_ten_thousand_records() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("test_batch.bin"), records(&[0, 1, 2])).unwrap();
    assert!(matches!(load_cifar10(dir.path(), CifarSplit::Test), Err(Error::InvalidArgument(_))));
    // A single file given directly is read as-is.
    let d = load_cifar10(&dir.path().join("test_batch.bin"), CifarSplit::Test).unwrap();
    assert_eq!(d.len(), 3);
}

#[test]
fn shapes_are_deterministic_per_seed() {
    let p = ShapesParams {
        count: 40,
        ..Default::default()
    };
    let a = synth_shapes(&p, 5).unwrap();
    let b = synth_shapes(&p, 5).unwrap();
    let c = synth_shapes(&p, 6).unwrap();
    assert!(a.images.bit_eq(&b.images));
    assert_eq!(a.labels, b.labels);
    assert!(!a.images.bit_eq(&c.images));
}

#[test]
fn shapes_classes_are_exactly_balanced() {
    let p = ShapesParams {
        count: 60,
        classes: 4,
        ..Default::default()
    };
    let d = synth_shapes(&p, 1).unwrap();
    for c in 0..4 {
        assert_eq!(d.labels.iter().filter(|&&l| l == c).count(), 15);
    }
    assert!(d.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(d.images.shape(), &[60, 3, 32, 32]);
}

#[test]
fn shapes_need_two_classes() {
    let p = ShapesParams {
        classes: 1,
        ..Default::default()
    };
    assert!(synth_shapes(&p, 0).is_err());
}
