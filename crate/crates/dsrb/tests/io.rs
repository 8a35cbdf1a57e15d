use std::fs;

use dsrb::io;
use dsrb_core::backbone::{generate_synthetic, SyntheticSceneSpec};
use dsrb_core::pprb::build_prototypes;
use dsrb_core::csrl::CategoryFeatureMaps;
use dsrb_core::train::TraceRow;
use dsrb_core::LabelMatrix;

fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("cat{i}")).collect()
}

#[test]
fn label_csv_round_trip_keeps_unknowns_and_soft_values() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/labels.csv");
    let labels = LabelMatrix::from_hard(2, 3, vec![1.0, 0.0, -1.0, -1.0, -1.0, 1.0]).unwrap();
    let files = vec!["a.png".to_string(), "b.png".to_string()];
    io::write_labels_csv(&path, &names(3), &files, &labels).unwrap();
    let (n, f, back) = io::read_labels_csv(&path).unwrap();
    assert_eq!((n, f, back), (names(3), files, labels));
    assert!(fs::read_to_string(&path).unwrap().starts_with("image,cat0,cat1,cat2"));
}

#[test]
fn malformed_label_csv_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("labels.csv");
    fs::write(&path, "image,a,b\nx.png,1,banana\n").unwrap();
    assert!(io::read_labels_csv(&path).is_err());
}

#[test]
fn image_directory_round_trip_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSceneSpec {
        categories: 4,
        height: 16,
        width: 16,
        object_size: (4, 7),
        ..Default::default()
    };
    let data = generate_synthetic(&spec, 5).unwrap();
    io::save_image_dir(dir.path(), &names(4), &data.images, &data.labels).unwrap();
    let back = io::load_image_dir(dir.path(), 16, 16).unwrap();
    assert_eq!(back.images, data.images);
    assert_eq!(back.labels, data.labels);
    assert_eq!(back.categories, names(4));
}

#[test]
fn archives_are_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let maps: Vec<CategoryFeatureMaps> = (0..3)
        .map(|i| CategoryFeatureMaps {
            categories: 2,
            channels: 2,
            height: 2,
            width: 2,
            maps: (0..16).map(|j| (i * 16 + j) as f64 / 7.0 - 1e-300).collect(),
            attention: vec![0.25; 8],
        })
        .collect();
    let labels = LabelMatrix::from_hard(3, 2, vec![1.0, 0.0, 1.0, 1.0, -1.0, 1.0]).unwrap();
    let bank = build_prototypes(&maps, &labels, 1, 10).unwrap();
    let path = dir.path().join("bank.bin");
    io::save_bank(&path, &bank).unwrap();
    let back = io::load_bank(&path).unwrap();
    assert_eq!(back, bank);
    let bits = |b: &dsrb_core::pprb::PrototypeBank| b.prototypes.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&bank));
    assert!(!path.with_extension("partial").exists());
}

#[test]
fn coco_annotations_become_image_level_labels() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("instances.json");
    fs::write(
        &path,
        r#"{"images":[{"id":7,"file_name":"b.jpg"},{"id":3,"file_name":"a.jpg"}],
            "categories":[{"id":18,"name":"dog"},{"id":1,"name":"person"}],
            "annotations":[{"image_id":7,"category_id":1},{"image_id":7,"category_id":1},{"image_id":3,"category_id":18}]}"#,
    )
    .unwrap();
    let coco = io::read_coco(&path).unwrap();
    assert_eq!(coco.categories, vec!["person", "dog"]);
    assert_eq!(coco.category_ids, vec![1, 18]);
    assert_eq!(coco.files, vec!["a.jpg", "b.jpg"]);
    assert_eq!(coco.labels.values(), &[-1.0, 1.0, 1.0, -1.0]);
}

#[test]
fn coco_annotation_for_unknown_image_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(
        &path,
        r#"{"images":[],"categories":[{"id":1,"name":"x"}],"annotations":[{"image_id":9,"category_id":1}]}"#,
    )
    .unwrap();
    assert!(io::read_coco(&path).is_err());
}

#[test]
fn embeddings_follow_category_order() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vectors.txt");
    fs::write(&path, "dog 1 2\ncat 3 4\nbird 5 6\n").unwrap();
    let e = io::read_embeddings(&path, &["cat".into(), "dog".into()]).unwrap();
    assert_eq!((e.categories, e.dim), (2, 2));
    assert_eq!(e.data, vec![3.0, 4.0, 1.0, 2.0]);
    assert!(io::read_embeddings(&path, &["fish".into()]).is_err());
    fs::write(&path, "dog 1 2\ncat 3\n").unwrap();
    assert!(io::read_embeddings(&path, &["dog".into()]).is_err());
}

#[test]
fn trace_append_read_and_truncate() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    let row = |epoch, iteration| TraceRow {
        epoch,
        iteration,
        cls: 0.1 * epoch as f64,
        cst: 0.2,
        total: 0.3,
        mean_alpha: 0.5,
        mean_beta: 0.5,
        clean: 0.1,
        instance: 0.0,
        prototype: 1.0 / 3.0,
    };
    io::append_trace(&path, &[row(1, 0), row(1, 1)]).unwrap();
    io::append_trace(&path, &[row(2, 2)]).unwrap();
    assert_eq!(io::read_trace(&path).unwrap(), vec![row(1, 0), row(1, 1), row(2, 2)]);
    assert_eq!(fs::read_to_string(&path).unwrap().lines().next().unwrap(), io::TRACE_HEADER);
    io::truncate_trace(&path, 1).unwrap();
    assert_eq!(io::read_trace(&path).unwrap(), vec![row(1, 0), row(1, 1)]);
}
