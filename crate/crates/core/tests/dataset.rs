use std::io::Cursor;

use fundus_core::dataset::{
    build_dual_eye_samples, class_distribution, filter_binary, fuse_labels, load_metadata, load_metadata_from_reader,
    read_pair_manifest, read_sample_manifest, stratified_split, write_pair_manifest, write_sample_manifest,
    ClassCounts, Label, LabeledSample,
};
use fundus_core::synthdata::{self, generate_dataset, generate_image, SynthSpec};
use fundus_core::Error;
use proptest::prelude::*;

const HEADER: &str = "ID,Patient Age,Patient Sex,Left-Fundus,Right-Fundus,Left-Diagnostic Keywords,Right-Diagnostic Keywords\n";

fn meta(rows: &str) -> fundus_core::dataset::Metadata {
    load_metadata_from_reader(Cursor::new(format!("{HEADER}{rows}"))).unwrap()
}

#[test]
fn parses_rows_and_rejects_bad_ones() {
    let m = meta(
        "1,69,Female,1_left.jpg,1_right.jpg,normal fundus,cataract\n\
         2,57,Male,,2_right.jpg,normal fundus,normal fundus\n\
         3,x,Other,3_left.jpg,3_right.jpg,moderate non proliferative retinopathy,\n\
         1,50,Male,9_left.jpg,9_right.jpg,cataract,cataract\n\
         4,,,4_left.jpg,4_right.jpg,\"laser spot，moderate non proliferative retinopathy\",normal fundus\n",
    );
    assert_eq!(m.records.len(), 2);
    let r = &m.records[0];
    assert_eq!(r.patient_id, "1");
    assert_eq!(r.age, Some(69));
    assert_eq!(r.left_keywords, vec!["normal fundus"]);
    assert_eq!(r.right_keywords, vec!["cataract"]);
    assert_eq!(m.records[1].left_keywords.len(), 2);
    assert_eq!(m.records[1].age, None);
    let reasons: Vec<_> = m.rejects.iter().map(|r| (r.row, r.reason.as_str())).collect();
    assert_eq!(
        reasons,
        vec![
            (2, "missing image reference"),
            (3, "missing diagnostic keywords"),
            (4, "duplicate patient id")
        ]
    );
}

#[test]
fn missing_column_is_named() {
    let r = load_metadata_from_reader(Cursor::new("ID,Patient Age\n1,2\n"));
    match r {
        Err(Error::MissingColumn { column }) => assert_eq!(column, "Patient Sex"),
        other => panic!("unexpected {other:?}"),
    }
    assert!(matches!(
        load_metadata(std::path::Path::new("/nonexistent/meta.csv")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn filtering_and_pairing() {
    let m = meta(
        "1,60,Male,a_l,a_r,normal fundus,cataract\n\
         2,60,Male,b_l,b_r,normal fundus,normal fundus\n\
         3,60,Male,c_l,c_r,moderate non proliferative retinopathy,cataract\n\
         4,60,Male,d_l,d_r,cataract,cataract\n",
    );
    let single = filter_binary(&m.records);
    assert_eq!(class_distribution(&single), ClassCounts { normal: 3, cataract: 4 });
    let pairs = build_dual_eye_samples(&m.records);
    let labels: Vec<_> = pairs.iter().map(|p| p.label).collect();
    assert_eq!(labels, vec![Label::Cataract, Label::Normal, Label::Cataract]);
    assert!(filter_binary(&[]).is_empty());
    assert_eq!(class_distribution::<LabeledSample>(&[]), ClassCounts::default());
}

#[test]
fn fusion_truth_table() {
    use Label::*;
    for (l, r, want) in [
        (Normal, Normal, Normal),
        (Normal, Cataract, Cataract),
        (Cataract, Normal, Cataract),
        (Cataract, Cataract, Cataract),
    ] {
        assert_eq!(fuse_labels(l, r), want);
    }
}

fn samples(n_normal: usize, n_cataract: usize) -> Vec<LabeledSample> {
    (0..n_normal + n_cataract)
        .map(|i| LabeledSample {
            image_path: format!("{i}.jpg").into(),
            label: if i < n_normal { Label::Normal } else { Label::Cataract },
        })
        .collect()
}

#[test]
fn split_of_reference_counts() {
    let s = samples(2873, 293);
    let split = stratified_split(&s, 0.8, 42).unwrap();
    assert_eq!(class_distribution(&split.train), ClassCounts { normal: 2298, cataract: 234 });
    assert_eq!(class_distribution(&split.validation), ClassCounts { normal: 575, cataract: 59 });
    let again = stratified_split(&s, 0.8, 42).unwrap();
    assert_eq!(split, again);
    let other = stratified_split(&s, 0.8, 43).unwrap();
    assert_ne!(split.train, other.train);
}

#[test]
fn split_errors() {
    let s = samples(10, 1);
    assert!(matches!(
        stratified_split(&s, 0.8, 0),
        Err(Error::Stratification { class: "cataract", count: 1 })
    ));
    assert!(matches!(stratified_split(&samples(4, 4), 1.0, 0), Err(Error::Parameter(_))));
    let half = stratified_split(&samples(4, 4), 0.5, 0).unwrap();
    assert_eq!(class_distribution(&half.train), ClassCounts { normal: 2, cataract: 2 });
}

proptest! {
    #[test]
    fn split_partitions_and_preserves_proportions(n0 in 2usize..300, n1 in 2usize..300, ratio in 0.05f64..0.95, seed in 0u64..1000) {
        let s = samples(n0, n1);
        let split = stratified_split(&s, ratio, seed).unwrap();
        prop_assert_eq!(split.train.len() + split.validation.len(), s.len());
        let mut all: Vec<_> = split.train.iter().chain(&split.validation).map(|x| x.image_path.clone()).collect();
        all.sort();
        all.dedup();
        prop_assert_eq!(all.len(), s.len());
        let t = split.train.len() as f64;
        let tc = class_distribution(&split.train);
        for (c, n) in [(tc.normal, n0), (tc.cataract, n1)] {
            let base = (ratio * n as f64).floor() as usize;
            prop_assert!(c == base.clamp(1, n - 1) || c == base + 1);
            let dev = (c as f64 / t - n as f64 / s.len() as f64).abs();
            prop_assert!(dev <= 1.0 / t + 1e-12, "deviation {} > 1/{}", dev, t);
        }
    }
}

#[test]
fn manifests_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let s = samples(3, 2);
    let p = dir.path().join("m/samples.csv");
    write_sample_manifest(&p, &s).unwrap();
    assert_eq!(read_sample_manifest(&p).unwrap(), s);
    let text = std::fs::read_to_string(&p).unwrap();
    assert!(text.starts_with("path,label\n0.jpg,0\n"));
    let m = meta("1,60,Male,a_l,a_r,normal fundus,cataract\n");
    let pairs = build_dual_eye_samples(&m.records);
    let pp = dir.path().join("pairs.csv");
    write_pair_manifest(&pp, &pairs).unwrap();
    assert_eq!(read_pair_manifest(&pp).unwrap(), pairs);
    assert!(std::fs::read_to_string(&pp).unwrap().starts_with("left,right,label\n"));
}

#[test]
fn generated_images_are_deterministic_and_bounded() {
    let spec = SynthSpec::default();
    for label in [Label::Normal, Label::Cataract] {
        let a = generate_image(label, &spec, 3);
        let b = generate_image(label, &spec, 3);
        assert_eq!(a, b);
        assert_eq!((a.width, a.height, a.data.len()), (224, 224, 3 * 224 * 224));
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert_ne!(generate_image(Label::Normal, &spec, 3), generate_image(Label::Normal, &spec, 4));
}

#[test]
fn cataract_images_are_blurrier_and_brighter_in_the_centre() {
    let spec = SynthSpec::default();
    let stats = |label| {
        let imgs: Vec<_> = (0..50).map(|i| generate_image(label, &spec, i)).collect();
        let lap = imgs.iter().map(synthdata::laplacian_variance).sum::<f64>() / 50.0;
        let centre: Vec<f64> = imgs.iter().map(|im| synthdata::center_brightness(im, 0.25)).collect();
        (lap, centre)
    };
    let (lap_n, c_n) = stats(Label::Normal);
    let (lap_c, c_c) = stats(Label::Cataract);
    assert!(lap_c < lap_n, "{lap_c} vs {lap_n}");
    // a single brightness threshold separates the classes
    let mut best = 0usize;
    for t in c_n.iter().chain(&c_c) {
        let correct = c_n.iter().filter(|&&v| v <= *t).count() + c_c.iter().filter(|&&v| v > *t).count();
        best = best.max(correct);
    }
    assert!(best as f64 / 100.0 >= 0.95, "probe accuracy {}", best as f64 / 100.0);
}

#[test]
fn synthetic_dataset_round_trips_through_ingestion() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        n_normal: 6,
        n_cataract: 5,
        image_size: 64,
        ..SynthSpec::default()
    };
    let ds = generate_dataset(&spec, dir.path()).unwrap();
    let meta = load_metadata(&ds.metadata_csv).unwrap();
    assert!(meta.rejects.is_empty());
    assert_eq!(meta.records.len(), 6);
    assert_eq!(class_distribution(&ds.single), ClassCounts { normal: 6, cataract: 5 });
    // the spare eye carries a non-target keyword, so its pair is dropped
    assert_eq!(ds.pairs.len(), 5);
    let combos: Vec<_> = meta.records[..4]
        .iter()
        .map(|r| (r.left_keywords[0].as_str(), r.right_keywords[0].as_str()))
        .collect();
    assert_eq!(
        combos,
        vec![
            ("normal fundus", "normal fundus"),
            ("normal fundus", "cataract"),
            ("cataract", "normal fundus"),
            ("cataract", "cataract")
        ]
    );
    let fused: Vec<_> = ds.pairs[..4].iter().map(|p| p.label).collect();
    assert_eq!(fused, vec![Label::Normal, Label::Cataract, Label::Cataract, Label::Cataract]);
    for s in &ds.single {
        let img = fundus_core::preprocess::load_image(&ds.image_root.join(&s.image_path)).unwrap();
        assert_eq!((img.width, img.height), (64, 64));
    }
    assert!(matches!(
        generate_dataset(&SynthSpec { n_normal: 0, n_cataract: 0, ..spec }, dir.path()),
        Err(Error::Input(_))
    ));
}

#[test]
fn counting_example() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        image_size: 32,
        ..SynthSpec::default()
    };
    let ds = generate_dataset(&spec, dir.path()).unwrap();
    assert_eq!(load_metadata(&ds.metadata_csv).unwrap().records.len(), 100);
    assert_eq!(ds.single.len(), 200);
    assert_eq!(std::fs::read_dir(dir.path().join("images")).unwrap().count(), 200);
}
