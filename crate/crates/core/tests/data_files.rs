use std::collections::BTreeSet;
use std::path::PathBuf;

use milpdl::data::{kfold_split, load_bags_csv, write_bags_csv, BagDataset, SynthConfig};
use milpdl::MilError;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

#[test]
fn toy_fixture_loads_exactly() {
    let ds = load_bags_csv(fixture("toy_bags.csv")).unwrap();
    assert_eq!(ds.feature_dim, 3);
    assert_eq!(ds.len(), 2);

    let alpha = &ds.bags[0];
    assert_eq!(alpha.id, "alpha");
    assert!(alpha.label);
    assert_eq!(
        alpha.instance_labels.as_deref(),
        Some(&[false, true, false][..])
    );
    assert_eq!(alpha.instances.row(0), &[0.5, -1.25, 3.0]);
    assert_eq!(alpha.instances.row(1), &[-7.75, 0.1, 0.2]);
    assert_eq!(alpha.instances.row(2), &[0.0, 0.0, -0.0]);

    let beta = &ds.bags[1];
    assert_eq!(beta.id, "beta");
    assert!(!beta.label);
    assert_eq!(beta.instance_labels, None);
    assert_eq!(beta.instances.row(0), &[1e-3, 2.5, -0.125]);
    assert_eq!(beta.instances.row(1), &[4.0, 5.0, 6.0]);
}

#[test]
fn written_files_reload_identically() {
    let dir = tempfile::tempdir().unwrap();
    let toy = load_bags_csv(fixture("toy_bags.csv")).unwrap();
    let synth = SynthConfig {
        n_bags: 12,
        feature_dim: 4,
        signal_dims: 4,
        seed: 3,
        ..SynthConfig::default()
    }
    .generate()
    .unwrap();
    for ds in [toy, synth] {
        let path = dir.path().join("bags.csv");
        write_bags_csv(&ds, &path).unwrap();
        let back = load_bags_csv(&path).unwrap();
        assert_eq!(back.bags, ds.bags);
        assert_eq!(back.feature_dim, ds.feature_dim);
    }
}

#[test]
fn ragged_row_is_reported_with_its_line() {
    match load_bags_csv(fixture("ragged_row.csv")) {
        Err(MilError::Parse { line, .. }) => assert_eq!(line, 4),
        other => panic!("expected a parse error, got {other:?}"),
    }
    let msg = load_bags_csv(fixture("ragged_row.csv"))
        .unwrap_err()
        .to_string();
    assert!(msg.contains("ragged_row.csv") && msg.contains('4'), "{msg}");
}

#[test]
fn bad_tokens_and_label_violations_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("bag_id,instance_label,label,f0\na,2,1,0.5\n", 2),
        ("bag_id,instance_label,label,f0\na,0,1,0.5\na,0,0,0.1\n", 3),
        ("bag_id,instance_label,label,f0\na,0,0,x\n", 2),
        ("bag_id,instance_label,label,f0\na,1,0,0.5\n", 2),
    ];
    for (text, expected_line) in cases {
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, text).unwrap();
        match load_bags_csv(&path) {
            Err(MilError::Parse { line, .. }) => assert_eq!(line, expected_line, "{text}"),
            other => panic!("{text}: expected a parse error, got {other:?}"),
        }
    }
    assert!(load_bags_csv(dir.path().join("missing.csv")).is_err());
}

fn synth(n_bags: usize, seed: u64) -> BagDataset {
    SynthConfig {
        n_bags,
        feature_dim: 3,
        signal_dims: 3,
        mean_bag_size: 4.0,
        positive_bag_fraction: 0.37,
        seed,
        ..SynthConfig::default()
    }
    .generate()
    .unwrap()
}

#[test]
fn folds_partition_and_stratify() {
    for (n, k, seed) in [
        (50, 10, 0),
        (37, 5, 1),
        (11, 2, 2),
        (20, 20, 3),
        (101, 7, 4),
    ] {
        let ds = synth(n, seed);
        let labels = ds.labels();
        let folds = kfold_split(&ds, k, seed).unwrap();
        assert_eq!(folds.len(), k);

        let mut seen = BTreeSet::new();
        for f in &folds {
            for &i in &f.test {
                assert!(seen.insert(i), "index {i} is in two test folds");
            }
            let train: BTreeSet<_> = f.train.iter().copied().collect();
            let test: BTreeSet<_> = f.test.iter().copied().collect();
            assert!(train.is_disjoint(&test));
            assert_eq!(train.len() + test.len(), n);
        }
        assert_eq!(seen, (0..n).collect());

        let pos = |idx: &[usize]| idx.iter().filter(|&&i| labels[i]).count();
        let pos_counts: Vec<usize> = folds.iter().map(|f| pos(&f.test)).collect();
        let neg_counts: Vec<usize> = folds.iter().map(|f| f.test.len() - pos(&f.test)).collect();
        for counts in [pos_counts, neg_counts] {
            let spread = counts.iter().max().unwrap() - counts.iter().min().unwrap();
            assert!(spread <= 1, "class counts {counts:?}");
        }
        assert_eq!(folds, kfold_split(&ds, k, seed).unwrap());
    }
}

#[test]
fn too_many_folds_is_an_error() {
    let ds = synth(6, 0);
    assert!(kfold_split(&ds, 7, 0).is_err());
    assert!(kfold_split(&ds, 1, 0).is_err());
}
