use std::fs;

use diagno_core::io::*;
use diagno_core::reference::ReferenceDataset;
use diagno_core::{BulkMatrix, CtsTensor, Error, SampleMeta, SampleMetaTable};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

#[test]
fn two_by_two_bulk_parses() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("b.tsv");
    fs::write(&p, "gene\tS1\tS2\nG1\t1\t2\nG2\t3\t4\n").unwrap();
    let b = load_bulk_matrix(&p).unwrap();
    assert_eq!(b.genes(), ["G1", "G2"]);
    assert_eq!(b.values(), &DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
}

#[test]
fn malformed_files_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("b.tsv");
    fs::write(&p, "gene\tS1\nG1\t1\nG1\t2\n").unwrap();
    assert!(load_bulk_matrix(&p).is_err());
    fs::write(&p, "gene\tS1\nG1\tNaN\n").unwrap();
    assert!(load_bulk_matrix(&p).is_err());
    fs::write(&p, "gene\tS1\nG1\t1\nG2\tx\n").unwrap();
    match load_bulk_matrix(&p) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn one_entry_tensor_file() {
    let t = CtsTensor::new(vec!["g".into()], vec!["c".into()], vec!["s".into()], vec![5.0], vec![0.25]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("t");
    save_cts_tensor(&t, &prefix).unwrap();
    let (m, v) = cts_paths(&prefix);
    assert_eq!(fs::read_to_string(m).unwrap().lines().count(), 2);
    assert_eq!(fs::read_to_string(v).unwrap().lines().count(), 2);
    assert!(CtsTensor::new(vec!["g".into()], vec!["c".into()], vec!["s".into()], vec![5.0], vec![-0.1]).is_err());
}

fn names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn arb_f64() -> impl Strategy<Value = f64> {
    prop_oneof![-1e6f64..1e6, Just(0.0), Just(-0.0), Just(1e-300), Just(f64::MAX), Just(0.1 + 0.2)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sample_metas_round_trip(
        c in 1usize..5,
        d1 in 0usize..3,
        d2 in 0usize..3,
        raw in prop::collection::vec((prop::collection::vec(0.01f64..10.0, 5), prop::collection::vec(arb_f64(), 6)), 1..6),
    ) {
        let metas: Vec<SampleMeta> = raw
            .iter()
            .enumerate()
            .map(|(i, (w, cov))| {
                let w = DVector::from_column_slice(&w[..c]);
                SampleMeta::new(
                    format!("s{i}"),
                    &w / w.sum(),
                    DVector::from_column_slice(&cov[..d1]),
                    DVector::from_column_slice(&cov[3..3 + d2]),
                )
                .unwrap()
            })
            .collect();
        let table = SampleMetaTable::new(names("t", c), metas).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        save_sample_metas(&table, &p).unwrap();
        prop_assert_eq!(load_sample_metas(&p).unwrap(), table);
    }

    #[test]
    fn reference_round_trips(g in 1usize..6, per in 2usize..5, c in 1usize..4, vals in prop::collection::vec(arb_f64(), 60)) {
        let cells = per * c;
        let values = DMatrix::from_fn(g, cells, |i, j| vals[(i * cells + j) % vals.len()]);
        let r = ReferenceDataset::new(
            names("g", g),
            names("cell", cells),
            names("type", c),
            (0..cells).map(|m| m % c).collect(),
            values,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (m, l) = (dir.path().join("r.tsv"), dir.path().join("l.json"));
        r.save(&m, &l).unwrap();
        let back = ReferenceDataset::load(&m, &l).unwrap();
        prop_assert_eq!(back.values(), r.values());
        prop_assert_eq!(back.genes(), r.genes());
        for (k, cell) in r.cells().iter().enumerate() {
            let j = back.cells().iter().position(|x| x == cell).unwrap();
            prop_assert_eq!(&back.cell_types()[back.labels()[j]], &r.cell_types()[r.labels()[k]]);
        }
    }

    #[test]
    fn bulk_values_survive_text(vals in prop::collection::vec(arb_f64(), 1..30)) {
        let n = vals.len();
        let b = BulkMatrix::new(vec!["g".into()], names("s", n), DMatrix::from_row_slice(1, n, &vals)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.tsv");
        save_bulk_matrix(&b, &p).unwrap();
        let back = load_bulk_matrix(&p).unwrap();
        for (x, y) in back.values().iter().zip(b.values().iter()) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
