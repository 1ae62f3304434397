use std::collections::BTreeSet;

use diagno_core::reference::ReferenceDataset;
use diagno_core::select::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// 100 genes over two types of 30 cells; genes 0..10 are 4-fold higher
/// (two log2 units) in type A. Log-scale noise has sd 0.2.
fn planted_reference(seed: u64) -> ReferenceDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.2).unwrap();
    let cells = 60;
    let values = DMatrix::from_fn(100, cells, |g, m| {
        let up = if g < 10 && m < 30 { 2.0 } else { 0.0 };
        5.0 + up + noise.sample(&mut rng)
    });
    ReferenceDataset::new(
        (0..100).map(|g| format!("g{g:03}")).collect(),
        (0..cells).map(|m| format!("c{m}")).collect(),
        vec!["A".into(), "B".into()],
        (0..cells).map(|m| usize::from(m >= 30)).collect(),
        values,
    )
    .unwrap()
}

#[test]
fn planted_de_genes_are_recovered_exactly() {
    for seed in 1..=3 {
        let sel = select_pairs(&planted_reference(seed), &BTreeSet::new(), &SelectionParams::default()).unwrap();
        let genes: BTreeSet<&str> = sel.stability_set().iter().map(|(g, _)| g.as_str()).collect();
        let planted: BTreeSet<String> = (0..10).map(|g| format!("g{g:03}")).collect();
        assert_eq!(genes, planted.iter().map(String::as_str).collect(), "seed {seed}");
        // Noise suppression only removes stability pairs, never adds.
        assert!(sel.pairs().all(|p| sel.stability_set().contains(p)));
    }
}

#[test]
fn markers_are_kept_with_provenance() {
    let reference = planted_reference(4);
    let markers: BTreeSet<Pair> = [("g000".into(), "A".into()), ("g050".into(), "B".into())].into();
    let sel = select_pairs(&reference, &markers, &SelectionParams::default()).unwrap();
    assert_eq!(sel.provenance(&("g050".into(), "B".into())), Some(Provenance::Marker));
    assert_eq!(sel.provenance(&("g000".into(), "A".into())), Some(Provenance::Both));
}

#[test]
fn selection_round_trips() {
    let sel = select_pairs(&planted_reference(5), &BTreeSet::new(), &SelectionParams::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("selection.json");
    sel.save(&path).unwrap();
    let back = PairSelection::load(&path).unwrap();
    assert_eq!(back.pairs().collect::<Vec<_>>(), sel.pairs().collect::<Vec<_>>());
    for p in sel.pairs() {
        assert_eq!(back.provenance(p), sel.provenance(p));
        assert_eq!(back.score(p), sel.score(p));
    }
}

#[test]
fn bh_hand_examples() {
    for a in benjamini_hochberg(&[0.01, 0.02, 0.03]).unwrap() {
        assert!((a - 0.03).abs() < 1e-15);
    }
    // Ranks 1, 3, 2 give p*m/k = 0.03, 0.04, 0.045; the running minimum
    // from the top lowers the last to 0.04.
    let adj = benjamini_hochberg(&[0.01, 0.04, 0.03]).unwrap();
    let expect = [0.03, 0.04, 0.04];
    for (a, e) in adj.iter().zip(expect) {
        assert!((a - e).abs() < 1e-15, "{adj:?}");
    }
}

#[test]
fn wilcoxon_two_by_two_is_one_third() {
    let t = wilcoxon_rank_sum(&[0.1, 0.2], &[0.3, 0.4]).unwrap();
    assert!(t.exact);
    assert!((t.p_value - 1.0 / 3.0).abs() < 1e-15);
}

/// Exhaustive two-sided exact p: the share of label assignments whose U is
/// at least as far from its mean as the observed one.
fn enumerate_p(a: &[f64], b: &[f64]) -> f64 {
    let all: Vec<f64> = a.iter().chain(b).copied().collect();
    let n = all.len();
    let u_of = |mask: u32| -> f64 {
        let mut u = 0.0;
        for i in 0..n {
            for j in 0..n {
                if mask >> i & 1 == 1 && mask >> j & 1 == 0 {
                    u += if all[i] > all[j] {
                        1.0
                    } else if all[i] == all[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        u
    };
    let centre = (a.len() * b.len()) as f64 / 2.0;
    let observed = (u_of((1 << a.len()) - 1) - centre).abs();
    let (mut hit, mut total) = (0u32, 0u32);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize == a.len() {
            total += 1;
            if (u_of(mask) - centre).abs() >= observed - 1e-12 {
                hit += 1;
            }
        }
    }
    f64::from(hit) / f64::from(total)
}

proptest! {
    #[test]
    fn bh_is_permutation_equivariant(ps in prop::collection::vec(0.0f64..=1.0, 1..20), rot in 0usize..20) {
        let adj = benjamini_hochberg(&ps).unwrap();
        let k = rot % ps.len();
        let mut rotated = ps.clone();
        rotated.rotate_left(k);
        let mut expect = adj.clone();
        expect.rotate_left(k);
        prop_assert_eq!(benjamini_hochberg(&rotated).unwrap(), expect);
        for (a, p) in adj.iter().zip(&ps) {
            prop_assert!(*a >= *p * (1.0 - 1e-12) && *a <= 1.0);
        }
    }

    #[test]
    fn exact_wilcoxon_matches_enumeration(
        a in prop::collection::vec(0u8..6, 1..5),
        b in prop::collection::vec(0u8..6, 1..5),
    ) {
        let a: Vec<f64> = a.into_iter().map(f64::from).collect();
        let b: Vec<f64> = b.into_iter().map(f64::from).collect();
        let t = wilcoxon_rank_sum(&a, &b).unwrap();
        prop_assert!(t.exact);
        prop_assert!((t.p_value - enumerate_p(&a, &b)).abs() < 1e-12);
    }
}
