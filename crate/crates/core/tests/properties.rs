use std::collections::BTreeSet;

use dml_core::embed::{l2_normalize, split_by_classes, synth_gaussian_classes, SynthSpec};
use dml_core::fid::{fid, frechet_distance, GaussianSummary};
use dml_core::linalg::{norm, Matrix};
use dml_core::losses::row_softmax_kl;
use dml_core::metrics::{density, nmi, recall_at_k, spectral_decay, Metric};
use dml_core::splits::{ags, build_split_sequence, AgsInput, InitialSplit, SplitConfig, StateKind};
use dml_core::EmbeddingSet;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

/// Random `A·Aᵀ + εI`, with `A` being `d × d`.
fn psd(d: usize) -> impl Strategy<Value = Matrix> {
    matrix(d, d).prop_map(move |a| {
        let mut c = a.matmul(&a.transpose()).unwrap();
        for i in 0..d {
            c[(i, i)] += 1e-3;
        }
        c
    })
}

fn summary_pair() -> impl Strategy<Value = (GaussianSummary, GaussianSummary)> {
    (1usize..=6).prop_flat_map(|d| {
        let g = move || {
            (prop::collection::vec(-5.0f64..5.0, d), psd(d)).prop_map(|(mean, cov)| GaussianSummary {
                mean,
                cov,
                n: 50,
            })
        };
        (g(), g())
    })
}

/// Labelled set with `classes` classes of `per` rows each.
fn labelled(classes: usize, per: usize, dim: usize) -> impl Strategy<Value = EmbeddingSet> {
    matrix(classes * per, dim).prop_map(move |m| {
        let labels = (0..classes * per).map(|i| (i / per) as u32).collect();
        EmbeddingSet::new(m, labels).unwrap()
    })
}

/// Gram-Schmidt on a random square matrix.
fn orthogonal(d: usize) -> impl Strategy<Value = Matrix> {
    matrix(d, d).prop_filter_map("rank deficient draw", move |a| {
        let mut q: Vec<Vec<f64>> = Vec::new();
        for i in 0..d {
            let mut v = a.row(i).to_vec();
            for u in &q {
                let p: f64 = v.iter().zip(u).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(u).for_each(|(x, y)| *x -= p * y);
            }
            let n = norm(&v);
            if n < 1e-3 {
                return None;
            }
            q.push(v.into_iter().map(|x| x / n).collect());
        }
        Some(Matrix::from_rows(&q).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fid_is_symmetric_and_non_negative((p, q) in summary_pair()) {
        let pq = frechet_distance(&p, &q).unwrap();
        let qp = frechet_distance(&q, &p).unwrap();
        prop_assert!(pq >= 0.0);
        prop_assert!((pq - qp).abs() <= 1e-8 * (1.0 + pq.abs()), "{pq} vs {qp}");
    }

    #[test]
    fn fid_ignores_common_translation((p, q) in summary_pair(), shift in -10.0f64..10.0) {
        let base = frechet_distance(&p, &q).unwrap();
        let mv = |s: &GaussianSummary| GaussianSummary { mean: s.mean.iter().map(|m| m + shift).collect(), ..s.clone() };
        let moved = frechet_distance(&mv(&p), &mv(&q)).unwrap();
        prop_assert!((base - moved).abs() <= 1e-8 * (1.0 + base.abs()), "{base} vs {moved}");
    }

    #[test]
    fn fid_of_a_set_with_itself_is_zero(set in labelled(2, 6, 3)) {
        prop_assert_eq!(fid(&set, &set).unwrap(), 0.0);
    }

    #[test]
    fn normalization_is_idempotent(m in matrix(8, 4)) {
        prop_assume!(m.row_iter().all(|r| norm(r) > 1e-6));
        let set = EmbeddingSet::new(m, vec![0; 8]).unwrap();
        let once = l2_normalize(&set).unwrap();
        let twice = l2_normalize(&once).unwrap();
        for (a, b) in once.data().as_slice().iter().zip(twice.data().as_slice()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        prop_assert!(once.data().row_iter().all(|r| (norm(r) - 1.0).abs() <= 1e-9));
    }

    #[test]
    fn class_split_partitions_rows(set in labelled(4, 3, 2), pick in prop::collection::btree_set(0u32..4, 1..4)) {
        let (train, test) = split_by_classes(&set, &pick).unwrap();
        prop_assert_eq!(train.len() + test.len(), set.len());
        prop_assert!(train.labels().iter().all(|l| pick.contains(l)));
        prop_assert!(test.labels().iter().all(|l| !pick.contains(l)));
        let mut all: Vec<u32> = train.labels().iter().chain(test.labels()).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, set.labels().to_vec());
    }

    #[test]
    fn density_ratio_ignores_scale_and_shift(set in labelled(3, 4, 3), s in 0.1f64..10.0, t in -5.0f64..5.0) {
        let d0 = density(&set).unwrap();
        let mut m = set.data().clone();
        m.as_mut_slice().iter_mut().for_each(|v| *v = s * *v + t);
        let d1 = density(&set.with_data(m).unwrap()).unwrap();
        prop_assert!((d0.pi_ratio - d1.pi_ratio).abs() <= 1e-9 * d0.pi_ratio.max(1.0));
        prop_assert!((d1.pi_intra - s * d0.pi_intra).abs() <= 1e-9 * d1.pi_intra.max(1.0));
    }

    #[test]
    fn spectral_decay_ignores_rotation(set in labelled(3, 5, 4), q in orthogonal(4)) {
        let base = spectral_decay(&set, 1);
        prop_assume!(base.is_ok());
        let rotated = set.with_data(set.data().matmul(&q).unwrap()).unwrap();
        let r = spectral_decay(&rotated, 1).unwrap();
        prop_assert!((base.unwrap() - r).abs() <= 1e-8);
    }

    #[test]
    fn nmi_is_invariant_to_relabelling(a in prop::collection::vec(0u8..4, 2..40), perm in Just([3u8, 0, 2, 1])) {
        let b: Vec<u8> = a.iter().map(|&x| perm[x as usize]).collect();
        let v = nmi(&a, &b).unwrap();
        let distinct = a.iter().collect::<BTreeSet<_>>().len();
        if distinct > 1 {
            prop_assert!((v - 1.0).abs() <= 1e-12, "{v}");
        }
        let other: Vec<u8> = a.iter().rev().copied().collect();
        let w = nmi(&a, &other).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&w));
    }

    #[test]
    fn recall_grows_with_k(set in labelled(3, 4, 2)) {
        let r = recall_at_k(&set, &[1, 2, 4, 8], Metric::Euclidean).unwrap();
        let v: Vec<f64> = r.recall_at.values().copied().collect();
        prop_assert!(v.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn kl_is_non_negative(a in matrix(4, 4), b in matrix(4, 4), t in 0.5f64..4.0) {
        prop_assert!(row_softmax_kl(&a, &b, t).unwrap().value >= -1e-12);
    }

    #[test]
    fn ags_ignores_affine_fid_rescaling(
        fids in prop::collection::btree_set(0u32..1000, 2..8),
        scale in 0.01f64..100.0,
        offset in -50.0f64..50.0,
        seed in 0u64..1000,
    ) {
        let fids: Vec<f64> = fids.into_iter().map(f64::from).collect();
        let scores: Vec<f64> = (0..fids.len()).map(|i| ((i as u64 * 7 + seed) % 11) as f64 / 10.0).collect();
        let a = ags(&AgsInput { fids: fids.clone(), scores: scores.clone() }).unwrap();
        let moved = fids.iter().map(|f| scale * f + offset).collect();
        let b = ags(&AgsInput { fids: moved, scores }).unwrap();
        prop_assert!((a - b).abs() <= 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn split_sequence_invariants(seed in 0u64..10_000) {
        let data = synth_gaussian_classes(&SynthSpec::new(8, 12, 4, seed)).unwrap();
        let cfg = SplitConfig { seed, ..Default::default() };
        let seq = build_split_sequence(&data, &InitialSplit::RandomHalf, cfg).unwrap();
        let count = |classes: &[u32]| data.labels().iter().filter(|l| classes.contains(l)).count();
        let mut last_swap_fid = f64::NEG_INFINITY;
        for s in &seq.states {
            let train: BTreeSet<u32> = s.train_classes.iter().copied().collect();
            prop_assert!(!s.train_classes.is_empty() && !s.test_classes.is_empty());
            prop_assert!(s.test_classes.iter().all(|c| !train.contains(c)));
            let kept = count(&s.train_classes) + count(&s.test_classes);
            match s.kind {
                StateKind::Initial | StateKind::Swap => {
                    prop_assert!(s.fid > last_swap_fid);
                    last_swap_fid = s.fid;
                    prop_assert_eq!(kept, data.len());
                }
                StateKind::Removal => prop_assert!(kept as f64 >= 0.5 * data.len() as f64),
            }
        }
    }
}
