use copra_core::merge::{align, align_objective, fuse, fusion_mixture_gap, gap_closed_form, mix, product_bound, AlignMap, MergeWeights};
use copra_core::model::{AdapterMeta, AdapterSet, LoraAdapter};
use copra_core::ndcore::{softmax_cross_entropy, Matrix};
use copra_core::prune::{structured_prune, unstructured_prune, zero_fraction, SparsitySpec, StructuredSpec};
use copra_core::schedule::RngStream;
use proptest::prelude::*;
use rand::Rng;

fn mat(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0)).unwrap()
}

fn naive_matmul(a: &Matrix, b: &Matrix) -> Vec<f64> {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|t| a.get(i, t) * b.get(t, j)).sum();
        }
    }
    out
}

fn adapter_set(dims: &[usize], rank: usize, scale: f64, rng: &mut RngStream) -> AdapterSet {
    let adapters = dims
        .windows(2)
        .map(|p| LoraAdapter::new(mat(rank, p[0], rng), mat(p[1], rank, rng), scale).unwrap())
        .collect();
    AdapterSet::new(adapters, AdapterMeta::default()).unwrap()
}

fn random_orthogonal(r: usize, rng: &mut RngStream) -> Matrix {
    // Gram-Schmidt on a random square matrix
    let m = mat(r, r, rng);
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for j in 0..r {
        let mut v: Vec<f64> = (0..r).map(|i| m.get(i, j)).collect();
        for q in &cols {
            let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        cols.push(v);
    }
    Matrix::from_fn(r, r, |i, j| cols[j][i]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_naive_and_associates(seed in any::<u64>(), n in 1usize..7, k in 1usize..7, m in 1usize..7, p in 1usize..7) {
        let mut rng = RngStream::new(seed, 0);
        let (a, b, c) = (mat(n, k, &mut rng), mat(k, m, &mut rng), mat(m, p, &mut rng));
        let ab = a.matmul(&b).unwrap();
        for (x, y) in ab.data().iter().zip(naive_matmul(&a, &b)) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        let left = ab.matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(left.sub(&right).unwrap().max_abs() < 1e-9);
        prop_assert_eq!(a.matmul_nt(&b.transpose()).unwrap(), ab.clone());
        prop_assert_eq!(a.transpose().matmul_tn(&b).unwrap(), ab);
    }

    #[test]
    fn cross_entropy_grad_rows_sum_to_zero(seed in any::<u64>(), n in 1usize..9, k in 2usize..6, spread in 0.1f64..50.0) {
        let mut rng = RngStream::new(seed, 1);
        let z = mat(n, k, &mut rng).scale(spread).unwrap();
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let (loss, g) = softmax_cross_entropy(&z, &y).unwrap();
        prop_assert!(loss >= 0.0 && loss.is_finite());
        for r in 0..n {
            let s: f64 = g.row(r).iter().sum();
            prop_assert!(s.abs() < 1e-12, "row {} sums to {}", r, s);
        }
    }

    #[test]
    fn prune_idempotent_and_monotone(seed in any::<u64>(), r1 in 0.0f64..0.99, r2 in 0.0f64..0.99) {
        let mut rng = RngStream::new(seed, 2);
        let set = adapter_set(&[3, 5, 4, 2], 2, 1.0, &mut rng);
        let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
        let once = unstructured_prune(&set, SparsitySpec::new(hi).unwrap()).unwrap();
        let twice = unstructured_prune(&once, SparsitySpec::new(hi).unwrap()).unwrap();
        prop_assert_eq!(&once, &twice);
        let lighter = unstructured_prune(&set, SparsitySpec::new(lo).unwrap()).unwrap();
        prop_assert!(zero_fraction(&lighter) <= zero_fraction(&once));
        // every entry zeroed at the lower level is also zeroed at the higher one
        for (a, b) in lighter.flatten().iter().zip(once.flatten()) {
            if *a == 0.0 {
                prop_assert_eq!(b, 0.0);
            }
        }
        let total = set.parameter_count();
        let expected = (hi * total as f64).floor() as usize;
        prop_assert_eq!(once.flatten().iter().filter(|v| **v == 0.0).count(), expected);
    }
}

#[test]
fn gap_identity_over_random_pairs() {
    let mut rng = RngStream::new(2024, 3);
    for trial in 0..100 {
        let rank = rng.random_range(1..4);
        let scale = rng.random_range(0.25..4.0);
        let a1 = adapter_set(&[4, 6, 5], rank, scale, &mut rng);
        let a2 = adapter_set(&[4, 6, 5], rank, scale, &mut rng);
        let c: f64 = rng.random_range(0.0..1.0);
        let gaps = fusion_mixture_gap(&a1, &a2, c).unwrap();
        let closed = gap_closed_form(&a1, &a2, c).unwrap();
        let bound = product_bound(&a1, &a2, c).unwrap();
        let w = MergeWeights::new(vec![c, 1.0 - c]).unwrap();
        let fused = fuse(&[&a1, &a2], &w).unwrap().effective_deltas().unwrap();
        let mixed = mix(&[&a1, &a2], &w).unwrap();
        for l in 0..2 {
            // independent oracle: the difference computed directly
            let direct = fused[l].sub(&mixed[l]).unwrap();
            let err = direct.sub(&closed[l]).unwrap().max_abs();
            assert!(err < 1e-10, "trial {trial} layer {l}: {err}");
            assert!((gaps[l] - direct.frobenius_norm()).abs() < 1e-12);
            assert!(gaps[l] <= bound[l] * (1.0 + 1e-12) + 1e-12, "trial {trial}: {} > {}", gaps[l], bound[l]);
        }
    }
}

#[test]
fn procrustes_beats_random_orthogonal_maps() {
    let mut rng = RngStream::new(77, 4);
    for trial in 0..50 {
        let rank = rng.random_range(1..5);
        let a1 = adapter_set(&[6, 7, 5], rank, 1.0, &mut rng);
        let a2 = adapter_set(&[6, 7, 5], rank, 1.0, &mut rng);
        let aligned = align(&a1, &a2).unwrap();
        let best = align_objective(&a1, &a2, &aligned.map).unwrap();
        let ident = align_objective(&a1, &a2, &AlignMap::identity(2, rank)).unwrap();
        for l in 0..2 {
            assert!(best[l] <= ident[l] + 1e-9, "trial {trial}");
            for _ in 0..10 {
                let q = random_orthogonal(rank, &mut rng);
                let maps = AlignMap(vec![q.clone(), q]);
                let other = align_objective(&a1, &a2, &maps).unwrap();
                assert!(best[l] <= other[l] + 1e-9, "trial {trial} layer {l}: {} > {}", best[l], other[l]);
            }
        }
        // alignment never changes the update it carries
        for (x, y) in aligned.adapters.effective_deltas().unwrap().iter().zip(a2.effective_deltas().unwrap()) {
            assert!(x.sub(&y).unwrap().max_abs() < 1e-10);
        }
        let p = &aligned.map.0[0];
        let ptp = p.matmul_tn(p).unwrap();
        assert!(ptp.sub(&Matrix::identity(rank)).unwrap().max_abs() < 1e-10);
    }
}

#[test]
fn structured_prune_keeps_a_and_zeroes_b() {
    let mut rng = RngStream::new(5, 5);
    let set = adapter_set(&[3, 4, 4, 4, 4, 4, 2], 2, 1.0, &mut rng);
    for spec in StructuredSpec::standard_variants() {
        let mask = spec.kept(6).unwrap();
        let pruned = structured_prune(&set, &spec).unwrap();
        for (l, (p, o)) in pruned.adapters().iter().zip(set.adapters()).enumerate() {
            assert_eq!(p.a(), o.a());
            if mask.is_active(l) {
                assert_eq!(p.b(), o.b());
            } else {
                assert!(p.b().data().iter().all(|v| *v == 0.0), "{spec} layer {}", l + 1);
            }
        }
    }
}
