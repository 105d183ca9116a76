use concl_core::concepts::{fh_segment, grid_concepts, ConceptMask, FhParams};
use concl_core::geometry::{restore_mask, CropSpec};
use concl_core::image::ImagePatch;
use concl_core::loss::{info_nce, ConceptQueue};
use proptest::prelude::*;

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.iter().map(|a| a / n).collect()
}

fn nonzero_vec(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, d).prop_filter("nonzero", |v| v.iter().map(|a| a * a).sum::<f64>() > 1e-6)
}

proptest! {
    #[test]
    fn queue_keeps_the_latest_entries(cap in 1usize..12, pushes in prop::collection::vec(nonzero_vec(3), 0..40)) {
        let mut q = ConceptQueue::new(cap, 3).unwrap();
        for p in &pushes {
            q.push(&unit(p)).unwrap();
        }
        prop_assert_eq!(q.len(), pushes.len().min(cap));
        prop_assert_eq!(q.total_enqueued(), pushes.len() as u64);
        prop_assert!(q.len() <= q.capacity());
        prop_assert!((q.fill() - pushes.len().min(cap) as f64 / cap as f64).abs() < 1e-15);
        let mut got: Vec<Vec<f64>> = q.entries().map(<[f64]>::to_vec).collect();
        let mut want: Vec<Vec<f64>> = pushes.iter().rev().take(cap).map(|p| unit(p)).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        prop_assert_eq!(got, want);
        for e in q.entries() {
            prop_assert!((e.iter().map(|a| a * a).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn restore_of_reference_is_identity(s in 1usize..6, size in 4usize..40, f in 1usize..5) {
        prop_assume!(s <= size);
        let mask = grid_concepts(s, size).unwrap();
        let r = CropSpec::full(size, size, size);
        let restored = restore_mask(&mask, &r, &r, size).unwrap();
        prop_assert_eq!(&restored.labels, &mask.labels);
        // coarser cells sample the same grid
        let coarse = restore_mask(&mask, &r, &r, f).unwrap();
        prop_assert!(coarse.labels.iter().all(|&l| (l as usize) < s * s));
    }

    #[test]
    fn restore_flip_mirrors_columns(x0 in 0usize..8, y0 in 0usize..8, w in 4usize..24, h in 4usize..24, f in 1usize..6, s in 1usize..5) {
        let size = 32;
        prop_assume!(x0 + w <= size && y0 + h <= size);
        let mask = grid_concepts(s, size).unwrap();
        let r = CropSpec::full(size, size, size);
        let v = CropSpec { x0, y0, w, h, hflip: false, out_size: 16 };
        let vf = CropSpec { hflip: true, ..v };
        let a = restore_mask(&mask, &r, &v, f).unwrap();
        let b = restore_mask(&mask, &r, &vf, f).unwrap();
        for i in 0..f {
            for j in 0..f {
                prop_assert_eq!(a.labels[i * f + j], b.labels[i * f + f - 1 - j]);
            }
        }
        prop_assert_eq!(a.present, b.present);
    }

    #[test]
    fn info_nce_ignores_negative_order(
        q in nonzero_vec(4),
        k in nonzero_vec(4),
        negs in prop::collection::vec(nonzero_vec(4), 1..10),
        tau in 0.05f64..1.0,
        rot in 0usize..10,
    ) {
        let (q, k) = (unit(&q), unit(&k));
        let negs: Vec<Vec<f64>> = negs.iter().map(|n| unit(n)).collect();
        let flat: Vec<f64> = negs.concat();
        let mut perm = negs.clone();
        perm.rotate_left(rot % negs.len());
        perm.reverse();
        let a = info_nce(&q, &k, &flat, tau).unwrap();
        let b = info_nce(&q, &k, &perm.concat(), tau).unwrap();
        prop_assert!(a.is_finite() && a > 0.0);
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn grid_is_a_partition(s in 1usize..8, extra in 0usize..40) {
        let res = s + extra;
        let m = grid_concepts(s, res).unwrap();
        prop_assert!(m.is_partition());
        prop_assert_eq!(m.n_concepts, s * s);
        prop_assert_eq!(m.sizes().iter().sum::<usize>(), res * res);
        prop_assert!(m.sizes().iter().all(|&c| c > 0));
    }

    #[test]
    fn fh_is_a_partition(pix in prop::collection::vec(0.0f64..1.0, 8 * 8 * 3), scale in 1.0f64..500.0, min_size in 1usize..10) {
        let im = ImagePatch::new(8, 8, pix).unwrap();
        let m = fh_segment(&im, &FhParams { scale, min_size, sigma: 0.0 }).unwrap();
        prop_assert!(m.is_partition());
        prop_assert_eq!(m.labels.len(), 64);
        let again = ConceptMask::from_raw(8, 8, &m.labels.iter().map(|&l| l as usize).collect::<Vec<_>>());
        prop_assert_eq!(&again, &m);
        prop_assert!(m.sizes().iter().all(|&c| c >= min_size));
    }
}
