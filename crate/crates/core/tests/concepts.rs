//! Concept generators against counting, naive-reference and re-execution
//! oracles.

mod support;

use concl_core::concepts::{fh_segment, grid_concepts, kmeans_concepts, kmeans_pp_init, lloyd, FhParams};
use concl_core::image::ImagePatch;
use concl_core::rng;
use concl_core::Tensor;
use rand::Rng;

#[test]
fn grid_cell_areas_are_balanced() {
    for s in [3usize, 5, 7] {
        for res in [16usize, 21, 64] {
            let m = grid_concepts(s, res).unwrap();
            assert_eq!(m.n_concepts, s * s);
            let (lo, hi) = ((res / s).pow(2), res.div_ceil(s).pow(2));
            for a in m.sizes() {
                assert!(lo <= a && a <= hi, "s={s} res={res} area={a}");
            }
        }
    }
    let m = grid_concepts(2, 4).unwrap();
    assert_eq!(m.labels, [0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3]);
    assert_eq!(grid_concepts(1, 8).unwrap().n_concepts, 1);
}

#[test]
fn fh_matches_naive_reference() {
    let mut r = rng::stream(11, 0, 0, 0);
    for seed in 0..100 {
        let im = support::fh_test_image(seed);
        let p = FhParams {
            scale: r.random_range(1.0..400.0),
            min_size: r.random_range(1..=24),
            sigma: [0.0, 0.5, 0.8][seed as usize % 3],
        };
        let got = fh_segment(&im, &p).unwrap();
        let want = support::naive_fh(&im, p.scale, p.min_size, p.sigma);
        assert_eq!(support::canonical(&got.labels), want, "seed {seed} {p:?}");
        assert!(got.is_partition());
        assert!(got.sizes().iter().all(|&s| s >= p.min_size.min(256)));
    }
}

#[test]
fn fh_constant_and_two_tone_images() {
    let flat = ImagePatch::filled(16, 16, [0.3, 0.6, 0.2]);
    assert_eq!(fh_segment(&flat, &FhParams::tied(50.0)).unwrap().n_concepts, 1);
    let mut v = Vec::new();
    for _ in 0..16 {
        for c in 0..16 {
            let x = if c < 8 { 0.0 } else { 1.0 };
            v.extend_from_slice(&[x, x, x]);
        }
    }
    let im = ImagePatch::new(16, 16, v).unwrap();
    let m = fh_segment(&im, &FhParams { scale: 10.0, min_size: 4, sigma: 0.0 }).unwrap();
    assert_eq!(m.n_concepts, 2);
    for r in 0..16 {
        for c in 0..16 {
            assert_eq!(m.labels[r * 16 + c], u32::from(c >= 8));
        }
    }
}

/// Assignment step written out directly.
fn assign(points: &[f64], dim: usize, centroids: &[f64]) -> Vec<usize> {
    points
        .chunks_exact(dim)
        .map(|p| {
            let mut best = 0;
            let mut bd = f64::INFINITY;
            for (c, cen) in centroids.chunks_exact(dim).enumerate() {
                let d: f64 = p.iter().zip(cen).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < bd {
                    bd = d;
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[test]
fn kmeans_inertia_is_monotone_and_matches_a_rerun() {
    for seed in 0..20 {
        let mut r = rng::stream(seed, 12, 0, 0);
        let (c, h, w) = (6, 4, 4);
        let feat = Tensor::new(&[c, h, w], (0..c * h * w).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let (mask, res) = kmeans_concepts(&feat, 8, 10, &mut rng::stream(seed, 13, 0, 0), 16).unwrap();
        assert!(res.inertia.windows(2).all(|x| x[1] <= x[0] + 1e-12), "{:?}", res.inertia);
        assert!(mask.n_concepts <= 8 && mask.is_partition());

        let mut pts = vec![0.0; h * w * c];
        for ch in 0..c {
            for i in 0..h * w {
                pts[i * c + ch] = feat.data()[ch * h * w + i];
            }
        }
        let init = kmeans_pp_init(&pts, c, 8, &mut rng::stream(seed, 13, 0, 0));
        let again = lloyd(&pts, c, init, 10);
        assert_eq!(again.assignment, res.assignment);
        // The returned assignment is the nearest-centroid assignment of the
        // centroids before the last update.
        let last = assign(&pts, c, &again.centroids);
        let inertia: f64 = pts
            .chunks_exact(c)
            .zip(&last)
            .map(|(p, &k)| p.iter().zip(&again.centroids[k * c..(k + 1) * c]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum();
        assert!(inertia <= *res.inertia.last().unwrap() + 1e-12);
    }
}

#[test]
fn kmeans_recovers_separated_blocks() {
    let (h, w) = (4, 4);
    let mut data = vec![0.0; 2 * h * w];
    for i in 0..h * w {
        let block = (i / w / 2) * 2 + (i % w) / 2;
        data[i] = block as f64 * 10.0;
        data[h * w + i] = -(block as f64);
    }
    let feat = Tensor::new(&[2, h, w], data).unwrap();
    let (mask, res) = kmeans_concepts(&feat, 4, 10, &mut rng::stream(0, 0, 0, 0), 4).unwrap();
    assert_eq!(mask.n_concepts, 4);
    assert_eq!(*res.inertia.last().unwrap(), 0.0);
    let want: Vec<usize> = (0..16).map(|i| (i / 4 / 2) * 2 + (i % 4) / 2).collect();
    assert_eq!(support::canonical(&mask.labels), support::canonical(&want));
    assert!(kmeans_concepts(&feat, 17, 10, &mut rng::stream(0, 0, 0, 0), 4).is_err());
}
