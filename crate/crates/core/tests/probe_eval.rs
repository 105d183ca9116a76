use concl_core::encoder::{EncoderConfig, EncoderParams};
use concl_core::image::{synth_dataset, SynthConfig};
use concl_core::probe::{concept_purity, dense_linear_probe_features, knn_accuracy, mean_iou, LinearProbe, ProbeConfig};
use concl_core::rng;
use rand::Rng;
use rand_distr::StandardNormal;

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.into_iter().map(|a| a / n).collect()
}

#[test]
fn one_hot_features_give_perfect_miou() {
    let classes = 6u32;
    let mut r = rng::stream(3, 0, 0, 0);
    let mut y = Vec::new();
    let mut x = Vec::new();
    for i in 0..300 {
        let c = if i < classes as usize { i as u32 } else { r.random_range(0..classes) };
        y.push(c);
        x.extend((0..classes).map(|j| if j == c { 1.0 } else { 0.0 }));
    }
    let cfg = ProbeConfig::default();
    let (miou, per) = dense_linear_probe_features(&x, &y, &x, &y, classes as usize, &cfg).unwrap();
    assert_eq!(miou, 1.0);
    assert_eq!(per.len(), classes as usize);
}

#[test]
fn miou_counts_classes_from_either_side() {
    // class 2 is predicted but absent from the ground truth
    let (m, per) = mean_iou(&[0, 0, 2, 1], &[0, 0, 1, 1]);
    assert_eq!(per, vec![(0, 1.0), (1, 0.5), (2, 0.0)]);
    assert!((m - 0.5).abs() < 1e-15);
}

#[test]
fn knn_duplicate_pair_is_found() {
    let emb = vec![unit(vec![1.0, 0.2]), unit(vec![1.0, 0.2]), unit(vec![-1.0, 0.5]), unit(vec![0.1, -1.0])];
    let labels = [4, 4, 1, 2];
    let acc = knn_accuracy(&emb, &labels, 1).unwrap();
    // the duplicates find each other; the other two have no same-label neighbour
    assert_eq!(acc, 0.5);
}

#[test]
fn knn_identical_embeddings_give_majority_prior() {
    let labels: Vec<u32> = vec![0, 0, 0, 0, 0, 0, 1, 1, 2, 3];
    let emb = vec![unit(vec![0.3, 0.4, 0.5]); labels.len()];
    for k in [1, 3, 5] {
        let acc = knn_accuracy(&emb, &labels, k).unwrap();
        assert_eq!(acc, 0.6, "k={k}");
    }
}

#[test]
fn knn_random_embeddings_match_null_model() {
    let (n, d, classes) = (400usize, 32usize, 10u32);
    let sigma = (0.1f64 * 0.9 / n as f64).sqrt();
    let mut total = 0.0;
    for seed in 0..20u64 {
        let mut r = rng::stream(seed, 9, 0, 0);
        let emb: Vec<Vec<f64>> = (0..n).map(|_| unit((0..d).map(|_| r.sample(StandardNormal)).collect())).collect();
        let labels: Vec<u32> = (0..n).map(|_| r.random_range(0..classes)).collect();
        let acc = knn_accuracy(&emb, &labels, 5).unwrap();
        total += acc;
    }
    let mean = total / 20.0;
    assert!((mean - 0.1).abs() < 3.0 * sigma / 20f64.sqrt(), "mean {mean}");
}

#[test]
fn knn_rejects_even_k() {
    let emb = vec![vec![1.0], vec![1.0]];
    assert!(knn_accuracy(&emb, &[0, 0], 2).is_err());
}

fn brute_purity(mask: &[u32], gt: &[u32]) -> f64 {
    let mut covered = 0usize;
    let concepts: std::collections::BTreeSet<u32> = mask.iter().copied().collect();
    for c in concepts {
        let members: Vec<u32> = mask.iter().zip(gt).filter(|(m, _)| **m == c).map(|(_, g)| *g).collect();
        let best = members.iter().map(|g| members.iter().filter(|h| *h == g).count()).max().unwrap();
        covered += best;
    }
    covered as f64 / mask.len() as f64
}

#[test]
fn purity_matches_brute_force() {
    let mut r = rng::stream(11, 9, 1, 0);
    for _ in 0..100 {
        let n = r.random_range(1..200);
        let km = r.random_range(1..8);
        let kg = r.random_range(1..8);
        let mask: Vec<u32> = (0..n).map(|_| r.random_range(0..km)).collect();
        let gt: Vec<u32> = (0..n).map(|_| r.random_range(0..kg)).collect();
        assert!((concept_purity(&mask, &gt) - brute_purity(&mask, &gt)).abs() < 1e-15);
    }
}

#[test]
fn purity_is_one_exactly_for_refinements() {
    let gt = [0, 0, 0, 1, 1, 2, 2, 2];
    assert_eq!(concept_purity(&[5, 5, 6, 7, 7, 8, 9, 9], &gt), 1.0);
    assert_eq!(concept_purity(&gt, &gt), 1.0);
    // one concept straddles two classes
    assert!(concept_purity(&[5, 5, 5, 5, 7, 8, 9, 9], &gt) < 1.0);
    // single concept over everything: majority share
    assert_eq!(concept_purity(&[0; 8], &gt), 3.0 / 8.0);
}

#[test]
fn probe_leaves_encoder_untouched_and_repeats() {
    let cfg = EncoderConfig {
        widths: [4, 8, 8, 16, 16],
        groups: 4,
        hidden: 16,
        dim: 8,
        ..EncoderConfig::default()
    };
    let params = EncoderParams::init(cfg, &mut rng::stream(0, 1, 0, 0)).unwrap();
    let before = params.clone();
    let data = synth_dataset(&SynthConfig {
        seed: 2,
        n_images: 24,
        size: 32,
        ..SynthConfig::default()
    })
    .unwrap();
    let pcfg = ProbeConfig {
        epochs: 30,
        purity_stage: 3,
        stage: 3,
        ..ProbeConfig::default()
    };
    let a = concl_core::probe::evaluate(&params, &data[..16], &data[16..], &pcfg);
    let b = concl_core::probe::evaluate(&params, &data[..16], &data[16..], &pcfg);
    assert_eq!(params, before);
    match (a, b) {
        (Ok(a), Ok(b)) => assert_eq!(a, b),
        // an eval class unseen in training is rejected the same way both times
        (Err(a), Err(b)) => assert_eq!(a.to_string(), b.to_string()),
        _ => panic!("runs disagree"),
    }
}

#[test]
fn linear_probe_fit_is_deterministic() {
    let mut r = rng::stream(1, 9, 2, 0);
    let x: Vec<f64> = (0..200 * 5).map(|_| r.sample(StandardNormal)).collect();
    let y: Vec<u32> = (0..200).map(|i| (x[i * 5] > 0.0) as u32).collect();
    let cfg = ProbeConfig::default();
    let p = LinearProbe::fit(&x, &y, 5, &cfg).unwrap();
    assert_eq!(p, LinearProbe::fit(&x, &y, 5, &cfg).unwrap());
    let acc = p.predict(&x).iter().zip(&y).filter(|(a, b)| a == b).count();
    assert!(acc >= 195, "{acc}");
}
