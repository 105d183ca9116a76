//! Concept loss against a per-concept direct evaluation; queue padding and
//! FIFO contracts over randomized cases.

use std::collections::VecDeque;

use concl_core::encoder::{embed_concept, EncoderConfig, EncoderPair, EncoderParams};
use concl_core::geometry::{CropSpec, RestoredMask, ViewPair};
use concl_core::image::ImagePatch;
use concl_core::loss::{concept_quota, concept_step_loss, enqueue_padded, info_nce, ConceptQueue};
use concl_core::rng;
use rand::Rng;

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        in_channels: 3,
        widths: [4, 8, 8, 16, 16],
        groups: 4,
        hidden: 16,
        dim: 8,
    }
}

fn image(r: &mut rng::Rng) -> ImagePatch {
    ImagePatch::new(64, 64, (0..64 * 64 * 3).map(|_| r.random::<f64>()).collect()).unwrap()
}

fn views(r: &mut rng::Rng) -> ViewPair {
    let full = CropSpec::full(64, 64, 64);
    ViewPair {
        x_q: image(r),
        x_k: image(r),
        x_r: image(r),
        spec_q: full,
        spec_k: full,
        spec_r: full,
    }
}

fn pair(seed: u64) -> EncoderPair {
    let online = EncoderParams::init(small_encoder(), &mut rng::stream(seed, 30, 0, 0)).unwrap();
    let key = EncoderParams::init(small_encoder(), &mut rng::stream(seed, 30, 1, 0)).unwrap();
    EncoderPair { online, key, momentum: 0.999 }
}

fn restored(labels: Vec<u32>) -> RestoredMask {
    let mut present = labels.clone();
    present.sort_unstable();
    present.dedup();
    RestoredMask { featres: 2, labels, present }
}

#[test]
fn three_concept_loss_equals_per_concept_sum() {
    for seed in 0..5 {
        let mut r = rng::stream(seed, 31, 0, 0);
        let p = pair(seed);
        let v = views(&mut r);
        let m_q = restored(vec![0, 1, 2, 2]);
        let m_k = restored(vec![2, 0, 1, 1]);
        let iq = ConceptQueue::random(32, 8, &mut r).unwrap();
        let cq = ConceptQueue::random(32, 8, &mut r).unwrap();
        let negs: Vec<f64> = cq.entries().flatten().copied().collect();
        let (loss, keys) = concept_step_loss(&p, &v, (&m_q, &m_k), &iq, &cq, 0.2, 1.0).unwrap();
        assert_eq!(loss.n_shared, 3);
        assert_eq!(keys.len(), 3);
        let mut sum = 0.0;
        for c in 0..3 {
            let q = embed_concept(&p.online, &v.x_q, &m_q, c).unwrap();
            let k = embed_concept(&p.key, &v.x_k, &m_k, c).unwrap();
            for (a, b) in k.iter().zip(&keys[c as usize]) {
                assert!((a - b).abs() < 1e-12);
            }
            sum += info_nce(&q, &k, &negs, 0.2).unwrap();
        }
        let lc = loss.l_concept.unwrap();
        assert!((lc - sum / 3.0).abs() < 1e-12, "{lc} vs {}", sum / 3.0);
        assert_eq!(loss.total, lc);
    }
}

#[test]
fn full_view_concept_reduces_to_instance_loss() {
    for step in 0..20 {
        let mut r = rng::stream(step, 32, 0, 0);
        let p = pair(100 + step);
        let v = views(&mut r);
        let q = ConceptQueue::random(64, 8, &mut r).unwrap();
        let full = RestoredMask::full(2);
        let (loss, _) = concept_step_loss(&p, &v, (&full, &full), &q, &q, 0.2, 0.5).unwrap();
        let lc = loss.l_concept.unwrap();
        assert!((lc - loss.l_instance).abs() <= 1e-12, "step {step}: {lc} vs {}", loss.l_instance);
    }
}

#[test]
fn disjoint_masks_fall_back_to_instance_loss() {
    let mut r = rng::stream(0, 33, 0, 0);
    let p = pair(7);
    let v = views(&mut r);
    let q = ConceptQueue::random(16, 8, &mut r).unwrap();
    let (loss, keys) = concept_step_loss(&p, &v, (&restored(vec![0, 0, 1, 1]), &restored(vec![2, 2, 3, 3])), &q, &q, 0.2, 1.0).unwrap();
    assert_eq!((loss.n_shared, loss.l_concept, keys.len()), (0, None, 0));
    assert_eq!(loss.total, loss.l_instance);
}

fn tag(i: usize) -> Vec<f64> {
    let t = i as f64 * 1e-5 + 0.01;
    vec![t.cos(), t.sin()]
}

fn untag(v: &[f64]) -> usize {
    ((v[1].atan2(v[0]) - 0.01) / 1e-5).round() as usize
}

#[test]
fn padding_subsampling_and_fifo_over_random_cases() {
    let mut r = rng::stream(34, 0, 0, 0);
    let mut next = 0usize;
    for case in 0..1000 {
        let cap = r.random_range(1..=64);
        let quota = r.random_range(1..=48);
        let mut q = ConceptQueue::new(cap, 2).unwrap();
        let mut model: VecDeque<usize> = VecDeque::new();
        for _ in 0..r.random_range(0..2 * cap) {
            q.push(&tag(next)).unwrap();
            model.push_back(next);
            if model.len() > cap {
                model.pop_front();
            }
            next += 1;
        }
        let n_keys = r.random_range(0..=2 * quota);
        let ids: Vec<usize> = (next..next + n_keys).collect();
        next += n_keys;
        let keys: Vec<Vec<f64>> = ids.iter().map(|&i| tag(i)).collect();
        let before = q.total_enqueued();
        let n = enqueue_padded(&mut q, &keys, quota, &mut rng::stream(35, 0, case, 0)).unwrap();
        assert_eq!(n, if n_keys == 0 { 0 } else { quota }, "case {case}");
        assert_eq!(q.total_enqueued() - before, n as u64);
        assert_eq!(q.cursor() as u64, q.total_enqueued() % cap as u64);

        let got: Vec<usize> = q.entries().map(untag).collect();
        let fresh = &got[got.len() - n.min(cap)..];
        if n > 0 && n <= cap {
            if n_keys <= quota {
                assert_eq!(&fresh[..n_keys], ids.as_slice(), "case {case}: originals first, in order");
                assert!(fresh.iter().all(|i| ids.contains(i)));
            } else {
                let mut d = fresh.to_vec();
                d.dedup();
                assert_eq!(d.len(), n, "case {case}: subsample repeats a key");
                assert!(fresh.windows(2).all(|w| w[0] < w[1]));
                assert!(fresh.iter().all(|i| ids.contains(i)));
            }
        }
        for &i in fresh {
            model.push_back(i);
            if model.len() > cap {
                model.pop_front();
            }
        }
        if n <= cap {
            assert_eq!(got, model.iter().copied().collect::<Vec<_>>(), "case {case}");
        }
        assert!(q.len() <= cap);
    }
}

#[test]
fn default_quota_for_eight_concepts() {
    assert_eq!(concept_quota(8, 32), 256);
    assert_eq!(concept_quota(16, 32), 128);
    let mut q = ConceptQueue::new(1024, 2).unwrap();
    let keys: Vec<Vec<f64>> = (0..300).map(tag).collect();
    assert_eq!(enqueue_padded(&mut q, &keys, 256, &mut rng::stream(0, 0, 0, 0)).unwrap(), 256);
    assert_eq!(q.len(), 256);
}
