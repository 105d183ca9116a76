//! Instance and concept InfoNCE losses, their λ-mix, and FIFO negative
//! queues.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use thiserror::Error;

use crate::encoder::{mask_regions, BoundParams, EncoderPair};
use crate::geometry::{shared_concepts, RestoredMask, ViewPair};
use crate::image::{images_to_tensor, ImagePatch};
use crate::rng::Rng;
use crate::tensor::{Graph, PoolRegion, Tensor, TensorError, Var};

/// Tolerance on the norm of queued vectors.
pub const QUEUE_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("concept weight lambda must lie in [0, 1], got {0}")]
    BadLambda(f64),
    #[error("queue expects {expected}-dimensional vectors, got {got}")]
    QueueDim { expected: usize, got: usize },
    #[error("queued vector has norm {0}, expected 1")]
    NotUnitNorm(f64),
    #[error("queue capacity and dimension must be positive")]
    EmptyQueue,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("batch is empty or its parts have different lengths")]
    BadBatch,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `-log(exp(q.k+/tau) / (exp(q.k+/tau) + sum exp(q.k-/tau)))`, evaluated
/// with max subtraction. `negatives` holds rows of `q.len()` values.
pub fn info_nce(q: &[f64], k_pos: &[f64], negatives: &[f64], tau: f64) -> Result<f64, LossError> {
    if !(tau > 0.0) {
        return Err(LossError::BadTemperature(tau));
    }
    let d = q.len();
    if k_pos.len() != d || (d > 0 && negatives.len() % d != 0) {
        return Err(LossError::QueueDim {
            expected: d,
            got: k_pos.len(),
        });
    }
    let pos = dot(q, k_pos) / tau;
    let logits: Vec<f64> = core::iter::once(pos)
        .chain(negatives.chunks_exact(d.max(1)).map(|n| dot(q, n) / tau))
        .collect();
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| libm::exp(l - mx)).sum();
    Ok(mx + libm::log(z) - pos)
}

/// `(1 - λ) l_q + λ l_c`.
pub fn combined_loss(l_q: f64, l_c: f64, lambda: f64) -> Result<f64, LossError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(LossError::BadLambda(lambda));
    }
    if lambda == 0.0 {
        return Ok(l_q);
    }
    if lambda == 1.0 {
        return Ok(l_c);
    }
    Ok((1.0 - lambda) * l_q + lambda * l_c)
}

/// Fixed-capacity FIFO ring of unit vectors used as negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptQueue {
    capacity: usize,
    dim: usize,
    slots: Vec<f64>,
    len: usize,
    total: u64,
}

impl ConceptQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self, LossError> {
        if capacity == 0 || dim == 0 {
            return Err(LossError::EmptyQueue);
        }
        Ok(Self {
            capacity,
            dim,
            slots: vec![0.0; capacity * dim],
            len: 0,
            total: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Next slot to be written: `total_enqueued mod capacity`.
    pub fn cursor(&self) -> usize {
        (self.total % self.capacity as u64) as usize
    }

    pub fn total_enqueued(&self) -> u64 {
        self.total
    }

    /// Share of slots holding enqueued keys rather than initial entries.
    pub fn fill(&self) -> f64 {
        self.total.min(self.capacity as u64) as f64 / self.capacity as f64
    }

    pub fn push(&mut self, v: &[f64]) -> Result<(), LossError> {
        if v.len() != self.dim {
            return Err(LossError::QueueDim {
                expected: self.dim,
                got: v.len(),
            });
        }
        let n = libm::sqrt(dot(v, v));
        if libm::fabs(n - 1.0) > QUEUE_NORM_TOL {
            return Err(LossError::NotUnitNorm(n));
        }
        let c = self.cursor();
        self.slots[c * self.dim..(c + 1) * self.dim].copy_from_slice(v);
        self.total += 1;
        self.len = (self.len + 1).min(self.capacity);
        Ok(())
    }

    /// Entries from oldest to newest.
    pub fn entries(&self) -> impl Iterator<Item = &[f64]> + '_ {
        let start = if self.len < self.capacity { 0 } else { self.cursor() };
        (0..self.len).map(move |i| {
            let s = (start + i) % self.capacity;
            &self.slots[s * self.dim..(s + 1) * self.dim]
        })
    }

    /// Entries (oldest first) as an `[len, dim]` tensor, or `None` if empty.
    pub fn as_tensor(&self) -> Option<Tensor> {
        if self.len == 0 {
            return None;
        }
        let data: Vec<f64> = self.entries().flat_map(|e| e.iter().copied()).collect();
        Some(Tensor::new(&[self.len, self.dim], data).expect("queue tensor shape"))
    }

    /// Full queue of random unit vectors, as momentum-contrast queues start.
    /// The enqueue count stays zero, so the oldest random entries are the
    /// first evicted.
    pub fn random(capacity: usize, dim: usize, rng: &mut Rng) -> Result<Self, LossError> {
        let mut q = Self::new(capacity, dim)?;
        let normal = rand_distr::StandardNormal;
        for slot in q.slots.chunks_exact_mut(dim) {
            loop {
                for x in slot.iter_mut() {
                    *x = rng.sample(normal);
                }
                let n = libm::sqrt(dot(slot, slot));
                if n > 1e-12 {
                    slot.iter_mut().for_each(|x| *x /= n);
                    break;
                }
            }
        }
        q.len = capacity;
        Ok(q)
    }

    /// Rebuilds a queue from its entries (oldest first) and enqueue count.
    pub fn from_entries(capacity: usize, dim: usize, entries: &[f64], total: u64) -> Result<Self, LossError> {
        let mut q = Self::new(capacity, dim)?;
        let n = entries.len() / dim;
        let bad = LossError::QueueDim {
            expected: dim,
            got: entries.len(),
        };
        if n > capacity || entries.len() % dim != 0 || (n < capacity && total != n as u64) {
            return Err(bad);
        }
        q.total = total;
        let start = q.cursor();
        for (i, e) in entries.chunks_exact(dim).enumerate() {
            let norm = libm::sqrt(dot(e, e));
            if libm::fabs(norm - 1.0) > QUEUE_NORM_TOL {
                return Err(LossError::NotUnitNorm(norm));
            }
            let s = if n < capacity { i } else { (start + i) % capacity };
            q.slots[s * dim..(s + 1) * dim].copy_from_slice(e);
        }
        q.len = n;
        Ok(q)
    }
}

/// Keys enqueued per step: `K * batch` for `K <= 8`, otherwise `4 * batch`.
pub fn concept_quota(k: usize, batch: usize) -> usize {
    if k <= 8 {
        k * batch
    } else {
        4 * batch
    }
}

/// Enqueues exactly `quota` keys: all keys padded by uniform resampling with
/// replacement when short, or a uniform subsample without replacement when
/// over. Enqueues nothing when `keys` is empty. Returns the count enqueued.
pub fn enqueue_padded(queue: &mut ConceptQueue, keys: &[Vec<f64>], quota: usize, rng: &mut Rng) -> Result<usize, LossError> {
    if keys.is_empty() || quota == 0 {
        return Ok(0);
    }
    if keys.len() <= quota {
        for k in keys {
            queue.push(k)?;
        }
        for _ in keys.len()..quota {
            queue.push(&keys[rng.random_range(0..keys.len())])?;
        }
    } else {
        let mut picked = rand::seq::index::sample(rng, keys.len(), quota).into_vec();
        picked.sort_unstable();
        for i in picked {
            queue.push(&keys[i])?;
        }
    }
    Ok(quota)
}

/// Losses of one sample in one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub l_instance: f64,
    /// Mean concept loss over shared concepts; `None` when none were shared
    /// or the concept path was not evaluated.
    pub l_concept: Option<f64>,
    pub n_shared: usize,
    pub lambda: f64,
    pub tau: f64,
}

/// Restored masks of one view pair and the concepts they share.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptPair {
    pub m_q: RestoredMask,
    pub m_k: RestoredMask,
    /// Non-empty, ascending.
    pub shared: Vec<u32>,
}

impl ConceptPair {
    /// `None` when the two masks share no concept.
    pub fn new(m_q: RestoredMask, m_k: RestoredMask) -> Option<Self> {
        let shared = shared_concepts(&m_q, &m_k);
        (!shared.is_empty()).then_some(Self { m_q, m_k, shared })
    }
}

/// A batch of query/key views with optional concept correspondences.
pub struct ContrastiveBatch<'a> {
    pub queries: Vec<&'a ImagePatch>,
    pub keys: Vec<&'a ImagePatch>,
    pub concepts: Vec<Option<ConceptPair>>,
}

/// Forward result of [`contrastive_forward`]: the online graph ready for
/// backward plus everything the step needs afterwards.
pub struct BatchForward {
    pub graph: Graph,
    pub online: BoundParams,
    pub root: Var,
    pub total: f64,
    pub per_sample: Vec<StepLoss>,
    pub instance_keys: Vec<Vec<f64>>,
    pub concept_keys: Vec<Vec<f64>>,
    /// Whether any concept term entered the loss.
    pub concept_evaluated: bool,
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let d = t.shape()[1];
    t.data().chunks_exact(d).map(<[f64]>::to_vec).collect()
}

/// Key-side constants of a batch loss.
#[derive(Clone, Debug, PartialEq)]
pub struct OnlineTargets {
    /// Instance positives `[B, d]`.
    pub instance_keys: Tensor,
    pub instance_negatives: Option<Tensor>,
    pub concept: Option<ConceptTargets>,
    pub tau: f64,
}

/// Concept-side constants: pooling regions on the query features, concept
/// positives, negatives and the per-row loss weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptTargets {
    pub regions: Vec<PoolRegion>,
    /// Concept positives `[R, d]`, one per region.
    pub keys: Tensor,
    pub negatives: Option<Tensor>,
    /// Weight of each sample's instance loss.
    pub instance_weights: Vec<f64>,
    /// Weight of each region's concept loss.
    pub concept_weights: Vec<f64>,
}

/// Online-graph part of the loss for queries `xq`. Returns the scalar root,
/// the per-sample instance losses and, with concept targets, the per-region
/// concept losses.
pub fn online_loss(g: &mut Graph, online: &BoundParams, xq: Var, t: &OnlineTargets) -> Result<(Var, Var, Option<Var>), LossError> {
    let (qf5, q) = online.embed_instances(g, xq)?;
    let kpos = g.constant(t.instance_keys.clone());
    let ineg = t.instance_negatives.clone().map(|n| g.constant(n));
    let lq = g.info_nce(q, kpos, ineg, t.tau)?;
    let Some(c) = &t.concept else {
        let root = g.mean(lq);
        return Ok((root, lq, None));
    };
    let pooled = g.masked_avg_pool(qf5, c.regions.clone())?;
    let qc = online.project(g, pooled)?;
    let kcpos = g.constant(c.keys.clone());
    let cneg = c.negatives.clone().map(|n| g.constant(n));
    let lc = g.info_nce(qc, kcpos, cneg, t.tau)?;
    let wq = g.constant(Tensor::new(&[c.instance_weights.len()], c.instance_weights.clone())?);
    let wc = g.constant(Tensor::new(&[c.concept_weights.len()], c.concept_weights.clone())?);
    let a = g.mul(lq, wq)?;
    let a = g.sum(a);
    let b = g.mul(lc, wc)?;
    let b = g.sum(b);
    let root = g.add(a, b)?;
    Ok((root, lq, Some(lc)))
}

/// Loss weights for a batch: `(1-λ)/B` on instance terms of samples with
/// shared concepts, `1/B` on the others, and `λ/(B n_i)` on each of sample
/// `i`'s `n_i` concept terms.
pub fn loss_weights(concepts: &[Option<ConceptPair>], lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let bf = concepts.len() as f64;
    let mut wq = Vec::with_capacity(concepts.len());
    let mut wc = Vec::new();
    for c in concepts {
        match c {
            Some(cp) => {
                let n = cp.shared.len();
                wq.push((1.0 - lambda) / bf);
                wc.extend(core::iter::repeat_n(lambda / (bf * n as f64), n));
            }
            None => wq.push(1.0 / bf),
        }
    }
    (wq, wc)
}

/// Builds the batch loss on a fresh online graph.
///
/// With `lambda == 0`, or when no sample carries concepts, only the
/// instance path runs and the loss is `mean_i L_q(i)`. Otherwise each sample
/// contributes `(1-λ) L_q(i) + λ mean_c L_c(i, c)` (or `L_q(i)` when it has
/// no shared concept) and the batch loss is their mean. Key-side tensors and
/// queue contents enter the graph as constants.
pub fn contrastive_forward(
    pair: &EncoderPair,
    batch: &ContrastiveBatch<'_>,
    instance_queue: &ConceptQueue,
    concept_queue: &ConceptQueue,
    tau: f64,
    lambda: f64,
) -> Result<BatchForward, LossError> {
    if !(tau > 0.0) {
        return Err(LossError::BadTemperature(tau));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(LossError::BadLambda(lambda));
    }
    let b = batch.queries.len();
    if b == 0 || batch.keys.len() != b || batch.concepts.len() != b {
        return Err(LossError::BadBatch);
    }
    let use_concepts = lambda > 0.0 && batch.concepts.iter().any(Option::is_some);

    // Key side: no gradients anywhere.
    let mut kg = Graph::new();
    let kp = pair.key.bind(&mut kg, false);
    let xk = kg.constant(images_to_tensor(&batch.keys).map_err(|_| LossError::BadBatch)?);
    let (kf5, kinst) = kp.embed_instances(&mut kg, xk)?;
    let mut targets = OnlineTargets {
        instance_keys: kg.value(kinst).clone(),
        instance_negatives: instance_queue.as_tensor(),
        concept: None,
        tau,
    };
    if use_concepts {
        let mut regions_k = Vec::new();
        let mut regions_q = Vec::new();
        for (i, c) in batch.concepts.iter().enumerate() {
            if let Some(cp) = c {
                regions_k.extend(mask_regions(&cp.m_k, i, &cp.shared)?);
                regions_q.extend(mask_regions(&cp.m_q, i, &cp.shared)?);
            }
        }
        let pooled = kg.masked_avg_pool(kf5, regions_k)?;
        let kc = kp.project(&mut kg, pooled)?;
        let (instance_weights, concept_weights) = loss_weights(&batch.concepts, lambda);
        targets.concept = Some(ConceptTargets {
            regions: regions_q,
            keys: kg.value(kc).clone(),
            negatives: concept_queue.as_tensor(),
            instance_weights,
            concept_weights,
        });
    }
    drop(kg);

    let mut g = Graph::new();
    let online = pair.online.bind(&mut g, true);
    let xq = g.constant(images_to_tensor(&batch.queries).map_err(|_| LossError::BadBatch)?);
    let (root, lq, lc) = online_loss(&mut g, &online, xq, &targets)?;
    let total = g.value(root).item();
    let lq_vals = g.value(lq).data().to_vec();
    let lc_vals = lc.map(|v| g.value(v).data().to_vec()).unwrap_or_default();

    let mut per_sample = Vec::with_capacity(b);
    let mut row = 0;
    for (i, c) in batch.concepts.iter().enumerate() {
        let shared = if use_concepts { c.as_ref().map_or(0, |cp| cp.shared.len()) } else { 0 };
        let l_concept = (shared > 0).then(|| lc_vals[row..row + shared].iter().sum::<f64>() / shared as f64);
        row += shared;
        let total = match l_concept {
            Some(lc) => combined_loss(lq_vals[i], lc, lambda)?,
            None => lq_vals[i],
        };
        per_sample.push(StepLoss {
            total,
            l_instance: lq_vals[i],
            l_concept,
            n_shared: shared,
            lambda,
            tau,
        });
    }
    Ok(BatchForward {
        graph: g,
        online,
        root,
        total,
        per_sample,
        instance_keys: rows(&targets.instance_keys),
        concept_keys: targets.concept.as_ref().map(|c| rows(&c.keys)).unwrap_or_default(),
        concept_evaluated: use_concepts,
    })
}

/// Loss of a single view pair: instance loss against `instance_queue`,
/// concept loss over the shared concepts of `masks` against
/// `concept_queue`, mixed by `lambda`. Returns the key-encoder concept
/// vectors to enqueue afterwards.
pub fn concept_step_loss(
    pair: &EncoderPair,
    views: &ViewPair,
    masks: (&RestoredMask, &RestoredMask),
    instance_queue: &ConceptQueue,
    concept_queue: &ConceptQueue,
    tau: f64,
    lambda: f64,
) -> Result<(StepLoss, Vec<Vec<f64>>), LossError> {
    let batch = ContrastiveBatch {
        queries: vec![&views.x_q],
        keys: vec![&views.x_k],
        concepts: vec![ConceptPair::new(masks.0.clone(), masks.1.clone())],
    };
    let out = contrastive_forward(pair, &batch, instance_queue, concept_queue, tau, lambda)?;
    Ok((out.per_sample[0], out.concept_keys))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn closed_form_values() {
        let q = [1.0, 0.0];
        let l = info_nce(&q, &q, &[0.0, 1.0], 1.0).unwrap();
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
        assert!((l - 0.31326).abs() < 1e-5);
        let u = [0.6, 0.8];
        let l = info_nce(&u, &u, &u, 0.5).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert!(info_nce(&q, &q, &[], 0.0).is_err());
    }

    #[test]
    fn combined_loss_cases() {
        assert_eq!(combined_loss(0.4, 0.8, 0.0).unwrap(), 0.4);
        assert_eq!(combined_loss(0.4, 0.8, 1.0).unwrap(), 0.8);
        assert!((combined_loss(0.4, 0.8, 0.5).unwrap() - 0.6).abs() < 1e-15);
        assert!(combined_loss(0.4, 0.8, 1.5).is_err());
        assert!(combined_loss(0.4, 0.8, -0.1).is_err());
    }

    fn tagged(i: usize) -> Vec<f64> {
        let a = i as f64;
        let n = (a * a + 1.0).sqrt();
        vec![a / n, 1.0 / n]
    }

    #[test]
    fn fifo_eviction() {
        let mut q = ConceptQueue::new(4, 2).unwrap();
        for i in 1..=6 {
            q.push(&tagged(i)).unwrap();
        }
        let got: Vec<Vec<f64>> = q.entries().map(<[f64]>::to_vec).collect();
        assert_eq!(got, (3..=6).map(tagged).collect::<Vec<_>>());
        assert_eq!(q.cursor(), 6 % 4);
        assert_eq!(q.len(), 4);
    }

    #[test]
    fn queue_rejects_bad_vectors() {
        let mut q = ConceptQueue::new(4, 2).unwrap();
        assert!(q.push(&[1.0, 1.0]).is_err());
        assert!(q.push(&[1.0]).is_err());
        assert!(q.is_empty());
    }

    #[test]
    fn queue_round_trips_through_entries() {
        let mut q = ConceptQueue::new(3, 2).unwrap();
        for i in 0..5 {
            q.push(&tagged(i)).unwrap();
        }
        let flat: Vec<f64> = q.entries().flatten().copied().collect();
        let r = ConceptQueue::from_entries(3, 2, &flat, q.total_enqueued()).unwrap();
        assert_eq!(r, q);
    }

    #[test]
    fn random_queue_starts_full_and_evicts_oldest() {
        let mut q = ConceptQueue::random(4, 3, &mut rng::stream(0, 0, 0, 0)).unwrap();
        assert_eq!((q.len(), q.total_enqueued(), q.fill()), (4, 0, 0.0));
        let first: Vec<Vec<f64>> = q.entries().map(<[f64]>::to_vec).collect();
        q.push(&[0.0, 0.0, 1.0]).unwrap();
        let now: Vec<Vec<f64>> = q.entries().map(<[f64]>::to_vec).collect();
        assert_eq!(now[..3], first[1..]);
        assert_eq!(now[3], [0.0, 0.0, 1.0]);
        let flat: Vec<f64> = q.entries().flatten().copied().collect();
        assert_eq!(ConceptQueue::from_entries(4, 3, &flat, 1).unwrap(), q);
    }

    #[test]
    fn padding_and_subsampling() {
        let mut r = rng::stream(1, 0, 0, 0);
        let keys: Vec<Vec<f64>> = (0..5).map(tagged).collect();
        let mut q = ConceptQueue::new(64, 2).unwrap();
        assert_eq!(enqueue_padded(&mut q, &keys, 8, &mut r).unwrap(), 8);
        let got: Vec<Vec<f64>> = q.entries().map(<[f64]>::to_vec).collect();
        assert_eq!(got.len(), 8);
        for k in &keys {
            assert!(got.contains(k));
        }

        let keys: Vec<Vec<f64>> = (0..12).map(tagged).collect();
        let mut q = ConceptQueue::new(64, 2).unwrap();
        enqueue_padded(&mut q, &keys, 8, &mut r).unwrap();
        let mut got: Vec<Vec<f64>> = q.entries().map(<[f64]>::to_vec).collect();
        assert_eq!(got.len(), 8);
        got.dedup();
        assert_eq!(got.len(), 8);

        let mut q = ConceptQueue::new(64, 2).unwrap();
        assert_eq!(enqueue_padded(&mut q, &[], 8, &mut r).unwrap(), 0);
        assert!(q.is_empty());
    }

    #[test]
    fn quota_rule() {
        assert_eq!(concept_quota(8, 32), 256);
        assert_eq!(concept_quota(4, 32), 128);
        assert_eq!(concept_quota(16, 32), 128);
    }
}
