//! Frozen-encoder evaluation: dense linear probe, k-NN and concept purity.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::concepts::{kmeans_concepts, ConceptError};
use crate::encoder::{EncoderParams, N_STAGES};
use crate::image::{images_to_tensor, ImageError, ImagePatch, LabelMap, LabeledPatch};
use crate::rng::{self, domain};
use crate::tensor::{Graph, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProbeError {
    #[error("class {0} occurs in the evaluation split but not in the training split")]
    ClassAbsent(u32),
    #[error("stage must lie in 1..=5, got {0}")]
    BadStage(usize),
    #[error("k must be odd and >= 1, got {0}")]
    BadK(usize),
    #[error("empty split or mismatched feature/label counts")]
    BadInput,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Concept(#[from] ConceptError),
}

pub type Result<T> = core::result::Result<T, ProbeError>;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    /// Encoder stage whose cells are classified.
    pub stage: usize,
    /// Full-batch gradient steps.
    pub epochs: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub knn_k: usize,
    /// Clusters for proposal purity.
    pub purity_k: usize,
    pub purity_stage: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
    /// Images per encoder forward.
    pub chunk: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            stage: 4,
            epochs: 300,
            weight_decay: 1e-4,
            momentum: 0.9,
            knn_k: 5,
            purity_k: 8,
            purity_stage: 4,
            kmeans_iters: 10,
            seed: 0,
            chunk: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub miou: f64,
    /// `(class, IoU)` ascending by class.
    pub per_class_iou: Vec<(u32, f64)>,
    pub knn_acc: Option<f64>,
    pub purity: Option<f64>,
    pub config: ProbeConfig,
}

/// Per-cell features of `stage` for every image, as rows of `C` values in
/// image-major, raster order. Returns `(rows, C, resolution)`.
pub fn cell_features(params: &EncoderParams, images: &[&ImagePatch], stage: usize, chunk: usize) -> Result<(Vec<f64>, usize, usize)> {
    if !(1..=N_STAGES).contains(&stage) {
        return Err(ProbeError::BadStage(stage));
    }
    if images.is_empty() {
        return Err(ProbeError::BadInput);
    }
    let mut out = Vec::new();
    let (mut c, mut r) = (0, 0);
    for part in images.chunks(chunk.max(1)) {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let x = g.constant(images_to_tensor(part)?);
        let fs = bound.forward(&mut g, x, stage)?;
        let f = g.value(fs[stage - 1]);
        (c, r) = (f.shape()[1], f.shape()[2]);
        let hw = r * r;
        for img in f.data().chunks_exact(c * hw) {
            for cell in 0..hw {
                out.extend((0..c).map(|ch| img[ch * hw + cell]));
            }
        }
    }
    Ok((out, c, r))
}

/// Majority label of each block of an `res x res` partition of `labels`;
/// ties go to the smaller label.
pub fn majority_downsample(labels: &LabelMap, res: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(res * res);
    for i in 0..res {
        let (r0, r1) = (i * labels.height / res, (i + 1) * labels.height / res);
        for j in 0..res {
            let (c0, c1) = (j * labels.width / res, (j + 1) * labels.width / res);
            let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
            for r in r0..r1.max(r0 + 1) {
                for c in c0..c1.max(c0 + 1) {
                    *counts.entry(labels.get(r, c)).or_default() += 1;
                }
            }
            let mut best = (0usize, 0u32);
            for (&l, &n) in &counts {
                if n > best.0 {
                    best = (n, l);
                }
            }
            out.push(best.1);
        }
    }
    out
}

/// Affine softmax classifier over standardized features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub dim: usize,
    /// Class ids, ascending; output column `j` predicts `classes[j]`.
    pub classes: Vec<u32>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `[dim, classes]` row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], c: &mut [f64]) {
    // c[m,n] = op(a)[m,k] * b[k,n]
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), n as isize, 1, 0.0, c.as_mut_ptr(), n as isize, 1);
    }
}

fn standardize(x: &mut [f64], mean: &[f64], scale: &[f64]) {
    let d = mean.len();
    for row in x.chunks_exact_mut(d) {
        for ((v, m), s) in row.iter_mut().zip(mean).zip(scale) {
            *v = (*v - m) / s;
        }
    }
}

/// Largest eigenvalue of `x^T x / n`, by power iteration.
fn top_eigenvalue(x: &[f64], n: usize, d: usize) -> f64 {
    let mut v = vec![1.0 / libm::sqrt(d as f64); d];
    let mut xv = vec![0.0; n];
    let mut w = vec![0.0; d];
    let mut lam = 0.0;
    for _ in 0..50 {
        gemm(n, d, 1, x, false, &v, &mut xv);
        gemm(d, n, 1, x, true, &xv, &mut w);
        let norm = libm::sqrt(w.iter().map(|a| a * a).sum::<f64>());
        lam = norm / n as f64;
        if norm == 0.0 {
            return 0.0;
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / norm;
        }
    }
    lam
}

impl LinearProbe {
    /// Fits by full-batch gradient descent with heavy-ball momentum on the
    /// mean cross-entropy plus `weight_decay/2 * |W|^2`. Deterministic: the
    /// weights start at zero and no randomness is involved.
    pub fn fit(x: &[f64], y: &[u32], dim: usize, cfg: &ProbeConfig) -> Result<Self> {
        let n = y.len();
        if n == 0 || dim == 0 || x.len() != n * dim {
            return Err(ProbeError::BadInput);
        }
        let mut classes = y.to_vec();
        classes.sort_unstable();
        classes.dedup();
        let nc = classes.len();
        let target: Vec<usize> = y.iter().map(|l| classes.binary_search(l).unwrap()).collect();

        let mut mean = vec![0.0; dim];
        for row in x.chunks_exact(dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut scale = vec![0.0; dim];
        for row in x.chunks_exact(dim) {
            for ((s, v), m) in scale.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for s in &mut scale {
            *s = libm::sqrt(*s / n as f64);
            if *s < 1e-12 {
                *s = 1.0;
            }
        }
        let mut xs = x.to_vec();
        standardize(&mut xs, &mean, &scale);

        // Softmax cross-entropy has curvature at most 1/2 of the feature
        // second moment (plus one for the bias).
        let lipschitz = 0.5 * (top_eigenvalue(&xs, n, dim) + 1.0) + cfg.weight_decay;
        let lr = 1.0 / lipschitz;
        let mut weight = vec![0.0; dim * nc];
        let mut bias = vec![0.0; nc];
        let mut vw = vec![0.0; dim * nc];
        let mut vb = vec![0.0; nc];
        let mut logits = vec![0.0; n * nc];
        let mut gw = vec![0.0; dim * nc];
        for _ in 0..cfg.epochs {
            gemm(n, dim, nc, &xs, false, &weight, &mut logits);
            let mut gb = vec![0.0; nc];
            for (row, &t) in logits.chunks_exact_mut(nc).zip(&target) {
                for (l, b) in row.iter_mut().zip(&bias) {
                    *l += b;
                }
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in row.iter_mut() {
                    *l = libm::exp(*l - mx);
                    z += *l;
                }
                for (j, l) in row.iter_mut().enumerate() {
                    *l = (*l / z - if j == t { 1.0 } else { 0.0 }) / n as f64;
                    gb[j] += *l;
                }
            }
            gemm(dim, n, nc, &xs, true, &logits, &mut gw);
            for ((w, v), g) in weight.iter_mut().zip(&mut vw).zip(&gw) {
                *v = cfg.momentum * *v + g + cfg.weight_decay * *w;
                *w -= lr * *v;
            }
            for ((b, v), g) in bias.iter_mut().zip(&mut vb).zip(&gb) {
                *v = cfg.momentum * *v + g;
                *b -= lr * *v;
            }
        }
        Ok(Self {
            dim,
            classes,
            mean,
            scale,
            weight,
            bias,
        })
    }

    pub fn predict(&self, x: &[f64]) -> Vec<u32> {
        let n = x.len() / self.dim;
        let nc = self.classes.len();
        let mut xs = x.to_vec();
        standardize(&mut xs, &self.mean, &self.scale);
        let mut logits = vec![0.0; n * nc];
        gemm(n, self.dim, nc, &xs, false, &self.weight, &mut logits);
        logits
            .chunks_exact(nc)
            .map(|row| {
                let mut best = 0;
                for j in 1..nc {
                    if row[j] + self.bias[j] > row[best] + self.bias[best] {
                        best = j;
                    }
                }
                self.classes[best]
            })
            .collect()
    }
}

/// IoU of every class occurring in `pred` or `gt`, and their mean.
pub fn mean_iou(pred: &[u32], gt: &[u32]) -> (f64, Vec<(u32, f64)>) {
    let mut stats: BTreeMap<u32, (usize, usize, usize)> = BTreeMap::new();
    for (&p, &g) in pred.iter().zip(gt) {
        if p == g {
            stats.entry(p).or_default().0 += 1;
        } else {
            stats.entry(p).or_default().1 += 1;
            stats.entry(g).or_default().2 += 1;
        }
    }
    let per: Vec<(u32, f64)> = stats
        .into_iter()
        .map(|(c, (tp, fp, fneg))| (c, tp as f64 / (tp + fp + fneg) as f64))
        .collect();
    let miou = if per.is_empty() { 0.0 } else { per.iter().map(|p| p.1).sum::<f64>() / per.len() as f64 };
    (miou, per)
}

/// Fits a probe on `(train_x, train_y)` and scores it on the evaluation
/// split. Rejects evaluation classes unseen in training.
pub fn dense_linear_probe_features(
    train_x: &[f64],
    train_y: &[u32],
    eval_x: &[f64],
    eval_y: &[u32],
    dim: usize,
    cfg: &ProbeConfig,
) -> Result<(f64, Vec<(u32, f64)>)> {
    if eval_y.is_empty() || eval_x.len() != eval_y.len() * dim {
        return Err(ProbeError::BadInput);
    }
    let probe = LinearProbe::fit(train_x, train_y, dim, cfg)?;
    for &c in eval_y {
        if probe.classes.binary_search(&c).is_err() {
            return Err(ProbeError::ClassAbsent(c));
        }
    }
    Ok(mean_iou(&probe.predict(eval_x), eval_y))
}

fn split_cells(params: &EncoderParams, split: &[LabeledPatch], cfg: &ProbeConfig) -> Result<(Vec<f64>, Vec<u32>, usize)> {
    let images: Vec<&ImagePatch> = split.iter().map(|p| &p.image).collect();
    let (x, c, r) = cell_features(params, &images, cfg.stage, cfg.chunk)?;
    let y = split
        .iter()
        .flat_map(|p| majority_downsample(&p.class_map(), r))
        .collect();
    Ok((x, y, c))
}

/// Linear probe of frozen `params` at `cfg.stage` on texture classes, with
/// ground truth downsampled to feature resolution.
pub fn dense_linear_probe(params: &EncoderParams, train: &[LabeledPatch], eval: &[LabeledPatch], cfg: &ProbeConfig) -> Result<ProbeReport> {
    let (tx, ty, dim) = split_cells(params, train, cfg)?;
    let (ex, ey, _) = split_cells(params, eval, cfg)?;
    let (miou, per_class_iou) = dense_linear_probe_features(&tx, &ty, &ex, &ey, dim, cfg)?;
    Ok(ProbeReport {
        miou,
        per_class_iou,
        knn_acc: None,
        purity: None,
        config: cfg.clone(),
    })
}

/// Leave-one-out cosine k-NN accuracy over unit embeddings. Neighbours tied
/// with the k-th similarity are all included; vote ties go to the smaller
/// label.
pub fn knn_accuracy(emb: &[Vec<f64>], labels: &[u32], k: usize) -> Result<f64> {
    if k == 0 || k % 2 == 0 {
        return Err(ProbeError::BadK(k));
    }
    let n = emb.len();
    if n < 2 || labels.len() != n {
        return Err(ProbeError::BadInput);
    }
    let mut correct = 0usize;
    let mut sims: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        sims.clear();
        for j in (0..n).filter(|&j| j != i) {
            let s: f64 = emb[i].iter().zip(&emb[j]).map(|(a, b)| a * b).sum();
            sims.push((s, j));
        }
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let kk = k.min(sims.len());
        let cut = sims[kk - 1].0;
        let mut votes: BTreeMap<u32, usize> = BTreeMap::new();
        for &(s, j) in sims.iter().take_while(|(s, _)| *s >= cut) {
            let _ = s;
            *votes.entry(labels[j]).or_default() += 1;
        }
        let mut best = (0usize, 0u32);
        for (&l, &v) in &votes {
            if v > best.0 {
                best = (v, l);
            }
        }
        if best.1 == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / n as f64)
}

/// k-NN accuracy of instance embeddings against each patch's dominant
/// texture.
pub fn knn_eval(params: &EncoderParams, patches: &[LabeledPatch], k: usize) -> Result<f64> {
    let mut emb = Vec::with_capacity(patches.len());
    for part in patches.chunks(16) {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let imgs: Vec<&ImagePatch> = part.iter().map(|p| &p.image).collect();
        let x = g.constant(images_to_tensor(&imgs)?);
        let (_, z) = bound.embed_instances(&mut g, x)?;
        let z = g.value(z);
        let d = z.shape()[1];
        emb.extend(z.data().chunks_exact(d).map(<[f64]>::to_vec));
    }
    let labels: Vec<u32> = patches.iter().map(LabeledPatch::dominant_texture).collect();
    knn_accuracy(&emb, &labels, k)
}

/// Area-weighted mean over concepts of the largest fraction of the concept
/// covered by one ground-truth label.
pub fn concept_purity(mask: &[u32], gt: &[u32]) -> f64 {
    if mask.is_empty() {
        return 1.0;
    }
    let mut joint: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for (&m, &g) in mask.iter().zip(gt) {
        *joint.entry((m, g)).or_default() += 1;
    }
    let mut best: BTreeMap<u32, usize> = BTreeMap::new();
    for (&(m, _), &n) in &joint {
        let b = best.entry(m).or_default();
        *b = (*b).max(n);
    }
    best.values().sum::<usize>() as f64 / mask.len() as f64
}

/// Mean purity of k-means proposals on each full image against its region
/// map, clustering `params`' features at `stage`.
pub fn proposal_purity(params: &EncoderParams, patches: &[LabeledPatch], k: usize, stage: usize, iters: usize, seed: u64) -> Result<f64> {
    if patches.is_empty() {
        return Err(ProbeError::BadInput);
    }
    let mut total = 0.0;
    for (base, part) in patches.chunks(16).enumerate() {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let imgs: Vec<&ImagePatch> = part.iter().map(|p| &p.image).collect();
        let x = g.constant(images_to_tensor(&imgs)?);
        let fs = bound.forward(&mut g, x, stage)?;
        let f = g.value(fs[stage - 1]);
        let (c, h, w) = (f.shape()[1], f.shape()[2], f.shape()[3]);
        for (i, p) in part.iter().enumerate() {
            let idx = base * 16 + i;
            let fi = crate::tensor::Tensor::new(&[c, h, w], f.data()[i * c * h * w..(i + 1) * c * h * w].to_vec())?;
            let mut r = rng::stream(seed, domain::PROBE, idx as u64, 0);
            let (mask, _) = kmeans_concepts(&fi, k, iters, &mut r, p.image.height())?;
            let gt = p.gt_labels.resize_nearest(mask.height, mask.width);
            total += concept_purity(&mask.labels, &gt.labels);
        }
    }
    Ok(total / patches.len() as f64)
}

/// Probe, k-NN and proposal purity in one report.
pub fn evaluate(params: &EncoderParams, train: &[LabeledPatch], eval: &[LabeledPatch], cfg: &ProbeConfig) -> Result<ProbeReport> {
    let mut rep = dense_linear_probe(params, train, eval, cfg)?;
    rep.knn_acc = Some(knn_eval(params, eval, cfg.knn_k)?);
    rep.purity = Some(proposal_purity(params, eval, cfg.purity_k, cfg.purity_stage, cfg.kmeans_iters, cfg.seed)?);
    Ok(rep)
}
