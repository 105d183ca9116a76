//! Concept mask generators: grid prior, Felzenszwalb-Huttenlocher graph
//! segmentation, and k-means over encoder feature maps.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use thiserror::Error;

use crate::image::ImagePatch;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConceptError {
    #[error("grid size {s} must lie in [1, {resolution}]")]
    BadGrid { s: usize, resolution: usize },
    #[error("k-means: k = {k} exceeds the {cells} feature cells")]
    TooManyClusters { k: usize, cells: usize },
    #[error("k-means: k must be at least 1")]
    ZeroClusters,
    #[error("k-means: features must have shape [C, H, W], got {0:?}")]
    BadFeatures(Vec<usize>),
    #[error("fh: scale must be positive and min_size at least 1")]
    BadFhParams,
}

/// Partition of an `height x width` grid into consecutive labels `[0, K)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConceptMask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    pub n_concepts: usize,
}

impl ConceptMask {
    /// Renumbers arbitrary labels to `0..K` in order of first appearance
    /// in raster order.
    pub fn from_raw(height: usize, width: usize, raw: &[usize]) -> Self {
        let mut map: Vec<Option<u32>> = vec![None; raw.iter().copied().max().map_or(0, |m| m + 1)];
        let mut next = 0u32;
        let labels = raw
            .iter()
            .map(|&r| {
                *map[r].get_or_insert_with(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect();
        Self {
            height,
            width,
            labels,
            n_concepts: next as usize,
        }
    }

    /// Pixel count per concept.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.n_concepts];
        self.labels.iter().for_each(|&l| s[l as usize] += 1);
        s
    }

    /// Nearest-neighbour upsampling to `out_h x out_w`.
    pub fn resize_nearest(&self, out_h: usize, out_w: usize) -> Self {
        let mut labels = Vec::with_capacity(out_h * out_w);
        for r in 0..out_h {
            let sr = r * self.height / out_h;
            for c in 0..out_w {
                labels.push(self.labels[sr * self.width + c * self.width / out_w]);
            }
        }
        let raw: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        Self::from_raw(out_h, out_w, &raw)
    }

    /// Checks the partition invariant: labels are exactly `0..n_concepts`.
    pub fn is_partition(&self) -> bool {
        self.labels.len() == self.height * self.width
            && self.sizes().iter().all(|&s| s > 0)
            && self.labels.iter().all(|&l| (l as usize) < self.n_concepts)
    }
}

/// `s x s` axis-aligned cells over an `R x R` grid; pixel `(r, c)` gets
/// `floor(r*s/R)*s + floor(c*s/R)`.
pub fn grid_concepts(s: usize, resolution: usize) -> Result<ConceptMask, ConceptError> {
    if s == 0 || s > resolution {
        return Err(ConceptError::BadGrid { s, resolution });
    }
    let mut labels = Vec::with_capacity(resolution * resolution);
    for r in 0..resolution {
        for c in 0..resolution {
            labels.push(((r * s / resolution) * s + c * s / resolution) as u32);
        }
    }
    Ok(ConceptMask {
        height: resolution,
        width: resolution,
        labels,
        n_concepts: s * s,
    })
}

/// Felzenszwalb-Huttenlocher parameters. `scale` is in 0-255 intensity
/// units (edge weights are RGB distances on that scale).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FhParams {
    pub scale: f64,
    pub min_size: usize,
    pub sigma: f64,
}

impl FhParams {
    /// Scale and minimum size tied to one value `s`, default smoothing.
    pub fn tied(s: f64) -> Self {
        Self {
            scale: s,
            min_size: (libm::round(s) as usize).max(1),
            sigma: 0.8,
        }
    }
}

/// Weighted edge between two pixels, `src < dst` in raster order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub w: f64,
    pub src: usize,
    pub dst: usize,
}

/// Disjoint-set forest with union by rank and path halving.
#[derive(Clone, Debug)]
pub struct DisjointSet {
    parent: Vec<usize>,
    rank: Vec<u8>,
    size: Vec<usize>,
    internal: Vec<f64>,
}

impl DisjointSet {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
            size: vec![1; n],
            internal: vec![0.0; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn size(&self, root: usize) -> usize {
        self.size[root]
    }

    /// Largest edge weight merged inside the component so far.
    pub fn internal(&self, root: usize) -> f64 {
        self.internal[root]
    }

    /// Joins two roots; the merged component's internal difference is `w`.
    pub fn union(&mut self, a: usize, b: usize, w: f64) -> usize {
        let (hi, lo) = if self.rank[a] >= self.rank[b] { (a, b) } else { (b, a) };
        self.parent[lo] = hi;
        if self.rank[hi] == self.rank[lo] {
            self.rank[hi] += 1;
        }
        self.size[hi] += self.size[lo];
        self.internal[hi] = w;
        hi
    }
}

/// Separable Gaussian smoothing of each channel, borders clamped.
pub fn gaussian_smooth(image: &ImagePatch, sigma: f64) -> Vec<f64> {
    let (h, w) = (image.height(), image.width());
    let src = image.values();
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let radius = libm::ceil(4.0 * sigma) as isize;
    let kernel: Vec<f64> = {
        let raw: Vec<f64> = (-radius..=radius)
            .map(|d| libm::exp(-((d * d) as f64) / (2.0 * sigma * sigma)))
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    };
    let at = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; src.len()];
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    acc += kv * src[(r * w + at(c as isize + k as isize - radius, w)) * 3 + ch];
                }
                tmp[(r * w + c) * 3 + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    acc += kv * tmp[(at(r as isize + k as isize - radius, h) * w + c) * 3 + ch];
                }
                out[(r * w + c) * 3 + ch] = acc;
            }
        }
    }
    out
}

/// 8-connected edges of an interleaved RGB buffer, weights in 0-255 units,
/// sorted by `(weight, src, dst)`.
pub fn pixel_edges(values: &[f64], h: usize, w: usize) -> Vec<Edge> {
    let px = |i: usize| [values[i * 3] * 255.0, values[i * 3 + 1] * 255.0, values[i * 3 + 2] * 255.0];
    let dist = |a: usize, b: usize| {
        let (p, q) = (px(a), px(b));
        libm::sqrt((p[0] - q[0]) * (p[0] - q[0]) + (p[1] - q[1]) * (p[1] - q[1]) + (p[2] - q[2]) * (p[2] - q[2]))
    };
    let mut edges = Vec::with_capacity(h * w * 4);
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if c + 1 < w {
                edges.push(Edge { w: dist(i, i + 1), src: i, dst: i + 1 });
            }
            if r + 1 < h {
                if c > 0 {
                    edges.push(Edge { w: dist(i, i + w - 1), src: i, dst: i + w - 1 });
                }
                edges.push(Edge { w: dist(i, i + w), src: i, dst: i + w });
                if c + 1 < w {
                    edges.push(Edge { w: dist(i, i + w + 1), src: i, dst: i + w + 1 });
                }
            }
        }
    }
    edges.sort_by(|a, b| {
        a.w.total_cmp(&b.w)
            .then(a.src.cmp(&b.src))
            .then(a.dst.cmp(&b.dst))
    });
    edges
}

/// Felzenszwalb-Huttenlocher segmentation of `image` into a concept mask.
///
/// Components `C1`, `C2` joined by edge `e` merge when
/// `w(e) <= min(Int(C1) + scale/|C1|, Int(C2) + scale/|C2|)`; afterwards
/// every component smaller than `min_size` is merged across its lightest
/// boundary edge.
pub fn fh_segment(image: &ImagePatch, p: &FhParams) -> Result<ConceptMask, ConceptError> {
    if !(p.scale > 0.0) || p.min_size == 0 {
        return Err(ConceptError::BadFhParams);
    }
    let (h, w) = (image.height(), image.width());
    let smooth = gaussian_smooth(image, p.sigma);
    let edges = pixel_edges(&smooth, h, w);
    let mut ds = DisjointSet::new(h * w);
    for e in &edges {
        let a = ds.find(e.src);
        let b = ds.find(e.dst);
        if a == b {
            continue;
        }
        let ta = ds.internal(a) + p.scale / ds.size(a) as f64;
        let tb = ds.internal(b) + p.scale / ds.size(b) as f64;
        if e.w <= ta.min(tb) {
            ds.union(a, b, e.w);
        }
    }
    for e in &edges {
        let a = ds.find(e.src);
        let b = ds.find(e.dst);
        if a != b && (ds.size(a) < p.min_size || ds.size(b) < p.min_size) {
            let keep = ds.internal(a).max(ds.internal(b)).max(e.w);
            ds.union(a, b, keep);
        }
    }
    let raw: Vec<usize> = (0..h * w).map(|i| ds.find(i)).collect();
    Ok(ConceptMask::from_raw(h, w, &raw))
}

/// Result of k-means over feature cells.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    /// Cluster index per cell (before renumbering).
    pub assignment: Vec<usize>,
    pub centroids: Vec<f64>,
    /// Inertia after each assignment step, one entry per iteration.
    pub inertia: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding over `points` (row-major `n x dim`).
pub fn kmeans_pp_init(points: &[f64], dim: usize, k: usize, rng: &mut Rng) -> Vec<f64> {
    let n = points.len() / dim;
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(first))).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if t < d {
                    chosen = i;
                    break;
                }
                t -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.extend_from_slice(row(pick));
        let c = &centroids[centroids.len() - dim..];
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), c));
        }
    }
    centroids
}

/// Lloyd iterations from given centroids. Ties go to the lower cluster
/// index; an empty cluster is re-seeded at the point farthest from its
/// assigned centroid.
pub fn lloyd(points: &[f64], dim: usize, init: Vec<f64>, iters: usize) -> KMeansResult {
    let n = points.len() / dim;
    let k = init.len() / dim;
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut centroids = init;
    let mut assignment = vec![0usize; n];
    let mut inertia = Vec::with_capacity(iters);
    for _ in 0..iters {
        let mut total = 0.0;
        let mut dists = vec![0.0; n];
        for i in 0..n {
            let mut best = (f64::INFINITY, 0);
            for c in 0..k {
                let d = sq_dist(row(i), &centroids[c * dim..(c + 1) * dim]);
                if d < best.0 {
                    best = (d, c);
                }
            }
            assignment[i] = best.1;
            dists[i] = best.0;
            total += best.0;
        }
        inertia.push(total);
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignment[i];
            counts[c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Farthest point from its (updated) assigned centroid.
                let mut far = (f64::NEG_INFINITY, 0);
                for i in 0..n {
                    let a = assignment[i];
                    let d = sq_dist(row(i), &centroids[a * dim..(a + 1) * dim]);
                    if d > far.0 {
                        far = (d, i);
                    }
                }
                let src: Vec<f64> = row(far.1).to_vec();
                centroids[c * dim..(c + 1) * dim].copy_from_slice(&src);
                let old = assignment[far.1];
                counts[old] -= 1;
                counts[c] = 1;
                assignment[far.1] = c;
            }
        }
    }
    if iters == 0 {
        for i in 0..n {
            let mut best = (f64::INFINITY, 0);
            for c in 0..k {
                let d = sq_dist(row(i), &centroids[c * dim..(c + 1) * dim]);
                if d < best.0 {
                    best = (d, c);
                }
            }
            assignment[i] = best.1;
        }
    }
    KMeansResult {
        assignment,
        centroids,
        inertia,
    }
}

/// Cells of a `[C, H, W]` feature map as row-major `H*W x C` points.
pub fn feature_cells(feat: &Tensor) -> Result<(Vec<f64>, usize, usize, usize), ConceptError> {
    let s = feat.shape();
    let (c, h, w) = match s {
        [c, h, w] => (*c, *h, *w),
        [1, c, h, w] => (*c, *h, *w),
        _ => return Err(ConceptError::BadFeatures(s.to_vec())),
    };
    let d = feat.data();
    let mut pts = vec![0.0; h * w * c];
    for ch in 0..c {
        for i in 0..h * w {
            pts[i * c + ch] = d[ch * h * w + i];
        }
    }
    Ok((pts, c, h, w))
}

/// Clusters the cells of `feat [C, Hf, Wf]` into at most `k` concepts and
/// upsamples the label grid to `out_size x out_size`.
///
/// The features are plain values here: callers pass key-encoder outputs,
/// which never carry gradients.
pub fn kmeans_concepts(
    feat: &Tensor,
    k: usize,
    iters: usize,
    rng: &mut Rng,
    out_size: usize,
) -> Result<(ConceptMask, KMeansResult), ConceptError> {
    let (pts, c, h, w) = feature_cells(feat)?;
    if k == 0 {
        return Err(ConceptError::ZeroClusters);
    }
    if k > h * w {
        return Err(ConceptError::TooManyClusters { k, cells: h * w });
    }
    let init = kmeans_pp_init(&pts, c, k, rng);
    let res = lloyd(&pts, c, init, iters);
    let grid = ConceptMask::from_raw(h, w, &res.assignment);
    Ok((grid.resize_nearest(out_size, out_size), res))
}
