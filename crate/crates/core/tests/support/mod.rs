//! Reference implementations shared by the integration tests. Each one is
//! written from the definition, without calling the routine it checks.
#![allow(dead_code)]

use std::collections::VecDeque;

use concl_core::encoder::{EncoderConfig, EncoderParams};
use concl_core::geometry::sample_view_pair;
use concl_core::image::{images_to_tensor, ImagePatch};
use concl_core::loss::ConceptQueue;
use concl_core::rng::{self, domain};
use concl_core::trainer::TrainConfig;
use concl_core::{Graph, Tensor};
use rand::seq::SliceRandom;

/// Relabels by order of first appearance.
pub fn canonical<T: PartialEq + Copy>(labels: &[T]) -> Vec<u32> {
    let mut seen: Vec<T> = Vec::new();
    labels
        .iter()
        .map(|l| match seen.iter().position(|s| s == l) {
            Some(i) => i as u32,
            None => {
                seen.push(*l);
                (seen.len() - 1) as u32
            }
        })
        .collect()
}

fn smooth(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let radius = (4.0 * sigma).ceil() as i64;
    let mut kernel = Vec::new();
    for d in -radius..=radius {
        kernel.push((-((d * d) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let mut total = 0.0;
    for k in &kernel {
        total += k;
    }
    for k in kernel.iter_mut() {
        *k /= total;
    }
    let clamp = |i: i64, n: usize| i.max(0).min(n as i64 - 1) as usize;
    let mut horiz = vec![0.0; src.len()];
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                let mut acc = 0.0;
                for (t, kv) in kernel.iter().enumerate() {
                    let cc = clamp(c as i64 + t as i64 - radius, w);
                    acc += kv * src[(r * w + cc) * 3 + ch];
                }
                horiz[(r * w + c) * 3 + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                let mut acc = 0.0;
                for (t, kv) in kernel.iter().enumerate() {
                    let rr = clamp(r as i64 + t as i64 - radius, h);
                    acc += kv * horiz[(rr * w + c) * 3 + ch];
                }
                out[(r * w + c) * 3 + ch] = acc;
            }
        }
    }
    out
}

/// Graph segmentation with an explicit label array: every merge relabels
/// the absorbed component pixel by pixel.
pub fn naive_fh(image: &ImagePatch, scale: f64, min_size: usize, sigma: f64) -> Vec<u32> {
    let (h, w) = (image.height(), image.width());
    let n = h * w;
    let v = smooth(image.values(), h, w, sigma);
    let weight = |a: usize, b: usize| {
        let mut s = 0.0;
        for ch in 0..3 {
            let d = v[a * 3 + ch] * 255.0 - v[b * 3 + ch] * 255.0;
            s += d * d;
        }
        s.sqrt()
    };
    let mut edges: Vec<(f64, usize, usize)> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let a = r * w + c;
            for (dr, dc) in [(0i64, 1i64), (1, -1), (1, 0), (1, 1)] {
                let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                if rr < h as i64 && cc >= 0 && cc < w as i64 {
                    let b = rr as usize * w + cc as usize;
                    edges.push((weight(a, b), a.min(b), a.max(b)));
                }
            }
        }
    }
    edges.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));

    let mut comp: Vec<usize> = (0..n).collect();
    let mut size = vec![1usize; n];
    let mut internal = vec![0.0f64; n];
    let merge = |comp: &mut Vec<usize>, size: &mut Vec<usize>, internal: &mut Vec<f64>, a: usize, b: usize, wt: f64| {
        for x in comp.iter_mut() {
            if *x == b {
                *x = a;
            }
        }
        size[a] += size[b];
        internal[a] = internal[a].max(internal[b]).max(wt);
    };
    for &(wt, s, d) in &edges {
        let (a, b) = (comp[s], comp[d]);
        if a == b {
            continue;
        }
        let limit = (internal[a] + scale / size[a] as f64).min(internal[b] + scale / size[b] as f64);
        if wt <= limit {
            merge(&mut comp, &mut size, &mut internal, a, b, wt);
        }
    }
    for &(wt, s, d) in &edges {
        let (a, b) = (comp[s], comp[d]);
        if a != b && (size[a] < min_size || size[b] < min_size) {
            merge(&mut comp, &mut size, &mut internal, a, b, wt);
        }
    }
    canonical(&comp)
}

/// Random 16x16 test image: a few flat blocks from a coarse palette (so
/// equal-weight edges are common), with noise on some images.
pub fn fh_test_image(seed: u64) -> ImagePatch {
    use rand::Rng;
    let mut r = rng::stream(seed, 900, 0, 0);
    let n = 16;
    let blocks = r.random_range(1..=4usize);
    let palette: Vec<[f64; 3]> = (0..4).map(|_| [0, 1, 2].map(|_| r.random_range(0..5u32) as f64 / 4.0)).collect();
    let noise = if r.random_bool(0.5) { r.random_range(0.0..0.3) } else { 0.0 };
    let mut vals = Vec::with_capacity(n * n * 3);
    for row in 0..n {
        for col in 0..n {
            let k = (row * blocks / n + col * blocks / n * 3) % palette.len();
            for ch in 0..3 {
                let x: f64 = palette[k][ch] + noise * (r.random::<f64>() - 0.5);
                vals.push(x.clamp(0.0, 1.0));
            }
        }
    }
    ImagePatch::new(n, n, vals).unwrap()
}

/// Momentum-contrast training written directly against the graph ops:
/// per-step instance InfoNCE on a FIFO of key embeddings, SGD with
/// momentum and weight decay, then the moving-average key update.
pub struct InstanceOnly {
    cfg: TrainConfig,
    online: Vec<Tensor>,
    key: Vec<Tensor>,
    velocity: Vec<Vec<f64>>,
    queue: VecDeque<Vec<f64>>,
    epoch: u32,
    enc: EncoderConfig,
}

impl InstanceOnly {
    pub fn new(cfg: TrainConfig) -> Self {
        let online = EncoderParams::init(cfg.encoder, &mut rng::stream(cfg.seed, domain::INIT, 0, 0)).unwrap();
        let start = ConceptQueue::random(cfg.queue_capacity, cfg.encoder.dim, &mut rng::stream(cfg.seed, domain::INIT, 1, 0)).unwrap();
        Self {
            velocity: online.tensors.iter().map(|t| vec![0.0; t.numel()]).collect(),
            key: online.tensors.clone(),
            online: online.tensors,
            queue: start.entries().map(<[f64]>::to_vec).collect(),
            epoch: 0,
            enc: cfg.encoder,
            cfg,
        }
    }

    fn params(&self, t: &[Tensor]) -> EncoderParams {
        let mut p = EncoderParams::zeros(self.enc).unwrap();
        p.tensors = t.to_vec();
        p
    }

    /// Losses of every step of the next epoch.
    pub fn epoch(&mut self, data: &[ImagePatch], max_steps: usize) -> Vec<f64> {
        let c = self.cfg.clone();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::stream(c.seed, domain::SHUFFLE, self.epoch as u64, 0));
        let lr = 0.5 * c.lr * (1.0 + (std::f64::consts::PI * self.epoch as f64 / c.epochs as f64).cos());
        let mut losses = Vec::new();
        for batch in order.chunks_exact(c.batch_size).take(max_steps) {
            let views: Vec<_> = batch
                .iter()
                .map(|&i| sample_view_pair(&mut rng::stream(c.seed, domain::VIEWS, self.epoch as u64, i as u64), &data[i], &c.view).unwrap())
                .collect();
            let key = self.params(&self.key);
            let mut kg = Graph::new();
            let kb = key.bind(&mut kg, false);
            let xk = kg.constant(images_to_tensor(&views.iter().map(|v| &v.x_k).collect::<Vec<_>>()).unwrap());
            let (_, k) = kb.embed_instances(&mut kg, xk).unwrap();
            let keys = kg.value(k).clone();
            let neg: Vec<f64> = self.queue.iter().flatten().copied().collect();
            let neg = Tensor::new(&[self.queue.len(), c.encoder.dim], neg).unwrap();

            let online = self.params(&self.online);
            let mut g = Graph::new();
            let ob = online.bind(&mut g, true);
            let xq = g.constant(images_to_tensor(&views.iter().map(|v| &v.x_q).collect::<Vec<_>>()).unwrap());
            let (_, q) = ob.embed_instances(&mut g, xq).unwrap();
            let kp = g.constant(keys.clone());
            let kn = g.constant(neg);
            let l = g.info_nce(q, kp, Some(kn), c.tau).unwrap();
            let root = g.mean(l);
            losses.push(g.value(root).item());
            g.backward(root).unwrap();
            let grads: Vec<Vec<f64>> = ob.vars.iter().map(|&v| g.grad_tensor(v).into_data()).collect();

            for ((p, vel), gr) in self.online.iter_mut().zip(&mut self.velocity).zip(&grads) {
                let pd = p.data_mut();
                for i in 0..pd.len() {
                    let d = gr[i] + c.weight_decay * pd[i];
                    vel[i] = c.sgd_momentum * vel[i] + d;
                    pd[i] -= lr * vel[i];
                }
            }
            for (kt, ot) in self.key.iter_mut().zip(&self.online) {
                for (kv, ov) in kt.data_mut().iter_mut().zip(ot.data()) {
                    *kv = c.ema * *kv + (1.0 - c.ema) * ov;
                }
            }
            for row in keys.data().chunks_exact(c.encoder.dim) {
                self.queue.push_back(row.to_vec());
                if self.queue.len() > c.queue_capacity {
                    self.queue.pop_front();
                }
            }
        }
        self.epoch += 1;
        losses
    }
}
