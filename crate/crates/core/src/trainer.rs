//! Pre-training: warm-up on the instance loss, then the concept loss, with
//! SGD on the online encoder, EMA updates of the key encoder and FIFO
//! queues.
//!
//! Randomness is drawn from streams keyed by `(seed, purpose, epoch,
//! index)`, so a sample's views do not depend on batch composition or on
//! how many workers prepared them, and a run resumed from an epoch boundary
//! replays exactly.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::concepts::{fh_segment, grid_concepts, kmeans_concepts, ConceptError, ConceptMask, FhParams};
use crate::encoder::{EncoderConfig, EncoderPair, EncoderParams};
use crate::geometry::{restore_mask, sample_view_pair, GeometryError, ViewConfig, ViewPair};
use crate::image::{images_to_tensor, DataItem, ImageError, LabelMap};
use crate::loss::{concept_quota, contrastive_forward, enqueue_padded, ConceptPair, ConceptQueue, ContrastiveBatch, LossError, StepLoss};
use crate::probe::concept_purity;
use crate::rng::{self, domain};
use crate::tensor::{Graph, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(&'static str),
    #[error("loss became non-finite ({loss}) at step {step}")]
    Diverged { step: u64, loss: f64 },
    #[error("dataset holds {have} items, fewer than one batch of {batch}")]
    TooFewItems { have: usize, batch: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Concept(#[from] ConceptError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

pub type Result<T> = core::result::Result<T, TrainError>;

/// Source of concept masks on the reference view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Generator {
    /// `s x s` grid cells.
    Grid { s: usize },
    /// Graph-based segmentation of the reference pixels.
    Fh(FhParams),
    /// k-means over the key encoder's features at `cluster_stage`.
    Bootstrap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    /// Half-cosine from `lr` to zero over the run, stepped per epoch.
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: u32,
    pub warmup_epochs: u32,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub tau: f64,
    /// Clusters for the bootstrap generator.
    pub k: usize,
    /// Encoder stage (1-based) whose features are clustered.
    pub cluster_stage: usize,
    pub kmeans_iters: usize,
    pub generator: Generator,
    pub queue_capacity: usize,
    pub ema: f64,
    pub seed: u64,
    /// Also contrast the key view against the query view.
    pub symmetric: bool,
    pub encoder: EncoderConfig,
    pub view: ViewConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            warmup_epochs: 2,
            batch_size: 32,
            lr: 0.03,
            lr_schedule: LrSchedule::Cosine,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            lambda: 1.0,
            tau: 0.2,
            k: 8,
            cluster_stage: 4,
            kmeans_iters: 10,
            generator: Generator::Bootstrap,
            queue_capacity: 1024,
            ema: 0.999,
            seed: 0,
            symmetric: false,
            encoder: EncoderConfig::default(),
            view: ViewConfig::default(),
        }
    }
}

impl TrainConfig {
    /// The instance-only baseline: `lambda = 0`.
    pub fn instance_baseline() -> Self {
        Self {
            lambda: 0.0,
            ..Self::default()
        }
    }

    pub fn grid(s: usize) -> Self {
        Self {
            generator: Generator::Grid { s },
            ..Self::default()
        }
    }

    pub fn fh(params: FhParams) -> Self {
        Self {
            generator: Generator::Fh(params),
            ..Self::default()
        }
    }

    pub fn bootstrap(k: usize, stage: usize) -> Self {
        Self {
            generator: Generator::Bootstrap,
            k,
            cluster_stage: stage,
            ..Self::default()
        }
    }

    /// Concept loss from the first epoch.
    pub fn without_warmup(self) -> Self {
        Self {
            warmup_epochs: 0,
            ..self
        }
    }

    /// Concept count used by the enqueue quota.
    pub fn concepts_per_image(&self) -> usize {
        match self.generator {
            Generator::Grid { s } => s * s,
            Generator::Fh(_) | Generator::Bootstrap => self.k,
        }
    }

    /// Resolution of the embedding stage's feature map.
    pub fn featres(&self) -> usize {
        self.view.out_size >> crate::encoder::N_STAGES
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let checks: [(bool, &'static str); 14] = [
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.warmup_epochs <= self.epochs, "warmup_epochs must not exceed epochs"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.lr >= 0.0 && self.lr.is_finite(), "lr must be finite and >= 0"),
            ((0.0..1.0).contains(&self.sgd_momentum), "sgd_momentum must lie in [0, 1)"),
            (self.weight_decay >= 0.0, "weight_decay must be >= 0"),
            ((0.0..=1.0).contains(&self.lambda), "lambda must lie in [0, 1]"),
            (self.tau > 0.0, "tau must be > 0"),
            (self.k >= 1, "k must be >= 1"),
            ((1..=crate::encoder::N_STAGES).contains(&self.cluster_stage), "cluster_stage must lie in 1..=5"),
            (self.queue_capacity >= 1, "queue_capacity must be >= 1"),
            ((0.0..=1.0).contains(&self.ema), "ema must lie in [0, 1]"),
            (self.view.out_size % (1 << crate::encoder::N_STAGES) == 0 && self.view.out_size > 0, "view size must be a positive multiple of 32"),
            (self.kmeans_iters >= 1, "kmeans_iters must be >= 1"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(TrainError::Config(msg));
            }
        }
        match self.generator {
            Generator::Grid { s } if s == 0 || s > self.view.out_size => Err(TrainError::Config("grid s must lie in 1..=view size")),
            Generator::Fh(p) if !(p.scale > 0.0 && p.sigma >= 0.0) => Err(TrainError::Config("fh scale must be > 0 and sigma >= 0")),
            Generator::Bootstrap => {
                let r = self.view.out_size >> self.cluster_stage;
                if self.k > r * r {
                    Err(TrainError::Config("k exceeds the cell count of the cluster stage"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// Learning rate during `epoch`.
    pub fn lr_at(&self, epoch: u32) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => 0.5 * self.lr * (1.0 + libm::cos(core::f64::consts::PI * epoch as f64 / self.epochs as f64)),
        }
    }

    /// Whether `epoch` optimises the concept loss.
    pub fn concept_phase(&self, epoch: u32) -> bool {
        self.lambda > 0.0 && epoch >= self.warmup_epochs
    }
}

/// Evaluation counters, checkpointed with the state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    /// Samples whose loss included a concept term.
    pub concept_evaluations: u64,
    /// Concept-phase samples that shared no concept and fell back.
    pub fallbacks: u64,
    /// Masks produced by any generator.
    pub masks_generated: u64,
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub pair: EncoderPair,
    /// SGD momentum buffers, one per online parameter tensor.
    pub velocity: Vec<Tensor>,
    pub instance_queue: ConceptQueue,
    pub concept_queue: ConceptQueue,
    /// Optimizer steps taken.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u32,
    pub counters: Counters,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(config.seed, domain::INIT, 0, 0);
        let online = EncoderParams::init(config.encoder.clone(), &mut r)?;
        let velocity = online.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
        let dim = config.encoder.dim;
        Ok(Self {
            pair: EncoderPair::new(online, config.ema),
            velocity,
            instance_queue: ConceptQueue::random(config.queue_capacity, dim, &mut rng::stream(config.seed, domain::INIT, 1, 0))?,
            concept_queue: ConceptQueue::random(config.queue_capacity, dim, &mut rng::stream(config.seed, domain::INIT, 2, 0))?,
            step: 0,
            epoch: 0,
            counters: Counters::default(),
            config,
        })
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }
}

/// Output of the per-sample data pipeline, computed without model access.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub views: ViewPair,
    /// Concept mask on the reference view, for non-bootstrap generators in
    /// the concept phase.
    pub mask: Option<ConceptMask>,
    /// Ground truth cropped to the reference view at mask resolution.
    pub gt_reference: Option<LabelMap>,
}

/// Samples the views of dataset item `index` for `epoch` and, for the grid
/// and segmentation generators, its concept mask. Pure: safe to run on any
/// thread in any order.
pub fn prepare_sample<D: DataItem + ?Sized>(config: &TrainConfig, epoch: u32, index: usize, item: &D) -> Result<PreparedSample> {
    let mut r = rng::stream(config.seed, domain::VIEWS, epoch as u64, index as u64);
    let views = sample_view_pair(&mut r, item.image(), &config.view)?;
    let out = config.view.out_size;
    let mask = if config.concept_phase(epoch) {
        match config.generator {
            Generator::Grid { s } => Some(grid_concepts(s, out)?),
            Generator::Fh(p) => Some(fh_segment(&views.x_r, &p)?),
            Generator::Bootstrap => None,
        }
    } else {
        None
    };
    let gt_reference = item.ground_truth().map(|gt| {
        let s = &views.spec_r;
        gt.crop_nearest(s.x0 as f64, s.y0 as f64, s.w as f64, s.h as f64, out, out)
    });
    Ok(PreparedSample {
        views,
        mask,
        gt_reference,
    })
}

/// k-means concept masks for a batch of reference views, clustering the key
/// encoder's features at `config.cluster_stage`.
pub fn bootstrap_masks(key: &EncoderParams, config: &TrainConfig, epoch: u32, indices: &[usize], refs: &[&crate::image::ImagePatch]) -> Result<Vec<ConceptMask>> {
    let mut g = Graph::new();
    let bound = key.bind(&mut g, false);
    let x = g.constant(images_to_tensor(refs)?);
    let stages = bound.forward(&mut g, x, config.cluster_stage)?;
    let f = g.value(stages[config.cluster_stage - 1]);
    let (c, h, w) = (f.shape()[1], f.shape()[2], f.shape()[3]);
    let per = c * h * w;
    let mut masks = Vec::with_capacity(refs.len());
    for (i, &idx) in indices.iter().enumerate() {
        let fi = Tensor::new(&[c, h, w], f.data()[i * per..(i + 1) * per].to_vec())?;
        let mut r = rng::stream(config.seed, domain::CONCEPTS, epoch as u64, idx as u64);
        let (mask, _) = kmeans_concepts(&fi, config.k, config.kmeans_iters, &mut r, config.view.out_size)?;
        masks.push(mask);
    }
    Ok(masks)
}

/// Result of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub epoch: u32,
    pub lr: f64,
    pub total: f64,
    pub losses: Vec<StepLoss>,
    pub concept_phase: bool,
    /// Purity of each generated mask against the ground truth, when both
    /// exist.
    pub purity: Vec<f64>,
    pub concepts_enqueued: usize,
}

fn sgd_update(state: &mut TrainState, grads: &[Tensor], lr: f64) {
    let (mu, wd) = (state.config.sgd_momentum, state.config.weight_decay);
    for ((p, v), g) in state.pair.online.tensors.iter_mut().zip(&mut state.velocity).zip(grads) {
        for ((pi, vi), &gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            let d = gi + wd * *pi;
            *vi = mu * *vi + d;
            *pi -= lr * *vi;
        }
    }
}

/// One optimizer step on already prepared samples. `indices` are the
/// dataset indices of the samples; they key the k-means streams.
///
/// On error, including divergence, `state` is left untouched.
pub fn apply_step(state: &mut TrainState, indices: &[usize], prepared: Vec<PreparedSample>) -> Result<StepReport> {
    if prepared.is_empty() || prepared.len() != indices.len() {
        return Err(TrainError::Loss(LossError::BadBatch));
    }
    let cfg = state.config.clone();
    let epoch = state.epoch;
    let phase = cfg.concept_phase(epoch);
    let featres = cfg.featres();

    let mut masks: Vec<Option<ConceptMask>> = prepared.iter().map(|p| p.mask.clone()).collect();
    if phase && cfg.generator == Generator::Bootstrap {
        let refs: Vec<_> = prepared.iter().map(|p| &p.views.x_r).collect();
        for (slot, m) in masks.iter_mut().zip(bootstrap_masks(&state.pair.key, &cfg, epoch, indices, &refs)?) {
            *slot = Some(m);
        }
    }

    let mut purity = Vec::new();
    let mut masks_generated = 0;
    let mut concepts = Vec::with_capacity(prepared.len());
    for (p, m) in prepared.iter().zip(&masks) {
        let Some(m) = m else {
            concepts.push(None);
            continue;
        };
        masks_generated += 1;
        if let Some(gt) = &p.gt_reference {
            purity.push(concept_purity(&m.labels, &gt.labels));
        }
        let v = &p.views;
        let m_q = restore_mask(m, &v.spec_r, &v.spec_q, featres)?;
        let m_k = restore_mask(m, &v.spec_r, &v.spec_k, featres)?;
        concepts.push(ConceptPair::new(m_q, m_k));
    }

    let mut batch = ContrastiveBatch {
        queries: prepared.iter().map(|p| &p.views.x_q).collect(),
        keys: prepared.iter().map(|p| &p.views.x_k).collect(),
        concepts,
    };
    if cfg.symmetric {
        let swapped: Vec<_> = batch
            .concepts
            .iter()
            .map(|c| c.as_ref().map(|c| ConceptPair {
                m_q: c.m_k.clone(),
                m_k: c.m_q.clone(),
                shared: c.shared.clone(),
            }))
            .collect();
        batch.queries.extend(prepared.iter().map(|p| &p.views.x_k));
        batch.keys.extend(prepared.iter().map(|p| &p.views.x_q));
        batch.concepts.extend(swapped);
    }

    let lr = cfg.lr_at(epoch);
    let mut fwd = contrastive_forward(&state.pair, &batch, &state.instance_queue, &state.concept_queue, cfg.tau, cfg.lambda)?;
    if !fwd.total.is_finite() {
        return Err(TrainError::Diverged {
            step: state.step,
            loss: fwd.total,
        });
    }
    fwd.graph.backward(fwd.root)?;
    let grads: Vec<Tensor> = fwd.online.vars.iter().map(|&v| fwd.graph.grad_tensor(v)).collect();
    drop(fwd.graph);

    state.counters.masks_generated += masks_generated;
    sgd_update(state, &grads, lr);
    state.pair.momentum_update()?;

    for k in &fwd.instance_keys {
        state.instance_queue.push(k)?;
    }
    let mut concepts_enqueued = 0;
    if fwd.concept_evaluated {
        let quota = concept_quota(cfg.concepts_per_image(), batch.queries.len());
        let mut r = rng::stream(cfg.seed, domain::ENQUEUE, state.step, 0);
        concepts_enqueued = enqueue_padded(&mut state.concept_queue, &fwd.concept_keys, quota, &mut r)?;
    }

    let n = prepared.len();
    for l in &fwd.per_sample {
        if l.l_concept.is_some() {
            state.counters.concept_evaluations += 1;
        } else if phase {
            state.counters.fallbacks += 1;
        }
    }
    let report = StepReport {
        step: state.step,
        epoch,
        lr,
        total: fwd.total,
        losses: fwd.per_sample,
        concept_phase: phase,
        purity,
        concepts_enqueued,
    };
    debug_assert!(report.losses.len() >= n);
    state.step += 1;
    Ok(report)
}

/// Prepares and applies one step over `(index, item)` pairs on the calling
/// thread.
pub fn train_step<D: DataItem>(state: &mut TrainState, items: &[(usize, &D)]) -> Result<StepReport> {
    let prepared = items
        .iter()
        .map(|(i, d)| prepare_sample(&state.config, state.epoch, *i, *d))
        .collect::<Result<Vec<_>>>()?;
    let indices: Vec<usize> = items.iter().map(|(i, _)| *i).collect();
    apply_step(state, &indices, prepared)
}

/// Dataset order for `epoch`: a seeded shuffle cut into full batches; the
/// trailing partial batch is dropped.
pub fn epoch_batches(config: &TrainConfig, epoch: u32, n_items: usize) -> Result<Vec<Vec<usize>>> {
    if n_items < config.batch_size {
        return Err(TrainError::TooFewItems {
            have: n_items,
            batch: config.batch_size,
        });
    }
    let mut order: Vec<usize> = (0..n_items).collect();
    let mut r = rng::stream(config.seed, domain::SHUFFLE, epoch as u64, 0);
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut r);
    Ok(order
        .chunks_exact(config.batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

/// Per-epoch means written to the metrics file.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: u32,
    pub steps: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_instance: f64,
    /// `None` when no sample had a concept term.
    pub loss_concept: Option<f64>,
    pub n_shared: f64,
    pub concept_evaluations: u64,
    pub fallbacks: u64,
    pub instance_queue_fill: f64,
    pub concept_queue_fill: f64,
    /// `None` without ground truth or masks.
    pub purity: Option<f64>,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,steps,lr,loss_total,loss_instance,loss_concept,n_shared,concept_evaluations,fallbacks,instance_queue_fill,concept_queue_fill,purity";

    /// Aggregates the step reports of one epoch.
    pub fn from_reports(state: &TrainState, epoch: u32, reports: &[StepReport]) -> Self {
        let mut n = 0usize;
        let (mut inst, mut shared, mut conc, mut nc) = (0.0, 0.0, 0.0, 0usize);
        let (mut fallbacks, mut evals) = (0u64, 0u64);
        let mut purity = Vec::new();
        for r in reports {
            for l in &r.losses {
                n += 1;
                inst += l.l_instance;
                shared += l.n_shared as f64;
                match l.l_concept {
                    Some(c) => {
                        conc += c;
                        nc += 1;
                        evals += 1;
                    }
                    None if r.concept_phase => fallbacks += 1,
                    None => {}
                }
            }
            purity.extend_from_slice(&r.purity);
        }
        let mean = |s: f64, c: usize| if c == 0 { 0.0 } else { s / c as f64 };
        Self {
            epoch,
            steps: reports.len() as u64,
            lr: state.config.lr_at(epoch),
            loss_total: mean(reports.iter().map(|r| r.total).sum(), reports.len()),
            loss_instance: mean(inst, n),
            loss_concept: (nc > 0).then(|| conc / nc as f64),
            n_shared: mean(shared, n),
            concept_evaluations: evals,
            fallbacks,
            instance_queue_fill: state.instance_queue.fill(),
            concept_queue_fill: state.concept_queue.fill(),
            purity: (!purity.is_empty()).then(|| purity.iter().sum::<f64>() / purity.len() as f64),
        }
    }
}

/// Runs the next epoch on the calling thread.
pub fn train_epoch<D: DataItem>(state: &mut TrainState, data: &[D]) -> Result<EpochMetrics> {
    let epoch = state.epoch;
    let mut reports = Vec::new();
    for b in epoch_batches(&state.config, epoch, data.len())? {
        let items: Vec<(usize, &D)> = b.iter().map(|&i| (i, &data[i])).collect();
        reports.push(train_step(state, &items)?);
    }
    let m = EpochMetrics::from_reports(state, epoch, &reports);
    state.epoch += 1;
    Ok(m)
}

/// Trains from the current state to `config.epochs`.
pub fn train_run<D: DataItem>(state: &mut TrainState, data: &[D]) -> Result<Vec<EpochMetrics>> {
    let mut out = vec![];
    while !state.is_finished() {
        out.push(train_epoch(state, data)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{synth_dataset, SynthConfig};

    fn tiny() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            warmup_epochs: 1,
            batch_size: 4,
            queue_capacity: 32,
            encoder: EncoderConfig {
                widths: [4, 4, 4, 4, 4],
                groups: 2,
                hidden: 8,
                dim: 8,
                ..EncoderConfig::default()
            },
            view: ViewConfig {
                out_size: 32,
                ..ViewConfig::default()
            },
            ..TrainConfig::grid(2)
        }
    }

    fn data() -> Vec<crate::image::LabeledPatch> {
        synth_dataset(&SynthConfig {
            n_images: 8,
            size: 32,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 0.03);
        assert!((c.lr_at(10) - 0.015).abs() < 1e-15);
    }

    #[test]
    fn validation_rejects_bad_values() {
        assert!(TrainConfig { warmup_epochs: 30, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lambda: 1.5, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::bootstrap(64, 5).validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn warmup_leaves_concept_machinery_untouched() {
        let d = data();
        let mut s = TrainState::new(TrainConfig { warmup_epochs: 2, ..tiny() }).unwrap();
        let m = train_run(&mut s, &d).unwrap();
        assert_eq!(s.counters, Counters::default());
        assert_eq!(s.concept_queue.total_enqueued(), 0);
        assert!(m.iter().all(|e| e.loss_concept.is_none()));
    }

    #[test]
    fn concept_phase_fills_concept_queue() {
        let d = data();
        let mut s = TrainState::new(tiny()).unwrap();
        let m = train_run(&mut s, &d).unwrap();
        assert!(m[0].loss_concept.is_none());
        assert!(m[1].loss_concept.is_some());
        assert!(s.counters.concept_evaluations > 0);
        assert_eq!(s.concept_queue.total_enqueued(), 2 * 16);
    }

    #[test]
    fn zero_lr_freezes_online_params() {
        let d = data();
        let mut s = TrainState::new(TrainConfig { lr: 0.0, ..tiny() }).unwrap();
        let before = s.pair.online.clone();
        let items: Vec<_> = (0..4).map(|i| (i, &d[i])).collect();
        let a = train_step(&mut s, &items).unwrap();
        assert_eq!(s.pair.online, before);
        assert!(a.total.is_finite());
    }
}
