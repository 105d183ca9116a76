//! Five-stage convolutional encoder, projection head and momentum copy.
//!
//! Stage `i` (1-based) is `conv3x3 -> GN -> ReLU -> conv3x3 -> GN -> ReLU ->
//! 2x2 average pool`, so its output `f_i` has spatial extent `size / 2^i`.
//! The projection head is `linear -> ReLU -> linear`, always followed by
//! L2 normalization.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use alloc::format;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::geometry::RestoredMask;
use crate::image::{images_to_tensor, ImagePatch};
use crate::rng::Rng;
use crate::tensor::{Graph, PoolRegion, Result, Tensor, TensorError, Var};

pub const N_STAGES: usize = 5;
const PER_STAGE: usize = 6;
const HEAD_OFFSET: usize = N_STAGES * PER_STAGE;

/// Architecture hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub widths: [usize; N_STAGES],
    pub groups: usize,
    pub hidden: usize,
    pub dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: [16, 32, 64, 128, 256],
            groups: 8,
            hidden: 64,
            dim: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.iter().any(|&w| w == 0 || self.groups == 0 || w % self.groups != 0) {
            return Err(TensorError::InvalidArgument(
                "encoder: every stage width must be a positive multiple of groups",
            ));
        }
        if self.hidden == 0 || self.dim == 0 || self.in_channels == 0 {
            return Err(TensorError::InvalidArgument("encoder: head sizes must be positive"));
        }
        Ok(())
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.widths[stage - 1]
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::with_capacity(HEAD_OFFSET + 4);
        let mut cin = self.in_channels;
        for s in 0..N_STAGES {
            let c = self.widths[s];
            let st = s + 1;
            out.push((format!("stage{st}.conv_a.weight"), vec![c, cin, 3, 3]));
            out.push((format!("stage{st}.norm_a.gamma"), vec![c]));
            out.push((format!("stage{st}.norm_a.beta"), vec![c]));
            out.push((format!("stage{st}.conv_b.weight"), vec![c, c, 3, 3]));
            out.push((format!("stage{st}.norm_b.gamma"), vec![c]));
            out.push((format!("stage{st}.norm_b.beta"), vec![c]));
            cin = c;
        }
        out.push(("head.fc1.weight".into(), vec![self.hidden, cin]));
        out.push(("head.fc1.bias".into(), vec![self.hidden]));
        out.push(("head.fc2.weight".into(), vec![self.dim, self.hidden]));
        out.push(("head.fc2.bias".into(), vec![self.dim]));
        out
    }
}

/// Parameter tensors of one encoder (backbone plus projection head).
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub tensors: Vec<Tensor>,
}

impl EncoderParams {
    /// He-normal convolutions, unit/zero norm affine, uniform `1/sqrt(fan_in)`
    /// linear layers.
    pub fn init(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data: Vec<f64> = if name.ends_with("conv_a.weight") || name.ends_with("conv_b.weight") {
                    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                    let std = libm::sqrt(2.0 / fan_in);
                    (0..n)
                        .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                        .collect()
                } else if name.ends_with("gamma") {
                    vec![1.0; n]
                } else if name.ends_with("beta") {
                    vec![0.0; n]
                } else {
                    let fan_in = if shape.len() == 2 { shape[1] } else { config.hidden_fan_in(&name) };
                    let bound = 1.0 / libm::sqrt(fan_in as f64);
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                };
                Tensor::new(&shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, tensors })
    }

    pub fn zeros(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .layout()
            .into_iter()
            .map(|(_, shape)| Tensor::zeros(&shape))
            .collect();
        Ok(Self { config, tensors })
    }

    pub fn names(&self) -> Vec<String> {
        self.config.layout().into_iter().map(|(n, _)| n).collect()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Registers every tensor as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        BoundParams {
            config: self.config,
            vars: self
                .tensors
                .iter()
                .map(|t| g.leaf(t.clone(), trainable))
                .collect(),
        }
    }
}

impl EncoderConfig {
    fn hidden_fan_in(&self, name: &str) -> usize {
        if name.starts_with("head.fc1") {
            self.widths[N_STAGES - 1]
        } else {
            self.hidden
        }
    }
}

/// Encoder parameters registered on a graph.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub config: EncoderConfig,
    pub vars: Vec<Var>,
}

impl BoundParams {
    pub fn from_vars(config: EncoderConfig, vars: Vec<Var>) -> Result<Self> {
        if vars.len() != HEAD_OFFSET + 4 {
            return Err(TensorError::InvalidArgument("encoder: wrong number of parameter leaves"));
        }
        Ok(Self { config, vars })
    }

    /// Stage outputs `f_1 .. f_{up_to}` for `input [N, C, H, W]`.
    pub fn forward(&self, g: &mut Graph, input: Var, up_to: usize) -> Result<Vec<Var>> {
        if !(1..=N_STAGES).contains(&up_to) {
            return Err(TensorError::InvalidArgument("encoder: stage index must lie in 1..=5"));
        }
        let s = g.shape(input).to_vec();
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(TensorError::InvalidShape {
                op: "encoder",
                shape: s,
                reason: "expected [N, in_channels, H, W]",
            });
        }
        let div = 1usize << N_STAGES;
        if s[2] % div != 0 || s[3] % div != 0 {
            return Err(TensorError::InvalidShape {
                op: "encoder",
                shape: s,
                reason: "spatial size must be divisible by 32",
            });
        }
        let groups = self.config.groups;
        let mut x = input;
        let mut outs = Vec::with_capacity(up_to);
        for st in 0..up_to {
            let p = &self.vars[st * PER_STAGE..(st + 1) * PER_STAGE];
            x = g.conv2d(x, p[0], 1, 1)?;
            x = g.group_norm(x, p[1], p[2], groups)?;
            x = g.relu(x);
            x = g.conv2d(x, p[3], 1, 1)?;
            x = g.group_norm(x, p[4], p[5], groups)?;
            x = g.relu(x);
            x = g.avg_pool2(x)?;
            outs.push(x);
        }
        Ok(outs)
    }

    /// Projection head followed by L2 normalization: `[R, C] -> [R, dim]`.
    pub fn project(&self, g: &mut Graph, pooled: Var) -> Result<Var> {
        let h = &self.vars[HEAD_OFFSET..];
        let x = g.linear(pooled, h[0], h[1])?;
        let x = g.relu(x);
        let x = g.linear(x, h[2], h[3])?;
        g.l2_normalize(x)
    }

    /// `normalize(h(GAP(f5)))` for every sample of `input`.
    pub fn embed_instances(&self, g: &mut Graph, input: Var) -> Result<(Var, Var)> {
        let f5 = *self.forward(g, input, N_STAGES)?.last().expect("five stages");
        let pooled = g.gap(f5)?;
        Ok((f5, self.project(g, pooled)?))
    }
}

/// Pooling regions for `labels` of a restored mask over sample `sample`.
pub fn mask_regions(mask: &RestoredMask, sample: usize, labels: &[u32]) -> Result<Vec<PoolRegion>> {
    labels
        .iter()
        .map(|&l| {
            let cells = mask.cells_of(l);
            if cells.is_empty() {
                Err(TensorError::InvalidArgument("concept label absent from the restored mask"))
            } else {
                Ok(PoolRegion { sample, cells })
            }
        })
        .collect()
}

/// Stage outputs `f_1 .. f_5` of a single image.
pub fn forward_stages(params: &EncoderParams, image: &ImagePatch) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let b = params.bind(&mut g, false);
    let x = g.constant(images_to_tensor(&[image]).expect("one image"));
    let outs = b.forward(&mut g, x, N_STAGES)?;
    Ok(outs.into_iter().map(|v| g.value(v).clone()).collect())
}

/// Unit-norm instance embedding `normalize(h(GAP(f5(image))))`.
pub fn embed_instance(params: &EncoderParams, image: &ImagePatch) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let b = params.bind(&mut g, false);
    let x = g.constant(images_to_tensor(&[image]).expect("one image"));
    let (_, z) = b.embed_instances(&mut g, x)?;
    Ok(g.value(z).data().to_vec())
}

/// Unit-norm concept embedding `normalize(h(MAP(f5(image), m_label)))`.
pub fn embed_concept(
    params: &EncoderParams,
    image: &ImagePatch,
    restored: &RestoredMask,
    label: u32,
) -> Result<Vec<f64>> {
    if !restored.present.contains(&label) {
        return Err(TensorError::InvalidArgument("concept label absent from the restored mask"));
    }
    let mut g = Graph::new();
    let b = params.bind(&mut g, false);
    let x = g.constant(images_to_tensor(&[image]).expect("one image"));
    let f5 = *b.forward(&mut g, x, N_STAGES)?.last().expect("five stages");
    let fs = g.shape(f5).to_vec();
    if restored.featres != fs[2] || restored.featres != fs[3] {
        return Err(TensorError::InvalidArgument(
            "restored mask resolution differs from the stage-5 feature map",
        ));
    }
    let regions = mask_regions(restored, 0, &[label])?;
    let pooled = g.masked_avg_pool(f5, regions)?;
    let z = b.project(&mut g, pooled)?;
    Ok(g.value(z).data().to_vec())
}

/// Online encoder, its momentum (key) copy and the momentum coefficient.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderPair {
    pub online: EncoderParams,
    pub key: EncoderParams,
    pub momentum: f64,
}

impl EncoderPair {
    /// Key starts as an exact copy of the online encoder.
    pub fn new(online: EncoderParams, momentum: f64) -> Self {
        Self {
            key: online.clone(),
            online,
            momentum,
        }
    }

    /// `key <- m * key + (1 - m) * online`, elementwise.
    ///
    /// Evaluated as `key + (1 - m) * (online - key)` so a key equal to the
    /// online weights stays bitwise fixed; `m = 0` copies exactly.
    pub fn momentum_update(&mut self) -> Result<()> {
        let m = self.momentum;
        if !(0.0..=1.0).contains(&m) {
            return Err(TensorError::InvalidArgument("momentum must lie in [0, 1]"));
        }
        if m == 1.0 {
            return Ok(());
        }
        for (k, o) in self.key.tensors.iter_mut().zip(&self.online.tensors) {
            if m == 0.0 {
                k.data_mut().copy_from_slice(o.data());
            } else {
                for (kv, ov) in k.data_mut().iter_mut().zip(o.data()) {
                    *kv = m * *kv + (1.0 - m) * ov;
                }
            }
        }
        Ok(())
    }
}
