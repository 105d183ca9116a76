//! Central-difference checks of every differentiable operation and of both
//! full loss graphs.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::encoder::{BoundParams, EncoderConfig, EncoderParams};
use crate::geometry::RestoredMask;
use crate::loss::{loss_weights, online_loss, ConceptPair, ConceptTargets, OnlineTargets};
use crate::rng::{self, Rng};
use crate::tensor::{grad_check, grad_check_piecewise, Graph, PoolRegion, Result, Tensor, Var};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Largest accepted `|analytic - fd| / max(1, |fd|)`.
pub const TOLERANCE: f64 = 1e-6;
/// Random instances per check.
pub const INSTANCES: usize = 20;

/// Worst error of one check over its instances.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub instances: usize,
    /// Draws discarded because a perturbation crossed a ReLU kink.
    pub rejected: usize,
    pub max_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error < TOLERANCE
    }
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// One random instance: the graph builder and its inputs.
pub struct Case {
    pub build: Build,
    pub inputs: Vec<Tensor>,
}

fn normal(r: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let d = (0..n).map(|_| StandardNormal.sample(r)).collect();
    Tensor::new(shape, d).expect("shape")
}

/// Values bounded away from zero, so ReLU-like kinks are not straddled.
fn away_from_zero(r: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let d = (0..n)
        .map(|_| {
            let m: f64 = r.random_range(0.1..2.0);
            if r.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, d).expect("shape")
}

fn unit_rows(r: &mut Rng, rows: usize, d: usize) -> Tensor {
    let mut t = normal(r, &[rows, d]);
    for row in t.data_mut().chunks_exact_mut(d) {
        let n = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
        row.iter_mut().for_each(|v| *v /= n);
    }
    t
}

/// Contracts a tensor output with fixed random weights into a scalar, so
/// every output coordinate carries a distinct upstream gradient.
fn contract(g: &mut Graph, out: Var, w: &Tensor) -> Result<Var> {
    let w = g.constant(w.clone());
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn case_unary(
    r: &mut Rng,
    in_shape: &[usize],
    out_shape: &[usize],
    kinks: bool,
    f: fn(&mut Graph, Var) -> Result<Var>,
) -> Case {
    let x = if kinks { away_from_zero(r, in_shape) } else { normal(r, in_shape) };
    let w = normal(r, out_shape);
    Case {
        build: Box::new(move |g, v| {
            let y = f(g, v[0])?;
            contract(g, y, &w)
        }),
        inputs: vec![x],
    }
}

/// A tiny encoder: two channels per stage, one group, small head.
pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        in_channels: 3,
        widths: [2, 2, 2, 2, 2],
        groups: 1,
        hidden: 4,
        dim: 4,
    }
}

/// Images made of 16x16 constant blocks, which keeps the number of
/// distinct pre-activations small.
fn tiny_image(r: &mut Rng, n: usize, size: usize) -> Tensor {
    let b = size / 16;
    let colours: Vec<f64> = (0..n * 3 * b * b).map(|_| r.random::<f64>()).collect();
    let mut d = Vec::with_capacity(n * 3 * size * size);
    for plane in 0..n * 3 {
        for y in 0..size {
            for x in 0..size {
                d.push(colours[(plane * b + y / 16) * b + x / 16]);
            }
        }
    }
    Tensor::new(&[n, 3, size, size], d).expect("shape")
}

/// Instance loss of two 64px queries with encoder parameters as inputs.
fn case_instance_loss(r: &mut Rng) -> Case {
    let cfg = tiny_encoder();
    let params = EncoderParams::init(cfg.clone(), r).expect("valid config");
    let x = tiny_image(r, 2, 64);
    let targets = OnlineTargets {
        instance_keys: unit_rows(r, 2, cfg.dim),
        instance_negatives: Some(unit_rows(r, 16, cfg.dim)),
        concept: None,
        tau: 0.2,
    };
    Case {
        build: Box::new(move |g, v| {
            let b = BoundParams::from_vars(cfg.clone(), v.to_vec())?;
            let xq = g.constant(x.clone());
            Ok(online_loss(g, &b, xq, &targets).map_err(loss_to_tensor)?.0)
        }),
        inputs: params.tensors,
    }
}

/// Concept loss with `K = 4` concepts over the 2x2 stage-5 grid of one
/// 64px query, mixed with the instance loss at `λ = 1`.
fn case_concept_loss(r: &mut Rng) -> Case {
    let cfg = tiny_encoder();
    let params = EncoderParams::init(cfg.clone(), r).expect("valid config");
    let x = tiny_image(r, 1, 64);
    let mut labels = vec![0u32, 1, 2, 3];
    for i in (1..4).rev() {
        labels.swap(i, r.random_range(0..=i));
    }
    let m = RestoredMask {
        featres: 2,
        labels: labels.clone(),
        present: vec![0, 1, 2, 3],
    };
    let pair = ConceptPair::new(m.clone(), m.clone()).expect("shared concepts");
    let regions: Vec<PoolRegion> = pair
        .shared
        .iter()
        .map(|&l| PoolRegion {
            sample: 0,
            cells: m.cells_of(l),
        })
        .collect();
    let (instance_weights, concept_weights) = loss_weights(&[Some(pair)], 1.0);
    let targets = OnlineTargets {
        instance_keys: unit_rows(r, 1, cfg.dim),
        instance_negatives: Some(unit_rows(r, 16, cfg.dim)),
        concept: Some(ConceptTargets {
            regions,
            keys: unit_rows(r, 4, cfg.dim),
            negatives: Some(unit_rows(r, 32, cfg.dim)),
            instance_weights,
            concept_weights,
        }),
        tau: 0.2,
    };
    Case {
        build: Box::new(move |g, v| {
            let b = BoundParams::from_vars(cfg.clone(), v.to_vec())?;
            let xq = g.constant(x.clone());
            Ok(online_loss(g, &b, xq, &targets).map_err(loss_to_tensor)?.0)
        }),
        inputs: params.tensors,
    }
}

fn loss_to_tensor(e: crate::loss::LossError) -> crate::tensor::TensorError {
    match e {
        crate::loss::LossError::Tensor(t) => t,
        _ => crate::tensor::TensorError::InvalidArgument("loss construction failed"),
    }
}

/// Names of all checks, in suite order.
pub const CHECKS: [&str; 20] = [
    "conv2d", "conv2d_strided", "group_norm", "relu", "avg_pool2", "gap", "masked_avg_pool", "linear", "l2_normalize", "stack",
    "reshape", "select_rows", "add", "mul", "scale", "sum", "mean", "info_nce", "softmax_cross_entropy", "instance_loss",
];

/// Every check including the concept loss graph.
pub fn all_checks() -> Vec<&'static str> {
    let mut v = CHECKS.to_vec();
    v.push("concept_loss");
    v
}

/// Draws one random instance of check `name`.
pub fn make_case(name: &str, r: &mut Rng) -> Option<Case> {
    let c = match name {
        "conv2d" => {
            let (x, w) = (normal(r, &[2, 3, 5, 5]), normal(r, &[4, 3, 3, 3]));
            let o = normal(r, &[2, 4, 5, 5]);
            Case {
                build: Box::new(move |g, v| {
                    let y = g.conv2d(v[0], v[1], 1, 1)?;
                    contract(g, y, &o)
                }),
                inputs: vec![x, w],
            }
        }
        "conv2d_strided" => {
            let (x, w) = (normal(r, &[1, 2, 7, 7]), normal(r, &[3, 2, 3, 3]));
            let o = normal(r, &[1, 3, 3, 3]);
            Case {
                build: Box::new(move |g, v| {
                    let y = g.conv2d(v[0], v[1], 2, 0)?;
                    contract(g, y, &o)
                }),
                inputs: vec![x, w],
            }
        }
        "group_norm" => {
            let (x, ga, be) = (normal(r, &[2, 4, 3, 3]), normal(r, &[4]), normal(r, &[4]));
            let o = normal(r, &[2, 4, 3, 3]);
            Case {
                build: Box::new(move |g, v| {
                    let y = g.group_norm(v[0], v[1], v[2], 2)?;
                    contract(g, y, &o)
                }),
                inputs: vec![x, ga, be],
            }
        }
        "relu" => case_unary(r, &[3, 7], &[3, 7], true, |g, x| Ok(g.relu(x))),
        "avg_pool2" => case_unary(r, &[2, 3, 4, 6], &[2, 3, 2, 3], false, |g, x| g.avg_pool2(x)),
        "gap" => case_unary(r, &[2, 3, 3, 4], &[2, 3], false, |g, x| g.gap(x)),
        "masked_avg_pool" => {
            let x = normal(r, &[2, 3, 2, 2]);
            let o = normal(r, &[3, 3]);
            Case {
                build: Box::new(move |g, v| {
                    let regions = vec![
                        PoolRegion { sample: 0, cells: vec![0, 3] },
                        PoolRegion { sample: 1, cells: vec![1] },
                        PoolRegion { sample: 1, cells: vec![0, 2, 3] },
                    ];
                    let y = g.masked_avg_pool(v[0], regions)?;
                    contract(g, y, &o)
                }),
                inputs: vec![x],
            }
        }
        "linear" => {
            let (x, w, b) = (normal(r, &[4, 5]), normal(r, &[3, 5]), normal(r, &[3]));
            let o = normal(r, &[4, 3]);
            Case {
                build: Box::new(move |g, v| {
                    let y = g.linear(v[0], v[1], v[2])?;
                    contract(g, y, &o)
                }),
                inputs: vec![x, w, b],
            }
        }
        "l2_normalize" => case_unary(r, &[3, 6], &[3, 6], true, |g, x| g.l2_normalize(x)),
        "stack" => {
            let (a, b) = (normal(r, &[2, 3]), normal(r, &[2, 3]));
            let o = normal(r, &[2, 2, 3]);
            Case {
                build: Box::new(move |g, v| {
                    let y = g.stack(&[v[0], v[1]])?;
                    contract(g, y, &o)
                }),
                inputs: vec![a, b],
            }
        }
        "reshape" => case_unary(r, &[2, 6], &[3, 4], false, |g, x| g.reshape(x, &[3, 4])),
        "select_rows" => case_unary(r, &[4, 3], &[5, 3], false, |g, x| g.select_rows(x, vec![2, 0, 2, 3, 1])),
        "add" | "mul" => {
            let (a, b) = (normal(r, &[3, 4]), normal(r, &[3, 4]));
            let o = normal(r, &[3, 4]);
            let is_add = name == "add";
            Case {
                build: Box::new(move |g, v| {
                    let y = if is_add { g.add(v[0], v[1])? } else { g.mul(v[0], v[1])? };
                    contract(g, y, &o)
                }),
                inputs: vec![a, b],
            }
        }
        "scale" => case_unary(r, &[3, 4], &[3, 4], false, |g, x| Ok(g.scale(x, -1.7))),
        "sum" => case_unary(r, &[3, 4], &[], false, |g, x| Ok(g.sum(x))),
        "mean" => case_unary(r, &[3, 4], &[], false, |g, x| Ok(g.mean(x))),
        "info_nce" => {
            let q = unit_rows(r, 3, 8);
            let p = unit_rows(r, 3, 8);
            let n = unit_rows(r, 16, 8);
            let o = normal(r, &[3]);
            Case {
                build: Box::new(move |g, v| {
                    let pc = g.constant(p.clone());
                    let nc = g.constant(n.clone());
                    let y = g.info_nce(v[0], pc, Some(nc), 0.2)?;
                    contract(g, y, &o)
                }),
                inputs: vec![q],
            }
        }
        "softmax_cross_entropy" => {
            let x = normal(r, &[4, 5]);
            let t: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
            Case {
                build: Box::new(move |g, v| g.softmax_cross_entropy(v[0], &t)),
                inputs: vec![x],
            }
        }
        "instance_loss" => case_instance_loss(r),
        "concept_loss" => case_concept_loss(r),
        _ => return None,
    };
    Some(c)
}

/// Whether check `name` runs through ReLUs on inputs it cannot keep away
/// from the kink.
fn piecewise(name: &str) -> bool {
    matches!(name, "instance_loss" | "concept_loss")
}

/// Draws per accepted instance before giving up.
pub const MAX_DRAWS_PER_INSTANCE: usize = 10;

/// Runs check `name` on `instances` random instances drawn from `seed`.
///
/// For the full loss graphs, a draw where some `±h` perturbation flips the
/// sign of a ReLU input is discarded and redrawn: there the central
/// difference straddles a kink and is not an estimate of the derivative.
/// Every accepted draw is checked on all coordinates.
pub fn run_check(name: &'static str, seed: u64, instances: usize) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    let (mut accepted, mut rejected) = (0usize, 0usize);
    let mut draw = 0u64;
    while accepted < instances {
        if draw as usize >= instances * MAX_DRAWS_PER_INSTANCE {
            return Err(crate::tensor::TensorError::InvalidArgument("gradient check: too many draws straddle a kink"));
        }
        let mut r = rng::stream(seed, rng::domain::EVAL, draw, fnv(name));
        draw += 1;
        let case = make_case(name, &mut r).ok_or(crate::tensor::TensorError::InvalidArgument("unknown check"))?;
        let err = if piecewise(name) {
            grad_check_piecewise(&case.build, &case.inputs, STEP)?
        } else {
            Some(grad_check(&case.build, &case.inputs, STEP)?)
        };
        match err {
            Some(e) => {
                worst = worst.max(e);
                accepted += 1;
            }
            None => rejected += 1,
        }
    }
    Ok(CheckResult {
        name,
        instances,
        rejected,
        max_error: worst,
    })
}

fn fnv(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// The full suite.
pub fn run_suite(seed: u64, instances: usize) -> Result<Vec<CheckResult>> {
    all_checks().into_iter().map(|n| run_check(n, seed, instances)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elementwise_checks_pass() {
        for name in ["add", "mul", "l2_normalize", "info_nce", "group_norm"] {
            let r = run_check(name, 3, 3).unwrap();
            assert!(r.passed(), "{name}: {}", r.max_error);
        }
    }

    #[test]
    fn unknown_check_is_an_error() {
        assert!(make_case("nope", &mut rng::stream(0, 0, 0, 0)).is_none());
    }
}
