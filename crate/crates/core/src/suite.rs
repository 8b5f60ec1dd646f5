//! The finite-difference gradient suite: every loss and every layer kind,
//! checked at seeded random points.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::arch::{ArchKind, Binding, ForwardCtx, LayerNode, Network, NetworkSpec};
use crate::data::{make_tmask, TMaskGeometry};
use crate::error::Result;
use crate::gradcheck::{finite_difference_check_with, Stencil, DEFAULT_EPS};
use crate::graph::{Graph, NormMode, Var};
use crate::losses::{self, LossConfig};
use crate::nn::{FeatShape, HaarPattern, InceptionCfg, LayerKind, BATCHNORM_EPS};
use crate::tensor::Tensor;

pub const LOSS_TOLERANCE: f64 = 1e-6;
pub const LAYER_TOLERANCE: f64 = 1e-5;
pub const DEFAULT_POINTS: usize = 20;
pub const DEFAULT_SEED: u64 = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckKind {
    Loss,
    Layer,
}

impl CheckKind {
    pub fn name(self) -> &'static str {
        match self {
            CheckKind::Loss => "loss",
            CheckKind::Layer => "layer",
        }
    }
}

/// Worst relative error of one check over all points.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub kind: CheckKind,
    pub points: usize,
    pub entries: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub checks: Vec<CheckOutcome>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckOutcome::passed)
    }

    pub fn failures(&self) -> Vec<&CheckOutcome> {
        self.checks.iter().filter(|c| !c.passed()).collect()
    }

    /// One aligned line per check.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            s.push_str(&format!(
                "{:<5} {:<28} {:<6} max_rel_error={:.3e} tol={:.0e} points={} entries={}\n",
                c.kind.name(),
                c.name,
                if c.passed() { "PASS" } else { "FAIL" },
                c.max_rel_error,
                c.tolerance,
                c.points,
                c.entries
            ));
        }
        s
    }
}

type Point = Box<dyn Fn(&mut ChaCha8Rng) -> Result<(usize, f64)> + Send + Sync>;

struct Check {
    name: String,
    kind: CheckKind,
    run: Point,
}

/// Values with random sign and magnitude in `[0.05, 1]`, away from ReLU kinks.
fn signed(shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let mags = Tensor::uniform(shape, 0.05, 1.0, rng)?;
    let signs: Vec<f64> = (0..mags.len()).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    let data = mags.data().iter().zip(signs).map(|(m, s)| m * s).collect();
    Tensor::new(shape, data)
}

/// Losses are smooth away from their hinges, so they use the fourth-order
/// stencil with a step large enough to avoid cancellation in `f(x±h)`;
/// layers with internal ReLUs and pools keep the small two-point step so
/// perturbations never cross a kink.
fn fd<F>(kind: CheckKind, f: F, params: &[Tensor]) -> Result<(usize, f64)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let r = match kind {
        CheckKind::Loss => finite_difference_check_with(f, params, 1e-3, Stencil::Central4)?,
        CheckKind::Layer => finite_difference_check_with(f, params, DEFAULT_EPS, Stencil::Central2)?,
    };
    Ok((r.entries, r.max_rel_error))
}

const CLASSES: usize = 3;
const PER_CLASS: usize = 3;
const DIM: usize = 6;

fn labels() -> Vec<usize> {
    (0..CLASSES * PER_CLASS).map(|i| i / PER_CLASS).collect()
}

fn triplets(rng: &mut ChaCha8Rng, count: usize) -> Vec<(usize, usize, usize)> {
    let labels = labels();
    let n = labels.len();
    let mut all = Vec::new();
    for a in 0..n {
        for p in 0..n {
            for q in 0..n {
                if a != p && labels[a] == labels[p] && labels[a] != labels[q] {
                    all.push((a, p, q));
                }
            }
        }
    }
    all.shuffle(rng);
    all.truncate(count);
    all
}

/// Margins large enough that every hinge is comfortably active.
fn loss_cfg() -> LossConfig {
    LossConfig {
        alpha_triplet: 1.0,
        beta_mean: 2.0,
        gamma_std: 1.2,
        ..LossConfig::default()
    }
}

fn embedding_loss(name: &str, which: fn(&mut Graph, Var, &[usize], &[(usize, usize, usize)], &LossConfig) -> Result<Var>) -> Check {
    Check {
        name: name.to_string(),
        kind: CheckKind::Loss,
        run: Box::new(move |rng| {
            let x = Tensor::randn(&[CLASSES * PER_CLASS, DIM], 1.0, rng)?;
            let t = triplets(rng, 8);
            let labels = labels();
            let cfg = loss_cfg();
            fd(
                CheckKind::Loss,
                |g, p| {
                    let e = g.l2_normalize(p[0])?;
                    which(g, e, &labels, &t, &cfg)
                },
                &[x],
            )
        }),
    }
}

fn loss_checks() -> Vec<Check> {
    vec![
        embedding_loss("triplet", |g, e, _, t, c| losses::triplet_term(g, e, t, c)),
        embedding_loss("mean_distance", |g, e, l, _, c| losses::mean_distance_term(g, e, l, c)),
        embedding_loss("std_dev", |g, e, l, _, c| losses::std_dev_term(g, e, l, c)),
        embedding_loss("haarnet_composite", losses::haarnet_term),
        embedding_loss("mdr_tl", losses::mdr_tl_term),
        Check {
            name: "ccm_triplet".into(),
            kind: CheckKind::Loss,
            run: Box::new(|rng| {
                let s: Vec<Tensor> = (0..3)
                    .map(|_| Tensor::uniform(&[4], 0.05, 0.95, rng))
                    .collect::<Result<_>>()?;
                fd(CheckKind::Loss, |g, p| losses::ccm_triplet_term(g, p[0], p[1], p[2]), &s)
            }),
        },
        Check {
            name: "tmask_mse".into(),
            kind: CheckKind::Loss,
            run: Box::new(|rng| {
                let mask = make_tmask(8, 6, &TMaskGeometry::default(), &LossConfig::default())?;
                let recon = Tensor::randn(&[2, 8, 6], 1.0, rng)?;
                let target = Tensor::randn(&[2, 8, 6], 1.0, rng)?;
                fd(CheckKind::Loss, |g, p| losses::tmask_mse_term(g, p[0], p[1], &mask), &[recon, target])
            }),
        },
        Check {
            name: "softmax_cross_entropy".into(),
            kind: CheckKind::Loss,
            run: Box::new(|rng| {
                let logits = Tensor::randn(&[4, 5], 1.0, rng)?;
                let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
                fd(CheckKind::Loss, |g, p| g.softmax_cross_entropy(p[0], &labels), &[logits])
            }),
        },
    ]
}

/// A layer under test: a small spec whose `out` node is projected onto a
/// random tensor; inputs and parameters are all differentiated.
struct LayerCase {
    inputs: Vec<(&'static str, FeatShape)>,
    nodes: Vec<(&'static str, LayerKind, Vec<&'static str>)>,
    batch: usize,
    mode: NormMode,
}

fn layer_check(name: &str, case: LayerCase) -> Check {
    Check {
        name: name.to_string(),
        kind: CheckKind::Layer,
        run: Box::new(move |rng| {
            let mut nodes: Vec<LayerNode> = case
                .inputs
                .iter()
                .map(|(n, s)| LayerNode {
                    name: n.to_string(),
                    kind: LayerKind::Input(*s),
                    inputs: vec![],
                    group: None,
                })
                .collect();
            for (n, kind, ins) in &case.nodes {
                nodes.push(LayerNode {
                    name: n.to_string(),
                    kind: kind.clone(),
                    inputs: ins.iter().map(|s| s.to_string()).collect(),
                    group: None,
                });
            }
            let out = case.nodes.last().expect("at least one layer").0;
            let spec = NetworkSpec {
                name: "gradcheck".into(),
                arch: ArchKind::CfrClassifier,
                nodes,
                outputs: Default::default(),
                shared_prefix: 0,
                embedding_dim: 1,
            };
            let mut net = Network::new(spec, rng.random())?;
            for t in net.params.values_mut() {
                *t = signed(t.shape(), rng)?;
            }
            for rs in net.state.bn.values_mut() {
                rs.mean = (0..rs.mean.len()).map(|_| rng.random_range(-0.5..0.5)).collect();
                rs.var = (0..rs.var.len()).map(|_| rng.random_range(0.5..1.5)).collect();
            }
            let names: Vec<String> = net.params.keys().cloned().collect();
            let mut values: Vec<Tensor> = net.params.values().cloned().collect();
            for (_, s) in &case.inputs {
                values.push(signed(&s.batched(case.batch), rng)?);
            }
            let out_shape = net.output_shape(out)?.batched(case.batch);
            let proj = Tensor::randn(&out_shape, 1.0, rng)?;
            let dropout_seed: u64 = rng.random();
            fd(
                CheckKind::Layer,
                |g, p| {
                    let bind = Binding {
                        vars: names.iter().cloned().zip(p.iter().copied()).collect(),
                    };
                    let ins: Vec<(&str, Var)> = case
                        .inputs
                        .iter()
                        .zip(&p[names.len()..])
                        .map(|((n, _), v)| (*n, *v))
                        .collect();
                    let mut ctx = match case.mode {
                        NormMode::Train => ForwardCtx::train(dropout_seed),
                        NormMode::Eval => ForwardCtx::eval(),
                    };
                    let y = net.forward(g, &bind, &ins, &[out], &mut ctx)?;
                    let y = g.mul_const(y[0], &proj)?;
                    Ok(g.sum(y))
                },
                &values,
            )
        }),
    }
}

fn map(c: usize, h: usize, w: usize) -> FeatShape {
    FeatShape::map(c, h, w)
}

fn single(input: FeatShape, kind: LayerKind, batch: usize, mode: NormMode) -> LayerCase {
    LayerCase {
        inputs: vec![("x", input)],
        nodes: vec![("y", kind, vec!["x"])],
        batch,
        mode,
    }
}

fn layer_checks() -> Vec<Check> {
    let conv = |out, k, s, p| LayerKind::Conv2d {
        out_channels: out,
        kernel: k,
        stride: s,
        pad: p,
    };
    let deconv = |out, k, s, p| LayerKind::Deconv2d {
        out_channels: out,
        kernel: k,
        stride: s,
        pad: p,
    };
    let e = NormMode::Eval;
    let mut checks = vec![
        layer_check("conv2d", single(map(2, 5, 5), conv(3, 3, 1, 1), 2, e)),
        layer_check("conv2d_strided", single(map(2, 7, 7), conv(2, 3, 2, 0), 1, e)),
        layer_check("deconv2d", single(map(2, 4, 4), deconv(3, 3, 1, 1), 1, e)),
        layer_check("deconv2d_strided", single(map(2, 3, 3), deconv(2, 3, 2, 0), 1, e)),
        layer_check(
            "maxpool2d",
            single(map(2, 4, 4), LayerKind::MaxPool2d { window: 2, stride: 2 }, 1, e),
        ),
        layer_check(
            "maxunpool2d",
            LayerCase {
                inputs: vec![("x", map(2, 4, 4))],
                nodes: vec![
                    ("pool", LayerKind::MaxPool2d { window: 2, stride: 2 }, vec!["x"]),
                    ("y", LayerKind::MaxUnpool2d { pool: "pool".into() }, vec!["pool"]),
                ],
                batch: 1,
                mode: e,
            },
        ),
        layer_check(
            "batchnorm2d_train",
            single(map(2, 3, 3), LayerKind::BatchNorm2d { eps: BATCHNORM_EPS }, 3, NormMode::Train),
        ),
        layer_check(
            "batchnorm2d_eval",
            single(map(2, 3, 3), LayerKind::BatchNorm2d { eps: BATCHNORM_EPS }, 2, e),
        ),
        layer_check(
            "dropout",
            single(map(2, 3, 3), LayerKind::Dropout { p: 0.3 }, 2, NormMode::Train),
        ),
        layer_check(
            "fully_connected",
            single(FeatShape::Flat(5), LayerKind::FullyConnected { out: 4 }, 3, e),
        ),
        layer_check("relu", single(map(2, 3, 3), LayerKind::Relu, 2, e)),
        layer_check("l2norm", single(FeatShape::Flat(6), LayerKind::L2Norm, 3, e)),
        layer_check("softmax", single(FeatShape::Flat(5), LayerKind::Softmax, 3, e)),
        layer_check("flatten", single(map(2, 3, 2), LayerKind::Flatten, 2, e)),
        layer_check("reshape", single(FeatShape::Flat(12), LayerKind::Reshape(map(3, 2, 2)), 2, e)),
        layer_check(
            "crop",
            single(
                map(2, 5, 4),
                LayerKind::Crop {
                    top: 1,
                    left: 1,
                    rows: 3,
                    cols: 2,
                },
                2,
                e,
            ),
        ),
        layer_check(
            "inception_lite",
            single(map(3, 5, 5), LayerKind::InceptionLite(InceptionCfg { paths: [2, 2, 2, 2] }), 1, e),
        ),
        layer_check(
            "concat",
            LayerCase {
                inputs: vec![("a", FeatShape::Flat(3)), ("b", FeatShape::Flat(4))],
                nodes: vec![("y", LayerKind::Concat, vec!["a", "b"])],
                batch: 2,
                mode: e,
            },
        ),
        layer_check(
            "hadamard",
            LayerCase {
                inputs: vec![("a", map(2, 3, 2)), ("b", map(2, 3, 2))],
                nodes: vec![("y", LayerKind::Hadamard, vec!["a", "b"])],
                batch: 2,
                mode: e,
            },
        ),
    ];
    for pattern in [
        HaarPattern::TwoRectHorizontal,
        HaarPattern::TwoRectVertical,
        HaarPattern::FourRectChecker,
    ] {
        let ins: Vec<(&'static str, FeatShape)> = ["m1", "m2", "m3", "m4"][..pattern.arity()]
            .iter()
            .map(|n| (*n, map(2, 3, 3)))
            .collect();
        let names = ins.iter().map(|(n, _)| *n).collect();
        checks.push(layer_check(
            &format!("subtract_{}", pattern.name()),
            LayerCase {
                inputs: ins,
                nodes: vec![("y", LayerKind::SubtractMerge { pattern }, names)],
                batch: 1,
                mode: e,
            },
        ));
    }
    checks
}

/// Names of every check in suite order.
pub fn check_names() -> Vec<(CheckKind, String)> {
    loss_checks()
        .into_iter()
        .chain(layer_checks())
        .map(|c| (c.kind, c.name))
        .collect()
}

/// Runs every check at `points` random points derived from `seed`. Checks
/// run in parallel on the current rayon pool; results keep suite order.
pub fn run_gradient_suite(seed: u64, points: usize) -> Result<SuiteReport> {
    let checks: Vec<Check> = loss_checks().into_iter().chain(layer_checks()).collect();
    let outcomes = checks
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let mut worst = 0.0f64;
            let mut entries = 0;
            for point in 0..points {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((i as u64) << 32) ^ point as u64);
                let (n, err) = (c.run)(&mut rng)?;
                entries += n;
                worst = worst.max(err);
            }
            Ok(CheckOutcome {
                name: c.name.clone(),
                kind: c.kind,
                points,
                entries,
                max_rel_error: worst,
                tolerance: match c.kind {
                    CheckKind::Loss => LOSS_TOLERANCE,
                    CheckKind::Layer => LAYER_TOLERANCE,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SuiteReport { checks: outcomes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_covers_every_layer_kind() {
        let names: Vec<String> = check_names().into_iter().map(|(_, n)| n).collect();
        for kind in [
            "conv2d",
            "deconv2d",
            "maxpool2d",
            "maxunpool2d",
            "batchnorm2d",
            "dropout",
            "fully_connected",
            "relu",
            "l2norm",
            "softmax",
            "concat",
            "subtract",
            "inception_lite",
            "flatten",
            "reshape",
            "crop",
            "hadamard",
        ] {
            assert!(names.iter().any(|n| n.starts_with(kind)), "{kind}");
        }
    }

    #[test]
    fn short_suite_passes() {
        let report = run_gradient_suite(1, 2).unwrap();
        assert!(report.passed(), "{}", report.to_text());
    }
}

