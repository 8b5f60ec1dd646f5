//! Layer descriptors, parameter layout, and composite layers built on the tape.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, NormMode, Var};
use crate::kernels::ConvGeom;
use crate::tensor::Tensor;

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.9;
pub const DEFAULT_DROPOUT: f64 = 0.3;

/// Per-sample feature shape flowing between layers (batch axis implicit).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FeatShape {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl FeatShape {
    pub fn map(c: usize, h: usize, w: usize) -> Self {
        FeatShape::Map { c, h, w }
    }

    pub fn numel(&self) -> usize {
        match *self {
            FeatShape::Map { c, h, w } => c * h * w,
            FeatShape::Flat(n) => n,
        }
    }

    /// Tensor shape for a batch of `b` samples.
    pub fn batched(&self, b: usize) -> Vec<usize> {
        match *self {
            FeatShape::Map { c, h, w } => vec![b, c, h, w],
            FeatShape::Flat(n) => vec![b, n],
        }
    }

    fn expect_map(&self, layer: &str) -> Result<(usize, usize, usize)> {
        match *self {
            FeatShape::Map { c, h, w } => Ok((c, h, w)),
            FeatShape::Flat(_) => Err(Error::Spec(format!("{layer} needs a spatial map input, got {self}"))),
        }
    }
}

impl std::fmt::Display for FeatShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FeatShape::Map { c, h, w } => write!(f, "{c}x{h}x{w}"),
            FeatShape::Flat(n) => write!(f, "{n}"),
        }
    }
}

/// Haar-like rectangle layouts. White regions add, black regions subtract.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HaarPattern {
    /// White left half, black right half.
    TwoRectHorizontal,
    /// White top half, black bottom half.
    TwoRectVertical,
    /// White top-left and bottom-right, black top-right and bottom-left.
    FourRectChecker,
}

impl HaarPattern {
    pub fn arity(self) -> usize {
        match self {
            HaarPattern::TwoRectHorizontal | HaarPattern::TwoRectVertical => 2,
            HaarPattern::FourRectChecker => 4,
        }
    }

    /// Signs applied to the sub-branch maps in order `[w1, b1, (w2, b2)]`.
    pub fn signs(self) -> &'static [f64] {
        match self {
            HaarPattern::FourRectChecker => &[1.0, -1.0, 1.0, -1.0],
            _ => &[1.0, -1.0],
        }
    }

    /// Regions `(top, left, rows, cols)` of an `h × w` map feeding each
    /// sub-branch, in the same order as [`signs`](Self::signs).
    pub fn regions(self, h: usize, w: usize) -> Result<Vec<(usize, usize, usize, usize)>> {
        let need_h = matches!(self, HaarPattern::TwoRectVertical | HaarPattern::FourRectChecker);
        let need_w = matches!(self, HaarPattern::TwoRectHorizontal | HaarPattern::FourRectChecker);
        if (need_h && (h < 2 || !h.is_multiple_of(2))) || (need_w && (w < 2 || !w.is_multiple_of(2))) {
            return Err(Error::Geometry(format!("{self:?} split needs even extents, got {h}x{w}")));
        }
        let (hh, hw) = (h / 2, w / 2);
        Ok(match self {
            HaarPattern::TwoRectHorizontal => vec![(0, 0, h, hw), (0, hw, h, hw)],
            HaarPattern::TwoRectVertical => vec![(0, 0, hh, w), (hh, 0, hh, w)],
            HaarPattern::FourRectChecker => vec![(0, 0, hh, hw), (0, hw, hh, hw), (hh, hw, hh, hw), (hh, 0, hh, hw)],
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            HaarPattern::TwoRectHorizontal => "two_rect_horizontal",
            HaarPattern::TwoRectVertical => "two_rect_vertical",
            HaarPattern::FourRectChecker => "four_rect_checker",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            HaarPattern::TwoRectHorizontal,
            HaarPattern::TwoRectVertical,
            HaarPattern::FourRectChecker,
        ]
        .into_iter()
        .find(|p| p.name() == s)
    }
}

/// Output channels of the four inception-lite paths:
/// 1×1, 3×3 (pad 1), 5×5 (pad 2), 3×3 max-pool → 1×1 projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct InceptionCfg {
    pub paths: [usize; 4],
}

impl InceptionCfg {
    /// Splits a channel budget evenly over the four paths.
    pub fn even(total: usize) -> Result<Self> {
        if total == 0 || !total.is_multiple_of(4) {
            return Err(Error::config(
                "inception_lite.channels",
                format!("channel budget {total} is not divisible across 4 paths"),
            ));
        }
        Ok(Self { paths: [total / 4; 4] })
    }

    pub fn out_channels(&self) -> usize {
        self.paths.iter().sum()
    }

    pub(crate) const PATH_NAMES: [&'static str; 4] = ["b1", "b3", "b5", "pp"];
    const KERNELS: [usize; 4] = [1, 3, 5, 1];
}

/// A layer descriptor with its hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Input(FeatShape),
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    MaxPool2d {
        window: usize,
        stride: usize,
    },
    /// Scatters back through the argmax indices of the named pooling layer.
    MaxUnpool2d {
        pool: String,
    },
    Deconv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    BatchNorm2d {
        eps: f64,
    },
    Dropout {
        p: f64,
    },
    FullyConnected {
        out: usize,
    },
    Relu,
    L2Norm,
    Softmax,
    /// Channel concatenation of equal-extent maps, or of flat features.
    Concat,
    SubtractMerge {
        pattern: HaarPattern,
    },
    InceptionLite(InceptionCfg),
    Flatten,
    Reshape(FeatShape),
    Crop {
        top: usize,
        left: usize,
        rows: usize,
        cols: usize,
    },
    /// Element-wise product of two equally shaped inputs.
    Hadamard,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input(_) => "input",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::MaxPool2d { .. } => "maxpool2d",
            LayerKind::MaxUnpool2d { .. } => "maxunpool2d",
            LayerKind::Deconv2d { .. } => "deconv2d",
            LayerKind::BatchNorm2d { .. } => "batchnorm2d",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::FullyConnected { .. } => "fully_connected",
            LayerKind::Relu => "relu",
            LayerKind::L2Norm => "l2norm",
            LayerKind::Softmax => "softmax",
            LayerKind::Concat => "concat",
            LayerKind::SubtractMerge { .. } => "subtract_merge",
            LayerKind::InceptionLite(_) => "inception_lite",
            LayerKind::Flatten => "flatten",
            LayerKind::Reshape(_) => "reshape",
            LayerKind::Crop { .. } => "crop",
            LayerKind::Hadamard => "hadamard",
        }
    }

    /// Number of inputs the layer consumes; `None` for variadic concat.
    pub fn arity(&self) -> Option<usize> {
        match self {
            LayerKind::Input(_) => Some(0),
            LayerKind::Concat => None,
            LayerKind::SubtractMerge { pattern } => Some(pattern.arity()),
            LayerKind::Hadamard => Some(2),
            _ => Some(1),
        }
    }

    /// Counted by the complexity accountant: parameterized layers and merges.
    pub fn counts_as_layer(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv2d { .. }
                | LayerKind::Deconv2d { .. }
                | LayerKind::FullyConnected { .. }
                | LayerKind::InceptionLite(_)
                | LayerKind::Concat
                | LayerKind::SubtractMerge { .. }
                | LayerKind::Hadamard
        )
    }

    /// Validates hyperparameters independent of input shapes.
    pub fn validate(&self) -> Result<()> {
        let bad = |r: String| Err(Error::Spec(format!("{}: {r}", self.name())));
        match *self {
            LayerKind::Conv2d {
                out_channels,
                kernel,
                stride,
                ..
            }
            | LayerKind::Deconv2d {
                out_channels,
                kernel,
                stride,
                ..
            } => {
                if out_channels == 0 || kernel == 0 || stride == 0 {
                    return bad("channels, kernel and stride must be positive".into());
                }
            }
            LayerKind::MaxPool2d { window, stride } => {
                if window == 0 || stride == 0 {
                    return bad("window and stride must be positive".into());
                }
            }
            LayerKind::BatchNorm2d { eps } => {
                if !(eps > 0.0) {
                    return bad(format!("epsilon must be positive, got {eps}"));
                }
            }
            LayerKind::Dropout { p } => {
                if !(0.0..1.0).contains(&p) {
                    return bad(format!("drop probability must lie in [0, 1), got {p}"));
                }
            }
            LayerKind::FullyConnected { out } => {
                if out == 0 {
                    return bad("output width must be positive".into());
                }
            }
            LayerKind::InceptionLite(cfg)
                if cfg.paths.contains(&0) => {
                    return bad("every inception path needs at least one channel".into());
                }
            _ => {}
        }
        Ok(())
    }

    /// Infers the output shape from input shapes. `pooled` supplies the input
    /// shape of the paired pooling layer for unpooling.
    pub fn output_shape(&self, inputs: &[FeatShape], pooled: Option<FeatShape>) -> Result<FeatShape> {
        self.validate()?;
        if let Some(n) = self.arity() {
            if inputs.len() != n {
                return Err(Error::Arity {
                    op: self.name(),
                    expected: n,
                    got: inputs.len(),
                });
            }
        } else if inputs.is_empty() {
            return Err(Error::Empty { op: "concat" });
        }
        let name = self.name();
        let geometry = |what: String| Error::Geometry(format!("{name}: {what}"));
        Ok(match self {
            LayerKind::Input(s) => *s,
            LayerKind::Conv2d {
                out_channels,
                kernel,
                stride,
                pad,
            } => {
                let (_, h, w) = inputs[0].expect_map(name)?;
                let g = ConvGeom::new(*kernel, *stride, *pad);
                match (g.conv_out(h), g.conv_out(w)) {
                    (Some(oh), Some(ow)) => FeatShape::map(*out_channels, oh, ow),
                    _ => return Err(geometry(format!("{h}x{w} input has no integral output for {g:?}"))),
                }
            }
            LayerKind::Deconv2d {
                out_channels,
                kernel,
                stride,
                pad,
            } => {
                let (_, h, w) = inputs[0].expect_map(name)?;
                let g = ConvGeom::new(*kernel, *stride, *pad);
                match (g.transposed_out(h), g.transposed_out(w)) {
                    (Some(oh), Some(ow)) => FeatShape::map(*out_channels, oh, ow),
                    _ => return Err(geometry(format!("{h}x{w} input invalid for {g:?}"))),
                }
            }
            LayerKind::MaxPool2d { window, stride } => {
                let (c, h, w) = inputs[0].expect_map(name)?;
                let g = ConvGeom::new(*window, *stride, 0);
                match (g.pool_out(h), g.pool_out(w)) {
                    (Some(oh), Some(ow)) => FeatShape::map(c, oh, ow),
                    _ => return Err(geometry(format!("window {window} exceeds {h}x{w}"))),
                }
            }
            LayerKind::MaxUnpool2d { pool } => {
                let target = pooled.ok_or_else(|| geometry(format!("paired pool `{pool}` unknown")))?;
                let (c, _, _) = inputs[0].expect_map(name)?;
                let (tc, _, _) = target.expect_map(name)?;
                if c != tc {
                    return Err(geometry(format!("channel count {c} does not match pooled input {target}")));
                }
                target
            }
            LayerKind::BatchNorm2d { .. } => {
                inputs[0].expect_map(name)?;
                inputs[0]
            }
            LayerKind::Dropout { .. } | LayerKind::Relu => inputs[0],
            LayerKind::L2Norm | LayerKind::Softmax => match inputs[0] {
                FeatShape::Flat(n) if n >= 1 => inputs[0],
                s => return Err(Error::Spec(format!("{name} needs flat input, got {s}"))),
            },
            LayerKind::FullyConnected { out } => match inputs[0] {
                FeatShape::Flat(_) => FeatShape::Flat(*out),
                s => return Err(Error::Spec(format!("{name} needs flat input, got {s}; insert flatten"))),
            },
            LayerKind::Flatten => FeatShape::Flat(inputs[0].numel()),
            LayerKind::Reshape(to) => {
                if to.numel() != inputs[0].numel() {
                    return Err(geometry(format!("cannot reshape {} into {to}", inputs[0])));
                }
                *to
            }
            LayerKind::Crop { top, left, rows, cols } => {
                let (c, h, w) = inputs[0].expect_map(name)?;
                if *rows == 0 || *cols == 0 || top + rows > h || left + cols > w {
                    return Err(geometry(format!("{rows}x{cols} at ({top},{left}) exceeds {h}x{w}")));
                }
                FeatShape::map(c, *rows, *cols)
            }
            LayerKind::Concat => match inputs[0] {
                FeatShape::Flat(_) => {
                    let mut n = 0;
                    for s in inputs {
                        match s {
                            FeatShape::Flat(k) => n += k,
                            _ => return Err(Error::Spec("concat mixes flat and map inputs".into())),
                        }
                    }
                    FeatShape::Flat(n)
                }
                FeatShape::Map { h, w, .. } => {
                    let mut c = 0;
                    for s in inputs {
                        match *s {
                            FeatShape::Map { c: ci, h: hi, w: wi } if hi == h && wi == w => c += ci,
                            _ => return Err(geometry(format!("concat dimension mismatch {} vs {s}", inputs[0]))),
                        }
                    }
                    FeatShape::map(c, h, w)
                }
            },
            LayerKind::SubtractMerge { .. } | LayerKind::Hadamard => {
                if inputs.iter().any(|s| *s != inputs[0]) {
                    return Err(geometry(format!("inputs must share one shape, got {inputs:?}")));
                }
                inputs[0]
            }
            LayerKind::InceptionLite(cfg) => {
                let (_, h, w) = inputs[0].expect_map(name)?;
                FeatShape::map(cfg.out_channels(), h, w)
            }
        })
    }

    /// Parameter tensors as `(suffix, shape)` for the given input shape.
    pub fn param_shapes(&self, input: Option<FeatShape>) -> Vec<(String, Vec<usize>)> {
        let in_c = match input {
            Some(FeatShape::Map { c, .. }) => c,
            Some(FeatShape::Flat(n)) => n,
            None => 0,
        };
        match *self {
            LayerKind::Conv2d {
                out_channels, kernel, ..
            } => vec![
                ("weight".into(), vec![out_channels, in_c, kernel, kernel]),
                ("bias".into(), vec![out_channels]),
            ],
            LayerKind::Deconv2d {
                out_channels, kernel, ..
            } => vec![
                ("weight".into(), vec![in_c, out_channels, kernel, kernel]),
                ("bias".into(), vec![out_channels]),
            ],
            LayerKind::BatchNorm2d { .. } => vec![("gamma".into(), vec![in_c]), ("beta".into(), vec![in_c])],
            LayerKind::FullyConnected { out } => {
                vec![("weight".into(), vec![out, in_c]), ("bias".into(), vec![out])]
            }
            LayerKind::InceptionLite(cfg) => {
                let mut v = Vec::new();
                for ((name, &k), &c) in InceptionCfg::PATH_NAMES.iter().zip(&InceptionCfg::KERNELS).zip(&cfg.paths) {
                    v.push((format!("{name}.weight"), vec![c, in_c, k, k]));
                    v.push((format!("{name}.bias"), vec![c]));
                }
                v
            }
            _ => Vec::new(),
        }
    }

    /// Multiply-accumulates for one sample.
    pub fn macs(&self, inputs: &[FeatShape], output: FeatShape) -> u64 {
        let out_plane = |s: FeatShape| match s {
            FeatShape::Map { h, w, .. } => (h * w) as u64,
            FeatShape::Flat(_) => 1,
        };
        let in_c = match inputs.first() {
            Some(FeatShape::Map { c, .. }) => *c as u64,
            Some(FeatShape::Flat(n)) => *n as u64,
            None => 0,
        };
        match self {
            LayerKind::Conv2d {
                out_channels, kernel, ..
            } => *out_channels as u64 * out_plane(output) * in_c * (*kernel * *kernel) as u64,
            LayerKind::Deconv2d {
                out_channels, kernel, ..
            } => in_c * out_plane(inputs[0]) * *out_channels as u64 * (*kernel * *kernel) as u64,
            LayerKind::FullyConnected { out } => in_c * *out as u64,
            LayerKind::InceptionLite(cfg) => cfg
                .paths
                .iter()
                .zip(InceptionCfg::KERNELS)
                .map(|(&c, k)| c as u64 * out_plane(output) * in_c * (k * k) as u64)
                .sum(),
            LayerKind::Hadamard => output.numel() as u64,
            _ => 0,
        }
    }
}

/// A layer descriptor bound to its parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub kind: LayerKind,
    pub tensors: BTreeMap<String, Tensor>,
}

impl LayerParams {
    /// Allocates parameters for `kind` on the given input shape. Weights use
    /// He-normal initialization, biases and batch-norm shifts start at zero,
    /// batch-norm scales at one.
    pub fn init<R: Rng + ?Sized>(kind: LayerKind, input: FeatShape, rng: &mut R) -> Result<Self> {
        kind.output_shape(&[input], None).or_else(|e| match kind {
            LayerKind::MaxUnpool2d { .. } => Ok(input),
            _ => Err(e),
        })?;
        let mut tensors = BTreeMap::new();
        for (suffix, shape) in kind.param_shapes(Some(input)) {
            tensors.insert(suffix.clone(), init_tensor(&suffix, &shape, rng)?);
        }
        Ok(Self { kind, tensors })
    }

    /// Checks that every tensor has the shape implied by `kind` and `input`.
    pub fn validate(&self, input: FeatShape) -> Result<()> {
        self.kind.validate()?;
        let expected = self.kind.param_shapes(Some(input));
        if expected.len() != self.tensors.len() {
            return Err(Error::Spec(format!(
                "{} expects {} parameter tensors, found {}",
                self.kind.name(),
                expected.len(),
                self.tensors.len()
            )));
        }
        for (suffix, shape) in expected {
            let t = self
                .tensors
                .get(&suffix)
                .ok_or_else(|| Error::Spec(format!("{} is missing `{suffix}`", self.kind.name())))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("layer_params", t.shape(), &shape));
            }
        }
        Ok(())
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }
}

pub(crate) fn init_tensor<R: Rng + ?Sized>(suffix: &str, shape: &[usize], rng: &mut R) -> Result<Tensor> {
    if suffix.ends_with("weight") {
        let fan_in: usize = if shape.len() == 4 {
            // conv weights are [out, in, k, k]; deconv weights [in, out, k, k]
            shape[1..].iter().product()
        } else {
            shape[1]
        };
        Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
    } else if suffix.ends_with("gamma") {
        Tensor::ones(shape)
    } else {
        Tensor::zeros(shape)
    }
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// `running ← momentum·running + (1 − momentum)·batch`.
    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
    }
}

/// Batch norm that reads running statistics in eval mode and folds batch
/// statistics into them in train mode.
pub fn batchnorm2d(
    g: &mut Graph,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
    mode: NormMode,
    running: &mut RunningStats,
) -> Result<Var> {
    let (y, stats) = g.batchnorm2d(x, gamma, beta, eps, mode, Some((&running.mean, &running.var)))?;
    if let Some(stats) = stats {
        running.update(&stats, BATCHNORM_MOMENTUM);
    }
    Ok(y)
}

/// Inverted dropout: in train mode each entry is zeroed with probability `p`
/// and survivors are scaled by `1/(1-p)`. Eval mode is the identity.
pub fn dropout<R: Rng + ?Sized>(g: &mut Graph, x: Var, p: f64, mode: NormMode, rng: &mut R) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Domain {
            op: "dropout",
            reason: format!("drop probability must lie in [0, 1), got {p}"),
        });
    }
    if mode == NormMode::Eval || p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    g.mul_const(x, &Tensor::new(&shape, mask)?)
}

/// Signed sum of sub-branch maps: `w1 − b1` or `w1 − b1 + w2 − b2`.
pub fn haar_split_merge(g: &mut Graph, maps: &[Var], pattern: HaarPattern) -> Result<Var> {
    if maps.len() != pattern.arity() {
        return Err(Error::Arity {
            op: "haar_split_merge",
            expected: pattern.arity(),
            got: maps.len(),
        });
    }
    g.lin_comb(maps, pattern.signs())
}

/// Tape variables of one inception-lite block, in path order.
#[derive(Clone, Copy, Debug)]
pub struct InceptionVars {
    pub weights: [Var; 4],
    pub biases: [Var; 4],
}

/// Channel concatenation of the four inception paths, each followed by ReLU.
pub fn inception_lite(g: &mut Graph, x: Var, p: &InceptionVars) -> Result<Var> {
    let a = g.conv2d(x, p.weights[0], Some(p.biases[0]), ConvGeom::new(1, 1, 0))?;
    let a = g.relu(a);
    let b = g.conv2d(x, p.weights[1], Some(p.biases[1]), ConvGeom::new(3, 1, 1))?;
    let b = g.relu(b);
    let c = g.conv2d(x, p.weights[2], Some(p.biases[2]), ConvGeom::new(5, 1, 2))?;
    let c = g.relu(c);
    let (pooled, _) = g.maxpool2d(x, ConvGeom::new(3, 1, 1))?;
    let d = g.conv2d(pooled, p.weights[3], Some(p.biases[3]), ConvGeom::new(1, 1, 0))?;
    let d = g.relu(d);
    g.concat(&[a, b, c, d])
}

/// `W·x + b` for a rank-1 input or each row of a `[batch, in]` input.
pub fn fully_connected(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    g.linear(x, w, Some(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference_check, DEFAULT_EPS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Six-loop direct convolution.
    fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let [n, ci, h, wd] = x.shape()[..] else { panic!() };
        let [co, _, k, _] = w.shape()[..] else { panic!() };
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; n * co * oh * ow];
        for bi in 0..n {
            for o in 0..co {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut s = b.data()[o];
                        for c in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (y * stride + ky) as isize - pad as isize;
                                    let ix = (xx * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        s += x.data()[((bi * ci + c) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((o * ci + c) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        out[((bi * co + o) * oh + y) * ow + xx] = s;
                    }
                }
            }
        }
        Tensor::new(&[n, co, oh, ow], out).unwrap()
    }

    #[test]
    fn conv_full_support_sum() {
        let mut r = rng(1);
        let x = Tensor::randn(&[1, 1, 5, 5], 1.0, &mut r).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let w = g.constant(Tensor::ones(&[1, 1, 5, 5]).unwrap());
        let y = g.conv2d(xv, w, None, ConvGeom::new(5, 1, 0)).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        let s: f64 = x.data().iter().sum();
        assert!((g.value(y).item() - s).abs() < 1e-12);
    }

    #[test]
    fn conv_full_scale_ccm_geometry() {
        let kind = LayerKind::Conv2d {
            out_channels: 64,
            kernel: 5,
            stride: 1,
            pad: 0,
        };
        let out = kind.output_shape(&[FeatShape::map(3, 120, 96)], None).unwrap();
        assert_eq!(out, FeatShape::map(64, 116, 92));
        let mut r = rng(2);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 120, 96]).unwrap());
        let w = g.constant(Tensor::randn(&[64, 3, 5, 5], 0.1, &mut r).unwrap());
        let y = g.conv2d(x, w, None, ConvGeom::new(5, 1, 0)).unwrap();
        assert_eq!(g.shape(y), &[1, 64, 116, 92]);
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let mut r = rng(3);
        let x = Tensor::randn(&[1, 2, 7, 7], 1.0, &mut r).unwrap();
        for (stride, pad) in [(1, 0), (2, 1), (1, 2)] {
            let w = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r).unwrap();
            let b = Tensor::randn(&[3], 1.0, &mut r).unwrap();
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
            let y = g.conv2d(xv, wv, Some(bv), ConvGeom::new(3, stride, pad)).unwrap();
            let oracle = conv_oracle(&x, &w, &b, stride, pad);
            assert!(g.value(y).max_abs_diff(&oracle).unwrap() < 1e-10);
        }
    }

    #[test]
    fn conv_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 6, 6]).unwrap());
        let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]).unwrap());
        assert!(matches!(
            g.conv2d(x, w, None, ConvGeom::new(3, 1, 0)),
            Err(Error::ShapeMismatch { .. })
        ));
        let w = g.constant(Tensor::zeros(&[1, 2, 3, 3]).unwrap());
        assert!(matches!(g.conv2d(x, w, None, ConvGeom::new(3, 2, 0)), Err(Error::Geometry(_))));
    }

    #[test]
    fn conv_gradients() {
        let mut r = rng(4);
        let x = Tensor::randn(&[2, 2, 5, 5], 1.0, &mut r).unwrap();
        let w = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut r).unwrap();
        let b = Tensor::randn(&[3], 0.5, &mut r).unwrap();
        let proj = Tensor::randn(&[2, 3, 3, 3], 1.0, &mut r).unwrap();
        let report = finite_difference_check(
            |g, p| {
                let y = g.conv2d(p[0], p[1], Some(p[2]), ConvGeom::new(3, 2, 1))?;
                let c = g.constant(proj.clone());
                let m = g.mul(y, c)?;
                Ok(g.sum(m))
            },
            &[x, w, b],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn composite_conv_relu_sum_gradient() {
        let mut r = rng(5);
        let x = Tensor::randn(&[1, 1, 6, 6], 1.0, &mut r).unwrap();
        let w = Tensor::randn(&[2, 1, 3, 3], 0.5, &mut r).unwrap();
        let report = finite_difference_check(
            |g, p| {
                let y = g.conv2d(p[0], p[1], None, ConvGeom::new(3, 1, 0))?;
                let y = g.relu(y);
                Ok(g.sum(y))
            },
            &[x, w],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn pool_unpool_nonzero_set_is_argmax_set() {
        let mut r = rng(6);
        let x = Tensor::uniform(&[1, 1, 8, 8], 0.1, 1.0, &mut r).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (p, idx) = g.maxpool2d(xv, ConvGeom::new(2, 2, 0)).unwrap();
        let u = g.maxunpool2d(p, &idx).unwrap();
        let mut oracle = vec![0.0; 64];
        for by in 0..4 {
            for bx in 0..4 {
                let mut best = (0, f64::MIN);
                for dy in 0..2 {
                    for dx in 0..2 {
                        let i = (2 * by + dy) * 8 + 2 * bx + dx;
                        if x.data()[i] > best.1 {
                            best = (i, x.data()[i]);
                        }
                    }
                }
                oracle[best.0] = best.1;
            }
        }
        assert_eq!(g.value(u).data(), oracle.as_slice());
    }

    #[test]
    fn pool_unpool_adjointness() {
        let mut r = rng(7);
        for _ in 0..5 {
            let x = Tensor::randn(&[2, 3, 6, 6], 1.0, &mut r).unwrap();
            let y = Tensor::randn(&[2, 3, 3, 3], 1.0, &mut r).unwrap();
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let (p, idx) = g.maxpool2d(xv, ConvGeom::new(2, 2, 0)).unwrap();
            let yv = g.constant(y.clone());
            let u = g.maxunpool2d(yv, &idx).unwrap();
            // <unpool(y), x> == <y, pool(x)>
            let lhs = g.value(u).dot(&x).unwrap();
            let rhs = y.dot(g.value(p)).unwrap();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn deconv_single_pixel_copies_filter() {
        let mut r = rng(8);
        let w = Tensor::randn(&[1, 1, 3, 3], 1.0, &mut r).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 1, 1, 1], vec![2.5]).unwrap());
        let wv = g.constant(w.clone());
        let y = g.deconv2d(x, wv, None, ConvGeom::new(3, 1, 0)).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 3, 3]);
        let expected = w.map(|v| v * 2.5);
        assert!(g.value(y).max_abs_diff(&expected.reshape(&[1, 1, 3, 3]).unwrap()).unwrap() < 1e-15);
    }

    #[test]
    fn deconv_mirrors_conv_geometry() {
        for (h, k, s, p) in [(12, 5, 1, 0), (24, 3, 1, 1), (11, 3, 2, 1), (10, 2, 2, 0)] {
            let g = ConvGeom::new(k, s, p);
            if let Some(o) = g.conv_out(h) {
                assert_eq!(g.transposed_out(o), Some(h));
            }
        }
    }

    #[test]
    fn deconv_is_conv_input_gradient() {
        // deconv(y; w) == ∂/∂x <conv(x; w), y>
        let mut r = rng(9);
        let x = Tensor::randn(&[1, 2, 7, 7], 1.0, &mut r).unwrap();
        let w = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r).unwrap();
        let geom = ConvGeom::new(3, 2, 1);
        let mut g = Graph::new();
        let xv = g.param(x);
        let wv = g.constant(w.clone());
        let y = g.conv2d(xv, wv, None, geom).unwrap();
        let dy = Tensor::randn(g.shape(y), 1.0, &mut r).unwrap();
        let c = g.constant(dy.clone());
        let m = g.mul(y, c).unwrap();
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        let adjoint = grads.get(xv).unwrap().clone();

        let mut g2 = Graph::new();
        let yv = g2.constant(dy);
        let wv2 = g2.constant(w);
        let d = g2.deconv2d(yv, wv2, None, geom).unwrap();
        assert!(g2.value(d).max_abs_diff(&adjoint).unwrap() < 1e-10);
    }

    #[test]
    fn deconv_gradients() {
        let mut r = rng(10);
        let x = Tensor::randn(&[2, 2, 3, 3], 1.0, &mut r).unwrap();
        let w = Tensor::randn(&[2, 3, 3, 3], 0.5, &mut r).unwrap();
        let b = Tensor::randn(&[3], 0.5, &mut r).unwrap();
        let proj = Tensor::randn(&[2, 3, 5, 5], 1.0, &mut r).unwrap();
        let report = finite_difference_check(
            |g, p| {
                let y = g.deconv2d(p[0], p[1], Some(p[2]), ConvGeom::new(3, 2, 1))?;
                let c = g.constant(proj.clone());
                let m = g.mul(y, c)?;
                Ok(g.sum(m))
            },
            &[x, w, b],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn batchnorm_constant_channel_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 1, 3, 3], 4.2).unwrap());
        let gm = g.constant(Tensor::ones(&[1]).unwrap());
        let bt = g.constant(Tensor::zeros(&[1]).unwrap());
        let (y, _) = g.batchnorm2d(x, gm, bt, BATCHNORM_EPS, NormMode::Train, None).unwrap();
        assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn batchnorm_train_statistics() {
        let mut r = rng(11);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[4, 3, 5, 5], 3.0, &mut r).unwrap());
        let gm = g.constant(Tensor::ones(&[3]).unwrap());
        let bt = g.constant(Tensor::zeros(&[3]).unwrap());
        let (y, stats) = g.batchnorm2d(x, gm, bt, BATCHNORM_EPS, NormMode::Train, None).unwrap();
        assert!(stats.is_some());
        let t = g.value(y);
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|b| t.data()[(b * 3 + ch) * 25..(b * 3 + ch + 1) * 25].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-9);
            assert!((v - 1.0).abs() < 1e-5, "variance {v}");
        }
    }

    #[test]
    fn batchnorm_singleton_is_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 1, 1]).unwrap());
        let gm = g.constant(Tensor::ones(&[2]).unwrap());
        let bt = g.constant(Tensor::zeros(&[2]).unwrap());
        assert!(matches!(
            g.batchnorm2d(x, gm, bt, BATCHNORM_EPS, NormMode::Train, None),
            Err(Error::Degenerate { .. })
        ));
    }

    #[test]
    fn batchnorm_gradients_train_and_eval() {
        let mut r = rng(12);
        let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut r).unwrap();
        let gm = Tensor::uniform(&[3], 0.5, 1.5, &mut r).unwrap();
        let bt = Tensor::randn(&[3], 0.5, &mut r).unwrap();
        let proj = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut r).unwrap();
        let running = RunningStats {
            mean: vec![0.1, -0.2, 0.3],
            var: vec![0.9, 1.1, 1.3],
        };
        for mode in [NormMode::Train, NormMode::Eval] {
            let report = finite_difference_check(
                |g, p| {
                    let (y, _) =
                        g.batchnorm2d(p[0], p[1], p[2], BATCHNORM_EPS, mode, Some((&running.mean, &running.var)))?;
                    let c = g.constant(proj.clone());
                    let m = g.mul(y, c)?;
                    Ok(g.sum(m))
                },
                &[x.clone(), gm.clone(), bt.clone()],
                DEFAULT_EPS,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-5, "{mode:?} {report:?}");
        }
    }

    #[test]
    fn batchnorm_eval_has_no_hidden_state() {
        let mut r = rng(13);
        let x = Tensor::randn(&[2, 2, 3, 3], 1.0, &mut r).unwrap();
        let mut running = RunningStats::new(2);
        let before = running.clone();
        let run = |running: &mut RunningStats| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let gm = g.constant(Tensor::ones(&[2]).unwrap());
            let bt = g.constant(Tensor::zeros(&[2]).unwrap());
            let y = batchnorm2d(&mut g, xv, gm, bt, BATCHNORM_EPS, NormMode::Eval, running).unwrap();
            g.value(y).clone()
        };
        let a = run(&mut running);
        let b = run(&mut running);
        assert_eq!(a, b);
        assert_eq!(running, before);
    }

    #[test]
    fn running_stats_momentum() {
        let mut rs = RunningStats::new(1);
        rs.update(
            &BatchStats {
                mean: vec![1.0],
                var: vec![3.0],
            },
            BATCHNORM_MOMENTUM,
        );
        assert!((rs.mean[0] - 0.1).abs() < 1e-15);
        assert!((rs.var[0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn dropout_modes() {
        let mut r = rng(14);
        let x = Tensor::randn(&[3, 4], 1.0, &mut r).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = dropout(&mut g, xv, 0.0, NormMode::Train, &mut r).unwrap();
        assert_eq!(g.value(y), &x);
        let y = dropout(&mut g, xv, 0.7, NormMode::Eval, &mut r).unwrap();
        assert_eq!(g.value(y), &x);
        assert!(dropout(&mut g, xv, 1.0, NormMode::Train, &mut r).is_err());
    }

    #[test]
    fn dropout_survivor_fraction_and_determinism() {
        let x = Tensor::ones(&[10_000]).unwrap();
        let run = |seed| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let y = dropout(&mut g, xv, 0.5, NormMode::Train, &mut rng(seed)).unwrap();
            g.value(y).clone()
        };
        let a = run(99);
        assert_eq!(a, run(99));
        let survivors = a.data().iter().filter(|v| **v != 0.0).count() as f64;
        // binomial(10^4, 0.5): sigma = 50
        assert!((survivors - 5000.0).abs() <= 150.0, "{survivors}");
        assert!(a.data().iter().all(|v| *v == 0.0 || *v == 2.0));
    }

    #[test]
    fn haar_merge_cases() {
        let mut r = rng(15);
        let a = Tensor::randn(&[1, 2, 3, 3], 1.0, &mut r).unwrap();
        let b = Tensor::randn(&[1, 2, 3, 3], 1.0, &mut r).unwrap();
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let same = haar_split_merge(&mut g, &[av, av], HaarPattern::TwoRectHorizontal).unwrap();
        assert!(g.value(same).data().iter().all(|v| *v == 0.0));
        let diff = haar_split_merge(&mut g, &[av, bv], HaarPattern::TwoRectVertical).unwrap();
        for ((d, x), y) in g.value(diff).data().iter().zip(a.data()).zip(b.data()) {
            assert_eq!(*d, x - y);
        }
        assert!(haar_split_merge(&mut g, &[av, bv], HaarPattern::FourRectChecker).is_err());
        let c = g.constant(Tensor::zeros(&[1, 2, 2, 3]).unwrap());
        assert!(haar_split_merge(&mut g, &[av, c], HaarPattern::TwoRectHorizontal).is_err());
    }

    #[test]
    fn haar_four_rect_matches_signed_sum() {
        let mut r = rng(16);
        let maps: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&[2, 3, 4, 4], 1.0, &mut r).unwrap()).collect();
        let mut g = Graph::new();
        let vars: Vec<Var> = maps.iter().map(|m| g.constant(m.clone())).collect();
        let out = haar_split_merge(&mut g, &vars, HaarPattern::FourRectChecker).unwrap();
        for i in 0..maps[0].len() {
            let oracle = maps[0].data()[i] - maps[1].data()[i] + maps[2].data()[i] - maps[3].data()[i];
            assert_eq!(g.value(out).data()[i], oracle);
        }
        // swapping white and black regions negates the response
        let flipped = haar_split_merge(&mut g, &[vars[1], vars[0], vars[3], vars[2]], HaarPattern::FourRectChecker).unwrap();
        for (a, b) in g.value(out).data().iter().zip(g.value(flipped).data()) {
            assert!((a + b).abs() < 1e-12);
        }
    }

    #[test]
    fn haar_regions_tile_the_map() {
        for p in [HaarPattern::TwoRectHorizontal, HaarPattern::TwoRectVertical, HaarPattern::FourRectChecker] {
            let regions = p.regions(6, 4).unwrap();
            assert_eq!(regions.len(), p.arity());
            let mut cover = [0; 24];
            for (t, l, rows, cols) in regions {
                for y in t..t + rows {
                    for x in l..l + cols {
                        cover[y * 4 + x] += 1;
                    }
                }
            }
            assert!(cover.iter().all(|&c| c == 1), "{p:?}");
        }
        assert!(HaarPattern::TwoRectHorizontal.regions(4, 5).is_err());
    }

    fn inception_vars(g: &mut Graph, lp: &LayerParams, param: bool) -> InceptionVars {
        let mut get = |name: String| {
            let t = lp.tensors[&name].clone();
            if param {
                g.param(t)
            } else {
                g.constant(t)
            }
        };
        let names = InceptionCfg::PATH_NAMES;
        InceptionVars {
            weights: names.map(|n| get(format!("{n}.weight"))),
            biases: names.map(|n| get(format!("{n}.bias"))),
        }
    }

    #[test]
    fn inception_shape_and_compositionality() {
        let mut r = rng(17);
        let cfg = InceptionCfg { paths: [8, 8, 8, 8] };
        let kind = LayerKind::InceptionLite(cfg);
        let input = FeatShape::map(16, 8, 8);
        assert_eq!(kind.output_shape(&[input], None).unwrap(), FeatShape::map(32, 8, 8));
        let mut lp = LayerParams::init(kind, input, &mut r).unwrap();
        for t in lp.tensors.values_mut() {
            if t.rank() == 1 {
                *t = Tensor::randn(t.shape(), 0.1, &mut r).unwrap();
            }
        }
        let x = Tensor::randn(&[1, 16, 8, 8], 1.0, &mut r).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let vars = inception_vars(&mut g, &lp, false);
        let out = inception_lite(&mut g, xv, &vars).unwrap();
        assert_eq!(g.shape(out), &[1, 32, 8, 8]);
        // path 2 standalone: 3×3 conv pad 1 then ReLU
        let single = g.conv2d(xv, vars.weights[1], Some(vars.biases[1]), ConvGeom::new(3, 1, 1)).unwrap();
        let single = g.relu(single);
        let plane = 64;
        assert_eq!(
            &g.value(out).data()[8 * plane..16 * plane],
            g.value(single).data()
        );
        // path 4 standalone: 3×3 max-pool (stride 1, pad 1) then 1×1 conv
        let (pooled, _) = g.maxpool2d(xv, ConvGeom::new(3, 1, 1)).unwrap();
        let proj = g.conv2d(pooled, vars.weights[3], Some(vars.biases[3]), ConvGeom::new(1, 1, 0)).unwrap();
        let proj = g.relu(proj);
        assert_eq!(&g.value(out).data()[24 * plane..32 * plane], g.value(proj).data());
    }

    #[test]
    fn inception_budget_must_divide() {
        assert!(InceptionCfg::even(32).is_ok());
        assert!(matches!(InceptionCfg::even(30), Err(Error::Config { .. })));
    }

    #[test]
    fn inception_gradient() {
        let mut r = rng(18);
        let kind = LayerKind::InceptionLite(InceptionCfg { paths: [2, 2, 2, 2] });
        let input = FeatShape::map(4, 6, 6);
        let lp = LayerParams::init(kind, input, &mut r).unwrap();
        let x = Tensor::randn(&[1, 4, 6, 6], 1.0, &mut r).unwrap();
        let proj = Tensor::randn(&[1, 8, 6, 6], 1.0, &mut r).unwrap();
        let report = finite_difference_check(
            |g, p| {
                let vars = inception_vars(g, &lp, false);
                let y = inception_lite(g, p[0], &vars)?;
                let c = g.constant(proj.clone());
                let m = g.mul(y, c)?;
                Ok(g.sum(m))
            },
            &[x],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn fully_connected_cases() {
        let mut r = rng(19);
        let x = Tensor::randn(&[6], 1.0, &mut r).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let eye = g.constant(Tensor::identity(6).unwrap());
        let zb = g.constant(Tensor::zeros(&[6]).unwrap());
        let y = fully_connected(&mut g, xv, eye, zb).unwrap();
        assert_eq!(g.value(y), &x);

        let b = Tensor::randn(&[4], 1.0, &mut r).unwrap();
        let zw = g.constant(Tensor::zeros(&[4, 6]).unwrap());
        let bv = g.constant(b.clone());
        let y = fully_connected(&mut g, xv, zw, bv).unwrap();
        assert_eq!(g.value(y), &b);

        let w = Tensor::randn(&[4, 6], 1.0, &mut r).unwrap();
        let wv = g.constant(w.clone());
        let y = fully_connected(&mut g, xv, wv, bv).unwrap();
        let xcol = g.constant(x.reshape(&[6, 1]).unwrap());
        let oracle = g.matmul(wv, xcol).unwrap();
        for i in 0..4 {
            assert!((g.value(y).data()[i] - g.value(oracle).data()[i] - b.data()[i]).abs() < 1e-12);
        }
        let short = g.constant(Tensor::zeros(&[5]).unwrap());
        assert!(fully_connected(&mut g, short, wv, bv).is_err());
    }

    #[test]
    fn layer_param_validation() {
        let mut r = rng(20);
        let kind = LayerKind::Conv2d {
            out_channels: 4,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let input = FeatShape::map(2, 5, 5);
        let mut lp = LayerParams::init(kind, input, &mut r).unwrap();
        assert!(lp.validate(input).is_ok());
        assert_eq!(lp.numel(), 3 * 3 * 2 * 4 + 4);
        lp.tensors.insert("weight".into(), Tensor::zeros(&[4, 3, 3, 3]).unwrap());
        assert!(lp.validate(input).is_err());
        assert!(LayerKind::Dropout { p: 1.0 }.validate().is_err());
        assert!(LayerKind::BatchNorm2d { eps: 0.0 }.validate().is_err());
    }

    #[test]
    fn every_layer_input_gradient_passes() {
        // relu, dropout (fixed mask), crop, reshape, softmax, l2norm and linear
        let mut r = rng(21);
        let x = Tensor::uniform(&[2, 3, 4, 4], 0.05, 1.0, &mut r)
            .unwrap()
            .map(|v| if (v * 1000.0) as i64 % 2 == 0 { v } else { -v });
        let report = finite_difference_check(
            |g, p| {
                let y = g.relu(p[0]);
                let y = dropout(g, y, 0.3, NormMode::Train, &mut rng(5))?;
                let y = g.crop(y, 1, 0, 3, 3)?;
                let y = g.flatten(y)?;
                let w = g.constant(Tensor::randn(&[5, 27], 0.3, &mut rng(6))?);
                let y = g.linear(y, w, None)?;
                let s = g.softmax(y)?;
                let n = g.l2_normalize(y)?;
                let c = g.constant(Tensor::randn(&[2, 5], 1.0, &mut rng(7))?);
                let a = g.mul(s, c)?;
                let b = g.mul(n, c)?;
                let t = g.add(a, b)?;
                Ok(g.sum(t))
            },
            &[x],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }
}
