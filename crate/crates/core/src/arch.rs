//! Declarative network specifications, the four desk-scale architectures,
//! a DAG evaluator over the tape, the CCM matching head and the complexity
//! accountant.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, NormMode, PoolIndices, Var};
use crate::kernels::ConvGeom;
use crate::nn::{
    self, FeatShape, HaarPattern, InceptionCfg, InceptionVars, LayerKind, RunningStats, BATCHNORM_EPS,
    BATCHNORM_MOMENTUM, DEFAULT_DROPOUT,
};
use crate::tensor::Tensor;

/// Input and output names shared by the builders.
pub mod names {
    pub const ROI: &str = "roi";
    pub const HEAD_T: &str = "head_t";
    pub const HEAD_P: &str = "head_p";
    pub const PAIR: &str = "pair";
    pub const EMBEDDING: &str = "embedding";
    pub const FEATURES: &str = "features";
    pub const MATCH_LOGITS: &str = "match_logits";
    pub const RECONSTRUCTION: &str = "reconstruction";
    pub const LOGITS: &str = "logits";
    pub const TRUNK_LOGITS: &str = "trunk_logits";
}
pub use names::*;

pub const SPEC_FORMAT: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ArchKind {
    Ccm,
    Tbe,
    Haarnet,
    CfrAutoencoder,
    CfrClassifier,
}

impl ArchKind {
    pub fn name(self) -> &'static str {
        match self {
            ArchKind::Ccm => "ccm",
            ArchKind::Tbe => "tbe",
            ArchKind::Haarnet => "haarnet",
            ArchKind::CfrAutoencoder => "cfr_autoencoder",
            ArchKind::CfrClassifier => "cfr_classifier",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            ArchKind::Ccm,
            ArchKind::Tbe,
            ArchKind::Haarnet,
            ArchKind::CfrAutoencoder,
            ArchKind::CfrClassifier,
        ]
        .into_iter()
        .find(|a| a.name() == s)
    }
}

/// One layer of a network DAG. Parameters are stored under
/// `{group}.{suffix}`; `group` defaults to the node name, and nodes naming
/// the same group share (alias) one set of tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNode {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<String>,
    pub group: Option<String>,
}

impl LayerNode {
    pub fn param_group(&self) -> &str {
        self.group.as_deref().unwrap_or(&self.name)
    }

    /// Leading dotted segment of the node name (e.g. `trunk` in `trunk.inc1`).
    pub fn component(&self) -> &str {
        self.name.split('.').next().unwrap_or(&self.name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub name: String,
    pub arch: ArchKind,
    pub nodes: Vec<LayerNode>,
    /// Named outputs mapped to node names.
    pub outputs: BTreeMap<String, String>,
    /// Number of leading layers shared by trunk and branches.
    pub shared_prefix: usize,
    pub embedding_dim: usize,
}

impl NetworkSpec {
    pub fn node(&self, name: &str) -> Option<&LayerNode> {
        self.nodes.iter().find(|n| n.name == name)
    }

    fn index(&self) -> BTreeMap<&str, usize> {
        self.nodes.iter().enumerate().map(|(i, n)| (n.name.as_str(), i)).collect()
    }

    /// Validates the DAG and infers each node's per-sample output shape.
    pub fn infer_shapes(&self) -> Result<Vec<FeatShape>> {
        let mut idx: BTreeMap<&str, usize> = BTreeMap::new();
        let mut shapes: Vec<FeatShape> = Vec::with_capacity(self.nodes.len());
        let mut groups: BTreeMap<&str, Vec<(String, Vec<usize>)>> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.name.is_empty() || node.name.contains(char::is_whitespace) {
                return Err(Error::Spec(format!("invalid node name `{}`", node.name)));
            }
            if idx.insert(&node.name, i).is_some() {
                return Err(Error::Spec(format!("duplicate node `{}`", node.name)));
            }
            let mut ins = Vec::with_capacity(node.inputs.len());
            for input in &node.inputs {
                let j = *idx
                    .get(input.as_str())
                    .filter(|&&j| j < i)
                    .ok_or_else(|| Error::Spec(format!("`{}` reads unknown or later node `{input}`", node.name)))?;
                ins.push(shapes[j]);
            }
            let pooled = match &node.kind {
                LayerKind::MaxUnpool2d { pool } => {
                    let p = *idx
                        .get(pool.as_str())
                        .ok_or_else(|| Error::Spec(format!("`{}` pairs with unknown pool `{pool}`", node.name)))?;
                    if !matches!(self.nodes[p].kind, LayerKind::MaxPool2d { .. }) {
                        return Err(Error::Spec(format!("`{pool}` is not a pooling layer")));
                    }
                    let pool_in = &self.nodes[p].inputs[0];
                    Some(shapes[idx[pool_in.as_str()]])
                }
                _ => None,
            };
            let out = node
                .kind
                .output_shape(&ins, pooled)
                .map_err(|e| annotate(e, &node.name))?;
            let params = node.kind.param_shapes(ins.first().copied());
            if !params.is_empty() {
                match groups.get(node.param_group()) {
                    Some(prev) if *prev != params => {
                        return Err(Error::Spec(format!(
                            "`{}` aliases group `{}` with different parameter shapes",
                            node.name,
                            node.param_group()
                        )))
                    }
                    _ => {
                        groups.insert(node.param_group(), params);
                    }
                }
            }
            shapes.push(out);
        }
        for (out, node) in &self.outputs {
            if !idx.contains_key(node.as_str()) {
                return Err(Error::Spec(format!("output `{out}` names unknown node `{node}`")));
            }
        }
        if self.shared_prefix > self.nodes.len() {
            return Err(Error::Spec(format!(
                "shared prefix {} exceeds {} layers",
                self.shared_prefix,
                self.nodes.len()
            )));
        }
        Ok(shapes)
    }

    /// Shape of the named output (or node).
    pub fn shape_of(&self, name: &str) -> Result<FeatShape> {
        let shapes = self.infer_shapes()?;
        let node = self.outputs.get(name).map(String::as_str).unwrap_or(name);
        let i = *self
            .index()
            .get(node)
            .ok_or_else(|| Error::Spec(format!("unknown output `{name}`")))?;
        Ok(shapes[i])
    }

    /// `(parameter name, shape)` for every distinct parameter tensor, in
    /// node order.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let shapes = self.infer_shapes()?;
        let idx = self.index();
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for node in &self.nodes {
            let input = node.inputs.first().map(|n| shapes[idx[n.as_str()]]);
            for (suffix, shape) in node.kind.param_shapes(input) {
                let name = format!("{}.{suffix}", node.param_group());
                if seen.insert(name.clone()) {
                    out.push((name, shape));
                }
            }
        }
        Ok(out)
    }

    /// Canonical text form; the spec hash is computed over it.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "spec_format = {SPEC_FORMAT}");
        let _ = writeln!(s, "name = {}", self.name);
        let _ = writeln!(s, "arch = {}", self.arch.name());
        let _ = writeln!(s, "embedding_dim = {}", self.embedding_dim);
        let _ = writeln!(s, "shared_prefix = {}", self.shared_prefix);
        for (k, v) in &self.outputs {
            let _ = writeln!(s, "output.{k} = {v}");
        }
        for n in &self.nodes {
            let _ = write!(s, "layer = {} : {}", n.name, kind_to_text(&n.kind));
            if !n.inputs.is_empty() {
                let _ = write!(s, " <- {}", n.inputs.join(","));
            }
            if let Some(g) = &n.group {
                let _ = write!(s, " @{g}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut name = None;
        let mut arch = None;
        let mut embedding_dim = None;
        let mut shared_prefix = 0;
        let mut outputs = BTreeMap::new();
        let mut nodes = Vec::new();
        let mut format = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |why: &str| Error::Spec(format!("line {}: {why}: `{line}`", lineno + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| bad("expected key = value"))?;
            let (key, value) = (key.trim(), value.trim());
            let num = |v: &str| v.parse::<usize>().map_err(|_| bad("expected an integer"));
            match key {
                "spec_format" => format = Some(num(value)?),
                "name" => name = Some(value.to_string()),
                "arch" => arch = Some(ArchKind::parse(value).ok_or_else(|| bad("unknown architecture"))?),
                "embedding_dim" => embedding_dim = Some(num(value)?),
                "shared_prefix" => shared_prefix = num(value)?,
                "layer" => nodes.push(parse_layer(value).map_err(|e| bad(&e))?),
                k => match k.strip_prefix("output.") {
                    Some(out) => {
                        outputs.insert(out.to_string(), value.to_string());
                    }
                    None => return Err(bad("unknown key")),
                },
            }
        }
        match format {
            Some(f) if f == SPEC_FORMAT as usize => {}
            Some(f) => {
                return Err(Error::Version {
                    found: f.to_string(),
                    expected: SPEC_FORMAT.to_string(),
                })
            }
            None => return Err(Error::Spec("missing spec_format".into())),
        }
        let spec = NetworkSpec {
            name: name.ok_or_else(|| Error::Spec("missing name".into()))?,
            arch: arch.ok_or_else(|| Error::Spec("missing arch".into()))?,
            nodes,
            outputs,
            shared_prefix,
            embedding_dim: embedding_dim.ok_or_else(|| Error::Spec("missing embedding_dim".into()))?,
        };
        spec.infer_shapes()?;
        Ok(spec)
    }

    /// Hex SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn annotate(e: Error, node: &str) -> Error {
    match e {
        Error::Geometry(m) => Error::Geometry(format!("{node}: {m}")),
        Error::Spec(m) => Error::Spec(format!("{node}: {m}")),
        other => other,
    }
}

fn kind_to_text(k: &LayerKind) -> String {
    let shape = |s: &FeatShape| match s {
        FeatShape::Map { c, h, w } => format!("c={c},h={h},w={w}"),
        FeatShape::Flat(n) => format!("n={n}"),
    };
    match k {
        LayerKind::Input(s) => format!("input({})", shape(s)),
        LayerKind::Conv2d {
            out_channels,
            kernel,
            stride,
            pad,
        } => format!("conv2d(out={out_channels},k={kernel},s={stride},p={pad})"),
        LayerKind::Deconv2d {
            out_channels,
            kernel,
            stride,
            pad,
        } => format!("deconv2d(out={out_channels},k={kernel},s={stride},p={pad})"),
        LayerKind::MaxPool2d { window, stride } => format!("maxpool2d(k={window},s={stride})"),
        LayerKind::MaxUnpool2d { pool } => format!("maxunpool2d(pool={pool})"),
        LayerKind::BatchNorm2d { eps } => format!("batchnorm2d(eps={eps})"),
        LayerKind::Dropout { p } => format!("dropout(p={p})"),
        LayerKind::FullyConnected { out } => format!("fc(out={out})"),
        LayerKind::Relu => "relu".into(),
        LayerKind::L2Norm => "l2norm".into(),
        LayerKind::Softmax => "softmax".into(),
        LayerKind::Concat => "concat".into(),
        LayerKind::SubtractMerge { pattern } => format!("subtract(pattern={})", pattern.name()),
        LayerKind::InceptionLite(c) => {
            let [a, b, d, e] = c.paths;
            format!("inception(b1={a},b3={b},b5={d},pp={e})")
        }
        LayerKind::Flatten => "flatten".into(),
        LayerKind::Reshape(s) => format!("reshape({})", shape(s)),
        LayerKind::Crop { top, left, rows, cols } => format!("crop(top={top},left={left},rows={rows},cols={cols})"),
        LayerKind::Hadamard => "hadamard".into(),
    }
}

fn parse_layer(value: &str) -> std::result::Result<LayerNode, String> {
    let (name, rest) = value.split_once(':').ok_or("expected `name : kind`")?;
    let (rest, group) = match rest.split_once('@') {
        Some((r, g)) => (r, Some(g.trim().to_string())),
        None => (rest, None),
    };
    let (kind_txt, inputs) = match rest.split_once("<-") {
        Some((k, i)) => (k.trim(), i.split(',').map(|s| s.trim().to_string()).collect()),
        None => (rest.trim(), Vec::new()),
    };
    Ok(LayerNode {
        name: name.trim().to_string(),
        kind: parse_kind(kind_txt)?,
        inputs,
        group,
    })
}

fn parse_kind(txt: &str) -> std::result::Result<LayerKind, String> {
    let (head, args) = match txt.split_once('(') {
        Some((h, a)) => (h, a.strip_suffix(')').ok_or("unclosed `(`")?),
        None => (txt, ""),
    };
    let mut kv = BTreeMap::new();
    for part in args.split(',').filter(|p| !p.trim().is_empty()) {
        let (k, v) = part.split_once('=').ok_or(format!("bad argument `{part}`"))?;
        kv.insert(k.trim(), v.trim());
    }
    let get = |k: &str| kv.get(k).copied().ok_or(format!("{head} needs `{k}`"));
    let int = |k: &str| -> std::result::Result<usize, String> {
        get(k)?.parse().map_err(|_| format!("`{k}` must be an integer"))
    };
    let float = |k: &str| -> std::result::Result<f64, String> {
        get(k)?.parse().map_err(|_| format!("`{k}` must be a number"))
    };
    let shape = || -> std::result::Result<FeatShape, String> {
        if kv.contains_key("n") {
            Ok(FeatShape::Flat(int("n")?))
        } else {
            Ok(FeatShape::map(int("c")?, int("h")?, int("w")?))
        }
    };
    Ok(match head.trim() {
        "input" => LayerKind::Input(shape()?),
        "conv2d" => LayerKind::Conv2d {
            out_channels: int("out")?,
            kernel: int("k")?,
            stride: int("s")?,
            pad: int("p")?,
        },
        "deconv2d" => LayerKind::Deconv2d {
            out_channels: int("out")?,
            kernel: int("k")?,
            stride: int("s")?,
            pad: int("p")?,
        },
        "maxpool2d" => LayerKind::MaxPool2d {
            window: int("k")?,
            stride: int("s")?,
        },
        "maxunpool2d" => LayerKind::MaxUnpool2d {
            pool: get("pool")?.to_string(),
        },
        "batchnorm2d" => LayerKind::BatchNorm2d { eps: float("eps")? },
        "dropout" => LayerKind::Dropout { p: float("p")? },
        "fc" => LayerKind::FullyConnected { out: int("out")? },
        "relu" => LayerKind::Relu,
        "l2norm" => LayerKind::L2Norm,
        "softmax" => LayerKind::Softmax,
        "concat" => LayerKind::Concat,
        "subtract" => LayerKind::SubtractMerge {
            pattern: HaarPattern::parse(get("pattern")?).ok_or("unknown Haar pattern")?,
        },
        "inception" => LayerKind::InceptionLite(InceptionCfg {
            paths: [int("b1")?, int("b3")?, int("b5")?, int("pp")?],
        }),
        "flatten" => LayerKind::Flatten,
        "reshape" => LayerKind::Reshape(shape()?),
        "crop" => LayerKind::Crop {
            top: int("top")?,
            left: int("left")?,
            rows: int("rows")?,
            cols: int("cols")?,
        },
        "hadamard" => LayerKind::Hadamard,
        other => return Err(format!("unknown layer kind `{other}`")),
    })
}

/// Incremental spec construction with eager shape checking, so an invalid
/// geometry fails at the offending layer.
struct Builder {
    spec: NetworkSpec,
}

impl Builder {
    fn new(name: &str, arch: ArchKind, embedding_dim: usize) -> Self {
        Self {
            spec: NetworkSpec {
                name: name.to_string(),
                arch,
                nodes: Vec::new(),
                outputs: BTreeMap::new(),
                shared_prefix: 0,
                embedding_dim,
            },
        }
    }

    fn add(&mut self, name: &str, kind: LayerKind, inputs: &[&str]) -> Result<String> {
        self.spec.nodes.push(LayerNode {
            name: name.to_string(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            group: None,
        });
        if let Err(e) = self.spec.infer_shapes() {
            self.spec.nodes.pop();
            return Err(e);
        }
        Ok(name.to_string())
    }

    fn shape(&self, name: &str) -> FeatShape {
        let shapes = self.spec.infer_shapes().expect("validated on insertion");
        let i = self.spec.nodes.iter().position(|n| n.name == name).expect("known node");
        shapes[i]
    }

    fn output(&mut self, key: &str, node: &str) {
        self.spec.outputs.insert(key.to_string(), node.to_string());
    }

    fn finish(self) -> Result<NetworkSpec> {
        self.spec.infer_shapes()?;
        Ok(self.spec)
    }
}

fn conv(out: usize, k: usize, pad: usize) -> LayerKind {
    LayerKind::Conv2d {
        out_channels: out,
        kernel: k,
        stride: 1,
        pad,
    }
}

fn pool2() -> LayerKind {
    LayerKind::MaxPool2d { window: 2, stride: 2 }
}

/// Options of the cross-correlation matching network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CcmOptions {
    pub input: FeatShape,
    pub convs: usize,
    pub filters: usize,
    pub kernel: usize,
    /// Centred crop applied after the pool, if any.
    pub crop: Option<(usize, usize)>,
    pub head_hidden: usize,
    pub dropout: f64,
}

impl CcmOptions {
    pub fn desk() -> Self {
        Self {
            input: FeatShape::map(1, 48, 40),
            convs: 5,
            filters: 16,
            kernel: 5,
            crop: None,
            head_hidden: 32,
            dropout: DEFAULT_DROPOUT,
        }
    }

    /// 120×96×3 input, nine unpadded 5×5 convolutions with 64 filters and a
    /// crop to 56×44 after the pool so the branch ends at 24×12×64.
    pub fn full() -> Self {
        Self {
            input: FeatShape::map(3, 120, 96),
            convs: 9,
            filters: 64,
            kernel: 5,
            crop: Some((56, 44)),
            head_hidden: 128,
            dropout: DEFAULT_DROPOUT,
        }
    }
}

/// One Siamese branch (`roi → features`) plus the matching head
/// (`head_t, head_p → match_logits`). The branch is evaluated once on the
/// stacked T, P and N images, so all roles share the same tensors.
pub fn ccm_spec(o: &CcmOptions) -> Result<NetworkSpec> {
    if o.convs < 2 {
        return Err(Error::config("model.ccm.convs", "need at least two convolutions"));
    }
    let mut b = Builder::new("ccm", ArchKind::Ccm, 0);
    let mut x = b.add(ROI, LayerKind::Input(o.input), &[])?;
    for i in 1..=o.convs {
        let c = b.add(&format!("branch.conv{i}"), conv(o.filters, o.kernel, 0), &[&x])?;
        x = b.add(&format!("branch.bn{i}"), LayerKind::BatchNorm2d { eps: BATCHNORM_EPS }, &[&c])?;
        if i < o.convs {
            x = b.add(&format!("branch.relu{i}"), LayerKind::Relu, &[&x])?;
        }
        x = b.add(&format!("branch.drop{i}"), LayerKind::Dropout { p: o.dropout }, &[&x])?;
        if i == 1 {
            x = b.add("branch.pool1", pool2(), &[&x])?;
            if let Some((rows, cols)) = o.crop {
                let FeatShape::Map { h, w, .. } = b.shape(&x) else {
                    unreachable!("pool output is a map")
                };
                if rows > h || cols > w {
                    return Err(Error::Geometry(format!("crop {rows}x{cols} exceeds {h}x{w}")));
                }
                let kind = LayerKind::Crop {
                    top: (h - rows) / 2,
                    left: (w - cols) / 2,
                    rows,
                    cols,
                };
                x = b.add("branch.crop", kind, &[&x])?;
            }
        }
    }
    b.output(FEATURES, &x);
    let fshape = b.shape(&x);
    b.add(HEAD_T, LayerKind::Input(fshape), &[])?;
    b.add(HEAD_P, LayerKind::Input(fshape), &[])?;
    b.add("head.sim", LayerKind::Hadamard, &[HEAD_T, HEAD_P])?;
    b.add("head.flat", LayerKind::Flatten, &["head.sim"])?;
    b.add("head.fc1", LayerKind::FullyConnected { out: o.head_hidden }, &["head.flat"])?;
    b.add("head.relu", LayerKind::Relu, &["head.fc1"])?;
    b.add("head.fc2", LayerKind::FullyConnected { out: 2 }, &["head.relu"])?;
    b.output(MATCH_LOGITS, "head.fc2");
    b.spec.embedding_dim = fshape.numel();
    b.finish()
}

/// Options of the trunk-branch ensemble.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TbeOptions {
    pub input: FeatShape,
    /// Number of networks including the trunk; 1 means trunk only.
    pub branches: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub trunk_channels: usize,
    pub branch_channels: usize,
    pub embedding_dim: usize,
    /// Adds softmax classification heads for stage-wise training.
    pub num_classes: Option<usize>,
}

impl TbeOptions {
    pub fn desk() -> Self {
        Self {
            input: FeatShape::map(1, 48, 40),
            branches: 5,
            conv1: 8,
            conv2: 16,
            trunk_channels: 32,
            branch_channels: 16,
            embedding_dim: 64,
            num_classes: None,
        }
    }
}

/// Fixed grid patches `(top, left, rows, cols)` of an `h × w` map standing
/// in for landmark-centred patches: four quadrants, then the centre.
pub fn tbe_patches(h: usize, w: usize) -> Vec<(usize, usize, usize, usize)> {
    let (ph, pw) = (h / 2, w / 2);
    vec![(0, 0, ph, pw), (0, w - pw, ph, pw), (h - ph, 0, ph, pw), (h - ph, w - pw, ph, pw), ((h - ph) / 2, (w - pw) / 2, ph, pw)]
}

fn shared_stem(b: &mut Builder, input: FeatShape, c1: usize, c2: usize) -> Result<String> {
    b.add(ROI, LayerKind::Input(input), &[])?;
    b.add("shared.conv1", conv(c1, 5, 2), &[ROI])?;
    b.add("shared.relu1", LayerKind::Relu, &["shared.conv1"])?;
    b.add("shared.pool1", pool2(), &["shared.relu1"])?;
    b.add("shared.conv2", conv(c2, 3, 1), &["shared.pool1"])?;
    b.add("shared.relu2", LayerKind::Relu, &["shared.conv2"])
}

fn embedding_head(b: &mut Builder, concat: &str, dim: usize, num_classes: Option<usize>) -> Result<()> {
    b.add("embed.fc", LayerKind::FullyConnected { out: dim }, &[concat])?;
    b.add("embed.l2", LayerKind::L2Norm, &["embed.fc"])?;
    b.output(EMBEDDING, "embed.l2");
    if let Some(k) = num_classes {
        b.add("cls.fc", LayerKind::FullyConnected { out: k }, &["embed.fc"])?;
        b.output(LOGITS, "cls.fc");
    }
    Ok(())
}

fn aux_head(b: &mut Builder, name: &str, from: &str, num_classes: Option<usize>) -> Result<()> {
    if let Some(k) = num_classes {
        let node = format!("{name}_head.fc");
        b.add(&node, LayerKind::FullyConnected { out: k }, &[from])?;
        b.output(&format!("{name}_logits"), &node);
    }
    Ok(())
}

pub fn tbe_spec(o: &TbeOptions) -> Result<NetworkSpec> {
    if o.branches == 0 {
        return Err(Error::config("model.tbe.branches", "need at least the trunk"));
    }
    let mut b = Builder::new("tbe-lite", ArchKind::Tbe, o.embedding_dim);
    let stem = shared_stem(&mut b, o.input, o.conv1, o.conv2)?;
    b.spec.shared_prefix = b.spec.nodes.len();
    b.add("trunk.pool1", pool2(), &[&stem])?;
    b.add("trunk.conv1", conv(o.trunk_channels, 3, 1), &["trunk.pool1"])?;
    b.add("trunk.relu1", LayerKind::Relu, &["trunk.conv1"])?;
    b.add("trunk.pool2", pool2(), &["trunk.relu1"])?;
    b.add("trunk.flat", LayerKind::Flatten, &["trunk.pool2"])?;
    aux_head(&mut b, "trunk", "trunk.flat", o.num_classes)?;
    let FeatShape::Map { h, w, .. } = b.shape(&stem) else {
        unreachable!("stem output is a map")
    };
    let patches = tbe_patches(h, w);
    if o.branches - 1 > patches.len() {
        return Err(Error::config(
            "model.tbe.branches",
            format!("at most {} branches are available", patches.len() + 1),
        ));
    }
    let mut feats = vec!["trunk.flat".to_string()];
    for (k, &(top, left, rows, cols)) in patches.iter().take(o.branches - 1).enumerate() {
        let p = format!("branch{}", k + 1);
        b.add(&format!("{p}.crop"), LayerKind::Crop { top, left, rows, cols }, &[&stem])?;
        b.add(&format!("{p}.conv"), conv(o.branch_channels, 3, 1), &[&format!("{p}.crop")])?;
        b.add(&format!("{p}.relu"), LayerKind::Relu, &[&format!("{p}.conv")])?;
        b.add(&format!("{p}.pool"), pool2(), &[&format!("{p}.relu")])?;
        let f = b.add(&format!("{p}.flat"), LayerKind::Flatten, &[&format!("{p}.pool")])?;
        aux_head(&mut b, &p, &f, o.num_classes)?;
        feats.push(f);
    }
    let refs: Vec<&str> = feats.iter().map(String::as_str).collect();
    let concat = if refs.len() == 1 {
        refs[0].to_string()
    } else {
        b.add("merge.concat", LayerKind::Concat, &refs)?
    };
    embedding_head(&mut b, &concat, o.embedding_dim, o.num_classes)?;
    b.finish()
}

/// Options of the Haar-feature network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HaarnetOptions {
    pub input: FeatShape,
    pub conv1: usize,
    pub conv2: usize,
    /// Channel budgets of the four trunk inception-lite blocks.
    pub trunk: [usize; 4],
    pub branch_channels: usize,
    pub embedding_dim: usize,
    pub num_classes: Option<usize>,
}

impl HaarnetOptions {
    pub fn desk() -> Self {
        Self {
            input: FeatShape::map(1, 48, 40),
            conv1: 8,
            conv2: 16,
            trunk: [32, 32, 48, 48],
            branch_channels: 16,
            embedding_dim: 64,
            num_classes: None,
        }
    }
}

/// Haar branches: pattern, inception blocks per sub-branch.
pub const HAAR_BRANCHES: [(HaarPattern, usize); 3] = [
    (HaarPattern::TwoRectHorizontal, 2),
    (HaarPattern::TwoRectVertical, 2),
    (HaarPattern::FourRectChecker, 1),
];

pub fn haarnet_spec(o: &HaarnetOptions) -> Result<NetworkSpec> {
    let mut b = Builder::new("haarnet-lite", ArchKind::Haarnet, o.embedding_dim);
    let stem = shared_stem(&mut b, o.input, o.conv1, o.conv2)?;
    b.spec.shared_prefix = b.spec.nodes.len();
    let inc = |c: usize| InceptionCfg::even(c).map(LayerKind::InceptionLite);
    b.add("trunk.pool1", pool2(), &[&stem])?;
    b.add("trunk.inc1", inc(o.trunk[0])?, &["trunk.pool1"])?;
    b.add("trunk.inc2", inc(o.trunk[1])?, &["trunk.inc1"])?;
    b.add("trunk.pool2", pool2(), &["trunk.inc2"])?;
    b.add("trunk.inc3", inc(o.trunk[2])?, &["trunk.pool2"])?;
    b.add("trunk.inc4", inc(o.trunk[3])?, &["trunk.inc3"])?;
    b.add("trunk.pool3", pool2(), &["trunk.inc4"])?;
    b.add("trunk.flat", LayerKind::Flatten, &["trunk.pool3"])?;
    aux_head(&mut b, "trunk", "trunk.flat", o.num_classes)?;
    let FeatShape::Map { h, w, .. } = b.shape(&stem) else {
        unreachable!("stem output is a map")
    };
    let mut feats = vec!["trunk.flat".to_string()];
    for (k, (pattern, depth)) in HAAR_BRANCHES.iter().enumerate() {
        let p = format!("branch{}", k + 1);
        let regions = pattern.regions(h, w)?;
        let mut subs = Vec::new();
        for (s, &(top, left, rows, cols)) in regions.iter().enumerate() {
            let sp = format!("{p}.sub{}", s + 1);
            let mut x = b.add(&format!("{sp}.crop"), LayerKind::Crop { top, left, rows, cols }, &[&stem])?;
            x = b.add(&format!("{sp}.pool"), pool2(), &[&x])?;
            for d in 1..=*depth {
                x = b.add(&format!("{sp}.inc{d}"), inc(o.branch_channels)?, &[&x])?;
            }
            subs.push(x);
        }
        let refs: Vec<&str> = subs.iter().map(String::as_str).collect();
        b.add(&format!("{p}.merge"), LayerKind::SubtractMerge { pattern: *pattern }, &refs)?;
        b.add(&format!("{p}.pool"), pool2(), &[&format!("{p}.merge")])?;
        let f = b.add(&format!("{p}.flat"), LayerKind::Flatten, &[&format!("{p}.pool")])?;
        aux_head(&mut b, &p, &f, o.num_classes)?;
        feats.push(f);
    }
    let refs: Vec<&str> = feats.iter().map(String::as_str).collect();
    b.add("merge.concat", LayerKind::Concat, &refs)?;
    embedding_head(&mut b, "merge.concat", o.embedding_dim, o.num_classes)?;
    b.finish()
}

/// Options of the canonical-face reconstruction autoencoder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CfrOptions {
    pub input: FeatShape,
    pub channels: [usize; 3],
    pub kernel: usize,
    pub hidden: usize,
    pub embedding_dim: usize,
}

impl CfrOptions {
    pub fn desk() -> Self {
        Self {
            input: FeatShape::map(1, 48, 40),
            channels: [8, 16, 32],
            kernel: 3,
            hidden: 128,
            embedding_dim: 64,
        }
    }

    /// Full-scale stand-in: 64×64 grayscale, 256-dimensional embedding.
    pub fn full() -> Self {
        Self {
            input: FeatShape::map(1, 64, 64),
            channels: [32, 64, 128],
            kernel: 3,
            hidden: 128,
            embedding_dim: 256,
        }
    }
}

pub fn cfr_autoencoder_spec(o: &CfrOptions) -> Result<NetworkSpec> {
    let FeatShape::Map { c: in_c, .. } = o.input else {
        return Err(Error::Spec("autoencoder input must be a map".into()));
    };
    let pad = o.kernel / 2;
    let mut b = Builder::new("cfr-autoencoder", ArchKind::CfrAutoencoder, o.embedding_dim);
    let mut x = b.add(ROI, LayerKind::Input(o.input), &[])?;
    for (i, &c) in o.channels.iter().enumerate() {
        let n = i + 1;
        b.add(&format!("enc.conv{n}"), conv(c, o.kernel, pad), &[&x])?;
        b.add(&format!("enc.relu{n}"), LayerKind::Relu, &[&format!("enc.conv{n}")])?;
        x = b.add(&format!("enc.pool{n}"), pool2(), &[&format!("enc.relu{n}")])?;
    }
    let bottleneck = b.shape(&x);
    b.add("enc.flat", LayerKind::Flatten, &[&x])?;
    b.add("enc.fc1", LayerKind::FullyConnected { out: o.hidden }, &["enc.flat"])?;
    b.add("enc.relu4", LayerKind::Relu, &["enc.fc1"])?;
    b.add("enc.fc2", LayerKind::FullyConnected { out: o.embedding_dim }, &["enc.relu4"])?;
    b.output(EMBEDDING, "enc.fc2");
    b.add("dec.fc", LayerKind::FullyConnected { out: bottleneck.numel() }, &["enc.fc2"])?;
    b.add("dec.relu0", LayerKind::Relu, &["dec.fc"])?;
    x = b.add("dec.reshape", LayerKind::Reshape(bottleneck), &["dec.relu0"])?;
    for i in (0..3).rev() {
        let n = i + 1;
        let out = if i == 0 { in_c } else { o.channels[i - 1] };
        b.add(
            &format!("dec.unpool{n}"),
            LayerKind::MaxUnpool2d {
                pool: format!("enc.pool{n}"),
            },
            &[&x],
        )?;
        x = b.add(
            &format!("dec.deconv{n}"),
            LayerKind::Deconv2d {
                out_channels: out,
                kernel: o.kernel,
                stride: 1,
                pad,
            },
            &[&format!("dec.unpool{n}")],
        )?;
        if i > 0 {
            x = b.add(&format!("dec.relu{n}"), LayerKind::Relu, &[&x])?;
        }
    }
    if b.shape(&x) != o.input {
        return Err(Error::Geometry(format!(
            "decoder output {} does not match input {}",
            b.shape(&x),
            o.input
        )));
    }
    b.output(RECONSTRUCTION, &x);
    b.finish()
}

/// Pairwise match classifier over concatenated (still, video) embeddings.
pub fn cfr_classifier_spec(embedding_dim: usize, hidden: usize) -> Result<NetworkSpec> {
    let mut b = Builder::new("cfr-classifier", ArchKind::CfrClassifier, embedding_dim);
    b.add(PAIR, LayerKind::Input(FeatShape::Flat(2 * embedding_dim)), &[])?;
    b.add("cls.fc1", LayerKind::FullyConnected { out: hidden }, &[PAIR])?;
    b.add("cls.relu", LayerKind::Relu, &["cls.fc1"])?;
    b.add("cls.fc2", LayerKind::FullyConnected { out: 2 }, &["cls.relu"])?;
    b.output(MATCH_LOGITS, "cls.fc2");
    b.finish()
}

/// Mutable per-network training state: batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub bn: BTreeMap<String, RunningStats>,
}

/// A spec with its parameter tensors and training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: BTreeMap<String, Tensor>,
    pub state: TrainState,
    shapes: Vec<FeatShape>,
}

/// Per-call forward context: normalization mode, dropout randomness and the
/// batch statistics collected in train mode.
pub struct ForwardCtx {
    pub mode: NormMode,
    pub rng: ChaCha8Rng,
    pub bn_updates: Vec<(String, BatchStats)>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self {
            mode: NormMode::Eval,
            rng: ChaCha8Rng::seed_from_u64(0),
            bn_updates: Vec::new(),
        }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            mode: NormMode::Train,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bn_updates: Vec::new(),
        }
    }
}

/// Tape variables of a network's parameters.
#[derive(Clone, Debug)]
pub struct Binding {
    pub vars: BTreeMap<String, Var>,
}

impl Network {
    /// Validates `spec` and allocates its parameters (He-normal weights,
    /// zero biases, unit batch-norm scales) from `seed`.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let shapes = spec.infer_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, shape) in spec.param_shapes()? {
            let suffix = name.rsplit('.').next().unwrap_or("");
            params.insert(name.clone(), nn::init_tensor(suffix, &shape, &mut rng)?);
        }
        let bn = spec
            .nodes
            .iter()
            .zip(&shapes)
            .filter(|(n, _)| matches!(n.kind, LayerKind::BatchNorm2d { .. }))
            .map(|(n, s)| {
                let c = match *s {
                    FeatShape::Map { c, .. } => c,
                    FeatShape::Flat(n) => n,
                };
                (n.name.clone(), RunningStats::new(c))
            })
            .collect();
        Ok(Self {
            spec,
            params,
            state: TrainState { bn },
            shapes,
        })
    }

    /// Rebuilds a network from stored parameters, checking names and shapes.
    pub fn from_parts(spec: NetworkSpec, params: BTreeMap<String, Tensor>, state: TrainState) -> Result<Self> {
        let shapes = spec.infer_shapes()?;
        let expected = spec.param_shapes()?;
        if expected.len() != params.len() {
            return Err(Error::Corrupt(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in expected {
            let t = params
                .get(&name)
                .ok_or_else(|| Error::Corrupt(format!("missing parameter `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("network", t.shape(), &shape));
            }
        }
        Ok(Self {
            spec,
            params,
            state,
            shapes,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn output_shape(&self, output: &str) -> Result<FeatShape> {
        let node = self.spec.outputs.get(output).map(String::as_str).unwrap_or(output);
        let i = self
            .spec
            .nodes
            .iter()
            .position(|n| n.name == node)
            .ok_or_else(|| Error::Spec(format!("unknown output `{output}`")))?;
        Ok(self.shapes[i])
    }

    pub fn input_shape(&self, input: &str) -> Result<FeatShape> {
        self.output_shape(input)
    }

    /// Puts every parameter on the tape; those selected by `trainable`
    /// require gradients, the rest are constants.
    pub fn bind(&self, g: &mut Graph, trainable: &dyn Fn(&str) -> bool) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Binding { vars }
    }

    /// Parameter names whose node component is in `components`.
    pub fn params_of(&self, components: &[&str]) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for node in &self.spec.nodes {
            if components.contains(&node.component()) {
                let prefix = format!("{}.", node.param_group());
                out.extend(self.params.keys().filter(|k| k.starts_with(&prefix)).cloned());
            }
        }
        out
    }

    /// Distinct node components in spec order.
    pub fn components(&self) -> Vec<String> {
        let mut seen = Vec::<String>::new();
        for n in &self.spec.nodes {
            if !seen.iter().any(|s| s == n.component()) {
                seen.push(n.component().to_string());
            }
        }
        seen
    }

    /// Evaluates the nodes needed for `targets` given batched `inputs`.
    /// Returns the variables of the requested outputs (or node names).
    pub fn forward(
        &self,
        g: &mut Graph,
        bind: &Binding,
        inputs: &[(&str, Var)],
        targets: &[&str],
        ctx: &mut ForwardCtx,
    ) -> Result<Vec<Var>> {
        let idx = self.spec.index();
        let provided: BTreeMap<usize, Var> = inputs
            .iter()
            .map(|(name, v)| {
                idx.get(name)
                    .map(|&i| (i, *v))
                    .ok_or_else(|| Error::Spec(format!("unknown input `{name}`")))
            })
            .collect::<Result<_>>()?;
        let target_idx: Vec<usize> = targets
            .iter()
            .map(|t| {
                let node = self.spec.outputs.get(*t).map(String::as_str).unwrap_or(t);
                idx.get(node)
                    .copied()
                    .ok_or_else(|| Error::Spec(format!("unknown output `{t}`")))
            })
            .collect::<Result<_>>()?;
        let mut needed = vec![false; self.spec.nodes.len()];
        let mut stack = target_idx.clone();
        while let Some(i) = stack.pop() {
            if needed[i] {
                continue;
            }
            needed[i] = true;
            if provided.contains_key(&i) {
                continue;
            }
            let node = &self.spec.nodes[i];
            stack.extend(node.inputs.iter().map(|n| idx[n.as_str()]));
            if let LayerKind::MaxUnpool2d { pool } = &node.kind {
                stack.push(idx[pool.as_str()]);
            }
        }
        let batch = match provided.values().next() {
            Some(&v) => g.shape(v)[0],
            None => return Err(Error::Spec("forward needs at least one input".into())),
        };
        let mut vals: Vec<Option<Var>> = vec![None; self.spec.nodes.len()];
        let mut pools: BTreeMap<&str, PoolIndices> = BTreeMap::new();
        for (i, node) in self.spec.nodes.iter().enumerate() {
            if !needed[i] {
                continue;
            }
            if let Some(&v) = provided.get(&i) {
                let want = self.shapes[i].batched(batch);
                if g.shape(v) != want.as_slice() {
                    return Err(Error::Geometry(format!(
                        "input `{}` has shape {:?}, expected {:?}",
                        node.name,
                        g.shape(v),
                        want
                    )));
                }
                vals[i] = Some(v);
                continue;
            }
            let ins: Vec<Var> = node
                .inputs
                .iter()
                .map(|n| {
                    vals[idx[n.as_str()]].ok_or_else(|| Error::Spec(format!("input `{n}` of `{}` not provided", node.name)))
                })
                .collect::<Result<_>>()?;
            let p = |suffix: &str| -> Result<Var> {
                let key = format!("{}.{suffix}", node.param_group());
                bind.vars
                    .get(&key)
                    .copied()
                    .ok_or_else(|| Error::Spec(format!("parameter `{key}` is not bound")))
            };
            let out = match &node.kind {
                LayerKind::Input(_) => {
                    return Err(Error::Spec(format!("input `{}` not provided", node.name)));
                }
                LayerKind::Conv2d { kernel, stride, pad, .. } => {
                    g.conv2d(ins[0], p("weight")?, Some(p("bias")?), ConvGeom::new(*kernel, *stride, *pad))?
                }
                LayerKind::Deconv2d { kernel, stride, pad, .. } => {
                    g.deconv2d(ins[0], p("weight")?, Some(p("bias")?), ConvGeom::new(*kernel, *stride, *pad))?
                }
                LayerKind::MaxPool2d { window, stride } => {
                    let (v, pi) = g.maxpool2d(ins[0], ConvGeom::new(*window, *stride, 0))?;
                    pools.insert(&node.name, pi);
                    v
                }
                LayerKind::MaxUnpool2d { pool } => {
                    let pi = pools
                        .get(pool.as_str())
                        .ok_or_else(|| Error::Spec(format!("pool `{pool}` has not run")))?;
                    g.maxunpool2d(ins[0], pi)?
                }
                LayerKind::BatchNorm2d { eps } => {
                    let rs = &self.state.bn[&node.name];
                    let (v, stats) =
                        g.batchnorm2d(ins[0], p("gamma")?, p("beta")?, *eps, ctx.mode, Some((&rs.mean, &rs.var)))?;
                    if let Some(s) = stats {
                        ctx.bn_updates.push((node.name.clone(), s));
                    }
                    v
                }
                LayerKind::Dropout { p: rate } => nn::dropout(g, ins[0], *rate, ctx.mode, &mut ctx.rng)?,
                LayerKind::FullyConnected { .. } => nn::fully_connected(g, ins[0], p("weight")?, p("bias")?)?,
                LayerKind::Relu => g.relu(ins[0]),
                LayerKind::L2Norm => g.l2_normalize(ins[0])?,
                LayerKind::Softmax => g.softmax(ins[0])?,
                LayerKind::Concat => g.concat(&ins)?,
                LayerKind::SubtractMerge { pattern } => nn::haar_split_merge(g, &ins, *pattern)?,
                LayerKind::InceptionLite(_) => {
                    let names = InceptionCfg::PATH_NAMES;
                    let mut weights = Vec::with_capacity(4);
                    let mut biases = Vec::with_capacity(4);
                    for n in names {
                        weights.push(p(&format!("{n}.weight"))?);
                        biases.push(p(&format!("{n}.bias"))?);
                    }
                    let vars = InceptionVars {
                        weights: [weights[0], weights[1], weights[2], weights[3]],
                        biases: [biases[0], biases[1], biases[2], biases[3]],
                    };
                    nn::inception_lite(g, ins[0], &vars)?
                }
                LayerKind::Flatten => g.flatten(ins[0])?,
                LayerKind::Reshape(s) => g.reshape(ins[0], &s.batched(batch))?,
                LayerKind::Crop { top, left, rows, cols } => g.crop(ins[0], *top, *left, *rows, *cols)?,
                LayerKind::Hadamard => g.mul(ins[0], ins[1])?,
            };
            vals[i] = Some(out);
        }
        Ok(target_idx.iter().map(|&i| vals[i].expect("target evaluated")).collect())
    }

    /// Folds batch statistics gathered in train mode into the running ones.
    pub fn apply_bn_updates(&mut self, updates: Vec<(String, BatchStats)>) {
        for (node, stats) in updates {
            if let Some(rs) = self.state.bn.get_mut(&node) {
                rs.update(&stats, BATCHNORM_MOMENTUM);
            }
        }
    }

    /// Eval-mode evaluation of one output for a batch of inputs.
    pub fn eval_output(&self, input: &str, batch: &Tensor, output: &str) -> Result<Tensor> {
        let mut g = Graph::new();
        let bind = self.bind(&mut g, &|_| false);
        let x = g.constant(batch.clone());
        let out = self.forward(&mut g, &bind, &[(input, x)], &[output], &mut ForwardCtx::eval())?;
        Ok(g.value(out[0]).clone())
    }
}

fn as_batch(net: &Network, roi: &Tensor) -> Result<(Tensor, bool)> {
    let want = net.input_shape(ROI)?;
    let single = want.batched(1);
    if roi.shape() == &single[1..] {
        Ok((roi.reshape(&single)?, true))
    } else if roi.rank() == single.len() && roi.shape()[1..] == single[1..] {
        Ok((roi.clone(), false))
    } else {
        Err(Error::Geometry(format!(
            "ROI shape {:?} does not match network input {want}",
            roi.shape()
        )))
    }
}

fn unbatch(t: Tensor, single: bool) -> Result<Tensor> {
    if single {
        t.reshape(&t.shape()[1..])
    } else {
        Ok(t)
    }
}

/// Embedding of one ROI `[C, H, W]` (→ `[d]`) or a batch `[B, C, H, W]`
/// (→ `[B, d]`), in eval mode.
pub fn forward_embed(net: &Network, roi: &Tensor) -> Result<Tensor> {
    let (batch, single) = as_batch(net, roi)?;
    if !net.spec.outputs.contains_key(EMBEDDING) {
        return Err(Error::Spec(format!("{} has no embedding output", net.spec.name)));
    }
    unbatch(net.eval_output(ROI, &batch, EMBEDDING)?, single)
}

/// Embedding and reconstruction of an autoencoder network.
pub fn forward_reconstruct(net: &Network, roi: &Tensor) -> Result<(Tensor, Tensor)> {
    if !net.spec.outputs.contains_key(RECONSTRUCTION) {
        return Err(Error::Spec(format!("{} is not an autoencoder", net.spec.name)));
    }
    let (batch, single) = as_batch(net, roi)?;
    let mut g = Graph::new();
    let bind = net.bind(&mut g, &|_| false);
    let x = g.constant(batch);
    let outs = net.forward(&mut g, &bind, &[(ROI, x)], &[EMBEDDING, RECONSTRUCTION], &mut ForwardCtx::eval())?;
    Ok((
        unbatch(g.value(outs[0]).clone(), single)?,
        unbatch(g.value(outs[1]).clone(), single)?,
    ))
}

/// CCM branch feature maps of one ROI or a batch.
pub fn ccm_features(net: &Network, roi: &Tensor) -> Result<Tensor> {
    let (batch, single) = as_batch(net, roi)?;
    unbatch(net.eval_output(ROI, &batch, FEATURES)?, single)
}

/// Match / non-match probabilities of two branch feature maps: Hadamard
/// similarity, two fully-connected layers, softmax.
pub fn ccm_match(t_map: &Tensor, p_map: &Tensor, head: &Network) -> Result<(f64, f64)> {
    let want = head.input_shape(HEAD_T)?;
    let single = want.batched(1);
    if t_map.shape() != &single[1..] || p_map.shape() != &single[1..] {
        return Err(Error::shape("ccm_match", t_map.shape(), &single[1..]));
    }
    let mut g = Graph::new();
    let bind = head.bind(&mut g, &|_| false);
    let t = g.constant(t_map.reshape(&single)?);
    let p = g.constant(p_map.reshape(&single)?);
    let out = head.forward(&mut g, &bind, &[(HEAD_T, t), (HEAD_P, p)], &[MATCH_LOGITS], &mut ForwardCtx::eval())?;
    let probs = g.softmax(out[0])?;
    let v = g.value(probs).data();
    Ok((v[0], v[1]))
}

/// Table 1 complexity columns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ComplexityReport {
    /// Multiply-accumulates to match one probe ROI against one still ROI.
    pub n_operations: u64,
    pub n_parameters: u64,
    pub n_layers: u64,
}

impl std::ops::Add for ComplexityReport {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            n_operations: self.n_operations + o.n_operations,
            n_parameters: self.n_parameters + o.n_parameters,
            n_layers: self.n_layers + o.n_layers,
        }
    }
}

/// Cost of one layer node.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCost {
    pub name: String,
    pub kind: &'static str,
    pub params: u64,
    pub macs: u64,
    pub counted: bool,
}

/// Per-node parameter and multiply-accumulate costs. Aliased parameter
/// groups are charged to their first node only.
pub fn layer_costs(spec: &NetworkSpec) -> Result<Vec<LayerCost>> {
    let shapes = spec.infer_shapes()?;
    let idx = spec.index();
    let mut seen = BTreeSet::new();
    Ok(spec
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let ins: Vec<FeatShape> = n.inputs.iter().map(|s| shapes[idx[s.as_str()]]).collect();
            let params = if seen.insert(n.param_group().to_string()) {
                n.kind
                    .param_shapes(ins.first().copied())
                    .iter()
                    .map(|(_, s)| s.iter().product::<usize>() as u64)
                    .sum()
            } else {
                0
            };
            LayerCost {
                name: n.name.clone(),
                kind: n.kind.name(),
                params,
                macs: n.kind.macs(&ins, shapes[i]),
                counted: n.kind.counts_as_layer(),
            }
        })
        .collect())
}

/// Nodes evaluated to produce `output` when `stop` inputs are supplied.
fn path_nodes(spec: &NetworkSpec, output: &str) -> Result<BTreeSet<usize>> {
    let idx = spec.index();
    let node = spec.outputs.get(output).map(String::as_str).unwrap_or(output);
    let start = *idx
        .get(node)
        .ok_or_else(|| Error::Spec(format!("unknown output `{output}`")))?;
    let mut seen = BTreeSet::new();
    let mut stack = vec![start];
    while let Some(i) = stack.pop() {
        if seen.insert(i) {
            stack.extend(spec.nodes[i].inputs.iter().map(|n| idx[n.as_str()]));
        }
    }
    Ok(seen)
}

fn path_cost(spec: &NetworkSpec, costs: &[LayerCost], output: &str) -> Result<(u64, u64)> {
    let nodes = path_nodes(spec, output)?;
    let macs = nodes.iter().map(|&i| costs[i].macs).sum();
    let layers = nodes.iter().filter(|&&i| costs[i].counted).count() as u64;
    Ok((macs, layers))
}

/// Complexity of one probe-vs-still match for a spec:
/// * CCM: both ROIs through the branch, then the head;
/// * embedding networks: both ROIs to their embeddings plus a `d`-term
///   cosine;
/// * CFR autoencoder: both ROIs through the encoder;
/// * CFR classifier: one pass over the concatenated pair.
///
/// Parameters are counted over the whole spec.
pub fn spec_complexity(spec: &NetworkSpec) -> Result<ComplexityReport> {
    if spec.nodes.is_empty() {
        return Ok(ComplexityReport::default());
    }
    let costs = layer_costs(spec)?;
    let n_parameters = costs.iter().map(|c| c.params).sum();
    let (n_operations, n_layers) = match spec.arch {
        ArchKind::Ccm => {
            let (bm, bl) = path_cost(spec, &costs, FEATURES)?;
            let (hm, hl) = path_cost(spec, &costs, MATCH_LOGITS)?;
            (2 * bm + hm, bl + hl)
        }
        ArchKind::Tbe | ArchKind::Haarnet => {
            let (m, l) = path_cost(spec, &costs, EMBEDDING)?;
            (2 * m + spec.embedding_dim as u64, l)
        }
        ArchKind::CfrAutoencoder => {
            let (m, l) = path_cost(spec, &costs, EMBEDDING)?;
            (2 * m, l)
        }
        ArchKind::CfrClassifier => path_cost(spec, &costs, MATCH_LOGITS)?,
    };
    Ok(ComplexityReport {
        n_operations,
        n_parameters,
        n_layers,
    })
}

pub fn complexity_of(net: &Network) -> Result<ComplexityReport> {
    let r = spec_complexity(&net.spec)?;
    debug_assert_eq!(r.n_parameters, net.param_count() as u64);
    Ok(r)
}
