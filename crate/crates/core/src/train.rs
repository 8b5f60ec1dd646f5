//! SGD with momentum, stage plans with frozen subsets, the four training
//! schedules and run reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{
    self, ccm_spec, cfr_autoencoder_spec, cfr_classifier_spec, haarnet_spec, tbe_spec, ArchKind, Binding, CcmOptions,
    CfrOptions, ForwardCtx, HaarnetOptions, Network, NetworkSpec, TbeOptions, EMBEDDING, FEATURES, HEAD_P, HEAD_T, MATCH_LOGITS,
    PAIR, RECONSTRUCTION, ROI,
};
use crate::data::{
    augment_still, generate_synthetic_dataset, item_seed, make_tmask, mine_hard_triplets, sample_augment_ops,
    shuffled_indices, synthesize_blur, AugmentRanges, BlurKind, Dataset, DatasetConfig, Geometry, MiningPolicy, Sampling,
    TMask, TMaskGeometry,
};
use crate::error::{Error, Result};
use crate::eval::System;
use crate::graph::{Graph, Var};
use crate::losses::{self, LossConfig};
use crate::nn::FeatShape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", format!("must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", format!("must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(
                "train.weight_decay",
                format!("must be non-negative, got {}", self.weight_decay),
            ));
        }
        Ok(())
    }
}

/// `v ← m·v + g + wd·p; p ← p − lr·v`.
pub fn sgd_momentum_step(param: &mut Tensor, grad: &Tensor, velocity: &mut Tensor, cfg: &SgdConfig) -> Result<()> {
    if grad.shape() != param.shape() {
        return Err(Error::shape("sgd_momentum_step", param.shape(), grad.shape()));
    }
    if velocity.shape() != param.shape() {
        return Err(Error::shape("sgd_momentum_step", param.shape(), velocity.shape()));
    }
    let v = velocity.data_mut();
    let g = grad.data();
    let p = param.data_mut();
    for i in 0..p.len() {
        v[i] = cfg.momentum * v[i] + g[i] + cfg.weight_decay * p[i];
        p[i] -= cfg.lr * v[i];
    }
    Ok(())
}

/// Velocities of the parameters updated so far.
#[derive(Clone, Debug, Default)]
pub struct Optimizer {
    pub cfg: SgdConfig,
    pub velocity: BTreeMap<String, Tensor>,
}

impl Optimizer {
    pub fn new(cfg: SgdConfig) -> Self {
        Self {
            cfg,
            velocity: BTreeMap::new(),
        }
    }

    /// Updates exactly the parameters named in `grads`.
    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>, lr_scale: f64) -> Result<()> {
        let cfg = SgdConfig {
            lr: self.cfg.lr * lr_scale,
            ..self.cfg
        };
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Spec(format!("no parameter `{name}`")))?;
            let v = match self.velocity.get_mut(name) {
                Some(v) => v,
                None => self
                    .velocity
                    .entry(name.clone())
                    .or_insert(Tensor::zeros(p.shape())?),
            };
            sgd_momentum_step(p, g, v, &cfg)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LossKind {
    /// Summed cross-entropy of the named logits outputs.
    Softmax(Vec<String>),
    Triplet,
    /// Mean-distance-regularized triplet loss.
    MdrTl,
    /// Triplet + mean-distance + std-dev composite.
    Haarnet,
    CcmTriplet,
    TMaskMse,
    /// Cross-entropy of the pair classifier (index 0 = match).
    PairSoftmax,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Softmax(_) => "softmax",
            LossKind::Triplet => "triplet",
            LossKind::MdrTl => "mdr_tl",
            LossKind::Haarnet => "haarnet",
            LossKind::CcmTriplet => "ccm_triplet",
            LossKind::TMaskMse => "tmask_mse",
            LossKind::PairSoftmax => "pair_softmax",
        }
    }
}

/// Where a stage draws its training ROIs from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageData {
    /// Stills and videos of the target set.
    Target,
    /// Target set plus augmented stills (and blurred videos when enabled).
    Augmented,
    /// A generic synthetic set with disjoint identities.
    Generic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub name: String,
    /// Index of the network the stage optimizes.
    pub net: usize,
    /// Components (leading node-name segments) whose parameters update.
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
    pub loss: LossKind,
    pub epochs: usize,
    pub sampling: Sampling,
    pub data: StageData,
    pub lr_scale: f64,
    /// Ends the stage early once training rank-1 reaches 1.0.
    pub stop_at_rank1: bool,
}

impl Stage {
    /// A stage training `trainable`, freezing every other component.
    pub fn new(name: &str, net: &Network, net_index: usize, trainable: &[&str], loss: LossKind, epochs: usize) -> Self {
        let comps = net.components();
        Self {
            name: name.to_string(),
            net: net_index,
            trainable: trainable.iter().map(|s| s.to_string()).collect(),
            frozen: comps.into_iter().filter(|c| !trainable.contains(&c.as_str())).collect(),
            loss,
            epochs,
            sampling: Sampling::Uniform,
            data: StageData::Target,
            lr_scale: 1.0,
            stop_at_rank1: false,
        }
    }

    /// Trainable and frozen components must partition the network's
    /// components.
    pub fn validate(&self, nets: &[Network]) -> Result<()> {
        let net = nets
            .get(self.net)
            .ok_or_else(|| Error::Spec(format!("stage `{}` names network {}", self.name, self.net)))?;
        let comps: BTreeSet<String> = net.components().into_iter().collect();
        let t: BTreeSet<&String> = self.trainable.iter().collect();
        let f: BTreeSet<&String> = self.frozen.iter().collect();
        if let Some(c) = t.intersection(&f).next() {
            return Err(Error::Spec(format!("stage `{}`: `{c}` is both trainable and frozen", self.name)));
        }
        for c in t.iter().chain(f.iter()) {
            if !comps.contains(*c) {
                return Err(Error::Spec(format!("stage `{}`: unknown component `{c}`", self.name)));
            }
        }
        if let Some(c) = comps.iter().find(|c| !t.contains(c) && !f.contains(c)) {
            return Err(Error::Spec(format!("stage `{}`: component `{c}` is neither trainable nor frozen", self.name)));
        }
        if !(self.lr_scale > 0.0) {
            return Err(Error::Spec(format!("stage `{}`: lr scale must be positive", self.name)));
        }
        Ok(())
    }

    fn trainable_params(&self, net: &Network) -> BTreeSet<String> {
        let comps: Vec<&str> = self.trainable.iter().map(String::as_str).collect();
        net.params_of(&comps)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StagePlan {
    pub stages: Vec<Stage>,
}

impl StagePlan {
    pub fn validate(&self, nets: &[Network]) -> Result<()> {
        self.stages.iter().try_for_each(|s| s.validate(nets))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    /// Batch size L (samples, triplets or pairs per update).
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossConfig,
    /// Epochs for every stage, overriding the schedule defaults.
    pub epochs: Option<usize>,
    /// Per-stage epochs, overriding `epochs`.
    pub stage_epochs: Option<Vec<usize>>,
    pub augment_per_still: usize,
    pub augment: AugmentRanges,
    /// Triplets drawn per epoch when sampling uniformly.
    pub triplets_per_epoch: usize,
    pub mining: MiningPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sgd: SgdConfig::default(),
            batch_size: 16,
            seed: 7,
            loss: LossConfig::default(),
            epochs: None,
            stage_epochs: None,
            augment_per_still: 4,
            augment: AugmentRanges::default(),
            triplets_per_epoch: 64,
            mining: MiningPolicy::Hardest,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        self.loss.validate()?;
        if self.batch_size < 2 {
            return Err(Error::config("train.batch_size", "must be at least 2"));
        }
        if self.triplets_per_epoch == 0 {
            return Err(Error::config("train.triplets_per_epoch", "must be positive"));
        }
        Ok(())
    }
}

/// One epoch of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub stage: String,
    pub epoch: usize,
    pub loss: f64,
    /// Training accuracy (softmax stages) or rank-1 (matching stages).
    pub metric: Option<(&'static str, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    HaarnetStagewise,
    TbeStagewise,
    CcmPretrainFinetune,
    CfrAutoencoderThenClassifier,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::HaarnetStagewise => "haarnet_stagewise",
            ScheduleKind::TbeStagewise => "tbe_stagewise",
            ScheduleKind::CcmPretrainFinetune => "ccm_pretrain_finetune",
            ScheduleKind::CfrAutoencoderThenClassifier => "cfr_autoencoder_then_classifier",
        }
    }

    /// Schedule of an architecture name as used on the command line.
    pub fn for_arch(arch: &str) -> Option<Self> {
        match arch {
            "haarnet" => Some(ScheduleKind::HaarnetStagewise),
            "tbe" => Some(ScheduleKind::TbeStagewise),
            "ccm" => Some(ScheduleKind::CcmPretrainFinetune),
            "cfr" => Some(ScheduleKind::CfrAutoencoderThenClassifier),
            _ => None,
        }
    }

    /// Architectures of the networks the schedule expects, in order.
    pub fn archs(self) -> &'static [ArchKind] {
        match self {
            ScheduleKind::HaarnetStagewise => &[ArchKind::Haarnet],
            ScheduleKind::TbeStagewise => &[ArchKind::Tbe],
            ScheduleKind::CcmPretrainFinetune => &[ArchKind::Ccm],
            ScheduleKind::CfrAutoencoderThenClassifier => &[ArchKind::CfrAutoencoder, ArchKind::CfrClassifier],
        }
    }

    /// Default epochs per stage at desk scale.
    pub fn default_epochs(self) -> &'static [usize] {
        match self {
            ScheduleKind::HaarnetStagewise | ScheduleKind::TbeStagewise => &[20, 10, 10, 10],
            ScheduleKind::CcmPretrainFinetune => &[20, 180],
            ScheduleKind::CfrAutoencoderThenClassifier => &[20, 30],
        }
    }

    /// Matching system built from trained networks.
    pub fn system(self, nets: &[Network]) -> System<'_> {
        match self {
            ScheduleKind::CcmPretrainFinetune => System::Ccm(&nets[0]),
            ScheduleKind::CfrAutoencoderThenClassifier => System::Cfr {
                encoder: &nets[0],
                classifier: &nets[1],
            },
            _ => System::Embedding(&nets[0]),
        }
    }
}

/// Desk-scale networks for a schedule at the default 48×40 geometry.
pub fn default_networks(kind: ScheduleKind, n_classes: usize, seed: u64) -> Result<Vec<Network>> {
    networks_for(kind, Geometry::DESK, n_classes, seed)
}

/// Desk-scale specs for a schedule with inputs of `geometry`; embedding
/// networks get softmax heads over `n_classes` identities.
pub fn specs_for(kind: ScheduleKind, geometry: Geometry, n_classes: usize) -> Result<Vec<NetworkSpec>> {
    let input = FeatShape::map(geometry.channels, geometry.height, geometry.width);
    Ok(match kind {
        ScheduleKind::HaarnetStagewise => vec![haarnet_spec(&HaarnetOptions {
            input,
            num_classes: Some(n_classes),
            ..HaarnetOptions::desk()
        })?],
        ScheduleKind::TbeStagewise => vec![tbe_spec(&TbeOptions {
            input,
            num_classes: Some(n_classes),
            ..TbeOptions::desk()
        })?],
        ScheduleKind::CcmPretrainFinetune => vec![ccm_spec(&CcmOptions {
            input,
            ..CcmOptions::desk()
        })?],
        ScheduleKind::CfrAutoencoderThenClassifier => {
            let o = CfrOptions {
                input,
                ..CfrOptions::desk()
            };
            vec![cfr_autoencoder_spec(&o)?, cfr_classifier_spec(o.embedding_dim, 32)?]
        }
    })
}

/// Freshly initialized networks for [`specs_for`]; network `k` is seeded
/// with `seed ^ k`.
pub fn networks_for(kind: ScheduleKind, geometry: Geometry, n_classes: usize, seed: u64) -> Result<Vec<Network>> {
    specs_for(kind, geometry, n_classes)?
        .into_iter()
        .enumerate()
        .map(|(k, spec)| Network::new(spec, seed ^ k as u64))
        .collect()
}

fn epochs_for(kind: ScheduleKind, cfg: &TrainConfig) -> Result<Vec<usize>> {
    let defaults = kind.default_epochs();
    match (&cfg.stage_epochs, cfg.epochs) {
        (Some(list), _) if list.len() != defaults.len() => Err(Error::config(
            "train.stage_epochs",
            format!("{} needs {} values, got {}", kind.name(), defaults.len(), list.len()),
        )),
        (Some(list), _) => Ok(list.clone()),
        (None, Some(e)) => Ok(vec![e; defaults.len()]),
        (None, None) => Ok(defaults.to_vec()),
    }
}

/// The stage plan of `kind` over `nets`.
pub fn schedule_plan(kind: ScheduleKind, nets: &[Network], cfg: &TrainConfig) -> Result<StagePlan> {
    let archs: Vec<ArchKind> = nets.iter().map(|n| n.spec.arch).collect();
    if archs != kind.archs() {
        return Err(Error::Spec(format!(
            "schedule {} expects networks {:?}, got {:?}",
            kind.name(),
            kind.archs(),
            archs
        )));
    }
    let epochs = epochs_for(kind, cfg)?;
    let net = &nets[0];
    let comps = net.components();
    let has = |c: &str| comps.iter().any(|x| x == c);
    let stages = match kind {
        ScheduleKind::HaarnetStagewise | ScheduleKind::TbeStagewise => {
            if !net.spec.outputs.contains_key(arch::LOGITS) {
                return Err(Error::Spec(format!(
                    "{} needs a network built with classification heads",
                    kind.name()
                )));
            }
            let branches: Vec<&str> = comps
                .iter()
                .filter(|c| c.starts_with("branch") && !c.ends_with("_head"))
                .map(String::as_str)
                .collect();
            let heads: Vec<String> = branches.iter().map(|b| format!("{b}_head")).collect();
            let branch_logits: Vec<String> = branches.iter().map(|b| format!("{b}_logits")).collect();
            let mut branch_comps: Vec<&str> = branches.clone();
            branch_comps.extend(heads.iter().map(String::as_str));
            let all: Vec<&str> = comps.iter().map(String::as_str).collect();
            let embed_path: Vec<&str> = all
                .iter()
                .copied()
                .filter(|c| !c.ends_with("_head") && *c != "cls")
                .collect();
            let mut s1 = Stage::new(
                "trunk_softmax",
                net,
                0,
                &["shared", "trunk", "trunk_head"],
                LossKind::Softmax(vec![arch::TRUNK_LOGITS.into()]),
                epochs[0],
            );
            let mut s2 = Stage::new(
                "branch_softmax",
                net,
                0,
                &branch_comps,
                LossKind::Softmax(branch_logits),
                if branches.is_empty() { 0 } else { epochs[1] },
            );
            let mut s3 = Stage::new(
                "finetune_softmax",
                net,
                0,
                &all,
                LossKind::Softmax(vec![arch::LOGITS.into()]),
                epochs[2],
            );
            let triplet_loss = if kind == ScheduleKind::HaarnetStagewise {
                LossKind::Haarnet
            } else {
                LossKind::MdrTl
            };
            let mut s4 = Stage::new("triplet", net, 0, &embed_path, triplet_loss, epochs[3]);
            s4.sampling = Sampling::Hard;
            for s in [&mut s1, &mut s2, &mut s3, &mut s4] {
                s.data = StageData::Augmented;
            }
            vec![s1, s2, s3, s4]
        }
        ScheduleKind::CcmPretrainFinetune => {
            if !has("head") || !has("branch") {
                return Err(Error::Spec("ccm schedule needs branch and head components".into()));
            }
            let all: Vec<&str> = comps.iter().map(String::as_str).collect();
            let mut pre = Stage::new("pretrain", net, 0, &all, LossKind::CcmTriplet, epochs[0]);
            pre.data = StageData::Generic;
            let mut fine = Stage::new("finetune", net, 0, &all, LossKind::CcmTriplet, epochs[1]);
            fine.data = StageData::Augmented;
            fine.stop_at_rank1 = true;
            vec![pre, fine]
        }
        ScheduleKind::CfrAutoencoderThenClassifier => {
            let all: Vec<&str> = comps.iter().map(String::as_str).collect();
            let mut ae = Stage::new("autoencoder", net, 0, &all, LossKind::TMaskMse, epochs[0]);
            ae.data = StageData::Augmented;
            // the reconstruction loss sums over pixels; scale the step to a
            // per-pixel mean
            let area = net.input_shape(ROI)?.numel() as f64;
            ae.lr_scale = 1.0 / area;
            let cls_comps: Vec<String> = nets[1].components();
            let cls_refs: Vec<&str> = cls_comps.iter().map(String::as_str).collect();
            let mut cls = Stage::new("classifier", &nets[1], 1, &cls_refs, LossKind::PairSoftmax, epochs[1]);
            cls.data = StageData::Augmented;
            vec![ae, cls]
        }
    };
    let plan = StagePlan { stages };
    plan.validate(nets)?;
    Ok(plan)
}

/// ROIs with identity labels; `target` marks the canonical still of each
/// identity where relevant.
#[derive(Clone, Debug)]
pub struct Samples {
    pub rois: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub is_still: Vec<bool>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.rois.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rois.is_empty()
    }

    fn of(ds: &Dataset) -> Self {
        let (rois, labels) = ds.all_rois();
        let is_still = (0..rois.len()).map(|i| i < ds.len()).collect();
        Self {
            rois: rois.into_iter().cloned().collect(),
            labels,
            is_still,
        }
    }

    fn push(&mut self, roi: Tensor, label: usize) {
        self.rois.push(roi);
        self.labels.push(label);
        self.is_still.push(false);
    }

    fn batch(&self, idx: &[usize]) -> Result<Tensor> {
        let refs: Vec<&Tensor> = idx.iter().map(|&i| &self.rois[i]).collect();
        Tensor::stack(&refs)
    }
}

/// Everything a schedule trains from.
pub struct TrainingData<'a> {
    pub target: &'a Dataset,
    pub target_samples: Samples,
    pub augmented: Samples,
    pub generic: Option<Dataset>,
    pub tmask: TMask,
}

impl<'a> TrainingData<'a> {
    /// Builds the sample sets; `blur` adds a blurred copy of every video ROI.
    pub fn new(ds: &'a Dataset, cfg: &TrainConfig, blur: bool, generic: bool) -> Result<Self> {
        let target_samples = Samples::of(ds);
        let mut augmented = target_samples.clone();
        for ident in &ds.identities {
            let ops = sample_augment_ops(&cfg.augment, cfg.augment_per_still, item_seed(cfg.seed, ident.id as u64));
            for roi in augment_still(&ident.still, &ops)? {
                augmented.push(roi, ident.id);
            }
        }
        if blur {
            let mut rng = ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, u64::MAX >> 1));
            for (id, k) in ds.video_refs() {
                let kind = if (id + k) % 2 == 0 {
                    BlurKind::OutOfFocus { radius: 1.5 }
                } else {
                    BlurKind::Motion {
                        length: 5,
                        angle_deg: rng.random_range(0.0..180.0),
                    }
                };
                augmented.push(synthesize_blur(ds.video(id, k), kind)?, id);
            }
        }
        let generic = if generic {
            Some(generate_synthetic_dataset(&DatasetConfig {
                seed: item_seed(ds.seed, 0x6E6E),
                n_identities: ds.len().max(2),
                videos_per_identity: ds.identities[0].videos.len(),
                geometry: ds.geometry,
                ..DatasetConfig::default()
            })?)
        } else {
            None
        };
        let tmask = make_tmask(ds.geometry.height, ds.geometry.width, &TMaskGeometry::default(), &cfg.loss)?;
        Ok(Self {
            target: ds,
            target_samples,
            augmented,
            generic,
            tmask,
        })
    }
}

/// Splits `order` into batches of `l`, folding a trailing singleton into
/// the previous batch (batch norm needs two samples).
fn batches(order: &[usize], l: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(l).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    out
}

struct StepCtx<'a> {
    trainable: &'a BTreeSet<String>,
    lr_scale: f64,
    loss_name: &'static str,
}

/// One optimizer update: builds the loss on a fresh tape, aborts on a
/// non-finite value, then steps trainable parameters and folds batch-norm
/// statistics. Returns the loss and whatever `build` reports.
fn update<T>(
    net: &mut Network,
    opt: &mut Optimizer,
    ctx: &StepCtx,
    iteration: usize,
    seed: u64,
    build: impl FnOnce(&mut Graph, &Network, &Binding, &mut ForwardCtx) -> Result<(Var, T)>,
) -> Result<(f64, T)> {
    let mut g = Graph::new();
    let bind = net.bind(&mut g, &|n| ctx.trainable.contains(n));
    let mut fctx = ForwardCtx::train(seed);
    let non_finite = || Error::NonFiniteLoss {
        iteration,
        loss: ctx.loss_name.to_string(),
    };
    let (loss, extra) = build(&mut g, net, &bind, &mut fctx).map_err(|e| match e {
        Error::NonFinite { .. } => non_finite(),
        other => other,
    })?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration,
            loss: ctx.loss_name.to_string(),
        });
    }
    let grads = g.backward(loss)?;
    let mut gmap = BTreeMap::new();
    for name in ctx.trainable {
        let t = match grads.get(bind.vars[name]) {
            Some(t) => t.clone(),
            None => Tensor::zeros(net.params[name].shape())?,
        };
        gmap.insert(name.clone(), t);
    }
    opt.step(&mut net.params, &gmap, ctx.lr_scale)?;
    net.apply_bn_updates(fctx.bn_updates);
    Ok((value, extra))
}

fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let k = t.shape()[1];
    t.data().chunks(k).map(crate::eval::argmax_lowest).collect()
}

/// Eval-mode embeddings `[n, d]` of every sample.
fn embed_all(net: &Network, samples: &Samples) -> Result<Tensor> {
    let mut rows = Vec::new();
    let order: Vec<usize> = (0..samples.len()).collect();
    let mut d = 0;
    for chunk in order.chunks(32) {
        let e = net.eval_output(ROI, &samples.batch(chunk)?, EMBEDDING)?;
        d = e.shape()[1];
        rows.extend_from_slice(e.data());
    }
    Tensor::new(&[samples.len(), d], rows)
}

/// Uniform random `(anchor, positive, negative)` sample triplets.
fn uniform_triplets(labels: &[usize], count: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize, usize)> {
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_id.entry(l).or_default().push(i);
    }
    let ids: Vec<usize> = by_id.keys().copied().filter(|k| by_id[k].len() >= 2).collect();
    if ids.is_empty() || by_id.len() < 2 {
        return Vec::new();
    }
    (0..count)
        .map(|_| {
            let id = ids[rng.random_range(0..ids.len())];
            let members = &by_id[&id];
            let a = members[rng.random_range(0..members.len())];
            let mut p = members[rng.random_range(0..members.len() - 1)];
            if p >= a {
                p = members[(members.iter().position(|&m| m == p).expect("member") + 1).min(members.len() - 1)];
            }
            let p = if p == a { members[(members.iter().position(|&m| m == a).expect("member") + 1) % members.len()] } else { p };
            let others: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != id).collect();
            (a, p, others[rng.random_range(0..others.len())])
        })
        .collect()
}

fn seed_for(cfg: &TrainConfig, stage: usize, epoch: usize) -> u64 {
    item_seed(item_seed(cfg.seed, stage as u64), epoch as u64)
}

/// Runs one stage for its configured epochs; returns one trace row per
/// epoch. Parameters outside the trainable components are never touched.
pub fn run_stage(
    nets: &mut [Network],
    data: &TrainingData,
    stage: &Stage,
    cfg: &TrainConfig,
    stage_index: usize,
    system: Option<ScheduleKind>,
) -> Result<Vec<TraceRow>> {
    stage.validate(nets)?;
    cfg.validate()?;
    let mut trace = Vec::new();
    if stage.epochs == 0 {
        return Ok(trace);
    }
    let trainable = stage.trainable_params(&nets[stage.net]);
    let mut opt = Optimizer::new(cfg.sgd);
    let ctx = StepCtx {
        trainable: &trainable,
        lr_scale: stage.lr_scale,
        loss_name: stage.loss.name(),
    };
    let samples = match stage.data {
        StageData::Target => &data.target_samples,
        StageData::Augmented => &data.augmented,
        StageData::Generic => &data.target_samples,
    };
    let mut iteration = 0;
    for epoch in 1..=stage.epochs {
        let seed = seed_for(cfg, stage_index, epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut total = 0.0;
        let mut count = 0usize;
        let mut correct = 0usize;
        let mut seen = 0usize;
        match &stage.loss {
            LossKind::Softmax(outputs) => {
                let net = &mut nets[stage.net];
                let order = shuffled_indices(samples.len(), &mut rng);
                for b in batches(&order, cfg.batch_size) {
                    iteration += 1;
                    let x = samples.batch(&b)?;
                    let labels: Vec<usize> = b.iter().map(|&i| samples.labels[i]).collect();
                    let outs: Vec<&str> = outputs.iter().map(String::as_str).collect();
                    let (loss, hits) = update(net, &mut opt, &ctx, iteration, rng.random(), |g, n, bind, fctx| {
                        let xv = g.constant(x);
                        let ys = n.forward(g, bind, &[(ROI, xv)], &outs, fctx)?;
                        let terms = ys
                            .iter()
                            .map(|&y| g.softmax_cross_entropy(y, &labels))
                            .collect::<Result<Vec<_>>>()?;
                        let loss = g.lin_comb(&terms, &vec![1.0; terms.len()])?;
                        let pred = argmax_rows(g.value(ys[0]));
                        Ok((loss, pred.iter().zip(&labels).filter(|(p, l)| p == l).count()))
                    })?;
                    total += loss;
                    count += 1;
                    correct += hits;
                    seen += b.len();
                }
            }
            LossKind::Triplet | LossKind::MdrTl | LossKind::Haarnet => {
                let net = &mut nets[stage.net];
                let mut triplets = match stage.sampling {
                    Sampling::Hard => {
                        let emb = embed_all(net, samples)?;
                        mine_hard_triplets(&emb, &samples.labels, cfg.mining, cfg.loss.alpha_triplet)
                    }
                    Sampling::Uniform => uniform_triplets(&samples.labels, cfg.triplets_per_epoch, &mut rng),
                };
                if triplets.is_empty() {
                    return Err(Error::Degenerate {
                        op: "run_stage",
                        reason: "no triplets could be formed".into(),
                    });
                }
                triplets.shuffle(&mut rng);
                for chunk in triplets.chunks(cfg.batch_size) {
                    iteration += 1;
                    let mut uniq: Vec<usize> = chunk.iter().flat_map(|&(a, p, n)| [a, p, n]).collect();
                    uniq.sort_unstable();
                    uniq.dedup();
                    let local = |i: usize| uniq.binary_search(&i).expect("member");
                    let lt: Vec<(usize, usize, usize)> = chunk.iter().map(|&(a, p, n)| (local(a), local(p), local(n))).collect();
                    let labels: Vec<usize> = uniq.iter().map(|&i| samples.labels[i]).collect();
                    let x = samples.batch(&uniq)?;
                    let kind = stage.loss.clone();
                    let (loss, ()) = update(net, &mut opt, &ctx, iteration, rng.random(), |g, n, bind, fctx| {
                        let xv = g.constant(x);
                        let e = n.forward(g, bind, &[(ROI, xv)], &[EMBEDDING], fctx)?[0];
                        let loss = match kind {
                            LossKind::Triplet => losses::triplet_term(g, e, &lt, &cfg.loss)?,
                            LossKind::MdrTl => losses::mdr_tl_term(g, e, &labels, &lt, &cfg.loss)?,
                            _ => losses::haarnet_term(g, e, &labels, &lt, &cfg.loss)?,
                        };
                        Ok((loss, ()))
                    })?;
                    total += loss;
                    count += 1;
                }
            }
            LossKind::CcmTriplet => {
                let pool = match stage.data {
                    StageData::Generic => {
                        let generic = data
                            .generic
                            .as_ref()
                            .ok_or_else(|| Error::Spec("generic pre-training set not prepared".into()))?;
                        Samples::of(generic)
                    }
                    _ => samples.clone(),
                };
                let still_of: BTreeMap<usize, usize> = (0..pool.len())
                    .filter(|&i| pool.is_still[i])
                    .map(|i| (pool.labels[i], i))
                    .collect();
                let others: Vec<usize> = (0..pool.len()).filter(|&i| !pool.is_still[i]).collect();
                let ids: Vec<usize> = still_of.keys().copied().collect();
                let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
                for &i in &others {
                    by_id.entry(pool.labels[i]).or_default().push(i);
                }
                let net = &mut nets[stage.net];
                let n_batches = cfg.triplets_per_epoch.div_ceil(cfg.batch_size);
                for _ in 0..n_batches {
                    iteration += 1;
                    let l = cfg.batch_size;
                    let mut idx = Vec::with_capacity(3 * l);
                    let mut negs = Vec::with_capacity(l);
                    let mut poss = Vec::with_capacity(l);
                    for _ in 0..l {
                        let t = ids[rng.random_range(0..ids.len())];
                        let mut nid = ids[rng.random_range(0..ids.len() - 1)];
                        if nid >= t {
                            nid = ids[ids.iter().position(|&x| x == nid).expect("id") + 1];
                        }
                        let pp = &by_id[&t];
                        let nn = &by_id[&nid];
                        idx.push(still_of[&t]);
                        poss.push(pp[rng.random_range(0..pp.len())]);
                        negs.push(nn[rng.random_range(0..nn.len())]);
                    }
                    idx.extend(poss);
                    idx.extend(negs);
                    let x = pool.batch(&idx)?;
                    let (loss, ()) = update(net, &mut opt, &ctx, iteration, rng.random(), |g, n, bind, fctx| {
                        let xv = g.constant(x);
                        let f = n.forward(g, bind, &[(ROI, xv)], &[FEATURES], fctx)?[0];
                        let (t, p, q): (Vec<usize>, Vec<usize>, Vec<usize>) =
                            ((0..l).collect(), (l..2 * l).collect(), (2 * l..3 * l).collect());
                        let left: Vec<usize> = [t.clone(), t, q.clone()].concat();
                        let right: Vec<usize> = [p.clone(), q, p].concat();
                        let tv = g.gather_rows(f, &left)?;
                        let pv = g.gather_rows(f, &right)?;
                        let logits = n.forward(g, bind, &[(HEAD_T, tv), (HEAD_P, pv)], &[MATCH_LOGITS], fctx)?[0];
                        let probs = g.softmax(logits)?;
                        let s = g.column(probs, 0)?;
                        let s_tp = g.slice_rows(s, 0, l)?;
                        let s_tn = g.slice_rows(s, l, l)?;
                        let s_np = g.slice_rows(s, 2 * l, l)?;
                        Ok((losses::ccm_triplet_term(g, s_tp, s_tn, s_np)?, ()))
                    })?;
                    total += loss;
                    count += 1;
                }
            }
            LossKind::TMaskMse => {
                let net = &mut nets[stage.net];
                let order = shuffled_indices(samples.len(), &mut rng);
                for b in batches(&order, cfg.batch_size) {
                    iteration += 1;
                    let x = samples.batch(&b)?;
                    let stills: Vec<&Tensor> = b.iter().map(|&i| data.target.still(samples.labels[i])).collect();
                    let target = Tensor::stack(&stills)?;
                    let inv = 1.0 / b.len() as f64;
                    let (loss, ()) = update(net, &mut opt, &ctx, iteration, rng.random(), |g, n, bind, fctx| {
                        let xv = g.constant(x);
                        let r = n.forward(g, bind, &[(ROI, xv)], &[RECONSTRUCTION], fctx)?[0];
                        let tv = g.constant(target);
                        let sse = losses::tmask_mse_term(g, r, tv, &data.tmask)?;
                        Ok((g.scale(sse, inv), ()))
                    })?;
                    total += loss;
                    count += 1;
                }
            }
            LossKind::PairSoftmax => {
                if stage.net == 0 {
                    return Err(Error::Spec("pair classifier stage needs an encoder network".into()));
                }
                let emb = embed_all(&nets[0], samples)?;
                let d = emb.shape()[1];
                let row = |i: usize| &emb.data()[i * d..(i + 1) * d];
                let still_of: BTreeMap<usize, usize> = (0..samples.len())
                    .filter(|&i| samples.is_still[i])
                    .map(|i| (samples.labels[i], i))
                    .collect();
                let ids: Vec<usize> = still_of.keys().copied().collect();
                let probes: Vec<usize> = (0..samples.len()).filter(|&i| !samples.is_still[i]).collect();
                let mut pairs: Vec<(usize, usize, usize)> = Vec::new();
                for &p in &probes {
                    let id = samples.labels[p];
                    pairs.push((still_of[&id], p, 0));
                    let mut other = ids[rng.random_range(0..ids.len() - 1)];
                    if other >= id {
                        other = ids[ids.iter().position(|&x| x == other).expect("id") + 1];
                    }
                    pairs.push((still_of[&other], p, 1));
                }
                pairs.shuffle(&mut rng);
                let net = &mut nets[stage.net];
                for chunk in pairs.chunks(cfg.batch_size) {
                    iteration += 1;
                    let mut x = Vec::with_capacity(chunk.len() * 2 * d);
                    for &(s, p, _) in chunk {
                        x.extend_from_slice(row(s));
                        x.extend_from_slice(row(p));
                    }
                    let x = Tensor::new(&[chunk.len(), 2 * d], x)?;
                    let labels: Vec<usize> = chunk.iter().map(|c| c.2).collect();
                    let (loss, hits) = update(net, &mut opt, &ctx, iteration, rng.random(), |g, n, bind, fctx| {
                        let xv = g.constant(x);
                        let y = n.forward(g, bind, &[(PAIR, xv)], &[MATCH_LOGITS], fctx)?[0];
                        let pred = argmax_rows(g.value(y));
                        let hits = pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
                        Ok((g.softmax_cross_entropy(y, &labels)?, hits))
                    })?;
                    total += loss;
                    count += 1;
                    correct += hits;
                    seen += chunk.len();
                }
            }
        }
        let metric = match &stage.loss {
            LossKind::Softmax(_) | LossKind::PairSoftmax => Some(("train_accuracy", correct as f64 / seen.max(1) as f64)),
            LossKind::CcmTriplet => match system {
                Some(kind) => Some(("train_rank1", kind.system(nets).evaluate(data.target, 1, 0)?.rank1_all())),
                None => None,
            },
            _ => None,
        };
        trace.push(TraceRow {
            stage: stage.name.clone(),
            epoch,
            loss: total / count.max(1) as f64,
            metric,
        });
        if stage.stop_at_rank1 && metric.is_some_and(|(_, r)| r == 1.0) {
            break;
        }
    }
    Ok(trace)
}

/// Outcome of a full schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub schedule: ScheduleKind,
    pub trace: Vec<TraceRow>,
    /// `(stage, epochs actually run)`.
    pub epochs_run: Vec<(String, usize)>,
    /// Rank-1 of the target videos against the target stills after training.
    pub train_rank1: f64,
}

/// Runs every stage of `kind` in order on `nets`.
pub fn run_schedule(kind: ScheduleKind, nets: &mut [Network], ds: &Dataset, cfg: &TrainConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let plan = schedule_plan(kind, nets, cfg)?;
    let data = TrainingData::new(
        ds,
        cfg,
        kind == ScheduleKind::TbeStagewise,
        kind == ScheduleKind::CcmPretrainFinetune,
    )?;
    let mut trace = Vec::new();
    let mut epochs_run = Vec::new();
    for (i, stage) in plan.stages.iter().enumerate() {
        let rows = run_stage(nets, &data, stage, cfg, i, Some(kind))?;
        epochs_run.push((stage.name.clone(), rows.len()));
        trace.extend(rows);
    }
    let train_rank1 = kind.system(nets).evaluate(ds, 1, 0)?.rank1_all();
    Ok(RunSummary {
        schedule: kind,
        trace,
        epochs_run,
        train_rank1,
    })
}

/// Writes `{stem}.report.txt` (key: value lines) and `{stem}.trace.csv`.
pub fn write_run_report(dir: &Path, stem: &str, fields: &[(String, String)], trace: &[TraceRow]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut text = String::new();
    for (k, v) in fields {
        let _ = writeln!(text, "{k}: {v}");
    }
    let _ = writeln!(text, "trace: {stem}.trace.csv");
    std::fs::write(dir.join(format!("{stem}.report.txt")), text)?;
    let mut w = csv::Writer::from_path(dir.join(format!("{stem}.trace.csv"))).map_err(|e| Error::Corrupt(e.to_string()))?;
    w.write_record(["stage", "epoch", "loss", "metric", "value"])
        .map_err(|e| Error::Corrupt(e.to_string()))?;
    for r in trace {
        let (m, v) = match r.metric {
            Some((m, v)) => (m.to_string(), v.to_string()),
            None => (String::new(), String::new()),
        };
        w.write_record([r.stage.clone(), r.epoch.to_string(), r.loss.to_string(), m, v])
            .map_err(|e| Error::Corrupt(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetConfig;

    fn small_ds(ids: usize, videos: usize) -> Dataset {
        generate_synthetic_dataset(&DatasetConfig {
            n_identities: ids,
            videos_per_identity: videos,
            ..DatasetConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn sgd_reductions_and_recursion() {
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let mut p = Tensor::vector(&[1.0, -2.0]).unwrap();
        let g = Tensor::vector(&[0.5, 0.25]).unwrap();
        let mut v = Tensor::zeros(&[2]).unwrap();
        sgd_momentum_step(&mut p, &g, &mut v, &cfg).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.05, -2.0 - 0.025]);

        let mut p = Tensor::vector(&[3.0]).unwrap();
        let mut v = Tensor::zeros(&[1]).unwrap();
        sgd_momentum_step(&mut p, &Tensor::zeros(&[1]).unwrap(), &mut v, &SgdConfig { weight_decay: 0.0, ..cfg }).unwrap();
        assert_eq!(p.data(), &[3.0]);

        // f(x) = x², g = 2x, with momentum and weight decay
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.01,
        };
        let mut x = Tensor::vector(&[1.0]).unwrap();
        let mut v = Tensor::zeros(&[1]).unwrap();
        let (mut hx, mut hv) = (1.0f64, 0.0f64);
        for _ in 0..2 {
            let g = Tensor::vector(&[2.0 * x.data()[0]]).unwrap();
            hv = 0.9 * hv + 2.0 * hx + 0.01 * hx;
            hx -= 0.1 * hv;
            sgd_momentum_step(&mut x, &g, &mut v, &cfg).unwrap();
        }
        assert!((x.data()[0] - hx).abs() < 1e-12 && (v.data()[0] - hv).abs() < 1e-12);
        // 1.0 → v1 = 2.01, x1 = 0.799; v2 = 0.9·2.01 + 1.598 + 0.00799, x2 = 0.799 − 0.1·v2
        assert!((hx - (0.799 - 0.1 * (1.809 + 1.598 + 0.00799))).abs() < 1e-12);
        assert!(sgd_momentum_step(&mut x, &Tensor::zeros(&[2]).unwrap(), &mut v, &cfg).is_err());
    }

    #[test]
    fn config_validation_names_keys() {
        let bad = TrainConfig {
            sgd: SgdConfig {
                momentum: 1.0,
                ..SgdConfig::default()
            },
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { key, .. }) if key == "train.momentum"));
        let bad = TrainConfig {
            sgd: SgdConfig {
                lr: 0.0,
                ..SgdConfig::default()
            },
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { key, .. }) if key == "train.lr"));
    }

    #[test]
    fn stage_partition_is_validated() {
        let nets = default_networks(ScheduleKind::HaarnetStagewise, 3, 1).unwrap();
        let mut s = Stage::new("s", &nets[0], 0, &["trunk"], LossKind::Triplet, 1);
        assert!(s.validate(&nets).is_ok());
        s.frozen.push("trunk".into());
        assert!(s.validate(&nets).is_err());
        let mut s = Stage::new("s", &nets[0], 0, &["trunk"], LossKind::Triplet, 1);
        s.frozen.retain(|c| c != "shared");
        assert!(s.validate(&nets).is_err());
        let s = Stage::new("s", &nets[0], 0, &["nope"], LossKind::Triplet, 1);
        assert!(s.validate(&nets).is_err());
        let ccm = default_networks(ScheduleKind::CcmPretrainFinetune, 3, 1).unwrap();
        assert!(schedule_plan(ScheduleKind::HaarnetStagewise, &ccm, &TrainConfig::default()).is_err());
    }

    #[test]
    fn zero_epoch_schedules_are_identity() {
        let ds = small_ds(3, 2);
        let cfg = TrainConfig {
            epochs: Some(0),
            ..TrainConfig::default()
        };
        for kind in [ScheduleKind::HaarnetStagewise, ScheduleKind::CfrAutoencoderThenClassifier] {
            let mut nets = default_networks(kind, ds.len(), 3).unwrap();
            let before = nets.clone();
            let summary = run_schedule(kind, &mut nets, &ds, &cfg).unwrap();
            assert_eq!(nets, before);
            assert!(summary.trace.is_empty());
        }
    }

    #[test]
    fn frozen_parameters_are_bit_identical() {
        let ds = small_ds(3, 2);
        let cfg = TrainConfig {
            augment_per_still: 1,
            ..TrainConfig::default()
        };
        let mut nets = default_networks(ScheduleKind::TbeStagewise, ds.len(), 5).unwrap();
        let data = TrainingData::new(&ds, &cfg, true, false).unwrap();
        let plan = schedule_plan(
            ScheduleKind::TbeStagewise,
            &nets,
            &TrainConfig {
                epochs: Some(2),
                ..cfg.clone()
            },
        )
        .unwrap();
        let stage = &plan.stages[1];
        let before = nets[0].clone();
        run_stage(&mut nets, &data, stage, &cfg, 1, None).unwrap();
        let trainable = stage.trainable_params(&before);
        let mut changed = 0;
        for (k, v) in &before.params {
            if trainable.contains(k) {
                changed += usize::from(nets[0].params[k] != *v);
            } else {
                assert_eq!(nets[0].params[k], *v, "{k}");
            }
        }
        assert!(changed > 0);
        assert!(trainable.iter().all(|k| k.starts_with("branch")));
    }

    #[test]
    fn training_is_deterministic() {
        let ds = small_ds(3, 2);
        let cfg = TrainConfig {
            stage_epochs: Some(vec![1, 1]),
            triplets_per_epoch: 8,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let run = || {
            let mut nets = default_networks(ScheduleKind::CcmPretrainFinetune, ds.len(), 2).unwrap();
            let s = run_schedule(ScheduleKind::CcmPretrainFinetune, &mut nets, &ds, &cfg).unwrap();
            (nets, s)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert_eq!(sa.trace.len(), 2);
    }

    #[test]
    fn softmax_stage_overfits_separable_set() {
        let ds = small_ds(8, 4);
        let cfg = TrainConfig {
            augment_per_still: 0,
            ..TrainConfig::default()
        };
        let mut nets = default_networks(ScheduleKind::HaarnetStagewise, ds.len(), 1).unwrap();
        let data = TrainingData::new(&ds, &cfg, false, false).unwrap();
        let mut stage = Stage::new(
            "trunk_softmax",
            &nets[0],
            0,
            &["shared", "trunk", "trunk_head"],
            LossKind::Softmax(vec![arch::TRUNK_LOGITS.into()]),
            50,
        );
        stage.data = StageData::Target;
        let trace = run_stage(&mut nets, &data, &stage, &cfg, 0, None).unwrap();
        let best = trace.iter().filter_map(|r| r.metric).map(|m| m.1).fold(0.0, f64::max);
        assert_eq!(best, 1.0, "{trace:?}");
    }

    #[test]
    fn nan_loss_aborts() {
        let ds = small_ds(2, 2);
        let cfg = TrainConfig::default();
        let mut nets = default_networks(ScheduleKind::HaarnetStagewise, ds.len(), 1).unwrap();
        nets[0]
            .params
            .get_mut("trunk_head.fc.weight")
            .unwrap()
            .data_mut()[0] = f64::NAN;
        let data = TrainingData::new(&ds, &cfg, false, false).unwrap();
        let stage = Stage::new(
            "trunk_softmax",
            &nets[0],
            0,
            &["trunk_head"],
            LossKind::Softmax(vec![arch::TRUNK_LOGITS.into()]),
            1,
        );
        let err = run_stage(&mut nets, &data, &stage, &cfg, 0, None).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { iteration: 1, .. }), "{err:?}");
    }

    #[test]
    fn pair_classifier_separates_identical_from_orthogonal() {
        // 16 identical and 16 orthogonal unit-vector pairs, full batch
        let d = 16;
        let mut net = Network::new(cfr_classifier_spec(d, 32).unwrap(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut x = Vec::new();
        let mut labels = Vec::new();
        for k in 0..32 {
            let i = rng.random_range(0..d);
            let mut a = vec![0.0; d];
            a[i] = 1.0;
            let mut b = vec![0.0; d];
            b[if k % 2 == 0 { i } else { (i + 1 + rng.random_range(0..d - 1)) % d }] = 1.0;
            x.extend(a);
            x.extend(b);
            labels.push(k % 2);
        }
        let x = Tensor::new(&[32, 2 * d], x).unwrap();
        let trainable: BTreeSet<String> = net.params.keys().cloned().collect();
        let ctx = StepCtx {
            trainable: &trainable,
            lr_scale: 1.0,
            loss_name: "pair_softmax",
        };
        let mut opt = Optimizer::new(SgdConfig::default());
        let mut hits = 0;
        for step in 1..=200 {
            let x = x.clone();
            let labels = labels.clone();
            hits = update(&mut net, &mut opt, &ctx, step, step as u64, |g, n, bind, fctx| {
                let xv = g.constant(x);
                let y = n.forward(g, bind, &[(PAIR, xv)], &[MATCH_LOGITS], fctx)?[0];
                let pred = argmax_rows(g.value(y));
                let hits = pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
                Ok((g.softmax_cross_entropy(y, &labels)?, hits))
            })
            .unwrap()
            .1;
        }
        let y = net.eval_output(PAIR, &x, MATCH_LOGITS).unwrap();
        let pred = argmax_rows(&y);
        assert_eq!(pred, labels, "last training batch had {hits}/32 correct");
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        let trace = vec![TraceRow {
            stage: "s".into(),
            epoch: 1,
            loss: 0.5,
            metric: Some(("train_rank1", 1.0)),
        }];
        write_run_report(dir.path(), "run", &[("arch".into(), "ccm".into())], &trace).unwrap();
        let text = std::fs::read_to_string(dir.path().join("run.report.txt")).unwrap();
        assert!(text.starts_with("arch: ccm\n"));
        let csv = std::fs::read_to_string(dir.path().join("run.trace.csv")).unwrap();
        assert_eq!(csv, "stage,epoch,loss,metric,value\ns,1,0.5,train_rank1,1\n");
    }
}
