//! Metric-learning, matching and reconstruction losses.
//!
//! Each loss exists in two forms: a `*_term` function that records the loss
//! on a [`Graph`] (used by training and gradient checks) and a value-level
//! function over plain tensors.

use std::collections::BTreeMap;

use crate::data::TMask;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Margins and term weights for the embedding losses plus the T-mask pixel
/// weights of the reconstruction loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Triplet margin α.
    pub alpha_triplet: f64,
    /// Mean-distance margin β on squared class-mean distances.
    pub beta_mean: f64,
    /// Standard-deviation margin γ.
    pub gamma_std: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    /// Pixel weight inside the T region.
    pub tmask_alpha: f64,
    /// Pixel weight outside the T region.
    pub tmask_beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha_triplet: 0.2,
            beta_mean: 0.5,
            gamma_std: 0.2,
            delta1: 1.0,
            delta2: 0.5,
            delta3: 0.25,
            tmask_alpha: 1.0,
            tmask_beta: 0.25,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("loss.alpha_triplet", self.alpha_triplet),
            ("loss.beta_mean", self.beta_mean),
            ("loss.gamma_std", self.gamma_std),
            ("loss.delta1", self.delta1),
            ("loss.delta2", self.delta2),
            ("loss.delta3", self.delta3),
            ("loss.tmask_alpha", self.tmask_alpha),
            ("loss.tmask_beta", self.tmask_beta),
        ];
        for (key, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(key, format!("must be a finite non-negative number, got {v}")));
            }
        }
        if self.delta1 <= 0.0 {
            return Err(Error::config("loss.delta1", "the triplet weight must be positive"));
        }
        if self.delta2 > 0.0 && self.delta3 > 0.0 && self.gamma_std >= self.beta_mean {
            return Err(Error::config(
                "loss.gamma_std",
                format!(
                    "gamma_std ({}) must be smaller than beta_mean ({}) when both terms are active",
                    self.gamma_std, self.beta_mean
                ),
            ));
        }
        Ok(())
    }
}

/// L2-normalized embeddings with their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    pub embeddings: Tensor,
    pub labels: Vec<usize>,
}

impl EmbeddingBatch {
    pub fn new(embeddings: Tensor, labels: Vec<usize>) -> Result<Self> {
        let (n, d) = match *embeddings.shape() {
            [n, d] => (n, d),
            _ => return Err(Error::invalid_shape("embedding_batch", embeddings.shape(), "expected [n, d]")),
        };
        if n == 0 {
            return Err(Error::Empty { op: "embedding_batch" });
        }
        if d < 2 {
            return Err(Error::invalid_shape("embedding_batch", embeddings.shape(), "need d >= 2"));
        }
        if labels.len() != n {
            return Err(Error::shape("embedding_batch", &[labels.len()], &[n]));
        }
        for (i, row) in embeddings.data().chunks(d).enumerate() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::Domain {
                    op: "embedding_batch",
                    reason: format!("row {i} has norm {norm}, expected unit norm"),
                });
            }
        }
        Ok(Self { embeddings, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Similarity scores of one CCM triplet: (target, positive), (target,
/// negative) and (negative, positive).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreTriple {
    pub s_tp: f64,
    pub s_tn: f64,
    pub s_np: f64,
}

impl ScoreTriple {
    pub fn new(s_tp: f64, s_tn: f64, s_np: f64) -> Result<Self> {
        for s in [s_tp, s_tn, s_np] {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Domain {
                    op: "score_triple",
                    reason: format!("score {s} outside [0, 1]"),
                });
            }
        }
        Ok(Self { s_tp, s_tn, s_np })
    }
}

/// Dense class structure of a label vector; classes ordered by ascending id.
#[derive(Clone, Debug)]
pub struct ClassIndex {
    pub ids: Vec<usize>,
    /// Dense class of each sample.
    pub class_of: Vec<usize>,
    pub members: Vec<Vec<usize>>,
}

impl ClassIndex {
    pub fn new(labels: &[usize]) -> Self {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            map.entry(l).or_default().push(i);
        }
        let ids: Vec<usize> = map.keys().copied().collect();
        let dense: BTreeMap<usize, usize> = ids.iter().enumerate().map(|(c, &id)| (id, c)).collect();
        Self {
            class_of: labels.iter().map(|l| dense[l]).collect(),
            members: map.into_values().collect(),
            ids,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `[C, n]` matrix whose row c averages the samples of class c.
    fn averaging_matrix(&self) -> Tensor {
        let n = self.class_of.len();
        let mut a = vec![0.0; self.len() * n];
        for (c, m) in self.members.iter().enumerate() {
            for &i in m {
                a[c * n + i] = 1.0 / m.len() as f64;
            }
        }
        Tensor::from_parts(vec![self.len(), n], a)
    }
}

fn rows_of(g: &Graph, emb: Var, labels: &[usize], op: &'static str) -> Result<usize> {
    match *g.shape(emb) {
        [n, _] if n == labels.len() && n > 0 => Ok(n),
        _ => Err(Error::shape(op, g.shape(emb), &[labels.len()])),
    }
}

/// Per-row squared distances `||x_i − y_i||²` as `[n]`.
fn row_sq_dist(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
    let d = g.sub(x, y)?;
    let s = g.square(d);
    g.sum_rows(s)
}

/// Triplet loss `(1/2N)·Σ [||a−p||² − ||a−n||² + α]_+` over `N` triplets of
/// row indices into `emb`.
pub fn triplet_term(g: &mut Graph, emb: Var, triplets: &[(usize, usize, usize)], cfg: &LossConfig) -> Result<Var> {
    if triplets.is_empty() {
        return Err(Error::Empty { op: "triplet_loss" });
    }
    if g.value(emb).rank() != 2 {
        return Err(Error::invalid_shape("triplet_loss", g.shape(emb), "expected [n, d]"));
    }
    let a: Vec<usize> = triplets.iter().map(|t| t.0).collect();
    let p: Vec<usize> = triplets.iter().map(|t| t.1).collect();
    let n: Vec<usize> = triplets.iter().map(|t| t.2).collect();
    let (ea, ep, en) = (g.gather_rows(emb, &a)?, g.gather_rows(emb, &p)?, g.gather_rows(emb, &n)?);
    let dap = row_sq_dist(g, ea, ep)?;
    let dan = row_sq_dist(g, ea, en)?;
    let diff = g.sub(dap, dan)?;
    let shifted = g.add_scalar(diff, cfg.alpha_triplet);
    let h = g.hinge(shifted);
    let s = g.sum(h);
    Ok(g.scale(s, 1.0 / (2.0 * triplets.len() as f64)))
}

/// Class means `[C, d]` of `emb` under `classes`.
pub fn class_means(g: &mut Graph, emb: Var, classes: &ClassIndex) -> Result<Var> {
    let a = g.constant(classes.averaging_matrix());
    g.matmul(a, emb)
}

/// Index of the nearest other class mean for each class (Euclidean, ties to
/// the lowest class).
pub fn nearest_other_means(means: &Tensor) -> Vec<usize> {
    let (c, d) = (means.shape()[0], means.shape()[1]);
    let row = |i: usize| &means.data()[i * d..(i + 1) * d];
    (0..c)
        .map(|i| {
            let mut best = (usize::MAX, f64::INFINITY);
            for j in (0..c).filter(|&j| j != i) {
                let dist: f64 = row(i).iter().zip(row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best.1 {
                    best = (j, dist);
                }
            }
            best.0
        })
        .collect()
}

/// Mean-distance loss `(1/2P)·Σ_c [β − ||μ_c − μ_c^n||²]_+`, with `P` the
/// number of classes whose constraint is violated (0 when none are).
pub fn mean_distance_term(g: &mut Graph, emb: Var, labels: &[usize], cfg: &LossConfig) -> Result<Var> {
    rows_of(g, emb, labels, "mean_distance_loss")?;
    let classes = ClassIndex::new(labels);
    if classes.len() < 2 {
        return Err(Error::Degenerate {
            op: "mean_distance_loss",
            reason: "needs at least two distinct classes".into(),
        });
    }
    let means = class_means(g, emb, &classes)?;
    let nearest = nearest_other_means(g.value(means));
    let others = g.gather_rows(means, &nearest)?;
    let dist = row_sq_dist(g, means, others)?;
    let neg = g.scale(dist, -1.0);
    let shifted = g.add_scalar(neg, cfg.beta_mean);
    let h = g.hinge(shifted);
    let violated = g.value(h).data().iter().filter(|v| **v > 0.0).count();
    let s = g.sum(h);
    let k = if violated == 0 { 0.0 } else { 1.0 / (2.0 * violated as f64) };
    Ok(g.scale(s, k))
}

/// Per-class standard deviations `σ_c = sqrt((1/N_c)·Σ ||f − μ_c||²)` as `[C]`.
pub fn class_std(g: &mut Graph, emb: Var, classes: &ClassIndex) -> Result<Var> {
    let means = class_means(g, emb, classes)?;
    let per_row = g.gather_rows(means, &classes.class_of)?;
    let sq = row_sq_dist(g, emb, per_row)?;
    let n = classes.class_of.len();
    let col = g.reshape(sq, &[n, 1])?;
    let a = g.constant(classes.averaging_matrix());
    let var = g.matmul(a, col)?;
    let var = g.reshape(var, &[classes.len()])?;
    // Rounding can leave a zero-spread class at -1e-17.
    let var = g.relu(var);
    g.sqrt(var)
}

/// Standard-deviation loss `(1/M)·Σ_c [γ − σ_c]_+` with `M` the number of
/// violating classes (0 when none are).
pub fn std_dev_term(g: &mut Graph, emb: Var, labels: &[usize], cfg: &LossConfig) -> Result<Var> {
    rows_of(g, emb, labels, "std_dev_loss")?;
    let classes = ClassIndex::new(labels);
    let sigma = class_std(g, emb, &classes)?;
    let neg = g.scale(sigma, -1.0);
    let shifted = g.add_scalar(neg, cfg.gamma_std);
    let h = g.hinge(shifted);
    let violated = g.value(h).data().iter().filter(|v| **v > 0.0).count();
    let s = g.sum(h);
    if violated == 0 && g.value(s).item() != 0.0 {
        return Err(Error::Backward(
            "std_dev_loss: positive hinge terms but no violating class".into(),
        ));
    }
    let k = if violated == 0 { 0.0 } else { 1.0 / violated as f64 };
    Ok(g.scale(s, k))
}

/// `δ1·L_triplet + δ2·L_mean + δ3·L_std`; zero-weight terms are skipped.
pub fn haarnet_term(
    g: &mut Graph,
    emb: Var,
    labels: &[usize],
    triplets: &[(usize, usize, usize)],
    cfg: &LossConfig,
) -> Result<Var> {
    rows_of(g, emb, labels, "haarnet_loss")?;
    let mut parts = vec![triplet_term(g, emb, triplets, cfg)?];
    let mut weights = vec![cfg.delta1];
    if cfg.delta2 != 0.0 {
        parts.push(mean_distance_term(g, emb, labels, cfg)?);
        weights.push(cfg.delta2);
    }
    if cfg.delta3 != 0.0 {
        parts.push(std_dev_term(g, emb, labels, cfg)?);
        weights.push(cfg.delta3);
    }
    g.lin_comb(&parts, &weights)
}

/// Mean-distance-regularized triplet loss: [`haarnet_term`] with `δ3 = 0`.
pub fn mdr_tl_term(
    g: &mut Graph,
    emb: Var,
    labels: &[usize],
    triplets: &[(usize, usize, usize)],
    cfg: &LossConfig,
) -> Result<Var> {
    let cfg = LossConfig { delta3: 0.0, ..*cfg };
    haarnet_term(g, emb, labels, triplets, &cfg)
}

/// `(1/L)·Σ sqrt((1 − s_tp)² + s_tn² + s_np²)` over `[L]` score vectors.
pub fn ccm_triplet_term(g: &mut Graph, s_tp: Var, s_tn: Var, s_np: Var) -> Result<Var> {
    let l = g.value(s_tp).len();
    if l == 0 {
        return Err(Error::Empty { op: "ccm_triplet_loss" });
    }
    let neg = g.scale(s_tp, -1.0);
    let miss = g.add_scalar(neg, 1.0);
    let a = g.square(miss);
    let b = g.square(s_tn);
    let c = g.square(s_np);
    let ab = g.add(a, b)?;
    let abc = g.add(ab, c)?;
    let r = g.sqrt(abc)?;
    Ok(g.mean(r))
}

/// `Σ τ·(X − X̂)²` with the mask grid broadcast over any leading axes.
pub fn tmask_mse_term(g: &mut Graph, recon: Var, target: Var, mask: &TMask) -> Result<Var> {
    let shape = g.shape(recon).to_vec();
    if g.shape(target) != shape.as_slice() {
        return Err(Error::shape("weighted_tmask_mse", &shape, g.shape(target)));
    }
    let weights = mask.broadcast(&shape)?;
    let d = g.sub(recon, target)?;
    let sq = g.square(d);
    let w = g.mul_const(sq, &weights)?;
    Ok(g.sum(w))
}

fn constant_batch(g: &mut Graph, batch: &EmbeddingBatch) -> Var {
    g.constant(batch.embeddings.clone())
}

pub fn triplet_loss(triplets: &[(usize, usize, usize)], batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let e = constant_batch(&mut g, batch);
    let l = triplet_term(&mut g, e, triplets, cfg)?;
    Ok(g.value(l).clone())
}

pub fn mean_distance_loss(batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let e = constant_batch(&mut g, batch);
    let l = mean_distance_term(&mut g, e, &batch.labels, cfg)?;
    Ok(g.value(l).clone())
}

pub fn std_dev_loss(batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let e = constant_batch(&mut g, batch);
    let l = std_dev_term(&mut g, e, &batch.labels, cfg)?;
    Ok(g.value(l).clone())
}

pub fn haarnet_loss(triplets: &[(usize, usize, usize)], batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let e = constant_batch(&mut g, batch);
    let l = haarnet_term(&mut g, e, &batch.labels, triplets, cfg)?;
    Ok(g.value(l).clone())
}

pub fn mdr_tl(triplets: &[(usize, usize, usize)], batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let e = constant_batch(&mut g, batch);
    let l = mdr_tl_term(&mut g, e, &batch.labels, triplets, cfg)?;
    Ok(g.value(l).clone())
}

pub fn ccm_triplet_loss(scores: &[ScoreTriple]) -> Result<Tensor> {
    if scores.is_empty() {
        return Err(Error::Empty { op: "ccm_triplet_loss" });
    }
    for s in scores {
        ScoreTriple::new(s.s_tp, s.s_tn, s.s_np)?;
    }
    let mut g = Graph::new();
    let col = |f: fn(&ScoreTriple) -> f64| Tensor::vector(&scores.iter().map(f).collect::<Vec<_>>());
    let tp = g.constant(col(|s| s.s_tp)?);
    let tn = g.constant(col(|s| s.s_tn)?);
    let np = g.constant(col(|s| s.s_np)?);
    let l = ccm_triplet_term(&mut g, tp, tn, np)?;
    Ok(g.value(l).clone())
}

pub fn weighted_tmask_mse(reconstruction: &Tensor, target: &Tensor, mask: &TMask) -> Result<Tensor> {
    let mut g = Graph::new();
    let r = g.constant(reconstruction.clone());
    let t = g.constant(target.clone());
    let l = tmask_mse_term(&mut g, r, t, mask)?;
    Ok(g.value(l).clone())
}

pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(logits.clone());
    let l = g.softmax_cross_entropy(x, labels)?;
    Ok(g.value(l).clone())
}

/// Closed-form gradient of the standard-deviation loss with respect to the
/// embeddings: for each violated class c and member i,
/// `∂L/∂f_i = −(1/M)·(f_i − μ_c)/(N_c·σ_c)`.
pub fn std_dev_loss_grad_analytic(batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<Tensor> {
    let e = &batch.embeddings;
    let d = e.shape()[1];
    let classes = ClassIndex::new(&batch.labels);
    let row = |i: usize| &e.data()[i * d..(i + 1) * d];
    let mut stats = Vec::with_capacity(classes.len());
    for m in &classes.members {
        let mut mu = vec![0.0; d];
        for &i in m {
            mu.iter_mut().zip(row(i)).for_each(|(a, b)| *a += b);
        }
        mu.iter_mut().for_each(|a| *a /= m.len() as f64);
        let var: f64 = m
            .iter()
            .map(|&i| row(i).iter().zip(&mu).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum::<f64>()
            / m.len() as f64;
        stats.push((mu, var.max(0.0).sqrt()));
    }
    let violated: Vec<bool> = stats.iter().map(|(_, s)| cfg.gamma_std - s > 0.0).collect();
    let m_count = violated.iter().filter(|v| **v).count();
    let mut grad = vec![0.0; e.len()];
    if m_count == 0 {
        return Tensor::new(e.shape(), grad);
    }
    for (c, members) in classes.members.iter().enumerate() {
        if !violated[c] {
            continue;
        }
        let (mu, sigma) = &stats[c];
        if *sigma == 0.0 {
            return Err(Error::SingularGradient(format!(
                "class {} violates the std constraint with zero spread",
                classes.ids[c]
            )));
        }
        let k = -1.0 / (m_count as f64 * members.len() as f64 * sigma);
        for &i in members {
            for j in 0..d {
                grad[i * d + j] = k * (row(i)[j] - mu[j]);
            }
        }
    }
    Tensor::new(e.shape(), grad)
}
