//! Still-to-video evaluation: rank-1 identification against a gallery of
//! reference stills, trajectory score fusion, repeated-trial dispersion and
//! the Table 1 comparison report.

use std::fmt::Write as _;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::arch::{self, ccm_features, forward_embed, ComplexityReport, ForwardCtx, Network, HEAD_P, HEAD_T};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

/// Fraction of probes kept in each resampling trial.
pub const TRIAL_FRACTION: f64 = 0.8;
/// Rows per batched forward pass when representing ROIs.
const CHUNK: usize = 32;

/// Index of the largest score; ties go to the lowest index.
pub fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    Mean,
    Max,
}

impl Fusion {
    pub fn name(self) -> &'static str {
        match self {
            Fusion::Mean => "mean",
            Fusion::Max => "max",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mean" => Some(Fusion::Mean),
            "max" => Some(Fusion::Max),
            _ => None,
        }
    }
}

/// Element-wise mean or max of per-frame score vectors over the gallery.
pub fn accumulate_trajectory(scores: &[Vec<f64>], policy: Fusion) -> Result<Vec<f64>> {
    let first = scores.first().ok_or(Error::Empty { op: "accumulate_trajectory" })?;
    let k = first.len();
    if let Some(bad) = scores.iter().find(|s| s.len() != k) {
        return Err(Error::shape("accumulate_trajectory", &[bad.len()], &[k]));
    }
    let mut out = first.clone();
    for s in &scores[1..] {
        for (o, &v) in out.iter_mut().zip(s) {
            match policy {
                Fusion::Mean => *o += v,
                Fusion::Max => *o = o.max(v),
            }
        }
    }
    if policy == Fusion::Mean {
        let n = scores.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
    }
    Ok(out)
}

/// Scores one probe representation against gallery representations.
pub trait Matcher: Sync {
    fn name(&self) -> &'static str;

    fn score(&self, still: &Tensor, probe: &Tensor) -> Result<f64>;

    fn score_row(&self, gallery: &[Tensor], probe: &Tensor) -> Result<Vec<f64>> {
        gallery.iter().map(|g| self.score(g, probe)).collect()
    }
}

/// Cosine similarity of embeddings.
pub struct Cosine;

impl Matcher for Cosine {
    fn name(&self) -> &'static str {
        "cosine"
    }

    fn score(&self, still: &Tensor, probe: &Tensor) -> Result<f64> {
        if still.shape() != probe.shape() {
            return Err(Error::shape("cosine", still.shape(), probe.shape()));
        }
        let denom = still.norm() * probe.norm();
        if denom == 0.0 {
            return Err(Error::Degenerate {
                op: "cosine",
                reason: "zero-norm representation".into(),
            });
        }
        Ok(still.dot(probe)? / denom)
    }
}

/// Any scoring closure.
pub struct FnMatcher<F>(pub F);

impl<F: Fn(&Tensor, &Tensor) -> f64 + Sync> Matcher for FnMatcher<F> {
    fn name(&self) -> &'static str {
        "custom"
    }

    fn score(&self, still: &Tensor, probe: &Tensor) -> Result<f64> {
        Ok((self.0)(still, probe))
    }
}

/// CCM head match probability over branch feature maps.
pub struct CcmMatcher<'a>(pub &'a Network);

impl Matcher for CcmMatcher<'_> {
    fn name(&self) -> &'static str {
        "ccm"
    }

    fn score(&self, still: &Tensor, probe: &Tensor) -> Result<f64> {
        Ok(arch::ccm_match(still, probe, self.0)?.0)
    }

    /// One head pass over the whole gallery.
    fn score_row(&self, gallery: &[Tensor], probe: &Tensor) -> Result<Vec<f64>> {
        let refs: Vec<&Tensor> = gallery.iter().collect();
        let t = Tensor::stack(&refs)?;
        let p = Tensor::stack(&vec![probe; gallery.len()])?;
        pair_probabilities(self.0, &[(HEAD_T, t), (HEAD_P, p)])
    }
}

/// CFR pair classifier: match probability of `[still ‖ probe]` embeddings.
pub struct PairClassifier<'a>(pub &'a Network);

impl Matcher for PairClassifier<'_> {
    fn name(&self) -> &'static str {
        "classifier"
    }

    fn score(&self, still: &Tensor, probe: &Tensor) -> Result<f64> {
        Ok(self.score_row(std::slice::from_ref(still), probe)?[0])
    }

    fn score_row(&self, gallery: &[Tensor], probe: &Tensor) -> Result<Vec<f64>> {
        let d = probe.len();
        let mut data = Vec::with_capacity(gallery.len() * 2 * d);
        for g in gallery {
            if g.len() != d {
                return Err(Error::shape("pair_classifier", g.shape(), probe.shape()));
            }
            data.extend_from_slice(g.data());
            data.extend_from_slice(probe.data());
        }
        let pairs = Tensor::new(&[gallery.len(), 2 * d], data)?;
        pair_probabilities(self.0, &[(arch::PAIR, pairs)])
    }
}

/// Softmax probability of the match class (index 0) of a two-way head.
fn pair_probabilities(net: &Network, inputs: &[(&str, Tensor)]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let bind = net.bind(&mut g, &|_| false);
    let vars: Vec<(&str, crate::Var)> = inputs.iter().map(|(n, t)| (*n, g.constant(t.clone()))).collect();
    let out = net.forward(&mut g, &bind, &vars, &[arch::MATCH_LOGITS], &mut ForwardCtx::eval())?;
    let p = g.softmax(out[0])?;
    Ok(g.value(p).data().chunks(2).map(|r| r[0]).collect())
}

/// Reference stills, one per identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Gallery {
    pub ids: Vec<usize>,
    pub entries: Vec<Tensor>,
}

impl Gallery {
    pub fn new(ids: Vec<usize>, entries: Vec<Tensor>) -> Result<Self> {
        if ids.len() != entries.len() {
            return Err(Error::shape("gallery", &[ids.len()], &[entries.len()]));
        }
        if ids.len() < 2 {
            return Err(Error::Degenerate {
                op: "gallery",
                reason: "need at least two identities".into(),
            });
        }
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Domain {
                op: "gallery",
                reason: "identity ids must be unique".into(),
            });
        }
        if let Some(bad) = entries.iter().find(|e| e.shape() != entries[0].shape()) {
            return Err(Error::shape("gallery", bad.shape(), entries[0].shape()));
        }
        Ok(Self { ids, entries })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn position(&self, id: usize) -> Result<usize> {
        self.ids.iter().position(|&g| g == id).ok_or(Error::IndexOutOfRange {
            op: "rank1_eval: probe identity absent from gallery",
            index: id,
            len: self.ids.len(),
        })
    }
}

/// Probe ROIs of one tracked individual, in temporal order.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub frames: Vec<Tensor>,
    pub true_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rank1_mean: f64,
    pub rank1_std: f64,
    pub n_trials: usize,
    pub n_probes: usize,
    /// `confusion[true][predicted]` over gallery positions, all probes.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    /// Rank-1 over every probe (no resampling).
    pub fn rank1_all(&self) -> f64 {
        let correct: usize = (0..self.confusion.len()).map(|i| self.confusion[i][i]).sum();
        correct as f64 / self.n_probes as f64
    }

    pub fn to_text(&self, ids: &[usize]) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "rank1_mean: {}", self.rank1_mean);
        let _ = writeln!(s, "rank1_std: {}", self.rank1_std);
        let _ = writeln!(s, "rank1_all: {}", self.rank1_all());
        let _ = writeln!(s, "n_trials: {}", self.n_trials);
        let _ = writeln!(s, "n_probes: {}", self.n_probes);
        let _ = writeln!(s, "confusion (rows: true id, columns: predicted id)");
        let _ = writeln!(
            s,
            "{:>6} {}",
            "",
            ids.iter().map(|i| format!("{i:>4}")).collect::<String>()
        );
        for (i, row) in self.confusion.iter().enumerate() {
            let _ = writeln!(s, "{:>6} {}", ids[i], row.iter().map(|c| format!("{c:>4}")).collect::<String>());
        }
        s
    }
}

/// Rank-1 from predictions: per trial, a seeded 80% subset of probes.
pub fn rank1_from_predictions(truth: &[usize], predicted: &[usize], k: usize, trials: usize, seed: u64) -> Result<EvalReport> {
    let n = truth.len();
    if n == 0 {
        return Err(Error::Empty { op: "rank1_eval" });
    }
    if trials == 0 {
        return Err(Error::config("eval.trials", "must be at least 1"));
    }
    let mut confusion = vec![vec![0usize; k]; k];
    for (&t, &p) in truth.iter().zip(predicted) {
        confusion[t][p] += 1;
    }
    let m = ((n as f64 * TRIAL_FRACTION).round() as usize).clamp(1, n);
    let mut rates = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(trial as u64));
        let pick = index::sample(&mut rng, n, m);
        let correct = pick.iter().filter(|&i| truth[i] == predicted[i]).count();
        rates.push(correct as f64 / m as f64);
    }
    let mean = rates.iter().sum::<f64>() / trials as f64;
    let var = rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / trials as f64;
    Ok(EvalReport {
        rank1_mean: mean,
        rank1_std: var.sqrt(),
        n_trials: trials,
        n_probes: n,
        confusion,
    })
}

/// Scores every probe against the gallery (in parallel on the current
/// rayon pool; rows are merged by probe index).
pub fn score_matrix(gallery: &Gallery, probes: &[Tensor], matcher: &dyn Matcher) -> Result<Vec<Vec<f64>>> {
    probes
        .par_iter()
        .map(|p| matcher.score_row(&gallery.entries, p))
        .collect()
}

/// Rank-1 identification of labelled probes: each probe is assigned the
/// gallery identity with the highest score (ties to the lowest index).
pub fn rank1_eval(
    gallery: &Gallery,
    probes: &[Tensor],
    labels: &[usize],
    matcher: &dyn Matcher,
    trials: usize,
    seed: u64,
) -> Result<EvalReport> {
    if probes.len() != labels.len() {
        return Err(Error::shape("rank1_eval", &[probes.len()], &[labels.len()]));
    }
    let truth = labels.iter().map(|&l| gallery.position(l)).collect::<Result<Vec<_>>>()?;
    let scores = score_matrix(gallery, probes, matcher)?;
    let predicted: Vec<usize> = scores.iter().map(|s| argmax_lowest(s)).collect();
    rank1_from_predictions(&truth, &predicted, gallery.len(), trials, seed)
}

/// Rank-1 over trajectories, fusing per-frame scores with `policy`.
pub fn rank1_trajectories(
    gallery: &Gallery,
    trajectories: &[Trajectory],
    matcher: &dyn Matcher,
    policy: Fusion,
    trials: usize,
    seed: u64,
) -> Result<EvalReport> {
    let truth = trajectories
        .iter()
        .map(|t| gallery.position(t.true_id))
        .collect::<Result<Vec<_>>>()?;
    let predicted = trajectories
        .par_iter()
        .map(|t| {
            let rows = score_matrix(gallery, &t.frames, matcher)?;
            Ok(argmax_lowest(&accumulate_trajectory(&rows, policy)?))
        })
        .collect::<Result<Vec<_>>>()?;
    rank1_from_predictions(&truth, &predicted, gallery.len(), trials, seed)
}

/// A trained system ready for matching.
pub enum System<'a> {
    /// Unit-norm embeddings compared by cosine (TBE, HaarNet).
    Embedding(&'a Network),
    /// Siamese feature maps compared by the matching head.
    Ccm(&'a Network),
    /// Autoencoder embeddings compared by the pair classifier.
    Cfr { encoder: &'a Network, classifier: &'a Network },
}

impl System<'_> {
    fn encoder(&self) -> &Network {
        match self {
            System::Embedding(n) | System::Ccm(n) => n,
            System::Cfr { encoder, .. } => encoder,
        }
    }

    /// Matching representation of each ROI.
    pub fn represent(&self, rois: &[&Tensor]) -> Result<Vec<Tensor>> {
        let net = self.encoder();
        let chunks: Vec<&[&Tensor]> = rois.chunks(CHUNK).collect();
        let parts = chunks
            .par_iter()
            .map(|c| {
                let batch = Tensor::stack(c)?;
                let out = match self {
                    System::Ccm(_) => ccm_features(net, &batch)?,
                    _ => forward_embed(net, &batch)?,
                };
                (0..c.len()).map(|i| out.index_outer(i)).collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(parts.into_iter().flatten().collect())
    }

    pub fn matcher(&self) -> Box<dyn Matcher + '_> {
        match self {
            System::Embedding(_) => Box::new(Cosine),
            System::Ccm(n) => Box::new(CcmMatcher(n)),
            System::Cfr { classifier, .. } => Box::new(PairClassifier(classifier)),
        }
    }

    /// Gallery of every identity's still.
    pub fn gallery(&self, ds: &Dataset) -> Result<Gallery> {
        let stills: Vec<&Tensor> = ds.identities.iter().map(|i| &i.still).collect();
        Gallery::new(ds.identities.iter().map(|i| i.id).collect(), self.represent(&stills)?)
    }

    /// Rank-1 of every video ROI against the stills of `ds`.
    pub fn evaluate(&self, ds: &Dataset, trials: usize, seed: u64) -> Result<EvalReport> {
        let gallery = self.gallery(ds)?;
        let refs = ds.video_refs();
        let rois: Vec<&Tensor> = refs.iter().map(|&(id, k)| ds.video(id, k)).collect();
        let labels: Vec<usize> = refs.iter().map(|&(id, _)| id).collect();
        let probes = self.represent(&rois)?;
        rank1_eval(&gallery, &probes, &labels, self.matcher().as_ref(), trials, seed)
    }

    /// Rank-1 treating each identity's videos as one trajectory.
    pub fn evaluate_trajectories(&self, ds: &Dataset, policy: Fusion, trials: usize, seed: u64) -> Result<EvalReport> {
        let gallery = self.gallery(ds)?;
        let trajectories = ds
            .identities
            .iter()
            .map(|i| {
                let rois: Vec<&Tensor> = i.videos.iter().collect();
                Ok(Trajectory {
                    frames: self.represent(&rois)?,
                    true_id: i.id,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rank1_trajectories(&gallery, &trajectories, self.matcher().as_ref(), policy, trials, seed)
    }
}

/// One Table 1 row.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemRow {
    pub system: String,
    pub complexity: ComplexityReport,
    pub eval: Option<EvalReport>,
}

/// Table 1 of the source publication, full-scale on COX Face DB:
/// `(system, rank-1 %, ± %, operations, parameters, layers)`.
pub const PUBLISHED_ROWS: [(&str, f64, f64, u64, u64, u64); 4] = [
    ("CCM-CNN", 89.53, 0.9, 33_300_000, 2_400_000, 30),
    ("TBE-CNN", 90.61, 0.6, 12_800_000_000, 46_400_000, 144),
    ("HaarNet", 91.40, 1.0, 3_500_000_000, 13_100_000, 56),
    ("CFR-CNN", 87.29, 0.9, 3_750_000, 1_200_000, 7),
];

/// Aligned text table and CSV comparing `rows` with the published values.
pub fn table1_report(rows: &[SystemRow]) -> Result<(String, String)> {
    let mut records: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            let (m, s) = match &r.eval {
                Some(e) => (format!("{:.4}", e.rank1_mean), format!("{:.4}", e.rank1_std)),
                None => (String::new(), String::new()),
            };
            [
                r.system.clone(),
                m,
                s,
                r.complexity.n_operations.to_string(),
                r.complexity.n_parameters.to_string(),
                r.complexity.n_layers.to_string(),
            ]
        })
        .collect();
    for (name, m, s, ops, params, layers) in PUBLISHED_ROWS {
        records.push([
            format!("published:{name}"),
            format!("{:.4}", m / 100.0),
            format!("{:.4}", s / 100.0),
            ops.to_string(),
            params.to_string(),
            layers.to_string(),
        ]);
    }
    let header = ["system", "rank1_mean", "rank1_std", "n_ops", "n_params", "n_layers"];
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_err)?;
    for r in &records {
        w.write_record(r).map_err(csv_err)?;
    }
    let csv_text = String::from_utf8(w.into_inner().map_err(|e| Error::Corrupt(e.to_string()))?)
        .map_err(|e| Error::Corrupt(e.to_string()))?;

    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in &records {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: &[String]| -> String {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut text = String::new();
    let head: Vec<String> = header.iter().map(|h| h.to_string()).collect();
    let _ = writeln!(text, "{}", line(&head));
    for r in &records {
        let _ = writeln!(text, "{}", line(r));
    }
    let _ = writeln!(
        text,
        "rows prefixed `published:` are the full-scale values reported for COX Face DB, shown for context only"
    );
    Ok((text, csv_text))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Corrupt(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{ccm_spec, haarnet_spec, CcmOptions, HaarnetOptions};
    use crate::data::{generate_synthetic_dataset, DatasetConfig};
    use rand::Rng;

    fn onehot_gallery(k: usize) -> Gallery {
        let entries = (0..k)
            .map(|i| {
                let mut v = vec![0.0; k];
                v[i] = 1.0;
                Tensor::vector(&v).unwrap()
            })
            .collect();
        Gallery::new((0..k).collect(), entries).unwrap()
    }

    #[test]
    fn exact_match_is_perfect() {
        let g = onehot_gallery(4);
        let probes = g.entries.clone();
        let eq = FnMatcher(|a: &Tensor, b: &Tensor| if a == b { 1.0 } else { 0.0 });
        let r = rank1_eval(&g, &probes, &[0, 1, 2, 3], &eq, 5, 1).unwrap();
        assert_eq!((r.rank1_mean, r.rank1_std), (1.0, 0.0));
    }

    #[test]
    fn constant_matcher_picks_lowest_index() {
        let k = 4;
        let g = onehot_gallery(k);
        let labels: Vec<usize> = (0..400).map(|i| i % k).collect();
        let probes: Vec<Tensor> = labels.iter().map(|&l| g.entries[l].clone()).collect();
        let c = FnMatcher(|_: &Tensor, _: &Tensor| 0.5);
        let r = rank1_eval(&g, &probes, &labels, &c, 50, 3).unwrap();
        assert!(r.confusion.iter().all(|row| row[1..].iter().all(|&c| c == 0)));
        // binomial spread of an 80% subsample of a balanced set
        let m: f64 = 320.0;
        let sigma = (0.25 * 0.75 / m).sqrt();
        assert!((r.rank1_mean - 0.25).abs() < 3.0 * sigma, "{}", r.rank1_mean);
    }

    #[test]
    fn one_trial_has_zero_std() {
        let g = onehot_gallery(3);
        let r = rank1_eval(&g, &g.entries, &[0, 1, 2], &Cosine, 1, 0).unwrap();
        assert_eq!(r.rank1_std, 0.0);
        assert_eq!(r.n_trials, 1);
    }

    #[test]
    fn absent_probe_identity_is_an_error() {
        let g = onehot_gallery(3);
        assert!(rank1_eval(&g, &g.entries[..1], &[7], &Cosine, 1, 0).is_err());
        assert!(Gallery::new(vec![0], vec![Tensor::vector(&[1.0]).unwrap()]).is_err());
        assert!(Gallery::new(vec![0, 0], g.entries[..2].to_vec()).is_err());
    }

    #[test]
    fn trajectory_fusion() {
        let one = vec![vec![0.2, 0.7, 0.1]];
        for p in [Fusion::Mean, Fusion::Max] {
            assert_eq!(accumulate_trajectory(&one, p).unwrap(), one[0]);
        }
        let fused = accumulate_trajectory(&[vec![1.0, 0.0], vec![0.0, 1.0]], Fusion::Mean).unwrap();
        assert_eq!(fused, vec![0.5, 0.5]);
        assert_eq!(argmax_lowest(&fused), 0);
        assert!(accumulate_trajectory(&[vec![1.0], vec![1.0, 2.0]], Fusion::Max).is_err());
        assert!(accumulate_trajectory(&[], Fusion::Mean).is_err());
    }

    #[test]
    fn fusion_invariances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let frames: Vec<Vec<f64>> = (0..5).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect();
            let mut rev = frames.clone();
            rev.reverse();
            let a = accumulate_trajectory(&frames, Fusion::Mean).unwrap();
            let b = accumulate_trajectory(&rev, Fusion::Mean).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-15);
            }
            let mut dup = frames.clone();
            dup.extend(frames.clone());
            assert_eq!(
                accumulate_trajectory(&frames, Fusion::Max).unwrap(),
                accumulate_trajectory(&dup, Fusion::Max).unwrap()
            );
        }
    }

    #[test]
    fn table_has_one_row_per_system_plus_published() {
        let rows = vec![
            SystemRow {
                system: "a".into(),
                complexity: ComplexityReport::default(),
                eval: None,
            },
            SystemRow {
                system: "b".into(),
                complexity: ComplexityReport {
                    n_operations: 5,
                    n_parameters: 2,
                    n_layers: 1,
                },
                eval: None,
            },
        ];
        let (text, csv) = table1_report(&rows).unwrap();
        assert_eq!(csv.lines().count(), 1 + rows.len() + PUBLISHED_ROWS.len());
        assert!(csv.starts_with("system,rank1_mean,rank1_std,n_ops,n_params,n_layers"));
        assert!(csv.contains("published:CCM-CNN,0.8953,0.0090,33300000,2400000,30"));
        assert!(csv.contains("published:HaarNet,0.9140,0.0100,3500000000,13100000,56"));
        assert!(text.contains("published:TBE-CNN"));
    }

    #[test]
    fn systems_evaluate_in_range_and_thread_independent() {
        let ds = generate_synthetic_dataset(&DatasetConfig {
            n_identities: 3,
            videos_per_identity: 2,
            ..DatasetConfig::default()
        })
        .unwrap();
        let ccm = Network::new(ccm_spec(&CcmOptions::desk()).unwrap(), 1).unwrap();
        let haar = Network::new(haarnet_spec(&HaarnetOptions::desk()).unwrap(), 1).unwrap();
        for sys in [System::Ccm(&ccm), System::Embedding(&haar)] {
            let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
            let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
            let a = one.install(|| sys.evaluate(&ds, 3, 9)).unwrap();
            let b = four.install(|| sys.evaluate(&ds, 3, 9)).unwrap();
            assert_eq!(a, b);
            assert!((0.0..=1.0).contains(&a.rank1_mean));
            let t = sys.evaluate_trajectories(&ds, Fusion::Mean, 1, 0).unwrap();
            assert_eq!(t.n_probes, 3);
        }
    }

    #[test]
    fn ccm_batched_row_matches_pairwise() {
        let net = Network::new(ccm_spec(&CcmOptions::desk()).unwrap(), 2).unwrap();
        let fs = net.output_shape(arch::FEATURES).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gal: Vec<Tensor> = (0..3)
            .map(|_| Tensor::randn(&fs.batched(1)[1..], 1.0, &mut rng).unwrap())
            .collect();
        let probe = Tensor::randn(&fs.batched(1)[1..], 1.0, &mut rng).unwrap();
        let m = CcmMatcher(&net);
        let row = m.score_row(&gal, &probe).unwrap();
        for (g, r) in gal.iter().zip(&row) {
            assert!((m.score(g, &probe).unwrap() - r).abs() < 1e-12);
        }
    }
}
