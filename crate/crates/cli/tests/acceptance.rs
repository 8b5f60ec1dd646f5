//! Acceptance criteria 1–9 plus the command-line contract.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stvfr_cli::commands::{cmd_eval, cmd_generate, cmd_train, deployment_specs, initial_networks};
use stvfr_cli::config::RunConfig;
use stvfr_core::arch::{forward_embed, layer_costs, spec_complexity, NetworkSpec, EMBEDDING, FEATURES, MATCH_LOGITS};
use stvfr_core::checkpoint::checkpoint_bytes;
use stvfr_core::data::{generate_synthetic_dataset, make_tmask, read_dataset, DatasetConfig, Geometry, TMaskGeometry};
use stvfr_core::eval::{accumulate_trajectory, argmax_lowest, rank1_eval, rank1_trajectories, FnMatcher, Fusion, Gallery, Trajectory};
use stvfr_core::losses::{
    ccm_triplet_loss, mean_distance_loss, std_dev_loss, std_dev_loss_grad_analytic, triplet_loss, weighted_tmask_mse,
    EmbeddingBatch, LossConfig, ScoreTriple,
};
use stvfr_core::nn::{FeatShape, LayerKind};
use stvfr_core::suite::{check_names, run_gradient_suite, CheckKind, DEFAULT_POINTS, DEFAULT_SEED};
use stvfr_core::train::{networks_for, run_schedule, ScheduleKind, TrainConfig};
use stvfr_core::{Graph, Tensor};

fn stvfr(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stvfr"))
        .args(args)
        .arg("--workdir")
        .arg(workdir)
        .env_remove("STV_WORKDIR")
        .output()
        .expect("run stvfr")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn config_in(dir: &Path, sets: &[(&str, &str)]) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.set("paths.workdir", dir.to_str().unwrap()).unwrap();
    for (k, v) in sets {
        cfg.set(k, v).unwrap();
    }
    cfg
}

fn report_fields(path: &Path) -> BTreeMap<String, String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter_map(|l| l.split_once(": "))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

fn unit_rows(rows: Vec<Vec<f64>>) -> Tensor {
    let d = rows[0].len();
    let n = rows.len();
    let data: Vec<f64> = rows
        .into_iter()
        .flat_map(|r| {
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.into_iter().map(move |x| x / norm)
        })
        .collect();
    Tensor::new(&[n, d], data).unwrap()
}

/// `classes × per_class` unit embeddings scattered around random centres
/// with per-class spreads `spread[c]`.
fn clustered_batch(rng: &mut ChaCha8Rng, classes: usize, per_class: usize, d: usize, spread: &[f64]) -> EmbeddingBatch {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for c in 0..classes {
        let centre: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for _ in 0..per_class {
            rows.push(centre.iter().map(|x| x + spread[c] * rng.random_range(-1.0..1.0)).collect());
            labels.push(c);
        }
    }
    EmbeddingBatch::new(unit_rows(rows), labels).unwrap()
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    let d = t.shape()[1];
    t.data().chunks(d).map(<[f64]>::to_vec).collect()
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn class_means(rows: &[Vec<f64>], labels: &[usize]) -> Vec<Vec<f64>> {
    let c = labels.iter().max().unwrap() + 1;
    let d = rows[0].len();
    let mut means = vec![vec![0.0; d]; c];
    let mut counts = vec![0usize; c];
    for (r, &l) in rows.iter().zip(labels) {
        for (m, x) in means[l].iter_mut().zip(r) {
            *m += x;
        }
        counts[l] += 1;
    }
    for (m, n) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|x| *x /= *n as f64);
    }
    means
}

// ---- oracles: direct summation, written independently of the library

fn oracle_triplet(rows: &[Vec<f64>], triplets: &[(usize, usize, usize)], alpha: f64) -> f64 {
    let mut s = 0.0;
    for &(a, p, n) in triplets {
        s += (sq(&rows[a], &rows[p]) - sq(&rows[a], &rows[n]) + alpha).max(0.0);
    }
    s / (2.0 * triplets.len() as f64)
}

fn oracle_mean_distance(rows: &[Vec<f64>], labels: &[usize], beta: f64) -> f64 {
    let means = class_means(rows, labels);
    let mut total = 0.0;
    let mut violated = 0;
    for i in 0..means.len() {
        let mut best = f64::INFINITY;
        for j in 0..means.len() {
            if j != i {
                best = best.min(sq(&means[i], &means[j]));
            }
        }
        let h = (beta - best).max(0.0);
        if h > 0.0 {
            violated += 1;
            total += h;
        }
    }
    if violated == 0 {
        0.0
    } else {
        total / (2.0 * violated as f64)
    }
}

fn oracle_sigmas(rows: &[Vec<f64>], labels: &[usize]) -> Vec<f64> {
    let means = class_means(rows, labels);
    (0..means.len())
        .map(|c| {
            let members: Vec<&Vec<f64>> = rows.iter().zip(labels).filter(|(_, &l)| l == c).map(|(r, _)| r).collect();
            (members.iter().map(|r| sq(r, &means[c])).sum::<f64>() / members.len() as f64).sqrt()
        })
        .collect()
}

fn oracle_std(rows: &[Vec<f64>], labels: &[usize], gamma: f64) -> f64 {
    let hinges: Vec<f64> = oracle_sigmas(rows, labels).iter().map(|s| (gamma - s).max(0.0)).collect();
    let m = hinges.iter().filter(|h| **h > 0.0).count();
    if m == 0 {
        0.0
    } else {
        hinges.iter().sum::<f64>() / m as f64
    }
}

fn oracle_ccm(scores: &[(f64, f64, f64)]) -> f64 {
    scores
        .iter()
        .map(|&(tp, tn, np)| ((1.0 - tp).powi(2) + tn * tn + np * np).sqrt())
        .sum::<f64>()
        / scores.len() as f64
}

// ---- 1. gradient suite

#[test]
fn c1_gradient_suite_passes_within_a_minute() {
    let names = check_names();
    for loss in [
        "triplet",
        "mean_distance",
        "std_dev",
        "haarnet_composite",
        "ccm_triplet",
        "tmask_mse",
    ] {
        assert!(names.iter().any(|(k, n)| *k == CheckKind::Loss && n == loss), "missing loss check {loss}");
    }
    for layer in ["conv2d", "deconv2d", "maxpool2d", "maxunpool2d", "batchnorm2d_train", "fully_connected", "inception_lite", "hadamard"] {
        assert!(names.iter().any(|(k, n)| *k == CheckKind::Layer && n == layer), "missing layer check {layer}");
    }
    let t = Instant::now();
    let report = run_gradient_suite(DEFAULT_SEED, DEFAULT_POINTS).unwrap();
    let elapsed = t.elapsed();
    println!("{}", report.to_text());
    println!("gradient suite: {} checks in {elapsed:?}", report.checks.len());
    assert_eq!(report.checks.len(), names.len());
    assert!(report.checks.iter().all(|c| c.points == 20));
    for c in &report.checks {
        let tol = match c.kind {
            CheckKind::Loss => 1e-6,
            CheckKind::Layer => 1e-5,
        };
        assert!(c.max_rel_error < tol, "{} max relative error {}", c.name, c.max_rel_error);
    }
    assert!(elapsed.as_secs_f64() < 60.0);
}

// ---- 2. analytic std-loss gradient

#[test]
fn c2_analytic_std_gradient_matches_autodiff() {
    let cfg = LossConfig {
        gamma_std: 0.3,
        ..LossConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut active = 0;
    for _ in 0..10 {
        // one tight, one medium and one wide class so both hinge branches occur
        let batch = clustered_batch(&mut rng, 3, 5, 16, &[0.05, 0.12, 0.8]);
        let sigmas = oracle_sigmas(&rows_of(&batch.embeddings), &batch.labels);
        assert!(sigmas.iter().all(|s| *s > 1e-3));
        active += sigmas.iter().filter(|s| **s < cfg.gamma_std).count();

        let analytic = std_dev_loss_grad_analytic(&batch, &cfg).unwrap();
        let mut g = Graph::new();
        let e = g.param(batch.embeddings.clone());
        let l = stvfr_core::losses::std_dev_term(&mut g, e, &batch.labels, &cfg).unwrap();
        let grads = g.backward(l).unwrap();
        let auto = grads.get(e).unwrap();
        assert_eq!(analytic.shape(), auto.shape());
        for (a, b) in analytic.data().iter().zip(auto.data()) {
            assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
        }
    }
    assert!(active > 0, "no violated class in any batch");
}

// ---- 3. oracle equivalence

#[test]
fn c3_losses_match_direct_summation_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = LossConfig {
        alpha_triplet: 0.6,
        beta_mean: 1.2,
        gamma_std: 0.3,
        ..LossConfig::default()
    };
    for trial in 0..10 {
        let batch = clustered_batch(&mut rng, 4, 4, 8, &[0.05, 0.2, 0.5, 1.0]);
        let rows = rows_of(&batch.embeddings);
        let labels = &batch.labels;
        let triplets: Vec<(usize, usize, usize)> = (0..12)
            .map(|_| {
                let a = rng.random_range(0..16);
                let p = (a / 4) * 4 + (a % 4 + 1 + rng.random_range(0..3)) % 4;
                let n = (a + 4 * rng.random_range(1..4)) % 16;
                (a, p, n)
            })
            .collect();
        let t = triplet_loss(&triplets, &batch, &cfg).unwrap().item();
        assert!(close(t, oracle_triplet(&rows, &triplets, cfg.alpha_triplet), 1e-12), "trial {trial} triplet");
        let m = mean_distance_loss(&batch, &cfg).unwrap().item();
        assert!(close(m, oracle_mean_distance(&rows, labels, cfg.beta_mean), 1e-12), "trial {trial} mean");
        let s = std_dev_loss(&batch, &cfg).unwrap().item();
        assert!(close(s, oracle_std(&rows, labels, cfg.gamma_std), 1e-12), "trial {trial} std");

        let scores: Vec<(f64, f64, f64)> = (0..6)
            .map(|_| (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)))
            .collect();
        let triples: Vec<ScoreTriple> = scores.iter().map(|&(a, b, c)| ScoreTriple::new(a, b, c).unwrap()).collect();
        assert!(close(ccm_triplet_loss(&triples).unwrap().item(), oracle_ccm(&scores), 1e-12));

        let (h, w) = (12, 10);
        let lc = LossConfig {
            tmask_alpha: rng.random_range(0.5..2.0),
            tmask_beta: rng.random_range(0.0..0.5),
            ..LossConfig::default()
        };
        let mask = make_tmask(h, w, &TMaskGeometry::default(), &lc).unwrap();
        let n = 2 * h * w;
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut oracle = 0.0;
        for b in 0..2 {
            for i in 0..h {
                for j in 0..w {
                    let k = b * h * w + i * w + j;
                    let tau = if mask.in_t(i, j) { lc.tmask_alpha } else { lc.tmask_beta };
                    oracle += tau * (x[k] - y[k]) * (x[k] - y[k]);
                }
            }
        }
        let got = weighted_tmask_mse(
            &Tensor::new(&[2, 1, h, w], x).unwrap(),
            &Tensor::new(&[2, 1, h, w], y).unwrap(),
            &mask,
        )
        .unwrap()
        .item();
        assert!(close(got, oracle, 1e-12), "trial {trial} tmask {got} vs {oracle}");
    }
}

// ---- 4. closed-form values

#[test]
fn c4_closed_form_loss_values() {
    let perfect = ccm_triplet_loss(&[ScoreTriple::new(1.0, 0.0, 0.0).unwrap()]).unwrap().item();
    assert!(perfect.abs() <= 1e-12);
    let worst = ccm_triplet_loss(&[ScoreTriple::new(0.0, 1.0, 1.0).unwrap()]).unwrap().item();
    assert!((worst - 3f64.sqrt()).abs() <= 1e-12);

    let cfg = LossConfig::default();
    let same = EmbeddingBatch::new(unit_rows(vec![vec![0.6, 0.8]; 3]), vec![0, 0, 1]).unwrap();
    let t = triplet_loss(&[(0, 1, 2), (1, 0, 2)], &same, &cfg).unwrap().item();
    assert!((t - cfg.alpha_triplet / 2.0).abs() <= 1e-12);

    let gamma = LossConfig {
        gamma_std: 0.1,
        ..LossConfig::default()
    };
    let zero_spread = EmbeddingBatch::new(unit_rows(vec![vec![1.0, 2.0, 2.0]; 4]), vec![5; 4]).unwrap();
    let s = std_dev_loss(&zero_spread, &gamma).unwrap().item();
    assert!((s - 0.1).abs() <= 1e-12);
}

// ---- 5. overfit sanity

#[test]
fn c5_ccm_overfits_and_cfr_reconstruction_improves() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_in(dir.path(), &[]);
    cmd_generate(&cfg).unwrap();

    let t = Instant::now();
    cmd_train(&cfg).unwrap();
    let elapsed = t.elapsed();
    let fields = report_fields(&dir.path().join("reports/train_ccm.report.txt"));
    let total: usize = fields["epochs_run.total"].parse().unwrap();
    println!(
        "ccm: training rank-1 {} after {total} epochs ({} pretrain + {} finetune) in {elapsed:?}",
        fields["train_rank1"], fields["epochs_run.pretrain"], fields["epochs_run.finetune"]
    );
    assert_eq!(fields["train_rank1"], "1");
    assert!(total <= 200);
    assert!(elapsed.as_secs_f64() < 600.0);

    let cfr = config_in(dir.path(), &[("model.arch", "cfr")]);
    cmd_train(&cfr).unwrap();
    let trace = std::fs::read_to_string(dir.path().join("reports/train_cfr.trace.csv")).unwrap();
    let loss_at = |epoch: &str| -> f64 {
        trace
            .lines()
            .map(|l| l.split(',').collect::<Vec<_>>())
            .find(|c| c[0] == "autoencoder" && c[1] == epoch)
            .map(|c| c[2].parse().unwrap())
            .unwrap()
    };
    let (first, twentieth) = (loss_at("1"), loss_at("20"));
    println!("cfr autoencoder loss: epoch 1 {first}, epoch 20 {twentieth} ({:.1}%)", 100.0 * twentieth / first);
    assert!(twentieth < 0.5 * first);
}

// ---- 6. unit hypersphere

#[test]
fn c6_triplet_trained_embeddings_are_unit_norm() {
    let ds = generate_synthetic_dataset(&DatasetConfig::default()).unwrap();
    let sweep = generate_synthetic_dataset(&DatasetConfig {
        seed: 66,
        n_identities: 8,
        videos_per_identity: 125,
        ..DatasetConfig::default()
    })
    .unwrap();
    let probes: Vec<&Tensor> = sweep.video_refs().iter().map(|&(i, k)| sweep.video(i, k)).collect();
    assert_eq!(probes.len(), 1000);
    let cfg = TrainConfig {
        stage_epochs: Some(vec![1, 1, 1, 2]),
        augment_per_still: 1,
        ..TrainConfig::default()
    };
    for kind in [ScheduleKind::HaarnetStagewise, ScheduleKind::TbeStagewise] {
        let mut nets = networks_for(kind, ds.geometry, ds.len(), 3).unwrap();
        run_schedule(kind, &mut nets, &ds, &cfg).unwrap();
        let mut worst: f64 = 0.0;
        for chunk in probes.chunks(100) {
            let e = forward_embed(&nets[0], &Tensor::stack(chunk).unwrap()).unwrap();
            for row in rows_of(&e) {
                worst = worst.max((row.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs());
            }
        }
        println!("{}: max | ||f|| - 1 | over 1000 probes = {worst:e}", kind.name());
        assert!(worst <= 1e-9);
    }
}

// ---- 7. complexity accountant

/// Per-layer `(params, macs, counted)` from closed-form formulas.
fn closed_form(kind: &LayerKind, ins: &[FeatShape], out: FeatShape) -> (u64, u64, bool) {
    let map = |s: FeatShape| match s {
        FeatShape::Map { c, h, w } => (c as u64, h as u64, w as u64),
        FeatShape::Flat(n) => (n as u64, 1, 1),
    };
    let (ci, hi, wi) = map(ins.first().copied().unwrap_or(FeatShape::Flat(0)));
    let (co, ho, wo) = map(out);
    match kind {
        LayerKind::Conv2d { kernel: k, .. } => {
            let k = (*k * *k) as u64;
            (co * ci * k + co, co * ho * wo * ci * k, true)
        }
        LayerKind::Deconv2d { kernel: k, .. } => {
            let k = (*k * *k) as u64;
            (ci * co * k + co, ci * hi * wi * co * k, true)
        }
        LayerKind::FullyConnected { out } => {
            let n_in = ins[0].numel() as u64;
            (*out as u64 * n_in + *out as u64, n_in * *out as u64, true)
        }
        LayerKind::BatchNorm2d { .. } => (2 * ci, 0, false),
        LayerKind::InceptionLite(cfg) => {
            let kernels = [1u64, 9, 25, 1];
            let params = cfg.paths.iter().zip(kernels).map(|(&c, k)| c as u64 * ci * k + c as u64).sum();
            let macs = cfg.paths.iter().zip(kernels).map(|(&c, k)| c as u64 * ho * wo * ci * k).sum();
            (params, macs, true)
        }
        LayerKind::Hadamard => (0, out.numel() as u64, true),
        LayerKind::Concat | LayerKind::SubtractMerge { .. } => (0, 0, true),
        _ => (0, 0, false),
    }
}

fn check_accountant(spec: &NetworkSpec) -> (u64, u64) {
    let shapes = spec.infer_shapes().unwrap();
    let index: BTreeMap<&str, usize> = spec.nodes.iter().enumerate().map(|(i, n)| (n.name.as_str(), i)).collect();
    let costs = layer_costs(spec).unwrap();
    let mut groups = std::collections::BTreeSet::new();
    let (mut params, mut layers) = (0, 0);
    for (i, (node, cost)) in spec.nodes.iter().zip(&costs).enumerate() {
        let ins: Vec<FeatShape> = node.inputs.iter().map(|s| shapes[index[s.as_str()]]).collect();
        let (p, m, counted) = closed_form(&node.kind, &ins, shapes[i]);
        let p = if groups.insert(node.group.clone().unwrap_or_else(|| node.name.clone())) { p } else { 0 };
        assert_eq!((cost.params, cost.macs, cost.counted), (p, m, counted), "{} / {}", spec.name, node.name);
        params += p;
        layers += u64::from(counted);
    }
    let total = spec_complexity(spec).unwrap();
    assert_eq!(total.n_parameters, params, "{}", spec.name);
    (params, layers)
}

#[test]
fn c7_complexity_accountant_matches_closed_forms() {
    let g = Geometry::DESK;
    for kind in [
        ScheduleKind::CcmPretrainFinetune,
        ScheduleKind::TbeStagewise,
        ScheduleKind::HaarnetStagewise,
        ScheduleKind::CfrAutoencoderThenClassifier,
    ] {
        for spec in deployment_specs(kind, false, g).unwrap() {
            let (p, l) = check_accountant(&spec);
            println!("desk {}: {p} parameters, {l} counted layers", spec.name);
        }
    }

    // desk CCM by hand: 48x40 -> conv 44x36 -> pool 22x18 -> 18x14 -> 14x10
    // -> 10x6 -> 6x2, 16 filters of 5x5 throughout
    let ccm = &deployment_specs(ScheduleKind::CcmPretrainFinetune, false, g).unwrap()[0];
    let convs = (16 * 25 + 16) + 4 * (16 * 16 * 25 + 16);
    let bn = 5 * 2 * 16;
    let head = (192 * 32 + 32) + (32 * 2 + 2);
    let branch_macs = 16 * 25 * (44 * 36 + 16 * (18 * 14 + 14 * 10 + 10 * 6 + 6 * 2));
    let head_macs = 192 + 192 * 32 + 32 * 2;
    let r = spec_complexity(ccm).unwrap();
    assert_eq!(r.n_parameters, (convs + bn + head) as u64);
    assert_eq!(r.n_operations, (2 * branch_macs + head_macs) as u64);
    assert_eq!(r.n_layers, 5 + 1 + 2);
    assert_eq!(ccm.shape_of(FEATURES).unwrap(), FeatShape::map(16, 6, 2));
    assert!(ccm.outputs.contains_key(MATCH_LOGITS));

    let full = &deployment_specs(ScheduleKind::CcmPretrainFinetune, true, g).unwrap()[0];
    let (params, _) = check_accountant(full);
    println!(
        "full CCM: {params} parameters vs 2.4M published ({:+.1}%), features {}",
        100.0 * (params as f64 - 2.4e6) / 2.4e6,
        full.shape_of(FEATURES).unwrap()
    );
    assert!((1_000_000..=5_000_000).contains(&params));

    let cfr: u64 = deployment_specs(ScheduleKind::CfrAutoencoderThenClassifier, true, g)
        .unwrap()
        .iter()
        .map(|s| spec_complexity(s).unwrap().n_layers)
        .sum();
    assert_eq!(cfr, 7);
    let embedding = deployment_specs(ScheduleKind::HaarnetStagewise, false, g).unwrap();
    assert!(embedding[0].outputs.contains_key(EMBEDDING));
}

// ---- 8. determinism

#[test]
fn c8_training_and_eval_are_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = [
        "--threads",
        "1",
        "--set",
        "train.stage_epochs=2,2",
        "--set",
        "train.triplets_per_epoch=32",
    ];
    for dir in [a.path(), b.path()] {
        ok(&stvfr(dir, &["generate"]));
        let mut train = vec!["train", "--arch", "ccm"];
        train.extend(args);
        ok(&stvfr(dir, &train));
        ok(&stvfr(dir, &["train", "--arch", "cfr", "--threads", "1", "--set", "train.stage_epochs=2,2"]));
    }
    for name in ["ccm.ckpt", "cfr_autoencoder.ckpt", "cfr_classifier.ckpt"] {
        let x = std::fs::read(a.path().join("checkpoints").join(name)).unwrap();
        let y = std::fs::read(b.path().join("checkpoints").join(name)).unwrap();
        assert!(x == y, "{name} differs between identical runs");
    }

    for arch in ["ccm", "cfr"] {
        ok(&stvfr(a.path(), &["eval", "--arch", arch, "--threads", "1"]));
        let one = std::fs::read_to_string(a.path().join(format!("reports/eval_{arch}.csv"))).unwrap();
        ok(&stvfr(a.path(), &["eval", "--arch", arch, "--threads", "4"]));
        let four = std::fs::read_to_string(a.path().join(format!("reports/eval_{arch}.csv"))).unwrap();
        assert_eq!(one, four);
    }

    let cfg = config_in(a.path(), &[("eval.fusion", "mean")]);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| cmd_eval(&cfg).unwrap().1)
    };
    assert_eq!(run(1), run(4));
}

// ---- 9. harness invariants

fn random_scores(rng: &mut ChaCha8Rng, rows: usize, cols: usize, levels: Option<u32>) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            (0..cols)
                .map(|_| match levels {
                    Some(l) => f64::from(rng.random_range(0..l)) / f64::from(l),
                    None => rng.random_range(-1.0..1.0),
                })
                .collect()
        })
        .collect()
}

/// Gallery and probes whose matcher returns the entries of `scores`:
/// gallery entry `j` and probe `i` are one-element tensors holding
/// their indices.
fn indexed(scores: &[Vec<f64>]) -> (Gallery, Vec<Tensor>) {
    let k = scores[0].len();
    let gallery = Gallery::new(
        (0..k).collect(),
        (0..k).map(|j| Tensor::vector(&[j as f64]).unwrap()).collect(),
    )
    .unwrap();
    let probes = (0..scores.len()).map(|i| Tensor::vector(&[i as f64]).unwrap()).collect();
    (gallery, probes)
}

#[test]
fn c9_harness_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for m in 0..100 {
        let (n, k) = (rng.random_range(5..30), rng.random_range(2..10));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();

        // positive scaling leaves rank-1 unchanged
        let s = random_scores(&mut rng, n, k, None);
        let c = rng.random_range(0.01..100.0);
        let (gallery, probes) = indexed(&s);
        let lookup = |scale: f64| {
            let s = s.clone();
            FnMatcher(move |g: &Tensor, p: &Tensor| scale * s[p.data()[0] as usize][g.data()[0] as usize])
        };
        let base = rank1_eval(&gallery, &probes, &labels, &lookup(1.0), 5, m).unwrap();
        let scaled = rank1_eval(&gallery, &probes, &labels, &lookup(c), 5, m).unwrap();
        assert_eq!(base, scaled, "matrix {m}: scaling by {c}");

        // mean fusion does not depend on frame order
        let frames = rng.random_range(2..8);
        let traj = random_scores(&mut rng, frames, k, None);
        let mut perm: Vec<usize> = (0..frames).collect();
        for i in (1..frames).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| traj[i].clone()).collect();
        let f1 = accumulate_trajectory(&traj, Fusion::Mean).unwrap();
        let f2 = accumulate_trajectory(&shuffled, Fusion::Mean).unwrap();
        assert!(f1.iter().zip(&f2).all(|(a, b)| (a - b).abs() <= 1e-12));
        assert_eq!(argmax_lowest(&f1), argmax_lowest(&f2));
        let (g1, _) = indexed(&traj);
        let frame_tensors = |order: &[usize]| -> Vec<Tensor> { order.iter().map(|&i| Tensor::vector(&[i as f64]).unwrap()).collect() };
        let traj_matcher = FnMatcher(|g: &Tensor, p: &Tensor| traj[p.data()[0] as usize][g.data()[0] as usize]);
        let ident: Vec<usize> = (0..frames).collect();
        let r1 = rank1_trajectories(&g1, &[Trajectory { frames: frame_tensors(&ident), true_id: 0 }], &traj_matcher, Fusion::Mean, 1, m).unwrap();
        let r2 = rank1_trajectories(&g1, &[Trajectory { frames: frame_tensors(&perm), true_id: 0 }], &traj_matcher, Fusion::Mean, 1, m).unwrap();
        assert_eq!(r1, r2);

        // ties resolve to the lowest gallery index, identically every time
        let tied = random_scores(&mut rng, n, k, Some(3));
        for row in &tied {
            let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let first = row.iter().position(|&v| v == best).unwrap();
            assert_eq!(argmax_lowest(row), first);
        }
        let (gallery, probes) = indexed(&tied);
        let tm = FnMatcher(|g: &Tensor, p: &Tensor| tied[p.data()[0] as usize][g.data()[0] as usize]);
        let a = rank1_eval(&gallery, &probes, &labels, &tm, 5, m).unwrap();
        let b = rank1_eval(&gallery, &probes, &labels, &tm, 5, m).unwrap();
        assert_eq!(a, b);
    }
}

// ---- command-line contract

#[test]
fn cli_generate_is_deterministic_and_validates_geometry() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let out = ok(&stvfr(a.path(), &["generate"]));
    assert!(out.contains("data.identities = 8"), "config not echoed:\n{out}");
    ok(&stvfr(b.path(), &["generate"]));
    let manifest = std::fs::read_to_string(a.path().join("data/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count() - 1, 8 + 8 * 4);
    assert_eq!(manifest, std::fs::read_to_string(b.path().join("data/manifest.csv")).unwrap());
    assert_eq!(read_dataset(&a.path().join("data")).unwrap(), read_dataset(&b.path().join("data")).unwrap());

    let bad = stvfr(a.path(), &["generate", "--set", "data.height=4"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("data.height"));
    let unknown = stvfr(a.path(), &["generate", "--set", "data.colour=1"]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("data.colour"));
}

#[test]
fn cli_zero_epochs_keeps_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    ok(&stvfr(dir.path(), &["generate"]));
    ok(&stvfr(dir.path(), &["train", "--arch", "ccm", "--epochs", "0"]));
    let cfg = config_in(dir.path(), &[]);
    let ds = read_dataset(&dir.path().join("data")).unwrap();
    let init = &initial_networks(&cfg, &ds).unwrap()[0];
    let saved = std::fs::read(dir.path().join("checkpoints/ccm.ckpt")).unwrap();
    assert!(saved == checkpoint_bytes(init).unwrap());
}

#[test]
fn cli_train_eval_complexity_and_workdir() {
    let dir = tempfile::tempdir().unwrap();
    ok(&stvfr(dir.path(), &["generate"]));
    let missing = stvfr(dir.path(), &["eval", "--arch", "ccm"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("missing checkpoint"));

    ok(&stvfr(dir.path(), &["train", "--arch", "cfr", "--set", "train.stage_epochs=1,1"]));
    assert!(dir.path().join("checkpoints/cfr_autoencoder.ckpt").exists());
    assert!(dir.path().join("checkpoints/cfr_classifier.ckpt").exists());

    ok(&stvfr(dir.path(), &["train", "--arch", "ccm", "--set", "train.stage_epochs=1,1"]));
    ok(&stvfr(dir.path(), &["eval", "--arch", "ccm"]));
    let report = report_fields(&dir.path().join("reports/eval_ccm.txt"));
    let r: f64 = report["rank1_mean"].parse().unwrap();
    assert!((0.0..=1.0).contains(&r));

    let out = ok(&stvfr(dir.path(), &["complexity", "--arch", "cfr", "--set", "model.scale=full"]));
    assert!(out.contains("n_layers: 7"), "{out}");
    let full_haar = stvfr(dir.path(), &["complexity", "--arch", "haarnet", "--set", "model.scale=full"]);
    assert_eq!(full_haar.status.code(), Some(2));

    let table = ok(&stvfr(dir.path(), &["report"]));
    assert!(table.contains("published:CCM-CNN"));
    assert!(dir.path().join("reports/table1.csv").exists());

    let env_dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_stvfr"))
        .arg("generate")
        .env("STV_WORKDIR", env_dir.path())
        .output()
        .unwrap();
    ok(&out);
    assert!(env_dir.path().join("data/manifest.csv").exists());
}

#[test]
fn cli_gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&stvfr(dir.path(), &["gradcheck"]));
    assert!(!out.contains("FAIL"));
    assert!(dir.path().join("reports/gradcheck.txt").exists());
}
