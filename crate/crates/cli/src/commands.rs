//! The six commands. Each one validates the whole configuration first,
//! echoes it, and writes its outputs under the fixed workdir layout.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use stvfr_core::arch::{
    ccm_spec, cfr_autoencoder_spec, cfr_classifier_spec, haarnet_spec, layer_costs, spec_complexity, tbe_spec,
    CcmOptions, CfrOptions, ComplexityReport, HaarnetOptions, Network, NetworkSpec, TbeOptions,
};
use stvfr_core::checkpoint::{load_checkpoint_for, save_checkpoint};
use stvfr_core::data::{generate_synthetic_dataset, read_dataset, write_dataset, Dataset, Geometry};
use stvfr_core::eval::{table1_report, EvalReport, SystemRow};
use stvfr_core::nn::FeatShape;
use stvfr_core::suite::run_gradient_suite;
use stvfr_core::train::{networks_for, run_schedule, specs_for, write_run_report, ScheduleKind};
use stvfr_core::{Error, Result};

use crate::config::RunConfig;

/// Fixed layout under the workdir.
#[derive(Clone, Debug)]
pub struct Workdir {
    pub root: PathBuf,
}

impl Workdir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    /// Checkpoint paths of a schedule, one per network.
    pub fn checkpoint_paths(&self, kind: ScheduleKind, cfg: &RunConfig) -> Vec<PathBuf> {
        match kind {
            ScheduleKind::CfrAutoencoderThenClassifier => vec![
                self.checkpoints().join("cfr_autoencoder.ckpt"),
                self.checkpoints().join("cfr_classifier.ckpt"),
            ],
            _ => vec![cfg
                .checkpoint_override()
                .unwrap_or_else(|| self.checkpoints().join(format!("{}.ckpt", arch_name(kind))))],
        }
    }
}

pub fn arch_name(kind: ScheduleKind) -> &'static str {
    match kind {
        ScheduleKind::HaarnetStagewise => "haarnet",
        ScheduleKind::TbeStagewise => "tbe",
        ScheduleKind::CcmPretrainFinetune => "ccm",
        ScheduleKind::CfrAutoencoderThenClassifier => "cfr",
    }
}

fn system_name(kind: ScheduleKind) -> &'static str {
    match kind {
        ScheduleKind::HaarnetStagewise => "HaarNet",
        ScheduleKind::TbeStagewise => "TBE-CNN",
        ScheduleKind::CcmPretrainFinetune => "CCM-CNN",
        ScheduleKind::CfrAutoencoderThenClassifier => "CFR-CNN",
    }
}

const ALL_KINDS: [ScheduleKind; 4] = [
    ScheduleKind::CcmPretrainFinetune,
    ScheduleKind::TbeStagewise,
    ScheduleKind::HaarnetStagewise,
    ScheduleKind::CfrAutoencoderThenClassifier,
];

fn echo(command: &str, cfg: &RunConfig) -> String {
    format!("# stvfr {command}: effective config\n{}\n", cfg.to_text())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn load_dataset(wd: &Workdir) -> Result<Dataset> {
    let dir = wd.data();
    if !dir.join("manifest.csv").exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no dataset under {} (run `stvfr generate` first)", dir.display()),
        )));
    }
    read_dataset(&dir)
}

/// Desk-scale network specs at the dataset geometry; a geometry the
/// architectures cannot accommodate is a configuration error.
fn specs(kind: ScheduleKind, geometry: Geometry, n_classes: usize) -> Result<Vec<NetworkSpec>> {
    specs_for(kind, geometry, n_classes).map_err(|e| match e {
        Error::Config { .. } => e,
        other => Error::config(
            "data.height",
            format!(
                "{} cannot take {}x{}x{} inputs: {other}",
                arch_name(kind),
                geometry.channels,
                geometry.height,
                geometry.width
            ),
        ),
    })
}

/// Writes the synthetic dataset to `data/`.
pub fn cmd_generate(cfg: &RunConfig) -> Result<String> {
    cfg.validate()?;
    let wd = Workdir::new(cfg.workdir());
    let ds = generate_synthetic_dataset(&cfg.dataset_config()?)?;
    write_dataset(&ds, &wd.data())?;
    let mut out = echo("generate", cfg);
    let _ = writeln!(
        out,
        "dataset: {} identities, {} stills, {} videos -> {}",
        ds.len(),
        ds.len(),
        ds.n_videos(),
        wd.data().display()
    );
    write_text(&wd.reports().join("generate.config.txt"), &cfg.to_text())?;
    Ok(out)
}

/// Runs the schedule of `model.arch` and writes its checkpoint(s) and run
/// report.
pub fn cmd_train(cfg: &RunConfig) -> Result<String> {
    cfg.validate()?;
    if cfg.full_scale()? {
        return Err(Error::config("model.scale", "training runs at desk scale only"));
    }
    let wd = Workdir::new(cfg.workdir());
    let kind = cfg.schedule()?;
    let tcfg = cfg.train_config()?;
    let ds = load_dataset(&wd)?;
    specs(kind, ds.geometry, ds.len())?;
    let mut nets = networks_for(kind, ds.geometry, ds.len(), tcfg.seed)?;
    let summary = run_schedule(kind, &mut nets, &ds, &tcfg)?;
    let paths = wd.checkpoint_paths(kind, cfg);
    for (net, path) in nets.iter().zip(&paths) {
        save_checkpoint(net, path)?;
    }

    let mut fields: Vec<(String, String)> = cfg.entries().map(|(k, v)| (format!("config.{k}"), v.clone())).collect();
    fields.push(("schedule".into(), kind.name().into()));
    for (stage, n) in &summary.epochs_run {
        fields.push((format!("epochs_run.{stage}"), n.to_string()));
    }
    fields.push(("epochs_run.total".into(), summary.epochs_run.iter().map(|e| e.1).sum::<usize>().to_string()));
    fields.push(("train_rank1".into(), summary.train_rank1.to_string()));
    for (net, path) in nets.iter().zip(&paths) {
        fields.push((format!("checkpoint.{}", net.spec.name), path.display().to_string()));
        fields.push((format!("spec_hash.{}", net.spec.name), net.spec.hash()));
    }
    let stem = format!("train_{}", arch_name(kind));
    write_run_report(&wd.reports(), &stem, &fields, &summary.trace)?;

    let mut out = echo("train", cfg);
    for (stage, n) in &summary.epochs_run {
        let last = summary.trace.iter().rev().find(|r| &r.stage == stage);
        let _ = write!(out, "stage {stage}: {n} epochs");
        if let Some(r) = last {
            let _ = write!(out, ", final loss {:.6}", r.loss);
            if let Some((m, v)) = r.metric {
                let _ = write!(out, ", {m} {v:.4}");
            }
        }
        out.push('\n');
    }
    let _ = writeln!(out, "train_rank1: {}", summary.train_rank1);
    for p in &paths {
        let _ = writeln!(out, "checkpoint: {}", p.display());
    }
    let _ = writeln!(out, "report: {}", wd.reports().join(format!("{stem}.report.txt")).display());
    Ok(out)
}

fn load_networks(wd: &Workdir, cfg: &RunConfig, kind: ScheduleKind, ds: &Dataset) -> Result<Vec<Network>> {
    let expected = specs(kind, ds.geometry, ds.len())?;
    wd.checkpoint_paths(kind, cfg)
        .iter()
        .zip(&expected)
        .map(|(path, spec)| {
            if !path.exists() {
                return Err(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("missing checkpoint {} (run `stvfr train` first)", path.display()),
                )));
            }
            load_checkpoint_for(path, spec)
        })
        .collect()
}

fn evaluate(cfg: &RunConfig, kind: ScheduleKind, nets: &[Network], ds: &Dataset) -> Result<EvalReport> {
    let system = kind.system(nets);
    let (trials, seed) = (cfg.eval_trials()?, cfg.eval_seed()?);
    match cfg.fusion()? {
        None => system.evaluate(ds, trials, seed),
        Some(f) => system.evaluate_trajectories(ds, f, trials, seed),
    }
}

/// Rank-1 evaluation of the trained `model.arch` checkpoint(s) on the
/// workdir dataset.
pub fn cmd_eval(cfg: &RunConfig) -> Result<(String, EvalReport)> {
    cfg.validate()?;
    let wd = Workdir::new(cfg.workdir());
    let kind = cfg.schedule()?;
    let ds = load_dataset(&wd)?;
    let nets = load_networks(&wd, cfg, kind, &ds)?;
    let report = evaluate(cfg, kind, &nets, &ds)?;
    let ids: Vec<usize> = ds.identities.iter().map(|i| i.id).collect();
    let body = format!("{}{}", echo("eval", cfg), report.to_text(&ids));
    let stem = format!("eval_{}", arch_name(kind));
    write_text(&wd.reports().join(format!("{stem}.txt")), &body)?;
    let csv = format!(
        "system,fusion,rank1_mean,rank1_std,rank1_all,n_trials,n_probes\n{},{},{},{},{},{},{}\n",
        arch_name(kind),
        cfg.get("eval.fusion"),
        report.rank1_mean,
        report.rank1_std,
        report.rank1_all(),
        report.n_trials,
        report.n_probes
    );
    write_text(&wd.reports().join(format!("{stem}.csv")), &csv)?;
    Ok((body, report))
}

/// Runs the finite-difference suite; any failing check is a runtime error
/// listing the failures.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<String> {
    cfg.validate()?;
    let wd = Workdir::new(cfg.workdir());
    let (seed, points) = cfg.gradcheck()?;
    let report = run_gradient_suite(seed, points)?;
    let body = format!("{}{}", echo("gradcheck", cfg), report.to_text());
    write_text(&wd.reports().join("gradcheck.txt"), &body)?;
    if !report.passed() {
        let list: Vec<String> = report
            .failures()
            .iter()
            .map(|c| format!("{} (max relative error {:.3e} > {:.0e})", c.name, c.max_rel_error, c.tolerance))
            .collect();
        return Err(Error::Domain {
            op: "gradcheck",
            reason: format!("{} check(s) failed: {}", list.len(), list.join(", ")),
        });
    }
    Ok(body)
}

/// Deployment specs (no training-only classification heads) of a system.
pub fn deployment_specs(kind: ScheduleKind, full: bool, geometry: Geometry) -> Result<Vec<NetworkSpec>> {
    let input = FeatShape::map(geometry.channels, geometry.height, geometry.width);
    let map_err = |e: Error| Error::config("data.height", format!("{}: {e}", arch_name(kind)));
    Ok(match (kind, full) {
        (ScheduleKind::CcmPretrainFinetune, true) => vec![ccm_spec(&CcmOptions::full())?],
        (ScheduleKind::CcmPretrainFinetune, false) => vec![ccm_spec(&CcmOptions {
            input,
            ..CcmOptions::desk()
        })
        .map_err(map_err)?],
        (ScheduleKind::CfrAutoencoderThenClassifier, full) => {
            let o = if full {
                CfrOptions::full()
            } else {
                CfrOptions {
                    input,
                    ..CfrOptions::desk()
                }
            };
            let hidden = if full { 128 } else { 32 };
            vec![
                cfr_autoencoder_spec(&o).map_err(map_err)?,
                cfr_classifier_spec(o.embedding_dim, hidden)?,
            ]
        }
        (_, true) => {
            return Err(Error::config(
                "model.scale",
                format!("no full-scale spec for {}; only ccm and cfr have one", arch_name(kind)),
            ))
        }
        (ScheduleKind::TbeStagewise, false) => vec![tbe_spec(&TbeOptions {
            input,
            ..TbeOptions::desk()
        })
        .map_err(map_err)?],
        (ScheduleKind::HaarnetStagewise, false) => vec![haarnet_spec(&HaarnetOptions {
            input,
            ..HaarnetOptions::desk()
        })
        .map_err(map_err)?],
    })
}

fn system_complexity(specs: &[NetworkSpec]) -> Result<ComplexityReport> {
    specs
        .iter()
        .try_fold(ComplexityReport::default(), |acc, s| Ok(acc + spec_complexity(s)?))
}

/// Per-layer costs and totals of `model.arch` at `model.scale`.
pub fn cmd_complexity(cfg: &RunConfig) -> Result<(String, ComplexityReport)> {
    cfg.validate()?;
    let wd = Workdir::new(cfg.workdir());
    let kind = cfg.schedule()?;
    let full = cfg.full_scale()?;
    let specs = deployment_specs(kind, full, cfg.dataset_config()?.geometry)?;
    let total = system_complexity(&specs)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Corrupt(e.to_string());
    w.write_record(["network", "layer", "kind", "params", "macs", "counted"]).map_err(csv_err)?;
    let mut table = String::new();
    let _ = writeln!(table, "{:<18} {:<28} {:<16} {:>12} {:>14} counted", "network", "layer", "kind", "params", "macs");
    for spec in &specs {
        for c in layer_costs(spec)? {
            let _ = writeln!(
                table,
                "{:<18} {:<28} {:<16} {:>12} {:>14} {}",
                spec.name,
                c.name,
                c.kind,
                c.params,
                c.macs,
                if c.counted { "yes" } else { "no" }
            );
            w.write_record([
                spec.name.clone(),
                c.name.clone(),
                c.kind.to_string(),
                c.params.to_string(),
                c.macs.to_string(),
                c.counted.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    let _ = writeln!(table, "n_operations: {}", total.n_operations);
    let _ = writeln!(table, "n_parameters: {}", total.n_parameters);
    let _ = writeln!(table, "n_layers: {}", total.n_layers);
    let csv_text = String::from_utf8(w.into_inner().map_err(|e| Error::Corrupt(e.to_string()))?)
        .map_err(|e| Error::Corrupt(e.to_string()))?;
    let stem = format!("complexity_{}_{}", arch_name(kind), cfg.get("model.scale"));
    let body = format!("{}{table}", echo("complexity", cfg));
    write_text(&wd.reports().join(format!("{stem}.txt")), &body)?;
    write_text(&wd.reports().join(format!("{stem}.csv")), &csv_text)?;
    Ok((body, total))
}

/// Table 1 at desk scale: complexity of every system, rank-1 of every
/// system with trained checkpoints, full-scale complexity where a spec
/// exists, and the published values.
pub fn cmd_report(cfg: &RunConfig) -> Result<String> {
    cfg.validate()?;
    let wd = Workdir::new(cfg.workdir());
    let geometry = cfg.dataset_config()?.geometry;
    let ds = load_dataset(&wd).ok();
    let mut rows = Vec::new();
    let mut notes = String::new();
    for kind in ALL_KINDS {
        let complexity = system_complexity(&deployment_specs(kind, false, geometry)?)?;
        let have = wd.checkpoint_paths(kind, cfg).iter().all(|p| p.exists());
        let eval = match (&ds, have) {
            (Some(ds), true) => {
                let nets = load_networks(&wd, cfg, kind, ds)?;
                Some(evaluate(cfg, kind, &nets, ds)?)
            }
            _ => {
                let _ = writeln!(notes, "{}: no trained checkpoint, rank-1 left blank", arch_name(kind));
                None
            }
        };
        rows.push(SystemRow {
            system: format!("desk:{}", system_name(kind)),
            complexity,
            eval,
        });
    }
    for kind in [ScheduleKind::CcmPretrainFinetune, ScheduleKind::CfrAutoencoderThenClassifier] {
        rows.push(SystemRow {
            system: format!("full:{}", system_name(kind)),
            complexity: system_complexity(&deployment_specs(kind, true, geometry)?)?,
            eval: None,
        });
    }
    let (text, csv_text) = table1_report(&rows)?;
    let body = format!("{}{text}{notes}", echo("report", cfg));
    write_text(&wd.reports().join("table1.txt"), &body)?;
    write_text(&wd.reports().join("table1.csv"), &csv_text)?;
    Ok(body)
}

/// Fresh, untrained networks of a schedule as `cmd_train` would
/// initialize them for `ds`.
pub fn initial_networks(cfg: &RunConfig, ds: &Dataset) -> Result<Vec<Network>> {
    let kind = cfg.schedule()?;
    networks_for(kind, ds.geometry, ds.len(), cfg.train_config()?.seed)
}
