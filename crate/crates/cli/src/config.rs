//! Flat `section.key = value` run configuration. Every key has a default;
//! unknown keys and unparsable values are configuration errors naming the
//! key.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use stvfr_core::data::{AugmentRanges, DatasetConfig, Geometry, MiningPolicy};
use stvfr_core::eval::Fusion;
use stvfr_core::losses::LossConfig;
use stvfr_core::train::{ScheduleKind, SgdConfig, TrainConfig};
use stvfr_core::{Error, Result};

/// Environment variable overriding `paths.workdir`.
pub const WORKDIR_ENV: &str = "STV_WORKDIR";

/// `(key, default, description)` of every accepted key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("data.seed", "7", "seed of the synthetic dataset"),
    ("data.identities", "8", "number of enrolled identities"),
    ("data.videos_per_identity", "4", "video ROIs per identity"),
    ("data.channels", "1", "1 (gray) or 3 (color)"),
    ("data.height", "48", "ROI height in pixels"),
    ("data.width", "40", "ROI width in pixels"),
    ("model.arch", "ccm", "ccm | tbe | haarnet | cfr"),
    ("model.scale", "desk", "desk | full (full only for complexity of ccm and cfr)"),
    ("train.seed", "7", "seed of initialization, shuffling and augmentation"),
    ("train.lr", "0.01", "SGD learning rate"),
    ("train.momentum", "0.9", "SGD momentum"),
    ("train.weight_decay", "0.0001", "L2 weight decay"),
    ("train.batch_size", "16", "samples, triplets or pairs per update"),
    ("train.epochs", "default", "epochs of every stage, or `default`"),
    ("train.stage_epochs", "default", "comma-separated epochs per stage, or `default`"),
    ("train.augment_per_still", "4", "augmented copies of each still"),
    ("train.triplets_per_epoch", "64", "triplets drawn per epoch when sampling uniformly"),
    ("train.mining", "hardest", "hardest | semi_hard"),
    ("loss.alpha_triplet", "0.2", "triplet margin"),
    ("loss.beta_mean", "0.5", "mean-distance margin"),
    ("loss.gamma_std", "0.2", "standard-deviation margin"),
    ("loss.delta1", "1", "weight of the triplet term"),
    ("loss.delta2", "0.5", "weight of the mean-distance term"),
    ("loss.delta3", "0.25", "weight of the standard-deviation term"),
    ("loss.tmask_alpha", "1", "reconstruction weight inside the T region"),
    ("loss.tmask_beta", "0.25", "reconstruction weight outside the T region"),
    ("eval.trials", "10", "resampling trials"),
    ("eval.seed", "0", "seed of the probe resampling"),
    ("eval.fusion", "none", "none (per frame) | mean | max (per trajectory)"),
    ("gradcheck.seed", "20", "seed of the finite-difference points"),
    ("gradcheck.points", "20", "random points per check"),
    ("paths.workdir", "work", "root holding data/, checkpoints/ and reports/"),
    ("paths.checkpoint", "auto", "checkpoint path of single-network archs, or `auto`"),
    ("run.threads", "1", "worker threads for the deterministic parallel paths"),
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.trim().to_string();
                Ok(())
            }
            None => Err(Error::config(key, "unknown key")),
        }
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::config(pair, "overrides take the form key=value"))?;
        self.set(k.trim(), v)
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", n + 1), format!("expected `key = value`, got `{line}`")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("undeclared key {key}"))
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .parse()
            .map_err(|e: T::Err| Error::config(key, format!("cannot parse `{}`: {e}", self.get(key))))
    }

    /// The resolved configuration as `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn entries(&self) -> impl Iterator<Item = (&String, &String)> {
        self.values.iter()
    }

    pub fn dataset_config(&self) -> Result<DatasetConfig> {
        let geometry = Geometry {
            channels: self.parse("data.channels")?,
            height: self.parse("data.height")?,
            width: self.parse("data.width")?,
        };
        geometry.validate()?;
        let n_identities: usize = self.parse("data.identities")?;
        if n_identities < 2 {
            return Err(Error::config("data.identities", "need at least 2 identities"));
        }
        let videos_per_identity: usize = self.parse("data.videos_per_identity")?;
        if videos_per_identity == 0 {
            return Err(Error::config("data.videos_per_identity", "must be positive"));
        }
        Ok(DatasetConfig {
            seed: self.parse("data.seed")?,
            n_identities,
            videos_per_identity,
            geometry,
            ..DatasetConfig::default()
        })
    }

    pub fn schedule(&self) -> Result<ScheduleKind> {
        ScheduleKind::for_arch(self.get("model.arch")).ok_or_else(|| {
            Error::config(
                "model.arch",
                format!("unknown architecture `{}` (ccm, tbe, haarnet, cfr)", self.get("model.arch")),
            )
        })
    }

    pub fn full_scale(&self) -> Result<bool> {
        match self.get("model.scale") {
            "desk" => Ok(false),
            "full" => Ok(true),
            other => Err(Error::config("model.scale", format!("expected desk or full, got `{other}`"))),
        }
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        let cfg = LossConfig {
            alpha_triplet: self.parse("loss.alpha_triplet")?,
            beta_mean: self.parse("loss.beta_mean")?,
            gamma_std: self.parse("loss.gamma_std")?,
            delta1: self.parse("loss.delta1")?,
            delta2: self.parse("loss.delta2")?,
            delta3: self.parse("loss.delta3")?,
            tmask_alpha: self.parse("loss.tmask_alpha")?,
            tmask_beta: self.parse("loss.tmask_beta")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let epochs = match self.get("train.epochs") {
            "default" => None,
            _ => Some(self.parse("train.epochs")?),
        };
        let stage_epochs = match self.get("train.stage_epochs") {
            "default" => None,
            list => Some(
                list.split(',')
                    .map(|s| s.trim().parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::config("train.stage_epochs", format!("cannot parse `{list}`: {e}")))?,
            ),
        };
        let mining = match self.get("train.mining") {
            "hardest" => MiningPolicy::Hardest,
            "semi_hard" => MiningPolicy::SemiHard,
            other => return Err(Error::config("train.mining", format!("expected hardest or semi_hard, got `{other}`"))),
        };
        let cfg = TrainConfig {
            sgd: SgdConfig {
                lr: self.parse("train.lr")?,
                momentum: self.parse("train.momentum")?,
                weight_decay: self.parse("train.weight_decay")?,
            },
            batch_size: self.parse("train.batch_size")?,
            seed: self.parse("train.seed")?,
            loss: self.loss_config()?,
            epochs,
            stage_epochs,
            augment_per_still: self.parse("train.augment_per_still")?,
            augment: AugmentRanges::default(),
            triplets_per_epoch: self.parse("train.triplets_per_epoch")?,
            mining,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `None` evaluates every frame as its own probe.
    pub fn fusion(&self) -> Result<Option<Fusion>> {
        match self.get("eval.fusion") {
            "none" => Ok(None),
            s => Fusion::parse(s)
                .map(Some)
                .ok_or_else(|| Error::config("eval.fusion", format!("expected none, mean or max, got `{s}`"))),
        }
    }

    pub fn eval_trials(&self) -> Result<usize> {
        let t: usize = self.parse("eval.trials")?;
        if t == 0 {
            return Err(Error::config("eval.trials", "must be positive"));
        }
        Ok(t)
    }

    pub fn eval_seed(&self) -> Result<u64> {
        self.parse("eval.seed")
    }

    pub fn gradcheck(&self) -> Result<(u64, usize)> {
        let points: usize = self.parse("gradcheck.points")?;
        if points == 0 {
            return Err(Error::config("gradcheck.points", "must be positive"));
        }
        Ok((self.parse("gradcheck.seed")?, points))
    }

    pub fn threads(&self) -> Result<usize> {
        let t: usize = self.parse("run.threads")?;
        if t == 0 {
            return Err(Error::config("run.threads", "must be positive"));
        }
        Ok(t)
    }

    pub fn workdir(&self) -> PathBuf {
        PathBuf::from(self.get("paths.workdir"))
    }

    pub fn checkpoint_override(&self) -> Option<PathBuf> {
        match self.get("paths.checkpoint") {
            "auto" | "" => None,
            p => Some(PathBuf::from(p)),
        }
    }

    /// Checks every typed accessor so a bad value fails before any work.
    pub fn validate(&self) -> Result<()> {
        self.dataset_config()?;
        self.schedule()?;
        self.full_scale()?;
        self.train_config()?;
        self.fusion()?;
        self.eval_trials()?;
        self.eval_seed()?;
        self.gradcheck()?;
        self.threads()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_echo_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let mut back = RunConfig::default();
        back.set("train.lr", "0.5").unwrap();
        back.merge_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.dataset_config().unwrap(), DatasetConfig::default());
        assert_eq!(cfg.train_config().unwrap(), TrainConfig::default());
    }

    #[test]
    fn errors_name_keys() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.set("train.nope", "1"), Err(Error::Config { key, .. }) if key == "train.nope"));
        cfg.merge_text("# comment\n data.height = 8 # too small\n").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config { key, .. }) if key == "data.height"));
        let mut cfg = RunConfig::default();
        cfg.set_pair("train.lr=abc").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config { key, .. }) if key == "train.lr"));
        let mut cfg = RunConfig::default();
        cfg.set_pair("train.stage_epochs=1,x").unwrap();
        assert!(matches!(cfg.train_config(), Err(Error::Config { key, .. }) if key == "train.stage_epochs"));
        assert!(RunConfig::default().merge_text("no equals sign").is_err());
    }
}
