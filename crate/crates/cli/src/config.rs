//! Flat `key=value` configuration with dotted section keys.
//!
//! A config file holds one `key=value` pair per line; blank lines and lines
//! starting with `#` are ignored. Command-line flags `--key=value` (or
//! `--key value`) override file entries. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use sha2::{Digest, Sha256};

use milpdl::baselines::BaselineKind;
use milpdl::data::SynthConfig;
use milpdl::model::{AggregatorKind, ModelConfig};
use milpdl::pdl::{Interpolation, InterpolationKind};
use milpdl::train::{
    ExperimentConfig, OptimizerKind, PdlConfig, Regularizer, ScheduleMode, TrainConfig,
};

/// Every recognized key with its default value.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("cv.folds", "10"),
    ("cv.repeats", "5"),
    ("data.path", ""),
    ("data.source", "synth"),
    ("model.aggregator", "abmil"),
    ("model.attention_dim", "128"),
    ("model.path", ""),
    ("model.projector_dims", "256,128,64"),
    ("output.dir", "milpdl-out"),
    ("pdl.b", "0.5"),
    ("pdl.e", "0.5"),
    ("pdl.g", "10"),
    ("pdl.p_max", "0.45"),
    ("pdl.rate_kind", "log"),
    ("pdl.schedule", "progressive"),
    ("pdl.schedule_kind", "log"),
    ("regularizer.kind", "pdl"),
    ("regularizer.rate", "0.1"),
    ("regularizer.threshold", "0.65"),
    ("run.workers", "0"),
    ("synth.bag_size_std", "2"),
    ("synth.feature_dim", "20"),
    ("synth.mean_bag_size", "20"),
    ("synth.n_bags", "500"),
    ("synth.negative_mean", "0"),
    ("synth.positive_fraction", "0.5"),
    ("synth.positive_mean", "1"),
    ("synth.seed", "0"),
    ("synth.signal_dims", "20"),
    ("synth.std", "1"),
    ("synth.witness_rate", "0.1"),
    ("train.epochs", "40"),
    ("train.lr", "0.0001"),
    ("train.optimizer", "adamw"),
    ("train.seed", "0"),
    ("train.standardize", "true"),
    ("train.weight_decay", "0.0001"),
];

/// Keys that only affect where or how fast results are produced.
const NON_SEMANTIC: &[&str] = &["output.dir", "run.workers"];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

fn known(key: &str) -> bool {
    DEFAULTS.iter().any(|(k, _)| *k == key)
}

impl RawConfig {
    pub fn defaults() -> Self {
        Self {
            values: DEFAULTS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        if !known(key) {
            bail!("unknown configuration key {key:?}");
        }
        self.values
            .insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    pub fn merge_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{origin}:{}: expected key=value, found {line:?}", n + 1))?;
            self.set(k, v)
                .with_context(|| format!("{origin}:{}", n + 1))?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        self.merge_text(&text, &path.display().to_string())
    }

    /// Applies `--key=value` / `--key value` flags.
    pub fn merge_flags(&mut self, flags: &[String]) -> Result<()> {
        let mut it = flags.iter();
        while let Some(flag) = it.next() {
            let body = flag.strip_prefix("--").ok_or_else(|| {
                anyhow!("unexpected argument {flag:?}; overrides look like --key=value")
            })?;
            match body.split_once('=') {
                Some((k, v)) => self.set(k, v)?,
                None => {
                    let v = it
                        .next()
                        .ok_or_else(|| anyhow!("flag --{body} needs a value"))?;
                    self.set(body, v)?;
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("key {key} has a default"))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.get(key);
        raw.parse::<T>().map_err(|e| anyhow!("{key}={raw}: {e}"))
    }

    /// Resolved configuration as sorted `key=value` lines.
    pub fn canonical_text(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// SHA-256 over the entries that influence results.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.values {
            if !NON_SEMANTIC.contains(&k.as_str()) {
                h.update(format!("{k}={v}\n"));
            }
        }
        hex::encode(h.finalize())
    }

    pub fn resolve(&self) -> Result<Settings> {
        Settings::from_raw(self)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Csv(PathBuf),
    Synth(SynthConfig),
}

/// Typed view of a resolved configuration.
#[derive(Clone, Debug)]
pub struct Settings {
    pub data: DataSource,
    pub experiment: ExperimentConfig,
    pub pdl: PdlConfig,
    pub folds: usize,
    pub repeats: usize,
    pub workers: usize,
    pub output_dir: PathBuf,
    pub model_path: PathBuf,
    pub threshold: f64,
}

fn interp(kind: InterpolationKind, raw: &RawConfig) -> Result<Interpolation> {
    let i = Interpolation {
        kind,
        base: raw.parse("pdl.g")?,
        exponent: raw.parse("pdl.e")?,
        offset: raw.parse("pdl.b")?,
    };
    i.validate()?;
    Ok(i)
}

impl Settings {
    fn from_raw(raw: &RawConfig) -> Result<Self> {
        let data = match raw.get("data.source") {
            "csv" => {
                let p = raw.get("data.path");
                if p.is_empty() {
                    bail!("data.source=csv requires data.path");
                }
                DataSource::Csv(PathBuf::from(p))
            }
            "synth" => {
                let s = SynthConfig {
                    n_bags: raw.parse("synth.n_bags")?,
                    feature_dim: raw.parse("synth.feature_dim")?,
                    mean_bag_size: raw.parse("synth.mean_bag_size")?,
                    bag_size_std: raw.parse("synth.bag_size_std")?,
                    witness_rate: raw.parse("synth.witness_rate")?,
                    positive_bag_fraction: raw.parse("synth.positive_fraction")?,
                    positive_mean: raw.parse("synth.positive_mean")?,
                    negative_mean: raw.parse("synth.negative_mean")?,
                    std: raw.parse("synth.std")?,
                    signal_dims: raw.parse("synth.signal_dims")?,
                    seed: raw.parse("synth.seed")?,
                };
                s.validate()?;
                DataSource::Synth(s)
            }
            other => bail!("data.source must be synth or csv, got {other:?}"),
        };

        let dims_raw = raw.get("model.projector_dims");
        let projector_dims = if dims_raw.is_empty() {
            Vec::new()
        } else {
            dims_raw
                .split(',')
                .map(|d| {
                    d.trim()
                        .parse::<usize>()
                        .map_err(|e| anyhow!("model.projector_dims: {e}"))
                })
                .collect::<Result<Vec<_>>>()?
        };
        let model = ModelConfig {
            input_dim: 1,
            projector_dims,
            attention_dim: raw.parse("model.attention_dim")?,
            aggregator: raw.parse::<AggregatorKind>("model.aggregator")?,
        };
        model.validate()?;

        let pdl = PdlConfig {
            p_max: raw.parse("pdl.p_max")?,
            rate_interp: interp(raw.parse("pdl.rate_kind")?, raw)?,
            schedule_interp: interp(raw.parse("pdl.schedule_kind")?, raw)?,
            schedule: raw.parse::<ScheduleMode>("pdl.schedule")?,
        };
        let rate: f64 = raw.parse("regularizer.rate")?;
        let threshold: f64 = raw.parse("regularizer.threshold")?;
        let regularizer = match raw.get("regularizer.kind") {
            "none" => Regularizer::None,
            "pdl" => Regularizer::Pdl(pdl),
            "vanilla" => Regularizer::Baseline(BaselineKind::Vanilla { rate }),
            "spatial" => Regularizer::Baseline(BaselineKind::Spatial { rate }),
            "drop_instance" => Regularizer::Baseline(BaselineKind::DropInstance { rate }),
            "attention_drop" => Regularizer::Baseline(BaselineKind::AttentionDrop { threshold }),
            other => bail!("unknown regularizer.kind {other:?}"),
        };
        let train = TrainConfig {
            epochs: raw.parse("train.epochs")?,
            learning_rate: raw.parse("train.lr")?,
            weight_decay: raw.parse("train.weight_decay")?,
            optimizer: raw.parse::<OptimizerKind>("train.optimizer")?,
            regularizer,
            seed: raw.parse("train.seed")?,
            ..TrainConfig::default()
        };
        train.validate()?;

        let output_dir = PathBuf::from(raw.get("output.dir"));
        let model_path = match raw.get("model.path") {
            "" => output_dir.join("model.params"),
            p => PathBuf::from(p),
        };
        let folds: usize = raw.parse("cv.folds")?;
        if folds < 2 {
            bail!("cv.folds must be at least 2");
        }
        let repeats: usize = raw.parse("cv.repeats")?;
        if repeats < 1 {
            bail!("cv.repeats must be at least 1");
        }
        Ok(Self {
            data,
            experiment: ExperimentConfig {
                model,
                train,
                standardize: raw.parse("train.standardize")?,
            },
            pdl,
            folds,
            repeats,
            workers: raw.parse("run.workers")?,
            output_dir,
            model_path,
            threshold,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let s = RawConfig::defaults().resolve().unwrap();
        assert_eq!(s.experiment.model.projector_dims, vec![256, 128, 64]);
        assert_eq!(s.experiment.train.epochs, 40);
        assert_eq!(s.pdl.p_max, 0.45);
        assert_eq!(s.pdl.rate_interp.base, 10.0);
        assert_eq!(s.pdl.rate_interp.exponent, 0.5);
        assert_eq!((s.folds, s.repeats), (10, 5));
    }

    #[test]
    fn file_then_flags() {
        let mut raw = RawConfig::defaults();
        raw.merge_text("# comment\npdl.p_max = 0.3\ntrain.epochs=7\n", "mem")
            .unwrap();
        raw.merge_flags(&[
            "--train.epochs=9".into(),
            "--pdl.rate_kind".into(),
            "cos".into(),
        ])
        .unwrap();
        let s = raw.resolve().unwrap();
        assert_eq!(s.pdl.p_max, 0.3);
        assert_eq!(s.experiment.train.epochs, 9);
        assert_eq!(s.pdl.rate_interp.kind, InterpolationKind::Cos);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        let mut raw = RawConfig::defaults();
        assert!(raw.merge_text("pdl.nope=1", "mem").is_err());
        assert!(raw.merge_text("garbage", "mem").is_err());
        raw.set("pdl.p_max", "1.5").unwrap();
        assert!(raw.resolve().is_err());
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = RawConfig::defaults();
        let mut b = RawConfig::defaults();
        b.set("output.dir", "elsewhere").unwrap();
        b.set("run.workers", "3").unwrap();
        assert_eq!(a.hash(), b.hash());
        b.set("train.seed", "4").unwrap();
        assert_ne!(a.hash(), b.hash());
    }
}
