//! Run configuration: TOML documents with defaults for every field, dotted
//! `key=value` overrides and a seed override from the environment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{NetworkSpec, TapPosition, TapSet};
use crate::blockmix::BlockMixConfig;
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::mixer::MixerConfig;
use crate::optim::AdamConfig;

pub const SEED_ENV: &str = "MIPKD_SEED";

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Scratch,
    Logits,
    At,
    Fitnet,
    Fakd,
    Mipkd,
}

impl Method {
    pub fn needs_teacher(self) -> bool {
        self != Method::Scratch
    }

    pub fn uses_taps(self) -> bool {
        matches!(self, Method::At | Method::Fitnet | Method::Fakd | Method::Mipkd)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Scratch => "scratch",
            Method::Logits => "logits",
            Method::At => "at",
            Method::Fitnet => "fitnet",
            Method::Fakd => "fakd",
            Method::Mipkd => "mipkd",
        })
    }
}

/// Distillation positions: `count` evenly spaced taps, or explicit 1-based
/// unit indices for both networks.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TapConfig {
    pub count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub student: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher: Option<Vec<usize>>,
}

impl Default for TapConfig {
    fn default() -> Self {
        Self {
            count: 4,
            student: None,
            teacher: None,
        }
    }
}

impl TapConfig {
    pub fn resolve(&self, student: &NetworkSpec, teacher: &NetworkSpec) -> Result<TapSet> {
        let (su, tu) = (student.units(), teacher.units());
        match (&self.student, &self.teacher) {
            (None, None) => TapSet::evenly_spaced(su, tu, self.count),
            (Some(s), Some(t)) => {
                if s.len() != t.len() {
                    return Err(Error::Config(format!(
                        "taps.student has {} entries, taps.teacher {}",
                        s.len(),
                        t.len()
                    )));
                }
                let taps = TapSet {
                    positions: s
                        .iter()
                        .zip(t)
                        .map(|(&student, &teacher)| TapPosition { student, teacher })
                        .collect(),
                };
                taps.validate(su, tu)?;
                Ok(taps)
            }
            _ => Err(Error::Config("taps.student and taps.teacher must be given together".into())),
        }
    }
}

fn default_eval() -> Vec<DatasetSpec> {
    vec![DatasetSpec {
        name: "synthetic_eval".into(),
        augment: false,
        synth_count: 8,
        synth_seed: 1,
        ..DatasetSpec::default()
    }]
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub seed: u64,
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    /// Evaluate every this many iterations; 0 evaluates at the end only.
    pub eval_every: usize,
    /// Intermediate checkpoint interval; 0 writes the final one only.
    pub ckpt_every: usize,
    pub out_dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher_ckpt: Option<PathBuf>,
    pub teacher_spec: NetworkSpec,
    pub student_spec: NetworkSpec,
    pub taps: TapConfig,
    pub mixer: MixerConfig,
    pub blockmix: BlockMixConfig,
    pub weights: LossWeights,
    pub optimizer: AdamConfig,
    pub dataset: DatasetSpec,
    #[serde(default = "default_eval")]
    pub eval_datasets: Vec<DatasetSpec>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Mipkd,
            seed: 0,
            iters: 2000,
            batch: 16,
            lr: 1e-4,
            lr_decay_every: 100_000,
            lr_decay_factor: 0.1,
            eval_every: 0,
            ckpt_every: 0,
            out_dir: PathBuf::from("runs"),
            teacher_ckpt: None,
            teacher_spec: NetworkSpec::edsr(16, 8, 2),
            student_spec: NetworkSpec::edsr(8, 8, 2),
            taps: TapConfig::default(),
            mixer: MixerConfig::default(),
            blockmix: BlockMixConfig::default(),
            weights: LossWeights::default(),
            optimizer: AdamConfig::default(),
            dataset: DatasetSpec::default(),
            eval_datasets: default_eval(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            return Err(Error::Config("iters must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr = {} must be positive", self.lr)));
        }
        if !(self.lr_decay_factor > 0.0) {
            return Err(Error::Config("lr_decay_factor must be positive".into()));
        }
        if self.method.needs_teacher() && self.teacher_ckpt.is_none() {
            return Err(Error::Config(format!("method {} requires teacher_ckpt", self.method)));
        }
        self.student_spec.validate()?;
        self.weights.validate()?;
        self.optimizer.validate()?;
        self.dataset.validate()?;
        if self.dataset.scale != self.student_spec.scale {
            return Err(Error::Config(format!(
                "dataset scale x{} differs from student scale x{}",
                self.dataset.scale, self.student_spec.scale
            )));
        }
        for d in &self.eval_datasets {
            d.validate()?;
        }
        if self.method.needs_teacher() {
            self.teacher_spec.validate()?;
            if self.teacher_spec.scale != self.student_spec.scale {
                return Err(Error::Config(format!(
                    "teacher scale x{} differs from student scale x{}",
                    self.teacher_spec.scale, self.student_spec.scale
                )));
            }
        }
        if self.method.uses_taps() {
            self.taps.resolve(&self.student_spec, &self.teacher_spec)?;
        }
        if self.method == Method::Mipkd {
            self.mixer.validate()?;
            self.blockmix.validate()?;
        }
        Ok(())
    }

    /// `<method>_<arch>_<scale>x_<seed>`.
    pub fn run_name(&self) -> String {
        format!(
            "{}_{}_{}x_{}",
            self.method, self.student_spec.arch, self.student_spec.scale, self.seed
        )
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(self.run_name())
    }

    /// Parses a document layered over the defaults, then applies overrides.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let doc: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        Self::from_table(doc, overrides)
    }

    fn from_table(doc: toml::Table, overrides: &[String]) -> Result<Self> {
        let mut table = defaults_table()?;
        merge(&mut table, doc);
        apply_overrides(&mut table, overrides)?;
        toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(format!("config: {e}")))
    }

    /// Reads a config file, applies overrides, then the environment seed.
    /// Validation is left to the caller.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text, overrides)?;
        cfg.apply_env_seed()?;
        Ok(cfg)
    }

    pub fn apply_env_seed(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config: {e}")))
    }
}

fn defaults_table() -> Result<toml::Table> {
    toml::Table::try_from(TrainConfig::default()).map_err(|e| Error::Config(format!("defaults: {e}")))
}

/// Recursive table merge; `top` wins and non-table values replace wholesale.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

/// Applies `a.b.c=value` assignments, creating intermediate tables.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
        let path: Vec<&str> = key.trim().split('.').collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("override key {key:?} is malformed")));
        }
        let mut cur = &mut *table;
        for part in &path[..path.len() - 1] {
            let entry = cur
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            cur = entry
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override {key}: {part} is not a table")))?;
        }
        cur.insert(path[path.len() - 1].to_string(), parse_value(value.trim()));
    }
    Ok(())
}

/// Sequential distillation stages; each stage's student teaches the next.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    pub stages: Vec<TrainConfig>,
}

impl ChainConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    /// Each `[[stages]]` table is layered over the defaults and receives the
    /// same overrides.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("chain config: {e}")))?;
        let stages = match table.remove("stages") {
            Some(toml::Value::Array(stages)) => stages,
            _ => return Err(Error::Config("chain config needs [[stages]]".into())),
        };
        if let Some(key) = table.keys().next() {
            return Err(Error::Config(format!("chain config: unknown key {key}")));
        }
        let mut out = Vec::with_capacity(stages.len());
        for stage in stages {
            let toml::Value::Table(t) = stage else {
                return Err(Error::Config("chain stages must be tables".into()));
            };
            let mut cfg = TrainConfig::from_table(t, overrides)?;
            cfg.apply_env_seed()?;
            out.push(cfg);
        }
        Ok(Self { stages: out })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixer::MaskStrategy;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(TrainConfig::from_toml("", &[]).unwrap(), TrainConfig::default());
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = TrainConfig::from_toml(
            "method = \"scratch\"",
            &[
                "mixer.mask_strategy=cka".into(),
                "mixer.mask_keep_prob=0.3".into(),
                "iters=7".into(),
                "student_spec.channels=12".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.method, Method::Scratch);
        assert_eq!(cfg.mixer.mask_strategy, MaskStrategy::Cka);
        assert_eq!(cfg.mixer.mask_keep_prob, 0.3);
        assert_eq!(cfg.iters, 7);
        assert_eq!(cfg.student_spec.channels, 12);
    }

    #[test]
    fn unknown_keys_and_bad_overrides_fail() {
        assert!(TrainConfig::from_toml("nonsense = 1", &[]).is_err());
        assert!(TrainConfig::from_toml("", &["iters".into()]).is_err());
        assert!(TrainConfig::from_toml("", &["iters.x=1".into()]).is_err());
    }

    #[test]
    fn validation_rules() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_err(), "mipkd without teacher");
        cfg.teacher_ckpt = Some("t.ckpt".into());
        cfg.validate().unwrap();
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
        cfg.lr = 1e-4;
        cfg.iters = 0;
        assert!(cfg.validate().is_err());
        cfg.iters = 1;
        cfg.dataset.scale = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn run_name_layout() {
        let cfg = TrainConfig {
            seed: 3,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.run_name(), "mipkd_edsr_2x_3");
    }

    #[test]
    fn explicit_taps() {
        let t = TapConfig {
            count: 0,
            student: Some(vec![2, 4]),
            teacher: Some(vec![4, 8]),
        };
        let s = NetworkSpec::edsr(8, 4, 2);
        let tt = NetworkSpec::edsr(16, 8, 2);
        assert_eq!(t.resolve(&s, &tt).unwrap().teacher_indices(), vec![4, 8]);
        let bad = TapConfig {
            student: Some(vec![2]),
            ..t
        };
        assert!(bad.resolve(&s, &tt).is_err());
    }
}
