//! Flat TOML run configuration and the shipped presets.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{parse_architecture, Architecture, NetworkOptions};
use crate::neuron::{LifParams, SpikeMode};
use crate::objective::TargetSpec;
use crate::optim::{ScheduleKind, ScheduleSpec};
use crate::quant::QuantSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Flt32,
    Int4,
}

impl Precision {
    pub const ALL: [Precision; 2] = [Precision::Flt32, Precision::Int4];
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::Flt32 => "flt32",
            Precision::Int4 => "int4",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "flt32" => Ok(Precision::Flt32),
            "int4" => Ok(Precision::Int4),
            other => Err(Error::Config(format!("unknown precision `{other}`"))),
        }
    }
}

fn default_input_shape() -> Vec<usize> {
    vec![1, 28, 28]
}
fn default_true() -> bool {
    true
}
fn default_cosine_period() -> usize {
    10
}
fn default_lrstep_interval() -> usize {
    15
}
fn default_half() -> f64 {
    0.5
}
fn default_one() -> usize {
    1
}
fn default_patience() -> usize {
    15
}
fn default_validation_fraction() -> f64 {
    1.0 / 6.0
}
fn default_curve_window() -> usize {
    100
}
fn default_eval_batch() -> usize {
    256
}

/// One training run, as a flat set of keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub name: String,
    pub dataset: String,
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    #[serde(default = "default_input_shape")]
    pub input_shape: Vec<usize>,

    pub precision: Precision,
    pub batch_size: usize,
    pub decay_rate_beta: f64,
    pub threshold_theta: f64,
    pub slope_k: f64,
    pub initial_lr: f64,
    pub grad_clip: bool,
    pub weight_clip: bool,
    pub batchnorm: bool,
    pub dropout: f64,

    pub schedule: ScheduleKind,
    #[serde(default = "default_cosine_period")]
    pub cosine_period_epochs: usize,
    #[serde(default = "default_lrstep_interval")]
    pub lrstep_interval_epochs: usize,
    #[serde(default = "default_half")]
    pub lrstep_factor: f64,
    #[serde(default = "default_one")]
    pub lossstep_patience: usize,
    #[serde(default = "default_half")]
    pub lossstep_factor: f64,

    pub architecture: String,
    pub time_steps: usize,
    pub seed: u64,
    pub epochs: usize,
    #[serde(default = "default_patience")]
    pub early_stop_patience: usize,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_subset: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_subset: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_subset: Option<usize>,

    #[serde(default)]
    pub detach_reset: bool,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    #[serde(default = "default_curve_window")]
    pub curve_window: usize,
    /// False for rows whose dataset has no loader here.
    #[serde(default = "default_true")]
    pub runnable: bool,
}

pub const PRESET_NAMES: [&str; 8] = [
    "mnist-flt32",
    "mnist-int4",
    "fmnist-flt32",
    "fmnist-int4",
    "dvs128-flt32",
    "dvs128-int4",
    "desk-flt32",
    "desk-int4",
];

struct Row {
    batch: usize,
    beta: f64,
    theta: f64,
    k: f64,
    lr: f64,
    grad_clip: bool,
    weight_clip: bool,
    bn: bool,
    dropout: f64,
}

fn base(name: &str, dataset: &str, dir: &str, precision: Precision, row: Row) -> TrainConfig {
    let file = |f: &str| PathBuf::from(format!("{dir}/{f}"));
    TrainConfig {
        name: name.to_string(),
        dataset: dataset.to_string(),
        train_images: file("train-images-idx3-ubyte.gz"),
        train_labels: file("train-labels-idx1-ubyte.gz"),
        test_images: file("t10k-images-idx3-ubyte.gz"),
        test_labels: file("t10k-labels-idx1-ubyte.gz"),
        input_shape: default_input_shape(),
        precision,
        batch_size: row.batch,
        decay_rate_beta: row.beta,
        threshold_theta: row.theta,
        slope_k: row.k,
        initial_lr: row.lr,
        grad_clip: row.grad_clip,
        weight_clip: row.weight_clip,
        batchnorm: row.bn,
        dropout: row.dropout,
        schedule: ScheduleKind::Cosine,
        cosine_period_epochs: default_cosine_period(),
        lrstep_interval_epochs: default_lrstep_interval(),
        lrstep_factor: 0.5,
        lossstep_patience: 1,
        lossstep_factor: 0.5,
        architecture: "16Conv5-AP2-64Conv5-AP2-1024Dense10".into(),
        time_steps: 100,
        seed: 0,
        epochs: 150,
        early_stop_patience: default_patience(),
        validation_fraction: default_validation_fraction(),
        train_subset: None,
        validation_subset: None,
        test_subset: None,
        detach_reset: false,
        eval_batch_size: default_eval_batch(),
        curve_window: default_curve_window(),
        runnable: true,
    }
}

impl TrainConfig {
    pub fn preset(name: &str) -> Result<Self> {
        use Precision::*;
        let mnist_flt = Row {
            batch: 128,
            beta: 0.92,
            theta: 2.0,
            k: 6.0,
            lr: 1.9e-3,
            grad_clip: true,
            weight_clip: true,
            bn: true,
            dropout: 0.09,
        };
        let mnist_int = Row {
            batch: 128,
            beta: 0.99,
            theta: 2.9,
            k: 13.8,
            lr: 5.4e-3,
            grad_clip: true,
            weight_clip: false,
            bn: true,
            dropout: 0.0,
        };
        let cfg = match name {
            "mnist-flt32" => base(name, "mnist", "data/mnist", Flt32, mnist_flt),
            "mnist-int4" => base(name, "mnist", "data/mnist", Int4, mnist_int),
            "fmnist-flt32" => base(
                name,
                "fmnist",
                "data/fashion-mnist",
                Flt32,
                Row {
                    batch: 128,
                    beta: 0.39,
                    theta: 1.5,
                    k: 7.7,
                    lr: 2.0e-3,
                    grad_clip: true,
                    weight_clip: true,
                    bn: true,
                    dropout: 0.13,
                },
            ),
            "fmnist-int4" => base(
                name,
                "fmnist",
                "data/fashion-mnist",
                Int4,
                Row {
                    batch: 128,
                    beta: 0.97,
                    theta: 2.5,
                    k: 5.6,
                    lr: 2.9e-3,
                    grad_clip: false,
                    weight_clip: false,
                    bn: true,
                    dropout: 0.07,
                },
            ),
            "dvs128-flt32" | "dvs128-int4" => {
                let (precision, row, lrstep) = if name.ends_with("flt32") {
                    let row = Row {
                        batch: 16,
                        beta: 0.72,
                        theta: 2.5,
                        k: 9.7,
                        lr: 2.4e-3,
                        grad_clip: false,
                        weight_clip: true,
                        bn: true,
                        dropout: 0.29,
                    };
                    (Flt32, row, 15)
                } else {
                    let row = Row {
                        batch: 16,
                        beta: 0.61,
                        theta: 0.4,
                        k: 4.4,
                        lr: 2.6e-3,
                        grad_clip: true,
                        weight_clip: true,
                        bn: false,
                        dropout: 0.20,
                    };
                    (Int4, row, 20)
                };
                let mut c = base(name, "dvs128", "data/dvs128", precision, row);
                c.input_shape = vec![2, 32, 32];
                c.architecture = "16Conv5-AP2-32Conv5-AP2-800Dense11".into();
                c.lossstep_patience = 2;
                c.lrstep_interval_epochs = lrstep;
                c.runnable = false;
                c
            }
            "desk-flt32" | "desk-int4" => {
                let (precision, row) = if name.ends_with("flt32") {
                    (Flt32, mnist_flt)
                } else {
                    (Int4, mnist_int)
                };
                let mut c = base(name, "mnist", "data/mnist-desk", precision, row);
                c.architecture = "8Conv5-AP2-16Conv5-AP2-Dense10".into();
                c.time_steps = 25;
                c.epochs = 15;
                c.batch_size = 32;
                c.train_subset = Some(2000);
                c.validation_subset = Some(500);
                c.test_subset = Some(1000);
                c
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown preset `{other}` (known: {})",
                    PRESET_NAMES.join(", ")
                )))
            }
        };
        Ok(cfg)
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Load from a file; relative dataset paths resolve against the file's
    /// directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = TrainConfig::from_toml_str(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, dir: &Path) {
        for p in [
            &mut self.train_images,
            &mut self.train_labels,
            &mut self.test_images,
            &mut self.test_labels,
        ] {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }

    /// Load `preset:<name>` or a TOML file.
    pub fn load(spec: &str) -> Result<Self> {
        match spec.strip_prefix("preset:") {
            Some(name) => TrainConfig::preset(name),
            None => TrainConfig::from_file(spec),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.seed > i64::MAX as u64 {
            return bad(format!("seed must be at most {} (TOML integer range)", i64::MAX));
        }
        if self.time_steps == 0 {
            return bad("time_steps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!(
                "validation_fraction must lie in (0, 1), got {}",
                self.validation_fraction
            ));
        }
        if self.curve_window == 0 {
            return bad("curve_window must be at least 1".into());
        }
        if self.cosine_period_epochs == 0 {
            return bad("cosine_period_epochs must be at least 1".into());
        }
        self.lif_params()?;
        self.schedule_spec(1).validate()?;
        self.architecture()?;
        Ok(())
    }

    pub fn lif_params(&self) -> Result<LifParams> {
        LifParams::new(self.decay_rate_beta, self.threshold_theta, self.slope_k)
    }

    pub fn architecture(&self) -> Result<Architecture> {
        parse_architecture(&self.architecture, &self.input_shape)
    }

    pub fn quant_spec(&self) -> QuantSpec {
        let mut q = match self.precision {
            Precision::Flt32 => QuantSpec::disabled(),
            Precision::Int4 => QuantSpec::int4(),
        };
        q.clip_proxy = self.weight_clip;
        q
    }

    pub fn network_options(&self) -> Result<NetworkOptions> {
        Ok(NetworkOptions {
            lif: self.lif_params()?,
            quant: self.quant_spec(),
            batchnorm: self.batchnorm,
            dropout: self.dropout,
            detach_reset: self.detach_reset,
            spike_mode: SpikeMode::Hard,
        })
    }

    /// Schedule with the cosine period converted from epochs to iterations.
    pub fn schedule_spec(&self, iters_per_epoch: u64) -> ScheduleSpec {
        ScheduleSpec {
            kind: self.schedule,
            initial_lr: self.initial_lr,
            cosine_period: self.cosine_period_epochs as u64 * iters_per_epoch,
            step_interval_epochs: self.lrstep_interval_epochs,
            step_factor: self.lrstep_factor,
            loss_patience: self.lossstep_patience,
            loss_factor: self.lossstep_factor,
        }
    }

    pub fn targets(&self, classes: usize) -> TargetSpec {
        TargetSpec::new(classes, self.time_steps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_is_valid_and_round_trips() {
        for name in PRESET_NAMES {
            let cfg = TrainConfig::preset(name).unwrap();
            cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            let text = cfg.to_toml_string().unwrap();
            assert_eq!(TrainConfig::from_toml_str(&text).unwrap(), cfg, "{name}");
        }
    }

    #[test]
    fn table_rows() {
        let c = TrainConfig::preset("mnist-int4").unwrap();
        assert_eq!(
            (
                c.batch_size,
                c.decay_rate_beta,
                c.threshold_theta,
                c.slope_k,
                c.initial_lr
            ),
            (128, 0.99, 2.9, 13.8, 5.4e-3)
        );
        assert!(c.grad_clip && !c.weight_clip && c.batchnorm && c.dropout == 0.0);
        let d = TrainConfig::preset("dvs128-int4").unwrap();
        assert!(!d.runnable && !d.batchnorm && d.lrstep_interval_epochs == 20 && d.lossstep_patience == 2);
        assert_eq!(d.architecture().unwrap().classes(), 11);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let mut cfg = TrainConfig::preset("desk-flt32").unwrap();
        let text = cfg.to_toml_string().unwrap();
        assert!(TrainConfig::from_toml_str(&format!("{text}\nbogus = 1\n")).is_err());
        let bad = text.replace("dropout = 0.09", "dropout = 1.5");
        assert!(TrainConfig::from_toml_str(&bad).is_err());
        assert!(TrainConfig::preset("imagenet").is_err());
        cfg.seed = u64::MAX;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn cosine_period_in_iterations() {
        let c = TrainConfig::preset("desk-flt32").unwrap();
        assert_eq!(c.schedule_spec(63).cosine_period, 630);
    }
}
