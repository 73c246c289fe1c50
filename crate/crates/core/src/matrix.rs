//! Precision × schedule × seed experiment grid with Best / Avg / σ aggregation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::{Precision, TrainConfig};
use crate::error::{Error, Result};
use crate::optim::ScheduleKind;
use crate::train::{load_data, run_training_on, write_artifacts};

fn default_schedules() -> Vec<ScheduleKind> {
    ScheduleKind::ALL.to_vec()
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("matrix-out")
}

/// Grid description. Config entries are TOML paths (relative to the matrix
/// file) or `preset:<name>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixConfig {
    pub flt32_config: String,
    pub int4_config: String,
    #[serde(default = "default_schedules")]
    pub schedules: Vec<ScheduleKind>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Overrides the epoch budget of both configs when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

impl MatrixConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: MatrixConfig = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        for c in [&mut cfg.flt32_config, &mut cfg.int4_config] {
            if !c.starts_with("preset:") && Path::new(c.as_str()).is_relative() {
                *c = dir.join(&*c).display().to_string();
            }
        }
        if cfg.out_dir.is_relative() {
            cfg.out_dir = dir.join(&cfg.out_dir);
        }
        Ok(cfg)
    }

    pub fn config_for(&self, precision: Precision) -> Result<TrainConfig> {
        let spec = match precision {
            Precision::Flt32 => &self.flt32_config,
            Precision::Int4 => &self.int4_config,
        };
        let mut cfg = TrainConfig::load(spec)?;
        if cfg.precision != precision {
            return Err(Error::Config(format!(
                "`{spec}` is a {} config, expected {precision}",
                cfg.precision
            )));
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub precision: Precision,
    pub schedule: ScheduleKind,
    pub seed: u64,
    /// Test accuracy in percent, or the failure message.
    pub result: std::result::Result<f64, String>,
    pub epochs_run: usize,
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub dataset: String,
    pub precision: Precision,
    pub schedule: ScheduleKind,
    /// Accuracies of the successful runs, percent.
    pub accuracies: Vec<f64>,
    pub failures: usize,
    pub best: Option<f64>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

impl CellResult {
    pub fn from_accuracies(
        dataset: &str,
        precision: Precision,
        schedule: ScheduleKind,
        accuracies: Vec<f64>,
        failures: usize,
    ) -> Self {
        let (best, mean, std) = if accuracies.is_empty() {
            (None, None, None)
        } else {
            (
                Some(accuracies.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
                Some(mean(&accuracies)),
                Some(sample_std(&accuracies)),
            )
        };
        CellResult {
            dataset: dataset.to_string(),
            precision,
            schedule,
            accuracies,
            failures,
            best,
            mean,
            std,
        }
    }
}

pub fn mean(values: &[f64]) -> f64 {
    if values.windows(2).all(|w| w[0] == w[1]) {
        return values.first().copied().unwrap_or(f64::NAN);
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n − 1 denominator); 0 for fewer than two values
/// or identical values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 || values.windows(2).all(|w| w[0] == w[1]) {
        return 0.0;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixResults {
    pub cells: Vec<CellResult>,
    pub runs: Vec<RunSummary>,
}

impl MatrixResults {
    /// One row per cell: dataset, precision, schedule, n, best, avg, sigma,
    /// failures. Accuracies in percent with two decimals.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("dataset,precision,schedule,n,best,avg,sigma,failures\n");
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_default();
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                c.dataset,
                c.precision,
                c.schedule.label(),
                c.accuracies.len(),
                fmt(c.best),
                fmt(c.mean),
                fmt(c.std),
                c.failures
            );
        }
        s
    }

    pub fn runs_csv(&self) -> String {
        let mut s = String::from("precision,schedule,seed,test_accuracy,epochs_run,wall_clock_secs,error\n");
        for r in &self.runs {
            let (acc, err) = match &r.result {
                Ok(a) => (format!("{a}"), String::new()),
                Err(e) => (String::new(), e.replace([',', '\n'], ";")),
            };
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.1},{}",
                r.precision,
                r.schedule.label(),
                r.seed,
                acc,
                r.epochs_run,
                r.wall_clock_secs,
                err
            );
        }
        s
    }
}

/// Run every (precision, schedule, seed) combination, writing per-run
/// artifacts under `out_dir/<precision>-<schedule>-seed<k>/` and the
/// aggregate tables `results.csv` and `runs.csv`. A failing run is recorded
/// and the grid continues.
pub fn reproduce_matrix(matrix: &MatrixConfig) -> Result<MatrixResults> {
    if matrix.seeds.is_empty() || matrix.schedules.is_empty() {
        return Err(Error::Config("matrix needs at least one seed and one schedule".into()));
    }
    fs::create_dir_all(&matrix.out_dir)?;
    let mut cells = vec![];
    let mut runs = vec![];
    for precision in Precision::ALL {
        let base = match matrix.config_for(precision) {
            Ok(c) => Some(c),
            Err(e) => {
                warn!("{precision}: {e}");
                for &schedule in &matrix.schedules {
                    for &seed in &matrix.seeds {
                        runs.push(RunSummary {
                            precision,
                            schedule,
                            seed,
                            result: Err(e.to_string()),
                            epochs_run: 0,
                            wall_clock_secs: 0.0,
                        });
                    }
                }
                None
            }
        };
        // Splits depend on the seed only, so data is loaded once per seed.
        let mut data_by_seed = vec![];
        if let Some(base) = &base {
            for &seed in &matrix.seeds {
                let mut c = base.clone();
                c.seed = seed;
                data_by_seed.push(load_data(&c).map_err(|e| e.to_string()));
            }
        }
        for &schedule in &matrix.schedules {
            let mut accuracies = vec![];
            let mut failures = 0;
            for (k, &seed) in matrix.seeds.iter().enumerate() {
                let Some(base) = &base else {
                    failures += 1;
                    continue;
                };
                let mut cfg = base.clone();
                cfg.seed = seed;
                cfg.schedule = schedule;
                cfg.name = format!("{}-{}-seed{}", cfg.name, schedule, seed);
                info!("matrix run {}", cfg.name);
                let outcome = data_by_seed[k]
                    .as_ref()
                    .map_err(Clone::clone)
                    .and_then(|data| run_training_on(&cfg, data).map_err(|e| e.to_string()));
                let dir = matrix.out_dir.join(format!("{precision}-{schedule}-seed{seed}"));
                let summary = match outcome {
                    Ok(out) => match write_artifacts(&out, &dir) {
                        Ok(()) => {
                            let acc = 100.0 * out.record.test_accuracy;
                            accuracies.push(acc);
                            RunSummary {
                                precision,
                                schedule,
                                seed,
                                result: Ok(acc),
                                epochs_run: out.record.epochs.len(),
                                wall_clock_secs: out.record.wall_clock_secs,
                            }
                        }
                        Err(e) => {
                            failures += 1;
                            RunSummary {
                                precision,
                                schedule,
                                seed,
                                result: Err(e.to_string()),
                                epochs_run: out.record.epochs.len(),
                                wall_clock_secs: out.record.wall_clock_secs,
                            }
                        }
                    },
                    Err(e) => {
                        warn!("{}: {e}", cfg.name);
                        failures += 1;
                        RunSummary {
                            precision,
                            schedule,
                            seed,
                            result: Err(e),
                            epochs_run: 0,
                            wall_clock_secs: 0.0,
                        }
                    }
                };
                runs.push(summary);
            }
            let dataset = base.as_ref().map(|b| b.dataset.clone()).unwrap_or_default();
            cells.push(CellResult::from_accuracies(
                &dataset, precision, schedule, accuracies, failures,
            ));
        }
    }
    let results = MatrixResults { cells, runs };
    fs::write(matrix.out_dir.join("results.csv"), results.to_csv())?;
    fs::write(matrix.out_dir.join("runs.csv"), results.runs_csv())?;
    Ok(results)
}
