use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{Logs, Mode, RunConfig};
use crate::detect::EvalMetrics;
use crate::error::Result;
use crate::fusion::{FusionMethod, Granularity};
use crate::io::{fmt_f, write_atomic, write_csv};
use crate::synthdata::Protocol;

pub const METRICS_HEADER: [&str; 11] = [
    "run_id",
    "mode",
    "fusion",
    "granularity",
    "protocol",
    "seed",
    "split",
    "precision",
    "recall",
    "f_measure",
    "map50",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub plan: String,
    /// Epoch with the best validation mAP@50 (0 = before training).
    pub best_epoch: usize,
    pub val: EvalMetrics,
    pub test: EvalMetrics,
    /// Validation mAP@50 after each epoch, starting with epoch 0.
    pub val_curve: Vec<f64>,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedFailure {
    pub seed: u64,
    pub plan: String,
    pub reason: String,
}

/// Mean and population standard deviation over seeds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

pub fn population_std(values: &[f64]) -> Aggregate {
    let n = values.len();
    if n == 0 {
        return Aggregate {
            n,
            mean: f64::NAN,
            std: f64::NAN,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    Aggregate {
        n,
        mean,
        std: var.sqrt(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub run_id: String,
    pub mode: Mode,
    pub fusion: FusionMethod,
    pub granularity: Granularity,
    pub protocol: Protocol,
    pub plan: String,
    pub seeds: Vec<SeedResult>,
    pub failures: Vec<SeedFailure>,
}

#[derive(Serialize)]
struct RunMeta<'a> {
    run_id: &'a str,
    plan: &'a str,
    seed_semantics: &'a str,
    std_convention: &'a str,
    config: &'a RunConfig,
}

impl RunReport {
    pub(crate) fn new(cfg: &RunConfig, plan: &str) -> Self {
        RunReport {
            run_id: cfg.run_id(),
            mode: cfg.mode,
            fusion: cfg.fusion.method,
            granularity: cfg.fusion.granularity,
            protocol: cfg.protocol,
            plan: plan.to_string(),
            seeds: Vec::new(),
            failures: Vec::new(),
        }
    }

    pub fn val_map(&self) -> Aggregate {
        population_std(&self.seeds.iter().map(|s| s.val.map50).collect::<Vec<_>>())
    }

    pub fn test_map(&self) -> Aggregate {
        population_std(&self.seeds.iter().map(|s| s.test.map50).collect::<Vec<_>>())
    }

    pub fn completed(&self) -> bool {
        self.failures.is_empty() && !self.seeds.is_empty()
    }

    /// Rows in the metrics CSV layout, metrics as percentages.
    pub fn metric_rows(&self) -> Vec<Vec<String>> {
        let mut rows = Vec::new();
        for s in &self.seeds {
            for (split, m) in [("val", &s.val), ("test", &s.test)] {
                rows.push(vec![
                    self.run_id.clone(),
                    self.mode.to_string(),
                    self.fusion.to_string(),
                    self.granularity.to_string(),
                    self.protocol.to_string(),
                    s.seed.to_string(),
                    split.to_string(),
                    fmt_f(100.0 * m.precision),
                    fmt_f(100.0 * m.recall),
                    fmt_f(100.0 * m.f_measure),
                    fmt_f(100.0 * m.map50),
                ]);
            }
        }
        rows
    }

    fn summary_rows(&self) -> Vec<Vec<String>> {
        let failed = self.failures.iter().map(|f| f.seed.to_string()).collect::<Vec<_>>().join(" ");
        ["val", "test"]
            .iter()
            .map(|&split| {
                let pick = |f: fn(&EvalMetrics) -> f64| -> Vec<f64> {
                    self.seeds
                        .iter()
                        .map(|s| f(if split == "val" { &s.val } else { &s.test }))
                        .collect()
                };
                let map = population_std(&pick(|m| m.map50));
                let mean = |f| population_std(&pick(f)).mean;
                vec![
                    self.run_id.clone(),
                    self.mode.to_string(),
                    self.fusion.to_string(),
                    self.granularity.to_string(),
                    self.protocol.to_string(),
                    split.to_string(),
                    map.n.to_string(),
                    fmt_f(100.0 * mean(|m| m.precision)),
                    fmt_f(100.0 * mean(|m| m.recall)),
                    fmt_f(100.0 * mean(|m| m.f_measure)),
                    fmt_f(100.0 * map.mean),
                    fmt_f(100.0 * map.std),
                    failed.clone(),
                ]
            })
            .collect()
    }

    pub(crate) fn write(&self, dir: &Path, cfg: &RunConfig, logs: &Logs) -> Result<()> {
        write_csv(&dir.join("metrics.csv"), &METRICS_HEADER, self.metric_rows())?;
        write_csv(
            &dir.join("summary.csv"),
            &[
                "run_id",
                "mode",
                "fusion",
                "granularity",
                "protocol",
                "split",
                "seeds",
                "mean_precision",
                "mean_recall",
                "mean_f_measure",
                "mean_map50",
                "std_map50_population",
                "failed_seeds",
            ],
            self.summary_rows(),
        )?;
        write_csv(&dir.join("batches.csv"), &["seed", "epoch", "step", "frames"], &logs.batches)?;
        write_csv(&dir.join("train_log.csv"), &["seed", "epoch", "step", "loss"], &logs.losses)?;
        let curve = self.seeds.iter().flat_map(|s| {
            s.val_curve
                .iter()
                .enumerate()
                .map(move |(e, v)| vec![s.seed.to_string(), e.to_string(), fmt_f(100.0 * v)])
        });
        write_csv(&dir.join("val_curve.csv"), &["seed", "epoch", "val_map50"], curve)?;
        let meta = RunMeta {
            run_id: &self.run_id,
            plan: &self.plan,
            seed_semantics: "each seed sets the initialization of trained parameters and the training-data order",
            std_convention: "population (divisor = number of seeds)",
            config: cfg,
        };
        write_atomic(&dir.join("run.json"), serde_json::to_string_pretty(&meta)?.as_bytes())
    }
}
