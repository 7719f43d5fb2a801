use log::{error, info};

use super::report::METRICS_HEADER;
use super::{prepare, run_plan, Mode, Prepared, RunConfig, RunReport};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionMethod, Granularity};
use crate::io::{fmt_f, write_csv};
use crate::synthdata::{leave_one_out, make_split, Protocol};

/// The eleven comparison cells: three single-extractor modes, then every
/// side-using fusion method at both granularities.
pub fn matrix_cells(base: &RunConfig) -> Vec<RunConfig> {
    let mut cells = Vec::new();
    let plain = FusionConfig {
        method: FusionMethod::None,
        ..base.fusion
    };
    for mode in [Mode::BaselineFull, Mode::FrozenBackbone, Mode::ClPretrainedFrozen] {
        cells.push(RunConfig {
            run_id: None,
            mode,
            fusion: plain,
            ..base.clone()
        });
    }
    for method in FusionMethod::SIDELOAD {
        for granularity in [Granularity::Backbone, Granularity::Blockwise] {
            cells.push(RunConfig {
                run_id: None,
                mode: Mode::Sideload,
                fusion: FusionConfig {
                    method,
                    granularity,
                    ..base.fusion
                },
                ..base.clone()
            });
        }
    }
    for c in &mut cells {
        c.paths.outputs = matrix_dir(base);
    }
    cells
}

/// `<outputs>/<run_id or "matrix">`; cells write beneath it.
pub fn matrix_dir(base: &RunConfig) -> std::path::PathBuf {
    base.paths.outputs.join(base.run_id.as_deref().unwrap_or("matrix"))
}

pub struct MatrixReport {
    /// In cell order; `Err` holds the failure message of a cell.
    pub cells: Vec<(String, std::result::Result<RunReport, String>)>,
}

impl MatrixReport {
    pub fn get(&self, run_id: &str) -> Option<&RunReport> {
        self.cells.iter().find(|(id, _)| id == run_id).and_then(|(_, r)| r.as_ref().ok())
    }
}

/// Runs every cell on one shared corpus and shared pretrained checkpoints.
/// A failing cell is recorded and the sweep continues. Writes the combined
/// `metrics.csv` and `comparison.csv` (descending mean test mAP@50) under
/// the base output directory.
pub fn run_matrix(base: &RunConfig) -> Result<MatrixReport> {
    let mut shared = base.clone();
    shared.mode = Mode::Sideload;
    if !shared.fusion.method.uses_side() {
        shared.fusion.method = FusionMethod::Addition;
    }
    shared.validate()?;
    let prep = prepare(&shared)?;
    let plans = make_split(&prep.corpus, base.protocol)?;
    if plans.len() != 1 {
        return Err(Error::invalid("the matrix runs a single-split protocol; use `crossval` for leave_one_out"));
    }
    let mut cells = Vec::new();
    for cfg in matrix_cells(base) {
        let id = cfg.run_id();
        info!("matrix cell {id}");
        let outcome = run_plan(&cfg, &prep, &plans[0], &cfg.output_dir()).map_err(|e| {
            error!("matrix cell {id} failed: {e}");
            e.to_string()
        });
        cells.push((id, outcome));
    }
    let report = MatrixReport { cells };
    write_matrix(base, &report)?;
    Ok(report)
}

fn write_matrix(base: &RunConfig, report: &MatrixReport) -> Result<()> {
    let dir = matrix_dir(base);
    let rows = report
        .cells
        .iter()
        .filter_map(|(_, r)| r.as_ref().ok())
        .flat_map(|r| r.metric_rows());
    write_csv(&dir.join("metrics.csv"), &METRICS_HEADER, rows)?;

    let mut ranked: Vec<(&String, Option<&RunReport>, String)> = report
        .cells
        .iter()
        .map(|(id, r)| match r {
            Ok(r) if r.completed() => (id, Some(r), "ok".to_string()),
            Ok(r) => (id, Some(r), format!("{} seed(s) failed", r.failures.len())),
            Err(e) => (id, None, format!("failed: {e}")),
        })
        .collect();
    let key = |r: &Option<&RunReport>| r.filter(|r| !r.seeds.is_empty()).map(|r| r.test_map().mean);
    ranked.sort_by(|a, b| match (key(&a.1), key(&b.1)) {
        (Some(x), Some(y)) => y.total_cmp(&x).then_with(|| a.0.cmp(b.0)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.0.cmp(b.0),
    });
    let rows = ranked.into_iter().enumerate().map(|(i, (id, r, status))| {
        let pct = |v: f64| fmt_f(100.0 * v);
        let (mode, fusion, gran, test, val) = match r {
            Some(r) => (
                r.mode.to_string(),
                r.fusion.to_string(),
                r.granularity.to_string(),
                Some(r.test_map()),
                Some(r.val_map()),
            ),
            None => Default::default(),
        };
        let t = test.filter(|a| a.n > 0);
        let v = val.filter(|a| a.n > 0);
        vec![
            (i + 1).to_string(),
            id.clone(),
            mode,
            fusion,
            gran,
            t.map_or(String::new(), |a| pct(a.mean)),
            t.map_or(String::new(), |a| pct(a.std)),
            v.map_or(String::new(), |a| pct(a.mean)),
            v.map_or(String::new(), |a| pct(a.std)),
            t.map_or(0, |a| a.n).to_string(),
            status,
        ]
    });
    write_csv(
        &dir.join("comparison.csv"),
        &[
            "rank",
            "run_id",
            "mode",
            "fusion",
            "granularity",
            "mean_test_map50",
            "std_test_map50",
            "mean_val_map50",
            "std_val_map50",
            "seeds",
            "status",
        ],
        rows,
    )
}

/// Leave-one-video-out: each non-test video serves once as validation with
/// the test video fixed. Emits per-seed rows with the val-test gap and a
/// per-split summary.
pub fn cross_validate(cfg: &RunConfig) -> Result<Vec<RunReport>> {
    let cfg = RunConfig {
        protocol: Protocol::LeaveOneOut,
        ..cfg.clone()
    };
    cfg.validate()?;
    let prep: Prepared = prepare(&cfg)?;
    let dir = cfg.output_dir();
    let mut reports = Vec::new();
    for plan in leave_one_out(&prep.corpus) {
        reports.push(run_plan(&cfg, &prep, &plan, &dir.join(&plan.name))?);
    }
    let pct = |v: f64| fmt_f(100.0 * v);
    let per_seed = reports.iter().flat_map(|r| {
        r.seeds.iter().map(move |s| {
            vec![
                r.plan.clone(),
                s.seed.to_string(),
                pct(s.val.map50),
                pct(s.test.map50),
                pct((s.val.map50 - s.test.map50).abs()),
            ]
        })
    });
    write_csv(
        &dir.join("crossval.csv"),
        &["split", "seed", "val_map50", "test_map50", "gap"],
        per_seed,
    )?;
    let summary = reports.iter().map(|r| {
        let (v, t) = (r.val_map(), r.test_map());
        let gaps: Vec<f64> = r.seeds.iter().map(|s| (s.val.map50 - s.test.map50).abs()).collect();
        let g = super::population_std(&gaps);
        vec![
            r.plan.clone(),
            v.n.to_string(),
            pct(v.mean),
            pct(v.std),
            pct(t.mean),
            pct(t.std),
            pct(g.mean),
        ]
    });
    write_csv(
        &dir.join("crossval_summary.csv"),
        &[
            "split",
            "seeds",
            "mean_val_map50",
            "std_val_map50",
            "mean_test_map50",
            "std_test_map50",
            "mean_gap",
        ],
        summary,
    )?;
    Ok(reports)
}
