//! Independent training runs over a grid of drop ratios and seeds.

use std::path::Path;

use super::{unfairness, write_file, EvalReport, UnfairnessResult};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::{train, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub unfairness: UnfairnessResult,
    pub final_report: EvalReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub drop_ratio: f64,
    pub seed: u64,
    /// A failed cell keeps its error message and the sweep continues.
    pub outcome: std::result::Result<CellResult, String>,
}

pub const DEFAULT_GRID: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

fn cell_dir(out: &Path, p: f64, seed: u64) -> std::path::PathBuf {
    out.join(format!("p{p}_seed{seed}"))
}

fn run_cell(
    data: &Dataset,
    model_cfg: &ModelConfig,
    base: &TrainConfig,
    p: f64,
    seed: u64,
    out: Option<&Path>,
) -> std::result::Result<CellResult, String> {
    let cfg = TrainConfig {
        drop_ratio: p,
        master_seed: seed,
        run_tag: format!("{}_p{p}", base.run_tag),
        ..base.clone()
    };
    let dir = out.map(|o| cell_dir(o, p, seed));
    let outcome = train(data, model_cfg, &cfg, dir.as_deref()).map_err(|e| e.to_string())?;
    let unfairness = unfairness(&outcome.records).map_err(|e| e.to_string())?;
    let final_report = outcome
        .records
        .last()
        .map(|r| r.report.clone())
        .ok_or_else(|| "run produced no checkpoints".to_string())?;
    Ok(CellResult {
        unfairness,
        final_report,
    })
}

/// Trains one run per `(P, seed)` on at most `jobs` threads. Cells are
/// returned in grid order (P outer, seed inner) whatever the thread count.
pub fn sweep_p(
    data: &Dataset,
    model_cfg: &ModelConfig,
    base: &TrainConfig,
    p_values: &[f64],
    seeds: &[u64],
    jobs: usize,
    out: Option<&Path>,
) -> Result<Vec<SweepCell>> {
    if let Some(p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::TrainConfig(format!("drop ratio {p} is outside [0, 1]")));
    }
    let grid: Vec<(f64, u64)> = p_values
        .iter()
        .flat_map(|p| seeds.iter().map(move |s| (*p, *s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    let cells = pool.install(|| {
        use rayon::prelude::*;
        grid.par_iter()
            .map(|(p, seed)| SweepCell {
                drop_ratio: *p,
                seed: *seed,
                outcome: run_cell(data, model_cfg, base, *p, *seed, out),
            })
            .collect::<Vec<_>>()
    });
    if let Some(o) = out {
        write_sweep_csv(&o.join("sweep.csv"), &cells)?;
    }
    Ok(cells)
}

const HEADER: &str = "p,seed,status,best_overall_step,best_cold_step,overall_at_best_overall,\
heavy_at_best_overall,cold_at_best_overall,cold_at_best_cold,unfairness,final_overall,final_heavy,final_cold,error\n";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// One row per cell followed by one `mean` row per P. AUC columns are in
/// ×100 points.
pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let pts = |v: Option<f64>| v.map(|x| 100.0 * x);
    let mut out = String::from(HEADER);
    let mut ps: Vec<f64> = Vec::new();
    for c in cells {
        if !ps.contains(&c.drop_ratio) {
            ps.push(c.drop_ratio);
        }
        match &c.outcome {
            Ok(r) => {
                let u = &r.unfairness;
                out.push_str(&format!(
                    "{},{},ok,{},{},{},{},{},{},{},{},{},{},\n",
                    c.drop_ratio,
                    c.seed,
                    u.best_overall_step,
                    u.best_cold_step,
                    100.0 * u.overall_at_best_overall,
                    opt(pts(u.heavy_at_best_overall)),
                    100.0 * u.cold_at_best_overall,
                    100.0 * u.cold_at_best_cold,
                    u.unfairness,
                    opt(pts(r.final_report.overall)),
                    opt(pts(r.final_report.heavy)),
                    opt(pts(r.final_report.cold)),
                ));
            }
            Err(e) => {
                let msg = e.replace([',', '\n'], ";");
                out.push_str(&format!("{},{},failed,,,,,,,,,,,{msg}\n", c.drop_ratio, c.seed));
            }
        }
    }
    for p in ps {
        let ok: Vec<&CellResult> = cells
            .iter()
            .filter(|c| c.drop_ratio == p)
            .filter_map(|c| c.outcome.as_ref().ok())
            .collect();
        let m = |f: &dyn Fn(&CellResult) -> Option<f64>| opt(mean_of(ok.iter().map(|r| f(r))));
        out.push_str(&format!(
            "{p},mean,{}/{} ok,,,{},{},{},{},{},{},{},{},\n",
            ok.len(),
            cells.iter().filter(|c| c.drop_ratio == p).count(),
            m(&|r| Some(100.0 * r.unfairness.overall_at_best_overall)),
            m(&|r| r.unfairness.heavy_at_best_overall.map(|x| 100.0 * x)),
            m(&|r| Some(100.0 * r.unfairness.cold_at_best_overall)),
            m(&|r| Some(100.0 * r.unfairness.cold_at_best_cold)),
            m(&|r| Some(r.unfairness.unfairness)),
            m(&|r| r.final_report.overall.map(|x| 100.0 * x)),
            m(&|r| r.final_report.heavy.map(|x| 100.0 * x)),
            m(&|r| r.final_report.cold.map(|x| 100.0 * x)),
        ));
    }
    out
}

pub fn write_sweep_csv(path: &Path, cells: &[SweepCell]) -> Result<()> {
    write_file(path, &sweep_csv(cells))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(p: f64, seed: u64, ok: bool) -> SweepCell {
        let report = EvalReport::from_strata(Some(0.7), Some(0.72), Some(0.6));
        SweepCell {
            drop_ratio: p,
            seed,
            outcome: if ok {
                Ok(CellResult {
                    unfairness: UnfairnessResult {
                        best_overall_step: 200,
                        best_cold_step: 400,
                        overall_at_best_overall: 0.7,
                        heavy_at_best_overall: Some(0.72),
                        cold_at_best_overall: 0.6,
                        cold_at_best_cold: 0.61,
                        unfairness: 1.0,
                    },
                    final_report: report,
                })
            } else {
                Err("boom, failed".into())
            },
        }
    }

    #[test]
    fn csv_shape() {
        let cells: Vec<SweepCell> = (0..5).map(|s| cell(0.5, s, s != 2)).collect();
        let csv = sweep_csv(&cells);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 5 + 1);
        let cols = lines[0].split(',').count();
        assert!(lines.iter().all(|l| l.split(',').count() == cols));
        assert!(lines[3].contains("failed"));
        assert!(lines[6].starts_with("0.5,mean,4/5 ok"));
    }

    #[test]
    fn out_of_range_ratio_is_rejected() {
        let data = crate::model::tests::tiny_dataset();
        let cfg = crate::model::tests::tiny_config();
        assert!(sweep_p(&data, &cfg, &TrainConfig::default(), &[1.5], &[0], 1, None).is_err());
    }
}
