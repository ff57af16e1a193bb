//! Ablation grids: each point runs search then evaluation once per seed.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use lfm_core::cig::Capacity;
use rayon::prelude::*;

use crate::artifacts::write_file;
use crate::commands::search_and_evaluate;
use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::plot::{line_chart, Series};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Study {
    LambdaSweep,
    SyntheticOnly,
    GeneratorCapacity,
}

impl Study {
    pub const ALL: [Study; 3] = [
        Study::LambdaSweep,
        Study::SyntheticOnly,
        Study::GeneratorCapacity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Study::LambdaSweep => "lambda_sweep",
            Study::SyntheticOnly => "synthetic_only",
            Study::GeneratorCapacity => "generator_capacity",
        }
    }
}

impl FromStr for Study {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Study::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| HarnessError::Usage(format!("unknown study `{s}`")))
    }
}

/// One grid point: a label, its x position in the plot and its config.
#[derive(Clone, Debug)]
pub struct GridPoint {
    pub label: String,
    pub x: f64,
    pub config: ExperimentConfig,
}

pub fn grid(base: &ExperimentConfig, study: Study) -> Vec<GridPoint> {
    let point = |label: String, x: f64, edit: &dyn Fn(&mut ExperimentConfig)| {
        let mut config = base.clone();
        edit(&mut config);
        GridPoint { label, x, config }
    };
    match study {
        Study::LambdaSweep => base
            .ablation
            .lambdas
            .iter()
            .map(|&l| point(format!("lambda_{l}"), l, &|c| c.weighting.lambda = l))
            .collect(),
        Study::SyntheticOnly => [("synthetic_plus_training", false), ("synthetic_only", true)]
            .into_iter()
            .enumerate()
            .map(|(i, (label, only))| {
                point(label.into(), i as f64, &|c| {
                    c.weighting.synthetic_only = only
                })
            })
            .collect(),
        Study::GeneratorCapacity => {
            let mut caps = base.ablation.capacities.clone();
            caps.sort();
            caps.dedup();
            caps.into_iter()
                .enumerate()
                .map(|(i, cap): (usize, Capacity)| {
                    point(cap.name().into(), i as f64, &|c| c.generator.capacity = cap)
                })
                .collect()
        }
    }
}

/// Outcome of one (point, seed) sub-run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRow {
    pub point: String,
    pub seed: u64,
    /// Held-out test error and supernet validation accuracy, or the error message.
    pub outcome: std::result::Result<(f64, f64), String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub point: String,
    pub x: f64,
    pub runs: usize,
    pub failed: usize,
    pub mean_error: f64,
    pub std_error: f64,
    pub mean_supernet_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct AblationSummary {
    pub study: Study,
    pub runs: Vec<RunRow>,
    pub rows: Vec<SummaryRow>,
    pub summary_path: PathBuf,
    pub runs_path: PathBuf,
    pub plot_path: PathBuf,
}

/// Worker threads: `LFM_THREADS` if set, else the available cores.
pub fn worker_threads() -> usize {
    std::env::var("LFM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs the study grid with `base.ablation.seeds` seeds per point. Failed
/// sub-runs are recorded and the grid carries on.
pub fn cmd_ablate(base: &ExperimentConfig, study: Study) -> Result<AblationSummary> {
    base.validate()?;
    let dir = base.output.join(study.name());
    let points = grid(base, study);
    let jobs: Vec<(usize, u64, ExperimentConfig)> = points
        .iter()
        .enumerate()
        .flat_map(|(i, p)| {
            let dir = &dir;
            (0..base.ablation.seeds as u64).map(move |k| {
                let mut c = p.config.clone();
                c.seed = base.seed + k;
                c.dataset.seed = base.dataset.seed + k;
                c.output = dir.join(&p.label).join(format!("seed{}", c.seed));
                (i, c.seed, c)
            })
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
        .map_err(|e| HarnessError::Runtime(e.to_string()))?;
    let results: Vec<RunRow> = pool.install(|| {
        jobs.par_iter()
            .map(|(i, seed, cfg)| RunRow {
                point: points[*i].label.clone(),
                seed: *seed,
                outcome: cfg
                    .validate()
                    .and_then(|_| search_and_evaluate(cfg))
                    .and_then(|r| {
                        let eval = r.evaluation.expect("evaluation ran");
                        Ok((eval.error(), r.supernet_val_accuracy.unwrap_or(f64::NAN)))
                    })
                    .map_err(|e| e.to_string()),
            })
            .collect()
    });

    let rows: Vec<SummaryRow> = points
        .iter()
        .map(|p| {
            let mine: Vec<&RunRow> = results.iter().filter(|r| r.point == p.label).collect();
            let ok: Vec<(f64, f64)> = mine.iter().filter_map(|r| r.outcome.clone().ok()).collect();
            let (mean_error, std_error) = mean_std(&ok.iter().map(|o| o.0).collect::<Vec<_>>());
            let (mean_supernet_accuracy, _) = mean_std(&ok.iter().map(|o| o.1).collect::<Vec<_>>());
            SummaryRow {
                point: p.label.clone(),
                x: p.x,
                runs: mine.len(),
                failed: mine.len() - ok.len(),
                mean_error,
                std_error,
                mean_supernet_accuracy,
            }
        })
        .collect();

    let hash = base.hash();
    let mut summary = format!("# config_hash {hash}\n# study {}\npoint,x,runs,failed,mean_error,std_error,mean_supernet_accuracy\n", study.name());
    for r in &rows {
        writeln!(
            summary,
            "{},{},{},{},{},{},{}",
            r.point, r.x, r.runs, r.failed, r.mean_error, r.std_error, r.mean_supernet_accuracy
        )
        .unwrap();
    }
    let mut runs = format!("# config_hash {hash}\n# study {}\npoint,seed,status,test_error,supernet_accuracy,message\n", study.name());
    for r in &results {
        match &r.outcome {
            Ok((err, acc)) => writeln!(runs, "{},{},ok,{err},{acc},", r.point, r.seed).unwrap(),
            Err(msg) => writeln!(
                runs,
                "{},{},failed,,,\"{}\"",
                r.point,
                r.seed,
                msg.replace('"', "'")
            )
            .unwrap(),
        }
    }
    let x_label = match study {
        Study::LambdaSweep => "lambda",
        Study::SyntheticOnly => "mode (0: synthetic + training, 1: synthetic only)",
        Study::GeneratorCapacity => "generator capacity (0: tiny, 1: small, 2: medium)",
    };
    let series = Series {
        name: "test error".into(),
        points: rows
            .iter()
            .map(|r| (r.x, r.mean_error, r.std_error))
            .collect(),
    };
    let svg = line_chart(
        &format!("{} (mean ± std over seeds)", study.name()),
        x_label,
        "test error",
        &[series],
    );

    let summary_path = dir.join("summary.csv");
    let runs_path = dir.join("runs.csv");
    let plot_path = dir.join("summary.svg");
    write_file(&summary_path, summary.as_bytes())?;
    write_file(&runs_path, runs.as_bytes())?;
    write_file(&plot_path, svg.as_bytes())?;
    Ok(AblationSummary {
        study,
        runs: results,
        rows,
        summary_path,
        runs_path,
        plot_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn study_names_parse() {
        for s in Study::ALL {
            assert_eq!(s.name().parse::<Study>().unwrap(), s);
        }
        assert!("nope".parse::<Study>().is_err());
    }

    #[test]
    fn grids_cover_their_axes() {
        let base = ExperimentConfig::default();
        let l = grid(&base, Study::LambdaSweep);
        assert_eq!(
            l.iter()
                .map(|p| p.config.weighting.lambda)
                .collect::<Vec<_>>(),
            base.ablation.lambdas
        );
        let s = grid(&base, Study::SyntheticOnly);
        assert_eq!(s.len(), 2);
        assert!(!s[0].config.weighting.synthetic_only && s[1].config.weighting.synthetic_only);
        let c = grid(&base, Study::GeneratorCapacity);
        assert_eq!(
            c.iter().map(|p| p.label.as_str()).collect::<Vec<_>>(),
            ["tiny", "small", "medium"]
        );
    }

    #[test]
    fn sample_statistics() {
        assert_eq!(mean_std(&[1.0]), (1.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-12);
        assert!(mean_std(&[]).0.is_nan());
    }
}
