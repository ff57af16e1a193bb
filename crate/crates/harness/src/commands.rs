//! The search and evaluate phases.

use std::path::{Path, PathBuf};
use std::time::Instant;

use lfm_autodiff::AutodiffError;
use lfm_core::evaluation::{train_and_evaluate, EvalReport};
use lfm_core::search::{MetricsRow, Search};
use lfm_core::search_space::Genotype;
use lfm_core::trilevel::{Order, Term};
use lfm_core::CoreError;

use crate::artifacts::{
    metrics_csv, read_file, write_file, Checkpoint, RunReport, CHECKPOINT_FILE, GENOTYPE_FILE,
    METRICS_FILE, REPORT_FILE,
};
use crate::config::{Datasets, ExperimentConfig};
use crate::error::{HarnessError, Result};
use crate::genotype;

/// Command-line overrides applied on top of a loaded config.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub order: Option<Order>,
    pub lambda: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.output {
            cfg.output = o.clone();
        }
        if let Some(order) = self.order {
            cfg.hypergrad.order = order;
        }
        if let Some(l) = self.lambda {
            cfg.weighting.lambda = l;
        }
        cfg.validate()
    }
}

#[derive(Clone, Debug, Default)]
pub struct SearchOptions {
    /// Negate one hypergradient term; used to exercise failure handling.
    pub fault: Option<Term>,
}

/// Runs the search phase and writes the genotype, metrics and checkpoint
/// files into `cfg.output`.
pub fn cmd_search(cfg: &ExperimentConfig) -> Result<RunReport> {
    let data = cfg.datasets()?;
    search_with(cfg, &data, &SearchOptions::default())
}

pub fn search_with(
    cfg: &ExperimentConfig,
    data: &Datasets,
    opts: &SearchOptions,
) -> Result<RunReport> {
    let start = Instant::now();
    let hash = cfg.hash();
    let out = &cfg.output;
    let scfg = cfg.search_config()?;
    let classes = scfg.supernet.num_classes;
    let ops = scfg.supernet.ops.clone();
    write_file(
        &out.join("config.toml"),
        format!("# config_hash {hash}\n{}", cfg.to_toml()).as_bytes(),
    )?;

    let mut search = Search::new(scfg, &data.train, &data.val)?;
    search.inject_fault(opts.fault);
    let checkpoint_path = out.join(CHECKPOINT_FILE);
    let metrics_path = out.join(METRICS_FILE);
    let mut rows: Vec<MetricsRow> = Vec::new();
    while !search.is_done() {
        let last_good = search.state.clone();
        let outcome = search.step();
        let failure = match outcome {
            Ok(row) if search.state.is_finite() => {
                rows.push(row);
                None
            }
            Ok(_) => Some(format!(
                "non-finite state after iteration {}",
                last_good.iteration
            )),
            Err(CoreError::NonFinite { what, iteration }) => {
                Some(format!("non-finite {what} at iteration {iteration}"))
            }
            Err(CoreError::Autodiff(e @ AutodiffError::NonFinite { .. })) => Some(format!(
                "non-finite value at iteration {}: {e}",
                last_good.iteration
            )),
            Err(e) => return Err(e.into()),
        };
        if let Some(msg) = failure {
            let at = last_good.iteration;
            Checkpoint::new(&hash, last_good).save(&checkpoint_path)?;
            write_file(&metrics_path, metrics_csv(&hash, classes, &rows).as_bytes())?;
            return Err(HarnessError::Runtime(format!(
                "{msg}; last good state (iteration {at}) saved to {}",
                checkpoint_path.display()
            )));
        }
        let every = cfg.search.checkpoint_every;
        if every > 0 && search.state.iteration % every == 0 && !search.is_done() {
            Checkpoint::new(&hash, search.state.clone()).save(&checkpoint_path)?;
        }
    }

    let genotype = search.genotype();
    let text = genotype::render(&genotype, &hash, &ops);
    let genotype_path = out.join(GENOTYPE_FILE);
    write_file(&genotype_path, text.as_bytes())?;
    write_file(&metrics_path, metrics_csv(&hash, classes, &rows).as_bytes())?;
    let supernet_val_accuracy = search.supernet_accuracy(&data.val)?;
    Checkpoint::new(&hash, search.state.clone()).save(&checkpoint_path)?;
    let report = RunReport {
        config_hash: hash,
        genotype: text,
        genotype_path: Some(genotype_path),
        metrics_path: Some(metrics_path),
        checkpoint_path: Some(checkpoint_path),
        wall_clock_secs: start.elapsed().as_secs_f64(),
        iterations: rows.len(),
        supernet_val_accuracy: Some(supernet_val_accuracy),
        evaluation: None,
    };
    report.save(&out.join(REPORT_FILE))?;
    Ok(report)
}

/// Loads a genotype file and checks it against the configured op set.
pub fn load_genotype(cfg: &ExperimentConfig, path: &Path, force: bool) -> Result<Genotype> {
    let file = genotype::parse(&read_file(path)?)?;
    file.check_op_set(&cfg.op_set()?, force)?;
    let want_reduce = cfg.supernet.reduction_cells;
    if file.genotype.reduce.is_some() != want_reduce {
        return Err(HarnessError::Genotype(format!(
            "genotype {} a reduction cell but the config has reduction_cells = {want_reduce}",
            if want_reduce { "lacks" } else { "has" }
        )));
    }
    Ok(file.genotype)
}

/// Trains the stacked network for `genotype` from scratch on the search
/// training and validation splits together, scoring on the held-out set.
pub fn evaluate_genotype(
    cfg: &ExperimentConfig,
    data: &Datasets,
    genotype: &Genotype,
) -> Result<EvalReport> {
    let train = data.train.concat(&data.val)?;
    Ok(train_and_evaluate(
        genotype,
        &cfg.eval_config(),
        &train,
        &data.test,
    )?)
}

pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    genotype_path: &Path,
    force: bool,
) -> Result<RunReport> {
    let start = Instant::now();
    let genotype = load_genotype(cfg, genotype_path, force)?;
    let data = cfg.datasets()?;
    let eval = evaluate_genotype(cfg, &data, &genotype)?;
    let hash = cfg.hash();
    let report = RunReport {
        genotype: genotype::render(&genotype, &hash, &cfg.op_set()?),
        config_hash: hash,
        genotype_path: Some(genotype_path.to_path_buf()),
        metrics_path: None,
        checkpoint_path: None,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        iterations: 0,
        supernet_val_accuracy: None,
        evaluation: Some(eval),
    };
    report.save(&cfg.output.join("evaluation.json"))?;
    Ok(report)
}

/// Search followed by evaluation of the derived cell, as one report.
pub fn search_and_evaluate(cfg: &ExperimentConfig) -> Result<RunReport> {
    let start = Instant::now();
    let data = cfg.datasets()?;
    let mut report = search_with(cfg, &data, &SearchOptions::default())?;
    let genotype = genotype::parse(&report.genotype)?.genotype;
    report.evaluation = Some(evaluate_genotype(cfg, &data, &genotype)?);
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    report.save(&cfg.output.join(REPORT_FILE))?;
    Ok(report)
}
