//! Experiment configuration: a TOML file with nested sections, unknown keys
//! rejected, validated before any compute.

use std::path::{Path, PathBuf};

use lfm_core::cig::{Capacity, GeneratorLoss, GeneratorSpec};
use lfm_core::data::{
    load_binary, split, synth_blobs, synth_blobs_with_noise_seed, LabeledImageSet, SplitSpec,
};
use lfm_core::evaluation::EvalConfig;
use lfm_core::optim::{AdamConfig, OptimizerConfig, RateSchedule, SgdConfig};
use lfm_core::reweight::WeightingConfig;
use lfm_core::search::SearchConfig;
use lfm_core::search_space::{CandidateOp, ImageShape, OpSet, SupernetSpec};
use lfm_core::trilevel::HypergradMode;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::HarnessError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Gaussian blobs around per-class templates.
    Blobs,
    /// `LFMC` containers on disk.
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub source: DataSource,
    pub classes: usize,
    /// Examples per class in the search data (before the train/val split).
    pub per_class: usize,
    /// Examples per class in the held-out test set.
    pub test_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub separation: f64,
    pub seed: u64,
    pub path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Blobs,
            classes: 4,
            per_class: 150,
            test_per_class: 100,
            height: 8,
            width: 8,
            separation: 3.0,
            seed: 0,
            path: None,
            test_path: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub stratified: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        let d = SplitSpec::default();
        Self {
            train_fraction: d.train_fraction,
            stratified: d.stratified,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupernetConfig {
    pub cells: usize,
    pub nodes: usize,
    pub channels: usize,
    pub reduction_cells: bool,
    pub ops: Vec<CandidateOp>,
}

impl Default for SupernetConfig {
    fn default() -> Self {
        let d = SupernetSpec::default();
        Self {
            cells: d.cells,
            nodes: d.nodes,
            channels: d.channels,
            reduction_cells: d.reduction_cells,
            ops: d.ops.ops().to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub noise_dim: usize,
    pub label_embedding_dim: usize,
    pub capacity: Capacity,
    pub loss: GeneratorLoss,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let d = GeneratorSpec::new(
            2,
            ImageShape {
                height: 2,
                width: 2,
                channels: 1,
            },
        );
        Self {
            noise_dim: d.noise_dim,
            label_embedding_dim: d.label_embedding_dim,
            capacity: d.capacity,
            loss: GeneratorLoss::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    pub iterations: usize,
    pub batch_size: usize,
    pub shared_validation_batch: bool,
    /// Write a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for SearchSection {
    fn default() -> Self {
        Self {
            iterations: 200,
            batch_size: 32,
            shared_validation_batch: false,
            checkpoint_every: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub weights: SgdConfig,
    pub arch: AdamConfig,
    pub gan: OptimizerConfig,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            weights: SgdConfig::default(),
            arch: AdamConfig::default(),
            gan: OptimizerConfig::Sgd(SgdConfig::plain()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub lambdas: Vec<f64>,
    /// Seeds per grid point: `seed, seed + 1, ...`.
    pub seeds: usize,
    pub capacities: Vec<Capacity>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            lambdas: vec![0.0, 0.1, 0.5, 1.0, 2.0, 3.0],
            seeds: 3,
            capacities: Capacity::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Excluded from the config hash.
    pub output: PathBuf,
    pub dataset: DatasetConfig,
    pub split: SplitConfig,
    pub supernet: SupernetConfig,
    pub generator: GeneratorConfig,
    pub weighting: WeightingConfig,
    pub rates: RateSchedule,
    pub hypergrad: HypergradMode,
    pub search: SearchSection,
    pub optim: OptimConfig,
    pub evaluation: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            split: SplitConfig::default(),
            supernet: SupernetConfig::default(),
            generator: GeneratorConfig::default(),
            weighting: WeightingConfig::default(),
            rates: RateSchedule::default(),
            hypergrad: HypergradMode::default(),
            search: SearchSection::default(),
            optim: OptimConfig::default(),
            evaluation: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

/// The three data roles of one experiment.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: LabeledImageSet,
    pub val: LabeledImageSet,
    pub test: LabeledImageSet,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            HarnessError::Usage(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn input_shape(&self) -> ImageShape {
        ImageShape {
            height: self.dataset.height,
            width: self.dataset.width,
            channels: 1,
        }
    }

    pub fn op_set(&self) -> Result<OpSet, HarnessError> {
        OpSet::new(self.supernet.ops.clone()).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn supernet_spec(&self) -> Result<SupernetSpec, HarnessError> {
        Ok(SupernetSpec {
            cells: self.supernet.cells,
            nodes: self.supernet.nodes,
            channels: self.supernet.channels,
            num_classes: self.dataset.classes,
            input: self.input_shape(),
            reduction_cells: self.supernet.reduction_cells,
            ops: self.op_set()?,
        })
    }

    pub fn search_config(&self) -> Result<SearchConfig, HarnessError> {
        let supernet = self.supernet_spec()?;
        let generator = GeneratorSpec {
            noise_dim: self.generator.noise_dim,
            label_embedding_dim: self.generator.label_embedding_dim,
            capacity: self.generator.capacity,
            num_classes: supernet.num_classes,
            output: supernet.input,
        };
        Ok(SearchConfig {
            supernet,
            generator,
            generator_loss: self.generator.loss,
            weighting: self.weighting.clone(),
            rates: self.rates,
            mode: self.hypergrad,
            iterations: self.search.iterations,
            batch_size: self.search.batch_size,
            seed: self.seed,
            w_optimizer: self.optim.weights,
            a_optimizer: self.optim.arch,
            gan_optimizer: self.optim.gan,
            shared_validation_batch: self.search.shared_validation_batch,
        })
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            seed: self.seed,
            ..self.evaluation.clone()
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        let d = &self.dataset;
        if d.classes < 2 {
            return bad(format!(
                "dataset.classes must be at least 2, got {}",
                d.classes
            ));
        }
        if d.source == DataSource::Blobs && (d.per_class < 2 || d.test_per_class == 0) {
            return bad("dataset.per_class must be ≥ 2 and test_per_class ≥ 1".into());
        }
        if d.source == DataSource::File && (d.path.is_none() || d.test_path.is_none()) {
            return bad("file datasets need dataset.path and dataset.test_path".into());
        }
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction < 1.0) {
            return bad(format!(
                "split.train_fraction must lie in (0, 1), got {}",
                self.split.train_fraction
            ));
        }
        if self.ablation.seeds == 0 {
            return bad("ablation.seeds must be positive".into());
        }
        if let Some(l) = self.ablation.lambdas.iter().find(|l| !(**l >= 0.0)) {
            return bad(format!("ablation lambdas must be non-negative, got {l}"));
        }
        self.search_config()?
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.evaluation
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }

    /// SHA-256 over the canonical JSON form, output directory cleared.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Search/validation split of the search data plus the held-out test set.
    pub fn datasets(&self) -> Result<Datasets, HarnessError> {
        let d = &self.dataset;
        let (search, test) = match d.source {
            DataSource::Blobs => {
                let search = synth_blobs(
                    d.classes,
                    d.per_class,
                    (d.height, d.width),
                    d.separation,
                    d.seed,
                )?
                .data;
                let test = synth_blobs_with_noise_seed(
                    d.classes,
                    d.test_per_class,
                    (d.height, d.width),
                    d.separation,
                    d.seed,
                    d.seed ^ 0x7e57_5e7,
                )?
                .data;
                (search, test)
            }
            DataSource::File => {
                let load = |p: &Option<PathBuf>| -> Result<LabeledImageSet, HarnessError> {
                    Ok(load_binary(p.as_deref().expect("validated"))?)
                };
                (load(&d.path)?, load(&d.test_path)?)
            }
        };
        for set in [&search, &test] {
            let (h, w, c) = set.image_shape();
            if (h, w, c) != (d.height, d.width, 1) || set.num_classes() != d.classes {
                return Err(HarnessError::Config(format!(
                    "dataset is {h}x{w}x{c} with {} classes; config expects {}x{}x1 with {}",
                    set.num_classes(),
                    d.height,
                    d.width,
                    d.classes
                )));
            }
        }
        let s = split(
            &search,
            &SplitSpec {
                train_fraction: self.split.train_fraction,
                seed: self.seed,
                stratified: self.split.stratified,
            },
        )?;
        Ok(Datasets {
            train: search.subset(&s.train),
            val: search.subset(&s.val),
            test,
        })
    }
}

/// Short hash identifying an op set.
pub fn op_set_hash(ops: &OpSet) -> String {
    hex::encode(&Sha256::digest(ops.canonical().as_bytes())[..8])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml("[search]\niterashuns = 3\n").unwrap_err();
        assert!(matches!(err, HarnessError::Config(_)), "{err}");
        assert!(ExperimentConfig::from_toml("bogus = 1\n").is_err());
    }

    #[test]
    fn hash_ignores_output_but_not_settings() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.weighting.lambda = 0.5;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let cfg = ExperimentConfig::from_toml("seed = 4\n[weighting]\nlambda = 2.0\n").unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.weighting.lambda, 2.0);
        assert_eq!(cfg.search.iterations, 200);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(ExperimentConfig::from_toml("[weighting]\nlambda = -1.0\n").is_err());
        assert!(
            ExperimentConfig::from_toml("[hypergrad]\norder = \"second\"\neps = 0.0\n").is_err()
        );
        assert!(ExperimentConfig::from_toml("[supernet]\nops = [\"zero\", \"bogus\"]\n").is_err());
    }
}
