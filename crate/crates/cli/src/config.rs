//! Run configuration: one TOML file with a table per pipeline stage.
//!
//! Every field has a default, so an empty file (or no file at all) is a
//! valid configuration describing a small blobs/logistic smoke run. Unknown
//! keys are rejected at every level.

use std::path::{Path, PathBuf};

use iflab::experiments::{DivergenceConfig, FadingProtocol};
use iflab::influence::{AbifOptions, Estimator, HifOptions, Method, Solver};
use iflab::model::{Activation, ModelKind, SyntheticKind};
use iflab::numkit::DEFAULT_TOL;
use iflab::seed::derive_seed;
use iflab::trainer::LrKind;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    /// Root of every named sub-seed (`data`, `schedule`, `init`, `probes`, ...).
    pub run_seed: u64,
    /// Run directory; `--out` takes precedence.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub estimator: EstimatorConfig,
    pub influence: InfluenceConfig,
    pub divergence: DivergenceSection,
    pub first_order: FirstOrderConfig,
    pub fading: FadingConfig,
    pub correction: CorrectionSection,
}


/// Synthetic dataset; its seed is `derive_seed(run_seed, "data")`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: SyntheticKind,
    /// Examples over all three splits.
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
    pub label_noise: f64,
    pub test_fraction: f64,
    pub heldout_fraction: f64,
    pub separation: f64,
    /// Kind-dependent when absent (1.0 for blobs, 0 for xor, 0.1 for moons).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spread: Option<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: SyntheticKind::Blobs,
            n: 200,
            dim: 2,
            classes: 2,
            label_noise: 0.1,
            test_fraction: 0.2,
            heldout_fraction: 0.1,
            separation: 3.0,
            spread: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// `logistic` or `mlp`; input and output widths come from the data.
    pub kind: ModelKind,
    /// Hidden widths of an MLP.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub l2_reg: f64,
    /// Multiplier applied to the seeded initial parameters.
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { kind: ModelKind::Logistic, hidden: vec![16], activation: Activation::Tanh, l2_reg: 0.01, init_scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// SGD steps taken before the checkpoint.
    pub steps: usize,
    pub lr: f64,
    /// A cosine schedule decays over `steps`.
    pub lr_kind: LrKind,
    /// Schedule steps reserved after the checkpoint for experiments and
    /// correction fine-tuning.
    pub horizon: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 16, steps: 200, lr: 0.1, lr_kind: LrKind::Constant, horizon: 400 }
    }
}

/// Settings shared by every single-checkpoint estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    /// `hif`, `abif` or `tracin`.
    pub method: Method,
    pub solver: Solver,
    /// Added to the Hessian; 0 is only safe for strictly convex losses.
    pub damping: f64,
    pub tol: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
    /// Lanczos pairs kept by ABIF.
    pub abif_k: usize,
    pub abif_iters: usize,
    pub eig_floor: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        let abif = AbifOptions::default();
        Self {
            method: Method::Hif,
            solver: Solver::Cr,
            damping: 1e-4,
            tol: DEFAULT_TOL,
            max_iter: None,
            abif_k: abif.k,
            abif_iters: abif.num_iters,
            eig_floor: abif.eig_floor,
        }
    }
}

impl EstimatorConfig {
    pub fn build(&self, method: Method, run_seed: u64) -> Result<Estimator, CliError> {
        match method {
            Method::Hif => Ok(Estimator::Hif(HifOptions {
                solver: self.solver,
                damping: self.damping,
                tol: self.tol,
                max_iter: self.max_iter,
            })),
            Method::Abif => Ok(Estimator::Abif(AbifOptions {
                k: self.abif_k,
                num_iters: self.abif_iters,
                seed: derive_seed(run_seed, "abif"),
                eig_floor: self.eig_floor,
            })),
            Method::Tracin => Ok(Estimator::Tracin),
            Method::Exact => Err(CliError::Config("estimator.method: `exact` is not a single-checkpoint estimator".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InfluenceConfig {
    /// Score only the first `train_points` training examples (all when absent).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_points: Option<usize>,
    /// Score only the first `test_points` test examples (all when absent).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_points: Option<usize>,
}

/// Also drives `gronwall`, which re-runs the same paired trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DivergenceSection {
    pub upsample_size: usize,
    pub eps_grid: Vec<f64>,
    pub steps: usize,
    pub tail_fraction: f64,
    pub lr: f64,
}

impl Default for DivergenceSection {
    fn default() -> Self {
        let d = DivergenceConfig::new(vec![1e-3, 1e-2, 1e-1], 200, 0);
        Self { upsample_size: d.upsample_size, eps_grid: d.eps_grid, steps: d.steps, tail_fraction: d.tail_fraction, lr: 0.1 }
    }
}

impl DivergenceSection {
    pub fn build(&self, run_seed: u64) -> DivergenceConfig {
        DivergenceConfig {
            upsample_size: self.upsample_size,
            eps_grid: self.eps_grid.clone(),
            steps: self.steps,
            tail_fraction: self.tail_fraction,
            seed: derive_seed(run_seed, "divergence"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FirstOrderConfig {
    pub eps_grid: Vec<f64>,
    pub t_grid: Vec<usize>,
    /// The perturbed term is the first `term_size` training examples.
    pub term_size: usize,
    pub lr: f64,
}

impl Default for FirstOrderConfig {
    fn default() -> Self {
        Self { eps_grid: (0..7).map(|i| 1e-5 * 10f64.powf(i as f64 / 2.0)).collect(), t_grid: vec![10, 50, 200], term_size: 16, lr: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FadingConfig {
    pub methods: Vec<Method>,
    pub n_train_probes: usize,
    pub n_test_probes: usize,
    pub eps: f64,
    pub repeats: usize,
    pub steps: usize,
    pub ci_level: f64,
    pub lr: f64,
}

impl Default for FadingConfig {
    fn default() -> Self {
        let p = FadingProtocol::default();
        Self {
            methods: vec![Method::Hif, Method::Tracin],
            n_train_probes: p.n_train_probes,
            n_test_probes: p.n_test_probes,
            eps: p.eps,
            repeats: p.repeats,
            steps: p.steps,
            ci_level: p.ci_level,
            lr: 0.1,
        }
    }
}

impl FadingConfig {
    pub fn protocol(&self) -> FadingProtocol {
        FadingProtocol {
            n_train_probes: self.n_train_probes,
            n_test_probes: self.n_test_probes,
            eps: self.eps,
            repeats: self.repeats,
            steps: self.steps,
            ci_level: self.ci_level,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrectionSection {
    pub methods: Vec<iflab::correction::CorrectionMethod>,
    /// Raw ε values; the summary also reports `kε/(batch_size + kε)`.
    pub eps_grid: Vec<f64>,
    /// Size of the proponent, opponent or baseline set.
    pub k: usize,
    pub max_steps: usize,
    /// Fine-tuning learning rate.
    pub lr: f64,
    pub retention_probes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_jobs: Option<usize>,
}

impl Default for CorrectionSection {
    fn default() -> Self {
        let c = iflab::correction::CorrectionConfig::new(vec![0.0, 0.05, 0.1, 0.25, 0.5, 0.75], 0);
        Self {
            methods: c.methods,
            eps_grid: c.eps_grid,
            k: c.k,
            max_steps: c.max_steps,
            lr: c.lr,
            retention_probes: c.retention_probes,
            max_jobs: c.max_jobs,
        }
    }
}

impl CorrectionSection {
    pub fn build(&self, run_seed: u64) -> iflab::correction::CorrectionConfig {
        iflab::correction::CorrectionConfig {
            methods: self.methods.clone(),
            eps_grid: self.eps_grid.clone(),
            k: self.k,
            max_steps: self.max_steps,
            lr: self.lr,
            retention_probes: self.retention_probes,
            max_jobs: self.max_jobs,
            seed: derive_seed(run_seed, "correction"),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::Config(format!("config file {} not found", path.display())),
            _ => CliError::Config(format!("{}: {e}", path.display())),
        })?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
