//! Deterministic SGD over a precomputed batch schedule.
//!
//! `θ_{ε,t+1} = θ_{ε,t} − η_t ∇_θ 𝓛_{s+t}(θ_{ε,t}, ε)` where `s` is the
//! schedule position the run starts from. Paired runs with different ε see
//! the same batches `B_{s+t}`, so the only difference between them is the
//! perturbation itself.

use crate::error::{Error, Result};
use crate::io::{decode_float_block, encode_float_block, write_atomic, CHECKPOINT_MAGIC};
use crate::model::{Model, ParamVector};
use crate::numkit::{axpy, dist, Vector};
use crate::variation::LossVariation;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Fixed batch order: each epoch is a seeded shuffle of the training
/// indices cut into full batches (a ragged tail is dropped).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSchedule {
    batch_size: usize,
    seed: u64,
    num_examples: usize,
    batches: Vec<Vec<usize>>,
}

impl BatchSchedule {
    pub fn new(num_examples: usize, batch_size: usize, total_steps: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size > num_examples {
            return Err(Error::BadConfig(format!("batch size {batch_size} must lie in 1..={num_examples}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let per_epoch = num_examples / batch_size;
        let mut batches = Vec::with_capacity(total_steps);
        let mut order: Vec<usize> = (0..num_examples).collect();
        while batches.len() < total_steps {
            order.shuffle(&mut rng);
            for chunk in order.chunks_exact(batch_size).take(per_epoch) {
                if batches.len() == total_steps {
                    break;
                }
                batches.push(chunk.to_vec());
            }
        }
        Ok(Self { batch_size, seed, num_examples, batches })
    }

    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_examples(&self) -> usize {
        self.num_examples
    }

    pub fn batch(&self, t: usize) -> Result<&[usize]> {
        self.batches
            .get(t)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::BadInput(format!("step {t} is beyond the schedule length {}", self.batches.len())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrKind {
    Constant,
    Cosine,
}

/// Learning rate `η_t` for the steps of one run (t relative to its start).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub kind: LrKind,
    pub base_rate: f64,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn constant(base_rate: f64) -> Self {
        Self { kind: LrKind::Constant, base_rate, total_steps: usize::MAX }
    }

    pub fn cosine(base_rate: f64, total_steps: usize) -> Self {
        Self { kind: LrKind::Cosine, base_rate, total_steps }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_rate > 0.0 && self.base_rate.is_finite()) || self.total_steps == 0 {
            return Err(Error::BadConfig(format!("learning rate needs base_rate > 0 and total_steps > 0, got {self:?}")));
        }
        Ok(())
    }

    /// `η_t`; the cosine schedule is `η₀·½(1 + cos(π t / total))`.
    pub fn rate(&self, t: usize) -> f64 {
        match self.kind {
            LrKind::Constant => self.base_rate,
            LrKind::Cosine => {
                let frac = t as f64 / self.total_steps as f64;
                0.5 * self.base_rate * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// Parameters visited by one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Schedule position of `t = 0`.
    pub start_step: usize,
    /// Relative steps at which `thetas` were recorded (always includes 0 and T).
    pub steps: Vec<usize>,
    pub thetas: Vec<ParamVector>,
    /// `η_t` for `t = 0..T`.
    pub etas: Vec<f64>,
    /// `Σ_{s<t} η_s` for `t = 0..=T`.
    pub integrated_lr: Vec<f64>,
    pub eps: Vector,
    pub variation_id: String,
}

impl Trajectory {
    pub fn num_steps(&self) -> usize {
        self.etas.len()
    }

    pub fn final_theta(&self) -> &ParamVector {
        self.thetas.last().expect("trajectory holds θ_init")
    }

    /// θ at relative step `t`, if it was recorded.
    pub fn theta_at(&self, t: usize) -> Option<&ParamVector> {
        self.steps.binary_search(&t).ok().map(|i| &self.thetas[i])
    }
}

/// Runs `steps` SGD updates from `theta_init`, calling `observer(t, θ_t)`
/// for every `t = 0..=steps`.
#[allow(clippy::too_many_arguments)]
pub fn train_observed(
    model: &Model,
    var: &LossVariation,
    eps: &[f64],
    theta_init: &[f64],
    lr: &LrSchedule,
    start_step: usize,
    steps: usize,
    record_every: usize,
    observer: &mut dyn FnMut(usize, &[f64]) -> Result<()>,
) -> Result<Trajectory> {
    lr.validate()?;
    if record_every == 0 {
        return Err(Error::BadConfig("record_every must be positive".into()));
    }
    if start_step + steps > var.schedule().len() {
        return Err(Error::BadConfig(format!(
            "run needs schedule steps {start_step}..{} but the schedule has {}",
            start_step + steps,
            var.schedule().len()
        )));
    }
    if theta_init.len() != model.num_params() {
        return Err(Error::BadInput(format!("θ_init has dim {}, model has {} parameters", theta_init.len(), model.num_params())));
    }
    let mut theta = theta_init.to_vec();
    let mut traj = Trajectory {
        start_step,
        steps: vec![0],
        thetas: vec![theta.clone()],
        etas: Vec::with_capacity(steps),
        integrated_lr: Vec::with_capacity(steps + 1),
        eps: eps.to_vec(),
        variation_id: var.id(),
    };
    traj.integrated_lr.push(0.0);
    observer(0, &theta)?;
    let mut integrated = 0.0;
    for t in 0..steps {
        let eta = lr.rate(t);
        let g = var.perturbed_grad(model, &theta, start_step + t, eps).map_err(|e| match e {
            Error::NonFinite { .. } => Error::Diverged { step: t, last_finite: t },
            other => other,
        })?;
        axpy(-eta, &g, &mut theta);
        if !theta.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged { step: t + 1, last_finite: t });
        }
        integrated += eta;
        traj.etas.push(eta);
        traj.integrated_lr.push(integrated);
        let t_next = t + 1;
        if t_next % record_every == 0 || t_next == steps {
            traj.steps.push(t_next);
            traj.thetas.push(theta.clone());
        }
        observer(t_next, &theta)?;
    }
    Ok(traj)
}

/// Runs `steps` SGD updates from `theta_init` at schedule position `start_step`.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &Model,
    var: &LossVariation,
    eps: &[f64],
    theta_init: &[f64],
    lr: &LrSchedule,
    start_step: usize,
    steps: usize,
    record_every: usize,
) -> Result<Trajectory> {
    train_observed(model, var, eps, theta_init, lr, start_step, steps, record_every, &mut |_, _| Ok(()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergencePoint {
    pub t: usize,
    pub integrated_lr: f64,
    pub divergence: f64,
}

/// The ε-run, its ε = 0 twin and `‖θ_{ε,t} − θ_{0,t}‖` at every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRun {
    pub base: Trajectory,
    pub perturbed: Trajectory,
    pub points: Vec<DivergencePoint>,
}

/// Trains on `L` and on `𝓛(·, ε)` over the same batches, recording every step.
pub fn paired_divergence(
    model: &Model,
    var: &LossVariation,
    eps: &[f64],
    theta_init: &[f64],
    lr: &LrSchedule,
    start_step: usize,
    steps: usize,
) -> Result<PairedRun> {
    let zero = vec![0.0; var.num_terms()];
    let base = train(model, var, &zero, theta_init, lr, start_step, steps, 1)?;
    let perturbed = train(model, var, eps, theta_init, lr, start_step, steps, 1)?;
    let points = (0..=steps)
        .map(|t| DivergencePoint {
            t,
            integrated_lr: base.integrated_lr[t],
            divergence: dist(&perturbed.thetas[t], &base.thetas[t]),
        })
        .collect();
    Ok(PairedRun { base, perturbed, points })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    step: usize,
    schedule_position: usize,
    spec_hash: String,
    num_params: usize,
}

/// Parameters frozen at a schedule position.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub theta: ParamVector,
    /// Training steps taken to reach `theta`.
    pub step: usize,
    /// Next schedule index to consume when resuming.
    pub schedule_position: usize,
    pub spec_hash: String,
}

impl Checkpoint {
    pub fn new(model: &Model, theta: ParamVector, step: usize) -> Self {
        Self { theta, step, schedule_position: step, spec_hash: model.spec().content_hash() }
    }

    /// Checkpoint at the end of a trajectory.
    pub fn from_trajectory(model: &Model, traj: &Trajectory) -> Self {
        Self::new(model, traj.final_theta().clone(), traj.start_step + traj.num_steps())
    }

    pub fn check_model(&self, model: &Model) -> Result<()> {
        if self.spec_hash != model.spec().content_hash() || self.theta.len() != model.num_params() {
            return Err(Error::BadInput("checkpoint was produced by a different model spec".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = CheckpointMeta {
            step: self.step,
            schedule_position: self.schedule_position,
            spec_hash: self.spec_hash.clone(),
            num_params: self.theta.len(),
        };
        encode_float_block(CHECKPOINT_MAGIC, &self.theta, &meta)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (theta, meta): (Vec<f64>, CheckpointMeta) = decode_float_block(CHECKPOINT_MAGIC, bytes)?;
        if meta.num_params != theta.len() {
            return Err(Error::Format(format!("checkpoint metadata says N = {} but holds {}", meta.num_params, theta.len())));
        }
        Ok(Self { theta, step: meta.step, schedule_position: meta.schedule_position, spec_hash: meta.spec_hash })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{gen_synthetic, Dataset, ModelSpec, SyntheticConfig, SyntheticKind};
    use crate::numkit::Matrix;
    use crate::variation::{PerturbationTerm, VariationDescriptor};
    use std::sync::Arc;

    fn logistic_fixture() -> (Model, LossVariation) {
        let data = gen_synthetic(&SyntheticConfig::new(SyntheticKind::Blobs, 80, 2, 2, 0.1, 11)).unwrap();
        let train = Arc::new(data.train);
        let schedule = Arc::new(BatchSchedule::new(train.len(), 8, 200, 1).unwrap());
        let var = LossVariation::new(schedule, train, VariationDescriptor::new(vec![PerturbationTerm::new(vec![0, 1, 2])])).unwrap();
        (Model::new(ModelSpec::logistic(2, 2, 0.01)).unwrap(), var)
    }

    #[test]
    fn schedule_covers_each_epoch_once() {
        let s = BatchSchedule::new(10, 3, 9, 4).unwrap();
        assert_eq!(s.len(), 9);
        for epoch in 0..3 {
            let mut seen: Vec<usize> = (0..3).flat_map(|b| s.batch(epoch * 3 + b).unwrap().to_vec()).collect();
            seen.sort();
            seen.dedup();
            assert_eq!(seen.len(), 9);
        }
        assert_eq!(s, BatchSchedule::new(10, 3, 9, 4).unwrap());
        assert!(BatchSchedule::new(3, 4, 1, 0).is_err());
    }

    #[test]
    fn cosine_rate_positive_before_total() {
        let lr = LrSchedule::cosine(0.5, 10);
        assert_eq!(lr.rate(0), 0.5);
        assert!((0..10).all(|t| lr.rate(t) > 0.0));
        assert!(lr.rate(9) < lr.rate(1));
    }

    #[test]
    fn zero_steps_returns_init() {
        let (model, var) = logistic_fixture();
        let theta = model.init_params(0);
        let traj = train(&model, &var, &[0.0], &theta, &LrSchedule::constant(0.1), 0, 0, 1).unwrap();
        assert_eq!(traj.thetas, vec![theta]);
        assert_eq!(traj.integrated_lr, vec![0.0]);
    }

    #[test]
    fn quadratic_matrix_power_oracle() {
        let a = Matrix::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]);
        let model = Model::new(ModelSpec::quadratic(a.clone(), vec![0.0, 0.0])).unwrap();
        let ex = crate::model::LabeledExample { features: vec![0.0, 0.0], label: 0 };
        let train_set = Arc::new(Dataset::new(vec![ex], 1, 2, crate::model::Split::Train).unwrap());
        let schedule = Arc::new(BatchSchedule::new(1, 1, 10, 0).unwrap());
        let var = LossVariation::base(schedule, train_set).unwrap();
        let eta = 0.1;
        let theta0 = vec![1.0, -1.0];
        let traj = train(&model, &var, &[], &theta0, &LrSchedule::constant(eta), 0, 10, 1).unwrap();
        let mut step = Matrix::identity(2);
        for i in 0..2 {
            for j in 0..2 {
                step[(i, j)] -= eta * a[(i, j)];
            }
        }
        for (x, y) in traj.thetas[1].iter().zip(&step.matvec(&theta0)) {
            assert!((x - y).abs() < 1e-15);
        }
        let mut power = Matrix::identity(2);
        for _ in 0..10 {
            power = power.matmul(&step);
        }
        let expected = power.matvec(&theta0);
        for (x, y) in traj.final_theta().iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn records_every_k_plus_ends() {
        let (model, var) = logistic_fixture();
        let traj = train(&model, &var, &[0.0], &model.init_params(0), &LrSchedule::constant(0.1), 0, 10, 4).unwrap();
        assert_eq!(traj.steps, vec![0, 4, 8, 10]);
        assert_eq!(traj.integrated_lr.len(), 11);
    }

    #[test]
    fn bit_reproducible_and_resumable() {
        let (model, var) = logistic_fixture();
        let lr = LrSchedule::constant(0.2);
        let theta = model.init_params(3);
        let a = train(&model, &var, &[0.5], &theta, &lr, 0, 50, 1).unwrap();
        let b = train(&model, &var, &[0.5], &theta, &lr, 0, 50, 1).unwrap();
        assert_eq!(a, b);
        let first = train(&model, &var, &[0.5], &theta, &lr, 0, 20, 1).unwrap();
        let ckpt = Checkpoint::from_trajectory(&model, &first);
        let restored = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
        assert_eq!(restored, ckpt);
        let rest = train(&model, &var, &[0.5], &restored.theta, &lr, restored.schedule_position, 30, 1).unwrap();
        assert_eq!(rest.final_theta(), a.final_theta());
    }

    #[test]
    fn paired_zero_eps_is_identically_zero() {
        let (model, var) = logistic_fixture();
        let run = paired_divergence(&model, &var, &[0.0], &model.init_params(1), &LrSchedule::constant(0.1), 0, 25).unwrap();
        assert!(run.points.iter().all(|p| p.divergence == 0.0));
    }

    #[test]
    fn one_step_divergence_closed_form() {
        let (model, var) = logistic_fixture();
        let theta = model.init_params(1);
        let eta = 0.3;
        let eps = 0.05;
        let run = paired_divergence(&model, &var, &[eps], &theta, &LrSchedule::constant(eta), 0, 1).unwrap();
        let g = var.term_grad(&model, &theta, 0).unwrap();
        let expected = eta * eps * crate::numkit::norm2(&g);
        assert_eq!(run.points[0].divergence, 0.0);
        assert!((run.points[1].divergence - expected).abs() < 1e-14);
    }

    #[test]
    fn diverging_run_reports_last_finite_step() {
        let a = Matrix::from_diag(&[1.0]);
        let model = Model::new(ModelSpec::quadratic(a, vec![0.0])).unwrap();
        let ex = crate::model::LabeledExample { features: vec![0.0], label: 0 };
        let train_set = Arc::new(Dataset::new(vec![ex], 1, 1, crate::model::Split::Train).unwrap());
        let var = LossVariation::base(Arc::new(BatchSchedule::new(1, 1, 5000, 0).unwrap()), train_set).unwrap();
        // θ ← (1 − η)θ with η = 1e10 overflows within a few dozen steps
        let r = train(&model, &var, &[], &[1.0], &LrSchedule::constant(1e10), 0, 5000, 1);
        assert!(matches!(r, Err(Error::Diverged { .. })));
    }
}
