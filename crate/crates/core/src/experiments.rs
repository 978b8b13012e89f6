//! Measurement protocols: parameter divergence against integrated learning
//! rate, the Gronwall bound and its sharpness, the first-order validity
//! window of the ε-expansion, and the fading of influence over time.

use crate::error::{Error, Result};
use crate::influence::{exact_eps_path, influence_score, Estimator, Method};
use crate::io::{fmt_f64, write_csv};
use crate::model::{Dataset, Model};
use crate::numkit::{dense_sym_eig, dist, linfit, materialize, mean_ci, norm2, pearson, topk_eigs, FnOperator, LineFit, Vector};
use crate::seed::derive_seed;
use crate::trainer::{train, train_observed, BatchSchedule, Checkpoint, DivergencePoint, LrSchedule, PairedRun, Trajectory};
use crate::variation::{LossVariation, PerturbationTerm, VariationDescriptor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Arc;

/// Above this parameter count Hessian spectral norms come from Lanczos.
pub const DENSE_SPECTRAL_MAX_DIM: usize = 300;

/// Everything shared by the protocols: a model, its training data and
/// batch order, the checkpoint runs start from, and the learning rate.
#[derive(Debug, Clone)]
pub struct ExperimentSetup<'a> {
    pub model: &'a Model,
    pub train: Arc<Dataset>,
    pub schedule: Arc<BatchSchedule>,
    pub checkpoint: &'a Checkpoint,
    pub lr: LrSchedule,
}

impl ExperimentSetup<'_> {
    pub fn variation(&self, descriptor: VariationDescriptor) -> Result<LossVariation> {
        LossVariation::new(self.schedule.clone(), self.train.clone(), descriptor)
    }

    fn start(&self) -> Result<usize> {
        self.checkpoint.check_model(self.model)?;
        Ok(self.checkpoint.schedule_position)
    }

    fn run(&self, var: &LossVariation, eps: &[f64], steps: usize) -> Result<Trajectory> {
        train(self.model, var, eps, &self.checkpoint.theta, &self.lr, self.start()?, steps, 1)
    }
}

fn positive_log_fit(points: &[DivergencePoint]) -> Option<LineFit> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = points
        .iter()
        .filter(|p| p.divergence > 0.0 && p.divergence.is_finite())
        .map(|p| (p.integrated_lr, p.divergence.ln()))
        .unzip();
    if xs.len() < 3 {
        return None;
    }
    linfit(&xs, &ys).ok()
}

/// Divergence `‖θ_{ε,t} − θ_{0,t}‖` against integrated learning rate, with
/// log-linear fits of the tail window and of the steps before it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceSeries {
    pub eps: f64,
    pub points: Vec<DivergencePoint>,
    /// First step of the tail window.
    pub window_start: usize,
    pub fit: Option<LineFit>,
    pub head_fit: Option<LineFit>,
}

impl DivergenceSeries {
    /// `tail_fraction` of the steps (rounded) form the tail window.
    pub fn from_points(eps: f64, points: Vec<DivergencePoint>, tail_fraction: f64) -> Result<Self> {
        if !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
            return Err(Error::BadConfig(format!("tail_fraction must lie in (0, 1], got {tail_fraction}")));
        }
        let last = points.last().map_or(0, |p| p.t);
        let window_start = last - (tail_fraction * last as f64).round() as usize;
        let (head, tail): (Vec<_>, Vec<_>) = points.iter().partition(|p| p.t < window_start);
        let fit = positive_log_fit(&tail);
        let head_fit = positive_log_fit(&head);
        Ok(Self { eps, points, window_start, fit, head_fit })
    }

    /// The tail fit, or `AllZeroDivergence` when the series never leaves 0.
    pub fn tail_fit(&self) -> Result<&LineFit> {
        if self.points.iter().all(|p| p.divergence == 0.0) {
            return Err(Error::AllZeroDivergence);
        }
        self.fit.as_ref().ok_or_else(|| Error::DegenerateInput("too few positive divergences in the tail window".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DivergenceConfig {
    #[serde(default = "default_upsample")]
    pub upsample_size: usize,
    pub eps_grid: Vec<f64>,
    pub steps: usize,
    #[serde(default = "default_tail_fraction")]
    pub tail_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_upsample() -> usize {
    16
}

fn default_tail_fraction() -> f64 {
    0.6
}

impl DivergenceConfig {
    pub fn new(eps_grid: Vec<f64>, steps: usize, seed: u64) -> Self {
        Self { upsample_size: default_upsample(), eps_grid, steps, tail_fraction: default_tail_fraction(), seed }
    }
}

#[derive(Debug, Clone)]
pub struct DivergenceOutcome {
    /// Train indices forming the single up-sampled term.
    pub upsample: Vec<usize>,
    pub variation: LossVariation,
    pub series: Vec<DivergenceSeries>,
    pub runs: Vec<PairedRun>,
}

/// Seeded sorted sample of `k` distinct indices below `n`.
pub fn sample_indices(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k > n {
        return Err(Error::BadConfig(format!("cannot sample {k} of {n} points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Up-weights one seeded group of training points by each ε of the grid and
/// tracks the divergence from the unperturbed run over the same batches.
pub fn divergence_experiment(setup: &ExperimentSetup<'_>, cfg: &DivergenceConfig) -> Result<DivergenceOutcome> {
    if let Some(e) = cfg.eps_grid.iter().find(|e| !e.is_finite()) {
        return Err(Error::BadConfig(format!("non-finite ε {e} in grid")));
    }
    let upsample = sample_indices(setup.train.len(), cfg.upsample_size, derive_seed(cfg.seed, "upsample"))?;
    let variation = setup.variation(VariationDescriptor::new(vec![PerturbationTerm::new(upsample.clone())]))?;
    let base = setup.run(&variation, &[0.0], cfg.steps)?;
    let runs: Vec<PairedRun> = cfg
        .eps_grid
        .par_iter()
        .map(|&e| {
            let perturbed = setup.run(&variation, &[e], cfg.steps)?;
            let points = (0..=cfg.steps)
                .map(|t| DivergencePoint {
                    t,
                    integrated_lr: base.integrated_lr[t],
                    divergence: dist(&perturbed.thetas[t], &base.thetas[t]),
                })
                .collect();
            Ok(PairedRun { base: base.clone(), perturbed, points })
        })
        .collect::<Result<_>>()?;
    let series = runs
        .iter()
        .zip(&cfg.eps_grid)
        .map(|(r, &e)| DivergenceSeries::from_points(e, r.points.clone(), cfg.tail_fraction))
        .collect::<Result<_>>()?;
    Ok(DivergenceOutcome { upsample, variation, series, runs })
}

/// Largest |λ| of a symmetric operator: dense for small `n`, Lanczos above.
pub fn spectral_norm(dim: usize, apply: impl Fn(&[f64]) -> Vector, seed: u64) -> Result<f64> {
    let op = FnOperator::new(dim, apply);
    if dim <= DENSE_SPECTRAL_MAX_DIM {
        let mut h = materialize(&op);
        h.symmetrize();
        Ok(dense_sym_eig(&h)?.first().map_or(0.0, |p| p.value.abs()))
    } else {
        let iters = dim.min(60);
        Ok(topk_eigs(&op, 1, iters, seed)?.pairs.first().map_or(0.0, |p| p.value.abs()))
    }
}

/// Empirical `C` and `A` of the divergence bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GronwallConstants {
    /// `max ‖Σ_q ε_q ∇l_{S_q}(θ)‖ / ‖ε‖` over visited θ.
    pub c: f64,
    /// Max Hessian spectral norm over visited θ, of `L_t` on base runs and
    /// of `𝓛_t(·, ε)` on perturbed runs.
    pub a: f64,
}

/// Estimates `(C, A)` from every step of the given paired runs.
pub fn estimate_gronwall_constants(model: &Model, var: &LossVariation, runs: &[PairedRun]) -> Result<GronwallConstants> {
    struct Visit<'a> {
        theta: &'a [f64],
        step: usize,
        eps: &'a [f64],
    }
    let mut visits = Vec::new();
    let mut bases: Vec<&Trajectory> = Vec::new();
    for run in runs {
        if !bases.iter().any(|b| **b == run.base) {
            bases.push(&run.base);
        }
    }
    for traj in bases.iter().copied().chain(runs.iter().map(|r| &r.perturbed)) {
        if traj.steps.len() != traj.num_steps() + 1 {
            return Err(Error::BadInput("constant estimation needs trajectories recorded at every step".into()));
        }
        for t in 0..traj.num_steps() {
            visits.push(Visit { theta: &traj.thetas[t], step: traj.start_step + t, eps: &traj.eps });
        }
    }
    let n = model.num_params();
    let per_visit: Vec<(f64, f64)> = visits
        .par_iter()
        .map(|v| {
            let eps_norm = norm2(v.eps);
            let c = if eps_norm > 0.0 { norm2(&var.perturbation_grad(model, v.theta, v.step, v.eps)?) / eps_norm } else { 0.0 };
            let a = spectral_norm(
                n,
                |x| var.perturbed_hvp(model, v.theta, v.step, v.eps, x).unwrap_or_else(|_| vec![f64::NAN; n]),
                v.step as u64,
            )?;
            Ok((c, a))
        })
        .collect::<Result<_>>()?;
    let (c, a) = per_visit.iter().fold((0.0f64, 0.0f64), |(c, a), &(ci, ai)| (c.max(ci), a.max(ai)));
    Ok(GronwallConstants { c, a })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GronwallRow {
    pub t: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GronwallReport {
    pub eps: f64,
    pub rows: Vec<GronwallRow>,
    /// Steps where `lhs > rhs·(1 + 1e-9)`.
    pub violations: usize,
    /// Largest finite `lhs/rhs`.
    pub max_ratio: f64,
}

/// Checks `‖θ_{ε,T} − θ_{0,T}‖ ≤ C‖ε‖·S_T·(1 + exp(2A·S_T))`, with `S_T` the
/// integrated learning rate, at every recorded step.
pub fn gronwall_bound_check(run: &PairedRun, consts: &GronwallConstants) -> GronwallReport {
    let eps = norm2(&run.perturbed.eps);
    let mut violations = 0;
    let mut max_ratio = 0.0f64;
    let rows = run
        .points
        .iter()
        .map(|p| {
            let s = p.integrated_lr;
            let rhs = consts.c * eps * s * (1.0 + (2.0 * consts.a * s).exp());
            let lhs = p.divergence;
            let ratio = if rhs > 0.0 {
                lhs / rhs
            } else if lhs == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            if rhs.is_finite() && lhs > rhs * (1.0 + 1e-9) {
                violations += 1;
            }
            if ratio.is_finite() {
                max_ratio = max_ratio.max(ratio);
            }
            GronwallRow { t: p.t, lhs, rhs, ratio }
        })
        .collect();
    GronwallReport { eps, rows, violations, max_ratio }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharpnessDemo {
    /// `v_0 = u_0`, `v_t = α_t + Σ_{s<t} β_s v_s`.
    pub u_equality: Vec<f64>,
    /// The closed-form bound evaluated at every `T`.
    pub bound: Vec<f64>,
    pub max_abs_gap: f64,
}

/// Builds the sequence meeting the summed inequality with equality and
/// compares it to the closed-form bound
/// `α_T + β_0 Π_{s=1}^{T−1}(1+β_s) u_0 + Σ_{s=1}^{T−1} α_s β_s Π_{k=s+1}^{T−1}(1+β_k)`.
///
/// `alpha` holds `α_0..=α_T`, `beta` holds `β_0..β_{T−1}`.
pub fn gronwall_sharpness_demo(alpha: &[f64], beta: &[f64], u0: f64) -> Result<SharpnessDemo> {
    if alpha.is_empty() || beta.len() + 1 != alpha.len() {
        return Err(Error::BadInput(format!("need len(α) = len(β) + 1, got {} and {}", alpha.len(), beta.len())));
    }
    if let Some(b) = beta.iter().find(|&&b| !(b >= 0.0)) {
        return Err(Error::BadInput(format!("β must be non-negative, got {b}")));
    }
    let horizon = beta.len();
    let mut u = Vec::with_capacity(horizon + 1);
    u.push(u0);
    let mut acc = 0.0;
    for t in 1..=horizon {
        acc += beta[t - 1] * u[t - 1];
        u.push(alpha[t] + acc);
    }
    let prod = |from: usize, to_excl: usize| beta[from.min(to_excl)..to_excl].iter().map(|b| 1.0 + b).product::<f64>();
    let mut bound = Vec::with_capacity(horizon + 1);
    bound.push(u0);
    for big_t in 1..=horizon {
        let mut b = alpha[big_t] + beta[0] * prod(1, big_t) * u0;
        for s in 1..big_t {
            b += alpha[s] * beta[s] * prod(s + 1, big_t);
        }
        bound.push(b);
    }
    let max_abs_gap = u.iter().zip(&bound).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(SharpnessDemo { u_equality: u, bound, max_abs_gap })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstOrderRow {
    pub t: usize,
    /// Log-log slope of the residual against |ε|; absent when exact zero.
    pub slope: Option<f64>,
    pub r_squared: Option<f64>,
    /// Residuals are at rounding level: the map is affine in ε.
    pub exact_zero: bool,
    /// `‖θ_{ε,T} − θ_{0,T} − ε·J_T‖` per grid value.
    pub residuals: Vec<f64>,
    /// Median of `residual / ε²`.
    pub residual_constant: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

/// Second-order residual of the exact first-order expansion for every
/// `T` in `t_grid`, swept over `eps_grid`. `var` must have one term.
pub fn first_order_validity(
    setup: &ExperimentSetup<'_>,
    var: &LossVariation,
    eps_grid: &[f64],
    t_grid: &[usize],
) -> Result<Vec<FirstOrderRow>> {
    if var.num_terms() != 1 {
        return Err(Error::BadInput("first-order sweep needs a single-term variation".into()));
    }
    if eps_grid.iter().any(|e| !e.is_finite() || *e == 0.0) {
        return Err(Error::BadConfig("ε grid values must be finite and non-zero".into()));
    }
    let horizon = t_grid.iter().copied().max().unwrap_or(0);
    let base = setup.run(var, &[0.0], horizon)?;
    let path = exact_eps_path(setup.model, var, &base, t_grid)?;
    let runs: Vec<Trajectory> = eps_grid.par_iter().map(|&e| setup.run(var, &[e], horizon)).collect::<Result<_>>()?;
    Ok(t_grid
        .iter()
        .map(|&t| {
            let j = path.recorded[&t].row(0);
            let j_norm = norm2(j);
            let residuals: Vec<f64> = runs
                .iter()
                .zip(eps_grid)
                .map(|(run, &e)| {
                    let r: Vector = run.thetas[t]
                        .iter()
                        .zip(&base.thetas[t])
                        .zip(j)
                        .map(|((a, b), jv)| a - b - e * jv)
                        .collect();
                    norm2(&r)
                })
                .collect();
            let exact_zero = residuals
                .iter()
                .zip(eps_grid)
                .all(|(&r, &e)| if j_norm > 0.0 { r <= 1e-9 * e.abs() * j_norm } else { r == 0.0 });
            let (xs, ys): (Vec<f64>, Vec<f64>) = residuals
                .iter()
                .zip(eps_grid)
                .filter(|(r, _)| **r > 0.0)
                .map(|(r, e)| (e.abs().ln(), r.ln()))
                .unzip();
            let fit = if exact_zero || xs.len() < 2 { None } else { linfit(&xs, &ys).ok() };
            let residual_constant = median(residuals.iter().zip(eps_grid).map(|(r, e)| r / (e * e)).collect());
            FirstOrderRow {
                t,
                slope: fit.map(|f| f.slope),
                r_squared: fit.map(|f| f.r_squared),
                exact_zero,
                residuals,
                residual_constant,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FadingProtocol {
    pub n_train_probes: usize,
    pub n_test_probes: usize,
    /// Weight of the probe term; negative down-samples.
    pub eps: f64,
    pub repeats: usize,
    pub steps: usize,
    pub ci_level: f64,
}

impl Default for FadingProtocol {
    /// 32 × 16 probes, ε = −1/100, 9 repeats, 200 steps, 95% intervals.
    fn default() -> Self {
        Self { n_train_probes: 32, n_test_probes: 16, eps: -0.01, repeats: 9, steps: 200, ci_level: 0.95 }
    }
}

/// Probe points of one repeat.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FadingProbes {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Consecutive blocks of one seeded permutation, reshuffling only once a
/// pool is exhausted, so repeats are disjoint whenever the pool allows.
fn disjoint_blocks(n: usize, k: usize, repeats: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > n {
        return Err(Error::BadConfig(format!("cannot draw {k} probes from {n} points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let mut cursor = 0;
    let mut out = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        if cursor + k > n {
            perm.shuffle(&mut rng);
            cursor = 0;
        }
        let mut block = perm[cursor..cursor + k].to_vec();
        block.sort_unstable();
        out.push(block);
        cursor += k;
    }
    Ok(out)
}

pub fn select_fading_probes(n_train: usize, n_test: usize, protocol: &FadingProtocol, seed: u64) -> Result<Vec<FadingProbes>> {
    let train = disjoint_blocks(n_train, protocol.n_train_probes, protocol.repeats, derive_seed(seed, "fading-train-probes"))?;
    let test = disjoint_blocks(n_test, protocol.n_test_probes, protocol.repeats, derive_seed(seed, "fading-test-probes"))?;
    Ok(train.into_iter().zip(test).map(|(train, test)| FadingProbes { train, test }).collect())
}

/// Measured loss differences of one repeat.
#[derive(Debug, Clone, PartialEq)]
pub struct FadingDeltas {
    pub probes: FadingProbes,
    /// `deltas[t][z·n_x + x] = l_{z,x,t} − l_{z,t}` for `t = 0..=steps`.
    pub deltas: Vec<Vector>,
}

fn probe_losses(model: &Model, test: &Dataset, probes: &[usize], theta: &[f64]) -> Result<Vector> {
    probes.iter().map(|&z| model.data_loss(theta, &[&test.examples[z]])).collect()
}

/// Retrains once per train probe with that probe weighted by `protocol.eps`
/// and records every test-probe loss at every step.
pub fn measure_fading_deltas(
    setup: &ExperimentSetup<'_>,
    test: &Dataset,
    probes: &FadingProbes,
    protocol: &FadingProtocol,
) -> Result<FadingDeltas> {
    let start = setup.start()?;
    let steps = protocol.steps;
    let losses_along = |var: &LossVariation, eps: &[f64]| -> Result<Vec<Vector>> {
        let mut losses = Vec::with_capacity(steps + 1);
        train_observed(setup.model, var, eps, &setup.checkpoint.theta, &setup.lr, start, steps, steps.max(1), &mut |_, theta| {
            losses.push(probe_losses(setup.model, test, &probes.test, theta)?);
            Ok(())
        })?;
        Ok(losses)
    };
    let base_var = LossVariation::base(setup.schedule.clone(), setup.train.clone())?;
    let base = losses_along(&base_var, &[])?;
    let per_probe: Vec<Vec<Vector>> = probes
        .train
        .par_iter()
        .map(|&x| losses_along(&setup.variation(VariationDescriptor::singletons([x]))?, &[protocol.eps]))
        .collect::<Result<_>>()?;
    let n_x = probes.train.len();
    let deltas = (0..=steps)
        .map(|t| {
            let mut row = vec![0.0; probes.test.len() * n_x];
            for (x, losses) in per_probe.iter().enumerate() {
                for z in 0..probes.test.len() {
                    row[z * n_x + x] = losses[t][z] - base[t][z];
                }
            }
            row
        })
        .collect();
    Ok(FadingDeltas { probes: probes.clone(), deltas })
}

/// `ε·score(z, x)` at the checkpoint, laid out like [`FadingDeltas::deltas`].
pub fn predicted_deltas(
    setup: &ExperimentSetup<'_>,
    test: &Dataset,
    probes: &FadingProbes,
    estimator: &Estimator,
    eps: f64,
) -> Result<Vector> {
    let start = setup.start()?;
    let var = setup.variation(VariationDescriptor::singletons(probes.train.iter().copied()))?;
    let scoring = setup.train.all();
    let jac = estimator.estimate(setup.model, &setup.checkpoint.theta, start, &scoring, &var)?;
    let points = test.gather(&probes.test);
    let scores = influence_score(setup.model, &jac, &setup.checkpoint.theta, &points)?;
    Ok(scores.scores.as_slice().iter().map(|s| eps * s).collect())
}

/// Pearson `R(t)` between measured and predicted differences for
/// `t = 1..=steps`; degenerate steps are `None`.
pub fn correlation_series(deltas: &FadingDeltas, predicted: &[f64]) -> Vec<Option<f64>> {
    deltas.deltas[1..].iter().map(|d| pearson(d, predicted).ok()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FadingPoint {
    pub t: usize,
    pub mean: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    /// Repeats with a defined correlation at `t`.
    pub n: usize,
}

/// Student-t mean and interval of `R(t)` across repeats.
pub fn aggregate_fading(per_repeat: &[Vec<Option<f64>>], level: f64) -> Vec<FadingPoint> {
    let steps = per_repeat.iter().map(Vec::len).max().unwrap_or(0);
    (0..steps)
        .map(|i| {
            let xs: Vec<f64> = per_repeat.iter().filter_map(|r| r.get(i).copied().flatten()).collect();
            let (mean, ci_lo, ci_hi) = match xs.len() {
                0 => (None, None, None),
                1 => (Some(xs[0]), None, None),
                _ => match mean_ci(&xs, level) {
                    Ok(ci) => (Some(ci.mean), Some(ci.lo), Some(ci.hi)),
                    Err(_) => (Some(xs.iter().sum::<f64>() / xs.len() as f64), None, None),
                },
            };
            FadingPoint { t: i + 1, mean, ci_lo, ci_hi, n: xs.len() }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FadingSeries {
    pub method: Method,
    /// `per_repeat[r][t − 1] = R(t)`.
    pub per_repeat: Vec<Vec<Option<f64>>>,
    pub aggregate: Vec<FadingPoint>,
}

impl FadingSeries {
    /// Mean of the aggregate means over `lo..=hi`, skipping missing steps.
    pub fn window_mean(&self, lo: usize, hi: usize) -> Option<f64> {
        let xs: Vec<f64> = self.aggregate.iter().filter(|p| p.t >= lo && p.t <= hi).filter_map(|p| p.mean).collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FadingResult {
    pub protocol: FadingProtocol,
    pub probes: Vec<FadingProbes>,
    pub series: Vec<FadingSeries>,
}

/// Full fading protocol: per repeat, one retraining per train probe, and
/// one score table per estimator at the checkpoint.
pub fn fading_experiment(
    setup: &ExperimentSetup<'_>,
    test: &Dataset,
    estimators: &[Estimator],
    protocol: &FadingProtocol,
    seed: u64,
) -> Result<FadingResult> {
    let probes = select_fading_probes(setup.train.len(), test.len(), protocol, seed)?;
    let measured: Vec<FadingDeltas> =
        probes.par_iter().map(|p| measure_fading_deltas(setup, test, p, protocol)).collect::<Result<_>>()?;
    let series = estimators
        .iter()
        .map(|est| {
            let per_repeat: Vec<Vec<Option<f64>>> = measured
                .iter()
                .map(|m| Ok(correlation_series(m, &predicted_deltas(setup, test, &m.probes, est, protocol.eps)?)))
                .collect::<Result<_>>()?;
            let aggregate = aggregate_fading(&per_repeat, protocol.ci_level);
            Ok(FadingSeries { method: est.method(), per_repeat, aggregate })
        })
        .collect::<Result<_>>()?;
    Ok(FadingResult { protocol: *protocol, probes, series })
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// `eps,t,int_lr,div_norm`
pub fn write_divergence_csv(path: &Path, series: &[DivergenceSeries]) -> Result<()> {
    let rows = series.iter().flat_map(|s| {
        s.points
            .iter()
            .map(move |p| vec![fmt_f64(s.eps), p.t.to_string(), fmt_f64(p.integrated_lr), fmt_f64(p.divergence)])
    });
    write_csv(path, &["eps", "t", "int_lr", "div_norm"], rows)
}

/// `eps,t,lhs,rhs,ratio`, one block per report.
pub fn write_gronwall_csv(path: &Path, reports: &[GronwallReport]) -> Result<()> {
    let rows = reports.iter().flat_map(|rep| {
        rep.rows
            .iter()
            .map(move |r| vec![fmt_f64(rep.eps), r.t.to_string(), fmt_f64(r.lhs), fmt_f64(r.rhs), fmt_f64(r.ratio)])
    });
    write_csv(path, &["eps", "t", "lhs", "rhs", "ratio"], rows)
}

/// `method,repeat,t,R`; missing correlations are empty fields.
pub fn write_fading_csv(path: &Path, result: &FadingResult) -> Result<()> {
    let rows = result.series.iter().flat_map(|s| {
        s.per_repeat.iter().enumerate().flat_map(move |(r, series)| {
            series
                .iter()
                .enumerate()
                .map(move |(i, v)| vec![s.method.to_string(), r.to_string(), (i + 1).to_string(), opt(*v)])
        })
    });
    write_csv(path, &["method", "repeat", "t", "R"], rows)
}

/// `method,t,mean_R,ci_lo,ci_hi`
pub fn write_fading_aggregate_csv(path: &Path, result: &FadingResult) -> Result<()> {
    let rows = result.series.iter().flat_map(|s| {
        s.aggregate
            .iter()
            .map(move |p| vec![s.method.to_string(), p.t.to_string(), opt(p.mean), opt(p.ci_lo), opt(p.ci_hi)])
    });
    write_csv(path, &["method", "t", "mean_R", "ci_lo", "ci_hi"], rows)
}
