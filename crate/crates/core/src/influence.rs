//! Estimators of the ε-Jacobian `∇_{ε|0} θ_ε` and influence scoring.
//!
//! | method   | row `q` of the Q×N Jacobian                                    |
//! |----------|----------------------------------------------------------------|
//! | `hif`    | `−(H + λI)⁻¹ ∇l_{S_q}` by Conjugate Residual (or CG)           |
//! | `abif`   | `−Σ_i (v_iᵀ∇l_{S_q}/λ_i) v_i` over the top-k |λ| Lanczos pairs |
//! | `tracin` | `−Σ_c w_c ∇l_{S_q}(θ_c)` over checkpoints                      |
//! | `exact`  | `J_{t+1} = J_t − η_t M_t − η_t J_t H_t`, `J_0 = 0`             |
//!
//! Scores follow the `d_loss_d_upweight` convention: `score(z, q)` is the
//! predicted change of `l_z` per unit of `ε_q`, i.e. `J_q · ∇l_z`.

use crate::error::{Error, Result};
use crate::io::{decode_float_block, encode_float_block, fmt_f64, write_atomic, JACOBIAN_MAGIC};
use crate::model::{LabeledExample, Model};
use crate::numkit::{
    axpy, conjugate_gradient, conjugate_residual, default_max_iter, dot, scale, topk_eigs, FnOperator, Matrix, Vector,
    DEFAULT_TOL,
};
use crate::trainer::Trajectory;
use crate::variation::LossVariation;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::borrow::Borrow;
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Hif,
    Abif,
    Tracin,
    Exact,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Hif => "hif",
            Method::Abif => "abif",
            Method::Tracin => "tracin",
            Method::Exact => "exact",
        })
    }
}

/// Tag carried with every score table.
pub const SIGN_CONVENTION: &str = "d_loss_d_upweight";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    /// Schedule positions of the parameters the estimate was taken at.
    pub steps: Vec<usize>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub settings: BTreeMap<String, String>,
    /// Per-row solver residuals (HIF only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub residuals: Vec<f64>,
    /// Per-row convergence flags (HIF only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub converged: Vec<bool>,
    /// Lanczos found fewer pairs than requested (ABIF only).
    #[serde(default)]
    pub breakdown: bool,
}

/// A Q×N estimate of `∇_{ε|0} θ_ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsJacobian {
    pub matrix: Matrix,
    pub method: Method,
    pub provenance: Provenance,
}

#[derive(Debug, Serialize, Deserialize)]
struct JacobianMeta {
    q: usize,
    n: usize,
    method: Method,
    provenance: Provenance,
}

impl EpsJacobian {
    pub fn num_terms(&self) -> usize {
        self.matrix.rows()
    }

    pub fn row(&self, q: usize) -> &[f64] {
        self.matrix.row(q)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = JacobianMeta {
            q: self.matrix.rows(),
            n: self.matrix.cols(),
            method: self.method,
            provenance: self.provenance.clone(),
        };
        encode_float_block(JACOBIAN_MAGIC, self.matrix.as_slice(), &meta)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (values, meta): (Vec<f64>, JacobianMeta) = decode_float_block(JACOBIAN_MAGIC, bytes)?;
        if meta.q * meta.n != values.len() {
            return Err(Error::Format(format!("Jacobian metadata says {}x{} but holds {} values", meta.q, meta.n, values.len())));
        }
        Ok(Self { matrix: Matrix::from_row_major(meta.q, meta.n, values), method: meta.method, provenance: meta.provenance })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Matrix-free Hessian of the full loss over a fixed scoring batch. A failed
/// evaluation yields NaNs, which the Krylov solvers report as non-finite.
fn hessian_operator<'a, B: Borrow<LabeledExample> + Sync>(
    model: &'a Model,
    theta: &'a [f64],
    batch: &'a [B],
) -> FnOperator<impl Fn(&[f64]) -> Vector + 'a> {
    let n = model.num_params();
    FnOperator::new(n, move |v| model.hvp(theta, batch, v).unwrap_or_else(|_| vec![f64::NAN; n]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    #[default]
    Cr,
    Cg,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HifOptions {
    #[serde(default)]
    pub solver: Solver,
    pub damping: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Defaults to `10·N` capped at 1000.
    #[serde(default)]
    pub max_iter: Option<usize>,
}

fn default_tol() -> f64 {
    DEFAULT_TOL
}

impl HifOptions {
    /// Undamped CR, for strictly convex fixtures.
    pub fn convex() -> Self {
        Self { solver: Solver::Cr, damping: 0.0, tol: DEFAULT_TOL, max_iter: None }
    }

    /// CR with damping 1e-4, for non-convex models.
    pub fn nonconvex() -> Self {
        Self { damping: 1e-4, ..Self::convex() }
    }
}

/// Hessian-based ε-Jacobian at `theta`, with `H` the Hessian of the full
/// loss over `scoring_batch`.
///
/// Rows whose solve does not converge are kept and flagged in the provenance.
pub fn hif_param_derivative<B: Borrow<LabeledExample> + Sync>(
    model: &Model,
    theta: &[f64],
    step: usize,
    scoring_batch: &[B],
    var: &LossVariation,
    opts: &HifOptions,
) -> Result<EpsJacobian> {
    let n = model.num_params();
    let max_iter = opts.max_iter.unwrap_or_else(|| default_max_iter(n));
    let rows: Vec<_> = (0..var.num_terms())
        .into_par_iter()
        .map(|q| {
            let mut g = var.term_grad(model, theta, q)?;
            scale(-1.0, &mut g);
            let op = hessian_operator(model, theta, scoring_batch);
            match opts.solver {
                Solver::Cr => conjugate_residual(&op, &g, opts.tol, max_iter, opts.damping),
                Solver::Cg => conjugate_gradient(&op, &g, opts.tol, max_iter, opts.damping),
            }
        })
        .collect::<Result<_>>()?;
    let mut matrix = Matrix::zeros(var.num_terms(), n);
    let mut provenance = Provenance { steps: vec![step], ..Default::default() };
    for (q, rep) in rows.into_iter().enumerate() {
        matrix.row_mut(q).copy_from_slice(&rep.solution);
        provenance.residuals.push(rep.residual_norm);
        provenance.converged.push(rep.converged);
    }
    let s = &mut provenance.settings;
    s.insert("solver".into(), format!("{:?}", opts.solver).to_lowercase());
    s.insert("damping".into(), fmt_f64(opts.damping));
    s.insert("tol".into(), fmt_f64(opts.tol));
    s.insert("max_iter".into(), max_iter.to_string());
    s.insert("scoring_batch".into(), scoring_batch.len().to_string());
    Ok(EpsJacobian { matrix, method: Method::Hif, provenance })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbifOptions {
    pub k: usize,
    pub num_iters: usize,
    #[serde(default)]
    pub seed: u64,
    /// Eigenvalues with `|λ| ≤ eig_floor·max|λ|` are treated as zero.
    #[serde(default = "default_eig_floor")]
    pub eig_floor: f64,
}

fn default_eig_floor() -> f64 {
    1e-8
}

impl Default for AbifOptions {
    /// 32 projectors from 64 Lanczos iterations.
    fn default() -> Self {
        Self { k: 32, num_iters: 64, seed: 0, eig_floor: default_eig_floor() }
    }
}

impl AbifOptions {
    /// Shrinks `k` and `num_iters` to fit a model with `n` parameters.
    pub fn clamped(mut self, n: usize) -> Self {
        self.num_iters = self.num_iters.min(n);
        self.k = self.k.min(self.num_iters);
        self
    }
}

/// Inverse of the Hessian restricted to its top-k |λ| eigenspace, applied
/// to every term gradient. Components along discarded directions stay 0.
pub fn abif_param_derivative<B: Borrow<LabeledExample> + Sync>(
    model: &Model,
    theta: &[f64],
    step: usize,
    scoring_batch: &[B],
    var: &LossVariation,
    opts: &AbifOptions,
) -> Result<EpsJacobian> {
    let op = hessian_operator(model, theta, scoring_batch);
    let top = topk_eigs(&op, opts.k, opts.num_iters, opts.seed)?;
    let max_abs = top.pairs.iter().map(|p| p.value.abs()).fold(0.0, f64::max);
    let floor = opts.eig_floor * max_abs;
    let kept: Vec<_> = top.pairs.iter().filter(|p| p.value.abs() > floor).collect();
    let n = model.num_params();
    let rows: Vec<Vector> = (0..var.num_terms())
        .into_par_iter()
        .map(|q| {
            let g = var.term_grad(model, theta, q)?;
            let mut row = vec![0.0; n];
            for p in &kept {
                axpy(-dot(&p.vector, &g) / p.value, &p.vector, &mut row);
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    let mut provenance = Provenance { steps: vec![step], breakdown: top.breakdown, ..Default::default() };
    let s = &mut provenance.settings;
    s.insert("k".into(), opts.k.to_string());
    s.insert("num_iters".into(), opts.num_iters.to_string());
    s.insert("seed".into(), opts.seed.to_string());
    s.insert("kept_pairs".into(), kept.len().to_string());
    Ok(EpsJacobian { matrix: Matrix::from_rows(&rows), method: Method::Abif, provenance })
}

/// Parameters and learning rate at one schedule position.
#[derive(Debug, Clone, PartialEq)]
pub struct TracInCheckpoint {
    pub theta: Vector,
    pub step: usize,
    pub eta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TracInWeighting {
    /// `−Σ_c ∇l(θ_c)`; the default for a single checkpoint.
    Unweighted,
    /// `−Σ_c η_c ∇l(θ_c)`; the default for several checkpoints.
    LearningRate,
}

impl TracInWeighting {
    pub fn default_for(num_checkpoints: usize) -> Self {
        if num_checkpoints == 1 {
            TracInWeighting::Unweighted
        } else {
            TracInWeighting::LearningRate
        }
    }
}

pub fn tracin_param_derivative(
    model: &Model,
    var: &LossVariation,
    checkpoints: &[TracInCheckpoint],
    weighting: TracInWeighting,
) -> Result<EpsJacobian> {
    if checkpoints.is_empty() {
        return Err(Error::BadInput("TracIn needs at least one checkpoint".into()));
    }
    let mut matrix = Matrix::zeros(var.num_terms(), model.num_params());
    for c in checkpoints {
        let w = match weighting {
            TracInWeighting::Unweighted => 1.0,
            TracInWeighting::LearningRate => c.eta,
        };
        let m = var.mixed_second(model, &c.theta, c.step)?;
        axpy(-w, m.as_slice(), matrix.as_mut_slice());
    }
    let mut provenance = Provenance { steps: checkpoints.iter().map(|c| c.step).collect(), ..Default::default() };
    provenance.settings.insert("weighting".into(), format!("{weighting:?}").to_lowercase());
    Ok(EpsJacobian { matrix, method: Method::Tracin, provenance })
}

/// Every step of a base trajectory as a TracIn checkpoint.
pub fn trajectory_checkpoints(traj: &Trajectory) -> Result<Vec<TracInCheckpoint>> {
    (0..traj.num_steps())
        .map(|t| {
            let theta = traj
                .theta_at(t)
                .ok_or_else(|| Error::BadInput(format!("trajectory step {t} not recorded")))?;
            Ok(TracInCheckpoint { theta: theta.clone(), step: traj.start_step + t, eta: traj.etas[t] })
        })
        .collect()
}

/// Output of the exact recurrence.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactPath {
    /// `J_T`.
    pub jacobian: EpsJacobian,
    /// `J_t` at the requested relative steps.
    pub recorded: BTreeMap<usize, Matrix>,
    /// `Σ_t η_t J_t H_t`, the trajectory-feedback term.
    pub feedback: Matrix,
}

/// Runs `J_{t+1} = J_t − η_t M_t − η_t J_t H_t` along an ε = 0 trajectory
/// recorded at every step, keeping `J_t` at each step listed in `record`.
///
/// `H_t` is applied row by row through exact Hessian-vector products, so no
/// dense Hessian is formed.
pub fn exact_eps_path(model: &Model, var: &LossVariation, base: &Trajectory, record: &[usize]) -> Result<ExactPath> {
    if base.eps.iter().any(|&e| e != 0.0) {
        return Err(Error::BadInput("exact recurrence needs the ε = 0 trajectory".into()));
    }
    if base.steps.len() != base.num_steps() + 1 {
        return Err(Error::BadInput("exact recurrence needs a trajectory recorded at every step".into()));
    }
    let q = var.num_terms();
    let n = model.num_params();
    let mut j = Matrix::zeros(q, n);
    let mut feedback = Matrix::zeros(q, n);
    let mut recorded = BTreeMap::new();
    if record.contains(&0) {
        recorded.insert(0, j.clone());
    }
    for t in 0..base.num_steps() {
        let theta = &base.thetas[t];
        let step = base.start_step + t;
        let eta = base.etas[t];
        let m = var.mixed_second(model, theta, step)?;
        let batch = var.base_batch(step)?;
        let hj: Vec<Vector> = (0..q).map(|r| model.hvp(theta, &batch, j.row(r))).collect::<Result<_>>()?;
        for (r, hv) in hj.iter().enumerate() {
            let row = j.row_mut(r);
            axpy(-eta, m.row(r), row);
            axpy(-eta, hv, row);
            axpy(eta, hv, feedback.row_mut(r));
        }
        if !j.as_slice().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { context: format!("exact ε-Jacobian overflowed at step {}", t + 1) });
        }
        if record.contains(&(t + 1)) {
            recorded.insert(t + 1, j.clone());
        }
    }
    let mut provenance = Provenance { steps: vec![base.start_step, base.start_step + base.num_steps()], ..Default::default() };
    provenance.settings.insert("steps".into(), base.num_steps().to_string());
    Ok(ExactPath { jacobian: EpsJacobian { matrix: j, method: Method::Exact, provenance }, recorded, feedback })
}

/// `∇_{ε|0} θ_{ε,T}` of the discrete training map.
pub fn exact_eps_jacobian(model: &Model, var: &LossVariation, base: &Trajectory) -> Result<EpsJacobian> {
    Ok(exact_eps_path(model, var, base, &[])?.jacobian)
}

/// A single-checkpoint estimator with its settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Estimator {
    Hif(HifOptions),
    Abif(AbifOptions),
    /// Single-checkpoint TracIn without the η factor.
    Tracin,
}

impl Estimator {
    pub fn method(&self) -> Method {
        match self {
            Estimator::Hif(_) => Method::Hif,
            Estimator::Abif(_) => Method::Abif,
            Estimator::Tracin => Method::Tracin,
        }
    }

    /// ε-Jacobian at `theta` (schedule position `step`). `scoring_batch` is
    /// the Hessian batch for HIF and ABIF.
    pub fn estimate<B: Borrow<LabeledExample> + Sync>(
        &self,
        model: &Model,
        theta: &[f64],
        step: usize,
        scoring_batch: &[B],
        var: &LossVariation,
    ) -> Result<EpsJacobian> {
        match self {
            Estimator::Hif(o) => hif_param_derivative(model, theta, step, scoring_batch, var, o),
            Estimator::Abif(o) => abif_param_derivative(model, theta, step, scoring_batch, var, &o.clamped(model.num_params())),
            Estimator::Tracin => {
                let c = TracInCheckpoint { theta: theta.to_vec(), step, eta: 1.0 };
                tracin_param_derivative(model, var, &[c], TracInWeighting::Unweighted)
            }
        }
    }
}

/// Test × term score table.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceMatrix {
    /// `scores[(z, q)]`.
    pub scores: Matrix,
    pub test_ids: Vec<usize>,
    pub train_ids: Vec<usize>,
    pub method: Method,
    pub sign_convention: String,
}

impl InfluenceMatrix {
    pub fn with_test_ids(mut self, ids: Vec<usize>) -> Self {
        assert_eq!(ids.len(), self.scores.rows());
        self.test_ids = ids;
        self
    }

    pub fn with_train_ids(mut self, ids: Vec<usize>) -> Self {
        assert_eq!(ids.len(), self.scores.cols());
        self.train_ids = ids;
        self
    }

    /// Writes `test_id,train_id,score,method,sign_convention`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let method = self.method.to_string();
        let rows = (0..self.scores.rows()).flat_map(|z| {
            let method = method.clone();
            (0..self.scores.cols()).map(move |q| {
                vec![
                    self.test_ids[z].to_string(),
                    self.train_ids[q].to_string(),
                    fmt_f64(self.scores[(z, q)]),
                    method.clone(),
                    self.sign_convention.clone(),
                ]
            })
        });
        crate::io::write_csv(path, &["test_id", "train_id", "score", "method", "sign_convention"], rows)
    }
}

/// `scores[z][q] = J_q · ∇_θ l_z(θ)`: predicted `dl_z/dε_q`.
pub fn influence_score<B: Borrow<LabeledExample> + Sync>(
    model: &Model,
    jac: &EpsJacobian,
    theta: &[f64],
    test_points: &[B],
) -> Result<InfluenceMatrix> {
    if jac.matrix.cols() != model.num_params() || theta.len() != model.num_params() {
        return Err(Error::BadInput("Jacobian, θ and model disagree on N".into()));
    }
    let q = jac.num_terms();
    let rows: Vec<Vector> = test_points
        .par_iter()
        .map(|z| {
            let g = model.data_grad(theta, &[z.borrow()])?;
            Ok((0..q).map(|r| dot(jac.row(r), &g)).collect())
        })
        .collect::<Result<_>>()?;
    let scores = if rows.is_empty() { Matrix::zeros(0, q) } else { Matrix::from_rows(&rows) };
    Ok(InfluenceMatrix {
        scores,
        test_ids: (0..test_points.len()).collect(),
        train_ids: (0..q).collect(),
        method: jac.method,
        sign_convention: SIGN_CONVENTION.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ranking {
    pub test_id: usize,
    pub k: usize,
    /// Most loss-decreasing first.
    pub proponents: Vec<usize>,
    /// Most loss-increasing first.
    pub opponents: Vec<usize>,
}

/// Top-k proponents (most negative scores) and opponents (most positive) of
/// row `z`, reported as train ids. Ties go to the lower column. When
/// `k ≤ n/2` opponents are drawn from the columns not already proponents.
pub fn rank(scores: &InfluenceMatrix, z: usize, k: usize) -> Ranking {
    let row = scores.scores.row(z);
    let n = row.len();
    let k = k.min(n);
    let mut asc: Vec<usize> = (0..n).collect();
    asc.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    let proponent_cols: Vec<usize> = asc[..k].to_vec();
    let mut desc: Vec<usize> = (0..n).collect();
    desc.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    let exclude = 2 * k <= n;
    let opponent_cols: Vec<usize> = desc
        .into_iter()
        .filter(|c| !exclude || !proponent_cols.contains(c))
        .take(k)
        .collect();
    Ranking {
        test_id: scores.test_ids[z],
        k,
        proponents: proponent_cols.iter().map(|&c| scores.train_ids[c]).collect(),
        opponents: opponent_cols.iter().map(|&c| scores.train_ids[c]).collect(),
    }
}
