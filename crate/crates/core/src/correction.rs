//! Few-step correction of mispredictions by fine-tuning on an influential
//! batch `B`: `𝓛 = L_{B_t} + ε·l_B`.
//!
//! * proponents: top-k proponents of the current prediction, relabelled to
//!   the true label;
//! * opponents: top-k opponents of the current prediction, labels kept;
//! * random baseline: k random training points carrying the predicted label,
//!   relabelled to the true label.

use crate::error::{Error, Result};
use crate::experiments::sample_indices;
use crate::influence::{influence_score, rank, Estimator, InfluenceMatrix};
use crate::io::{fmt_f64, write_csv};
use crate::model::{Dataset, LabeledExample, Model};
use crate::numkit::axpy;
use crate::seed::derive_seed;
use crate::trainer::{BatchSchedule, Checkpoint};
use crate::variation::{LossVariation, PerturbationTerm, VariationDescriptor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrectionMethod {
    Proponents,
    Opponents,
    RandomBaseline,
}

impl fmt::Display for CorrectionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CorrectionMethod::Proponents => "proponents",
            CorrectionMethod::Opponents => "opponents",
            CorrectionMethod::RandomBaseline => "random-baseline",
        })
    }
}

impl FromStr for CorrectionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proponents" => Ok(CorrectionMethod::Proponents),
            "opponents" => Ok(CorrectionMethod::Opponents),
            "random-baseline" => Ok(CorrectionMethod::RandomBaseline),
            other => Err(Error::BadConfig(format!("unknown correction method `{other}`"))),
        }
    }
}

/// One misprediction to correct with one method at one ε.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionJob {
    pub test_id: usize,
    /// The test point with its true label.
    pub point: LabeledExample,
    pub predicted: usize,
    pub method: CorrectionMethod,
    pub k: usize,
    pub eps: f64,
    pub max_steps: usize,
    pub lr: f64,
}

impl CorrectionJob {
    pub fn true_label(&self) -> usize {
        self.point.label
    }
}

/// A built variation plus what happened while building it.
#[derive(Debug, Clone)]
pub struct CorrectionVariation {
    pub variation: LossVariation,
    /// The baseline pool had fewer than k points; all of it was used.
    pub insufficient_pool: bool,
    /// Fraction of the chosen opponents whose label already equals the true
    /// label of z.
    pub opponent_label_match: Option<f64>,
}

/// Builds the single-term variation for `job`. `scores` must have the job's
/// test point at row `row`, scored at its predicted label; it is ignored by
/// the random baseline, which samples with `seed`.
pub fn build_correction_variation(
    job: &CorrectionJob,
    scores: Option<(&InfluenceMatrix, usize)>,
    schedule: Arc<BatchSchedule>,
    train: Arc<Dataset>,
    seed: u64,
) -> Result<CorrectionVariation> {
    if job.k == 0 || job.k > train.len() {
        return Err(Error::BadConfig(format!("k = {} must lie in 1..={}", job.k, train.len())));
    }
    let truth = job.true_label();
    let mut insufficient_pool = false;
    let mut opponent_label_match = None;
    let term = match job.method {
        CorrectionMethod::Proponents | CorrectionMethod::Opponents => {
            let (table, row) =
                scores.ok_or_else(|| Error::BadInput(format!("{} correction needs influence scores", job.method)))?;
            let ranking = rank(table, row, job.k);
            if job.method == CorrectionMethod::Proponents {
                let overrides: BTreeMap<usize, usize> = ranking.proponents.iter().map(|&i| (i, truth)).collect();
                PerturbationTerm::with_overrides(ranking.proponents, overrides)
            } else {
                let matches = ranking.opponents.iter().filter(|&&i| train.examples[i].label == truth).count();
                opponent_label_match = Some(matches as f64 / ranking.opponents.len() as f64);
                PerturbationTerm::new(ranking.opponents)
            }
        }
        CorrectionMethod::RandomBaseline => {
            let pool: Vec<usize> = (0..train.len()).filter(|&i| train.examples[i].label == job.predicted).collect();
            let chosen: Vec<usize> = if pool.len() < job.k {
                insufficient_pool = true;
                pool
            } else {
                sample_indices(pool.len(), job.k, seed)?.into_iter().map(|i| pool[i]).collect()
            };
            if chosen.is_empty() {
                return Err(Error::DegenerateInput(format!("no training point carries label {}", job.predicted)));
            }
            let overrides = chosen.iter().map(|&i| (i, truth)).collect();
            PerturbationTerm::with_overrides(chosen, overrides)
        }
    };
    let variation = LossVariation::new(schedule, train, VariationDescriptor::new(vec![term]))?;
    Ok(CorrectionVariation { variation, insufficient_pool, opponent_label_match })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionOutcome {
    pub test_id: usize,
    pub method: CorrectionMethod,
    pub eps: f64,
    pub success: bool,
    /// First step at which z is predicted correctly, or `max_steps`.
    pub steps_taken: usize,
    /// Fraction of heldout probes whose prediction is unchanged.
    pub retention: f64,
    /// Prediction on z after each step.
    pub trace: Vec<usize>,
    pub insufficient_pool: bool,
}

/// Fine-tunes from the checkpoint, continuing its batch schedule, until z
/// is predicted correctly or `max_steps` is reached. Retention is measured
/// on the parameters at the stopping step.
pub fn run_correction(
    model: &Model,
    checkpoint: &Checkpoint,
    job: &CorrectionJob,
    built: &CorrectionVariation,
    heldout_probe: &[LabeledExample],
) -> Result<CorrectionOutcome> {
    checkpoint.check_model(model)?;
    let truth = job.true_label();
    if model.predict(&checkpoint.theta, &job.point.features)? == truth {
        return Err(Error::AlreadyCorrect { test_id: job.test_id });
    }
    let var = &built.variation;
    let start = checkpoint.schedule_position;
    if start + job.max_steps > var.schedule().len() {
        return Err(Error::BadConfig(format!(
            "fine-tuning needs schedule steps up to {} but the schedule has {}",
            start + job.max_steps,
            var.schedule().len()
        )));
    }
    let eps = [job.eps];
    let mut theta = checkpoint.theta.clone();
    let mut trace = Vec::with_capacity(job.max_steps);
    let mut success = false;
    for t in 0..job.max_steps {
        let g = var.perturbed_grad(model, &theta, start + t, &eps)?;
        axpy(-job.lr, &g, &mut theta);
        if !theta.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged { step: t + 1, last_finite: t });
        }
        let pred = model.predict(&theta, &job.point.features)?;
        trace.push(pred);
        if pred == truth {
            success = true;
            break;
        }
    }
    let retention = if heldout_probe.is_empty() {
        1.0
    } else {
        let mut kept = 0;
        for ex in heldout_probe {
            if model.predict(&theta, &ex.features)? == model.predict(&checkpoint.theta, &ex.features)? {
                kept += 1;
            }
        }
        kept as f64 / heldout_probe.len() as f64
    };
    Ok(CorrectionOutcome {
        test_id: job.test_id,
        method: job.method,
        eps: job.eps,
        success,
        steps_taken: trace.len(),
        retention,
        trace,
        insufficient_pool: built.insufficient_pool,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectionConfig {
    #[serde(default = "default_methods")]
    pub methods: Vec<CorrectionMethod>,
    pub eps_grid: Vec<f64>,
    #[serde(default = "default_fifty")]
    pub k: usize,
    #[serde(default = "default_fifty")]
    pub max_steps: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_fifty")]
    pub retention_probes: usize,
    /// Seeded subset of the mispredictions; all of them when absent.
    #[serde(default)]
    pub max_jobs: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn default_methods() -> Vec<CorrectionMethod> {
    vec![CorrectionMethod::Proponents, CorrectionMethod::Opponents, CorrectionMethod::RandomBaseline]
}

fn default_fifty() -> usize {
    50
}

fn default_lr() -> f64 {
    1e-3
}

impl CorrectionConfig {
    /// Top-50 sets, at most 50 steps, fine-tuning rate 1e-3.
    pub fn new(eps_grid: Vec<f64>, seed: u64) -> Self {
        Self {
            methods: default_methods(),
            eps_grid,
            k: 50,
            max_steps: 50,
            lr: default_lr(),
            retention_probes: 50,
            max_jobs: None,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: CorrectionMethod,
    pub eps: f64,
    /// `kε/(b+kε)` for batch size `b`: share of the batch carried by the `k` up-weighted points.
    pub batch_fraction: f64,
    pub jobs: usize,
    pub success_rate: f64,
    /// Over successes only; absent when nothing succeeded.
    pub mean_steps: Option<f64>,
    pub median_steps: Option<f64>,
    pub mean_retention: f64,
    pub opponent_label_match: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub rows: Vec<SummaryRow>,
}

impl CampaignSummary {
    pub fn row(&self, method: CorrectionMethod, eps: f64) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.method == method && r.eps == eps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignResult {
    /// Mispredicted test ids that were attempted.
    pub jobs: Vec<usize>,
    pub retention_probe_ids: Vec<usize>,
    pub outcomes: Vec<CorrectionOutcome>,
    pub summary: CampaignSummary,
}

/// Fraction of an effective batch of size `batch_size + k·eps` taken by the up-weighted set.
pub fn batch_fraction(eps: f64, k: usize, batch_size: usize) -> f64 {
    let w = k as f64 * eps;
    w / (batch_size as f64 + w)
}

/// Recomputes per-(method, ε) aggregates from outcomes, in grid order.
pub fn summarize(
    outcomes: &[CorrectionOutcome],
    methods: &[CorrectionMethod],
    eps_grid: &[f64],
    k: usize,
    batch_size: usize,
    opponent_match: &BTreeMap<usize, f64>,
) -> CampaignSummary {
    let mut rows = Vec::new();
    for &method in methods {
        for &eps in eps_grid {
            let cell: Vec<&CorrectionOutcome> = outcomes.iter().filter(|o| o.method == method && o.eps == eps).collect();
            let n = cell.len();
            let mut steps: Vec<f64> = cell.iter().filter(|o| o.success).map(|o| o.steps_taken as f64).collect();
            steps.sort_by(f64::total_cmp);
            let mean_steps = (!steps.is_empty()).then(|| steps.iter().sum::<f64>() / steps.len() as f64);
            let median_steps = (!steps.is_empty()).then(|| {
                let m = steps.len() / 2;
                if steps.len() % 2 == 1 {
                    steps[m]
                } else {
                    0.5 * (steps[m - 1] + steps[m])
                }
            });
            let denom = n.max(1) as f64;
            let opponent_label_match = (method == CorrectionMethod::Opponents && !opponent_match.is_empty())
                .then(|| opponent_match.values().sum::<f64>() / opponent_match.len() as f64);
            rows.push(SummaryRow {
                method,
                eps,
                batch_fraction: batch_fraction(eps, k, batch_size),
                jobs: n,
                success_rate: cell.iter().filter(|o| o.success).count() as f64 / denom,
                mean_steps,
                median_steps,
                mean_retention: cell.iter().map(|o| o.retention).sum::<f64>() / denom,
                opponent_label_match,
            });
        }
    }
    CampaignSummary { rows }
}

/// Attempts every misprediction of `test` at the checkpoint with every
/// method and ε. Scores come from `estimator` at the checkpoint, with each
/// test point labelled by its current prediction.
#[allow(clippy::too_many_arguments)]
pub fn correction_campaign(
    model: &Model,
    train: Arc<Dataset>,
    schedule: Arc<BatchSchedule>,
    checkpoint: &Checkpoint,
    test: &Dataset,
    heldout: &Dataset,
    estimator: &Estimator,
    cfg: &CorrectionConfig,
) -> Result<CampaignResult> {
    checkpoint.check_model(model)?;
    if let Some(e) = cfg.eps_grid.iter().find(|e| !(e.is_finite() && **e >= 0.0)) {
        return Err(Error::BadConfig(format!("correction ε must be finite and non-negative, got {e}")));
    }
    let theta = &checkpoint.theta;
    let mut mispredicted = Vec::new();
    for (i, ex) in test.examples.iter().enumerate() {
        let pred = model.predict(theta, &ex.features)?;
        if pred != ex.label {
            mispredicted.push((i, pred));
        }
    }
    if let Some(m) = cfg.max_jobs.filter(|&m| m < mispredicted.len()) {
        let keep = sample_indices(mispredicted.len(), m, derive_seed(cfg.seed, "correction-jobs"))?;
        mispredicted = keep.into_iter().map(|i| mispredicted[i]).collect();
    }
    let probe_ids = sample_indices(heldout.len(), cfg.retention_probes.min(heldout.len()), derive_seed(cfg.seed, "retention-probes"))?;
    let probe: Vec<LabeledExample> = probe_ids.iter().map(|&i| heldout.examples[i].clone()).collect();

    let needs_scores = cfg.methods.iter().any(|m| *m != CorrectionMethod::RandomBaseline);
    let scores = if needs_scores && !mispredicted.is_empty() {
        let var = LossVariation::new(schedule.clone(), train.clone(), VariationDescriptor::singletons(0..train.len()))?;
        let jac = estimator.estimate(model, theta, checkpoint.schedule_position, &train.all(), &var)?;
        let at_prediction: Vec<LabeledExample> = mispredicted
            .iter()
            .map(|&(i, pred)| LabeledExample { features: test.examples[i].features.clone(), label: pred })
            .collect();
        Some(influence_score(model, &jac, theta, &at_prediction)?.with_test_ids(mispredicted.iter().map(|p| p.0).collect()))
    } else {
        None
    };

    let mut tasks = Vec::new();
    for (row, &(test_id, predicted)) in mispredicted.iter().enumerate() {
        for &method in &cfg.methods {
            for &eps in &cfg.eps_grid {
                tasks.push((row, CorrectionJob {
                    test_id,
                    point: test.examples[test_id].clone(),
                    predicted,
                    method,
                    k: cfg.k,
                    eps,
                    max_steps: cfg.max_steps,
                    lr: cfg.lr,
                }));
            }
        }
    }
    let results: Vec<(CorrectionOutcome, Option<f64>)> = tasks
        .par_iter()
        .map(|(row, job)| {
            let seed = derive_seed(cfg.seed, &format!("baseline-{}", job.test_id));
            let built = build_correction_variation(job, scores.as_ref().map(|s| (s, *row)), schedule.clone(), train.clone(), seed)?;
            Ok((run_correction(model, checkpoint, job, &built, &probe)?, built.opponent_label_match))
        })
        .collect::<Result<_>>()?;
    let opponent_match: BTreeMap<usize, f64> =
        results.iter().filter_map(|(o, m)| m.map(|m| (o.test_id, m))).collect();
    let outcomes: Vec<CorrectionOutcome> = results.into_iter().map(|(o, _)| o).collect();
    let summary = summarize(&outcomes, &cfg.methods, &cfg.eps_grid, cfg.k, schedule.batch_size(), &opponent_match);
    Ok(CampaignResult { jobs: mispredicted.iter().map(|p| p.0).collect(), retention_probe_ids: probe_ids, outcomes, summary })
}

/// `method,eps,test_id,success,steps,retention`
pub fn write_outcomes_csv(path: &Path, outcomes: &[CorrectionOutcome]) -> Result<()> {
    let rows = outcomes.iter().map(|o| {
        vec![
            o.method.to_string(),
            fmt_f64(o.eps),
            o.test_id.to_string(),
            o.success.to_string(),
            o.steps_taken.to_string(),
            fmt_f64(o.retention),
        ]
    });
    write_csv(path, &["method", "eps", "test_id", "success", "steps", "retention"], rows)
}

/// `method,eps,success_rate,mean_steps,median_steps,mean_retention`
pub fn write_summary_csv(path: &Path, summary: &CampaignSummary) -> Result<()> {
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    let rows = summary.rows.iter().map(|r| {
        vec![
            r.method.to_string(),
            fmt_f64(r.eps),
            fmt_f64(r.batch_fraction),
            r.jobs.to_string(),
            fmt_f64(r.success_rate),
            opt(r.mean_steps),
            opt(r.median_steps),
            fmt_f64(r.mean_retention),
            opt(r.opponent_label_match),
        ]
    });
    write_csv(path, &["method", "eps", "batch_fraction", "jobs", "success_rate", "mean_steps", "median_steps", "mean_retention", "opponent_label_match"], rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::influence::{Method, SIGN_CONVENTION};
    use crate::model::{gen_synthetic, ModelSpec, SyntheticConfig, SyntheticKind};
    use crate::numkit::Matrix;
    use crate::trainer::{train, LrSchedule};

    struct Fixture {
        model: Model,
        train: Arc<Dataset>,
        schedule: Arc<BatchSchedule>,
        checkpoint: Checkpoint,
    }

    fn fixture() -> Fixture {
        let data = gen_synthetic(&SyntheticConfig::new(SyntheticKind::Blobs, 200, 2, 2, 0.1, 4)).unwrap();
        let model = Model::new(ModelSpec::logistic(2, 2, 0.01)).unwrap();
        let train_set = Arc::new(data.train);
        let schedule = Arc::new(BatchSchedule::new(train_set.len(), 10, 400, 1).unwrap());
        let var = LossVariation::base(schedule.clone(), train_set.clone()).unwrap();
        let traj = train(&model, &var, &[], &model.init_params(0), &LrSchedule::constant(0.1), 0, 300, 300).unwrap();
        let checkpoint = Checkpoint::from_trajectory(&model, &traj);
        Fixture { model, train: train_set, schedule, checkpoint }
    }

    fn scores_for(n: usize, row: Vec<f64>) -> InfluenceMatrix {
        InfluenceMatrix {
            scores: Matrix::from_rows(&[row]),
            test_ids: vec![0],
            train_ids: (0..n).collect(),
            method: Method::Hif,
            sign_convention: SIGN_CONVENTION.into(),
        }
    }

    fn misfit(f: &Fixture) -> (LabeledExample, usize) {
        let pt = LabeledExample { features: vec![3.0, 0.0], label: 1 };
        let pred = f.model.predict(&f.checkpoint.theta, &pt.features).unwrap();
        assert_ne!(pred, 1);
        (pt, pred)
    }

    fn job(point: LabeledExample, predicted: usize, method: CorrectionMethod, eps: f64) -> CorrectionJob {
        CorrectionJob { test_id: 7, point, predicted, method, k: 5, eps, max_steps: 20, lr: 0.5 }
    }

    #[test]
    fn proponent_term_is_relabelled_ranking() {
        let f = fixture();
        let n = f.train.len();
        let (pt, pred) = misfit(&f);
        let row: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let table = scores_for(n, row);
        let j = job(pt, pred, CorrectionMethod::Proponents, 0.5);
        let built = build_correction_variation(&j, Some((&table, 0)), f.schedule.clone(), f.train.clone(), 0).unwrap();
        let term = &built.variation.descriptor().terms[0];
        let ranking = rank(&table, 0, 5);
        assert_eq!(term.indices, ranking.proponents);
        assert!(term.overrides.values().all(|&l| l == 1));
        assert_eq!(term.overrides.len(), 5);

        let j = job(j.point.clone(), pred, CorrectionMethod::Opponents, 0.5);
        let built = build_correction_variation(&j, Some((&table, 0)), f.schedule.clone(), f.train.clone(), 0).unwrap();
        assert!(built.variation.descriptor().terms[0].overrides.is_empty());
        assert!(built.opponent_label_match.is_some());
    }

    #[test]
    fn baseline_is_seeded_and_label_matched() {
        let f = fixture();
        let (pt, pred) = misfit(&f);
        let j = job(pt, pred, CorrectionMethod::RandomBaseline, 0.5);
        let a = build_correction_variation(&j, None, f.schedule.clone(), f.train.clone(), 9).unwrap();
        let b = build_correction_variation(&j, None, f.schedule.clone(), f.train.clone(), 9).unwrap();
        let ta = &a.variation.descriptor().terms[0];
        assert_eq!(ta, &b.variation.descriptor().terms[0]);
        assert!(ta.indices.iter().all(|&i| f.train.examples[i].label == pred));
        assert!(!a.insufficient_pool);
        let big = CorrectionJob { k: f.train.len(), ..j };
        let c = build_correction_variation(&big, None, f.schedule.clone(), f.train.clone(), 9).unwrap();
        assert!(c.insufficient_pool);
    }

    #[test]
    fn already_correct_is_rejected() {
        let f = fixture();
        let pt = LabeledExample { features: vec![3.0, 0.0], label: 0 };
        let j = job(pt, 0, CorrectionMethod::RandomBaseline, 0.5);
        let built = build_correction_variation(&j, None, f.schedule.clone(), f.train.clone(), 0).unwrap();
        assert!(matches!(run_correction(&f.model, &f.checkpoint, &j, &built, &[]), Err(Error::AlreadyCorrect { test_id: 7 })));
    }

    #[test]
    fn zero_eps_is_plain_fine_tuning() {
        let f = fixture();
        let (pt, pred) = misfit(&f);
        let probe: Vec<_> = f.train.examples[..20].to_vec();
        let outcomes: Vec<_> = [CorrectionMethod::RandomBaseline, CorrectionMethod::Opponents]
            .into_iter()
            .map(|m| {
                let j = job(pt.clone(), pred, m, 0.0);
                let table = scores_for(f.train.len(), vec![0.0; f.train.len()]);
                let built = build_correction_variation(&j, Some((&table, 0)), f.schedule.clone(), f.train.clone(), 0).unwrap();
                run_correction(&f.model, &f.checkpoint, &j, &built, &probe).unwrap()
            })
            .collect();
        assert_eq!(outcomes[0].trace, outcomes[1].trace);
        assert_eq!(outcomes[0].retention, outcomes[1].retention);
    }

    #[test]
    fn identity_update_keeps_full_retention() {
        let f = fixture();
        let (pt, pred) = misfit(&f);
        let j = CorrectionJob { lr: 0.0, ..job(pt, pred, CorrectionMethod::RandomBaseline, 1.0) };
        let built = build_correction_variation(&j, None, f.schedule.clone(), f.train.clone(), 0).unwrap();
        let probe: Vec<_> = f.train.examples[..30].to_vec();
        let out = run_correction(&f.model, &f.checkpoint, &j, &built, &probe).unwrap();
        assert!(!out.success);
        assert_eq!(out.steps_taken, 20);
        assert_eq!(out.retention, 1.0);
    }

    #[test]
    fn summary_success_rate_is_mean_of_flags() {
        let mk = |success, steps| CorrectionOutcome {
            test_id: 0,
            method: CorrectionMethod::Proponents,
            eps: 0.5,
            success,
            steps_taken: steps,
            retention: 0.5,
            trace: vec![],
            insufficient_pool: false,
        };
        let outcomes = vec![mk(true, 3), mk(false, 50), mk(true, 5), mk(true, 10)];
        let s = summarize(&outcomes, &[CorrectionMethod::Proponents], &[0.5], 4, 4, &BTreeMap::new());
        let r = &s.rows[0];
        assert_eq!(r.success_rate, 0.75);
        assert_eq!(r.mean_steps, Some(6.0));
        assert_eq!(r.median_steps, Some(5.0));
        assert!((r.batch_fraction - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_campaign_is_empty() {
        let f = fixture();
        let empty = Dataset::new(vec![], 2, 2, crate::model::Split::Test).unwrap();
        let cfg = CorrectionConfig::new(vec![0.0, 0.5], 3);
        let r = correction_campaign(&f.model, f.train.clone(), f.schedule.clone(), &f.checkpoint, &empty, &f.train, &Estimator::Tracin, &cfg)
            .unwrap();
        assert!(r.outcomes.is_empty());
        assert!(r.summary.rows.iter().all(|row| row.jobs == 0));
    }
}
