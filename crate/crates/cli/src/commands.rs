//! Subcommand bodies. Each reads its inputs from the run directory, writes
//! its outputs there and returns what the manifest should record.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use iflab::correction::{batch_fraction, correction_campaign, write_outcomes_csv, write_summary_csv};
use iflab::experiments::{
    divergence_experiment, estimate_gronwall_constants, fading_experiment, first_order_validity, gronwall_bound_check,
    write_divergence_csv, write_fading_aggregate_csv, write_fading_csv, write_gronwall_csv, ExperimentSetup,
};
use iflab::influence::influence_score;
use iflab::io::{fmt_f64, write_atomic, write_csv};
use iflab::model::{gen_synthetic, DataSplits, Dataset, Model, ModelKind, ModelSpec, SyntheticConfig};
use iflab::seed::derive_seed;
use iflab::trainer::{train, BatchSchedule, Checkpoint, LrKind, LrSchedule};
use iflab::variation::{LossVariation, PerturbationTerm, VariationDescriptor};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::{hash_files, Manifest, MANIFEST_FILE};

pub const DATA_FILE: &str = "data.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const JACOBIAN_FILE: &str = "jacobian.bin";
pub const INFLUENCE_FILE: &str = "influence.csv";
pub const DIVERGENCE_FILE: &str = "divergence.csv";
pub const GRONWALL_FILE: &str = "gronwall.csv";
pub const FIRST_ORDER_FILE: &str = "first_order.csv";
pub const FIRST_ORDER_RESIDUALS_FILE: &str = "first_order_residuals.csv";
pub const FADING_FILE: &str = "fading.csv";
pub const FADING_AGGREGATE_FILE: &str = "fading_aggregate.csv";
pub const CORRECTION_OUTCOMES_FILE: &str = "correction_outcomes.csv";
pub const CORRECTION_SUMMARY_FILE: &str = "correction_summary.csv";
pub const REPORT_FILE: &str = "report.json";

/// What a successful subcommand hands to the manifest.
#[derive(Debug, Default)]
pub struct Outcome {
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub settings: BTreeMap<String, Value>,
    pub summary: Value,
}

pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Context {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn require(&self, name: &str) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(CliError::MissingArtifact(p))
        }
    }

    fn seed(&self, name: &str) -> u64 {
        derive_seed(self.cfg.run_seed, name)
    }

    fn load_data(&self) -> Result<DataSplits, CliError> {
        Ok(DataSplits::read_csv(&self.require(DATA_FILE)?, Some(self.cfg.data.classes))?)
    }

    fn model(&self, data: &Dataset) -> Result<Model, CliError> {
        let m = &self.cfg.model;
        let spec = match m.kind {
            ModelKind::Logistic => ModelSpec::logistic(data.feature_dim, data.num_classes, m.l2_reg),
            ModelKind::Mlp => {
                let mut dims = vec![data.feature_dim];
                dims.extend(&m.hidden);
                dims.push(data.num_classes);
                ModelSpec::mlp(dims, m.activation, m.l2_reg)
            }
            ModelKind::Quadratic => return Err(CliError::Config("model.kind: `quadratic` has no data pipeline".into())),
        };
        Ok(Model::new(spec)?)
    }

    fn schedule(&self, n_train: usize) -> Result<Arc<BatchSchedule>, CliError> {
        let t = &self.cfg.train;
        Ok(Arc::new(BatchSchedule::new(n_train, t.batch_size, t.steps + t.horizon, self.seed("schedule"))?))
    }

    fn checkpoint(&self, model: &Model) -> Result<Checkpoint, CliError> {
        let ck = Checkpoint::load(&self.require(CHECKPOINT_FILE)?)?;
        ck.check_model(model).map_err(|_| CliError::Config("checkpoint does not match the configured model".into()))?;
        Ok(ck)
    }
}

/// Data, model, schedule and checkpoint of a trained run directory.
struct Trained {
    data: DataSplits,
    train: Arc<Dataset>,
    model: Model,
    schedule: Arc<BatchSchedule>,
    checkpoint: Checkpoint,
}

impl Trained {
    fn load(ctx: &Context) -> Result<Self, CliError> {
        let data = ctx.load_data()?;
        let model = ctx.model(&data.train)?;
        let checkpoint = ctx.checkpoint(&model)?;
        let schedule = ctx.schedule(data.train.len())?;
        let train = Arc::new(data.train.clone());
        Ok(Self { data, train, model, schedule, checkpoint })
    }

    fn setup(&self, lr: f64) -> ExperimentSetup<'_> {
        ExperimentSetup {
            model: &self.model,
            train: self.train.clone(),
            schedule: self.schedule.clone(),
            checkpoint: &self.checkpoint,
            lr: LrSchedule::constant(lr),
        }
    }
}

fn trained_inputs() -> Vec<String> {
    vec![DATA_FILE.into(), CHECKPOINT_FILE.into()]
}

pub fn gen_data(ctx: &Context) -> Result<Outcome, CliError> {
    let d = &ctx.cfg.data;
    let mut sc = SyntheticConfig::new(d.kind, d.n, d.dim, d.classes, d.label_noise, ctx.seed("data"));
    sc.test_fraction = d.test_fraction;
    sc.heldout_fraction = d.heldout_fraction;
    sc.separation = d.separation;
    if let Some(s) = d.spread {
        sc.spread = s;
    }
    let splits = gen_synthetic(&sc)?;
    splits.write_csv(&ctx.path(DATA_FILE))?;
    Ok(Outcome {
        outputs: vec![DATA_FILE.into()],
        settings: BTreeMap::from([("data_seed".into(), json!(sc.seed))]),
        summary: json!({ "train": splits.train.len(), "test": splits.test.len(), "heldout": splits.heldout.len() }),
        ..Default::default()
    })
}

pub fn train_cmd(ctx: &Context) -> Result<Outcome, CliError> {
    let data = ctx.load_data()?;
    let model = ctx.model(&data.train)?;
    let t = &ctx.cfg.train;
    let train_set = Arc::new(data.train.clone());
    let schedule = ctx.schedule(train_set.len())?;
    let base = LossVariation::base(schedule, train_set.clone())?;
    let mut init = model.init_params(ctx.seed("init"));
    init.iter_mut().for_each(|v| *v *= ctx.cfg.model.init_scale);
    let lr = match t.lr_kind {
        LrKind::Constant => LrSchedule::constant(t.lr),
        LrKind::Cosine => LrSchedule::cosine(t.lr, t.steps.max(1)),
    };
    let traj = train(&model, &base, &[], &init, &lr, 0, t.steps, t.steps.max(1))?;
    let ck = Checkpoint::from_trajectory(&model, &traj);
    ck.save(&ctx.path(CHECKPOINT_FILE))?;
    Ok(Outcome {
        inputs: vec![DATA_FILE.into()],
        outputs: vec![CHECKPOINT_FILE.into()],
        settings: BTreeMap::from([
            ("num_params".into(), json!(model.num_params())),
            ("schedule_length".into(), json!(t.steps + t.horizon)),
        ]),
        summary: json!({
            "step": ck.step,
            "train_loss": model.loss(&ck.theta, &train_set.examples)?,
            "train_accuracy": model.accuracy(&ck.theta, &train_set.examples)?,
            "test_accuracy": model.accuracy(&ck.theta, &data.test.examples)?,
        }),
    })
}

pub fn influence(ctx: &Context) -> Result<Outcome, CliError> {
    let tr = Trained::load(ctx)?;
    let ic = &ctx.cfg.influence;
    let n_train = ic.train_points.unwrap_or(tr.train.len()).min(tr.train.len());
    let n_test = ic.test_points.unwrap_or(tr.data.test.len()).min(tr.data.test.len());
    let train_ids: Vec<usize> = (0..n_train).collect();
    let var = LossVariation::new(tr.schedule.clone(), tr.train.clone(), VariationDescriptor::singletons(train_ids.clone()))?;
    let estimator = ctx.cfg.estimator.build(ctx.cfg.estimator.method, ctx.cfg.run_seed)?;
    let theta = &tr.checkpoint.theta;
    let jac = estimator.estimate(&tr.model, theta, tr.checkpoint.schedule_position, &tr.train.examples, &var)?;
    jac.save(&ctx.path(JACOBIAN_FILE))?;
    let scores = influence_score(&tr.model, &jac, theta, &tr.data.test.examples[..n_test])?.with_train_ids(train_ids);
    scores.write_csv(&ctx.path(INFLUENCE_FILE))?;
    Ok(Outcome {
        inputs: trained_inputs(),
        outputs: vec![JACOBIAN_FILE.into(), INFLUENCE_FILE.into()],
        settings: BTreeMap::from([
            ("method".into(), json!(jac.method)),
            ("sign_convention".into(), json!(scores.sign_convention)),
            ("provenance".into(), serde_json::to_value(&jac.provenance).map_err(|e| CliError::Other(e.to_string()))?),
        ]),
        summary: json!({ "train_points": n_train, "test_points": n_test, "converged": jac.provenance.converged }),
    })
}

pub fn divergence(ctx: &Context) -> Result<Outcome, CliError> {
    let tr = Trained::load(ctx)?;
    let sec = &ctx.cfg.divergence;
    let out = divergence_experiment(&tr.setup(sec.lr), &sec.build(ctx.cfg.run_seed))?;
    write_divergence_csv(&ctx.path(DIVERGENCE_FILE), &out.series)?;
    let fits: Vec<Value> = out
        .series
        .iter()
        .map(|s| json!({ "eps": s.eps, "window_start": s.window_start, "tail_fit": s.fit, "head_fit": s.head_fit }))
        .collect();
    Ok(Outcome {
        inputs: trained_inputs(),
        outputs: vec![DIVERGENCE_FILE.into()],
        settings: BTreeMap::from([("upsample".into(), json!(out.upsample))]),
        summary: json!({ "series": fits }),
    })
}

pub fn gronwall(ctx: &Context) -> Result<Outcome, CliError> {
    let tr = Trained::load(ctx)?;
    let sec = &ctx.cfg.divergence;
    let out = divergence_experiment(&tr.setup(sec.lr), &sec.build(ctx.cfg.run_seed))?;
    let consts = estimate_gronwall_constants(&tr.model, &out.variation, &out.runs)?;
    let reports: Vec<_> = out.runs.iter().map(|r| gronwall_bound_check(r, &consts)).collect();
    write_gronwall_csv(&ctx.path(GRONWALL_FILE), &reports)?;
    let per_eps: Vec<Value> =
        reports.iter().map(|r| json!({ "eps": r.eps, "violations": r.violations, "max_ratio": r.max_ratio })).collect();
    Ok(Outcome {
        inputs: trained_inputs(),
        outputs: vec![GRONWALL_FILE.into()],
        settings: BTreeMap::from([("upsample".into(), json!(out.upsample))]),
        summary: json!({
            "c": consts.c,
            "a": consts.a,
            "violations": reports.iter().map(|r| r.violations).sum::<usize>(),
            "per_eps": per_eps,
        }),
    })
}

pub fn first_order(ctx: &Context) -> Result<Outcome, CliError> {
    let tr = Trained::load(ctx)?;
    let sec = &ctx.cfg.first_order;
    if sec.term_size == 0 || sec.term_size > tr.train.len() {
        return Err(CliError::Config(format!("first_order.term_size must lie in 1..={}", tr.train.len())));
    }
    let setup = tr.setup(sec.lr);
    let var = setup.variation(VariationDescriptor::new(vec![PerturbationTerm::new((0..sec.term_size).collect())]))?;
    let rows = first_order_validity(&setup, &var, &sec.eps_grid, &sec.t_grid)?;
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    write_csv(
        &ctx.path(FIRST_ORDER_FILE),
        &["t", "slope", "r_squared", "residual_constant", "exact_zero"],
        rows.iter().map(|r| vec![r.t.to_string(), opt(r.slope), opt(r.r_squared), fmt_f64(r.residual_constant), r.exact_zero.to_string()]),
    )?;
    write_csv(
        &ctx.path(FIRST_ORDER_RESIDUALS_FILE),
        &["t", "eps", "residual"],
        rows.iter().flat_map(|r| {
            sec.eps_grid.iter().zip(&r.residuals).map(move |(e, v)| vec![r.t.to_string(), fmt_f64(*e), fmt_f64(*v)])
        }),
    )?;
    let summary: Vec<Value> = rows
        .iter()
        .map(|r| json!({ "t": r.t, "slope": r.slope, "r_squared": r.r_squared, "residual_constant": r.residual_constant, "exact_zero": r.exact_zero }))
        .collect();
    Ok(Outcome {
        inputs: trained_inputs(),
        outputs: vec![FIRST_ORDER_FILE.into(), FIRST_ORDER_RESIDUALS_FILE.into()],
        summary: json!({ "rows": summary }),
        ..Default::default()
    })
}

pub fn fading(ctx: &Context) -> Result<Outcome, CliError> {
    let tr = Trained::load(ctx)?;
    let sec = &ctx.cfg.fading;
    let estimators =
        sec.methods.iter().map(|&m| ctx.cfg.estimator.build(m, ctx.cfg.run_seed)).collect::<Result<Vec<_>, _>>()?;
    let protocol = sec.protocol();
    let result = fading_experiment(&tr.setup(sec.lr), &tr.data.test, &estimators, &protocol, ctx.seed("probes"))?;
    write_fading_csv(&ctx.path(FADING_FILE), &result)?;
    write_fading_aggregate_csv(&ctx.path(FADING_AGGREGATE_FILE), &result)?;
    let late_lo = 100.min(protocol.steps);
    let windows: Vec<Value> = result
        .series
        .iter()
        .map(|s| {
            json!({
                "method": s.method,
                "early_mean_r": s.window_mean(1, 5.min(protocol.steps)),
                "late_mean_r": s.window_mean(late_lo, protocol.steps),
                "late_window": [late_lo, protocol.steps],
            })
        })
        .collect();
    Ok(Outcome {
        inputs: trained_inputs(),
        outputs: vec![FADING_FILE.into(), FADING_AGGREGATE_FILE.into()],
        settings: BTreeMap::from([("probes".into(), serde_json::to_value(&result.probes).map_err(|e| CliError::Other(e.to_string()))?)]),
        summary: json!({ "series": windows }),
    })
}

pub fn correct(ctx: &Context) -> Result<Outcome, CliError> {
    let tr = Trained::load(ctx)?;
    let cfg = ctx.cfg.correction.build(ctx.cfg.run_seed);
    let estimator = ctx.cfg.estimator.build(ctx.cfg.estimator.method, ctx.cfg.run_seed)?;
    let result = correction_campaign(
        &tr.model,
        tr.train.clone(),
        tr.schedule.clone(),
        &tr.checkpoint,
        &tr.data.test,
        &tr.data.heldout,
        &estimator,
        &cfg,
    )?;
    write_outcomes_csv(&ctx.path(CORRECTION_OUTCOMES_FILE), &result.outcomes)?;
    write_summary_csv(&ctx.path(CORRECTION_SUMMARY_FILE), &result.summary)?;
    let bs = tr.schedule.batch_size();
    let fractions: Vec<f64> = cfg.eps_grid.iter().map(|&e| batch_fraction(e, cfg.k, bs)).collect();
    Ok(Outcome {
        inputs: trained_inputs(),
        outputs: vec![CORRECTION_OUTCOMES_FILE.into(), CORRECTION_SUMMARY_FILE.into()],
        settings: BTreeMap::from([
            ("fine_tuning_schedule".into(), json!("continues the base batch schedule from the checkpoint position")),
            ("eps_grid_raw".into(), json!(cfg.eps_grid)),
            ("batch_fraction".into(), json!(fractions)),
            ("estimator".into(), json!(estimator.method())),
            ("jobs".into(), json!(result.jobs)),
            ("retention_probe_ids".into(), json!(result.retention_probe_ids)),
        ]),
        summary: serde_json::to_value(&result.summary).map_err(|e| CliError::Other(e.to_string()))?,
    })
}

/// Verifies every recorded output against its hash and gathers the
/// per-command summaries into `report.json`.
pub fn report(ctx: &Context) -> Result<Outcome, CliError> {
    let manifest = Manifest::read(&ctx.out)?.ok_or_else(|| CliError::MissingArtifact(ctx.path(MANIFEST_FILE)))?;
    let mut commands = BTreeMap::new();
    let mut inputs = Vec::new();
    for (name, entry) in manifest.commands.iter().filter(|(n, _)| n.as_str() != "report") {
        if entry.status == "ok" {
            let names: Vec<String> = entry.outputs.keys().cloned().collect();
            let now = hash_files(&ctx.out, &names)?;
            if let Some((file, _)) = now.iter().find(|(f, h)| entry.outputs.get(*f) != Some(h)) {
                return Err(CliError::Other(format!("{file} changed after `{name}` recorded it")));
            }
            inputs.extend(names);
        }
        commands.insert(name.clone(), json!({ "status": entry.status, "summary": entry.summary, "error": entry.error }));
    }
    if commands.is_empty() {
        return Err(CliError::MissingArtifact(ctx.path(MANIFEST_FILE)));
    }
    inputs.sort();
    inputs.dedup();
    let report = json!({ "tool": manifest.tool, "version": manifest.version, "commands": commands });
    let mut text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Other(e.to_string()))?;
    text.push('\n');
    write_atomic(&ctx.path(REPORT_FILE), text.as_bytes())?;
    Ok(Outcome { inputs, outputs: vec![REPORT_FILE.into()], ..Default::default() })
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Other(format!("cannot create {}: {e}", dir.display())))
}
