//! Loss variations `𝓛_t(θ, ε) = L_{B_t}(θ) + Σ_q ε_q · l_{S_q}(θ)`.
//!
//! The base term is the full training loss of the scheduled batch `B_t`
//! (including regularisation). Each perturbation term is the mean data loss
//! over its index set `S_q`, optionally with relabelled examples. The
//! variation is exactly linear in ε, so `∂²𝓛/∂ε_q∂θ = ∇_θ l_{S_q}`.

use crate::error::{Error, Result};
use crate::model::{Dataset, LabeledExample, Model};
use crate::numkit::{axpy, Matrix, Vector};
use crate::trainer::BatchSchedule;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

/// ε ∈ ℝ^Q; negative entries down-weight their term.
pub type Epsilon = Vector;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationTerm {
    pub indices: Vec<usize>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub overrides: BTreeMap<usize, usize>,
}

impl PerturbationTerm {
    pub fn new(indices: Vec<usize>) -> Self {
        Self { indices, overrides: BTreeMap::new() }
    }

    pub fn single(index: usize) -> Self {
        Self::new(vec![index])
    }

    pub fn with_overrides(indices: Vec<usize>, overrides: BTreeMap<usize, usize>) -> Self {
        Self { indices, overrides }
    }
}

/// Serializable part of a variation: the terms and the optional set of
/// schedule steps at which they are active (all steps when absent).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariationDescriptor {
    pub terms: Vec<PerturbationTerm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_step_mask: Option<BTreeSet<usize>>,
}

impl VariationDescriptor {
    pub fn new(terms: Vec<PerturbationTerm>) -> Self {
        Self { terms, per_step_mask: None }
    }

    /// One single-example term per training index.
    pub fn singletons(indices: impl IntoIterator<Item = usize>) -> Self {
        Self::new(indices.into_iter().map(PerturbationTerm::single).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone)]
pub struct LossVariation {
    schedule: Arc<BatchSchedule>,
    train: Arc<Dataset>,
    descriptor: VariationDescriptor,
    term_examples: Vec<Vec<LabeledExample>>,
}

impl LossVariation {
    pub fn new(schedule: Arc<BatchSchedule>, train: Arc<Dataset>, descriptor: VariationDescriptor) -> Result<Self> {
        if schedule.num_examples() != train.len() {
            return Err(Error::BadInput(format!(
                "schedule was built for {} examples but the training set has {}",
                schedule.num_examples(),
                train.len()
            )));
        }
        let mut term_examples = Vec::with_capacity(descriptor.terms.len());
        for (q, term) in descriptor.terms.iter().enumerate() {
            if term.indices.is_empty() {
                return Err(Error::BadInput(format!("term {q} has no indices")));
            }
            let mut seen = BTreeSet::new();
            for &i in &term.indices {
                if i >= train.len() {
                    return Err(Error::BadInput(format!("term {q}: index {i} out of range {}", train.len())));
                }
                if !seen.insert(i) {
                    return Err(Error::BadInput(format!("term {q}: duplicate index {i}")));
                }
            }
            for (&i, &label) in &term.overrides {
                if !seen.contains(&i) {
                    return Err(Error::BadInput(format!("term {q}: override for index {i} not in the term")));
                }
                if label >= train.num_classes {
                    return Err(Error::BadInput(format!("term {q}: override label {label} ≥ {}", train.num_classes)));
                }
            }
            term_examples.push(
                term.indices
                    .iter()
                    .map(|&i| {
                        let mut ex = train.examples[i].clone();
                        if let Some(&label) = term.overrides.get(&i) {
                            ex.label = label;
                        }
                        ex
                    })
                    .collect(),
            );
        }
        Ok(Self { schedule, train, descriptor, term_examples })
    }

    /// A variation with no perturbation terms (`Q = 0`).
    pub fn base(schedule: Arc<BatchSchedule>, train: Arc<Dataset>) -> Result<Self> {
        Self::new(schedule, train, VariationDescriptor::default())
    }

    pub fn num_terms(&self) -> usize {
        self.term_examples.len()
    }

    pub fn descriptor(&self) -> &VariationDescriptor {
        &self.descriptor
    }

    pub fn schedule(&self) -> &Arc<BatchSchedule> {
        &self.schedule
    }

    pub fn train_set(&self) -> &Arc<Dataset> {
        &self.train
    }

    /// Short content hash of the descriptor.
    pub fn id(&self) -> String {
        let json = serde_json::to_vec(&self.descriptor).expect("descriptor serializes");
        crate::io::sha256_hex(&json)[..16].to_string()
    }

    /// Examples of term `q` with overrides applied.
    pub fn term_examples(&self, q: usize) -> &[LabeledExample] {
        &self.term_examples[q]
    }

    pub fn base_batch(&self, t: usize) -> Result<Vec<&LabeledExample>> {
        Ok(self.train.gather(self.schedule.batch(t)?))
    }

    pub fn is_active(&self, t: usize) -> bool {
        self.descriptor.per_step_mask.as_ref().is_none_or(|m| m.contains(&t))
    }

    fn check_eps(&self, eps: &[f64]) -> Result<()> {
        if eps.len() != self.num_terms() {
            return Err(Error::BadInput(format!("ε has dim {} but the variation has {} terms", eps.len(), self.num_terms())));
        }
        if !eps.iter().all(|e| e.is_finite()) {
            return Err(Error::NonFinite { context: "ε".into() });
        }
        Ok(())
    }

    /// `𝓛_t(θ, ε)`; terms with `ε_q = 0` are skipped so ε = 0 reproduces the
    /// base loss bit for bit.
    pub fn perturbed_loss(&self, model: &Model, theta: &[f64], t: usize, eps: &[f64]) -> Result<f64> {
        self.check_eps(eps)?;
        let mut value = model.loss(theta, &self.base_batch(t)?)?;
        if self.is_active(t) {
            for (q, &e) in eps.iter().enumerate() {
                if e != 0.0 {
                    value += e * model.data_loss(theta, &self.term_examples[q])?;
                }
            }
        }
        Ok(value)
    }

    /// `∇_θ 𝓛_t(θ, ε)`, bitwise equal to the base gradient at ε = 0.
    pub fn perturbed_grad(&self, model: &Model, theta: &[f64], t: usize, eps: &[f64]) -> Result<Vector> {
        self.check_eps(eps)?;
        let mut g = model.grad(theta, &self.base_batch(t)?)?;
        if self.is_active(t) {
            for (q, &e) in eps.iter().enumerate() {
                if e != 0.0 {
                    axpy(e, &model.data_grad(theta, &self.term_examples[q])?, &mut g);
                }
            }
        }
        Ok(g)
    }

    /// `∇_θ l_{S_q}(θ)`.
    pub fn term_grad(&self, model: &Model, theta: &[f64], q: usize) -> Result<Vector> {
        model.data_grad(theta, &self.term_examples[q])
    }

    /// `Σ_q ε_q ∇_θ l_{S_q}(θ)` at step `t` (zero when the mask excludes `t`).
    pub fn perturbation_grad(&self, model: &Model, theta: &[f64], t: usize, eps: &[f64]) -> Result<Vector> {
        self.check_eps(eps)?;
        let mut g = vec![0.0; model.num_params()];
        if self.is_active(t) {
            for (q, &e) in eps.iter().enumerate() {
                if e != 0.0 {
                    axpy(e, &self.term_grad(model, theta, q)?, &mut g);
                }
            }
        }
        Ok(g)
    }

    /// `∇²_{(ε,θ)} 𝓛_t` as a `Q × N` matrix; row `q` is `∇_θ l_{S_q}(θ)`.
    pub fn mixed_second(&self, model: &Model, theta: &[f64], t: usize) -> Result<Matrix> {
        let mut m = Matrix::zeros(self.num_terms(), model.num_params());
        if self.is_active(t) {
            for q in 0..self.num_terms() {
                let g = self.term_grad(model, theta, q)?;
                m.row_mut(q).copy_from_slice(&g);
            }
        }
        Ok(m)
    }

    /// Hessian-vector product of the base loss `L_{B_t}` at θ.
    pub fn base_hvp(&self, model: &Model, theta: &[f64], t: usize, v: &[f64]) -> Result<Vector> {
        model.hvp(theta, &self.base_batch(t)?, v)
    }

    /// Hessian-vector product of `𝓛_t(·, ε)` at θ.
    pub fn perturbed_hvp(&self, model: &Model, theta: &[f64], t: usize, eps: &[f64], v: &[f64]) -> Result<Vector> {
        self.check_eps(eps)?;
        let mut hv = self.base_hvp(model, theta, t, v)?;
        if self.is_active(t) {
            for (q, &e) in eps.iter().enumerate() {
                if e != 0.0 {
                    axpy(e, &model.data_hvp(theta, &self.term_examples[q], v)?, &mut hv);
                }
            }
        }
        Ok(hv)
    }

    pub fn base_hessian(&self, model: &Model, theta: &[f64], t: usize) -> Result<Matrix> {
        model.full_hessian(theta, &self.base_batch(t)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{gen_synthetic, ModelSpec, SyntheticConfig, SyntheticKind};

    fn fixture() -> (Model, Arc<Dataset>, Arc<BatchSchedule>) {
        let data = gen_synthetic(&SyntheticConfig::new(SyntheticKind::Blobs, 60, 2, 2, 0.1, 5)).unwrap();
        let train = Arc::new(data.train);
        let schedule = Arc::new(BatchSchedule::new(train.len(), 8, 20, 3).unwrap());
        (Model::new(ModelSpec::logistic(2, 2, 0.05)).unwrap(), train, schedule)
    }

    #[test]
    fn zero_eps_is_bitwise_base() {
        let (model, train, schedule) = fixture();
        let var = LossVariation::new(schedule, train, VariationDescriptor::new(vec![PerturbationTerm::new(vec![1, 2])])).unwrap();
        let theta = model.init_params(1);
        let base_batch = var.base_batch(4).unwrap();
        assert_eq!(var.perturbed_loss(&model, &theta, 4, &[0.0]).unwrap().to_bits(), model.loss(&theta, &base_batch).unwrap().to_bits());
        assert_eq!(var.perturbed_grad(&model, &theta, 4, &[0.0]).unwrap(), model.grad(&theta, &base_batch).unwrap());
    }

    #[test]
    fn term_equal_to_batch_doubles_data_term() {
        let (model, train, schedule) = fixture();
        let batch_idx = schedule.batch(2).unwrap().to_vec();
        let var = LossVariation::new(schedule, train, VariationDescriptor::new(vec![PerturbationTerm::new(batch_idx)])).unwrap();
        let theta = model.init_params(2);
        let batch = var.base_batch(2).unwrap();
        let data = model.data_loss(&theta, &batch).unwrap();
        let reg = model.loss(&theta, &batch).unwrap() - data;
        let v = var.perturbed_loss(&model, &theta, 2, &[1.0]).unwrap();
        assert!((v - (2.0 * data + reg)).abs() < 1e-14);
    }

    #[test]
    fn two_terms_compose_from_model_losses() {
        let (model, train, schedule) = fixture();
        let terms = vec![PerturbationTerm::new(vec![0, 3]), PerturbationTerm::with_overrides(vec![5], BTreeMap::from([(5, 1)]))];
        let var = LossVariation::new(schedule, train.clone(), VariationDescriptor::new(terms)).unwrap();
        let theta = model.init_params(3);
        let mut relabeled = train.examples[5].clone();
        relabeled.label = 1;
        let expected = model.loss(&theta, &var.base_batch(0).unwrap()).unwrap()
            + 0.3 * model.data_loss(&theta, &train.gather(&[0, 3])).unwrap()
            - 0.7 * model.data_loss(&theta, &[relabeled]).unwrap();
        let v = var.perturbed_loss(&model, &theta, 0, &[0.3, -0.7]).unwrap();
        assert!((v - expected).abs() < 1e-14);
    }

    #[test]
    fn mixed_second_row_is_term_gradient() {
        let (model, train, schedule) = fixture();
        let var = LossVariation::new(schedule, train.clone(), VariationDescriptor::singletons([7])).unwrap();
        let theta = model.init_params(4);
        let m = var.mixed_second(&model, &theta, 0).unwrap();
        assert_eq!(m.row(0), model.data_grad(&theta, &[&train.examples[7]]).unwrap().as_slice());
    }

    #[test]
    fn mixed_second_matches_eps_finite_difference() {
        let (model, train, schedule) = fixture();
        let var = LossVariation::new(schedule, train, VariationDescriptor::new(vec![PerturbationTerm::new(vec![1, 9]), PerturbationTerm::single(4)])).unwrap();
        let theta = model.init_params(5);
        let m = var.mixed_second(&model, &theta, 3).unwrap();
        let h = 1e-3;
        for q in 0..2 {
            let mut ep = vec![0.0; 2];
            ep[q] = h;
            let mut em = vec![0.0; 2];
            em[q] = -h;
            let gp = var.perturbed_grad(&model, &theta, 3, &ep).unwrap();
            let gm = var.perturbed_grad(&model, &theta, 3, &em).unwrap();
            for j in 0..model.num_params() {
                let fd = (gp[j] - gm[j]) / (2.0 * h);
                assert!((fd - m[(q, j)]).abs() <= 1e-8 * (1.0 + m[(q, j)].abs()));
            }
        }
    }

    #[test]
    fn zero_row_at_term_stationary_point() {
        // quadratic kind: a zero feature vector gives a term with zero gradient
        let a = Matrix::identity(2);
        let model = Model::new(ModelSpec::quadratic(a, vec![0.0, 0.0])).unwrap();
        let ex = LabeledExample { features: vec![0.0, 0.0], label: 0 };
        let train = Arc::new(Dataset::new(vec![ex.clone(), ex], 1, 2, crate::model::Split::Train).unwrap());
        let schedule = Arc::new(BatchSchedule::new(2, 1, 4, 0).unwrap());
        let var = LossVariation::new(schedule, train, VariationDescriptor::singletons([0])).unwrap();
        let m = var.mixed_second(&model, &[0.3, -0.2], 0).unwrap();
        assert!(m.row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_disables_terms_outside_listed_steps() {
        let (model, train, schedule) = fixture();
        let mut desc = VariationDescriptor::singletons([0]);
        desc.per_step_mask = Some(BTreeSet::from([2]));
        let var = LossVariation::new(schedule, train, desc).unwrap();
        let theta = model.init_params(6);
        assert_eq!(var.perturbed_grad(&model, &theta, 1, &[5.0]).unwrap(), var.perturbed_grad(&model, &theta, 1, &[0.0]).unwrap());
        assert_ne!(var.perturbed_grad(&model, &theta, 2, &[5.0]).unwrap(), var.perturbed_grad(&model, &theta, 2, &[0.0]).unwrap());
    }

    #[test]
    fn invalid_terms_rejected() {
        let (_, train, schedule) = fixture();
        let bad = |terms| LossVariation::new(schedule.clone(), train.clone(), VariationDescriptor::new(terms)).is_err();
        assert!(bad(vec![PerturbationTerm::new(vec![])]));
        assert!(bad(vec![PerturbationTerm::new(vec![1, 1])]));
        assert!(bad(vec![PerturbationTerm::new(vec![10_000])]));
        assert!(bad(vec![PerturbationTerm::with_overrides(vec![1], BTreeMap::from([(1, 7)]))]));
        assert!(bad(vec![PerturbationTerm::with_overrides(vec![1], BTreeMap::from([(2, 0)]))]));
    }

    #[test]
    fn descriptor_json_shape() {
        let mut desc = VariationDescriptor::new(vec![PerturbationTerm::with_overrides(vec![3, 4], BTreeMap::from([(4, 1)]))]);
        desc.per_step_mask = Some(BTreeSet::from([0, 5]));
        let json = desc.to_json().unwrap();
        assert_eq!(json, r#"{"terms":[{"indices":[3,4],"overrides":{"4":1}}],"per_step_mask":[0,5]}"#);
        assert_eq!(VariationDescriptor::from_json(&json).unwrap(), desc);
    }
}
