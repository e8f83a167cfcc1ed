//! Self-adaptive per-sample weights `m` and per-category weights `lambda`.

use std::collections::BTreeMap;

use crate::losses::CategoryId;
use thiserror::Error;

/// Upper bound on any category weight.
pub const LAMBDA_CAP: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BalanceError {
    #[error("non-finite m-gradient at index {index}")]
    NonFinite { index: usize },
    #[error("length mismatch: {0} weights vs {1} gradients")]
    LengthMismatch(usize, usize),
    #[error("no gradient statistic for category {0}")]
    MissingCategory(CategoryId),
    #[error("invalid balancing parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalancingState {
    pub m: BTreeMap<CategoryId, Vec<f64>>,
    pub lambda: BTreeMap<CategoryId, f64>,
    pub eta_m: f64,
    pub p_m: usize,
    pub p_lambda: usize,
    pub m_updates: usize,
    pub lambda_updates: usize,
}

impl BalancingState {
    /// All `m` entries and all `lambda` start at exactly 1.
    pub fn new(
        counts: &[(CategoryId, usize)],
        eta_m: f64,
        p_m: usize,
        p_lambda: usize,
    ) -> Result<Self, BalanceError> {
        if !(eta_m > 0.0 && eta_m.is_finite()) {
            return Err(BalanceError::InvalidParameter(format!("eta_m must be > 0, got {eta_m}")));
        }
        if p_m == 0 || p_lambda == 0 {
            return Err(BalanceError::InvalidParameter("periods must be positive".into()));
        }
        Ok(Self {
            m: counts.iter().map(|&(c, n)| (c, vec![1.0; n])).collect(),
            lambda: counts.iter().map(|&(c, _)| (c, 1.0)).collect(),
            eta_m,
            p_m,
            p_lambda,
            m_updates: 0,
            lambda_updates: 0,
        })
    }

    pub fn categories(&self) -> Vec<CategoryId> {
        self.lambda.keys().copied().collect()
    }

    pub fn m(&self, id: CategoryId) -> &[f64] {
        &self.m[&id]
    }

    pub fn lambda(&self, id: CategoryId) -> f64 {
        self.lambda[&id]
    }

    pub fn apply_individual(&mut self, grads: &BTreeMap<CategoryId, Vec<f64>>) -> Result<(), BalanceError> {
        let mut next = self.m.clone();
        for (id, m) in next.iter_mut() {
            let g = grads.get(id).ok_or(BalanceError::MissingCategory(*id))?;
            *m = update_individual(m, g, self.eta_m)?;
        }
        self.m = next;
        self.m_updates += 1;
        Ok(())
    }

    pub fn apply_category(&mut self, mean_abs_grads: &BTreeMap<CategoryId, f64>) -> Result<(), BalanceError> {
        self.lambda = update_category(&self.lambda, mean_abs_grads)?;
        self.lambda_updates += 1;
        Ok(())
    }
}

/// Gradient ascent on the per-sample weights: `m + eta_m * grad_m`.
pub fn update_individual(m: &[f64], grad_m: &[f64], eta_m: f64) -> Result<Vec<f64>, BalanceError> {
    if m.len() != grad_m.len() {
        return Err(BalanceError::LengthMismatch(m.len(), grad_m.len()));
    }
    if let Some(index) = grad_m.iter().position(|g| !g.is_finite()) {
        return Err(BalanceError::NonFinite { index });
    }
    Ok(m.iter().zip(grad_m).map(|(w, g)| w + eta_m * g).collect())
}

/// `lambda_c += sum(alpha) / alpha_c`, or reset to 1 where `alpha_c == 0`.
/// `alpha` is the mean absolute parameter gradient of each category.
pub fn update_category(
    lambda: &BTreeMap<CategoryId, f64>,
    mean_abs_grads: &BTreeMap<CategoryId, f64>,
) -> Result<BTreeMap<CategoryId, f64>, BalanceError> {
    let mut alpha = Vec::with_capacity(lambda.len());
    for id in lambda.keys() {
        let a = *mean_abs_grads.get(id).ok_or(BalanceError::MissingCategory(*id))?;
        alpha.push(a);
    }
    let total: f64 = alpha.iter().sum();
    Ok(lambda
        .iter()
        .zip(alpha)
        .map(|((&id, &l), a)| {
            let next = if a == 0.0 { 1.0 } else { l + total / a };
            let next = if next > LAMBDA_CAP || !next.is_finite() {
                log::warn!("lambda for category {id} capped at {LAMBDA_CAP:e} (was {next:e})");
                LAMBDA_CAP
            } else {
                next
            };
            (id, next)
        })
        .collect())
}

/// `epoch mod period == 0`
pub fn due(epoch: usize, period: usize) -> bool {
    period != 0 && epoch % period == 0
}
