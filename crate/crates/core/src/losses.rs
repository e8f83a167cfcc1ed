//! Categorised squared losses and their adjoints.

use std::fmt;

use crate::diffnet::ParamGrad;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("length mismatch: {0} values vs {1} weights")]
    LengthMismatch(usize, usize),
    #[error("invalid weight {value} for category {category}")]
    InvalidWeight { category: CategoryId, value: f64 },
    #[error("category {0} has no parameter gradient")]
    MissingGradient(CategoryId),
}

/// Loss category. Ordering follows the trajectory columns: data, boundary,
/// residual, then inequalities by index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CategoryId {
    Data,
    Boundary,
    Residual,
    Inequality(usize),
}

impl CategoryId {
    /// Short label used in CSV columns: `0`, `b`, `f`, `h1`, `h2`, ...
    pub fn label(&self) -> String {
        match self {
            CategoryId::Data => "0".into(),
            CategoryId::Boundary => "b".into(),
            CategoryId::Residual => "f".into(),
            CategoryId::Inequality(k) => format!("h{}", k + 1),
        }
    }

    /// The category list for a problem with `n_ineq` inequalities.
    pub fn all(n_ineq: usize) -> Vec<CategoryId> {
        let mut v = vec![CategoryId::Data, CategoryId::Boundary, CategoryId::Residual];
        v.extend((0..n_ineq).map(CategoryId::Inequality));
        v
    }
}

impl fmt::Display for CategoryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// How the positive part of an inequality value is taken.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum HingeKind {
    /// `max(0, h)`
    #[default]
    Relu,
    /// `delta * ln(1 + exp(h / delta))`
    Softplus { delta: f64 },
}

impl HingeKind {
    /// Value and derivative of the positive-part map.
    #[inline]
    pub fn eval(self, h: f64) -> (f64, f64) {
        match self {
            HingeKind::Relu => {
                if h > 0.0 {
                    (h, 1.0)
                } else {
                    (0.0, 0.0)
                }
            }
            HingeKind::Softplus { delta } => {
                let z = h / delta;
                let v = if z > 30.0 { h } else { delta * z.exp().ln_1p() };
                (v, 1.0 / (1.0 + (-z).exp()))
            }
        }
    }
}

fn check(values: &[f64], m: &[f64]) -> Result<(), LossError> {
    if values.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if values.len() != m.len() {
        return Err(LossError::LengthMismatch(values.len(), m.len()));
    }
    Ok(())
}

/// `(1/N) sum (m_i r_i)^2`
pub fn weighted_mse(residuals: &[f64], m: &[f64]) -> Result<f64, LossError> {
    check(residuals, m)?;
    let s: f64 = residuals.iter().zip(m).map(|(r, w)| (w * r).powi(2)).sum();
    Ok(s / residuals.len() as f64)
}

/// `(1/N) sum (m_i max(0, h_i))^2`
pub fn hinge_loss(h_values: &[f64], m: &[f64]) -> Result<f64, LossError> {
    hinge_loss_with(h_values, m, HingeKind::Relu)
}

pub fn hinge_loss_with(h_values: &[f64], m: &[f64], kind: HingeKind) -> Result<f64, LossError> {
    check(h_values, m)?;
    let s: f64 = h_values.iter().zip(m).map(|(&h, w)| (w * kind.eval(h).0).powi(2)).sum();
    Ok(s / h_values.len() as f64)
}

/// Loss plus its gradients with respect to the values and to the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LossAdjoint {
    pub loss: f64,
    pub d_values: Vec<f64>,
    pub d_m: Vec<f64>,
}

pub fn weighted_mse_adjoint(residuals: &[f64], m: &[f64]) -> Result<LossAdjoint, LossError> {
    check(residuals, m)?;
    let n = residuals.len() as f64;
    let mut loss = 0.0;
    let mut d_values = Vec::with_capacity(residuals.len());
    let mut d_m = Vec::with_capacity(residuals.len());
    for (&r, &w) in residuals.iter().zip(m) {
        loss += (w * r).powi(2);
        d_values.push(2.0 * w * w * r / n);
        d_m.push(2.0 * w * r * r / n);
    }
    Ok(LossAdjoint { loss: loss / n, d_values, d_m })
}

pub fn hinge_adjoint(h_values: &[f64], m: &[f64], kind: HingeKind) -> Result<LossAdjoint, LossError> {
    check(h_values, m)?;
    let n = h_values.len() as f64;
    let mut loss = 0.0;
    let mut d_values = Vec::with_capacity(h_values.len());
    let mut d_m = Vec::with_capacity(h_values.len());
    for (&h, &w) in h_values.iter().zip(m) {
        let (p, dp) = kind.eval(h);
        loss += (w * p).powi(2);
        d_values.push(2.0 * w * w * p * dp / n);
        d_m.push(2.0 * w * p * p / n);
    }
    Ok(LossAdjoint { loss: loss / n, d_values, d_m })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryLoss {
    pub id: CategoryId,
    /// Raw loss before the category weight.
    pub raw: f64,
    pub lambda: f64,
    pub count: usize,
    pub grad: Option<ParamGrad>,
}

/// Per-category losses of one evaluation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossBreakdown {
    pub entries: Vec<CategoryLoss>,
}

impl LossBreakdown {
    pub fn get(&self, id: CategoryId) -> Option<&CategoryLoss> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn raw(&self, id: CategoryId) -> Option<f64> {
        self.get(id).map(|e| e.raw)
    }

    fn check_weights(&self) -> Result<(), LossError> {
        for e in &self.entries {
            if !(e.lambda >= 0.0) {
                return Err(LossError::InvalidWeight { category: e.id, value: e.lambda });
            }
        }
        Ok(())
    }
}

/// `sum lambda_c * L_c`
pub fn total_loss(breakdown: &LossBreakdown) -> Result<f64, LossError> {
    breakdown.check_weights()?;
    Ok(breakdown.entries.iter().map(|e| e.lambda * e.raw).sum())
}

/// Lambda-weighted sum of the per-category parameter gradients.
pub fn total_grad(breakdown: &LossBreakdown) -> Result<Option<ParamGrad>, LossError> {
    breakdown.check_weights()?;
    let mut acc: Option<ParamGrad> = None;
    for e in &breakdown.entries {
        let g = e.grad.as_ref().ok_or(LossError::MissingGradient(e.id))?;
        match acc.as_mut() {
            None => {
                let mut first = g.clone();
                first.fill_zero();
                first.add_scaled(g, e.lambda);
                acc = Some(first);
            }
            Some(a) => a.add_scaled(g, e.lambda),
        }
    }
    Ok(acc)
}
