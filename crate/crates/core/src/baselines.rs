//! Hard-constraint comparison methods: box transform, penalty homotopy and
//! augmented Lagrangian outer loops.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("invalid bounds: u_min {0} > u_max {1}")]
    InvalidBounds(f64, f64),
    #[error("penalty growth must exceed 1, got {0}")]
    InvalidGrowth(f64),
    #[error("penalty must be positive, got {0}")]
    InvalidPenalty(f64),
    #[error("length mismatch for {what}: expected {expected}, got {got}")]
    LengthMismatch { what: &'static str, expected: usize, got: usize },
}

/// `u_min + (u_max - u_min) * psi`
pub fn hard_box(psi: f64, u_min: f64, u_max: f64) -> Result<f64, BaselineError> {
    if u_min > u_max {
        return Err(BaselineError::InvalidBounds(u_min, u_max));
    }
    Ok(u_min + (u_max - u_min) * psi)
}

/// `beta * lambda_i`
pub fn penalty_step(lambda_i: f64, beta: f64) -> Result<f64, BaselineError> {
    if !(beta > 1.0) {
        return Err(BaselineError::InvalidGrowth(beta));
    }
    if !(lambda_i > 0.0) {
        return Err(BaselineError::InvalidPenalty(lambda_i));
    }
    Ok(beta * lambda_i)
}

/// Penalty weight and dual variables of the outer loop.
#[derive(Debug, Clone, PartialEq)]
pub struct OuterLoopState {
    pub penalty: f64,
    pub beta: f64,
    pub mu_f: Vec<f64>,
    /// One vector per inequality; entries never negative.
    pub mu_h: Vec<Vec<f64>>,
    /// Multipliers on boundary/initial equality residuals (AL-PINN only).
    pub mu_b: Vec<f64>,
    pub outer_iter: usize,
}

impl OuterLoopState {
    pub fn new(
        penalty: f64,
        beta: f64,
        n_f: usize,
        n_h: &[usize],
        n_b: usize,
    ) -> Result<Self, BaselineError> {
        if !(beta > 1.0) {
            return Err(BaselineError::InvalidGrowth(beta));
        }
        if !(penalty > 0.0) {
            return Err(BaselineError::InvalidPenalty(penalty));
        }
        Ok(Self {
            penalty,
            beta,
            mu_f: vec![0.0; n_f],
            mu_h: n_h.iter().map(|&n| vec![0.0; n]).collect(),
            mu_b: vec![0.0; n_b],
            outer_iter: 0,
        })
    }
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), BaselineError> {
    if expected != got {
        return Err(BaselineError::LengthMismatch { what, expected, got });
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `L_0 + mu_f.f + lambda L_f + sum_k (mu_hk.[h_k]_+ + lambda L_hk)`
///
/// `base_l0`, `l_f` and `l_h` are the plain mean-square losses; `f_vals` and
/// `h_vals` are the raw residual and inequality values they were built from.
pub fn al_objective(
    base_l0: f64,
    l_f: f64,
    l_h: &[f64],
    state: &OuterLoopState,
    f_vals: &[f64],
    h_vals: &[Vec<f64>],
) -> Result<f64, BaselineError> {
    check_len("mu_f", state.mu_f.len(), f_vals.len())?;
    check_len("inequality sets", state.mu_h.len(), h_vals.len())?;
    check_len("inequality losses", state.mu_h.len(), l_h.len())?;
    let mut total = base_l0 + dot(&state.mu_f, f_vals) + state.penalty * l_f;
    for ((mu, h), lh) in state.mu_h.iter().zip(h_vals).zip(l_h) {
        check_len("mu_h", mu.len(), h.len())?;
        total += mu.iter().zip(h).map(|(m, v)| m * v.max(0.0)).sum::<f64>() + state.penalty * lh;
    }
    Ok(total)
}

/// Projected dual ascent followed by penalty growth.
pub fn al_dual_update(
    state: &OuterLoopState,
    f_vals: &[f64],
    h_vals: &[Vec<f64>],
    b_vals: &[f64],
) -> Result<OuterLoopState, BaselineError> {
    check_len("mu_f", state.mu_f.len(), f_vals.len())?;
    check_len("mu_b", state.mu_b.len(), b_vals.len())?;
    check_len("inequality sets", state.mu_h.len(), h_vals.len())?;
    let lam = state.penalty;
    let mut next = state.clone();
    next.mu_f.iter_mut().zip(f_vals).for_each(|(m, f)| *m += lam * f);
    next.mu_b.iter_mut().zip(b_vals).for_each(|(m, b)| *m += lam * b);
    for (mu, h) in next.mu_h.iter_mut().zip(h_vals) {
        check_len("mu_h", mu.len(), h.len())?;
        mu.iter_mut().zip(h).for_each(|(m, v)| *m += lam * v.max(0.0));
    }
    next.penalty = penalty_step(lam, state.beta)?;
    next.outer_iter += 1;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn box_examples() {
        assert_eq!(hard_box(0.0, -1.0, 3.0).unwrap(), -1.0);
        assert_eq!(hard_box(1.0, -1.0, 3.0).unwrap(), 3.0);
        assert_eq!(hard_box(0.5, 0.0, 2.0).unwrap(), 1.0);
        assert_eq!(hard_box(0.5, 2.0, 0.0), Err(BaselineError::InvalidBounds(2.0, 0.0)));
    }

    #[test]
    fn penalty_examples() {
        assert_eq!(penalty_step(1.0, 2.0).unwrap(), 2.0);
        let mut l = 1.0;
        for _ in 0..3 {
            l = penalty_step(l, 2.0).unwrap();
        }
        assert_eq!(l, 8.0);
        assert_eq!(penalty_step(1.0, 1.0), Err(BaselineError::InvalidGrowth(1.0)));
    }

    #[test]
    fn objective_examples() {
        let s = OuterLoopState::new(1.0, 2.0, 2, &[2], 0).unwrap();
        let v = al_objective(0.5, 0.25, &[0.125], &s, &[0.1, 0.2], &[vec![1.0, -1.0]]).unwrap();
        assert_eq!(v, 0.5 + 0.25 + 0.125);

        let mut s = OuterLoopState::new(1.0, 2.0, 1, &[1], 0).unwrap();
        s.mu_h = vec![vec![3.0]];
        let feasible = al_objective(0.0, 0.0, &[0.0], &s, &[0.0], &[vec![-0.4]]).unwrap();
        assert_eq!(feasible, 0.0);

        let mut s = OuterLoopState::new(1.0, 2.0, 1, &[1], 0).unwrap();
        s.penalty = 0.0;
        s.mu_f = vec![1.0];
        s.mu_h = vec![vec![2.0]];
        let v = al_objective(0.0, 0.09, &[0.25], &s, &[0.3], &[vec![0.5]]).unwrap();
        assert!((v - 1.3).abs() < 1e-15);

        assert!(matches!(
            al_objective(0.0, 0.0, &[0.0], &s, &[0.3, 0.1], &[vec![0.5]]),
            Err(BaselineError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn dual_update_examples() {
        let s = OuterLoopState::new(1.0, 2.0, 0, &[2], 0).unwrap();
        let s1 = al_dual_update(&s, &[], &[vec![0.5, -0.2]], &[]).unwrap();
        assert_eq!(s1.mu_h, vec![vec![0.5, 0.0]]);

        let s = OuterLoopState::new(1.0, 2.0, 2, &[2], 0).unwrap();
        let s1 = al_dual_update(&s, &[0.0, 0.0], &[vec![-1.0, -0.1]], &[]).unwrap();
        assert_eq!(s1.mu_f, s.mu_f);
        assert_eq!(s1.mu_h, s.mu_h);
        assert_eq!(s1.penalty, 2.0);
        let s2 = al_dual_update(&s1, &[0.0, 0.0], &[vec![-1.0, -0.1]], &[]).unwrap();
        assert_eq!(s2.penalty, 4.0);
        assert_eq!(s2.outer_iter, 2);
    }

    proptest! {
        #[test]
        fn mu_h_stays_nonnegative(
            rounds in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 1..8),
        ) {
            let mut s = OuterLoopState::new(1.0, 2.0, 0, &[4], 0).unwrap();
            for h in rounds {
                s = al_dual_update(&s, &[], &[h], &[]).unwrap();
                prop_assert!(s.mu_h[0].iter().all(|&m| m >= 0.0));
            }
        }

        #[test]
        fn zero_duals_match_plain_penalty(
            l0 in 0.0f64..5.0, lf in 0.0f64..5.0, lh in 0.0f64..5.0,
            f in prop::collection::vec(-3.0f64..3.0, 3),
            h in prop::collection::vec(-3.0f64..3.0, 3),
        ) {
            let s = OuterLoopState::new(1.0, 2.0, 3, &[3], 0).unwrap();
            let v = al_objective(l0, lf, &[lh], &s, &f, &[h]).unwrap();
            prop_assert!((v - (l0 + lf + lh)).abs() < 1e-12);
        }

        #[test]
        fn penalty_composition_is_geometric(i in 0u32..30, beta in 1.01f64..4.0, l0 in 0.01f64..10.0) {
            let mut l = l0;
            for _ in 0..i {
                l = penalty_step(l, beta).unwrap();
            }
            let mut expected = l0;
            for _ in 0..i {
                expected *= beta;
            }
            prop_assert_eq!(l, expected);
        }
    }
}
