//! Accuracy, stability, efficiency and violation metrics plus rank
//! aggregation.

use thiserror::Error;

pub const EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("empty input")]
    Empty,
    #[error("trajectory needs at least 2 samples, got {0}")]
    TooShort(usize),
    #[error("trajectory times must be strictly increasing (index {0})")]
    NonIncreasing(usize),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("ragged rank matrix: row {row} has {got} entries, expected {expected}")]
    Ragged { row: usize, expected: usize, got: usize },
}

/// `sqrt(mean(e^2))`
pub fn rmse(errors: &[f64]) -> Result<f64, MetricError> {
    if errors.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok((errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt())
}

/// RMSE of `a - b`.
pub fn rmse_between(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    rmse(&d)
}

/// Validation error sampled over wall-clock time.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub errors: Vec<f64>,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, errors: Vec<f64>) -> Result<Self, MetricError> {
        if times.len() != errors.len() {
            return Err(MetricError::LengthMismatch(times.len(), errors.len()));
        }
        if times.len() < 2 {
            return Err(MetricError::TooShort(times.len()));
        }
        if let Some(i) = times.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(MetricError::NonIncreasing(i + 1));
        }
        Ok(Self { times, errors })
    }

    fn range(&self) -> (f64, f64) {
        let max = self.errors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = self.errors.iter().copied().fold(f64::INFINITY, f64::min);
        (min, max)
    }
}

/// Total variation over range: `sum |e_{i+1} - e_i| / (e_max - e_min + eps)`.
pub fn tvn(traj: &Trajectory, eps: f64) -> f64 {
    let tv: f64 = traj.errors.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
    let (min, max) = traj.range();
    tv / (max - min + eps)
}

/// Normalised area under the improvement curve `(e_max - e(t)) / (e_max - e_min)`,
/// trapezoidal in time, divided by the time span.
pub fn nauc(traj: &Trajectory, eps: f64) -> f64 {
    let (min, max) = traj.range();
    let scale = max - min + eps;
    let g: Vec<f64> = traj.errors.iter().map(|e| (max - e) / scale).collect();
    let area: f64 = traj
        .times
        .windows(2)
        .zip(g.windows(2))
        .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
        .sum();
    let span = traj.times[traj.times.len() - 1] - traj.times[0];
    area / (span + eps)
}

/// First time the error reaches half its initial value, linearly
/// interpolated between samples; `None` if it never does.
pub fn t_half(traj: &Trajectory) -> Option<f64> {
    let target = 0.5 * traj.errors[0];
    for i in 1..traj.errors.len() {
        let (e0, e1) = (traj.errors[i - 1], traj.errors[i]);
        if e1 <= target {
            let (t0, t1) = (traj.times[i - 1], traj.times[i]);
            let w = if e0 == e1 { 0.0 } else { (e0 - target) / (e0 - e1) };
            return Some(t0 + w * (t1 - t0));
        }
    }
    None
}

/// `mean(max(0, h))`
pub fn violation_score(h_values: &[f64]) -> Result<f64, MetricError> {
    if h_values.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(h_values.iter().map(|h| h.max(0.0)).sum::<f64>() / h_values.len() as f64)
}

/// Fraction of strictly positive entries.
pub fn violation_rate(h_values: &[f64]) -> Result<f64, MetricError> {
    if h_values.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(h_values.iter().filter(|&&h| h > 0.0).count() as f64 / h_values.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Minimize,
    Maximize,
}

/// Percentage change relative to a baseline, positive when `value` is better.
pub fn improvement_pct(baseline: f64, value: f64, direction: Direction, eps: f64) -> f64 {
    let denom = baseline.max(eps);
    match direction {
        Direction::Minimize => 100.0 * (baseline - value) / denom,
        Direction::Maximize => 100.0 * (value - baseline) / denom,
    }
}

/// Ranks `1..=n` of `values` with averaged ties; rank 1 is the best.
pub fn rank_with_ties(values: &[f64], direction: Direction) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    let key = |i: usize| match direction {
        Direction::Minimize => values[i],
        Direction::Maximize => -values[i],
    };
    order.sort_by(|&a, &b| key(a).total_cmp(&key(b)));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && key(order[j + 1]) == key(order[i]) {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Per-method sum of ranks. `rank_matrix[metric][method]`.
pub fn borda(rank_matrix: &[Vec<f64>]) -> Result<Vec<f64>, MetricError> {
    let Some(first) = rank_matrix.first() else {
        return Err(MetricError::Empty);
    };
    let m = first.len();
    let mut sums = vec![0.0; m];
    for (row, ranks) in rank_matrix.iter().enumerate() {
        if ranks.len() != m {
            return Err(MetricError::Ragged { row, expected: m, got: ranks.len() });
        }
        sums.iter_mut().zip(ranks).for_each(|(s, r)| *s += r);
    }
    Ok(sums)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn traj(e: &[f64]) -> Trajectory {
        Trajectory::new((0..e.len()).map(|i| i as f64).collect(), e.to_vec()).unwrap()
    }

    #[test]
    fn rmse_examples() {
        assert!((rmse(&[3.0, 4.0]).unwrap() - 3.535_533_905_932_737_6).abs() < 1e-9);
        assert_eq!(rmse(&[0.0; 5]).unwrap(), 0.0);
        assert_eq!(rmse(&[-2.5]).unwrap(), 2.5);
        assert_eq!(rmse(&[]), Err(MetricError::Empty));
    }

    #[test]
    fn tvn_examples() {
        assert!((tvn(&traj(&[1.0, 0.5, 0.2]), EPS) - 1.0).abs() < 1e-9);
        assert!((tvn(&traj(&[1.0, 0.5, 0.7]), EPS) - 1.4).abs() < 1e-9);
        assert_eq!(tvn(&traj(&[0.3, 0.3, 0.3]), EPS), 0.0);
    }

    #[test]
    fn nauc_examples() {
        assert_eq!(nauc(&traj(&[0.5, 0.5, 0.5]), EPS), 0.0);
        let lin = Trajectory::new(vec![0.0, 1.0], vec![1.0, 0.0]).unwrap();
        assert!((nauc(&lin, EPS) - 0.5).abs() < 1e-9);
        let n = 10_001;
        let times: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let errors: Vec<f64> = (0..n).map(|i| if i == 0 { 1.0 } else { 0.1 }).collect();
        let v = nauc(&Trajectory::new(times, errors).unwrap(), EPS);
        assert!((v - 1.0).abs() < 1e-3);
    }

    #[test]
    fn violation_examples() {
        assert_eq!(violation_score(&[-1.0, -0.2, 0.0]).unwrap(), 0.0);
        assert_eq!(violation_score(&[-1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(violation_score(&[0.5]).unwrap(), 0.5);
        assert_eq!(violation_rate(&[-1.0, 2.0, 0.0, 3.0]).unwrap(), 0.5);
        assert_eq!(violation_score(&[]), Err(MetricError::Empty));
    }

    #[test]
    fn improvement_examples() {
        assert!((improvement_pct(0.013, 0.002, Direction::Minimize, EPS) - 84.615_384_615).abs() < 1e-6);
        assert_eq!(improvement_pct(0.3, 0.3, Direction::Minimize, EPS), 0.0);
        assert_eq!(improvement_pct(0.5, 1.0, Direction::Maximize, EPS), 100.0);
    }

    #[test]
    fn borda_examples() {
        assert_eq!(borda(&[vec![1.0, 2.0, 3.0]]).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(borda(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap(), vec![3.0, 3.0]);
        assert_eq!(rank_with_ties(&[0.1, 0.1, 0.3], Direction::Minimize), vec![1.5, 1.5, 3.0]);
        assert_eq!(rank_with_ties(&[0.1, 0.5, 0.3], Direction::Maximize), vec![3.0, 1.0, 2.0]);
        assert!(matches!(borda(&[vec![1.0, 2.0], vec![1.0]]), Err(MetricError::Ragged { row: 1, .. })));
    }

    #[test]
    fn t_half_examples() {
        assert_eq!(t_half(&traj(&[1.0, 0.6, 0.4])), Some(1.5));
        assert_eq!(t_half(&traj(&[1.0, 0.9])), None);
        assert_eq!(t_half(&traj(&[1.0, 0.5])), Some(1.0));
    }

    #[test]
    fn trajectory_validation() {
        assert!(matches!(Trajectory::new(vec![0.0], vec![1.0]), Err(MetricError::TooShort(1))));
        assert!(matches!(Trajectory::new(vec![0.0, 0.0], vec![1.0, 2.0]), Err(MetricError::NonIncreasing(1))));
    }

    proptest! {
        #[test]
        fn monotone_trajectory_tvn_is_one(mut e in prop::collection::vec(0.001f64..10.0, 2..40)) {
            e.sort_by(|a, b| b.total_cmp(a));
            e.dedup();
            prop_assume!(e.len() >= 2);
            let t = traj(&e);
            let range = e[0] - e[e.len() - 1];
            let v = tvn(&t, EPS);
            prop_assert!((v - range / (range + EPS)).abs() < 1e-9);
        }

        #[test]
        fn nauc_in_unit_interval(
            e in prop::collection::vec(0.001f64..10.0, 2..40),
            gaps in prop::collection::vec(0.01f64..5.0, 40),
        ) {
            let mut times = vec![0.0];
            for g in gaps.iter().take(e.len() - 1) {
                let last = *times.last().unwrap();
                times.push(last + g);
            }
            let v = nauc(&Trajectory::new(times, e).unwrap(), EPS);
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn improvement_vs_self_is_zero(b in -10.0f64..10.0) {
            prop_assert_eq!(improvement_pct(b, b, Direction::Minimize, EPS), 0.0);
            prop_assert_eq!(improvement_pct(b, b, Direction::Maximize, EPS), 0.0);
        }

        #[test]
        fn violation_score_recomputes_with_count(
            h in prop::collection::vec(-5.0f64..5.0, 1..30),
            extra in 0usize..30,
        ) {
            let base = violation_score(&h).unwrap();
            let mut padded = h.clone();
            padded.extend(std::iter::repeat(-1.0).take(extra));
            let v = violation_score(&padded).unwrap();
            prop_assert!((v - base * h.len() as f64 / padded.len() as f64).abs() < 1e-12);
        }
    }
}
