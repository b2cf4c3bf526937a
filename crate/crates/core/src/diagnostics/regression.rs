//! Loss-gap series and the ordinary-least-squares trend test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// `gap[i] = loss_a - loss_b` at `steps[i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapSeries {
    pub steps: Vec<u64>,
    pub gap: Vec<f64>,
    pub label_a: String,
    pub label_b: String,
}

/// Result of fitting `y = beta0 * x + beta1` and testing `beta0 = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionResult {
    /// Slope.
    pub beta0: f64,
    /// Intercept.
    pub beta1: f64,
    /// Standard error of the slope.
    pub stderr: f64,
    pub t_stat: f64,
    /// Two-sided, `n - 2` degrees of freedom.
    pub p_value: f64,
    pub n_points: usize,
}

impl RegressionResult {
    pub fn to_key_values(&self) -> String {
        format!(
            "beta0={:e}\nbeta1={:e}\nstderr={:e}\nt_stat={}\np_value={}\nn_points={}\n",
            self.beta0, self.beta1, self.stderr, self.t_stat, self.p_value, self.n_points
        )
    }
}

/// Pairs two `(step, loss)` streams from `start_step` on; both must cover
/// exactly the same steps.
pub fn gap_series(
    a: &[(u64, f64)],
    b: &[(u64, f64)],
    start_step: u64,
    label_a: &str,
    label_b: &str,
) -> Result<GapSeries> {
    let a: Vec<_> = a.iter().filter(|(s, _)| *s >= start_step).collect();
    let b: Vec<_> = b.iter().filter(|(s, _)| *s >= start_step).collect();
    if a.len() != b.len() {
        return Err(Error::StepMisalignment(format!("{} points in {label_a}, {} in {label_b}", a.len(), b.len())));
    }
    let mut steps = Vec::with_capacity(a.len());
    let mut gap = Vec::with_capacity(a.len());
    for (&&(sa, la), &&(sb, lb)) in a.iter().zip(&b) {
        if sa != sb {
            return Err(Error::StepMisalignment(format!("step {sa} in {label_a} paired with step {sb} in {label_b}")));
        }
        if steps.last().is_some_and(|&prev| prev >= sa) {
            return Err(Error::StepMisalignment(format!("steps not strictly increasing at {sa}")));
        }
        if !la.is_finite() || !lb.is_finite() {
            return Err(Error::StepMisalignment(format!("non-finite loss at step {sa}")));
        }
        steps.push(sa);
        gap.push(la - lb);
    }
    Ok(GapSeries { steps, gap, label_a: label_a.into(), label_b: label_b.into() })
}

/// Least-squares fit of `y` on `x` with a two-sided t-test on the slope.
pub fn ols(x: &[f64], y: &[f64]) -> Result<RegressionResult> {
    let n = x.len();
    if n != y.len() {
        return Err(Error::LengthMismatch(format!("{n} x values, {} y values", y.len())));
    }
    if n < 3 {
        return Err(Error::DegenerateRegression(format!("{n} points; at least 3 are needed")));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::DegenerateRegression("non-finite input".into()));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|xi| (xi - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateRegression("all x values are equal".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(xi, yi)| (xi - mx) * (yi - my)).sum();
    let beta0 = sxy / sxx;
    let beta1 = my - beta0 * mx;
    let sse: f64 = x.iter().zip(y).map(|(xi, yi)| (yi - beta1 - beta0 * xi).powi(2)).sum();
    let df = nf - 2.0;
    let stderr = (sse / df / sxx).sqrt();
    let (t_stat, p_value) = if stderr > 0.0 {
        let t = beta0 / stderr;
        let dist = StudentsT::new(0.0, 1.0, df).expect("df >= 1");
        (t, (2.0 * dist.sf(t.abs())).min(1.0))
    } else if beta0 == 0.0 {
        (0.0, 1.0)
    } else {
        (beta0.signum() * f64::INFINITY, 0.0)
    };
    Ok(RegressionResult { beta0, beta1, stderr, t_stat, p_value, n_points: n })
}

/// Trend test of a gap series against the step count.
pub fn ols_trend_test(series: &GapSeries) -> Result<RegressionResult> {
    let x: Vec<f64> = series.steps.iter().map(|&s| s as f64).collect();
    ols(&x, &series.gap)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let r = ols(&x, &y).unwrap();
        assert!((r.beta0 - 2.0).abs() < 1e-12);
        assert!(r.beta1.abs() < 1e-12);
        assert!(r.p_value < 1e-12);
        let flat = ols(&x, &vec![3.0; 10]).unwrap();
        assert_eq!((flat.beta0, flat.p_value), (0.0, 1.0));
    }

    #[test]
    fn textbook_fixture() {
        // x = 1..5, y = [2, 4, 5, 4, 5]: slope 0.6, intercept 2.2, SSE 2.4,
        // stderr sqrt(0.8 / 10), t = 2.1213, p = 0.1240 (3 df)
        let r = ols(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 4.0, 5.0, 4.0, 5.0]).unwrap();
        assert!((r.beta0 - 0.6).abs() < 1e-12);
        assert!((r.beta1 - 2.2).abs() < 1e-12);
        assert!((r.stderr - 0.08f64.sqrt()).abs() < 1e-12);
        assert!((r.t_stat - 2.121320343559643).abs() < 1e-9);
        assert!((r.p_value - 0.1240).abs() < 5e-4, "{}", r.p_value);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(ols(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::DegenerateRegression(_))));
        assert!(ols(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(ols(&[1.0, 2.0, 3.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn gaps() {
        let a = [(0, 5.0), (10, 4.0), (20, 3.5), (30, 3.0)];
        let b = [(0, 4.0), (10, 3.0), (20, 2.5), (30, 2.0)];
        let g = gap_series(&a, &b, 10, "a", "b").unwrap();
        assert_eq!(g.steps, vec![10, 20, 30]);
        assert_eq!(g.gap, vec![1.0, 1.0, 1.0]);
        let same = gap_series(&a, &a, 0, "a", "a").unwrap();
        assert!(same.gap.iter().all(|&x| x == 0.0));
        let shifted = [(0, 4.0), (11, 3.0), (20, 2.5), (30, 2.0)];
        assert!(matches!(gap_series(&a, &shifted, 0, "a", "b"), Err(Error::StepMisalignment(_))));
        assert!(gap_series(&a, &b[..3], 0, "a", "b").is_err());
    }
}
