//! Evaluation metrics and the paired t-test.

use alloc::format;

use crate::data::Task;
use crate::error::{Error, Result};

fn check_pair(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if y.len() != y_hat.len() {
        return Err(Error::invalid(format!("{} labels vs {} predictions", y.len(), y_hat.len())));
    }
    Ok(())
}

pub fn mse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}

/// Fraction of matches after mapping both sides to `{0, 1}` with
/// `v >= threshold -> 1`.
pub fn accuracy(y: &[f64], y_hat: &[f64], threshold: f64) -> Result<f64> {
    check_pair(y, y_hat)?;
    let hits = y
        .iter()
        .zip(y_hat)
        .filter(|(a, b)| (**a >= threshold) == (**b >= threshold))
        .count();
    Ok(hits as f64 / y.len() as f64)
}

/// `1 - ours / baseline`.
pub fn mse_decrease(ours: f64, baseline: f64) -> Result<f64> {
    if baseline == 0.0 {
        return Err(Error::invalid("baseline MSE is 0"));
    }
    Ok(1.0 - ours / baseline)
}

/// Task metric on labels and predictions in label space: MSE for IPP,
/// accuracy at 0.5 for DOP.
pub fn task_metric(task: Task, y: &[f64], y_hat: &[f64]) -> Result<f64> {
    match task {
        Task::Ipp => mse(y, y_hat),
        Task::Dop => accuracy(y, y_hat, 0.5),
    }
}

/// True when metric value `a` is strictly better than `b` for the task.
pub fn is_better(task: Task, a: f64, b: f64) -> bool {
    match task {
        Task::Ipp => a < b,
        Task::Dop => a > b,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    /// Two-sided.
    pub p: f64,
}

/// Paired Student t-test on per-fold values.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid("paired t-test needs two equal-length samples of size >= 2"));
    }
    let n = a.len() as f64;
    let d: alloc::vec::Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let t = mean / libm::sqrt(var / n);
    let df = n - 1.0;
    let p = 2.0 * (1.0 - student_t_cdf(libm::fabs(t), df));
    Ok(TTest { t, df, p: p.clamp(0.0, 1.0) })
}

/// CDF of Student's t distribution with `df` degrees of freedom.
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    let tail = 0.5 * regularized_incomplete_beta(0.5 * df, 0.5, x);
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// `I_x(a, b)` by Lentz's continued fraction.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = libm::lgamma(a + b) - libm::lgamma(a) - libm::lgamma(b) + a * libm::log(x) + b * libm::log(1.0 - x);
    let front = libm::exp(ln_front);
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_fraction(b, a, 1.0 - x) / b
    }
}

fn beta_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if libm::fabs(d) < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if libm::fabs(d) < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if libm::fabs(c) < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if libm::fabs(d) < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if libm::fabs(c) < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if libm::fabs(delta - 1.0) < EPS {
            break;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ContinuousCDF, StudentsT};

    #[test]
    fn metric_examples() {
        let y = [0.2, -0.4, 1.0];
        assert_eq!(mse(&y, &y).unwrap(), 0.0);
        assert_eq!(accuracy(&[0.0, 1.0], &[0.0, 1.0], 0.5).unwrap(), 1.0);
        assert_eq!(mse(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0.0, 1.0], &[1.0, 0.0], 0.5).unwrap(), 0.0);
        // ties go to class 1
        assert_eq!(accuracy(&[0.0, 1.0, 0.0, 1.0], &[0.5; 4], 0.5).unwrap(), 0.5);
        assert_eq!(mse(&[], &[]), Err(Error::EmptyDataset));
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mse_decrease_examples() {
        // 1 - 6/7 = 0.14286, reported as 14.2%
        let d = mse_decrease(0.006, 0.007).unwrap();
        assert!((d - 0.142).abs() < 1e-3);
        assert!((d - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(mse_decrease(0.3, 0.3).unwrap(), 0.0);
        assert_eq!(mse_decrease(0.0, 0.3).unwrap(), 1.0);
        assert!(mse_decrease(0.1, 0.0).is_err());
    }

    #[test]
    fn t_cdf_table_value() {
        assert!((student_t_cdf(2.262, 9.0) - 0.975).abs() < 1e-4);
        assert_eq!(student_t_cdf(0.0, 5.0), 0.5);
    }

    #[test]
    fn t_cdf_matches_independent_implementation() {
        for &df in &[1.0, 2.0, 3.5, 9.0, 30.0, 120.0] {
            let oracle = StudentsT::new(0.0, 1.0, df).unwrap();
            for i in -40..=40 {
                let t = i as f64 * 0.25;
                assert!((student_t_cdf(t, df) - oracle.cdf(t)).abs() < 1e-8, "df={df} t={t}");
            }
        }
    }

    #[test]
    fn paired_t_test_cases() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [1.1, 2.0, 2.8, 4.3, 4.9];
        let r = paired_t_test(&a, &b).unwrap();
        let d = [-0.1, 0.0, 0.2, -0.3, 0.1];
        let mean: f64 = d.iter().sum::<f64>() / 5.0;
        let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
        assert!((r.t - mean / (sd / 5f64.sqrt())).abs() < 1e-12);
        let oracle = StudentsT::new(0.0, 1.0, 4.0).unwrap();
        assert!((r.p - 2.0 * (1.0 - oracle.cdf(r.t.abs()))).abs() < 1e-8);

        let shifted: alloc::vec::Vec<f64> = a.iter().map(|v| v + 1.0).collect();
        assert_eq!(paired_t_test(&shifted, &a), Err(Error::ZeroVariance));

        let x = [0.3, 0.1, 0.4, 0.1, 0.5, 0.9];
        let rev: alloc::vec::Vec<f64> = x.iter().rev().copied().collect();
        let r = paired_t_test(&x, &rev).unwrap();
        assert!(r.t.abs() < 1e-12 && (r.p - 1.0).abs() < 1e-12);
    }
}
