//! Small numerical kernels shared by the estimators: compensated sums,
//! moments, and least-squares fits with heteroskedasticity-robust (HC1)
//! standard errors.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

/// Neumaier-compensated running sum.
#[derive(Debug, Default, Clone, Copy)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = KahanSum::new();
    for x in xs {
        acc.add(x);
    }
    acc.total()
}

pub fn mean(xs: &[f64]) -> f64 {
    sum(xs.iter().copied()) / xs.len() as f64
}

/// Population covariance (divides by n), two-pass and compensated.
pub fn covariance(xs: &[f64], ys: &[f64]) -> f64 {
    debug_assert_eq!(xs.len(), ys.len());
    let mx = mean(xs);
    let my = mean(ys);
    sum(xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my))) / xs.len() as f64
}

pub fn variance(xs: &[f64]) -> f64 {
    covariance(xs, xs)
}

pub fn correlation(xs: &[f64], ys: &[f64]) -> f64 {
    covariance(xs, ys) / (variance(xs) * variance(ys)).sqrt()
}

/// Standard normal CDF.
pub fn norm_cdf(z: f64) -> f64 {
    if z == f64::INFINITY {
        return 1.0;
    }
    if z == f64::NEG_INFINITY {
        return 0.0;
    }
    Normal::standard().cdf(z)
}

/// Standard normal quantile; `p` outside (0, 1) maps to ±inf.
pub fn norm_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Two-sided p-value of a t statistic with `df` degrees of freedom.
pub fn two_sided_p(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    2.0 * (1.0 - dist.cdf(t.abs()))
}

/// Result of a bivariate OLS fit `y = intercept + slope * x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// HC1 standard error of the slope.
    pub se_slope: f64,
    pub n: usize,
}

/// Bivariate OLS with an HC1 slope standard error. `context` names the
/// regression in error messages.
pub fn fit_line(x: &[f64], y: &[f64], context: &str) -> Result<LineFit> {
    fit_line_weighted(x, y, None, context)
}

/// Weighted bivariate least squares. With `weights = None` this is plain
/// OLS.
pub fn fit_line_weighted(x: &[f64], y: &[f64], weights: Option<&[f64]>, context: &str) -> Result<LineFit> {
    assert_eq!(x.len(), y.len(), "regressor and outcome lengths differ");
    let n = x.len();
    if n < 2 {
        return Err(Error::TooFewObservations {
            what: context.to_string(),
            needed: 2,
            got: n,
        });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(context.to_string()));
    }
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let wsum = sum((0..n).map(w));
    let mx = sum((0..n).map(|i| w(i) * x[i])) / wsum;
    let my = sum((0..n).map(|i| w(i) * y[i])) / wsum;
    let sxx = sum((0..n).map(|i| w(i) * (x[i] - mx) * (x[i] - mx)));
    let sxy = sum((0..n).map(|i| w(i) * (x[i] - mx) * (y[i] - my)));
    let scale = sum((0..n).map(|i| w(i) * x[i] * x[i])).max(1e-300);
    if sxx <= 1e-12 * scale || sxx == 0.0 {
        return Err(Error::DegenerateRegressor(context.to_string()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let meat = sum((0..n).map(|i| {
        let e = y[i] - intercept - slope * x[i];
        let d = w(i) * (x[i] - mx);
        d * d * e * e
    }));
    let se_slope = if n > 2 {
        (meat / (sxx * sxx) * n as f64 / (n - 2) as f64).sqrt()
    } else {
        0.0
    };
    Ok(LineFit {
        slope,
        intercept,
        se_slope,
        n,
    })
}

/// Multiple OLS fit with intercept.
#[derive(Debug, Clone)]
pub struct MultiFit {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
}

/// OLS of `y` on the given columns plus an intercept. Collinearity is
/// detected with a pivoted incremental Cholesky of the centered
/// cross-product matrix; the offending column is named in the error.
pub fn fit_multiple(columns: &[&[f64]], labels: &[String], y: &[f64]) -> Result<MultiFit> {
    let k = columns.len();
    let n = y.len();
    if n <= k + 1 {
        return Err(Error::TooFewObservations {
            what: "multiple regression".into(),
            needed: k + 2,
            got: n,
        });
    }
    let means: Vec<f64> = columns.iter().map(|c| mean(c)).collect();
    let my = mean(y);
    let mut cross = DMatrix::<f64>::zeros(k, k);
    for a in 0..k {
        for b in 0..=a {
            let v = sum((0..n).map(|i| (columns[a][i] - means[a]) * (columns[b][i] - means[b])));
            cross[(a, b)] = v;
            cross[(b, a)] = v;
        }
    }
    let rhs = DVector::from_iterator(
        k,
        (0..k).map(|a| sum((0..n).map(|i| (columns[a][i] - means[a]) * (y[i] - my)))),
    );

    // Incremental Cholesky: a pivot that vanishes relative to the column's
    // own sum of squares means the column lies in the span of earlier ones.
    let mut lower = DMatrix::<f64>::zeros(k, k);
    for j in 0..k {
        let mut d = cross[(j, j)];
        for l in 0..j {
            d -= lower[(j, l)] * lower[(j, l)];
        }
        if cross[(j, j)] <= 0.0 || d <= 1e-10 * cross[(j, j)] {
            let with = spanning_columns(&cross, j, labels);
            return Err(Error::Collinear {
                column: labels[j].clone(),
                with,
            });
        }
        let djj = d.sqrt();
        lower[(j, j)] = djj;
        for i in (j + 1)..k {
            let mut s = cross[(i, j)];
            for l in 0..j {
                s -= lower[(i, l)] * lower[(j, l)];
            }
            lower[(i, j)] = s / djj;
        }
    }
    let z = lower.solve_lower_triangular(&rhs).expect("non-singular factor");
    let coef = lower
        .transpose()
        .solve_upper_triangular(&z)
        .expect("non-singular factor");
    let coefficients: Vec<f64> = coef.iter().copied().collect();
    let intercept = my - sum(coefficients.iter().zip(&means).map(|(b, m)| b * m));
    Ok(MultiFit {
        intercept,
        coefficients,
    })
}

/// Columns among `0..j` with a non-negligible coefficient when column `j`
/// is regressed on them.
fn spanning_columns(cross: &DMatrix<f64>, j: usize, labels: &[String]) -> Vec<String> {
    if j == 0 {
        return vec!["intercept".to_string()];
    }
    let sub = cross.view((0, 0), (j, j)).into_owned();
    let rhs = cross.view((0, j), (j, 1)).into_owned();
    match sub.clone().pseudo_inverse(1e-12) {
        Ok(inv) => {
            let beta = inv * rhs;
            let max = beta.iter().fold(0.0_f64, |m, b| m.max(b.abs()));
            let named: Vec<String> = beta
                .iter()
                .enumerate()
                .filter(|(_, b)| b.abs() > 1e-6 * max.max(1e-12))
                .map(|(i, _)| labels[i].clone())
                .collect();
            if named.is_empty() {
                vec!["intercept".to_string()]
            } else {
                named
            }
        }
        Err(_) => labels[..j].to_vec(),
    }
}

/// General OLS with HC1 covariance, for small designs (trend tests).
/// `design` rows must already contain any intercept column.
pub fn ols_hc1(design: &[Vec<f64>], y: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = design.len();
    let k = design.first().map_or(0, Vec::len);
    if n <= k {
        return Err(Error::TooFewObservations {
            what: "stacked regression".into(),
            needed: k + 1,
            got: n,
        });
    }
    let x = DMatrix::from_fn(n, k, |i, j| design[i][j]);
    let xtx = x.transpose() * &x;
    let inv = xtx
        .try_inverse()
        .ok_or_else(|| Error::DegenerateRegressor("stacked regression".into()))?;
    let yv = DVector::from_column_slice(y);
    let beta = &inv * x.transpose() * yv;
    let resid: Vec<f64> = (0..n)
        .map(|i| y[i] - (0..k).map(|j| x[(i, j)] * beta[j]).sum::<f64>())
        .collect();
    let mut meat = DMatrix::<f64>::zeros(k, k);
    for i in 0..n {
        let e2 = resid[i] * resid[i];
        for a in 0..k {
            for b in 0..k {
                meat[(a, b)] += x[(i, a)] * x[(i, b)] * e2;
            }
        }
    }
    let cov = &inv * meat * &inv * (n as f64 / (n - k) as f64);
    Ok((beta.iter().copied().collect(), cov))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let xs = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(sum(xs), 2.0);
    }

    #[test]
    fn line_fit_exact() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 + 0.5 * v).collect();
        let fit = fit_line(&x, &y, "t").unwrap();
        assert!((fit.slope - 0.5).abs() < 1e-14);
        assert!((fit.intercept - 2.0).abs() < 1e-14);
        assert!(fit.se_slope < 1e-12);
    }

    #[test]
    fn line_fit_degenerate() {
        let err = fit_line(&[3.0, 3.0, 3.0], &[1.0, 2.0, 3.0], "eq").unwrap_err();
        assert!(matches!(err, Error::DegenerateRegressor(_)));
    }

    #[test]
    fn hc1_matches_hand_computation() {
        // x centered at 2, residuals (+1, -2, +1) around y = x.
        let x = [1.0, 2.0, 3.0];
        let y = [2.0, 0.0, 4.0];
        let fit = fit_line(&x, &y, "t").unwrap();
        assert!((fit.slope - 1.0).abs() < 1e-12);
        // meat = 1*1 + 0*4 + 1*1 = 2, sxx = 2 -> var = 2/4 * 3/1
        assert!((fit.se_slope - (1.5f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn multiple_matches_planted() {
        let n = 50;
        let a: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.11).cos()).collect();
        let y: Vec<f64> = (0..n).map(|i| 1.0 + 2.0 * a[i] - 3.0 * b[i]).collect();
        let labels = vec!["a".to_string(), "b".to_string()];
        let fit = fit_multiple(&[&a, &b], &labels, &y).unwrap();
        assert!((fit.coefficients[0] - 2.0).abs() < 1e-9);
        assert!((fit.coefficients[1] + 3.0).abs() < 1e-9);
        assert!((fit.intercept - 1.0).abs() < 1e-9);
    }

    #[test]
    fn multiple_names_collinear_column() {
        let a: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..20).map(|i| ((i * 7) % 5) as f64).collect();
        let c: Vec<f64> = a.iter().map(|v| 2.0 * v + 1.0).collect();
        let y: Vec<f64> = (0..20).map(|i| (i % 3) as f64).collect();
        let labels = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        match fit_multiple(&[&a, &b, &c], &labels, &y) {
            Err(Error::Collinear { column, with }) => {
                assert_eq!(column, "c");
                assert_eq!(with, vec!["a".to_string()]);
            }
            other => panic!("expected collinearity error, got {other:?}"),
        }
    }
}
