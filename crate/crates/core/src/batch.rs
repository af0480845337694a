//! Batch estimation: least squares through the Gram system, damped Newton for
//! the smooth quantile loss, and fitting every coalition of a task.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{AugmentedDesign, Coalition};
use crate::error::{MarketError, Result};
use crate::loss::LossSpec;
use crate::table::CoalitionLossTable;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub coefficients: Vec<f64>,
    pub loss_star: f64,
    pub term_names: Vec<String>,
    /// Diagonal jitter added to an ill-conditioned Gram matrix, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jitter: Option<f64>,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct FitOptions {
    pub allow_jitter: bool,
    pub condition_limit: f64,
    pub gradient_tol: f64,
    pub max_iterations: usize,
    pub max_halvings: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            allow_jitter: true,
            condition_limit: 1e12,
            gradient_tol: 1e-8,
            max_iterations: 200,
            max_halvings: 50,
        }
    }
}

pub fn fit_batch(design: &AugmentedDesign, y: &[f64], spec: &LossSpec) -> Result<FitResult> {
    fit_batch_with(design, y, spec, &FitOptions::default())
}

pub fn fit_batch_with(design: &AugmentedDesign, y: &[f64], spec: &LossSpec, opts: &FitOptions) -> Result<FitResult> {
    let (coefficients, loss_star, jitter, iterations) = fit_matrix(design.values(), y, spec, opts)?;
    Ok(FitResult {
        coefficients: coefficients.as_slice().to_vec(),
        loss_star,
        term_names: design.term_names(),
        jitter,
        iterations,
    })
}

pub fn predict(coefficients: &[f64], x_row: &[f64]) -> Result<f64> {
    if coefficients.len() != x_row.len() {
        return Err(MarketError::Parameter(format!(
            "{} coefficients for a row of {} terms",
            coefficients.len(),
            x_row.len()
        )));
    }
    Ok(coefficients.iter().zip(x_row).map(|(b, x)| b * x).sum())
}

pub fn residuals(x: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>) -> Vec<f64> {
    let fitted = x * beta;
    y.iter().zip(fitted.iter()).map(|(y, f)| y - f).collect()
}

fn mean_loss(res: &[f64], spec: &LossSpec) -> f64 {
    res.iter().map(|e| spec.value_unchecked(*e)).sum::<f64>() / res.len() as f64
}

pub(crate) fn fit_matrix(
    x: &DMatrix<f64>,
    y: &[f64],
    spec: &LossSpec,
    opts: &FitOptions,
) -> Result<(DVector<f64>, f64, Option<f64>, usize)> {
    spec.validate()?;
    let (t, n) = x.shape();
    if y.len() != t {
        return Err(MarketError::Parameter(format!(
            "{t} design rows but {} targets",
            y.len()
        )));
    }
    if t < n || t == 0 {
        return Err(MarketError::InsufficientData(format!("{t} rows for {n} terms")));
    }
    if let Some(bad) = y.iter().chain(x.iter()).find(|v| !v.is_finite()) {
        return Err(MarketError::Numeric(format!("input value {bad}")));
    }
    let yv = DVector::from_column_slice(y);
    let gram = x.tr_mul(x);
    let rhs = x.tr_mul(&yv);
    let (mut beta, jitter) = solve_spd(gram, &rhs, opts)?;
    let mut res = residuals(x, y, &beta);
    let mut loss = mean_loss(&res, spec);
    if spec.is_quadratic() {
        return Ok((beta, loss, jitter, 0));
    }

    // damped Newton on the mean loss, always with the exact derivatives
    let spec = spec.analytic();
    let tf = t as f64;
    let mut iterations = 0;
    loop {
        let h1 = DVector::from_iterator(t, res.iter().map(|e| spec.h1_unchecked(*e)));
        let grad = -x.tr_mul(&h1) / tf;
        let gnorm = grad.amax();
        if gnorm <= opts.gradient_tol {
            return Ok((beta, loss, jitter, iterations));
        }
        if iterations >= opts.max_iterations {
            return Err(MarketError::Convergence {
                iterations,
                gradient_norm: gnorm,
            });
        }
        iterations += 1;
        let mut weighted = x.clone();
        for (r, e) in res.iter().enumerate() {
            let w = (spec.h2_unchecked(*e) / tf).sqrt();
            weighted.row_mut(r).scale_mut(w);
        }
        let hess = weighted.tr_mul(&weighted);
        let (dir, _) = solve_spd(hess, &(-&grad), opts)?;
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..=opts.max_halvings {
            let cand = &beta + &dir * step;
            let cres = residuals(x, y, &cand);
            let closs = mean_loss(&cres, &spec);
            if closs <= loss {
                beta = cand;
                res = cres;
                loss = closs;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return Err(MarketError::Convergence {
                iterations,
                gradient_norm: gnorm,
            });
        }
    }
}

/// Solves `G b = rhs` for symmetric positive semi-definite `G`, adding
/// `1e-10 * trace / n` to the diagonal when `G` is ill-conditioned.
pub(crate) fn solve_spd(
    mut g: DMatrix<f64>,
    rhs: &DVector<f64>,
    opts: &FitOptions,
) -> Result<(DVector<f64>, Option<f64>)> {
    let n = g.nrows();
    let eig = g.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let ill = !(min > 0.0) || max / min > opts.condition_limit;
    let mut jitter = None;
    if ill {
        if !opts.allow_jitter {
            return Err(MarketError::Singular {
                step: None,
                msg: format!("Gram condition {:e} exceeds {:e}", max / min, opts.condition_limit),
            });
        }
        let delta = 1e-10 * g.trace() / n as f64;
        if !(delta > 0.0) {
            return Err(MarketError::Singular {
                step: None,
                msg: "zero Gram matrix".into(),
            });
        }
        for i in 0..n {
            g[(i, i)] += delta;
        }
        jitter = Some(delta);
    }
    let chol = g.cholesky().ok_or_else(|| MarketError::Singular {
        step: None,
        msg: "Cholesky factorization failed".into(),
    })?;
    Ok((chol.solve(rhs), jitter))
}

/// Fits of every coalition of `players` on top of the `base` features.
#[derive(Clone, Debug)]
pub struct CoalitionFits {
    pub table: CoalitionLossTable,
    /// Indexed by coalition mask.
    pub fits: Vec<FitResult>,
    pub columns: Vec<Vec<usize>>,
}

impl CoalitionFits {
    pub fn jittered(&self) -> Vec<Coalition> {
        self.fits
            .iter()
            .enumerate()
            .filter(|(_, f)| f.jitter.is_some())
            .map(|(m, _)| self.table.coalition_of(m))
            .collect()
    }
}

pub fn fit_coalitions(
    design: &AugmentedDesign,
    y: &[f64],
    base: &BTreeSet<String>,
    players: &[String],
    spec: &LossSpec,
    cap: usize,
) -> Result<CoalitionFits> {
    if players.len() > cap {
        return Err(MarketError::CapExceeded {
            features: players.len(),
            cap,
        });
    }
    let mut table = CoalitionLossTable::new(players)?;
    let coalitions: Vec<Coalition> = (0..table.n_coalitions()).map(|m| table.coalition_of(m)).collect();
    let columns = coalitions
        .iter()
        .map(|c| design.coalition_columns(base, c))
        .collect::<Result<Vec<_>>>()?;
    let fits = coalitions
        .par_iter()
        .zip(columns.par_iter())
        .map(|(c, cols)| fit_batch(&design.select_columns(cols), y, spec).map_err(|e| e.in_coalition(c)))
        .collect::<Result<Vec<_>>>()?;
    for (m, f) in fits.iter().enumerate() {
        table.set_mask(m, f.loss_star);
    }
    Ok(CoalitionFits { table, fits, columns })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, Series};
    use crate::design::linear_design;

    fn toy(y: Vec<f64>, x: Vec<f64>) -> (AugmentedDesign, Vec<f64>) {
        let ds = Dataset::indexed(Series::new("y", "a1", y.clone()), vec![Series::new("x1", "a1", x)]).unwrap();
        (linear_design(&ds).unwrap(), y)
    }

    #[test]
    fn exact_linear_fit_has_zero_loss() {
        let x: Vec<f64> = (0..20).map(|i| i as f64 * 0.3 - 1.0).collect();
        let y: Vec<f64> = x.iter().map(|x| 2.0 - 0.5 * x).collect();
        let (d, y) = toy(y, x);
        let f = fit_batch(&d, &y, &LossSpec::quadratic()).unwrap();
        assert!((f.coefficients[0] - 2.0).abs() < 1e-12);
        assert!((f.coefficients[1] + 0.5).abs() < 1e-12);
        assert!(f.loss_star < 1e-24);
        assert_eq!(f.term_names, vec!["1", "x1"]);
    }

    #[test]
    fn too_few_rows() {
        let (d, y) = toy(vec![1.0], vec![2.0]);
        assert!(matches!(
            fit_batch(&d, &y, &LossSpec::quadratic()),
            Err(MarketError::InsufficientData(_))
        ));
    }

    #[test]
    fn collinear_design_is_jittered_or_rejected() {
        let (d, y) = toy(vec![1.0, 2.0, 3.0], vec![1.0, 1.0, 1.0]);
        let f = fit_batch(&d, &y, &LossSpec::quadratic()).unwrap();
        assert!(f.jitter.is_some());
        let strict = FitOptions {
            allow_jitter: false,
            ..FitOptions::default()
        };
        assert!(matches!(
            fit_batch_with(&d, &y, &LossSpec::quadratic(), &strict),
            Err(MarketError::Singular { .. })
        ));
    }

    #[test]
    fn predict_checks_dimensions() {
        assert_eq!(predict(&[0.5], &[1.0]).unwrap(), 0.5);
        assert_eq!(predict(&[0.0, 1.0, 0.0], &[3.0, -7.0, 2.0]).unwrap(), -7.0);
        assert!(matches!(predict(&[1.0], &[1.0, 2.0]), Err(MarketError::Parameter(_))));
    }

    #[test]
    fn smooth_quantile_intercept_near_median() {
        let y: Vec<f64> = (0..101).map(|i| ((i * 37) % 101) as f64 / 10.0).collect();
        let ds = Dataset::indexed(Series::new("y", "a1", y.clone()), vec![]).unwrap();
        let d = linear_design(&ds).unwrap();
        let alpha = 0.01;
        let f = fit_batch(&d, &y, &LossSpec::smooth_quantile(0.5, alpha).unwrap()).unwrap();
        let mut sorted = y.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[50];
        // the pinball objective is flat between neighbouring order statistics
        assert!((f.coefficients[0] - median).abs() <= 0.1 + alpha * 2f64.ln() + 1e-8);
    }
}
