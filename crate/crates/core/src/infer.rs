//! Uncertainty propagation: finite-difference delta method and the
//! M-estimation sandwich.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ascent::{PenaltyConfig, WeightingObjective};
use crate::design::{softmax_jacobian, ConjointDesign, SoftmaxParams};
use crate::error::{Error, Result};
use crate::estim::WeightedSample;
use crate::exec::Exec;
use crate::json::Ordered;
use crate::model::OutcomeModel;

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959964;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeltaConfig {
    /// Step for coordinate j is `rel_step · (1 + |θ_j|)`.
    pub rel_step: f64,
    /// Also difference at half the step and compare.
    pub richardson: bool,
    pub richardson_tol: f64,
    pub exec: Exec,
}

impl Default for DeltaConfig {
    fn default() -> Self {
        Self {
            rel_step: 1e-5,
            richardson: true,
            richardson_tol: 1e-4,
            exec: Exec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InferenceResult {
    pub labels: Vec<String>,
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    pub ci95: Vec<[f64; 2]>,
    #[serde(skip)]
    pub jacobian: DMatrix<f64>,
    #[serde(skip)]
    pub covariance: DMatrix<f64>,
    /// Ratio of extreme singular values of the Jacobian (or of A for the sandwich).
    pub jacobian_condition: f64,
    /// max|J_h − J_{h/2}| / max|J_h|, when the check ran.
    pub richardson_rel_diff: Option<f64>,
    /// The Richardson check exceeded its tolerance.
    pub step_sensitive: bool,
    /// The sandwich bread was numerically singular; standard errors are NaN.
    pub unstable: bool,
}

#[derive(Serialize)]
pub struct InferenceDoc {
    pub se: Ordered<f64>,
    pub ci95: Ordered<[f64; 2]>,
    pub jacobian_condition: f64,
}

impl InferenceResult {
    fn from_covariance(labels: Vec<String>, estimate: Vec<f64>, jacobian: DMatrix<f64>, covariance: DMatrix<f64>) -> Self {
        let covariance = (&covariance + covariance.transpose()) * 0.5;
        let se: Vec<f64> = (0..estimate.len()).map(|i| covariance[(i, i)].max(0.0).sqrt()).collect();
        let ci95 = estimate.iter().zip(&se).map(|(e, s)| [e - Z95 * s, e + Z95 * s]).collect();
        Self {
            labels,
            estimate,
            se,
            ci95,
            jacobian_condition: condition_number(&jacobian),
            jacobian,
            covariance,
            richardson_rel_diff: None,
            step_sensitive: false,
            unstable: false,
        }
    }

    pub fn se_of(&self, label: &str) -> Option<f64> {
        self.labels.iter().position(|l| l == label).map(|i| self.se[i])
    }

    /// The `{"se": {...}, "ci95": {...}, "jacobian_condition": x}` view.
    pub fn to_doc(&self) -> InferenceDoc {
        InferenceDoc {
            se: self.labels.iter().cloned().zip(self.se.iter().copied()).collect(),
            ci95: self.labels.iter().cloned().zip(self.ci95.iter().copied()).collect(),
            jacobian_condition: self.jacobian_condition,
        }
    }
}

/// σ_max / σ_min over the singular values; infinite when rank deficient.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 1.0;
    }
    let sv = m.clone().singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Exactly representable step pair around `x`: returns (x + h, x − h, their difference).
fn step_pair(x: f64, h: f64) -> (f64, f64, f64) {
    let up = x + h;
    let dn = x - h;
    (up, dn, up - dn)
}

fn central_column<F>(theta: &[f64], j: usize, h: f64, f: &F) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let (up, dn, width) = step_pair(theta[j], h);
    let mut t = theta.to_vec();
    t[j] = up;
    let fu = f(&t)?;
    t[j] = dn;
    let fd = f(&t)?;
    if fu.len() != fd.len() {
        return Err(Error::NumericalFailure("output length changed under perturbation".into()));
    }
    let col: Vec<f64> = fu.iter().zip(&fd).map(|(a, b)| (a - b) / width).collect();
    if col.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure("non-finite difference".into()));
    }
    Ok(col)
}

/// Propagates `covariance` of `theta` through `f` by central differences:
/// Cov(f) ≈ J Σ J′. Coordinates are perturbed independently (in parallel
/// under [`Exec::Parallel`]); a failure names the perturbed coefficient.
pub fn delta_method<F>(
    theta: &[f64],
    covariance: &DMatrix<f64>,
    input_labels: &[String],
    output_labels: Vec<String>,
    f: F,
    cfg: &DeltaConfig,
) -> Result<InferenceResult>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync + Send,
{
    let k = theta.len();
    if covariance.shape() != (k, k) || input_labels.len() != k {
        return Err(Error::ShapeMismatch("covariance or labels do not match the parameters".into()));
    }
    let estimate = f(theta)?;
    let m = estimate.len();
    if output_labels.len() != m {
        return Err(Error::ShapeMismatch("output labels do not match the map".into()));
    }
    let cols = cfg.exec.map(k, |j| -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let h = cfg.rel_step * (1.0 + theta[j].abs());
        let wrap = |e: Error| Error::InferenceFailure {
            coefficient: input_labels[j].clone(),
            message: e.to_string(),
        };
        let full = central_column(theta, j, h, &f).map_err(wrap)?;
        let half = if cfg.richardson {
            Some(central_column(theta, j, h / 2.0, &f).map_err(wrap)?)
        } else {
            None
        };
        Ok((full, half))
    });
    let mut jac = DMatrix::zeros(m, k);
    let mut jac_half = DMatrix::zeros(m, k);
    for (j, c) in cols.into_iter().enumerate() {
        let (full, half) = c?;
        jac.set_column(j, &DVector::from_vec(full));
        if let Some(h) = half {
            jac_half.set_column(j, &DVector::from_vec(h));
        }
    }
    let cov_out = &jac * covariance * jac.transpose();
    let mut out = InferenceResult::from_covariance(output_labels, estimate, jac, cov_out);
    if cfg.richardson {
        let scale = out.jacobian.amax();
        let diff = (&out.jacobian - &jac_half).amax();
        let rel = if scale > 0.0 { diff / scale } else { diff };
        out.richardson_rel_diff = Some(rel);
        out.step_sensitive = rel > cfg.richardson_tol;
    }
    Ok(out)
}

/// Delta method over a model's free coefficients with its own covariance.
pub fn delta_method_model<F>(model: &OutcomeModel, output_labels: Vec<String>, solver: F, cfg: &DeltaConfig) -> Result<InferenceResult>
where
    F: Fn(&OutcomeModel) -> Result<Vec<f64>> + Sync + Send,
{
    delta_method(
        model.theta(),
        model.covariance(),
        &model.free_keys(),
        output_labels,
        |t| solver(&model.with_theta(t)?),
        cfg,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SandwichResult {
    pub theta: Vec<f64>,
    #[serde(skip)]
    pub bread: DMatrix<f64>,
    #[serde(skip)]
    pub meat: DMatrix<f64>,
    /// Var(θ̂) = A⁻¹ B A⁻ᵀ / n.
    #[serde(skip)]
    pub covariance: DMatrix<f64>,
    pub se: Vec<f64>,
    pub condition_number: f64,
    pub unstable: bool,
    /// Σ_i ψ_i(θ̂); zero at an exact root of the estimating equations.
    pub psi_sum: Vec<f64>,
}

/// Condition numbers above this make the bread count as singular.
const UNSTABLE_CONDITION: f64 = 1e12;

/// Generic sandwich for estimating equations `psi(i, θ)`, i = 0..n.
/// A = mean ∂ψ_i/∂θ by per-observation central differences; B = mean ψψ′.
pub fn sandwich<F>(n: usize, theta: &[f64], psi: F, rel_step: f64, exec: Exec) -> Result<SandwichResult>
where
    F: Fn(usize, &[f64]) -> Vec<f64> + Sync + Send,
{
    if n == 0 {
        return Err(Error::InsufficientData("sandwich needs observations".into()));
    }
    let k = theta.len();
    // Per-observation differences, averaged afterwards.
    // Power-of-two steps keep θ ± h exact, so affine ψ gives an exact A.
    let mut bread = DMatrix::zeros(k, k);
    for j in 0..k {
        let h = (rel_step * (1.0 + theta[j].abs())).log2().round().exp2();
        let (up, dn, width) = step_pair(theta[j], h);
        let cols = exec.map(n, |i| {
            let mut t = theta.to_vec();
            t[j] = up;
            let fu = psi(i, &t);
            t[j] = dn;
            let fd = psi(i, &t);
            fu.iter().zip(&fd).map(|(a, b)| (a - b) / width).collect::<Vec<f64>>()
        });
        for c in &cols {
            for i in 0..k {
                bread[(i, j)] += c[i];
            }
        }
    }
    bread /= n as f64;
    let rows = exec.map(n, |i| psi(i, theta));
    let mut meat = DMatrix::zeros(k, k);
    let mut psi_sum = vec![0.0; k];
    for r in &rows {
        let v = DVector::from_column_slice(r);
        meat += &v * v.transpose();
        for (a, b) in psi_sum.iter_mut().zip(r) {
            *a += b;
        }
    }
    meat /= n as f64;
    let cond = condition_number(&bread);
    let inv = if cond.is_finite() && cond < UNSTABLE_CONDITION {
        bread.clone().try_inverse()
    } else {
        None
    };
    let (covariance, unstable) = match inv {
        Some(inv) => {
            let v = &inv * &meat * inv.transpose() / n as f64;
            ((&v + v.transpose()) * 0.5, false)
        }
        None => (DMatrix::from_element(k, k, f64::NAN), true),
    };
    let se = (0..k).map(|i| covariance[(i, i)].max(0.0).sqrt()).collect();
    let se = if unstable { vec![f64::NAN; k] } else { se };
    Ok(SandwichResult {
        theta: theta.to_vec(),
        bread,
        meat,
        covariance,
        se,
        condition_number: cond,
        unstable,
        psi_sum,
    })
}

/// Sandwich for the one-step estimator. θ = (Q, a) with
/// ψ_i = (Y_i w_i(a) − Q, ∇_a m_i(a)); the strategy block is mapped to the
/// probability scale through the softmax Jacobian. With `fixed_strategy`
/// only the Q row is used and π stays at its given value.
pub fn m_estimation_sandwich(
    sample: &WeightedSample,
    design: &ConjointDesign,
    penalty: PenaltyConfig,
    a_hat: &SoftmaxParams,
    q_hat: f64,
    fixed_strategy: bool,
    exec: Exec,
) -> Result<(SandwichResult, InferenceResult)> {
    let obj = WeightingObjective::new(sample, design, penalty)?;
    let a_flat = a_hat.flatten();
    let counts = design.level_counts();
    let mut theta = vec![q_hat];
    if !fixed_strategy {
        theta.extend_from_slice(&a_flat);
    }
    let psi = |i: usize, t: &[f64]| -> Vec<f64> {
        let a = if fixed_strategy { a_flat.as_slice() } else { &t[1..] };
        let pi = SoftmaxParams::from_flat(a, &counts)
            .expect("finite parameters")
            .to_distribution();
        let mut row = vec![obj.weighted_outcome(i, &pi) - t[0]];
        if !fixed_strategy {
            row.extend(obj.observation_gradient(i, &pi));
        }
        row
    };
    let sw = sandwich(sample.len(), &theta, psi, 1e-5, exec)?;

    // Cov(Q, π) = G Cov(Q, a) G′ with G = diag(1, softmax Jacobian).
    let pi = a_hat.to_distribution();
    let total: usize = counts.iter().sum();
    let mut g = DMatrix::zeros(1 + total, theta.len());
    g[(0, 0)] = 1.0;
    if !fixed_strategy {
        let (mut row, mut col) = (1, 1);
        for p in pi.as_nested() {
            let jac = softmax_jacobian(p);
            for (l, jr) in jac.iter().enumerate() {
                for (k, v) in jr.iter().enumerate() {
                    g[(row + l, col + k)] = *v;
                }
            }
            row += p.len();
            col += p.len() - 1;
        }
    }
    let mut labels = vec!["Q".to_string()];
    for f in design.factors() {
        labels.extend(f.levels.iter().map(|l| format!("pi:{}:{l}", f.name)));
    }
    let mut estimate = vec![q_hat];
    estimate.extend(pi.flatten());
    let cov = &g * &sw.covariance * g.transpose();
    let mut inf = InferenceResult::from_covariance(labels, estimate, g, cov);
    inf.jacobian_condition = sw.condition_number;
    inf.unstable = sw.unstable;
    if sw.unstable {
        inf.se.iter_mut().for_each(|s| *s = f64::NAN);
        inf.ci95.iter_mut().for_each(|c| *c = [f64::NAN, f64::NAN]);
    }
    Ok((sw, inf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn labels(n: usize, p: &str) -> Vec<String> {
        (0..n).map(|i| format!("{p}{i}")).collect()
    }

    #[test]
    fn linear_map_is_exact() {
        // f(θ) = Aθ → Cov = A Σ A′
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 0.0, -1.0, 0.5, 3.0]);
        let sigma = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.0, 0.3, 1.0, 0.1, 0.0, 0.1, 0.5]);
        let theta = [0.4, -1.0, 2.0];
        let f = |t: &[f64]| Ok((&a * DVector::from_column_slice(t)).as_slice().to_vec());
        let r = delta_method(&theta, &sigma, &labels(3, "t"), labels(2, "y"), f, &DeltaConfig::default()).unwrap();
        let expect = &a * &sigma * a.transpose();
        assert!((&r.covariance - &expect).amax() < 1e-9);
        assert!(!r.step_sensitive);
    }

    #[test]
    fn nonlinear_scalar_matches_analytic_derivative() {
        // f(θ) = exp(θ) → se = exp(θ)·σ
        let r = delta_method(
            &[0.7],
            &DMatrix::from_element(1, 1, 0.04),
            &labels(1, "t"),
            labels(1, "y"),
            |t| Ok(vec![t[0].exp()]),
            &DeltaConfig::default(),
        )
        .unwrap();
        assert_abs_diff_eq!(r.se[0], 0.7f64.exp() * 0.2, epsilon = 1e-9);
        assert!(r.richardson_rel_diff.unwrap() < 1e-8);
        assert_abs_diff_eq!(r.ci95[0][1] - r.ci95[0][0], 2.0 * Z95 * r.se[0], epsilon = 1e-14);
    }

    #[test]
    fn zero_covariance_gives_zero_se() {
        let r = delta_method(
            &[1.0, 2.0],
            &DMatrix::zeros(2, 2),
            &labels(2, "t"),
            labels(1, "y"),
            |t| Ok(vec![t[0] * t[1]]),
            &DeltaConfig::default(),
        )
        .unwrap();
        assert_eq!(r.se, vec![0.0]);
    }

    #[test]
    fn failure_names_the_coefficient() {
        let err = delta_method(
            &[1.0, 0.0],
            &DMatrix::identity(2, 2),
            &labels(2, "coef"),
            labels(1, "y"),
            |t| {
                if t[1] != 0.0 {
                    Err(Error::NumericalFailure("boom".into()))
                } else {
                    Ok(vec![t[0]])
                }
            },
            &DeltaConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::InferenceFailure { ref coefficient, .. } if coefficient == "coef1"));
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let f = |t: &[f64]| Ok(vec![t[0].sin() * t[1], t[1].powi(3)]);
        let sigma = DMatrix::identity(2, 2) * 0.1;
        let mut cfg = DeltaConfig::default();
        let a = delta_method(&[0.3, 1.2], &sigma, &labels(2, "t"), labels(2, "y"), f, &cfg).unwrap();
        cfg.exec = Exec::Sequential;
        let b = delta_method(&[0.3, 1.2], &sigma, &labels(2, "t"), labels(2, "y"), f, &cfg).unwrap();
        assert_eq!(a.se, b.se);
    }

    #[test]
    fn degenerate_mean_sandwich() {
        let y = [0.0, 2.0];
        let theta = [1.0];
        let r = sandwich(2, &theta, |i, t| vec![y[i] - t[0]], 1e-5, Exec::Sequential).unwrap();
        assert_abs_diff_eq!(r.se[0], 1.0 / 2f64.sqrt(), epsilon = 1e-15);
        assert_eq!(r.psi_sum, vec![0.0]);
    }

    #[test]
    fn sandwich_of_ols_slope_matches_hc0() {
        // ψ_i = x_i (y_i − x_i′β): sandwich equals the HC0 covariance.
        let x = [[1.0, 0.2], [1.0, -0.4], [1.0, 1.3], [1.0, 0.8], [1.0, -1.1]];
        let y = [0.5, -0.1, 1.9, 0.7, -1.0];
        let xm = DMatrix::from_fn(5, 2, |i, j| x[i][j]);
        let ym = DVector::from_column_slice(&y);
        let xtx_inv = (xm.transpose() * &xm).try_inverse().unwrap();
        let beta = &xtx_inv * xm.transpose() * &ym;
        let e = &ym - &xm * &beta;
        let mut meat = DMatrix::zeros(2, 2);
        for i in 0..5 {
            let xi = DVector::from_column_slice(&x[i]);
            meat += &xi * xi.transpose() * (e[i] * e[i]);
        }
        let hc0 = &xtx_inv * meat * &xtx_inv;
        let r = sandwich(
            5,
            beta.as_slice(),
            |i, b| {
                let res = y[i] - x[i][0] * b[0] - x[i][1] * b[1];
                vec![x[i][0] * res, x[i][1] * res]
            },
            1e-5,
            Exec::Sequential,
        )
        .unwrap();
        assert!((r.covariance - hc0).amax() < 1e-10);
    }

    #[test]
    fn singular_bread_is_unstable_not_error() {
        let r = sandwich(3, &[0.0, 0.0], |_, t| vec![t[0] + t[1], t[0] + t[1]], 1e-5, Exec::Sequential).unwrap();
        assert!(r.unstable);
        assert!(r.se.iter().all(|s| s.is_nan()));
    }
}
