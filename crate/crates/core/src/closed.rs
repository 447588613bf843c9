//! Closed-form optima of Q(π) − λ‖π − p‖² for linear-interaction models.
//!
//! The penalty always runs over every level of every factor. The optimum
//! solves a linear first-order system C π = B. Three parameterizations are
//! offered:
//!
//! * binary factors, unknown = probability of the first level;
//! * multilevel factors with the last level eliminated (L_d − 1 unknowns);
//!   eliminating a level doubles the diagonal, hence the −4λ terms;
//! * all L_d levels as unknowns with sum-to-zero centred coefficients, which
//!   keeps the solution on the simplex without a multiplier (−2λ diagonal).
//!
//! All three describe the same optimum. Solutions outside the simplex are
//! flagged, never projected.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::design::{ConjointDesign, ProfileDistribution};
use crate::error::{Error, Result};
use crate::model::{OutcomeModel, Polynomial, Response};

/// Entries within [δ, 1 − δ] count as interior.
pub const INTERIOR_DELTA: f64 = 1e-6;

/// Relative pivot threshold below which C counts as singular.
const SINGULAR_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ClosedVariant {
    BinaryNonChoice,
    MultilevelNonChoice,
    ForcedChoiceAverage,
}

/// The first-order system and the (factor, level) of every unknown.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSystem {
    pub matrix: DMatrix<f64>,
    pub rhs: DVector<f64>,
    pub unknowns: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClosedFormSolution {
    pub variant: ClosedVariant,
    pub lambda: f64,
    /// Probabilities for every level, possibly outside [0, 1].
    pub pi: Vec<Vec<f64>>,
    /// Every entry lies in [0, 1].
    pub valid: bool,
    /// Every entry lies in [δ, 1 − δ].
    pub interior: bool,
    /// Sup norm of the simplex-projected gradient of the objective at `pi`.
    pub foc_residual: f64,
}

impl ClosedFormSolution {
    pub fn distribution(&self, design: &ConjointDesign) -> Option<ProfileDistribution> {
        if !self.valid {
            return None;
        }
        ProfileDistribution::new(design, self.pi.clone()).ok()
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be finite and nonnegative, got {lambda}")));
    }
    Ok(())
}

/// Cross-factor interaction coefficient of an already-reparameterized polynomial.
fn cross(poly: &Polynomial, d: usize, l: usize, e: usize, k: usize) -> f64 {
    poly.pairs
        .iter()
        .find_map(|b| {
            if (b.d, b.e) == (d, e) {
                Some(b.coef[l][k])
            } else if (b.d, b.e) == (e, d) {
                Some(b.coef[k][l])
            } else {
                None
            }
        })
        .unwrap_or(0.0)
}

pub fn binary_nonchoice_system(model: &OutcomeModel, lambda: f64) -> Result<LinearSystem> {
    check_lambda(lambda)?;
    let design = model.design();
    if design.level_counts().iter().any(|&l| l != 2) {
        return Err(Error::InvalidArgument("binary closed form needs every factor to be binary".into()));
    }
    let poly = model.polynomial().eliminate_last();
    let p = design.assignment();
    let n = design.num_factors();
    let matrix = DMatrix::from_fn(n, n, |d, e| if d == e { -4.0 * lambda } else { cross(&poly, d, 0, e, 0) });
    let rhs = DVector::from_fn(n, |d, _| -poly.main[d][0] - 4.0 * lambda * p.factor(d)[0]);
    Ok(LinearSystem {
        matrix,
        rhs,
        unknowns: (0..n).map(|d| (d, 0)).collect(),
    })
}

pub fn multilevel_nonchoice_system(model: &OutcomeModel, lambda: f64) -> Result<LinearSystem> {
    check_lambda(lambda)?;
    let design = model.design();
    let poly = model.polynomial().eliminate_last();
    let p = design.assignment();
    let unknowns: Vec<(usize, usize)> = design
        .level_counts()
        .iter()
        .enumerate()
        .flat_map(|(d, &l)| (0..l - 1).map(move |k| (d, k)))
        .collect();
    let n = unknowns.len();
    let matrix = DMatrix::from_fn(n, n, |i, j| {
        let ((d, l), (e, k)) = (unknowns[i], unknowns[j]);
        match (d == e, l == k) {
            (true, true) => -4.0 * lambda,
            (true, false) => -2.0 * lambda,
            _ => cross(&poly, d, l, e, k),
        }
    });
    let rhs = DVector::from_fn(n, |i, _| {
        let (d, l) = unknowns[i];
        let pd = p.factor(d);
        let others: f64 = (0..pd.len() - 1).filter(|&k| k != l).map(|k| pd[k]).sum();
        -poly.main[d][l] - 4.0 * lambda * pd[l] - 2.0 * lambda * others
    });
    Ok(LinearSystem { matrix, rhs, unknowns })
}

pub fn forced_choice_system(model: &OutcomeModel, lambda: f64) -> Result<LinearSystem> {
    check_lambda(lambda)?;
    let design = model.design();
    let poly = model.polynomial().centered();
    let p = design.assignment();
    let unknowns: Vec<(usize, usize)> = design
        .level_counts()
        .iter()
        .enumerate()
        .flat_map(|(d, &l)| (0..l).map(move |k| (d, k)))
        .collect();
    let n = unknowns.len();
    let matrix = DMatrix::from_fn(n, n, |i, j| {
        let ((d, l), (e, k)) = (unknowns[i], unknowns[j]);
        if d != e {
            cross(&poly, d, l, e, k)
        } else if l == k {
            -2.0 * lambda
        } else {
            0.0
        }
    });
    let rhs = DVector::from_fn(n, |i, _| {
        let (d, l) = unknowns[i];
        -poly.main[d][l] - 2.0 * lambda * p.factor(d)[l]
    });
    Ok(LinearSystem { matrix, rhs, unknowns })
}

/// Partial-pivot LU solve; a pivot below 1e-12 · max|C| means λ is too small.
pub fn solve_system(system: &LinearSystem, lambda: f64) -> Result<DVector<f64>> {
    let scale = system.matrix.amax();
    let lu = system.matrix.clone().lu();
    let u = lu.u();
    let min_pivot = (0..u.nrows()).map(|i| u[(i, i)].abs()).fold(f64::INFINITY, f64::min);
    if scale == 0.0 || min_pivot <= SINGULAR_TOL * scale {
        return Err(Error::LambdaTooSmall { lambda });
    }
    lu.solve(&system.rhs).ok_or(Error::LambdaTooSmall { lambda })
}

/// Sup norm of ∇[Q − λ‖π − p‖²] after removing each factor's mean, i.e. the
/// stationarity residual on the affine hull of the simplex.
pub fn foc_residual(model: &OutcomeModel, lambda: f64, pi: &[Vec<f64>]) -> f64 {
    let p = model.design().assignment();
    let mut g = model.polynomial().gradient(pi);
    let mut worst = 0.0f64;
    for (d, gd) in g.iter_mut().enumerate() {
        for (l, v) in gd.iter_mut().enumerate() {
            *v -= 2.0 * lambda * (pi[d][l] - p.factor(d)[l]);
        }
        let mean = gd.iter().sum::<f64>() / gd.len() as f64;
        worst = gd.iter().fold(worst, |w, v| w.max((v - mean).abs()));
    }
    worst
}

fn finish(model: &OutcomeModel, variant: ClosedVariant, lambda: f64, system: &LinearSystem, x: &DVector<f64>) -> ClosedFormSolution {
    let counts = model.design().level_counts();
    let mut pi: Vec<Vec<f64>> = counts.iter().map(|&l| vec![f64::NAN; l]).collect();
    for (&(d, l), &v) in system.unknowns.iter().zip(x.iter()) {
        pi[d][l] = v;
    }
    for row in &mut pi {
        let last = row.len() - 1;
        if row[last].is_nan() {
            row[last] = 1.0 - row[..last].iter().sum::<f64>();
        }
    }
    let valid = pi.iter().flatten().all(|&v| (0.0..=1.0).contains(&v));
    let interior = pi.iter().flatten().all(|&v| (INTERIOR_DELTA..=1.0 - INTERIOR_DELTA).contains(&v));
    ClosedFormSolution {
        variant,
        lambda,
        foc_residual: foc_residual(model, lambda, &pi),
        pi,
        valid,
        interior,
    }
}

/// Binary factors; optimal probability of each factor's first level.
pub fn solve_binary_nonchoice(model: &OutcomeModel, lambda: f64) -> Result<ClosedFormSolution> {
    let sys = binary_nonchoice_system(model, lambda)?;
    let x = solve_system(&sys, lambda)?;
    Ok(finish(model, ClosedVariant::BinaryNonChoice, lambda, &sys, &x))
}

/// Any level counts, last level eliminated.
pub fn solve_multilevel_nonchoice(model: &OutcomeModel, lambda: f64) -> Result<ClosedFormSolution> {
    let sys = multilevel_nonchoice_system(model, lambda)?;
    let x = solve_system(&sys, lambda)?;
    Ok(finish(model, ClosedVariant::MultilevelNonChoice, lambda, &sys, &x))
}

/// Forced choice against design-randomized opponents, all levels as unknowns.
pub fn solve_forced_choice_average_case(model: &OutcomeModel, lambda: f64) -> Result<ClosedFormSolution> {
    let sys = forced_choice_system(model, lambda)?;
    let x = solve_system(&sys, lambda)?;
    Ok(finish(model, ClosedVariant::ForcedChoiceAverage, lambda, &sys, &x))
}

/// Picks the variant matching the model: forced choice, binary, or multilevel.
pub fn solve_closed(model: &OutcomeModel, lambda: f64) -> Result<ClosedFormSolution> {
    match model.response() {
        Response::ForcedChoice => solve_forced_choice_average_case(model, lambda),
        Response::Single if model.design().level_counts().iter().all(|&l| l == 2) => {
            solve_binary_nonchoice(model, lambda)
        }
        Response::Single => solve_multilevel_nonchoice(model, lambda),
    }
}
