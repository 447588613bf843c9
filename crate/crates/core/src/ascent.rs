//! Gradient ascent on softmax parameters: both penalty kinds, λ selection
//! for the two-step estimator, and the one-step weighting estimator.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::closed::solve_closed;
use crate::dataio::{respondent_folds, split_dataset, ForcedChoiceDataset, SplitInfo};
use crate::design::{chain_softmax, ConjointDesign, ProfileDistribution, SoftmaxParams};
use crate::error::{Error, Result};
use crate::estim::{q_value, q_weighting, WeightedSample, WeightingMode};
use crate::exec::Exec;
use crate::infer::{delta_method_model, m_estimation_sandwich, DeltaConfig, InferenceResult, SandwichResult, Z95};
use crate::model::{fit_outcome_model, FitSpec, OutcomeModel, Polynomial, Response};

/// Levels within this distance of the factor maximum count as tied.
pub const MAX_TIE_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    #[default]
    L2,
    MaxProb,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub kind: PenaltyKind,
    pub lambda: f64,
}

impl PenaltyConfig {
    pub fn new(kind: PenaltyKind, lambda: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda must be finite and nonnegative, got {lambda}")));
        }
        Ok(Self { kind, lambda })
    }

    pub fn l2(lambda: f64) -> Self {
        Self { kind: PenaltyKind::L2, lambda }
    }

    pub fn max_prob(lambda: f64) -> Self {
        Self { kind: PenaltyKind::MaxProb, lambda }
    }

    /// L2: λ Σ (π − p)² over every level. MaxProb: λ |T| Π_d max_l π_dl,
    /// which equals λ at the uniform distribution.
    pub fn value(&self, design: &ConjointDesign, pi: &[Vec<f64>]) -> f64 {
        match self.kind {
            PenaltyKind::L2 => {
                let p = design.assignment();
                let s: f64 = pi
                    .iter()
                    .flatten()
                    .zip(p.as_nested().iter().flatten())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                self.lambda * s
            }
            PenaltyKind::MaxProb => {
                let m: f64 = pi.iter().map(|f| f[argmax(f)]).product();
                self.lambda * design.support_size_f64() * m
            }
        }
    }

    /// Gradient with respect to every level probability. For MaxProb the
    /// lowest-index maximizer carries the derivative.
    pub fn gradient(&self, design: &ConjointDesign, pi: &[Vec<f64>]) -> Vec<Vec<f64>> {
        match self.kind {
            PenaltyKind::L2 => {
                let p = design.assignment();
                pi.iter()
                    .zip(p.as_nested())
                    .map(|(a, b)| a.iter().zip(b).map(|(x, y)| 2.0 * self.lambda * (x - y)).collect())
                    .collect()
            }
            PenaltyKind::MaxProb => {
                let scale = self.lambda * design.support_size_f64();
                let maxes: Vec<f64> = pi.iter().map(|f| f[argmax(f)]).collect();
                pi.iter()
                    .enumerate()
                    .map(|(d, f)| {
                        let mut g = vec![0.0; f.len()];
                        let others: f64 = maxes.iter().enumerate().filter(|&(e, _)| e != d).map(|(_, m)| m).product();
                        g[argmax(f)] = scale * others;
                        g
                    })
                    .collect()
            }
        }
    }
}

/// Lowest index whose value is within [`MAX_TIE_TOL`] of the maximum.
fn argmax(v: &[f64]) -> usize {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    v.iter().position(|&x| x >= m - MAX_TIE_TOL).unwrap_or(0)
}

/// Smooth objective over a flat parameter vector, to be maximized.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartPoint {
    /// a = 0, the uniform distribution.
    Uniform,
    /// Log-ratio parameters of the design probabilities.
    Design,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AscentConfig {
    pub max_steps: usize,
    pub initial_step: f64,
    pub max_halvings: usize,
    pub tolerance: f64,
    pub start: StartPoint,
    /// Finish with Newton steps on a finite-difference Hessian.
    pub polish: bool,
    pub seed: u64,
}

impl Default for AscentConfig {
    fn default() -> Self {
        Self {
            max_steps: 5000,
            initial_step: 0.1,
            max_halvings: 40,
            tolerance: 1e-8,
            start: StartPoint::Uniform,
            polish: true,
            seed: 0,
        }
    }
}

impl AscentConfig {
    fn validate(&self) -> Result<()> {
        if self.max_steps == 0 || !(self.initial_step > 0.0) || !(self.tolerance > 0.0) {
            return Err(Error::InvalidArgument(
                "ascent needs max_steps ≥ 1, a positive step and a positive tolerance".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AscentOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient_norm: f64,
    /// Objective after the start and after every accepted step.
    pub trace: Vec<f64>,
    pub steps: usize,
    pub converged: bool,
}

/// Slack for Newton steps whose objective change is at rounding level.
fn rounding_slack(v: f64) -> f64 {
    16.0 * f64::EPSILON * (1.0 + v.abs())
}

/// Gradient ascent with a halving line search, then optional Newton polish.
pub fn maximize_objective<O: Objective + ?Sized>(obj: &O, x0: &[f64], cfg: &AscentConfig) -> Result<AscentOutcome> {
    cfg.validate()?;
    if x0.len() != obj.dim() {
        return Err(Error::ShapeMismatch(format!("start has {} entries, objective {}", x0.len(), obj.dim())));
    }
    let mut x = x0.to_vec();
    let mut v = obj.value(&x);
    if !v.is_finite() {
        return Err(Error::NumericalFailure("objective is not finite at the start point".into()));
    }
    let mut trace = vec![v];
    let mut g = obj.gradient(&x);
    let mut steps = 0;
    while steps < cfg.max_steps && sup_norm(&g) > cfg.tolerance {
        if g.iter().any(|c| !c.is_finite()) {
            return Err(Error::NumericalFailure(format!(
                "non-finite gradient after {} accepted steps (last objective {v})",
                trace.len() - 1
            )));
        }
        let mut gamma = cfg.initial_step;
        let mut accepted = false;
        for _ in 0..=cfg.max_halvings {
            let cand: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a + gamma * b).collect();
            let cv = obj.value(&cand);
            if cv.is_finite() && cv > v {
                x = cand;
                v = cv;
                accepted = true;
                break;
            }
            gamma /= 2.0;
        }
        steps += 1;
        if !accepted {
            break;
        }
        trace.push(v);
        g = obj.gradient(&x);
    }
    if cfg.polish && sup_norm(&g) > 0.0 {
        newton_polish(obj, &mut x, &mut v, &mut g, &mut trace);
    }
    if !v.is_finite() || g.iter().any(|c| !c.is_finite()) {
        return Err(Error::NumericalFailure(format!("non-finite objective after {} steps", trace.len() - 1)));
    }
    let gradient_norm = sup_norm(&g);
    Ok(AscentOutcome {
        x,
        value: v,
        gradient_norm,
        trace,
        steps,
        converged: gradient_norm <= cfg.tolerance,
    })
}

/// Central-difference Hessian of the analytic gradient, symmetrized.
fn fd_hessian<O: Objective + ?Sized>(obj: &O, x: &[f64]) -> DMatrix<f64> {
    let k = x.len();
    let mut h = DMatrix::zeros(k, k);
    let mut t = x.to_vec();
    for j in 0..k {
        let step = 1e-5 * (1.0 + x[j].abs());
        t[j] = x[j] + step;
        let up = obj.gradient(&t);
        t[j] = x[j] - step;
        let dn = obj.gradient(&t);
        let width = (x[j] + step) - (x[j] - step);
        t[j] = x[j];
        for i in 0..k {
            h[(i, j)] = (up[i] - dn[i]) / width;
        }
    }
    (&h + h.transpose()) * 0.5
}

fn newton_polish<O: Objective + ?Sized>(obj: &O, x: &mut Vec<f64>, v: &mut f64, g: &mut Vec<f64>, trace: &mut Vec<f64>) {
    for _ in 0..30 {
        let gn = sup_norm(g);
        if gn == 0.0 {
            return;
        }
        let h = fd_hessian(obj, x);
        let Some(dx) = h.lu().solve(&DVector::from_column_slice(g)) else {
            return;
        };
        let mut improved = false;
        let mut scale = 1.0;
        for _ in 0..8 {
            let cand: Vec<f64> = x.iter().zip(dx.iter()).map(|(a, d)| a - scale * d).collect();
            let cv = obj.value(&cand);
            let cg = obj.gradient(&cand);
            if cv.is_finite() && cv >= *v - rounding_slack(*v) && sup_norm(&cg) < gn {
                *x = cand;
                *v = cv.max(*v);
                *g = cg;
                trace.push(*v);
                improved = true;
                break;
            }
            scale /= 2.0;
        }
        if !improved {
            return;
        }
    }
}

/// Q(softmax(a)) − penalty for a fitted outcome model against a fixed opponent.
pub struct ParametricObjective<'a> {
    design: &'a ConjointDesign,
    poly: &'a Polynomial,
    offset: f64,
    counts: Vec<usize>,
    penalty: PenaltyConfig,
}

impl<'a> ParametricObjective<'a> {
    /// Forced-choice models without an opponent play against the design distribution.
    pub fn new(model: &'a OutcomeModel, penalty: PenaltyConfig, opponent: Option<&ProfileDistribution>) -> Result<Self> {
        let design = model.design();
        let poly = model.polynomial();
        let offset = match model.response() {
            Response::Single => 0.0,
            Response::ForcedChoice => {
                let p = design.assignment();
                let opp = opponent.unwrap_or(&p);
                if !opp.matches(design) {
                    return Err(Error::ShapeMismatch("opponent does not match the design".into()));
                }
                poly.constant - poly.value(opp.as_nested())
            }
        };
        Ok(Self {
            design,
            poly,
            offset,
            counts: design.level_counts(),
            penalty,
        })
    }

    fn pi(&self, a: &[f64]) -> Vec<Vec<f64>> {
        SoftmaxParams::from_flat(a, &self.counts)
            .map(|s| s.to_distribution().into_nested())
            .unwrap_or_else(|_| self.counts.iter().map(|&l| vec![f64::NAN; l]).collect())
    }

    pub fn q(&self, pi: &[Vec<f64>]) -> f64 {
        self.poly.value(pi) + self.offset
    }
}

impl Objective for ParametricObjective<'_> {
    fn dim(&self) -> usize {
        self.counts.iter().map(|l| l - 1).sum()
    }

    fn value(&self, a: &[f64]) -> f64 {
        let pi = self.pi(a);
        self.q(&pi) - self.penalty.value(self.design, &pi)
    }

    fn gradient(&self, a: &[f64]) -> Vec<f64> {
        let pi = self.pi(a);
        let mut g = self.poly.gradient(&pi);
        let pg = self.penalty.gradient(self.design, &pi);
        for (gd, pd) in g.iter_mut().zip(&pg) {
            for (x, y) in gd.iter_mut().zip(pd) {
                *x -= y;
            }
        }
        chain_softmax(&pi, &g)
    }
}

fn check_params(model: &OutcomeModel, a: &SoftmaxParams) -> Result<()> {
    crate::design::softmax_to_distribution(a, model.design()).map(|_| ())
}

pub fn objective_parametric(
    a: &SoftmaxParams,
    model: &OutcomeModel,
    penalty: PenaltyConfig,
    opponent: Option<&ProfileDistribution>,
) -> Result<f64> {
    check_params(model, a)?;
    Ok(ParametricObjective::new(model, penalty, opponent)?.value(&a.flatten()))
}

/// Flat gradient, factor by factor, over the free softmax parameters.
pub fn gradient_parametric(
    a: &SoftmaxParams,
    model: &OutcomeModel,
    penalty: PenaltyConfig,
    opponent: Option<&ProfileDistribution>,
) -> Result<Vec<f64>> {
    check_params(model, a)?;
    Ok(ParametricObjective::new(model, penalty, opponent)?.gradient(&a.flatten()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    Closed,
    Ascent,
    /// Closed form when it applies and lands inside the simplex, else ascent.
    #[default]
    Auto,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StrategyEstimate {
    pub pi_star: ProfileDistribution,
    pub a_star: SoftmaxParams,
    pub q_value: f64,
    pub lambda: f64,
    pub penalty: PenaltyKind,
    pub method: SolveMethod,
    pub objective: f64,
    pub gradient_norm: f64,
    pub converged: bool,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<f64>,
    pub se_q: Option<f64>,
    pub se_pi: Option<Vec<Vec<f64>>>,
    #[serde(skip)]
    pub inference: Option<InferenceResult>,
}

impl StrategyEstimate {
    /// Copies standard errors from an inference result laid out as [Q, π flat].
    pub fn attach(&mut self, inf: InferenceResult) {
        self.se_q = Some(inf.se[0]);
        let mut off = 1;
        self.se_pi = Some(
            self.pi_star
                .level_counts()
                .iter()
                .map(|&l| {
                    let s = inf.se[off..off + l].to_vec();
                    off += l;
                    s
                })
                .collect(),
        );
        self.inference = Some(inf);
    }
}

/// Output labels for [Q, π flat].
pub fn strategy_labels(design: &ConjointDesign) -> Vec<String> {
    let mut labels = vec!["Q".to_string()];
    for f in design.factors() {
        labels.extend(f.levels.iter().map(|l| format!("pi:{}:{l}", f.name)));
    }
    labels
}

fn start_point(model: &OutcomeModel, cfg: &AscentConfig) -> SoftmaxParams {
    match cfg.start {
        StartPoint::Uniform => SoftmaxParams::zeros(model.design()),
        StartPoint::Design => SoftmaxParams::from_distribution(&model.design().assignment())
            .unwrap_or_else(|_| SoftmaxParams::zeros(model.design())),
    }
}

/// Gradient ascent from `a0` on the parametric objective.
pub fn maximize(
    a0: &SoftmaxParams,
    model: &OutcomeModel,
    penalty: PenaltyConfig,
    opponent: Option<&ProfileDistribution>,
    cfg: &AscentConfig,
) -> Result<StrategyEstimate> {
    check_params(model, a0)?;
    let obj = ParametricObjective::new(model, penalty, opponent)?;
    let out = maximize_objective(&obj, &a0.flatten(), cfg)?;
    let a_star = SoftmaxParams::from_flat(&out.x, &model.design().level_counts())?;
    let pi_star = a_star.to_distribution();
    Ok(StrategyEstimate {
        q_value: obj.q(pi_star.as_nested()),
        pi_star,
        a_star,
        lambda: penalty.lambda,
        penalty: penalty.kind,
        method: SolveMethod::Ascent,
        objective: out.value,
        gradient_norm: out.gradient_norm,
        converged: out.converged,
        trace: out.trace,
        se_q: None,
        se_pi: None,
        inference: None,
    })
}

fn closed_applies(model: &OutcomeModel, penalty: PenaltyConfig, opponent: Option<&ProfileDistribution>) -> bool {
    if penalty.kind != PenaltyKind::L2 {
        return false;
    }
    match (model.response(), opponent) {
        (Response::ForcedChoice, Some(o)) => o.max_abs_diff(&model.design().assignment()) == 0.0,
        _ => true,
    }
}

fn solve_closed_estimate(
    model: &OutcomeModel,
    penalty: PenaltyConfig,
    opponent: Option<&ProfileDistribution>,
) -> Result<StrategyEstimate> {
    let sol = solve_closed(model, penalty.lambda)?;
    let pi_star = match sol.distribution(model.design()) {
        Some(d) if sol.pi.iter().flatten().all(|&v| v > 0.0) => d,
        _ => {
            return Err(Error::InvalidArgument(format!(
                "closed-form solution at lambda {} leaves the simplex interior; use the ascent method",
                penalty.lambda
            )))
        }
    };
    let a_star = SoftmaxParams::from_distribution(&pi_star)?;
    let obj = ParametricObjective::new(model, penalty, opponent)?;
    let x = a_star.flatten();
    let g = obj.gradient(&x);
    Ok(StrategyEstimate {
        q_value: obj.q(pi_star.as_nested()),
        objective: obj.value(&x),
        gradient_norm: sup_norm(&g),
        pi_star,
        a_star,
        lambda: penalty.lambda,
        penalty: penalty.kind,
        method: SolveMethod::Closed,
        converged: true,
        trace: Vec::new(),
        se_q: None,
        se_pi: None,
        inference: None,
    })
}

/// Optimal strategy for one λ. `start` overrides the configured start point
/// (warm starts during finite differences).
pub fn solve_model(
    model: &OutcomeModel,
    penalty: PenaltyConfig,
    opponent: Option<&ProfileDistribution>,
    method: SolveMethod,
    cfg: &AscentConfig,
    start: Option<&SoftmaxParams>,
) -> Result<StrategyEstimate> {
    let ascent = || {
        let a0 = start.cloned().unwrap_or_else(|| start_point(model, cfg));
        maximize(&a0, model, penalty, opponent, cfg)
    };
    match method {
        SolveMethod::Ascent => ascent(),
        SolveMethod::Closed => {
            if !closed_applies(model, penalty, opponent) {
                return Err(Error::InvalidArgument(
                    "closed form needs the L2 penalty and, for forced choice, the design opponent".into(),
                ));
            }
            solve_closed_estimate(model, penalty, opponent)
        }
        SolveMethod::Auto => {
            if closed_applies(model, penalty, opponent) {
                if let Ok(est) = solve_closed_estimate(model, penalty, opponent) {
                    return Ok(est);
                }
            }
            ascent()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwoStepSpec {
    pub fit: FitSpec,
    pub penalty: PenaltyKind,
    pub method: SolveMethod,
    pub ascent: AscentConfig,
    pub delta: DeltaConfig,
}

impl Default for TwoStepSpec {
    fn default() -> Self {
        Self {
            fit: FitSpec::default(),
            penalty: PenaltyKind::L2,
            method: SolveMethod::Auto,
            ascent: AscentConfig::default(),
            delta: DeltaConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LambdaRow {
    pub lambda: f64,
    pub q_value: f64,
    pub se_q: f64,
    /// Q̂ − 1.96 · se.
    pub score: f64,
    pub method: Option<SolveMethod>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TwoStepResult {
    pub estimate: StrategyEstimate,
    pub grid: Vec<LambdaRow>,
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() || grid.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
        return Err(Error::InvalidArgument("lambda grid must be nonempty and positive".into()));
    }
    Ok(())
}

/// Solves at one λ and attaches delta-method standard errors for [Q, π].
pub fn solve_with_inference(
    model: &OutcomeModel,
    penalty: PenaltyConfig,
    method: SolveMethod,
    cfg: &AscentConfig,
    delta: &DeltaConfig,
) -> Result<StrategyEstimate> {
    let mut est = solve_model(model, penalty, None, method, cfg, None)?;
    // Perturbed solves reuse the method actually chosen, warm-started.
    let used = est.method;
    let warm = est.a_star.clone();
    let inf = delta_method_model(
        model,
        strategy_labels(model.design()),
        |m| {
            let e = solve_model(m, penalty, None, used, cfg, Some(&warm))?;
            let mut out = vec![e.q_value];
            out.extend(e.pi_star.flatten());
            Ok(out)
        },
        delta,
    )?;
    est.attach(inf);
    Ok(est)
}

/// Solves over the λ grid (in parallel under `exec`) and keeps the λ with
/// the largest Q̂ − 1.96 · se. Ties keep the earliest grid entry.
pub fn two_step_from_model(model: &OutcomeModel, lambda_grid: &[f64], spec: &TwoStepSpec, exec: Exec) -> Result<TwoStepResult> {
    check_grid(lambda_grid)?;
    let results = exec.map(lambda_grid.len(), |i| {
        solve_with_inference(
            model,
            PenaltyConfig { kind: spec.penalty, lambda: lambda_grid[i] },
            spec.method,
            &spec.ascent,
            &spec.delta,
        )
    });
    let mut grid = Vec::with_capacity(results.len());
    let mut best: Option<(f64, usize)> = None;
    let mut first_err = None;
    for (i, r) in results.iter().enumerate() {
        match r {
            Ok(est) => {
                let se = est.se_q.unwrap_or(f64::NAN);
                let score = est.q_value - Z95 * se;
                if score.is_finite() && best.is_none_or(|(b, _)| score > b) {
                    best = Some((score, i));
                }
                grid.push(LambdaRow {
                    lambda: lambda_grid[i],
                    q_value: est.q_value,
                    se_q: se,
                    score,
                    method: Some(est.method),
                    error: None,
                });
            }
            Err(e) => {
                grid.push(LambdaRow {
                    lambda: lambda_grid[i],
                    q_value: f64::NAN,
                    se_q: f64::NAN,
                    score: f64::NAN,
                    method: None,
                    error: Some(e.to_string()),
                });
                first_err.get_or_insert(i);
            }
        }
    }
    let Some((_, idx)) = best else {
        let mut results = results;
        return Err(match first_err {
            Some(i) => results.swap_remove(i).unwrap_err(),
            None => Error::NumericalFailure("no lambda produced a finite selection score".into()),
        });
    };
    let estimate = results.into_iter().nth(idx).expect("index in range")?;
    Ok(TwoStepResult { estimate, grid })
}

/// Fits the outcome model once, then runs [`two_step_from_model`].
pub fn two_step_estimate(data: &ForcedChoiceDataset, lambda_grid: &[f64], spec: &TwoStepSpec, exec: Exec) -> Result<TwoStepResult> {
    check_grid(lambda_grid)?;
    let model = fit_outcome_model(data, &spec.fit)?;
    two_step_from_model(&model, lambda_grid, spec, exec)
}

/// Horvitz–Thompson weighting objective M_n(a) = n⁻¹ Σ m_i(a) with
/// m_i(a) = Y_i w_i(π) − penalty(π), π = softmax(a).
pub struct WeightingObjective<'a> {
    sample: &'a WeightedSample,
    design: &'a ConjointDesign,
    base: Vec<f64>,
    counts: Vec<usize>,
    penalty: PenaltyConfig,
}

impl<'a> WeightingObjective<'a> {
    pub fn new(sample: &'a WeightedSample, design: &'a ConjointDesign, penalty: PenaltyConfig) -> Result<Self> {
        let base = crate::estim::design_probabilities(sample, design)?;
        Ok(Self {
            sample,
            design,
            base,
            counts: design.level_counts(),
            penalty,
        })
    }

    pub fn len(&self) -> usize {
        self.sample.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample.is_empty()
    }

    fn weight(&self, i: usize, pi: &ProfileDistribution) -> f64 {
        self.sample.profiles()[i]
            .0
            .iter()
            .zip(pi.as_nested())
            .map(|(&l, p)| p[l])
            .product::<f64>()
            / self.base[i]
    }

    /// Y_i w_i(π).
    pub fn weighted_outcome(&self, i: usize, pi: &ProfileDistribution) -> f64 {
        self.sample.outcomes()[i] * self.weight(i, pi)
    }

    /// ∇_a m_i: Y_i w_i (1{T_id = k} − π_dk) minus the penalty gradient.
    pub fn observation_gradient(&self, i: usize, pi: &ProfileDistribution) -> Vec<f64> {
        let yw = self.weighted_outcome(i, pi);
        let t = &self.sample.profiles()[i].0;
        let pen = chain_softmax(pi.as_nested(), &self.penalty.gradient(self.design, pi.as_nested()));
        let mut out = Vec::with_capacity(pen.len());
        for (d, p) in pi.as_nested().iter().enumerate() {
            for k in 0..p.len() - 1 {
                let ind = if t[d] == k { 1.0 } else { 0.0 };
                out.push(yw * (ind - p[k]));
            }
        }
        out.iter_mut().zip(&pen).for_each(|(g, q)| *g -= q);
        out
    }

    fn dist(&self, a: &[f64]) -> Option<ProfileDistribution> {
        SoftmaxParams::from_flat(a, &self.counts).ok().map(|s| s.to_distribution())
    }

    /// Mean gradient over a subset of observations.
    fn batch_gradient(&self, a: &[f64], idx: &[usize]) -> Vec<f64> {
        let pi = self.dist(a).expect("finite parameters");
        let mut g = vec![0.0; a.len()];
        for &i in idx {
            for (s, v) in g.iter_mut().zip(self.observation_gradient(i, &pi)) {
                *s += v;
            }
        }
        g.iter_mut().for_each(|v| *v /= idx.len() as f64);
        g
    }
}

impl Objective for WeightingObjective<'_> {
    fn dim(&self) -> usize {
        self.counts.iter().map(|l| l - 1).sum()
    }

    fn value(&self, a: &[f64]) -> f64 {
        let Some(pi) = self.dist(a) else { return f64::NAN };
        let n = self.len();
        let s: f64 = (0..n).map(|i| self.weighted_outcome(i, &pi)).sum();
        s / n as f64 - self.penalty.value(self.design, pi.as_nested())
    }

    fn gradient(&self, a: &[f64]) -> Vec<f64> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch_gradient(a, &idx)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgaConfig {
    pub batch_size: usize,
    pub step: f64,
    /// Step at epoch e is step / (1 + decay · e).
    pub decay: f64,
    pub epochs: usize,
}

impl Default for SgaConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            step: 0.05,
            decay: 0.01,
            epochs: 200,
        }
    }
}

/// Seeded mini-batch stochastic gradient ascent.
pub fn stochastic_ascent(obj: &WeightingObjective<'_>, a0: &[f64], cfg: &SgaConfig, seed: u64) -> Result<Vec<f64>> {
    if cfg.batch_size == 0 || !(cfg.step > 0.0) || obj.is_empty() {
        return Err(Error::InvalidArgument("SGA needs a positive batch size, step and a nonempty sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..obj.len()).collect();
    let mut a = a0.to_vec();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let gamma = cfg.step / (1.0 + cfg.decay * epoch as f64);
        for batch in order.chunks(cfg.batch_size) {
            let g = obj.batch_gradient(&a, batch);
            a.iter_mut().zip(&g).for_each(|(x, d)| *x += gamma * d);
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericalFailure(format!("SGA diverged in epoch {epoch}")));
            }
        }
    }
    Ok(a)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OneStepSpec {
    pub penalty: PenaltyKind,
    pub folds: usize,
    pub split_fraction: f64,
    pub sga: SgaConfig,
    /// Full-batch ascent and Newton polish after SGA on the final half.
    pub ascent: AscentConfig,
    pub seed: u64,
}

impl Default for OneStepSpec {
    fn default() -> Self {
        Self {
            penalty: PenaltyKind::L2,
            folds: 5,
            split_fraction: 0.5,
            sga: SgaConfig::default(),
            ascent: AscentConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CvRow {
    pub lambda: f64,
    pub fold_q: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
    /// mean − 1.96 · sd.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OneStepResult {
    pub estimate: StrategyEstimate,
    pub cv: Vec<CvRow>,
    pub split: SplitInfo,
    pub sandwich: SandwichResult,
}

fn design_start(design: &ConjointDesign) -> Result<Vec<f64>> {
    Ok(SoftmaxParams::from_distribution(&design.assignment())?.flatten())
}

/// Splits respondents in half, picks λ by K-fold cross-validation of the
/// out-of-fold weighting estimate on the first half, refits on the second
/// half and attaches sandwich standard errors.
pub fn one_step_estimate(data: &ForcedChoiceDataset, lambda_grid: &[f64], spec: &OneStepSpec, exec: Exec) -> Result<OneStepResult> {
    check_grid(lambda_grid)?;
    if spec.folds < 2 {
        return Err(Error::InvalidArgument("one-step estimation needs at least 2 folds".into()));
    }
    let design = data.design();
    let (first, second, split) = split_dataset(data, spec.split_fraction, spec.seed)?;
    let folds = respondent_folds(&first, spec.folds, spec.seed)?;
    let a0 = design_start(design)?;
    let fold_samples: Vec<(WeightedSample, WeightedSample)> = folds
        .iter()
        .map(|(tr, ho)| (WeightedSample::from_forced_choice(tr), WeightedSample::from_forced_choice(ho)))
        .collect();
    let k = fold_samples.len();
    let cells = exec.map(lambda_grid.len() * k, |c| -> Result<f64> {
        let (li, fi) = (c / k, c % k);
        let (train, held) = &fold_samples[fi];
        let pen = PenaltyConfig { kind: spec.penalty, lambda: lambda_grid[li] };
        let obj = WeightingObjective::new(train, design, pen)?;
        let seed = spec.seed ^ ((li as u64) << 32 | fi as u64);
        let a = stochastic_ascent(&obj, &a0, &spec.sga, seed)?;
        let pi = SoftmaxParams::from_flat(&a, &design.level_counts())?.to_distribution();
        q_weighting(held, design, &pi, WeightingMode::HorvitzThompson)
    });
    let mut cv = Vec::with_capacity(lambda_grid.len());
    let mut cells = cells.into_iter();
    for &lambda in lambda_grid {
        let fold_q = (0..k).map(|_| cells.next().expect("cell")).collect::<Result<Vec<f64>>>()?;
        let mean = fold_q.iter().sum::<f64>() / k as f64;
        let sd = (fold_q.iter().map(|q| (q - mean).powi(2)).sum::<f64>() / (k as f64 - 1.0)).sqrt();
        cv.push(CvRow { lambda, fold_q, mean, sd, score: mean - Z95 * sd });
    }
    let best = cv
        .iter()
        .enumerate()
        .fold(None::<(usize, f64)>, |acc, (i, r)| match acc {
            Some((_, s)) if !(r.score > s) => acc,
            _ if r.score.is_finite() => Some((i, r.score)),
            _ => acc,
        })
        .ok_or_else(|| Error::NumericalFailure("no lambda produced a finite cross-validation score".into()))?
        .0;
    let penalty = PenaltyConfig { kind: spec.penalty, lambda: cv[best].lambda };

    let sample = WeightedSample::from_forced_choice(&second);
    let obj = WeightingObjective::new(&sample, design, penalty)?;
    let a_sga = stochastic_ascent(&obj, &a0, &spec.sga, spec.seed.wrapping_add(1))?;
    let out = maximize_objective(&obj, &a_sga, &spec.ascent)?;
    let a_star = SoftmaxParams::from_flat(&out.x, &design.level_counts())?;
    let pi_star = a_star.to_distribution();
    let q_hat = q_weighting(&sample, design, &pi_star, WeightingMode::HorvitzThompson)?;
    let (sandwich, inf) = m_estimation_sandwich(&sample, design, penalty, &a_star, q_hat, false, exec)?;
    let mut estimate = StrategyEstimate {
        pi_star,
        a_star,
        q_value: q_hat,
        lambda: penalty.lambda,
        penalty: penalty.kind,
        method: SolveMethod::Ascent,
        objective: out.value,
        gradient_norm: out.gradient_norm,
        converged: out.converged,
        trace: out.trace,
        se_q: None,
        se_pi: None,
        inference: None,
    };
    estimate.attach(inf);
    Ok(OneStepResult { estimate, cv, split, sandwich })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LambdaSchedule {
    Constant { lambda: f64 },
    /// λ_n = scale · n^exponent.
    Power { scale: f64, exponent: f64 },
}

impl LambdaSchedule {
    pub fn at(&self, n: usize) -> f64 {
        match *self {
            LambdaSchedule::Constant { lambda } => lambda,
            LambdaSchedule::Power { scale, exponent } => scale * (n as f64).powf(exponent),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingRow {
    pub n: usize,
    pub lambda: f64,
    /// sup over the test set of ‖∇penalty(π)‖₂ / √n.
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    /// Least-squares slope of log ratio on log n; absent when a ratio is 0.
    pub log_slope: Option<f64>,
    pub satisfied: bool,
}

/// Checks whether the penalty gradient vanishes relative to √n along a schedule.
pub fn check_lambda_scaling(
    schedule: LambdaSchedule,
    n_values: &[usize],
    design: &ConjointDesign,
    kind: PenaltyKind,
    test_set: &[ProfileDistribution],
) -> Result<ScalingReport> {
    if n_values.len() < 2 || n_values.contains(&0) || test_set.is_empty() {
        return Err(Error::InvalidArgument("need at least two positive n values and a test set".into()));
    }
    let mut rows = Vec::with_capacity(n_values.len());
    for &n in n_values {
        let lambda = schedule.at(n);
        let pen = PenaltyConfig::new(kind, lambda)?;
        let sup = test_set
            .iter()
            .map(|pi| pen.gradient(design, pi.as_nested()).iter().flatten().map(|g| g * g).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        rows.push(ScalingRow { n, lambda, ratio: sup / (n as f64).sqrt() });
    }
    if rows.iter().all(|r| r.ratio == 0.0) {
        return Ok(ScalingReport { rows, log_slope: None, satisfied: true });
    }
    if rows.iter().any(|r| r.ratio <= 0.0) {
        return Ok(ScalingReport { rows, log_slope: None, satisfied: false });
    }
    let xs: Vec<f64> = rows.iter().map(|r| (r.n as f64).ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.ratio.ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("n values must not all be equal".into()));
    }
    let slope = sxy / sxx;
    Ok(ScalingReport { rows, log_slope: Some(slope), satisfied: slope < 0.0 })
}

/// Q(π) for any model; forced-choice models face the design distribution.
pub fn model_value(model: &OutcomeModel, pi: &ProfileDistribution) -> Result<f64> {
    let p = model.design().assignment();
    q_value(model, pi, Some(&p))
}
