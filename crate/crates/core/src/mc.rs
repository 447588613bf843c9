//! Monte Carlo harness for the average-case and adversarial simulation
//! studies: bias, RMSE and 95% interval coverage per target.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ascent::{solve_model, AscentConfig, PenaltyConfig, SolveMethod};
use crate::closed::solve_binary_nonchoice;
use crate::dataio::{ForcedChoiceDataset, Stage, TaskRecord};
use crate::design::{ConjointDesign, FactorSpec, Profile, ProfileDistribution, SoftmaxParams};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::game::{equilibrium_with_inference, grid_oracle, solve_equilibrium, GameConfig, InstitutionSpec};
use crate::infer::{delta_method_model, DeltaConfig};
use crate::model::{fit_outcome_model, fit_single_outcome_model, Coding, FitSpec, OutcomeModel, Response, VcovKind};

/// Draws a profile from a product distribution.
pub fn sample_profile<R: Rng + ?Sized>(pi: &ProfileDistribution, rng: &mut R) -> Profile {
    Profile(
        pi.as_nested()
            .iter()
            .map(|p| {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                for (l, q) in p.iter().enumerate() {
                    acc += q;
                    if u < acc {
                        return l;
                    }
                }
                p.len() - 1
            })
            .collect(),
    )
}

/// Independent, reproducible stream `id` under a master seed.
pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct McCell {
    pub study: String,
    pub n: usize,
    /// D for the average-case study, p_R for the adversarial one.
    pub setting: f64,
    pub target: String,
    pub truth: f64,
    pub bias: f64,
    /// Population variance (divisor R) of the successful estimates.
    pub variance: f64,
    pub mse: f64,
    pub rmse: f64,
    pub rmse_mc_se: f64,
    pub coverage: f64,
    /// Binomial standard error of the coverage proportion.
    pub coverage_mc_se: f64,
    pub mean_se: f64,
    pub failures: usize,
    pub replications: usize,
    /// Every interval had (near) zero width.
    pub degenerate: bool,
}

impl McCell {
    fn from_draws(study: &str, n: usize, setting: f64, target: &str, truth: f64, draws: &[(f64, f64, f64, f64)], failures: usize) -> Self {
        let r = draws.len() as f64;
        let (mut bias, mut mse, mut cover, mut se_sum) = (0.0, 0.0, 0.0, 0.0);
        for &(est, se, lo, hi) in draws {
            bias += est - truth;
            mse += (est - truth).powi(2);
            if lo < truth && truth < hi {
                cover += 1.0;
            }
            se_sum += se;
        }
        let (bias, mse, coverage) = if draws.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN)
        } else {
            (bias / r, mse / r, cover / r)
        };
        let mean = bias + truth;
        let variance = draws.iter().map(|d| (d.0 - mean).powi(2)).sum::<f64>() / r;
        let sq_sd = (draws.iter().map(|d| ((d.0 - truth).powi(2) - mse).powi(2)).sum::<f64>() / r).sqrt();
        let rmse = mse.sqrt();
        McCell {
            study: study.into(),
            n,
            setting,
            target: target.into(),
            truth,
            bias,
            variance,
            mse,
            rmse,
            rmse_mc_se: if rmse > 0.0 { sq_sd / r.sqrt() / (2.0 * rmse) } else { 0.0 },
            coverage,
            coverage_mc_se: (coverage * (1.0 - coverage) / r).sqrt(),
            mean_se: se_sum / r,
            failures,
            replications: draws.len() + failures,
            degenerate: !draws.is_empty() && draws.iter().all(|d| d.3 - d.2 < 1e-10),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct McTable {
    pub rows: Vec<McCell>,
}

impl McTable {
    pub fn find(&self, n: usize, setting: f64, target: &str) -> Option<&McCell> {
        self.rows.iter().find(|c| c.n == n && c.setting == setting && c.target == target)
    }

    /// CSV with columns study, n, d_or_pr, target, bias, rmse, coverage, mc_se, failures.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("study,n,d_or_pr,target,bias,rmse,coverage,mc_se,failures\n");
        for c in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.10e},{:.10e},{:.10e},{:.10e},{}",
                c.study, c.n, c.setting, c.target, c.bias, c.rmse, c.coverage, c.coverage_mc_se, c.failures
            );
        }
        s
    }
}

/// One replication's estimates for every target: (estimate, se, lo, hi).
type RepDraw = Vec<(f64, f64, f64, f64)>;

fn tabulate(study: &str, n: usize, setting: f64, targets: &[String], truths: &[f64], reps: &[Result<RepDraw>]) -> Vec<McCell> {
    let failures = reps.iter().filter(|r| r.is_err()).count();
    targets
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let draws: Vec<_> = reps.iter().filter_map(|r| r.as_ref().ok().map(|d| d[k])).collect();
            McCell::from_draws(study, n, setting, t, truths[k], &draws, failures)
        })
        .collect()
}

// ---------------------------------------------------------------- average case

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AverageCaseDgp {
    pub factors: usize,
    pub n_values: Vec<usize>,
    pub coefficient_seed: u64,
    pub noise_sd: f64,
    pub target_r2: f64,
    pub calibration_rows: usize,
    /// Largest optimal level probability allowed when choosing λ.
    pub max_probability: f64,
    /// Fixed λ; calibrated from `max_probability` when absent.
    pub lambda: Option<f64>,
}

impl Default for AverageCaseDgp {
    fn default() -> Self {
        Self {
            factors: 5,
            n_values: vec![500, 2000],
            coefficient_seed: 2,
            noise_sd: 0.1f64.sqrt(),
            target_r2: 0.70,
            calibration_rows: 1_000_000,
            max_probability: 0.9,
            lambda: None,
        }
    }
}

/// Main effects β (one per factor) and pairwise interactions γ (d < e order),
/// all standard normal.
pub fn draw_coefficients(factors: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = stream(seed, 0);
    let beta = (0..factors).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
    let gamma = (0..factors * (factors - 1) / 2).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
    (beta, gamma)
}

/// Sufficient statistics of Y = A + s·B + ε regressed on an intercept and
/// the main-effect indicators, so R² can be evaluated for any s.
struct R2Stats {
    n: f64,
    xtx: DMatrix<f64>,
    xa: DVector<f64>,
    xb: DVector<f64>,
    xe: DVector<f64>,
    aa: f64,
    bb: f64,
    ee: f64,
    ab: f64,
    ae: f64,
    be: f64,
}

impl R2Stats {
    fn collect(beta: &[f64], gamma: &[f64], noise_sd: f64, rows: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = beta.len();
        let noise = Normal::new(0.0, noise_sd).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let k = d + 1;
        let mut s = R2Stats {
            n: rows as f64,
            xtx: DMatrix::zeros(k, k),
            xa: DVector::zeros(k),
            xb: DVector::zeros(k),
            xe: DVector::zeros(k),
            aa: 0.0,
            bb: 0.0,
            ee: 0.0,
            ab: 0.0,
            ae: 0.0,
            be: 0.0,
        };
        let mut x = vec![0.0; k];
        x[0] = 1.0;
        for _ in 0..rows {
            for v in x.iter_mut().skip(1) {
                *v = if rng.gen::<bool>() { 1.0 } else { 0.0 };
            }
            let a: f64 = (0..d).map(|j| beta[j] * x[j + 1]).sum();
            let mut b = 0.0;
            let mut idx = 0;
            for i in 0..d {
                for j in i + 1..d {
                    b += gamma[idx] * x[i + 1] * x[j + 1];
                    idx += 1;
                }
            }
            let e = noise.sample(rng);
            for i in 0..k {
                for j in 0..k {
                    s.xtx[(i, j)] += x[i] * x[j];
                }
                s.xa[i] += x[i] * a;
                s.xb[i] += x[i] * b;
                s.xe[i] += x[i] * e;
            }
            s.aa += a * a;
            s.bb += b * b;
            s.ee += e * e;
            s.ab += a * b;
            s.ae += a * e;
            s.be += b * e;
        }
        Ok(s)
    }

    fn r2(&self, scale: f64) -> f64 {
        let xy = &self.xa + &self.xb * scale + &self.xe;
        let yy = self.aa + scale * scale * self.bb + self.ee + 2.0 * scale * self.ab + 2.0 * self.ae + 2.0 * scale * self.be;
        let coef = self.xtx.clone().cholesky().map(|c| c.solve(&xy)).unwrap_or_else(|| DVector::zeros(xy.len()));
        let rss = yy - xy.dot(&coef);
        let sum_y = xy[0];
        let tss = yy - sum_y * sum_y / self.n;
        1.0 - rss / tss
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScaleCalibration {
    pub scale: f64,
    pub r2: f64,
}

/// Main-effects-only R² of the average-case DGP at a given interaction scale.
pub fn main_effects_r2(beta: &[f64], gamma: &[f64], scale: f64, noise_sd: f64, rows: usize, seed: u64) -> Result<f64> {
    let stats = R2Stats::collect(beta, gamma, noise_sd, rows, &mut stream(seed, 2))?;
    Ok(stats.r2(scale))
}

/// Bisection on the interaction scale until the main-effects-only R² hits
/// the target. Every candidate scale is evaluated on the same sample.
pub fn calibrate_interaction_scale(dgp: &AverageCaseDgp, seed: u64) -> Result<ScaleCalibration> {
    if dgp.factors < 2 {
        return Err(Error::InvalidArgument("interaction calibration needs at least two factors".into()));
    }
    let (beta, gamma) = draw_coefficients(dgp.factors, dgp.coefficient_seed);
    let stats = R2Stats::collect(&beta, &gamma, dgp.noise_sd, dgp.calibration_rows, &mut stream(seed, 1))?;
    let target = dgp.target_r2;
    if stats.r2(0.0) < target {
        return Err(Error::NumericalFailure(format!(
            "main effects explain only {:.3} of the variance without interactions; target {target} unreachable",
            stats.r2(0.0)
        )));
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while stats.r2(hi) > target {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::NumericalFailure("interaction scale diverged during calibration".into()));
        }
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if stats.r2(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let scale = 0.5 * (lo + hi);
    Ok(ScaleCalibration { scale, r2: stats.r2(scale) })
}

fn binary_design(factors: usize) -> Result<ConjointDesign> {
    ConjointDesign::binary(&vec![0.5; factors])
}

/// Baseline-coded single-outcome model: intercept 0, β on each factor's
/// first level, scale·γ on each pair of first levels.
pub fn average_case_truth(design: &ConjointDesign, beta: &[f64], gamma: &[f64], scale: f64) -> Result<OutcomeModel> {
    let mut theta = vec![0.0];
    theta.extend_from_slice(beta);
    theta.extend(gamma.iter().map(|g| g * scale));
    OutcomeModel::from_free(design.clone(), Response::Single, Coding::Baseline, theta, None)
}

fn max_level_probability(pi: &[Vec<f64>]) -> f64 {
    pi.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// λ at which the largest optimal level probability equals `target`,
/// by bisection on log λ against the closed form.
pub fn calibrate_lambda(truth: &OutcomeModel, target: f64) -> Result<f64> {
    let ok = |lambda: f64| -> bool {
        solve_binary_nonchoice(truth, lambda)
            .map(|s| s.valid && max_level_probability(&s.pi) <= target)
            .unwrap_or(false)
    };
    let mut hi = 1.0;
    while !ok(hi) {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::NumericalFailure("no lambda keeps the optimum below the probability cap".into()));
        }
    }
    let mut lo = hi / 2.0;
    while ok(lo) {
        lo /= 2.0;
        if lo < 1e-12 {
            return Ok(lo);
        }
    }
    for _ in 0..100 {
        let mid = (lo * hi).sqrt();
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AverageCaseTruth {
    pub scale: f64,
    pub r2: f64,
    pub lambda: f64,
    pub pi: Vec<Vec<f64>>,
    pub q: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct McReport<T> {
    pub truth: T,
    pub table: McTable,
}

fn average_targets(design: &ConjointDesign) -> Vec<String> {
    let mut t: Vec<String> = design
        .factors()
        .iter()
        .flat_map(|f| f.levels[..f.levels.len() - 1].iter().map(move |l| format!("pi:{}:{l}", f.name)))
        .collect();
    t.push("pi_mean".into());
    t.push("Q".into());
    t
}

/// [π non-last levels…, their mean, Q].
fn average_outputs(q: f64, pi: &ProfileDistribution) -> Vec<f64> {
    let mut out: Vec<f64> = pi.as_nested().iter().flat_map(|p| p[..p.len() - 1].to_vec()).collect();
    let mean = out.iter().sum::<f64>() / out.len() as f64;
    out.push(mean);
    out.push(q);
    out
}

fn average_replication(
    design: &ConjointDesign,
    truth: &OutcomeModel,
    noise_sd: f64,
    lambda: f64,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<RepDraw> {
    let p = design.assignment();
    let noise = Normal::new(0.0, noise_sd).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let profiles: Vec<Profile> = (0..n).map(|_| sample_profile(&p, rng)).collect();
    let y: Vec<f64> = profiles.iter().map(|t| truth.predict_single(t) + noise.sample(rng)).collect();
    let model = fit_single_outcome_model(design, &profiles, &y, None, Coding::Baseline, VcovKind::Iid)?;
    let pen = PenaltyConfig::l2(lambda);
    let cfg = AscentConfig::default();
    let est = solve_model(&model, pen, None, SolveMethod::Auto, &cfg, None)?;
    let (method, warm) = (est.method, est.a_star.clone());
    let delta = DeltaConfig { exec: Exec::Sequential, ..DeltaConfig::default() };
    let inf = delta_method_model(
        &model,
        average_targets(design),
        |m| {
            let e = solve_model(m, pen, None, method, &cfg, Some(&warm))?;
            Ok(average_outputs(e.q_value, &e.pi_star))
        },
        &delta,
    )?;
    Ok((0..inf.estimate.len()).map(|k| (inf.estimate[k], inf.se[k], inf.ci95[k][0], inf.ci95[k][1])).collect())
}

/// Average-case study: truth from the closed form at the true coefficients,
/// estimates from a fitted baseline-coded model with delta-method intervals.
pub fn run_average_case(dgp: &AverageCaseDgp, replications: usize, seed: u64, exec: Exec) -> Result<McReport<AverageCaseTruth>> {
    if replications == 0 || dgp.n_values.is_empty() {
        return Err(Error::InvalidArgument("need at least one replication and one sample size".into()));
    }
    let design = binary_design(dgp.factors)?;
    let cal = calibrate_interaction_scale(dgp, dgp.coefficient_seed)?;
    let (beta, gamma) = draw_coefficients(dgp.factors, dgp.coefficient_seed);
    let truth_model = average_case_truth(&design, &beta, &gamma, cal.scale)?;
    let lambda = match dgp.lambda {
        Some(l) => l,
        None => calibrate_lambda(&truth_model, dgp.max_probability)?,
    };
    let sol = solve_binary_nonchoice(&truth_model, lambda)?;
    let pi_true = sol
        .distribution(&design)
        .ok_or_else(|| Error::NumericalFailure("true optimum lies outside the simplex".into()))?;
    let q_true = truth_model.polynomial().value(pi_true.as_nested());
    let targets = average_targets(&design);
    let truths = average_outputs(q_true, &pi_true);
    let mut table = McTable::default();
    for (ni, &n) in dgp.n_values.iter().enumerate() {
        let reps = exec.map(replications, |r| {
            let mut rng = stream(seed, ((ni as u64 + 1) << 32) | r as u64);
            average_replication(&design, &truth_model, dgp.noise_sd, lambda, n, &mut rng)
        });
        table.rows.extend(tabulate("average", n, dgp.factors as f64, &targets, &truths, &reps));
    }
    Ok(McReport {
        truth: AverageCaseTruth {
            scale: cal.scale,
            r2: cal.r2,
            lambda,
            pi: pi_true.into_nested(),
            q: q_true,
        },
        table,
    })
}

// ---------------------------------------------------------------- adversarial

/// Logistic slopes on the female indicator (log-odds of choosing a female
/// profile over a male one) for each group and stage, plus the penalty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarialConfig {
    pub primary_r: f64,
    pub primary_d: f64,
    pub general_r: f64,
    pub general_d: f64,
    pub lambda: f64,
}

/// Simulation settings shipped with the repository.
pub const ADVERSARIAL_CONFIG_JSON: &str = include_str!("../config/adversarial_sim.json");

impl Default for AdversarialConfig {
    fn default() -> Self {
        serde_json::from_str(ADVERSARIAL_CONFIG_JSON).expect("bundled simulation config parses")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdversarialDgp {
    pub p_r_values: Vec<f64>,
    pub n_values: Vec<usize>,
    pub config: AdversarialConfig,
    pub truth_resolution: f64,
}

impl Default for AdversarialDgp {
    fn default() -> Self {
        Self {
            p_r_values: vec![0.2, 0.3, 0.5, 0.65, 0.8],
            n_values: vec![1000, 5000, 10000],
            config: AdversarialConfig::default(),
            truth_resolution: 0.005,
        }
    }
}

/// The single binary factor of the adversarial study.
pub fn gender_design() -> ConjointDesign {
    ConjointDesign::new(vec![FactorSpec {
        name: "gender".into(),
        levels: vec!["male".into(), "female".into()],
        assignment_probs: vec![0.5, 0.5],
    }])
    .expect("valid design")
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn female(t: &Profile) -> f64 {
    if t.0[0] == 1 {
        1.0
    } else {
        0.0
    }
}

/// Pr(a chosen over b) under a logistic slope on the female indicator.
fn choice_prob(slope: f64, a: &Profile, b: &Profile) -> f64 {
    logistic(slope * (female(a) - female(b)))
}

/// Sum-to-zero linear model reproducing the logistic choice probabilities
/// exactly: with one binary factor the difference takes three values, so
/// the linear form is saturated.
pub fn linear_equivalent(design: &ConjointDesign, slope: f64) -> Result<OutcomeModel> {
    // Pr(male over female) = 0.5 + 2 · main(male).
    let main_male = (logistic(-slope) - 0.5) / 2.0;
    OutcomeModel::from_free(design.clone(), Response::ForcedChoice, Coding::SumToZero, vec![0.5, main_male], None)
}

pub fn true_institution(cfg: &AdversarialConfig, p_r: f64) -> Result<InstitutionSpec> {
    let d = gender_design();
    InstitutionSpec::new(
        p_r,
        linear_equivalent(&d, cfg.primary_r)?,
        linear_equivalent(&d, cfg.primary_d)?,
        linear_equivalent(&d, cfg.general_r)?,
        linear_equivalent(&d, cfg.general_d)?,
    )
}

/// Respondents in R's group with probability p_R; each answers one primary
/// task in their own party's primary (party profile from the design against
/// a uniform challenger) and one general-election task.
pub fn simulate_adversarial_data(cfg: &AdversarialConfig, p_r: f64, n: usize, rng: &mut ChaCha8Rng) -> Result<ForcedChoiceDataset> {
    let design = gender_design();
    let p = design.assignment();
    let u = ProfileDistribution::uniform(&design);
    let mut records = Vec::with_capacity(2 * n);
    for i in 0..n {
        let is_r = rng.gen::<f64>() < p_r;
        let (group, prim, gen) = if is_r {
            ("R", cfg.primary_r, cfg.general_r)
        } else {
            ("D", cfg.primary_d, cfg.general_d)
        };
        let id = format!("r{i}");
        let a = sample_profile(&p, rng);
        let b = sample_profile(&u, rng);
        let chose_a = rng.gen::<f64>() < choice_prob(prim, &a, &b);
        records.push(TaskRecord {
            respondent_id: id.clone(),
            task_id: "1".into(),
            profile_a: a,
            profile_b: b,
            chose_a,
            group: group.into(),
            stage: Stage::Primary,
        });
        let a = sample_profile(&p, rng);
        let b = sample_profile(&p, rng);
        let chose_a = rng.gen::<f64>() < choice_prob(gen, &a, &b);
        records.push(TaskRecord {
            respondent_id: id,
            task_id: "2".into(),
            profile_a: a,
            profile_b: b,
            chose_a,
            group: group.into(),
            stage: Stage::General,
        });
    }
    ForcedChoiceDataset::new(design, records)
}

/// Fits the four stage/group models (sum-to-zero, respondent-clustered) and
/// assembles the institution with R as side A.
pub fn estimate_institution(data: &ForcedChoiceDataset, p_r: f64) -> Result<InstitutionSpec> {
    let fit = |group: &str, stage: Stage| {
        fit_outcome_model(
            data,
            &FitSpec {
                coding: Coding::SumToZero,
                vcov: VcovKind::Cluster,
                group: Some(group.into()),
                stage: Some(stage),
            },
        )
    };
    InstitutionSpec::new(
        p_r,
        fit("R", Stage::Primary)?,
        fit("D", Stage::Primary)?,
        fit("R", Stage::General)?,
        fit("D", Stage::General)?,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AdversarialTruth {
    pub p_r: f64,
    pub pi_r: Vec<Vec<f64>>,
    pub pi_d: Vec<Vec<f64>>,
    pub payoff: f64,
    pub grid_pi_r: Vec<Vec<f64>>,
    pub grid_pi_d: Vec<Vec<f64>>,
}

/// Grid oracle at the configured resolution, refined by ascent–descent
/// started from the grid point.
pub fn adversarial_truth(cfg: &AdversarialConfig, p_r: f64, resolution: f64, exec: Exec) -> Result<AdversarialTruth> {
    let inst = true_institution(cfg, p_r)?;
    let pen = PenaltyConfig::l2(cfg.lambda);
    let grid = grid_oracle(&inst, pen, resolution, exec)?;
    // A grid point on the simplex boundary has no log-ratio form; start at p then.
    let start = SoftmaxParams::from_distribution(&grid.pi_a).and_then(|a| Ok((a, SoftmaxParams::from_distribution(&grid.pi_b)?)));
    let refined = solve_equilibrium(&inst, pen, &GameConfig::default(), start.as_ref().ok().map(|(a, b)| (a, b)))?;
    if !refined.converged {
        return Err(Error::NumericalFailure(format!("true equilibrium at p_R = {p_r} did not converge")));
    }
    Ok(AdversarialTruth {
        p_r,
        pi_r: refined.pi_a.into_nested(),
        pi_d: refined.pi_b.into_nested(),
        payoff: refined.payoff,
        grid_pi_r: grid.pi_a.into_nested(),
        grid_pi_d: grid.pi_b.into_nested(),
    })
}

/// Largest equilibrium level probability over a set of p_R values.
pub fn max_equilibrium_probability(cfg: &AdversarialConfig, p_r_values: &[f64]) -> Result<f64> {
    let mut best = f64::NEG_INFINITY;
    for &p_r in p_r_values {
        let inst = true_institution(cfg, p_r)?;
        let eq = solve_equilibrium(&inst, PenaltyConfig::l2(cfg.lambda), &GameConfig::default(), None)?;
        best = best.max(max_level_probability(eq.pi_a.as_nested())).max(max_level_probability(eq.pi_b.as_nested()));
    }
    Ok(best)
}

/// λ at which the largest equilibrium level probability across `p_r_values`
/// equals `target`, by bisection on log λ.
pub fn calibrate_adversarial_lambda(cfg: &AdversarialConfig, p_r_values: &[f64], target: f64) -> Result<f64> {
    let ok = |lambda: f64| -> Result<bool> {
        let c = AdversarialConfig { lambda, ..cfg.clone() };
        Ok(max_equilibrium_probability(&c, p_r_values)? <= target)
    };
    let (mut lo, mut hi) = (1e-4, 10.0);
    if !ok(hi)? || ok(lo)? {
        return Err(Error::NumericalFailure("probability cap not bracketed by lambda in [1e-4, 10]".into()));
    }
    for _ in 0..60 {
        let mid = (lo * hi).sqrt();
        if ok(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

pub const ADVERSARIAL_TARGETS: [&str; 3] = ["pi_R:gender:male", "pi_D:gender:male", "payoff"];

fn adversarial_replication(cfg: &AdversarialConfig, p_r: f64, n: usize, rng: &mut ChaCha8Rng) -> Result<RepDraw> {
    let data = simulate_adversarial_data(cfg, p_r, n, rng)?;
    let inst = estimate_institution(&data, p_r)?;
    let delta = DeltaConfig { exec: Exec::Sequential, ..DeltaConfig::default() };
    let (_, inf) = equilibrium_with_inference(&inst, PenaltyConfig::l2(cfg.lambda), &GameConfig::default(), &delta)?;
    // Outputs are [π_R male, π_R female, π_D male, π_D female, payoff].
    Ok([0usize, 2, 4]
        .iter()
        .map(|&k| (inf.estimate[k], inf.se[k], inf.ci95[k][0], inf.ci95[k][1]))
        .collect())
}

/// Adversarial study over the p_R × n grid.
pub fn run_adversarial(dgp: &AdversarialDgp, replications: usize, seed: u64, exec: Exec) -> Result<McReport<Vec<AdversarialTruth>>> {
    if replications == 0 || dgp.n_values.is_empty() || dgp.p_r_values.is_empty() {
        return Err(Error::InvalidArgument("need replications, sample sizes and p_R values".into()));
    }
    if dgp.p_r_values.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
        return Err(Error::InvalidArgument("p_R values must lie in (0, 1)".into()));
    }
    let targets: Vec<String> = ADVERSARIAL_TARGETS.iter().map(|s| s.to_string()).collect();
    let mut truths = Vec::new();
    let mut table = McTable::default();
    for (pi, &p_r) in dgp.p_r_values.iter().enumerate() {
        let truth = adversarial_truth(&dgp.config, p_r, dgp.truth_resolution, exec)?;
        let truth_vals = [truth.pi_r[0][0], truth.pi_d[0][0], truth.payoff];
        for (ni, &n) in dgp.n_values.iter().enumerate() {
            let cell = ((pi as u64) << 16 | ni as u64) + 1;
            let reps = exec.map(replications, |r| {
                let mut rng = stream(seed, (cell << 32) | r as u64);
                adversarial_replication(&dgp.config, p_r, n, &mut rng)
            });
            table.rows.extend(tabulate("adversarial", n, p_r, &targets, &truth_vals, &reps));
        }
        truths.push(truth);
    }
    Ok(McReport { truth: truths, table })
}
