//! Two-stage zero-sum candidate-selection game: each side's profile must win
//! its own primary against a challenger, then the nominees meet in a general
//! election decided by a weighted mix of the two voter groups.
//!
//! A's nominee is its drawn profile if that profile beats the challenger in
//! A's primary, otherwise the challenger. The payoff is the probability that
//! A's nominee beats B's nominee: ρ_A′ G ρ_B over the enumerated support.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ascent::PenaltyConfig;
use crate::design::{chain_softmax, ConjointDesign, Profile, ProfileDistribution, SoftmaxParams, DEFAULT_SUPPORT_CAP};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::OutcomeModel;

/// Largest number of strategy pairs the grid oracle will scan.
pub const GRID_PAIR_CAP: u128 = 1_000_000;
/// Improvement below which a unilateral deviation does not count.
pub const CERTIFY_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct InstitutionSpec {
    pub design: ConjointDesign,
    /// Share of the electorate in A's group and in B's group.
    pub weight_a: f64,
    pub weight_b: f64,
    pub challenger_a: ProfileDistribution,
    pub challenger_b: ProfileDistribution,
    /// Choice models of A's voters in A's primary and of B's voters in B's.
    pub primary_a: OutcomeModel,
    pub primary_b: OutcomeModel,
    /// General-election choice models of A's voters and of B's voters.
    pub general_a: OutcomeModel,
    pub general_b: OutcomeModel,
}

impl InstitutionSpec {
    /// Uniform challengers; weights must be nonnegative and sum to 1.
    pub fn new(
        weight_a: f64,
        primary_a: OutcomeModel,
        primary_b: OutcomeModel,
        general_a: OutcomeModel,
        general_b: OutcomeModel,
    ) -> Result<Self> {
        let design = primary_a.design().clone();
        let u = ProfileDistribution::uniform(&design);
        let spec = Self {
            weight_a,
            weight_b: 1.0 - weight_a,
            challenger_a: u.clone(),
            challenger_b: u,
            design,
            primary_a,
            primary_b,
            general_a,
            general_b,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b) = (self.weight_a, self.weight_b);
        if !(a >= 0.0 && b >= 0.0 && ((a + b) - 1.0).abs() <= 1e-9) {
            return Err(Error::InvalidArgument(format!("group weights {a}, {b} must be nonnegative and sum to 1")));
        }
        for m in [&self.primary_a, &self.primary_b, &self.general_a, &self.general_b] {
            if m.design().level_counts() != self.design.level_counts() {
                return Err(Error::ShapeMismatch("all institution models must share one design".into()));
            }
        }
        for c in [&self.challenger_a, &self.challenger_b] {
            if !c.matches(&self.design) {
                return Err(Error::ShapeMismatch("challenger distribution does not match the design".into()));
            }
        }
        Ok(())
    }

    /// The same institution with the two sides' roles exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            design: self.design.clone(),
            weight_a: self.weight_b,
            weight_b: self.weight_a,
            challenger_a: self.challenger_b.clone(),
            challenger_b: self.challenger_a.clone(),
            primary_a: self.primary_b.clone(),
            primary_b: self.primary_a.clone(),
            general_a: self.general_b.clone(),
            general_b: self.general_a.clone(),
        }
    }
}

/// Model predictions over the support, clipped to [0, 1]; they do not depend
/// on the strategies.
#[derive(Clone, Debug)]
pub struct GameTables {
    support: Vec<Profile>,
    counts: Vec<usize>,
    /// [t][t']: Pr(t beats t') in A's primary.
    primary_a: Vec<Vec<f64>>,
    primary_b: Vec<Vec<f64>>,
    /// [t][s]: Pr(A's nominee t beats B's nominee s), group-weighted.
    general: Vec<Vec<f64>>,
    chal_a: Vec<f64>,
    chal_b: Vec<f64>,
}

fn clip01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

impl GameTables {
    pub fn new(inst: &InstitutionSpec, exec: Exec) -> Result<Self> {
        inst.validate()?;
        let size = inst.design.support_size_exact();
        let cap = DEFAULT_SUPPORT_CAP as u128;
        if size * size > cap {
            return Err(Error::SupportTooLarge {
                size: size * size,
                cap: DEFAULT_SUPPORT_CAP,
            });
        }
        let support = inst.design.enumerate_support()?;
        let n = support.len();
        let table = |m: &OutcomeModel| -> Vec<Vec<f64>> {
            exec.map(n, |i| (0..n).map(|j| clip01(m.choice_probability(&support[i], &support[j]))).collect())
        };
        let ga = table(&inst.general_a);
        let gb = table(&inst.general_b);
        let general = ga
            .iter()
            .zip(&gb)
            .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| inst.weight_a * x + inst.weight_b * y).collect())
            .collect();
        Ok(Self {
            primary_a: table(&inst.primary_a),
            primary_b: table(&inst.primary_b),
            general,
            chal_a: inst.challenger_a.support_probabilities(&support),
            chal_b: inst.challenger_b.support_probabilities(&support),
            counts: inst.design.level_counts(),
            support,
        })
    }

    pub fn support(&self) -> &[Profile] {
        &self.support
    }

    /// Nominee distribution: ρ(t) = x(t) u(t) + c(t) Σ_s x(s) (1 − P(s, t)),
    /// where u(t) = Σ_t' c(t') P(t, t') is t's primary win probability.
    fn nominee(x: &[f64], primary: &[Vec<f64>], chal: &[f64]) -> Vec<f64> {
        let n = x.len();
        (0..n)
            .map(|t| {
                let u: f64 = (0..n).map(|s| chal[s] * primary[t][s]).sum();
                let lose: f64 = (0..n).map(|s| x[s] * (1.0 - primary[s][t])).sum();
                x[t] * u + chal[t] * lose
            })
            .collect()
    }

    /// ∂(g′ρ)/∂x(s) = u(s) g(s) + Σ_t c(t) (1 − P(s, t)) g(t).
    fn nominee_pullback(g: &[f64], primary: &[Vec<f64>], chal: &[f64]) -> Vec<f64> {
        let n = g.len();
        (0..n)
            .map(|s| {
                let u: f64 = (0..n).map(|t| chal[t] * primary[s][t]).sum();
                let rest: f64 = (0..n).map(|t| chal[t] * (1.0 - primary[s][t]) * g[t]).sum();
                u * g[s] + rest
            })
            .collect()
    }

    fn nominees(&self, xa: &[f64], xb: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (
            Self::nominee(xa, &self.primary_a, &self.chal_a),
            Self::nominee(xb, &self.primary_b, &self.chal_b),
        )
    }

    /// Payoff from profile probabilities over the support.
    pub fn payoff_profiles(&self, xa: &[f64], xb: &[f64]) -> f64 {
        let (ra, rb) = self.nominees(xa, xb);
        ra.iter()
            .zip(&self.general)
            .map(|(r, row)| r * row.iter().zip(&rb).map(|(g, q)| g * q).sum::<f64>())
            .sum()
    }

    /// Payoff gradients with respect to the profile probabilities of each side.
    pub fn payoff_profile_gradients(&self, xa: &[f64], xb: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (ra, rb) = self.nominees(xa, xb);
        let n = ra.len();
        let g_a: Vec<f64> = (0..n).map(|t| (0..n).map(|s| self.general[t][s] * rb[s]).sum()).collect();
        let h_b: Vec<f64> = (0..n).map(|s| (0..n).map(|t| self.general[t][s] * ra[t]).sum()).collect();
        (
            Self::nominee_pullback(&g_a, &self.primary_a, &self.chal_a),
            Self::nominee_pullback(&h_b, &self.primary_b, &self.chal_b),
        )
    }

    pub fn payoff(&self, pi_a: &ProfileDistribution, pi_b: &ProfileDistribution) -> f64 {
        self.payoff_profiles(&pi_a.support_probabilities(&self.support), &pi_b.support_probabilities(&self.support))
    }

    /// Pulls a gradient over profile probabilities back to factor-level probabilities.
    fn to_levels(&self, pi: &[Vec<f64>], gx: &[f64]) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = self.counts.iter().map(|&l| vec![0.0; l]).collect();
        let nd = pi.len();
        let mut prefix = vec![1.0; nd + 1];
        let mut suffix = vec![1.0; nd + 1];
        for (t, g) in self.support.iter().zip(gx) {
            let l = &t.0;
            for d in 0..nd {
                prefix[d + 1] = prefix[d] * pi[d][l[d]];
            }
            for d in (0..nd).rev() {
                suffix[d] = suffix[d + 1] * pi[d][l[d]];
            }
            for d in 0..nd {
                out[d][l[d]] += g * prefix[d] * suffix[d + 1];
            }
        }
        out
    }

    /// Payoff gradients with respect to factor-level probabilities.
    pub fn payoff_level_gradients(&self, pi_a: &ProfileDistribution, pi_b: &ProfileDistribution) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let (ga, gb) = self.payoff_profile_gradients(
            &pi_a.support_probabilities(&self.support),
            &pi_b.support_probabilities(&self.support),
        );
        (self.to_levels(pi_a.as_nested(), &ga), self.to_levels(pi_b.as_nested(), &gb))
    }
}

/// Penalized game Φ = payoff − penalty(π_A) + penalty(π_B) over softmax
/// parameters: A maximizes, B minimizes.
pub struct PenalizedGame<'a> {
    pub tables: &'a GameTables,
    pub design: &'a ConjointDesign,
    pub penalty: PenaltyConfig,
}

impl PenalizedGame<'_> {
    fn dist(&self, a: &[f64]) -> ProfileDistribution {
        SoftmaxParams::from_flat(a, &self.tables.counts)
            .map(|s| s.to_distribution())
            .unwrap_or_else(|_| ProfileDistribution::from_raw(self.tables.counts.iter().map(|&l| vec![f64::NAN; l]).collect()))
    }

    pub fn value_dist(&self, pa: &ProfileDistribution, pb: &ProfileDistribution) -> f64 {
        self.tables.payoff(pa, pb) - self.penalty.value(self.design, pa.as_nested())
            + self.penalty.value(self.design, pb.as_nested())
    }

    pub fn value(&self, a: &[f64], b: &[f64]) -> f64 {
        self.value_dist(&self.dist(a), &self.dist(b))
    }

    /// (∂Φ/∂a_A, ∂Φ/∂a_B).
    pub fn gradients(&self, a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (pa, pb) = (self.dist(a), self.dist(b));
        let (mut ga, mut gb) = self.tables.payoff_level_gradients(&pa, &pb);
        let qa = self.penalty.gradient(self.design, pa.as_nested());
        let qb = self.penalty.gradient(self.design, pb.as_nested());
        for (g, q) in ga.iter_mut().flatten().zip(qa.iter().flatten()) {
            *g -= q;
        }
        for (g, q) in gb.iter_mut().flatten().zip(qb.iter().flatten()) {
            *g += q;
        }
        (chain_softmax(pa.as_nested(), &ga), chain_softmax(pb.as_nested(), &gb))
    }
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Exact payoff of a strategy pair.
pub fn payoff(pi_a: &ProfileDistribution, pi_b: &ProfileDistribution, inst: &InstitutionSpec) -> Result<f64> {
    if !pi_a.matches(&inst.design) || !pi_b.matches(&inst.design) {
        return Err(Error::ShapeMismatch("strategies do not match the institution's design".into()));
    }
    Ok(GameTables::new(inst, Exec::Sequential)?.payoff(pi_a, pi_b))
}

/// Unpenalized payoff gradients over each side's softmax parameters.
pub fn payoff_gradient(a_a: &SoftmaxParams, a_b: &SoftmaxParams, inst: &InstitutionSpec) -> Result<(Vec<f64>, Vec<f64>)> {
    let pa = crate::design::softmax_to_distribution(a_a, &inst.design)?;
    let pb = crate::design::softmax_to_distribution(a_b, &inst.design)?;
    let tables = GameTables::new(inst, Exec::Sequential)?;
    let (ga, gb) = tables.payoff_level_gradients(&pa, &pb);
    Ok((chain_softmax(pa.as_nested(), &ga), chain_softmax(pb.as_nested(), &gb)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GameConfig {
    pub max_iterations: usize,
    pub tolerance: f64,
    pub initial_step: f64,
    pub max_halvings: usize,
    /// Trailing window for the oscillation diagnostic.
    pub window: usize,
    /// Payoff variance over the window above which the run counts as oscillating.
    pub oscillation_threshold: f64,
    /// Newton refinement on the stacked first-order conditions.
    pub polish: bool,
}

impl Default for GameConfig {
    fn default() -> Self {
        Self {
            max_iterations: 20_000,
            tolerance: 1e-5,
            initial_step: 0.1,
            max_halvings: 40,
            window: 200,
            oscillation_threshold: 1e-10,
            polish: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridDiagnostics {
    pub resolution: f64,
    pub max_min: f64,
    pub min_max: f64,
    /// Largest payoff change between neighbouring grid cells.
    pub slack: f64,
    /// max-min and min-max agree within the slack.
    pub minimax_ok: bool,
    pub candidates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeviationReport {
    pub resolution: f64,
    /// Best penalized-payoff gain A can reach by a unilateral grid move.
    pub gain_a: f64,
    /// Best gain (payoff reduction) available to B.
    pub gain_b: f64,
    pub certified: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquilibriumResult {
    pub pi_a: ProfileDistribution,
    pub pi_b: ProfileDistribution,
    /// Unpenalized probability that A's nominee wins.
    pub payoff: f64,
    pub penalized_payoff: f64,
    /// Sup norms of ∂Φ/∂a_A and ∂Φ/∂a_B; NaN on the simplex boundary.
    pub gradient_norm_a: f64,
    pub gradient_norm_b: f64,
    pub iterations: usize,
    pub converged: bool,
    pub oscillating: bool,
    pub payoff_window_variance: f64,
    pub grid: Option<GridDiagnostics>,
    pub deviation: Option<DeviationReport>,
}

fn log_ratio(pi: &ProfileDistribution) -> Option<Vec<f64>> {
    SoftmaxParams::from_distribution(pi).ok().map(|s| s.flatten())
}

fn finish_result(game: &PenalizedGame<'_>, pa: ProfileDistribution, pb: ProfileDistribution) -> EquilibriumResult {
    let (na, nb) = match (log_ratio(&pa), log_ratio(&pb)) {
        (Some(a), Some(b)) => {
            let (ga, gb) = game.gradients(&a, &b);
            (sup_norm(&ga), sup_norm(&gb))
        }
        _ => (f64::NAN, f64::NAN),
    };
    EquilibriumResult {
        payoff: game.tables.payoff(&pa, &pb),
        penalized_payoff: game.value_dist(&pa, &pb),
        pi_a: pa,
        pi_b: pb,
        gradient_norm_a: na,
        gradient_norm_b: nb,
        iterations: 0,
        converged: false,
        oscillating: false,
        payoff_window_variance: 0.0,
        grid: None,
        deviation: None,
    }
}

/// Newton steps on F(a, b) = (∂Φ/∂a, ∂Φ/∂b) with a finite-difference Jacobian,
/// accepted while ‖F‖∞ decreases.
fn polish_saddle(game: &PenalizedGame<'_>, a: &mut Vec<f64>, b: &mut Vec<f64>) {
    let ka = a.len();
    let field = |z: &[f64]| {
        let (ga, gb) = game.gradients(&z[..ka], &z[ka..]);
        let mut f = ga;
        f.extend(gb);
        f
    };
    let mut z: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
    let mut f = field(&z);
    for _ in 0..30 {
        let fn0 = sup_norm(&f);
        if fn0 == 0.0 || !fn0.is_finite() {
            break;
        }
        let k = z.len();
        let mut jac = DMatrix::zeros(k, k);
        let mut t = z.clone();
        for j in 0..k {
            let h = 1e-5 * (1.0 + z[j].abs());
            t[j] = z[j] + h;
            let up = field(&t);
            t[j] = z[j] - h;
            let dn = field(&t);
            let w = (z[j] + h) - (z[j] - h);
            t[j] = z[j];
            for i in 0..k {
                jac[(i, j)] = (up[i] - dn[i]) / w;
            }
        }
        let Some(dz) = jac.lu().solve(&DVector::from_column_slice(&f)) else {
            break;
        };
        let mut improved = false;
        let mut scale = 1.0;
        for _ in 0..8 {
            let cand: Vec<f64> = z.iter().zip(dz.iter()).map(|(x, d)| x - scale * d).collect();
            let cf = field(&cand);
            if sup_norm(&cf) < fn0 {
                z = cand;
                f = cf;
                improved = true;
                break;
            }
            scale /= 2.0;
        }
        if !improved {
            break;
        }
    }
    a.copy_from_slice(&z[..ka]);
    b.copy_from_slice(&z[ka..]);
}

/// Simultaneous gradient ascent (A) and descent (B) on the penalized game,
/// each side with its own halving line search. Starts from the design
/// distribution unless `start` is given. Non-convergence is reported in the
/// result, not as an error.
pub fn solve_equilibrium(
    inst: &InstitutionSpec,
    penalty: PenaltyConfig,
    cfg: &GameConfig,
    start: Option<(&SoftmaxParams, &SoftmaxParams)>,
) -> Result<EquilibriumResult> {
    let tables = GameTables::new(inst, Exec::Sequential)?;
    solve_with_tables(&tables, inst, penalty, cfg, start)
}

/// [`solve_equilibrium`] reusing precomputed tables.
pub fn solve_with_tables(
    tables: &GameTables,
    inst: &InstitutionSpec,
    penalty: PenaltyConfig,
    cfg: &GameConfig,
    start: Option<(&SoftmaxParams, &SoftmaxParams)>,
) -> Result<EquilibriumResult> {
    if cfg.max_iterations == 0 || !(cfg.tolerance > 0.0) || !(cfg.initial_step > 0.0) {
        return Err(Error::InvalidArgument("game solver needs positive iterations, tolerance and step".into()));
    }
    let game = PenalizedGame { tables, design: &inst.design, penalty };
    let (mut a, mut b) = match start {
        Some((sa, sb)) => (sa.flatten(), sb.flatten()),
        None => {
            let p = log_ratio(&inst.design.assignment()).unwrap_or_else(|| SoftmaxParams::zeros(&inst.design).flatten());
            (p.clone(), p)
        }
    };
    if a.len() != dim(&inst.design) || b.len() != a.len() {
        return Err(Error::ShapeMismatch("start parameters do not match the design".into()));
    }
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut polished = false;
    while iterations < cfg.max_iterations {
        let (ga, gb) = game.gradients(&a, &b);
        if ga.iter().chain(&gb).any(|g| !g.is_finite()) {
            return Err(Error::NumericalFailure(format!("non-finite game gradient at iteration {iterations}")));
        }
        let worst = sup_norm(&ga).max(sup_norm(&gb));
        if worst <= cfg.tolerance {
            converged = true;
            break;
        }
        if cfg.polish && !polished && worst < 1e-3 {
            polish_saddle(&game, &mut a, &mut b);
            polished = true;
            continue;
        }
        let v = game.value(&a, &b);
        let step_a = line_search(cfg, |g| game.value(&axpy(&a, g, &ga), &b) > v);
        let step_b = line_search(cfg, |g| game.value(&a, &axpy(&b, -g, &gb)) < v);
        a = axpy(&a, step_a, &ga);
        b = axpy(&b, -step_b, &gb);
        history.push(game.value(&a, &b));
        iterations += 1;
        if step_a == 0.0 && step_b == 0.0 {
            break;
        }
    }
    if cfg.polish {
        polish_saddle(&game, &mut a, &mut b);
    }
    let (ga, gb) = game.gradients(&a, &b);
    converged = converged || sup_norm(&ga).max(sup_norm(&gb)) <= cfg.tolerance;
    let tail = &history[history.len().saturating_sub(cfg.window)..];
    let variance = if tail.len() > 1 {
        let m = tail.iter().sum::<f64>() / tail.len() as f64;
        tail.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (tail.len() - 1) as f64
    } else {
        0.0
    };
    let counts = inst.design.level_counts();
    let pa = SoftmaxParams::from_flat(&a, &counts)?.to_distribution();
    let pb = SoftmaxParams::from_flat(&b, &counts)?.to_distribution();
    let mut res = finish_result(&game, pa, pb);
    res.iterations = iterations;
    res.converged = converged;
    res.payoff_window_variance = variance;
    res.oscillating = !converged && variance > cfg.oscillation_threshold;
    Ok(res)
}

fn dim(design: &ConjointDesign) -> usize {
    design.level_counts().iter().map(|l| l - 1).sum()
}

fn axpy(x: &[f64], s: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(a, b)| a + s * b).collect()
}

/// First step in γ₀, γ₀/2, … accepted by `improves`, or 0.
fn line_search(cfg: &GameConfig, improves: impl Fn(f64) -> bool) -> f64 {
    let mut g = cfg.initial_step;
    for _ in 0..=cfg.max_halvings {
        if improves(g) {
            return g;
        }
        g /= 2.0;
    }
    0.0
}

/// Points of one simplex grid with `m` units over `l` levels, lexicographic.
fn compositions(m: usize, l: usize) -> Vec<Vec<usize>> {
    if l == 1 {
        return vec![vec![m]];
    }
    let mut out = Vec::new();
    for first in (0..=m).rev() {
        for mut rest in compositions(m - first, l - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

fn binom(n: u128, k: u128) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) / (i + 1))
}

/// One side's strategy grid: the product of per-factor simplex grids.
struct StrategyGrid {
    units: Vec<Vec<Vec<usize>>>,
    dists: Vec<ProfileDistribution>,
}

impl StrategyGrid {
    fn new(design: &ConjointDesign, m: usize) -> Self {
        let per: Vec<Vec<Vec<usize>>> = design.level_counts().iter().map(|&l| compositions(m, l)).collect();
        let mut units: Vec<Vec<Vec<usize>>> = vec![Vec::new()];
        for f in &per {
            units = units
                .into_iter()
                .flat_map(|prefix| {
                    f.iter().map(move |c| {
                        let mut p = prefix.clone();
                        p.push(c.clone());
                        p
                    })
                })
                .collect();
        }
        let dists = units
            .iter()
            .map(|u| {
                ProfileDistribution::from_raw(
                    u.iter().map(|f| f.iter().map(|&k| k as f64 / m as f64).collect()).collect(),
                )
            })
            .collect();
        Self { units, dists }
    }

    fn size_exact(design: &ConjointDesign, m: usize) -> u128 {
        design
            .level_counts()
            .iter()
            .map(|&l| binom((m + l - 1) as u128, (l - 1) as u128))
            .product()
    }

    /// Index pairs that differ by moving one unit between two levels of one factor.
    fn neighbours(&self) -> Vec<(usize, usize)> {
        let index: HashMap<&Vec<Vec<usize>>, usize> = self.units.iter().enumerate().map(|(i, u)| (u, i)).collect();
        let mut out = Vec::new();
        for (i, u) in self.units.iter().enumerate() {
            for d in 0..u.len() {
                for from in 0..u[d].len() {
                    if u[d][from] == 0 {
                        continue;
                    }
                    for to in 0..u[d].len() {
                        if to == from {
                            continue;
                        }
                        let mut v = u.clone();
                        v[d][from] -= 1;
                        v[d][to] += 1;
                        if let Some(&j) = index.get(&v) {
                            if j > i {
                                out.push((i, j));
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

fn grid_units(resolution: f64) -> Result<usize> {
    if !(resolution > 0.0 && resolution <= 0.5) {
        return Err(Error::InvalidArgument(format!("grid resolution {resolution} must lie in (0, 0.5]")));
    }
    let m = (1.0 / resolution).round();
    if ((1.0 / m) - resolution).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("grid resolution {resolution} must divide 1")));
    }
    Ok(m as usize)
}

fn l2_to(pi: &ProfileDistribution, p: &ProfileDistribution) -> f64 {
    pi.l2_distance_sq(p).sqrt()
}

/// Penalized payoff over every grid pair; rows are A's strategies.
fn payoff_matrix(game: &PenalizedGame<'_>, grid: &StrategyGrid, exec: Exec) -> Vec<Vec<f64>> {
    let t = game.tables;
    let xs: Vec<Vec<f64>> = grid.dists.iter().map(|d| d.support_probabilities(&t.support)).collect();
    let ra: Vec<Vec<f64>> = xs.iter().map(|x| GameTables::nominee(x, &t.primary_a, &t.chal_a)).collect();
    let rb: Vec<Vec<f64>> = xs.iter().map(|x| GameTables::nominee(x, &t.primary_b, &t.chal_b)).collect();
    let pens: Vec<f64> = grid.dists.iter().map(|d| game.penalty.value(game.design, d.as_nested())).collect();
    let n = t.support.len();
    exec.map(grid.dists.len(), |i| {
        let left: Vec<f64> = (0..n).map(|s| (0..n).map(|u| ra[i][u] * t.general[u][s]).sum()).collect();
        rb.iter()
            .enumerate()
            .map(|(j, r)| left.iter().zip(r).map(|(a, b)| a * b).sum::<f64>() - pens[i] + pens[j])
            .collect()
    })
}

/// Best-response scan over the discretized strategy product. Among pairs
/// that neither side can improve by more than the max-min/min-max gap, the
/// one closest to the design distribution (‖π_A − p‖ + ‖π_B − p‖) wins.
pub fn grid_oracle(inst: &InstitutionSpec, penalty: PenaltyConfig, resolution: f64, exec: Exec) -> Result<EquilibriumResult> {
    let m = grid_units(resolution)?;
    let side = StrategyGrid::size_exact(&inst.design, m);
    if side.saturating_mul(side) > GRID_PAIR_CAP {
        return Err(Error::GridTooLarge {
            size: side.saturating_mul(side),
            cap: GRID_PAIR_CAP,
        });
    }
    let tables = GameTables::new(inst, exec)?;
    let game = PenalizedGame { tables: &tables, design: &inst.design, penalty };
    let grid = StrategyGrid::new(&inst.design, m);
    let mat = payoff_matrix(&game, &grid, exec);
    let g = grid.dists.len();
    let row_min: Vec<f64> = mat.iter().map(|r| r.iter().copied().fold(f64::INFINITY, f64::min)).collect();
    let col_max: Vec<f64> = (0..g).map(|j| (0..g).map(|i| mat[i][j]).fold(f64::NEG_INFINITY, f64::max)).collect();
    let max_min = row_min.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_max = col_max.iter().copied().fold(f64::INFINITY, f64::min);
    let scale = mat.iter().flatten().fold(1.0f64, |s, v| s.max(v.abs()));
    let tie = 1e-12 * scale;
    let gap = (min_max - max_min).max(0.0) + tie;

    let neighbours = grid.neighbours();
    let mut slack = 0.0f64;
    for &(i, k) in &neighbours {
        for j in 0..g {
            slack = slack.max((mat[i][j] - mat[k][j]).abs()).max((mat[j][i] - mat[j][k]).abs());
        }
    }

    let p = inst.design.assignment();
    let dist_p: Vec<f64> = grid.dists.iter().map(|d| l2_to(d, &p)).collect();
    let mut best: Option<(f64, usize, usize)> = None;
    let mut candidates = 0;
    for i in 0..g {
        for j in 0..g {
            let v = mat[i][j];
            if col_max[j] - v <= gap && v - row_min[i] <= gap {
                candidates += 1;
                let score = dist_p[i] + dist_p[j];
                if best.is_none_or(|(s, _, _)| score < s - tie) {
                    best = Some((score, i, j));
                }
            }
        }
    }
    let (_, i, j) = best.ok_or_else(|| Error::NumericalFailure("grid oracle found no equilibrium candidate".into()))?;
    let mut res = finish_result(&game, grid.dists[i].clone(), grid.dists[j].clone());
    res.converged = true;
    res.grid = Some(GridDiagnostics {
        resolution,
        max_min,
        min_max,
        slack,
        minimax_ok: min_max - max_min <= slack + tie,
        candidates,
    });
    Ok(res)
}

/// Largest unilateral improvement each side can find on the grid, measured
/// on the penalized payoff each side optimizes.
pub fn deviation_check(
    result: &EquilibriumResult,
    inst: &InstitutionSpec,
    penalty: PenaltyConfig,
    resolution: f64,
    exec: Exec,
) -> Result<DeviationReport> {
    let m = grid_units(resolution)?;
    let side = StrategyGrid::size_exact(&inst.design, m);
    if side > GRID_PAIR_CAP {
        return Err(Error::GridTooLarge { size: side, cap: GRID_PAIR_CAP });
    }
    let tables = GameTables::new(inst, exec)?;
    let game = PenalizedGame { tables: &tables, design: &inst.design, penalty };
    let grid = StrategyGrid::new(&inst.design, m);
    let here = game.value_dist(&result.pi_a, &result.pi_b);
    let alt_a = exec.map(grid.dists.len(), |i| game.value_dist(&grid.dists[i], &result.pi_b));
    let alt_b = exec.map(grid.dists.len(), |j| game.value_dist(&result.pi_a, &grid.dists[j]));
    let gain_a = alt_a.iter().map(|v| v - here).fold(0.0, f64::max);
    let gain_b = alt_b.iter().map(|v| here - v).fold(0.0, f64::max);
    Ok(DeviationReport {
        resolution,
        gain_a,
        gain_b,
        certified: gain_a <= CERTIFY_TOL && gain_b <= CERTIFY_TOL,
    })
}

/// Labels for [π_A flat, π_B flat, payoff].
pub fn equilibrium_labels(design: &ConjointDesign) -> Vec<String> {
    let mut out = Vec::new();
    for side in ["pi_a", "pi_b"] {
        for f in design.factors() {
            out.extend(f.levels.iter().map(|l| format!("{side}:{}:{l}", f.name)));
        }
    }
    out.push("payoff".into());
    out
}

fn equilibrium_outputs(res: &EquilibriumResult) -> Vec<f64> {
    let mut out = res.pi_a.flatten();
    out.extend(res.pi_b.flatten());
    out.push(res.payoff);
    out
}

/// Equilibrium plus delta-method standard errors over the stacked free
/// coefficients of the four models (block-diagonal covariance). Perturbed
/// solves start from the unperturbed equilibrium and must converge.
pub fn equilibrium_with_inference(
    inst: &InstitutionSpec,
    penalty: PenaltyConfig,
    cfg: &GameConfig,
    delta: &crate::infer::DeltaConfig,
) -> Result<(EquilibriumResult, crate::infer::InferenceResult)> {
    let base = solve_equilibrium(inst, penalty, cfg, None)?;
    if !base.converged {
        return Err(Error::NumericalFailure("equilibrium solver did not converge".into()));
    }
    let warm_a = SoftmaxParams::from_distribution(&base.pi_a)?;
    let warm_b = SoftmaxParams::from_distribution(&base.pi_b)?;
    let models = [&inst.primary_a, &inst.primary_b, &inst.general_a, &inst.general_b];
    let sizes: Vec<usize> = models.iter().map(|m| m.theta().len()).collect();
    let total: usize = sizes.iter().sum();
    let mut theta = Vec::with_capacity(total);
    let mut cov = DMatrix::zeros(total, total);
    let mut labels = Vec::with_capacity(total);
    let mut off = 0;
    for (m, name) in models.iter().zip(["primary_a", "primary_b", "general_a", "general_b"]) {
        let k = m.theta().len();
        theta.extend_from_slice(m.theta());
        cov.view_mut((off, off), (k, k)).copy_from(m.covariance());
        labels.extend(m.free_keys().into_iter().map(|key| format!("{name}/{key}")));
        off += k;
    }
    let rebuild = |t: &[f64]| -> Result<InstitutionSpec> {
        let mut parts = Vec::with_capacity(4);
        let mut off = 0;
        for (m, &k) in models.iter().zip(&sizes) {
            parts.push(m.with_theta(&t[off..off + k])?);
            off += k;
        }
        let mut next = inst.clone();
        next.general_b = parts.pop().expect("four models");
        next.general_a = parts.pop().expect("four models");
        next.primary_b = parts.pop().expect("four models");
        next.primary_a = parts.pop().expect("four models");
        Ok(next)
    };
    let inf = crate::infer::delta_method(
        &theta,
        &cov,
        &labels,
        equilibrium_labels(&inst.design),
        |t| {
            let next = rebuild(t)?;
            let r = solve_equilibrium(&next, penalty, cfg, Some((&warm_a, &warm_b)))?;
            if !r.converged {
                return Err(Error::NumericalFailure("perturbed equilibrium did not converge".into()));
            }
            Ok(equilibrium_outputs(&r))
        },
        delta,
    )?;
    Ok((base, inf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Coding, Response};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Forced-choice model on one binary factor: Pr(first level beats second) = c + 2b.
    fn binary_model(design: &ConjointDesign, c: f64, b: f64) -> OutcomeModel {
        OutcomeModel::from_free(design.clone(), Response::ForcedChoice, Coding::SumToZero, vec![c, b], None).unwrap()
    }

    fn gender() -> ConjointDesign {
        ConjointDesign::new(vec![crate::design::FactorSpec {
            name: "gender".into(),
            levels: vec!["male".into(), "female".into()],
            assignment_probs: vec![0.5, 0.5],
        }])
        .unwrap()
    }

    fn inst(w: f64, pa: f64, pb: f64, ga: f64, gb: f64) -> InstitutionSpec {
        let d = gender();
        InstitutionSpec::new(
            w,
            binary_model(&d, 0.5, pa),
            binary_model(&d, 0.5, pb),
            binary_model(&d, 0.5, ga),
            binary_model(&d, 0.5, gb),
        )
        .unwrap()
    }

    fn bin(d: &ConjointDesign, q: f64) -> ProfileDistribution {
        ProfileDistribution::new(d, vec![vec![q, 1.0 - q]]).unwrap()
    }

    fn random_inst(rng: &mut ChaCha8Rng, counts: &[usize]) -> InstitutionSpec {
        let d = ConjointDesign::uniform(counts).unwrap();
        let n = crate::model::CoefLayout::new(counts).n_free();
        let mut m = || {
            let mut th: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.08..0.08)).collect();
            th[0] = 0.5;
            OutcomeModel::from_free(d.clone(), Response::ForcedChoice, Coding::SumToZero, th, None).unwrap()
        };
        let (a, b, c, e) = (m(), m(), m(), m());
        InstitutionSpec::new(rng.gen_range(0.2..0.8), a, b, c, e).unwrap()
    }

    #[test]
    fn symmetric_institution_pays_one_half() {
        let i = inst(0.5, 0.1, 0.1, 0.05, 0.05);
        let d = gender();
        for q in [0.1, 0.5, 0.77] {
            assert_abs_diff_eq!(payoff(&bin(&d, q), &bin(&d, q), &i).unwrap(), 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_general_stage_gives_its_intercept() {
        let d = gender();
        let i = InstitutionSpec::new(
            0.3,
            binary_model(&d, 0.5, 0.2),
            binary_model(&d, 0.5, -0.1),
            binary_model(&d, 0.62, 0.0),
            binary_model(&d, 0.62, 0.0),
        )
        .unwrap();
        assert_abs_diff_eq!(payoff(&bin(&d, 0.8), &bin(&d, 0.3), &i).unwrap(), 0.62, epsilon = 1e-12);
        let (ga, gb) = payoff_gradient(
            &SoftmaxParams::new(vec![vec![0.3]]).unwrap(),
            &SoftmaxParams::new(vec![vec![-1.0]]).unwrap(),
            &i,
        )
        .unwrap();
        assert!(ga.iter().chain(&gb).all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn payoff_matches_hand_enumeration() {
        // One binary factor, levels m/f; check the nominee mixture by hand.
        let d = gender();
        let i = inst(0.4, 0.1, -0.05, 0.15, -0.1);
        let (xa, xb) = (0.7, 0.2);
        let pa = |t: usize, s: usize| 0.5 + if t == s { 0.0 } else if t == 0 { 0.2 } else { -0.2 };
        let pb = |t: usize, s: usize| 0.5 + if t == s { 0.0 } else if t == 0 { -0.1 } else { 0.1 };
        let gen = |t: usize, s: usize| {
            let a = 0.5 + if t == s { 0.0 } else if t == 0 { 0.3 } else { -0.3 };
            let b = 0.5 + if t == s { 0.0 } else if t == 0 { -0.2 } else { 0.2 };
            0.4 * a + 0.6 * b
        };
        let nominee = |x: [f64; 2], p: &dyn Fn(usize, usize) -> f64| -> [f64; 2] {
            let mut r = [0.0; 2];
            for t in 0..2 {
                for c in 0..2 {
                    // drawn t meets challenger c (each w.p. 1/2)
                    let w = x[t] * 0.5;
                    r[t] += w * p(t, c);
                    r[c] += w * (1.0 - p(t, c));
                }
            }
            r
        };
        let ra = nominee([xa, 1.0 - xa], &pa);
        let rb = nominee([xb, 1.0 - xb], &pb);
        let mut expect = 0.0;
        for t in 0..2 {
            for s in 0..2 {
                expect += ra[t] * rb[s] * gen(t, s);
            }
        }
        assert_abs_diff_eq!(payoff(&bin(&d, xa), &bin(&d, xb), &i).unwrap(), expect, epsilon = 1e-14);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for counts in [vec![2], vec![2, 3], vec![3, 2, 2]] {
            let i = random_inst(&mut rng, &counts);
            let k: usize = counts.iter().map(|l| l - 1).sum();
            let a: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let tables = GameTables::new(&i, Exec::Sequential).unwrap();
            let game = PenalizedGame { tables: &tables, design: &i.design, penalty: PenaltyConfig::l2(0.3) };
            let (ga, gb) = game.gradients(&a, &b);
            for j in 0..k {
                let h = 1e-6;
                let (mut u, mut dn) = (a.clone(), a.clone());
                u[j] += h;
                dn[j] -= h;
                let fd = (game.value(&u, &b) - game.value(&dn, &b)) / (u[j] - dn[j]);
                assert!((fd - ga[j]).abs() < 1e-6 * fd.abs().max(1.0));
                let (mut u, mut dn) = (b.clone(), b.clone());
                u[j] += h;
                dn[j] -= h;
                let fd = (game.value(&a, &u) - game.value(&a, &dn)) / (u[j] - dn[j]);
                assert!((fd - gb[j]).abs() < 1e-6 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn symmetric_point_gradients_are_opposite() {
        let i = inst(0.5, 0.12, 0.12, 0.07, 0.07);
        let a = SoftmaxParams::new(vec![vec![0.4]]).unwrap();
        let (ga, gb) = payoff_gradient(&a, &a, &i).unwrap();
        assert_abs_diff_eq!(ga[0], -gb[0], epsilon = 1e-14);
    }

    #[test]
    fn symmetric_game_equilibrium_is_centered() {
        let i = inst(0.5, 0.1, 0.1, 0.05, 0.05);
        let pen = PenaltyConfig::l2(0.2);
        let eq = solve_equilibrium(&i, pen, &GameConfig::default(), None).unwrap();
        assert!(eq.converged);
        assert_abs_diff_eq!(eq.payoff, 0.5, epsilon = 1e-3);
        assert!(eq.pi_a.max_abs_diff(&eq.pi_b) < 1e-8);
        let grid = grid_oracle(&i, pen, 0.01, Exec::Sequential).unwrap();
        assert!(grid.pi_a.max_abs_diff(&grid.pi_b) < 1e-12);
        assert!(grid.grid.as_ref().unwrap().minimax_ok);
    }

    #[test]
    fn penalty_dominated_equilibrium_is_design() {
        let i = inst(0.3, 0.2, -0.1, 0.1, -0.15);
        let eq = solve_equilibrium(&i, PenaltyConfig::l2(1e6), &GameConfig::default(), None).unwrap();
        let p = i.design.assignment();
        assert!(eq.pi_a.max_abs_diff(&p) < 1e-3 && eq.pi_b.max_abs_diff(&p) < 1e-3);
    }

    #[test]
    fn constant_models_grid_picks_design() {
        let i = inst(0.5, 0.0, 0.0, 0.0, 0.0);
        let r = grid_oracle(&i, PenaltyConfig::l2(0.0), 0.1, Exec::Sequential).unwrap();
        assert_eq!(r.grid.as_ref().unwrap().candidates, 121);
        assert!(r.pi_a.max_abs_diff(&i.design.assignment()) < 1e-12);
        let dev = deviation_check(&r, &i, PenaltyConfig::l2(0.0), 0.1, Exec::Sequential).unwrap();
        assert_eq!((dev.gain_a, dev.gain_b), (0.0, 0.0));
    }

    #[test]
    fn solvers_agree_on_random_institutions() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let i = random_inst(&mut rng, &[2]);
            let pen = PenaltyConfig::l2(rng.gen_range(0.1..0.5));
            let eq = solve_equilibrium(&i, pen, &GameConfig::default(), None).unwrap();
            assert!(eq.converged);
            let grid = grid_oracle(&i, pen, 0.01, Exec::Sequential).unwrap();
            assert!(eq.pi_a.max_abs_diff(&grid.pi_a) < 0.02);
            assert!(eq.pi_b.max_abs_diff(&grid.pi_b) < 0.02);
            let dev = deviation_check(&eq, &i, pen, 0.01, Exec::Sequential).unwrap();
            assert!(dev.certified);
        }
    }

    #[test]
    fn perturbed_equilibrium_shows_improvement() {
        let i = inst(0.6, 0.15, -0.1, 0.12, -0.08);
        let pen = PenaltyConfig::l2(0.25);
        let mut eq = solve_equilibrium(&i, pen, &GameConfig::default(), None).unwrap();
        let q = eq.pi_a.factor(0)[0];
        let shifted = if q < 0.85 { q + 0.1 } else { q - 0.1 };
        eq.pi_a = bin(&i.design, shifted);
        let dev = deviation_check(&eq, &i, pen, 0.01, Exec::Sequential).unwrap();
        assert!(dev.gain_a > 1e-4);
    }

    #[test]
    fn inference_matches_direct_delta() {
        let d = gender();
        let mk = |b: f64, v: f64| {
            OutcomeModel::from_free(d.clone(), Response::ForcedChoice, Coding::SumToZero, vec![0.5, b], Some(DMatrix::from_diagonal(&DVector::from_vec(vec![v, v])))).unwrap()
        };
        let i = InstitutionSpec::new(0.4, mk(0.1, 1e-4), mk(-0.05, 2e-4), mk(0.08, 1e-4), mk(-0.06, 1e-4)).unwrap();
        let (eq, inf) = equilibrium_with_inference(&i, PenaltyConfig::l2(0.3), &GameConfig::default(), &crate::infer::DeltaConfig::default()).unwrap();
        assert_eq!(inf.estimate[0], eq.pi_a.factor(0)[0]);
        // π_A and its complement carry the same standard error.
        assert_abs_diff_eq!(inf.se[0], inf.se[1], epsilon = 1e-10);
        assert!(inf.se[0] > 0.0 && !inf.step_sensitive);
    }

    #[test]
    fn grid_too_large_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let i = random_inst(&mut rng, &[3, 3]);
        assert!(matches!(grid_oracle(&i, PenaltyConfig::l2(0.1), 0.01, Exec::Sequential), Err(Error::GridTooLarge { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn swapped_sides_sum_to_one(w in 0.0f64..1.0, pa in -0.2f64..0.2, pb in -0.2f64..0.2,
                                    ga in -0.2f64..0.2, gb in -0.2f64..0.2, x in 0.01f64..0.99, y in 0.01f64..0.99) {
            let i = inst(w, pa, pb, ga, gb);
            let d = gender();
            let f = payoff(&bin(&d, x), &bin(&d, y), &i).unwrap();
            let s = payoff(&bin(&d, y), &bin(&d, x), &i.swapped()).unwrap();
            prop_assert!((f + s - 1.0).abs() < 1e-9);
        }

        #[test]
        fn relabeling_levels_preserves_payoff(w in 0.0f64..1.0, pa in -0.2f64..0.2, pb in -0.2f64..0.2,
                                              ga in -0.2f64..0.2, gb in -0.2f64..0.2, x in 0.01f64..0.99, y in 0.01f64..0.99) {
            // Swapping the two levels flips the sign of every sum-to-zero main effect.
            let d = gender();
            let i = inst(w, pa, pb, ga, gb);
            let r = inst(w, -pa, -pb, -ga, -gb);
            let f = payoff(&bin(&d, x), &bin(&d, y), &i).unwrap();
            let g = payoff(&bin(&d, 1.0 - x), &bin(&d, 1.0 - y), &r).unwrap();
            prop_assert!((f - g).abs() < 1e-12);
        }
    }
}
