//! Conjoint designs, profile distributions and the softmax parameterization.
//!
//! A profile assigns one level to every factor. Distributions over profiles
//! are products of per-factor categorical distributions. Levels are indexed
//! from zero; the last level of each factor is the pinned reference in the
//! softmax parameterization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SUPPORT_CAP: usize = 200_000;

const SUM_TOL: f64 = 1e-12;
const RENORM_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub name: String,
    pub levels: Vec<String>,
    #[serde(rename = "p")]
    pub assignment_probs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct DesignDoc {
    factors: Vec<FactorSpec>,
}

/// Factors with their levels and the randomization probabilities used when
/// the experiment was fielded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DesignDoc", into = "DesignDoc")]
pub struct ConjointDesign {
    factors: Vec<FactorSpec>,
    support_cap: usize,
}

impl TryFrom<DesignDoc> for ConjointDesign {
    type Error = Error;
    fn try_from(doc: DesignDoc) -> Result<Self> {
        ConjointDesign::new(doc.factors)
    }
}

impl From<ConjointDesign> for DesignDoc {
    fn from(d: ConjointDesign) -> Self {
        DesignDoc { factors: d.factors }
    }
}

fn check_name(kind: &str, name: &str) -> Result<()> {
    if name.is_empty() || name.contains(':') || name.contains(',') {
        return Err(Error::InvalidDesign(format!(
            "{kind} name `{name}` must be non-empty and free of ':' and ','"
        )));
    }
    Ok(())
}

/// Checks a probability vector; renormalizes tiny drift, rejects the rest.
fn normalize_probs(what: &str, probs: &mut [f64]) -> Result<()> {
    if probs.iter().any(|&v| !v.is_finite() || !(0.0..=1.0).contains(&v)) {
        return Err(Error::InvalidDesign(format!("{what}: probabilities must lie in [0, 1]")));
    }
    let sum: f64 = probs.iter().sum();
    let drift = (sum - 1.0).abs();
    if drift > RENORM_TOL {
        return Err(Error::InvalidDesign(format!("{what}: probabilities sum to {sum}")));
    }
    if drift > SUM_TOL {
        probs.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(())
}

impl ConjointDesign {
    pub fn new(mut factors: Vec<FactorSpec>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::InvalidDesign("design has no factors".into()));
        }
        for (i, f) in factors.iter_mut().enumerate() {
            check_name("factor", &f.name)?;
            if f.levels.len() < 2 {
                return Err(Error::InvalidDesign(format!(
                    "factor `{}` needs at least two levels",
                    f.name
                )));
            }
            if f.assignment_probs.len() != f.levels.len() {
                return Err(Error::InvalidDesign(format!(
                    "factor `{}` has {} levels but {} probabilities",
                    f.name,
                    f.levels.len(),
                    f.assignment_probs.len()
                )));
            }
            for (j, l) in f.levels.iter().enumerate() {
                check_name("level", l)?;
                if f.levels[..j].contains(l) {
                    return Err(Error::InvalidDesign(format!(
                        "factor `{}` repeats level `{l}`",
                        f.name
                    )));
                }
            }
            normalize_probs(&format!("factor {i} (`{}`)", f.name), &mut f.assignment_probs)?;
        }
        for (i, f) in factors.iter().enumerate() {
            if factors[..i].iter().any(|g| g.name == f.name) {
                return Err(Error::InvalidDesign(format!("factor `{}` appears twice", f.name)));
            }
        }
        Ok(Self {
            factors,
            support_cap: DEFAULT_SUPPORT_CAP,
        })
    }

    /// Design of binary factors named `f1..fD` with levels `a`/`b` and the given
    /// probability of the first level.
    pub fn binary(probs_first: &[f64]) -> Result<Self> {
        Self::new(
            probs_first
                .iter()
                .enumerate()
                .map(|(d, &q)| FactorSpec {
                    name: format!("f{}", d + 1),
                    levels: vec!["a".into(), "b".into()],
                    assignment_probs: vec![q, 1.0 - q],
                })
                .collect(),
        )
    }

    /// Uniform design with the given number of levels per factor.
    pub fn uniform(level_counts: &[usize]) -> Result<Self> {
        Self::new(
            level_counts
                .iter()
                .enumerate()
                .map(|(d, &l)| FactorSpec {
                    name: format!("f{}", d + 1),
                    levels: (1..=l).map(|k| format!("l{k}")).collect(),
                    assignment_probs: vec![1.0 / l as f64; l],
                })
                .collect(),
        )
    }

    pub fn with_support_cap(mut self, cap: usize) -> Self {
        self.support_cap = cap;
        self
    }

    pub fn support_cap(&self) -> usize {
        self.support_cap
    }

    pub fn factors(&self) -> &[FactorSpec] {
        &self.factors
    }

    pub fn num_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn level_counts(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.levels.len()).collect()
    }

    /// Sum of level counts: the length of a flattened distribution.
    pub fn total_levels(&self) -> usize {
        self.factors.iter().map(|f| f.levels.len()).sum()
    }

    /// Number of free softmax parameters.
    pub fn num_free_params(&self) -> usize {
        self.total_levels() - self.num_factors()
    }

    pub fn factor_index(&self, name: &str) -> Option<usize> {
        self.factors.iter().position(|f| f.name == name)
    }

    pub fn level_index(&self, factor: usize, level: &str) -> Option<usize> {
        self.factors[factor].levels.iter().position(|l| l == level)
    }

    /// |T| as an exact integer, without applying the cap.
    pub fn support_size_exact(&self) -> u128 {
        self.factors
            .iter()
            .fold(1u128, |acc, f| acc.saturating_mul(f.levels.len() as u128))
    }

    /// |T| as a float, for use in formulas.
    pub fn support_size_f64(&self) -> f64 {
        self.factors.iter().map(|f| f.levels.len() as f64).product()
    }

    /// |T|, or an error when it exceeds the support cap.
    pub fn support_size(&self) -> Result<usize> {
        let size = self.support_size_exact();
        if size > self.support_cap as u128 {
            return Err(Error::SupportTooLarge {
                size,
                cap: self.support_cap,
            });
        }
        Ok(size as usize)
    }

    /// The randomization distribution p.
    pub fn assignment(&self) -> ProfileDistribution {
        ProfileDistribution {
            probs: self.factors.iter().map(|f| f.assignment_probs.clone()).collect(),
        }
    }

    pub fn is_uniform(&self) -> bool {
        self.factors.iter().all(|f| {
            let u = 1.0 / f.levels.len() as f64;
            f.assignment_probs.iter().all(|&v| (v - u).abs() <= 1e-12)
        })
    }

    /// All profiles in lexicographic order (last factor varies fastest).
    pub fn enumerate_support(&self) -> Result<Vec<Profile>> {
        let size = self.support_size()?;
        let counts = self.level_counts();
        let mut out = Vec::with_capacity(size);
        let mut cur = vec![0usize; counts.len()];
        for _ in 0..size {
            out.push(Profile(cur.clone()));
            for d in (0..counts.len()).rev() {
                cur[d] += 1;
                if cur[d] < counts[d] {
                    break;
                }
                cur[d] = 0;
            }
        }
        Ok(out)
    }

    /// Human-readable level names of a profile.
    pub fn profile_labels(&self, t: &Profile) -> Vec<&str> {
        t.0.iter()
            .zip(&self.factors)
            .map(|(&l, f)| f.levels[l].as_str())
            .collect()
    }

    /// Parses a profile given as level names in factor order.
    pub fn parse_profile(&self, levels: &[&str]) -> Result<Profile> {
        if levels.len() != self.num_factors() {
            return Err(Error::ShapeMismatch(format!(
                "profile has {} levels, design has {} factors",
                levels.len(),
                self.num_factors()
            )));
        }
        levels
            .iter()
            .enumerate()
            .map(|(d, name)| {
                self.level_index(d, name).ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "unknown level `{name}` for factor `{}`",
                        self.factors[d].name
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()
            .map(Profile)
    }
}

/// One level index per factor.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Profile(pub Vec<usize>);

impl Profile {
    pub fn levels(&self) -> &[usize] {
        &self.0
    }
}

/// Product distribution over profiles: one categorical distribution per factor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProfileDistribution {
    probs: Vec<Vec<f64>>,
}

impl ProfileDistribution {
    pub fn new(design: &ConjointDesign, mut probs: Vec<Vec<f64>>) -> Result<Self> {
        let counts = design.level_counts();
        if probs.len() != counts.len() || probs.iter().zip(&counts).any(|(p, &l)| p.len() != l) {
            return Err(Error::ShapeMismatch(
                "distribution shape does not match the design".into(),
            ));
        }
        for (d, p) in probs.iter_mut().enumerate() {
            normalize_probs(&format!("factor {d}"), p)
                .map_err(|e| Error::InvalidDistribution(e.to_string()))?;
        }
        Ok(Self { probs })
    }

    /// Uniform over every factor's levels.
    pub fn uniform(design: &ConjointDesign) -> Self {
        Self {
            probs: design
                .level_counts()
                .iter()
                .map(|&l| vec![1.0 / l as f64; l])
                .collect(),
        }
    }

    pub(crate) fn from_raw(probs: Vec<Vec<f64>>) -> Self {
        Self { probs }
    }

    pub fn factor(&self, d: usize) -> &[f64] {
        &self.probs[d]
    }

    pub fn as_nested(&self) -> &[Vec<f64>] {
        &self.probs
    }

    pub fn into_nested(self) -> Vec<Vec<f64>> {
        self.probs
    }

    pub fn num_factors(&self) -> usize {
        self.probs.len()
    }

    pub fn level_counts(&self) -> Vec<usize> {
        self.probs.iter().map(Vec::len).collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.probs.iter().flatten().copied().collect()
    }

    pub fn matches(&self, design: &ConjointDesign) -> bool {
        self.level_counts() == design.level_counts()
    }

    /// Pr(t) = Π_d π_{d, t_d}.
    pub fn profile_probability(&self, t: &Profile) -> Result<f64> {
        if t.0.len() != self.probs.len() || t.0.iter().zip(&self.probs).any(|(&l, p)| l >= p.len()) {
            return Err(Error::ShapeMismatch("profile does not fit the distribution".into()));
        }
        Ok(self.prob_unchecked(t))
    }

    pub(crate) fn prob_unchecked(&self, t: &Profile) -> f64 {
        t.0.iter().zip(&self.probs).map(|(&l, p)| p[l]).product()
    }

    /// Largest single-profile probability, Π_d max_l π_dl.
    pub fn max_profile_probability(&self) -> f64 {
        self.probs
            .iter()
            .map(|p| p.iter().copied().fold(0.0, f64::max))
            .product()
    }

    /// Profile probabilities over an enumerated support.
    pub fn support_probabilities(&self, support: &[Profile]) -> Vec<f64> {
        support.iter().map(|t| self.prob_unchecked(t)).collect()
    }

    /// Squared Euclidean distance over all levels.
    pub fn l2_distance_sq(&self, other: &ProfileDistribution) -> f64 {
        self.probs
            .iter()
            .flatten()
            .zip(other.probs.iter().flatten())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// True when every entry lies in [δ, 1 − δ].
    pub fn is_interior(&self, delta: f64) -> bool {
        self.probs.iter().flatten().all(|&v| v >= delta && v <= 1.0 - delta)
    }

    pub fn max_abs_diff(&self, other: &ProfileDistribution) -> f64 {
        self.probs
            .iter()
            .flatten()
            .zip(other.probs.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Unconstrained parameters: L_d − 1 per factor, the last level pinned at 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SoftmaxParams {
    params: Vec<Vec<f64>>,
}

impl SoftmaxParams {
    pub fn new(params: Vec<Vec<f64>>) -> Result<Self> {
        for (d, p) in params.iter().enumerate() {
            if let Some(i) = p.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteParameter { factor: d, index: i });
            }
        }
        Ok(Self { params })
    }

    pub fn zeros(design: &ConjointDesign) -> Self {
        Self {
            params: design.level_counts().iter().map(|&l| vec![0.0; l - 1]).collect(),
        }
    }

    /// Rebuilds from a flat vector laid out factor by factor.
    pub fn from_flat(flat: &[f64], level_counts: &[usize]) -> Result<Self> {
        let expected: usize = level_counts.iter().map(|l| l - 1).sum();
        if flat.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "expected {expected} parameters, got {}",
                flat.len()
            )));
        }
        let mut params = Vec::with_capacity(level_counts.len());
        let mut off = 0;
        for &l in level_counts {
            params.push(flat[off..off + l - 1].to_vec());
            off += l - 1;
        }
        Self::new(params)
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.params.iter().flatten().copied().collect()
    }

    pub fn as_nested(&self) -> &[Vec<f64>] {
        &self.params
    }

    /// Log-ratio parameters a_dl = ln(π_dl / π_dL); needs strictly positive π.
    pub fn from_distribution(pi: &ProfileDistribution) -> Result<Self> {
        let mut params = Vec::with_capacity(pi.num_factors());
        for (d, p) in pi.as_nested().iter().enumerate() {
            if p.iter().any(|&v| v <= 0.0) {
                return Err(Error::ZeroProbability(format!(
                    "factor {d} has a zero-probability level; log-ratio parameters undefined"
                )));
            }
            let last = *p.last().expect("at least two levels");
            params.push(p[..p.len() - 1].iter().map(|v| (v / last).ln()).collect());
        }
        Self::new(params)
    }

    pub fn to_distribution(&self) -> ProfileDistribution {
        ProfileDistribution::from_raw(self.params.iter().map(|a| softmax_pinned(a)).collect())
    }
}

/// Softmax with an implicit trailing zero logit.
pub fn softmax_pinned(a: &[f64]) -> Vec<f64> {
    let m = a.iter().copied().fold(0.0, f64::max);
    let mut out: Vec<f64> = a.iter().map(|v| (v - m).exp()).collect();
    out.push((-m).exp());
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    out
}

/// Maps parameters to a distribution after checking their shape against the design.
pub fn softmax_to_distribution(a: &SoftmaxParams, design: &ConjointDesign) -> Result<ProfileDistribution> {
    let counts = design.level_counts();
    if a.params.len() != counts.len() || a.params.iter().zip(&counts).any(|(p, &l)| p.len() + 1 != l) {
        return Err(Error::ShapeMismatch("parameters do not match the design".into()));
    }
    Ok(a.to_distribution())
}

/// Jacobian of one factor's softmax: entry `[l][k]` is ∂π_l/∂a_k = π_l(δ_lk − π_k),
/// for all L levels `l` and the L − 1 free parameters `k`.
pub fn softmax_jacobian(pi_d: &[f64]) -> Vec<Vec<f64>> {
    let free = pi_d.len() - 1;
    pi_d.iter()
        .enumerate()
        .map(|(l, &pl)| {
            (0..free)
                .map(|k| pl * (if l == k { 1.0 } else { 0.0 } - pi_d[k]))
                .collect()
        })
        .collect()
}

/// Pulls a gradient with respect to π (all levels, nested) back to the softmax
/// parameters, returning a flat vector laid out factor by factor.
pub fn chain_softmax(pi: &[Vec<f64>], grad_pi: &[Vec<f64>]) -> Vec<f64> {
    let mut out = Vec::new();
    for (p, g) in pi.iter().zip(grad_pi) {
        // Σ_l g_l π_l (δ_lk − π_k) = π_k (g_k − Σ_l g_l π_l)
        let mean: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        out.extend((0..p.len() - 1).map(|k| p[k] * (g[k] - mean)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn three_factor() -> ConjointDesign {
        ConjointDesign::uniform(&[2, 3, 2]).unwrap()
    }

    #[test]
    fn support_lexicographic() {
        let d = ConjointDesign::uniform(&[2, 2]).unwrap();
        let s: Vec<Vec<usize>> = d.enumerate_support().unwrap().into_iter().map(|p| p.0).collect();
        assert_eq!(s, vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]);
    }

    #[test]
    fn support_cap_error_names_size_and_cap() {
        let d = ConjointDesign::uniform(&[10; 6]).unwrap();
        let err = d.enumerate_support().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("1000000") && msg.contains("200000"), "{msg}");
    }

    #[test]
    fn design_probability_checks() {
        let mk = |p: Vec<f64>| {
            ConjointDesign::new(vec![FactorSpec {
                name: "x".into(),
                levels: vec!["a".into(), "b".into()],
                assignment_probs: p,
            }])
        };
        assert!(mk(vec![0.5, 0.5 + 5e-10]).is_ok());
        let renorm = mk(vec![0.5, 0.5 + 5e-10]).unwrap();
        let s: f64 = renorm.factors()[0].assignment_probs.iter().sum();
        assert!((s - 1.0).abs() <= 1e-15);
        assert!(mk(vec![0.5, 0.6]).is_err());
        assert!(mk(vec![1.2, -0.2]).is_err());
    }

    #[test]
    fn design_json_round_trip() {
        let d = three_factor();
        let s = serde_json::to_string(&d).unwrap();
        assert!(s.starts_with("{\"factors\":"));
        let back: ConjointDesign = serde_json::from_str(&s).unwrap();
        assert_eq!(back, d);
        let bad = r#"{"factors":[{"name":"x","levels":["a"],"p":[1.0]}]}"#;
        assert!(serde_json::from_str::<ConjointDesign>(bad).is_err());
    }

    #[test]
    fn softmax_examples() {
        let d = three_factor();
        let pi = SoftmaxParams::zeros(&d).to_distribution();
        assert_eq!(pi.factor(1), &[1.0 / 3.0; 3]);
        let pi = softmax_pinned(&[50.0, 0.0]);
        assert_abs_diff_eq!(pi[0], 1.0, epsilon = 1e-15);
        assert!(pi[1] < 1e-20 && pi[2] < 1e-20);
        let pi = softmax_pinned(&[2f64.ln()]);
        assert_abs_diff_eq!(pi[0], 2.0 / 3.0, epsilon = 1e-15);
        assert!(SoftmaxParams::new(vec![vec![f64::NAN]]).is_err());
    }

    #[test]
    fn profile_probability_example() {
        let d = ConjointDesign::binary(&[0.5, 0.5]).unwrap();
        let pi = ProfileDistribution::new(&d, vec![vec![0.2, 0.8], vec![0.5, 0.5]]).unwrap();
        assert_abs_diff_eq!(pi.profile_probability(&Profile(vec![0, 0])).unwrap(), 0.1, epsilon = 1e-15);
        let total: f64 = pi.support_probabilities(&d.enumerate_support().unwrap()).iter().sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-14);
        assert!(pi.profile_probability(&Profile(vec![2, 0])).is_err());
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let a = [0.3, -1.2, 0.7];
        let pi = softmax_pinned(&a);
        let jac = softmax_jacobian(&pi);
        let h = 1e-6;
        for k in 0..a.len() {
            let mut up = a;
            let mut dn = a;
            up[k] += h;
            dn[k] -= h;
            let (pu, pd) = (softmax_pinned(&up), softmax_pinned(&dn));
            for l in 0..pi.len() {
                assert_abs_diff_eq!(jac[l][k], (pu[l] - pd[l]) / (2.0 * h), epsilon = 1e-9);
            }
        }
    }

    fn arb_dist() -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(0.05f64..1.0, 2..5), 1..4).prop_map(|raw| {
            raw.into_iter()
                .map(|v| {
                    let s: f64 = v.iter().sum();
                    v.into_iter().map(|x| x / s).collect()
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn log_ratio_round_trip(probs in arb_dist()) {
            let pi = ProfileDistribution::from_raw(probs);
            let back = SoftmaxParams::from_distribution(&pi).unwrap().to_distribution();
            prop_assert!(pi.max_abs_diff(&back) <= 1e-10);
        }

        #[test]
        fn softmax_is_on_simplex(a in prop::collection::vec(-30.0f64..30.0, 1..6)) {
            let pi = softmax_pinned(&a);
            prop_assert!((pi.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(pi.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn chain_rule_equals_explicit_jacobian(
            a in prop::collection::vec(-3.0f64..3.0, 1..5),
            g in prop::collection::vec(-3.0f64..3.0, 6),
        ) {
            let pi = softmax_pinned(&a);
            let g = &g[..pi.len()];
            let jac = softmax_jacobian(&pi);
            let fast = chain_softmax(std::slice::from_ref(&pi), &[g.to_vec()]);
            for k in 0..a.len() {
                let slow: f64 = (0..pi.len()).map(|l| g[l] * jac[l][k]).sum();
                prop_assert!((fast[k] - slow).abs() <= 1e-12);
            }
        }
    }
}
