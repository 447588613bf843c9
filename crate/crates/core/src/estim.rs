//! Estimators of the expected outcome Q(π) under a stochastic intervention,
//! the variance bound for the weighting estimator, and strategic divergence.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::dataio::ForcedChoiceDataset;
use crate::design::{ConjointDesign, Profile, ProfileDistribution};
use crate::error::{Error, Result};
use crate::model::{OutcomeModel, Response};

fn check_shape(model: &OutcomeModel, pi: &ProfileDistribution) -> Result<()> {
    if !pi.matches(model.design()) {
        return Err(Error::ShapeMismatch("distribution does not match the model's design".into()));
    }
    Ok(())
}

/// Q(π) from a fitted model. Forced-choice models need the opponent's
/// distribution; single-outcome models ignore it.
pub fn q_value(model: &OutcomeModel, pi: &ProfileDistribution, opponent: Option<&ProfileDistribution>) -> Result<f64> {
    check_shape(model, pi)?;
    let poly = model.polynomial();
    match model.response() {
        Response::Single => Ok(poly.value(pi.as_nested())),
        Response::ForcedChoice => {
            let opp = opponent.ok_or_else(|| {
                Error::InvalidArgument("forced-choice value needs an opponent distribution".into())
            })?;
            check_shape(model, opp)?;
            Ok(poly.value(pi.as_nested()) - poly.value(opp.as_nested()) + poly.constant)
        }
    }
}

/// Probability that a profile drawn from `pi_a` is chosen over one drawn from `pi_b`.
pub fn q_parametric(model: &OutcomeModel, pi_a: &ProfileDistribution, pi_b: &ProfileDistribution) -> Result<f64> {
    if model.response() != Response::ForcedChoice {
        return Err(Error::InvalidArgument("q_parametric needs a forced-choice model".into()));
    }
    q_value(model, pi_a, Some(pi_b))
}

/// Outcomes paired with the profile each was observed under.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedSample {
    profiles: Vec<Profile>,
    outcomes: Vec<f64>,
}

impl WeightedSample {
    pub fn new(profiles: Vec<Profile>, outcomes: Vec<f64>) -> Result<Self> {
        if profiles.len() != outcomes.len() {
            return Err(Error::ShapeMismatch("profiles and outcomes differ in length".into()));
        }
        if profiles.is_empty() {
            return Err(Error::InsufficientData("empty sample".into()));
        }
        if outcomes.iter().any(|y| !y.is_finite()) {
            return Err(Error::InvalidArgument("non-finite outcome".into()));
        }
        Ok(Self { profiles, outcomes })
    }

    /// Profile A of every task with outcome `chose_a`: the weighted mean then
    /// targets Q(π, p), the win probability against design-randomized opponents.
    pub fn from_forced_choice(data: &ForcedChoiceDataset) -> Self {
        Self {
            profiles: data.records().iter().map(|r| r.profile_a.clone()).collect(),
            outcomes: data.records().iter().map(|r| if r.chose_a { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn profiles(&self) -> &[Profile] {
        &self.profiles
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.outcomes.iter().sum::<f64>() / self.len() as f64
    }

    /// Sample variance with denominator n − 1.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        let n = self.len() as f64;
        if n < 2.0 {
            return 0.0;
        }
        self.outcomes.iter().map(|y| (y - m) * (y - m)).sum::<f64>() / (n - 1.0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingMode {
    #[default]
    HorvitzThompson,
    Hajek,
}

/// Design probabilities of the observed profiles; zero is a positivity violation.
pub fn design_probabilities(sample: &WeightedSample, design: &ConjointDesign) -> Result<Vec<f64>> {
    let p = design.assignment();
    sample
        .profiles
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let v = p.profile_probability(t)?;
            if v <= 0.0 {
                return Err(Error::Positivity(format!(
                    "observation {i} has design probability 0 for profile {:?}",
                    design.profile_labels(t)
                )));
            }
            Ok(v)
        })
        .collect()
}

/// Importance weights Pr_π(T_i) / Pr_p(T_i).
pub fn importance_weights(sample: &WeightedSample, design: &ConjointDesign, pi: &ProfileDistribution) -> Result<Vec<f64>> {
    if !pi.matches(design) {
        return Err(Error::ShapeMismatch("distribution does not match the design".into()));
    }
    let base = design_probabilities(sample, design)?;
    Ok(sample
        .profiles
        .iter()
        .zip(base)
        .map(|(t, b)| pi.prob_unchecked(t) / b)
        .collect())
}

/// Horvitz–Thompson (n⁻¹ Σ Y w) or Hájek (Σ Y w / Σ w) estimate of Q(π).
pub fn q_weighting(
    sample: &WeightedSample,
    design: &ConjointDesign,
    pi: &ProfileDistribution,
    mode: WeightingMode,
) -> Result<f64> {
    let w = importance_weights(sample, design, pi)?;
    let num: f64 = sample.outcomes.iter().zip(&w).map(|(y, w)| y * w).sum();
    match mode {
        WeightingMode::HorvitzThompson => Ok(num / sample.len() as f64),
        WeightingMode::Hajek => {
            let den: f64 = w.iter().sum();
            if den <= 0.0 {
                return Err(Error::NumericalFailure(
                    "Hájek weights sum to zero: π puts no mass on observed profiles".into(),
                ));
            }
            Ok(num / den)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct VarianceBoundInputs {
    /// Outcome noise variance σ².
    pub sigma2: f64,
    /// E_π[c_t²], the second moment of the conditional mean under π.
    pub second_moment: f64,
    pub n: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct VarianceBound {
    pub bound: f64,
    pub max_prob: f64,
    pub support_size: f64,
    /// The bound is derived for uniform designs; false flags a non-uniform one.
    pub uniform_design: bool,
}

/// (σ² + E_π[c²]) · |T| · max_t Pr_π(t) / n.
pub fn variance_bound(inputs: &VarianceBoundInputs, design: &ConjointDesign, pi: &ProfileDistribution) -> Result<VarianceBound> {
    if inputs.n == 0 {
        return Err(Error::InsufficientData("n must be positive".into()));
    }
    if inputs.sigma2 < 0.0 || inputs.second_moment < 0.0 {
        return Err(Error::InvalidArgument("variance inputs must be nonnegative".into()));
    }
    if !pi.matches(design) {
        return Err(Error::ShapeMismatch("distribution does not match the design".into()));
    }
    let max_prob = pi.max_profile_probability();
    let support_size = design.support_size_f64();
    Ok(VarianceBound {
        bound: (inputs.sigma2 + inputs.second_moment) * support_size * max_prob / inputs.n as f64,
        max_prob,
        support_size,
        uniform_design: design.is_uniform(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BoundInputEstimate {
    pub inputs: VarianceBoundInputs,
    /// Amount added to every outcome to make it nonnegative.
    pub shift_applied: f64,
}

/// Plug-in inputs for the bound: Y is shifted by −min(0, min Y); σ² is the
/// sample variance and E_π[c²] the Horvitz–Thompson mean of Y² (which also
/// carries σ², so the bound stays conservative).
pub fn estimate_bound_inputs(sample: &WeightedSample, design: &ConjointDesign, pi: &ProfileDistribution) -> Result<BoundInputEstimate> {
    let min = sample.outcomes.iter().copied().fold(f64::INFINITY, f64::min);
    let shift = if min < 0.0 { -min } else { 0.0 };
    let shifted = WeightedSample {
        profiles: sample.profiles.clone(),
        outcomes: sample.outcomes.iter().map(|y| y + shift).collect(),
    };
    let squared = WeightedSample {
        profiles: sample.profiles.clone(),
        outcomes: shifted.outcomes.iter().map(|y| y * y).collect(),
    };
    Ok(BoundInputEstimate {
        inputs: VarianceBoundInputs {
            sigma2: shifted.variance(),
            second_moment: q_weighting(&squared, design, pi, WeightingMode::HorvitzThompson)?,
            n: sample.len(),
        },
        shift_applied: shift,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PenaltyComparison {
    /// |T| · max_t Pr_π(t)
    pub maxprob_term: f64,
    /// |T| · (D + ‖π − p‖₂), an upper bound on the max-probability term.
    pub l2_term: f64,
}

pub fn compare_penalties(design: &ConjointDesign, pi: &ProfileDistribution) -> Result<PenaltyComparison> {
    if !pi.matches(design) {
        return Err(Error::ShapeMismatch("distribution does not match the design".into()));
    }
    let t = design.support_size_f64();
    let dist = pi.l2_distance_sq(&design.assignment()).sqrt();
    Ok(PenaltyComparison {
        maxprob_term: t * pi.max_profile_probability(),
        l2_term: t * (design.num_factors() as f64 + dist),
    })
}

/// |log Pr_a(t) − log Pr_b(t)|.
pub fn strategic_divergence(pi_a: &ProfileDistribution, pi_b: &ProfileDistribution, t: &Profile) -> Result<f64> {
    let (pa, pb) = (pi_a.profile_probability(t)?, pi_b.profile_probability(t)?);
    if pa <= 0.0 || pb <= 0.0 {
        return Err(Error::ZeroProbability("profile has probability 0 under a strategy".into()));
    }
    let la: f64 = t.0.iter().zip(pi_a.as_nested()).map(|(&l, p)| p[l].ln()).sum();
    let lb: f64 = t.0.iter().zip(pi_b.as_nested()).map(|(&l, p)| p[l].ln()).sum();
    Ok((la - lb).abs())
}

/// Gradient of the divergence over `[flatten(pi_a), flatten(pi_b)]`.
pub fn strategic_divergence_gradient(pi_a: &ProfileDistribution, pi_b: &ProfileDistribution, t: &Profile) -> Result<Vec<f64>> {
    strategic_divergence(pi_a, pi_b, t)?;
    let la: f64 = t.0.iter().zip(pi_a.as_nested()).map(|(&l, p)| p[l].ln()).sum();
    let lb: f64 = t.0.iter().zip(pi_b.as_nested()).map(|(&l, p)| p[l].ln()).sum();
    let sign = if la >= lb { 1.0 } else { -1.0 };
    let mut g = Vec::new();
    for (pi, s) in [(pi_a, sign), (pi_b, -sign)] {
        for (d, p) in pi.as_nested().iter().enumerate() {
            g.extend((0..p.len()).map(|l| if l == t.0[d] { s / p[l] } else { 0.0 }));
        }
    }
    Ok(g)
}

/// Delta-method standard error of the divergence given the joint covariance
/// of the two flattened strategies.
pub fn strategic_divergence_se(
    pi_a: &ProfileDistribution,
    pi_b: &ProfileDistribution,
    t: &Profile,
    joint_covariance: &DMatrix<f64>,
) -> Result<f64> {
    let g = strategic_divergence_gradient(pi_a, pi_b, t)?;
    if joint_covariance.shape() != (g.len(), g.len()) {
        return Err(Error::ShapeMismatch("joint covariance does not match the strategies".into()));
    }
    let g = nalgebra::DVector::from_vec(g);
    Ok((g.transpose() * joint_covariance * &g)[(0, 0)].max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Coding;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn binary1() -> ConjointDesign {
        ConjointDesign::uniform(&[2]).unwrap()
    }

    #[test]
    fn weighting_example_point_mass() {
        let d = binary1();
        let s = WeightedSample::new(
            vec![Profile(vec![0]), Profile(vec![0]), Profile(vec![1]), Profile(vec![1])],
            vec![1.0, 3.0, 0.0, 0.0],
        )
        .unwrap();
        let pi = ProfileDistribution::new(&d, vec![vec![1.0, 0.0]]).unwrap();
        assert_abs_diff_eq!(q_weighting(&s, &d, &pi, WeightingMode::HorvitzThompson).unwrap(), 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(q_weighting(&s, &d, &pi, WeightingMode::Hajek).unwrap(), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn unobserved_point_mass() {
        let d = binary1();
        let s = WeightedSample::new(vec![Profile(vec![0]); 3], vec![1.0, 2.0, 3.0]).unwrap();
        let pi = ProfileDistribution::new(&d, vec![vec![0.0, 1.0]]).unwrap();
        assert_eq!(q_weighting(&s, &d, &pi, WeightingMode::HorvitzThompson).unwrap(), 0.0);
        assert!(q_weighting(&s, &d, &pi, WeightingMode::Hajek).is_err());
    }

    #[test]
    fn positivity_violation() {
        let d = ConjointDesign::binary(&[1.0]).unwrap();
        let s = WeightedSample::new(vec![Profile(vec![1])], vec![1.0]).unwrap();
        let pi = ProfileDistribution::uniform(&d);
        assert!(matches!(
            q_weighting(&s, &d, &pi, WeightingMode::HorvitzThompson),
            Err(Error::Positivity(_))
        ));
    }

    #[test]
    fn variance_bound_example() {
        let d = ConjointDesign::uniform(&[2, 2]).unwrap();
        let pi = d.assignment();
        let vb = variance_bound(
            &VarianceBoundInputs {
                sigma2: 1.0,
                second_moment: 0.0,
                n: 100,
            },
            &d,
            &pi,
        )
        .unwrap();
        assert_abs_diff_eq!(vb.max_prob, 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(vb.bound, 0.01, epsilon = 1e-15);
        assert!(vb.uniform_design);
    }

    #[test]
    fn bound_inputs_shift_negative_outcomes() {
        let d = binary1();
        let s = WeightedSample::new(vec![Profile(vec![0]), Profile(vec![1])], vec![-1.0, 1.0]).unwrap();
        let est = estimate_bound_inputs(&s, &d, &d.assignment()).unwrap();
        assert_eq!(est.shift_applied, 1.0);
        assert_abs_diff_eq!(est.inputs.sigma2, 2.0, epsilon = 1e-15);
        // shifted outcomes 0 and 2, squared 0 and 4, unit weights
        assert_abs_diff_eq!(est.inputs.second_moment, 2.0, epsilon = 1e-15);
    }

    #[test]
    fn divergence_examples() {
        let d = ConjointDesign::uniform(&[2, 3]).unwrap();
        let p = d.assignment();
        let t = Profile(vec![1, 2]);
        assert_eq!(strategic_divergence(&p, &p, &t).unwrap(), 0.0);
        let q = ProfileDistribution::new(&d, vec![vec![0.5, 0.5], vec![0.25, 0.25, 0.5]]).unwrap();
        assert_abs_diff_eq!(strategic_divergence(&p, &q, &t).unwrap(), (1.5f64).ln(), epsilon = 1e-14);
        let z = ProfileDistribution::new(&d, vec![vec![1.0, 0.0], vec![0.25, 0.25, 0.5]]).unwrap();
        assert!(matches!(strategic_divergence(&p, &z, &t), Err(Error::ZeroProbability(_))));
    }

    #[test]
    fn divergence_gradient_matches_finite_differences() {
        let d = ConjointDesign::uniform(&[2, 3]).unwrap();
        let a = ProfileDistribution::new(&d, vec![vec![0.3, 0.7], vec![0.2, 0.5, 0.3]]).unwrap();
        let b = ProfileDistribution::new(&d, vec![vec![0.6, 0.4], vec![0.1, 0.1, 0.8]]).unwrap();
        let t = Profile(vec![0, 1]);
        let g = strategic_divergence_gradient(&a, &b, &t).unwrap();
        let flat: Vec<f64> = a.flatten().into_iter().chain(b.flatten()).collect();
        let eval = |x: &[f64]| {
            let mk = |s: &[f64]| ProfileDistribution::from_raw(vec![s[..2].to_vec(), s[2..].to_vec()]);
            strategic_divergence(&mk(&x[..5]), &mk(&x[5..]), &t).unwrap()
        };
        for j in 0..flat.len() {
            let mut up = flat.clone();
            let mut dn = flat.clone();
            up[j] += 1e-6;
            dn[j] -= 1e-6;
            assert_abs_diff_eq!(g[j], (eval(&up) - eval(&dn)) / 2e-6, epsilon = 1e-6);
        }
    }

    #[test]
    fn forced_choice_value_against_design_is_intercept_at_p() {
        let d = ConjointDesign::uniform(&[2, 3]).unwrap();
        let full = [0.5, 0.2, -0.2, 0.1, 0.3, -0.4, 0.05, -0.05, 0.0, -0.05, 0.05, 0.0];
        let m = OutcomeModel::from_full(d.clone(), Response::ForcedChoice, Coding::SumToZero, &full, None).unwrap();
        let p = d.assignment();
        assert_abs_diff_eq!(q_parametric(&m, &p, &p).unwrap(), 0.5, epsilon = 1e-15);
        // Q(π_a, π_b) + Q(π_b, π_a) = 2 · intercept
        let q = ProfileDistribution::new(&d, vec![vec![0.9, 0.1], vec![0.2, 0.2, 0.6]]).unwrap();
        let s = q_parametric(&m, &q, &p).unwrap() + q_parametric(&m, &p, &q).unwrap();
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-14);
        // Expected choice probability by enumeration over profile pairs.
        let support = d.enumerate_support().unwrap();
        let mut brute = 0.0;
        for a in &support {
            for b in &support {
                brute += q.profile_probability(a).unwrap() * p.profile_probability(b).unwrap() * m.choice_probability(a, b);
            }
        }
        assert_abs_diff_eq!(q_parametric(&m, &q, &p).unwrap(), brute, epsilon = 1e-14);
    }

    fn arb_case() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<usize>)> {
        (
            prop::collection::vec(0.05f64..1.0, 3),
            prop::collection::vec(0.0f64..5.0, 40),
            prop::collection::vec(0usize..8, 40),
        )
    }

    proptest! {
        #[test]
        fn ht_equals_cell_mean_route((raw, ys, cells) in arb_case()) {
            let d = ConjointDesign::uniform(&[2, 2, 2]).unwrap();
            let support = d.enumerate_support().unwrap();
            let pi = ProfileDistribution::new(&d, raw.iter().map(|&q| vec![q / 1.05, 1.0 - q / 1.05]).collect()).unwrap();
            let s = WeightedSample::new(cells.iter().map(|&c| support[c].clone()).collect(), ys.clone()).unwrap();
            let ht = q_weighting(&s, &d, &pi, WeightingMode::HorvitzThompson).unwrap();
            // Σ_t Pr_π(t)/Pr_p(t) · (sum of Y in cell t) / n
            let mut sums = [0.0; 8];
            for (&c, &y) in cells.iter().zip(&ys) { sums[c] += y; }
            let route: f64 = (0..8).map(|c| pi.profile_probability(&support[c]).unwrap() * 8.0 * sums[c]).sum::<f64>() / 40.0;
            prop_assert!((ht - route).abs() < 1e-12);
            let hp = q_weighting(&s, &d, &d.assignment(), WeightingMode::HorvitzThompson).unwrap();
            prop_assert!((hp - s.mean()).abs() < 1e-12);
        }

        #[test]
        fn l2_term_dominates_maxprob(raw in prop::collection::vec(0.0f64..1.0, 4)) {
            let d = ConjointDesign::uniform(&[2, 2, 2, 2]).unwrap();
            let pi = ProfileDistribution::new(&d, raw.iter().map(|&q| vec![q, 1.0 - q]).collect()).unwrap();
            let c = compare_penalties(&d, &pi).unwrap();
            prop_assert!(c.l2_term >= c.maxprob_term);
        }
    }
}
