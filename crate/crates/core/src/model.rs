//! Linear outcome models with main effects and pairwise interactions.
//!
//! Coefficients are always exposed on the full-level basis: one main effect
//! per level and one interaction per level pair of every factor pair. The
//! estimated (free) parameters are the intercept plus all entries that do not
//! involve a factor's last level; the coding decides how the remaining
//! entries follow from them (zero under baseline coding, negative sums under
//! sum-to-zero coding).

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataio::{ForcedChoiceDataset, Stage};
use crate::design::{ConjointDesign, Profile};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coding {
    #[default]
    SumToZero,
    Baseline,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VcovKind {
    Iid,
    #[default]
    Cluster,
}

/// What the model predicts: the probability that the first of two profiles
/// is chosen, or a scalar outcome of a single profile.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Response {
    #[default]
    ForcedChoice,
    Single,
}

/// Polynomial in the per-factor level probabilities:
/// c + Σ_d Σ_l m[d][l] π_dl + Σ_{d<e} Σ_{l,k} γ_de[l][k] π_dl π_ek.
#[derive(Clone, Debug, PartialEq)]
pub struct Polynomial {
    pub constant: f64,
    pub main: Vec<Vec<f64>>,
    pub pairs: Vec<PairBlock>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairBlock {
    pub d: usize,
    pub e: usize,
    pub coef: Vec<Vec<f64>>,
}

impl Polynomial {
    pub fn value(&self, pi: &[Vec<f64>]) -> f64 {
        let mut v = self.constant;
        for (m, p) in self.main.iter().zip(pi) {
            v += m.iter().zip(p).map(|(a, b)| a * b).sum::<f64>();
        }
        for b in &self.pairs {
            for (l, row) in b.coef.iter().enumerate() {
                let s: f64 = row.iter().zip(&pi[b.e]).map(|(g, q)| g * q).sum();
                v += pi[b.d][l] * s;
            }
        }
        v
    }

    /// ∂/∂π_dl for every level, treating levels as unconstrained.
    pub fn gradient(&self, pi: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut g = self.main.clone();
        for b in &self.pairs {
            for (l, row) in b.coef.iter().enumerate() {
                for (k, &c) in row.iter().enumerate() {
                    g[b.d][l] += c * pi[b.e][k];
                    g[b.e][k] += c * pi[b.d][l];
                }
            }
        }
        g
    }

    /// Value at a single profile (point-mass distribution).
    pub fn at_profile(&self, t: &Profile) -> f64 {
        let l = &t.0;
        let mut v = self.constant;
        for (d, m) in self.main.iter().enumerate() {
            v += m[l[d]];
        }
        for b in &self.pairs {
            v += b.coef[l[b.d]][l[b.e]];
        }
        v
    }

    /// Equivalent polynomial on the product of simplices whose main effects
    /// sum to zero within each factor and whose interaction blocks have zero
    /// row and column sums. The constant absorbs what was removed.
    pub fn centered(&self) -> Polynomial {
        let mut out = self.clone();
        for b in &mut out.pairs {
            let (nl, nk) = (b.coef.len(), b.coef[0].len());
            let grand = b.coef.iter().flatten().sum::<f64>() / (nl * nk) as f64;
            let rows: Vec<f64> = b.coef.iter().map(|r| r.iter().sum::<f64>() / nk as f64 - grand).collect();
            let cols: Vec<f64> = (0..nk)
                .map(|k| b.coef.iter().map(|r| r[k]).sum::<f64>() / nl as f64 - grand)
                .collect();
            for l in 0..nl {
                for k in 0..nk {
                    b.coef[l][k] -= rows[l] + cols[k] + grand;
                }
            }
            for l in 0..nl {
                out.main[b.d][l] += rows[l];
            }
            for k in 0..nk {
                out.main[b.e][k] += cols[k];
            }
            out.constant += grand;
        }
        for m in &mut out.main {
            let mean = m.iter().sum::<f64>() / m.len() as f64;
            m.iter_mut().for_each(|v| *v -= mean);
            out.constant += mean;
        }
        out
    }

    /// Equivalent polynomial on the product of simplices with every entry that
    /// touches a factor's last level set to zero (last level as reference).
    pub fn eliminate_last(&self) -> Polynomial {
        let mut out = self.clone();
        for b in &mut out.pairs {
            let (ld, le) = (b.coef.len() - 1, b.coef[0].len() - 1);
            let c = b.coef.clone();
            for l in 0..ld {
                out.main[b.d][l] += c[l][le] - c[ld][le];
            }
            for k in 0..le {
                out.main[b.e][k] += c[ld][k] - c[ld][le];
            }
            out.constant += c[ld][le];
            for l in 0..=ld {
                for k in 0..=le {
                    b.coef[l][k] = if l < ld && k < le {
                        c[l][k] - c[l][le] - c[ld][k] + c[ld][le]
                    } else {
                        0.0
                    };
                }
            }
        }
        for m in &mut out.main {
            let last = *m.last().expect("two levels");
            m.iter_mut().for_each(|v| *v -= last);
            out.constant += last;
        }
        out
    }
}

/// Index bookkeeping for the full-level coefficient vector:
/// `[intercept, main(d, l)…, pair(d, e)(l, k)…]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefLayout {
    counts: Vec<usize>,
    main_off: Vec<usize>,
    pairs: Vec<(usize, usize)>,
    pair_off: Vec<usize>,
    n_full: usize,
    free: Vec<usize>,
}

impl CoefLayout {
    pub fn new(counts: &[usize]) -> Self {
        let mut off = 1;
        let mut main_off = Vec::new();
        for &l in counts {
            main_off.push(off);
            off += l;
        }
        let mut pairs = Vec::new();
        let mut pair_off = Vec::new();
        for d in 0..counts.len() {
            for e in d + 1..counts.len() {
                pairs.push((d, e));
                pair_off.push(off);
                off += counts[d] * counts[e];
            }
        }
        let mut free = vec![0];
        for (d, &l) in counts.iter().enumerate() {
            free.extend((0..l - 1).map(|k| main_off[d] + k));
        }
        for (p, &(d, e)) in pairs.iter().enumerate() {
            for l in 0..counts[d] - 1 {
                free.extend((0..counts[e] - 1).map(|k| pair_off[p] + l * counts[e] + k));
            }
        }
        Self {
            counts: counts.to_vec(),
            main_off,
            pairs,
            pair_off,
            n_full: off,
            free,
        }
    }

    pub fn n_full(&self) -> usize {
        self.n_full
    }

    pub fn n_free(&self) -> usize {
        self.free.len()
    }

    pub fn free_indices(&self) -> &[usize] {
        &self.free
    }

    pub fn main_index(&self, d: usize, l: usize) -> usize {
        self.main_off[d] + l
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn pair_index(&self, p: usize, l: usize, k: usize) -> usize {
        self.pair_off[p] + l * self.counts[self.pairs[p].1] + k
    }

    /// Full-basis keys: `intercept`, `main:<factor>:<level>`, `int:<f1>:<l1>:<f2>:<l2>`.
    pub fn keys(&self, design: &ConjointDesign) -> Vec<String> {
        let f = design.factors();
        let mut keys = vec!["intercept".to_string()];
        for fac in f {
            keys.extend(fac.levels.iter().map(|l| format!("main:{}:{l}", fac.name)));
        }
        for &(d, e) in &self.pairs {
            for l in &f[d].levels {
                for k in &f[e].levels {
                    keys.push(format!("int:{}:{l}:{}:{k}", f[d].name, f[e].name));
                }
            }
        }
        keys
    }

    /// Linear map from free to full coefficients.
    pub fn expansion(&self, coding: Coding) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n_full, self.n_free());
        let col_of: BTreeMap<usize, usize> = self.free.iter().enumerate().map(|(j, &i)| (i, j)).collect();
        for (j, &i) in self.free.iter().enumerate() {
            m[(i, j)] = 1.0;
        }
        if coding == Coding::Baseline {
            return m;
        }
        for (d, &l) in self.counts.iter().enumerate() {
            let last = self.main_index(d, l - 1);
            for k in 0..l - 1 {
                m[(last, col_of[&self.main_index(d, k)])] = -1.0;
            }
        }
        for p in 0..self.pairs.len() {
            let (d, e) = self.pairs[p];
            let (ld, le) = (self.counts[d] - 1, self.counts[e] - 1);
            for l in 0..ld {
                for k in 0..le {
                    let j = col_of[&self.pair_index(p, l, k)];
                    m[(self.pair_index(p, l, le), j)] = -1.0;
                    m[(self.pair_index(p, ld, k), j)] = -1.0;
                    m[(self.pair_index(p, ld, le), j)] = 1.0;
                }
            }
        }
        m
    }

    /// Full-basis regressor row of indicator values for one profile.
    fn indicators(&self, t: &Profile, out: &mut [f64], sign: f64) {
        for (d, &l) in t.0.iter().enumerate() {
            out[self.main_index(d, l)] += sign;
        }
        for (p, &(d, e)) in self.pairs.iter().enumerate() {
            out[self.pair_index(p, t.0[d], t.0[e])] += sign;
        }
    }

    pub fn profile_row(&self, t: &Profile) -> Vec<f64> {
        let mut row = vec![0.0; self.n_full];
        row[0] = 1.0;
        self.indicators(t, &mut row, 1.0);
        row
    }

    pub fn difference_row(&self, a: &Profile, b: &Profile) -> Vec<f64> {
        let mut row = vec![0.0; self.n_full];
        row[0] = 1.0;
        self.indicators(a, &mut row, 1.0);
        self.indicators(b, &mut row, -1.0);
        row
    }

    fn polynomial(&self, full: &[f64]) -> Polynomial {
        Polynomial {
            constant: full[0],
            main: self
                .counts
                .iter()
                .enumerate()
                .map(|(d, &l)| full[self.main_off[d]..self.main_off[d] + l].to_vec())
                .collect(),
            pairs: self
                .pairs
                .iter()
                .enumerate()
                .map(|(p, &(d, e))| PairBlock {
                    d,
                    e,
                    coef: (0..self.counts[d])
                        .map(|l| (0..self.counts[e]).map(|k| full[self.pair_index(p, l, k)]).collect())
                        .collect(),
                })
                .collect(),
        }
    }
}

/// Regressor row for a forced-choice task: intercept, then indicator
/// differences (profile a minus profile b) for main effects and pairwise
/// products. Baseline coding drops every column touching a last level;
/// sum-to-zero coding returns the full-level row.
pub fn build_difference_design_row(a: &Profile, b: &Profile, design: &ConjointDesign, coding: Coding) -> Vec<f64> {
    let layout = CoefLayout::new(&design.level_counts());
    let full = layout.difference_row(a, b);
    match coding {
        Coding::SumToZero => full,
        Coding::Baseline => layout.free.iter().map(|&i| full[i]).collect(),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelTag {
    pub group: Option<String>,
    pub stage: Option<Stage>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutcomeModel {
    design: ConjointDesign,
    response: Response,
    coding: Coding,
    layout: CoefLayout,
    theta: Vec<f64>,
    covariance: DMatrix<f64>,
    poly: Polynomial,
    pub n_obs: usize,
    pub sigma2: f64,
    pub tag: ModelTag,
}

const CONSTRAINT_TOL: f64 = 1e-9;

impl OutcomeModel {
    /// Builds a model from its free parameters. A missing covariance is zero.
    pub fn from_free(
        design: ConjointDesign,
        response: Response,
        coding: Coding,
        theta: Vec<f64>,
        covariance: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        let layout = CoefLayout::new(&design.level_counts());
        let p = layout.n_free();
        if theta.len() != p {
            return Err(Error::ShapeMismatch(format!("expected {p} free coefficients, got {}", theta.len())));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite coefficient".into()));
        }
        let covariance = covariance.unwrap_or_else(|| DMatrix::zeros(p, p));
        if covariance.shape() != (p, p) {
            return Err(Error::ShapeMismatch("covariance shape does not match coefficients".into()));
        }
        let full = layout.expansion(coding) * DVector::from_column_slice(&theta);
        let poly = layout.polynomial(full.as_slice());
        Ok(Self {
            design,
            response,
            coding,
            layout,
            theta,
            covariance,
            poly,
            n_obs: 0,
            sigma2: 0.0,
            tag: ModelTag::default(),
        })
    }

    /// Builds a model from full-level coefficients, checking that they obey
    /// the coding's constraints.
    pub fn from_full(
        design: ConjointDesign,
        response: Response,
        coding: Coding,
        full: &[f64],
        covariance_full: Option<&DMatrix<f64>>,
    ) -> Result<Self> {
        let layout = CoefLayout::new(&design.level_counts());
        if full.len() != layout.n_full() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} full coefficients, got {}",
                layout.n_full(),
                full.len()
            )));
        }
        let theta: Vec<f64> = layout.free.iter().map(|&i| full[i]).collect();
        let cov = covariance_full.map(|c| {
            let f = &layout.free;
            DMatrix::from_fn(f.len(), f.len(), |i, j| c[(f[i], f[j])])
        });
        let model = Self::from_free(design, response, coding, theta, cov)?;
        let rebuilt = model.full_coefficients();
        let scale = full.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        if let Some(i) = (0..full.len()).find(|&i| (rebuilt[i] - full[i]).abs() > CONSTRAINT_TOL * scale) {
            let key = &model.full_keys()[i];
            return Err(Error::InvalidArgument(format!(
                "coefficient `{key}` = {} violates {:?} coding (implied {})",
                full[i], coding, rebuilt[i]
            )));
        }
        Ok(model)
    }

    /// Same model with new free parameters (used by finite differences).
    pub fn with_theta(&self, theta: &[f64]) -> Result<Self> {
        let mut m = Self::from_free(
            self.design.clone(),
            self.response,
            self.coding,
            theta.to_vec(),
            Some(self.covariance.clone()),
        )?;
        m.n_obs = self.n_obs;
        m.sigma2 = self.sigma2;
        m.tag = self.tag.clone();
        Ok(m)
    }

    pub fn design(&self) -> &ConjointDesign {
        &self.design
    }
    pub fn response(&self) -> Response {
        self.response
    }
    pub fn coding(&self) -> Coding {
        self.coding
    }
    pub fn layout(&self) -> &CoefLayout {
        &self.layout
    }
    pub fn theta(&self) -> &[f64] {
        &self.theta
    }
    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }
    pub fn polynomial(&self) -> &Polynomial {
        &self.poly
    }
    pub fn intercept(&self) -> f64 {
        self.poly.constant
    }
    pub fn main(&self, d: usize, l: usize) -> f64 {
        self.poly.main[d][l]
    }

    /// Interaction between level `l` of factor `d` and level `k` of factor `e`, in either order.
    pub fn interaction(&self, d: usize, l: usize, e: usize, k: usize) -> f64 {
        let (d, l, e, k) = if d < e { (d, l, e, k) } else { (e, k, d, l) };
        let p = self.layout.pairs.iter().position(|&x| x == (d, e)).expect("distinct factors");
        self.poly.pairs[p].coef[l][k]
    }

    pub fn full_coefficients(&self) -> Vec<f64> {
        let e = self.layout.expansion(self.coding);
        (e * DVector::from_column_slice(&self.theta)).as_slice().to_vec()
    }

    pub fn full_covariance(&self) -> DMatrix<f64> {
        let e = self.layout.expansion(self.coding);
        &e * &self.covariance * e.transpose()
    }

    pub fn full_keys(&self) -> Vec<String> {
        self.layout.keys(&self.design)
    }

    pub fn free_keys(&self) -> Vec<String> {
        let keys = self.full_keys();
        self.layout.free.iter().map(|&i| keys[i].clone()).collect()
    }

    /// Sum of main and interaction terms at a profile, without the intercept.
    pub fn utility(&self, t: &Profile) -> f64 {
        self.poly.at_profile(t) - self.poly.constant
    }

    /// Linear-probability prediction that `a` is chosen over `b`.
    pub fn choice_probability(&self, a: &Profile, b: &Profile) -> f64 {
        self.poly.constant + self.utility(a) - self.utility(b)
    }

    /// Prediction for a single profile.
    pub fn predict_single(&self, t: &Profile) -> f64 {
        self.poly.at_profile(t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, crate::json::to_string(&self.to_doc())?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let doc: ModelDoc = serde_json::from_str(&text)?;
        Self::from_doc(doc)
    }

    pub fn to_doc(&self) -> ModelDoc {
        let keys = self.full_keys();
        let full = self.full_coefficients();
        ModelDoc {
            response: self.response,
            coding: self.coding,
            design: self.design.clone(),
            tag: self.tag.clone(),
            n_obs: self.n_obs,
            sigma2: self.sigma2,
            coefficients: OrderedMap(keys.iter().cloned().zip(full).collect()),
            covariance: CovarianceDoc {
                keys,
                values: self.full_covariance().transpose().as_slice().to_vec(),
            },
        }
    }

    pub fn from_doc(doc: ModelDoc) -> Result<Self> {
        let layout = CoefLayout::new(&doc.design.level_counts());
        let keys = layout.keys(&doc.design);
        let coefs: BTreeMap<&str, f64> = doc.coefficients.0.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        let full: Vec<f64> = keys
            .iter()
            .map(|k| {
                coefs
                    .get(k.as_str())
                    .copied()
                    .ok_or_else(|| Error::Schema(format!("model file lacks coefficient `{k}`")))
            })
            .collect::<Result<_>>()?;
        let n = doc.covariance.keys.len();
        if doc.covariance.values.len() != n * n {
            return Err(Error::Schema("covariance values do not match its key list".into()));
        }
        let pos: BTreeMap<&str, usize> = doc.covariance.keys.iter().enumerate().map(|(i, k)| (k.as_str(), i)).collect();
        let idx: Vec<usize> = keys
            .iter()
            .map(|k| pos.get(k.as_str()).copied().ok_or_else(|| Error::Schema(format!("covariance lacks `{k}`"))))
            .collect::<Result<_>>()?;
        let cov = DMatrix::from_fn(keys.len(), keys.len(), |i, j| doc.covariance.values[idx[i] * n + idx[j]]);
        let mut model = Self::from_full(doc.design, doc.response, doc.coding, &full, Some(&cov))?;
        model.n_obs = doc.n_obs;
        model.sigma2 = doc.sigma2;
        model.tag = doc.tag;
        Ok(model)
    }
}

/// String-keyed map that serializes in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct OrderedMap(pub Vec<(String, f64)>);

impl Serialize for OrderedMap {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_map(self.0.iter().map(|(k, v)| (k, v)))
    }
}

impl<'de> Deserialize<'de> for OrderedMap {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let m = BTreeMap::<String, f64>::deserialize(d)?;
        Ok(OrderedMap(m.into_iter().collect()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceDoc {
    pub keys: Vec<String>,
    /// Dense row-major values in `keys` order.
    pub values: Vec<f64>,
}

/// On-disk model representation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDoc {
    pub response: Response,
    pub coding: Coding,
    pub design: ConjointDesign,
    #[serde(default)]
    pub tag: ModelTag,
    #[serde(default)]
    pub n_obs: usize,
    #[serde(default)]
    pub sigma2: f64,
    pub coefficients: OrderedMap,
    pub covariance: CovarianceDoc,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitSpec {
    pub coding: Coding,
    pub vcov: VcovKind,
    pub group: Option<String>,
    pub stage: Option<Stage>,
}

struct OlsFit {
    theta: Vec<f64>,
    covariance: DMatrix<f64>,
    sigma2: f64,
}

/// Relative threshold on |diag R| below which a column counts as aliased.
const RANK_TOL: f64 = 1e-10;

fn ols(x: &DMatrix<f64>, y: &[f64], clusters: Option<&[usize]>, vcov: VcovKind, names: &[String]) -> Result<OlsFit> {
    let (n, p) = x.shape();
    if n < p + 1 {
        return Err(Error::InsufficientData(format!("{n} observations for {p} coefficients")));
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let dmax = (0..p).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    let aliased: Vec<String> = (0..p)
        .filter(|&i| r[(i, i)].abs() <= RANK_TOL * dmax)
        .map(|i| names[i].clone())
        .collect();
    if !aliased.is_empty() || dmax == 0.0 {
        return Err(Error::SingularFit(aliased));
    }
    let mut qty = DVector::from_column_slice(y);
    qr.q_tr_mul(&mut qty);
    let theta = r
        .solve_upper_triangular(&qty.rows(0, p).into_owned())
        .ok_or_else(|| Error::NumericalFailure("triangular solve failed".into()))?;
    let rinv = r
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or_else(|| Error::NumericalFailure("triangular inverse failed".into()))?;
    let bread = &rinv * rinv.transpose();
    let resid = DVector::from_column_slice(y) - x * &theta;
    let sigma2 = resid.norm_squared() / (n - p) as f64;
    let covariance = match vcov {
        VcovKind::Iid => &bread * sigma2,
        VcovKind::Cluster => {
            let raw: Vec<usize> = match clusters {
                Some(c) => c.to_vec(),
                None => (0..n).collect(),
            };
            let mut dense = BTreeMap::new();
            let ids: Vec<usize> = raw
                .iter()
                .map(|&c| {
                    let next = dense.len();
                    *dense.entry(c).or_insert(next)
                })
                .collect();
            let g = dense.len();
            if g < 2 {
                return Err(Error::InsufficientData("cluster covariance needs at least two clusters".into()));
            }
            let mut scores = DMatrix::<f64>::zeros(g, p);
            for i in 0..n {
                for j in 0..p {
                    scores[(ids[i], j)] += x[(i, j)] * resid[i];
                }
            }
            let meat = scores.transpose() * &scores;
            let gf = g as f64;
            let adj = gf / (gf - 1.0) * (n as f64 - 1.0) / (n - p) as f64;
            let v = &bread * meat * &bread * adj;
            (&v + v.transpose()) * 0.5
        }
    };
    Ok(OlsFit {
        theta: theta.as_slice().to_vec(),
        covariance,
        sigma2,
    })
}

/// Dense cluster ids in first-appearance order.
fn cluster_ids<'a>(ids: impl Iterator<Item = &'a str>) -> Vec<usize> {
    let mut map = BTreeMap::new();
    ids.map(|s| {
        let next = map.len();
        *map.entry(s).or_insert(next)
    })
    .collect()
}

/// Least-squares linear probability model of `chose_a` on regressor
/// differences, after filtering to the requested group and stage.
pub fn fit_outcome_model(data: &ForcedChoiceDataset, spec: &FitSpec) -> Result<OutcomeModel> {
    let design = data.design();
    let layout = CoefLayout::new(&design.level_counts());
    let records: Vec<_> = data
        .records()
        .iter()
        .filter(|r| spec.group.as_ref().is_none_or(|g| &r.group == g))
        .filter(|r| spec.stage.is_none_or(|s| r.stage == s))
        .collect();
    let e = layout.expansion(spec.coding);
    let mut x = DMatrix::zeros(records.len(), layout.n_free());
    for (i, r) in records.iter().enumerate() {
        let z = DVector::from_vec(layout.difference_row(&r.profile_a, &r.profile_b));
        let f = e.tr_mul(&z);
        x.row_mut(i).copy_from(&f.transpose());
    }
    let y: Vec<f64> = records.iter().map(|r| if r.chose_a { 1.0 } else { 0.0 }).collect();
    let clusters = cluster_ids(records.iter().map(|r| r.respondent_id.as_str()));
    let names = free_names(&layout, design);
    let fit = ols(&x, &y, Some(&clusters), spec.vcov, &names)?;
    let mut model = OutcomeModel::from_free(
        design.clone(),
        Response::ForcedChoice,
        spec.coding,
        fit.theta,
        Some(fit.covariance),
    )?;
    model.n_obs = records.len();
    model.sigma2 = fit.sigma2;
    model.tag = ModelTag {
        group: spec.group.clone(),
        stage: spec.stage,
    };
    Ok(model)
}

/// Least-squares model of a scalar outcome on single-profile indicators.
/// `clusters` defaults to one cluster per observation.
pub fn fit_single_outcome_model(
    design: &ConjointDesign,
    profiles: &[Profile],
    y: &[f64],
    clusters: Option<&[usize]>,
    coding: Coding,
    vcov: VcovKind,
) -> Result<OutcomeModel> {
    if profiles.len() != y.len() {
        return Err(Error::ShapeMismatch("profiles and outcomes differ in length".into()));
    }
    let layout = CoefLayout::new(&design.level_counts());
    let e = layout.expansion(coding);
    let mut x = DMatrix::zeros(profiles.len(), layout.n_free());
    for (i, t) in profiles.iter().enumerate() {
        let z = DVector::from_vec(layout.profile_row(t));
        x.row_mut(i).copy_from(&e.tr_mul(&z).transpose());
    }
    let names = free_names(&layout, design);
    let fit = ols(&x, y, clusters, vcov, &names)?;
    let mut model = OutcomeModel::from_free(design.clone(), Response::Single, coding, fit.theta, Some(fit.covariance))?;
    model.n_obs = y.len();
    model.sigma2 = fit.sigma2;
    Ok(model)
}

fn free_names(layout: &CoefLayout, design: &ConjointDesign) -> Vec<String> {
    let keys = layout.keys(design);
    layout.free.iter().map(|&i| keys[i].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::TaskRecord;
    use crate::design::ProfileDistribution;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dataset(counts: &[usize], n: usize, seed: u64) -> ForcedChoiceDataset {
        let design = ConjointDesign::uniform(counts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw = |rng: &mut ChaCha8Rng| Profile(counts.iter().map(|&l| rng.gen_range(0..l)).collect());
        let records = (0..n)
            .map(|i| {
                let a = draw(&mut rng);
                let b = draw(&mut rng);
                TaskRecord {
                    respondent_id: format!("r{}", i / 4),
                    task_id: (i % 4).to_string(),
                    chose_a: rng.gen_bool(0.5 + 0.1 * (a.0[0] as f64 - b.0[0] as f64)),
                    profile_a: a,
                    profile_b: b,
                    group: "g".into(),
                    stage: Stage::General,
                }
            })
            .collect();
        ForcedChoiceDataset::new(design, records).unwrap()
    }

    #[test]
    fn difference_row_examples() {
        let d = ConjointDesign::uniform(&[2]).unwrap();
        let row = build_difference_design_row(&Profile(vec![0]), &Profile(vec![1]), &d, Coding::Baseline);
        assert_eq!(row, vec![1.0, 1.0]);
        let d = ConjointDesign::uniform(&[3, 2]).unwrap();
        let a = Profile(vec![1, 0]);
        assert!(build_difference_design_row(&a, &a, &d, Coding::SumToZero)[1..].iter().all(|&v| v == 0.0));
        let row = build_difference_design_row(&a, &Profile(vec![2, 1]), &d, Coding::SumToZero);
        assert!(row.iter().all(|v| [-1.0, 0.0, 1.0].contains(v)));
    }

    #[test]
    fn saturated_binary_recovers_half_difference() {
        let design = ConjointDesign::uniform(&[2]).unwrap();
        let mut records = Vec::new();
        let mut push = |a: usize, b: usize, chose: bool, i: usize| {
            records.push(TaskRecord {
                respondent_id: format!("r{i}"),
                task_id: "1".into(),
                profile_a: Profile(vec![a]),
                profile_b: Profile(vec![b]),
                chose_a: chose,
                group: "g".into(),
                stage: Stage::General,
            })
        };
        // Cell (a=0, b=1): 7 of 10 chose a. Cell (a=1, b=0): 2 of 6 chose a.
        for i in 0..10 {
            push(0, 1, i < 7, i);
        }
        for i in 0..6 {
            push(1, 0, i < 2, 100 + i);
        }
        let data = ForcedChoiceDataset::new(design, records).unwrap();
        let spec = FitSpec {
            coding: Coding::Baseline,
            vcov: VcovKind::Iid,
            ..Default::default()
        };
        let m = fit_outcome_model(&data, &spec).unwrap();
        assert_abs_diff_eq!(m.main(0, 0), (0.7 - 2.0 / 6.0) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_outcome_fits_exactly() {
        let data = random_dataset(&[2, 3], 60, 3);
        let records: Vec<_> = data
            .records()
            .iter()
            .cloned()
            .map(|mut r| {
                r.chose_a = true;
                r
            })
            .collect();
        let data = ForcedChoiceDataset::new(data.design().clone(), records).unwrap();
        let m = fit_outcome_model(&data, &FitSpec::default()).unwrap();
        assert_abs_diff_eq!(m.intercept(), 1.0, epsilon = 1e-10);
        assert!(m.full_coefficients()[1..].iter().all(|v| v.abs() < 1e-10));
        assert!(m.sigma2 < 1e-20);
    }

    #[test]
    fn duplicated_factor_is_aliased() {
        let data = random_dataset(&[2, 2], 80, 9);
        let records: Vec<_> = data
            .records()
            .iter()
            .cloned()
            .map(|mut r| {
                r.profile_a.0[1] = r.profile_a.0[0];
                r.profile_b.0[1] = r.profile_b.0[0];
                r
            })
            .collect();
        let data = ForcedChoiceDataset::new(data.design().clone(), records).unwrap();
        match fit_outcome_model(&data, &FitSpec::default()) {
            Err(Error::SingularFit(cols)) => assert!(!cols.is_empty()),
            other => panic!("expected singular fit, got {other:?}"),
        }
    }

    #[test]
    fn sum_to_zero_constraints_hold() {
        let data = random_dataset(&[3, 2, 4], 400, 5);
        let m = fit_outcome_model(&data, &FitSpec::default()).unwrap();
        let poly = m.polynomial();
        for main in &poly.main {
            assert!(main.iter().sum::<f64>().abs() < 1e-12);
        }
        for b in &poly.pairs {
            for row in &b.coef {
                assert!(row.iter().sum::<f64>().abs() < 1e-12);
            }
            for k in 0..b.coef[0].len() {
                assert!(b.coef.iter().map(|r| r[k]).sum::<f64>().abs() < 1e-12);
            }
        }
    }

    #[test]
    fn codings_give_identical_predictions() {
        let data = random_dataset(&[3, 2], 300, 8);
        let a = fit_outcome_model(&data, &FitSpec::default()).unwrap();
        let b = fit_outcome_model(
            &data,
            &FitSpec {
                coding: Coding::Baseline,
                ..Default::default()
            },
        )
        .unwrap();
        for r in data.records() {
            let pa = a.choice_probability(&r.profile_a, &r.profile_b);
            let pb = b.choice_probability(&r.profile_a, &r.profile_b);
            assert_abs_diff_eq!(pa, pb, epsilon = 1e-10);
        }
    }

    #[test]
    fn swapping_sides_flips_intercept_only() {
        let data = random_dataset(&[2, 3], 200, 21);
        let swapped: Vec<_> = data
            .records()
            .iter()
            .cloned()
            .map(|mut r| {
                std::mem::swap(&mut r.profile_a, &mut r.profile_b);
                r.chose_a = !r.chose_a;
                r
            })
            .collect();
        let swapped = ForcedChoiceDataset::new(data.design().clone(), swapped).unwrap();
        let a = fit_outcome_model(&data, &FitSpec::default()).unwrap();
        let b = fit_outcome_model(&swapped, &FitSpec::default()).unwrap();
        assert_abs_diff_eq!(a.intercept(), 1.0 - b.intercept(), epsilon = 1e-10);
        for (x, y) in a.theta()[1..].iter().zip(&b.theta()[1..]) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-10);
        }
    }

    #[test]
    fn iid_covariance_matches_normal_equations() {
        let design = ConjointDesign::uniform(&[2, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let profiles: Vec<Profile> = (0..120)
            .map(|_| Profile(vec![rng.gen_range(0..2), rng.gen_range(0..3)]))
            .collect();
        let y: Vec<f64> = profiles.iter().map(|t| t.0[0] as f64 + rng.gen::<f64>()).collect();
        let m = fit_single_outcome_model(&design, &profiles, &y, None, Coding::Baseline, VcovKind::Iid).unwrap();
        let layout = m.layout().clone();
        let x = DMatrix::from_fn(profiles.len(), layout.n_free(), |i, j| {
            layout.profile_row(&profiles[i])[layout.free_indices()[j]]
        });
        let xtx = x.transpose() * &x;
        let inv = xtx.clone().try_inverse().unwrap();
        let beta = &inv * x.transpose() * DVector::from_column_slice(&y);
        for (a, b) in beta.iter().zip(m.theta()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
        let expect = inv * m.sigma2;
        assert!((expect - m.covariance()).amax() < 1e-12);
    }

    #[test]
    fn json_round_trip_preserves_model() {
        let data = random_dataset(&[2, 3], 200, 1);
        let m = fit_outcome_model(&data, &FitSpec::default()).unwrap();
        let text = crate::json::to_string(&m.to_doc()).unwrap();
        let back = OutcomeModel::from_doc(serde_json::from_str(&text).unwrap()).unwrap();
        for (a, b) in m.theta().iter().zip(back.theta()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
        assert!((m.covariance() - back.covariance()).amax() < 1e-15);
        assert!(text.contains("\"main:f1:l1\""));
        assert!(text.contains("\"int:f1:l1:f2:l3\""));
    }

    #[test]
    fn from_full_rejects_inconsistent_coefficients() {
        let d = ConjointDesign::uniform(&[2]).unwrap();
        assert!(OutcomeModel::from_full(d.clone(), Response::Single, Coding::SumToZero, &[0.0, 1.0, -1.0], None).is_ok());
        assert!(OutcomeModel::from_full(d, Response::Single, Coding::SumToZero, &[0.0, 1.0, 1.0], None).is_err());
    }

    fn arb_poly_and_pi() -> impl Strategy<Value = (Vec<usize>, Vec<f64>, Vec<Vec<f64>>)> {
        prop::collection::vec(2usize..4, 1..4).prop_flat_map(|counts| {
            let layout = CoefLayout::new(&counts);
            let n = layout.n_full();
            let pis: Vec<_> = counts
                .iter()
                .map(|&l| prop::collection::vec(0.05f64..1.0, l))
                .collect();
            (Just(counts), prop::collection::vec(-2.0f64..2.0, n), pis)
        })
    }

    proptest! {
        #[test]
        fn reparameterizations_agree_on_simplex((counts, full, raw) in arb_poly_and_pi()) {
            let poly = CoefLayout::new(&counts).polynomial(&full);
            let pi: Vec<Vec<f64>> = raw.into_iter().map(|v| { let s: f64 = v.iter().sum(); v.into_iter().map(|x| x / s).collect() }).collect();
            let v = poly.value(&pi);
            prop_assert!((poly.centered().value(&pi) - v).abs() < 1e-10);
            let el = poly.eliminate_last();
            prop_assert!((el.value(&pi) - v).abs() < 1e-10);
            for m in &el.main { prop_assert!(m.last().unwrap().abs() < 1e-15); }
        }

        #[test]
        fn gradient_matches_finite_differences((counts, full, raw) in arb_poly_and_pi()) {
            let poly = CoefLayout::new(&counts).polynomial(&full);
            let g = poly.gradient(&raw);
            let h = 1e-6;
            for d in 0..raw.len() {
                for l in 0..raw[d].len() {
                    let mut up = raw.clone();
                    let mut dn = raw.clone();
                    up[d][l] += h;
                    dn[d][l] -= h;
                    let fd = (poly.value(&up) - poly.value(&dn)) / (2.0 * h);
                    prop_assert!((fd - g[d][l]).abs() < 1e-7);
                }
            }
        }

        #[test]
        fn point_mass_value_equals_profile_evaluation((counts, full, _raw) in arb_poly_and_pi()) {
            let poly = CoefLayout::new(&counts).polynomial(&full);
            let design = ConjointDesign::uniform(&counts).unwrap();
            for t in design.enumerate_support().unwrap() {
                let pm: Vec<Vec<f64>> = counts.iter().zip(&t.0).map(|(&l, &x)| (0..l).map(|k| if k == x { 1.0 } else { 0.0 }).collect()).collect();
                prop_assert!((poly.value(&pm) - poly.at_profile(&t)).abs() < 1e-12);
            }
            let _ = ProfileDistribution::uniform(&design);
        }
    }
}
