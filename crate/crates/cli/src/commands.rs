use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use stochint::ascent::{
    one_step_estimate, two_step_from_model, AscentConfig, OneStepSpec, PenaltyConfig, PenaltyKind, SgaConfig, SolveMethod,
    StrategyEstimate, TwoStepSpec,
};
use stochint::closed::{solve_closed, ClosedFormSolution};
use stochint::dataio::load_dataset;
use stochint::design::{ConjointDesign, Profile, ProfileDistribution};
use stochint::estim::{compare_penalties, estimate_bound_inputs, strategic_divergence, strategic_divergence_se, variance_bound, WeightedSample};
use stochint::game::{deviation_check, equilibrium_with_inference, grid_oracle, solve_equilibrium, EquilibriumResult, GameConfig, InstitutionSpec};
use stochint::infer::{DeltaConfig, InferenceDoc};
use stochint::json::Ordered;
use stochint::mc::{run_adversarial, run_average_case, AdversarialDgp, AverageCaseDgp};
use stochint::model::{fit_outcome_model, FitSpec, OutcomeModel};
use stochint::Exec;

use crate::args::*;
use crate::output::{num, write, Sink};

/// Raised after a result has been written whose solver did not converge.
#[derive(Debug)]
pub struct NotConverged(pub String);

impl std::fmt::Display for NotConverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} did not converge; result written with converged = false", self.0)
    }
}

impl std::error::Error for NotConverged {}

pub fn exec() -> Exec {
    if cfg!(feature = "parallel") {
        Exec::Parallel
    } else {
        Exec::Sequential
    }
}

fn load_design(path: &Path) -> Result<ConjointDesign> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading design {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing design {}", path.display()))
}

fn load_model(path: &Path) -> Result<OutcomeModel> {
    OutcomeModel::load(path).with_context(|| format!("loading model {}", path.display()))
}

pub fn fit(args: &FitArgs) -> Result<()> {
    let design = load_design(&args.design)?;
    let data = load_dataset(&args.data, &design).with_context(|| format!("loading data {}", args.data.display()))?;
    let spec = FitSpec {
        coding: args.coding.into(),
        vcov: args.vcov.into(),
        group: args.group.clone(),
        stage: args.stage.map(Into::into),
    };
    let model = fit_outcome_model(&data, &spec)?;
    let sink = Sink {
        command: "fit",
        config: args,
        seed: None,
        inputs: vec![args.design.clone(), args.data.clone()],
        out_dir: args.out_dir.clone(),
    };
    sink.primary(&args.name, &model.to_doc())
}

fn lambda_grid(args: &OptimizeArgs) -> Result<Vec<f64>> {
    let mut grid = args.lambda_grid.clone();
    if let Some(l) = args.lambda {
        if !grid.is_empty() {
            bail!("give either --lambda or --lambda-grid, not both");
        }
        grid.push(l);
    }
    if grid.is_empty() {
        bail!("a penalty weight is required (--lambda or --lambda-grid)");
    }
    Ok(grid)
}

#[derive(Serialize)]
struct ClosedOutput<'a> {
    method: &'static str,
    labels: Vec<String>,
    solutions: &'a [ClosedFormSolution],
}

fn level_labels(design: &ConjointDesign) -> Vec<String> {
    design
        .factors()
        .iter()
        .flat_map(|f| f.levels.iter().map(move |l| format!("{}:{l}", f.name)))
        .collect()
}

fn pi_csv(design: &ConjointDesign, est: &StrategyEstimate) -> String {
    let mut s = String::from("factor,level,pi,se\n");
    for (d, f) in design.factors().iter().enumerate() {
        for (l, name) in f.levels.iter().enumerate() {
            let se = est.se_pi.as_ref().map(|v| v[d][l]).unwrap_or(f64::NAN);
            let _ = writeln!(s, "{},{name},{},{}", f.name, num(est.pi_star.as_nested()[d][l]), num(se));
        }
    }
    s
}

pub fn optimize(args: &OptimizeArgs) -> Result<()> {
    let grid = lambda_grid(args)?;
    let ascent = AscentConfig {
        max_steps: args.max_steps,
        tolerance: args.tolerance,
        start: args.start.into(),
        polish: !args.no_polish,
        seed: args.seed,
        ..AscentConfig::default()
    };
    let mut inputs: Vec<PathBuf> = [&args.model, &args.design, &args.data].into_iter().flatten().cloned().collect();
    inputs.dedup();
    let sink = Sink {
        command: "optimize",
        config: args,
        seed: Some(args.seed),
        inputs,
        out_dir: args.out_dir.clone(),
    };
    let converged = match args.method {
        MethodArg::Closed => {
            if matches!(args.penalty, PenaltyArg::Maxprob) {
                bail!(stochint::Error::InvalidArgument("closed forms exist only for the L2 penalty".into()));
            }
            let model = load_model(args.model.as_deref().context("--model is required for the closed method")?)?;
            let solutions = grid.iter().map(|&l| solve_closed(&model, l)).collect::<stochint::Result<Vec<_>>>()?;
            sink.primary(
                "optimize",
                &ClosedOutput {
                    method: "closed",
                    labels: level_labels(model.design()),
                    solutions: &solutions,
                },
            )?;
            true
        }
        MethodArg::Ascent => {
            let model = load_model(args.model.as_deref().context("--model is required for the ascent method")?)?;
            let spec = TwoStepSpec {
                penalty: args.penalty.into(),
                method: SolveMethod::Ascent,
                ascent,
                delta: DeltaConfig::default(),
                ..TwoStepSpec::default()
            };
            let mut res = two_step_from_model(&model, &grid, &spec, exec())?;
            if !args.trace {
                res.estimate.trace.clear();
            }
            sink.primary("optimize", &res)?;
            let mut g = String::from("lambda,q,se,score\n");
            for r in &res.grid {
                let _ = writeln!(g, "{},{},{},{}", num(r.lambda), num(r.q_value), num(r.se_q), num(r.score));
            }
            sink.csv("lambda_grid.csv", &g)?;
            sink.csv("pi.csv", &pi_csv(model.design(), &res.estimate))?;
            res.estimate.converged
        }
        MethodArg::Onestep => {
            let design = load_design(args.design.as_deref().context("--design is required for the onestep method")?)?;
            let data_path = args.data.as_deref().context("--data is required for the onestep method")?;
            let data = load_dataset(data_path, &design).with_context(|| format!("loading data {}", data_path.display()))?;
            let spec = OneStepSpec {
                penalty: args.penalty.into(),
                folds: args.folds,
                split_fraction: args.split_fraction,
                sga: SgaConfig { epochs: args.epochs, ..SgaConfig::default() },
                ascent,
                seed: args.seed,
            };
            let mut res = one_step_estimate(&data, &grid, &spec, exec())?;
            if !args.trace {
                res.estimate.trace.clear();
            }
            sink.primary("optimize", &res)?;
            let mut g = String::from("lambda,cv_mean,cv_sd,score\n");
            for r in &res.cv {
                let _ = writeln!(g, "{},{},{},{}", num(r.lambda), num(r.mean), num(r.sd), num(r.score));
            }
            sink.csv("lambda_grid.csv", &g)?;
            sink.csv("pi.csv", &pi_csv(&design, &res.estimate))?;
            res.estimate.converged
        }
    };
    if !converged {
        bail!(NotConverged("strategy ascent".into()));
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InstitutionFile {
    weight_a: f64,
    primary_a: PathBuf,
    primary_b: PathBuf,
    general_a: PathBuf,
    general_b: PathBuf,
    #[serde(default)]
    challenger_a: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    challenger_b: Option<Vec<Vec<f64>>>,
}

/// Reads an institution file; model paths are relative to the file.
fn load_institution(path: &Path) -> Result<(InstitutionSpec, Vec<PathBuf>)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading institution {}", path.display()))?;
    let f: InstitutionFile = serde_json::from_str(&text).with_context(|| format!("parsing institution {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let paths: Vec<PathBuf> = [&f.primary_a, &f.primary_b, &f.general_a, &f.general_b].iter().map(|p| base.join(p)).collect();
    let mut inst = InstitutionSpec::new(
        f.weight_a,
        load_model(&paths[0])?,
        load_model(&paths[1])?,
        load_model(&paths[2])?,
        load_model(&paths[3])?,
    )?;
    if let Some(c) = f.challenger_a {
        inst.challenger_a = ProfileDistribution::new(&inst.design, c)?;
    }
    if let Some(c) = f.challenger_b {
        inst.challenger_b = ProfileDistribution::new(&inst.design, c)?;
    }
    inst.validate()?;
    let mut inputs = vec![path.to_path_buf()];
    inputs.extend(paths);
    Ok((inst, inputs))
}

#[derive(Serialize)]
struct AdversarialOutput {
    labels: Vec<String>,
    equilibrium: EquilibriumResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    grid_oracle: Option<EquilibriumResult>,
    /// Largest per-level gap between the ascent–descent and grid strategies.
    #[serde(skip_serializing_if = "Option::is_none")]
    grid_max_abs_diff: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    inference: Option<InferenceDoc>,
}

pub fn adversarial(args: &AdversarialArgs) -> Result<()> {
    let (inst, inputs) = load_institution(&args.institution)?;
    let penalty = PenaltyConfig::new(PenaltyKind::from(args.penalty), args.lambda)?;
    let cfg = GameConfig {
        max_iterations: args.max_iterations,
        tolerance: args.tolerance,
        ..GameConfig::default()
    };
    let (mut eq, inference) = if args.inference {
        let (eq, inf) = equilibrium_with_inference(&inst, penalty, &cfg, &DeltaConfig { exec: exec(), ..DeltaConfig::default() })?;
        (eq, Some(inf.to_doc()))
    } else {
        (solve_equilibrium(&inst, penalty, &cfg, None)?, None)
    };
    if let Some(r) = args.deviation_resolution {
        eq.deviation = Some(deviation_check(&eq, &inst, penalty, r, exec())?);
    }
    let grid = args.grid_resolution.map(|r| grid_oracle(&inst, penalty, r, exec())).transpose()?;
    let grid_max_abs_diff = grid.as_ref().map(|g| g.pi_a.max_abs_diff(&eq.pi_a).max(g.pi_b.max_abs_diff(&eq.pi_b)));
    let converged = eq.converged;
    let out = AdversarialOutput {
        labels: level_labels(&inst.design),
        equilibrium: eq,
        grid_oracle: grid,
        grid_max_abs_diff,
        inference,
    };
    let sink = Sink {
        command: "adversarial",
        config: args,
        seed: None,
        inputs,
        out_dir: args.out_dir.clone(),
    };
    sink.primary("equilibrium", &out)?;
    let mut s = String::from("side,factor,level,pi\n");
    for (side, pi) in [("a", &out.equilibrium.pi_a), ("b", &out.equilibrium.pi_b)] {
        for (d, f) in inst.design.factors().iter().enumerate() {
            for (l, name) in f.levels.iter().enumerate() {
                let _ = writeln!(s, "{side},{},{name},{}", f.name, num(pi.as_nested()[d][l]));
            }
        }
    }
    sink.csv("pi.csv", &s)?;
    if !converged {
        bail!(NotConverged("ascent–descent".into()));
    }
    Ok(())
}

pub fn simulate(args: &SimulateArgs) -> Result<()> {
    let sink = Sink {
        command: "simulate",
        config: args,
        seed: Some(args.seed),
        inputs: Vec::new(),
        out_dir: None,
    };
    let (csv, report) = match args.study {
        StudyArg::Average => {
            let mut dgp = AverageCaseDgp { factors: args.factors, lambda: args.lambda, ..AverageCaseDgp::default() };
            if !args.n.is_empty() {
                dgp.n_values = args.n.clone();
            }
            if !args.p_r.is_empty() {
                bail!(stochint::Error::InvalidArgument("--p-r applies to the adversarial study".into()));
            }
            let r = run_average_case(&dgp, args.reps, args.seed, exec())?;
            (r.table.to_csv(), stochint::json::to_string(&r)?)
        }
        StudyArg::Adversarial => {
            let mut dgp = AdversarialDgp::default();
            if !args.n.is_empty() {
                dgp.n_values = args.n.clone();
            }
            if !args.p_r.is_empty() {
                dgp.p_r_values = args.p_r.clone();
            }
            if let Some(l) = args.lambda {
                dgp.config.lambda = l;
            }
            let r = run_adversarial(&dgp, args.reps, args.seed, exec())?;
            (r.table.to_csv(), stochint::json::to_string(&r)?)
        }
    };
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write(&args.out, &csv)?;
    write(&args.out.with_extension("json"), &report)?;
    sink.manifest_beside(&args.out)?;
    print!("{report}");
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StrategyFile {
    design: ConjointDesign,
    pi: Vec<Vec<f64>>,
    /// Covariance of the flattened strategy, row-major rows.
    #[serde(default)]
    covariance: Option<Vec<Vec<f64>>>,
}

struct Strategy {
    design: ConjointDesign,
    pi: ProfileDistribution,
    covariance: Option<DMatrix<f64>>,
}

fn load_strategy(path: &Path) -> Result<Strategy> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading strategy {}", path.display()))?;
    let f: StrategyFile = serde_json::from_str(&text).with_context(|| format!("parsing strategy {}", path.display()))?;
    let pi = ProfileDistribution::new(&f.design, f.pi)?;
    let k = f.design.total_levels();
    let covariance = match f.covariance {
        Some(rows) => {
            if rows.len() != k || rows.iter().any(|r| r.len() != k) {
                bail!(stochint::Error::ShapeMismatch(format!("strategy covariance must be {k}×{k}")));
            }
            Some(DMatrix::from_fn(k, k, |i, j| rows[i][j]))
        }
        None => None,
    };
    Ok(Strategy { design: f.design, pi, covariance })
}

fn parse_profile(design: &ConjointDesign, spec: &str) -> Result<Profile> {
    let mut levels: Vec<Option<&str>> = vec![None; design.num_factors()];
    for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (f, l) = part
            .split_once('=')
            .with_context(|| format!("profile entry `{part}` is not factor=level"))?;
        let d = design
            .factor_index(f.trim())
            .ok_or_else(|| stochint::Error::InvalidArgument(format!("unknown factor `{f}`")))?;
        levels[d] = Some(l.trim());
    }
    let named: Vec<&str> = levels
        .iter()
        .enumerate()
        .map(|(d, l)| l.ok_or_else(|| stochint::Error::InvalidArgument(format!("profile misses factor `{}`", design.factors()[d].name))))
        .collect::<stochint::Result<_>>()?;
    Ok(design.parse_profile(&named)?)
}

#[derive(Serialize)]
struct DivergenceRow {
    profile: Ordered<String>,
    divergence: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    se: Option<f64>,
}

#[derive(Serialize)]
struct DivergenceOutput {
    rows: Vec<DivergenceRow>,
    max_divergence: f64,
}

pub fn diverge(args: &DivergeArgs) -> Result<()> {
    let a = load_strategy(&args.strategy_a)?;
    let b = load_strategy(&args.strategy_b)?;
    if a.design != b.design {
        bail!(stochint::Error::ShapeMismatch("the two strategies use different designs".into()));
    }
    let design = &a.design;
    let profiles = match &args.profile {
        Some(s) => vec![parse_profile(design, s)?],
        None => design.enumerate_support()?,
    };
    let joint = match (&a.covariance, &b.covariance) {
        (Some(ca), Some(cb)) => {
            let k = ca.nrows();
            let mut j = DMatrix::zeros(2 * k, 2 * k);
            j.view_mut((0, 0), (k, k)).copy_from(ca);
            j.view_mut((k, k), (k, k)).copy_from(cb);
            Some(j)
        }
        _ => None,
    };
    let mut rows = Vec::with_capacity(profiles.len());
    for t in &profiles {
        let profile = design
            .factors()
            .iter()
            .zip(design.profile_labels(t))
            .map(|(f, l)| (f.name.clone(), l.to_string()))
            .collect();
        let divergence = strategic_divergence(&a.pi, &b.pi, t)?;
        let se = joint.as_ref().map(|j| strategic_divergence_se(&a.pi, &b.pi, t, j)).transpose()?;
        rows.push(DivergenceRow { profile, divergence, se });
    }
    let max_divergence = rows.iter().map(|r| r.divergence).fold(0.0, f64::max);
    let sink = Sink {
        command: "diverge",
        config: args,
        seed: None,
        inputs: vec![args.strategy_a.clone(), args.strategy_b.clone()],
        out_dir: args.out_dir.clone(),
    };
    sink.primary("divergence", &DivergenceOutput { rows, max_divergence })
}

#[derive(Serialize)]
struct BoundOutput {
    bound: f64,
    max_prob: f64,
    l2_term: f64,
    shift_applied: f64,
    maxprob_term: f64,
    sigma2: f64,
    second_moment: f64,
    n: usize,
    support_size: f64,
    uniform_design: bool,
}

pub fn bound(args: &BoundArgs) -> Result<()> {
    let design = load_design(&args.design)?;
    let data = load_dataset(&args.data, &design).with_context(|| format!("loading data {}", args.data.display()))?;
    let pi = match &args.strategy {
        Some(p) => {
            let s = load_strategy(p)?;
            if s.design != design {
                bail!(stochint::Error::ShapeMismatch("strategy design differs from --design".into()));
            }
            s.pi
        }
        None => design.assignment(),
    };
    let sample = WeightedSample::from_forced_choice(&data);
    let mut est = estimate_bound_inputs(&sample, &design, &pi)?;
    if let Some(v) = args.sigma2 {
        est.inputs.sigma2 = v;
    }
    if let Some(v) = args.second_moment {
        est.inputs.second_moment = v;
    }
    let vb = variance_bound(&est.inputs, &design, &pi)?;
    let cmp = compare_penalties(&design, &pi)?;
    let mut inputs = vec![args.design.clone(), args.data.clone()];
    inputs.extend(args.strategy.clone());
    let sink = Sink {
        command: "bound",
        config: args,
        seed: None,
        inputs,
        out_dir: args.out_dir.clone(),
    };
    sink.primary(
        "bound",
        &BoundOutput {
            bound: vb.bound,
            max_prob: vb.max_prob,
            l2_term: cmp.l2_term,
            shift_applied: est.shift_applied,
            maxprob_term: cmp.maxprob_term,
            sigma2: est.inputs.sigma2,
            second_moment: est.inputs.second_moment,
            n: est.inputs.n,
            support_size: vb.support_size,
            uniform_design: vb.uniform_design,
        },
    )
}
