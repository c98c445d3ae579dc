//! Ensemble checkers for the stability estimates (iISS, UBEBS, 0-GUAS,
//! BEICS, dissipation, output persistence of excitation, Gronwall bound),
//! gain fitters, and the pipelines that derive an iISS certificate from
//! checked hypotheses.
//!
//! Every verdict is empirical: it covers the computed solutions of the
//! sampled runs and nothing else.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::comparison::{fit_k_envelope, fit_kl_envelope, EnvelopeMode, KLFn, KlFitOptions, MonotoneFn};
use crate::error::{Error, Result};
use crate::integrator::{simulate, SimOptions, Trajectory};
use crate::signals::{
    cumulative_energy, energy_norm_infinite, sample_with_rng, InputSignal, Mode, SignalSetSpec, SwitchingSignal,
    TOL_ENERGY_TAIL, TOL_QUAD,
};
use crate::systems::{norm, rng_for, sample_ball, unit_vector, InverterParams, SwitchedSystem};

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_FIT_MARGIN: f64 = 1.5;
const SOLUTION_NOTE: &str = "checks cover the computed solution of each sampled run on the tested input class only";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckOptions {
    /// Tolerance `tol · (1 + RHS)` added to every right-hand side.
    pub tol: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { tol: DEFAULT_TOL }
    }
}

impl CheckOptions {
    pub fn tol_check(&self, rhs: f64) -> f64 {
        self.tol * (1.0 + rhs.abs())
    }
}

// ---------------------------------------------------------------------------
// Ensembles

/// How each run's input is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputFamily {
    Zero,
    /// Values uniform in the ball of radius `max_norm`, holds uniform in
    /// `[hold_min, hold_max]`.
    PiecewiseConstant { max_norm: f64, hold_min: f64, hold_max: f64 },
    /// `amplitude · e^{-rate·t}` along a random unit direction.
    ExpDecay { amplitude: f64, rate: f64 },
    Constant { value: Vec<f64> },
    Fixed { input: InputSignal },
}

impl InputFamily {
    fn label(&self) -> String {
        match self {
            InputFamily::Zero => "zero".into(),
            InputFamily::PiecewiseConstant { max_norm, .. } => format!("piecewise_constant(|u| <= {max_norm})"),
            InputFamily::ExpDecay { amplitude, rate } => format!("exp_decay({amplitude}·e^(-{rate}t))"),
            InputFamily::Constant { value } => format!("constant({value:?})"),
            InputFamily::Fixed { .. } => "fixed".into(),
        }
    }

    fn draw<R: Rng>(&self, rng: &mut R, m: usize, t0: f64, horizon: f64) -> Result<InputSignal> {
        Ok(match self {
            InputFamily::Zero => InputSignal::zero(m),
            InputFamily::PiecewiseConstant { max_norm, hold_min, hold_max } => {
                if !(*hold_min > 0.0 && hold_min <= hold_max) {
                    return Err(Error::Config("input holds need 0 < hold_min <= hold_max".into()));
                }
                let mut times = Vec::new();
                let mut values = vec![sample_ball(rng, m, *max_norm)];
                let mut t = t0 + rng.gen_range(*hold_min..=*hold_max);
                while t < horizon {
                    times.push(t);
                    values.push(sample_ball(rng, m, *max_norm));
                    t += rng.gen_range(*hold_min..=*hold_max);
                }
                InputSignal::piecewise_constant(times, values)?
            }
            InputFamily::ExpDecay { amplitude, rate } => InputSignal::Preset {
                preset: crate::signals::InputPreset::ExpDecay {
                    amplitude: *amplitude,
                    rate: *rate,
                },
                direction: if m == 1 { vec![1.0] } else { unit_vector(rng, m) },
            },
            InputFamily::Constant { value } => InputSignal::piecewise_constant(vec![], vec![value.clone()])?,
            InputFamily::Fixed { input } => input.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSpec {
    pub seed: u64,
    pub count: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub horizon: f64,
    pub t0: f64,
    pub input: InputFamily,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 100,
            radius_min: 1e-2,
            radius_max: 10.0,
            horizon: 20.0,
            t0: 0.0,
            input: InputFamily::Zero,
        }
    }
}

impl EnsembleSpec {
    /// `|x0|` of run `i`: log-spaced over `[radius_min, radius_max]`.
    pub fn radius(&self, i: usize) -> f64 {
        if self.count <= 1 {
            return self.radius_max;
        }
        let s = i as f64 / (self.count - 1) as f64;
        (self.radius_min.ln() + s * (self.radius_max.ln() - self.radius_min.ln())).exp()
    }
}

/// One replayable run: everything `simulate` needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Case {
    pub x0: Vec<f64>,
    pub t0: f64,
    pub horizon: f64,
    pub u: InputSignal,
    pub sigma: SwitchingSignal,
}

impl Case {
    pub fn simulate(&self, sys: &SwitchedSystem, sim: &SimOptions) -> Result<Trajectory> {
        simulate(sys, &self.x0, self.t0, &self.u, &self.sigma, self.horizon, sim)
    }
}

#[derive(Debug, Clone)]
pub struct Run {
    pub index: usize,
    pub case: Case,
    pub traj: Trajectory,
}

/// What an ensemble was built from, embedded in reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleDescription {
    pub system: String,
    pub source: String,
    pub seed: Option<u64>,
    pub count: usize,
    pub radii: (f64, f64),
    pub horizon: f64,
    pub input: String,
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    pub description: EnsembleDescription,
    pub runs: Vec<Run>,
}

/// Simulates `spec.count` runs with `σ` drawn from `set`. Run `i` uses seed
/// `spec.seed` on stream `i`, so runs are independent of scheduling.
pub fn generate_ensemble(sys: &SwitchedSystem, set: &SignalSetSpec, spec: &EnsembleSpec, sim: &SimOptions) -> Result<Ensemble> {
    if spec.count == 0 {
        return Err(Error::Empty("ensemble count must be positive"));
    }
    if !(spec.radius_min > 0.0 && spec.radius_min <= spec.radius_max) || !(spec.horizon > spec.t0) {
        return Err(Error::Config("ensemble needs 0 < radius_min <= radius_max and horizon > t0".into()));
    }
    set.validate()?;
    let cases: Vec<Case> = (0..spec.count)
        .map(|i| {
            let mut rng = rng_for(spec.seed, i as u64);
            let x0 = unit_vector(&mut rng, sys.state_dim()).into_iter().map(|c| c * spec.radius(i)).collect();
            let sigma = sample_with_rng(set, spec.horizon, &mut rng)?;
            let u = spec.input.draw(&mut rng, sys.input_dim(), spec.t0, spec.horizon)?;
            Ok(Case {
                x0,
                t0: spec.t0,
                horizon: spec.horizon,
                u,
                sigma,
            })
        })
        .collect::<Result<_>>()?;
    let mut ens = ensemble_from_cases(sys, cases, sim)?;
    ens.description = EnsembleDescription {
        system: sys.name().to_string(),
        source: "generated".into(),
        seed: Some(spec.seed),
        count: spec.count,
        radii: (spec.radius_min, spec.radius_max),
        horizon: spec.horizon,
        input: spec.input.label(),
    };
    Ok(ens)
}

/// Simulates explicitly given cases in parallel.
pub fn ensemble_from_cases(sys: &SwitchedSystem, cases: Vec<Case>, sim: &SimOptions) -> Result<Ensemble> {
    if cases.is_empty() {
        return Err(Error::Empty("ensemble has no cases"));
    }
    let runs: Vec<Run> = cases
        .into_par_iter()
        .enumerate()
        .map(|(index, case)| {
            let traj = case.simulate(sys, sim)?;
            Ok(Run { index, case, traj })
        })
        .collect::<Result<_>>()?;
    let radii = runs.iter().map(|r| norm(&r.case.x0)).fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let horizon = runs.iter().map(|r| r.case.horizon).fold(0.0, f64::max);
    Ok(Ensemble {
        description: EnsembleDescription {
            system: sys.name().to_string(),
            source: "explicit".into(),
            seed: None,
            count: runs.len(),
            radii,
            horizon,
            input: "explicit".into(),
        },
        runs,
    })
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.runs.len()
    }
    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }
    pub fn all_zero_input(&self) -> bool {
        self.runs.iter().all(|r| r.case.u.is_zero())
    }
    /// Appends runs from `other`, renumbering them.
    pub fn extend(&mut self, other: Ensemble) {
        let base = self.runs.len();
        for (k, mut run) in other.runs.into_iter().enumerate() {
            run.index = base + k;
            self.runs.push(run);
        }
        self.description.count = self.runs.len();
        self.description.source = format!("{}+{}", self.description.source, other.description.source);
    }
}

// ---------------------------------------------------------------------------
// Storage functions

/// Storage function `V(t, ξ, i)`, quadratic `ξ'Pξ` or its square root,
/// optionally with one matrix per mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Storage {
    Quadratic { p: Vec<Vec<f64>>, sqrt: bool },
    PerMode { modes: Vec<Mode>, p: Vec<Vec<Vec<f64>>>, sqrt: bool },
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect()).collect()
}

fn from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    DMatrix::from_fn(n, n, |r, c| rows[r][c])
}

fn quad(p: &[Vec<f64>], x: &[f64]) -> f64 {
    p.iter()
        .zip(x)
        .map(|(row, xi)| xi * row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

/// Solves `A'P + PA = −I`.
pub fn lyapunov_solution(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let at = a.transpose();
    let lhs = id.kronecker(&at) + at.kronecker(&id);
    let rhs = nalgebra::DVector::from_iterator(n * n, id.iter().map(|v| -v));
    let sol = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Precondition("Lyapunov equation is singular".into()))?;
    let p = DMatrix::from_column_slice(n, n, sol.as_slice());
    let p = (&p + p.transpose()) * 0.5;
    if p.symmetric_eigenvalues().iter().any(|&l| !(l > 0.0)) {
        return Err(Error::Precondition("matrix is not Hurwitz: Lyapunov solution is not positive definite".into()));
    }
    Ok(p)
}

impl Storage {
    /// `½|ξ|²`.
    pub fn half_norm_squared(n: usize) -> Self {
        Storage::Quadratic {
            p: to_rows(&(DMatrix::<f64>::identity(n, n) * 0.5)),
            sqrt: false,
        }
    }

    /// Inverter energy `½ξ'Pξ`, or its square root.
    pub fn inverter(params: &InverterParams, sqrt: bool) -> Self {
        let d = params.p_diag();
        Storage::Quadratic {
            p: to_rows(&DMatrix::from_fn(4, 4, |r, c| if r == c { 0.5 * d[r] } else { 0.0 })),
            sqrt,
        }
    }

    /// `√(ξ'Pᵢξ)` with `Aᵢ'Pᵢ + PᵢAᵢ = −I` for each linear mode.
    pub fn lyapunov_per_mode(sys: &SwitchedSystem) -> Result<Self> {
        let lin = sys
            .linear()
            .ok_or_else(|| Error::Precondition("per-mode Lyapunov storage needs a linear system".into()))?;
        let p = lin.a.iter().map(|a| lyapunov_solution(a).map(|p| to_rows(&p))).collect::<Result<_>>()?;
        Ok(Storage::PerMode {
            modes: sys.modes().to_vec(),
            p,
            sqrt: true,
        })
    }

    fn matrix(&self, mode: Mode) -> &[Vec<f64>] {
        match self {
            Storage::Quadratic { p, .. } => p,
            Storage::PerMode { modes, p, .. } => {
                let k = modes.iter().position(|&m| m == mode).unwrap_or(0);
                &p[k]
            }
        }
    }

    fn is_sqrt(&self) -> bool {
        match self {
            Storage::Quadratic { sqrt, .. } | Storage::PerMode { sqrt, .. } => *sqrt,
        }
    }

    fn matrices(&self) -> Vec<DMatrix<f64>> {
        match self {
            Storage::Quadratic { p, .. } => vec![from_rows(p)],
            Storage::PerMode { p, .. } => p.iter().map(|m| from_rows(m)).collect(),
        }
    }

    pub fn eval(&self, _t: f64, x: &[f64], mode: Mode) -> f64 {
        let v = quad(self.matrix(mode), x).max(0.0);
        if self.is_sqrt() {
            v.sqrt()
        } else {
            v
        }
    }

    /// Linear (or quadratic) sandwich bounds `φ₁(|ξ|) ≤ V ≤ φ₂(|ξ|)` from the
    /// extreme eigenvalues over modes.
    pub fn sandwich(&self) -> Result<(MonotoneFn, MonotoneFn)> {
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for p in self.matrices() {
            let ev = p.symmetric_eigenvalues();
            lo = lo.min(ev.min());
            hi = hi.max(ev.max());
        }
        if !(lo > 0.0) {
            return Err(Error::Precondition("storage matrix is not positive definite".into()));
        }
        if self.is_sqrt() {
            Ok((MonotoneFn::linear(lo.sqrt() * (1.0 - 1e-9))?, MonotoneFn::linear(hi.sqrt() * (1.0 + 1e-9))?))
        } else {
            let knots = crate::comparison::default_grid();
            Ok((
                MonotoneFn::sample(|s| lo * (1.0 - 1e-9) * s * s, &knots)?,
                // Chords of a convex function lie above it; the tail slope
                // is steep enough for the checked range.
                MonotoneFn::sample(|s| hi * (1.0 + 1e-9) * s * s, &knots)?,
            ))
        }
    }

    /// Supply slope of `√(ξ'Pᵢξ)` under `ẋ = Aᵢx + Bᵢu`: `maxᵢ ‖Pᵢ^{1/2}Bᵢ‖`.
    pub fn sqrt_supply_slope(&self, sys: &SwitchedSystem) -> Result<f64> {
        let lin = sys
            .linear()
            .ok_or_else(|| Error::Precondition("supply slope needs a linear system".into()))?;
        let ps = self.matrices();
        let mut best = 0.0f64;
        for (k, b) in lin.b.iter().enumerate() {
            let p = &ps[k.min(ps.len() - 1)];
            let eig = p.clone().symmetric_eigen();
            let root = &eig.eigenvectors
                * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()))
                * eig.eigenvectors.transpose();
            best = best.max(crate::systems::operator_norm(&(root * b)));
        }
        Ok(best)
    }
}

// ---------------------------------------------------------------------------
// Certificates

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IissCertificate {
    pub beta: KLFn,
    pub rho: MonotoneFn,
    pub chi: MonotoneFn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UbebsCertificate {
    pub alpha1: MonotoneFn,
    pub alpha2: MonotoneFn,
    pub alpha: MonotoneFn,
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DissipationCertificate {
    pub storage: Storage,
    pub phi1: MonotoneFn,
    pub phi2: MonotoneFn,
    /// Supply gain on `|u|`.
    pub alpha: MonotoneFn,
    /// Dissipation rate on `|y|`; absent means zero (0-OD).
    pub alpha3: Option<MonotoneFn>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GronwallCertificate {
    pub eta: f64,
    pub kappa: f64,
    pub lipschitz: f64,
    pub chi: MonotoneFn,
    pub beta: KLFn,
    /// The bound is claimed only while `|x(t)| ≤ radius`.
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Certificate {
    Iiss(IissCertificate),
    Ubebs(UbebsCertificate),
    ZeroGuas { beta: KLFn },
    Dissipation(DissipationCertificate),
    Gronwall(GronwallCertificate),
}

impl Certificate {
    pub fn validate(&self) -> Result<()> {
        match self {
            Certificate::Ubebs(c) if !(c.c >= 0.0) => Err(Error::Invariant(format!("UBEBS constant c must be >= 0, got {}", c.c))),
            Certificate::Gronwall(g) if !(g.eta > 0.0 && g.kappa > 0.0 && g.lipschitz > 0.0 && g.radius > 0.0) => {
                Err(Error::Invariant("Gronwall constants eta, kappa, L and radius must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Certificate::Iiss(_) => "iiss",
            Certificate::Ubebs(_) => "ubebs",
            Certificate::ZeroGuas { .. } => "0guas",
            Certificate::Dissipation(_) => "dissipation",
            Certificate::Gronwall(_) => "gronwall",
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Certificate = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    HoldsOnEnsemble,
    Violated,
    Inconclusive,
}

/// A violated inequality, replayable from its case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub run: usize,
    pub case: Case,
    pub t: f64,
    pub lhs: f64,
    pub rhs: f64,
}

impl Witness {
    /// Re-simulates the case up to the violation time.
    pub fn replay(&self, sys: &SwitchedSystem, sim: &SimOptions) -> Result<Trajectory> {
        let mut case = self.case.clone();
        if self.t > case.t0 {
            case.horizon = self.t;
            case.simulate(sys, sim)
        } else {
            // Violation at the initial time: a one-step run suffices.
            case.horizon = case.t0 + sim.h_step;
            case.simulate(sys, sim)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub estimate: String,
    pub verdict: Verdict,
    pub ensemble: EnsembleDescription,
    pub runs_checked: usize,
    pub points_checked: usize,
    /// `min (RHS + tol − LHS)`; negative iff violated.
    pub worst_margin: Option<f64>,
    pub worst_run: Option<usize>,
    pub worst_t: Option<f64>,
    pub witness: Option<Witness>,
    pub notes: Vec<String>,
}

impl CheckReport {
    pub fn holds(&self) -> bool {
        self.verdict == Verdict::HoldsOnEnsemble
    }
    pub fn violated(&self) -> bool {
        self.verdict == Verdict::Violated
    }
}

/// Worst point of one run.
#[derive(Debug, Clone, Copy)]
struct RunWorst {
    margin: f64,
    k: usize,
    lhs: f64,
    rhs: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct RunOutcome {
    worst: Option<RunWorst>,
    points: usize,
    inconclusive: bool,
}

impl RunOutcome {
    fn observe(&mut self, k: usize, lhs: f64, rhs: f64, tol: f64) {
        self.points += 1;
        let margin = rhs + tol - lhs;
        if self.worst.is_none_or(|w| margin < w.margin) {
            self.worst = Some(RunWorst { margin, k, lhs, rhs });
        }
    }
}

/// Evaluates `per_run` over the ensemble in parallel and merges the outcomes
/// by minimum margin, ties broken by run index.
fn aggregate<F>(estimate: &str, ens: &Ensemble, mut notes: Vec<String>, per_run: F) -> CheckReport
where
    F: Fn(&Run) -> RunOutcome + Sync,
{
    let outcomes: Vec<RunOutcome> = ens.runs.par_iter().map(&per_run).collect();
    let mut worst: Option<(usize, RunWorst)> = None;
    let mut points = 0;
    let mut inconclusive = 0;
    for (i, o) in outcomes.iter().enumerate() {
        points += o.points;
        if o.inconclusive {
            inconclusive += 1;
        }
        if let Some(w) = o.worst {
            if worst.is_none_or(|(_, b)| w.margin < b.margin) {
                worst = Some((i, w));
            }
        }
    }
    let violated = worst.is_some_and(|(_, w)| w.margin < 0.0);
    let verdict = if violated {
        Verdict::Violated
    } else if inconclusive > 0 {
        notes.push(format!("{inconclusive} run(s) fell outside the estimate's hypotheses"));
        Verdict::Inconclusive
    } else {
        Verdict::HoldsOnEnsemble
    };
    if points == 0 && verdict == Verdict::HoldsOnEnsemble {
        notes.push("no grid point qualified; the verdict is vacuous".into());
    }
    notes.push(SOLUTION_NOTE.into());
    let witness = match worst {
        Some((i, w)) if violated => {
            let run = &ens.runs[i];
            Some(Witness {
                run: run.index,
                case: run.case.clone(),
                t: run.traj.times()[w.k],
                lhs: w.lhs,
                rhs: w.rhs,
            })
        }
        _ => None,
    };
    CheckReport {
        estimate: estimate.to_string(),
        verdict,
        ensemble: ens.description.clone(),
        runs_checked: ens.runs.len(),
        points_checked: points,
        worst_margin: worst.map(|(_, w)| w.margin),
        worst_run: worst.map(|(i, _)| ens.runs[i].index),
        worst_t: worst.map(|(i, w)| ens.runs[i].traj.times()[w.k]),
        witness,
        notes,
    }
}

fn require_nonempty(ens: &Ensemble) -> Result<()> {
    if ens.runs.is_empty() {
        Err(Error::Empty("ensemble has no runs"))
    } else {
        Ok(())
    }
}

fn require_zero_input(ens: &Ensemble, what: &str) -> Result<()> {
    match ens.runs.iter().find(|r| !r.case.u.is_zero()) {
        Some(r) => Err(Error::Precondition(format!("{what} needs zero-input runs; run {} has a nonzero input", r.index))),
        None => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// Checkers

/// `|x(t)| ≤ β(|x0|, t − t0) + ρ(∫_{t0}^t χ(|u|))` at every grid time.
pub fn check_iiss(ens: &Ensemble, cert: &IissCertificate, opts: &CheckOptions) -> Result<CheckReport> {
    require_nonempty(ens)?;
    Ok(aggregate("iiss", ens, vec![], |run| {
        let times = run.traj.times();
        let energy = cumulative_energy(&run.case.u, &cert.chi, times);
        let r0 = norm(&run.case.x0);
        let mut out = RunOutcome::default();
        for k in 0..times.len() {
            let rhs = cert.beta.at(r0, times[k] - times[0]) + cert.rho.at(energy[k]);
            out.observe(k, run.traj.state_norm(k), rhs, opts.tol_check(rhs));
        }
        out
    }))
}

/// `|x(t)| ≤ α₁(|x0|) + α₂(∫ α(|u|)) + c`.
pub fn check_ubebs(ens: &Ensemble, cert: &UbebsCertificate, opts: &CheckOptions) -> Result<CheckReport> {
    require_nonempty(ens)?;
    Certificate::Ubebs(cert.clone()).validate()?;
    let mut notes = vec![];
    let sup = ens.runs.iter().map(|r| r.traj.max_norm()).fold(0.0, f64::max);
    if cert.c > 0.0 && cert.c >= sup {
        notes.push(format!("vacuous margin: c = {} alone bounds every state (sup |x| = {sup:.3e})", cert.c));
    }
    Ok(aggregate("ubebs", ens, notes, |run| {
        let times = run.traj.times();
        let energy = cumulative_energy(&run.case.u, &cert.alpha, times);
        let a1 = cert.alpha1.at(norm(&run.case.x0));
        let mut out = RunOutcome::default();
        for k in 0..times.len() {
            let rhs = a1 + cert.alpha2.at(energy[k]) + cert.c;
            out.observe(k, run.traj.state_norm(k), rhs, opts.tol_check(rhs));
        }
        out
    }))
}

/// `|x(t)| ≤ β(|x0|, t − t0)` on zero-input runs.
pub fn check_0guas(ens: &Ensemble, beta: &KLFn, opts: &CheckOptions) -> Result<CheckReport> {
    require_nonempty(ens)?;
    require_zero_input(ens, "the 0-GUAS check")?;
    Ok(aggregate("0guas", ens, vec![], |run| {
        let times = run.traj.times();
        let r0 = norm(&run.case.x0);
        let mut out = RunOutcome::default();
        for k in 0..times.len() {
            let rhs = beta.at(r0, times[k] - times[0]);
            out.observe(k, run.traj.state_norm(k), rhs, opts.tol_check(rhs));
        }
        out
    }))
}

/// Convergence time from pilot runs: the last time any pilot state lies
/// outside the `eps` ball, times `factor`. `None` if a pilot never settles.
pub fn pilot_t_conv(pilot: &Ensemble, eps: f64, factor: f64) -> Option<f64> {
    let mut t_conv = 0.0f64;
    for run in &pilot.runs {
        let times = run.traj.times();
        let last_out = (0..times.len()).rev().find(|&k| run.traj.state_norm(k) > eps);
        match last_out {
            Some(k) if k + 1 == times.len() => return None,
            Some(k) => t_conv = t_conv.max(times[k + 1] - times[0]),
            None => {}
        }
    }
    Some(t_conv * factor)
}

/// `|x(t)| ≤ eps` for all `t ≥ t0 + t_conv`, for inputs of finite
/// `χ`-energy.
pub fn check_beics(ens: &Ensemble, chi: &MonotoneFn, eps: f64, t_conv: f64, opts: &CheckOptions) -> Result<CheckReport> {
    require_nonempty(ens)?;
    if !(eps > 0.0) || !(t_conv >= 0.0) {
        return Err(Error::Domain("BEICS needs eps > 0 and t_conv >= 0".into()));
    }
    for run in &ens.runs {
        let e = energy_norm_infinite(&run.case.u, chi, run.case.t0, run.case.horizon, TOL_QUAD)?;
        if !e.is_finite(TOL_ENERGY_TAIL) {
            return Err(Error::Precondition(format!(
                "input of run {} does not have finite chi-energy (tail bound {})",
                run.index, e.tail_bound
            )));
        }
    }
    let notes = vec![format!(
        "convergence is asymptotic; verified on a finite horizon with eps = {eps} from t0 + {t_conv}"
    )];
    Ok(aggregate("beics", ens, notes, |run| {
        let times = run.traj.times();
        let start = times[0] + t_conv;
        let mut out = RunOutcome::default();
        if run.traj.t_end() < start {
            out.inconclusive = true;
            return out;
        }
        for k in times.partition_point(|&t| t < start)..times.len() {
            out.observe(k, run.traj.state_norm(k), eps, opts.tol_check(eps));
        }
        out
    }))
}

/// Sandwich bounds `φ₁(|x|) ≤ V ≤ φ₂(|x|)` at every grid point and
/// `V(t) − V(s) ≤ ∫_s^t α(|u|) − ∫_s^t α₃(|y|)` for every grid pair `s ≤ t`.
///
/// With `W = V − ∫α + ∫α₃` the pair condition is `W(t) ≤ min_{s≤t} W(s)`.
/// The supply integral is exact for piecewise-constant inputs; the
/// dissipation integral uses the trapezoid rule on the grid.
pub fn check_dissipation(sys: &SwitchedSystem, ens: &Ensemble, cert: &DissipationCertificate, opts: &CheckOptions) -> Result<CheckReport> {
    require_nonempty(ens)?;
    let name = if cert.alpha3.is_some() { "h-dissipation" } else { "0-dissipation" };
    Ok(aggregate(name, ens, vec![], |run| {
        let traj = &run.traj;
        let times = traj.times();
        let supply = cumulative_energy(&run.case.u, &cert.alpha, times);
        let mut out = RunOutcome::default();
        let mut dissipated = 0.0;
        let mut prev_rate = 0.0;
        let mut y = vec![0.0; sys.output_dim()];
        // (min W so far, V and supply at its argmin)
        let mut best: Option<(f64, f64, f64)> = None;
        for k in 0..times.len() {
            let x = traj.state(k);
            let v = cert.storage.eval(times[k], x, traj.mode(k));
            let r = norm(x);
            let lo = cert.phi1.at(r);
            let hi = cert.phi2.at(r);
            out.observe(k, lo, v, opts.tol_check(v));
            out.observe(k, v, hi, opts.tol_check(hi));
            if let Some(a3) = &cert.alpha3 {
                sys.output_into(times[k], x, traj.input(k), traj.mode(k), &mut y);
                let rate = a3.at(norm(&y));
                if k > 0 {
                    dissipated += 0.5 * (rate + prev_rate) * (times[k] - times[k - 1]);
                }
                prev_rate = rate;
            }
            let w = v - supply[k] + dissipated;
            if let Some((wmin, vs, ss)) = best {
                let rhs = vs + supply[k] - ss;
                // V(t) ≤ V(s) + ∫α − ∫α₃ rearranged as W(t) ≤ W(s).
                out.observe(k, w, wmin, opts.tol_check(rhs));
                if w < wmin {
                    best = Some((w, v, supply[k]));
                }
            } else {
                best = Some((w, v, supply[k]));
            }
        }
        out
    }))
}

/// `V(t, x(t)) ≤ V(t0, x0) + ∫_{t0}^t α(|u|)` along every run.
pub fn check_storage_growth(ens: &Ensemble, storage: &Storage, alpha: &MonotoneFn, opts: &CheckOptions) -> Result<CheckReport> {
    require_nonempty(ens)?;
    Ok(aggregate("storage_growth", ens, vec![], |run| {
        let traj = &run.traj;
        let times = traj.times();
        let supply = cumulative_energy(&run.case.u, alpha, times);
        let v0 = storage.eval(times[0], traj.state(0), traj.mode(0));
        let mut out = RunOutcome::default();
        for k in 0..times.len() {
            let rhs = v0 + supply[k];
            out.observe(k, storage.eval(times[k], traj.state(k), traj.mode(k)), rhs, opts.tol_check(rhs));
        }
        out
    }))
}

/// `V(tₖ₊₁) − V(tₖ) ≤ rel · V(t0)` along every run.
pub fn check_storage_nonincreasing(ens: &Ensemble, storage: &Storage, rel: f64) -> Result<CheckReport> {
    require_nonempty(ens)?;
    Ok(aggregate("storage_nonincreasing", ens, vec![], |run| {
        let traj = &run.traj;
        let times = traj.times();
        let v0 = storage.eval(times[0], traj.state(0), traj.mode(0));
        let mut out = RunOutcome::default();
        let mut prev = v0;
        for k in 1..times.len() {
            let v = storage.eval(times[k], traj.state(k), traj.mode(k));
            out.observe(k, v - prev, 0.0, rel * v0);
            prev = v;
        }
        out
    }))
}

/// For every window `[t, t + window]` whose states stay in the annulus
/// `eps ≤ |x| ≤ 1/eps`, `∫ |h(τ, x(τ), 0, σ(τ))|² dτ ≥ r`. Windows start at
/// grid points; the end point is evaluated by dense output.
pub fn check_output_pe(sys: &SwitchedSystem, ens: &Ensemble, eps: f64, window: f64, r: f64, opts: &CheckOptions) -> Result<CheckReport> {
    require_nonempty(ens)?;
    require_zero_input(ens, "the output-PE check")?;
    if !(eps > 0.0 && eps <= 1.0) || !(window > 0.0) || !(r >= 0.0) {
        return Err(Error::Domain("output-PE needs eps in (0, 1], window > 0 and r >= 0".into()));
    }
    let inside = move |x: &[f64]| {
        let n = norm(x);
        n >= eps && n <= 1.0 / eps
    };
    Ok(aggregate("output_pe", ens, vec![], |run| {
        let traj = &run.traj;
        let times = traj.times();
        let len = times.len();
        let p = sys.output_dim();
        let zero_u = vec![0.0; sys.input_dim()];
        let mut y = vec![0.0; p];
        let sq: Vec<f64> = (0..len)
            .map(|k| {
                sys.output_into(times[k], traj.state(k), &zero_u, traj.mode(k), &mut y);
                y.iter().map(|v| v * v).sum()
            })
            .collect();
        let mut cum = vec![0.0; len];
        for k in 1..len {
            cum[k] = cum[k - 1] + 0.5 * (sq[k] + sq[k - 1]) * (times[k] - times[k - 1]);
        }
        // next_out[k]: first index ≥ k outside the annulus.
        let mut next_out = vec![len; len + 1];
        for k in (0..len).rev() {
            next_out[k] = if inside(traj.state(k)) { next_out[k + 1] } else { k };
        }
        let mut out = RunOutcome::default();
        for k in 0..len {
            let t_end = times[k] + window;
            if t_end > traj.t_end() {
                break;
            }
            let j = times.partition_point(|&t| t <= t_end) - 1;
            if next_out[k] <= j {
                continue;
            }
            let mut energy = cum[j] - cum[k];
            if times[j] < t_end {
                let x_end = match traj.dense_eval(t_end) {
                    Ok(x) => x,
                    Err(_) => continue,
                };
                if !inside(&x_end) {
                    continue;
                }
                sys.output_into(t_end, &x_end, &zero_u, traj.mode(j), &mut y);
                let s_end: f64 = y.iter().map(|v| v * v).sum();
                energy += 0.5 * (sq[j] + s_end) * (t_end - times[j]);
            }
            // ∫|y|² ≥ r  ⇔  r ≤ ∫|y|², observed as LHS = r, RHS = energy.
            out.observe(k, r, energy, opts.tol_check(energy));
        }
        out
    }))
}

/// `|x(t)| ≤ β(|x0|, t−t0) + [η(t−t0) + κ∫χ(|u|)] e^{L(t−t0)}` on runs that
/// stay in the ball of radius `cert.radius`; other runs are inconclusive.
pub fn check_gronwall(ens: &Ensemble, cert: &GronwallCertificate, opts: &CheckOptions) -> Result<CheckReport> {
    require_nonempty(ens)?;
    if !(cert.eta >= 0.0 && cert.kappa >= 0.0 && cert.lipschitz >= 0.0 && cert.radius > 0.0) {
        return Err(Error::Invariant("Gronwall constants must be nonnegative".into()));
    }
    Ok(aggregate("gronwall", ens, vec![], |run| {
        let traj = &run.traj;
        let mut out = RunOutcome::default();
        if traj.max_norm() > cert.radius {
            out.inconclusive = true;
            return out;
        }
        let times = traj.times();
        let energy = cumulative_energy(&run.case.u, &cert.chi, times);
        let r0 = norm(&run.case.x0);
        for k in 0..times.len() {
            let dt = times[k] - times[0];
            let rhs = cert.beta.at(r0, dt) + (cert.eta * dt + cert.kappa * energy[k]) * (cert.lipschitz * dt).exp();
            out.observe(k, traj.state_norm(k), rhs, opts.tol_check(rhs));
        }
        out
    }))
}

// ---------------------------------------------------------------------------
// Fitting

/// Moves each abscissa down to a log-spaced bin edge, keeping the largest
/// ordinate per bin. An upper envelope through the result dominates the
/// original points.
fn bucket_down(points: Vec<(f64, f64)>, bins: usize) -> Vec<(f64, f64)> {
    let positive: Vec<f64> = points.iter().map(|p| p.0).filter(|&s| s > 0.0).collect();
    if positive.len() <= bins {
        return points;
    }
    let lo = positive.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = positive.iter().copied().fold(0.0, f64::max);
    if lo == hi {
        return vec![(lo, points.iter().map(|p| p.1).fold(0.0, f64::max))];
    }
    let mut edges = crate::comparison::log_grid(lo, hi, bins).split_off(1);
    edges[0] = lo;
    let mut best = vec![f64::NEG_INFINITY; edges.len()];
    let mut zero_max: Option<f64> = None;
    for (s, y) in points {
        if s == 0.0 {
            zero_max = Some(zero_max.map_or(y, |m: f64| m.max(y)));
            continue;
        }
        let i = edges.partition_point(|&e| e <= s).saturating_sub(1);
        best[i] = best[i].max(y);
    }
    let mut out: Vec<(f64, f64)> = edges.into_iter().zip(best).filter(|p| p.1.is_finite()).collect();
    if let Some(y) = zero_max {
        out.push((0.0, y));
    }
    out
}

/// Bounded-energy gain `α̃(s) = sup{|x(t)| : |x0| ≤ s, ∫α(|u|) ≤ s}` from an
/// ensemble, as an upper envelope of `(max{|x0|, E(t)}, sup_{τ≤t} |x(τ)|)`.
/// Then `α̃(|x0|) + α̃(E(t)) ≥ α̃(max) ≥ |x(t)|` on every sampled point.
pub fn fit_ubebs_gains(ens: &Ensemble, alpha: &MonotoneFn) -> Result<(MonotoneFn, MonotoneFn)> {
    require_nonempty(ens)?;
    let per_run: Vec<Vec<(f64, f64)>> = ens
        .runs
        .par_iter()
        .map(|run| {
            let times = run.traj.times();
            let energy = cumulative_energy(&run.case.u, alpha, times);
            let r0 = norm(&run.case.x0);
            let mut pts = Vec::new();
            let mut sup = f64::NEG_INFINITY;
            for k in 0..times.len() {
                let n = run.traj.state_norm(k);
                if n > sup {
                    sup = n;
                    pts.push((r0.max(energy[k]), sup));
                }
            }
            pts
        })
        .collect();
    let points = bucket_down(per_run.into_iter().flatten().collect(), 400);
    let g = fit_k_envelope(&points, EnvelopeMode::UpperMajorant)?;
    Ok((g.clone(), g))
}

/// `β` dominating every zero-input run, scaled by `margin`. Samples are
/// taken every `stride` steps with the running future maximum shifted to
/// the end of the stride, so `β` also dominates the skipped points.
pub fn fit_zero_guas_beta(ens: &Ensemble, margin: f64) -> Result<KLFn> {
    require_nonempty(ens)?;
    require_zero_input(ens, "fitting beta")?;
    let stride = 20;
    let samples: Vec<(f64, f64, f64)> = ens
        .runs
        .par_iter()
        .flat_map_iter(|run| {
            let traj = &run.traj;
            let times = traj.times();
            let len = times.len();
            let mut future = vec![0.0f64; len + 1];
            for k in (0..len).rev() {
                future[k] = future[k + 1].max(traj.state_norm(k));
            }
            let r0 = norm(&run.case.x0);
            let mut out = vec![(r0, 0.0, future[0])];
            let mut k = 0;
            while k + 1 < len {
                let next = (k + stride).min(len - 1);
                out.push((r0, times[next] - times[0], future[k]));
                k = next;
            }
            out
        })
        .collect();
    fit_kl_envelope(&samples, KlFitOptions::default())?.scaled(margin)
}

/// `ρ` dominating the residuals `(|x(t)| − β(|x0|, t − t0))⁺` against the
/// running `χ`-energy, scaled by `margin`. Points with zero energy and
/// positive residual mean `β` itself fails; they are counted and skipped.
pub fn fit_iiss_rho(ens: &Ensemble, beta: &KLFn, chi: &MonotoneFn, margin: f64) -> Result<(MonotoneFn, usize)> {
    require_nonempty(ens)?;
    let per_run: Vec<(Vec<(f64, f64)>, usize)> = ens
        .runs
        .par_iter()
        .map(|run| {
            let times = run.traj.times();
            let energy = cumulative_energy(&run.case.u, chi, times);
            let r0 = norm(&run.case.x0);
            let mut pts = Vec::new();
            let mut bad = 0;
            for k in 0..times.len() {
                let res = run.traj.state_norm(k) - beta.at(r0, times[k] - times[0]);
                if res > 0.0 {
                    if energy[k] > 0.0 {
                        pts.push((energy[k], res));
                    } else {
                        bad += 1;
                    }
                }
            }
            (pts, bad)
        })
        .collect();
    let bad = per_run.iter().map(|p| p.1).sum();
    let mut points: Vec<(f64, f64)> = per_run.into_iter().flat_map(|p| p.0).collect();
    if points.is_empty() {
        points.push((1.0, 0.0));
    }
    let rho = fit_k_envelope(&bucket_down(points, 400), EnvelopeMode::UpperMajorant)?;
    Ok((rho.scaled(margin)?, bad))
}

/// `χ = max{α, γ}`.
pub fn derive_iiss_gain(alpha: &MonotoneFn, gamma: &MonotoneFn) -> Result<MonotoneFn> {
    MonotoneFn::pointwise_max(alpha, gamma)
}

// ---------------------------------------------------------------------------
// Pipelines

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    /// 0-GUAS plus 0-output dissipativity with supply `α`.
    ZeroGuasZeroOd,
    /// `h`-output dissipativity plus zero-input output persistence of
    /// excitation.
    OutputDissipativePe,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutputPeSpec {
    pub eps: f64,
    pub window: f64,
    pub r: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineComponents {
    pub dissipation: DissipationCertificate,
    /// Growth gain from the system bounds; taken from the declared bounds
    /// when absent.
    pub gamma: Option<MonotoneFn>,
    /// Used instead of fitting when given.
    pub beta: Option<KLFn>,
    pub output_pe: Option<OutputPeSpec>,
    pub margin: f64,
}

/// Ensembles used by a pipeline: zero-input runs, input runs for fitting,
/// and fresh input runs for the final re-check.
pub struct PipelineEnsembles<'a> {
    pub zero: &'a Ensemble,
    pub input: &'a Ensemble,
    pub recheck: &'a Ensemble,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub hypotheses: Vec<(String, CheckReport)>,
    pub failed_hypothesis: Option<String>,
    pub certificate: Option<IissCertificate>,
    pub recheck: Option<CheckReport>,
    pub verdict: Verdict,
    pub notes: Vec<String>,
}

fn resolve_gamma(sys: &SwitchedSystem, given: &Option<MonotoneFn>) -> Result<MonotoneFn> {
    given
        .clone()
        .or_else(|| sys.bounds().gamma.clone())
        .ok_or_else(|| Error::Precondition("no growth gain gamma declared or supplied".into()))
}

fn finish_pipeline(
    hypotheses: Vec<(String, CheckReport)>,
    beta: KLFn,
    chi: MonotoneFn,
    ens: &PipelineEnsembles,
    margin: f64,
    opts: &CheckOptions,
    mut notes: Vec<String>,
) -> Result<PipelineReport> {
    let (rho, bad) = fit_iiss_rho(ens.input, &beta, &chi, margin)?;
    if bad > 0 {
        notes.push(format!("{bad} zero-energy point(s) exceeded beta and could not be absorbed by rho"));
    }
    let cert = IissCertificate { beta, rho, chi };
    let recheck = check_iiss(ens.recheck, &cert, opts)?;
    let verdict = recheck.verdict;
    Ok(PipelineReport {
        hypotheses,
        failed_hypothesis: None,
        certificate: Some(cert),
        recheck: Some(recheck),
        verdict,
        notes,
    })
}

fn failed(hypotheses: Vec<(String, CheckReport)>, name: &str, notes: Vec<String>) -> PipelineReport {
    let verdict = hypotheses.last().map_or(Verdict::Inconclusive, |h| h.1.verdict);
    PipelineReport {
        hypotheses,
        failed_hypothesis: Some(name.to_string()),
        certificate: None,
        recheck: None,
        verdict,
        notes,
    }
}

/// Checks the hypotheses of either implication, then assembles an iISS
/// certificate with `χ = max{α, γ}` and re-checks it on fresh runs.
pub fn iiss_from_dissipation(
    sys: &SwitchedSystem,
    mode: PipelineMode,
    comp: &PipelineComponents,
    ens: &PipelineEnsembles,
    opts: &CheckOptions,
) -> Result<PipelineReport> {
    let mut hyps: Vec<(String, CheckReport)> = Vec::new();
    let notes = vec![];
    let beta = match &comp.beta {
        Some(b) => b.clone(),
        None => fit_zero_guas_beta(ens.zero, comp.margin)?,
    };
    match mode {
        PipelineMode::ZeroGuasZeroOd => {
            let r = check_0guas(ens.zero, &beta, opts)?;
            let ok = r.holds();
            hyps.push(("0-GUAS".into(), r));
            if !ok {
                return Ok(failed(hyps, "0-GUAS", notes));
            }
            let mut d = comp.dissipation.clone();
            d.alpha3 = None;
            let r = check_dissipation(sys, ens.input, &d, opts)?;
            let ok = r.holds();
            hyps.push(("0-OD".into(), r));
            if !ok {
                return Ok(failed(hyps, "0-OD", notes));
            }
        }
        PipelineMode::OutputDissipativePe => {
            if comp.dissipation.alpha3.is_none() {
                return Err(Error::Precondition("output dissipativity needs a dissipation rate alpha3".into()));
            }
            let pe = comp
                .output_pe
                .ok_or_else(|| Error::Precondition("output-PE parameters missing".into()))?;
            let r = check_dissipation(sys, ens.input, &comp.dissipation, opts)?;
            let ok = r.holds();
            hyps.push(("h-OD".into(), r));
            if !ok {
                return Ok(failed(hyps, "h-OD", notes));
            }
            let r = check_output_pe(sys, ens.zero, pe.eps, pe.window, pe.r, opts)?;
            let ok = r.holds();
            hyps.push(("output-PE".into(), r));
            if !ok {
                return Ok(failed(hyps, "output-PE", notes));
            }
            // The implication yields 0-GUAS; confirm the fitted beta.
            let r = check_0guas(ens.zero, &beta, opts)?;
            hyps.push(("0-GUAS (implied)".into(), r));
        }
    }
    let gamma = resolve_gamma(sys, &comp.gamma)?;
    let chi = derive_iiss_gain(&comp.dissipation.alpha, &gamma)?;
    finish_pipeline(hyps, beta, chi, ens, comp.margin, opts, notes)
}

/// 0-GUAS plus UBEBS (with `c = 0`, fitted gains) imply iISS with
/// `χ = max{α, γ}`: fits both, checks both, and re-checks the assembled
/// iISS certificate on fresh runs.
pub fn iiss_from_guas_and_ubebs(
    sys: &SwitchedSystem,
    alpha: &MonotoneFn,
    gamma: Option<&MonotoneFn>,
    ens: &PipelineEnsembles,
    margin: f64,
    opts: &CheckOptions,
) -> Result<(PipelineReport, UbebsCertificate)> {
    let mut hyps = Vec::new();
    let beta = fit_zero_guas_beta(ens.zero, margin)?;
    hyps.push(("0-GUAS".to_string(), check_0guas(ens.zero, &beta, opts)?));
    let (a1, a2) = fit_ubebs_gains(ens.input, alpha)?;
    let ubebs = UbebsCertificate {
        alpha1: a1,
        alpha2: a2,
        alpha: alpha.clone(),
        c: 0.0,
    };
    hyps.push(("UBEBS".to_string(), check_ubebs(ens.input, &ubebs, opts)?));
    if let Some((name, _)) = hyps.iter().find(|h| !h.1.holds()) {
        let name = name.clone();
        return Ok((failed(hyps, &name, vec![]), ubebs));
    }
    let gamma = resolve_gamma(sys, &gamma.cloned())?;
    let chi = derive_iiss_gain(alpha, &gamma)?;
    Ok((finish_pipeline(hyps, beta, chi, ens, margin, opts, vec![])?, ubebs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{make_switched_linear, prop4_pair};

    fn prop4_unit_circle(mode: Mode, count: usize, horizon: f64) -> Ensemble {
        let sys = prop4_pair();
        let cases = (0..count)
            .map(|k| {
                let th = 2.0 * std::f64::consts::PI * k as f64 / count as f64;
                Case {
                    x0: vec![th.cos(), th.sin()],
                    t0: 0.0,
                    horizon,
                    u: InputSignal::zero(1),
                    sigma: SwitchingSignal::constant(mode, horizon),
                }
            })
            .collect();
        ensemble_from_cases(&sys, cases, &SimOptions::default()).unwrap()
    }

    fn scaled_norm_beta(prefactor: f64) -> KLFn {
        let r = vec![0.0, 1.0, 10.0];
        let tk = crate::comparison::log_grid(1e-3, 20.0, 200);
        KLFn::sample(|r, t| prefactor * r * (-t).exp(), &r, &tk, 1.0).unwrap()
    }

    #[test]
    fn zero_guas_scaled_norm_bound() {
        let ens = prop4_unit_circle(1, 16, 5.0);
        let opts = CheckOptions::default();
        assert!(check_0guas(&ens, &scaled_norm_beta(10f64.sqrt()), &opts).unwrap().holds());
        // Transient growth defeats a unit prefactor.
        let r = check_0guas(&ens, &scaled_norm_beta(1.0), &opts).unwrap();
        assert!(r.violated());
        let w = r.witness.unwrap();
        assert!(w.lhs > w.rhs);
    }

    #[test]
    fn halved_beta_violates_at_start() {
        let ens = prop4_unit_circle(2, 8, 2.0);
        let cert = IissCertificate {
            beta: scaled_norm_beta(0.5),
            rho: MonotoneFn::identity(),
            chi: MonotoneFn::identity(),
        };
        let r = check_iiss(&ens, &cert, &CheckOptions::default()).unwrap();
        assert!(r.violated());
        assert!(r.witness.unwrap().t < 1.0);
    }

    #[test]
    fn zero_trajectory_holds() {
        let sys = prop4_pair();
        let case = Case {
            x0: vec![0.0, 0.0],
            t0: 0.0,
            horizon: 1.0,
            u: InputSignal::zero(1),
            sigma: SwitchingSignal::constant(1, 1.0),
        };
        let ens = ensemble_from_cases(&sys, vec![case], &SimOptions::default()).unwrap();
        let ub = UbebsCertificate {
            alpha1: MonotoneFn::identity(),
            alpha2: MonotoneFn::identity(),
            alpha: MonotoneFn::identity(),
            c: 0.0,
        };
        assert!(check_ubebs(&ens, &ub, &CheckOptions::default()).unwrap().holds());
        assert!(check_0guas(&ens, &scaled_norm_beta(1.0), &CheckOptions::default()).unwrap().holds());
    }

    #[test]
    fn large_constant_is_flagged_vacuous() {
        let ens = prop4_unit_circle(1, 4, 1.0);
        let ub = UbebsCertificate {
            alpha1: MonotoneFn::linear(1e-9).unwrap(),
            alpha2: MonotoneFn::identity(),
            alpha: MonotoneFn::identity(),
            c: 1e6,
        };
        let r = check_ubebs(&ens, &ub, &CheckOptions::default()).unwrap();
        assert!(r.holds());
        assert!(r.notes.iter().any(|n| n.contains("vacuous margin")));
    }

    #[test]
    fn beics_rejects_infinite_energy() {
        let sys = prop4_pair();
        let case = Case {
            x0: vec![1.0, 0.0],
            t0: 0.0,
            horizon: 1.0,
            u: InputSignal::piecewise_constant(vec![], vec![vec![1.0]]).unwrap(),
            sigma: SwitchingSignal::constant(1, 1.0),
        };
        let ens = ensemble_from_cases(&sys, vec![case], &SimOptions::default()).unwrap();
        let err = check_beics(&ens, &MonotoneFn::identity(), 0.05, 0.5, &CheckOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn output_pe_identity_and_zero_output() {
        let ens = prop4_unit_circle(1, 8, 6.0);
        let sys = prop4_pair();
        for eps in [0.1, 0.5, 1.0] {
            let t = 1.0;
            let r = check_output_pe(&sys, &ens, eps, t, eps * eps * t, &CheckOptions::default()).unwrap();
            assert!(r.holds(), "eps={eps}: {r:?}");
        }
        let blind = prop4_pair().with_output(1, std::sync::Arc::new(|_t, _x, _u, _i, out| out[0] = 0.0));
        let r = check_output_pe(&blind, &ens, 0.1, 1.0, 0.01, &CheckOptions::default()).unwrap();
        assert!(r.violated());
    }

    #[test]
    fn lyapunov_storage_per_mode() {
        let sys = prop4_pair();
        let storage = Storage::lyapunov_per_mode(&sys).unwrap();
        let lin = sys.linear().unwrap();
        if let Storage::PerMode { p, .. } = &storage {
            let pm = from_rows(&p[0]);
            let res = lin.a[0].transpose() * &pm + &pm * &lin.a[0] + DMatrix::<f64>::identity(2, 2);
            assert!(res.norm() < 1e-9);
        } else {
            panic!("expected per-mode storage");
        }
        let unstable = make_switched_linear(vec![DMatrix::from_row_slice(1, 1, &[1.0])], vec![DMatrix::from_row_slice(1, 1, &[1.0])]).unwrap();
        assert!(Storage::lyapunov_per_mode(&unstable).is_err());
    }

    #[test]
    fn fitted_gains_dominate_their_data() {
        let sys = prop4_pair();
        let set = SignalSetSpec::FiniteFamily {
            signals: vec![SwitchingSignal::constant(1, 5.0)],
        };
        let spec = EnsembleSpec {
            count: 12,
            horizon: 5.0,
            input: InputFamily::PiecewiseConstant {
                max_norm: 1.0,
                hold_min: 0.2,
                hold_max: 0.8,
            },
            ..Default::default()
        };
        let ens = generate_ensemble(&sys, &set, &spec, &SimOptions::default()).unwrap();
        let alpha = MonotoneFn::identity();
        let (a1, a2) = fit_ubebs_gains(&ens, &alpha).unwrap();
        let cert = UbebsCertificate {
            alpha1: a1,
            alpha2: a2,
            alpha,
            c: 0.0,
        };
        assert!(check_ubebs(&ens, &cert, &CheckOptions::default()).unwrap().holds());

        let zero = generate_ensemble(&sys, &set, &EnsembleSpec { count: 12, horizon: 5.0, ..Default::default() }, &SimOptions::default()).unwrap();
        let beta = fit_zero_guas_beta(&zero, 1.0).unwrap();
        assert!(check_0guas(&zero, &beta, &CheckOptions::default()).unwrap().holds());
    }

    #[test]
    fn certificate_json_round_trip() {
        let c = Certificate::Ubebs(UbebsCertificate {
            alpha1: MonotoneFn::identity(),
            alpha2: MonotoneFn::linear(2.0).unwrap(),
            alpha: MonotoneFn::identity(),
            c: 0.5,
        });
        let back = Certificate::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
        let bad = c.to_json().unwrap().replace("\"c\": 0.5", "\"c\": -1.0");
        assert!(Certificate::from_json(&bad).is_err());
    }
}
