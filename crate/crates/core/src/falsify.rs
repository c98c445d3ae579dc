//! Searches for switching signals and inputs that break a candidate
//! certificate.
//!
//! State-feedback switching rules are realized as open-loop signals by
//! co-simulation on the integrator's own grid, so replaying the unrolled
//! signal reproduces the search trajectory bit for bit.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certify::{
    check_0guas, check_dissipation, check_gronwall, check_iiss, check_storage_growth, check_ubebs, ensemble_from_cases,
    generate_ensemble, Case, Certificate, CheckOptions, CheckReport, Ensemble, EnsembleSpec, InputFamily, Storage,
    Witness,
};
use crate::comparison::MonotoneFn;
use crate::error::{Error, Result};
use crate::integrator::{breakpoints, check_inputs, segment_steps, segment_time, simulate, Rk4, SimOptions, Trajectory};
use crate::signals::{
    concatenate, sample_signal_set, sample_with_rng, validate_membership, InputSignal, Mode, SignalSetSpec,
    SwitchingSignal,
};
use crate::systems::{norm, rng_for, unit_vector, SwitchedSystem};

pub const DEFAULT_GUARD: f64 = 1e-3;
pub const DEFAULT_GROWTH_TARGET: f64 = 10.0;
pub const DEFAULT_T_MAX: f64 = 5.0;

/// State-feedback switching rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SwitchPolicy {
    /// Mode per quadrant of `(x₁, x₂)`, counterclockwise from
    /// `x₁ ≥ 0, x₂ ≥ 0`.
    QuadrantRule { table: [Mode; 4] },
    /// `argmaxᵢ x'W f(t, x, 0, i)` for diagonal `W`: the mode that grows the
    /// weighted norm fastest.
    GrowthGreedy { weight: Vec<f64> },
    /// State-independent dwell-time signal.
    RandomDwell { d_min: f64, d_max: f64, seed: u64 },
    Constant { mode: Mode },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub policy: SwitchPolicy,
    /// Minimum time between switches.
    pub guard: f64,
}

impl PolicySpec {
    pub fn new(policy: SwitchPolicy) -> Self {
        Self {
            policy,
            guard: DEFAULT_GUARD,
        }
    }

    fn validate(&self, sys: &SwitchedSystem) -> Result<()> {
        if !(self.guard > 0.0) {
            return Err(Error::Invariant("policy guard must be positive".into()));
        }
        match &self.policy {
            SwitchPolicy::QuadrantRule { table } => {
                if sys.state_dim() < 2 {
                    return Err(Error::Dimension("quadrant rule needs at least two states".into()));
                }
                if let Some(m) = table.iter().find(|&&m| sys.mode_position(m).is_none()) {
                    return Err(Error::Dimension(format!("quadrant rule uses unknown mode {m}")));
                }
            }
            SwitchPolicy::GrowthGreedy { weight } if weight.len() != sys.state_dim() => {
                return Err(Error::Dimension("growth weight must have one entry per state".into()));
            }
            SwitchPolicy::Constant { mode } if sys.mode_position(*mode).is_none() => {
                return Err(Error::Dimension(format!("unknown mode {mode}")));
            }
            _ => {}
        }
        Ok(())
    }

    /// Mode the rule asks for at `(t, x)`; ties go to the lowest mode.
    fn choose(&self, sys: &SwitchedSystem, t: f64, x: &[f64], scratch: &mut [f64]) -> Mode {
        match &self.policy {
            SwitchPolicy::QuadrantRule { table } => {
                let q = match (x[0] >= 0.0, x[1] >= 0.0) {
                    (true, true) => 0,
                    (false, true) => 1,
                    (false, false) => 2,
                    (true, false) => 3,
                };
                table[q]
            }
            SwitchPolicy::GrowthGreedy { weight } => {
                let zero = vec![0.0; sys.input_dim()];
                let mut modes = sys.modes().to_vec();
                modes.sort_unstable();
                let mut best = (f64::NEG_INFINITY, modes[0]);
                for m in modes {
                    sys.eval_into(t, x, &zero, m, scratch);
                    let score: f64 = (0..x.len()).map(|k| x[k] * weight[k] * scratch[k]).sum();
                    if score > best.0 {
                        best = (score, m);
                    }
                }
                best.1
            }
            SwitchPolicy::Constant { mode } => *mode,
            SwitchPolicy::RandomDwell { .. } => unreachable!("dwell policies are state independent"),
        }
    }
}

/// An unrolled policy: the open-loop signal and its trajectory.
#[derive(Debug, Clone)]
pub struct Unrolled {
    pub sigma: SwitchingSignal,
    pub traj: Trajectory,
    /// Fraction of the horizon during which the active mode differed from
    /// the rule's choice because of the guard.
    pub disagreement: f64,
    /// Mode changes the rule asked for, and switches actually made.
    pub requested: usize,
    pub switches: usize,
    /// Set when the guard suppressed more than half of the requested mode
    /// changes, leaving a near-constant signal.
    pub degenerate: bool,
}

/// Co-simulates `sys` under `policy` from `(t0, x0)` to `t_end` and returns
/// the switching signal it produced. A switch happens at a grid point when
/// the rule asks for a different mode and at least `guard` has elapsed
/// since the previous switch.
pub fn unroll_policy(
    sys: &SwitchedSystem,
    policy: &PolicySpec,
    x0: &[f64],
    t0: f64,
    t_end: f64,
    u: &InputSignal,
    sim: &SimOptions,
) -> Result<Unrolled> {
    policy.validate(sys)?;
    if let SwitchPolicy::RandomDwell { d_min, d_max, seed } = policy.policy {
        // The guard is a floor on every dwell.
        let d_min = d_min.max(policy.guard);
        let set = SignalSetSpec::DwellTime {
            d_min,
            d_max: d_max.max(d_min),
            modes: sys.modes().to_vec(),
        };
        let sigma = sample_signal_set(&set, t_end, seed)?;
        let traj = simulate(sys, x0, t0, u, &sigma, t_end, sim)?;
        let switches = sigma.switch_times().len();
        return Ok(Unrolled {
            sigma,
            traj,
            disagreement: 0.0,
            requested: switches,
            switches,
            degenerate: false,
        });
    }
    let probe = SwitchingSignal::constant(sys.modes()[0], t_end);
    check_inputs(sys, x0, u, &probe, t0, t_end)?;
    let n = sys.state_dim();
    let h = sim.h_step;
    let mut scratch = vec![0.0; n];
    let mut x = x0.to_vec();
    let mut mode = policy.choose(sys, t0, &x, &mut scratch);
    let (mut switch_times, mut modes) = (Vec::new(), vec![mode]);
    let mut last_switch = t0;
    let mut disagree = 0.0;
    let mut requested = 0;
    let mut prev_want = mode;
    let mut stop = t_end;
    let mut rk = Rk4::new(n, sys.input_dim());

    let mut cuts = vec![t0];
    cuts.extend(breakpoints(&probe, u, t0, t_end, &[]));
    cuts.push(t_end);
    'outer: for w in cuts.windows(2) {
        let (mut a, b) = (w[0], w[1]);
        'segment: loop {
            let steps = segment_steps(a, b, h);
            rk.derivative(sys, u, mode, (a, b), a, &x);
            for k in 0..steps {
                let t = segment_time(a, b, h, k, steps);
                let tn = segment_time(a, b, h, k + 1, steps);
                rk.step(sys, u, mode, (a, b), t, tn - t, &mut x);
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { t: tn, x, mode });
                }
                rk.derivative(sys, u, mode, (a, b), tn, &x);
                if norm(&x) > sim.blow_up_bound {
                    stop = tn;
                    break 'outer;
                }
                let want = policy.choose(sys, tn, &x, &mut scratch);
                if want != prev_want {
                    requested += 1;
                    prev_want = want;
                }
                if want != mode {
                    if tn - last_switch >= policy.guard * (1.0 - 1e-9) && tn < t_end {
                        switch_times.push(tn);
                        modes.push(want);
                        mode = want;
                        last_switch = tn;
                        if k + 1 < steps {
                            a = tn;
                            continue 'segment;
                        }
                    } else {
                        disagree += tn - t;
                    }
                }
            }
            break;
        }
    }
    let sigma = SwitchingSignal::new(switch_times, modes, stop)?;
    let traj = simulate(sys, x0, t0, u, &sigma, stop, sim)?;
    let disagreement = disagree / (stop - t0);
    let switches = sigma.switch_times().len();
    Ok(Unrolled {
        sigma,
        traj,
        disagreement,
        requested,
        switches,
        degenerate: 2 * switches < requested,
    })
}

/// Policies tried by default: both quadrant assignments for planar
/// systems, then growth-greedy rules.
pub fn default_policy_family(sys: &SwitchedSystem) -> Vec<PolicySpec> {
    let mut modes = sys.modes().to_vec();
    modes.sort_unstable();
    let n = sys.state_dim();
    let mut out = Vec::new();
    if n == 2 && modes.len() >= 2 {
        let (p, q) = (modes[0], modes[1]);
        out.push(PolicySpec::new(SwitchPolicy::QuadrantRule { table: [p, q, p, q] }));
        out.push(PolicySpec::new(SwitchPolicy::QuadrantRule { table: [q, p, q, p] }));
    }
    out.push(PolicySpec::new(SwitchPolicy::GrowthGreedy { weight: vec![1.0; n] }));
    let graded: Vec<f64> = (0..n).map(|k| 10f64.powi(k as i32)).collect();
    out.push(PolicySpec::new(SwitchPolicy::GrowthGreedy { weight: graded }));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DestabilizingWitness {
    pub policy_index: usize,
    pub policy: PolicySpec,
    pub x0_index: usize,
    pub x0: Vec<f64>,
    pub t0: f64,
    /// Signal on `[t0, t_hit]`.
    pub sigma: SwitchingSignal,
    /// First grid time with `|x(t)| ≥ G|x0|`.
    pub t_hit: f64,
    pub growth: f64,
}

impl DestabilizingWitness {
    /// Growth factor `|x(t_hit)|/|x0|` from an open-loop re-simulation.
    pub fn replay_growth(&self, sys: &SwitchedSystem, sim: &SimOptions) -> Result<f64> {
        let traj = simulate(sys, &self.x0, self.t0, &InputSignal::zero(sys.input_dim()), &self.sigma, self.t_hit, sim)?;
        Ok(norm(traj.final_state()) / norm(&self.x0))
    }
}

fn truncate_signal(sigma: &SwitchingSignal, t: f64) -> Result<SwitchingSignal> {
    let keep = sigma.switch_times().partition_point(|&s| s < t);
    SwitchingSignal::new(sigma.switch_times()[..keep].to_vec(), sigma.modes()[..=keep].to_vec(), t)
}

/// Searches every `(policy, x0)` cell for `|x(T)|/|x0| ≥ growth` with
/// `T ≤ t_max`. Among winning cells the lexicographically smallest
/// `(policy index, x0 index)` is returned.
pub fn find_destabilizing(
    sys: &SwitchedSystem,
    policies: &[PolicySpec],
    x0_grid: &[Vec<f64>],
    growth: f64,
    t_max: f64,
    sim: &SimOptions,
) -> Result<Option<DestabilizingWitness>> {
    if !(growth > 1.0) {
        return Err(Error::Domain(format!("growth target must exceed 1, got {growth}")));
    }
    if x0_grid.iter().any(|x| norm(x) == 0.0) {
        return Err(Error::Domain("initial states must be nonzero".into()));
    }
    let cells: Vec<(usize, usize)> = (0..policies.len()).flat_map(|p| (0..x0_grid.len()).map(move |j| (p, j))).collect();
    let hits: Vec<Option<DestabilizingWitness>> = cells
        .par_iter()
        .map(|&(p, j)| -> Result<Option<DestabilizingWitness>> {
            let x0 = &x0_grid[j];
            let un = unroll_policy(sys, &policies[p], x0, 0.0, t_max, &InputSignal::zero(sys.input_dim()), sim)?;
            let r0 = norm(x0);
            let hit = (0..un.traj.len()).find(|&k| un.traj.state_norm(k) >= growth * r0);
            Ok(match hit {
                Some(k) if un.traj.times()[k] > 0.0 => {
                    let t_hit = un.traj.times()[k];
                    Some(DestabilizingWitness {
                        policy_index: p,
                        policy: policies[p].clone(),
                        x0_index: j,
                        x0: x0.clone(),
                        t0: 0.0,
                        sigma: truncate_signal(&un.sigma, t_hit)?,
                        t_hit,
                        growth: un.traj.state_norm(k) / r0,
                    })
                }
                _ => None,
            })
        })
        .collect::<Result<_>>()?;
    Ok(hits.into_iter().flatten().next())
}

/// `x0` on the unit sphere (circle) at `count` evenly spread points.
pub fn unit_sphere_grid(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    if dim == 2 {
        return (0..count)
            .map(|k| {
                let th = 2.0 * std::f64::consts::PI * k as f64 / count as f64;
                vec![th.cos(), th.sin()]
            })
            .collect();
    }
    let mut rng = rng_for(seed, 0);
    (0..count).map(|_| unit_vector(&mut rng, dim)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcatProbeReport {
    pub report: CheckReport,
    pub k: usize,
    pub random_runs: usize,
    pub random_violations: usize,
    pub prefix_runs: usize,
    pub prefix_violations: usize,
    /// Worst violation among signals `σ_pre ♯_T σ_base`.
    pub prefix_witness: Option<Witness>,
    /// Fewest base signals whose concatenation gives the witness signal.
    pub prefix_pieces: Option<usize>,
}

const PROBE_HORIZON: f64 = 5.0;

/// Checks `V(t, x(t)) ≤ V(t0, x0) + ∫α(|u|)` along zero-input runs whose
/// signals come from the `k`-fold concatenation closure of `base`: half are
/// random closure samples, half are destabilizing prefixes (unrolled
/// policies cut at a random time) continued by a base signal. With `k ≤ 1`
/// only base signals are used.
#[allow(clippy::too_many_arguments)]
pub fn probe_concat_closure(
    sys: &SwitchedSystem,
    storage: &Storage,
    alpha: &MonotoneFn,
    base: &SignalSetSpec,
    k: usize,
    budget: usize,
    seed: u64,
    opts: &CheckOptions,
    sim: &SimOptions,
) -> Result<ConcatProbeReport> {
    if budget == 0 {
        return Err(Error::Empty("probe budget must be positive"));
    }
    base.validate()?;
    let zero = InputSignal::zero(sys.input_dim());
    let n = sys.state_dim();
    let (n_random, n_prefix) = if k <= 1 { (budget, 0) } else { (budget - budget / 2, budget / 2) };
    let random_set = if k <= 1 {
        base.clone()
    } else {
        SignalSetSpec::ConcatClosure {
            base: Box::new(base.clone()),
            k,
        }
    };
    let mut cases = Vec::with_capacity(budget);
    for i in 0..n_random {
        let mut rng = rng_for(seed, i as u64);
        let x0 = unit_vector(&mut rng, n);
        let sigma = sample_with_rng(&random_set, PROBE_HORIZON, &mut rng)?;
        cases.push(Case {
            x0,
            t0: 0.0,
            horizon: PROBE_HORIZON,
            u: zero.clone(),
            sigma,
        });
    }
    let policies = default_policy_family(sys);
    let prefix_cases: Vec<Case> = (0..n_prefix)
        .into_par_iter()
        .map(|j| -> Result<Case> {
            let mut rng = rng_for(seed, (n_random + j) as u64);
            let x0 = unit_vector(&mut rng, n);
            let t_cut: f64 = rng.gen_range(0.5..PROBE_HORIZON - 0.5);
            let t_cut = (t_cut / sim.h_step).round() * sim.h_step;
            let pre = unroll_policy(sys, &policies[j % policies.len()], &x0, 0.0, t_cut, &zero, sim)?;
            let tail = sample_with_rng(base, PROBE_HORIZON, &mut rng)?;
            let sigma = concatenate(&[pre.sigma.with_horizon(t_cut), tail], &[pre.sigma.horizon()])?;
            Ok(Case {
                x0,
                t0: 0.0,
                horizon: PROBE_HORIZON,
                u: zero.clone(),
                sigma,
            })
        })
        .collect::<Result<_>>()?;
    cases.extend(prefix_cases);
    let ens = ensemble_from_cases(sys, cases, sim)?;
    let report = check_storage_growth(&ens, storage, alpha, opts)?;

    // Per-family tallies.
    let per_run: Vec<Option<(f64, Witness)>> = ens
        .runs
        .par_iter()
        .map(|run| {
            let single = Ensemble {
                description: ens.description.clone(),
                runs: vec![run.clone()],
            };
            let r = check_storage_growth(&single, storage, alpha, opts).ok()?;
            match (r.worst_margin, r.witness) {
                (Some(m), Some(w)) if m < 0.0 => Some((m, w)),
                _ => None,
            }
        })
        .collect();
    let random_violations = per_run[..n_random].iter().filter(|v| v.is_some()).count();
    let prefix_violations = per_run[n_random..].iter().filter(|v| v.is_some()).count();
    let prefix_witness = per_run[n_random..]
        .iter()
        .flatten()
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, w)| w.clone());
    let prefix_pieces = prefix_witness.as_ref().and_then(|w| {
        let depth = w.case.sigma.switch_times().len() + 2;
        validate_membership(
            &w.case.sigma,
            &SignalSetSpec::ConcatClosure {
                base: Box::new(base.clone()),
                k: depth.max(2),
            },
        )
        .pieces
    });
    Ok(ConcatProbeReport {
        report,
        k,
        random_runs: n_random,
        random_violations,
        prefix_runs: n_prefix,
        prefix_violations,
        prefix_witness,
        prefix_pieces,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    pub budget: usize,
    pub seed: u64,
    pub horizon: f64,
    pub radius_min: f64,
    pub radius_max: f64,
    pub input: InputFamily,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            budget: 100,
            seed: 0,
            horizon: 20.0,
            radius_min: 1e-2,
            radius_max: 10.0,
            input: InputFamily::PiecewiseConstant {
                max_norm: 5.0,
                hold_min: 0.1,
                hold_max: 1.0,
            },
        }
    }
}

/// Randomized plus policy-guided search for a violation of `cert` over
/// `(x0, u, σ ∈ set)`. Policy signals are used only when they belong to
/// `set`. Returns the checker report for the worst run found.
pub fn search_certificate_violation(
    sys: &SwitchedSystem,
    set: &SignalSetSpec,
    cert: &Certificate,
    search: &SearchOptions,
    opts: &CheckOptions,
    sim: &SimOptions,
) -> Result<CheckReport> {
    cert.validate()?;
    if search.budget == 0 {
        return Err(Error::Empty("search budget must be positive"));
    }
    let input = match cert {
        Certificate::ZeroGuas { .. } => InputFamily::Zero,
        _ => search.input.clone(),
    };
    let n_policy = search.budget / 4;
    let spec = EnsembleSpec {
        seed: search.seed,
        count: search.budget - n_policy,
        radius_min: search.radius_min,
        radius_max: search.radius_max,
        horizon: search.horizon,
        t0: 0.0,
        input: input.clone(),
    };
    let mut ens = generate_ensemble(sys, set, &spec, sim)?;
    let policies = default_policy_family(sys);
    let mut guided = Vec::new();
    for j in 0..n_policy {
        let mut rng = rng_for(search.seed ^ 0x9e37_79b9_7f4a_7c15, j as u64);
        let r = spec.radius(j * spec.count / n_policy.max(1));
        let x0: Vec<f64> = unit_vector(&mut rng, sys.state_dim()).into_iter().map(|c| c * r).collect();
        let zero = InputSignal::zero(sys.input_dim());
        let un = unroll_policy(sys, &policies[j % policies.len()], &x0, 0.0, search.horizon, &zero, sim)?;
        if un.sigma.horizon() < search.horizon || !validate_membership(&un.sigma, set).member {
            continue;
        }
        let u = match &input {
            InputFamily::Zero => zero,
            _ => {
                let tmp = generate_ensemble(
                    sys,
                    &SignalSetSpec::FiniteFamily {
                        signals: vec![un.sigma.clone()],
                    },
                    &EnsembleSpec {
                        seed: search.seed.wrapping_add(1 + j as u64),
                        count: 1,
                        ..spec.clone()
                    },
                    sim,
                )?;
                tmp.runs[0].case.u.clone()
            }
        };
        guided.push(Case {
            x0,
            t0: 0.0,
            horizon: search.horizon,
            u,
            sigma: un.sigma,
        });
    }
    if !guided.is_empty() {
        ens.extend(ensemble_from_cases(sys, guided, sim)?);
    }
    let mut report = match cert {
        Certificate::Iiss(c) => check_iiss(&ens, c, opts)?,
        Certificate::Ubebs(c) => check_ubebs(&ens, c, opts)?,
        Certificate::ZeroGuas { beta } => check_0guas(&ens, beta, opts)?,
        Certificate::Dissipation(c) => check_dissipation(sys, &ens, c, opts)?,
        Certificate::Gronwall(c) => check_gronwall(&ens, c, opts)?,
    };
    report.notes.push(format!(
        "search: {} random and {} policy-guided run(s); absence of a witness is not a proof",
        spec.count,
        ens.runs.len() - spec.count
    ));
    Ok(report)
}

/// Outcome of driving the system with a bounded, non-integrable input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IssProbeReport {
    pub x0: Vec<f64>,
    pub sigma: SwitchingSignal,
    pub input: InputSignal,
    pub sup_input: f64,
    /// `∫|u|` over the horizon; grows linearly, so the input has infinite
    /// energy for every class-K weight bounded below by a linear function.
    pub input_l1: f64,
    pub horizon: f64,
    pub final_norm: f64,
    pub growth: f64,
    /// Least-squares slope of `|x(t)|` over the second half of the run.
    pub late_slope: f64,
    pub diverging: bool,
    /// The iISS certificate re-checked on the same run, when supplied.
    pub iiss_recheck: Option<CheckReport>,
}

/// Drives `sys` with `u = amplitude · sign(∂(x'Wx)/∂u)` held constant over
/// intervals of length `hold`, so `|u| ≤ amplitude` while the weighted
/// energy is pumped. The state is declared diverging when it grows by more
/// than `growth_target` with a positive late slope.
#[allow(clippy::too_many_arguments)]
pub fn probe_iss_divergence(
    sys: &SwitchedSystem,
    sigma: &SwitchingSignal,
    x0: &[f64],
    amplitude: f64,
    hold: f64,
    horizon: f64,
    growth_target: f64,
    iiss: Option<&crate::certify::IissCertificate>,
    sim: &SimOptions,
) -> Result<IssProbeReport> {
    if !(amplitude > 0.0 && hold > 0.0 && horizon > hold) {
        return Err(Error::Domain("ISS probe needs amplitude > 0 and 0 < hold < horizon".into()));
    }
    let m = sys.input_dim();
    let n = sys.state_dim();
    let chunks = (horizon / hold).ceil() as usize;
    let mut times = Vec::with_capacity(chunks);
    let mut values: Vec<Vec<f64>> = Vec::with_capacity(chunks);
    let mut x = x0.to_vec();
    let mut f0 = vec![0.0; n];
    let mut f1 = vec![0.0; n];
    for j in 0..chunks {
        let a = j as f64 * hold;
        let b = if j + 1 == chunks { horizon } else { (j + 1) as f64 * hold };
        let mode = sigma.at(a);
        // Direction of steepest ascent of x'x through the input channel.
        let zero = vec![0.0; m];
        sys.eval_into(a, &x, &zero, mode, &mut f0);
        let mut g = vec![0.0; m];
        for (c, gc) in g.iter_mut().enumerate() {
            let mut e = zero.clone();
            e[c] = 1.0;
            sys.eval_into(a, &x, &e, mode, &mut f1);
            *gc = (0..n).map(|r| x[r] * (f1[r] - f0[r])).sum();
        }
        let gn = norm(&g);
        let u: Vec<f64> = if gn > 0.0 {
            g.iter().map(|v| amplitude * v / gn).collect()
        } else {
            let mut v = vec![0.0; m];
            v[0] = amplitude;
            v
        };
        if j > 0 {
            times.push(a);
        }
        values.push(u.clone());
        let piece = InputSignal::piecewise_constant(vec![], vec![u])?;
        let traj = simulate(sys, &x, a, &piece, sigma, b, sim)?;
        x = traj.final_state().to_vec();
        if traj.blow_up().is_some() {
            break;
        }
    }
    let input = InputSignal::piecewise_constant(times, values)?;
    let traj = simulate(sys, x0, 0.0, &input, sigma, horizon, sim)?;
    let t_end = traj.t_end();
    let final_norm = norm(traj.final_state());
    let growth = final_norm / norm(x0).max(f64::MIN_POSITIVE);
    let half = traj.times().partition_point(|&t| t < 0.5 * t_end);
    let (ts, ns): (Vec<f64>, Vec<f64>) = (half..traj.len()).map(|k| (traj.times()[k], traj.state_norm(k))).unzip();
    let late_slope = slope(&ts, &ns);
    let iiss_recheck = match iiss {
        Some(cert) => {
            let ens = ensemble_from_cases(
                sys,
                vec![Case {
                    x0: x0.to_vec(),
                    t0: 0.0,
                    horizon,
                    u: input.clone(),
                    sigma: sigma.clone(),
                }],
                sim,
            )?;
            Some(check_iiss(&ens, cert, &CheckOptions::default())?)
        }
        None => None,
    };
    Ok(IssProbeReport {
        x0: x0.to_vec(),
        sigma: sigma.clone(),
        sup_input: input.sup_norm(0.0, t_end),
        input_l1: crate::signals::energy_norm(&input, &MonotoneFn::identity(), 0.0, t_end, 1e-9)?,
        input,
        horizon: t_end,
        final_norm,
        growth,
        late_slope,
        diverging: growth >= growth_target && late_slope > 0.0,
        iiss_recheck,
    })
}

fn slope(t: &[f64], y: &[f64]) -> f64 {
    let n = t.len() as f64;
    if t.len() < 2 {
        return 0.0;
    }
    let (mt, my) = (t.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = t.iter().zip(y).map(|(a, b)| (a - mt) * (b - my)).sum();
    let var: f64 = t.iter().map(|a| (a - mt) * (a - mt)).sum();
    if var > 0.0 {
        cov / var
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{make_switched_linear, prop4_pair};
    use nalgebra::DMatrix;

    #[test]
    fn constant_rule_gives_constant_signal() {
        let sys = prop4_pair();
        let un = unroll_policy(
            &sys,
            &PolicySpec::new(SwitchPolicy::Constant { mode: 2 }),
            &[1.0, 0.0],
            0.0,
            1.0,
            &InputSignal::zero(1),
            &SimOptions::default(),
        )
        .unwrap();
        assert!(un.sigma.switch_times().is_empty());
        assert_eq!(un.sigma.modes(), &[2]);
    }

    #[test]
    fn unrolled_quadrant_rule_replays_bitwise() {
        let sys = prop4_pair();
        let pol = PolicySpec::new(SwitchPolicy::QuadrantRule { table: [1, 2, 1, 2] });
        let sim = SimOptions::default();
        let un = unroll_policy(&sys, &pol, &[1.0, 0.0], 0.0, 2.0, &InputSignal::zero(1), &sim).unwrap();
        assert!(un.sigma.switch_times().len() > 4);
        // The co-simulated state and the replay agree bitwise at the end.
        let replay = simulate(&sys, &[1.0, 0.0], 0.0, &InputSignal::zero(1), &un.sigma, un.sigma.horizon(), &sim).unwrap();
        assert_eq!(replay.final_state(), un.traj.final_state());
        // Switches land where x₁x₂ changes sign.
        for &s in un.sigma.switch_times() {
            let x = un.traj.dense_eval(s).unwrap();
            let k = un.traj.times().iter().position(|&t| t == s).unwrap();
            let xp = un.traj.state(k - 1);
            assert!((x[0] * x[1]).signum() != (xp[0] * xp[1]).signum() || x[0] * x[1] == 0.0);
        }
    }

    #[test]
    fn large_guard_is_flagged_degenerate() {
        let sys = prop4_pair();
        let mut pol = PolicySpec::new(SwitchPolicy::QuadrantRule { table: [1, 2, 1, 2] });
        pol.guard = 1.0;
        let un = unroll_policy(&sys, &pol, &[1.0, 0.0], 0.0, 3.0, &InputSignal::zero(1), &SimOptions::default()).unwrap();
        assert!(un.degenerate, "{} of {} requested switches", un.switches, un.requested);
        pol.guard = DEFAULT_GUARD;
        let un = unroll_policy(&sys, &pol, &[1.0, 0.0], 0.0, 3.0, &InputSignal::zero(1), &SimOptions::default()).unwrap();
        assert!(!un.degenerate);
    }

    #[test]
    fn destabilizing_witness_on_prop4() {
        let sys = prop4_pair();
        let sim = SimOptions::default();
        let grid = unit_sphere_grid(2, 8, 0);
        let w = find_destabilizing(&sys, &default_policy_family(&sys), &grid, 10.0, 5.0, &sim)
            .unwrap()
            .expect("witness");
        assert!(w.growth >= 10.0 && w.t_hit <= 5.0);
        let g = w.replay_growth(&sys, &sim).unwrap();
        assert!(((g - w.growth) / w.growth).abs() <= 1e-6);
    }

    #[test]
    fn single_hurwitz_mode_has_no_witness() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, -100.0, 10.0, -1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let sys = make_switched_linear(vec![a], vec![b]).unwrap();
        let grid = unit_sphere_grid(2, 8, 0);
        let pol = vec![PolicySpec::new(SwitchPolicy::Constant { mode: 1 })];
        assert!(find_destabilizing(&sys, &pol, &grid, 10.0, 5.0, &SimOptions::default()).unwrap().is_none());
    }

    #[test]
    fn transient_growth_alone_exceeds_small_target() {
        let sys = prop4_pair();
        let pol = vec![PolicySpec::new(SwitchPolicy::Constant { mode: 1 })];
        let w = find_destabilizing(&sys, &pol, &[vec![0.0, 1.0]], 1.01, 0.05, &SimOptions::default())
            .unwrap()
            .expect("transient growth");
        assert!(w.t_hit < 0.05);
    }

    #[test]
    fn common_lyapunov_base_holds_under_concatenation() {
        let a = DMatrix::<f64>::identity(2, 2) * -1.0;
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let sys = make_switched_linear(vec![a.clone(), a], vec![b.clone(), b]).unwrap();
        let base = SignalSetSpec::FiniteFamily {
            signals: vec![SwitchingSignal::constant(1, 5.0), SwitchingSignal::constant(2, 5.0)],
        };
        let rep = probe_concat_closure(
            &sys,
            &Storage::half_norm_squared(2),
            &MonotoneFn::identity(),
            &base,
            2,
            10,
            3,
            &CheckOptions::default(),
            &SimOptions::default(),
        )
        .unwrap();
        assert!(rep.report.holds());
        assert_eq!(rep.prefix_violations, 0);
    }
}
