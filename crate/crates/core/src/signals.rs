//! Switching signals, admissible signal sets, concatenation, input signals
//! and χ-weighted input energy.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::comparison::MonotoneFn;
use crate::error::{Error, Result};

/// Mode index (the examples use 1-based labels, as in the literature).
pub type Mode = usize;

/// Default absolute tolerance for adaptive quadrature of input energy.
pub const TOL_QUAD: f64 = 1e-9;
/// Tail bound below which an infinite-horizon energy is declared finite.
pub const TOL_ENERGY_TAIL: f64 = 1e-6;

// Slack used when comparing dwell intervals against their bounds.
const DWELL_EPS: f64 = 1e-9;

/// Right-continuous piecewise-constant mode selector. The value on
/// `[switch_times[k-1], switch_times[k])` is `modes[k]`; after `horizon`
/// the last mode holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSignal", into = "RawSignal")]
pub struct SwitchingSignal {
    switch_times: Vec<f64>,
    modes: Vec<Mode>,
    horizon: f64,
}

#[derive(Serialize, Deserialize)]
struct RawSignal {
    switch_times: Vec<f64>,
    modes: Vec<Mode>,
    horizon: f64,
}

impl TryFrom<RawSignal> for SwitchingSignal {
    type Error = Error;
    fn try_from(raw: RawSignal) -> Result<Self> {
        SwitchingSignal::new(raw.switch_times, raw.modes, raw.horizon)
    }
}

impl From<SwitchingSignal> for RawSignal {
    fn from(s: SwitchingSignal) -> Self {
        RawSignal {
            switch_times: s.switch_times,
            modes: s.modes,
            horizon: s.horizon,
        }
    }
}

impl SwitchingSignal {
    /// Validates and canonicalizes: switches that keep the same mode are
    /// dropped, so equal functions have equal representations.
    pub fn new(switch_times: Vec<f64>, modes: Vec<Mode>, horizon: f64) -> Result<Self> {
        if modes.len() != switch_times.len() + 1 {
            return Err(Error::Invariant(format!(
                "switching signal: {} switch times need {} modes, got {}",
                switch_times.len(),
                switch_times.len() + 1,
                modes.len()
            )));
        }
        let mut prev = 0.0;
        for &t in &switch_times {
            if !(t > prev) || !t.is_finite() {
                return Err(Error::Invariant(format!(
                    "switch times must be finite, positive and strictly increasing (got {t} after {prev})"
                )));
            }
            prev = t;
        }
        if !(horizon >= prev) || !horizon.is_finite() {
            return Err(Error::Invariant(format!(
                "horizon {horizon} precedes the last switch time {prev}"
            )));
        }
        let mut times = Vec::with_capacity(switch_times.len());
        let mut canon = Vec::with_capacity(modes.len());
        canon.push(modes[0]);
        for (t, &m) in switch_times.iter().zip(modes.iter().skip(1)) {
            if m != *canon.last().expect("non-empty") {
                times.push(*t);
                canon.push(m);
            }
        }
        Ok(Self {
            switch_times: times,
            modes: canon,
            horizon,
        })
    }

    pub fn constant(mode: Mode, horizon: f64) -> Self {
        Self {
            switch_times: Vec::new(),
            modes: vec![mode],
            horizon: horizon.max(0.0),
        }
    }

    pub fn switch_times(&self) -> &[f64] {
        &self.switch_times
    }
    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn eval(&self, t: f64) -> Result<Mode> {
        if !(t >= 0.0) {
            return Err(Error::Domain(format!("switching signal evaluated at t={t}")));
        }
        Ok(self.at(t))
    }

    #[inline]
    pub fn at(&self, t: f64) -> Mode {
        self.modes[self.switch_times.partition_point(|&s| s <= t)]
    }

    /// Switch times strictly inside `(a, b)`.
    pub fn switches_between(&self, a: f64, b: f64) -> impl Iterator<Item = f64> + '_ {
        let lo = self.switch_times.partition_point(|&s| s <= a);
        self.switch_times[lo..].iter().copied().take_while(move |&s| s < b)
    }

    /// Maximal constant runs `(start, end, mode)` up to the horizon.
    pub fn runs(&self) -> Vec<(f64, f64, Mode)> {
        let mut out = Vec::with_capacity(self.modes.len());
        let mut start = 0.0;
        for (k, &m) in self.modes.iter().enumerate() {
            let end = self.switch_times.get(k).copied().unwrap_or(self.horizon);
            out.push((start, end, m));
            start = end;
        }
        out
    }

    /// A copy with a different horizon (clamped to the last switch).
    pub fn with_horizon(&self, horizon: f64) -> Self {
        let last = self.switch_times.last().copied().unwrap_or(0.0);
        Self {
            horizon: horizon.max(last),
            ..self.clone()
        }
    }
}

/// `σ₁ ♯_{t₁} σ₂ ♯_{t₂} ⋯ σ_k`: `σⱼ(s)` on `[t_{j-1}, tⱼ)`, evaluated in
/// absolute time.
pub fn concatenate(signals: &[SwitchingSignal], times: &[f64]) -> Result<SwitchingSignal> {
    if signals.is_empty() {
        return Err(Error::Empty("concatenate needs at least one signal"));
    }
    if times.len() + 1 != signals.len() {
        return Err(Error::Invariant(format!(
            "{} signals need {} concatenation times, got {}",
            signals.len(),
            signals.len() - 1,
            times.len()
        )));
    }
    let mut prev = 0.0;
    for &t in times {
        if !(t > prev) || !t.is_finite() {
            return Err(Error::Invariant(format!(
                "concatenation times must be positive and strictly increasing (got {t} after {prev})"
            )));
        }
        prev = t;
    }
    let mut sw = Vec::new();
    let mut modes = vec![signals[0].at(0.0)];
    for (j, sig) in signals.iter().enumerate() {
        let a = if j == 0 { 0.0 } else { times[j - 1] };
        let b = times.get(j).copied().unwrap_or(f64::INFINITY);
        if j > 0 {
            sw.push(a);
            modes.push(sig.at(a));
        }
        for s in sig.switches_between(a, b) {
            sw.push(s);
            modes.push(sig.at(s));
        }
    }
    let last_time = times.last().copied().unwrap_or(0.0);
    let draft = SwitchingSignal::new(sw, modes, last_time.max(signals[signals.len() - 1].horizon))?;
    let last_switch = draft.switch_times.last().copied().unwrap_or(0.0);
    Ok(draft.with_horizon(signals[signals.len() - 1].horizon.max(last_switch)))
}

/// Specification of an admissible switching-signal set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SignalSetSpec {
    FiniteFamily { signals: Vec<SwitchingSignal> },
    DwellTime { d_min: f64, d_max: f64, modes: Vec<Mode> },
    ConcatClosure { base: Box<SignalSetSpec>, k: usize },
    Arbitrary { modes: Vec<Mode> },
}

/// Outcome of a membership test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Membership {
    pub member: bool,
    pub reason: String,
    /// For concatenation closures, the fewest base signals needed.
    pub pieces: Option<usize>,
}

impl Membership {
    fn yes(reason: impl Into<String>) -> Self {
        Self {
            member: true,
            reason: reason.into(),
            pieces: None,
        }
    }
    fn no(reason: impl Into<String>) -> Self {
        Self {
            member: false,
            reason: reason.into(),
            pieces: None,
        }
    }
}

impl SignalSetSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            SignalSetSpec::FiniteFamily { signals } if signals.is_empty() => {
                Err(Error::Config("finite family must contain at least one signal".into()))
            }
            SignalSetSpec::DwellTime { d_min, d_max, modes } => {
                if !(*d_min > 0.0 && d_min <= d_max) || !d_max.is_finite() {
                    return Err(Error::Config(format!("dwell times need 0 < d_min <= d_max, got ({d_min}, {d_max})")));
                }
                if modes.is_empty() {
                    return Err(Error::Config("dwell-time set needs at least one mode".into()));
                }
                Ok(())
            }
            SignalSetSpec::ConcatClosure { base, k } => {
                if *k < 2 {
                    return Err(Error::Config(format!("concatenation depth must be at least 2, got {k}")));
                }
                base.validate()
            }
            SignalSetSpec::Arbitrary { modes } if modes.is_empty() => {
                Err(Error::Config("arbitrary switching needs at least one mode".into()))
            }
            _ => Ok(()),
        }
    }

    /// Every mode a member signal may take.
    pub fn modes(&self) -> Vec<Mode> {
        let mut out = match self {
            SignalSetSpec::FiniteFamily { signals } => signals.iter().flat_map(|s| s.modes.clone()).collect(),
            SignalSetSpec::DwellTime { modes, .. } | SignalSetSpec::Arbitrary { modes } => modes.clone(),
            SignalSetSpec::ConcatClosure { base, .. } => base.modes(),
        };
        out.sort_unstable();
        out.dedup();
        out
    }

    // Flattens nested closures: (S♯ₐ)♯_b = S♯_{ab}.
    fn flattened(&self) -> (&SignalSetSpec, usize) {
        match self {
            SignalSetSpec::ConcatClosure { base, k } => {
                let (inner, depth) = base.flattened();
                (inner, depth * k)
            }
            other => (other, 1),
        }
    }
}

/// Decides whether `sigma` belongs to `set`, with a human-readable reason.
pub fn validate_membership(sigma: &SwitchingSignal, set: &SignalSetSpec) -> Membership {
    match set {
        SignalSetSpec::FiniteFamily { signals } => {
            match signals
                .iter()
                .position(|m| m.switch_times == sigma.switch_times && m.modes == sigma.modes)
            {
                Some(i) => Membership::yes(format!("identical to family member {i}")),
                None => Membership::no("not identical to any family member"),
            }
        }
        SignalSetSpec::Arbitrary { modes } => match sigma.modes.iter().find(|m| !modes.contains(m)) {
            Some(m) => Membership::no(format!("mode {m} is not in the admissible mode set")),
            None => Membership::yes("all modes admissible"),
        },
        SignalSetSpec::DwellTime { d_min, d_max, modes } => {
            if let Some(m) = sigma.modes.iter().find(|m| !modes.contains(m)) {
                return Membership::no(format!("mode {m} is not in the admissible mode set"));
            }
            for (start, end, mode) in sigma.runs() {
                let len = end - start;
                if len < d_min - DWELL_EPS || len > d_max + DWELL_EPS {
                    return Membership::no(format!(
                        "dwell in mode {mode} on [{start}, {end}] lasts {len}, outside [{d_min}, {d_max}]"
                    ));
                }
            }
            Membership::yes("every dwell interval lies within the bounds")
        }
        SignalSetSpec::ConcatClosure { .. } => {
            let (base, k) = set.flattened();
            concat_membership(sigma, base, k)
        }
    }
}

fn fragment_ok(sigma: &SwitchingSignal, base: &SignalSetSpec, a: f64, b: f64) -> bool {
    match base {
        SignalSetSpec::FiniteFamily { signals } => signals.iter().any(|rho| {
            if sigma.at(a) != rho.at(a) {
                return false;
            }
            sigma
                .switches_between(a, b)
                .chain(rho.switches_between(a, b))
                .all(|s| sigma.at(s) == rho.at(s))
        }),
        SignalSetSpec::Arbitrary { modes } => {
            std::iter::once(a)
                .chain(sigma.switches_between(a, b))
                .all(|s| modes.contains(&sigma.at(s)))
        }
        SignalSetSpec::DwellTime { d_min, d_max, modes } => {
            for (start, end, mode) in sigma.runs() {
                if end <= a || start >= b {
                    continue;
                }
                if !modes.contains(&mode) {
                    return false;
                }
                let cut_start = a > 0.0 && start <= a;
                let cut_end = b.is_finite() && end >= b;
                let len = end.min(b) - start.max(a);
                if len > d_max + DWELL_EPS {
                    return false;
                }
                if !cut_start && !cut_end && len < d_min - DWELL_EPS {
                    return false;
                }
            }
            // The last run also holds past the horizon; it is complete there.
            true
        }
        SignalSetSpec::ConcatClosure { .. } => unreachable!("closures are flattened"),
    }
}

// Breadth-first search over candidate breakpoints for the fewest base
// fragments that tile [0, ∞).
fn concat_membership(sigma: &SwitchingSignal, base: &SignalSetSpec, k: usize) -> Membership {
    let mut cands: Vec<f64> = sigma.switch_times.clone();
    match base {
        SignalSetSpec::FiniteFamily { signals } => {
            for rho in signals {
                cands.extend(rho.switch_times.iter().copied());
            }
        }
        SignalSetSpec::DwellTime { d_max, .. } => {
            for (start, end, _) in sigma.runs() {
                if end - start > *d_max {
                    cands.push(start + d_max);
                    cands.push(end - d_max);
                }
            }
        }
        _ => {}
    }
    cands.retain(|&t| t > 0.0 && t.is_finite());
    cands.sort_by(|a, b| a.total_cmp(b));
    cands.dedup();
    let mut points = vec![0.0];
    points.extend(cands);

    let n = points.len();
    let mut depth = vec![usize::MAX; n];
    depth[0] = 0;
    let mut queue = VecDeque::from([0usize]);
    while let Some(p) = queue.pop_front() {
        let d = depth[p];
        if d + 1 > k {
            continue;
        }
        if fragment_ok(sigma, base, points[p], f64::INFINITY) {
            let mut m = Membership::yes(format!("decomposes into {} base signal(s)", d + 1));
            m.pieces = Some(d + 1);
            return m;
        }
        for q in p + 1..n {
            if depth[q] == usize::MAX && fragment_ok(sigma, base, points[p], points[q]) {
                depth[q] = d + 1;
                queue.push_back(q);
            }
        }
    }
    Membership::no(format!("no decomposition into at most {k} base signals"))
}

/// Draws a member of `set` covering `[0, horizon]`; deterministic in `seed`.
pub fn sample_signal_set(set: &SignalSetSpec, horizon: f64, seed: u64) -> Result<SwitchingSignal> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_with_rng(set, horizon, &mut rng)
}

pub fn sample_with_rng<R: Rng>(set: &SignalSetSpec, horizon: f64, rng: &mut R) -> Result<SwitchingSignal> {
    if !(horizon > 0.0) {
        return Err(Error::Domain(format!("sampling horizon must be positive, got {horizon}")));
    }
    set.validate().map_err(|e| Error::Unsatisfiable(e.to_string()))?;
    match set {
        SignalSetSpec::FiniteFamily { signals } => Ok(signals.choose(rng).expect("validated non-empty").clone()),
        SignalSetSpec::DwellTime { d_min, d_max, modes } => {
            if modes.len() == 1 {
                if horizon <= *d_max {
                    return Ok(SwitchingSignal::constant(modes[0], horizon.max(*d_min)));
                }
                return Err(Error::Unsatisfiable(format!(
                    "a single mode cannot dwell for {horizon} with d_max = {d_max}"
                )));
            }
            let gap = |rng: &mut R| if d_min == d_max { *d_min } else { rng.gen_range(*d_min..=*d_max) };
            switching_walk(modes, horizon, rng, gap)
        }
        SignalSetSpec::Arbitrary { modes } => {
            if modes.len() == 1 {
                return Ok(SwitchingSignal::constant(modes[0], horizon));
            }
            let mean = horizon / 20.0;
            let gap = |rng: &mut R| (-mean * (1.0 - rng.gen::<f64>()).ln()).max(1e-3);
            switching_walk(modes, horizon, rng, gap)
        }
        SignalSetSpec::ConcatClosure { base, k } => {
            let members: Vec<SwitchingSignal> = (0..*k)
                .map(|_| sample_with_rng(base, horizon, rng))
                .collect::<Result<_>>()?;
            let mut times: Vec<f64> = (0..k - 1).map(|_| rng.gen_range(0.0..horizon)).collect();
            times.sort_by(|a, b| a.total_cmp(b));
            times.dedup();
            times.retain(|&t| t > 0.0);
            concatenate(&members[..times.len() + 1], &times)
        }
    }
}

// Alternating walk: each gap drawn by `gap`, each new mode uniform among the
// other modes. The horizon is extended to the end of the last dwell.
fn switching_walk<R: Rng, G: FnMut(&mut R) -> f64>(
    modes: &[Mode],
    horizon: f64,
    rng: &mut R,
    mut gap: G,
) -> Result<SwitchingSignal> {
    let mut current = *modes.choose(rng).expect("non-empty");
    let mut times = Vec::new();
    let mut seq = vec![current];
    let mut t = 0.0;
    loop {
        let next = t + gap(rng);
        if next >= horizon {
            return SwitchingSignal::new(times, seq, next);
        }
        let others: Vec<Mode> = modes.iter().copied().filter(|&m| m != current).collect();
        current = *others.choose(rng).expect("at least two modes");
        times.push(next);
        seq.push(current);
        t = next;
    }
}

/// Scalar time profiles for analytic inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum InputPreset {
    /// `amplitude · e^{-rate·t}`
    ExpDecay { amplitude: f64, rate: f64 },
    /// `amplitude · sin(omega·t + phase)`
    Sinusoid { amplitude: f64, omega: f64, phase: f64 },
    /// `amplitude` on `[start, end)`, zero elsewhere.
    Pulse { amplitude: f64, start: f64, end: f64 },
}

impl InputPreset {
    fn value(&self, t: f64) -> f64 {
        match *self {
            InputPreset::ExpDecay { amplitude, rate } => amplitude * (-rate * t).exp(),
            InputPreset::Sinusoid { amplitude, omega, phase } => amplitude * (omega * t + phase).sin(),
            InputPreset::Pulse { amplitude, start, end } => {
                if t >= start && t < end {
                    amplitude
                } else {
                    0.0
                }
            }
        }
    }
}

/// Input signal `u: [0, ∞) → ℝᵐ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputSignal {
    Zero {
        dim: usize,
    },
    /// `values[0]` before `times[0]`, `values[k]` on `[times[k-1], times[k])`.
    PiecewiseConstant {
        times: Vec<f64>,
        values: Vec<Vec<f64>>,
    },
    /// `profile(t) · direction`.
    Preset {
        preset: InputPreset,
        direction: Vec<f64>,
    },
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl InputSignal {
    pub fn zero(dim: usize) -> Self {
        InputSignal::Zero { dim }
    }

    pub fn scalar_preset(preset: InputPreset) -> Self {
        InputSignal::Preset {
            preset,
            direction: vec![1.0],
        }
    }

    pub fn piecewise_constant(times: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.len() != times.len() + 1 {
            return Err(Error::Invariant("piecewise-constant input needs one more value than breakpoints".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) || times.iter().any(|t| !t.is_finite()) {
            return Err(Error::Invariant("input breakpoints must be finite and strictly increasing".into()));
        }
        let dim = values[0].len();
        if values.iter().any(|v| v.len() != dim || v.iter().any(|x| !x.is_finite())) {
            return Err(Error::Invariant("input values must be finite with a common dimension".into()));
        }
        Ok(InputSignal::PiecewiseConstant { times, values })
    }

    pub fn dim(&self) -> usize {
        match self {
            InputSignal::Zero { dim } => *dim,
            InputSignal::PiecewiseConstant { values, .. } => values[0].len(),
            InputSignal::Preset { direction, .. } => direction.len(),
        }
    }

    /// True when `u ≡ 0`.
    pub fn is_zero(&self) -> bool {
        match self {
            InputSignal::Zero { .. } => true,
            InputSignal::PiecewiseConstant { values, .. } => values.iter().all(|v| v.iter().all(|&x| x == 0.0)),
            InputSignal::Preset { preset, direction } => {
                direction.iter().all(|&x| x == 0.0)
                    || match preset {
                        InputPreset::ExpDecay { amplitude, .. }
                        | InputPreset::Sinusoid { amplitude, .. }
                        | InputPreset::Pulse { amplitude, .. } => *amplitude == 0.0,
                    }
            }
        }
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        match self {
            InputSignal::Zero { .. } => out.fill(0.0),
            InputSignal::PiecewiseConstant { times, values } => {
                out.copy_from_slice(&values[times.partition_point(|&s| s <= t)]);
            }
            InputSignal::Preset { preset, direction } => {
                let p = preset.value(t);
                for (o, d) in out.iter_mut().zip(direction) {
                    *o = p * d;
                }
            }
        }
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(t, &mut out);
        out
    }

    /// Value on the integration segment `[a, b]` that contains no
    /// breakpoint in its interior; discontinuous pieces use the value of
    /// the piece covering the segment, continuous profiles are evaluated at
    /// `t` itself.
    pub fn eval_on_segment(&self, t: f64, a: f64, b: f64, out: &mut [f64]) {
        match self {
            InputSignal::Preset {
                preset: InputPreset::ExpDecay { .. } | InputPreset::Sinusoid { .. },
                ..
            } => self.eval_into(t, out),
            _ => self.eval_into(0.5 * (a + b), out),
        }
    }

    /// `|u(t)|`.
    pub fn norm_at(&self, t: f64) -> f64 {
        match self {
            InputSignal::Zero { .. } => 0.0,
            InputSignal::PiecewiseConstant { times, values } => norm(&values[times.partition_point(|&s| s <= t)]),
            InputSignal::Preset { preset, direction } => preset.value(t).abs() * norm(direction),
        }
    }

    fn is_piecewise_constant(&self) -> bool {
        !matches!(
            self,
            InputSignal::Preset {
                preset: InputPreset::ExpDecay { .. } | InputPreset::Sinusoid { .. },
                ..
            }
        )
    }

    /// Length scale over which a smooth profile can change shape; quadrature
    /// panels are never wider than this.
    fn quadrature_scale(&self) -> f64 {
        match self {
            InputSignal::Preset {
                preset: InputPreset::Sinusoid { omega, .. },
                ..
            } if *omega != 0.0 => std::f64::consts::FRAC_PI_4 / omega.abs(),
            InputSignal::Preset {
                preset: InputPreset::ExpDecay { rate, .. },
                ..
            } if *rate != 0.0 => 0.5 / rate.abs(),
            _ => f64::INFINITY,
        }
    }

    /// Panel edges covering `[a, b]`: uniform panels no wider than the
    /// quadrature scale, plus every time where `|u|` has a kink or crosses a
    /// knot of `chi`, so the integrand is smooth on each panel.
    fn quadrature_panels(&self, chi: &MonotoneFn, a: f64, b: f64) -> Vec<f64> {
        let n = ((b - a) / self.quadrature_scale()).ceil().clamp(1.0, 1e6) as usize;
        let width = (b - a) / n as f64;
        let mut edges: Vec<f64> = (0..n).map(|k| a + k as f64 * width).collect();
        if let InputSignal::Preset { preset, direction } = self {
            let dn = norm(direction);
            let knots = chi.knots().iter().copied().filter(|&s| s > 0.0);
            match *preset {
                InputPreset::Sinusoid { amplitude, omega, phase } if omega != 0.0 => {
                    let peak = amplitude.abs() * dn;
                    let mut angles = vec![0.0];
                    for s in knots.filter(|&s| s < peak) {
                        let th = (s / peak).asin();
                        angles.extend([th, std::f64::consts::PI - th]);
                    }
                    let pi = std::f64::consts::PI;
                    let (pa, pb) = (omega * a + phase, omega * b + phase);
                    let (lo, hi) = ((pa.min(pb) / pi).floor() as i64, (pa.max(pb) / pi).ceil() as i64);
                    for k in lo..=hi {
                        for th in &angles {
                            let t = (k as f64 * pi + th - phase) / omega;
                            if t > a && t < b {
                                edges.push(t);
                            }
                        }
                    }
                }
                InputPreset::ExpDecay { amplitude, rate } if rate != 0.0 => {
                    let scale = amplitude.abs() * dn;
                    edges.extend(knots.filter(|&s| s < scale).map(|s| (scale / s).ln() / rate).filter(|&t| t > a && t < b));
                }
                _ => {}
            }
        }
        edges.push(b);
        edges.sort_by(f64::total_cmp);
        edges.dedup();
        edges
    }

    /// Discontinuities strictly inside `(a, b)`.
    pub fn breakpoints(&self, a: f64, b: f64) -> Vec<f64> {
        let raw: Vec<f64> = match self {
            InputSignal::PiecewiseConstant { times, .. } => times.clone(),
            InputSignal::Preset {
                preset: InputPreset::Pulse { start, end, .. },
                ..
            } => vec![*start, *end],
            _ => Vec::new(),
        };
        raw.into_iter().filter(|&t| t > a && t < b).collect()
    }

    /// `sup |u|` over `[a, b]`, exact for piecewise-constant inputs and
    /// sampled on a fine grid otherwise.
    pub fn sup_norm(&self, a: f64, b: f64) -> f64 {
        if self.is_piecewise_constant() {
            let mut pts = vec![a];
            pts.extend(self.breakpoints(a, b));
            return pts.iter().map(|&t| self.norm_at(t)).fold(0.0, f64::max);
        }
        (0..=1000)
            .map(|k| self.norm_at(a + (b - a) * k as f64 / 1000.0))
            .fold(0.0, f64::max)
    }
}

/// `∫_{t0}^{t1} χ(|u(τ)|) dτ` to absolute tolerance `tol`, exact for
/// piecewise-constant inputs.
pub fn energy_norm(u: &InputSignal, chi: &MonotoneFn, t0: f64, t1: f64, tol: f64) -> Result<f64> {
    if !(t1 >= t0) {
        return Err(Error::Domain(format!("energy interval [{t0}, {t1}] is reversed")));
    }
    if t1 == t0 || u.is_zero() {
        return Ok(0.0);
    }
    let mut cuts = vec![t0];
    cuts.extend(u.breakpoints(t0, t1));
    cuts.push(t1);
    let span = t1 - t0;
    let mut total = 0.0;
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if u.is_piecewise_constant() {
            total += chi.at(u.norm_at(0.5 * (a + b))) * (b - a);
        } else {
            let g = |t: f64| chi.at(u.norm_at(t));
            let scale = u.quadrature_scale();
            for p in u.quadrature_panels(chi, a, b).windows(2) {
                // Panels wider than scale/16 are split before the error estimate is trusted.
                let forced = ((p[1] - p[0]) * 16.0 / scale).log2().ceil().clamp(0.0, 4.0) as u32;
                total += adaptive_simpson(&g, p[0], p[1], tol * (p[1] - p[0]) / span, forced);
            }
        }
    }
    Ok(total)
}

fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, forced: u32) -> f64 {
    let (fa, fb) = (f(a), f(b));
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(f, a, b, fa, fm, fb, whole, tol.max(f64::MIN_POSITIVE), 48, 48 - forced)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32, accept_below: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || (depth <= accept_below && delta.abs() <= 15.0 * tol) {
        return left + right + delta / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1, accept_below)
        + simpson_step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1, accept_below)
}

/// Infinite-horizon energy split into a computed part and a tail bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyEstimate {
    /// `∫_{t0}^{T} χ(|u|)`.
    pub truncated: f64,
    /// Upper bound on `∫_T^∞ χ(|u|)`; `+∞` when the energy diverges.
    pub tail_bound: f64,
}

impl EnergyEstimate {
    pub fn total_upper(&self) -> f64 {
        self.truncated + self.tail_bound
    }
    /// `u ∈ 𝒰ₘ^χ` verdict: the tail is below `tol_tail`.
    pub fn is_finite(&self, tol_tail: f64) -> bool {
        self.tail_bound < tol_tail
    }
}

/// `‖u‖_χ` over `[t0, ∞)`, truncated at `t_trunc` with a tail bound.
pub fn energy_norm_infinite(u: &InputSignal, chi: &MonotoneFn, t0: f64, t_trunc: f64, tol: f64) -> Result<EnergyEstimate> {
    let truncated = energy_norm(u, chi, t0, t_trunc.max(t0), tol)?;
    let t = t_trunc.max(t0);
    let tail_bound = match u {
        InputSignal::Zero { .. } => 0.0,
        InputSignal::PiecewiseConstant { times, values } => {
            if norm(values.last().expect("non-empty")) > 0.0 {
                f64::INFINITY
            } else {
                let last = times.last().copied().unwrap_or(t);
                energy_norm(u, chi, t, last.max(t), tol)?
            }
        }
        InputSignal::Preset { preset, direction } => {
            let dn = norm(direction);
            match *preset {
                _ if u.is_zero() => 0.0,
                // χ(s) ≤ (max slope)·s for piecewise-linear χ with χ(0) = 0.
                InputPreset::ExpDecay { amplitude, rate } if rate > 0.0 => {
                    chi.max_slope() * amplitude.abs() * dn * (-rate * t).exp() / rate
                }
                InputPreset::ExpDecay { .. } | InputPreset::Sinusoid { .. } => f64::INFINITY,
                InputPreset::Pulse { end, .. } => energy_norm(u, chi, t, end.max(t), tol)?,
            }
        }
    };
    Ok(EnergyEstimate { truncated, tail_bound })
}

/// Running energy `E(tₖ) = ∫_{times[0]}^{tₖ} χ(|u|)` on a time grid whose
/// steps do not straddle input breakpoints.
pub fn cumulative_energy(u: &InputSignal, chi: &MonotoneFn, times: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(times.len());
    let mut acc = 0.0;
    out.push(0.0);
    let zero = u.is_zero();
    for w in times.windows(2) {
        if !zero {
            acc += energy_norm(u, chi, w[0], w[1], TOL_QUAD * (w[1] - w[0])).unwrap_or(0.0);
        }
        out.push(acc);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig(times: &[f64], modes: &[Mode], horizon: f64) -> SwitchingSignal {
        SwitchingSignal::new(times.to_vec(), modes.to_vec(), horizon).unwrap()
    }

    #[test]
    fn eval_sigma_examples() {
        assert_eq!(SwitchingSignal::constant(1, 10.0).eval(7.0).unwrap(), 1);
        let s = sig(&[1.0], &[1, 2], 5.0);
        assert_eq!(s.eval(1.0).unwrap(), 2);
        assert_eq!(s.eval(0.999).unwrap(), 1);
        assert!(s.eval(-0.1).is_err());
    }

    #[test]
    fn rejects_bad_signals() {
        assert!(SwitchingSignal::new(vec![1.0, 1.0], vec![1, 2, 1], 3.0).is_err());
        assert!(SwitchingSignal::new(vec![0.0], vec![1, 2], 3.0).is_err());
        assert!(SwitchingSignal::new(vec![1.0], vec![1], 3.0).is_err());
        assert!(SwitchingSignal::new(vec![4.0], vec![1, 2], 3.0).is_err());
    }

    #[test]
    fn concatenate_examples() {
        let one = SwitchingSignal::constant(1, 5.0);
        let two = SwitchingSignal::constant(2, 5.0);
        let c = concatenate(&[one.clone(), two.clone()], &[1.0]).unwrap();
        assert_eq!(c.switch_times(), &[1.0]);
        assert_eq!(c.modes(), &[1, 2]);

        let c3 = concatenate(&[one.clone(), two, one.clone()], &[1.0, 2.0]).unwrap();
        assert_eq!(c3.modes(), &[1, 2, 1]);
        assert_eq!(c3.switch_times(), &[1.0, 2.0]);

        let s = sig(&[0.5, 2.5], &[1, 2, 1], 4.0);
        assert_eq!(concatenate(&[s.clone(), s.clone()], &[1.7]).unwrap(), s);

        assert!(concatenate(&[one.clone(), one.clone(), one.clone()], &[2.0, 1.0]).is_err());
        assert!(concatenate(&[one.clone(), one], &[]).is_err());
    }

    #[test]
    fn dwell_membership() {
        let set = SignalSetSpec::DwellTime {
            d_min: 0.1,
            d_max: 1.0,
            modes: vec![1, 2],
        };
        let ok = sig(&[0.5, 1.2], &[1, 2, 1], 2.0);
        assert!(validate_membership(&ok, &set).member);
        let bad = sig(&[0.5, 1.7], &[1, 2, 1], 2.5);
        let m = validate_membership(&bad, &set);
        assert!(!m.member);
        assert!(m.reason.contains("[0.5, 1.7]"), "{}", m.reason);
    }

    #[test]
    fn concat_closure_membership_of_two_constants() {
        let s1 = SwitchingSignal::constant(1, 5.0);
        let s2 = SwitchingSignal::constant(2, 5.0);
        let fam = SignalSetSpec::FiniteFamily {
            signals: vec![s1.clone(), s2.clone()],
        };
        let closure = SignalSetSpec::ConcatClosure {
            base: Box::new(fam.clone()),
            k: 2,
        };
        let c = concatenate(&[s1.clone(), s2.clone()], &[2.0]).unwrap();
        let m = validate_membership(&c, &closure);
        assert!(m.member);
        assert_eq!(m.pieces, Some(2));
        assert!(!validate_membership(&c, &fam).member);
        let three = concatenate(&[s1.clone(), s2, s1], &[1.0, 2.0]).unwrap();
        assert!(!validate_membership(&three, &closure).member);
    }

    #[test]
    fn sampler_examples() {
        let set = SignalSetSpec::DwellTime {
            d_min: 0.1,
            d_max: 1.0,
            modes: vec![1, 2],
        };
        let s = sample_signal_set(&set, 10.0, 1).unwrap();
        assert!(validate_membership(&s, &set).member);
        assert!(s.switch_times().len() >= 10);
        assert_eq!(s, sample_signal_set(&set, 10.0, 1).unwrap());

        let only = SwitchingSignal::constant(1, 3.0);
        let fam = SignalSetSpec::FiniteFamily {
            signals: vec![only.clone()],
        };
        assert_eq!(sample_signal_set(&fam, 3.0, 9).unwrap(), only);

        let single = SignalSetSpec::DwellTime {
            d_min: 0.5,
            d_max: 1.0,
            modes: vec![1],
        };
        assert!(matches!(sample_signal_set(&single, 10.0, 0), Err(Error::Unsatisfiable(_))));
        assert!(sample_signal_set(&set, 0.0, 0).is_err());
    }

    #[test]
    fn energy_examples() {
        let id = MonotoneFn::identity();
        let one = InputSignal::piecewise_constant(vec![], vec![vec![1.0]]).unwrap();
        assert_eq!(energy_norm(&one, &id, 0.0, 3.0, TOL_QUAD).unwrap(), 3.0);
        assert_eq!(energy_norm(&InputSignal::zero(1), &id, 0.0, 3.0, TOL_QUAD).unwrap(), 0.0);

        let decay = InputSignal::scalar_preset(InputPreset::ExpDecay { amplitude: 1.0, rate: 1.0 });
        let est = energy_norm_infinite(&decay, &id, 0.0, 30.0, TOL_QUAD).unwrap();
        assert!((est.truncated + est.tail_bound - 1.0).abs() < 1e-8);
        assert!((est.tail_bound - (-30.0f64).exp()).abs() < 1e-20);
        assert!(est.is_finite(TOL_ENERGY_TAIL));
        let est1 = energy_norm_infinite(&one, &id, 0.0, 30.0, TOL_QUAD).unwrap();
        assert!(!est1.is_finite(TOL_ENERGY_TAIL));
        assert!(energy_norm(&one, &id, 2.0, 1.0, TOL_QUAD).is_err());
    }

    #[test]
    fn pulse_energy_is_exact() {
        let sq = MonotoneFn::sample(|s| s * s, &[0.0, 1.0, 2.0, 3.0]).unwrap();
        let p = InputSignal::scalar_preset(InputPreset::Pulse {
            amplitude: 2.0,
            start: 1.0,
            end: 2.5,
        });
        assert_eq!(energy_norm(&p, &sq, 0.0, 4.0, TOL_QUAD).unwrap(), 4.0 * 1.5);
        let est = energy_norm_infinite(&p, &sq, 0.0, 2.0, TOL_QUAD).unwrap();
        assert_eq!(est.truncated, 4.0);
        assert_eq!(est.tail_bound, 2.0);
    }

    #[test]
    fn json_shape() {
        let s = sig(&[1.0], &[1, 2], 3.0);
        let v: serde_json::Value = serde_json::to_value(&s).unwrap();
        assert_eq!(v["switch_times"][0], 1.0);
        assert_eq!(v["modes"][1], 2);
        assert_eq!(v["horizon"], 3.0);
    }
}
