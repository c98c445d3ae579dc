//! Switch-aware fixed-step integration.
//!
//! The horizon is cut at every switching instant and input breakpoint; each
//! segment is integrated with classical RK4 on the grid `a + k·h`, with the
//! last step truncated at the segment end. No step straddles a switch.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signals::{InputSignal, Mode, SwitchingSignal};
use crate::systems::{norm, SwitchedSystem};

pub const DEFAULT_H_STEP: f64 = 1e-3;
pub const DEFAULT_BLOW_UP_BOUND: f64 = 1e9;
pub const METHOD_ORDER: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimOptions {
    pub h_step: f64,
    pub blow_up_bound: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            h_step: DEFAULT_H_STEP,
            blow_up_bound: DEFAULT_BLOW_UP_BOUND,
        }
    }
}

/// A computed solution on `[t0, T]` (or up to the blow-up time).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    state_dim: usize,
    input_dim: usize,
    times: Vec<f64>,
    /// Row-major, `state_dim` entries per grid point.
    states: Vec<f64>,
    /// `σ(tₖ)`; for `k < len-1` also the mode used on step `k`.
    modes: Vec<Mode>,
    /// `u(tₖ)`, right-continuous.
    inputs: Vec<f64>,
    /// Per step: `f` at the left and right ends, for Hermite interpolation.
    left_derivs: Vec<f64>,
    right_derivs: Vec<f64>,
    blow_up: Option<f64>,
    h_step: f64,
}

/// Grid of a segment `[a, b]`: `a + k·h` for `k < n` and `b` itself.
pub(crate) fn segment_steps(a: f64, b: f64, h: f64) -> usize {
    (((b - a) / h) - 1e-6).ceil().max(1.0) as usize
}

#[inline]
pub(crate) fn segment_time(a: f64, b: f64, h: f64, k: usize, n: usize) -> f64 {
    if k >= n {
        b
    } else {
        a + k as f64 * h
    }
}

/// Scratch buffers for one RK4 step.
pub(crate) struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
    u: Vec<f64>,
}

impl Rk4 {
    pub(crate) fn new(n: usize, m: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
            u: vec![0.0; m],
        }
    }

    /// Advances `x` from `t` to `t + dt` on a segment `[a, b]` with fixed
    /// mode. `k1` must already hold `f(t, x)`. Returns nothing; `x` is
    /// updated in place.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn step(
        &mut self,
        sys: &SwitchedSystem,
        u: &InputSignal,
        mode: Mode,
        seg: (f64, f64),
        t: f64,
        dt: f64,
        x: &mut [f64],
    ) {
        let n = x.len();
        let half = 0.5 * dt;
        u.eval_on_segment(t + half, seg.0, seg.1, &mut self.u);
        for i in 0..n {
            self.tmp[i] = x[i] + half * self.k1[i];
        }
        sys.eval_into(t + half, &self.tmp, &self.u, mode, &mut self.k2);
        for i in 0..n {
            self.tmp[i] = x[i] + half * self.k2[i];
        }
        sys.eval_into(t + half, &self.tmp, &self.u, mode, &mut self.k3);
        u.eval_on_segment(t + dt, seg.0, seg.1, &mut self.u);
        for i in 0..n {
            self.tmp[i] = x[i] + dt * self.k3[i];
        }
        sys.eval_into(t + dt, &self.tmp, &self.u, mode, &mut self.k4);
        for i in 0..n {
            x[i] += dt / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }

    /// `k1 ← f(t, x)` using the segment's input value.
    pub(crate) fn derivative(&mut self, sys: &SwitchedSystem, u: &InputSignal, mode: Mode, seg: (f64, f64), t: f64, x: &[f64]) {
        u.eval_on_segment(t, seg.0, seg.1, &mut self.u);
        sys.eval_into(t, x, &self.u, mode, &mut self.k1);
    }

    pub(crate) fn k1(&self) -> &[f64] {
        &self.k1
    }
}

/// Breakpoints of `(σ, u)` strictly inside `(t0, t_end)`, sorted.
pub(crate) fn breakpoints(sigma: &SwitchingSignal, u: &InputSignal, t0: f64, t_end: f64, extra: &[f64]) -> Vec<f64> {
    let mut cuts: Vec<f64> = sigma.switches_between(t0, t_end).collect();
    cuts.extend(u.breakpoints(t0, t_end));
    cuts.extend(extra.iter().copied().filter(|&t| t > t0 && t < t_end));
    cuts.sort_by(|a, b| a.total_cmp(b));
    cuts.dedup();
    cuts
}

pub(crate) fn check_inputs(sys: &SwitchedSystem, x0: &[f64], u: &InputSignal, sigma: &SwitchingSignal, t0: f64, t_end: f64) -> Result<()> {
    if !(t_end > t0) || !(t0 >= 0.0) {
        return Err(Error::Domain(format!("simulation needs 0 <= t0 < T, got [{t0}, {t_end}]")));
    }
    if x0.len() != sys.state_dim() {
        return Err(Error::Dimension(format!("x0 has {} entries, system state has {}", x0.len(), sys.state_dim())));
    }
    if u.dim() != sys.input_dim() {
        return Err(Error::Dimension(format!("input has dimension {}, system expects {}", u.dim(), sys.input_dim())));
    }
    if let Some(m) = sigma.modes().iter().find(|&&m| sys.mode_position(m).is_none()) {
        return Err(Error::Dimension(format!("switching signal uses mode {m} unknown to the system")));
    }
    Ok(())
}

/// Integrates `ẋ = f(t, x, u(t), σ(t))` from `(t0, x0)` to `t_end`.
pub fn simulate(
    sys: &SwitchedSystem,
    x0: &[f64],
    t0: f64,
    u: &InputSignal,
    sigma: &SwitchingSignal,
    t_end: f64,
    opts: &SimOptions,
) -> Result<Trajectory> {
    simulate_with_breaks(sys, x0, t0, u, sigma, t_end, opts, &[])
}

/// As [`simulate`], also cutting the grid at `extra` times.
#[allow(clippy::too_many_arguments)]
pub fn simulate_with_breaks(
    sys: &SwitchedSystem,
    x0: &[f64],
    t0: f64,
    u: &InputSignal,
    sigma: &SwitchingSignal,
    t_end: f64,
    opts: &SimOptions,
    extra: &[f64],
) -> Result<Trajectory> {
    check_inputs(sys, x0, u, sigma, t0, t_end)?;
    if !(opts.h_step > 0.0) {
        return Err(Error::Domain(format!("step size must be positive, got {}", opts.h_step)));
    }
    let n = sys.state_dim();
    let m = sys.input_dim();
    let mut cuts = vec![t0];
    cuts.extend(breakpoints(sigma, u, t0, t_end, extra));
    cuts.push(t_end);

    let est = ((t_end - t0) / opts.h_step) as usize + cuts.len() + 1;
    let mut traj = Trajectory {
        state_dim: n,
        input_dim: m,
        times: Vec::with_capacity(est),
        states: Vec::with_capacity(est * n),
        modes: Vec::with_capacity(est),
        inputs: Vec::with_capacity(est * m),
        left_derivs: Vec::with_capacity(est * n),
        right_derivs: Vec::with_capacity(est * n),
        blow_up: None,
        h_step: opts.h_step,
    };
    let mut x = x0.to_vec();
    traj.push_point(t0, &x, sigma.at(t0), &u.eval(t0));
    let mut rk = Rk4::new(n, m);

    'segments: for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let mode = sigma.at(a);
        let steps = segment_steps(a, b, opts.h_step);
        rk.derivative(sys, u, mode, (a, b), a, &x);
        for k in 0..steps {
            let t = segment_time(a, b, opts.h_step, k, steps);
            let t_next = segment_time(a, b, opts.h_step, k + 1, steps);
            traj.left_derivs.extend_from_slice(rk.k1());
            rk.step(sys, u, mode, (a, b), t, t_next - t, &mut x);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { t: t_next, x, mode });
            }
            rk.derivative(sys, u, mode, (a, b), t_next, &x);
            if rk.k1().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { t: t_next, x, mode });
            }
            traj.right_derivs.extend_from_slice(rk.k1());
            traj.push_point(t_next, &x, sigma.at(t_next), &u.eval(t_next));
            if norm(&x) > opts.blow_up_bound {
                traj.blow_up = Some(t_next);
                break 'segments;
            }
        }
    }
    Ok(traj)
}

impl Trajectory {
    fn push_point(&mut self, t: f64, x: &[f64], mode: Mode, u: &[f64]) {
        self.times.push(t);
        self.states.extend_from_slice(x);
        self.modes.push(mode);
        self.inputs.extend_from_slice(u);
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }
    pub fn len(&self) -> usize {
        self.times.len()
    }
    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
    pub fn times(&self) -> &[f64] {
        &self.times
    }
    pub fn t0(&self) -> f64 {
        self.times[0]
    }
    pub fn t_end(&self) -> f64 {
        *self.times.last().expect("non-empty trajectory")
    }
    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.state_dim..(k + 1) * self.state_dim]
    }
    pub fn input(&self, k: usize) -> &[f64] {
        &self.inputs[k * self.input_dim..(k + 1) * self.input_dim]
    }
    pub fn mode(&self, k: usize) -> Mode {
        self.modes[k]
    }
    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }
    pub fn final_state(&self) -> &[f64] {
        self.state(self.len() - 1)
    }
    pub fn blow_up(&self) -> Option<f64> {
        self.blow_up
    }
    pub fn h_step(&self) -> f64 {
        self.h_step
    }
    pub fn order(&self) -> u32 {
        METHOD_ORDER
    }
    pub fn state_norm(&self, k: usize) -> f64 {
        norm(self.state(k))
    }
    pub fn norms(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.state_norm(k)).collect()
    }
    pub fn max_norm(&self) -> f64 {
        (0..self.len()).map(|k| self.state_norm(k)).fold(0.0, f64::max)
    }

    /// State at time `t`; exact at grid points, cubic Hermite inside steps
    /// (linear if the trajectory was imported without derivatives).
    pub fn dense_eval(&self, t: f64) -> Result<Vec<f64>> {
        let (t0, t1) = (self.t0(), self.t_end());
        if !(t >= t0 && t <= t1) {
            let why = match self.blow_up {
                Some(tb) if t > tb => format!("t={t} is past the blow-up time {tb}"),
                _ => format!("t={t} outside the trajectory domain [{t0}, {t1}]"),
            };
            return Err(Error::Domain(why));
        }
        let idx = self.times.partition_point(|&s| s <= t);
        let k = idx - 1;
        if self.times[k] == t {
            return Ok(self.state(k).to_vec());
        }
        let (ta, tb) = (self.times[k], self.times[k + 1]);
        let h = tb - ta;
        let s = (t - ta) / h;
        let (xa, xb) = (self.state(k), self.state(k + 1));
        let n = self.state_dim;
        if self.left_derivs.len() < (k + 1) * n {
            return Ok(xa.iter().zip(xb).map(|(a, b)| a + s * (b - a)).collect());
        }
        let da = &self.left_derivs[k * n..(k + 1) * n];
        let db = &self.right_derivs[k * n..(k + 1) * n];
        let h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
        let h10 = s * (1.0 - s) * (1.0 - s);
        let h01 = s * s * (3.0 - 2.0 * s);
        let h11 = s * s * (s - 1.0);
        Ok((0..n)
            .map(|i| h00 * xa[i] + h10 * h * da[i] + h01 * xb[i] + h11 * h * db[i])
            .collect())
    }

    /// Writes `t,x1..xn,mode,u1..um` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.state_dim).map(|i| format!("x{i}")));
        header.push("mode".into());
        header.extend((1..=self.input_dim).map(|i| format!("u{i}")));
        wr.write_record(&header)?;
        for k in 0..self.len() {
            let mut row = vec![fmt_f64(self.times[k])];
            row.extend(self.state(k).iter().map(|v| fmt_f64(*v)));
            row.push(self.modes[k].to_string());
            row.extend(self.input(k).iter().map(|v| fmt_f64(*v)));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads the format produced by [`Trajectory::write_csv`].
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let header: Vec<String> = rd.headers()?.iter().map(|s| s.to_string()).collect();
        let mode_col = header
            .iter()
            .position(|h| h == "mode")
            .ok_or_else(|| Error::Io("trajectory CSV lacks a mode column".into()))?;
        if header.first().map(String::as_str) != Some("t") {
            return Err(Error::Io("trajectory CSV must start with a t column".into()));
        }
        let n = mode_col - 1;
        let m = header.len() - mode_col - 1;
        let mut traj = Trajectory {
            state_dim: n,
            input_dim: m,
            times: Vec::new(),
            states: Vec::new(),
            modes: Vec::new(),
            inputs: Vec::new(),
            left_derivs: Vec::new(),
            right_derivs: Vec::new(),
            blow_up: None,
            h_step: 0.0,
        };
        for rec in rd.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(|| Error::Io(format!("bad number in column {i}")))
            };
            let t = num(0)?;
            if let Some(&prev) = traj.times.last() {
                if !(t > prev) {
                    return Err(Error::Io(format!("trajectory times must increase ({t} after {prev})")));
                }
            }
            traj.times.push(t);
            for i in 1..=n {
                traj.states.push(num(i)?);
            }
            let mode = rec
                .get(mode_col)
                .and_then(|s| s.parse::<Mode>().ok())
                .ok_or_else(|| Error::Io("bad mode entry".into()))?;
            traj.modes.push(mode);
            for i in mode_col + 1..mode_col + 1 + m {
                traj.inputs.push(num(i)?);
            }
        }
        if traj.times.is_empty() {
            return Err(Error::Empty("trajectory CSV has no rows"));
        }
        if traj.times.len() > 1 {
            traj.h_step = traj.times[1] - traj.times[0];
        }
        Ok(traj)
    }
}

/// Shortest representation that parses back to the same value.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{make_switched_linear, prop4_pair};
    use nalgebra::DMatrix;

    fn rotation() -> SwitchedSystem {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 0.0]);
        make_switched_linear(vec![a], vec![b]).unwrap()
    }

    #[test]
    fn rotation_quarter_turn() {
        let sys = rotation();
        let t_end = std::f64::consts::FRAC_PI_2;
        let traj = simulate(
            &sys,
            &[1.0, 0.0],
            0.0,
            &InputSignal::zero(1),
            &SwitchingSignal::constant(1, t_end),
            t_end,
            &SimOptions::default(),
        )
        .unwrap();
        let x = traj.final_state();
        assert!(x[0].abs() < 1e-6 && (x[1] - 1.0).abs() < 1e-6, "{x:?}");
        assert_eq!(traj.t_end(), t_end);
    }

    #[test]
    fn origin_stays_put() {
        let sys = prop4_pair();
        let sigma = SwitchingSignal::new(vec![0.3, 0.9], vec![1, 2, 1], 2.0).unwrap();
        let traj = simulate(&sys, &[0.0, 0.0], 0.0, &InputSignal::zero(1), &sigma, 2.0, &SimOptions::default()).unwrap();
        assert!((0..traj.len()).all(|k| traj.state(k) == [0.0, 0.0]));
    }

    #[test]
    fn prop4_mode1_decays_under_scaled_norm() {
        let sys = prop4_pair();
        let traj = simulate(
            &sys,
            &[1.0, 0.0],
            0.0,
            &InputSignal::zero(1),
            &SwitchingSignal::constant(1, 2.0),
            2.0,
            &SimOptions::default(),
        )
        .unwrap();
        let bound = 10f64.sqrt() * (-2.0f64).exp();
        assert!(traj.state_norm(traj.len() - 1) <= bound);
        assert!((bound - 0.428).abs() < 1e-3);
    }

    #[test]
    fn grid_contains_switch_and_input_breaks() {
        let sys = prop4_pair();
        let sigma = SwitchingSignal::new(vec![0.12345], vec![1, 2], 1.0).unwrap();
        let u = InputSignal::piecewise_constant(vec![0.5004], vec![vec![1.0], vec![-1.0]]).unwrap();
        let traj = simulate(&sys, &[1.0, 0.0], 0.0, &u, &sigma, 1.0, &SimOptions::default()).unwrap();
        assert!(traj.times().contains(&0.12345));
        assert!(traj.times().contains(&0.5004));
        for w in traj.times().windows(2) {
            assert!(!(w[0] < 0.12345 && 0.12345 < w[1]));
        }
        let k = traj.times().iter().position(|&t| t == 0.12345).unwrap();
        assert_eq!(traj.mode(k), 2);
        assert_eq!(traj.mode(k - 1), 1);
    }

    #[test]
    fn blow_up_truncates() {
        let a = DMatrix::from_row_slice(1, 1, &[5.0]);
        let b = DMatrix::from_row_slice(1, 1, &[0.0]);
        let sys = make_switched_linear(vec![a], vec![b]).unwrap();
        let opts = SimOptions {
            blow_up_bound: 100.0,
            ..Default::default()
        };
        let traj = simulate(&sys, &[1.0], 0.0, &InputSignal::zero(1), &SwitchingSignal::constant(1, 10.0), 10.0, &opts).unwrap();
        let tb = traj.blow_up().unwrap();
        assert!((tb - 100f64.ln() / 5.0).abs() < 2e-3);
        assert_eq!(traj.t_end(), tb);
        assert!(traj.dense_eval(tb + 0.1).unwrap_err().to_string().contains("blow-up"));
    }

    #[test]
    fn non_finite_dynamics_error() {
        use std::sync::Arc;
        let dynamics: Arc<crate::systems::DynamicsFn> = Arc::new(|t, x, _u, _i, out| {
            out[0] = if t > 0.5 { f64::NAN } else { -x[0] };
        });
        let sys = SwitchedSystem::new("nan", 1, 1, vec![3], dynamics).unwrap();
        let err = simulate(&sys, &[1.0], 0.0, &InputSignal::zero(1), &SwitchingSignal::constant(3, 1.0), 1.0, &SimOptions::default()).unwrap_err();
        match err {
            Error::NonFinite { t, mode, .. } => {
                assert!(t > 0.5 && t < 0.51);
                assert_eq!(mode, 3);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dense_eval_matches_exponential_oracle() {
        // A₁ = −I + M with M² = −1000·I, so e^{A₁t} = e^{−t}(cos ωt·I + sin ωt/ω·M).
        let sys = prop4_pair();
        let traj = simulate(
            &sys,
            &[1.0, 0.0],
            0.0,
            &InputSignal::zero(1),
            &SwitchingSignal::constant(1, 0.5),
            0.5,
            &SimOptions::default(),
        )
        .unwrap();
        let w = 1000f64.sqrt();
        let exact = |t: f64| {
            let (c, s) = ((w * t).cos(), (w * t).sin() / w);
            [(-t).exp() * c, (-t).exp() * 10.0 * s]
        };
        let t = 0.2505;
        let x = traj.dense_eval(t).unwrap();
        let e = exact(t);
        assert!((x[0] - e[0]).abs() < 1e-7 && (x[1] - e[1]).abs() < 1e-7, "{x:?} vs {e:?}");
        let k = 100;
        assert_eq!(traj.dense_eval(traj.times()[k]).unwrap(), traj.state(k));
        assert!(traj.dense_eval(-0.1).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let sys = prop4_pair();
        let sigma = SwitchingSignal::new(vec![0.01], vec![1, 2], 0.02).unwrap();
        let u = InputSignal::piecewise_constant(vec![], vec![vec![0.5]]).unwrap();
        let traj = simulate(&sys, &[1.0, -1.0], 0.0, &u, &sigma, 0.02, &SimOptions::default()).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,x1,x2,mode,u1\n"));
        let back = Trajectory::read_csv(&buf[..]).unwrap();
        assert_eq!(back.times(), traj.times());
        assert_eq!(back.modes(), traj.modes());
        for k in 0..traj.len() {
            assert_eq!(back.state(k), traj.state(k));
        }
    }
}
