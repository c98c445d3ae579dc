//! Comparison functions: piecewise-linear class-K / K∞ gains and grid-based
//! class-KL envelopes.
//!
//! A [`MonotoneFn`] is stored as knots `0 = s₀ < s₁ < … < sₙ` with values
//! `0 = v₀ < v₁ < … < vₙ` and a positive slope used for linear extrapolation
//! past `sₙ`. The representation is closed under inversion, composition and
//! pointwise maximum, and all three are exact on the piecewise-linear class
//! (composition and maximum insert the extra knots they need).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative slack used to repair flat runs into strictly increasing ones.
pub const STRICT_SLACK_REL: f64 = 1e-12;

/// Number of positive knots on the default log-spaced grid.
pub const DEFAULT_GRID_KNOTS: usize = 32;
pub const DEFAULT_GRID_MIN: f64 = 1e-6;
pub const DEFAULT_GRID_MAX: f64 = 1e3;

#[inline]
pub fn strict_slack(v: f64) -> f64 {
    STRICT_SLACK_REL * (1.0 + v.abs())
}

/// Class tag carried by a [`MonotoneFn`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GainClass {
    #[serde(rename = "K")]
    K,
    #[serde(rename = "Kinf")]
    KInf,
}

/// Which side of the data a fitted envelope lies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvelopeMode {
    UpperMajorant,
    LowerMinorant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMonotoneFn", into = "RawMonotoneFn")]
pub struct MonotoneFn {
    class: GainClass,
    knots: Vec<f64>,
    values: Vec<f64>,
    tail_slope: f64,
}

#[derive(Serialize, Deserialize)]
struct RawMonotoneFn {
    class: GainClass,
    knots: Vec<f64>,
    values: Vec<f64>,
    tail_slope: f64,
}

impl TryFrom<RawMonotoneFn> for MonotoneFn {
    type Error = Error;
    fn try_from(raw: RawMonotoneFn) -> Result<Self> {
        MonotoneFn::new(raw.knots, raw.values, raw.tail_slope, raw.class)
    }
}

impl From<MonotoneFn> for RawMonotoneFn {
    fn from(f: MonotoneFn) -> Self {
        RawMonotoneFn {
            class: f.class,
            knots: f.knots,
            values: f.values,
            tail_slope: f.tail_slope,
        }
    }
}

/// The default knot set: the origin followed by [`DEFAULT_GRID_KNOTS`]
/// log-spaced points over `[DEFAULT_GRID_MIN, DEFAULT_GRID_MAX]`.
pub fn default_grid() -> Vec<f64> {
    log_grid(DEFAULT_GRID_MIN, DEFAULT_GRID_MAX, DEFAULT_GRID_KNOTS)
}

/// `0` followed by `count` log-spaced points in `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let mut grid = Vec::with_capacity(count + 1);
    grid.push(0.0);
    if count == 1 {
        grid.push(hi);
        return grid;
    }
    let (a, b) = (lo.ln(), hi.ln());
    for k in 0..count {
        let w = k as f64 / (count - 1) as f64;
        grid.push((a + w * (b - a)).exp());
    }
    grid
}

fn validate_grid(knots: &[f64], what: &str) -> Result<()> {
    if knots.len() < 2 {
        return Err(Error::Invariant(format!("{what}: need at least two knots")));
    }
    if knots[0] != 0.0 {
        return Err(Error::Invariant(format!("{what}: first knot must be 0")));
    }
    for w in knots.windows(2) {
        if !(w[1] > w[0]) || !w[1].is_finite() {
            return Err(Error::Invariant(format!(
                "{what}: knots must be finite and strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
    }
    Ok(())
}

/// Make `values` strictly increasing by lifting flat or decreasing entries
/// by a cumulative relative slack. `values[0]` is left untouched.
pub fn repair_strict_upward(values: &mut [f64]) {
    for i in 1..values.len() {
        let floor = values[i - 1] + strict_slack(values[i - 1]);
        if values[i] < floor && values[i] <= values[i - 1] {
            values[i] = floor;
        }
    }
}

// Lowers entries so the sequence is strictly increasing, never going below
// zero; falls back to lifting where the data pins a positive knot at zero.
fn repair_strict_downward(values: &mut [f64]) {
    let n = values.len();
    for i in (1..n.saturating_sub(1)).rev() {
        if values[i] >= values[i + 1] {
            values[i] = values[i + 1] - strict_slack(values[i + 1]);
        }
    }
    for v in values.iter_mut().skip(1) {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    repair_strict_upward(values);
}

#[inline]
fn interp(x0: f64, y0: f64, x1: f64, y1: f64, x: f64) -> f64 {
    y0 + (y1 - y0) * ((x - x0) / (x1 - x0))
}

impl MonotoneFn {
    pub fn new(knots: Vec<f64>, values: Vec<f64>, tail_slope: f64, class: GainClass) -> Result<Self> {
        validate_grid(&knots, "MonotoneFn")?;
        if values.len() != knots.len() {
            return Err(Error::Invariant(format!(
                "MonotoneFn: {} knots but {} values",
                knots.len(),
                values.len()
            )));
        }
        if values[0] != 0.0 {
            return Err(Error::Invariant("MonotoneFn: value at 0 must be 0".into()));
        }
        for w in values.windows(2) {
            if !(w[1] > w[0]) || !w[1].is_finite() {
                return Err(Error::Invariant(format!(
                    "MonotoneFn: values must be finite and strictly increasing ({} then {})",
                    w[0], w[1]
                )));
            }
        }
        if !(tail_slope > 0.0) || !tail_slope.is_finite() {
            return Err(Error::Invariant(format!(
                "MonotoneFn: tail slope must be positive, got {tail_slope}"
            )));
        }
        Ok(Self {
            class,
            knots,
            values,
            tail_slope,
        })
    }

    /// Builds from possibly non-strict values, repairing flat runs first.
    pub fn new_repaired(knots: Vec<f64>, mut values: Vec<f64>, tail_slope: f64, class: GainClass) -> Result<Self> {
        if let Some(v) = values.first_mut() {
            *v = 0.0;
        }
        repair_strict_upward(&mut values);
        Self::new(knots, values, tail_slope, class)
    }

    pub fn identity() -> Self {
        Self::linear(1.0).expect("unit slope is valid")
    }

    /// `s ↦ c·s` for `c > 0`.
    pub fn linear(c: f64) -> Result<Self> {
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::Invariant(format!("linear gain needs c > 0, got {c}")));
        }
        Self::new(vec![0.0, 1.0], vec![0.0, c], c, GainClass::KInf)
    }

    /// Samples `f` on `knots` (which must start at 0). The tail continues
    /// with the slope of the last segment.
    pub fn sample<F: Fn(f64) -> f64>(f: F, knots: &[f64]) -> Result<Self> {
        validate_grid(knots, "sample")?;
        let mut values: Vec<f64> = knots.iter().map(|&s| f(s)).collect();
        values[0] = 0.0;
        repair_strict_upward(&mut values);
        let n = knots.len();
        let slope = (values[n - 1] - values[n - 2]) / (knots[n - 1] - knots[n - 2]);
        Self::new(knots.to_vec(), values, slope.max(f64::MIN_POSITIVE), GainClass::KInf)
    }

    pub fn sample_default_grid<F: Fn(f64) -> f64>(f: F) -> Result<Self> {
        Self::sample(f, &default_grid())
    }

    pub fn class(&self) -> GainClass {
        self.class
    }
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn tail_slope(&self) -> f64 {
        self.tail_slope
    }

    /// Evaluates the function, rejecting negative or NaN arguments.
    pub fn eval(&self, s: f64) -> Result<f64> {
        if !(s >= 0.0) {
            return Err(Error::Domain(format!("comparison function evaluated at {s}")));
        }
        Ok(self.at(s))
    }

    /// Unchecked evaluation; negative arguments are treated as 0.
    #[inline]
    pub fn at(&self, s: f64) -> f64 {
        if !(s > 0.0) {
            return 0.0;
        }
        lookup(&self.knots, &self.values, self.tail_slope, s)
    }

    /// Evaluates the inverse function at `y ≥ 0` without building it.
    pub fn inverse_at(&self, y: f64) -> f64 {
        if !(y > 0.0) {
            return 0.0;
        }
        lookup(&self.values, &self.knots, 1.0 / self.tail_slope, y)
    }

    /// Largest slope over all segments and the tail; `f(s) ≤ max_slope·s`.
    pub fn max_slope(&self) -> f64 {
        self.knots
            .windows(2)
            .zip(self.values.windows(2))
            .map(|(k, v)| (v[1] - v[0]) / (k[1] - k[0]))
            .fold(self.tail_slope, f64::max)
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::Invariant(format!("scale factor must be positive, got {c}")));
        }
        Self::new(
            self.knots.clone(),
            self.values.iter().map(|v| v * c).collect(),
            self.tail_slope * c,
            self.class,
        )
    }

    /// The inverse function, obtained by swapping knots and values.
    pub fn inverse(&self) -> Result<Self> {
        Self::new(
            self.values.clone(),
            self.knots.clone(),
            1.0 / self.tail_slope,
            self.class,
        )
    }

    /// `outer ∘ inner`. The knot set is the inner knots plus the preimages of
    /// the outer knots, so the result is exact everywhere.
    pub fn compose(outer: &MonotoneFn, inner: &MonotoneFn) -> Result<Self> {
        let mut knots: Vec<f64> = inner.knots.clone();
        knots.extend(outer.knots.iter().skip(1).map(|&k| inner.inverse_at(k)));
        knots.sort_by(|a, b| a.total_cmp(b));
        knots.dedup();
        let mut values: Vec<f64> = knots.iter().map(|&s| outer.at(inner.at(s))).collect();
        values[0] = 0.0;
        repair_strict_upward(&mut values);
        let class = match (outer.class, inner.class) {
            (GainClass::KInf, GainClass::KInf) => GainClass::KInf,
            _ => GainClass::K,
        };
        Self::new(knots, values, outer.tail_slope * inner.tail_slope, class)
    }

    /// `s ↦ max{f(s), g(s)}`, with every crossing of `f` and `g` inserted as
    /// a knot.
    pub fn pointwise_max(f: &MonotoneFn, g: &MonotoneFn) -> Result<Self> {
        let mut base: Vec<f64> = f.knots.iter().chain(g.knots.iter()).copied().collect();
        base.sort_by(|a, b| a.total_cmp(b));
        base.dedup();

        let mut knots = Vec::with_capacity(base.len() * 2);
        knots.push(0.0);
        for w in base.windows(2) {
            let (a, b) = (w[0], w[1]);
            let da = f.at(a) - g.at(a);
            let db = f.at(b) - g.at(b);
            if da * db < 0.0 {
                let s = a + (b - a) * (da / (da - db));
                if s > a && s < b {
                    knots.push(s);
                }
            }
            knots.push(b);
        }

        // Crossing in the linear tails.
        let last = *knots.last().expect("non-empty");
        let d = f.at(last) - g.at(last);
        let (sf, sg) = (f.tail_slope, g.tail_slope);
        let tail_slope = if d > 0.0 && sg > sf {
            knots.push(last + d / (sg - sf));
            sg
        } else if d < 0.0 && sf > sg {
            knots.push(last - d / (sf - sg));
            sf
        } else if d == 0.0 {
            sf.max(sg)
        } else if d > 0.0 {
            sf
        } else {
            sg
        };

        let mut values: Vec<f64> = knots.iter().map(|&s| f.at(s).max(g.at(s))).collect();
        values[0] = 0.0;
        repair_strict_upward(&mut values);
        let class = if f.class == GainClass::KInf || g.class == GainClass::KInf {
            GainClass::KInf
        } else {
            GainClass::K
        };
        Self::new(knots, values, tail_slope, class)
    }

    /// Evaluates on `count` points spread over `[0, s_max]`.
    pub fn sampled_curve(&self, s_max: f64, count: usize) -> Vec<(f64, f64)> {
        (0..count)
            .map(|k| {
                let s = s_max * k as f64 / (count.max(2) - 1) as f64;
                (s, self.at(s))
            })
            .collect()
    }
}

#[inline]
fn lookup(xs: &[f64], ys: &[f64], tail: f64, x: f64) -> f64 {
    let n = xs.len();
    let idx = xs.partition_point(|&k| k <= x);
    if idx >= n {
        return ys[n - 1] + tail * (x - xs[n - 1]);
    }
    let i = idx - 1;
    if xs[i] == x {
        return ys[i];
    }
    interp(xs[i], ys[i], xs[i + 1], ys[i + 1], x)
}

/// Fits the minimal nondecreasing majorant (or maximal nondecreasing
/// minorant) through `points`, forced to 0 at the origin and repaired to be
/// strictly increasing.
pub fn fit_k_envelope(points: &[(f64, f64)], mode: EnvelopeMode) -> Result<MonotoneFn> {
    if points.is_empty() {
        return Err(Error::Empty("fit_k_envelope needs at least one point"));
    }
    for &(s, y) in points {
        if !(s >= 0.0 && y >= 0.0) || !s.is_finite() || !y.is_finite() {
            return Err(Error::Domain(format!("envelope point ({s}, {y}) must be finite and nonnegative")));
        }
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Merge duplicate abscissae.
    let mut merged: Vec<(f64, f64)> = Vec::with_capacity(pts.len());
    for (s, y) in pts {
        match merged.last_mut() {
            Some(last) if last.0 == s => {
                last.1 = match mode {
                    EnvelopeMode::UpperMajorant => last.1.max(y),
                    EnvelopeMode::LowerMinorant => last.1.min(y),
                }
            }
            _ => merged.push((s, y)),
        }
    }
    if merged[0].0 == 0.0 {
        if mode == EnvelopeMode::UpperMajorant && merged[0].1 > 0.0 {
            return Err(Error::Domain(format!(
                "no class-K majorant dominates ({}, {}) at the origin",
                0.0, merged[0].1
            )));
        }
        merged[0].1 = 0.0;
    } else {
        merged.insert(0, (0.0, 0.0));
    }
    if merged.len() == 1 {
        // Only the origin: nothing to fit, return the smallest strict function.
        merged.push((1.0, 0.0));
    }

    let knots: Vec<f64> = merged.iter().map(|p| p.0).collect();
    let mut values: Vec<f64> = merged.iter().map(|p| p.1).collect();
    match mode {
        EnvelopeMode::UpperMajorant => {
            let mut run = 0.0f64;
            for v in values.iter_mut() {
                run = run.max(*v);
                *v = run;
            }
            repair_strict_upward(&mut values);
        }
        EnvelopeMode::LowerMinorant => {
            let mut run = f64::INFINITY;
            for v in values.iter_mut().skip(1).rev() {
                run = run.min(*v);
                *v = run;
            }
            values[0] = 0.0;
            repair_strict_downward(&mut values);
        }
    }

    let n = knots.len();
    let secant = values[n - 1] / knots[n - 1];
    let last_seg = (values[n - 1] - values[n - 2]) / (knots[n - 1] - knots[n - 2]);
    let tail = match mode {
        EnvelopeMode::UpperMajorant => secant.max(last_seg),
        EnvelopeMode::LowerMinorant => secant.min(last_seg),
    }
    .max(STRICT_SLACK_REL);
    MonotoneFn::new(knots, values, tail, GainClass::KInf)
}

/// Grid envelope `β(r, t)`: class K in `r`, nonincreasing in `t`, with an
/// exponential decay past the last time knot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawKLFn", into = "RawKLFn")]
pub struct KLFn {
    r_knots: Vec<f64>,
    t_knots: Vec<f64>,
    /// `values[i][j] = β(r_knots[i], t_knots[j])`.
    values: Vec<Vec<f64>>,
    r_tail_slope: f64,
    t_decay_rate: f64,
}

#[derive(Serialize, Deserialize)]
struct RawKLFn {
    r_knots: Vec<f64>,
    t_knots: Vec<f64>,
    values: Vec<Vec<f64>>,
    r_tail_slope: f64,
    t_decay_rate: f64,
}

impl TryFrom<RawKLFn> for KLFn {
    type Error = Error;
    fn try_from(raw: RawKLFn) -> Result<Self> {
        KLFn::new(raw.r_knots, raw.t_knots, raw.values, raw.r_tail_slope, raw.t_decay_rate)
    }
}

impl From<KLFn> for RawKLFn {
    fn from(b: KLFn) -> Self {
        RawKLFn {
            r_knots: b.r_knots,
            t_knots: b.t_knots,
            values: b.values,
            r_tail_slope: b.r_tail_slope,
            t_decay_rate: b.t_decay_rate,
        }
    }
}

/// Knot limits for [`fit_kl_envelope`].
#[derive(Debug, Clone, Copy)]
pub struct KlFitOptions {
    pub max_r_knots: usize,
    pub max_t_knots: usize,
}

impl Default for KlFitOptions {
    fn default() -> Self {
        Self {
            max_r_knots: 48,
            max_t_knots: 160,
        }
    }
}

impl KLFn {
    pub fn new(
        r_knots: Vec<f64>,
        t_knots: Vec<f64>,
        values: Vec<Vec<f64>>,
        r_tail_slope: f64,
        t_decay_rate: f64,
    ) -> Result<Self> {
        validate_grid(&r_knots, "KLFn r grid")?;
        validate_grid(&t_knots, "KLFn t grid")?;
        if values.len() != r_knots.len() || values.iter().any(|row| row.len() != t_knots.len()) {
            return Err(Error::Invariant("KLFn: value matrix shape does not match grids".into()));
        }
        if values[0].iter().any(|&v| v != 0.0) {
            return Err(Error::Invariant("KLFn: β(0, t) must be 0".into()));
        }
        for j in 0..t_knots.len() {
            for i in 1..r_knots.len() {
                if !(values[i][j] > values[i - 1][j]) || !values[i][j].is_finite() {
                    return Err(Error::Invariant(format!(
                        "KLFn: β(·, t_{j}) not strictly increasing at r index {i}"
                    )));
                }
            }
        }
        for row in &values {
            for w in row.windows(2) {
                if w[1] > w[0] {
                    return Err(Error::Invariant("KLFn: β(r, ·) must be nonincreasing".into()));
                }
            }
        }
        if !(r_tail_slope > 0.0) || !(t_decay_rate > 0.0) || !r_tail_slope.is_finite() || !t_decay_rate.is_finite() {
            return Err(Error::Invariant("KLFn: tail parameters must be positive".into()));
        }
        Ok(Self {
            r_knots,
            t_knots,
            values,
            r_tail_slope,
            t_decay_rate,
        })
    }

    /// Samples an analytic `β` on the given grids.
    pub fn sample<F: Fn(f64, f64) -> f64>(beta: F, r_knots: &[f64], t_knots: &[f64], t_decay_rate: f64) -> Result<Self> {
        validate_grid(r_knots, "KLFn r grid")?;
        validate_grid(t_knots, "KLFn t grid")?;
        let mut values: Vec<Vec<f64>> = r_knots
            .iter()
            .map(|&r| t_knots.iter().map(|&t| if r == 0.0 { 0.0 } else { beta(r, t) }).collect())
            .collect();
        repair_columns(&mut values);
        let n = r_knots.len();
        let slope = (values[n - 1][0] - values[n - 2][0]) / (r_knots[n - 1] - r_knots[n - 2]);
        Self::new(r_knots.to_vec(), t_knots.to_vec(), values, slope.max(STRICT_SLACK_REL), t_decay_rate)
    }

    pub fn r_knots(&self) -> &[f64] {
        &self.r_knots
    }
    pub fn t_knots(&self) -> &[f64] {
        &self.t_knots
    }
    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }
    pub fn t_decay_rate(&self) -> f64 {
        self.t_decay_rate
    }
    pub fn r_tail_slope(&self) -> f64 {
        self.r_tail_slope
    }

    pub fn eval(&self, r: f64, t: f64) -> Result<f64> {
        if !(r >= 0.0) || !(t >= 0.0) {
            return Err(Error::Domain(format!("KL function evaluated at ({r}, {t})")));
        }
        Ok(self.at(r, t))
    }

    /// Unchecked evaluation; negative arguments are clamped to 0.
    pub fn at(&self, r: f64, t: f64) -> f64 {
        let r = r.max(0.0);
        let t = t.max(0.0);
        let t_last = *self.t_knots.last().expect("grid");
        let (t_in, decay) = if t > t_last {
            (t_last, (-self.t_decay_rate * (t - t_last)).exp())
        } else {
            (t, 1.0)
        };
        let r_last = *self.r_knots.last().expect("grid");
        let v = if r > r_last {
            let edge = self.bilinear(r_last, t_in);
            let at_zero = self.values[self.r_knots.len() - 1][0];
            edge + self.r_tail_slope * (r - r_last) * (edge / at_zero)
        } else {
            self.bilinear(r, t_in)
        };
        v * decay
    }

    fn bilinear(&self, r: f64, t: f64) -> f64 {
        let (i, wr) = bracket(&self.r_knots, r);
        let (j, wt) = bracket(&self.t_knots, t);
        let v00 = self.values[i][j];
        let v01 = self.values[i][j + 1];
        let v10 = self.values[i + 1][j];
        let v11 = self.values[i + 1][j + 1];
        let lo = v00 + (v01 - v00) * wt;
        let hi = v10 + (v11 - v10) * wt;
        lo + (hi - lo) * wr
    }

    /// Multiplies every value by `c > 0`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c > 0.0) {
            return Err(Error::Invariant(format!("scale factor must be positive, got {c}")));
        }
        Self::new(
            self.r_knots.clone(),
            self.t_knots.clone(),
            self.values.iter().map(|row| row.iter().map(|v| v * c).collect()).collect(),
            self.r_tail_slope * c,
            self.t_decay_rate,
        )
    }
}

// Index of the interval containing x (clamped) and the fractional position.
#[inline]
fn bracket(knots: &[f64], x: f64) -> (usize, f64) {
    let n = knots.len();
    let idx = knots.partition_point(|&k| k <= x);
    let i = idx.saturating_sub(1).min(n - 2);
    let w = ((x - knots[i]) / (knots[i + 1] - knots[i])).clamp(0.0, 1.0);
    (i, w)
}

fn repair_columns(values: &mut [Vec<f64>]) {
    let cols = values[0].len();
    for j in 0..cols {
        let mut col: Vec<f64> = values.iter().map(|row| row[j]).collect();
        col[0] = 0.0;
        repair_strict_upward(&mut col);
        for (row, v) in values.iter_mut().zip(col) {
            row[j] = v;
        }
    }
}

// Picks at most `max` values from sorted distinct `xs`, always keeping the
// first and last.
fn decimate(xs: &[f64], max: usize) -> Vec<f64> {
    if xs.len() <= max {
        return xs.to_vec();
    }
    let mut out: Vec<f64> = (0..max)
        .map(|k| xs[((k as f64 / (max - 1) as f64) * (xs.len() - 1) as f64).round() as usize])
        .collect();
    out.dedup();
    out
}

fn distinct_sorted(mut xs: Vec<f64>) -> Vec<f64> {
    xs.sort_by(|a, b| a.total_cmp(b));
    xs.dedup();
    xs
}

/// Fits a grid KL envelope dominating every `(r, t, y)` sample.
///
/// Grid value `(i, j)` is the largest `y` with `r ≤ r_{i+1}` and
/// `t ≥ t_{j-1}`; with this one-knot shift all four corners of the cell
/// containing a sample dominate it, so bilinear interpolation does too.
pub fn fit_kl_envelope(samples: &[(f64, f64, f64)], opts: KlFitOptions) -> Result<KLFn> {
    if samples.is_empty() {
        return Err(Error::Empty("fit_kl_envelope needs at least one sample"));
    }
    for &(r, t, y) in samples {
        if !(r >= 0.0 && t >= 0.0 && y >= 0.0) || !(r.is_finite() && t.is_finite() && y.is_finite()) {
            return Err(Error::Domain(format!("KL sample ({r}, {t}, {y}) must be finite and nonnegative")));
        }
        if r == 0.0 && y > 0.0 {
            return Err(Error::Domain(format!("no KL function dominates y={y} at r=0")));
        }
    }

    let positive_r = distinct_sorted(samples.iter().map(|s| s.0).filter(|&r| r > 0.0).collect());
    let mut r_knots = vec![0.0];
    if positive_r.is_empty() {
        r_knots.push(1.0);
    } else {
        r_knots.extend(decimate(&positive_r, opts.max_r_knots.max(2) - 1));
    }
    let positive_t = distinct_sorted(samples.iter().map(|s| s.1).filter(|&t| t > 0.0).collect());
    let mut t_knots = vec![0.0];
    if positive_t.is_empty() {
        t_knots.push(1.0);
    } else {
        t_knots.extend(decimate(&positive_t, opts.max_t_knots.max(2) - 1));
    }
    let (nr, nt) = (r_knots.len(), t_knots.len());

    // cell[c][f]: max y over samples whose r-ceiling index is c and t-floor index is f.
    let mut cell = vec![vec![0.0f64; nt]; nr];
    for &(r, t, y) in samples {
        let c = r_knots.partition_point(|&k| k < r).min(nr - 1);
        let f = t_knots.partition_point(|&k| k <= t).saturating_sub(1);
        if y > cell[c][f] {
            cell[c][f] = y;
        }
    }
    // Prefix max over c, suffix max over f.
    for c in 1..nr {
        for f in 0..nt {
            cell[c][f] = cell[c][f].max(cell[c - 1][f]);
        }
    }
    for row in cell.iter_mut() {
        for f in (0..nt - 1).rev() {
            row[f] = row[f].max(row[f + 1]);
        }
    }
    let mut values = vec![vec![0.0f64; nt]; nr];
    for i in 1..nr {
        let c = (i + 1).min(nr - 1);
        for j in 0..nt {
            let f = j.saturating_sub(1);
            values[i][j] = cell[c][f];
        }
    }
    repair_columns(&mut values);

    let top = &values[nr - 1];
    let (v0, vl) = (top[0], top[nt - 1]);
    let t_last = t_knots[nt - 1];
    let decay = if vl > 0.0 && v0 > vl {
        ((v0 / vl).ln() / t_last).max(1e-6)
    } else {
        1e-6
    };
    let r_slope = (v0 / r_knots[nr - 1]).max(STRICT_SLACK_REL);
    KLFn::new(r_knots, t_knots, values, r_slope, decay)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_on(knots: &[f64]) -> MonotoneFn {
        let values: Vec<f64> = knots.iter().map(|s| s * s).collect();
        let n = knots.len();
        let slope = (values[n - 1] - values[n - 2]) / (knots[n - 1] - knots[n - 2]);
        MonotoneFn::new(knots.to_vec(), values, slope, GainClass::KInf).unwrap()
    }

    #[test]
    fn eval_examples() {
        assert_eq!(MonotoneFn::identity().eval(2.0).unwrap(), 2.0);
        let sq = square_on(&[0.0, 1.0, 2.0, 4.0]);
        assert_eq!(sq.eval(2.0).unwrap(), 4.0);
        // Hand interpolation between (2, 4) and (4, 16).
        assert_eq!(sq.eval(3.0).unwrap(), 10.0);
        assert_eq!(sq.eval(0.0).unwrap(), 0.0);
        assert!(matches!(sq.eval(-1.0), Err(Error::Domain(_))));
        // Tail slope 6 past s = 4.
        assert_eq!(sq.eval(5.0).unwrap(), 22.0);
    }

    #[test]
    fn rejects_invalid_functions() {
        assert!(MonotoneFn::new(vec![0.0, 1.0, 2.0], vec![0.0, 1.0, 1.0], 1.0, GainClass::K).is_err());
        assert!(MonotoneFn::new(vec![0.0, 1.0], vec![0.5, 1.0], 1.0, GainClass::K).is_err());
        assert!(MonotoneFn::new(vec![0.0, 1.0], vec![0.0, 1.0], 0.0, GainClass::KInf).is_err());
        assert!(MonotoneFn::new(vec![0.0, 2.0, 1.0], vec![0.0, 1.0, 2.0], 1.0, GainClass::K).is_err());
    }

    #[test]
    fn inverse_examples() {
        let two = MonotoneFn::linear(2.0).unwrap();
        assert_eq!(two.inverse().unwrap().eval(4.0).unwrap(), 2.0);
        let id = MonotoneFn::identity();
        assert_eq!(id.inverse().unwrap(), id);

        let knots = [0.0, 0.5, 1.0, 1.5, 2.0];
        let cube = MonotoneFn::sample(|s| s * s * s, &knots).unwrap();
        let inv = cube.inverse().unwrap();
        for &k in &knots {
            assert!((inv.at(cube.at(k)) - k).abs() <= 1e-9);
        }
        // Off-knot round trip is exact for a piecewise-linear function.
        let s = 1.7;
        assert!((inv.at(cube.at(s)) - s).abs() <= 1e-12);
        // Against the true cube root the error is interpolation error only.
        let cbrt_err = (inv.at(1.7f64.powi(3)) - 1.7).abs();
        assert!(cbrt_err < 0.1, "{cbrt_err}");
    }

    #[test]
    fn compose_examples() {
        let f = square_on(&[0.0, 1.0, 2.0, 4.0]);
        assert_eq!(MonotoneFn::compose(&MonotoneFn::identity(), &f).unwrap().values(), f.values());
        let six = MonotoneFn::compose(&MonotoneFn::linear(2.0).unwrap(), &MonotoneFn::linear(3.0).unwrap()).unwrap();
        for s in [0.0, 0.3, 1.0, 7.5, 100.0] {
            assert!((six.at(s) - 6.0 * s).abs() < 1e-12);
        }
    }

    #[test]
    fn compose_matches_pointwise_oracle() {
        use rand::{Rng, SeedableRng};
        let outer = MonotoneFn::sample(|s| s * s, &log_grid(1e-3, 50.0, 20)).unwrap();
        let inner = MonotoneFn::sample(|s| s + 0.5 * s.sqrt(), &log_grid(1e-3, 40.0, 15)).unwrap();
        let c = MonotoneFn::compose(&outer, &inner).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let s: f64 = rng.gen_range(0.0..60.0);
            let oracle = outer.at(inner.at(s));
            assert!((c.at(s) - oracle).abs() <= 1e-9 * (1.0 + oracle), "s={s}");
        }
    }

    #[test]
    fn max_examples() {
        let id = MonotoneFn::identity();
        let m = MonotoneFn::pointwise_max(&id, &id).unwrap();
        for s in [0.0, 0.5, 3.0] {
            assert_eq!(m.at(s), s);
        }
        let sq = square_on(&[0.0, 0.25, 0.5, 2.0, 3.0]);
        let m = MonotoneFn::pointwise_max(&sq, &id).unwrap();
        assert_eq!(m.at(2.0), 4.0);
        assert_eq!(m.at(0.5), 0.5);
        // The piecewise-linear square crosses the identity where s² = s.
        assert!(m.knots().iter().any(|&k| (k - 1.0).abs() < 1e-12), "{:?}", m.knots());
    }

    #[test]
    fn max_inserts_tail_crossing() {
        let steep_late = MonotoneFn::new(vec![0.0, 1.0], vec![0.0, 0.5], 3.0, GainClass::KInf).unwrap();
        let id = MonotoneFn::identity();
        let m = MonotoneFn::pointwise_max(&steep_late, &id).unwrap();
        for s in [0.5, 1.0, 1.25, 1.3, 2.0, 10.0] {
            let want = steep_late.at(s).max(id.at(s));
            assert!((m.at(s) - want).abs() < 1e-12, "s={s}");
        }
    }

    #[test]
    fn upper_envelope_examples() {
        let f = fit_k_envelope(&[(0.0, 0.0), (1.0, 2.0), (2.0, 1.0)], EnvelopeMode::UpperMajorant).unwrap();
        assert_eq!(f.knots(), &[0.0, 1.0, 2.0]);
        assert_eq!(f.values()[..2], [0.0, 2.0]);
        assert_eq!(f.values()[2], 2.0 + strict_slack(2.0));

        let single = fit_k_envelope(&[(3.0, 5.0)], EnvelopeMode::UpperMajorant).unwrap();
        assert_eq!(single.knots(), &[0.0, 3.0]);
        assert_eq!(single.values(), &[0.0, 5.0]);

        let mono = fit_k_envelope(&[(1.0, 1.0), (2.0, 3.0), (4.0, 3.0)], EnvelopeMode::UpperMajorant).unwrap();
        assert_eq!(mono.values()[..3], [0.0, 1.0, 3.0]);
        assert!(mono.values()[3] > 3.0 && mono.values()[3] - 3.0 < 1e-10);

        assert!(matches!(fit_k_envelope(&[], EnvelopeMode::UpperMajorant), Err(Error::Empty(_))));
        assert!(fit_k_envelope(&[(0.0, 1.0)], EnvelopeMode::UpperMajorant).is_err());
    }

    #[test]
    fn lower_envelope_stays_below() {
        let pts = [(1.0, 3.0), (2.0, 1.0), (3.0, 4.0), (4.0, 4.0)];
        let f = fit_k_envelope(&pts, EnvelopeMode::LowerMinorant).unwrap();
        for &(s, y) in &pts {
            assert!(f.at(s) <= y + 1e-12, "{s}: {} > {y}", f.at(s));
        }
        assert!(f.at(1.0) < f.at(2.0));
    }

    #[test]
    fn kl_examples() {
        let r_knots = log_grid(1e-3, 10.0, 40);
        let t_knots: Vec<f64> = (0..=400).map(|k| k as f64 * 0.025).collect();
        let beta = KLFn::sample(|r, t| r * (-t).exp(), &r_knots, &t_knots, 1.0).unwrap();
        assert_eq!(beta.eval(0.0, 3.0).unwrap(), 0.0);
        assert!(beta.eval(2.0, 0.0).unwrap() >= beta.eval(2.0, 0.7).unwrap());
        let v = beta.eval(2.0, std::f64::consts::LN_2).unwrap();
        assert!((v - 1.0).abs() < 1e-3, "{v}");
        assert!(beta.eval(-1.0, 0.0).is_err());
        // Exponential tail past the grid.
        let far = beta.eval(2.0, 15.0).unwrap();
        assert!((far - 2.0 * (-15.0f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn kl_fit_dominates_samples() {
        let mut samples = Vec::new();
        for i in 1..=12 {
            let r = 0.1 * i as f64;
            for k in 0..200 {
                let t = k as f64 * 0.05;
                samples.push((r, t, r * (-t).exp()));
            }
        }
        let beta = fit_kl_envelope(&samples, KlFitOptions::default()).unwrap();
        for &(r, t, y) in &samples {
            assert!(beta.at(r, t) >= y, "({r},{t})");
        }
        for i in 1..=12 {
            let r = 0.1 * i as f64;
            assert!(beta.at(r, 0.0) >= r);
        }

        let one = fit_kl_envelope(&[(1.0, 0.0, 1.0)], KlFitOptions::default()).unwrap();
        assert!(one.at(1.0, 0.0) >= 1.0);

        let zero = fit_kl_envelope(&[(1.0, 0.5, 0.0), (2.0, 1.0, 0.0)], KlFitOptions::default()).unwrap();
        assert!(zero.at(2.0, 0.0) > 0.0 && zero.at(2.0, 0.0) < 1e-10);
        assert!(fit_kl_envelope(&[], KlFitOptions::default()).is_err());
    }

    #[test]
    fn json_round_trip_validates() {
        let f = MonotoneFn::sample_default_grid(|s| s.powf(1.5)).unwrap();
        let text = serde_json::to_string(&f).unwrap();
        assert!(text.contains("\"class\":\"Kinf\""));
        let back: MonotoneFn = serde_json::from_str(&text).unwrap();
        assert_eq!(back, f);
        let bad = r#"{"class":"K","knots":[0,1],"values":[0,0],"tail_slope":1}"#;
        assert!(serde_json::from_str::<MonotoneFn>(bad).is_err());
    }
}
