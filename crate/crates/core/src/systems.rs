//! Switched system models `ẋ = f(t, x, u, σ)`, `y = h(t, x, u, σ)`, the
//! built-in example systems, and sampled estimators for the growth and
//! Lipschitz bounds the stability results rely on.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::comparison::{fit_k_envelope, EnvelopeMode, MonotoneFn};
use crate::error::{Error, Result};
use crate::signals::Mode;

pub type DynamicsFn = dyn Fn(f64, &[f64], &[f64], Mode, &mut [f64]) + Send + Sync;
pub type OutputFn = dyn Fn(f64, &[f64], &[f64], Mode, &mut [f64]) + Send + Sync;

/// Inflation applied to sampled Lipschitz constants.
pub const LIPSCHITZ_SAFETY: f64 = 1.1;

/// A nondecreasing, piecewise-linear table `r ↦ N(r)`; unlike a class-K
/// function it may be positive (or infinite) at the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NondecreasingTable {
    pub radii: Vec<f64>,
    pub values: Vec<f64>,
    pub tail_slope: f64,
}

impl NondecreasingTable {
    pub fn new(radii: Vec<f64>, values: Vec<f64>, tail_slope: f64) -> Result<Self> {
        if radii.is_empty() || radii.len() != values.len() {
            return Err(Error::Invariant("table needs matching, non-empty radii and values".into()));
        }
        if radii.windows(2).any(|w| !(w[1] > w[0])) || values.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Invariant("table must have increasing radii and nondecreasing values".into()));
        }
        if !(tail_slope >= 0.0) {
            return Err(Error::Invariant("table tail slope must be nonnegative".into()));
        }
        Ok(Self {
            radii,
            values,
            tail_slope,
        })
    }

    pub fn constant(v: f64) -> Self {
        Self {
            radii: vec![0.0],
            values: vec![v],
            tail_slope: 0.0,
        }
    }

    pub fn at(&self, r: f64) -> f64 {
        let n = self.radii.len();
        let idx = self.radii.partition_point(|&k| k <= r);
        if idx == 0 {
            return self.values[0];
        }
        if idx >= n {
            let last = self.values[n - 1];
            return if last.is_infinite() {
                last
            } else {
                last + self.tail_slope * (r - self.radii[n - 1])
            };
        }
        let i = idx - 1;
        let (v0, v1) = (self.values[i], self.values[i + 1]);
        if v1.is_infinite() {
            return if r == self.radii[i] { v0 } else { v1 };
        }
        v0 + (v1 - v0) * (r - self.radii[i]) / (self.radii[i + 1] - self.radii[i])
    }
}

/// Bounds a system declares about itself.
#[derive(Debug, Clone, Default)]
pub struct DeclaredBounds {
    /// `N` in `|f(t,ξ,μ,i)| ≤ N(|ξ|)(1 + γ(|μ|))`.
    pub n: Option<NondecreasingTable>,
    pub gamma: Option<MonotoneFn>,
    /// Lipschitz constant of `f(t, ·, 0, i)` on the ball of radius `r`.
    pub lipschitz: Option<NondecreasingTable>,
}

/// Per-mode linear part `Aᵢ x + Bᵢ u` (for the inverter, the part without
/// the load).
#[derive(Debug, Clone)]
pub struct LinearModes {
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
}

/// Load time profiles of the inverter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LoadProfile {
    /// `aᵢ(t) = a_min + (a_max − a_min)(1 + sin(t + i))/2`, `rᵢ` analogous.
    Sinusoidal,
    Constant { a: f64, r: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InverterParams {
    pub l1: f64,
    pub l2: f64,
    pub c1: f64,
    pub c2: f64,
    pub a_min: f64,
    pub a_max: f64,
    pub r_min: f64,
    pub r_max: f64,
    pub load: LoadProfile,
}

impl Default for InverterParams {
    fn default() -> Self {
        Self {
            l1: 1.0,
            l2: 1.0,
            c1: 1.0,
            c2: 1.0,
            a_min: 0.5,
            a_max: 2.0,
            r_min: 0.5,
            r_max: 1.5,
            load: LoadProfile::Sinusoidal,
        }
    }
}

impl InverterParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.l1, self.l2, self.c1, self.c2, self.a_min, self.a_max, self.r_min, self.r_max];
        if all.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Config("inverter parameters must be positive and finite".into()));
        }
        if self.a_min > self.a_max || self.r_min > self.r_max {
            return Err(Error::Config("inverter load bounds must satisfy min <= max".into()));
        }
        if let LoadProfile::Constant { a, r } = self.load {
            if !(self.a_min..=self.a_max).contains(&a) || !(self.r_min..=self.r_max).contains(&r) {
                return Err(Error::Config(format!("constant load ({a}, {r}) outside its bounds")));
            }
        }
        Ok(())
    }

    pub fn amplitude(&self, t: f64, mode: Mode) -> f64 {
        match self.load {
            LoadProfile::Sinusoidal => self.a_min + (self.a_max - self.a_min) * (1.0 + (t + mode as f64).sin()) / 2.0,
            LoadProfile::Constant { a, .. } => a,
        }
    }

    pub fn resistance(&self, t: f64, mode: Mode) -> f64 {
        match self.load {
            LoadProfile::Sinusoidal => self.r_min + (self.r_max - self.r_min) * (1.0 + (t + mode as f64).sin()) / 2.0,
            LoadProfile::Constant { r, .. } => r,
        }
    }

    /// `g̃ᵢ(t, v) = aᵢ(t) sat(v / rᵢ(t))`.
    pub fn load_current(&self, t: f64, v: f64, mode: Mode) -> f64 {
        self.amplitude(t, mode) * sat(v / self.resistance(t, mode))
    }

    /// `P = diag(L1, L2, C1, C2)`.
    pub fn p_diag(&self) -> [f64; 4] {
        [self.l1, self.l2, self.c1, self.c2]
    }

    /// Smallest eigenvalue of `P/2`.
    pub fn lambda_min(&self) -> f64 {
        self.p_diag().iter().copied().fold(f64::INFINITY, f64::min) / 2.0
    }

    pub fn lambda_max(&self) -> f64 {
        self.p_diag().iter().copied().fold(0.0, f64::max) / 2.0
    }

    /// `κ = 1/√λ_min`, the supply slope of `√V` is `κ/2`.
    pub fn kappa(&self) -> f64 {
        1.0 / self.lambda_min().sqrt()
    }

    /// `ηᵢ(t, ξ) = C₂ (e₄'ξ) aᵢ(t) sat(e₄'ξ / rᵢ(t))`, the dissipated power.
    pub fn dissipation(&self, t: f64, x: &[f64], mode: Mode) -> f64 {
        self.c2 * x[3] * self.load_current(t, x[3], mode)
    }
}

/// Unit saturation.
#[inline]
pub fn sat(v: f64) -> f64 {
    v.clamp(-1.0, 1.0)
}

/// Which built-in model a system came from.
#[derive(Debug, Clone)]
pub enum SystemKind {
    Linear,
    Inverter(InverterParams),
    Custom,
}

/// A switched system with state, input and output dimensions `n`, `m`, `p`.
#[derive(Clone)]
pub struct SwitchedSystem {
    name: String,
    state_dim: usize,
    input_dim: usize,
    output_dim: usize,
    modes: Vec<Mode>,
    dynamics: Arc<DynamicsFn>,
    output: Option<Arc<OutputFn>>,
    bounds: DeclaredBounds,
    linear: Option<LinearModes>,
    kind: SystemKind,
}

impl fmt::Debug for SwitchedSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SwitchedSystem")
            .field("name", &self.name)
            .field("n", &self.state_dim)
            .field("m", &self.input_dim)
            .field("p", &self.output_dim)
            .field("modes", &self.modes)
            .finish()
    }
}

impl SwitchedSystem {
    /// A general system. The output defaults to the full state.
    pub fn new(
        name: impl Into<String>,
        state_dim: usize,
        input_dim: usize,
        modes: Vec<Mode>,
        dynamics: Arc<DynamicsFn>,
    ) -> Result<Self> {
        if state_dim == 0 || modes.is_empty() {
            return Err(Error::Dimension("system needs n >= 1 and at least one mode".into()));
        }
        Ok(Self {
            name: name.into(),
            state_dim,
            input_dim,
            output_dim: state_dim,
            modes,
            dynamics,
            output: None,
            bounds: DeclaredBounds::default(),
            linear: None,
            kind: SystemKind::Custom,
        })
    }

    pub fn with_output(mut self, output_dim: usize, output: Arc<OutputFn>) -> Self {
        self.output_dim = output_dim;
        self.output = Some(output);
        self
    }

    pub fn with_bounds(mut self, bounds: DeclaredBounds) -> Self {
        self.bounds = bounds;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn state_dim(&self) -> usize {
        self.state_dim
    }
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }
    pub fn output_dim(&self) -> usize {
        self.output_dim
    }
    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }
    pub fn bounds(&self) -> &DeclaredBounds {
        &self.bounds
    }
    pub fn linear(&self) -> Option<&LinearModes> {
        self.linear.as_ref()
    }
    pub fn kind(&self) -> &SystemKind {
        &self.kind
    }

    pub fn mode_position(&self, mode: Mode) -> Option<usize> {
        self.modes.iter().position(|&m| m == mode)
    }

    #[inline]
    pub fn eval_into(&self, t: f64, x: &[f64], u: &[f64], mode: Mode, out: &mut [f64]) {
        (self.dynamics)(t, x, u, mode, out)
    }

    pub fn eval(&self, t: f64, x: &[f64], u: &[f64], mode: Mode) -> Vec<f64> {
        let mut out = vec![0.0; self.state_dim];
        self.eval_into(t, x, u, mode, &mut out);
        out
    }

    pub fn output_into(&self, t: f64, x: &[f64], u: &[f64], mode: Mode, out: &mut [f64]) {
        match &self.output {
            Some(h) => h(t, x, u, mode, out),
            None => out.copy_from_slice(x),
        }
    }

    pub fn output(&self, t: f64, x: &[f64], u: &[f64], mode: Mode) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim];
        self.output_into(t, x, u, mode, &mut out);
        out
    }
}

/// Induced 2-norm (largest singular value).
pub fn operator_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

/// `f(t, ξ, μ, i) = Aᵢ ξ + Bᵢ μ` with modes labelled `1..=k`.
pub fn make_switched_linear(a: Vec<DMatrix<f64>>, b: Vec<DMatrix<f64>>) -> Result<SwitchedSystem> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::Dimension(format!("{} state matrices but {} input matrices", a.len(), b.len())));
    }
    let n = a[0].nrows();
    let m = b[0].ncols();
    for (i, (ai, bi)) in a.iter().zip(&b).enumerate() {
        if ai.nrows() != n || ai.ncols() != n {
            return Err(Error::Dimension(format!("A{} is {}x{}, expected {n}x{n}", i + 1, ai.nrows(), ai.ncols())));
        }
        if bi.nrows() != n || bi.ncols() != m {
            return Err(Error::Dimension(format!("B{} is {}x{}, expected {n}x{m}", i + 1, bi.nrows(), bi.ncols())));
        }
    }
    let a_norm = a.iter().map(operator_norm).fold(0.0, f64::max);
    let b_norm = b.iter().map(operator_norm).fold(0.0, f64::max);
    let modes: Vec<Mode> = (1..=a.len()).collect();
    let (ac, bc) = (a.clone(), b.clone());
    let dynamics: Arc<DynamicsFn> = Arc::new(move |_t, x, u, mode, out| {
        let (ai, bi) = (&ac[mode - 1], &bc[mode - 1]);
        for r in 0..n {
            let mut acc = 0.0;
            for c in 0..n {
                acc += ai[(r, c)] * x[c];
            }
            for c in 0..m {
                acc += bi[(r, c)] * u[c];
            }
            out[r] = acc;
        }
    });
    let gamma_slope = if b_norm > 0.0 { b_norm } else { 1.0 };
    // |Aξ + Bμ| ≤ ‖A‖|ξ| + ‖B‖|μ| ≤ max{1, ‖A‖|ξ|}(1 + ‖B‖|μ|).
    let n_table = if a_norm > 0.0 {
        NondecreasingTable::new(vec![0.0, 1.0 / a_norm], vec![1.0, 1.0], a_norm)?
    } else {
        NondecreasingTable::constant(1.0)
    };
    let bounds = DeclaredBounds {
        n: Some(n_table),
        gamma: Some(MonotoneFn::linear(gamma_slope)?),
        lipschitz: Some(NondecreasingTable::constant(a_norm)),
    };
    let mut sys = SwitchedSystem::new("custom_linear", n, m, modes, dynamics)?.with_bounds(bounds);
    sys.linear = Some(LinearModes { a, b });
    sys.kind = SystemKind::Linear;
    Ok(sys)
}

/// The Hurwitz pair `A₁ = [[-1, -100], [10, -1]]`, `A₂ = A₁'`, `b₁ = b₂ = e₁`.
pub fn prop4_pair() -> SwitchedSystem {
    let a1 = DMatrix::from_row_slice(2, 2, &[-1.0, -100.0, 10.0, -1.0]);
    let a2 = a1.transpose();
    let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
    let mut sys = make_switched_linear(vec![a1, a2], vec![b.clone(), b]).expect("consistent dimensions");
    sys.name = "prop4_pair".into();
    sys
}

/// Inverter mode matrices `(Ã₁, Ã₂)` and input vectors `(b₁, b₂)`.
pub fn inverter_matrices(p: &InverterParams) -> ([DMatrix<f64>; 2], [DMatrix<f64>; 2]) {
    #[rustfmt::skip]
    let m1 = DMatrix::from_row_slice(4, 4, &[
        0.0, 0.0, 0.0, 0.0,
        0.0, 0.0, 1.0, 1.0,
        0.0, -1.0, 0.0, 0.0,
        0.0, -1.0, 0.0, 0.0,
    ]);
    #[rustfmt::skip]
    let m2 = DMatrix::from_row_slice(4, 4, &[
        0.0, 0.0, -1.0, 0.0,
        0.0, 0.0, 0.0, 1.0,
        1.0, 0.0, 0.0, 0.0,
        0.0, -1.0, 0.0, 0.0,
    ]);
    let d = p.p_diag();
    let p_inv = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(4, d.iter().map(|v| 1.0 / v)));
    let e1 = DMatrix::from_row_slice(4, 1, &[1.0, 0.0, 0.0, 0.0]);
    let e2 = DMatrix::from_row_slice(4, 1, &[0.0, 1.0, 0.0, 0.0]);
    (
        [&p_inv * m1, &p_inv * m2],
        [&p_inv * e1, &p_inv * e2],
    )
}

/// Ideal switched model of the semi-quasi-Z-source inverter with a
/// saturating time-varying resistive load:
/// `ẋ = Ãσ x − e₄ g̃σ(t, e₄'x) + bσ u`.
pub fn make_inverter(params: InverterParams) -> Result<SwitchedSystem> {
    params.validate()?;
    let (a, b) = inverter_matrices(&params);
    let a_norm = a.iter().map(operator_norm).fold(0.0, f64::max);
    let b_norm = b.iter().map(operator_norm).fold(0.0, f64::max);
    let a_flat: Vec<[f64; 16]> = a
        .iter()
        .map(|m| {
            let mut out = [0.0; 16];
            for r in 0..4 {
                for c in 0..4 {
                    out[r * 4 + c] = m[(r, c)];
                }
            }
            out
        })
        .collect();
    let b_flat: Vec<[f64; 4]> = b.iter().map(|v| [v[0], v[1], v[2], v[3]]).collect();
    let dynamics: Arc<DynamicsFn> = Arc::new(move |t, x, u, mode, out| {
        let (ai, bi) = (&a_flat[mode - 1], &b_flat[mode - 1]);
        for r in 0..4 {
            out[r] = ai[r * 4] * x[0] + ai[r * 4 + 1] * x[1] + ai[r * 4 + 2] * x[2] + ai[r * 4 + 3] * x[3] + bi[r] * u[0];
        }
        out[3] -= params.load_current(t, x[3], mode);
    });
    // N(|ξ|) = max‖Ãᵢ‖|ξ| + a_max + max{1, ‖bᵢ‖} with γ(s) = s.
    let n0 = params.a_max + b_norm.max(1.0);
    let bounds = DeclaredBounds {
        n: Some(NondecreasingTable::new(vec![0.0], vec![n0], a_norm)?),
        gamma: Some(MonotoneFn::identity()),
        lipschitz: Some(NondecreasingTable::constant(a_norm + params.a_max / params.r_min)),
    };
    let mut sys = SwitchedSystem::new("inverter", 4, 1, vec![1, 2], dynamics)?.with_bounds(bounds);
    sys.linear = Some(LinearModes {
        a: a.to_vec(),
        b: b.to_vec(),
    });
    sys.kind = SystemKind::Inverter(params);
    Ok(sys)
}

/// The inverter with scalar output `y = e₄'x` (the load voltage).
pub fn make_inverter_voltage_output(params: InverterParams) -> Result<SwitchedSystem> {
    Ok(make_inverter(params)?.with_output(1, Arc::new(|_t, x, _u, _i, out| out[0] = x[3])))
}

/// Sampling controls shared by the bound estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorOptions {
    /// Samples per radius (or per estimate).
    pub budget: usize,
    pub seed: u64,
    /// Times are drawn log-uniformly from `[1e-3, t_horizon]`.
    pub t_horizon: f64,
    /// Largest input magnitude tried by [`estimate_kappa`].
    pub mu_max: f64,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            budget: 2000,
            seed: 0,
            t_horizon: 20.0,
            mu_max: 1e3,
        }
    }
}

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Point drawn uniformly from the closed ball of radius `r` in `ℝᵈ`.
pub fn sample_ball<R: Rng>(rng: &mut R, dim: usize, r: f64) -> Vec<f64> {
    if dim == 0 {
        return Vec::new();
    }
    let mut v = unit_vector(rng, dim);
    let rad = r * rng.gen::<f64>().powf(1.0 / dim as f64);
    v.iter_mut().for_each(|c| *c *= rad);
    v
}

pub fn unit_vector<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|c| c / n).collect();
        }
    }
}

fn sample_time<R: Rng>(rng: &mut R, t_horizon: f64) -> f64 {
    let lo: f64 = 1e-3;
    let hi = t_horizon.max(lo * 10.0);
    (lo.ln() + rng.gen::<f64>() * (hi.ln() - lo.ln())).exp()
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Sampled growth bounds: `γ̃(r) = sup |f|` over `|ξ|, |μ| ≤ r`, its class-K
/// majorant `γ`, and `N = max{1, γ}`. These are lower estimates of the true
/// suprema.
#[derive(Debug, Clone, Serialize)]
pub struct C1Estimate {
    pub gamma: MonotoneFn,
    pub n_table: NondecreasingTable,
    /// `(r, sampled sup |f|)` per radius, made nondecreasing.
    pub gamma_tilde: Vec<(f64, f64)>,
    pub samples: usize,
    pub seed: u64,
    /// Smallest radius at which `f` returned a non-finite value.
    pub unbounded_from: Option<f64>,
}

struct C1Sample {
    s: f64,
    f_norm: f64,
}

/// Estimates the growth bound `|f(t,ξ,μ,i)| ≤ N(|ξ|)(1 + γ(|μ|))` by sampling.
pub fn estimate_c1_bounds(sys: &SwitchedSystem, radii: &[f64], opts: EstimatorOptions) -> Result<C1Estimate> {
    if opts.budget == 0 {
        return Err(Error::Precondition("sample budget must be positive".into()));
    }
    if radii.is_empty() || radii.iter().any(|&r| !(r > 0.0)) {
        return Err(Error::Precondition("radius grid must be non-empty and positive".into()));
    }
    let mut radii = radii.to_vec();
    radii.sort_by(|a, b| a.total_cmp(b));
    let per_radius: Vec<(Vec<C1Sample>, bool)> = radii
        .par_iter()
        .enumerate()
        .map(|(k, &r)| {
            let mut rng = rng_for(opts.seed, k as u64);
            let mut out = Vec::with_capacity(opts.budget);
            let mut blew_up = false;
            let mut f = vec![0.0; sys.state_dim];
            for _ in 0..opts.budget {
                let t = sample_time(&mut rng, opts.t_horizon);
                let mode = sys.modes[rng.gen_range(0..sys.modes.len())];
                let xi = sample_ball(&mut rng, sys.state_dim, r);
                let mu = sample_ball(&mut rng, sys.input_dim, r);
                sys.eval_into(t, &xi, &mu, mode, &mut f);
                let fnorm = norm(&f);
                if !fnorm.is_finite() {
                    blew_up = true;
                    continue;
                }
                out.push(C1Sample {
                    s: norm(&xi).max(norm(&mu)),
                    f_norm: fnorm,
                });
            }
            (out, blew_up)
        })
        .collect();

    let unbounded_from = radii
        .iter()
        .zip(&per_radius)
        .find(|(_, (_, b))| *b)
        .map(|(r, _)| *r);
    let mut gamma_tilde = Vec::with_capacity(radii.len());
    let mut run = 0.0f64;
    for (r, (samples, _)) in radii.iter().zip(&per_radius) {
        run = samples.iter().map(|s| s.f_norm).fold(run, f64::max);
        gamma_tilde.push((*r, run));
    }
    let points: Vec<(f64, f64)> = per_radius
        .iter()
        .flat_map(|(s, _)| s.iter().map(|c| (c.s, c.f_norm)))
        .collect();
    let samples = points.len();
    let gamma = fit_k_envelope(&points, EnvelopeMode::UpperMajorant)?;
    let mut n_radii = gamma.knots().to_vec();
    let mut n_values: Vec<f64> = gamma.values().iter().map(|v| v.max(1.0)).collect();
    if let Some(r0) = unbounded_from {
        let keep = n_radii.partition_point(|&k| k < r0);
        n_radii.truncate(keep);
        n_values.truncate(keep);
        n_radii.push(r0);
        n_values.push(f64::INFINITY);
    }
    let n_table = NondecreasingTable::new(n_radii, n_values, gamma.tail_slope())?;
    Ok(C1Estimate {
        gamma,
        n_table,
        gamma_tilde,
        samples,
        seed: opts.seed,
        unbounded_from,
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LipschitzEstimate {
    /// Sampled constant times [`LIPSCHITZ_SAFETY`].
    pub value: f64,
    pub sampled: f64,
    pub radius: f64,
    pub samples: usize,
    pub seed: u64,
}

/// Sampled Lipschitz constant of `f(t, ·, 0, i)` on the closed ball of
/// radius `r`, inflated by [`LIPSCHITZ_SAFETY`].
pub fn estimate_lipschitz(sys: &SwitchedSystem, r: f64, opts: EstimatorOptions) -> Result<LipschitzEstimate> {
    if !(r > 0.0) {
        return Err(Error::Precondition(format!("radius must be positive, got {r}")));
    }
    let n = sys.state_dim;
    let zero_u = vec![0.0; sys.input_dim];
    let chunks = 8usize;
    let per = opts.budget.div_ceil(chunks);
    let sampled = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng_for(opts.seed, c as u64);
            let (mut f1, mut f2) = (vec![0.0; n], vec![0.0; n]);
            let mut best = 0.0f64;
            for k in 0..per {
                let t = sample_time(&mut rng, opts.t_horizon);
                let mode = sys.modes[rng.gen_range(0..sys.modes.len())];
                let xi = sample_ball(&mut rng, n, r);
                let xj = if k % 2 == 0 {
                    sample_ball(&mut rng, n, r)
                } else {
                    // Nearby pair, pulled back into the ball.
                    let d = unit_vector(&mut rng, n);
                    let mut p: Vec<f64> = xi.iter().zip(&d).map(|(a, b)| a + 1e-4 * r * b).collect();
                    let pn = norm(&p);
                    if pn > r {
                        p.iter_mut().for_each(|c| *c *= r / pn);
                    }
                    p
                };
                let dx: f64 = norm(&xi.iter().zip(&xj).map(|(a, b)| a - b).collect::<Vec<_>>());
                if dx < 1e-14 {
                    continue;
                }
                sys.eval_into(t, &xi, &zero_u, mode, &mut f1);
                sys.eval_into(t, &xj, &zero_u, mode, &mut f2);
                let df = norm(&f1.iter().zip(&f2).map(|(a, b)| a - b).collect::<Vec<_>>());
                best = best.max(df / dx);
            }
            best
        })
        .reduce(|| 0.0, f64::max);
    Ok(LipschitzEstimate {
        value: LIPSCHITZ_SAFETY * sampled,
        sampled,
        radius: r,
        samples: per * chunks,
        seed: opts.seed,
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct KappaEstimate {
    /// Smallest `κ` with `|f(t,ξ,μ,i) − f(t,ξ,0,i)| ≤ η + κχ(|μ|)` on all samples.
    pub kappa: f64,
    /// Largest `δ < 1` such that every sample with `|μ| < δ` has difference `≤ η`.
    pub delta: f64,
    /// `N(r*)(2/γ(δ) + 1)`.
    pub kappa_formula: f64,
    pub n_at_r_star: f64,
    pub samples: usize,
}

/// Estimates `κ(r*, η)` for the input-perturbation bound used in the
/// Gronwall-type estimate.
pub fn estimate_kappa(
    sys: &SwitchedSystem,
    r_star: f64,
    eta: f64,
    chi: &MonotoneFn,
    gamma: &MonotoneFn,
    n_table: &NondecreasingTable,
    opts: EstimatorOptions,
) -> Result<KappaEstimate> {
    if !(eta > 0.0) || !(r_star > 0.0) {
        return Err(Error::Precondition("estimate_kappa needs eta > 0 and r* > 0".into()));
    }
    let mut probe: Vec<f64> = gamma.knots().to_vec();
    probe.extend(chi.knots().iter().copied());
    for s in probe {
        let (c, g) = (chi.at(s), gamma.at(s));
        if c < g - 1e-12 * (1.0 + g) {
            return Err(Error::Precondition(format!(
                "chi({s}) = {c} is below gamma({s}) = {g}; chi must dominate gamma"
            )));
        }
    }
    let n = sys.state_dim;
    let m = sys.input_dim;
    let mut rng = rng_for(opts.seed, 0);
    let zero_u = vec![0.0; m];
    let (mut f1, mut f0) = (vec![0.0; n], vec![0.0; n]);
    let (lo, hi) = (1e-6f64.ln(), opts.mu_max.max(1e-5).ln());
    let mut kappa = 0.0f64;
    let mut records: Vec<(f64, f64)> = Vec::with_capacity(opts.budget);
    for _ in 0..opts.budget {
        let t = sample_time(&mut rng, opts.t_horizon);
        let mode = sys.modes[rng.gen_range(0..sys.modes.len())];
        let xi = sample_ball(&mut rng, n, r_star);
        let mag = (lo + rng.gen::<f64>() * (hi - lo)).exp();
        let mu: Vec<f64> = unit_vector(&mut rng, m).into_iter().map(|c| c * mag).collect();
        sys.eval_into(t, &xi, &mu, mode, &mut f1);
        sys.eval_into(t, &xi, &zero_u, mode, &mut f0);
        let d = norm(&f1.iter().zip(&f0).map(|(a, b)| a - b).collect::<Vec<_>>());
        kappa = kappa.max((d - eta).max(0.0) / chi.at(mag));
        records.push((mag, d));
    }
    records.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut delta: f64 = 1.0 - 1e-9;
    for &(mag, d) in &records {
        if d > eta {
            delta = delta.min(mag);
            break;
        }
    }
    let n_at_r_star = n_table.at(r_star);
    let kappa_formula = n_at_r_star * (2.0 / gamma.at(delta) + 1.0);
    Ok(KappaEstimate {
        kappa,
        delta,
        kappa_formula,
        n_at_r_star,
        samples: records.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prop4_pair_matches_construction() {
        let sys = prop4_pair();
        let lin = sys.linear().unwrap();
        assert_eq!(lin.a[0][(0, 1)], -100.0);
        assert_eq!(lin.a[1], lin.a[0].transpose());
        assert_eq!(sys.eval(0.3, &[0.0, 0.0], &[0.0], 1), vec![0.0, 0.0]);
        // Both modes Hurwitz: trace < 0, det > 0.
        for a in &lin.a {
            let tr = a[(0, 0)] + a[(1, 1)];
            let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)];
            assert!(tr < 0.0 && det > 0.0);
        }
    }

    #[test]
    fn operator_norm_of_a1() {
        // A₁'A₁ = [[101, 90], [90, 10001]]; largest eigenvalue in closed form.
        let (p, q, r) = (101.0f64, 90.0f64, 10001.0f64);
        let lam = 0.5 * (p + r) + (0.25 * (p - r) * (p - r) + q * q).sqrt();
        let sys = prop4_pair();
        let a1 = &sys.linear().unwrap().a[0];
        assert!((operator_norm(a1) - lam.sqrt()).abs() < 1e-9);
        assert!((lam.sqrt() - 100.01).abs() < 0.01);
        let l = sys.bounds().lipschitz.as_ref().unwrap().at(1.0);
        assert!((l - lam.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let a = DMatrix::<f64>::identity(2, 2);
        let b = DMatrix::<f64>::zeros(3, 1);
        assert!(matches!(make_switched_linear(vec![a], vec![b]), Err(Error::Dimension(_))));
    }

    #[test]
    fn inverter_structure() {
        let params = InverterParams {
            l1: 2.0,
            l2: 0.5,
            c1: 3.0,
            c2: 1.5,
            ..Default::default()
        };
        let (a, b) = inverter_matrices(&params);
        let d = params.p_diag();
        // Ã₁ = P⁻¹·M₁ entrywise.
        assert_eq!(a[0][(1, 2)], 1.0 / d[1]);
        assert_eq!(a[0][(3, 1)], -1.0 / d[3]);
        assert_eq!(a[1][(0, 2)], -1.0 / d[0]);
        assert_eq!(a[1][(2, 0)], 1.0 / d[2]);
        assert_eq!(b[1][(1, 0)], 1.0 / d[1]);
        let p = DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&d));
        for ai in &a {
            let pa = &p * ai;
            assert!((&pa + pa.transpose()).norm() < 1e-15);
        }
        let sys = make_inverter(params).unwrap();
        assert_eq!(sys.eval(1.0, &[0.0; 4], &[0.0], 2), vec![0.0; 4]);
    }

    #[test]
    fn inverter_rejects_bad_params() {
        let bad = InverterParams {
            a_min: 3.0,
            ..Default::default()
        };
        assert!(make_inverter(bad).is_err());
        let neg = InverterParams {
            c1: -1.0,
            ..Default::default()
        };
        assert!(make_inverter(neg).is_err());
    }

    #[test]
    fn radial_c1_bound() {
        let a = DMatrix::from_row_slice(1, 1, &[-1.0]);
        let b = DMatrix::from_row_slice(1, 1, &[0.0]);
        let sys = make_switched_linear(vec![a], vec![b]).unwrap();
        let est = estimate_c1_bounds(&sys, &[0.5, 1.0, 2.0], EstimatorOptions::default()).unwrap();
        for &(r, g) in &est.gamma_tilde {
            assert!(g <= r + 1e-12 && g > 0.95 * r, "r={r} g={g}");
        }
    }

    #[test]
    fn c1_estimate_is_deterministic() {
        let sys = prop4_pair();
        let opts = EstimatorOptions {
            budget: 300,
            seed: 4,
            ..Default::default()
        };
        let a = estimate_c1_bounds(&sys, &[0.5, 1.0], opts).unwrap();
        let b = estimate_c1_bounds(&sys, &[0.5, 1.0], opts).unwrap();
        assert_eq!(a.gamma, b.gamma);
        assert!(estimate_c1_bounds(&sys, &[1.0], EstimatorOptions { budget: 0, ..opts }).is_err());
    }

    #[test]
    fn c1_blow_up_is_reported() {
        let dynamics: Arc<DynamicsFn> = Arc::new(|_t, x, _u, _i, out| {
            out[0] = if x[0].abs() > 1.5 { f64::INFINITY } else { -x[0] };
        });
        let sys = SwitchedSystem::new("blowup", 1, 1, vec![1], dynamics).unwrap();
        let est = estimate_c1_bounds(&sys, &[1.0, 2.0, 3.0], EstimatorOptions::default()).unwrap();
        assert_eq!(est.unbounded_from, Some(2.0));
        assert!(est.n_table.at(2.5).is_infinite());
        assert!(est.n_table.at(1.0).is_finite());
    }

    #[test]
    fn lipschitz_of_negative_identity() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let sys = make_switched_linear(vec![a], vec![b]).unwrap();
        let est = estimate_lipschitz(&sys, 1.0, EstimatorOptions::default()).unwrap();
        assert!((est.value - 1.1).abs() < 1e-9, "{}", est.value);
    }

    #[test]
    fn kappa_rejects_small_chi() {
        let sys = prop4_pair();
        let gamma = MonotoneFn::linear(2.0).unwrap();
        let chi = MonotoneFn::identity();
        let n = NondecreasingTable::constant(1.0);
        let r = estimate_kappa(&sys, 1.0, 0.1, &chi, &gamma, &n, EstimatorOptions::default());
        assert!(matches!(r, Err(Error::Precondition(_))));
    }

    #[test]
    fn nondecreasing_table_eval() {
        let t = NondecreasingTable::new(vec![0.0, 1.0], vec![1.0, 1.0], 2.0).unwrap();
        assert_eq!(t.at(0.5), 1.0);
        assert_eq!(t.at(3.0), 5.0);
        assert!(NondecreasingTable::new(vec![0.0, 1.0], vec![2.0, 1.0], 0.0).is_err());
    }
}
