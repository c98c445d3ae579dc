//! Scenario configuration, the canonical scenario runs, report bundles and
//! plot-data emission.
//!
//! A [`Config`] is a TOML file with one section per module. Everything a run
//! depends on (seeds included) lives in the config, so identical configs give
//! byte-identical bundles.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::certify::{
    check_beics, check_dissipation, check_gronwall, check_storage_growth, check_storage_nonincreasing, ensemble_from_cases,
    fit_zero_guas_beta, generate_ensemble, pilot_t_conv, iiss_from_guas_and_ubebs, iiss_from_dissipation, Case, CheckOptions, CheckReport,
    DissipationCertificate, Ensemble, EnsembleSpec, GronwallCertificate, IissCertificate, InputFamily, PipelineComponents,
    PipelineEnsembles, PipelineMode, Storage, Witness, DEFAULT_FIT_MARGIN,
};
use crate::comparison::{fit_k_envelope, fit_kl_envelope, EnvelopeMode, KLFn, KlFitOptions, MonotoneFn};
use crate::error::{Error, Result};
use crate::falsify::{
    default_policy_family, find_destabilizing, probe_concat_closure, probe_iss_divergence, unit_sphere_grid,
    DEFAULT_GROWTH_TARGET, DEFAULT_GUARD, DEFAULT_T_MAX,
};
use crate::integrator::{fmt_f64, simulate, SimOptions, Trajectory};
use crate::signals::{sample_signal_set, InputSignal, SignalSetSpec, SwitchingSignal};
use crate::systems::{
    estimate_c1_bounds, estimate_kappa, estimate_lipschitz, make_inverter, make_switched_linear, prop4_pair, EstimatorOptions,
    InverterParams, SwitchedSystem,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const SCENARIOS: [&str; 5] = [
    "prop4_counterexample",
    "inverter_iiss",
    "inverter_beics",
    "inverter_not_iss_probe",
    "gronwall_demo",
];

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemName {
    Prop4Pair,
    Inverter,
    CustomLinear,
}

/// Mode matrices of a custom switched linear system, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomLinear {
    pub a: Vec<Vec<Vec<f64>>>,
    pub b: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemSection {
    pub name: SystemName,
    pub inverter: InverterParams,
    pub custom_linear: Option<CustomLinear>,
}

impl Default for SystemSection {
    fn default() -> Self {
        Self {
            name: SystemName::Inverter,
            inverter: InverterParams::default(),
            custom_linear: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignalsSection {
    pub set: SignalSetSpec,
}

impl Default for SignalsSection {
    fn default() -> Self {
        Self {
            set: SignalSetSpec::DwellTime {
                d_min: 0.1,
                d_max: 1.0,
                modes: vec![1, 2],
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertifySection {
    pub tol: f64,
    pub fit_margin: f64,
    /// Size of every recheck ensemble drawn with fresh seeds.
    pub recheck_count: usize,
    pub beics_eps: f64,
    pub beics_amplitude: f64,
    pub beics_rate: f64,
    pub beics_runs: usize,
    pub beics_horizon: f64,
    pub pilot_runs: usize,
    pub pilot_radius: f64,
    /// Multiplier on the pilot settling time.
    pub t_conv_factor: f64,
    /// Fixed convergence time; when absent it comes from the pilot runs.
    pub t_conv: Option<f64>,
    pub output_pe_eps: f64,
    pub output_pe_window: f64,
    /// Required window energy; `eps² · window` when absent.
    pub output_pe_r: Option<f64>,
    pub gronwall_eta: f64,
    pub gronwall_radius: f64,
    pub gronwall_runs: usize,
    pub gronwall_horizon: f64,
    /// Largest `|x0|` of the Gronwall runs and of the β fit behind them.
    pub gronwall_x0_max: f64,
    pub estimator: EstimatorOptions,
}

impl Default for CertifySection {
    fn default() -> Self {
        Self {
            tol: crate::certify::DEFAULT_TOL,
            fit_margin: DEFAULT_FIT_MARGIN,
            recheck_count: 100,
            beics_eps: 0.05,
            beics_amplitude: 5.0,
            beics_rate: 1.0,
            beics_runs: 50,
            beics_horizon: 150.0,
            pilot_runs: 8,
            pilot_radius: 10.0,
            t_conv_factor: 1.25,
            t_conv: None,
            output_pe_eps: 0.5,
            output_pe_window: 2.0,
            output_pe_r: None,
            gronwall_eta: 0.1,
            gronwall_radius: 15.0,
            gronwall_runs: 20,
            gronwall_horizon: 1.0,
            gronwall_x0_max: 5.0,
            estimator: EstimatorOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FalsifySection {
    pub seed: u64,
    pub growth_target: f64,
    pub t_max: f64,
    /// Initial states on the unit sphere tried by each policy.
    pub x0_count: usize,
    pub guard: f64,
    pub concat_k: usize,
    pub concat_budget: usize,
    /// Runs per certificate-violation search.
    pub budget: usize,
    pub iss_amplitude: f64,
    pub iss_hold: f64,
    pub iss_horizon: f64,
    pub iss_growth_target: f64,
}

impl Default for FalsifySection {
    fn default() -> Self {
        Self {
            seed: 0,
            growth_target: DEFAULT_GROWTH_TARGET,
            t_max: DEFAULT_T_MAX,
            x0_count: 16,
            guard: DEFAULT_GUARD,
            concat_k: 2,
            concat_budget: 200,
            budget: 100,
            iss_amplitude: 5.0,
            iss_hold: 0.1,
            iss_horizon: 100.0,
            iss_growth_target: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Samples per gain curve in plot data.
    pub plot_points: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            plot_points: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub system: SystemSection,
    pub signals: SignalsSection,
    pub integrator: SimOptions,
    pub ensemble: EnsembleSpec,
    pub certify: CertifySection,
    pub falsify: FalsifySection,
    pub output: OutputSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            system: SystemSection::default(),
            signals: SignalsSection::default(),
            integrator: SimOptions::default(),
            ensemble: EnsembleSpec {
                input: InputFamily::PiecewiseConstant {
                    max_norm: 5.0,
                    hold_min: 0.1,
                    hold_max: 1.0,
                },
                ..EnsembleSpec::default()
            },
            certify: CertifySection::default(),
            falsify: FalsifySection::default(),
            output: OutputSection::default(),
        }
    }
}

const CONFIG_HEADER: &str = "\
# switchcert configuration. Every key is optional; shown values are defaults.
# Optional keys without a default:
#   system.custom_linear.a / .b  mode matrices for system.name = \"custom_linear\"
#   certify.t_conv               fixed BEICS convergence time (pilot runs otherwise)
#   certify.output_pe_r          required window energy (eps^2 * window otherwise)
# Scenarios derive their sub-ensemble seeds from ensemble.seed and record them.
";

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// The default config with its header comments.
    pub fn documented_default() -> Result<String> {
        Ok(format!("{CONFIG_HEADER}\n{}", Config::default().to_toml()?))
    }

    /// SHA-256 of the canonical TOML serialization, output directory
    /// excluded so relocated runs hash alike.
    pub fn hash(&self) -> Result<String> {
        let mut canonical = self.clone();
        canonical.output.dir = PathBuf::new();
        let digest = Sha256::digest(canonical.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Sets every seed in the config.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.ensemble.seed = seed;
        self.falsify.seed = seed;
        self.certify.estimator.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.certify;
        let positive = [
            ("certify.tol", c.tol),
            ("certify.fit_margin", c.fit_margin),
            ("certify.beics_eps", c.beics_eps),
            ("certify.beics_horizon", c.beics_horizon),
            ("certify.pilot_radius", c.pilot_radius),
            ("certify.t_conv_factor", c.t_conv_factor),
            ("certify.output_pe_window", c.output_pe_window),
            ("certify.gronwall_eta", c.gronwall_eta),
            ("certify.gronwall_radius", c.gronwall_radius),
            ("certify.gronwall_horizon", c.gronwall_horizon),
            ("certify.gronwall_x0_max", c.gronwall_x0_max),
            ("integrator.h_step", self.integrator.h_step),
            ("integrator.blow_up_bound", self.integrator.blow_up_bound),
            ("falsify.growth_target", self.falsify.growth_target),
            ("falsify.t_max", self.falsify.t_max),
            ("falsify.guard", self.falsify.guard),
            ("falsify.iss_amplitude", self.falsify.iss_amplitude),
            ("falsify.iss_hold", self.falsify.iss_hold),
            ("falsify.iss_horizon", self.falsify.iss_horizon),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        let counts = [
            ("ensemble.count", self.ensemble.count),
            ("certify.recheck_count", c.recheck_count),
            ("certify.beics_runs", c.beics_runs),
            ("certify.pilot_runs", c.pilot_runs),
            ("certify.gronwall_runs", c.gronwall_runs),
            ("falsify.x0_count", self.falsify.x0_count),
            ("falsify.concat_budget", self.falsify.concat_budget),
            ("falsify.budget", self.falsify.budget),
            ("output.plot_points", self.output.plot_points),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if let Some(t) = c.t_conv {
            if !(t >= 0.0) {
                return Err(Error::Config(format!("certify.t_conv must be >= 0, got {t}")));
            }
        }
        if !(c.beics_eps <= 1.0) || !(c.output_pe_eps > 0.0 && c.output_pe_eps <= 1.0) {
            return Err(Error::Config("certify.beics_eps and certify.output_pe_eps must lie in (0, 1]".into()));
        }
        if self.falsify.growth_target <= 1.0 {
            return Err(Error::Config("falsify.growth_target must exceed 1".into()));
        }
        self.signals.set.validate()?;
        self.system.inverter.validate()?;
        if self.system.name == SystemName::CustomLinear && self.system.custom_linear.is_none() {
            return Err(Error::Config("system.name = \"custom_linear\" needs system.custom_linear.a and .b".into()));
        }
        Ok(())
    }

    pub fn check_options(&self) -> CheckOptions {
        CheckOptions { tol: self.certify.tol }
    }

    pub fn build_system(&self) -> Result<SwitchedSystem> {
        match self.system.name {
            SystemName::Prop4Pair => Ok(prop4_pair()),
            SystemName::Inverter => make_inverter(self.system.inverter),
            SystemName::CustomLinear => {
                let custom = self
                    .system
                    .custom_linear
                    .as_ref()
                    .ok_or_else(|| Error::Config("missing system.custom_linear".into()))?;
                let a = custom.a.iter().map(|m| matrix(m, "a")).collect::<Result<Vec<_>>>()?;
                let b = custom.b.iter().map(|m| matrix(m, "b")).collect::<Result<Vec<_>>>()?;
                make_switched_linear(a, b)
            }
        }
    }
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let cols = rows.first().map_or(0, |r| r.len());
    if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Config(format!("custom_linear.{what}: matrices need equal-length, non-empty rows")));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

// ---------------------------------------------------------------------------
// Fitting gains from samples

/// Envelope fitted to CSV samples: class K from columns `s,y`, class KL
/// from columns `r,t,y`.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum FittedGain {
    K(MonotoneFn),
    Kl(KLFn),
}

/// Fits the upper envelope of the samples in a CSV file with a header row.
pub fn fit_samples_csv<R: std::io::Read>(reader: R) -> Result<FittedGain> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let cols: Vec<&str> = header.iter().map(String::as_str).collect();
    let width = match cols.as_slice() {
        ["s", "y"] => 2,
        ["r", "t", "y"] => 3,
        _ => return Err(Error::Config(format!("sample CSV needs columns s,y or r,t,y; got {}", header.join(",")))),
    };
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let vals = rec
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::Config(format!("sample CSV row {}: {e}", line + 2)))?;
        if vals.len() != width || vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("sample CSV row {}: expected {width} finite values", line + 2)));
        }
        rows.push(vals);
    }
    if rows.is_empty() {
        return Err(Error::Empty("sample CSV has no rows"));
    }
    Ok(if width == 2 {
        let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r[0], r[1])).collect();
        FittedGain::K(fit_k_envelope(&pts, EnvelopeMode::UpperMajorant)?)
    } else {
        let pts: Vec<(f64, f64, f64)> = rows.iter().map(|r| (r[0], r[1], r[2])).collect();
        FittedGain::Kl(fit_kl_envelope(&pts, KlFitOptions::default())?)
    })
}

// ---------------------------------------------------------------------------
// Bundles and plot data

/// Output files collected in memory and written in one pass, in name order.
#[derive(Debug, Default, Clone)]
pub struct Bundle {
    files: BTreeMap<String, Vec<u8>>,
}

impl Bundle {
    pub fn add(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.insert(name.into(), bytes);
    }

    pub fn add_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.add(name, bytes);
        Ok(())
    }

    pub fn add_trajectory(&mut self, stem: &str, traj: &Trajectory, storage: Option<&Storage>) -> Result<()> {
        let mut csv = Vec::new();
        traj.write_csv(&mut csv)?;
        self.add(format!("{stem}.csv"), csv);
        self.add(format!("{stem}.tsv"), emit_plot_data(&PlotSource::Trajectory { traj, storage }).into_bytes());
        Ok(())
    }

    pub fn add_gain(&mut self, stem: &str, gain: &MonotoneFn, s_max: f64, points: usize) -> Result<()> {
        self.add_json(&format!("{stem}.json"), gain)?;
        self.add(format!("{stem}.tsv"), emit_plot_data(&PlotSource::Gain { gain, s_max, points }).into_bytes());
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        self.files.keys().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.files.get(name).map(Vec::as_slice)
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, bytes) in &self.files {
            std::fs::write(dir.join(name), bytes)?;
        }
        Ok(())
    }
}

pub enum PlotSource<'a> {
    /// Columns `t, norm, mode`, plus `V` when a storage is given.
    Trajectory { traj: &'a Trajectory, storage: Option<&'a Storage> },
    /// Columns `s, value` at `points` samples on `[0, s_max]`.
    Gain { gain: &'a MonotoneFn, s_max: f64, points: usize },
    /// Columns `t, beta` per radius, `r` as the first column.
    Kl { beta: &'a KLFn, radii: &'a [f64], t_max: f64, points: usize },
}

/// Tab-separated plot data with a header line.
pub fn emit_plot_data(src: &PlotSource) -> String {
    let mut out = String::new();
    match src {
        PlotSource::Trajectory { traj, storage } => {
            out.push_str(if storage.is_some() { "t\tnorm\tV\tmode\n" } else { "t\tnorm\tmode\n" });
            for k in 0..traj.len() {
                let _ = write!(out, "{}\t{}", fmt_f64(traj.times()[k]), fmt_f64(traj.state_norm(k)));
                if let Some(v) = storage {
                    let _ = write!(out, "\t{}", fmt_f64(v.eval(traj.times()[k], traj.state(k), traj.mode(k))));
                }
                let _ = writeln!(out, "\t{}", traj.mode(k));
            }
        }
        PlotSource::Gain { gain, s_max, points } => {
            out.push_str("s\tvalue\n");
            for (s, v) in gain.sampled_curve(*s_max, *points) {
                let _ = writeln!(out, "{}\t{}", fmt_f64(s), fmt_f64(v));
            }
        }
        PlotSource::Kl { beta, radii, t_max, points } => {
            out.push_str("r\tt\tbeta\n");
            let n = (*points).max(2);
            for &r in radii.iter() {
                for k in 0..n {
                    let t = t_max * k as f64 / (n - 1) as f64;
                    let _ = writeln!(out, "{}\t{}\t{}", fmt_f64(r), fmt_f64(t), fmt_f64(beta.at(r, t)));
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Scenario runs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub tool: String,
    pub version: String,
    pub scenario: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub assertions: Vec<Assertion>,
    pub passed: bool,
    /// Scenario-specific results: checker reports, fitted gains, witnesses.
    pub results: BTreeMap<String, serde_json::Value>,
    pub files: Vec<String>,
}

impl ScenarioReport {
    pub fn failed_assertions(&self) -> Vec<&str> {
        self.assertions.iter().filter(|a| !a.passed).map(|a| a.name.as_str()).collect()
    }
}

/// A finished scenario: the report plus every file it produced, including
/// `report.json`.
#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub report: ScenarioReport,
    pub bundle: Bundle,
}

struct Run<'a> {
    cfg: &'a Config,
    seeds: BTreeMap<String, u64>,
    assertions: Vec<Assertion>,
    results: BTreeMap<String, serde_json::Value>,
    bundle: Bundle,
}

impl<'a> Run<'a> {
    fn new(cfg: &'a Config) -> Self {
        Self {
            cfg,
            seeds: BTreeMap::new(),
            assertions: Vec::new(),
            results: BTreeMap::new(),
            bundle: Bundle::default(),
        }
    }

    /// Seed `ensemble.seed + offset`, recorded under `role`.
    fn seed(&mut self, role: &str, offset: u64) -> u64 {
        let s = self.cfg.ensemble.seed.wrapping_add(offset);
        self.seeds.insert(role.to_string(), s);
        s
    }

    fn assert(&mut self, name: &str, passed: bool, detail: String) {
        self.assertions.push(Assertion {
            name: name.to_string(),
            passed,
            detail,
        });
    }

    fn result<T: Serialize>(&mut self, key: &str, value: &T) -> Result<()> {
        self.results.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    fn ensemble(&mut self, sys: &SwitchedSystem, role: &str, offset: u64, spec: EnsembleSpec) -> Result<Ensemble> {
        let seed = self.seed(role, offset);
        generate_ensemble(sys, &self.cfg.signals.set, &EnsembleSpec { seed, ..spec }, &self.cfg.integrator)
    }

    fn witness_files(&mut self, stem: &str, sys: &SwitchedSystem, w: &Witness, storage: Option<&Storage>) -> Result<()> {
        let traj = w.replay(sys, &self.cfg.integrator)?;
        self.bundle.add_json(&format!("{stem}_signal.json"), &w.case.sigma)?;
        self.bundle.add_trajectory(&format!("{stem}_trajectory"), &traj, storage)
    }

    fn finish(mut self, name: &str) -> Result<ScenarioOutcome> {
        let passed = self.assertions.iter().all(|a| a.passed);
        let mut files = self.bundle.names();
        files.push("report.json".into());
        files.sort();
        let report = ScenarioReport {
            tool: "switchcert".into(),
            version: VERSION.into(),
            scenario: name.into(),
            config_hash: self.cfg.hash()?,
            seeds: self.seeds,
            assertions: self.assertions,
            passed,
            results: self.results,
            files,
        };
        self.bundle.add_json("report.json", &report)?;
        Ok(ScenarioOutcome { report, bundle: self.bundle })
    }
}

/// Runs a named scenario. Scenarios fix their system and signal set; the
/// config supplies parameters, counts, seeds and tolerances.
pub fn run_scenario(name: &str, cfg: &Config) -> Result<ScenarioOutcome> {
    cfg.validate()?;
    let mut run = Run::new(cfg);
    match name {
        "prop4_counterexample" => prop4_counterexample(&mut run)?,
        "inverter_iiss" => inverter_iiss(&mut run)?,
        "inverter_beics" => inverter_beics(&mut run)?,
        "inverter_not_iss_probe" => inverter_not_iss_probe(&mut run)?,
        "gronwall_demo" => gronwall_demo(&mut run)?,
        other => {
            return Err(Error::Config(format!(
                "unknown scenario {other:?}; expected one of {}",
                SCENARIOS.join(", ")
            )))
        }
    }
    run.finish(name)
}

const PROP4_DECAY_HORIZON: f64 = 10.0;
const PROP4_DECAY_SLACK: f64 = 1e-4;

fn prop4_counterexample(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let sys = prop4_pair();
    let sim = cfg.integrator;
    let fs = &cfg.falsify;

    // Per-mode decay |x(t)| ≤ √10 e^{-t} |x0| from evenly spaced unit-circle points.
    let count = fs.x0_count;
    let mut worst = f64::INFINITY;
    for mode in [1, 2] {
        let cases: Vec<Case> = (0..count)
            .map(|k| {
                let th = 2.0 * std::f64::consts::PI * k as f64 / count as f64;
                Case {
                    x0: vec![th.cos(), th.sin()],
                    t0: 0.0,
                    horizon: PROP4_DECAY_HORIZON,
                    u: InputSignal::zero(1),
                    sigma: SwitchingSignal::constant(mode, PROP4_DECAY_HORIZON),
                }
            })
            .collect();
        let ens = ensemble_from_cases(&sys, cases, &sim)?;
        for r in &ens.runs {
            for k in 0..r.traj.len() {
                let bound = 10f64.sqrt() * (-r.traj.times()[k]).exp() + PROP4_DECAY_SLACK;
                worst = worst.min(bound - r.traj.state_norm(k));
            }
        }
        run.bundle.add_trajectory(&format!("mode{mode}_trajectory"), &ens.runs[0].traj, Some(&Storage::half_norm_squared(2)))?;
    }
    run.assert(
        "per-mode decay",
        worst >= 0.0,
        format!("{} runs per mode, min slack {worst:.3e} to sqrt(10) e^(-t) |x0| + {PROP4_DECAY_SLACK}", count),
    );

    let x0_seed = fs.seed;
    run.seeds.insert("falsify".into(), x0_seed);
    let witness = find_destabilizing(
        &sys,
        &default_policy_family(&sys)
            .into_iter()
            .map(|mut p| {
                p.guard = fs.guard;
                p
            })
            .collect::<Vec<_>>(),
        &unit_sphere_grid(2, fs.x0_count, x0_seed),
        fs.growth_target,
        fs.t_max,
        &sim,
    )?;
    match &witness {
        Some(w) => {
            let replay = w.replay_growth(&sys, &sim)?;
            let rel = ((replay - w.growth) / w.growth).abs();
            run.assert(
                "destabilizing switching found",
                rel <= 1e-6,
                format!("growth {:.4} at t = {:.4}, replay relative error {rel:.1e}", w.growth, w.t_hit),
            );
            let traj = simulate(&sys, &w.x0, w.t0, &InputSignal::zero(1), &w.sigma, w.t_hit, &sim)?;
            run.bundle.add_json("destabilizing_signal.json", &w.sigma)?;
            run.bundle.add_trajectory("destabilizing_trajectory", &traj, Some(&Storage::half_norm_squared(2)))?;
        }
        None => run.assert(
            "destabilizing switching found",
            false,
            format!("no growth {} within t <= {}", fs.growth_target, fs.t_max),
        ),
    }
    run.result("destabilizing_witness", &witness)?;

    let base = SignalSetSpec::FiniteFamily {
        signals: vec![SwitchingSignal::constant(1, 5.0), SwitchingSignal::constant(2, 5.0)],
    };
    let storage = Storage::half_norm_squared(2);
    let concat_seed = run.seed("concat_probe", 0);
    let probe = probe_concat_closure(
        &sys,
        &storage,
        &MonotoneFn::identity(),
        &base,
        fs.concat_k,
        fs.concat_budget,
        concat_seed,
        &cfg.check_options(),
        &sim,
    )?;
    let detail = match &probe.prefix_witness {
        Some(w) => format!(
            "{} of {} destabilizing-prefix runs violate V(t) <= V(t0); worst V = {:.3e} > {:.3e} at t = {:.3}",
            probe.prefix_violations, probe.prefix_runs, w.lhs, w.rhs, w.t
        ),
        None => format!("no violation in {} prefix runs", probe.prefix_runs),
    };
    run.assert("concatenation closure breaks dissipation", probe.prefix_witness.is_some(), detail);
    if let Some(w) = &probe.prefix_witness {
        run.witness_files("concat_witness", &sys, w, Some(&storage))?;
    }
    run.result("concat_probe", &probe)
}

fn inverter_pipeline_parts(cfg: &Config) -> Result<(SwitchedSystem, Storage, MonotoneFn)> {
    let params = cfg.system.inverter;
    let sys = make_inverter(params)?;
    let storage = Storage::inverter(&params, true);
    let alpha = MonotoneFn::linear(storage.sqrt_supply_slope(&sys)?)?;
    Ok((sys, storage, alpha))
}

fn zero_spec(cfg: &Config) -> EnsembleSpec {
    EnsembleSpec {
        input: InputFamily::Zero,
        ..cfg.ensemble.clone()
    }
}

fn inverter_iiss(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let opts = cfg.check_options();
    let (sys, storage, alpha) = inverter_pipeline_parts(cfg)?;
    let params = cfg.system.inverter;

    let input = run.ensemble(&sys, "input_ensemble", 0, cfg.ensemble.clone())?;
    let zero = run.ensemble(&sys, "zero_ensemble", 1, zero_spec(cfg))?;
    let fresh = run.ensemble(
        &sys,
        "recheck_ensemble",
        2,
        EnsembleSpec {
            count: cfg.certify.recheck_count,
            ..cfg.ensemble.clone()
        },
    )?;

    let growth = check_storage_growth(&input, &storage, &alpha, &opts)?;
    let (phi1, phi2) = storage.sandwich()?;
    let dissipation = DissipationCertificate {
        storage: storage.clone(),
        phi1,
        phi2,
        alpha: alpha.clone(),
        alpha3: None,
    };
    let all_pairs = check_dissipation(&sys, &input, &dissipation, &opts)?;
    run.assert(
        "sqrt(V) dissipation",
        growth.holds() && all_pairs.holds(),
        format!(
            "supply slope {:.6}; worst margin {} from t0, {} over all pairs",
            alpha.max_slope(),
            margin(&growth),
            margin(&all_pairs)
        ),
    );
    run.result("dissipation_from_start", &growth)?;
    run.result("dissipation_all_pairs", &all_pairs)?;

    let decay = check_storage_nonincreasing(&zero, &Storage::inverter(&params, false), 1e-8)?;
    run.assert("zero-input energy decay", decay.holds(), format!("worst margin {}", margin(&decay)));
    run.result("zero_input_decay", &decay)?;

    let ens = PipelineEnsembles {
        zero: &zero,
        input: &input,
        recheck: &fresh,
    };
    let comp = PipelineComponents {
        dissipation,
        gamma: None,
        beta: None,
        output_pe: None,
        margin: cfg.certify.fit_margin,
    };
    let pipeline = iiss_from_dissipation(&sys, PipelineMode::ZeroGuasZeroOd, &comp, &ens, &opts)?;
    for (name, rep) in &pipeline.hypotheses {
        if name == "0-GUAS" {
            run.assert("0-GUAS", rep.holds(), format!("fitted beta, worst margin {}", margin(rep)));
        }
    }
    let chi_identity = pipeline.certificate.as_ref().is_some_and(|c| is_identity(&c.chi));
    let recheck = pipeline.recheck.as_ref();
    run.assert(
        "iISS certificate with chi(s) = s",
        chi_identity && recheck.is_some_and(CheckReport::holds),
        format!(
            "chi is identity: {chi_identity}; fresh-seed check {:?}, worst margin {}",
            recheck.map(|r| r.verdict),
            recheck.map_or("n/a".into(), margin)
        ),
    );
    if let Some(cert) = &pipeline.certificate {
        gain_files(run, cert)?;
    }
    run.result("dissipation_pipeline", &pipeline)?;

    let (closure, ubebs) = iiss_from_guas_and_ubebs(&sys, &alpha, None, &ens, cfg.certify.fit_margin, &opts)?;
    let recheck = closure.recheck.as_ref();
    run.assert(
        "iISS from 0-GUAS + UBEBS",
        recheck.is_some_and(CheckReport::holds),
        format!(
            "hypotheses failed: {:?}; fresh-seed check {:?}, worst margin {}",
            closure.failed_hypothesis,
            recheck.map(|r| r.verdict),
            recheck.map_or("n/a".into(), margin)
        ),
    );
    run.bundle.add_gain("ubebs_alpha1", &ubebs.alpha1, 20.0, cfg.output.plot_points)?;
    run.result("ubebs_pipeline", &closure)?;
    run.bundle.add_trajectory("input_run0", &input.runs[0].traj, Some(&storage))?;
    run.bundle.add_trajectory("zero_run0", &zero.runs[0].traj, Some(&Storage::inverter(&params, false)))
}

fn gain_files(run: &mut Run, cert: &IissCertificate) -> Result<()> {
    let points = run.cfg.output.plot_points;
    run.bundle.add_json("iiss_certificate.json", cert)?;
    run.bundle.add_gain("chi", &cert.chi, 20.0, points)?;
    run.bundle.add_gain("rho", &cert.rho, 20.0, points)?;
    let radii = [0.1, 1.0, 10.0];
    let kl = emit_plot_data(&PlotSource::Kl {
        beta: &cert.beta,
        radii: &radii,
        t_max: run.cfg.ensemble.horizon,
        points,
    });
    run.bundle.add("beta.tsv", kl.into_bytes());
    Ok(())
}

fn is_identity(f: &MonotoneFn) -> bool {
    [1e-3, 0.1, 1.0, 10.0, 1e3].iter().all(|&s| (f.at(s) - s).abs() <= 1e-9 * (1.0 + s))
}

fn margin(r: &CheckReport) -> String {
    r.worst_margin.map_or("n/a".into(), |m| format!("{m:.3e}"))
}

fn inverter_beics(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let c = &cfg.certify;
    let sys = make_inverter(cfg.system.inverter)?;
    let input = InputFamily::ExpDecay {
        amplitude: c.beics_amplitude,
        rate: c.beics_rate,
    };
    let t_conv = match c.t_conv {
        Some(t) => Some(t),
        None => {
            let pilot = run.ensemble(
                &sys,
                "pilot_ensemble",
                10,
                EnsembleSpec {
                    count: c.pilot_runs,
                    radius_min: c.pilot_radius,
                    radius_max: c.pilot_radius,
                    horizon: c.beics_horizon,
                    t0: 0.0,
                    input: input.clone(),
                    seed: 0,
                },
            )?;
            pilot_t_conv(&pilot, c.beics_eps, c.t_conv_factor)
        }
    };
    let Some(t_conv) = t_conv else {
        run.assert(
            "bounded-energy input drives the state to zero",
            false,
            format!("pilot runs did not settle below {} within {} s", c.beics_eps, c.beics_horizon),
        );
        return Ok(());
    };
    let ens = run.ensemble(
        &sys,
        "beics_ensemble",
        11,
        EnsembleSpec {
            count: c.beics_runs,
            horizon: c.beics_horizon,
            input,
            ..cfg.ensemble.clone()
        },
    )?;
    let report = check_beics(&ens, &MonotoneFn::identity(), c.beics_eps, t_conv, &cfg.check_options())?;
    run.assert(
        "bounded-energy input drives the state to zero",
        report.holds(),
        format!("|x(t)| <= {} for t >= T_conv = {t_conv:.4} s; worst margin {}", c.beics_eps, margin(&report)),
    );
    run.result("t_conv", &t_conv)?;
    run.result("beics", &report)?;
    let storage = Storage::inverter(&cfg.system.inverter, false);
    run.bundle.add_trajectory("beics_run0", &ens.runs[0].traj, Some(&storage))
}

fn inverter_not_iss_probe(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let fs = &cfg.falsify;
    let sys = make_inverter(cfg.system.inverter)?;

    // Certificate re-checked along the diverging run: β fitted on zero-input
    // runs, ρ(s) = s/λmin from incremental non-expansiveness in the P-norm
    // (|x − x_zero| ≤ ∫|u|/λmin), χ = id.
    let zero = run.ensemble(&sys, "zero_ensemble", 1, zero_spec(cfg))?;
    let beta = fit_zero_guas_beta(&zero, cfg.certify.fit_margin)?;
    let cert = Some(IissCertificate {
        beta,
        rho: MonotoneFn::linear(1.0 / cfg.system.inverter.lambda_min())?,
        chi: MonotoneFn::identity(),
    });

    let sigma_seed = run.seed("probe_signal", 20);
    let sigma = sample_signal_set(&cfg.signals.set, fs.iss_horizon, sigma_seed)?;
    let mut x0 = vec![0.0; sys.state_dim()];
    x0[0] = 0.1;
    let probe = probe_iss_divergence(
        &sys,
        &sigma,
        &x0,
        fs.iss_amplitude,
        fs.iss_hold,
        fs.iss_horizon,
        fs.iss_growth_target,
        cert.as_ref(),
        &cfg.integrator,
    )?;
    run.assert(
        "bounded input drives the state unbounded",
        probe.diverging,
        format!(
            "sup|u| = {:.3}, |x| grew by {:.1}x to {:.3} over {} s, late slope {:.4}",
            probe.sup_input, probe.growth, probe.final_norm, probe.horizon, probe.late_slope
        ),
    );
    let recheck = probe.iiss_recheck.as_ref();
    run.assert(
        "iISS bound survives the diverging run",
        recheck.is_some_and(CheckReport::holds),
        format!(
            "input energy {:.3}; iISS check {:?}, worst margin {}",
            probe.input_l1,
            recheck.map(|r| r.verdict),
            recheck.map_or("n/a".into(), margin)
        ),
    );
    let traj = simulate(&sys, &probe.x0, 0.0, &probe.input, &probe.sigma, probe.horizon, &cfg.integrator)?;
    run.bundle.add_json("probe_signal.json", &probe.sigma)?;
    run.bundle.add_json("probe_input.json", &probe.input)?;
    run.bundle.add_trajectory("probe_trajectory", &traj, None)?;
    run.result("iiss_certificate", &cert)?;
    run.result("iss_probe", &probe)
}

fn gronwall_demo(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let c = &cfg.certify;
    let sys = make_inverter(cfg.system.inverter)?;
    let est_seed = c.estimator.seed;
    run.seeds.insert("estimator".into(), est_seed);
    let r_star = c.gronwall_radius;
    let lip = estimate_lipschitz(&sys, r_star, c.estimator)?;
    let radii: Vec<f64> = [1.0, 5.0, 10.0].into_iter().filter(|&r| r < r_star).chain([r_star]).collect();
    let c1 = estimate_c1_bounds(&sys, &radii, c.estimator)?;
    let chi = MonotoneFn::identity();
    let gamma = sys
        .bounds()
        .gamma
        .clone()
        .ok_or_else(|| Error::Precondition("inverter declares no gamma".into()))?;
    let kappa = estimate_kappa(&sys, r_star, c.gronwall_eta, &chi, &gamma, &c1.n_table, c.estimator)?;
    let zero = run.ensemble(
        &sys,
        "beta_fit_ensemble",
        30,
        EnsembleSpec {
            radius_max: c.gronwall_x0_max,
            ..zero_spec(cfg)
        },
    )?;
    let beta = fit_zero_guas_beta(&zero, c.fit_margin)?;
    let ens = run.ensemble(
        &sys,
        "gronwall_ensemble",
        31,
        EnsembleSpec {
            count: c.gronwall_runs,
            radius_max: c.gronwall_x0_max,
            horizon: cfg.ensemble.t0 + c.gronwall_horizon,
            ..cfg.ensemble.clone()
        },
    )?;
    let cert = GronwallCertificate {
        eta: c.gronwall_eta,
        kappa: kappa.kappa.max(f64::MIN_POSITIVE),
        lipschitz: lip.value,
        chi,
        beta,
        radius: r_star,
    };
    let report = check_gronwall(&ens, &cert, &cfg.check_options())?;
    run.assert(
        "Gronwall bound dominates |x(t)|",
        report.holds(),
        format!(
            "L = {:.4}, kappa = {:.4}, eta = {}; worst margin {}",
            lip.value,
            kappa.kappa,
            c.gronwall_eta,
            margin(&report)
        ),
    );
    run.result("lipschitz", &lip)?;
    run.result("kappa", &kappa)?;
    run.result("gronwall", &report)?;
    run.bundle.add_json("gronwall_certificate.json", &crate::certify::Certificate::Gronwall(cert))?;
    run.bundle.add_trajectory("gronwall_run0", &ens.runs[0].traj, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Config {
        let mut cfg = Config::default();
        cfg.ensemble.count = 4;
        cfg.ensemble.horizon = 3.0;
        cfg.certify.recheck_count = 4;
        cfg
    }

    #[test]
    fn default_config_round_trips() {
        let cfg = Config::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(Config::from_toml(&text).unwrap(), cfg);
        assert_eq!(Config::from_toml("").unwrap(), cfg);
        let documented = Config::documented_default().unwrap();
        assert_eq!(Config::from_toml(&documented).unwrap(), cfg);
    }

    #[test]
    fn partial_sections_and_rejections() {
        let cfg = Config::from_toml("[ensemble]\ncount = 7\n[integrator]\nh_step = 0.002\n").unwrap();
        assert_eq!(cfg.ensemble.count, 7);
        assert_eq!(cfg.ensemble.horizon, 20.0);
        assert_eq!(cfg.integrator.h_step, 0.002);
        assert!(Config::from_toml("[certify]\ntol = -1.0\n").is_err());
        assert!(Config::from_toml("[ensemble]\ncuont = 3\n").is_err());
        assert!(Config::from_toml("[system]\nname = \"custom_linear\"\n").is_err());
    }

    #[test]
    fn custom_linear_from_config() {
        let cfg = Config::from_toml(
            "[system]\nname = \"custom_linear\"\n[system.custom_linear]\na = [[[-1.0, 0.0], [0.0, -2.0]]]\nb = [[[1.0], [0.0]]]\n",
        )
        .unwrap();
        let sys = cfg.build_system().unwrap();
        assert_eq!(sys.eval(0.0, &[1.0, 1.0], &[0.5], 1), vec![-0.5, -2.0]);
    }

    #[test]
    fn hash_tracks_content() {
        let a = Config::default();
        let b = Config::default().with_seed(3);
        assert_eq!(a.hash().unwrap(), Config::default().hash().unwrap());
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        let mut moved = Config::default();
        moved.output.dir = "elsewhere".into();
        assert_eq!(a.hash().unwrap(), moved.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 64);
    }

    #[test]
    fn fit_from_sample_csv() {
        let k = fit_samples_csv("s,y\n1,2\n2,3\n0.5,0.4\n".as_bytes()).unwrap();
        let FittedGain::K(f) = k else { panic!("expected class K") };
        assert!(f.at(1.0) >= 2.0 && f.at(2.0) >= 3.0 && f.at(0.5) >= 0.4);
        let kl = fit_samples_csv("r,t,y\n1,0,1\n1,1,0.5\n2,0,2\n2,1,1\n".as_bytes()).unwrap();
        let FittedGain::Kl(b) = kl else { panic!("expected class KL") };
        assert!(b.at(1.0, 1.0) >= 0.5 && b.at(2.0, 0.0) >= 2.0);
        assert!(fit_samples_csv("a,b\n1,2\n".as_bytes()).is_err());
        assert!(fit_samples_csv("s,y\n".as_bytes()).is_err());
    }

    #[test]
    fn unknown_scenario_is_a_config_error() {
        assert!(matches!(run_scenario("nope", &Config::default()), Err(Error::Config(_))));
    }

    #[test]
    fn plot_data_columns() {
        let sys = prop4_pair();
        let zero = simulate(
            &sys,
            &[0.0, 0.0],
            0.0,
            &InputSignal::zero(1),
            &SwitchingSignal::constant(1, 0.01),
            0.01,
            &SimOptions::default(),
        )
        .unwrap();
        let tsv = emit_plot_data(&PlotSource::Trajectory { traj: &zero, storage: None });
        let mut lines = tsv.lines();
        assert_eq!(lines.next(), Some("t\tnorm\tmode"));
        assert!(lines.all(|l| l.split('\t').nth(1) == Some("0.0")));

        let gain = emit_plot_data(&PlotSource::Gain {
            gain: &MonotoneFn::identity(),
            s_max: 2.0,
            points: 200,
        });
        assert_eq!(gain.lines().count(), 201);
    }

    #[test]
    fn zero_input_inverter_v_column_is_monotone() {
        let params = InverterParams::default();
        let sys = make_inverter(params).unwrap();
        let sigma = sample_signal_set(&SignalsSection::default().set, 3.0, 1).unwrap();
        let traj = simulate(&sys, &[1.0, -1.0, 0.5, 2.0], 0.0, &InputSignal::zero(1), &sigma, 3.0, &SimOptions::default()).unwrap();
        let storage = Storage::inverter(&params, false);
        let tsv = emit_plot_data(&PlotSource::Trajectory { traj: &traj, storage: Some(&storage) });
        let v: Vec<f64> = tsv.lines().skip(1).map(|l| l.split('\t').nth(2).unwrap().parse().unwrap()).collect();
        assert!(v.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn identical_configs_give_identical_bundles() {
        let cfg = small();
        let a = run_scenario("inverter_iiss", &cfg).unwrap();
        let b = run_scenario("inverter_iiss", &cfg).unwrap();
        assert_eq!(a.bundle.names(), b.bundle.names());
        for name in a.bundle.names() {
            assert_eq!(a.bundle.get(&name), b.bundle.get(&name), "{name} differs");
        }
        assert_eq!(a.report.passed, a.report.failed_assertions().is_empty());
        assert!(a.report.seeds.contains_key("recheck_ensemble"));
    }
}
