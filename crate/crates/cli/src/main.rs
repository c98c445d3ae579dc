//! `switchcert` command-line front end.
//!
//! Exit status: 0 when every checked property holds (or no falsifying
//! witness was found), 1 when one is violated or a witness was found,
//! 2 on usage, configuration or I/O errors, 3 when a check is inconclusive.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use switchcert::certify::{
    check_0guas, check_beics, check_dissipation, check_gronwall, check_iiss, check_output_pe, check_ubebs, fit_ubebs_gains,
    fit_zero_guas_beta, generate_ensemble, pilot_t_conv, Certificate, CheckReport, Ensemble, EnsembleSpec, InputFamily, Verdict,
};
use switchcert::comparison::MonotoneFn;
use switchcert::falsify::{default_policy_family, find_destabilizing, search_certificate_violation, unit_sphere_grid, SearchOptions};
use switchcert::integrator::simulate;
use switchcert::scenario::{fit_samples_csv, run_scenario, Bundle, Config, VERSION};
use switchcert::signals::{sample_signal_set, InputSignal, SwitchingSignal};
use switchcert::systems::SwitchedSystem;

#[derive(Parser)]
#[command(name = "switchcert", version, about = "Simulate switched systems and check stability estimates on ensembles")]
struct Cli {
    /// TOML configuration file; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides output.dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Check tolerance (overrides certify.tol).
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// Print the effective configuration with all defaults and exit.
    #[arg(long)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one run, or the configured ensemble when --x0 is absent.
    Simulate {
        /// Initial state, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x0: Option<Vec<f64>>,
        /// Switching signal JSON; sampled from the configured set when absent.
        #[arg(long)]
        signal: Option<PathBuf>,
        /// Input signal JSON; zero when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        /// End time of a single run (defaults to ensemble.horizon).
        #[arg(long)]
        horizon: Option<f64>,
    },
    /// Check an estimate on the configured ensemble.
    Check {
        #[arg(long, value_enum)]
        estimate: Estimate,
        /// Certificate JSON; for beics an optional gain JSON for chi.
        #[arg(long)]
        certificate: Option<PathBuf>,
    },
    /// Fit a gain from samples (CSV columns s,y or r,t,y) or from the
    /// configured ensemble.
    Fit {
        /// CSV of samples to envelope
        #[arg(long, conflicts_with = "estimate", required_unless_present = "estimate")]
        samples: Option<PathBuf>,
        #[arg(long, value_enum)]
        estimate: Option<FitEstimate>,
        /// Supply gain JSON used by the ubebs fit; identity when absent.
        #[arg(long)]
        alpha: Option<PathBuf>,
    },
    /// Search for a switching signal that defeats a certificate, or for
    /// destabilizing switching when no target is given.
    Falsify {
        /// Certificate JSON to attack
        #[arg(long)]
        target: Option<PathBuf>,
        /// Runs in the certificate search (overrides falsify.budget).
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Run a canonical scenario and write its report bundle.
    Scenario {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(switchcert::scenario::SCENARIOS))]
        name: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Estimate {
    Iiss,
    Ubebs,
    #[value(name = "0guas")]
    ZeroGuas,
    Beics,
    Dissipation,
    OutputPe,
    Gronwall,
}

#[derive(Clone, Copy, ValueEnum)]
enum FitEstimate {
    #[value(name = "0guas")]
    ZeroGuas,
    Ubebs,
}

/// Envelope written around every command's result.
#[derive(Serialize)]
struct CommandReport<T: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config_hash: String,
    seeds: BTreeMap<&'static str, u64>,
    result: T,
}

fn report<T: Serialize>(cfg: &Config, command: &'static str, result: T) -> Result<CommandReport<T>> {
    Ok(CommandReport {
        tool: "switchcert",
        version: VERSION,
        command,
        config_hash: cfg.hash()?,
        seeds: BTreeMap::from([
            ("ensemble", cfg.ensemble.seed),
            ("falsify", cfg.falsify.seed),
            ("estimator", cfg.certify.estimator.seed),
        ]),
        result,
    })
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = out.clone();
    }
    if let Some(tol) = cli.tol {
        cfg.certify.tol = tol;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn verdict_code(v: Verdict) -> u8 {
    match v {
        Verdict::HoldsOnEnsemble => 0,
        Verdict::Violated => 1,
        Verdict::Inconclusive => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    let cfg = load_config(&cli)?;
    if cli.print_config {
        if cli.config.is_none() && cli.seed.is_none() && cli.out.is_none() && cli.tol.is_none() {
            print!("{}", Config::documented_default()?);
        } else {
            print!("{}", cfg.to_toml()?);
        }
        return Ok(0);
    }
    let Some(command) = cli.command else {
        bail!("no subcommand given; see --help");
    };
    let out = cfg.output.dir.clone();
    let mut bundle = Bundle::default();
    let code = match command {
        Command::Simulate { x0, signal, input, horizon } => cmd_simulate(&cfg, &mut bundle, x0, signal, input, horizon)?,
        Command::Check { estimate, certificate } => cmd_check(&cfg, &mut bundle, estimate, certificate.as_deref())?,
        Command::Fit { samples, estimate, alpha } => cmd_fit(&cfg, &mut bundle, samples.as_deref(), estimate, alpha.as_deref())?,
        Command::Falsify { target, budget } => cmd_falsify(&cfg, &mut bundle, target.as_deref(), budget)?,
        Command::Scenario { name } => {
            let outcome = run_scenario(&name, &cfg)?;
            for a in &outcome.report.assertions {
                println!("{}: {} ({})", a.name, if a.passed { "PASS" } else { "FAIL" }, a.detail);
            }
            let failed = outcome.report.failed_assertions();
            if !failed.is_empty() {
                eprintln!("scenario {name} failed: {}", failed.join("; "));
            }
            bundle = outcome.bundle;
            u8::from(!outcome.report.passed)
        }
    };
    bundle.write_to(&out).with_context(|| format!("writing {}", out.display()))?;
    let n = bundle.names().len();
    println!("wrote {n} file{} to {}", if n == 1 { "" } else { "s" }, out.display());
    Ok(code)
}

fn cmd_simulate(
    cfg: &Config,
    bundle: &mut Bundle,
    x0: Option<Vec<f64>>,
    signal: Option<PathBuf>,
    input: Option<PathBuf>,
    horizon: Option<f64>,
) -> Result<u8> {
    let sys = cfg.build_system()?;
    #[derive(Serialize)]
    struct RunSummary {
        index: usize,
        x0_norm: f64,
        max_norm: f64,
        final_norm: f64,
        blow_up: Option<f64>,
    }
    let mut summaries = Vec::new();
    let mut blew_up = false;
    match x0 {
        Some(x0) => {
            let t0 = cfg.ensemble.t0;
            let t_end = horizon.unwrap_or(cfg.ensemble.horizon);
            let sigma: SwitchingSignal = match &signal {
                Some(p) => read_json(p)?,
                None => sample_signal_set(&cfg.signals.set, t_end, cfg.ensemble.seed)?,
            };
            let u: InputSignal = match &input {
                Some(p) => read_json(p)?,
                None => InputSignal::zero(sys.input_dim()),
            };
            let traj = simulate(&sys, &x0, t0, &u, &sigma, t_end, &cfg.integrator)?;
            blew_up = traj.blow_up().is_some();
            summaries.push(RunSummary {
                index: 0,
                x0_norm: traj.state_norm(0),
                max_norm: traj.max_norm(),
                final_norm: traj.state_norm(traj.len() - 1),
                blow_up: traj.blow_up(),
            });
            bundle.add_json("signal.json", &sigma)?;
            bundle.add_trajectory("trajectory", &traj, None)?;
        }
        None => {
            if signal.is_some() || input.is_some() || horizon.is_some() {
                bail!("--signal, --input and --horizon need --x0; ensembles come from the config");
            }
            let ens = generate_ensemble(&sys, &cfg.signals.set, &cfg.ensemble, &cfg.integrator)?;
            for run in &ens.runs {
                let traj = &run.traj;
                blew_up |= traj.blow_up().is_some();
                summaries.push(RunSummary {
                    index: run.index,
                    x0_norm: traj.state_norm(0),
                    max_norm: traj.max_norm(),
                    final_norm: traj.state_norm(traj.len() - 1),
                    blow_up: traj.blow_up(),
                });
                bundle.add_trajectory(&format!("run{:04}", run.index), traj, None)?;
            }
        }
    }
    for s in &summaries {
        println!("run {}: |x0| = {:.4}, max |x| = {:.4}, final |x| = {:.4e}", s.index, s.x0_norm, s.max_norm, s.final_norm);
    }
    bundle.add_json("report.json", &report(cfg, "simulate", &summaries)?)?;
    Ok(u8::from(blew_up))
}

fn ensemble(cfg: &Config, sys: &SwitchedSystem, input: Option<InputFamily>) -> Result<Ensemble> {
    let spec = EnsembleSpec {
        input: input.unwrap_or_else(|| cfg.ensemble.input.clone()),
        ..cfg.ensemble.clone()
    };
    Ok(generate_ensemble(sys, &cfg.signals.set, &spec, &cfg.integrator)?)
}

fn certificate(path: Option<&Path>) -> Result<Certificate> {
    let path = path.context("this estimate needs --certificate")?;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Certificate::from_json(&text)?)
}

fn mismatch(cert: &Certificate, want: &str) -> anyhow::Error {
    anyhow::anyhow!("certificate is {}, expected {want}", cert.kind_name())
}

fn cmd_check(cfg: &Config, bundle: &mut Bundle, estimate: Estimate, cert_path: Option<&Path>) -> Result<u8> {
    let sys = cfg.build_system()?;
    let opts = cfg.check_options();
    let c = &cfg.certify;
    let rep: CheckReport = match estimate {
        Estimate::Iiss => match certificate(cert_path)? {
            Certificate::Iiss(cert) => check_iiss(&ensemble(cfg, &sys, None)?, &cert, &opts)?,
            other => return Err(mismatch(&other, "iiss")),
        },
        Estimate::Ubebs => match certificate(cert_path)? {
            Certificate::Ubebs(cert) => check_ubebs(&ensemble(cfg, &sys, None)?, &cert, &opts)?,
            other => return Err(mismatch(&other, "ubebs")),
        },
        Estimate::ZeroGuas => match certificate(cert_path)? {
            Certificate::ZeroGuas { beta } => check_0guas(&ensemble(cfg, &sys, Some(InputFamily::Zero))?, &beta, &opts)?,
            other => return Err(mismatch(&other, "zero_guas")),
        },
        Estimate::Dissipation => match certificate(cert_path)? {
            Certificate::Dissipation(cert) => check_dissipation(&sys, &ensemble(cfg, &sys, None)?, &cert, &opts)?,
            other => return Err(mismatch(&other, "dissipation")),
        },
        Estimate::Gronwall => match certificate(cert_path)? {
            Certificate::Gronwall(cert) => check_gronwall(&ensemble(cfg, &sys, None)?, &cert, &opts)?,
            other => return Err(mismatch(&other, "gronwall")),
        },
        Estimate::OutputPe => {
            let r = c.output_pe_r.unwrap_or(c.output_pe_eps * c.output_pe_eps * c.output_pe_window);
            let ens = ensemble(cfg, &sys, Some(InputFamily::Zero))?;
            check_output_pe(&sys, &ens, c.output_pe_eps, c.output_pe_window, r, &opts)?
        }
        Estimate::Beics => {
            let chi: MonotoneFn = match cert_path {
                Some(p) => read_json(p)?,
                None => MonotoneFn::identity(),
            };
            let input = InputFamily::ExpDecay {
                amplitude: c.beics_amplitude,
                rate: c.beics_rate,
            };
            let horizon = c.beics_horizon;
            let t_conv = match c.t_conv {
                Some(t) => t,
                None => {
                    let pilot = EnsembleSpec {
                        count: c.pilot_runs,
                        radius_min: c.pilot_radius,
                        radius_max: c.pilot_radius,
                        horizon,
                        input: input.clone(),
                        ..cfg.ensemble.clone()
                    };
                    let pilot = generate_ensemble(&sys, &cfg.signals.set, &pilot, &cfg.integrator)?;
                    pilot_t_conv(&pilot, c.beics_eps, c.t_conv_factor).context("pilot runs did not settle within the horizon")?
                }
            };
            println!("T_conv = {t_conv}");
            let spec = EnsembleSpec {
                horizon,
                input,
                ..cfg.ensemble.clone()
            };
            let ens = generate_ensemble(&sys, &cfg.signals.set, &spec, &cfg.integrator)?;
            check_beics(&ens, &chi, c.beics_eps, t_conv, &opts)?
        }
    };
    println!(
        "{}: {:?} over {} runs, worst margin {}",
        rep.estimate,
        rep.verdict,
        rep.runs_checked,
        rep.worst_margin.map_or("n/a".into(), |m| format!("{m:.3e}"))
    );
    if let Some(w) = &rep.witness {
        bundle.add_json("witness_signal.json", &w.case.sigma)?;
        bundle.add_trajectory("witness_trajectory", &w.replay(&sys, &cfg.integrator)?, None)?;
    }
    let code = verdict_code(rep.verdict);
    bundle.add_json("report.json", &report(cfg, "check", rep)?)?;
    Ok(code)
}

fn cmd_fit(
    cfg: &Config,
    bundle: &mut Bundle,
    samples: Option<&Path>,
    estimate: Option<FitEstimate>,
    alpha: Option<&Path>,
) -> Result<u8> {
    let points = cfg.output.plot_points;
    if let Some(path) = samples {
        let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let gain = fit_samples_csv(file)?;
        bundle.add_json("gain.json", &gain)?;
        bundle.add_json("report.json", &report(cfg, "fit", &gain)?)?;
        println!("fitted {}", match gain {
            switchcert::scenario::FittedGain::K(_) => "class-K envelope",
            switchcert::scenario::FittedGain::Kl(_) => "class-KL envelope",
        });
        return Ok(0);
    }
    let sys = cfg.build_system()?;
    match estimate.context("fit needs --samples or --estimate")? {
        FitEstimate::ZeroGuas => {
            let ens = ensemble(cfg, &sys, Some(InputFamily::Zero))?;
            let beta = fit_zero_guas_beta(&ens, cfg.certify.fit_margin)?;
            let cert = Certificate::ZeroGuas { beta };
            bundle.add("certificate.json", format!("{}\n", cert.to_json()?).into_bytes());
            bundle.add_json("report.json", &report(cfg, "fit", &cert)?)?;
            println!("fitted 0-GUAS beta on {} runs", ens.len());
        }
        FitEstimate::Ubebs => {
            let alpha: MonotoneFn = match alpha {
                Some(p) => read_json(p)?,
                None => MonotoneFn::identity(),
            };
            let ens = ensemble(cfg, &sys, None)?;
            let (alpha1, alpha2) = fit_ubebs_gains(&ens, &alpha)?;
            bundle.add_gain("alpha1", &alpha1, 20.0, points)?;
            let cert = Certificate::Ubebs(switchcert::certify::UbebsCertificate {
                alpha1,
                alpha2,
                alpha,
                c: 0.0,
            });
            bundle.add("certificate.json", format!("{}\n", cert.to_json()?).into_bytes());
            bundle.add_json("report.json", &report(cfg, "fit", &cert)?)?;
            println!("fitted UBEBS gains on {} runs", ens.len());
        }
    }
    Ok(0)
}

fn cmd_falsify(cfg: &Config, bundle: &mut Bundle, target: Option<&Path>, budget: Option<usize>) -> Result<u8> {
    let sys = cfg.build_system()?;
    let fs = &cfg.falsify;
    match target {
        Some(path) => {
            let cert = certificate(Some(path))?;
            let search = SearchOptions {
                budget: budget.unwrap_or(fs.budget),
                seed: fs.seed,
                horizon: cfg.ensemble.horizon,
                radius_min: cfg.ensemble.radius_min,
                radius_max: cfg.ensemble.radius_max,
                input: cfg.ensemble.input.clone(),
            };
            let rep = search_certificate_violation(&sys, &cfg.signals.set, &cert, &search, &cfg.check_options(), &cfg.integrator)?;
            println!(
                "{} search over {} runs: {:?}, worst margin {}",
                cert.kind_name(),
                rep.runs_checked,
                rep.verdict,
                rep.worst_margin.map_or("n/a".into(), |m| format!("{m:.3e}"))
            );
            let found = rep.violated();
            if let Some(w) = &rep.witness {
                bundle.add_json("witness_signal.json", &w.case.sigma)?;
                bundle.add_trajectory("witness_trajectory", &w.replay(&sys, &cfg.integrator)?, None)?;
            }
            bundle.add_json("report.json", &report(cfg, "falsify", rep)?)?;
            Ok(u8::from(found))
        }
        None => {
            if budget.is_some() {
                bail!("--budget applies to certificate searches (--target)");
            }
            let policies: Vec<_> = default_policy_family(&sys)
                .into_iter()
                .map(|mut p| {
                    p.guard = fs.guard;
                    p
                })
                .collect();
            let grid = unit_sphere_grid(sys.state_dim(), fs.x0_count, fs.seed);
            let witness = find_destabilizing(&sys, &policies, &grid, fs.growth_target, fs.t_max, &cfg.integrator)?;
            match &witness {
                Some(w) => {
                    println!("growth {:.4} at t = {:.4} (policy {}, initial state {})", w.growth, w.t_hit, w.policy_index, w.x0_index);
                    let traj = simulate(&sys, &w.x0, w.t0, &InputSignal::zero(sys.input_dim()), &w.sigma, w.t_hit, &cfg.integrator)?;
                    bundle.add_json("witness_signal.json", &w.sigma)?;
                    bundle.add_trajectory("witness_trajectory", &traj, None)?;
                }
                None => println!("no growth {} within t <= {}", fs.growth_target, fs.t_max),
            }
            let found = witness.is_some();
            bundle.add_json("report.json", &report(cfg, "falsify", witness)?)?;
            Ok(u8::from(found))
        }
    }
}
