//! `trimodal`: psychophysics planning, smell transport, cost tables, allocation models and the
//! session server from one binary.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;
use trimodal_core::allocation::{
    self, fit_detailed, group_means, predict, read_records, write_records_to, AllocationError, BudgetScale,
    ModelCoefficients, ModelKind,
};
use trimodal_core::cost::{CostCatalog, CostError, Modality};
use trimodal_core::psychometric::{
    bootstrap_se, deviance_gof, fit_pf, read_trials, FitOptions, FitReport, LapsePolicy, PfFamily,
    PsychometricError,
};
use trimodal_core::session::{self, SessionError};
use trimodal_core::staircase::{
    initial_subintervals, schedule_trials, simulate_session, subinterval_plan, DeviceRange, SimulationConfig,
    StaircaseError, WeberObserver,
};
use trimodal_core::transport::{builtin_scene, build_mesh, cost_ratio, simulate, SceneSpec, TransportError};

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Psychometric(#[from] PsychometricError),
    #[error(transparent)]
    Staircase(#[from] StaircaseError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Allocation(#[from] AllocationError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("{0}")]
    Usage(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("service: {0}")]
    Service(#[from] trimodal_service::ApiError),
}

type CliResult = Result<(), CliError>;

#[derive(Parser)]
#[command(name = "trimodal", version, about = "Tri-modal resource allocation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scale {
    Percent,
    Levels,
}

impl From<Scale> for BudgetScale {
    fn from(s: Scale) -> Self {
        match s {
            Scale::Percent => BudgetScale::PercentOfReference,
            Scale::Levels => BudgetScale::LevelCount,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the fixed sub-interval stimulus sets and the first phase's trial schedule.
    PlanJnd {
        #[arg(long, default_value_t = 1.2)]
        c_min: f64,
        #[arg(long, default_value_t = 11.2)]
        c_max: f64,
        #[arg(long, default_value_t = 0.4)]
        step: f64,
        #[arg(long, default_value_t = 10)]
        trials_per_pair: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the JND protocol end to end against a synthetic Weber observer.
    SimulateJnd {
        /// Observer spec, `k=<weber fraction>`.
        #[arg(long)]
        observer: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        trials_per_pair: u32,
    },
    /// Fit a psychometric function to a trial CSV (stimulus_ppm,pedestal_ppm,correct,order).
    FitPf {
        #[arg(long)]
        trials: PathBuf,
        #[arg(long, default_value = "logistic")]
        family: String,
        #[arg(long, default_value_t = 1000)]
        bootstrap: usize,
        #[arg(long, default_value_t = 1000)]
        gof: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fit the lapse rate instead of fixing it at 0.
        #[arg(long)]
        free_lapse: bool,
    },
    /// Simulate odour transport and write the probe series as CSV.
    SimulateSmell {
        /// Scene file (TOML) or a built-in name: bathroom, car, kitchen, kitti.
        #[arg(long)]
        scene: String,
        /// Approximate total cell count.
        #[arg(long)]
        cells: usize,
        /// Virtual seconds.
        #[arg(long, default_value_t = 1800.0)]
        duration: f64,
        #[arg(long, default_value_t = 4.0)]
        rate: f64,
        /// Probe position `x,y,z`; defaults to the scene's probe.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        probe: Option<Vec<f64>>,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also run this many 2x refinements and print the cost ratios (JSON, stderr).
        #[arg(long, default_value_t = 0)]
        refinements: u32,
    },
    /// Print budgets, ladder extents and smell costs.
    PrintCosts {
        #[arg(long)]
        catalog: Option<PathBuf>,
        /// List every ladder level.
        #[arg(long)]
        full: bool,
    },
    /// Predict the allocation for a budget.
    Predict {
        #[arg(long, default_value = "m2")]
        model: String,
        #[arg(long)]
        scenario: Option<String>,
        /// Budget label (B1..B5) or a raw regressor value.
        #[arg(long)]
        budget: String,
        /// Coefficients JSON; the reference estimates when omitted.
        #[arg(long)]
        coeffs: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Scale::Percent)]
        scale: Scale,
    },
    /// Fit M1 or M2 to allocation records.
    FitModel {
        #[arg(long)]
        records: PathBuf,
        #[arg(long, default_value = "m2")]
        kind: String,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value = "Bathroom")]
        baseline: String,
        /// Fit (budget, scenario) cell means instead of individual trials.
        #[arg(long)]
        cell_means: bool,
        /// Print only the coefficients (loadable by --coeffs).
        #[arg(long)]
        coefficients_only: bool,
    },
    /// Compare model predictions with observed records.
    Validate {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        coeffs: PathBuf,
        /// Scenario substitutions `observed=modelled`, e.g. `Kitti=Kitchen`.
        #[arg(long = "map", value_name = "FROM=TO")]
        map: Vec<String>,
    },
    /// Serve the session API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        catalog: Option<PathBuf>,
    },
    /// Re-run every session in a store and check each recorded state.
    Replay { log: PathBuf },
    /// Write the committed records of a store as CSV.
    ExportCsv {
        log: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn print_json<T: serde::Serialize + ?Sized>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("plain data"));
}

fn catalog(path: Option<&Path>) -> Result<CostCatalog, CliError> {
    Ok(match path {
        Some(p) => CostCatalog::load(p)?,
        None => CostCatalog::default(),
    })
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(std::fs::File::create(p)?),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn run(command: Command) -> CliResult {
    match command {
        Command::PlanJnd {
            c_min,
            c_max,
            step,
            trials_per_pair,
            seed,
        } => {
            let range = DeviceRange::new(c_min, c_max)?;
            let sets = initial_subintervals(range, step)?;
            let first = subinterval_plan(range, step, 1, trials_per_pair, 0)?;
            let schedule = schedule_trials(&first, seed)?;
            print_json(&serde_json::json!({
                "pedestal_ppm": range.c_min,
                "subintervals": sets,
                "plan": first,
                "schedule": schedule.schedule,
            }));
        }
        Command::SimulateJnd {
            observer,
            seed,
            trials_per_pair,
        } => {
            let k = observer
                .strip_prefix("k=")
                .and_then(|v| v.parse::<f64>().ok())
                .filter(|k| *k > 0.0)
                .ok_or_else(|| CliError::Usage(format!("observer must look like k=<positive real>, got `{observer}`")))?;
            let config = SimulationConfig {
                seed,
                trials_per_pair,
                ..SimulationConfig::default()
            };
            print_json(&simulate_session(&WeberObserver::new(k), &config)?);
        }
        Command::FitPf {
            trials,
            family,
            bootstrap,
            gof,
            seed,
            free_lapse,
        } => {
            let trials = read_trials(&trials)?;
            let family: PfFamily = family.parse()?;
            let opts = FitOptions {
                seed,
                lapse: if free_lapse { LapsePolicy::Free } else { LapsePolicy::default() },
                ..FitOptions::default()
            };
            let fit = fit_pf(&trials, family, &opts)?;
            let boot = (bootstrap > 1).then(|| bootstrap_se(&fit, &trials, bootstrap, seed, &opts)).transpose()?;
            let gof = (gof > 0).then(|| deviance_gof(&fit, &trials, gof, seed, &opts));
            println!("{}", FitReport::new(&fit, boot.as_ref(), gof.as_ref()).to_json());
        }
        Command::SimulateSmell {
            scene,
            cells,
            duration,
            rate,
            probe,
            out,
            refinements,
        } => {
            let spec = load_scene(&scene)?;
            let probe = match probe {
                Some(p) => [p[0], p[1], p[2]],
                None => spec.probe.unwrap_or([spec.extent[0] / 2.0, spec.extent[1] / 2.0, spec.extent[2] / 2.0]),
            };
            let mesh = build_mesh(&spec, cells)?;
            let run = simulate(&spec, &mesh, duration, rate, probe)?;
            run.series.write_csv(output(out.as_deref())?)?;
            eprintln!(
                "{}: {} cells {:?}, dt {:.4} s, {} steps, {:.2} s wall",
                spec.name, mesh.total_cells, mesh.resolution, run.dt, run.steps, run.wall_time_s
            );
            if refinements > 0 {
                let mut times = BTreeMap::from([(0u32, run.wall_time_s.max(1e-9))]);
                for level in 1..=refinements {
                    let fine = mesh.refine(1 << level);
                    let r = simulate(&spec, &fine, duration, rate, probe)?;
                    times.insert(level, r.wall_time_s.max(1e-9));
                }
                eprintln!("{}", cost_ratio(&times)?.to_json());
            }
        }
        Command::PrintCosts { catalog: path, full } => print_costs(&catalog(path.as_deref())?, full)?,
        Command::Predict {
            model,
            scenario,
            budget,
            coeffs,
            scale,
        } => {
            let coeffs = match coeffs {
                Some(p) => ModelCoefficients::from_json(&std::fs::read_to_string(p)?)?,
                None => ModelCoefficients::reference(model.parse::<ModelKind>()?),
            };
            let b = match budget.parse::<f64>() {
                Ok(v) => v,
                Err(_) => BudgetScale::from(scale).regressor(CostCatalog::default().budget(&budget)?),
            };
            let scenario = match (coeffs.model, scenario) {
                (ModelKind::M1, _) => None,
                (ModelKind::M2, s) => s,
            };
            let p = predict(&coeffs, b, scenario.as_deref())?;
            print_json(&serde_json::json!({
                "model": coeffs.model,
                "budget_regressor": b,
                "scenario": scenario,
                "prediction": p,
            }));
        }
        Command::FitModel {
            records,
            kind,
            alpha,
            baseline,
            cell_means,
            coefficients_only,
        } => {
            let mut records = read_records(&records)?;
            if cell_means {
                records = group_means(&records);
            }
            let fitted = fit_detailed(&records, kind.parse()?, alpha, &baseline)?;
            if coefficients_only {
                println!("{}", fitted.coefficients.to_json());
            } else {
                print_json(&fitted);
            }
        }
        Command::Validate { records, coeffs, map } => {
            let coeffs = ModelCoefficients::from_json(&std::fs::read_to_string(coeffs)?)?;
            let records = read_records(&records)?;
            let map = map
                .iter()
                .map(|m| {
                    m.split_once('=')
                        .map(|(a, b)| (a.trim().to_string(), b.trim().to_string()))
                        .ok_or_else(|| CliError::Usage(format!("--map expects FROM=TO, got `{m}`")))
                })
                .collect::<Result<BTreeMap<_, _>, _>>()?;
            print_json(&allocation::validate(&coeffs, &records, &map)?);
        }
        Command::Serve {
            port,
            host,
            store,
            catalog: path,
        } => {
            let config = trimodal_service::ServiceConfig {
                catalog: catalog(path.as_deref())?,
                store,
                ..Default::default()
            };
            let state = trimodal_service::AppState::new(config)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port)).await?;
                println!("listening on http://{}", listener.local_addr()?);
                trimodal_service::serve(listener, state).await
            })?;
        }
        Command::Replay { log } => {
            let logs = session::load(&log)?;
            for l in &logs {
                let states = session::replay(l)?;
                println!(
                    "{} participant {}: {} events, {} records, replay ok",
                    l.session_id,
                    l.participant_id,
                    states.len(),
                    l.records().len()
                );
            }
        }
        Command::ExportCsv { log, out } => {
            let records: Vec<_> = session::load(&log)?.iter().flat_map(|l| l.records()).collect();
            write_records_to(output(out.as_deref())?, &records)?;
        }
    }
    Ok(())
}

fn load_scene(arg: &str) -> Result<SceneSpec, CliError> {
    let path = Path::new(arg);
    if path.exists() {
        Ok(SceneSpec::load(path)?)
    } else {
        Ok(builtin_scene(arg)?)
    }
}

fn print_costs(catalog: &CostCatalog, full: bool) -> CliResult {
    let mut out = std::io::stdout().lock();
    writeln!(out, "budgets")?;
    for b in &catalog.budgets {
        writeln!(out, "  {:<4} {:>8.4}  ({} reference levels)", b.label, b.value, b.level_count)?;
    }
    for modality in [Modality::Visual, Modality::Audio] {
        let ladder = catalog.ladder(modality);
        writeln!(
            out,
            "{modality:?} ladder: {} levels, cost {:.6} .. {:.6}",
            ladder.len(),
            ladder.cheapest(),
            ladder.cost_at(ladder.top())?
        )?;
        if full {
            for pos in 1..=ladder.top() {
                writeln!(out, "  {pos:>3}  {:<24} {:.6}", ladder.descriptor_at(pos), ladder.cost_at(pos)?)?;
            }
        }
    }
    writeln!(out, "smell")?;
    for (scenario, cost) in &catalog.smell.costs {
        writeln!(out, "  {scenario:<9} {cost:.3}")?;
    }
    Ok(())
}
