use std::fs;
use std::path::{Path, PathBuf};

use qsched_core::lqt::{self, DEFAULT_ARE_MAX_ITER, DEFAULT_ARE_TOL};
use qsched_core::scheduler::{self, load_table, save_table};
use qsched_core::sim::{self, compute_metrics, export_trace, run_closed_loop, Controller, Scenario, SimFailure, TraceFormat};
use qsched_core::{Error, PolicyGain, QCoreTable};

use crate::report::{ControllerSummary, OracleNode, RunReport};
use crate::{CliError, Config};

const PI_TOL: f64 = 1e-12;
const PI_MAX_ITER: usize = 200;

/// Trains the full Q-core table and writes it to `out`.
pub fn cmd_train(config: &Config, out: &Path) -> Result<RunReport, CliError> {
    let surface = config.surface()?;
    let training = config.training_setup()?;
    let (table, train) = scheduler::train_table(&config.motor, &surface, &config.weights()?, &training)?;
    save_table(&table, out)?;
    let mut report = RunReport::new("train");
    report.notes.push(format!(
        "table fingerprint {}, worst oracle gap {:.3e}",
        table.motor_fingerprint(),
        train.max_oracle_gap()
    ));
    report.cores = train.cores;
    report.artifacts.push(out.to_path_buf());
    Ok(report)
}

fn load_checked(config: &Config, path: &Path) -> Result<QCoreTable, CliError> {
    let mut table = load_table(path)?;
    let expected = config.motor.fingerprint();
    if table.motor_fingerprint() != expected {
        return Err(Error::ParamsMismatch {
            expected,
            found: table.motor_fingerprint().to_string(),
        }
        .into());
    }
    table.set_online_config(config.online);
    Ok(table)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn write_file(path: PathBuf, text: &str, report: &mut RunReport) -> Result<(), CliError> {
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    report.artifacts.push(path);
    Ok(())
}

/// Runs one scenario; on a safety abort the partial trace is still written.
fn simulate(
    scenario: &Scenario,
    table: Option<&QCoreTable>,
    out_dir: &Path,
    stem: &str,
    format: TraceFormat,
    config: &Config,
    report: &mut RunReport,
) -> Result<Option<sim::Metrics>, CliError> {
    let mut local = table.cloned();
    match run_closed_loop(scenario, local.as_mut()) {
        Ok(trace) => {
            let path = out_dir.join(format!("{stem}.{}", format.extension()));
            export_trace(&trace, &path, format)?;
            report.artifacts.push(path);
            let metrics = match compute_metrics(&trace, scenario, &config.metrics) {
                Ok(m) => Some(m),
                Err(Error::NoConductionWindow) => {
                    report.notes.push(format!("{stem}: no complete conduction window to score"));
                    None
                }
                Err(e) => return Err(e.into()),
            };
            report
                .controllers
                .push(ControllerSummary::new(scenario.controller.name(), metrics.as_ref(), &trace.summary));
            Ok(metrics)
        }
        Err(SimFailure { error, partial }) => {
            let runtime = matches!(error, Error::SafetyBound { .. } | Error::NonFinite(_));
            if !runtime {
                return Err(error.into());
            }
            let written = match partial {
                Some(trace) => {
                    let path = out_dir.join(format!("{stem}_partial.{}", format.extension()));
                    export_trace(&trace, &path, format)?;
                    Some(path)
                }
                None => None,
            };
            Err(CliError::Aborted { error, partial: written })
        }
    }
}

fn needs_table(path: Option<&Path>, controllers: &[Controller], config: &Config) -> Result<Option<QCoreTable>, CliError> {
    if !controllers.iter().any(Controller::needs_table) {
        return Ok(None);
    }
    let path = path.ok_or_else(|| CliError::Config("this controller needs a trained table (--table)".into()))?;
    load_checked(config, path).map(Some)
}

/// Runs the configured scenario and writes the trace, its metrics and the
/// effective configuration into `out_dir`.
pub fn cmd_run(config: &Config, table: Option<&Path>, out_dir: &Path, format: TraceFormat) -> Result<RunReport, CliError> {
    let scenario = config.scenario(config.surface()?)?;
    scenario.validate()?;
    let table = needs_table(table, &[scenario.controller], config)?;
    create_dir(out_dir)?;
    let mut report = RunReport::new("run");
    write_file(out_dir.join("config.toml"), &config.to_toml(), &mut report)?;
    let metrics = simulate(&scenario, table.as_ref(), out_dir, "trace", format, config, &mut report)?;
    let json = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    write_file(out_dir.join("metrics.json"), &json, &mut report)?;
    Ok(report)
}

/// Runs the same scenario under the scheduled Q controller and delta
/// modulation.
pub fn cmd_compare(
    config: &Config,
    table: Option<&Path>,
    out_dir: &Path,
    format: TraceFormat,
) -> Result<RunReport, CliError> {
    let base = config.scenario(config.surface()?)?;
    let band = match base.controller {
        Controller::DeltaModulation { band } => band,
        _ => config.scenario.delta_band,
    };
    let scenarios: Vec<Scenario> = [Controller::ScheduledQ, Controller::DeltaModulation { band }]
        .into_iter()
        .map(|controller| Scenario {
            controller,
            ..base.clone()
        })
        .collect();
    for s in &scenarios {
        s.validate()?;
    }
    let table = needs_table(table, &[Controller::ScheduledQ], config)?;
    create_dir(out_dir)?;
    let mut report = RunReport::new("compare");
    write_file(out_dir.join("config.toml"), &config.to_toml(), &mut report)?;
    let mut all = serde_json::Map::new();
    for s in &scenarios {
        let stem = format!("trace_{}", s.controller.name());
        let m = simulate(s, table.as_ref(), out_dir, &stem, format, config, &mut report)?;
        all.insert(s.controller.name().to_string(), serde_json::to_value(&m).expect("metrics serialize"));
    }
    if let [q, d] = &report.controllers[..] {
        if let (Some(rq), Some(rd)) = (q.ripple_a, d.ripple_a) {
            if rd > 0.0 {
                report.notes.push(format!("ripple ratio scheduled/delta = {:.4}", rq / rd));
            }
        }
    }
    let json = serde_json::to_string_pretty(&all).expect("metrics serialize");
    write_file(out_dir.join("metrics.json"), &json, &mut report)?;
    Ok(report)
}

fn oracle_node(
    config: &Config,
    label: String,
    at: Option<(f64, f64)>,
    inductance: f64,
    k0: &PolicyGain,
) -> Result<OracleNode, CliError> {
    let weights = config.weights()?;
    let model = lqt::frozen_model(&config.motor, inductance, &weights, config.training.gamma)?;
    let p = lqt::are_fixed_point(&model, DEFAULT_ARE_TOL, DEFAULT_ARE_MAX_ITER)?;
    let k = lqt::optimal_gain(&p, &model)?;
    let pi = lqt::policy_iteration_model_based(&model, k0, PI_TOL, PI_MAX_ITER)?;
    Ok(OracleNode {
        label,
        theta_deg: at.map(|a| a.0),
        current_a: at.map(|a| a.1),
        inductance_h: inductance,
        a: model.a_a[(0, 0)],
        b: model.b_b[0],
        p: [p.p[(0, 0)], p.p[(0, 1)], p.p[(1, 1)]],
        gain: [k.k_x(), k.k_r()],
        pi_iterations: pi.iterations,
        pi_gap: pi.gain.distance(&k),
    })
}

/// Riccati and policy-iteration solution at both extreme inductances and
/// at every node of the table grid.
pub fn cmd_oracle(config: &Config) -> Result<RunReport, CliError> {
    let surface = config.surface()?;
    let k0 = PolicyGain::new(config.training.k0[0], config.training.k0[1])?;
    let m = &config.motor;
    let mut report = RunReport::new("oracle");
    report
        .oracle
        .push(oracle_node(config, "aligned".into(), None, m.l_aligned, &k0)?);
    report
        .oracle
        .push(oracle_node(config, "unaligned".into(), None, m.l_unaligned, &k0)?);
    let thetas = config.grid.theta_nodes(m.rotor_pitch);
    let currents = config.grid.current_nodes();
    for (row, &i) in currents.iter().enumerate() {
        for (col, &theta) in thetas.iter().enumerate() {
            let l = surface.inductance_at(theta, i);
            report
                .oracle
                .push(oracle_node(config, format!("[{row},{col}]"), Some((theta, i)), l, &k0)?);
        }
    }
    report.notes.push(format!(
        "aligned = {:.3} mH (maximum inductance), unaligned = {:.3} mH",
        m.l_aligned * 1e3,
        m.l_unaligned * 1e3
    ));
    Ok(report)
}
