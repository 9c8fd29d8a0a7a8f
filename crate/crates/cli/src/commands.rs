//! The five subcommands. Each returns the exit status; reports go to `out`.

use std::io::Write;

use compound_forms::accomplex::{calibrate, run_corpus, verdict, ResidualRow};
use compound_forms::checks::{
    adjointness_suite, gradient_suite, oracle_suite, star_suite, wedge_suite, Fault, SuiteReport,
};
use compound_forms::geometry::MIN_RESOLUTION;
use compound_forms::operator::{structure_residual, OperatorError};
use compound_forms::{flow_step, nijenhuis, ACStructure, FlowState};

use crate::config::{InitialData, RunConfig};
use crate::output::{flow_csv, residual_csv, write_atomic};
use crate::{CliError, Command, Exit, FaultName, Overrides};

pub fn dispatch(
    command: Command,
    cfg: &RunConfig,
    overrides: &Overrides,
    out: &mut dyn Write,
) -> Result<Exit, CliError> {
    check_params(cfg)?;
    match command {
        Command::Validate => validate(cfg, out),
        Command::Check => check(cfg, overrides, out),
        Command::Residual => residual(cfg, out),
        Command::GradCheck => grad_check(cfg, out),
        Command::Flow => flow(cfg, out),
    }
}

fn check_params(cfg: &RunConfig) -> Result<(), CliError> {
    let p = &cfg.params;
    if let Some(h) = p.step_size {
        if !(h > 0.0 && h.is_finite()) {
            return Err(CliError::Precondition(format!("step size {h} must be positive")));
        }
    }
    if let Some(t) = p.tolerance {
        if !(t > 0.0 && t.is_finite()) {
            return Err(CliError::Precondition(format!("tolerance {t} must be positive")));
        }
    }
    if p.samples == 0 {
        return Err(CliError::Precondition("samples must be at least 1".into()));
    }
    Ok(())
}

fn say(out: &mut dyn Write, text: impl std::fmt::Display) -> Result<(), CliError> {
    write!(out, "{text}").map_err(|source| CliError::Io {
        path: "<stdout>".into(),
        source,
    })
}

fn run_err(e: impl std::fmt::Display) -> CliError {
    CliError::Run(e.to_string())
}

fn emit(cfg: &RunConfig, bytes: &[u8], out: &mut dyn Write) -> Result<(), CliError> {
    match &cfg.params.out {
        Some(path) => {
            write_atomic(path, bytes)?;
            say(out, format_args!("wrote {}\n", path.display()))
        }
        None => out.write_all(bytes).map_err(|source| CliError::Io {
            path: "<stdout>".into(),
            source,
        }),
    }
}

pub fn validate(cfg: &RunConfig, out: &mut dyn Write) -> Result<Exit, CliError> {
    let setup = cfg.build()?;
    let spec = &setup.spec;
    let mut ok = spec.is_valid();
    say(out, spec.report())?;
    let n = setup.manifold.dim();
    for l in 0..=n {
        let [q1, q2, q3] = spec.q_degrees(l);
        say(out, format_args!("  q(l={l}): a1 -> {q1}, a2 -> {q2}, a3 -> {q3}\n"))?;
    }
    if let Some(zero) = &cfg.params.subdomain.zero_degrees {
        let k = spec.k();
        let pass = !zero.contains(&k);
        ok &= pass;
        say(out, format_args!("{} structure degree {k} is not zeroed\n", mark(pass)))?;
        for d in setup.required_zero_degrees() {
            let pass = zero.contains(&d);
            ok &= pass;
            say(out, format_args!("{} degree {d} is zeroed\n", mark(pass)))?;
        }
    }
    Ok(if ok { Exit::Success } else { Exit::Failed })
}

fn mark(pass: bool) -> &'static str {
    if pass {
        "pass"
    } else {
        "FAIL"
    }
}

pub fn check(cfg: &RunConfig, overrides: &Overrides, out: &mut dyn Write) -> Result<Exit, CliError> {
    if let Some(&r) = cfg.manifold.resolution.iter().min() {
        if r < MIN_RESOLUTION {
            return Err(CliError::Precondition(format!(
                "resolution {r} is below the stencil minimum {MIN_RESOLUTION}"
            )));
        }
    }
    let setup = cfg.build()?;
    let fault = match overrides.inject_fault {
        Some(FaultName::BrokenAdjoint) => Fault::BrokenAdjoint,
        None => Fault::None,
    };
    let (m, e, seed) = (&setup.manifold, &setup.bundle, cfg.seed);
    let mut reports = vec![
        adjointness_suite(e, m, setup.spec.k(), seed, fault),
        star_suite(e, m, seed),
        wedge_suite(m, seed),
        grad_suite(cfg, &setup),
    ];
    if setup.almost_complex {
        reports.push(oracle_suite(
            &[m.dim()],
            m.resolution()[0],
            cfg.params.oracle_seeds,
            cfg.params.oracle_amplitude,
        ));
    }
    for r in &reports {
        say(out, r)?;
    }
    Ok(if reports.iter().all(SuiteReport::passed) {
        Exit::Success
    } else {
        Exit::Failed
    })
}

fn grad_suite(cfg: &RunConfig, setup: &crate::Setup) -> SuiteReport {
    let mut report = gradient_suite(&setup.spec, cfg.seed, cfg.params.samples);
    if let Some(t) = cfg.params.tolerance {
        for m in &mut report.measurements {
            m.tolerance = t;
        }
    }
    report
}

pub fn grad_check(cfg: &RunConfig, out: &mut dyn Write) -> Result<Exit, CliError> {
    let setup = cfg.build()?;
    let report = grad_suite(cfg, &setup);
    say(out, &report)?;
    Ok(if report.passed() { Exit::Success } else { Exit::Failed })
}

pub fn residual(cfg: &RunConfig, out: &mut dyn Write) -> Result<Exit, CliError> {
    if !cfg.params.corpus.is_empty() {
        let rows = run_corpus(&cfg.params.corpus).map_err(run_err)?;
        emit(cfg, &residual_csv(&rows), out)?;
        return Ok(Exit::Success);
    }
    let setup = cfg.build()?;
    let gamma = setup.initial(&cfg.initial, cfg.seed)?;
    let p_norm = structure_residual(&setup.spec, &gamma).map_err(run_err)?.l2_norm();
    let structure = gamma.part(setup.spec.k()).cloned().map(ACStructure::new);
    let Some(Ok(j)) = structure.filter(|_| setup.almost_complex) else {
        say(out, format_args!("P_norm {p_norm:e}\n"))?;
        return Ok(Exit::Success);
    };
    let n_norm = nijenhuis(&j).map_err(run_err)?.l2_norm();
    let amplitude = match cfg.initial {
        InitialData::RandomJ { amplitude } => amplitude,
        _ => cfg.params.oracle_amplitude,
    };
    let calibration = calibrate(&setup.manifold, amplitude).map_err(run_err)?;
    let row = ResidualRow {
        seed: cfg.seed,
        resolution: setup.manifold.resolution()[0],
        p_norm,
        n_norm,
        verdict: verdict(p_norm, n_norm, &calibration),
    };
    if cfg.params.out.is_some() {
        emit(cfg, &residual_csv(&[row]), out)?;
    }
    say(
        out,
        format_args!(
            "P_norm {:e}  N_norm {:e}  floors ({:e}, {:e})  verdict {}\n",
            row.p_norm,
            row.n_norm,
            calibration.p_floor(),
            calibration.n_floor(),
            row.verdict
        ),
    )?;
    Ok(Exit::Success)
}

pub fn flow(cfg: &RunConfig, out: &mut dyn Write) -> Result<Exit, CliError> {
    if cfg.params.steps == 0 {
        return Err(CliError::Precondition("steps must be at least 1".into()));
    }
    let setup = cfg.build()?;
    let sub = setup.subdomain(&cfg.params.subdomain)?;
    let gamma = setup.initial(&cfg.initial, cfg.seed)?;
    let mut state = match FlowState::start(&setup.spec, &sub, gamma, cfg.params.step_size) {
        Ok(s) => s,
        Err(OperatorError::BlowUp { .. }) => {
            say(out, "blow-up: initial data has non-finite energy\n")?;
            return Ok(Exit::BlowUp);
        }
        Err(e) => return Err(run_err(e)),
    };
    for _ in 0..cfg.params.steps {
        match flow_step(&state, &setup.spec, &sub) {
            Ok(next) => state = next,
            Err(OperatorError::BlowUp { step }) => {
                emit(cfg, &flow_csv(&state.history), out)?;
                say(
                    out,
                    format_args!("blow-up at step {step}; last good step {}\n", state.last().step),
                )?;
                return Ok(Exit::BlowUp);
            }
            Err(e) => return Err(run_err(e)),
        }
    }
    emit(cfg, &flow_csv(&state.history), out)?;
    Ok(Exit::Success)
}
