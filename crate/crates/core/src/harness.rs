//! Experiment orchestration: one command, one config, CSV files out.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::analysis::{decay_fit, power_fit, random_operator, trace_commutator_defect};
use crate::betti::{finite_cover_betti, floquet_betti, morse_inequality_eval, BettiReport, FloquetOptions, LedgerOptions};
use crate::calculus::{calculus_trace, poly_calculus, CalculusOptions, SpectralFunction};
use crate::complex::{assemble_cover_capped, build_base, BaseComplex, CoverComplex};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::group::GroupKind;
use crate::morse::{witten_laplacian, CellFunction, DiscreteMorseData};
use crate::rng::{stream, Stream};
use crate::stats::format_real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    OracleBetti,
    HeatTrace,
    MorseVerify,
    TraceProps,
    DecayFit,
}

impl Command {
    pub const ALL: [Command; 5] =
        [Command::OracleBetti, Command::HeatTrace, Command::MorseVerify, Command::TraceProps, Command::DecayFit];

    pub fn name(&self) -> &'static str {
        match self {
            Command::OracleBetti => "oracle-betti",
            Command::HeatTrace => "heat-trace",
            Command::MorseVerify => "morse-verify",
            Command::TraceProps => "trace-props",
            Command::DecayFit => "decay-fit",
        }
    }

    pub fn output_file(&self) -> &'static str {
        match self {
            Command::OracleBetti => "betti.csv",
            Command::HeatTrace => "traces.csv",
            Command::MorseVerify => "ledger.csv",
            Command::TraceProps => "defects.csv",
            Command::DecayFit => "decay.csv",
        }
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Precondition(format!("unknown command `{s}`")))
    }
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub pass: bool,
    pub file: PathBuf,
    pub summary: Vec<String>,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.pass {
            0
        } else {
            2
        }
    }
}

pub fn build_configured_base(cfg: &ExperimentConfig) -> Result<BaseComplex> {
    let mut base = build_base(&cfg.complex.base)?;
    for (k, w) in cfg.complex.weights.iter().enumerate() {
        if let Some(w) = w {
            if k > base.dim() {
                return Err(Error::Precondition(format!("complex.weights{k} given for a {}-dimensional base", base.dim())));
            }
            base.set_weights(k, w.clone())?;
        }
    }
    Ok(base)
}

pub fn build_cover(cfg: &ExperimentConfig) -> Result<CoverComplex> {
    let base = build_configured_base(cfg)?;
    assemble_cover_capped(&base, cfg.group, cfg.run.window_radius, cfg.run.max_cells)
}

/// Floquet for lattices, finite-cover ranks for cyclic groups.
pub fn oracle_betti(base: &BaseComplex, cfg: &ExperimentConfig) -> Result<BettiReport> {
    match cfg.group.kind() {
        GroupKind::Lattice { .. } => {
            let opts = FloquetOptions { samples: cfg.run.samples, ker_tol: cfg.run.ker_tol, seed: cfg.run.seed, deformation: None };
            floquet_betti(base, &cfg.group, &opts)
        }
        GroupKind::Cyclic { order } => finite_cover_betti(base, order, cfg.run.rank_tol, None),
    }
}

/// The largest deformation parameter of the run (0 when none is given).
fn ledger_t(cfg: &ExperimentConfig) -> f64 {
    cfg.run.t_list.iter().copied().fold(0.0, f64::max)
}

/// Runs `command` and writes its CSV into `out` (or the configured output
/// directory).
pub fn run_experiment(cfg: &ExperimentConfig, command: Command, out: Option<&Path>) -> Result<Outcome> {
    let (csv, pass, summary) = match command {
        Command::OracleBetti => run_oracle(cfg)?,
        Command::HeatTrace => run_heat(cfg)?,
        Command::MorseVerify => run_morse(cfg)?,
        Command::TraceProps => run_trace_props(cfg)?,
        Command::DecayFit => run_decay(cfg)?,
    };
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.run.output.clone());
    fs::create_dir_all(&dir)?;
    let file = dir.join(command.output_file());
    fs::write(&file, csv)?;
    Ok(Outcome { pass, file, summary })
}

type Run = (String, bool, Vec<String>);

fn run_oracle(cfg: &ExperimentConfig) -> Result<Run> {
    let base = build_configured_base(cfg)?;
    let report = oracle_betti(&base, cfg)?;
    let chi = base.euler_characteristic() as f64;
    let pass = (report.euler() - chi).abs() <= 1e-9;
    let mut summary = vec![format!("{} Betti numbers {:?}; Euler {} vs chi {chi}", report.method.tag(), report.values, report.euler())];
    if report.disagreements.iter().any(|d| *d > 0) {
        summary.push(format!("samples disagreeing with the generic count, per degree: {:?}", report.disagreements));
    }
    Ok((report.to_csv(), pass, summary))
}

fn run_heat(cfg: &ExperimentConfig) -> Result<Run> {
    let cover = build_cover(cfg)?;
    let morse = DiscreteMorseData::new(&cover, &cfg.morse.pattern, cfg.morse.options)?;
    let f = morse.function();
    let chi = cover.base().euler_characteristic() as f64;
    let opts = CalculusOptions::default();
    let mut csv = String::from("g,degree,s,t,trace\n");
    let mut pass = true;
    let mut summary = Vec::new();
    let dims: f64 = cover.base().counts().iter().sum::<usize>() as f64;
    for &t in &cfg.run.t_list {
        let traces = (0..=cover.dim())
            .map(|k| Ok(calculus_trace(&witten_laplacian(&cover, f, k, t)?, SpectralFunction::Heat { s: cfg.run.s }, cfg.run.cheb_eps, &opts)?.0))
            .collect::<Result<Vec<_>>>()?;
        for (k, tr) in traces.iter().enumerate() {
            for (g, v) in tr.points() {
                let _ = writeln!(csv, "{g},{k},{},{},{}", format_real(cfg.run.s), format_real(t), format_real(v));
            }
        }
        if f.is_invariant() || t == 0.0 {
            // Per-tile McKean-Singer: the supertrace is the Euler characteristic.
            let slack = cfg.run.tol + cfg.run.cheb_eps * dims;
            let mut worst: f64 = 0.0;
            for (g, _) in traces[0].points() {
                if traces.iter().all(|tr| tr.covers(g)) {
                    let st: f64 = traces.iter().enumerate().map(|(k, tr)| if k % 2 == 0 { tr.eval(g) } else { -tr.eval(g) }).sum();
                    worst = worst.max((st - chi).abs());
                }
            }
            pass &= worst <= slack;
            summary.push(format!("t = {t}: max per-tile |supertrace - chi| = {worst:.3e} (allowed {slack:.1e})"));
        }
    }
    Ok((csv, pass, summary))
}

fn run_morse(cfg: &ExperimentConfig) -> Result<Run> {
    let cover = build_cover(cfg)?;
    let morse = DiscreteMorseData::new(&cover, &cfg.morse.pattern, cfg.morse.options)?;
    let betti = oracle_betti(cover.base(), cfg)?;
    let opts = LedgerOptions {
        s: cfg.run.s,
        t: ledger_t(cfg),
        folner: cfg.run.folner_kmin..=cfg.run.folner_kmax,
        tol: cfg.run.tol,
        eps: cfg.run.cheb_eps,
    };
    let ledger = morse_inequality_eval(&cover, &morse, &betti, &opts)?;
    let failing = ledger.rows.iter().filter(|r| !r.pass).count();
    let mut summary = vec![format!(
        "b^(2) = {:?} ({}); {} ledger rows, {failing} failing; heat analog at s = {}, t = {}",
        betti.values,
        betti.method.tag(),
        ledger.rows.len(),
        opts.s,
        opts.t
    )];
    for (k, rate) in ledger.decay_rates.iter().enumerate() {
        if let Some(r) = rate {
            summary.push(format!("degree {k}: defect decay exponent {r:.3}"));
        }
    }
    Ok((ledger.to_csv(), ledger.pass, summary))
}

fn run_trace_props(cfg: &ExperimentConfig) -> Result<Run> {
    let cover = build_cover(cfg)?;
    let window = cover.window().clone();
    let space = cover.total_space().clone();
    let mut rng = stream(cfg.run.seed, Stream::RandomOperators);
    let range = cfg.run.folner_kmin..=cfg.run.folner_kmax;
    let mut csv = String::from("pair,folner_k,defect,bound,norm_product\n");
    let mut within = true;
    let mut mean_abs = vec![0.0; range.clone().count()];
    let mut mean_norm = 0.0;
    for pair in 0..cfg.run.pairs {
        let a = random_operator(&window, &space, &space, cfg.run.op_radius, &mut rng);
        let b = random_operator(&window, &space, &space, cfg.run.op_radius, &mut rng);
        let rep = trace_commutator_defect(&a, &b, range.clone())?;
        let norm = rep.norm_a * rep.norm_b;
        mean_norm += norm / cfg.run.pairs as f64;
        for (i, r) in rep.rows.iter().enumerate() {
            within &= r.average.abs() <= r.bound + 1e-9 * norm;
            mean_abs[i] += r.average.abs() / cfg.run.pairs as f64;
            let _ = writeln!(csv, "{pair},{},{},{},{}", r.k, format_real(r.average), format_real(r.bound), format_real(norm));
        }
    }
    for (k, m) in range.clone().zip(&mean_abs) {
        let _ = writeln!(csv, "mean_abs,{k},{},,{}", format_real(*m), format_real(mean_norm));
    }
    let mut summary = vec![format!("{} pairs, every defect within its boundary bound: {within}", cfg.run.pairs)];
    let last = *mean_abs.last().unwrap_or(&0.0);
    let small = last <= 1e-2 * mean_norm;
    summary.push(format!("mean |defect| at F_{} = {last:.3e} vs 1e-2 ||A|| ||B|| = {:.3e}", cfg.run.folner_kmax, 1e-2 * mean_norm));
    let decays = match cfg.group.kind() {
        GroupKind::Cyclic { .. } => true,
        GroupKind::Lattice { .. } => {
            let pts: Vec<(f64, f64)> = range.zip(&mean_abs).map(|(k, m)| ((2 * k + 1) as f64, *m)).collect();
            match power_fit(&pts) {
                Some(fit) => {
                    summary.push(format!("log-log fit of mean |defect|: slope {:.3}, R^2 {:.4}, C {:.3e}", fit.slope, fit.r2, fit.envelope));
                    fit.r2 >= 0.95 && fit.slope <= -0.9
                }
                None => false,
            }
        }
    };
    Ok((csv, within && small && decays, summary))
}

fn run_decay(cfg: &ExperimentConfig) -> Result<Run> {
    let cover = build_cover(cfg)?;
    let morse = DiscreteMorseData::new(&cover, &cfg.morse.pattern, cfg.morse.options)?;
    let f: &CellFunction = morse.function();
    let mut csv = String::from("degree,t,distance,max_entry,log_c1,c2,r2,gaussian\n");
    let mut pass = true;
    let mut summary = Vec::new();
    for &t in &cfg.run.t_list {
        for k in 0..=cover.dim() {
            let lap = witten_laplacian(&cover, f, k, t)?;
            let copts = CalculusOptions { spectral_bound: None, required_margin: Some(0) };
            let (heat, series) = poly_calculus(&lap, SpectralFunction::Heat { s: cfg.run.s }, cfg.run.cheb_eps, &copts)?;
            let fit = decay_fit(&heat)?;
            pass &= fit.gaussian_class;
            summary.push(format!(
                "degree {k}, t = {t}: polynomial degree {}, c2 = {:.4}, R^2 = {:.4}",
                series.degree(),
                fit.c2,
                fit.r2
            ));
            for (d, m) in &fit.profile {
                let _ = writeln!(
                    csv,
                    "{k},{},{d},{},{},{},{},{}",
                    format_real(t),
                    format_real(*m),
                    format_real(fit.log_c1),
                    format_real(fit.c2),
                    format_real(fit.r2),
                    fit.gaussian_class
                );
            }
        }
    }
    Ok((csv, pass, summary))
}
