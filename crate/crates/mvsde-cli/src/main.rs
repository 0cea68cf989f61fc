use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mvsde::distance::PsiFunction;
use mvsde::fpe1d::solve;
use mvsde::model::{check_cc1, check_decomposition, check_lyapunov, grid_probe, ModelConfig, Scenario};
use mvsde::pipeline::{
    certify_scenario, cost_for, fp_problem, granular_puncture, law_probes, particle_marginal, scenario_psi,
};
use mvsde::simulator::{fit_decay, read_curve_csv, run_decay_experiment, CostKind, Coupling};
use mvsde::{Error, Result};

const VERSION: &str = concat!("mvsde-v", env!("CARGO_PKG_VERSION"));

#[derive(Parser)]
#[command(
    name = "mvsde",
    version,
    about = "Contraction rates and coupled simulations for McKean-Vlasov SDEs"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// Builtin scenario name or path to a TOML scenario file.
    #[arg(long, global = true, default_value = "ou")]
    scenario: String,
    /// Master seed, overriding the scenario's.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the scenario's.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print the run report as JSON.
    #[arg(long, global = true)]
    json: bool,
    /// Scenario override, e.g. `--set sim.n=1000`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Certify a contraction rate for the scenario.
    Rate {
        #[arg(long)]
        allow_noncontractive: bool,
        /// Also write the certificate to this path.
        #[arg(long, value_name = "PATH")]
        emit_cert: Option<PathBuf>,
    },
    /// Run a coupled decay experiment and fit its rate.
    Simulate {
        #[arg(long, value_parser = parse_coupling)]
        coupling: Option<Coupling>,
        #[arg(long, value_parser = parse_cost)]
        cost: Option<CostKind>,
        /// Fit window as `t0,t1`.
        #[arg(long, value_parser = parse_window)]
        window: Option<[f64; 2]>,
    },
    /// Fit a decay rate to a curve CSV.
    Fit {
        curve: PathBuf,
        #[arg(long, value_parser = parse_window)]
        window: Option<[f64; 2]>,
        #[arg(long, default_value_t = 1000)]
        resamples: usize,
    },
    /// Probe the structural hypotheses.
    Check {
        /// Comma list from h1, h2, h3, cc1 (default: all that apply).
        #[arg(long, value_delimiter = ',')]
        hypotheses: Vec<String>,
    },
    /// Sample the long-time particle law.
    Stationary {
        #[arg(long, default_value_t = 10.0)]
        burn_in: f64,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Solve the 1D Fokker-Planck equation.
    Fpe {
        /// Also simulate particles to the same time and report their W1 distance.
        #[arg(long)]
        compare: bool,
    },
    /// Write the scenario's distance profile.
    Psi,
}

fn parse_coupling(s: &str) -> std::result::Result<Coupling, String> {
    match s {
        "reflection" => Ok(Coupling::Reflection),
        "synchronous" => Ok(Coupling::Synchronous),
        _ => Err(format!("unknown coupling `{s}` (reflection, synchronous)")),
    }
}

fn parse_cost(s: &str) -> std::result::Result<CostKind, String> {
    match s {
        "psi" => Ok(CostKind::Psi),
        "weighted" => Ok(CostKind::Weighted),
        "phi" => Ok(CostKind::Phi),
        "w1" => Ok(CostKind::W1),
        _ => Err(format!("unknown cost `{s}` (psi, weighted, phi, w1)")),
    }
}

fn parse_window(s: &str) -> std::result::Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').collect();
    let [a, b] = parts.as_slice() else {
        return Err("window must be `t0,t1`".into());
    };
    let a: f64 = a.trim().parse().map_err(|e| format!("{e}"))?;
    let b: f64 = b.trim().parse().map_err(|e| format!("{e}"))?;
    if !a.is_finite() || !b.is_finite() || b <= a {
        return Err("window needs t1 > t0".into());
    }
    Ok([a, b])
}

#[derive(Debug, Serialize)]
struct CheckResult {
    name: String,
    pass: bool,
    detail: serde_json::Value,
}

#[derive(Debug, Serialize)]
struct RunReport {
    scenario: String,
    hash: String,
    seed: u64,
    version: &'static str,
    command: String,
    wall_time_s: f64,
    outputs: Vec<String>,
    checks: Vec<CheckResult>,
}

impl RunReport {
    fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    fn check(&mut self, name: &str, pass: bool, detail: impl Serialize) -> Result<()> {
        let detail = serde_json::to_value(detail).map_err(|e| Error::Parse(e.to_string()))?;
        self.checks.push(CheckResult {
            name: name.into(),
            pass,
            detail,
        });
        Ok(())
    }
}

struct Ctx {
    sc: Scenario,
    out: PathBuf,
    report: RunReport,
}

impl Ctx {
    fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<PathBuf> {
        let path = self.out.join(name);
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(&path, text + "\n")?;
        self.record(&path);
        Ok(path)
    }

    fn record(&mut self, path: &Path) {
        self.report.outputs.push(path.display().to_string());
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        3
    } else if matches!(e, Error::Config(_) | Error::Parse(_) | Error::Io(_)) {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let json = cli.common.json;
    match run(cli) {
        Ok(report) => {
            if json {
                println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            } else {
                for c in &report.checks {
                    println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
                }
                for o in &report.outputs {
                    println!("wrote {o}");
                }
            }
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<RunReport> {
    let start = Instant::now();
    let command: String = std::env::args().collect::<Vec<_>>().join(" ");
    let mut sc = Scenario::load_with(&cli.common.scenario, &cli.common.sets)?;
    if let Some(seed) = cli.common.seed {
        sc.sim.seed = seed;
        sc.validate()?;
    }
    let out = cli.common.out.clone().unwrap_or_else(|| PathBuf::from(&sc.output.dir));
    std::fs::create_dir_all(&out)?;
    let report = RunReport {
        scenario: sc.name.clone(),
        hash: sc.hash()?,
        seed: sc.sim.seed,
        version: VERSION,
        command,
        wall_time_s: 0.0,
        outputs: vec![],
        checks: vec![],
    };
    let mut ctx = Ctx { sc, out, report };
    match cli.cmd {
        Command::Rate {
            allow_noncontractive,
            emit_cert,
        } => cmd_rate(&mut ctx, allow_noncontractive, emit_cert)?,
        Command::Simulate { coupling, cost, window } => cmd_simulate(&mut ctx, coupling, cost, window)?,
        Command::Fit {
            curve,
            window,
            resamples,
        } => cmd_fit(&mut ctx, &curve, window, resamples)?,
        Command::Check { hypotheses } => cmd_check(&mut ctx, &hypotheses)?,
        Command::Stationary { burn_in, samples } => cmd_stationary(&mut ctx, burn_in, samples)?,
        Command::Fpe { compare } => cmd_fpe(&mut ctx, compare)?,
        Command::Psi => cmd_psi(&mut ctx)?,
    }
    ctx.report.wall_time_s = start.elapsed().as_secs_f64();
    let report_path = ctx.out.join("report.json");
    ctx.record(&report_path.clone());
    let text = serde_json::to_string_pretty(&ctx.report).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(&report_path, text + "\n")?;
    Ok(ctx.report)
}

fn cmd_rate(ctx: &mut Ctx, allow: bool, emit: Option<PathBuf>) -> Result<()> {
    let (cert, rows) = certify_scenario(&ctx.sc)?;
    ctx.write_json("certificate.json", &cert)?;
    if let Some(p) = emit {
        let text = serde_json::to_string_pretty(&cert).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(&p, text + "\n")?;
        ctx.record(&p);
    }
    if !rows.is_empty() {
        ctx.write_json("sweep.json", &rows)?;
    }
    let detail = serde_json::json!({
        "theorem_rate": cert.theorem_rate,
        "pipeline": cert.pipeline,
        "allow_noncontractive": allow,
    });
    ctx.report.check("contractive", cert.contractive || allow, detail)
}

fn cmd_simulate(
    ctx: &mut Ctx,
    coupling: Option<Coupling>,
    cost: Option<CostKind>,
    window: Option<[f64; 2]>,
) -> Result<()> {
    if let Some(c) = coupling {
        ctx.sc.sim.coupling = c;
    }
    if let Some(c) = cost {
        ctx.sc.sim.cost = c;
    }
    if window.is_some() {
        ctx.sc.sim.fit_window = window;
    }
    let cost = cost_for(&ctx.sc, ctx.sc.sim.cost)?;
    let curve = run_decay_experiment(&ctx.sc, &cost, ctx.sc.sim.coupling)?;
    let csv = ctx.out.join("decay.csv");
    curve.write_csv(&csv)?;
    ctx.record(&csv);
    let summary = serde_json::json!({
        "fit": curve.fit,
        "fit_error": curve.fit_error,
        "degenerate": curve.degenerate,
        "seed": curve.seed,
        "coupling": curve.coupling,
        "cost": curve.cost,
        "eps_couple": curve.eps_couple,
        "final_coupled": curve.n_coupled.last(),
        "max_order_violations": curve.violations.as_ref().and_then(|v| v.iter().max()),
    });
    ctx.write_json("fit.json", &summary)?;
    let pass = curve.degenerate || curve.fit.is_some();
    ctx.report.check("fit", pass, summary)
}

fn cmd_fit(ctx: &mut Ctx, curve: &Path, window: Option<[f64; 2]>, resamples: usize) -> Result<()> {
    let text = std::fs::read_to_string(curve)?;
    let (t, d) = read_curve_csv(&text)?;
    let last = *t.last().ok_or_else(|| Error::Empty("curve has no rows".into()))?;
    let window = window.unwrap_or([0.25 * last, last]);
    let fit = fit_decay(&t, &d, window, resamples, ctx.sc.sim.seed)?;
    ctx.write_json("fit.json", &fit)?;
    ctx.report.check("fit", true, &fit)
}

fn wants(list: &[String], name: &str) -> bool {
    list.is_empty() || list.iter().any(|h| h.eq_ignore_ascii_case(name))
}

fn cmd_check(ctx: &mut Ctx, hyps: &[String]) -> Result<()> {
    for h in hyps {
        if !["h1", "h2", "h3", "cc1"].contains(&h.to_ascii_lowercase().as_str()) {
            return Err(Error::Config(format!("unknown hypothesis `{h}` (h1, h2, h3, cc1)")));
        }
    }
    let sc = ctx.sc.clone();
    let c = sc.coefficients();
    let d = sc.dim();
    let per_axis = match d {
        1 => 801,
        2 => 61,
        _ => 11,
    };
    let r = sc.rates.probe_radius;
    let probe = grid_probe(d, -r, r, per_axis);
    if wants(hyps, "h1") {
        match &c.lyapunov {
            Some(spec) => {
                let rep = check_lyapunov(&c, spec, &probe, &law_probes(&sc))?;
                ctx.report.check("h1", rep.holds(), &rep)?;
            }
            None if !hyps.is_empty() => {
                ctx.report.check("h1", false, "family has no Lyapunov function")?;
            }
            None => {}
        }
    }
    if wants(hyps, "h2") {
        let rep = check_decomposition(&c, &probe)?;
        ctx.report.check("h2", rep.psd, &rep)?;
    }
    let granular = match &sc.model {
        ModelConfig::Granular(p) => Some(p.clone()),
        _ => None,
    };
    if wants(hyps, "h3") {
        match &granular {
            Some(p) => {
                let punct = granular_puncture(&sc, p);
                let bound = 4.0 * p.lambda0();
                let g = p.gamma_spec(punct.kappa);
                let integrable = g.validate();
                let detail = serde_json::json!({
                    "kappa": punct.kappa,
                    "four_lambda0": bound,
                    "unbounded": punct.unbounded,
                    "witness_x": punct.witness_x,
                    "witness_v": punct.witness_v,
                    "integrability": integrable.as_ref().err().map(|e| e.to_string()),
                });
                let pass = !punct.unbounded && punct.kappa <= bound + 1e-6 && integrable.is_ok();
                ctx.report.check("h3", pass, detail)?;
            }
            None if !hyps.is_empty() => {
                ctx.report
                    .check("h3", false, "puncture check needs the granular family")?;
            }
            None => {}
        }
    }
    if wants(hyps, "cc1") {
        match &granular {
            Some(p) => {
                let (g, w) = p.potentials();
                let pts = grid_probe(d, -r, r, per_axis.min(61));
                let zs = grid_probe(d, -r, r, 9);
                let pairs: Vec<(Vec<f64>, Vec<f64>)> = pts
                    .chunks(d)
                    .flat_map(|x| zs.chunks(d).map(move |z| (x.to_vec(), z.to_vec())))
                    .collect();
                let rep = check_cc1(&g, &w, d, p.lambda0(), p.theta1(), p.theta2, &pairs)?;
                ctx.report.check("cc1", rep.pass, &rep)?;
            }
            None if !hyps.is_empty() => {
                ctx.report.check("cc1", false, "CC1 applies to the granular family")?;
            }
            None => {}
        }
    }
    let checks = serde_json::to_value(&ctx.report.checks).map_err(|e| Error::Parse(e.to_string()))?;
    ctx.write_json("checks.json", &checks)?;
    Ok(())
}

fn write_samples(path: &Path, samples: &[f64], d: usize) -> Result<()> {
    let mut s = String::new();
    let header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    s.push_str(&header.join(","));
    s.push('\n');
    for row in samples.chunks(d) {
        let cols: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        s.push_str(&cols.join(","));
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

fn cmd_stationary(ctx: &mut Ctx, burn_in: f64, samples: Option<usize>) -> Result<()> {
    let n = samples.unwrap_or(ctx.sc.sim.n);
    let xs = mvsde::simulator::estimate_stationary(&ctx.sc, burn_in, n)?;
    let d = ctx.sc.dim();
    let path = ctx.out.join("stationary.csv");
    write_samples(&path, &xs, d)?;
    ctx.record(&path);
    let mean: Vec<f64> = (0..d)
        .map(|k| xs.iter().skip(k).step_by(d).sum::<f64>() / n as f64)
        .collect();
    ctx.report.check(
        "samples",
        true,
        serde_json::json!({ "n": n, "burn_in": burn_in, "mean": mean }),
    )
}

fn cmd_fpe(ctx: &mut Ctx, compare: bool) -> Result<()> {
    let (mut grid, cfg) = fp_problem(&ctx.sc)?;
    let every = ctx.sc.fpe.as_ref().map_or(0, |f| f.record_every);
    let snapshots = ctx.sc.output.snapshots && every > 0;
    let dir = ctx.out.clone();
    let mut written = Vec::new();
    let rep = solve(&mut grid, &cfg, |k, g| {
        if snapshots && k % every as u64 == 0 {
            let p = dir.join(format!("rho_{k:08}.csv"));
            g.write_csv(&p)?;
            written.push(p);
        }
        Ok(())
    })?;
    for p in written {
        ctx.record(&p);
    }
    let final_path = ctx.out.join("rho_final.csv");
    grid.write_csv(&final_path)?;
    ctx.record(&final_path);
    ctx.write_json("fpe.json", &rep)?;
    let pass = rep.mass_error <= 1e-12 && rep.min_rho >= mvsde::fpe1d::NEGATIVE_TOL;
    ctx.report.check("conservation", pass, &rep)?;
    if rep.truncated {
        ctx.report
            .check("domain", false, "mass reached the boundary cells; widen the domain")?;
    }
    if compare {
        let samples = particle_marginal(&ctx.sc)?;
        let w1 = mvsde::fpe1d::compare_particle_pde(&samples, &grid)?;
        ctx.report
            .check("particle_w1", true, serde_json::json!({ "w1": w1, "n": samples.len() }))?;
    }
    Ok(())
}

fn cmd_psi(ctx: &mut Ctx) -> Result<()> {
    let psi: PsiFunction = scenario_psi(&ctx.sc)?;
    let path = ctx.out.join("psi.csv");
    psi.write_csv(&path)?;
    ctx.record(&path);
    let detail = serde_json::json!({
        "shape": psi.shape,
        "l": psi.l,
        "concave": psi.concave,
        "c_psi": psi.c_psi,
        "sup_deriv": psi.sup_deriv,
    });
    ctx.report.check("psi", true, detail)
}
