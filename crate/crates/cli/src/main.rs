//! `range-pebo`: run scenarios, compare observers on one measurement stream,
//! and sweep a gain.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 invalid input, 3 a run aborted
//! (feature closer than `r_min`, or a non-finite observer state).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::json;

use range_pebo::scenarios::{
    bundled, load_scenario, resolve_gains, run_on_stream, run_scenario, simulate_scenario, GainValue, Mode,
    ObserverKind, ObserverSetup, RunResult, ScenarioConfig, Trace, BUNDLED,
};
use range_pebo::Error;

#[derive(Parser, Debug)]
#[command(name = "range-pebo", version, about = "Bearing-only range and pose observer scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a scenario; writes trace.csv, summary.json and excitation.json.
    Run {
        #[command(flatten)]
        common: Common,
        /// Also write a gnuplot script for the error columns.
        #[arg(long)]
        plot: bool,
    },
    /// Run several observers on one shared measurement stream.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated: gradient, pebo, pebo_unmixed, pv_drem, navigation.
        #[arg(long, value_delimiter = ',', required = true)]
        observers: Vec<String>,
    },
    /// Run a grid over one gain and several seeds; writes sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `key=start:end:count`, a linear grid over a gain.
        #[arg(long)]
        param: String,
        /// Number of seeds per grid point, counted up from the scenario's first seed.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        /// Parallel runs; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// List the bundled scenarios.
    List,
}

#[derive(Args, Debug)]
struct Common {
    /// Scenario file, or the name of a bundled scenario.
    config: String,
    /// Master seed; defaults to the scenario's first seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to $RANGE_PEBO_OUT, then `out`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Set every sensor noise level to zero.
    #[arg(long)]
    noise_free: bool,
}

enum Failure {
    Io(String),
    Invalid(Vec<String>),
    Aborted(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Validation(m) => Failure::Invalid(m),
            Error::Io(e) => Failure::Io(e.to_string()),
            other => Failure::Invalid(vec![other.to_string()]),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn invalid<T>(msg: impl Into<String>) -> Outcome<T> {
    Err(Failure::Invalid(vec![msg.into()]))
}

impl Common {
    fn load(&self) -> Outcome<ScenarioConfig> {
        let path = Path::new(&self.config);
        let text = if path.exists() {
            fs::read_to_string(path)?
        } else if let Some(text) = bundled(&self.config) {
            text.to_string()
        } else {
            return invalid(format!("`{}` is neither a readable file nor a bundled scenario", self.config));
        };
        let config = load_scenario(&text)?;
        Ok(if self.noise_free { config.with_noise_free() } else { config })
    }

    fn seed(&self, config: &ScenarioConfig) -> u64 {
        self.seed.unwrap_or(config.seeds[0])
    }

    fn out_dir(&self) -> Outcome<PathBuf> {
        let dir = self
            .out_dir
            .clone()
            .or_else(|| std::env::var_os("RANGE_PEBO_OUT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"));
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }
}

fn write_trace(trace: &Trace, path: &Path) -> Outcome {
    let file = fs::File::create(path)?;
    trace.write_csv(std::io::BufWriter::new(file))?;
    Ok(())
}

fn write_json(value: &impl serde::Serialize, path: &Path) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Io(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn format_error(e: f64) -> String {
    format!("{e:.3e}")
}

fn print_summary(result: &RunResult) {
    let s = &result.summary;
    println!("{} ({}, seed {}), t = {} s", s.name, s.observer.name(), s.seed, s.final_time);
    for (q, e) in &s.final_error {
        let ttt = s.time_to_tolerance[q].map_or("never".to_string(), |t| format!("{t:.3} s"));
        println!(
            "  {q:>5}: final {}  max after {} s {}  below {} from {ttt}",
            format_error(*e),
            s.t_settle,
            format_error(s.max_error_after_settle[q]),
            s.tolerance
        );
    }
}

fn gnuplot_script(trace: &Trace) -> String {
    let mut script = String::from(
        "set datafile separator ','\nset key autotitle columnhead\nset logscale y\nset xlabel 't [s]'\nset ylabel 'error'\n",
    );
    let plots: Vec<String> = trace
        .columns
        .iter()
        .enumerate()
        .filter(|(_, c)| c.starts_with("err_"))
        .map(|(j, _)| format!("'trace.csv' using 1:{} with lines", j + 1))
        .collect();
    if !plots.is_empty() {
        script.push_str(&format!("plot {}\n", plots.join(", ")));
    }
    script
}

fn cmd_run(common: &Common, plot: bool) -> Outcome {
    let config = common.load()?;
    let seed = common.seed(&config);
    let out = common.out_dir()?;
    let result = run_scenario(&config, seed)?;
    write_trace(&result.trace, &out.join("trace.csv"))?;
    write_json(&result.summary, &out.join("summary.json"))?;
    write_json(&result.excitation, &out.join("excitation.json"))?;
    if plot {
        fs::write(out.join("plot.gp"), gnuplot_script(&result.trace))?;
    }
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    print_summary(&result);
    match &result.summary.abort_reason {
        Some(reason) => Err(Failure::Aborted(reason.clone())),
        None => Ok(()),
    }
}

fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Velocity => "velocity",
        Mode::Acceleration => "acceleration",
    }
}

/// Observers accepted by `compare`, with the PEBO variants spelled out.
fn compare_setup(name: &str, config: &ScenarioConfig) -> Outcome<ObserverSetup> {
    let (kind, unmixed) = match name {
        "pebo_unmixed" => (ObserverKind::Pebo, true),
        other => match ObserverKind::parse(other) {
            Some(k) => (k, false),
            None => {
                return invalid(format!(
                    "unknown observer `{other}` (expected gradient, pebo, pebo_unmixed, pv_drem or navigation)"
                ))
            }
        },
    };
    let mode = config.observer.mode();
    if kind.mode() != mode {
        return invalid(format!(
            "observer `{name}` needs {} measurements but scenario `{}` is in {} mode",
            mode_name(kind.mode()),
            config.name,
            mode_name(mode)
        ));
    }
    let mut setup = resolve_gains(kind, &config.gains, config.features.len(), false).map_err(Failure::Invalid)?;
    if let ObserverSetup::Pebo { gains, .. } = &mut setup {
        if unmixed {
            gains.k_p = 0.0;
        }
    }
    let mut probe = config.clone();
    probe.observer = kind;
    probe.gains.clear();
    probe.outputs.clear();
    probe.validate()?;
    Ok(setup)
}

fn cmd_compare(common: &Common, observers: &[String]) -> Outcome {
    let config = common.load()?;
    let seed = common.seed(&config);
    let setups: Vec<ObserverSetup> = observers.iter().map(|o| compare_setup(o, &config)).collect::<Outcome<_>>()?;
    let out = common.out_dir()?;

    let run = simulate_scenario(&config, seed);
    let mut base = config.clone();
    base.outputs.clear();
    let results: Vec<RunResult> =
        setups.iter().map(|s| run_on_stream(&base, s, &run, seed)).collect::<Result<_, _>>()?;

    let mut columns = vec!["t".to_string()];
    let mut picks = Vec::new();
    for (name, r) in observers.iter().zip(&results) {
        for (j, c) in r.trace.columns.iter().enumerate() {
            if c.starts_with("err_") {
                columns.push(format!("{name}_{c}"));
                picks.push((j, r));
            }
        }
    }
    let rows = (0..results[0].trace.rows.len())
        .map(|i| {
            let mut row = vec![results[0].trace.rows[i][0]];
            row.extend(picks.iter().map(|(j, r)| r.trace.rows.get(i).map_or(f64::NAN, |row| row[*j])));
            row
        })
        .collect();
    write_trace(&Trace { columns, rows }, &out.join("compare.csv"))?;

    let summaries: BTreeMap<&str, _> = observers.iter().map(String::as_str).zip(results.iter().map(|r| &r.summary)).collect();
    write_json(&json!({ "scenario": config.name, "seed": seed, "observers": summaries }), &out.join("compare_summary.json"))?;

    println!("{:<14} {}", "observer", results[0].summary.final_error.keys().map(|q| format!("{q:>11}")).collect::<String>());
    for (name, r) in observers.iter().zip(&results) {
        let cells: String = r.summary.final_error.values().map(|e| format!("{:>11}", format_error(*e))).collect();
        println!("{name:<14} {cells}");
    }
    match results.iter().find_map(|r| r.summary.abort_reason.clone()) {
        Some(reason) => Err(Failure::Aborted(reason)),
        None => Ok(()),
    }
}

fn parse_param(spec: &str) -> Outcome<(String, Vec<f64>)> {
    let bad = || Failure::Invalid(vec![format!("--param must look like key=start:end:count, got `{spec}`")]);
    let (key, range) = spec.split_once('=').ok_or_else(bad)?;
    let parts: Vec<&str> = range.split(':').collect();
    let [a, b, n] = parts.as_slice() else { return Err(bad()) };
    let (a, b): (f64, f64) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
    let n: usize = n.parse().map_err(|_| bad())?;
    if n == 0 || !a.is_finite() || !b.is_finite() {
        return Err(bad());
    }
    let values = (0..n).map(|i| if n == 1 { a } else { a + (b - a) * i as f64 / (n - 1) as f64 }).collect();
    Ok((key.to_string(), values))
}

fn cmd_sweep(common: &Common, param: &str, seeds: usize, jobs: usize) -> Outcome {
    let config = common.load()?;
    let (key, values) = parse_param(param)?;
    if !config.observer.gain_keys().contains(&key.as_str()) {
        return invalid(format!(
            "unknown gain `{key}` for observer `{}` (accepted: {})",
            config.observer.name(),
            config.observer.gain_keys().join(", ")
        ));
    }
    if seeds == 0 {
        return invalid("--seeds must be at least 1");
    }
    let first = common.seed(&config);
    let mut grid = Vec::new();
    for &v in &values {
        let mut c = config.clone();
        c.gains.insert(key.clone(), GainValue::Scalar(v));
        c.validate()?;
        for s in 0..seeds as u64 {
            grid.push((v, first + s, c.clone()));
        }
    }
    let out = common.out_dir()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Failure::Io(format!("thread pool: {e}")))?;
    let results: Vec<Result<RunResult, Error>> =
        pool.install(|| grid.par_iter().map(|(_, seed, c)| run_scenario(c, *seed)).collect());

    let names = config.observer.error_names();
    let mut columns = vec![key.clone(), "seed".to_string()];
    columns.extend(names.iter().map(|q| format!("final_err_{q}")));
    columns.extend(names.iter().map(|q| format!("time_to_tol_{q}")));
    columns.push("aborted".into());
    let mut rows = Vec::new();
    let mut settle: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for ((v, seed, _), r) in grid.iter().zip(results) {
        let r = r?;
        let s = &r.summary;
        let mut row = vec![*v, *seed as f64];
        row.extend(names.iter().map(|q| s.final_error[*q]));
        row.extend(names.iter().map(|q| s.time_to_tolerance[*q].unwrap_or(f64::NAN)));
        row.push(f64::from(u8::from(s.aborted)));
        settle.entry(format!("{v}")).or_default().push(s.time_to_tolerance[names[0]].unwrap_or(f64::INFINITY));
        rows.push(row);
    }
    write_trace(&Trace { columns, rows }, &out.join("sweep.csv"))?;
    println!("{key:>12}  mean time to {} for err_{}", config.tolerance, names[0]);
    for v in &values {
        let ts = &settle[&format!("{v}")];
        println!("{v:>12}  {:.3} s", ts.iter().sum::<f64>() / ts.len() as f64);
    }
    Ok(())
}

fn cmd_list() -> Outcome {
    for (name, text) in BUNDLED {
        let c = load_scenario(text)?;
        println!("{name:<24} {:<10} {} s at dt = {}", c.observer.name(), c.duration, c.dt);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run { common, plot } => cmd_run(common, *plot),
        Command::Compare { common, observers } => cmd_compare(common, observers),
        Command::Sweep { common, param, seeds, jobs } => cmd_sweep(common, param, *seeds, *jobs),
        Command::List => cmd_list(),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Io(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Invalid(msgs)) => {
            eprintln!("invalid input:");
            for m in msgs {
                eprintln!("  - {m}");
            }
            ExitCode::from(2)
        }
        Err(Failure::Aborted(reason)) => {
            eprintln!("run aborted: {reason}");
            ExitCode::from(3)
        }
    }
}
