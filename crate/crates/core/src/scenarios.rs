//! Declarative scenarios: a JSON document binds a trajectory, sensors, one
//! observer and its gains. [`load_scenario`] validates the document and reports
//! every problem at once; [`run_scenario`] simulates and runs the observer and
//! returns a trace, summary metrics and an excitation report.
//!
//! Gains are a flat map from name to number (or list of numbers for vector
//! initial conditions). Each observer accepts a fixed set of keys:
//!
//! | observer     | keys (default)                                                                        |
//! |--------------|---------------------------------------------------------------------------------------|
//! | `gradient`   | `alpha` (1), `gamma` (50), `r_hat0` (0)                                               |
//! | `pebo`       | `alpha` (1), `gamma` (50), `k_p` (1), `theta0` (0), `zeta0` (0), `gradient_flow` (0)   |
//! | `pv_drem`    | `alpha` (2), `gamma` (100), `rho` (0.4), `k_p` (500), `theta0` ([0,…,0,10]), `delta_scaling` (0) |
//! | `navigation` | `alpha` (1), `gamma` (100), `rho` (0.4), `k_p` (1000), `theta0` ([0,…,0,10]), `delta_scaling` (0), `k_i` (1), `sigma_i` (1), `x_hat0` ([0,0,0]), `qc0` ([0,0,0], rotation vector) |
//!
//! `delta_scaling` is `0` for `Δ = det Φ` and `1` for Frobenius rescaling.
//! `k_i` and `sigma_i` take a scalar (applied to every pair or landmark) or a
//! list.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::excitation::{excitation_report, ExcitationReport, DEFAULT_IE_THRESHOLD};
use crate::lie3::{Rot3, Vec3};
use crate::observers::{
    DeltaScaling, DremGains, GradientObserver, NavObserverState, NavigationObserver, PeboGains, PeboObserver,
    PositionVelocityObserver,
};
use crate::ode::Samples;
use crate::regression::{check_landmark_geometry, AccelInput, Layout, VelocityInput};
use crate::simulator::{
    simulate, Measurement, NoiseSpec, RobotTruth, SimulationRun, SimulationSpec, TrajectorySpec,
    DEFAULT_R_MIN, GRAVITY,
};

/// Scenarios shipped with the crate, as `(name, JSON text)`.
pub const BUNDLED: &[(&str, &str)] = &[
    ("pe_gradient", include_str!("../scenarios/pe_gradient.json")),
    ("pe_pebo", include_str!("../scenarios/pe_pebo.json")),
    ("ie_gradient", include_str!("../scenarios/ie_gradient.json")),
    ("ie_pebo", include_str!("../scenarios/ie_pebo.json")),
    ("pv_drem", include_str!("../scenarios/pv_drem.json")),
    ("nav", include_str!("../scenarios/nav.json")),
];

/// Text of a bundled scenario.
pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

/// Condition numbers of `Ψ` above this are reported as warnings.
pub const PSI_CONDITION_WARNING: f64 = 1e8;

/// Which measurements an observer consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Bearings, gyro and body-frame velocity.
    Velocity,
    /// Bearings, gyro and biased accelerometer.
    Acceleration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObserverKind {
    Gradient,
    Pebo,
    PvDrem,
    Navigation,
}

impl ObserverKind {
    pub const ALL: [ObserverKind; 4] =
        [ObserverKind::Gradient, ObserverKind::Pebo, ObserverKind::PvDrem, ObserverKind::Navigation];

    pub fn name(&self) -> &'static str {
        match self {
            ObserverKind::Gradient => "gradient",
            ObserverKind::Pebo => "pebo",
            ObserverKind::PvDrem => "pv_drem",
            ObserverKind::Navigation => "navigation",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn mode(&self) -> Mode {
        match self {
            ObserverKind::Gradient | ObserverKind::Pebo => Mode::Velocity,
            ObserverKind::PvDrem | ObserverKind::Navigation => Mode::Acceleration,
        }
    }

    /// Gain keys this observer accepts.
    pub fn gain_keys(&self) -> &'static [&'static str] {
        match self {
            ObserverKind::Gradient => &["alpha", "gamma", "r_hat0"],
            ObserverKind::Pebo => &["alpha", "gamma", "k_p", "theta0", "zeta0", "gradient_flow"],
            ObserverKind::PvDrem => &["alpha", "gamma", "rho", "k_p", "theta0", "delta_scaling"],
            ObserverKind::Navigation => {
                &["alpha", "gamma", "rho", "k_p", "theta0", "delta_scaling", "k_i", "sigma_i", "x_hat0", "qc0"]
            }
        }
    }

    /// Names of the per-quantity errors reported in summaries.
    pub fn error_names(&self) -> &'static [&'static str] {
        match self {
            ObserverKind::Gradient | ObserverKind::Pebo => &["z", "r"],
            ObserverKind::PvDrem => &["z", "v", "bias"],
            ObserverKind::Navigation => &["z", "v", "bias", "R", "x"],
        }
    }
}

/// A gain value: a number or a list of numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GainValue {
    Scalar(f64),
    List(Vec<f64>),
}

/// A validated scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub trajectory: TrajectorySpec,
    pub duration: f64,
    pub dt: f64,
    pub noise: NoiseSpec,
    pub bias: [f64; 3],
    /// Inertial feature (landmark) positions `ᴵz_i`.
    pub features: Vec<[f64; 3]>,
    pub observer: ObserverKind,
    pub gains: BTreeMap<String, GainValue>,
    pub seeds: Vec<u64>,
    /// Trace columns to keep besides `t`; empty keeps all.
    pub outputs: Vec<String>,
    pub r_min: f64,
    pub gravity: f64,
    /// Record every `trace_stride`-th step (the last step is always recorded).
    pub trace_stride: usize,
    /// Error level for time-to-tolerance.
    pub tolerance: f64,
    /// Start of the window for the max-error-after-settling metric.
    pub t_settle: f64,
    pub pe_window: f64,
    pub ie_threshold: f64,
}

const TOP_LEVEL_KEYS: &[&str] = &[
    "name",
    "trajectory",
    "duration",
    "dt",
    "noise",
    "bias",
    "features",
    "observer",
    "gains",
    "seeds",
    "outputs",
    "r_min",
    "gravity",
    "trace_stride",
    "tolerance",
    "t_settle",
    "pe_window",
    "ie_threshold",
];

/// Parses and validates a scenario. All problems are collected into one
/// [`Error::Validation`].
pub fn load_scenario(text: &str) -> Result<ScenarioConfig> {
    let doc: Value = serde_json::from_str(text).map_err(|e| Error::Validation(vec![format!("malformed JSON: {e}")]))?;
    let Value::Object(map) = doc else {
        return Err(Error::Validation(vec!["scenario must be a JSON object".into()]));
    };
    let mut errors = Vec::new();
    for key in map.keys() {
        if !TOP_LEVEL_KEYS.contains(&key.as_str()) {
            errors.push(format!("unknown field `{key}`"));
        }
    }

    let mut field = |key: &str, required: bool| -> Option<&Value> {
        let v = map.get(key);
        if v.is_none() && required {
            errors.push(format!("missing field `{key}`"));
        }
        v
    };
    let name = field("name", true).cloned();
    let trajectory = field("trajectory", true).cloned();
    let duration = field("duration", true).cloned();
    let dt = field("dt", true).cloned();
    let noise = field("noise", false).cloned();
    let bias = field("bias", false).cloned();
    let features = field("features", true).cloned();
    let observer = field("observer", true).cloned();
    let gains = field("gains", false).cloned();
    let seeds = field("seeds", false).cloned();
    let outputs = field("outputs", false).cloned();
    let r_min = field("r_min", false).cloned();
    let gravity = field("gravity", false).cloned();
    let trace_stride = field("trace_stride", false).cloned();
    let tolerance = field("tolerance", false).cloned();
    let t_settle = field("t_settle", false).cloned();
    let pe_window = field("pe_window", false).cloned();
    let ie_threshold = field("ie_threshold", false).cloned();

    fn parse<T: serde::de::DeserializeOwned>(
        errors: &mut Vec<String>,
        key: &str,
        v: Option<Value>,
        default: impl FnOnce() -> T,
    ) -> T {
        match v {
            None => default(),
            Some(v) => serde_json::from_value(v).unwrap_or_else(|e| {
                errors.push(format!("field `{key}`: {e}"));
                default()
            }),
        }
    }
    let e = &mut errors;
    let name: String = parse(e, "name", name, String::new);
    let trajectory: TrajectorySpec = parse(e, "trajectory", trajectory, || TrajectorySpec::Pe);
    let duration: f64 = parse(e, "duration", duration, || 1.0);
    let dt: f64 = parse(e, "dt", dt, || 1e-3);
    let noise: NoiseSpec = parse(e, "noise", noise, NoiseSpec::default);
    let bias: [f64; 3] = parse(e, "bias", bias, || [0.0; 3]);
    let features: Vec<[f64; 3]> = parse(e, "features", features, Vec::new);
    let observer: Option<ObserverKind> = match observer {
        Some(Value::String(s)) => {
            let k = ObserverKind::parse(&s);
            if k.is_none() {
                e.push(format!(
                    "unknown observer `{s}` (expected one of: gradient, pebo, pv_drem, navigation)"
                ));
            }
            k
        }
        Some(other) => {
            e.push(format!("field `observer` must be a string, got {other}"));
            None
        }
        None => None,
    };
    let gains: BTreeMap<String, GainValue> = parse(e, "gains", gains, BTreeMap::new);
    let seeds: Vec<u64> = parse(e, "seeds", seeds, || vec![0]);
    let outputs: Vec<String> = parse(e, "outputs", outputs, Vec::new);
    let r_min: f64 = parse(e, "r_min", r_min, || DEFAULT_R_MIN);
    let gravity: f64 = parse(e, "gravity", gravity, || GRAVITY);
    let trace_stride: usize = parse(e, "trace_stride", trace_stride, || 10);
    let tolerance: f64 = parse(e, "tolerance", tolerance, || 1e-2);
    let t_settle: Option<f64> = parse(e, "t_settle", t_settle, || None);
    let pe_window: f64 = parse(e, "pe_window", pe_window, || 4.0);
    let ie_threshold: f64 = parse(e, "ie_threshold", ie_threshold, || DEFAULT_IE_THRESHOLD);

    let Some(observer) = observer else {
        return Err(Error::Validation(errors));
    };
    let config = ScenarioConfig {
        name,
        trajectory,
        duration,
        dt,
        noise,
        bias,
        features,
        observer,
        gains,
        seeds,
        outputs,
        r_min,
        gravity,
        trace_stride,
        tolerance,
        t_settle: t_settle.unwrap_or(0.5 * duration.max(0.0)),
        pe_window,
        ie_threshold,
    };
    config.validate_into(&mut errors);
    if errors.is_empty() { Ok(config) } else { Err(Error::Validation(errors)) }
}

impl ScenarioConfig {
    /// Loads one of the [`BUNDLED`] scenarios.
    pub fn bundled(name: &str) -> Result<Self> {
        let text = bundled(name).ok_or_else(|| Error::Contract(format!("no bundled scenario named `{name}`")))?;
        load_scenario(text)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        self.validate_into(&mut errors);
        if errors.is_empty() { Ok(()) } else { Err(Error::Validation(errors)) }
    }

    fn validate_into(&self, errors: &mut Vec<String>) {
        let positive = |errors: &mut Vec<String>, key: &str, v: f64| {
            if !(v > 0.0 && v.is_finite()) {
                errors.push(format!("`{key}` must be a finite positive number, got {v}"));
            }
        };
        if self.name.trim().is_empty() {
            errors.push("`name` must not be empty".into());
        }
        positive(errors, "duration", self.duration);
        positive(errors, "dt", self.dt);
        positive(errors, "r_min", self.r_min);
        positive(errors, "tolerance", self.tolerance);
        positive(errors, "pe_window", self.pe_window);
        positive(errors, "ie_threshold", self.ie_threshold);
        if self.duration > 0.0 && self.dt > 0.0 && self.dt > self.duration {
            errors.push(format!("`dt` ({}) exceeds `duration` ({})", self.dt, self.duration));
        }
        if !(self.gravity.is_finite() && self.gravity >= 0.0) {
            errors.push(format!("`gravity` must be finite and non-negative, got {}", self.gravity));
        }
        if !self.t_settle.is_finite() || self.t_settle < 0.0 {
            errors.push(format!("`t_settle` must be finite and non-negative, got {}", self.t_settle));
        }
        if self.trace_stride == 0 {
            errors.push("`trace_stride` must be at least 1".into());
        }
        if self.seeds.is_empty() {
            errors.push("`seeds` must list at least one seed".into());
        }
        if self.bias.iter().any(|b| !b.is_finite()) {
            errors.push("`bias` must be finite".into());
        }
        if self.features.iter().flatten().any(|c| !c.is_finite()) {
            errors.push("`features` must be finite".into());
        }
        self.noise.validate(errors);
        self.trajectory.validate(errors);

        match self.observer {
            ObserverKind::Gradient | ObserverKind::Pebo | ObserverKind::PvDrem => {
                if self.features.len() != 1 {
                    errors.push(format!(
                        "observer `{}` tracks exactly one feature, got {}",
                        self.observer.name(),
                        self.features.len()
                    ));
                }
            }
            ObserverKind::Navigation => {
                if let Err(msg) = check_landmark_geometry(&self.anchors()) {
                    errors.push(msg);
                }
            }
        }
        if let Err(mut e) = resolve_gains(self.observer, &self.gains, self.features.len(), true) {
            errors.append(&mut e);
        }
        let columns = trace_columns(self.observer, self.features.len());
        for o in &self.outputs {
            if !columns.contains(o) {
                errors.push(format!("unknown output column `{o}` for observer `{}`", self.observer.name()));
            }
        }
    }

    pub fn anchors(&self) -> Vec<Vec3> {
        self.features.iter().map(|f| Vec3::from(*f)).collect()
    }

    pub fn bias_vector(&self) -> Vec3 {
        Vec3::from(self.bias)
    }

    /// Number of observer steps.
    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }

    pub fn with_noise_free(mut self) -> Self {
        self.noise = NoiseSpec::zero();
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Observer construction parameters resolved from the gains map.
#[derive(Debug, Clone, PartialEq)]
pub enum ObserverSetup {
    Gradient { alpha: f64, gamma: f64, r_hat0: f64 },
    Pebo { gains: PeboGains, theta0: f64, zeta0: f64 },
    PvDrem { alpha: f64, gains: DremGains, theta0: DVector<f64> },
    Navigation { alpha: f64, gains: DremGains, theta0: DVector<f64>, k: Vec<f64>, sigma: Vec<f64>, x_hat0: Vec3, qc0: Rot3 },
}

impl ObserverSetup {
    pub fn kind(&self) -> ObserverKind {
        match self {
            ObserverSetup::Gradient { .. } => ObserverKind::Gradient,
            ObserverSetup::Pebo { .. } => ObserverKind::Pebo,
            ObserverSetup::PvDrem { .. } => ObserverKind::PvDrem,
            ObserverSetup::Navigation { .. } => ObserverKind::Navigation,
        }
    }
}

struct GainReader<'a> {
    gains: &'a BTreeMap<String, GainValue>,
    errors: Vec<String>,
}

impl GainReader<'_> {
    fn scalar(&mut self, key: &str, default: f64) -> f64 {
        match self.gains.get(key) {
            None => default,
            Some(GainValue::Scalar(v)) if v.is_finite() => *v,
            Some(other) => {
                self.errors.push(format!("gain `{key}` must be a finite number, got {other:?}"));
                default
            }
        }
    }

    fn positive(&mut self, key: &str, default: f64) -> f64 {
        let v = self.scalar(key, default);
        if !(v > 0.0) {
            self.errors.push(format!("gain `{key}` must be positive, got {v}"));
        }
        v
    }

    fn non_negative(&mut self, key: &str, default: f64) -> f64 {
        let v = self.scalar(key, default);
        if !(v >= 0.0) {
            self.errors.push(format!("gain `{key}` must be non-negative, got {v}"));
        }
        v
    }

    fn flag(&mut self, key: &str) -> bool {
        let v = self.scalar(key, 0.0);
        if v != 0.0 && v != 1.0 {
            self.errors.push(format!("gain `{key}` must be 0 or 1, got {v}"));
        }
        v == 1.0
    }

    /// A list of length `n`; a scalar is broadcast when `broadcast` is set.
    fn list(&mut self, key: &str, n: usize, broadcast: bool, default: impl FnOnce() -> Vec<f64>) -> Vec<f64> {
        let v = match self.gains.get(key) {
            None => return default(),
            Some(GainValue::Scalar(s)) if broadcast => vec![*s; n],
            Some(GainValue::Scalar(_)) => {
                self.errors.push(format!("gain `{key}` must be a list of {n} numbers"));
                return default();
            }
            Some(GainValue::List(l)) => l.clone(),
        };
        if v.len() != n {
            self.errors.push(format!("gain `{key}` must have {n} entries, got {}", v.len()));
            return default();
        }
        if v.iter().any(|x| !x.is_finite()) {
            self.errors.push(format!("gain `{key}` must be finite"));
        }
        v
    }

    fn drem(&mut self, gamma: f64, k_p: f64) -> DremGains {
        let mut g = DremGains::new(self.positive("rho", 0.4), self.positive("gamma", gamma), self.positive("k_p", k_p));
        if self.flag("delta_scaling") {
            g.scaling = DeltaScaling::Frobenius;
        }
        g
    }
}

fn default_theta0(n: usize) -> Vec<f64> {
    let mut t = vec![0.0; n];
    t[n - 1] = 10.0;
    t
}

/// Resolves and checks the gains of `kind`. With `strict`, keys the observer
/// does not accept are errors; otherwise they are ignored (used when several
/// observers share one gains map).
pub fn resolve_gains(
    kind: ObserverKind,
    gains: &BTreeMap<String, GainValue>,
    n_features: usize,
    strict: bool,
) -> std::result::Result<ObserverSetup, Vec<String>> {
    let mut r = GainReader { gains, errors: Vec::new() };
    if strict {
        for key in gains.keys() {
            if !kind.gain_keys().contains(&key.as_str()) {
                r.errors.push(format!(
                    "unknown gain `{key}` for observer `{}` (accepted: {})",
                    kind.name(),
                    kind.gain_keys().join(", ")
                ));
            }
        }
    }
    let setup = match kind {
        ObserverKind::Gradient => ObserverSetup::Gradient {
            alpha: r.positive("alpha", 1.0),
            gamma: r.positive("gamma", 50.0),
            r_hat0: r.scalar("r_hat0", 0.0),
        },
        ObserverKind::Pebo => ObserverSetup::Pebo {
            gains: PeboGains {
                alpha: r.positive("alpha", 1.0),
                gamma: r.positive("gamma", 50.0),
                k_p: r.non_negative("k_p", 1.0),
                gradient_flow: r.flag("gradient_flow"),
            },
            theta0: r.scalar("theta0", 0.0),
            zeta0: r.scalar("zeta0", 0.0),
        },
        ObserverKind::PvDrem => {
            let n = Layout::SingleFeature.dim();
            ObserverSetup::PvDrem {
                alpha: r.positive("alpha", 2.0),
                gains: r.drem(100.0, 500.0),
                theta0: DVector::from_vec(r.list("theta0", n, false, || default_theta0(n))),
            }
        }
        ObserverKind::Navigation => {
            let m = n_features.max(1);
            let n = (Layout::Navigation { features: m }).dim();
            let alpha = r.positive("alpha", 1.0);
            let gains = r.drem(100.0, 1e3);
            let theta0 = DVector::from_vec(r.list("theta0", n, false, || default_theta0(n)));
            let k = r.list("k_i", m.saturating_sub(1), true, || vec![1.0; m.saturating_sub(1)]);
            let sigma = r.list("sigma_i", m, true, || vec![1.0; m]);
            if k.iter().chain(&sigma).any(|g| !(*g > 0.0)) {
                r.errors.push("gains `k_i` and `sigma_i` must be positive".into());
            }
            let x_hat0 = Vec3::from_column_slice(&r.list("x_hat0", 3, false, || vec![0.0; 3]));
            let qc0 = Rot3::exp(&Vec3::from_column_slice(&r.list("qc0", 3, false, || vec![0.0; 3])));
            ObserverSetup::Navigation { alpha, gains, theta0, k, sigma, x_hat0, qc0 }
        }
    };
    if r.errors.is_empty() { Ok(setup) } else { Err(r.errors) }
}

/// Trace column names of `kind` tracking `n` features (without `t`).
pub fn trace_columns(kind: ObserverKind, n: usize) -> Vec<String> {
    let xyz = |p: &str| ["x", "y", "z"].map(|a| format!("{p}_{a}"));
    let mut c: Vec<String> = Vec::new();
    match kind {
        ObserverKind::Gradient | ObserverKind::Pebo => {
            c.extend(xyz("z"));
            c.extend(xyz("z_hat"));
            c.extend(["r", "r_hat", "err_z", "err_r", "phi_norm"].map(String::from));
            if kind == ObserverKind::Pebo {
                c.extend(["omega", "theta_hat"].map(String::from));
            }
        }
        ObserverKind::PvDrem | ObserverKind::Navigation => {
            for i in 0..n {
                c.extend(xyz(&format!("z{i}")));
                c.extend(xyz(&format!("z{i}_hat")));
            }
            c.extend(xyz("v"));
            c.extend(xyz("v_hat"));
            c.extend(xyz("bias_hat"));
            if kind == ObserverKind::Navigation {
                c.extend(xyz("x"));
                c.extend(xyz("x_hat"));
            }
            for e in kind.error_names() {
                c.push(format!("err_{e}"));
            }
            c.extend(["delta", "omega", "cond_psi"].map(String::from));
            if kind == ObserverKind::Navigation {
                c.push("orth_err".into());
            }
        }
    }
    c
}

/// A time-indexed table.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

/// Shortest round-trip decimal form, in exponent notation for very small or
/// large magnitudes.
pub fn format_number(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 {
        "0".into()
    } else if (1e-4..1e15).contains(&a) || !x.is_finite() {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

impl Trace {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|x| format_number(*x)))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is UTF-8")
    }
}

/// Summary metrics of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub observer: ObserverKind,
    pub seed: u64,
    pub steps: usize,
    pub final_time: f64,
    pub tolerance: f64,
    pub t_settle: f64,
    /// Error norms at the last step.
    pub final_error: BTreeMap<String, f64>,
    /// Earliest time after which the error stays at or below `tolerance`.
    pub time_to_tolerance: BTreeMap<String, Option<f64>>,
    /// Largest error at or after `t_settle`.
    pub max_error_after_settle: BTreeMap<String, f64>,
    /// Largest `cond(Ψ)` over the recorded rows (acceleration mode only).
    pub max_cond_psi: Option<f64>,
    pub aborted: bool,
    pub abort_reason: Option<String>,
    pub all_finite: bool,
}

/// Output of [`run_scenario`].
#[derive(Debug, Clone)]
pub struct RunResult {
    pub trace: Trace,
    pub summary: Summary,
    pub excitation: ExcitationReport,
    pub warnings: Vec<String>,
}

impl RunResult {
    pub fn aborted(&self) -> bool {
        self.summary.aborted
    }
}

/// Simulates the scenario's truth and measurement stream for `seed`.
pub fn simulate_scenario(config: &ScenarioConfig, seed: u64) -> SimulationRun {
    let spec = SimulationSpec {
        trajectory: &config.trajectory,
        anchors: config.anchors(),
        bias: config.bias_vector(),
        gravity: config.gravity,
        noise: config.noise,
        duration: config.duration,
        dt: config.dt,
        r_min: config.r_min,
        initial_attitude: Rot3::identity(),
    };
    simulate(&spec, seed)
}

/// Runs the configured observer on a fresh stream. Deterministic in
/// `(config, seed)`. A run that violates `r_min` returns the partial trace with
/// `summary.aborted` set.
pub fn run_scenario(config: &ScenarioConfig, seed: u64) -> Result<RunResult> {
    config.validate()?;
    let run = simulate_scenario(config, seed);
    let setup = resolve_gains(config.observer, &config.gains, config.features.len(), true).map_err(Error::Validation)?;
    run_on_stream(config, &setup, &run, seed)
}

enum Runner {
    Gradient(GradientObserver),
    Pebo(PeboObserver),
    PvDrem(PositionVelocityObserver),
    Navigation(NavigationObserver),
}

fn velocity_input(m: &Measurement) -> VelocityInput {
    VelocityInput { y: m.bearing(0), omega: m.imu.omega, v: m.velocity }
}

impl Runner {
    fn new(setup: &ObserverSetup, config: &ScenarioConfig, m0: &Measurement) -> Result<Self> {
        let bearings: Vec<Vec3> = (0..config.features.len()).map(|i| m0.bearing(i)).collect();
        Ok(match setup {
            ObserverSetup::Gradient { alpha, gamma, r_hat0 } => {
                Runner::Gradient(GradientObserver::new(*alpha, *gamma, *r_hat0, &velocity_input(m0)))
            }
            ObserverSetup::Pebo { gains, theta0, zeta0 } => {
                Runner::Pebo(PeboObserver::new(*gains, 0.0, *zeta0, *theta0, &velocity_input(m0)))
            }
            ObserverSetup::PvDrem { alpha, gains, theta0 } => Runner::PvDrem(PositionVelocityObserver::new(
                *alpha,
                *gains,
                theta0.clone(),
                &bearings[0],
                Rot3::identity(),
            )?),
            ObserverSetup::Navigation { alpha, gains, theta0, k, sigma, x_hat0, qc0 } => {
                let cascade = NavObserverState::new(config.anchors(), *qc0, *x_hat0, k.clone(), sigma.clone())?;
                Runner::Navigation(NavigationObserver::new(
                    *alpha,
                    *gains,
                    theta0.clone(),
                    &bearings,
                    Rot3::identity(),
                    cascade,
                )?)
            }
        })
    }

    fn step(&mut self, s: &Samples<&Measurement>, dt: f64) {
        match self {
            Runner::Gradient(o) => {
                o.step(&VelocityInput::from_step(s, 0), dt);
            }
            Runner::Pebo(o) => {
                o.step(&VelocityInput::from_step(s, 0), dt);
            }
            Runner::PvDrem(o) => o.step(&AccelInput::from_step(s), dt),
            Runner::Navigation(o) => o.step(&AccelInput::from_step(s), dt),
        }
    }

    /// Regressor for the Gram diagnostics, `n × m` with `n` the parameter count.
    fn regressor(&self) -> DMatrix<f64> {
        match self {
            Runner::Gradient(o) => DMatrix::from_row_slice(1, 3, o.phi().as_slice()),
            Runner::Pebo(o) => DMatrix::from_row_slice(1, 3, o.internals().phi.as_slice()),
            Runner::PvDrem(o) => o.ext.lre().psi,
            Runner::Navigation(o) => o.ext.lre().psi,
        }
    }

    /// Error norms in the order of [`ObserverKind::error_names`].
    fn errors(&self, truth: &RobotTruth, bias: &Vec3) -> Vec<f64> {
        match self {
            Runner::Gradient(o) => {
                vec![(o.z_hat() - truth.features[0]).norm(), (o.r_hat() - truth.features[0].norm()).abs()]
            }
            Runner::Pebo(o) => {
                vec![(o.z_hat() - truth.features[0]).norm(), (o.r_hat() - truth.features[0].norm()).abs()]
            }
            Runner::PvDrem(o) => {
                let e = o.estimate();
                vec![(e.z[0] - truth.features[0]).norm(), (e.v - truth.v).norm(), (e.bias - bias).norm()]
            }
            Runner::Navigation(o) => {
                let e = o.estimate();
                let ez = e.z.iter().zip(&truth.features).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
                vec![
                    ez,
                    (e.v - truth.v).norm(),
                    (e.bias - bias).norm(),
                    (o.attitude().matrix() - truth.rot.matrix()).norm(),
                    (o.position() - truth.x).norm(),
                ]
            }
        }
    }

    /// One trace row in the order of [`trace_columns`] plus `cond(Ψ)`.
    fn row(&self, truth: &RobotTruth, errors: &[f64]) -> (Vec<f64>, Option<f64>) {
        let mut row = Vec::new();
        let push3 = |row: &mut Vec<f64>, v: &Vec3| row.extend_from_slice(v.as_slice());
        match self {
            Runner::Gradient(_) | Runner::Pebo(_) => {
                let (z_hat, r_hat, phi) = match self {
                    Runner::Gradient(o) => (o.z_hat(), o.r_hat(), o.phi()),
                    Runner::Pebo(o) => (o.z_hat(), o.r_hat(), o.internals().phi),
                    _ => unreachable!(),
                };
                push3(&mut row, &truth.features[0]);
                push3(&mut row, &z_hat);
                row.extend([truth.features[0].norm(), r_hat]);
                row.extend_from_slice(errors);
                row.push(phi.norm());
                if let Runner::Pebo(o) = self {
                    let i = o.internals();
                    row.extend([i.omega, i.theta_hat]);
                }
                (row, None)
            }
            Runner::PvDrem(_) | Runner::Navigation(_) => {
                let (ext, drem, gains) = match self {
                    Runner::PvDrem(o) => (&o.ext, &o.drem, &o.gains),
                    Runner::Navigation(o) => (&o.ext, &o.drem, &o.gains),
                    _ => unreachable!(),
                };
                let e = reconstruct(self);
                for (z, z_hat) in truth.features.iter().zip(&e.z) {
                    push3(&mut row, z);
                    push3(&mut row, z_hat);
                }
                push3(&mut row, &truth.v);
                push3(&mut row, &e.v);
                push3(&mut row, &e.bias);
                if let Runner::Navigation(o) = self {
                    push3(&mut row, &truth.x);
                    push3(&mut row, &o.position());
                }
                row.extend_from_slice(errors);
                let cond = ext.psi_condition();
                row.extend([drem.mixed(gains.scaling).delta, drem.omega, cond]);
                if let Runner::Navigation(o) = self {
                    row.push(o.cascade.qc.orthogonality_error());
                }
                (row, Some(cond))
            }
        }
    }
}

fn reconstruct(r: &Runner) -> crate::observers::Reconstruction {
    match r {
        Runner::PvDrem(o) => o.estimate(),
        Runner::Navigation(o) => o.estimate(),
        _ => unreachable!("velocity-mode observers have no matrix reconstruction"),
    }
}

/// Runs `setup` on an existing stream. Several observers can share one stream
/// this way; the scenario's own observer and gains are not consulted.
pub fn run_on_stream(config: &ScenarioConfig, setup: &ObserverSetup, run: &SimulationRun, seed: u64) -> Result<RunResult> {
    let kind = setup.kind();
    let bias = config.bias_vector();
    let all_columns = trace_columns(kind, config.features.len());
    let keep: Vec<usize> = if config.outputs.is_empty() {
        (0..all_columns.len()).collect()
    } else {
        config
            .outputs
            .iter()
            .map(|o| {
                all_columns
                    .iter()
                    .position(|c| c == o)
                    .ok_or_else(|| Error::Validation(vec![format!("unknown output column `{o}` for observer `{}`", kind.name())]))
            })
            .collect::<Result<_>>()?
    };
    let mut columns = vec!["t".to_string()];
    columns.extend(keep.iter().map(|&j| all_columns[j].clone()));

    let names = kind.error_names();
    let mut final_error = vec![f64::NAN; names.len()];
    let mut last_violation: Vec<Option<f64>> = vec![None; names.len()];
    let mut max_after = vec![0.0f64; names.len()];
    let mut rows = Vec::new();
    let mut gram: Vec<(f64, DMatrix<f64>)> = Vec::new();
    let mut max_cond: Option<f64> = None;
    let mut all_finite = true;
    let mut warnings = Vec::new();

    let mut abort_reason = run.abort.as_ref().map(|e| e.to_string());
    let steps = run.steps();
    let Some(m0) = run.measurements.first() else {
        return Err(Error::Contract(format!(
            "no measurements were synthesized: {}",
            abort_reason.unwrap_or_else(|| "empty run".into())
        )));
    };
    let mut observer = Runner::new(setup, config, m0)?;
    let t0 = run.truth[0].t;

    let mut record = |observer: &Runner, k: usize, force_row: bool, rows: &mut Vec<Vec<f64>>| -> bool {
        let truth = run.truth_at_step(k);
        let t = truth.t;
        let errs = observer.errors(truth, &bias);
        let finite = errs.iter().all(|e| e.is_finite());
        for (j, e) in errs.iter().enumerate() {
            final_error[j] = *e;
            if !(*e <= config.tolerance) {
                last_violation[j] = Some(t);
            }
            if t >= config.t_settle - 1e-9 {
                max_after[j] = max_after[j].max(if e.is_finite() { *e } else { f64::INFINITY });
            }
        }
        if k % config.trace_stride == 0 || force_row {
            let (full, cond) = observer.row(truth, &errs);
            let finite_row = full.iter().all(|x| !x.is_nan());
            let mut row = vec![t];
            row.extend(keep.iter().map(|&j| full[j]));
            rows.push(row);
            if let Some(c) = cond {
                max_cond = Some(max_cond.map_or(c, |m: f64| m.max(c)));
            }
            gram.push((t, observer.regressor()));
            return finite && finite_row;
        }
        finite
    };

    all_finite &= record(&observer, 0, steps == 0, &mut rows);
    let mut done = 0;
    for k in 0..steps {
        observer.step(&run.step_samples(k), run.dt);
        done = k + 1;
        let ok = record(&observer, k + 1, k + 1 == steps, &mut rows);
        if !ok {
            all_finite = false;
            abort_reason.get_or_insert_with(|| format!("non-finite observer state at t = {}", run.truth_at_step(k + 1).t));
            break;
        }
    }

    if let Some(c) = max_cond {
        if c > PSI_CONDITION_WARNING {
            let msg = format!("cond(Ψ) reached {c:.3e}, above {PSI_CONDITION_WARNING:e}");
            log::warn!("{}: {msg}", config.name);
            warnings.push(msg);
        }
    }
    let final_time = run.truth_at_step(done).t;
    let excitation = if gram.len() >= 2 {
        excitation_report(&gram, config.ie_threshold, config.pe_window)?
    } else {
        ExcitationReport {
            threshold: config.ie_threshold,
            ie_time: None,
            ie_level: 0.0,
            pe_window: config.pe_window,
            pe_level: None,
            gram_trace: Vec::new(),
        }
    };
    let to_map = |v: &[f64]| names.iter().map(|n| n.to_string()).zip(v.iter().copied()).collect::<BTreeMap<_, _>>();
    let time_to_tolerance = names
        .iter()
        .enumerate()
        .map(|(j, n)| {
            let reached = final_error[j] <= config.tolerance;
            (n.to_string(), reached.then(|| last_violation[j].unwrap_or(t0)))
        })
        .collect();
    let summary = Summary {
        name: config.name.clone(),
        observer: kind,
        seed,
        steps: done,
        final_time,
        tolerance: config.tolerance,
        t_settle: config.t_settle,
        final_error: to_map(&final_error),
        time_to_tolerance,
        max_error_after_settle: to_map(&max_after),
        max_cond_psi: max_cond,
        aborted: abort_reason.is_some(),
        abort_reason,
        all_finite,
    };
    Ok(RunResult { trace: Trace { columns, rows }, summary, excitation, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal(observer: &str) -> String {
        format!(
            r#"{{"name": "t", "trajectory": {{"kind": "pe"}}, "duration": 0.2, "dt": 0.01,
                "features": [[-2, 1, 3]], "observer": "{observer}"}}"#
        )
    }

    fn messages(e: Error) -> Vec<String> {
        match e {
            Error::Validation(m) => m,
            other => panic!("expected validation error, got {other}"),
        }
    }

    #[test]
    fn bundled_scenarios_validate() {
        for (name, text) in BUNDLED {
            let c = load_scenario(text).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(&c.name, name);
        }
    }

    #[test]
    fn pe_gradient_gains() {
        let c = ScenarioConfig::bundled("pe_gradient").unwrap();
        let setup = resolve_gains(c.observer, &c.gains, 1, true).unwrap();
        assert_eq!(setup, ObserverSetup::Gradient { alpha: 1.0, gamma: 50.0, r_hat0: 0.0 });
    }

    #[test]
    fn negative_duration_is_rejected() {
        let text = minimal("gradient").replace("\"duration\": 0.2", "\"duration\": -1");
        let m = messages(load_scenario(&text).unwrap_err());
        assert!(m.iter().any(|s| s.contains("duration")), "{m:?}");
    }

    #[test]
    fn all_errors_are_reported() {
        let text = r#"{"name": "", "trajectory": {"kind": "pe"}, "duration": -1, "dt": 0,
            "features": [], "observer": "gradient", "gains": {"gama": 5}, "colour": 1}"#;
        let m = messages(load_scenario(text).unwrap_err());
        for needle in ["name", "duration", "dt", "exactly one feature", "gama", "colour"] {
            assert!(m.iter().any(|s| s.contains(needle)), "missing {needle} in {m:?}");
        }
    }

    #[test]
    fn unknown_observer_is_rejected() {
        let m = messages(load_scenario(&minimal("kalman")).unwrap_err());
        assert!(m.iter().any(|s| s.contains("unknown observer `kalman`")));
    }

    #[test]
    fn navigation_needs_landmark_geometry() {
        let text = minimal("navigation");
        let m = messages(load_scenario(&text).unwrap_err());
        assert!(m.iter().any(|s| s.starts_with("landmark geometry")), "{m:?}");
    }

    #[test]
    fn gain_lists_are_checked() {
        let text = minimal("pv_drem").replace("\"observer\"", "\"gains\": {\"theta0\": [1, 2]}, \"observer\"");
        let m = messages(load_scenario(&text).unwrap_err());
        assert!(m.iter().any(|s| s.contains("theta0") && s.contains("10 entries")), "{m:?}");
    }

    #[test]
    fn scalar_gains_broadcast() {
        let mut gains = BTreeMap::new();
        gains.insert("k_i".to_string(), GainValue::Scalar(2.0));
        gains.insert("sigma_i".to_string(), GainValue::List(vec![1.0, 2.0, 3.0]));
        match resolve_gains(ObserverKind::Navigation, &gains, 3, true).unwrap() {
            ObserverSetup::Navigation { k, sigma, theta0, .. } => {
                assert_eq!(k, vec![2.0, 2.0]);
                assert_eq!(sigma, vec![1.0, 2.0, 3.0]);
                assert_eq!(theta0.len(), 12);
                assert_eq!(theta0[11], 10.0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lenient_resolution_ignores_foreign_keys() {
        let mut gains = BTreeMap::new();
        gains.insert("rho".to_string(), GainValue::Scalar(0.4));
        assert!(resolve_gains(ObserverKind::Gradient, &gains, 1, true).is_err());
        assert!(resolve_gains(ObserverKind::Gradient, &gains, 1, false).is_ok());
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = ScenarioConfig::bundled("nav").unwrap();
        assert_eq!(load_scenario(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn short_run_has_expected_shape() {
        let mut c = load_scenario(&minimal("pebo")).unwrap();
        c.trace_stride = 5;
        let r = run_scenario(&c, 3).unwrap();
        assert_eq!(r.trace.columns[0], "t");
        assert_eq!(r.trace.columns.len(), 1 + trace_columns(ObserverKind::Pebo, 1).len());
        // Steps 0, 5, 10, 15, 20.
        assert_eq!(r.trace.rows.len(), 5);
        assert!((r.summary.final_time - 0.2).abs() < 1e-12);
        assert!(!r.summary.aborted);
    }

    #[test]
    fn outputs_select_columns() {
        let text = minimal("gradient").replace("\"observer\"", "\"outputs\": [\"err_z\", \"r_hat\"], \"observer\"");
        let c = load_scenario(&text).unwrap();
        let r = run_scenario(&c, 0).unwrap();
        assert_eq!(r.trace.columns, vec!["t", "err_z", "r_hat"]);
        let bad = minimal("gradient").replace("\"observer\"", "\"outputs\": [\"delta\"], \"observer\"");
        assert!(load_scenario(&bad).is_err());
    }

    #[test]
    fn collision_aborts_with_partial_trace() {
        let mut c = load_scenario(&minimal("gradient")).unwrap();
        // The PE trajectory passes through x(1).
        c.duration = 2.0;
        c.features = vec![[0.5f64.cos(), 0.25 * 1f64.sin(), -(3f64.sqrt() / 4.0) * 1f64.sin()]];
        let r = run_scenario(&c, 0).unwrap();
        assert!(r.aborted());
        assert!(r.summary.abort_reason.unwrap().contains("r_min"));
    }

    #[test]
    fn number_format_round_trips() {
        for x in [0.0, 1.0, -2.5, 1e-300, 123456.789, 3.0e20, f64::MIN_POSITIVE, 0.1 + 0.2] {
            assert_eq!(format_number(x).parse::<f64>().unwrap(), x);
        }
    }
}
