//! Ground-truth robot/feature dynamics, reference trajectories and sensor models.
//!
//! Conventions: `R` maps body to inertial coordinates, `v` is the body-frame
//! velocity, `z_i = Rᵀ(ᴵz_i − x)` is feature `i` in the body frame and the
//! gravity vector is `g = [0, 0, 𝗀]`. The accelerometer signal `a` follows
//!
//! ```text
//! v̇ = −Ω×v + a + b_a + Rᵀg
//! ```
//!
//! so a stationary, level robot reads `a = −b_a − Rᵀg`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie3::{hat, magnus_increment, unit_projector, Rot3, UnitBearing, Vec3, RENORMALIZE_EVERY};
use crate::ode::{rk4, Node, OdeState, Samples};

/// Default gravitational acceleration magnitude (m/s²).
pub const GRAVITY: f64 = 9.81;

/// Default minimum admissible feature range (m).
pub const DEFAULT_R_MIN: f64 = 0.1;

const SQRT3_4: f64 = 0.433_012_701_892_219_3; // √3/4

pub fn gravity_vector(g: f64) -> Vec3 {
    Vec3::new(0.0, 0.0, g)
}

/// Ground truth of the robot and every tracked feature.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotTruth {
    pub t: f64,
    /// Attitude, body to inertial.
    pub rot: Rot3,
    /// Inertial position (m).
    pub x: Vec3,
    /// Body-frame velocity (m/s).
    pub v: Vec3,
    /// Feature positions in the body frame (m).
    pub features: Vec<Vec3>,
    /// Constant inertial feature positions (m).
    pub anchors: Vec<Vec3>,
}

impl RobotTruth {
    /// Builds a consistent state from inertial quantities.
    pub fn new(rot: Rot3, x: Vec3, inertial_v: Vec3, anchors: Vec<Vec3>) -> Self {
        let features = anchors.iter().map(|p| rot.inverse_rotate(&(p - x))).collect();
        Self { t: 0.0, rot, x, v: rot.inverse_rotate(&inertial_v), features, anchors }
    }

    pub fn ranges(&self) -> Vec<f64> {
        self.features.iter().map(|z| z.norm()).collect()
    }

    pub fn inertial_velocity(&self) -> Vec3 {
        self.rot.rotate(&self.v)
    }

    /// Largest `|z_i − Rᵀ(ᴵz_i − x)|` over all features.
    pub fn consistency_residual(&self) -> f64 {
        self.features
            .iter()
            .zip(&self.anchors)
            .map(|(z, p)| (z - self.rot.inverse_rotate(&(p - self.x))).norm())
            .fold(0.0, f64::max)
    }

    /// Checks `|z_i| ≥ r_min` for every feature.
    pub fn check_ranges(&self, r_min: f64) -> Result<()> {
        for (i, z) in self.features.iter().enumerate() {
            let range = z.norm();
            if !(range >= r_min) {
                return Err(Error::FeatureTooClose { feature: i, range, time: self.t, r_min });
            }
        }
        Ok(())
    }
}

/// Noise-free inertial inputs driving the truth model.
pub trait ImuSource {
    /// Rotational velocity (rad/s, body frame) at time `t`.
    fn omega(&self, t: f64) -> Vec3;
    /// Noise-free accelerometer signal `a` (m/s², body frame) at time `t` for
    /// attitude `rot`, as it enters the velocity dynamics above.
    fn accel(&self, t: f64, rot: &Rot3) -> Vec3;
    /// Left limit of [`ImuSource::omega`]; differs only at switching instants.
    fn omega_before(&self, t: f64) -> Vec3 {
        self.omega(t)
    }
    /// Left limit of [`ImuSource::accel`].
    fn accel_before(&self, t: f64, rot: &Rot3) -> Vec3 {
        self.accel(t, rot)
    }
}

/// `(a, Ω)` held constant; useful for equilibrium checks.
#[derive(Debug, Clone, Copy)]
pub struct ConstantImu {
    pub a: Vec3,
    pub omega: Vec3,
}

impl ImuSource for ConstantImu {
    fn omega(&self, _t: f64) -> Vec3 {
        self.omega
    }
    fn accel(&self, _t: f64, _rot: &Rot3) -> Vec3 {
        self.a
    }
}

#[derive(Debug, Clone)]
struct Kinematic {
    x: Vec3,
    v: Vec3,
    z: Vec<Vec3>,
}

impl OdeState for Kinematic {
    fn axpy(&self, h: f64, d: &Self) -> Self {
        Kinematic {
            x: self.x + d.x * h,
            v: self.v + d.v * h,
            z: self.z.iter().zip(&d.z).map(|(a, b)| a + b * h).collect(),
        }
    }
    fn scale(&self, c: f64) -> Self {
        Kinematic { x: self.x * c, v: self.v * c, z: self.z.iter().map(|a| a * c).collect() }
    }
}

/// One RK4 step of the truth dynamics with the attitude advanced on SO(3).
///
/// The attitude is propagated by two fourth-order Magnus half-steps so that the
/// RK4 stages for `(x, v, z_i)` see the attitude at the step midpoint and end.
/// `bias` is `b_a` and `g` the gravity vector.
pub fn step_truth(
    state: &RobotTruth,
    imu: &impl ImuSource,
    bias: &Vec3,
    g: &Vec3,
    dt: f64,
) -> RobotTruth {
    let t = state.t;
    let w = |f: f64| imu.omega(t + f * dt);
    let half = 0.5 * dt;
    let r0 = state.rot;
    let r_mid = r0.compose(&Rot3::exp(&magnus_increment(&w(0.0), &w(0.25), &w(0.5), half)));
    let r_end = r_mid.compose(&Rot3::exp(&magnus_increment(&w(0.5), &w(0.75), &imu.omega_before(t + dt), half)));
    let rots = Samples::new(r0, r_mid, r_end);
    let times = Samples::new(t, t + half, t + dt);

    let k0 = Kinematic { x: state.x, v: state.v, z: state.features.clone() };
    let k1 = rk4(&k0, dt, |node, s| {
        let (tn, rn) = (*times.at(node), rots.at(node));
        // Step ends take left limits so a switch at a grid point is resolved exactly.
        let (omega, a) = match node {
            Node::End => (imu.omega_before(tn), imu.accel_before(tn, rn)),
            _ => (imu.omega(tn), imu.accel(tn, rn)),
        };
        let om = hat(&omega);
        Kinematic {
            x: rn.rotate(&s.v),
            v: -om * s.v + a + bias + rn.inverse_rotate(g),
            z: s.z.iter().map(|z| -om * z - s.v).collect(),
        }
    });
    RobotTruth {
        t: t + dt,
        rot: r_end,
        x: k1.x,
        v: k1.v,
        features: k1.z,
        anchors: state.anchors.clone(),
    }
}

/// `ẏ = −Ω×y − Π_y v / |z|`, the analytic bearing rate.
pub fn bearing_rate(z: &Vec3, v: &Vec3, omega: &Vec3) -> Vec3 {
    let r = z.norm();
    let y = z / r;
    -omega.cross(&y) - unit_projector(&y) * v / r
}

/// Closed-form trajectory `x₁(t)` and `Ω₁(t)`.
pub fn pe_trajectory(t: f64) -> (Vec3, Vec3) {
    (
        Vec3::new((0.5 * t).cos(), 0.25 * t.sin(), -SQRT3_4 * t.sin()),
        pe_omega(t),
    )
}

fn pe_omega(t: f64) -> Vec3 {
    Vec3::new((0.1 + PI).sin(), 0.5 * (2.0 * t).sin(), 0.1 * (0.3 * t + PI / 3.0).sin())
}

/// `ẋ₁(t)`.
pub fn pe_velocity(t: f64) -> Vec3 {
    Vec3::new(-0.5 * (0.5 * t).sin(), 0.25 * t.cos(), -SQRT3_4 * t.cos())
}

/// `ẍ₁(t)`.
pub fn pe_acceleration(t: f64) -> Vec3 {
    Vec3::new(-0.25 * (0.5 * t).cos(), -0.25 * t.sin(), SQRT3_4 * t.sin())
}

/// Time at which the velocity-mode excitation starts to decay.
pub const IE_VELOCITY_SWITCH: f64 = 4.0;
/// Decay rate after the switch (1/s).
pub const IE_VELOCITY_DECAY: f64 = 5.0;

fn ie_velocity_gain(t: f64) -> f64 {
    if t <= IE_VELOCITY_SWITCH {
        1.0
    } else {
        (-IE_VELOCITY_DECAY * (t - IE_VELOCITY_SWITCH)).exp()
    }
}

/// `(ᴵv, Ω)` equal to `(ẋ₁, Ω₁)` up to 4 s and exponentially faded afterwards.
pub fn ie_velocity_trajectory(t: f64) -> (Vec3, Vec3) {
    let k = ie_velocity_gain(t);
    (pe_velocity(t) * k, pe_omega(t) * k)
}

fn ie_velocity_accel(t: f64) -> Vec3 {
    if t <= IE_VELOCITY_SWITCH {
        pe_acceleration(t)
    } else {
        (pe_acceleration(t) - pe_velocity(t) * IE_VELOCITY_DECAY) * ie_velocity_gain(t)
    }
}

/// End of the excitation window of the acceleration-mode trajectory (s).
pub const IE_ACCEL_SWITCH: f64 = 20.0;

/// `(ᴵa, Ω)` of the acceleration-mode trajectory: sinusoidal until 20 s, at rest
/// (in acceleration and rotation) afterwards.
pub fn ie_acceleration_trajectory(t: f64) -> (Vec3, Vec3) {
    if t >= IE_ACCEL_SWITCH {
        return (Vec3::zeros(), Vec3::zeros());
    }
    ie_acceleration_excited(t)
}

/// Left limit of [`ie_acceleration_trajectory`].
pub fn ie_acceleration_trajectory_before(t: f64) -> (Vec3, Vec3) {
    if t > IE_ACCEL_SWITCH {
        return (Vec3::zeros(), Vec3::zeros());
    }
    ie_acceleration_excited(t)
}

fn ie_acceleration_excited(t: f64) -> (Vec3, Vec3) {
    (
        Vec3::new(-0.5 * (0.5 * t).cos(), -0.5 * t.sin(), SQRT3_4 * t.sin()),
        Vec3::new(0.2 * (0.1 * t + PI).sin(), 0.1 * (0.2 * t).sin(), 0.1 * (0.3 * t + PI / 3.0).sin()),
    )
}

/// Tabulated `(t, ᴵa, Ω)` samples, linearly interpolated and held at the ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabulatedRow {
    pub t: f64,
    pub accel: [f64; 3],
    pub omega: [f64; 3],
}

/// Which robot motion drives a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrajectorySpec {
    Pe,
    IeVelocity,
    IeAcceleration,
    Tabulated {
        rows: Vec<TabulatedRow>,
        initial_position: [f64; 3],
        initial_velocity: [f64; 3],
    },
}

impl TrajectorySpec {
    /// Inertial acceleration `ᴵa(t)`.
    pub fn inertial_accel(&self, t: f64) -> Vec3 {
        match self {
            TrajectorySpec::Pe => pe_acceleration(t),
            TrajectorySpec::IeVelocity => ie_velocity_accel(t),
            TrajectorySpec::IeAcceleration => ie_acceleration_trajectory(t).0,
            TrajectorySpec::Tabulated { rows, .. } => Vec3::from(interpolate(rows, t, |r| r.accel)),
        }
    }

    /// Body rotational velocity `Ω(t)`.
    pub fn omega(&self, t: f64) -> Vec3 {
        match self {
            TrajectorySpec::Pe => pe_omega(t),
            TrajectorySpec::IeVelocity => ie_velocity_trajectory(t).1,
            TrajectorySpec::IeAcceleration => ie_acceleration_trajectory(t).1,
            TrajectorySpec::Tabulated { rows, .. } => Vec3::from(interpolate(rows, t, |r| r.omega)),
        }
    }

    /// Left limit of [`TrajectorySpec::inertial_accel`].
    pub fn inertial_accel_before(&self, t: f64) -> Vec3 {
        match self {
            TrajectorySpec::IeAcceleration => ie_acceleration_trajectory_before(t).0,
            _ => self.inertial_accel(t),
        }
    }

    /// Left limit of [`TrajectorySpec::omega`].
    pub fn omega_before(&self, t: f64) -> Vec3 {
        match self {
            TrajectorySpec::IeAcceleration => ie_acceleration_trajectory_before(t).1,
            _ => self.omega(t),
        }
    }

    pub fn initial_position(&self) -> Vec3 {
        match self {
            TrajectorySpec::Tabulated { initial_position, .. } => Vec3::from(*initial_position),
            _ => Vec3::new(1.0, 0.0, 0.0),
        }
    }

    /// Initial inertial velocity. For the acceleration-mode trajectory this is
    /// chosen so the position stays bounded while the excitation is on.
    pub fn initial_velocity(&self) -> Vec3 {
        match self {
            TrajectorySpec::Pe | TrajectorySpec::IeVelocity => pe_velocity(0.0),
            TrajectorySpec::IeAcceleration => Vec3::new(0.0, 0.5, -SQRT3_4),
            TrajectorySpec::Tabulated { initial_velocity, .. } => Vec3::from(*initial_velocity),
        }
    }

    pub fn validate(&self, errors: &mut Vec<String>) {
        if let TrajectorySpec::Tabulated { rows, .. } = self {
            if rows.is_empty() {
                errors.push("tabulated trajectory has no rows".into());
            }
            if rows.windows(2).any(|w| !(w[1].t > w[0].t)) {
                errors.push("tabulated trajectory times must be strictly increasing".into());
            }
            if rows.iter().any(|r| !r.t.is_finite() || r.accel.iter().chain(&r.omega).any(|v| !v.is_finite())) {
                errors.push("tabulated trajectory contains non-finite values".into());
            }
        }
    }
}

fn interpolate(rows: &[TabulatedRow], t: f64, field: impl Fn(&TabulatedRow) -> [f64; 3]) -> [f64; 3] {
    let Some(first) = rows.first() else { return [0.0; 3] };
    if t <= first.t {
        return field(first);
    }
    let idx = rows.partition_point(|r| r.t <= t);
    if idx >= rows.len() {
        return field(rows.last().unwrap());
    }
    let (a, b) = (&rows[idx - 1], &rows[idx]);
    let s = (t - a.t) / (b.t - a.t);
    let (fa, fb) = (field(a), field(b));
    [0, 1, 2].map(|i| fa[i] + s * (fb[i] - fa[i]))
}

/// A trajectory turned into noise-free IMU signals for a given bias and gravity.
#[derive(Debug, Clone)]
pub struct TrajectoryImu<'a> {
    pub trajectory: &'a TrajectorySpec,
    pub bias: Vec3,
    pub gravity: Vec3,
}

impl ImuSource for TrajectoryImu<'_> {
    fn omega(&self, t: f64) -> Vec3 {
        self.trajectory.omega(t)
    }
    fn accel(&self, t: f64, rot: &Rot3) -> Vec3 {
        rot.inverse_rotate(&(self.trajectory.inertial_accel(t) - self.gravity)) - self.bias
    }
    fn omega_before(&self, t: f64) -> Vec3 {
        self.trajectory.omega_before(t)
    }
    fn accel_before(&self, t: f64, rot: &Rot3) -> Vec3 {
        rot.inverse_rotate(&(self.trajectory.inertial_accel_before(t) - self.gravity)) - self.bias
    }
}

/// Per-axis standard deviations of the additive Gaussian sensor noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Accelerometer (m/s²).
    pub accel: f64,
    /// Gyroscope (rad/s).
    pub gyro: f64,
    /// Bearing, applied before renormalization.
    pub bearing: f64,
    /// Velocity sensor (m/s), velocity-mode observers only.
    pub velocity: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { accel: 0.01, gyro: 0.001, bearing: 0.005, velocity: 0.0 }
    }
}

impl NoiseSpec {
    pub fn zero() -> Self {
        Self { accel: 0.0, gyro: 0.0, bearing: 0.0, velocity: 0.0 }
    }

    pub fn is_zero(&self) -> bool {
        self.accel == 0.0 && self.gyro == 0.0 && self.bearing == 0.0 && self.velocity == 0.0
    }

    pub fn validate(&self, errors: &mut Vec<String>) {
        for (name, v) in [("accel", self.accel), ("gyro", self.gyro), ("bearing", self.bearing), ("velocity", self.velocity)] {
            if !(v >= 0.0 && v.is_finite()) {
                errors.push(format!("noise.{name} must be a finite non-negative number, got {v}"));
            }
        }
    }
}

/// Derives a channel seed from the master seed and a fixed label (FNV-1a over
/// the label, mixed with a SplitMix64 finalizer).
pub fn channel_seed(master: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = master ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent Gaussian streams, one per sensor channel.
#[derive(Debug, Clone)]
pub struct SensorNoise {
    spec: NoiseSpec,
    accel: ChaCha8Rng,
    gyro: ChaCha8Rng,
    bearing: ChaCha8Rng,
    velocity: ChaCha8Rng,
}

impl SensorNoise {
    pub fn new(spec: NoiseSpec, seed: u64) -> Self {
        let rng = |label| ChaCha8Rng::seed_from_u64(channel_seed(seed, label));
        Self {
            spec,
            accel: rng("imu.accel"),
            gyro: rng("imu.gyro"),
            bearing: rng("camera.bearing"),
            velocity: rng("velocity"),
        }
    }

    pub fn spec(&self) -> &NoiseSpec {
        &self.spec
    }

    fn draw(rng: &mut ChaCha8Rng, sigma: f64) -> Vec3 {
        if sigma == 0.0 {
            return Vec3::zeros();
        }
        let mut n = || -> f64 { rng.sample(StandardNormal) };
        Vec3::new(n(), n(), n()) * sigma
    }

    pub fn accel(&mut self) -> Vec3 {
        Self::draw(&mut self.accel, self.spec.accel)
    }
    pub fn gyro(&mut self) -> Vec3 {
        Self::draw(&mut self.gyro, self.spec.gyro)
    }
    pub fn bearing(&mut self) -> Vec3 {
        Self::draw(&mut self.bearing, self.spec.bearing)
    }
    pub fn velocity(&mut self) -> Vec3 {
        Self::draw(&mut self.velocity, self.spec.velocity)
    }
}

/// IMU sample. `bias` is ground truth and never read by observers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuReading {
    pub a: Vec3,
    pub omega: Vec3,
    pub bias: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BearingMeasurement {
    pub t: f64,
    pub bearings: Vec<UnitBearing>,
}

/// Everything a sensor suite reports at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub t: f64,
    pub imu: ImuReading,
    /// Left-limit IMU reading when the signal switches at this instant; the
    /// noise draw is shared with `imu`.
    pub imu_before: Option<ImuReading>,
    /// Body-frame velocity, for velocity-mode observers.
    pub velocity: Vec3,
    pub camera: BearingMeasurement,
}

impl Measurement {
    /// IMU reading to use as the end sample of a step.
    pub fn imu_before(&self) -> &ImuReading {
        self.imu_before.as_ref().unwrap_or(&self.imu)
    }

    pub fn bearing(&self, i: usize) -> Vec3 {
        *self.camera.bearings[i].as_vec()
    }
}

/// Adds sensor noise to noise-free signals.
///
/// `a_true` and `omega_true` are the noise-free IMU signals (with `a_true`
/// already containing the model's bias term, see the module docs).
pub fn synthesize_measurements(
    state: &RobotTruth,
    a_true: &Vec3,
    omega_true: &Vec3,
    bias: &Vec3,
    noise: &mut SensorNoise,
) -> Result<Measurement> {
    let a = a_true + noise.accel();
    let omega = omega_true + noise.gyro();
    let velocity = state.v + noise.velocity();
    let bearings = state
        .features
        .iter()
        .map(|z| {
            let y = z / z.norm();
            UnitBearing::new_normalize(&(y + noise.bearing()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Measurement {
        t: state.t,
        imu: ImuReading { a, omega, bias: *bias },
        imu_before: None,
        velocity,
        camera: BearingMeasurement { t: state.t, bearings },
    })
}

/// Truth and measurements of a simulated run on a half-step grid.
///
/// Sample `2k` is the start of observer step `k`, `2k+1` its midpoint and
/// `2k+2` its end.
#[derive(Debug)]
pub struct SimulationRun {
    pub dt: f64,
    pub truth: Vec<RobotTruth>,
    pub measurements: Vec<Measurement>,
    /// Set when the run stopped early (a feature came closer than `r_min`).
    pub abort: Option<Error>,
}

impl SimulationRun {
    /// Number of complete observer steps.
    pub fn steps(&self) -> usize {
        self.measurements.len().saturating_sub(1) / 2
    }

    pub fn step_samples(&self, k: usize) -> Samples<&Measurement> {
        Samples::new(&self.measurements[2 * k], &self.measurements[2 * k + 1], &self.measurements[2 * k + 2])
    }

    /// Truth at the start of observer step `k`, which is the end of step `k − 1`.
    pub fn truth_at_step(&self, k: usize) -> &RobotTruth {
        &self.truth[2 * k]
    }
}

/// Parameters of a truth simulation.
#[derive(Debug, Clone)]
pub struct SimulationSpec<'a> {
    pub trajectory: &'a TrajectorySpec,
    pub anchors: Vec<Vec3>,
    pub bias: Vec3,
    pub gravity: f64,
    pub noise: NoiseSpec,
    pub duration: f64,
    /// Observer step; the truth is integrated at `dt / 2`.
    pub dt: f64,
    pub r_min: f64,
    pub initial_attitude: Rot3,
}

/// Integrates the truth and synthesizes the measurement stream.
pub fn simulate(spec: &SimulationSpec<'_>, seed: u64) -> SimulationRun {
    let g = gravity_vector(spec.gravity);
    let imu = TrajectoryImu { trajectory: spec.trajectory, bias: spec.bias, gravity: g };
    let mut noise = SensorNoise::new(spec.noise, seed);
    let h = 0.5 * spec.dt;
    let n_samples = 2 * (spec.duration / spec.dt).round() as usize + 1;

    let mut state = RobotTruth::new(
        spec.initial_attitude,
        spec.trajectory.initial_position(),
        spec.trajectory.initial_velocity(),
        spec.anchors.clone(),
    );
    let mut truth = Vec::with_capacity(n_samples);
    let mut measurements = Vec::with_capacity(n_samples);
    let mut abort = None;
    for j in 0..n_samples {
        if j > 0 {
            state = step_truth(&state, &imu, &spec.bias, &g, h);
            state.t = j as f64 * h;
            if j as u64 % RENORMALIZE_EVERY == 0 {
                state.rot = state.rot.renormalized();
            }
        }
        if let Err(e) = state.check_ranges(spec.r_min) {
            abort = Some(e);
            break;
        }
        let a = imu.accel(state.t, &state.rot);
        let omega = imu.omega(state.t);
        match synthesize_measurements(&state, &a, &omega, &spec.bias, &mut noise) {
            Ok(mut m) => {
                let (a_b, omega_b) = (imu.accel_before(state.t, &state.rot), imu.omega_before(state.t));
                if a_b != a || omega_b != omega {
                    m.imu_before = Some(ImuReading { a: m.imu.a + (a_b - a), omega: m.imu.omega + (omega_b - omega), bias: spec.bias });
                }
                measurements.push(m)
            }
            Err(e) => {
                abort = Some(e);
                break;
            }
        }
        truth.push(state.clone());
    }
    // Observers consume whole steps only.
    let keep = if measurements.is_empty() { 0 } else { 2 * ((measurements.len() - 1) / 2) + 1 };
    measurements.truncate(keep);
    truth.truncate(keep);
    SimulationRun { dt: spec.dt, truth, measurements, abort }
}

/// Writes a truth trace as CSV (`t, R (row-major), x, v, z_i, r_i`).
pub fn write_truth_csv<W: std::io::Write>(truth: &[RobotTruth], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let n = truth.first().map_or(0, |s| s.features.len());
    let mut header: Vec<String> = vec!["t".into()];
    header.extend((0..9).map(|k| format!("R{}{}", k / 3, k % 3)));
    header.extend(["x_x", "x_y", "x_z", "v_x", "v_y", "v_z"].map(String::from));
    for i in 0..n {
        header.extend(["x", "y", "z"].map(|a| format!("z{i}_{a}")));
        header.push(format!("r{i}"));
    }
    w.write_record(&header)?;
    for s in truth {
        let mut row = vec![s.t];
        row.extend(s.rot.matrix().transpose().iter().copied());
        row.extend(s.x.iter().chain(s.v.iter()).copied());
        for z in &s.features {
            row.extend(z.iter().copied());
            row.push(z.norm());
        }
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
