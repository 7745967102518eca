//! Dynamic extensions that turn bearing, rotation and velocity/acceleration
//! signals into linear regression equations (LREs) in constant parameters.
//!
//! * [`ScalarRegressor`]: velocity is measured. `ξ̇ = −yᵀv` makes `|z| − ξ`
//!   constant, and the filtered bearing kinematics give `y_R = φ θ`.
//! * [`MatrixExtension`]: only the biased acceleration is measured. The state
//!   `χ` (ranges, velocity, bias and the rotated gravity `g_c`) obeys
//!   `χ̇ = A χ + B`; integrating a copy `ξ` from zero and the transition matrix
//!   `Ψ` from the identity gives `χ = ξ + Ψ θ` with `θ = χ(0)`, and the filtered
//!   kinematics give `y_N = ψᵀ θ`.
//!
//! The matrix extension covers both the single-feature ordering
//! `χ = (r, v, b_a, g_c)` and the navigation ordering `χ = (v, b_a, g_c, r₁…r_n)`.
//! Its per-step LRE stacks three rows per feature, feature-major.

use nalgebra::{DMatrix, DVector};

use crate::filters::{g1_output, g1_rate, g2_rate};
use crate::lie3::{hat, magnus_half_increment, magnus_increment, unit_projector, Rot3, RotationIntegrator, Vec3};
use crate::ode::{rk4, Node, OdeState, Samples};
use crate::simulator::{ImuReading, Measurement};

/// Inputs of the velocity-mode extension at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocityInput {
    pub y: Vec3,
    pub omega: Vec3,
    pub v: Vec3,
}

impl VelocityInput {
    /// Inputs for one step from measurements at its start, midpoint and end,
    /// using the left-limit IMU reading at the end.
    pub fn from_step(m: &Samples<&Measurement>, feature: usize) -> Samples<Self> {
        let at = |m: &Measurement, imu: &ImuReading| Self { y: m.bearing(feature), omega: imu.omega, v: m.velocity };
        Samples::new(at(m.start, &m.start.imu), at(m.mid, &m.mid.imu), at(m.end, m.end.imu_before()))
    }
}

/// Integrated states of [`ScalarRegressor`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarLre {
    /// `G₁[y]` realization state.
    pub g1_y: Vec3,
    /// `G₂[Ω×y]`.
    pub g2_wy: Vec3,
    /// `G₂[α Π_y v + (yᵀv) φ]`.
    pub s: Vec3,
    pub xi: f64,
}

impl OdeState for ScalarLre {
    fn axpy(&self, h: f64, d: &Self) -> Self {
        Self {
            g1_y: self.g1_y + d.g1_y * h,
            g2_wy: self.g2_wy + d.g2_wy * h,
            s: self.s + d.s * h,
            xi: self.xi + d.xi * h,
        }
    }
    fn scale(&self, c: f64) -> Self {
        Self { g1_y: self.g1_y * c, g2_wy: self.g2_wy * c, s: self.s * c, xi: self.xi * c }
    }
}

impl ScalarLre {
    /// Exact filter initialization from the first bearing sample.
    pub fn new(alpha: f64, xi0: f64, y0: &Vec3) -> Self {
        Self { g1_y: y0 * alpha, g2_wy: Vec3::zeros(), s: Vec3::zeros(), xi: xi0 }
    }

    /// `φ = G₁[y] + α G₂[Ω×y]`.
    pub fn phi(&self, alpha: f64, y: &Vec3) -> Vec3 {
        g1_output(alpha, &self.g1_y, y) + self.g2_wy * alpha
    }

    /// `y_R = −G₂[α Π_y v + (yᵀv) φ] − φ ξ`.
    pub fn y_r(&self, phi: &Vec3) -> Vec3 {
        -self.s - phi * self.xi
    }

    pub fn rate(&self, alpha: f64, inp: &VelocityInput) -> Self {
        let phi = self.phi(alpha, &inp.y);
        let ytv = inp.y.dot(&inp.v);
        let s_in = unit_projector(&inp.y) * inp.v * alpha + phi * ytv;
        Self {
            g1_y: g1_rate(alpha, &self.g1_y, &inp.y),
            g2_wy: g2_rate(alpha, &self.g2_wy, &inp.omega.cross(&inp.y)),
            s: g2_rate(alpha, &self.s, &s_in),
            xi: -ytv,
        }
    }
}

/// Velocity-mode LRE generator.
#[derive(Debug, Clone)]
pub struct ScalarRegressor {
    pub alpha: f64,
    pub lre: ScalarLre,
    last_y: Vec3,
}

/// Output of one [`ScalarRegressor::step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarLreSample {
    pub phi: Vec3,
    pub y_r: Vec3,
    pub xi: f64,
}

impl ScalarRegressor {
    pub fn new(alpha: f64, xi0: f64, y0: &Vec3) -> Self {
        Self { alpha, lre: ScalarLre::new(alpha, xi0, y0), last_y: *y0 }
    }

    /// Current `(φ, y_R, ξ)`.
    pub fn sample(&self) -> ScalarLreSample {
        let phi = self.lre.phi(self.alpha, &self.last_y);
        ScalarLreSample { phi, y_r: self.lre.y_r(&phi), xi: self.lre.xi }
    }

    pub fn step(&mut self, inputs: &Samples<VelocityInput>, dt: f64) -> ScalarLreSample {
        let alpha = self.alpha;
        self.lre = rk4(&self.lre, dt, |node, s| s.rate(alpha, inputs.at(node)));
        self.last_y = inputs.end.y;
        self.sample()
    }
}

/// Inputs of the acceleration-mode extensions at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct AccelInput {
    pub a: Vec3,
    pub omega: Vec3,
    /// One bearing per feature.
    pub bearings: Vec<Vec3>,
}

impl AccelInput {
    /// Inputs for one step from measurements at its start, midpoint and end,
    /// using the left-limit IMU reading at the end.
    pub fn from_step(m: &Samples<&Measurement>) -> Samples<Self> {
        let at = |m: &Measurement, imu: &ImuReading| Self {
            a: imu.a,
            omega: imu.omega,
            bearings: (0..m.camera.bearings.len()).map(|i| m.bearing(i)).collect(),
        };
        Samples::new(at(m.start, &m.start.imu), at(m.mid, &m.mid.imu), at(m.end, m.end.imu_before()))
    }
}

/// Ordering of the extended state `χ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// `χ = (r, v, b_a, g_c) ∈ ℝ¹⁰`.
    SingleFeature,
    /// `χ = (v, b_a, g_c, r₁, …, r_n) ∈ ℝ⁹⁺ⁿ`.
    Navigation { features: usize },
}

impl Layout {
    pub fn dim(&self) -> usize {
        match self {
            Layout::SingleFeature => 10,
            Layout::Navigation { features } => 9 + features,
        }
    }

    pub fn features(&self) -> usize {
        match self {
            Layout::SingleFeature => 1,
            Layout::Navigation { features } => *features,
        }
    }

    pub fn velocity(&self) -> usize {
        match self {
            Layout::SingleFeature => 1,
            Layout::Navigation { .. } => 0,
        }
    }

    pub fn bias(&self) -> usize {
        self.velocity() + 3
    }

    pub fn gravity(&self) -> usize {
        self.velocity() + 6
    }

    pub fn range(&self, i: usize) -> usize {
        match self {
            Layout::SingleFeature => 0,
            Layout::Navigation { .. } => 9 + i,
        }
    }

    /// Assembles `χ` from its physical parts.
    pub fn pack(&self, ranges: &[f64], v: &Vec3, bias: &Vec3, g_c: &Vec3) -> DVector<f64> {
        let mut chi = DVector::zeros(self.dim());
        for (i, r) in ranges.iter().enumerate() {
            chi[self.range(i)] = *r;
        }
        chi.fixed_rows_mut::<3>(self.velocity()).copy_from(v);
        chi.fixed_rows_mut::<3>(self.bias()).copy_from(bias);
        chi.fixed_rows_mut::<3>(self.gravity()).copy_from(g_c);
        chi
    }

    /// `A(ȳ, Ω, Q)`.
    pub fn system_matrix(&self, bearings: &[Vec3], omega: &Vec3, q: &Rot3) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.dim(), self.dim());
        let (v, b, g) = (self.velocity(), self.bias(), self.gravity());
        a.fixed_view_mut::<3, 3>(v, v).copy_from(&(-hat(omega)));
        a.fixed_view_mut::<3, 3>(v, b).fill_with_identity();
        a.fixed_view_mut::<3, 3>(v, g).copy_from(&q.matrix().transpose());
        for (i, y) in bearings.iter().enumerate() {
            a.fixed_view_mut::<1, 3>(self.range(i), v).copy_from(&(-y.transpose()));
        }
        a
    }

    /// `A x + B` without forming `A`, for a matrix `x` whose columns are states.
    fn apply(&self, x: &DMatrix<f64>, bearings: &[Vec3], omega: &Vec3, q: &Rot3, accel: Option<&Vec3>) -> DMatrix<f64> {
        let (v, b, g) = (self.velocity(), self.bias(), self.gravity());
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        let om = hat(omega);
        let qt = q.matrix().transpose();
        for c in 0..x.ncols() {
            let xv = x.fixed_view::<3, 1>(v, c).into_owned();
            let xb = x.fixed_view::<3, 1>(b, c).into_owned();
            let xg = x.fixed_view::<3, 1>(g, c).into_owned();
            let mut dv = -om * xv + xb + qt * xg;
            if c == 0 {
                if let Some(a) = accel {
                    dv += a;
                }
            }
            out.fixed_view_mut::<3, 1>(v, c).copy_from(&dv);
            for (i, y) in bearings.iter().enumerate() {
                out[(self.range(i), c)] = -y.dot(&xv);
            }
        }
        out
    }
}

/// Per-feature filter states of the matrix extension.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFilters {
    /// `G₁[y_i]` realization state.
    pub g1_y: Vec3,
    /// `G₂[Ω×y_i]`.
    pub g2_wy: Vec3,
    /// `G₂[(φ_i y_iᵀ + α Π_{y_i}) T_v [ξ Ψ]]`, 3 × (1 + dim).
    pub s: DMatrix<f64>,
}

/// Integrated part of the matrix extension. Column 0 of `xp` is `ξ`, the rest is `Ψ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtensionOde {
    pub xp: DMatrix<f64>,
    pub features: Vec<FeatureFilters>,
}

impl OdeState for ExtensionOde {
    fn axpy(&self, h: f64, d: &Self) -> Self {
        Self {
            xp: &self.xp + &d.xp * h,
            features: self
                .features
                .iter()
                .zip(&d.features)
                .map(|(a, b)| FeatureFilters {
                    g1_y: a.g1_y + b.g1_y * h,
                    g2_wy: a.g2_wy + b.g2_wy * h,
                    s: &a.s + &b.s * h,
                })
                .collect(),
        }
    }
    fn scale(&self, c: f64) -> Self {
        Self {
            xp: &self.xp * c,
            features: self
                .features
                .iter()
                .map(|a| FeatureFilters { g1_y: a.g1_y * c, g2_wy: a.g2_wy * c, s: &a.s * c })
                .collect(),
        }
    }
}

/// One vector LRE sample `y_N = ψᵀ θ`: `psi` is dim × 3n, `y` has 3n rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LreSample {
    pub psi: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl LreSample {
    /// `y − ψᵀθ`.
    pub fn residual(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.y - self.psi.tr_mul(theta)
    }
}

impl ExtensionOde {
    fn new(layout: &Layout, alpha: f64, bearings0: &[Vec3]) -> Self {
        let dim = layout.dim();
        let mut xp = DMatrix::zeros(dim, dim + 1);
        xp.view_mut((0, 1), (dim, dim)).fill_with_identity();
        Self {
            xp,
            features: bearings0
                .iter()
                .map(|y| FeatureFilters { g1_y: y * alpha, g2_wy: Vec3::zeros(), s: DMatrix::zeros(3, dim + 1) })
                .collect(),
        }
    }

    pub fn xi(&self) -> DVector<f64> {
        self.xp.column(0).into_owned()
    }

    pub fn psi_matrix(&self) -> DMatrix<f64> {
        self.xp.columns(1, self.xp.ncols() - 1).into_owned()
    }

    fn phi(&self, alpha: f64, i: usize, y: &Vec3) -> Vec3 {
        let f = &self.features[i];
        g1_output(alpha, &f.g1_y, y) + f.g2_wy * alpha
    }

    /// Regressor pair `(ψ, y_N)` for the current state and bearings.
    pub fn lre(&self, layout: &Layout, alpha: f64, bearings: &[Vec3]) -> LreSample {
        let dim = layout.dim();
        let n = bearings.len();
        let mut psi = DMatrix::zeros(dim, 3 * n);
        let mut y = DVector::zeros(3 * n);
        for (i, yi) in bearings.iter().enumerate() {
            let phi = self.phi(alpha, i, yi);
            let r_row = self.xp.row(layout.range(i));
            // Rows of ψᵀ for this feature: φ_i e_rᵀ Ψ + S_Ψ.
            let s = &self.features[i].s;
            for k in 0..3 {
                y[3 * i + k] = -phi[k] * r_row[0] - s[(k, 0)];
                for j in 0..dim {
                    psi[(j, 3 * i + k)] = phi[k] * r_row[j + 1] + s[(k, j + 1)];
                }
            }
        }
        LreSample { psi, y }
    }

    fn rate(&self, layout: &Layout, alpha: f64, inp: &AccelInput, q: &Rot3) -> Self {
        let xp_dot = layout.apply(&self.xp, &inp.bearings, &inp.omega, q, Some(&inp.a));
        let v = layout.velocity();
        let tv = self.xp.rows(v, 3);
        let features = inp
            .bearings
            .iter()
            .enumerate()
            .map(|(i, y)| {
                let f = &self.features[i];
                let phi = self.phi(alpha, i, y);
                let m = phi * y.transpose() + unit_projector(y) * alpha;
                let s_in = m * tv;
                FeatureFilters {
                    g1_y: g1_rate(alpha, &f.g1_y, y),
                    g2_wy: g2_rate(alpha, &f.g2_wy, &inp.omega.cross(y)),
                    s: DMatrix::from_column_slice(3, s_in.ncols(), s_in.as_slice()) - &f.s * alpha,
                }
            })
            .collect();
        Self { xp: xp_dot, features }
    }
}

/// Acceleration-mode dynamic extension with its regressor filters.
#[derive(Debug, Clone)]
pub struct MatrixExtension {
    pub layout: Layout,
    pub alpha: f64,
    q: RotationIntegrator,
    pub ode: ExtensionOde,
    last_bearings: Vec<Vec3>,
}

/// Attitude copy `Q` at the three nodes of a step.
pub fn attitude_nodes(q: &Rot3, omegas: &Samples<Vec3>, dt: f64) -> Samples<Rot3> {
    let (w0, wm, w1) = (&omegas.start, &omegas.mid, &omegas.end);
    Samples::new(
        *q,
        q.compose(&Rot3::exp(&magnus_half_increment(w0, wm, w1, dt))),
        q.compose(&Rot3::exp(&magnus_increment(w0, wm, w1, dt))),
    )
}

impl MatrixExtension {
    /// Single-feature extension with `ξ(0) = 0`, `Ψ(0) = I` and exact filters.
    pub fn single_feature(alpha: f64, y0: &Vec3, q0: Rot3) -> Self {
        Self::with_layout(Layout::SingleFeature, alpha, &[*y0], q0)
    }

    /// Navigation extension over `bearings0.len()` landmarks.
    pub fn navigation(alpha: f64, bearings0: &[Vec3], q0: Rot3) -> Self {
        Self::with_layout(Layout::Navigation { features: bearings0.len() }, alpha, bearings0, q0)
    }

    fn with_layout(layout: Layout, alpha: f64, bearings0: &[Vec3], q0: Rot3) -> Self {
        Self {
            layout,
            alpha,
            q: RotationIntegrator::new(q0),
            ode: ExtensionOde::new(&layout, alpha, bearings0),
            last_bearings: bearings0.to_vec(),
        }
    }

    pub fn q(&self) -> &Rot3 {
        self.q.rotation()
    }

    pub fn xi(&self) -> DVector<f64> {
        self.ode.xi()
    }

    pub fn psi_matrix(&self) -> DMatrix<f64> {
        self.ode.psi_matrix()
    }

    /// `ξ + Ψ θ`.
    pub fn chi(&self, theta: &DVector<f64>) -> DVector<f64> {
        self.ode.xi() + self.ode.psi_matrix() * theta
    }

    /// `φ_i` for the most recent bearings.
    pub fn phi(&self, i: usize) -> Vec3 {
        self.ode.phi(self.alpha, i, &self.last_bearings[i])
    }

    pub fn lre(&self) -> LreSample {
        self.ode.lre(&self.layout, self.alpha, &self.last_bearings)
    }

    pub fn bearings(&self) -> &[Vec3] {
        &self.last_bearings
    }

    /// Advances the extension together with an arbitrary co-integrated state
    /// `aux`, whose rate may depend on the stage LRE and extension state. Used
    /// by the observers to integrate their estimators in lock-step.
    pub fn step_with<S: OdeState>(
        &mut self,
        inputs: &Samples<AccelInput>,
        dt: f64,
        aux: &S,
        mut aux_rate: impl FnMut(Node, &S, &LreSample, &ExtensionOde) -> S,
    ) -> S {
        let omegas = inputs.map(|i| i.omega);
        let qs = attitude_nodes(self.q.rotation(), &omegas, dt);
        let (layout, alpha) = (self.layout, self.alpha);
        let (ode, aux) = rk4(&(self.ode.clone(), aux.clone()), dt, |node, (e, x)| {
            let inp = inputs.at(node);
            let lre = e.lre(&layout, alpha, &inp.bearings);
            (e.rate(&layout, alpha, inp, qs.at(node)), aux_rate(node, x, &lre, e))
        });
        self.ode = ode;
        self.q.advance(&magnus_increment(&omegas.start, &omegas.mid, &omegas.end, dt));
        self.last_bearings = inputs.end.bearings.clone();
        aux
    }

    /// Advances one step and returns the LRE at the step end.
    pub fn step(&mut self, inputs: &Samples<AccelInput>, dt: f64) -> LreSample {
        self.step_with(inputs, dt, &0.0, |_, _, _, _| 0.0);
        self.lre()
    }

    /// 2-norm condition number of `Ψ`.
    pub fn psi_condition(&self) -> f64 {
        let sv = self.psi_matrix().singular_values();
        let (mx, mn) = sv.iter().fold((0.0f64, f64::INFINITY), |(a, b), &s| (a.max(s), b.min(s)));
        if mn > 0.0 { mx / mn } else { f64::INFINITY }
    }
}

/// Checks that some pair of consecutive landmark differences is non-collinear.
pub fn check_landmark_geometry(landmarks: &[Vec3]) -> Result<(), String> {
    if landmarks.len() < 3 {
        return Err(format!(
            "landmark geometry: at least three landmarks are needed for two non-collinear differences, got {}",
            landmarks.len()
        ));
    }
    let etas: Vec<Vec3> = landmarks.windows(2).map(|w| w[1] - w[0]).collect();
    let scale = etas.iter().map(|e| e.norm()).fold(0.0, f64::max).max(1e-300);
    for i in 0..etas.len() {
        for j in i + 1..etas.len() {
            if etas[i].cross(&etas[j]).norm() > 1e-9 * scale * scale {
                return Ok(());
            }
        }
    }
    Err("landmark geometry: all consecutive landmark differences are collinear".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_indices() {
        let l = Layout::SingleFeature;
        assert_eq!((l.dim(), l.range(0), l.velocity(), l.bias(), l.gravity()), (10, 0, 1, 4, 7));
        let l = Layout::Navigation { features: 3 };
        assert_eq!((l.dim(), l.velocity(), l.bias(), l.gravity(), l.range(2)), (12, 0, 3, 6, 11));
    }

    #[test]
    fn apply_matches_system_matrix() {
        let l = Layout::Navigation { features: 2 };
        let ys = [Vec3::new(0.6, 0.0, 0.8), Vec3::new(0.0, 1.0, 0.0)];
        let w = Vec3::new(0.1, -0.3, 0.2);
        let q = Rot3::from_axis_angle(&Vec3::new(1.0, 1.0, 1.0), 0.4);
        let x = DMatrix::from_fn(l.dim(), 4, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let a = l.system_matrix(&ys, &w, &q);
        assert!((l.apply(&x, &ys, &w, &q, None) - &a * &x).norm() < 1e-14);
    }

    #[test]
    fn static_matrix_extension_is_matrix_exponential() {
        // Constant a = Ω = 0 and fixed y: A is constant and Ψ(t) = exp(A t).
        let y = Vec3::new(1.0, 2.0, 2.0) / 3.0;
        let q0 = Rot3::from_axis_angle(&Vec3::new(0.0, 1.0, 1.0), 0.3);
        let mut ext = MatrixExtension::single_feature(1.0, &y, q0);
        let inp = AccelInput { a: Vec3::zeros(), omega: Vec3::zeros(), bearings: vec![y] };
        let dt = 1e-3;
        for _ in 0..1000 {
            ext.step(&Samples::constant(inp.clone()), dt);
        }
        let a = Layout::SingleFeature.system_matrix(&[y], &Vec3::zeros(), &q0);
        // Scaling-and-squaring with a Taylor series as the independent route.
        let m = &a / 1024.0;
        let mut term = DMatrix::identity(10, 10);
        let mut e = DMatrix::identity(10, 10);
        for k in 1..20 {
            term = &term * &m / k as f64;
            e += &term;
        }
        for _ in 0..10 {
            e = &e * &e;
        }
        assert!((ext.psi_matrix() - e).abs().max() < 1e-8);
        assert!(ext.xi().norm() == 0.0);
    }

    #[test]
    fn landmark_geometry() {
        let good = [Vec3::new(-2.0, 1.0, 3.0), Vec3::new(-2.0, 2.0, 1.0), Vec3::new(1.0, 1.0, 1.0)];
        assert!(check_landmark_geometry(&good).is_ok());
        let line = [Vec3::zeros(), Vec3::x(), Vec3::x() * 2.0];
        assert!(check_landmark_geometry(&line).is_err());
        assert!(check_landmark_geometry(&good[..1]).is_err());
    }
}
