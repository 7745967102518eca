//! Stable first-order LTV filters `G₁ = αp/(p+α)` and `G₂ = 1/(p+α)`.
//!
//! Both act elementwise on any [`OdeState`] signal (scalars, vectors, matrices).
//! The realizations are
//!
//! ```text
//! G₂:  ḃ = −α b + u,               output b,           b(0) = 0
//! G₁:  ẋ = −α x + α² u,            output −x + α u,    x(0) = α u(0)
//! ```
//!
//! With these initial conditions the filtered regressor identities used by the
//! observers hold with no exponentially decaying residual.

use crate::ode::{rk4, OdeState, Samples};

/// Right-hand side of the `G₂` realization.
pub fn g2_rate<S: OdeState>(alpha: f64, b: &S, u: &S) -> S {
    u.axpy(-alpha, b)
}

/// Right-hand side of the `G₁` realization.
pub fn g1_rate<S: OdeState>(alpha: f64, x: &S, u: &S) -> S {
    u.scale(alpha * alpha).axpy(-alpha, x)
}

/// Output map of the `G₁` realization.
pub fn g1_output<S: OdeState>(alpha: f64, x: &S, u: &S) -> S {
    u.scale(alpha).axpy(-1.0, x)
}

/// `G₂[·] = 1/(p+α)`.
#[derive(Debug, Clone)]
pub struct G2State<S> {
    pub alpha: f64,
    pub b: S,
}

impl<S: OdeState> G2State<S> {
    /// Exact initialization: `b(0) = 0`. `like` only fixes the shape.
    pub fn exact(alpha: f64, like: &S) -> Self {
        Self { alpha, b: like.scale(0.0) }
    }

    pub fn with_state(alpha: f64, b: S) -> Self {
        Self { alpha, b }
    }

    pub fn output(&self) -> &S {
        &self.b
    }

    /// Advances one RK4 step and returns the output at the step end.
    pub fn step(&mut self, u: &Samples<S>, dt: f64) -> S {
        let alpha = self.alpha;
        self.b = rk4(&self.b, dt, |node, b| g2_rate(alpha, b, u.at(node)));
        self.b.clone()
    }
}

/// `G₁[·] = αp/(p+α)`.
#[derive(Debug, Clone)]
pub struct G1State<S> {
    pub alpha: f64,
    pub x: S,
    last_u: S,
}

impl<S: OdeState> G1State<S> {
    /// Exact initialization from the first input sample: `x(0) = α u(0)`, so the
    /// output starts at zero.
    pub fn exact(alpha: f64, u0: &S) -> Self {
        Self { alpha, x: u0.scale(alpha), last_u: u0.clone() }
    }

    pub fn with_state(alpha: f64, x: S, u0: &S) -> Self {
        Self { alpha, x, last_u: u0.clone() }
    }

    pub fn output(&self) -> S {
        g1_output(self.alpha, &self.x, &self.last_u)
    }

    /// Advances one RK4 step and returns the output at the step end.
    pub fn step(&mut self, u: &Samples<S>, dt: f64) -> S {
        let alpha = self.alpha;
        self.x = rk4(&self.x, dt, |node, x| g1_rate(alpha, x, u.at(node)));
        self.last_u = u.end.clone();
        self.output()
    }
}

/// Initial states of the three filters in the swapping-lemma check.
#[derive(Debug, Clone, Copy, Default)]
pub struct SwapInit {
    /// State of `α/(p+α)[x y]`.
    pub product: f64,
    /// State of `α/(p+α)[x]`.
    pub inner: f64,
    /// State of `1/(p+α)[ẏ · α/(p+α)[x]]`.
    pub correction: f64,
}

/// Residual of the swapping lemma
/// `α/(p+α)[x y] − ( y · α/(p+α)[x] − 1/(p+α)[ẏ · α/(p+α)[x]] )`
/// sampled every `dt` on `[0, horizon]`. Returns `(t, residual)` pairs.
///
/// The residual obeys `ṙ = −α r`, so it is identically zero (up to integration
/// error) when all filters start at zero and decays like `e^{−αt}` otherwise.
pub fn swapping_residual(
    x: impl Fn(f64) -> f64,
    y: impl Fn(f64) -> f64,
    y_dot: impl Fn(f64) -> f64,
    alpha: f64,
    horizon: f64,
    dt: f64,
    init: SwapInit,
) -> Vec<(f64, f64)> {
    let n = (horizon / dt).round() as usize;
    let mut state = nalgebra::Vector3::new(init.product, init.inner, init.correction);
    let residual = |t: f64, s: &nalgebra::Vector3<f64>| s[0] - (y(t) * s[1] - s[2]);
    let mut out = Vec::with_capacity(n + 1);
    out.push((0.0, residual(0.0, &state)));
    for k in 0..n {
        let t0 = k as f64 * dt;
        let ts = Samples::new(t0, t0 + 0.5 * dt, t0 + dt);
        state = rk4(&state, dt, |node, s| {
            let t = *ts.at(node);
            let (xv, yv) = (x(t), y(t));
            nalgebra::Vector3::new(
                alpha * (xv * yv - s[0]),
                alpha * (xv - s[1]),
                y_dot(t) * s[1] - alpha * s[2],
            )
        });
        let t1 = (k + 1) as f64 * dt;
        out.push((t1, residual(t1, &state)));
    }
    out
}
