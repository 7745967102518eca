//! Classical RK4 with exogenous inputs sampled at the step start, midpoint and end.
//!
//! All dynamics in the crate (truth, filters, extensions, observers) are advanced
//! with [`rk4`]. Inputs are supplied as [`Samples`], so a measurement stream
//! sampled on a half-step grid feeds every stage with a measured value.

use nalgebra::{DMatrix, DVector, SMatrix};

/// RK4 stage location inside a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Node {
    Start,
    Mid,
    End,
}

/// A signal sampled at the three RK4 nodes of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Samples<T> {
    pub start: T,
    pub mid: T,
    pub end: T,
}

impl<T> Samples<T> {
    pub fn new(start: T, mid: T, end: T) -> Self {
        Self { start, mid, end }
    }

    pub fn at(&self, node: Node) -> &T {
        match node {
            Node::Start => &self.start,
            Node::Mid => &self.mid,
            Node::End => &self.end,
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Samples<U> {
        Samples { start: f(&self.start), mid: f(&self.mid), end: f(&self.end) }
    }
}

impl<T: Clone> Samples<T> {
    pub fn constant(v: T) -> Self {
        Self { start: v.clone(), mid: v.clone(), end: v }
    }
}

/// State types that RK4 can combine: `self + h·d`.
pub trait OdeState: Clone {
    fn axpy(&self, h: f64, d: &Self) -> Self;
    fn scale(&self, c: f64) -> Self;
}

impl OdeState for f64 {
    fn axpy(&self, h: f64, d: &Self) -> Self {
        self + h * d
    }
    fn scale(&self, c: f64) -> Self {
        self * c
    }
}

impl<const R: usize, const C: usize> OdeState for SMatrix<f64, R, C> {
    fn axpy(&self, h: f64, d: &Self) -> Self {
        self + d * h
    }
    fn scale(&self, c: f64) -> Self {
        self * c
    }
}

impl OdeState for DVector<f64> {
    fn axpy(&self, h: f64, d: &Self) -> Self {
        self + d * h
    }
    fn scale(&self, c: f64) -> Self {
        self * c
    }
}

impl OdeState for DMatrix<f64> {
    fn axpy(&self, h: f64, d: &Self) -> Self {
        self + d * h
    }
    fn scale(&self, c: f64) -> Self {
        self * c
    }
}

impl<A: OdeState, B: OdeState> OdeState for (A, B) {
    fn axpy(&self, h: f64, d: &Self) -> Self {
        (self.0.axpy(h, &d.0), self.1.axpy(h, &d.1))
    }
    fn scale(&self, c: f64) -> Self {
        (self.0.scale(c), self.1.scale(c))
    }
}

/// Stage nodes of [`rk4`], in evaluation order.
pub const RK4_NODES: [Node; 4] = [Node::Start, Node::Mid, Node::Mid, Node::End];
/// Stage times of [`rk4`] as fractions of the step.
pub const RK4_TIMES: [f64; 4] = [0.0, 0.5, 0.5, 1.0];
/// Quadrature weights of the [`rk4`] stages.
pub const RK4_WEIGHTS: [f64; 4] = [1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0];

/// One classical RK4 step. `f(node, x)` returns the state derivative with inputs
/// taken at `node`. Stages are evaluated in the order of [`RK4_NODES`].
pub fn rk4<S: OdeState>(x: &S, dt: f64, mut f: impl FnMut(Node, &S) -> S) -> S {
    rk4_staged(x, dt, |_, node, s| f(node, s))
}

/// [`rk4`] with the stage index `0..4` passed to `f`.
pub fn rk4_staged<S: OdeState>(x: &S, dt: f64, mut f: impl FnMut(usize, Node, &S) -> S) -> S {
    let k1 = f(0, Node::Start, x);
    let k2 = f(1, Node::Mid, &x.axpy(0.5 * dt, &k1));
    let k3 = f(2, Node::Mid, &x.axpy(0.5 * dt, &k2));
    let k4 = f(3, Node::End, &x.axpy(dt, &k3));
    x.axpy(dt / 6.0, &k1)
        .axpy(dt / 3.0, &k2)
        .axpy(dt / 3.0, &k3)
        .axpy(dt / 6.0, &k4)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rk4_fourth_order() {
        // ẋ = −x + sin t from x(0) = 1: x = 1.5e^{−t} + (sin t − cos t)/2.
        let exact = |t: f64| 1.5 * (-t).exp() + 0.5 * (t.sin() - t.cos());
        let err = |dt: f64| {
            let mut x = 1.0;
            let n = (1.0 / dt).round() as usize;
            for k in 0..n {
                let t = k as f64 * dt;
                let u = Samples::new(t.sin(), (t + 0.5 * dt).sin(), (t + dt).sin());
                x = rk4(&x, dt, |node, x| -x + u.at(node));
            }
            (x - exact(1.0)).abs()
        };
        let ratio = err(0.1) / err(0.05);
        assert!(ratio > 14.0 && ratio < 18.0, "ratio {ratio}");
    }
}
