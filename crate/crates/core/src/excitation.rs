//! Excitation diagnostics for recorded regressor traces.
//!
//! A trace is a list of `(t, ψ)` samples with `ψ` of shape `n × m`; a vector
//! regressor `φ ∈ ℝⁿ` is the `m = 1` case. The Gram matrix over `[t0, t1]` is
//! `∫ ψψᵀ dt`, evaluated by the trapezoid rule on the sample grid.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default interval-excitation threshold on `λ_min` of the Gram matrix.
pub const DEFAULT_IE_THRESHOLD: f64 = 1e-6;

fn outer(psi: &DMatrix<f64>) -> DMatrix<f64> {
    psi * psi.transpose()
}

fn check_trace(trace: &[(f64, DMatrix<f64>)]) -> Result<usize> {
    let Some((_, first)) = trace.first() else {
        return Err(Error::Contract("empty regressor trace".into()));
    };
    let n = first.nrows();
    for w in trace.windows(2) {
        if w[1].0 <= w[0].0 {
            return Err(Error::Contract(format!("trace times not increasing at t = {}", w[1].0)));
        }
    }
    if let Some((t, p)) = trace.iter().find(|(_, p)| p.nrows() != n) {
        return Err(Error::Dimension(format!("regressor at t = {t} has {} rows, expected {n}", p.nrows())));
    }
    Ok(n)
}

/// Cumulative Gram matrices `C_k = ∫_{t_0}^{t_k} ψψᵀ`.
pub fn cumulative_gram(trace: &[(f64, DMatrix<f64>)]) -> Result<Vec<DMatrix<f64>>> {
    let n = check_trace(trace)?;
    let mut out = Vec::with_capacity(trace.len());
    let mut acc = DMatrix::zeros(n, n);
    let mut prev = outer(&trace[0].1);
    out.push(acc.clone());
    for w in trace.windows(2) {
        let cur = outer(&w[1].1);
        acc += (&prev + &cur) * (0.5 * (w[1].0 - w[0].0));
        out.push(acc.clone());
        prev = cur;
    }
    Ok(out)
}

/// `∫_{t0}^{t1} ψψᵀ dt`. The window must lie inside the recorded time span.
pub fn gram_integral(trace: &[(f64, DMatrix<f64>)], t0: f64, t1: f64) -> Result<DMatrix<f64>> {
    let n = check_trace(trace)?;
    let (ta, tb) = (trace[0].0, trace[trace.len() - 1].0);
    let eps = 1e-9 * (tb - ta).abs().max(1.0);
    if !(t0 <= t1) || t0 < ta - eps || t1 > tb + eps {
        return Err(Error::Contract(format!("window [{t0}, {t1}] outside recorded span [{ta}, {tb}]")));
    }
    // Integrand at an arbitrary time by linear interpolation of ψψᵀ.
    let at = |t: f64| -> DMatrix<f64> {
        let k = trace.partition_point(|(s, _)| *s <= t).clamp(1, trace.len() - 1);
        let (s0, p0) = &trace[k - 1];
        let (s1, p1) = &trace[k];
        let w = ((t - s0) / (s1 - s0)).clamp(0.0, 1.0);
        outer(p0) * (1.0 - w) + outer(p1) * w
    };
    let mut acc = DMatrix::zeros(n, n);
    let mut t_prev = t0;
    let mut f_prev = at(t0);
    for (t, p) in trace.iter().filter(|(t, _)| *t > t0 && *t < t1) {
        let f = outer(p);
        acc += (&f_prev + &f) * (0.5 * (t - t_prev));
        t_prev = *t;
        f_prev = f;
    }
    let f_end = at(t1);
    acc += (&f_prev + &f_end) * (0.5 * (t1 - t_prev));
    Ok(acc)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
}

/// Earliest sample time `t★` with `λ_min(∫_0^{t★} ψψᵀ) > delta`, or `None`.
pub fn is_ie(trace: &[(f64, DMatrix<f64>)], delta: f64) -> Result<Option<f64>> {
    let cum = cumulative_gram(trace)?;
    Ok(cum.iter().zip(trace).find(|(c, _)| min_eigenvalue(c) > delta).map(|(_, (t, _))| *t))
}

/// `λ_min` of the Gram matrix over the whole trace.
pub fn ie_level(trace: &[(f64, DMatrix<f64>)]) -> Result<f64> {
    let cum = cumulative_gram(trace)?;
    Ok(min_eigenvalue(cum.last().expect("non-empty")))
}

/// Worst `λ_min` of the Gram matrix over all sample-aligned windows of length
/// `window` inside the trace, or `None` if the trace is shorter than `window`.
pub fn pe_level(trace: &[(f64, DMatrix<f64>)], window: f64) -> Result<Option<f64>> {
    if !(window > 0.0) {
        return Err(Error::Contract(format!("PE window must be positive, got {window}")));
    }
    let cum = cumulative_gram(trace)?;
    let mut worst: Option<f64> = None;
    let mut j = 0;
    for i in 0..trace.len() {
        while j < trace.len() && trace[j].0 - trace[i].0 < window - 1e-12 {
            j += 1;
        }
        if j == trace.len() {
            break;
        }
        let l = min_eigenvalue(&(&cum[j] - &cum[i]));
        worst = Some(worst.map_or(l, |w: f64| w.min(l)));
    }
    Ok(worst)
}

/// Least-squares slope of `−log|r(t)|`, i.e. the exponential decay rate of a
/// residual trace. Samples within a few ulps of zero relative to the peak are
/// ignored. `None` if fewer than two usable samples remain.
pub fn log_decay_rate(residual: &[(f64, f64)]) -> Option<f64> {
    let peak = residual.iter().map(|(_, r)| r.abs()).fold(0.0, f64::max);
    let floor = peak * 1e3 * f64::EPSILON;
    let pts: Vec<(f64, f64)> = residual
        .iter()
        .filter(|(_, r)| r.is_finite() && r.abs() > floor && r.abs() > 0.0)
        .map(|(t, r)| (*t, -r.abs().ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ml = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - ml)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Excitation summary written next to a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcitationReport {
    pub threshold: f64,
    /// Earliest time the cumulative Gram matrix exceeds `threshold`.
    pub ie_time: Option<f64>,
    /// `λ_min` of the Gram matrix over the full run.
    pub ie_level: f64,
    pub pe_window: f64,
    /// Worst windowed `λ_min`; `None` if the run is shorter than the window.
    pub pe_level: Option<f64>,
    /// `(t, λ_min(∫_0^t ψψᵀ))` at every trace sample.
    pub gram_trace: Vec<(f64, f64)>,
}

/// Builds an [`ExcitationReport`].
pub fn excitation_report(trace: &[(f64, DMatrix<f64>)], threshold: f64, pe_window: f64) -> Result<ExcitationReport> {
    let cum = cumulative_gram(trace)?;
    let gram_trace: Vec<(f64, f64)> = cum.iter().zip(trace).map(|(c, (t, _))| (*t, min_eigenvalue(c))).collect();
    let ie_time = gram_trace.iter().find(|(_, l)| *l > threshold).map(|(t, _)| *t);
    let ie_level = gram_trace.last().map_or(0.0, |(_, l)| *l);
    Ok(ExcitationReport { threshold, ie_time, ie_level, pe_window, pe_level: pe_level(trace, pe_window)?, gram_trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trace_of(f: impl Fn(f64) -> Vec<f64>, t_end: f64, dt: f64) -> Vec<(f64, DMatrix<f64>)> {
        let n = (t_end / dt).round() as usize;
        (0..=n)
            .map(|k| {
                let t = k as f64 * dt;
                let v = f(t);
                (t, DMatrix::from_column_slice(v.len(), 1, &v))
            })
            .collect()
    }

    #[test]
    fn gram_of_sin_cos() {
        let pi = std::f64::consts::PI;
        let tr = trace_of(|t| vec![t.sin(), t.cos()], 2.0 * pi, 2.0 * pi / 6000.0);
        let g = gram_integral(&tr, 0.0, 2.0 * pi).unwrap();
        assert!((g[(0, 0)] - pi).abs() < 1e-5);
        assert!((g[(1, 1)] - pi).abs() < 1e-5);
        assert!(g[(0, 1)].abs() < 1e-5);
    }

    #[test]
    fn gram_window_outside_is_error() {
        let tr = trace_of(|t| vec![t], 1.0, 0.1);
        assert!(matches!(gram_integral(&tr, 0.5, 2.0), Err(Error::Contract(_))));
        assert!(matches!(gram_integral(&tr, 0.8, 0.2), Err(Error::Contract(_))));
    }

    #[test]
    fn gram_off_grid_window() {
        // ∫_{0.25}^{0.75} t² dt with linear interpolation of an exact-on-grid integrand.
        let tr = trace_of(|t| vec![t], 1.0, 1e-3);
        let g = gram_integral(&tr, 0.25, 0.75).unwrap();
        let exact = (0.75f64.powi(3) - 0.25f64.powi(3)) / 3.0;
        assert!((g[(0, 0)] - exact).abs() < 1e-6);
    }

    #[test]
    fn constant_regressor_is_not_ie_in_2d() {
        let tr = trace_of(|_| vec![1.0, 0.0], 5.0, 0.01);
        assert_eq!(is_ie(&tr, DEFAULT_IE_THRESHOLD).unwrap(), None);
    }

    #[test]
    fn pulse_is_ie_not_pe() {
        let tr = trace_of(|t| if t < 1.0 { vec![t.sin(), t.cos()] } else { vec![0.0, 0.0] }, 10.0, 1e-3);
        let t_star = is_ie(&tr, 1e-3).unwrap().expect("excited");
        assert!(t_star < 1.0);
        assert!(pe_level(&tr, 2.0).unwrap().unwrap() < 1e-12);
    }

    #[test]
    fn decay_rate_of_exponential() {
        let r: Vec<(f64, f64)> = (0..1000).map(|k| (k as f64 * 0.01, 3.0 * (-2.5 * k as f64 * 0.01).exp())).collect();
        assert!((log_decay_rate(&r).unwrap() - 2.5).abs() < 1e-9);
        assert_eq!(log_decay_rate(&[(0.0, 1.0)]), None);
    }

    #[test]
    fn report_round_trips() {
        let tr = trace_of(|t| vec![t.sin(), t.cos()], 3.0, 0.01);
        let r = excitation_report(&tr, DEFAULT_IE_THRESHOLD, 1.0).unwrap();
        let s = serde_json::to_string(&r).unwrap();
        let back: ExcitationReport = serde_json::from_str(&s).unwrap();
        assert_eq!(r, back);
    }

    proptest! {
        #[test]
        fn gram_is_symmetric_psd(a in -3.0f64..3.0, b in -3.0f64..3.0, w in 0.1f64..5.0) {
            let tr = trace_of(|t| vec![a * (w * t).sin(), b + t, (w * t).cos()], 2.0, 0.01);
            let g = gram_integral(&tr, 0.0, 2.0).unwrap();
            prop_assert!((&g - g.transpose()).amax() < 1e-12);
            prop_assert!(min_eigenvalue(&g) > -1e-10);
        }

        #[test]
        fn gram_is_additive(split in 0.1f64..1.9) {
            let tr = trace_of(|t| vec![t.sin(), (3.0 * t).cos()], 2.0, 0.01);
            let whole = gram_integral(&tr, 0.0, 2.0).unwrap();
            let parts = gram_integral(&tr, 0.0, split).unwrap() + gram_integral(&tr, split, 2.0).unwrap();
            prop_assert!((whole - parts).amax() < 1e-10);
        }
    }
}
