//! Stretched-exponential and power-law fits of tail curves.
//!
//! The stretched model is log y = c - rate * n^tau. Without a forced tau two
//! estimates are formed: the log(-log y) versus log n slope, and the tau that
//! maximises r^2 of the forced-tau regression (a profile fit, insensitive to a
//! prefactor in front of the exponential). The one with the better forced-tau
//! r^2 is reported; both are kept in the record.

use serde::{Deserialize, Serialize};

use super::TailEstimate;
use crate::error::{Error, Result};
use crate::numeric::linear_regression;

pub const MIN_POINTS: usize = 5;
const TAU_LO: f64 = 0.01;
const TAU_HI: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub tau: f64,
    pub rate: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub window: [usize; 2],
    pub points: usize,
    /// Estimate from the log(-log y) versus log n regression (None when forced).
    pub tau_loglog: Option<f64>,
    pub tau_profile: Option<f64>,
    pub forced: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub exponent: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelComparison {
    pub stretched: DecayFit,
    pub power_law: PowerLawFit,
    pub bic_stretched: f64,
    pub bic_power_law: f64,
    /// (n_lo, n_hi, tau) for widening windows.
    pub tau_drift: Vec<(usize, usize, f64)>,
    pub preferred: String,
}

fn forced(ns: &[f64], ly: &[f64], tau: f64) -> (f64, f64, f64) {
    let x: Vec<f64> = ns.iter().map(|n| n.powf(tau)).collect();
    let (slope, icpt, r2) = linear_regression(&x, ly);
    (-slope, icpt, r2)
}

fn profile_tau(ns: &[f64], ly: &[f64], hi: f64) -> f64 {
    let r2 = |t: f64| forced(ns, ly, t).2;
    let steps = ((hi - TAU_LO) / 0.01).round() as usize;
    let mut best = (TAU_LO, f64::NEG_INFINITY);
    for i in 0..=steps {
        let t = TAU_LO + (hi - TAU_LO) * i as f64 / steps as f64;
        let v = r2(t);
        if v > best.1 {
            best = (t, v);
        }
    }
    // Golden-section refinement around the grid maximum.
    let (mut a, mut b) = ((best.0 - 0.01).max(TAU_LO), (best.0 + 0.01).min(hi));
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (r2(c), r2(d));
    for _ in 0..80 {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = r2(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = r2(d);
        }
    }
    let t = 0.5 * (a + b);
    if r2(t) >= best.1 {
        t
    } else {
        best.0
    }
}

fn usable(ns: &[f64], ys: &[f64]) -> (Vec<f64>, Vec<f64>) {
    ns.iter()
        .zip(ys)
        .filter(|(n, y)| **n > 0.0 && **y > 0.0 && y.is_finite())
        .map(|(n, y)| (*n, *y))
        .unzip()
}

fn fit_impl(ns: &[f64], ys: &[f64], force_tau: Option<f64>, tau_hi: f64) -> Result<DecayFit> {
    let (ns, ys) = usable(ns, ys);
    if ns.len() < MIN_POINTS {
        return Err(Error::InsufficientTail { usable: ns.len(), needed: MIN_POINTS });
    }
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let window = [ns[0] as usize, *ns.last().unwrap() as usize];
    if let Some(t) = force_tau {
        if !(t > 0.0) {
            return Err(Error::Precondition(format!("forced tau must be > 0, got {t}")));
        }
        let (rate, intercept, r2) = forced(&ns, &ly, t);
        return Ok(DecayFit {
            tau: t,
            rate,
            intercept,
            r_squared: r2,
            window,
            points: ns.len(),
            tau_loglog: None,
            tau_profile: None,
            forced: true,
        });
    }
    let (lx, lly): (Vec<f64>, Vec<f64>) = ns
        .iter()
        .zip(&ys)
        .filter(|(_, y)| **y < 1.0)
        .map(|(n, y)| (n.ln(), (-y.ln()).ln()))
        .unzip();
    let tau_loglog = if lx.len() >= 2 {
        let (s, _, _) = linear_regression(&lx, &lly);
        if s > 0.0 && s.is_finite() {
            Some(s)
        } else {
            None
        }
    } else {
        None
    };
    let tau_profile = profile_tau(&ns, &ly, tau_hi);
    let mut tau = tau_profile;
    if let Some(t) = tau_loglog {
        if forced(&ns, &ly, t).2 >= forced(&ns, &ly, tau_profile).2 {
            tau = t;
        }
    }
    let (rate, intercept, r2) = forced(&ns, &ly, tau);
    Ok(DecayFit {
        tau,
        rate,
        intercept,
        r_squared: r2,
        window,
        points: ns.len(),
        tau_loglog,
        tau_profile: Some(tau_profile),
        forced: false,
    })
}

/// Fit explicit (n, y) points; non-positive y are dropped.
pub fn fit_points(ns: &[f64], ys: &[f64], force_tau: Option<f64>) -> Result<DecayFit> {
    fit_impl(ns, ys, force_tau, TAU_HI)
}

/// Default window: [N_max / 4, last n with a positive value].
pub fn default_window(tail: &TailEstimate) -> [usize; 2] {
    let last = tail.curve.iter().rposition(|&c| c > 0.0).unwrap_or(0);
    [tail.n_max() / 4, last]
}

pub fn fit_decay(tail: &TailEstimate, force_tau: Option<f64>) -> Result<DecayFit> {
    fit_decay_window(tail, default_window(tail), force_tau)
}

pub fn fit_decay_window(tail: &TailEstimate, window: [usize; 2], force_tau: Option<f64>) -> Result<DecayFit> {
    let hi = window[1].min(tail.n_max());
    let lo = window[0].max(1);
    if hi < lo {
        return Err(Error::InsufficientTail { usable: 0, needed: MIN_POINTS });
    }
    let ns: Vec<f64> = (lo..=hi).map(|n| n as f64).collect();
    let ys: Vec<f64> = (lo..=hi).map(|n| tail.curve[n]).collect();
    fit_points(&ns, &ys, force_tau)
}

pub fn fit_power_law(ns: &[f64], ys: &[f64]) -> Result<PowerLawFit> {
    let (ns, ys) = usable(ns, ys);
    if ns.len() < MIN_POINTS {
        return Err(Error::InsufficientTail { usable: ns.len(), needed: MIN_POINTS });
    }
    let lx: Vec<f64> = ns.iter().map(|n| n.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let (s, i, r2) = linear_regression(&lx, &ly);
    Ok(PowerLawFit { exponent: -s, intercept: i, r_squared: r2, points: ns.len() })
}

/// Profile tau over windows [lo, hi_k] with hi_k growing geometrically to the last point.
pub fn tau_drift(ns: &[f64], ys: &[f64]) -> Vec<(usize, usize, f64)> {
    let (ns, ys) = usable(ns, ys);
    let mut out = Vec::new();
    if ns.len() < MIN_POINTS {
        return out;
    }
    let mut k = MIN_POINTS.max(ns.len() / 8);
    loop {
        let k_eff = k.min(ns.len());
        if let Ok(f) = fit_impl(&ns[..k_eff], &ys[..k_eff], None, 1.0) {
            out.push((ns[0] as usize, ns[k_eff - 1] as usize, f.tau_profile.unwrap_or(f.tau)));
        }
        if k_eff == ns.len() {
            break;
        }
        k *= 2;
    }
    out
}

fn sse(x: &[f64], y: &[f64], slope: f64, icpt: f64) -> f64 {
    x.iter().zip(y).map(|(a, b)| (b - (icpt + slope * a)).powi(2)).sum()
}

/// Stretched exponential (tau restricted to (0, 1]) against a power law, by BIC on log y.
pub fn compare_models(ns: &[f64], ys: &[f64]) -> Result<ModelComparison> {
    let stretched = fit_impl(ns, ys, None, 1.0)?;
    let power_law = fit_power_law(ns, ys)?;
    let (un, uy) = usable(ns, ys);
    let ly: Vec<f64> = uy.iter().map(|y| y.ln()).collect();
    let m = un.len() as f64;
    let xs: Vec<f64> = un.iter().map(|n| n.powf(stretched.tau)).collect();
    let sse_s = sse(&xs, &ly, -stretched.rate, stretched.intercept).max(1e-300);
    let lx: Vec<f64> = un.iter().map(|n| n.ln()).collect();
    let sse_p = sse(&lx, &ly, -power_law.exponent, power_law.intercept).max(1e-300);
    let bic_s = m * (sse_s / m).ln() + 3.0 * m.ln();
    let bic_p = m * (sse_p / m).ln() + 2.0 * m.ln();
    let preferred = if bic_p < bic_s { "power_law" } else { "stretched_exponential" };
    Ok(ModelComparison {
        stretched,
        power_law,
        bic_stretched: bic_s,
        bic_power_law: bic_p,
        tau_drift: tau_drift(ns, ys),
        preferred: preferred.into(),
    })
}
