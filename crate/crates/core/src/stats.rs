//! Birkhoff means, correlation functions, large deviations, recurrence tails
//! and time fractions, all seeded and sample-parallel.
//!
//! Orbits of the doubling map are run with a dithered shift: in binary the map
//! drops the leading bit, so an f64 orbit reaches 0 after 53 steps. We keep the
//! point on the grid k / 2^53 and refill the vacated lowest bit with a fresh
//! random bit, which is the exact law of the top 53 bits of a Lebesgue-typical
//! orbit.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hyperbolic::{fit_points, DecayFit, TailEstimate};
use crate::partition::Partition;
use crate::rng;
use crate::systems::{torus_sub, Point, SystemDescriptor, SystemKind};

/// Default number of batches for batch-means standard errors.
pub const BATCHES: usize = 32;
pub const DEFAULT_BURN_IN: usize = 100;
const GRID_53: f64 = 9_007_199_254_740_992.0;
const MASK_53: u64 = (1 << 53) - 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObsKind {
    Const { value: f64 },
    Coord { axis: usize },
    CenteredCoord { axis: usize },
    Sin { axis: usize, freq: i32 },
    Cos { axis: usize, freq: i32 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observable {
    pub name: String,
    pub kind: ObsKind,
    pub holder_exponent: f64,
    /// Largest |phi(x) - phi(y)| / |x - y|^alpha over random pairs in [0,1)^d.
    pub holder_constant_hat: f64,
}

impl Observable {
    pub const NAMES: [&'static str; 8] = ["one", "x", "x_centered", "x2", "sin_x1", "cos_x1", "sin_x2", "cos_x2"];

    pub fn from_kind(name: &str, kind: ObsKind, dim: usize) -> Result<Self> {
        let axis = match kind {
            ObsKind::Const { .. } => 0,
            ObsKind::Coord { axis } | ObsKind::CenteredCoord { axis } => axis,
            ObsKind::Sin { axis, .. } | ObsKind::Cos { axis, .. } => axis,
        };
        if axis >= dim {
            return Err(Error::Precondition(format!("observable {name} uses axis {axis} in dimension {dim}")));
        }
        let mut o = Observable { name: name.to_string(), kind, holder_exponent: 1.0, holder_constant_hat: 0.0 };
        o.holder_constant_hat = o.estimate_holder(dim, 4096, 0x0b5e);
        Ok(o)
    }

    pub fn by_name(name: &str, dim: usize) -> Result<Self> {
        let kind = match name {
            "one" => ObsKind::Const { value: 1.0 },
            "x" => ObsKind::Coord { axis: 0 },
            "x_centered" => ObsKind::CenteredCoord { axis: 0 },
            "x2" => ObsKind::Coord { axis: 1 },
            "sin_x1" => ObsKind::Sin { axis: 0, freq: 1 },
            "cos_x1" => ObsKind::Cos { axis: 0, freq: 1 },
            "sin_x2" => ObsKind::Sin { axis: 1, freq: 1 },
            "cos_x2" => ObsKind::Cos { axis: 1, freq: 1 },
            _ => {
                return Err(Error::Precondition(format!(
                    "unknown observable '{name}' (known: {})",
                    Self::NAMES.join(", ")
                )))
            }
        };
        Self::from_kind(name, kind, dim)
    }

    pub fn constant(value: f64) -> Self {
        Observable {
            name: format!("const_{value}"),
            kind: ObsKind::Const { value },
            holder_exponent: 1.0,
            holder_constant_hat: 0.0,
        }
    }

    #[inline]
    pub fn eval(&self, p: Point) -> f64 {
        let c = p.raw();
        match self.kind {
            ObsKind::Const { value } => value,
            ObsKind::Coord { axis } => c[axis],
            ObsKind::CenteredCoord { axis } => c[axis] - 0.5,
            ObsKind::Sin { axis, freq } => (std::f64::consts::TAU * freq as f64 * c[axis]).sin(),
            ObsKind::Cos { axis, freq } => (std::f64::consts::TAU * freq as f64 * c[axis]).cos(),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.kind, ObsKind::Const { .. })
    }

    fn estimate_holder(&self, dim: usize, pairs: usize, seed: u64) -> f64 {
        let mut r = rng::stream(seed, "holder", 0);
        let mut best: f64 = 0.0;
        for _ in 0..pairs {
            let a = random_point(&mut r, dim);
            let b = random_point(&mut r, dim);
            let d = a.coords().iter().zip(b.coords()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            if d > 0.0 {
                best = best.max((self.eval(a) - self.eval(b)).abs() / d.powf(self.holder_exponent));
            }
        }
        best
    }

    /// sup |phi - mean| on a grid (4096 points in 1D, 128^2 in 2D).
    pub fn oscillation(&self, dim: usize, mean: f64) -> f64 {
        let mut best: f64 = 0.0;
        if dim == 1 {
            for i in 0..4096 {
                best = best.max((self.eval(Point::new1(i as f64 / 4096.0)) - mean).abs());
            }
        } else {
            for i in 0..128 {
                for j in 0..128 {
                    best = best.max((self.eval(Point::new2(i as f64 / 128.0, j as f64 / 128.0)) - mean).abs());
                }
            }
        }
        best
    }
}

pub fn random_point(r: &mut ChaCha8Rng, dim: usize) -> Point {
    if dim == 1 {
        Point::new1(r.gen::<f64>())
    } else {
        Point::new2(r.gen::<f64>(), r.gen::<f64>())
    }
}

/// Orbit stepper; dithers the doubling map, plain iteration otherwise.
pub struct Stepper<'a> {
    sys: &'a SystemDescriptor,
    dither: bool,
    bits: u64,
    left: u32,
}

impl<'a> Stepper<'a> {
    pub fn new(sys: &'a SystemDescriptor) -> Self {
        Stepper { sys, dither: matches!(sys.kind, SystemKind::Doubling), bits: 0, left: 0 }
    }

    /// Snap a starting point onto the dither grid (identity for other maps).
    pub fn start(&self, x: Point) -> Point {
        if self.dither {
            Point::new1(((x.x() * GRID_53) as u64 & MASK_53) as f64 / GRID_53)
        } else {
            x
        }
    }

    #[inline]
    pub fn step(&mut self, x: Point, r: &mut ChaCha8Rng) -> Point {
        if !self.dither {
            return self.sys.step(x);
        }
        if self.left == 0 {
            self.bits = r.gen();
            self.left = 64;
        }
        let bit = self.bits & 1;
        self.bits >>= 1;
        self.left -= 1;
        let k = (x.x() * GRID_53) as u64;
        Point::new1((((k << 1) & MASK_53) | bit) as f64 / GRID_53)
    }
}

/// (1/n) sum_{j<n} obs(f^j x). The doubling-map dither stream is keyed by x.
pub fn birkhoff_mean(sys: &SystemDescriptor, obs: &Observable, x: Point, n: usize) -> f64 {
    let key = x.coords().iter().fold(0u64, |h, c| h.rotate_left(29) ^ c.to_bits());
    let mut r = rng::stream(key, "birkhoff", 0);
    birkhoff_with(sys, obs, x, n, &mut r)
}

fn birkhoff_with(sys: &SystemDescriptor, obs: &Observable, x: Point, n: usize, r: &mut ChaCha8Rng) -> f64 {
    let mut st = Stepper::new(sys);
    let mut y = st.start(x);
    let mut s = 0.0;
    for _ in 0..n {
        s += obs.eval(y);
        y = st.step(y, r);
    }
    s / n.max(1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Random,
    /// Jittered strata along the first coordinate; batch b takes strata i = b mod B.
    /// For the doubling map use a power-of-two sample count >= 2^n_max: then the
    /// jumps of f^n fall on strata boundaries, otherwise each straddled jump adds
    /// O(1/N^2) variance and the relative error grows like 2^{1.5 n} / N.
    Stratified,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationOptions {
    pub burn_in: usize,
    pub batches: usize,
    pub sampling: Sampling,
    /// Correlate against psi o f^{power * n} (power = gcd of return times).
    pub power: usize,
}

impl Default for CorrelationOptions {
    fn default() -> Self {
        CorrelationOptions { burn_in: DEFAULT_BURN_IN, batches: BATCHES, sampling: Sampling::Random, power: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSeries {
    pub estimate: Vec<f64>,
    pub stderr: Vec<f64>,
    pub samples: usize,
    pub burn_in: usize,
    pub batches: usize,
    pub power: usize,
    pub sampling: Sampling,
    pub seed: u64,
    pub phi: String,
    pub psi: String,
}

impl CorrelationSeries {
    pub fn n_max(&self) -> usize {
        self.estimate.len() - 1
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,estimate,stderr\n");
        for (n, (e, d)) in self.estimate.iter().zip(&self.stderr).enumerate() {
            s.push_str(&format!("{n},{e:.12e},{d:.12e}\n"));
        }
        s
    }
}

#[derive(Clone)]
struct CorrSums {
    count: f64,
    phi: f64,
    psi: Vec<f64>,
    prod: Vec<f64>,
}

impl CorrSums {
    fn new(n: usize) -> Self {
        CorrSums { count: 0.0, phi: 0.0, psi: vec![0.0; n + 1], prod: vec![0.0; n + 1] }
    }

    fn merge(&mut self, o: &CorrSums) {
        self.count += o.count;
        self.phi += o.phi;
        for i in 0..self.psi.len() {
            self.psi[i] += o.psi[i];
            self.prod[i] += o.prod[i];
        }
    }

    fn estimate(&self) -> Vec<f64> {
        let n = self.count;
        (0..self.psi.len()).map(|i| self.prod[i] / n - (self.phi / n) * (self.psi[i] / n)).collect()
    }
}

pub fn correlation(
    sys: &SystemDescriptor,
    phi: &Observable,
    psi: &Observable,
    n_max: usize,
    samples: usize,
    burn_in: usize,
    seed: u64,
) -> Result<CorrelationSeries> {
    let opts = CorrelationOptions { burn_in, ..Default::default() };
    correlation_with(sys, phi, psi, n_max, samples, seed, &opts)
}

pub fn correlation_with(
    sys: &SystemDescriptor,
    phi: &Observable,
    psi: &Observable,
    n_max: usize,
    samples: usize,
    seed: u64,
    opts: &CorrelationOptions,
) -> Result<CorrelationSeries> {
    if samples < 10_000 {
        return Err(Error::Precondition(format!("correlation needs samples >= 1e4, got {samples}")));
    }
    if opts.batches < 20 {
        return Err(Error::Precondition(format!("batch means need >= 20 batches, got {}", opts.batches)));
    }
    if opts.power == 0 {
        return Err(Error::Precondition("power must be >= 1".into()));
    }
    let nb = opts.batches;
    let parts: Vec<CorrSums> = (0..nb)
        .into_par_iter()
        .map(|b| {
            let mut r = rng::stream(seed, "correlation", b as u64);
            let mut st = Stepper::new(sys);
            let mut acc = CorrSums::new(n_max);
            let mut i = b;
            while i < samples {
                let mut x = match opts.sampling {
                    Sampling::Random => random_point(&mut r, sys.dim),
                    Sampling::Stratified => {
                        let u = (i as f64 + r.gen::<f64>()) / samples as f64;
                        if sys.dim == 1 {
                            Point::new1(u)
                        } else {
                            Point::new2(u, r.gen::<f64>())
                        }
                    }
                };
                x = st.start(x);
                for _ in 0..opts.burn_in {
                    x = st.step(x, &mut r);
                }
                let a = phi.eval(x);
                acc.count += 1.0;
                acc.phi += a;
                for n in 0..=n_max {
                    if n > 0 {
                        for _ in 0..opts.power {
                            x = st.step(x, &mut r);
                        }
                    }
                    let v = psi.eval(x);
                    acc.psi[n] += v;
                    acc.prod[n] += a * v;
                }
                i += nb;
            }
            acc
        })
        .collect();
    let mut total = CorrSums::new(n_max);
    for p in &parts {
        total.merge(p);
    }
    let estimate = total.estimate();
    let per: Vec<Vec<f64>> = parts.iter().map(|p| p.estimate()).collect();
    let stderr = (0..=n_max)
        .map(|n| {
            let m = per.iter().map(|v| v[n]).sum::<f64>() / nb as f64;
            let var = per.iter().map(|v| (v[n] - m).powi(2)).sum::<f64>() / (nb - 1) as f64;
            (var / nb as f64).sqrt()
        })
        .collect();
    Ok(CorrelationSeries {
        estimate,
        stderr,
        samples,
        burn_in: opts.burn_in,
        batches: nb,
        power: opts.power,
        sampling: opts.sampling,
        seed,
        phi: phi.name.clone(),
        psi: psi.name.clone(),
    })
}

/// Stretched-exponential fit of |estimate| over n >= 1 where |estimate| > 3 stderr.
pub fn fit_correlation_decay(series: &CorrelationSeries) -> Result<DecayFit> {
    fit_correlation_decay_with(series, None)
}

pub fn fit_correlation_decay_with(series: &CorrelationSeries, force_tau: Option<f64>) -> Result<DecayFit> {
    let (ns, ys): (Vec<f64>, Vec<f64>) = series
        .estimate
        .iter()
        .zip(&series.stderr)
        .enumerate()
        .skip(1)
        .filter(|(_, (e, s))| e.abs() > 3.0 * **s)
        .map(|(n, (e, _))| (n as f64, e.abs()))
        .unzip();
    fit_points(&ns, &ys, force_tau)
}

/// Whether the Fourier pair (e_k, e_l o A^n) has nonzero Lebesgue integral,
/// i.e. k + (A^T)^n l = 0. Integer arithmetic; None on overflow.
pub fn fourier_kronecker(matrix: [[i64; 2]; 2], k: [i64; 2], l: [i64; 2], n: usize) -> Option<bool> {
    let mut v = [l[0] as i128, l[1] as i128];
    for _ in 0..n {
        // (A^T v)_i = sum_j A[j][i] v_j
        let a = matrix[0][0] as i128 * v[0] + matrix[1][0] as i128 * v[1];
        let b = matrix[0][1] as i128 * v[0] + matrix[1][1] as i128 * v[1];
        if a.abs() > i64::MAX as i128 || b.abs() > i64::MAX as i128 {
            return None;
        }
        v = [a, b];
    }
    Some(k[0] as i128 + v[0] == 0 && k[1] as i128 + v[1] == 0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdOptions {
    pub burn_in: usize,
    /// Length of the long orbit that estimates the mean of obs.
    pub mean_orbit: usize,
}

impl Default for LdOptions {
    fn default() -> Self {
        LdOptions { burn_in: DEFAULT_BURN_IN, mean_orbit: 1_000_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationCurve {
    pub epsilon: f64,
    pub n: Vec<usize>,
    pub estimate: Vec<f64>,
    pub stderr: Vec<f64>,
    pub mean: f64,
    pub mean_orbit: usize,
    pub samples: usize,
    pub burn_in: usize,
    pub seed: u64,
    /// Exponential (tau = 1) fit of the positive part of the curve.
    pub fit: Option<DecayFit>,
    pub fit_error: Option<String>,
    /// No increase beyond 3 combined stderr between consecutive n.
    pub nonincreasing: bool,
}

impl DeviationCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,estimate,stderr\n");
        for i in 0..self.n.len() {
            s.push_str(&format!("{},{:.12e},{:.12e}\n", self.n[i], self.estimate[i], self.stderr[i]));
        }
        s
    }
}

pub fn large_deviation(
    sys: &SystemDescriptor,
    obs: &Observable,
    n_list: &[usize],
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<DeviationCurve> {
    large_deviation_with(sys, obs, n_list, epsilon, samples, seed, &LdOptions::default())
}

pub fn large_deviation_with(
    sys: &SystemDescriptor,
    obs: &Observable,
    n_list: &[usize],
    epsilon: f64,
    samples: usize,
    seed: u64,
    opts: &LdOptions,
) -> Result<DeviationCurve> {
    if !(epsilon > 0.0) || n_list.is_empty() || n_list.contains(&0) {
        return Err(Error::Precondition("need epsilon > 0 and a nonempty list of n >= 1".into()));
    }
    let mut ns = n_list.to_vec();
    ns.sort_unstable();
    ns.dedup();
    let mut mr = rng::stream(seed, "ld_mean", 0);
    let x0 = random_point(&mut mr, sys.dim);
    let mean = {
        let mut st = Stepper::new(sys);
        let mut y = st.start(x0);
        for _ in 0..opts.burn_in {
            y = st.step(y, &mut mr);
        }
        birkhoff_with(sys, obs, y, opts.mean_orbit, &mut mr)
    };
    if !obs.is_constant() {
        let osc = obs.oscillation(sys.dim, mean);
        if epsilon >= osc {
            return Err(Error::DegenerateBand { epsilon, oscillation: osc });
        }
    }
    let top = *ns.last().unwrap();
    let counts: Vec<Vec<u64>> = rng::chunks(samples)
        .par_iter()
        .enumerate()
        .map(|(ci, &(lo, hi))| {
            let mut r = rng::stream(seed, "ld", ci as u64);
            let mut st = Stepper::new(sys);
            let mut c = vec![0u64; ns.len()];
            for _ in lo..hi {
                let mut x = st.start(random_point(&mut r, sys.dim));
                for _ in 0..opts.burn_in {
                    x = st.step(x, &mut r);
                }
                let mut s = 0.0;
                let mut k = 0;
                for j in 1..=top {
                    s += obs.eval(x);
                    if j == ns[k] {
                        if (s / j as f64 - mean).abs() > epsilon {
                            c[k] += 1;
                        }
                        k += 1;
                    }
                    if j < top {
                        x = st.step(x, &mut r);
                    }
                }
            }
            c
        })
        .collect();
    let mut tot = vec![0u64; ns.len()];
    for c in &counts {
        for (t, v) in tot.iter_mut().zip(c) {
            *t += v;
        }
    }
    let estimate: Vec<f64> = tot.iter().map(|&c| c as f64 / samples as f64).collect();
    let stderr: Vec<f64> = estimate.iter().map(|&p| (p * (1.0 - p) / samples as f64).sqrt()).collect();
    let nonincreasing = (1..ns.len()).all(|i| {
        estimate[i] <= estimate[i - 1] + 3.0 * (stderr[i].powi(2) + stderr[i - 1].powi(2)).sqrt()
    });
    let nf: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    let (fit, fit_error) = match fit_points(&nf, &estimate, Some(1.0)) {
        Ok(f) => (Some(f), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Ok(DeviationCurve {
        epsilon,
        n: ns,
        estimate,
        stderr,
        mean,
        mean_orbit: opts.mean_orbit,
        samples,
        burn_in: opts.burn_in,
        seed,
        fit,
        fit_error,
        nonincreasing,
    })
}

/// Minimum r^2 for a recurrence-tail fit to count as accepted.
pub const TAIL_R2_ACCEPT: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecurrenceTail {
    pub tail: TailEstimate,
    pub fit: DecayFit,
    pub accepted: bool,
    pub reason: Option<String>,
}

/// Leb{R > n} / Leb(Delta0), uncovered mass counted as R > N_max.
pub fn tail_from_partition(part: &Partition) -> TailEstimate {
    let curve = part.r_tail();
    TailEstimate {
        stderr: vec![0.0; curve.len()],
        curve,
        sample_count: part.elements.len() as u64,
        censored_fraction: if part.leb_delta0 > 0.0 { part.uncovered_mass / part.leb_delta0 } else { 0.0 },
        skipped: 0,
        disk: None,
        theta_min: f64::NAN,
        seed: 0,
    }
}

/// Fit window for a partition tail: from max(N_max/4, first n with tail < 1)
/// up to the last resolved step, beyond which the curve is censored.
pub fn recurrence_window(part: &Partition, tail: &TailEstimate) -> Option<[usize; 2]> {
    let hi = part.resolved_until?;
    let first = tail.curve.iter().position(|&c| c < 1.0)?;
    Some([(part.params.n_max / 4).max(first), hi.min(tail.n_max())])
}

pub fn recurrence_tail(part: &Partition) -> Result<RecurrenceTail> {
    let tail = tail_from_partition(part);
    let window = recurrence_window(part, &tail).ok_or(Error::InsufficientTail { usable: 0, needed: 5 })?;
    fit_tail_window(tail, window)
}

pub fn fit_tail_window(tail: TailEstimate, window: [usize; 2]) -> Result<RecurrenceTail> {
    let fit = crate::hyperbolic::fit::fit_decay_window(&tail, window, None)?;
    let reason = if !(fit.rate > 0.0) {
        Some(format!("no decay in window (rate {:.3e})", fit.rate))
    } else if !(fit.r_squared >= TAIL_R2_ACCEPT) {
        Some(format!("r^2 {:.3} below {TAIL_R2_ACCEPT}", fit.r_squared))
    } else {
        None
    };
    Ok(RecurrenceTail { tail, fit, accepted: reason.is_none(), reason })
}

/// Satellite constants of a build and the decay of the disk-boundary satellites.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SatelliteDecay {
    pub c5_hat: f64,
    pub c5_by_lag: Vec<f64>,
    /// exp of the slope of log(boundary satellite mass) against n over resolved steps.
    pub boundary_ratio: Option<f64>,
    pub boundary_points: usize,
}

pub fn satellite_decay(part: &Partition) -> SatelliteDecay {
    let (ns, ls): (Vec<f64>, Vec<f64>) = part
        .steps
        .iter()
        .filter(|s| s.resolved && s.boundary_satellite_mass > 0.0)
        .map(|s| (s.n as f64, s.boundary_satellite_mass.ln()))
        .unzip();
    let boundary_ratio = if ns.len() >= 3 { Some(crate::numeric::linear_regression(&ns, &ls).0.exp()) } else { None };
    SatelliteDecay { c5_hat: part.c5_hat, c5_by_lag: part.c5_by_lag.clone(), boundary_ratio, boundary_points: ns.len() }
}

/// Ball region on the torus (or circle).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub center: Point,
    pub radius: f64,
}

impl Region {
    pub fn contains(&self, x: Point) -> bool {
        let d = torus_sub(x.raw(), self.center.raw(), x.dim());
        (d[0] * d[0] + d[1] * d[1]).sqrt() < self.radius
    }
}

/// (1/n) #{j < n : f^j(x) not in V}.
pub fn time_fraction_outside(sys: &SystemDescriptor, v: &Region, x: Point, n: usize) -> Result<f64> {
    if sys.dim != 2 {
        return Err(Error::Precondition("time_fraction_outside is defined for 2D systems".into()));
    }
    let mut y = x;
    let mut out = 0usize;
    for _ in 0..n {
        if !v.contains(y) {
            out += 1;
        }
        y = sys.step(y);
    }
    Ok(out as f64 / n.max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaSummary {
    pub starts: usize,
    pub n: usize,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

/// time_fraction_outside over Lebesgue-random starts.
pub fn theta_concentration(sys: &SystemDescriptor, v: &Region, n: usize, starts: usize, seed: u64) -> Result<ThetaSummary> {
    let mut r = rng::stream(seed, "theta", 0);
    let xs: Vec<Point> = (0..starts).map(|_| random_point(&mut r, sys.dim)).collect();
    let fr: Vec<f64> = xs.par_iter().map(|&x| time_fraction_outside(sys, v, x, n)).collect::<Result<_>>()?;
    Ok(ThetaSummary {
        starts,
        n,
        min: fr.iter().cloned().fold(f64::INFINITY, f64::min),
        mean: fr.iter().sum::<f64>() / starts.max(1) as f64,
        max: fr.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{make_perturbed_anosov, CAT_MATRIX};

    fn obs(name: &str, dim: usize) -> Observable {
        Observable::by_name(name, dim).unwrap()
    }

    #[test]
    fn birkhoff_trivial_and_means() {
        let d = SystemDescriptor::doubling();
        assert_eq!(birkhoff_mean(&d, &obs("one", 1), Point::new1(0.3), 17), 1.0);
        let m = birkhoff_mean(&d, &obs("x", 1), Point::new1(0.1234567), 1_000_000);
        assert!((m - 0.5).abs() < 3e-3, "{m}");
        let c = SystemDescriptor::cat_map(CAT_MATRIX).unwrap();
        let m = birkhoff_mean(&c, &obs("sin_x1", 2), Point::new2(0.1234, 0.5678), 1_000_000);
        assert!(m.abs() < 3e-3, "{m}");
    }

    #[test]
    fn dither_keeps_grid_and_shift() {
        let d = SystemDescriptor::doubling();
        let mut st = Stepper::new(&d);
        let mut r = rng::stream(1, "t", 0);
        let x = st.start(Point::new1(0.7));
        let y = st.step(x, &mut r);
        // Dropping the lowest bit recovers 2x mod 1 exactly.
        let k = (y.x() * GRID_53) as u64;
        assert_eq!((k & !1) as f64 / GRID_53, (2.0 * x.x()) % 1.0);
        let mut z = x;
        for _ in 0..500 {
            z = st.step(z, &mut r);
        }
        assert!(z.x() != 0.0);
    }

    #[test]
    fn holder_constants() {
        assert_eq!(obs("one", 1).holder_constant_hat, 0.0);
        let s = obs("sin_x1", 2);
        assert!(s.holder_constant_hat <= std::f64::consts::TAU + 1e-9 && s.holder_constant_hat > 3.0);
        assert!(Observable::by_name("x2", 1).is_err());
        assert!(Observable::by_name("nope", 1).is_err());
    }

    #[test]
    fn constant_psi_gives_zero_series() {
        let d = SystemDescriptor::doubling();
        let s = correlation(&d, &obs("x", 1), &Observable::constant(2.0), 5, 10_000, 10, 3).unwrap();
        for (e, se) in s.estimate.iter().zip(&s.stderr) {
            assert!(e.abs() <= 3.0 * se + 1e-15);
        }
        assert!(correlation(&d, &obs("x", 1), &obs("x", 1), 5, 100, 10, 3).is_err());
    }

    #[test]
    fn lag_zero_is_variance() {
        let d = SystemDescriptor::doubling();
        let phi = obs("x", 1);
        let s = correlation(&d, &phi, &phi, 0, 20_000, 0, 9).unwrap();
        // Regenerate the same samples: batch b, indices b, b + B, ...
        let mut vals = Vec::new();
        for b in 0..BATCHES {
            let mut r = rng::stream(9, "correlation", b as u64);
            let st = Stepper::new(&d);
            let mut i = b;
            while i < 20_000 {
                vals.push(phi.eval(st.start(random_point(&mut r, 1))));
                i += BATCHES;
            }
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
        assert!((s.estimate[0] - var).abs() < 1e-12);
    }

    #[test]
    fn seeded_determinism_and_stderr_scaling() {
        let d = SystemDescriptor::doubling();
        let phi = obs("x_centered", 1);
        let a = correlation(&d, &phi, &phi, 4, 40_000, 20, 5).unwrap();
        let b = correlation(&d, &phi, &phi, 4, 40_000, 20, 5).unwrap();
        assert_eq!(a, b);
        let c = correlation(&d, &phi, &phi, 4, 160_000, 20, 5).unwrap();
        for n in 0..=4 {
            let ratio = a.stderr[n] / c.stderr[n];
            assert!(ratio > 2.0 / 1.5 && ratio < 2.0 * 1.5, "n={n} ratio={ratio}");
        }
    }

    #[test]
    fn kronecker_fails_for_sine_modes() {
        for n in 1..=30 {
            for k in [[1, 0], [-1, 0]] {
                for l in [[1, 0], [-1, 0]] {
                    assert_eq!(fourier_kronecker(CAT_MATRIX, k, l, n), Some(false));
                }
            }
        }
        assert_eq!(fourier_kronecker(CAT_MATRIX, [-1, 0], [1, 0], 0), Some(true));
    }

    #[test]
    fn doubling_covariance_closed_form() {
        // Cov(x, x o T^n) = 2^{-n} / 12 in closed form.
        let d = SystemDescriptor::doubling();
        let phi = obs("x_centered", 1);
        let opts = CorrelationOptions { burn_in: 0, sampling: Sampling::Stratified, ..Default::default() };
        let s = correlation_with(&d, &phi, &phi, 8, 200_000, 11, &opts).unwrap();
        for n in 0..=8 {
            let exact = 2f64.powi(-(n as i32)) / 12.0;
            assert!((s.estimate[n] - exact).abs() < 0.15 * exact, "n={n} {} vs {exact}", s.estimate[n]);
        }
        let f = fit_correlation_decay_with(&s, Some(1.0)).unwrap();
        assert!((f.rate - 2f64.ln()).abs() < 0.15 * 2f64.ln());
        let f = fit_correlation_decay(&s).unwrap();
        assert!((f.tau - 1.0).abs() < 0.15, "{f:?}");
    }

    #[test]
    fn synthetic_decay_fit() {
        let est: Vec<f64> = (0..30).map(|n| (-0.7 * n as f64).exp()).collect();
        let s = CorrelationSeries {
            stderr: vec![1e-20; 30],
            estimate: est,
            samples: 0,
            burn_in: 0,
            batches: BATCHES,
            power: 1,
            sampling: Sampling::Random,
            seed: 0,
            phi: "a".into(),
            psi: "b".into(),
        };
        let f = fit_correlation_decay(&s).unwrap();
        assert!((f.rate - 0.7).abs() < 1e-6 && (f.tau - 1.0).abs() < 1e-6);
        let noisy = CorrelationSeries { stderr: vec![1.0; 30], ..s };
        assert!(matches!(fit_correlation_decay(&noisy), Err(Error::InsufficientTail { .. })));
    }

    #[test]
    fn large_deviation_cases() {
        let d = SystemDescriptor::doubling();
        let c = large_deviation(&d, &Observable::constant(1.0), &[5, 10], 0.1, 1000, 1).unwrap();
        assert!(c.estimate.iter().all(|&e| e == 0.0));
        assert!(matches!(
            large_deviation(&d, &obs("x", 1), &[5], 0.6, 1000, 1),
            Err(Error::DegenerateBand { .. })
        ));
        let opts = LdOptions { mean_orbit: 200_000, ..Default::default() };
        let ns: Vec<usize> = (1..=8).map(|k| 5 * k).collect();
        let c = large_deviation_with(&d, &obs("x", 1), &ns, 0.1, 50_000, 2, &opts).unwrap();
        assert!(c.estimate.iter().all(|&e| (0.0..=1.0).contains(&e)));
        assert!(c.nonincreasing);
        assert!(c.fit.as_ref().unwrap().rate > 0.0);
    }

    #[test]
    fn step_tail_rejected() {
        let mut curve = vec![1.0; 20];
        for c in curve.iter_mut().skip(12) {
            *c = 0.0;
        }
        let tail = TailEstimate {
            stderr: vec![0.0; 20],
            curve,
            sample_count: 1,
            censored_fraction: 0.0,
            skipped: 0,
            disk: None,
            theta_min: f64::NAN,
            seed: 0,
        };
        let r = fit_tail_window(tail, [4, 19]).unwrap();
        assert!(!r.accepted && r.reason.is_some());
    }

    #[test]
    fn time_fraction_cases() {
        let c = SystemDescriptor::cat_map(CAT_MATRIX).unwrap();
        let v = Region { center: Point::new2(0.5, 0.5), radius: 0.05 };
        // (0, 0) is fixed and far from V.
        assert_eq!(time_fraction_outside(&c, &v, Point::new2(0.0, 0.0), 100).unwrap(), 1.0);
        let all = Region { center: Point::new2(0.5, 0.5), radius: 1.0 };
        assert_eq!(time_fraction_outside(&c, &all, Point::new2(0.1, 0.7), 100).unwrap(), 0.0);
        let p = make_perturbed_anosov(0.0, Point::new2(0.5, 0.5), 0.05).unwrap();
        let f = time_fraction_outside(&p, &v, Point::new2(0.1234, 0.4321), 200_000).unwrap();
        let expect = 1.0 - std::f64::consts::PI * 0.05 * 0.05;
        assert!((f - expect).abs() < 1e-2, "{f}");
    }
}
