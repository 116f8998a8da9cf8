//! Expansion logs, expansion time, sigma-hyperbolic times and tails of the
//! expansion time over a reference disk.

pub mod fit;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{mat_vec, norm, normalize};
use crate::rng;
use crate::systems::{Point, ReferenceDisk, SystemDescriptor};

pub use fit::{compare_models, fit_decay, fit_points, tau_drift, DecayFit, ModelComparison, PowerLawFit};

/// Slack used when comparing window sums with `k log sigma`; sums within this
/// distance count as ties, which satisfy the inequality.
pub const TIE_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionLog {
    pub origin: Point,
    pub values: Vec<f64>,
}

impl ExpansionLog {
    pub fn new(origin: Point, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Precondition("expansion log needs length >= 1".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Precondition("expansion log values must be finite".into()));
        }
        Ok(ExpansionLog { origin, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperbolicParams {
    pub b: f64,
    pub sigma: f64,
    pub n_max: usize,
}

impl HyperbolicParams {
    /// Parameters with the default sigma = exp(-b/2).
    pub fn new(b: f64, n_max: usize) -> Result<Self> {
        Self::with_sigma(b, (-b / 2.0).exp(), n_max)
    }

    pub fn with_sigma(b: f64, sigma: f64, n_max: usize) -> Result<Self> {
        if !(b > 0.0 && b.is_finite()) {
            return Err(Error::Precondition(format!("b must be > 0, got {b}")));
        }
        if !(sigma > 0.0 && sigma < 1.0) {
            return Err(Error::Precondition(format!("sigma must be in (0, 1), got {sigma}")));
        }
        if n_max == 0 {
            return Err(Error::Precondition("N_max must be >= 1".into()));
        }
        Ok(HyperbolicParams { b, sigma, n_max })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpansionTime {
    Finite(usize),
    Censored(usize),
}

impl ExpansionTime {
    pub fn finite(&self) -> Option<usize> {
        match self {
            ExpansionTime::Finite(n) => Some(*n),
            ExpansionTime::Censored(_) => None,
        }
    }

    /// Whether E > n, counting censored values as exceeding the horizon.
    pub fn exceeds(&self, n: usize) -> bool {
        match self {
            ExpansionTime::Finite(e) => *e > n,
            ExpansionTime::Censored(_) => true,
        }
    }
}

/// Tangent vector pushed along the orbit for 2D systems, a_j = log of the inverse expansion.
pub fn expansion_log(sys: &SystemDescriptor, x: Point, n: usize) -> Result<ExpansionLog> {
    if n == 0 {
        return Err(Error::Precondition("expansion_log needs n >= 1".into()));
    }
    let mut values = Vec::with_capacity(n);
    let mut p = x;
    if sys.dim == 1 {
        for _ in 0..n {
            values.push(sys.cu_inverse_norm(p)?.ln());
            p = sys.step(p);
        }
    } else {
        let mut e = sys.cu_direction(x)?;
        for _ in 0..n {
            let w = mat_vec(&sys.jac(p.raw())?, e);
            let g = norm(w);
            values.push(-g.ln());
            e = normalize(w);
            p = sys.step(p);
        }
    }
    ExpansionLog::new(x, values)
}

pub fn expansion_time(log: &ExpansionLog, p: &HyperbolicParams) -> Result<ExpansionTime> {
    if log.len() < p.n_max {
        return Err(Error::Precondition(format!(
            "log length {} < N_max {}",
            log.len(),
            p.n_max
        )));
    }
    let mut sum = 0.0;
    let mut last_bad = 0usize;
    for (i, v) in log.values[..p.n_max].iter().enumerate() {
        sum += v;
        let n = i + 1;
        if !(sum / (n as f64) < -p.b) {
            last_bad = n;
        }
    }
    if last_bad == p.n_max {
        Ok(ExpansionTime::Censored(p.n_max))
    } else {
        Ok(ExpansionTime::Finite(last_bad + 1))
    }
}

/// Sigma-hyperbolic times 1..=len by a linear scan.
///
/// With b_j = a_j - log sigma, n is hyperbolic iff every suffix sum of
/// b_0..b_{n-1} is <= 0; the maximal suffix sum obeys M_n = b_{n-1} + max(0, M_{n-1}).
pub fn hyperbolic_times(log: &ExpansionLog, sigma: f64) -> Vec<usize> {
    let ls = sigma.ln();
    let mut out = Vec::new();
    let mut m = 0.0f64;
    for (i, a) in log.values.iter().enumerate() {
        let b = a - ls;
        m = b + m.max(0.0);
        if m <= TIE_TOL {
            out.push(i + 1);
        }
    }
    out
}

/// Whether `n` is a sigma-hyperbolic time, by the definitional check.
pub fn is_hyperbolic_time(log: &ExpansionLog, sigma: f64, n: usize) -> bool {
    is_hyperbolic_values(&log.values, sigma, n)
}

/// Definitional check on a raw value slice (a_0, a_1, ...).
pub fn is_hyperbolic_values(values: &[f64], sigma: f64, n: usize) -> bool {
    if n == 0 || n > values.len() {
        return false;
    }
    let ls = sigma.ln();
    let mut s = 0.0;
    for k in 1..=n {
        s += values[n - k] - ls;
        if s > TIE_TOL {
            return false;
        }
    }
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyCheck {
    pub theta_hat: f64,
    pub pass: bool,
    pub e: ExpansionTime,
}

pub fn frequency_check(log: &ExpansionLog, p: &HyperbolicParams) -> Result<FrequencyCheck> {
    let e = expansion_time(log, p)?;
    let n = p.n_max;
    let count = hyperbolic_times(log, p.sigma).iter().filter(|&&t| t <= n).count();
    let theta_hat = count as f64 / n as f64;
    let pass = match e {
        ExpansionTime::Finite(v) if v <= n => theta_hat > 0.0,
        _ => false,
    };
    Ok(FrequencyCheck { theta_hat, pass, e })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperbolicReport {
    pub e: ExpansionTime,
    pub times: Vec<usize>,
    pub frequency: f64,
    pub theta_check: f64,
}

pub fn report(log: &ExpansionLog, p: &HyperbolicParams) -> Result<HyperbolicReport> {
    let fc = frequency_check(log, p)?;
    let times: Vec<usize> = hyperbolic_times(log, p.sigma).into_iter().filter(|&t| t <= p.n_max).collect();
    Ok(HyperbolicReport {
        e: fc.e,
        frequency: times.len() as f64 / p.n_max as f64,
        times,
        theta_check: if fc.pass { fc.theta_hat } else { f64::NAN },
    })
}

/// Mergeable histogram of expansion times (or recurrence times).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TailCounts {
    /// hist[n] = number of samples with value exactly n, for 1 <= n <= N_max.
    pub hist: Vec<u64>,
    pub censored: u64,
    pub skipped: u64,
    /// Smallest theta_hat over samples passing the frequency check.
    pub theta_min: f64,
    pub frequency_failures: u64,
}

impl TailCounts {
    pub fn new(n_max: usize) -> Self {
        TailCounts { hist: vec![0; n_max + 1], theta_min: f64::INFINITY, ..Default::default() }
    }

    pub fn merge(mut self, o: &TailCounts) -> Self {
        if self.hist.len() < o.hist.len() {
            self.hist.resize(o.hist.len(), 0);
        }
        for (a, b) in self.hist.iter_mut().zip(&o.hist) {
            *a += b;
        }
        self.censored += o.censored;
        self.skipped += o.skipped;
        self.theta_min = self.theta_min.min(o.theta_min);
        self.frequency_failures += o.frequency_failures;
        self
    }

    pub fn total(&self) -> u64 {
        self.hist.iter().sum::<u64>() + self.censored
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailEstimate {
    /// curve[n] = fraction of samples with value > n, n = 0..=N_max.
    pub curve: Vec<f64>,
    pub stderr: Vec<f64>,
    pub sample_count: u64,
    pub censored_fraction: f64,
    pub skipped: u64,
    pub disk: Option<ReferenceDisk>,
    /// Infimum of theta_hat over non-censored samples (NaN when none).
    pub theta_min: f64,
    pub seed: u64,
}

impl TailEstimate {
    pub fn from_counts(c: &TailCounts, disk: Option<ReferenceDisk>, seed: u64) -> Self {
        let total = c.total();
        let n_max = c.hist.len() - 1;
        let mut curve = vec![0.0; n_max + 1];
        let mut stderr = vec![0.0; n_max + 1];
        let mut above = c.censored;
        for n in (0..=n_max).rev() {
            if n < n_max {
                above += c.hist[n + 1];
            }
            let f = if total > 0 { above as f64 / total as f64 } else { 0.0 };
            curve[n] = f;
            stderr[n] = if total > 0 { (f * (1.0 - f) / total as f64).sqrt() } else { 0.0 };
        }
        TailEstimate {
            curve,
            stderr,
            sample_count: total,
            censored_fraction: if total > 0 { c.censored as f64 / total as f64 } else { 0.0 },
            skipped: c.skipped,
            disk,
            theta_min: if c.theta_min.is_finite() { c.theta_min } else { f64::NAN },
            seed,
        }
    }

    pub fn n_max(&self) -> usize {
        self.curve.len() - 1
    }

    /// CSV body with columns n, tail, stderr.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,tail,stderr\n");
        for (n, (c, e)) in self.curve.iter().zip(&self.stderr).enumerate() {
            s.push_str(&format!("{n},{c:.12e},{e:.12e}\n"));
        }
        s
    }
}

/// Monte-Carlo tail of the expansion time over uniformly sampled disk points.
pub fn tail_curve(
    sys: &SystemDescriptor,
    disk: &ReferenceDisk,
    p: &HyperbolicParams,
    samples: usize,
    seed: u64,
) -> Result<TailEstimate> {
    if samples < 100 {
        return Err(Error::Precondition(format!("tail_curve needs samples >= 100, got {samples}")));
    }
    let chunks = rng::chunks(samples);
    let parts: Vec<Result<TailCounts>> = chunks
        .par_iter()
        .enumerate()
        .map(|(ci, &(lo, hi))| {
            let mut r = rng::stream(seed, "tail_curve", ci as u64);
            let mut c = TailCounts::new(p.n_max);
            for _ in lo..hi {
                let t: f64 = r.gen_range(-disk.radius..disk.radius);
                let x = disk.point_at(t);
                let log = match expansion_log(sys, x, p.n_max) {
                    Ok(l) => l,
                    Err(Error::DerivativeUndefined { .. }) => {
                        c.skipped += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let fc = frequency_check(&log, p)?;
                match fc.e {
                    ExpansionTime::Finite(e) => {
                        c.hist[e] += 1;
                        if fc.pass {
                            c.theta_min = c.theta_min.min(fc.theta_hat);
                        } else {
                            c.frequency_failures += 1;
                        }
                    }
                    ExpansionTime::Censored(_) => c.censored += 1,
                }
            }
            Ok(c)
        })
        .collect();
    let mut acc = TailCounts::new(p.n_max);
    for part in parts {
        acc = acc.merge(&part?);
    }
    Ok(TailEstimate::from_counts(&acc, Some(disk.clone()), seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::CAT_MATRIX;

    fn log_of(v: &[f64]) -> ExpansionLog {
        ExpansionLog::new(Point::new1(0.0), v.to_vec()).unwrap()
    }

    /// Independent oracle for the expansion time: check every candidate N.
    fn brute_e(v: &[f64], b: f64, n_max: usize) -> ExpansionTime {
        let avg = |n: usize| v[..n].iter().sum::<f64>() / n as f64;
        for cand in 1..=n_max {
            if (cand..=n_max).all(|n| avg(n) < -b) {
                return ExpansionTime::Finite(cand);
            }
        }
        ExpansionTime::Censored(n_max)
    }

    #[test]
    fn expansion_time_worked_example() {
        let mut v = vec![1.0];
        v.extend(std::iter::repeat(-1.0).take(19));
        let p = HyperbolicParams::new(0.5, 20).unwrap();
        assert_eq!(expansion_time(&log_of(&v), &p).unwrap(), ExpansionTime::Finite(5));
        assert_eq!(brute_e(&v, 0.5, 20), ExpansionTime::Finite(5));
    }

    #[test]
    fn expansion_time_censored_constant() {
        let v = vec![-0.25; 30];
        let p = HyperbolicParams::new(0.5, 30).unwrap();
        assert_eq!(expansion_time(&log_of(&v), &p).unwrap(), ExpansionTime::Censored(30));
    }

    #[test]
    fn hyperbolic_times_worked_example() {
        let l = log_of(&[-1.0, 1.0, -1.0, -1.0]);
        let s = (-1f64).exp();
        assert_eq!(hyperbolic_times(&l, s), vec![1]);
        let brute: Vec<usize> = (1..=4).filter(|&n| is_hyperbolic_time(&l, s, n)).collect();
        assert_eq!(brute, vec![1]);
    }

    #[test]
    fn doubling_everything_hyperbolic() {
        let d = SystemDescriptor::doubling();
        let l = expansion_log(&d, Point::new1(0.3), 3).unwrap();
        assert_eq!(l.values, vec![-(2f64.ln()); 3]);
        let l = expansion_log(&d, Point::new1(0.3), 40).unwrap();
        assert_eq!(hyperbolic_times(&l, 0.5), (1..=40).collect::<Vec<_>>());
        let p = HyperbolicParams::with_sigma(0.5, 0.5, 40).unwrap();
        let f = frequency_check(&l, &p).unwrap();
        assert_eq!(f.theta_hat, 1.0);
        assert_eq!(f.e, ExpansionTime::Finite(1));
    }

    #[test]
    fn slightly_weak_contraction_has_no_times() {
        let s: f64 = 0.5;
        let l = log_of(&[s.ln() + 0.01; 10]);
        assert!(hyperbolic_times(&l, s).is_empty());
    }

    #[test]
    fn cat_constant_log() {
        let c = SystemDescriptor::cat_map(CAT_MATRIX).unwrap();
        let l = expansion_log(&c, Point::new2(0.2, 0.3), 2).unwrap();
        let want = -((3.0 + 5f64.sqrt()) / 2.0).ln();
        assert!(l.values.iter().all(|v| (v - want).abs() < 1e-12));
        let p = HyperbolicParams::new(0.5, 50).unwrap();
        let l = expansion_log(&c, Point::new2(0.2, 0.3), 50).unwrap();
        assert_eq!(frequency_check(&l, &p).unwrap().theta_hat, 1.0);
    }

    #[test]
    fn pm_near_zero_censored() {
        let pm = SystemDescriptor::pomeau_manneville(0.5).unwrap();
        let l = expansion_log(&pm, Point::new1(1e-9), 50).unwrap();
        assert!(l.values[0].abs() < 1e-3);
        let p = HyperbolicParams::new(0.3, 50).unwrap();
        let f = frequency_check(&l, &p).unwrap();
        assert!(!f.pass);
        assert!(matches!(f.e, ExpansionTime::Censored(_)));
    }

    #[test]
    fn doubling_tail_is_zero() {
        let d = SystemDescriptor::doubling();
        let disk = ReferenceDisk::interval(0.5, 0.2);
        let p = HyperbolicParams::new(0.5, 30).unwrap();
        let t = tail_curve(&d, &disk, &p, 1000, 1).unwrap();
        assert_eq!(t.curve[0], 1.0);
        assert!(t.curve[1..].iter().all(|&c| c == 0.0));
        assert!(tail_curve(&d, &disk, &p, 0, 1).is_err());
    }

    #[test]
    fn tail_curve_deterministic_and_monotone() {
        let pm = SystemDescriptor::pomeau_manneville(0.5).unwrap();
        let disk = ReferenceDisk::interval(0.5, 0.5);
        let p = HyperbolicParams::new(0.2, 100).unwrap();
        let a = tail_curve(&pm, &disk, &p, 5000, 9).unwrap();
        let b = tail_curve(&pm, &disk, &p, 5000, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.curve.windows(2).all(|w| w[1] <= w[0]));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn scan_equals_definition(v in proptest::collection::vec(-2.0f64..2.0, 1..20), ls in -1.5f64..-0.05) {
                let l = log_of(&v);
                let s = ls.exp();
                let fast = hyperbolic_times(&l, s);
                let slow: Vec<usize> = (1..=v.len()).filter(|&n| is_hyperbolic_time(&l, s, n)).collect();
                prop_assert_eq!(&fast, &slow);
                // Contraction along reported times, re-asserted from the definition.
                for &n in &fast {
                    let mut acc = 0.0;
                    for k in 1..=n {
                        acc += v[n - k];
                        prop_assert!(acc <= k as f64 * s.ln() + 1e-9);
                    }
                }
            }

            #[test]
            fn expansion_time_equals_brute(v in proptest::collection::vec(-2.0f64..1.0, 10..30), b in 0.05f64..1.0) {
                let n_max = v.len();
                let p = HyperbolicParams::new(b, n_max).unwrap();
                prop_assert_eq!(expansion_time(&log_of(&v), &p).unwrap(), brute_e(&v, b, n_max));
            }
        }
    }
}
