//! Run configuration: a sectioned TOML file, validated before any work starts.

use std::collections::BTreeMap;
use std::path::PathBuf;

use gmy_core::partition::CandidateRule;
use gmy_core::stats::{Observable, Sampling};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemSection,
    pub hyperbolic: HyperbolicSection,
    #[serde(default)]
    pub geometry: GeometrySection,
    #[serde(default)]
    pub partition: PartitionSection,
    #[serde(default)]
    pub stats: StatsSection,
    #[serde(default)]
    pub run: RunSection,
}

/// System name plus its numeric parameters (`eps = 0.3`, `alpha = 0.5`, ...).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemSection {
    pub name: String,
    #[serde(flatten)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperbolicSection {
    pub b: f64,
    /// Defaults to exp(-b/2).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    pub n_max: usize,
    #[serde(default = "d_tail_samples")]
    pub samples: usize,
    /// Disk points receiving a per-point report in `hyp`.
    #[serde(default = "d_report_samples")]
    pub report_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_window: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub force_tau: Option<f64>,
    /// Stretched exponential versus power law on the fit window.
    #[serde(default)]
    pub compare_models: bool,
    /// Time-fraction check outside the perturbation region (2D perturbed systems).
    #[serde(default = "d_theta_starts")]
    pub theta_starts: usize,
    #[serde(default = "d_theta_n")]
    pub theta_n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometrySection {
    pub delta1: f64,
    pub delta1_prime: f64,
    pub delta_s: f64,
    /// Candidate half-lengths of Delta_0, tried in order.
    pub delta0_grid: Vec<f64>,
    /// Candidate chart offsets of the centre p, tried for every delta0.
    pub p_grid: Vec<f64>,
    pub resolution: f64,
    pub max_gap: f64,
    /// Centre of the reference disk (one coordinate per dimension; default 1/2).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disk_center: Option<Vec<f64>>,
    pub disk_radius: f64,
    pub setup_samples: usize,
    pub n_lo: usize,
    pub n_hi: usize,
    pub m_cap: usize,
    /// Allows delta1' > delta1/10 in the config check (pre-ball operations still refuse it).
    #[serde(default)]
    pub allow_wide_prime: bool,
    pub zeta: f64,
    pub pair_samples: usize,
}

impl Default for GeometrySection {
    fn default() -> Self {
        GeometrySection {
            delta1: 0.1,
            delta1_prime: 0.01,
            delta_s: 0.0,
            delta0_grid: vec![0.2],
            p_grid: vec![0.0],
            resolution: 1e-9,
            max_gap: 1e-3,
            disk_center: None,
            disk_radius: 0.5,
            setup_samples: 2000,
            n_lo: 1,
            n_hi: 8,
            m_cap: 14,
            allow_wide_prime: false,
            zeta: 1.0,
            pair_samples: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSection {
    pub n0: usize,
    pub n_max: usize,
    /// Defaults to 3 N0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_stall: Option<usize>,
    pub candidate_rule: CandidateRule,
    /// Caps the crossing horizon N0 found by the setup search. A cap below the
    /// actual crossing time leaves every step without candidates (stall).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crossing_horizon: Option<usize>,
    /// Widen the largest element before verification (negative control).
    #[serde(default)]
    pub inject_corruption: bool,
}

impl Default for PartitionSection {
    fn default() -> Self {
        PartitionSection {
            n0: 5,
            n_max: 40,
            n_stall: None,
            candidate_rule: CandidateRule::AllPieces,
            crossing_horizon: None,
            inject_corruption: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsSection {
    pub samples: usize,
    pub burn_in: usize,
    pub sampling: Sampling,
    /// Correlation pair: phi against psi o f^n.
    pub phi: String,
    pub psi: String,
    pub n_corr: usize,
    /// Observable for the large-deviation curves.
    pub observable: String,
    pub epsilon: Vec<f64>,
    pub ld_n: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ld_samples: Option<usize>,
    pub mean_orbit: usize,
}

impl Default for StatsSection {
    fn default() -> Self {
        StatsSection {
            samples: 100_000,
            burn_in: 100,
            sampling: Sampling::Random,
            phi: "x_centered".into(),
            psi: "x_centered".into(),
            n_corr: 30,
            observable: "x".into(),
            epsilon: vec![0.1],
            ld_n: (1..=10).map(|k| 5 * k).collect(),
            ld_samples: None,
            mean_orbit: 1_000_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "d_seed")]
    pub seed: u64,
    /// Output directory; not part of the config hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { seed: d_seed(), out: None }
    }
}

fn d_tail_samples() -> usize {
    100_000
}
fn d_report_samples() -> usize {
    64
}
fn d_theta_starts() -> usize {
    1000
}
fn d_theta_n() -> usize {
    10_000
}
fn d_seed() -> u64 {
    1
}

/// Command-line overrides applied after parsing.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub resolution: Option<f64>,
}

/// 1-based line of byte offset `pos` in `src`.
/// Name of the `[section]` whose body contains byte offset `pos`.
fn section_at(src: &str, pos: usize) -> Option<String> {
    let pos = pos.min(src.len());
    let end = src[pos..].find('\n').map_or(src.len(), |i| pos + i);
    src[..end]
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| l.starts_with('[') && l.ends_with(']'))
        .map(|l| l.trim_matches(|c| c == '[' || c == ']').trim().to_string())
}

fn line_of(src: &str, pos: usize) -> usize {
    src[..pos.min(src.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

/// Line of `key = ...` inside `[section]`, if the key is written in the file.
fn locate(src: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, raw) in src.lines().enumerate() {
        let l = raw.trim();
        if l.starts_with('[') {
            current = l.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            continue;
        }
        if current == section {
            if let Some((k, _)) = l.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

impl RunConfig {
    /// Parse and validate; errors name the offending field and line.
    pub fn parse(src: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(src).map_err(|e| {
            let msg = e.message().to_string();
            let key = msg.split('`').nth(1).unwrap_or("");
            let section = e.span().and_then(|s| section_at(src, s.start));
            let field = match section {
                Some(sec) if !key.is_empty() && key != sec => format!("{sec}.{key}"),
                _ => key.to_string(),
            };
            CliError::Config { field, line: e.span().map(|s| line_of(src, s.start)), message: msg }
        })?;
        cfg.validate().map_err(|(section, key, message)| CliError::Config {
            field: format!("{section}.{key}"),
            line: locate(src, section, key),
            message,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path, ov: &Overrides) -> Result<Self, CliError> {
        let src = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&src)?;
        cfg.apply(ov)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, ov: &Overrides) -> Result<(), CliError> {
        if let Some(s) = ov.seed {
            self.run.seed = s;
        }
        if let Some(o) = &ov.out {
            self.run.out = Some(o.clone());
        }
        if let Some(r) = ov.resolution {
            self.geometry.resolution = r;
        }
        self.validate().map_err(|(s, k, message)| CliError::Config { field: format!("{s}.{k}"), line: None, message })
    }

    /// Dimension implied by the system name.
    pub fn dim(&self) -> usize {
        match self.system.name.as_str() {
            "cat" | "perturbed_cat" => 2,
            _ => 1,
        }
    }

    pub fn sigma(&self) -> f64 {
        self.hyperbolic.sigma.unwrap_or((-self.hyperbolic.b / 2.0).exp())
    }

    pub fn disk_center(&self) -> Vec<f64> {
        self.geometry.disk_center.clone().unwrap_or_else(|| vec![0.5; self.dim()])
    }

    fn validate(&self) -> Result<(), (&'static str, &'static str, String)> {
        fn pos(sec: &'static str, key: &'static str, v: f64) -> Result<(), (&'static str, &'static str, String)> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err((sec, key, format!("must be a positive real, got {v}")))
            }
        }
        let h = &self.hyperbolic;
        pos("hyperbolic", "b", h.b)?;
        if let Some(s) = h.sigma {
            if !(s > 0.0 && s < 1.0) {
                return Err(("hyperbolic", "sigma", format!("must lie in (0, 1), got {s}")));
            }
        }
        if h.n_max == 0 {
            return Err(("hyperbolic", "n_max", "must be >= 1".into()));
        }
        if h.samples < 100 {
            return Err(("hyperbolic", "samples", format!("must be >= 100, got {}", h.samples)));
        }
        if let Some(w) = h.fit_window {
            if w[0] >= w[1] || w[1] > h.n_max {
                return Err(("hyperbolic", "fit_window", format!("need lo < hi <= n_max, got {w:?}")));
            }
        }
        if let Some(t) = h.force_tau {
            pos("hyperbolic", "force_tau", t)?;
        }
        let g = &self.geometry;
        pos("geometry", "delta1", g.delta1)?;
        pos("geometry", "delta1_prime", g.delta1_prime)?;
        if !g.allow_wide_prime && g.delta1_prime > g.delta1 / 10.0 * (1.0 + 1e-12) {
            return Err((
                "geometry",
                "delta1_prime",
                format!("{} exceeds delta1/10 = {}; set allow_wide_prime = true to override", g.delta1_prime, g.delta1 / 10.0),
            ));
        }
        if !(g.delta_s >= 0.0 && g.delta_s.is_finite()) {
            return Err(("geometry", "delta_s", format!("must be >= 0, got {}", g.delta_s)));
        }
        if self.dim() == 2 && g.delta_s == 0.0 {
            return Err(("geometry", "delta_s", "2D systems need a positive stable-leaf radius".into()));
        }
        if g.delta0_grid.is_empty() {
            return Err(("geometry", "delta0_grid", "must not be empty".into()));
        }
        for &d in &g.delta0_grid {
            pos("geometry", "delta0_grid", d)?;
        }
        if g.p_grid.is_empty() || g.p_grid.iter().any(|p| !p.is_finite()) {
            return Err(("geometry", "p_grid", "must be a nonempty list of reals".into()));
        }
        pos("geometry", "resolution", g.resolution)?;
        pos("geometry", "max_gap", g.max_gap)?;
        pos("geometry", "disk_radius", g.disk_radius)?;
        pos("geometry", "zeta", g.zeta)?;
        if g.zeta > 1.0 {
            return Err(("geometry", "zeta", format!("must lie in (0, 1], got {}", g.zeta)));
        }
        if let Some(c) = &g.disk_center {
            if c.len() != self.dim() || c.iter().any(|v| !v.is_finite()) {
                return Err(("geometry", "disk_center", format!("need {} finite coordinates", self.dim())));
            }
        }
        if g.setup_samples == 0 {
            return Err(("geometry", "setup_samples", "must be >= 1".into()));
        }
        if g.n_lo == 0 || g.n_hi < g.n_lo {
            return Err(("geometry", "n_hi", format!("need 1 <= n_lo <= n_hi, got {}..{}", g.n_lo, g.n_hi)));
        }
        if g.m_cap == 0 {
            return Err(("geometry", "m_cap", "must be >= 1".into()));
        }
        if g.pair_samples < 2 {
            return Err(("geometry", "pair_samples", "must be >= 2".into()));
        }
        let p = &self.partition;
        if p.n0 == 0 {
            return Err(("partition", "n0", "must be >= 1".into()));
        }
        if p.n_max < p.n0 {
            return Err(("partition", "n_max", format!("must be >= n0 = {}", p.n0)));
        }
        if p.crossing_horizon == Some(0) {
            return Err(("partition", "crossing_horizon", "must be >= 1".into()));
        }
        if p.n_stall == Some(0) {
            return Err(("partition", "n_stall", "must be >= 1".into()));
        }
        let s = &self.stats;
        if s.samples < 10_000 {
            return Err(("stats", "samples", format!("must be >= 10000, got {}", s.samples)));
        }
        if let Some(n) = s.ld_samples {
            if n < 100 {
                return Err(("stats", "ld_samples", format!("must be >= 100, got {n}")));
            }
        }
        for (key, name) in [("phi", &s.phi), ("psi", &s.psi), ("observable", &s.observable)] {
            if let Err(e) = Observable::by_name(name, self.dim()) {
                return Err(("stats", key, e.to_string()));
            }
        }
        if s.epsilon.is_empty() {
            return Err(("stats", "epsilon", "must not be empty".into()));
        }
        for &e in &s.epsilon {
            pos("stats", "epsilon", e)?;
        }
        if s.ld_n.is_empty() || s.ld_n.contains(&0) {
            return Err(("stats", "ld_n", "must be a nonempty list of n >= 1".into()));
        }
        if s.n_corr == 0 {
            return Err(("stats", "n_corr", "must be >= 1".into()));
        }
        if s.mean_orbit == 0 {
            return Err(("stats", "mean_orbit", "must be >= 1".into()));
        }
        Ok(())
    }

    /// Emitted form of the config (parses back to the same hash).
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// JSON with sorted keys and the output directory removed.
    pub fn canonical_json(&self) -> String {
        let mut c = self.clone();
        c.run.out = None;
        serde_json::to_string(&serde_json::to_value(&c).expect("config serializes")).expect("value serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    /// Seed of one phase, derived from the master seed.
    pub fn phase_seed(&self, phase: &str) -> u64 {
        let d = Sha256::digest(format!("{}:{phase}", self.run.seed).as_bytes());
        u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "[system]\nname = \"doubling\"\n\n[hyperbolic]\nb = 0.5\nn_max = 20\n";

    #[test]
    fn defaults_fill_in() {
        let c = RunConfig::parse(BASE).unwrap();
        assert_eq!(c.geometry, GeometrySection::default());
        assert_eq!(c.run.seed, 1);
        assert!((c.sigma() - (-0.25f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn round_trip_hash() {
        let src = "[system]\nname = \"perturbed_cat\"\neps = 0.3\ngrid = 512\n[hyperbolic]\nb = 0.9\nn_max = 60\n\
                   force_tau = 1.0\n[geometry]\ndelta1 = 0.2\ndelta1_prime = 0.02\ndelta_s = 0.1\ndelta0_grid = [0.05, 0.1]\n\
                   p_grid = [0.0]\nresolution = 1e-8\nmax_gap = 0.01\ndisk_radius = 0.1\nsetup_samples = 100\nn_lo = 1\n\
                   n_hi = 5\nm_cap = 10\nzeta = 1.0\npair_samples = 8\n[stats]\nsamples = 20000\nburn_in = 10\n\
                   sampling = \"stratified\"\nphi = \"sin_x1\"\npsi = \"cos_x2\"\nn_corr = 5\nobservable = \"x\"\n\
                   epsilon = [0.1, 0.2]\nld_n = [5, 10]\nmean_orbit = 1000\n[run]\nseed = 99\nout = \"somewhere\"\n";
        let a = RunConfig::parse(src).unwrap();
        let b = RunConfig::parse(&a.to_toml()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
        // The output directory does not enter the hash; the seed does.
        let mut c = a.clone();
        c.run.out = None;
        assert_eq!(c.hash(), a.hash());
        c.run.seed = 100;
        assert_ne!(c.hash(), a.hash());
    }

    #[test]
    fn missing_b_names_field() {
        let err = RunConfig::parse("[system]\nname = \"doubling\"\n[hyperbolic]\nn_max = 20\n").unwrap_err();
        match err {
            CliError::Config { field, line, .. } => {
                assert_eq!(field, "hyperbolic.b");
                assert!(line.is_some());
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn semantic_errors_carry_line() {
        let src = format!("{BASE}sigma = 1.5\n");
        match RunConfig::parse(&src).unwrap_err() {
            CliError::Config { field, line, .. } => {
                assert_eq!(field, "hyperbolic.sigma");
                assert_eq!(line, Some(7));
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn wide_prime_needs_flag() {
        let g = "[geometry]\ndelta1 = 0.1\ndelta1_prime = 0.02\n";
        let src = format!("{BASE}{g}");
        match RunConfig::parse(&src).unwrap_err() {
            CliError::Config { field, .. } => assert_eq!(field, "geometry.delta1_prime"),
            e => panic!("unexpected {e:?}"),
        }
        let ok = format!("{BASE}{g}allow_wide_prime = true\n");
        assert!(RunConfig::parse(&ok).is_ok());
    }

    #[test]
    fn unknown_observable_rejected() {
        let st = "[stats]\nsamples = 20000\nphi = \"bogus\"\n";
        match RunConfig::parse(&format!("{BASE}{st}")).unwrap_err() {
            CliError::Config { field, line, .. } => {
                assert_eq!(field, "stats.phi");
                assert_eq!(line, Some(9));
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn phase_seeds_differ() {
        let c = RunConfig::parse(BASE).unwrap();
        assert_ne!(c.phase_seed("tails"), c.phase_seed("stats"));
        assert_eq!(c.phase_seed("tails"), c.phase_seed("tails"));
    }
}
