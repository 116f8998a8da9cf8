//! Subcommands. Each one opens the run directory, writes its artifacts and
//! saves the manifest; errors carry the exit code of the failure class.

use gmy_core::geometry::{certify, find_reference_setup, preball, Certificate, Cylinder, ReferenceSetup, SetupSearch};
use gmy_core::hyperbolic::fit::{compare_models, default_window, fit_decay_window, ModelComparison};
use gmy_core::hyperbolic::{expansion_log, report, tail_curve, DecayFit, ExpansionTime, HyperbolicParams};
use gmy_core::partition::{build, delta0_disk, verify_markov, Element, MarkovReport, Partition, PartitionParams, VerifyOptions};
use gmy_core::stats::{
    correlation_with, fit_correlation_decay, large_deviation_with, recurrence_tail, satellite_decay, tail_from_partition,
    theta_concentration, CorrelationOptions, LdOptions, Observable, Region, SatelliteDecay, ThetaSummary, BATCHES,
};
use gmy_core::systems::{make_perturbed_anosov_with, zoo, ItemCheck, PerturbedOptions, Point, SystemDescriptor, SystemKind};
use serde::{Deserialize, Serialize};

use crate::manifest::{read_json, Run};
use crate::{io_err, CliError, RunConfig};

/// Result or reason code plus message, for records that keep going on failure.
fn split<T>(r: gmy_core::Result<T>) -> (Option<T>, Option<String>) {
    match r {
        Ok(v) => (Some(v), None),
        Err(e) => (None, Some(format!("{}: {e}", e.code()))),
    }
}

// ---------------------------------------------------------------- zoo

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZooEntry {
    pub name: String,
    pub label: String,
    pub dim: usize,
    pub params: String,
    /// Construction checks on the verification grid (2D members only).
    pub items: Vec<ItemCheck>,
    pub status: String,
}

fn zoo_2d(name: &str, label: &str, params: String, opts: &PerturbedOptions) -> ZooEntry {
    let (items, status) = match make_perturbed_anosov_with(opts) {
        Ok(s) => {
            let v = s.verified.expect("perturbed construction records its checks");
            let ok = v.all_pass();
            (v.items, if ok { "all items pass".to_string() } else { "item failure".to_string() })
        }
        Err(gmy_core::Error::ConstructionFailed(m)) => (Vec::new(), format!("construction failed: {m}")),
        Err(e) => (Vec::new(), format!("{}: {e}", e.code())),
    };
    ZooEntry { name: name.into(), label: label.into(), dim: 2, params, items, status }
}

/// Zoo members with the grid verification of the 2D ones; the cat map is
/// checked as the eps = 0 member of the perturbed family.
pub fn cmd_zoo() -> Vec<ZooEntry> {
    let labels: std::collections::BTreeMap<_, _> = zoo().into_iter().collect();
    let one = |name: &str, params: &str| ZooEntry {
        name: name.into(),
        label: labels[name].into(),
        dim: 1,
        params: params.into(),
        items: Vec::new(),
        status: "uniform checks not applicable".into(),
    };
    let d = PerturbedOptions::default();
    vec![
        one("doubling", ""),
        one("smooth_expanding", "a = 0.3"),
        one("pomeau_manneville", "alpha = 0.5"),
        zoo_2d("cat", labels["cat"], "matrix [[2, 1], [1, 1]]".into(), &PerturbedOptions { eps: 0.0, ..d.clone() }),
        zoo_2d("perturbed_cat", labels["perturbed_cat"], "eps = 0.3, V radius 0.05".into(), &d),
        zoo_2d("perturbed_cat", labels["perturbed_cat"], "eps = 1.2, V radius 0.05".into(), &PerturbedOptions { eps: 1.2, ..d }),
    ]
}

pub fn render_zoo(entries: &[ZooEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        s.push_str(&format!("{:<18} {}D  {:<26} {}\n", e.name, e.dim, e.params, e.status));
        s.push_str(&format!("    {}\n", e.label));
        for it in &e.items {
            s.push_str(&format!(
                "    item {:<24} {}  value {:.6}  threshold {:.6}\n",
                it.item,
                if it.pass { "pass" } else { "FAIL" },
                it.value,
                it.threshold
            ));
        }
    }
    s
}

// ---------------------------------------------------------------- tails

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailsRecord {
    pub b: f64,
    pub sigma: f64,
    pub n_max: usize,
    pub samples: usize,
    pub window: [usize; 2],
    pub fit: Option<DecayFit>,
    pub fit_error: Option<String>,
    pub comparison: Option<ModelComparison>,
    pub comparison_error: Option<String>,
    pub theta_min: f64,
    pub censored_fraction: f64,
    pub skipped: u64,
}

fn hyp_params(cfg: &RunConfig) -> Result<HyperbolicParams, CliError> {
    Ok(HyperbolicParams::with_sigma(cfg.hyperbolic.b, cfg.sigma(), cfg.hyperbolic.n_max)?)
}

/// Expansion-time tail over the reference disk: tails.csv and tails_fit.json.
pub fn cmd_tails(cfg: &RunConfig) -> Result<TailsRecord, CliError> {
    let mut run = Run::open(cfg, "tails")?;
    let sys = run.system()?;
    let disk = run.disk(&sys)?;
    let h = &cfg.hyperbolic;
    let p = hyp_params(cfg)?;
    let tail = tail_curve(&sys, &disk, &p, h.samples, cfg.phase_seed("tails"))?;
    run.write_csv("tails.csv", &tail.to_csv())?;
    let window = h.fit_window.unwrap_or_else(|| default_window(&tail));
    let (fit, fit_error) = split(fit_decay_window(&tail, window, h.force_tau));
    let (comparison, comparison_error) = if h.compare_models {
        let (ns, ys): (Vec<f64>, Vec<f64>) = (window[0]..=window[1].min(tail.n_max()))
            .filter(|&n| tail.curve[n] > 0.0)
            .map(|n| (n as f64, tail.curve[n]))
            .unzip();
        split(compare_models(&ns, &ys))
    } else {
        (None, None)
    };
    if tail.theta_min.is_finite() {
        run.manifest.constants.theta_hat = Some(tail.theta_min);
    }
    let rec = TailsRecord {
        b: p.b,
        sigma: p.sigma,
        n_max: p.n_max,
        samples: h.samples,
        window,
        fit,
        fit_error,
        comparison,
        comparison_error,
        theta_min: tail.theta_min,
        censored_fraction: tail.censored_fraction,
        skipped: tail.skipped,
    };
    run.write_json("tails_fit.json", &rec)?;
    run.finish()?;
    Ok(rec)
}

// ---------------------------------------------------------------- hyp

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypRecord {
    pub t: f64,
    pub e: ExpansionTime,
    pub hyperbolic_times: usize,
    pub first_time: Option<usize>,
    pub frequency: f64,
    pub theta_check: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypSummary {
    pub points: usize,
    pub finite_fraction: f64,
    pub frequency_min: f64,
    pub frequency_mean: f64,
    pub certificates: usize,
    pub certificate_errors: Vec<String>,
    pub max_ratio: f64,
    pub c2_hat: f64,
    pub theta: Option<ThetaSummary>,
}

/// Perturbation region of a perturbed automorphism.
pub fn perturbation_region(sys: &SystemDescriptor) -> Option<Region> {
    match sys.kind {
        SystemKind::PerturbedCat { center, radius, .. } => Some(Region { center: Point::new2(center[0], center[1]), radius }),
        _ => None,
    }
}

/// Per-point hyperbolic times, pre-ball certificates at the first hyperbolic
/// time, and the time fraction outside V for perturbed systems.
pub fn cmd_hyp(cfg: &RunConfig) -> Result<HypSummary, CliError> {
    const CERT_POINTS: usize = 32;
    let mut run = Run::open(cfg, "hyp")?;
    let sys = run.system()?;
    let disk = run.disk(&sys)?;
    let p = hyp_params(cfg)?;
    let g = &cfg.geometry;
    let k = cfg.hyperbolic.report_samples.max(1);
    let mut recs = Vec::with_capacity(k);
    let mut certs: Vec<Certificate> = Vec::new();
    let mut cert_errors = Vec::new();
    for i in 0..k {
        // Evenly spaced disk points, offset from the ends.
        let t = disk.radius * (2.0 * (i as f64 + 0.5) / k as f64 - 1.0);
        let x = disk.point_at(t);
        let log = match expansion_log(&sys, x, p.n_max) {
            Ok(l) => l,
            Err(gmy_core::Error::DerivativeUndefined { .. }) => continue,
            Err(e) => return Err(e.into()),
        };
        let r = report(&log, &p)?;
        let rec = HypRecord {
            t,
            e: r.e,
            hyperbolic_times: r.times.len(),
            first_time: r.times.first().copied(),
            frequency: r.frequency,
            theta_check: r.theta_check.is_finite().then_some(r.theta_check),
        };
        if certs.len() + cert_errors.len() < CERT_POINTS {
            if let Some(n) = rec.first_time {
                let c = preball(&sys, x, n, g.delta1, g.delta1_prime, p.sigma).and_then(|pb| certify(&sys, &pb, g.zeta, g.pair_samples));
                match c {
                    Ok(c) => certs.push(c),
                    Err(e) => cert_errors.push(format!("t = {t}: {}", e.code())),
                }
            }
        }
        recs.push(rec);
    }
    run.write_records("hyp.jsonl", &recs)?;
    run.write_records("certificates.jsonl", &certs)?;
    let theta = match perturbation_region(&sys) {
        Some(v) => Some(theta_concentration(&sys, &v, cfg.hyperbolic.theta_n, cfg.hyperbolic.theta_starts, cfg.phase_seed("theta"))?),
        None => None,
    };
    let m = recs.len().max(1) as f64;
    let c2_hat = certs.iter().map(|c| c.c2_hat).fold(0.0, f64::max);
    let sum = HypSummary {
        points: recs.len(),
        finite_fraction: recs.iter().filter(|r| matches!(r.e, ExpansionTime::Finite(_))).count() as f64 / m,
        frequency_min: recs.iter().map(|r| r.frequency).fold(f64::INFINITY, f64::min),
        frequency_mean: recs.iter().map(|r| r.frequency).sum::<f64>() / m,
        certificates: certs.len(),
        certificate_errors: cert_errors,
        max_ratio: certs.iter().map(|c| c.max_ratio).fold(0.0, f64::max),
        c2_hat,
        theta,
    };
    if !certs.is_empty() {
        run.manifest.constants.c2_hat = Some(c2_hat);
    }
    run.write_json("hyp_summary.json", &sum)?;
    run.finish()?;
    Ok(sum)
}

// ---------------------------------------------------------------- build / verify

/// Partition without its elements (those go to partition.jsonl).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionMeta {
    pub element_count: usize,
    pub gcd_r: usize,
    pub tail_consistent: bool,
    pub injected: Option<usize>,
    pub partition: Partition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyRecord {
    pub report: MarkovReport,
    pub pass_fraction: f64,
    pub tail_consistent: bool,
    pub injected: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecurrenceRecord {
    pub fit: Option<DecayFit>,
    pub accepted: bool,
    pub reason: Option<String>,
    pub fit_error: Option<String>,
    pub satellites: SatelliteDecay,
    pub uncovered_mass: f64,
    pub resolved_until: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BuildOutcome {
    pub setup: ReferenceSetup,
    pub partition: Partition,
    pub verify: VerifyRecord,
    pub recurrence: RecurrenceRecord,
    pub build_seconds: f64,
}

fn setup_search(cfg: &RunConfig) -> (Vec<(f64, f64)>, SetupSearch) {
    let g = &cfg.geometry;
    let grid = g.delta0_grid.iter().flat_map(|&d| g.p_grid.iter().map(move |&p| (p, d))).collect();
    let search = SetupSearch {
        delta1_prime: g.delta1_prime,
        delta_s: g.delta_s,
        sigma: cfg.sigma(),
        n_lo: g.n_lo,
        n_hi: g.n_hi,
        samples: g.setup_samples,
        seed: cfg.phase_seed("setup"),
    };
    (grid, search)
}

fn verify_and_export(run: &mut Run, sys: &SystemDescriptor, part: &Partition, injected: Option<usize>) -> Result<VerifyRecord, CliError> {
    let cyl = Cylinder::new(sys, &delta0_disk(part), part.delta_s, if sys.dim == 1 { 0 } else { 4 })?;
    let opts = VerifyOptions { zeta: run.cfg.geometry.zeta, ..Default::default() };
    let report = verify_markov(sys, part, &cyl, &opts)?;
    let rec = VerifyRecord {
        pass_fraction: if report.checked > 0 { 1.0 - report.failures.len() as f64 / report.checked as f64 } else { 1.0 },
        tail_consistent: part.tail_consistent(),
        injected,
        report,
    };
    run.write_json("verify.json", &rec)?;
    Ok(rec)
}

fn check_verified(rec: &VerifyRecord) -> Result<(), CliError> {
    if rec.report.pass && rec.tail_consistent {
        return Ok(());
    }
    let first = rec.report.failures.first().map(|f| format!("; element {} : {}", f.id, f.reason)).unwrap_or_default();
    Err(CliError::Verification(format!(
        "{} of {} elements failed, c_hat {:.4} (bound {:.4}), tail consistent {}{first}",
        rec.report.failures.len(),
        rec.report.checked,
        rec.report.c_hat,
        rec.report.c_bound,
        rec.tail_consistent
    )))
}

/// Widens the largest element by half its length on each side.
fn corrupt(part: &mut Partition) -> Option<usize> {
    let e: &mut Element = part.elements.iter_mut().max_by(|a, b| a.measure().total_cmp(&b.measure()))?;
    let w = e.measure();
    e.core = [e.core[0] - 0.5 * w, e.core[1] + 0.5 * w];
    Some(e.id)
}

fn delta_csv(part: &Partition) -> String {
    let mut s = String::from(
        "n,resolved,cover,candidates,accepted,accepted_mass,delta_mass,delta_parts,satellite_mass,boundary_satellite_mass,ball_length\n",
    );
    for r in &part.steps {
        s.push_str(&format!(
            "{},{},{},{},{},{:.12e},{:.12e},{},{:.12e},{:.12e},{:.12e}\n",
            r.n,
            r.resolved as u8,
            r.cover,
            r.candidates,
            r.accepted,
            r.accepted_mass,
            r.delta_mass,
            r.delta_parts,
            r.satellite_mass,
            r.boundary_satellite_mass,
            r.ball_length
        ));
    }
    s
}

fn recurrence_export(run: &mut Run, part: &Partition) -> Result<RecurrenceRecord, CliError> {
    let tail = tail_from_partition(part);
    run.write_csv("rtail.csv", &tail.to_csv())?;
    let (rt, fit_error) = split(recurrence_tail(part));
    let rec = RecurrenceRecord {
        accepted: rt.as_ref().is_some_and(|r| r.accepted),
        reason: rt.as_ref().and_then(|r| r.reason.clone()),
        fit: rt.map(|r| r.fit),
        fit_error,
        satellites: satellite_decay(part),
        uncovered_mass: part.uncovered_mass,
        resolved_until: part.resolved_until,
    };
    run.write_json("rtail_fit.json", &rec)?;
    Ok(rec)
}

/// Reference-setup search, partition build, Markov verification and the recurrence tail.
pub fn cmd_build(cfg: &RunConfig) -> Result<BuildOutcome, CliError> {
    let mut run = Run::open(cfg, "build")?;
    let sys = run.system()?;
    let disk = run.disk(&sys)?;
    let (grid, search) = setup_search(cfg);
    let mut setup = find_reference_setup(&sys, &disk, &grid, cfg.geometry.m_cap, &search)?;
    if let Some(h) = cfg.partition.crossing_horizon {
        setup.n0 = setup.n0.min(h);
    }
    run.write_json("setup.json", &setup)?;
    let c = &mut run.manifest.constants;
    c.p = Some(setup.p.coords().to_vec());
    c.delta0 = Some(setup.delta0);
    c.n0 = Some(setup.n0);
    let g = &cfg.geometry;
    let params = PartitionParams {
        n0: cfg.partition.n0,
        n_max: cfg.partition.n_max,
        delta1: g.delta1,
        delta1_prime: g.delta1_prime,
        sigma: cfg.sigma(),
        resolution: g.resolution,
        n_stall: cfg.partition.n_stall,
        max_gap: g.max_gap,
        candidate_rule: cfg.partition.candidate_rule,
    };
    let t = std::time::Instant::now();
    let mut part = match build(&sys, &disk, &setup, &params) {
        Ok(p) => p,
        Err(e @ gmy_core::Error::Stall { .. }) => {
            let diag = serde_json::json!({ "code": e.code(), "error": e.to_string(), "setup": setup, "params": params });
            run.write_json("build_diagnostics.json", &diag)?;
            run.finish()?;
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    let build_seconds = t.elapsed().as_secs_f64();
    let injected = if cfg.partition.inject_corruption { corrupt(&mut part) } else { None };
    run.write_records("partition.jsonl", &part.elements)?;
    run.write_csv("delta.csv", &delta_csv(&part))?;
    let c = &mut run.manifest.constants;
    c.c5_hat = Some(part.c5_hat);
    c.p_hat = Some(part.p_hat);
    c.eta_hat = Some(part.eta_hat);
    let verify = verify_and_export(&mut run, &sys, &part, injected)?;
    let recurrence = recurrence_export(&mut run, &part)?;
    let mut meta = PartitionMeta {
        element_count: part.elements.len(),
        gcd_r: part.gcd_r(),
        tail_consistent: verify.tail_consistent,
        injected,
        partition: part,
    };
    let elements = std::mem::take(&mut meta.partition.elements);
    run.write_json("partition.json", &meta)?;
    meta.partition.elements = elements;
    run.finish()?;
    check_verified(&verify)?;
    Ok(BuildOutcome { setup, partition: meta.partition, verify, recurrence, build_seconds })
}

/// Reloads partition.json and partition.jsonl from the run directory.
pub fn load_partition(dir: &std::path::Path) -> Result<PartitionMeta, CliError> {
    let mut meta: PartitionMeta = read_json(&dir.join("partition.json"))?;
    let p = dir.join("partition.jsonl");
    let f = std::fs::File::open(&p).map_err(|e| io_err(&p, e))?;
    let mut elements = Vec::with_capacity(meta.element_count);
    for line in std::io::BufRead::lines(std::io::BufReader::new(f)).skip(1) {
        let line = line.map_err(|e| io_err(&p, e))?;
        elements.push(serde_json::from_str::<Element>(&line).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?);
    }
    if elements.len() != meta.element_count {
        return Err(CliError::Io(format!("{}: {} elements, manifest says {}", p.display(), elements.len(), meta.element_count)));
    }
    meta.partition.elements = elements;
    Ok(meta)
}

/// Re-runs verification on the exported partition.
pub fn cmd_verify(cfg: &RunConfig) -> Result<VerifyRecord, CliError> {
    let mut run = Run::open(cfg, "verify")?;
    let sys = run.system()?;
    let meta = match load_partition(&run.out) {
        Ok(m) => m,
        Err(CliError::Io(m)) if !run.path("partition.json").exists() => {
            return Err(CliError::MissingArtifacts { dir: run.out.display().to_string(), missing: vec![format!("partition.json ({m})")] })
        }
        Err(e) => return Err(e),
    };
    let rec = verify_and_export(&mut run, &sys, &meta.partition, meta.injected)?;
    run.finish()?;
    check_verified(&rec)?;
    Ok(rec)
}

// ---------------------------------------------------------------- stats

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRecord {
    pub phi: String,
    pub psi: String,
    pub power: usize,
    pub samples: usize,
    pub burn_in: usize,
    pub fit: Option<DecayFit>,
    pub fit_error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationRecord {
    pub file: String,
    pub epsilon: f64,
    pub mean: Option<f64>,
    pub fit: Option<DecayFit>,
    pub fit_error: Option<String>,
    pub nonincreasing: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationSet {
    pub observable: String,
    pub ld_n: Vec<usize>,
    pub samples: usize,
    pub deviations: Vec<DeviationRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsOutcome {
    pub correlation: CorrelationRecord,
    pub deviations: DeviationSet,
}

/// Correlation series of (phi, psi o f^{k n}) with k the gcd of return times
/// when a partition exists, and large-deviation curves for every epsilon.
pub fn cmd_stats(cfg: &RunConfig) -> Result<StatsOutcome, CliError> {
    let mut run = Run::open(cfg, "stats")?;
    let sys = run.system()?;
    let s = &cfg.stats;
    let power = if run.path("partition.json").exists() {
        read_json::<PartitionMeta>(&run.path("partition.json"))?.gcd_r.max(1)
    } else {
        1
    };
    let phi = Observable::by_name(&s.phi, sys.dim)?;
    let psi = Observable::by_name(&s.psi, sys.dim)?;
    let opts = CorrelationOptions { burn_in: s.burn_in, batches: BATCHES, sampling: s.sampling, power };
    let series = correlation_with(&sys, &phi, &psi, s.n_corr, s.samples, cfg.phase_seed("correlation"), &opts)?;
    run.write_csv("corr.csv", &series.to_csv())?;
    let (fit, fit_error) = split(fit_correlation_decay(&series));
    let correlation = CorrelationRecord { phi: s.phi.clone(), psi: s.psi.clone(), power, samples: s.samples, burn_in: s.burn_in, fit, fit_error };
    run.write_json("corr_fit.json", &correlation)?;
    let obs = Observable::by_name(&s.observable, sys.dim)?;
    let ld = LdOptions { burn_in: s.burn_in, mean_orbit: s.mean_orbit };
    let mut deviations = Vec::new();
    for (i, &eps) in s.epsilon.iter().enumerate() {
        let file = format!("ld_{i}.csv");
        let seed = cfg.phase_seed(&format!("deviation/{i}"));
        let (curve, err) = split(large_deviation_with(&sys, &obs, &s.ld_n, eps, s.ld_samples.unwrap_or(s.samples), seed, &ld));
        if let Some(c) = &curve {
            run.write_csv(&file, &c.to_csv())?;
        }
        deviations.push(match curve {
            Some(c) => DeviationRecord { file, epsilon: eps, mean: Some(c.mean), fit: c.fit, fit_error: c.fit_error, nonincreasing: Some(c.nonincreasing) },
            None => DeviationRecord { file: String::new(), epsilon: eps, mean: None, fit: None, fit_error: err, nonincreasing: None },
        });
    }
    let deviations = DeviationSet { observable: s.observable.clone(), ld_n: s.ld_n.clone(), samples: s.ld_samples.unwrap_or(s.samples), deviations };
    run.write_json("ld_fit.json", &deviations)?;
    run.finish()?;
    Ok(StatsOutcome { correlation, deviations })
}
