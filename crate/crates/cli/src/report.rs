//! Consolidated markdown summary of a run directory.
//!
//! The report only reads artifacts. It does not touch the manifest, so
//! re-running it over unchanged artifacts gives the same bytes.

use std::fmt::Write as _;
use std::path::Path;

use gmy_core::geometry::ReferenceSetup;
use gmy_core::hyperbolic::DecayFit;
use gmy_core::systems::SystemDescriptor;

use crate::commands::{CorrelationRecord, DeviationSet, HypSummary, PartitionMeta, RecurrenceRecord, TailsRecord, VerifyRecord};
use crate::manifest::{read_json, RunManifest, MANIFEST_FILE};
use crate::{io_err, CliError};

pub const REPORT_FILE: &str = "report.md";

const KNOWN: &[&str] = &[
    MANIFEST_FILE,
    "system.json",
    "tails_fit.json",
    "hyp_summary.json",
    "setup.json",
    "partition.json",
    "verify.json",
    "rtail_fit.json",
    "corr_fit.json",
    "ld_fit.json",
];

fn fit_line(f: &DecayFit) -> String {
    format!(
        "tau = {:.4}, d = {:.4e}, r^2 = {:.4} on n in [{}, {}] ({} points{})",
        f.tau,
        f.rate,
        f.r_squared,
        f.window[0],
        f.window[1],
        f.points,
        if f.forced { ", tau forced" } else { "" }
    )
}

fn opt_fit(fit: &Option<DecayFit>, err: &Option<String>) -> String {
    match (fit, err) {
        (Some(f), _) => fit_line(f),
        (None, Some(e)) => format!("no fit ({e})"),
        (None, None) => "no fit".into(),
    }
}

fn opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_else(|| "n/a".into())
}

struct Doc {
    text: String,
    gaps: Vec<String>,
}

impl Doc {
    /// Loads an artifact, or records a gap naming the command that would produce it.
    fn load<T: for<'de> serde::Deserialize<'de>>(&mut self, dir: &Path, name: &str, producer: &str) -> Option<T> {
        let p = dir.join(name);
        if !p.exists() {
            self.gaps.push(format!("{name} missing (run `gmylab {producer}`)"));
            let _ = writeln!(self.text, "_Gap: {name} not found; run `gmylab {producer}`._\n");
            return None;
        }
        match read_json(&p) {
            Ok(v) => Some(v),
            Err(e) => {
                self.gaps.push(format!("{name} unreadable"));
                let _ = writeln!(self.text, "_Gap: {name} could not be read ({e})._\n");
                None
            }
        }
    }

    fn line(&mut self, s: impl AsRef<str>) {
        self.text.push_str(s.as_ref());
        self.text.push('\n');
    }
}

/// Writes report.md into `dir` and returns its text.
pub fn cmd_report(dir: &Path) -> Result<String, CliError> {
    if !KNOWN.iter().any(|n| dir.join(n).exists()) {
        return Err(CliError::MissingArtifacts {
            dir: dir.display().to_string(),
            missing: KNOWN.iter().map(|s| s.to_string()).collect(),
        });
    }
    let mut d = Doc { text: String::new(), gaps: Vec::new() };

    d.line("## 1. System");
    d.line("");
    if let Some(sys) = d.load::<SystemDescriptor>(dir, "system.json", "tails") {
        d.line(format!("- system: `{}` (dimension {})", sys.name, sys.dim));
        if !sys.params.is_empty() {
            let ps: Vec<String> = sys.params.iter().map(|(k, v)| format!("{k} = {v}")).collect();
            d.line(format!("- parameters: {}", ps.join(", ")));
        }
        match &sys.verified {
            Some(v) => {
                d.line(format!(
                    "- grid verification ({}^2 points): sigma1 = {:.6}, sigma2 = {:.6}, delta0 = {:.6}",
                    v.grid, v.sigma1, v.sigma2, v.delta0
                ));
                for it in &v.items {
                    d.line(format!(
                        "  - item {}: {} (value {:.6}, threshold {:.6})",
                        it.item,
                        if it.pass { "pass" } else { "FAIL" },
                        it.value,
                        it.threshold
                    ));
                }
            }
            None => d.line("- no grid verification (not a perturbed automorphism)"),
        }
        d.line("");
    }

    d.line("## 2. Expansion times and hyperbolic times");
    d.line("");
    d.line("Checked: the tail of the expansion time over the reference disk, Leb{E > n} <= C exp(-d n^tau),");
    d.line("and a positive frequency of sigma-hyperbolic times up to the horizon.");
    d.line("");
    if let Some(t) = d.load::<TailsRecord>(dir, "tails_fit.json", "tails") {
        d.line(format!("- b = {}, sigma = {:.6}, horizon {}, {} disk samples", t.b, t.sigma, t.n_max, t.samples));
        d.line(format!("- censored fraction {:.4e}, skipped {}, theta_min {:.4}", t.censored_fraction, t.skipped, t.theta_min));
        d.line(format!("- tail fit: {}", opt_fit(&t.fit, &t.fit_error)));
        if let Some(c) = &t.comparison {
            d.line(format!(
                "- model comparison: preferred {} (BIC stretched {:.2}, power law {:.2}; power-law exponent {:.4})",
                c.preferred, c.bic_stretched, c.bic_power_law, c.power_law.exponent
            ));
        }
        d.line("");
    }
    if let Some(h) = d.load::<HypSummary>(dir, "hyp_summary.json", "hyp") {
        d.line(format!(
            "- {} report points: finite expansion time for {:.4} of them, hyperbolic-time frequency min {:.4}, mean {:.4}",
            h.points, h.finite_fraction, h.frequency_min, h.frequency_mean
        ));
        d.line(format!(
            "- pre-ball certificates: {} checked, {} errors, backward contraction max ratio {:.6} (<= 1 required), C2_hat {:.4e}",
            h.certificates,
            h.certificate_errors.len(),
            h.max_ratio,
            h.c2_hat
        ));
        if let Some(th) = &h.theta {
            d.line(format!(
                "- time fraction outside V over {} starts of length {}: min {:.4}, mean {:.4}, max {:.4}",
                th.starts, th.n, th.min, th.mean, th.max
            ));
        }
        d.line("");
    }

    d.line("## 3. Partition");
    d.line("");
    d.line("Checked: elements are chosen as a maximal family of collars inside Delta_{n-1} avoiding earlier cores");
    d.line("and annuli; Leb(Delta_n) decreases; separation lag p_hat <= sufficient p.");
    d.line("");
    if let Some(s) = d.load::<ReferenceSetup>(dir, "setup.json", "build") {
        d.line(format!(
            "- reference setup: p = {:?}, delta0 = {}, N0 = {} ({} balls tested)",
            s.p.coords(),
            s.delta0,
            s.n0,
            s.tested
        ));
    }
    if let Some(m) = d.load::<PartitionMeta>(dir, "partition.json", "build") {
        let p = &m.partition;
        d.line(format!(
            "- {} elements, Leb(Delta0) = {:.6}, uncovered mass {:.6e}, last resolved step {}",
            m.element_count,
            p.leb_delta0,
            p.uncovered_mass,
            opt(&p.resolved_until)
        ));
        d.line(format!("- gcd of return times {}, p_hat {} (sufficient {}), eta_hat {:.4e}", m.gcd_r, p.p_hat, p.p_suff, p.eta_hat));
        d.line(format!("- satellite constant C5_hat {:.4}", p.c5_hat));
        if let Some(i) = m.injected {
            d.line(format!("- element {i} was widened on purpose (negative control)"));
        }
        d.line("");
        d.line("| n | resolved | accepted | Leb(Delta_n) | satellites | boundary satellites |");
        d.line("|---|---|---|---|---|---|");
        for r in &p.steps {
            d.line(format!(
                "| {} | {} | {} | {:.6e} | {:.4e} | {:.4e} |",
                r.n, r.resolved, r.accepted, r.delta_mass, r.satellite_mass, r.boundary_satellite_mass
            ));
        }
    }
    d.line("");

    d.line("## 4. Markov verification and recurrence tail");
    d.line("");
    d.line("Checked: f^R(core) u-crosses the cylinder over Delta0 and stays inside it; backward contraction");
    d.line("d(f^{R-k} y, f^{R-k} z) <= C sigma^{k/2} d(f^R y, f^R z); bounded distortion of log J along f^R;");
    d.line("{R > k} lies in Delta_{k-N0}; Leb{R > n} <= C exp(-d n^tau).");
    d.line("");
    if let Some(v) = d.load::<VerifyRecord>(dir, "verify.json", "verify") {
        let r = &v.report;
        d.line(format!(
            "- {} elements checked, {} failures (pass fraction {:.6}), overall {}",
            r.checked,
            r.failures.len(),
            v.pass_fraction,
            if r.pass { "pass" } else { "FAIL" }
        ));
        d.line(format!(
            "- C_hat {:.4} (bound {:.4}), Cbar_hat {:.4e} (bound {:.4e}), tail consistency {}",
            r.c_hat, r.c_bound, r.c_bar_hat, r.c_bar_bound, v.tail_consistent
        ));
        for f in r.failures.iter().take(5) {
            d.line(format!("  - element {}: {}", f.id, f.reason));
        }
    }
    if let Some(t) = d.load::<RecurrenceRecord>(dir, "rtail_fit.json", "build") {
        d.line(format!("- recurrence tail fit: {}", opt_fit(&t.fit, &t.fit_error)));
        d.line(format!("- fit accepted: {}{}", t.accepted, t.reason.as_ref().map(|r| format!(" ({r})")).unwrap_or_default()));
        let s = &t.satellites;
        d.line(format!(
            "- boundary satellite ratio per step {} over {} steps",
            s.boundary_ratio.map(|r| format!("{r:.4}")).unwrap_or_else(|| "n/a".into()),
            s.boundary_points
        ));
    }
    d.line("");

    d.line("## 5. Correlations and large deviations");
    d.line("");
    d.line("Checked: |int phi (psi o f^{kn}) - int phi int psi| <= C exp(-d n^tau) with k the gcd of return times,");
    d.line("and mu{|S_n phi / n - int phi| > eps} <= C exp(-d n).");
    d.line("");
    if let Some(c) = d.load::<CorrelationRecord>(dir, "corr_fit.json", "stats") {
        d.line(format!(
            "- correlation of {} against {} o f^({} n), {} samples, burn-in {}: {}",
            c.phi,
            c.psi,
            c.power,
            c.samples,
            c.burn_in,
            opt_fit(&c.fit, &c.fit_error)
        ));
    }
    if let Some(ls) = d.load::<DeviationSet>(dir, "ld_fit.json", "stats") {
        d.line(format!("- large deviations of {} over n in {:?}, {} samples", ls.observable, ls.ld_n, ls.samples));
        for l in &ls.deviations {
            d.line(format!(
                "- eps = {}: mean {}, nonincreasing {}, {}",
                l.epsilon,
                l.mean.map(|m| format!("{m:.6}")).unwrap_or_else(|| "n/a".into()),
                opt(&l.nonincreasing),
                opt_fit(&l.fit, &l.fit_error)
            ));
        }
    }
    d.line("");

    d.line("## 6. Manifest");
    d.line("");
    if let Some(m) = d.load::<RunManifest>(dir, MANIFEST_FILE, "tails") {
        d.line(format!("- manifest hash `{}`", m.manifest_hash));
        d.line(format!("- config hash `{}`, tool version {}, seed {}", m.config_hash, m.tool_version, m.seed));
        let c = &m.constants;
        let p = c.p.as_ref().map(|v| format!("{v:?}")).unwrap_or_else(|| "n/a".into());
        d.line(format!(
            "- constants: p = {p}, delta0 = {}, N0 = {}, theta_hat = {}, C2_hat = {}, C5_hat = {}, P_hat = {}, eta_hat = {}, sigma1 = {}, sigma2 = {}",
            opt(&c.delta0),
            opt(&c.n0),
            opt(&c.theta_hat),
            opt(&c.c2_hat),
            opt(&c.c5_hat),
            opt(&c.p_hat),
            opt(&c.eta_hat),
            opt(&c.sigma1),
            opt(&c.sigma2)
        ));
        for (phase, secs) in &m.phases {
            d.line(format!("- phase {phase}: {secs:.3} s"));
        }
        for (file, phase) in &m.artifacts {
            d.line(format!("- artifact {file} (from {phase})"));
        }
    }

    let mut out = String::from("# Run report\n\n");
    if d.gaps.is_empty() {
        out.push_str("All sections complete.\n\n");
    } else {
        out.push_str("Gaps:\n\n");
        for g in &d.gaps {
            out.push_str(&format!("- {g}\n"));
        }
        out.push('\n');
    }
    out.push_str(&d.text);
    let p = dir.join(REPORT_FILE);
    std::fs::write(&p, &out).map_err(|e| io_err(&p, e))?;
    Ok(out)
}
