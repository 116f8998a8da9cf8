//! Inductive Markov partition of Delta_0 on a reference disk.
//!
//! Regions are unions of intervals in the chart parameter of the disk; in 2D
//! the disk is a straight centre-unstable segment so chart arclength is the
//! disk measure.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{base_orbit, image_segment, track_pair, BaseOrbit, Chart, CylFrame, Cylinder, ReferenceSetup};
use crate::hyperbolic::is_hyperbolic_values;
use crate::interval::{ord_key, IntervalSet};
use crate::numeric::{mat_vec, norm, Vec2};
use crate::systems::{torus_sub, Point, ReferenceDisk, SystemDescriptor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionParams {
    pub n0: usize,
    pub n_max: usize,
    pub delta1: f64,
    pub delta1_prime: f64,
    pub sigma: f64,
    /// Gap tolerance for crossing checks and the smallest resolved pre-ball length.
    pub resolution: f64,
    /// Consecutive zero-acceptance steps before aborting (default 3 N0).
    pub n_stall: Option<usize>,
    /// Polyline gap for 2D image checks.
    pub max_gap: f64,
    pub candidate_rule: CandidateRule,
}

/// Which crossing pieces of f^{n+m}(V'_n(x)), x in I_n, enter selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateRule {
    /// One piece per cover point: smallest crossing m, piece nearest the centre.
    SmallestM,
    /// Every collar crossing piece for every m <= N0, each read as the candidate of its own centre.
    AllPieces,
}

impl Default for PartitionParams {
    fn default() -> Self {
        PartitionParams {
            n0: 5,
            n_max: 40,
            delta1: 0.1,
            delta1_prime: 0.01,
            sigma: 0.5,
            resolution: 1e-9,
            n_stall: None,
            max_gap: 1e-3,
            candidate_rule: CandidateRule::AllPieces,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverBall {
    pub t: f64,
    pub domain_prime: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub x_t: f64,
    pub n: usize,
    pub m: usize,
    pub r: usize,
    pub core: [f64; 2],
    pub collar: [f64; 2],
    pub translate: [i64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Element {
    pub id: usize,
    pub n: usize,
    pub m: usize,
    pub r: usize,
    pub core: [f64; 2],
    pub collar: [f64; 2],
    pub x_t: f64,
    pub translate: [i64; 2],
}

impl Element {
    pub fn measure(&self) -> f64 {
        self.core[1] - self.core[0]
    }

    /// Core plus annulus at step k >= n.
    pub fn protected(&self, k: usize, sigma: f64) -> [f64; 2] {
        let q = sigma.powf((k.saturating_sub(self.n)) as f64 / 2.0);
        [
            self.core[0] - (self.core[0] - self.collar[0]) * q,
            self.core[1] + (self.collar[1] - self.core[1]) * q,
        ]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub n: usize,
    pub resolved: bool,
    pub cover: usize,
    pub candidates: usize,
    pub no_crossing: usize,
    pub accepted: usize,
    pub accepted_mass: f64,
    pub delta_mass: f64,
    pub delta_parts: usize,
    pub satellite_mass: f64,
    pub boundary_satellite_mass: f64,
    pub satellites_tracked: usize,
    pub ball_length: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub chart: Chart,
    pub p_t: f64,
    pub delta0: f64,
    pub n0_setup: usize,
    pub delta_s: f64,
    pub params: PartitionParams,
    pub elements: Vec<Element>,
    pub steps: Vec<StepRecord>,
    pub leb_delta0: f64,
    pub uncovered_mass: f64,
    /// Last step whose pre-balls were above the resolution floor.
    pub resolved_until: Option<usize>,
    pub c5_hat: f64,
    /// Max of Leb(S_n(w)) / (sigma^{(n-k)/2} Leb(w)) per lag n - k.
    pub c5_by_lag: Vec<f64>,
    pub eta_hat: f64,
    pub p_hat: usize,
    pub p_suff: usize,
    pub max_mass_error: f64,
}

impl Partition {
    pub fn delta_interval(&self) -> [f64; 2] {
        [self.p_t - self.delta0, self.p_t + self.delta0]
    }

    /// Leb(Delta_n) for n = n0..=N_max (unresolved steps keep the last resolved value).
    pub fn delta_curve(&self) -> Vec<(usize, f64)> {
        self.steps.iter().map(|s| (s.n, s.delta_mass)).collect()
    }

    /// (sum over R > n of Leb(core) + uncovered) / Leb(Delta_0), n = 0..=N_max.
    pub fn r_tail(&self) -> Vec<f64> {
        let top = self.params.n_max + self.n0_setup;
        let mut by_r = vec![0.0; top + 2];
        for e in &self.elements {
            by_r[e.r.min(top + 1)] += e.measure();
        }
        let mut out = vec![0.0; top + 1];
        let mut above = self.uncovered_mass;
        for n in (0..=top).rev() {
            above += by_r[n + 1];
            out[n] = above / self.leb_delta0;
        }
        out
    }

    pub fn gcd_r(&self) -> usize {
        fn g(a: usize, b: usize) -> usize {
            if b == 0 {
                a
            } else {
                g(b, a % b)
            }
        }
        self.elements.iter().fold(0, |acc, e| g(acc, e.r))
    }

    /// Tail consistency: {R > k} lies in Delta_{k - N0}.
    pub fn tail_consistent(&self) -> bool {
        let n0 = self.n0_setup;
        if self.elements.iter().any(|e| e.m == 0 || e.m > n0) {
            return false;
        }
        let tail = self.r_tail();
        self.steps.iter().all(|s| {
            let k = s.n + n0;
            k >= tail.len() || tail[k] * self.leb_delta0 <= s.delta_mass * (1.0 + 1e-12) + 1e-15
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.elements {
            s.push_str(&serde_json::to_string(e).expect("element serializes"));
            s.push('\n');
        }
        s
    }
}

fn half_ball(base: &BaseOrbit, n: usize, d: f64) -> f64 {
    d / base.gains[n]
}

/// Greedy cover of the hyperbolic points of `region` at time n by pre-balls V'_n.
///
/// Each new centre is placed half a ball to the right of the first uncovered
/// position, so consecutive balls abut; `samples` sets the sampling step used
/// to skip points without a hyperbolic time.
pub fn cover_hyperbolic_set(
    sys: &SystemDescriptor,
    chart: &Chart,
    region: &IntervalSet,
    bounds: [f64; 2],
    n: usize,
    delta1_prime: f64,
    sigma: f64,
    samples: usize,
) -> Result<Vec<CoverBall>> {
    let mut out = Vec::new();
    let step_floor = (bounds[1] - bounds[0]) / samples.max(1) as f64;
    for part in region.parts() {
        let mut u = part[0];
        while u <= part[1] {
            let bu = base_orbit(sys, chart, u, n)?;
            let h = half_ball(&bu, n, delta1_prime);
            let mut placed = None;
            let xr = (u + h).min(bounds[1]);
            let right = base_orbit(sys, chart, xr, n)?;
            for (x, b) in [(xr, right), (u, bu)] {
                if !is_hyperbolic_values(&b.logs, sigma, n) {
                    continue;
                }
                let dom = if b.affine {
                    let hh = half_ball(&b, n, delta1_prime);
                    [x - hh, x + hh]
                } else {
                    [b.pullback(sys, n, -delta1_prime)?, b.pullback(sys, n, delta1_prime)?]
                };
                if dom[0] <= u && u <= dom[1] {
                    placed = Some(CoverBall { t: x, domain_prime: dom });
                    break;
                }
            }
            match placed {
                Some(c) => {
                    out.push(c);
                    u = c.domain_prime[1].next_up();
                }
                None => u += (0.5 * h).min(step_floor).max(f64::EPSILON * u.abs().max(1.0)),
            }
        }
    }
    Ok(out)
}

struct Ctx<'a> {
    sys: &'a SystemDescriptor,
    chart: Chart,
    frame: CylFrame,
    delta0: f64,
    delta_s: f64,
    n0cap: usize,
    bounds: [f64; 2],
}

struct BallOut {
    cand: Option<Candidate>,
    pieces: Vec<Candidate>,
    collars: Vec<[f64; 2]>,
}

fn outward(a: f64, b: f64) -> [f64; 2] {
    [a.next_down(), b.next_up()]
}

/// All collar crossing pieces of f^{n+m}(V'_n(x)), m = 1..=N0, and the candidate.
fn ball_crossings(ctx: &Ctx, ball: &CoverBall, n: usize) -> Result<BallOut> {
    let sys = ctx.sys;
    let b = base_orbit(sys, &ctx.chart, ball.t, n + ctx.n0cap)?;
    let mut cand: Option<Candidate> = None;
    let mut collars = Vec::new();
    let mut pieces = Vec::new();
    for m in 1..=ctx.n0cap {
        let j = n + m;
        let (s_lo, s_hi) = if b.affine {
            let g = b.gains[j];
            (g * (ball.domain_prime[0] - ball.t), g * (ball.domain_prime[1] - ball.t))
        } else {
            (b.s_at(sys, ball.domain_prime[0], j)?.0, b.s_at(sys, ball.domain_prime[1], j)?.0)
        };
        let cr = ctx.frame.full_crossings(b.xs[j], b.es[j], s_lo, s_hi, 2.0 * ctx.delta0, ctx.delta_s);
        let mut best: Option<(f64, Candidate)> = None;
        for c in &cr {
            let pull = |s: f64| -> Result<f64> {
                if b.affine {
                    Ok(ball.t + s / b.gains[j])
                } else {
                    b.pullback(sys, j, s)
                }
            };
            let collar = outward(pull(c.s_center - c.s_half)?, pull(c.s_center + c.s_half)?);
            let core = outward(pull(c.s_center - 0.5 * c.s_half)?, pull(c.s_center + 0.5 * c.s_half)?);
            let cd = Candidate { x_t: 0.5 * (core[0] + core[1]), n, m, r: j, core, collar, translate: c.translate };
            collars.push(collar);
            pieces.push(cd);
            if cand.is_none() && best.as_ref().is_none_or(|(d, _)| c.s_center.abs() < *d) {
                best = Some((c.s_center.abs(), Candidate { x_t: ball.t, ..cd }));
            }
        }
        if cand.is_none() {
            cand = best.map(|(_, c)| c);
        }
    }
    Ok(BallOut { cand, pieces, collars })
}

/// One candidate per cover point (smallest crossing m); NoCrossing if some point never crosses.
pub fn candidates_at(
    sys: &SystemDescriptor,
    chart: &Chart,
    setup: &ReferenceSetup,
    cover: &[CoverBall],
    n: usize,
) -> Result<Vec<Candidate>> {
    let ctx = make_ctx(sys, chart, setup)?;
    cover
        .par_iter()
        .map(|b| {
            ball_crossings(&ctx, b, n)?
                .cand
                .ok_or_else(|| Error::NoCrossing { x: chart.point(b.t).coords().to_vec(), n0: setup.n0 })
        })
        .collect()
}

fn make_ctx<'a>(sys: &'a SystemDescriptor, chart: &Chart, setup: &ReferenceSetup) -> Result<Ctx<'a>> {
    let p = chart.point(setup.p_t);
    let e_s = if sys.dim == 2 { sys.splitting_at(p, sys.splitting_iters)?.e_s } else { [0.0, 1.0] };
    Ok(Ctx {
        sys,
        chart: *chart,
        frame: CylFrame::new(p, chart.dir, e_s),
        delta0: setup.delta0,
        delta_s: setup.delta_s,
        n0cap: setup.n0,
        bounds: [setup.p_t - setup.delta0, setup.p_t + setup.delta0],
    })
}

/// Cores ordered by left endpoint; protected intervals are pairwise disjoint.
struct Registry {
    elements: Vec<Element>,
    index: BTreeMap<u64, usize>,
    sigma: f64,
}

impl Registry {
    fn insert(&mut self, e: Element) {
        self.index.insert(ord_key(e.core[0]), self.elements.len());
        self.elements.push(e);
    }

    /// Elements whose core-plus-annulus at step k meets the open interval (a, b).
    fn protected_hits(&self, a: f64, b: f64, k: usize, out: &mut Vec<usize>) {
        for (_, &i) in self.index.range(..ord_key(b)).rev() {
            let pr = self.elements[i].protected(k, self.sigma);
            if pr[1] <= a {
                break;
            }
            if pr[0] < b {
                out.push(i);
            }
        }
        if let Some((_, &i)) = self.index.range(ord_key(b)..).next() {
            let pr = self.elements[i].protected(k, self.sigma);
            if pr[0] < b && pr[1] > a {
                out.push(i);
            }
        }
    }

    fn core_hits(&self, a: f64, b: f64, out: &mut Vec<usize>) {
        for (_, &i) in self.index.range(..ord_key(b)).rev() {
            let c = self.elements[i].core;
            if c[1] <= a {
                break;
            }
            out.push(i);
        }
    }
}

/// Run the inductive construction for n = n0..=N_max.
pub fn build(sys: &SystemDescriptor, disk: &ReferenceDisk, setup: &ReferenceSetup, params: &PartitionParams) -> Result<Partition> {
    if !(params.sigma > 0.0 && params.sigma < 1.0) || params.n0 == 0 {
        return Err(Error::Precondition("need 0 < sigma < 1 and n0 >= 1".into()));
    }
    let chart = Chart::from_disk(disk);
    let ctx = make_ctx(sys, &chart, setup)?;
    let sigma = params.sigma;
    let lo = ctx.bounds[0];
    let hi = ctx.bounds[1];
    let leb0 = hi - lo;
    let n_stall = params.n_stall.unwrap_or(3 * setup.n0);
    let mut reg = Registry { elements: Vec::new(), index: BTreeMap::new(), sigma };
    let mut delta = IntervalSet::single(lo, hi);
    let mut steps = Vec::new();
    let mut resolved_until = None;
    let mut c5_hat: f64 = 0.0;
    let mut c5_by_lag: Vec<f64> = Vec::new();
    let mut eta_hat: f64 = 0.0;
    let mut p_hat = 0usize;
    let mut core_sum = 0.0;
    let mut max_mass_error: f64 = 0.0;
    let mut idle = 0usize;
    let mut prev_ball: f64 = 0.0;
    let mut floor_hit = false;
    for n in params.n0..=params.n_max {
        let gain = base_orbit(sys, &chart, setup.p_t, n)?.gains[n];
        let ball_len = 2.0 * params.delta1_prime / gain;
        if floor_hit || ball_len < params.resolution || delta.is_empty() {
            floor_hit = floor_hit || ball_len < params.resolution;
            steps.push(StepRecord {
                n,
                resolved: false,
                delta_mass: delta.measure(),
                delta_parts: delta.len(),
                ball_length: ball_len,
                ..Default::default()
            });
            continue;
        }
        let region = if n == params.n0 { delta.clone() } else { delta.dilate_clip(prev_ball.max(ball_len), lo, hi) };
        let cover = cover_hyperbolic_set(sys, &chart, &region, ctx.bounds, n, params.delta1_prime, sigma, 1 << 16)?;
        prev_ball = cover.iter().map(|c| c.domain_prime[1] - c.domain_prime[0]).fold(0.0, f64::max);
        let outs: Vec<BallOut> = cover.par_iter().map(|b| ball_crossings(&ctx, b, n)).collect::<Result<_>>()?;
        let no_crossing = outs.iter().filter(|o| o.cand.is_none()).count();
        let mut cands: Vec<Candidate> = match params.candidate_rule {
            CandidateRule::SmallestM => outs.iter().filter_map(|o| o.cand).collect(),
            CandidateRule::AllPieces => outs.iter().flat_map(|o| o.pieces.iter().copied()).collect(),
        };
        // Measures are compared with the low 12 mantissa bits rounded off (relative 2^-40),
        // so equal-size pieces order by position.
        let key = |c: &Candidate| ((c.core[1] - c.core[0]).to_bits() + (1 << 11)) >> 12;
        cands.sort_by(|a, b| key(b).cmp(&key(a)).then(a.core[0].total_cmp(&b.core[0])));
        let mut accepted: Vec<[f64; 2]> = Vec::new();
        let mut acc_mass = 0.0;
        let mut hits = Vec::new();
        for c in &cands {
            if !delta.covers(c.collar[0], c.collar[1]) {
                continue;
            }
            hits.clear();
            reg.protected_hits(c.collar[0], c.collar[1], n, &mut hits);
            if !hits.is_empty() {
                continue;
            }
            let id = reg.elements.len();
            reg.insert(Element { id, n, m: c.m, r: c.r, core: c.core, collar: c.collar, x_t: c.x_t, translate: c.translate });
            accepted.push(c.core);
            acc_mass += c.core[1] - c.core[0];
        }
        accepted.sort_by(|a, b| a[0].total_cmp(&b[0]));
        delta = delta.subtract_sorted(&accepted);
        core_sum += acc_mass;
        let dm = delta.measure();
        max_mass_error = max_mass_error.max((dm + core_sum - leb0).abs());

        // Satellites of accepted elements and of the complement of Delta_0.
        let per_ball: Vec<(Vec<usize>, bool)> = outs
            .par_iter()
            .map(|o| {
                let mut h = Vec::new();
                let mut boundary = false;
                for c in &o.collars {
                    reg.protected_hits(c[0], c[1], n, &mut h);
                    boundary |= c[0] < lo || c[1] > hi;
                }
                h.sort_unstable();
                h.dedup();
                (h, boundary)
            })
            .collect();
        let mut sat: BTreeMap<usize, Vec<[f64; 2]>> = BTreeMap::new();
        let mut bnd = Vec::new();
        for (ball, (h, boundary)) in cover.iter().zip(&per_ball) {
            let v = [ball.domain_prime[0].max(lo), ball.domain_prime[1].min(hi)];
            for &i in h {
                sat.entry(i).or_default().push(v);
            }
            if *boundary {
                bnd.push(v);
            }
        }
        let bmass = IntervalSet::from_unsorted(bnd).measure();
        eta_hat = eta_hat.max(bmass / (sigma.powf(n as f64 / 2.0) * leb0));
        let mut sat_sets: Vec<(usize, IntervalSet)> = Vec::with_capacity(sat.len());
        let mut smass = 0.0;
        for (i, v) in sat {
            let e = reg.elements[i];
            let s = IntervalSet::from_unsorted(v).subtract_sorted(&[e.core]);
            let mass = s.measure();
            if mass > 0.0 {
                let lag = n - e.n;
                let ratio = mass / (sigma.powf(lag as f64 / 2.0) * e.measure());
                c5_hat = c5_hat.max(ratio);
                if c5_by_lag.len() <= lag {
                    c5_by_lag.resize(lag + 1, 0.0);
                }
                c5_by_lag[lag] = c5_by_lag[lag].max(ratio);
                smass += mass;
                sat_sets.push((i, s));
            }
        }
        // B-set intersections B_n(w) = S_n(w) u w for separation lags.
        let mut tagged: Vec<([f64; 2], usize)> = Vec::new();
        for (i, s) in &sat_sets {
            for part in s.parts() {
                tagged.push((*part, *i));
                hits.clear();
                reg.core_hits(part[0], part[1], &mut hits);
                for &j in &hits {
                    if j != *i {
                        let lag = n - reg.elements[*i].n.max(reg.elements[j].n);
                        p_hat = p_hat.max(lag + 1);
                    }
                }
            }
        }
        tagged.sort_by(|a, b| a.0[0].total_cmp(&b.0[0]));
        let mut active: Vec<([f64; 2], usize)> = Vec::new();
        for (iv, i) in tagged {
            active.retain(|(a, _)| a[1] > iv[0]);
            for (_, j) in &active {
                if *j != i {
                    let lag = n - reg.elements[i].n.max(reg.elements[*j].n);
                    p_hat = p_hat.max(lag + 1);
                }
            }
            active.push((iv, i));
        }
        if accepted.is_empty() {
            idle += 1;
            if idle >= n_stall {
                return Err(Error::Stall { steps: idle, last_step: n, remaining: dm });
            }
        } else {
            idle = 0;
        }
        resolved_until = Some(n);
        steps.push(StepRecord {
            n,
            resolved: true,
            cover: cover.len(),
            candidates: cands.len(),
            no_crossing,
            accepted: accepted.len(),
            accepted_mass: acc_mass,
            delta_mass: dm,
            delta_parts: delta.len(),
            satellite_mass: smass,
            boundary_satellite_mass: bmass,
            satellites_tracked: sat_sets.len(),
            ball_length: ball_len,
        });
    }
    let p_suff = p_sufficient(setup.delta0, params.delta1_prime, sigma, setup.n0);
    Ok(Partition {
        chart,
        p_t: setup.p_t,
        delta0: setup.delta0,
        n0_setup: setup.n0,
        delta_s: setup.delta_s,
        params: params.clone(),
        uncovered_mass: delta.measure(),
        elements: reg.elements,
        steps,
        leb_delta0: leb0,
        resolved_until,
        c5_hat,
        c5_by_lag,
        eta_hat,
        p_hat,
        p_suff,
        max_mass_error,
    })
}

/// Smallest P >= N0 with 4 delta1' sigma^{P/2} < delta0 sigma^{N0/2}.
pub fn p_sufficient(delta0: f64, delta1_prime: f64, sigma: f64, n0: usize) -> usize {
    let v = 2.0 * (delta0 * sigma.powf(n0 as f64 / 2.0) / (4.0 * delta1_prime)).ln() / sigma.ln();
    let mut p = v.ceil().max(0.0) as usize;
    // Strict inequality at an exact integer.
    while 4.0 * delta1_prime * sigma.powf(p as f64 / 2.0) >= delta0 * sigma.powf(n0 as f64 / 2.0) {
        p += 1;
    }
    p.max(n0)
}

/// Separation lag from the recorded build history, with the sufficient bound.
pub fn separation_estimate(part: &Partition) -> (usize, usize) {
    (part.p_hat, part.p_suff)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElementFailure {
    pub id: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovReport {
    pub checked: usize,
    pub failures: Vec<ElementFailure>,
    pub c_hat: f64,
    pub c_bound: f64,
    pub c_bar_hat: f64,
    pub c_bar_bound: f64,
    pub ell: f64,
    pub log_lipschitz: f64,
    pub pairs_elements: usize,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub zeta: f64,
    /// Elements receiving pair checks (evenly spaced by id).
    pub pair_elements: usize,
    pub pair_samples: usize,
    pub grid: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { zeta: 1.0, pair_elements: 64, pair_samples: 16, grid: 4096 }
    }
}

/// Sup of the inverse cu expansion and Holder constant of log cu expansion, by grid sampling.
pub fn cu_expansion_constants(sys: &SystemDescriptor, zeta: f64, grid: usize) -> Result<(f64, f64)> {
    let k = grid.max(16);
    let mut ell: f64 = 0.0;
    let mut lip: f64 = 0.0;
    if sys.dim == 1 {
        let h = 1.0 / k as f64;
        let mut prev = None;
        for i in 0..=k {
            let x = (i as f64 + 0.5) * h;
            let g = sys.jac([x, 0.0])?[0][0].abs();
            ell = ell.max(1.0 / g);
            if let Some(pg) = prev {
                lip = lip.max((g.ln() - f64::ln(pg)).abs() / h.powf(zeta));
            }
            prev = Some(g);
        }
        return Ok((ell, lip));
    }
    let side = (k as f64).sqrt().ceil() as usize;
    let h = 1e-4;
    for i in 0..side {
        for j in 0..side {
            let x = [(i as f64 + 0.5) / side as f64, (j as f64 + 0.5) / side as f64];
            let e = sys.cu_direction(Point::new2(x[0], x[1]))?;
            let g0 = norm(mat_vec(&sys.jac(x)?, e));
            let y: Vec2 = [x[0] + h * e[0], x[1] + h * e[1]];
            let g1 = norm(mat_vec(&sys.jac(y)?, e));
            ell = ell.max(1.0 / g0);
            lip = lip.max((g0.ln() - g1.ln()).abs() / h.powf(zeta));
        }
    }
    Ok((ell, lip))
}

/// Markov property (f^R(core) u-crosses and stays in the Delta0 cylinder) plus
/// backward-contraction and distortion checks on a built partition.
pub fn verify_markov(sys: &SystemDescriptor, part: &Partition, cyl0: &Cylinder, opts: &VerifyOptions) -> Result<MarkovReport> {
    verify_elements(sys, part, &part.elements, cyl0, opts)
}

pub fn verify_elements(
    sys: &SystemDescriptor,
    part: &Partition,
    elements: &[Element],
    cyl0: &Cylinder,
    opts: &VerifyOptions,
) -> Result<MarkovReport> {
    let res = part.params.resolution;
    let sigma = part.params.sigma;
    let delta0 = part.delta0;
    let chart = part.chart;
    let failures: Vec<ElementFailure> = elements
        .par_iter()
        .filter_map(|e| {
            let run = || -> Result<Option<String>> {
                let img = image_segment(sys, &chart, e.core[0], e.core[1], e.r, part.params.max_gap)?;
                let gain = base_orbit(sys, &chart, 0.5 * (e.core[0] + e.core[1]), e.r)?.gains[e.r];
                let tol = res.max(8.0 * gain * f64::EPSILON);
                let uc = crate::geometry::u_cross_test(&img, cyl0, res.max(tol));
                if !uc.pass {
                    return Ok(Some(format!("image gap {:.3e} in base coverage", uc.max_gap)));
                }
                // Containment: the image must sit over the base, not beyond it.
                let over = if sys.dim == 1 {
                    let m = crate::numeric::wrap_half(img.anchor.x() - cyl0.frame.p[0]);
                    (m.abs() + img.radius) - delta0
                } else {
                    img.samples
                        .iter()
                        .map(|q| {
                            let (tau, h) = cyl0.frame.coords(q.raw());
                            (tau.abs() - delta0).max(h.abs() - part.delta_s)
                        })
                        .fold(f64::NEG_INFINITY, f64::max)
                };
                if over > tol + cyl0.slack {
                    return Ok(Some(format!("image exceeds the base disk by {over:.3e}")));
                }
                Ok(None)
            };
            match run() {
                Ok(None) => None,
                Ok(Some(r)) => Some(ElementFailure { id: e.id, reason: r }),
                Err(err) => Some(ElementFailure { id: e.id, reason: err.code().to_string() }),
            }
        })
        .collect();
    let (ell, lip) = cu_expansion_constants(sys, opts.zeta, opts.grid)?;
    let c_bound = (ell / sigma.sqrt()).powi(part.n0_setup as i32).max(1.0);
    let stride = (elements.len() / opts.pair_elements.max(1)).max(1);
    let picked: Vec<&Element> = elements.iter().step_by(stride).take(opts.pair_elements).collect();
    let pair_vals: Vec<(f64, f64)> = picked
        .par_iter()
        .map(|e| {
            let mid = 0.5 * (e.core[0] + e.core[1]);
            let base = base_orbit(sys, &chart, mid, e.r)?;
            let k = opts.pair_samples.max(2);
            let mut c: f64 = 0.0;
            let mut cbar: f64 = 0.0;
            for i in 0..k {
                let a = e.core[0] + (e.core[1] - e.core[0]) * i as f64 / k as f64;
                let b = e.core[0] + (e.core[1] - e.core[0]) * (i + 1) as f64 / k as f64;
                for (y, z) in [(a, b), (a, e.core[1] - (a - e.core[0]))] {
                    if z <= y {
                        continue;
                    }
                    let tr = track_pair(sys, &base, y, z, e.r)?;
                    let dn = tr.dist[e.r];
                    for kk in 1..=e.r {
                        c = c.max(tr.dist[e.r - kk] / (sigma.powf(kk as f64 / 2.0) * dn));
                    }
                    cbar = cbar.max(tr.log_jac_diff.abs() / dn.powf(opts.zeta));
                }
            }
            Ok((c, cbar))
        })
        .collect::<Result<_>>()?;
    let c_hat = pair_vals.iter().map(|v| v.0).fold(0.0, f64::max);
    let c_bar_hat = pair_vals.iter().map(|v| v.1).fold(0.0, f64::max);
    let c_bar_bound = 1.2 * lip * c_hat.max(1.0).powf(opts.zeta) / (1.0 - sigma.powf(opts.zeta / 2.0));
    let mut failures = failures;
    failures.sort_by_key(|f| f.id);
    let pass = failures.is_empty() && c_hat <= c_bound * (1.0 + 1e-9) && c_bar_hat <= c_bar_bound + 1e-12;
    Ok(MarkovReport {
        checked: elements.len(),
        failures,
        c_hat,
        c_bound,
        c_bar_hat,
        c_bar_bound,
        ell,
        log_lipschitz: lip,
        pairs_elements: picked.len(),
        pass,
    })
}

/// Reference disk for the base of the cylinder over Delta_0.
pub fn delta0_disk(part: &Partition) -> ReferenceDisk {
    part.chart.segment(part.p_t - part.delta0, part.p_t + part.delta0, part.params.max_gap)
}

/// Minimal-image displacement helper shared with exports.
pub fn chart_displacement(part: &Partition, a: f64, b: f64) -> f64 {
    norm(torus_sub(part.chart.lifted(a), part.chart.lifted(b), part.chart.dim))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{find_reference_setup, SetupSearch};
    use crate::systems::CAT_MATRIX;

    fn doubling_setup(n0: usize) -> ReferenceSetup {
        ReferenceSetup { p: Point::new1(0.5), p_t: 0.0, delta0: 0.2, n0, delta_s: 0.0, tested: 0, m_hist: vec![] }
    }

    #[test]
    fn cover_bound_doubling() {
        let d = SystemDescriptor::doubling();
        let chart = Chart::from_disk(&ReferenceDisk::interval(0.5, 0.5));
        let region = IntervalSet::single(-0.2, 0.2);
        for n in [5, 9, 12] {
            let cov = cover_hyperbolic_set(&d, &chart, &region, [-0.2, 0.2], n, 0.01, 0.5, 1000).unwrap();
            let l = 0.02 / 2f64.powi(n as i32);
            assert!(cov.len() <= (0.4 / l).ceil() as usize + 1, "n={n}: {}", cov.len());
            // Brute-force check on a sample grid.
            for i in 0..=2000 {
                let x = -0.2 + 0.4 * i as f64 / 2000.0;
                assert!(cov.iter().any(|c| c.domain_prime[0] <= x && x <= c.domain_prime[1]));
            }
        }
        let empty = cover_hyperbolic_set(&d, &chart, &IntervalSet::new(), [-0.2, 0.2], 5, 0.01, 0.5, 10).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn doubling_candidate_is_exact_pullback() {
        let d = SystemDescriptor::doubling();
        let chart = Chart::from_disk(&ReferenceDisk::interval(0.5, 0.5));
        let s = doubling_setup(8);
        let ball = CoverBall { t: 0.013, domain_prime: [0.013 - 0.01 / 64.0, 0.013 + 0.01 / 64.0] };
        let c = candidates_at(&d, &chart, &s, &[ball], 6).unwrap()[0];
        let len = 0.4 * 2f64.powi(-(c.r as i32));
        assert!(((c.core[1] - c.core[0]) - len).abs() < 1e-15);
        assert!(c.collar[0] < c.core[0] && c.core[1] < c.collar[1]);
        assert_eq!(c.r, 6 + c.m);
        // f^R(core) = B(p, delta0) mod 1.
        let img = 2f64.powi(c.r as i32) * (0.5 + c.core[0]);
        assert!(((img - 0.3).rem_euclid(1.0)).min(1.0 - (img - 0.3).rem_euclid(1.0)) < 1e-6);
    }

    #[test]
    fn selection_rules() {
        let mut reg = Registry { elements: Vec::new(), index: BTreeMap::new(), sigma: 0.5 };
        reg.insert(Element { id: 0, n: 5, m: 1, r: 6, core: [0.0, 0.1], collar: [-0.05, 0.15], x_t: 0.05, translate: [0, 0] });
        let mut h = Vec::new();
        reg.protected_hits(0.14, 0.2, 5, &mut h);
        assert_eq!(h, vec![0]);
        h.clear();
        // Annulus shrinks by sigma^{1/2} per step.
        reg.protected_hits(0.14, 0.2, 7, &mut h);
        assert!(h.is_empty());
        reg.protected_hits(0.2, 0.3, 5, &mut h);
        assert!(h.is_empty());
    }

    #[test]
    fn p_suff_closed_form() {
        let p = p_sufficient(0.2, 0.01, 0.5, 7);
        let raw = (2.0 * (0.2 * 0.5f64.powf(3.5) / 0.04).ln() / 0.5f64.ln()).ceil() as usize;
        assert_eq!(p, raw.max(7));
        assert!(p_sufficient(0.2, 0.01, 0.5, 1) >= 1);
    }

    fn small_doubling_build() -> (SystemDescriptor, Partition) {
        let d = SystemDescriptor::doubling();
        let disk = ReferenceDisk::interval(0.5, 0.5);
        let params = PartitionParams { n_max: 12, resolution: 1e-8, ..Default::default() };
        let cfg = SetupSearch { delta1_prime: 0.01, delta_s: 0.0, sigma: 0.5, n_lo: 1, n_hi: 8, samples: 400, seed: 1 };
        let setup = find_reference_setup(&d, &disk, &[(0.0, 0.2)], 12, &cfg).unwrap();
        let part = build(&d, &disk, &setup, &params).unwrap();
        (d, part)
    }

    #[test]
    fn doubling_build_invariants() {
        let (d, part) = small_doubling_build();
        assert!(!part.elements.is_empty());
        // Disjoint cores.
        let mut cores: Vec<[f64; 2]> = part.elements.iter().map(|e| e.core).collect();
        cores.sort_by(|a, b| a[0].total_cmp(&b[0]));
        for w in cores.windows(2) {
            assert!(w[0][1] <= w[1][0].next_up().next_up());
        }
        // Mass conservation.
        let s: f64 = part.elements.iter().map(|e| e.measure()).sum();
        assert!((s + part.uncovered_mass - part.leb_delta0).abs() < 2.0 * part.params.resolution);
        // Monotone remaining mass.
        for w in part.steps.windows(2) {
            assert!(w[1].delta_mass <= w[0].delta_mass);
        }
        assert!(part.tail_consistent());
        assert!(part.p_hat <= part.p_suff);
        let cyl = Cylinder::new(&d, &delta0_disk(&part), 0.0, 0).unwrap();
        let rep = verify_markov(&d, &part, &cyl, &VerifyOptions::default()).unwrap();
        assert!(rep.pass, "{:?}", &rep.failures[..rep.failures.len().min(3)]);
        assert_eq!(rep.c_bar_hat, 0.0);
        // Negative control: a core widened 2x fails.
        let mut bad = part.elements[0];
        let w = bad.measure();
        bad.core = [bad.core[0] - 0.5 * w, bad.core[1] + 0.5 * w];
        let r = verify_elements(&d, &part, &[bad], &cyl, &VerifyOptions::default()).unwrap();
        assert_eq!(r.failures.len(), 1);
    }

    #[test]
    fn build_is_deterministic() {
        let (_, a) = small_doubling_build();
        let (_, b) = small_doubling_build();
        assert_eq!(a.to_jsonl(), b.to_jsonl());
    }

    #[test]
    fn empty_when_n_max_below_n0() {
        let d = SystemDescriptor::doubling();
        let disk = ReferenceDisk::interval(0.5, 0.5);
        let params = PartitionParams { n0: 5, n_max: 4, ..Default::default() };
        let part = build(&d, &disk, &doubling_setup(7), &params).unwrap();
        assert!(part.elements.is_empty());
        assert!((part.uncovered_mass - 0.4).abs() < 1e-15);
        assert_eq!(part.p_hat, 0);
    }

    #[test]
    fn cat_build_decreases() {
        let c = SystemDescriptor::cat_map(CAT_MATRIX).unwrap();
        let disk = ReferenceDisk::cu_segment(&c, Point::new2(0.5, 0.5), 0.3, 0.01).unwrap();
        let sigma = 0.5;
        let cfg = SetupSearch { delta1_prime: 0.01, delta_s: 0.1, sigma, n_lo: 1, n_hi: 5, samples: 200, seed: 5 };
        let setup = find_reference_setup(&c, &disk, &[(0.0, 0.1)], 12, &cfg).unwrap();
        let params = PartitionParams { n_max: 8, sigma, resolution: 1e-8, ..Default::default() };
        let part = build(&c, &disk, &setup, &params).unwrap();
        assert!(!part.elements.is_empty());
        for w in part.steps.windows(2) {
            assert!(w[1].delta_mass <= w[0].delta_mass);
        }
        let cyl = Cylinder::new(&c, &delta0_disk(&part), setup.delta_s, 4).unwrap();
        let rep = verify_markov(&c, &part, &cyl, &VerifyOptions { pair_elements: 8, ..Default::default() }).unwrap();
        assert!(rep.failures.is_empty(), "{:?}", &rep.failures[..rep.failures.len().min(3)]);
        assert!(rep.c_bar_hat < 1e-6);
    }
}
