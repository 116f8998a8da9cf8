//! Hyperbolic pre-balls, backward-contraction and distortion certificates,
//! stable leaves, cylinders and the u-crossing predicate.
//!
//! Everything on a disk is expressed in a chart: a straight line through an
//! anchor with arclength parameter t. Orbits of nearby chart points are
//! tracked as offsets from one base orbit, so pullbacks never subtract two
//! large lifted coordinates. Base orbits of affine maps are run in
//! double-double arithmetic; otherwise roundoff grows like the expansion.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hyperbolic::is_hyperbolic_values;
use crate::numeric::{add, dot, mat_vec, norm, normalize, scale, solve_increasing, sub, Vec2};
use crate::rng::{chunks, stream};
use crate::systems::{torus_sub, DiskKind, Point, ReferenceDisk, SystemDescriptor, SystemKind};

/// Cap on polyline samples for 2D disk images.
pub const MAX_POLYLINE: usize = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chart {
    pub anchor: Point,
    pub dir: Vec2,
    pub dim: usize,
}

impl Chart {
    pub fn from_disk(d: &ReferenceDisk) -> Self {
        Chart { anchor: d.anchor, dir: d.direction, dim: d.dim() }
    }

    /// Chart through `x` along the centre-unstable direction.
    pub fn at(sys: &SystemDescriptor, x: Point) -> Result<Self> {
        Ok(Chart { anchor: x, dir: normalize(sys.cu_direction(x)?), dim: sys.dim })
    }

    pub fn lifted(&self, t: f64) -> Vec2 {
        let a = self.anchor.raw();
        if self.dim == 1 {
            [a[0] + t, 0.0]
        } else {
            add(a, scale(self.dir, t))
        }
    }

    pub fn point(&self, t: f64) -> Point {
        Point::from_lift(self.lifted(t), self.dim)
    }

    /// Straight sub-disk [lo, hi] of this chart, sampled for 2D checks.
    pub fn segment(&self, lo: f64, hi: f64, max_gap: f64) -> ReferenceDisk {
        let mid = 0.5 * (lo + hi);
        let r = 0.5 * (hi - lo);
        if self.dim == 1 {
            return ReferenceDisk {
                kind: DiskKind::Interval,
                anchor: self.point(mid),
                direction: [1.0, 0.0],
                radius: r,
                samples: vec![self.point(lo), self.point(hi)],
                max_gap: hi - lo,
            };
        }
        let k = ((2.0 * r / max_gap).ceil() as usize).clamp(1, MAX_POLYLINE);
        ReferenceDisk {
            kind: DiskKind::Polyline,
            anchor: self.point(mid),
            direction: self.dir,
            radius: r,
            samples: (0..=k).map(|i| self.point(lo + (hi - lo) * i as f64 / k as f64)).collect(),
            max_gap,
        }
    }
}

// ---- double-double helpers for exact-ish affine base orbits ----

#[derive(Clone, Copy, Debug)]
struct Dd {
    hi: f64,
    lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

fn dd_reduce(h: f64, l: f64) -> Dd {
    let (mut h, mut l) = two_sum(h, l);
    h -= h.floor();
    (h, l) = two_sum(h, l);
    if h >= 1.0 {
        (h, l) = two_sum(h - 1.0, l);
    }
    if h < 0.0 {
        let (a, e) = two_sum(h, 1.0);
        (h, l) = two_sum(a, l + e);
    }
    Dd { hi: h, lo: l }
}

fn integer_matrix(sys: &SystemDescriptor) -> Option<[[i64; 2]; 2]> {
    match &sys.kind {
        SystemKind::Doubling => Some([[2, 0], [0, 1]]),
        SystemKind::CatMap { matrix } => Some(*matrix),
        SystemKind::PerturbedCat { matrix, eps, .. } if *eps == 0.0 => Some(*matrix),
        _ => None,
    }
}

fn dd_step(m: &[[i64; 2]; 2], x: [Dd; 2], dim: usize) -> [Dd; 2] {
    let mut out = [Dd { hi: 0.0, lo: 0.0 }; 2];
    for i in 0..dim {
        let (mut h, mut l) = (0.0, 0.0);
        for j in 0..dim {
            let c = m[i][j] as f64;
            let (p, e) = two_prod(c, x[j].hi);
            let (s, e2) = two_sum(h, p);
            h = s;
            l += e + e2 + c * x[j].lo;
        }
        out[i] = dd_reduce(h, l);
    }
    out
}

/// Orbit of the chart point t0 with unit disk tangents and cumulative gains.
#[derive(Clone, Debug)]
pub struct BaseOrbit {
    pub chart: Chart,
    pub t0: f64,
    /// Reduced base points x_0..x_len.
    pub xs: Vec<Vec2>,
    /// Unit tangent of the image disk at x_j.
    pub es: Vec<Vec2>,
    /// L_j = |D f^j (x_0) dir|.
    pub gains: Vec<f64>,
    /// Expansion log a_j = log ||Df(x_j)^{-1}|_{E^cu}|, j < len.
    pub logs: Vec<f64>,
    pub(crate) affine: bool,
}

pub fn base_orbit(sys: &SystemDescriptor, chart: &Chart, t0: f64, len: usize) -> Result<BaseOrbit> {
    let dim = chart.dim;
    let mut xs = Vec::with_capacity(len + 1);
    let mut es = Vec::with_capacity(len + 1);
    let mut gains = Vec::with_capacity(len + 1);
    let mut logs = Vec::with_capacity(len);
    let a = chart.anchor.raw();
    let mut e = if dim == 1 { [1.0, 0.0] } else { normalize(chart.dir) };
    let mut g = 1.0;
    let mat = integer_matrix(sys);
    let mut dd = [Dd { hi: 0.0, lo: 0.0 }; 2];
    let mut x = [0.0; 2];
    for i in 0..dim {
        let (p, pe) = two_prod(t0, e[i]);
        let (s, se) = two_sum(a[i], p);
        dd[i] = dd_reduce(s, pe + se);
        x[i] = dd[i].hi;
    }
    // Affine circle maps have a constant Jacobian.
    let flat = if dim == 1 && sys.is_affine() { Some(sys.jac(x)?) } else { None };
    let flat_log = flat.map(|m| -m[0][0].abs().ln());
    for j in 0..=len {
        xs.push(x);
        es.push(e);
        gains.push(g);
        if j == len {
            break;
        }
        let m = match flat {
            Some(m) => m,
            None => sys.jac(x)?,
        };
        if dim == 1 {
            logs.push(flat_log.unwrap_or_else(|| -m[0][0].abs().ln()));
            g *= m[0][0].abs();
        } else {
            logs.push(sys.cu_inverse_norm(Point::new2(x[0], x[1]))?.ln());
            let v = mat_vec(&m, e);
            let nv = norm(v);
            g *= nv;
            e = scale(v, 1.0 / nv);
        }
        match &mat {
            Some(mm) => {
                dd = dd_step(mm, dd, dim);
                x = [dd[0].hi, dd[1].hi];
            }
            None => {
                let p = Point::from_lift(sys.lift(x), dim);
                x = p.raw();
            }
        }
    }
    Ok(BaseOrbit { chart: *chart, t0, xs, es, gains, logs, affine: sys.is_affine() })
}

impl BaseOrbit {
    pub fn len(&self) -> usize {
        self.logs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logs.is_empty()
    }

    /// Offsets d_0..d_n of chart point t from the base orbit.
    pub fn offsets(&self, sys: &SystemDescriptor, t: f64, n: usize) -> Vec<Vec2> {
        let mut d = if self.chart.dim == 1 { [t - self.t0, 0.0] } else { scale(self.chart.dir, t - self.t0) };
        let mut out = Vec::with_capacity(n + 1);
        out.push(d);
        for j in 0..n {
            d = sys.delta(self.xs[j], d);
            out.push(d);
        }
        out
    }

    /// Signed arclength offset of f^n(t) from x_n along the image disk, with its t-derivative.
    pub fn s_at(&self, sys: &SystemDescriptor, t: f64, n: usize) -> Result<(f64, f64)> {
        let dt = t - self.t0;
        if self.affine {
            return Ok((self.gains[n] * dt, self.gains[n]));
        }
        let dim = self.chart.dim;
        let mut d = if dim == 1 { [dt, 0.0] } else { scale(self.chart.dir, dt) };
        let mut v = if dim == 1 { [1.0, 0.0] } else { self.chart.dir };
        for j in 0..n {
            let z = add(self.xs[j], d);
            let m = sys.jac(z)?;
            v = mat_vec(&m, v);
            d = sys.delta(self.xs[j], d);
        }
        Ok((dot(d, self.es[n]), dot(v, self.es[n])))
    }

    /// Chart parameter whose time-n image sits at signed offset `s`.
    pub fn pullback(&self, sys: &SystemDescriptor, n: usize, s: f64) -> Result<f64> {
        if self.affine || s == 0.0 {
            return Ok(self.t0 + s / self.gains[n]);
        }
        let guess = s / self.gains[n];
        let (mut lo, mut hi) = if s > 0.0 { (self.t0, self.t0 + 2.0 * guess) } else { (self.t0 + 2.0 * guess, self.t0) };
        for _ in 0..64 {
            let ok_hi = s <= 0.0 || self.s_at(sys, hi, n)?.0 >= s;
            let ok_lo = s >= 0.0 || self.s_at(sys, lo, n)?.0 <= s;
            if ok_hi && ok_lo {
                break;
            }
            let w = hi - lo;
            if !ok_hi {
                hi += w;
            }
            if !ok_lo {
                lo -= w;
            }
        }
        let tol = (hi - lo) * 1e-14;
        solve_increasing(
            |t| {
                let (v, dv) = self.s_at(sys, t, n)?;
                Ok((v - s, dv))
            },
            lo,
            hi,
            tol,
        )
    }
}

/// Pre-ball V_n(x) (domain) and V'_n(x) (domain_prime) in chart coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreBall {
    pub center: Point,
    pub n: usize,
    pub chart: Chart,
    pub center_t: f64,
    pub domain: [f64; 2],
    pub domain_prime: [f64; 2],
    pub delta1: f64,
    pub delta1_prime: f64,
    pub sigma: f64,
}

impl PreBall {
    pub fn length(&self) -> f64 {
        self.domain[1] - self.domain[0]
    }

    pub fn length_prime(&self) -> f64 {
        self.domain_prime[1] - self.domain_prime[0]
    }

    pub fn contains(&self, t: f64) -> bool {
        self.domain[0] <= t && t <= self.domain[1]
    }
}

/// Pre-ball at a hyperbolic time n of x, in a chart anchored at x.
pub fn preball(
    sys: &SystemDescriptor,
    x: Point,
    n: usize,
    delta1: f64,
    delta1_prime: f64,
    sigma: f64,
) -> Result<PreBall> {
    let chart = Chart::at(sys, x)?;
    let base = base_orbit(sys, &chart, 0.0, n)?;
    preball_on(sys, &base, n, delta1, delta1_prime, sigma)
}

/// Pre-ball built on an existing base orbit (the base point is the centre).
pub fn preball_on(
    sys: &SystemDescriptor,
    base: &BaseOrbit,
    n: usize,
    delta1: f64,
    delta1_prime: f64,
    sigma: f64,
) -> Result<PreBall> {
    if !(delta1 > 0.0 && delta1_prime > 0.0 && delta1_prime <= delta1 / 10.0 * (1.0 + 1e-12)) {
        return Err(Error::Precondition("pre-ball radii need 0 < delta1' <= delta1/10".into()));
    }
    if n > base.len() || !is_hyperbolic_values(&base.logs, sigma, n) {
        return Err(Error::NotHyperbolicTime { n });
    }
    let domain = [base.pullback(sys, n, -delta1)?, base.pullback(sys, n, delta1)?];
    let domain_prime = [base.pullback(sys, n, -delta1_prime)?, base.pullback(sys, n, delta1_prime)?];
    let pb = PreBall {
        center: base.chart.point(base.t0),
        n,
        chart: base.chart,
        center_t: base.t0,
        domain,
        domain_prime,
        delta1,
        delta1_prime,
        sigma,
    };
    // Nesting: diam V_n <= sigma^{n/2} diam B(f^n x, delta1).
    let bound = 2.0 * delta1 * sigma.powf(n as f64 / 2.0);
    if pb.length() > bound * (1.0 + 1e-9) {
        return Err(Error::ConstructionFailed(format!(
            "pre-ball at n={n} has length {:.3e} above the nesting bound {:.3e}",
            pb.length(),
            bound
        )));
    }
    Ok(pb)
}

/// Deterministic pairs in [lo, hi]: half adjacent grid pairs, half mirrored pairs.
fn sample_pairs(lo: f64, hi: f64, count: usize) -> Vec<(f64, f64)> {
    let k = (count / 2).max(1);
    let grid: Vec<f64> = (0..=k).map(|i| lo + (hi - lo) * i as f64 / k as f64).collect();
    let mut out: Vec<(f64, f64)> = grid.windows(2).map(|w| (w[0], w[1])).collect();
    let rest = count.saturating_sub(out.len());
    for i in 0..rest {
        let a = 0.5 * (i as f64 + 0.5) / rest as f64;
        out.push((lo + (hi - lo) * a, hi - (hi - lo) * a));
    }
    out
}

pub(crate) struct PairTrack {
    pub dist: Vec<f64>,
    pub log_jac_diff: f64,
}

pub(crate) fn track_pair(sys: &SystemDescriptor, base: &BaseOrbit, ty: f64, tz: f64, n: usize) -> Result<PairTrack> {
    let dim = base.chart.dim;
    let dy = base.offsets(sys, ty, n);
    let mut rel = if dim == 1 { [tz - ty, 0.0] } else { scale(base.chart.dir, tz - ty) };
    let mut vy = if dim == 1 { [1.0, 0.0] } else { base.chart.dir };
    let mut vz = vy;
    let mut dist = Vec::with_capacity(n + 1);
    let mut ljd = 0.0;
    for j in 0..=n {
        dist.push(norm(rel));
        if j == n {
            break;
        }
        let y = add(base.xs[j], dy[j]);
        let z = add(y, rel);
        let (my, mz) = (sys.jac(y)?, sys.jac(z)?);
        let (wy, wz) = (mat_vec(&my, vy), mat_vec(&mz, vz));
        let (ny, nz) = (norm(wy), norm(wz));
        ljd += ny.ln() - nz.ln();
        vy = scale(wy, 1.0 / ny);
        vz = scale(wz, 1.0 / nz);
        rel = sys.delta(y, rel);
    }
    Ok(PairTrack { dist, log_jac_diff: ljd })
}

/// Max over sampled pairs and 1 <= k <= n of dist_{n-k} / (sigma^{k/2} dist_n).
pub fn check_backward_contraction(sys: &SystemDescriptor, pb: &PreBall, pair_samples: usize) -> Result<f64> {
    let base = base_orbit(sys, &pb.chart, pb.center_t, pb.n)?;
    let pairs = sample_pairs(pb.domain[0], pb.domain[1], pair_samples);
    let ratios: Vec<f64> = pairs
        .par_iter()
        .map(|&(a, b)| {
            let tr = track_pair(sys, &base, a, b, pb.n)?;
            let dn = tr.dist[pb.n];
            let mut worst: f64 = 0.0;
            for k in 1..=pb.n {
                let r = tr.dist[pb.n - k] / (pb.sigma.powf(k as f64 / 2.0) * dn);
                worst = worst.max(r);
            }
            Ok(worst)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ratios.into_iter().fold(0.0, f64::max))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionCert {
    pub center: Point,
    pub n: usize,
    pub delta1: f64,
    pub c2_hat: f64,
    pub zeta: f64,
    pub pairs_checked: usize,
    pub max_violation: f64,
    /// Chart spacing of the adjacent pairs.
    pub resolution: f64,
}

/// Distortion estimate C2_hat = max |log J(y) - log J(z)| / dist(f^n y, f^n z)^zeta.
pub fn check_distortion(sys: &SystemDescriptor, pb: &PreBall, zeta: f64, pair_samples: usize) -> Result<DistortionCert> {
    if !(zeta > 0.0 && zeta <= 1.0) {
        return Err(Error::Precondition("zeta must lie in (0, 1]".into()));
    }
    let base = base_orbit(sys, &pb.chart, pb.center_t, pb.n)?;
    let pairs = sample_pairs(pb.domain[0], pb.domain[1], pair_samples);
    let vals: Vec<f64> = pairs
        .par_iter()
        .map(|&(a, b)| {
            let tr = track_pair(sys, &base, a, b, pb.n)?;
            let dn = tr.dist[pb.n];
            Ok(if dn > 0.0 { tr.log_jac_diff.abs() / dn.powf(zeta) } else { 0.0 })
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(DistortionCert {
        center: pb.center,
        n: pb.n,
        delta1: pb.delta1,
        c2_hat: vals.into_iter().fold(0.0, f64::max),
        zeta,
        pairs_checked: pairs.len(),
        max_violation: 0.0,
        resolution: pb.length() / (pair_samples / 2).max(1) as f64,
    })
}

/// Exported certificate record for one pre-ball.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub center: Point,
    pub n: usize,
    pub delta1: f64,
    pub delta1_prime: f64,
    pub max_ratio: f64,
    pub c2_hat: f64,
    pub resolution: f64,
    pub pass: bool,
}

pub fn certify(sys: &SystemDescriptor, pb: &PreBall, zeta: f64, pair_samples: usize) -> Result<Certificate> {
    let max_ratio = check_backward_contraction(sys, pb, pair_samples)?;
    let d = check_distortion(sys, pb, zeta, pair_samples)?;
    Ok(Certificate {
        center: pb.center,
        n: pb.n,
        delta1: pb.delta1,
        delta1_prime: pb.delta1_prime,
        max_ratio,
        c2_hat: d.c2_hat,
        resolution: d.resolution,
        pass: max_ratio <= 1.0 && d.c2_hat.is_finite(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StableLeaf {
    pub center: Point,
    /// Lifted polyline from one end to the other, passing through the centre.
    pub points: Vec<Vec2>,
    pub delta_s: f64,
    /// Max one-step ratio dist(f y, f x) / dist(y, x) over the samples.
    pub contraction: f64,
}

/// Local stable leaf of half-length delta_s through x, by midpoint integration of e_s.
pub fn stable_leaf(sys: &SystemDescriptor, x: Point, delta_s: f64, iters: usize) -> Result<StableLeaf> {
    if sys.dim != 2 {
        return Err(Error::Unsupported("stable leaves need a 2D system".into()));
    }
    let steps = 16;
    let h = delta_s / steps as f64;
    let field = |z: Vec2, prev: Vec2| -> Result<Vec2> {
        let e = sys.splitting_at(Point::new2(z[0], z[1]), iters)?.e_s;
        Ok(if dot(e, prev) < 0.0 { scale(e, -1.0) } else { e })
    };
    let x0 = x.raw();
    let e0 = sys.splitting_at(x, iters)?.e_s;
    let mut halves = Vec::new();
    for sign in [-1.0, 1.0] {
        let mut z = x0;
        let mut prev = scale(e0, sign);
        let mut pts = Vec::with_capacity(steps);
        for _ in 0..steps {
            let e1 = field(z, prev)?;
            let mid = add(z, scale(e1, 0.5 * h));
            let e2 = field(mid, e1)?;
            z = add(z, scale(e2, h));
            prev = e2;
            pts.push(z);
        }
        halves.push(pts);
    }
    let mut points: Vec<Vec2> = halves[0].iter().rev().copied().collect();
    points.push(x0);
    points.extend(halves[1].iter().copied());
    let fx = sys.lift(x0);
    let mut contraction: f64 = 0.0;
    for p in &points {
        let d = norm(sub(*p, x0));
        if d > 0.0 {
            contraction = contraction.max(norm(torus_sub(sys.lift(*p), fx, 2)) / d);
        }
    }
    if contraction >= 1.0 {
        return Err(Error::NonConvergent { at: x.coords().to_vec(), residual: contraction, tol: 1.0 });
    }
    Ok(StableLeaf { center: x, points, delta_s, contraction })
}

/// Affine u/s frame at the centre of a cylinder.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CylFrame {
    pub p: Vec2,
    pub e_u: Vec2,
    pub e_s: Vec2,
    pub dim: usize,
    du: Vec2,
    ds: Vec2,
}

/// One full crossing of a straight image segment with a cylinder.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    /// Image-disk offset whose point projects onto the cylinder centre.
    pub s_center: f64,
    /// Half-length (in image arclength) of the piece spanning the base radius.
    pub s_half: f64,
    /// |d tau / d s|.
    pub beta: f64,
    pub translate: [i64; 2],
}

impl CylFrame {
    pub fn new(p: Point, e_u: Vec2, e_s: Vec2) -> Self {
        let dim = p.dim();
        if dim == 1 {
            return CylFrame { p: p.raw(), e_u: [1.0, 0.0], e_s: [0.0, 1.0], dim, du: [1.0, 0.0], ds: [0.0, 1.0] };
        }
        let det = e_u[0] * e_s[1] - e_u[1] * e_s[0];
        let du = [e_s[1] / det, -e_s[0] / det];
        let ds = [-e_u[1] / det, e_u[0] / det];
        CylFrame { p: p.raw(), e_u, e_s, dim, du, ds }
    }

    /// Base coordinate tau and height h of a lifted point relative to p (minimal image).
    pub fn coords(&self, z: Vec2) -> (f64, f64) {
        let r = torus_sub(z, self.p, self.dim);
        (dot(self.du, r), dot(self.ds, r))
    }

    /// Pieces [s_c - s_half, s_c + s_half] of the segment x_j + s e_j, s in [s_lo, s_hi],
    /// that cross the cylinder of base radius `radius` and height `delta_s` completely.
    pub fn full_crossings(&self, xj: Vec2, ej: Vec2, s_lo: f64, s_hi: f64, radius: f64, delta_s: f64) -> Vec<Crossing> {
        let mut out = Vec::new();
        let beta = dot(self.du, ej);
        if beta.abs() < 1e-12 || s_hi <= s_lo {
            return out;
        }
        let gamma = dot(self.ds, ej);
        let s_half = radius / beta.abs();
        if self.dim == 1 {
            // s_c = p - x_j - k, with beta = 1.
            let a = self.p[0] - xj[0] - (s_hi - s_half);
            let b = self.p[0] - xj[0] - (s_lo + s_half);
            let (k0, k1) = (a.ceil() as i64, b.floor() as i64);
            for k in (k0..=k1).rev() {
                let sc = self.p[0] - xj[0] - k as f64;
                if sc - s_half >= s_lo && sc + s_half <= s_hi {
                    out.push(Crossing { s_center: sc, s_half, beta: 1.0, translate: [k, 0] });
                }
            }
            return out;
        }
        let reach = radius * norm(self.e_u) + delta_s * norm(self.e_s);
        let c_lo = add(xj, scale(ej, s_lo));
        let c_hi = add(xj, scale(ej, s_hi));
        let mut kr = [[0i64; 2]; 2];
        for i in 0..2 {
            let (mn, mx) = (c_lo[i].min(c_hi[i]), c_lo[i].max(c_hi[i]));
            kr[i] = [(self.p[i] - mx - reach).floor() as i64, (self.p[i] - mn + reach).ceil() as i64];
        }
        for k0 in kr[0][0]..=kr[0][1] {
            for k1 in kr[1][0]..=kr[1][1] {
                let r = sub(add(xj, [k0 as f64, k1 as f64]), self.p);
                let (tau0, h0) = (dot(self.du, r), dot(self.ds, r));
                let sc = -tau0 / beta;
                if sc - s_half < s_lo || sc + s_half > s_hi {
                    continue;
                }
                let (ha, hb) = (h0 + gamma * (sc - s_half), h0 + gamma * (sc + s_half));
                if ha.abs() <= delta_s && hb.abs() <= delta_s {
                    out.push(Crossing { s_center: sc, s_half, beta: beta.abs(), translate: [k0, k1] });
                }
            }
        }
        out.sort_by(|a, b| a.s_center.total_cmp(&b.s_center));
        out
    }
}

/// Union of local stable leaves over a base disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cylinder {
    pub base: ReferenceDisk,
    pub delta_s: f64,
    pub leaves: Vec<StableLeaf>,
    pub frame: CylFrame,
    /// Coverage slack 2 delta_s tan(max cone angle).
    pub slack: f64,
}

impl Cylinder {
    pub fn new(sys: &SystemDescriptor, base: &ReferenceDisk, delta_s: f64, leaf_samples: usize) -> Result<Self> {
        if sys.dim == 1 {
            return Ok(Cylinder {
                base: base.clone(),
                delta_s: 0.0,
                leaves: Vec::new(),
                frame: CylFrame::new(base.anchor, [1.0, 0.0], [0.0, 1.0]),
                slack: 0.0,
            });
        }
        if base.radius + delta_s >= 0.45 {
            return Err(Error::Precondition("cylinder must fit well inside half the torus".into()));
        }
        let e_s = sys.splitting_at(base.anchor, sys.splitting_iters)?.e_s;
        let frame = CylFrame::new(base.anchor, base.direction, e_s);
        let k = leaf_samples.max(1);
        let leaves = (0..=k)
            .map(|i| stable_leaf(sys, base.point_at(-base.radius + 2.0 * base.radius * i as f64 / k as f64), delta_s, sys.splitting_iters))
            .collect::<Result<Vec<_>>>()?;
        let slack = 2.0 * delta_s * sys.cone_width.unwrap_or(0.0);
        Ok(Cylinder { base: base.clone(), delta_s, leaves, frame, slack })
    }

    /// Projection onto the base parameter, if the point lies in the cylinder.
    pub fn project(&self, z: Vec2) -> Option<f64> {
        let (tau, h) = self.frame.coords(z);
        (h.abs() <= self.delta_s + 1e-15 && tau.abs() <= self.base.radius + self.slack).then_some(tau)
    }

    pub fn project_point(&self, z: Vec2) -> Option<Point> {
        self.project(z).map(|t| self.base.point_at(t))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UCross {
    pub pass: bool,
    /// Covered sub-intervals of the base parameter range.
    pub covered: Vec<[f64; 2]>,
    pub max_gap: f64,
    pub slack: f64,
}

/// Whether the projection of disk_image into the cylinder covers the base up to `resolution`.
pub fn u_cross_test(disk_image: &ReferenceDisk, cyl: &Cylinder, resolution: f64) -> UCross {
    let rho = cyl.base.radius;
    let mut pieces: Vec<[f64; 2]> = Vec::new();
    if disk_image.dim() == 1 && disk_image.kind == DiskKind::Interval {
        let r = disk_image.radius;
        if 2.0 * r >= 1.0 {
            pieces.push([-rho, rho]);
        } else {
            let m = crate::numeric::wrap_half(disk_image.anchor.x() - cyl.frame.p[0]);
            for k in [-1.0, 0.0, 1.0] {
                pieces.push([m + k - r, m + k + r]);
            }
        }
    } else {
        let pts = &disk_image.samples;
        let p = cyl.frame.p;
        for w in pts.windows(2) {
            let a = add(p, torus_sub(w[0].raw(), p, cyl.frame.dim));
            let b = add(a, torus_sub(w[1].raw(), w[0].raw(), cyl.frame.dim));
            let (ta, ha) = cyl.frame.coords(a);
            let (tb, hb) = cyl.frame.coords(b);
            // Parameter range where |h| <= delta_s along the segment.
            let (mut l0, mut l1) = (0.0f64, 1.0f64);
            let dh = hb - ha;
            if dh.abs() < 1e-300 {
                if ha.abs() > cyl.delta_s {
                    continue;
                }
            } else {
                let u = (-cyl.delta_s - ha) / dh;
                let v = (cyl.delta_s - ha) / dh;
                l0 = l0.max(u.min(v));
                l1 = l1.min(u.max(v));
                if l1 < l0 {
                    continue;
                }
            }
            let (t0, t1) = (ta + (tb - ta) * l0, ta + (tb - ta) * l1);
            pieces.push([t0.min(t1), t0.max(t1)]);
        }
    }
    let target = [-rho + cyl.slack, rho - cyl.slack];
    let mut clipped: Vec<[f64; 2]> = pieces
        .into_iter()
        .filter_map(|q| {
            let (lo, hi) = (q[0].max(-rho), q[1].min(rho));
            (hi > lo).then_some([lo, hi])
        })
        .collect();
    clipped.sort_by(|a, b| a[0].total_cmp(&b[0]));
    let mut covered: Vec<[f64; 2]> = Vec::new();
    for q in clipped {
        match covered.last_mut() {
            Some(last) if q[0] <= last[1] => last[1] = last[1].max(q[1]),
            _ => covered.push(q),
        }
    }
    let mut max_gap: f64 = 0.0;
    let mut cur = target[0];
    for q in &covered {
        if q[1] <= cur {
            continue;
        }
        if q[0] > cur {
            max_gap = max_gap.max(q[0].min(target[1]) - cur);
        }
        cur = cur.max(q[1]);
        if cur >= target[1] {
            break;
        }
    }
    if cur < target[1] {
        max_gap = max_gap.max(target[1] - cur);
    }
    UCross { pass: max_gap < resolution, covered, max_gap, slack: cyl.slack }
}

/// Image of the chart segment [lo, hi] under f^n, as an interval (1D) or refined polyline (2D).
pub fn image_segment(sys: &SystemDescriptor, chart: &Chart, lo: f64, hi: f64, n: usize, max_gap: f64) -> Result<ReferenceDisk> {
    let mid = 0.5 * (lo + hi);
    let base = base_orbit(sys, chart, mid, n)?;
    if chart.dim == 1 {
        let (a, _) = base.s_at(sys, lo, n)?;
        let (b, _) = base.s_at(sys, hi, n)?;
        let c = base.xs[n][0] + 0.5 * (a + b);
        let r = 0.5 * (b - a);
        return Ok(ReferenceDisk {
            kind: DiskKind::Interval,
            anchor: Point::new1(c),
            direction: [1.0, 0.0],
            radius: r,
            samples: vec![Point::new1(c - r), Point::new1(c + r)],
            max_gap: 2.0 * r,
        });
    }
    if !(max_gap > 0.0) {
        return Err(Error::Precondition("max_gap must be positive".into()));
    }
    let mut k = 16usize;
    loop {
        let ts: Vec<f64> = (0..=k).map(|i| lo + (hi - lo) * i as f64 / k as f64).collect();
        let pts: Vec<Vec2> = ts
            .par_iter()
            .map(|&t| add(base.xs[n], *base.offsets(sys, t, n).last().unwrap()))
            .collect();
        let gap = pts.windows(2).map(|w| norm(sub(w[1], w[0]))).fold(0.0, f64::max);
        if gap <= max_gap {
            let (a, _) = base.s_at(sys, lo, n)?;
            let (b, _) = base.s_at(sys, hi, n)?;
            return Ok(ReferenceDisk {
                kind: DiskKind::Polyline,
                anchor: Point::new2(base.xs[n][0], base.xs[n][1]),
                direction: base.es[n],
                radius: 0.5 * (b - a),
                samples: pts.iter().map(|z| Point::new2(z[0], z[1])).collect(),
                max_gap,
            });
        }
        if k >= MAX_POLYLINE {
            return Err(Error::ResolutionExceeded(format!(
                "image polyline gap {gap:.3e} above {max_gap:.3e} with {k} samples"
            )));
        }
        let need = (k as f64 * gap / max_gap * 1.1).ceil() as usize;
        k = need.clamp(2 * k, MAX_POLYLINE);
    }
}

pub fn image_disk(sys: &SystemDescriptor, disk: &ReferenceDisk, n: usize, max_gap: f64) -> Result<ReferenceDisk> {
    image_segment(sys, &Chart::from_disk(disk), -disk.radius, disk.radius, n, max_gap)
}

/// Parameters for the reference-setup search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetupSearch {
    pub delta1_prime: f64,
    pub delta_s: f64,
    pub sigma: f64,
    /// Hyperbolic times are searched in [n_lo, n_hi].
    pub n_lo: usize,
    pub n_hi: usize,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSetup {
    pub p: Point,
    pub p_t: f64,
    pub delta0: f64,
    pub n0: usize,
    pub delta_s: f64,
    pub tested: usize,
    /// Histogram of the minimal crossing time over tested balls (index m).
    pub m_hist: Vec<usize>,
}

/// Centre and time of one tested hyperbolic ball.
#[derive(Clone, Copy, Debug)]
struct TestBall {
    x: Vec2,
    e: Vec2,
}

/// Smallest m in 1..=m_cap at which f^m of the cu-ball B(x, r) crosses the collar cylinder.
fn first_crossing(sys: &SystemDescriptor, ball: &TestBall, r: f64, frame: &CylFrame, radius: f64, delta_s: f64, m_cap: usize) -> Result<Option<usize>> {
    let dim = sys.dim;
    let chart = Chart { anchor: Point::from_lift(ball.x, dim), dir: ball.e, dim };
    let base = base_orbit(sys, &chart, 0.0, m_cap)?;
    for m in 1..=m_cap {
        let (lo, hi) = if base.affine {
            (-r * base.gains[m], r * base.gains[m])
        } else {
            (base.s_at(sys, -r, m)?.0, base.s_at(sys, r, m)?.0)
        };
        if !frame.full_crossings(base.xs[m], base.es[m], lo, hi, radius, delta_s).is_empty() {
            return Ok(Some(m));
        }
    }
    Ok(None)
}

/// Search the (p_t, delta0) grid for a reference setup where every tested
/// hyperbolic ball crosses the collar cylinder of radius 2 delta0 within m_cap steps.
pub fn find_reference_setup(
    sys: &SystemDescriptor,
    disk: &ReferenceDisk,
    grid: &[(f64, f64)],
    m_cap: usize,
    cfg: &SetupSearch,
) -> Result<ReferenceSetup> {
    if grid.is_empty() || cfg.samples == 0 || cfg.n_hi < cfg.n_lo.max(1) {
        return Err(Error::Precondition("setup search needs a grid, samples and n_lo <= n_hi".into()));
    }
    let chart = Chart::from_disk(disk);
    let mut balls: Vec<TestBall> = Vec::new();
    let mut no_time = 0usize;
    for (ci, (a, b)) in chunks(cfg.samples).into_iter().enumerate() {
        let mut rng = stream(cfg.seed, "setup", ci as u64);
        for _ in a..b {
            let t = rng.gen_range(-disk.radius..disk.radius);
            let base = base_orbit(sys, &chart, t, cfg.n_hi)?;
            match (cfg.n_lo.max(1)..=cfg.n_hi).find(|&n| is_hyperbolic_values(&base.logs, cfg.sigma, n)) {
                Some(n) => balls.push(TestBall { x: base.xs[n], e: base.es[n] }),
                None => no_time += 1,
            }
        }
    }
    if balls.is_empty() {
        return Err(Error::SearchFailed(format!("no sampled point has a hyperbolic time in [{}, {}]", cfg.n_lo, cfg.n_hi)));
    }
    let mut diagnostics = Vec::new();
    for &(p_t, delta0) in grid {
        if sys.dim == 2 && p_t.abs() + 2.0 * delta0 > disk.radius {
            diagnostics.push(format!("(p={p_t}, delta0={delta0}): collar leaves the disk"));
            continue;
        }
        let p = chart.point(p_t);
        let e_s = if sys.dim == 2 { sys.splitting_at(p, sys.splitting_iters)?.e_s } else { [0.0, 1.0] };
        let frame = CylFrame::new(p, chart.dir, e_s);
        let ms: Vec<Option<usize>> = balls
            .par_iter()
            .map(|b| first_crossing(sys, b, cfg.delta1_prime, &frame, 2.0 * delta0, cfg.delta_s, m_cap))
            .collect::<Result<Vec<_>>>()?;
        match ms.iter().position(|m| m.is_none()) {
            Some(i) => diagnostics.push(format!(
                "(p={p_t}, delta0={delta0}): ball at {:?} never crossed within {m_cap}",
                &balls[i].x[..sys.dim]
            )),
            None => {
                let mut hist = vec![0usize; m_cap + 1];
                for m in ms.iter().flatten() {
                    hist[*m] += 1;
                }
                let n0 = ms.iter().flatten().copied().max().unwrap_or(1);
                return Ok(ReferenceSetup { p, p_t, delta0, n0, delta_s: cfg.delta_s, tested: balls.len(), m_hist: hist });
            }
        }
    }
    Err(Error::SearchFailed(format!(
        "{} balls tested ({no_time} samples without a hyperbolic time); {}",
        balls.len(),
        diagnostics.join("; ")
    )))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductCheck {
    /// Aggregated |log-increment| at each index i of the truncated product.
    pub increments: Vec<f64>,
    /// Geometric factor from aggregated tail sums.
    pub beta_hat: f64,
    pub pass: bool,
}

/// Truncated products of centre-unstable Jacobian ratios along stable pairs.
///
/// Each pair (x_N, y_N) with y_N on the local stable direction is pulled back
/// N steps, so both backward orbits are stable computations and y_i stays on
/// the stable leaf of x_i.
pub fn truncated_product_check(sys: &SystemDescriptor, ends: &[Point], offset: f64, n_terms: usize) -> Result<ProductCheck> {
    if sys.dim != 2 || n_terms < 4 {
        return Err(Error::Precondition("product check needs a 2D system and n_terms >= 4".into()));
    }
    let lin = *sys.linear_part().ok_or_else(|| Error::Unsupported("no linear part".into()))?;
    let per: Vec<Vec<f64>> = ends
        .par_iter()
        .map(|&xn| {
            let es = sys.splitting_at(xn, sys.splitting_iters)?.e_s;
            let mut x = xn;
            let mut y = Point::new2(xn.raw()[0] + offset * es[0], xn.raw()[1] + offset * es[1]);
            let mut xs = vec![x];
            let mut ys = vec![y];
            for _ in 0..n_terms {
                x = sys.inverse_step(x)?;
                y = sys.inverse_step(y)?;
                xs.push(x);
                ys.push(y);
            }
            xs.reverse();
            ys.reverse();
            let ju = |z: Point| (lin.lambda_u * sys.shear_factor(z.raw())).abs().ln();
            Ok((0..n_terms).map(|i| (ju(xs[i]) - ju(ys[i])).abs()).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut inc = vec![0.0; n_terms];
    for v in &per {
        for (a, b) in inc.iter_mut().zip(v) {
            *a += b;
        }
    }
    let mut tail = vec![0.0; n_terms + 1];
    for i in (0..n_terms).rev() {
        tail[i] = tail[i + 1] + inc[i];
    }
    let h = n_terms / 2;
    let beta_hat = if tail[0] == 0.0 { 0.0 } else { (tail[h] / tail[0]).powf(1.0 / h as f64) };
    Ok(ProductCheck { increments: inc, beta_hat, pass: beta_hat < 1.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{make_perturbed_anosov, CAT_MATRIX};

    fn cat() -> SystemDescriptor {
        SystemDescriptor::cat_map(CAT_MATRIX).unwrap()
    }

    fn lam() -> f64 {
        (3.0 + 5f64.sqrt()) / 2.0
    }

    #[test]
    fn doubling_preball_is_exact() {
        let d = SystemDescriptor::doubling();
        let x = Point::new1(0.3);
        let pb = preball(&d, x, 4, 0.1, 0.01, 0.5).unwrap();
        assert!((pb.length() - 0.0125).abs() < 1e-15);
        assert!((pb.domain[0] + 0.1 / 16.0).abs() < 1e-15 && (pb.domain[1] - 0.1 / 16.0).abs() < 1e-15);
        assert!(pb.domain[0] < pb.domain_prime[0] && pb.domain_prime[1] < pb.domain[1]);
        // Image endpoints land at f^4(x) -/+ 0.1.
        let img = image_segment(&d, &pb.chart, pb.domain[0], pb.domain[1], 4, 1.0).unwrap();
        let f4 = (0.3 * 16.0f64).fract();
        assert!((img.anchor.x() - f4).abs() < 1e-12 && (img.radius - 0.1).abs() < 1e-12);
    }

    #[test]
    fn cat_preball_length() {
        let c = cat();
        for n in [3, 8, 15] {
            let pb = preball(&c, Point::new2(0.21, 0.77), n, 0.1, 0.01, (-0.25f64).exp()).unwrap();
            assert!((pb.length() - 0.2 * lam().powi(-(n as i32))).abs() < 1e-9 * 0.2 * lam().powi(-(n as i32)).max(1e-300) + 1e-15);
        }
    }

    #[test]
    fn not_hyperbolic_time_rejected() {
        let pm = SystemDescriptor::pomeau_manneville(0.5).unwrap();
        // Near the neutral fixed point the first iterates barely expand.
        assert!(matches!(preball(&pm, Point::new1(1e-4), 1, 0.1, 0.01, 0.5), Err(Error::NotHyperbolicTime { n: 1 })));
    }

    #[test]
    fn nonlinear_pullback_matches_bisection() {
        let s = SystemDescriptor::smooth_expanding(0.5).unwrap();
        let x = Point::new1(0.123);
        let pb = preball(&s, x, 6, 0.05, 0.005, 0.8).unwrap();
        // Independent oracle: bisection on the lifted map.
        let f6 = |t: f64| {
            let mut z = [0.123 + t, 0.0];
            for _ in 0..6 {
                z = s.lift(z);
            }
            z[0]
        };
        let c = f6(0.0);
        let (mut lo, mut hi) = (0.0, 0.05);
        for _ in 0..200 {
            let m = 0.5 * (lo + hi);
            if f6(m) - c < 0.05 {
                lo = m
            } else {
                hi = m
            }
        }
        assert!((pb.domain[1] - lo).abs() < 1e-12);
    }

    #[test]
    fn preball_containment_across_times() {
        let s = SystemDescriptor::smooth_expanding(0.3).unwrap();
        let x = Point::new1(0.61);
        let a = preball(&s, x, 5, 0.05, 0.005, 0.8).unwrap();
        let b = preball(&s, x, 9, 0.05, 0.005, 0.8).unwrap();
        assert!(a.domain[0] <= b.domain[0] && b.domain[1] <= a.domain[1]);
    }

    #[test]
    fn contraction_worked_examples() {
        let d = SystemDescriptor::doubling();
        let pb = preball(&d, Point::new1(0.4), 8, 0.1, 0.01, 0.5).unwrap();
        let r = check_backward_contraction(&d, &pb, 40).unwrap();
        assert!((r - 0.5f64.sqrt()).abs() < 1e-9);
        let c = cat();
        let sigma = (-0.25f64).exp();
        let pb = preball(&c, Point::new2(0.3, 0.1), 6, 0.1, 0.01, sigma).unwrap();
        let r = check_backward_contraction(&c, &pb, 40).unwrap();
        let oracle = (1..=6).map(|k| lam().powi(-k) / sigma.powf(k as f64 / 2.0)).fold(0.0, f64::max);
        assert!((r - oracle).abs() < 1e-8 && r < 1.0);
    }

    #[test]
    fn distortion_examples() {
        let d = SystemDescriptor::doubling();
        let pb = preball(&d, Point::new1(0.4), 8, 0.1, 0.01, 0.5).unwrap();
        assert_eq!(check_distortion(&d, &pb, 1.0, 40).unwrap().c2_hat, 0.0);
        let c = cat();
        let pb = preball(&c, Point::new2(0.3, 0.1), 6, 0.1, 0.01, 0.8).unwrap();
        assert!(check_distortion(&c, &pb, 1.0, 40).unwrap().c2_hat < 1e-9);
        let s = SystemDescriptor::smooth_expanding(0.5).unwrap();
        let pb = preball(&s, Point::new1(0.2), 6, 0.05, 0.005, 0.8).unwrap();
        let a = check_distortion(&s, &pb, 1.0, 200).unwrap().c2_hat;
        let b = check_distortion(&s, &pb, 1.0, 400).unwrap().c2_hat;
        assert!(a > 0.0 && ((a - b) / b).abs() < 0.1);
    }

    #[test]
    fn cat_stable_leaf() {
        let c = cat();
        let lin = *c.linear_part().unwrap();
        let leaf = stable_leaf(&c, Point::new2(0.4, 0.4), 0.05, 30).unwrap();
        for p in &leaf.points {
            let d = sub(*p, [0.4, 0.4]);
            let cross = d[0] * lin.s[1] - d[1] * lin.s[0];
            assert!(cross.abs() < 1e-12);
        }
        assert!((leaf.points[0][0] - 0.4).hypot(leaf.points[0][1] - 0.4) - 0.05 < 1e-12);
        assert!(leaf.contraction <= 1.0 / lam() + 1e-9);
    }

    #[test]
    fn perturbed_leaf_far_from_bump() {
        let p = make_perturbed_anosov(0.3, Point::new2(0.5, 0.5), 0.05).unwrap();
        let c = cat();
        // Forward orbit of (0.1, 0.2) stays away from the bump for the first iterates.
        let x = Point::new2(0.1, 0.2);
        let a = stable_leaf(&p, x, 0.02, 30).unwrap();
        let b = stable_leaf(&c, x, 0.02, 30).unwrap();
        for (u, v) in a.points.iter().zip(&b.points) {
            assert!(norm(sub(*u, *v)) < 1e-6);
        }
    }

    #[test]
    fn full_crossings_1d_oracle() {
        let f = CylFrame::new(Point::new1(0.5), [1.0, 0.0], [0.0, 1.0]);
        // Segment from 0.2 to 2.9 covers [0.3,0.7] at k = 0, -1, -2.
        let cr = f.full_crossings([0.2, 0.0], [1.0, 0.0], 0.0, 2.7, 0.2, 0.0);
        let ks: Vec<i64> = cr.iter().map(|c| c.translate[0]).collect();
        assert_eq!(ks, vec![0, -1, -2]);
        assert!((cr[0].s_center - 0.3).abs() < 1e-15);
    }

    #[test]
    fn u_cross_1d() {
        let d = SystemDescriptor::doubling();
        let base = ReferenceDisk::interval(0.5, 0.2);
        let cyl = Cylinder::new(&d, &base, 0.0, 0).unwrap();
        assert!(u_cross_test(&ReferenceDisk::interval(0.45, 0.3), &cyl, 1e-9).pass);
        let short = u_cross_test(&ReferenceDisk::interval(0.49, 0.2), &cyl, 1e-3);
        assert!(!short.pass && (short.max_gap - 0.01).abs() < 1e-12);
        // Wrapped image.
        assert!(u_cross_test(&ReferenceDisk::interval(0.95, 0.7), &cyl, 1e-9).pass);
    }

    #[test]
    fn u_cross_cat_growth() {
        let c = cat();
        let base = ReferenceDisk::cu_segment(&c, Point::new2(0.5, 0.5), 0.2, 0.01).unwrap();
        let cyl = Cylinder::new(&c, &base, 0.05, 4).unwrap();
        let small = ReferenceDisk::cu_segment(&c, Point::new2(0.13, 0.71), 0.01, 0.001).unwrap();
        assert!(!u_cross_test(&small, &cyl, 1e-6).pass);
        let img = image_disk(&c, &small, 8, 0.01).unwrap();
        assert!((img.radius - 0.01 * lam().powi(8)).abs() < 1e-9);
        assert!(u_cross_test(&img, &cyl, 1e-6).pass);
    }

    #[test]
    fn projection_idempotent() {
        let c = cat();
        let base = ReferenceDisk::cu_segment(&c, Point::new2(0.5, 0.5), 0.2, 0.01).unwrap();
        let cyl = Cylinder::new(&c, &base, 0.05, 4).unwrap();
        for z in [[0.52, 0.49], [0.45, 0.55], [0.6, 0.52]] {
            if let Some(p) = cyl.project_point(z) {
                let q = cyl.project_point(p.raw()).unwrap();
                assert!(norm(torus_sub(p.raw(), q.raw(), 2)) < 1e-12);
            }
        }
    }

    fn doubling_oracle_m(c: f64, r: f64, p: f64, rad: f64, cap: usize) -> Option<usize> {
        (1..=cap).find(|&m| {
            let s = 2f64.powi(m as i32);
            let (lo, hi) = (s * (c - r), s * (c + r));
            let k = (lo - p + rad).ceil();
            p + rad + k <= hi
        })
    }

    #[test]
    fn doubling_setup_matches_interval_oracle() {
        let d = SystemDescriptor::doubling();
        let disk = ReferenceDisk::interval(0.5, 0.5);
        let cfg = SetupSearch { delta1_prime: 0.05, delta_s: 0.0, sigma: 0.5, n_lo: 1, n_hi: 10, samples: 300, seed: 9 };
        let s = find_reference_setup(&d, &disk, &[(0.0, 0.1)], 8, &cfg).unwrap();
        assert!(s.n0 <= 5);
        // Oracle on the same sample of balls.
        let mut worst = 0;
        let mut rng = stream(9, "setup", 0);
        for _ in 0..300 {
            let t: f64 = rng.gen_range(-0.5..0.5);
            let x = (0.5 + t).rem_euclid(1.0);
            let c = (x * 2.0).rem_euclid(1.0);
            worst = worst.max(doubling_oracle_m(c, 0.05, 0.5, 0.2, 8).unwrap());
        }
        assert_eq!(s.n0, worst);
        assert!(find_reference_setup(&d, &disk, &[(0.0, 0.1)], 1, &cfg).is_err());
    }

    #[test]
    fn cat_setup_respects_length_bound() {
        let c = cat();
        let disk = ReferenceDisk::cu_segment(&c, Point::new2(0.5, 0.5), 0.4, 0.01).unwrap();
        let cfg = SetupSearch { delta1_prime: 0.01, delta_s: 0.1, sigma: 0.8, n_lo: 1, n_hi: 5, samples: 200, seed: 3 };
        let s = find_reference_setup(&c, &disk, &[(0.0, 0.05)], 20, &cfg).unwrap();
        // A full collar crossing needs image length at least the collar diameter.
        assert!(2.0 * 0.01 * lam().powi(s.n0 as i32) >= 4.0 * 0.05);
    }

    #[test]
    fn products_converge() {
        let c = cat();
        let ends: Vec<Point> = (0..20).map(|i| Point::new2(0.05 * i as f64, 0.37)).collect();
        let r = truncated_product_check(&c, &ends, 1e-3, 16).unwrap();
        assert!(r.pass && r.beta_hat == 0.0);
        let p = make_perturbed_anosov(0.3, Point::new2(0.5, 0.5), 0.1).unwrap();
        let r = truncated_product_check(&p, &ends, 1e-6, 16).unwrap();
        assert!(r.pass && r.beta_hat > 0.0 && r.beta_hat < 0.9);
    }
}
