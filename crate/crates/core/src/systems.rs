//! Map zoo and splitting estimation.
//!
//! Every system exposes the reduced map on the circle or torus, its lift to
//! R^d, an accurate difference operator `delta(x, d) = F(x + d) - F(x)` used
//! for relative-orbit iteration, the Jacobian, and the centre-unstable /
//! stable splitting.
//!
//! One-dimensional points are stored with a zero second coordinate.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{
    dot, inverse, line_angle, mat_vec, norm, normalize, scale, solve_increasing, sub, wrap01,
    wrap_half, Mat2, Vec2,
};

/// Point on the circle (dim 1) or the 2-torus (dim 2), coordinates in [0, 1).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<f64>", try_from = "Vec<f64>")]
pub struct Point {
    c: Vec2,
    dim: u8,
}

impl Point {
    pub fn new1(x: f64) -> Self {
        Point { c: [wrap01(x), 0.0], dim: 1 }
    }

    pub fn new2(x: f64, y: f64) -> Self {
        Point { c: [wrap01(x), wrap01(y)], dim: 2 }
    }

    /// Reduce a lifted coordinate vector.
    pub fn from_lift(z: Vec2, dim: usize) -> Self {
        if dim == 1 {
            Point::new1(z[0])
        } else {
            Point::new2(z[0], z[1])
        }
    }

    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    pub fn coords(&self) -> &[f64] {
        &self.c[..self.dim as usize]
    }

    pub fn x(&self) -> f64 {
        self.c[0]
    }

    pub fn raw(&self) -> Vec2 {
        self.c
    }
}

impl From<Point> for Vec<f64> {
    fn from(p: Point) -> Self {
        p.coords().to_vec()
    }
}

impl TryFrom<Vec<f64>> for Point {
    type Error = String;
    fn try_from(v: Vec<f64>) -> std::result::Result<Self, String> {
        if v.iter().any(|c| !c.is_finite()) {
            return Err("point coordinates must be finite".into());
        }
        match v.len() {
            1 => Ok(Point::new1(v[0])),
            2 => Ok(Point::new2(v[0], v[1])),
            n => Err(format!("point must have 1 or 2 coordinates, got {n}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SystemKind {
    /// x -> 2x mod 1.
    Doubling,
    /// x -> 2x + a sin(2 pi x) / (2 pi) mod 1, |a| < 1.
    SmoothExpanding { a: f64 },
    /// Liverani-Saussol-Vaienti form: x(1 + (2x)^alpha) on [0, 1/2), 2x - 1 on [1/2, 1).
    PomeauManneville { alpha: f64 },
    /// Integer hyperbolic toral automorphism.
    CatMap { matrix: [[i64; 2]; 2] },
    /// A composed with a bump-supported shear along the unstable eigendirection.
    PerturbedCat {
        matrix: [[i64; 2]; 2],
        eps: f64,
        center: Vec2,
        radius: f64,
    },
}

/// Eigen data of an integer hyperbolic matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearPart {
    pub a: Mat2,
    pub a_inv: Mat2,
    pub lambda_u: f64,
    pub lambda_s: f64,
    pub u: Vec2,
    pub s: Vec2,
    /// Dual covectors: du.u = 1, du.s = 0, ds.s = 1, ds.u = 0.
    pub du: Vec2,
    pub ds: Vec2,
}

fn eigenvector(m: &Mat2, lambda: f64) -> Vec2 {
    let v = if m[0][1] != 0.0 {
        [m[0][1], lambda - m[0][0]]
    } else {
        [lambda - m[1][1], m[1][0]]
    };
    let v = normalize(v);
    if v[0] < 0.0 || (v[0] == 0.0 && v[1] < 0.0) {
        [-v[0], -v[1]]
    } else {
        v
    }
}

impl LinearPart {
    pub fn from_integer(matrix: [[i64; 2]; 2]) -> Result<Self> {
        let a: Mat2 = [
            [matrix[0][0] as f64, matrix[0][1] as f64],
            [matrix[1][0] as f64, matrix[1][1] as f64],
        ];
        let d = matrix[0][0] * matrix[1][1] - matrix[0][1] * matrix[1][0];
        if d.abs() != 1 {
            return Err(Error::ConstructionFailed(format!(
                "matrix determinant {d} is not +-1; not a toral automorphism"
            )));
        }
        let tr = a[0][0] + a[1][1];
        let disc = tr * tr - 4.0 * d as f64;
        if disc <= 0.0 {
            return Err(Error::ConstructionFailed("matrix has no real eigenvalues".into()));
        }
        let sq = disc.sqrt();
        let (l1, l2) = ((tr + sq) / 2.0, (tr - sq) / 2.0);
        let (lu, ls) = if l1.abs() >= l2.abs() { (l1, l2) } else { (l2, l1) };
        if lu.abs() <= 1.0 || ls.abs() >= 1.0 {
            return Err(Error::ConstructionFailed("matrix is not hyperbolic".into()));
        }
        // Recompute the small eigenvalue from the large one to avoid cancellation.
        let ls = d as f64 / lu;
        let u = eigenvector(&a, lu);
        let s = eigenvector(&a, ls);
        let p: Mat2 = [[u[0], s[0]], [u[1], s[1]]];
        let pi = inverse(&p).ok_or_else(|| Error::ConstructionFailed("degenerate eigenbasis".into()))?;
        let a_inv = [
            [matrix[1][1] as f64 * d as f64, -matrix[0][1] as f64 * d as f64],
            [-matrix[1][0] as f64 * d as f64, matrix[0][0] as f64 * d as f64],
        ];
        Ok(LinearPart {
            a,
            a_inv,
            lambda_u: lu,
            lambda_s: ls,
            u,
            s,
            du: pi[0],
            ds: pi[1],
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jacobian {
    pub dim: usize,
    pub m: Mat2,
}

impl Jacobian {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m[i][j]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim).map(|i| self.m[i][..self.dim].to_vec()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplittingFrame {
    pub at: Point,
    pub e_cu: Vec2,
    pub e_s: Vec2,
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemCheck {
    pub item: String,
    pub pass: bool,
    pub value: f64,
    pub threshold: f64,
    pub worst_at: Vec2,
}

/// Constants measured on the verification grid of a perturbed automorphism.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifiedConstants {
    /// min over the grid of the expansion along E^cu.
    pub sigma1: f64,
    /// max off V of the inverse cu norm.
    pub sigma2: f64,
    /// max(0, max on V of the inverse cu norm - 1).
    pub delta0: f64,
    /// Same three quantities taken over sampled cone directions.
    pub sigma1_cone: f64,
    pub sigma2_cone: f64,
    pub delta0_cone: f64,
    /// max over the grid of (image slope of a cone boundary ray) / (cone width); < 1 is invariance.
    pub cone_ratio_max: f64,
    pub det_min: f64,
    pub grid: usize,
    pub items: Vec<ItemCheck>,
}

impl VerifiedConstants {
    pub fn all_pass(&self) -> bool {
        self.items.iter().all(|c| c.pass)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SystemDescriptor {
    pub name: String,
    pub dim: usize,
    pub params: BTreeMap<String, f64>,
    pub kind: SystemKind,
    pub cone_width: Option<f64>,
    pub domination_lambda: Option<f64>,
    pub min_angle: f64,
    pub splitting_iters: usize,
    pub splitting_tol: f64,
    pub verified: Option<VerifiedConstants>,
    /// Systems included only as contrast cases (not covered by the theory).
    pub contrast_only: bool,
    lin: Option<LinearPart>,
}

#[derive(Serialize, Deserialize)]
struct DescriptorDoc {
    name: String,
    dim: usize,
    params: BTreeMap<String, f64>,
    kind: SystemKind,
    cone_width: Option<f64>,
    domination_lambda: Option<f64>,
    min_angle: f64,
    splitting_iters: usize,
    splitting_tol: f64,
    verified: Option<VerifiedConstants>,
    contrast_only: bool,
}

impl Serialize for SystemDescriptor {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        DescriptorDoc {
            name: self.name.clone(),
            dim: self.dim,
            params: self.params.clone(),
            kind: self.kind.clone(),
            cone_width: self.cone_width,
            domination_lambda: self.domination_lambda,
            min_angle: self.min_angle,
            splitting_iters: self.splitting_iters,
            splitting_tol: self.splitting_tol,
            verified: self.verified.clone(),
            contrast_only: self.contrast_only,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SystemDescriptor {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = DescriptorDoc::deserialize(d)?;
        let lin = match &doc.kind {
            SystemKind::CatMap { matrix } | SystemKind::PerturbedCat { matrix, .. } => {
                Some(LinearPart::from_integer(*matrix).map_err(serde::de::Error::custom)?)
            }
            _ => None,
        };
        Ok(SystemDescriptor {
            name: doc.name,
            dim: doc.dim,
            params: doc.params,
            kind: doc.kind,
            cone_width: doc.cone_width,
            domination_lambda: doc.domination_lambda,
            min_angle: doc.min_angle,
            splitting_iters: doc.splitting_iters,
            splitting_tol: doc.splitting_tol,
            verified: doc.verified,
            contrast_only: doc.contrast_only,
            lin,
        })
    }
}

pub const CAT_MATRIX: [[i64; 2]; 2] = [[2, 1], [1, 1]];

fn bump_profile(rho: f64, r: f64) -> (f64, f64) {
    // phi(t) = (1 - t^2)^3 and d phi / d rho divided by rho.
    let t = rho / r;
    let one = 1.0 - t * t;
    (one * one * one, -6.0 * one * one / (r * r))
}

impl SystemDescriptor {
    fn base(name: &str, dim: usize, kind: SystemKind) -> Self {
        SystemDescriptor {
            name: name.to_string(),
            dim,
            params: BTreeMap::new(),
            kind,
            cone_width: None,
            domination_lambda: None,
            min_angle: 0.1,
            splitting_iters: 30,
            splitting_tol: 1e-9,
            verified: None,
            contrast_only: false,
            lin: None,
        }
    }

    pub fn doubling() -> Self {
        Self::base("doubling", 1, SystemKind::Doubling)
    }

    pub fn smooth_expanding(a: f64) -> Result<Self> {
        if !(a.abs() < 1.0) {
            return Err(Error::ConstructionFailed(format!(
                "smooth_expanding needs |a| < 1 for uniform expansion, got {a}"
            )));
        }
        let mut s = Self::base("smooth_expanding", 1, SystemKind::SmoothExpanding { a });
        s.params.insert("a".into(), a);
        Ok(s)
    }

    pub fn pomeau_manneville(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::ConstructionFailed(format!(
                "pomeau_manneville needs alpha in (0, 1), got {alpha}"
            )));
        }
        let mut s = Self::base("pomeau_manneville", 1, SystemKind::PomeauManneville { alpha });
        s.params.insert("alpha".into(), alpha);
        s.contrast_only = true;
        Ok(s)
    }

    pub fn cat_map(matrix: [[i64; 2]; 2]) -> Result<Self> {
        let lin = LinearPart::from_integer(matrix)?;
        let mut s = Self::base("cat", 2, SystemKind::CatMap { matrix });
        for (i, row) in matrix.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                s.params.insert(format!("a{}{}", i + 1, j + 1), *v as f64);
            }
        }
        s.cone_width = Some(0.25);
        s.domination_lambda = Some((lin.lambda_s / lin.lambda_u).abs());
        s.lin = Some(lin);
        Ok(s)
    }

    /// Build a zoo member from its name and named parameters.
    pub fn from_spec(name: &str, params: &BTreeMap<String, f64>) -> Result<Self> {
        let allowed: &[&str] = match name {
            "doubling" => &[],
            "smooth_expanding" => &["a"],
            "pomeau_manneville" => &["alpha"],
            "cat" => &["a11", "a12", "a21", "a22"],
            "perturbed_cat" => &[
                "eps", "cx", "cy", "radius", "cone_width", "grid", "sigma1_min", "delta0_max",
                "a11", "a12", "a21", "a22",
            ],
            other => return Err(Error::Precondition(format!("unknown system '{other}'"))),
        };
        if let Some(k) = params.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(Error::Precondition(format!("unknown parameter '{k}' for system '{name}'")));
        }
        let get = |k: &str, d: f64| params.get(k).copied().unwrap_or(d);
        let matrix = || -> Result<[[i64; 2]; 2]> {
            let mut m = CAT_MATRIX;
            for (i, row) in m.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    let key = format!("a{}{}", i + 1, j + 1);
                    if let Some(x) = params.get(&key) {
                        if x.fract() != 0.0 {
                            return Err(Error::Precondition(format!("{key} must be an integer")));
                        }
                        *v = *x as i64;
                    }
                }
            }
            Ok(m)
        };
        match name {
            "doubling" => Ok(Self::doubling()),
            "smooth_expanding" => Self::smooth_expanding(get("a", 0.3)),
            "pomeau_manneville" => Self::pomeau_manneville(get("alpha", 0.5)),
            "cat" => Self::cat_map(matrix()?),
            _ => {
                let opts = PerturbedOptions {
                    matrix: matrix()?,
                    eps: get("eps", 0.3),
                    center: [get("cx", 0.5), get("cy", 0.5)],
                    radius: get("radius", 0.05),
                    cone_width: get("cone_width", 0.25),
                    grid: get("grid", 512.0) as usize,
                    sigma1_min: get("sigma1_min", 1.0),
                    delta0_max: get("delta0_max", 0.25),
                };
                make_perturbed_anosov_with(&opts)
            }
        }
    }

    pub fn linear_part(&self) -> Option<&LinearPart> {
        self.lin.as_ref()
    }

    /// True when the lift is affine on each smooth piece (exact linear pullbacks).
    pub fn is_affine(&self) -> bool {
        match &self.kind {
            SystemKind::Doubling | SystemKind::CatMap { .. } => true,
            SystemKind::PerturbedCat { eps, .. } => *eps == 0.0,
            _ => false,
        }
    }

    /// The constant centre-unstable direction, when unstable leaves are straight lines.
    pub fn straight_cu(&self) -> Option<Vec2> {
        match self.dim {
            1 => Some([1.0, 0.0]),
            _ => self.lin.map(|l| l.u),
        }
    }

    fn bump(&self, z: Vec2) -> Option<(f64, Vec2)> {
        if let SystemKind::PerturbedCat { eps, center, radius, .. } = &self.kind {
            if *eps == 0.0 {
                return None;
            }
            let lin = self.lin.as_ref().expect("linear part");
            let d = [wrap_half(z[0] - center[0]), wrap_half(z[1] - center[1])];
            let rho = norm(d);
            if rho >= *radius {
                return Some((0.0, [0.0, 0.0]));
            }
            let (phi, dphi_over_rho) = bump_profile(rho, *radius);
            let xi = dot(lin.du, d);
            let grad = [
                phi * lin.du[0] + dphi_over_rho * xi * d[0],
                phi * lin.du[1] + dphi_over_rho * xi * d[1],
            ];
            Some((xi * phi, grad))
        } else {
            None
        }
    }

    fn eps(&self) -> f64 {
        match &self.kind {
            SystemKind::PerturbedCat { eps, .. } => *eps,
            _ => 0.0,
        }
    }

    /// Shear factor k(z) = DS u / u on the unstable direction (1 off the bump).
    pub fn shear_factor(&self, z: Vec2) -> f64 {
        match (self.bump(z), self.lin.as_ref()) {
            (Some((_, grad)), Some(lin)) => 1.0 - self.eps() * dot(grad, lin.u),
            _ => 1.0,
        }
    }

    /// Lifted map on R^d.
    pub fn lift(&self, z: Vec2) -> Vec2 {
        match &self.kind {
            SystemKind::Doubling => [2.0 * z[0], 0.0],
            SystemKind::SmoothExpanding { a } => {
                [2.0 * z[0] + a / (2.0 * PI) * (2.0 * PI * z[0]).sin(), 0.0]
            }
            SystemKind::PomeauManneville { alpha } => {
                let fl = z[0].floor();
                let y = z[0] - fl;
                [2.0 * fl + pm_branch(y, *alpha), 0.0]
            }
            SystemKind::CatMap { .. } => mat_vec(&self.lin.as_ref().unwrap().a, z),
            SystemKind::PerturbedCat { .. } => {
                let lin = self.lin.as_ref().unwrap();
                let az = mat_vec(&lin.a, z);
                match self.bump(z) {
                    Some((g, _)) => {
                        let c = self.eps() * g * lin.lambda_u;
                        [az[0] - c * lin.u[0], az[1] - c * lin.u[1]]
                    }
                    None => az,
                }
            }
        }
    }

    /// Accurate difference `F(x + d) - F(x)` of the lift.
    pub fn delta(&self, x: Vec2, d: Vec2) -> Vec2 {
        match &self.kind {
            SystemKind::Doubling => [2.0 * d[0], 0.0],
            SystemKind::SmoothExpanding { a } => {
                let s = 2.0 * (2.0 * PI * x[0] + PI * d[0]).cos() * (PI * d[0]).sin();
                [2.0 * d[0] + a / (2.0 * PI) * s, 0.0]
            }
            SystemKind::PomeauManneville { alpha } => {
                let y0 = x[0] - x[0].floor();
                let y1 = y0 + d[0];
                if y0 < 0.5 && (0.0..0.5).contains(&y1) {
                    let c = 2f64.powf(*alpha);
                    let diff = if y0 > 0.0 {
                        y0.powf(1.0 + alpha) * ((1.0 + alpha) * (d[0] / y0).ln_1p()).exp_m1()
                    } else {
                        y1.powf(1.0 + alpha)
                    };
                    [d[0] + c * diff, 0.0]
                } else if y0 >= 0.5 && (0.5..1.0).contains(&y1) {
                    [2.0 * d[0], 0.0]
                } else {
                    [self.lift([x[0] + d[0], 0.0])[0] - self.lift(x)[0], 0.0]
                }
            }
            SystemKind::CatMap { .. } => mat_vec(&self.lin.as_ref().unwrap().a, d),
            SystemKind::PerturbedCat { .. } => {
                let lin = self.lin.as_ref().unwrap();
                let ad = mat_vec(&lin.a, d);
                match (self.bump(x), self.bump([x[0] + d[0], x[1] + d[1]])) {
                    (Some((g0, _)), Some((g1, _))) => {
                        let c = self.eps() * (g1 - g0) * lin.lambda_u;
                        [ad[0] - c * lin.u[0], ad[1] - c * lin.u[1]]
                    }
                    _ => ad,
                }
            }
        }
    }

    pub fn step(&self, x: Point) -> Point {
        Point::from_lift(self.lift(x.raw()), self.dim)
    }

    /// Jacobian as a 2x2 matrix (1D maps use the top-left entry, identity elsewhere).
    pub fn jac(&self, z: Vec2) -> Result<Mat2> {
        let d1 = |v: f64| Ok([[v, 0.0], [0.0, 1.0]]);
        match &self.kind {
            SystemKind::Doubling => d1(2.0),
            SystemKind::SmoothExpanding { a } => d1(2.0 + a * (2.0 * PI * z[0]).cos()),
            SystemKind::PomeauManneville { alpha } => {
                let y = z[0] - z[0].floor();
                if y == 0.5 {
                    return Err(Error::DerivativeUndefined { x: y });
                }
                d1(pm_branch_derivative(y, *alpha))
            }
            SystemKind::CatMap { .. } => Ok(self.lin.as_ref().unwrap().a),
            SystemKind::PerturbedCat { .. } => {
                let lin = self.lin.as_ref().unwrap();
                let mut m = lin.a;
                if let Some((_, grad)) = self.bump(z) {
                    let c = self.eps() * lin.lambda_u;
                    for (i, row) in m.iter_mut().enumerate() {
                        for (j, v) in row.iter_mut().enumerate() {
                            *v -= c * lin.u[i] * grad[j];
                        }
                    }
                }
                Ok(m)
            }
        }
    }

    pub fn jacobian(&self, x: Point) -> Result<Jacobian> {
        Ok(Jacobian { dim: self.dim, m: self.jac(x.raw())? })
    }

    /// Inverse of the torus map (2D systems only).
    pub fn inverse_step(&self, w: Point) -> Result<Point> {
        let lin = self
            .lin
            .as_ref()
            .ok_or_else(|| Error::Unsupported(format!("{} has no inverse map", self.name)))?;
        let y = Point::from_lift(mat_vec(&lin.a_inv, w.raw()), 2);
        if let SystemKind::PerturbedCat { eps, center, radius, .. } = &self.kind {
            if *eps == 0.0 {
                return Ok(y);
            }
            let d = [wrap_half(y.raw()[0] - center[0]), wrap_half(y.raw()[1] - center[1])];
            if norm(d) >= *radius {
                return Ok(y);
            }
            // Solve theta = eps * g(y + theta u) along the unstable chord.
            let yr = y.raw();
            let h = |th: f64| {
                let z = [yr[0] + th * lin.u[0], yr[1] + th * lin.u[1]];
                let (g, grad) = self.bump(z).unwrap_or((0.0, [0.0, 0.0]));
                Ok((th - eps * g, 1.0 - eps * dot(grad, lin.u)))
            };
            let th = solve_increasing(h, -2.0 * radius, 2.0 * radius, 1e-16)?;
            return Ok(Point::new2(yr[0] + th * lin.u[0], yr[1] + th * lin.u[1]));
        }
        Ok(y)
    }

    /// Estimated splitting at `x` from `iters` push-forwards / pull-backs.
    pub fn splitting_at(&self, x: Point, iters: usize) -> Result<SplittingFrame> {
        if self.dim != 2 {
            return Err(Error::Unsupported("splitting is only defined for 2D systems".into()));
        }
        if iters == 0 {
            return Err(Error::Precondition("splitting needs iters >= 1".into()));
        }
        let lin = *self.lin.as_ref().unwrap();
        // Backward orbit x_{-iters-1} .. x_0 and forward orbit x_0 .. x_{iters+1}.
        let mut back = vec![x];
        for _ in 0..=iters {
            let prev = self.inverse_step(*back.last().unwrap())?;
            back.push(prev);
        }
        let mut fwd = vec![x];
        for _ in 0..=iters {
            let next = self.step(*fwd.last().unwrap());
            fwd.push(next);
        }
        let push = |len: usize| -> Result<Vec2> {
            let mut v = lin.u;
            for j in (0..len).rev() {
                v = normalize(mat_vec(&self.jac(back[j + 1].raw())?, v));
            }
            Ok(v)
        };
        let pull = |len: usize| -> Result<Vec2> {
            let mut v = lin.s;
            for j in (0..len).rev() {
                let inv = inverse(&self.jac(fwd[j].raw())?)
                    .ok_or_else(|| Error::ConstructionFailed("singular Jacobian".into()))?;
                v = normalize(mat_vec(&inv, v));
            }
            Ok(v)
        };
        let orient = |v: Vec2, r: Vec2| if dot(v, r) < 0.0 { scale(v, -1.0) } else { v };
        let e_cu = orient(push(iters)?, lin.u);
        let e_s = orient(pull(iters)?, lin.s);
        let residual = line_angle(e_cu, push(iters + 1)?).max(line_angle(e_s, pull(iters + 1)?));
        if residual > self.splitting_tol {
            return Err(Error::NonConvergent { at: x.coords().to_vec(), residual, tol: self.splitting_tol });
        }
        if line_angle(e_cu, e_s) < self.min_angle {
            return Err(Error::NonConvergent {
                at: x.coords().to_vec(),
                residual: line_angle(e_cu, e_s),
                tol: self.min_angle,
            });
        }
        Ok(SplittingFrame { at: x, e_cu: normalize(e_cu), e_s: normalize(e_s), residual })
    }

    /// Centre-unstable direction at `x` (1D: the unit vector).
    pub fn cu_direction(&self, x: Point) -> Result<Vec2> {
        if self.dim == 1 {
            return Ok([1.0, 0.0]);
        }
        if let Some(u) = self.straight_cu() {
            // The zoo's 2D members leave E^u of A exactly invariant.
            return Ok(u);
        }
        Ok(self.splitting_at(x, self.splitting_iters)?.e_cu)
    }

    /// Inverse expansion factor along E^cu: ||Df(x)^{-1}|_{E^cu(f x)}||.
    pub fn cu_inverse_norm(&self, x: Point) -> Result<f64> {
        let m = self.jac(x.raw())?;
        if self.dim == 1 {
            return Ok(1.0 / m[0][0].abs());
        }
        let e = self.cu_direction(x)?;
        Ok(1.0 / norm(mat_vec(&m, e)))
    }
}

fn pm_branch(y: f64, alpha: f64) -> f64 {
    if y < 0.5 {
        y * (1.0 + (2.0 * y).powf(alpha))
    } else {
        2.0 * y
    }
}

fn pm_branch_derivative(y: f64, alpha: f64) -> f64 {
    if y < 0.5 {
        1.0 + (1.0 + alpha) * (2.0 * y).powf(alpha)
    } else {
        2.0
    }
}

pub fn step(sys: &SystemDescriptor, x: Point) -> Point {
    sys.step(x)
}

pub fn jacobian(sys: &SystemDescriptor, x: Point) -> Result<Jacobian> {
    sys.jacobian(x)
}

pub fn splitting_at(sys: &SystemDescriptor, x: Point, iters: usize) -> Result<SplittingFrame> {
    sys.splitting_at(x, iters)
}

pub fn cu_inverse_norm(sys: &SystemDescriptor, x: Point) -> Result<f64> {
    sys.cu_inverse_norm(x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbedOptions {
    pub matrix: [[i64; 2]; 2],
    pub eps: f64,
    pub center: Vec2,
    pub radius: f64,
    pub cone_width: f64,
    pub grid: usize,
    pub sigma1_min: f64,
    pub delta0_max: f64,
}

impl Default for PerturbedOptions {
    fn default() -> Self {
        PerturbedOptions {
            matrix: CAT_MATRIX,
            eps: 0.3,
            center: [0.5, 0.5],
            radius: 0.05,
            cone_width: 0.25,
            grid: 512,
            sigma1_min: 1.0,
            delta0_max: 0.25,
        }
    }
}

pub fn make_perturbed_anosov(eps: f64, v_center: Point, v_radius: f64) -> Result<SystemDescriptor> {
    let c = v_center.raw();
    make_perturbed_anosov_with(&PerturbedOptions {
        eps,
        center: c,
        radius: v_radius,
        ..Default::default()
    })
}

/// Compose the automorphism with the bump shear and check items (1)-(4) on a grid.
pub fn make_perturbed_anosov_with(o: &PerturbedOptions) -> Result<SystemDescriptor> {
    if !(o.eps >= 0.0 && o.eps.is_finite()) {
        return Err(Error::ConstructionFailed(format!("eps must be >= 0, got {}", o.eps)));
    }
    if !(o.radius > 0.0 && o.radius < 0.25) {
        return Err(Error::ConstructionFailed(format!("V radius must be in (0, 1/4), got {}", o.radius)));
    }
    if !(o.cone_width > 0.0) || o.grid < 2 {
        return Err(Error::ConstructionFailed("cone width must be > 0 and grid >= 2".into()));
    }
    let lin = LinearPart::from_integer(o.matrix)?;
    let center = [wrap01(o.center[0]), wrap01(o.center[1])];
    let mut sys = SystemDescriptor::base(
        "perturbed_cat",
        2,
        SystemKind::PerturbedCat { matrix: o.matrix, eps: o.eps, center, radius: o.radius },
    );
    sys.lin = Some(lin);
    sys.cone_width = Some(o.cone_width);
    for (k, v) in [
        ("eps", o.eps),
        ("cx", center[0]),
        ("cy", center[1]),
        ("radius", o.radius),
        ("cone_width", o.cone_width),
        ("grid", o.grid as f64),
        ("sigma1_min", o.sigma1_min),
        ("delta0_max", o.delta0_max),
    ] {
        sys.params.insert(k.into(), v);
    }
    for (i, row) in o.matrix.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            sys.params.insert(format!("a{}{}", i + 1, j + 1), *v as f64);
        }
    }

    let a = o.cone_width;
    let dirs: Vec<Vec2> = [-1.0, -0.5, 0.0, 0.5, 1.0]
        .iter()
        .map(|c| normalize([lin.u[0] + c * a * lin.s[0], lin.u[1] + c * a * lin.s[1]]))
        .collect();
    let mut pts: Vec<Vec2> = Vec::with_capacity(o.grid * o.grid + 128 * 128);
    for i in 0..o.grid {
        for j in 0..o.grid {
            pts.push([(i as f64 + 0.5) / o.grid as f64, (j as f64 + 0.5) / o.grid as f64]);
        }
    }
    // Local grid over the support, plus its centre.
    let loc = 128;
    for i in 0..=loc {
        for j in 0..=loc {
            let dx = (2.0 * i as f64 / loc as f64 - 1.0) * o.radius;
            let dy = (2.0 * j as f64 / loc as f64 - 1.0) * o.radius;
            if dx.hypot(dy) < o.radius {
                pts.push([wrap01(center[0] + dx), wrap01(center[1] + dy)]);
            }
        }
    }

    struct Acc {
        val: f64,
        at: Vec2,
    }
    let mut s1 = Acc { val: f64::INFINITY, at: [0.0; 2] };
    let mut s2 = Acc { val: 0.0, at: [0.0; 2] };
    let mut d0 = Acc { val: f64::NEG_INFINITY, at: [0.0; 2] };
    let mut s1c = Acc { val: f64::INFINITY, at: [0.0; 2] };
    let mut s2c = Acc { val: 0.0, at: [0.0; 2] };
    let mut d0c = Acc { val: f64::NEG_INFINITY, at: [0.0; 2] };
    let mut cone = Acc { val: 0.0, at: [0.0; 2] };
    let mut detm = Acc { val: f64::INFINITY, at: [0.0; 2] };
    let mut dom = 0.0f64;
    for &z in &pts {
        let m = sys.jac(z)?;
        let dz = crate::numeric::det(&m);
        if dz < detm.val {
            detm = Acc { val: dz, at: z };
        }
        let inside = {
            let d = [wrap_half(z[0] - center[0]), wrap_half(z[1] - center[1])];
            norm(d) < o.radius
        };
        let exp_u = norm(mat_vec(&m, lin.u));
        if exp_u < s1.val {
            s1 = Acc { val: exp_u, at: z };
        }
        let inv_u = 1.0 / exp_u;
        if inside {
            if inv_u - 1.0 > d0.val {
                d0 = Acc { val: inv_u - 1.0, at: z };
            }
        } else if inv_u > s2.val {
            s2 = Acc { val: inv_u, at: z };
        }
        for &v in &dirs {
            let w = mat_vec(&m, v);
            let e = norm(w);
            if e < s1c.val {
                s1c = Acc { val: e, at: z };
            }
            if inside {
                if 1.0 / e - 1.0 > d0c.val {
                    d0c = Acc { val: 1.0 / e - 1.0, at: z };
                }
            } else if 1.0 / e > s2c.val {
                s2c = Acc { val: 1.0 / e, at: z };
            }
        }
        for &v in &[dirs[0], dirs[4]] {
            let w = mat_vec(&m, v);
            let alpha = dot(lin.du, w);
            let beta = dot(lin.ds, w);
            let ratio = if alpha == 0.0 { f64::INFINITY } else { (beta / alpha).abs() / a };
            if ratio > cone.val {
                cone = Acc { val: ratio, at: z };
            }
        }
        let ws = norm(mat_vec(&m, lin.s));
        dom = dom.max(ws / exp_u);
    }
    let delta0 = d0.val.max(0.0);
    let delta0_cone = d0c.val.max(0.0);
    let items = vec![
        ItemCheck { item: "invertible".into(), pass: detm.val > 0.0, value: detm.val, threshold: 0.0, worst_at: detm.at },
        ItemCheck { item: "1".into(), pass: cone.val < 1.0, value: cone.val, threshold: 1.0, worst_at: cone.at },
        ItemCheck {
            item: "2".into(),
            pass: s1.val > o.sigma1_min && s1c.val > o.sigma1_min,
            value: s1.val.min(s1c.val),
            threshold: o.sigma1_min,
            worst_at: if s1.val <= s1c.val { s1.at } else { s1c.at },
        },
        ItemCheck {
            item: "3".into(),
            pass: s2.val < 1.0 && s2c.val < 1.0,
            value: s2.val.max(s2c.val),
            threshold: 1.0,
            worst_at: if s2.val >= s2c.val { s2.at } else { s2c.at },
        },
        ItemCheck {
            item: "4".into(),
            pass: delta0 <= o.delta0_max && delta0_cone <= o.delta0_max,
            value: delta0.max(delta0_cone),
            threshold: o.delta0_max,
            worst_at: if d0.val >= d0c.val { d0.at } else { d0c.at },
        },
    ];
    let consts = VerifiedConstants {
        sigma1: s1.val,
        sigma2: s2.val,
        delta0,
        sigma1_cone: s1c.val,
        sigma2_cone: s2c.val,
        delta0_cone,
        cone_ratio_max: cone.val,
        det_min: detm.val,
        grid: o.grid,
        items,
    };
    let failed: Vec<String> = consts
        .items
        .iter()
        .filter(|c| !c.pass)
        .map(|c| {
            format!(
                "item {} (value {:.6}, threshold {:.6}, at ({:.4}, {:.4}))",
                c.item, c.value, c.threshold, c.worst_at[0], c.worst_at[1]
            )
        })
        .collect();
    if !failed.is_empty() {
        return Err(Error::ConstructionFailed(failed.join("; ")));
    }
    sys.domination_lambda = Some(dom);
    sys.verified = Some(consts);
    Ok(sys)
}

/// Zoo listing with a short label for each member.
pub fn zoo() -> Vec<(&'static str, &'static str)> {
    vec![
        ("doubling", "x -> 2x mod 1; uniformly expanding"),
        ("smooth_expanding", "x -> 2x + a sin(2 pi x)/(2 pi); smooth nonlinear uniformly expanding"),
        ("pomeau_manneville", "intermittent map with a neutral fixed point; polynomial-tail contrast system"),
        ("cat", "integer hyperbolic toral automorphism"),
        ("perturbed_cat", "automorphism composed with a bump shear along E^u; non-uniform cu expansion"),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiskKind {
    Interval,
    Polyline,
}

/// A straight disk through `anchor` with arclength parameter t in [-radius, radius].
///
/// All zoo members have straight centre-unstable leaves, so a disk is fully
/// described by its anchor and direction; `samples` is the polyline used by
/// sampled geometric checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceDisk {
    pub kind: DiskKind,
    pub anchor: Point,
    pub direction: Vec2,
    pub radius: f64,
    pub samples: Vec<Point>,
    pub max_gap: f64,
}

impl ReferenceDisk {
    pub fn interval(center: f64, radius: f64) -> Self {
        let anchor = Point::new1(center);
        ReferenceDisk {
            kind: DiskKind::Interval,
            anchor,
            direction: [1.0, 0.0],
            radius,
            samples: vec![Point::new1(center - radius), Point::new1(center + radius)],
            max_gap: 2.0 * radius,
        }
    }

    /// Straight segment through `center` along the centre-unstable direction.
    pub fn cu_segment(sys: &SystemDescriptor, center: Point, radius: f64, max_gap: f64) -> Result<Self> {
        if sys.dim == 1 {
            return Ok(Self::interval(center.x(), radius));
        }
        if !(max_gap > 0.0) {
            return Err(Error::Precondition("max_gap must be positive".into()));
        }
        let dir = sys.cu_direction(center)?;
        let k = ((2.0 * radius / max_gap).ceil() as usize).max(1);
        if k > 1 << 20 {
            return Err(Error::ResolutionExceeded(format!("{k} polyline samples exceed the cap")));
        }
        let mut disk = ReferenceDisk {
            kind: DiskKind::Polyline,
            anchor: center,
            direction: normalize(dir),
            radius,
            samples: Vec::with_capacity(k + 1),
            max_gap,
        };
        for i in 0..=k {
            let t = -radius + 2.0 * radius * i as f64 / k as f64;
            disk.samples.push(disk.point_at(t));
        }
        Ok(disk)
    }

    pub fn dim(&self) -> usize {
        self.anchor.dim()
    }

    /// Unreduced coordinates of the point with parameter `t`.
    pub fn lifted_at(&self, t: f64) -> Vec2 {
        let a = self.anchor.raw();
        if self.dim() == 1 {
            [a[0] + t, 0.0]
        } else {
            [a[0] + t * self.direction[0], a[1] + t * self.direction[1]]
        }
    }

    pub fn point_at(&self, t: f64) -> Point {
        Point::from_lift(self.lifted_at(t), self.dim())
    }

    pub fn length(&self) -> f64 {
        2.0 * self.radius
    }
}

/// Displacement from `b` to `a` on the torus (minimal image), first `dim` coordinates.
pub fn torus_sub(a: Vec2, b: Vec2, dim: usize) -> Vec2 {
    let d = sub(a, b);
    if dim == 1 {
        [wrap_half(d[0]), 0.0]
    } else {
        [wrap_half(d[0]), wrap_half(d[1])]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn golden() -> f64 {
        (3.0 + 5f64.sqrt()) / 2.0
    }

    #[test]
    fn doubling_step_and_jacobian() {
        let d = SystemDescriptor::doubling();
        assert!((d.step(Point::new1(0.3)).x() - 0.6).abs() < 1e-15);
        assert_eq!(d.step(Point::new1(0.75)).x(), 0.5);
        assert_eq!(d.jacobian(Point::new1(0.123)).unwrap().rows(), vec![vec![2.0]]);
        assert_eq!(d.cu_inverse_norm(Point::new1(0.9)).unwrap(), 0.5);
    }

    #[test]
    fn cat_step_and_constants() {
        let c = SystemDescriptor::cat_map(CAT_MATRIX).unwrap();
        let p = c.step(Point::new2(0.5, 0.5));
        assert_eq!(p.coords(), &[0.5, 0.0]);
        assert_eq!(c.jacobian(p).unwrap().rows(), vec![vec![2.0, 1.0], vec![1.0, 1.0]]);
        let inv = c.cu_inverse_norm(Point::new2(0.1, 0.7)).unwrap();
        assert!((inv - 2.0 / (3.0 + 5f64.sqrt())).abs() < 1e-15);
    }

    #[test]
    fn cat_eigen_oracle() {
        // Independent: u is proportional to (1, golden - 2) for [[2,1],[1,1]].
        let c = SystemDescriptor::cat_map(CAT_MATRIX).unwrap();
        let g = golden();
        let u = normalize([1.0, g - 2.0]);
        for iters in [1, 5, 30] {
            let f = c.splitting_at(Point::new2(0.3, 0.8), iters).unwrap();
            assert!((f.e_cu[0] - u[0]).abs() < 1e-12 && (f.e_cu[1] - u[1]).abs() < 1e-12);
            assert!(dot(f.e_cu, f.e_s).abs() < 1e-12);
            assert!(f.residual < 1e-12);
            assert!(line_angle(f.e_cu, f.e_s) > c.min_angle);
        }
    }

    #[test]
    fn pm_derivative_and_branch() {
        let p = SystemDescriptor::pomeau_manneville(0.5).unwrap();
        assert_eq!(p.jacobian(Point::new1(0.0)).unwrap().get(0, 0), 1.0);
        assert!(matches!(p.jacobian(Point::new1(0.5)), Err(Error::DerivativeUndefined { .. })));
        assert!(p.cu_inverse_norm(Point::new1(1e-12)).unwrap() > 0.999);
        // Continuity of the lift at the branch point and at the integers.
        assert!((p.lift([0.5 - 1e-15, 0.0])[0] - 1.0).abs() < 1e-13);
        assert!((p.lift([1.0 - 1e-15, 0.0])[0] - 2.0).abs() < 1e-13);
    }

    #[test]
    fn delta_matches_direct_difference() {
        let systems = vec![
            SystemDescriptor::smooth_expanding(0.4).unwrap(),
            SystemDescriptor::pomeau_manneville(0.3).unwrap(),
            make_perturbed_anosov(0.4, Point::new2(0.5, 0.5), 0.1).unwrap(),
        ];
        for s in &systems {
            for &(x, d) in &[(0.11, 1e-3), (0.49, 2e-3), (0.52, -1e-4), (0.501, 0.003)] {
                let z = [x, 0.47];
                let dv = if s.dim == 1 { [d, 0.0] } else { [d, 0.5 * d] };
                let got = s.delta(z, dv);
                let fz = s.lift(z);
                let fw = s.lift([z[0] + dv[0], z[1] + dv[1]]);
                for k in 0..s.dim {
                    assert!((got[k] - (fw[k] - fz[k])).abs() < 1e-13, "{} {x} {d}", s.name);
                }
            }
        }
    }

    #[test]
    fn perturbed_zero_is_cat() {
        let p = make_perturbed_anosov(0.0, Point::new2(0.5, 0.5), 0.05).unwrap();
        let v = p.verified.as_ref().unwrap();
        assert!(v.all_pass());
        assert!((v.sigma2 - 2.0 / (3.0 + 5f64.sqrt())).abs() < 1e-12);
        let c = SystemDescriptor::cat_map(CAT_MATRIX).unwrap();
        let x = Point::new2(0.21, 0.93);
        assert_eq!(p.step(x), c.step(x));
    }

    #[test]
    fn perturbed_outside_support_is_linear() {
        let p = make_perturbed_anosov(0.4, Point::new2(0.5, 0.5), 0.05).unwrap();
        let c = SystemDescriptor::cat_map(CAT_MATRIX).unwrap();
        let x = Point::new2(0.1, 0.2);
        let (a, b) = (p.step(x).raw(), c.step(x).raw());
        assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
    }

    #[test]
    fn perturbed_invalid_eps_fails() {
        let r = make_perturbed_anosov(1.2, Point::new2(0.5, 0.5), 0.05);
        match r {
            Err(Error::ConstructionFailed(msg)) => assert!(msg.contains("invertible") || msg.contains("item 1")),
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn perturbed_inverse_roundtrip() {
        let p = make_perturbed_anosov(0.5, Point::new2(0.5, 0.5), 0.1).unwrap();
        for &(x, y) in &[(0.5, 0.5), (0.52, 0.47), (0.45, 0.56), (0.1, 0.9)] {
            let z = Point::new2(x, y);
            let back = p.inverse_step(p.step(z)).unwrap();
            let d = torus_sub(back.raw(), z.raw(), 2);
            assert!(norm(d) < 1e-12, "{x} {y}: {d:?}");
        }
    }

    #[test]
    fn descriptor_json_roundtrip() {
        let p = make_perturbed_anosov(0.3, Point::new2(0.4, 0.6), 0.05).unwrap();
        let s = serde_json::to_string(&p).unwrap();
        let q: SystemDescriptor = serde_json::from_str(&s).unwrap();
        assert_eq!(p, q);
        assert!(s.contains("sigma1"));
    }

    #[test]
    fn from_spec_validation() {
        let mut m = BTreeMap::new();
        m.insert("bogus".to_string(), 1.0);
        assert!(SystemDescriptor::from_spec("doubling", &m).is_err());
        assert!(SystemDescriptor::from_spec("nope", &BTreeMap::new()).is_err());
        assert!(SystemDescriptor::from_spec("cat", &BTreeMap::new()).is_ok());
    }
}
