//! Straightening coordinates (x, s, u) near N in which N, W^s(N), W^u(N)
//! and the strong leaves become coordinate planes, and the straightened map
//! F̃ = φ∘F∘φ⁻¹ with its block Jacobian.
//!
//! Two constructions are provided.
//!
//! * [`ProductChart`] (μ = 0): x is untouched and (s, u) come from a
//!   polynomial conjugacy K of the pendulum factor to its Birkhoff normal
//!   form Λ(s, u) = (s·α(su), u·β(su)). Then F̃ = (shear, Λ) exactly and the
//!   chart tolerance is the conjugacy defect of K.
//! * [`LeafChart`] (μ > 0): for a base point b of N the chart is
//!   φ_b⁻¹(b+ξ, s, u) = L^u_{b+ξ}(u) + L^s_{b+ξ}(s) − (b+ξ), built from the
//!   Taylor jets of the strong leaves with first derivatives in ξ. Along a
//!   base-point track the straightened map is F̃_n = φ_{b_{n+1}}∘F∘φ_{b_n}⁻¹.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arnold_model::{wrap_signed, Model, ModelParams, SectionPoint};
use crate::jet::{Dual2, Taylor};
use crate::nhim::{self, leaf_jets, LeafKind, NhimError};
use crate::numerics::{newton_solve, Mat};

pub const CHART_VERSION: u32 = 1;

/// Below this size of (ξ, s) the leaf chart propagates offsets through the
/// linearization at the leaf point instead of evaluating F in f64.
pub const LINEAR_OFFSET: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChartError {
    #[error("chart validation failed for item {item}: worst residual {worst:e}")]
    ChartValidationFailed { item: u8, worst: f64 },
    #[error("point left the chart domain: {0}")]
    LeftDomain(String),
    #[error(transparent)]
    Nhim(#[from] NhimError),
    #[error("chart inversion did not converge")]
    InversionFailed,
    #[error("chart file: {0}")]
    Format(String),
}

/// A point of V given by its absolute coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StraightenedPoint {
    pub x: [f64; 2],
    pub s: f64,
    pub u: f64,
}

/// A point of V given as offsets from a base point b of N: (b + dx, s, u).
/// Offsets keep full relative accuracy when dx and s are far below 1e-16.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Local {
    pub dx: [f64; 2],
    pub s: f64,
    pub u: f64,
}

impl Local {
    pub fn new(dx: [f64; 2], s: f64, u: f64) -> Self {
        Local { dx, s, u }
    }
    pub fn offset_size(&self) -> f64 {
        self.dx[0].abs().max(self.dx[1].abs()).max(self.s.abs())
    }
    #[cfg(test)]
    fn to_array(self) -> [f64; 4] {
        [self.dx[0], self.dx[1], self.s, self.u]
    }
    fn from_array(a: &[f64]) -> Self {
        Local { dx: [a[0], a[1]], s: a[2], u: a[3] }
    }
}

pub fn project_n(z: &StraightenedPoint) -> [f64; 2] {
    z.x
}

pub fn project_u(z: &StraightenedPoint) -> f64 {
    z.u
}

/// DF̃ at a point, rows and columns ordered (x₁, x₂, s, u).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockJacobian {
    pub m: [[f64; 4]; 4],
}

impl BlockJacobian {
    pub fn fx_x(&self) -> Mat {
        Mat::from_fn(2, 2, |i, j| self.m[i][j])
    }
    pub fn fx_s(&self) -> [f64; 2] {
        [self.m[0][2], self.m[1][2]]
    }
    pub fn fx_u(&self) -> [f64; 2] {
        [self.m[0][3], self.m[1][3]]
    }
    pub fn fs_x(&self) -> [f64; 2] {
        [self.m[2][0], self.m[2][1]]
    }
    pub fn fs_s(&self) -> f64 {
        self.m[2][2]
    }
    pub fn fs_u(&self) -> f64 {
        self.m[2][3]
    }
    pub fn fu_x(&self) -> [f64; 2] {
        [self.m[3][0], self.m[3][1]]
    }
    pub fn fu_s(&self) -> f64 {
        self.m[3][2]
    }
    pub fn fu_u(&self) -> f64 {
        self.m[3][3]
    }
    pub fn to_mat(&self) -> Mat {
        Mat::from_fn(4, 4, |i, j| self.m[i][j])
    }
    fn from_mat(a: &Mat) -> Self {
        BlockJacobian { m: std::array::from_fn(|i| std::array::from_fn(|j| a.get(i, j))) }
    }
    /// Largest |entry| among the blocks that vanish on N.
    pub fn off_diagonal_size(&self) -> f64 {
        let mut w = 0.0f64;
        for i in 0..4 {
            for j in 0..4 {
                let bi = if i < 2 { 0 } else { i - 1 };
                let bj = if j < 2 { 0 } else { j - 1 };
                if bi != bj {
                    w = w.max(self.m[i][j].abs());
                }
            }
        }
        w
    }
}

fn norm2(v: &[f64; 2]) -> f64 {
    (v[0] * v[0] + v[1] * v[1]).sqrt()
}

pub fn vec_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Common interface of the straightening charts.
pub trait Straightened: Send + Sync {
    fn chart_tol(&self) -> f64;
    fn varsigma(&self) -> f64;
    fn model(&self) -> &Model<f64>;
    /// F̃(b + z), as offsets from F_N(b).
    fn step(&self, b: [f64; 2], z: &Local) -> Result<Local, ChartError>;
    fn blocks(&self, b: [f64; 2], z: &Local) -> Result<BlockJacobian, ChartError>;
    /// φ⁻¹(b + z) and its derivative, columns (x₁, x₂, s, u).
    fn inverse(&self, b: [f64; 2], z: &Local) -> Result<(SectionPoint<f64>, [[f64; 4]; 4]), ChartError>;
    /// φ(y) as offsets from b.
    fn chart(&self, y: &SectionPoint<f64>, b: [f64; 2]) -> Result<Local, ChartError>;
}

pub fn straightened_map(c: &dyn Straightened, z: &StraightenedPoint) -> Result<StraightenedPoint, ChartError> {
    let w = c.step(z.x, &Local::new([0.0; 2], z.s, z.u))?;
    let b = nhim::shear(z.x, 1);
    Ok(StraightenedPoint { x: [b[0] + w.dx[0], b[1] + w.dx[1]], s: w.s, u: w.u })
}

pub fn block_jacobian(c: &dyn Straightened, z: &StraightenedPoint) -> Result<BlockJacobian, ChartError> {
    c.blocks(z.x, &Local::new([0.0; 2], z.s, z.u))
}

pub fn to_ambient(c: &dyn Straightened, z: &StraightenedPoint) -> Result<SectionPoint<f64>, ChartError> {
    Ok(c.inverse(z.x, &Local::new([0.0; 2], z.s, z.u))?.0)
}

pub fn to_chart(c: &dyn Straightened, y: &SectionPoint<f64>) -> Result<StraightenedPoint, ChartError> {
    let b = [y.theta2, y.r2];
    let z = c.chart(y, b)?;
    Ok(StraightenedPoint { x: [b[0] + z.dx[0], b[1] + z.dx[1]], s: z.s, u: z.u })
}

/// DF̃ pushed through the chart: Dφ(F(y))·DF(y)·Dφ⁻¹(z), used to validate
/// the closed-form blocks.
pub fn ambient_blocks(c: &dyn Straightened, b: [f64; 2], z: &Local) -> Result<BlockJacobian, ChartError> {
    let (y, dinv) = c.inverse(b, z)?;
    let (y1, t) = c.model().section_map_with_tangent_raw(&y);
    let b1 = nhim::shear(b, 1);
    let z1 = c.chart(&y1, b1)?;
    let (_, dinv1) = c.inverse(b1, &z1)?;
    let d1 = Mat::from_fn(4, 4, |i, j| dinv1[i][j]).inverse().map_err(|_| ChartError::InversionFailed)?;
    let j = d1.mul(&Mat::from_fn(4, 4, |i, k| t[i][k])).mul(&Mat::from_fn(4, 4, |i, k| dinv[i][k]));
    Ok(BlockJacobian::from_mat(&j))
}

// ---------------------------------------------------------------------------
// Product chart

/// Sparse bivariate polynomial with 2-vector coefficients, keyed (i, j) for sᶦuʲ.
type Poly2 = Vec<((usize, usize), [f64; 2])>;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProductChart {
    pub version: u32,
    pub params: ModelParams,
    pub order: usize,
    pub varsigma: f64,
    /// Columns e_s, e_u (unit) of the linear part.
    pub frame: [[f64; 2]; 2],
    pub lambda_s: f64,
    pub lambda_u: f64,
    /// K in eigen-coordinates; the ambient (θ₁, r₁) is frame·K̂(s, u).
    pub k_hat: Poly2,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub chart_tol: f64,
    pub validation: Vec<(u8, f64)>,
    #[serde(skip)]
    model: Option<Model<f64>>,
}

type Biv = Taylor<Taylor<f64>>;

fn biv_const(x: f64, n: usize) -> Biv {
    Taylor::constant(Taylor::constant(x, n), n)
}

fn biv_from(coeffs: &[((usize, usize), f64)], n: usize) -> Biv {
    let mut j = biv_const(0.0, n);
    for &((i, k), c) in coeffs {
        if i <= n && k <= n {
            j.c[k].c[i] += c;
        }
    }
    j
}

fn biv_coeff(j: &Biv, i: usize, k: usize) -> f64 {
    j.c[k].c[i]
}

impl ProductChart {
    pub fn build(params: &ModelParams, order: usize, varsigma: f64) -> Result<Self, ChartError> {
        if params.mu != 0.0 {
            return Err(ChartError::Format("the product chart needs μ = 0".into()));
        }
        let order = order.max(1);
        let model = Model::new(params, &0.0);
        let fr = nhim::splitting_frame(&model, 0.0, 0.0)?;
        let frame = [[fr.e_s[0], fr.e_u[0]], [fr.e_s[1], fr.e_u[1]]];
        let e = Mat::from_rows(&[&frame[0], &frame[1]]);
        let einv = e.inverse().map_err(|_| ChartError::InversionFailed)?;
        let mj: Model<Biv> = Model::new(params, &biv_const(0.0, order));
        let ls = fr.lambda_s;
        let lu = fr.lambda_u;
        let mut k_hat: Poly2 = vec![((1, 0), [1.0, 0.0]), ((0, 1), [0.0, 1.0])];
        let mut alpha = vec![ls];
        let mut beta = vec![lu];
        for n in 2..=order {
            let (r0, r1) = Self::residual_jets(&mj, &e, &einv, &k_hat, &alpha, &beta, order);
            for i in 0..=n {
                let j = n - i;
                let rs = biv_coeff(&r0, i, j);
                let ru = biv_coeff(&r1, i, j);
                let lam = ls.powi(i as i32) * lu.powi(j as i32);
                let mut dk = [0.0, 0.0];
                if i == j + 1 {
                    while alpha.len() <= j {
                        alpha.push(0.0);
                    }
                    alpha[j] += rs;
                } else {
                    dk[0] = -rs / (ls - lam);
                }
                if j == i + 1 {
                    while beta.len() <= i {
                        beta.push(0.0);
                    }
                    beta[i] += ru;
                } else {
                    dk[1] = -ru / (lu - lam);
                }
                if dk[0] != 0.0 || dk[1] != 0.0 {
                    k_hat.push(((i, j), dk));
                }
            }
        }
        let mut c = ProductChart {
            version: CHART_VERSION,
            params: *params,
            order,
            varsigma,
            frame,
            lambda_s: ls,
            lambda_u: lu,
            k_hat,
            alpha,
            beta,
            chart_tol: 0.0,
            validation: vec![],
            model: Some(model),
        };
        c.validate()?;
        Ok(c)
    }

    /// Eigen-coordinate jets of P∘K − K∘Λ.
    #[allow(clippy::too_many_arguments)]
    fn residual_jets(mj: &Model<Biv>, e: &Mat, einv: &Mat, k_hat: &Poly2, alpha: &[f64], beta: &[f64], n: usize) -> (Biv, Biv) {
        let k0: Vec<_> = k_hat.iter().map(|&(ij, c)| (ij, c[0])).collect();
        let k1: Vec<_> = k_hat.iter().map(|&(ij, c)| (ij, c[1])).collect();
        let kh0 = biv_from(&k0, n);
        let kh1 = biv_from(&k1, n);
        let th = kh0.clone() * e.get(0, 0) + kh1.clone() * e.get(0, 1);
        let r = kh0 * e.get(1, 0) + kh1 * e.get(1, 1);
        let z = biv_const(0.0, n);
        let img = mj.section_map_raw(&SectionPoint::new(th, r, z.clone(), z));
        let p0 = img.theta1.clone() * einv.get(0, 0) + img.r1.clone() * einv.get(0, 1);
        let p1 = img.theta1 * einv.get(1, 0) + img.r1 * einv.get(1, 1);
        // Λ as jets
        let lam_s = biv_from(&alpha.iter().enumerate().map(|(j, &a)| ((j + 1, j), a)).collect::<Vec<_>>(), n);
        let lam_u = biv_from(&beta.iter().enumerate().map(|(j, &b)| ((j, j + 1), b)).collect::<Vec<_>>(), n);
        let mut c0 = biv_const(0.0, n);
        let mut c1 = biv_const(0.0, n);
        for &((i, j), c) in k_hat {
            let mut m = biv_const(1.0, n);
            for _ in 0..i {
                m = m * lam_s.clone();
            }
            for _ in 0..j {
                m = m * lam_u.clone();
            }
            c0 += m.clone() * c[0];
            c1 += m * c[1];
        }
        (p0 - c0, p1 - c1)
    }

    fn model_ref(&self) -> &Model<f64> {
        self.model.as_ref().expect("chart model not attached")
    }

    /// Attaches the integrator after deserialization.
    pub fn attach(&mut self) {
        self.model = Some(Model::new(&self.params, &0.0));
    }

    fn poly(w: &[f64], x: f64) -> (f64, f64) {
        let mut v = 0.0;
        let mut d = 0.0;
        for (k, &c) in w.iter().enumerate().rev() {
            d = d * x + v;
            v = v * x + c;
            let _ = k;
        }
        (v, d)
    }

    pub fn alpha(&self, w: f64) -> (f64, f64) {
        Self::poly(&self.alpha, w)
    }

    pub fn beta(&self, w: f64) -> (f64, f64) {
        Self::poly(&self.beta, w)
    }

    /// Normal form Λ(s, u).
    pub fn normal_form(&self, s: f64, u: f64) -> (f64, f64) {
        let w = s * u;
        (s * self.alpha(w).0, u * self.beta(w).0)
    }

    /// K(s, u) in (θ₁, r₁) and its Jacobian.
    pub fn conjugacy(&self, s: f64, u: f64) -> ([f64; 2], [[f64; 2]; 2]) {
        let mut v = [0.0; 2];
        let mut d = [[0.0; 2]; 2];
        for &((i, j), c) in &self.k_hat {
            let m = s.powi(i as i32) * u.powi(j as i32);
            let ms = if i > 0 { i as f64 * s.powi(i as i32 - 1) * u.powi(j as i32) } else { 0.0 };
            let mu = if j > 0 { j as f64 * s.powi(i as i32) * u.powi(j as i32 - 1) } else { 0.0 };
            for a in 0..2 {
                v[a] += c[a] * m;
                d[a][0] += c[a] * ms;
                d[a][1] += c[a] * mu;
            }
        }
        let f = &self.frame;
        let am = [f[0][0] * v[0] + f[0][1] * v[1], f[1][0] * v[0] + f[1][1] * v[1]];
        let ad = std::array::from_fn(|r| std::array::from_fn(|cc| f[r][0] * d[0][cc] + f[r][1] * d[1][cc]));
        (am, ad)
    }

    pub fn conjugacy_inverse(&self, th: f64, r: f64) -> Result<(f64, f64), ChartError> {
        let e = Mat::from_rows(&[&self.frame[0], &self.frame[1]]);
        let x0 = e.solve(&[th, r]).map_err(|_| ChartError::InversionFailed)?;
        let f = |z: &[f64]| {
            let (v, _) = self.conjugacy(z[0], z[1]);
            vec![v[0] - th, v[1] - r]
        };
        let j = |z: &[f64]| {
            let (_, d) = self.conjugacy(z[0], z[1]);
            Mat::from_rows(&[&d[0], &d[1]])
        };
        let z = newton_solve(f, j, &x0, 1e-15, 50).map_err(|_| ChartError::InversionFailed)?;
        Ok((z[0], z[1]))
    }

    /// Worst conjugacy defect |P∘K − K∘Λ| over points of the ball of radius
    /// ς whose normal-form image stays in the ball.
    pub fn conjugacy_defect(&self, n: usize) -> f64 {
        let m = self.model_ref();
        let rs = self.varsigma;
        let ru = self.varsigma / self.lambda_u;
        let mut w = 0.0f64;
        for i in 0..=n {
            for j in 0..=n {
                let s = rs * (2.0 * i as f64 / n as f64 - 1.0);
                let u = ru * (2.0 * j as f64 / n as f64 - 1.0);
                let (k, _) = self.conjugacy(s, u);
                let p = m.section_map_raw(&SectionPoint::new(k[0], k[1], 0.0, 0.0));
                let (ls, lu) = self.normal_form(s, u);
                let (q, _) = self.conjugacy(ls, lu);
                w = w.max((p.theta1 - q[0]).abs()).max((p.r1 - q[1]).abs());
            }
        }
        w
    }

    /// Checks the straightening items against leaves computed independently
    /// (nhim jets of order 10) and records chart_tol.
    fn validate(&mut self) -> Result<(), ChartError> {
        let m = self.model_ref().clone();
        let mut items = vec![];
        let base = [0.7, 0.3];
        let lu = nhim::local_leaf(&m, base[0], base[1], LeafKind::Unstable, 10)?;
        let ls = nhim::local_leaf(&m, base[0], base[1], LeafKind::Stable, 10)?;
        let (mut w2, mut w3, mut w4, mut w5) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for k in 0..=40 {
            let t = self.varsigma * (k as f64 / 20.0 - 1.0);
            for (leaf, is_u) in [(&ls, false), (&lu, true)] {
                let p = leaf.eval(t);
                let z = to_chart(self, &p)?;
                let dx = norm2(&[wrap_signed(z.x[0] - base[0]), z.x[1] - base[1]]);
                if is_u {
                    w3 = w3.max(z.s.abs());
                    w5 = w5.max(dx);
                } else {
                    w2 = w2.max(z.u.abs());
                    w4 = w4.max(dx);
                }
            }
        }
        items.push((1u8, 0.0));
        items.push((2, w2));
        items.push((3, w3));
        items.push((4, w4));
        items.push((5, w5));
        let defect = self.conjugacy_defect(12);
        items.push((6, defect));
        self.chart_tol = items.iter().map(|x| x.1).fold(0.0, f64::max);
        self.validation = items;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string_pretty(self).expect("chart serializes")
    }

    pub fn from_text(s: &str) -> Result<Self, ChartError> {
        let mut c: ProductChart = serde_json::from_str(s).map_err(|e| ChartError::Format(e.to_string()))?;
        if c.version != CHART_VERSION {
            return Err(ChartError::Format(format!("unsupported chart version {}", c.version)));
        }
        c.attach();
        Ok(c)
    }
}

impl Straightened for ProductChart {
    fn chart_tol(&self) -> f64 {
        self.chart_tol
    }
    fn varsigma(&self) -> f64 {
        self.varsigma
    }
    fn model(&self) -> &Model<f64> {
        self.model_ref()
    }
    fn step(&self, _b: [f64; 2], z: &Local) -> Result<Local, ChartError> {
        let (s1, u1) = self.normal_form(z.s, z.u);
        Ok(Local { dx: [z.dx[0] + 2.0 * PI * z.dx[1], z.dx[1]], s: s1, u: u1 })
    }
    fn blocks(&self, _b: [f64; 2], z: &Local) -> Result<BlockJacobian, ChartError> {
        let w = z.s * z.u;
        let (a, da) = self.alpha(w);
        let (b, db) = self.beta(w);
        let mut m = [[0.0; 4]; 4];
        m[0][0] = 1.0;
        m[0][1] = 2.0 * PI;
        m[1][1] = 1.0;
        m[2][2] = a + w * da;
        m[2][3] = z.s * z.s * da;
        m[3][2] = z.u * z.u * db;
        m[3][3] = b + w * db;
        Ok(BlockJacobian { m })
    }
    fn inverse(&self, b: [f64; 2], z: &Local) -> Result<(SectionPoint<f64>, [[f64; 4]; 4]), ChartError> {
        let (k, d) = self.conjugacy(z.s, z.u);
        let mut t = [[0.0; 4]; 4];
        t[0][2] = d[0][0];
        t[0][3] = d[0][1];
        t[1][2] = d[1][0];
        t[1][3] = d[1][1];
        t[2][0] = 1.0;
        t[3][1] = 1.0;
        Ok((SectionPoint::new(k[0], k[1], b[0] + z.dx[0], b[1] + z.dx[1]), t))
    }
    fn chart(&self, y: &SectionPoint<f64>, b: [f64; 2]) -> Result<Local, ChartError> {
        let (s, u) = self.conjugacy_inverse(y.theta1, y.r1)?;
        Ok(Local { dx: [y.theta2 - b[0], y.r2 - b[1]], s, u })
    }
}

// ---------------------------------------------------------------------------
// Leaf chart

fn at(d: &Dual2, xi: &[f64; 2]) -> f64 {
    d.v + d.d[0] * xi[0] + d.d[1] * xi[1]
}

/// Leaf jets at a base point with first derivatives in the base.
#[derive(Clone, Debug)]
pub struct LocalFrame {
    pub base: [f64; 2],
    pub lu: Vec<[Dual2; 4]>,
    pub ls: Vec<[Dual2; 4]>,
    pub lambda_u: Dual2,
    pub lambda_s: Dual2,
}

impl LocalFrame {
    /// φ_b⁻¹(b+ξ, s, u) and its derivative, columns (ξ₁, ξ₂, s, u).
    pub fn inverse(&self, xi: &[f64; 2], s: f64, u: f64) -> ([f64; 4], [[f64; 4]; 4]) {
        let n = self.lu.len();
        let pw = |t: f64| {
            let mut p = vec![1.0; n];
            for k in 1..n {
                p[k] = p[k - 1] * t;
            }
            p
        };
        let (pu, ps) = (pw(u), pw(s));
        let mut y = [0.0; 4];
        let mut d = [[0.0; 4]; 4];
        for i in 0..4 {
            for k in 0..n {
                let cu = &self.lu[k][i];
                y[i] += at(cu, xi) * pu[k];
                d[i][0] += cu.d[0] * pu[k];
                d[i][1] += cu.d[1] * pu[k];
                if k >= 1 {
                    let cs = &self.ls[k][i];
                    y[i] += at(cs, xi) * ps[k];
                    d[i][0] += cs.d[0] * ps[k];
                    d[i][1] += cs.d[1] * ps[k];
                    d[i][2] += at(cs, xi) * k as f64 * ps[k - 1];
                    d[i][3] += at(cu, xi) * k as f64 * pu[k - 1];
                }
            }
        }
        (y, d)
    }
}

pub struct LeafChart {
    pub params: ModelParams,
    pub order: usize,
    pub varsigma: f64,
    pub chart_tol: f64,
    pub validation: Vec<(u8, f64)>,
    model: Model<f64>,
    model_d: Model<Dual2>,
    model_j: Model<Taylor<Dual2>>,
    cache: Mutex<HashMap<(u64, u64), Arc<LocalFrame>>>,
}

impl LeafChart {
    pub fn build(params: &ModelParams, order: usize, varsigma: f64) -> Result<Self, ChartError> {
        let order = order.max(2);
        let mut c = LeafChart {
            params: *params,
            order,
            varsigma,
            chart_tol: 0.0,
            validation: vec![],
            model: Model::new(params, &0.0),
            model_d: Model::new(params, &Dual2::cst(0.0)),
            model_j: Model::new(params, &Taylor::constant(Dual2::cst(0.0), order)),
            cache: Mutex::new(HashMap::new()),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn frame(&self, b: [f64; 2]) -> Arc<LocalFrame> {
        let key = (b[0].to_bits(), b[1].to_bits());
        if let Some(f) = self.cache.lock().unwrap().get(&key) {
            return f.clone();
        }
        let th = Dual2::new(b[0], [1.0, 0.0]);
        let r = Dual2::new(b[1], [0.0, 1.0]);
        let (lu, lam_u) = leaf_jets(&self.model_d, &self.model_j, &th, &r, LeafKind::Unstable, self.order);
        let (ls, lam_s) = leaf_jets(&self.model_d, &self.model_j, &th, &r, LeafKind::Stable, self.order);
        let f = Arc::new(LocalFrame { base: b, lu, ls, lambda_u: lam_u, lambda_s: lam_s });
        self.cache.lock().unwrap().insert(key, f.clone());
        f
    }

    fn chart_in(&self, f: &LocalFrame, y: &SectionPoint<f64>) -> Result<Local, ChartError> {
        let b = f.base;
        let target = [y.theta1, y.r1, b[0] + wrap_signed(y.theta2 - b[0]), y.r2];
        let e = Mat::from_rows(&[&[f.ls[1][0].v, f.lu[1][0].v], &[f.ls[1][1].v, f.lu[1][1].v]]);
        let su = e.solve(&[y.theta1, y.r1]).map_err(|_| ChartError::InversionFailed)?;
        let x0 = [target[2] - b[0], target[3] - b[1], su[0], su[1]];
        let func = |z: &[f64]| {
            let (p, _) = f.inverse(&[z[0], z[1]], z[2], z[3]);
            (0..4).map(|i| p[i] - target[i]).collect::<Vec<_>>()
        };
        let jac = |z: &[f64]| {
            let (_, d) = f.inverse(&[z[0], z[1]], z[2], z[3]);
            Mat::from_fn(4, 4, |i, j| d[i][j])
        };
        let z = newton_solve(func, jac, &x0, 1e-15, 60).map_err(|_| ChartError::InversionFailed)?;
        Ok(Local::from_array(&z))
    }

    /// Blocks of F̃ at (b + z) evaluated through the local charts.
    fn full_blocks(&self, b: [f64; 2], z: &Local) -> Result<BlockJacobian, ChartError> {
        ambient_blocks(self, b, z)
    }

    /// Worst lamination-invariance residual over |τ| ≤ ς at a few bases.
    pub fn leaf_defect(&self, bases: &[[f64; 2]], n: usize) -> f64 {
        let mut w = 0.0f64;
        for &b in bases {
            let f0 = self.frame(b);
            let f1 = self.frame(nhim::shear(b, 1));
            let fm = self.frame(nhim::shear(b, -1));
            let lu = f0.lambda_u.v;
            let lsm = fm.lambda_s.v;
            for k in 0..=n {
                let t = self.varsigma * (2.0 * k as f64 / n as f64 - 1.0);
                let (p, _) = f0.inverse(&[0.0; 2], 0.0, t / lu);
                let q = self.model.section_map_raw(&SectionPoint::from_array(p));
                let (r, _) = f1.inverse(&[0.0; 2], 0.0, t);
                // F⁻¹(L^s_b(λ_s(F⁻¹b)·t)) against L^s_{F⁻¹b}(t)
                let (ps, _) = f0.inverse(&[0.0; 2], lsm * t, 0.0);
                let qs = self.model.section_map_inv_raw(&SectionPoint::from_array(ps));
                let (rs, _) = fm.inverse(&[0.0; 2], t, 0.0);
                let qa = q.to_array();
                let qsa = qs.to_array();
                for i in 0..4 {
                    w = w.max((qa[i] - r[i]).abs()).max((qsa[i] - rs[i]).abs());
                }
            }
        }
        w
    }

    fn validate(&mut self) -> Result<(), ChartError> {
        let bases = [[0.3, 0.25], [2.0, 0.6]];
        let leaf = self.leaf_defect(&bases, 16);
        // round trip φ(φ⁻¹(z)) = z
        let mut rt = 0.0f64;
        for &b in &bases {
            let f = self.frame(b);
            for &(s, u) in &[(0.05, 0.0), (0.0, 0.05), (0.03, -0.04), (-0.1, 0.1)] {
                let xi = [1e-4, -2e-4];
                let (p, _) = f.inverse(&xi, s * self.varsigma / 0.1, u * self.varsigma / 0.1);
                let z = self.chart_in(&f, &SectionPoint::from_array(p))?;
                rt = rt.max((z.dx[0] - xi[0]).abs()).max((z.dx[1] - xi[1]).abs());
                rt = rt.max((z.s - s * self.varsigma / 0.1).abs()).max((z.u - u * self.varsigma / 0.1).abs());
            }
        }
        self.validation = vec![(1, 0.0), (2, leaf), (3, leaf), (4, leaf), (5, leaf), (7, rt)];
        if rt > 1e-10 {
            return Err(ChartError::ChartValidationFailed { item: 7, worst: rt });
        }
        self.chart_tol = leaf;
        Ok(())
    }

    /// Linear part of F̃ in (ξ, s) at the leaf point (b, 0, u), plus the
    /// rates of change of the u-column along ξ and s.
    fn linearization(&self, b: [f64; 2], u: f64) -> Result<(BlockJacobian, [[f64; 4]; 3]), ChartError> {
        let z0 = Local::new([0.0; 2], 0.0, u);
        let j0 = self.full_blocks(b, &z0)?;
        let h = 1e-5;
        let mut dcol = [[0.0; 4]; 3];
        for (k, dirv) in [[h, 0.0, 0.0], [0.0, h, 0.0], [0.0, 0.0, h]].iter().enumerate() {
            let zp = Local::new([dirv[0], dirv[1]], dirv[2], u);
            let zm = Local::new([-dirv[0], -dirv[1]], -dirv[2], u);
            let jp = self.full_blocks(b, &zp)?;
            let jm = self.full_blocks(b, &zm)?;
            for r in 0..4 {
                dcol[k][r] = (jp.m[r][3] - jm.m[r][3]) / (2.0 * h);
            }
        }
        // ∂uF̃_{x,s} vanishes on all of {s = 0}, so its ξ-derivatives do too
        for row in dcol.iter_mut().take(2) {
            row[..3].fill(0.0);
        }
        // exact structure at the leaf point: F̃ keeps the u-leaf and its u-column is (0,0,0,∂uF̃u)
        // and on {s = 0} the x-row is the shear and the s-row has no x-dependence
        let mut j = j0;
        for r in 0..3 {
            j.m[r][3] = 0.0;
        }
        j.m[0][0] = 1.0;
        j.m[0][1] = 2.0 * std::f64::consts::PI;
        j.m[1][0] = 0.0;
        j.m[1][1] = 1.0;
        j.m[2][0] = 0.0;
        j.m[2][1] = 0.0;
        Ok((j, dcol))
    }
}

impl Straightened for LeafChart {
    fn chart_tol(&self) -> f64 {
        self.chart_tol
    }
    fn varsigma(&self) -> f64 {
        self.varsigma
    }
    fn model(&self) -> &Model<f64> {
        &self.model
    }
    fn step(&self, b: [f64; 2], z: &Local) -> Result<Local, ChartError> {
        if z.offset_size() <= LINEAR_OFFSET {
            let (j, _) = self.linearization(b, z.u)?;
            let f0 = self.frame(b);
            let v = [z.dx[0], z.dx[1], z.s];
            let mut out = [0.0; 4];
            for r in 0..4 {
                out[r] = (0..3).map(|c| j.m[r][c] * v[c]).sum();
            }
            out[3] += f0.lambda_u.v * z.u;
            return Ok(Local::from_array(&out));
        }
        let (y, _) = self.inverse(b, z)?;
        let y1 = self.model.section_map_raw(&y);
        self.chart(&y1, nhim::shear(b, 1))
    }
    fn blocks(&self, b: [f64; 2], z: &Local) -> Result<BlockJacobian, ChartError> {
        if z.offset_size() <= LINEAR_OFFSET {
            let (mut j, dcol) = self.linearization(b, z.u)?;
            let v = [z.dx[0], z.dx[1], z.s];
            let f0 = self.frame(b);
            for r in 0..3 {
                j.m[r][3] = (0..3).map(|k| dcol[k][r] * v[k]).sum();
            }
            let _ = f0;
            // the s- and x-columns change at first order as well; their
            // variation only enters the tangent recursion at second order
            j.m[3][3] += (0..3).map(|k| dcol[k][3] * v[k]).sum::<f64>();
            return Ok(j);
        }
        self.full_blocks(b, z)
    }
    fn inverse(&self, b: [f64; 2], z: &Local) -> Result<(SectionPoint<f64>, [[f64; 4]; 4]), ChartError> {
        if z.s.abs() > self.varsigma * 1.000001 || z.u.abs() > self.varsigma * 1.000001 {
            return Err(ChartError::LeftDomain(format!("(s, u) = ({}, {})", z.s, z.u)));
        }
        let f = self.frame(b);
        let (y, d) = f.inverse(&z.dx, z.s, z.u);
        Ok((SectionPoint::from_array(y), d))
    }
    fn chart(&self, y: &SectionPoint<f64>, b: [f64; 2]) -> Result<Local, ChartError> {
        let f = self.frame(b);
        self.chart_in(&f, y)
    }
}

/// A chart of either construction.
pub enum Chart {
    Product(ProductChart),
    Leaf(LeafChart),
}

impl Chart {
    pub fn as_dyn(&self) -> &dyn Straightened {
        match self {
            Chart::Product(c) => c,
            Chart::Leaf(c) => c,
        }
    }
    pub fn validation(&self) -> &[(u8, f64)] {
        match self {
            Chart::Product(c) => &c.validation,
            Chart::Leaf(c) => &c.validation,
        }
    }
}

/// Builds the product chart at μ = 0 and the leaf chart otherwise, failing
/// when a straightening item exceeds `tol_target`.
pub fn build_chart(params: &ModelParams, order: usize, varsigma: f64, tol_target: f64) -> Result<Chart, ChartError> {
    let c = if params.mu == 0.0 {
        Chart::Product(ProductChart::build(params, order, varsigma)?)
    } else {
        Chart::Leaf(LeafChart::build(params, order.max(8), varsigma)?)
    };
    for &(item, w) in c.validation() {
        if w > tol_target {
            return Err(ChartError::ChartValidationFailed { item, worst: w });
        }
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(eps: f64, mu: f64) -> ModelParams {
        ModelParams::new(eps, mu, 256, 4).unwrap()
    }

    #[test]
    fn product_chart_items_at_eps_one() {
        let c = ProductChart::build(&params(1.0, 0.0), 3, 0.2).unwrap();
        for &(item, w) in &c.validation {
            assert!(w <= 1e-4, "item {item}: {w:e}");
        }
        let z = StraightenedPoint { x: [0.4, 0.7], s: 0.0, u: 0.0 };
        let y = to_ambient(&c, &z).unwrap();
        assert_eq!(y.to_array(), [0.0, 0.0, 0.4, 0.7]);
    }

    #[test]
    fn product_chart_round_trip() {
        let c = ProductChart::build(&params(1.0, 0.0), 3, 0.2).unwrap();
        for &(s, u) in &[(0.1, 0.0), (0.0, 0.1), (-0.15, 0.12), (0.2, -0.2)] {
            let z = StraightenedPoint { x: [1.0, 0.5], s, u };
            let back = to_chart(&c, &to_ambient(&c, &z).unwrap()).unwrap();
            assert!((back.s - s).abs() < 1e-10 && (back.u - u).abs() < 1e-10);
            assert!((back.x[0] - 1.0).abs() < 1e-12 && (back.x[1] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn product_straightened_map_examples() {
        let c = ProductChart::build(&params(1.0, 0.0), 3, 0.2).unwrap();
        let z = StraightenedPoint { x: [0.3, 0.25], s: 0.0, u: 0.0 };
        let w = straightened_map(&c, &z).unwrap();
        assert_eq!(w.x, [0.3 + 2.0 * PI * 0.25, 0.25]);
        assert_eq!((w.s, w.u), (0.0, 0.0));
        let w = straightened_map(&c, &StraightenedPoint { s: 0.1, ..z }).unwrap();
        assert!(w.u.abs() <= c.chart_tol);
        let j = block_jacobian(&c, &z).unwrap();
        assert!(j.off_diagonal_size() <= c.chart_tol);
        assert!((j.fs_s() - (-2.0 * PI).exp()).abs() < 1e-9);
    }

    #[test]
    fn product_blocks_match_ambient_pushforward() {
        let c = ProductChart::build(&params(1.0, 0.0), 5, 0.2).unwrap();
        for &(s, u) in &[(0.01, 1e-4), (0.05, -2e-4), (0.0, 3e-4)] {
            let z = Local::new([0.0; 2], s, u);
            let a = c.blocks([0.5, 0.5], &z).unwrap();
            let b = ambient_blocks(&c, [0.5, 0.5], &z).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    let scale = 1.0 + a.m[i][j].abs();
                    assert!((a.m[i][j] - b.m[i][j]).abs() <= 1e-3 * scale, "{i}{j}: {} vs {}", a.m[i][j], b.m[i][j]);
                }
            }
        }
    }

    #[test]
    fn serialization_round_trip() {
        let c = ProductChart::build(&params(1.0, 0.0), 3, 0.2).unwrap();
        let t = c.to_text();
        let d = ProductChart::from_text(&t).unwrap();
        assert_eq!(d.k_hat, c.k_hat);
        assert_eq!(d.alpha, c.alpha);
        let z = StraightenedPoint { x: [0.1, 0.2], s: 0.05, u: 0.01 };
        assert_eq!(to_ambient(&c, &z).unwrap(), to_ambient(&d, &z).unwrap());
        assert!(ProductChart::from_text(&t.replace("\"version\": 1", "\"version\": 9")).is_err());
    }

    #[test]
    fn leaf_chart_structure() {
        let c = LeafChart::build(&params(1.0, 1e-3), 8, 0.2).unwrap();
        assert!(c.chart_tol < 1e-8, "{}", c.chart_tol);
        let b = [0.3, 0.25];
        // N fixed pointwise and mapped by the shear
        let w = c.step(b, &Local::new([0.0; 2], 0.0, 0.0)).unwrap();
        assert!(w.offset_size() < 1e-12 && w.u.abs() < 1e-12);
        // stable leaf stays in u = 0
        let w = c.step(b, &Local::new([0.0; 2], 0.05, 0.0)).unwrap();
        assert!(w.u.abs() < 1e-10 && w.dx[0].abs() < 1e-10 && w.dx[1].abs() < 1e-10);
        // unstable leaf stays in s = 0 over its own base
        let w = c.step(b, &Local::new([0.0; 2], 0.0, 1e-4)).unwrap();
        assert!(w.s.abs() < 1e-10 && w.offset_size() < 1e-10);
        // on N the blocks are diagonal
        let j = c.blocks(b, &Local::default()).unwrap();
        assert!(j.off_diagonal_size() < 1e-8, "{:?}", j);
    }

    #[test]
    fn leaf_chart_fd_cross_check_and_linear_mode() {
        let c = LeafChart::build(&params(1.0, 1e-3), 8, 0.2).unwrap();
        let b = [1.1, 0.4];
        let z = Local::new([2e-3, -1e-3], 4e-3, 2e-4);
        let j = c.blocks(b, &z).unwrap();
        let h = 1e-6;
        for k in 0..4 {
            let mut zp = z.to_array();
            let mut zm = z.to_array();
            zp[k] += h;
            zm[k] -= h;
            let fp = c.step(b, &Local::from_array(&zp)).unwrap().to_array();
            let fm = c.step(b, &Local::from_array(&zm)).unwrap().to_array();
            for r in 0..4 {
                let fd = (fp[r] - fm[r]) / (2.0 * h);
                assert!((fd - j.m[r][k]).abs() <= 1e-5 * (1.0 + fd.abs()), "({r},{k}) {fd} {}", j.m[r][k]);
            }
        }
        // linearized and full evaluation agree near the switch
        let z = Local::new([1e-7, 5e-8], 1e-7, 3e-4);
        let full = {
            let (y, _) = c.inverse(b, &z).unwrap();
            c.chart(&c.model().section_map_raw(&y), nhim::shear(b, 1)).unwrap()
        };
        let lin = c.step(b, &z).unwrap();
        for (a, bb) in full.to_array().iter().zip(lin.to_array()) {
            assert!((a - bb).abs() <= 1e-9 * (1.0 + a.abs()).max(1e-7), "{a} {bb}");
        }
    }
}
