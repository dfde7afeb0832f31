//! Graph-transform experiments for the λ-lemma in straightened coordinates.
//!
//! A transverse disk through P = (P₀, s₀, 0) is written as a graph
//! u ↦ ξ(u) = (X(u), S(u)) over B_δ and pushed forward by F̃. Values are kept
//! as offsets from the base-point track P₀ⁿ, so convergence can be followed
//! far below f64 resolution of the absolute coordinates.

use thiserror::Error;

use crate::arnold_model::{section_dist, SectionPoint};
use crate::chart::{vec_norm, ChartError, Local, Straightened};
use crate::nhim::{self, HyperbolicityConstants};
use crate::numerics::{op_norm, Mat};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("disk is not transverse to the stable manifold at P (|du/dt|/|t| = {0:e})")]
    NotTransverse(f64),
    #[error("disk folds over u = {0:e}")]
    FoldDetected(f64),
    #[error("graph lost at iteration {n}: G is not injective on the samples")]
    GraphLost { n: usize },
    #[error("image of G does not cover B_δ at iteration {n} (radius {radius:e}, δ = {delta:e})")]
    ImageTooSmall { n: usize, radius: f64, delta: f64 },
    #[error("{which} violated at u = {u:e} (margin {margin:e})")]
    BoundViolated { which: String, u: f64, margin: f64 },
    #[error(transparent)]
    Chart(#[from] ChartError),
}

/// A parametric disk through P; t = 0 corresponds to P.
pub trait Disk {
    /// Ambient point and d/dt at parameter t.
    fn eval(&self, t: f64) -> (SectionPoint<f64>, [f64; 4]);
    /// Parameter range sampled when fitting.
    fn range(&self) -> (f64, f64);
}

/// A disk given in chart coordinates as polynomials in t, u(t) = t:
/// X(t) = P₀ + x₁t + x₂t², S(t) = s₀ + s₁t + s₂t². Its ambient image is
/// obtained through φ⁻¹.
pub struct ChartDisk<'a> {
    pub chart: &'a dyn Straightened,
    pub base: [f64; 2],
    pub x1: [f64; 2],
    pub x2: [f64; 2],
    pub s0: f64,
    pub s1: f64,
    pub s2: f64,
    /// du/dt; zero gives a disk tangent to W̃^s(N).
    pub u1: f64,
    pub half_width: f64,
}

impl ChartDisk<'_> {
    fn local(&self, t: f64) -> (Local, [f64; 4]) {
        let z = Local::new(
            [self.x1[0] * t + self.x2[0] * t * t, self.x1[1] * t + self.x2[1] * t * t],
            self.s0 + self.s1 * t + self.s2 * t * t,
            self.u1 * t + if self.u1 == 0.0 { t * t } else { 0.0 },
        );
        let d = [
            self.x1[0] + 2.0 * self.x2[0] * t,
            self.x1[1] + 2.0 * self.x2[1] * t,
            self.s1 + 2.0 * self.s2 * t,
            if self.u1 == 0.0 { 2.0 * t } else { self.u1 },
        ];
        (z, d)
    }
}

impl Disk for ChartDisk<'_> {
    fn eval(&self, t: f64) -> (SectionPoint<f64>, [f64; 4]) {
        let (z, d) = self.local(t);
        let (y, dinv) = self.chart.inverse(self.base, &z).expect("disk inside the chart");
        let tan = std::array::from_fn(|i| (0..4).map(|j| dinv[i][j] * d[j]).sum());
        (y, tan)
    }
    fn range(&self) -> (f64, f64) {
        (-self.half_width, self.half_width)
    }
}

/// The graph ξ_n over the fixed grid of B_δ, as offsets from P₀ⁿ.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphCurve {
    pub n: usize,
    pub delta: f64,
    pub base: [f64; 2],
    pub u: Vec<f64>,
    pub x: Vec<[f64; 2]>,
    pub s: Vec<f64>,
    pub xp: Vec<[f64; 2]>,
    pub sp: Vec<f64>,
}

fn n2(v: &[f64; 2]) -> f64 {
    (v[0] * v[0] + v[1] * v[1]).sqrt()
}

impl GraphCurve {
    /// The straightened leaf through P₀: ξ ≡ (P₀, 0), ξ' ≡ 0.
    pub fn leaf(base: [f64; 2], delta: f64, nodes: usize) -> Self {
        let u = grid(delta, nodes);
        let k = u.len();
        GraphCurve { n: 0, delta, base, u, x: vec![[0.0; 2]; k], s: vec![0.0; k], xp: vec![[0.0; 2]; k], sp: vec![0.0; k] }
    }

    /// ‖ξ'‖ = sup_u max(‖X'‖, ‖S'‖).
    pub fn xi_prime_norm(&self) -> f64 {
        self.xp.iter().zip(&self.sp).map(|(a, b)| n2(a).max(b.abs())).fold(0.0, f64::max)
    }

    pub fn sup_s(&self) -> f64 {
        self.s.iter().map(|x| x.abs()).fold(0.0, f64::max)
    }

    /// Node closest to u = 0.
    pub fn center(&self) -> usize {
        self.u.len() / 2
    }

    /// sup_u |ξ(u) − ξ(0)|.
    pub fn oscillation(&self) -> f64 {
        let c = self.center();
        (0..self.u.len())
            .map(|j| vec_norm(&[self.x[j][0] - self.x[c][0], self.x[j][1] - self.x[c][1], self.s[j] - self.s[c]]))
            .fold(0.0, f64::max)
    }

    /// sup_u d(ξ(u), (P₀ⁿ, 0)), with P₀ⁿ given as an offset from the base.
    pub fn c0_distance(&self, p0: [f64; 2]) -> f64 {
        (0..self.u.len()).map(|j| vec_norm(&[self.x[j][0] - p0[0], self.x[j][1] - p0[1], self.s[j]])).fold(0.0, f64::max)
    }

    /// Cubic Hermite interpolation of (X, S) and of their derivatives.
    fn interp(&self, u: f64) -> (Local, [f64; 3]) {
        let k = self.u.len();
        let mut i = match self.u.binary_search_by(|p| p.partial_cmp(&u).unwrap()) {
            Ok(i) => i,
            Err(i) => i.max(1) - 1,
        };
        i = i.min(k - 2);
        let (u0, u1) = (self.u[i], self.u[i + 1]);
        let h = u1 - u0;
        let t = (u - u0) / h;
        let (h00, h10, h01, h11) = (2.0 * t * t * t - 3.0 * t * t + 1.0, t * t * t - 2.0 * t * t + t, -2.0 * t * t * t + 3.0 * t * t, t * t * t - t * t);
        let (d00, d10, d01, d11) = ((6.0 * t * t - 6.0 * t) / h, 3.0 * t * t - 4.0 * t + 1.0, (-6.0 * t * t + 6.0 * t) / h, 3.0 * t * t - 2.0 * t);
        let f = |a: f64, ap: f64, b: f64, bp: f64| (h00 * a + h10 * h * ap + h01 * b + h11 * h * bp, d00 * a + d10 * ap + d01 * b + d11 * bp);
        let (x0, x0p) = f(self.x[i][0], self.xp[i][0], self.x[i + 1][0], self.xp[i + 1][0]);
        let (x1, x1p) = f(self.x[i][1], self.xp[i][1], self.x[i + 1][1], self.xp[i + 1][1]);
        let (s, sp) = f(self.s[i], self.sp[i], self.s[i + 1], self.sp[i + 1]);
        (Local::new([x0, x1], s, u), [x0p, x1p, sp])
    }
}

/// Symmetric grid of `nodes` points on [−δ, δ] (forced odd so that u = 0 is a node).
pub fn grid(delta: f64, nodes: usize) -> Vec<f64> {
    let k = (nodes.max(3) / 2) * 2 + 1;
    let h = k / 2;
    (0..k).map(|j| delta * (j as f64 - h as f64) / h as f64).collect()
}

pub const TRANSVERSALITY_FLOOR: f64 = 1e-6;

/// Reparameterizes the disk as a graph over u and returns the largest
/// validated half-width δ̃ ≤ `delta_req` together with the graph on it.
pub fn fit_initial_graph(disk: &dyn Disk, chart: &dyn Straightened, base: [f64; 2], delta_req: f64, nodes: usize) -> Result<(GraphCurve, f64), GraphError> {
    let to_local = |t: f64| -> Result<(Local, [f64; 4]), GraphError> {
        let (y, tan) = disk.eval(t);
        let z = chart.chart(&y, base)?;
        let (_, dinv) = chart.inverse(base, &z)?;
        let d = Mat::from_fn(4, 4, |i, j| dinv[i][j]).solve(&tan).map_err(|_| ChartError::InversionFailed)?;
        Ok((z, [d[0], d[1], d[2], d[3]]))
    };
    let (_, d0) = to_local(0.0)?;
    let ratio = d0[3].abs() / vec_norm(&d0);
    if ratio < TRANSVERSALITY_FLOOR {
        return Err(GraphError::NotTransverse(ratio));
    }
    let sign = d0[3].signum();
    // walk outwards on samples until u(t) stops being monotone
    let (ta, tb) = disk.range();
    let samples = 400;
    let mut reach = [f64::INFINITY; 2];
    for (side, end) in [(0usize, ta), (1, tb)] {
        let mut last_u = 0.0f64;
        for k in 1..=samples {
            let t = end * k as f64 / samples as f64;
            let (z, d) = to_local(t)?;
            if d[3] * sign <= 0.0 || (z.u - last_u).abs() == 0.0 || (z.u - last_u) * t.signum() * sign <= 0.0 {
                reach[side] = last_u.abs();
                break;
            }
            last_u = z.u;
            if k == samples {
                reach[side] = z.u.abs();
            }
        }
    }
    let dt = reach[0].min(reach[1]).min(delta_req);
    if dt <= 0.0 {
        return Err(GraphError::FoldDetected(0.0));
    }
    let u = grid(dt, nodes);
    let mut g = GraphCurve { n: 0, delta: dt, base, u: u.clone(), x: vec![], s: vec![], xp: vec![], sp: vec![] };
    for &uj in &u {
        // solve u(t) = uj by Newton from the linear guess
        let mut t = uj / d0[3];
        let mut ok = false;
        for _ in 0..50 {
            let (z, d) = to_local(t)?;
            let r = z.u - uj;
            if r.abs() <= 1e-15 * dt.max(1e-300) + 1e-300 {
                ok = true;
                break;
            }
            t -= r / d[3];
        }
        let (z, d) = to_local(t)?;
        if !ok && (z.u - uj).abs() > 1e-12 * dt {
            return Err(GraphError::FoldDetected(uj));
        }
        g.x.push(z.dx);
        g.s.push(z.s);
        g.xp.push([d[0] / d[3], d[1] / d[3]]);
        g.sp.push(d[2] / d[3]);
    }
    Ok((g, dt))
}

/// Data measured while pushing one graph forward.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct StepReport {
    /// min(|G(−δ)|, |G(δ)|).
    pub image_radius: f64,
    pub h_max: f64,
    pub ginv_max: f64,
    pub chi_max: f64,
}

fn apply_g(chart: &dyn Straightened, g: &GraphCurve, z: &Local, zp: &[f64; 3]) -> Result<(Local, f64, [f64; 3]), GraphError> {
    let w = chart.step(g.base, z)?;
    let j = chart.blocks(g.base, z)?;
    let gp = j.m[3][0] * zp[0] + j.m[3][1] * zp[1] + j.m[3][2] * zp[2] + j.m[3][3];
    let num = |r: usize| j.m[r][0] * zp[0] + j.m[r][1] * zp[1] + j.m[r][2] * zp[2] + j.m[r][3];
    Ok((w, gp, [num(0) / gp, num(1) / gp, num(2) / gp]))
}

/// Inverse-function data of G at each sample: H(u), [G'(u)]⁻¹ and I − χ'(u).
pub fn check_g_inverse(g: &GraphCurve, chart: &dyn Straightened, c: &HyperbolicityConstants) -> Result<StepReport, GraphError> {
    let mut rep = StepReport::default();
    let ctr = g.center();
    let zc = Local::new(g.x[ctr], g.s[ctr], 0.0);
    let fuu_p = chart.blocks(g.base, &zc)?.fu_u();
    for j in 0..g.u.len() {
        let z = Local::new(g.x[j], g.s[j], g.u[j]);
        let b = chart.blocks(g.base, &z)?;
        let lin = b.m[3][0] * g.xp[j][0] + b.m[3][1] * g.xp[j][1] + b.m[3][2] * g.sp[j];
        let h = (lin / b.fu_u()).abs();
        let gp = lin + b.fu_u();
        let ginv = 1.0 / gp.abs();
        let chi = (1.0 - gp / fuu_p).abs();
        rep.h_max = rep.h_max.max(h);
        rep.ginv_max = rep.ginv_max.max(ginv);
        rep.chi_max = rep.chi_max.max(chi);
        let tol = chart.chart_tol();
        for (which, val, bound) in [("‖H(u)‖ < (1−λ̄)/6", h, c.h_bound()), ("‖[G']⁻¹‖ < α̃", ginv, c.alpha_tilde), ("‖I−χ'‖ < κ", chi, c.kappa)] {
            if val >= bound + tol {
                return Err(GraphError::BoundViolated { which: which.into(), u: g.u[j], margin: bound - val });
            }
        }
    }
    Ok(rep)
}

/// One graph transform: ξ_{n+1}(h) = F̃_{x,s}(ξ_n(G⁻¹h), G⁻¹h) on the same grid.
pub fn iterate_graph(g: &GraphCurve, chart: &dyn Straightened, c: &HyperbolicityConstants) -> Result<(GraphCurve, StepReport), GraphError> {
    let mut rep = check_g_inverse(g, chart, c)?;
    let k = g.u.len();
    let mut gu = Vec::with_capacity(k);
    for j in 0..k {
        let z = Local::new(g.x[j], g.s[j], g.u[j]);
        let (w, _, _) = apply_g(chart, g, &z, &[g.xp[j][0], g.xp[j][1], g.sp[j]])?;
        gu.push(w.u);
    }
    if gu.windows(2).any(|w| w[1] <= w[0]) {
        return Err(GraphError::GraphLost { n: g.n });
    }
    rep.image_radius = gu[0].abs().min(gu[k - 1].abs());
    if rep.image_radius <= g.delta {
        return Err(GraphError::ImageTooSmall { n: g.n, radius: rep.image_radius, delta: g.delta });
    }
    let mut out = GraphCurve {
        n: g.n + 1,
        delta: g.delta,
        base: nhim::shear(g.base, 1),
        u: g.u.clone(),
        x: Vec::with_capacity(k),
        s: Vec::with_capacity(k),
        xp: Vec::with_capacity(k),
        sp: Vec::with_capacity(k),
    };
    for &h in &g.u {
        let i = gu.partition_point(|&v| v < h).clamp(1, k - 1);
        let (a, b) = (gu[i - 1], gu[i]);
        let mut u = g.u[i - 1] + (g.u[i] - g.u[i - 1]) * (h - a) / (b - a);
        let mut res = None;
        for _ in 0..30 {
            let (z, zp) = g.interp(u);
            let (w, gp, tan) = apply_g(chart, g, &z, &zp)?;
            let r = w.u - h;
            res = Some((w, tan));
            if r.abs() <= 4.0 * f64::EPSILON * g.delta || r.abs() <= f64::EPSILON * h.abs() {
                break;
            }
            u -= r / gp;
        }
        let (w, tan) = res.unwrap();
        out.x.push(w.dx);
        out.s.push(w.s);
        out.xp.push([tan[0], tan[1]]);
        out.sp.push(tan[2]);
    }
    Ok((out, rep))
}

/// d_{C¹}(ξ_n, ℓ_n) with ℓ_n ≡ (P₀ⁿ, 0); `p0` is P₀ⁿ as an offset from the base,
/// normally the centre node ξ_n(0).
pub fn c1_distance(g: &GraphCurve, p0: [f64; 2]) -> f64 {
    (0..g.u.len())
        .map(|j| vec_norm(&[g.x[j][0] - p0[0], g.x[j][1] - p0[1], g.s[j]]) + n2(&g.xp[j]).max(g.sp[j].abs()))
        .fold(0.0, f64::max)
}

/// The orbit Pⁿ of P = (P₀, s₀, 0) and the base points P₀ⁿ.
#[derive(Clone, Debug, PartialEq)]
pub struct BasePointTrack {
    pub p0: [f64; 2],
    pub s0: f64,
    pub bases: Vec<[f64; 2]>,
    pub points: Vec<Local>,
    pub s_norms: Vec<f64>,
    /// |u| of F̃(Pⁱ) before projecting back onto W̃^s = {u = 0}.
    pub u_residuals: Vec<f64>,
}

impl BasePointTrack {
    pub fn compute(chart: &dyn Straightened, p0: [f64; 2], s0: f64, n: usize) -> Result<Self, GraphError> {
        let mut bases = vec![p0];
        let mut points = vec![Local::new([0.0; 2], s0, 0.0)];
        let mut u_residuals = vec![0.0];
        for i in 0..n {
            let mut w = chart.step(bases[i], &points[i])?;
            u_residuals.push(w.u.abs());
            w.u = 0.0;
            bases.push(nhim::shear(bases[i], 1));
            points.push(w);
        }
        let s_norms = points.iter().map(|p| p.s.abs()).collect();
        Ok(BasePointTrack { p0, s0, bases, points, s_norms, u_residuals })
    }

    /// Worst of |u(Pⁿ)| and of ‖s_i‖ − λ̄‖s_{i−1}‖, each less chart_tol.
    pub fn check(&self, lambda_bar: f64, tol: f64) -> (f64, f64) {
        let u_res = self.u_residuals.iter().copied().fold(0.0, f64::max);
        let contr = self.s_norms.windows(2).map(|w| w[1] - lambda_bar * w[0]).fold(f64::NEG_INFINITY, f64::max);
        (u_res - tol, contr - tol)
    }
}

/// Linear maps L_i = (B_i, C_i) transported along the track.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TangentRecursionTrace {
    pub b: Vec<[f64; 2]>,
    pub c: Vec<f64>,
    pub b_norm: Vec<f64>,
    pub c_norm: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    /// Worst (lhs − rhs) of b_{i+1} ≤ λ̄b_i + β_i + tol and c_{i+1} ≤ b_i + λ̄c_i + γ_i + tol.
    pub b_ineq: f64,
    pub c_ineq: f64,
    /// Worst (β_i − C₂λ̄ⁱ‖s‖ − tol).
    pub beta_ineq: f64,
    /// Worst (b_n − λ̄ⁿb₀ − nλ̄ⁿ⁻¹).
    pub envelope: f64,
}

pub fn tangent_recursion(track: &BasePointTrack, l0: ([f64; 2], f64), chart: &dyn Straightened, c: &HyperbolicityConstants, n: usize) -> Result<TangentRecursionTrace, GraphError> {
    let mut t = TangentRecursionTrace { b: vec![l0.0], c: vec![l0.1], ..Default::default() };
    let tol = chart.chart_tol();
    let lb = c.lambda_bar;
    t.b_ineq = f64::NEG_INFINITY;
    t.c_ineq = f64::NEG_INFINITY;
    t.beta_ineq = f64::NEG_INFINITY;
    t.envelope = f64::NEG_INFINITY;
    let s_norm = track.s0.abs();
    for i in 0..n.min(track.points.len() - 1) {
        let j = chart.blocks(track.bases[i], &track.points[i])?;
        let (bi, ci) = (t.b[i], t.c[i]);
        let fuu = j.fu_u();
        let bn = [
            (j.m[0][0] * bi[0] + j.m[0][1] * bi[1] + j.m[0][2] * ci + j.m[0][3]) / fuu,
            (j.m[1][0] * bi[0] + j.m[1][1] * bi[1] + j.m[1][2] * ci + j.m[1][3]) / fuu,
        ];
        let cn = (j.m[2][0] * bi[0] + j.m[2][1] * bi[1] + j.m[2][2] * ci + j.m[2][3]) / fuu;
        let beta = n2(&j.fx_u());
        let gamma = j.fs_u().abs();
        t.beta.push(beta);
        t.gamma.push(gamma);
        t.b_ineq = t.b_ineq.max(n2(&bn) - (lb * n2(&bi) + beta + tol));
        t.c_ineq = t.c_ineq.max(cn.abs() - (n2(&bi) + lb * ci.abs() + gamma + tol));
        t.beta_ineq = t.beta_ineq.max(beta - (c.c2 * lb.powi(i as i32) * s_norm + tol));
        t.b.push(bn);
        t.c.push(cn);
    }
    t.b_norm = t.b.iter().map(n2).collect();
    t.c_norm = t.c.iter().map(|x| x.abs()).collect();
    if c.c2 * s_norm <= 1.0 {
        for (k, &bk) in t.b_norm.iter().enumerate().skip(1) {
            let env = lb.powi(k as i32) * t.b_norm[0] + k as f64 * lb.powi(k as i32 - 1);
            t.envelope = t.envelope.max(bk - env);
        }
    }
    Ok(t)
}

/// C¹ distance between ψ∘ξ and ψ∘ℓ with ψ = F^m∘φ⁻¹.
pub fn pushforward_graph_distance(g: &GraphCurve, chart: &dyn Straightened, m: usize) -> Result<f64, GraphError> {
    let model = chart.model();
    let push = |z: &Local, v: &[f64; 4]| -> Result<(SectionPoint<f64>, [f64; 4]), GraphError> {
        let (mut y, dinv) = chart.inverse(g.base, z)?;
        let mut w: [f64; 4] = std::array::from_fn(|i| (0..4).map(|k| dinv[i][k] * v[k]).sum());
        for _ in 0..m {
            let (y1, t) = model.section_map_with_tangent_raw(&y);
            w = std::array::from_fn(|i| (0..4).map(|k| t[i][k] * w[k]).sum());
            y = y1;
        }
        Ok((y, w))
    };
    let ctr = g.center();
    let mut d0 = 0.0f64;
    let mut d1 = 0.0f64;
    for j in 0..g.u.len() {
        let (a, va) = push(&Local::new(g.x[j], g.s[j], g.u[j]), &[g.xp[j][0], g.xp[j][1], g.sp[j], 1.0])?;
        let (b, vb) = push(&Local::new(g.x[ctr], 0.0, g.u[j]), &[0.0, 0.0, 0.0, 1.0])?;
        d0 = d0.max(section_dist(&a, &b));
        d1 = d1.max(vec_norm(&[va[0] - vb[0], va[1] - vb[1], va[2] - vb[2], va[3] - vb[3]]));
    }
    Ok(d0 + d1)
}

/// Constants of F̃ measured on V = {x on the track, |s| ≤ s_v, |u| ≤ u_v}.
#[derive(Clone, Debug, PartialEq)]
pub struct ChartConstants {
    pub lambda: f64,
    pub c1: f64,
    pub c2: f64,
    pub eta: f64,
    pub s_v: f64,
    pub u_v: f64,
    /// Worst margins of the pointwise items: ‖∂sFs‖ < λ̄, ‖(∂uFu)⁻¹‖ < λ̄,
    /// ‖∂xFx‖‖(∂uFu)⁻¹‖ < λ̄, mixed blocks below the cross bound, ‖s‖ below its bound.
    pub item_margins: [f64; 5],
}

fn v_grid(s_v: f64, u_v: f64) -> Vec<(f64, f64)> {
    let mut pts = vec![];
    for i in -2i32..=2 {
        for j in -4i32..=4 {
            pts.push((s_v * i as f64 / 2.0, u_v * j as f64 / 4.0));
        }
    }
    pts
}

pub fn measure(chart: &dyn Straightened, bases: &[[f64; 2]], s_v: f64, u_v: f64) -> Result<(f64, f64, f64), GraphError> {
    let mut lam = 0.0f64;
    let mut c1 = 0.0f64;
    let mut c2 = 0.0f64;
    for &b in bases {
        for (s, u) in v_grid(s_v, u_v) {
            let z = Local::new([0.0; 2], s, u);
            let j = chart.blocks(b, &z)?;
            let fxx = j.fx_x();
            let inv_u = 1.0 / j.fu_u().abs();
            let inv_x = op_norm(&fxx.inverse().map_err(|_| ChartError::InversionFailed)?);
            let fss = j.fs_s().abs();
            lam = lam.max(fss).max(inv_u).max(fss * inv_x).max(op_norm(&fxx) * inv_u);
            c1 = c1.max(op_norm(&j.to_mat()));
            let h = [1e-6, 1e-6, (s_v * 1e-3).max(1e-9), (u_v * 1e-3).max(1e-9)];
            let mut acc = 0.0;
            for k in 0..4 {
                let mut zp = [0.0, 0.0, s, u];
                let mut zm = zp;
                zp[k] += h[k];
                zm[k] -= h[k];
                let jp = chart.blocks(b, &Local::new([zp[0], zp[1]], zp[2], zp[3]))?.to_mat();
                let jm = chart.blocks(b, &Local::new([zm[0], zm[1]], zm[2], zm[3]))?.to_mat();
                acc += (op_norm(&jp.sub(&jm)) / (2.0 * h[k])).powi(2);
            }
            c2 = c2.max(acc.sqrt());
        }
    }
    Ok((lam, c1, c2))
}

/// Largest |u| whose image under F̃ stays well inside the chart domain.
fn image_cap(chart: &dyn Straightened, c1: f64) -> f64 {
    0.5 * chart.varsigma() / c1.max(1.0)
}

/// Measures λ, C₁, C₂ and η of F̃ on V, choosing the u-extent of V
/// self-consistently with δ and the s-extent as half the
/// admissible ‖s‖.
pub fn chart_constants(chart: &dyn Straightened, bases: &[[f64; 2]], nu: f64, q: u32) -> Result<(ChartConstants, HyperbolicityConstants), GraphError> {
    let mut u_v = 1e-4f64.min(chart.varsigma());
    let mut s_v = 1e-4f64;
    let mut vals = measure(chart, bases, s_v, u_v)?;
    for _ in 0..8 {
        let hc = HyperbolicityConstants::derive(vals.0, vals.1, vals.2, q, nu, 1.0, 1.0, chart.varsigma());
        let d8 = (1.0 - hc.lambda_bar) / (3.0 * hc.c2 * (2.0 * hc.nu + 1.0).powi(2));
        u_v = (u_v * d8).sqrt().min(image_cap(chart, hc.c1));
        s_v = (0.5 * hc.s_bound()).min(chart.varsigma());
        vals = measure(chart, bases, s_v, u_v)?;
    }
    let (lambda, c1, c2) = vals;
    let pre = HyperbolicityConstants::derive(lambda, c1, c2, q, nu, 1.0, 1.0, chart.varsigma());
    // shrinking V keeps the measured suprema valid
    s_v = s_v.min(0.5 * pre.s_bound());
    // η: largest |u| in V with ‖∂xFu‖, ‖∂sFu‖ < ε_ν
    let mut eta = u_v;
    let mut margins = [f64::INFINITY; 5];
    for &b in bases {
        for (s, u) in v_grid(s_v, u_v) {
            let j = chart.blocks(b, &Local::new([0.0; 2], s, u))?;
            if n2(&j.fu_x()).max(j.fu_s().abs()) >= pre.eps_nu {
                eta = eta.min(u.abs());
            }
            let inv_u = 1.0 / j.fu_u().abs();
            margins[0] = margins[0].min(pre.lambda_bar - j.fs_s().abs());
            margins[1] = margins[1].min(pre.lambda_bar - inv_u);
            margins[2] = margins[2].min(pre.lambda_bar - op_norm(&j.fx_x()) * inv_u);
            margins[3] = margins[3].min(pre.cross_bound() - n2(&j.fx_s()).max(n2(&j.fs_x())));
        }
    }
    margins[4] = pre.s_bound() - s_v;
    let hc = HyperbolicityConstants::derive(lambda, c1, c2, q, nu, eta, u_v, chart.varsigma());
    Ok((ChartConstants { lambda, c1, c2, eta, s_v, u_v, item_margins: margins }, hc))
}

/// Settings of the standard λ-lemma experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaLemmaConfig {
    pub p0: [f64; 2],
    /// s₀ as a fraction of the s-extent of V.
    pub s0_frac: f64,
    pub x1: [f64; 2],
    pub x2: [f64; 2],
    pub s1: f64,
    pub s2: f64,
    /// u-component of the disk tangent; 0 gives a leaf-tangent disk.
    pub u1: f64,
    pub nodes: usize,
    pub n_max: usize,
    pub q: u32,
    pub fit_window: (usize, usize),
    pub push_m: Vec<usize>,
}

impl Default for LambdaLemmaConfig {
    fn default() -> Self {
        LambdaLemmaConfig {
            p0: [0.5, 0.3],
            s0_frac: 0.5,
            x1: [0.3, -0.2],
            x2: [0.2, 0.1],
            s1: 0.4,
            s2: 0.3,
            u1: 1.0,
            nodes: 41,
            n_max: 30,
            q: 3,
            fit_window: (5, 25),
            push_m: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRow {
    pub n: usize,
    pub sup_s: f64,
    pub xi_prime: f64,
    pub d_c1: f64,
    pub c0: f64,
    pub c0_envelope: f64,
    pub image_radius: f64,
    pub h_margin: f64,
    pub ginv_margin: f64,
    pub chi_margin: f64,
    /// β‖ξ'_{n−1}‖ + C₂ sup‖S_{n−1}‖ + tol − ‖ξ'_n‖ (NaN at n = 0).
    pub xi_margin: f64,
    pub push: Vec<f64>,
    /// Round-off resolution of d_{C¹} given the offset of ξ_n(0) from the base.
    pub resolution: f64,
}

/// A named inequality with its worst margin (positive when it holds).
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub margin: f64,
}

impl Check {
    pub fn ok(&self) -> bool {
        self.margin > 0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LambdaLemmaReport {
    pub constants: HyperbolicityConstants,
    pub chart_constants: ChartConstants,
    pub chart_tol: f64,
    pub delta_tilde: f64,
    pub rows: Vec<IterationRow>,
    pub track: BasePointTrack,
    pub trace: TangentRecursionTrace,
    /// Least-squares slope of ln d_{C¹} over the fit window.
    pub slope: f64,
    pub graph_error: Option<String>,
    pub checks: Vec<Check>,
}

pub fn fit_slope(ns: &[f64], ys: &[f64]) -> f64 {
    let n = ns.len() as f64;
    let mx = ns.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = ns.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = ns.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Runs the full pipeline: constants on V, the initial disk, N_max graph
/// transforms, the track and tangent recursion, and every asserted inequality.
pub fn run_lambda_lemma(chart: &dyn Straightened, cfg: &LambdaLemmaConfig) -> Result<LambdaLemmaReport, GraphError> {
    let nb = cfg.n_max.max(1);
    let bases: Vec<[f64; 2]> = (0..=nb).step_by((nb / 4).max(1)).map(|k| nhim::shear(cfg.p0, k as i64)).collect();
    let (cc, hc0) = chart_constants(chart, &bases, 1.0, cfg.q)?;
    let tol = chart.chart_tol();
    let s0 = cfg.s0_frac * cc.s_v;
    let disk = ChartDisk { chart, base: cfg.p0, x1: cfg.x1, x2: cfg.x2, s0, s1: cfg.s1, s2: cfg.s2, u1: cfg.u1, half_width: 2.0 * hc0.delta };
    let (g0, delta_tilde) = fit_initial_graph(&disk, chart, cfg.p0, hc0.delta.min(image_cap(chart, cc.c1)), cfg.nodes)?;
    let nu = g0.xi_prime_norm().max(1.0);
    let hc = hc0.with_graph_data(nu, cc.eta, delta_tilde);
    let (g0, _) = if hc.delta < g0.delta { fit_initial_graph(&disk, chart, cfg.p0, hc.delta, cfg.nodes)? } else { (g0, delta_tilde) };
    let track = BasePointTrack::compute(chart, cfg.p0, s0, cfg.n_max)?;
    let s_sup0 = g0.sup_s();
    let sup_s_env = |n: usize| hc.lambda_bar.powi(n as i32) * s_sup0 + tol / (1.0 - hc.lambda_bar);
    let mut rows = vec![];
    let mut g = g0.clone();
    let mut graph_error = None;
    let mut s_env_margin = f64::INFINITY;
    let mut prev: Option<(f64, f64)> = None;
    for n in 0..=cfg.n_max {
        let rep = if n < cfg.n_max {
            match iterate_graph(&g, chart, &hc) {
                Ok((next, rep)) => Some((next, rep)),
                Err(e) => {
                    graph_error = Some(format!("n = {n}: {e}"));
                    None
                }
            }
        } else {
            None
        };
        let s_ctr = track.s_norms[n];
        let p_n = g.x[g.center()];
        let c0 = g.c0_distance(p_n);
        let env = g.oscillation() + hc.lambda_bar.powi(n as i32) * s0.abs() + tol;
        let _ = s_ctr;
        let xi = g.xi_prime_norm();
        let sup_s = g.sup_s();
        s_env_margin = s_env_margin.min(sup_s_env(n) - sup_s);
        let xi_margin = prev.map(|(xp, sp)| hc.beta * xp + hc.c2 * sp + tol - xi).unwrap_or(f64::NAN);
        let mut push = vec![];
        for &m in &cfg.push_m {
            push.push(pushforward_graph_distance(&g, chart, m)?);
        }
        let mut row = IterationRow {
            n,
            sup_s,
            xi_prime: xi,
            d_c1: c1_distance(&g, p_n),
            c0,
            c0_envelope: env,
            image_radius: f64::NAN,
            h_margin: f64::NAN,
            ginv_margin: f64::NAN,
            chi_margin: f64::NAN,
            xi_margin,
            push,
            resolution: 64.0 * f64::EPSILON * n2(&p_n) * (1.0 + 1.0 / g.delta),
        };
        prev = Some((xi, sup_s));
        match rep {
            Some((next, r)) => {
                row.image_radius = r.image_radius;
                row.h_margin = hc.h_bound() - r.h_max;
                row.ginv_margin = hc.alpha_tilde - r.ginv_max;
                row.chi_margin = hc.kappa - r.chi_max;
                rows.push(row);
                g = next;
            }
            None => {
                rows.push(row);
                if graph_error.is_some() || n == cfg.n_max {
                    break;
                }
            }
        }
    }
    let l0 = (g0.xp[g0.center()], g0.sp[g0.center()]);
    let trace = tangent_recursion(&track, l0, chart, &hc, cfg.n_max)?;
    let (w0, w1) = cfg.fit_window;
    let win: Vec<&IterationRow> = rows.iter().filter(|r| r.n >= w0 && r.n <= w1).collect();
    let slope = if win.len() >= 2 && win.iter().all(|r| r.d_c1 > 0.0) {
        fit_slope(&win.iter().map(|r| r.n as f64).collect::<Vec<_>>(), &win.iter().map(|r| r.d_c1.ln()).collect::<Vec<_>>())
    } else {
        f64::NAN
    };
    let minf = |f: &dyn Fn(&IterationRow) -> f64| rows.iter().map(f).filter(|x| !x.is_nan()).fold(f64::INFINITY, f64::min);
    let (track_u, track_s) = track.check(hc.lambda_bar, tol);
    let radius_req = hc.delta * (1.0 - hc.kappa) / hc.lambda_bar - tol;
    let decreasing_from = rows.windows(2).rposition(|w| w[1].d_c1 >= w[0].d_c1 && w[1].d_c1 > w[1].resolution).map(|i| i + 1).unwrap_or(0);
    let mut checks = vec![
        Check { name: "graph property for all n".into(), margin: if graph_error.is_none() && rows.len() == cfg.n_max + 1 { 1.0 } else { -1.0 } },
        Check { name: "d_C1 eventually decreasing".into(), margin: (w0 as f64 - decreasing_from as f64) + 0.5 },
        Check { name: "slope <= ln(lambda_bar) + 0.05".into(), margin: hc.lambda_bar.ln() + 0.05 - slope },
        Check { name: "C0 envelope".into(), margin: minf(&|r| r.c0_envelope - r.c0) },
        Check { name: "|H(u)| < (1-lambda_bar)/6".into(), margin: minf(&|r| r.h_margin) },
        Check { name: "|G'^-1| < alpha_tilde".into(), margin: minf(&|r| r.ginv_margin) },
        Check { name: "|I - chi'| < kappa".into(), margin: minf(&|r| r.chi_margin) },
        Check { name: "image of G contains B_delta".into(), margin: minf(&|r| r.image_radius - hc.delta) },
        Check { name: "image radius >= delta(1-kappa)/lambda_bar".into(), margin: minf(&|r| r.image_radius - radius_req) },
        Check { name: "xi' recursion bound".into(), margin: minf(&|r| r.xi_margin) },
        Check { name: "sup S_n envelope".into(), margin: s_env_margin },
        Check { name: "b recursion".into(), margin: -trace.b_ineq },
        Check { name: "c recursion".into(), margin: -trace.c_ineq },
        Check { name: "beta_i <= C2 lambda_bar^i |s|".into(), margin: -trace.beta_ineq },
        Check { name: "b_n envelope".into(), margin: -trace.envelope },
        Check { name: "track u-residual".into(), margin: -track_u },
        Check { name: "track s contraction".into(), margin: -track_s },
        Check { name: "nu bound on xi'".into(), margin: minf(&|r| hc.nu - r.xi_prime) + tol },
    ];
    for (i, m) in cc.item_margins.iter().enumerate() {
        checks.push(Check { name: format!("chart item {}", i + 1), margin: *m });
    }
    Ok(LambdaLemmaReport { constants: hc, chart_constants: cc, chart_tol: tol, delta_tilde, rows, track, trace, slope, graph_error, checks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arnold_model::ModelParams;
    use crate::chart::ProductChart;

    fn chart() -> ProductChart {
        ProductChart::build(&ModelParams::new(1.0, 0.0, 256, 4).unwrap(), 3, 0.2).unwrap()
    }

    #[test]
    fn leaf_graph_is_invariant() {
        let c = chart();
        let hc = HyperbolicityConstants::derive(0.012, 600.0, 50.0, 3, 1.0, 0.01, 1.0, 0.2);
        let g = GraphCurve::leaf([0.5, 0.3], 1e-3, 21);
        let (g1, _) = iterate_graph(&g, &c, &hc).unwrap();
        assert!(c1_distance(&g1, [0.0; 2]) <= c.chart_tol);
        assert_eq!(g1.base, nhim::shear([0.5, 0.3], 1));
        let rep = check_g_inverse(&g, &c, &hc).unwrap();
        assert_eq!(rep.h_max, 0.0);
    }

    #[test]
    fn tilted_line_and_tangent_disk() {
        let c = chart();
        let disk = ChartDisk { chart: &c, base: [0.5, 0.3], x1: [0.0; 2], x2: [0.0; 2], s0: 0.0, s1: 0.3, s2: 0.0, u1: 1.0, half_width: 2e-3 };
        let (g, dt) = fit_initial_graph(&disk, &c, [0.5, 0.3], 1e-3, 21).unwrap();
        assert_eq!(dt, 1e-3);
        for j in 0..g.u.len() {
            assert!((g.sp[j] - 0.3).abs() < 1e-8);
            assert!((g.s[j] - 0.3 * g.u[j]).abs() < 1e-12);
        }
        let flat = ChartDisk { u1: 0.0, ..disk };
        assert!(matches!(fit_initial_graph(&flat, &c, [0.5, 0.3], 1e-3, 21), Err(GraphError::NotTransverse(_))));
    }

    #[test]
    fn threshold_substitution() {
        let hc = HyperbolicityConstants::from_lambda(0.6);
        assert!((hc.h_bound() - 0.033_333_333_333_333_33).abs() < 1e-15);
        assert!((hc.alpha_tilde - 0.827_586_206_896_551_7).abs() < 1e-15);
        assert!((hc.kappa - 0.1).abs() < 1e-15);
    }

    #[test]
    fn trivial_tangent_recursion_on_n() {
        let c = chart();
        let hc = HyperbolicityConstants::derive(0.012, 600.0, 50.0, 3, 1.0, 0.01, 1.0, 0.2);
        let track = BasePointTrack::compute(&c, [0.5, 0.3], 0.0, 10).unwrap();
        let t = tangent_recursion(&track, ([0.0; 2], 0.0), &c, &hc, 10).unwrap();
        assert!(t.b_norm.iter().chain(&t.c_norm).all(|&x| x <= c.chart_tol));
    }

    #[test]
    fn slope_fit_of_exact_line() {
        let ns = [1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = ns.iter().map(|n| 2.0 - 0.7 * n).collect();
        assert!((fit_slope(&ns, &ys) + 0.7).abs() < 1e-14);
    }
}
