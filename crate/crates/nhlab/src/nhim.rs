//! The invariant manifold N = {θ₁ = r₁ = 0}, its tori, the splitting of the
//! normal bundle, hyperbolicity constants, and strong stable/unstable leaves.

use std::f64::consts::PI;

use thiserror::Error;

use crate::arnold_model::{Model, SectionPoint};
use crate::jet::Taylor;
use crate::numerics::{conorm, op_norm, Mat, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NhimError {
    #[error("the rate condition fails for q = {0} on the sample grid")]
    NotNormallyHyperbolic(u32),
    #[error("degenerate splitting frame at θ₂ = {theta2}, r₂ = {r2}")]
    FrameDegenerate { theta2: f64, r2: f64 },
    #[error("leaf sample left the domain box at {0:?}")]
    LeftDomain([f64; 4]),
    #[error("leaf resampling exceeded {0} points")]
    TooManySamples(usize),
}

/// Compact r₂-band standing in for a compact N.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Band {
    pub r_min: f64,
    pub r_max: f64,
}

impl Default for Band {
    fn default() -> Self {
        Band { r_min: 0.0, r_max: 1.0 }
    }
}

/// Box that grown leaves must stay inside.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainBox {
    pub theta1: (f64, f64),
    pub r1_max: f64,
    pub r2: (f64, f64),
}

impl Default for DomainBox {
    fn default() -> Self {
        DomainBox { theta1: (-1.0, 2.0 * PI + 1.0), r1_max: 3.0, r2: (-0.5, 1.5) }
    }
}

impl DomainBox {
    pub fn contains(&self, p: &SectionPoint<f64>) -> bool {
        p.theta1 >= self.theta1.0
            && p.theta1 <= self.theta1.1
            && p.r1.abs() <= self.r1_max
            && p.r2 >= self.r2.0
            && p.r2 <= self.r2.1
    }
}

/// The invariant circle {θ₁ = r₁ = 0, r₂ = ω}.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Torus {
    pub omega: f64,
}

impl Torus {
    pub fn point(&self, theta2: f64) -> SectionPoint<f64> {
        SectionPoint::on_n(theta2, self.omega)
    }

    /// Largest deviation from the torus over `n` iterates starting at θ₂.
    pub fn invariance_residual(&self, model: &Model<f64>, theta2: f64, n: usize) -> f64 {
        let mut p = self.point(theta2);
        let mut worst = 0.0f64;
        for _ in 0..n {
            p = model.section_map(&p);
            worst = worst.max(p.theta1.abs()).max(p.r1.abs()).max((p.r2 - self.omega).abs());
        }
        worst
    }
}

/// Star discrepancy of {kω mod 1 : k < n} (the orbit of θ₂ = 0 in units of 2π).
pub fn minimality_proxy(t: &Torus, n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let mut xs: Vec<f64> = (0..n).map(|k| (k as f64 * t.omega).rem_euclid(1.0)).collect();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let nf = n as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| ((i + 1) as f64 / nf - x).max(x - i as f64 / nf))
        .fold(0.0, f64::max)
}

/// Exact tangential map on N: (θ₂, r₂) ↦ (θ₂ + 2πr₂, r₂).
pub fn shear(x: [f64; 2], n: i64) -> [f64; 2] {
    [x[0] + 2.0 * PI * n as f64 * x[1], x[1]]
}

pub fn shear_matrix() -> Mat {
    Mat::from_rows(&[&[1.0, 2.0 * PI], &[0.0, 1.0]])
}

/// (θ₁, r₁) block of DF at the point (θ₂, r₂) of N. On N this block and the
/// tangential shear are the only nonzero blocks.
pub fn normal_block<R: Real>(model: &Model<R>, theta2: &R, r2: &R) -> [[R; 2]; 2] {
    let z = theta2.zero();
    let p = SectionPoint::new(z.clone(), z, theta2.clone(), r2.clone());
    let (_, t) = model.section_map_with_tangent_raw(&p);
    [[t[0][0].clone(), t[0][1].clone()], [t[1][0].clone(), t[1][1].clone()]]
}

fn normal_block_inv<R: Real>(model: &Model<R>, theta2: &R, r2: &R) -> [[R; 2]; 2] {
    let z = theta2.zero();
    let p = SectionPoint::new(z.clone(), z, theta2.clone(), r2.clone());
    let (_, t) = model.section_map_inv_with_tangent_raw(&p);
    [[t[0][0].clone(), t[0][1].clone()], [t[1][0].clone(), t[1][1].clone()]]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    Stable,
    Unstable,
}

/// Number of orbit steps used to converge a direction field or leaf jet.
pub fn settle_steps(epsilon: f64) -> usize {
    let rate = 2.0 * PI * epsilon.sqrt();
    ((40.0 / (2.0 * rate)).ceil() as usize + 2).max(4)
}

/// Transports the slope p of the direction (1, p) of E^u (forward) or E^s
/// (backward) along the orbit of N ending at (θ₂, r₂), starting m steps
/// away from a crude guess. Returns the slope at the end and, per step, the
/// slope before it together with the multiplier l with DF·(1, p) = l·(1, p').
fn slope_transport<R: Real>(model: &Model<R>, theta2: &R, r2: &R, kind: LeafKind, m: usize) -> (R, Vec<(R, R)>) {
    let two_pi = theta2.two_pi();
    let a = model.params.epsilon.sqrt();
    let mut p = theta2.lift(match kind {
        LeafKind::Unstable => a,
        LeafKind::Stable => -a,
    });
    let mut steps = Vec::with_capacity(m);
    for k in (1..=m).rev() {
        let j = k as f64;
        let blk = match kind {
            LeafKind::Unstable => normal_block(model, &(theta2.clone() - two_pi.clone() * r2.clone() * j), r2),
            LeafKind::Stable => normal_block_inv(model, &(theta2.clone() + two_pi.clone() * r2.clone() * j), r2),
        };
        let l = blk[0][0].clone() + blk[0][1].clone() * p.clone();
        let p_next = (blk[1][0].clone() + blk[1][1].clone() * p.clone()) / l.clone();
        steps.push((p, l));
        p = p_next;
    }
    (p, steps)
}

/// Splitting T_N M = TN ⊕ E^s ⊕ E^u at a point of N, in (θ₁, r₁, θ₂, r₂).
#[derive(Clone, Debug, PartialEq)]
pub struct SplittingFrame {
    pub base: SectionPoint<f64>,
    pub e_s: [f64; 4],
    pub e_u: [f64; 4],
    pub t1: [f64; 4],
    pub t2: [f64; 4],
    /// |DF·e_s| and |DF·e_u| (both directions are unit vectors).
    pub lambda_s: f64,
    pub lambda_u: f64,
}

fn unit2(p: f64) -> [f64; 4] {
    let n = (1.0 + p * p).sqrt();
    [1.0 / n, p / n, 0.0, 0.0]
}

pub fn splitting_frame(model: &Model<f64>, theta2: f64, r2: f64) -> Result<SplittingFrame, NhimError> {
    let m = settle_steps(model.params.epsilon);
    let (pu, _) = slope_transport(model, &theta2, &r2, LeafKind::Unstable, m);
    let (ps, _) = slope_transport(model, &theta2, &r2, LeafKind::Stable, m);
    if !(pu.is_finite() && ps.is_finite()) || (pu - ps).abs() < 1e-8 {
        return Err(NhimError::FrameDegenerate { theta2, r2 });
    }
    let e_u = unit2(pu);
    let e_s = unit2(ps);
    let a = normal_block(model, &theta2, &r2);
    let img = |e: &[f64; 4]| {
        let v = [a[0][0] * e[0] + a[0][1] * e[1], a[1][0] * e[0] + a[1][1] * e[1]];
        (v[0] * v[0] + v[1] * v[1]).sqrt()
    };
    Ok(SplittingFrame {
        base: SectionPoint::on_n(theta2, r2),
        lambda_s: img(&e_s),
        lambda_u: img(&e_u),
        e_s,
        e_u,
        t1: [0.0, 0.0, 1.0, 0.0],
        t2: [0.0, 0.0, 0.0, 1.0],
    })
}

impl SplittingFrame {
    /// Sine of the angle between DF·e and the frame direction at F(base), worst of the two.
    pub fn invariance_residual(&self, model: &Model<f64>) -> Result<f64, NhimError> {
        let a = normal_block(model, &self.base.theta2, &self.base.r2);
        let next = shear([self.base.theta2, self.base.r2], 1);
        let f = splitting_frame(model, next[0], next[1])?;
        let sine = |e: &[f64; 4], g: &[f64; 4]| {
            let v = [a[0][0] * e[0] + a[0][1] * e[1], a[1][0] * e[0] + a[1][1] * e[1]];
            (v[0] * g[1] - v[1] * g[0]).abs() / (v[0] * v[0] + v[1] * v[1]).sqrt()
        };
        Ok(sine(&self.e_u, &f.e_u).max(sine(&self.e_s, &f.e_s)))
    }
}

/// The constants that drive the λ-lemma estimates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HyperbolicityConstants {
    pub lambda: f64,
    pub lambda_bar: f64,
    pub c1: f64,
    pub c2: f64,
    pub q: u32,
    pub nu: f64,
    pub eps_nu: f64,
    pub eta: f64,
    pub delta_tilde: f64,
    pub delta: f64,
    pub alpha_tilde: f64,
    pub beta: f64,
    pub kappa: f64,
    pub varsigma: f64,
}

impl HyperbolicityConstants {
    /// Fills every derived field from the measured inputs.
    #[allow(clippy::too_many_arguments)]
    pub fn derive(lambda: f64, c1: f64, c2: f64, q: u32, nu: f64, eta: f64, delta_tilde: f64, varsigma: f64) -> Self {
        let lambda_bar = (1.0 + lambda) / 2.0;
        let nu = nu.max(1.0);
        let eps_nu = (1.0 - lambda_bar) / (12.0 * nu * lambda_bar);
        let alpha_tilde = 6.0 * lambda_bar / (5.0 + lambda_bar);
        let d8 = (1.0 - lambda_bar) / (3.0 * c2 * (2.0 * nu + 1.0).powi(2));
        HyperbolicityConstants {
            lambda,
            lambda_bar,
            c1,
            c2,
            q,
            nu,
            eps_nu,
            eta,
            delta_tilde,
            delta: 1.0f64.min(delta_tilde).min(eta).min(d8),
            alpha_tilde,
            beta: (1.0 + alpha_tilde) / 2.0,
            kappa: (1.0 - lambda_bar) / 2.0,
            varsigma,
        }
    }

    pub fn from_lambda(lambda: f64) -> Self {
        Self::derive(lambda, 1.0, 1.0, 1, 1.0, 1.0, 1.0, 1.0)
    }

    pub fn with_graph_data(&self, nu: f64, eta: f64, delta_tilde: f64) -> Self {
        Self::derive(self.lambda, self.c1, self.c2, self.q, nu, eta, delta_tilde, self.varsigma)
    }

    /// Bound on ‖H(u)‖ in the inverse-function argument, 2λ̄νε_ν.
    pub fn h_bound(&self) -> f64 {
        (1.0 - self.lambda_bar) / 6.0
    }

    /// Admissible size of ‖s‖ on the chart domain.
    pub fn s_bound(&self) -> f64 {
        (5.0 - 5.0 * self.lambda) / (2.0 * self.c2 * (11.0 + self.lambda))
    }

    /// Admissible size of the mixed blocks ∂_sF_x and ∂_xF_s.
    pub fn cross_bound(&self) -> f64 {
        (5.0 - 5.0 * self.lambda) / (2.0 * (11.0 + self.lambda))
    }

    pub fn invariants_hold(&self) -> bool {
        let d8 = (1.0 - self.lambda_bar) / (3.0 * self.c2 * (2.0 * self.nu + 1.0).powi(2));
        self.lambda < self.lambda_bar
            && self.lambda_bar < self.alpha_tilde
            && self.alpha_tilde < self.beta
            && self.beta < 1.0
            && self.delta <= 1.0f64.min(self.delta_tilde).min(self.eta).min(d8) * (1.0 + 1e-15)
    }
}

/// Points of N and of a neighbourhood of it where constants are sampled.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleGrid {
    pub theta2: Vec<f64>,
    pub r2: Vec<f64>,
    /// (θ₁, r₁) offsets used for the derivative bounds.
    pub normal: Vec<(f64, f64)>,
}

impl SampleGrid {
    pub fn standard(band: Band, varsigma: f64, n: usize) -> Self {
        let n = n.max(2);
        let theta2 = (0..n).map(|i| 2.0 * PI * i as f64 / n as f64).collect();
        let r2 = (0..n).map(|i| band.r_min + (band.r_max - band.r_min) * i as f64 / (n - 1) as f64).collect();
        let mut normal = vec![(0.0, 0.0)];
        for k in 0..8 {
            let a = PI * k as f64 / 4.0;
            normal.push((varsigma * a.cos(), varsigma * a.sin()));
        }
        SampleGrid { theta2, r2, normal }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConstantsReport {
    pub constants: HyperbolicityConstants,
    pub sup_contraction: f64,
    pub sup_inv_expansion: f64,
    pub tangential_norm: f64,
    pub tangential_conorm: f64,
    pub rate_condition_holds: bool,
    pub controllable: bool,
}

/// Normal-hyperbolicity verdict for order q from the measured rates.
pub fn rate_condition(sup_cs: f64, sup_inv_cu: f64, t_norm: f64, t_conorm: f64, q: u32) -> bool {
    sup_cs < t_conorm.powi(q as i32) && sup_inv_cu < (1.0 / t_norm).powi(q as i32)
}

/// Upper bounds for sup‖J‖ and sup‖D J‖ over the sample points, with D J
/// taken by central differences of `jac`.
pub fn derivative_bounds(points: &[[f64; 4]], jac: impl Fn(&[f64; 4]) -> Mat, h: f64) -> (f64, f64) {
    let mut c1 = 0.0f64;
    let mut c2 = 0.0f64;
    for z in points {
        c1 = c1.max(op_norm(&jac(z)));
        let mut acc = 0.0;
        for k in 0..4 {
            let mut zp = *z;
            let mut zm = *z;
            zp[k] += h;
            zm[k] -= h;
            let d = jac(&zp).sub(&jac(&zm));
            acc += (op_norm(&d) / (2.0 * h)).powi(2);
        }
        c2 = c2.max(acc.sqrt());
    }
    (c1, c2)
}

pub fn estimate_constants(model: &Model<f64>, grid: &SampleGrid, q: u32, varsigma: f64) -> Result<ConstantsReport, NhimError> {
    let t = shear_matrix();
    let tn = op_norm(&t);
    let tc = conorm(&t);
    let mut sup_cs = 0.0f64;
    let mut sup_icu = 0.0f64;
    let mut pts = Vec::new();
    for &th in &grid.theta2 {
        for &r in &grid.r2 {
            let f = splitting_frame(model, th, r)?;
            sup_cs = sup_cs.max(f.lambda_s);
            sup_icu = sup_icu.max(1.0 / f.lambda_u);
            for &(a, b) in &grid.normal {
                pts.push([a, b, th, r]);
            }
        }
    }
    let lambda = sup_cs.max(sup_icu).max(sup_cs / tc).max(tn * sup_icu);
    let jac = |z: &[f64; 4]| model.jacobian(&SectionPoint::from_array(*z)).m;
    let (c1, c2) = derivative_bounds(&pts, jac, 1e-5);
    let rate_ok = rate_condition(sup_cs, sup_icu, tn, tc, q);
    if !rate_ok {
        return Err(NhimError::NotNormallyHyperbolic(q));
    }
    Ok(ConstantsReport {
        constants: HyperbolicityConstants::derive(lambda, c1, c2, q, 1.0, 1.0, 1.0, varsigma),
        sup_contraction: sup_cs,
        sup_inv_expansion: sup_icu,
        tangential_norm: tn,
        tangential_conorm: tc,
        rate_condition_holds: rate_ok,
        controllable: sup_cs * tn < 1.0 && tc / sup_icu > 1.0,
    })
}

/// Taylor coefficients of the leaf through (θ₂, r₂) in its linearizing
/// parameter: F(L_x(σ)) = L_{F(x)}(λ(x)σ). Coefficient k is a 4-vector in
/// (θ₁, r₁, θ₂, r₂); the constant term is the base point.
///
/// The leaf is obtained by pushing a straight segment from the far end of
/// the orbit (x₋ₘ for unstable, xₘ for stable) back to x with the parameter
/// rescaled by the accumulated multipliers; the error at order k decays like
/// λ^{-km}.
pub fn leaf_jets<T: Real>(model_t: &Model<T>, model_j: &Model<Taylor<T>>, theta2: &T, r2: &T, kind: LeafKind, order: usize) -> (Vec<[T; 4]>, T) {
    let m = settle_steps(model_t.params.epsilon);
    let (p_here, steps) = slope_transport(model_t, theta2, r2, kind, 2 * m);
    let p_far = steps[m].0.clone();
    let two_pi = theta2.two_pi();
    let far = match kind {
        LeafKind::Unstable => theta2.clone() - two_pi.clone() * r2.clone() * (m as f64),
        LeafKind::Stable => theta2.clone() + two_pi.clone() * r2.clone() * (m as f64),
    };
    let norm = (1.0 + model_t.params.epsilon).sqrt();
    let mut c = theta2.one();
    for (_, l) in &steps[m..] {
        c = c / l.clone();
    }
    let sig = Taylor::variable(theta2.zero(), order);
    let dir0 = sig.clone() * Taylor::constant(c.clone() / norm, order);
    let dir1 = sig * Taylor::constant(c * p_far / norm, order);
    let mut z = SectionPoint::new(dir0, dir1, Taylor::constant(far, order), Taylor::constant(r2.clone(), order));
    for _ in 0..m {
        z = match kind {
            LeafKind::Unstable => model_j.section_map_raw(&z),
            LeafKind::Stable => model_j.section_map_inv_raw(&z),
        };
    }
    let coords = z.to_array();
    let coeffs = (0..=order).map(|k| std::array::from_fn(|i| coords[i].c[k].clone())).collect();
    // multiplier of F at x along this leaf
    let a = normal_block(model_t, theta2, r2);
    let lam = a[0][0].clone() + a[0][1].clone() * p_here;
    (coeffs, lam)
}

/// A strong stable or unstable leaf: local Taylor jet plus (after growth)
/// an adaptively sampled image of a parameter interval.
#[derive(Clone, Debug, PartialEq)]
pub struct LeafCurve {
    /// Base of the local jet.
    pub base: SectionPoint<f64>,
    pub kind: LeafKind,
    pub multiplier: f64,
    pub coeffs: Vec<[f64; 4]>,
    /// Number of forward (unstable) or backward (stable) iterations applied.
    pub steps: usize,
    /// Leaf parameter of each sample, increasing.
    pub sigma: Vec<f64>,
    pub samples: Vec<SectionPoint<f64>>,
    /// Cumulative arc length along `samples`.
    pub arc: Vec<f64>,
}

fn jet_models(model: &Model<f64>, order: usize) -> Model<Taylor<f64>> {
    Model::new(&model.params, &Taylor::constant(0.0, order))
}

pub fn local_leaf(model: &Model<f64>, theta2: f64, r2: f64, kind: LeafKind, order: usize) -> Result<LeafCurve, NhimError> {
    let order = order.max(1);
    let mj = jet_models(model, order);
    let (coeffs, lam) = leaf_jets(model, &mj, &theta2, &r2, kind, order);
    if !lam.is_finite() || coeffs.iter().flatten().any(|c| !c.is_finite()) {
        return Err(NhimError::FrameDegenerate { theta2, r2 });
    }
    Ok(LeafCurve {
        base: SectionPoint::on_n(theta2, r2),
        kind,
        multiplier: lam,
        coeffs,
        steps: 0,
        sigma: vec![],
        samples: vec![],
        arc: vec![],
    })
}

impl LeafCurve {
    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }

    /// Local leaf point at parameter σ.
    pub fn eval(&self, sigma: f64) -> SectionPoint<f64> {
        let mut acc = self.coeffs[self.order()];
        for k in (0..self.order()).rev() {
            for i in 0..4 {
                acc[i] = acc[i] * sigma + self.coeffs[k][i];
            }
        }
        SectionPoint::from_array(acc)
    }

    pub fn tangent(&self, sigma: f64) -> [f64; 4] {
        let mut acc = [0.0; 4];
        for k in (1..=self.order()).rev() {
            for i in 0..4 {
                acc[i] = acc[i] * sigma + self.coeffs[k][i] * k as f64;
            }
        }
        acc
    }

    /// Grown point: F^steps (or F^-steps) of the local point at σ.
    pub fn grown_point(&self, model: &Model<f64>, sigma: f64) -> SectionPoint<f64> {
        let n = self.steps as i64;
        let p = self.eval(sigma);
        match self.kind {
            LeafKind::Unstable => model.iterate_raw(&p, n),
            LeafKind::Stable => model.iterate_raw(&p, -n),
        }
    }

    /// Worst mismatch of the lamination invariance over |τ| ≤ radius, with τ
    /// the parameter on the leaf that the map expands into.
    pub fn invariance_residual(&self, model: &Model<f64>, radius: f64, samples: usize) -> Result<f64, NhimError> {
        let (sign, target) = match self.kind {
            LeafKind::Unstable => (1i64, shear([self.base.theta2, self.base.r2], 1)),
            LeafKind::Stable => (-1i64, shear([self.base.theta2, self.base.r2], -1)),
        };
        let other = local_leaf(model, target[0], target[1], self.kind, self.order())?;
        // unstable: F(L_x(τ/λ(x))) vs L_Fx(τ); stable: F⁻¹(L_x(λ(F⁻¹x)τ)) vs L_F⁻¹x(τ)
        let mut worst = 0.0f64;
        for i in 0..=samples {
            let tau = radius * (2.0 * i as f64 / samples as f64 - 1.0);
            let (a, b) = match self.kind {
                LeafKind::Unstable => (model.iterate_raw(&self.eval(tau / self.multiplier), sign), other.eval(tau)),
                LeafKind::Stable => (model.iterate_raw(&self.eval(tau * other.multiplier), sign), other.eval(tau)),
            };
            let d = a.to_array().iter().zip(b.to_array()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            worst = worst.max(d);
        }
        Ok(worst)
    }
}

/// Grows a local leaf by n iterations over the parameter interval
/// [σ_a, σ_b], bisecting the parameter wherever consecutive images are
/// farther apart than `h`.
pub fn grow_leaf(model: &Model<f64>, leaf: &LeafCurve, n: usize, sigma_range: (f64, f64), h: f64, bx: &DomainBox) -> Result<LeafCurve, NhimError> {
    const MAX_SAMPLES: usize = 400_000;
    let mut g = leaf.clone();
    g.steps = leaf.steps + n;
    let (a, b) = sigma_range;
    let mut sig = vec![a, b];
    let mut pts = vec![g.grown_point(model, a), g.grown_point(model, b)];
    let mut out_s = vec![sig[0]];
    let mut out_p = vec![pts[0].clone()];
    // depth-first refinement using a stack of pending right endpoints
    sig.remove(0);
    pts.remove(0);
    let mut stack_s = vec![b];
    let mut stack_p = vec![pts.pop().unwrap()];
    while let Some(sr) = stack_s.pop() {
        let pr = stack_p.pop().unwrap();
        let sl = *out_s.last().unwrap();
        let pl = out_p.last().unwrap();
        let gap = {
            let d = crate::arnold_model::section_diff(pl, &pr);
            d.iter().map(|x| x * x).sum::<f64>().sqrt()
        };
        if gap > h && sr - sl > 1e-15 * sr.abs().max(1e-300) {
            let sm = 0.5 * (sl + sr);
            let pm = g.grown_point(model, sm);
            stack_s.push(sr);
            stack_p.push(pr);
            stack_s.push(sm);
            stack_p.push(pm);
            if out_s.len() + stack_s.len() > MAX_SAMPLES {
                return Err(NhimError::TooManySamples(MAX_SAMPLES));
            }
        } else {
            if !bx.contains(&pr) {
                return Err(NhimError::LeftDomain(pr.to_array()));
            }
            out_s.push(sr);
            out_p.push(pr);
        }
    }
    if !bx.contains(&out_p[0]) {
        return Err(NhimError::LeftDomain(out_p[0].to_array()));
    }
    let mut arc = vec![0.0];
    for w in out_p.windows(2) {
        let d = crate::arnold_model::section_diff(&w[0], &w[1]);
        arc.push(arc.last().unwrap() + d.iter().map(|x| x * x).sum::<f64>().sqrt());
    }
    g.sigma = out_s;
    g.samples = out_p;
    g.arc = arc;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arnold_model::ModelParams;
    use crate::pendulum_oracle::separatrix_r1;

    fn model(eps: f64, mu: f64, steps: usize) -> Model<f64> {
        Model::new(&ModelParams::new(eps, mu, steps, 4).unwrap(), &0.0)
    }

    #[test]
    fn torus_is_invariant() {
        let m = model(0.25, 0.01, 128);
        let t = Torus { omega: 0.37 };
        assert!(t.invariance_residual(&m, 1.1, 20) <= 1e-12);
    }

    #[test]
    fn discrepancy_examples() {
        assert!(minimality_proxy(&Torus { omega: 0.5 }, 1000) >= 0.5);
        assert!(minimality_proxy(&Torus { omega: 0.5 }, 7) >= 0.5);
        assert_eq!(minimality_proxy(&Torus { omega: 0.0 }, 100), 1.0);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        assert!(minimality_proxy(&Torus { omega: g }, 10_000) <= 1e-3);
    }

    #[test]
    fn derived_constants_by_substitution() {
        let c = HyperbolicityConstants::from_lambda(0.6);
        assert!((c.lambda_bar - 0.8).abs() < 1e-15);
        assert!((c.eps_nu - 1.0 / 48.0).abs() < 1e-15);
        assert!((c.kappa - 0.1).abs() < 1e-15);
        assert!((c.alpha_tilde - 4.8 / 5.8).abs() < 1e-15);
        assert!((c.beta - 0.913_793_103_448_275_9).abs() < 1e-12);
        // both forms of ε_ν agree
        assert!((c.eps_nu - (1.0 - 0.6) / (12.0 * 1.6)).abs() < 1e-15);
        assert!(c.invariants_hold());
        assert!((c.h_bound() - 0.2 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn frame_at_mu_zero_is_saddle_frame() {
        // the discrete map's eigenvectors differ from the flow's by O(dt⁴)
        let m = model(1.0, 0.0, 512);
        let f = splitting_frame(&m, 0.4, 0.3).unwrap();
        let s = 0.5f64.sqrt();
        assert!((f.e_u[0] - s).abs() < 1e-8 && (f.e_u[1] - s).abs() < 1e-8);
        assert!((f.e_s[0] - s).abs() < 1e-8 && (f.e_s[1] + s).abs() < 1e-8);
        assert!((f.lambda_s - (-2.0 * PI).exp()).abs() < 1e-10);
        assert!((f.lambda_u / (2.0 * PI).exp() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn frame_invariance_at_mu_positive() {
        let m = model(1.0, 0.01, 128);
        for (th, r) in [(0.1, 0.2), (2.0, 0.77), (4.5, 0.05)] {
            let f = splitting_frame(&m, th, r).unwrap();
            assert!(f.invariance_residual(&m).unwrap() <= 1e-8);
        }
    }

    #[test]
    fn constants_examples() {
        let grid = SampleGrid::standard(Band::default(), 0.05, 3);
        let m = model(1.0, 0.0, 512);
        let rep = estimate_constants(&m, &grid, 3, 0.05).unwrap();
        assert!((rep.sup_contraction - 0.001_867_442_731_707_988_8).abs() < 1e-9);
        assert!((rep.tangential_norm - (PI + (PI * PI + 1.0).sqrt())).abs() < 1e-12);
        assert!(rep.rate_condition_holds && rep.controllable);
        assert!(rep.constants.lambda < 0.013 && rep.constants.lambda > 0.011);
        let m = model(0.25, 0.0, 128);
        assert_eq!(estimate_constants(&m, &grid, 3, 0.05), Err(NhimError::NotNormallyHyperbolic(3)));
    }

    #[test]
    fn unstable_leaf_tangent_at_mu_zero() {
        let m = model(0.25, 0.0, 512);
        let l = local_leaf(&m, 0.3, 0.2, LeafKind::Unstable, 4).unwrap();
        let t = l.coeffs[1];
        assert!((t[1] / t[0] - 0.5).abs() < 1e-9);
        assert!(t[2].abs() < 1e-14 && t[3].abs() < 1e-14);
        // order one is the straight segment along e_u
        let l1 = local_leaf(&m, 0.3, 0.2, LeafKind::Unstable, 1).unwrap();
        let p = l1.eval(0.01);
        assert!((p.r1 / p.theta1 - t[1] / t[0]).abs() < 1e-14);
    }

    #[test]
    fn leaf_invariance_residual_order3() {
        let m = model(1.0, 0.001, 128);
        let l = local_leaf(&m, 0.9, 0.4, LeafKind::Unstable, 3).unwrap();
        assert!(l.invariance_residual(&m, 0.1, 20).unwrap() <= 1e-6);
        let l = local_leaf(&m, 0.9, 0.4, LeafKind::Stable, 3).unwrap();
        assert!(l.invariance_residual(&m, 0.1, 20).unwrap() <= 1e-6);
    }

    #[test]
    fn grown_leaf_matches_separatrix() {
        let eps = 0.25;
        let m = model(eps, 0.0, 256);
        let l = local_leaf(&m, 0.0, 0.0, LeafKind::Unstable, 10).unwrap();
        let lam = l.multiplier;
        let g = grow_leaf(&m, &l, 3, (0.05 / lam.powi(3), 0.5), 1e-3, &DomainBox::default()).unwrap();
        let mut worst = 0.0f64;
        let mut reached = 0.0f64;
        for p in &g.samples {
            if p.theta1 >= 0.1 && p.theta1 <= PI {
                worst = worst.max((p.r1 - separatrix_r1(p.theta1, eps)).abs());
                reached = reached.max(p.theta1);
            }
        }
        assert!(reached > PI - 1e-2);
        assert!(worst <= 1e-6, "worst {worst}");
        let g0 = grow_leaf(&m, &l, 0, (0.0, 0.1), 1e-3, &DomainBox::default()).unwrap();
        assert_eq!(g0.samples[0], l.eval(0.0));
    }
}
