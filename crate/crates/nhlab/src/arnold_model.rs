//! Arnold's Hamiltonian on T³×R³, a splitting integrator for its flow and the
//! stroboscopic map on the section θ₃ = 0.
//!
//! H = ½(r₁²+r₂²) + r₃ + ε(cosθ₁−1)(1 + μ(cosθ₂ + sinθ₃)).
//! The drift ½(r₁²+r₂²)+r₃ and the kick ε(cosθ₁−1)(…) are both solved
//! exactly, so every composition of them is symplectic.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Mat, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("epsilon must be positive, got {0}")]
    Epsilon(f64),
    #[error("mu must be non-negative, got {0}")]
    Mu(f64),
    #[error("steps per period must be a power of two, got {0}")]
    Steps(usize),
    #[error("integrator order must be 2 or 4, got {0}")]
    Order(u8),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub epsilon: f64,
    pub mu: f64,
    /// Integrator steps per period; dt = 2π / steps.
    pub steps: usize,
    pub order: u8,
}

impl ModelParams {
    pub fn new(epsilon: f64, mu: f64, steps: usize, order: u8) -> Result<Self, ModelError> {
        if !(epsilon > 0.0) {
            return Err(ModelError::Epsilon(epsilon));
        }
        if !(mu >= 0.0) {
            return Err(ModelError::Mu(mu));
        }
        if steps == 0 || !steps.is_power_of_two() {
            return Err(ModelError::Steps(steps));
        }
        if order != 2 && order != 4 {
            return Err(ModelError::Order(order));
        }
        Ok(ModelParams { epsilon, mu, steps, order })
    }
    pub fn dt(&self) -> f64 {
        2.0 * PI / self.steps as f64
    }
    pub fn with_mu(&self, mu: f64) -> Self {
        ModelParams { mu, ..*self }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhasePoint<R = f64> {
    pub theta: [R; 3],
    pub r: [R; 3],
}

/// A point of the section θ₃ = 0, in the order (θ₁, r₁, θ₂, r₂).
#[derive(Clone, Debug, PartialEq)]
pub struct SectionPoint<R = f64> {
    pub theta1: R,
    pub r1: R,
    pub theta2: R,
    pub r2: R,
}

impl<R: Real> SectionPoint<R> {
    pub fn new(theta1: R, r1: R, theta2: R, r2: R) -> Self {
        SectionPoint { theta1, r1, theta2, r2 }
    }
    pub fn to_array(&self) -> [R; 4] {
        [self.theta1.clone(), self.r1.clone(), self.theta2.clone(), self.r2.clone()]
    }
    pub fn from_array(a: [R; 4]) -> Self {
        let [theta1, r1, theta2, r2] = a;
        SectionPoint { theta1, r1, theta2, r2 }
    }
    pub fn to_f64(&self) -> SectionPoint<f64> {
        SectionPoint {
            theta1: self.theta1.to_f64(),
            r1: self.r1.to_f64(),
            theta2: self.theta2.to_f64(),
            r2: self.r2.to_f64(),
        }
    }
    pub fn lift(proto: &R, s: &SectionPoint<f64>) -> Self {
        SectionPoint {
            theta1: proto.lift(s.theta1),
            r1: proto.lift(s.r1),
            theta2: proto.lift(s.theta2),
            r2: proto.lift(s.r2),
        }
    }
    pub fn reduced(&self) -> Self {
        SectionPoint {
            theta1: self.theta1.rem_two_pi(),
            r1: self.r1.clone(),
            theta2: self.theta2.rem_two_pi(),
            r2: self.r2.clone(),
        }
    }
    pub fn to_phase(&self) -> PhasePoint<R> {
        let z = self.r1.zero();
        PhasePoint {
            theta: [self.theta1.clone(), self.theta2.clone(), z.clone()],
            r: [self.r1.clone(), self.r2.clone(), z],
        }
    }
}

impl SectionPoint<f64> {
    pub fn on_n(theta2: f64, r2: f64) -> Self {
        SectionPoint { theta1: 0.0, r1: 0.0, theta2, r2 }
    }
}

/// Signed angle in (−π, π].
pub fn wrap_signed(a: f64) -> f64 {
    let mut x = a.rem_euclid(2.0 * PI);
    if x > PI {
        x -= 2.0 * PI;
    }
    x
}

/// Section-coordinate difference with both angles wrapped to (−π, π].
pub fn section_diff(a: &SectionPoint<f64>, b: &SectionPoint<f64>) -> [f64; 4] {
    [wrap_signed(a.theta1 - b.theta1), a.r1 - b.r1, wrap_signed(a.theta2 - b.theta2), a.r2 - b.r2]
}

pub fn section_dist(a: &SectionPoint<f64>, b: &SectionPoint<f64>) -> f64 {
    section_diff(a, b).iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Derivative of the section map in (θ₁, r₁, θ₂, r₂).
#[derive(Clone, Debug, PartialEq)]
pub struct Jacobian {
    pub m: Mat,
}

pub fn symplectic_form() -> Mat {
    Mat::from_rows(&[
        &[0.0, 1.0, 0.0, 0.0],
        &[-1.0, 0.0, 0.0, 0.0],
        &[0.0, 0.0, 0.0, 1.0],
        &[0.0, 0.0, -1.0, 0.0],
    ])
}

impl Jacobian {
    pub fn from_array(t: &[[f64; 4]; 4]) -> Self {
        Jacobian { m: Mat::from_fn(4, 4, |i, j| t[i][j]) }
    }
    /// ‖mᵀJm − J‖∞.
    pub fn symplectic_defect(&self) -> f64 {
        let j = symplectic_form();
        self.m.transpose().mul(&j).mul(&self.m).sub(&j).inf_norm()
    }
    pub fn det(&self) -> f64 {
        self.m.0.determinant()
    }
}

#[derive(Clone, Debug)]
enum Stage<R> {
    Drift(R),
    Kick { h: R, s3: R },
}

const W1: f64 = 1.351_207_191_959_657_6;

fn stage_weights(order: u8) -> (Vec<f64>, Vec<f64>) {
    if order == 2 {
        (vec![0.5, 0.5], vec![1.0])
    } else {
        let w1 = 1.0 / (2.0 - 2f64.powf(1.0 / 3.0));
        debug_assert!((w1 - W1).abs() < 1e-15);
        let w0 = 1.0 - 2.0 * w1;
        (vec![w1 / 2.0, (w1 + w0) / 2.0, (w0 + w1) / 2.0, w1 / 2.0], vec![w1, w0, w1])
    }
}

/// The integrator specialised to one parameter set and one precision.
///
/// The θ₃ trigonometry over one period is tabulated once, so repeated section
/// maps only evaluate the angle-dependent kicks.
#[derive(Clone, Debug)]
pub struct Model<R = f64> {
    pub params: ModelParams,
    eps: R,
    mu: R,
    dt: R,
    drift_w: Vec<f64>,
    kick_w: Vec<f64>,
    forward: Vec<Stage<R>>,
    backward: Vec<Stage<R>>,
}

impl<R: Real> Model<R> {
    pub fn new(params: &ModelParams, proto: &R) -> Self {
        let (dw, kw) = stage_weights(params.order);
        let dt = proto.two_pi() / params.steps as f64;
        let mut m = Model {
            params: *params,
            eps: proto.lift(params.epsilon),
            mu: proto.lift(params.mu),
            dt: dt.clone(),
            drift_w: dw,
            kick_w: kw,
            forward: vec![],
            backward: vec![],
        };
        m.forward = m.schedule(proto, dt.clone());
        m.backward = m.schedule(proto, -dt);
        m
    }

    fn schedule(&self, proto: &R, h: R) -> Vec<Stage<R>> {
        let mut out = Vec::new();
        let mut t = proto.zero();
        for _ in 0..self.params.steps {
            for (i, &d) in self.drift_w.iter().enumerate() {
                let hd = h.clone() * d;
                t += hd.clone();
                out.push(Stage::Drift(hd));
                if i < self.kick_w.len() {
                    out.push(Stage::Kick { h: h.clone() * self.kick_w[i], s3: t.sin() });
                }
            }
        }
        out
    }

    pub fn dt(&self) -> R {
        self.dt.clone()
    }

    pub fn hamiltonian(&self, p: &PhasePoint<R>) -> R {
        hamiltonian_generic(p, &self.eps, &self.mu)
    }

    #[inline]
    fn kick(&self, th1: &R, th2: &R, s3: &R, h: &R) -> (R, R, R, [R; 3]) {
        let half = th1.clone() / 2.0;
        let (q, cq) = half.sin_cos();
        let s1 = q.clone() * cq * 2.0;
        let cm1 = -(q.clone() * q) * 2.0;
        let (s2, c2) = th2.sin_cos();
        let g = c2.clone() + s3.clone();
        let he = h.clone() * self.eps.clone();
        let hem = he.clone() * self.mu.clone();
        let dr1 = he.clone() * s1.clone() * (self.mu.clone() * g.clone() + 1.0);
        let dr2 = hem.clone() * cm1.clone() * s2.clone();
        let a11 = he * (cm1.clone() + 1.0) * (self.mu.clone() * g + 1.0);
        let a12 = -(hem.clone() * s1 * s2);
        let a22 = hem * cm1.clone() * c2;
        (dr1, dr2, cm1, [a11, a12, a22])
    }

    fn run(&self, s: &SectionPoint<R>, stages: &[Stage<R>], mut tan: Option<&mut [[R; 4]; 4]>) -> SectionPoint<R> {
        let mut th1 = s.theta1.clone();
        let mut r1 = s.r1.clone();
        let mut th2 = s.theta2.clone();
        let mut r2 = s.r2.clone();
        for st in stages {
            match st {
                Stage::Drift(h) => {
                    th1 += r1.clone() * h.clone();
                    th2 += r2.clone() * h.clone();
                    if let Some(t) = tan.as_deref_mut() {
                        for j in 0..4 {
                            let a = t[1][j].clone() * h.clone();
                            t[0][j] += a;
                            let b = t[3][j].clone() * h.clone();
                            t[2][j] += b;
                        }
                    }
                }
                Stage::Kick { h, s3 } => {
                    let (dr1, dr2, _, a) = self.kick(&th1, &th2, s3, h);
                    r1 += dr1;
                    r2 += dr2;
                    if let Some(t) = tan.as_deref_mut() {
                        for j in 0..4 {
                            let x1 = t[0][j].clone();
                            let x2 = t[2][j].clone();
                            t[1][j] += a[0].clone() * x1.clone() + a[1].clone() * x2.clone();
                            t[3][j] += a[1].clone() * x1 + a[2].clone() * x2;
                        }
                    }
                }
            }
        }
        SectionPoint { theta1: th1, r1, theta2: th2, r2 }
    }

    /// Section map F without angle reduction.
    pub fn section_map_raw(&self, s: &SectionPoint<R>) -> SectionPoint<R> {
        self.run(s, &self.forward, None)
    }

    pub fn section_map(&self, s: &SectionPoint<R>) -> SectionPoint<R> {
        self.section_map_raw(s).reduced()
    }

    pub fn section_map_inv_raw(&self, s: &SectionPoint<R>) -> SectionPoint<R> {
        self.run(s, &self.backward, None)
    }

    pub fn section_map_inv(&self, s: &SectionPoint<R>) -> SectionPoint<R> {
        self.section_map_inv_raw(s).reduced()
    }

    /// F and DF, both exact for the discrete scheme.
    pub fn section_map_with_tangent_raw(&self, s: &SectionPoint<R>) -> (SectionPoint<R>, [[R; 4]; 4]) {
        let mut t = identity4(&s.theta1);
        let y = self.run(s, &self.forward, Some(&mut t));
        (y, t)
    }

    pub fn section_map_inv_with_tangent_raw(&self, s: &SectionPoint<R>) -> (SectionPoint<R>, [[R; 4]; 4]) {
        let mut t = identity4(&s.theta1);
        let y = self.run(s, &self.backward, Some(&mut t));
        (y, t)
    }

    /// Fⁿ for n ≥ 0 and (F⁻¹)^|n| for n < 0, without angle reduction.
    pub fn iterate_raw(&self, s: &SectionPoint<R>, n: i64) -> SectionPoint<R> {
        let mut y = s.clone();
        for _ in 0..n.unsigned_abs() {
            y = if n >= 0 { self.section_map_raw(&y) } else { self.section_map_inv_raw(&y) };
        }
        y
    }

    /// Flow of the full system for `nsteps` integrator steps (negative runs backward).
    pub fn flow(&self, p: &PhasePoint<R>, nsteps: i64) -> PhasePoint<R> {
        let h = if nsteps >= 0 { self.dt.clone() } else { -self.dt.clone() };
        let mut th = p.theta.clone();
        let mut r = p.r.clone();
        for _ in 0..nsteps.unsigned_abs() {
            for (i, &d) in self.drift_w.iter().enumerate() {
                let hd = h.clone() * d;
                th[0] += r[0].clone() * hd.clone();
                th[1] += r[1].clone() * hd.clone();
                th[2] += hd;
                if i < self.kick_w.len() {
                    let hk = h.clone() * self.kick_w[i];
                    let (s3, c3) = th[2].sin_cos();
                    let (dr1, dr2, cm1, _) = self.kick(&th[0], &th[1], &s3, &hk);
                    r[0] += dr1;
                    r[1] += dr2;
                    r[2] -= hk * self.eps.clone() * self.mu.clone() * cm1 * c3;
                }
            }
        }
        PhasePoint { theta: th, r }
    }
}

fn identity4<R: Real>(proto: &R) -> [[R; 4]; 4] {
    let z = proto.zero();
    let o = proto.one();
    std::array::from_fn(|i| std::array::from_fn(|j| if i == j { o.clone() } else { z.clone() }))
}

pub fn hamiltonian_generic<R: Real>(p: &PhasePoint<R>, eps: &R, mu: &R) -> R {
    let q = (p.theta[0].clone() / 2.0).sin();
    let cm1 = -(q.clone() * q) * 2.0;
    let kin = (p.r[0].clone() * p.r[0].clone() + p.r[1].clone() * p.r[1].clone()) / 2.0 + p.r[2].clone();
    kin + eps.clone() * cm1 * (mu.clone() * (p.theta[1].cos() + p.theta[2].sin()) + 1.0)
}

/// H_{ε,μ}(θ, r).
pub fn hamiltonian(p: &PhasePoint<f64>, params: &ModelParams) -> f64 {
    hamiltonian_generic(p, &params.epsilon, &params.mu)
}

/// Flow by time `t`, which must be a whole number of steps.
pub fn flow(p: &PhasePoint<f64>, t: f64, params: &ModelParams) -> PhasePoint<f64> {
    let n = (t / params.dt()).round() as i64;
    assert!((n as f64 * params.dt() - t).abs() <= 1e-9 * t.abs().max(1.0), "t must be a multiple of dt");
    Model::new(params, &0.0).flow(p, n)
}

pub fn section_map(s: &SectionPoint<f64>, params: &ModelParams) -> SectionPoint<f64> {
    Model::new(params, &0.0).section_map(s)
}

pub fn section_map_with_tangent(s: &SectionPoint<f64>, params: &ModelParams) -> (SectionPoint<f64>, Jacobian) {
    let (y, t) = Model::new(params, &0.0).section_map_with_tangent_raw(s);
    (y.reduced(), Jacobian::from_array(&t))
}

impl Model<f64> {
    pub fn jacobian(&self, s: &SectionPoint<f64>) -> Jacobian {
        Jacobian::from_array(&self.section_map_with_tangent_raw(s).1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(eps: f64, mu: f64, steps: usize) -> ModelParams {
        ModelParams::new(eps, mu, steps, 4).unwrap()
    }

    #[test]
    fn hamiltonian_examples() {
        let pp = p(0.25, 0.3, 64);
        let z = PhasePoint { theta: [0.0; 3], r: [0.0; 3] };
        assert_eq!(hamiltonian(&z, &pp), 0.0);
        let a = PhasePoint { theta: [PI, 0.0, 0.0], r: [0.0; 3] };
        assert!((hamiltonian(&a, &p(0.25, 0.0, 64)) + 0.5).abs() < 1e-15);
        let b = PhasePoint { theta: [PI, PI / 2.0, 0.0], r: [1.0, 0.0, 0.0] };
        assert!(hamiltonian(&b, &p(0.25, 0.1, 64)).abs() < 1e-15);
    }

    #[test]
    fn params_validation() {
        assert!(ModelParams::new(0.0, 0.0, 64, 4).is_err());
        assert!(ModelParams::new(0.25, -1.0, 64, 4).is_err());
        assert!(ModelParams::new(0.25, 0.0, 60, 4).is_err());
        assert!(ModelParams::new(0.25, 0.0, 64, 3).is_err());
    }

    #[test]
    fn flow_on_n_is_linear_drift() {
        let pp = p(0.25, 0.0, 256);
        let x = PhasePoint { theta: [0.0, 0.3, 0.0], r: [0.0, 0.7, 0.0] };
        let y = flow(&x, 2.0 * PI, &pp);
        assert!((y.theta[1] - (0.3 + 0.7 * 2.0 * PI)).abs() < 1e-12);
        assert_eq!(y.r[1], 0.7);
        assert_eq!(flow(&x, 0.0, &pp), x);
    }

    #[test]
    fn separatrix_energy_conserved() {
        let pp = p(0.25, 0.0, 4096);
        let m = Model::new(&pp, &0.0);
        let x = PhasePoint { theta: [PI, 0.0, 0.0], r: [1.0, 0.0, 0.0] };
        let y = m.flow(&x, 4096);
        let hp = 0.5 * y.r[0] * y.r[0] + 0.25 * (y.theta[0].cos() - 1.0);
        assert!(hp.abs() < 1e-9);
    }

    #[test]
    fn section_map_examples() {
        let pp = p(0.25, 0.01, 256);
        let y = section_map(&SectionPoint::new(0.0, 0.0, 0.0, 0.5), &pp);
        assert!((y.theta2 - PI).abs() < 1e-12 && y.theta1 == 0.0 && y.r1 == 0.0 && y.r2 == 0.5);
        let y = section_map(&SectionPoint::new(0.0, 0.0, 1.1, 0.0), &pp);
        assert!((y.theta2 - 1.1).abs() < 1e-14);
    }

    #[test]
    fn saddle_multipliers() {
        let pp = p(0.25, 0.0, 2048);
        let (_, j) = section_map_with_tangent(&SectionPoint::new(0.0, 0.0, 0.4, 0.2), &pp);
        let a = j.m.get(0, 0);
        let b = j.m.get(0, 1);
        let c = j.m.get(1, 0);
        let d = j.m.get(1, 1);
        let tr = a + d;
        let det = a * d - b * c;
        let disc = (tr * tr - 4.0 * det).sqrt();
        let lu = (tr + disc) / 2.0;
        let ls = (tr - disc) / 2.0;
        assert!((lu - PI.exp()).abs() / PI.exp() < 1e-9);
        assert!((ls - (-PI).exp()).abs() / (-PI).exp() < 1e-9);
        // shear block
        assert!((j.m.get(2, 3) - 2.0 * PI).abs() < 1e-12);
        assert!(j.m.get(0, 2).abs() < 1e-15 && j.m.get(2, 0).abs() < 1e-15);
    }

    #[test]
    fn tangent_matches_finite_differences() {
        let pp = p(0.25, 0.01, 256);
        let m = Model::new(&pp, &0.0);
        let s = SectionPoint::new(1.3, 0.4, 0.7, 0.45);
        let (_, t) = m.section_map_with_tangent_raw(&s);
        let h = 1e-6;
        for j in 0..4 {
            let mut a = s.to_array();
            let mut b = s.to_array();
            a[j] += h;
            b[j] -= h;
            let fa = m.section_map_raw(&SectionPoint::from_array(a)).to_array();
            let fb = m.section_map_raw(&SectionPoint::from_array(b)).to_array();
            for i in 0..4 {
                assert!(((fa[i] - fb[i]) / (2.0 * h) - t[i][j]).abs() < 1e-6);
            }
        }
        assert!((Jacobian::from_array(&t).det() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn inverse_map_undoes_forward() {
        let pp = p(0.25, 0.01, 128);
        let m = Model::new(&pp, &0.0);
        let s = SectionPoint::new(2.0, -0.3, 5.0, 0.55);
        let back = m.section_map_inv_raw(&m.section_map_raw(&s));
        for (a, b) in back.to_array().iter().zip(s.to_array()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
