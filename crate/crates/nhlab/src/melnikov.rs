//! First-order splitting of W^u(T_ω) and W^s(N), and a direct gap oracle.
//!
//! Gaps are measured where the unperturbed separatrix crosses θ₁ = π on the
//! section. There ∇H_p = (0, r₁) is normal to the separatrix, so the first
//! order r₁-separation is M(θ₂⁰)/|∇H_p| with M the energy Melnikov integral.

use std::f64::consts::PI;

use thiserror::Error;

use crate::arnold_model::{hamiltonian_generic, Model, ModelParams, PhasePoint, SectionPoint};
use crate::jet::Taylor;
use crate::nhim::{self, local_leaf, LeafCurve, LeafKind};
use crate::numerics::{newton_solve, quad, Mat};
use crate::pendulum_oracle::{separatrix_time, separatrix_time_param};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MelnikovError {
    #[error("quadrature tolerance not reached")]
    ToleranceNotReached,
    #[error("grown leaf left the domain: {0}")]
    LeftDomain(String),
    #[error("Newton iteration did not converge: {0}")]
    NoConvergence(String),
    #[error("tangency suspected: |slope| = {0:e}")]
    TangencySuspected(f64),
    #[error("profile has no sign change")]
    NoSignChange,
}

/// Order of the local leaf jets used by the oracle.
pub const LEAF_ORDER: usize = 6;
/// Local leaf parameter at the start of the fundamental domain.
pub const SIGMA0: f64 = 0.005;

#[derive(Clone, Debug, PartialEq)]
pub struct MelnikovProfile {
    pub omega: f64,
    pub mu: f64,
    pub phases: Vec<f64>,
    /// First-order r₁-splitting per unit μ, M(θ₂⁰)/(μ|∇H_p|).
    pub reduced: Vec<f64>,
    /// First-order r₁-splitting μ·reduced.
    pub values: Vec<f64>,
    /// Direct gap measurements, if requested.
    pub oracle_values: Vec<f64>,
    /// Zeros of the reduced profile with the slope of `values` there.
    pub zeros: Vec<(f64, f64)>,
}

/// ∂V/∂θ₁ of the μ-coefficient V = H|_{μ=1} − H|_{μ=0}, through a jet in θ₁.
fn dv_dtheta1(epsilon: f64, th1: f64, th2: f64, th3: f64) -> f64 {
    let p = PhasePoint {
        theta: [Taylor::variable(th1, 1), Taylor::constant(th2, 1), Taylor::constant(th3, 1)],
        r: [Taylor::constant(0.0, 1), Taylor::constant(0.0, 1), Taylor::constant(0.0, 1)],
    };
    let e = Taylor::constant(epsilon, 1);
    let v = hamiltonian_generic(&p, &e, &Taylor::constant(1.0, 1)) - hamiltonian_generic(&p, &e, &Taylor::constant(0.0, 1));
    v.c[1]
}

/// dH_p/dt per unit μ along the homoclinic through (π, 2√ε) at t = 0, for the
/// phases θ₂ = θ₂⁰ + ωt, θ₃ = t.
pub fn integrand(epsilon: f64, omega: f64, theta2_0: f64, t: f64) -> f64 {
    let (th1, r1) = separatrix_time_param(t, epsilon);
    -r1 * dv_dtheta1(epsilon, th1, theta2_0 + omega * t, t)
}

/// Truncation time where the integrand envelope 2ε|r₁ sin θ₁| drops below 1e-14.
pub fn tail_cutoff(epsilon: f64) -> f64 {
    let env = |t: f64| {
        let (th, r) = separatrix_time_param(t, epsilon);
        2.0 * epsilon * (r * th.sin()).abs()
    };
    let mut t = 1.0 / epsilon.sqrt();
    while env(t) >= 1e-14 || env(-t) >= 1e-14 {
        t *= 1.25;
    }
    t
}

/// M(θ₂⁰)/μ, the energy Melnikov integral per unit μ.
pub fn melnikov_energy(epsilon: f64, omega: f64, theta2_0: f64) -> Result<f64, MelnikovError> {
    let t = tail_cutoff(epsilon);
    let f = |x: &f64| integrand(epsilon, omega, theta2_0, *x);
    // split at 0 so each half decays monotonically
    let a = quad(f, &-t, &0.0, 1e-13).map_err(|_| MelnikovError::ToleranceNotReached)?;
    let b = quad(f, &0.0, &t, 1e-13).map_err(|_| MelnikovError::ToleranceNotReached)?;
    Ok(a.value + b.value)
}

/// Reduced first-order r₁-splitting M/(μ|∇H_p|) at θ₁ = π.
pub fn reduced_splitting(epsilon: f64, omega: f64, theta2_0: f64) -> Result<f64, MelnikovError> {
    Ok(melnikov_energy(epsilon, omega, theta2_0)? / (2.0 * epsilon.sqrt()))
}

/// Coefficients (I_ω, I₁) of the two-phase integral per unit μ,
/// M(θ₂⁰, θ₃⁰)/μ = −I_ω sin θ₂⁰ + I₁ cos θ₃⁰, read off the one-phase profile.
pub fn melnikov_basis(epsilon: f64, omega: f64) -> Result<(f64, f64), MelnikovError> {
    let m = |p: f64| melnikov_energy(epsilon, omega, p);
    let i_w = 0.5 * (m(-0.5 * PI)? - m(0.5 * PI)?);
    Ok((i_w, m(0.0)?))
}

/// ε∫(cos θ₁ − 1) cos ωt dt along the homoclinic; the first-order change of
/// r₂ over one excursion is μ sin θ₂⁰ times this.
pub fn drift_coefficient(epsilon: f64, omega: f64) -> Result<f64, MelnikovError> {
    let t = tail_cutoff(epsilon);
    let f = |x: &f64| {
        let (th1, _) = separatrix_time_param(*x, epsilon);
        epsilon * (th1.cos() - 1.0) * (omega * x).cos()
    };
    // only used to rank candidate zeros, so a looser tolerance suffices
    let a = quad(f, &-t, &0.0, 1e-10).map_err(|_| MelnikovError::ToleranceNotReached)?;
    let b = quad(f, &0.0, &t, 1e-10).map_err(|_| MelnikovError::ToleranceNotReached)?;
    Ok(a.value + b.value)
}

/// Phases (θ₂⁰, θ₃⁰) at which the unperturbed orbit through a section point
/// y near the separatrix crossed θ₁ = π.
pub fn crossing_phases(epsilon: f64, y: &SectionPoint<f64>) -> (f64, f64) {
    let t = separatrix_time(y.theta1.rem_euclid(2.0 * PI), epsilon);
    (y.theta2 - y.r2 * t, -t)
}

pub fn transversality_floor(epsilon: f64) -> f64 {
    1e-6 * epsilon
}

/// Evaluates the profile on `phase_grid`; `with_oracle` adds direct gaps.
pub fn melnikov_profile(omega: f64, params: &ModelParams, phase_grid: &[f64], with_oracle: bool) -> Result<MelnikovProfile, MelnikovError> {
    let eps = params.epsilon;
    let reduced = phase_grid.iter().map(|&p| reduced_splitting(eps, omega, p)).collect::<Result<Vec<_>, _>>()?;
    let values = reduced.iter().map(|r| r * params.mu).collect();
    let oracle_values = if with_oracle {
        phase_grid.iter().map(|&p| manifold_gap_oracle(omega, p, params).map(|g| g.gap)).collect::<Result<Vec<_>, _>>()?
    } else {
        vec![]
    };
    let mut zeros = vec![];
    for (z, _) in reduced_zeros(eps, omega)? {
        let h = 1e-6;
        let slope = params.mu * (reduced_splitting(eps, omega, z + h)? - reduced_splitting(eps, omega, z - h)?) / (2.0 * h);
        if slope.abs() > transversality_floor(eps) {
            zeros.push((z, slope));
        }
    }
    Ok(MelnikovProfile { omega, mu: params.mu, phases: phase_grid.to_vec(), reduced, values, oracle_values, zeros })
}

/// Zeros of the reduced profile in [0, 2π) with their reduced slopes.
pub fn reduced_zeros(epsilon: f64, omega: f64) -> Result<Vec<(f64, f64)>, MelnikovError> {
    let n = 64;
    let f = |p: f64| reduced_splitting(epsilon, omega, p);
    let grid: Vec<f64> = (0..=n).map(|k| 2.0 * PI * k as f64 / n as f64).collect();
    let vals = grid.iter().map(|&p| f(p)).collect::<Result<Vec<_>, _>>()?;
    let mut out = vec![];
    for k in 0..n {
        if vals[k] == 0.0 || vals[k] * vals[k + 1] < 0.0 {
            let (mut a, mut b, mut fa) = (grid[k], grid[k + 1], vals[k]);
            for _ in 0..60 {
                let m = 0.5 * (a + b);
                let fm = f(m)?;
                if fm == 0.0 {
                    a = m;
                    b = m;
                    break;
                }
                if fa * fm < 0.0 {
                    b = m;
                } else {
                    a = m;
                    fa = fm;
                }
            }
            let z = 0.5 * (a + b);
            let h = 1e-6;
            out.push((z, (f(z + h)? - f(z - h)?) / (2.0 * h)));
        }
    }
    Ok(out)
}

/// Result of one direct gap measurement at phase θ₂⁰.
#[derive(Clone, Debug, PartialEq)]
pub struct GapMeasurement {
    pub gap: f64,
    /// W^{uu}(a) crossing of θ₁ = π.
    pub unstable_point: SectionPoint<f64>,
    /// W^s(N) point with θ₁ = −π (the same point of the cylinder) at the same (θ₂, r₂).
    pub stable_point: SectionPoint<f64>,
    /// Base a ∈ T_ω of the unstable leaf.
    pub a: [f64; 2],
    /// Base b ∈ N of the stable leaf.
    pub b: [f64; 2],
    pub unstable_steps: usize,
    pub stable_steps: usize,
    pub sigma_u: f64,
    pub sigma_s: f64,
}

/// Leaf through F^{∓k}(base) grown k steps, evaluated at σ.
struct GrownLeaf {
    leaf: LeafCurve,
    steps: usize,
}

impl GrownLeaf {
    fn new(model: &Model<f64>, base: [f64; 2], kind: LeafKind, steps: usize) -> Result<Self, MelnikovError> {
        let back = match kind {
            LeafKind::Unstable => -(steps as i64),
            LeafKind::Stable => steps as i64,
        };
        let b = nhim::shear(base, back);
        let leaf = local_leaf(model, b[0], b[1], kind, LEAF_ORDER).map_err(|e| MelnikovError::LeftDomain(e.to_string()))?;
        Ok(GrownLeaf { leaf, steps: 0 }.with_steps(steps))
    }
    fn with_steps(mut self, steps: usize) -> Self {
        self.leaf.steps = steps;
        self.steps = steps;
        self
    }
    fn point(&self, model: &Model<f64>, sigma: f64) -> SectionPoint<f64> {
        self.leaf.grown_point(model, sigma)
    }
}

/// Number of growth steps after which the leaf at ±σ₀ has reached |θ₁| ≥ level.
fn crossing_steps(model: &Model<f64>, base: [f64; 2], kind: LeafKind, level: f64) -> Result<usize, MelnikovError> {
    let leaf = local_leaf(model, base[0], base[1], kind, LEAF_ORDER).map_err(|e| MelnikovError::LeftDomain(e.to_string()))?;
    let (sig, dir) = match kind {
        LeafKind::Unstable => (SIGMA0, 1i64),
        LeafKind::Stable => (-SIGMA0, -1),
    };
    let mut y = leaf.eval(sig);
    for k in 0..200 {
        if y.theta1.abs() >= level {
            return Ok(k);
        }
        y = model.iterate_raw(&y, dir);
        if !y.r1.is_finite() || y.r1.abs() > 10.0 {
            break;
        }
    }
    Err(MelnikovError::LeftDomain(format!("leaf never reached |θ₁| = {level}")))
}

fn solve(f: impl Fn(&[f64]) -> Vec<f64>, x0: &[f64], what: &str) -> Result<Vec<f64>, MelnikovError> {
    let h = 1e-7;
    let jac = |x: &[f64]| {
        let n = x.len();
        let mut cols = vec![];
        for j in 0..n {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += h;
            xm[j] -= h;
            let (fp, fm) = (f(&xp), f(&xm));
            cols.push((0..n).map(|i| (fp[i] - fm[i]) / (2.0 * h)).collect::<Vec<_>>());
        }
        Mat::from_fn(n, n, |i, j| cols[j][i])
    };
    newton_solve(&f, jac, x0, 5e-12, 40).map_err(|e| MelnikovError::NoConvergence(format!("{what}: {e}")))
}

/// Signed r₁-gap between W^{uu}(a), a ∈ T_ω, and W^s(N) at the θ₁ = π
/// crossing with θ₂ = θ₂⁰.
pub fn manifold_gap_oracle(omega: f64, theta2_0: f64, params: &ModelParams) -> Result<GapMeasurement, MelnikovError> {
    let model = Model::new(params, &0.0);
    let ku = crossing_steps(&model, [theta2_0, omega], LeafKind::Unstable, PI)?;
    // unknowns (θ₂ᵃ, ln σ): θ₁ = π and θ₂ = θ₂⁰ at the crossing
    let unstable = |x: &[f64]| -> Result<SectionPoint<f64>, MelnikovError> {
        let g = GrownLeaf::new(&model, [x[0], omega], LeafKind::Unstable, ku)?;
        Ok(g.point(&model, x[1].exp()))
    };
    let start = {
        // bracket the crossing on the fundamental domain for the nominal base
        let g = GrownLeaf::new(&model, [theta2_0, omega], LeafKind::Unstable, ku)?;
        bracket_crossing(|s| g.point(&model, s).theta1 - PI, SIGMA0 / model_multiplier(&g), SIGMA0)?
    };
    let fu = |x: &[f64]| match unstable(x) {
        Ok(p) => vec![p.theta1 - PI, p.theta2 - theta2_0],
        Err(_) => vec![f64::NAN; 2],
    };
    let xu = solve(fu, &[theta2_0, start.ln()], "unstable crossing")?;
    let pu = unstable(&xu)?;
    let (ps, b, ks, sigma_s) = stable_match(&model, &pu)?;
    Ok(GapMeasurement {
        gap: pu.r1 - ps.r1,
        unstable_point: pu,
        stable_point: ps,
        a: [xu[0], omega],
        b,
        unstable_steps: ku,
        stable_steps: ks,
        sigma_u: xu[1].exp(),
        sigma_s,
    })
}

/// The W^s(N) point with θ₁ = y.θ₁ − 2π and the (θ₂, r₂) of y, with its base,
/// growth steps and leaf parameter.
fn stable_match(model: &Model<f64>, y: &SectionPoint<f64>) -> Result<(SectionPoint<f64>, [f64; 2], usize, f64), MelnikovError> {
    let target = y.theta1 - 2.0 * PI;
    let ks = crossing_steps(model, [y.theta2, y.r2], LeafKind::Stable, -target)?;
    // unknowns (θ₂ᵇ, r₂ᵇ, ln|σ|)
    let stable = |x: &[f64]| -> Result<SectionPoint<f64>, MelnikovError> {
        let g = GrownLeaf::new(model, [x[0], x[1]], LeafKind::Stable, ks)?;
        Ok(g.point(model, -x[2].exp()))
    };
    let s_start = {
        let g = GrownLeaf::new(model, [y.theta2, y.r2], LeafKind::Stable, ks)?;
        bracket_crossing(|s| target - g.point(model, -s).theta1, SIGMA0 / stable_multiplier(&g), SIGMA0)?
    };
    let fs = |x: &[f64]| match stable(x) {
        Ok(p) => vec![p.theta1 - target, p.theta2 - y.theta2, p.r2 - y.r2],
        Err(_) => vec![f64::NAN; 3],
    };
    let xs = solve(fs, &[y.theta2, y.r2, s_start.ln()], "stable crossing")?;
    let ps = stable(&xs)?;
    Ok((ps, [xs[0], xs[1]], ks, -xs[2].exp()))
}

/// W^{uu}(a) for one fixed base a, grown to the first excursion; its points
/// over the fundamental domain sweep every time phase of the crossing.
pub struct LeafSweep {
    model: Model<f64>,
    grown: GrownLeaf,
    pub a: [f64; 2],
}

impl LeafSweep {
    pub fn new(params: &ModelParams, a: [f64; 2]) -> Result<Self, MelnikovError> {
        let model = Model::new(params, &0.0);
        let ku = crossing_steps(&model, a, LeafKind::Unstable, PI)?;
        let grown = GrownLeaf::new(&model, a, LeafKind::Unstable, ku)?;
        Ok(LeafSweep { model, grown, a })
    }
    /// Growth steps from the local leaf at F^{-k}(a).
    pub fn steps(&self) -> usize {
        self.grown.steps
    }
    /// Local leaf at F^{-k}(a).
    pub fn local(&self) -> &LeafCurve {
        &self.grown.leaf
    }
    /// Leaf parameters [σ₀/λ, σ₀] of one fundamental domain.
    pub fn domain(&self) -> (f64, f64) {
        (SIGMA0 / model_multiplier(&self.grown), SIGMA0)
    }
    pub fn point(&self, sigma: f64) -> SectionPoint<f64> {
        self.grown.point(&self.model, sigma)
    }
    /// r₁-gap to W^s(N) at the leaf point with parameter σ.
    pub fn gap(&self, sigma: f64) -> Result<GapMeasurement, MelnikovError> {
        let pu = self.point(sigma);
        if !(pu.theta1 > 0.05 && pu.theta1 < 2.0 * PI - 0.05) {
            return Err(MelnikovError::LeftDomain(format!("leaf point at θ₁ = {}", pu.theta1)));
        }
        let (ps, b, ks, sigma_s) = stable_match(&self.model, &pu)?;
        Ok(GapMeasurement {
            gap: pu.r1 - ps.r1,
            unstable_point: pu,
            stable_point: ps,
            a: self.a,
            b,
            unstable_steps: self.grown.steps,
            stable_steps: ks,
            sigma_u: sigma,
            sigma_s,
        })
    }
}

fn model_multiplier(g: &GrownLeaf) -> f64 {
    g.leaf.multiplier
}

fn stable_multiplier(g: &GrownLeaf) -> f64 {
    1.0 / g.leaf.multiplier
}

/// A root of `f` in [lo, hi·λ] found by bisection, after widening the
/// bracket geometrically.
fn bracket_crossing(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> Result<f64, MelnikovError> {
    let (mut a, mut b) = (lo, hi);
    let mut fa = f(a);
    let mut fb = f(b);
    let mut tries = 0;
    while fa * fb > 0.0 {
        tries += 1;
        if tries > 40 {
            return Err(MelnikovError::NoConvergence("no crossing in the fundamental domain".into()));
        }
        if fa > 0.0 {
            a *= 0.5;
            fa = f(a);
        } else {
            b *= 2.0;
            fb = f(b);
        }
    }
    for _ in 0..80 {
        let m = (a * b).sqrt();
        let fm = f(m);
        if fm * fa > 0.0 {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    Ok((a * b).sqrt())
}

/// A transverse heteroclinic point c ∈ W^{uu}(a) ∩ W^s(N).
#[derive(Clone, Debug, PartialEq)]
pub struct Heteroclinic {
    pub phase: f64,
    pub c: SectionPoint<f64>,
    /// d gap / d θ₂⁰ at the zero.
    pub slope: f64,
    pub melnikov_slope: f64,
    pub measurement: GapMeasurement,
    /// |u| of c in the leaf chart near N after the return.
    pub stable_residual: f64,
    /// Distance from c to an independently grown polyline of W^{uu}(a).
    pub unstable_residual: f64,
}

/// Newton on the oracle gap in θ₂⁰ from each zero of the profile; returns
/// the first transverse solution, ordered by closeness to `prefer`.
pub fn find_heteroclinic(omega: f64, params: &ModelParams, prefer: Option<f64>) -> Result<Heteroclinic, MelnikovError> {
    let mut zeros = reduced_zeros(params.epsilon, omega)?;
    if zeros.is_empty() {
        return Err(MelnikovError::NoSignChange);
    }
    if let Some(p) = prefer {
        zeros.sort_by(|a, b| crate::arnold_model::wrap_signed(a.0 - p).abs().total_cmp(&crate::arnold_model::wrap_signed(b.0 - p).abs()));
    }
    let (z0, mslope) = zeros[0];
    let gap = |p: f64| manifold_gap_oracle(omega, p, params);
    let h = 1e-5;
    let mut phase = z0;
    let mut slope = 0.0;
    for it in 0..20 {
        let g = gap(phase)?.gap;
        if it == 0 || g.abs() > 1e-9 {
            slope = (gap(phase + h)?.gap - gap(phase - h)?.gap) / (2.0 * h);
        }
        if slope.abs() <= transversality_floor(params.epsilon) {
            return Err(MelnikovError::TangencySuspected(slope));
        }
        if g.abs() <= 1e-14 {
            break;
        }
        let step = g / slope;
        phase -= step;
        if step.abs() < 1e-10 {
            break;
        }
    }
    let m = gap(phase)?;
    if m.gap.abs() > 1e-10 {
        return Err(MelnikovError::NoConvergence(format!("gap {:e} at the zero", m.gap)));
    }
    let c = m.unstable_point.clone();
    let stable_residual = stable_membership(params, &c, m.stable_steps)?;
    let unstable_residual = unstable_membership(params, &m)?;
    Ok(Heteroclinic { phase, c, slope, melnikov_slope: mslope * params.mu, measurement: m, stable_residual, unstable_residual })
}

/// Iterates c until it is within the chart near N and reads off |u|.
pub fn stable_membership(params: &ModelParams, c: &SectionPoint<f64>, steps: usize) -> Result<f64, MelnikovError> {
    let chart = crate::chart::LeafChart::build(params, 8, 0.2).map_err(|e| MelnikovError::LeftDomain(e.to_string()))?;
    stable_membership_in(&chart, c, steps)
}

/// As `stable_membership`, with a prebuilt chart.
pub fn stable_membership_in(chart: &crate::chart::LeafChart, c: &SectionPoint<f64>, steps: usize) -> Result<f64, MelnikovError> {
    let model = Model::new(&chart.params, &0.0);
    let mut y = c.clone();
    let mut best = f64::INFINITY;
    for _ in 0..steps + 2 {
        y = model.section_map_raw(&y);
        let near = SectionPoint::new(y.theta1 - 2.0 * PI, y.r1, y.theta2, y.r2);
        if near.theta1.abs() < 0.15 {
            let b = [near.theta2, near.r2];
            use crate::chart::Straightened;
            if let Ok(z) = chart.chart(&near, b) {
                best = best.min(z.u.abs());
            }
        }
    }
    if best.is_finite() {
        Ok(best)
    } else {
        Err(MelnikovError::LeftDomain("orbit of c never entered the chart near N".into()))
    }
}

/// Grows W^{uu}(a) afresh from a base one step further back, as a fine
/// polyline, and measures the distance from c to it.
pub fn unstable_membership(params: &ModelParams, m: &GapMeasurement) -> Result<f64, MelnikovError> {
    let model = Model::new(params, &0.0);
    let steps = m.unstable_steps + 1;
    let base = nhim::shear(m.a, -(steps as i64));
    let leaf = local_leaf(&model, base[0], base[1], LeafKind::Unstable, LEAF_ORDER).map_err(|e| MelnikovError::LeftDomain(e.to_string()))?;
    let bx = nhim::DomainBox::default();
    let s = m.sigma_u / leaf.multiplier;
    let range = (s * 0.97, s * 1.013);
    let grown = nhim::grow_leaf(&model, &leaf, steps, range, 2e-5, &bx).map_err(|e| MelnikovError::LeftDomain(e.to_string()))?;
    let mut best = f64::INFINITY;
    for w in grown.samples.windows(2) {
        best = best.min(segment_distance(&m.unstable_point, &w[0], &w[1]));
    }
    Ok(best)
}

fn segment_distance(p: &SectionPoint<f64>, a: &SectionPoint<f64>, b: &SectionPoint<f64>) -> f64 {
    let (pa, ba) = (p.to_array(), b.to_array());
    let aa = a.to_array();
    let d: Vec<f64> = (0..4).map(|i| ba[i] - aa[i]).collect();
    let v: Vec<f64> = (0..4).map(|i| pa[i] - aa[i]).collect();
    let dd: f64 = d.iter().map(|x| x * x).sum();
    let t = if dd > 0.0 { (v.iter().zip(&d).map(|(x, y)| x * y).sum::<f64>() / dd).clamp(0.0, 1.0) } else { 0.0 };
    (0..4).map(|i| (v[i] - t * d[i]).powi(2)).sum::<f64>().sqrt()
}

/// Profile CSV: θ₂⁰, M, gap, gap/μ (17 significant digits).
pub fn profile_csv(p: &MelnikovProfile) -> String {
    let mut s = String::from("theta2_0,melnikov,gap,gap_over_mu\n");
    for (i, ph) in p.phases.iter().enumerate() {
        let g = p.oracle_values.get(i).copied().unwrap_or(f64::NAN);
        let gm = if p.mu != 0.0 { g / p.mu } else { f64::NAN };
        s.push_str(&format!("{:.16e},{:.16e},{:.16e},{:.16e}\n", ph, p.values[i], g, gm));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Closed form of ∫ r₁ sinθ₁ sin(wt) dt along the homoclinic, used only
    /// as an independent check of the quadrature.
    fn j_closed(eps: f64, w: f64) -> f64 {
        -2.0 * PI * w * w / (eps * (PI * w / (2.0 * eps.sqrt())).sinh())
    }

    #[test]
    fn energy_integral_matches_closed_form() {
        let (eps, om) = (0.25, 0.5);
        for &ph in &[0.0, 0.7, 2.0, 4.5] {
            let m = melnikov_energy(eps, om, ph).unwrap();
            // −r₁∂θ₁V = ε r₁ sinθ₁ (cos θ₂ + sin θ₃)
            let want = eps * (-ph.sin() * j_closed(eps, om) + j_closed(eps, 1.0));
            assert!((m - want).abs() < 1e-10 * want.abs().max(1.0), "{ph}: {m} vs {want}");
        }
    }

    #[test]
    fn profile_is_linear_in_mu_and_changes_sign() {
        let p1 = ModelParams::new(0.25, 1e-3, 256, 4).unwrap();
        let p2 = p1.with_mu(2e-3);
        let grid: Vec<f64> = (0..16).map(|k| 2.0 * PI * k as f64 / 16.0).collect();
        let a = melnikov_profile(0.5, &p1, &grid, false).unwrap();
        let b = melnikov_profile(0.5, &p2, &grid, false).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((2.0 * x - y).abs() <= 1e-10 * y.abs());
        }
        assert_eq!(a.zeros.len(), 2);
        assert!(a.zeros.iter().all(|z| z.0 > 0.0 && z.0 < 2.0 * PI));
    }

    #[test]
    fn oracle_gap_vanishes_without_perturbation() {
        let p = ModelParams::new(0.25, 0.0, 256, 4).unwrap();
        let g = manifold_gap_oracle(0.5, 1.0, &p).unwrap();
        assert!(g.gap.abs() <= 1e-8, "{:e}", g.gap);
        assert!((g.unstable_point.r1 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn no_isolated_zero_without_perturbation() {
        let p = ModelParams::new(0.25, 0.0, 256, 4).unwrap();
        assert!(matches!(find_heteroclinic(0.5, &p, None), Err(MelnikovError::TangencySuspected(_))));
    }

    #[test]
    fn oracle_tracks_profile_and_is_periodic() {
        let p = ModelParams::new(0.25, 1e-3, 256, 4).unwrap();
        let g0 = manifold_gap_oracle(0.5, 0.0, &p).unwrap();
        let g1 = manifold_gap_oracle(0.5, 2.0 * PI, &p).unwrap();
        assert!((g0.gap - g1.gap).abs() < 1e-10);
        let m = reduced_splitting(0.25, 0.5, 0.0).unwrap();
        assert!((g0.gap / 1e-3 - m).abs() < 1e-3 * m.abs());
    }

    #[test]
    fn tail_cutoff_is_past_the_envelope() {
        let t = tail_cutoff(0.25);
        assert!(integrand(0.25, 0.5, 0.3, t).abs() < 1e-14);
        assert!(t > 20.0 && t < 200.0);
    }
}
