//! Transition chains of tori, ball chaining along a shadowing orbit and drift
//! measurement.
//!
//! The chain is built link by link. From the arrival base b_k ∈ T_{ω_k} the
//! departure base a_k = F^n(b_k) is taken on the same torus, and the phase
//! along W^{uu}(a_k) is scanned for a zero of the gap to W^s(N) whose first
//! order r₂-drift is positive. The stable base of the heteroclinic point
//! then fixes ω_{k+1}, so the tori of the chain are dictated by the dynamics
//! and the requested frequencies are reached by refinement.

use std::f64::consts::PI;

use rug::Float;
use serde::Serialize;
use thiserror::Error;

use crate::arnold_model::{wrap_signed, Model, ModelParams, SectionPoint};
use crate::chart::{LeafChart, Straightened};
use crate::melnikov::{
    crossing_phases, drift_coefficient, melnikov_basis, stable_membership_in, transversality_floor, unstable_membership,
    GapMeasurement, LeafSweep, MelnikovError,
};
use crate::nhim::{shear, Torus};
use crate::numerics::{brent, Mat, NumError, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("no heteroclinic with positive drift for link {0}")]
    GapTooWide(usize),
    #[error("tangency suspected at link {0}: slope {1:e}")]
    TangencySuspected(usize, f64),
    #[error("chain break at link {k}: {reason}")]
    ChainBreak { k: usize, reason: String },
    #[error("precision exhausted: {needed} bits needed, {available} available")]
    PrecisionExhausted { needed: u32, available: u32 },
    #[error("melnikov: {0}")]
    Melnikov(#[from] MelnikovError),
    #[error("chart: {0}")]
    Chart(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("no drift possible: r₂ is conserved at μ = 0")]
    NoDrift,
}

/// Settings of the link search.
#[derive(Clone, Debug, Serialize)]
pub struct ChainConfig {
    /// Shear steps between arrival and departure; the lower bound keeps each
    /// transit close enough to the torus for a ball of radius ϱ/2.
    pub min_dwell: i64,
    pub max_dwell: i64,
    /// Phase samples over one fundamental domain of W^{uu}(a).
    pub samples: usize,
    /// A candidate is taken once its predicted drift reaches this fraction of the reach.
    pub accept_fraction: f64,
    /// Largest allowed membership residual of a heteroclinic point.
    pub residual_tol: f64,
    /// Largest number of links.
    pub max_links: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig { min_dwell: 5, max_dwell: 12, samples: 48, accept_fraction: 0.5, residual_tol: 1e-6, max_links: 200 }
    }
}

/// One heteroclinic link T_{ω} → T_{ω'}.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainNode {
    pub torus: Torus,
    /// Departure base on the torus.
    pub a: [f64; 2],
    /// Arrival base on the next torus; its r₂ is the next frequency.
    pub b_next: [f64; 2],
    /// Heteroclinic point c ∈ W^{uu}(a) ∩ W^s(N).
    pub c: SectionPoint<f64>,
    /// d gap / d ln σ at the zero.
    pub slope: f64,
    /// Shear steps from the previous arrival base to a.
    pub dwell: i64,
    pub stable_residual: f64,
    pub unstable_residual: f64,
    pub measurement: GapMeasurement,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionChain {
    /// ω of every torus of the chain, increasing.
    pub omegas: Vec<f64>,
    /// Requested frequencies.
    pub targets: Vec<f64>,
    pub nodes: Vec<ChainNode>,
    /// First-order reach μ|K|·min(1, |I₁/I_ω|) at the first torus.
    pub reach: f64,
}

impl TransitionChain {
    /// Index of the chain torus closest to each target.
    pub fn target_indices(&self) -> Vec<usize> {
        self.targets
            .iter()
            .map(|t| {
                (0..self.omegas.len())
                    .min_by(|&i, &j| (self.omegas[i] - t).abs().total_cmp(&(self.omegas[j] - t).abs()))
                    .unwrap_or(0)
            })
            .collect()
    }
}

/// First-order reach of one excursion at frequency ω.
pub fn splitting_reach(params: &ModelParams, omega: f64) -> Result<f64, DiffusionError> {
    let (iw, i1) = melnikov_basis(params.epsilon, omega)?;
    let k = drift_coefficient(params.epsilon, omega)?;
    Ok(params.mu * k.abs() * (i1 / iw).abs().min(1.0))
}

/// Heteroclinic chain from T_{ω₁} through tori of increasing ω until the
/// last target is reached; the intermediate targets are passed on the way.
pub fn build_chain(omegas: &[f64], params: &ModelParams, cfg: &ChainConfig) -> Result<TransitionChain, DiffusionError> {
    if omegas.is_empty() {
        return Err(DiffusionError::InvalidRequest("empty frequency list".into()));
    }
    if omegas.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(DiffusionError::InvalidRequest("frequencies must increase".into()));
    }
    let targets = omegas.to_vec();
    let mut chain = TransitionChain { omegas: vec![omegas[0]], targets, nodes: vec![], reach: 0.0 };
    if omegas.len() == 1 {
        return Ok(chain);
    }
    chain.reach = splitting_reach(params, omegas[0])?;
    let last = *omegas.last().unwrap();
    let chart = LeafChart::build(params, 8, 0.2).map_err(|e| DiffusionError::Chart(e.to_string()))?;
    let mut b = [0.0, omegas[0]];
    while b[1] < last {
        let k = chain.nodes.len();
        if k >= cfg.max_links {
            return Err(DiffusionError::ChainBreak { k, reason: format!("link budget {} exhausted at ω = {}", cfg.max_links, b[1]) });
        }
        let node = find_link(params, &chart, b, k, cfg)?;
        b = node.b_next;
        chain.omegas.push(b[1]);
        chain.nodes.push(node);
    }
    Ok(chain)
}

/// A sign change of the predicted splitting on the sweep of one departure base.
struct Candidate {
    dwell: i64,
    lo: f64,
    hi: f64,
    drift: f64,
}

fn find_link(params: &ModelParams, chart: &LeafChart, b: [f64; 2], k: usize, cfg: &ChainConfig) -> Result<ChainNode, DiffusionError> {
    let eps = params.epsilon;
    let omega = b[1];
    let (iw, i1) = melnikov_basis(eps, omega)?;
    let kd = drift_coefficient(eps, omega)?;
    let reach = params.mu * kd.abs() * (i1 / iw).abs().min(1.0);
    let min_dwell = if k == 0 { 0 } else { cfg.min_dwell };
    let mut best: Option<Candidate> = None;
    let mut chosen: Option<Candidate> = None;
    'dwell: for n in min_dwell..=cfg.max_dwell {
        let sw = LeafSweep::new(params, shear(b, n))?;
        let (lo, hi) = sw.domain();
        let m = cfg.samples;
        let sig: Vec<f64> = (0..=m).map(|i| lo * (hi / lo).powf(i as f64 / m as f64)).collect();
        let pred: Vec<(f64, f64)> = sig
            .iter()
            .map(|&s| {
                let (t2, t3) = crossing_phases(eps, &sw.point(s));
                (-iw * t2.sin() + i1 * t3.cos(), params.mu * t2.sin() * kd)
            })
            .collect();
        for i in 0..m {
            if pred[i].0 * pred[i + 1].0 >= 0.0 {
                continue;
            }
            let c = Candidate { dwell: n, lo: sig[i], hi: sig[i + 1], drift: pred[i].1 };
            if c.drift >= cfg.accept_fraction * reach && reach > 0.0 {
                chosen = Some(c);
                break 'dwell;
            }
            if c.drift > 0.0 && best.as_ref().map_or(true, |b| c.drift > b.drift) {
                best = Some(c);
            }
        }
    }
    let cand = chosen.or(best).ok_or(DiffusionError::GapTooWide(k))?;
    refine_link(params, chart, b, k, &cand, cfg)
}

/// Secant in ln σ on the measured gap, then membership checks.
fn refine_link(params: &ModelParams, chart: &LeafChart, b: [f64; 2], k: usize, cand: &Candidate, cfg: &ChainConfig) -> Result<ChainNode, DiffusionError> {
    let a = shear(b, cand.dwell);
    let sw = LeafSweep::new(params, a)?;
    let gap = |x: f64| sw.gap(x.exp()).map(|m| m.gap);
    let (mut x0, mut x1) = (cand.lo.ln(), cand.hi.ln());
    let (mut g0, mut g1) = (gap(x0)?, gap(x1)?);
    let mut slope = (g1 - g0) / (x1 - x0);
    for _ in 0..40 {
        if g1.abs() <= 1e-13 {
            break;
        }
        if g1 == g0 {
            break;
        }
        let x2 = x1 - g1 * (x1 - x0) / (g1 - g0);
        x0 = x1;
        g0 = g1;
        x1 = x2;
        g1 = gap(x1)?;
        if x1 != x0 {
            slope = (g1 - g0) / (x1 - x0);
        }
    }
    if !(slope.abs() > transversality_floor(params.epsilon)) {
        return Err(DiffusionError::TangencySuspected(k, slope));
    }
    if g1.abs() > 1e-10 {
        return Err(DiffusionError::ChainBreak { k, reason: format!("gap {:e} after refinement", g1) });
    }
    let m = sw.gap(x1.exp())?;
    let c = m.unstable_point.clone();
    let stable_residual = stable_membership_in(chart, &c, m.stable_steps)?;
    let unstable_residual = unstable_membership(params, &m)?;
    if stable_residual > cfg.residual_tol || unstable_residual > cfg.residual_tol {
        return Err(DiffusionError::ChainBreak {
            k,
            reason: format!("membership residuals {stable_residual:e}, {unstable_residual:e}"),
        });
    }
    Ok(ChainNode {
        torus: Torus { omega: b[1] },
        a,
        b_next: m.b,
        c,
        slope,
        dwell: cand.dwell,
        stable_residual,
        unstable_residual,
        measurement: m,
    })
}

// ---------------------------------------------------------------------------
// Shadowing orbit

/// Settings of the nested shooting.
#[derive(Clone, Debug, Serialize)]
pub struct ShadowConfig {
    /// |θ₁ − 2kπ| below which the orbit counts as having entered the chart.
    pub window: f64,
    /// Further steps into the chart before ψ is read off, where the leaf
    /// jets are more accurate.
    pub depth: usize,
    pub min_bits: u32,
    pub guard_bits: u32,
    pub max_bits: u32,
    /// Range of departure offsets v scanned for the next zero.
    pub v_range: (f64, f64),
    /// Step in ln v of the scan.
    pub scan_step: f64,
    /// Steps allowed between two chart entrances.
    pub max_transit: usize,
}

impl Default for ShadowConfig {
    fn default() -> Self {
        ShadowConfig { window: 0.15, depth: 2, min_bits: 128, guard_bits: 64, max_bits: 8192, v_range: (1e-14, 0.15), scan_step: 0.05, max_transit: 200 }
    }
}

/// One solved level of the shooting.
#[derive(Clone, Debug, Serialize)]
pub struct ShadowLevel {
    /// Chart-u offset at the previous entrance that selects this excursion.
    pub v: f64,
    /// log₂ |dψ_k/dσ|.
    pub log2_slope: f64,
    /// First step inside the chart window after this excursion.
    pub arrival: usize,
    /// Step at which ψ is read off, `depth` steps after the arrival.
    pub entrance: usize,
    pub bits: u32,
    /// Closest approach of the excursion to the chain's heteroclinic point.
    pub miss: f64,
}

/// An orbit of F from the local unstable leaf of the first torus that
/// follows every link of a chain.
#[derive(Clone, Debug)]
pub struct ShadowOrbit {
    /// Jet of the local leaf the orbit starts on.
    pub leaf: Vec<[f64; 4]>,
    pub sigma: Float,
    pub levels: Vec<ShadowLevel>,
    pub precision: u32,
}

impl ShadowOrbit {
    pub fn start(&self, prec: u32) -> SectionPoint<Float> {
        leaf_point(&self.leaf, &Float::with_val(prec, &self.sigma))
    }
    /// Index of the first step of the final transit.
    pub fn final_entrance(&self) -> usize {
        self.levels.last().map_or(0, |l| l.entrance)
    }
}

/// Horner evaluation of a leaf jet at σ.
pub fn leaf_point(coeffs: &[[f64; 4]], sigma: &Float) -> SectionPoint<Float> {
    let n = coeffs.len() - 1;
    let mut acc: [Float; 4] = std::array::from_fn(|i| Float::with_val(sigma.prec(), coeffs[n][i]));
    for k in (0..n).rev() {
        for i in 0..4 {
            acc[i] = acc[i].clone() * sigma + coeffs[k][i];
        }
    }
    SectionPoint::from_array(acc)
}

/// What happened on the way to the k-th chart entrance.
enum Track<R> {
    Entered { step: usize, point: SectionPoint<R>, miss: f64 },
    /// Left through the far side without settling.
    Overshot(f64),
    /// Fell back before reaching the saddle.
    TurnedBack(f64),
}

/// Follows an orbit from step `from` (any point of the transit after entrance
/// k − 1) to the chart entrance after excursion k; `near` is compared against
/// the excursion's points for the miss distance.
fn track<R: Real>(model: &Model<R>, mut y: SectionPoint<R>, from: usize, k: usize, near: Option<&SectionPoint<f64>>, cfg: &ShadowConfig) -> Result<Track<R>, DiffusionError> {
    let home = 2.0 * PI * (k as f64 - 1.0);
    let mut crossed = false;
    let mut miss = f64::INFINITY;
    for j in 0..=cfg.max_transit {
        let t1 = y.theta1.to_f64();
        if let Some(c) = near {
            let d = [t1 - home - c.theta1, y.r1.to_f64() - c.r1, wrap_signed(y.theta2.to_f64() - c.theta2), y.r2.to_f64() - c.r2];
            miss = miss.min(d.iter().map(|x| x * x).sum::<f64>().sqrt());
        }
        if !crossed && t1 > home + PI {
            crossed = true;
        }
        if crossed {
            if (t1 - home - 2.0 * PI).abs() < cfg.window {
                for _ in 0..cfg.depth {
                    y = model.section_map_raw(&y);
                }
                let off = y.theta1.to_f64() - home - 2.0 * PI;
                if off > cfg.window {
                    return Ok(Track::Overshot(miss));
                }
                if off < -cfg.window {
                    return Ok(Track::TurnedBack(miss));
                }
                return Ok(Track::Entered { step: from + j + cfg.depth, point: y, miss });
            }
            if t1 > home + 2.0 * PI + cfg.window {
                return Ok(Track::Overshot(miss));
            }
            if y.r1.to_f64() < 0.0 {
                return Ok(Track::TurnedBack(miss));
            }
        } else if t1 < home - 0.5 * PI || !t1.is_finite() {
            return Ok(Track::TurnedBack(miss));
        }
        y = model.section_map_raw(&y);
    }
    Err(DiffusionError::ChainBreak { k: k - 1, reason: format!("no chart entrance within {} steps", cfg.max_transit) })
}

/// Evaluates the entrance function ψ_k: the chart u-coordinate at the chart
/// entrance after excursion k, or ±1 when the orbit never settles.
struct Shooter<'a> {
    chart: &'a LeafChart,
    params: ModelParams,
    leaf: Vec<[f64; 4]>,
    cfg: ShadowConfig,
    /// Sign of u on the forward branch of the unstable manifold.
    orient: f64,
    models: std::cell::RefCell<Vec<(u32, std::rc::Rc<Model<Float>>)>>,
}

struct Probe<R> {
    psi: f64,
    entrance: Option<(usize, SectionPoint<R>)>,
    miss: f64,
}

impl<'a> Shooter<'a> {
    fn new(chart: &'a LeafChart, params: &ModelParams, leaf: Vec<[f64; 4]>, cfg: &ShadowConfig) -> Result<Self, DiffusionError> {
        let x = 0.05;
        let y = SectionPoint::new(x, 2.0 * params.epsilon.sqrt() * (0.5 * x).sin(), 0.0, 0.5);
        let u = chart.chart(&y, [0.0, 0.5]).map_err(|e| DiffusionError::Chart(e.to_string()))?.u;
        Ok(Shooter { chart, params: *params, leaf, cfg: cfg.clone(), orient: u.signum(), models: Default::default() })
    }

    fn model(&self, prec: u32) -> std::rc::Rc<Model<Float>> {
        let mut m = self.models.borrow_mut();
        if let Some((_, model)) = m.iter().find(|(p, _)| *p == prec) {
            return model.clone();
        }
        let model = std::rc::Rc::new(Model::new(&self.params, &Float::with_val(prec, 0)));
        m.push((prec, model.clone()));
        model
    }

    /// Chart u of an entrance point, first order corrected for the rounding
    /// to f64. The frames only carry the first order in the base offset, so
    /// unless `coarse` the base is moved onto the point's own stable leaf.
    fn chart_u<R: Real>(&self, y: &SectionPoint<R>, k: usize, coarse: bool) -> Result<f64, DiffusionError> {
        let th = y.theta1.clone() - y.theta1.lift(0.0).two_pi() * k as f64;
        let exact = [th, y.r1.clone(), y.theta2.clone(), y.r2.clone()];
        let y0 = SectionPoint::new(exact[0].to_f64(), exact[1].to_f64(), exact[2].to_f64(), exact[3].to_f64());
        let chart_err = |e: crate::chart::ChartError| DiffusionError::Chart(e.to_string());
        let mut b = grid_base(&y0);
        let mut z = self.chart.chart(&y0, b).map_err(chart_err)?;
        if coarse {
            return Ok(z.u);
        }
        for _ in 0..2 {
            b = [b[0] + z.dx[0], b[1] + z.dx[1]];
            z = self.chart.chart(&y0, b).map_err(chart_err)?;
        }
        if exact[0].prec() <= 53 {
            return Ok(z.u);
        }
        // residual against the chart point itself, so the Newton tolerance of
        // the chart solve drops out as well
        let (p, dinv) = self.chart.inverse(b, &z).map_err(chart_err)?;
        let p = p.to_array();
        let rest: Vec<f64> = (0..4)
            .map(|i| {
                let d = exact[i].clone() - p[i];
                let turns = (d.to_f64() / (2.0 * PI)).round();
                (d - exact[i].lift(0.0).two_pi() * turns).to_f64()
            })
            .collect();
        let dz = Mat::from_fn(4, 4, |i, j| dinv[i][j]).solve(&rest).map_err(|e| DiffusionError::Chart(e.to_string()))?;
        Ok(z.u + dz[3])
    }

    fn conclude<R: Real>(&self, t: Track<R>, k: usize, coarse: bool) -> Result<Probe<R>, DiffusionError> {
        Ok(match t {
            Track::Entered { step, point, miss } => Probe { psi: self.chart_u(&point, k, coarse)?, entrance: Some((step, point)), miss },
            Track::Overshot(miss) => Probe { psi: self.orient, entrance: None, miss },
            Track::TurnedBack(miss) => Probe { psi: -self.orient, entrance: None, miss },
        })
    }

    /// ψ_k at leaf parameter σ, iterated from the start in MPFR.
    fn probe(&self, sigma: &Float, k: usize, skip: usize) -> Result<Probe<Float>, DiffusionError> {
        let model = self.model(sigma.prec());
        let mut y = leaf_point(&self.leaf, sigma);
        for _ in 0..skip {
            y = model.section_map_raw(&y);
        }
        let t = track(&model, y, skip, k, None, &self.cfg)?;
        self.conclude(t, k, false)
    }

    /// ψ_k in f64 after displacing the chart-u of entrance point `e` by v.
    fn probe_f64(&self, e: &SectionPoint<f64>, from: usize, k: usize, v: f64, near: &SectionPoint<f64>, coarse: bool) -> Result<Probe<f64>, DiffusionError> {
        let mut y0 = e.clone();
        y0.theta1 -= 2.0 * PI * (k as f64 - 1.0);
        let b = grid_base(&y0);
        let mut z = self.chart.chart(&y0, b).map_err(|e| DiffusionError::Chart(e.to_string()))?;
        z.u += v;
        let (mut y, _) = self.chart.inverse(b, &z).map_err(|e| DiffusionError::Chart(e.to_string()))?;
        y.theta1 += 2.0 * PI * (k as f64 - 1.0);
        let t = track(self.chart.model(), y, from, k, Some(near), &self.cfg)?;
        self.conclude(t, k, coarse)
    }
}

/// Chart base near y snapped to a grid, so that nearby evaluations share
/// one frame of the chart.
fn grid_base(y: &SectionPoint<f64>) -> [f64; 2] {
    [(y.theta2.rem_euclid(2.0 * PI) * 64.0).round() / 64.0, (y.r2 * 1024.0).round() / 1024.0]
}

fn bits_for(log2_scale: f64, cfg: &ShadowConfig) -> Result<u32, DiffusionError> {
    let b = (log2_scale.max(0.0) + 53.0 + cfg.guard_bits as f64).ceil() as u32;
    let b = b.max(cfg.min_bits).div_ceil(64) * 64;
    if b > cfg.max_bits {
        return Err(DiffusionError::PrecisionExhausted { needed: b, available: cfg.max_bits });
    }
    Ok(b)
}

fn log2_abs(x: &Float) -> f64 {
    let (m, e) = x.to_f64_exp();
    m.abs().log2() + e as f64
}

/// Nested shooting on the leaf parameter: level k fixes the zero of ψ_k
/// whose excursion passes closest to the k-th heteroclinic point.
pub fn shadow_orbit(chain: &TransitionChain, params: &ModelParams, chart: &LeafChart, cfg: &ShadowConfig) -> Result<ShadowOrbit, DiffusionError> {
    if chain.nodes.is_empty() {
        return Err(DiffusionError::InvalidRequest("a single torus has nothing to shadow".into()));
    }
    if params.mu == 0.0 {
        return Err(DiffusionError::NoDrift);
    }
    let first = &chain.nodes[0];
    let sweep = LeafSweep::new(params, first.a)?;
    let leaf = sweep.local().coeffs.clone();
    let sh = Shooter::new(chart, params, leaf.clone(), cfg)?;
    let sc = first.measurement.sigma_u;

    // level 1: relative offset of σ about the chain's parameter
    let bits = cfg.min_bits;
    let sig_at = |d: f64, p: u32| Float::with_val(p, sc) * d + sc;
    let f1 = |d: f64| sh.probe(&sig_at(d, bits), 1, 0).map(|p| p.psi).unwrap_or(f64::NAN);
    let (d, _) = brent(f1, -1e-4, 1e-4, 1e-17, 0.0, 200).map_err(|e| DiffusionError::ChainBreak { k: 0, reason: format!("first excursion: {e}") })?;
    let mut sigma = sig_at(d, bits);
    let h = 1e-7;
    let dp = (sh.probe(&sig_at(d + h, bits), 1, 0)?.psi - sh.probe(&sig_at(d - h, bits), 1, 0)?.psi) / (2.0 * h);
    let mut slope = Float::with_val(bits, dp) / sc;
    let p = sh.probe(&sigma, 1, 0)?;
    sigma -= Float::with_val(bits, p.psi) / &slope;
    let mut levels = vec![];
    let mut last = polish_probe(&sh, &sigma, 1, 0)?;
    levels.push(ShadowLevel { v: d, log2_slope: log2_abs(&slope), arrival: last.0 - cfg.depth, entrance: last.0, bits, miss: 0.0 });

    for k in 2..=chain.nodes.len() {
        let c = &chain.nodes[k - 1].c;
        let (e_step, e_point) = last.clone();
        let choose = select_zero(&sh, &e_point, e_step, k, c)?;
        let (vz, miss) = choose;
        let log2_sigma = log2_abs(&sigma);
        let bits = bits_for(log2_abs(&slope) + log2_sigma - vz.abs().log2(), cfg)?;
        let base = Float::with_val(bits, &sigma);
        let s_prev = Float::with_val(bits, &slope);
        let skip = levels.last().map_or(0, |l: &ShadowLevel| l.entrance);
        let at = |lv: f64| base.clone() + Float::with_val(bits, sh.orient * lv.exp()) / &s_prev;
        let f = |lv: f64| sh.probe(&at(lv), k, skip).map(|p| p.psi).unwrap_or(f64::NAN);
        let lz = vz.ln();
        let (lv, _) = bracketed_root(f, lz, k)?;
        let v = lv.exp();
        let hv = 1e-7;
        let pp = sh.probe(&at((v * (1.0 + hv)).ln()), k, skip)?;
        let pm = sh.probe(&at((v * (1.0 - hv)).ln()), k, skip)?;
        if pp.entrance.map(|e| e.0) != pm.entrance.map(|e| e.0) {
            return Err(DiffusionError::ChainBreak { k: k - 1, reason: "entrance step changes across the slope stencil".into() });
        }
        let dpsi_dv = (pp.psi - pm.psi) / (2.0 * hv * v) * sh.orient;
        slope = s_prev.clone() * dpsi_dv;
        sigma = at(lv);
        let p = sh.probe(&sigma, k, skip)?;
        sigma -= Float::with_val(bits, p.psi) / &slope;
        last = polish_probe(&sh, &sigma, k, skip)?;
        levels.push(ShadowLevel { v, log2_slope: log2_abs(&slope), arrival: last.0 - cfg.depth, entrance: last.0, bits, miss });
    }
    let precision = levels.iter().map(|l| l.bits).max().unwrap_or(cfg.min_bits);
    Ok(ShadowOrbit { leaf, sigma, levels, precision })
}

fn polish_probe(sh: &Shooter, sigma: &Float, k: usize, skip: usize) -> Result<(usize, SectionPoint<f64>), DiffusionError> {
    let p = sh.probe(sigma, k, skip)?;
    match p.entrance {
        Some((s, y)) => Ok((s, y.to_f64())),
        None => Err(DiffusionError::ChainBreak { k: k - 1, reason: "refined orbit missed the chart entrance".into() }),
    }
}

/// Brent in ln v about a predicted zero, widening the bracket as needed.
fn bracketed_root(f: impl Fn(f64) -> f64, lz: f64, k: usize) -> Result<(f64, f64), DiffusionError> {
    let mut w = 1e-3;
    loop {
        match brent(&f, lz - w, lz + w, 1e-15, 0.0, 200) {
            Ok(r) => return Ok(r),
            Err(NumError::NotBracketed { .. }) if w < 0.2 => w *= 4.0,
            Err(e) => return Err(DiffusionError::ChainBreak { k: k - 1, reason: format!("departure offset: {e}") }),
        }
    }
}

/// Scans the departure offset in f64 and returns the zero of ψ_k whose
/// excursion passes nearest c, with its miss distance.
fn select_zero(sh: &Shooter, e: &SectionPoint<f64>, from: usize, k: usize, c: &SectionPoint<f64>) -> Result<(f64, f64), DiffusionError> {
    let (lo, hi) = (sh.cfg.v_range.0.ln(), sh.cfg.v_range.1.ln());
    let n = ((hi - lo) / sh.cfg.scan_step).ceil() as usize;
    let lvs: Vec<f64> = (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect();
    let eval = |lv: f64, coarse: bool| sh.probe_f64(e, from, k, sh.orient * lv.exp(), c, coarse);
    let probes = lvs.iter().map(|&lv| eval(lv, true)).collect::<Result<Vec<_>, _>>()?;
    let mut changes: Vec<(usize, f64)> = (0..n)
        .filter(|&i| probes[i].psi * probes[i + 1].psi < 0.0)
        .map(|i| (i, probes[i].miss.min(probes[i + 1].miss)))
        .collect();
    changes.sort_by(|a, b| a.1.total_cmp(&b.1));
    let mut best: Option<(f64, f64)> = None;
    for &(i, _) in changes.iter().take(3) {
        let g = |lv: f64| eval(lv, false).map(|p| p.psi).unwrap_or(f64::NAN);
        let Ok((lz, _)) = brent(g, lvs[i], lvs[i + 1], 1e-13, 0.0, 100) else { continue };
        let miss = eval(lz, false)?.miss;
        if best.map_or(true, |(_, m)| miss < m) {
            best = Some((lz.exp(), miss));
        }
    }
    best.ok_or(DiffusionError::ChainBreak { k: k - 1, reason: "no departure offset leads back to the chart".into() })
}

// ---------------------------------------------------------------------------
// Ball chaining

/// Orbit points x₀ … x_len of the shadowing orbit at `prec` bits.
pub fn trajectory(shadow: &ShadowOrbit, params: &ModelParams, prec: u32, len: usize) -> Vec<SectionPoint<Float>> {
    let model = Model::new(params, &Float::with_val(prec, 0));
    let mut y = shadow.start(prec);
    let mut out = Vec::with_capacity(len + 1);
    out.push(y.clone());
    for _ in 0..len {
        y = model.section_map_raw(&y);
        out.push(y.clone());
    }
    out
}

/// Distance of a section point to T_ω, with θ₁ taken modulo 2π.
pub fn torus_distance(y: &SectionPoint<f64>, omega: f64) -> f64 {
    let t = wrap_signed(y.theta1);
    (t * t + y.r1 * y.r1 + (y.r2 - omega) * (y.r2 - omega)).sqrt()
}

#[derive(Clone, Debug)]
pub struct Ball {
    pub center: SectionPoint<Float>,
    pub radius: Float,
}

#[derive(Clone, Debug, Serialize)]
pub struct BallConfig {
    /// ϱ: every ball lies in the ϱ-neighbourhood of its torus.
    pub rho: f64,
    /// Largest iterate count q_k of one link.
    pub max_iterates: usize,
    /// Extra steps after the last entrance searched for the final ball.
    pub tail: usize,
}

impl Default for BallConfig {
    fn default() -> Self {
        BallConfig { rho: 0.02, max_iterates: 200, tail: 12 }
    }
}

/// Balls B₁ … B_n along the shadowing orbit with F^{q_k}(B_k) ⊂ B_{k+1}.
#[derive(Clone, Debug)]
pub struct BallChain {
    pub balls: Vec<Ball>,
    /// ω of the torus each ball sits at.
    pub omegas: Vec<f64>,
    /// Orbit index of each centre.
    pub steps: Vec<usize>,
    pub iterates: Vec<usize>,
    /// 1 − ρ_k‖DF^{q_k}(z_k)‖/ρ_{k+1}: margin of the linearised image.
    pub linear_margins: Vec<f64>,
    /// Distance of each centre to its torus.
    pub torus_distance: Vec<f64>,
    /// Distance of each centre to W^u of its torus in the leaf chart.
    pub center_offsets: Vec<f64>,
    pub rho: f64,
    /// Bits needed to resolve B₁ along the whole chain.
    pub precision: u32,
    pub shadow: ShadowOrbit,
}

impl BallChain {
    /// q* = q₁ + … + q_{n−1}.
    pub fn total_iterates(&self) -> usize {
        self.iterates.iter().sum()
    }
}

fn section_delta(a: &SectionPoint<Float>, b: &SectionPoint<Float>) -> [f64; 4] {
    let (x, y) = (a.to_array(), b.to_array());
    std::array::from_fn(|i| (x[i].clone() - &y[i]).to_f64())
}

fn norm4(v: &[f64; 4]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Builds the balls backward from the final transit.
pub fn chain_balls(chain: &TransitionChain, shadow: ShadowOrbit, params: &ModelParams, chart: &LeafChart, cfg: &BallConfig) -> Result<BallChain, DiffusionError> {
    let n = chain.nodes.len();
    if shadow.levels.len() != n {
        return Err(DiffusionError::InvalidRequest("shadowing orbit does not match the chain".into()));
    }
    if !(cfg.rho > 0.0) {
        return Err(DiffusionError::InvalidRequest(format!("ϱ = {}", cfg.rho)));
    }
    let half = 0.5 * cfg.rho;
    let len = shadow.final_entrance() + cfg.tail;
    let orbit: Vec<SectionPoint<f64>> = trajectory(&shadow, params, shadow.precision, len).iter().map(|y| y.to_f64()).collect();

    // centre of ball k: the start for k = 0, the last point of transit k
    // within ϱ/2 for intermediate k, the first such point of the final transit
    let mut steps = vec![0usize];
    let mut dists = vec![torus_distance(&orbit[0], chain.omegas[0])];
    for k in 1..=n {
        let from = shadow.levels[k - 1].arrival;
        let to = if k < n { shadow.levels[k].arrival } else { len + 1 };
        let om = chain.omegas[k];
        let near: Vec<usize> = (from..to).filter(|&j| torus_distance(&orbit[j], om) <= half).collect();
        let j = if k < n { near.last() } else { near.first() };
        let Some(&j) = j else {
            let best = (from..to).map(|j| torus_distance(&orbit[j], om)).fold(f64::INFINITY, f64::min);
            return Err(DiffusionError::ChainBreak { k: k - 1, reason: format!("transit at ω = {om} comes no closer than {best:.3e} to the torus") });
        };
        steps.push(j);
        dists.push(torus_distance(&orbit[j], om));
    }
    if dists[0] > half {
        return Err(DiffusionError::ChainBreak { k: 0, reason: format!("start is {:.3e} from the first torus", dists[0]) });
    }
    let iterates: Vec<usize> = steps.windows(2).map(|w| w[1] - w[0]).collect();
    if let Some(k) = iterates.iter().position(|&q| q > cfg.max_iterates || q == 0) {
        return Err(DiffusionError::ChainBreak { k, reason: format!("q = {} outside 1..={}", iterates[k], cfg.max_iterates) });
    }

    let model = chart.model();
    let mut norms = vec![0.0; n];
    for k in 0..n {
        let mut j = Mat::identity(4);
        for s in steps[k]..steps[k + 1] {
            let t = model.jacobian(&orbit[s]);
            j = t.m.mul(&j);
        }
        norms[k] = j.singular_values().into_iter().fold(0.0, f64::max);
    }
    // radii as log₂ so that deep balls never underflow
    let mut log_r = vec![0.0; n + 1];
    log_r[n] = (0.5 * (cfg.rho - dists[n])).log2();
    let mut linear_margins = vec![0.0; n];
    for k in (0..n).rev() {
        let pulled = log_r[k + 1] - 1.0 - norms[k].log2();
        log_r[k] = pulled.min((0.5 * (cfg.rho - dists[k])).log2());
        linear_margins[k] = 1.0 - (log_r[k] + norms[k].log2() - log_r[k + 1]).exp2();
    }
    let precision = bits_for(-log_r[0], &ShadowConfig { guard_bits: 64, ..ShadowConfig::default() })?.max(shadow.precision);
    let exact = trajectory(&shadow, params, precision, steps[n]);
    let omegas: Vec<f64> = chain.omegas.clone();
    let mut center_offsets = vec![];
    for k in 0..=n {
        let y = &orbit[steps[k]];
        let mut y0 = y.clone();
        y0.theta1 = wrap_signed(y0.theta1);
        let b = [y0.theta2, omegas[k]];
        center_offsets.push(match chart.chart(&y0, b) {
            Ok(z) => z.s.hypot(z.dx[1]),
            Err(_) => f64::NAN,
        });
    }
    let balls = (0..=n)
        .map(|k| {
            let p = ((-log_r[k]).max(0.0) as u32 + 64).max(64);
            Ball { center: exact[steps[k]].clone(), radius: Float::with_val(p, log_r[k]).exp2() }
        })
        .collect();
    Ok(BallChain { balls, omegas, steps, iterates, linear_margins, torus_distance: dists, center_offsets, rho: cfg.rho, precision, shadow })
}

/// Outcome of the independent boundary re-verification.
#[derive(Clone, Debug, Serialize)]
pub struct Verification {
    /// Smallest (ρ_{k+1} − d)/ρ_{k+1} over the samples of each link.
    pub margins: Vec<f64>,
    pub samples: usize,
    /// Smallest margin of F^{q*}(∂B₁-sample) in B_n.
    pub composed_margin: f64,
    pub composed_samples: usize,
    pub seed: u64,
}

impl Verification {
    pub fn passed(&self) -> bool {
        self.margins.iter().all(|&m| m > 0.0) && self.composed_margin > 0.0
    }
}

/// Uniform point on the unit sphere S³ by rejection from the cube.
fn sphere_sample(rng: &mut impl rand::Rng) -> [f64; 4] {
    loop {
        let v: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let r = norm4(&v);
        if r > 1e-3 && r <= 1.0 {
            return v.map(|x| x / r);
        }
    }
}

fn boundary_point(ball: &Ball, w: &[f64; 4], prec: u32) -> SectionPoint<Float> {
    let c = ball.center.to_array();
    let r = Float::with_val(prec, &ball.radius);
    SectionPoint::from_array(std::array::from_fn(|i| Float::with_val(prec, &c[i]) + r.clone() * w[i]))
}

fn landing_margin(y: &SectionPoint<Float>, target: &Ball) -> f64 {
    let d = section_delta(y, &target.center);
    // compare in units of the target radius
    let (m, e) = target.radius.to_f64_exp();
    let scale = m * (e as f64).exp2();
    let dn = if scale > 0.0 && scale.is_finite() {
        norm4(&d) / scale
    } else {
        let d: Vec<f64> = (0..4).map(|i| (Float::with_val(target.radius.prec(), d[i]) / &target.radius).to_f64()).collect();
        d.iter().map(|x| x * x).sum::<f64>().sqrt()
    };
    1.0 - dn
}

/// Iterates `samples` boundary points of every B_k for q_k steps and
/// measures where they land in B_{k+1}; links run on parallel workers.
pub fn verify_balls(bc: &BallChain, params: &ModelParams, samples: usize, composed_samples: usize, seed: u64) -> Verification {
    use rand::SeedableRng;
    let n = bc.iterates.len();
    let link = |k: usize| -> f64 {
        let p = bits_needed(&bc.balls[k].radius);
        let model = Model::new(params, &Float::with_val(p, 0));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let mut worst = f64::INFINITY;
        for _ in 0..samples {
            let w = sphere_sample(&mut rng);
            let mut y = boundary_point(&bc.balls[k], &w, p);
            for _ in 0..bc.iterates[k] {
                y = model.section_map_raw(&y);
            }
            worst = worst.min(landing_margin(&y, &bc.balls[k + 1]));
        }
        worst
    };
    let workers = std::thread::available_parallelism().map_or(1, |w| w.get()).min(n.max(1));
    let mut margins = vec![f64::NAN; n];
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let link = &link;
                s.spawn(move || (w..n).step_by(workers).map(|k| (k, link(k))).collect::<Vec<_>>())
            })
            .collect();
        for h in handles {
            for (k, m) in h.join().expect("verification worker panicked") {
                margins[k] = m;
            }
        }
    });
    let composed_margin = if n == 0 {
        f64::INFINITY
    } else {
        let p = bits_needed(&bc.balls[0].radius).max(bc.precision);
        let model = Model::new(params, &Float::with_val(p, 0));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut worst = f64::INFINITY;
        for _ in 0..composed_samples {
            let w = sphere_sample(&mut rng);
            let mut y = boundary_point(&bc.balls[0], &w, p);
            for _ in 0..bc.total_iterates() {
                y = model.section_map_raw(&y);
            }
            worst = worst.min(landing_margin(&y, &bc.balls[n]));
        }
        worst
    };
    Verification { margins, samples, composed_margin, composed_samples, seed }
}

/// Working precision for points of a ball of this radius.
fn bits_needed(radius: &Float) -> u32 {
    let l = -log2_abs(radius);
    ((l.max(0.0) + 53.0 + 64.0).ceil() as u32).div_ceil(64) * 64
}

// ---------------------------------------------------------------------------
// Drift

#[derive(Clone, Debug, Serialize)]
pub struct TraceRow {
    pub n: usize,
    pub theta1: f64,
    pub r1: f64,
    pub theta2: f64,
    pub r2: f64,
    pub h: f64,
    /// Distance to the nearest chain torus.
    pub nearest: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Visit {
    pub omega: f64,
    /// Closest approach of the orbit to T_ω.
    pub closest: f64,
    /// Step of the closest approach.
    pub step: usize,
    /// First step within ϱ, if any.
    pub first_within: Option<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DriftReport {
    pub trace: Vec<TraceRow>,
    pub r2_min: f64,
    pub r2_max: f64,
    /// Visits of the requested tori.
    pub visited: Vec<Visit>,
    /// Visits of every torus of the chain.
    pub chain_visits: Vec<Visit>,
    /// Whether the tori are reached in ω order.
    pub monotone: bool,
    pub rho: f64,
    pub precision: u32,
}

impl DriftReport {
    pub fn r2_range(&self) -> f64 {
        self.r2_max - self.r2_min
    }
    pub fn all_visited(&self) -> bool {
        self.visited.iter().all(|v| v.closest <= self.rho)
    }
}

fn visits(trace: &[TraceRow], orbit: &[SectionPoint<f64>], omegas: &[f64], rho: f64) -> Vec<Visit> {
    omegas
        .iter()
        .map(|&om| {
            let d: Vec<f64> = orbit.iter().map(|y| torus_distance(y, om)).collect();
            let (step, closest) = d.iter().enumerate().fold((0, f64::INFINITY), |a, (i, &x)| if x < a.1 { (i, x) } else { a });
            let first_within = d.iter().position(|&x| x <= rho).map(|i| trace[i].n);
            Visit { omega: om, closest, step, first_within }
        })
        .collect()
}

/// Iterates the centre of B₁ for q* steps at `prec` bits.
pub fn extract_orbit(bc: &BallChain, chain: &TransitionChain, params: &ModelParams, prec: u32) -> Result<DriftReport, DiffusionError> {
    if prec < bc.precision {
        return Err(DiffusionError::PrecisionExhausted { needed: bc.precision, available: prec });
    }
    let len = bc.total_iterates();
    let model = Model::new(params, &Float::with_val(prec, 0));
    let pts: Vec<SectionPoint<f64>> = trajectory(&bc.shadow, params, prec, len).iter().map(|y| y.to_f64()).collect();
    let trace: Vec<TraceRow> = pts
        .iter()
        .enumerate()
        .map(|(n, y)| {
            let h = model.hamiltonian(&SectionPoint::lift(&Float::with_val(prec, 0), y).to_phase()).to_f64();
            let nearest = bc.omegas.iter().map(|&om| torus_distance(y, om)).fold(f64::INFINITY, f64::min);
            TraceRow { n, theta1: y.theta1, r1: y.r1, theta2: y.theta2, r2: y.r2, h, nearest }
        })
        .collect();
    let r2_min = pts.iter().map(|y| y.r2).fold(f64::INFINITY, f64::min);
    let r2_max = pts.iter().map(|y| y.r2).fold(f64::NEG_INFINITY, f64::max);
    let visited = visits(&trace, &pts, &chain.targets, bc.rho);
    let chain_visits = visits(&trace, &pts, &bc.omegas, bc.rho);
    let firsts: Vec<Option<usize>> = visited.iter().map(|v| v.first_within).collect();
    let monotone = firsts.iter().all(|f| f.is_some()) && firsts.windows(2).all(|w| w[0] <= w[1]);
    Ok(DriftReport { trace, r2_min, r2_max, visited, chain_visits, monotone, rho: bc.rho, precision: prec })
}

/// Trace as CSV rows with 17 significant digits.
pub fn orbit_csv(r: &DriftReport) -> String {
    let mut s = String::from("n,theta1,r1,theta2,r2,H,nearest_torus_distance\n");
    for t in &r.trace {
        s.push_str(&format!("{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n", t.n, t.theta1, t.r1, t.theta2, t.r2, t.h, t.nearest));
    }
    s
}

