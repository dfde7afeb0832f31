//! Closed forms for the pendulum factor H_p = ½r₁² + ε(cosθ₁ − 1).

use crate::numerics::{Mat, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Upper,
    Lower,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PendulumSeparatrix {
    pub epsilon: f64,
    pub branch: Branch,
}

impl PendulumSeparatrix {
    pub fn upper(epsilon: f64) -> Self {
        PendulumSeparatrix { epsilon, branch: Branch::Upper }
    }

    /// Point (θ₁, r₁) at time t, with θ₁(0) = π on the upper branch.
    /// The lower branch is the image under (θ₁, r₁) ↦ (2π − θ₁, −r₁).
    pub fn point(&self, t: f64) -> (f64, f64) {
        let (th, r) = separatrix_time_param(t, self.epsilon);
        match self.branch {
            Branch::Upper => (th, r),
            Branch::Lower => (2.0 * std::f64::consts::PI - th, -r),
        }
    }

    pub fn r1(&self, theta1: f64) -> f64 {
        match self.branch {
            Branch::Upper => separatrix_r1(theta1, self.epsilon),
            Branch::Lower => -separatrix_r1(2.0 * std::f64::consts::PI - theta1, self.epsilon),
        }
    }
}

pub fn pendulum_energy(theta1: f64, r1: f64, epsilon: f64) -> f64 {
    let q = (theta1 / 2.0).sin();
    0.5 * r1 * r1 - 2.0 * epsilon * q * q
}

/// r₁ on the upper separatrix, 2√ε sin(θ₁/2).
pub fn separatrix_r1(theta1: f64, epsilon: f64) -> f64 {
    2.0 * epsilon.sqrt() * (theta1 / 2.0).sin()
}

/// Homoclinic solution θ₁(t) = 4 arctan(e^{√ε t}), written through the
/// Gudermannian so that both tails keep full relative accuracy.
pub fn separatrix_time_param_generic<R: Real>(t: &R, epsilon: &R) -> (R, R) {
    let a = epsilon.sqrt();
    let x = a.clone() * t.clone();
    let th = (x.clone() / 2.0).tanh().atan() * 4.0 + t.pi();
    let r = a * 2.0 / x.cosh();
    (th, r)
}

pub fn separatrix_time_param(t: f64, epsilon: f64) -> (f64, f64) {
    separatrix_time_param_generic(&t, &epsilon)
}

/// Inverse of the time parametrization: t with θ₁(t) = θ₁, for θ₁ ∈ (0, 2π).
pub fn separatrix_time(theta1: f64, epsilon: f64) -> f64 {
    2.0 * ((theta1 - std::f64::consts::PI) / 4.0).tan().atanh() / epsilon.sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaddleFrame {
    /// Columns are the unstable and stable eigenvectors (1, ±√ε).
    pub vectors: Mat,
    /// Time-2π multipliers (unstable, stable).
    pub multipliers: (f64, f64),
}

pub fn saddle_frame(epsilon: f64) -> SaddleFrame {
    let a = epsilon.sqrt();
    let k = 2.0 * std::f64::consts::PI * a;
    SaddleFrame {
        vectors: Mat::from_rows(&[&[1.0, 1.0], &[a, -a]]),
        multipliers: (k.exp(), (-k).exp()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn separatrix_values() {
        assert!((separatrix_r1(PI, 0.25) - 1.0).abs() < 1e-15);
        assert!(separatrix_r1(1e-12, 0.25).abs() < 1e-12);
        assert!((separatrix_r1(PI / 2.0, 1.0) - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn time_param_values() {
        let (th, r) = separatrix_time_param(0.0, 0.25);
        assert!((th - PI).abs() < 1e-15 && (r - 1.0).abs() < 1e-15);
        let (th, r) = separatrix_time_param(80.0, 0.25);
        assert!((th - 2.0 * PI).abs() < 1e-14 && r < 1e-15);
        for i in -40..=40 {
            let t = i as f64 * 0.37;
            let (th, r) = separatrix_time_param(t, 0.7);
            assert!((r - separatrix_r1(th, 0.7)).abs() < 1e-12);
            let h = 1e-5;
            let (tp, rp) = separatrix_time_param(t + h, 0.7);
            let (tm, rm) = separatrix_time_param(t - h, 0.7);
            assert!(((tp - tm) / (2.0 * h) - r).abs() < 1e-9);
            assert!(((rp - rm) / (2.0 * h) - 0.7 * th.sin()).abs() < 1e-9);
        }
    }

    #[test]
    fn lower_branch_by_symmetry() {
        let s = PendulumSeparatrix { epsilon: 0.25, branch: Branch::Lower };
        let (th, r) = s.point(0.3);
        assert!((s.r1(th) - r).abs() < 1e-14);
        assert!(pendulum_energy(th, r, 0.25).abs() < 1e-15);
    }

    #[test]
    fn saddle_frame_values() {
        let f = saddle_frame(0.25);
        assert!((f.multipliers.0 - PI.exp()).abs() < 1e-12);
        assert!((f.multipliers.1 - (-PI).exp()).abs() < 1e-16);
        let f = saddle_frame(1.0);
        assert!((f.multipliers.0 - 535.491_655_524_764_7).abs() < 1e-9);
        assert!((f.multipliers.1 - 0.001_867_442_731_707_988_8).abs() < 1e-15);
        for eps in [0.25, 1.0] {
            let f = saddle_frame(eps);
            for (col, sgn) in [(0, 1.0), (1, -1.0)] {
                let v = [f.vectors.get(0, col), f.vectors.get(1, col)];
                // [[0,1],[ε,0]] v = ±√ε v
                let lv = [v[1], eps * v[0]];
                let k = sgn * eps.sqrt();
                assert!((lv[0] - k * v[0]).abs() < 1e-12 && (lv[1] - k * v[1]).abs() < 1e-12);
            }
        }
    }
}
