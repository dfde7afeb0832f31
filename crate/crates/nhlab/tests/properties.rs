use std::f64::consts::PI;

use nhlab::arnold_model::{section_dist, wrap_signed, Model, ModelParams, PhasePoint, SectionPoint};
use nhlab::cli::{resolve_config, Command};
use nhlab::nhim::{local_leaf, rate_condition, shear, LeafKind, Torus};
use nhlab::numerics::{conorm, op_norm, Mat};
use proptest::prelude::*;

fn model(mu: f64, steps: usize) -> Model<f64> {
    Model::new(&ModelParams::new(0.25, mu, steps, 4).unwrap(), &0.0)
}

fn mat3() -> impl Strategy<Value = Mat> {
    prop::array::uniform9(-2.0f64..2.0).prop_map(|a| Mat::from_fn(3, 3, |i, j| a[3 * i + j]))
}

fn point() -> impl Strategy<Value = SectionPoint<f64>> {
    (0.0..2.0 * PI, -2.0f64..2.0, 0.0..2.0 * PI, -2.0f64..2.0).prop_map(|(a, b, c, d)| SectionPoint::new(a, b, c, d))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn norm_and_conorm_bracket_the_stretch(m in mat3(), v in prop::array::uniform3(-1.0f64..1.0)) {
        let n = (v.iter().map(|x| x * x).sum::<f64>()).sqrt();
        prop_assume!(n > 1e-3);
        let w = m.apply(&v);
        let nw = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(conorm(&m) <= op_norm(&m) + 1e-14);
        prop_assert!(nw <= op_norm(&m) * n * (1.0 + 1e-12) + 1e-14);
        prop_assert!(nw >= conorm(&m) * n * (1.0 - 1e-12) - 1e-14);
    }

    #[test]
    fn op_norm_is_submultiplicative(a in mat3(), b in mat3()) {
        prop_assert!(op_norm(&a.mul(&b)) <= op_norm(&a) * op_norm(&b) * (1.0 + 1e-12) + 1e-14);
    }

    #[test]
    fn conorm_is_reciprocal_norm_of_inverse(a in mat3()) {
        prop_assume!(conorm(&a) > 1e-3);
        let inv = a.inverse().unwrap();
        prop_assert!((conorm(&a) * op_norm(&inv) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn wrap_lands_in_half_open_interval(a in -100.0f64..100.0) {
        let w = wrap_signed(a);
        prop_assert!(w > -PI - 1e-15 && w <= PI);
        let k = (a - w) / (2.0 * PI);
        prop_assert!((k - k.round()).abs() < 1e-12);
    }

    #[test]
    fn shear_composes(t in 0.0..2.0 * PI, w in -1.0f64..1.0, n in -20i64..20, m in -20i64..20) {
        let a = shear(shear([t, w], n), m);
        let b = shear([t, w], n + m);
        prop_assert!((a[0] - b[0]).abs() < 1e-11 && a[1] == b[1]);
    }

    #[test]
    fn section_map_preserves_torus_base_points(t in 0.0..2.0 * PI, w in -1.0f64..1.0) {
        // on N the map is the shear, so base points are consistent with it
        let m = model(0.01, 128);
        let y = m.iterate_raw(&Torus { omega: w }.point(t), 3);
        let want = shear([t, w], 3);
        prop_assert!(y.theta1.abs() < 1e-14 && y.r1.abs() < 1e-14);
        prop_assert!((y.theta2 - want[0]).abs() < 1e-11 && (y.r2 - w).abs() < 1e-14);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn section_map_is_symplectic(p in point()) {
        let m = model(0.01, 256);
        let j = m.jacobian(&p);
        prop_assert!(j.symplectic_defect() < 1e-9);
        prop_assert!((j.det() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn section_map_is_reversible(p in point(), n in 1i64..4) {
        let m = model(0.01, 256);
        let back = m.iterate_raw(&m.iterate_raw(&p, n), -n);
        prop_assert!(section_dist(&back, &p) < 1e-10);
    }

    #[test]
    fn energy_is_nearly_conserved(p in point(), t3 in 0.0..2.0 * PI, r3 in -1.0f64..1.0) {
        let m = model(0.01, 2048);
        let x = PhasePoint { theta: [p.theta1, p.theta2, t3], r: [p.r1, p.r2, r3] };
        let y = m.flow(&x, 2048);
        prop_assert!((m.hamiltonian(&y) - m.hamiltonian(&x)).abs() < 1e-10);
    }

    #[test]
    fn stable_leaf_is_attracted_to_n(t in 0.0..2.0 * PI, w in 0.3f64..0.7, s in -0.02f64..0.02) {
        prop_assume!(s.abs() > 1e-4);
        let m = model(0.005, 128);
        let leaf = local_leaf(&m, t, w, LeafKind::Stable, 6).unwrap();
        let mut y = leaf.eval(s);
        let d0 = y.theta1.hypot(y.r1);
        for _ in 0..3 {
            y = m.iterate_raw(&y, 1);
        }
        let d3 = y.theta1.hypot(y.r1);
        // the per-period contraction is about e^{−2π√ε} ≈ 0.043
        prop_assert!(d3 < 1e-3 * d0, "{d0} -> {d3}");
        // and the leaf's base follows the shear
        let b = shear([t, w], 3);
        prop_assert!(wrap_signed(y.theta2 - b[0]).abs() < 10.0 * d3.max(1e-12) + 1e-3 * d0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rate_condition_weakens_with_smaller_q(a in 0.0f64..1.0, b in 0.0f64..1.0, tn in 1.0f64..3.0, tc in 0.3f64..1.0, q in 2u32..6) {
        if rate_condition(a, b, tn, tc, q) {
            prop_assert!(rate_condition(a, b, tn, tc, q - 1));
        }
    }

    #[test]
    fn resolved_config_round_trips(seed in 0u64..(i64::MAX as u64), w0 in 0.3f64..0.5, dw in 0.001f64..0.2) {
        let text = format!("seed = {seed}\n[chain]\nomegas = [{w0:?}, {:?}]\n", w0 + dw);
        let c = resolve_config(Command::Chain, Some(&text), None, None).unwrap();
        prop_assert_eq!(c.seed, seed);
        let again = resolve_config(Command::Chain, Some(&c.to_toml()), None, None).unwrap();
        prop_assert_eq!(c.manifest_hash(), again.manifest_hash());
        prop_assert_eq!(again, c);
    }
}
