use nhlab::arnold_model::ModelParams;
use nhlab::chart::LeafChart;
use nhlab::diffusion::*;

fn params(mu: f64) -> ModelParams {
    ModelParams::new(0.25, mu, 128, 4).unwrap()
}

#[test]
fn single_frequency_gives_trivial_chain() {
    let c = build_chain(&[0.5], &params(5e-3), &ChainConfig::default()).unwrap();
    assert!(c.nodes.is_empty());
    assert_eq!(c.omegas, vec![0.5]);
    assert_eq!(c.target_indices(), vec![0]);
    let chart = LeafChart::build(&params(5e-3), 8, 0.2).unwrap();
    assert!(matches!(shadow_orbit(&c, &params(5e-3), &chart, &ShadowConfig::default()), Err(DiffusionError::InvalidRequest(_))));
}

#[test]
fn bad_frequency_lists_are_rejected() {
    let cfg = ChainConfig::default();
    assert!(matches!(build_chain(&[], &params(5e-3), &cfg), Err(DiffusionError::InvalidRequest(_))));
    assert!(matches!(build_chain(&[0.5, 0.45], &params(5e-3), &cfg), Err(DiffusionError::InvalidRequest(_))));
}

#[test]
fn no_connection_without_perturbation() {
    let p = params(0.0);
    assert_eq!(splitting_reach(&p, 0.45).unwrap(), 0.0);
    assert!(matches!(build_chain(&[0.45, 0.46], &p, &ChainConfig::default()), Err(DiffusionError::GapTooWide(0))));
}

#[test]
fn reach_is_linear_in_mu() {
    let a = splitting_reach(&params(5e-3), 0.5).unwrap();
    let b = splitting_reach(&params(2.5e-3), 0.5).unwrap();
    assert!(a > 0.0 && (a / b - 2.0).abs() < 1e-12);
}

#[test]
fn torus_distance_wraps_angles() {
    use nhlab::arnold_model::SectionPoint;
    let y = SectionPoint::new(2.0 * std::f64::consts::PI - 1e-3, 0.0, 0.3, 0.5);
    assert!((torus_distance(&y, 0.5) - 1e-3).abs() < 1e-12);
    let y = SectionPoint::new(0.0, 3e-3, 1.0, 0.504);
    assert!((torus_distance(&y, 0.5) - 5e-3).abs() < 1e-12);
}

/// One short chain exercised end to end, including the failure modes of
/// the ball construction and of the trace.
#[test]
fn short_chain_shadowing_and_balls() {
    let p = params(5e-3);
    let chain = build_chain(&[0.45, 0.46], &p, &ChainConfig::default()).unwrap();
    assert!(!chain.nodes.is_empty());
    assert!(*chain.omegas.last().unwrap() >= 0.46);
    for (k, n) in chain.nodes.iter().enumerate() {
        assert!(n.stable_residual <= 1e-6 && n.unstable_residual <= 1e-6, "link {k}");
        assert_eq!(n.torus.omega, chain.omegas[k]);
        assert_eq!(n.b_next[1], chain.omegas[k + 1]);
        assert!(chain.omegas[k + 1] > chain.omegas[k]);
        assert!(n.dwell <= 12 && (k == 0 || n.dwell >= 5));
        assert!(n.slope.abs() > 0.0);
    }
    let chart = LeafChart::build(&p, 8, 0.2).unwrap();
    let shadow = shadow_orbit(&chain, &p, &chart, &ShadowConfig::default()).unwrap();
    assert_eq!(shadow.levels.len(), chain.nodes.len());

    let tiny = BallConfig { rho: 1e-5, ..BallConfig::default() };
    assert!(matches!(chain_balls(&chain, shadow.clone(), &p, &chart, &tiny), Err(DiffusionError::ChainBreak { .. })));

    let bc = chain_balls(&chain, shadow, &p, &chart, &BallConfig::default()).unwrap();
    assert_eq!(bc.balls.len(), chain.nodes.len() + 1);
    assert!(bc.iterates.iter().all(|&q| (1..=200).contains(&q)));
    assert!(bc.torus_distance.iter().all(|&d| d < 0.5 * bc.rho));
    assert!(bc.linear_margins.iter().all(|&m| m > 0.0));
    let v = verify_balls(&bc, &p, 16, 4, 11);
    assert!(v.passed(), "{:?} {}", v.margins, v.composed_margin);

    assert!(matches!(extract_orbit(&bc, &chain, &p, bc.precision - 1), Err(DiffusionError::PrecisionExhausted { .. })));
    let r = extract_orbit(&bc, &chain, &p, bc.precision).unwrap();
    assert_eq!(r.trace.len(), bc.total_iterates() + 1);
    assert!(r.all_visited() && r.monotone);
    assert!(r.r2_range() >= 0.01 - 2.0 * bc.rho);
    let csv = orbit_csv(&r);
    assert!(csv.starts_with("n,theta1,r1,theta2,r2,H,nearest_torus_distance\n"), "{}", &csv[..80]);
    assert_eq!(csv.lines().count(), r.trace.len() + 1);
}
