use super::*;

fn shape(depth: usize) -> InstanceShape {
    InstanceShape { depth, ..InstanceShape::default() }
}

#[test]
fn instances_respect_norms_and_degree_cap() {
    for inst in random_instances(&shape(2), 20, 3).unwrap() {
        let g = &inst.graph;
        assert!((0..g.n_nodes()).all(|i| g.degree(i) <= 8));
        assert!((0..g.n_nodes()).all(|i| g.feature(i).iter().map(|v| v * v).sum::<f64>() <= 1.0 + 1e-12));
        for h in inst.params.heads() {
            assert!(crate::gat::exact_spectral_norm(&h.w) <= 1.0 + 1e-9);
            assert!(h.a1.data().iter().map(|v| v * v).sum::<f64>() <= 1.0 + 1e-9);
        }
    }
}

#[test]
fn exact_series_has_no_score_error() {
    let inst = random_instance(&shape(1), 0).unwrap();
    // e^{ψ(x)} ≡ 1 when ψ maps everything to zero; fit a constant
    let ps = PowerSeries::constant(1.0, -2.0, 2.0);
    let mut flat = inst.clone();
    for h in flat.params.layers.iter_mut().flatten() {
        h.a1 = Tensor::zeros(h.a1.rows(), 1);
        h.a2 = Tensor::zeros(h.a2.rows(), 1);
    }
    assert!(first_layer_score_error(&flat, &ps) < 1e-10);
}

#[test]
fn score_error_shrinks_with_degree() {
    let inst = random_instances(&shape(1), 30, 1).unwrap();
    let rep = verify_score_error(&inst, &[8, 16, 24], 2.0).unwrap();
    assert_eq!(rep.monotone_violations, 0, "{:?}", rep.max_eps);
    assert!(rep.max_eps[2] <= rep.max_eps[0]);
    assert!(rep.max_eps.iter().all(|&e| e > 0.0 && e < 1.0));
}

#[test]
fn coefficient_bound_holds_on_random_instances() {
    let inst = random_instances(&shape(1), 60, 2).unwrap();
    for p in [4, 8, 16] {
        let rep = verify_coefficient_bound(&inst, p, 2.0).unwrap();
        assert_eq!(rep.violations, 0, "p={p}: {:?}", rep.records.first());
        assert!(rep.edges > 0 && rep.min_margin >= 0.0);
    }
}

#[test]
fn zero_error_gives_exact_coefficients() {
    let mut rep = empty_coefficient_report(1);
    check_coefficients(0, 0, &[0, 1, 2], &[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], 0.0, &mut rep).unwrap();
    assert_eq!(rep.violations, 0);
    assert_eq!(rep.min_margin, 0.0);
}

#[test]
fn sub_unit_scores_break_the_coefficient_bound() {
    let rep = coefficient_adversarial().unwrap();
    assert!(rep.violations > 0);
    assert_eq!(rep.violations, rep.premise_failures);
    assert!(rep.records.iter().all(|r| r.min_score < 1.0));
}

#[test]
fn single_layer_trajectory_is_the_first_layer_check() {
    let inst = random_instances(&shape(1), 10, 4).unwrap();
    let rep = verify_propagation(&inst, 16, 2.0, Variant::Vector).unwrap();
    assert_eq!(rep.first_layer_violations, 0);
    assert!(rep.trajectories.iter().all(|t| t.layers.len() == 1 && t.deeper.is_empty()));
}

#[test]
fn two_layer_bounds_hold() {
    let inst = random_instances(&shape(2), 25, 5).unwrap();
    for variant in [Variant::Matrix, Variant::Vector] {
        let rep = verify_propagation(&inst, 16, 2.0, variant).unwrap();
        assert_eq!(rep.first_layer_violations, 0);
        assert_eq!(rep.skipped_layers, 0);
        assert_eq!(rep.score_violations + rep.coefficient_violations + rep.embedding_violations, 0, "{:?}", rep.trajectories[0]);
        assert_eq!(rep.growth_violations, 0);
        assert!(rep.trajectories.iter().all(|t| t.layers[1].c == Some(1.1)));
    }
}

#[test]
fn deeper_models_are_checked_up_to_four_layers() {
    let inst = random_instances(&shape(4), 5, 6).unwrap();
    let rep = verify_propagation(&inst, 16, 2.0, Variant::Vector).unwrap();
    assert!(rep.trajectories.iter().all(|t| t.layers.len() == 4 && t.deeper.len() == 3));
    assert!(random_instance(&shape(5), 0).is_err());
}

#[test]
fn c_is_the_smallest_admissible_candidate() {
    assert_eq!(choose_c(0.0, 1.0), Some(1.1));
    assert_eq!(choose_c(0.1, 1.0), Some(1.5));
    assert_eq!(choose_c(0.5, 1.0), Some(E));
    assert_eq!(choose_c(0.8, 1.0), Some(5.0));
    assert_eq!(choose_c(1.0, 1.0), None);
}

#[test]
fn log_bound_grid_has_no_violations() {
    let rep = verify_log_bound(100, 100);
    assert_eq!(rep.points, 10_000);
    assert_eq!(rep.violations, 0);
    assert!(rep.min_margin >= 0.0);
    // endpoint c = e: e − 1 ≤ e
    assert!(E.ln().exp_m1() <= E * E.ln());
}

#[test]
fn chebyshev_rate_dominates() {
    let rep = verify_chebyshev_rate(2.0, &[8, 16, 24]).unwrap();
    assert_eq!(rep.violations, 0, "{:?}", rep.probes);
    assert!(rep.probes.len() >= 9);
}

#[test]
fn cost_report_matches_closed_form() {
    let sweep = CostSweep { n: 60, clients: vec![2, 5], seeds: vec![0], densities: vec![(0.08, 0.01)], ..CostSweep::default() };
    let rep = verify_cost_scaling(&sweep).unwrap();
    assert_eq!(rep.mismatches, 0);
    assert_eq!(rep.bound_violations, 0);
    assert_eq!(rep.rows.len(), 2 * 2 * 2);
    assert!(rep.fitted_c[0] <= rep.analytic_c[0] && rep.fitted_c[1] <= rep.analytic_c[1]);
    assert!((rep.degree_exponents[0] - 2.0).abs() < 0.05 && (rep.degree_exponents[1] - 1.0).abs() < 0.01, "{:?}", rep.degree_exponents);
}

#[test]
fn hand_counted_node_costs() {
    assert_eq!(node_cost(Variant::Matrix, 2, 3), 112);
    assert_eq!(node_cost(Variant::Vector, 2, 3), 44);
    let ratio = |v| node_cost(v, 64, 8) as f64 / node_cost(v, 32, 8) as f64;
    assert!((ratio(Variant::Matrix) - 4.0).abs() < 0.1 && (ratio(Variant::Vector) - 2.0).abs() < 1e-9);
}

#[test]
fn small_run_is_deterministic_and_serializes() {
    let cfg = VerifyConfig {
        score_instances: 5,
        coefficient_instances: 5,
        propagation_instances: 3,
        log_bound_grid: 10,
        cost: CostSweep { n: 40, clients: vec![2], seeds: vec![0], densities: vec![(0.1, 0.02)], ..CostSweep::default() },
        ..VerifyConfig::default()
    };
    let a = run_all(&cfg).unwrap();
    let b = run_all(&cfg).unwrap();
    assert_eq!(a, b);
    assert!(a.passed(), "{:?}", a.failures());
    let json = serde_json::to_string(&a).unwrap();
    let back: VerifyReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, a);
}
