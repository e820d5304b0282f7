use approx::assert_abs_diff_eq;
use nalgebra::{DMatrix, DVector};
use sweep_core::discrete_ocp::{
    build, cost_jk, evaluate_strategy, solve_reduced, DiscreteTriple, ProximityReference, Scenario,
};
use sweep_core::scenarios::{self, candidate, ex7_3_stay_put, ex7_6_strategies};
use sweep_core::sweeping::{verify_feasible, Mesh, Side, StatePath};
use sweep_core::SweepError;

fn v1(x: f64) -> DVector<f64> {
    DVector::from_element(1, x)
}

fn half(t: f64) -> DVector<f64> {
    v1(t / 2.0)
}

#[test]
fn fixed_normals_have_no_normalization_constraints() {
    let p = build(&scenarios::ex7_6(), 10).unwrap();
    assert!(p.fixed_u);
    assert_eq!(p.count("norm_equality"), 0);
    assert_eq!(p.count("norm_box"), 0);
    assert_eq!(p.count("dynamic"), 10);
    assert_eq!(p.count("endpoint"), 2);
}

#[test]
fn relaxed_normalization_outside_the_tau_window() {
    let mut sc = scenarios::ex7_3();
    sc.horizon.tau = 0.25;
    let p = build(&sc, 10).unwrap();
    assert_eq!(p.j_tau, (3, 7));
    assert_eq!(p.count("norm_equality"), 5);
    assert_eq!(p.count("norm_box"), 6);
}

#[test]
fn too_coarse_a_mesh_is_a_config_error() {
    assert!(matches!(build(&scenarios::ex7_3(), 1), Err(SweepError::Config(_))));
}

#[test]
fn cost_vanishes_at_the_terminal_center_without_running_cost() {
    let mut sc = scenarios::ex7_3();
    sc.cost.l3.clear();
    let mesh = Mesh::new(1.0, 8).unwrap();
    let z = DiscreteTriple::sample(mesh, |_| v1(1.0), |_| DMatrix::from_element(1, 1, -1.0), |_| v1(-1.0));
    assert_eq!(cost_jk(&z, &sc, None).unwrap(), 0.0);
}

#[test]
fn single_face_candidates_have_the_known_costs() {
    let sc = scenarios::ex7_3();
    let mesh = Mesh::new(1.0, 100).unwrap();
    let opt = candidate("ex7_3", mesh).unwrap();
    assert_abs_diff_eq!(cost_jk(&opt, &sc, None).unwrap(), 0.25, epsilon = 5e-3);
    assert_eq!(cost_jk(&ex7_3_stay_put(mesh), &sc, None).unwrap(), 0.5);
}

#[test]
fn discretised_cost_is_consistent_with_the_continuous_one() {
    // b(t) = −t²/2 on the single face: x = t²/2, J = (1/2 − 1)²/2 + ∫ t²/2 = 1/8 + 1/6.
    let sc = scenarios::ex7_3();
    let exact = 0.125 + 1.0 / 6.0;
    let mut fitted: f64 = 0.0;
    for k in [10usize, 20, 40, 80] {
        let mesh = Mesh::new(1.0, k).unwrap();
        let z = DiscreteTriple::sample(
            mesh,
            |t| v1(t * t / 2.0),
            |_| DMatrix::from_element(1, 1, -1.0),
            |t| v1(-t * t / 2.0),
        );
        let err = (cost_jk(&z, &sc, None).unwrap() - exact).abs();
        fitted = fitted.max(err / mesh.h());
    }
    assert!(fitted < 1.0, "fitted constant {fitted}");
}

#[test]
fn proximity_terms_vanish_at_the_reference_and_grow_away_from_it() {
    let sc = scenarios::ex7_3();
    let mesh = Mesh::new(1.0, 20).unwrap();
    let z = candidate("ex7_3", mesh).unwrap();
    let r = ProximityReference {
        z: z.clone(),
        m_tilde: 1e6,
    };
    let plain = cost_jk(&z, &sc, None).unwrap();
    assert_abs_diff_eq!(cost_jk(&z, &sc, Some(&r)).unwrap(), plain, epsilon = 1e-14);
    let away = ex7_3_stay_put(mesh);
    let base = cost_jk(&away, &sc, None).unwrap();
    assert!(cost_jk(&away, &sc, Some(&r)).unwrap() > base);
}

fn check_solution(sc: &Scenario, z: &DiscreteTriple) {
    let ctrl = z.controls(sc.horizon.tau).unwrap();
    assert!(ctrl.normalization_violation() <= 1e-12);
    let state = StatePath::from_states(z.x.clone(), &ctrl, Side::Implicit, 1e-8).unwrap();
    let rep = verify_feasible(&state, &ctrl, 1e-8).unwrap();
    assert!(rep.feasible, "{rep:?}");
}

#[test]
fn optimal_speed_of_a_single_face() {
    let sc = scenarios::ex7_3();
    let mesh = Mesh::new(1.0, 200).unwrap();
    let out = solve_reduced(&sc, 200, &sc.control_path(&mesh).unwrap()).unwrap();
    assert!(out.cost <= 0.26);
    assert!(out.triple.sup_distance(half, |t| v1(-t / 2.0)) <= 0.05);
    check_solution(&sc, &out.triple);
    for w in out.trace.windows(2) {
        assert!(w[1].cost <= w[0].cost + 1e-12);
    }
}

#[test]
fn two_faces_reach_the_simultaneous_cost() {
    let sc = scenarios::ex7_6();
    let mesh = Mesh::new(1.0, 100).unwrap();
    let out = solve_reduced(&sc, 100, &sc.control_path(&mesh).unwrap()).unwrap();
    assert!(out.cost <= 0.52, "{}", out.cost);
    check_solution(&sc, &out.triple);
}

#[test]
fn solver_runs_are_bitwise_deterministic() {
    let sc = scenarios::ex7_6();
    let mesh = Mesh::new(1.0, 30).unwrap();
    let init = sc.control_path(&mesh).unwrap();
    let a = solve_reduced(&sc, 30, &init).unwrap();
    let b = solve_reduced(&sc, 30, &init).unwrap();
    assert_eq!(a.triple, b.triple);
    assert_eq!(a.trace.len(), b.trace.len());
    for (p, q) in a.trace.iter().zip(&b.trace) {
        assert_eq!(p.cost.to_bits(), q.cost.to_bits());
        assert_eq!(p.method, q.method);
    }
}

#[test]
fn nonsmooth_costs_fall_back_to_pattern_search() {
    let sc = scenarios::ex7_5(1.0);
    let mesh = Mesh::new(1.0, 8).unwrap();
    let init = sc.control_path(&mesh).unwrap();
    let out = solve_reduced(&sc, 8, &init).unwrap();
    assert!(out.trace.iter().any(|r| r.method.contains("pattern")));
    assert!(out.cost <= out.trace[0].cost);
    check_solution(&sc, &out.triple);
}

#[test]
fn pushing_strategies_rank_as_expected() {
    let sc = scenarios::ex7_6();
    let costs: Vec<f64> = ex7_6_strategies()
        .iter()
        .map(|s| evaluate_strategy(&sc, s, 400).unwrap().cost)
        .collect();
    assert_abs_diff_eq!(costs[0], 0.5, epsilon = 1e-3);
    assert_abs_diff_eq!(costs[1], 11.0 / 16.0, epsilon = 1e-2);
    assert_abs_diff_eq!(costs[2], 0.75, epsilon = 1e-2);
    assert!(costs[0] < costs[1] && costs[1] < costs[2]);
}

#[test]
fn strategies_need_two_faces() {
    let s = &ex7_6_strategies()[0];
    assert!(evaluate_strategy(&scenarios::ex7_3(), s, 10).is_err());
}

#[test]
fn scenario_files_round_trip_through_json() {
    for entry in scenarios::registry() {
        let text = serde_json::to_string(&entry.scenario).unwrap();
        let back = Scenario::from_json_str(&text).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), text, "{}", entry.id);
    }
}

#[test]
fn bad_configuration_is_rejected() {
    let mut sc = scenarios::ex7_3();
    sc.horizon.tau = 0.9;
    assert!(matches!(sc.validate(), Err(SweepError::Config(_))));
    let mut sc = scenarios::ex7_6();
    sc.x0 = vec![1.0];
    assert!(matches!(sc.validate(), Err(SweepError::Config(_))));
    assert!(Scenario::from_toml_str("id = 3").is_err());
}
