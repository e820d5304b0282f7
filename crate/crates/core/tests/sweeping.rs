use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use sweep_core::geometry::{project, MovingPolyhedron};
use sweep_core::scenarios::{self, ex7_3_convergence_controls, ex7_3_convergence_exact};
use sweep_core::sweeping::{
    catch_up, convergence_study, read_trajectory_csv, verify_feasible, write_trajectory_csv, ControlPath, Mesh,
    Reference,
};
use sweep_core::SweepError;

fn one_face(mesh: Mesh, b: impl Fn(f64) -> f64) -> ControlPath {
    let nodes = mesh.nodes();
    ControlPath::new(
        mesh,
        nodes.iter().map(|_| DMatrix::from_element(1, 1, -1.0)).collect(),
        nodes.iter().map(|&t| DVector::from_element(1, b(t))).collect(),
        0.0,
    )
    .unwrap()
}

#[test]
fn a_receding_face_pushes_the_state_exactly() {
    let mesh = Mesh::new(1.0, 40).unwrap();
    let ctrl = one_face(mesh, |t| -t / 2.0);
    let x = catch_up(&DVector::zeros(1), &ctrl).unwrap();
    for j in 0..=40 {
        assert_relative_eq!(x.x_nodes[j][0], mesh.t(j) / 2.0, epsilon = 1e-14);
    }
    for eta in &x.eta_nodes {
        assert_relative_eq!(eta[0], 0.5, epsilon = 1e-12);
    }
    let rep = verify_feasible(&x, &ctrl, 1e-10).unwrap();
    assert!(rep.feasible, "{rep:?}");
}

#[test]
fn an_inactive_face_leaves_the_state_at_rest() {
    let mesh = Mesh::new(1.0, 10).unwrap();
    let ctrl = one_face(mesh, |t| 1.0 + t);
    let x = catch_up(&DVector::zeros(1), &ctrl).unwrap();
    assert!(x.x_nodes.iter().all(|v| v[0] == 0.0));
    assert!(x.eta_nodes.iter().all(|e| e[0] == 0.0));
}

#[test]
fn infeasible_start_is_rejected() {
    let mesh = Mesh::new(1.0, 10).unwrap();
    let ctrl = one_face(mesh, |t| -0.5 - t);
    let err = catch_up(&DVector::zeros(1), &ctrl).unwrap_err();
    assert!(matches!(err, SweepError::InfeasibleInitial { .. }), "{err}");
}

#[test]
fn an_emptying_set_is_reported_with_its_node() {
    // x ≤ 1 − 2t and −x ≤ 0: empty once t > 1/2.
    let mesh = Mesh::new(1.0, 10).unwrap();
    let nodes = mesh.nodes();
    let ctrl = ControlPath::new(
        mesh,
        nodes.iter().map(|_| DMatrix::from_row_slice(2, 1, &[1.0, -1.0])).collect(),
        nodes.iter().map(|&t| DVector::from_vec(vec![1.0 - 2.0 * t, 0.0])).collect(),
        0.0,
    )
    .unwrap();
    match catch_up(&DVector::zeros(1), &ctrl) {
        Err(SweepError::EmptySetAt { step }) => assert_eq!(step, 6),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn a_set_without_continuous_trajectories_trips_the_jump_guard() {
    let sc = scenarios::degenerate_2_3();
    let mesh = Mesh::new(sc.horizon.t_final, 50).unwrap();
    let err = catch_up(&sc.x0(), &sc.control_path(&mesh).unwrap()).unwrap_err();
    assert!(matches!(err, SweepError::DiscontinuityDetected { step: 0, .. }), "{err}");
}

#[test]
fn the_jump_guard_stays_quiet_on_fast_but_continuous_motion() {
    let mesh = Mesh::new(1.0, 20).unwrap();
    let ctrl = one_face(mesh, |t| -5.0 * t);
    assert!(catch_up(&DVector::zeros(1), &ctrl).is_ok());
}

#[test]
fn registry_simulations_are_feasible() {
    for entry in scenarios::registry() {
        let sc = &entry.scenario;
        let mesh = Mesh::new(sc.horizon.t_final, sc.horizon.k).unwrap();
        let ctrl = sc.control_path(&mesh).unwrap();
        match catch_up(&sc.x0(), &ctrl) {
            Ok(x) => {
                let rep = verify_feasible(&x, &ctrl, 1e-8).unwrap();
                assert!(rep.feasible, "{}: {rep:?}", entry.id);
                assert!(rep.min_eta >= 0.0);
            }
            Err(SweepError::DiscontinuityDetected { .. }) => assert_eq!(entry.id, "degenerate_2_3"),
            Err(e) => panic!("{}: {e}", entry.id),
        }
    }
}

#[test]
fn play_operator_keeps_the_state_in_the_moving_box() {
    let sc = scenarios::play_stop([0.2, 0.5]);
    let mesh = Mesh::new(sc.horizon.t_final, 100).unwrap();
    let x = catch_up(&sc.x0(), &sc.control_path(&mesh).unwrap()).unwrap();
    for j in 0..=100 {
        let drive = 0.3 * mesh.t(j).sin();
        assert!((x.x_nodes[j][0] - drive).abs() <= 0.2 + 1e-12);
        assert_eq!(x.x_nodes[j][1], 0.0);
    }
    // The play lags: after the first quarter period the state has moved by
    // exactly the overshoot of the drive beyond the gap.
    let quarter = 25;
    assert_relative_eq!(x.x_nodes[quarter][0], 0.3 * mesh.t(quarter).sin() - 0.2, epsilon = 1e-12);
}

#[test]
fn trajectories_round_trip_through_csv() {
    let sc = scenarios::elasto_toy();
    let mesh = Mesh::new(sc.horizon.t_final, 40).unwrap();
    let ctrl = sc.control_path(&mesh).unwrap();
    let x = catch_up(&sc.x0(), &ctrl).unwrap();
    let mut buf = Vec::new();
    write_trajectory_csv(&mut buf, &x, &ctrl).unwrap();
    let back = read_trajectory_csv(buf.as_slice(), 0.0).unwrap();
    let close = |a: &DVector<f64>, b: &DVector<f64>| {
        a.iter().zip(b.iter()).all(|(p, q)| (p - q).abs() <= 1e-15 * p.abs().max(1e-300))
    };
    for j in 0..=40 {
        assert!(close(&x.x_nodes[j], &back.state.x_nodes[j]));
        assert!(close(&ctrl.b_nodes[j], &back.controls.b_nodes[j]));
        assert_eq!(ctrl.u_nodes[j], back.controls.u_nodes[j]);
        assert!((mesh.t(j) - back.state.mesh.t(j)).abs() <= 1e-15 * mesh.t(j));
    }
    for j in 0..40 {
        assert!(close(&x.eta_nodes[j], &back.state.eta_nodes[j]));
    }
}

#[test]
fn malformed_csv_is_a_shape_error() {
    let text = "t,x0,u0,b0\n0,0,-1,0\n";
    assert!(matches!(
        read_trajectory_csv(text.as_bytes(), 0.0),
        Err(SweepError::ShapeMismatch(_))
    ));
}

#[test]
fn catch_up_converges_at_first_order_or_better() {
    let exact = |t: f64| DVector::from_element(1, ex7_3_convergence_exact(t));
    let rows = convergence_study(
        &DVector::zeros(1),
        &ex7_3_convergence_controls,
        1.0,
        Reference::Analytic(&exact),
        &[25, 50, 100, 200],
    )
    .unwrap();
    for w in rows.windows(2) {
        assert!(w[1].error < w[0].error);
        assert!(w[1].order.unwrap() >= 0.9);
    }
}

#[test]
fn richardson_reference_shows_decreasing_error() {
    let sc = scenarios::play_stop([0.2, 0.5]);
    let controls = |mesh: &Mesh| sc.control_path(mesh);
    let rows = convergence_study(
        &sc.x0(),
        &controls,
        sc.horizon.t_final,
        Reference::Richardson { k_ref: 1600 },
        &[25, 50, 100],
    )
    .unwrap();
    assert!(rows[2].error < rows[0].error);
}

fn polyhedron_strategy() -> impl Strategy<Value = (MovingPolyhedron, DVector<f64>, DVector<f64>)> {
    (1usize..=3, 1usize..=5).prop_flat_map(|(n, m)| {
        (
            proptest::collection::vec(-1.0f64..1.0, m * n),
            proptest::collection::vec(0.0f64..1.0, m),
            proptest::collection::vec(-3.0f64..3.0, n),
            proptest::collection::vec(-1.0f64..1.0, n),
        )
            .prop_map(move |(u, margin, y, c)| {
                let u = DMatrix::from_row_slice(m, n, &u);
                let center = DVector::from_vec(c);
                // Offsets chosen so that `center` is feasible.
                let b = &u * &center + DVector::from_vec(margin);
                (MovingPolyhedron::new(u, b).unwrap(), DVector::from_vec(y), center)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn projection_satisfies_its_optimality_system((p, y, center) in polyhedron_strategy()) {
        let (z, coeffs) = project(&y, &p).unwrap();
        let scale = 1.0 + y.norm();
        prop_assert!(p.residuals(&z).max() <= 1e-9 * scale);
        prop_assert!(coeffs.eta.min() >= 0.0);
        let gap = (&y - &z) - coeffs.combine(&p);
        prop_assert!(gap.norm() <= 1e-8 * scale);
        let r = p.residuals(&z);
        for i in 0..p.m() {
            prop_assert!((coeffs.eta[i] * r[i]).abs() <= 1e-8 * scale);
        }
        // No feasible point on the segment towards a known feasible point is closer.
        for s in [0.25, 0.5, 1.0] {
            let w = &z * (1.0 - s) + &center * s;
            prop_assert!((&y - &z).norm() <= (&y - &w).norm() + 1e-9 * scale);
        }
    }

    #[test]
    fn projection_is_idempotent((p, y, _c) in polyhedron_strategy()) {
        let (z, _) = project(&y, &p).unwrap();
        let (zz, _) = project(&z, &p).unwrap();
        prop_assert!((&z - &zz).norm() <= 1e-9 * (1.0 + z.norm()));
    }
}
