//! Polyhedra `C(u, b) = {x : ⟨u_i, x⟩ ≤ b_i}`, Euclidean projection onto them,
//! normal-cone coefficients and constraint-qualification tests.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SweepError};
use crate::lp::{LinearProgram, LpStatus, Sense};

/// Default activity tolerance, in state units.
pub const DEFAULT_ACTIVE_TOL: f64 = 1e-8;

/// Rows `u_i` (as the rows of an `m × n` matrix) and offsets `b_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MovingPolyhedron {
    u: DMatrix<f64>,
    b: DVector<f64>,
    unit_rows: bool,
}

impl MovingPolyhedron {
    pub fn new(u: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if u.nrows() != b.len() {
            return Err(SweepError::ShapeMismatch(format!(
                "{} normals but {} offsets",
                u.nrows(),
                b.len()
            )));
        }
        if u.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(SweepError::Config("polyhedron data must be finite".into()));
        }
        Ok(MovingPolyhedron {
            u,
            b,
            unit_rows: false,
        })
    }

    /// Like [`MovingPolyhedron::new`] but additionally insists on unit rows.
    /// Rows are validated, never silently renormalised.
    pub fn with_unit_rows(u: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        let mut p = Self::new(u, b)?;
        for i in 0..p.m() {
            let norm = p.u.row(i).norm();
            if (norm - 1.0).abs() > 1e-12 {
                return Err(SweepError::Config(format!(
                    "row {i} has norm {norm}, expected a unit vector"
                )));
            }
        }
        p.unit_rows = true;
        Ok(p)
    }

    /// Convenience constructor from row slices.
    pub fn from_rows(rows: &[&[f64]], b: &[f64]) -> Result<Self> {
        let n = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != n) {
            return Err(SweepError::ShapeMismatch("ragged normal rows".into()));
        }
        let u = DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]);
        Self::new(u, DVector::from_column_slice(b))
    }

    /// The whole space `ℝⁿ` (no faces).
    pub fn whole_space(n: usize) -> Self {
        MovingPolyhedron {
            u: DMatrix::zeros(0, n),
            b: DVector::zeros(0),
            unit_rows: true,
        }
    }

    pub fn n(&self) -> usize {
        self.u.ncols()
    }

    pub fn m(&self) -> usize {
        self.u.nrows()
    }

    pub fn normals(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn offsets(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn has_unit_rows(&self) -> bool {
        self.unit_rows
    }

    pub fn normal(&self, i: usize) -> DVector<f64> {
        self.u.row(i).transpose()
    }

    /// `⟨u_i, x⟩ − b_i` for every face.
    pub fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.u * x - &self.b
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        self.residuals(x).iter().all(|&r| r <= tol)
    }

    /// The sub-polyhedron made of the listed faces.
    pub fn select(&self, indices: &[usize]) -> MovingPolyhedron {
        let u = DMatrix::from_fn(indices.len(), self.n(), |r, c| self.u[(indices[r], c)]);
        let b = DVector::from_fn(indices.len(), |r, _| self.b[indices[r]]);
        MovingPolyhedron {
            u,
            b,
            unit_rows: self.unit_rows,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveSet {
    pub indices: Vec<usize>,
    pub tol: f64,
}

impl ActiveSet {
    pub fn contains(&self, i: usize) -> bool {
        self.indices.contains(&i)
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }
}

/// Nonnegative multipliers attached to the faces of a polyhedron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeCoefficients {
    pub eta: DVector<f64>,
}

impl ConeCoefficients {
    pub fn zeros(m: usize) -> Self {
        ConeCoefficients {
            eta: DVector::zeros(m),
        }
    }

    /// `Σ η_i u_i`.
    pub fn combine(&self, p: &MovingPolyhedron) -> DVector<f64> {
        p.normals().transpose() * &self.eta
    }
}

/// Outcome of a normal-cone membership query.
#[derive(Debug, Clone, PartialEq)]
pub enum ConeMembership {
    Member(ConeCoefficients),
    NotMember { distance: f64 },
}

fn check_inside(x: &DVector<f64>, p: &MovingPolyhedron, tol: f64) -> Result<DVector<f64>> {
    if x.len() != p.n() {
        return Err(SweepError::ShapeMismatch(format!(
            "point has dimension {}, polyhedron {}",
            x.len(),
            p.n()
        )));
    }
    let r = p.residuals(x);
    let mut worst: Option<(usize, f64)> = None;
    for (i, &ri) in r.iter().enumerate() {
        if ri > tol && worst.map_or(true, |(_, w)| ri > w) {
            worst = Some((i, ri));
        }
    }
    match worst {
        Some((index, violation)) => Err(SweepError::InfeasiblePoint { index, violation }),
        None => Ok(r),
    }
}

/// Indices of faces with `|⟨u_i, x⟩ − b_i| ≤ tol`.
pub fn active_set(x: &DVector<f64>, p: &MovingPolyhedron, tol: f64) -> Result<ActiveSet> {
    let r = check_inside(x, p, tol)?;
    let indices = r
        .iter()
        .enumerate()
        .filter(|(_, ri)| ri.abs() <= tol)
        .map(|(i, _)| i)
        .collect();
    Ok(ActiveSet { indices, tol })
}

/// Euclidean projection of `y` onto `C`, with multipliers satisfying
/// `y − z = Σ η_i u_i`, `η ≥ 0`, `η_i (⟨u_i, z⟩ − b_i) = 0`.
///
/// Dual active-set method (Goldfarb–Idnani with identity Hessian): start from
/// the unconstrained minimiser `y` and add the most violated face until the
/// point is feasible. A face that cannot be added without driving every
/// multiplier negative certifies that `C` is empty.
pub fn project(y: &DVector<f64>, p: &MovingPolyhedron) -> Result<(DVector<f64>, ConeCoefficients)> {
    let n = p.n();
    let m = p.m();
    if y.len() != n {
        return Err(SweepError::ShapeMismatch(format!(
            "point has dimension {}, polyhedron {}",
            y.len(),
            n
        )));
    }
    let u = p.normals();
    let b = p.offsets();

    let viol_tol = |i: usize, x: &DVector<f64>| -> f64 {
        1e-14 * (1.0 + b[i].abs() + u.row(i).norm() * x.norm())
    };

    // Fast path: already inside.
    let r0 = p.residuals(y);
    if (0..m).all(|i| r0[i] <= viol_tol(i, y)) {
        return Ok((y.clone(), ConeCoefficients::zeros(m)));
    }
    // Fast path: a single violated face whose projection is feasible.
    let violated: Vec<usize> = (0..m).filter(|&i| r0[i] > viol_tol(i, y)).collect();
    if violated.len() == 1 {
        let i = violated[0];
        let ui = p.normal(i);
        let nn = ui.norm_squared();
        if nn > 0.0 {
            let mu = r0[i] / nn;
            let z = y - &ui * mu;
            let rz = p.residuals(&z);
            if (0..m).all(|l| l == i || rz[l] <= viol_tol(l, &z)) {
                let mut eta = DVector::zeros(m);
                eta[i] = mu;
                return Ok((z, ConeCoefficients { eta }));
            }
        }
    }

    let mut x = y.clone();
    let mut active: Vec<usize> = Vec::new();
    let mut mult: Vec<f64> = Vec::new();
    let max_outer = 20 * (m + n) + 50;

    for _ in 0..max_outer {
        // Most violated face, smallest index on ties.
        let r = p.residuals(&x);
        let mut pick: Option<usize> = None;
        for i in 0..m {
            if active.contains(&i) || r[i] <= viol_tol(i, &x) {
                continue;
            }
            if pick.map_or(true, |q| r[i] > r[q]) {
                pick = Some(i);
            }
        }
        let Some(pi) = pick else {
            let mut eta = DVector::zeros(m);
            for (k, &i) in active.iter().enumerate() {
                eta[i] = mult[k].max(0.0);
            }
            return Ok((x, ConeCoefficients { eta }));
        };

        // Normal of the constraint in ≥-form is −u_p.
        let np: DVector<f64> = -p.normal(pi);
        let mut u_plus: Vec<f64> = mult.clone();
        let mut t_p = 0.0; // multiplier of the new face

        let mut inner = 0;
        loop {
            inner += 1;
            if inner > 10 * (m + n) + 20 {
                return Err(SweepError::Lp("projection failed to converge".into()));
            }
            let q = active.len();
            let (z, rr) = if q == 0 {
                (np.clone(), Vec::new())
            } else {
                let nmat = DMatrix::from_fn(n, q, |row, col| -u[(active[col], row)]);
                let g = nmat.transpose() * &nmat;
                let rhs = nmat.transpose() * &np;
                let rvec = g
                    .clone()
                    .cholesky()
                    .map(|c| c.solve(&rhs))
                    .or_else(|| g.lu().solve(&rhs))
                    .ok_or_else(|| SweepError::Lp("singular active normals".into()))?;
                let z = &np - &nmat * &rvec;
                (z, rvec.iter().copied().collect())
            };

            // Largest step keeping the active multipliers nonnegative.
            let mut t1 = f64::INFINITY;
            let mut drop: Option<usize> = None;
            for (k, &rk) in rr.iter().enumerate() {
                if rk > 1e-14 {
                    let ratio = u_plus[k] / rk;
                    let better = match drop {
                        None => true,
                        Some(d) => {
                            ratio < t1 - 1e-15 || (ratio <= t1 + 1e-15 && active[k] < active[d])
                        }
                    };
                    if better {
                        t1 = ratio;
                        drop = Some(k);
                    }
                }
            }

            let znorm = z.norm();
            if znorm <= 1e-12 * (1.0 + np.norm()) {
                // Dual-only step.
                let Some(d) = drop else {
                    let mut ray = vec![0.0; m];
                    ray[pi] = 1.0;
                    for (k, &i) in active.iter().enumerate() {
                        ray[i] = (-rr[k]).max(0.0);
                    }
                    return Err(SweepError::EmptySet { ray });
                };
                for k in 0..q {
                    u_plus[k] -= t1 * rr[k];
                }
                t_p += t1;
                active.remove(d);
                u_plus.remove(d);
                continue;
            }

            let slack = b[pi] - p.normal(pi).dot(&x); // < 0 while violated
            let t2 = -slack / z.dot(&np);
            let t = t1.min(t2);
            x += &z * t;
            for k in 0..q {
                u_plus[k] -= t * rr[k];
            }
            t_p += t;
            if t2 <= t1 {
                active.push(pi);
                u_plus.push(t_p);
                mult = u_plus;
                break;
            }
            let d = drop.expect("finite t1 comes with an index");
            active.remove(d);
            u_plus.remove(d);
        }
    }
    Err(SweepError::Lp("projection exceeded its iteration budget".into()))
}

/// Decides whether `v ∈ N(x; C) = cone{u_i : i active}` and, if so, returns
/// coefficients `η ≥ 0` supported on the active set with `v = Σ η_i u_i`.
///
/// Uses Moreau's decomposition: projecting `v` onto the polar cone
/// `{z : ⟨u_i, z⟩ ≤ 0, i active}` leaves the cone component as `v − z`, whose
/// projection multipliers are the coefficients, and `‖z‖` is the distance
/// from `v` to the cone.
pub fn normal_cone_coeffs(
    x: &DVector<f64>,
    p: &MovingPolyhedron,
    v: &DVector<f64>,
    tol: f64,
) -> Result<ConeMembership> {
    let act = active_set(x, p, tol)?;
    cone_coeffs_on(p, &act.indices, v)
}

/// Membership of `v` in `cone{u_i : i ∈ indices}`.
pub fn cone_coeffs_on(p: &MovingPolyhedron, indices: &[usize], v: &DVector<f64>) -> Result<ConeMembership> {
    let m = p.m();
    if v.len() != p.n() {
        return Err(SweepError::ShapeMismatch("velocity dimension".into()));
    }
    let sub = p.select(indices);
    let polar = MovingPolyhedron::new(sub.normals().clone(), DVector::zeros(indices.len()))?;
    let (z, coeffs) = project(v, &polar)?;
    let distance = z.norm();
    if distance <= 1e-9 * v.norm().max(1.0) {
        let mut eta = DVector::zeros(m);
        for (k, &i) in indices.iter().enumerate() {
            eta[i] = coeffs.eta[k];
        }
        Ok(ConeMembership::Member(ConeCoefficients { eta }))
    } else {
        Ok(ConeMembership::NotMember { distance })
    }
}

fn active_matrix(p: &MovingPolyhedron, act: &ActiveSet) -> DMatrix<f64> {
    p.select(&act.indices).normals().clone()
}

/// Numerical rank with threshold `1e−10 · σ_max`.
pub fn numerical_rank(a: &DMatrix<f64>) -> usize {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0;
    }
    let sv = a.clone().svd(false, false).singular_values;
    let smax = sv.iter().fold(0.0f64, |m, s| m.max(*s));
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > 1e-10 * smax).count()
}

/// Linear independence of the active rows.
pub fn check_licq(x: &DVector<f64>, p: &MovingPolyhedron, tol: f64) -> Result<bool> {
    let act = active_set(x, p, tol)?;
    Ok(rows_linearly_independent(&active_matrix(p, &act)))
}

pub fn rows_linearly_independent(a: &DMatrix<f64>) -> bool {
    a.nrows() == 0 || numerical_rank(a) == a.nrows()
}

/// Positive linear independence of the active rows: the system
/// `Σ α_i u_i = 0, α ≥ 0, Σ α_i = 1` must be infeasible.
pub fn check_plicq(x: &DVector<f64>, p: &MovingPolyhedron, tol: f64) -> Result<bool> {
    let act = active_set(x, p, tol)?;
    rows_positively_independent(&active_matrix(p, &act))
}

pub fn rows_positively_independent(a: &DMatrix<f64>) -> Result<bool> {
    let k = a.nrows();
    if k == 0 {
        return Ok(true);
    }
    let n = a.ncols();
    let mut lp = LinearProgram::new(k);
    for c in 0..n {
        let coefs = (0..k).map(|i| (i, a[(i, c)])).collect();
        lp.add_row(coefs, Sense::Eq, 0.0);
    }
    lp.add_row((0..k).map(|i| (i, 1.0)).collect(), Sense::Eq, 1.0);
    Ok(lp.solve()?.status == LpStatus::Infeasible)
}

/// A strictly interior point found by maximising the smallest normalised
/// margin (capped at 1). `None` when the interior is empty.
pub fn slater_point(p: &MovingPolyhedron) -> Result<Option<DVector<f64>>> {
    let n = p.n();
    let m = p.m();
    if m == 0 {
        return Ok(Some(DVector::zeros(n)));
    }
    let mut lp = LinearProgram::new(n + 1);
    for j in 0..n {
        lp.set_free(j);
    }
    let t = n;
    lp.set_bounds(t, f64::NEG_INFINITY, 1.0);
    lp.set_cost(t, -1.0);
    let mut degenerate_row = false;
    for i in 0..m {
        let norm = p.normals().row(i).norm();
        let b = p.offsets()[i];
        if norm == 0.0 {
            if b < 0.0 {
                return Err(SweepError::EmptySet {
                    ray: (0..m).map(|l| if l == i { 1.0 } else { 0.0 }).collect(),
                });
            }
            if b == 0.0 {
                degenerate_row = true;
            }
            continue;
        }
        let mut coefs: Vec<(usize, f64)> = (0..n).map(|j| (j, p.normals()[(i, j)] / norm)).collect();
        coefs.push((t, 1.0));
        lp.add_row(coefs, Sense::Le, b / norm);
    }
    let sol = lp.solve()?;
    if sol.status != LpStatus::Optimal {
        return Err(SweepError::Lp(format!("Slater LP ended with {:?}", sol.status)));
    }
    let margin = sol.x[t];
    if margin < -1e-9 {
        // Reuse the projection to obtain a certificate of emptiness.
        return match project(&DVector::zeros(n), p) {
            Err(e @ SweepError::EmptySet { .. }) => Err(e),
            _ => Err(SweepError::EmptySet { ray: vec![] }),
        };
    }
    if margin <= 1e-9 || degenerate_row {
        return Ok(None);
    }
    Ok(Some(DVector::from_iterator(n, sol.x[..n].iter().copied())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn example_2_3(t: f64) -> MovingPolyhedron {
        MovingPolyhedron::from_rows(
            &[&[1.0, 0.0], &[-1.0, 0.0], &[-t.cos(), -t.sin()]],
            &[1.0, -1.0, -t.cos() - t.sin()],
        )
        .unwrap()
    }

    fn unit_box() -> MovingPolyhedron {
        MovingPolyhedron::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]], &[1.0, 1.0]).unwrap()
    }

    #[test]
    fn interior_point_has_no_active_faces() {
        let p = unit_box();
        let a = active_set(&dv(&[0.0, 0.0]), &p, 1e-9).unwrap();
        assert!(a.is_empty());
    }

    #[test]
    fn one_dimensional_face_is_active_at_origin() {
        let p = MovingPolyhedron::from_rows(&[&[-1.0]], &[0.0]).unwrap();
        let a = active_set(&dv(&[0.0]), &p, 1e-9).unwrap();
        assert_eq!(a.indices, vec![0]);
    }

    #[test]
    fn box_vertex_activates_both_faces() {
        let p = MovingPolyhedron::from_rows(
            &[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.0], &[0.0, -1.0]],
            &[0.3, 0.7, 0.2, 0.1],
        )
        .unwrap();
        let a = active_set(&dv(&[0.3, -0.1]), &p, 1e-9).unwrap();
        assert_eq!(a.indices, vec![0, 3]);
    }

    #[test]
    fn active_set_rejects_outside_points() {
        let p = unit_box();
        let err = active_set(&dv(&[1.5, 0.0]), &p, 1e-9).unwrap_err();
        assert!(matches!(err, SweepError::InfeasiblePoint { index: 0, .. }));
    }

    #[test]
    fn projection_is_identity_inside() {
        let p = unit_box();
        let y = dv(&[0.2, -3.0]);
        let (z, eta) = project(&y, &p).unwrap();
        assert_eq!(z, y);
        assert_eq!(eta.eta, DVector::zeros(2));
    }

    #[test]
    fn projection_onto_degenerate_sets_at_two_times() {
        let (z, c) = project(&dv(&[0.0, 0.0]), &example_2_3(0.0)).unwrap();
        assert!((z - dv(&[1.0, 0.0])).norm() < 1e-12);
        let p = example_2_3(0.0);
        let back = c.combine(&p);
        assert!((dv(&[0.0, 0.0]) - dv(&[1.0, 0.0]) - back).norm() < 1e-12);

        let p = example_2_3(std::f64::consts::FRAC_PI_2);
        let (z, c) = project(&dv(&[0.0, 0.0]), &p).unwrap();
        assert!((&z - dv(&[1.0, 1.0])).norm() < 1e-12);
        assert!(c.eta.iter().all(|&e| e >= 0.0));
        assert!((dv(&[0.0, 0.0]) - &z - c.combine(&p)).norm() < 1e-12);
    }

    #[test]
    fn projection_reports_empty_set_with_ray() {
        let p = MovingPolyhedron::from_rows(&[&[1.0], &[-1.0]], &[0.0, -1.0]).unwrap();
        match project(&dv(&[5.0]), &p) {
            Err(SweepError::EmptySet { ray }) => {
                let s: f64 = ray[0] * 1.0 + ray[1] * -1.0;
                assert!(s.abs() < 1e-12);
                assert!(ray[0] * 0.0 + ray[1] * -1.0 < 0.0);
            }
            other => panic!("expected EmptySet, got {other:?}"),
        }
    }

    #[test]
    fn zero_velocity_is_always_normal() {
        let p = unit_box();
        match normal_cone_coeffs(&dv(&[1.0, 1.0]), &p, &dv(&[0.0, 0.0]), 1e-9).unwrap() {
            ConeMembership::Member(c) => assert_eq!(c.eta, DVector::zeros(2)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn orthonormal_generators_give_unit_coefficients() {
        let p = unit_box();
        match normal_cone_coeffs(&dv(&[1.0, 1.0]), &p, &dv(&[1.0, 1.0]), 1e-9).unwrap() {
            ConeMembership::Member(c) => assert!((c.eta - dv(&[1.0, 1.0])).norm() < 1e-12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn velocity_outside_single_generator_cone() {
        let p = unit_box();
        // Only face 0 active at (1, 0); v = (1, 1) is at distance 1 from cone{e1}.
        match normal_cone_coeffs(&dv(&[1.0, 0.0]), &p, &dv(&[1.0, 1.0]), 1e-9).unwrap() {
            ConeMembership::NotMember { distance } => assert!((distance - 1.0).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn opposing_faces_fail_both_qualifications() {
        let p = MovingPolyhedron::from_rows(&[&[1.0, 0.0], &[-1.0, 0.0]], &[1.0, -1.0]).unwrap();
        let x = dv(&[1.0, 0.0]);
        assert!(!check_licq(&x, &p, 1e-9).unwrap());
        assert!(!check_plicq(&x, &p, 1e-9).unwrap());
    }

    #[test]
    fn orthonormal_and_single_rows_satisfy_qualifications() {
        let p = unit_box();
        assert!(check_licq(&dv(&[1.0, 1.0]), &p, 1e-9).unwrap());
        assert!(check_plicq(&dv(&[1.0, 1.0]), &p, 1e-9).unwrap());
        let single = MovingPolyhedron::from_rows(&[&[0.6, 0.8]], &[0.0]).unwrap();
        assert!(check_licq(&dv(&[0.0, 0.0]), &single, 1e-9).unwrap());
        assert!(check_plicq(&dv(&[0.0, 0.0]), &single, 1e-9).unwrap());
    }

    #[test]
    fn slater_points() {
        assert_eq!(
            slater_point(&MovingPolyhedron::whole_space(3)).unwrap(),
            Some(DVector::zeros(3))
        );
        let p = unit_box();
        let s = slater_point(&p).unwrap().expect("box has interior");
        assert!(p.residuals(&s).iter().all(|&r| r < 0.0));
        assert_eq!(slater_point(&example_2_3(1.0)).unwrap(), None);
    }

    #[test]
    fn unit_row_validation() {
        let u = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        assert!(MovingPolyhedron::with_unit_rows(u, dv(&[0.0])).is_err());
        let u = DMatrix::from_row_slice(1, 2, &[0.6, 0.8]);
        assert!(MovingPolyhedron::with_unit_rows(u, dv(&[0.0])).is_ok());
    }
}
