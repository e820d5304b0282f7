//! Uniform meshes, piecewise-linear control and state paths, the implicit
//! catch-up integrator for `ẋ ∈ −N(x; C(t))`, feasibility verification,
//! trajectory CSV exchange and empirical convergence studies.

use std::io::{Read, Write};

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SweepError};
use crate::geometry::{cone_coeffs_on, project, ConeMembership, MovingPolyhedron, DEFAULT_ACTIVE_TOL};

/// Uniform mesh `t_j = jT/k`, `j = 0..=k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    t_final: f64,
    k: usize,
}

impl Mesh {
    pub fn new(t_final: f64, k: usize) -> Result<Self> {
        if !(t_final.is_finite() && t_final > 0.0) {
            return Err(SweepError::Config(format!("horizon must be positive, got {t_final}")));
        }
        if k == 0 {
            return Err(SweepError::Config("mesh needs at least one step".into()));
        }
        Ok(Mesh { t_final, k })
    }

    /// Rebuilds a mesh from explicit node times, rejecting non-uniform ones.
    pub fn from_nodes(t: &[f64]) -> Result<Self> {
        if t.len() < 2 {
            return Err(SweepError::MeshMismatch("need at least two nodes".into()));
        }
        if t[0].abs() > 1e-12 {
            return Err(SweepError::MeshMismatch(format!("mesh must start at 0, got {}", t[0])));
        }
        let k = t.len() - 1;
        let mesh = Mesh::new(t[k], k)?;
        for (j, &tj) in t.iter().enumerate() {
            if (tj - mesh.t(j)).abs() > 1e-9 * mesh.t_final.max(1.0) {
                return Err(SweepError::MeshMismatch(format!(
                    "node {j} at {tj} breaks uniform spacing"
                )));
            }
        }
        Ok(mesh)
    }

    pub fn t_final(&self) -> f64 {
        self.t_final
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn h(&self) -> f64 {
        self.t_final / self.k as f64
    }

    pub fn t(&self, j: usize) -> f64 {
        if j == self.k {
            self.t_final
        } else {
            self.t_final * j as f64 / self.k as f64
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.k).map(|j| self.t(j)).collect()
    }

    /// Interval index and local fraction for time `t` (clamped to `[0, T]`).
    pub fn locate(&self, t: f64) -> (usize, f64) {
        let s = (t / self.h()).clamp(0.0, self.k as f64);
        let j = (s.floor() as usize).min(self.k - 1);
        (j, s - j as f64)
    }
}

/// `(j_τ, j^τ)`: the smallest `j` with `t_j ≥ τ` and the largest `j` with
/// `t_j ≤ T − τ`. Normalisation `‖u_i‖ = 1` is imposed for `j_τ ≤ j ≤ j^τ`.
pub fn index_tau(mesh: &Mesh, tau: f64) -> (usize, usize) {
    let eps = 1e-12 * mesh.t_final().max(1.0);
    let k = mesh.k();
    let lo = (0..=k).find(|&j| mesh.t(j) >= tau - eps).unwrap_or(k);
    let hi = (0..=k)
        .rev()
        .find(|&j| mesh.t(j) <= mesh.t_final() - tau + eps)
        .unwrap_or(0);
    (lo, hi)
}

/// Node values of the controls `(u, b)`; piecewise-linear in between.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlPath {
    pub mesh: Mesh,
    pub n: usize,
    pub m: usize,
    /// `u_nodes[j]` is `m × n`, row `i` being `u_i(t_j)`.
    pub u_nodes: Vec<DMatrix<f64>>,
    pub b_nodes: Vec<DVector<f64>>,
    pub tau: f64,
}

impl ControlPath {
    pub fn new(
        mesh: Mesh,
        u_nodes: Vec<DMatrix<f64>>,
        b_nodes: Vec<DVector<f64>>,
        tau: f64,
    ) -> Result<Self> {
        let k = mesh.k();
        if u_nodes.len() != k + 1 || b_nodes.len() != k + 1 {
            return Err(SweepError::ShapeMismatch(format!(
                "expected {} nodes, got {} normals and {} offsets",
                k + 1,
                u_nodes.len(),
                b_nodes.len()
            )));
        }
        let m = b_nodes[0].len();
        let n = u_nodes[0].ncols();
        for j in 0..=k {
            if u_nodes[j].nrows() != m || u_nodes[j].ncols() != n || b_nodes[j].len() != m {
                return Err(SweepError::ShapeMismatch(format!("node {j} has inconsistent shape")));
            }
            if u_nodes[j].iter().chain(b_nodes[j].iter()).any(|v| !v.is_finite()) {
                return Err(SweepError::Config(format!("non-finite control at node {j}")));
            }
        }
        if !(0.0..=mesh.t_final() / 2.0 + 1e-12).contains(&tau) {
            return Err(SweepError::Config(format!("tau = {tau} outside [0, T/2]")));
        }
        Ok(ControlPath {
            mesh,
            n,
            m,
            u_nodes,
            b_nodes,
            tau,
        })
    }

    /// Checks the normalisation `‖u_i(t_j)‖ = 1` on `[τ, T − τ]` and
    /// `1/2 ≤ ‖u_i(t_j)‖ ≤ 3/2` elsewhere; returns the worst violation.
    pub fn normalization_violation(&self) -> f64 {
        let (lo, hi) = index_tau(&self.mesh, self.tau);
        let mut worst: f64 = 0.0;
        for (j, u) in self.u_nodes.iter().enumerate() {
            for i in 0..self.m {
                let norm = u.row(i).norm();
                let v = if (lo..=hi).contains(&j) {
                    (norm - 1.0).abs()
                } else {
                    (0.5 - norm).max(norm - 1.5).max(0.0)
                };
                worst = worst.max(v);
            }
        }
        worst
    }

    pub fn polyhedron(&self, j: usize) -> MovingPolyhedron {
        MovingPolyhedron::new(self.u_nodes[j].clone(), self.b_nodes[j].clone())
            .expect("shapes validated at construction")
    }

    /// Linear interpolation of the controls at time `t`.
    pub fn at(&self, t: f64) -> (DMatrix<f64>, DVector<f64>) {
        let (j, s) = self.mesh.locate(t);
        let u = &self.u_nodes[j] * (1.0 - s) + &self.u_nodes[j + 1] * s;
        let b = &self.b_nodes[j] * (1.0 - s) + &self.b_nodes[j + 1] * s;
        (u, b)
    }

    pub fn polyhedron_at(&self, t: f64) -> MovingPolyhedron {
        let (u, b) = self.at(t);
        MovingPolyhedron::new(u, b).expect("interpolated data is finite")
    }

    /// Variation of `(u, b)` over step `j`.
    pub fn step_variation(&self, j: usize) -> f64 {
        (&self.u_nodes[j + 1] - &self.u_nodes[j]).norm() + (&self.b_nodes[j + 1] - &self.b_nodes[j]).norm()
    }

    pub fn total_variation(&self) -> f64 {
        (0..self.mesh.k()).map(|j| self.step_variation(j)).sum()
    }
}

/// Which node's normals and activity pattern the velocity multipliers refer to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// `(x_{j+1} − x_j)/h = −Σ η_i u_i(t_{j+1})`, activity at `x_{j+1}`.
    #[default]
    Implicit,
    /// `(x_{j+1} − x_j)/h = −Σ η_i u_i(t_j)`, activity at `x_j`.
    Explicit,
}

/// Node states and per-interval velocity multipliers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatePath {
    pub mesh: Mesh,
    pub x_nodes: Vec<DVector<f64>>,
    /// `eta_nodes[j]` belongs to interval `[t_j, t_{j+1}]`.
    pub eta_nodes: Vec<DVector<f64>>,
    pub side: Side,
}

impl StatePath {
    /// Builds a path from node states, fitting the multipliers on the given
    /// side by projection onto the cone of nearly active normals.
    pub fn from_states(
        x_nodes: Vec<DVector<f64>>,
        ctrl: &ControlPath,
        side: Side,
        tol: f64,
    ) -> Result<Self> {
        let mesh = ctrl.mesh;
        if x_nodes.len() != mesh.k() + 1 {
            return Err(SweepError::MeshMismatch(format!(
                "{} states for {} nodes",
                x_nodes.len(),
                mesh.k() + 1
            )));
        }
        let eta_nodes = (0..mesh.k())
            .map(|j| fit_eta(&x_nodes[j], &x_nodes[j + 1], ctrl, j, side, tol).0)
            .collect();
        Ok(StatePath {
            mesh,
            x_nodes,
            eta_nodes,
            side,
        })
    }

    pub fn n(&self) -> usize {
        self.x_nodes[0].len()
    }

    pub fn at(&self, t: f64) -> DVector<f64> {
        let (j, s) = self.mesh.locate(t);
        &self.x_nodes[j] * (1.0 - s) + &self.x_nodes[j + 1] * s
    }

    pub fn velocity(&self, j: usize) -> DVector<f64> {
        (&self.x_nodes[j + 1] - &self.x_nodes[j]) / self.mesh.h()
    }

    /// Multipliers re-fitted for the requested side convention.
    pub fn eta_for_side(&self, ctrl: &ControlPath, side: Side, tol: f64) -> Vec<DVector<f64>> {
        if side == self.side {
            return self.eta_nodes.clone();
        }
        (0..self.mesh.k())
            .map(|j| fit_eta(&self.x_nodes[j], &self.x_nodes[j + 1], ctrl, j, side, tol).0)
            .collect()
    }
}

/// Best nonnegative representation of `−Δx/h` by the nearly active normals
/// of the chosen side; returns the multipliers and the representation error.
pub fn fit_eta(
    xa: &DVector<f64>,
    xb: &DVector<f64>,
    ctrl: &ControlPath,
    j: usize,
    side: Side,
    tol: f64,
) -> (DVector<f64>, f64) {
    let h = ctrl.mesh.h();
    let (node, x_ref) = match side {
        Side::Implicit => (j + 1, xb),
        Side::Explicit => (j, xa),
    };
    let p = ctrl.polyhedron(node);
    let r = p.residuals(x_ref);
    let active: Vec<usize> = (0..p.m()).filter(|&i| r[i].abs() <= tol).collect();
    let v = -(xb - xa) / h;
    if v.norm() == 0.0 {
        return (DVector::zeros(p.m()), 0.0);
    }
    match cone_coeffs_on(&p, &active, &v) {
        Ok(ConeMembership::Member(c)) => {
            let err = (&v - c.combine(&p)).norm();
            (c.eta, err)
        }
        Ok(ConeMembership::NotMember { distance }) => {
            // Keep the best cone approximation: v minus its polar part.
            let sub = p.select(&active);
            let polar = MovingPolyhedron::new(sub.normals().clone(), DVector::zeros(active.len()))
                .expect("finite");
            let mut eta = DVector::zeros(p.m());
            if let Ok((_, c)) = project(&v, &polar) {
                for (k, &i) in active.iter().enumerate() {
                    eta[i] = c.eta[k];
                }
            }
            (eta, distance)
        }
        Err(_) => (DVector::zeros(p.m()), v.norm()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CatchUpOptions {
    /// A step is flagged when, after bisecting down to `bisection_depth`
    /// levels, its displacement still exceeds
    /// `jump_guard · (length + control variation) · (1 + ‖x‖)`.
    pub jump_guard: f64,
    pub bisection_depth: usize,
    pub active_tol: f64,
}

impl Default for CatchUpOptions {
    fn default() -> Self {
        CatchUpOptions {
            jump_guard: 10.0,
            bisection_depth: 30,
            active_tol: DEFAULT_ACTIVE_TOL,
        }
    }
}

/// Implicit catch-up: `x_{j+1} = Π_{C(t_{j+1})}(x_j)`, with `η_j` the
/// projection multipliers divided by `h`.
pub fn catch_up(x0: &DVector<f64>, ctrl: &ControlPath) -> Result<StatePath> {
    catch_up_with(x0, ctrl, &CatchUpOptions::default())
}

pub fn catch_up_with(x0: &DVector<f64>, ctrl: &ControlPath, opts: &CatchUpOptions) -> Result<StatePath> {
    if x0.len() != ctrl.n {
        return Err(SweepError::ShapeMismatch(format!(
            "x0 has dimension {}, controls {}",
            x0.len(),
            ctrl.n
        )));
    }
    let p0 = ctrl.polyhedron(0);
    let v0 = p0.residuals(x0).iter().fold(0.0f64, |a, &r| a.max(r));
    if v0 > opts.active_tol {
        return Err(SweepError::InfeasibleInitial { violation: v0 });
    }
    let k = ctrl.mesh.k();
    let h = ctrl.mesh.h();
    let mut xs = Vec::with_capacity(k + 1);
    let mut etas = Vec::with_capacity(k);
    xs.push(x0.clone());
    for j in 0..k {
        let p = ctrl.polyhedron(j + 1);
        let (next, coeffs) = match project(&xs[j], &p) {
            Ok(r) => r,
            Err(SweepError::EmptySet { .. }) => return Err(SweepError::EmptySetAt { step: j + 1 }),
            Err(e) => return Err(e),
        };
        guard_step(&xs[j], &next, ctrl, j, opts)?;
        etas.push(coeffs.eta / h);
        xs.push(next);
    }
    Ok(StatePath {
        mesh: ctrl.mesh,
        x_nodes: xs,
        eta_nodes: etas,
        side: Side::Implicit,
    })
}

/// Flags steps whose displacement does not shrink with the step length.
///
/// A regular (absolutely continuous) evolution moves the state by an amount
/// proportional to the elapsed time and control variation. When the ratio
/// exceeds 1 on the full step, the step is bisected repeatedly, following the
/// half that carries the larger displacement. A jump keeps its full size at
/// every level, so the ratio grows like `2^depth`.
fn guard_step(
    x: &DVector<f64>,
    next: &DVector<f64>,
    ctrl: &ControlPath,
    j: usize,
    opts: &CatchUpOptions,
) -> Result<()> {
    if !opts.jump_guard.is_finite() {
        return Ok(());
    }
    let h = ctrl.mesh.h();
    let tv = ctrl.step_variation(j);
    let scale = |len: f64, x: &DVector<f64>| (len + tv * len / h) * (1.0 + x.norm());
    let disp = (next - x).norm();
    if disp <= scale(h, x) {
        return Ok(());
    }
    let (mut a, mut b) = (ctrl.mesh.t(j), ctrl.mesh.t(j + 1));
    let mut xa = x.clone();
    let mut ratio = disp / scale(h, x);
    for _ in 0..opts.bisection_depth {
        let mid = 0.5 * (a + b);
        let proj = |y: &DVector<f64>, t: f64| -> Result<DVector<f64>> {
            match project(y, &ctrl.polyhedron_at(t)) {
                Ok((z, _)) => Ok(z),
                Err(SweepError::EmptySet { .. }) => Err(SweepError::EmptySetAt { step: j + 1 }),
                Err(e) => Err(e),
            }
        };
        // Near a jump the sub-step sets can degenerate below rounding level;
        // once the ratio already exceeds the guard that is the jump itself.
        let tripped = |e: SweepError, ratio: f64| {
            if ratio > opts.jump_guard && matches!(e, SweepError::EmptySetAt { .. }) {
                SweepError::DiscontinuityDetected {
                    step: j,
                    displacement: disp,
                    ratio,
                }
            } else {
                e
            }
        };
        let y_mid = proj(&xa, mid).map_err(|e| tripped(e, ratio))?;
        let y_end = proj(&y_mid, b).map_err(|e| tripped(e, ratio))?;
        let d1 = (&y_mid - &xa).norm();
        let d2 = (&y_end - &y_mid).norm();
        let sub_disp;
        if d1 >= d2 {
            b = mid;
            sub_disp = d1;
        } else {
            a = mid;
            xa = y_mid;
            sub_disp = d2;
        }
        ratio = sub_disp / scale(b - a, &xa);
        if ratio <= 1.0 {
            return Ok(());
        }
    }
    if ratio > opts.jump_guard {
        debug!("step {j}: displacement {disp:.3e} survives bisection (ratio {ratio:.3e})");
        return Err(SweepError::DiscontinuityDetected {
            step: j,
            displacement: disp,
            ratio,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    /// `max_i (⟨u_i, x_j⟩ − b_i)` per node (negative inside).
    pub node_margins: Vec<f64>,
    /// `‖(x_{j+1} − x_j)/h + Σ η_i u_i‖` per interval.
    pub velocity_residuals: Vec<f64>,
    /// `max_i η_i · |b_i − ⟨u_i, x⟩|` per interval.
    pub complementarity: Vec<f64>,
    pub min_eta: f64,
    pub max_violation: f64,
    pub max_residual: f64,
    pub feasible: bool,
}

/// Node feasibility, velocity representation, sign and complementarity of
/// the multipliers, against the side convention stored in the path.
pub fn verify_feasible(x: &StatePath, ctrl: &ControlPath, tol: f64) -> Result<FeasibilityReport> {
    if x.mesh != ctrl.mesh {
        return Err(SweepError::MeshMismatch(format!(
            "state mesh {:?} vs control mesh {:?}",
            x.mesh, ctrl.mesh
        )));
    }
    if x.x_nodes.len() != x.mesh.k() + 1 || x.eta_nodes.len() != x.mesh.k() {
        return Err(SweepError::MeshMismatch("path length does not match its mesh".into()));
    }
    let k = x.mesh.k();
    let h = x.mesh.h();
    let node_margins: Vec<f64> = (0..=k)
        .map(|j| {
            ctrl.polyhedron(j)
                .residuals(&x.x_nodes[j])
                .iter()
                .fold(f64::NEG_INFINITY, |a, &r| a.max(r))
        })
        .collect();
    let mut velocity_residuals = Vec::with_capacity(k);
    let mut complementarity = Vec::with_capacity(k);
    let mut min_eta = f64::INFINITY;
    for j in 0..k {
        let (node, xr) = match x.side {
            Side::Implicit => (j + 1, &x.x_nodes[j + 1]),
            Side::Explicit => (j, &x.x_nodes[j]),
        };
        let p = ctrl.polyhedron(node);
        let eta = &x.eta_nodes[j];
        let vel = (&x.x_nodes[j + 1] - &x.x_nodes[j]) / h;
        velocity_residuals.push((vel + p.normals().transpose() * eta).norm());
        let slack = p.residuals(xr);
        let c = (0..p.m()).fold(0.0f64, |a, i| a.max((eta[i] * slack[i]).abs()));
        complementarity.push(c);
        min_eta = min_eta.min(eta.iter().fold(f64::INFINITY, |a, &e| a.min(e)));
    }
    if !min_eta.is_finite() {
        min_eta = 0.0;
    }
    let max_violation = node_margins.iter().fold(0.0f64, |a, &m| a.max(m));
    let max_residual = velocity_residuals
        .iter()
        .chain(complementarity.iter())
        .fold(max_violation.max((-min_eta).max(0.0)), |a, &r| a.max(r));
    Ok(FeasibilityReport {
        feasible: max_residual <= tol,
        node_margins,
        velocity_residuals,
        complementarity,
        min_eta,
        max_violation,
        max_residual,
    })
}

/// A trajectory as exchanged through CSV files.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub state: StatePath,
    pub controls: ControlPath,
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `t, x0.., u0.., b0.., eta0..` with one row per node; the
/// multipliers of the last row are left blank.
pub fn write_trajectory_csv<W: Write>(w: W, x: &StatePath, ctrl: &ControlPath) -> Result<()> {
    let n = ctrl.n;
    let m = ctrl.m;
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["t".to_string()];
    header.extend((0..n).map(|i| format!("x{i}")));
    header.extend((0..m * n).map(|i| format!("u{i}")));
    header.extend((0..m).map(|i| format!("b{i}")));
    header.extend((0..m).map(|i| format!("eta{i}")));
    wtr.write_record(&header)?;
    let k = x.mesh.k();
    for j in 0..=k {
        let mut rec = vec![fmt17(x.mesh.t(j))];
        rec.extend(x.x_nodes[j].iter().map(|&v| fmt17(v)));
        let u = &ctrl.u_nodes[j];
        for i in 0..m {
            for c in 0..n {
                rec.push(fmt17(u[(i, c)]));
            }
        }
        rec.extend(ctrl.b_nodes[j].iter().map(|&v| fmt17(v)));
        if j < k {
            rec.extend(x.eta_nodes[j].iter().map(|&v| fmt17(v)));
        } else {
            rec.extend((0..m).map(|_| String::new()));
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads a file produced by [`write_trajectory_csv`].
pub fn read_trajectory_csv<R: Read>(r: R, tau: f64) -> Result<Trajectory> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.to_string()).collect();
    let count = |prefix: &str| {
        header
            .iter()
            .filter(|h| {
                h.strip_prefix(prefix)
                    .is_some_and(|rest| !rest.is_empty() && rest.chars().all(|c| c.is_ascii_digit()))
            })
            .count()
    };
    let n = count("x");
    let nu = count("u");
    let m = count("b");
    let ne = count("eta");
    if header.first().map(String::as_str) != Some("t") || n == 0 || nu != m * n || ne != m {
        return Err(SweepError::ShapeMismatch(format!("unrecognised trajectory header {header:?}")));
    }
    let mut t = Vec::new();
    let mut xs = Vec::new();
    let mut us = Vec::new();
    let mut bs = Vec::new();
    let mut etas: Vec<Option<DVector<f64>>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let get = |i: usize| -> Result<f64> {
            rec.get(i)
                .ok_or_else(|| SweepError::ShapeMismatch("short row".into()))?
                .parse::<f64>()
                .map_err(|e| SweepError::Config(format!("bad number in column {i}: {e}")))
        };
        t.push(get(0)?);
        let mut col = 1;
        xs.push(DVector::from_iterator(n, (0..n).map(|i| get(col + i)).collect::<Result<Vec<_>>>()?));
        col += n;
        let uvals = (0..m * n).map(|i| get(col + i)).collect::<Result<Vec<_>>>()?;
        us.push(DMatrix::from_row_slice(m, n, &uvals));
        col += m * n;
        bs.push(DVector::from_iterator(m, (0..m).map(|i| get(col + i)).collect::<Result<Vec<_>>>()?));
        col += m;
        let blank = (0..m).all(|i| rec.get(col + i).map_or(true, |s| s.is_empty()));
        if blank {
            etas.push(None);
        } else {
            etas.push(Some(DVector::from_iterator(
                m,
                (0..m).map(|i| get(col + i)).collect::<Result<Vec<_>>>()?,
            )));
        }
    }
    let mesh = Mesh::from_nodes(&t)?;
    let k = mesh.k();
    let eta_nodes: Vec<DVector<f64>> = etas
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(j, e)| e.ok_or_else(|| SweepError::ShapeMismatch(format!("missing multipliers on row {j}"))))
        .collect::<Result<_>>()?;
    let controls = ControlPath::new(mesh, us, bs, tau)?;
    Ok(Trajectory {
        state: StatePath {
            mesh,
            x_nodes: xs,
            eta_nodes,
            side: Side::Implicit,
        },
        controls,
    })
}

/// Reference used by [`convergence_study`].
pub enum Reference<'a> {
    /// Exact solution as a function of time.
    Analytic(&'a dyn Fn(f64) -> DVector<f64>),
    /// Numerical solution on a fine mesh with the given number of steps.
    Richardson { k_ref: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub k: usize,
    pub h: f64,
    pub error: f64,
    /// `log(e_prev / e) / log(k / k_prev)`; `None` on the first row.
    pub order: Option<f64>,
}

/// Sup-norm errors of the catch-up solution (piecewise-linear interpolant,
/// sampled on a dense grid) against a reference, for each `k`.
pub fn convergence_study(
    x0: &DVector<f64>,
    controls: &dyn Fn(&Mesh) -> Result<ControlPath>,
    t_final: f64,
    reference: Reference<'_>,
    k_list: &[usize],
) -> Result<Vec<ConvergenceRow>> {
    if k_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(SweepError::Config("k_list must be increasing".into()));
    }
    let fine: Option<StatePath> = match reference {
        Reference::Richardson { k_ref } => {
            let mesh = Mesh::new(t_final, k_ref)?;
            Some(catch_up(x0, &controls(&mesh)?)?)
        }
        Reference::Analytic(_) => None,
    };
    let samples = 4000usize.max(8 * k_list.last().copied().unwrap_or(1));
    let mut rows: Vec<ConvergenceRow> = Vec::with_capacity(k_list.len());
    for &k in k_list {
        let mesh = Mesh::new(t_final, k)?;
        let path = catch_up(x0, &controls(&mesh)?)?;
        let mut err: f64 = 0.0;
        for s in 0..=samples {
            let t = t_final * s as f64 / samples as f64;
            let exact = match (&reference, &fine) {
                (Reference::Analytic(f), _) => f(t),
                (_, Some(f)) => f.at(t),
                _ => unreachable!(),
            };
            err = err.max((path.at(t) - exact).amax());
        }
        let order = rows.last().map(|prev: &ConvergenceRow| {
            (prev.error / err).ln() / (k as f64 / prev.k as f64).ln()
        });
        rows.push(ConvergenceRow {
            k,
            h: mesh.h(),
            error: err,
            order,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn path_from(mesh: Mesh, u: impl Fn(f64) -> DMatrix<f64>, b: impl Fn(f64) -> DVector<f64>) -> ControlPath {
        let us = mesh.nodes().iter().map(|&t| u(t)).collect();
        let bs = mesh.nodes().iter().map(|&t| b(t)).collect();
        ControlPath::new(mesh, us, bs, 0.0).unwrap()
    }

    #[test]
    fn tau_indices() {
        let mesh = Mesh::new(1.0, 10).unwrap();
        assert_eq!(index_tau(&mesh, 0.0), (0, 10));
        assert_eq!(index_tau(&mesh, 0.25), (3, 7));
        assert_eq!(index_tau(&mesh, 0.5), (5, 5));
        let mesh = Mesh::new(2.0, 8).unwrap();
        assert_eq!(index_tau(&mesh, 1.0), (4, 4));
    }

    #[test]
    fn non_uniform_nodes_are_rejected() {
        assert!(Mesh::from_nodes(&[0.0, 0.5, 1.0]).is_ok());
        assert!(matches!(
            Mesh::from_nodes(&[0.0, 0.4, 1.0]),
            Err(SweepError::MeshMismatch(_))
        ));
    }

    #[test]
    fn static_set_keeps_interior_state() {
        let mesh = Mesh::new(1.0, 20).unwrap();
        let ctrl = path_from(
            mesh,
            |_| DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]),
            |_| dv(&[1.0, 1.0]),
        );
        let x = catch_up(&dv(&[0.2, -0.3]), &ctrl).unwrap();
        assert!(x.x_nodes.iter().all(|xj| (xj - dv(&[0.2, -0.3])).norm() == 0.0));
        assert!(x.eta_nodes.iter().all(|e| e.norm() == 0.0));
    }

    #[test]
    fn one_dimensional_push_follows_moving_face() {
        let mesh = Mesh::new(1.0, 40).unwrap();
        let ctrl = path_from(mesh, |_| DMatrix::from_element(1, 1, -1.0), |t| dv(&[-t / 2.0]));
        let x = catch_up(&dv(&[0.0]), &ctrl).unwrap();
        for j in 0..=40 {
            assert!((x.x_nodes[j][0] - mesh.t(j) / 2.0).abs() <= mesh.h());
        }
        // x' = η: the multiplier is the pushing speed.
        assert!(x.eta_nodes.iter().all(|e| (e[0] - 0.5).abs() < 1e-9));
        let rep = verify_feasible(&x, &ctrl, 1e-8).unwrap();
        assert!(rep.feasible, "{rep:?}");
    }

    #[test]
    fn two_faces_pushing_simultaneously() {
        let mesh = Mesh::new(1.0, 50).unwrap();
        let ctrl = path_from(
            mesh,
            |_| DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]),
            |t| dv(&[1.0 - t / 2.0, 1.0 - t / 2.0]),
        );
        let x = catch_up(&dv(&[1.0, 1.0]), &ctrl).unwrap();
        assert!((x.x_nodes[50].clone() - dv(&[0.5, 0.5])).norm() <= mesh.h());
        assert!(verify_feasible(&x, &ctrl, 1e-8).unwrap().feasible);
    }

    #[test]
    fn sampled_analytic_path_is_feasible_on_the_face() {
        let mesh = Mesh::new(1.0, 25).unwrap();
        let ctrl = path_from(mesh, |_| DMatrix::from_element(1, 1, -1.0), |t| dv(&[-t / 2.0]));
        let xs = mesh.nodes().iter().map(|&t| dv(&[t / 2.0])).collect();
        let path = StatePath::from_states(xs, &ctrl, Side::Implicit, 1e-8).unwrap();
        let rep = verify_feasible(&path, &ctrl, 1e-8).unwrap();
        assert!(rep.feasible);
        assert!(rep.node_margins.iter().all(|m| m.abs() < 1e-15));
    }

    #[test]
    fn hand_built_path_outside_is_rejected() {
        let mesh = Mesh::new(1.0, 10).unwrap();
        let ctrl = path_from(mesh, |_| DMatrix::from_element(1, 1, 1.0), |_| dv(&[0.0]));
        let mut xs: Vec<DVector<f64>> = (0..=10).map(|_| dv(&[-0.5])).collect();
        xs[4] = dv(&[0.1]);
        let path = StatePath::from_states(xs, &ctrl, Side::Implicit, 1e-8).unwrap();
        let rep = verify_feasible(&path, &ctrl, 1e-8).unwrap();
        assert!(!rep.feasible);
        assert!((rep.max_violation - 0.1).abs() < 1e-12);
    }

    #[test]
    fn mesh_mismatch_is_reported() {
        let ctrl = path_from(Mesh::new(1.0, 10).unwrap(), |_| DMatrix::from_element(1, 1, 1.0), |_| dv(&[0.0]));
        let other = path_from(Mesh::new(1.0, 5).unwrap(), |_| DMatrix::from_element(1, 1, 1.0), |_| dv(&[0.0]));
        let x = catch_up(&dv(&[0.0]), &other).unwrap();
        assert!(matches!(verify_feasible(&x, &ctrl, 1e-8), Err(SweepError::MeshMismatch(_))));
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let mesh = Mesh::new(1.0, 7).unwrap();
        let ctrl = path_from(
            mesh,
            |t| DMatrix::from_row_slice(2, 2, &[t.cos(), t.sin(), 0.0, 1.0]),
            |t| dv(&[1.0 - t / 3.0, 0.7 + t * t]),
        );
        let x = catch_up(&dv(&[0.9, 0.1]), &ctrl).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &x, &ctrl).unwrap();
        let back = read_trajectory_csv(buf.as_slice(), 0.0).unwrap();
        for j in 0..=7 {
            assert!((&back.state.x_nodes[j] - &x.x_nodes[j]).amax() <= 1e-15 * x.x_nodes[j].amax().max(1.0));
            assert!((&back.controls.u_nodes[j] - &ctrl.u_nodes[j]).amax() <= 1e-15);
        }
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,x0,x1,u0,u1,u2,u3,b0,b1,eta0,eta1"));
        assert!(text.trim_end().ends_with(",,"));
    }
}
