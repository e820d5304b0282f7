//! Continuous-time necessary conditions evaluated on a grid.
//!
//! The candidate is the piecewise-linear interpolant of a discrete triple.
//! The adjoint arc `p` lives at the nodes (piecewise linear in between);
//! `q`, `η`, `w`, `v` are constant on each interval and evaluated at its
//! midpoint; the measures `γ`, `ξ` are a piecewise-constant density plus
//! atoms sitting on nodes.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{bracket, record, rep, ResidualReport, SubdiffBox, Subgrad, ACTIVE_TOL, NONTRIVIAL_TOL};
use crate::discrete_ocp::{DiscreteTriple, NodeView, Scenario};
use crate::error::{Result, SweepError};
use crate::sweeping::Mesh;

/// An element of the `(x, u, b)` dual space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covec {
    pub x: DVector<f64>,
    pub u: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Covec {
    pub fn zeros(n: usize, m: usize) -> Self {
        Covec {
            x: DVector::zeros(n),
            u: DMatrix::zeros(m, n),
            b: DVector::zeros(m),
        }
    }

    fn norm(&self, with_u: bool) -> f64 {
        let u = if with_u { self.u.norm_squared() } else { 0.0 };
        (self.x.norm_squared() + u + self.b.norm_squared()).sqrt()
    }

    fn sub(&self, o: &Covec) -> Covec {
        Covec {
            x: &self.x - &o.x,
            u: &self.u - &o.u,
            b: &self.b - &o.b,
        }
    }
}

/// `ℝ^m`-valued measure: density per interval plus atoms at nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measure {
    /// Density (mass per unit time) on each of the `k` intervals.
    pub density: Vec<DVector<f64>>,
    /// `(node index, mass)`.
    pub atoms: Vec<(usize, DVector<f64>)>,
}

impl Measure {
    pub fn zeros(k: usize, m: usize) -> Self {
        Measure {
            density: vec![DVector::zeros(m); k],
            atoms: Vec::new(),
        }
    }

    /// Builds a measure from atoms given by time; every atom must sit on a
    /// mesh node.
    pub fn from_parts(mesh: &Mesh, density: Vec<DVector<f64>>, atoms: &[(f64, DVector<f64>)]) -> Result<Self> {
        if density.len() != mesh.k() {
            return Err(SweepError::MeasureFormat(format!(
                "{} density values for {} intervals",
                density.len(),
                mesh.k()
            )));
        }
        let h = mesh.h();
        let mut out = Vec::with_capacity(atoms.len());
        for (t, mass) in atoms {
            let j = (t / h).round();
            if !(0.0..=mesh.k() as f64).contains(&j) || (t - mesh.t(j as usize)).abs() > 1e-9 * h.max(1.0) {
                return Err(SweepError::MeasureFormat(format!("atom at t = {t} is not on a mesh node")));
            }
            out.push((j as usize, mass.clone()));
        }
        Ok(Measure { density, atoms: out })
    }

    pub fn dirac(k: usize, node: usize, mass: DVector<f64>) -> Self {
        let m = mass.len();
        Measure {
            density: vec![DVector::zeros(m); k],
            atoms: vec![(node, mass)],
        }
    }

    fn validate(&self, k: usize, m: usize) -> Result<()> {
        if self.density.len() != k {
            return Err(SweepError::MeasureFormat(format!(
                "{} density values for {k} intervals",
                self.density.len()
            )));
        }
        if self.density.iter().chain(self.atoms.iter().map(|(_, a)| a)).any(|d| d.len() != m) {
            return Err(SweepError::MeasureFormat(format!("measure components must have dimension {m}")));
        }
        if let Some((j, _)) = self.atoms.iter().find(|(j, _)| *j > k) {
            return Err(SweepError::MeasureFormat(format!("atom at node {j} beyond the mesh")));
        }
        if self.density.iter().chain(self.atoms.iter().map(|(_, a)| a)).any(|d| d.iter().any(|v| !v.is_finite())) {
            return Err(SweepError::MeasureFormat("measure has non-finite entries".into()));
        }
        Ok(())
    }

    pub fn atom(&self, node: usize) -> Option<DVector<f64>> {
        let mut sum: Option<DVector<f64>> = None;
        for (j, a) in &self.atoms {
            if *j == node {
                sum = Some(match sum {
                    Some(s) => s + a,
                    None => a.clone(),
                });
            }
        }
        sum
    }

    /// Total variation carried by `[a, b]`.
    fn variation_on(&self, mesh: &Mesh, a: f64, b: f64) -> f64 {
        let mut total = 0.0;
        for (j, d) in self.density.iter().enumerate() {
            let lo = mesh.t(j).max(a);
            let hi = mesh.t(j + 1).min(b);
            if hi > lo {
                total += d.lp_norm(1) * (hi - lo);
            }
        }
        let eps = 1e-12 * mesh.t_final().max(1.0);
        for (j, mass) in &self.atoms {
            let t = mesh.t(*j);
            if t >= a - eps && t <= b + eps {
                total += mass.lp_norm(1);
            }
        }
        total
    }

    fn is_zero(&self) -> bool {
        self.density.iter().all(|d| d.amax() <= NONTRIVIAL_TOL)
            && self.atoms.iter().all(|(_, a)| a.amax() <= NONTRIVIAL_TOL)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousCertificate {
    pub lambda: f64,
    /// Nodal values of the adjoint arc (`k + 1` each).
    pub px: Vec<DVector<f64>>,
    pub pu: Vec<DMatrix<f64>>,
    pub pb: Vec<DVector<f64>>,
    /// `q` on each interval (left-continuous representative, evaluated at
    /// the midpoint).
    pub q: Vec<Covec>,
    /// `q(0)`.
    pub q0: Covec,
    pub gamma: Measure,
    pub xi: Measure,
    pub eta: Vec<DVector<f64>>,
    pub w: Vec<Subgrad>,
    pub v: Vec<Subgrad>,
}

impl ContinuousCertificate {
    /// Everything zero on a mesh with `k` intervals.
    pub fn zeros(k: usize, n: usize, m: usize) -> Self {
        ContinuousCertificate {
            lambda: 0.0,
            px: vec![DVector::zeros(n); k + 1],
            pu: vec![DMatrix::zeros(m, n); k + 1],
            pb: vec![DVector::zeros(m); k + 1],
            q: vec![Covec::zeros(n, m); k],
            q0: Covec::zeros(n, m),
            gamma: Measure::zeros(k, m),
            xi: Measure::zeros(k, m),
            eta: vec![DVector::zeros(m); k],
            w: vec![Subgrad::zeros(n, m); k],
            v: vec![Subgrad::zeros(n, m); k],
        }
    }

    /// Replaces `q` by `p − (tail integrals)` for the given candidate.
    pub fn with_reconstructed_q(mut self, z: &DiscreteTriple, fixed_u: bool) -> Result<Self> {
        self.check_shapes(z)?;
        let k = z.k();
        self.q = (0..k).map(|j| self.p_at_mid(j).sub(&self.tail(z, Some(j), fixed_u))).collect();
        self.q0 = self.p_at_node(0).sub(&self.tail(z, None, fixed_u));
        Ok(self)
    }

    /// Continuous reading of a discrete certificate: `γ_j` as densities,
    /// `ξ_j` as atoms, and `q` reconstructed.
    pub fn from_discrete(z: &DiscreteTriple, cert: &super::DualCertificate, fixed_u: bool) -> Result<Self> {
        let k = z.k();
        let (n, m) = (z.n(), z.m());
        let mut out = ContinuousCertificate::zeros(k, n, m);
        out.lambda = cert.lambda;
        out.px = cert.px.clone();
        out.pu = cert.pu.clone();
        out.pb = cert.pb.clone();
        out.gamma.density = cert.gamma.clone();
        out.xi.atoms = cert.xi.iter().cloned().enumerate().filter(|(_, x)| x.amax() > 0.0).collect();
        out.eta = cert.eta.clone();
        out.w = cert.w.clone();
        out.v = cert.v.clone();
        out.with_reconstructed_q(z, fixed_u)
    }

    fn check_shapes(&self, z: &DiscreteTriple) -> Result<()> {
        let (k, n, m) = (z.k(), z.n(), z.m());
        let ok = self.px.len() == k + 1
            && self.pu.len() == k + 1
            && self.pb.len() == k + 1
            && self.q.len() == k
            && self.eta.len() == k
            && self.w.len() == k
            && self.v.len() == k
            && self.px.iter().all(|p| p.len() == n)
            && self.pu.iter().all(|p| p.shape() == (m, n))
            && self.pb.iter().all(|p| p.len() == m)
            && self.eta.iter().all(|e| e.len() == m)
            && self.q.iter().chain(std::iter::once(&self.q0)).all(|q| q.x.len() == n && q.u.shape() == (m, n) && q.b.len() == m)
            && self.w.iter().chain(&self.v).all(|s| s.x.len() == n && s.u.shape() == (m, n) && s.b.len() == m);
        if !ok {
            return Err(SweepError::ShapeMismatch(format!(
                "continuous certificate does not match k = {k}, n = {n}, m = {m}"
            )));
        }
        self.gamma.validate(k, m)?;
        self.xi.validate(k, m)
    }

    fn p_at_node(&self, j: usize) -> Covec {
        Covec {
            x: self.px[j].clone(),
            u: self.pu[j].clone(),
            b: self.pb[j].clone(),
        }
    }

    fn p_at_mid(&self, j: usize) -> Covec {
        Covec {
            x: (&self.px[j] + &self.px[j + 1]) * 0.5,
            u: (&self.pu[j] + &self.pu[j + 1]) * 0.5,
            b: (&self.pb[j] + &self.pb[j + 1]) * 0.5,
        }
    }

    /// `(∫ Σ ū_i dγ_i, ∫ [rep x̄, dγ] + 2 ∫ [ū, dξ], −∫ dγ)` over `[t, T]`,
    /// with `t` the midpoint of interval `j`, or `t = 0` for `None`.
    fn tail(&self, z: &DiscreteTriple, from: Option<usize>, fixed_u: bool) -> Covec {
        let (k, n, m) = (z.k(), z.n(), z.m());
        let h = z.mesh.h();
        let mut out = Covec::zeros(n, m);
        let lerp_u = |j: usize, s: f64| &z.u[j] * (1.0 - s) + &z.u[j + 1] * s;
        let lerp_x = |j: usize, s: f64| &z.x[j] * (1.0 - s) + &z.x[j + 1] * s;
        // Density part: exact for linear ū, x̄ against constant density.
        let add_density = |j: usize, s0: f64, out: &mut Covec| {
            let len = (1.0 - s0) * h;
            let sm = 0.5 * (1.0 + s0);
            let g = &self.gamma.density[j] * len;
            let (u, x) = (lerp_u(j, sm), lerp_x(j, sm));
            out.x += u.transpose() * &g;
            out.b -= &g;
            if !fixed_u {
                out.u += rep(&g, &x);
                out.u += bracket(&(&self.xi.density[j] * (2.0 * len)), &u);
            }
        };
        let first_full = match from {
            Some(j) => {
                add_density(j, 0.5, &mut out);
                j + 1
            }
            None => 0,
        };
        for j in first_full..k {
            add_density(j, 0.0, &mut out);
        }
        let first_node = from.map_or(0, |j| j + 1);
        for (j, g) in &self.gamma.atoms {
            if *j >= first_node {
                out.x += z.u[*j].transpose() * g;
                out.b -= g;
                if !fixed_u {
                    out.u += rep(g, &z.x[*j]);
                }
            }
        }
        if !fixed_u {
            for (j, xi) in &self.xi.atoms {
                if *j >= first_node {
                    out.u += bracket(xi, &z.u[*j]) * 2.0;
                }
            }
        }
        out
    }
}

/// Residuals of the conditions with free normals.
pub fn residuals_thm61(z: &DiscreteTriple, cert: &ContinuousCertificate, scenario: &Scenario) -> Result<ResidualReport> {
    residuals(z, cert, scenario, false)
}

/// Residuals of the conditions with prescribed normals: no `u`-equations
/// and the reduced `q` reconstruction.
pub fn residuals_thm63(z: &DiscreteTriple, cert: &ContinuousCertificate, scenario: &Scenario) -> Result<ResidualReport> {
    if !scenario.is_fixed_u() {
        return Err(SweepError::Config("the fixed-normal conditions need a fixed_u scenario".into()));
    }
    residuals(z, cert, scenario, true)
}

fn residuals(z: &DiscreteTriple, cert: &ContinuousCertificate, scenario: &Scenario, fixed_u: bool) -> Result<ResidualReport> {
    let (n, m) = (scenario.n(), scenario.m());
    z.check_shapes(n, m).map_err(|e| SweepError::ShapeMismatch(e.to_string()))?;
    cert.check_shapes(z)?;
    let k = z.k();
    let h = z.mesh.h();
    let mesh = &z.mesh;
    let lam = cert.lambda;
    let mut r = BTreeMap::new();
    let mut names = vec![
        "etajkl", "etajk-defl", "orth", "hamiltonx", "hamilton2ub", "co", "q-identity", "pxkkc", "alphak1c",
        "nonatomic-a", "signs",
    ];
    if !fixed_u {
        names.extend(["pk-1c", "nonatomic-b"]);
    }
    for name in names {
        r.insert(name.to_string(), 0.0);
    }
    record(&mut r, "signs", lam.min(0.0));
    let slack: Vec<DVector<f64>> = (0..=k).map(|j| &z.u[j] * &z.x[j] - &z.b[j]).collect();
    let inactive = |j: usize, i: usize| slack[j][i] < -ACTIVE_TOL;

    for j in 0..k {
        let tm = mesh.t(j) + 0.5 * h;
        let um = (&z.u[j] + &z.u[j + 1]) * 0.5;
        let xm = (&z.x[j] + &z.x[j + 1]) * 0.5;
        let bm = (&z.b[j] + &z.b[j + 1]) * 0.5;
        let (dx, du, db) = z.diffs(j);
        let eta = &cert.eta[j];
        let q = &cert.q[j];
        let (w, v) = (&cert.w[j], &cert.v[j]);

        record(&mut r, "etajkl", (&dx + um.transpose() * eta).amax());
        for i in 0..m {
            record(&mut r, "signs", eta[i].min(0.0));
            if inactive(j, i) && inactive(j + 1, i) {
                record(&mut r, "etajk-defl", eta[i]);
            }
        }
        let e = &v.x * lam - &q.x;
        for i in 0..m {
            if eta[i] > ACTIVE_TOL {
                record(&mut r, "orth", um.row(i).transpose().dot(&e));
            }
        }
        let hx = (&cert.px[j + 1] - &cert.px[j]) / h - &w.x * lam;
        let hb = (&cert.pb[j + 1] - &cert.pb[j]) / h - &w.b * lam;
        record(&mut r, "hamiltonx", hx.amax().max(hb.amax()));
        record(&mut r, "hamilton2ub", (&q.b - &v.b * lam).amax());
        if !fixed_u {
            let hu = (&cert.pu[j + 1] - &cert.pu[j]) / h - &w.u * lam + rep(eta, &e);
            record(&mut r, "hamiltonx", hu.amax());
            record(&mut r, "hamilton2ub", (&q.u - &v.u * lam).amax());
        }
        let view = NodeView {
            x: &xm,
            u: &um,
            b: &bm,
            dx: &dx,
            du: &du,
            db: &db,
        };
        let bx = SubdiffBox::new(&scenario.cost, tm, view, n, m);
        record(&mut r, "co", bx.distance(w, v, fixed_u));

        let expect = cert.p_at_mid(j).sub(&cert.tail(z, Some(j), fixed_u));
        let diff = q.sub(&expect);
        let mut worst = diff.x.amax().max(diff.b.amax());
        if !fixed_u {
            worst = worst.max(diff.u.amax());
        }
        record(&mut r, "q-identity", worst);
    }
    let expect0 = cert.p_at_node(0).sub(&cert.tail(z, None, fixed_u));
    let d0 = cert.q0.sub(&expect0);
    record(&mut r, "q-identity", d0.x.amax().max(d0.b.amax()).max(if fixed_u { 0.0 } else { d0.u.amax() }));

    let (xk, uk) = (&z.x[k], &z.u[k]);
    let grad = scenario.cost.terminal.gradient(xk);
    record(&mut r, "pxkkc", (&cert.px[k] + grad * lam + uk.transpose() * &cert.pb[k]).amax());
    for i in 0..m {
        let pbi = cert.pb[k][i];
        record(&mut r, "alphak1c", pbi.min(0.0));
        if inactive(k, i) {
            record(&mut r, "alphak1c", pbi);
        }
        if !fixed_u {
            let ui = uk.row(i).transpose();
            let y = cert.pu[k].row(i).transpose() + xk * pbi;
            record(&mut r, "pk-1c", (&y - &ui * y.dot(&ui)).amax());
        }
    }

    // Nonatomicity: no γ-mass near times where every face is strictly
    // inactive; no ξ-mass near relaxed-norm times.
    let radius = 2.0 * h;
    for j in 0..k {
        if (0..m).all(|i| inactive(j, i)) {
            let t = mesh.t(j);
            record(&mut r, "nonatomic-a", cert.gamma.variation_on(mesh, t - radius, t + radius));
        }
    }
    if !fixed_u {
        let tau = scenario.horizon.tau;
        let tf = mesh.t_final();
        if tau > 0.0 {
            for j in 0..=k {
                let t = mesh.t(j);
                let in_region = t < tau || t > tf - tau;
                let relaxed = (0..m).all(|i| {
                    let nrm = z.u[j].row(i).norm();
                    nrm > 0.5 && nrm < 1.5
                });
                if in_region && relaxed {
                    let (a, b) = if t < tau {
                        ((t - radius).max(0.0), (t + radius).min(tau - 1e-12))
                    } else {
                        ((t - radius).max(tf - tau + 1e-12), (t + radius).min(tf))
                    };
                    record(&mut r, "nonatomic-b", cert.xi.variation_on(mesh, a, b));
                }
            }
        }
    }

    let p_t = Covec {
        x: cert.px[k].clone(),
        u: cert.pu[k].clone(),
        b: cert.pb[k].clone(),
    };
    let nontriv = lam.abs() + cert.q0.norm(!fixed_u) + p_t.norm(!fixed_u);
    let enhanced = lam.abs() + p_t.norm(!fixed_u);
    let zero = |v: f64| v <= NONTRIVIAL_TOL;
    let degenerate = zero(lam.abs())
        && cert.px.iter().all(|p| zero(p.amax()))
        && cert.pb.iter().all(|p| zero(p.amax()))
        && (fixed_u || cert.pu.iter().all(|p| zero(p.amax())))
        && cert.gamma.is_zero()
        && cert.xi.density.iter().all(|d| zero(d.amax()))
        && cert.xi.atoms.iter().all(|(j, a)| *j == 0 || zero(a.amax()));
    Ok(ResidualReport::new(r, nontriv, enhanced, degenerate))
}
