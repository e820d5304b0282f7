//! Discrete necessary conditions: residual evaluation and certificate
//! reconstruction for a given discrete triple.
//!
//! With the primal triple fixed, every condition is linear in the duals
//! `(λ, p, γ, ξ)` and in the selections of nonsmooth subgradients, because
//! the velocity multipliers `η` and the activity pattern are read off the
//! primal. Certificates are therefore found by linear programming.

use std::collections::BTreeMap;

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{bracket, record, rep, ResidualReport, Slot, SubdiffBox, Subgrad, ACTIVE_TOL, NONTRIVIAL_TOL};
use crate::discrete_ocp::{DiscreteTriple, NodeView, Scenario};
use crate::error::{Result, SweepError};
use crate::lp::{LinearProgram, LpStatus, Sense};
use crate::sweeping::{fit_eta, index_tau, Side};

/// How the cost multiplier is treated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    Fixed(f64),
    /// Try `λ = 1` (normal case); otherwise settle for `λ = 0`.
    Free,
}

/// Multipliers of the discrete conditions on a mesh with `k` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualCertificate {
    pub lambda: f64,
    /// `k + 1` nodes each.
    pub px: Vec<DVector<f64>>,
    pub pu: Vec<DMatrix<f64>>,
    pub pb: Vec<DVector<f64>>,
    /// Velocity multipliers, one per step.
    pub eta: Vec<DVector<f64>>,
    /// One per step.
    pub gamma: Vec<DVector<f64>>,
    /// Normalisation multipliers, `k + 1` nodes.
    pub xi: Vec<DVector<f64>>,
    /// Subgradient selections `(w_j, v_j) ∈ ∂ℓ`, unscaled by `λ`.
    pub w: Vec<Subgrad>,
    pub v: Vec<Subgrad>,
    pub side: Side,
}

impl DualCertificate {
    pub fn zeros(k: usize, n: usize, m: usize, side: Side) -> Self {
        DualCertificate {
            lambda: 0.0,
            px: vec![DVector::zeros(n); k + 1],
            pu: vec![DMatrix::zeros(m, n); k + 1],
            pb: vec![DVector::zeros(m); k + 1],
            eta: vec![DVector::zeros(m); k],
            gamma: vec![DVector::zeros(m); k],
            xi: vec![DVector::zeros(m); k + 1],
            w: vec![Subgrad::zeros(n, m); k],
            v: vec![Subgrad::zeros(n, m); k],
            side,
        }
    }

    pub fn k(&self) -> usize {
        self.gamma.len()
    }

    /// Multiplies the dual variables (not `η`, not the selections) by `t`.
    pub fn scale(&self, t: f64) -> Self {
        let mut out = self.clone();
        out.lambda *= t;
        out.px.iter_mut().for_each(|p| *p *= t);
        out.pu.iter_mut().for_each(|p| *p *= t);
        out.pb.iter_mut().for_each(|p| *p *= t);
        out.gamma.iter_mut().for_each(|g| *g *= t);
        out.xi.iter_mut().for_each(|x| *x *= t);
        out
    }

    /// `λ + ‖p^u_0‖ + ‖p^b_0‖ + ‖p_k‖ + h Σ ‖γ_j‖ + Σ ‖ξ_j‖`.
    pub fn mass(&self, h: f64) -> f64 {
        let k = self.k();
        self.lambda
            + self.pu[0].norm()
            + self.pb[0].norm()
            + (self.px[k].norm_squared() + self.pu[k].norm_squared() + self.pb[k].norm_squared()).sqrt()
            + h * self.gamma.iter().map(|g| g.norm()).sum::<f64>()
            + self.xi.iter().map(|x| x.norm()).sum::<f64>()
    }

    /// Rescaled to unit [`mass`](Self::mass); unchanged when the mass is zero.
    pub fn normalized(&self, h: f64) -> Self {
        let mass = self.mass(h);
        if mass > 0.0 {
            self.scale(1.0 / mass)
        } else {
            self.clone()
        }
    }

    fn check_shapes(&self, k: usize, n: usize, m: usize) -> Result<()> {
        let lens = [
            self.px.len() == k + 1,
            self.pu.len() == k + 1,
            self.pb.len() == k + 1,
            self.xi.len() == k + 1,
            self.eta.len() == k,
            self.gamma.len() == k,
            self.w.len() == k,
            self.v.len() == k,
        ];
        let dims = self.px.iter().all(|p| p.len() == n)
            && self.pu.iter().all(|p| p.shape() == (m, n))
            && self.pb.iter().all(|p| p.len() == m)
            && self.xi.iter().all(|p| p.len() == m)
            && self.eta.iter().all(|p| p.len() == m)
            && self.gamma.iter().all(|p| p.len() == m)
            && self.w.iter().chain(&self.v).all(|s| s.x.len() == n && s.u.shape() == (m, n) && s.b.len() == m);
        if lens.iter().all(|&b| b) && dims {
            Ok(())
        } else {
            Err(SweepError::ShapeMismatch(format!(
                "certificate does not match k = {k}, n = {n}, m = {m}"
            )))
        }
    }
}

/// Allowed range of `ξ_{ji}`: free where the norm is pinned to one,
/// otherwise the normal cone of `[1/2, 3/2]` at `‖u_{ji}‖`.
fn xi_bounds(j: usize, norm: f64, j_tau: (usize, usize)) -> (f64, f64) {
    if (j_tau.0..=j_tau.1).contains(&j) {
        (f64::NEG_INFINITY, f64::INFINITY)
    } else if norm >= 1.5 - 1e-9 {
        (0.0, f64::INFINITY)
    } else if norm <= 0.5 + 1e-9 {
        (f64::NEG_INFINITY, 0.0)
    } else {
        (0.0, 0.0)
    }
}

/// Primal data the conditions are linearised around.
struct Primal<'a> {
    z: &'a DiscreteTriple,
    sc: &'a Scenario,
    k: usize,
    n: usize,
    m: usize,
    h: f64,
    fixed_u: bool,
    side: Side,
    eta: Vec<DVector<f64>>,
    /// `⟨u_{ji}, x_j⟩ − b_{ji}` for `j = 0..=k`.
    slack: Vec<DVector<f64>>,
    boxes: Vec<SubdiffBox>,
    j_tau: (usize, usize),
}

impl<'a> Primal<'a> {
    fn new(z: &'a DiscreteTriple, sc: &'a Scenario, side: Side) -> Result<Self> {
        let (n, m) = (sc.n(), sc.m());
        z.check_shapes(n, m).map_err(|e| SweepError::ShapeMismatch(e.to_string()))?;
        let k = z.k();
        let h = z.mesh.h();
        let ctrl = z.controls(sc.horizon.tau)?;
        let eta = (0..k)
            .map(|j| fit_eta(&z.x[j], &z.x[j + 1], &ctrl, j, side, ACTIVE_TOL).0)
            .collect();
        let slack = (0..=k).map(|j| &z.u[j] * &z.x[j] - &z.b[j]).collect();
        let boxes = (0..k)
            .map(|j| {
                let (dx, du, db) = z.diffs(j);
                let view = NodeView {
                    x: &z.x[j],
                    u: &z.u[j],
                    b: &z.b[j],
                    dx: &dx,
                    du: &du,
                    db: &db,
                };
                SubdiffBox::new(&sc.cost, z.mesh.t(j), view, n, m)
            })
            .collect();
        Ok(Primal {
            z,
            sc,
            k,
            n,
            m,
            h,
            fixed_u: sc.is_fixed_u(),
            side,
            eta,
            slack,
            boxes,
            j_tau: index_tau(&z.mesh, sc.horizon.tau),
        })
    }

    fn active(&self, j: usize, i: usize) -> bool {
        self.slack[j][i] >= -ACTIVE_TOL
    }

    /// Faces whose slack lies within ten times the activity tolerance
    /// without being active.
    fn borderline(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for j in 0..=self.k {
            for i in 0..self.m {
                let s = self.slack[j][i];
                if s < -ACTIVE_TOL && s >= -10.0 * ACTIVE_TOL {
                    out.push((j, i));
                }
            }
        }
        out
    }

    /// Node whose normals and activity govern step `j` of the state equation.
    fn dyn_node(&self, j: usize) -> usize {
        match self.side {
            Side::Implicit => j + 1,
            Side::Explicit => j,
        }
    }

    fn all_inactive(&self, j: usize, promoted: &[(usize, usize)]) -> bool {
        (0..self.m).all(|i| !self.active(j, i) && !promoted.contains(&(j, i)))
    }

    fn enhanced_applicable(&self) -> bool {
        (0..self.m).all(|i| !self.active(0, i))
    }
}

/// Evaluates every discrete condition at a certificate.
pub fn residuals_thm52(z: &DiscreteTriple, cert: &DualCertificate, scenario: &Scenario) -> Result<ResidualReport> {
    let pr = Primal::new(z, scenario, cert.side)?;
    let (k, n, m, h) = (pr.k, pr.n, pr.m, pr.h);
    cert.check_shapes(k, n, m)?;
    let lam = cert.lambda;
    let mut r = BTreeMap::new();
    for name in [
        "dyn", "compl-eta", "adjx", "adjb", "psiu", "orth", "meas-supp", "trans-x", "trans-b", "subgrad", "signs",
    ] {
        r.insert(name.to_string(), 0.0);
    }
    if !pr.fixed_u {
        for name in ["adju", "trans-u", "xi-sign"] {
            r.insert(name.to_string(), 0.0);
        }
    }
    record(&mut r, "signs", lam.min(0.0));
    for j in 0..k {
        let (x, u) = (&z.x[j], &z.u[j]);
        let node = pr.dyn_node(j);
        let eta = &cert.eta[j];
        let dx = (&z.x[j + 1] - x) / h;
        record(&mut r, "dyn", (&dx + z.u[node].transpose() * eta).amax());
        for i in 0..m {
            record(&mut r, "signs", eta[i].min(0.0));
            if !pr.active(node, i) {
                record(&mut r, "compl-eta", eta[i]);
            }
        }
        let (w, v) = (&cert.w[j], &cert.v[j]);
        let e = &v.x * lam - &cert.px[j + 1];
        let adjx = (&cert.px[j + 1] - &cert.px[j]) / h - &w.x * lam - u.transpose() * &cert.gamma[j];
        record(&mut r, "adjx", adjx.amax());
        let adjb = &cert.gamma[j] - &w.b * lam + (&cert.pb[j + 1] - &cert.pb[j]) / h;
        record(&mut r, "adjb", adjb.amax());
        record(&mut r, "psiu", (&cert.pb[j + 1] - &v.b * lam).amax());
        for i in 0..m {
            if eta[i] > ACTIVE_TOL {
                record(&mut r, "orth", u.row(i).transpose().dot(&e));
            }
        }
        if pr.all_inactive(j, &[]) {
            record(&mut r, "meas-supp", cert.gamma[j].amax());
        }
        if !pr.fixed_u {
            record(&mut r, "psiu", (&cert.pu[j + 1] - &v.u * lam).amax());
            let adju = (&cert.pu[j + 1] - &cert.pu[j]) / h
                - &w.u * lam
                - bracket(&cert.xi[j], u) * (2.0 / h)
                - rep(&cert.gamma[j], x)
                + rep(eta, &e);
            record(&mut r, "adju", adju.amax());
        }
        record(&mut r, "subgrad", pr.boxes[j].distance(w, v, pr.fixed_u));
    }
    let (xk, uk) = (&z.x[k], &z.u[k]);
    let grad = scenario.cost.terminal.gradient(xk);
    let tx = &cert.px[k] + grad * lam + uk.transpose() * &cert.pb[k];
    record(&mut r, "trans-x", tx.amax());
    for i in 0..m {
        record(&mut r, "trans-b", cert.pb[k][i].min(0.0));
        if !pr.active(k, i) {
            record(&mut r, "trans-b", cert.pb[k][i]);
        }
    }
    if !pr.fixed_u {
        let tu = &cert.pu[k] + rep(&cert.pb[k], xk) + bracket(&cert.xi[k], uk) * 2.0;
        record(&mut r, "trans-u", tu.amax());
        for j in 0..=k {
            for i in 0..m {
                let (lo, hi) = xi_bounds(j, z.u[j].row(i).norm(), pr.j_tau);
                let x = cert.xi[j][i];
                record(&mut r, "xi-sign", (lo - x).max(x - hi).max(0.0));
            }
        }
    }

    let nontriv = if pr.fixed_u {
        lam.abs() + cert.pb[0].norm()
    } else {
        lam.abs() + cert.pu[0].norm() + cert.pb[0].norm()
    };
    let enhanced = lam.abs() + (cert.px[k].norm_squared() + cert.pu[k].norm_squared() + cert.pb[k].norm_squared()).sqrt();
    let zero = |v: f64| v <= NONTRIVIAL_TOL;
    let degenerate = zero(lam.abs())
        && cert.px.iter().all(|p| zero(p.amax()))
        && cert.pb.iter().all(|p| zero(p.amax()))
        && cert.pu.iter().skip(1).all(|p| zero(p.amax()))
        && cert.gamma.iter().all(|g| zero(g.amax()))
        && cert.xi.iter().skip(1).all(|x| zero(x.amax()));
    Ok(ResidualReport::new(r, nontriv, enhanced, degenerate))
}

/// Classification of a candidate by the discrete conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// A certificate with `λ > 0` exists.
    Normal,
    /// Only `λ = 0` certificates exist, but some satisfies the applicable
    /// nontriviality condition.
    Abnormal,
    /// No certificate satisfies the applicable nontriviality condition.
    NotOptimal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    /// Normalised to unit mass when nonzero.
    pub certificate: DualCertificate,
    pub verdict: Verdict,
    /// Some certificate has `λ + ‖p^u_0‖ + ‖p^b_0‖ ≠ 0`.
    pub nontrivial_exists: bool,
    /// Some certificate has `(λ, p_k) ≠ 0`.
    pub enhanced_exists: bool,
    /// All faces are inactive at `x_0`, so the enhanced condition applies.
    pub enhanced_applicable: bool,
    pub residuals: ResidualReport,
    /// Number of activity patterns examined.
    pub branches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfeasibilityReport {
    pub lambda: f64,
    /// Condition groups of an irreducible infeasible subsystem.
    pub conflict: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum CertificateOutcome {
    Found(Box<CertificateReport>),
    Infeasible(InfeasibilityReport),
}

impl CertificateOutcome {
    pub fn report(&self) -> Option<&CertificateReport> {
        match self {
            CertificateOutcome::Found(r) => Some(r),
            CertificateOutcome::Infeasible(_) => None,
        }
    }
}

/// Order in which the deletion filter tries to drop condition groups.
const DELETION_ORDER: [&str; 11] = [
    "trans-b",
    "trans-u",
    "subgrad",
    "trans-x",
    "meas-supp",
    "orth",
    "adju",
    "adjx",
    "adjb",
    "psiu",
    "lambda-fix",
];

/// Variable layout of the certificate LP.
struct Layout {
    n: usize,
    m: usize,
    px0: usize,
    pu0: usize,
    pb0: usize,
    g0: usize,
    xi0: usize,
    total: usize,
}

impl Layout {
    fn new(k: usize, n: usize, m: usize, fixed_u: bool) -> Self {
        let px0 = 1;
        let pu0 = px0 + (k + 1) * n;
        let pb0 = pu0 + if fixed_u { 0 } else { (k + 1) * m * n };
        let g0 = pb0 + (k + 1) * m;
        let xi0 = g0 + k * m;
        let total = xi0 + if fixed_u { 0 } else { (k + 1) * m };
        Layout {
            n,
            m,
            px0,
            pu0,
            pb0,
            g0,
            xi0,
            total,
        }
    }
    const LAM: usize = 0;
    fn px(&self, j: usize, c: usize) -> usize {
        self.px0 + j * self.n + c
    }
    fn pu(&self, j: usize, i: usize, c: usize) -> usize {
        self.pu0 + (j * self.m + i) * self.n + c
    }
    fn pb(&self, j: usize, i: usize) -> usize {
        self.pb0 + j * self.m + i
    }
    fn g(&self, j: usize, i: usize) -> usize {
        self.g0 + j * self.m + i
    }
    fn xi(&self, j: usize, i: usize) -> usize {
        self.xi0 + j * self.m + i
    }
}

/// Contribution of one catalog term to a subgradient component.
struct Contribution {
    is_w: bool,
    slot: Slot,
    var: usize,
    coef: f64,
}

struct CertLp {
    lp: LinearProgram,
    layout: Layout,
    groups: BTreeMap<&'static str, Vec<usize>>,
    contrib: Vec<Vec<Contribution>>,
}

fn merged(mut coefs: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    coefs.sort_by_key(|&(j, _)| j);
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(coefs.len());
    for (j, a) in coefs {
        match out.last_mut() {
            Some((jj, aa)) if *jj == j => *aa += a,
            _ => out.push((j, a)),
        }
    }
    out.retain(|&(_, a)| a != 0.0);
    out
}

impl CertLp {
    fn row(&mut self, group: &'static str, coefs: Vec<(usize, f64)>, sense: Sense, rhs: f64) {
        let idx = self.lp.add_row(merged(coefs), sense, rhs);
        self.groups.entry(group).or_default().push(idx);
    }

    fn expr(&self, j: usize, is_w: bool, slot: Slot) -> Vec<(usize, f64)> {
        self.contrib[j]
            .iter()
            .filter(|c| c.is_w == is_w && c.slot == slot)
            .map(|c| (c.var, c.coef))
            .collect()
    }

    /// `Σ coef · expr`.
    fn scaled(&self, j: usize, is_w: bool, slot: Slot, factor: f64) -> Vec<(usize, f64)> {
        self.expr(j, is_w, slot).into_iter().map(|(v, a)| (v, a * factor)).collect()
    }

    fn build(pr: &Primal<'_>, lambda: Option<f64>, promoted: &[(usize, usize)]) -> Self {
        let (k, n, m, h) = (pr.k, pr.n, pr.m, pr.h);
        let layout = Layout::new(k, n, m, pr.fixed_u);
        let mut lp = LinearProgram::new(layout.total);
        for v in 1..layout.total {
            lp.set_free(v);
        }
        if !pr.fixed_u {
            for j in 0..=k {
                for i in 0..m {
                    let (lo, hi) = xi_bounds(j, pr.z.u[j].row(i).norm(), pr.j_tau);
                    lp.set_bounds(layout.xi(j, i), lo, hi);
                }
            }
        }
        let mut me = CertLp {
            lp,
            layout,
            groups: BTreeMap::new(),
            contrib: Vec::with_capacity(k),
        };
        let lam = Layout::LAM;

        // Subgradient selections.
        for j in 0..k {
            let (dx, du, db) = pr.z.diffs(j);
            let view = NodeView {
                x: &pr.z.x[j],
                u: &pr.z.u[j],
                b: &pr.z.b[j],
                dx: &dx,
                du: &du,
                db: &db,
            };
            let t = pr.z.mesh.t(j);
            let mut list = Vec::new();
            for term in pr.sc.cost.terms() {
                let (is_w, slot) = super::slot_of(term);
                if pr.fixed_u && matches!(slot, Slot::U(..)) {
                    continue;
                }
                let (lo, hi) = term.slope(t, view);
                if lo == hi {
                    list.push(Contribution {
                        is_w,
                        slot,
                        var: lam,
                        coef: lo,
                    });
                } else {
                    let s = me.lp.add_var(f64::NEG_INFINITY, f64::INFINITY, 0.0);
                    me.row("subgrad", vec![(s, 1.0), (lam, -hi)], Sense::Le, 0.0);
                    me.row("subgrad", vec![(s, -1.0), (lam, lo)], Sense::Le, 0.0);
                    list.push(Contribution {
                        is_w,
                        slot,
                        var: s,
                        coef: 1.0,
                    });
                }
            }
            me.contrib.push(list);
        }

        let l = &me.layout;
        let (pxv, puv, pbv, gv, xiv) = (
            |j, c| l.px(j, c),
            |j, i, c| l.pu(j, i, c),
            |j, i| l.pb(j, i),
            |j, i| l.g(j, i),
            |j, i| l.xi(j, i),
        );
        let mut rows: Vec<(&'static str, Vec<(usize, f64)>, Sense, f64)> = Vec::new();
        for j in 0..k {
            let (x, u) = (&pr.z.x[j], &pr.z.u[j]);
            let eta = &pr.eta[j];
            for c in 0..n {
                let mut coefs = vec![(pxv(j + 1, c), 1.0 / h), (pxv(j, c), -1.0 / h)];
                coefs.extend(me.scaled(j, true, Slot::X(c), -1.0));
                coefs.extend((0..m).map(|i| (gv(j, i), -u[(i, c)])));
                rows.push(("adjx", coefs, Sense::Eq, 0.0));
            }
            for i in 0..m {
                let mut coefs = vec![(gv(j, i), 1.0), (pbv(j + 1, i), 1.0 / h), (pbv(j, i), -1.0 / h)];
                coefs.extend(me.scaled(j, true, Slot::B(i), -1.0));
                rows.push(("adjb", coefs, Sense::Eq, 0.0));

                let mut coefs = vec![(pbv(j + 1, i), 1.0)];
                coefs.extend(me.scaled(j, false, Slot::B(i), -1.0));
                rows.push(("psiu", coefs, Sense::Eq, 0.0));

                if eta[i] > ACTIVE_TOL {
                    let mut coefs = Vec::new();
                    for c in 0..n {
                        coefs.extend(me.scaled(j, false, Slot::X(c), u[(i, c)]));
                        coefs.push((pxv(j + 1, c), -u[(i, c)]));
                    }
                    rows.push(("orth", coefs, Sense::Eq, 0.0));
                }
            }
            if pr.all_inactive(j, promoted) {
                for i in 0..m {
                    rows.push(("meas-supp", vec![(gv(j, i), 1.0)], Sense::Eq, 0.0));
                }
            }
            if !pr.fixed_u {
                for i in 0..m {
                    for c in 0..n {
                        let mut coefs = vec![
                            (puv(j + 1, i, c), 1.0 / h),
                            (puv(j, i, c), -1.0 / h),
                            (xiv(j, i), -2.0 / h * u[(i, c)]),
                            (gv(j, i), -x[c]),
                        ];
                        coefs.extend(me.scaled(j, true, Slot::U(i, c), -1.0));
                        if eta[i] != 0.0 {
                            coefs.extend(me.scaled(j, false, Slot::X(c), eta[i]));
                            coefs.push((pxv(j + 1, c), -eta[i]));
                        }
                        rows.push(("adju", coefs, Sense::Eq, 0.0));

                        let mut coefs = vec![(puv(j + 1, i, c), 1.0)];
                        coefs.extend(me.scaled(j, false, Slot::U(i, c), -1.0));
                        rows.push(("psiu", coefs, Sense::Eq, 0.0));
                    }
                }
            }
        }
        let (xk, uk) = (&pr.z.x[k], &pr.z.u[k]);
        let grad = pr.sc.cost.terminal.gradient(xk);
        for c in 0..n {
            let mut coefs = vec![(pxv(k, c), 1.0), (lam, grad[c])];
            coefs.extend((0..m).map(|i| (pbv(k, i), uk[(i, c)])));
            rows.push(("trans-x", coefs, Sense::Eq, 0.0));
        }
        for i in 0..m {
            rows.push(("trans-b", vec![(pbv(k, i), 1.0)], Sense::Ge, 0.0));
            if !pr.active(k, i) && !promoted.contains(&(k, i)) {
                rows.push(("trans-b", vec![(pbv(k, i), 1.0)], Sense::Eq, 0.0));
            }
            if !pr.fixed_u {
                for c in 0..n {
                    let coefs = vec![(puv(k, i, c), 1.0), (pbv(k, i), xk[c]), (xiv(k, i), 2.0 * uk[(i, c)])];
                    rows.push(("trans-u", coefs, Sense::Eq, 0.0));
                }
            }
        }
        if let Some(value) = lambda {
            rows.push(("lambda-fix", vec![(lam, 1.0)], Sense::Eq, value));
        }
        for (group, coefs, sense, rhs) in rows {
            me.row(group, coefs, sense, rhs);
        }
        me
    }

    fn drop_mask(&self, dropped: &[&str]) -> Vec<bool> {
        let mut mask = vec![false; self.lp.num_rows()];
        for g in dropped {
            if let Some(rows) = self.groups.get(g) {
                for &r in rows {
                    mask[r] = true;
                }
            }
        }
        mask
    }

    /// Copy with every variable confined to `[-1, 1]`.
    fn boxed(&self) -> LinearProgram {
        let mut lp = self.lp.clone();
        for v in 0..lp.num_vars() {
            let (lo, hi) = lp.bounds(v);
            lp.set_bounds(v, lo.max(-1.0), hi.min(1.0));
        }
        lp
    }

    fn extract(&self, pr: &Primal<'_>, x: &[f64]) -> DualCertificate {
        let (k, n, m) = (pr.k, pr.n, pr.m);
        let l = &self.layout;
        let mut cert = DualCertificate::zeros(k, n, m, pr.side);
        cert.lambda = x[Layout::LAM].max(0.0);
        for j in 0..=k {
            cert.px[j] = DVector::from_fn(n, |c, _| x[l.px(j, c)]);
            cert.pb[j] = DVector::from_fn(m, |i, _| x[l.pb(j, i)]);
            if !pr.fixed_u {
                cert.pu[j] = DMatrix::from_fn(m, n, |i, c| x[l.pu(j, i, c)]);
                cert.xi[j] = DVector::from_fn(m, |i, _| x[l.xi(j, i)]);
            }
        }
        for j in 0..k {
            cert.gamma[j] = DVector::from_fn(m, |i, _| x[l.g(j, i)]);
            cert.eta[j] = pr.eta[j].clone();
            if cert.lambda > 1e-12 {
                let mut w = Subgrad::zeros(n, m);
                let mut v = Subgrad::zeros(n, m);
                for c in &self.contrib[j] {
                    let val = c.coef * x[c.var] / x[Layout::LAM];
                    if c.is_w {
                        w.add(c.slot, val);
                    } else {
                        v.add(c.slot, val);
                    }
                }
                cert.w[j] = w;
                cert.v[j] = v;
            } else {
                let (w, v) = pr.boxes[j].least_element();
                cert.w[j] = w;
                cert.v[j] = v;
            }
        }
        cert
    }
}

/// Solves the discrete conditions for the duals at the default (implicit)
/// side convention.
pub fn solve_certificate(z: &DiscreteTriple, scenario: &Scenario, mode: LambdaMode) -> Result<CertificateOutcome> {
    solve_certificate_on(z, scenario, mode, Side::Implicit)
}

/// Activity patterns to try: every subset of the borderline faces promoted
/// to active, capped at 64 patterns.
fn patterns(pr: &Primal<'_>) -> Vec<Vec<(usize, usize)>> {
    let border = pr.borderline();
    let used = border.len().min(6);
    (0..1usize << used)
        .map(|mask| (0..used).filter(|b| mask >> b & 1 == 1).map(|b| border[b]).collect())
        .collect()
}

pub fn solve_certificate_on(
    z: &DiscreteTriple,
    scenario: &Scenario,
    mode: LambdaMode,
    side: Side,
) -> Result<CertificateOutcome> {
    let pr = Primal::new(z, scenario, side)?;
    let pats = patterns(&pr);
    let first_lambda = match mode {
        LambdaMode::Fixed(v) => {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(SweepError::Config(format!("lambda must be a finite nonnegative number, got {v}")));
            }
            v
        }
        LambdaMode::Free => 1.0,
    };
    let mut branches = 0;
    for promoted in &pats {
        branches += 1;
        let cl = CertLp::build(&pr, Some(first_lambda), promoted);
        let sol = cl.lp.solve()?;
        if sol.status == LpStatus::Optimal {
            let cert = cl.extract(&pr, &sol.x);
            return finish(&pr, cert, branches, first_lambda > 0.0, true, true, scenario, z);
        }
    }
    if let LambdaMode::Fixed(value) = mode {
        let cl = CertLp::build(&pr, Some(value), &pats[0]);
        let conflict = deletion_filter(&cl)?;
        debug!("no certificate with lambda = {value}; conflict {conflict:?}");
        return Ok(CertificateOutcome::Infeasible(InfeasibilityReport { lambda: value, conflict }));
    }

    // Abnormal case: λ = 0. The certificate set is a cone; probe it inside
    // the unit box for nonzero components of the nontriviality expressions.
    let cl = CertLp::build(&pr, Some(0.0), &pats[0]);
    let boxed = cl.boxed();
    let l = &cl.layout;
    let (k, n, m) = (pr.k, pr.n, pr.m);
    let mut standard: Vec<usize> = (0..m).map(|i| l.pb(0, i)).collect();
    let mut enhanced: Vec<usize> = (0..n).map(|c| l.px(k, c)).chain((0..m).map(|i| l.pb(k, i))).collect();
    if !pr.fixed_u {
        for i in 0..m {
            for c in 0..n {
                standard.push(l.pu(0, i, c));
                enhanced.push(l.pu(k, i, c));
            }
        }
    }
    let probe = |vars: &[usize]| -> Result<Option<Vec<f64>>> {
        for &v in vars {
            for sign in [-1.0, 1.0] {
                let mut lp = boxed.clone();
                lp.set_cost(v, sign);
                let sol = lp.solve()?;
                if sol.status == LpStatus::Optimal && sol.objective.abs() > NONTRIVIAL_TOL {
                    return Ok(Some(sol.x));
                }
            }
        }
        Ok(None)
    };
    let std_sol = probe(&standard)?;
    let enh_sol = probe(&enhanced)?;
    let applicable = pr.enhanced_applicable();
    let chosen = match (applicable, &enh_sol, &std_sol) {
        (true, Some(x), _) => Some(x.clone()),
        (_, _, Some(x)) => Some(x.clone()),
        (_, Some(x), None) => Some(x.clone()),
        _ => None,
    };
    let cert = match chosen {
        Some(x) => cl.extract(&pr, &x),
        None => {
            let mut c = DualCertificate::zeros(k, n, m, side);
            c.eta = pr.eta.clone();
            for j in 0..k {
                let (w, v) = pr.boxes[j].least_element();
                c.w[j] = w;
                c.v[j] = v;
            }
            c
        }
    };
    finish(&pr, cert, branches + 1, false, std_sol.is_some(), enh_sol.is_some(), scenario, z)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    pr: &Primal<'_>,
    cert: DualCertificate,
    branches: usize,
    normal: bool,
    nontrivial_exists: bool,
    enhanced_exists: bool,
    scenario: &Scenario,
    z: &DiscreteTriple,
) -> Result<CertificateOutcome> {
    let certificate = cert.normalized(pr.h);
    let residuals = residuals_thm52(z, &certificate, scenario)?;
    let applicable = pr.enhanced_applicable();
    let verdict = if normal {
        Verdict::Normal
    } else if (applicable && enhanced_exists) || (!applicable && nontrivial_exists) {
        Verdict::Abnormal
    } else {
        Verdict::NotOptimal
    };
    Ok(CertificateOutcome::Found(Box::new(CertificateReport {
        certificate,
        verdict,
        nontrivial_exists: normal || nontrivial_exists,
        enhanced_exists: normal || enhanced_exists,
        enhanced_applicable: applicable,
        residuals,
        branches,
    })))
}

/// Greedy deletion filter over condition groups: a group is dropped for
/// good when the system stays infeasible without it.
fn deletion_filter(cl: &CertLp) -> Result<Vec<String>> {
    let present: Vec<&str> = DELETION_ORDER.iter().copied().filter(|g| cl.groups.contains_key(g)).collect();
    let mut dropped: Vec<&str> = Vec::new();
    for g in &present {
        let mut trial = dropped.clone();
        trial.push(g);
        let lp = cl.lp.without_rows(&cl.drop_mask(&trial));
        if lp.solve()?.status == LpStatus::Infeasible {
            dropped.push(g);
        }
    }
    Ok(present.into_iter().filter(|g| !dropped.contains(g)).map(String::from).collect())
}

/// Sup-norm differences of `(p^x, p^b)` between consecutive certificates of
/// a refinement sequence, sampled at the nodes of the coarser mesh.
///
/// Certificates with `λ > 0` are compared at `λ = 1`; abnormal ones at unit
/// mass.
pub fn cauchy_differences(levels: &[(DiscreteTriple, DualCertificate)]) -> Vec<f64> {
    let prepared: Vec<(&DiscreteTriple, DualCertificate)> = levels
        .iter()
        .map(|(z, c)| {
            let c = if c.lambda > 1e-12 { c.scale(1.0 / c.lambda) } else { c.normalized(z.mesh.h()) };
            (z, c)
        })
        .collect();
    let sample = |z: &DiscreteTriple, c: &DualCertificate, t: f64| -> DVector<f64> {
        let (j, s) = z.mesh.locate(t);
        let px = &c.px[j] * (1.0 - s) + &c.px[j + 1] * s;
        let pb = &c.pb[j] * (1.0 - s) + &c.pb[j + 1] * s;
        DVector::from_iterator(px.len() + pb.len(), px.iter().chain(pb.iter()).copied())
    };
    prepared
        .windows(2)
        .map(|w| {
            let (za, ca) = (&w[0].0, &w[0].1);
            let (zb, cb) = (&w[1].0, &w[1].1);
            let coarse = if za.k() <= zb.k() { za } else { zb };
            coarse
                .mesh
                .nodes()
                .iter()
                .map(|&t| (sample(za, ca, t) - sample(zb, cb, t)).amax())
                .fold(0.0, f64::max)
        })
        .collect()
}
