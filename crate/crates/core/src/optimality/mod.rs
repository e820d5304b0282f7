//! Dual certificates for the discrete and continuous necessary optimality
//! conditions: reconstruction by linear programming and residual checks.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::discrete_ocp::{CostSpec, NodeView, Target, Term};

pub mod continuous;
pub mod discrete;

pub use continuous::{
    residuals_thm61, residuals_thm63, ContinuousCertificate, Covec, Measure,
};
pub use discrete::{
    cauchy_differences, residuals_thm52, solve_certificate, CertificateOutcome, CertificateReport,
    DualCertificate, InfeasibilityReport, LambdaMode, Verdict,
};

/// Residuals above this are reported as violations.
pub const RESIDUAL_TOL: f64 = 1e-8;
/// Slack below which a face counts as active.
pub const ACTIVE_TOL: f64 = 1e-8;
/// Magnitude above which a nontriviality expression counts as nonzero.
pub const NONTRIVIAL_TOL: f64 = 1e-7;

/// A subgradient of the running cost split by the variable it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subgrad {
    pub x: DVector<f64>,
    pub u: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Subgrad {
    pub fn zeros(n: usize, m: usize) -> Self {
        Subgrad {
            x: DVector::zeros(n),
            u: DMatrix::zeros(m, n),
            b: DVector::zeros(m),
        }
    }

    fn add(&mut self, slot: Slot, value: f64) {
        match slot {
            Slot::X(c) => self.x[c] += value,
            Slot::U(i, c) => self.u[(i, c)] += value,
            Slot::B(i) => self.b[i] += value,
        }
    }

    fn get(&self, slot: Slot) -> f64 {
        match slot {
            Slot::X(c) => self.x[c],
            Slot::U(i, c) => self.u[(i, c)],
            Slot::B(i) => self.b[i],
        }
    }

    fn slots(&self) -> Vec<Slot> {
        let (m, n) = self.u.shape();
        let mut out: Vec<Slot> = (0..n).map(Slot::X).collect();
        for i in 0..m {
            out.extend((0..n).map(|c| Slot::U(i, c)));
        }
        out.extend((0..m).map(Slot::B));
        out
    }
}

/// Residual table with the nontriviality diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    /// Largest absolute violation per condition.
    pub residuals: BTreeMap<String, f64>,
    pub max_residual: f64,
    pub feasible: bool,
    pub nontrivial: bool,
    pub nontrivial_magnitude: f64,
    pub enhanced_nontrivial: bool,
    pub enhanced_magnitude: f64,
    /// The certificate has the shape of the degenerate multipliers that
    /// exist for every feasible process (λ = 0, p ≡ 0, γ ≡ 0, ξ at t = 0).
    pub degenerate: bool,
}

impl ResidualReport {
    fn new(
        residuals: BTreeMap<String, f64>,
        nontrivial_magnitude: f64,
        enhanced_magnitude: f64,
        degenerate: bool,
    ) -> Self {
        let max_residual = residuals.values().fold(0.0f64, |a, &b| a.max(b));
        ResidualReport {
            max_residual,
            feasible: max_residual <= RESIDUAL_TOL,
            nontrivial: nontrivial_magnitude > NONTRIVIAL_TOL,
            nontrivial_magnitude,
            enhanced_nontrivial: enhanced_magnitude > NONTRIVIAL_TOL,
            enhanced_magnitude,
            degenerate,
            residuals,
        }
    }

    pub fn get(&self, name: &str) -> f64 {
        self.residuals.get(name).copied().unwrap_or(0.0)
    }

    /// Names of the conditions violated beyond [`RESIDUAL_TOL`].
    pub fn violated(&self) -> Vec<&str> {
        self.residuals
            .iter()
            .filter(|(_, &v)| v > RESIDUAL_TOL)
            .map(|(k, _)| k.as_str())
            .collect()
    }
}

/// Records `max |value|` under `name`.
pub(crate) fn record(map: &mut BTreeMap<String, f64>, name: &str, value: f64) {
    let v = if value.is_nan() { f64::INFINITY } else { value.abs() };
    let e = map.entry(name.to_string()).or_insert(0.0);
    *e = e.max(v);
}

/// Which subgradient component a running-cost term feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub(crate) enum Slot {
    X(usize),
    U(usize, usize),
    B(usize),
}

/// `true` for the state/control part `w`, `false` for the velocity part `v`.
pub(crate) fn slot_of(term: &Term) -> (bool, Slot) {
    match term.target {
        Target::X => (true, Slot::X(term.index)),
        Target::U => (true, Slot::U(term.index, term.dim)),
        Target::B => (true, Slot::B(term.index)),
        Target::Xdot => (false, Slot::X(term.index)),
        Target::Udot => (false, Slot::U(term.index, term.dim)),
        Target::Bdot => (false, Slot::B(term.index)),
    }
}

/// Componentwise bounds of `∂ℓ` (a box, since every catalog term reads a
/// single scalar).
#[derive(Debug, Clone)]
pub(crate) struct SubdiffBox {
    pub w_lo: Subgrad,
    pub w_hi: Subgrad,
    pub v_lo: Subgrad,
    pub v_hi: Subgrad,
}

impl SubdiffBox {
    pub fn new(cost: &CostSpec, t: f64, z: NodeView<'_>, n: usize, m: usize) -> Self {
        let mut b = SubdiffBox {
            w_lo: Subgrad::zeros(n, m),
            w_hi: Subgrad::zeros(n, m),
            v_lo: Subgrad::zeros(n, m),
            v_hi: Subgrad::zeros(n, m),
        };
        for term in cost.terms() {
            let (is_w, slot) = slot_of(term);
            let (lo, hi) = term.slope(t, z);
            let (l, h) = if is_w {
                (&mut b.w_lo, &mut b.w_hi)
            } else {
                (&mut b.v_lo, &mut b.v_hi)
            };
            l.add(slot, lo);
            h.add(slot, hi);
        }
        b
    }

    /// Distance (sup norm) of `(w, v)` from the box; `fixed_u` ignores the
    /// normal components.
    pub fn distance(&self, w: &Subgrad, v: &Subgrad, fixed_u: bool) -> f64 {
        let mut worst: f64 = 0.0;
        for (val, lo, hi) in [(w, &self.w_lo, &self.w_hi), (v, &self.v_lo, &self.v_hi)] {
            for s in val.slots() {
                if fixed_u && matches!(s, Slot::U(..)) {
                    continue;
                }
                let x = val.get(s);
                let d = (lo.get(s) - x).max(x - hi.get(s)).max(0.0);
                worst = worst.max(if x.is_nan() { f64::INFINITY } else { d });
            }
        }
        worst
    }

    /// The element of the box closest to zero.
    pub fn least_element(&self) -> (Subgrad, Subgrad) {
        let pick = |lo: &Subgrad, hi: &Subgrad| {
            let mut out = lo.clone();
            for s in lo.slots() {
                let v = 0.0f64.clamp(lo.get(s), hi.get(s));
                match s {
                    Slot::X(c) => out.x[c] = v,
                    Slot::U(i, c) => out.u[(i, c)] = v,
                    Slot::B(i) => out.b[i] = v,
                }
            }
            out
        };
        (pick(&self.w_lo, &self.w_hi), pick(&self.v_lo, &self.v_hi))
    }
}

/// `[a, rep_m(x)]`: the `m × n` matrix with rows `a_i x`.
pub(crate) fn rep(a: &DVector<f64>, x: &DVector<f64>) -> DMatrix<f64> {
    a * x.transpose()
}

/// `[a, u]`: rows `a_i u_i`.
pub(crate) fn bracket(a: &DVector<f64>, u: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = u.clone();
    for i in 0..u.nrows() {
        out.row_mut(i).scale_mut(a[i]);
    }
    out
}
