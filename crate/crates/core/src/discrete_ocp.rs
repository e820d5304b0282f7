//! Discrete approximation problems: scenario description, Bolza cost
//! evaluation on a uniform mesh, a reduced-space solver that eliminates the
//! state through the catch-up scheme, and closed-loop strategy evaluation.

use std::collections::BTreeMap;

use log::{debug, info};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SweepError};
use crate::geometry::{project, MovingPolyhedron, DEFAULT_ACTIVE_TOL};
use crate::sweeping::{index_tau, ControlPath, Mesh, StatePath};

/// Scalar functions of time used for references and control paths.
///
/// In configuration files a bare number is accepted as a constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScalarFn {
    Const {
        value: f64,
    },
    /// `Σ c_i t^i`.
    Poly {
        coeffs: Vec<f64>,
    },
    /// `amp · sin(freq · t + phase)`.
    Sin {
        amp: f64,
        freq: f64,
        #[serde(default)]
        phase: f64,
    },
    Cos {
        amp: f64,
        freq: f64,
        #[serde(default)]
        phase: f64,
    },
    /// `pieces[i]` on `[breaks[i-1], breaks[i])`, with `breaks` increasing and
    /// one fewer break than pieces; the last piece extends to `+∞`.
    Piecewise {
        breaks: Vec<f64>,
        pieces: Vec<ScalarFn>,
    },
    Sum {
        terms: Vec<ScalarFn>,
    },
    Scaled {
        factor: f64,
        inner: Box<ScalarFn>,
    },
}

impl Default for ScalarFn {
    fn default() -> Self {
        ScalarFn::Const { value: 0.0 }
    }
}

impl From<f64> for ScalarFn {
    fn from(value: f64) -> Self {
        ScalarFn::Const { value }
    }
}

impl ScalarFn {
    pub fn constant(value: f64) -> Self {
        ScalarFn::Const { value }
    }

    pub fn linear(c0: f64, c1: f64) -> Self {
        ScalarFn::Poly { coeffs: vec![c0, c1] }
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self {
            ScalarFn::Const { value } => *value,
            ScalarFn::Poly { coeffs } => coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c),
            ScalarFn::Sin { amp, freq, phase } => amp * (freq * t + phase).sin(),
            ScalarFn::Cos { amp, freq, phase } => amp * (freq * t + phase).cos(),
            ScalarFn::Piecewise { breaks, pieces } => {
                let idx = breaks.iter().take_while(|&&b| t >= b).count();
                pieces[idx.min(pieces.len() - 1)].eval(t)
            }
            ScalarFn::Sum { terms } => terms.iter().map(|f| f.eval(t)).sum(),
            ScalarFn::Scaled { factor, inner } => factor * inner.eval(t),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            ScalarFn::Piecewise { breaks, pieces } => {
                if pieces.len() != breaks.len() + 1 || breaks.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(SweepError::Config(
                        "piecewise function needs increasing breaks and one more piece than breaks".into(),
                    ));
                }
                pieces.iter().try_for_each(ScalarFn::validate)
            }
            ScalarFn::Sum { terms } => terms.iter().try_for_each(ScalarFn::validate),
            ScalarFn::Scaled { inner, .. } => inner.validate(),
            _ => Ok(()),
        }
    }
}

/// Accepts either a bare number or a tagged [`ScalarFn`].
#[derive(Deserialize)]
#[serde(untagged)]
enum ScalarFnRepr {
    Number(f64),
    Tagged(ScalarFn),
}

mod scalar_list {
    use super::{ScalarFn, ScalarFnRepr};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[ScalarFn], s: S) -> Result<S::Ok, S::Error> {
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<ScalarFn>, D::Error> {
        let raw = Vec::<ScalarFnRepr>::deserialize(d)?;
        Ok(raw
            .into_iter()
            .map(|r| match r {
                ScalarFnRepr::Number(x) => ScalarFn::constant(x),
                ScalarFnRepr::Tagged(f) => f,
            })
            .collect())
    }
}

mod scalar_matrix {
    use super::{ScalarFn, ScalarFnRepr};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[Vec<ScalarFn>], s: S) -> Result<S::Ok, S::Error> {
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<ScalarFn>>, D::Error> {
        let raw = Vec::<Vec<ScalarFnRepr>>::deserialize(d)?;
        Ok(raw
            .into_iter()
            .map(|row| {
                row.into_iter()
                    .map(|r| match r {
                        ScalarFnRepr::Number(x) => ScalarFn::constant(x),
                        ScalarFnRepr::Tagged(f) => f,
                    })
                    .collect()
            })
            .collect())
    }

    pub mod opt {
        use super::*;

        pub fn serialize<S: Serializer>(v: &Option<Vec<Vec<ScalarFn>>>, s: S) -> Result<S::Ok, S::Error> {
            v.serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<Vec<ScalarFn>>>, D::Error> {
            #[derive(Deserialize)]
            struct Wrap(#[serde(deserialize_with = "super::deserialize")] Vec<Vec<ScalarFn>>);
            Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
        }
    }
}

mod scalar_reference {
    use super::{ScalarFn, ScalarFnRepr};
    use serde::{Deserialize, Deserializer};

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<ScalarFn, D::Error> {
        Ok(match ScalarFnRepr::deserialize(d)? {
            ScalarFnRepr::Number(x) => ScalarFn::constant(x),
            ScalarFnRepr::Tagged(f) => f,
        })
    }
}

/// Which quantity a running-cost term reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    X,
    U,
    B,
    Xdot,
    Udot,
    Bdot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermKind {
    /// `weight · (value − r(t))²`
    Quadratic,
    /// `weight · |value − r(t)|`
    Abs,
}

/// One catalog term of the running cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub target: Target,
    /// Face (for `u`, `b`) or coordinate (for `x`).
    #[serde(default)]
    pub index: usize,
    /// Coordinate of the normal `u_index` (only for `u`, `udot`).
    #[serde(default)]
    pub dim: usize,
    pub kind: TermKind,
    pub weight: f64,
    #[serde(default, deserialize_with = "scalar_reference::deserialize")]
    pub reference: ScalarFn,
}

impl Term {
    pub fn quadratic(target: Target, index: usize, weight: f64, reference: ScalarFn) -> Self {
        Term {
            target,
            index,
            dim: 0,
            kind: TermKind::Quadratic,
            weight,
            reference,
        }
    }

    pub fn abs(target: Target, index: usize, weight: f64, reference: ScalarFn) -> Self {
        Term {
            target,
            index,
            dim: 0,
            kind: TermKind::Abs,
            weight,
            reference,
        }
    }

    /// Reads the targeted value from a node and its forward difference.
    pub fn read(&self, z: NodeView<'_>) -> f64 {
        match self.target {
            Target::X => z.x[self.index],
            Target::U => z.u[(self.index, self.dim)],
            Target::B => z.b[self.index],
            Target::Xdot => z.dx[self.index],
            Target::Udot => z.du[(self.index, self.dim)],
            Target::Bdot => z.db[self.index],
        }
    }

    pub fn value(&self, t: f64, z: NodeView<'_>) -> f64 {
        let e = self.read(z) - self.reference.eval(t);
        match self.kind {
            TermKind::Quadratic => self.weight * e * e,
            TermKind::Abs => self.weight * e.abs(),
        }
    }

    /// Subdifferential of the term with respect to the value it reads, as an
    /// interval `[lo, hi]` (a point for smooth terms).
    pub fn slope(&self, t: f64, z: NodeView<'_>) -> (f64, f64) {
        let e = self.read(z) - self.reference.eval(t);
        match self.kind {
            TermKind::Quadratic => {
                let g = 2.0 * self.weight * e;
                (g, g)
            }
            TermKind::Abs => {
                if e.abs() <= KINK_TOL * (1.0 + self.reference.eval(t).abs()) {
                    (-self.weight, self.weight)
                } else {
                    let g = self.weight * e.signum();
                    (g, g)
                }
            }
        }
    }

    pub fn is_smooth(&self) -> bool {
        self.kind == TermKind::Quadratic
    }
}

/// Distance below which an absolute-value term is treated as sitting on its kink.
pub const KINK_TOL: f64 = 1e-8;

/// A node `z_j` together with the forward difference `(z_{j+1} − z_j)/h`.
#[derive(Debug, Clone, Copy)]
pub struct NodeView<'a> {
    pub x: &'a DVector<f64>,
    pub u: &'a DMatrix<f64>,
    pub b: &'a DVector<f64>,
    pub dx: &'a DVector<f64>,
    pub du: &'a DMatrix<f64>,
    pub db: &'a DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TerminalKind {
    #[default]
    None,
    /// `weight · ‖x − c‖²`
    Quadratic,
    /// `weight · ‖x − c‖² / 2`
    QuadraticHalf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Terminal {
    pub kind: TerminalKind,
    #[serde(default)]
    pub center: Vec<f64>,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

impl Terminal {
    fn factor(&self) -> f64 {
        match self.kind {
            TerminalKind::None => 0.0,
            TerminalKind::Quadratic => self.weight,
            TerminalKind::QuadraticHalf => 0.5 * self.weight,
        }
    }

    fn center(&self, n: usize) -> DVector<f64> {
        if self.center.is_empty() {
            DVector::zeros(n)
        } else {
            DVector::from_column_slice(&self.center)
        }
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        self.factor() * (x - self.center(x.len())).norm_squared()
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        (x - self.center(x.len())) * (2.0 * self.factor())
    }
}

/// `φ` plus the running cost `ℓ = ℓ1(t, z) + ℓ2(ẋ) + ℓ3(t, u̇, ḃ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CostSpec {
    #[serde(default)]
    pub terminal: Terminal,
    #[serde(default)]
    pub l1: Vec<Term>,
    #[serde(default)]
    pub l2: Vec<Term>,
    #[serde(default)]
    pub l3: Vec<Term>,
}

impl CostSpec {
    pub fn terms(&self) -> impl Iterator<Item = &Term> {
        self.l1.iter().chain(&self.l2).chain(&self.l3)
    }

    pub fn is_smooth(&self) -> bool {
        self.terms().all(Term::is_smooth)
    }

    pub fn running(&self, t: f64, z: NodeView<'_>) -> f64 {
        self.terms().map(|term| term.value(t, z)).sum()
    }

    fn validate(&self, n: usize, m: usize) -> Result<()> {
        let groups: [(&str, &[Term], &[Target]); 3] = [
            ("l1", &self.l1, &[Target::X, Target::U, Target::B]),
            ("l2", &self.l2, &[Target::Xdot]),
            ("l3", &self.l3, &[Target::Udot, Target::Bdot]),
        ];
        for (name, terms, allowed) in groups {
            for term in terms {
                if !allowed.contains(&term.target) {
                    return Err(SweepError::Config(format!("{name} cannot read {:?}", term.target)));
                }
                let ok = match term.target {
                    Target::X | Target::Xdot => term.index < n,
                    Target::U | Target::Udot => term.index < m && term.dim < n,
                    Target::B | Target::Bdot => term.index < m,
                };
                if !ok || !term.weight.is_finite() {
                    return Err(SweepError::Config(format!("{name} term {term:?} is out of range")));
                }
                term.reference.validate()?;
            }
        }
        if !self.terminal.center.is_empty() && self.terminal.center.len() != n {
            return Err(SweepError::Config("terminal center has the wrong dimension".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Normals and offsets are both decision variables.
    #[default]
    FreeU,
    /// Normals follow a prescribed path; only the offsets are optimised.
    FixedU,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Horizon {
    #[serde(rename = "T")]
    pub t_final: f64,
    #[serde(default)]
    pub tau: f64,
    #[serde(default = "default_k")]
    pub k: usize,
}

fn default_k() -> usize {
    100
}

/// Control paths as functions of time. `u_init` rows are faces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Controls {
    #[serde(with = "scalar_matrix")]
    pub u_init: Vec<Vec<ScalarFn>>,
    #[serde(with = "scalar_list")]
    pub b_init: Vec<ScalarFn>,
    /// Prescribed normals in fixed mode (defaults to `u_init`).
    #[serde(default, with = "scalar_matrix::opt", skip_serializing_if = "Option::is_none")]
    pub fixed_u: Option<Vec<Vec<ScalarFn>>>,
    /// Optional shift `σ(t)`: offsets become `b_i − ⟨σ, u_i⟩`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<ScalarFn>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub seed: u64,
    /// Budget of cost evaluations for the pattern-search phase.
    #[serde(default = "default_pattern_budget")]
    pub pattern_budget: usize,
}

fn default_max_iter() -> usize {
    300
}
fn default_fd_step() -> f64 {
    1e-6
}
fn default_tol() -> f64 {
    1e-6
}
fn default_pattern_budget() -> usize {
    400_000
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iter: default_max_iter(),
            fd_step: default_fd_step(),
            tol: default_tol(),
            seed: 0,
            pattern_budget: default_pattern_budget(),
        }
    }
}

/// Localisation radius and derivative bound of the discrete problems.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    #[serde(default = "default_eps")]
    pub epsilon: f64,
    #[serde(default = "default_m_tilde")]
    pub m_tilde: f64,
}

fn default_eps() -> f64 {
    10.0
}
fn default_m_tilde() -> f64 {
    1e6
}

impl Default for Localization {
    fn default() -> Self {
        Localization {
            epsilon: default_eps(),
            m_tilde: default_m_tilde(),
        }
    }
}

/// A complete problem description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub dims: Dims,
    pub horizon: Horizon,
    pub x0: Vec<f64>,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub cost: CostSpec,
    pub controls: Controls,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub localization: Localization,
}

impl Scenario {
    pub fn n(&self) -> usize {
        self.dims.n
    }

    pub fn m(&self) -> usize {
        self.dims.m
    }

    pub fn x0(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.x0)
    }

    pub fn is_fixed_u(&self) -> bool {
        self.mode == Mode::FixedU
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.n(), self.m());
        if n == 0 || self.x0.len() != n {
            return Err(SweepError::Config(format!("x0 must have {n} > 0 entries")));
        }
        let h = &self.horizon;
        if !(h.t_final > 0.0) || !(0.0..=h.t_final / 2.0).contains(&h.tau) {
            return Err(SweepError::Config(format!(
                "horizon T = {}, tau = {} (need T > 0, 0 ≤ tau ≤ T/2)",
                h.t_final, h.tau
            )));
        }
        let check_u = |u: &Vec<Vec<ScalarFn>>| -> Result<()> {
            if u.len() != m || u.iter().any(|r| r.len() != n) {
                return Err(SweepError::Config(format!("normals must be {m} rows of {n} functions")));
            }
            u.iter().flatten().try_for_each(ScalarFn::validate)
        };
        check_u(&self.controls.u_init)?;
        if let Some(fu) = &self.controls.fixed_u {
            check_u(fu)?;
        }
        if self.controls.b_init.len() != m {
            return Err(SweepError::Config(format!("b_init must have {m} functions")));
        }
        if let Some(s) = &self.controls.sigma {
            if s.len() != n {
                return Err(SweepError::Config(format!("sigma must have {n} functions")));
            }
        }
        self.cost.validate(n, m)
    }

    /// Normals prescribed (fixed mode) or initial guess (free mode).
    pub fn normals_at(&self, t: f64) -> DMatrix<f64> {
        let rows = match (self.mode, &self.controls.fixed_u) {
            (Mode::FixedU, Some(fu)) => fu,
            _ => &self.controls.u_init,
        };
        DMatrix::from_fn(self.m(), self.n(), |i, c| rows[i][c].eval(t))
    }

    /// Offsets from `b_init`, shifted by `σ` when present.
    pub fn offsets_at(&self, t: f64) -> DVector<f64> {
        let mut b = DVector::from_fn(self.m(), |i, _| self.controls.b_init[i].eval(t));
        if let Some(sigma) = &self.controls.sigma {
            let s = DVector::from_fn(self.n(), |c, _| sigma[c].eval(t));
            b -= self.normals_at(t) * s;
        }
        b
    }

    /// The scenario's control functions sampled on a mesh.
    pub fn control_path(&self, mesh: &Mesh) -> Result<ControlPath> {
        let us = mesh.nodes().iter().map(|&t| self.normals_at(t)).collect();
        let bs = mesh.nodes().iter().map(|&t| self.offsets_at(t)).collect();
        ControlPath::new(*mesh, us, bs, self.horizon.tau)
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let sc: Scenario = toml::from_str(s)?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let sc: Scenario = serde_json::from_str(s)?;
        sc.validate()?;
        Ok(sc)
    }

    /// Loads a `.toml` or `.json` scenario file (by extension, JSON otherwise).
    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => Self::from_toml_str(&text),
            _ => Self::from_json_str(&text),
        }
    }
}

/// `z = (x_0..x_k, u_0..u_k, b_0..b_k)` on a uniform mesh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteTriple {
    pub mesh: Mesh,
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DMatrix<f64>>,
    pub b: Vec<DVector<f64>>,
}

impl DiscreteTriple {
    pub fn from_paths(state: &StatePath, ctrl: &ControlPath) -> Self {
        DiscreteTriple {
            mesh: ctrl.mesh,
            x: state.x_nodes.clone(),
            u: ctrl.u_nodes.clone(),
            b: ctrl.b_nodes.clone(),
        }
    }

    /// Builds a triple by sampling functions of time.
    pub fn sample(
        mesh: Mesh,
        x: impl Fn(f64) -> DVector<f64>,
        u: impl Fn(f64) -> DMatrix<f64>,
        b: impl Fn(f64) -> DVector<f64>,
    ) -> Self {
        let ts = mesh.nodes();
        DiscreteTriple {
            mesh,
            x: ts.iter().map(|&t| x(t)).collect(),
            u: ts.iter().map(|&t| u(t)).collect(),
            b: ts.iter().map(|&t| b(t)).collect(),
        }
    }

    pub fn k(&self) -> usize {
        self.mesh.k()
    }

    pub fn n(&self) -> usize {
        self.x[0].len()
    }

    pub fn m(&self) -> usize {
        self.b[0].len()
    }

    pub fn controls(&self, tau: f64) -> Result<ControlPath> {
        ControlPath::new(self.mesh, self.u.clone(), self.b.clone(), tau)
    }

    pub fn check_shapes(&self, n: usize, m: usize) -> Result<()> {
        let k = self.k();
        if self.x.len() != k + 1 || self.u.len() != k + 1 || self.b.len() != k + 1 {
            return Err(SweepError::MeshMismatch("triple length differs from its mesh".into()));
        }
        let ok = self.x.iter().all(|x| x.len() == n)
            && self.u.iter().all(|u| u.shape() == (m, n))
            && self.b.iter().all(|b| b.len() == m);
        if !ok {
            return Err(SweepError::ShapeMismatch(format!("triple is not shaped for n = {n}, m = {m}")));
        }
        Ok(())
    }

    /// Node `j` and forward differences; `j < k`.
    pub fn diffs(&self, j: usize) -> (DVector<f64>, DMatrix<f64>, DVector<f64>) {
        let h = self.mesh.h();
        (
            (&self.x[j + 1] - &self.x[j]) / h,
            (&self.u[j + 1] - &self.u[j]) / h,
            (&self.b[j + 1] - &self.b[j]) / h,
        )
    }

    /// Sup-norm distance of `(x, b)` from functions of time, over the nodes.
    pub fn sup_distance(&self, x: impl Fn(f64) -> DVector<f64>, b: impl Fn(f64) -> DVector<f64>) -> f64 {
        (0..=self.k())
            .map(|j| {
                let t = self.mesh.t(j);
                (&self.x[j] - x(t)).amax().max((&self.b[j] - b(t)).amax())
            })
            .fold(0.0, f64::max)
    }
}

/// One constraint family of the discrete problem.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Constraint {
    /// `x_{j+1} ∈ x_j + h F(x_j, u_j, b_j)`, parametrised by `η_j ≥ 0`.
    Dynamic { j: usize },
    /// `⟨u_{ki}, x_k⟩ ≤ b_{ki}`.
    Endpoint { i: usize },
    /// `‖u_{ji}‖ = 1`.
    NormEquality { j: usize, i: usize },
    /// `1/2 ≤ ‖u_{ji}‖ ≤ 3/2`.
    NormBox { j: usize, i: usize },
    /// Node and velocity localisation around a reference, radius `ε/2`.
    Localization { what: String },
    /// Derivative and second-difference bounds `≤ M̃ + 1`.
    DerivativeBound { what: String },
}

/// Constraint list of `(P_k^τ)` on a concrete mesh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub mesh: Mesh,
    pub j_tau: (usize, usize),
    pub fixed_u: bool,
    pub constraints: Vec<Constraint>,
    pub epsilon: f64,
    pub m_tilde: f64,
}

impl Problem {
    /// Number of constraints per kind tag.
    pub fn counts(&self) -> BTreeMap<&'static str, usize> {
        let mut out = BTreeMap::new();
        for c in &self.constraints {
            let tag = match c {
                Constraint::Dynamic { .. } => "dynamic",
                Constraint::Endpoint { .. } => "endpoint",
                Constraint::NormEquality { .. } => "norm_equality",
                Constraint::NormBox { .. } => "norm_box",
                Constraint::Localization { .. } => "localization",
                Constraint::DerivativeBound { .. } => "derivative_bound",
            };
            *out.entry(tag).or_insert(0) += 1;
        }
        out
    }

    pub fn count(&self, tag: &str) -> usize {
        self.counts().get(tag).copied().unwrap_or(0)
    }
}

/// Assembles `(P_k^τ)` for a scenario.
pub fn build(scenario: &Scenario, k: usize) -> Result<Problem> {
    scenario.validate()?;
    if k < 2 {
        return Err(SweepError::Config(format!("k must be at least 2, got {k}")));
    }
    let mesh = Mesh::new(scenario.horizon.t_final, k)?;
    let p0 = MovingPolyhedron::new(scenario.normals_at(0.0), scenario.offsets_at(0.0))?;
    let violation = p0.residuals(&scenario.x0()).iter().fold(0.0f64, |a, &r| a.max(r));
    if violation > DEFAULT_ACTIVE_TOL {
        return Err(SweepError::InfeasibleInitial { violation });
    }
    let (lo, hi) = index_tau(&mesh, scenario.horizon.tau);
    let m = scenario.m();
    let mut constraints: Vec<Constraint> = (0..k).map(|j| Constraint::Dynamic { j }).collect();
    constraints.extend((0..m).map(|i| Constraint::Endpoint { i }));
    if !scenario.is_fixed_u() {
        for j in 0..=k {
            for i in 0..m {
                constraints.push(if (lo..=hi).contains(&j) {
                    Constraint::NormEquality { j, i }
                } else {
                    Constraint::NormBox { j, i }
                });
            }
        }
    }
    for what in ["nodes", "velocities"] {
        constraints.push(Constraint::Localization { what: what.into() });
    }
    for what in ["u_initial_slope", "b_initial_slope", "u_second_difference", "b_second_difference"] {
        constraints.push(Constraint::DerivativeBound { what: what.into() });
    }
    Ok(Problem {
        mesh,
        j_tau: (lo, hi),
        fixed_u: scenario.is_fixed_u(),
        constraints,
        epsilon: scenario.localization.epsilon,
        m_tilde: scenario.localization.m_tilde,
    })
}

/// Reference trajectory for the localisation terms of the discrete cost.
#[derive(Debug, Clone, PartialEq)]
pub struct ProximityReference {
    /// The reference `z̄`, piecewise linear on its own mesh.
    pub z: DiscreteTriple,
    pub m_tilde: f64,
}

fn dist2_above(v: f64, bound: f64) -> f64 {
    let d = (v - bound).max(0.0);
    d * d
}

/// `∫_a^b ‖c − ż̄(t)‖² dt` for a piecewise-linear reference (piecewise
/// constant velocity), integrated exactly by splitting at reference nodes.
fn proximity_integral(c: &[f64], reference: &[DVector<f64>], a: f64, b: f64, mesh: &Mesh) -> f64 {
    let hr = mesh.h();
    let mut total = 0.0;
    let mut t = a;
    while t < b - 1e-15 {
        let (j, _) = mesh.locate(t + 1e-12 * hr);
        let end = mesh.t(j + 1).min(b);
        let vel = (&reference[j + 1] - &reference[j]) / hr;
        let d2: f64 = c.iter().zip(vel.iter()).map(|(ci, vi)| (ci - vi) * (ci - vi)).sum();
        total += d2 * (end - t);
        t = end;
    }
    total
}

/// `J_k[z] = φ(x_k) + h Σ_{j<k} ℓ(t_j, z_j, (z_{j+1} − z_j)/h)`, plus the
/// localisation terms when a reference is supplied.
pub fn cost_jk(z: &DiscreteTriple, scenario: &Scenario, reference: Option<&ProximityReference>) -> Result<f64> {
    z.check_shapes(scenario.n(), scenario.m())?;
    let k = z.k();
    let h = z.mesh.h();
    let mut total = scenario.cost.terminal.value(&z.x[k]);
    for j in 0..k {
        let (dx, du, db) = z.diffs(j);
        let view = NodeView {
            x: &z.x[j],
            u: &z.u[j],
            b: &z.b[j],
            dx: &dx,
            du: &du,
            db: &db,
        };
        total += h * scenario.cost.running(z.mesh.t(j), view);
    }
    if let Some(r) = reference {
        r.z.check_shapes(scenario.n(), scenario.m())?;
        if (r.z.mesh.t_final() - z.mesh.t_final()).abs() > 1e-12 {
            return Err(SweepError::MeshMismatch("reference horizon differs".into()));
        }
        let flat_u = |u: &DMatrix<f64>| -> DVector<f64> { DVector::from_iterator(u.len(), u.transpose().iter().copied()) };
        let ref_u: Vec<DVector<f64>> = r.z.u.iter().map(flat_u).collect();
        for j in 0..k {
            let (dx, du, db) = z.diffs(j);
            let (a, b) = (z.mesh.t(j), z.mesh.t(j + 1));
            total += proximity_integral(dx.as_slice(), &r.z.x, a, b, &r.z.mesh);
            total += proximity_integral(flat_u(&du).as_slice(), &ref_u, a, b, &r.z.mesh);
            total += proximity_integral(db.as_slice(), &r.z.b, a, b, &r.z.mesh);
        }
        let mt = r.m_tilde;
        total += dist2_above(((&z.u[1] - &z.u[0]) / h).norm(), mt);
        total += dist2_above(((&z.b[1] - &z.b[0]) / h).norm(), mt);
        let second = |v: &dyn Fn(usize) -> f64| (0..k.saturating_sub(1)).map(v).sum::<f64>();
        total += dist2_above(second(&|j| ((&z.u[j + 2] - &z.u[j + 1] * 2.0 + &z.u[j]) / h).norm()), mt);
        total += dist2_above(second(&|j| ((&z.b[j + 2] - &z.b[j + 1] * 2.0 + &z.b[j]) / h).norm()), mt);
    }
    Ok(total)
}

/// One accepted iterate of the solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub method: String,
    pub cost: f64,
    pub grad_norm: f64,
    pub step: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveOutcome {
    pub triple: DiscreteTriple,
    pub cost: f64,
    pub trace: Vec<TraceRow>,
    /// `"gradient"` or `"pattern_mesh"`.
    pub stopped_by: String,
}

/// Reduced-space formulation: decision variables are the increments of the
/// free control nodes; the state follows from the catch-up scheme.
struct Reduced<'a> {
    scenario: &'a Scenario,
    mesh: Mesh,
    free_u: bool,
    j_tau: (usize, usize),
    u_fixed: Vec<DMatrix<f64>>,
    u0: DMatrix<f64>,
    b0: DVector<f64>,
    x0: DVector<f64>,
    evaluations: std::cell::Cell<usize>,
}

/// Cached simulation of one decision vector.
#[derive(Clone)]
struct Sim {
    u: Vec<DMatrix<f64>>,
    b: Vec<DVector<f64>>,
    x: Vec<DVector<f64>>,
    /// `h · ℓ` on each interval.
    run: Vec<f64>,
    cost: f64,
}

impl<'a> Reduced<'a> {
    fn new(scenario: &'a Scenario, init: &ControlPath) -> Result<Self> {
        let mesh = init.mesh;
        let free_u = !scenario.is_fixed_u();
        let u_fixed = if free_u {
            Vec::new()
        } else {
            init.u_nodes.clone()
        };
        Ok(Reduced {
            scenario,
            mesh,
            free_u,
            j_tau: index_tau(&mesh, scenario.horizon.tau),
            u_fixed,
            u0: init.u_nodes[0].clone(),
            b0: init.b_nodes[0].clone(),
            x0: scenario.x0(),
            evaluations: std::cell::Cell::new(0),
        })
    }

    fn m(&self) -> usize {
        self.scenario.m()
    }

    fn n(&self) -> usize {
        self.scenario.n()
    }

    fn block(&self) -> usize {
        self.m() + if self.free_u { self.m() * self.n() } else { 0 }
    }

    fn dim(&self) -> usize {
        self.mesh.k() * self.block()
    }

    fn node_of(&self, var: usize) -> usize {
        var / self.block() + 1
    }

    /// Normalisation onto the admissible set of node `j`.
    fn normalize(&self, j: usize, u: &mut DMatrix<f64>) {
        let (lo, hi) = self.j_tau;
        for i in 0..u.nrows() {
            let norm = u.row(i).norm();
            if norm == 0.0 {
                continue;
            }
            let target = if (lo..=hi).contains(&j) { 1.0 } else { norm.clamp(0.5, 1.5) };
            let scale = target / norm;
            u.row_mut(i).scale_mut(scale);
        }
    }

    fn encode(&self, u: &[DMatrix<f64>], b: &[DVector<f64>]) -> DVector<f64> {
        let (n, m, blk) = (self.n(), self.m(), self.block());
        let mut theta = DVector::zeros(self.dim());
        for j in 1..=self.mesh.k() {
            let base = (j - 1) * blk;
            for i in 0..m {
                theta[base + i] = b[j][i] - b[j - 1][i];
            }
            if self.free_u {
                for i in 0..m {
                    for c in 0..n {
                        theta[base + m + i * n + c] = u[j][(i, c)] - u[j - 1][(i, c)];
                    }
                }
            }
        }
        theta
    }

    /// Controls from increments, starting the accumulation at node `from`.
    fn decode_into(&self, theta: &DVector<f64>, from: usize, u: &mut [DMatrix<f64>], b: &mut [DVector<f64>], raw: &mut DMatrix<f64>) {
        let (n, m, blk) = (self.n(), self.m(), self.block());
        for j in from..=self.mesh.k() {
            let base = (j - 1) * blk;
            for i in 0..m {
                b[j][i] = b[j - 1][i] + theta[base + i];
            }
            if self.free_u {
                for i in 0..m {
                    for c in 0..n {
                        raw[(i, c)] += theta[base + m + i * n + c];
                    }
                }
                u[j].copy_from(raw);
                self.normalize(j, &mut u[j]);
            } else {
                u[j].copy_from(&self.u_fixed[j]);
            }
        }
    }

    /// Un-normalised accumulated normals up to node `j`.
    fn raw_u(&self, theta: &DVector<f64>, j: usize) -> DMatrix<f64> {
        let (n, m, blk) = (self.n(), self.m(), self.block());
        let mut raw = self.u0.clone();
        if self.free_u {
            for l in 1..=j {
                let base = (l - 1) * blk;
                for i in 0..m {
                    for c in 0..n {
                        raw[(i, c)] += theta[base + m + i * n + c];
                    }
                }
            }
        }
        raw
    }

    fn running_term(&self, j: usize, u: &[DMatrix<f64>], b: &[DVector<f64>], x: &[DVector<f64>]) -> f64 {
        let h = self.mesh.h();
        let dx = (&x[j + 1] - &x[j]) / h;
        let du = (&u[j + 1] - &u[j]) / h;
        let db = (&b[j + 1] - &b[j]) / h;
        let view = NodeView {
            x: &x[j],
            u: &u[j],
            b: &b[j],
            dx: &dx,
            du: &du,
            db: &db,
        };
        h * self.scenario.cost.running(self.mesh.t(j), view)
    }

    /// Re-simulates from node `from` (≥ 1), reusing everything before it.
    fn simulate_from(&self, theta: &DVector<f64>, base: &Sim, from: usize) -> Option<Sim> {
        self.evaluations.set(self.evaluations.get() + 1);
        let k = self.mesh.k();
        let mut sim = base.clone();
        let mut raw = self.raw_u(theta, from - 1);
        self.decode_into(theta, from, &mut sim.u, &mut sim.b, &mut raw);
        for j in from..=k {
            let p = MovingPolyhedron::new(sim.u[j].clone(), sim.b[j].clone()).ok()?;
            let (next, _) = project(&sim.x[j - 1], &p).ok()?;
            sim.x[j] = next;
        }
        for j in (from - 1)..k {
            sim.run[j] = self.running_term(j, &sim.u, &sim.b, &sim.x);
        }
        sim.cost = self.scenario.cost.terminal.value(&sim.x[k]) + sim.run.iter().sum::<f64>();
        sim.cost.is_finite().then_some(sim)
    }

    fn simulate(&self, theta: &DVector<f64>) -> Option<Sim> {
        let k = self.mesh.k();
        let base = Sim {
            u: vec![self.u0.clone(); k + 1],
            b: vec![self.b0.clone(); k + 1],
            x: vec![self.x0.clone(); k + 1],
            run: vec![0.0; k],
            cost: f64::INFINITY,
        };
        self.simulate_from(theta, &base, 1)
    }

    fn gradient(&self, theta: &DVector<f64>, base: &Sim, step: f64) -> DVector<f64> {
        let mut g = DVector::zeros(self.dim());
        let mut th = theta.clone();
        for v in 0..self.dim() {
            let e = step * theta[v].abs().max(1.0);
            let from = self.node_of(v);
            th[v] = theta[v] + e;
            let fp = self.simulate_from(&th, base, from).map_or(f64::INFINITY, |s| s.cost);
            th[v] = theta[v] - e;
            let fm = self.simulate_from(&th, base, from).map_or(f64::INFINITY, |s| s.cost);
            th[v] = theta[v];
            g[v] = if fp.is_finite() && fm.is_finite() {
                (fp - fm) / (2.0 * e)
            } else if fp.is_finite() {
                (fp - base.cost) / e
            } else if fm.is_finite() {
                (base.cost - fm) / e
            } else {
                0.0
            };
        }
        g
    }

    /// Renormalised increments for an accepted iterate.
    fn reencode(&self, sim: &Sim) -> DVector<f64> {
        self.encode(&sim.u, &sim.b)
    }

    fn triple(&self, sim: &Sim) -> DiscreteTriple {
        DiscreteTriple {
            mesh: self.mesh,
            x: sim.x.clone(),
            u: sim.u.clone(),
            b: sim.b.clone(),
        }
    }
}

/// Local minimisation of `J_k` over the control nodes, the state being
/// generated by the catch-up scheme.
///
/// L-BFGS with central finite differences and an Armijo line search runs
/// first; a coordinate pattern search (smallest index first) takes over when
/// the line search stalls or the cost is nonsmooth.
pub fn solve_reduced(scenario: &Scenario, k: usize, init: &ControlPath) -> Result<SolveOutcome> {
    scenario.validate()?;
    let problem = build(scenario, k)?;
    if init.mesh != problem.mesh {
        return Err(SweepError::MeshMismatch(format!(
            "initial controls are on {:?}, problem on {:?}",
            init.mesh, problem.mesh
        )));
    }
    if init.n != scenario.n() || init.m != scenario.m() {
        return Err(SweepError::ShapeMismatch("initial controls do not match the scenario dimensions".into()));
    }
    let opts = scenario.solver;
    let red = Reduced::new(scenario, init)?;
    let mut theta = red.encode(&init.u_nodes, &init.b_nodes);
    let mut sim = red.simulate(&theta).ok_or_else(|| SweepError::Config("initial controls cannot be simulated".into()))?;
    theta = red.reencode(&sim);
    let mut trace = vec![TraceRow {
        iter: 0,
        method: "init".into(),
        cost: sim.cost,
        grad_norm: f64::NAN,
        step: 0.0,
        evaluations: red.evaluations.get(),
    }];
    if red.dim() == 0 {
        return Ok(SolveOutcome {
            triple: red.triple(&sim),
            cost: sim.cost,
            trace,
            stopped_by: "gradient".into(),
        });
    }

    // L-BFGS phase.
    let memory = 8;
    let mut s_hist: Vec<DVector<f64>> = Vec::new();
    let mut y_hist: Vec<DVector<f64>> = Vec::new();
    let mut g = red.gradient(&theta, &sim, opts.fd_step);
    let mut stopped_by = None;
    for iter in 1..=opts.max_iter {
        let gnorm = g.amax();
        if gnorm <= opts.tol {
            stopped_by = Some("gradient");
            break;
        }
        // Two-loop recursion.
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(s_hist.len());
        for (s, y) in s_hist.iter().zip(&y_hist).rev() {
            let rho = 1.0 / y.dot(s);
            let a = rho * s.dot(&q);
            q -= y * a;
            alphas.push((a, rho));
        }
        let gamma = match (s_hist.last(), y_hist.last()) {
            (Some(s), Some(y)) => s.dot(y) / y.dot(y),
            _ => 0.1 / gnorm.max(1e-12),
        };
        let mut d = q * gamma;
        for ((s, y), (a, rho)) in s_hist.iter().zip(&y_hist).zip(alphas.into_iter().rev()) {
            let b = rho * y.dot(&d);
            d += s * (a - b);
        }
        d = -d;
        let mut slope = g.dot(&d);
        if slope >= 0.0 {
            d = -g.clone();
            slope = -g.dot(&g);
            s_hist.clear();
            y_hist.clear();
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial = &theta + &d * step;
            if let Some(ts) = red.simulate(&trial) {
                if ts.cost <= sim.cost + 1e-4 * step * slope {
                    accepted = Some(ts);
                    break;
                }
            }
            step *= 0.5;
        }
        let Some(next) = accepted else {
            debug!("line search failed at iteration {iter}");
            break;
        };
        let new_theta = red.reencode(&next);
        let new_g = red.gradient(&new_theta, &next, opts.fd_step);
        let s = &new_theta - &theta;
        let y = &new_g - &g;
        if s.dot(&y) > 1e-12 * s.norm() * y.norm() {
            s_hist.push(s);
            y_hist.push(y);
            if s_hist.len() > memory {
                s_hist.remove(0);
                y_hist.remove(0);
            }
        }
        let decrease = sim.cost - next.cost;
        theta = new_theta;
        sim = next;
        g = new_g;
        trace.push(TraceRow {
            iter,
            method: "lbfgs".into(),
            cost: sim.cost,
            grad_norm: g.amax(),
            step,
            evaluations: red.evaluations.get(),
        });
        if decrease <= 1e-15 * (1.0 + sim.cost.abs()) && g.amax() <= opts.tol.sqrt() {
            break;
        }
    }

    let smooth = scenario.cost.is_smooth();
    if stopped_by.is_none() || !smooth {
        // Pattern search polish.
        let mut delta = (1e-2 * theta.amax()).max(1e-3);
        let budget_end = red.evaluations.get() + opts.pattern_budget;
        let mut iter = trace.len();
        let mut done = false;
        while !done {
            if red.evaluations.get() >= budget_end {
                let best = red.triple(&sim);
                return Err(SweepError::SolverStalled {
                    iterations: iter,
                    best_cost: sim.cost,
                    best: Box::new(best),
                });
            }
            let mut improved = false;
            for v in 0..red.dim() {
                let from = red.node_of(v);
                for sign in [1.0, -1.0] {
                    let mut trial = theta.clone();
                    trial[v] += sign * delta;
                    if let Some(ts) = red.simulate_from(&trial, &sim, from) {
                        if ts.cost < sim.cost - 1e-15 * (1.0 + sim.cost.abs()) {
                            theta = red.reencode(&ts);
                            sim = ts;
                            improved = true;
                            break;
                        }
                    }
                }
            }
            if improved {
                iter += 1;
                trace.push(TraceRow {
                    iter,
                    method: "pattern".into(),
                    cost: sim.cost,
                    grad_norm: f64::NAN,
                    step: delta,
                    evaluations: red.evaluations.get(),
                });
            } else {
                delta *= 0.5;
                if delta < 1e-8 {
                    done = true;
                }
            }
        }
        if stopped_by.is_none() {
            stopped_by = Some("pattern_mesh");
        }
    }
    info!(
        "solve_reduced {}: cost {:.6e} after {} evaluations",
        scenario.id,
        sim.cost,
        red.evaluations.get()
    );
    Ok(SolveOutcome {
        triple: red.triple(&sim),
        cost: sim.cost,
        trace,
        stopped_by: stopped_by.unwrap_or("gradient").into(),
    })
}

/// Parametrised offset strategies for two pushing faces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    /// Both offsets move with speeds `β` on `[0, θ]`.
    Simultaneous { theta: f64, beta: [f64; 2] },
    /// Offset 1 moves on `[0, θ]`, then offset 2 on `[θ, 2θ]`.
    Alternating { theta: f64, beta: [f64; 2] },
    /// Only offset 1 moves, on `[0, θ]`.
    Single { theta: f64, beta: [f64; 2] },
}

impl Strategy {
    /// Offsets relative to their initial values at time `t`.
    pub fn displacement(&self, t: f64) -> [f64; 2] {
        match *self {
            Strategy::Simultaneous { theta, beta } => [beta[0] * t.min(theta), beta[1] * t.min(theta)],
            Strategy::Alternating { theta, beta } => [beta[0] * t.min(theta), beta[1] * (t - theta).clamp(0.0, theta)],
            Strategy::Single { theta, beta } => [beta[0] * t.min(theta), 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyResult {
    pub cost: f64,
    pub triple: DiscreteTriple,
}

/// Cost of the trajectory induced by a strategy on a fine mesh.
pub fn evaluate_strategy(scenario: &Scenario, strategy: &Strategy, k: usize) -> Result<StrategyResult> {
    scenario.validate()?;
    if scenario.m() != 2 {
        return Err(SweepError::Config("strategies are defined for two faces".into()));
    }
    let mesh = Mesh::new(scenario.horizon.t_final, k)?;
    let mut ctrl = scenario.control_path(&mesh)?;
    let b0 = ctrl.b_nodes[0].clone();
    for j in 0..=k {
        let d = strategy.displacement(mesh.t(j));
        ctrl.b_nodes[j] = DVector::from_fn(2, |i, _| b0[i] + d[i]);
    }
    let state = crate::sweeping::catch_up(&scenario.x0(), &ctrl)?;
    let triple = DiscreteTriple::from_paths(&state, &ctrl);
    let cost = cost_jk(&triple, scenario, None)?;
    Ok(StrategyResult { cost, triple })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_d() -> Scenario {
        Scenario {
            id: "test".into(),
            dims: Dims { n: 1, m: 1 },
            horizon: Horizon {
                t_final: 1.0,
                tau: 0.0,
                k: 50,
            },
            x0: vec![0.0],
            mode: Mode::FreeU,
            cost: CostSpec {
                terminal: Terminal {
                    kind: TerminalKind::QuadraticHalf,
                    center: vec![1.0],
                    weight: 1.0,
                },
                l3: vec![Term::quadratic(Target::Bdot, 0, 0.5, ScalarFn::default())],
                ..CostSpec::default()
            },
            controls: Controls {
                u_init: vec![vec![ScalarFn::constant(-1.0)]],
                b_init: vec![ScalarFn::constant(0.0)],
                fixed_u: None,
                sigma: None,
            },
            solver: SolverOptions::default(),
            localization: Localization::default(),
        }
    }

    #[test]
    fn scalar_functions_evaluate() {
        assert_eq!(ScalarFn::linear(1.0, 2.0).eval(0.5), 2.0);
        let pw = ScalarFn::Piecewise {
            breaks: vec![0.5],
            pieces: vec![ScalarFn::constant(1.0), ScalarFn::linear(0.0, 1.0)],
        };
        assert_eq!(pw.eval(0.2), 1.0);
        assert_eq!(pw.eval(0.75), 0.75);
        let s = ScalarFn::Sum {
            terms: vec![
                ScalarFn::Sin {
                    amp: 2.0,
                    freq: 1.0,
                    phase: 0.0,
                },
                ScalarFn::Scaled {
                    factor: 3.0,
                    inner: Box::new(ScalarFn::constant(1.0)),
                },
            ],
        };
        assert!((s.eval(std::f64::consts::FRAC_PI_2) - 5.0).abs() < 1e-15);
    }

    #[test]
    fn constraint_counts() {
        let sc = one_d();
        let p = build(&sc, 4).unwrap();
        assert_eq!(p.count("dynamic"), 4);
        assert_eq!(p.count("endpoint"), 1);
        assert_eq!(p.count("norm_equality"), 5);
        assert_eq!(p.count("norm_box"), 0);

        let mut relaxed = sc.clone();
        relaxed.horizon.tau = 0.25;
        let p = build(&relaxed, 10).unwrap();
        assert_eq!(p.j_tau, (3, 7));
        assert_eq!(p.count("norm_equality"), 5);
        assert_eq!(p.count("norm_box"), 6);

        let mut fixed = sc;
        fixed.mode = Mode::FixedU;
        let p = build(&fixed, 4).unwrap();
        assert_eq!(p.count("norm_equality") + p.count("norm_box"), 0);
    }

    #[test]
    fn infeasible_start_is_rejected() {
        let mut sc = one_d();
        sc.x0 = vec![-1.0];
        assert!(matches!(build(&sc, 4), Err(SweepError::InfeasibleInitial { .. })));
    }

    #[test]
    fn cost_of_candidates() {
        let sc = one_d();
        let mesh = Mesh::new(1.0, 100).unwrap();
        let cand = DiscreteTriple::sample(
            mesh,
            |t| DVector::from_element(1, t / 2.0),
            |_| DMatrix::from_element(1, 1, -1.0),
            |t| DVector::from_element(1, -t / 2.0),
        );
        assert!((cost_jk(&cand, &sc, None).unwrap() - 0.25).abs() < 1e-12);
        let stay = DiscreteTriple::sample(
            mesh,
            |_| DVector::zeros(1),
            |_| DMatrix::from_element(1, 1, -1.0),
            |_| DVector::zeros(1),
        );
        assert_eq!(cost_jk(&stay, &sc, None).unwrap(), 0.5);
        // The localisation terms vanish at the reference itself.
        let r = ProximityReference {
            z: cand.clone(),
            m_tilde: 1e6,
        };
        assert!((cost_jk(&cand, &sc, Some(&r)).unwrap() - 0.25).abs() < 1e-12);
        assert!(cost_jk(&stay, &sc, Some(&r)).unwrap() > 0.5);
    }

    #[test]
    fn scenario_parses_from_toml_with_bare_numbers() {
        let text = r#"
            id = "toml"
            x0 = [0.0]
            mode = "fixed_u"
            [dims]
            n = 1
            m = 1
            [horizon]
            T = 1.0
            k = 20
            [cost.terminal]
            kind = "quadratic_half"
            center = [1.0]
            [[cost.l3]]
            target = "bdot"
            kind = "quadratic"
            weight = 0.5
            [controls]
            u_init = [[-1.0]]
            b_init = [{ kind = "poly", coeffs = [0.0, -0.5] }]
        "#;
        let sc = Scenario::from_toml_str(text).unwrap();
        assert_eq!(sc.offsets_at(1.0)[0], -0.5);
        assert_eq!(sc.normals_at(0.3)[(0, 0)], -1.0);
        let back = serde_json::to_string(&sc).unwrap();
        assert_eq!(Scenario::from_json_str(&back).unwrap(), sc);
    }

    #[test]
    fn stationary_start_is_returned_unchanged() {
        let mut sc = one_d();
        sc.cost = CostSpec {
            terminal: Terminal {
                kind: TerminalKind::Quadratic,
                center: vec![0.0],
                weight: 1.0,
            },
            ..CostSpec::default()
        };
        sc.mode = Mode::FixedU;
        sc.controls.b_init = vec![ScalarFn::constant(1.0)];
        let mesh = Mesh::new(1.0, 10).unwrap();
        let init = sc.control_path(&mesh).unwrap();
        let out = solve_reduced(&sc, 10, &init).unwrap();
        assert_eq!(out.cost, 0.0);
        assert_eq!(out.triple.b, init.b_nodes);
    }
}
