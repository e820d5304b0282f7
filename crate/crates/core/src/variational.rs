//! Coderivative of the polyhedral normal-cone mapping
//! `F(x, A, b) = −N(x; {y : Ay ≤ b})`.
//!
//! The coderivative at `(x̄, Ā, b̄, v̄)` in direction `u` is the union, over
//! multipliers `p ∈ P(u)` and sign-patterned `q ∈ Q(p)`, of the affine images
//! `q ↦ (Āᵀq, q_1 x̄ − p_1 u, …, q_m x̄ − p_m u, −q)`. The set is represented
//! by [`CoderivPiece`]s and membership is decided by a linear program.
//! [`oracle_graph_normals`] recomputes the same object from first principles
//! (limiting normals to the graph, region by region) for validation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SweepError};
use crate::geometry::{numerical_rank, rows_linearly_independent, rows_positively_independent, DEFAULT_ACTIVE_TOL};
use crate::lp::{LinearProgram, LpStatus, Sense};

/// Threshold below which multipliers and directional products count as zero.
pub const ZERO_TOL: f64 = 1e-9;

/// Sign constraint on one component of `q`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QSign {
    Zero,
    NonNeg,
    Free,
}

impl QSign {
    fn bounds(self) -> (f64, f64) {
        match self {
            QSign::Zero => (0.0, 0.0),
            QSign::NonNeg => (0.0, f64::INFINITY),
            QSign::Free => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    fn admits(self, q: f64, tol: f64) -> bool {
        match self {
            QSign::Zero => q.abs() <= tol,
            QSign::NonNeg => q >= -tol,
            QSign::Free => true,
        }
    }
}

/// Coderivative of the normal cone to the nonpositive orthant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum OrthantCoderiv {
    Empty,
    Pattern(Vec<QSign>),
}

/// `D*N_{ℝ^m_−}(α, β)(γ)`: empty if some `β_i γ_i ≠ 0`, otherwise `η_i = 0`
/// on `I_1 = {α_i < 0} ∪ {α_i = β_i = 0, γ_i < 0}`, `η_i ≥ 0` on
/// `I_2 = {α_i = β_i = 0, γ_i > 0}` and free elsewhere.
pub fn dstar_orthant(alpha: &DVector<f64>, beta: &DVector<f64>, gamma: &DVector<f64>) -> Result<OrthantCoderiv> {
    let m = alpha.len();
    if beta.len() != m || gamma.len() != m {
        return Err(SweepError::ShapeMismatch("alpha, beta, gamma must share a length".into()));
    }
    for i in 0..m {
        if alpha[i] > ZERO_TOL || beta[i] < -ZERO_TOL || (alpha[i] * beta[i]).abs() > ZERO_TOL {
            return Err(SweepError::NotInGraph(format!(
                "component {i}: alpha = {}, beta = {}",
                alpha[i], beta[i]
            )));
        }
    }
    let zero = |v: f64| v.abs() <= ZERO_TOL;
    if (0..m).any(|i| !zero(beta[i]) && !zero(gamma[i])) {
        return Ok(OrthantCoderiv::Empty);
    }
    let pattern = (0..m)
        .map(|i| {
            if !zero(alpha[i]) {
                QSign::Zero
            } else if zero(beta[i]) && gamma[i] < -ZERO_TOL {
                QSign::Zero
            } else if zero(beta[i]) && gamma[i] > ZERO_TOL {
                QSign::NonNeg
            } else {
                QSign::Free
            }
        })
        .collect();
    Ok(OrthantCoderiv::Pattern(pattern))
}

/// Base point `(x̄, Ā, b̄, v̄)` on the graph of `F` and a direction `u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoderivQuery {
    pub x: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub v: DVector<f64>,
    pub u: DVector<f64>,
}

impl CoderivQuery {
    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn m(&self) -> usize {
        self.b.len()
    }

    fn validate(&self) -> Result<()> {
        let (n, m) = (self.n(), self.m());
        if self.a.nrows() != m || self.a.ncols() != n || self.v.len() != n || self.u.len() != n {
            return Err(SweepError::ShapeMismatch(format!(
                "query shapes: x {n}, A {}x{}, b {m}, v {}, u {}",
                self.a.nrows(),
                self.a.ncols(),
                self.v.len(),
                self.u.len()
            )));
        }
        let slack = self.slack();
        if let Some((i, &s)) = slack.iter().enumerate().find(|(_, &s)| s > DEFAULT_ACTIVE_TOL) {
            return Err(SweepError::InfeasiblePoint { index: i, violation: s });
        }
        Ok(())
    }

    /// `Āx̄ − b̄`.
    pub fn slack(&self) -> DVector<f64> {
        &self.a * &self.x - &self.b
    }

    pub fn active(&self) -> Vec<usize> {
        let s = self.slack();
        (0..self.m()).filter(|&i| s[i].abs() <= DEFAULT_ACTIVE_TOL).collect()
    }

    /// `Ā u`.
    pub fn au(&self) -> DVector<f64> {
        &self.a * &self.u
    }

    fn active_rows(&self) -> DMatrix<f64> {
        let act = self.active();
        DMatrix::from_fn(act.len(), self.n(), |r, c| self.a[(act[r], c)])
    }

    pub fn licq(&self) -> bool {
        rows_linearly_independent(&self.active_rows())
    }

    pub fn plicq(&self) -> Result<bool> {
        rows_positively_independent(&self.active_rows())
    }
}

/// Multipliers `p ≥ 0` supported on active faces with `Āᵀp = −v̄`, restricted
/// to those with `⟨Ā_i, u⟩ = 0` whenever `p_i > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiplierSet {
    pub vertices: Vec<DVector<f64>>,
    /// Recession directions; empty whenever PLICQ holds.
    pub rays: Vec<DVector<f64>>,
    /// `true` when LICQ makes the multiplier unique.
    pub unique: bool,
}

impl MultiplierSet {
    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }
}

/// All subsets of `items` (as index lists), smallest first.
fn subsets(items: &[usize]) -> Vec<Vec<usize>> {
    let k = items.len();
    let mut out: Vec<Vec<usize>> = (0u32..(1u32 << k))
        .map(|mask| (0..k).filter(|&b| mask & (1 << b) != 0).map(|b| items[b]).collect())
        .collect();
    out.sort_by_key(|s: &Vec<usize>| s.len());
    out
}

/// Solves `Σ_{i∈S} p_i Ā_i = −v̄` exactly for linearly independent rows.
fn solve_on_support(a: &DMatrix<f64>, support: &[usize], v: &DVector<f64>) -> Option<DVector<f64>> {
    let m = a.nrows();
    let n = a.ncols();
    if support.is_empty() {
        return (v.norm() <= 1e-9 * v.norm().max(1.0)).then(|| DVector::zeros(m));
    }
    let at = DMatrix::from_fn(n, support.len(), |r, c| a[(support[c], r)]);
    let rhs = -v;
    let sol = at.clone().svd(true, true).solve(&rhs, 1e-12).ok()?;
    let resid = (&at * &sol - &rhs).norm();
    if resid > 1e-9 * (1.0 + v.norm()) {
        return None;
    }
    let mut p = DVector::zeros(m);
    for (c, &i) in support.iter().enumerate() {
        p[i] = sol[c];
    }
    Some(p)
}

fn push_unique(list: &mut Vec<DVector<f64>>, p: DVector<f64>) {
    if !list.iter().any(|q| (q - &p).amax() <= 1e-9 * (1.0 + p.amax())) {
        list.push(p);
    }
}

/// Vertices of `{p ≥ 0 : p_i = 0 off `allowed`, Āᵀp = −v̄}`.
fn multiplier_vertices(a: &DMatrix<f64>, allowed: &[usize], v: &DVector<f64>) -> Vec<DVector<f64>> {
    let mut out = Vec::new();
    for s in subsets(allowed) {
        let rows = DMatrix::from_fn(s.len(), a.ncols(), |r, c| a[(s[r], c)]);
        if !rows_linearly_independent(&rows) {
            continue;
        }
        if let Some(p) = solve_on_support(a, &s, v) {
            if p.iter().all(|&pi| pi >= -ZERO_TOL) {
                push_unique(&mut out, p.map(|pi| pi.max(0.0)));
            }
        }
    }
    out
}

/// Extreme rays of `{p ≥ 0 : p_i = 0 off `allowed`, Āᵀp = 0}`.
fn multiplier_rays(a: &DMatrix<f64>, allowed: &[usize]) -> Vec<DVector<f64>> {
    let mut out = Vec::new();
    for s in subsets(allowed) {
        if s.len() < 2 {
            continue;
        }
        let at = DMatrix::from_fn(a.ncols(), s.len(), |r, c| a[(s[c], r)]);
        if numerical_rank(&at) != s.len() - 1 {
            continue;
        }
        let gram = at.transpose() * &at;
        let eig = gram.symmetric_eigen();
        let (idx, _) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |(bi, bs), (i, &ev)| if ev < bs { (i, ev) } else { (bi, bs) });
        let mut d: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        if d.iter().sum::<f64>() < 0.0 {
            d.iter_mut().for_each(|x| *x = -*x);
        }
        if d.iter().all(|&x| x > ZERO_TOL) {
            let mut p = DVector::zeros(a.nrows());
            let total: f64 = d.iter().sum();
            for (c, &i) in s.iter().enumerate() {
                p[i] = d[c] / total;
            }
            push_unique(&mut out, p);
        }
    }
    out
}

/// `P(u)`. Errors with [`SweepError::NoMultiplier`] when `v̄ ∉ F(x̄, Ā, b̄)`.
pub fn pset(query: &CoderivQuery) -> Result<MultiplierSet> {
    query.validate()?;
    let active = query.active();
    let all = multiplier_vertices(&query.a, &active, &query.v);
    if all.is_empty() {
        let residual = crate::geometry::cone_coeffs_on(
            &crate::geometry::MovingPolyhedron::new(query.a.clone(), query.b.clone())?,
            &active,
            &(-&query.v),
        )
        .map(|m| match m {
            crate::geometry::ConeMembership::NotMember { distance } => distance,
            _ => 0.0,
        })
        .unwrap_or(f64::NAN);
        return Err(SweepError::NoMultiplier { residual });
    }
    let au = query.au();
    let allowed: Vec<usize> = active.iter().copied().filter(|&i| au[i].abs() <= ZERO_TOL).collect();
    let vertices = multiplier_vertices(&query.a, &allowed, &query.v);
    let rays = multiplier_rays(&query.a, &allowed);
    Ok(MultiplierSet {
        vertices,
        rays,
        unique: query.licq(),
    })
}

/// `Q(p)` as a sign pattern; `None` when `p ∉ P(u)` makes it empty.
pub fn qset(p: &DVector<f64>, query: &CoderivQuery) -> Result<Option<Vec<QSign>>> {
    let alpha = query.slack().map(|s| if s.abs() <= DEFAULT_ACTIVE_TOL { 0.0 } else { s });
    let beta = p.map(|pi| if pi.abs() <= ZERO_TOL { 0.0 } else { pi });
    let gamma = -query.au();
    match dstar_orthant(&alpha, &beta, &gamma)? {
        OrthantCoderiv::Empty => Ok(None),
        OrthantCoderiv::Pattern(pat) => Ok(Some(pat)),
    }
}

/// A covector `(w_x, w_A, w_b)` in the coderivative's target space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covector {
    pub x: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Covector {
    pub fn zeros(n: usize, m: usize) -> Self {
        Covector {
            x: DVector::zeros(n),
            a: DMatrix::zeros(m, n),
            b: DVector::zeros(m),
        }
    }

    /// `(w_x, rows of w_A, w_b)` flattened.
    pub fn flatten(&self) -> DVector<f64> {
        let (n, m) = (self.x.len(), self.b.len());
        let mut out = DVector::zeros(n + m * n + m);
        out.rows_mut(0, n).copy_from(&self.x);
        for i in 0..m {
            for c in 0..n {
                out[n + i * n + c] = self.a[(i, c)];
            }
        }
        out.rows_mut(n + m * n, m).copy_from(&self.b);
        out
    }

    pub fn unflatten(n: usize, m: usize, w: &DVector<f64>) -> Self {
        Covector {
            x: w.rows(0, n).into_owned(),
            a: DMatrix::from_fn(m, n, |i, c| w[n + i * n + c]),
            b: w.rows(n + m * n, m).into_owned(),
        }
    }

    pub fn scale(&self, t: f64) -> Self {
        Covector {
            x: &self.x * t,
            a: &self.a * t,
            b: &self.b * t,
        }
    }
}

/// One multiplier `p` with the sign pattern of `Q(p)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoderivPiece {
    pub p: DVector<f64>,
    pub pattern: Vec<QSign>,
}

impl CoderivPiece {
    fn indices(&self, s: QSign) -> Vec<usize> {
        (0..self.pattern.len()).filter(|&i| self.pattern[i] == s).collect()
    }

    pub fn zero_indices(&self) -> Vec<usize> {
        self.indices(QSign::Zero)
    }

    pub fn nonneg_indices(&self) -> Vec<usize> {
        self.indices(QSign::NonNeg)
    }

    pub fn free_indices(&self) -> Vec<usize> {
        self.indices(QSign::Free)
    }

    /// Linear part `M` of `q ↦ M q + c`, acting on flattened covectors.
    pub fn map_matrix(&self, query: &CoderivQuery) -> DMatrix<f64> {
        let (n, m) = (query.n(), query.m());
        let mut mat = DMatrix::zeros(n + m * n + m, m);
        for i in 0..m {
            for c in 0..n {
                mat[(c, i)] = query.a[(i, c)];
                mat[(n + i * n + c, i)] = query.x[c];
            }
            mat[(n + m * n + i, i)] = -1.0;
        }
        mat
    }

    /// Offset `c = (0, −p_1 u, …, −p_m u, 0)`.
    pub fn offset(&self, query: &CoderivQuery) -> DVector<f64> {
        let (n, m) = (query.n(), query.m());
        let mut c = DVector::zeros(n + m * n + m);
        for i in 0..m {
            for k in 0..n {
                c[n + i * n + k] = -self.p[i] * query.u[k];
            }
        }
        c
    }

    pub fn apply(&self, query: &CoderivQuery, q: &DVector<f64>) -> Covector {
        let w = self.map_matrix(query) * q + self.offset(query);
        Covector::unflatten(query.n(), query.m(), &w)
    }

    pub fn admits(&self, q: &DVector<f64>, tol: f64) -> bool {
        self.pattern.iter().zip(q.iter()).all(|(s, &qi)| s.admits(qi, tol))
    }
}

/// The pieces realising the coderivative formula at a query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coderivative {
    pub pieces: Vec<CoderivPiece>,
    /// Recession directions of the multiplier set (only without PLICQ).
    pub rays: Vec<DVector<f64>>,
    /// `true` under LICQ, where the formula is an equality.
    pub exact: bool,
}

impl Coderivative {
    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    /// Membership of `w` in the union over the multiplier face and `Q`.
    ///
    /// All vertices share one sign pattern (it depends only on activity and
    /// the signs of `Ā_i u`), so the union over the face is the convex set
    /// `{M q + Σ μ_v c(p_v) : μ in the simplex, q in the pattern}`, tested
    /// with a phase-one LP.
    pub fn contains(&self, query: &CoderivQuery, w: &Covector) -> Result<bool> {
        if self.pieces.is_empty() {
            return Ok(false);
        }
        let target = w.flatten();
        let mat = self.pieces[0].map_matrix(query);
        let offsets: Vec<DVector<f64>> = self.pieces.iter().map(|pc| pc.offset(query)).collect();
        let m = query.m();
        let nv = self.pieces.len();
        let dim = target.len();
        let mut lp = LinearProgram::new(0);
        let q: Vec<usize> = self.pieces[0]
            .pattern
            .iter()
            .map(|s| {
                let (lo, hi) = s.bounds();
                lp.add_var(lo, hi, 0.0)
            })
            .collect();
        let mu: Vec<usize> = (0..nv).map(|_| lp.add_var(0.0, f64::INFINITY, 0.0)).collect();
        lp.add_row(mu.iter().map(|&j| (j, 1.0)).collect(), Sense::Eq, 1.0);
        for r in 0..dim {
            let sp = lp.add_var(0.0, f64::INFINITY, 1.0);
            let sn = lp.add_var(0.0, f64::INFINITY, 1.0);
            let mut coefs: Vec<(usize, f64)> = (0..m)
                .filter(|&i| mat[(r, i)] != 0.0)
                .map(|i| (q[i], mat[(r, i)]))
                .collect();
            coefs.extend(mu.iter().zip(&offsets).filter(|(_, c)| c[r] != 0.0).map(|(&j, c)| (j, c[r])));
            coefs.push((sp, 1.0));
            coefs.push((sn, -1.0));
            lp.add_row(coefs, Sense::Eq, target[r]);
        }
        let sol = lp.solve()?;
        let scale = 1.0 + target.amax() + query.u.amax();
        Ok(sol.status == LpStatus::Optimal && sol.objective <= 1e-7 * scale)
    }
}

/// Coderivative pieces at `query`. Requires PLICQ at the base point.
pub fn dstar_f(query: &CoderivQuery) -> Result<Coderivative> {
    query.validate()?;
    if !query.plicq()? {
        return Err(SweepError::QualificationFailure);
    }
    let ps = pset(query)?;
    let mut pieces = Vec::with_capacity(ps.vertices.len());
    for p in &ps.vertices {
        if let Some(pattern) = qset(p, query)? {
            pieces.push(CoderivPiece { p: p.clone(), pattern });
        }
    }
    Ok(Coderivative {
        pieces,
        rays: ps.rays,
        exact: ps.unique,
    })
}

/// Per-face branch of the orthant graph used by the oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Branch {
    /// `dp_i = 0`, `dα_i` free (strictly inactive nearby).
    Inactive,
    /// `dα_i = 0`, `dp_i` free (positive multiplier nearby).
    Positive,
    /// `dα_i ≤ 0`, `dp_i = 0`.
    LowerCorner,
    /// `dα_i = 0`, `dp_i ≥ 0`.
    UpperCorner,
}

/// Local first-order model of the graph of `F` around one multiplier `p̄`.
///
/// Variables `δ = (dx, dA, db, dp)` with `dv = −Āᵀdp − dAᵀp̄` and
/// `dα_i = Ā_i dx + ⟨dA_i, x̄⟩ − db_i`.
struct GraphModel<'a> {
    query: &'a CoderivQuery,
    p: DVector<f64>,
}

impl GraphModel<'_> {
    fn dims(&self) -> (usize, usize, usize) {
        let (n, m) = (self.query.n(), self.query.m());
        (n, m, n + m * n + m + m)
    }

    /// Coefficients of `dα_i` over δ.
    fn d_alpha(&self, i: usize) -> Vec<(usize, f64)> {
        let (n, m, _) = self.dims();
        let mut c = Vec::with_capacity(2 * n + 1);
        for k in 0..n {
            c.push((k, self.query.a[(i, k)]));
            c.push((n + i * n + k, self.query.x[k]));
        }
        c.push((n + m * n + i, -1.0));
        c
    }

    fn dp(&self, i: usize) -> usize {
        let (n, m, _) = self.dims();
        n + m * n + m + i
    }

    /// Objective pairing `⟨(w, −u), (dx, dA, db, dv)⟩` over δ.
    fn objective(&self, w: &Covector) -> Vec<f64> {
        let (n, m, dim) = self.dims();
        let mut c = vec![0.0; dim];
        let flat = w.flatten();
        for (r, &v) in flat.iter().enumerate() {
            c[r] = v;
        }
        // ⟨−u, dv⟩ = (Āu)ᵀ dp + Σ p̄_i ⟨u, dA_i⟩
        let au = self.query.au();
        for i in 0..m {
            c[self.dp(i)] += au[i];
            for k in 0..n {
                c[n + i * n + k] += self.p[i] * self.query.u[k];
            }
        }
        c
    }

    /// `max ⟨y, δ⟩` over the branch cone intersected with the unit box.
    fn support(&self, branches: &[Branch], obj: &[f64]) -> Result<f64> {
        let (_, m, dim) = self.dims();
        let mut lp = LinearProgram::new(dim);
        for j in 0..dim {
            lp.set_bounds(j, -1.0, 1.0);
            lp.set_cost(j, -obj[j]);
        }
        for i in 0..m {
            let da = self.d_alpha(i);
            let dp = self.dp(i);
            match branches[i] {
                Branch::Inactive => lp.set_bounds(dp, 0.0, 0.0),
                Branch::Positive => {
                    lp.add_row(da, Sense::Eq, 0.0);
                }
                Branch::LowerCorner => {
                    lp.add_row(da, Sense::Le, 0.0);
                    lp.set_bounds(dp, 0.0, 0.0);
                }
                Branch::UpperCorner => {
                    lp.add_row(da, Sense::Eq, 0.0);
                    lp.set_bounds(dp, 0.0, 1.0);
                }
            }
        }
        let sol = lp.solve()?;
        match sol.status {
            LpStatus::Optimal => Ok(-sol.objective),
            _ => Err(SweepError::Lp(format!("oracle LP ended with {:?}", sol.status))),
        }
    }

    /// Whether `(w, −u)` is a limiting normal of the local graph.
    fn is_normal(&self, w: &Covector) -> Result<bool> {
        let m = self.query.m();
        let slack = self.query.slack();
        let obj = self.objective(w);
        let tol = 1e-8 * (1.0 + obj.iter().fold(0.0f64, |a, v| a.max(v.abs())));
        let biactive: Vec<usize> = (0..m)
            .filter(|&i| slack[i].abs() <= DEFAULT_ACTIVE_TOL && self.p[i] <= ZERO_TOL)
            .collect();
        let base: Vec<Branch> = (0..m)
            .map(|i| {
                if slack[i].abs() > DEFAULT_ACTIVE_TOL {
                    Branch::Inactive
                } else {
                    Branch::Positive
                }
            })
            .collect();
        // Each biactive face is approached from the inactive side, the
        // positive-multiplier side, or sits at the corner; at the corner the
        // regular normal must be polar to both branches.
        let nb = biactive.len();
        let mut pattern = vec![0u8; nb];
        loop {
            let corners: Vec<usize> = (0..nb).filter(|&c| pattern[c] == 2).collect();
            let mut all_polar = true;
            for mask in 0u32..(1u32 << corners.len()) {
                let mut br = base.clone();
                for (c, &i) in biactive.iter().enumerate() {
                    br[i] = match pattern[c] {
                        0 => Branch::Inactive,
                        1 => Branch::Positive,
                        _ => {
                            let pos = corners.iter().position(|&cc| cc == c).expect("corner");
                            if mask & (1 << pos) != 0 {
                                Branch::UpperCorner
                            } else {
                                Branch::LowerCorner
                            }
                        }
                    };
                }
                if self.support(&br, &obj)? > tol {
                    all_polar = false;
                    break;
                }
            }
            if all_polar {
                return Ok(true);
            }
            // next pattern in base 3
            let mut c = 0;
            loop {
                if c == nb {
                    return Ok(false);
                }
                pattern[c] += 1;
                if pattern[c] < 3 {
                    break;
                }
                pattern[c] = 0;
                c += 1;
            }
        }
    }
}

/// Decides `(probe, −u) ∈ N((x̄, Ā, b̄, v̄); gph F)` by enumerating the
/// polyhedral regions of the graph near the base point and testing polarity
/// with LPs. Without LICQ, the union is taken over the vertices of the
/// multiplier set.
pub fn oracle_graph_normals(query: &CoderivQuery, probe: &Covector) -> Result<bool> {
    let (n, m) = (query.n(), query.m());
    if n > 3 || m > 3 {
        return Err(SweepError::DimensionTooLarge { n, m });
    }
    query.validate()?;
    if probe.x.len() != n || probe.b.len() != m || probe.a.shape() != (m, n) {
        return Err(SweepError::ShapeMismatch("probe shape".into()));
    }
    let active = query.active();
    let vertices = multiplier_vertices(&query.a, &active, &query.v);
    if vertices.is_empty() {
        return Err(SweepError::NoMultiplier { residual: f64::NAN });
    }
    for p in vertices {
        if (GraphModel { query, p }).is_normal(probe)? {
            return Ok(true);
        }
    }
    Ok(false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn scalar_query(x: f64, a: f64, b: f64, v: f64, u: f64) -> CoderivQuery {
        CoderivQuery {
            x: dv(&[x]),
            a: DMatrix::from_element(1, 1, a),
            b: dv(&[b]),
            v: dv(&[v]),
            u: dv(&[u]),
        }
    }

    #[test]
    fn orthant_rule_cases() {
        assert_eq!(
            dstar_orthant(&dv(&[0.0, 0.0]), &dv(&[1.0, 0.0]), &dv(&[1.0, 0.0])).unwrap(),
            OrthantCoderiv::Empty
        );
        assert_eq!(
            dstar_orthant(&dv(&[-1.0, -1.0]), &dv(&[0.0, 0.0]), &dv(&[3.0, -2.0])).unwrap(),
            OrthantCoderiv::Pattern(vec![QSign::Zero, QSign::Zero])
        );
        assert_eq!(
            dstar_orthant(&dv(&[0.0, 0.0]), &dv(&[0.0, 0.0]), &dv(&[1.0, -1.0])).unwrap(),
            OrthantCoderiv::Pattern(vec![QSign::NonNeg, QSign::Zero])
        );
        assert!(matches!(
            dstar_orthant(&dv(&[1.0]), &dv(&[0.0]), &dv(&[0.0])),
            Err(SweepError::NotInGraph(_))
        ));
    }

    #[test]
    fn inactive_point_has_only_zero_multiplier() {
        let q = scalar_query(-1.0, 1.0, 0.0, 0.0, 0.7);
        let ps = pset(&q).unwrap();
        assert_eq!(ps.vertices, vec![dv(&[0.0])]);
        let d = dstar_f(&q).unwrap();
        assert_eq!(d.pieces[0].pattern, vec![QSign::Zero]);
        assert!(d.contains(&q, &Covector::zeros(1, 1)).unwrap());
        let mut w = Covector::zeros(1, 1);
        w.b[0] = 1.0;
        assert!(!d.contains(&q, &w).unwrap());
    }

    #[test]
    fn pushed_face_recovers_velocity_multiplier() {
        // −x ≤ b active at x = 0 with velocity η = 0.5 along +x.
        let q = scalar_query(0.0, -1.0, 0.0, 0.5, 0.0);
        let ps = pset(&q).unwrap();
        assert!(ps.unique);
        assert!((ps.vertices[0][0] - 0.5).abs() < 1e-12);
        let d = dstar_f(&q).unwrap();
        assert_eq!(d.pieces[0].pattern, vec![QSign::Free]);
        assert!(d.exact);
    }

    #[test]
    fn positive_multiplier_blocks_transversal_directions() {
        let q = scalar_query(0.0, -1.0, 0.0, 0.5, 1.0);
        assert!(pset(&q).unwrap().is_empty());
        assert!(dstar_f(&q).unwrap().is_empty());
    }

    #[test]
    fn biactive_face_with_inward_direction_gives_half_line() {
        let q = scalar_query(0.0, 1.0, 0.0, 0.0, -1.0);
        let d = dstar_f(&q).unwrap();
        assert_eq!(d.pieces[0].pattern, vec![QSign::NonNeg]);
        let pos = d.pieces[0].apply(&q, &dv(&[2.0]));
        let neg = d.pieces[0].apply(&q, &dv(&[-2.0]));
        assert!(d.contains(&q, &pos).unwrap());
        assert!(!d.contains(&q, &neg).unwrap());
        assert!(oracle_graph_normals(&q, &pos).unwrap());
        assert!(!oracle_graph_normals(&q, &neg).unwrap());
    }

    #[test]
    fn missing_multiplier_is_reported() {
        let q = scalar_query(0.0, 1.0, 0.0, 1.0, 0.0);
        assert!(matches!(pset(&q), Err(SweepError::NoMultiplier { .. })));
    }

    #[test]
    fn opposing_faces_violate_plicq() {
        let q = CoderivQuery {
            x: dv(&[0.0]),
            a: DMatrix::from_column_slice(2, 1, &[1.0, -1.0]),
            b: dv(&[0.0, 0.0]),
            v: dv(&[0.0]),
            u: dv(&[0.0]),
        };
        assert!(matches!(dstar_f(&q), Err(SweepError::QualificationFailure)));
    }

    #[test]
    fn oracle_rejects_large_dimensions() {
        let q = CoderivQuery {
            x: DVector::zeros(4),
            a: DMatrix::zeros(1, 4),
            b: dv(&[1.0]),
            v: DVector::zeros(4),
            u: DVector::zeros(4),
        };
        assert!(matches!(
            oracle_graph_normals(&q, &Covector::zeros(4, 1)),
            Err(SweepError::DimensionTooLarge { .. })
        ));
    }

    #[test]
    fn zero_probe_is_always_normal() {
        let q = scalar_query(0.0, -1.0, 0.0, 0.5, 0.0);
        assert!(oracle_graph_normals(&q, &Covector::zeros(1, 1)).unwrap());
    }
}

/// Seeded random instances for validating [`dstar_f`] against the oracle.
pub mod sampling {
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;

    use super::{dstar_f, Coderivative, CoderivQuery, Covector, QSign};
    use crate::error::Result;

    fn uniform_vec<R: Rng>(rng: &mut R, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0))
    }

    /// Removes from `u` its components along the given rows.
    fn orthogonalize(u: &DVector<f64>, rows: &[DVector<f64>]) -> DVector<f64> {
        if rows.is_empty() {
            return u.clone();
        }
        let n = u.len();
        let r = DMatrix::from_fn(rows.len(), n, |i, c| rows[i][c]);
        let rrt = &r * r.transpose();
        let coef = rrt.svd(true, true).solve(&(&r * u), 1e-12).expect("svd solve");
        u - r.transpose() * coef
    }

    fn finish<R: Rng>(rng: &mut R, x: DVector<f64>, a: DMatrix<f64>, b: DVector<f64>, p: DVector<f64>) -> CoderivQuery {
        let n = x.len();
        let m = b.len();
        let v = -(a.transpose() * &p);
        let mut fixed: Vec<DVector<f64>> = Vec::new();
        let keep_empty = rng.gen_bool(0.15);
        for i in 0..m {
            let active = (a.row(i).dot(&x.transpose()) - b[i]).abs() < 1e-12;
            let row = a.row(i).transpose();
            if (p[i] > 0.0 && !keep_empty) || (active && p[i] == 0.0 && rng.gen_bool(0.3)) {
                fixed.push(row);
            }
        }
        let u = orthogonalize(&uniform_vec(rng, n), &fixed);
        CoderivQuery { x, a, b, v, u }
    }

    /// Random base point with linearly independent active rows (`n, m ≤ 3`).
    pub fn licq_instance<R: Rng>(rng: &mut R) -> CoderivQuery {
        let n = rng.gen_range(1..=3);
        let m = rng.gen_range(1..=3);
        let a = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
        let x = uniform_vec(rng, n);
        let n_active = rng.gen_range(0..=m.min(n));
        let mut order: Vec<usize> = (0..m).collect();
        for i in (1..m).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let active = &order[..n_active];
        let ax = &a * &x;
        let mut b = ax.clone();
        let mut p = DVector::zeros(m);
        for i in 0..m {
            if active.contains(&i) {
                if rng.gen_bool(0.5) {
                    p[i] = rng.gen_range(0.2..1.5);
                }
            } else {
                b[i] += rng.gen_range(0.2..1.0);
            }
        }
        finish(rng, x, a, b, p)
    }

    /// Random base point whose active rows are positively but not linearly
    /// independent.
    pub fn plicq_only_instance<R: Rng>(rng: &mut R) -> CoderivQuery {
        let n = rng.gen_range(2..=3);
        let m = 3;
        // Rows share a positive component along a random direction d.
        let d = uniform_vec(rng, n).normalize();
        let mut rows: Vec<DVector<f64>> = Vec::new();
        let perturb = |rng: &mut R| {
            let w = uniform_vec(rng, n);
            let w = &w - &d * d.dot(&w);
            &d + w * 0.8
        };
        if n == 2 {
            for _ in 0..3 {
                rows.push(perturb(rng));
            }
        } else {
            let r1 = perturb(rng);
            let r2 = perturb(rng);
            let r3 = &r1 * rng.gen_range(0.3..1.0) + &r2 * rng.gen_range(0.3..1.0);
            rows.extend([r1, r2, r3]);
        }
        let a = DMatrix::from_fn(m, n, |i, c| rows[i][c]);
        let x = uniform_vec(rng, n);
        let b = &a * &x;
        let p = DVector::from_fn(m, |_, _| if rng.gen_bool(0.6) { rng.gen_range(0.2..1.5) } else { 0.0 });
        finish(rng, x, a, b, p)
    }

    /// Probes at a query: images of pattern-respecting `q` (members), images
    /// of pattern-violating `q`, and unstructured random covectors.
    pub fn probes<R: Rng>(rng: &mut R, query: &CoderivQuery, count: usize) -> Result<Vec<Covector>> {
        let (n, m) = (query.n(), query.m());
        let d: Option<Coderivative> = dstar_f(query).ok();
        let mut out = vec![Covector::zeros(n, m)];
        while out.len() < count {
            let kind = rng.gen_range(0..3);
            let piece = d.as_ref().and_then(|d| {
                if d.pieces.is_empty() {
                    None
                } else {
                    Some(&d.pieces[rng.gen_range(0..d.pieces.len())])
                }
            });
            match (kind, piece) {
                (0, Some(pc)) => {
                    let q = DVector::from_fn(m, |i, _| match pc.pattern[i] {
                        QSign::Zero => 0.0,
                        QSign::NonNeg => rng.gen_range(0.0..2.0),
                        QSign::Free => rng.gen_range(-2.0..2.0),
                    });
                    out.push(pc.apply(query, &q));
                }
                (1, Some(pc)) if pc.pattern.iter().any(|&s| s != QSign::Free) => {
                    let restricted: Vec<usize> = (0..m).filter(|&i| pc.pattern[i] != QSign::Free).collect();
                    let bad = restricted[rng.gen_range(0..restricted.len())];
                    let q = DVector::from_fn(m, |i, _| {
                        if i == bad {
                            -rng.gen_range(0.5..2.0)
                        } else {
                            match pc.pattern[i] {
                                QSign::Zero => 0.0,
                                QSign::NonNeg => rng.gen_range(0.0..2.0),
                                QSign::Free => rng.gen_range(-2.0..2.0),
                            }
                        }
                    });
                    out.push(pc.apply(query, &q));
                }
                _ => {
                    let w = DVector::from_fn(n + m * n + m, |_, _| rng.gen_range(-1.0..1.0));
                    out.push(Covector::unflatten(n, m, &w));
                }
            }
        }
        Ok(out)
    }
}
