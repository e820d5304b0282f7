//! Linear programs for constraint-qualification tests, coderivative
//! membership and certificate reconstruction.
//!
//! Problems are stated as `min cᵀx` subject to row constraints `aᵀx {≤,=,≥} r`
//! and per-variable bounds `lo ≤ x ≤ hi` (either side may be infinite).
//! Variables are nonnegative unless their bounds are changed. Solving is
//! delegated to the `microlp` revised simplex.

use std::collections::BTreeMap;

use microlp::{ComparisonOp, Error as MlpError, OptimizationDirection, Problem, SolveOutcome, Variable};

use crate::error::{Result, SweepError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone)]
pub struct Row {
    pub coefs: Vec<(usize, f64)>,
    pub sense: Sense,
    pub rhs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub status: LpStatus,
    pub x: Vec<f64>,
    pub objective: f64,
}

impl LpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == LpStatus::Optimal
    }
}

#[derive(Debug, Clone)]
pub struct LinearProgram {
    n: usize,
    objective: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    rows: Vec<Row>,
}

impl LinearProgram {
    /// `n` variables, all nonnegative by default, zero objective.
    pub fn new(n: usize) -> Self {
        LinearProgram {
            n,
            objective: vec![0.0; n],
            lower: vec![0.0; n],
            upper: vec![f64::INFINITY; n],
            rows: Vec::new(),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.n
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    /// Appends a fresh variable and returns its index.
    pub fn add_var(&mut self, lo: f64, hi: f64, cost: f64) -> usize {
        self.n += 1;
        self.objective.push(cost);
        self.lower.push(lo);
        self.upper.push(hi);
        self.n - 1
    }

    pub fn set_cost(&mut self, j: usize, c: f64) {
        self.objective[j] = c;
    }

    pub fn set_bounds(&mut self, j: usize, lo: f64, hi: f64) {
        self.lower[j] = lo;
        self.upper[j] = hi;
    }

    pub fn set_free(&mut self, j: usize) {
        self.set_bounds(j, f64::NEG_INFINITY, f64::INFINITY);
    }

    pub fn bounds(&self, j: usize) -> (f64, f64) {
        (self.lower[j], self.upper[j])
    }

    pub fn add_row(&mut self, coefs: Vec<(usize, f64)>, sense: Sense, rhs: f64) -> usize {
        debug_assert!(coefs.iter().all(|&(j, _)| j < self.n));
        self.rows.push(Row { coefs, sense, rhs });
        self.rows.len() - 1
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    /// A copy of the program without the listed rows.
    pub fn without_rows(&self, drop: &[bool]) -> LinearProgram {
        let mut lp = self.clone();
        lp.rows = self
            .rows
            .iter()
            .zip(drop)
            .filter(|(_, d)| !**d)
            .map(|(r, _)| r.clone())
            .collect();
        lp
    }

    /// Largest violation of rows and bounds at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for row in &self.rows {
            let lhs: f64 = row.coefs.iter().map(|&(j, a)| a * x[j]).sum();
            let v = match row.sense {
                Sense::Le => lhs - row.rhs,
                Sense::Ge => row.rhs - lhs,
                Sense::Eq => (lhs - row.rhs).abs(),
            };
            worst = worst.max(v);
        }
        for j in 0..self.n {
            worst = worst.max(self.lower[j] - x[j]).max(x[j] - self.upper[j]);
        }
        worst
    }

    pub fn solve(&self) -> Result<LpSolution> {
        for j in 0..self.n {
            let (lo, hi) = (self.lower[j], self.upper[j]);
            if lo.is_nan() || hi.is_nan() {
                return Err(SweepError::Lp(format!("NaN bound on variable {j}")));
            }
            if lo > hi {
                return Ok(self.status_only(LpStatus::Infeasible));
            }
        }
        let mut problem = Problem::new(OptimizationDirection::Minimize);
        let vars: Vec<Variable> = (0..self.n)
            .map(|j| problem.add_var(self.objective[j], (self.lower[j], self.upper[j])))
            .collect();
        for row in &self.rows {
            // Merge repeated variables; the backend expects one term each.
            let mut terms: BTreeMap<usize, f64> = BTreeMap::new();
            for &(j, a) in &row.coefs {
                if !a.is_finite() {
                    return Err(SweepError::Lp(format!("non-finite coefficient on variable {j}")));
                }
                *terms.entry(j).or_insert(0.0) += a;
            }
            if !row.rhs.is_finite() {
                return Err(SweepError::Lp("non-finite right-hand side".into()));
            }
            let op = match row.sense {
                Sense::Le => ComparisonOp::Le,
                Sense::Ge => ComparisonOp::Ge,
                Sense::Eq => ComparisonOp::Eq,
            };
            let expr: Vec<(Variable, f64)> =
                terms.into_iter().filter(|&(_, a)| a != 0.0).map(|(j, a)| (vars[j], a)).collect();
            problem.add_constraint(expr, op, row.rhs);
        }
        match problem.solve() {
            Ok(SolveOutcome::Solution(sol)) => {
                let x: Vec<f64> = vars.iter().map(|&v| sol.var_value_raw(v)).collect();
                let objective = self.objective.iter().zip(&x).map(|(c, v)| c * v).sum();
                Ok(LpSolution {
                    status: LpStatus::Optimal,
                    x,
                    objective,
                })
            }
            Ok(SolveOutcome::Interrupted(_)) => Err(SweepError::Lp("solve interrupted".into())),
            Err(MlpError::Infeasible) => Ok(self.status_only(LpStatus::Infeasible)),
            Err(MlpError::Unbounded) => Ok(self.status_only(LpStatus::Unbounded)),
            Err(e) => Err(SweepError::Lp(e.to_string())),
        }
    }

    fn status_only(&self, status: LpStatus) -> LpSolution {
        let objective = match status {
            LpStatus::Unbounded => f64::NEG_INFINITY,
            _ => f64::NAN,
        };
        LpSolution {
            status,
            x: vec![0.0; self.n],
            objective,
        }
    }
}

/// Convenience: is `{x : rows, bounds}` nonempty?
pub fn is_feasible(lp: &LinearProgram) -> Result<bool> {
    let mut probe = lp.clone();
    for j in 0..probe.n {
        probe.objective[j] = 0.0;
    }
    Ok(probe.solve()?.status == LpStatus::Optimal)
}
