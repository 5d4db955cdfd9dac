//! Safety-filter quadratic program
//!
//! ```text
//! minimise   (u − u0)² + Σ_j p_j σ_j²
//! subject to c_i u + σ_i ≥ b_i   (soft rows, one slack each)
//!            c_i u       ≥ b_i   (hard rows)
//!            σ_j ≥ 0
//! ```
//!
//! [`solve`] runs a primal active-set method on `z = (u, σ)`; [`oracle_solve`]
//! enumerates row hypotheses in closed form and serves as a test oracle.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::safety::SafetyConstraint;

const MAX_ITERATIONS: usize = 200;
const STEP_TOL: f64 = 1e-13;
const ACTIVE_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct FilterProblem {
    pub u0: f64,
    pub constraints: Vec<SafetyConstraint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterSolution {
    pub u: f64,
    /// Slack of every constraint row (zero for hard rows).
    pub slacks: Vec<f64>,
    /// Indices of rows that hold with equality at the optimum.
    pub active: Vec<usize>,
    pub objective: f64,
}

impl FilterProblem {
    pub fn new(u0: f64, constraints: Vec<SafetyConstraint>) -> Self {
        Self { u0, constraints }
    }

    fn validate(&self) -> Result<()> {
        if !self.u0.is_finite() {
            return Err(Error::InvalidInput(format!("nominal input is not finite: {}", self.u0)));
        }
        for (k, c) in self.constraints.iter().enumerate() {
            if !(c.coeff_u.is_finite() && c.rhs.is_finite()) {
                return Err(Error::InvalidInput(format!("constraint {k} has non-finite data")));
            }
            if let Some(p) = c.slack_penalty {
                if !(p > 0.0 && p.is_finite()) {
                    return Err(Error::InvalidInput(format!("constraint {k} has slack penalty {p}")));
                }
            }
        }
        Ok(())
    }

    /// Objective at `u` with every slack at its smallest feasible value.
    pub fn objective_at(&self, u: f64) -> f64 {
        let mut value = (u - self.u0).powi(2);
        for c in &self.constraints {
            if let Some(p) = c.slack_penalty {
                value += p * c.deficit(u).max(0.0).powi(2);
            }
        }
        value
    }

    /// Interval of `u` admitted by the hard rows.
    fn hard_interval(&self) -> Result<(f64, f64)> {
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for c in self.constraints.iter().filter(|c| c.is_hard()) {
            if c.coeff_u > 0.0 {
                lo = lo.max(c.rhs / c.coeff_u);
            } else if c.coeff_u < 0.0 {
                hi = hi.min(c.rhs / c.coeff_u);
            } else if c.rhs > ACTIVE_TOL {
                return Err(Error::InvalidInput(format!("hard constraint 0·u ≥ {} cannot be met", c.rhs)));
            }
        }
        if lo > hi + ACTIVE_TOL * (1.0 + lo.abs().max(hi.abs())) {
            return Err(Error::InvalidInput(format!("hard constraints are infeasible: u ≥ {lo} and u ≤ {hi}")));
        }
        Ok((lo, hi.max(lo)))
    }

    fn finish(&self, u: f64) -> FilterSolution {
        let slacks: Vec<f64> =
            self.constraints.iter().map(|c| if c.is_hard() { 0.0 } else { c.deficit(u).max(0.0) }).collect();
        let active = self
            .constraints
            .iter()
            .zip(&slacks)
            .enumerate()
            .filter(|(_, (c, s))| (c.coeff_u * u + **s - c.rhs).abs() <= ACTIVE_TOL * (1.0 + c.rhs.abs()))
            .map(|(k, _)| k)
            .collect();
        FilterSolution { u, slacks, active, objective: self.objective_at(u) }
    }
}

/// Linear inequality `aᵀz ≥ b` over the stacked variable `z = (u, σ)`.
struct Row {
    a: DVector<f64>,
    b: f64,
}

/// Primal active-set solution of the filter QP.
pub fn solve(problem: &FilterProblem) -> Result<FilterSolution> {
    problem.validate()?;
    let (lo, hi) = problem.hard_interval()?;

    // Variables: u followed by one slack per soft row.
    let soft: Vec<usize> =
        problem.constraints.iter().enumerate().filter(|(_, c)| !c.is_hard()).map(|(k, _)| k).collect();
    let dim = 1 + soft.len();
    let mut hessian = DMatrix::zeros(dim, dim);
    hessian[(0, 0)] = 2.0;
    let mut linear = DVector::zeros(dim);
    linear[0] = -2.0 * problem.u0;

    let mut rows = Vec::new();
    let mut slot = 0;
    for c in &problem.constraints {
        let mut a = DVector::zeros(dim);
        a[0] = c.coeff_u;
        if let Some(p) = c.slack_penalty {
            slot += 1;
            a[slot] = 1.0;
            hessian[(slot, slot)] = 2.0 * p;
        }
        rows.push(Row { a, b: c.rhs });
    }
    for j in 1..dim {
        let mut a = DVector::zeros(dim);
        a[j] = 1.0;
        rows.push(Row { a, b: 0.0 });
    }

    // Feasible start: nominal input clamped to the hard interval, slacks
    // covering whatever the soft rows still miss.
    let mut z = DVector::zeros(dim);
    z[0] = problem.u0.clamp(lo, hi);
    for (j, &k) in soft.iter().enumerate() {
        z[j + 1] = problem.constraints[k].deficit(z[0]).max(0.0);
    }

    let mut working: Vec<usize> = Vec::new();
    // Set after an unblocked full step: z then minimises the current
    // equality subproblem and any recomputed step is pure roundoff.
    let mut at_subproblem_min = false;
    for _ in 0..MAX_ITERATIONS {
        let gradient = &hessian * &z + &linear;
        let (step, multipliers) = equality_step(&hessian, &gradient, &rows, &working)?;
        let scale = 1.0 + z.amax();
        if at_subproblem_min || step.amax() <= STEP_TOL * scale {
            at_subproblem_min = false;
            match multipliers.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)) {
                Some((pos, &lambda)) if lambda < -ACTIVE_TOL => {
                    working.remove(pos);
                    continue;
                }
                _ => return Ok(problem.finish(z[0])),
            }
        }
        let mut alpha = 1.0;
        let mut blocking = None;
        for (k, row) in rows.iter().enumerate() {
            if working.contains(&k) {
                continue;
            }
            let rate = row.a.dot(&step);
            if rate < -STEP_TOL * scale {
                let room = ((row.b - row.a.dot(&z)) / rate).max(0.0);
                if room < alpha {
                    alpha = room;
                    blocking = Some(k);
                }
            }
        }
        z += &step * alpha;
        match blocking {
            Some(k) => working.push(k),
            None => at_subproblem_min = true,
        }
    }
    Err(Error::InvalidInput(format!("active-set iteration did not terminate in {MAX_ITERATIONS} steps")))
}

/// Solves the equality-constrained subproblem for the step `p` and the
/// working-set multipliers `λ`:
/// `H p − A_Wᵀ λ = −∇`, `A_W p = 0`.
fn equality_step(
    hessian: &DMatrix<f64>,
    gradient: &DVector<f64>,
    rows: &[Row],
    working: &[usize],
) -> Result<(DVector<f64>, Vec<f64>)> {
    let dim = hessian.nrows();
    let size = dim + working.len();
    let mut kkt = DMatrix::zeros(size, size);
    kkt.view_mut((0, 0), (dim, dim)).copy_from(hessian);
    for (w, &k) in working.iter().enumerate() {
        for j in 0..dim {
            kkt[(j, dim + w)] = -rows[k].a[j];
            kkt[(dim + w, j)] = rows[k].a[j];
        }
    }
    let mut rhs = DVector::zeros(size);
    rhs.rows_mut(0, dim).copy_from(&(-gradient));
    let sol = kkt.lu().solve(&rhs).ok_or(Error::Singular("safety-filter KKT system"))?;
    Ok((sol.rows(0, dim).into_owned(), sol.rows(dim, working.len()).iter().copied().collect()))
}

/// Exhaustive oracle: every subset of rows is tried as the set of rows that
/// hold with equality, each hypothesis solved in closed form; the cheapest
/// primal-feasible candidate wins.
pub fn oracle_solve(problem: &FilterProblem) -> Result<FilterSolution> {
    problem.validate()?;
    let m = problem.constraints.len();
    if m > 20 {
        return Err(Error::InvalidInput(format!("oracle limited to 20 rows, got {m}")));
    }
    let feasible =
        |u: f64| problem.constraints.iter().filter(|c| c.is_hard()).all(|c| c.deficit(u) <= 1e-9 * (1.0 + c.rhs.abs()));

    let mut best: Option<(f64, f64)> = None;
    for mask in 0u32..(1u32 << m) {
        let chosen = (0..m).filter(|k| mask >> k & 1 == 1).map(|k| &problem.constraints[k]);
        let mut hard_u = None;
        let (mut num, mut den) = (problem.u0, 1.0);
        for c in chosen {
            match c.slack_penalty {
                None if c.coeff_u != 0.0 => {
                    hard_u.get_or_insert(c.rhs / c.coeff_u);
                }
                None => {}
                Some(p) => {
                    num += p * c.coeff_u * c.rhs;
                    den += p * c.coeff_u * c.coeff_u;
                }
            }
        }
        let u = hard_u.unwrap_or(num / den);
        if !feasible(u) {
            continue;
        }
        let objective = problem.objective_at(u);
        if best.is_none_or(|(b, _)| objective < b) {
            best = Some((objective, u));
        }
    }
    let (_, u) = best.ok_or_else(|| Error::InvalidInput("hard constraints are infeasible".into()))?;
    Ok(problem.finish(u))
}
