//! Dense two-phase primal simplex with dual extraction.
//!
//! Pivoting uses the largest reduced cost with lowest-index ties and falls back to
//! Bland's rule after a run of degenerate pivots, so identical models always
//! follow the same pivot sequence. Once an optimal basis is found, primal and
//! dual values are recomputed from an LU factorisation of the basis matrix.

use std::collections::HashMap;
use std::fmt::{self, Write as _};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Feasibility tolerance used across the crate.
pub const FEAS_TOL: f64 = 1e-8;
/// Duality-gap tolerance used across the crate.
pub const GAP_TOL: f64 = 1e-7;

const PIVOT_TOL: f64 = 1e-9;
const HARRIS_TOL: f64 = 1e-11;
const COST_TOL: f64 = 1e-9;
const DEGENERATE_RUN: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    Le,
    Ge,
    Eq,
}

/// Stable constraint identifier: a kind tag plus integer indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConstraintId {
    pub kind: String,
    pub indices: Vec<usize>,
}

impl ConstraintId {
    pub fn new(kind: &str, indices: &[usize]) -> Self {
        Self { kind: kind.to_string(), indices: indices.to_vec() }
    }
}

impl fmt::Display for ConstraintId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind)?;
        for i in &self.indices {
            write!(f, "_{i}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Variable {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub objective: f64,
}

#[derive(Clone, Debug)]
pub struct Constraint {
    pub id: ConstraintId,
    pub coeffs: Vec<(usize, f64)>,
    pub sense: Sense,
    pub rhs: f64,
}

/// A maximisation LP with bounded variables and identified constraints.
#[derive(Clone, Debug, Default)]
pub struct LpModel {
    vars: Vec<Variable>,
    rows: Vec<Constraint>,
    index: HashMap<ConstraintId, usize>,
    objective_constant: f64,
}

impl LpModel {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a variable with bounds `[lower, upper]` (either may be infinite) and
    /// objective coefficient `objective`. Returns its column index.
    pub fn add_var(&mut self, name: impl Into<String>, lower: f64, upper: f64, objective: f64) -> usize {
        self.vars.push(Variable { name: name.into(), lower, upper, objective });
        self.vars.len() - 1
    }

    pub fn add_constraint(
        &mut self,
        id: ConstraintId,
        coeffs: Vec<(usize, f64)>,
        sense: Sense,
        rhs: f64,
    ) -> Result<usize> {
        if self.index.contains_key(&id) {
            return Err(Error::input(format!("duplicate constraint identifier {id}")));
        }
        if !rhs.is_finite() || coeffs.iter().any(|(j, a)| *j >= self.vars.len() || !a.is_finite()) {
            return Err(Error::input(format!("constraint {id} has a bad coefficient or column")));
        }
        self.index.insert(id.clone(), self.rows.len());
        self.rows.push(Constraint { id, coeffs, sense, rhs });
        Ok(self.rows.len() - 1)
    }

    pub fn add_objective_constant(&mut self, c: f64) {
        self.objective_constant += c;
    }

    pub fn objective_constant(&self) -> f64 {
        self.objective_constant
    }

    pub fn vars(&self) -> &[Variable] {
        &self.vars
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.rows
    }

    pub fn row_of(&self, id: &ConstraintId) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn count_kind(&self, kind: &str) -> usize {
        self.rows.iter().filter(|r| r.id.kind == kind).count()
    }

    /// CPLEX-style LP text dump, constraint identifiers used as row names.
    pub fn to_lp_text(&self) -> String {
        let mut out = String::from("Maximize\n obj:");
        for (j, v) in self.vars.iter().enumerate() {
            if v.objective != 0.0 {
                let _ = write!(out, " {:+} x{j}", v.objective);
            }
        }
        if self.objective_constant != 0.0 {
            let _ = write!(out, " {:+}", self.objective_constant);
        }
        out.push_str("\nSubject To\n");
        for r in &self.rows {
            let _ = write!(out, " {}:", r.id);
            for (j, a) in &r.coeffs {
                let _ = write!(out, " {a:+} x{j}");
            }
            let op = match r.sense {
                Sense::Le => "<=",
                Sense::Ge => ">=",
                Sense::Eq => "=",
            };
            let _ = writeln!(out, " {op} {}", r.rhs);
        }
        out.push_str("Bounds\n");
        for (j, v) in self.vars.iter().enumerate() {
            let lo = if v.lower.is_finite() { v.lower.to_string() } else { "-inf".into() };
            let hi = if v.upper.is_finite() { v.upper.to_string() } else { "+inf".into() };
            let _ = writeln!(out, " {lo} <= x{j} <= {hi} \\ {}", v.name);
        }
        out.push_str("End\n");
        out
    }

    /// Row activities `A x` for a candidate primal vector.
    pub fn activities(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.coeffs.iter().map(|(j, a)| a * x[*j]).sum())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Clone, Debug)]
pub struct LpSolution {
    pub status: LpStatus,
    pub primal: Vec<f64>,
    /// One dual per constraint, in model order. For a maximisation, `<=` rows have
    /// nonnegative duals and `>=` rows nonpositive duals.
    pub duals: Vec<f64>,
    pub objective: f64,
    pub pivots: usize,
}

impl LpSolution {
    pub fn dual(&self, model: &LpModel, id: &ConstraintId) -> Option<f64> {
        model.row_of(id).map(|r| self.duals[r])
    }

    pub fn is_optimal(&self) -> bool {
        self.status == LpStatus::Optimal
    }
}

/// Residuals of an optimal solution against its model.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct LpResiduals {
    pub primal_infeasibility: f64,
    pub dual_infeasibility: f64,
    pub complementary_slackness: f64,
    pub duality_gap: f64,
}

/// Checks primal feasibility, dual sign and stationarity, complementary slackness
/// and strong duality for a solution of `model`.
pub fn residuals(model: &LpModel, sol: &LpSolution) -> LpResiduals {
    let act = model.activities(&sol.primal);
    let mut res = LpResiduals::default();
    for (r, row) in model.rows.iter().enumerate() {
        let slack = row.rhs - act[r];
        let (viol, dual_viol) = match row.sense {
            Sense::Le => ((-slack).max(0.0), (-sol.duals[r]).max(0.0)),
            Sense::Ge => (slack.max(0.0), sol.duals[r].max(0.0)),
            Sense::Eq => (slack.abs(), 0.0),
        };
        res.primal_infeasibility = res.primal_infeasibility.max(viol);
        res.dual_infeasibility = res.dual_infeasibility.max(dual_viol);
        if row.sense != Sense::Eq {
            res.complementary_slackness = res.complementary_slackness.max((sol.duals[r] * slack).abs());
        }
    }
    // reduced costs d_j = c_j - a_j^T y
    let mut reduced: Vec<f64> = model.vars.iter().map(|v| v.objective).collect();
    for (r, row) in model.rows.iter().enumerate() {
        for (j, a) in &row.coeffs {
            reduced[*j] -= a * sol.duals[r];
        }
    }
    let mut dual_obj: f64 = model.rows.iter().zip(&sol.duals).map(|(r, y)| r.rhs * y).sum();
    for (j, v) in model.vars.iter().enumerate() {
        let d = reduced[j];
        let x = sol.primal[j];
        res.primal_infeasibility = res
            .primal_infeasibility
            .max((v.lower - x).max(0.0))
            .max((x - v.upper).max(0.0));
        // bound multipliers absorb the reduced cost: d > 0 needs an upper bound, d < 0 a lower one
        if d > 0.0 {
            if v.upper.is_finite() {
                dual_obj += d * v.upper;
                res.complementary_slackness = res.complementary_slackness.max((d * (v.upper - x)).abs());
            } else {
                res.dual_infeasibility = res.dual_infeasibility.max(d);
            }
        } else if d < 0.0 {
            if v.lower.is_finite() {
                dual_obj += d * v.lower;
                res.complementary_slackness = res.complementary_slackness.max((d * (x - v.lower)).abs());
            } else {
                res.dual_infeasibility = res.dual_infeasibility.max(-d);
            }
        }
    }
    let primal_obj = sol.objective - model.objective_constant;
    res.duality_gap = (primal_obj - dual_obj).abs();
    res
}

/// How an original variable maps onto nonnegative standard-form columns.
#[derive(Clone, Copy, Debug)]
enum ColMap {
    /// x = offset + col
    Shift { col: usize, offset: f64 },
    /// x = offset - col
    Mirror { col: usize, offset: f64 },
    /// x = pos - neg
    Split { pos: usize, neg: usize },
}

/// Solves `model` to optimality. Infeasible and unbounded models are reported
/// through [`LpSolution::status`], never as errors.
pub fn solve_lp(model: &LpModel) -> LpSolution {
    Simplex::build(model).run(model)
}

struct Simplex {
    m: usize,
    ncols: usize,
    width: usize,
    tab: Vec<f64>,
    basis: Vec<usize>,
    cost: Vec<f64>,
    /// Column that formed the initial identity for each row.
    init_col: Vec<usize>,
    artificial_start: usize,
    flipped: Vec<bool>,
    active: Vec<bool>,
    col_map: Vec<ColMap>,
    n_model_rows: usize,
    /// Standard-form matrix and rhs kept for the final LU pass.
    a_std: Vec<Vec<(usize, f64)>>,
    b_std: Vec<f64>,
    pivots: usize,
}

impl Simplex {
    fn build(model: &LpModel) -> Self {
        let mut col_map = Vec::with_capacity(model.vars.len());
        let mut ncols_struct = 0usize;
        // bound rows appended after the model rows: (col, upper)
        let mut bound_rows: Vec<(usize, f64)> = Vec::new();
        for v in &model.vars {
            if v.lower.is_finite() {
                let col = ncols_struct;
                ncols_struct += 1;
                if v.upper.is_finite() {
                    bound_rows.push((col, v.upper - v.lower));
                }
                col_map.push(ColMap::Shift { col, offset: v.lower });
            } else if v.upper.is_finite() {
                let col = ncols_struct;
                ncols_struct += 1;
                col_map.push(ColMap::Mirror { col, offset: v.upper });
            } else {
                col_map.push(ColMap::Split { pos: ncols_struct, neg: ncols_struct + 1 });
                ncols_struct += 2;
            }
        }
        let mut rows: Vec<(Vec<(usize, f64)>, Sense, f64)> = Vec::new();
        for r in &model.rows {
            let mut coeffs: Vec<(usize, f64)> = Vec::new();
            let mut rhs = r.rhs;
            for (j, a) in &r.coeffs {
                match col_map[*j] {
                    ColMap::Shift { col, offset } => {
                        coeffs.push((col, *a));
                        rhs -= a * offset;
                    }
                    ColMap::Mirror { col, offset } => {
                        coeffs.push((col, -a));
                        rhs -= a * offset;
                    }
                    ColMap::Split { pos, neg } => {
                        coeffs.push((pos, *a));
                        coeffs.push((neg, -a));
                    }
                }
            }
            rows.push((merge(coeffs), r.sense, rhs));
        }
        for (col, ub) in &bound_rows {
            rows.push((vec![(*col, 1.0)], Sense::Le, *ub));
        }
        let m = rows.len();
        let mut flipped = vec![false; m];
        for (r, row) in rows.iter_mut().enumerate() {
            if row.2 < 0.0 {
                flipped[r] = true;
                row.2 = -row.2;
                for c in row.0.iter_mut() {
                    c.1 = -c.1;
                }
                row.1 = match row.1 {
                    Sense::Le => Sense::Ge,
                    Sense::Ge => Sense::Le,
                    Sense::Eq => Sense::Eq,
                };
            }
        }
        let n_slack = rows.iter().filter(|r| r.1 != Sense::Eq).count();
        let n_art = rows.iter().filter(|r| r.1 != Sense::Le).count();
        let artificial_start = ncols_struct + n_slack;
        let ncols = artificial_start + n_art;
        let width = ncols + 1;
        let mut tab = vec![0.0; m * width];
        let mut basis = vec![0; m];
        let mut init_col = vec![0; m];
        let mut a_std = Vec::with_capacity(m);
        let mut b_std = Vec::with_capacity(m);
        let mut next_slack = ncols_struct;
        let mut next_art = artificial_start;
        for (r, (coeffs, sense, rhs)) in rows.into_iter().enumerate() {
            let mut full = coeffs.clone();
            for (c, a) in &coeffs {
                tab[r * width + c] = *a;
            }
            match sense {
                Sense::Le => {
                    tab[r * width + next_slack] = 1.0;
                    full.push((next_slack, 1.0));
                    basis[r] = next_slack;
                    init_col[r] = next_slack;
                    next_slack += 1;
                }
                Sense::Ge => {
                    tab[r * width + next_slack] = -1.0;
                    full.push((next_slack, -1.0));
                    next_slack += 1;
                    tab[r * width + next_art] = 1.0;
                    full.push((next_art, 1.0));
                    basis[r] = next_art;
                    init_col[r] = next_art;
                    next_art += 1;
                }
                Sense::Eq => {
                    tab[r * width + next_art] = 1.0;
                    full.push((next_art, 1.0));
                    basis[r] = next_art;
                    init_col[r] = next_art;
                    next_art += 1;
                }
            }
            tab[r * width + ncols] = rhs;
            a_std.push(full);
            b_std.push(rhs);
        }
        let mut cost = vec![0.0; ncols];
        for (j, v) in model.vars.iter().enumerate() {
            match col_map[j] {
                ColMap::Shift { col, .. } => cost[col] += v.objective,
                ColMap::Mirror { col, .. } => cost[col] -= v.objective,
                ColMap::Split { pos, neg } => {
                    cost[pos] += v.objective;
                    cost[neg] -= v.objective;
                }
            }
        }
        Self {
            m,
            ncols,
            width,
            tab,
            basis,
            cost,
            init_col,
            artificial_start,
            flipped,
            active: vec![true; m],
            col_map,
            n_model_rows: model.rows.len(),
            a_std,
            b_std,
            pivots: 0,
        }
    }

    #[inline]
    fn at(&self, r: usize, c: usize) -> f64 {
        self.tab[r * self.width + c]
    }

    fn pivot(&mut self, pr: usize, pc: usize, dj: &mut [f64]) {
        let w = self.width;
        let inv = 1.0 / self.tab[pr * w + pc];
        for c in 0..w {
            self.tab[pr * w + c] *= inv;
        }
        self.tab[pr * w + pc] = 1.0;
        let (before, rest) = self.tab.split_at_mut(pr * w);
        let (prow, after) = rest.split_at_mut(w);
        let eliminate = |row: &mut [f64]| {
            let f = row[pc];
            if f != 0.0 {
                for (x, p) in row.iter_mut().zip(prow.iter()) {
                    *x -= f * p;
                }
                row[pc] = 0.0;
            }
        };
        before.chunks_mut(w).for_each(eliminate);
        after.chunks_mut(w).for_each(eliminate);
        let f = dj[pc];
        if f != 0.0 {
            for (x, p) in dj.iter_mut().zip(prow.iter()) {
                *x -= f * p;
            }
            dj[pc] = 0.0;
        }
        self.basis[pr] = pc;
        self.pivots += 1;
    }

    /// Reduced costs (plus negated objective value in the last slot) for `costs`.
    fn reduced_costs(&self, costs: &[f64]) -> Vec<f64> {
        let mut dj = vec![0.0; self.width];
        dj[..self.ncols].copy_from_slice(costs);
        for r in 0..self.m {
            let cb = costs[self.basis[r]];
            if cb != 0.0 {
                for c in 0..self.width {
                    dj[c] -= cb * self.at(r, c);
                }
            }
        }
        dj
    }

    /// Runs simplex iterations on the reduced-cost row `dj`. Returns false if unbounded.
    fn iterate(&mut self, dj: &mut [f64], allow_artificial: bool) -> bool {
        let limit = self.ncols.max(self.m);
        let mut degenerate_run = 0usize;
        let max_pivots = 50_000 + 200 * limit;
        let start = self.pivots;
        loop {
            if self.pivots - start > max_pivots {
                // should not happen with Bland's fallback; treat as converged
                return true;
            }
            let end = if allow_artificial { self.ncols } else { self.artificial_start };
            let bland = degenerate_run >= DEGENERATE_RUN;
            let mut enter = None;
            let mut best = COST_TOL;
            for (c, &d) in dj.iter().enumerate().take(end) {
                if d > best {
                    enter = Some(c);
                    if bland {
                        break;
                    }
                    best = d;
                }
            }
            let Some(pc) = enter else { return true };
            let leave = if bland { self.bland_row(pc) } else { self.harris_row(pc) };
            let Some(pr) = leave else { return false };
            if self.at(pr, self.ncols) <= 1e-12 {
                degenerate_run += 1;
            } else {
                degenerate_run = 0;
            }
            self.pivot(pr, pc, dj);
        }
    }

    /// Minimum-ratio row, ties broken by smallest basic index.
    fn bland_row(&self, pc: usize) -> Option<usize> {
        let mut leave: Option<usize> = None;
        let mut best_ratio = f64::INFINITY;
        for r in (0..self.m).filter(|r| self.active[*r]) {
            let a = self.at(r, pc);
            if a <= PIVOT_TOL {
                continue;
            }
            let ratio = self.at(r, self.ncols).max(0.0) / a;
            let slack = 1e-12 * (1.0 + best_ratio);
            let better = match leave {
                None => true,
                Some(l) => ratio < best_ratio - slack || (ratio <= best_ratio + slack && self.basis[r] < self.basis[l]),
            };
            if better {
                best_ratio = best_ratio.min(ratio);
                leave = Some(r);
            }
        }
        leave
    }

    /// Two-pass ratio test: bound the step with relaxed feasibility, then take the
    /// largest pivot element among rows within that bound.
    fn harris_row(&self, pc: usize) -> Option<usize> {
        let bound = (0..self.m)
            .filter(|r| self.active[*r] && self.at(*r, pc) > PIVOT_TOL)
            .map(|r| (self.at(r, self.ncols).max(0.0) + HARRIS_TOL) / self.at(r, pc))
            .fold(f64::INFINITY, f64::min);
        if !bound.is_finite() {
            return None;
        }
        let mut leave: Option<usize> = None;
        let mut best = 0.0;
        for r in (0..self.m).filter(|r| self.active[*r]) {
            let a = self.at(r, pc);
            if a > PIVOT_TOL && self.at(r, self.ncols).max(0.0) / a <= bound && a > best {
                best = a;
                leave = Some(r);
            }
        }
        leave
    }

    fn run(mut self, model: &LpModel) -> LpSolution {
        let n_art = self.ncols - self.artificial_start;
        if n_art > 0 {
            let mut phase1 = vec![0.0; self.ncols];
            for c in self.artificial_start..self.ncols {
                phase1[c] = -1.0;
            }
            let mut dj = self.reduced_costs(&phase1);
            self.iterate(&mut dj, true);
            let infeas: f64 = (0..self.m)
                .filter(|r| self.basis[*r] >= self.artificial_start)
                .map(|r| self.at(r, self.ncols))
                .sum();
            let scale = 1.0 + self.b_std.iter().fold(0.0f64, |a, b| a.max(b.abs()));
            if infeas > FEAS_TOL * scale {
                return self.failed(model, LpStatus::Infeasible);
            }
            // drive remaining artificials out of the basis; rows where that is impossible are redundant
            for r in 0..self.m {
                if self.basis[r] < self.artificial_start {
                    continue;
                }
                let pc = (0..self.artificial_start).find(|c| self.at(r, *c).abs() > PIVOT_TOL);
                match pc {
                    Some(pc) => {
                        let mut scratch = vec![0.0; self.width];
                        self.pivot(r, pc, &mut scratch);
                    }
                    None => self.active[r] = false,
                }
            }
        }
        let cost = self.cost.clone();
        let mut dj = self.reduced_costs(&cost);
        if !self.iterate(&mut dj, false) {
            return self.failed(model, LpStatus::Unbounded);
        }
        self.extract(model)
    }

    fn failed(&self, model: &LpModel, status: LpStatus) -> LpSolution {
        LpSolution {
            status,
            primal: vec![0.0; model.vars.len()],
            duals: vec![0.0; model.rows.len()],
            objective: f64::NAN,
            pivots: self.pivots,
        }
    }

    fn extract(&self, model: &LpModel) -> LpSolution {
        let rows: Vec<usize> = (0..self.m).filter(|r| self.active[*r]).collect();
        let mut col_value = vec![0.0; self.ncols];
        let mut row_dual = vec![0.0; self.m];
        // tableau read-out, used directly if the basis matrix turns out singular
        for &r in &rows {
            col_value[self.basis[r]] = self.at(r, self.ncols).max(0.0);
        }
        for &r in &rows {
            let col = self.init_col[r];
            row_dual[r] = rows.iter().map(|&q| self.cost[self.basis[q]] * self.at(q, col)).sum();
        }
        let n = rows.len();
        if n > 0 {
            let mut col_pos = vec![usize::MAX; self.ncols];
            for (k, &r) in rows.iter().enumerate() {
                col_pos[self.basis[r]] = k;
            }
            let mut bmat = DMatrix::<f64>::zeros(n, n);
            for (k, &r) in rows.iter().enumerate() {
                for (c, a) in &self.a_std[r] {
                    if col_pos[*c] != usize::MAX {
                        bmat[(k, col_pos[*c])] = *a;
                    }
                }
            }
            let rhs = DVector::from_iterator(n, rows.iter().map(|r| self.b_std[*r]));
            let cb = DVector::from_iterator(n, rows.iter().map(|r| self.cost[self.basis[*r]]));
            let bt = bmat.transpose();
            if let (Some(xb), Some(y)) = (bmat.lu().solve(&rhs), bt.lu().solve(&cb)) {
                if xb.iter().chain(y.iter()).all(|v| v.is_finite()) {
                    for (k, &r) in rows.iter().enumerate() {
                        col_value[self.basis[r]] = xb[k].max(0.0);
                        row_dual[r] = y[k];
                    }
                }
            }
        }
        let primal: Vec<f64> = self
            .col_map
            .iter()
            .map(|m| match *m {
                ColMap::Shift { col, offset } => offset + col_value[col],
                ColMap::Mirror { col, offset } => offset - col_value[col],
                ColMap::Split { pos, neg } => col_value[pos] - col_value[neg],
            })
            .collect();
        let duals: Vec<f64> = (0..self.n_model_rows)
            .map(|r| {
                let y = if self.active[r] { row_dual[r] } else { 0.0 };
                let y = if self.flipped[r] { -y } else { y };
                // canonical zero
                if y == 0.0 {
                    0.0
                } else {
                    y
                }
            })
            .collect();
        let objective = model.objective_constant
            + model.vars.iter().zip(&primal).map(|(v, x)| v.objective * x).sum::<f64>();
        LpSolution { status: LpStatus::Optimal, primal, duals, objective, pivots: self.pivots }
    }
}

fn merge(mut coeffs: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    coeffs.sort_by_key(|c| c.0);
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(coeffs.len());
    for (c, a) in coeffs {
        match out.last_mut() {
            Some(last) if last.0 == c => last.1 += a,
            _ => out.push((c, a)),
        }
    }
    out.retain(|c| c.1 != 0.0);
    out
}
