//! The single-period program: allocation variables per profile and buyer, one
//! continuation variable per profile bounded by every piece of the continuation
//! function, adjacent monotonicity, balance and feasibility rows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::{Instance, PeriodSpace};
use crate::lp::{solve_lp, ConstraintId, LpModel, LpStatus, Sense};
use crate::pwl::PwlConcaveFn;

pub const KIND_MONO: &str = "mono";
pub const KIND_BALANCE: &str = "balance";
pub const KIND_PIECE: &str = "piece";
pub const KIND_FEAS: &str = "feas";

/// Promised expected utilities, indexed `[t - 1][buyer][opponent profile]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct XiProfile {
    tables: Vec<Vec<Vec<f64>>>,
}

impl XiProfile {
    pub fn zeros(instance: &Instance) -> Self {
        let tables = (1..=instance.horizon())
            .map(|t| {
                let space = instance.period_space(t);
                (0..instance.buyers()).map(|i| vec![0.0; space.opp_len(i)]).collect()
            })
            .collect();
        Self { tables }
    }

    pub fn from_tables(instance: &Instance, tables: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let shape = Self::zeros(instance);
        let ok = tables.len() == shape.tables.len()
            && tables.iter().zip(&shape.tables).all(|(a, b)| {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len())
            });
        if !ok {
            return Err(Error::input("promise table shape does not match the instance"));
        }
        if tables.iter().flatten().flatten().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::input("promised utilities must be finite and nonnegative"));
        }
        Ok(Self { tables })
    }

    pub fn tables(&self) -> &[Vec<Vec<f64>>] {
        &self.tables
    }

    /// Promises of period `t` (1-based), indexed `[buyer][opponent profile]`.
    pub fn slice(&self, t: usize) -> &[Vec<f64>] {
        &self.tables[t - 1]
    }

    pub fn get(&self, t: usize, i: usize, o: usize) -> f64 {
        self.tables[t - 1][i][o]
    }

    pub fn set(&mut self, t: usize, i: usize, o: usize, value: f64) {
        self.tables[t - 1][i][o] = value;
    }

    /// `(t, i, o)` for every entry, in flattening order.
    pub fn entries(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for (tt, per) in self.tables.iter().enumerate() {
            for (i, row) in per.iter().enumerate() {
                for o in 0..row.len() {
                    out.push((tt + 1, i, o));
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.tables.iter().flatten().map(|r| r.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tables.iter().flatten().flatten().copied().collect()
    }

    pub fn with_flat(&self, flat: &[f64]) -> Self {
        let mut out = self.clone();
        let mut it = flat.iter();
        for row in out.tables.iter_mut().flatten() {
            for x in row.iter_mut() {
                *x = *it.next().expect("flat promise vector too short");
            }
        }
        out
    }
}

/// A built period program together with its variable layout.
#[derive(Clone, Debug)]
pub struct PeriodLp {
    pub model: LpModel,
    pub t: usize,
    pub balance: Vec<f64>,
    pub xi: Vec<Vec<f64>>,
    pub gbar: PwlConcaveFn,
    pub space: PeriodSpace,
    /// Column of `x_i(v)`, indexed `[profile][buyer]`.
    pub x_vars: Vec<Vec<usize>>,
    /// Column of the continuation variable per profile.
    pub g_vars: Vec<usize>,
}

impl PeriodLp {
    pub fn allocation_vars(&self) -> usize {
        self.x_vars.iter().map(|r| r.len()).sum()
    }

    pub fn continuation_vars(&self) -> usize {
        self.g_vars.len()
    }
}

fn check_inputs(instance: &Instance, t: usize, b: &[f64], xi: &[Vec<f64>], gbar: &PwlConcaveFn) -> Result<PeriodSpace> {
    if t == 0 || t > instance.horizon() {
        return Err(Error::input(format!("period {t} outside 1..={}", instance.horizon())));
    }
    let k = instance.buyers();
    if b.len() != k || b.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::input(format!("bad balance vector {b:?}")));
    }
    if gbar.dim() != k {
        return Err(Error::input("continuation function dimension does not match the buyer count"));
    }
    let space = instance.period_space(t);
    if xi.len() != k || (0..k).any(|i| xi[i].len() != space.opp_len(i)) {
        return Err(Error::input("promise slice shape does not match the period"));
    }
    if xi.iter().flatten().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::input("promised utilities must be finite and nonnegative"));
    }
    Ok(space)
}

/// Coefficients of `u'_i(p) - ubar'_i(o)` on the allocation column of `(i, o)`.
fn envelope_coeffs(space: &PeriodSpace, i: usize, p: usize) -> Vec<(usize, f64)> {
    let dist = space.dist(i);
    let o = space.opp(i, p);
    let m = space.indices(p)[i];
    space
        .column(i, o)
        .iter()
        .enumerate()
        .map(|(j, q)| {
            let below = if j < m { dist.gap(j) } else { 0.0 };
            (*q, below - dist.probs()[j] * dist.vartheta(j))
        })
        .collect()
}

pub fn build_period_lp(
    instance: &Instance,
    t: usize,
    b: &[f64],
    xi_slice: &[Vec<f64>],
    gbar: &PwlConcaveFn,
) -> Result<PeriodLp> {
    let space = check_inputs(instance, t, b, xi_slice, gbar)?;
    let k = instance.buyers();
    let n = space.len();
    let mut model = LpModel::new();
    let mut x_vars = Vec::with_capacity(n);
    for p in 0..n {
        let f = space.density(p);
        x_vars.push(
            (0..k)
                .map(|i| model.add_var(format!("x_{i}_{p}"), 0.0, f64::INFINITY, f * space.value(i, p)))
                .collect::<Vec<_>>(),
        );
    }
    let g_vars: Vec<usize> = (0..n)
        .map(|p| model.add_var(format!("g_{p}"), f64::NEG_INFINITY, f64::INFINITY, space.density(p)))
        .collect();
    let promised: f64 = (0..k)
        .map(|i| (0..space.opp_len(i)).map(|o| space.opp_density(i, o) * xi_slice[i][o]).sum::<f64>())
        .sum();
    model.add_objective_constant(-promised);

    for i in 0..k {
        let dist = space.dist(i);
        for o in 0..space.opp_len(i) {
            let col = space.column(i, o);
            for j in 0..col.len() - 1 {
                model.add_constraint(
                    ConstraintId::new(KIND_MONO, &[i, o, j]),
                    vec![(x_vars[col[j]][i], 1.0), (x_vars[col[j + 1]][i], -1.0)],
                    Sense::Le,
                    0.0,
                )?;
            }
            let coeffs = col
                .iter()
                .enumerate()
                .map(|(j, q)| (x_vars[*q][i], dist.probs()[j] * dist.vartheta(j)))
                .collect();
            model.add_constraint(
                ConstraintId::new(KIND_BALANCE, &[i, o]),
                coeffs,
                Sense::Le,
                b[i] + xi_slice[i][o],
            )?;
        }
    }
    let envelopes: Vec<Vec<Vec<(usize, f64)>>> =
        (0..n).map(|p| (0..k).map(|i| envelope_coeffs(&space, i, p)).collect()).collect();
    for (l, piece) in gbar.pieces().iter().enumerate() {
        for p in 0..n {
            let mut coeffs = vec![(g_vars[p], 1.0)];
            let mut rhs = piece.intercept;
            for i in 0..k {
                let a = piece.slope[i];
                rhs += a * (b[i] + xi_slice[i][space.opp(i, p)]);
                if a != 0.0 {
                    coeffs.extend(envelopes[p][i].iter().map(|(q, c)| (x_vars[*q][i], -a * c)));
                }
            }
            model.add_constraint(ConstraintId::new(KIND_PIECE, &[l, p]), coeffs, Sense::Le, rhs)?;
        }
    }
    for p in 0..n {
        let coeffs = (0..k).map(|i| (x_vars[p][i], 1.0)).collect();
        model.add_constraint(ConstraintId::new(KIND_FEAS, &[p]), coeffs, Sense::Le, 1.0)?;
    }
    Ok(PeriodLp {
        model,
        t,
        balance: b.to_vec(),
        xi: xi_slice.to_vec(),
        gbar: gbar.clone(),
        space,
        x_vars,
        g_vars,
    })
}

/// Primal and dual solution of one period program.
#[derive(Clone, Debug, Serialize)]
pub struct PeriodSolution {
    pub t: usize,
    pub balance: Vec<f64>,
    pub xi: Vec<Vec<f64>>,
    /// `[profile][buyer]`
    pub x: Vec<Vec<f64>>,
    /// `[buyer][opponent profile]`
    pub lambda: Vec<Vec<f64>>,
    /// `[profile]`
    pub mu: Vec<f64>,
    /// `[buyer][opponent profile][j]` for the pair of support points `(j, j + 1)`.
    pub eta: Vec<Vec<Vec<f64>>>,
    /// `[profile][piece]`
    pub nu: Vec<Vec<f64>>,
    pub objective: f64,
    /// `[profile][buyer]`
    pub delta_b: Vec<Vec<f64>>,
    /// `[profile][buyer]`
    pub u_prime: Vec<Vec<f64>>,
    /// `[buyer][opponent profile]`
    pub u_bar: Vec<Vec<f64>>,
    /// `[profile]`
    pub gbar_vals: Vec<f64>,
    /// Dual-weighted continuation slope `sum_l nu_l(v) a_l / f(v)`, `[profile][buyer]`.
    pub g_weight: Vec<Vec<f64>>,
    pub pivots: usize,
    #[serde(skip)]
    pub space: PeriodSpace,
}

impl PeriodSolution {
    /// Balance after the period for profile `p`.
    pub fn next_balance(&self, p: usize) -> Vec<f64> {
        self.balance.iter().zip(&self.delta_b[p]).map(|(b, d)| (b + d).max(0.0)).collect()
    }

    /// Supergradient of the optimal value with respect to the starting balances.
    pub fn balance_supergradient(&self) -> Vec<f64> {
        (0..self.balance.len())
            .map(|i| {
                let lam: f64 = self.lambda[i].iter().sum();
                let cont: f64 = (0..self.space.len()).map(|p| self.space.density(p) * self.g_weight[p][i]).sum();
                (lam + cont).max(0.0)
            })
            .collect()
    }

    /// `lambda_i(o) / f(o) + E_{v_i}[g_weight_i]`.
    pub fn beta(&self, i: usize, o: usize) -> f64 {
        let f = self.space.opp_density(i, o);
        let dist = self.space.dist(i);
        let mean: f64 = self
            .space
            .column(i, o)
            .iter()
            .enumerate()
            .map(|(j, p)| dist.probs()[j] * self.g_weight[*p][i])
            .sum();
        self.lambda[i][o] / f + mean
    }

    /// Derivative of the optimal value with respect to the promise `xi_i(o)`.
    pub fn xi_sensitivity(&self, i: usize, o: usize) -> f64 {
        (self.beta(i, o) - 1.0) * self.space.opp_density(i, o)
    }

    /// Realised period utility of buyer `i` at profile `p`.
    pub fn utility(&self, p: usize, i: usize) -> f64 {
        self.delta_b[p][i]
    }

    pub fn expected_revenue(&self, payments: &[Vec<f64>]) -> f64 {
        (0..self.space.len()).map(|p| self.space.density(p) * payments[p].iter().sum::<f64>()).sum()
    }
}

pub fn solve_period(lp: &PeriodLp) -> Result<PeriodSolution> {
    let sol = solve_lp(&lp.model);
    match sol.status {
        LpStatus::Optimal => {}
        s => {
            return Err(Error::Solver(format!(
                "period {} program at balance {:?} is {s:?}",
                lp.t, lp.balance
            )))
        }
    }
    let space = &lp.space;
    let k = lp.balance.len();
    let n = space.len();
    let x: Vec<Vec<f64>> = lp.x_vars.iter().map(|r| r.iter().map(|v| sol.primal[*v].max(0.0)).collect()).collect();
    let row = |kind: &str, idx: &[usize]| {
        let r = lp.model.row_of(&ConstraintId::new(kind, idx)).expect("constraint present");
        sol.duals[r].max(0.0)
    };
    let lambda: Vec<Vec<f64>> =
        (0..k).map(|i| (0..space.opp_len(i)).map(|o| row(KIND_BALANCE, &[i, o])).collect()).collect();
    let eta: Vec<Vec<Vec<f64>>> = (0..k)
        .map(|i| {
            (0..space.opp_len(i))
                .map(|o| (0..space.radix(i) - 1).map(|j| row(KIND_MONO, &[i, o, j])).collect())
                .collect()
        })
        .collect();
    let mu: Vec<f64> = (0..n).map(|p| row(KIND_FEAS, &[p])).collect();
    let pieces = lp.gbar.pieces();
    let nu: Vec<Vec<f64>> = (0..n).map(|p| (0..pieces.len()).map(|l| row(KIND_PIECE, &[l, p])).collect()).collect();
    let g_weight: Vec<Vec<f64>> = (0..n)
        .map(|p| {
            (0..k)
                .map(|i| pieces.iter().zip(&nu[p]).map(|(pc, w)| w * pc.slope[i]).sum::<f64>() / space.density(p))
                .collect()
        })
        .collect();
    let mut u_prime = vec![vec![0.0; k]; n];
    let mut u_bar: Vec<Vec<f64>> = (0..k).map(|i| vec![0.0; space.opp_len(i)]).collect();
    for i in 0..k {
        let dist = space.dist(i);
        for o in 0..space.opp_len(i) {
            let col = space.column(i, o);
            let mut acc = 0.0;
            let mut mean = 0.0;
            for (j, p) in col.iter().enumerate() {
                u_prime[*p][i] = acc;
                mean += dist.probs()[j] * acc;
                acc += x[*p][i] * dist.gap(j);
            }
            u_bar[i][o] = mean;
        }
    }
    let delta_b: Vec<Vec<f64>> = (0..n)
        .map(|p| (0..k).map(|i| {
            let o = space.opp(i, p);
            u_prime[p][i] - u_bar[i][o] + lp.xi[i][o]
        }).collect())
        .collect();
    let gbar_vals = lp.g_vars.iter().map(|v| sol.primal[*v]).collect();
    Ok(PeriodSolution {
        t: lp.t,
        balance: lp.balance.clone(),
        xi: lp.xi.clone(),
        x,
        lambda,
        mu,
        eta,
        nu,
        objective: sol.objective,
        delta_b,
        u_prime,
        u_bar,
        gbar_vals,
        g_weight,
        pivots: sol.pivots,
        space: space.clone(),
    })
}

/// Builds and solves in one step.
pub fn solve_period_at(
    instance: &Instance,
    t: usize,
    b: &[f64],
    xi_slice: &[Vec<f64>],
    gbar: &PwlConcaveFn,
) -> Result<PeriodSolution> {
    solve_period(&build_period_lp(instance, t, b, xi_slice, gbar)?)
}

/// `p_i(v) = v_i x_i(v) - u'_i(v) + ubar'_i(v_-i) - xi_i(v_-i)`, indexed `[profile][buyer]`.
pub fn payments_from_solution(sol: &PeriodSolution, xi_slice: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let space = &sol.space;
    (0..space.len())
        .map(|p| {
            (0..space.buyers())
                .map(|i| {
                    let o = space.opp(i, p);
                    space.value(i, p) * sol.x[p][i] - sol.u_prime[p][i] + sol.u_bar[i][o] - xi_slice[i][o]
                })
                .collect()
        })
        .collect()
}

/// Largest violations of the per-period mechanism properties.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct PeriodChecks {
    /// Gain from the best misreport against the same opponents.
    pub ic: f64,
    /// `|E_{v_i}[utility] - xi_i(v_-i)|`
    pub bi: f64,
    /// Violation of `0 <= b + delta_b <= b + utility`.
    pub bu: f64,
    /// `|objective - E[payments] - E[continuation]|`
    pub revenue_identity: f64,
    pub feasibility: f64,
    pub monotonicity: f64,
}

pub fn period_checks(sol: &PeriodSolution, payments: &[Vec<f64>]) -> PeriodChecks {
    let space = &sol.space;
    let mut c = PeriodChecks::default();
    for p in 0..space.len() {
        let total: f64 = sol.x[p].iter().sum();
        c.feasibility = c.feasibility.max(total - 1.0);
        for i in 0..space.buyers() {
            let u = space.value(i, p) * sol.x[p][i] - payments[p][i];
            let low = sol.balance[i] + sol.delta_b[p][i];
            c.bu = c.bu.max(-low).max(low - (sol.balance[i] + u));
        }
    }
    for i in 0..space.buyers() {
        let dist = space.dist(i);
        for o in 0..space.opp_len(i) {
            let col = space.column(i, o);
            let mut mean = 0.0;
            for (j, p) in col.iter().enumerate() {
                let vj = dist.support()[j];
                let truthful = vj * sol.x[*p][i] - payments[*p][i];
                mean += dist.probs()[j] * truthful;
                for q in col {
                    c.ic = c.ic.max(vj * sol.x[*q][i] - payments[*q][i] - truthful);
                }
                if j + 1 < col.len() {
                    c.monotonicity = c.monotonicity.max(sol.x[*p][i] - sol.x[col[j + 1]][i]);
                }
            }
            c.bi = c.bi.max((mean - sol.xi[i][o]).abs());
        }
    }
    let cont: f64 = (0..space.len()).map(|p| space.density(p) * sol.gbar_vals[p]).sum();
    c.revenue_identity = (sol.objective - sol.expected_revenue(payments) - cont).abs();
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::DiscreteDistribution;
    use crate::pwl::AffinePiece;
    use proptest::prelude::*;

    fn two_point(horizon: usize) -> Instance {
        Instance::iid(horizon, vec![DiscreteDistribution::uniform(vec![1.0, 2.0]).unwrap()]).unwrap()
    }

    fn zero_gbar(k: usize) -> PwlConcaveFn {
        PwlConcaveFn::zero(vec![0.0; k])
    }

    #[test]
    fn constraint_counts() {
        let inst = two_point(1);
        let lp = build_period_lp(&inst, 1, &[0.0], &[vec![0.0]], &zero_gbar(1)).unwrap();
        assert_eq!(lp.allocation_vars(), 2);
        assert_eq!(lp.model.count_kind(KIND_MONO), 1);
        assert_eq!(lp.model.count_kind(KIND_BALANCE), 1);
        assert_eq!(lp.model.count_kind(KIND_FEAS), 2);

        let d = DiscreteDistribution::uniform(vec![1.0, 3.0]).unwrap();
        let inst2 = Instance::iid(1, vec![d.clone(), d]).unwrap();
        let xi = vec![vec![0.0; 2], vec![0.0; 2]];
        let lp2 = build_period_lp(&inst2, 1, &[0.0, 0.0], &xi, &zero_gbar(2)).unwrap();
        assert_eq!(lp2.allocation_vars(), 8);
        assert_eq!(lp2.model.count_kind(KIND_FEAS), 4);
        assert_eq!(lp2.model.count_kind(KIND_MONO), 4);
        assert_eq!(lp2.model.count_kind(KIND_BALANCE), 4);

        let three = PwlConcaveFn::new(
            vec![
                AffinePiece { slope: vec![1.0], intercept: 0.0 },
                AffinePiece { slope: vec![0.5], intercept: 0.5 },
                AffinePiece { slope: vec![0.0], intercept: 1.5 },
            ],
            vec![4.0],
        )
        .unwrap();
        let lp3 = build_period_lp(&two_point(2), 1, &[0.0], &[vec![0.0]], &three).unwrap();
        assert_eq!(lp3.continuation_vars(), 2);
        assert_eq!(lp3.model.count_kind(KIND_PIECE), 6);
    }

    #[test]
    fn posted_price_at_zero_balance() {
        let inst = two_point(1);
        let sol = solve_period_at(&inst, 1, &[0.0], &[vec![0.0]], &zero_gbar(1)).unwrap();
        assert!((sol.objective - 1.0).abs() < 1e-12);
        assert!(sol.x[0][0].abs() < 1e-12 && (sol.x[1][0] - 1.0).abs() < 1e-12);
        let pay = payments_from_solution(&sol, &[vec![0.0]]);
        assert!(pay[0][0].abs() < 1e-12 && (pay[1][0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn slack_balance_allocates_everything() {
        let inst = two_point(1);
        let xi = [vec![0.5]];
        let sol = solve_period_at(&inst, 1, &[10.0], &xi, &zero_gbar(1)).unwrap();
        assert!((sol.objective - 1.0).abs() < 1e-12);
        assert!((sol.x[0][0] - 1.0).abs() < 1e-12 && (sol.x[1][0] - 1.0).abs() < 1e-12);
        let pay = payments_from_solution(&sol, &xi);
        assert!((pay[0][0] - 1.0).abs() < 1e-12 && (pay[1][0] - 1.0).abs() < 1e-12);
        assert!((sol.u_prime[1][0] - 1.0).abs() < 1e-12 && (sol.u_bar[0][0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn degenerate_type_extracts_everything() {
        let c = 3.0;
        let inst = Instance::iid(1, vec![DiscreteDistribution::degenerate(c).unwrap()]).unwrap();
        for (b, xi) in [(0.0, 0.0), (5.0, 1.0), (0.0, 2.5)] {
            let sol = solve_period_at(&inst, 1, &[b], &[vec![xi]], &zero_gbar(1)).unwrap();
            assert!((sol.objective - (c - xi)).abs() < 1e-12);
            let pay = payments_from_solution(&sol, &[vec![xi]]);
            assert!((pay[0][0] - (c - xi)).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let inst = two_point(1);
        assert!(build_period_lp(&inst, 2, &[0.0], &[vec![0.0]], &zero_gbar(1)).is_err());
        assert!(build_period_lp(&inst, 1, &[-1.0], &[vec![0.0]], &zero_gbar(1)).is_err());
        assert!(build_period_lp(&inst, 1, &[0.0], &[vec![-0.1]], &zero_gbar(1)).is_err());
        assert!(build_period_lp(&inst, 1, &[0.0], &[vec![0.0, 1.0]], &zero_gbar(1)).is_err());
    }

    fn arb_case() -> impl Strategy<Value = (Instance, Vec<f64>, Vec<Vec<f64>>, PwlConcaveFn)> {
        (0u64..10_000, proptest::collection::vec(0.0f64..3.0, 2), proptest::collection::vec(0.0f64..1.0, 6),
         proptest::collection::vec((0.0f64..1.5, 0.0f64..1.5, 0.0f64..4.0), 1..4))
            .prop_map(|(seed, b, xs, ps)| {
                let inst = Instance::random_shape(seed, 2, 2, 3);
                let space = inst.period_space(1);
                let xi: Vec<Vec<f64>> = (0..2)
                    .map(|i| (0..space.opp_len(i)).map(|o| xs[(i * 3 + o) % xs.len()]).collect())
                    .collect();
                let g = PwlConcaveFn::new(
                    ps.into_iter().map(|(a, c, d)| AffinePiece { slope: vec![a, c], intercept: d }).collect(),
                    vec![20.0, 20.0],
                )
                .unwrap();
                (inst, b, xi, g)
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn mechanism_properties_hold((inst, b, xi, g) in arb_case()) {
            let sol = solve_period_at(&inst, 1, &b, &xi, &g).unwrap();
            let pay = payments_from_solution(&sol, &xi);
            let c = period_checks(&sol, &pay);
            prop_assert!(c.ic <= 1e-8, "{:?}", c);
            prop_assert!(c.bi <= 1e-8, "{:?}", c);
            prop_assert!(c.bu <= 1e-8, "{:?}", c);
            prop_assert!(c.revenue_identity <= 1e-8, "{:?}", c);
            prop_assert!(c.feasibility <= 1e-8 && c.monotonicity <= 1e-8, "{:?}", c);
            // continuation duals carry the full profile weight
            for p in 0..sol.space.len() {
                let s: f64 = sol.nu[p].iter().sum();
                prop_assert!((s - sol.space.density(p)).abs() < 1e-9);
            }
        }

        #[test]
        fn supergradient_bounds_value_changes((inst, b, xi, g) in arb_case(), db in proptest::collection::vec(-0.5f64..0.5, 2)) {
            let sol = solve_period_at(&inst, 1, &b, &xi, &g).unwrap();
            let b2: Vec<f64> = b.iter().zip(&db).map(|(x, d)| (x + d).max(0.0)).collect();
            let sol2 = solve_period_at(&inst, 1, &b2, &xi, &g).unwrap();
            let grad = sol.balance_supergradient();
            let pred = sol.objective + grad.iter().zip(b2.iter().zip(&b)).map(|(gi, (x, y))| gi * (x - y)).sum::<f64>();
            prop_assert!(sol2.objective <= pred + 1e-8);
        }
    }
}
