//! Independent benchmarks: the optimal dynamic mechanism as one LP over full
//! report histories, and the static optimum repeated every period.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::{Instance, PeriodSpace};
use crate::lp::{solve_lp, ConstraintId, LpModel, LpStatus, Sense};

pub const HISTORY_LIMIT: usize = 100_000;

/// History-indexed tables: `x[t - 1][history][buyer]`, `p` likewise. A period-`t`
/// history index is `prefix * |V^t| + profile`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OracleSolution {
    pub revenue: f64,
    pub x: Vec<Vec<Vec<f64>>>,
    pub p: Vec<Vec<Vec<f64>>>,
    pub residuals: OracleResiduals,
    pub histories: usize,
    pub constraints: usize,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct OracleResiduals {
    pub dic: f64,
    pub epir: f64,
    pub feasibility: f64,
}

impl OracleSolution {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("oracle solution serialises")
    }
}

pub fn history_count(instance: &Instance) -> usize {
    let mut total = 0usize;
    let mut n = 1usize;
    for t in 1..=instance.horizon() {
        n = n.saturating_mul(instance.period_space(t).len());
        total = total.saturating_add(n);
    }
    total
}

struct Layout {
    spaces: Vec<PeriodSpace>,
    /// `x[t - 1][h][i]` column indices.
    x: Vec<Vec<Vec<usize>>>,
    p: Vec<Vec<Vec<usize>>>,
}

impl Layout {
    fn space(&self, t: usize) -> &PeriodSpace {
        &self.spaces[t - 1]
    }

    /// Expected utility terms of buyer `i` from periods after `t`, reporting truthfully,
    /// after period-`t` history `h` while the others follow `others[tau - t - 1]`.
    fn continuation(&self, t: usize, h: usize, i: usize, others: &[usize], out: &mut Vec<(usize, f64)>, weight: f64) {
        let horizon = self.spaces.len();
        if t == horizon {
            return;
        }
        let tau = t + 1;
        let space = self.space(tau);
        let dist = space.dist(i);
        let col = space.column(i, others[0]);
        for (j, prof) in col.iter().enumerate() {
            let w = weight * dist.probs()[j];
            let hn = h * space.len() + prof;
            out.push((self.x[tau - 1][hn][i], w * dist.support()[j]));
            out.push((self.p[tau - 1][hn][i], -w));
            self.continuation(tau, hn, i, &others[1..], out, w);
        }
    }
}

/// All sequences in a mixed-radix product, first coordinate fastest.
fn product(radices: &[usize]) -> Vec<Vec<usize>> {
    let total: usize = radices.iter().product();
    (0..total)
        .map(|mut n| {
            radices
                .iter()
                .map(|r| {
                    let d = n % r;
                    n /= r;
                    d
                })
                .collect()
        })
        .collect()
}

fn merge(mut terms: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    terms.sort_by_key(|t| t.0);
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(terms.len());
    for (c, a) in terms {
        match out.last_mut() {
            Some(l) if l.0 == c => l.1 += a,
            _ => out.push((c, a)),
        }
    }
    out
}

/// Maximises expected revenue over all history-dependent mechanisms subject to
/// one-shot-deviation incentive compatibility (for every report prefix and every
/// path of the others' reports), ex-post individual rationality on every complete
/// path, and per-period feasibility.
pub fn solve_full_history_lp(instance: &Instance) -> Result<OracleSolution> {
    let histories = history_count(instance);
    if histories > HISTORY_LIMIT {
        return Err(Error::OracleGuard { histories, limit: HISTORY_LIMIT });
    }
    let horizon = instance.horizon();
    let k = instance.buyers();
    let spaces: Vec<PeriodSpace> = (1..=horizon).map(|t| instance.period_space(t)).collect();
    let mut model = LpModel::new();
    let mut counts = Vec::with_capacity(horizon);
    let mut n = 1usize;
    for s in &spaces {
        n *= s.len();
        counts.push(n);
    }
    let mut x = Vec::with_capacity(horizon);
    let mut p = Vec::with_capacity(horizon);
    for t in 1..=horizon {
        let mut xt = Vec::with_capacity(counts[t - 1]);
        let mut pt = Vec::with_capacity(counts[t - 1]);
        for h in 0..counts[t - 1] {
            let prob = history_probability(&spaces, t, h);
            xt.push((0..k).map(|i| model.add_var(format!("x_{t}_{h}_{i}"), 0.0, 1.0, 0.0)).collect::<Vec<_>>());
            pt.push(
                (0..k)
                    .map(|i| model.add_var(format!("p_{t}_{h}_{i}"), f64::NEG_INFINITY, f64::INFINITY, prob))
                    .collect::<Vec<_>>(),
            );
        }
        x.push(xt);
        p.push(pt);
    }
    let layout = Layout { spaces, x, p };

    for t in 1..=horizon {
        let space = layout.space(t);
        let prefixes = if t == 1 { 1 } else { counts[t - 2] };
        for h in 0..counts[t - 1] {
            let coeffs = (0..k).map(|i| (layout.x[t - 1][h][i], 1.0)).collect();
            model.add_constraint(ConstraintId::new("feas", &[t, h]), coeffs, Sense::Le, 1.0)?;
        }
        for i in 0..k {
            let future: Vec<usize> = (t + 1..=horizon).map(|tau| layout.space(tau).opp_len(i)).collect();
            let paths = product(&future);
            let dist = space.dist(i);
            for prefix in 0..prefixes {
                for o in 0..space.opp_len(i) {
                    let col = space.column(i, o);
                    for (w_idx, w) in paths.iter().enumerate() {
                        let mut cont = Vec::with_capacity(col.len());
                        for prof in col {
                            let h = prefix * space.len() + prof;
                            let mut terms = Vec::new();
                            layout.continuation(t, h, i, w, &mut terms, 1.0);
                            cont.push((h, terms));
                        }
                        for (j, (h_true, cont_true)) in cont.iter().enumerate() {
                            let v = dist.support()[j];
                            for (jd, (h_dev, cont_dev)) in cont.iter().enumerate() {
                                if jd == j {
                                    continue;
                                }
                                let mut terms = vec![
                                    (layout.x[t - 1][*h_true][i], v),
                                    (layout.p[t - 1][*h_true][i], -1.0),
                                    (layout.x[t - 1][*h_dev][i], -v),
                                    (layout.p[t - 1][*h_dev][i], 1.0),
                                ];
                                terms.extend(cont_true.iter().copied());
                                terms.extend(cont_dev.iter().map(|(c, a)| (*c, -a)));
                                model.add_constraint(
                                    ConstraintId::new("dic", &[t, i, prefix, o, w_idx, j, jd]),
                                    merge(terms),
                                    Sense::Ge,
                                    0.0,
                                )?;
                            }
                        }
                    }
                }
            }
        }
    }
    let full = counts[horizon - 1];
    for h in 0..full {
        for i in 0..k {
            let mut terms = Vec::with_capacity(2 * horizon);
            let mut rest = h;
            for t in (1..=horizon).rev() {
                let space = layout.space(t);
                let prof = rest % space.len();
                terms.push((layout.x[t - 1][rest][i], space.value(i, prof)));
                terms.push((layout.p[t - 1][rest][i], -1.0));
                rest /= space.len();
            }
            model.add_constraint(ConstraintId::new("epir", &[h, i]), terms, Sense::Ge, 0.0)?;
        }
    }

    let sol = solve_lp(&model);
    if sol.status != LpStatus::Optimal {
        return Err(Error::Solver(format!("full-history program is {:?}", sol.status)));
    }
    let act = model.activities(&sol.primal);
    let mut residuals = OracleResiduals::default();
    for (row, a) in model.constraints().iter().zip(&act) {
        let viol = match row.sense {
            Sense::Le => a - row.rhs,
            Sense::Ge => row.rhs - a,
            Sense::Eq => (a - row.rhs).abs(),
        }
        .max(0.0);
        match row.id.kind.as_str() {
            "dic" => residuals.dic = residuals.dic.max(viol),
            "epir" => residuals.epir = residuals.epir.max(viol),
            _ => residuals.feasibility = residuals.feasibility.max(viol),
        }
    }
    let table = |cols: &Vec<Vec<Vec<usize>>>| -> Vec<Vec<Vec<f64>>> {
        cols.iter().map(|per| per.iter().map(|r| r.iter().map(|c| sol.primal[*c]).collect()).collect()).collect()
    };
    Ok(OracleSolution {
        revenue: sol.objective,
        x: table(&layout.x),
        p: table(&layout.p),
        residuals,
        histories,
        constraints: model.constraints().len(),
    })
}

fn history_probability(spaces: &[PeriodSpace], t: usize, h: usize) -> f64 {
    let mut prob = 1.0;
    let mut rest = h;
    for s in spaces[..t].iter().rev() {
        prob *= s.density(rest % s.len());
        rest /= s.len();
    }
    prob
}

/// Largest expected gain, over buyers and over the others' report paths, of an
/// arbitrary history-contingent reporting strategy compared with truth-telling.
/// Computed by backward dynamic programming over report histories.
pub fn strategic_gain(instance: &Instance, sol: &OracleSolution) -> f64 {
    let horizon = instance.horizon();
    let spaces: Vec<PeriodSpace> = (1..=horizon).map(|t| instance.period_space(t)).collect();
    let mut worst = 0.0f64;
    for i in 0..instance.buyers() {
        let radices: Vec<usize> = spaces.iter().map(|s| s.opp_len(i)).collect();
        for others in product(&radices) {
            let best = value(&spaces, sol, i, &others, 1, 0, true);
            let truthful = value(&spaces, sol, i, &others, 1, 0, false);
            worst = worst.max(best - truthful);
        }
    }
    worst
}

fn value(spaces: &[PeriodSpace], sol: &OracleSolution, i: usize, others: &[usize], t: usize, prefix: usize, best: bool) -> f64 {
    if t > spaces.len() {
        return 0.0;
    }
    let space = &spaces[t - 1];
    let dist = space.dist(i);
    let col = space.column(i, others[t - 1]);
    let cont: Vec<f64> = col
        .iter()
        .map(|prof| value(spaces, sol, i, others, t + 1, prefix * space.len() + prof, best))
        .collect();
    let mut total = 0.0;
    for j in 0..col.len() {
        let v = dist.support()[j];
        let payoff = |r: usize| {
            let h = prefix * space.len() + col[r];
            v * sol.x[t - 1][h][i] - sol.p[t - 1][h][i] + cont[r]
        };
        let u = if best { (0..col.len()).map(payoff).fold(f64::NEG_INFINITY, f64::max) } else { payoff(j) };
        total += dist.probs()[j] * u;
    }
    total
}

/// Optimal single-period revenue of period `t`: maximises expected discrete
/// virtual welfare over monotone feasible allocations.
pub fn myerson_period_revenue(instance: &Instance, t: usize) -> Result<f64> {
    let space = instance.period_space(t);
    let k = instance.buyers();
    let mut model = LpModel::new();
    let vars: Vec<Vec<usize>> = (0..space.len())
        .map(|p| {
            (0..k)
                .map(|i| {
                    let dist = space.dist(i);
                    let j = space.indices(p)[i];
                    let phi = dist.support()[j] - dist.vartheta(j);
                    model.add_var(format!("x_{i}_{p}"), 0.0, f64::INFINITY, space.density(p) * phi)
                })
                .collect()
        })
        .collect();
    for i in 0..k {
        for o in 0..space.opp_len(i) {
            let col = space.column(i, o);
            for j in 0..col.len() - 1 {
                model.add_constraint(
                    ConstraintId::new("mono", &[i, o, j]),
                    vec![(vars[col[j]][i], 1.0), (vars[col[j + 1]][i], -1.0)],
                    Sense::Le,
                    0.0,
                )?;
            }
        }
    }
    for (p, row) in vars.iter().enumerate() {
        model.add_constraint(ConstraintId::new("feas", &[p]), row.iter().map(|c| (*c, 1.0)).collect(), Sense::Le, 1.0)?;
    }
    let sol = solve_lp(&model);
    if sol.status != LpStatus::Optimal {
        return Err(Error::Solver(format!("static program for period {t} is {:?}", sol.status)));
    }
    Ok(sol.objective)
}

/// Sum over periods of the optimal static revenue.
pub fn repeated_myerson_revenue(instance: &Instance) -> Result<f64> {
    (1..=instance.horizon()).map(|t| myerson_period_revenue(instance, t)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::DiscreteDistribution;

    fn two_point(horizon: usize) -> Instance {
        Instance::iid(horizon, vec![DiscreteDistribution::uniform(vec![1.0, 2.0]).unwrap()]).unwrap()
    }

    #[test]
    fn one_period_matches_posted_price() {
        let sol = solve_full_history_lp(&two_point(1)).unwrap();
        assert!((sol.revenue - 1.0).abs() < 1e-9);
        assert!((repeated_myerson_revenue(&two_point(1)).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_period_canonical_bounds() {
        let inst = two_point(2);
        let sol = solve_full_history_lp(&inst).unwrap();
        assert!(sol.revenue >= 2.0 - 1e-9 && sol.revenue <= 3.0 + 1e-9, "{}", sol.revenue);
        assert!(sol.residuals.dic <= 1e-8 && sol.residuals.epir <= 1e-8 && sol.residuals.feasibility <= 1e-8);
        assert!((repeated_myerson_revenue(&inst).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic_full_extraction() {
        let c = 1.75;
        for horizon in 1..=3 {
            let inst = Instance::iid(horizon, vec![DiscreteDistribution::degenerate(c).unwrap()]).unwrap();
            let sol = solve_full_history_lp(&inst).unwrap();
            assert!((sol.revenue - c * horizon as f64).abs() < 1e-9);
            assert!((repeated_myerson_revenue(&inst).unwrap() - c * horizon as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn guard_refuses_large_instances() {
        let d = DiscreteDistribution::uniform(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let inst = Instance::iid(5, vec![d.clone(), d]).unwrap();
        assert!(matches!(solve_full_history_lp(&inst), Err(Error::OracleGuard { .. })));
    }

    /// Best deterministic monotone allocation by enumeration, scored by virtual welfare.
    fn enumerate_static(instance: &Instance, t: usize) -> f64 {
        let space = instance.period_space(t);
        let k = instance.buyers();
        let n = space.len();
        let options = k + 1;
        let mut best = f64::NEG_INFINITY;
        let total = options.pow(n as u32);
        for code in 0..total {
            let mut c = code;
            let winner: Vec<usize> = (0..n).map(|_| { let w = c % options; c /= options; w }).collect();
            let alloc = |p: usize, i: usize| if winner[p] == i + 1 { 1.0 } else { 0.0 };
            let monotone = (0..k).all(|i| {
                (0..space.opp_len(i)).all(|o| space.column(i, o).windows(2).all(|w| alloc(w[0], i) <= alloc(w[1], i)))
            });
            if !monotone {
                continue;
            }
            let rev: f64 = (0..n)
                .map(|p| {
                    (0..k)
                        .map(|i| {
                            let d = space.dist(i);
                            let j = space.indices(p)[i];
                            space.density(p) * (d.support()[j] - d.vartheta(j)) * alloc(p, i)
                        })
                        .sum::<f64>()
                })
                .sum();
            best = best.max(rev);
        }
        best
    }

    #[test]
    fn static_optimum_matches_enumeration() {
        let a = DiscreteDistribution::new(vec![1.0, 3.0], vec![0.6, 0.4]).unwrap();
        let b = DiscreteDistribution::new(vec![2.0, 4.0, 5.0], vec![0.3, 0.3, 0.4]).unwrap();
        let inst = Instance::new(1, 2, vec![vec![a, b]]).unwrap();
        let lp = myerson_period_revenue(&inst, 1).unwrap();
        assert!((lp - enumerate_static(&inst, 1)).abs() < 1e-9);
        for seed in 0..10 {
            let inst = Instance::random_shape(seed, 2, 1, 3);
            let lp = myerson_period_revenue(&inst, 1).unwrap();
            assert!((lp - enumerate_static(&inst, 1)).abs() < 1e-9, "seed {seed}");
        }
    }

    #[test]
    fn oracle_orders_and_resists_multi_period_deviations() {
        for seed in 0..6 {
            let inst = Instance::random(seed, 2, 2, 3);
            let sol = solve_full_history_lp(&inst).unwrap();
            let myerson = repeated_myerson_revenue(&inst).unwrap();
            assert!(sol.revenue >= myerson - 1e-8, "seed {seed}");
            assert!(sol.revenue <= inst.total_surplus() + 1e-8, "seed {seed}");
            assert!(sol.residuals.dic <= 1e-8 && sol.residuals.epir <= 1e-8);
            assert!(strategic_gain(&inst, &sol) <= 1e-7, "seed {seed}");
        }
    }

    #[test]
    fn json_export() {
        let sol = solve_full_history_lp(&two_point(1)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&sol.to_json()).unwrap();
        assert!(v["revenue"].as_f64().is_some());
    }
}
