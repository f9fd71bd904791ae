//! Promise optimisation: the revenue sensitivity to each promised utility and a
//! projected ascent that tunes the promises.

use serde::Serialize;

use crate::backward::{
    balance_distribution, compute_value_functions_with, PolicyCache, StackOptions, ValueFunctionStack,
};
use crate::error::{Error, Result};
use crate::instance::Instance;
use crate::lp::{solve_lp, ConstraintId, LpModel, Sense};
use crate::period::XiProfile;

/// Seed for Monte Carlo balance estimation when exhaustive enumeration is too large.
pub const GRADIENT_SEED: u64 = 0x5eed;
pub const GRADIENT_TOL: f64 = 1e-5;
pub const KKT_TOL: f64 = 1e-3;
const ARMIJO: f64 = 1e-4;
const MIN_STEP: f64 = 1e-10;
const DIRECTIONAL_STEP: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct XiGradient {
    /// `[t - 1][buyer][opponent profile]`, same shape as the promise table.
    pub entries: Vec<Vec<Vec<f64>>>,
    /// Balance-averaged `beta` per entry.
    pub expected_beta: Vec<Vec<Vec<f64>>>,
    /// `per_period[t - 1]`: reached starting balances with their probabilities.
    pub balances: Vec<Vec<(Vec<f64>, f64)>>,
    pub exact: bool,
}

impl XiGradient {
    pub fn flatten(&self) -> Vec<f64> {
        self.entries.iter().flatten().flatten().copied().collect()
    }

    pub fn get(&self, t: usize, i: usize, o: usize) -> f64 {
        self.entries[t - 1][i][o]
    }

    /// Gradient with the components that push a zero promise below zero removed.
    pub fn projected(&self, xi: &XiProfile) -> Vec<f64> {
        project(&self.flatten(), &xi.flatten())
    }

    pub fn projected_norm(&self, xi: &XiProfile) -> f64 {
        norm(&self.projected(xi))
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `(E_b[beta] - 1) f(o)` for every promise, with `E_b` over the starting balances
/// the stack's policy reaches. Where a balance sits on a kink of the next value
/// function the period duals are not unique; `beta` there is taken from the duals
/// that generated the pieces the previous period's solution is resting on, which
/// makes the result a supergradient of the revenue. Stacks without stored promise
/// slopes fall back to re-solving each reached period.
pub fn gradient_xi(instance: &Instance, stack: &ValueFunctionStack, xi: &XiProfile) -> Result<XiGradient> {
    let dist = balance_distribution(stack, instance, xi, GRADIENT_SEED)?;
    let consistent = stack.promise_supergradient();
    let mut cache = PolicyCache::new(stack, instance, xi);
    let mut flat = 0;
    let mut entries = Vec::with_capacity(instance.horizon());
    let mut expected_beta = Vec::with_capacity(instance.horizon());
    for t in 1..=instance.horizon() {
        let space = instance.period_space(t);
        let mut beta: Vec<Vec<f64>> = (0..instance.buyers()).map(|i| vec![0.0; space.opp_len(i)]).collect();
        if let Some(sg) = consistent {
            for (i, row) in beta.iter_mut().enumerate() {
                for (o, e) in row.iter_mut().enumerate() {
                    *e = 1.0 + sg[flat] / space.opp_density(i, o);
                    flat += 1;
                }
            }
        } else {
            let mut mass = 0.0;
            for (b, w) in &dist.per_period[t - 1] {
                let sol = cache.get(t, b)?;
                mass += w;
                for (i, row) in beta.iter_mut().enumerate() {
                    for (o, e) in row.iter_mut().enumerate() {
                        *e += w * sol.beta(i, o);
                    }
                }
            }
            for e in beta.iter_mut().flatten() {
                *e /= mass;
            }
        }
        let grad = beta
            .iter()
            .enumerate()
            .map(|(i, row)| row.iter().enumerate().map(|(o, b)| (b - 1.0) * space.opp_density(i, o)).collect())
            .collect();
        entries.push(grad);
        expected_beta.push(beta);
    }
    Ok(XiGradient { entries, expected_beta, balances: dist.per_period, exact: dist.exact })
}

#[derive(Clone, Debug)]
pub struct XiOptions {
    pub epsilon: f64,
    /// Per-stage tolerance; defaults to `epsilon / (2T)`.
    pub kappa: Option<f64>,
    pub max_steps: usize,
    /// Cutting-plane iterations after the ascent.
    pub polish_steps: usize,
}

impl XiOptions {
    pub fn new(epsilon: f64) -> Self {
        Self { epsilon, kappa: None, max_steps: 100, polish_steps: 40 }
    }

    pub fn stage_kappa(&self, instance: &Instance) -> f64 {
        self.kappa.unwrap_or(self.epsilon / (2.0 * instance.horizon() as f64))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TraceEntry {
    pub iterate: usize,
    pub phase: &'static str,
    pub revenue: f64,
    pub lower: f64,
    pub gradient_norm: f64,
    pub step: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct KktEntry {
    pub period: usize,
    pub buyer: usize,
    pub opponents: usize,
    pub xi: f64,
    pub expected_beta: f64,
    /// `1 + D/f` for the one-sided revenue derivatives `D` when raising and lowering
    /// the promise; `[right, left]` is the range of balance-averaged `beta` values
    /// consistent with the superdifferential.
    pub beta_right: Option<f64>,
    pub beta_left: Option<f64>,
    pub satisfied: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct KktReport {
    pub entries: Vec<KktEntry>,
    pub max_violation: f64,
}

impl KktReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.satisfied)
    }
}

fn beta_violation(x: f64, beta: f64) -> f64 {
    if x > 0.0 {
        (beta - 1.0).abs()
    } else {
        (beta - 1.0).max(0.0)
    }
}

/// Entrywise optimality: `E_b[beta] = 1` for a positive promise, `E_b[beta] <= 1`
/// for a zero promise, both within `KKT_TOL`.
pub fn kkt_report(xi: &XiProfile, grad: &XiGradient) -> KktReport {
    kkt_with_brackets(xi, grad, None)
}

fn kkt_with_brackets(xi: &XiProfile, grad: &XiGradient, brackets: Option<&[(f64, f64)]>) -> KktReport {
    let mut entries = Vec::new();
    let mut max_violation = 0.0f64;
    for (e, (t, i, o)) in xi.entries().into_iter().enumerate() {
        let x = xi.get(t, i, o);
        let beta = grad.expected_beta[t - 1][i][o];
        let mut violation = beta_violation(x, beta);
        let bracket = brackets.map(|b| b[e]);
        if let Some((right, left)) = bracket {
            // some beta in [right, left] meets the condition
            let best = if x > 0.0 { (right - 1.0).max(0.0) + (1.0 - left).max(0.0) } else { (right - 1.0).max(0.0) };
            violation = violation.min(best);
        }
        max_violation = max_violation.max(violation);
        entries.push(KktEntry {
            period: t,
            buyer: i,
            opponents: o,
            xi: x,
            expected_beta: beta,
            beta_right: bracket.map(|b| b.0),
            beta_left: bracket.map(|b| b.1),
            satisfied: violation <= KKT_TOL,
        });
    }
    KktReport { entries, max_violation }
}

#[derive(Clone, Debug)]
pub struct XiOptimization {
    pub xi: XiProfile,
    pub stack: ValueFunctionStack,
    /// Upper bound `upper_0(0)` at the returned promises.
    pub revenue: f64,
    pub gradient: XiGradient,
    pub kkt: KktReport,
    pub trace: Vec<TraceEntry>,
    pub evaluations: usize,
    /// Projected-gradient norm reached the tolerance during the ascent.
    pub converged: bool,
    pub warning: Option<String>,
}

impl XiOptimization {
    pub fn trace_jsonl(&self) -> String {
        self.trace.iter().map(|e| serde_json::to_string(e).expect("trace serialises") + "\n").collect()
    }
}

struct Point {
    xi: XiProfile,
    stack: ValueFunctionStack,
    grad: XiGradient,
    /// Supergradient chained through the fitted stages' own duals.
    cut: Vec<f64>,
    revenue: f64,
}

impl Point {
    fn projected_cut(&self) -> Vec<f64> {
        project(&self.cut, &self.xi.flatten())
    }
}

fn project(g: &[f64], x: &[f64]) -> Vec<f64> {
    g.iter().zip(x).map(|(g, x)| if *x <= 0.0 && *g < 0.0 { 0.0 } else { *g }).collect()
}

struct Evaluator<'a> {
    instance: &'a Instance,
    opts: StackOptions,
    count: usize,
}

impl Evaluator<'_> {
    fn eval(&mut self, xi: XiProfile) -> Result<Point> {
        self.count += 1;
        let stack = compute_value_functions_with(self.instance, &xi, &self.opts)?;
        let grad = gradient_xi(self.instance, &stack, &xi)?;
        let revenue = stack.root_upper();
        let cut = stack.promise_supergradient().map_or_else(|| grad.flatten(), <[f64]>::to_vec);
        Ok(Point { xi, stack, grad, cut, revenue })
    }
}

fn entry_bounds(instance: &Instance, xi: &XiProfile) -> Vec<f64> {
    xi.entries()
        .into_iter()
        .map(|(t, i, _)| (t..=instance.horizon()).map(|s| instance.dist(s, i).max()).sum())
        .collect()
}

/// Projected supergradient ascent on the promises from zero with Armijo
/// backtracking, followed by a cutting-plane polish over all evaluated points.
pub fn optimize_xi(instance: &Instance, epsilon: f64) -> Result<XiOptimization> {
    optimize_xi_with(instance, &XiOptions::new(epsilon))
}

pub fn optimize_xi_with(instance: &Instance, options: &XiOptions) -> Result<XiOptimization> {
    if !(options.epsilon > 0.0 && options.epsilon < 1.0) {
        return Err(Error::input("epsilon must lie in (0, 1)"));
    }
    let mut ev = Evaluator { instance, opts: StackOptions::new(options.stage_kappa(instance)), count: 0 };
    let bounds = entry_bounds(instance, &XiProfile::zeros(instance));
    let mut trace = Vec::new();
    let mut cuts: Vec<(Vec<f64>, f64, Vec<f64>)> = Vec::new();
    let mut best = ev.eval(XiProfile::zeros(instance))?;
    cuts.push((best.xi.flatten(), best.revenue, best.cut.clone()));
    let record = |trace: &mut Vec<TraceEntry>, phase, p: &Point, step, accepted| {
        trace.push(TraceEntry {
            iterate: trace.len(),
            phase,
            revenue: p.revenue,
            lower: p.stack.root_lower(),
            gradient_norm: norm(&p.projected_cut()),
            step,
            accepted,
        });
    };
    record(&mut trace, "start", &best, 0.0, true);

    let mut converged = false;
    let mut step = 1.0f64;
    for _ in 0..options.max_steps {
        let g = best.projected_cut();
        if norm(&g) <= GRADIENT_TOL {
            converged = true;
            break;
        }
        let x0 = best.xi.flatten();
        let mut s = step.min(1.0) * 2.0;
        let mut moved = false;
        while s >= MIN_STEP {
            s = s.min(1.0);
            let x1: Vec<f64> =
                x0.iter().zip(&g).zip(&bounds).map(|((x, d), ub)| (x + s * d).clamp(0.0, *ub)).collect();
            let dir: f64 = x1.iter().zip(&x0).zip(&g).map(|((a, b), d)| (a - b) * d).sum();
            if dir <= 0.0 {
                break;
            }
            let cand = ev.eval(best.xi.with_flat(&x1))?;
            cuts.push((x1, cand.revenue, cand.cut.clone()));
            let ok = cand.revenue >= best.revenue + ARMIJO * dir;
            record(&mut trace, "ascent", &cand, s, ok);
            if ok {
                best = cand;
                step = s;
                moved = true;
                break;
            }
            s *= 0.5;
        }
        if !moved {
            break;
        }
    }

    for _ in 0..options.polish_steps {
        let Some((target, model_value)) = kelley_point(&cuts, &bounds) else { break };
        if model_value - best.revenue <= 1e-9 * best.revenue.abs().max(1.0) {
            break;
        }
        let cand = ev.eval(best.xi.with_flat(&target))?;
        cuts.push((target, cand.revenue, cand.cut.clone()));
        let ok = cand.revenue > best.revenue;
        record(&mut trace, "polish", &cand, 0.0, ok);
        if ok {
            best = cand;
        }
    }

    let final_norm = norm(&best.projected_cut());
    converged |= final_norm <= GRADIENT_TOL;
    let mut kkt = kkt_report(&best.xi, &best.grad);
    if !kkt.passed() {
        let brackets = one_sided_betas(&mut ev, &best)?;
        kkt = kkt_with_brackets(&best.xi, &best.grad, Some(&brackets));
    }
    let warning = (!converged && !kkt.passed()).then(|| {
        format!(
            "promise search stopped with projected gradient norm {final_norm:.3e} and optimality violation {:.3e}",
            kkt.max_violation
        )
    });
    Ok(XiOptimization {
        revenue: best.revenue,
        xi: best.xi,
        stack: best.stack,
        gradient: best.grad,
        kkt,
        trace,
        evaluations: ev.count,
        converged,
        warning,
    })
}

/// `(1 + D+/f, 1 + D-/f)` per entry from one-sided differences of the revenue.
fn one_sided_betas(ev: &mut Evaluator, at: &Point) -> Result<Vec<(f64, f64)>> {
    let x0 = at.xi.flatten();
    let mut out = Vec::with_capacity(x0.len());
    for (e, (t, i, o)) in at.xi.entries().into_iter().enumerate() {
        let f = ev.instance.period_space(t).opp_density(i, o);
        let mut shifted = |delta: f64| -> Result<f64> {
            let mut x = x0.clone();
            x[e] += delta;
            Ok((ev.eval(at.xi.with_flat(&x))?.revenue - at.revenue) / delta)
        };
        let right = shifted(DIRECTIONAL_STEP)?;
        let left = if x0[e] >= DIRECTIONAL_STEP { shifted(-DIRECTIONAL_STEP)? } else { f64::INFINITY };
        out.push((1.0 + right / f, 1.0 + left / f));
    }
    Ok(out)
}

/// Maximiser of the cutting-plane model `min_j (r_j + g_j . (x - x_j))` on the box.
fn kelley_point(cuts: &[(Vec<f64>, f64, Vec<f64>)], bounds: &[f64]) -> Option<(Vec<f64>, f64)> {
    let n = bounds.len();
    let mut model = LpModel::new();
    let xs: Vec<usize> = (0..n).map(|e| model.add_var(format!("xi{e}"), 0.0, bounds[e], 0.0)).collect();
    let z = model.add_var("z", f64::NEG_INFINITY, f64::INFINITY, 1.0);
    for (j, (x, r, g)) in cuts.iter().enumerate() {
        let mut coeffs: Vec<(usize, f64)> = xs.iter().zip(g).map(|(v, c)| (*v, -c)).collect();
        coeffs.push((z, 1.0));
        let rhs = r - x.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
        model.add_constraint(ConstraintId::new("cut", &[j]), coeffs, Sense::Le, rhs).ok()?;
    }
    let sol = solve_lp(&model);
    if !sol.is_optimal() {
        return None;
    }
    let point = xs.iter().zip(bounds).map(|(v, ub)| sol.primal[*v].clamp(0.0, *ub)).collect();
    Some((point, sol.objective))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backward::compute_value_functions;
    use crate::instance::DiscreteDistribution;

    fn two_point(horizon: usize) -> Instance {
        Instance::iid(horizon, vec![DiscreteDistribution::uniform(vec![1.0, 2.0]).unwrap()]).unwrap()
    }

    fn revenue(inst: &Instance, xi: &XiProfile) -> f64 {
        compute_value_functions(inst, xi, 1e-9).unwrap().root_upper()
    }

    #[test]
    fn last_period_slack_gradient_is_minus_density() {
        let inst = Instance::random_shape(3, 2, 1, 3);
        let mut xi = XiProfile::zeros(&inst);
        for (t, i, o) in xi.entries() {
            xi.set(t, i, o, 50.0);
        }
        let stack = compute_value_functions(&inst, &xi, 1e-3).unwrap();
        let g = gradient_xi(&inst, &stack, &xi).unwrap();
        let space = inst.period_space(1);
        for (t, i, o) in xi.entries() {
            assert!((g.get(t, i, o) + space.opp_density(i, o)).abs() < 1e-9);
        }
        assert!(g.exact);
    }

    #[test]
    fn matches_central_differences() {
        let inst = two_point(2);
        let mut xi = XiProfile::zeros(&inst);
        xi.set(1, 0, 0, 0.3);
        xi.set(2, 0, 0, 0.2);
        let stack = compute_value_functions(&inst, &xi, 1e-9).unwrap();
        let g = gradient_xi(&inst, &stack, &xi).unwrap();
        let d = 1e-4;
        for (t, i, o) in xi.entries() {
            let mut up = xi.clone();
            up.set(t, i, o, xi.get(t, i, o) + d);
            let mut dn = xi.clone();
            dn.set(t, i, o, xi.get(t, i, o) - d);
            let (r0, r1, r2) = (revenue(&inst, &dn), revenue(&inst, &xi), revenue(&inst, &up));
            if ((r2 - r1) / d - (r1 - r0) / d).abs() > 1e-3 {
                continue;
            }
            let fd = (r2 - r0) / (2.0 * d);
            let want = g.get(t, i, o);
            assert!((fd - want).abs() <= 1e-3 * want.abs().max(1e-3), "{t} {i} {o}: fd {fd} formula {want}");
        }
    }

    #[test]
    fn deterministic_revenue_is_full_extraction() {
        let c = 1.5;
        let inst = Instance::iid(2, vec![DiscreteDistribution::degenerate(c).unwrap()]).unwrap();
        let out = optimize_xi(&inst, 0.01).unwrap();
        assert!((out.revenue - 2.0 * c).abs() < 1e-9);
        assert!((out.stack.root_lower() - 2.0 * c).abs() < 1e-9);
    }

    #[test]
    fn canonical_reaches_oracle() {
        let inst = two_point(2);
        let out = optimize_xi(&inst, 0.01).unwrap();
        let lower = out.stack.root_lower();
        assert!(lower >= 2.0 - 1e-9, "lower {lower}");
        assert!(out.revenue >= 2.25 - 1e-7 && lower >= 0.99 * 2.25, "{} {lower}", out.revenue);
        assert!(lower <= 2.25 + 1e-9, "{lower}");
        for w in out.trace.iter().filter(|e| e.accepted).collect::<Vec<_>>().windows(2) {
            assert!(w[1].revenue >= w[0].revenue);
        }
        assert!(out.trace_jsonl().lines().count() == out.trace.len());
    }

    #[test]
    fn single_period_promise_pays_rent_only_if_profitable() {
        let inst = two_point(1);
        let out = optimize_xi(&inst, 0.01).unwrap();
        assert!((out.revenue - 1.0).abs() < 1e-9);
        assert!(out.kkt.passed(), "{:?}", out.kkt);
    }

    #[test]
    fn rejects_bad_epsilon() {
        assert!(optimize_xi(&two_point(1), 0.0).is_err());
        assert!(optimize_xi(&two_point(1), 1.5).is_err());
    }
}
