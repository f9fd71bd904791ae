//! Backward induction over periods: a lower and an upper concave approximation of
//! the continuation revenue after every period, fitted by sandwich sampling.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::Instance;
use crate::period::{solve_period_at, PeriodSolution, XiProfile};
use crate::pwl::{adaptive_sandwich, fit_upper, AffinePiece, PwlConcaveFn, SandwichOptions, SandwichSample};

/// Exhaustive balance enumeration is used up to this many value paths.
pub const EXHAUSTIVE_PATH_LIMIT: usize = 1_000_000;
pub const MONTE_CARLO_PATHS: usize = 100_000;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageFit {
    pub t: usize,
    pub lower: PwlConcaveFn,
    pub upper: PwlConcaveFn,
    /// Exact maximum of `upper - lower` over the stage box.
    pub max_gap: f64,
    pub target_gap: f64,
    pub max_value: f64,
    pub samples: usize,
    pub rounds: usize,
    pub converged: bool,
    pub lp_solves: usize,
    pub pivots: usize,
    /// Per upper piece, the slope of that tangent in the flattened promises of later
    /// periods, taken from the same dual solution as its balance slope.
    #[serde(default)]
    pub xi_slopes: Vec<Vec<f64>>,
}

/// Fitted continuation revenue for every stage `t = 0..=T`, where stage `t` is a
/// function of the balances at the end of period `t`. Stage `T` is identically
/// zero and stage `0` is only evaluated at the zero root balance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValueFunctionStack {
    pub horizon: usize,
    pub buyers: usize,
    pub kappa: f64,
    pub xi: XiProfile,
    pub stages: Vec<StageFit>,
}

#[derive(Clone, Debug)]
pub struct StackOptions {
    pub kappa: f64,
    pub max_samples: usize,
    pub max_rounds: usize,
    pub batch: usize,
}

impl StackOptions {
    pub fn new(kappa: f64) -> Self {
        let s = SandwichOptions::new(kappa);
        Self { kappa, max_samples: s.max_samples, max_rounds: s.max_rounds, batch: s.batch }
    }
}

/// Per-stage balance box: balances after period `t` never exceed the accumulated
/// value ranges plus the accumulated largest promises.
pub fn stage_boxes(instance: &Instance, xi: &XiProfile) -> Vec<Vec<f64>> {
    let k = instance.buyers();
    let mut boxes = vec![vec![0.0; k]];
    for t in 1..=instance.horizon() {
        let prev = boxes[t - 1].clone();
        let next = (0..k)
            .map(|i| {
                let top_xi = xi.slice(t)[i].iter().fold(0.0f64, |a, b| a.max(*b));
                prev[i] + instance.dist(t, i).range() + top_xi
            })
            .collect();
        boxes.push(next);
    }
    boxes
}

pub fn compute_value_functions(instance: &Instance, xi: &XiProfile, kappa: f64) -> Result<ValueFunctionStack> {
    compute_value_functions_with(instance, xi, &StackOptions::new(kappa))
}

pub fn compute_value_functions_with(
    instance: &Instance,
    xi: &XiProfile,
    opts: &StackOptions,
) -> Result<ValueFunctionStack> {
    if !(opts.kappa > 0.0) || !opts.kappa.is_finite() {
        return Err(Error::input("kappa must be positive"));
    }
    if xi != &XiProfile::from_tables(instance, xi.tables().to_vec())? {
        return Err(Error::input("promise table does not match the instance"));
    }
    let horizon = instance.horizon();
    let boxes = stage_boxes(instance, xi);
    let mut stages: Vec<Option<StageFit>> = vec![None; horizon + 1];
    stages[horizon] = Some(StageFit {
        t: horizon,
        lower: PwlConcaveFn::zero(boxes[horizon].clone()),
        upper: PwlConcaveFn::zero(boxes[horizon].clone()),
        max_gap: 0.0,
        target_gap: 0.0,
        max_value: 0.0,
        samples: 0,
        rounds: 0,
        converged: true,
        lp_solves: 0,
        pivots: 0,
        xi_slopes: vec![vec![0.0; xi.len()]],
    });
    let offsets = promise_offsets(xi);
    for t in (0..horizon).rev() {
        let next = stages[t + 1].as_ref().expect("later stage fitted");
        let exact_next = next.lower == next.upper;
        let mut lp_solves = 0usize;
        let mut pivots = 0usize;
        let mut records: Vec<(AffinePiece, Vec<f64>)> = Vec::new();
        let mut evaluate = |b: &[f64]| -> Result<SandwichSample> {
            let hi = solve_period_at(instance, t + 1, b, xi.slice(t + 1), &next.upper)?;
            lp_solves += 1;
            pivots += hi.pivots;
            let supergradient = hi.balance_supergradient();
            records.push((tangent_piece(b, hi.objective, &supergradient), promise_slopes(&hi, next, &offsets[t])));
            let lower = if exact_next {
                hi.objective
            } else {
                let lo = solve_period_at(instance, t + 1, b, xi.slice(t + 1), &next.lower)?;
                lp_solves += 1;
                pivots += lo.pivots;
                lo.objective
            };
            Ok(SandwichSample { upper: hi.objective, supergradient, lower })
        };
        let fit = if t == 0 {
            let root = vec![0.0; instance.buyers()];
            let s = evaluate(&root)?;
            let upper = fit_upper(&[(root.clone(), s.upper, s.supergradient)], &boxes[0])?;
            let lower = PwlConcaveFn::constant(s.lower.min(s.upper), boxes[0].clone());
            StageFit {
                t,
                max_gap: (s.upper - s.lower).max(0.0),
                target_gap: next.max_gap + opts.kappa * s.upper.max(0.0) + 1e-9,
                max_value: s.upper,
                lower,
                upper,
                samples: 1,
                rounds: 1,
                converged: true,
                lp_solves: 0,
                pivots: 0,
                xi_slopes: Vec::new(),
            }
        } else {
            let sopts = SandwichOptions {
                kappa: opts.kappa,
                inherited_gap: next.max_gap,
                max_samples: opts.max_samples,
                max_rounds: opts.max_rounds,
                batch: opts.batch,
            };
            let f = adaptive_sandwich(&mut evaluate, &boxes[t], &sopts)?;
            StageFit {
                t,
                lower: f.lower,
                upper: f.upper,
                max_gap: f.max_gap,
                target_gap: f.target_gap,
                max_value: f.max_value,
                samples: f.samples,
                rounds: f.rounds,
                converged: f.converged,
                lp_solves: 0,
                pivots: 0,
                xi_slopes: Vec::new(),
            }
        };
        drop(evaluate);
        let xi_slopes = fit
            .upper
            .pieces()
            .iter()
            .map(|piece| {
                records
                    .iter()
                    .find(|(r, _)| r.same_as(piece))
                    .map(|(_, sens)| sens.clone())
                    .ok_or_else(|| Error::Solver(format!("stage {t} upper piece has no generating sample")))
            })
            .collect::<Result<Vec<_>>>()?;
        stages[t] = Some(StageFit { lp_solves, pivots, xi_slopes, ..fit });
    }
    Ok(ValueFunctionStack {
        horizon,
        buyers: instance.buyers(),
        kappa: opts.kappa,
        xi: xi.clone(),
        stages: stages.into_iter().map(|s| s.expect("all stages fitted")).collect(),
    })
}

/// `offsets[t][i]`: flat index of the first promise of buyer `i` in period `t + 1`.
fn promise_offsets(xi: &XiProfile) -> Vec<Vec<usize>> {
    let mut next = 0;
    xi.tables()
        .iter()
        .map(|per| {
            per.iter()
                .map(|row| {
                    let start = next;
                    next += row.len();
                    start
                })
                .collect()
        })
        .collect()
}

fn tangent_piece(b: &[f64], value: f64, supergradient: &[f64]) -> AffinePiece {
    let slope: Vec<f64> = supergradient.iter().map(|a| a.max(0.0)).collect();
    let intercept = value - slope.iter().zip(b).map(|(a, x)| a * x).sum::<f64>();
    AffinePiece { slope, intercept }
}

/// Promise slopes of a period solution: its own promises through the balance and
/// continuation duals, later promises through the multipliers on the next stage's pieces.
fn promise_slopes(sol: &PeriodSolution, next: &StageFit, own: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; next.xi_slopes.first().map_or(0, Vec::len)];
    for nus in &sol.nu {
        for (l, nu) in nus.iter().enumerate() {
            if *nu != 0.0 {
                for (o, s) in out.iter_mut().zip(&next.xi_slopes[l]) {
                    *o += nu * s;
                }
            }
        }
    }
    for (i, start) in own.iter().enumerate() {
        for o in 0..sol.space.opp_len(i) {
            out[start + o] += sol.xi_sensitivity(i, o);
        }
    }
    out
}

impl ValueFunctionStack {
    pub fn stage(&self, t: usize) -> &StageFit {
        &self.stages[t]
    }

    pub fn upper(&self, t: usize) -> &PwlConcaveFn {
        &self.stages[t].upper
    }

    pub fn lower(&self, t: usize) -> &PwlConcaveFn {
        &self.stages[t].lower
    }

    pub fn root(&self) -> Vec<f64> {
        vec![0.0; self.buyers]
    }

    /// Supergradient of `upper_0(0)` in the flattened promises, consistent with the
    /// duals used by every stage fit. Absent for stacks stored without promise slopes.
    pub fn promise_supergradient(&self) -> Option<&[f64]> {
        self.stages
            .first()?
            .xi_slopes
            .first()
            .map(Vec::as_slice)
            .filter(|s| s.len() == self.xi.len())
    }

    /// `upper_0(0)`
    pub fn root_upper(&self) -> f64 {
        self.upper(0).eval(&self.root())
    }

    /// `lower_0(0)`
    pub fn root_lower(&self) -> f64 {
        self.lower(0).eval(&self.root())
    }

    pub fn width(&self) -> f64 {
        self.root_upper() - self.root_lower()
    }

    pub fn piece_counts(&self) -> Vec<(usize, usize)> {
        self.stages.iter().map(|s| (s.lower.len(), s.upper.len())).collect()
    }

    pub fn lp_solves(&self) -> usize {
        self.stages.iter().map(|s| s.lp_solves).sum()
    }

    pub fn converged(&self) -> bool {
        self.stages.iter().all(|s| s.converged)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stack serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        if s.stages.len() != s.horizon + 1 {
            return Err(Error::input("stack stage count does not match its horizon"));
        }
        Ok(s)
    }

    pub fn matches(&self, instance: &Instance) -> bool {
        self.horizon == instance.horizon()
            && self.buyers == instance.buyers()
            && XiProfile::from_tables(instance, self.xi.tables().to_vec()).is_ok()
    }
}

/// Re-solves the period-`t` program at balance `b` against the stored upper stage.
pub fn period_duals_at(
    stack: &ValueFunctionStack,
    instance: &Instance,
    xi: &XiProfile,
    t: usize,
    b: &[f64],
) -> Result<PeriodSolution> {
    if t == 0 || t > stack.horizon {
        return Err(Error::input(format!("period {t} outside 1..={}", stack.horizon)));
    }
    solve_period_at(instance, t, b, xi.slice(t), stack.upper(t))
}

pub(crate) fn balance_key(b: &[f64]) -> Vec<u64> {
    b.iter().map(|x| (x + 0.0).to_bits()).collect()
}

/// Memoised period solves keyed by `(t, exact balance bits)`.
pub struct PolicyCache<'a> {
    stack: &'a ValueFunctionStack,
    instance: &'a Instance,
    xi: &'a XiProfile,
    solved: BTreeMap<(usize, Vec<u64>), PeriodSolution>,
}

impl<'a> PolicyCache<'a> {
    pub fn new(stack: &'a ValueFunctionStack, instance: &'a Instance, xi: &'a XiProfile) -> Self {
        Self { stack, instance, xi, solved: BTreeMap::new() }
    }

    pub fn get(&mut self, t: usize, b: &[f64]) -> Result<&PeriodSolution> {
        let key = (t, balance_key(b));
        if !self.solved.contains_key(&key) {
            let sol = period_duals_at(self.stack, self.instance, self.xi, t, b)?;
            self.solved.insert(key.clone(), sol);
        }
        Ok(&self.solved[&key])
    }

    pub fn solves(&self) -> usize {
        self.solved.len()
    }
}

/// Distribution of the starting balance of every period under the policy.
#[derive(Clone, Debug)]
pub struct BalanceDistribution {
    /// `per_period[t - 1]`: `(balance, probability)` pairs sorted by balance bits.
    pub per_period: Vec<Vec<(Vec<f64>, f64)>>,
    pub exact: bool,
    pub paths: usize,
}

/// Exact forward enumeration when the instance has at most `EXHAUSTIVE_PATH_LIMIT`
/// value paths, otherwise `MONTE_CARLO_PATHS` sampled paths with the given seed.
pub fn balance_distribution(
    stack: &ValueFunctionStack,
    instance: &Instance,
    xi: &XiProfile,
    seed: u64,
) -> Result<BalanceDistribution> {
    let mut cache = PolicyCache::new(stack, instance, xi);
    let horizon = instance.horizon();
    let paths = instance.path_count();
    if paths <= EXHAUSTIVE_PATH_LIMIT {
        let mut per_period = Vec::with_capacity(horizon);
        let mut current: BTreeMap<Vec<u64>, (Vec<f64>, f64)> = BTreeMap::new();
        let root = stack.root();
        current.insert(balance_key(&root), (root, 1.0));
        for t in 1..=horizon {
            per_period.push(current.values().cloned().collect::<Vec<_>>());
            if t == horizon {
                break;
            }
            let mut next: BTreeMap<Vec<u64>, (Vec<f64>, f64)> = BTreeMap::new();
            for (b, w) in current.values() {
                let sol = cache.get(t, b)?;
                for p in 0..sol.space.len() {
                    let nb = sol.next_balance(p);
                    let e = next.entry(balance_key(&nb)).or_insert((nb, 0.0));
                    e.1 += w * sol.space.density(p);
                }
            }
            current = next;
        }
        return Ok(BalanceDistribution { per_period, exact: true, paths });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts: Vec<BTreeMap<Vec<u64>, (Vec<f64>, f64)>> = vec![BTreeMap::new(); horizon];
    let weight = 1.0 / MONTE_CARLO_PATHS as f64;
    for _ in 0..MONTE_CARLO_PATHS {
        let mut b = stack.root();
        for t in 1..=horizon {
            let e = counts[t - 1].entry(balance_key(&b)).or_insert((b.clone(), 0.0));
            e.1 += weight;
            if t == horizon {
                break;
            }
            let sol = cache.get(t, &b)?;
            let p = sample_profile(&mut rng, sol);
            b = sol.next_balance(p);
        }
    }
    Ok(BalanceDistribution {
        per_period: counts.into_iter().map(|m| m.into_values().collect()).collect(),
        exact: false,
        paths: MONTE_CARLO_PATHS,
    })
}

pub(crate) fn sample_profile(rng: &mut ChaCha8Rng, sol: &PeriodSolution) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let n = sol.space.len();
    for p in 0..n {
        acc += sol.space.density(p);
        if u < acc {
            return p;
        }
    }
    n - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::DiscreteDistribution;
    use rand::{Rng, SeedableRng};

    fn two_point(horizon: usize) -> Instance {
        Instance::iid(horizon, vec![DiscreteDistribution::uniform(vec![1.0, 2.0]).unwrap()]).unwrap()
    }

    #[test]
    fn single_period_stack_is_exact() {
        let inst = two_point(1);
        let xi = XiProfile::zeros(&inst);
        let stack = compute_value_functions(&inst, &xi, 1e-3).unwrap();
        assert_eq!(stack.stages.len(), 2);
        assert!((stack.root_upper() - 1.0).abs() < 1e-12);
        assert!((stack.root_lower() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic_values_are_flat() {
        let c = 2.5;
        let inst = Instance::iid(3, vec![DiscreteDistribution::degenerate(c).unwrap()]).unwrap();
        let xi = XiProfile::zeros(&inst);
        let stack = compute_value_functions(&inst, &xi, 1e-3).unwrap();
        for t in 0..=3 {
            let want = c * (3 - t) as f64;
            assert_eq!(stack.upper(t).len(), 1);
            assert!((stack.upper(t).eval(&[0.0]) - want).abs() < 1e-9);
            assert!((stack.lower(t).eval(&[0.0]) - want).abs() < 1e-9);
            assert!((stack.upper(t).eval(&[7.0]) - want).abs() < 1e-9);
        }
    }

    #[test]
    fn requeried_solutions_are_identical() {
        let inst = two_point(2);
        let xi = XiProfile::zeros(&inst);
        let stack = compute_value_functions(&inst, &xi, 1e-3).unwrap();
        let a = period_duals_at(&stack, &inst, &xi, 1, &[0.0]).unwrap();
        let b = period_duals_at(&stack, &inst, &xi, 1, &[0.0]).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.lambda, b.lambda);
        assert_eq!(a.objective.to_bits(), b.objective.to_bits());
        assert!((a.objective - stack.root_upper()).abs() < 1e-8);
        let last = period_duals_at(&stack, &inst, &xi, 2, &[0.7]).unwrap();
        let fresh = solve_period_at(&inst, 2, &[0.7], xi.slice(2), &PwlConcaveFn::zero(vec![0.0])).unwrap();
        assert_eq!(last.x, fresh.x);
        assert!((last.objective - fresh.objective).abs() < 1e-12);
    }

    #[test]
    fn stage_sandwich_orders_fresh_solves() {
        for seed in 0..4u64 {
            let inst = Instance::random_shape(seed, 2, 3, 3);
            let mut xi = XiProfile::zeros(&inst);
            for (n, (t, i, o)) in xi.entries().into_iter().enumerate() {
                xi.set(t, i, o, 0.1 * (n % 3) as f64);
            }
            let stack = compute_value_functions(&inst, &xi, 0.02).unwrap();
            let boxes = stage_boxes(&inst, &xi);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for t in 1..inst.horizon() {
                for _ in 0..20 {
                    let b: Vec<f64> = boxes[t].iter().map(|x| rng.gen::<f64>() * x).collect();
                    let lo = solve_period_at(&inst, t + 1, &b, xi.slice(t + 1), stack.lower(t + 1)).unwrap();
                    let hi = solve_period_at(&inst, t + 1, &b, xi.slice(t + 1), stack.upper(t + 1)).unwrap();
                    assert!(stack.lower(t).eval(&b) <= lo.objective + 1e-7);
                    assert!(lo.objective <= hi.objective + 1e-7);
                    assert!(hi.objective <= stack.upper(t).eval(&b) + 1e-7);
                }
            }
            assert!(stack.root_lower() <= stack.root_upper() + 1e-9);
        }
    }

    #[test]
    fn stack_json_roundtrip() {
        let inst = two_point(2);
        let stack = compute_value_functions(&inst, &XiProfile::zeros(&inst), 0.01).unwrap();
        let back = ValueFunctionStack::from_json(&stack.to_json()).unwrap();
        assert_eq!(back.to_json(), stack.to_json());
        assert!(back.matches(&inst));
        assert!(!back.matches(&two_point(3)));
    }

    #[test]
    fn exhaustive_balance_distribution_sums_to_one() {
        let inst = Instance::random_shape(5, 2, 3, 2);
        let xi = XiProfile::zeros(&inst);
        let stack = compute_value_functions(&inst, &xi, 0.01).unwrap();
        let dist = balance_distribution(&stack, &inst, &xi, 0).unwrap();
        assert!(dist.exact);
        for per in &dist.per_period {
            let total: f64 = per.iter().map(|x| x.1).sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(per.iter().all(|(b, _)| b.iter().all(|x| *x >= 0.0)));
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn stages_sandwich_within_target(seed in 0u64..10_000, scale in 0.0f64..1.0) {
            let inst = Instance::random(seed, 2, 2, 3);
            let mut xi = XiProfile::zeros(&inst);
            for (t, i, o) in xi.entries() {
                xi.set(t, i, o, scale * inst.dist(t, i).range());
            }
            let stack = compute_value_functions(&inst, &xi, 1e-3).unwrap();
            proptest::prop_assert!(stack.root_lower() <= stack.root_upper() + 1e-9);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            for stage in &stack.stages {
                for _ in 0..20 {
                    let b: Vec<f64> = stage.upper.domain().iter().map(|d| rng.gen::<f64>() * d).collect();
                    let (lo, up) = (stage.lower.eval(&b), stage.upper.eval(&b));
                    proptest::prop_assert!(lo <= up + 1e-9);
                    proptest::prop_assert!(up - lo <= stage.target_gap + 1e-8);
                }
            }
        }
    }
}
