//! Forward simulation of a solved policy with incentive and balance checks.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backward::{balance_key, period_duals_at, sample_profile, ValueFunctionStack, EXHAUSTIVE_PATH_LIMIT};
use crate::error::{Error, Result};
use crate::instance::Instance;
use crate::period::{payments_from_solution, PeriodSolution, XiProfile};

pub const EPIR_TOL: f64 = 1e-8;
pub const BU_TOL: f64 = 1e-8;
pub const BI_TOL: f64 = 1e-6;
pub const DIC_TOL: f64 = 1e-6;
/// Absolute slack on top of the stack's own gap when comparing realised revenue.
pub const REVENUE_TOL: f64 = 1e-6;

/// A period auction together with its recovered payments.
#[derive(Debug)]
pub struct Auction {
    pub solution: PeriodSolution,
    /// `[profile][buyer]`.
    pub payments: Vec<Vec<f64>>,
}

impl Auction {
    pub fn utility(&self, p: usize, i: usize) -> f64 {
        self.solution.space.value(i, p) * self.solution.x[p][i] - self.payments[p][i]
    }
}

/// The bank-account policy: every `(period, balance)` maps to a re-solved period
/// program against the stored upper stage.
pub struct MechanismPolicy {
    instance: Instance,
    xi: XiProfile,
    stack: ValueFunctionStack,
    solved: BTreeMap<(usize, Vec<u64>), Rc<Auction>>,
}

impl MechanismPolicy {
    pub fn new(instance: Instance, xi: XiProfile, stack: ValueFunctionStack) -> Result<Self> {
        if !stack.matches(&instance) {
            return Err(Error::input("stack does not match the instance"));
        }
        if stack.xi != xi {
            return Err(Error::input("stack was computed for different promises"));
        }
        Ok(Self { instance, xi, stack, solved: BTreeMap::new() })
    }

    /// Policy for the promises the stack was built with.
    pub fn from_stack(instance: Instance, stack: ValueFunctionStack) -> Result<Self> {
        let xi = stack.xi.clone();
        Self::new(instance, xi, stack)
    }

    pub fn instance(&self) -> &Instance {
        &self.instance
    }

    pub fn stack(&self) -> &ValueFunctionStack {
        &self.stack
    }

    pub fn auction(&mut self, t: usize, b: &[f64]) -> Result<Rc<Auction>> {
        let key = (t, balance_key(b));
        if let Some(a) = self.solved.get(&key) {
            return Ok(a.clone());
        }
        let solution = period_duals_at(&self.stack, &self.instance, &self.xi, t, b)?;
        let payments = payments_from_solution(&solution, self.xi.slice(t));
        let a = Rc::new(Auction { solution, payments });
        self.solved.insert(key, a.clone());
        Ok(a)
    }

    pub fn solves(&self) -> usize {
        self.solved.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SimMode {
    Exhaustive,
    Sampled { paths: usize, seed: u64 },
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Residuals {
    /// Largest negative cumulative utility over paths and buyers.
    pub epir: f64,
    /// Largest excess of a balance increase over the realised period utility.
    pub bu: f64,
    /// Largest deviation of an interim expected utility from its promise.
    pub bi: f64,
    /// Largest one-shot deviation gain, when the instance is small enough.
    pub dic: Option<f64>,
    /// Distance of the realised revenue outside the claimed interval.
    pub revenue: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct PathRecord {
    pub values: Vec<Vec<f64>>,
    pub probability: f64,
    pub revenue: f64,
    pub utilities: Vec<f64>,
    pub final_balance: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SimReport {
    pub mode: SimMode,
    pub paths: usize,
    pub revenue: f64,
    pub revenue_std_error: f64,
    pub claimed_interval: [f64; 2],
    pub residuals: Residuals,
    /// Most distinct starting balances seen in any period by the balance check.
    pub bi_balances: usize,
    pub period_solves: usize,
    pub passed: bool,
    #[serde(skip)]
    pub trace: Vec<PathRecord>,
}

impl SimReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn trace_csv(&self) -> String {
        let mut out = String::from("path,probability,values,revenue,utilities,final_balance\n");
        let join = |v: &[f64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(";");
        for (n, r) in self.trace.iter().enumerate() {
            let values = r.values.iter().map(|v| join(v)).collect::<Vec<_>>().join("|");
            out.push_str(&format!(
                "{n},{},{values},{},{},{}\n",
                r.probability,
                r.revenue,
                join(&r.utilities),
                join(&r.final_balance)
            ));
        }
        out
    }
}

struct Walker<'a> {
    policy: &'a mut MechanismPolicy,
    residuals: Residuals,
    reached: Vec<BTreeMap<Vec<u64>, Vec<f64>>>,
    trace: Vec<PathRecord>,
    keep_trace: bool,
}

impl Walker<'_> {
    /// Plays one period at `(t, b)` for profile `p`; returns `(revenue, utilities, next balance)`.
    fn step(&mut self, t: usize, b: &[f64], p: usize) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        self.reached[t - 1].entry(balance_key(b)).or_insert_with(|| b.to_vec());
        let a = self.policy.auction(t, b)?;
        let k = b.len();
        let revenue: f64 = a.payments[p].iter().sum();
        let utilities: Vec<f64> = (0..k).map(|i| a.utility(p, i)).collect();
        let next = a.solution.next_balance(p);
        for i in 0..k {
            self.residuals.bu = self.residuals.bu.max(next[i] - b[i] - utilities[i]);
        }
        Ok((revenue, utilities, next))
    }

    fn finish(&mut self, values: Vec<Vec<f64>>, probability: f64, revenue: f64, utilities: Vec<f64>, b: Vec<f64>) {
        for u in &utilities {
            self.residuals.epir = self.residuals.epir.max(-u);
        }
        if self.keep_trace {
            self.trace.push(PathRecord { values, probability, revenue, utilities, final_balance: b });
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn exhaustive(
        &mut self,
        t: usize,
        b: Vec<f64>,
        prob: f64,
        revenue: f64,
        cum: Vec<f64>,
        values: Vec<Vec<f64>>,
        acc: &mut f64,
    ) -> Result<()> {
        let horizon = self.policy.instance.horizon();
        if t > horizon {
            *acc += prob * revenue;
            self.finish(values, prob, revenue, cum, b);
            return Ok(());
        }
        let space = self.policy.instance.period_space(t);
        for p in 0..space.len() {
            let (r, u, next) = self.step(t, &b, p)?;
            let cum: Vec<f64> = cum.iter().zip(&u).map(|(a, c)| a + c).collect();
            let mut values = values.clone();
            values.push((0..b.len()).map(|i| space.value(i, p)).collect());
            self.exhaustive(t + 1, next, prob * space.density(p), revenue + r, cum, values, acc)?;
        }
        Ok(())
    }
}

/// Runs the policy forward from the zero balance.
pub fn simulate(policy: &mut MechanismPolicy, mode: SimMode) -> Result<SimReport> {
    simulate_with_trace(policy, mode, false)
}

pub fn simulate_with_trace(policy: &mut MechanismPolicy, mode: SimMode, keep_trace: bool) -> Result<SimReport> {
    let horizon = policy.instance.horizon();
    let k = policy.instance.buyers();
    let path_count = policy.instance.path_count();
    let claimed = [policy.stack.root_lower(), policy.stack.root_upper()];
    let mut w = Walker {
        policy,
        residuals: Residuals::default(),
        reached: vec![BTreeMap::new(); horizon],
        trace: Vec::new(),
        keep_trace,
    };
    let (revenue, std_error, paths) = match mode {
        SimMode::Exhaustive => {
            if path_count > EXHAUSTIVE_PATH_LIMIT {
                return Err(Error::EnumerationGuard { paths: path_count, limit: EXHAUSTIVE_PATH_LIMIT });
            }
            let mut acc = 0.0;
            w.exhaustive(1, vec![0.0; k], 1.0, 0.0, vec![0.0; k], Vec::new(), &mut acc)?;
            (acc, 0.0, path_count)
        }
        SimMode::Sampled { paths, seed } => {
            if paths == 0 {
                return Err(Error::input("sampled simulation needs at least one path"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (mut sum, mut sq) = (0.0, 0.0);
            for _ in 0..paths {
                let mut b = vec![0.0; k];
                let mut cum = vec![0.0; k];
                let mut rev = 0.0;
                let mut values = Vec::with_capacity(horizon);
                for t in 1..=horizon {
                    let a = w.policy.auction(t, &b)?;
                    let p = sample_profile(&mut rng, &a.solution);
                    values.push((0..k).map(|i| a.solution.space.value(i, p)).collect());
                    let (r, u, next) = w.step(t, &b, p)?;
                    rev += r;
                    cum.iter_mut().zip(&u).for_each(|(c, x)| *c += x);
                    b = next;
                }
                sum += rev;
                sq += rev * rev;
                w.finish(values, 1.0 / paths as f64, rev, cum, b);
            }
            let n = paths as f64;
            let mean = sum / n;
            let var = if paths > 1 { ((sq - n * mean * mean) / (n - 1.0)).max(0.0) } else { 0.0 };
            (mean, (var / n).sqrt(), paths)
        }
    };

    let mut bi_balances = 0;
    let reached = std::mem::take(&mut w.reached);
    for (t0, per) in reached.iter().enumerate() {
        bi_balances = bi_balances.max(per.len());
        for b in per.values() {
            let a = w.policy.auction(t0 + 1, b)?;
            w.residuals.bi = w.residuals.bi.max(interim_promise_gap(&a, w.policy.xi.slice(t0 + 1)));
        }
    }
    let mut residuals = std::mem::take(&mut w.residuals);
    residuals.epir = residuals.epir.max(0.0) + 0.0;
    residuals.bu = residuals.bu.max(0.0) + 0.0;
    let trace = std::mem::take(&mut w.trace);
    residuals.dic = if path_count <= EXHAUSTIVE_PATH_LIMIT { Some(check_dic_exhaustive(policy)?) } else { None };
    if matches!(mode, SimMode::Exhaustive) {
        let slack = REVENUE_TOL * claimed[1].abs().max(1.0);
        residuals.revenue = (claimed[0] - slack - revenue).max(revenue - claimed[1] - slack).max(0.0);
    }
    let passed = residuals.epir <= EPIR_TOL
        && residuals.bu <= BU_TOL
        && residuals.bi <= BI_TOL
        && residuals.dic.is_none_or(|d| d <= DIC_TOL)
        && residuals.revenue == 0.0;
    Ok(SimReport {
        mode,
        paths,
        revenue,
        revenue_std_error: std_error,
        claimed_interval: claimed,
        residuals,
        bi_balances,
        period_solves: policy.solves(),
        passed,
        trace,
    })
}

fn interim_promise_gap(a: &Auction, xi_slice: &[Vec<f64>]) -> f64 {
    let space = &a.solution.space;
    let mut worst = 0.0f64;
    for (i, row) in xi_slice.iter().enumerate() {
        let probs = space.dist(i).probs();
        for (o, promise) in row.iter().enumerate() {
            let expected: f64 = space.column(i, o).iter().enumerate().map(|(j, p)| probs[j] * a.utility(*p, i)).sum();
            worst = worst.max((expected - promise).abs());
        }
    }
    worst
}

/// Largest gain over every reachable `(period, balance)`, buyer, true value and
/// misreport, from deviating once and reporting truthfully afterwards. Opponents'
/// current values and all future values are averaged out.
pub fn check_dic_exhaustive(policy: &mut MechanismPolicy) -> Result<f64> {
    let paths = policy.instance.path_count();
    if paths > EXHAUSTIVE_PATH_LIMIT {
        return Err(Error::EnumerationGuard { paths, limit: EXHAUSTIVE_PATH_LIMIT });
    }
    let horizon = policy.instance.horizon();
    let k = policy.instance.buyers();
    let mut future: BTreeMap<(usize, Vec<u64>), Vec<f64>> = BTreeMap::new();
    let mut frontier: BTreeMap<Vec<u64>, Vec<f64>> = BTreeMap::new();
    frontier.insert(balance_key(&vec![0.0; k]), vec![0.0; k]);
    let mut worst = 0.0f64;
    for t in 1..=horizon {
        let mut next_frontier = BTreeMap::new();
        for b in frontier.values() {
            let a = policy.auction(t, b)?;
            let space = a.solution.space.clone();
            let cont: Vec<Vec<f64>> = (0..space.len())
                .map(|p| continuation(policy, &mut future, t + 1, &a.solution.next_balance(p)))
                .collect::<Result<_>>()?;
            for i in 0..k {
                let dist = space.dist(i);
                for o in 0..space.opp_len(i) {
                    let column = space.column(i, o);
                    let f_o = space.opp_density(i, o);
                    // expected utility when the true value is index `j` and the report is `r`
                    let payoff = |j: usize, r: usize| {
                        let p = column[r];
                        dist.support()[j] * a.solution.x[p][i] - a.payments[p][i] + cont[p][i]
                    };
                    for j in 0..column.len() {
                        let truthful = payoff(j, j);
                        for r in 0..column.len() {
                            worst = worst.max(f_o * (payoff(j, r) - truthful));
                        }
                    }
                }
            }
            for p in 0..space.len() {
                let nb = a.solution.next_balance(p);
                next_frontier.insert(balance_key(&nb), nb);
            }
        }
        frontier = next_frontier;
    }
    Ok(worst)
}

/// Expected utility of every buyer from period `t` on, starting at balance `b`,
/// under truthful reporting.
fn continuation(
    policy: &mut MechanismPolicy,
    memo: &mut BTreeMap<(usize, Vec<u64>), Vec<f64>>,
    t: usize,
    b: &[f64],
) -> Result<Vec<f64>> {
    let k = b.len();
    if t > policy.instance.horizon() {
        return Ok(vec![0.0; k]);
    }
    let key = (t, balance_key(b));
    if let Some(v) = memo.get(&key) {
        return Ok(v.clone());
    }
    let a = policy.auction(t, b)?;
    let mut total = vec![0.0; k];
    for p in 0..a.solution.space.len() {
        let f = a.solution.space.density(p);
        let rest = continuation(policy, memo, t + 1, &a.solution.next_balance(p))?;
        for i in 0..k {
            total[i] += f * (a.utility(p, i) + rest[i]);
        }
    }
    memo.insert(key, total.clone());
    Ok(total)
}
