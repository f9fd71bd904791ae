//! Virtual values recovered from the duals of a solved period, and checks that the
//! allocation maximises ironed virtual welfare.

use std::fmt::Write as _;

use serde::Serialize;

use crate::period::PeriodSolution;

pub const ALLOC_TOL: f64 = 1e-8;
pub const VALUE_TOL: f64 = 1e-6;

/// Per-profile tables are indexed `[profile][buyer]`, `beta` by `[buyer][opponent profile]`.
#[derive(Clone, Debug, Serialize)]
pub struct VirtualValueTable {
    pub t: usize,
    pub balance: Vec<f64>,
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub phi: Vec<Vec<f64>>,
    pub phi_tilde: Vec<Vec<f64>>,
    pub x: Vec<Vec<f64>>,
    pub profiles: Vec<Vec<f64>>,
    /// Opponent-profile index per `[profile][buyer]`.
    pub opponents: Vec<Vec<usize>>,
}

/// Extracts virtual values from a period solution.
///
/// The continuation slope of buyer `i` at profile `v` is the dual-weighted slope
/// `G_i(v) = sum_l nu_l(v) a_{l,i} / f(v)`. With `tail_i(v)` the conditional mean of
/// `G_i` over strictly higher own values,
/// `phi_i(v) = v_i + vartheta_i(v_i) tail_i(v) - beta_i(v_-i) vartheta_i(v_i)`, which is
/// the exact stationarity form of the discrete program and reduces to
/// `v_i - (lambda / f) vartheta_i` when there is no continuation.
pub fn compute_virtual_values(sol: &PeriodSolution) -> VirtualValueTable {
    let space = &sol.space;
    let k = space.buyers();
    let n = space.len();
    let mut alpha = vec![vec![0.0; k]; n];
    let mut phi = vec![vec![0.0; k]; n];
    let mut phi_tilde = vec![vec![0.0; k]; n];
    let mut beta: Vec<Vec<f64>> = (0..k).map(|i| vec![0.0; space.opp_len(i)]).collect();
    for i in 0..k {
        let dist = space.dist(i);
        for o in 0..space.opp_len(i) {
            let col = space.column(i, o);
            let b = sol.beta(i, o);
            beta[i][o] = b;
            let m = col.len();
            // suffix sums of f_j G_j
            let mut suffix = vec![0.0; m + 1];
            for j in (0..m).rev() {
                suffix[j] = suffix[j + 1] + dist.probs()[j] * sol.g_weight[col[j]][i];
            }
            for (j, p) in col.iter().enumerate() {
                let vt = dist.vartheta(j);
                let tail_mass = dist.tail(j);
                let tail = if j + 1 < m && tail_mass > 0.0 { suffix[j + 1] / tail_mass } else { 0.0 };
                let ph = dist.support()[j] + vt * tail - b * vt;
                alpha[*p][i] = 1.0 + sol.g_weight[*p][i];
                phi[*p][i] = ph;
                let eta_out = if j + 1 < m { sol.eta[i][o][j] } else { 0.0 };
                let eta_in = if j > 0 { sol.eta[i][o][j - 1] } else { 0.0 };
                phi_tilde[*p][i] = ph - (eta_out - eta_in) / space.density(*p);
            }
        }
    }
    VirtualValueTable {
        t: sol.t,
        balance: sol.balance.clone(),
        alpha,
        beta,
        phi,
        phi_tilde,
        x: sol.x.clone(),
        profiles: (0..n).map(|p| space.profile(p).values).collect(),
        opponents: (0..n).map(|p| (0..k).map(|i| space.opp(i, p)).collect()).collect(),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Violation {
    pub kind: &'static str,
    pub buyer: usize,
    pub profile: usize,
    pub amount: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct MaximizerReport {
    pub violations: Vec<Violation>,
    /// Largest positive part of `phi_tilde f - mu`.
    pub dual_feasibility: f64,
    /// Largest `|phi_tilde f - mu|` where the allocation is positive.
    pub stationarity: f64,
    pub cs_lambda: f64,
    pub cs_mu: f64,
    pub cs_eta: f64,
}

impl MaximizerReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

fn sign(x: f64) -> i8 {
    if x > VALUE_TOL {
        1
    } else if x < -VALUE_TOL {
        -1
    } else {
        0
    }
}

/// Checks that positive allocations go to maximal nonnegative ironed virtual values,
/// that the sign of the ironed virtual-value advantage is weakly increasing in the
/// own value (a strictly positive sign is never followed by a strictly negative one;
/// ties within tolerance are compatible with either side), and the complementary
/// slackness of every multiplier.
pub fn check_maximizer(sol: &PeriodSolution, table: &VirtualValueTable) -> MaximizerReport {
    let space = &sol.space;
    let k = space.buyers();
    let mut r = MaximizerReport::default();
    for p in 0..space.len() {
        let f = space.density(p);
        let total: f64 = sol.x[p].iter().sum();
        r.cs_mu = r.cs_mu.max((sol.mu[p] * (1.0 - total)).abs());
        let best = table.phi_tilde[p].iter().fold(0.0f64, |a, b| a.max(*b));
        for i in 0..k {
            let reduced = table.phi_tilde[p][i] * f - sol.mu[p];
            r.dual_feasibility = r.dual_feasibility.max(reduced);
            if sol.x[p][i] > ALLOC_TOL {
                r.stationarity = r.stationarity.max(reduced.abs());
                let short = best - table.phi_tilde[p][i];
                if short > VALUE_TOL {
                    r.violations.push(Violation { kind: "not_maximal", buyer: i, profile: p, amount: short });
                }
            }
        }
    }
    for i in 0..k {
        let dist = space.dist(i);
        for o in 0..space.opp_len(i) {
            let col = space.column(i, o);
            let spent: f64 = col.iter().enumerate().map(|(j, p)| dist.probs()[j] * dist.vartheta(j) * sol.x[*p][i]).sum();
            let slack = sol.balance[i] + sol.xi[i][o] - spent;
            r.cs_lambda = r.cs_lambda.max((sol.lambda[i][o] * slack).abs());
            let mut seen_positive = false;
            for (j, p) in col.iter().enumerate() {
                if j + 1 < col.len() {
                    let gap = sol.x[col[j + 1]][i] - sol.x[*p][i];
                    r.cs_eta = r.cs_eta.max((sol.eta[i][o][j] * gap).abs());
                }
                let others = (0..k).filter(|q| *q != i).map(|q| table.phi_tilde[*p][q]).fold(0.0f64, f64::max);
                let s = sign(table.phi_tilde[*p][i] - others);
                // exact ties are indeterminate under degenerate duals
                if s < 0 && seen_positive {
                    r.violations.push(Violation {
                        kind: "sign_not_monotone",
                        buyer: i,
                        profile: *p,
                        amount: (table.phi_tilde[*p][i] - others).abs(),
                    });
                }
                seen_positive |= s > 0;
            }
        }
    }
    for (kind, amount) in [("cs_lambda", r.cs_lambda), ("cs_mu", r.cs_mu), ("cs_eta", r.cs_eta)] {
        if amount > ALLOC_TOL {
            r.violations.push(Violation { kind, buyer: 0, profile: 0, amount });
        }
    }
    r
}

/// A maximal run of equal allocation for buyer `i` against opponent profile `o`.
#[derive(Clone, Debug, Serialize)]
pub struct IroningClass {
    pub buyer: usize,
    pub opponents: usize,
    /// Own support indices in the run.
    pub members: Vec<usize>,
    pub mean_phi: f64,
    pub mean_phi_tilde: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct IroningReport {
    pub classes: Vec<IroningClass>,
    /// Largest `|sum_C f (phi - phi_tilde)|` over classes.
    pub transfer_residual: f64,
    /// Largest shortfall of the upper-tail mass of `phi_tilde` below that of `phi`.
    pub dominance_residual: f64,
    /// Largest `|sum f (phi - phi_tilde)|` over full columns.
    pub total_residual: f64,
    /// Largest decrease of the allocation in the own value.
    pub monotonicity_residual: f64,
    pub max_eta: f64,
}

impl IroningReport {
    pub fn transfer_ok(&self) -> bool {
        self.transfer_residual <= VALUE_TOL && self.total_residual <= VALUE_TOL
    }

    pub fn dominance_ok(&self) -> bool {
        self.dominance_residual <= ALLOC_TOL
    }

    pub fn monotone_ok(&self) -> bool {
        self.monotonicity_residual <= ALLOC_TOL
    }

    pub fn passed(&self) -> bool {
        self.transfer_ok() && self.dominance_ok() && self.monotone_ok()
    }

    /// Whether any monotonicity multiplier is active, i.e. ironing took place.
    pub fn ironed(&self) -> bool {
        self.max_eta > 1e-7
    }
}

/// Groups each column into constant-allocation classes and checks that ironing only
/// moves virtual-value mass within classes and upwards in the own value.
pub fn ironing_report(sol: &PeriodSolution, table: &VirtualValueTable) -> IroningReport {
    let space = &sol.space;
    let mut r = IroningReport::default();
    for i in 0..space.buyers() {
        let dist = space.dist(i);
        for o in 0..space.opp_len(i) {
            let col = space.column(i, o);
            let mut cum = 0.0;
            let mut start = 0;
            for (j, p) in col.iter().enumerate() {
                let f = dist.probs()[j];
                cum += f * (table.phi_tilde[*p][i] - table.phi[*p][i]);
                // mass below j must not grow under ironing
                if j + 1 < col.len() {
                    r.dominance_residual = r.dominance_residual.max(cum);
                    r.max_eta = r.max_eta.max(sol.eta[i][o][j]);
                    r.monotonicity_residual = r.monotonicity_residual.max(sol.x[*p][i] - sol.x[col[j + 1]][i]);
                }
                let closes = j + 1 == col.len() || (sol.x[col[j + 1]][i] - sol.x[*p][i]).abs() > ALLOC_TOL;
                if closes {
                    let members: Vec<usize> = (start..=j).collect();
                    let mass: f64 = members.iter().map(|m| dist.probs()[*m]).sum();
                    let sum_phi: f64 = members.iter().map(|m| dist.probs()[*m] * table.phi[col[*m]][i]).sum();
                    let sum_tilde: f64 = members.iter().map(|m| dist.probs()[*m] * table.phi_tilde[col[*m]][i]).sum();
                    r.transfer_residual = r.transfer_residual.max((sum_phi - sum_tilde).abs());
                    r.classes.push(IroningClass {
                        buyer: i,
                        opponents: o,
                        members,
                        mean_phi: sum_phi / mass,
                        mean_phi_tilde: sum_tilde / mass,
                    });
                    start = j + 1;
                }
            }
            r.total_residual = r.total_residual.max(cum.abs());
        }
    }
    r
}

/// CSV rows `period,balance,buyer,profile,alpha,beta,phi,phi_tilde,x`; vectors are
/// joined with `;`.
pub fn to_csv(tables: &[VirtualValueTable]) -> String {
    let mut out = String::from("period,balance,buyer,profile,alpha,beta,phi,phi_tilde,x\n");
    let join = |v: &[f64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(";");
    for table in tables {
        let k = table.balance.len();
        for (p, prof) in table.profiles.iter().enumerate() {
            for i in 0..k {
                let o = table.opponents[p][i];
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{}",
                    table.t,
                    join(&table.balance),
                    i,
                    join(prof),
                    table.alpha[p][i],
                    table.beta[i][o],
                    table.phi[p][i],
                    table.phi_tilde[p][i],
                    table.x[p][i]
                );
            }
        }
    }
    out
}
