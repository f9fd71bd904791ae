//! Problem instances: horizon, buyers and per-period discrete value distributions.
//!
//! Periods are numbered `1..=T` in the public API; buyer indices are `0..k`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PROB_SUM_TOL: f64 = 1e-12;

/// A finite value distribution with strictly increasing, nonnegative support.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDistribution")]
pub struct DiscreteDistribution {
    support: Vec<f64>,
    probs: Vec<f64>,
}

#[derive(Deserialize)]
struct RawDistribution {
    support: Vec<f64>,
    probs: Vec<f64>,
}

impl TryFrom<RawDistribution> for DiscreteDistribution {
    type Error = Error;

    fn try_from(raw: RawDistribution) -> Result<Self> {
        DiscreteDistribution::new(raw.support, raw.probs)
    }
}

impl DiscreteDistribution {
    pub fn new(support: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::input("distribution support is empty"));
        }
        if support.len() != probs.len() {
            return Err(Error::input(format!(
                "support has {} points but probs has {}",
                support.len(),
                probs.len()
            )));
        }
        if support.iter().chain(&probs).any(|x| !x.is_finite()) {
            return Err(Error::input("distribution contains a non-finite number"));
        }
        if support[0] < 0.0 {
            return Err(Error::input(format!("negative support point {}", support[0])));
        }
        if support.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::input("support must be strictly increasing"));
        }
        if let Some(p) = probs.iter().find(|p| **p <= 0.0) {
            return Err(Error::input(format!("probability {p} is not positive")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::input(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self { support, probs })
    }

    /// Point mass at `value`.
    pub fn degenerate(value: f64) -> Result<Self> {
        Self::new(vec![value], vec![1.0])
    }

    pub fn uniform(support: Vec<f64>) -> Result<Self> {
        let n = support.len().max(1);
        Self::new(support, vec![1.0 / n as f64; n])
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn index_of(&self, value: f64) -> Option<usize> {
        self.support.iter().position(|s| *s == value)
    }

    pub fn min(&self) -> f64 {
        self.support[0]
    }

    pub fn max(&self) -> f64 {
        self.support[self.support.len() - 1]
    }

    /// Width of the support, `max - min`.
    pub fn range(&self) -> f64 {
        self.max() - self.min()
    }

    pub fn mean(&self) -> f64 {
        self.support.iter().zip(&self.probs).map(|(v, p)| v * p).sum()
    }

    /// Inclusive CDF `P(value <= support[j])`.
    pub fn cdf(&self, j: usize) -> f64 {
        self.probs[..=j].iter().sum()
    }

    /// Upper tail mass `P(value > support[j])`, summed directly to avoid cancellation.
    pub fn tail(&self, j: usize) -> f64 {
        self.probs[j + 1..].iter().sum()
    }

    /// Gap to the next support point; zero at the top type.
    pub fn gap(&self, j: usize) -> f64 {
        if j + 1 < self.support.len() {
            self.support[j + 1] - self.support[j]
        } else {
            0.0
        }
    }

    /// Discrete virtual value for utility at support index `j`:
    /// `(1 - F(v_j)) / f(v_j) * (v_{j+1} - v_j)`, zero at the top type.
    ///
    /// With the envelope payments `u'(v_m) = sum_{j<m} x(v_j) (v_{j+1} - v_j)` this
    /// satisfies `E[u'] = E[vartheta * x]` exactly for every allocation.
    pub fn vartheta(&self, j: usize) -> f64 {
        if j + 1 >= self.support.len() {
            return 0.0;
        }
        self.tail(j) / self.probs[j] * self.gap(j)
    }
}

/// A value profile: one value per buyer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub values: Vec<f64>,
}

impl Profile {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }
}

/// Horizon `T`, buyer count `k` and a `T x k` grid of distributions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawInstance")]
pub struct Instance {
    #[serde(rename = "T")]
    horizon: usize,
    #[serde(rename = "k")]
    buyers: usize,
    dists: Vec<Vec<DiscreteDistribution>>,
}

#[derive(Deserialize)]
struct RawInstance {
    #[serde(rename = "T")]
    horizon: usize,
    #[serde(rename = "k")]
    buyers: usize,
    dists: Vec<Vec<DiscreteDistribution>>,
}

impl TryFrom<RawInstance> for Instance {
    type Error = Error;

    fn try_from(raw: RawInstance) -> Result<Self> {
        Instance::new(raw.horizon, raw.buyers, raw.dists)
    }
}

impl Instance {
    pub fn new(horizon: usize, buyers: usize, dists: Vec<Vec<DiscreteDistribution>>) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::input("horizon T must be at least 1"));
        }
        if buyers == 0 {
            return Err(Error::input("buyer count k must be at least 1"));
        }
        if dists.len() != horizon {
            return Err(Error::input(format!(
                "dists has {} periods, expected T = {horizon}",
                dists.len()
            )));
        }
        for (t, row) in dists.iter().enumerate() {
            if row.len() != buyers {
                return Err(Error::input(format!(
                    "period {} has {} distributions, expected k = {buyers}",
                    t + 1,
                    row.len()
                )));
            }
        }
        Ok(Self { horizon, buyers, dists })
    }

    /// The same distribution list for every period.
    pub fn iid(horizon: usize, per_buyer: Vec<DiscreteDistribution>) -> Result<Self> {
        let k = per_buyer.len();
        Self::new(horizon, k, vec![per_buyer; horizon])
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("instance serialises")
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn buyers(&self) -> usize {
        self.buyers
    }

    fn check_period(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.horizon {
            return Err(Error::input(format!("period {t} outside 1..={}", self.horizon)));
        }
        Ok(())
    }

    /// Distribution of buyer `i` in period `t` (1-based).
    pub fn dist(&self, t: usize, i: usize) -> &DiscreteDistribution {
        &self.dists[t - 1][i]
    }

    pub fn period_space(&self, t: usize) -> PeriodSpace {
        PeriodSpace::new(&self.dists[t - 1])
    }

    /// Product of the marginal densities of `profile` in period `t`.
    pub fn joint_density(&self, t: usize, profile: &Profile) -> Result<f64> {
        let idx = self.profile_indices(t, profile)?;
        Ok(idx
            .iter()
            .enumerate()
            .map(|(i, j)| self.dist(t, i).probs()[*j])
            .product())
    }

    /// Density of the opponents' values `f(v_{-i})`; `profile.values[i]` is ignored.
    pub fn opponent_density(&self, t: usize, i: usize, profile: &Profile) -> Result<f64> {
        self.check_period(t)?;
        if profile.values.len() != self.buyers {
            return Err(Error::input("profile length differs from k"));
        }
        let mut d = 1.0;
        for (j, v) in profile.values.iter().enumerate() {
            if j == i {
                continue;
            }
            let idx = self
                .dist(t, j)
                .index_of(*v)
                .ok_or_else(|| Error::input(format!("value {v} not in support of buyer {j} at period {t}")))?;
            d *= self.dist(t, j).probs()[idx];
        }
        Ok(d)
    }

    pub fn discrete_vartheta(&self, t: usize, i: usize, v: f64) -> Result<f64> {
        self.check_period(t)?;
        if i >= self.buyers {
            return Err(Error::input(format!("buyer {i} out of range")));
        }
        let d = self.dist(t, i);
        let j = d
            .index_of(v)
            .ok_or_else(|| Error::input(format!("value {v} not in support of buyer {i} at period {t}")))?;
        Ok(d.vartheta(j))
    }

    fn profile_indices(&self, t: usize, profile: &Profile) -> Result<Vec<usize>> {
        self.check_period(t)?;
        if profile.values.len() != self.buyers {
            return Err(Error::input(format!(
                "profile has {} values, expected k = {}",
                profile.values.len(),
                self.buyers
            )));
        }
        profile
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                self.dist(t, i)
                    .index_of(*v)
                    .ok_or_else(|| Error::input(format!("value {v} not in support of buyer {i} at period {t}")))
            })
            .collect()
    }

    /// Number of complete value paths, `prod_t |V^t|`, saturating.
    pub fn path_count(&self) -> usize {
        (1..=self.horizon).fold(1usize, |acc, t| acc.saturating_mul(self.period_space(t).len()))
    }

    /// Expected total surplus `sum_t E[max_i v_i^t]`.
    pub fn total_surplus(&self) -> f64 {
        (1..=self.horizon)
            .map(|t| {
                let space = self.period_space(t);
                (0..space.len())
                    .map(|p| {
                        let best = (0..self.buyers).map(|i| space.value(i, p)).fold(f64::MIN, f64::max);
                        space.density(p) * best
                    })
                    .sum::<f64>()
            })
            .sum()
    }

    /// Seeded random instance with `k <= max_buyers`, `T <= max_horizon` and
    /// supports of size `1..=max_support` drawn from the integers `1..=6`.
    pub fn random(seed: u64, max_buyers: usize, max_horizon: usize, max_support: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.gen_range(1..=max_buyers);
        let horizon = rng.gen_range(1..=max_horizon);
        let dists = (0..horizon)
            .map(|_| (0..k).map(|_| random_distribution(&mut rng, max_support)).collect())
            .collect();
        Self::new(horizon, k, dists).expect("generated instance is valid")
    }

    /// Seeded random instance with exactly the given shape.
    pub fn random_shape(seed: u64, buyers: usize, horizon: usize, max_support: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dists = (0..horizon)
            .map(|_| (0..buyers).map(|_| random_distribution(&mut rng, max_support)).collect())
            .collect();
        Self::new(horizon, buyers, dists).expect("generated instance is valid")
    }
}

fn random_distribution(rng: &mut ChaCha8Rng, max_support: usize) -> DiscreteDistribution {
    let n = rng.gen_range(1..=max_support);
    let mut values: Vec<f64> = Vec::with_capacity(n);
    while values.len() < n {
        let v = rng.gen_range(1..=6) as f64;
        if !values.contains(&v) {
            values.push(v);
        }
    }
    values.sort_by(f64::total_cmp);
    let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..1.0)).collect();
    let total: f64 = weights.iter().sum();
    let mut probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
    // push rounding residue into the last entry so the sum is 1 to machine precision
    let head: f64 = probs[..n - 1].iter().sum();
    probs[n - 1] = 1.0 - head;
    DiscreteDistribution::new(values, probs).expect("generated distribution is valid")
}

/// Enumeration of the joint value profiles of one period in mixed radix
/// (buyer 0 varies fastest), with precomputed densities and opponent indices.
#[derive(Clone, Debug)]
pub struct PeriodSpace {
    dists: Vec<DiscreteDistribution>,
    radices: Vec<usize>,
    strides: Vec<usize>,
    len: usize,
    density: Vec<f64>,
    indices: Vec<Vec<usize>>,
    opp_index: Vec<Vec<usize>>,
    opp_len: Vec<usize>,
    opp_density: Vec<Vec<f64>>,
    columns: Vec<Vec<Vec<usize>>>,
}

impl PeriodSpace {
    pub fn new(dists: &[DiscreteDistribution]) -> Self {
        let radices: Vec<usize> = dists.iter().map(|d| d.len()).collect();
        let k = radices.len();
        let mut strides = vec![1; k];
        for i in 1..k {
            strides[i] = strides[i - 1] * radices[i - 1];
        }
        let len: usize = radices.iter().product();
        let mut indices = Vec::with_capacity(len);
        let mut density = Vec::with_capacity(len);
        for p in 0..len {
            let idx: Vec<usize> = (0..k).map(|i| (p / strides[i]) % radices[i]).collect();
            density.push(idx.iter().enumerate().map(|(i, j)| dists[i].probs()[*j]).product());
            indices.push(idx);
        }
        let mut opp_len = vec![1; k];
        let mut opp_index = vec![vec![0; len]; k];
        let mut opp_density = Vec::with_capacity(k);
        for i in 0..k {
            opp_len[i] = len / radices[i];
            let mut dens = vec![0.0; opp_len[i]];
            for p in 0..len {
                let mut o = 0;
                let mut stride = 1;
                for j in 0..k {
                    if j == i {
                        continue;
                    }
                    o += indices[p][j] * stride;
                    stride *= radices[j];
                }
                opp_index[i][p] = o;
                if indices[p][i] == 0 {
                    dens[o] = (0..k)
                        .filter(|j| *j != i)
                        .map(|j| dists[j].probs()[indices[p][j]])
                        .product();
                }
            }
            opp_density.push(dens);
        }
        let mut columns: Vec<Vec<Vec<usize>>> = (0..k).map(|i| vec![Vec::new(); opp_len[i]]).collect();
        for i in 0..k {
            for p in 0..len {
                if indices[p][i] == 0 {
                    columns[i][opp_index[i][p]] = (0..radices[i]).map(|j| p + j * strides[i]).collect();
                }
            }
        }
        Self {
            dists: dists.to_vec(),
            radices,
            strides,
            len,
            density,
            indices,
            opp_index,
            opp_len,
            opp_density,
            columns,
        }
    }

    pub fn buyers(&self) -> usize {
        self.radices.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dist(&self, i: usize) -> &DiscreteDistribution {
        &self.dists[i]
    }

    pub fn radix(&self, i: usize) -> usize {
        self.radices[i]
    }

    /// Support indices of profile `p`.
    pub fn indices(&self, p: usize) -> &[usize] {
        &self.indices[p]
    }

    pub fn value(&self, i: usize, p: usize) -> f64 {
        self.dists[i].support()[self.indices[p][i]]
    }

    pub fn profile(&self, p: usize) -> Profile {
        Profile::new((0..self.buyers()).map(|i| self.value(i, p)).collect())
    }

    pub fn density(&self, p: usize) -> f64 {
        self.density[p]
    }

    /// Index of `v_{-i}` for profile `p`.
    pub fn opp(&self, i: usize, p: usize) -> usize {
        self.opp_index[i][p]
    }

    pub fn opp_len(&self, i: usize) -> usize {
        self.opp_len[i]
    }

    pub fn opp_density(&self, i: usize, o: usize) -> f64 {
        self.opp_density[i][o]
    }

    /// Profile obtained from `p` by setting buyer `i`'s support index to `j`.
    pub fn with_own(&self, p: usize, i: usize, j: usize) -> usize {
        p - self.indices[p][i] * self.strides[i] + j * self.strides[i]
    }

    /// The profiles sharing opponent index `o`, ordered by buyer `i`'s own value.
    pub fn column(&self, i: usize, o: usize) -> &[usize] {
        &self.columns[i][o]
    }

    pub fn index_of(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(j, s)| j * s).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_point() -> DiscreteDistribution {
        DiscreteDistribution::uniform(vec![1.0, 2.0]).unwrap()
    }

    #[test]
    fn joint_density_examples() {
        let one = Instance::iid(1, vec![two_point()]).unwrap();
        assert_eq!(one.joint_density(1, &Profile::new(vec![2.0])).unwrap(), 0.5);

        let two = Instance::iid(1, vec![two_point(), two_point()]).unwrap();
        assert_eq!(two.joint_density(1, &Profile::new(vec![1.0, 2.0])).unwrap(), 0.25);

        let skew = DiscreteDistribution::new(vec![1.0, 2.0], vec![0.3, 0.7]).unwrap();
        let inst = Instance::iid(1, vec![skew, two_point()]).unwrap();
        let d = inst.joint_density(1, &Profile::new(vec![1.0, 2.0])).unwrap();
        assert!((d - 0.15).abs() < 1e-15);
        let o = inst.opponent_density(1, 0, &Profile::new(vec![1.0, 2.0])).unwrap();
        assert_eq!(o, 0.5);
    }

    #[test]
    fn joint_density_rejects_bad_input() {
        let inst = Instance::iid(2, vec![two_point()]).unwrap();
        assert!(inst.joint_density(0, &Profile::new(vec![1.0])).is_err());
        assert!(inst.joint_density(3, &Profile::new(vec![1.0])).is_err());
        assert!(inst.joint_density(1, &Profile::new(vec![1.5])).is_err());
        assert!(inst.discrete_vartheta(1, 0, 3.0).is_err());
    }

    #[test]
    fn vartheta_examples() {
        let inst = Instance::iid(1, vec![two_point()]).unwrap();
        assert_eq!(inst.discrete_vartheta(1, 0, 2.0).unwrap(), 0.0);
        assert_eq!(inst.discrete_vartheta(1, 0, 1.0).unwrap(), 1.0);
        let point = Instance::iid(1, vec![DiscreteDistribution::degenerate(3.0).unwrap()]).unwrap();
        assert_eq!(point.discrete_vartheta(1, 0, 3.0).unwrap(), 0.0);
    }

    #[test]
    fn posted_price_identity() {
        // posted price 1 on {1,2}: u'(1) = 0, u'(2) = 1
        let d = two_point();
        let lhs = 0.5 * 0.0 + 0.5 * 1.0;
        let rhs: f64 = (0..2).map(|j| d.probs()[j] * d.vartheta(j) * 1.0).sum();
        assert_eq!(lhs, 0.5);
        assert_eq!(rhs, 0.5);
    }

    #[test]
    fn validation() {
        assert!(DiscreteDistribution::new(vec![], vec![]).is_err());
        assert!(DiscreteDistribution::new(vec![1.0, 1.0], vec![0.5, 0.5]).is_err());
        assert!(DiscreteDistribution::new(vec![-1.0, 1.0], vec![0.5, 0.5]).is_err());
        assert!(DiscreteDistribution::new(vec![1.0, 2.0], vec![0.5, 0.6]).is_err());
        assert!(DiscreteDistribution::new(vec![1.0, 2.0], vec![1.0, 0.0]).is_err());
        assert!(Instance::new(0, 1, vec![]).is_err());
        assert!(Instance::new(1, 2, vec![vec![two_point()]]).is_err());
    }

    #[test]
    fn json_roundtrip_and_validation() {
        let text = r#"{"T": 2, "k": 1, "dists": [[{"support": [1, 2], "probs": [0.5, 0.5]}],
                                                [{"support": [3], "probs": [1.0]}]]}"#;
        let inst = Instance::from_json(text).unwrap();
        assert_eq!(inst.horizon(), 2);
        assert_eq!(Instance::from_json(&inst.to_json()).unwrap(), inst);
        let bad = r#"{"T": 1, "k": 1, "dists": [[{"support": [1, 2], "probs": [0.5, 0.6]}]]}"#;
        assert!(Instance::from_json(bad).is_err());
    }

    #[test]
    fn period_space_layout() {
        let a = DiscreteDistribution::new(vec![1.0, 2.0, 4.0], vec![0.2, 0.3, 0.5]).unwrap();
        let b = two_point();
        let space = PeriodSpace::new(&[a, b]);
        assert_eq!(space.len(), 6);
        assert_eq!(space.opp_len(0), 2);
        assert_eq!(space.opp_len(1), 3);
        for p in 0..space.len() {
            assert_eq!(space.index_of(space.indices(p)), p);
            for i in 0..2 {
                let col = space.column(i, space.opp(i, p));
                assert!(col.contains(&p));
                assert!((space.opp_density(i, space.opp(i, p)) * space.dist(i).probs()[space.indices(p)[i]]
                    - space.density(p))
                .abs()
                    < 1e-15);
            }
        }
    }

    #[test]
    fn random_instances_are_valid() {
        for seed in 0..50 {
            let inst = Instance::random(seed, 2, 2, 3);
            assert!(inst.buyers() <= 2 && inst.horizon() <= 2);
            assert_eq!(Instance::random(seed, 2, 2, 3), inst);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn densities_sum_to_one(seed in 0u64..10_000) {
                let inst = Instance::random(seed, 3, 2, 3);
                for t in 1..=inst.horizon() {
                    let space = inst.period_space(t);
                    let total: f64 = (0..space.len()).map(|p| space.density(p)).sum();
                    prop_assert!((total - 1.0).abs() < 1e-10);
                }
            }

            #[test]
            fn vartheta_identity_for_monotone_allocations(
                seed in 0u64..10_000,
                raw in proptest::collection::vec(0.0f64..1.0, 3),
            ) {
                let inst = Instance::random_shape(seed, 1, 1, 3);
                let d = inst.dist(1, 0);
                let mut x: Vec<f64> = raw[..d.len()].to_vec();
                x.sort_by(f64::total_cmp);
                // discrete envelope: u'(v_m) = sum_{j<m} x_j (v_{j+1} - v_j)
                let mut u = vec![0.0; d.len()];
                for m in 1..d.len() {
                    u[m] = u[m - 1] + x[m - 1] * d.gap(m - 1);
                }
                let lhs: f64 = (0..d.len()).map(|j| d.probs()[j] * u[j]).sum();
                let rhs: f64 = (0..d.len()).map(|j| d.probs()[j] * d.vartheta(j) * x[j]).sum();
                prop_assert!((lhs - rhs).abs() < 1e-10);
                prop_assert!((0..d.len()).all(|j| d.vartheta(j) >= 0.0));
            }
        }
    }
}
