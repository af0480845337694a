//! Allocation policies: leave-one-out, exact and Monte-Carlo Shapley, and the
//! recursive online update.
//!
//! Every policy produces unnormalized `contributions` plus the `normalizer`
//! (central-only loss minus grand-coalition loss). Shares are their ratio.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::design::Coalition;
use crate::error::{MarketError, Result};
use crate::table::CoalitionLossTable;

/// Marginal contributions smaller than this (relative) are treated as zero.
pub const MARGINAL_SNAP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AllocationPolicy {
    /// Leave-one-out, dropping each feature from the grand coalition.
    LooA,
    /// Leave-one-out, adding each feature to the central-only model.
    LooB,
    LooVariance,
    Shapley,
    ZeroShapley,
    AbsoluteShapley,
    McShapley,
}

impl AllocationPolicy {
    pub fn shapley_variant(self) -> Option<ShapleyVariant> {
        match self {
            AllocationPolicy::Shapley | AllocationPolicy::McShapley => Some(ShapleyVariant::Original),
            AllocationPolicy::ZeroShapley => Some(ShapleyVariant::Zero),
            AllocationPolicy::AbsoluteShapley => Some(ShapleyVariant::Absolute),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapleyVariant {
    #[default]
    Original,
    Zero,
    Absolute,
}

impl ShapleyVariant {
    fn policy(self) -> AllocationPolicy {
        match self {
            ShapleyVariant::Original => AllocationPolicy::Shapley,
            ShapleyVariant::Zero => AllocationPolicy::ZeroShapley,
            ShapleyVariant::Absolute => AllocationPolicy::AbsoluteShapley,
        }
    }

    #[inline]
    fn apply(self, m: f64) -> f64 {
        match self {
            ShapleyVariant::Original => m,
            ShapleyVariant::Zero => m.max(0.0),
            ShapleyVariant::Absolute => m.abs(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LooVariant {
    DropOne,
    AddOne,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationVector {
    pub policy: AllocationPolicy,
    pub features: Vec<String>,
    /// Unnormalized loss reduction credited to each feature.
    pub contributions: Vec<f64>,
    pub normalizer: f64,
    /// `contributions / normalizer`, or zeros when there is no surplus.
    pub shares: Vec<f64>,
    pub no_surplus: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std_errors: Option<Vec<f64>>,
}

impl AllocationVector {
    pub fn new(policy: AllocationPolicy, features: Vec<String>, contributions: Vec<f64>, normalizer: f64) -> Self {
        let no_surplus = !(normalizer > 0.0);
        let shares = if no_surplus {
            vec![0.0; contributions.len()]
        } else {
            contributions.iter().map(|c| c / normalizer).collect()
        };
        AllocationVector {
            policy,
            features,
            contributions,
            normalizer,
            shares,
            no_surplus,
            std_errors: None,
        }
    }

    pub fn share(&self, feature: &str) -> Option<f64> {
        self.features.iter().position(|f| f == feature).map(|i| self.shares[i])
    }

    pub fn contribution(&self, feature: &str) -> Option<f64> {
        self.features
            .iter()
            .position(|f| f == feature)
            .map(|i| self.contributions[i])
    }

    pub fn share_sum(&self) -> f64 {
        self.shares.iter().sum()
    }

    /// `1 - sum(shares)`: surplus not attributed to the listed features.
    pub fn shortfall(&self) -> f64 {
        1.0 - self.share_sum()
    }

    pub fn as_map(&self) -> BTreeMap<String, f64> {
        self.features.iter().cloned().zip(self.shares.iter().copied()).collect()
    }

    fn require_surplus(self) -> Result<Self> {
        if self.no_surplus {
            Err(MarketError::NoSurplus(self.normalizer))
        } else {
            Ok(self)
        }
    }
}

#[inline]
fn marginal(without: f64, with: f64) -> f64 {
    let m = without - with;
    if m.abs() <= MARGINAL_SNAP * without.abs().max(with.abs()).max(1.0) {
        0.0
    } else {
        m
    }
}

fn surplus(losses: &[f64]) -> f64 {
    losses[0] - losses[losses.len() - 1]
}

pub fn loo_allocation(table: &CoalitionLossTable, variant: LooVariant) -> Result<AllocationVector> {
    loo_contributions(table, variant)?.require_surplus()
}

pub(crate) fn loo_contributions(table: &CoalitionLossTable, variant: LooVariant) -> Result<AllocationVector> {
    let losses = table.dense()?;
    let full = table.full_mask();
    let contributions = (0..table.n_players())
        .map(|k| {
            let bit = 1 << k;
            match variant {
                LooVariant::DropOne => marginal(losses[full & !bit], losses[full]),
                LooVariant::AddOne => marginal(losses[0], losses[bit]),
            }
        })
        .collect();
    let policy = match variant {
        LooVariant::DropOne => AllocationPolicy::LooA,
        LooVariant::AddOne => AllocationPolicy::LooB,
    };
    Ok(AllocationVector::new(
        policy,
        table.players().to_vec(),
        contributions,
        surplus(&losses),
    ))
}

/// Shares proportional to `beta_k^2 * Var[x_k]`.
pub fn loo_variance_allocation(
    coefficients: &BTreeMap<String, f64>,
    variances: &BTreeMap<String, f64>,
) -> Result<AllocationVector> {
    let mut features = Vec::new();
    let mut contributions = Vec::new();
    for (name, beta) in coefficients {
        let var = variances.get(name).ok_or_else(|| MarketError::Lookup(name.clone()))?;
        if *var < 0.0 || !var.is_finite() || !beta.is_finite() {
            return Err(MarketError::Numeric(format!(
                "variance {var} or coefficient {beta} for {name}"
            )));
        }
        features.push(name.clone());
        contributions.push(beta * beta * var);
    }
    let total = contributions.iter().sum();
    AllocationVector::new(AllocationPolicy::LooVariance, features, contributions, total).require_surplus()
}

/// Shapley weights `s! (K - s - 1)! / K!` for coalition sizes `s = 0..K`.
fn shapley_weights(k: usize) -> Vec<f64> {
    let mut w = vec![0.0; k];
    if k == 0 {
        return w;
    }
    w[0] = 1.0 / k as f64;
    for s in 1..k {
        w[s] = w[s - 1] * s as f64 / (k - s) as f64;
    }
    w
}

fn shapley_dense(losses: &[f64], k: usize, variant: ShapleyVariant) -> Vec<f64> {
    let weights = shapley_weights(k);
    (0..k)
        .map(|i| {
            let bit = 1usize << i;
            let mut acc = 0.0;
            for mask in 0..losses.len() {
                if mask & bit != 0 {
                    continue;
                }
                let m = marginal(losses[mask], losses[mask | bit]);
                if m != 0.0 {
                    acc += weights[mask.count_ones() as usize] * variant.apply(m);
                }
            }
            acc
        })
        .collect()
}

/// Unnormalized Shapley contributions; never fails on a missing surplus.
pub fn shapley_contributions(table: &CoalitionLossTable, variant: ShapleyVariant) -> Result<AllocationVector> {
    let losses = table.dense()?;
    let contributions = shapley_dense(&losses, table.n_players(), variant);
    Ok(AllocationVector::new(
        variant.policy(),
        table.players().to_vec(),
        contributions,
        surplus(&losses),
    ))
}

pub fn shapley_allocation(table: &CoalitionLossTable, variant: ShapleyVariant) -> Result<AllocationVector> {
    shapley_contributions(table, variant)?.require_surplus()
}

/// Shapley allocation on a single time step's losses. A non-positive surplus
/// is flagged on the vector rather than raised.
pub fn instant_allocation(losses: &CoalitionLossTable, variant: ShapleyVariant) -> Result<AllocationVector> {
    shapley_contributions(losses, variant)
}

/// Contributions for any table-based policy, without the surplus check.
pub(crate) fn contributions_for(table: &CoalitionLossTable, policy: AllocationPolicy) -> Result<AllocationVector> {
    match policy {
        AllocationPolicy::LooA => loo_contributions(table, LooVariant::DropOne),
        AllocationPolicy::LooB => loo_contributions(table, LooVariant::AddOne),
        p => match p.shapley_variant() {
            Some(v) => shapley_contributions(table, v),
            None => Err(MarketError::Parameter(format!(
                "policy {p:?} does not operate on a coalition loss table"
            ))),
        },
    }
}

/// `psi_t = lambda * psi_{t-1} + (1 - lambda) * psi_instant`, applied to the
/// contributions and the normalizer alike.
pub fn online_allocation_update(
    prev: &AllocationVector,
    instant: &AllocationVector,
    lambda: f64,
) -> Result<AllocationVector> {
    if prev.features != instant.features {
        return Err(MarketError::Parameter(format!(
            "feature sets differ: {:?} vs {:?}",
            prev.features, instant.features
        )));
    }
    if prev.policy != instant.policy {
        return Err(MarketError::Parameter(format!(
            "policies differ: {:?} vs {:?}",
            prev.policy, instant.policy
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(MarketError::Parameter(format!(
            "forgetting factor {lambda} outside [0, 1]"
        )));
    }
    let mix = |a: f64, b: f64| lambda * a + (1.0 - lambda) * b;
    let contributions = prev
        .contributions
        .iter()
        .zip(&instant.contributions)
        .map(|(a, b)| mix(*a, *b))
        .collect();
    Ok(AllocationVector::new(
        prev.policy,
        prev.features.clone(),
        contributions,
        mix(prev.normalizer, instant.normalizer),
    ))
}

fn factorial_at_most(k: usize, limit: usize) -> bool {
    let mut f: usize = 1;
    for i in 2..=k {
        f = match f.checked_mul(i) {
            Some(v) => v,
            None => return false,
        };
        if f > limit {
            return false;
        }
    }
    true
}

/// Lexicographic successor; false once the last permutation is reached.
fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Monte-Carlo Shapley over random permutations, sampled in antithetic pairs
/// (a permutation and its reverse). When `samples` covers every permutation
/// the orders are enumerated instead and the result is exact.
pub fn shapley_montecarlo<F>(loss_oracle: F, features: &[String], samples: usize, seed: u64) -> Result<AllocationVector>
where
    F: FnMut(&Coalition) -> Result<f64>,
{
    if samples == 0 {
        return Err(MarketError::Parameter("at least one sample is required".into()));
    }
    let mut players = features.to_vec();
    players.sort();
    players.dedup();
    let k = players.len();
    if k > 63 {
        return Err(MarketError::CapExceeded { features: k, cap: 63 });
    }
    let mut oracle = loss_oracle;
    let mut cache: HashMap<u64, f64> = HashMap::new();
    let mut value = |mask: u64| -> Result<f64> {
        if let Some(v) = cache.get(&mask) {
            return Ok(*v);
        }
        let c: Coalition = players
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, p)| p.clone())
            .collect();
        let v = oracle(&c).map_err(|e| e.in_coalition(&c))?;
        cache.insert(mask, v);
        Ok(v)
    };

    let empty = value(0)?;
    let full = value(if k == 0 { 0 } else { (1u64 << k) - 1 })?;
    let normalizer = empty - full;

    let mut walk = |order: &[usize], out: &mut [f64]| -> Result<()> {
        let mut mask = 0u64;
        let mut prev = value(mask)?;
        for &i in order {
            mask |= 1 << i;
            let next = value(mask)?;
            out[i] = marginal(prev, next);
            prev = next;
        }
        Ok(())
    };

    let mut sample = vec![0.0; k];
    let mut sum = vec![0.0; k];
    let mut sum_sq = vec![0.0; k];
    if factorial_at_most(k, samples) {
        let mut order: Vec<usize> = (0..k).collect();
        let mut n = 0usize;
        loop {
            walk(&order, &mut sample)?;
            for i in 0..k {
                sum[i] += sample[i];
            }
            n += 1;
            if !next_permutation(&mut order) {
                break;
            }
        }
        let contributions: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut out = AllocationVector::new(AllocationPolicy::McShapley, players, contributions, normalizer);
        out.std_errors = Some(vec![0.0; k]);
        return Ok(out);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = samples.div_ceil(2);
    let mut order: Vec<usize> = (0..k).collect();
    let mut reverse = vec![0.0; k];
    for _ in 0..pairs {
        order.shuffle(&mut rng);
        walk(&order, &mut sample)?;
        let rev: Vec<usize> = order.iter().rev().copied().collect();
        walk(&rev, &mut reverse)?;
        for i in 0..k {
            let v = 0.5 * (sample[i] + reverse[i]);
            sum[i] += v;
            sum_sq[i] += v * v;
        }
    }
    let draws = pairs;
    let n = draws as f64;
    let contributions: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std_errors = sum_sq
        .iter()
        .zip(&contributions)
        .map(|(sq, mean)| {
            if draws < 2 {
                return f64::NAN;
            }
            let var = ((sq - n * mean * mean) / (n - 1.0)).max(0.0);
            let se = (var / n).sqrt();
            if normalizer > 0.0 {
                se / normalizer
            } else {
                se
            }
        })
        .collect();
    let mut out = AllocationVector::new(AllocationPolicy::McShapley, players, contributions, normalizer);
    out.std_errors = Some(std_errors);
    Ok(out)
}

/// Monte-Carlo Shapley driven by a complete table (mainly for testing).
pub fn shapley_montecarlo_table(table: &CoalitionLossTable, samples: usize, seed: u64) -> Result<AllocationVector> {
    let losses = table.dense()?;
    shapley_montecarlo(|c| Ok(losses[table.mask_of(c)?]), table.players(), samples, seed)
}
