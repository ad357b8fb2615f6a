//! Inverse-stability budget allocation for compressed heads.
//!
//! Full-cache heads (volatile, pivot) are charged the whole prefill length.
//! What remains of the `rho * N * L` budget is spread over the compressed
//! heads (anchor, satellite) proportionally to `1 / (s_stable + epsilon)`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profiler::TaxonomyResult;
use crate::scalar::Scalar;
use crate::trace::HeadId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    /// Floors plus one extra token for the largest fractional parts, so the
    /// integer lengths sum to the rounded real total.
    #[default]
    LargestRemainder,
    Floor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetConfig<T = f64> {
    pub rho: T,
    pub epsilon: T,
    pub rounding: Rounding,
    pub min_length: usize,
}

impl<T: Scalar> Default for BudgetConfig<T> {
    fn default() -> Self {
        Self {
            rho: T::lit(0.5),
            epsilon: T::lit(1e-6),
            rounding: Rounding::LargestRemainder,
            min_length: 16,
        }
    }
}

impl<T: Scalar> BudgetConfig<T> {
    pub fn validate(&self) -> Result<(), BudgetError> {
        if !(self.rho > T::zero() && self.rho <= T::one()) {
            return Err(BudgetError::Config(format!(
                "rho {} outside (0,1]",
                self.rho
            )));
        }
        if !(self.epsilon > T::zero()) || !self.epsilon.is_finite() {
            return Err(BudgetError::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BudgetError {
    #[error("invalid budget config: {0}")]
    Config(String),
    #[error(
        "infeasible budget: rho*N = {budget_heads} does not exceed the {n_full} full-cache heads; \
         lower tau_stable/tau_sim or raise rho"
    )]
    Infeasible { budget_heads: f64, n_full: usize },
    #[error("{n_comp} compressed heads need {needed} tokens at min_length, budget is {available}")]
    MinLengthInfeasible {
        n_comp: usize,
        needed: usize,
        available: f64,
    },
    #[error("no compressed heads to allocate")]
    EmptyCompressedSet,
    #[error("stability score {0} outside [0,1]")]
    InvalidScore(f64),
    #[error("head counts disagree: {0}")]
    HeadCount(String),
}

/// `(rho * N - N_full) * L / N_comp`.
pub fn base_length<T: Scalar>(
    rho: T,
    n: usize,
    n_full: usize,
    n_comp: usize,
    prefill_len: usize,
) -> Result<T, BudgetError> {
    if n != n_full + n_comp {
        return Err(BudgetError::HeadCount(format!(
            "N = {} but N_full + N_comp = {}",
            n,
            n_full + n_comp
        )));
    }
    if n_comp == 0 {
        return Err(BudgetError::EmptyCompressedSet);
    }
    let budget_heads = rho * T::from_count(n);
    if budget_heads <= T::from_count(n_full) {
        return Err(BudgetError::Infeasible {
            budget_heads: budget_heads.as_f64(),
            n_full,
        });
    }
    Ok((budget_heads - T::from_count(n_full)) * T::from_count(prefill_len) / T::from_count(n_comp))
}

/// Per-head result of [`allocate`], in input order.
#[derive(Clone, Debug, PartialEq)]
pub struct Allocation<T = f64> {
    pub weights: Vec<T>,
    /// Real-valued lengths after clamping to `[min_length, L]`.
    pub shares: Vec<T>,
    pub lengths: Vec<usize>,
}

/// Splits `N_comp * base_length` tokens over compressed heads with weights
/// `1 / (s_stable + epsilon)`.
///
/// Shares are clamped to `[min_length, prefill_len]` by water-filling (the
/// clamped heads are fixed and the rest re-split proportionally) and then
/// integerized according to `config.rounding`.
pub fn allocate<T: Scalar>(
    stabilities: &[T],
    base_length: T,
    prefill_len: usize,
    config: &BudgetConfig<T>,
) -> Result<Allocation<T>, BudgetError> {
    config.validate()?;
    if stabilities.is_empty() {
        return Err(BudgetError::EmptyCompressedSet);
    }
    if let Some(&s) = stabilities
        .iter()
        .find(|&&s| !(s >= T::zero() && s <= T::one()))
    {
        return Err(BudgetError::InvalidScore(s.as_f64()));
    }
    let n = stabilities.len();
    let total = T::from_count(n) * base_length;
    let needed = n * config.min_length;
    if config.min_length > prefill_len || T::from_count(needed) > total {
        return Err(BudgetError::MinLengthInfeasible {
            n_comp: n,
            needed,
            available: total.as_f64(),
        });
    }

    let weights: Vec<T> = stabilities
        .iter()
        .map(|&s| T::one() / (s + config.epsilon))
        .collect();
    let lo = T::from_count(config.min_length);
    let hi = T::from_count(prefill_len);

    if total > T::from_count(n) * hi {
        return Err(BudgetError::Config(format!(
            "{} tokens exceed {} heads at the prefill length {}",
            total, n, prefill_len
        )));
    }
    let shares = water_fill(&weights, total, lo, hi);

    let lengths = match config.rounding {
        Rounding::Floor => shares
            .iter()
            .map(|s| s.floor().to_usize().unwrap_or(0))
            .collect(),
        Rounding::LargestRemainder => {
            let target = total.round().to_usize().unwrap_or(0);
            largest_remainder(&shares, &weights, target, prefill_len)
        }
    };
    Ok(Allocation {
        weights,
        shares,
        lengths,
    })
}

/// Solves `share_i = clamp(lambda * w_i, lo, hi)` with `sum(share) = total`.
///
/// Low-clamped heads are always the lightest and high-clamped the heaviest, so
/// the active sets are a prefix and a suffix of the weight order; each split is
/// checked for consistency, the unclamped solution first.
fn water_fill<T: Scalar>(weights: &[T], total: T, lo: T, hi: T) -> Vec<T> {
    let n = weights.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        weights[a]
            .partial_cmp(&weights[b])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut prefix = vec![T::zero(); n + 1];
    for (k, &i) in order.iter().enumerate() {
        prefix[k + 1] = prefix[k] + weights[i];
    }
    let tol = T::epsilon().sqrt() * total.abs().max(hi).max(T::one());
    let w = |k: usize| weights[order[k]];
    for a in 0..=n {
        for b in 0..=n - a {
            let clamped = T::from_count(a) * lo + T::from_count(b) * hi;
            let mut shares = vec![T::zero(); n];
            if a + b == n {
                if (clamped - total).abs() > tol {
                    continue;
                }
                for (k, &i) in order.iter().enumerate() {
                    shares[i] = if k < a { lo } else { hi };
                }
                return shares;
            }
            let lambda = (total - clamped) / (prefix[n - b] - prefix[a]);
            let consistent = (a == 0 || lambda * w(a - 1) <= lo + tol)
                && lambda * w(a) >= lo - tol
                && lambda * w(n - b - 1) <= hi + tol
                && (b == 0 || lambda * w(n - b) >= hi - tol);
            if !consistent {
                continue;
            }
            for (k, &i) in order.iter().enumerate() {
                shares[i] = if k < a {
                    lo
                } else if k >= n - b {
                    hi
                } else {
                    lambda * weights[i]
                };
            }
            return shares;
        }
    }
    // unreachable for n*lo <= total <= n*hi; fall back to an even split
    vec![total / T::from_count(n); n]
}

fn largest_remainder<T: Scalar>(
    shares: &[T],
    weights: &[T],
    target: usize,
    cap: usize,
) -> Vec<usize> {
    let mut lengths: Vec<usize> = shares
        .iter()
        .map(|s| s.floor().to_usize().unwrap_or(0))
        .collect();
    let assigned: usize = lengths.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    // largest fractional part first; ties favour the heavier (less stable) head
    order.sort_by(|&a, &b| {
        let ra = shares[a] - shares[a].floor();
        let rb = shares[b] - shares[b].floor();
        rb.partial_cmp(&ra)
            .unwrap_or(Ordering::Equal)
            .then_with(|| {
                weights[b]
                    .partial_cmp(&weights[a])
                    .unwrap_or(Ordering::Equal)
            })
            .then_with(|| a.cmp(&b))
    });
    if target >= assigned {
        let mut deficit = target - assigned;
        for &i in order.iter().cycle().take(order.len() * 2) {
            if deficit == 0 {
                break;
            }
            if lengths[i] < cap {
                lengths[i] += 1;
                deficit -= 1;
            }
        }
    } else {
        let mut surplus = assigned - target;
        for &i in order.iter().rev() {
            if surplus == 0 {
                break;
            }
            if lengths[i] > 0 {
                lengths[i] -= 1;
                surplus -= 1;
            }
        }
    }
    lengths
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadLength {
    pub layer: u32,
    pub head: u32,
    pub length: usize,
}

/// Per-head cache lengths for one taxonomy and budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan<T = f64> {
    pub rho: T,
    pub prefill_len: usize,
    pub num_heads: usize,
    pub num_full: usize,
    pub num_comp: usize,
    pub base_length: T,
    /// `round(base_length)`: pivot baseline size and uniform length without allocation.
    pub base_length_int: usize,
    /// Compressed heads only, in `(layer, head)` order.
    pub lengths: Vec<HeadLength>,
    /// `N_full * L + sum(l_i)`.
    pub planned_entries: usize,
    /// `rho * N * L`.
    pub budget_ceiling: T,
}

impl<T: Scalar> BudgetPlan<T> {
    pub fn length_of(&self, id: HeadId) -> Option<usize> {
        self.lengths
            .iter()
            .find(|h| h.layer == id.layer && h.head == id.head)
            .map(|h| h.length)
    }

    /// Ceiling plus the per-head integer rounding slack.
    pub fn ceiling_with_slack(&self) -> T {
        self.budget_ceiling + T::from_count(self.num_comp)
    }
}

/// Builds the budget plan of `taxonomy` for prefill length `prefill_len`.
pub fn plan_budget<T: Scalar>(
    taxonomy: &TaxonomyResult<T>,
    prefill_len: usize,
    config: &BudgetConfig<T>,
) -> Result<BudgetPlan<T>, BudgetError> {
    config.validate()?;
    let n = taxonomy.num_heads();
    let comp: Vec<HeadId> = taxonomy.comp().into_iter().collect();
    let n_comp = comp.len();
    let n_full = n - n_comp;
    let budget_ceiling = config.rho * T::from_count(n) * T::from_count(prefill_len);

    if n_comp == 0 {
        // nothing to compress: only feasible when the budget covers every head
        if config.rho * T::from_count(n) < T::from_count(n_full) {
            return Err(BudgetError::Infeasible {
                budget_heads: (config.rho * T::from_count(n)).as_f64(),
                n_full,
            });
        }
        return Ok(BudgetPlan {
            rho: config.rho,
            prefill_len,
            num_heads: n,
            num_full: n_full,
            num_comp: 0,
            base_length: T::from_count(prefill_len),
            base_length_int: prefill_len,
            lengths: Vec::new(),
            planned_entries: n_full * prefill_len,
            budget_ceiling,
        });
    }

    let base = base_length(config.rho, n, n_full, n_comp, prefill_len)?;
    let stabilities: Vec<T> = comp
        .iter()
        .map(|&h| taxonomy.record(h).expect("comp head has a record").s_stable)
        .collect();
    let alloc = allocate(&stabilities, base, prefill_len, config)?;
    let lengths: Vec<HeadLength> = comp
        .iter()
        .zip(&alloc.lengths)
        .map(|(h, &length)| HeadLength {
            layer: h.layer,
            head: h.head,
            length,
        })
        .collect();
    let planned_entries = n_full * prefill_len + alloc.lengths.iter().sum::<usize>();
    Ok(BudgetPlan {
        rho: config.rho,
        prefill_len,
        num_heads: n,
        num_full: n_full,
        num_comp: n_comp,
        base_length: base,
        base_length_int: base.round().to_usize().unwrap_or(0),
        lengths,
        planned_entries,
        budget_ceiling,
    })
}
