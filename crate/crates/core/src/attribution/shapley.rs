use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{AttributionError, AttributionResult, Estimator};

/// Largest player count accepted by [`shapley_exact`].
pub const MAX_EXACT_PLAYERS: usize = 20;

/// A cooperative game over `players()` players.
pub trait CoalitionValue: Sync {
    fn players(&self) -> usize;

    /// Value of the coalition whose members are flagged `true`.
    fn value(&self, coalition: &[bool]) -> Result<f64, AttributionError>;
}

/// Adapts a closure over coalition masks.
pub struct FnValue<F> {
    players: usize,
    f: F,
}

impl<F> FnValue<F>
where
    F: Fn(&[bool]) -> f64 + Sync,
{
    pub fn new(players: usize, f: F) -> Self {
        Self { players, f }
    }
}

impl<F> CoalitionValue for FnValue<F>
where
    F: Fn(&[bool]) -> f64 + Sync,
{
    fn players(&self) -> usize {
        self.players
    }

    fn value(&self, coalition: &[bool]) -> Result<f64, AttributionError> {
        Ok((self.f)(coalition))
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn mask_bits(mask: usize, p: usize) -> Vec<bool> {
    (0..p).map(|j| mask >> j & 1 == 1).collect()
}

/// Shapley values by full enumeration of the `2^p` coalitions.
pub fn shapley_exact(game: &dyn CoalitionValue) -> Result<AttributionResult, AttributionError> {
    let p = game.players();
    if p == 0 {
        return Err(AttributionError::NoPlayers);
    }
    if p > MAX_EXACT_PLAYERS {
        return Err(AttributionError::TooManyPlayers {
            p,
            max: MAX_EXACT_PLAYERS,
        });
    }
    let n = 1usize << p;
    let values: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|mask| game.value(&mask_bits(mask, p)))
        .collect::<Result<_, _>>()?;

    // |S|!(p-|S|-1)!/p! == 1 / (p * C(p-1, |S|))
    let weights: Vec<f64> = (0..p).map(|s| 1.0 / (p as f64 * binomial(p - 1, s))).collect();
    let phi: Vec<f64> = (0..p)
        .into_par_iter()
        .map(|j| {
            let bit = 1usize << j;
            let mut acc = 0.0;
            for mask in (0..n).filter(|m| m & bit == 0) {
                acc += weights[mask.count_ones() as usize] * (values[mask | bit] - values[mask]);
            }
            acc
        })
        .collect();

    Ok(AttributionResult {
        phi,
        base_value: values[0],
        full_value: values[n - 1],
        estimator: Estimator::Exact,
    })
}

struct CoalitionSample {
    mask: Vec<bool>,
    weight: f64,
}

/// Coalition design: sizes whose subsets all fit in the budget are enumerated
/// with their exact kernel weight; the rest are drawn at random by size
/// (each draw followed by its complement) and share the remaining weight.
fn draw_coalitions(p: usize, budget: usize, rng: &mut ChaCha8Rng) -> Vec<CoalitionSample> {
    let sizes = (p - 1).div_ceil(2);
    let paired_sizes = (p - 1) / 2;

    // kernel mass of sizes s and p - s folded together
    let mut weight: Vec<f64> = (1..=sizes).map(|s| (p - 1) as f64 / (s * (p - s)) as f64).collect();
    for w in weight.iter_mut().take(paired_sizes) {
        *w *= 2.0;
    }
    let total: f64 = weight.iter().sum();
    weight.iter_mut().for_each(|w| *w /= total);

    let mut out: Vec<CoalitionSample> = Vec::new();
    let mut left = budget;
    let mut remaining = weight.clone();
    let mut full_sizes = 0;
    for s in 1..=sizes {
        let paired = s <= paired_sizes;
        let count = binomial(p, s) * if paired { 2.0 } else { 1.0 };
        if (left as f64) * remaining[s - 1] / count < 1.0 - 1e-8 {
            break;
        }
        full_sizes += 1;
        left -= count as usize;
        if remaining[s - 1] < 1.0 {
            let scale = 1.0 - remaining[s - 1];
            remaining.iter_mut().for_each(|w| *w /= scale);
        }
        let mut w = weight[s - 1] / binomial(p, s);
        if paired {
            w /= 2.0;
        }
        for members in combinations(p, s) {
            let mut mask = vec![false; p];
            for &m in &members {
                mask[m] = true;
            }
            if paired {
                out.push(CoalitionSample {
                    mask: mask.iter().map(|b| !b).collect(),
                    weight: w,
                });
            }
            out.push(CoalitionSample { mask, weight: w });
        }
    }

    if full_sizes < sizes && left > 0 {
        let fixed = out.len();
        let mut rest: Vec<f64> = weight.clone();
        for w in rest.iter_mut().take(paired_sizes) {
            *w /= 2.0;
        }
        let rest = &rest[full_sizes..];
        let dist = WeightedIndex::new(rest).expect("positive kernel weights");
        let mut seen: HashMap<Vec<bool>, usize> = HashMap::new();
        let mut draws = 0;
        while left > 0 && draws < 4 * budget {
            draws += 1;
            let s = dist.sample(rng) + full_sizes + 1;
            let mut mask = vec![false; p];
            for m in rand::seq::index::sample(rng, p, s) {
                mask[m] = true;
            }
            let complement = (s <= paired_sizes).then(|| mask.iter().map(|b| !b).collect::<Vec<bool>>());
            for m in std::iter::once(mask).chain(complement) {
                if let Some(&i) = seen.get(&m) {
                    out[i].weight += 1.0;
                } else if left > 0 {
                    seen.insert(m.clone(), out.len());
                    out.push(CoalitionSample { mask: m, weight: 1.0 });
                    left -= 1;
                }
            }
        }
        let weight_left: f64 = weight[full_sizes..].iter().sum();
        let drawn: f64 = out[fixed..].iter().map(|c| c.weight).sum();
        if drawn > 0.0 {
            for c in &mut out[fixed..] {
                c.weight *= weight_left / drawn;
            }
        }
    }
    out
}

fn combinations(n: usize, k: usize) -> impl Iterator<Item = Vec<usize>> {
    let mut idx: Vec<usize> = (0..k).collect();
    let mut done = k > n;
    std::iter::from_fn(move || {
        if done {
            return None;
        }
        let current = idx.clone();
        // advance to the next k-subset in lexicographic order
        let mut i = k;
        loop {
            if i == 0 {
                done = true;
                break;
            }
            i -= 1;
            if idx[i] != i + n - k {
                idx[i] += 1;
                for j in i + 1..k {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
        }
        Some(current)
    })
}

/// Kernel-weighted least-squares estimate whose values sum exactly to
/// `f(full) - f(empty)`.
///
/// `nsamples` counts coalition evaluations including the empty and full
/// coalitions; it is capped at `2^p`.
pub fn shapley_sampled(game: &dyn CoalitionValue, nsamples: usize, seed: u64) -> Result<AttributionResult, AttributionError> {
    const ATTEMPTS: usize = 4;
    let p = game.players();
    if p == 0 {
        return Err(AttributionError::NoPlayers);
    }
    let min = 2 * p + 2;
    if nsamples < min {
        return Err(AttributionError::TooFewSamples { nsamples, min, p });
    }
    let base_value = game.value(&vec![false; p])?;
    let full_value = game.value(&vec![true; p])?;
    let delta = full_value - base_value;
    let estimator = Estimator::Sampled { nsamples, seed };
    if p == 1 {
        return Ok(AttributionResult {
            phi: vec![delta],
            base_value,
            full_value,
            estimator,
        });
    }

    let budget = if p < usize::BITS as usize - 1 {
        (nsamples - 2).min((1usize << p) - 2)
    } else {
        nsamples - 2
    };
    for attempt in 0..ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add((attempt as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        let samples = draw_coalitions(p, budget, &mut rng);
        let values: Vec<f64> = samples.par_iter().map(|c| game.value(&c.mask)).collect::<Result<_, _>>()?;
        if let Some(phi) = solve_constrained(p, &samples, &values, base_value, delta) {
            return Ok(AttributionResult {
                phi,
                base_value,
                full_value,
                estimator,
            });
        }
        log::debug!("degenerate coalition design on attempt {attempt}, resampling");
    }
    Err(AttributionError::Degenerate(ATTEMPTS))
}

/// Eliminates the last player through the sum constraint and solves the
/// weighted normal equations for the others.
fn solve_constrained(p: usize, samples: &[CoalitionSample], values: &[f64], base: f64, delta: f64) -> Option<Vec<f64>> {
    let last = p - 1;
    let mut gram = DMatrix::<f64>::zeros(last, last);
    let mut rhs = DVector::<f64>::zeros(last);
    let mut row = vec![0.0; last];
    for (c, &v) in samples.iter().zip(values) {
        let zl = c.mask[last] as u8 as f64;
        let y = v - base - zl * delta;
        for (j, r) in row.iter_mut().enumerate() {
            *r = c.mask[j] as u8 as f64 - zl;
        }
        for i in 0..last {
            if row[i] == 0.0 {
                continue;
            }
            let wi = c.weight * row[i];
            rhs[i] += wi * y;
            for j in 0..last {
                gram[(i, j)] += wi * row[j];
            }
        }
    }
    let chol = gram.cholesky()?;
    let w = chol.solve(&rhs);
    if w.iter().any(|x| !x.is_finite()) {
        return None;
    }
    let mut phi: Vec<f64> = w.iter().copied().collect();
    phi.push(delta - phi.iter().sum::<f64>());
    Some(phi)
}
