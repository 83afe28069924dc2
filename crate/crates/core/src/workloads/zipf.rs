use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::Distribution;

use crate::error::{Error, Result};

/// Normalized Zipf weights `r^-s / H(n, s)` for ranks `1..=n`.
pub fn zipf_weights(n: usize, exponent: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-exponent)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Zipf-distributed item ids. Rank `r` is assigned to a random item so that
/// hot items are scattered over the id space.
#[derive(Debug, Clone)]
pub struct Zipf {
    alias: WeightedAliasIndex<f64>,
    items: Vec<u32>,
}

impl Zipf {
    pub fn new<R: Rng + ?Sized>(n: usize, exponent: f64, rng: &mut R) -> Result<Self> {
        if n == 0 || n > u32::MAX as usize {
            return Err(Error::InvalidInput(format!("zipf support size {n} out of range")));
        }
        if !(exponent >= 0.0) || !exponent.is_finite() {
            return Err(Error::InvalidInput(format!("invalid zipf exponent {exponent}")));
        }
        let alias = WeightedAliasIndex::new(zipf_weights(n, exponent))
            .map_err(|e| Error::InvalidInput(format!("zipf weights: {e}")))?;
        let mut items: Vec<u32> = (0..n as u32).collect();
        items.shuffle(rng);
        Ok(Zipf { alias, items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Item holding rank `r` (0-based).
    pub fn item_of_rank(&self, r: usize) -> usize {
        self.items[r] as usize
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.items[self.alias.sample(rng)] as usize
    }
}
