//! Sampling access: applications ask for keys drawn from a target
//! distribution and state how closely the delivered samples must follow it.
//! The server picks a scheme for the requested conformity level and may serve
//! the samples in whatever way is cheapest under that level.

mod pool;
mod schemes;

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use rand::Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

pub use pool::PoolHistory;
pub(crate) use pool::ReusePool;

use crate::error::{Error, Result};
use crate::model::{Key, Values};

/// How closely a sample stream must follow its target distribution.
/// Each level admits everything the previous ones admit.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConformityLevel {
    /// Every sample independent and exactly distributed.
    L1,
    /// Exactly distributed, dependence limited to samples at most
    /// `max_dependency` positions apart (unbounded if `None`).
    L2 { max_dependency: Option<usize> },
    /// Distribution holds for the long-run stream only.
    L3,
    /// No guarantee; samples may follow a node-local distribution.
    L4,
}

impl ConformityLevel {
    fn rank(self) -> u8 {
        match self {
            ConformityLevel::L1 => 1,
            ConformityLevel::L2 { .. } => 2,
            ConformityLevel::L3 => 3,
            ConformityLevel::L4 => 4,
        }
    }

    /// Whether a stream conforming at `self` also conforms at `required`.
    pub fn satisfies(self, required: ConformityLevel) -> bool {
        match (self, required) {
            (
                ConformityLevel::L2 { max_dependency: have },
                ConformityLevel::L2 { max_dependency: need },
            ) => match (have, need) {
                (_, None) => true,
                (Some(h), Some(n)) => h <= n,
                (None, Some(_)) => false,
            },
            _ => self.rank() <= required.rank(),
        }
    }
}

impl fmt::Display for ConformityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConformityLevel::L1 => f.write_str("L1"),
            ConformityLevel::L2 { max_dependency: None } => f.write_str("L2"),
            ConformityLevel::L2 { max_dependency: Some(b) } => write!(f, "L2:{b}"),
            ConformityLevel::L3 => f.write_str("L3"),
            ConformityLevel::L4 => f.write_str("L4"),
        }
    }
}

impl FromStr for ConformityLevel {
    type Err = Error;

    /// Accepts `L1`..`L4`, with an optional dependency bound `L2:<B>`.
    fn from_str(s: &str) -> Result<Self> {
        let upper = s.trim().to_ascii_uppercase();
        match upper.as_str() {
            "L1" => Ok(ConformityLevel::L1),
            "L2" => Ok(ConformityLevel::L2 { max_dependency: None }),
            "L3" => Ok(ConformityLevel::L3),
            "L4" => Ok(ConformityLevel::L4),
            _ => match upper.strip_prefix("L2:") {
                Some(b) => b
                    .parse()
                    .map(|b| ConformityLevel::L2 { max_dependency: Some(b) })
                    .map_err(|_| Error::InvalidInput(format!("bad dependency bound in {s:?}"))),
                None => Err(Error::InvalidInput(format!("unknown conformity level {s:?}"))),
            },
        }
    }
}

/// Sampling schemes, ordered from most to least conforming.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SchemeKind {
    /// Fresh independent draw per sample.
    Independent,
    /// Draw pools of `G` keys and deliver each `U` times.
    PooledReuse,
    /// Pooled reuse that also moves non-local samples to the end of a handle.
    ReusePostponing,
    /// Draw only from keys currently available locally.
    Local,
}

impl SchemeKind {
    /// Scheme used for `level` given pool size `g` and use frequency `u`.
    pub fn for_level(level: ConformityLevel, g: usize, u: usize) -> SchemeKind {
        match level {
            ConformityLevel::L1 => SchemeKind::Independent,
            ConformityLevel::L2 { max_dependency: Some(b) } if g.saturating_mul(u) > b => {
                SchemeKind::Independent
            }
            ConformityLevel::L2 { .. } => SchemeKind::PooledReuse,
            ConformityLevel::L3 => SchemeKind::ReusePostponing,
            ConformityLevel::L4 => SchemeKind::Local,
        }
    }

    /// Strongest level the scheme guarantees with pool size `g` and use frequency `u`.
    pub fn level(self, g: usize, u: usize) -> ConformityLevel {
        match self {
            SchemeKind::Independent => ConformityLevel::L1,
            SchemeKind::PooledReuse => ConformityLevel::L2 {
                max_dependency: Some(g.saturating_mul(u)),
            },
            SchemeKind::ReusePostponing => ConformityLevel::L3,
            SchemeKind::Local => ConformityLevel::L4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::Independent => "independent",
            SchemeKind::PooledReuse => "pooled-reuse",
            SchemeKind::ReusePostponing => "reuse-postponing",
            SchemeKind::Local => "local",
        }
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "independent" | "l1" => Ok(SchemeKind::Independent),
            "pooled-reuse" | "reuse" | "l2" => Ok(SchemeKind::PooledReuse),
            "reuse-postponing" | "postponing" | "l3" => Ok(SchemeKind::ReusePostponing),
            "local" | "l4" => Ok(SchemeKind::Local),
            _ => Err(Error::InvalidInput(format!("unknown sampling scheme {s:?}"))),
        }
    }
}

/// A probability distribution over a subset of keys.
#[derive(Debug)]
pub struct TargetDistribution {
    keys: Vec<Key>,
    probs: Vec<f64>,
    alias: WeightedAliasIndex<f64>,
}

impl TargetDistribution {
    /// Probabilities must be non-negative and sum to 1 within 1e-9; keys must
    /// be distinct.
    pub fn new(keys: Vec<Key>, probs: Vec<f64>) -> Result<Self> {
        if keys.len() != probs.len() {
            return Err(Error::LengthMismatch {
                what: "keys vs probabilities",
                left: keys.len(),
                right: probs.len(),
            });
        }
        if keys.is_empty() {
            return Err(Error::InvalidInput("target distribution has no keys".into()));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::InvalidInput(format!("invalid probability {p}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        let mut sorted = keys.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidInput("duplicate key in target distribution".into()));
        }
        let alias = WeightedAliasIndex::new(probs.clone())
            .map_err(|e| Error::InvalidInput(format!("target distribution: {e}")))?;
        Ok(TargetDistribution { keys, probs, alias })
    }

    pub fn uniform(keys: Vec<Key>) -> Result<Self> {
        let p = 1.0 / keys.len().max(1) as f64;
        let n = keys.len();
        Self::new(keys, vec![p; n])
    }

    /// Distribution proportional to `weights` over the keys `0..weights.len()`.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::InvalidInput("weights must have a positive finite sum".into()));
        }
        let keys = (0..weights.len()).map(Key::from).collect();
        let mut probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let drift: f64 = 1.0 - probs.iter().sum::<f64>();
        if let Some(p) = probs.iter_mut().max_by(|a, b| a.total_cmp(b)) {
            *p += drift;
        }
        Self::new(keys, probs)
    }

    pub fn keys(&self) -> &[Key] {
        &self.keys
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Index into [`Self::keys`] of one draw.
    #[inline]
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.alias.sample(rng)
    }

    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Key {
        self.keys[self.sample_index(rng)]
    }
}

/// Identifies a registered distribution. Registering the same distributions in
/// the same order on every node gives them the same id everywhere.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DistId(pub usize);

#[derive(Default)]
pub(crate) struct SamplingStats {
    pub(crate) delivered: AtomicU64,
    pub(crate) postponed: AtomicU64,
    pub(crate) local_fallbacks: AtomicU64,
}

/// Sampling activity for one distribution on one node.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingCounters {
    pub delivered: u64,
    pub postponed: u64,
    /// Local-scheme draws that found nothing local and fell back to a
    /// conforming draw.
    pub local_fallbacks: u64,
    pub pools_created: u64,
}

pub(crate) struct Registered {
    pub(crate) id: DistId,
    pub(crate) target: Arc<TargetDistribution>,
    pub(crate) scheme: SchemeKind,
    pub(crate) level: ConformityLevel,
    pub(crate) reuse: Option<Mutex<ReusePool>>,
    pub(crate) stats: SamplingStats,
}

#[derive(Default)]
pub(crate) struct SamplingManager {
    pub(crate) dists: RwLock<Vec<Arc<Registered>>>,
}

impl SamplingManager {
    pub(crate) fn get(&self, id: DistId) -> Result<Arc<Registered>> {
        self.dists
            .read()
            .get(id.0)
            .cloned()
            .ok_or(Error::UnknownDistribution(id.0))
    }
}

/// Samples reserved by `prepare_sample` and not yet pulled.
pub struct SampleHandle {
    pub(crate) dist: Arc<Registered>,
    pub(crate) requested: usize,
    pub(crate) delivered: usize,
    pub(crate) postponed: usize,
    /// Reserved keys and whether each was already postponed. Empty for the
    /// local scheme, which draws at pull time.
    pub(crate) pending: std::collections::VecDeque<(Key, bool)>,
}

impl SampleHandle {
    pub fn dist(&self) -> DistId {
        self.dist.id
    }

    pub fn requested(&self) -> usize {
        self.requested
    }

    pub fn remaining(&self) -> usize {
        self.requested - self.delivered
    }

    pub fn scheme(&self) -> SchemeKind {
        self.dist.scheme
    }

    /// Samples postponed so far; each sample is postponed at most once.
    pub fn postponed(&self) -> usize {
        self.postponed
    }

    /// Reserved samples not yet delivered, in current delivery order.
    pub fn pending_keys(&self) -> impl Iterator<Item = Key> + '_ {
        self.pending.iter().map(|p| p.0)
    }
}

/// Keys and values delivered by one `pull_sample`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub keys: Vec<Key>,
    pub values: Values,
}

impl Registered {
    pub(crate) fn counters(&self) -> SamplingCounters {
        let l = |a: &AtomicU64| a.load(Ordering::Relaxed);
        SamplingCounters {
            delivered: l(&self.stats.delivered),
            postponed: l(&self.stats.postponed),
            local_fallbacks: l(&self.stats.local_fallbacks),
            pools_created: self
                .reuse
                .as_ref()
                .map_or(0, |r| r.lock().pools_created()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_hierarchy() {
        use ConformityLevel::*;
        let l2 = L2 { max_dependency: None };
        assert!(L1.satisfies(l2) && L1.satisfies(L3) && L1.satisfies(L4));
        assert!(l2.satisfies(L3) && !l2.satisfies(L1));
        assert!(L3.satisfies(L4) && !L3.satisfies(l2));
        let tight = L2 { max_dependency: Some(100) };
        assert!(tight.satisfies(L2 { max_dependency: Some(4000) }));
        assert!(!L2 { max_dependency: Some(4000) }.satisfies(tight));
        for s in [SchemeKind::Independent, SchemeKind::PooledReuse, SchemeKind::ReusePostponing, SchemeKind::Local] {
            for lvl in [L1, l2, tight, L3, L4] {
                if SchemeKind::for_level(lvl, 250, 16) == s {
                    assert!(s.level(250, 16).satisfies(lvl), "{s:?} chosen for {lvl}");
                }
            }
        }
    }

    #[test]
    fn tight_dependency_bound_falls_back_to_independent() {
        let lvl = ConformityLevel::L2 { max_dependency: Some(100) };
        assert_eq!(SchemeKind::for_level(lvl, 250, 16), SchemeKind::Independent);
        assert_eq!(SchemeKind::for_level(lvl, 5, 16), SchemeKind::PooledReuse);
    }

    #[test]
    fn parse_levels() {
        assert_eq!("l3".parse::<ConformityLevel>().unwrap(), ConformityLevel::L3);
        assert_eq!(
            "L2:64".parse::<ConformityLevel>().unwrap(),
            ConformityLevel::L2 { max_dependency: Some(64) }
        );
        assert!("L5".parse::<ConformityLevel>().is_err());
        for lvl in ["L1", "L2", "L2:7", "L3", "L4"] {
            assert_eq!(lvl.parse::<ConformityLevel>().unwrap().to_string(), lvl);
        }
    }

    #[test]
    fn distribution_validation() {
        let k = |v: &[u64]| v.iter().map(|&x| Key(x)).collect::<Vec<_>>();
        assert!(TargetDistribution::new(k(&[0, 1]), vec![0.5, 0.5]).is_ok());
        assert!(TargetDistribution::new(k(&[0, 1]), vec![0.5, 0.6]).is_err());
        assert!(TargetDistribution::new(k(&[0, 0]), vec![0.5, 0.5]).is_err());
        assert!(TargetDistribution::new(k(&[0, 1]), vec![1.5, -0.5]).is_err());
        assert!(TargetDistribution::new(k(&[0]), vec![0.5, 0.5]).is_err());
        assert!(TargetDistribution::new(vec![], vec![]).is_err());
        assert!(TargetDistribution::new(k(&[0, 1]), vec![0.5, 0.5 + 1e-12]).is_ok());
    }
}
