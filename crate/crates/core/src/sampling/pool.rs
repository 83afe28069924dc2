//! Sample pools for the reuse schemes.
//!
//! A pool is `G` independent draws from the target distribution. It is
//! delivered as `U` traversals, each in a fresh random order, so every draw is
//! used exactly `U` times and all uses of a draw lie within the `U * G`
//! samples of its pool. Pools are consumed strictly in creation order.

use std::collections::VecDeque;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::TargetDistribution;
use crate::model::Key;

/// Draws of every pool created so far, in creation order. Only recorded when
/// enabled on the distribution.
pub type PoolHistory = Vec<Vec<Key>>;

pub(crate) struct ReusePool {
    g: usize,
    u: usize,
    rng: ChaCha8Rng,
    /// Prepared samples not yet reserved by a handle.
    stream: VecDeque<Key>,
    pools_created: u64,
    history: Option<PoolHistory>,
    /// Recent pool localization times, newest last.
    estimates: VecDeque<Duration>,
    window: usize,
    reserved: u64,
    first_reserve: Option<Duration>,
}

impl ReusePool {
    pub(crate) fn new(g: usize, u: usize, window: usize, rng: ChaCha8Rng) -> Self {
        ReusePool {
            g,
            u,
            rng,
            stream: VecDeque::new(),
            pools_created: 0,
            history: None,
            estimates: VecDeque::with_capacity(window),
            window,
            reserved: 0,
            first_reserve: None,
        }
    }

    pub(crate) fn pools_created(&self) -> u64 {
        self.pools_created
    }

    pub(crate) fn record_history(&mut self) {
        self.history.get_or_insert_with(Vec::new);
    }

    pub(crate) fn history(&self) -> Option<&PoolHistory> {
        self.history.as_ref()
    }

    pub(crate) fn unreserved(&self) -> usize {
        self.stream.len()
    }

    /// Draws a new pool, appends its traversals to the stream and returns the
    /// drawn keys.
    pub(crate) fn create(&mut self, target: &TargetDistribution) -> Vec<Key> {
        let draws: Vec<Key> = (0..self.g).map(|_| target.sample(&mut self.rng)).collect();
        let mut order: Vec<usize> = (0..self.g).collect();
        for _ in 0..self.u {
            order.shuffle(&mut self.rng);
            self.stream.extend(order.iter().map(|&i| draws[i]));
        }
        self.pools_created += 1;
        if let Some(h) = self.history.as_mut() {
            h.push(draws.clone());
        }
        draws
    }

    pub(crate) fn take(&mut self, n: usize, now: Duration) -> impl Iterator<Item = Key> + '_ {
        self.first_reserve.get_or_insert(now);
        self.reserved += n as u64;
        self.stream.drain(..n)
    }

    pub(crate) fn record_localization(&mut self, took: Duration) {
        if self.estimates.len() == self.window {
            self.estimates.pop_front();
        }
        self.estimates.push_back(took);
    }

    /// Mean of the recent pool localization times.
    pub(crate) fn estimated_relocation_time(&self) -> Option<Duration> {
        if self.estimates.is_empty() {
            return None;
        }
        Some(self.estimates.iter().sum::<Duration>() / self.estimates.len() as u32)
    }

    /// Samples reserved per second since the first reservation.
    pub(crate) fn consumption_rate(&self, now: Duration) -> Option<f64> {
        let elapsed = now.checked_sub(self.first_reserve?)?.as_secs_f64();
        (elapsed > 0.0).then(|| self.reserved as f64 / elapsed)
    }

    /// A new pool is due when the unreserved samples would run out in less
    /// than twice the estimated time to localize a pool.
    pub(crate) fn refill_due(&self, now: Duration) -> bool {
        match (self.estimated_relocation_time(), self.consumption_rate(now)) {
            (Some(est), Some(rate)) => {
                (self.stream.len() as f64) < 2.0 * est.as_secs_f64() * rate
            }
            _ => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn pool(g: usize, u: usize) -> ReusePool {
        ReusePool::new(g, u, 8, ChaCha8Rng::seed_from_u64(1))
    }

    #[test]
    fn every_draw_used_u_times_within_its_pool() {
        let target = TargetDistribution::uniform((0..50).map(Key).collect()).unwrap();
        let mut p = pool(20, 3);
        p.record_history();
        for _ in 0..4 {
            p.create(&target);
        }
        let stream: Vec<Key> = p.take(4 * 60, Duration::ZERO).collect();
        for (i, draws) in p.history().unwrap().iter().enumerate() {
            let mut block = stream[i * 60..(i + 1) * 60].to_vec();
            let mut expect: Vec<Key> = draws.iter().flat_map(|&k| [k; 3]).collect();
            block.sort();
            expect.sort();
            assert_eq!(block, expect);
        }
    }

    #[test]
    fn estimator_window_and_trigger() {
        let mut p = pool(10, 2);
        assert_eq!(p.estimated_relocation_time(), None);
        for ms in 1..=10 {
            p.record_localization(Duration::from_millis(ms));
        }
        // last 8 of 1..=10 ms
        assert_eq!(p.estimated_relocation_time(), Some(Duration::from_micros(6500)));
        let target = TargetDistribution::uniform(vec![Key(0)]).unwrap();
        p.create(&target);
        assert!(!p.refill_due(Duration::ZERO));
        let _ = p.take(10, Duration::ZERO).count();
        // 10 samples in 10 ms = 1000/s; 10 left < 2 * 6.5ms * 1000/s = 13
        assert!(p.refill_due(Duration::from_millis(10)));
        // 10 left >= 2 * 6.5ms * 500/s = 6.5
        assert!(!p.refill_due(Duration::from_millis(20)));
    }
}
