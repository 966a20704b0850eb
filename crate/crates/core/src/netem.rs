//! Link emulation: seeded delay sampling, ordered or unordered delivery, and
//! per-message latency bookkeeping.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

/// Histogram bins are 1 ms wide; anything at or past the last edge lands in
/// the final bin.
pub const HISTOGRAM_BINS: usize = 200;

#[derive(Debug, Error, PartialEq)]
pub enum NetemError {
    #[error("invalid delay model: {0}")]
    InvalidModel(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkMode {
    /// Ordered transport: a message never overtakes an earlier one.
    Stream,
    /// Each message is delayed independently and may be reordered.
    Datagram,
}

impl LinkMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LinkMode::Stream => "stream",
            LinkMode::Datagram => "datagram",
        }
    }
}

impl std::str::FromStr for LinkMode {
    type Err = NetemError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "stream" => Ok(LinkMode::Stream),
            "datagram" => Ok(LinkMode::Datagram),
            _ => Err(NetemError::InvalidModel("mode must be stream or datagram")),
        }
    }
}

/// Truncated Gaussian around `base_ms`, mixed with uniform spikes.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayModel {
    pub base_ms: f64,
    pub jitter_std_ms: f64,
    pub spike_prob: f64,
    pub spike_range_ms: (f64, f64),
    pub seed: u64,
    pub mode: LinkMode,
}

impl DelayModel {
    /// Calibrated to the inter-site measurement: ~32 ms typical, rare peaks
    /// up to 85 ms.
    pub fn calibrated(seed: u64) -> Self {
        Self {
            base_ms: 32.0,
            jitter_std_ms: 2.0,
            spike_prob: 0.01,
            spike_range_ms: (70.0, 85.0),
            seed,
            mode: LinkMode::Stream,
        }
    }

    pub fn fixed(delay_ms: f64, mode: LinkMode) -> Self {
        Self {
            base_ms: delay_ms,
            jitter_std_ms: 0.0,
            spike_prob: 0.0,
            spike_range_ms: (delay_ms, delay_ms),
            seed: 0,
            mode,
        }
    }

    pub fn zero() -> Self {
        Self::fixed(0.0, LinkMode::Stream)
    }

    pub fn validate(&self) -> Result<(), NetemError> {
        let (lo, hi) = self.spike_range_ms;
        if !(self.base_ms.is_finite() && self.base_ms >= 0.0) {
            return Err(NetemError::InvalidModel("base_ms must be >= 0"));
        }
        if !(self.jitter_std_ms.is_finite() && self.jitter_std_ms >= 0.0) {
            return Err(NetemError::InvalidModel("jitter_std_ms must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.spike_prob) {
            return Err(NetemError::InvalidModel("spike_prob must be in [0, 1]"));
        }
        if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo <= hi) {
            return Err(NetemError::InvalidModel("spike range must satisfy 0 <= lo <= hi"));
        }
        Ok(())
    }

    /// Upper bound on any sample this model can produce, if one exists.
    pub fn bounded_max_ms(&self) -> Option<f64> {
        if self.jitter_std_ms > 0.0 {
            None
        } else if self.spike_prob > 0.0 {
            Some(self.base_ms.max(self.spike_range_ms.1))
        } else {
            Some(self.base_ms)
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// Draws one delay in milliseconds. Always consumes the same number of
/// random values per branch, so identical seeds give identical streams.
pub fn delay_sample<R: Rng + ?Sized>(model: &DelayModel, rng: &mut R) -> f64 {
    let spike = rng.random::<f64>() < model.spike_prob;
    if spike {
        let (lo, hi) = model.spike_range_ms;
        lo + (hi - lo) * rng.random::<f64>()
    } else if model.jitter_std_ms == 0.0 {
        model.base_ms
    } else {
        let normal = Normal::new(model.base_ms, model.jitter_std_ms)
            .expect("validated jitter is finite and non-negative");
        normal.sample(rng).max(0.0)
    }
}

fn ms_to_us(ms: f64) -> u64 {
    (ms * 1000.0).round() as u64
}

/// A message that crossed a link.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transit {
    pub send_us: u64,
    pub delivery_us: u64,
}

impl Transit {
    pub fn delay_ms(&self) -> f64 {
        (self.delivery_us - self.send_us) as f64 / 1000.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyStats {
    pub count: u64,
    pub mean_ms: f64,
    pub max_ms: f64,
    pub histogram: Vec<u64>,
    pub reorder_count: u64,
}

impl LatencyStats {
    /// Aggregates transits listed in send order.
    pub fn from_transits(transits: &[Transit]) -> Self {
        let mut histogram = vec![0u64; HISTOGRAM_BINS];
        let mut sum = 0.0;
        let mut max: f64 = 0.0;
        for t in transits {
            let d = t.delay_ms();
            sum += d;
            max = max.max(d);
            let bin = (d.floor() as usize).min(HISTOGRAM_BINS - 1);
            histogram[bin] += 1;
        }
        let count = transits.len() as u64;
        let deliveries: Vec<u64> = transits.iter().map(|t| t.delivery_us).collect();
        Self {
            count,
            mean_ms: if count == 0 { 0.0 } else { sum / count as f64 },
            max_ms: max,
            histogram,
            reorder_count: count_inversions(&deliveries),
        }
    }

    /// Combines stats of independent channels. Reorders are counted within
    /// each channel, never across.
    pub fn merge(parts: &[LatencyStats]) -> Self {
        let mut histogram = vec![0u64; HISTOGRAM_BINS];
        let mut count = 0;
        let mut sum = 0.0;
        let mut max: f64 = 0.0;
        let mut reorder = 0;
        for p in parts {
            count += p.count;
            sum += p.mean_ms * p.count as f64;
            max = max.max(p.max_ms);
            reorder += p.reorder_count;
            for (h, x) in histogram.iter_mut().zip(&p.histogram) {
                *h += x;
            }
        }
        Self {
            count,
            mean_ms: if count == 0 { 0.0 } else { sum / count as f64 },
            max_ms: max,
            histogram,
            reorder_count: reorder,
        }
    }
}

/// Number of pairs `i < j` with `v[j] < v[i]`, by merge sort.
pub fn count_inversions(v: &[u64]) -> u64 {
    fn sort(v: &mut [u64], buf: &mut Vec<u64>) -> u64 {
        let n = v.len();
        if n < 2 {
            return 0;
        }
        let mid = n / 2;
        let mut inv = sort(&mut v[..mid], buf) + sort(&mut v[mid..], buf);
        buf.clear();
        let (mut i, mut j) = (0, mid);
        while i < mid && j < n {
            if v[j] < v[i] {
                inv += (mid - i) as u64;
                buf.push(v[j]);
                j += 1;
            } else {
                buf.push(v[i]);
                i += 1;
            }
        }
        buf.extend_from_slice(&v[i..mid]);
        buf.extend_from_slice(&v[j..n]);
        v.copy_from_slice(buf);
        inv
    }
    let mut work = v.to_vec();
    sort(&mut work, &mut Vec::with_capacity(v.len()))
}

/// One direction of an emulated link.
#[derive(Debug, Clone)]
pub struct Link {
    model: DelayModel,
    rng: ChaCha8Rng,
    last_delivery_us: Option<u64>,
    transits: Vec<Transit>,
}

impl Link {
    pub fn new(model: DelayModel) -> Self {
        let rng = model.rng();
        Self {
            model,
            rng,
            last_delivery_us: None,
            transits: Vec::new(),
        }
    }

    pub fn model(&self) -> &DelayModel {
        &self.model
    }

    /// Samples a delay for a message sent at `send_us` and returns its
    /// delivery time.
    pub fn deliver(&mut self, send_us: u64) -> u64 {
        let sample = delay_sample(&self.model, &mut self.rng);
        self.deliver_with_sample(send_us, sample)
    }

    /// Delivery rule with an externally supplied delay sample.
    pub fn deliver_with_sample(&mut self, send_us: u64, sample_ms: f64) -> u64 {
        let raw = send_us + ms_to_us(sample_ms);
        let delivery = match (self.model.mode, self.last_delivery_us) {
            (LinkMode::Stream, Some(prev)) => raw.max(prev),
            _ => raw,
        };
        self.last_delivery_us = Some(match self.last_delivery_us {
            Some(prev) => prev.max(delivery),
            None => delivery,
        });
        self.transits.push(Transit {
            send_us,
            delivery_us: delivery,
        });
        delivery
    }

    pub fn transits(&self) -> &[Transit] {
        &self.transits
    }

    pub fn stats(&self) -> LatencyStats {
        LatencyStats::from_transits(&self.transits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = DelayModel::fixed(32.0, LinkMode::Stream);
        for _ in 0..100 {
            assert_eq!(delay_sample(&m, &mut rng), 32.0);
        }
        let mut m = DelayModel::calibrated(3);
        m.spike_prob = 1.0;
        m.spike_range_ms = (85.0, 85.0);
        assert_eq!(delay_sample(&m, &mut rng), 85.0);
    }

    #[test]
    fn stream_queues_behind_earlier_message() {
        let mut link = Link::new(DelayModel::fixed(0.0, LinkMode::Stream));
        assert_eq!(link.deliver_with_sample(0, 32.0), 32_000);
        assert_eq!(link.deliver_with_sample(1_000, 5.0), 32_000);
        assert_eq!(link.stats().reorder_count, 0);
    }

    #[test]
    fn datagram_reorders() {
        let mut link = Link::new(DelayModel::fixed(0.0, LinkMode::Datagram));
        assert_eq!(link.deliver_with_sample(0, 32.0), 32_000);
        assert_eq!(link.deliver_with_sample(1_000, 5.0), 6_000);
        assert_eq!(link.stats().reorder_count, 1);
    }

    #[test]
    fn zero_delay_is_identity() {
        let mut link = Link::new(DelayModel::zero());
        for t in [0, 5, 5, 1_000_000] {
            assert_eq!(link.deliver(t), t);
        }
    }

    #[test]
    fn empty_stats() {
        let s = Link::new(DelayModel::zero()).stats();
        assert_eq!(s.count, 0);
        assert_eq!(s.reorder_count, 0);
        assert_eq!(s.histogram.iter().sum::<u64>(), 0);
    }

    #[test]
    fn histogram_clamps_to_last_bin() {
        let s = LatencyStats::from_transits(&[
            Transit { send_us: 0, delivery_us: 250_000 },
            Transit { send_us: 0, delivery_us: 1_500 },
        ]);
        assert_eq!(s.histogram[HISTOGRAM_BINS - 1], 1);
        assert_eq!(s.histogram[1], 1);
        assert_eq!(s.max_ms, 250.0);
    }

    #[test]
    fn validation() {
        assert!(DelayModel::calibrated(0).validate().is_ok());
        let mut m = DelayModel::calibrated(0);
        m.spike_range_ms = (90.0, 80.0);
        assert!(m.validate().is_err());
        m = DelayModel::calibrated(0);
        m.spike_prob = 1.5;
        assert!(m.validate().is_err());
        m = DelayModel::calibrated(0);
        m.jitter_std_ms = -1.0;
        assert!(m.validate().is_err());
    }

    #[test]
    fn inversions_match_brute_force() {
        let v = [5u64, 1, 4, 4, 2, 9, 0];
        let mut brute = 0;
        for i in 0..v.len() {
            for j in i + 1..v.len() {
                if v[j] < v[i] {
                    brute += 1;
                }
            }
        }
        assert_eq!(count_inversions(&v), brute);
    }
}
