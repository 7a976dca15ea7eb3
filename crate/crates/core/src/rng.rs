//! Counter-based random streams.
//!
//! Every draw in the simulator is a pure function of
//! `(seed, step, agent, channel, draw index)`. There is no shared generator
//! state, so the same tuple produces the same number no matter which thread
//! evaluates it or in what order agents are visited.
//!
//! The mixing function is the SplitMix64 finalizer applied to a key that is
//! folded in one component at a time.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Purpose of a draw. Separate channels keep, for example, exposure and
/// behavior draws of the same agent and step uncorrelated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Channel {
    Exposure,
    Progression,
    Behavior,
    Vaccine,
    Test,
    Gumbel,
    /// Attribute sampling and household assembly.
    Synthesis,
    /// Contact graph construction.
    Graph,
    /// Initial infection seeding.
    Seeding,
    /// Decision-provider sampling.
    Provider,
}

impl Channel {
    fn tag(self) -> u64 {
        match self {
            Channel::Exposure => 1,
            Channel::Progression => 2,
            Channel::Behavior => 3,
            Channel::Vaccine => 4,
            Channel::Test => 5,
            Channel::Gumbel => 6,
            Channel::Synthesis => 7,
            Channel::Graph => 8,
            Channel::Seeding => 9,
            Channel::Provider => 10,
        }
    }
}

/// A reproducible stream of draws for one `(seed, step, agent, channel)` key.
#[derive(Debug, Clone)]
pub struct RngStream {
    key: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(seed: u64, step: u64, agent: u64, channel: Channel) -> Self {
        let mut h = mix64(seed ^ GOLDEN);
        h = mix64(
            h ^ step
                .wrapping_mul(GOLDEN)
                .wrapping_add(0x632b_e59b_d9b4_e019),
        );
        h = mix64(h ^ agent.wrapping_mul(0xd6e8_feb8_6659_fd93).wrapping_add(1));
        h = mix64(h ^ channel.tag().wrapping_mul(0xa076_1d64_78bd_642f));
        Self { key: h, counter: 0 }
    }

    /// Stream keyed by an arbitrary 64-bit word instead of an agent index
    /// (prompt hashes, stratum ids).
    pub fn keyed(seed: u64, step: u64, key: u64, channel: Channel) -> Self {
        Self::new(seed, step, key, channel)
    }

    /// The `i`-th draw of this stream, independent of how many draws were
    /// taken before.
    #[inline]
    pub fn u64_at(&self, i: u64) -> u64 {
        mix64(
            self.key
                .wrapping_add(i.wrapping_add(1).wrapping_mul(GOLDEN)),
        )
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let v = self.u64_at(self.counter);
        self.counter += 1;
        v
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        to_unit(self.next_u64())
    }

    #[inline]
    pub fn uniform_at(&self, i: u64) -> f64 {
        to_unit(self.u64_at(i))
    }

    /// Uniform in the open interval `(0, 1)`; safe to pass to `ln`.
    #[inline]
    pub fn open_uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard Gumbel sample.
    pub fn gumbel(&mut self) -> f64 {
        -(-self.open_uniform().ln()).ln()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Number of failures before the first success of a Bernoulli(p) trial.
    pub fn geometric(&mut self, p: f64) -> u64 {
        if p >= 1.0 {
            return 0;
        }
        let u = self.open_uniform();
        let k = (u.ln() / (1.0 - p).ln()).floor();
        if k >= u64::MAX as f64 {
            u64::MAX
        } else {
            k as u64
        }
    }
}

#[inline]
fn to_unit(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Stable 64-bit FNV-1a hash, used for prompt keys and config fingerprints
/// where the std hasher's per-process randomization is unwanted.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    mix64(h)
}
