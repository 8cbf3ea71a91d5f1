//! Seeded random streams.
//!
//! Every run has one master seed. Each source of randomness reads from its own
//! ChaCha8 stream: the generator is seeded with the run seed and the stream
//! word selects one of the named sub-streams below. Policy-internal sampling
//! therefore never shifts the environment's draws, which is what lets two
//! queues (or two policies) see identical arrivals and departure thresholds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Named sub-streams derived from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Arrival = 1,
    ArrivalIndex = 2,
    Exploration = 3,
    Departure = 4,
    Thompson = 5,
    Instance = 6,
    RunSeeds = 7,
    Contrastive = 8,
    Pool = 9,
}

/// A ChaCha8 generator positioned on one sub-stream of `seed`.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Per-run seeds derived from a master seed, in run order.
pub fn run_seeds(master: u64, runs: usize) -> Vec<u64> {
    let mut rng = stream_rng(master, Stream::RunSeeds);
    (0..runs).map(|_| rng.random::<u64>()).collect()
}

/// All environment draws for one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundRandomness {
    /// Arrival happens when `a_draw < λ`.
    pub a_draw: f64,
    /// Pool index of the arriving context (used only on arrival rounds).
    pub arrival_context_index: usize,
    /// Uniform for the exploration coin.
    pub e_draw: f64,
    /// Shared uniform for the choice threshold rule.
    pub u_depart: f64,
}

/// Environment streams for one run.
#[derive(Debug, Clone)]
pub struct RunStreams {
    arrival: ChaCha8Rng,
    arrival_index: ChaCha8Rng,
    exploration: ChaCha8Rng,
    departure: ChaCha8Rng,
    pool_size: usize,
}

impl RunStreams {
    pub fn new(seed: u64, pool_size: usize) -> Self {
        assert!(pool_size > 0, "context pool must be non-empty");
        RunStreams {
            arrival: stream_rng(seed, Stream::Arrival),
            arrival_index: stream_rng(seed, Stream::ArrivalIndex),
            exploration: stream_rng(seed, Stream::Exploration),
            departure: stream_rng(seed, Stream::Departure),
            pool_size,
        }
    }

    /// Draws one value from every environment stream, whether or not it is used.
    pub fn next_round(&mut self) -> RoundRandomness {
        RoundRandomness {
            a_draw: self.arrival.random::<f64>(),
            arrival_context_index: self.arrival_index.random_range(0..self.pool_size),
            e_draw: self.exploration.random::<f64>(),
            u_depart: self.departure.random::<f64>(),
        }
    }
}

/// The generator reserved for policy-internal sampling (Thompson draws,
/// random choices, Beta posteriors).
pub fn policy_rng(seed: u64) -> ChaCha8Rng {
    stream_rng(seed, Stream::Thompson)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_deterministic_and_distinct() {
        let mut a = RunStreams::new(7, 10);
        let mut b = RunStreams::new(7, 10);
        for _ in 0..100 {
            assert_eq!(a.next_round(), b.next_round());
        }
        let r = RunStreams::new(7, 10).next_round();
        assert_ne!(r.a_draw, r.e_draw);
        assert_ne!(r.a_draw, r.u_depart);
        let mut p = policy_rng(7);
        let mut q = stream_rng(7, Stream::Arrival);
        assert_ne!(p.random::<u64>(), q.random::<u64>());
    }

    #[test]
    fn run_seeds_are_stable_prefixes() {
        let five = run_seeds(3, 5);
        let ten = run_seeds(3, 10);
        assert_eq!(&ten[..5], &five[..]);
        assert_ne!(run_seeds(4, 5), five);
    }

    #[test]
    fn uniforms_lie_in_unit_interval() {
        let mut s = RunStreams::new(1, 3);
        for _ in 0..10_000 {
            let r = s.next_round();
            for v in [r.a_draw, r.e_draw, r.u_depart] {
                assert!((0.0..1.0).contains(&v));
            }
            assert!(r.arrival_context_index < 3);
        }
    }
}
