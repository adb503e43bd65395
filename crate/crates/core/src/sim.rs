//! Slot-level Monte Carlo simulation of the multi-source bufferless
//! preemptive status-update link.
//!
//! One replication walks slots `1..=horizon` with the exact per-slot order:
//!
//! 1. if the server holds an update of source `j`, its transmission succeeds
//!    with probability `gamma_j` (evaluated right before the slot end);
//! 2. at the slot end every source independently generates an update with
//!    probability `q_i`;
//! 3. if anything was generated, one generator is selected uniformly and its
//!    update occupies the server next slot regardless of step 1's outcome;
//!    otherwise the server idles after a success (or when already idle),
//!    and after a failure the update is retransmitted
//!    ([`Policy::Retransmission`]) or dropped ([`Policy::Discard`]);
//! 4. ages advance into the next slot: a delivered update of age `m` resets
//!    its source's AoI to `m + 1`, every other AoI grows by one, and a
//!    retained update ages by one.
//!
//! Randomness comes from a ChaCha12 generator with a fixed, documented
//! seeding scheme ([`replication_seed`]), so identical inputs produce
//! bit-identical statistics; replications run in parallel and are reduced
//! in replication order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::model::SystemConfig;

/// Ages above this go to the overflow bucket instead of the histogram.
pub const DEFAULT_OVERFLOW_THRESHOLD: u64 = 100_000;

/// Number of slots discarded by default before statistics are recorded.
pub const DEFAULT_WARMUP: u64 = 1_000;

/// What the server does with an update whose transmission failed while no
/// new update arrived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    /// Retransmit the same update next slot.
    Retransmission,
    /// Drop the update; the server idles.
    Discard,
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Policy::Retransmission => write!(f, "retransmission"),
            Policy::Discard => write!(f, "discard"),
        }
    }
}

impl std::str::FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "retransmission" => Ok(Policy::Retransmission),
            "discard" => Ok(Policy::Discard),
            other => Err(format!(
                "unknown policy '{other}' (expected 'retransmission' or 'discard')"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("horizon ({horizon} slots) must exceed warmup ({warmup} slots)")]
    HorizonTooShort { horizon: u64, warmup: u64 },
    #[error("at least one replication is required")]
    NoReplications,
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Seed of replication `rep` derived from `base_seed`: output `rep + 1` of
/// the SplitMix64 stream started at `base_seed`.
pub fn replication_seed(base_seed: u64, rep: u64) -> u64 {
    mix64(base_seed.wrapping_add((rep + 1).wrapping_mul(SPLITMIX_GAMMA)))
}

/// ChaCha12 generator for one replication; the 256-bit key is the first four
/// SplitMix64 outputs of the replication seed.
pub fn rng_for_seed(seed: u64) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    for (chunk, k) in key.chunks_exact_mut(8).zip(1u64..) {
        chunk.copy_from_slice(&mix64(seed.wrapping_add(k.wrapping_mul(SPLITMIX_GAMMA))).to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}

/// Raw per-source outcome of a single replication.
struct RepSource {
    hist: Vec<u64>,
    overflow: u64,
    age_sum: f64,
}

fn simulate_once(
    config: &SystemConfig,
    policy: Policy,
    horizon: u64,
    warmup: u64,
    seed: u64,
    overflow_threshold: u64,
) -> Vec<RepSource> {
    let n = config.num_sources();
    let q: Vec<f64> = config.sources().iter().map(|s| s.q).collect();
    let gamma: Vec<f64> = config.sources().iter().map(|s| s.gamma).collect();
    let mut rng = rng_for_seed(seed);

    let mut aoi: Vec<u64> = vec![2; n];
    // (source, in-service update age); None when idle.
    let mut server: Option<(usize, u64)> = None;
    let mut out: Vec<RepSource> = (0..n)
        .map(|_| RepSource {
            hist: Vec::new(),
            overflow: 0,
            age_sum: 0.0,
        })
        .collect();
    let mut generators: Vec<usize> = Vec::with_capacity(n);

    for tau in 1..=horizon {
        if let Some((j, age)) = server {
            debug_assert!(age >= 1 && aoi[j] > age, "2D age relation violated");
        }
        if tau > warmup {
            for (i, rec) in out.iter_mut().enumerate() {
                let age = aoi[i];
                rec.age_sum += age as f64;
                if age > overflow_threshold {
                    rec.overflow += 1;
                } else {
                    let idx = (age - 2) as usize;
                    if idx >= rec.hist.len() {
                        rec.hist.resize(idx + 1, 0);
                    }
                    rec.hist[idx] += 1;
                }
            }
        }

        // 1. Transmission outcome, right before the slot end.
        let delivered = match server {
            Some((j, age)) if rng.random::<f64>() < gamma[j] => Some((j, age)),
            _ => None,
        };

        // 2. Generation at the slot end, in ascending source order.
        generators.clear();
        for (i, &qi) in q.iter().enumerate() {
            if rng.random::<f64>() < qi {
                generators.push(i);
            }
        }

        // 4. Age advance into slot tau + 1 (independent of occupancy).
        for a in aoi.iter_mut() {
            *a += 1;
        }
        if let Some((j, age)) = delivered {
            aoi[j] = age + 1;
        }

        // 3. Occupancy at slot tau + 1.
        server = if !generators.is_empty() {
            let winner = if generators.len() == 1 {
                generators[0]
            } else {
                generators[rng.random_range(0..generators.len())]
            };
            Some((winner, 1))
        } else if delivered.is_some() {
            None
        } else {
            match policy {
                Policy::Retransmission => server.map(|(j, age)| (j, age + 1)),
                Policy::Discard => None,
            }
        };
    }
    out
}

/// Aggregated per-source statistics across replications.
#[derive(Debug, Clone)]
pub struct SourceStats {
    hist: Vec<u64>,
    overflow_count: u64,
    recorded: u64,
    rep_means: Vec<f64>,
    pmf_sum: Vec<f64>,
    pmf_sq_sum: Vec<f64>,
    overflow_pmf_sum: f64,
}

impl SourceStats {
    /// Aggregate histogram counts; index 0 holds age 2.
    pub fn histogram(&self) -> &[u64] {
        &self.hist
    }

    pub fn overflow_count(&self) -> u64 {
        self.overflow_count
    }

    /// Total recorded slots across replications.
    pub fn recorded_slots(&self) -> u64 {
        self.recorded
    }

    /// Per-replication empirical mean AoI.
    pub fn replication_means(&self) -> &[f64] {
        &self.rep_means
    }

    /// Empirical mean AoI: the average of the replication means.
    pub fn mean(&self) -> f64 {
        self.rep_means.iter().sum::<f64>() / self.rep_means.len() as f64
    }

    /// Between-replication standard error of the mean; `None` for a single
    /// replication.
    pub fn mean_stderr(&self) -> Option<f64> {
        let r = self.rep_means.len();
        if r < 2 {
            return None;
        }
        let mean = self.mean();
        let var = self
            .rep_means
            .iter()
            .map(|m| (m - mean) * (m - mean))
            .sum::<f64>()
            / (r - 1) as f64;
        Some((var / r as f64).sqrt())
    }

    /// 95% normal confidence interval for the mean.
    pub fn mean_ci95(&self) -> Option<(f64, f64)> {
        let s = self.mean_stderr()?;
        let m = self.mean();
        Some((m - 1.96 * s, m + 1.96 * s))
    }

    /// Normalized aggregate histogram over ages `2..` and, separately, the
    /// overflow-bucket mass.
    pub fn empirical_pmf(&self) -> (Vec<f64>, f64) {
        let total = self.recorded as f64;
        (
            self.hist.iter().map(|&c| c as f64 / total).collect(),
            self.overflow_count as f64 / total,
        )
    }

    /// Empirical probability of age `n` (0 outside the observed range).
    pub fn pmf(&self, n: usize) -> f64 {
        if n < 2 {
            return 0.0;
        }
        self.hist
            .get(n - 2)
            .map(|&c| c as f64 / self.recorded as f64)
            .unwrap_or(0.0)
    }

    /// Between-replication standard error of the empirical probability of
    /// age `n`; `None` for a single replication.
    pub fn pmf_stderr(&self, n: usize) -> Option<f64> {
        let r = self.rep_means.len();
        if r < 2 || n < 2 {
            return None;
        }
        let (sum, sq) = match self.pmf_sum.get(n - 2) {
            Some(&s) => (s, self.pmf_sq_sum[n - 2]),
            None => (0.0, 0.0),
        };
        let rf = r as f64;
        let var = ((sq - sum * sum / rf) / (rf - 1.0)).max(0.0);
        Some((var / rf).sqrt())
    }

    /// Overflow-bucket mass averaged across replications.
    pub fn overflow_mass(&self) -> f64 {
        self.overflow_pmf_sum / self.rep_means.len() as f64
    }

    /// Largest age with a nonzero histogram bin, if any.
    pub fn max_observed_age(&self) -> Option<usize> {
        self.hist.iter().rposition(|&c| c > 0).map(|i| i + 2)
    }
}

/// Aggregated outcome of one or more simulation replications.
#[derive(Debug, Clone)]
pub struct SimStats {
    policy: Policy,
    horizon: u64,
    warmup: u64,
    base_seed: u64,
    seeds: Vec<u64>,
    overflow_threshold: u64,
    sources: Vec<SourceStats>,
}

impl SimStats {
    pub fn policy(&self) -> Policy {
        self.policy
    }

    pub fn horizon(&self) -> u64 {
        self.horizon
    }

    pub fn warmup(&self) -> u64 {
        self.warmup
    }

    pub fn base_seed(&self) -> u64 {
        self.base_seed
    }

    /// Derived per-replication seeds, in replication order.
    pub fn replication_seeds(&self) -> &[u64] {
        &self.seeds
    }

    pub fn replications(&self) -> usize {
        self.seeds.len()
    }

    pub fn overflow_threshold(&self) -> u64 {
        self.overflow_threshold
    }

    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn source(&self, index: usize) -> &SourceStats {
        &self.sources[index]
    }

    pub fn sources(&self) -> &[SourceStats] {
        &self.sources
    }
}

/// Runs a single replication with an explicit seed.
pub fn run_replication(
    config: &SystemConfig,
    policy: Policy,
    horizon: u64,
    warmup: u64,
    seed: u64,
) -> Result<SimStats, SimError> {
    run_with_seeds(config, policy, horizon, warmup, seed, vec![seed])
}

/// Runs `reps` independent replications with seeds derived from `base_seed`
/// via [`replication_seed`], aggregating between-replication statistics.
/// Identical inputs yield bit-identical outputs.
pub fn run_replications(
    config: &SystemConfig,
    policy: Policy,
    horizon: u64,
    warmup: u64,
    base_seed: u64,
    reps: usize,
) -> Result<SimStats, SimError> {
    if reps < 1 {
        return Err(SimError::NoReplications);
    }
    let seeds: Vec<u64> = (0..reps as u64).map(|r| replication_seed(base_seed, r)).collect();
    run_with_seeds(config, policy, horizon, warmup, base_seed, seeds)
}

fn run_with_seeds(
    config: &SystemConfig,
    policy: Policy,
    horizon: u64,
    warmup: u64,
    base_seed: u64,
    seeds: Vec<u64>,
) -> Result<SimStats, SimError> {
    if horizon <= warmup {
        return Err(SimError::HorizonTooShort { horizon, warmup });
    }
    let overflow_threshold = DEFAULT_OVERFLOW_THRESHOLD;
    let outcomes: Vec<Vec<RepSource>> = seeds
        .par_iter()
        .map(|&s| simulate_once(config, policy, horizon, warmup, s, overflow_threshold))
        .collect();

    let per_rep_slots = horizon - warmup;
    let n = config.num_sources();
    let reps = seeds.len();
    let mut sources = Vec::with_capacity(n);
    for i in 0..n {
        let max_len = outcomes.iter().map(|o| o[i].hist.len()).max().unwrap_or(0);
        let mut hist = vec![0u64; max_len];
        let mut pmf_sum = vec![0.0f64; max_len];
        let mut pmf_sq_sum = vec![0.0f64; max_len];
        let mut overflow_count = 0u64;
        let mut overflow_pmf_sum = 0.0f64;
        let mut rep_means = Vec::with_capacity(reps);
        for rep in &outcomes {
            let src = &rep[i];
            let slots = per_rep_slots as f64;
            for (b, &c) in src.hist.iter().enumerate() {
                hist[b] += c;
                let p = c as f64 / slots;
                pmf_sum[b] += p;
                pmf_sq_sum[b] += p * p;
            }
            overflow_count += src.overflow;
            overflow_pmf_sum += src.overflow as f64 / slots;
            rep_means.push(src.age_sum / slots);
        }
        sources.push(SourceStats {
            hist,
            overflow_count,
            recorded: per_rep_slots * reps as u64,
            rep_means,
            pmf_sum,
            pmf_sq_sum,
            overflow_pmf_sum,
        });
    }
    Ok(SimStats {
        policy,
        horizon,
        warmup,
        base_seed,
        seeds,
        overflow_threshold,
        sources,
    })
}

/// One row of an empirical-vs-expected p.m.f. comparison.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PmfDeviation {
    pub n: usize,
    pub expected: f64,
    pub observed: f64,
    pub stderr: f64,
    pub z: f64,
}

/// Compares the empirical p.m.f. of one source against an expected p.m.f.
/// for every age in `2..=n_limit` whose expected count reaches
/// `min_expected_count`; `z` is the deviation in between-replication
/// standard errors.
pub fn pmf_deviations(
    stats: &SimStats,
    source: usize,
    n_limit: usize,
    expected: impl Fn(usize) -> f64,
    min_expected_count: f64,
) -> Vec<PmfDeviation> {
    let src = stats.source(source);
    let total = src.recorded_slots() as f64;
    let mut rows = Vec::new();
    for n in 2..=n_limit {
        let e = expected(n);
        if e * total < min_expected_count {
            continue;
        }
        let observed = src.pmf(n);
        let stderr = src.pmf_stderr(n).unwrap_or(0.0);
        let diff = observed - e;
        let z = if stderr > 0.0 {
            diff / stderr
        } else if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        rows.push(PmfDeviation {
            n,
            expected: e,
            observed,
            stderr,
            z,
        });
    }
    rows
}

/// Deviation of the empirical mean from an expected mean, in
/// between-replication standard errors.
pub fn mean_deviation(stats: &SimStats, source: usize, expected_mean: f64) -> PmfDeviation {
    let src = stats.source(source);
    let observed = src.mean();
    let stderr = src.mean_stderr().unwrap_or(0.0);
    let diff = observed - expected_mean;
    let z = if stderr > 0.0 {
        diff / stderr
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    PmfDeviation {
        n: 0,
        expected: expected_mean,
        observed,
        stderr,
        z,
    }
}
