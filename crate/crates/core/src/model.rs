//! System configuration and per-source derived parameters.
//!
//! A system is a set of sources sharing one bufferless preemptive server.
//! Source `i` generates an update at the end of each slot with probability
//! `q_i`; a transmitted source-`i` update succeeds in a slot with probability
//! `gamma_i`. Everything downstream (closed forms, the truncated chain, the
//! simulator) is parameterized by the derived quantities computed here.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Subset enumeration behind [`SystemConfig::effective_generation_probability`]
/// costs `2^(N-1)` per source; beyond this many sources the exact computation
/// is rejected rather than silently approximated.
pub const MAX_SOURCES: usize = 20;

/// Discriminants at or below this value are treated as a repeated root of the
/// characteristic quadratic. Downstream difference quotients lose precision as
/// the roots coalesce, and the limit form is exact at the boundary.
pub const ROOT_DEGENERACY_TOL: f64 = 1e-12;

/// One status-update source: generation probability and per-slot transmission
/// success probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Source {
    /// Update generation probability at the end of each slot, in (0, 1].
    pub q: f64,
    /// Transmission success probability per slot, in (0, 1].
    pub gamma: f64,
}

/// Validated system configuration. Construct via [`SystemConfig::new`] or
/// [`SystemConfig::from_json_str`]; a constructed value always satisfies the
/// bounds below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    sources: Vec<Source>,
}

/// Rejected configuration input. Indices in messages are 1-based, matching
/// report output.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("config must contain at least one source")]
    Empty,
    #[error("config has {0} sources; exact subset enumeration is capped at {MAX_SOURCES}")]
    TooManySources(usize),
    #[error("source {index}: q must be > 0 (got {value}); a source that never generates has divergent AoI")]
    GenerationTooLow { index: usize, value: f64 },
    #[error("source {index}: q must be <= 1 (got {value})")]
    GenerationTooHigh { index: usize, value: f64 },
    #[error("source {index}: gamma must be > 0 (got {value}); an update that never succeeds is never delivered")]
    SuccessTooLow { index: usize, value: f64 },
    #[error("source {index}: gamma must be <= 1 (got {value})")]
    SuccessTooHigh { index: usize, value: f64 },
    #[error("invalid config JSON: {0}")]
    Json(String),
}

impl SystemConfig {
    /// Validates `(q, gamma)` pairs into a configuration.
    ///
    /// Bounds are strict at the bottom: `q = 0` is rejected (remove the
    /// source instead) and `gamma = 0` is rejected (that source's AoI
    /// diverges). No value is ever clamped.
    pub fn new(raw: impl IntoIterator<Item = (f64, f64)>) -> Result<Self, ConfigError> {
        let sources: Vec<Source> = raw
            .into_iter()
            .map(|(q, gamma)| Source { q, gamma })
            .collect();
        if sources.is_empty() {
            return Err(ConfigError::Empty);
        }
        if sources.len() > MAX_SOURCES {
            return Err(ConfigError::TooManySources(sources.len()));
        }
        for (idx, s) in sources.iter().enumerate() {
            let index = idx + 1;
            if !(s.q > 0.0) {
                return Err(ConfigError::GenerationTooLow { index, value: s.q });
            }
            if !(s.q <= 1.0) {
                return Err(ConfigError::GenerationTooHigh { index, value: s.q });
            }
            if !(s.gamma > 0.0) {
                return Err(ConfigError::SuccessTooLow { index, value: s.gamma });
            }
            if !(s.gamma <= 1.0) {
                return Err(ConfigError::SuccessTooHigh { index, value: s.gamma });
            }
        }
        Ok(Self { sources })
    }

    /// Parses the canonical JSON config format:
    /// `{"sources": [{"q": 0.4, "gamma": 0.5}, ...]}`.
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        #[derive(Deserialize)]
        struct Raw {
            sources: Vec<Source>,
        }
        let raw: Raw =
            serde_json::from_str(text).map_err(|e| ConfigError::Json(e.to_string()))?;
        Self::new(raw.sources.into_iter().map(|s| (s.q, s.gamma)))
    }

    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn sources(&self) -> &[Source] {
        &self.sources
    }

    pub fn source(&self, index: usize) -> Source {
        self.sources[index]
    }

    /// Effective generation probability `p_i`: the probability that source
    /// `index` generates at a slot end *and* wins the uniform selection among
    /// all simultaneous generators.
    ///
    /// Computed by exhaustive enumeration of the subsets of the other
    /// sources: each subset `H` of competing generators contributes
    /// `q_i * prod_{j in H} q_j * prod_{l not in H} (1 - q_l) / (|H| + 1)`.
    pub fn effective_generation_probability(&self, index: usize) -> f64 {
        assert!(index < self.sources.len(), "source index out of range");
        let q_i = self.sources[index].q;
        let others: Vec<f64> = self
            .sources
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != index)
            .map(|(_, s)| s.q)
            .collect();

        fn recurse(others: &[f64], depth: usize, weight: f64, competitors: usize) -> f64 {
            if depth == others.len() {
                return weight / (competitors + 1) as f64;
            }
            let q = others[depth];
            recurse(others, depth + 1, weight * q, competitors + 1)
                + recurse(others, depth + 1, weight * (1.0 - q), competitors)
        }

        q_i * recurse(&others, 0, 1.0, 0)
    }

    /// Overall generation probability `p = 1 - prod_i (1 - q_i)`: the
    /// probability that at least one source generates at a slot end.
    pub fn overall_generation_probability(&self) -> f64 {
        1.0 - self.sources.iter().map(|s| 1.0 - s.q).product::<f64>()
    }

    /// Derives every per-source analytic parameter for source `index`.
    pub fn derive_params(&self, index: usize) -> DerivedParams {
        assert!(index < self.sources.len(), "source index out of range");
        let gamma = self.sources[index].gamma;
        let p = self.overall_generation_probability();
        let p_win = self.effective_generation_probability(index);
        // Exact zero for a single source, and never negative by rounding,
        // unlike p - p_win.
        let p_other = (0..self.sources.len())
            .filter(|j| *j != index)
            .map(|j| self.effective_generation_probability(j))
            .sum::<f64>();
        let lambda = (1.0 - gamma) * (1.0 - p);
        let root_sum = 1.0 - gamma * p_win + lambda;

        let (alpha, beta, repeated_root) = if lambda == 0.0 {
            // gamma = 1 or p = 1: the quadratic factors as x(x - root_sum).
            (0.0, root_sum, root_sum == 0.0)
        } else {
            let disc = root_sum * root_sum - 4.0 * lambda;
            assert!(
                disc >= -ROOT_DEGENERACY_TOL,
                "internal error: characteristic discriminant {disc} < 0"
            );
            if disc <= ROOT_DEGENERACY_TOL {
                let root = 0.5 * root_sum;
                (root, root, true)
            } else {
                // root_sum >= 2*sqrt(lambda) > 0 here, so the larger root is
                // free of cancellation and the smaller follows from the
                // product identity alpha*beta = lambda.
                let beta = 0.5 * (root_sum + disc.sqrt());
                (lambda / beta, beta, false)
            }
        };

        DerivedParams {
            source_index: index,
            gamma,
            p_win,
            p_other,
            p,
            lambda,
            alpha,
            beta,
            repeated_root,
        }
    }

    /// [`derive_params`](Self::derive_params) for every source in order.
    pub fn derive_all(&self) -> Vec<DerivedParams> {
        (0..self.sources.len()).map(|i| self.derive_params(i)).collect()
    }
}

/// Per-source analytic parameters consumed by the closed forms, the chain
/// builder, and reports.
///
/// `alpha <= beta` are the roots of `x^2 - (1 - gamma*p_win + lambda)x +
/// lambda = 0`; both lie in `[0, 1)`, with `alpha = 0` exactly when
/// `gamma = 1` or `p = 1`, and `alpha = beta` exactly when `repeated_root`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DerivedParams {
    /// 0-based source index; reports print it 1-based.
    pub source_index: usize,
    /// Transmission success probability of this source.
    pub gamma: f64,
    /// Effective generation probability `p_i` of this source.
    pub p_win: f64,
    /// Effective generation probability of all other sources combined,
    /// `sum_{j != i} p_j`; equals `p - p_i` up to rounding but is exactly
    /// zero for a single source and never negative.
    pub p_other: f64,
    /// Overall generation probability `p`.
    pub p: f64,
    /// Probability that an in-service foreign-or-failed slot changes nothing:
    /// `lambda = (1 - gamma)(1 - p)`.
    pub lambda: f64,
    /// Smaller characteristic root.
    pub alpha: f64,
    /// Larger characteristic root.
    pub beta: f64,
    /// Whether the characteristic roots coalesced (discriminant within
    /// [`ROOT_DEGENERACY_TOL`] of zero).
    pub repeated_root: bool,
}
