//! Closed-form stationary probabilities of the 2D age process and the
//! per-source AoI p.m.f., tail, and mean.
//!
//! Every formula here reduces to the difference quotient
//! `S_k = (beta^k - alpha^k) / (beta - alpha)` of the characteristic roots:
//!
//! - `pmf(n)      = gamma * p_i * S_{n-1}`
//! - `pi_(n,0)    = p_i * (S_n - (1 - gamma) * S_{n-1} - lambda^{n-1})`
//! - `pi_(n,m)    = gamma * p_i^2 * lambda^{m-1} * S_{n-m}`
//! - `tail(n)     = S_{n-1} - lambda * S_{n-2}`
//!
//! `S_k` extends continuously to `k * alpha^(k-1)` when the roots coalesce,
//! which makes the repeated-root parameter set (for example a single source
//! with `q = gamma`) a first-class code path instead of a 0/0.

use crate::model::DerivedParams;

/// Below this root separation the subtractive form of the difference
/// quotient loses too much relative precision; the summation form is used.
const NEAR_DEGENERATE_SPAN: f64 = 1e-6;

/// Truncation cap: vector views never extend past this age even if the
/// requested tail mass is not reached.
pub const N_MAX_CAP: usize = 1_000_000;

/// `(beta^k - alpha^k) / (beta - alpha)` for `k >= 0`, with the analytic
/// limit `k * alpha^(k-1)` at a repeated root.
///
/// For nearly coalesced roots the subtractive form is replaced by the
/// all-positive summation `sum_{j=0}^{k-1} alpha^j beta^{k-1-j}`.
pub fn root_power_quotient(params: &DerivedParams, k: usize) -> f64 {
    let (alpha, beta) = (params.alpha, params.beta);
    if k == 0 {
        return 0.0;
    }
    if params.repeated_root {
        return k as f64 * alpha.powi(k as i32 - 1);
    }
    if beta - alpha < NEAR_DEGENERATE_SPAN {
        let mut term = beta.powi(k as i32 - 1);
        let ratio = alpha / beta;
        let mut sum = 0.0;
        for _ in 0..k {
            sum += term;
            term *= ratio;
        }
        return sum;
    }
    (beta.powi(k as i32) - alpha.powi(k as i32)) / (beta - alpha)
}

/// Incremental generator of `S_1, S_2, ...` in O(1) per step via
/// `S_{k+1} = beta * S_k + alpha^k`, the recurrence of the summation form.
/// Valid in the repeated-root and `alpha = 0` cases alike.
struct QuotientSequence {
    alpha: f64,
    beta: f64,
    s: f64,
    alpha_pow: f64,
}

impl QuotientSequence {
    fn new(params: &DerivedParams) -> Self {
        Self {
            alpha: params.alpha,
            beta: params.beta,
            s: 0.0,
            alpha_pow: 1.0,
        }
    }
}

impl Iterator for QuotientSequence {
    type Item = f64;

    fn next(&mut self) -> Option<f64> {
        self.s = self.beta * self.s + self.alpha_pow;
        self.alpha_pow *= self.alpha;
        Some(self.s)
    }
}

/// Stationary probability of the 2D age state `(n, 0)`: AoI `n` and no
/// update of this source in service. Defined for `n >= 2`.
pub fn stationary_n0(params: &DerivedParams, n: usize) -> f64 {
    assert!(n >= 2, "(n, 0) states require n >= 2, got n = {n}");
    let s_n = root_power_quotient(params, n);
    let s_prev = root_power_quotient(params, n - 1);
    let decay = params.lambda.powi(n as i32 - 1);
    params.p_win * (s_n - (1.0 - params.gamma) * s_prev - decay)
}

/// Stationary probability of the 2D age state `(n, m)` for `1 <= m < n`:
/// AoI `n` with an in-service update of this source aged `m`.
pub fn stationary_nm(params: &DerivedParams, n: usize, m: usize) -> f64 {
    assert!(
        m >= 1 && m < n,
        "(n, m) states require 1 <= m < n, got (n, m) = ({n}, {m})"
    );
    params.gamma
        * params.p_win
        * params.p_win
        * params.lambda.powi(m as i32 - 1)
        * root_power_quotient(params, n - m)
}

/// Per-source AoI p.m.f. at age `n >= 2` slots.
pub fn aoi_pmf(params: &DerivedParams, n: usize) -> f64 {
    assert!(n >= 2, "AoI support starts at 2 slots, got n = {n}");
    params.gamma * params.p_win * root_power_quotient(params, n - 1)
}

/// Mean per-source AoI in slots.
pub fn aoi_mean(params: &DerivedParams) -> f64 {
    (params.gamma + (1.0 - params.gamma) * params.p) / (params.gamma * params.p_win) + 1.0
}

/// Tail probability `Pr{AoI >= n}` for `n >= 2`, via the closed geometric
/// sums of the p.m.f. terms; `aoi_tail(params, 2) = 1`.
pub fn aoi_tail(params: &DerivedParams, n: usize) -> f64 {
    assert!(n >= 2, "AoI support starts at 2 slots, got n = {n}");
    let s_prev = root_power_quotient(params, n - 1);
    let s_prev2 = root_power_quotient(params, n - 2);
    s_prev - params.lambda * s_prev2
}

/// Smallest `n >= 2` whose tail mass `Pr{AoI >= n}` falls below `threshold`,
/// capped at [`N_MAX_CAP`].
pub fn n_for_tail_below(params: &DerivedParams, threshold: f64) -> usize {
    let mut seq = QuotientSequence::new(params);
    let mut s_prev2 = 0.0; // S_0
    let mut s_prev = seq.next().unwrap(); // S_1
    let mut n = 2usize;
    loop {
        let tail = s_prev - params.lambda * s_prev2;
        if tail < threshold || n >= N_MAX_CAP {
            return n;
        }
        s_prev2 = s_prev;
        s_prev = seq.next().unwrap();
        n += 1;
    }
}

/// Truncated view of a per-source AoI distribution: p.m.f. over
/// `n = 2..=n_max` plus the analytic mass beyond the truncation point.
///
/// The tail mass is recorded, never folded back in; the vector sum plus
/// `tail_mass` is 1 up to rounding.
#[derive(Debug, Clone)]
pub struct AoiDistribution {
    params: DerivedParams,
    pmf: Vec<f64>,
    n_max: usize,
    tail_mass: f64,
    mean: f64,
}

impl AoiDistribution {
    /// Default tail mass left outside the truncated vector view.
    pub const DEFAULT_TAIL: f64 = 1e-12;

    /// Builds the distribution for one source, truncating at the given
    /// `n_max` or, when `None`, at the smallest age with tail below
    /// [`Self::DEFAULT_TAIL`].
    pub fn new(params: DerivedParams, n_max: Option<usize>) -> Self {
        let n_max = n_max
            .unwrap_or_else(|| n_for_tail_below(&params, Self::DEFAULT_TAIL))
            .clamp(2, N_MAX_CAP);
        let scale = params.gamma * params.p_win;
        let pmf: Vec<f64> = QuotientSequence::new(&params)
            .take(n_max - 1)
            .map(|s| scale * s)
            .collect();
        let tail_mass = aoi_tail(&params, n_max + 1);
        Self {
            params,
            pmf,
            n_max,
            tail_mass,
            mean: aoi_mean(&params),
        }
    }

    pub fn params(&self) -> &DerivedParams {
        &self.params
    }

    pub fn source_index(&self) -> usize {
        self.params.source_index
    }

    /// Largest age included in the vector view.
    pub fn n_max(&self) -> usize {
        self.n_max
    }

    /// Analytic mass at ages strictly above `n_max`.
    pub fn tail_mass(&self) -> f64 {
        self.tail_mass
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Point query, exact for any `n >= 2` regardless of the truncation.
    pub fn pmf(&self, n: usize) -> f64 {
        if n < 2 {
            return 0.0;
        }
        match self.pmf.get(n - 2) {
            Some(&v) => v,
            None => aoi_pmf(&self.params, n),
        }
    }

    /// `(n, pmf(n))` for `n = 2..=n_max`.
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.pmf.iter().enumerate().map(|(i, &v)| (i + 2, v))
    }

    /// Vector view of the p.m.f. with index 0 holding `pmf(2)`.
    pub fn as_slice(&self) -> &[f64] {
        &self.pmf
    }
}

/// Residuals of the stationary balance equations of the 2D age process,
/// evaluated on the closed forms with the infinite sums truncated to a
/// certified bound. A correct implementation keeps `max_abs` at rounding
/// level.
#[derive(Debug, Clone, Copy)]
pub struct StationaryResiduals {
    /// Largest absolute residual over all checked equations.
    pub max_abs: f64,
    /// Residual of the boundary equation for state (2, 1).
    pub boundary_in_service: f64,
    /// Residual of the boundary equation for state (2, 0).
    pub boundary_idle: f64,
    /// Largest residual of the (n, 1) balance equations, n = 3..=n_check.
    pub in_service_max: f64,
    /// Largest residual of the (n, 0) balance equations, n = 3..=n_check.
    pub idle_max: f64,
    /// Largest residual of the diagonal recursion (n, m) = lambda*(n-1, m-1).
    pub diagonal_max: f64,
    /// Certified bound on the truncation error of the column sums used in
    /// the equations.
    pub sum_truncation_bound: f64,
}

/// Evaluates the balance-equation residuals up to age `n_check`.
///
/// The single infinite series needed, `M = sum_{k>=1} S_k`, is summed until
/// the geometric remainder bound `sum_{k>=K} k beta^{k-1}` certifies an error
/// below 1e-16; every column-sum appearing in the equations is a multiple of
/// `M`.
pub fn stationary_equation_residuals(
    params: &DerivedParams,
    n_check: usize,
) -> StationaryResiduals {
    let gamma = params.gamma;
    let p_win = params.p_win;
    let lambda = params.lambda;
    let beta = params.beta;
    let scale = gamma * p_win * p_win;

    // M = sum_{k>=1} S_k, truncated with remainder certified via
    // S_k <= k * beta^(k-1).
    let mut m_sum = 0.0;
    let mut bound = f64::INFINITY;
    let mut seq = QuotientSequence::new(params);
    let mut k = 1usize;
    let mut beta_pow = 1.0; // beta^(k-1)
    while k <= 100_000_000 {
        m_sum += seq.next().unwrap();
        beta_pow *= beta;
        k += 1;
        if k % 64 == 0 || beta_pow * (k as f64) < 1e-18 {
            // Remainder of sum_{j>=k} j*beta^(j-1).
            let one_minus = 1.0 - beta;
            bound = scale * (k as f64 * beta_pow * one_minus + beta_pow * beta)
                / (one_minus * one_minus);
            if bound < 1e-16 {
                break;
            }
        }
    }

    // Column sums: sum_{h>=2} pi_(h,1) = scale * M and
    // sum_{k>=n} pi_(k,n-1) = scale * lambda^(n-2) * M.
    let in_service_total = scale * m_sum;

    let boundary_in_service =
        (stationary_nm(params, 2, 1) - gamma * p_win * in_service_total).abs();
    let boundary_idle =
        (stationary_n0(params, 2) - gamma * (1.0 - p_win) * in_service_total).abs();

    let mut in_service_max = 0.0f64;
    let mut idle_max = 0.0f64;
    let mut diagonal_max = 0.0f64;
    for n in 3..=n_check.max(3) {
        let column_tail = scale * lambda.powi(n as i32 - 2) * m_sum;
        let row_part: f64 = (1..=n - 2).map(|k| stationary_nm(params, n - 1, k)).sum();
        let prev_idle = stationary_n0(params, n - 1);

        let expect_in_service = p_win * prev_idle
            + gamma * p_win * column_tail
            + (1.0 - gamma) * p_win * row_part;
        in_service_max =
            in_service_max.max((stationary_nm(params, n, 1) - expect_in_service).abs());

        let expect_idle = (1.0 - p_win) * prev_idle
            + gamma * (1.0 - p_win) * column_tail
            + (1.0 - gamma) * params.p_other * row_part;
        idle_max = idle_max.max((stationary_n0(params, n) - expect_idle).abs());

        for m in 2..n {
            let r = (stationary_nm(params, n, m)
                - lambda * stationary_nm(params, n - 1, m - 1))
            .abs();
            diagonal_max = diagonal_max.max(r);
        }
    }

    let max_abs = boundary_in_service
        .max(boundary_idle)
        .max(in_service_max)
        .max(idle_max)
        .max(diagonal_max);
    StationaryResiduals {
        max_abs,
        boundary_in_service,
        boundary_idle,
        in_service_max,
        idle_max,
        diagonal_max,
        sum_truncation_bound: bound,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SystemConfig;
    use approx::assert_abs_diff_eq;

    fn two_source_params() -> DerivedParams {
        SystemConfig::new([(0.4, 0.5), (0.4, 0.9)])
            .unwrap()
            .derive_params(0)
    }

    fn repeated_root_params() -> DerivedParams {
        SystemConfig::new([(0.5, 0.5)]).unwrap().derive_params(0)
    }

    #[test]
    fn quotient_matches_direct_evaluation() {
        let d = two_source_params();
        for k in 0..40 {
            let direct = (d.beta.powi(k as i32) - d.alpha.powi(k as i32)) / (d.beta - d.alpha);
            assert_abs_diff_eq!(root_power_quotient(&d, k), direct, epsilon = 1e-13);
        }
    }

    #[test]
    fn quotient_sequence_matches_point_queries() {
        for d in [two_source_params(), repeated_root_params()] {
            let seq: Vec<f64> = QuotientSequence::new(&d).take(30).collect();
            for (i, s) in seq.iter().enumerate() {
                assert_abs_diff_eq!(*s, root_power_quotient(&d, i + 1), epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn repeated_root_limit_matches_finite_difference() {
        // Central difference of the two-root formula at beta = alpha +- h
        // approximates the limit form.
        let d = repeated_root_params();
        let h = 1e-6;
        for n in [3usize, 5, 9] {
            let f = |beta: f64| {
                (beta.powi(n as i32) - d.alpha.powi(n as i32)) / (beta - d.alpha)
            };
            let approx_limit = 0.5 * (f(d.alpha + h) + f(d.alpha - h));
            assert_abs_diff_eq!(
                root_power_quotient(&d, n),
                approx_limit,
                epsilon = 1e-6
            );
        }
    }

    #[test]
    fn boundary_state_matches_closed_value() {
        // pi_(2,0) = gamma p_i (1 - p_i) for any parameter set.
        for d in [two_source_params(), repeated_root_params()] {
            assert_abs_diff_eq!(
                stationary_n0(&d, 2),
                d.gamma * d.p_win * (1.0 - d.p_win),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn first_in_service_state_is_gamma_p_squared() {
        let d = two_source_params();
        assert_abs_diff_eq!(
            stationary_nm(&d, 2, 1),
            d.gamma * d.p_win * d.p_win,
            epsilon = 1e-15
        );
        // Also equals p_i/(1-p_i) * pi_(2,0).
        assert_abs_diff_eq!(
            stationary_nm(&d, 2, 1),
            d.p_win / (1.0 - d.p_win) * stationary_n0(&d, 2),
            epsilon = 1e-15
        );
    }

    #[test]
    fn deep_in_service_states_vanish_without_retransmission_survivals() {
        // gamma = 1 forces lambda = 0: an update never survives a slot
        // unserved, so (n, m >= 2) has no mass.
        let d = SystemConfig::new([(0.3, 1.0)]).unwrap().derive_params(0);
        assert_eq!(stationary_nm(&d, 5, 2), 0.0);
        assert_eq!(stationary_nm(&d, 5, 4), 0.0);
    }

    #[test]
    fn pmf_at_minimum_age_is_gamma_p() {
        for d in [two_source_params(), repeated_root_params()] {
            assert_abs_diff_eq!(aoi_pmf(&d, 2), d.gamma * d.p_win, epsilon = 1e-15);
        }
    }

    #[test]
    fn repeated_root_pmf_values() {
        let d = repeated_root_params();
        assert_abs_diff_eq!(aoi_pmf(&d, 2), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(aoi_pmf(&d, 3), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(aoi_pmf(&d, 4), 0.1875, epsilon = 1e-15);
    }

    #[test]
    fn pmf_is_marginal_of_stationary_grid() {
        for d in [two_source_params(), repeated_root_params()] {
            for n in 2..=50 {
                let marginal: f64 = stationary_n0(&d, n)
                    + (1..n).map(|m| stationary_nm(&d, n, m)).sum::<f64>();
                assert_abs_diff_eq!(aoi_pmf(&d, n), marginal, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn mean_examples() {
        let d = SystemConfig::new([(1.0, 1.0)]).unwrap().derive_params(0);
        assert_eq!(aoi_mean(&d), 2.0);

        assert_abs_diff_eq!(aoi_mean(&two_source_params()), 6.125, epsilon = 1e-12);
        assert_abs_diff_eq!(aoi_mean(&repeated_root_params()), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn mean_matches_pmf_weighted_sum() {
        for d in [two_source_params(), repeated_root_params()] {
            let n_stop = n_for_tail_below(&d, 1e-15);
            let weighted: f64 = (2..=n_stop).map(|n| n as f64 * aoi_pmf(&d, n)).sum();
            assert_abs_diff_eq!(aoi_mean(&d), weighted, epsilon = 1e-9);
        }
    }

    #[test]
    fn tail_starts_at_one_and_telescopes() {
        for d in [two_source_params(), repeated_root_params()] {
            assert_eq!(aoi_tail(&d, 2), 1.0);
            let mut prev = 1.0;
            for n in 2..=100 {
                let t = aoi_tail(&d, n);
                assert!(t <= prev + 1e-15, "tail must be nonincreasing");
                assert_abs_diff_eq!(
                    t - aoi_tail(&d, n + 1),
                    aoi_pmf(&d, n),
                    epsilon = 1e-12
                );
                prev = t;
            }
        }
    }

    #[test]
    fn normalization_identity_and_truncated_sum() {
        for d in [two_source_params(), repeated_root_params()] {
            // Algebraic normalization: (1 - alpha)(1 - beta) = gamma * p_i.
            assert_abs_diff_eq!(
                (1.0 - d.alpha) * (1.0 - d.beta),
                d.gamma * d.p_win,
                epsilon = 1e-12
            );
            let dist = AoiDistribution::new(d, None);
            let total: f64 = dist.as_slice().iter().sum::<f64>() + dist.tail_mass();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn distribution_view_is_consistent_with_point_queries() {
        let dist = AoiDistribution::new(two_source_params(), Some(64));
        assert_eq!(dist.n_max(), 64);
        for (n, v) in dist.iter() {
            assert_abs_diff_eq!(v, aoi_pmf(dist.params(), n), epsilon = 1e-13);
        }
        // Point queries past the truncation still answer.
        assert!(dist.pmf(100) > 0.0);
        assert_eq!(dist.pmf(1), 0.0);
    }

    #[test]
    fn truncation_point_honors_threshold() {
        let d = two_source_params();
        let n = n_for_tail_below(&d, 1e-12);
        assert!(aoi_tail(&d, n) < 1e-12);
        assert!(aoi_tail(&d, n - 1) >= 1e-12);
    }

    #[test]
    fn balance_residuals_are_rounding_level() {
        for d in [two_source_params(), repeated_root_params()] {
            let r = stationary_equation_residuals(&d, 50);
            assert!(r.sum_truncation_bound < 1e-15);
            assert!(r.max_abs < 1e-12, "residual {:?}", r);
        }
    }

    #[test]
    #[should_panic(expected = "support starts at 2")]
    fn pmf_below_support_panics() {
        aoi_pmf(&two_source_params(), 1);
    }

    #[test]
    #[should_panic(expected = "1 <= m < n")]
    fn stationary_nm_rejects_bad_coordinates() {
        stationary_nm(&two_source_params(), 3, 3);
    }
}
