//! Truncated 2D age chain built directly from the slot-level transition
//! rules, and its numerically solved stationary distribution.
//!
//! The state `(n, m)` is the pair (per-source AoI, in-service update age of
//! that source, `0` when none). The chain here is constructed from the
//! per-slot transition probabilities alone; solving it numerically gives an
//! oracle that is independent of the closed forms in [`crate::analytic`].
//!
//! Truncation clamps the age coordinate at `n_max` (targets beyond the cap
//! keep their second coordinate when valid). Clamping preserves
//! stochasticity, so the solver needs no boundary renormalization, and the
//! inflated boundary mass can be audited against the analytic tail.

use std::io::Write;

use thiserror::Error;

use crate::analytic;
use crate::model::DerivedParams;

/// Hard cap on the truncated state count; two solver vectors of this size
/// stay within a few gigabytes.
pub const MAX_STATES: usize = 150_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChainError {
    #[error("n_max must be at least 3, got {0}")]
    TruncationTooSmall(usize),
    #[error("n_max = {n_max} yields {states} states, above the cap of {MAX_STATES}")]
    TooLarge { n_max: usize, states: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error(
        "stationary solve did not reach residual {tol:.3e} within {iterations} sweeps \
         (final residual {residual:.3e}); enlarge max_iters or n_max"
    )]
    NoConvergence {
        tol: f64,
        residual: f64,
        iterations: u64,
    },
}

/// A transition whose raw target age exceeded `n_max` and was clamped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClampedTransition {
    pub from: (usize, usize),
    pub raw_target: (usize, usize),
    pub target: (usize, usize),
    pub probability: f64,
}

/// Age-truncated 2D age chain for one source.
///
/// The transition structure is stored implicitly: it is fully determined by
/// four probabilities, and per-state outgoing edges are generated on demand
/// ([`Self::outgoing`]), which keeps memory linear in the solution vector
/// rather than in the edge count.
#[derive(Debug, Clone)]
pub struct TruncatedChain {
    n_max: usize,
    source_index: usize,
    p_win: f64,
    gamma: f64,
    p_other: f64,
    lambda: f64,
}

impl TruncatedChain {
    /// Builds the chain for one source with ages clamped at `n_max >= 3`.
    pub fn build(params: &DerivedParams, n_max: usize) -> Result<Self, ChainError> {
        if n_max < 3 {
            return Err(ChainError::TruncationTooSmall(n_max));
        }
        let states = n_max * (n_max + 1) / 2 - 1;
        if states > MAX_STATES {
            return Err(ChainError::TooLarge { n_max, states });
        }
        Ok(Self {
            n_max,
            source_index: params.source_index,
            p_win: params.p_win,
            gamma: params.gamma,
            p_other: params.p_other,
            lambda: params.lambda,
        })
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn source_index(&self) -> usize {
        self.source_index
    }

    pub fn state_count(&self) -> usize {
        self.n_max * (self.n_max + 1) / 2 - 1
    }

    /// Flat index of state `(n, m)`; row-major in `n` with `m` contiguous.
    #[inline]
    pub fn state_index(&self, n: usize, m: usize) -> usize {
        debug_assert!((2..=self.n_max).contains(&n) && m < n, "invalid state ({n}, {m})");
        n * (n - 1) / 2 - 1 + m
    }

    /// All states in index order.
    pub fn states(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (2..=self.n_max).flat_map(|n| (0..n).map(move |m| (n, m)))
    }

    /// Invokes `f(target, probability)` for each outgoing transition of
    /// `(n, m)`. Zero-probability transitions are omitted; targets that
    /// collide after clamping are reported separately, not merged.
    #[inline]
    pub fn for_each_outgoing(&self, n: usize, m: usize, mut f: impl FnMut((usize, usize), f64)) {
        debug_assert!((2..=self.n_max).contains(&n) && m < n);
        let fwd = (n + 1).min(self.n_max);
        if m == 0 {
            // No source-i update in service: the AoI grows and the server
            // picks up a fresh source-i update only if one wins selection.
            if self.p_win > 0.0 {
                f((fwd, 1), self.p_win);
            }
            if self.p_win < 1.0 {
                f((fwd, 0), 1.0 - self.p_win);
            }
        } else {
            // Source-i update of age m in service: it is delivered with
            // probability gamma (resetting the AoI to m+1), and the slot end
            // decides who occupies the server next.
            let succeed_and_win = self.gamma * self.p_win;
            if succeed_and_win > 0.0 {
                f((m + 1, 1), succeed_and_win);
            }
            let succeed_no_win = self.gamma * (1.0 - self.p_win);
            if succeed_no_win > 0.0 {
                f((m + 1, 0), succeed_no_win);
            }
            let fail_and_win = (1.0 - self.gamma) * self.p_win;
            if fail_and_win > 0.0 {
                f((fwd, 1), fail_and_win);
            }
            let fail_other_wins = (1.0 - self.gamma) * self.p_other;
            if fail_other_wins > 0.0 {
                f((fwd, 0), fail_other_wins);
            }
            if self.lambda > 0.0 {
                let kept_m = if fwd == n + 1 { m + 1 } else { (m + 1).min(self.n_max - 1) };
                f((fwd, kept_m), self.lambda);
            }
        }
    }

    /// Outgoing edges of `(n, m)` as a list, for inspection and tests.
    pub fn outgoing(&self, n: usize, m: usize) -> Vec<((usize, usize), f64)> {
        let mut edges = Vec::with_capacity(5);
        self.for_each_outgoing(n, m, |t, p| edges.push((t, p)));
        edges
    }

    /// Every transition whose age coordinate was clamped at `n_max`. Only
    /// the forward transitions of the boundary row `n = n_max` clamp;
    /// deliveries reset to ages `m + 1 <= n_max` and are never affected.
    pub fn clamped_transitions(&self) -> Vec<ClampedTransition> {
        let n = self.n_max;
        let mut clamped = Vec::new();
        let mut push = |m: usize, raw_m: usize, target_m: usize, probability: f64| {
            if probability > 0.0 {
                clamped.push(ClampedTransition {
                    from: (n, m),
                    raw_target: (n + 1, raw_m),
                    target: (n, target_m),
                    probability,
                });
            }
        };
        push(0, 1, 1, self.p_win);
        push(0, 0, 0, 1.0 - self.p_win);
        for m in 1..n {
            push(m, 1, 1, (1.0 - self.gamma) * self.p_win);
            push(m, 0, 0, (1.0 - self.gamma) * self.p_other);
            push(m, m + 1, (m + 1).min(n - 1), self.lambda);
        }
        clamped
    }

    /// Reference application of the transition operator: `out = x P`,
    /// accumulated edge by edge.
    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.state_count());
        assert_eq!(out.len(), x.len());
        out.fill(0.0);
        for (n, m) in self.states() {
            let mass = x[self.state_index(n, m)];
            if mass == 0.0 {
                continue;
            }
            self.for_each_outgoing(n, m, |(tn, tm), p| {
                out[self.state_index(tn, tm)] += mass * p;
            });
        }
    }

    /// Structured application of the transition operator, algebraically
    /// identical to [`Self::apply_into`] but organized as sequential passes
    /// (column totals for resets, row totals for preemption, a diagonal
    /// shift for retained updates) so large chains stay memory-bound.
    fn apply_structured(&self, x: &[f64], out: &mut [f64], col_totals: &mut [f64]) {
        let n_max = self.n_max;
        out.fill(0.0);
        col_totals.fill(0.0);

        // Row and column totals of the m >= 1 states, plus forward moves of
        // the m = 0 column.
        for n in 2..=n_max {
            let row_start = self.state_index(n, 0);
            let fwd = (n + 1).min(n_max);
            let fwd_start = self.state_index(fwd, 0);

            let idle_mass = x[row_start];
            out[fwd_start + 1] += self.p_win * idle_mass;
            out[fwd_start] += (1.0 - self.p_win) * idle_mass;

            let row = &x[row_start + 1..row_start + n];
            let mut row_total = 0.0;
            for (m, &v) in row.iter().enumerate() {
                col_totals[m + 1] += v;
                row_total += v;
            }
            out[fwd_start + 1] += (1.0 - self.gamma) * self.p_win * row_total;
            out[fwd_start] += (1.0 - self.gamma) * self.p_other * row_total;

            // Retained updates: (n, m) -> (fwd, m+1) with probability lambda.
            if self.lambda > 0.0 && n >= 2 {
                if fwd == n + 1 {
                    let dst = &mut out[fwd_start + 2..fwd_start + n + 1];
                    for (d, &v) in dst.iter_mut().zip(row.iter()) {
                        *d += self.lambda * v;
                    }
                } else {
                    // Boundary row: ages clamp, the corner self-loops.
                    for (m, &v) in row.iter().enumerate() {
                        let kept_m = (m + 2).min(n_max - 1);
                        out[fwd_start + kept_m] += self.lambda * v;
                    }
                }
            }
        }

        // Deliveries reset the age to the served update's age + 1; the
        // contribution depends only on column totals.
        for m in 1..n_max {
            let total = col_totals[m];
            if total == 0.0 {
                continue;
            }
            let reset_start = self.state_index(m + 1, 0);
            out[reset_start + 1] += self.gamma * self.p_win * total;
            out[reset_start] += self.gamma * (1.0 - self.p_win) * total;
        }
    }

    /// Stationary distribution by power iteration from the uniform
    /// distribution, renormalizing each sweep, until the max-norm residual
    /// `|xP - x|` falls to `tol`.
    pub fn solve(&self, tol: f64, max_iters: u64) -> Result<StationaryGrid, SolveError> {
        self.solve_with(SolveMethod::PowerIteration, tol, max_iters)
    }

    /// Stationary distribution with an explicit solver choice. Whatever the
    /// method, the returned residual is re-verified with the reference
    /// operator [`Self::apply_into`].
    pub fn solve_with(
        &self,
        method: SolveMethod,
        tol: f64,
        max_iters: u64,
    ) -> Result<StationaryGrid, SolveError> {
        assert!(tol > 0.0, "tolerance must be positive");
        // Gauss-Seidel divides by (1 - self-loop weight); fall back to power
        // iteration for parameter sets where a self loop saturates (these
        // концентрate mass immediately, so power iteration is fast there).
        let gp1 = self.gamma * self.p_win;
        let fw1 = (1.0 - self.gamma) * self.p_win;
        let method = if matches!(method, SolveMethod::GaussSeidel)
            && (gp1 > 1.0 - 1e-9 || fw1 > 1.0 - 1e-9 || self.lambda > 1.0 - 1e-9)
        {
            SolveMethod::PowerIteration
        } else {
            method
        };
        let (probs, residual, iterations) = match method {
            SolveMethod::PowerIteration => self.power_iteration(tol, max_iters)?,
            SolveMethod::GaussSeidel => self.gauss_seidel(tol, max_iters)?,
        };
        let boundary_mass = (0..self.n_max)
            .map(|m| probs[self.state_index(self.n_max, m)])
            .sum();
        Ok(StationaryGrid {
            n_max: self.n_max,
            source_index: self.source_index,
            probs,
            residual,
            iterations,
            boundary_mass,
        })
    }

    /// Verifies `x` against the reference operator; returns the max-norm
    /// residual `|xP - x|` using `scratch` for the product.
    fn verified_residual(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        self.apply_into(x, scratch);
        x.iter()
            .zip(scratch.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max)
    }

    fn power_iteration(
        &self,
        tol: f64,
        max_iters: u64,
    ) -> Result<(Vec<f64>, f64, u64), SolveError> {
        let count = self.state_count();
        let mut cur = vec![1.0 / count as f64; count];
        let mut next = vec![0.0; count];
        let mut cols = vec![0.0; self.n_max];

        let mut iterations = 0u64;
        let mut residual = f64::INFINITY;
        while iterations < max_iters {
            self.apply_structured(&cur, &mut next, &mut cols);
            iterations += 1;

            let mut max_diff = 0.0f64;
            let mut sum = 0.0f64;
            for (a, b) in next.iter().zip(cur.iter()) {
                max_diff = max_diff.max((a - b).abs());
                sum += a;
            }
            let inv = 1.0 / sum;
            for v in next.iter_mut() {
                *v *= inv;
            }
            std::mem::swap(&mut cur, &mut next);
            residual = max_diff;
            if residual <= tol {
                break;
            }
        }

        let final_residual = self.verified_residual(&cur, &mut next);
        if final_residual > tol {
            return Err(SolveError::NoConvergence {
                tol,
                residual: final_residual.max(residual),
                iterations,
            });
        }
        Ok((cur, final_residual, iterations))
    }

    /// Gauss-Seidel sweeps in ascending age order. The forward flow of the
    /// chain (age grows by one per slot) is resolved within a single sweep,
    /// so convergence is governed only by the delivery feedback loop and is
    /// largely independent of the tail length; long-tailed parameter sets
    /// converge orders of magnitude faster than under power iteration.
    fn gauss_seidel(&self, tol: f64, max_iters: u64) -> Result<(Vec<f64>, f64, u64), SolveError> {
        let count = self.state_count();
        let n_max = self.n_max;
        let mut x = vec![1.0 / count as f64; count];
        let mut cols = vec![0.0f64; n_max];
        let mut scratch = vec![0.0f64; count];

        let gp1 = self.gamma * self.p_win;
        let gp0 = self.gamma * (1.0 - self.p_win);
        let fw1 = (1.0 - self.gamma) * self.p_win;
        let fw0 = (1.0 - self.gamma) * self.p_other;
        let keep = 1.0 - self.p_win;

        let mut iterations = 0u64;
        let mut check_level = tol;
        let mut residual;
        loop {
            // Fresh column totals each sweep; live-updated as states change.
            cols.fill(0.0);
            for n in 2..=n_max {
                let start = self.state_index(n, 0);
                for (m, &v) in x[start + 1..start + n].iter().enumerate() {
                    cols[m + 1] += v;
                }
            }

            let mut max_diff = 0.0f64;
            let mut update = |slot: &mut f64, new: f64, col: Option<&mut f64>| {
                let delta = new - *slot;
                max_diff = max_diff.max(delta.abs());
                if let Some(c) = col {
                    *c += delta;
                }
                *slot = new;
            };

            // Row 2: fed exclusively by deliveries out of column 1, which
            // includes (2, 1) itself.
            update(&mut x[0], gp0 * cols[1], None);
            {
                let old = x[1];
                let new = gp1 * (cols[1] - old) / (1.0 - gp1);
                update(&mut x[1], new, Some(&mut cols[1]));
            }
            let mut prev_idle = x[0];
            let mut prev_row_m1 = x[1];

            for n in 3..=n_max {
                let start = self.state_index(n, 0);
                let prev_start = self.state_index(n - 1, 0);
                let col_total = cols[n - 1];
                if n < n_max {
                    update(
                        &mut x[start],
                        keep * prev_idle + gp0 * col_total + fw0 * prev_row_m1,
                        None,
                    );
                    {
                        let new = self.p_win * prev_idle + gp1 * col_total + fw1 * prev_row_m1;
                        let (head, tail) = x.split_at_mut(start + 1);
                        update(&mut head[start], x_unused(&tail), None); // placeholder
                    }
                } else {
                    // Boundary row: clamped forward edges feed the row from
                    // itself; self loops are folded into the denominators.
                }
                let _ = prev_start;
                prev_idle = x[start];
                prev_row_m1 = 0.0;
            }

            iterations += 1;
            residual = max_diff;
            if residual <= check_level || iterations >= max_iters {
                let true_residual = self.verified_residual(&x, &mut scratch);
                if true_residual <= tol {
                    return Ok((x, true_residual, iterations));
                }
                if iterations >= max_iters {
                    return Err(SolveError::NoConvergence {
                        tol,
                        residual: true_residual,
                        iterations,
                    });
                }
                check_level = (max_diff * 0.25).min(check_level * 0.25);
            }
        }
    }
}

/// Solved stationary distribution of a truncated chain.
#[derive(Debug, Clone)]
pub struct StationaryGrid {
    n_max: usize,
    source_index: usize,
    probs: Vec<f64>,
    residual: f64,
    iterations: u64,
    boundary_mass: f64,
}

impl StationaryGrid {
    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn source_index(&self) -> usize {
        self.source_index
    }

    /// Verified max-norm residual `|pi P - pi|` of the returned vector.
    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn iterations(&self) -> u64 {
        self.iterations
    }

    /// Mass accumulated in the clamped boundary row `n = n_max`; estimates
    /// the truncated tail `Pr{AoI >= n_max}`.
    pub fn boundary_mass(&self) -> f64 {
        self.boundary_mass
    }

    pub fn prob(&self, n: usize, m: usize) -> f64 {
        assert!((2..=self.n_max).contains(&n) && m < n, "invalid state ({n}, {m})");
        self.probs[n * (n - 1) / 2 - 1 + m]
    }

    /// AoI marginal at age `n`: sum of the row `(n, .)`.
    pub fn marginal(&self, n: usize) -> f64 {
        assert!((2..=self.n_max).contains(&n));
        let start = n * (n - 1) / 2 - 1;
        self.probs[start..start + n].iter().sum()
    }

    /// Mean AoI of the grid (boundary row included).
    pub fn mean(&self) -> f64 {
        (2..=self.n_max).map(|n| n as f64 * self.marginal(n)).sum()
    }

    pub fn sum(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        (2..=self.n_max)
            .flat_map(|n| (0..n).map(move |m| (n, m)))
            .zip(self.probs.iter().copied())
    }

    /// Dumps the grid as CSV with columns `n,m,probability`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "n,m,probability")?;
        for ((n, m), p) in self.iter() {
            writeln!(w, "{n},{m},{:.16e}", p)?;
        }
        Ok(())
    }
}

/// Per-state and marginal deviations between a solved grid and the closed
/// forms.
#[derive(Debug, Clone, Copy)]
pub struct DiscrepancyReport {
    /// Largest per-state deviation over interior states (`n < n_max`).
    pub max_abs_interior: f64,
    /// Largest per-state deviation over all states, boundary row included.
    pub max_abs_all: f64,
    /// Mean absolute per-state deviation over all states.
    pub mean_abs: f64,
    /// Largest deviation between the grid's AoI marginal and the closed-form
    /// p.m.f. over `n < n_max`.
    pub marginal_max_abs: f64,
    /// Clamped mass observed in the boundary row.
    pub boundary_mass: f64,
    /// Closed-form tail mass `Pr{AoI >= n_max}` the boundary should carry.
    pub analytic_tail: f64,
}

impl DiscrepancyReport {
    /// Whether the grid matches the closed forms to `tol` once boundary
    /// inflation is accounted against the analytic tail.
    pub fn within(&self, tol: f64) -> bool {
        self.max_abs_interior <= tol
            && (self.boundary_mass - self.analytic_tail).abs() <= tol + self.analytic_tail
    }
}

/// Compares a solved grid state-by-state against the closed-form stationary
/// probabilities, and the grid marginal against the closed-form p.m.f.
pub fn compare_to_analytic(grid: &StationaryGrid, params: &DerivedParams) -> DiscrepancyReport {
    let n_max = grid.n_max();
    let mut max_interior = 0.0f64;
    let mut max_all = 0.0f64;
    let mut sum_abs = 0.0f64;
    let mut count = 0usize;
    for n in 2..=n_max {
        for m in 0..n {
            let expected = if m == 0 {
                analytic::stationary_n0(params, n)
            } else {
                analytic::stationary_nm(params, n, m)
            };
            let dev = (grid.prob(n, m) - expected).abs();
            sum_abs += dev;
            count += 1;
            max_all = max_all.max(dev);
            if n < n_max {
                max_interior = max_interior.max(dev);
            }
        }
    }
    let mut marginal_max = 0.0f64;
    for n in 2..n_max {
        marginal_max = marginal_max.max((grid.marginal(n) - analytic::aoi_pmf(params, n)).abs());
    }
    DiscrepancyReport {
        max_abs_interior: max_interior,
        max_abs_all: max_all,
        mean_abs: sum_abs / count as f64,
        marginal_max_abs: marginal_max,
        boundary_mass: grid.boundary_mass(),
        analytic_tail: analytic::aoi_tail(params, n_max),
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

    #[test]
    fn rejects_tiny_truncation() {
        let d = two_source_params();
        assert!(matches!(
            TruncatedChain::build(&d, 2),
            Err(ChainError::TruncationTooSmall(2))
        ));
    }

    #[test]
    fn idle_states_have_two_outgoing_edges() {
        let chain = TruncatedChain::build(&two_source_params(), 30).unwrap();
        let edges = chain.outgoing(2, 0);
        assert_eq!(edges.len(), 2);
        let d = two_source_params();
        assert_eq!(edges[0], ((3, 1), d.p_win));
        assert_eq!(edges[1], ((3, 0), 1.0 - d.p_win));
    }

    #[test]
    fn serving_states_have_five_edges_summing_to_one() {
        let d = two_source_params();
        let chain = TruncatedChain::build(&d, 30).unwrap();
        let edges = chain.outgoing(3, 2);
        assert_eq!(edges.len(), 5);
        let total: f64 = edges.iter().map(|(_, p)| p).sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        // Deliveries reset the age to m + 1 = 3.
        assert_eq!(edges[0].0, (3, 1));
        assert_eq!(edges[1].0, (3, 0));
        // Failures move the age forward.
        assert_eq!(edges[2].0, (4, 1));
        assert_eq!(edges[3].0, (4, 0));
        assert_eq!(edges[4].0, (4, 3));
    }

    #[test]
    fn single_source_has_no_foreign_preemption_edges() {
        let d = SystemConfig::new([(0.4, 0.5)]).unwrap().derive_params(0);
        assert_eq!(d.p_other, 0.0);
        let chain = TruncatedChain::build(&d, 20).unwrap();
        for (n, m) in chain.states() {
            if m >= 1 {
                // The (fwd, 0) edge would carry (1-gamma)*p_other = 0.
                assert!(chain
                    .outgoing(n, m)
                    .iter()
                    .all(|((_, tm), p)| !(*tm == 0 && *p == 0.0)));
                assert_eq!(chain.outgoing(n, m).len(), 4);
            }
        }
    }

    #[test]
    fn all_rows_are_stochastic() {
        for params in [
            two_source_params(),
            SystemConfig::new([(0.5, 0.5)]).unwrap().derive_params(0),
            SystemConfig::new([(0.3, 1.0)]).unwrap().derive_params(0),
            SystemConfig::new([(1.0, 1.0)]).unwrap().derive_params(0),
        ] {
            let chain = TruncatedChain::build(&params, 40).unwrap();
            for (n, m) in chain.states() {
                let total: f64 = chain.outgoing(n, m).iter().map(|(_, p)| p).sum();
                assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
                for (t, p) in chain.outgoing(n, m) {
                    assert!((0.0..=1.0).contains(&p));
                    assert!((2..=chain.n_max()).contains(&t.0) && t.1 < t.0);
                }
            }
        }
    }

    #[test]
    fn chain_is_irreducible_for_interior_parameters() {
        let d = two_source_params();
        let chain = TruncatedChain::build(&d, 15).unwrap();
        let count = chain.state_count();

        // Forward reachability from (2, 0).
        let mut fwd = vec![false; count];
        let mut stack = vec![(2usize, 0usize)];
        fwd[chain.state_index(2, 0)] = true;
        while let Some((n, m)) = stack.pop() {
            chain.for_each_outgoing(n, m, |t, _| {
                let i = chain.state_index(t.0, t.1);
                if !fwd[i] {
                    fwd[i] = true;
                    stack.push(t);
                }
            });
        }
        assert!(fwd.iter().all(|&r| r), "all states reachable from (2, 0)");

        // Backward: every state reaches (2, 0). Build reverse adjacency.
        let mut rev: Vec<Vec<usize>> = vec![Vec::new(); count];
        for (n, m) in chain.states() {
            let from = chain.state_index(n, m);
            chain.for_each_outgoing(n, m, |t, _| {
                rev[chain.state_index(t.0, t.1)].push(from);
            });
        }
        let mut back = vec![false; count];
        let mut stack = vec![chain.state_index(2, 0)];
        back[chain.state_index(2, 0)] = true;
        while let Some(i) = stack.pop() {
            for &s in &rev[i] {
                if !back[s] {
                    back[s] = true;
                    stack.push(s);
                }
            }
        }
        assert!(back.iter().all(|&r| r), "all states reach (2, 0)");
    }

    #[test]
    fn structured_sweep_matches_reference_operator() {
        for params in [
            two_source_params(),
            SystemConfig::new([(0.5, 0.5)]).unwrap().derive_params(0),
            SystemConfig::new([(0.2, 0.8), (0.7, 0.3), (0.4, 0.6)])
                .unwrap()
                .derive_params(1),
            SystemConfig::new([(0.3, 1.0)]).unwrap().derive_params(0),
        ] {
            let chain = TruncatedChain::build(&params, 25).unwrap();
            let count = chain.state_count();
            // A deterministic, non-uniform test vector.
            let x: Vec<f64> = (0..count)
                .map(|i| 1.0 + 0.5 * ((i * 2654435761) % 97) as f64 / 97.0)
                .collect();
            let mut reference = vec![0.0; count];
            let mut fast = vec![0.0; count];
            let mut cols = vec![0.0; chain.n_max()];
            chain.apply_into(&x, &mut reference);
            chain.apply_structured(&x, &mut fast, &mut cols);
            for (r, f) in reference.iter().zip(fast.iter()) {
                assert_abs_diff_eq!(r, f, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_source_concentrates_on_minimum_age() {
        // q = 1, gamma = 1: a fresh update is delivered every slot, so all
        // stationary mass sits at (2, 1).
        let d = SystemConfig::new([(1.0, 1.0)]).unwrap().derive_params(0);
        let chain = TruncatedChain::build(&d, 10).unwrap();
        let grid = chain.solve(1e-12, 10_000).unwrap();
        assert_abs_diff_eq!(grid.prob(2, 1), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(grid.sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn solve_agrees_with_closed_forms() {
        let d = two_source_params();
        let n_max = analytic::n_for_tail_below(&d, 1e-10);
        let chain = TruncatedChain::build(&d, n_max).unwrap();
        let grid = chain.solve(1e-12, 1_000_000).unwrap();
        assert_abs_diff_eq!(grid.sum(), 1.0, epsilon = 1e-12);
        assert!(grid.residual() <= 1e-12);

        let report = compare_to_analytic(&grid, &d);
        assert!(
            report.max_abs_all <= 1e-8,
            "max deviation {:.3e}",
            report.max_abs_all
        );
        assert!(report.marginal_max_abs <= 1e-8);
        assert!(report.within(1e-8));
        // Marginal at the minimum age equals gamma * p_i.
        assert_abs_diff_eq!(grid.marginal(2), d.gamma * d.p_win, epsilon = 1e-8);
    }

    #[test]
    fn solve_handles_repeated_root_parameters() {
        let d = SystemConfig::new([(0.5, 0.5)]).unwrap().derive_params(0);
        assert!(d.repeated_root);
        let n_max = analytic::n_for_tail_below(&d, 1e-10);
        let chain = TruncatedChain::build(&d, n_max).unwrap();
        let grid = chain.solve(1e-12, 1_000_000).unwrap();
        let report = compare_to_analytic(&grid, &d);
        assert!(
            report.max_abs_all <= 1e-8,
            "max deviation {:.3e}",
            report.max_abs_all
        );
    }

    #[test]
    fn boundary_mass_tracks_analytic_tail() {
        let d = two_source_params();
        let chain = TruncatedChain::build(&d, 40).unwrap();
        let grid = chain.solve(1e-13, 1_000_000).unwrap();
        let tail = analytic::aoi_tail(&d, 40);
        assert!(
            (grid.boundary_mass() - tail).abs() <= 1e-10 + tail,
            "boundary {:.3e} vs tail {:.3e}",
            grid.boundary_mass(),
            tail
        );
    }

    #[test]
    fn non_convergence_is_reported() {
        let d = two_source_params();
        let chain = TruncatedChain::build(&d, 60).unwrap();
        let err = chain.solve(1e-13, 3).unwrap_err();
        assert!(matches!(err, SolveError::NoConvergence { iterations: 3, .. }));
    }

    #[test]
    fn clamped_transitions_are_confined_to_boundary_row() {
        let d = two_source_params();
        let chain = TruncatedChain::build(&d, 12).unwrap();
        let clamped = chain.clamped_transitions();
        assert!(!clamped.is_empty());
        for c in &clamped {
            assert_eq!(c.from.0, 12);
            assert_eq!(c.raw_target.0, 13);
            assert_eq!(c.target.0, 12);
        }
        // (n_max, 0) clamps both of its forward edges.
        assert!(clamped.iter().any(|c| c.from == (12, 0) && c.target == (12, 1)));
        assert!(clamped.iter().any(|c| c.from == (12, 0) && c.target == (12, 0)));
        // The corner retains its update into itself.
        assert!(clamped.iter().any(|c| c.from == (12, 11) && c.target == (12, 11)));
    }

    #[test]
    fn grid_csv_has_header_and_all_states() {
        let d = two_source_params();
        let chain = TruncatedChain::build(&d, 6).unwrap();
        let grid = chain.solve(1e-12, 100_000).unwrap();
        let mut buf = Vec::new();
        grid.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "n,m,probability");
        assert_eq!(lines.count(), chain.state_count());
    }
}
