//! Scratch probe: timing of the triangle battery under power iteration.

use std::time::Instant;

use aoiq_core::analytic;
use aoiq_core::dtmc::{compare_to_analytic, TruncatedChain};
use aoiq_core::model::SystemConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn battery(seed: u64, count: usize) -> Vec<SystemConfig> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let n = rng.random_range(1..=4);
            SystemConfig::new(
                (0..n)
                    .map(|_| {
                        (
                            rng.random_range(0.05..=0.95),
                            rng.random_range(0.05..=0.95),
                        )
                    })
                    .collect::<Vec<_>>(),
            )
            .unwrap()
        })
        .collect()
}

fn main() {
    let seed: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1);
    let configs = battery(seed, 50);
    let start = Instant::now();
    let mut worst_dev = 0.0f64;
    let mut total_iters = 0u64;
    for (ci, cfg) in configs.iter().enumerate() {
        for i in 0..cfg.num_sources() {
            let d = cfg.derive_params(i);
            let n_max = analytic::n_for_tail_below(&d, 1e-10);
            let t0 = Instant::now();
            let chain = TruncatedChain::build(&d, n_max.max(3)).unwrap();
            let grid = chain.solve(1e-12, 1_000_000).unwrap();
            let rep = compare_to_analytic(&grid, &d);
            let dt = t0.elapsed().as_secs_f64();
            total_iters += grid.iterations();
            worst_dev = worst_dev.max(rep.max_abs_all);
            if dt > 0.5 || rep.max_abs_all > 1e-9 {
                println!(
                    "cfg {ci:2} src {i}: gp={:.4} beta={:.5} n_max={n_max:5} it={:6} {:6.2}s dev={:.2e}",
                    d.gamma * d.p_win,
                    d.beta,
                    grid.iterations(),
                    dt,
                    rep.max_abs_all
                );
            }
        }
    }
    println!(
        "seed {seed}: total {:.1}s, iters {total_iters}, worst dev {worst_dev:.2e}",
        start.elapsed().as_secs_f64()
    );
}
