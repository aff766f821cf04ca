//! Bipartite matching of detection queries to ground truth: the Hungarian
//! solver against exhaustive search on random instances.
//!
//! `cargo run --release --example set_matching -- [instances]`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unihcp::objectives::{brute_force_match, det_cost_matrix, hungarian_match, LossWeights};

fn random_box(rng: &mut ChaCha8Rng) -> [f64; 4] {
    [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.05..0.5), rng.random_range(0.05..0.5)]
}

fn main() -> unihcp::Result<()> {
    let n: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(200);
    let w = LossWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0f64;
    for i in 0..n {
        let preds = rng.random_range(1..=7);
        let gts = rng.random_range(0..=preds);
        let probs: Vec<f64> = (0..preds).map(|_| rng.random_range(0.01..0.99)).collect();
        let boxes: Vec<[f64; 4]> = (0..preds).map(|_| random_box(&mut rng)).collect();
        let gt: Vec<[f64; 4]> = (0..gts).map(|_| random_box(&mut rng)).collect();
        let cost = det_cost_matrix(&probs, &boxes, &gt, &w)?;
        let total = |pairs: &[(usize, usize)]| pairs.iter().map(|&(g, p)| cost[g][p]).sum::<f64>();
        let h = hungarian_match(&probs, &boxes, &gt, &w)?;
        let b = brute_force_match(&probs, &boxes, &gt, &w)?;
        let gap = (total(&h.pairs) - total(&b.pairs)).abs();
        worst = worst.max(gap);
        if i < 3 {
            println!("instance {i}: {preds} predictions, {gts} targets, pairs {:?}, cost {:.6}", h.pairs, total(&h.pairs));
        }
    }
    println!("{n} instances, largest cost gap to exhaustive search {worst:.3e}");
    Ok(())
}
