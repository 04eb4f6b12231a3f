//! Measure nearest-entry search throughput as the codebook grows.
//!
//! ```bash
//! cargo run --release --example quantizer_throughput
//! ```

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;
use vqlab::quantizer::{quantize, Metric};

fn main() {
    let dim = 8;
    let tokens = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let features: Vec<f32> = (0..tokens * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();

    println!("{:>10} {:>12} {:>14} {:>12}", "n", "wall_ms", "tokens/s", "Gdist/s");
    for n in [1_000usize, 10_000, 100_000] {
        let codebook: Vec<f32> = (0..n * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        // warm-up pass
        let _ = quantize(&features[..100 * dim], &codebook, dim, Metric::L2).unwrap();
        let t0 = Instant::now();
        let map = quantize(&features, &codebook, dim, Metric::L2).unwrap();
        let dt = t0.elapsed();
        let secs = dt.as_secs_f64();
        println!(
            "{:>10} {:>12.2} {:>14.0} {:>12.2}",
            n,
            secs * 1e3,
            tokens as f64 / secs,
            (tokens * n) as f64 / secs / 1e9,
        );
        assert_eq!(map.len(), tokens);
    }
}
