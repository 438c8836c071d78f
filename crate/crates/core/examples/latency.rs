//! Single-threaded inference latency for growing scene sizes.
//!
//! cargo run --release --example latency

use trackgroup::bench::{bench_latency, bench_scene};
use trackgroup::evaluate::InferenceConfig;
use trackgroup::model::{GroupModel, ModelConfig};

fn main() -> trackgroup::error::Result<()> {
    let cfg = ModelConfig::default();
    let model = GroupModel::new(cfg, 0)?;
    for n in [1, 10, 25, 50, 100] {
        let scene = bench_scene(n, cfg.encoder.lookback, 0)?;
        println!("{}", bench_latency(&model, &scene, 20, &InferenceConfig::default())?.line());
    }
    Ok(())
}
