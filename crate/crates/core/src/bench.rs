//! Inference latency measurement. Timing covers feature extraction, the
//! network and clustering; scenes are built in memory beforehand.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::clustering::Partition;
use crate::error::{Error, Result};
use crate::evaluate::InferenceConfig;
use crate::geometry::BoundingBox;
use crate::model::GroupModel;
use crate::tracks::{Frame, SceneSample, Track, TrackId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatencyStats {
    pub n_tracks: usize,
    pub repeats: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub parameters: usize,
}

impl LatencyStats {
    pub fn line(&self) -> String {
        format!(
            "n_tracks={} repeats={} mean_ms={:.3} median_ms={:.3} p95_ms={:.3} parameters={}",
            self.n_tracks, self.repeats, self.mean_ms, self.median_ms, self.p95_ms, self.parameters
        )
    }
}

/// `n` random-walking tracks over `frames` frames in a 1920x1080 image, all
/// visible at the last frame. Group labels are arbitrary singletons.
pub fn bench_scene(n: usize, frames: usize, seed: u64) -> Result<SceneSample> {
    if n == 0 || frames == 0 {
        return Err(Error::Input("benchmark scene needs tracks and frames".into()));
    }
    let (w_img, h_img): (f64, f64) = (1920.0, 1080.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tracks = Vec::with_capacity(n);
    for id in 1..=n as TrackId {
        let w: f64 = rng.random_range(30.0..60.0);
        let h = w * 2.3;
        let (mut x, mut y) = (rng.random_range(0.0..w_img - w), rng.random_range(0.0..h_img - h));
        let mut states = BTreeMap::new();
        for f in 1..=frames as Frame {
            x = (x + rng.random_range(-2.0..2.0)).clamp(0.0, w_img - w);
            y = (y + rng.random_range(-1.0..1.0)).clamp(0.0, h_img - h);
            states.insert(f, BoundingBox::new(x, y, w, h)?);
        }
        tracks.push(Track::new(id, states)?);
    }
    let ids: Vec<TrackId> = (1..=n as TrackId).collect();
    SceneSample::new("bench", (w_img, h_img), frames as Frame, tracks, Partition::singletons(&ids))
}

/// Times `repeats` full predictions on `scene` after one warm-up run.
pub fn bench_latency(model: &GroupModel, scene: &SceneSample, repeats: usize, cfg: &InferenceConfig) -> Result<LatencyStats> {
    if repeats == 0 {
        return Err(Error::Input("repeats must be positive".into()));
    }
    model.predict(scene, cfg.policy, &cfg.spectral)?;
    let mut ms: Vec<f64> = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        let pred = model.predict(scene, cfg.policy, &cfg.spectral)?;
        ms.push(start.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(pred);
    }
    ms.sort_by(f64::total_cmp);
    let quantile = |q: f64| ms[((q * (repeats - 1) as f64).round() as usize).min(repeats - 1)];
    Ok(LatencyStats {
        n_tracks: scene.len(),
        repeats,
        mean_ms: ms.iter().sum::<f64>() / repeats as f64,
        median_ms: quantile(0.5),
        p95_ms: quantile(0.95),
        parameters: model.num_parameters(),
    })
}
