//! Write a small synthetic dataset (scene files plus manifest) and read one
//! scene back.
//!
//! cargo run --example synth_dataset -- /tmp/trackgroup-data

use std::path::PathBuf;

use trackgroup::config::RunConfig;
use trackgroup::dataio::{keyframe_samples, DatasetManifest, Split};
use trackgroup::pipeline::synth_dataset;

fn main() -> trackgroup::error::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("trackgroup-synth-example"));
    let mut cfg = RunConfig::default();
    cfg.data.train_scenes = 10;
    cfg.data.val_scenes = 3;
    cfg.data.test_scenes = 3;

    let (manifest_path, counts) = synth_dataset(&cfg, &out)?;
    for c in &counts {
        println!("{}: {} scenes, {} key frames", c.split.name(), c.scenes, c.keyframes);
    }
    println!("manifest: {}", manifest_path.display());

    let manifest = DatasetManifest::load(&manifest_path)?;
    let samples = keyframe_samples(&manifest, Split::Test)?;
    let s = &samples[0];
    println!(
        "{}: {} tracks in {} groups at key frame {}: {}",
        s.scene_id,
        s.len(),
        s.num_groups(),
        s.keyframe,
        s.groups
    );
    Ok(())
}
