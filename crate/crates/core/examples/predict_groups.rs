//! Run the network on one scene and turn its outputs into groups under each
//! count policy.

use trackgroup::clustering::{CountPolicy, SpectralConfig};
use trackgroup::model::{GroupModel, ModelConfig};
use trackgroup::synth::{synth_scene, SynthConfig};

fn main() -> trackgroup::error::Result<()> {
    let scene = synth_scene(&SynthConfig::default(), "demo", 42)?;
    println!("{}: {} tracks, ground truth {}", scene.scene_id, scene.len(), scene.groups);

    // Untrained weights: the outputs are not meaningful yet, but the shapes
    // and the clustering path are the same as for a trained model.
    let model = GroupModel::new(ModelConfig::default(), 0)?;
    for policy in [CountPolicy::Fallback, CountPolicy::Cardinality, CountPolicy::Eigengap] {
        let pred = model.predict(&scene, policy, &SpectralConfig::default())?;
        println!(
            "{policy:>11}: cardinality {:.2}, groups {}",
            pred.cardinality,
            pred.groups.expect("predict clusters")
        );
    }
    let pred = model.predict(&scene, CountPolicy::Fallback, &SpectralConfig::default())?;
    println!("adjacency row 0: {:.3}", pred.adjacency.row(0));
    Ok(())
}
