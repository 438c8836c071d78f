//! Train on a few synthetic scenes, save a checkpoint and load it back.
//!
//! cargo run --release --example train_model -- [epochs]

use std::collections::BTreeMap;

use trackgroup::config::RunConfig;
use trackgroup::model::{GroupModel, SceneFeatures};
use trackgroup::synth::{split_samples, synth_split};
use trackgroup::train::train;
use trackgroup_nd::Checkpoint;

fn main() -> trackgroup::error::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let mut cfg = RunConfig::default();
    cfg.train.epochs = epochs;
    let synth = &cfg.data.synth;

    let features = |split, name, count| -> trackgroup::error::Result<Vec<SceneFeatures>> {
        split_samples(&synth_split(synth, cfg.seed, split, name, count)?, synth)?
            .iter()
            .map(|s| SceneFeatures::new(s, &cfg.model.encoder))
            .collect()
    };
    let train_set = features(0, "train", 20)?;
    let val_set = features(1, "val", 5)?;
    println!("{} training and {} validation key frames", train_set.len(), val_set.len());

    let mut model = GroupModel::new(cfg.model, cfg.seed)?;
    println!("{} parameters", model.num_parameters());
    let outcome = train(&mut model, &train_set, &val_set, &cfg.train, &cfg.loss, &cfg.inference, cfg.seed, |log| {
        println!("{}", log.line())
    })?;
    println!("kept epoch {} (val loss {:.5})", outcome.best_epoch, outcome.best_val_loss);

    let path = std::env::temp_dir().join("trackgroup-example.ckpt.json");
    let meta = BTreeMap::from([("config".to_string(), cfg.to_toml())]);
    model.to_checkpoint(cfg.seed, meta).save(&path)?;
    let restored = GroupModel::from_checkpoint(cfg.model, &Checkpoint::load(&path)?)?;
    let same = restored.predict_features(&val_set[0])?.adjacency == model.predict_features(&val_set[0])?.adjacency;
    println!("checkpoint {} restores identical outputs: {same}", path.display());
    Ok(())
}
