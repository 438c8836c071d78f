//! File-level workflows behind the command-line tool: write a synthetic
//! dataset, train, predict, evaluate and benchmark. Every artifact carries
//! the resolved configuration or its hash.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use trackgroup_nd::Checkpoint;

use crate::bench::{bench_latency, bench_scene, LatencyStats};
use crate::clustering::Partition;
use crate::config::RunConfig;
use crate::dataio::{keyframe_samples, DatasetManifest, SceneFile, Split};
use crate::error::{Error, Result};
use crate::evalmetrics::MetricsReport;
use crate::evaluate::{evaluate_model, evaluate_oracle};
use crate::heads::GroupPrediction;
use crate::model::{GroupModel, SceneFeatures};
use crate::synth::synth_split;
use crate::tracks::{Frame, SceneSample, TrackId};
use crate::train::{train, EpochLog, TrainOutcome};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "model.ckpt.json";
pub const TRAIN_LOG_FILE: &str = "train.log";
pub const INFERENCE_FORMAT: &str = "# trackgroup-inference/1";

/// Nominal frame rate recorded in synthetic manifests.
const SYNTH_FRAME_RATE: f64 = 15.0;

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Resolved configuration with a leading hash comment.
pub fn config_echo(cfg: &RunConfig) -> String {
    format!("# config_hash = {}\n{}", cfg.hash(), cfg.to_toml())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitCount {
    pub split: Split,
    pub scenes: usize,
    pub keyframes: usize,
}

/// Writes `train/`, `val/` and `test/` scene files, the manifest and the
/// resolved config under `out`. Output bytes depend only on the config.
pub fn synth_dataset(cfg: &RunConfig, out: &Path) -> Result<(PathBuf, Vec<SplitCount>)> {
    let synth = &cfg.data.synth;
    synth.validate()?;
    let mut manifest = DatasetManifest::new(
        (synth.image_width, synth.image_height),
        SYNTH_FRAME_RATE,
        synth.keyframe_stride,
        synth.lookback,
    );
    let mut counts = Vec::new();
    let sizes = [cfg.data.train_scenes, cfg.data.val_scenes, cfg.data.test_scenes];
    for (k, (split, count)) in Split::ALL.into_iter().zip(sizes).enumerate() {
        let dir = out.join(split.name());
        create_dir(&dir)?;
        let files = synth_split(synth, cfg.seed, k as u64, split.name(), count)?;
        let mut keyframes = 0;
        for file in &files {
            let rel = PathBuf::from(split.name()).join(format!("{}.scene", file.scene_id));
            file.save(out.join(&rel))?;
            manifest.files_mut(split).push(rel);
            keyframes += file.keyframes(synth.keyframe_stride).len();
        }
        counts.push(SplitCount {
            split,
            scenes: files.len(),
            keyframes,
        });
    }
    let manifest_path = out.join(MANIFEST_FILE);
    manifest.save(&manifest_path)?;
    write(&out.join(CONFIG_FILE), &config_echo(cfg))?;
    Ok((manifest_path, counts))
}

/// Network inputs for every key frame of `split`.
pub fn load_features(manifest: &DatasetManifest, split: Split, model: &GroupModel) -> Result<Vec<SceneFeatures>> {
    let enc = &model.config().encoder;
    if manifest.lookback < enc.lookback {
        log::warn!(
            "manifest lookback {} is shorter than the encoder lookback {}",
            manifest.lookback,
            enc.lookback
        );
    }
    keyframe_samples(manifest, split)?
        .iter()
        .map(|s| SceneFeatures::new(s, enc))
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub outcome: TrainOutcome,
}

/// Trains on the manifest's train split, selecting on its val split, and
/// writes the checkpoint, log and config under `out`.
pub fn train_command(
    cfg: &RunConfig,
    manifest_path: &Path,
    out: &Path,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainArtifacts> {
    cfg.validate()?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let mut model = GroupModel::new(cfg.model, cfg.seed)?;
    let train_set = load_features(&manifest, Split::Train, &model)?;
    let val_set = load_features(&manifest, Split::Val, &model)?;
    create_dir(out)?;
    let mut log = format!(
        "# config_hash = {}\n# train_samples = {} val_samples = {} parameters = {}\n",
        cfg.hash(),
        train_set.len(),
        val_set.len(),
        model.num_parameters()
    );
    let outcome = train(
        &mut model,
        &train_set,
        &val_set,
        &cfg.train,
        &cfg.loss,
        &cfg.inference,
        cfg.seed,
        |l| {
            log.push_str(&l.line());
            log.push('\n');
            on_epoch(l);
        },
    )?;
    let best_map = outcome.best_val_map.map_or("undefined".to_string(), |m| m.to_string());
    let _ = writeln!(
        log,
        "best_epoch={} val_loss={} val_mAP={}",
        outcome.best_epoch, outcome.best_val_loss, best_map
    );
    let meta = BTreeMap::from([
        ("config".to_string(), cfg.to_toml()),
        ("config_hash".to_string(), cfg.hash()),
        ("best_epoch".to_string(), outcome.best_epoch.to_string()),
        ("val_map".to_string(), best_map),
    ]);
    let checkpoint = out.join(CHECKPOINT_FILE);
    model.to_checkpoint(cfg.seed, meta).save(&checkpoint)?;
    let log_path = out.join(TRAIN_LOG_FILE);
    write(&log_path, &log)?;
    write(&out.join(CONFIG_FILE), &config_echo(cfg))?;
    Ok(TrainArtifacts {
        checkpoint,
        log: log_path,
        outcome,
    })
}

/// The model stored in a checkpoint, built with the model section of the
/// configuration it was trained with; `cfg` is returned with that section.
pub fn load_model(path: &Path, cfg: &RunConfig) -> Result<(GroupModel, RunConfig)> {
    let ckpt = Checkpoint::load(path)?;
    let mut effective = cfg.clone();
    if let Some(text) = ckpt.meta.get("config") {
        let trained = RunConfig::from_toml(text)?;
        effective.model = trained.model;
    }
    let model = GroupModel::from_checkpoint(effective.model, &ckpt)?;
    Ok((model, effective))
}

#[derive(Debug, Clone)]
pub struct InferRecord {
    pub sample_id: String,
    /// Track ids in adjacency row order.
    pub ids: Vec<TrackId>,
    pub prediction: GroupPrediction,
}

/// One prediction per key frame of `scene`: frames with a `groups` record,
/// or the last frame when the file has none.
pub fn infer_command(model: &GroupModel, cfg: &RunConfig, scene: &SceneFile) -> Result<Vec<InferRecord>> {
    let lookback = model.config().encoder.lookback;
    let frames: Vec<Frame> = if scene.groups.is_empty() {
        vec![scene.tracks.iter().map(|t| t.last_frame()).max().ok_or_else(|| Error::Input("scene has no tracks".into()))?]
    } else {
        scene.groups.keys().copied().collect()
    };
    frames
        .into_iter()
        .map(|kf| {
            let sample = match scene.groups.contains_key(&kf) {
                true => scene.sample_at(kf, Some(lookback))?,
                false => unlabelled_sample(scene, kf, lookback)?,
            };
            let prediction = model.predict(&sample, cfg.inference.policy, &cfg.inference.spectral)?;
            Ok(InferRecord {
                ids: sample.ids(),
                sample_id: sample.scene_id,
                prediction,
            })
        })
        .collect()
}

fn unlabelled_sample(scene: &SceneFile, kf: Frame, lookback: usize) -> Result<SceneSample> {
    let start = kf - lookback as Frame + 1;
    let tracks: Vec<_> = scene
        .tracks
        .iter()
        .filter(|t| t.get(kf).is_some())
        .filter_map(|t| t.restrict(start..=kf))
        .collect();
    let ids: Vec<_> = tracks.iter().map(|t| t.id()).collect();
    SceneSample::new(
        format!("{}@{kf}", scene.scene_id),
        (scene.image_width, scene.image_height),
        kf,
        tracks,
        Partition::singletons(&ids),
    )
}

/// Text form of predictions: a `key = value` block per sample with one
/// `adjacency` line per row.
pub fn format_predictions(records: &[InferRecord], config_hash: &str) -> String {
    let mut out = format!("{INFERENCE_FORMAT}\nconfig_hash = {config_hash}\n");
    for r in records {
        let p = &r.prediction;
        let _ = writeln!(out, "\nsample = {}", r.sample_id);
        let ids: Vec<String> = r.ids.iter().map(TrackId::to_string).collect();
        let _ = writeln!(out, "tracks = {}", ids.join(","));
        let _ = writeln!(out, "cardinality = {}", p.cardinality);
        if let Some(g) = &p.groups {
            let _ = writeln!(out, "groups = {g}");
        }
        for r in 0..p.adjacency.nrows() {
            let row: Vec<String> = p.adjacency.row(r).iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(out, "adjacency = {}", row.join(" "));
        }
    }
    out
}

/// Metrics on one split; `model = None` scores the ground truth itself.
pub fn eval_command(model: Option<&GroupModel>, cfg: &RunConfig, manifest_path: &Path, split: Split) -> Result<MetricsReport> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let mut report = match model {
        Some(m) => evaluate_model(m, &load_features(&manifest, split, m)?, &cfg.inference)?,
        None => evaluate_oracle(&keyframe_samples(&manifest, split)?, &cfg.inference.eval),
    };
    report.config_hash = cfg.hash();
    Ok(report)
}

/// Latency for each scene size in `n_tracks`.
pub fn bench_command(model: &GroupModel, cfg: &RunConfig, n_tracks: &[usize], repeats: usize) -> Result<Vec<LatencyStats>> {
    let frames = model.config().encoder.lookback;
    n_tracks
        .iter()
        .map(|&n| bench_latency(model, &bench_scene(n, frames, cfg.seed)?, repeats, &cfg.inference))
        .collect()
}
