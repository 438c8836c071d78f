//! Dataset-level evaluation of the network and of the distance-threshold
//! baseline.

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::clustering::{connected_components, CountPolicy, Partition, SpectralConfig};
use crate::error::{Error, Result};
use crate::evalmetrics::{group_confidence, EvalConfig, GroupEvaluator, MetricsReport, ScoredGroup};
use crate::model::{GroupModel, SceneFeatures};
use crate::tracks::{distance_matrix, SceneSample, TrackId};

/// Predicted groups (in track ids) with confidences from `affinity`, whose
/// rows follow `ids`.
pub fn scored_groups(groups: &Partition, ids: &[TrackId], affinity: &DMatrix<f64>) -> Vec<ScoredGroup> {
    let index: HashMap<TrackId, usize> = ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();
    groups
        .groups()
        .iter()
        .map(|g| {
            let members: Vec<usize> = g.iter().map(|id| index[id]).collect();
            ScoredGroup::new(g.iter().copied(), group_confidence(&members, affinity))
        })
        .collect()
}

/// Inference settings shared by evaluation entry points.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub policy: CountPolicy,
    pub spectral: SpectralConfig,
    pub eval: EvalConfig,
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        let t = self.eval.iou_thresh;
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::Config(format!("iou_thresh {t} must lie in (0, 1]")));
        }
        if self.spectral.restarts == 0 || self.spectral.max_iter == 0 {
            return Err(Error::Config("k-means needs at least one restart and iteration".into()));
        }
        Ok(())
    }
}

pub fn evaluate_model(model: &GroupModel, scenes: &[SceneFeatures], cfg: &InferenceConfig) -> Result<MetricsReport> {
    let mut ev = GroupEvaluator::new(cfg.eval);
    for x in scenes {
        let pred = model.predict_with(x, cfg.policy, &cfg.spectral)?;
        let groups = pred.groups.as_ref().expect("clustered");
        ev.add_scene(&scored_groups(groups, &x.ids, &pred.adjacency), &x.groups);
    }
    Ok(ev.finish())
}

/// Ground truth scored as its own prediction (confidence 1).
pub fn evaluate_oracle(scenes: &[SceneSample], cfg: &EvalConfig) -> MetricsReport {
    let mut ev = GroupEvaluator::new(*cfg);
    for s in scenes {
        let pred: Vec<ScoredGroup> = s.groups.groups().iter().map(|g| ScoredGroup::new(g.iter().copied(), 1.0)).collect();
        ev.add_scene(&pred, &s.groups);
    }
    ev.finish()
}

/// Non-learned reference: link tracks whose distance is below `tau` and take
/// connected components; confidences use `1 - distance` as affinity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdBaseline {
    pub tau: f64,
}

/// Distance matrix and ground truth of one scene, as the baseline sees it.
#[derive(Debug, Clone)]
pub struct BaselineScene {
    pub ids: Vec<TrackId>,
    pub distance: DMatrix<f64>,
    pub groups: Partition,
}

impl BaselineScene {
    pub fn new(scene: &SceneSample) -> Result<Self> {
        Ok(Self {
            ids: scene.ids(),
            distance: distance_matrix(&scene.tracks)?,
            groups: scene.groups.clone(),
        })
    }
}

impl ThresholdBaseline {
    /// Candidate thresholds tried by [`fit`](Self::fit).
    pub fn grid() -> Vec<f64> {
        (1..100).map(|k| k as f64 / 100.0).collect()
    }

    /// The grid threshold with the best mAP on `train` (lowest on ties).
    pub fn fit(train: &[BaselineScene], cfg: &EvalConfig) -> Result<Self> {
        let mut best = (f64::NEG_INFINITY, 0.5);
        for tau in Self::grid() {
            let m = Self { tau }.evaluate(train, cfg)?.map.unwrap_or(0.0);
            if m > best.0 {
                best = (m, tau);
            }
        }
        Ok(Self { tau: best.1 })
    }

    pub fn partition(&self, scene: &BaselineScene) -> Result<Partition> {
        let d = &scene.distance;
        let n = d.nrows();
        let linked = DMatrix::from_fn(n, n, |i, j| if i == j || d[(i, j)] < self.tau { 1.0 } else { 0.0 });
        Ok(connected_components(&linked)?.map_ids(&scene.ids))
    }

    pub fn evaluate(&self, scenes: &[BaselineScene], cfg: &EvalConfig) -> Result<MetricsReport> {
        let mut ev = GroupEvaluator::new(*cfg);
        for s in scenes {
            let affinity = s.distance.map(|v| 1.0 - v);
            ev.add_scene(&scored_groups(&self.partition(s)?, &s.ids, &affinity), &s.groups);
        }
        Ok(ev.finish())
    }
}
