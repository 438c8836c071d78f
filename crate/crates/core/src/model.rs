//! The full network: LSTM encoder, graph transformer and heads, with its
//! parameter store.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use trackgroup_nd::{Bindings, Checkpoint, ParameterStore, Tape, Tensor, Var};

use crate::clustering::{predict_groups, CountPolicy, Partition, SpectralConfig};
use crate::encoder::{self, sample_window, EncoderConfig, EncoderInput};
use crate::error::{Error, Result};
use crate::gtransformer::{self, GraphTransformerConfig};
use crate::heads::{self, GroupPrediction, PairFeature};
use crate::losses::{total_loss, LossConfig, LossParts};
use crate::nn::{matrix_from_tensor, pair_column, Init};
use crate::tracks::{distance_matrix, SceneSample, TrackId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub transformer: GraphTransformerConfig,
    /// Feed the adjacency head the normalised node-feature distance; when
    /// off it sees the squared feature difference instead.
    pub use_euclidean: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            transformer: GraphTransformerConfig::default(),
            use_euclidean: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.transformer.validate()?;
        if self.encoder.hidden_dim != self.transformer.model_dim {
            return Err(Error::Config(format!(
                "encoder width {} differs from transformer width {}",
                self.encoder.hidden_dim, self.transformer.model_dim
            )));
        }
        Ok(())
    }

    pub fn pair_feature(&self) -> PairFeature {
        if self.use_euclidean {
            PairFeature::Euclidean
        } else {
            PairFeature::SquaredDiff
        }
    }
}

/// Network inputs derived from a scene; independent of the parameters, so
/// training builds them once.
#[derive(Debug, Clone)]
pub struct SceneFeatures {
    pub scene_id: String,
    pub ids: Vec<TrackId>,
    pub encoder: EncoderInput,
    /// Track distances, `n x n`.
    pub distance: DMatrix<f64>,
    pub groups: Partition,
}

impl SceneFeatures {
    /// With `det_only` the distance only looks at the key frame.
    pub fn new(scene: &SceneSample, cfg: &EncoderConfig) -> Result<Self> {
        let windows: Vec<_> = scene.tracks.iter().map(|t| sample_window(t, scene.keyframe, cfg)).collect();
        let encoder = EncoderInput::new(&windows, (scene.image_width, scene.image_height), cfg.hidden_dim)?;
        let distance = if cfg.det_only {
            let at_key: Vec<_> = scene
                .tracks
                .iter()
                .map(|t| t.restrict(scene.keyframe..=scene.keyframe).expect("validated at key frame"))
                .collect();
            distance_matrix(&at_key)?
        } else {
            distance_matrix(&scene.tracks)?
        };
        Ok(Self {
            scene_id: scene.scene_id.clone(),
            ids: scene.ids(),
            encoder,
            distance,
            groups: scene.groups.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// Encoder output `H`, `n x d`.
    pub encoded: Var,
    /// Transformer output `H_N`, `n x d`.
    pub nodes: Var,
    /// Updated edge features, `n*n x d`.
    pub edges: Var,
    /// `Y'`, `n x n`.
    pub adjacency: Var,
    /// Predicted group count, `1 x 1`.
    pub cardinality: Var,
}

#[derive(Debug, Clone)]
pub struct GroupModel {
    cfg: ModelConfig,
    params: ParameterStore,
}

impl GroupModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParameterStore::new();
        let mut init = Init::new(&mut params, seed);
        encoder::init_params(&mut init, &cfg.encoder)?;
        gtransformer::init_params(&mut init, &cfg.transformer)?;
        heads::init_params(&mut init, cfg.transformer.model_dim, cfg.pair_feature())?;
        Ok(Self { cfg, params })
    }

    /// Rebuild from a checkpoint; names and shapes must match `cfg`.
    pub fn from_checkpoint(cfg: ModelConfig, ckpt: &Checkpoint) -> Result<Self> {
        let template = Self::new(cfg, 0)?;
        let params = ckpt.to_store(&template.params)?;
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn forward(&self, t: &mut Tape, p: &Bindings, x: &SceneFeatures) -> Result<ForwardVars> {
        let n = x.len();
        let encoded = encoder::encode(t, p, &x.encoder, self.cfg.encoder.hidden_dim)?;
        let dist = t.constant(pair_column(&x.distance));
        let out = gtransformer::forward(t, p, &self.cfg.transformer, encoded, dist)?;
        let pairs = heads::pair_features(t, out.nodes, dist, self.cfg.pair_feature())?;
        let adjacency = heads::adjacency_head(t, p, pairs, n)?;
        let cardinality = heads::cardinality_head(t, p, out.nodes, dist)?;
        Ok(ForwardVars {
            encoded,
            nodes: out.nodes,
            edges: out.edges,
            adjacency,
            cardinality,
        })
    }

    /// Forward plus objective on a fresh tape bound to `p`.
    pub fn loss(&self, t: &mut Tape, p: &Bindings, x: &SceneFeatures, cfg: &LossConfig) -> Result<(Var, LossParts)> {
        let out = self.forward(t, p, x)?;
        total_loss(t, out.adjacency, out.cardinality, &x.groups, &x.ids, cfg)
    }

    /// Loss value without gradients.
    pub fn evaluate_loss(&self, x: &SceneFeatures, cfg: &LossConfig) -> Result<LossParts> {
        let mut t = Tape::inference();
        let p = self.params.bind(&mut t);
        Ok(self.loss(&mut t, &p, x, cfg)?.1)
    }

    /// Network outputs without clustering.
    pub fn predict_features(&self, x: &SceneFeatures) -> Result<GroupPrediction> {
        let mut t = Tape::inference();
        let p = self.params.bind(&mut t);
        let out = self.forward(&mut t, &p, x)?;
        Ok(GroupPrediction {
            adjacency: matrix_from_tensor(t.value(out.adjacency)),
            cardinality: t.value(out.cardinality).item(),
            groups: None,
        })
    }

    /// Outputs and recovered groups (in track ids) for one scene.
    pub fn predict(&self, scene: &SceneSample, policy: CountPolicy, spectral: &SpectralConfig) -> Result<GroupPrediction> {
        let x = SceneFeatures::new(scene, &self.cfg.encoder)?;
        self.predict_with(&x, policy, spectral)
    }

    pub fn predict_with(&self, x: &SceneFeatures, policy: CountPolicy, spectral: &SpectralConfig) -> Result<GroupPrediction> {
        let mut pred = self.predict_features(x)?;
        let by_index = predict_groups(&pred, policy, spectral)?;
        pred.groups = Some(by_index.map_ids(&x.ids));
        Ok(pred)
    }

    pub fn to_checkpoint(&self, seed: u64, meta: std::collections::BTreeMap<String, String>) -> Checkpoint {
        Checkpoint::from_store(&self.params, seed, meta)
    }

    /// Every parameter set to zero (for identity checks).
    pub fn zeroed(&self) -> Self {
        let mut out = self.clone();
        let names: Vec<String> = out.params.names().map(str::to_string).collect();
        for name in names {
            let t = out.params.get_mut(&name).expect("present");
            *t = Tensor::new(t.shape().to_vec(), vec![0.0; t.len()]).expect("shape");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_parameter_count() {
        let m = GroupModel::new(ModelConfig::default(), 0).unwrap();
        assert_eq!(m.num_parameters(), 695_996);
        assert!((500_000..=900_000).contains(&m.num_parameters()));
    }

    #[test]
    fn ablations_build() {
        for cfg in [
            ModelConfig { use_euclidean: false, ..Default::default() },
            ModelConfig {
                transformer: GraphTransformerConfig {
                    attention: gtransformer::AttentionKind::Gat,
                    ..Default::default()
                },
                ..Default::default()
            },
        ] {
            assert!(GroupModel::new(cfg, 1).is_ok());
        }
        let bad = ModelConfig {
            encoder: EncoderConfig { hidden_dim: 16, ..Default::default() },
            ..Default::default()
        };
        assert!(matches!(GroupModel::new(bad, 0), Err(Error::Config(_))));
    }
}
