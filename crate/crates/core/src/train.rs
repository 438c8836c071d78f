//! Single-sample Adam training with plateau learning-rate decay and
//! best-validation-loss model selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use trackgroup_nd::{Adam, AdamConfig, ParameterStore, Tape};

use crate::error::{Error, Result};
use crate::evaluate::{evaluate_model, InferenceConfig};
use crate::losses::{LossConfig, LossParts};
use crate::model::{GroupModel, SceneFeatures};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Learning-rate multiplier applied when validation loss plateaus.
    pub plateau_factor: f64,
    /// Epochs without improvement tolerated before decaying.
    pub plateau_patience: usize,
    /// Compute validation mAP every epoch (otherwise only for the best model).
    pub eval_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            plateau_factor: 0.1,
            plateau_patience: 5,
            eval_every_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("Adam betas must lie in [0, 1) and eps be positive".into()));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return Err(Error::Config(format!("plateau_factor {} must lie in (0, 1]", self.plateau_factor)));
        }
        Ok(())
    }
}

/// Relative improvement a validation loss needs to count as progress.
const PLATEAU_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training loss parts over the epoch.
    pub train: LossParts,
    pub val_loss: f64,
    pub val_map: Option<f64>,
}

impl EpochLog {
    pub fn line(&self) -> String {
        format!(
            "epoch={} lr={:e} bce={:.6} eigen={:.6} cardinality={:.6} loss={:.6} val_loss={:.6} val_mAP={}",
            self.epoch,
            self.lr,
            self.train.bce,
            self.train.eigen,
            self.train.cardinality,
            self.train.total,
            self.val_loss,
            self.val_map.map_or("undefined".to_string(), |m| format!("{m:.4}"))
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Validation mAP of the selected parameters.
    pub best_val_map: Option<f64>,
    pub logs: Vec<EpochLog>,
}

/// Mean loss parts over `scenes`.
pub fn mean_loss(model: &GroupModel, scenes: &[SceneFeatures], cfg: &LossConfig) -> Result<LossParts> {
    let mut acc = LossParts::default();
    for x in scenes {
        let parts = model.evaluate_loss(x, cfg)?;
        if !parts.is_finite() {
            return Err(Error::NonFinite {
                what: "validation loss".into(),
                scene: x.scene_id.clone(),
            });
        }
        acc.add_assign_scaled(&parts, 1.0 / scenes.len() as f64);
    }
    Ok(acc)
}

/// One Adam step on one scene; returns the loss parts before the step.
pub fn train_step(model: &mut GroupModel, adam: &mut Adam, x: &SceneFeatures, cfg: &LossConfig) -> Result<LossParts> {
    let parts = {
        let mut t = Tape::new();
        let p = model.params().bind(&mut t);
        let (loss, parts) = model.loss(&mut t, &p, x, cfg)?;
        if !parts.is_finite() {
            return Err(Error::NonFinite {
                what: format!("training loss {parts:?}"),
                scene: x.scene_id.clone(),
            });
        }
        t.backward(loss)?;
        model.params_mut().collect_grads(&t, &p);
        parts
    };
    adam.step(model.params_mut())?;
    Ok(parts)
}

/// Train in place. Scenes are visited in a fresh seeded order every epoch;
/// on return the model holds the parameters with the lowest validation loss
/// (training loss when `val` is empty).
pub fn train(
    model: &mut GroupModel,
    train: &[SceneFeatures],
    val: &[SceneFeatures],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    infer: &InferenceConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Input("no training scenes".into()));
    }
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, ParameterStore, Option<f64>)> = None;
    let mut plateau_best = f64::INFINITY;
    let mut bad_epochs = 0;
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_parts = LossParts::default();
        for &k in &order {
            let parts = train_step(model, &mut adam, &train[k], loss_cfg)?;
            epoch_parts.add_assign_scaled(&parts, 1.0 / train.len() as f64);
        }
        let val_loss = if val.is_empty() {
            epoch_parts.total
        } else {
            mean_loss(model, val, loss_cfg)?.total
        };
        let val_map = if cfg.eval_every_epoch && !val.is_empty() {
            evaluate_model(model, val, infer)?.map
        } else {
            None
        };
        let log = EpochLog {
            epoch,
            lr: adam.lr(),
            train: epoch_parts,
            val_loss,
            val_map,
        };
        on_epoch(&log);
        logs.push(log);

        if best.as_ref().is_none_or(|b| val_loss < b.0) {
            best = Some((val_loss, epoch, model.params().clone(), val_map));
        }
        if val_loss < plateau_best * (1.0 - PLATEAU_THRESHOLD) {
            plateau_best = val_loss;
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs > cfg.plateau_patience {
                adam.set_lr(adam.lr() * cfg.plateau_factor);
                bad_epochs = 0;
            }
        }
    }

    let (best_val_loss, best_epoch, params, mut best_val_map) = match best {
        Some(b) => b,
        None => {
            let loss = if val.is_empty() { f64::NAN } else { mean_loss(model, val, loss_cfg)?.total };
            (loss, 0, model.params().clone(), None)
        }
    };
    *model.params_mut() = params;
    if best_val_map.is_none() && !val.is_empty() {
        best_val_map = evaluate_model(model, val, infer)?.map;
    }
    Ok(TrainOutcome {
        best_epoch,
        best_val_loss,
        best_val_map,
        logs,
    })
}
