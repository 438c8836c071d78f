//! Prediction heads on top of the graph transformer: normalised pairwise
//! feature distance, the pairwise adjacency classifier, and the group-count
//! regressor.

use nalgebra::DMatrix;
use trackgroup_nd::{Bindings, Tape, Var};

use crate::clustering::Partition;
use crate::error::Result;
use crate::nn::{linear, Init};

pub const NORM_EPS: f64 = 1e-8;
pub const CARDINALITY_WIDTH: usize = 16;

/// Output of the network for one key frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupPrediction {
    /// Soft same-group matrix, symmetric, entries in (0, 1).
    pub adjacency: DMatrix<f64>,
    /// Predicted number of groups (unconstrained real).
    pub cardinality: f64,
    /// Groups recovered at inference, if clustering has run.
    pub groups: Option<Partition>,
}

/// Which pair feature the adjacency head sees besides the track distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairFeature {
    /// Max-normalised Euclidean distance of node features (1 column).
    Euclidean,
    /// Elementwise squared feature difference (`dim` columns).
    SquaredDiff,
}

pub fn init_params(init: &mut Init, dim: usize, pair: PairFeature) -> Result<()> {
    let pair_in = match pair {
        PairFeature::Euclidean => 2,
        PairFeature::SquaredDiff => dim + 1,
    };
    init.linear("heads.adjacency", pair_in, 1)?;
    init.linear("heads.card_nodes", dim, CARDINALITY_WIDTH)?;
    init.linear("heads.card_pairs", 1, CARDINALITY_WIDTH)?;
    init.linear("heads.card_out", 2 * CARDINALITY_WIDTH, 1)?;
    Ok(())
}

/// `n x d -> n*n x 1`: `||h_i - h_j||` divided by `(max + 1e-8)`.
pub fn pairwise_euclidean(t: &mut Tape, h: Var) -> Result<Var> {
    let diff = t.pairwise_diff(h);
    let norms = t.l2_norm_rows(diff);
    let top = t.max(norms);
    let denom = t.add_scalar(top, NORM_EPS);
    let inv = t.recip(denom);
    Ok(t.scale_by(norms, inv)?)
}

/// Pair features for the adjacency classifier, `n*n x c`.
pub fn pair_features(t: &mut Tape, h: Var, dist: Var, kind: PairFeature) -> Result<Var> {
    let first = match kind {
        PairFeature::Euclidean => pairwise_euclidean(t, h)?,
        PairFeature::SquaredDiff => {
            let diff = t.pairwise_diff(h);
            t.square(diff)
        }
    };
    Ok(t.concat_cols(&[first, dist])?)
}

/// Per-pair affine map and sigmoid, reshaped to `n x n` and symmetrised.
pub fn adjacency_head(t: &mut Tape, p: &Bindings, pairs: Var, n: usize) -> Result<Var> {
    let z = linear(t, p, "heads.adjacency", pairs)?;
    let y = t.sigmoid(z);
    let y = t.reshape(y, vec![n, n])?;
    let yt = t.transpose(y);
    let s = t.add(y, yt)?;
    Ok(t.scale(s, 0.5))
}

/// Group count from mean-pooled node and pair embeddings, `1 x 1`.
pub fn cardinality_head(t: &mut Tape, p: &Bindings, h: Var, dist: Var) -> Result<Var> {
    let nodes = linear(t, p, "heads.card_nodes", h)?;
    let nodes = t.relu(nodes);
    let nodes = t.mean_rows(nodes);
    let pairs = linear(t, p, "heads.card_pairs", dist)?;
    let pairs = t.relu(pairs);
    let pairs = t.mean_rows(pairs);
    let pooled = t.concat_cols(&[nodes, pairs])?;
    linear(t, p, "heads.card_out", pooled)
}
