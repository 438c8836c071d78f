//! Graph transformer over the complete track graph. Nodes carry encoder
//! features, edges carry the scalar track distance embedded to the model
//! width. Attention scores get an additive per-head bias projected from the
//! edge features; the pre-softmax scores in turn update the edges.
//!
//! Tensor layout: node features are `n x d`; pair tensors are `n*n x c` with
//! row `i*n + j` for the ordered pair `(i, j)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use trackgroup_nd::{Bindings, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{layer_norm, linear, Init};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    /// Scaled dot-product attention with edge bias and edge update.
    #[default]
    Gtrans,
    /// Additive (GAT-style) attention; edges only bias the scores.
    Gat,
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gtrans => "gtrans",
            Self::Gat => "gat",
        })
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gtrans" => Ok(Self::Gtrans),
            "gat" => Ok(Self::Gat),
            other => Err(Error::Config(format!("unknown attention kind `{other}` (gtrans, gat)"))),
        }
    }
}

pub const GAT_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphTransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    /// Hidden width of each layer's node feed-forward block.
    pub ffn_dim: usize,
    /// Add the encoder features back onto the stack output.
    pub use_residual: bool,
    pub attention: AttentionKind,
}

impl Default for GraphTransformerConfig {
    fn default() -> Self {
        Self {
            layers: 5,
            heads: 8,
            model_dim: 32,
            ffn_dim: 2048,
            use_residual: true,
            attention: AttentionKind::Gtrans,
        }
    }
}

impl GraphTransformerConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("transformer sizes must be positive".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }
}

fn layer_name(l: usize) -> String {
    format!("gt.layer{l}")
}

pub fn init_params(init: &mut Init, cfg: &GraphTransformerConfig) -> Result<()> {
    let (d, h) = (cfg.model_dim, cfg.heads);
    init.linear("gt.edge_embed", 1, d)?;
    for l in 0..cfg.layers {
        let p = layer_name(l);
        match cfg.attention {
            AttentionKind::Gtrans => {
                for m in ["q", "k", "v"] {
                    init.linear(&format!("{p}.{m}"), d, d)?;
                }
                init.linear(&format!("{p}.edge_out"), h, d)?;
                init.layer_norm(&format!("{p}.edge_norm"), d)?;
            }
            AttentionKind::Gat => {
                init.glorot(&format!("{p}.w"), d, d)?;
                init.glorot(&format!("{p}.a_src"), 1, d)?;
                init.glorot(&format!("{p}.a_dst"), 1, d)?;
            }
        }
        init.linear(&format!("{p}.edge_bias"), d, h)?;
        init.linear(&format!("{p}.o"), d, d)?;
        init.layer_norm(&format!("{p}.norm1"), d)?;
        init.linear(&format!("{p}.ffn1"), d, cfg.ffn_dim)?;
        init.linear(&format!("{p}.ffn2"), cfg.ffn_dim, d)?;
        init.layer_norm(&format!("{p}.norm2"), d)?;
    }
    Ok(())
}

/// Per-layer outputs kept for inspection.
#[derive(Debug, Clone, Copy)]
pub struct LayerOutput {
    pub nodes: Var,
    pub edges: Var,
    /// Attention weights, `n*n x heads`.
    pub attention: Var,
}

/// Attention output projection, then residual + norm, FFN, residual + norm.
fn node_update(t: &mut Tape, p: &Bindings, name: &str, nodes: Var, agg: Var) -> Result<Var> {
    let o = linear(t, p, &format!("{name}.o"), agg)?;
    let r = t.add(nodes, o)?;
    let h1 = layer_norm(t, p, &format!("{name}.norm1"), r)?;
    let f = linear(t, p, &format!("{name}.ffn1"), h1)?;
    let f = t.relu(f);
    let f = linear(t, p, &format!("{name}.ffn2"), f)?;
    let r = t.add(h1, f)?;
    layer_norm(t, p, &format!("{name}.norm2"), r)
}

/// One graph-transformer layer on `n` nodes.
pub fn gt_layer(
    t: &mut Tape,
    p: &Bindings,
    l: usize,
    cfg: &GraphTransformerConfig,
    nodes: Var,
    edges: Var,
    n: usize,
) -> Result<LayerOutput> {
    let name = layer_name(l);
    let q = linear(t, p, &format!("{name}.q"), nodes)?;
    let k = linear(t, p, &format!("{name}.k"), nodes)?;
    let v = linear(t, p, &format!("{name}.v"), nodes)?;
    let dot = t.head_scores(q, k, cfg.heads)?;
    let dot = t.scale(dot, 1.0 / (cfg.head_dim() as f64).sqrt());
    let bias = linear(t, p, &format!("{name}.edge_bias"), edges)?;
    let scores = t.add(dot, bias)?;
    let attention = t.softmax_neighbors(scores, n)?;
    let agg = t.head_aggregate(attention, v, cfg.heads)?;
    let nodes = node_update(t, p, &name, nodes, agg)?;

    let e = linear(t, p, &format!("{name}.edge_out"), scores)?;
    let e = t.add(edges, e)?;
    let edges = layer_norm(t, p, &format!("{name}.edge_norm"), e)?;
    Ok(LayerOutput { nodes, edges, attention })
}

/// `d x heads` matrix summing each head's block of columns.
fn head_block_sum(d: usize, heads: usize) -> Tensor {
    let hd = d / heads;
    Tensor::from_fn(d, heads, |c, h| if c / hd == h { 1.0 } else { 0.0 })
}

/// Additive-attention layer: per head,
/// `score_ij = LeakyReLU(a_src . W h_i + a_dst . W h_j + edge bias)`.
/// Edges pass through unchanged.
pub fn gat_layer(
    t: &mut Tape,
    p: &Bindings,
    l: usize,
    cfg: &GraphTransformerConfig,
    nodes: Var,
    edges: Var,
    n: usize,
) -> Result<LayerOutput> {
    let name = layer_name(l);
    let wh = t.matmul(nodes, p[format!("{name}.w").as_str()])?;
    let blocks = t.constant(head_block_sum(cfg.model_dim, cfg.heads));
    let src = t.mul_row(wh, p[format!("{name}.a_src").as_str()])?;
    let src = t.matmul(src, blocks)?;
    let dst = t.mul_row(wh, p[format!("{name}.a_dst").as_str()])?;
    let dst = t.matmul(dst, blocks)?;
    let raw = t.pair_broadcast_add(src, dst)?;
    let bias = linear(t, p, &format!("{name}.edge_bias"), edges)?;
    let scores = t.add(raw, bias)?;
    let scores = t.leaky_relu(scores, GAT_SLOPE);
    let attention = t.softmax_neighbors(scores, n)?;
    let agg = t.head_aggregate(attention, wh, cfg.heads)?;
    let nodes = node_update(t, p, &name, nodes, agg)?;
    Ok(LayerOutput { nodes, edges, attention })
}

#[derive(Debug, Clone)]
pub struct TransformerOutput {
    /// Updated node features `H_N`, `n x d`.
    pub nodes: Var,
    /// Updated edge features `D_u`, `n*n x d`.
    pub edges: Var,
    pub layers: Vec<LayerOutput>,
}

/// Embed the distance column, run the stack, and add the input node
/// features back when `use_residual` is set.
pub fn forward(
    t: &mut Tape,
    p: &Bindings,
    cfg: &GraphTransformerConfig,
    nodes: Var,
    dist: Var,
) -> Result<TransformerOutput> {
    let shape = t.shape(nodes).to_vec();
    if shape.len() != 2 || shape[1] != cfg.model_dim {
        return Err(Error::Input(format!(
            "node features have shape {shape:?}, expected n x {}",
            cfg.model_dim
        )));
    }
    let n = shape[0];
    if t.shape(dist) != [n * n, 1] {
        return Err(Error::Input(format!(
            "distance column has shape {:?}, expected [{}, 1]",
            t.shape(dist),
            n * n
        )));
    }
    let mut edges = linear(t, p, "gt.edge_embed", dist)?;
    let mut h = nodes;
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let out = match cfg.attention {
            AttentionKind::Gtrans => gt_layer(t, p, l, cfg, h, edges, n)?,
            AttentionKind::Gat => gat_layer(t, p, l, cfg, h, edges, n)?,
        };
        h = out.nodes;
        edges = out.edges;
        layers.push(out);
    }
    let nodes = if cfg.use_residual { t.add(nodes, h)? } else { h };
    Ok(TransformerOutput { nodes, edges, layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use trackgroup_nd::ParameterStore;

    fn small(attention: AttentionKind) -> GraphTransformerConfig {
        GraphTransformerConfig {
            layers: 2,
            ffn_dim: 16,
            attention,
            ..Default::default()
        }
    }

    fn params(cfg: &GraphTransformerConfig, seed: u64) -> ParameterStore {
        let mut s = ParameterStore::new();
        init_params(&mut Init::new(&mut s, seed), cfg).unwrap();
        // non-trivial norms and biases so the oracles exercise every term
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for name in s.names().map(str::to_string).collect::<Vec<_>>() {
            if name.ends_with(".b") || name.ends_with(".gain") || name.ends_with(".bias") {
                s.get_mut(&name).unwrap().data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
            }
        }
        s
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn symmetric_distances(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let v = rng.random_range(0.0..1.0);
                d[i * n + j] = v;
                d[j * n + i] = v;
            }
        }
        Tensor::new(vec![n * n, 1], d).unwrap()
    }

    fn run(cfg: &GraphTransformerConfig, s: &ParameterStore, h: &Tensor, d: &Tensor) -> (Tensor, Tensor, Vec<Tensor>) {
        let mut t = Tape::inference();
        let p = s.bind(&mut t);
        let (hv, dv) = (t.constant(h.clone()), t.constant(d.clone()));
        let out = forward(&mut t, &p, cfg, hv, dv).unwrap();
        let attn = out.layers.iter().map(|l| t.value(l.attention).clone()).collect();
        (t.value(out.nodes).clone(), t.value(out.edges).clone(), attn)
    }

    // Plain-loop reference implementation of one layer.
    fn dense(x: &[Vec<f64>], s: &ParameterStore, name: &str) -> Vec<Vec<f64>> {
        let (w, b) = (s.get(&format!("{name}.w")).unwrap(), s.get(&format!("{name}.b")).unwrap());
        x.iter()
            .map(|row| (0..w.cols()).map(|c| row.iter().enumerate().map(|(k, v)| v * w.get(k, c)).sum::<f64>() + b.get(0, c)).collect())
            .collect()
    }

    fn norm(x: &[Vec<f64>], s: &ParameterStore, name: &str) -> Vec<Vec<f64>> {
        let (g, b) = (s.get(&format!("{name}.gain")).unwrap(), s.get(&format!("{name}.bias")).unwrap());
        x.iter()
            .map(|row| {
                let m = row.iter().sum::<f64>() / row.len() as f64;
                let var = row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / row.len() as f64;
                row.iter().enumerate().map(|(c, v)| (v - m) / (var + 1e-5).sqrt() * g.get(0, c) + b.get(0, c)).collect()
            })
            .collect()
    }

    fn add(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect()
    }

    fn softmax_over_j(scores: &[Vec<f64>], n: usize, heads: usize) -> Vec<Vec<f64>> {
        let mut attn = scores.to_vec();
        for i in 0..n {
            for h in 0..heads {
                let top = (0..n).map(|j| scores[i * n + j][h]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..n).map(|j| (scores[i * n + j][h] - top).exp()).sum();
                for j in 0..n {
                    attn[i * n + j][h] = (scores[i * n + j][h] - top).exp() / z;
                }
            }
        }
        attn
    }

    fn oracle_layer(
        cfg: &GraphTransformerConfig,
        s: &ParameterStore,
        name: &str,
        h: &[Vec<f64>],
        e: &[Vec<f64>],
    ) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let (n, heads, hd) = (h.len(), cfg.heads, cfg.head_dim());
        let bias = dense(e, s, &format!("{name}.edge_bias"));
        let (scores, values) = match cfg.attention {
            AttentionKind::Gtrans => {
                let (q, k, v) = (dense(h, s, &format!("{name}.q")), dense(h, s, &format!("{name}.k")), dense(h, s, &format!("{name}.v")));
                let mut scores = vec![vec![0.0; heads]; n * n];
                for i in 0..n {
                    for j in 0..n {
                        for hh in 0..heads {
                            let dot: f64 = (hh * hd..(hh + 1) * hd).map(|c| q[i][c] * k[j][c]).sum();
                            scores[i * n + j][hh] = dot / (hd as f64).sqrt() + bias[i * n + j][hh];
                        }
                    }
                }
                (scores, v)
            }
            AttentionKind::Gat => {
                let w = s.get(&format!("{name}.w")).unwrap();
                let (a_src, a_dst) = (s.get(&format!("{name}.a_src")).unwrap(), s.get(&format!("{name}.a_dst")).unwrap());
                let wh: Vec<Vec<f64>> = h
                    .iter()
                    .map(|row| (0..w.cols()).map(|c| row.iter().enumerate().map(|(k, v)| v * w.get(k, c)).sum()).collect())
                    .collect();
                let mut scores = vec![vec![0.0; heads]; n * n];
                for i in 0..n {
                    for j in 0..n {
                        for hh in 0..heads {
                            let cols = hh * hd..(hh + 1) * hd;
                            let raw: f64 = cols.clone().map(|c| a_src.get(0, c) * wh[i][c]).sum::<f64>()
                                + cols.map(|c| a_dst.get(0, c) * wh[j][c]).sum::<f64>()
                                + bias[i * n + j][hh];
                            scores[i * n + j][hh] = if raw > 0.0 { raw } else { GAT_SLOPE * raw };
                        }
                    }
                }
                (scores, wh)
            }
        };
        let attn = softmax_over_j(&scores, n, heads);
        let mut agg = vec![vec![0.0; cfg.model_dim]; n];
        for i in 0..n {
            for j in 0..n {
                for c in 0..cfg.model_dim {
                    agg[i][c] += attn[i * n + j][c / hd] * values[j][c];
                }
            }
        }
        let h1 = norm(&add(h, &dense(&agg, s, &format!("{name}.o"))), s, &format!("{name}.norm1"));
        let f: Vec<Vec<f64>> = dense(&h1, s, &format!("{name}.ffn1")).into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect();
        let h2 = norm(&add(&h1, &dense(&f, s, &format!("{name}.ffn2"))), s, &format!("{name}.norm2"));
        let e2 = match cfg.attention {
            AttentionKind::Gtrans => norm(&add(e, &dense(&scores, s, &format!("{name}.edge_out"))), s, &format!("{name}.edge_norm")),
            AttentionKind::Gat => e.to_vec(),
        };
        (h2, e2)
    }

    fn rows(t: &Tensor) -> Vec<Vec<f64>> {
        (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
    }

    #[test]
    fn matches_double_loop_oracle() {
        for kind in [AttentionKind::Gtrans, AttentionKind::Gat] {
            let cfg = small(kind);
            let s = params(&cfg, 7);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let (h0, d) = (random(4, 32, &mut rng), symmetric_distances(4, &mut rng));
            let (nodes, edges, _) = run(&cfg, &s, &h0, &d);

            let mut e = dense(&rows(&d), &s, "gt.edge_embed");
            let mut h = rows(&h0);
            for l in 0..cfg.layers {
                (h, e) = oracle_layer(&cfg, &s, &layer_name(l), &h, &e);
            }
            let h = add(&rows(&h0), &h);
            for (got, want) in rows(&nodes).iter().flatten().zip(h.iter().flatten()) {
                assert!((got - want).abs() < 1e-12, "{kind}: {got} vs {want}");
            }
            for (got, want) in rows(&edges).iter().flatten().zip(e.iter().flatten()) {
                assert!((got - want).abs() < 1e-12, "{kind}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        for kind in [AttentionKind::Gtrans, AttentionKind::Gat] {
            let cfg = small(kind);
            let s = params(&cfg, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let n = 6;
            let (_, _, attn) = run(&cfg, &s, &random(n, 32, &mut rng), &symmetric_distances(n, &mut rng));
            for a in attn {
                for i in 0..n {
                    for h in 0..cfg.heads {
                        let total: f64 = (0..n).map(|j| a.get(i * n + j, h)).sum();
                        assert!((total - 1.0).abs() < 1e-12);
                    }
                }
            }

            // singleton graph
            let (nodes, _, attn) = run(&cfg, &s, &random(1, 32, &mut rng), &Tensor::zeros(1, 1));
            assert!(attn.iter().all(|a| a.data().iter().all(|&w| w == 1.0)));
            assert!(nodes.data().iter().all(|v| v.is_finite()));

            // identical nodes and edges
            let same = Tensor::from_fn(5, 32, |_, c| c as f64 / 32.0);
            let (_, _, attn) = run(&cfg, &s, &same, &Tensor::full(25, 1, 0.4));
            for a in attn {
                assert!(a.data().iter().all(|&w| (w - 0.2).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn residual_identity_and_ablation() {
        let cfg = small(AttentionKind::Gtrans);
        let mut s = params(&cfg, 5);
        for name in s.names().map(str::to_string).collect::<Vec<_>>() {
            s.get_mut(&name).unwrap().data_mut().fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (h, d) = (random(4, 32, &mut rng), symmetric_distances(4, &mut rng));
        assert_eq!(run(&cfg, &s, &h, &d).0, h);

        let s = params(&cfg, 5);
        let with = run(&cfg, &s, &h, &d).0;
        let without = run(&GraphTransformerConfig { use_residual: false, ..cfg }, &s, &h, &d).0;
        for (a, (b, x)) in with.data().iter().zip(without.data().iter().zip(h.data())) {
            assert!((a - (b + x)).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_is_permutation_equivariant() {
        for kind in [AttentionKind::Gtrans, AttentionKind::Gat] {
            let cfg = small(kind);
            let s = params(&cfg, 11);
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let n = 5;
            let (h, d) = (random(n, 32, &mut rng), symmetric_distances(n, &mut rng));
            let perm = [3usize, 0, 4, 1, 2];
            let hp = Tensor::from_fn(n, 32, |i, c| h.get(perm[i], c));
            let dp = Tensor::from_fn(n * n, 1, |r, _| d.get(perm[r / n] * n + perm[r % n], 0));
            let (a_nodes, a_edges, _) = run(&cfg, &s, &h, &d);
            let (b_nodes, b_edges, _) = run(&cfg, &s, &hp, &dp);
            for i in 0..n {
                for c in 0..32 {
                    assert!((b_nodes.get(i, c) - a_nodes.get(perm[i], c)).abs() < 1e-12);
                }
                for j in 0..n {
                    for c in 0..32 {
                        let want = a_edges.get(perm[i] * n + perm[j], c);
                        assert!((b_edges.get(i * n + j, c) - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn default_parameter_budget() {
        let cfg = GraphTransformerConfig::default();
        let mut s = ParameterStore::new();
        init_params(&mut Init::new(&mut s, 0), &cfg).unwrap();
        assert_eq!(s.num_scalars(), 64 + 5 * (4 * 1056 + 264 + 288 + 64 + 2 * 64 + 32 * 2048 + 2048 + 2048 * 32 + 32));
    }

    #[test]
    fn bad_configs_are_rejected() {
        assert!(GraphTransformerConfig { heads: 5, ..Default::default() }.validate().is_err());
        assert!("transformer".parse::<AttentionKind>().is_err());
        assert_eq!("gat".parse::<AttentionKind>().unwrap(), AttentionKind::Gat);
    }
}
