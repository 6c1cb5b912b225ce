use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SPATIAL_TABLE;
use crate::error::{Error, Result};
use crate::graph::{Bound, Graph, NodeId};
use crate::montage::{temporal_encoding, PositionEncoding};
use crate::params::{truncated_normal, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;

/// Pre-normalization transformer stack; all attention is bidirectional.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self { depth: 8, d_model: 64, heads: 4, ff_dim: 256 }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model width {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.ff_dim == 0 {
            return Err(Error::Config("feedforward width must be positive".into()));
        }
        Ok(())
    }
}

fn insert_norm<T: Scalar>(p: &mut ParamSet<T>, name: &str, d: usize) {
    p.insert(format!("{name}.gamma"), Tensor::filled(1, d, T::one()));
    p.insert(format!("{name}.beta"), Tensor::zeros(1, d));
}

fn insert_attention<T: Scalar>(p: &mut ParamSet<T>, name: &str, d: usize, rng: &mut impl Rng) {
    for w in ["q", "k", "v", "o"] {
        p.insert(format!("{name}.w{w}"), truncated_normal(d, d, INIT_STD, rng));
        p.insert(format!("{name}.b{w}"), Tensor::zeros(1, d));
    }
}

fn insert_ff<T: Scalar>(p: &mut ParamSet<T>, name: &str, d: usize, ff: usize, rng: &mut impl Rng) {
    p.insert(format!("{name}.w1"), truncated_normal(d, ff, INIT_STD, rng));
    p.insert(format!("{name}.b1"), Tensor::zeros(1, ff));
    p.insert(format!("{name}.w2"), truncated_normal(ff, d, INIT_STD, rng));
    p.insert(format!("{name}.b2"), Tensor::zeros(1, d));
}

pub fn init_encoder<T: Scalar>(prefix: &str, config: &TransformerConfig, rng: &mut impl Rng) -> ParamSet<T> {
    let mut p = ParamSet::new();
    let d = config.d_model;
    for i in 0..config.depth {
        let l = format!("{prefix}.layer{i}");
        insert_norm(&mut p, &format!("{l}.ln1"), d);
        insert_attention(&mut p, &format!("{l}.attn"), d, rng);
        insert_norm(&mut p, &format!("{l}.ln2"), d);
        insert_ff(&mut p, &format!("{l}.ff"), d, config.ff_dim, rng);
    }
    p
}

pub fn init_predictor<T: Scalar>(prefix: &str, config: &TransformerConfig, rng: &mut impl Rng) -> ParamSet<T> {
    let mut p = ParamSet::new();
    let d = config.d_model;
    p.insert(format!("{prefix}.mask_token"), truncated_normal(1, d, INIT_STD, rng));
    insert_norm(&mut p, &format!("{prefix}.memory_norm"), d);
    for i in 0..config.depth {
        let l = format!("{prefix}.layer{i}");
        insert_norm(&mut p, &format!("{l}.ln1"), d);
        insert_attention(&mut p, &format!("{l}.self_attn"), d, rng);
        insert_norm(&mut p, &format!("{l}.ln2"), d);
        insert_attention(&mut p, &format!("{l}.cross_attn"), d, rng);
        insert_norm(&mut p, &format!("{l}.ln3"), d);
        insert_ff(&mut p, &format!("{l}.ff"), d, config.ff_dim, rng);
    }
    insert_norm(&mut p, &format!("{prefix}.out_norm"), d);
    p.insert(format!("{prefix}.proj.w"), truncated_normal(d, d, INIT_STD, rng));
    p.insert(format!("{prefix}.proj.b"), Tensor::zeros(1, d));
    p
}

fn norm<T: Scalar>(g: &mut Graph<T>, b: &Bound, name: &str, x: NodeId) -> NodeId {
    let gamma = b.id(&format!("{name}.gamma"));
    let beta = b.id(&format!("{name}.beta"));
    g.layer_norm(x, Some(gamma), Some(beta))
}

fn attention<T: Scalar>(g: &mut Graph<T>, b: &Bound, name: &str, heads: usize, q_in: NodeId, kv_in: NodeId) -> NodeId {
    let p = |s: &str| b.id(&format!("{name}.{s}"));
    let q = g.linear(q_in, p("wq"), p("bq"));
    let k = g.linear(kv_in, p("wk"), p("bk"));
    let v = g.linear(kv_in, p("wv"), p("bv"));
    let d = g.value(q).cols();
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).expect("width").sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let kh = g.slice_cols(k, h * dh, dh);
        let vh = g.slice_cols(v, h * dh, dh);
        let scores = g.matmul_t(qh, false, kh, true);
        let scores = g.scale(scores, scale);
        let weights = g.softmax_rows(scores);
        outs.push(g.matmul(weights, vh));
    }
    let joined = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    g.linear(joined, p("wo"), p("bo"))
}

fn feedforward<T: Scalar>(g: &mut Graph<T>, b: &Bound, name: &str, x: NodeId) -> NodeId {
    let p = |s: &str| b.id(&format!("{name}.{s}"));
    let h = g.linear(x, p("w1"), p("b1"));
    let h = g.gelu(h);
    g.linear(h, p("w2"), p("b2"))
}

/// Encoder stack over an `n x d` sequence. Depth zero is the identity.
pub fn encoder_forward<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound,
    prefix: &str,
    config: &TransformerConfig,
    x: NodeId,
) -> NodeId {
    let mut x = x;
    for i in 0..config.depth {
        let l = format!("{prefix}.layer{i}");
        let h = norm(g, b, &format!("{l}.ln1"), x);
        let a = attention(g, b, &format!("{l}.attn"), config.heads, h, h);
        x = g.add(x, a);
        let h = norm(g, b, &format!("{l}.ln2"), x);
        let f = feedforward(g, b, &format!("{l}.ff"), h);
        x = g.add(x, f);
    }
    x
}

/// Decoder stack: self-attention among `queries`, cross-attention into
/// `memory`, then a normalized linear read-out.
pub fn predictor_forward<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound,
    prefix: &str,
    config: &TransformerConfig,
    queries: NodeId,
    memory: NodeId,
) -> NodeId {
    let memory = norm(g, b, &format!("{prefix}.memory_norm"), memory);
    let mut x = queries;
    for i in 0..config.depth {
        let l = format!("{prefix}.layer{i}");
        let h = norm(g, b, &format!("{l}.ln1"), x);
        let a = attention(g, b, &format!("{l}.self_attn"), config.heads, h, h);
        x = g.add(x, a);
        let h = norm(g, b, &format!("{l}.ln2"), x);
        let a = attention(g, b, &format!("{l}.cross_attn"), config.heads, h, memory);
        x = g.add(x, a);
        let h = norm(g, b, &format!("{l}.ln3"), x);
        let f = feedforward(g, b, &format!("{l}.ff"), h);
        x = g.add(x, f);
    }
    let h = norm(g, b, &format!("{prefix}.out_norm"), x);
    g.linear(h, b.id(&format!("{prefix}.proj.w")), b.id(&format!("{prefix}.proj.b")))
}

/// Position markers for arbitrary `(channel, window)` positions: temporal
/// encoding in the leading columns, the bound spatial table row after it.
pub fn marker_rows<T: Scalar>(
    g: &mut Graph<T>,
    table: NodeId,
    encoding: &PositionEncoding,
    positions: &[(usize, usize)],
) -> NodeId {
    let mut temporal = Tensor::zeros(positions.len(), encoding.temporal_dims);
    for (r, &(_, w)) in positions.iter().enumerate() {
        for (k, v) in temporal_encoding(w as f64, encoding.temporal_dims).into_iter().enumerate() {
            temporal.set(r, k, T::lit(v));
        }
    }
    let temporal = g.constant(temporal);
    let channels: Vec<usize> = positions.iter().map(|&(c, _)| c).collect();
    let spatial = g.gather_rows(table, &channels);
    g.concat_cols(&[temporal, spatial])
}

/// The contextual encoder over the visible subset of a marked sequence.
pub fn contextual_forward<T: Scalar>(
    tokens: &Tensor<T>,
    visible: &[usize],
    params: &ParamSet<T>,
    prefix: &str,
    config: &TransformerConfig,
) -> Result<Tensor<T>> {
    if visible.is_empty() {
        return Err(Error::Shape("the contextual encoder needs at least one visible token".into()));
    }
    if let Some(&bad) = visible.iter().find(|&&i| i >= tokens.rows()) {
        return Err(Error::Shape(format!("visible index {bad} out of {} tokens", tokens.rows())));
    }
    let mut g = Graph::new();
    let b = g.bind(&params.subset(&format!("{prefix}.")), |_| false);
    let x = g.constant(tokens.select_rows(visible));
    let out = encoder_forward(&mut g, &b, prefix, config, x);
    Ok(g.value(out).clone())
}

/// Predictions for the masked positions, one row per position in input order.
pub fn predict_masked<T: Scalar>(
    context_out: &Tensor<T>,
    masked_positions: &[(usize, usize)],
    params: &ParamSet<T>,
    encoding: &PositionEncoding,
    config: &TransformerConfig,
) -> Result<Tensor<T>> {
    if masked_positions.is_empty() {
        return Err(Error::Shape("the predictor needs at least one masked position".into()));
    }
    let table_rows = params.require(SPATIAL_TABLE)?.rows();
    if let Some(&(c, _)) = masked_positions.iter().find(|&&(c, _)| c >= table_rows) {
        return Err(Error::Shape(format!("masked channel {c} out of {table_rows}")));
    }
    let mut g = Graph::new();
    let mut sub = params.subset("pred.");
    sub.insert(SPATIAL_TABLE, params.require(SPATIAL_TABLE)?.clone());
    let b = g.bind(&sub, |_| false);
    let markers = marker_rows(&mut g, b.id(SPATIAL_TABLE), encoding, masked_positions);
    let queries = g.add_row(markers, b.id("pred.mask_token"));
    let memory = g.constant(context_out.clone());
    let out = predictor_forward(&mut g, &b, "pred", config, queries, memory);
    Ok(g.value(out).clone())
}
