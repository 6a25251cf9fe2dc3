//! Prototype learning module: learnable queries refined by a transformer
//! decoder into prototype vectors and class scores over `C + 1` classes.
//!
//! Each layer runs cross-attention from the queries to the deepest encoder
//! features, then self-attention among the queries, then a feed-forward
//! block; every sub-block is residual and layer-normalized. Positional
//! information enters only through a learned embedding of voxel centers
//! that is added to the keys.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, Linear, Norm, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub num_queries: usize,
    pub layers: usize,
    pub heads: usize,
    pub query_dim: usize,
    /// Width of the encoder's deepest features.
    pub input_dim: usize,
    /// Prototype dimension; equals the point feature dimension `D`.
    pub feature_dim: usize,
    pub num_classes: usize,
    /// Voxel centers are divided by this after centering (meters).
    pub position_scale: f32,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_queries == 0 || self.query_dim == 0 || self.heads == 0 {
            return Err(Error::Config(
                "decoder needs queries, width and heads".into(),
            ));
        }
        if self.query_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "query_dim {} is not divisible by {} heads",
                self.query_dim, self.heads
            )));
        }
        if self.num_classes == 0 || !(self.position_scale > 0.0) {
            return Err(Error::Config(
                "decoder needs classes and a positive position scale".into(),
            ));
        }
        Ok(())
    }
}

/// `N_q` learnable query embeddings of width `D_q`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuerySet {
    pub embeddings: ParamId,
    pub len: usize,
}

impl QuerySet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        num_queries: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let embeddings = store.add(
            "decoder.queries",
            Tensor::randn(&[num_queries, dim], 1.0, rng),
            ParamGroup::Head,
        );
        QuerySet {
            embeddings,
            len: num_queries,
        }
    }
}

/// Projections and normalization of one multi-head attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm: Norm,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let hd = ParamGroup::Head;
        AttentionParams {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, hd, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, hd, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, hd, rng),
            output: Linear::new(store, &format!("{name}.output"), dim, dim, hd, rng),
            norm: Norm::new(store, &format!("{name}.norm"), dim, hd),
            heads,
        }
    }
}

/// Scaled dot-product attention of `queries` over `keys`/`values`, per
/// head, concatenated, output-projected, added to `queries` and normalized.
pub fn attention_block<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    attn: &AttentionParams,
    queries: Var,
    keys: Var,
    values: Var,
) -> Result<Var> {
    if g.value(keys).rows() != g.value(values).rows() {
        return Err(Error::shape(
            "attention_block",
            g.shape(keys),
            g.shape(values),
        ));
    }
    let q = attn.query.forward(g, p, queries)?;
    let k = attn.key.forward(g, p, keys)?;
    let v = attn.value.forward(g, p, values)?;
    let dim = g.value(q).cols();
    let head_dim = dim / attn.heads;
    let scale = 1.0 / libm::sqrtf(head_dim as f32);
    let mut outs = Vec::with_capacity(attn.heads);
    for h in 0..attn.heads {
        let qh = g.slice_cols(q, h * head_dim, head_dim)?;
        let kh = g.slice_cols(k, h * head_dim, head_dim)?;
        let vh = g.slice_cols(v, h * head_dim, head_dim)?;
        let kt = g.transpose(kh)?;
        let logits = g.matmul(qh, kt)?;
        let logits = g.scale(logits, scale);
        let weights = g.softmax(logits);
        outs.push(g.matmul(weights, vh)?);
    }
    let merged = if outs.len() == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)?
    };
    let projected = attn.output.forward(g, p, merged)?;
    let residual = g.add(queries, projected)?;
    attn.norm.forward(g, p, residual)
}

#[derive(Clone, Debug, PartialEq)]
struct DecoderLayer {
    cross: AttentionParams,
    self_attn: AttentionParams,
    ffn_in: Linear,
    ffn_out: Linear,
    ffn_norm: Norm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    config: DecoderConfig,
    input_proj: Linear,
    position: Linear,
    layers: Vec<DecoderLayer>,
    class_head: Linear,
    proto_hidden: Linear,
    proto_out: Linear,
}

/// Decoder outputs on the tape.
#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    /// `N_q x (C + 1)` pre-softmax class scores.
    pub class_logits: Var,
    /// `softmax(class_logits)`.
    pub scores: Var,
    /// `N_q x D`.
    pub prototypes: Var,
}

impl DecoderParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &DecoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let hd = ParamGroup::Head;
        let dq = cfg.query_dim;
        let input_proj = Linear::new(store, "decoder.input_proj", cfg.input_dim, dq, hd, rng);
        let position = Linear::new(store, "decoder.position", 3, dq, hd, rng);
        let layers = (0..cfg.layers)
            .map(|l| DecoderLayer {
                cross: AttentionParams::new(
                    store,
                    &format!("decoder.layer{l}.cross"),
                    dq,
                    cfg.heads,
                    rng,
                ),
                self_attn: AttentionParams::new(
                    store,
                    &format!("decoder.layer{l}.self"),
                    dq,
                    cfg.heads,
                    rng,
                ),
                ffn_in: Linear::new(
                    store,
                    &format!("decoder.layer{l}.ffn_in"),
                    dq,
                    2 * dq,
                    hd,
                    rng,
                ),
                ffn_out: Linear::new(
                    store,
                    &format!("decoder.layer{l}.ffn_out"),
                    2 * dq,
                    dq,
                    hd,
                    rng,
                ),
                ffn_norm: Norm::new(store, &format!("decoder.layer{l}.ffn_norm"), dq, hd),
            })
            .collect();
        let class_head = Linear::new(
            store,
            "decoder.class_head",
            dq,
            cfg.num_classes + 1,
            hd,
            rng,
        );
        let proto_hidden = Linear::new(store, "decoder.proto_hidden", dq, dq, hd, rng);
        let proto_out = Linear::new(store, "decoder.proto_out", dq, cfg.feature_dim, hd, rng);
        Ok(DecoderParams {
            config: cfg.clone(),
            input_proj,
            position,
            layers,
            class_head,
            proto_hidden,
            proto_out,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn class_head(&self) -> Linear {
        self.class_head
    }

    pub fn layer_attention(&self, layer: usize) -> (&AttentionParams, &AttentionParams) {
        (&self.layers[layer].cross, &self.layers[layer].self_attn)
    }

    /// Runs the decoder over the deepest encoder features `deep`
    /// (`V x input_dim`) located at `centers`.
    pub fn decode_prototypes<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        queries: &QuerySet,
        deep: Var,
        centers: &[[f32; 3]],
    ) -> Result<DecoderOutput> {
        let n = g.value(deep).rows();
        if n == 0 || centers.len() != n {
            return Err(Error::contract(format!(
                "decoder needs a non-empty feature set with one center per row ({n} rows, {} centers)",
                centers.len()
            )));
        }
        let positions = g.constant(normalized_positions(centers, self.config.position_scale).cast());
        let values = self.input_proj.forward(g, p, deep)?;
        let pos = self.position.forward(g, p, positions)?;
        let keys = g.add(values, pos)?;
        let mut q = p.var(queries.embeddings);
        for layer in &self.layers {
            q = attention_block(g, p, &layer.cross, q, keys, values)?;
            q = attention_block(g, p, &layer.self_attn, q, q, q)?;
            let h = layer.ffn_in.forward(g, p, q)?;
            let h = g.relu(h);
            let h = layer.ffn_out.forward(g, p, h)?;
            let r = g.add(q, h)?;
            q = layer.ffn_norm.forward(g, p, r)?;
        }
        let class_logits = self.class_head.forward(g, p, q)?;
        let scores = g.softmax(class_logits);
        let h = self.proto_hidden.forward(g, p, q)?;
        let h = g.relu(h);
        let prototypes = self.proto_out.forward(g, p, h)?;
        Ok(DecoderOutput {
            class_logits,
            scores,
            prototypes,
        })
    }
}

/// Centers relative to their mean, divided by `scale`, as a `V x 3` tensor.
pub fn normalized_positions(centers: &[[f32; 3]], scale: f32) -> Tensor {
    let n = centers.len().max(1) as f64;
    let mut mean = [0.0f64; 3];
    for c in centers {
        for k in 0..3 {
            mean[k] += c[k] as f64 / n;
        }
    }
    let data = centers
        .iter()
        .flat_map(|c| (0..3).map(move |k| ((c[k] as f64 - mean[k]) / scale as f64) as f32))
        .collect();
    Tensor::matrix(centers.len(), 3, data).expect("three columns")
}

/// Prototype vectors `P` with class scores `S` over `C + 1` classes; the
/// last score column is the "no object" class.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    prototypes: Tensor,
    scores: Tensor,
}

impl PrototypeSet {
    pub fn new(prototypes: Tensor, scores: Tensor) -> Result<Self> {
        if prototypes.rank() != 2 || scores.rank() != 2 || prototypes.rows() != scores.rows() {
            return Err(Error::shape(
                "prototype_set",
                prototypes.shape(),
                scores.shape(),
            ));
        }
        if scores.cols() < 2 {
            return Err(Error::contract(
                "scores need at least one class plus no-object",
            ));
        }
        for k in 0..scores.rows() {
            let row = scores.row(k);
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            if (sum - 1.0).abs() > 1e-4 || row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::contract(format!(
                    "score row {k} is not a distribution (sum {sum})"
                )));
            }
        }
        Ok(PrototypeSet { prototypes, scores })
    }

    pub fn prototypes(&self) -> &Tensor {
        &self.prototypes
    }

    pub fn scores(&self) -> &Tensor {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.scores.cols() - 1
    }

    /// Column index of the no-object class.
    pub fn no_object(&self) -> usize {
        self.num_classes()
    }

    /// Argmax class label (`1..=C`) of prototype `k`, or `None` for no-object.
    pub fn class_of(&self, k: usize) -> Option<u16> {
        let best = self.scores.argmax_row(k);
        (best != self.no_object()).then_some(best as u16 + 1)
    }

    /// Number of prototypes whose argmax class is a real class.
    pub fn retained_count(&self) -> usize {
        (0..self.len())
            .filter(|&k| self.class_of(k).is_some())
            .count()
    }
}
