//! The two trainable models: the point-wise classification baseline and the
//! prototype model, each owning its parameters, with per-scene loss and
//! gradient computation and inference.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::decoder::{DecoderConfig, DecoderParams, PrototypeSet, QuerySet};
use crate::encoder::{pwc_loss_graph, EncoderConfig, EncoderParams, PreparedScene, PwcClassifier};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::inference::{semantic_inference, SegmentationResult};
use crate::loss::{
    build_ground_truth_pairs, mask_logits, matching_cost, napl_loss, pad_ground_truth,
    prototype_dropout, valid_points, LossConfig,
};
use crate::matching::hungarian_match;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Loss value and per-parameter gradients (store order) of one scene.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub loss: f64,
    pub grads: Vec<Vec<f32>>,
}

fn scene_labels(scene: &PreparedScene) -> Result<&[u16]> {
    scene
        .labels
        .as_deref()
        .ok_or_else(|| Error::contract("training needs a labeled scene"))
}

/// Encoder plus linear classifier.
#[derive(Clone, Debug)]
pub struct PwcModel {
    store: ParamStore,
    encoder: EncoderParams,
    classifier: PwcClassifier,
}

impl PwcModel {
    pub fn new<R: Rng + ?Sized>(
        cfg: &EncoderConfig,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let encoder = EncoderParams::new(&mut store, cfg, rng)?;
        let classifier = PwcClassifier::new(&mut store, cfg.feature_dim, num_classes, rng);
        Ok(PwcModel {
            store,
            encoder,
            classifier,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoder(&self) -> &EncoderParams {
        &self.encoder
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.num_classes
    }

    pub fn gradients(&self, scene: &PreparedScene) -> Result<Gradients> {
        let labels = scene_labels(scene)?;
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, true);
        let out = self.encoder.extract_features(&mut g, &p, scene)?;
        let logits = self.classifier.logits(&mut g, &p, out.features)?;
        let loss = pwc_loss_graph(&mut g, logits, labels)?;
        g.backward(loss)?;
        Ok(Gradients {
            loss: g.value(loss).item() as f64,
            grads: p.grads(&g),
        })
    }

    /// Argmax class (`1..=C`) per point.
    pub fn predict(&self, scene: &PreparedScene) -> Result<Vec<u16>> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let out = self.encoder.extract_features(&mut g, &p, scene)?;
        let logits = self.classifier.logits(&mut g, &p, out.features)?;
        Ok(g.value(logits)
            .argmax_rows()
            .into_iter()
            .map(|c| c as u16 + 1)
            .collect())
    }

    /// Point features `F` (`N x D`).
    pub fn features(&self, scene: &PreparedScene) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let out = self.encoder.extract_features(&mut g, &p, scene)?;
        Ok(g.value(out.features).clone())
    }
}

/// Hyperparameters of [`NaplModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct NaplConfig {
    pub encoder: EncoderConfig,
    pub num_queries: usize,
    pub layers: usize,
    pub heads: usize,
    pub query_dim: usize,
    pub num_classes: usize,
    pub position_scale: f32,
}

impl NaplConfig {
    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            num_queries: self.num_queries,
            layers: self.layers,
            heads: self.heads,
            query_dim: self.query_dim,
            input_dim: self.encoder.deep_width(),
            feature_dim: self.encoder.feature_dim,
            num_classes: self.num_classes,
            position_scale: self.position_scale,
        }
    }
}

/// Diagnostics of one training forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct NaplStep {
    pub loss: f64,
    pub cross_entropy: f64,
    pub focal: f64,
    pub dice: f64,
    /// `(class, query)` for every real ground-truth segment.
    pub matched: Vec<(u16, usize)>,
    /// Whether prototype dropout ran in this pass.
    pub dropout_invoked: bool,
    pub kept: usize,
}

/// Encoder plus transformer prototype decoder.
#[derive(Clone, Debug)]
pub struct NaplModel {
    config: NaplConfig,
    store: ParamStore,
    encoder: EncoderParams,
    queries: QuerySet,
    decoder: DecoderParams,
}

/// Inference outputs for one scene.
#[derive(Clone, Debug)]
pub struct NaplOutput {
    pub features: Tensor,
    pub prototypes: PrototypeSet,
    /// Always false: inference never drops prototypes.
    pub dropout_invoked: bool,
}

impl NaplModel {
    pub fn new<R: Rng + ?Sized>(cfg: &NaplConfig, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let encoder = EncoderParams::new(&mut store, &cfg.encoder, rng)?;
        let dcfg = cfg.decoder();
        dcfg.validate()?;
        let queries = QuerySet::new(&mut store, cfg.num_queries, cfg.query_dim, rng);
        let decoder = DecoderParams::new(&mut store, &dcfg, rng)?;
        Ok(NaplModel {
            config: cfg.clone(),
            store,
            encoder,
            queries,
            decoder,
        })
    }

    pub fn config(&self) -> &NaplConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Copies every `encoder.*` tensor from a pretrained store. Returns how
    /// many tensors were copied.
    pub fn load_backbone(&mut self, pretrained: &ParamStore) -> Result<usize> {
        let mut copied = 0;
        for src in pretrained
            .entries()
            .iter()
            .filter(|e| e.name.starts_with("encoder."))
        {
            let id = self.store.find(&src.name).ok_or_else(|| {
                Error::contract(format!("pretrained tensor {} has no counterpart", src.name))
            })?;
            let dst = &mut self.store.entries_mut()[id.index()];
            if dst.value.shape() != src.value.shape() {
                return Err(Error::shape(
                    "load_backbone",
                    dst.value.shape(),
                    src.value.shape(),
                ));
            }
            dst.value = src.value.clone();
            copied += 1;
        }
        Ok(copied)
    }

    /// Training loss and gradients of one scene. With `dropout > 0`, that
    /// many query pairs are removed before matching.
    pub fn gradients<R: Rng + ?Sized>(
        &self,
        scene: &PreparedScene,
        dropout: usize,
        loss_cfg: &LossConfig,
        rng: &mut R,
    ) -> Result<(Gradients, NaplStep)> {
        let labels = scene_labels(scene)?;
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, true);
        let enc = self.encoder.extract_features(&mut g, &p, scene)?;
        let dec = self.decoder.decode_prototypes(
            &mut g,
            &p,
            &self.queries,
            enc.deep,
            &enc.deep_centers,
        )?;

        let valid = valid_points(labels);
        let (features, gt_labels): (_, Vec<u16>) = if valid.is_empty() {
            (enc.features, labels.to_vec())
        } else {
            (
                g.gather_rows(enc.features, &valid)?,
                valid.iter().map(|&i| labels[i]).collect(),
            )
        };
        let masks = mask_logits(&mut g, features, dec.prototypes)?;

        let n_q = self.config.num_queries;
        let (kept, dropout_invoked) = if dropout > 0 {
            (prototype_dropout(n_q, dropout, rng)?, true)
        } else {
            ((0..n_q).collect::<Vec<_>>(), false)
        };
        let gt = pad_ground_truth(build_ground_truth_pairs(&gt_labels), kept.len())?;

        let scores = g.value(dec.scores);
        let logits = g.value(masks);
        let kept_scores = select_rows(scores, &kept);
        let kept_logits = select_rows(logits, &kept);
        let cost = matching_cost(&kept_scores, &kept_logits, &gt, loss_cfg)?;
        let sigma = hungarian_match(&cost)?;

        let terms = napl_loss(
            &mut g,
            dec.class_logits,
            masks,
            &kept,
            &gt,
            &sigma,
            loss_cfg,
        )?;
        g.backward(terms.total)?;
        let matched = gt
            .real()
            .iter()
            .enumerate()
            .map(|(i, pair)| (pair.class, kept[sigma.column(i)]))
            .collect();
        let loss = g.value(terms.total).item() as f64;
        Ok((
            Gradients {
                loss,
                grads: p.grads(&g),
            },
            NaplStep {
                loss,
                cross_entropy: terms.cross_entropy,
                focal: terms.focal,
                dice: terms.dice,
                matched,
                dropout_invoked,
                kept: kept.len(),
            },
        ))
    }

    /// Point features and the full prototype set; never drops prototypes.
    pub fn forward(&self, scene: &PreparedScene) -> Result<NaplOutput> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let enc = self.encoder.extract_features(&mut g, &p, scene)?;
        let dec = self.decoder.decode_prototypes(
            &mut g,
            &p,
            &self.queries,
            enc.deep,
            &enc.deep_centers,
        )?;
        let prototypes =
            PrototypeSet::new(g.value(dec.prototypes).clone(), g.value(dec.scores).clone())?;
        Ok(NaplOutput {
            features: g.value(enc.features).clone(),
            prototypes,
            dropout_invoked: false,
        })
    }

    pub fn predict(&self, scene: &PreparedScene) -> Result<SegmentationResult> {
        let out = self.forward(scene)?;
        semantic_inference(&out.features, &out.prototypes)
    }
}

fn select_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let c = t.cols();
    let mut data = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor::matrix(rows.len(), c, data).expect("row selection keeps the width")
}
