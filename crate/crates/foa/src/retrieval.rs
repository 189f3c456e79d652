//! Gallery retrieval for unseen identities.
//!
//! Gallery entries are embedded from clean observations (no channel). A
//! query pair passes through its devices' encoders, one channel draw and
//! the decoders; its score against gallery entry `g` is
//! `Σ_i cos(z_i, z_g,i)` over the scheme's devices. The prediction is the
//! best-scoring entry, ties going to the lowest label.

use crate::autodiff::{Tape, Var};
use crate::channel::{ChannelConfig, Realization};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::ClScModel;
use crate::rng::{self, streams};
use crate::source::{DatasetSplit, Pair, View};
use crate::tensor::{dot, norm, Tensor};
use crate::training::Scheme;

/// Queries evaluated together under one random stream.
pub const QUERY_CHUNK: usize = 32;

/// Embedded gallery, sorted by label.
#[derive(Clone, Debug)]
pub struct Gallery {
    pub labels: Vec<usize>,
    /// One `[|G|, width]` matrix per view the scheme uses.
    pub embeddings: Vec<Tensor>,
}

impl Gallery {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub correct: usize,
    pub total: usize,
}

impl RetrievalResult {
    pub fn top1(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

fn stack(pairs: &[&Pair], view: View) -> Result<Tensor> {
    Tensor::from_rows(&pairs.iter().map(|p| p.view(view)).collect::<Vec<_>>())
}

/// Retrieval embedding of decoded (or clean) features.
fn embed(model: &ClScModel, tape: &mut Tape<'_>, v: Var, scheme: Scheme) -> Result<Var> {
    if scheme.uses_contrastive() {
        model.contrastive_features(tape, v)
    } else {
        Ok(v)
    }
}

pub fn build_gallery(model: &ClScModel, gallery: &[Pair], scheme: Scheme) -> Result<Gallery> {
    if gallery.is_empty() {
        return Err(Error::config("gallery", "empty gallery"));
    }
    let mut sorted: Vec<&Pair> = gallery.iter().collect();
    sorted.sort_by_key(|p| p.label);
    let mut tape = Tape::with_params(&model.store).frozen();
    let mut embeddings = Vec::new();
    for &view in scheme.devices() {
        let s = tape.constant(stack(&sorted, view)?);
        let v = model.feature_encode(&mut tape, s, view)?;
        let z = embed(model, &mut tape, v, scheme)?;
        embeddings.push(tape.value(z).clone());
    }
    Ok(Gallery {
        labels: sorted.iter().map(|p| p.label).collect(),
        embeddings,
    })
}

/// Predicted label per query row; `queries` holds one matrix per view,
/// aligned with `gallery.embeddings`.
pub fn retrieve_embedded(queries: &[Tensor], gallery: &Gallery) -> Result<Vec<usize>> {
    if queries.len() != gallery.embeddings.len() || queries.is_empty() {
        return Err(Error::shape(
            "retrieve",
            format!("{} query views vs {} gallery views", queries.len(), gallery.embeddings.len()),
        ));
    }
    for (q, g) in queries.iter().zip(&gallery.embeddings) {
        if q.cols() != g.cols() || q.rows() != queries[0].rows() {
            return Err(Error::shape("retrieve", format!("{:?} vs {:?}", q.shape(), g.shape())));
        }
    }
    let gallery_norms: Vec<Vec<f64>> = gallery
        .embeddings
        .iter()
        .map(|g| (0..g.rows()).map(|r| norm(g.row(r))).collect())
        .collect();
    let rows = queries[0].rows();
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (g, &label) in gallery.labels.iter().enumerate() {
            let mut score = 0.0;
            for (view, q) in queries.iter().enumerate() {
                let qr = q.row(r);
                let denom = (norm(qr) * gallery_norms[view][g]).max(crate::autodiff::NORM_FLOOR);
                score += dot(qr, gallery.embeddings[view].row(g)) / denom;
            }
            if score > best.0 {
                best = (score, label);
            }
        }
        out.push(best.1);
    }
    Ok(out)
}

/// Embeddings of `pairs` after one channel draw per row.
pub fn embed_queries(
    model: &ClScModel,
    pairs: &[&Pair],
    scheme: Scheme,
    real: &Realization,
) -> Result<Vec<Tensor>> {
    let mut tape = Tape::with_params(&model.store).frozen();
    let mut v = Vec::new();
    for &view in scheme.devices() {
        let s = tape.constant(stack(pairs, view)?);
        v.push(model.feature_encode(&mut tape, s, view)?);
    }
    let link = model.link_forward(&mut tape, v[0], v.get(1).copied(), real)?;
    let mut out = Vec::new();
    for &view in scheme.devices() {
        let h = link.v_hat(view).expect("transmitting device");
        let z = embed(model, &mut tape, h, scheme)?;
        out.push(tape.value(z).clone());
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct EvalConfig {
    /// Independent channel draws per query.
    pub trials: usize,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            trials: 1,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

/// Top-1 accuracy over every query and trial. Each chunk of
/// [`QUERY_CHUNK`] queries has its own random stream, so the result does
/// not depend on the execution mode.
pub fn evaluate(
    model: &ClScModel,
    split: &DatasetSplit,
    scheme: Scheme,
    channel: &ChannelConfig,
    cfg: &EvalConfig,
) -> Result<RetrievalResult> {
    if cfg.trials == 0 {
        return Err(Error::config("eval.trials", "must be at least 1"));
    }
    if channel.bandwidth != model.arch.bandwidth || channel.kind != model.arch.channel {
        return Err(Error::config("channel", "evaluation channel does not match the model"));
    }
    let gallery = build_gallery(model, &split.gallery, scheme)?;
    let chunks: Vec<(usize, &[Pair])> = split.queries.chunks(QUERY_CHUNK).enumerate().collect();
    let per_chunk = cfg.execution.map(&chunks, |&(i, chunk)| -> Result<usize> {
        let mut rng = rng::stream(cfg.seed, streams::EVAL_BASE + i as u64);
        let refs: Vec<&Pair> = chunk.iter().collect();
        let mut hits = 0;
        for _ in 0..cfg.trials {
            let real = Realization::sample(channel, refs.len(), &mut rng);
            let q = embed_queries(model, &refs, scheme, &real)?;
            let predicted = retrieve_embedded(&q, &gallery)?;
            hits += predicted.iter().zip(&refs).filter(|(p, q)| **p == q.label).count();
        }
        Ok(hits)
    });
    let mut correct = 0;
    for c in per_chunk {
        correct += c?;
    }
    Ok(RetrievalResult {
        correct,
        total: split.queries.len() * cfg.trials,
    })
}
