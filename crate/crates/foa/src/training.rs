//! Losses and the four-stage training schedule.
//!
//! * T1: feature encoders with auxiliary classifiers, no channel.
//! * T2: JSCC encoders/decoders on `L_mse` through the live channel.
//! * T3: the contrastive module (cross-view alternation below).
//! * T4: joint fine-tuning of every online component.
//!
//! T3 alternates two optimizers over θ. Every epoch, each batch takes an
//! `Opt₁` step on `L_ce`; on epochs with `epoch % 2 == 0` (epochs count
//! from 0) the batch additionally takes an `Opt₂` step on `L_cl` followed
//! by the EMA update of ξ.

use std::fmt;
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::channel::{ChannelConfig, Realization};
use crate::error::{Error, Result};
use crate::model::{ClScModel, Head};
use crate::nn::{Adam, AdamConfig};
use crate::params::ParamId;
use crate::rng::{self, streams};
use crate::source::{TrainSet, View};
use crate::tensor::Tensor;

/// Which end-to-end system is trained and evaluated.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Two devices over the shared channel plus the contrastive module.
    ClSc,
    /// Two devices over the shared channel, retrieval directly on `v̂`.
    NomaJscc,
    /// Device 1 alone (`x₂ = 0`), retrieval on `v̂₁`.
    SingleSource,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::ClSc, Scheme::NomaJscc, Scheme::SingleSource];

    pub fn devices(self) -> &'static [View] {
        match self {
            Scheme::ClSc | Scheme::NomaJscc => &View::BOTH,
            Scheme::SingleSource => &[View::One],
        }
    }

    pub fn uses_contrastive(self) -> bool {
        self == Scheme::ClSc
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::ClSc => "cl_sc",
            Scheme::NomaJscc => "noma_jscc",
            Scheme::SingleSource => "single_source",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config("scheme", format!("unknown scheme `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs_t1: usize,
    pub epochs_t2: usize,
    pub epochs_t3: usize,
    pub epochs_t4: usize,
    pub batch_size: usize,
    /// Learning rate of the per-stage optimizers (T1, T2, T4).
    pub lr: f64,
    pub lr_opt1: f64,
    pub lr_opt2: f64,
    /// Target decay rate.
    pub tau: f64,
    /// Weight of `L_mse` in the T4 objective.
    pub lambda_mse: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_t1: 30,
            epochs_t2: 40,
            epochs_t3: 40,
            epochs_t4: 20,
            batch_size: 64,
            lr: 1e-3,
            lr_opt1: 1e-3,
            lr_opt2: 1e-3,
            tau: 0.99,
            lambda_mse: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::config("train.tau", "must lie in [0, 1]"));
        }
        for (k, v) in [("train.lr", self.lr), ("train.lr_opt1", self.lr_opt1), ("train.lr_opt2", self.lr_opt2)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(k, "must be positive"));
            }
        }
        if !(self.lambda_mse >= 0.0 && self.lambda_mse.is_finite()) {
            return Err(Error::config("train.lambda_mse", "must be non-negative"));
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig { lr, ..Default::default() }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    T1,
    T2,
    T3,
    T4,
}

impl Stage {
    fn stream(self) -> u64 {
        streams::STAGE_BASE
            + match self {
                Stage::T1 => 1,
                Stage::T2 => 2,
                Stage::T3 => 3,
                Stage::T4 => 4,
            }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Optimizer bookkeeping, recorded per stage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Counters {
    /// Steps of the stage optimizer (T1, T2, T4).
    pub stage_steps: u64,
    pub opt1_steps: u64,
    pub opt2_steps: u64,
    pub ema_updates: u64,
    /// Epochs in which at least one step of the named kind ran.
    pub opt1_epochs: Vec<usize>,
    pub opt2_epochs: Vec<usize>,
    pub ema_epochs: Vec<usize>,
}

fn mark(epochs: &mut Vec<usize>, epoch: usize) {
    if epochs.last() != Some(&epoch) {
        epochs.push(epoch);
    }
}

#[derive(Clone, Debug)]
pub struct StageReport {
    pub stage: Stage,
    /// Mean training objective per epoch.
    pub losses: Vec<f64>,
    /// Mean `L_cl` per epoch in which it was optimized (T3/T4).
    pub cl_losses: Vec<(usize, f64)>,
    /// Unix milliseconds at the end of each epoch.
    pub timestamps: Vec<u128>,
    pub seconds: f64,
    pub counters: Counters,
    /// Largest `(1/k)‖x‖²` over every codeword emitted during the stage.
    pub max_codeword_power: f64,
    /// Largest gradient norm seen on ξ over every backward pass.
    pub max_target_grad_norm: f64,
    /// Named end-of-stage measurement.
    pub metric: Option<(&'static str, f64)>,
}

impl StageReport {
    fn new(stage: Stage) -> Self {
        Self {
            stage,
            losses: Vec::new(),
            cl_losses: Vec::new(),
            timestamps: Vec::new(),
            seconds: 0.0,
            counters: Counters::default(),
            max_codeword_power: 0.0,
            max_target_grad_norm: 0.0,
            metric: None,
        }
    }

    /// One tab-separated `stage epoch loss unix_ms` line per epoch.
    pub fn log_lines(&self) -> String {
        self.losses
            .iter()
            .zip(&self.timestamps)
            .enumerate()
            .map(|(e, (l, t))| format!("{}\t{e}\t{l:.17e}\t{t}\n", self.stage))
            .collect()
    }

    fn end_epoch(&mut self, sum: f64, batches: usize) {
        self.losses.push(sum / batches.max(1) as f64);
        let now = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0);
        self.timestamps.push(now);
    }

    fn observe_codewords(&mut self, tape: &Tape<'_>, vars: &[Var], bandwidth: usize) {
        for &v in vars {
            let t = tape.value(v);
            for r in 0..t.rows() {
                let p = t.row(r).iter().map(|x| x * x).sum::<f64>() / bandwidth as f64;
                self.max_codeword_power = self.max_codeword_power.max(p);
            }
        }
    }

    fn observe_grads(&mut self, grads: &Gradients, target: &[ParamId]) {
        self.max_target_grad_norm = self.max_target_grad_norm.max(grads.norm_over(target));
    }
}

/// `Σ_i mean_batch ‖v_i − v̂_i‖²`.
pub fn loss_mse(tape: &mut Tape<'_>, v: &[Var], v_hat: &[Var]) -> Result<Var> {
    if v.len() != v_hat.len() || v.is_empty() {
        return Err(Error::shape("loss_mse", format!("{} targets vs {} estimates", v.len(), v_hat.len())));
    }
    let mut total: Option<Var> = None;
    for (&a, &b) in v.iter().zip(v_hat) {
        let width = tape.value(a).cols() as f64;
        let m = tape.mse(a, b)?;
        let term = tape.scale(m, width);
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Mean over `logits` of cross-entropy against `labels`, averaged over the
/// given views.
fn mean_ce(tape: &mut Tape<'_>, logits: &[Var], labels: &[usize]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &l in logits {
        let ce = tape.softmax_cross_entropy(l, labels)?;
        total = Some(match total {
            Some(t) => tape.add(t, ce)?,
            None => ce,
        });
    }
    Ok(tape.scale(total.expect("non-empty"), 1.0 / logits.len() as f64))
}

/// `½ (CE(I_θ(z₁), r) + CE(I_θ(z₂), r))`.
pub fn loss_ce(model: &ClScModel, tape: &mut Tape<'_>, z1: Var, z2: Var, labels: &[usize]) -> Result<Var> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= model.arch.num_classes) {
        return Err(Error::config(
            "labels",
            format!("label {bad} outside the {} training identities", model.arch.num_classes),
        ));
    }
    let l1 = model.classify(tape, z1, Head::Main)?;
    let l2 = model.classify(tape, z2, Head::Main)?;
    mean_ce(tape, &[l1, l2], labels)
}

/// Cross-view prediction loss, averaged over the batch:
/// `4 − 2 (cos(q_θ1, p_ξ2) + cos(q_θ2, p_ξ1))`.
pub fn loss_cl(tape: &mut Tape<'_>, q1: Var, q2: Var, p_xi1: Var, p_xi2: Var) -> Result<Var> {
    let c12 = tape.cosine(q1, p_xi2)?;
    let c21 = tape.cosine(q2, p_xi1)?;
    let both = tape.add(c12, c21)?;
    let mean = tape.mean(both);
    let scaled = tape.scale(mean, -2.0);
    let four = tape.constant(Tensor::scalar(4.0));
    tape.add(scaled, four)
}

/// Everything a stage reads besides the model.
#[derive(Clone, Copy)]
pub struct StageContext<'a> {
    pub data: &'a TrainSet,
    pub cfg: &'a TrainConfig,
    pub channel: &'a ChannelConfig,
    pub scheme: Scheme,
}

impl StageContext<'_> {
    fn batches(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.data.len()).collect();
        idx.shuffle(rng);
        idx.chunks(self.cfg.batch_size).map(<[usize]>::to_vec).collect()
    }

    fn check(&self, model: &ClScModel) -> Result<()> {
        if self.channel.bandwidth != model.arch.bandwidth {
            return Err(Error::config(
                "bandwidth",
                format!("channel k = {} but the model encodes k = {}", self.channel.bandwidth, model.arch.bandwidth),
            ));
        }
        if self.channel.kind != model.arch.channel {
            return Err(Error::config("channel", "channel kind differs from the model's decoder layout"));
        }
        if self.data.num_classes != model.arch.num_classes {
            return Err(Error::config("num_classes", "training classes differ from the classifier width"));
        }
        if self.data.is_empty() {
            return Err(Error::config("data", "empty training set"));
        }
        Ok(())
    }
}

/// Feature-encoder outputs for the whole training set, per device.
fn encode_all(model: &ClScModel, data: &TrainSet, devices: &[View]) -> Result<[Option<Tensor>; 2]> {
    let mut out = [None, None];
    let mut tape = Tape::with_params(&model.store).frozen();
    for &d in devices {
        let s = tape.constant(data.view(d).clone());
        let v = model.feature_encode(&mut tape, s, d)?;
        out[d.index()] = Some(tape.value(v).clone());
    }
    Ok(out)
}

fn train_accuracy(model: &ClScModel, data: &TrainSet, view: View) -> Result<f64> {
    let mut tape = Tape::with_params(&model.store).frozen();
    let s = tape.constant(data.view(view).clone());
    let v = model.feature_encode(&mut tape, s, view)?;
    let logits = model.classify(&mut tape, v, Head::aux(view))?;
    let l = tape.value(logits);
    let hits = (0..l.rows())
        .filter(|&r| argmax(l.row(r)) == data.labels[r])
        .count();
    Ok(hits as f64 / l.rows() as f64)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// T1: feature encoders with their auxiliary classifiers on clean views.
pub fn stage_t1(model: &mut ClScModel, ctx: StageContext<'_>) -> Result<StageReport> {
    ctx.check(model)?;
    let start = Instant::now();
    let mut rng = rng::stream(ctx.cfg.seed, Stage::T1.stream());
    let devices = ctx.scheme.devices();
    let params: Vec<ParamId> = devices
        .iter()
        .flat_map(|&d| {
            let mut p = model.feature_params(d);
            p.extend(model.head_params(Head::aux(d)));
            p
        })
        .collect();
    let mut opt = Adam::new(ctx.cfg.adam(ctx.cfg.lr), params.clone());
    let mut report = StageReport::new(Stage::T1);
    let target = model.target_params();
    for _epoch in 0..ctx.cfg.epochs_t1 {
        let batches = ctx.batches(&mut rng);
        let mut sum = 0.0;
        for idx in &batches {
            let labels: Vec<usize> = idx.iter().map(|&i| ctx.data.labels[i]).collect();
            let grads = {
                let mut tape = Tape::with_params(&model.store).train_only(params.iter().copied());
                let mut logits = Vec::new();
                for &d in devices {
                    let s = tape.constant(ctx.data.view(d).select_rows(idx));
                    let v = model.feature_encode(&mut tape, s, d)?;
                    logits.push(model.classify(&mut tape, v, Head::aux(d))?);
                }
                let loss = mean_ce(&mut tape, &logits, &labels)?;
                sum += tape.value(loss).item();
                tape.backward(loss)?
            };
            report.observe_grads(&grads, &target);
            opt.step(&mut model.store, &grads);
            report.counters.stage_steps += 1;
        }
        report.end_epoch(sum, batches.len());
    }
    report.metric = Some(("aux_train_accuracy", train_accuracy(model, ctx.data, View::One)?));
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// T2: JSCC autoencoders through the channel; feature encoders frozen.
pub fn stage_t2(model: &mut ClScModel, ctx: StageContext<'_>) -> Result<StageReport> {
    ctx.check(model)?;
    let start = Instant::now();
    let mut rng = rng::stream(ctx.cfg.seed, Stage::T2.stream());
    let devices = ctx.scheme.devices();
    let features = encode_all(model, ctx.data, devices)?;
    let params: Vec<ParamId> = devices.iter().flat_map(|&d| model.jscc_params(d)).collect();
    let mut opt = Adam::new(ctx.cfg.adam(ctx.cfg.lr), params.clone());
    let mut report = StageReport::new(Stage::T2);
    let target = model.target_params();
    for _epoch in 0..ctx.cfg.epochs_t2 {
        let batches = ctx.batches(&mut rng);
        let mut sum = 0.0;
        for idx in &batches {
            let real = Realization::sample(ctx.channel, idx.len(), &mut rng);
            let grads = {
                let mut tape = Tape::with_params(&model.store).train_only(params.iter().copied());
                let v: Vec<Var> = devices
                    .iter()
                    .map(|&d| tape.constant(features[d.index()].as_ref().expect("encoded").select_rows(idx)))
                    .collect();
                let link = model.link_forward(&mut tape, v[0], v.get(1).copied(), &real)?;
                report.observe_codewords(&tape, &[link.x1, link.x2], model.arch.bandwidth);
                let v_hat: Vec<Var> = devices.iter().filter_map(|&d| link.v_hat(d)).collect();
                let loss = loss_mse(&mut tape, &v, &v_hat)?;
                sum += tape.value(loss).item();
                tape.backward(loss)?
            };
            report.observe_grads(&grads, &target);
            opt.step(&mut model.store, &grads);
            report.counters.stage_steps += 1;
        }
        report.end_epoch(sum, batches.len());
    }
    if let Some(&last) = report.losses.last() {
        report.metric = Some(("final_mse", last));
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Decoded features `v̂` for the rows `idx`, through a fresh channel draw
/// on a frozen tape.
fn decode_frozen(
    model: &ClScModel,
    features: &[Option<Tensor>; 2],
    idx: &[usize],
    devices: &[View],
    real: &Realization,
    report: &mut StageReport,
) -> Result<Vec<Tensor>> {
    let mut tape = Tape::with_params(&model.store).frozen();
    let v: Vec<Var> = devices
        .iter()
        .map(|&d| tape.constant(features[d.index()].as_ref().expect("encoded").select_rows(idx)))
        .collect();
    let link = model.link_forward(&mut tape, v[0], v.get(1).copied(), real)?;
    report.observe_codewords(&tape, &[link.x1, link.x2], model.arch.bandwidth);
    Ok(devices
        .iter()
        .filter_map(|&d| link.v_hat(d))
        .map(|h| tape.value(h).clone())
        .collect())
}

/// A fixed batch of decoded training features for monitoring `L_cl`.
fn probe_batch(model: &ClScModel, ctx: &StageContext<'_>) -> Result<[Tensor; 2]> {
    let n = ctx.data.len().min(256);
    let idx: Vec<usize> = (0..n).collect();
    let features = encode_all(model, ctx.data, &View::BOTH)?;
    let mut rng = rng::stream(ctx.cfg.seed, streams::PROBE);
    let real = Realization::sample(ctx.channel, n, &mut rng);
    let mut scratch = StageReport::new(Stage::T3);
    let mut v = decode_frozen(model, &features, &idx, &View::BOTH, &real, &mut scratch)?;
    let v2 = v.pop().expect("two views");
    let v1 = v.pop().expect("two views");
    Ok([v1, v2])
}

/// `L_cl` of the current model on fixed decoded features.
pub fn probe_cl(model: &ClScModel, v_hat: &[Tensor; 2]) -> Result<f64> {
    let mut tape = Tape::with_params(&model.store).frozen();
    let a = tape.constant(v_hat[0].clone());
    let b = tape.constant(v_hat[1].clone());
    let (o1, o2) = (model.cl_forward_online(&mut tape, a)?, model.cl_forward_online(&mut tape, b)?);
    let (t1, t2) = (model.cl_forward_target(&mut tape, a)?, model.cl_forward_target(&mut tape, b)?);
    let l = loss_cl(&mut tape, o1.q, o2.q, t1.p, t2.p)?;
    Ok(tape.value(l).item())
}

/// Builds `L_cl` on `tape` for decoded features `v_hat` (both views).
fn cross_view_loss(model: &ClScModel, tape: &mut Tape<'_>, v_hat: [Var; 2], online: Option<[Var; 2]>) -> Result<Var> {
    let (q1, q2) = match online {
        Some([z1, z2]) => {
            let p1 = model.online.projector.forward(tape, z1)?;
            let p2 = model.online.projector.forward(tape, z2)?;
            (model.predictor.forward(tape, p1)?, model.predictor.forward(tape, p2)?)
        }
        None => {
            let o1 = model.cl_forward_online(tape, v_hat[0])?;
            let o2 = model.cl_forward_online(tape, v_hat[1])?;
            (o1.q, o2.q)
        }
    };
    let t1 = model.cl_forward_target(tape, v_hat[0])?;
    let t2 = model.cl_forward_target(tape, v_hat[1])?;
    loss_cl(tape, q1, q2, t1.p, t2.p)
}

/// T3. For the contrastive scheme this is the cross-view alternation;
/// for the baselines (no contrastive module) the auxiliary heads are fit
/// to decoded features with `Opt₁` only.
pub fn stage_t3(model: &mut ClScModel, ctx: StageContext<'_>) -> Result<StageReport> {
    ctx.check(model)?;
    let start = Instant::now();
    let mut rng = rng::stream(ctx.cfg.seed, Stage::T3.stream());
    let devices = ctx.scheme.devices();
    let features = encode_all(model, ctx.data, devices)?;
    let contrastive = ctx.scheme.uses_contrastive();
    let theta: Vec<ParamId> = if contrastive {
        model.sync_target();
        model.online_params()
    } else {
        devices.iter().flat_map(|&d| model.head_params(Head::aux(d))).collect()
    };
    let mut opt1 = Adam::new(ctx.cfg.adam(ctx.cfg.lr_opt1), theta.clone());
    let mut opt2 = Adam::new(ctx.cfg.adam(ctx.cfg.lr_opt2), theta.clone());
    let target = model.target_params();
    let mut report = StageReport::new(Stage::T3);
    let probe = if contrastive { Some(probe_batch(model, &ctx)?) } else { None };
    let probe_start = match &probe {
        Some(p) => Some(probe_cl(model, p)?),
        None => None,
    };

    for epoch in 0..ctx.cfg.epochs_t3 {
        let batches = ctx.batches(&mut rng);
        let mut sum = 0.0;
        let mut cl_sum = 0.0;
        let cl_epoch = contrastive && epoch % 2 == 0;
        for idx in &batches {
            let labels: Vec<usize> = idx.iter().map(|&i| ctx.data.labels[i]).collect();
            let real = Realization::sample(ctx.channel, idx.len(), &mut rng);
            let v_hat = decode_frozen(model, &features, idx, devices, &real, &mut report)?;

            // Opt₁ on L_ce
            let grads = {
                let mut tape = Tape::with_params(&model.store).train_only(theta.iter().copied());
                let vars: Vec<Var> = v_hat.iter().map(|v| tape.constant(v.clone())).collect();
                let loss = if contrastive {
                    let z1 = model.contrastive_features(&mut tape, vars[0])?;
                    let z2 = model.contrastive_features(&mut tape, vars[1])?;
                    loss_ce(model, &mut tape, z1, z2, &labels)?
                } else {
                    let logits = devices
                        .iter()
                        .zip(&vars)
                        .map(|(&d, &v)| model.classify(&mut tape, v, Head::aux(d)))
                        .collect::<Result<Vec<_>>>()?;
                    mean_ce(&mut tape, &logits, &labels)?
                };
                sum += tape.value(loss).item();
                tape.backward(loss)?
            };
            report.observe_grads(&grads, &target);
            opt1.step(&mut model.store, &grads);
            report.counters.opt1_steps += 1;
            mark(&mut report.counters.opt1_epochs, epoch);

            if cl_epoch {
                // Opt₂ on L_cl, then ξ ← τξ + (1−τ)θ
                let grads = {
                    let mut tape = Tape::with_params(&model.store).train_only(theta.iter().copied());
                    let a = tape.constant(v_hat[0].clone());
                    let b = tape.constant(v_hat[1].clone());
                    let loss = cross_view_loss(model, &mut tape, [a, b], None)?;
                    cl_sum += tape.value(loss).item();
                    tape.backward(loss)?
                };
                report.observe_grads(&grads, &target);
                opt2.step(&mut model.store, &grads);
                report.counters.opt2_steps += 1;
                mark(&mut report.counters.opt2_epochs, epoch);
                model.ema_update(ctx.cfg.tau)?;
                report.counters.ema_updates += 1;
                mark(&mut report.counters.ema_epochs, epoch);
            }
        }
        if cl_epoch {
            report.cl_losses.push((epoch, cl_sum / batches.len().max(1) as f64));
        }
        report.end_epoch(sum, batches.len());
    }
    if let (Some(p), Some(s)) = (&probe, probe_start) {
        let end = probe_cl(model, p)?;
        report.metric = Some(("probe_cl_drop", s - end));
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// T4: joint fine-tuning through the channel. Objective is the auxiliary
/// classification loss on `v̂` plus `λ_mse · L_mse`; the contrastive scheme
/// adds `L_ce` on `z`, and `L_cl` on even epochs, each step of which is
/// followed by an EMA update.
pub fn stage_t4(model: &mut ClScModel, ctx: StageContext<'_>) -> Result<StageReport> {
    stage_t4_with(model, ctx, true)
}

/// [`stage_t4`] with the contrastive term optionally disabled.
pub fn stage_t4_with(model: &mut ClScModel, ctx: StageContext<'_>, with_cl: bool) -> Result<StageReport> {
    ctx.check(model)?;
    let start = Instant::now();
    let mut rng = rng::stream(ctx.cfg.seed, Stage::T4.stream());
    let devices = ctx.scheme.devices();
    let contrastive = ctx.scheme.uses_contrastive();
    let params: Vec<ParamId> = if contrastive {
        model.trainable_params()
    } else {
        devices
            .iter()
            .flat_map(|&d| {
                let mut p = model.feature_params(d);
                p.extend(model.jscc_params(d));
                p.extend(model.head_params(Head::aux(d)));
                p
            })
            .collect()
    };
    let mut opt = Adam::new(ctx.cfg.adam(ctx.cfg.lr), params.clone());
    let target = model.target_params();
    let mut report = StageReport::new(Stage::T4);
    for epoch in 0..ctx.cfg.epochs_t4 {
        let batches = ctx.batches(&mut rng);
        let cl_epoch = contrastive && with_cl && epoch % 2 == 0;
        let (mut sum, mut cl_sum) = (0.0, 0.0);
        for idx in &batches {
            let labels: Vec<usize> = idx.iter().map(|&i| ctx.data.labels[i]).collect();
            let real = Realization::sample(ctx.channel, idx.len(), &mut rng);
            let grads = {
                let mut tape = Tape::with_params(&model.store).train_only(params.iter().copied());
                let mut v = Vec::new();
                for &d in devices {
                    let s = tape.constant(ctx.data.view(d).select_rows(idx));
                    v.push(model.feature_encode(&mut tape, s, d)?);
                }
                let link = model.link_forward(&mut tape, v[0], v.get(1).copied(), &real)?;
                report.observe_codewords(&tape, &[link.x1, link.x2], model.arch.bandwidth);
                let v_hat: Vec<Var> = devices.iter().filter_map(|&d| link.v_hat(d)).collect();
                let logits = devices
                    .iter()
                    .zip(&v_hat)
                    .map(|(&d, &h)| model.classify(&mut tape, h, Head::aux(d)))
                    .collect::<Result<Vec<_>>>()?;
                let mut loss = mean_ce(&mut tape, &logits, &labels)?;
                if contrastive {
                    let z1 = model.contrastive_features(&mut tape, v_hat[0])?;
                    let z2 = model.contrastive_features(&mut tape, v_hat[1])?;
                    let ce = loss_ce(model, &mut tape, z1, z2, &labels)?;
                    loss = tape.add(loss, ce)?;
                    if cl_epoch {
                        let cl = cross_view_loss(model, &mut tape, [v_hat[0], v_hat[1]], Some([z1, z2]))?;
                        cl_sum += tape.value(cl).item();
                        loss = tape.add(loss, cl)?;
                    }
                }
                if ctx.cfg.lambda_mse > 0.0 {
                    let mse = loss_mse(&mut tape, &v, &v_hat)?;
                    let weighted = tape.scale(mse, ctx.cfg.lambda_mse);
                    loss = tape.add(loss, weighted)?;
                }
                sum += tape.value(loss).item();
                tape.backward(loss)?
            };
            report.observe_grads(&grads, &target);
            opt.step(&mut model.store, &grads);
            report.counters.stage_steps += 1;
            if cl_epoch {
                model.ema_update(ctx.cfg.tau)?;
                report.counters.ema_updates += 1;
                mark(&mut report.counters.ema_epochs, epoch);
            }
        }
        if cl_epoch {
            report.cl_losses.push((epoch, cl_sum / batches.len().max(1) as f64));
        }
        report.end_epoch(sum, batches.len());
    }
    if let Some(&last) = report.losses.last() {
        report.metric = Some(("final_loss", last));
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Runs T1 through T4 in order.
pub fn train(model: &mut ClScModel, ctx: StageContext<'_>) -> Result<Vec<StageReport>> {
    ctx.cfg.validate()?;
    Ok(vec![
        stage_t1(model, ctx)?,
        stage_t2(model, ctx)?,
        stage_t3(model, ctx)?,
        stage_t4(model, ctx)?,
    ])
}

/// Mean relative reconstruction error `‖v − v̂‖ / ‖v‖` over `pairs` rows
/// of observations, each through its own channel draw.
pub fn reconstruction_error<R: Rng + ?Sized>(
    model: &ClScModel,
    s1: &Tensor,
    s2: &Tensor,
    channel: &ChannelConfig,
    rng: &mut R,
) -> Result<f64> {
    let real = Realization::sample(channel, s1.rows(), rng);
    let mut tape = Tape::with_params(&model.store).frozen();
    let (a, b) = (tape.constant(s1.clone()), tape.constant(s2.clone()));
    let v1 = model.feature_encode(&mut tape, a, View::One)?;
    let v2 = model.feature_encode(&mut tape, b, View::Two)?;
    let link = model.link_forward(&mut tape, v1, Some(v2), &real)?;
    let mut total = 0.0;
    let mut count = 0;
    for (v, h) in [(v1, link.v_hat1), (v2, link.v_hat2.expect("two devices"))] {
        let (tv, th) = (tape.value(v), tape.value(h));
        for r in 0..tv.rows() {
            let num: f64 = tv.row(r).iter().zip(th.row(r)).map(|(a, b)| (a - b) * (a - b)).sum();
            let den: f64 = tv.row(r).iter().map(|a| a * a).sum();
            total += (num / den.max(1e-300)).sqrt();
            count += 1;
        }
    }
    Ok(total / count as f64)
}
