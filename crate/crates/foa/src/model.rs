//! Trainable networks of the two-device pipeline.
//!
//! Transmitter `i`: feature encoder `s_i → v_i`, then JSCC encoder
//! `v_i → x_i` with the power projection as its last layer.
//! Receiver: JSCC decoders `y → v̂_i` (both see the same `y`), the online
//! contrastive network (decoder `f_θ`, projector `p_θ`, predictor `q_θ`),
//! the target network (`f_ξ`, `p_ξ`) and the classifier heads.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::channel::{power_normalize_var, transmit_var, ChannelKind, Realization};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp, MlpSpec};
use crate::params::{ParamId, ParamStore};
use crate::rng::{self, streams};
use crate::source::View;
use crate::tensor::Tensor;

/// Every dimension needed to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub obs_dim: usize,
    pub feature_dim: usize,
    pub bandwidth: usize,
    pub z_dim: usize,
    pub proj_dim: usize,
    pub hidden: usize,
    pub num_classes: usize,
    pub channel: ChannelKind,
}

impl Architecture {
    /// Desk-scale defaults for a given bandwidth and class count.
    pub fn desk(bandwidth: usize, num_classes: usize, channel: ChannelKind) -> Self {
        Self {
            obs_dim: 64,
            feature_dim: 32,
            bandwidth,
            z_dim: 32,
            proj_dim: 16,
            hidden: 64,
            num_classes,
            channel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("obs_dim", self.obs_dim),
            ("feature_dim", self.feature_dim),
            ("bandwidth", self.bandwidth),
            ("z_dim", self.z_dim),
            ("proj_dim", self.proj_dim),
            ("hidden", self.hidden),
        ];
        if let Some((k, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(*k, "must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "need at least 2 classes"));
        }
        Ok(())
    }

    /// Width of the decoder input: `y` plus, under fading, the two gains.
    pub fn decoder_input(&self) -> usize {
        match self.channel {
            ChannelKind::Awgn => 2 * self.bandwidth,
            ChannelKind::Rayleigh => 2 * self.bandwidth + 4,
        }
    }
}

/// Classifier selector.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Head {
    /// `I_θ` over contrastive features `z`.
    Main,
    /// Auxiliary classifier over device-1 features.
    Aux1,
    /// Auxiliary classifier over device-2 features.
    Aux2,
}

impl Head {
    pub fn aux(view: View) -> Head {
        match view {
            View::One => Head::Aux1,
            View::Two => Head::Aux2,
        }
    }
}

impl FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "main" => Ok(Head::Main),
            "aux1" => Ok(Head::Aux1),
            "aux2" => Ok(Head::Aux2),
            other => Err(Error::config("classifier", format!("unknown classifier `{other}`"))),
        }
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Head::Main => "main",
            Head::Aux1 => "aux1",
            Head::Aux2 => "aux2",
        })
    }
}

/// Decoder `f` and projector `p` of one contrastive branch.
#[derive(Clone, Debug)]
pub struct ContrastiveBranch {
    pub decoder: Mlp,
    pub projector: Mlp,
}

impl ContrastiveBranch {
    fn new<R: rand::Rng + ?Sized>(store: &mut ParamStore, prefix: &str, arch: &Architecture, rng: &mut R) -> Result<Self> {
        Ok(Self {
            decoder: Mlp::new(
                store,
                &format!("{prefix}.decoder"),
                MlpSpec::new(vec![arch.feature_dim, arch.hidden, arch.hidden, arch.z_dim], true)?,
                rng,
            ),
            projector: Mlp::new(
                store,
                &format!("{prefix}.projector"),
                MlpSpec::new(vec![arch.z_dim, arch.hidden, arch.proj_dim], true)?,
                rng,
            ),
        })
    }

    pub fn embed(&self, tape: &mut Tape<'_>, v_hat: Var) -> Result<Var> {
        self.decoder.forward(tape, v_hat)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.decoder.params();
        p.extend(self.projector.params());
        p
    }
}

/// Online contrastive outputs for one view.
#[derive(Copy, Clone, Debug)]
pub struct OnlineOut {
    pub z: Var,
    pub p: Var,
    pub q: Var,
}

/// Target outputs for one view, detached from the tape.
#[derive(Copy, Clone, Debug)]
pub struct TargetOut {
    pub z: Var,
    pub p: Var,
}

/// Everything the channel path produced for one batch.
#[derive(Copy, Clone, Debug)]
pub struct LinkOut {
    pub x1: Var,
    pub x2: Var,
    pub y: Var,
    pub v_hat1: Var,
    pub v_hat2: Option<Var>,
}

impl LinkOut {
    pub fn v_hat(&self, view: View) -> Option<Var> {
        match view {
            View::One => Some(self.v_hat1),
            View::Two => self.v_hat2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClScModel {
    pub arch: Architecture,
    pub store: ParamStore,
    pub feature_encoders: [Mlp; 2],
    pub jscc_encoders: [Mlp; 2],
    pub jscc_decoders: [Mlp; 2],
    pub online: ContrastiveBranch,
    pub predictor: Mlp,
    pub target: ContrastiveBranch,
    pub main_head: Linear,
    pub aux_heads: [Linear; 2],
}

impl ClScModel {
    /// Fresh model; the target branch starts as a copy of the online one.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::stream(seed, streams::MODEL_INIT);
        let mut store = ParamStore::new();
        let a = &arch;
        let h = a.hidden;
        let mut mlp = |store: &mut ParamStore, name: &str, widths: Vec<usize>| -> Result<Mlp> {
            Ok(Mlp::new(store, name, MlpSpec::new(widths, true)?, &mut rng))
        };
        let feature_encoders = [
            mlp(&mut store, "fe1", vec![a.obs_dim, h, h, a.feature_dim])?,
            mlp(&mut store, "fe2", vec![a.obs_dim, h, h, a.feature_dim])?,
        ];
        let jscc_encoders = [
            mlp(&mut store, "enc1", vec![a.feature_dim, h, h, 2 * a.bandwidth])?,
            mlp(&mut store, "enc2", vec![a.feature_dim, h, h, 2 * a.bandwidth])?,
        ];
        let jscc_decoders = [
            mlp(&mut store, "dec1", vec![a.decoder_input(), h, h, a.feature_dim])?,
            mlp(&mut store, "dec2", vec![a.decoder_input(), h, h, a.feature_dim])?,
        ];
        let predictor = mlp(&mut store, "online.predictor", vec![a.proj_dim, a.proj_dim, a.proj_dim])?;
        let online = ContrastiveBranch::new(&mut store, "online", a, &mut rng)?;
        let target = ContrastiveBranch::new(&mut store, "target", a, &mut rng)?;
        let main_head = Linear::new(&mut store, "head.main", a.z_dim, a.num_classes, 1.0, &mut rng);
        let aux_heads = [
            Linear::new(&mut store, "head.aux1", a.feature_dim, a.num_classes, 1.0, &mut rng),
            Linear::new(&mut store, "head.aux2", a.feature_dim, a.num_classes, 1.0, &mut rng),
        ];
        let mut model = Self {
            arch,
            store,
            feature_encoders,
            jscc_encoders,
            jscc_decoders,
            online,
            predictor,
            target,
            main_head,
            aux_heads,
        };
        model.sync_target();
        Ok(model)
    }

    /// Input width check shared by the entry points.
    fn expect_width(&self, tape: &Tape<'_>, x: Var, width: usize, op: &'static str) -> Result<()> {
        let got = tape.value(x).cols();
        if got != width {
            return Err(Error::shape(op, format!("input width {got}, expected {width}")));
        }
        Ok(())
    }

    /// `v_i = f_e_i(s_i)`.
    pub fn feature_encode(&self, tape: &mut Tape<'_>, s: Var, view: View) -> Result<Var> {
        self.expect_width(tape, s, self.arch.obs_dim, "feature_encode")?;
        self.feature_encoders[view.index()].forward(tape, s)
    }

    /// `x_i = E_i(v_i)`, projected onto the power budget.
    pub fn jscc_encode(&self, tape: &mut Tape<'_>, v: Var, view: View) -> Result<Var> {
        self.expect_width(tape, v, self.arch.feature_dim, "jscc_encode")?;
        let raw = self.jscc_encoders[view.index()].forward(tape, v)?;
        Ok(power_normalize_var(tape, raw, self.arch.bandwidth))
    }

    /// `v̂_i = D_i(y)`; under fading the decoder also sees `(h₁, h₂)`.
    pub fn jscc_decode(&self, tape: &mut Tape<'_>, y: Var, gains: &Tensor, view: View) -> Result<Var> {
        self.expect_width(tape, y, 2 * self.arch.bandwidth, "jscc_decode")?;
        let input = match self.arch.channel {
            ChannelKind::Awgn => y,
            ChannelKind::Rayleigh => {
                let g = tape.constant(gains.clone());
                tape.concat(y, g)?
            }
        };
        self.jscc_decoders[view.index()].forward(tape, input)
    }

    /// Encodes `v1` (and `v2`, if device 2 transmits), superposes over the
    /// channel and decodes. With `v2 = None` device 2 sends `x₂ = 0`.
    pub fn link_forward(&self, tape: &mut Tape<'_>, v1: Var, v2: Option<Var>, real: &Realization) -> Result<LinkOut> {
        let x1 = self.jscc_encode(tape, v1, View::One)?;
        let x2 = match v2 {
            Some(v2) => self.jscc_encode(tape, v2, View::Two)?,
            None => {
                let shape = tape.value(x1).shape().to_vec();
                tape.constant(Tensor::zeros(&shape))
            }
        };
        let y = transmit_var(tape, x1, x2, real)?;
        let gains = real.gain_features();
        let v_hat1 = self.jscc_decode(tape, y, &gains, View::One)?;
        let v_hat2 = match v2 {
            Some(_) => Some(self.jscc_decode(tape, y, &gains, View::Two)?),
            None => None,
        };
        Ok(LinkOut {
            x1,
            x2,
            y,
            v_hat1,
            v_hat2,
        })
    }

    /// `z = f_θ(v̂)`, `p = p_θ(z)`, `q = q_θ(p)`, all differentiable.
    pub fn cl_forward_online(&self, tape: &mut Tape<'_>, v_hat: Var) -> Result<OnlineOut> {
        let z = self.contrastive_features(tape, v_hat)?;
        let p = self.online.projector.forward(tape, z)?;
        let q = self.predictor.forward(tape, p)?;
        Ok(OnlineOut { z, p, q })
    }

    /// `z = f_θ(v̂)` only: the retrieval embedding.
    pub fn contrastive_features(&self, tape: &mut Tape<'_>, v_hat: Var) -> Result<Var> {
        self.expect_width(tape, v_hat, self.arch.feature_dim, "cl_forward_online")?;
        self.online.embed(tape, v_hat)
    }

    /// `z_ξ = f_ξ(v̂)`, `p_ξ = p_ξ(z_ξ)` evaluated on a frozen side tape;
    /// the results enter `tape` as constants.
    pub fn cl_forward_target(&self, tape: &mut Tape<'_>, v_hat: Var) -> Result<TargetOut> {
        self.expect_width(tape, v_hat, self.arch.feature_dim, "cl_forward_target")?;
        let (z, p) = {
            let mut side = Tape::with_params(&self.store).frozen();
            let input = side.constant(tape.value(v_hat).clone());
            let z = self.target.embed(&mut side, input)?;
            let p = self.target.projector.forward(&mut side, z)?;
            (side.value(z).clone(), side.value(p).clone())
        };
        Ok(TargetOut {
            z: tape.constant(z),
            p: tape.constant(p),
        })
    }

    pub fn classify(&self, tape: &mut Tape<'_>, z: Var, head: Head) -> Result<Var> {
        let linear = match head {
            Head::Main => &self.main_head,
            Head::Aux1 => &self.aux_heads[0],
            Head::Aux2 => &self.aux_heads[1],
        };
        let got = tape.value(z).cols();
        if got != linear.fan_in {
            return Err(Error::shape(
                "classify",
                format!("{head} classifier takes width {}, got {got}", linear.fan_in),
            ));
        }
        linear.forward(tape, z)
    }

    /// `ξ ← τ ξ + (1 − τ) θ` over the matched online/target parameters.
    pub fn ema_update(&mut self, tau: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::config("tau", format!("{tau} is outside [0, 1]")));
        }
        for (t, o) in self.target.params().into_iter().zip(self.online.params()) {
            let online = self.store.get(o).data().to_vec();
            for (xi, th) in self.store.get_mut(t).data_mut().iter_mut().zip(online) {
                *xi = tau * *xi + (1.0 - tau) * th;
            }
        }
        Ok(())
    }

    /// `ξ := θ`.
    pub fn sync_target(&mut self) {
        self.ema_update(0.0).expect("tau = 0 is valid");
    }

    pub fn feature_params(&self, view: View) -> Vec<ParamId> {
        self.feature_encoders[view.index()].params()
    }

    pub fn jscc_params(&self, view: View) -> Vec<ParamId> {
        let mut p = self.jscc_encoders[view.index()].params();
        p.extend(self.jscc_decoders[view.index()].params());
        p
    }

    pub fn head_params(&self, head: Head) -> Vec<ParamId> {
        match head {
            Head::Main => self.main_head.params(),
            Head::Aux1 => self.aux_heads[0].params(),
            Head::Aux2 => self.aux_heads[1].params(),
        }
    }

    /// θ: online decoder, projector, predictor and main classifier.
    pub fn online_params(&self) -> Vec<ParamId> {
        let mut p = self.online.params();
        p.extend(self.predictor.params());
        p.extend(self.main_head.params());
        p
    }

    /// ξ.
    pub fn target_params(&self) -> Vec<ParamId> {
        self.target.params()
    }

    /// Everything except ξ.
    pub fn trainable_params(&self) -> Vec<ParamId> {
        let target: std::collections::HashSet<ParamId> = self.target_params().into_iter().collect();
        self.store.ids().filter(|id| !target.contains(id)).collect()
    }

    /// Euclidean distance between ξ and the matched θ.
    pub fn target_gap(&self) -> f64 {
        self.target
            .params()
            .into_iter()
            .zip(self.online.params())
            .map(|(t, o)| {
                let (a, b) = (self.store.get(t), self.store.get(o));
                a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }
}
