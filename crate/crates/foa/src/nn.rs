//! Fully connected building blocks and the Adam optimizer.

use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Weights `N(0, gain / fan_in)`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let std = (gain / fan_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::randn(&[fan_in, fan_out], std, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let h = tape.matmul(x, w)?;
        tape.add_bias(h, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Per-sample normalization with learned scale and shift.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(&[width], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Widths `[in, h_1, .., h_m, out]`; every hidden layer is
/// linear → (normalization) → ReLU and the output layer is linear.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub norm: bool,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, norm: bool) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::config("mlp.widths", "need at least one layer"));
        }
        if widths.contains(&0) {
            return Err(Error::config("mlp.widths", "widths must be positive"));
        }
        Ok(Self { widths, norm })
    }

    pub fn input(&self) -> usize {
        self.widths[0]
    }

    pub fn output(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }
}

#[derive(Clone, Debug)]
struct Block {
    linear: Linear,
    norm: Option<Norm>,
    relu: bool,
}

#[derive(Clone, Debug)]
pub struct Mlp {
    spec: MlpSpec,
    blocks: Vec<Block>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, spec: MlpSpec, rng: &mut R) -> Self {
        let layers = spec.widths.len() - 1;
        let blocks = spec
            .widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let hidden = i + 1 < layers;
                let gain = if hidden { 2.0 } else { 1.0 };
                Block {
                    linear: Linear::new(store, &format!("{name}.{i}"), w[0], w[1], gain, rng),
                    norm: (hidden && spec.norm).then(|| Norm::new(store, &format!("{name}.{i}.norm"), w[1])),
                    relu: hidden,
                }
            })
            .collect();
        Self { spec, blocks }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let width = tape.value(x).cols();
        if width != self.spec.input() {
            return Err(Error::shape(
                "mlp",
                format!("input width {width}, expected {}", self.spec.input()),
            ));
        }
        let mut h = x;
        for b in &self.blocks {
            h = b.linear.forward(tape, h)?;
            if let Some(n) = &b.norm {
                h = n.forward(tape, h)?;
            }
            if b.relu {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Parameters in construction order; two MLPs with the same spec list
    /// matching parameters at matching positions.
    pub fn params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend(b.linear.params());
            if let Some(n) = &b.norm {
                out.push(n.gamma);
                out.push(n.beta);
            }
        }
        out
    }
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over a fixed parameter set, with its own moment state.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    params: Vec<ParamId>,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: Vec<ParamId>) -> Self {
        Self {
            cfg,
            params,
            moments: HashMap::new(),
            t: 0,
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// Number of completed steps.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for &id in &self.params {
            let Some(g) = grads.param(id) else { continue };
            let value = store.get_mut(id);
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((p, &g), m), v) in value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_shapes_and_param_layout() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = MlpSpec::new(vec![5, 7, 7, 3], true).unwrap();
        let mlp = Mlp::new(&mut store, "m", spec, &mut rng);
        // 3 linear (w, b) + 2 norms (gamma, beta)
        assert_eq!(mlp.params().len(), 10);
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(Tensor::zeros(&[4, 5]));
        let y = mlp.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[4, 3]);
        let bad = tape.constant(Tensor::zeros(&[4, 6]));
        assert!(mlp.forward(&mut tape, bad).is_err());
    }

    #[test]
    fn empty_spec_is_rejected() {
        assert!(MlpSpec::new(vec![3], false).is_err());
        assert!(MlpSpec::new(vec![3, 0, 2], false).is_err());
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::vector(vec![3.0, -2.0]));
        let mut opt = Adam::new(AdamConfig { lr: 0.05, ..Default::default() }, vec![p]);
        for _ in 0..500 {
            let grads = {
                let mut tape = Tape::with_params(&store);
                let v = tape.param(p);
                let sq = tape.mul(v, v).unwrap();
                let loss = tape.sum(sq);
                tape.backward(loss).unwrap()
            };
            opt.step(&mut store, &grads);
        }
        assert!(store.get(p).data().iter().all(|v| v.abs() < 1e-2));
        assert_eq!(opt.steps(), 500);
    }
}
