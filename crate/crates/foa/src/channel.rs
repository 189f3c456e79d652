//! Two-transmitter superposition channel: `y = h₁x₁ + h₂x₂ + w`.
//!
//! A codeword of `k` complex symbols is stored as `2k` reals, real parts
//! first. Each transmitter is held to `(1/k)‖x‖² ≤ 1`. Noise is circular
//! complex Gaussian with total per-symbol variance `σ_w² = 10^(-μ/10)`,
//! so each real component carries `σ_w²/2`.
//!
//! Training code works on whole batches through [`transmit_var`], where
//! each row is an independent transmission with its own gains and noise
//! held in a [`Realization`]. The single-codeword API ([`ComplexSignal`],
//! [`transmit`]) shares the same arithmetic.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{norm, Tensor};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Awgn,
    Rayleigh,
}

impl fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChannelKind::Awgn => "awgn",
            ChannelKind::Rayleigh => "rayleigh",
        })
    }
}

impl FromStr for ChannelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "awgn" => Ok(ChannelKind::Awgn),
            "rayleigh" | "fading" => Ok(ChannelKind::Rayleigh),
            other => Err(Error::config("channel", format!("unknown channel kind `{other}`"))),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub kind: ChannelKind,
    pub snr_db: f64,
    pub bandwidth: usize,
}

impl ChannelConfig {
    pub fn new(kind: ChannelKind, snr_db: f64, bandwidth: usize) -> Result<Self> {
        if bandwidth == 0 {
            return Err(Error::config("bandwidth", "must be at least 1"));
        }
        if !snr_db.is_finite() {
            return Err(Error::config("snr_db", "must be finite"));
        }
        Ok(Self {
            kind,
            snr_db,
            bandwidth,
        })
    }

    pub fn noise_variance(&self) -> f64 {
        noise_sigma(self.snr_db)
    }

    /// Real values per codeword.
    pub fn codeword_len(&self) -> usize {
        2 * self.bandwidth
    }
}

/// Complex noise variance `σ_w²` for an average SNR of `snr_db`.
pub fn noise_sigma(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

/// Complex channel gain.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Gain {
    pub re: f64,
    pub im: f64,
}

impl Gain {
    pub const UNIT: Gain = Gain { re: 1.0, im: 0.0 };

    pub fn power(self) -> f64 {
        self.re * self.re + self.im * self.im
    }

    fn pair(self) -> [f64; 2] {
        [self.re, self.im]
    }
}

/// Draws `h ~ CN(0, 1)`: `(a + bi)/√2` with `a, b` standard normal.
pub fn sample_fading<R: Rng + ?Sized>(rng: &mut R) -> Gain {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    Gain {
        re: s * rng.sample::<f64, _>(StandardNormal),
        im: s * rng.sample::<f64, _>(StandardNormal),
    }
}

fn sample_gain<R: Rng + ?Sized>(kind: ChannelKind, rng: &mut R) -> Gain {
    match kind {
        ChannelKind::Awgn => Gain::UNIT,
        ChannelKind::Rayleigh => sample_fading(rng),
    }
}

/// `k` complex symbols as `[re_1..re_k, im_1..im_k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSignal {
    data: Vec<f64>,
}

impl ComplexSignal {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() || !data.len().is_multiple_of(2) {
            return Err(Error::shape(
                "complex_signal",
                format!("need an even, non-zero length, got {}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::shape("complex_signal", "non-finite entry"));
        }
        Ok(Self { data })
    }

    pub fn zeros(bandwidth: usize) -> Self {
        Self {
            data: vec![0.0; 2 * bandwidth],
        }
    }

    pub fn bandwidth(&self) -> usize {
        self.data.len() / 2
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn real(&self) -> &[f64] {
        &self.data[..self.bandwidth()]
    }

    pub fn imag(&self) -> &[f64] {
        &self.data[self.bandwidth()..]
    }

    /// Average power per complex symbol, `(1/k)‖x‖²`.
    pub fn power(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>() / self.bandwidth() as f64
    }

    /// Projects onto the power budget: `x · min(1, √k / ‖x‖)`.
    pub fn power_normalize(&self) -> Self {
        let n = norm(&self.data);
        let radius = (self.bandwidth() as f64).sqrt();
        let factor = if n > radius { radius / n } else { 1.0 };
        Self {
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    fn scaled_by(&self, h: Gain) -> Vec<f64> {
        let k = self.bandwidth();
        let (re, im) = self.data.split_at(k);
        let mut out = Vec::with_capacity(2 * k);
        out.extend(re.iter().zip(im).map(|(r, i)| h.re * r - h.im * i));
        out.extend(re.iter().zip(im).map(|(r, i)| h.im * r + h.re * i));
        out
    }
}

/// One channel use of `k` symbols: gains and the noise vector, fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelDraw {
    pub h1: Gain,
    pub h2: Gain,
    pub noise: ComplexSignal,
}

impl ChannelDraw {
    pub fn sample<R: Rng + ?Sized>(cfg: &ChannelConfig, rng: &mut R) -> Self {
        let h1 = sample_gain(cfg.kind, rng);
        let h2 = sample_gain(cfg.kind, rng);
        let std = (cfg.noise_variance() / 2.0).sqrt();
        let noise = (0..cfg.codeword_len())
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            h1,
            h2,
            noise: ComplexSignal { data: noise },
        }
    }

    /// Unit gains and no noise.
    pub fn noiseless(bandwidth: usize) -> Self {
        Self {
            h1: Gain::UNIT,
            h2: Gain::UNIT,
            noise: ComplexSignal::zeros(bandwidth),
        }
    }

    /// Applies this realization to a pair of codewords.
    pub fn apply(&self, x1: &ComplexSignal, x2: &ComplexSignal) -> Result<ComplexSignal> {
        let k = self.noise.bandwidth();
        if x1.bandwidth() != k || x2.bandwidth() != k {
            return Err(Error::config(
                "bandwidth",
                format!(
                    "codewords of {} and {} symbols on a {k}-symbol channel",
                    x1.bandwidth(),
                    x2.bandwidth()
                ),
            ));
        }
        let a = x1.scaled_by(self.h1);
        let b = x2.scaled_by(self.h2);
        let data = a
            .iter()
            .zip(&b)
            .zip(self.noise.data())
            .map(|((a, b), w)| a + b + w)
            .collect();
        Ok(ComplexSignal { data })
    }
}

/// Sends one pair of codewords through a freshly drawn channel.
pub fn transmit<R: Rng + ?Sized>(
    x1: &ComplexSignal,
    x2: &ComplexSignal,
    cfg: &ChannelConfig,
    rng: &mut R,
) -> Result<(ComplexSignal, Gain, Gain)> {
    if x1.bandwidth() != cfg.bandwidth || x2.bandwidth() != cfg.bandwidth {
        return Err(Error::config(
            "bandwidth",
            format!(
                "channel has k = {} but codewords have {} and {}",
                cfg.bandwidth,
                x1.bandwidth(),
                x2.bandwidth()
            ),
        ));
    }
    let draw = ChannelDraw::sample(cfg, rng);
    let y = draw.apply(x1, x2)?;
    Ok((y, draw.h1, draw.h2))
}

/// Per-row channel realizations for a batch of transmissions.
#[derive(Clone, Debug, PartialEq)]
pub struct Realization {
    pub gains1: Vec<Gain>,
    pub gains2: Vec<Gain>,
    /// `[batch, 2k]`
    pub noise: Tensor,
}

impl Realization {
    pub fn sample<R: Rng + ?Sized>(cfg: &ChannelConfig, batch: usize, rng: &mut R) -> Self {
        let draws: Vec<ChannelDraw> = (0..batch).map(|_| ChannelDraw::sample(cfg, rng)).collect();
        Self::from_draws(&draws)
    }

    pub fn from_draws(draws: &[ChannelDraw]) -> Self {
        let k2 = draws[0].noise.data().len();
        let mut noise = Vec::with_capacity(draws.len() * k2);
        for d in draws {
            noise.extend_from_slice(d.noise.data());
        }
        Self {
            gains1: draws.iter().map(|d| d.h1).collect(),
            gains2: draws.iter().map(|d| d.h2).collect(),
            noise: Tensor::matrix(draws.len(), k2, noise).expect("uniform draws"),
        }
    }

    pub fn noiseless(bandwidth: usize, batch: usize) -> Self {
        Self {
            gains1: vec![Gain::UNIT; batch],
            gains2: vec![Gain::UNIT; batch],
            noise: Tensor::zeros(&[batch, 2 * bandwidth]),
        }
    }

    pub fn batch(&self) -> usize {
        self.gains1.len()
    }

    /// Gains as `[batch, 4]`: `h1.re, h1.im, h2.re, h2.im`.
    pub fn gain_features(&self) -> Tensor {
        let data = self
            .gains1
            .iter()
            .zip(&self.gains2)
            .flat_map(|(a, b)| [a.re, a.im, b.re, b.im])
            .collect();
        Tensor::matrix(self.batch(), 4, data).expect("gain features")
    }
}

/// Differentiable superposition of two batches of codewords. Gains and
/// noise are constants of the realization.
pub fn transmit_var(tape: &mut Tape<'_>, x1: Var, x2: Var, real: &Realization) -> Result<Var> {
    let (s1, s2) = (tape.value(x1).shape().to_vec(), tape.value(x2).shape().to_vec());
    if s1 != s2 || s1 != real.noise.shape() {
        return Err(Error::config(
            "bandwidth",
            format!(
                "codeword batches {s1:?} and {s2:?} on a channel realization {:?}",
                real.noise.shape()
            ),
        ));
    }
    let g1: Vec<[f64; 2]> = real.gains1.iter().map(|g| g.pair()).collect();
    let g2: Vec<[f64; 2]> = real.gains2.iter().map(|g| g.pair()).collect();
    let a = tape.complex_gain(x1, &g1)?;
    let b = tape.complex_gain(x2, &g2)?;
    let sum = tape.add(a, b)?;
    let w = tape.constant(real.noise.clone());
    tape.add(sum, w)
}

/// Differentiable per-row power projection for codewords of `bandwidth` symbols.
pub fn power_normalize_var(tape: &mut Tape<'_>, x: Var, bandwidth: usize) -> Var {
    tape.power_normalize(x, bandwidth as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn awgn(snr: f64, k: usize) -> ChannelConfig {
        ChannelConfig::new(ChannelKind::Awgn, snr, k).unwrap()
    }

    #[test]
    fn power_normalize_examples() {
        let k = 4;
        // every real and imaginary part 2: |x_j|² = 8
        let x = ComplexSignal::new(vec![2.0; 2 * k]).unwrap();
        assert!((x.power() - 8.0).abs() < 1e-12);
        // real parts 2, imaginary parts 0: power 4, scaled down by 2
        let x = ComplexSignal::new(vec![2.0; k].into_iter().chain(vec![0.0; k]).collect()).unwrap();
        assert!((x.power() - 4.0).abs() < 1e-12);
        let y = x.power_normalize();
        assert!((y.power() - 1.0).abs() < 1e-12);
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        // ‖x‖² = k/4 stays put
        let small = ComplexSignal::new(vec![0.5; k].into_iter().chain(vec![0.0; k]).collect()).unwrap();
        assert_eq!(small.power_normalize(), small);
        let zero = ComplexSignal::zeros(k);
        assert_eq!(zero.power_normalize(), zero);
    }

    #[test]
    fn noise_sigma_examples() {
        assert_eq!(noise_sigma(0.0), 1.0);
        assert!((noise_sigma(10.0) - 0.1).abs() < 1e-15);
        // 10^0.6 evaluated as exp(0.6 ln 10)
        let oracle = (0.6 * std::f64::consts::LN_10).exp();
        assert!((noise_sigma(-6.0) - oracle).abs() < 1e-12);
        assert!((noise_sigma(-6.0) - 3.981).abs() < 1e-3);
    }

    #[test]
    fn awgn_gains_are_unity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = ComplexSignal::new(vec![0.3; 8]).unwrap();
        let (_, h1, h2) = transmit(&x, &x, &awgn(10.0, 4), &mut rng).unwrap();
        assert_eq!((h1, h2), (Gain::UNIT, Gain::UNIT));
    }

    #[test]
    fn noiseless_awgn_is_plain_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x1 = ComplexSignal::new(vec![0.1, -0.2, 0.3, 0.4]).unwrap();
        let x2 = ComplexSignal::new(vec![0.5, 0.5, -0.5, 0.25]).unwrap();
        let (y, _, _) = transmit(&x1, &x2, &awgn(400.0, 2), &mut rng).unwrap();
        let expected: Vec<f64> = x1.data().iter().zip(x2.data()).map(|(a, b)| a + b).collect();
        for (a, b) in y.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn bandwidth_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x1 = ComplexSignal::zeros(3);
        let x2 = ComplexSignal::zeros(4);
        assert!(matches!(
            transmit(&x1, &x2, &awgn(0.0, 4), &mut rng),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn zero_bandwidth_config_is_rejected() {
        assert!(ChannelConfig::new(ChannelKind::Awgn, 0.0, 0).is_err());
    }

    #[test]
    fn complex_noise_splits_variance_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = awgn(0.0, 1000);
        let d = ChannelDraw::sample(&cfg, &mut rng);
        let var = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
        assert!((var(d.noise.real()) - 0.5).abs() < 0.1);
        assert!((var(d.noise.imag()) - 0.5).abs() < 0.1);
    }

    #[test]
    fn batch_transmit_matches_single_codeword_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = ChannelConfig::new(ChannelKind::Rayleigh, 3.0, 3).unwrap();
        let x1 = Tensor::randn(&[2, 6], 1.0, &mut rng);
        let x2 = Tensor::randn(&[2, 6], 1.0, &mut rng);
        let draws: Vec<ChannelDraw> = (0..2).map(|_| ChannelDraw::sample(&cfg, &mut rng)).collect();
        let real = Realization::from_draws(&draws);
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(x1.clone()), tape.constant(x2.clone()));
        let y = transmit_var(&mut tape, a, b, &real).unwrap();
        for (r, draw) in draws.iter().enumerate() {
            let s1 = ComplexSignal::new(x1.row(r).to_vec()).unwrap();
            let s2 = ComplexSignal::new(x2.row(r).to_vec()).unwrap();
            let single = draw.apply(&s1, &s2).unwrap();
            assert_eq!(tape.value(y).row(r), single.data());
        }
    }
}
