//! Invertible flows: forward and inverse passes with log-det accounting,
//! log-density under a standard normal base, and bits per dimension.

mod dequant;
mod layers;

pub use dequant::{dequantize, dequantize_inverse, DEFAULT_ALPHA};
pub use layers::{ActNorm, AffineCoupling, InvertibleLinear, Layer, S_MAX};

use rand::Rng;
use std::f64::consts::{LN_2, PI};

use crate::error::{Error, Result};

/// Feature-space image of a sample together with `log|det ∂f/∂x|`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector {
    pub values: Vec<f64>,
    pub log_det: f64,
}

/// Stack shape for [`FlowModel::standard`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FlowArch {
    /// Number of (actnorm, invertible linear, coupling) blocks.
    pub blocks: usize,
    /// Conditioner hidden width.
    pub hidden: usize,
}

impl Default for FlowArch {
    fn default() -> Self {
        Self {
            blocks: 6,
            hidden: 64,
        }
    }
}

/// `log N(z; 0, I)`.
pub fn standard_normal_log_density(z: &[f64]) -> f64 {
    let m = z.len() as f64;
    -0.5 * m * (2.0 * PI).ln() - 0.5 * z.iter().map(|v| v * v).sum::<f64>()
}

/// Ordered stack of invertible layers with a standard-normal base.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    dim: usize,
    layers: Vec<Layer>,
}

impl FlowModel {
    /// Identity flow with no layers.
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidDimension("flow dimension must be >= 1".into()));
        }
        Ok(Self {
            dim,
            layers: Vec::new(),
        })
    }

    pub fn from_layers(dim: usize, layers: Vec<Layer>) -> Result<Self> {
        let mut model = Self::new(dim)?;
        for layer in layers {
            model.push(layer)?;
        }
        Ok(model)
    }

    pub fn push(&mut self, layer: Layer) -> Result<()> {
        if layer.dim() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "{} layer of dim {} pushed onto flow of dim {}",
                layer.name(),
                layer.dim(),
                self.dim
            )));
        }
        self.layers.push(layer);
        Ok(())
    }

    /// Default training stack: `arch.blocks` repetitions of actnorm →
    /// invertible linear (random rotation) → affine coupling with alternating
    /// complementary masks. Couplings start at the identity.
    pub fn standard<R: Rng + ?Sized>(dim: usize, arch: FlowArch, rng: &mut R) -> Result<Self> {
        Self::build(dim, arch, 0.0, rng)
    }

    /// Same stack with nonzero coupling outputs and perturbed actnorm and
    /// linear parameters. Used to exercise every code path in tests.
    pub fn randomized<R: Rng + ?Sized>(dim: usize, arch: FlowArch, rng: &mut R) -> Result<Self> {
        let mut model = Self::build(dim, arch, 0.3, rng)?;
        for layer in model.layers.iter_mut() {
            let mut p = layer.params();
            for v in p.iter_mut() {
                *v += 0.2 * (rng.random::<f64>() - 0.5);
            }
            layer.set_params(&p)?;
            if let Layer::ActNorm(a) = layer {
                a.initialized = true;
            }
        }
        Ok(model)
    }

    fn build<R: Rng + ?Sized>(dim: usize, arch: FlowArch, out_std: f64, rng: &mut R) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidDimension(
                "coupling flows need at least 2 dimensions".into(),
            ));
        }
        let mut model = Self::new(dim)?;
        for k in 0..arch.blocks {
            model.push(Layer::ActNorm(ActNorm::new(dim)))?;
            model.push(Layer::InvertibleLinear(InvertibleLinear::random_rotation(dim, rng)?))?;
            let mask = (0..dim).map(|d| (d + k) % 2 == 0).collect();
            model.push(Layer::AffineCoupling(AffineCoupling::init(mask, arch.hidden, out_std, rng)?))?;
        }
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Runs `batch` through the stack and initializes every uninitialized
    /// actnorm from the activations arriving at it.
    pub fn initialize_actnorms(&mut self, batch: &[Vec<f64>]) -> Result<()> {
        let mut acts: Vec<Vec<f64>> = batch.to_vec();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if let Layer::ActNorm(a) = layer {
                if !a.initialized {
                    a.initialize(&acts).map_err(|e| match e {
                        Error::DegenerateData(msg) => {
                            Error::DegenerateData(format!("layer {i}: {msg}"))
                        }
                        other => other,
                    })?;
                }
            }
            for x in acts.iter_mut() {
                *x = layer.forward(x)?.0;
            }
        }
        Ok(())
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "flow of dim {} got vector of dim {}",
                self.dim,
                x.len()
            )));
        }
        Ok(())
    }

    /// `z = f(s)` with the accumulated log-det.
    pub fn forward(&self, s: &[f64]) -> Result<LatentVector> {
        self.check_dim(s)?;
        let mut values = s.to_vec();
        let mut log_det = 0.0;
        for layer in &self.layers {
            let (y, ld) = layer.forward(&values)?;
            values = y;
            log_det += ld;
        }
        if !log_det.is_finite() {
            return Err(Error::NonFinite("accumulated log-det".into()));
        }
        Ok(LatentVector { values, log_det })
    }

    /// Forward pass that also returns the input to every layer.
    pub(crate) fn forward_trace(&self, s: &[f64]) -> Result<(Vec<Vec<f64>>, LatentVector)> {
        self.check_dim(s)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut values = s.to_vec();
        let mut log_det = 0.0;
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, ld) = layer.forward(&values).map_err(|e| annotate(i, e))?;
            inputs.push(std::mem::replace(&mut values, y));
            log_det += ld;
        }
        Ok((inputs, LatentVector { values, log_det }))
    }

    /// `s = f⁻¹(z)`.
    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(z)?;
        let mut values = z.to_vec();
        for layer in self.layers.iter().rev() {
            values = layer.inverse(&values)?;
        }
        Ok(values)
    }

    /// `log N(f(s); 0, I) + log|det ∂f/∂s|`.
    pub fn log_prob(&self, s: &[f64]) -> Result<f64> {
        let z = self.forward(s)?;
        let lp = standard_normal_log_density(&z.values) + z.log_det;
        if !lp.is_finite() {
            return Err(Error::NonFinite("log-probability".into()));
        }
        Ok(lp)
    }

    /// Mean negative base-2 log-likelihood per dimension of 8-bit data after
    /// logit dequantization, including the dequantization Jacobian.
    pub fn bits_per_dim(&self, data: &[Vec<u8>], alpha: f64) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("bits per dim needs data".into()));
        }
        let mut total = 0.0;
        for x in data {
            let (y, ld) = dequantize(x, alpha)?;
            total += -(self.log_prob(&y)? + ld);
        }
        Ok(total / (data.len() as f64 * self.dim as f64 * LN_2))
    }

    /// Bits per dimension of real-valued data, no dequantization.
    pub fn bits_per_dim_continuous(&self, data: &[Vec<f64>]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("bits per dim needs data".into()));
        }
        let mut total = 0.0;
        for x in data {
            total -= self.log_prob(x)?;
        }
        Ok(total / (data.len() as f64 * self.dim as f64 * LN_2))
    }
}

fn annotate(layer: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("layer {layer}: {msg}")),
        other => other,
    }
}
