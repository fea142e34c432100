//! Gaussian VAE backbone: encoder, decoder, reparameterisation, and the
//! beta-weighted negative ELBO.
//!
//! Encoder: `Linear(in -> hidden)`, leaky-ReLU, `Linear(hidden -> 2 * latent)`
//! whose output columns are `[mu | logvar]`. Decoder mirrors it with a single
//! `Linear(latent -> hidden)`, leaky-ReLU, `Linear(hidden -> in)`. The
//! likelihood is Gaussian with unit variance, so the reconstruction term is a
//! squared error with constants dropped.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Layer widths of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
}

/// Affine layer `x W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, zero bias.
    fn init<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self {
            weight: Tensor::matrix(fan_in, fan_out, w).expect("layer shape"),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }
}

/// All trainable parameters, including the log distance scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub enc_hidden: Linear,
    pub enc_out: Linear,
    pub dec_hidden: Linear,
    pub dec_out: Linear,
    /// `lambda = exp(theta_lambda)`, stored as a scalar tensor.
    pub theta_lambda: Tensor,
}

/// Parameter names in checkpoint order.
pub const PARAM_NAMES: [&str; 9] = [
    "encoder.hidden.weight",
    "encoder.hidden.bias",
    "encoder.out.weight",
    "encoder.out.bias",
    "decoder.hidden.weight",
    "decoder.hidden.bias",
    "decoder.out.weight",
    "decoder.out.bias",
    "theta_lambda",
];

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        Self {
            dims,
            enc_hidden: Linear::zeros(dims.in_dim, dims.hidden_dim),
            enc_out: Linear::zeros(dims.hidden_dim, 2 * dims.latent_dim),
            dec_hidden: Linear::zeros(dims.latent_dim, dims.hidden_dim),
            dec_out: Linear::zeros(dims.hidden_dim, dims.in_dim),
            theta_lambda: Tensor::scalar(0.0),
        }
    }

    /// Random initialisation with `lambda = 1`.
    pub fn init<R: Rng>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        if dims.in_dim == 0 || dims.hidden_dim == 0 || dims.latent_dim == 0 {
            return Err(Error::invalid(format!(
                "all model dimensions must be positive: {dims:?}"
            )));
        }
        Ok(Self {
            dims,
            enc_hidden: Linear::init(dims.in_dim, dims.hidden_dim, rng),
            enc_out: Linear::init(dims.hidden_dim, 2 * dims.latent_dim, rng),
            dec_hidden: Linear::init(dims.latent_dim, dims.hidden_dim, rng),
            dec_out: Linear::init(dims.hidden_dim, dims.in_dim, rng),
            theta_lambda: Tensor::scalar(0.0),
        })
    }

    pub fn lambda(&self) -> f64 {
        self.theta_lambda.item().exp()
    }

    pub fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.enc_hidden.weight,
            &self.enc_hidden.bias,
            &self.enc_out.weight,
            &self.enc_out.bias,
            &self.dec_hidden.weight,
            &self.dec_hidden.bias,
            &self.dec_out.weight,
            &self.dec_out.bias,
            &self.theta_lambda,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.enc_hidden.weight,
            &mut self.enc_hidden.bias,
            &mut self.enc_out.weight,
            &mut self.enc_out.bias,
            &mut self.dec_hidden.weight,
            &mut self.dec_hidden.bias,
            &mut self.dec_out.weight,
            &mut self.dec_out.bias,
            &mut self.theta_lambda,
        ]
    }

    /// Shapes implied by `dims`, in [`PARAM_NAMES`] order.
    pub fn expected_shapes(dims: ModelDims) -> [Vec<usize>; 9] {
        let z = Self::zeros(dims);
        z.tensors().map(|t| t.shape().to_vec())
    }

    /// Rebuilds parameters from tensors in [`PARAM_NAMES`] order.
    pub fn from_tensors(dims: ModelDims, tensors: Vec<Tensor>) -> Result<Self> {
        let shapes = Self::expected_shapes(dims);
        if tensors.len() != shapes.len() {
            return Err(Error::invalid(format!(
                "expected 9 parameter tensors, got {}",
                tensors.len()
            )));
        }
        for ((t, s), name) in tensors.iter().zip(&shapes).zip(PARAM_NAMES) {
            if t.shape() != s.as_slice() {
                return Err(Error::Shape {
                    op: name,
                    left: t.shape().to_vec(),
                    right: s.clone(),
                });
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        Ok(Self {
            dims,
            enc_hidden: Linear {
                weight: next(),
                bias: next(),
            },
            enc_out: Linear {
                weight: next(),
                bias: next(),
            },
            dec_hidden: Linear {
                weight: next(),
                bias: next(),
            },
            dec_out: Linear {
                weight: next(),
                bias: next(),
            },
            theta_lambda: next(),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    /// Registers every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self.tensors().map(|t| g.leaf(t.clone())),
        }
    }

    /// Registers every parameter as a constant of `g` (no gradients).
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self.tensors().map(|t| g.constant(t.clone())),
        }
    }
}

/// Graph handles for the parameters, in [`PARAM_NAMES`] order.
#[derive(Clone, Copy, Debug)]
pub struct BoundParams {
    pub vars: [Var; 9],
}

impl BoundParams {
    pub fn theta_lambda(&self) -> Var {
        self.vars[8]
    }
}

/// Posterior parameters and one sample for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBatch {
    pub mu: Tensor,
    pub logvar: Tensor,
    pub z: Tensor,
}

fn check_input(op: &'static str, x: &Tensor, width: usize) -> Result<()> {
    if !x.is_matrix() || x.cols() != width {
        return Err(Error::Shape {
            op,
            left: x.shape().to_vec(),
            right: vec![width],
        });
    }
    Ok(())
}

fn affine(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = g.matmul(x, w)?;
    g.add(xw, b)
}

/// Encoder on a graph; returns `(mu, logvar)`.
pub fn encode_graph(g: &mut Graph, dims: ModelDims, p: &BoundParams, y: Var) -> Result<(Var, Var)> {
    check_input("encode", g.value(y), dims.in_dim)?;
    let h = affine(g, y, p.vars[0], p.vars[1])?;
    let h = g.leaky_relu(h);
    let out = affine(g, h, p.vars[2], p.vars[3])?;
    let mu = g.columns(out, 0, dims.latent_dim)?;
    let logvar = g.columns(out, dims.latent_dim, 2 * dims.latent_dim)?;
    Ok((mu, logvar))
}

/// Decoder on a graph.
pub fn decode_graph(g: &mut Graph, dims: ModelDims, p: &BoundParams, z: Var) -> Result<Var> {
    check_input("decode", g.value(z), dims.latent_dim)?;
    let h = affine(g, z, p.vars[4], p.vars[5])?;
    let h = g.leaky_relu(h);
    affine(g, h, p.vars[6], p.vars[7])
}

/// `mu + exp(logvar / 2) * eps` with `eps` held constant.
pub fn reparameterize_graph(g: &mut Graph, mu: Var, logvar: Var, eps: &Tensor) -> Result<Var> {
    let half = g.scale(logvar, 0.5);
    let std = g.exp(half);
    let e = g.constant(eps.clone());
    let noise = g.mul(std, e)?;
    g.add(mu, noise)
}

fn batch_size(g: &Graph, v: Var) -> f64 {
    g.value(v).rows().max(1) as f64
}

/// Batch mean of `KL(N(mu, diag(exp(logvar))) || N(0, I))`.
pub fn kl_graph(g: &mut Graph, mu: Var, logvar: Var) -> Result<Var> {
    let b = batch_size(g, mu);
    let ones = g.constant(Tensor::full(g.value(logvar).shape(), 1.0));
    let var = g.exp(logvar);
    let mu2 = g.square(mu);
    let t = g.add(ones, logvar)?;
    let t = g.sub(t, var)?;
    let t = g.sub(t, mu2)?;
    let s = g.sum(t);
    Ok(g.scale(s, -0.5 / b))
}

/// Batch mean of the squared L2 reconstruction error.
pub fn recon_graph(g: &mut Graph, y_hat: Var, y: Var) -> Result<Var> {
    let b = batch_size(g, y);
    let d = g.sub(y_hat, y)?;
    let sq = g.square(d);
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / b))
}

/// Standard normal noise of the given shape.
pub fn sample_noise<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::matrix(rows, cols, data).expect("noise shape")
}

/// Posterior mean and log-variance for each row of `y`.
pub fn encode(params: &ModelParams, y: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let yv = g.constant(y.clone());
    let (mu, logvar) = encode_graph(&mut g, params.dims, &p, yv)?;
    Ok((g.value(mu).clone(), g.value(logvar).clone()))
}

pub fn decode(params: &ModelParams, z: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let zv = g.constant(z.clone());
    let out = decode_graph(&mut g, params.dims, &p, zv)?;
    Ok(g.value(out).clone())
}

/// Draws `z = mu + exp(logvar / 2) * eps`.
pub fn reparameterize<R: Rng>(mu: &Tensor, logvar: &Tensor, rng: &mut R) -> Result<LatentBatch> {
    if mu.shape() != logvar.shape() || !mu.is_matrix() {
        return Err(Error::Shape {
            op: "reparameterize",
            left: mu.shape().to_vec(),
            right: logvar.shape().to_vec(),
        });
    }
    let eps = sample_noise(rng, mu.rows(), mu.cols());
    let z = mu
        .data()
        .iter()
        .zip(logvar.data())
        .zip(eps.data())
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect();
    Ok(LatentBatch {
        mu: mu.clone(),
        logvar: logvar.clone(),
        z: Tensor::new(mu.shape().to_vec(), z)?,
    })
}

/// Closed-form KL to the standard normal prior, averaged over the batch.
pub fn kl_diag_gaussian(mu: &Tensor, logvar: &Tensor) -> Result<f64> {
    if mu.shape() != logvar.shape() || !mu.is_matrix() {
        return Err(Error::Shape {
            op: "kl_diag_gaussian",
            left: mu.shape().to_vec(),
            right: logvar.shape().to_vec(),
        });
    }
    let s: f64 = mu
        .data()
        .iter()
        .zip(logvar.data())
        .map(|(m, lv)| 1.0 + lv - lv.exp() - m * m)
        .sum();
    Ok(-0.5 * s / mu.rows().max(1) as f64)
}

/// Terms of the beta-weighted negative ELBO.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
}

/// Builds `recon + beta * kl` on a graph using the supplied noise.
pub fn elbo_graph(
    g: &mut Graph,
    dims: ModelDims,
    p: &BoundParams,
    y: Var,
    eps: &Tensor,
    beta: f64,
) -> Result<(Var, Var, Var, Var)> {
    let (mu, logvar) = encode_graph(g, dims, p, y)?;
    let z = reparameterize_graph(g, mu, logvar, eps)?;
    let y_hat = decode_graph(g, dims, p, z)?;
    let recon = recon_graph(g, y_hat, y)?;
    let kl = kl_graph(g, mu, logvar)?;
    let weighted = g.scale(kl, beta);
    let loss = g.add(recon, weighted)?;
    Ok((loss, recon, kl, z))
}

/// One-sample estimate of the beta-weighted negative ELBO.
pub fn elbo_loss<R: Rng>(
    params: &ModelParams,
    y: &Tensor,
    beta: f64,
    rng: &mut R,
) -> Result<ElboTerms> {
    if !(beta >= 0.0) {
        return Err(Error::invalid(format!(
            "beta must be nonnegative, got {beta}"
        )));
    }
    check_input("elbo_loss", y, params.dims.in_dim)?;
    let eps = sample_noise(rng, y.rows(), params.dims.latent_dim);
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let yv = g.constant(y.clone());
    let (loss, recon, kl, _) = elbo_graph(&mut g, params.dims, &p, yv, &eps, beta)?;
    Ok(ElboTerms {
        loss: g.value(loss).item(),
        recon: g.value(recon).item(),
        kl: g.value(kl).item(),
    })
}
