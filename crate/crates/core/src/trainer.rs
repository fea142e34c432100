//! Adam-based minibatch training of the regularised objective
//! `recon + beta * kl + alpha * masked_distortion`, with early stopping on the
//! epoch training loss.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::distortion::distortion_graph;
use crate::error::{Error, Result};
use crate::metrics::{latent_autocorrelation, reconstruction_mse, DEFAULT_K};
use crate::spatial::{knn_mask, pairwise_distances, DistanceMatrix, MaskGraph, SpatialCoords};
use crate::tensor::Tensor;
use crate::vae::{elbo_graph, sample_noise, ModelDims, ModelParams};

/// Hyperparameters of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub pca_k: usize,
    pub beta: f64,
    pub alpha: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_improvement: f64,
    pub mask_k: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            latent_dim: 4,
            hidden_dim: 64,
            pca_k: 256,
            beta: 1e-2,
            alpha: 50.0,
            lr: 1e-3,
            batch_size: 128,
            max_epochs: 1000,
            patience: 10,
            min_improvement: 1e-2,
            mask_k: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("latent_dim", self.latent_dim),
            ("hidden_dim", self.hidden_dim),
            ("pca_k", self.pca_k),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
            ("mask_k", self.mask_k),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        let reals = [
            ("beta", self.beta, false),
            ("alpha", self.alpha, false),
            ("lr", self.lr, true),
            ("min_improvement", self.min_improvement, false),
        ];
        for (name, v, strict) in reals {
            let ok = v.is_finite() && if strict { v > 0.0 } else { v >= 0.0 };
            if !ok {
                return Err(Error::invalid(format!("{name} out of range: {v}")));
            }
        }
        Ok(())
    }

    pub fn dims(&self, in_dim: usize) -> ModelDims {
        ModelDims {
            in_dim,
            hidden_dim: self.hidden_dim,
            latent_dim: self.latent_dim,
        }
    }
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(shapes: &[&[usize]]) -> Self {
        Self {
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
        }
    }

    pub fn for_params(params: &ModelParams) -> Self {
        let tensors = params.tensors();
        let shapes: Vec<&[usize]> = tensors.iter().map(|t| t.shape()).collect();
        Self::new(&shapes)
    }
}

/// One bias-corrected Adam update; advances `state.t` first, so the first call uses `t = 1`.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    opt: &Adam,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Shape {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - opt.beta1.powi(t);
    let c2 = 1.0 - opt.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[k] = opt.beta1 * m[k] + (1.0 - opt.beta1) * gk;
            v[k] = opt.beta2 * v[k] + (1.0 - opt.beta2) * gk * gk;
            let mhat = m[k] / c1;
            let vhat = v[k] / c2;
            *w -= opt.lr * mhat / (vhat.sqrt() + opt.eps);
        }
    }
    Ok(())
}

/// Loss terms of one minibatch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTerms {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub distortion: f64,
}

/// Evaluates the objective on one batch and returns its gradients in
/// parameter order. The distortion term is skipped when `alpha == 0` or the
/// batch has a single row.
pub fn batch_gradients(
    params: &ModelParams,
    y: &Tensor,
    eps: &Tensor,
    ds: &DistanceMatrix,
    mask: &Tensor,
    beta: f64,
    alpha: f64,
) -> Result<(StepTerms, Vec<Tensor>)> {
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let yv = g.constant(y.clone());
    let (elbo, recon, kl, z) = elbo_graph(&mut g, params.dims, &p, yv, eps, beta)?;
    let mut loss = elbo;
    let mut distortion = 0.0;
    if alpha > 0.0 && y.rows() >= 2 {
        let lambda = g.exp(p.theta_lambda());
        let dis = distortion_graph(&mut g, z, ds, Some(mask), lambda)?;
        distortion = g.value(dis).item();
        let weighted = g.scale(dis, alpha);
        loss = g.add(elbo, weighted)?;
    }
    let terms = StepTerms {
        loss: g.value(loss).item(),
        recon: g.value(recon).item(),
        kl: g.value(kl).item(),
        distortion,
    };
    if !terms.loss.is_finite() {
        return Ok((terms, Vec::new()));
    }
    g.backward(loss)?;
    Ok((terms, p.vars.iter().map(|&v| g.grad(v)).collect()))
}

/// One row of the training history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub distortion: f64,
    pub lambda: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch (1-based) whose parameters were returned.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.get(self.best_epoch.checked_sub(1)?)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,recon,kl,distortion,lambda,seconds\n");
        for r in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.epoch, r.loss, r.recon, r.kl, r.distortion, r.lambda, r.seconds
            ));
        }
        s
    }
}

/// Patience-based stopping rule. An epoch counts as an improvement only when
/// it beats the reference loss by more than `min_improvement`; the reference
/// moves only on improvements.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    min_improvement: f64,
    reference: f64,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_improvement: f64) -> Self {
        Self {
            patience,
            min_improvement,
            reference: f64::INFINITY,
            stale: 0,
        }
    }

    /// Records an epoch loss; returns `true` when training should stop.
    pub fn update(&mut self, loss: f64) -> bool {
        if loss < self.reference - self.min_improvement || !self.reference.is_finite() {
            self.reference = loss;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }
}

/// Trains from a seeded random initialisation.
pub fn train(
    config: &TrainConfig,
    features: &Tensor,
    coords: &SpatialCoords,
) -> Result<(ModelParams, TrainHistory)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = ModelParams::init(config.dims(features.cols()), &mut rng)?;
    run(config, init, features, coords, &mut rng)
}

/// Trains from the given parameters; the data order and noise stream are
/// seeded from `config.seed`.
pub fn train_from(
    config: &TrainConfig,
    init: ModelParams,
    features: &Tensor,
    coords: &SpatialCoords,
) -> Result<(ModelParams, TrainHistory)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    run(config, init, features, coords, &mut rng)
}

fn run(
    config: &TrainConfig,
    mut params: ModelParams,
    features: &Tensor,
    coords: &SpatialCoords,
    rng: &mut ChaCha8Rng,
) -> Result<(ModelParams, TrainHistory)> {
    let n = features.rows();
    if !features.is_matrix() || n == 0 {
        return Err(Error::invalid(
            "training features must be a non-empty matrix",
        ));
    }
    if coords.len() != n {
        return Err(Error::invalid(format!(
            "{n} feature rows for {} coordinates",
            coords.len()
        )));
    }
    if params.dims != config.dims(features.cols()) {
        return Err(Error::invalid(format!(
            "initial parameters have dims {:?}, expected {:?}",
            params.dims,
            config.dims(features.cols())
        )));
    }
    if !features.all_finite() {
        return Err(Error::NonFinite("training features".into()));
    }
    let use_distortion = config.alpha > 0.0 && n >= 2;
    let (ds, mask) = if use_distortion {
        if config.mask_k >= n {
            return Err(Error::invalid(format!(
                "mask_k {} needs more than {n} spots",
                config.mask_k
            )));
        }
        (pairwise_distances(coords), knn_mask(coords, config.mask_k)?)
    } else {
        (
            DistanceMatrix::from_tensor(Tensor::zeros(&[0, 0]))?,
            MaskGraph::new(0),
        )
    };
    let empty = Tensor::zeros(&[0, 0]);

    let opt = Adam::new(config.lr);
    let mut state = AdamState::for_params(&params);
    let mut stopper = EarlyStopping::new(config.patience, config.min_improvement);
    let mut history = TrainHistory::default();
    let mut best = (f64::INFINITY, params.clone());
    let mut order: Vec<usize> = (0..n).collect();
    let start = Instant::now();

    for epoch in 1..=config.max_epochs {
        order.shuffle(rng);
        let mut sums = [0.0; 4];
        let mut steps = 0usize;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let y = features.select_rows(batch);
            let eps = sample_noise(rng, batch.len(), config.latent_dim);
            let (bds, bmask) = if use_distortion && batch.len() >= 2 {
                (ds.submatrix(batch), mask.restrict(batch).to_dense())
            } else {
                (DistanceMatrix::from_tensor(empty.clone())?, empty.clone())
            };
            let alpha = if use_distortion { config.alpha } else { 0.0 };
            let (terms, grads) =
                batch_gradients(&params, &y, &eps, &bds, &bmask, config.beta, alpha)?;
            if !terms.loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::NonFinite(format!(
                    "loss {} at epoch {epoch} step {}",
                    terms.loss,
                    step + 1
                )));
            }
            adam_step(&mut params.tensors_mut(), &grads, &mut state, &opt)?;
            if !params.all_finite() {
                return Err(Error::NonFinite(format!(
                    "parameters at epoch {epoch} step {}",
                    step + 1
                )));
            }
            sums[0] += terms.loss;
            sums[1] += terms.recon;
            sums[2] += terms.kl;
            sums[3] += terms.distortion;
            steps += 1;
        }
        let s = steps as f64;
        let record = EpochRecord {
            epoch,
            loss: sums[0] / s,
            recon: sums[1] / s,
            kl: sums[2] / s,
            distortion: sums[3] / s,
            lambda: params.lambda(),
            seconds: start.elapsed().as_secs_f64(),
        };
        history.epochs.push(record);
        if record.loss < best.0 {
            best = (record.loss, params.clone());
            history.best_epoch = epoch;
        }
        if stopper.update(record.loss) {
            history.stopped_early = true;
            break;
        }
    }
    Ok((best.1, history))
}

/// Held-out evaluation on encoder means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub n_spots: usize,
    pub mse: f64,
    pub morans_i_mean: f64,
    pub gearys_c_mean: f64,
    pub morans_i: Vec<Option<f64>>,
    pub gearys_c: Vec<Option<f64>>,
    pub excluded_dims: usize,
    pub k: usize,
}

/// Reconstruction MSE and latent autocorrelation of `features` (already
/// projected with the training pipeline) at `coords`.
pub fn evaluate(
    params: &ModelParams,
    features: &Tensor,
    coords: &SpatialCoords,
    k: usize,
) -> Result<EvalMetrics> {
    if !features.is_matrix() || features.cols() != params.dims.in_dim {
        return Err(Error::Shape {
            op: "evaluate",
            left: features.shape().to_vec(),
            right: vec![params.dims.in_dim],
        });
    }
    let mse = reconstruction_mse(params, features)?;
    let auto = latent_autocorrelation(params, features, coords, k)?;
    Ok(EvalMetrics {
        n_spots: features.rows(),
        mse,
        morans_i_mean: auto.morans_i_mean,
        gearys_c_mean: auto.gearys_c_mean,
        morans_i: auto.morans_i,
        gearys_c: auto.gearys_c,
        excluded_dims: auto.excluded_dims,
        k,
    })
}

/// [`evaluate`] with the default neighbourhood size.
pub fn evaluate_default(
    params: &ModelParams,
    features: &Tensor,
    coords: &SpatialCoords,
) -> Result<EvalMetrics> {
    evaluate(params, features, coords, DEFAULT_K)
}
