//! Spatial autocorrelation statistics and reconstruction error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::{knn_indices, SpatialCoords};
use crate::tensor::Tensor;
use crate::vae::{decode, encode, ModelParams};

/// Default neighbourhood size for the autocorrelation statistics.
pub const DEFAULT_K: usize = 5;

/// Binary directed k-NN weights: `w_ij = 1` iff `j` is among the `k` nearest spots of `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialWeights {
    neighbors: Vec<Vec<usize>>,
}

impl SpatialWeights {
    pub fn knn(coords: &SpatialCoords, k: usize) -> Result<Self> {
        Ok(Self {
            neighbors: knn_indices(coords, k)?,
        })
    }

    pub fn n(&self) -> usize {
        self.neighbors.len()
    }

    /// Sum of all weights.
    pub fn total(&self) -> f64 {
        self.neighbors.iter().map(Vec::len).sum::<usize>() as f64
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }
}

fn centered(values: &[f64], w: &SpatialWeights) -> Result<(Vec<f64>, f64)> {
    if values.len() != w.n() {
        return Err(Error::invalid(format!(
            "{} values for {} spots",
            values.len(),
            w.n()
        )));
    }
    if values.len() < 2 {
        return Err(Error::invalid("need at least two spots"));
    }
    if !values.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("autocorrelation input".into()));
    }
    if values.iter().all(|&v| v == values[0]) {
        return Err(Error::Degenerate("zero variance".into()));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let dev: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let ss: f64 = dev.iter().map(|d| d * d).sum();
    if !(ss > 0.0) {
        return Err(Error::Degenerate("zero variance".into()));
    }
    Ok((dev, ss))
}

/// Moran's I: `(N/W) * sum_ij w_ij (x_i - m)(x_j - m) / sum_i (x_i - m)^2`.
pub fn morans_i(values: &[f64], w: &SpatialWeights) -> Result<f64> {
    let (dev, ss) = centered(values, w)?;
    let mut num = 0.0;
    for (i, di) in dev.iter().enumerate() {
        let s: f64 = w.neighbors(i).iter().map(|&j| dev[j]).sum();
        num += di * s;
    }
    Ok(values.len() as f64 / w.total() * num / ss)
}

/// Geary's C: `((N-1)/(2W)) * sum_ij w_ij (x_i - x_j)^2 / sum_i (x_i - m)^2`.
pub fn gearys_c(values: &[f64], w: &SpatialWeights) -> Result<f64> {
    let (_, ss) = centered(values, w)?;
    let mut num = 0.0;
    for (i, &xi) in values.iter().enumerate() {
        num += w
            .neighbors(i)
            .iter()
            .map(|&j| (xi - values[j]).powi(2))
            .sum::<f64>();
    }
    Ok((values.len() - 1) as f64 / (2.0 * w.total()) * num / ss)
}

/// Mean squared error of `decode(mu(features))` against `features`.
pub fn reconstruction_mse(params: &ModelParams, features: &Tensor) -> Result<f64> {
    let (mu, _) = encode(params, features)?;
    let recon = decode(params, &mu)?;
    let n = features.numel();
    if n == 0 {
        return Err(Error::invalid("no features to reconstruct"));
    }
    let sse: f64 = recon
        .data()
        .iter()
        .zip(features.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sse / n as f64)
}

/// Per-dimension autocorrelation of the encoder means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentAutocorrelation {
    pub morans_i_mean: f64,
    pub gearys_c_mean: f64,
    /// `None` for constant dimensions.
    pub morans_i: Vec<Option<f64>>,
    pub gearys_c: Vec<Option<f64>>,
    pub excluded_dims: usize,
}

/// Moran's I and Geary's C of each column of `latent`, averaged over the
/// non-constant columns.
pub fn column_autocorrelation(
    latent: &Tensor,
    w: &SpatialWeights,
) -> Result<LatentAutocorrelation> {
    let mut mi = Vec::with_capacity(latent.cols());
    let mut gc = Vec::with_capacity(latent.cols());
    for c in 0..latent.cols() {
        let col = latent.column(c);
        match (morans_i(&col, w), gearys_c(&col, w)) {
            (Ok(i), Ok(g)) => {
                mi.push(Some(i));
                gc.push(Some(g));
            }
            (Err(Error::Degenerate(_)), _) | (_, Err(Error::Degenerate(_))) => {
                mi.push(None);
                gc.push(None);
            }
            (Err(e), _) | (_, Err(e)) => return Err(e),
        }
    }
    let kept: Vec<(f64, f64)> = mi
        .iter()
        .zip(&gc)
        .filter_map(|(a, b)| Some(((*a)?, (*b)?)))
        .collect();
    if kept.is_empty() {
        return Err(Error::Degenerate(
            "every latent dimension is constant".into(),
        ));
    }
    let k = kept.len() as f64;
    Ok(LatentAutocorrelation {
        morans_i_mean: kept.iter().map(|x| x.0).sum::<f64>() / k,
        gearys_c_mean: kept.iter().map(|x| x.1).sum::<f64>() / k,
        excluded_dims: mi.len() - kept.len(),
        morans_i: mi,
        gearys_c: gc,
    })
}

/// Autocorrelation of the encoder means of `features` over `coords`.
pub fn latent_autocorrelation(
    params: &ModelParams,
    features: &Tensor,
    coords: &SpatialCoords,
    k: usize,
) -> Result<LatentAutocorrelation> {
    if features.rows() != coords.len() {
        return Err(Error::invalid(format!(
            "{} feature rows for {} coordinates",
            features.rows(),
            coords.len()
        )));
    }
    let (mu, _) = encode(params, features)?;
    column_autocorrelation(&mu, &SpatialWeights::knn(coords, k)?)
}
