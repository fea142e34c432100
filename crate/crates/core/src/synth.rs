//! Synthetic spatially structured count data on a square grid.
//!
//! Each of `n_patterns` latent fields is a mixture of up to three plane
//! waves `a_m sin(<w_m, s> / smoothness + phi_m)`. Gene `j` reads out
//! `softplus(sum_p B_jp f_p(s))`, gets Gaussian noise, is scaled by
//! `count_scale`, and is rounded to a nonnegative integer.

use std::f64::consts::TAU;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::ExpressionMatrix;
use crate::spatial::SpatialCoords;
use crate::tensor::Tensor;

const MAX_WAVES: usize = 3;
const LOADING_SD: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub grid_side: usize,
    pub n_genes: usize,
    pub n_patterns: usize,
    pub smoothness: f64,
    pub noise_sd: f64,
    /// Multiplier applied before rounding to counts.
    pub count_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            grid_side: 30,
            n_genes: 200,
            n_patterns: 3,
            smoothness: 5.0,
            noise_sd: 2.0,
            count_scale: 10.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_side < 2 {
            return Err(Error::invalid(format!(
                "grid_side must be at least 2, got {}",
                self.grid_side
            )));
        }
        if self.n_genes == 0 || self.n_patterns == 0 {
            return Err(Error::invalid("n_genes and n_patterns must be positive"));
        }
        if self.n_patterns > self.n_genes {
            return Err(Error::invalid(format!(
                "n_patterns {} exceeds n_genes {}",
                self.n_patterns, self.n_genes
            )));
        }
        if !(self.smoothness > 0.0 && self.smoothness.is_finite()) {
            return Err(Error::invalid(format!(
                "smoothness must be positive, got {}",
                self.smoothness
            )));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::invalid(format!(
                "noise_sd must be nonnegative, got {}",
                self.noise_sd
            )));
        }
        if !(self.count_scale > 0.0 && self.count_scale.is_finite()) {
            return Err(Error::invalid(format!(
                "count_scale must be positive, got {}",
                self.count_scale
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Wave {
    amp: f64,
    freq: [f64; 2],
    phase: f64,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn random_field(rng: &mut ChaCha8Rng) -> Vec<Wave> {
    let m = rng.random_range(1..=MAX_WAVES);
    let mut waves: Vec<Wave> = (0..m)
        .map(|_| {
            let angle = rng.random_range(0.0..TAU);
            let mag = rng.random_range(0.5..1.5);
            Wave {
                amp: rng.random_range(0.5..1.0),
                freq: [mag * angle.cos(), mag * angle.sin()],
                phase: rng.random_range(0.0..TAU),
            }
        })
        .collect();
    let total: f64 = waves.iter().map(|w| w.amp).sum();
    for w in &mut waves {
        w.amp /= total;
    }
    waves
}

fn eval_field(waves: &[Wave], s: [f64; 2], smoothness: f64) -> f64 {
    waves
        .iter()
        .map(|w| w.amp * ((w.freq[0] * s[0] + w.freq[1] * s[1]) / smoothness + w.phase).sin())
        .sum()
}

/// Spot `r * side + c` sits at `(c, r)` with id `r<r>_c<c>`.
pub fn grid_coords(side: usize) -> SpatialCoords {
    let ids = (0..side * side)
        .map(|i| format!("r{}_c{}", i / side, i % side))
        .collect();
    let data = (0..side * side)
        .flat_map(|i| [(i % side) as f64, (i / side) as f64])
        .collect();
    SpatialCoords::new(
        ids,
        Tensor::matrix(side * side, 2, data).expect("grid shape"),
    )
    .expect("grid coords")
}

/// Generates counts and coordinates; identical configs give identical output.
pub fn generate(config: &SynthConfig) -> Result<(ExpressionMatrix, SpatialCoords)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let fields: Vec<Vec<Wave>> = (0..config.n_patterns)
        .map(|_| random_field(&mut rng))
        .collect();
    let loading_scale = LOADING_SD / (config.n_patterns as f64).sqrt();
    let loadings: Vec<f64> = (0..config.n_genes * config.n_patterns)
        .map(|_| loading_scale * rng.sample::<f64, _>(StandardNormal))
        .collect();

    let coords = grid_coords(config.grid_side);
    let n = coords.len();
    let mut values = Vec::with_capacity(n * config.n_genes);
    let mut f = vec![0.0; config.n_patterns];
    for i in 0..n {
        let s = coords.point(i);
        for (p, waves) in fields.iter().enumerate() {
            f[p] = eval_field(waves, s, config.smoothness);
        }
        for j in 0..config.n_genes {
            let eta: f64 = (0..config.n_patterns)
                .map(|p| loadings[j * config.n_patterns + p] * f[p])
                .sum();
            let noise = if config.noise_sd > 0.0 {
                config.noise_sd * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            values.push(
                (config.count_scale * (softplus(eta) + noise))
                    .round()
                    .max(0.0),
            );
        }
    }
    let genes = (0..config.n_genes).map(|j| format!("gene{j}")).collect();
    let x = ExpressionMatrix::new(
        Tensor::matrix(n, config.n_genes, values)?,
        coords.spot_ids.clone(),
        genes,
    )?;
    Ok((x, coords))
}

/// Coordinate along which grid lines are interleaved.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
}

impl Axis {
    fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
        }
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" | "X" => Ok(Axis::X),
            "y" | "Y" => Ok(Axis::Y),
            other => Err(Error::invalid(format!(
                "axis must be x or y, got {other:?}"
            ))),
        }
    }
}

/// Training and test sections with their coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct SectionSplit {
    pub train: (ExpressionMatrix, SpatialCoords),
    pub test: (ExpressionMatrix, SpatialCoords),
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Whether grid line `r` goes to the training side: spreads a `fraction` of
/// lines evenly, so `0.5` sends odd lines to training and even lines to test.
pub fn line_is_train(r: usize, fraction: f64) -> bool {
    ((r + 1) as f64 * fraction).floor() > (r as f64 * fraction).floor()
}

/// Splits spots by interleaving the lines of constant coordinate along
/// `axis`. Lines are ranked by their distinct coordinate values.
pub fn train_test_split_sections(
    x: &ExpressionMatrix,
    coords: &SpatialCoords,
    axis: Axis,
    fraction: f64,
) -> Result<SectionSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!(
            "fraction must lie in (0, 1), got {fraction}"
        )));
    }
    if x.n_spots() != coords.len() {
        return Err(Error::invalid(format!(
            "{} expression rows for {} coordinates",
            x.n_spots(),
            coords.len()
        )));
    }
    let a = axis.index();
    let mut levels: Vec<f64> = (0..coords.len()).map(|i| coords.point(i)[a]).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for i in 0..coords.len() {
        let v = coords.point(i)[a];
        let r = levels.partition_point(|&l| l < v);
        if line_is_train(r, fraction) {
            train.push(i);
        } else {
            test.push(i);
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Degenerate(format!(
            "split leaves {} training and {} test spots",
            train.len(),
            test.len()
        )));
    }
    Ok(SectionSplit {
        train: (x.select_spots(&train), coords.subset(&train)),
        test: (x.select_spots(&test), coords.subset(&test)),
        train_indices: train,
        test_indices: test,
    })
}
