//! Library-size normalisation, highly-variable-gene selection, and PCA.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default library-size normalisation target.
pub const DEFAULT_SCALE: f64 = 1e4;

/// Spots x genes expression values with identifiers.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpressionMatrix {
    pub values: Tensor,
    pub spot_ids: Vec<String>,
    pub gene_ids: Vec<String>,
}

impl ExpressionMatrix {
    pub fn new(values: Tensor, spot_ids: Vec<String>, gene_ids: Vec<String>) -> Result<Self> {
        if !values.is_matrix() {
            return Err(Error::invalid("expression values must be a matrix"));
        }
        if values.rows() != spot_ids.len() || values.cols() != gene_ids.len() {
            return Err(Error::invalid(format!(
                "expression is {:?} but has {} spot ids and {} gene ids",
                values.shape(),
                spot_ids.len(),
                gene_ids.len()
            )));
        }
        Ok(Self {
            values,
            spot_ids,
            gene_ids,
        })
    }

    pub fn n_spots(&self) -> usize {
        self.values.rows()
    }

    pub fn n_genes(&self) -> usize {
        self.values.cols()
    }

    pub fn select_spots(&self, indices: &[usize]) -> ExpressionMatrix {
        ExpressionMatrix {
            values: self.values.select_rows(indices),
            spot_ids: indices.iter().map(|&i| self.spot_ids[i].clone()).collect(),
            gene_ids: self.gene_ids.clone(),
        }
    }

    pub fn select_genes(&self, indices: &[usize]) -> ExpressionMatrix {
        ExpressionMatrix {
            values: self.values.select_columns(indices),
            spot_ids: self.spot_ids.clone(),
            gene_ids: indices.iter().map(|&j| self.gene_ids[j].clone()).collect(),
        }
    }
}

/// `log(1 + scale * x / rowsum)` for every entry.
pub fn log_normalize(x: &ExpressionMatrix, scale: f64) -> Result<ExpressionMatrix> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::invalid(format!(
            "normalisation scale must be positive, got {scale}"
        )));
    }
    let (rows, cols) = (x.n_spots(), x.n_genes());
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let row = x.values.row(r);
        if let Some(&neg) = row.iter().find(|&&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::invalid(format!(
                "spot {} has invalid expression value {neg}",
                x.spot_ids[r]
            )));
        }
        let total: f64 = row.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Degenerate(format!(
                "spot {} has zero library size",
                x.spot_ids[r]
            )));
        }
        out.extend(row.iter().map(|&v| (scale * v / total).ln_1p()));
    }
    ExpressionMatrix::new(
        Tensor::matrix(rows, cols, out)?,
        x.spot_ids.clone(),
        x.gene_ids.clone(),
    )
}

/// Sample variance (1/(n-1)) of every column.
pub fn column_variances(values: &Tensor) -> Vec<f64> {
    let (rows, cols) = (values.rows(), values.cols());
    let mut mean = vec![0.0; cols];
    for r in 0..rows {
        for (m, v) in mean.iter_mut().zip(values.row(r)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= rows.max(1) as f64;
    }
    let mut var = vec![0.0; cols];
    for r in 0..rows {
        for ((acc, v), m) in var.iter_mut().zip(values.row(r)).zip(&mean) {
            let d = v - m;
            *acc += d * d;
        }
    }
    let denom = rows.saturating_sub(1).max(1) as f64;
    var.iter().map(|v| v / denom).collect()
}

/// Indices of the `n` largest variances, ties to the lower index, returned ascending.
pub fn top_variance_indices(variances: &[f64], n: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::invalid("number of genes to select must be positive"));
    }
    if n > variances.len() {
        return Err(Error::invalid(format!(
            "cannot select {n} of {} genes",
            variances.len()
        )));
    }
    let mut order: Vec<usize> = (0..variances.len()).collect();
    order.sort_by(|&a, &b| variances[b].total_cmp(&variances[a]).then(a.cmp(&b)));
    let mut picked = order[..n].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Highly variable genes of an already log-normalised matrix.
pub fn select_hvg(lognorm: &ExpressionMatrix, n: usize) -> Result<Vec<usize>> {
    top_variance_indices(&column_variances(&lognorm.values), n)
}

/// A fitted principal-component projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `k x genes`, orthonormal rows.
    pub components: Tensor,
    /// Non-increasing, 1/(n-1) convention.
    pub explained_variance: Vec<f64>,
    /// Set when more components were requested than the data has rank.
    pub rank_deficient: bool,
}

const RANK_TOL: f64 = 1e-10;

impl PcaModel {
    pub fn n_components(&self) -> usize {
        self.components.rows()
    }

    pub fn n_features(&self) -> usize {
        self.mean.len()
    }

    /// Projects rows of `x` (spots x genes) onto the components.
    pub fn transform(&self, x: &Tensor) -> Result<Tensor> {
        if !x.is_matrix() || x.cols() != self.n_features() {
            return Err(Error::Shape {
                op: "pca_transform",
                left: x.shape().to_vec(),
                right: vec![self.n_components(), self.n_features()],
            });
        }
        let (n, p, k) = (x.rows(), x.cols(), self.n_components());
        let mut out = vec![0.0; n * k];
        let mut centered = vec![0.0; p];
        for r in 0..n {
            for (c, (v, m)) in centered.iter_mut().zip(x.row(r).iter().zip(&self.mean)) {
                *c = v - m;
            }
            for j in 0..k {
                out[r * k + j] = self
                    .components
                    .row(j)
                    .iter()
                    .zip(&centered)
                    .map(|(a, b)| a * b)
                    .sum();
            }
        }
        Tensor::matrix(n, k, out)
    }

    /// Maps scores back to feature space.
    pub fn inverse_transform(&self, scores: &Tensor) -> Result<Tensor> {
        if !scores.is_matrix() || scores.cols() != self.n_components() {
            return Err(Error::Shape {
                op: "pca_inverse_transform",
                left: scores.shape().to_vec(),
                right: vec![self.n_components(), self.n_features()],
            });
        }
        let (n, p, k) = (scores.rows(), self.n_features(), self.n_components());
        let mut out = Vec::with_capacity(n * p);
        for r in 0..n {
            let s = scores.row(r);
            for c in 0..p {
                let mut v = self.mean[c];
                for j in 0..k {
                    v += s[j] * self.components.get(j, c);
                }
                out.push(v);
            }
        }
        Tensor::matrix(n, p, out)
    }
}

/// Flips `v` so its entry of largest magnitude (first on ties) is nonnegative.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// Extends `basis` (orthonormal rows of length `p`) to `k` rows by
/// Gram-Schmidt against the standard basis.
fn complete_basis(basis: &mut Vec<Vec<f64>>, p: usize, k: usize) {
    let mut e = 0;
    while basis.len() < k && e < p {
        let mut v = vec![0.0; p];
        v[e] = 1.0;
        e += 1;
        for _ in 0..2 {
            for b in basis.iter() {
                let dot: f64 = b.iter().zip(&v).map(|(x, y)| x * y).sum();
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi -= dot * bi;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
}

/// Fits a `k`-component PCA and returns the model with the training scores.
///
/// Components come from an exact symmetric eigendecomposition of whichever of
/// the covariance (genes x genes) or Gram (spots x spots) matrix is smaller.
pub fn pca_fit_transform(x: &Tensor, k: usize) -> Result<(PcaModel, Tensor)> {
    if !x.is_matrix() {
        return Err(Error::invalid("PCA input must be a matrix"));
    }
    let (n, p) = (x.rows(), x.cols());
    if k == 0 || k > n.min(p) {
        return Err(Error::invalid(format!(
            "PCA needs 1 <= k <= min(spots, genes) = {}, got {k}",
            n.min(p)
        )));
    }
    if !x.all_finite() {
        return Err(Error::NonFinite("PCA input".into()));
    }
    let mean: Vec<f64> = (0..p)
        .map(|c| (0..n).map(|r| x.get(r, c)).sum::<f64>() / n as f64)
        .collect();
    let centered = DMatrix::from_fn(n, p, |r, c| x.get(r, c) - mean[c]);
    let denom = (n - 1).max(1) as f64;

    let mut comps: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut variances: Vec<f64> = Vec::with_capacity(k);
    if p <= n {
        let cov = centered.transpose() * &centered / denom;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .total_cmp(&eig.eigenvalues[a])
                .then(a.cmp(&b))
        });
        for &j in order.iter().take(k) {
            comps.push(eig.eigenvectors.column(j).iter().copied().collect());
            variances.push(eig.eigenvalues[j].max(0.0));
        }
    } else {
        let gram = &centered * centered.transpose();
        let eig = SymmetricEigen::new(gram);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .total_cmp(&eig.eigenvalues[a])
                .then(a.cmp(&b))
        });
        let top = eig.eigenvalues[order[0]].max(0.0);
        for &j in order.iter().take(k) {
            let lam = eig.eigenvalues[j];
            if !(lam > RANK_TOL * top.max(1.0)) {
                break;
            }
            let u = eig.eigenvectors.column(j);
            let v = centered.transpose() * u / lam.sqrt();
            comps.push(v.iter().copied().collect());
            variances.push(lam / denom);
        }
        complete_basis(&mut comps, p, k);
        variances.resize(k, 0.0);
    }
    let top = variances.first().copied().unwrap_or(0.0);
    let mut rank_deficient = false;
    for v in variances.iter_mut() {
        if *v <= RANK_TOL * top.max(1.0) {
            *v = 0.0;
            rank_deficient = true;
        }
    }
    for c in comps.iter_mut() {
        fix_sign(c);
    }

    let components = Tensor::matrix(k, p, comps.into_iter().flatten().collect())?;
    let model = PcaModel {
        mean,
        components,
        explained_variance: variances,
        rank_deficient,
    };
    let scores = model.transform(x)?;
    Ok((model, scores))
}

/// Everything needed to turn raw counts into model features, fitted on training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeaturePipeline {
    pub scale: f64,
    pub gene_ids: Vec<String>,
    pub hvg: Vec<usize>,
    pub pca: PcaModel,
}

impl FeaturePipeline {
    /// Normalises, selects `n_hvg` genes and fits `n_components` components.
    pub fn fit(
        x: &ExpressionMatrix,
        n_hvg: usize,
        n_components: usize,
        scale: f64,
    ) -> Result<(Self, Tensor)> {
        let lognorm = log_normalize(x, scale)?;
        let hvg = select_hvg(&lognorm, n_hvg)?;
        let selected = lognorm.values.select_columns(&hvg);
        let (pca, scores) = pca_fit_transform(&selected, n_components)?;
        Ok((
            Self {
                scale,
                gene_ids: x.gene_ids.clone(),
                hvg,
                pca,
            },
            scores,
        ))
    }

    /// Applies the fitted pipeline to new spots with the same genes.
    pub fn transform(&self, x: &ExpressionMatrix) -> Result<Tensor> {
        if x.gene_ids != self.gene_ids {
            return Err(Error::invalid(
                "gene identifiers differ from the fitted pipeline",
            ));
        }
        let lognorm = log_normalize(x, self.scale)?;
        self.pca
            .transform(&lognorm.values.select_columns(&self.hvg))
    }
}
