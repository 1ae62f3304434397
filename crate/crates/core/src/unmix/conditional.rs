use nalgebra::{DMatrix, DVector};

use crate::data::{AdjustmentParams, GenePrior, SampleMeta};
use crate::error::{Error, Result};
use crate::linalg;

/// Exact Gaussian full conditional of one sample's cell-type vector.
///
/// With residual `r = x - gamma.c1 - w^T b c2`, the conditional of `z` is
/// Normal with covariance `(S^-1 + w w^T / s2)^-1` and mean
/// `cov (S^-1 mu + w r / s2)`. Both are evaluated through the rank-one
/// (Sherman-Morrison) form, which never inverts the prior covariance.
pub fn z_conditional(
    prior: &GenePrior,
    x: f64,
    meta: &SampleMeta,
    adjustment: &AdjustmentParams,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let w = meta.proportions();
    if w.len() != prior.n_cell_types() {
        return Err(Error::Dimension(format!(
            "sample {} has {} proportions, prior has {} cell types",
            meta.sample_id(),
            w.len(),
            prior.n_cell_types()
        )));
    }
    adjustment.check_shape(w.len(), meta.bulk_cov().len(), meta.cts_cov().len())?;
    let r = x - adjustment.offset(meta);
    if !r.is_finite() {
        return Err(Error::NonFinite("residual target".into()));
    }
    conditional_from_parts(prior.mu(), prior.sigma(), w, r, prior.noise_var())
}

pub(crate) fn conditional_from_parts(
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    w: &DVector<f64>,
    r: f64,
    noise_var: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if noise_var == f64::INFINITY {
        return Ok((mu.clone(), sigma.clone()));
    }
    let sw = sigma * w;
    let s = w.dot(&sw) + noise_var;
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::SingularPrecision);
    }
    let gain = &sw / s;
    let mean = mu + &gain * (r - w.dot(mu));
    let cov = linalg::symmetrize(&(sigma - &gain * sw.transpose()));
    Ok((mean, cov))
}
