use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use super::sampler::PosteriorSummary;
use crate::data::{GenePrior, RefinementConfig};
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{self, tag};

/// Maximum attempts at an SPD inverse-Wishart draw per gene.
pub const MAX_DRAW_ATTEMPTS: usize = 100;

/// Draw from Inverse-Wishart(`psi`, `nu`), whose mean is `psi / (nu - p - 1)`.
///
/// Uses the Bartlett decomposition of Wishart(`psi^-1`, `nu`) and inverts.
/// Returns `None` when the draw is not numerically SPD.
pub fn inverse_wishart<R: Rng + ?Sized>(
    rng: &mut R,
    psi: &DMatrix<f64>,
    nu: f64,
) -> Result<Option<DMatrix<f64>>> {
    let p = psi.nrows();
    if !(nu > p as f64 - 1.0) {
        return Err(Error::Invalid(format!(
            "inverse-Wishart needs nu > {}, got {nu}",
            p as f64 - 1.0
        )));
    }
    let psi_inv = linalg::cholesky(psi)
        .ok_or_else(|| Error::Invalid("inverse-Wishart scale is not positive definite".into()))?
        .inverse();
    let l = match linalg::cholesky(&linalg::symmetrize(&psi_inv)) {
        Some(c) => c.l(),
        None => return Ok(None),
    };
    let mut a = DMatrix::zeros(p, p);
    for i in 0..p {
        let chi = ChiSquared::new(nu - i as f64)
            .map_err(|e| Error::Invalid(format!("chi-squared: {e}")))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let la = l * a;
    let w = &la * la.transpose();
    let Some(chol) = linalg::cholesky(&linalg::symmetrize(&w)) else {
        return Ok(None);
    };
    let sigma = linalg::symmetrize(&chol.inverse());
    if sigma.iter().all(|x| x.is_finite()) && linalg::is_positive_definite(&sigma) {
        Ok(Some(sigma))
    } else {
        Ok(None)
    }
}

/// Second-stage priors from a completed run: means jittered around the
/// posterior mean by `tau`, covariances drawn from an inverse-Wishart whose
/// mean is the posterior covariance estimate, noise set to its posterior
/// mean.
pub fn refine_priors(
    summary: &PosteriorSummary,
    priors: &[GenePrior],
    config: &RefinementConfig,
    seed: u64,
) -> Result<Vec<GenePrior>> {
    if summary.mu_hat.len() != priors.len() {
        return Err(Error::Dimension(format!(
            "summary covers {} genes, {} priors given",
            summary.mu_hat.len(),
            priors.len()
        )));
    }
    let c_n = priors.first().map_or(0, |p| p.n_cell_types());
    config.validate(c_n)?;
    let nu = config.nu_for(c_n);
    priors
        .iter()
        .enumerate()
        .map(|(g, prior)| {
            let mut rng = rng::stream(seed, &[tag::REFINE, g as u64]);
            let jitter = linalg::standard_normal(&mut rng, c_n) * config.tau;
            let mu: DVector<f64> = if config.tau == 0.0 {
                summary.mu_hat[g].clone()
            } else {
                &summary.mu_hat[g] + jitter
            };
            let psi = &summary.sigma_hat[g] * (nu - c_n as f64 - 1.0);
            for _ in 0..MAX_DRAW_ATTEMPTS {
                if let Some(sigma) = inverse_wishart(&mut rng, &psi, nu)? {
                    return GenePrior::new(
                        prior.gene().to_string(),
                        mu,
                        sigma,
                        summary.noise_var_hat[g],
                    );
                }
            }
            Err(Error::RetryExhausted {
                attempts: MAX_DRAW_ATTEMPTS,
                what: format!("inverse-Wishart covariance for {}", prior.gene()),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn mean_matches_scale_over_dof() {
        // E[IW(psi, nu)] = psi / (nu - p - 1).
        let psi = dmatrix![2.0, 0.5; 0.5, 1.0];
        let nu = 12.0;
        let mut r = rng::stream(9, &[]);
        let n = 20_000;
        let mut acc = DMatrix::zeros(2, 2);
        for _ in 0..n {
            acc += inverse_wishart(&mut r, &psi, nu).unwrap().unwrap();
        }
        let expected = &psi / (nu - 3.0);
        assert!(((acc / n as f64) - expected).abs().max() < 0.01);
    }

    #[test]
    fn large_dof_concentrates() {
        let sigma_hat = dmatrix![1.0, 0.3, 0.0; 0.3, 2.0, -0.2; 0.0, -0.2, 0.7];
        let distance = |nu: f64| {
            let mut r = rng::stream(3, &[nu as u64]);
            let psi = &sigma_hat * (nu - 4.0);
            (0..100)
                .map(|_| (inverse_wishart(&mut r, &psi, nu).unwrap().unwrap() - &sigma_hat).norm())
                .sum::<f64>()
                / 100.0
        };
        assert!(distance(1000.0) < distance(5.0));
    }
}
