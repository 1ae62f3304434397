use crate::error::{Error, Result};
use crate::stats;

/// Split potential scale reduction factor.
///
/// Each chain is cut into a first and a second half (the middle draw of an
/// odd-length chain is dropped). With `m` half-chains of length `n`, `W` is
/// the mean within-half variance and `B` is `n` times the variance of the
/// half means; the result is `sqrt(((n - 1) / n W + B / n) / W)`.
/// Constant, identical chains give exactly 1.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::InsufficientLength(format!(
            "split R-hat needs at least 2 chains, got {}",
            chains.len()
        )));
    }
    let len = chains[0].len();
    if chains.iter().any(|c| c.len() != len) {
        return Err(Error::InsufficientLength(
            "chains have different lengths".into(),
        ));
    }
    if len < 4 {
        return Err(Error::InsufficientLength(format!(
            "chains need at least 4 draws, got {len}"
        )));
    }
    let n = len / 2;
    let halves: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| [&c[..n], &c[len - n..]])
        .collect();
    let means: Vec<f64> = halves.iter().map(|h| stats::mean(h)).collect();
    let w = stats::mean(
        &halves
            .iter()
            .map(|h| stats::sample_variance(h))
            .collect::<Vec<_>>(),
    );
    let b = n as f64 * stats::sample_variance(&means);
    let nf = n as f64;
    if w == 0.0 {
        return Ok(if b == 0.0 { 1.0 } else { f64::INFINITY });
    }
    Ok((((nf - 1.0) / nf * w + b / nf) / w).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn normal_chain(seed: u64, n: usize, shift: f64) -> Vec<f64> {
        let mut r = rng::stream(seed, &[]);
        (0..n)
            .map(|_| shift + r.sample::<f64, _>(StandardNormal))
            .collect()
    }

    #[test]
    fn constant_chains_are_converged() {
        let chains = vec![vec![3.0; 10], vec![3.0; 10]];
        assert_eq!(split_rhat(&chains).unwrap(), 1.0);
    }

    #[test]
    fn well_mixed_chains() {
        let chains = vec![normal_chain(1, 2000, 0.0), normal_chain(2, 2000, 0.0)];
        assert!(split_rhat(&chains).unwrap() < 1.05);
    }

    #[test]
    fn offset_chains() {
        let chains = vec![normal_chain(1, 2000, 0.0), normal_chain(2, 2000, 10.0)];
        assert!(split_rhat(&chains).unwrap() > 1.5);
    }

    #[test]
    fn short_or_single_chain_is_rejected() {
        assert!(split_rhat(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]).is_err());
        assert!(split_rhat(&[vec![1.0; 10]]).is_err());
        assert!(split_rhat(&[vec![1.0; 10], vec![1.0; 9]]).is_err());
    }

    #[test]
    fn affine_invariance() {
        let chains = vec![
            normal_chain(5, 101, 0.0),
            normal_chain(6, 101, 0.3),
            normal_chain(7, 101, -0.2),
        ];
        let base = split_rhat(&chains).unwrap();
        for (a, s) in [(3.0, 2.0), (-7.5, -0.25)] {
            let moved: Vec<Vec<f64>> = chains
                .iter()
                .map(|c| c.iter().map(|x| a + s * x).collect())
                .collect();
            assert!((split_rhat(&moved).unwrap() - base).abs() < 1e-9);
        }
    }
}
