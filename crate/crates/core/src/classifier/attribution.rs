use serde::{Deserialize, Serialize};

use super::mlp::MlpModel;
use crate::error::{Error, Result};

/// Integrated Gradients of the model's logit along the straight path from
/// `baseline` to `x`, by the midpoint rule on a grid of `steps` cells:
/// `(x - b) * mean_k grad f(b + (k - 1/2)/steps (x - b))`.
///
/// The logit is piecewise linear along the path. A cell in which a hidden
/// unit changes sign is split at the crossings and each piece contributes
/// its midpoint gradient weighted by its length. Cells without a crossing
/// are the plain midpoint rule, and the attributions sum to
/// `f(x) - f(baseline)` up to rounding.
pub fn integrated_gradients(
    model: &MlpModel,
    x: &[f64],
    baseline: &[f64],
    steps: usize,
) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::Invalid(
            "integrated gradients needs at least one step".into(),
        ));
    }
    let d = model.n_inputs();
    if x.len() != d || baseline.len() != d {
        return Err(Error::Dimension(format!(
            "input {} and baseline {} for a model with {d} features",
            x.len(),
            baseline.len()
        )));
    }
    let delta: Vec<f64> = x.iter().zip(baseline).map(|(a, b)| a - b).collect();
    let at = |t: f64| -> Vec<f64> {
        baseline
            .iter()
            .zip(&delta)
            .map(|(b, dx)| b + t * dx)
            .collect()
    };
    let mut total = vec![0.0; d];
    let add_piece = |t0: f64, t1: f64, total: &mut [f64]| -> Result<()> {
        let w = (t1 - t0) * steps as f64;
        for (acc, g) in total
            .iter_mut()
            .zip(model.input_gradient(&at(0.5 * (t0 + t1)))?)
        {
            *acc += w * g;
        }
        Ok(())
    };
    for k in 0..steps {
        let t0 = k as f64 / steps as f64;
        let t1 = (k + 1) as f64 / steps as f64;
        let (a0, _) = model.hidden_preactivations(&at(t0))?;
        let (a1, _) = model.hidden_preactivations(&at(t1))?;
        let mut cuts = vec![t0, t1];
        cuts.extend(crossings(a0.as_slice(), a1.as_slice(), t0, t1));
        cuts.sort_by(f64::total_cmp);
        for seg in cuts.windows(2) {
            let (s0, s1) = (seg[0], seg[1]);
            if s1 <= s0 {
                continue;
            }
            // The second layer is affine between first-layer crossings.
            let (_, b0) = model.hidden_preactivations(&at(s0))?;
            let (_, b1) = model.hidden_preactivations(&at(s1))?;
            let mut inner = vec![s0, s1];
            inner.extend(crossings(b0.as_slice(), b1.as_slice(), s0, s1));
            inner.sort_by(f64::total_cmp);
            for piece in inner.windows(2) {
                if piece[1] > piece[0] {
                    add_piece(piece[0], piece[1], &mut total)?;
                }
            }
        }
    }
    Ok(total
        .iter()
        .zip(&delta)
        .map(|(g, dx)| dx * g / steps as f64)
        .collect())
}

/// Points in `(t0, t1)` where an affine pre-activation with endpoint values
/// `a0` and `a1` changes sign.
fn crossings(a0: &[f64], a1: &[f64], t0: f64, t1: f64) -> Vec<f64> {
    a0.iter()
        .zip(a1)
        .filter(|(u, v)| (**u > 0.0) != (**v > 0.0) && u != v)
        .map(|(u, v)| t0 + (t1 - t0) * u / (u - v))
        .filter(|t| *t > t0 && *t < t1)
        .collect()
}

/// Default baseline: the training mean, which is the origin of the
/// standardized input space.
pub fn default_baseline(model: &MlpModel) -> Vec<f64> {
    model.standardizer.mean.clone()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedFeature {
    pub name: String,
    pub value: f64,
    pub attribution: f64,
}

/// The `k` features with the largest |attribution|; ties go to the
/// lexicographically smaller name. `k` larger than the feature count
/// returns every feature.
pub fn top_k_features(
    attributions: &[f64],
    names: &[String],
    values: &[f64],
    k: usize,
) -> Result<Vec<RankedFeature>> {
    if attributions.len() != names.len() || values.len() != names.len() {
        return Err(Error::Dimension(format!(
            "{} attributions, {} names, {} values",
            attributions.len(),
            names.len(),
            values.len()
        )));
    }
    let mut idx: Vec<usize> = (0..names.len()).collect();
    idx.sort_by(|&a, &b| {
        attributions[b]
            .abs()
            .total_cmp(&attributions[a].abs())
            .then_with(|| names[a].cmp(&names[b]))
    });
    Ok(idx
        .into_iter()
        .take(k)
        .map(|j| RankedFeature {
            name: names[j].clone(),
            value: values[j],
            attribution: attributions[j],
        })
        .collect())
}
