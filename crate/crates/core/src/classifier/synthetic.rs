//! Synthetic labelled feature sets with planted structure.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::features::{
    beta_feature, cts_feature, pval_feature, se_feature, Diagnosis, FeatureDataset,
};
use super::mlp::Standardizer;
use crate::error::Result;
use crate::rng;
use crate::stats::normal_sf;

fn sample_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("p{i:04}")).collect()
}

fn label_for(i: usize) -> Diagnosis {
    if i % 2 == 0 {
        Diagnosis::NonAd
    } else {
        Diagnosis::Ad
    }
}

/// Two Gaussian blobs in the plane separated by a margin of two standard
/// deviations: each point lies at least one sd from the separating line on
/// its own side. Classes alternate.
pub fn separable_blobs(n: usize, seed: u64) -> Result<FeatureDataset> {
    let mut r = rng::stream(seed, &[0xB1_0B]);
    let u = std::f64::consts::FRAC_1_SQRT_2;
    let mut values = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = label_for(i);
        let side = if label == Diagnosis::Ad { 1.0 } else { -1.0 };
        loop {
            let x: f64 = side * 2.0 * u + r.sample::<f64, _>(StandardNormal);
            let y: f64 = side * 2.0 * u + r.sample::<f64, _>(StandardNormal);
            if side * (x + y) * u >= 1.0 {
                values.extend_from_slice(&[x, y]);
                break;
            }
        }
        labels.push(label);
    }
    FeatureDataset::new(
        vec!["x1".into(), "x2".into()],
        sample_names(n),
        DMatrix::from_row_slice(n, 2, &values),
        Some(labels),
    )
}

const GENES: [&str; 4] = ["APOE", "TREM2", "CLU", "BIN1"];
const CELL_TYPES: [&str; 2] = ["astrocyte", "microglia"];

/// Names of the 28 clinical features: 8 cell-type expression means,
/// beta/se/pval for 4 genes, and 8 covariates.
pub fn clinical_feature_names() -> Vec<String> {
    let mut names = Vec::with_capacity(28);
    for g in GENES {
        for c in CELL_TYPES {
            names.push(cts_feature(g, c));
        }
    }
    for g in GENES {
        names.push(beta_feature(g));
        names.push(se_feature(g));
        names.push(pval_feature(g));
    }
    for c in [
        "age",
        "sex",
        "batch",
        "apoe4_count",
        "ldl",
        "homocysteine",
        "bmi",
        "education_years",
    ] {
        names.push(c.to_string());
    }
    names
}

/// Class separation of a clinical feature in units of its own sd.
fn clinical_shift(name: &str) -> f64 {
    match name {
        "cts:APOE:microglia" => 1.5,
        "cts:TREM2:microglia" => 1.3,
        "cts:CLU:astrocyte" => 1.0,
        "cts:BIN1:microglia" => 0.8,
        "beta:APOE" => 1.3,
        "age" => 1.0,
        "ldl" => 1.0,
        "homocysteine" => 0.8,
        "education_years" => -0.8,
        _ => 0.0,
    }
}

/// Synthetic analogue of a 28-feature clinical dataset with planted class
/// signal. Classes alternate.
pub fn planted_clinical(n: usize, seed: u64) -> Result<FeatureDataset> {
    let names = clinical_feature_names();
    let mut r = rng::stream(seed, &[0xC1_1C]);
    let mut values = DMatrix::zeros(n, names.len());
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = label_for(i);
        let y = if label == Diagnosis::Ad { 0.5 } else { -0.5 };
        let z = |name: &str, r: &mut rng::Rng| {
            r.sample::<f64, _>(StandardNormal) + clinical_shift(name) * y
        };
        let mut betas = [0.0; 4];
        for (j, name) in names.iter().enumerate() {
            let v = match name.as_str() {
                n if n.starts_with("cts:") => 5.0 + z(n, &mut r),
                n if n.starts_with("beta:") => {
                    let g = GENES
                        .iter()
                        .position(|g| n.ends_with(g))
                        .expect("known gene");
                    betas[g] = 0.02 + 0.05 * z(n, &mut r);
                    betas[g]
                }
                n if n.starts_with("se:") => 0.03 + 0.02 * r.random::<f64>(),
                n if n.starts_with("pval:") => {
                    let g = GENES
                        .iter()
                        .position(|g| n.ends_with(g))
                        .expect("known gene");
                    let se: f64 = values[(i, j - 1)];
                    (2.0 * normal_sf((betas[g] / se).abs())).min(1.0)
                }
                "age" => 72.0 + 6.0 * z("age", &mut r),
                "sex" => f64::from(r.random::<bool>()),
                "batch" => f64::from(r.random_range(0..3u8)),
                "apoe4_count" => {
                    let u: f64 = r.random();
                    let (p0, p1) = if label == Diagnosis::Ad {
                        (0.4, 0.85)
                    } else {
                        (0.75, 0.97)
                    };
                    if u < p0 {
                        0.0
                    } else if u < p1 {
                        1.0
                    } else {
                        2.0
                    }
                }
                "ldl" => 120.0 + 25.0 * z("ldl", &mut r),
                "homocysteine" => 11.0 + 3.0 * z("homocysteine", &mut r),
                "bmi" => 26.0 + 4.0 * z("bmi", &mut r),
                "education_years" => 14.0 + 3.0 * z("education_years", &mut r),
                other => unreachable!("unlisted feature {other}"),
            };
            values[(i, j)] = v;
        }
        labels.push(label);
    }
    FeatureDataset::new(names, sample_names(n), values, Some(labels))
}

/// Cohort in which the eQTL effect sizes run against the naive sign rule:
/// AD samples tend to have negative summed beta. Three genes with beta, se
/// and pval, plus two uninformative covariates.
pub fn anti_correlated(n: usize, seed: u64) -> Result<FeatureDataset> {
    let genes = ["APOE", "TREM2", "CLU"];
    let mut names = Vec::new();
    for g in genes {
        names.push(beta_feature(g));
        names.push(se_feature(g));
        names.push(pval_feature(g));
    }
    names.push("age".into());
    names.push("sex".into());
    let mut r = rng::stream(seed, &[0xA17]);
    let noise = Normal::new(0.0, 0.01).expect("positive sd");
    let mut values = DMatrix::zeros(n, names.len());
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let betas: Vec<f64> = (0..3)
            .map(|_| 0.05 * r.sample::<f64, _>(StandardNormal))
            .collect();
        let total: f64 = betas.iter().sum();
        let label = if total + noise.sample(&mut r) < 0.0 {
            Diagnosis::Ad
        } else {
            Diagnosis::NonAd
        };
        for (k, b) in betas.iter().enumerate() {
            let se = 0.03 + 0.02 * r.random::<f64>();
            values[(i, 3 * k)] = *b;
            values[(i, 3 * k + 1)] = se;
            values[(i, 3 * k + 2)] = (2.0 * normal_sf((b / se).abs())).min(1.0);
        }
        values[(i, 9)] = 72.0 + 6.0 * r.sample::<f64, _>(StandardNormal);
        values[(i, 10)] = f64::from(r.random::<bool>());
        labels.push(label);
    }
    FeatureDataset::new(names, sample_names(n), values, Some(labels))
}

/// Evaluation set with planted outliers relative to `stats`.
///
/// Inliers sit within 0.8 sd of the training mean on every kept feature.
/// Each outlier is an inlier with one feature pushed to 3 sd. Returns the
/// dataset and the sorted outlier rows.
pub fn planted_outliers(
    stats: &Standardizer,
    names: &[String],
    n_inliers: usize,
    n_outliers: usize,
    seed: u64,
) -> Result<(FeatureDataset, Vec<usize>)> {
    let n = n_inliers + n_outliers;
    let d = stats.n_inputs();
    let kept: Vec<usize> = (0..d).filter(|&j| stats.keep[j]).collect();
    let mut r = rng::stream(seed, &[0x00D]);
    let mut values = DMatrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            let u: f64 = r.random_range(-0.8..0.8);
            values[(i, j)] = stats.mean[j] + u * stats.sd[j];
        }
    }
    // Interleave outliers deterministically through the set.
    let mut rows: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(rows.as_mut_slice(), &mut r);
    let mut outliers: Vec<usize> = rows[..n_outliers].to_vec();
    outliers.sort_unstable();
    for &i in &outliers {
        let j = kept[r.random_range(0..kept.len())];
        let side = if r.random::<bool>() { 3.0 } else { -3.0 };
        values[(i, j)] = stats.mean[j] + side * stats.sd[j];
    }
    let labels = (0..n).map(label_for).collect();
    let ds = FeatureDataset::new(names.to_vec(), sample_names(n), values, Some(labels))?;
    Ok((ds, outliers))
}
