use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::features::{Diagnosis, FeatureDataset};
use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::rng::{self, tag};

pub const HIDDEN1: usize = 16;
pub const HIDDEN2: usize = 8;

/// Per-feature standardization fitted on training rows. Features with zero
/// training variance are masked out of the network input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub keep: Vec<bool>,
}

impl Standardizer {
    /// Population mean and standard deviation of `rows` of `x`.
    pub fn fit(x: &DMatrix<f64>, rows: &[usize]) -> Self {
        let n = rows.len() as f64;
        let d = x.ncols();
        let mut mean = vec![0.0; d];
        let mut sd = vec![0.0; d];
        for j in 0..d {
            let m = rows.iter().map(|&i| x[(i, j)]).sum::<f64>() / n;
            let v = rows.iter().map(|&i| (x[(i, j)] - m).powi(2)).sum::<f64>() / n;
            mean[j] = m;
            sd[j] = v.sqrt();
        }
        let keep = sd
            .iter()
            .zip(&mean)
            .map(|(s, m)| *s > 1e-12 * m.abs().max(1.0))
            .collect();
        Standardizer { mean, sd, keep }
    }

    pub fn identity(d: usize) -> Self {
        Standardizer {
            mean: vec![0.0; d],
            sd: vec![1.0; d],
            keep: vec![true; d],
        }
    }

    pub fn n_inputs(&self) -> usize {
        self.mean.len()
    }

    pub fn n_kept(&self) -> usize {
        self.keep.iter().filter(|k| **k).count()
    }

    pub fn transform(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.n_inputs() {
            return Err(Error::Dimension(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.n_inputs()
            )));
        }
        Ok(DVector::from_iterator(
            self.n_kept(),
            (0..x.len())
                .filter(|&j| self.keep[j])
                .map(|j| (x[j] - self.mean[j]) / self.sd[j]),
        ))
    }

    /// Chain a gradient with respect to the standardized input back to raw
    /// features; masked features get zero.
    fn to_raw_gradient(&self, g: &DVector<f64>) -> Vec<f64> {
        let mut out = vec![0.0; self.n_inputs()];
        let mut k = 0;
        for j in 0..out.len() {
            if self.keep[j] {
                out[j] = g[k] / self.sd[j];
                k += 1;
            }
        }
        out
    }
}

/// Weights and biases of the three layers. The same shape holds gradients
/// and optimizer moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub w3: DMatrix<f64>,
    pub b3: DVector<f64>,
}

impl Params {
    pub fn zeros(d: usize) -> Self {
        Params {
            w1: DMatrix::zeros(HIDDEN1, d),
            b1: DVector::zeros(HIDDEN1),
            w2: DMatrix::zeros(HIDDEN2, HIDDEN1),
            b2: DVector::zeros(HIDDEN2),
            w3: DMatrix::zeros(1, HIDDEN2),
            b3: DVector::zeros(1),
        }
    }

    /// He-normal weights, zero biases.
    pub fn he<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let mut init = |rows: usize, cols: usize| {
            let dist = Normal::new(0.0, (2.0 / cols.max(1) as f64).sqrt()).expect("positive sd");
            DMatrix::from_fn(rows, cols, |_, _| dist.sample(rng))
        };
        let w1 = init(HIDDEN1, d);
        let w2 = init(HIDDEN2, HIDDEN1);
        let w3 = init(1, HIDDEN2);
        Params {
            w1,
            b1: DVector::zeros(HIDDEN1),
            w2,
            b2: DVector::zeros(HIDDEN2),
            w3,
            b3: DVector::zeros(1),
        }
    }

    pub fn n_inputs(&self) -> usize {
        self.w1.ncols()
    }

    pub fn slices(&self) -> [&[f64]; 6] {
        [
            self.w1.as_slice(),
            self.b1.as_slice(),
            self.w2.as_slice(),
            self.b2.as_slice(),
            self.w3.as_slice(),
            self.b3.as_slice(),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_mut_slice(),
            self.b1.as_mut_slice(),
            self.w2.as_mut_slice(),
            self.b2.as_mut_slice(),
            self.w3.as_mut_slice(),
            self.b3.as_mut_slice(),
        ]
    }

    pub fn flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        let mut k = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&values[k..k + s.len()]);
            k += s.len();
        }
    }

    fn add_scaled(&mut self, other: &Params, a: f64) {
        for (s, o) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in s.iter_mut().zip(o) {
                *x += a * y;
            }
        }
    }

    fn scale(&mut self, a: f64) {
        for s in self.slices_mut() {
            for x in s.iter_mut() {
                *x *= a;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

pub type Gradients = Params;

/// Input to 16 to 8 to 1 network with ReLU hidden layers and a sigmoid
/// output, plus the standardization learned from training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub feature_names: Vec<String>,
    pub standardizer: Standardizer,
    pub params: Params,
    pub dropout: f64,
    /// SHA-256 of the training configuration JSON.
    pub config_hash: String,
}

struct Cache {
    x: DVector<f64>,
    a1: DVector<f64>,
    h1: DVector<f64>,
    m1: Option<DVector<f64>>,
    a2: DVector<f64>,
    h2: DVector<f64>,
    m2: Option<DVector<f64>>,
    logit: f64,
}

fn relu(v: &DVector<f64>) -> DVector<f64> {
    v.map(|x| x.max(0.0))
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of a logit, computed without forming the
/// probability: softplus(z) - y z.
pub fn bce_from_logit(z: f64, y: f64) -> f64 {
    let softplus = if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    };
    softplus - y * z
}

fn dropout_mask<R: Rng + ?Sized>(rng: &mut R, n: usize, rate: f64) -> DVector<f64> {
    let keep = 1.0 / (1.0 - rate);
    DVector::from_fn(n, |_, _| {
        if rng.random::<f64>() < rate {
            0.0
        } else {
            keep
        }
    })
}

fn run_forward(p: &Params, x: DVector<f64>, masks: Option<(DVector<f64>, DVector<f64>)>) -> Cache {
    let (m1, m2) = match masks {
        Some((a, b)) => (Some(a), Some(b)),
        None => (None, None),
    };
    let a1 = &p.w1 * &x + &p.b1;
    let mut h1 = relu(&a1);
    if let Some(m) = &m1 {
        h1.component_mul_assign(m);
    }
    let a2 = &p.w2 * &h1 + &p.b2;
    let mut h2 = relu(&a2);
    if let Some(m) = &m2 {
        h2.component_mul_assign(m);
    }
    let logit = (&p.w3 * &h2)[0] + p.b3[0];
    Cache {
        x,
        a1,
        h1,
        m1,
        a2,
        h2,
        m2,
        logit,
    }
}

/// Gradients of `dz * logit` with respect to the parameters and the
/// standardized input.
fn run_backward(p: &Params, c: &Cache, dz: f64) -> (Params, DVector<f64>) {
    let gate = |a: &DVector<f64>, m: &Option<DVector<f64>>, d: DVector<f64>| {
        DVector::from_fn(a.len(), |k, _| {
            let on = if a[k] > 0.0 { 1.0 } else { 0.0 };
            d[k] * on * m.as_ref().map_or(1.0, |m| m[k])
        })
    };
    let dh2 = p.w3.transpose() * dz;
    let dh2 = DVector::from_column_slice(dh2.as_slice());
    let da2 = gate(&c.a2, &c.m2, dh2);
    let dh1 = p.w2.transpose() * &da2;
    let da1 = gate(&c.a1, &c.m1, dh1);
    let dx = p.w1.transpose() * &da1;
    let grads = Params {
        w1: &da1 * c.x.transpose(),
        b1: da1,
        w2: &da2 * c.h1.transpose(),
        b2: da2,
        w3: DMatrix::from_row_slice(1, c.h2.len(), (c.h2.clone() * dz).as_slice()),
        b3: DVector::from_element(1, dz),
    };
    (grads, dx)
}

impl MlpModel {
    pub fn new(
        feature_names: Vec<String>,
        standardizer: Standardizer,
        params: Params,
        dropout: f64,
    ) -> Result<Self> {
        if feature_names.len() != standardizer.n_inputs() {
            return Err(Error::Dimension(format!(
                "{} feature names for {} standardized inputs",
                feature_names.len(),
                standardizer.n_inputs()
            )));
        }
        if params.n_inputs() != standardizer.n_kept() {
            return Err(Error::Dimension(format!(
                "first layer takes {} inputs, {} features are kept",
                params.n_inputs(),
                standardizer.n_kept()
            )));
        }
        if params.w1.nrows() != HIDDEN1
            || params.b1.len() != HIDDEN1
            || params.w2.shape() != (HIDDEN2, HIDDEN1)
            || params.b2.len() != HIDDEN2
            || params.w3.shape() != (1, HIDDEN2)
            || params.b3.len() != 1
        {
            return Err(Error::Dimension("layer shapes must be d-16-8-1".into()));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Invalid(format!(
                "dropout rate must lie in [0, 1), got {dropout}"
            )));
        }
        if params
            .slices()
            .iter()
            .flat_map(|s| s.iter())
            .any(|x| !x.is_finite())
        {
            return Err(Error::NonFinite("model weights".into()));
        }
        Ok(MlpModel {
            feature_names,
            standardizer,
            params,
            dropout,
            config_hash: String::new(),
        })
    }

    pub fn n_inputs(&self) -> usize {
        self.standardizer.n_inputs()
    }

    /// Pre-sigmoid output in inference mode.
    pub fn logit(&self, x: &[f64]) -> Result<f64> {
        let xs = self.standardizer.transform(x)?;
        Ok(run_forward(&self.params, xs, None).logit)
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.logit(x)?))
    }

    pub fn predict(&self, x: &[f64]) -> Result<Diagnosis> {
        Ok(Diagnosis::from_probability(self.predict_proba(x)?))
    }

    /// Gradient of the logit with respect to the raw input features.
    pub fn input_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let xs = self.standardizer.transform(x)?;
        let cache = run_forward(&self.params, xs, None);
        let (_, dx) = run_backward(&self.params, &cache, 1.0);
        Ok(self.standardizer.to_raw_gradient(&dx))
    }

    /// Pre-activations of both hidden layers in inference mode.
    pub(crate) fn hidden_preactivations(&self, x: &[f64]) -> Result<(DVector<f64>, DVector<f64>)> {
        let xs = self.standardizer.transform(x)?;
        let c = run_forward(&self.params, xs, None);
        Ok((c.a1, c.a2))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: MlpModel = read_json(path)?;
        let hash = m.config_hash.clone();
        let mut checked = MlpModel::new(m.feature_names, m.standardizer, m.params, m.dropout)?;
        checked.config_hash = hash;
        Ok(checked)
    }
}

/// Output probability. With `training`, inverted dropout masks drawn from
/// `seed` scale the hidden activations; otherwise `seed` is unused.
pub fn forward(model: &MlpModel, x: &[f64], training: bool, seed: u64) -> Result<f64> {
    let xs = model.standardizer.transform(x)?;
    let masks = (training && model.dropout > 0.0).then(|| {
        let mut r = rng::stream(seed, &[tag::DROPOUT]);
        let m1 = dropout_mask(&mut r, HIDDEN1, model.dropout);
        let m2 = dropout_mask(&mut r, HIDDEN2, model.dropout);
        (m1, m2)
    });
    Ok(sigmoid(run_forward(&model.params, xs, masks).logit))
}

/// Binary cross-entropy of one example in inference mode.
pub fn bce_loss(model: &MlpModel, x: &[f64], y: f64) -> Result<f64> {
    Ok(bce_from_logit(model.logit(x)?, y))
}

/// Exact gradient of `loss_scale * BCE(x, y)` with respect to every weight,
/// with dropout disabled.
pub fn backprop_gradient(
    model: &MlpModel,
    x: &[f64],
    y: f64,
    loss_scale: f64,
) -> Result<Gradients> {
    let xs = model.standardizer.transform(x)?;
    let cache = run_forward(&model.params, xs, None);
    let dz = loss_scale * (sigmoid(cache.logit) - y);
    Ok(run_backward(&model.params, &cache, dz).0)
}

/// Optimizer and early-stopping settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub dropout: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            batch_size: 16,
            max_epochs: 500,
            patience: 10,
            val_fraction: 0.2,
            dropout: 0.2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!(
                "val_fraction must lie in (0, 1), got {}",
                self.val_fraction
            ));
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.epsilon > 0.0)
        {
            return bad("Adam needs beta1, beta2 in [0, 1) and epsilon > 0".into());
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss over the epoch's mini-batches, dropout active.
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub log: Vec<EpochLog>,
    /// Epoch whose weights were kept; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub train_rows: Vec<usize>,
    pub val_rows: Vec<usize>,
}

/// Stratified split: `val_fraction` of each class, at least one example of
/// each class on each side.
fn stratified_split(labels: &[Diagnosis], frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut r = rng::stream(seed, &[tag::SPLIT]);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in [Diagnosis::NonAd, Diagnosis::Ad] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut r);
        let k = ((frac * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        val.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

struct Adam {
    m: Params,
    v: Params,
    t: i32,
}

impl Adam {
    fn step(&mut self, params: &mut Params, g: &Params, c: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        let (ms, vs, gs) = (self.m.slices_mut(), self.v.slices_mut(), g.slices());
        for (((p, m), v), g) in params.slices_mut().into_iter().zip(ms).zip(vs).zip(gs) {
            for k in 0..p.len() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] -= c.lr * mh / (vh.sqrt() + c.epsilon);
            }
        }
    }
}

/// Mini-batch Adam on binary cross-entropy with a stratified validation
/// split and early stopping; returns the weights with the lowest
/// validation loss. Single-threaded and deterministic given the seed.
pub fn train(dataset: &FeatureDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let labels = dataset
        .labels()
        .ok_or_else(|| Error::Invalid("training data needs labels".into()))?;
    let n_ad = labels.iter().filter(|l| **l == Diagnosis::Ad).count();
    let n_non = labels.len() - n_ad;
    if n_ad == 0 || n_non == 0 {
        return Err(Error::SingleClass);
    }
    if n_ad < 2 || n_non < 2 {
        return Err(Error::Invalid(format!(
            "each class needs at least 2 samples; got {n_ad} AD and {n_non} nonAD"
        )));
    }
    let (train_rows, val_rows) = stratified_split(labels, config.val_fraction, config.seed);
    let standardizer = Standardizer::fit(dataset.values(), &train_rows);
    let xs: Vec<DVector<f64>> = (0..dataset.n_samples())
        .map(|i| standardizer.transform(&dataset.row(i)))
        .collect::<Result<_>>()?;
    let ys: Vec<f64> = labels.iter().map(|l| l.target()).collect();

    let mut init_rng = rng::stream(config.seed, &[tag::TRAIN, 0]);
    let mut params = Params::he(standardizer.n_kept(), &mut init_rng);
    let mut model = MlpModel::new(
        dataset.names().to_vec(),
        standardizer,
        params.clone(),
        config.dropout,
    )?;
    model.config_hash = config.hash();
    if config.max_epochs == 0 {
        return Ok(TrainOutcome {
            model,
            log: Vec::new(),
            best_epoch: None,
            stopped_early: false,
            train_rows,
            val_rows,
        });
    }

    let d = params.n_inputs();
    let mut adam = Adam {
        m: Params::zeros(d),
        v: Params::zeros(d),
        t: 0,
    };
    let mut r = rng::stream(config.seed, &[tag::TRAIN, 1]);
    let mut order = train_rows.clone();
    let mut best = (f64::INFINITY, params.clone(), 0usize);
    let mut wait = 0;
    let mut log = Vec::new();
    let mut stopped_early = false;
    for epoch in 0..config.max_epochs {
        order.shuffle(&mut r);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut g = Params::zeros(d);
            for &i in batch {
                let masks = (config.dropout > 0.0).then(|| {
                    (
                        dropout_mask(&mut r, HIDDEN1, config.dropout),
                        dropout_mask(&mut r, HIDDEN2, config.dropout),
                    )
                });
                let cache = run_forward(&params, xs[i].clone(), masks);
                loss_sum += bce_from_logit(cache.logit, ys[i]);
                let (gi, _) = run_backward(&params, &cache, sigmoid(cache.logit) - ys[i]);
                g.add_scaled(&gi, 1.0);
            }
            g.scale(1.0 / batch.len() as f64);
            adam.step(&mut params, &g, config);
        }
        let mut val_loss = 0.0;
        let mut correct = 0;
        for &i in &val_rows {
            let z = run_forward(&params, xs[i].clone(), None).logit;
            val_loss += bce_from_logit(z, ys[i]);
            if Diagnosis::from_probability(sigmoid(z)) == labels[i] {
                correct += 1;
            }
        }
        val_loss /= val_rows.len() as f64;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "validation loss at epoch {epoch}"
            )));
        }
        log.push(EpochLog {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            val_loss,
            val_accuracy: correct as f64 / val_rows.len() as f64,
        });
        if val_loss < best.0 {
            best = (val_loss, params.clone(), epoch);
            wait = 0;
        } else {
            wait += 1;
            if wait >= config.patience {
                stopped_early = true;
                break;
            }
        }
    }
    model.params = best.1;
    Ok(TrainOutcome {
        model,
        log,
        best_epoch: Some(best.2),
        stopped_early,
        train_rows,
        val_rows,
    })
}

/// Fraction of labelled samples the model classifies correctly.
pub fn accuracy(model: &MlpModel, dataset: &FeatureDataset) -> Result<f64> {
    let labels = dataset
        .labels()
        .ok_or_else(|| Error::Invalid("accuracy needs labels".into()))?;
    if labels.is_empty() {
        return Err(Error::Empty("no samples to score".into()));
    }
    let mut correct = 0;
    for (i, l) in labels.iter().enumerate() {
        if model.predict(&dataset.row(i))? == *l {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_model(d: usize, seed: u64) -> MlpModel {
        let mut r = rng::stream(seed, &[]);
        let mut p = Params::he(d, &mut r);
        for s in p.slices_mut() {
            for x in s.iter_mut() {
                *x += 0.1 * r.random::<f64>();
            }
        }
        let names = (0..d).map(|j| format!("f{j}")).collect();
        MlpModel::new(names, Standardizer::identity(d), p, 0.2).unwrap()
    }

    #[test]
    fn zero_model_gives_one_half() {
        let m = MlpModel::new(
            vec!["a".into(), "b".into()],
            Standardizer::identity(2),
            Params::zeros(2),
            0.0,
        )
        .unwrap();
        assert_eq!(m.predict_proba(&[3.0, -7.0]).unwrap(), 0.5);
    }

    #[test]
    fn hand_evaluation() {
        let m = random_model(4, 2);
        let x = [0.3, -1.2, 0.8, 2.0];
        let p = &m.params;
        let xv = DVector::from_column_slice(&x);
        let h1 = (&p.w1 * &xv + &p.b1).map(|v| if v > 0.0 { v } else { 0.0 });
        let h2 = (&p.w2 * &h1 + &p.b2).map(|v| if v > 0.0 { v } else { 0.0 });
        let mut z = p.b3[0];
        for k in 0..HIDDEN2 {
            z += p.w3[(0, k)] * h2[k];
        }
        let expected = 1.0 / (1.0 + (-z).exp());
        assert!((forward(&m, &x, false, 1).unwrap() - expected).abs() < 1e-14);
        assert_eq!(
            forward(&m, &x, false, 1).unwrap(),
            forward(&m, &x, false, 99).unwrap()
        );
    }

    #[test]
    fn gradient_doubles_with_loss_scale() {
        let m = random_model(3, 5);
        let x = [0.1, 0.2, -0.4];
        let g1 = backprop_gradient(&m, &x, 1.0, 1.0).unwrap();
        let g2 = backprop_gradient(&m, &x, 1.0, 2.0).unwrap();
        for (a, b) in g1.flat().iter().zip(g2.flat()) {
            assert_eq!(2.0 * a, b);
        }
    }

    #[test]
    fn bce_is_stable_for_large_logits() {
        assert!((bce_from_logit(800.0, 1.0)).abs() < 1e-300);
        assert!((bce_from_logit(-800.0, 1.0) - 800.0).abs() < 1e-9);
        assert!((bce_from_logit(0.0, 0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
