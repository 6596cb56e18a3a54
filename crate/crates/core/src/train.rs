//! Maximum-likelihood training of a [`FlowModel`].

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::flow::{FlowArch, FlowModel};
use crate::rng::{derive_seed, seeded};

/// Samples per gradient chunk. Chunks are reduced in index order, so the
/// result does not depend on how many threads evaluate them.
const CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub arch: FlowArch,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 256,
            steps: 2000,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: Some(50.0),
            arch: FlowArch::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::InvalidArgument("batch_size and steps must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument("adam betas must lie in [0, 1)".into()));
        }
        if self.arch.blocks == 0 || self.arch.hidden == 0 {
            return Err(Error::InvalidArgument("flow needs >= 1 block and hidden width".into()));
        }
        Ok(())
    }
}

/// Gradients laid out like [`crate::flow::Layer::params`], one array per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    pub layers: Vec<Vec<f64>>,
}

impl ParamGradients {
    pub fn zeros_like(model: &FlowModel) -> Self {
        Self {
            layers: model.layers().iter().map(|l| vec![0.0; l.param_count()]).collect(),
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.layers
            .iter()
            .flatten()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        self.layers.iter_mut().flatten().for_each(|g| *g *= c);
    }

    fn add_assign(&mut self, other: &ParamGradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    fn congruent(&self, model: &FlowModel) -> bool {
        self.layers.len() == model.layers().len()
            && self
                .layers
                .iter()
                .zip(model.layers())
                .all(|(g, l)| g.len() == l.param_count())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(model: &FlowModel) -> Self {
        let z = ParamGradients::zeros_like(model).layers;
        Self {
            first: z.clone(),
            second: z,
            step: 0,
        }
    }
}

fn sample_nll(model: &FlowModel, s: &[f64]) -> Result<f64> {
    Ok(-model.log_prob(s)?)
}

fn check_batch(model: &FlowModel, batch: &[Vec<f64>]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if let Some(x) = batch.iter().find(|x| x.len() != model.dim()) {
        return Err(Error::ShapeMismatch(format!(
            "flow of dim {} got sample of dim {}",
            model.dim(),
            x.len()
        )));
    }
    Ok(())
}

/// Mean negative log-likelihood (nats) of `batch`.
pub fn nll_loss(model: &FlowModel, batch: &[Vec<f64>]) -> Result<f64> {
    check_batch(model, batch)?;
    let partial: Vec<f64> = batch
        .par_chunks(CHUNK)
        .map(|chunk| chunk.iter().map(|s| sample_nll(model, s)).sum::<Result<f64>>())
        .collect::<Result<_>>()?;
    Ok(partial.iter().sum::<f64>() / batch.len() as f64)
}

fn chunk_gradients(model: &FlowModel, chunk: &[Vec<f64>], weight: f64) -> Result<(f64, ParamGradients)> {
    let mut grads = ParamGradients::zeros_like(model);
    let mut loss = 0.0;
    let half_log_2pi = 0.5 * (2.0 * PI).ln();
    for s in chunk {
        let (inputs, z) = model.forward_trace(s)?;
        loss += 0.5 * z.values.iter().map(|v| v * v).sum::<f64>()
            + half_log_2pi * model.dim() as f64
            - z.log_det;
        let mut g: Vec<f64> = z.values.iter().map(|v| v * weight).collect();
        for (i, layer) in model.layers().iter().enumerate().rev() {
            g = layer.backward(&inputs[i], &g, -weight, &mut grads.layers[i]);
            if g.iter().any(|v| !v.is_finite())
                || grads.layers[i].iter().any(|v| !v.is_finite())
            {
                return Err(Error::NonFinite(format!(
                    "gradient through layer {i} ({})",
                    layer.name()
                )));
            }
        }
    }
    Ok((loss, grads))
}

/// Mean NLL of `batch` and its exact gradient with respect to every
/// parameter.
pub fn loss_and_gradients(model: &FlowModel, batch: &[Vec<f64>]) -> Result<(f64, ParamGradients)> {
    check_batch(model, batch)?;
    let weight = 1.0 / batch.len() as f64;
    let parts: Vec<(f64, ParamGradients)> = batch
        .par_chunks(CHUNK)
        .map(|chunk| chunk_gradients(model, chunk, weight))
        .collect::<Result<_>>()?;
    let mut total = ParamGradients::zeros_like(model);
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        total.add_assign(g);
    }
    Ok((loss * weight, total))
}

/// Gradient of [`nll_loss`] by reverse-mode differentiation.
pub fn backward(model: &FlowModel, batch: &[Vec<f64>]) -> Result<ParamGradients> {
    loss_and_gradients(model, batch).map(|(_, g)| g)
}

/// Applies one Adam (bias-corrected) or SGD update in place.
pub fn optimizer_step(
    state: &mut OptimizerState,
    model: &mut FlowModel,
    grads: &ParamGradients,
    config: &TrainConfig,
) -> Result<()> {
    if !grads.congruent(model)
        || state.first.len() != grads.layers.len()
        || state.first.iter().zip(&grads.layers).any(|(a, b)| a.len() != b.len())
    {
        return Err(Error::ShapeMismatch("gradients do not match the model".into()));
    }
    state.step += 1;
    let t = state.step as f64;
    let lr = config.learning_rate;
    for (i, layer) in model.layers_mut().iter_mut().enumerate() {
        let mut p = layer.params();
        let g = &grads.layers[i];
        match config.optimizer {
            OptimizerKind::Sgd => {
                for (pj, gj) in p.iter_mut().zip(g) {
                    *pj -= lr * gj;
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (config.beta1, config.beta2);
                let c1 = 1.0 - b1.powf(t);
                let c2 = 1.0 - b2.powf(t);
                let m = &mut state.first[i];
                let v = &mut state.second[i];
                for j in 0..p.len() {
                    m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                    v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                    let mh = m[j] / c1;
                    let vh = v[j] / c2;
                    p[j] -= lr * mh / (vh.sqrt() + config.epsilon);
                }
            }
        }
        layer.set_params(&p)?;
    }
    Ok(())
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub nll: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FlowModel,
    /// The model right after actnorm initialization, before any update.
    pub initial: FlowModel,
    pub history: Vec<TrainRecord>,
}

/// Rejects empty, ragged, non-finite, or constant-coordinate data.
pub fn validate_training_data(data: &[Vec<f64>]) -> Result<usize> {
    let dim = data
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::DegenerateData("no training samples".into()))?;
    if dim == 0 {
        return Err(Error::DegenerateData("zero-dimensional samples".into()));
    }
    if let Some(i) = data.iter().position(|x| x.len() != dim) {
        return Err(Error::ShapeMismatch(format!(
            "sample {i} has dim {}, expected {dim}",
            data[i].len()
        )));
    }
    if let Some(i) = data.iter().position(|x| x.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite(format!("training sample {i}")));
    }
    for d in 0..dim {
        let first = data[0][d];
        if data.iter().all(|x| x[d] == first) {
            return Err(Error::DegenerateData(format!("dimension {d} is constant")));
        }
    }
    Ok(dim)
}

/// Trains a standard flow on `data` for a fixed step budget.
pub fn train_flow(data: &[Vec<f64>], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let dim = validate_training_data(data)?;
    let mut init_rng = seeded(config.seed);
    let mut model = FlowModel::standard(dim, config.arch, &mut init_rng)?;
    let mut shuffle_rng = seeded(derive_seed(config.seed, 1));

    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut shuffle_rng);
    let mut cursor = 0;
    let mut next_batch = |order: &mut Vec<usize>| -> Vec<Vec<f64>> {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size.min(data.len()) {
            if cursor == order.len() {
                order.shuffle(&mut shuffle_rng);
                cursor = 0;
            }
            batch.push(data[order[cursor]].clone());
            cursor += 1;
        }
        batch
    };

    let first = next_batch(&mut order);
    model.initialize_actnorms(&first)?;
    let initial = model.clone();

    let mut state = OptimizerState::new(&model);
    let mut history = Vec::with_capacity(config.steps);
    let mut batch = first;
    for step in 0..config.steps {
        if step > 0 {
            batch = next_batch(&mut order);
        }
        let (nll, mut grads) = loss_and_gradients(&model, &batch)?;
        let grad_norm = grads.global_norm();
        if let Some(clip) = config.clip_norm {
            if grad_norm > clip {
                grads.scale(clip / grad_norm);
            }
        }
        history.push(TrainRecord {
            step,
            nll,
            grad_norm,
        });
        optimizer_step(&mut state, &mut model, &grads, config)?;
    }
    Ok(TrainOutcome {
        model,
        initial,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{ActNorm, Layer};
    use rand::Rng;

    fn gaussian_batch(seed: u64, n: usize, dim: usize) -> Vec<Vec<f64>> {
        let mut rng = seeded(seed);
        (0..n)
            .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect())
            .collect()
    }

    /// Central differences `(L(p+h) − L(p−h))/2h`, `h = 1e−5·max(1,|p|)`.
    fn finite_difference(model: &FlowModel, batch: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for li in 0..model.layers().len() {
            let base = model.layers()[li].params();
            let mut g = Vec::with_capacity(base.len());
            for j in 0..base.len() {
                let h = 1e-5 * base[j].abs().max(1.0);
                let mut m = model.clone();
                let mut p = base.clone();
                p[j] = base[j] + h;
                m.layers_mut()[li].set_params(&p).unwrap();
                let lp = nll_loss(&m, batch).unwrap();
                p[j] = base[j] - h;
                m.layers_mut()[li].set_params(&p).unwrap();
                let lm = nll_loss(&m, batch).unwrap();
                g.push((lp - lm) / (2.0 * h));
            }
            out.push(g);
        }
        out
    }

    #[test]
    fn identity_flow_nll() {
        let m = FlowModel::new(2).unwrap();
        let l = nll_loss(&m, &[vec![0.0, 0.0]]).unwrap();
        assert!((l - (2.0 * PI).ln()).abs() < 1e-12);
        assert!((l - 1.837877).abs() < 1e-6);
        assert!(nll_loss(&m, &[]).is_err());
    }

    #[test]
    fn nll_permutation_invariant_and_identity_layer_free() {
        let mut rng = seeded(2);
        let m = FlowModel::randomized(3, FlowArch { blocks: 2, hidden: 6 }, &mut rng).unwrap();
        let batch = gaussian_batch(3, 40, 3);
        let mut rev = batch.clone();
        rev.reverse();
        let a = nll_loss(&m, &batch).unwrap();
        let b = nll_loss(&m, &rev).unwrap();
        assert!((a - b).abs() < 1e-12);
        let mut with_id = m.clone();
        with_id.push(Layer::ActNorm(ActNorm::new(3))).unwrap();
        assert!((nll_loss(&with_id, &batch).unwrap() - a).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = seeded(5);
        let m = FlowModel::randomized(4, FlowArch { blocks: 3, hidden: 5 }, &mut rng).unwrap();
        let batch = gaussian_batch(6, 7, 4);
        let exact = backward(&m, &batch).unwrap();
        let numeric = finite_difference(&m, &batch);
        for (li, (e, n)) in exact.layers.iter().zip(&numeric).enumerate() {
            for (j, (a, b)) in e.iter().zip(n).enumerate() {
                let tol = 1e-4 * a.abs().max(b.abs()).max(1e-3);
                assert!((a - b).abs() <= tol, "layer {li} param {j}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_mean_batch_gives_stationary_actnorm_bias() {
        let m = FlowModel::from_layers(2, vec![Layer::ActNorm(ActNorm::new(2))]).unwrap();
        let batch = vec![vec![1.0, -2.0], vec![-1.0, 2.0], vec![0.5, 0.0], vec![-0.5, 0.0]];
        let g = backward(&m, &batch).unwrap();
        assert!(g.layers[0][2].abs() < 1e-15 && g.layers[0][3].abs() < 1e-15);
    }

    #[test]
    fn duplicated_batch_same_gradient() {
        let mut rng = seeded(7);
        let m = FlowModel::randomized(3, FlowArch { blocks: 2, hidden: 4 }, &mut rng).unwrap();
        let batch = gaussian_batch(8, 10, 3);
        let doubled: Vec<Vec<f64>> = batch.iter().chain(&batch).cloned().collect();
        let a = backward(&m, &batch).unwrap();
        let b = backward(&m, &doubled).unwrap();
        for (x, y) in a.layers.iter().flatten().zip(b.layers.iter().flatten()) {
            assert!((x - y).abs() < 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn sgd_examples() {
        let mut m = FlowModel::from_layers(1, vec![Layer::ActNorm(ActNorm::new(1))]).unwrap();
        let cfg = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 1.0,
            ..TrainConfig::default()
        };
        let mut st = OptimizerState::new(&m);
        let zero = ParamGradients::zeros_like(&m);
        let before = m.clone();
        optimizer_step(&mut st, &mut m, &zero, &cfg).unwrap();
        assert_eq!(m, before);
        let g = ParamGradients {
            layers: vec![vec![0.25, -1.5]],
        };
        optimizer_step(&mut st, &mut m, &g, &cfg).unwrap();
        assert_eq!(m.layers()[0].params(), vec![-0.25, 1.5]);
        let bad = ParamGradients { layers: vec![vec![0.0]] };
        assert!(optimizer_step(&mut st, &mut m, &bad, &cfg).is_err());
    }

    #[test]
    fn adam_first_step_is_lr_signed() {
        let mut m = FlowModel::from_layers(1, vec![Layer::ActNorm(ActNorm::new(1))]).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.01,
            ..TrainConfig::default()
        };
        let mut st = OptimizerState::new(&m);
        let g = ParamGradients {
            layers: vec![vec![3.0, -0.002]],
        };
        optimizer_step(&mut st, &mut m, &g, &cfg).unwrap();
        let p = m.layers()[0].params();
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε).
        assert!((p[0] + 0.01 * 3.0 / (3.0 + 1e-8)).abs() < 1e-15);
        assert!((p[1] - 0.01 * 0.002 / (0.002 + 1e-8)).abs() < 1e-15);
        for v in p {
            assert!(v.abs() <= cfg.learning_rate / (1.0 - cfg.beta1));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = gaussian_batch(10, 300, 2)
            .into_iter()
            .map(|x| vec![x[0] * 2.0 + 1.0, x[1] * x[0]])
            .collect::<Vec<_>>();
        let cfg = TrainConfig {
            steps: 25,
            batch_size: 64,
            seed: 77,
            arch: FlowArch { blocks: 2, hidden: 8 },
            ..TrainConfig::default()
        };
        let a = train_flow(&data, &cfg).unwrap();
        let b = train_flow(&data, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 25);
    }

    #[test]
    fn constant_dimension_rejected_before_training() {
        let data: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64, 4.0]).collect();
        let err = train_flow(&data, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::DegenerateData(_)), "{err}");
        assert!(matches!(train_flow(&[], &TrainConfig::default()), Err(Error::DegenerateData(_))));
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let parsed: TrainConfig = serde_json::from_str(r#"{"steps": 10, "optimizer": "sgd"}"#).unwrap();
        assert_eq!(parsed.steps, 10);
        assert_eq!(parsed.optimizer, OptimizerKind::Sgd);
        assert_eq!(parsed.batch_size, 256);
    }
}
