//! Gradient leakage: small twice-differentiable victims, the federated
//! averaging step, and the dummy-gradient reconstruction attack.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::seeded;

/// Loss above which an attack is declared divergent.
pub const DIVERGENCE_LOSS: f64 = 1e12;

/// Flattened per-parameter gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientVector {
    pub values: Vec<f64>,
}

impl GradientVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// A model whose training gradients an observer can see.
pub trait Victim: Sync {
    fn input_dim(&self) -> usize;
    /// Length of the label vector passed to [`Victim::gradients`].
    fn label_dim(&self) -> usize;
    fn param_count(&self) -> usize;
    fn gradients(&self, x: &[f64], y: &[f64]) -> Result<GradientVector>;
    /// Maps unconstrained attack variables to a label vector.
    fn label_from_free(&self, free: &[f64]) -> Vec<f64>;
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let top = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - top).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// One-hot encoding of `class` among `classes`.
pub fn one_hot(class: usize, classes: usize) -> Result<Vec<f64>> {
    if class >= classes {
        return Err(Error::UnknownLabel(class as u32));
    }
    let mut y = vec![0.0; classes];
    y[class] = 1.0;
    Ok(y)
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    w: Matrix,
    b: Vec<f64>,
}

/// Fully connected classifier with sigmoid hidden layers and a softmax
/// cross-entropy loss against soft labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyClassifier {
    layers: Vec<Dense>,
}

impl ToyClassifier {
    /// `sizes = [m, h₁, …, C]`; weights are `N(0, 1/fan_in)`, biases zero.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidDimension(format!("invalid layer sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .map(|io| {
                let scale = 1.0 / (io[0] as f64).sqrt();
                let data = (0..io[0] * io[1]).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
                Dense {
                    w: Matrix::new(io[1], io[0], data).expect("sized"),
                    b: vec![0.0; io[1]],
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn classes(&self) -> usize {
        self.layers.last().expect("at least one layer").b.len()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.w.as_slice());
            out.extend_from_slice(&l.b);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "classifier has {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut off = 0;
        for l in self.layers.iter_mut() {
            let (r, c) = l.w.shape();
            l.w = Matrix::new(r, c, params[off..off + r * c].to_vec())?;
            off += r * c;
            l.b.copy_from_slice(&params[off..off + r]);
            off += r;
        }
        Ok(())
    }

    fn check(&self, x: &[f64], y: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() || y.len() != self.classes() {
            return Err(Error::ShapeMismatch(format!(
                "classifier {}→{} got input {} and label {}",
                self.input_dim(),
                self.classes(),
                x.len(),
                y.len()
            )));
        }
        Ok(())
    }

    /// Activations of every layer; the last entry holds the logits.
    fn activations(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut acts = vec![x.to_vec()];
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = l.w.matvec(acts.last().expect("input"))?;
            for (v, b) in z.iter_mut().zip(&l.b) {
                *v += b;
            }
            if i + 1 < self.layers.len() {
                z.iter_mut().for_each(|v| *v = sigmoid(*v));
            }
            acts.push(z);
        }
        Ok(acts)
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "classifier input dim {} got {}",
                self.input_dim(),
                x.len()
            )));
        }
        Ok(softmax(self.activations(x)?.last().expect("logits")))
    }

    /// `−Σ_c y_c log softmax(F(x))_c`.
    pub fn loss(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.check(x, y)?;
        let p = self.predict_proba(x)?;
        Ok(-y.iter().zip(&p).map(|(t, q)| t * q.ln()).sum::<f64>())
    }
}

impl Victim for ToyClassifier {
    fn input_dim(&self) -> usize {
        self.layers[0].w.cols()
    }

    fn label_dim(&self) -> usize {
        self.classes()
    }

    fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.rows() * (l.w.cols() + 1)).sum()
    }

    fn gradients(&self, x: &[f64], y: &[f64]) -> Result<GradientVector> {
        self.check(x, y)?;
        let acts = self.activations(x)?;
        let p = softmax(acts.last().expect("logits"));
        let mass: f64 = y.iter().sum();
        let mut delta: Vec<f64> = p.iter().zip(y).map(|(q, t)| mass * q - t).collect();
        let mut blocks: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate().rev() {
            let input = &acts[i];
            let mut g = Vec::with_capacity(l.w.rows() * (l.w.cols() + 1));
            for d in &delta {
                g.extend(input.iter().map(|a| d * a));
            }
            g.extend_from_slice(&delta);
            blocks.push(g);
            if i > 0 {
                let back = l.w.tr_matvec(&delta)?;
                delta = back.iter().zip(input).map(|(b, a)| b * a * (1.0 - a)).collect();
            }
        }
        blocks.reverse();
        let values: Vec<f64> = blocks.concat();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("classifier gradients".into()));
        }
        Ok(GradientVector { values })
    }

    fn label_from_free(&self, free: &[f64]) -> Vec<f64> {
        softmax(free)
    }
}

/// Linear regression `ℓ = ½(w·x + b − y)²` with scalar target `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearVictim {
    pub w: Vec<f64>,
    pub b: f64,
}

impl LinearVictim {
    pub fn new<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidDimension("linear victim needs dim >= 1".into()));
        }
        Ok(Self {
            w: (0..dim).map(|_| rng.sample(StandardNormal)).collect(),
            b: rng.sample(StandardNormal),
        })
    }
}

impl Victim for LinearVictim {
    fn input_dim(&self) -> usize {
        self.w.len()
    }

    fn label_dim(&self) -> usize {
        1
    }

    fn param_count(&self) -> usize {
        self.w.len() + 1
    }

    /// `[(w·x + b − y)·x, w·x + b − y]`.
    fn gradients(&self, x: &[f64], y: &[f64]) -> Result<GradientVector> {
        if x.len() != self.w.len() || y.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "linear victim of dim {} got input {} and label {}",
                self.w.len(),
                x.len(),
                y.len()
            )));
        }
        let r = self.w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.b - y[0];
        let mut values: Vec<f64> = x.iter().map(|v| r * v).collect();
        values.push(r);
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("linear victim gradients".into()));
        }
        Ok(GradientVector { values })
    }

    fn label_from_free(&self, free: &[f64]) -> Vec<f64> {
        free.to_vec()
    }
}

/// `W − η·(1/N)·Σ ∇W_j`.
pub fn federated_step(params: &[f64], grads: &[GradientVector], eta: f64) -> Result<Vec<f64>> {
    if grads.is_empty() {
        return Err(Error::InvalidArgument("federated step needs at least one agent".into()));
    }
    if let Some(g) = grads.iter().find(|g| g.len() != params.len()) {
        return Err(Error::ShapeMismatch(format!(
            "{} parameters with a gradient of length {}",
            params.len(),
            g.len()
        )));
    }
    if !eta.is_finite() {
        return Err(Error::NonFinite("learning rate".into()));
    }
    let n = grads.len() as f64;
    Ok(params
        .iter()
        .enumerate()
        .map(|(i, w)| w - eta * grads.iter().map(|g| g.values[i]).sum::<f64>() / n)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DlgOptimizer {
    Lbfgs,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DlgConfig {
    pub optimizer: DlgOptimizer,
    pub learning_rate: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Label the attacker already knows; otherwise it is optimized as well.
    pub known_label: Option<Vec<f64>>,
    /// Extra runs from fresh random starts; the run with the lowest match
    /// loss is returned.
    pub restarts: usize,
}

impl Default for DlgConfig {
    fn default() -> Self {
        Self {
            optimizer: DlgOptimizer::Adam,
            learning_rate: 0.1,
            iterations: 300,
            seed: 0,
            known_label: None,
            restarts: 0,
        }
    }
}

impl DlgConfig {
    /// L-BFGS with unit step.
    pub fn lbfgs(iterations: usize, seed: u64) -> Self {
        Self {
            optimizer: DlgOptimizer::Lbfgs,
            learning_rate: 1.0,
            iterations,
            seed,
            known_label: None,
            restarts: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DlgResult {
    /// Recovered input `x′`.
    pub input: Vec<f64>,
    /// Recovered (relaxed) label `y′`.
    pub label: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Match loss at every iterate, starting from the initialization.
    pub trajectory: Vec<f64>,
    pub iterations: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DlgReport {
    pub final_loss: f64,
    pub mse_vs_target: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse_vs_original: Option<f64>,
    pub iterations: usize,
    pub seed: u64,
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
}

impl DlgResult {
    /// Running minimum of the trajectory.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.trajectory
            .iter()
            .map(|&l| {
                best = best.min(l);
                best
            })
            .collect()
    }

    /// `1 − final/initial`.
    pub fn loss_reduction(&self) -> f64 {
        if self.initial_loss > 0.0 {
            1.0 - self.final_loss / self.initial_loss
        } else {
            1.0
        }
    }

    /// Scores the reconstruction against the input that produced the target
    /// gradients and, when given, the plaintext it was encrypted from.
    pub fn report(&self, target_input: &[f64], original: Option<&[f64]>) -> Result<DlgReport> {
        Ok(DlgReport {
            final_loss: self.final_loss,
            mse_vs_target: mse(&self.input, target_input)?,
            mse_vs_original: original.map(|o| mse(&self.input, o)).transpose()?,
            iterations: self.iterations,
            seed: self.seed,
        })
    }
}

/// The attack's objective over `z = [x′, free label]`.
struct MatchObjective<'a> {
    victim: &'a dyn Victim,
    target: &'a GradientVector,
    known_label: Option<&'a [f64]>,
}

const FD_STEP: f64 = 1e-5;

impl MatchObjective<'_> {
    fn split<'z>(&self, z: &'z [f64]) -> (&'z [f64], Vec<f64>) {
        let m = self.victim.input_dim();
        let y = match self.known_label {
            Some(y) => y.to_vec(),
            None => self.victim.label_from_free(&z[m..]),
        };
        (&z[..m], y)
    }

    fn residual(&self, z: &[f64]) -> Result<Vec<f64>> {
        let (x, y) = self.split(z);
        let g = self.victim.gradients(x, &y)?;
        Ok(g.values.iter().zip(&self.target.values).map(|(a, b)| a - b).collect())
    }

    fn loss(&self, z: &[f64]) -> Result<f64> {
        Ok(self.residual(z)?.iter().map(|r| r * r).sum())
    }

    /// `‖∇W′ − ∇W‖²` and its gradient `2·Jᵀr`. Each entry of `Jᵀr` is a
    /// central difference of `r·∇W′` with `r` frozen, which keeps the
    /// truncation error proportional to the residual.
    fn loss_and_grad(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let r = self.residual(z)?;
        let loss = r.iter().map(|v| v * v).sum();
        let probe = |zz: &[f64]| -> Result<f64> {
            let (x, y) = self.split(zz);
            let g = self.victim.gradients(x, &y)?;
            Ok(g.values.iter().zip(&r).map(|(a, b)| a * b).sum())
        };
        let mut grad = vec![0.0; z.len()];
        let mut zz = z.to_vec();
        for i in 0..z.len() {
            let h = FD_STEP * z[i].abs().max(1.0);
            zz[i] = z[i] + h;
            let up = probe(&zz)?;
            zz[i] = z[i] - h;
            let down = probe(&zz)?;
            zz[i] = z[i];
            grad[i] = 2.0 * (up - down) / (2.0 * h);
        }
        Ok((loss, grad))
    }
}

/// Reconstructs an input (and label) whose gradients match `target`.
pub fn dlg_attack(victim: &dyn Victim, target: &GradientVector, config: &DlgConfig) -> Result<DlgResult> {
    if config.iterations == 0 {
        return Err(Error::InvalidArgument("iterations must be >= 1".into()));
    }
    if !(config.learning_rate > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be > 0, got {}",
            config.learning_rate
        )));
    }
    if target.len() != victim.param_count() {
        return Err(Error::ShapeMismatch(format!(
            "target gradient of length {} for a victim with {} parameters",
            target.len(),
            victim.param_count()
        )));
    }
    if let Some(y) = &config.known_label {
        if y.len() != victim.label_dim() {
            return Err(Error::ShapeMismatch(format!(
                "known label of length {} for label dim {}",
                y.len(),
                victim.label_dim()
            )));
        }
    }
    let objective = MatchObjective {
        victim,
        target,
        known_label: config.known_label.as_deref(),
    };
    let mut rng = seeded(config.seed);
    let free = if config.known_label.is_some() { 0 } else { victim.label_dim() };
    let mut chosen: Option<(Best, Vec<f64>)> = None;
    for _ in 0..=config.restarts {
        let z0: Vec<f64> = (0..victim.input_dim() + free).map(|_| rng.sample(StandardNormal)).collect();
        let run = match config.optimizer {
            DlgOptimizer::Adam => run_adam(&objective, z0, config)?,
            DlgOptimizer::Lbfgs => run_lbfgs(&objective, z0, config)?,
        };
        if chosen.as_ref().is_none_or(|c| run.0 .0 < c.0 .0) {
            chosen = Some(run);
        }
    }
    let (best, trajectory) = chosen.expect("at least one run");
    let (x, y) = objective.split(&best.1);
    Ok(DlgResult {
        input: x.to_vec(),
        label: y,
        initial_loss: trajectory[0],
        final_loss: best.0,
        iterations: trajectory.len() - 1,
        trajectory,
        seed: config.seed,
    })
}

type Best = (f64, Vec<f64>);

fn check_divergence(iteration: usize, loss: f64, trajectory: &[f64]) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_LOSS {
        return Err(Error::Diverged {
            iteration,
            loss,
            trajectory: trajectory.to_vec(),
        });
    }
    Ok(())
}

fn run_adam(obj: &MatchObjective<'_>, mut z: Vec<f64>, config: &DlgConfig) -> Result<(Best, Vec<f64>)> {
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut m = vec![0.0; z.len()];
    let mut v = vec![0.0; z.len()];
    let mut trajectory = Vec::with_capacity(config.iterations + 1);
    let (mut loss, mut grad) = obj.loss_and_grad(&z)?;
    trajectory.push(loss);
    check_divergence(0, loss, &trajectory)?;
    let mut best = (loss, z.clone());
    for t in 1..=config.iterations {
        let c1 = 1.0 - b1_pow(b1, t);
        let c2 = 1.0 - b1_pow(b2, t);
        for i in 0..z.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
            z[i] -= config.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
        (loss, grad) = obj.loss_and_grad(&z)?;
        trajectory.push(loss);
        check_divergence(t, loss, &trajectory)?;
        if loss < best.0 {
            best = (loss, z.clone());
        }
    }
    Ok((best, trajectory))
}

fn b1_pow(b: f64, t: usize) -> f64 {
    b.powi(t.min(i32::MAX as usize) as i32)
}

const LBFGS_HISTORY: usize = 10;
const ARMIJO_C: f64 = 1e-4;

fn run_lbfgs(obj: &MatchObjective<'_>, mut z: Vec<f64>, config: &DlgConfig) -> Result<(Best, Vec<f64>)> {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut hist: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)> = Default::default();
    let mut trajectory = Vec::with_capacity(config.iterations + 1);
    let (mut loss, mut grad) = obj.loss_and_grad(&z)?;
    trajectory.push(loss);
    check_divergence(0, loss, &trajectory)?;
    let mut best = (loss, z.clone());
    for t in 1..=config.iterations {
        if loss == 0.0 || grad.iter().all(|g| *g == 0.0) {
            break;
        }
        // Two-loop recursion for −H·g.
        let mut q = grad.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = hist.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|qi| *qi *= gamma);
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&dir, &grad);
        if !(slope < 0.0) {
            hist.clear();
            dir = grad.iter().map(|g| -g).collect();
            slope = dot(&dir, &grad);
        }
        let mut step = if hist.is_empty() {
            config.learning_rate / grad.iter().map(|g| g * g).sum::<f64>().sqrt().max(1.0)
        } else {
            config.learning_rate
        };
        let mut accepted = None;
        for _ in 0..40 {
            let cand: Vec<f64> = z.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            if let Ok(l) = obj.loss(&cand) {
                if l.is_finite() && l <= loss + ARMIJO_C * step * slope {
                    accepted = Some((cand, l));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((cand, _)) = accepted else {
            break;
        };
        let (new_loss, new_grad) = obj.loss_and_grad(&cand)?;
        let s: Vec<f64> = cand.iter().zip(&z).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = new_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-300 {
            if hist.len() == LBFGS_HISTORY {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        z = cand;
        loss = new_loss;
        grad = new_grad;
        trajectory.push(loss);
        check_divergence(t, loss, &trajectory)?;
        if loss < best.0 {
            best = (loss, z.clone());
        }
    }
    Ok((best, trajectory))
}
