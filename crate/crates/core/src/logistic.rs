//! Binary logistic regression fitted by damped Newton steps with a ridge
//! penalty on the weights.

use crate::error::{Error, Result};
use crate::linalg::{Lu, Matrix};

const MAX_NEWTON_STEPS: usize = 100;
const STEP_TOL: f64 = 1e-10;

/// Linear separator over standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticRegression {
    weights: Vec<f64>,
    bias: f64,
    mean: Vec<f64>,
    scale: Vec<f64>,
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^t)` without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

impl LogisticRegression {
    /// Fits labels in `{0, 1}`. `ridge` multiplies `½‖w‖²` added to the mean
    /// log-loss; the bias is not penalized.
    pub fn fit(x: &[Vec<f64>], y: &[u32], ridge: f64) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} samples with {} labels",
                x.len(),
                y.len()
            )));
        }
        if !(ridge >= 0.0) {
            return Err(Error::InvalidArgument(format!("ridge must be >= 0, got {ridge}")));
        }
        if let Some(&bad) = y.iter().find(|&&l| l > 1) {
            return Err(Error::UnknownLabel(bad));
        }
        let d = x[0].len();
        if x.iter().any(|r| r.len() != d) {
            return Err(Error::ShapeMismatch("ragged feature rows".into()));
        }
        let n = x.len() as f64;
        let mut mean = vec![0.0; d];
        for r in x {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut scale = vec![0.0; d];
        for r in x {
            for ((s, v), m) in scale.iter_mut().zip(r).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        for s in scale.iter_mut() {
            *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
        }
        let z: Vec<Vec<f64>> = x
            .iter()
            .map(|r| {
                let mut row: Vec<f64> = r.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) / s).collect();
                row.push(1.0);
                row
            })
            .collect();
        let t: Vec<f64> = y.iter().map(|&l| l as f64).collect();

        let p = d + 1;
        let objective = |theta: &[f64]| -> f64 {
            let mut loss = 0.0;
            for (row, &ti) in z.iter().zip(&t) {
                let a: f64 = row.iter().zip(theta).map(|(u, w)| u * w).sum();
                loss += softplus(a) - ti * a;
            }
            loss / n + 0.5 * ridge * theta[..d].iter().map(|w| w * w).sum::<f64>()
        };

        let mut theta = vec![0.0; p];
        let mut current = objective(&theta);
        for _ in 0..MAX_NEWTON_STEPS {
            let mut grad = vec![0.0; p];
            let mut hess = Matrix::zeros(p, p);
            for (row, &ti) in z.iter().zip(&t) {
                let a: f64 = row.iter().zip(&theta).map(|(u, w)| u * w).sum();
                let s = sigmoid(a);
                let w = (s * (1.0 - s)).max(1e-12);
                for i in 0..p {
                    grad[i] += (s - ti) * row[i] / n;
                    for j in 0..=i {
                        let v = hess.get(i, j) + w * row[i] * row[j] / n;
                        hess.set(i, j, v);
                    }
                }
            }
            for i in 0..p {
                for j in 0..i {
                    hess.set(j, i, hess.get(i, j));
                }
            }
            for i in 0..d {
                grad[i] += ridge * theta[i];
                hess.set(i, i, hess.get(i, i) + ridge);
            }
            // Keeps the system solvable when the data are separable and
            // `ridge` is zero.
            for i in 0..p {
                hess.set(i, i, hess.get(i, i) + 1e-10);
            }
            let step = Lu::decompose(&hess)?.solve(&grad)?;
            let mut eta = 1.0;
            let mut accepted = false;
            while eta > 1e-8 {
                let cand: Vec<f64> = theta.iter().zip(&step).map(|(w, s)| w - eta * s).collect();
                let value = objective(&cand);
                if value <= current {
                    theta = cand;
                    current = value;
                    accepted = true;
                    break;
                }
                eta *= 0.5;
            }
            let norm = step.iter().map(|s| s * s).sum::<f64>().sqrt() * eta;
            if !accepted || norm < STEP_TOL {
                break;
            }
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logistic regression weights".into()));
        }
        let bias = theta[d];
        theta.truncate(d);
        Ok(Self {
            weights: theta,
            bias,
            mean,
            scale,
        })
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    fn score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "classifier of dim {} got vector of dim {}",
                self.dim(),
                x.len()
            )));
        }
        Ok(self.bias
            + x.iter()
                .zip(&self.mean)
                .zip(&self.scale)
                .zip(&self.weights)
                .map(|(((v, m), s), w)| w * (v - m) / s)
                .sum::<f64>())
    }

    /// Probability of class 1.
    pub fn predict_proba(&self, x: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.score(x)?))
    }

    pub fn predict(&self, x: &[f64]) -> Result<u32> {
        Ok(u32::from(self.score(x)? > 0.0))
    }

    /// Fraction of correct predictions.
    pub fn accuracy(&self, x: &[Vec<f64>], y: &[u32]) -> Result<f64> {
        if x.len() != y.len() || x.is_empty() {
            return Err(Error::ShapeMismatch(format!("{} samples with {} labels", x.len(), y.len())));
        }
        let mut hits = 0usize;
        for (r, &l) in x.iter().zip(y) {
            hits += usize::from(self.predict(r)? == l);
        }
        Ok(hits as f64 / x.len() as f64)
    }

    /// Mean of the per-class accuracies.
    pub fn balanced_accuracy(&self, x: &[Vec<f64>], y: &[u32]) -> Result<f64> {
        if x.len() != y.len() || x.is_empty() {
            return Err(Error::ShapeMismatch(format!("{} samples with {} labels", x.len(), y.len())));
        }
        let mut hits = [0usize; 2];
        let mut counts = [0usize; 2];
        for (r, &l) in x.iter().zip(y) {
            let c = l.min(1) as usize;
            counts[c] += 1;
            hits[c] += usize::from(self.predict(r)? == l);
        }
        if counts.contains(&0) {
            return Err(Error::InvalidArgument("balanced accuracy needs both classes".into()));
        }
        Ok(0.5 * (hits[0] as f64 / counts[0] as f64 + hits[1] as f64 / counts[1] as f64))
    }
}
