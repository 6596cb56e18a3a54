//! Security tooling: total variation estimators, the product-measure
//! sandwich check, rotation-invariance tests, a maximum-likelihood rotation
//! recovery adversary and the recovery-bound audit.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erf;
use std::f64::consts::{PI, SQRT_2};

use crate::error::{Error, Result};
use crate::flow::{standard_normal_log_density, FlowModel};
use crate::linalg::{ball_radius_for_volume, is_successful_recovery, Lu, Matrix, OrthogonalKey};
use crate::logistic::LogisticRegression;
use crate::rng::{derive_seed, seeded};

/// Minimum per-set sample count for the empirical estimators.
pub const MIN_TV_SAMPLES: usize = 1000;
/// Minimum sample count for [`rotation_invariance_check`].
pub const MIN_INVARIANCE_SAMPLES: usize = 1000;
/// Minimum trial count for [`theorem_bound_audit`].
pub const MIN_AUDIT_TRIALS: usize = 200;

const NULL_PERMUTATIONS: usize = 10;
const HISTOGRAM_BOOTSTRAP: usize = 50;
const CLASSIFIER_BOOTSTRAP: usize = 200;
const CLASSIFIER_RIDGE: f64 = 1e-4;
const TIE_RTOL: f64 = 1e-9;

/// `Φ(x)` for the standard normal.
pub fn standard_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / SQRT_2))
}

/// Which feature distribution a sample set was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureLabel {
    /// Standard normal.
    H0,
    /// Flow features of real data.
    Gg,
    /// Rotated features.
    H1,
}

/// Labelled set of equal-length feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSamples {
    label: FeatureLabel,
    vectors: Vec<Vec<f64>>,
}

impl FeatureSamples {
    pub fn new(label: FeatureLabel, vectors: Vec<Vec<f64>>) -> Result<Self> {
        let d = vectors
            .first()
            .ok_or_else(|| Error::InvalidArgument("feature set is empty".into()))?
            .len();
        if d == 0 {
            return Err(Error::InvalidDimension("feature vectors must have dim >= 1".into()));
        }
        if let Some(i) = vectors.iter().position(|v| v.len() != d) {
            return Err(Error::ShapeMismatch(format!(
                "feature {i} has dim {} but the set has dim {d}",
                vectors[i].len()
            )));
        }
        if vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature samples".into()));
        }
        Ok(Self { label, vectors })
    }

    /// Draws `n` standard normal vectors.
    pub fn standard_normal<R: Rng + ?Sized>(n: usize, dim: usize, rng: &mut R) -> Result<Self> {
        let vectors = (0..n)
            .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        Self::new(FeatureLabel::H0, vectors)
    }

    pub fn label(&self) -> FeatureLabel {
        self.label
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    /// `A·x` for every sample, labelled as rotated features.
    pub fn rotated(&self, key: &OrthogonalKey) -> Result<Self> {
        let vectors = self.vectors.iter().map(|v| key.apply(v)).collect::<Result<_>>()?;
        Ok(Self {
            label: FeatureLabel::H1,
            vectors,
        })
    }
}

// ---------------------------------------------------------------------------
// Total variation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TvMethod {
    Analytic,
    Histogram,
    ClassifierLowerBound,
}

impl std::fmt::Display for TvMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TvMethod::Analytic => "analytic",
            TvMethod::Histogram => "histogram",
            TvMethod::ClassifierLowerBound => "classifier-lower-bound",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TVEstimate {
    pub value: f64,
    pub method: TvMethod,
    /// 95% half-width.
    #[serde(rename = "ci")]
    pub ci_halfwidth: f64,
}

/// TV distance between `N(mu1, σ²)` and `N(mu2, σ²)`: `2Φ(|Δμ|/2σ) − 1`.
pub fn tv_analytic_gaussian(mu1: f64, mu2: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma must be > 0, got {sigma}")));
    }
    if !mu1.is_finite() || !mu2.is_finite() {
        return Err(Error::NonFinite("gaussian means".into()));
    }
    // 2Φ(t) − 1 = erf(t/√2).
    Ok(erf((mu1 - mu2).abs() / (2.0 * sigma * SQRT_2)))
}

/// Empirical TV distance. Up to three dimensions this is a histogram plug-in
/// on a shared equal-frequency grid, corrected for the sampling bias of the
/// plug-in. Above that it is the lower bound `2·acc − 1` of a held-out
/// logistic separator, where `acc` is the balanced accuracy.
pub fn tv_empirical<R: Rng + ?Sized>(
    p: &FeatureSamples,
    q: &FeatureSamples,
    rng: &mut R,
) -> Result<TVEstimate> {
    if p.dim() != q.dim() {
        return Err(Error::ShapeMismatch(format!(
            "feature sets of dim {} and {}",
            p.dim(),
            q.dim()
        )));
    }
    if p.len() < MIN_TV_SAMPLES || q.len() < MIN_TV_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_TV_SAMPLES} samples per set, got {} and {}",
            p.len(),
            q.len()
        )));
    }
    if p.dim() <= 3 {
        Ok(histogram_tv(p.vectors(), q.vectors(), rng))
    } else {
        classifier_tv(p.vectors(), q.vectors(), rng)
    }
}

fn histogram_tv<R: Rng + ?Sized>(p: &[Vec<f64>], q: &[Vec<f64>], rng: &mut R) -> TVEstimate {
    let d = p[0].len();
    let n = p.len().min(q.len());
    let bins = ((n as f64).powf(1.0 / (d as f64 + 2.0)).round() as usize).max(2);

    let edges: Vec<Vec<f64>> = (0..d)
        .map(|k| {
            let mut pooled: Vec<f64> = p.iter().chain(q).map(|v| v[k]).collect();
            pooled.sort_by(f64::total_cmp);
            gap_snapped_edges(&pooled, bins)
        })
        .collect();
    let cell = |v: &[f64]| -> usize {
        v.iter().zip(&edges).fold(0, |acc, (x, e)| acc * bins + e.partition_point(|&t| t <= *x))
    };
    let pc: Vec<usize> = p.iter().map(|v| cell(v)).collect();
    let qc: Vec<usize> = q.iter().map(|v| cell(v)).collect();
    let cells = bins.pow(d as u32);

    let raw = |a: &mut dyn Iterator<Item = usize>, na: usize, b: &mut dyn Iterator<Item = usize>, nb: usize| {
        let mut ca = vec![0usize; cells];
        let mut cb = vec![0usize; cells];
        a.for_each(|c| ca[c] += 1);
        b.for_each(|c| cb[c] += 1);
        0.5 * ca
            .iter()
            .zip(&cb)
            .map(|(&x, &y)| (x as f64 / na as f64 - y as f64 / nb as f64).abs())
            .sum::<f64>()
    };

    let observed = raw(&mut pc.iter().copied(), pc.len(), &mut qc.iter().copied(), qc.len());

    // Plug-in TV of two samples from one distribution: the bias floor.
    let mut pooled: Vec<usize> = pc.iter().chain(&qc).copied().collect();
    let mut null_mean = 0.0;
    for _ in 0..NULL_PERMUTATIONS {
        pooled.shuffle(rng);
        let (a, b) = pooled.split_at(pc.len());
        null_mean += raw(&mut a.iter().copied(), a.len(), &mut b.iter().copied(), b.len());
    }
    null_mean /= NULL_PERMUTATIONS as f64;
    // The floor shrinks as the supports separate, hence the (1 − raw) factor.
    let correct = |r: f64| (r - null_mean * (1.0 - r)).clamp(0.0, 1.0);

    let mut reps = Vec::with_capacity(HISTOGRAM_BOOTSTRAP);
    for _ in 0..HISTOGRAM_BOOTSTRAP {
        let bp: Vec<usize> = (0..pc.len()).map(|_| pc[rng.random_range(0..pc.len())]).collect();
        let bq: Vec<usize> = (0..qc.len()).map(|_| qc[rng.random_range(0..qc.len())]).collect();
        let r = raw(&mut bp.iter().copied(), bp.len(), &mut bq.iter().copied(), bq.len());
        reps.push(correct(r));
    }
    TVEstimate {
        value: correct(observed),
        method: TvMethod::Histogram,
        ci_halfwidth: 1.96 * std_dev(&reps),
    }
}

/// Equal-frequency edges, each moved to the widest gap between consecutive
/// order statistics within half a bin of its nominal position. The windows
/// tile the sample, so a gap separating two clusters always receives an edge.
fn gap_snapped_edges(sorted: &[f64], bins: usize) -> Vec<f64> {
    let n = sorted.len();
    let half = (n / (2 * bins)).max(1);
    (1..bins)
        .map(|b| {
            let center = b * n / bins;
            let lo = center.saturating_sub(half).max(1);
            let hi = (center + half).min(n - 1);
            let mut best = center.clamp(1, n - 1);
            for i in lo..=hi {
                if sorted[i] - sorted[i - 1] > sorted[best] - sorted[best - 1] {
                    best = i;
                }
            }
            if sorted[best] > sorted[best - 1] {
                0.5 * (sorted[best] + sorted[best - 1])
            } else {
                sorted[best]
            }
        })
        .collect()
}

fn classifier_tv<R: Rng + ?Sized>(p: &[Vec<f64>], q: &[Vec<f64>], rng: &mut R) -> Result<TVEstimate> {
    let split = |set: &[Vec<f64>], rng: &mut R| {
        let mut idx: Vec<usize> = (0..set.len()).collect();
        idx.shuffle(rng);
        let half = set.len() / 2;
        let train: Vec<Vec<f64>> = idx[..half].iter().map(|&i| set[i].clone()).collect();
        let test: Vec<Vec<f64>> = idx[half..].iter().map(|&i| set[i].clone()).collect();
        (train, test)
    };
    let (ptr, pte) = split(p, rng);
    let (qtr, qte) = split(q, rng);
    let x: Vec<Vec<f64>> = ptr.iter().chain(&qtr).cloned().collect();
    let y: Vec<u32> = std::iter::repeat_n(0, ptr.len()).chain(std::iter::repeat_n(1, qtr.len())).collect();
    let clf = LogisticRegression::fit(&x, &y, CLASSIFIER_RIDGE)?;

    let hits_p: Vec<bool> = pte.iter().map(|v| clf.predict(v).map(|c| c == 0)).collect::<Result<_>>()?;
    let hits_q: Vec<bool> = qte.iter().map(|v| clf.predict(v).map(|c| c == 1)).collect::<Result<_>>()?;
    let rate = |h: &[bool]| h.iter().filter(|&&b| b).count() as f64 / h.len() as f64;
    // TPR − FPR of any fixed test lower-bounds the TV distance.
    let bound = |a: f64, b: f64| (a + b - 1.0).max(0.0);

    let mut reps = Vec::with_capacity(CLASSIFIER_BOOTSTRAP);
    for _ in 0..CLASSIFIER_BOOTSTRAP {
        let rp = (0..hits_p.len()).filter(|_| hits_p[rng.random_range(0..hits_p.len())]).count() as f64
            / hits_p.len() as f64;
        let rq = (0..hits_q.len()).filter(|_| hits_q[rng.random_range(0..hits_q.len())]).count() as f64
            / hits_q.len() as f64;
        reps.push(bound(rp, rq));
    }
    Ok(TVEstimate {
        value: bound(rate(&hits_p), rate(&hits_q)),
        method: TvMethod::ClassifierLowerBound,
        ci_halfwidth: 1.96 * std_dev(&reps),
    })
}

fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

// ---------------------------------------------------------------------------
// Product measures

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SandwichReport {
    pub n: usize,
    /// `δ(P, Q)`.
    pub delta_1: f64,
    /// `δ(Pⁿ, Qⁿ)`.
    pub delta_n: f64,
    /// `1 − (1 − δ₁)ⁿ`.
    pub middle: f64,
    /// `n·δ₁`.
    pub upper: f64,
    /// Smallest of the two gaps; negative means a violation.
    pub slack: f64,
    pub holds: bool,
}

/// Slack below which the sandwich counts as violated.
pub const SANDWICH_SLACK: f64 = -1e-12;

/// `(1 − (1 − δ)ⁿ, n·δ)`.
pub fn sandwich_bounds(delta_1: f64, n: usize) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&delta_1) {
        return Err(Error::InvalidArgument(format!("TV must lie in [0, 1], got {delta_1}")));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    let middle = -(n as f64 * (-delta_1).ln_1p()).exp_m1();
    Ok((middle, n as f64 * delta_1))
}

/// Evaluates both sides of the sandwich for `P = N(0, σ²)` and
/// `Q = N(Δμ, σ²)`. The n-fold products differ by a shift of `√n·Δμ` along
/// the diagonal, which gives `δ_n` in closed form.
pub fn sandwich_check(mu_delta: f64, sigma: f64, n: usize) -> Result<SandwichReport> {
    let delta_1 = tv_analytic_gaussian(0.0, mu_delta, sigma)?;
    let (middle, upper) = sandwich_bounds(delta_1, n)?;
    let delta_n = tv_analytic_gaussian(0.0, (n as f64).sqrt() * mu_delta, sigma)?;
    let slack = (middle - delta_n).min(upper - middle);
    Ok(SandwichReport {
        n,
        delta_1,
        delta_n,
        middle,
        upper,
        slack,
        holds: slack >= SANDWICH_SLACK,
    })
}

// ---------------------------------------------------------------------------
// Rotation invariance

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvarianceConfig {
    /// Significance level of each test.
    pub level: f64,
    /// Null draws used to calibrate the covariance threshold.
    pub covariance_reps: usize,
    pub permutations: usize,
    /// Samples per set entering the energy test.
    pub energy_samples: usize,
}

impl Default for InvarianceConfig {
    fn default() -> Self {
        Self {
            level: 0.01,
            covariance_reps: 199,
            permutations: 199,
            energy_samples: 300,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub statistic: f64,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    /// `√n · max_d |mean_d|` of the rotated set against a Bonferroni z bound.
    pub mean: TestOutcome,
    /// `‖Σ̂ − I‖_F` of the rotated set against its simulated null quantile.
    pub covariance: TestOutcome,
    /// Energy distance between original and rotated sets against its
    /// permutation quantile.
    pub energy: TestOutcome,
}

impl InvarianceReport {
    pub fn all_passed(&self) -> bool {
        self.mean.passed && self.covariance.passed && self.energy.passed
    }
}

/// Tests whether rotating `samples` by `key` leaves a standard normal
/// distribution unchanged.
pub fn rotation_invariance_check<R: Rng + ?Sized>(
    samples: &FeatureSamples,
    key: &OrthogonalKey,
    config: &InvarianceConfig,
    rng: &mut R,
) -> Result<InvarianceReport> {
    if samples.dim() != key.dim() {
        return Err(Error::ShapeMismatch(format!(
            "samples of dim {} with key of dim {}",
            samples.dim(),
            key.dim()
        )));
    }
    if samples.len() < MIN_INVARIANCE_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_INVARIANCE_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    if !(config.level > 0.0 && config.level < 1.0) || config.covariance_reps < 10 || config.permutations < 10 {
        return Err(Error::InvalidArgument("invalid invariance test configuration".into()));
    }
    let rotated = samples.rotated(key)?;
    let (n, m) = (samples.len(), samples.dim());

    let means = column_means(rotated.vectors());
    let z_stat = (n as f64).sqrt() * means.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
    let z_crit = std_normal.inverse_cdf(1.0 - config.level / (2.0 * m as f64));
    let mean = TestOutcome {
        statistic: z_stat,
        threshold: z_crit,
        passed: z_stat <= z_crit,
    };

    let cov_stat = covariance_deviation(rotated.vectors());
    let base = rng.random::<u64>();
    let mut null: Vec<f64> = (0..config.covariance_reps)
        .into_par_iter()
        .map(|r| {
            let mut local = seeded(derive_seed(base, r as u64));
            let draws: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..m).map(|_| local.sample(StandardNormal)).collect())
                .collect();
            covariance_deviation(&draws)
        })
        .collect();
    null.sort_by(f64::total_cmp);
    let cov_crit = upper_quantile(&null, config.level);
    let covariance = TestOutcome {
        statistic: cov_stat,
        threshold: cov_crit,
        passed: cov_stat <= cov_crit,
    };

    let s = n.min(config.energy_samples.max(2));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.truncate(s);
    let xs: Vec<&[f64]> = idx.iter().map(|&i| samples.vectors()[i].as_slice()).collect();
    let ys: Vec<&[f64]> = idx.iter().map(|&i| rotated.vectors()[i].as_slice()).collect();
    let energy_stat = energy_distance_paired(&xs, &ys);
    let energy_crit = energy_permutation_quantile(&xs, &ys, config, rng);
    let energy = TestOutcome {
        statistic: energy_stat,
        threshold: energy_crit,
        passed: energy_stat <= energy_crit,
    };
    Ok(InvarianceReport {
        mean,
        covariance,
        energy,
    })
}

fn column_means(v: &[Vec<f64>]) -> Vec<f64> {
    let n = v.len() as f64;
    let mut means = vec![0.0; v[0].len()];
    for row in v {
        for (m, x) in means.iter_mut().zip(row) {
            *m += x / n;
        }
    }
    means
}

fn covariance_deviation(v: &[Vec<f64>]) -> f64 {
    let m = v[0].len();
    let mu = column_means(v);
    let n = v.len() as f64;
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..m {
            let c = v.iter().map(|r| (r[i] - mu[i]) * (r[j] - mu[j])).sum::<f64>() / (n - 1.0);
            let target = if i == j { 1.0 } else { 0.0 };
            total += (c - target).powi(2);
        }
    }
    total.sqrt()
}

/// Smallest sorted null value exceeded with probability at most `level`.
fn upper_quantile(sorted: &[f64], level: f64) -> f64 {
    let k = (((1.0 - level) * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[k - 1]
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Energy distance between paired sets `xs[i]`, `ys[i] = A·xs[i]`. Pairs
/// sharing an index are dependent and left out of every mean, so all terms
/// compare independent draws.
fn energy_distance_paired(xs: &[&[f64]], ys: &[&[f64]]) -> f64 {
    let s = xs.len();
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for i in 0..s {
        for j in (i + 1)..s {
            sxx += euclid(xs[i], xs[j]);
            syy += euclid(ys[i], ys[j]);
            sxy += euclid(xs[i], ys[j]) + euclid(ys[i], xs[j]);
        }
    }
    let pairs = (s * (s - 1) / 2) as f64;
    (sxy - sxx - syy) / pairs
}

/// `1 − level` quantile of the energy statistic under random relabelling of
/// the pooled points.
fn energy_permutation_quantile<R: Rng + ?Sized>(
    xs: &[&[f64]],
    ys: &[&[f64]],
    config: &InvarianceConfig,
    rng: &mut R,
) -> f64 {
    let s = xs.len();
    let pooled: Vec<&[f64]> = xs.iter().chain(ys).copied().collect();
    let total = pooled.len();
    let mut dist = vec![0.0; total * total];
    for k in 0..total {
        for l in (k + 1)..total {
            let d = euclid(pooled[k], pooled[l]);
            dist[k * total + l] = d;
        }
    }
    let base = rng.random::<u64>();
    let mut stats: Vec<f64> = (0..config.permutations)
        .into_par_iter()
        .map(|r| {
            let mut local = seeded(derive_seed(base, r as u64));
            let mut group: Vec<bool> = (0..total).map(|k| k >= s).collect();
            group.shuffle(&mut local);
            let (mut s00, mut s11, mut s01) = (0.0, 0.0, 0.0);
            let (mut c00, mut c11, mut c01) = (0usize, 0usize, 0usize);
            for k in 0..total {
                for l in (k + 1)..total {
                    if k % s == l % s {
                        continue;
                    }
                    let d = dist[k * total + l];
                    match (group[k], group[l]) {
                        (false, false) => {
                            s00 += d;
                            c00 += 1;
                        }
                        (true, true) => {
                            s11 += d;
                            c11 += 1;
                        }
                        _ => {
                            s01 += d;
                            c01 += 1;
                        }
                    }
                }
            }
            2.0 * s01 / c01.max(1) as f64 - s00 / c00.max(1) as f64 - s11 / c11.max(1) as f64
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    upper_quantile(&stats, config.level)
}

// ---------------------------------------------------------------------------
// Densities handed to the adversary

/// A log-density the recovery adversary can evaluate.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    fn log_density(&self, x: &[f64]) -> f64;
    /// Short name recorded in audit reports.
    fn describe(&self) -> String;
}

/// `N(0, I)` in `dim` dimensions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StandardNormalDensity {
    pub dim: usize,
}

impl LogDensity for StandardNormalDensity {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        standard_normal_log_density(x)
    }

    fn describe(&self) -> String {
        "standard-normal".into()
    }
}

/// `N(mean, cov)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDensity {
    mean: Vec<f64>,
    precision: Matrix,
    log_norm: f64,
}

impl GaussianDensity {
    pub fn new(mean: Vec<f64>, cov: &Matrix) -> Result<Self> {
        let m = mean.len();
        if cov.shape() != (m, m) || m == 0 {
            return Err(Error::ShapeMismatch(format!(
                "mean of dim {m} with covariance {:?}",
                cov.shape()
            )));
        }
        let lu = Lu::decompose(cov)?;
        let det = lu.determinant();
        if !(det > 0.0) {
            return Err(Error::Singular("covariance must be positive definite".into()));
        }
        let mut precision = Matrix::zeros(m, m);
        for j in 0..m {
            let mut e = vec![0.0; m];
            e[j] = 1.0;
            let col = lu.solve(&e)?;
            for (i, v) in col.into_iter().enumerate() {
                precision.set(i, j, v);
            }
        }
        Ok(Self {
            mean,
            precision,
            log_norm: -0.5 * (m as f64 * (2.0 * PI).ln() + det.ln()),
        })
    }
}

impl LogDensity for GaussianDensity {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let c: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        let pc = self.precision.matvec(&c).expect("dimension checked by caller");
        self.log_norm - 0.5 * c.iter().zip(&pc).map(|(a, b)| a * b).sum::<f64>()
    }

    fn describe(&self) -> String {
        "gaussian".into()
    }
}

/// Gaussian kernel density estimate with a Scott's-rule bandwidth.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelDensity {
    points: Vec<Vec<f64>>,
    bandwidth: f64,
}

impl KernelDensity {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        let fs = FeatureSamples::new(FeatureLabel::Gg, points)?;
        let (n, d) = (fs.len(), fs.dim());
        if n < 2 {
            return Err(Error::InvalidArgument("kernel density needs at least 2 points".into()));
        }
        let means = column_means(fs.vectors());
        let mean_sd = (0..d)
            .map(|k| {
                (fs.vectors().iter().map(|v| (v[k] - means[k]).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            })
            .sum::<f64>()
            / d as f64;
        if !(mean_sd > 0.0) {
            return Err(Error::DegenerateData("kernel density points are all identical".into()));
        }
        let bandwidth = mean_sd * (n as f64).powf(-1.0 / (d as f64 + 4.0));
        Self::with_bandwidth(fs.vectors, bandwidth)
    }

    pub fn with_bandwidth(points: Vec<Vec<f64>>, bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0) {
            return Err(Error::InvalidArgument(format!("bandwidth must be > 0, got {bandwidth}")));
        }
        let fs = FeatureSamples::new(FeatureLabel::Gg, points)?;
        Ok(Self {
            points: fs.vectors,
            bandwidth,
        })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }
}

impl LogDensity for KernelDensity {
    fn dim(&self) -> usize {
        self.points[0].len()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let h2 = self.bandwidth * self.bandwidth;
        let exps: Vec<f64> = self
            .points
            .iter()
            .map(|p| -p.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (2.0 * h2))
            .collect();
        let top = exps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = top + exps.iter().map(|e| (e - top).exp()).sum::<f64>().ln();
        let d = x.len() as f64;
        lse - (self.points.len() as f64).ln() - 0.5 * d * (2.0 * PI * h2).ln()
    }

    fn describe(&self) -> String {
        "feature-kde".into()
    }
}

impl LogDensity for FlowModel {
    fn dim(&self) -> usize {
        FlowModel::dim(self)
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        self.log_prob(x).unwrap_or(f64::NEG_INFINITY)
    }

    fn describe(&self) -> String {
        "flow".into()
    }
}

// ---------------------------------------------------------------------------
// Recovery adversary

/// Maximum-likelihood key guess at m = 2. Every rotation and reflection on a
/// `grid_size`-point angle grid is scored by `Σ log p(Cᵀ x̂_i)`. Candidates
/// within a relative `1e-9` of the best score are treated as tied and one is
/// drawn uniformly, so a rotation-invariant density yields a uniform guess.
pub fn recover_rotation_mle<R: Rng + ?Sized>(
    encrypted: &FeatureSamples,
    density: &dyn LogDensity,
    grid_size: usize,
    rng: &mut R,
) -> Result<Matrix> {
    if encrypted.dim() != 2 || density.dim() != 2 {
        return Err(Error::InvalidDimension(format!(
            "rotation recovery works at dim 2, got samples of dim {} and density of dim {}",
            encrypted.dim(),
            density.dim()
        )));
    }
    if grid_size < 8 {
        return Err(Error::InvalidArgument(format!("grid_size must be >= 8, got {grid_size}")));
    }
    let candidates: Vec<Matrix> = (0..grid_size)
        .flat_map(|k| {
            let phi = 2.0 * PI * k as f64 / grid_size as f64;
            [Matrix::rotation_2d(phi), Matrix::reflection_2d(phi)]
        })
        .collect();
    let scores: Vec<f64> = candidates
        .iter()
        .map(|c| {
            encrypted
                .vectors()
                .iter()
                .map(|x| {
                    let back = c.tr_matvec(x).expect("dim 2");
                    density.log_density(&back)
                })
                .sum()
        })
        .collect();
    let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !best.is_finite() {
        return Err(Error::NonFinite("every candidate has zero likelihood".into()));
    }
    let tol = TIE_RTOL * best.abs().max(1.0);
    let tied: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= best - tol).collect();
    let pick = tied[rng.random_range(0..tied.len())];
    Ok(candidates[pick].clone())
}

// ---------------------------------------------------------------------------
// Recovery-bound audit

/// Where the audit's features come from.
pub enum FeatureSource<'a> {
    /// Exact `N(0, I₂)` draws; the adversary is given the true density and
    /// the TV distance is zero.
    ExactGaussian,
    /// Flow features of `data`. The adversary is given a kernel density
    /// estimate of those features, and the TV distance to `N(0, I)` is
    /// estimated empirically.
    Flow { flow: &'a FlowModel, data: &'a [Vec<f64>] },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    pub theta: f64,
    /// Encrypted samples the adversary observes per trial.
    pub n: usize,
    pub trials: usize,
    pub seed: u64,
    pub grid_size: usize,
    /// Haar draws used to size the success ball.
    pub ball_samples: usize,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            theta: 0.25,
            n: 10,
            trials: 1000,
            seed: 0,
            grid_size: 360,
            ball_samples: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub theta: f64,
    pub n: usize,
    pub trials: usize,
    pub tv: TVEstimate,
    pub p_hat: f64,
    pub bound: f64,
    pub holds: bool,
    pub seed: u64,
    pub ball_radius: f64,
    pub adversary_density: String,
}

const KDE_MAX_POINTS: usize = 1000;

/// Runs `trials` independent recovery games: draw a Haar key, encrypt `n`
/// feature draws, let the MLE adversary guess, and score the guess against
/// the `theta`-ball. Compares the success rate to `min(1, n·δ + θ)`.
pub fn theorem_bound_audit(source: &FeatureSource<'_>, config: &AuditConfig) -> Result<AuditReport> {
    if config.trials < MIN_AUDIT_TRIALS {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_AUDIT_TRIALS} trials, got {}",
            config.trials
        )));
    }
    if config.n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    let mut ball_rng = seeded(derive_seed(config.seed, u64::MAX));
    let ball = ball_radius_for_volume(config.theta, 2, config.ball_samples, &mut ball_rng)?;

    let mut setup_rng = seeded(derive_seed(config.seed, u64::MAX - 1));
    let (pool, tv, density): (Option<Vec<Vec<f64>>>, TVEstimate, Box<dyn LogDensity>) = match source {
        FeatureSource::ExactGaussian => (
            None,
            TVEstimate {
                value: 0.0,
                method: TvMethod::Analytic,
                ci_halfwidth: 0.0,
            },
            Box::new(StandardNormalDensity { dim: 2 }),
        ),
        FeatureSource::Flow { flow, data } => {
            if flow.dim() != 2 {
                return Err(Error::InvalidDimension(format!(
                    "the audit attacks dim 2, flow has dim {}",
                    flow.dim()
                )));
            }
            let features: Vec<Vec<f64>> = data
                .iter()
                .map(|s| flow.forward(s).map(|z| z.values))
                .collect::<Result<_>>()?;
            let gg = FeatureSamples::new(FeatureLabel::Gg, features.clone())?;
            let h0 = FeatureSamples::standard_normal(gg.len(), 2, &mut setup_rng)?;
            let tv = tv_empirical(&gg, &h0, &mut setup_rng)?;
            let mut kde_points = features.clone();
            kde_points.shuffle(&mut setup_rng);
            kde_points.truncate(KDE_MAX_POINTS);
            (Some(features), tv, Box::new(KernelDensity::new(kde_points)?))
        }
    };

    let outcomes: Vec<bool> = (0..config.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = seeded(derive_seed(config.seed, t as u64));
            let key = OrthogonalKey::sample(2, &mut rng)?;
            let plain: Vec<Vec<f64>> = match &pool {
                None => (0..config.n)
                    .map(|_| vec![rng.sample(StandardNormal), rng.sample(StandardNormal)])
                    .collect(),
                Some(p) => (0..config.n).map(|_| p[rng.random_range(0..p.len())].clone()).collect(),
            };
            let encrypted = FeatureSamples::new(FeatureLabel::H1, plain)?.rotated(&key)?;
            let guess = recover_rotation_mle(&encrypted, density.as_ref(), config.grid_size, &mut rng)?;
            is_successful_recovery(&guess, &key, &ball)
        })
        .collect::<Result<_>>()?;

    let trials = config.trials as f64;
    let p_hat = outcomes.iter().filter(|&&s| s).count() as f64 / trials;
    let bound = (config.n as f64 * tv.value + config.theta).min(1.0);
    let sigma = (p_hat * (1.0 - p_hat) / trials).sqrt();
    Ok(AuditReport {
        theta: config.theta,
        n: config.n,
        trials: config.trials,
        tv,
        p_hat,
        bound,
        holds: p_hat <= bound + 3.0 * sigma,
        seed: config.seed,
        ball_radius: ball.radius,
        adversary_density: density.describe(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowArch;
    use crate::rng::seeded;

    /// Composite Simpson rule for `½∫|p − q|`, split at the crossing point.
    fn tv_by_quadrature(mu1: f64, mu2: f64, sigma: f64) -> f64 {
        let pdf = |x: f64, mu: f64| (-(x - mu).powi(2) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * PI).sqrt());
        let f = |x: f64| (pdf(x, mu1) - pdf(x, mu2)).abs();
        let simpson = |a: f64, b: f64, k: usize| {
            let h = (b - a) / k as f64;
            let mut s = f(a) + f(b);
            for i in 1..k {
                s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            s * h / 3.0
        };
        let mid = 0.5 * (mu1 + mu2);
        let reach = 40.0 * sigma + (mu1 - mu2).abs();
        0.5 * (simpson(mid - reach, mid, 20_000) + simpson(mid, mid + reach, 20_000))
    }

    #[test]
    fn analytic_tv_matches_quadrature() {
        for sigma in [0.5, 1.0, 2.0] {
            for k in 0..=12 {
                let dmu = 0.5 * k as f64;
                let a = tv_analytic_gaussian(0.0, dmu, sigma).unwrap();
                let b = tv_by_quadrature(0.0, dmu, sigma);
                assert!((a - b).abs() < 1e-8, "Δμ={dmu} σ={sigma}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn analytic_tv_examples() {
        assert_eq!(tv_analytic_gaussian(1.5, 1.5, 1.0).unwrap(), 0.0);
        assert!((tv_analytic_gaussian(0.0, 1.0, 1.0).unwrap() - 0.382925).abs() < 1e-6);
        assert!(1.0 - tv_analytic_gaussian(0.0, 20.0, 1.0).unwrap() < 1e-15);
        assert!(tv_analytic_gaussian(0.0, 1.0, 0.0).is_err());
        assert!(tv_analytic_gaussian(0.0, 1.0, -1.0).is_err());
    }

    fn normal_1d(n: usize, mu: f64, rng: &mut impl rand::Rng) -> FeatureSamples {
        let v = (0..n).map(|_| vec![mu + rng.sample::<f64, _>(StandardNormal)]).collect();
        FeatureSamples::new(FeatureLabel::H0, v).unwrap()
    }

    #[test]
    fn empirical_tv_same_distribution() {
        let mut rng = seeded(2);
        for dim in [1, 2, 3, 5] {
            let p = FeatureSamples::standard_normal(4000, dim, &mut rng).unwrap();
            let q = FeatureSamples::standard_normal(4000, dim, &mut rng).unwrap();
            let est = tv_empirical(&p, &q, &mut rng).unwrap();
            assert!(est.value <= est.ci_halfwidth + 0.02, "dim {dim}: {est:?}");
            let expected = if dim <= 3 { TvMethod::Histogram } else { TvMethod::ClassifierLowerBound };
            assert_eq!(est.method, expected);
        }
    }

    #[test]
    fn empirical_tv_shifted_normals() {
        let mut rng = seeded(3);
        let p = normal_1d(100_000, 0.0, &mut rng);
        let q = normal_1d(100_000, 1.0, &mut rng);
        let est = tv_empirical(&p, &q, &mut rng).unwrap();
        assert!((est.value - 0.382925).abs() < 0.03, "{est:?}");
        assert!(est.ci_halfwidth > 0.0 && est.ci_halfwidth < 0.03);
    }

    #[test]
    fn empirical_tv_disjoint_supports() {
        let mut rng = seeded(4);
        let p = FeatureSamples::new(FeatureLabel::H0, (0..2000).map(|_| vec![rng.random::<f64>()]).collect()).unwrap();
        let q = FeatureSamples::new(FeatureLabel::H1, (0..2000).map(|_| vec![2.0 + rng.random::<f64>()]).collect())
            .unwrap();
        assert!(tv_empirical(&p, &q, &mut rng).unwrap().value >= 0.99);
    }

    #[test]
    fn classifier_bound_sees_a_mean_shift() {
        let mut rng = seeded(5);
        let p = FeatureSamples::standard_normal(4000, 6, &mut rng).unwrap();
        let shifted: Vec<Vec<f64>> = FeatureSamples::standard_normal(4000, 6, &mut rng)
            .unwrap()
            .vectors()
            .iter()
            .map(|v| {
                let mut v = v.clone();
                v[0] += 1.0;
                v
            })
            .collect();
        let q = FeatureSamples::new(FeatureLabel::H1, shifted).unwrap();
        let est = tv_empirical(&p, &q, &mut rng).unwrap();
        assert_eq!(est.method, TvMethod::ClassifierLowerBound);
        // The optimal separator is linear here, so the bound is tight.
        assert!((est.value - 0.382925).abs() < 0.05, "{est:?}");
    }

    #[test]
    fn empirical_tv_input_errors() {
        let mut rng = seeded(6);
        let a = FeatureSamples::standard_normal(1000, 2, &mut rng).unwrap();
        let b = FeatureSamples::standard_normal(1000, 3, &mut rng).unwrap();
        let small = FeatureSamples::standard_normal(999, 2, &mut rng).unwrap();
        assert!(matches!(tv_empirical(&a, &b, &mut rng), Err(Error::ShapeMismatch(_))));
        assert!(matches!(tv_empirical(&a, &small, &mut rng), Err(Error::InvalidArgument(_))));
        assert!(FeatureSamples::new(FeatureLabel::H0, vec![vec![0.0], vec![0.0, 1.0]]).is_err());
    }

    #[test]
    fn sandwich_examples() {
        let r = sandwich_check(0.7, 1.0, 1).unwrap();
        assert!((r.delta_1 - r.delta_n).abs() < 1e-15 && (r.middle - r.delta_1).abs() < 1e-15);
        assert_eq!(r.upper, r.delta_1);

        let (mid, up) = sandwich_bounds(0.1, 3).unwrap();
        assert!((mid - 0.271).abs() < 1e-12 && (up - 0.3).abs() < 1e-12);

        let r = sandwich_check(0.2, 1.0, 3).unwrap();
        assert!((r.delta_1 - 0.0797).abs() < 5e-5, "{r:?}");
        assert!((r.delta_n - 0.1375).abs() < 5e-5, "{r:?}");
        let d1 = r.delta_1;
        assert!((r.middle - (1.0 - (1.0 - d1).powi(3))).abs() < 1e-14);
        assert!((r.upper - 3.0 * d1).abs() < 1e-15);
        assert!((r.middle - 0.2210).abs() < 1e-3, "{r:?}");
        assert!((r.upper - 0.2392).abs() < 1e-3, "{r:?}");
        assert!(r.holds);
        assert!(sandwich_check(0.2, 1.0, 0).is_err());
    }

    #[test]
    fn sandwich_holds_on_grid() {
        for k in 1..=10 {
            for n in 1..=10 {
                let r = sandwich_check(0.1 * k as f64, 1.0, n).unwrap();
                assert!(r.holds, "{r:?}");
            }
        }
    }

    #[test]
    fn invariance_passes_for_standard_normal() {
        let config = InvarianceConfig::default();
        let seeds = 40;
        let passed = (0..seeds)
            .filter(|&s| {
                let mut rng = seeded(100 + s);
                let samples = FeatureSamples::standard_normal(1000, 2, &mut rng).unwrap();
                let key = OrthogonalKey::sample(2, &mut rng).unwrap();
                rotation_invariance_check(&samples, &key, &config, &mut rng).unwrap().all_passed()
            })
            .count();
        assert!(passed as f64 >= 0.95 * seeds as f64, "{passed}/{seeds}");
    }

    #[test]
    fn invariance_identity_key_has_zero_energy() {
        let mut rng = seeded(7);
        let samples = FeatureSamples::standard_normal(1000, 3, &mut rng).unwrap();
        let key = OrthogonalKey::identity(3).unwrap();
        let r = rotation_invariance_check(&samples, &key, &InvarianceConfig::default(), &mut rng).unwrap();
        assert_eq!(r.energy.statistic, 0.0);
        assert!(r.energy.passed);
    }

    #[test]
    fn invariance_rejects_anisotropic_covariance() {
        let mut rng = seeded(8);
        let v = (0..2000)
            .map(|_| vec![2.0 * rng.sample::<f64, _>(StandardNormal), rng.sample(StandardNormal)])
            .collect();
        let samples = FeatureSamples::new(FeatureLabel::Gg, v).unwrap();
        let key = OrthogonalKey::from_matrix(Matrix::rotation_2d(PI / 4.0)).unwrap();
        let r = rotation_invariance_check(&samples, &key, &InvarianceConfig::default(), &mut rng).unwrap();
        assert!(!r.covariance.passed, "{r:?}");
        assert!(!r.energy.passed, "{r:?}");
    }

    #[test]
    fn invariance_input_errors() {
        let mut rng = seeded(9);
        let small = FeatureSamples::standard_normal(999, 2, &mut rng).unwrap();
        let key = OrthogonalKey::identity(2).unwrap();
        let cfg = InvarianceConfig::default();
        assert!(rotation_invariance_check(&small, &key, &cfg, &mut rng).is_err());
        let ok = FeatureSamples::standard_normal(1000, 2, &mut rng).unwrap();
        let key3 = OrthogonalKey::identity(3).unwrap();
        assert!(matches!(
            rotation_invariance_check(&ok, &key3, &cfg, &mut rng),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn densities_agree() {
        let g = GaussianDensity::new(vec![0.0, 0.0], &Matrix::identity(2)).unwrap();
        let s = StandardNormalDensity { dim: 2 };
        for x in [[0.0, 0.0], [1.0, -2.0], [0.3, 0.7]] {
            assert!((g.log_density(&x) - s.log_density(&x)).abs() < 1e-12);
        }
        let aniso = GaussianDensity::new(vec![1.0, 0.0], &Matrix::from_diag(&[4.0, 1.0])).unwrap();
        let expected = -(2.0 * PI).ln() - 0.5 * 4f64.ln() - 0.5 * (1.0 / 4.0 + 1.0);
        assert!((aniso.log_density(&[2.0, 1.0]) - expected).abs() < 1e-12);
        assert!(GaussianDensity::new(vec![0.0, 0.0], &Matrix::from_diag(&[1.0, -1.0])).is_err());

        let kde = KernelDensity::with_bandwidth(vec![vec![0.0, 0.0]], 1.0).unwrap();
        assert!((kde.log_density(&[1.0, -2.0]) - s.log_density(&[1.0, -2.0])).abs() < 1e-12);
    }

    fn angle_of(m: &Matrix) -> f64 {
        m.get(1, 0).atan2(m.get(0, 0)).rem_euclid(2.0 * PI)
    }

    #[test]
    fn mle_is_uniform_under_isotropy() {
        let density = StandardNormalDensity { dim: 2 };
        let mut counts = [0usize; 8];
        let seeds = 2000;
        for s in 0..seeds {
            let mut rng = seeded(derive_seed(11, s));
            let key = OrthogonalKey::sample(2, &mut rng).unwrap();
            let x = FeatureSamples::standard_normal(10, 2, &mut rng).unwrap().rotated(&key).unwrap();
            let guess = recover_rotation_mle(&x, &density, 64, &mut rng).unwrap();
            counts[(angle_of(&guess) / (2.0 * PI) * 8.0) as usize % 8] += 1;
        }
        let expected = seeds as f64 / 8.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99th percentile of χ² with 7 degrees of freedom.
        assert!(chi2 < 18.475, "{counts:?} χ²={chi2}");
    }

    fn axis_error_deg(m: &Matrix, target: f64) -> f64 {
        // The covariance axes are only defined up to sign.
        let d = (m.get(1, 0).atan2(m.get(0, 0)) - target).rem_euclid(PI);
        d.min(PI - d).to_degrees()
    }

    #[test]
    fn mle_finds_anisotropic_axis() {
        let density = GaussianDensity::new(vec![0.0, 0.0], &Matrix::from_diag(&[4.0, 1.0])).unwrap();
        let truth = 30f64.to_radians();
        let key = OrthogonalKey::from_matrix(Matrix::rotation_2d(truth)).unwrap();
        let run = |n: usize, seeds: u64, tol: f64| {
            (0..seeds)
                .filter(|&s| {
                    let mut rng = seeded(derive_seed(12, s));
                    let v = (0..n)
                        .map(|_| vec![2.0 * rng.sample::<f64, _>(StandardNormal), rng.sample(StandardNormal)])
                        .collect();
                    let x = FeatureSamples::new(FeatureLabel::Gg, v).unwrap().rotated(&key).unwrap();
                    let guess = recover_rotation_mle(&x, &density, 720, &mut rng).unwrap();
                    axis_error_deg(&guess, truth) <= tol
                })
                .count() as f64
                / seeds as f64
        };
        // The Cramér–Rao standard deviation is √(λ₁λ₂/n)/(λ₁−λ₂) rad, about
        // 1.7° at n = 500 and 0.54° at n = 5000.
        assert!(run(500, 100, 5.0) >= 0.95);
        assert!(run(5000, 40, 2.0) >= 0.95);
    }

    #[test]
    fn mle_input_errors() {
        let mut rng = seeded(13);
        let x = FeatureSamples::standard_normal(5, 2, &mut rng).unwrap();
        let d = StandardNormalDensity { dim: 2 };
        assert!(recover_rotation_mle(&x, &d, 7, &mut rng).is_err());
        let x3 = FeatureSamples::standard_normal(5, 3, &mut rng).unwrap();
        assert!(recover_rotation_mle(&x3, &StandardNormalDensity { dim: 3 }, 8, &mut rng).is_err());
    }

    #[test]
    fn single_sample_success_rate_is_theta() {
        let cfg = AuditConfig {
            theta: 0.25,
            n: 1,
            trials: 1000,
            seed: 14,
            grid_size: 90,
            ..AuditConfig::default()
        };
        let r = theorem_bound_audit(&FeatureSource::ExactGaussian, &cfg).unwrap();
        let sigma = (0.25f64 * 0.75 / 1000.0).sqrt();
        assert!((r.p_hat - 0.25).abs() <= 3.0 * sigma, "{r:?}");
        assert!(r.holds);
    }

    #[test]
    fn audit_full_ball_and_monotonicity() {
        let base = AuditConfig {
            n: 5,
            trials: 200,
            seed: 15,
            grid_size: 72,
            ball_samples: 5000,
            ..AuditConfig::default()
        };
        let full = theorem_bound_audit(&FeatureSource::ExactGaussian, &AuditConfig { theta: 1.0, ..base }).unwrap();
        assert_eq!(full.p_hat, 1.0);
        assert_eq!(full.bound, 1.0);
        assert!(full.holds);

        let mut last = 0.0;
        for theta in [0.05, 0.25, 0.5, 0.75, 1.0] {
            let r = theorem_bound_audit(&FeatureSource::ExactGaussian, &AuditConfig { theta, ..base }).unwrap();
            assert!(r.p_hat >= last, "θ={theta}: {} < {last}", r.p_hat);
            last = r.p_hat;
        }
        assert!(theorem_bound_audit(&FeatureSource::ExactGaussian, &AuditConfig { trials: 199, ..base }).is_err());
    }

    #[test]
    fn audit_report_json_fields() {
        let cfg = AuditConfig {
            trials: 200,
            grid_size: 16,
            ball_samples: 2000,
            ..AuditConfig::default()
        };
        let r = theorem_bound_audit(&FeatureSource::ExactGaussian, &cfg).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for field in ["theta", "n", "trials", "p_hat", "bound", "holds", "seed"] {
            assert!(v.get(field).is_some(), "missing {field}");
        }
        assert_eq!(v["tv"]["method"], "analytic");
        assert!(v["tv"].get("ci").is_some() && v["tv"].get("value").is_some());
    }

    #[test]
    fn audit_on_non_gaussian_features() {
        let mut rng = seeded(16);
        let flow = FlowModel::randomized(2, FlowArch { blocks: 2, hidden: 8 }, &mut rng).unwrap();
        let moons = crate::datasets::two_moons(2000, 0.05, &mut rng);
        let cfg = AuditConfig {
            theta: 0.05,
            n: 10,
            trials: 200,
            seed: 17,
            grid_size: 72,
            ball_samples: 5000,
        };
        let r = theorem_bound_audit(&FeatureSource::Flow { flow: &flow, data: &moons }, &cfg).unwrap();
        assert_eq!(r.adversary_density, "feature-kde");
        assert_eq!(r.tv.method, TvMethod::Histogram);
        assert!(r.tv.value > 0.1, "{r:?}");
        assert!(r.p_hat > cfg.theta, "{r:?}");
        assert!(r.holds, "{r:?}");
    }
}
