use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{sample_haar_orthogonal, solve_unit_lower, solve_upper, Lu, Matrix};

/// Bound on the coupling log-scale: `s = S_MAX · tanh(raw)`.
pub const S_MAX: f64 = 2.0;

/// Per-dimension affine normalization `y = (x + bias) ⊙ exp(log_scale)`,
/// initialized from the statistics of the first batch it sees.
#[derive(Debug, Clone, PartialEq)]
pub struct ActNorm {
    pub log_scale: Vec<f64>,
    pub bias: Vec<f64>,
    pub initialized: bool,
}

impl ActNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            log_scale: vec![0.0; dim],
            bias: vec![0.0; dim],
            initialized: false,
        }
    }

    pub fn scale(&self) -> Vec<f64> {
        self.log_scale.iter().map(|l| l.exp()).collect()
    }

    /// Data-dependent init: after this call the layer maps `batch` to zero
    /// mean and unit (population) variance in every dimension.
    pub fn initialize(&mut self, batch: &[Vec<f64>]) -> Result<()> {
        if self.initialized {
            return Err(Error::AlreadyInitialized("actnorm layer".into()));
        }
        let dim = self.bias.len();
        if batch.is_empty() {
            return Err(Error::InvalidArgument("actnorm init needs a non-empty batch".into()));
        }
        if let Some(bad) = batch.iter().find(|x| x.len() != dim) {
            return Err(Error::ShapeMismatch(format!(
                "actnorm of dim {dim} got sample of dim {}",
                bad.len()
            )));
        }
        let n = batch.len() as f64;
        for d in 0..dim {
            let mean = batch.iter().map(|x| x[d]).sum::<f64>() / n;
            let var = batch.iter().map(|x| (x[d] - mean).powi(2)).sum::<f64>() / n;
            if !(var > 0.0) || !var.is_finite() {
                return Err(Error::DegenerateData(format!(
                    "dimension {d} has zero variance in the initialization batch"
                )));
            }
            self.bias[d] = -mean;
            self.log_scale[d] = -0.5 * var.ln();
        }
        self.initialized = true;
        Ok(())
    }

    fn forward(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let y = x
            .iter()
            .zip(&self.bias)
            .zip(&self.log_scale)
            .map(|((xi, b), l)| (xi + b) * l.exp())
            .collect();
        (y, self.log_scale.iter().sum())
    }

    fn inverse(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(&self.bias)
            .zip(&self.log_scale)
            .map(|((yi, b), l)| yi * (-l).exp() - b)
            .collect()
    }

    fn backward(&self, x: &[f64], gy: &[f64], g_ldj: f64, grad: &mut [f64]) -> Vec<f64> {
        let dim = x.len();
        let (g_ls, g_b) = grad.split_at_mut(dim);
        let mut gx = vec![0.0; dim];
        for d in 0..dim {
            let s = self.log_scale[d].exp();
            let y = (x[d] + self.bias[d]) * s;
            g_ls[d] += gy[d] * y + g_ldj;
            g_b[d] += gy[d] * s;
            gx[d] = gy[d] * s;
        }
        gx
    }
}

/// Learned invertible linear map `W = Pᵀ · L · (U + diag(sign ⊙ exp(log_diag)))`
/// with `L` unit lower triangular, `U` strictly upper triangular, and `P`,
/// `sign` fixed at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct InvertibleLinear {
    /// Row `i` of `L·U'` lands at output position `perm[i]`.
    pub perm: Vec<usize>,
    pub sign: Vec<f64>,
    /// Only the strictly lower part is used.
    pub lower: Matrix,
    /// Only the strictly upper part is used.
    pub upper: Matrix,
    pub log_diag: Vec<f64>,
}

impl InvertibleLinear {
    pub fn from_weight(w: &Matrix) -> Result<Self> {
        if !w.is_square() {
            return Err(Error::ShapeMismatch("invertible linear weight must be square".into()));
        }
        let n = w.rows();
        let lu = Lu::decompose(w)?;
        let mut lower = Matrix::zeros(n, n);
        let mut upper = Matrix::zeros(n, n);
        let mut sign = vec![0.0; n];
        let mut log_diag = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                if i > j {
                    lower.set(i, j, lu.lower.get(i, j));
                } else if i < j {
                    upper.set(i, j, lu.upper.get(i, j));
                }
            }
            let d = lu.upper.get(i, i);
            sign[i] = d.signum();
            log_diag[i] = d.abs().ln();
        }
        Ok(Self {
            perm: lu.perm,
            sign,
            lower,
            upper,
            log_diag,
        })
    }

    /// Initialized as a random rotation (Haar on SO(m)), so the log-det is 0.
    pub fn random_rotation<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<Self> {
        let mut q = sample_haar_orthogonal(dim, rng)?;
        if q.determinant()? < 0.0 {
            for i in 0..dim {
                let v = -q.get(i, 0);
                q.set(i, 0, v);
            }
        }
        Self::from_weight(&q)
    }

    pub fn dim(&self) -> usize {
        self.sign.len()
    }

    fn diag(&self, i: usize) -> f64 {
        self.sign[i] * self.log_diag[i].exp()
    }

    pub fn weight(&self) -> Matrix {
        let n = self.dim();
        let mut l = Matrix::identity(n);
        let mut u = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if i > j {
                    l.set(i, j, self.lower.get(i, j));
                } else if i < j {
                    u.set(i, j, self.upper.get(i, j));
                }
            }
            u.set(i, i, self.diag(i));
        }
        let lu = l.matmul(&u).expect("square factors");
        let mut w = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                w.set(self.perm[i], j, lu.get(i, j));
            }
        }
        w
    }

    fn upper_apply(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        (0..n)
            .map(|i| self.diag(i) * x[i] + (i + 1..n).map(|j| self.upper.get(i, j) * x[j]).sum::<f64>())
            .collect()
    }

    fn lower_apply(&self, u: &[f64]) -> Vec<f64> {
        (0..u.len())
            .map(|i| u[i] + (0..i).map(|j| self.lower.get(i, j) * u[j]).sum::<f64>())
            .collect()
    }

    fn forward(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let u = self.upper_apply(x);
        let w = self.lower_apply(&u);
        let mut y = vec![0.0; x.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            y[p] = w[i];
        }
        (y, self.log_diag.iter().sum())
    }

    fn inverse(&self, y: &[f64]) -> Result<Vec<f64>> {
        let n = y.len();
        let w: Vec<f64> = self.perm.iter().map(|&p| y[p]).collect();
        let u = solve_unit_lower(&self.lower, &w);
        let mut full_upper = self.upper.clone();
        for i in 0..n {
            let d = self.diag(i);
            if d == 0.0 || !d.is_finite() {
                return Err(Error::Singular(format!(
                    "invertible linear diagonal {i} is {d}"
                )));
            }
            full_upper.set(i, i, d);
            for j in 0..i {
                full_upper.set(i, j, 0.0);
            }
        }
        solve_upper(&full_upper, &u)
    }

    fn backward(&self, x: &[f64], gy: &[f64], g_ldj: f64, grad: &mut [f64]) -> Vec<f64> {
        let n = x.len();
        let u = self.upper_apply(x);
        let gw: Vec<f64> = self.perm.iter().map(|&p| gy[p]).collect();
        // gu = Lᵀ gw
        let mut gu = gw.clone();
        for i in 0..n {
            for j in 0..i {
                gu[j] += self.lower.get(i, j) * gw[i];
            }
        }
        let tri = n * (n - 1) / 2;
        let (g_lower, rest) = grad.split_at_mut(tri);
        let (g_upper, g_logd) = rest.split_at_mut(tri);
        let mut idx = 0;
        for i in 0..n {
            for j in 0..i {
                g_lower[idx] += gw[i] * u[j];
                idx += 1;
            }
        }
        idx = 0;
        for i in 0..n {
            for j in i + 1..n {
                g_upper[idx] += gu[i] * x[j];
                idx += 1;
            }
            g_logd[i] += gu[i] * x[i] * self.diag(i) + g_ldj;
        }
        // gx = U'ᵀ gu
        let mut gx = vec![0.0; n];
        for i in 0..n {
            gx[i] += self.diag(i) * gu[i];
            for j in i + 1..n {
                gx[j] += self.upper.get(i, j) * gu[i];
            }
        }
        gx
    }
}

/// Affine coupling: coordinates with `mask = true` pass through and condition
/// a one-hidden-layer tanh network that outputs a bounded log-scale and a
/// shift for the remaining coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineCoupling {
    pub mask: Vec<bool>,
    /// `hidden × |conditioning dims|`.
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// `2·|transformed dims| × hidden`; rows `0..nt` give the raw log-scale,
    /// rows `nt..2nt` the shift.
    pub w2: Matrix,
    pub b2: Vec<f64>,
    cond_idx: Vec<usize>,
    trans_idx: Vec<usize>,
}

struct CouplingActs {
    h: Vec<f64>,
    raw: Vec<f64>,
    shift: Vec<f64>,
}

impl AffineCoupling {
    pub fn new(mask: Vec<bool>, w1: Matrix, b1: Vec<f64>, w2: Matrix, b2: Vec<f64>) -> Result<Self> {
        let cond_idx: Vec<usize> = (0..mask.len()).filter(|&d| mask[d]).collect();
        let trans_idx: Vec<usize> = (0..mask.len()).filter(|&d| !mask[d]).collect();
        if cond_idx.is_empty() || trans_idx.is_empty() {
            return Err(Error::InvalidArgument(
                "coupling mask must have both conditioning and transformed coordinates".into(),
            ));
        }
        let hidden = b1.len();
        let nt = trans_idx.len();
        if w1.shape() != (hidden, cond_idx.len()) || w2.shape() != (2 * nt, hidden) || b2.len() != 2 * nt
        {
            return Err(Error::ShapeMismatch(format!(
                "coupling parameters: w1 {:?}, b1 {}, w2 {:?}, b2 {} for mask of {} cond / {} transformed",
                w1.shape(),
                hidden,
                w2.shape(),
                b2.len(),
                cond_idx.len(),
                nt
            )));
        }
        Ok(Self {
            mask,
            w1,
            b1,
            w2,
            b2,
            cond_idx,
            trans_idx,
        })
    }

    /// Random first layer (std `1/√fan_in`) and an output layer with entries
    /// of std `out_std`; `out_std = 0` starts the layer at the identity.
    pub fn init<R: Rng + ?Sized>(mask: Vec<bool>, hidden: usize, out_std: f64, rng: &mut R) -> Result<Self> {
        let k = mask.iter().filter(|&&m| m).count();
        let nt = mask.len() - k;
        let s1 = 1.0 / (k.max(1) as f64).sqrt();
        let w1 = Matrix::new(hidden, k, gaussian_vec(rng, hidden * k, s1))?;
        let b1 = gaussian_vec(rng, hidden, 0.1);
        let w2 = Matrix::new(2 * nt, hidden, gaussian_vec(rng, 2 * nt * hidden, out_std))?;
        let b2 = gaussian_vec(rng, 2 * nt, out_std);
        Self::new(mask, w1, b1, w2, b2)
    }

    pub fn dim(&self) -> usize {
        self.mask.len()
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    fn activations(&self, x: &[f64]) -> CouplingActs {
        let xa: Vec<f64> = self.cond_idx.iter().map(|&d| x[d]).collect();
        let h: Vec<f64> = (0..self.hidden())
            .map(|i| (crate::linalg::dot(self.w1.row(i), &xa) + self.b1[i]).tanh())
            .collect();
        let nt = self.trans_idx.len();
        let o: Vec<f64> = (0..2 * nt)
            .map(|i| crate::linalg::dot(self.w2.row(i), &h) + self.b2[i])
            .collect();
        CouplingActs {
            h,
            raw: o[..nt].to_vec(),
            shift: o[nt..].to_vec(),
        }
    }

    fn forward(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let acts = self.activations(x);
        let mut y = x.to_vec();
        let mut ldj = 0.0;
        for (j, &d) in self.trans_idx.iter().enumerate() {
            let s = S_MAX * acts.raw[j].tanh();
            y[d] = x[d] * s.exp() + acts.shift[j];
            ldj += s;
        }
        (y, ldj)
    }

    fn inverse(&self, y: &[f64]) -> Vec<f64> {
        // Conditioning coordinates are unchanged, so the conditioner can be
        // evaluated on y directly.
        let acts = self.activations(y);
        let mut x = y.to_vec();
        for (j, &d) in self.trans_idx.iter().enumerate() {
            let s = S_MAX * acts.raw[j].tanh();
            x[d] = (y[d] - acts.shift[j]) * (-s).exp();
        }
        x
    }

    fn backward(&self, x: &[f64], gy: &[f64], g_ldj: f64, grad: &mut [f64]) -> Vec<f64> {
        let acts = self.activations(x);
        let hidden = self.hidden();
        let k = self.cond_idx.len();
        let nt = self.trans_idx.len();
        let mut gx = gy.to_vec();

        let mut g_o = vec![0.0; 2 * nt];
        for (j, &d) in self.trans_idx.iter().enumerate() {
            let th = acts.raw[j].tanh();
            let e = (S_MAX * th).exp();
            gx[d] = gy[d] * e;
            let g_s = gy[d] * x[d] * e + g_ldj;
            g_o[j] = g_s * S_MAX * (1.0 - th * th);
            g_o[nt + j] = gy[d];
        }

        let (g_w1, rest) = grad.split_at_mut(hidden * k);
        let (g_b1, rest) = rest.split_at_mut(hidden);
        let (g_w2, g_b2) = rest.split_at_mut(2 * nt * hidden);

        let mut g_h = vec![0.0; hidden];
        for (i, &go) in g_o.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            let row = self.w2.row(i);
            for (c, &hc) in acts.h.iter().enumerate() {
                g_w2[i * hidden + c] += go * hc;
                g_h[c] += go * row[c];
            }
            g_b2[i] += go;
        }
        for c in 0..hidden {
            let g_pre = g_h[c] * (1.0 - acts.h[c] * acts.h[c]);
            g_b1[c] += g_pre;
            let row = self.w1.row(c);
            for (a, &d) in self.cond_idx.iter().enumerate() {
                g_w1[c * k + a] += g_pre * x[d];
                gx[d] += g_pre * row[a];
            }
        }
        gx
    }
}

fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
        .collect()
}

/// One invertible step of a flow.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    ActNorm(ActNorm),
    InvertibleLinear(InvertibleLinear),
    AffineCoupling(AffineCoupling),
}

impl Layer {
    pub fn dim(&self) -> usize {
        match self {
            Layer::ActNorm(l) => l.bias.len(),
            Layer::InvertibleLinear(l) => l.dim(),
            Layer::AffineCoupling(l) => l.dim(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Layer::ActNorm(_) => "actnorm",
            Layer::InvertibleLinear(_) => "invertible-linear",
            Layer::AffineCoupling(_) => "affine-coupling",
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "{} layer of dim {} got input of dim {}",
                self.name(),
                self.dim(),
                x.len()
            )));
        }
        if let Some(d) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{} input coordinate {d}", self.name())));
        }
        Ok(())
    }

    /// Returns `(y, log|det ∂y/∂x|)`.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_input(x)?;
        Ok(match self {
            Layer::ActNorm(l) => l.forward(x),
            Layer::InvertibleLinear(l) => l.forward(x),
            Layer::AffineCoupling(l) => l.forward(x),
        })
    }

    pub fn inverse(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check_input(y)?;
        match self {
            Layer::ActNorm(l) => Ok(l.inverse(y)),
            Layer::InvertibleLinear(l) => l.inverse(y),
            Layer::AffineCoupling(l) => Ok(l.inverse(y)),
        }
    }

    /// Reverse-mode step for a scalar loss `L(y, ldj)`: given `gy = ∂L/∂y`
    /// and `g_ldj = ∂L/∂ldj`, accumulates parameter gradients into `grad`
    /// (laid out as [`Layer::params`]) and returns `∂L/∂x`.
    pub fn backward(&self, x: &[f64], gy: &[f64], g_ldj: f64, grad: &mut [f64]) -> Vec<f64> {
        debug_assert_eq!(grad.len(), self.param_count());
        match self {
            Layer::ActNorm(l) => l.backward(x, gy, g_ldj, grad),
            Layer::InvertibleLinear(l) => l.backward(x, gy, g_ldj, grad),
            Layer::AffineCoupling(l) => l.backward(x, gy, g_ldj, grad),
        }
    }

    pub fn param_count(&self) -> usize {
        let n = self.dim();
        match self {
            Layer::ActNorm(_) => 2 * n,
            Layer::InvertibleLinear(_) => n * (n - 1) + n,
            Layer::AffineCoupling(l) => {
                l.w1.as_slice().len() + l.b1.len() + l.w2.as_slice().len() + l.b2.len()
            }
        }
    }

    /// Trainable parameters, flattened. Actnorm: `log_scale, bias`.
    /// Invertible linear: strict lower (row-major), strict upper (row-major),
    /// `log_diag`. Coupling: `w1, b1, w2, b2`.
    pub fn params(&self) -> Vec<f64> {
        match self {
            Layer::ActNorm(l) => [l.log_scale.as_slice(), &l.bias].concat(),
            Layer::InvertibleLinear(l) => {
                let n = l.dim();
                let mut p = Vec::with_capacity(n * n);
                for i in 0..n {
                    for j in 0..i {
                        p.push(l.lower.get(i, j));
                    }
                }
                for i in 0..n {
                    for j in i + 1..n {
                        p.push(l.upper.get(i, j));
                    }
                }
                p.extend_from_slice(&l.log_diag);
                p
            }
            Layer::AffineCoupling(l) => {
                [l.w1.as_slice(), &l.b1, l.w2.as_slice(), &l.b2].concat()
            }
        }
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} layer has {} parameters, got {}",
                self.name(),
                self.param_count(),
                p.len()
            )));
        }
        if let Some(i) = p.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{} parameter {i}", self.name())));
        }
        match self {
            Layer::ActNorm(l) => {
                let n = l.bias.len();
                l.log_scale.copy_from_slice(&p[..n]);
                l.bias.copy_from_slice(&p[n..]);
            }
            Layer::InvertibleLinear(l) => {
                let n = l.dim();
                let mut it = p.iter().copied();
                for i in 0..n {
                    for j in 0..i {
                        l.lower.set(i, j, it.next().unwrap_or_default());
                    }
                }
                for i in 0..n {
                    for j in i + 1..n {
                        l.upper.set(i, j, it.next().unwrap_or_default());
                    }
                }
                for v in l.log_diag.iter_mut() {
                    *v = it.next().unwrap_or_default();
                }
            }
            Layer::AffineCoupling(l) => {
                let (a, rest) = p.split_at(l.w1.as_slice().len());
                let (b, rest) = rest.split_at(l.b1.len());
                let (c, d) = rest.split_at(l.w2.as_slice().len());
                l.w1 = Matrix::new(l.w1.rows(), l.w1.cols(), a.to_vec())?;
                l.b1.copy_from_slice(b);
                l.w2 = Matrix::new(l.w2.rows(), l.w2.cols(), c.to_vec())?;
                l.b2.copy_from_slice(d);
            }
        }
        Ok(())
    }
}
