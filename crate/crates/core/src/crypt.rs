//! Feature-space encryption: `Enc(s) = f⁻¹(A·f(s))`, per-class contexts, and
//! the dual-key labeling protocol.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::format::{self, Dataset};
use crate::linalg::OrthogonalKey;
use crate::rng::derive_seed;
use crate::train::{train_flow, TrainConfig};

/// Round-trip tolerance (max-norm) for encrypt then decrypt.
pub const ROUND_TRIP_TOL: f64 = 1e-5;

/// Classes with fewer samples than this are refused a flow of their own.
pub const MIN_CLASS_SAMPLES: usize = 50;

/// A trained flow paired with a secret key of the same dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EncryptionContext {
    flow: FlowModel,
    key: OrthogonalKey,
}

impl EncryptionContext {
    pub fn new(flow: FlowModel, key: OrthogonalKey) -> Result<Self> {
        if flow.dim() != key.dim() {
            return Err(Error::ShapeMismatch(format!(
                "flow of dim {} with key of dim {}",
                flow.dim(),
                key.dim()
            )));
        }
        Ok(Self { flow, key })
    }

    pub fn flow(&self) -> &FlowModel {
        &self.flow
    }

    pub fn key(&self) -> &OrthogonalKey {
        &self.key
    }

    pub fn dim(&self) -> usize {
        self.flow.dim()
    }

    /// SHA-256 of the encoded model and key files.
    pub fn fingerprint(&self) -> String {
        format::fingerprint(&self.flow, &self.key)
    }

    pub fn encrypt_sample(&self, s: &[f64]) -> Result<Vec<f64>> {
        let z = self.flow.forward(s)?;
        self.flow.inverse(&self.key.apply(&z.values)?)
    }

    /// `f⁻¹(Aᵀ·f(e))`. With the wrong key this returns garbage, not an error.
    pub fn decrypt_sample(&self, e: &[f64]) -> Result<Vec<f64>> {
        let z = self.flow.forward(e)?;
        self.flow.inverse(&self.key.apply_inverse(&z.values)?)
    }

    pub fn encrypt_all(&self, data: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        data.iter().map(|s| self.encrypt_sample(s)).collect()
    }

    pub fn decrypt_all(&self, data: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        data.iter().map(|s| self.decrypt_sample(s)).collect()
    }
}

/// Samples after encryption, with labels carried through and the
/// fingerprint of the context(s) that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct EncryptedDataset {
    pub samples: Vec<Vec<f64>>,
    pub labels: Option<Vec<u32>>,
    pub provenance: String,
}

impl EncryptedDataset {
    pub fn into_dataset(self) -> Result<Dataset> {
        Dataset::new(self.samples, self.labels)
    }
}

/// One encryption context per class label.
#[derive(Debug, Clone, Default)]
pub struct ClasswiseContext {
    contexts: BTreeMap<u32, EncryptionContext>,
}

impl ClasswiseContext {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, label: u32, ctx: EncryptionContext) -> Result<()> {
        if let Some(dim) = self.dim() {
            if ctx.dim() != dim {
                return Err(Error::ShapeMismatch(format!(
                    "class {label} context has dim {}, others have {dim}",
                    ctx.dim()
                )));
            }
        }
        self.contexts.insert(label, ctx);
        Ok(())
    }

    pub fn get(&self, label: u32) -> Result<&EncryptionContext> {
        self.contexts.get(&label).ok_or(Error::UnknownLabel(label))
    }

    pub fn labels(&self) -> impl Iterator<Item = u32> + '_ {
        self.contexts.keys().copied()
    }

    pub fn dim(&self) -> Option<usize> {
        self.contexts.values().next().map(EncryptionContext::dim)
    }

    /// Trains one flow per class and draws an independent key for each, with
    /// seeds derived from `config.seed` and the class label.
    pub fn train(data: &[Vec<f64>], labels: &[u32], config: &TrainConfig) -> Result<Self> {
        if data.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} samples",
                labels.len(),
                data.len()
            )));
        }
        let mut by_class: BTreeMap<u32, Vec<Vec<f64>>> = BTreeMap::new();
        for (x, &y) in data.iter().zip(labels) {
            by_class.entry(y).or_default().push(x.clone());
        }
        let mut out = Self::new();
        for (label, samples) in by_class {
            if samples.len() < MIN_CLASS_SAMPLES {
                return Err(Error::DegenerateData(format!(
                    "class {label} has {} samples; at least {MIN_CLASS_SAMPLES} are needed",
                    samples.len()
                )));
            }
            let cfg = TrainConfig {
                seed: derive_seed(config.seed, 2 * u64::from(label)),
                ..config.clone()
            };
            let flow = train_flow(&samples, &cfg)?.model;
            let key = OrthogonalKey::generate(
                flow.dim(),
                derive_seed(config.seed, 2 * u64::from(label) + 1),
            )?;
            out.insert(label, EncryptionContext::new(flow, key)?)?;
        }
        Ok(out)
    }

    fn provenance(&self) -> String {
        self.contexts
            .iter()
            .map(|(l, c)| format!("{l}:{}", c.fingerprint()))
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Encrypts each sample with the context of its own class.
pub fn encrypt_dataset(ctx: &ClasswiseContext, data: &[Vec<f64>], labels: &[u32]) -> Result<EncryptedDataset> {
    transform_dataset(ctx, data, labels, EncryptionContext::encrypt_sample)
}

pub fn decrypt_dataset(ctx: &ClasswiseContext, data: &[Vec<f64>], labels: &[u32]) -> Result<EncryptedDataset> {
    transform_dataset(ctx, data, labels, EncryptionContext::decrypt_sample)
}

fn transform_dataset(
    ctx: &ClasswiseContext,
    data: &[Vec<f64>],
    labels: &[u32],
    op: fn(&EncryptionContext, &[f64]) -> Result<Vec<f64>>,
) -> Result<EncryptedDataset> {
    if data.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} samples",
            labels.len(),
            data.len()
        )));
    }
    let samples = data
        .iter()
        .zip(labels)
        .map(|(s, &y)| op(ctx.get(y)?, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(EncryptedDataset {
        samples,
        labels: Some(labels.to_vec()),
        provenance: ctx.provenance(),
    })
}

/// Secret labeling function used by [`DualKeyContext`].
pub type Labeler = Box<dyn Fn(&[f64]) -> std::result::Result<u32, String> + Send + Sync>;

/// One flow and two independent keys: data are released under the first
/// key, labels are computed on the encryption under the second.
pub struct DualKeyContext {
    flow: FlowModel,
    key1: OrthogonalKey,
    key2: OrthogonalKey,
    labeler: Labeler,
}

impl std::fmt::Debug for DualKeyContext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DualKeyContext")
            .field("dim", &self.flow.dim())
            .field("key1_seed", &self.key1.seed())
            .field("key2_seed", &self.key2.seed())
            .finish_non_exhaustive()
    }
}

impl DualKeyContext {
    pub fn with_keys(flow: FlowModel, key1: OrthogonalKey, key2: OrthogonalKey, labeler: Labeler) -> Result<Self> {
        for k in [&key1, &key2] {
            if k.dim() != flow.dim() {
                return Err(Error::ShapeMismatch(format!(
                    "flow of dim {} with key of dim {}",
                    flow.dim(),
                    k.dim()
                )));
            }
        }
        if let (Some(a), Some(b)) = (key1.seed(), key2.seed()) {
            if a == b {
                return Err(Error::InvalidArgument("the two keys must come from different seeds".into()));
            }
        }
        Ok(Self {
            flow,
            key1,
            key2,
            labeler,
        })
    }

    /// Draws both keys from independent streams derived from `seed`.
    pub fn generate(flow: FlowModel, seed: u64, labeler: Labeler) -> Result<Self> {
        let dim = flow.dim();
        let key1 = OrthogonalKey::generate(dim, derive_seed(seed, 0))?;
        let key2 = OrthogonalKey::generate(dim, derive_seed(seed, 1))?;
        Self::with_keys(flow, key1, key2, labeler)
    }

    pub fn key1(&self) -> &OrthogonalKey {
        &self.key1
    }

    pub fn key2(&self) -> &OrthogonalKey {
        &self.key2
    }

    /// Emits `(Enc₁(s), g(Enc₂(s)))` for every sample.
    pub fn label(&self, data: &[Vec<f64>]) -> Result<EncryptedDataset> {
        let enc1 = EncryptionContext::new(self.flow.clone(), self.key1.clone())?;
        let enc2 = EncryptionContext::new(self.flow.clone(), self.key2.clone())?;
        let mut samples = Vec::with_capacity(data.len());
        let mut labels = Vec::with_capacity(data.len());
        for (index, s) in data.iter().enumerate() {
            samples.push(enc1.encrypt_sample(s)?);
            let hidden = enc2.encrypt_sample(s)?;
            labels.push((self.labeler)(&hidden).map_err(|reason| Error::Labeler { index, reason })?);
        }
        Ok(EncryptedDataset {
            samples,
            labels: Some(labels),
            provenance: enc1.fingerprint(),
        })
    }
}

/// Convenience wrapper for [`DualKeyContext::label`].
pub fn dual_key_label(ctx: &DualKeyContext, data: &[Vec<f64>]) -> Result<EncryptedDataset> {
    ctx.label(data)
}

pub fn save_context(ctx: &EncryptionContext, model_path: &Path, key_path: &Path) -> Result<()> {
    format::write_model(model_path, &ctx.flow)?;
    format::write_key(key_path, &ctx.key)
}

pub fn load_context(model_path: &Path, key_path: &Path) -> Result<EncryptionContext> {
    let flow = format::read_model(model_path)?;
    let key = format::read_key(key_path)?;
    EncryptionContext::new(flow, key)
}

/// A fresh key for `dim`, for callers that want a context around an
/// existing flow.
pub fn context_with_fresh_key(flow: FlowModel, seed: u64) -> Result<EncryptionContext> {
    let key = OrthogonalKey::generate(flow.dim(), seed)?;
    EncryptionContext::new(flow, key)
}
