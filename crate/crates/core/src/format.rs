//! Binary interchange formats. Every file is little-endian and ends with a
//! CRC-32 (IEEE) of all preceding bytes.
//!
//! * `FKEY`: magic, version `u16`, dim `u32`, `dim²` row-major `f64`.
//! * `FMOD`: magic, version `u16`, dim `u32`, layer count `u32`, then per
//!   layer a tag byte, an array count `u32`, and that many `(len u32, f64×len)`
//!   arrays.
//! * `FTNS`: magic, version `u16`, rank `u8`, dims `u32×rank`, `f64` payload,
//!   optional label block (`u32` count + `u32` labels).

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flow::{ActNorm, AffineCoupling, FlowModel, InvertibleLinear, Layer};
use crate::linalg::{Matrix, OrthogonalKey};

pub const KEY_MAGIC: &[u8; 4] = b"FKEY";
pub const MODEL_MAGIC: &[u8; 4] = b"FMOD";
pub const TENSOR_MAGIC: &[u8; 4] = b"FTNS";
pub const VERSION: u16 = 1;

const TAG_ACTNORM: u8 = 0;
const TAG_LINEAR: u8 = 1;
const TAG_COUPLING: u8 = 2;

struct Writer(Vec<u8>);

impl Writer {
    fn new(magic: &[u8; 4]) -> Self {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(magic);
        w.u16(VERSION);
        w
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn array(&mut self, vs: &[f64]) {
        self.u32(vs.len() as u32);
        self.f64s(vs);
    }
    fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.0);
        self.u32(crc);
        self.0
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    /// Checks length, CRC, magic, and version; returns a reader positioned
    /// after the header with the CRC trailer stripped.
    fn open(bytes: &'a [u8], magic: &[u8; 4], what: &'static str) -> Result<Self> {
        if bytes.len() < 10 {
            return Err(Error::Corrupt(format!("{what}: file too short")));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Corrupt(format!("{what}: CRC mismatch")));
        }
        if &body[..4] != magic {
            return Err(Error::Corrupt(format!("{what}: bad magic bytes")));
        }
        let mut r = Reader { buf: body, pos: 4, what };
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Corrupt(format!("{what}: unsupported version {version}")));
        }
        Ok(r)
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Corrupt(format!("{}: truncated", self.what)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.corrupt("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn array(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()? as usize;
        self.f64s(n)
    }
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
    fn corrupt(&self, msg: &str) -> Error {
        Error::Corrupt(format!("{}: {msg}", self.what))
    }
    fn done(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.corrupt("trailing bytes"));
        }
        Ok(())
    }
}

pub fn encode_key(key: &OrthogonalKey) -> Vec<u8> {
    let mut w = Writer::new(KEY_MAGIC);
    w.u32(key.dim() as u32);
    w.f64s(key.matrix().as_slice());
    w.finish()
}

/// Decodes a key file; the matrix must be orthogonal to within
/// [`crate::linalg::KEY_ORTHOGONALITY_TOL`].
pub fn decode_key(bytes: &[u8]) -> Result<OrthogonalKey> {
    let mut r = Reader::open(bytes, KEY_MAGIC, "key file")?;
    let dim = r.u32()? as usize;
    let data = r.f64s(dim * dim)?;
    r.done()?;
    let m = Matrix::new(dim, dim, data).map_err(|e| Error::Corrupt(format!("key file: {e}")))?;
    OrthogonalKey::from_matrix(m)
}

fn bools(v: &[bool]) -> Vec<f64> {
    v.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}

pub fn encode_model(model: &FlowModel) -> Vec<u8> {
    let mut w = Writer::new(MODEL_MAGIC);
    w.u32(model.dim() as u32);
    w.u32(model.layers().len() as u32);
    for layer in model.layers() {
        match layer {
            Layer::ActNorm(a) => {
                w.u8(TAG_ACTNORM);
                w.u32(3);
                w.array(&a.log_scale);
                w.array(&a.bias);
                w.array(&[if a.initialized { 1.0 } else { 0.0 }]);
            }
            Layer::InvertibleLinear(l) => {
                w.u8(TAG_LINEAR);
                w.u32(5);
                w.array(&l.perm.iter().map(|&p| p as f64).collect::<Vec<_>>());
                w.array(&l.sign);
                w.array(l.lower.as_slice());
                w.array(l.upper.as_slice());
                w.array(&l.log_diag);
            }
            Layer::AffineCoupling(c) => {
                w.u8(TAG_COUPLING);
                w.u32(6);
                w.array(&bools(&c.mask));
                w.array(&[c.hidden() as f64]);
                w.array(c.w1.as_slice());
                w.array(&c.b1);
                w.array(c.w2.as_slice());
                w.array(&c.b2);
            }
        }
    }
    w.finish()
}

fn expect_len(r: &Reader, v: &[f64], n: usize, name: &str) -> Result<()> {
    if v.len() != n {
        return Err(r.corrupt(&format!("{name} has {} entries, expected {n}", v.len())));
    }
    Ok(())
}

fn as_index(r: &Reader, v: f64, bound: usize) -> Result<usize> {
    if v.fract() != 0.0 || v < 0.0 || v >= bound as f64 {
        return Err(r.corrupt(&format!("bad index {v}")));
    }
    Ok(v as usize)
}

pub fn decode_model(bytes: &[u8]) -> Result<FlowModel> {
    let mut r = Reader::open(bytes, MODEL_MAGIC, "model file")?;
    let dim = r.u32()? as usize;
    let count = r.u32()? as usize;
    let mut model = FlowModel::new(dim).map_err(|e| r.corrupt(&e.to_string()))?;
    for _ in 0..count {
        let tag = r.u8()?;
        let arrays = r.u32()? as usize;
        let expected = match tag {
            TAG_ACTNORM => 3,
            TAG_LINEAR => 5,
            TAG_COUPLING => 6,
            t => return Err(r.corrupt(&format!("unknown layer tag {t}"))),
        };
        if arrays != expected {
            return Err(r.corrupt(&format!("layer tag {tag} with {arrays} arrays")));
        }
        let a: Vec<Vec<f64>> = (0..arrays).map(|_| r.array()).collect::<Result<_>>()?;
        let layer = match tag {
            TAG_ACTNORM => {
                expect_len(&r, &a[0], dim, "actnorm log_scale")?;
                expect_len(&r, &a[1], dim, "actnorm bias")?;
                expect_len(&r, &a[2], 1, "actnorm flag")?;
                Layer::ActNorm(ActNorm {
                    log_scale: a[0].clone(),
                    bias: a[1].clone(),
                    initialized: a[2][0] != 0.0,
                })
            }
            TAG_LINEAR => {
                expect_len(&r, &a[0], dim, "linear perm")?;
                let perm = a[0].iter().map(|&p| as_index(&r, p, dim)).collect::<Result<Vec<_>>>()?;
                let mut seen = vec![false; dim];
                for &p in &perm {
                    if std::mem::replace(&mut seen[p], true) {
                        return Err(r.corrupt("linear perm is not a permutation"));
                    }
                }
                let lower = Matrix::new(dim, dim, a[2].clone()).map_err(|e| r.corrupt(&e.to_string()))?;
                let upper = Matrix::new(dim, dim, a[3].clone()).map_err(|e| r.corrupt(&e.to_string()))?;
                expect_len(&r, &a[1], dim, "linear sign")?;
                expect_len(&r, &a[4], dim, "linear log_diag")?;
                Layer::InvertibleLinear(InvertibleLinear {
                    perm,
                    sign: a[1].clone(),
                    lower,
                    upper,
                    log_diag: a[4].clone(),
                })
            }
            _ => {
                expect_len(&r, &a[0], dim, "coupling mask")?;
                expect_len(&r, &a[1], 1, "coupling hidden")?;
                let mask: Vec<bool> = a[0].iter().map(|&v| v != 0.0).collect();
                let hidden = as_index(&r, a[1][0], usize::MAX)?;
                let k = mask.iter().filter(|&&m| m).count();
                let nt = dim - k;
                let w1 = Matrix::new(hidden, k, a[2].clone()).map_err(|e| r.corrupt(&e.to_string()))?;
                let w2 = Matrix::new(2 * nt, hidden, a[4].clone()).map_err(|e| r.corrupt(&e.to_string()))?;
                Layer::AffineCoupling(
                    AffineCoupling::new(mask, w1, a[3].clone(), w2, a[5].clone())
                        .map_err(|e| r.corrupt(&e.to_string()))?,
                )
            }
        };
        if layer.params().iter().any(|v| !v.is_finite()) {
            return Err(r.corrupt("non-finite parameter"));
        }
        model.push(layer).map_err(|e| r.corrupt(&e.to_string()))?;
    }
    r.done()?;
    Ok(model)
}

/// Samples (rows) with optional integer class labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<Vec<f64>>,
    pub labels: Option<Vec<u32>>,
}

impl Dataset {
    pub fn new(samples: Vec<Vec<f64>>, labels: Option<Vec<u32>>) -> Result<Self> {
        if let Some(first) = samples.first() {
            if let Some(i) = samples.iter().position(|s| s.len() != first.len()) {
                return Err(Error::ShapeMismatch(format!(
                    "sample {i} has dim {}, expected {}",
                    samples[i].len(),
                    first.len()
                )));
            }
        }
        if let Some(l) = &labels {
            if l.len() != samples.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} labels for {} samples",
                    l.len(),
                    samples.len()
                )));
            }
        }
        Ok(Self { samples, labels })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }
}

/// Writes a rank-2 `(n, dim)` tensor.
pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let mut w = Writer::new(TENSOR_MAGIC);
    w.u8(2);
    w.u32(ds.len() as u32);
    w.u32(ds.dim() as u32);
    for s in &ds.samples {
        w.f64s(s);
    }
    if let Some(labels) = &ds.labels {
        w.u32(labels.len() as u32);
        for &l in labels {
            w.u32(l);
        }
    }
    w.finish()
}

/// Reads a tensor of rank ≥ 2; trailing axes are flattened into samples.
pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::open(bytes, TENSOR_MAGIC, "tensor file")?;
    let rank = r.u8()? as usize;
    if rank < 2 {
        return Err(r.corrupt(&format!("dataset tensors need rank >= 2, got {rank}")));
    }
    let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
    let n = dims[0];
    let m: usize = dims[1..].iter().product();
    let flat = r.f64s(n * m)?;
    let labels = if r.remaining() > 0 {
        let count = r.u32()? as usize;
        if count != n {
            return Err(r.corrupt(&format!("{count} labels for {n} samples")));
        }
        Some((0..count).map(|_| r.u32()).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    r.done()?;
    let samples = if m == 0 {
        vec![Vec::new(); n]
    } else {
        flat.chunks_exact(m).map(<[f64]>::to_vec).collect()
    };
    Dataset::new(samples, labels)
}

/// Parses CSV with one sample per row. With `labeled`, the last column is
/// an integer class label.
pub fn parse_csv(text: &str, labeled: bool) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let mut fields: Vec<&str> = rec.iter().collect();
        if labeled {
            let raw = fields
                .pop()
                .ok_or_else(|| Error::InvalidArgument(format!("csv row {i} is empty")))?;
            labels.push(raw.parse::<u32>().map_err(|_| {
                Error::InvalidArgument(format!("csv row {i}: label {raw:?} is not an integer"))
            })?);
        }
        let row = fields
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::InvalidArgument(format!("csv row {i}: {f:?} is not a number")))
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(row);
    }
    Dataset::new(samples, labeled.then_some(labels))
}

pub fn to_csv(ds: &Dataset) -> String {
    let mut out = String::new();
    for (i, s) in ds.samples.iter().enumerate() {
        let mut fields: Vec<String> = s.iter().map(|v| format!("{v:?}")).collect();
        if let Some(l) = &ds.labels {
            fields.push(l[i].to_string());
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn write_key(path: &Path, key: &OrthogonalKey) -> Result<()> {
    Ok(fs::write(path, encode_key(key))?)
}

pub fn read_key(path: &Path) -> Result<OrthogonalKey> {
    decode_key(&fs::read(path)?)
}

pub fn write_model(path: &Path, model: &FlowModel) -> Result<()> {
    Ok(fs::write(path, encode_model(model))?)
}

pub fn read_model(path: &Path) -> Result<FlowModel> {
    decode_model(&fs::read(path)?)
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    Ok(fs::write(path, encode_dataset(ds))?)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

/// SHA-256 over the encoded model followed by the encoded key, hex.
pub fn fingerprint(model: &FlowModel, key: &OrthogonalKey) -> String {
    let mut h = Sha256::new();
    h.update(encode_model(model));
    h.update(encode_key(key));
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowArch;
    use crate::rng::seeded;
    use proptest::prelude::*;

    #[test]
    fn key_round_trip_and_layout() {
        let key = OrthogonalKey::generate(3, 5).unwrap();
        let bytes = encode_key(&key);
        assert_eq!(&bytes[..4], &[0x46, 0x4B, 0x45, 0x59]);
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 4 + 2 + 4 + 9 * 8 + 4);
        let back = decode_key(&bytes).unwrap();
        assert_eq!(back.matrix(), key.matrix());
        assert_eq!(encode_key(&back), bytes);
    }

    #[test]
    fn flipped_byte_is_crc_error() {
        let key = OrthogonalKey::generate(2, 5).unwrap();
        let mut bytes = encode_key(&key);
        bytes[14] ^= 0x40;
        let err = decode_key(&bytes).unwrap_err();
        assert!(matches!(err, Error::Corrupt(ref m) if m.contains("CRC")), "{err}");
    }

    #[test]
    fn non_orthogonal_key_file_fails_validation() {
        let mut w = Writer::new(KEY_MAGIC);
        w.u32(2);
        w.f64s(&[1.0, 0.5, 0.0, 1.0]);
        let bytes = w.finish();
        assert!(matches!(decode_key(&bytes), Err(Error::Validation(_))));
    }

    #[test]
    fn model_round_trip_is_byte_exact() {
        let mut rng = seeded(8);
        let m = FlowModel::randomized(5, FlowArch { blocks: 2, hidden: 7 }, &mut rng).unwrap();
        let bytes = encode_model(&m);
        let back = decode_model(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_model(&back), bytes);
        let mut bad = bytes.clone();
        bad[20] ^= 1;
        assert!(matches!(decode_model(&bad), Err(Error::Corrupt(_))));
        assert!(matches!(decode_model(&bytes[..bytes.len() - 1]), Err(Error::Corrupt(_))));
    }

    #[test]
    fn dataset_with_and_without_labels() {
        let ds = Dataset::new(vec![vec![1.0, 2.0], vec![3.0, 4.5]], Some(vec![0, 7])).unwrap();
        assert_eq!(decode_dataset(&encode_dataset(&ds)).unwrap(), ds);
        let plain = Dataset::new(ds.samples.clone(), None).unwrap();
        assert_eq!(decode_dataset(&encode_dataset(&plain)).unwrap(), plain);
        assert!(Dataset::new(vec![vec![1.0]], Some(vec![])).is_err());
    }

    #[test]
    fn higher_rank_tensor_flattens() {
        let mut w = Writer::new(TENSOR_MAGIC);
        w.u8(3);
        for d in [2, 2, 2] {
            w.u32(d);
        }
        w.f64s(&(0..8).map(f64::from).collect::<Vec<_>>());
        let ds = decode_dataset(&w.finish()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.samples[1], vec![4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn csv_import() {
        let ds = parse_csv("0.5, 1.0, 2\n-1,3e-1,0\n", true).unwrap();
        assert_eq!(ds.samples, vec![vec![0.5, 1.0], vec![-1.0, 0.3]]);
        assert_eq!(ds.labels, Some(vec![2, 0]));
        let ds = parse_csv("1,2\n3,4\n", false).unwrap();
        assert_eq!(ds.labels, None);
        assert!(parse_csv("1,x\n", false).is_err());
        assert!(parse_csv("1,2.5\n", true).is_err());
        let again = parse_csv(&to_csv(&ds), false).unwrap();
        assert_eq!(again, ds);
    }

    #[test]
    fn fingerprint_depends_on_both_files() {
        let mut rng = seeded(1);
        let m = FlowModel::randomized(2, FlowArch { blocks: 1, hidden: 3 }, &mut rng).unwrap();
        let k1 = OrthogonalKey::generate(2, 1).unwrap();
        let k2 = OrthogonalKey::generate(2, 2).unwrap();
        assert_eq!(fingerprint(&m, &k1), fingerprint(&m, &k1));
        assert_ne!(fingerprint(&m, &k1), fingerprint(&m, &k2));
        assert_eq!(fingerprint(&m, &k1).len(), 64);
    }

    proptest! {
        #[test]
        fn dataset_bytes_round_trip(
            rows in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 3), 0..20),
            labeled in any::<bool>(),
        ) {
            let labels = labeled.then(|| (0..rows.len() as u32).collect());
            let ds = Dataset::new(rows, labels).unwrap();
            let bytes = encode_dataset(&ds);
            let back = decode_dataset(&bytes).unwrap();
            prop_assert_eq!(encode_dataset(&back), bytes);
        }
    }
}
