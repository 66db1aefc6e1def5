//! Global descriptors: GeM pooling, PCA whitening, multiscale aggregation
//! and keyframe ranking by dot-product similarity.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::feature::{ByteReader, FeatureError, FeatureMap};

/// Regularizer added to covariance eigenvalues before inversion.
pub const WHITENING_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("non-finite activation in pooled map")]
    NonFiniteInput,
    #[error("invalid GeM exponent: {0}")]
    BadExponent(String),
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("need at least 2 descriptors to fit whitening, got {0}")]
    TooFewSamples(usize),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("no input maps")]
    EmptyInput,
    #[error("descriptor database is empty")]
    EmptyDatabase,
    #[error("bad magic, expected {0}")]
    BadMagic(&'static str),
    #[error(transparent)]
    File(#[from] FeatureError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Pooling exponents: one shared value or one per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct GemParams {
    p: Vec<f64>,
}

impl GemParams {
    pub fn shared(p: f64) -> Result<Self, RetrievalError> {
        Self::per_channel(vec![p])
    }

    pub fn per_channel(p: Vec<f64>) -> Result<Self, RetrievalError> {
        if p.is_empty() {
            return Err(RetrievalError::BadExponent("no exponents".into()));
        }
        if let Some(bad) = p.iter().find(|v| !(v.is_finite() && **v >= 1.0)) {
            return Err(RetrievalError::BadExponent(format!("{bad} (must be finite and >= 1)")));
        }
        Ok(Self { p })
    }

    fn exponent(&self, channel: usize) -> f64 {
        if self.p.len() == 1 {
            self.p[0]
        } else {
            self.p[channel]
        }
    }
}

impl Default for GemParams {
    fn default() -> Self {
        Self { p: vec![3.0] }
    }
}

/// Generalized-mean pooling of every channel. Negative activations are
/// clamped to zero first.
pub fn gem_pool(fmap: &FeatureMap, params: &GemParams) -> Result<Vec<f64>, RetrievalError> {
    let depth = fmap.depth();
    if params.p.len() != 1 && params.p.len() != depth {
        return Err(RetrievalError::DimensionMismatch { expected: depth, found: params.p.len() });
    }
    if fmap.data().iter().any(|v| !v.is_finite()) {
        return Err(RetrievalError::NonFiniteInput);
    }
    let n = (fmap.width() * fmap.height()) as f64;
    let mut max = vec![0.0f64; depth];
    for texel in fmap.data().chunks_exact(depth) {
        for (m, v) in max.iter_mut().zip(texel) {
            *m = m.max(*v as f64);
        }
    }
    // terms are summed in sorted order so the result is exactly independent
    // of texel order
    let mut terms = vec![Vec::with_capacity(fmap.width() * fmap.height()); depth];
    for texel in fmap.data().chunks_exact(depth) {
        for (k, v) in texel.iter().enumerate() {
            let x = (*v as f64).max(0.0);
            let p = params.exponent(k);
            terms[k].push(if p == 1.0 {
                x
            } else if max[k] > 0.0 {
                // scaled by the channel max so large exponents cannot overflow
                (x / max[k]).powf(p)
            } else {
                0.0
            });
        }
    }
    let acc: Vec<f64> = terms
        .iter_mut()
        .map(|t| {
            t.sort_by(f64::total_cmp);
            t.iter().sum()
        })
        .collect();
    Ok((0..depth)
        .map(|k| {
            let p = params.exponent(k);
            if p == 1.0 {
                acc[k] / n
            } else {
                max[k] * (acc[k] / n).powf(1.0 / p)
            }
        })
        .collect())
}

/// Unit-norm global image descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDescriptor {
    values: Vec<f32>,
}

impl GlobalDescriptor {
    /// Wraps already-normalized values (as read from disk).
    pub fn from_unit(values: Vec<f32>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn dot(&self, other: &GlobalDescriptor) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| *a as f64 * *b as f64).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.values.len());
        out.extend_from_slice(b"GDSC");
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(self.values.len() as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RetrievalError> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != b"GDSC" {
            return Err(RetrievalError::BadMagic("GDSC"));
        }
        let version = r.u32()?;
        if version != 1 {
            return Err(FeatureError::Parse(format!("unsupported descriptor version {version}")).into());
        }
        let k = r.u32()? as usize;
        let values = r.f32s(k)?;
        if r.pos != bytes.len() {
            return Err(FeatureError::Parse("trailing bytes after descriptor".into()).into());
        }
        Ok(Self { values })
    }
}

pub fn save_descriptor(desc: &GlobalDescriptor, path: impl AsRef<Path>) -> Result<(), RetrievalError> {
    fs::write(path, desc.to_bytes())?;
    Ok(())
}

pub fn load_descriptor(path: impl AsRef<Path>) -> Result<GlobalDescriptor, RetrievalError> {
    GlobalDescriptor::from_bytes(&fs::read(path)?)
}

/// Affine whitening `matrix * (x - mean)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningTransform {
    pub mean: DVector<f64>,
    pub matrix: DMatrix<f64>,
}

impl WhiteningTransform {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Result<DVector<f64>, RetrievalError> {
        if x.len() != self.dim() {
            return Err(RetrievalError::DimensionMismatch { expected: self.dim(), found: x.len() });
        }
        Ok(&self.matrix * (DVector::from_column_slice(x) - &self.mean))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let k = self.dim();
        let mut out = Vec::with_capacity(8 + 4 * (k + k * k));
        out.extend_from_slice(b"GWHT");
        out.extend_from_slice(&(k as u32).to_le_bytes());
        for v in self.mean.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        for i in 0..k {
            for j in 0..k {
                out.extend_from_slice(&(self.matrix[(i, j)] as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RetrievalError> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != b"GWHT" {
            return Err(RetrievalError::BadMagic("GWHT"));
        }
        let k = r.u32()? as usize;
        let mean = r.f32s(k)?;
        let matrix = r.f32s(k.checked_mul(k).ok_or(RetrievalError::EmptyInput)?)?;
        if r.pos != bytes.len() {
            return Err(FeatureError::Parse("trailing bytes after whitening".into()).into());
        }
        Ok(Self {
            mean: DVector::from_iterator(k, mean.into_iter().map(f64::from)),
            matrix: DMatrix::from_row_iterator(k, k, matrix.into_iter().map(f64::from)),
        })
    }
}

pub fn save_whitening(w: &WhiteningTransform, path: impl AsRef<Path>) -> Result<(), RetrievalError> {
    fs::write(path, w.to_bytes())?;
    Ok(())
}

pub fn load_whitening(path: impl AsRef<Path>) -> Result<WhiteningTransform, RetrievalError> {
    WhiteningTransform::from_bytes(&fs::read(path)?)
}

/// PCA whitening fitted on a descriptor set: centre, rotate onto the
/// covariance eigenbasis and scale by `(lambda + eps)^-1/2`.
pub fn fit_whitening(descs: &[Vec<f64>]) -> Result<WhiteningTransform, RetrievalError> {
    if descs.len() < 2 {
        return Err(RetrievalError::TooFewSamples(descs.len()));
    }
    let k = descs[0].len();
    if let Some(bad) = descs.iter().find(|d| d.len() != k) {
        return Err(RetrievalError::DimensionMismatch { expected: k, found: bad.len() });
    }
    let n = descs.len() as f64;
    let mut mean = DVector::zeros(k);
    for d in descs {
        mean += DVector::from_column_slice(d);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(k, k);
    for d in descs {
        let c = DVector::from_column_slice(d) - &mean;
        cov.syger(1.0 / n, &c, &c, 1.0);
    }
    let eig = SymmetricEigen::new(cov);
    let scale = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / (l.max(0.0) + WHITENING_EPS).sqrt()));
    Ok(WhiteningTransform { mean, matrix: scale * eig.eigenvectors.transpose() })
}

fn l2_normalize(v: &[f64]) -> Result<Vec<f64>, RetrievalError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(RetrievalError::ZeroVector);
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Optional whitening followed by L2 normalization.
pub fn finalize_descriptor(
    raw: &[f64],
    whitening: Option<&WhiteningTransform>,
) -> Result<GlobalDescriptor, RetrievalError> {
    let v = match whitening {
        Some(w) => w.apply(raw)?.as_slice().to_vec(),
        None => raw.to_vec(),
    };
    let unit = l2_normalize(&v)?;
    Ok(GlobalDescriptor { values: unit.into_iter().map(|x| x as f32).collect() })
}

/// Mean of the unit per-scale GeM vectors, before whitening and final normalization.
pub fn multiscale_raw(inputs: &[&FeatureMap], params: &GemParams) -> Result<Vec<f64>, RetrievalError> {
    let first = inputs.first().ok_or(RetrievalError::EmptyInput)?;
    let k = first.depth();
    let mut acc = vec![0.0; k];
    for m in inputs {
        if m.depth() != k {
            return Err(RetrievalError::DimensionMismatch { expected: k, found: m.depth() });
        }
        let unit = l2_normalize(&gem_pool(m, params)?)?;
        acc.iter_mut().zip(unit).for_each(|(a, u)| *a += u);
    }
    let n = inputs.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// Descriptor from feature maps computed at several image scales
/// (conventionally 1, 1/sqrt(2) and 1/2).
pub fn multiscale_descriptor(
    inputs: &[&FeatureMap],
    params: &GemParams,
    whitening: Option<&WhiteningTransform>,
) -> Result<GlobalDescriptor, RetrievalError> {
    finalize_descriptor(&multiscale_raw(inputs, params)?, whitening)
}

/// Database ids sorted by descending similarity, ties by ascending id.
pub fn rank_keyframes(
    query: &GlobalDescriptor,
    db: &BTreeMap<u64, GlobalDescriptor>,
) -> Result<Vec<(u64, f64)>, RetrievalError> {
    if db.is_empty() {
        return Err(RetrievalError::EmptyDatabase);
    }
    let mut ranking = db
        .iter()
        .map(|(&id, d)| {
            if d.dim() != query.dim() {
                return Err(RetrievalError::DimensionMismatch { expected: query.dim(), found: d.dim() });
            }
            Ok((id, query.dot(d)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    ranking.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    Ok(ranking)
}

pub fn top_k<T: Clone>(ranking: &[T], k: usize) -> Vec<T> {
    ranking[..k.min(ranking.len())].to_vec()
}
