//! Two-covariance Gaussian PLDA fitted by the method of moments.
//!
//! Embeddings are centered on the training mean and length-normalized. The
//! speaker variable is drawn from N(mu, B) and each embedding adds residual
//! noise from N(0, W). Scores are the log-likelihood ratio of the pair under
//! the same-speaker and different-speaker hypotheses.

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::fsutil::write_atomic;
use crate::{Error, Result};

/// Diagonal ridge added to both covariances.
pub const PLDA_RIDGE: f64 = 1e-6;
const MAGIC: &[u8; 7] = b"AMPLDA1";

#[derive(Debug, Clone)]
pub struct PldaModel {
    /// Mean subtracted before length normalization.
    pub center: DVector<f64>,
    /// Mean of the normalized training embeddings.
    pub mu: DVector<f64>,
    pub between: DMatrix<f64>,
    pub within: DMatrix<f64>,
    q: DMatrix<f64>,
    p: DMatrix<f64>,
    offset: f64,
}

fn log_det_chol(m: &DMatrix<f64>, what: &str) -> Result<(f64, DMatrix<f64>)> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical(format!("{what} is not positive definite")))?;
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok((log_det, chol.inverse()))
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

impl PldaModel {
    /// Builds a model from its moments and precomputes the scoring terms.
    pub fn from_moments(
        center: DVector<f64>,
        mu: DVector<f64>,
        between: DMatrix<f64>,
        within: DMatrix<f64>,
    ) -> Result<Self> {
        let d = center.len();
        if mu.len() != d || between.shape() != (d, d) || within.shape() != (d, d) {
            return Err(Error::shape("PLDA moments disagree on dimension"));
        }
        let total = &between + &within;
        let (log_det_total, total_inv) = log_det_chol(&total, "B + W")?;
        let schur = symmetrize(&(&total - &between * &total_inv * &between));
        let (log_det_schur, m) = log_det_chol(&schur, "Schur complement of the pair covariance")?;
        let q = symmetrize(&(&total_inv - &m));
        let p = symmetrize(&(&total_inv * &between * &m));
        Ok(Self {
            center,
            mu,
            between,
            within,
            q,
            p,
            offset: 0.5 * (log_det_total - log_det_schur),
        })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    fn prepare(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.dim() {
            return Err(Error::shape(format!("PLDA expects dimension {}, got {}", self.dim(), x.len())));
        }
        let v = normalize(DVector::from_column_slice(x) - &self.center);
        Ok(v - &self.mu)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let d = self.dim();
        let mut bytes = Vec::with_capacity(11 + 8 * (2 * d + 2 * d * d));
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
        for v in self
            .center
            .iter()
            .chain(self.mu.iter())
            .chain(self.between.iter())
            .chain(self.within.iter())
        {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.len() < 11 || &bytes[..7] != MAGIC {
            return Err(Error::Format(format!("{} is not a PLDA model", path.display())));
        }
        let d = u32::from_le_bytes(bytes[7..11].try_into().unwrap()) as usize;
        let body = &bytes[11..];
        if body.len() != 8 * (2 * d + 2 * d * d) {
            return Err(Error::Format(format!("{}: truncated PLDA model", path.display())));
        }
        let vals: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (center, rest) = vals.split_at(d);
        let (mu, rest) = rest.split_at(d);
        let (between, within) = rest.split_at(d * d);
        Self::from_moments(
            DVector::from_column_slice(center),
            DVector::from_column_slice(mu),
            DMatrix::from_column_slice(d, d, between),
            DMatrix::from_column_slice(d, d, within),
        )
    }
}

fn normalize(v: DVector<f64>) -> DVector<f64> {
    let n = v.norm();
    if n > 0.0 {
        v / n
    } else {
        v
    }
}

/// Fits the model to `(speaker, embedding)` pairs.
pub fn plda_train<S: Ord + Clone + std::fmt::Debug>(data: &[(S, Vec<f64>)]) -> Result<PldaModel> {
    let d = data.first().map(|x| x.1.len()).unwrap_or(0);
    if d == 0 || data.iter().any(|x| x.1.len() != d) {
        return Err(Error::shape("PLDA training embeddings must share a nonzero dimension"));
    }
    let n = data.len() as f64;
    let center = data
        .iter()
        .fold(DVector::zeros(d), |acc, x| acc + DVector::from_column_slice(&x.1))
        / n;
    let mut by_speaker: BTreeMap<S, Vec<DVector<f64>>> = BTreeMap::new();
    for (s, x) in data {
        let v = normalize(DVector::from_column_slice(x) - &center);
        by_speaker.entry(s.clone()).or_default().push(v);
    }
    if by_speaker.len() < 2 {
        return Err(Error::InsufficientData("PLDA needs at least 2 speakers".into()));
    }
    let mu = by_speaker
        .values()
        .flatten()
        .fold(DVector::zeros(d), |acc, v| acc + v)
        / n;
    let mut between = DMatrix::zeros(d, d);
    let mut within = DMatrix::zeros(d, d);
    let mut n_within = 0usize;
    for (s, vs) in &by_speaker {
        let mean = vs.iter().fold(DVector::zeros(d), |acc, v| acc + v) / vs.len() as f64;
        let dm = &mean - &mu;
        between += &dm * dm.transpose();
        if vs.len() < 2 {
            warn!("speaker {s:?} has one embedding; it only informs the between-class covariance");
            continue;
        }
        for v in vs {
            let dv = v - &mean;
            within += &dv * dv.transpose();
        }
        n_within += vs.len();
    }
    between /= by_speaker.len() as f64;
    if n_within > 0 {
        within /= n_within as f64;
    }
    let ridge = DMatrix::identity(d, d) * PLDA_RIDGE;
    PldaModel::from_moments(center, mu, symmetrize(&between) + &ridge, symmetrize(&within) + ridge)
}

/// Same-speaker versus different-speaker log-likelihood ratio.
pub fn plda_score(model: &PldaModel, a: &[f64], b: &[f64]) -> Result<f64> {
    let a = model.prepare(a)?;
    let b = model.prepare(b)?;
    let qa = (&model.q * &a).dot(&a);
    let qb = (&model.q * &b).dot(&b);
    let pab = (&model.p * &b).dot(&a);
    let s = 0.5 * (qa + qb) + pab + model.offset;
    if !s.is_finite() {
        return Err(Error::Numerical("non-finite PLDA score".into()));
    }
    Ok(s)
}
