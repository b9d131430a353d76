//! Normalized-temperature cross-entropy over paired embeddings.

use candle_core::{DType, Device, Tensor, D};

use crate::error::{Error, Result};

/// Cosine of the angle between two non-zero vectors.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::InvalidEmbedding(format!("length {} vs {}", u.len(), v.len())));
    }
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::InvalidEmbedding("zero vector".into()));
    }
    if !(nu.is_finite() && nv.is_finite()) {
        return Err(Error::NonFinite("embedding".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// `2N` projected embeddings with the `N` positive pairs among them.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    projections: Vec<Vec<f64>>,
    pairs: Vec<(usize, usize)>,
    temperature: f64,
}

impl ContrastiveBatch {
    /// Validates that `pairs` partitions the row indices, that rows are
    /// finite, non-zero and of equal width, and that the temperature is
    /// positive.
    pub fn new(projections: Vec<Vec<f64>>, pairs: Vec<(usize, usize)>, temperature: f64) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidBatch("no positive pairs".into()));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidBatch(format!("temperature {temperature} must be positive")));
        }
        let rows = projections.len();
        if rows != 2 * pairs.len() {
            return Err(Error::InvalidBatch(format!("{rows} rows for {} pairs", pairs.len())));
        }
        let mut seen = vec![false; rows];
        for &(i, j) in &pairs {
            for k in [i, j] {
                if k >= rows || seen[k] {
                    return Err(Error::InvalidBatch(format!("index {k} out of range or repeated")));
                }
                seen[k] = true;
            }
        }
        let dim = projections[0].len();
        for (r, z) in projections.iter().enumerate() {
            if z.len() != dim || dim == 0 {
                return Err(Error::InvalidBatch(format!("row {r} has width {}", z.len())));
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("projection row {r}")));
            }
            if z.iter().all(|&v| v == 0.0) {
                return Err(Error::InvalidEmbedding(format!("row {r} is the zero vector")));
            }
        }
        Ok(Self { projections, pairs, temperature })
    }

    pub fn projections(&self) -> &[Vec<f64>] {
        &self.projections
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let dim = self.projections[0].len();
        let flat: Vec<f64> = self.projections.iter().flatten().copied().collect();
        Ok(Tensor::from_vec(flat, (self.projections.len(), dim), device)?)
    }
}

/// Partner index for every row, from the pair list.
pub fn partners(pairs: &[(usize, usize)]) -> Vec<usize> {
    let mut out = vec![0; 2 * pairs.len()];
    for &(i, j) in pairs {
        out[i] = j;
        out[j] = i;
    }
    out
}

/// Differentiable loss over rows of `z: (2N, D)`; `partner[i]` is the
/// positive for row `i`. Every other row is a negative. Returns a scalar:
/// the mean of the per-row losses over all `2N` directed pairs.
pub fn nt_xent_tensor(z: &Tensor, partner: &[usize], temperature: f64) -> candle_core::Result<Tensor> {
    let (rows, _) = z.dims2()?;
    if rows != partner.len() || rows < 2 {
        candle_core::bail!("nt_xent: {rows} rows for {} partners", partner.len());
    }
    let device = z.device();
    let dtype = z.dtype();
    let norms = z.sqr()?.sum_keepdim(1)?.sqrt()?.maximum(1e-12)?;
    let zn = z.broadcast_div(&norms)?;
    let sim = (zn.matmul(&zn.t()?)? / temperature)?;

    let mut self_mask = vec![0f64; rows * rows];
    let mut positive = vec![0f64; rows * rows];
    for i in 0..rows {
        self_mask[i * rows + i] = -1e9;
        positive[i * rows + partner[i]] = 1.0;
    }
    let self_mask = Tensor::from_vec(self_mask, (rows, rows), device)?.to_dtype(dtype)?;
    let positive = Tensor::from_vec(positive, (rows, rows), device)?.to_dtype(dtype)?;

    let logits = (&sim + self_mask)?;
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let lse = (logits.broadcast_sub(&max)?.exp()?.sum_keepdim(D::Minus1)?.log()? + max)?.squeeze(1)?;
    let pos = (sim * positive)?.sum(D::Minus1)?;
    (lse - pos)?.mean_all()
}

/// Scalar loss of a validated batch, evaluated in double precision.
pub fn nt_xent(batch: &ContrastiveBatch) -> Result<f64> {
    let z = batch.to_tensor(&Device::Cpu)?;
    let loss = nt_xent_tensor(&z, &partners(batch.pairs()), batch.temperature())?;
    Ok(loss.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
