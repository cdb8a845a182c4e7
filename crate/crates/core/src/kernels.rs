//! RBF kernels, median-heuristic bandwidths, Gram matrices and the
//! compositional deep kernel `k(f(x), f(y))`.

use crate::diffcore::{sq_dist, Matrix};
use crate::error::{param_err, shape_err, Result};
use crate::models::{SeqDecoder, SeqEncoder};

/// Gaussian kernel `exp(-||x - y||² / (2 σ²))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RbfKernel {
    sigma2: f64,
}

impl RbfKernel {
    pub fn new(sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0) || !sigma2.is_finite() {
            return param_err(format!("squared bandwidth must be positive and finite, got {sigma2}"));
        }
        Ok(Self { sigma2 })
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    #[inline]
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        (-0.5 * sq_dist(x, y) / self.sigma2).exp()
    }

    /// Kernel value from a precomputed squared distance.
    #[inline]
    pub fn from_sq_dist(&self, d2: f64) -> f64 {
        (-0.5 * d2 / self.sigma2).exp()
    }
}

/// `exp(-||x - y||² / (2 sigma2))` with argument checks.
pub fn rbf_eval(x: &[f64], y: &[f64], sigma2: f64) -> Result<f64> {
    if x.len() != y.len() {
        return shape_err(format!("rbf_eval on vectors of length {} and {}", x.len(), y.len()));
    }
    Ok(RbfKernel::new(sigma2)?.eval(x, y))
}

/// Squared bandwidth from the median pairwise squared distance.
///
/// Returns half the median squared distance over distinct unordered pairs
/// of rows. A zero median falls back to half the smallest positive squared
/// distance, and to 1.0 when all rows coincide.
pub fn median_heuristic(samples: &Matrix) -> Result<f64> {
    let n = samples.rows();
    if n < 2 {
        return param_err(format!("median heuristic needs at least 2 samples, got {n}"));
    }
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(sq_dist(samples.row(i), samples.row(j)));
        }
    }
    let med = median_in_place(&mut d);
    if med > 0.0 {
        return Ok(med / 2.0);
    }
    let min_pos = d.iter().copied().filter(|&v| v > 0.0).fold(f64::INFINITY, f64::min);
    Ok(if min_pos.is_finite() { min_pos / 2.0 } else { 1.0 })
}

/// Median of a non-empty slice (mean of the two middle values for even
/// lengths). Reorders the slice.
pub(crate) fn median_in_place(v: &mut [f64]) -> f64 {
    let n = v.len();
    let mid = n / 2;
    let (_, upper, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// `G[i][j] = k(x_i, y_j)` over the rows of `x` and `y`.
pub fn gram(x: &Matrix, y: &Matrix, k: &RbfKernel) -> Result<Matrix> {
    if x.cols() != y.cols() {
        return shape_err(format!("gram over {}-dim and {}-dim samples", x.cols(), y.cols()));
    }
    let mut g = Matrix::zeros(x.rows(), y.rows());
    for i in 0..x.rows() {
        let xi = x.row(i);
        for j in 0..y.rows() {
            g.set(i, j, k.eval(xi, y.row(j)));
        }
    }
    Ok(g)
}

/// How the RBF bandwidth of a deep kernel is chosen.
#[derive(Clone, Debug, PartialEq)]
pub enum Bandwidth {
    Fixed(RbfKernel),
    /// Median heuristic over the pooled encodings of the two windows being
    /// compared.
    MedianHeuristic,
}

impl Bandwidth {
    pub fn resolve(&self, pooled: &Matrix) -> Result<RbfKernel> {
        match self {
            Bandwidth::Fixed(k) => Ok(*k),
            Bandwidth::MedianHeuristic => RbfKernel::new(median_heuristic(pooled)?),
        }
    }
}

/// Feature map applied to each window before the RBF kernel.
#[derive(Clone, Debug, PartialEq)]
pub enum Embedding {
    Identity,
    /// GRU encoder `f_φ` with its reconstruction decoder `F_ψ`.
    Learned { encoder: SeqEncoder, decoder: SeqDecoder },
}

/// Compositional kernel `k(f(x), f(y))` over windows.
#[derive(Clone, Debug, PartialEq)]
pub struct DeepKernel {
    pub bandwidth: Bandwidth,
    pub embedding: Embedding,
}

impl DeepKernel {
    pub fn identity(bandwidth: Bandwidth) -> Self {
        Self {
            bandwidth,
            embedding: Embedding::Identity,
        }
    }

    pub fn learned(bandwidth: Bandwidth, encoder: SeqEncoder, decoder: SeqDecoder) -> Result<Self> {
        if encoder.d_h() != decoder.d_h() {
            return shape_err(format!(
                "encoder output {} differs from decoder input {}",
                encoder.d_h(),
                decoder.d_h()
            ));
        }
        Ok(Self {
            bandwidth,
            embedding: Embedding::Learned { encoder, decoder },
        })
    }

    pub fn encoder(&self) -> Option<&SeqEncoder> {
        match &self.embedding {
            Embedding::Identity => None,
            Embedding::Learned { encoder, .. } => Some(encoder),
        }
    }

    pub fn decoder(&self) -> Option<&SeqDecoder> {
        match &self.embedding {
            Embedding::Identity => None,
            Embedding::Learned { decoder, .. } => Some(decoder),
        }
    }

    pub fn learned_parts_mut(&mut self) -> Option<(&mut SeqEncoder, &mut SeqDecoder)> {
        match &mut self.embedding {
            Embedding::Identity => None,
            Embedding::Learned { encoder, decoder } => Some((encoder, decoder)),
        }
    }

    /// Encodes one `w×d` window into `w` samples (one row per timestep).
    pub fn embed(&self, window: &Matrix) -> Result<Matrix> {
        match &self.embedding {
            Embedding::Identity => Ok(window.clone()),
            Embedding::Learned { encoder, .. } => Ok(encoder.encode_window(window)?.states),
        }
    }

    /// Gram matrix between the encoded windows and the kernel used for it.
    pub fn eval_with_kernel(&self, x: &Matrix, y: &Matrix) -> Result<(Matrix, RbfKernel)> {
        let ex = self.embed(x)?;
        let ey = self.embed(y)?;
        let k = self.bandwidth.resolve(&ex.vstack(&ey)?)?;
        Ok((gram(&ex, &ey, &k)?, k))
    }
}

/// Gram matrix of the deep kernel between two windows.
pub fn deep_eval(x: &Matrix, y: &Matrix, dk: &DeepKernel) -> Result<Matrix> {
    Ok(dk.eval_with_kernel(x, y)?.0)
}
