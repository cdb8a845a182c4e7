//! MMD estimators, variance estimates, max-ratio kernel selection and the
//! test-power surrogate objective.

use rand::Rng;

use crate::diffcore::Matrix;
use crate::error::{param_err, shape_err, Result};
use crate::kernels::{gram, DeepKernel, RbfKernel};

/// Floor applied to every variance estimate.
pub const EPS_VAR: f64 = 1e-8;

/// Default bootstrap resample count.
pub const DEFAULT_BOOTSTRAP: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MmdEstimate {
    pub value: f64,
    pub m: usize,
    pub variance: Option<f64>,
}

impl MmdEstimate {
    /// `value / sqrt(max(variance, EPS_VAR))`; a missing variance counts as
    /// the floor.
    pub fn ratio(&self) -> f64 {
        self.value / self.variance.unwrap_or(EPS_VAR).max(EPS_VAR).sqrt()
    }
}

fn check_pair(x: &Matrix, y: &Matrix, min_m: usize) -> Result<usize> {
    if x.cols() != y.cols() {
        return shape_err(format!("samples of dimension {} and {}", x.cols(), y.cols()));
    }
    if x.rows() != y.rows() {
        return param_err(format!("unequal sample counts {} and {}", x.rows(), y.rows()));
    }
    if x.rows() < min_m {
        return param_err(format!("need at least {min_m} samples per side, got {}", x.rows()));
    }
    Ok(x.rows())
}

/// Unbiased estimate from the three Gram blocks. `kxx` and `kyy` are square;
/// their diagonals are ignored.
pub fn mmd2_from_grams(kxx: &Matrix, kyy: &Matrix, kxy: &Matrix) -> f64 {
    let m = kxx.rows() as f64;
    let n = kyy.rows() as f64;
    let off_diag = |g: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..g.rows() {
            for (j, v) in g.row(i).iter().enumerate() {
                if i != j {
                    s += v;
                }
            }
        }
        s
    };
    off_diag(kxx) / (m * (m - 1.0)) + off_diag(kyy) / (n * (n - 1.0)) - 2.0 * kxy.sum() / (m * n)
}

/// Unbiased (U-statistic) MMD² between equally sized sample sets (rows).
pub fn mmd2_unbiased(x: &Matrix, y: &Matrix, k: &RbfKernel) -> Result<f64> {
    check_pair(x, y, 2)?;
    Ok(mmd2_from_grams(&gram(x, x, k)?, &gram(y, y, k)?, &gram(x, y, k)?))
}

/// Pooled Gram matrix over `[X; Y]`; the first `m` rows are `X`.
pub(crate) fn pooled_gram(x: &Matrix, y: &Matrix, k: &RbfKernel) -> Result<Matrix> {
    let z = x.vstack(y)?;
    let n = z.rows();
    let mut g = Matrix::zeros(n, n);
    for i in 0..n {
        g.set(i, i, 1.0);
        for j in i + 1..n {
            let v = k.eval(z.row(i), z.row(j));
            g.set(i, j, v);
            g.set(j, i, v);
        }
    }
    Ok(g)
}

/// Unbiased estimate over index sets into a pooled Gram matrix. Positions
/// (not indices) define the excluded diagonal, so repeated indices are fine.
pub(crate) fn mmd2_indexed(g: &Matrix, xi: &[usize], yi: &[usize]) -> f64 {
    let (m, n) = (xi.len() as f64, yi.len() as f64);
    let within = |idx: &[usize]| -> f64 {
        let mut s = 0.0;
        for (a, &i) in idx.iter().enumerate() {
            let row = g.row(i);
            for (b, &j) in idx.iter().enumerate() {
                if a != b {
                    s += row[j];
                }
            }
        }
        s
    };
    let mut cross = 0.0;
    for &i in xi {
        let row = g.row(i);
        cross += yi.iter().map(|&j| row[j]).sum::<f64>();
    }
    within(xi) / (m * (m - 1.0)) + within(yi) / (n * (n - 1.0)) - 2.0 * cross / (m * n)
}

/// Bootstrap estimate of `Var[M̂]`: resample each side with replacement
/// `resamples` times and take the empirical variance of the estimates,
/// floored at [`EPS_VAR`].
pub fn mmd2_variance<R: Rng + ?Sized>(
    x: &Matrix,
    y: &Matrix,
    k: &RbfKernel,
    resamples: usize,
    rng: &mut R,
) -> Result<f64> {
    let m = check_pair(x, y, 4)?;
    if resamples < 100 {
        return param_err(format!("bootstrap needs at least 100 resamples, got {resamples}"));
    }
    let g = pooled_gram(x, y, k)?;
    Ok(bootstrap_variance_from_pooled(&g, m, resamples, rng))
}

fn bootstrap_variance_from_pooled<R: Rng + ?Sized>(g: &Matrix, m: usize, resamples: usize, rng: &mut R) -> f64 {
    let mut xi = vec![0usize; m];
    let mut yi = vec![0usize; m];
    let mut vals = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        for v in xi.iter_mut() {
            *v = rng.gen_range(0..m);
        }
        for v in yi.iter_mut() {
            *v = m + rng.gen_range(0..m);
        }
        vals.push(mmd2_indexed(g, &xi, &yi));
    }
    sample_variance(&vals).max(EPS_VAR)
}

/// Plug-in estimate of the asymptotic variance of `M̂` under the
/// alternative: `4/m · (mean_i (mean_j H_ij)² − (mean H)²)` with
/// `H_ij = k(x_i,x_j) + k(y_i,y_j) − k(x_i,y_j) − k(x_j,y_i)`. Floored at
/// [`EPS_VAR`]. O(m²), no resampling.
pub fn mmd2_variance_asymptotic(x: &Matrix, y: &Matrix, k: &RbfKernel) -> Result<f64> {
    let m = check_pair(x, y, 4)?;
    let g = pooled_gram(x, y, k)?;
    Ok(asymptotic_variance_from_pooled(&g, m))
}

pub(crate) fn asymptotic_variance_from_pooled(g: &Matrix, m: usize) -> f64 {
    let mf = m as f64;
    let mut row_means = vec![0.0; m];
    for i in 0..m {
        let mut s = 0.0;
        for j in 0..m {
            s += g.get(i, j) + g.get(m + i, m + j) - g.get(i, m + j) - g.get(j, m + i);
        }
        row_means[i] = s / mf;
    }
    let mean = row_means.iter().sum::<f64>() / mf;
    let second = row_means.iter().map(|v| v * v).sum::<f64>() / mf;
    (4.0 / mf * (second - mean * mean)).max(EPS_VAR)
}

/// Unbiased sample variance (n − 1 denominator); zero for fewer than two
/// values.
pub fn sample_variance(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
}

/// Variance estimator used by [`max_ratio_select`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VarianceMethod {
    Bootstrap { resamples: usize },
    Asymptotic,
}

impl Default for VarianceMethod {
    fn default() -> Self {
        VarianceMethod::Bootstrap {
            resamples: DEFAULT_BOOTSTRAP,
        }
    }
}

/// Estimate with variance for one kernel.
pub fn estimate<R: Rng + ?Sized>(
    x: &Matrix,
    y: &Matrix,
    k: &RbfKernel,
    method: VarianceMethod,
    rng: &mut R,
) -> Result<MmdEstimate> {
    let m = check_pair(x, y, 4)?;
    let g = pooled_gram(x, y, k)?;
    let xi: Vec<usize> = (0..m).collect();
    let yi: Vec<usize> = (m..2 * m).collect();
    let value = mmd2_indexed(&g, &xi, &yi);
    let variance = match method {
        VarianceMethod::Asymptotic => asymptotic_variance_from_pooled(&g, m),
        VarianceMethod::Bootstrap { resamples } => {
            if resamples < 100 {
                return param_err(format!("bootstrap needs at least 100 resamples, got {resamples}"));
            }
            bootstrap_variance_from_pooled(&g, m, resamples, rng)
        }
    };
    Ok(MmdEstimate {
        value,
        m,
        variance: Some(variance),
    })
}

/// Index of the largest `M̂ / sqrt(V)`; ties go to the smallest index.
pub fn select_by_ratio(estimates: &[MmdEstimate]) -> Result<usize> {
    if estimates.is_empty() {
        return param_err("empty kernel list");
    }
    let mut best = 0;
    let mut best_ratio = estimates[0].ratio();
    for (i, e) in estimates.iter().enumerate().skip(1) {
        let r = e.ratio();
        if r > best_ratio {
            best = i;
            best_ratio = r;
        }
    }
    Ok(best)
}

/// Max-ratio kernel selection over a candidate list.
pub fn max_ratio_select<R: Rng + ?Sized>(
    x: &Matrix,
    y: &Matrix,
    kernels: &[RbfKernel],
    method: VarianceMethod,
    rng: &mut R,
) -> Result<usize> {
    if kernels.is_empty() {
        return param_err("empty kernel list");
    }
    let est = kernels
        .iter()
        .map(|k| estimate(x, y, k, method, rng))
        .collect::<Result<Vec<_>>>()?;
    select_by_ratio(&est)
}

/// Surrogate test-power objective for a deep kernel:
/// `M̂(f(X_r), f(Z)) − λ · M̂(f(X_l), f(X_r))`.
///
/// The bandwidth is resolved on the pooled encodings of `X_l` and `X_r`.
pub fn power_bound_objective(
    x_left: &Matrix,
    x_right: &Matrix,
    z: &Matrix,
    dk: &DeepKernel,
    lambda: f64,
) -> Result<f64> {
    if x_left.rows() < 2 || x_right.rows() < 2 || z.rows() < 2 {
        return param_err("windows must hold at least 2 samples");
    }
    if !(lambda >= 0.0) {
        return param_err(format!("lambda must be non-negative, got {lambda}"));
    }
    let el = dk.embed(x_left)?;
    let er = dk.embed(x_right)?;
    let ez = dk.embed(z)?;
    let k = dk.bandwidth.resolve(&el.vstack(&er)?)?;
    Ok(mmd2_unbiased(&er, &ez, &k)? - lambda * mmd2_unbiased(&el, &er, &k)?)
}
