//! Permutation thresholds, reject decisions and Monte-Carlo test power.

use rand::seq::SliceRandom;

use crate::diffcore::Matrix;
use crate::error::{param_err, Result};
use crate::kernels::{median_heuristic, RbfKernel};
use crate::datagen::{blob_correlation, sample_blobs};
use crate::mmdstats::{estimate, max_ratio_select, EPS_VAR, mmd2_unbiased, pooled_gram, VarianceMethod};
use crate::rng::{derive_seed, derived, Rng64};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TestConfig {
    /// Allowed false rejection probability.
    pub alpha: f64,
    pub n_permutations: usize,
    /// Samples per side.
    pub m: usize,
}

impl TestConfig {
    pub fn new(alpha: f64, n_permutations: usize, m: usize) -> Result<Self> {
        let cfg = Self {
            alpha,
            n_permutations,
            m,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return param_err(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if self.n_permutations < 100 {
            return param_err(format!("need at least 100 permutations, got {}", self.n_permutations));
        }
        if self.m < 2 {
            return param_err(format!("need at least 2 samples per side, got {}", self.m));
        }
        Ok(())
    }
}

/// Empirical quantile with linear interpolation between order statistics
/// (position `q·(n−1)` in the sorted values).
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return param_err("quantile of an empty sample");
    }
    if !(0.0..=1.0).contains(&q) {
        return param_err(format!("quantile level {q} outside [0, 1]"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&v, q))
}

fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    v[lo] + (v[hi] - v[lo]) * frac
}

/// `m · M̂` for the split encoded by `signs` (+1 first set, −1 second) over a
/// pooled RBF Gram matrix with unit diagonal and equal halves.
fn split_statistic(g: &Matrix, signs: &[f64], total: f64) -> f64 {
    let n = signs.len();
    let m = (n / 2) as f64;
    let mut quad = 0.0;
    for (i, &si) in signs.iter().enumerate() {
        let row = g.row(i);
        let dot: f64 = row.iter().zip(signs).map(|(a, b)| a * b).sum();
        quad += si * dot;
    }
    // quad = Sxx + Syy − 2 Sxy, total = Sxx + Syy + 2 Sxy
    let within = 0.5 * (total + quad);
    let cross = 0.25 * (total - quad);
    let est = (within - 2.0 * m) / (m * (m - 1.0)) - 2.0 * cross / (m * m);
    m * est
}

/// Null statistics `m · M̂` over random equal re-splits of the pooled
/// sample.
pub fn permutation_statistics(pooled: &Matrix, n_permutations: usize, rng: &mut Rng64) -> Vec<f64> {
    let n = pooled.rows();
    let total = pooled.sum();
    let mut signs: Vec<f64> = (0..n).map(|i| if i < n / 2 { 1.0 } else { -1.0 }).collect();
    (0..n_permutations)
        .map(|_| {
            signs.shuffle(rng);
            split_statistic(pooled, &signs, total)
        })
        .collect()
}

fn check_samples(x: &Matrix, y: &Matrix) -> Result<()> {
    if x.rows() != y.rows() || x.rows() < 2 || x.cols() != y.cols() {
        return param_err(format!(
            "permutation test needs equal sample sets of at least 2, got {:?} and {:?}",
            x.shape(),
            y.shape()
        ));
    }
    Ok(())
}

/// The `(1 − α)` quantile of the permutation null of `m · M̂`.
pub fn permutation_threshold(
    x: &Matrix,
    y: &Matrix,
    k: &RbfKernel,
    cfg: &TestConfig,
    rng: &mut Rng64,
) -> Result<f64> {
    cfg.validate()?;
    check_samples(x, y)?;
    let g = pooled_gram(x, y, k)?;
    quantile(&permutation_statistics(&g, cfg.n_permutations, rng), 1.0 - cfg.alpha)
}

/// True iff `m · M̂(X, Y) > c_alpha`.
pub fn reject(x: &Matrix, y: &Matrix, k: &RbfKernel, c_alpha: f64) -> Result<bool> {
    let stat = x.rows() as f64 * mmd2_unbiased(x, y, k)?;
    Ok(stat > c_alpha)
}

/// Outcome of one permutation test.
#[derive(Clone, Debug, PartialEq)]
pub struct TestOutcome {
    pub statistic: f64,
    /// Sorted null statistics.
    pub null: Vec<f64>,
}

impl TestOutcome {
    pub fn threshold(&self, alpha: f64) -> f64 {
        quantile_sorted(&self.null, 1.0 - alpha)
    }

    pub fn rejects(&self, alpha: f64) -> bool {
        self.statistic > self.threshold(alpha)
    }
}

/// Runs the test statistic and its permutation null from one pooled Gram.
pub fn permutation_test(
    x: &Matrix,
    y: &Matrix,
    k: &RbfKernel,
    n_permutations: usize,
    rng: &mut Rng64,
) -> Result<TestOutcome> {
    check_samples(x, y)?;
    let g = pooled_gram(x, y, k)?;
    let n = g.rows();
    let signs: Vec<f64> = (0..n).map(|i| if i < n / 2 { 1.0 } else { -1.0 }).collect();
    let statistic = split_statistic(&g, &signs, g.sum());
    let mut null = permutation_statistics(&g, n_permutations, rng);
    null.sort_by(f64::total_cmp);
    Ok(TestOutcome { statistic, null })
}

/// Draws `n` samples.
pub trait Sampler {
    fn sample(&self, n: usize, rng: &mut Rng64) -> Matrix;
}

impl<F: Fn(usize, &mut Rng64) -> Matrix> Sampler for F {
    fn sample(&self, n: usize, rng: &mut Rng64) -> Matrix {
        self(n, rng)
    }
}

/// Picks a kernel for one trial, drawing whatever selection data it needs.
pub trait KernelChooser {
    fn choose(&self, rng: &mut Rng64) -> Result<RbfKernel>;
}

/// Always the same kernel.
pub struct FixedKernel(pub RbfKernel);

impl KernelChooser for FixedKernel {
    fn choose(&self, _rng: &mut Rng64) -> Result<RbfKernel> {
        Ok(self.0)
    }
}

/// Median heuristic over a pooled selection draw of `m` samples from each
/// sampler.
pub struct MedianChooser<'a> {
    pub p: &'a dyn Sampler,
    pub q: &'a dyn Sampler,
    pub m: usize,
}

impl KernelChooser for MedianChooser<'_> {
    fn choose(&self, rng: &mut Rng64) -> Result<RbfKernel> {
        let x = self.p.sample(self.m, rng);
        let y = self.q.sample(self.m, rng);
        RbfKernel::new(median_heuristic(&x.vstack(&y)?)?)
    }
}

/// Rejection rates at each `alpha` over `trials` independent trials.
///
/// Trial `i` uses a generator derived from `(seed, i)`: the chooser draws
/// its selection data first, then the test sample is drawn, so selection
/// never sees the tested draw. All levels share the same permutation null.
pub fn estimate_power_curve(
    p: &dyn Sampler,
    q: &dyn Sampler,
    chooser: &dyn KernelChooser,
    m: usize,
    n_permutations: usize,
    alphas: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if trials == 0 {
        return param_err("need at least one trial");
    }
    for &a in alphas {
        TestConfig::new(a, n_permutations, m)?;
    }
    let mut hits = vec![0usize; alphas.len()];
    for trial in 0..trials {
        let mut rng = derived(seed, trial as u64);
        let k = chooser.choose(&mut rng)?;
        let x = p.sample(m, &mut rng);
        let y = q.sample(m, &mut rng);
        let out = permutation_test(&x, &y, &k, n_permutations, &mut rng)?;
        for (h, &a) in hits.iter_mut().zip(alphas) {
            if out.rejects(a) {
                *h += 1;
            }
        }
    }
    Ok(hits.into_iter().map(|h| h as f64 / trials as f64).collect())
}

/// Fraction of trials rejecting at `cfg.alpha`.
pub fn estimate_power(
    p: &dyn Sampler,
    q: &dyn Sampler,
    chooser: &dyn KernelChooser,
    cfg: &TestConfig,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    cfg.validate()?;
    Ok(estimate_power_curve(p, q, chooser, cfg.m, cfg.n_permutations, &[cfg.alpha], trials, seed)?[0])
}

/// `n` RBF kernels with bandwidths `σ` log-spaced over `[sigma_lo, sigma_hi]`.
pub fn log_bandwidth_grid(sigma_lo: f64, sigma_hi: f64, n: usize) -> Result<Vec<RbfKernel>> {
    if !(sigma_lo > 0.0 && sigma_hi >= sigma_lo) || !sigma_hi.is_finite() {
        return param_err(format!("bad bandwidth range [{sigma_lo}, {sigma_hi}]"));
    }
    if n < 2 {
        return param_err(format!("need at least 2 bandwidths, got {n}"));
    }
    let (a, b) = (sigma_lo.ln(), sigma_hi.ln());
    (0..n)
        .map(|i| {
            let s = (a + (b - a) * i as f64 / (n - 1) as f64).exp();
            RbfKernel::new(s * s)
        })
        .collect()
}

/// Max-ratio selection on fresh draws of `m_p` samples from `p` and `m_q`
/// from `q`. The estimator needs equal counts, so `m_p == m_q`.
pub struct MaxRatioChooser<'a> {
    pub p: &'a dyn Sampler,
    pub q: &'a dyn Sampler,
    pub m: usize,
    pub kernels: &'a [RbfKernel],
    pub variance: VarianceMethod,
}

impl KernelChooser for MaxRatioChooser<'_> {
    fn choose(&self, rng: &mut Rng64) -> Result<RbfKernel> {
        let x = self.p.sample(self.m, rng);
        let y = self.q.sample(self.m, rng);
        Ok(self.kernels[max_ratio_select(&x, &y, self.kernels, self.variance, rng)?])
    }
}

/// Surrogate selection: `argmax_k (M̂_k(X, Z) − λ M̂_k(X, X')) / sqrt(V_k(X, Z))`
/// with `X, X' ~ p` and `Z ~ g`, each of size `m`. The `λ` term stands in
/// for the test threshold. Ties go to the first kernel.
pub struct SurrogateChooser<'a> {
    pub p: &'a dyn Sampler,
    pub g: &'a dyn Sampler,
    pub m: usize,
    pub kernels: &'a [RbfKernel],
    pub lambda: f64,
    pub variance: VarianceMethod,
}

impl KernelChooser for SurrogateChooser<'_> {
    fn choose(&self, rng: &mut Rng64) -> Result<RbfKernel> {
        if self.kernels.is_empty() {
            return param_err("empty kernel list");
        }
        let x = self.p.sample(self.m, rng);
        let x2 = self.p.sample(self.m, rng);
        let z = self.g.sample(self.m, rng);
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, k) in self.kernels.iter().enumerate() {
            let pg = estimate(&x, &z, k, self.variance, rng)?;
            let thr = if self.lambda == 0.0 { 0.0 } else { self.lambda * mmd2_unbiased(&x, &x2, k)? };
            let v = (pg.value - thr) / pg.variance.unwrap_or(EPS_VAR).max(EPS_VAR).sqrt();
            if v > best.0 {
                best = (v, i);
            }
        }
        Ok(self.kernels[best.1])
    }
}

/// Kernel selectors compared on the blob data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlobSelector {
    Median,
    MaxRatioFull,
    MaxRatioSparse,
    Surrogate,
}

impl BlobSelector {
    pub const ALL: [BlobSelector; 4] = [
        BlobSelector::Median,
        BlobSelector::MaxRatioFull,
        BlobSelector::MaxRatioSparse,
        BlobSelector::Surrogate,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            BlobSelector::Median => "median",
            BlobSelector::MaxRatioFull => "max-ratio-full",
            BlobSelector::MaxRatioSparse => "max-ratio-sparse",
            BlobSelector::Surrogate => "surrogate",
        }
    }
}

/// Settings of the blob kernel-selection experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct BlobConfig {
    pub epsilon_q: f64,
    pub epsilon_g: f64,
    /// Test sample size per side, also the selection size for the full
    /// selectors.
    pub m: usize,
    /// Size of the sparse `Ỹ` draw.
    pub sparse: usize,
    pub trials: usize,
    pub n_permutations: usize,
    pub alpha: f64,
    pub n_bandwidths: usize,
    pub sigma_lo: f64,
    pub sigma_hi: f64,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        Self {
            epsilon_q: 6.0,
            epsilon_g: 4.0,
            m: 500,
            sparse: 200,
            trials: 100,
            n_permutations: 200,
            alpha: 0.05,
            n_bandwidths: 20,
            sigma_lo: 0.1,
            sigma_hi: 100.0,
            lambda: 0.0,
            seed: 0,
        }
    }
}

/// Test power of every selector on the blob data. Selector `i` uses trial
/// seeds derived from `(seed, i)`.
pub fn blob_power(cfg: &BlobConfig) -> Result<Vec<(BlobSelector, f64)>> {
    TestConfig::new(cfg.alpha, cfg.n_permutations, cfg.m)?;
    if cfg.sparse < 4 {
        return param_err(format!("sparse draw needs at least 4 samples, got {}", cfg.sparse));
    }
    let rho_p = 0.0;
    let rho_q = blob_correlation(cfg.epsilon_q)?;
    let rho_g = blob_correlation(cfg.epsilon_g)?;
    let p = move |n: usize, rng: &mut Rng64| sample_blobs(rho_p, n, rng);
    let q = move |n: usize, rng: &mut Rng64| sample_blobs(rho_q, n, rng);
    let g = move |n: usize, rng: &mut Rng64| sample_blobs(rho_g, n, rng);
    let kernels = log_bandwidth_grid(cfg.sigma_lo, cfg.sigma_hi, cfg.n_bandwidths)?;
    let variance = VarianceMethod::Asymptotic;
    let mut out = Vec::with_capacity(BlobSelector::ALL.len());
    for (i, sel) in BlobSelector::ALL.iter().enumerate() {
        let chooser: Box<dyn KernelChooser + '_> = match sel {
            BlobSelector::Median => Box::new(MedianChooser { p: &p, q: &q, m: cfg.m }),
            BlobSelector::MaxRatioFull => Box::new(MaxRatioChooser {
                p: &p,
                q: &q,
                m: cfg.m,
                kernels: &kernels,
                variance,
            }),
            BlobSelector::MaxRatioSparse => Box::new(MaxRatioChooser {
                p: &p,
                q: &q,
                m: cfg.sparse,
                kernels: &kernels,
                variance,
            }),
            BlobSelector::Surrogate => Box::new(SurrogateChooser {
                p: &p,
                g: &g,
                m: cfg.m,
                kernels: &kernels,
                lambda: cfg.lambda,
                variance,
            }),
        };
        let power = estimate_power_curve(
            &p,
            &q,
            chooser.as_ref(),
            cfg.m,
            cfg.n_permutations,
            &[cfg.alpha],
            cfg.trials,
            derive_seed(cfg.seed, i as u64),
        )?[0];
        out.push((*sel, power));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gauss(shift: f64) -> impl Fn(usize, &mut Rng64) -> Matrix {
        move |n, rng| Matrix::column(&(0..n).map(|_| shift + rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>())
    }

    #[test]
    fn quantile_interpolates() {
        let v = [3.0, 1.0, 2.0, 4.0];
        assert_eq!(quantile(&v, 0.5).unwrap(), 2.5);
        assert_eq!(quantile(&v, 0.0).unwrap(), 1.0);
        assert_eq!(quantile(&v, 1.0).unwrap(), 4.0);
        assert!((quantile(&v, 0.9).unwrap() - 3.7).abs() < 1e-12);
        assert!(quantile(&[], 0.5).is_err());
    }

    #[test]
    fn split_statistic_matches_estimator() {
        let mut rng = seeded(3);
        let x = gauss(0.0)(6, &mut rng);
        let y = gauss(1.0)(6, &mut rng);
        let k = RbfKernel::new(0.8).unwrap();
        let g = pooled_gram(&x, &y, &k).unwrap();
        let signs: Vec<f64> = (0..12).map(|i| if i < 6 { 1.0 } else { -1.0 }).collect();
        let a = split_statistic(&g, &signs, g.sum());
        let b = 6.0 * mmd2_unbiased(&x, &y, &k).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn median_threshold_at_half_alpha() {
        let mut rng = seeded(4);
        let x = gauss(0.0)(10, &mut rng);
        let y = gauss(0.0)(10, &mut rng);
        let k = RbfKernel::new(1.0).unwrap();
        let cfg = TestConfig::new(0.5, 200, 10).unwrap();
        let c = permutation_threshold(&x, &y, &k, &cfg, &mut seeded(1)).unwrap();
        let g = pooled_gram(&x, &y, &k).unwrap();
        let stats = permutation_statistics(&g, 200, &mut seeded(1));
        assert_eq!(c, quantile(&stats, 0.5).unwrap());
    }

    #[test]
    fn identical_points_give_zero_threshold() {
        let x = Matrix::filled(8, 2, 1.5);
        let cfg = TestConfig::new(0.05, 100, 8).unwrap();
        let c = permutation_threshold(&x, &x, &RbfKernel::new(1.0).unwrap(), &cfg, &mut seeded(0)).unwrap();
        assert!(c.abs() < 1e-12);
    }

    #[test]
    fn reject_uses_strict_inequality() {
        let x = Matrix::column(&[0.0, 2.0]);
        let y = Matrix::column(&[5.0, 7.0]);
        let k = RbfKernel::new(1.0).unwrap();
        let stat = 2.0 * mmd2_unbiased(&x, &y, &k).unwrap();
        assert!(!reject(&x, &y, &k, stat).unwrap());
        assert!(reject(&x, &y, &k, stat - 1e-9).unwrap());
    }

    #[test]
    fn identical_sets_do_not_reject() {
        let mut rng = seeded(5);
        let x = gauss(0.0)(20, &mut rng);
        let k = RbfKernel::new(1.0).unwrap();
        assert!(!reject(&x, &x, &k, 0.0).unwrap());
    }

    #[test]
    fn separated_clouds_reject() {
        let mut rng = seeded(6);
        let x = gauss(0.0)(30, &mut rng);
        let y = gauss(50.0)(30, &mut rng);
        let k = RbfKernel::new(1.0).unwrap();
        let cfg = TestConfig::new(0.05, 200, 30).unwrap();
        let c = permutation_threshold(&x, &y, &k, &cfg, &mut rng).unwrap();
        assert!(reject(&x, &y, &k, c).unwrap());
    }

    #[test]
    fn config_validation() {
        assert!(TestConfig::new(0.0, 100, 10).is_err());
        assert!(TestConfig::new(1.0, 100, 10).is_err());
        assert!(TestConfig::new(0.05, 99, 10).is_err());
        assert!(TestConfig::new(0.05, 100, 1).is_err());
    }

    #[test]
    fn thresholds_agree_across_seeds() {
        let mut rng = seeded(7);
        let x = gauss(0.0)(40, &mut rng);
        let y = gauss(0.3)(40, &mut rng);
        let k = RbfKernel::new(1.0).unwrap();
        let g = pooled_gram(&x, &y, &k).unwrap();
        let n_perm = 1000;
        let a = permutation_statistics(&g, n_perm, &mut seeded(100));
        let b = permutation_statistics(&g, n_perm, &mut seeded(200));
        let q = 0.95;
        let (ca, cb) = (quantile(&a, q).unwrap(), quantile(&b, q).unwrap());
        // Quantile standard error via the order-statistic band:
        // sqrt(q(1-q)/n) in probability, mapped through the empirical null.
        let band = (q * (1.0 - q) / n_perm as f64).sqrt();
        let lo = quantile(&a, q - 2.0 * band).unwrap();
        let hi = quantile(&a, q + 2.0 * band).unwrap();
        let se = 0.5 * (hi - lo) / 2.0;
        assert!((ca - cb).abs() <= 2.0 * 2f64.sqrt() * se, "{ca} vs {cb}, se {se}");
    }

    #[test]
    fn power_is_monotone_in_alpha() {
        let p = gauss(0.0);
        let q = gauss(0.4);
        let chooser = FixedKernel(RbfKernel::new(1.0).unwrap());
        let rates = estimate_power_curve(&p, &q, &chooser, 30, 200, &[0.01, 0.05, 0.1], 60, 11).unwrap();
        assert!(rates[0] <= rates[1] && rates[1] <= rates[2], "{rates:?}");
    }

    #[test]
    fn far_shift_has_full_power() {
        let p = gauss(0.0);
        let q = gauss(5.0);
        let chooser = MedianChooser { p: &p, q: &q, m: 100 };
        let cfg = TestConfig::new(0.05, 200, 100).unwrap();
        let power = estimate_power(&p, &q, &chooser, &cfg, 50, 3).unwrap();
        assert!(power >= 0.99, "{power}");
    }
}
