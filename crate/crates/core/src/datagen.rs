//! Synthetic datasets with ground-truth change points, plus the CSV series
//! format and its labels sidecar.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffcore::Matrix;
use crate::error::{param_err, Error, Result};
use crate::rng::{seeded, Rng64};

/// Default series length of the synthetic benchmarks.
pub const DEFAULT_LEN: usize = 5000;
/// Spacing between blob centers.
pub const BLOB_SPACING: f64 = 15.0;

/// A `T×d` series with change-point indices (0-based, strictly increasing).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSeries {
    pub series: Matrix,
    pub labels: Vec<usize>,
}

impl LabeledSeries {
    pub fn new(series: Matrix, labels: Vec<usize>) -> Result<Self> {
        let s = Self { series, labels };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.windows(2).any(|p| p[0] >= p[1]) {
            return param_err("labels must be strictly increasing");
        }
        if let Some(&last) = self.labels.last() {
            if last >= self.series.rows() {
                return param_err(format!("label {last} outside series of length {}", self.series.rows()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.series.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.series.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.series.cols()
    }

    /// Writes `path` as CSV and the labels next to it as `<stem>.labels`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_series_csv(path, &self.series)?;
        write_labels(&labels_path(path), &self.labels)
    }

    /// Reads a CSV series and its labels sidecar, if present.
    pub fn load(path: &Path) -> Result<Self> {
        let series = read_series_csv(path)?;
        let lp = labels_path(path);
        let labels = if lp.exists() { read_labels(&lp)? } else { Vec::new() };
        Self::new(series, labels)
    }
}

/// Sidecar path `<stem>.labels` for a series file.
pub fn labels_path(series_path: &Path) -> PathBuf {
    series_path.with_extension("labels")
}

/// Random segment lengths `round(base + τ)` with `τ ~ N(0, tau_std²)`,
/// floored at `min_len`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentSchedule {
    pub base: usize,
    pub tau_std: f64,
    pub min_len: usize,
}

impl Default for SegmentSchedule {
    fn default() -> Self {
        Self {
            base: 100,
            tau_std: 10.0,
            min_len: 50,
        }
    }
}

impl SegmentSchedule {
    /// Fixed-length segments.
    pub fn fixed(len: usize) -> Self {
        Self {
            base: len,
            tau_std: 0.0,
            min_len: 1,
        }
    }

    /// Segment start indices covering `[0, len)`; the first is always 0.
    pub fn starts(&self, len: usize, rng: &mut Rng64) -> Result<Vec<usize>> {
        if self.base == 0 || self.min_len == 0 || !(self.tau_std >= 0.0) {
            return param_err("segment schedule needs positive lengths and a non-negative spread");
        }
        let mut starts = Vec::new();
        let mut t = 0;
        while t < len {
            starts.push(t);
            let tau = if self.tau_std > 0.0 {
                self.tau_std * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            let l = (self.base as f64 + tau).round().max(self.min_len as f64) as usize;
            t += l;
        }
        Ok(starts)
    }
}

/// Noise mean of segment `n` (1-based): `μ_1 = 0`, `μ_n = μ_{n−1} + n/16`.
pub fn jumping_mean_mu(n: usize) -> f64 {
    // Closed form of the recursion: (n(n+1)/2 − 1)/16.
    if n <= 1 {
        0.0
    } else {
        ((n * (n + 1) / 2) as f64 - 1.0) / 16.0
    }
}

/// Noise standard deviation of segment `n` (1-based): 1 for odd `n`,
/// `ln(e + n/4)` for even `n`.
pub fn scaling_variance_sigma(n: usize) -> f64 {
    if n % 2 == 1 {
        1.0
    } else {
        (std::f64::consts::E + n as f64 / 4.0).ln()
    }
}

/// `y(t) = 0.6 y(t−1) − 0.5 y(t−2) + ε_t` with `y(0) = y(1) = 0` and per-segment
/// noise `N(mean(n), sd(n)²)`.
fn ar2_series(
    len: usize,
    starts: &[usize],
    noise: impl Fn(usize) -> (f64, f64),
    rng: &mut Rng64,
) -> Vec<f64> {
    let mut y = vec![0.0; len];
    let mut seg = 0;
    for t in 0..len {
        while seg + 1 < starts.len() && starts[seg + 1] <= t {
            seg += 1;
        }
        let (mean, sd) = noise(seg + 1);
        let eps = mean + sd * rng.sample::<f64, _>(StandardNormal);
        if t >= 2 {
            y[t] = 0.6 * y[t - 1] - 0.5 * y[t - 2] + eps;
        }
    }
    y
}

fn from_starts(values: Vec<f64>, d: usize, starts: &[usize]) -> Result<LabeledSeries> {
    let rows = values.len() / d;
    LabeledSeries::new(Matrix::from_vec(rows, d, values)?, starts[1..].to_vec())
}

/// Jumping-Mean series of `len` points under a custom segment schedule.
pub fn gen_jumping_mean_with(seed: u64, len: usize, schedule: &SegmentSchedule) -> Result<LabeledSeries> {
    let mut rng = seeded(seed);
    let starts = schedule.starts(len, &mut rng)?;
    let y = ar2_series(len, &starts, |n| (jumping_mean_mu(n), 1.5), &mut rng);
    from_starts(y, 1, &starts)
}

/// AR(2) series of 5000 points whose noise mean jumps at every segment start.
pub fn gen_jumping_mean(seed: u64) -> Result<LabeledSeries> {
    gen_jumping_mean_with(seed, DEFAULT_LEN, &SegmentSchedule::default())
}

/// Scaling-Variance series of `len` points under a custom segment schedule.
pub fn gen_scaling_variance_with(seed: u64, len: usize, schedule: &SegmentSchedule) -> Result<LabeledSeries> {
    let mut rng = seeded(seed);
    let starts = schedule.starts(len, &mut rng)?;
    let y = ar2_series(len, &starts, |n| (0.0, scaling_variance_sigma(n)), &mut rng);
    from_starts(y, 1, &starts)
}

/// AR(2) series of 5000 points whose noise scale alternates per segment.
pub fn gen_scaling_variance(seed: u64) -> Result<LabeledSeries> {
    gen_scaling_variance_with(seed, DEFAULT_LEN, &SegmentSchedule::default())
}

/// Draw from `0.5 N(−1, 0.5²) + 0.5 N(1, 0.5²)`.
fn mixture_a(rng: &mut Rng64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    if rng.gen_bool(0.5) {
        -1.0 + 0.5 * z
    } else {
        1.0 + 0.5 * z
    }
}

/// Draw from `0.8 N(−1, 1) + 0.2 N(1, 0.1²)`.
fn mixture_b(rng: &mut Rng64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    if rng.gen_bool(0.8) {
        -1.0 + z
    } else {
        1.0 + 0.1 * z
    }
}

/// Alternates between two Gaussian mixtures every 100 steps, starting with
/// the symmetric one.
pub fn gen_gaussian_mixtures(seed: u64, len: usize) -> Result<LabeledSeries> {
    if len == 0 {
        return param_err("series length must be positive");
    }
    let mut rng = seeded(seed);
    let starts: Vec<usize> = (0..len).step_by(100).collect();
    let y = (0..len)
        .map(|t| if (t / 100) % 2 == 0 { mixture_a(&mut rng) } else { mixture_b(&mut rng) })
        .collect();
    from_starts(y, 1, &starts)
}

/// `d`-dimensional series alternating every 100 steps between
/// `N(0, 0.75² I)` and `N(0, 1.25² I)`.
pub fn gen_highdim_variance_len(d: usize, seed: u64, len: usize) -> Result<LabeledSeries> {
    if d == 0 || len == 0 {
        return param_err("dimension and length must be positive");
    }
    let mut rng = seeded(seed);
    let starts: Vec<usize> = (0..len).step_by(100).collect();
    let mut v = Vec::with_capacity(len * d);
    for t in 0..len {
        let sd = if (t / 100) % 2 == 0 { 0.75 } else { 1.25 };
        for _ in 0..d {
            v.push(sd * rng.sample::<f64, _>(StandardNormal));
        }
    }
    from_starts(v, d, &starts)
}

/// [`gen_highdim_variance_len`] with 5000 points.
pub fn gen_highdim_variance(d: usize, seed: u64) -> Result<LabeledSeries> {
    gen_highdim_variance_len(d, seed, DEFAULT_LEN)
}

/// Off-diagonal covariance `(ε − 1)/(ε + 1)` of a blob with eigenvalue ratio `ε`.
pub fn blob_correlation(epsilon: f64) -> Result<f64> {
    if !(epsilon >= 1.0) || !epsilon.is_finite() {
        return param_err(format!("blob epsilon must be at least 1, got {epsilon}"));
    }
    Ok((epsilon - 1.0) / (epsilon + 1.0))
}

/// `n` draws from the 5×5 blob grid with centers at `{0, 15, 30, 45, 60}²`.
pub fn sample_blobs(rho: f64, n: usize, rng: &mut Rng64) -> Matrix {
    let c = (1.0 - rho * rho).sqrt();
    let mut v = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let cx = rng.gen_range(0..5) as f64 * BLOB_SPACING;
        let cy = rng.gen_range(0..5) as f64 * BLOB_SPACING;
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        v.push(cx + z1);
        v.push(cy + rho * z1 + c * z2);
    }
    Matrix::from_vec(n, 2, v).expect("blob sample shape")
}

/// `n` blob points with eigenvalue ratio `epsilon`.
pub fn gen_blobs(epsilon: f64, n: usize, seed: u64) -> Result<Matrix> {
    if n == 0 {
        return param_err("need at least one blob sample");
    }
    let rho = blob_correlation(epsilon)?;
    Ok(sample_blobs(rho, n, &mut seeded(seed)))
}

/// Named generator, for the command line.
pub fn generate_named(name: &str, seed: u64, len: usize, dim: usize) -> Result<LabeledSeries> {
    match name {
        "jumping-mean" => gen_jumping_mean_with(seed, len, &SegmentSchedule::default()),
        "scaling-variance" => gen_scaling_variance_with(seed, len, &SegmentSchedule::default()),
        "gaussian-mixtures" => gen_gaussian_mixtures(seed, len),
        "highdim-variance" => gen_highdim_variance_len(dim, seed, len),
        other => Err(Error::Config(format!("unknown dataset '{other}'"))),
    }
}

/// Writes `t,x0,x1,...` CSV with one row per timestep.
pub fn write_series_csv(path: &Path, series: &Matrix) -> Result<()> {
    let mut s = String::from("t");
    for j in 0..series.cols() {
        write!(s, ",x{j}").unwrap();
    }
    s.push('\n');
    for (t, row) in series.row_iter().enumerate() {
        write!(s, "{t}").unwrap();
        for v in row {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

/// Parses the CSV series format; the `t` column is checked, not stored.
pub fn parse_series_csv(text: &str) -> Result<Matrix> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Parse("empty series file".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 2 || cols[0] != "t" {
        return Err(Error::Parse(format!("bad header '{header}', expected t,x0,...")));
    }
    let d = cols.len() - 1;
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != d + 1 {
            return Err(Error::Parse(format!("row {i}: expected {} fields, got {}", d + 1, fields.len())));
        }
        for f in &fields[1..] {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::Parse(format!("row {i}: bad number '{f}'")))?;
            if !v.is_finite() {
                return Err(Error::Parse(format!("row {i}: non-finite value")));
            }
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Parse("series has no rows".into()));
    }
    Matrix::from_vec(rows, d, data)
}

pub fn read_series_csv(path: &Path) -> Result<Matrix> {
    parse_series_csv(&fs::read_to_string(path)?)
}

/// One index per line.
pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut s = String::new();
    for l in labels {
        writeln!(s, "{l}").unwrap();
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| l.parse().map_err(|_| Error::Parse(format!("bad label '{l}'"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mu_recursion() {
        assert_eq!(jumping_mean_mu(1), 0.0);
        assert_eq!(jumping_mean_mu(2), 0.125);
        assert_eq!(jumping_mean_mu(3), 0.3125);
        let mut mu = 0.0;
        for n in 2..60 {
            mu += n as f64 / 16.0;
            assert!((jumping_mean_mu(n) - mu).abs() < 1e-12);
        }
    }

    #[test]
    fn sigma_schedule() {
        assert_eq!(scaling_variance_sigma(1), 1.0);
        assert!((scaling_variance_sigma(2) - 1.168848).abs() < 1e-6);
        assert!((scaling_variance_sigma(48) - 2.689090).abs() < 1e-6);
        assert_eq!(scaling_variance_sigma(49), 1.0);
    }

    #[test]
    fn ar_starts_at_zero() {
        let s = gen_jumping_mean(3).unwrap();
        assert_eq!(s.len(), 5000);
        assert_eq!(s.dim(), 1);
        assert_eq!(s.series.get(0, 0), 0.0);
        assert_eq!(s.series.get(1, 0), 0.0);
        assert_ne!(s.series.get(2, 0), 0.0);
    }

    #[test]
    fn fixed_tau_labels_on_hundreds() {
        let s = gen_jumping_mean_with(1, 5000, &SegmentSchedule::fixed(100)).unwrap();
        assert_eq!(s.labels, (1..50).map(|n| 100 * n).collect::<Vec<_>>());
    }

    #[test]
    fn random_segments_respect_floor() {
        let sched = SegmentSchedule {
            base: 100,
            tau_std: 80.0,
            min_len: 50,
        };
        let s = gen_scaling_variance_with(9, 5000, &sched).unwrap();
        let mut prev = 0;
        for &l in &s.labels {
            assert!(l - prev >= 50);
            prev = l;
        }
    }

    #[test]
    fn mixture_means() {
        let mut rng = seeded(2);
        let n = 200_000;
        let a: f64 = (0..n).map(|_| mixture_a(&mut rng)).sum::<f64>() / n as f64;
        let b: f64 = (0..n).map(|_| mixture_b(&mut rng)).sum::<f64>() / n as f64;
        assert!(a.abs() < 0.01, "{a}");
        assert!((b + 0.6).abs() < 0.01, "{b}");
    }

    #[test]
    fn mixture_and_highdim_labels() {
        let s = gen_gaussian_mixtures(1, 1000).unwrap();
        assert_eq!(s.labels, vec![100, 200, 300, 400, 500, 600, 700, 800, 900]);
        let h = gen_highdim_variance_len(4, 1, 450).unwrap();
        assert_eq!(h.dim(), 4);
        assert_eq!(h.labels, vec![100, 200, 300, 400]);
    }

    #[test]
    fn highdim_variance_ratio() {
        let h = gen_highdim_variance_len(10, 5, 2000).unwrap();
        let var = |seg_even: bool| {
            let mut s = 0.0;
            let mut c = 0.0;
            for t in 0..2000 {
                if ((t / 100) % 2 == 0) == seg_even {
                    for v in h.series.row(t) {
                        s += v * v;
                        c += 1.0;
                    }
                }
            }
            s / c
        };
        let r = var(false) / var(true);
        assert!((r - 25.0 / 9.0).abs() < 0.2, "{r}");
    }

    #[test]
    fn blob_parameters() {
        assert_eq!(blob_correlation(1.0).unwrap(), 0.0);
        assert!((blob_correlation(6.0).unwrap() - 5.0 / 7.0).abs() < 1e-15);
        assert!(blob_correlation(0.5).is_err());
        assert!(gen_blobs(0.9, 10, 0).is_err());
    }

    #[test]
    fn blob_centroid() {
        let b = gen_blobs(6.0, 100_000, 4).unwrap();
        for j in 0..2 {
            let m: f64 = (0..b.rows()).map(|i| b.get(i, j)).sum::<f64>() / b.rows() as f64;
            assert!((m - 30.0).abs() < 0.5, "{m}");
        }
    }

    #[test]
    fn generators_are_reproducible() {
        assert_eq!(gen_jumping_mean(5).unwrap(), gen_jumping_mean(5).unwrap());
        assert_ne!(gen_jumping_mean(5).unwrap(), gen_jumping_mean(6).unwrap());
        assert_eq!(gen_blobs(2.0, 50, 1).unwrap(), gen_blobs(2.0, 50, 1).unwrap());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let s = gen_highdim_variance_len(3, 2, 250).unwrap();
        s.save(&p).unwrap();
        assert!(dir.path().join("s.labels").exists());
        assert_eq!(LabeledSeries::load(&p).unwrap(), s);
    }

    #[test]
    fn csv_errors() {
        assert!(parse_series_csv("").is_err());
        assert!(parse_series_csv("a,b\n0,1\n").is_err());
        assert!(parse_series_csv("t,x0\n0,1,2\n").is_err());
        assert!(parse_series_csv("t,x0\n0,abc\n").is_err());
        assert_eq!(parse_series_csv("t,x0,x1\n0,1,2\n1,3,4\n").unwrap().shape(), (2, 2));
    }

    #[test]
    fn label_validation() {
        assert!(LabeledSeries::new(Matrix::zeros(10, 1), vec![3, 3]).is_err());
        assert!(LabeledSeries::new(Matrix::zeros(10, 1), vec![10]).is_err());
    }
}
