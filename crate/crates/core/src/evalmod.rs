//! Normalization, chronological splits and tolerance-aware ROC AUC.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::datagen::LabeledSeries;
use crate::diffcore::Matrix;
use crate::error::{param_err, Error, Result};

/// Which timesteps around a label count as positives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ToleranceMode {
    /// `[label, label + tol]`: detection may lag the change.
    #[default]
    Forward,
    /// `[label − tol, label + tol]`.
    Symmetric,
}

impl ToleranceMode {
    pub fn name(&self) -> &'static str {
        match self {
            ToleranceMode::Forward => "forward",
            ToleranceMode::Symmetric => "symmetric",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(ToleranceMode::Forward),
            "symmetric" => Ok(ToleranceMode::Symmetric),
            other => Err(Error::Config(format!("unknown tolerance mode '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub tolerance: usize,
    pub tolerance_mode: ToleranceMode,
    /// Train, validation and test fractions.
    pub fractions: [f64; 3],
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tolerance: 25,
            tolerance_mode: ToleranceMode::Forward,
            fractions: [0.6, 0.2, 0.2],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        check_fractions(&self.fractions)
    }
}

fn check_fractions(f: &[f64; 3]) -> Result<()> {
    if f.iter().any(|&v| !(v >= 0.0)) || ((f[0] + f[1] + f[2]) - 1.0).abs() > 1e-9 {
        return param_err(format!("split fractions {f:?} must be non-negative and sum to 1"));
    }
    Ok(())
}

/// Per-dimension affine map `x ↦ (x − min)/(max − min)`; constant
/// dimensions map to 0.5.
#[derive(Clone, Debug, PartialEq)]
pub struct MinMaxTransform {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxTransform {
    pub fn fit(series: &Matrix) -> Result<Self> {
        if series.rows() == 0 || series.cols() == 0 {
            return param_err("cannot fit normalization on an empty series");
        }
        let d = series.cols();
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for row in series.row_iter() {
            for j in 0..d {
                min[j] = min[j].min(row[j]);
                max[j] = max[j].max(row[j]);
            }
        }
        Ok(Self { min, max })
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn apply(&self, series: &Matrix) -> Result<Matrix> {
        self.check(series)?;
        let mut out = series.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                let span = self.max[j] - self.min[j];
                *v = if span > 0.0 { (*v - self.min[j]) / span } else { 0.5 };
            }
        }
        Ok(out)
    }

    /// Inverse map; constant dimensions return their fitted value.
    pub fn invert(&self, series: &Matrix) -> Result<Matrix> {
        self.check(series)?;
        let mut out = series.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                let span = self.max[j] - self.min[j];
                *v = if span > 0.0 { self.min[j] + *v * span } else { self.min[j] };
            }
        }
        Ok(out)
    }

    fn check(&self, series: &Matrix) -> Result<()> {
        if series.cols() != self.dim() {
            return Err(Error::Shape(format!(
                "normalization fitted on {} dims applied to {}",
                self.dim(),
                series.cols()
            )));
        }
        Ok(())
    }
}

/// Fits min-max normalization on `fit_on` and applies it to `series`.
pub fn normalize(series: &Matrix, fit_on: &Matrix) -> Result<(Matrix, MinMaxTransform)> {
    let tf = MinMaxTransform::fit(fit_on)?;
    Ok((tf.apply(series)?, tf))
}

/// Contiguous train/validation/test parts with labels shifted to local
/// indices. Part lengths are `round(T·f_train)`, `round(T·(f_train+f_val))`
/// boundaries.
pub fn chrono_split(data: &LabeledSeries, fractions: [f64; 3]) -> Result<[LabeledSeries; 3]> {
    check_fractions(&fractions)?;
    let t = data.len();
    if t == 0 {
        return param_err("cannot split an empty series");
    }
    let b1 = (t as f64 * fractions[0]).round() as usize;
    let b2 = ((t as f64 * (fractions[0] + fractions[1])).round() as usize).clamp(b1, t);
    let part = |lo: usize, hi: usize| -> Result<LabeledSeries> {
        let labels = data
            .labels
            .iter()
            .filter(|&&l| l >= lo && l < hi)
            .map(|&l| l - lo)
            .collect();
        LabeledSeries::new(data.series.slice_rows(lo, hi), labels)
    };
    Ok([part(0, b1)?, part(b1, b2)?, part(b2, t)?])
}

/// Positive flags for timesteps `start..start+len`.
pub fn positive_mask(start: usize, len: usize, labels: &[usize], tolerance: usize, mode: ToleranceMode) -> Vec<bool> {
    (start..start + len)
        .map(|t| {
            labels.iter().any(|&l| {
                let after = t >= l && t - l <= tolerance;
                let before = mode == ToleranceMode::Symmetric && t < l && l - t <= tolerance;
                after || before
            })
        })
        .collect()
}

/// Mann–Whitney AUC: probability a positive outranks a negative, ties
/// counted as one half.
pub fn auc_from_mask(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Shape(format!("{} scores but {} flags", scores.len(), positive.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("score series contains non-finite values".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc(format!("{n_pos} positives and {n_neg} negatives")));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Midranks over tied groups.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = 0.5 * ((i + 1) + (j + 1)) as f64;
        for &k in &idx[i..=j] {
            if positive[k] {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let np = n_pos as f64;
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// AUC of `scores` (indexed from `start`) against labels under a delay
/// tolerance.
pub fn roc_auc(
    start: usize,
    scores: &[f64],
    labels: &[usize],
    tolerance: usize,
    mode: ToleranceMode,
) -> Result<f64> {
    let mask = positive_mask(start, scores.len(), labels, tolerance, mode);
    auc_from_mask(scores, &mask)
}

/// Flat `key=value` metrics report, one pair per line in key order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub entries: BTreeMap<String, String>,
}

impl MetricsReport {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            writeln!(s, "{k}={v}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut r = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("expected key=value, got '{line}'")))?;
            r.set(k.trim(), v.trim());
        }
        Ok(r)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn minmax_basic() {
        let s = Matrix::from_rows(&[[2.0, 7.0], [4.0, 7.0], [3.0, 7.0]]).unwrap();
        let (n, tf) = normalize(&s, &s).unwrap();
        assert_eq!(n.data(), &[0.0, 0.5, 1.0, 0.5, 0.5, 0.5]);
        let back = tf.invert(&n).unwrap();
        assert!(back.sub(&s).unwrap().max_abs() < 1e-12);
        assert!(MinMaxTransform::fit(&Matrix::zeros(0, 1)).is_err());
    }

    #[test]
    fn fit_on_training_only() {
        let train = Matrix::column(&[0.0, 10.0]);
        let test = Matrix::column(&[20.0]);
        let (n, _) = normalize(&test, &train).unwrap();
        assert_eq!(n.get(0, 0), 2.0);
    }

    #[test]
    fn split_lengths_and_offsets() {
        let s = LabeledSeries::new(Matrix::zeros(100, 1), vec![10, 70, 95]).unwrap();
        let [a, b, c] = chrono_split(&s, [0.6, 0.2, 0.2]).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (60, 20, 20));
        assert_eq!(a.labels, vec![10]);
        assert_eq!(b.labels, vec![10]);
        assert_eq!(c.labels, vec![15]);
        assert!(chrono_split(&s, [0.5, 0.2, 0.2]).is_err());
    }

    #[test]
    fn auc_extremes() {
        let mask = [false, true, false, true];
        assert_eq!(auc_from_mask(&[0.1, 0.9, 0.2, 0.8], &mask).unwrap(), 1.0);
        assert_eq!(auc_from_mask(&[0.9, 0.1, 0.8, 0.2], &mask).unwrap(), 0.0);
        assert_eq!(auc_from_mask(&[0.3; 4], &mask).unwrap(), 0.5);
        assert!(matches!(auc_from_mask(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedAuc(_))));
    }

    #[test]
    fn tolerance_windows() {
        let f = positive_mask(0, 10, &[4], 2, ToleranceMode::Forward);
        assert_eq!(f.iter().filter(|&&p| p).count(), 3);
        assert!(f[4] && f[6] && !f[3] && !f[7]);
        let s = positive_mask(0, 10, &[4], 2, ToleranceMode::Symmetric);
        assert!(s[2] && s[6] && !s[1] && !s[7]);
        let off = positive_mask(5, 5, &[4], 2, ToleranceMode::Forward);
        assert_eq!(off, vec![true, true, false, false, false]);
    }

    #[test]
    fn report_round_trip() {
        let mut r = MetricsReport::default();
        r.set("auc", 0.75);
        r.set("dataset", "jumping-mean");
        let t = r.to_text();
        assert_eq!(t, "auc=0.75\ndataset=jumping-mean\n");
        assert_eq!(MetricsReport::from_text(&t).unwrap(), r);
        assert!(MetricsReport::from_text("novalue").is_err());
    }

    fn brute_auc(scores: &[f64], mask: &[bool]) -> f64 {
        let mut s = 0.0;
        let mut n = 0.0;
        for (i, &pi) in mask.iter().enumerate() {
            for (j, &pj) in mask.iter().enumerate() {
                if pi && !pj {
                    n += 1.0;
                    s += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        s / n
    }

    proptest! {
        #[test]
        fn auc_matches_pair_count(scores in proptest::collection::vec(0u8..6, 4..40), seed in 0usize..1000) {
            let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
            let n = scores.len();
            let mask: Vec<bool> = (0..n).map(|i| (i * 7 + seed) % 3 == 0).collect();
            prop_assume!(mask.iter().any(|&m| m) && mask.iter().any(|&m| !m));
            let a = auc_from_mask(&scores, &mask).unwrap();
            prop_assert!((a - brute_auc(&scores, &mask)).abs() < 1e-12);
            let b = auc_from_mask(&scores.iter().map(|s| (s * 0.5).exp()).collect::<Vec<_>>(), &mask).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn auc_of_negated_scores_complements(scores in proptest::collection::vec(-100.0f64..100.0, 4..40)) {
            let n = scores.len();
            let mask: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let a = auc_from_mask(&scores, &mask).unwrap();
            let b = auc_from_mask(&neg, &mask).unwrap();
            let mut sorted = scores.clone();
            sorted.sort_by(f64::total_cmp);
            prop_assume!(sorted.windows(2).all(|w| w[0] < w[1]));
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }

        #[test]
        fn tolerance_is_monotone(labels in proptest::collection::btree_set(0usize..200, 1..6), tol in 0usize..30) {
            let labels: Vec<usize> = labels.into_iter().collect();
            for mode in [ToleranceMode::Forward, ToleranceMode::Symmetric] {
                let a = positive_mask(0, 200, &labels, tol, mode).iter().filter(|&&p| p).count();
                let b = positive_mask(0, 200, &labels, tol + 1, mode).iter().filter(|&&p| p).count();
                prop_assert!(a <= b);
            }
        }
    }
}
