//! Sliding window pairs and change-point scores under the four kernel
//! modes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::diffcore::Matrix;
use crate::error::{param_err, Error, Result};
use crate::kernels::{Bandwidth, DeepKernel};
use crate::mmdstats::mmd2_unbiased;
use crate::models::SeqBatch;

/// Default window length.
pub const DEFAULT_WINDOW: usize = 25;

/// How windows are embedded before the two-sample statistic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Raw observations with a median-heuristic RBF kernel.
    Dataspace,
    /// Encoder of an autoencoder trained on reconstruction only.
    Codespace,
    /// Kernel trained against noise-perturbed copies of the data.
    Negsample,
    /// Kernel trained against the learned generator.
    Klcpd,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Dataspace, Mode::Codespace, Mode::Negsample, Mode::Klcpd];

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Dataspace => "dataspace",
            Mode::Codespace => "codespace",
            Mode::Negsample => "negsample",
            Mode::Klcpd => "klcpd",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode '{s}'")))
    }

    pub fn needs_kernel(&self) -> bool {
        *self != Mode::Dataspace
    }
}

/// Past window `[t − w_l, t)` and current window `[t, t + w_r)`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowPair {
    pub t: usize,
    pub left: Matrix,
    pub right: Matrix,
}

fn check_len(len: usize, w_l: usize, w_r: usize) -> Result<()> {
    if w_l == 0 || w_r == 0 {
        return param_err("window lengths must be positive");
    }
    if len < w_l + w_r {
        return param_err(format!("series of length {len} is shorter than windows {w_l}+{w_r}"));
    }
    Ok(())
}

/// Pairs at `t = w_l, w_l + stride, …` up to `T − w_r`.
pub fn sliding_pairs(series: &Matrix, w_l: usize, w_r: usize, stride: usize) -> Result<Vec<WindowPair>> {
    check_len(series.rows(), w_l, w_r)?;
    if stride == 0 {
        return param_err("stride must be at least 1");
    }
    Ok((w_l..=series.rows() - w_r)
        .step_by(stride)
        .map(|t| WindowPair {
            t,
            left: series.slice_rows(t - w_l, t),
            right: series.slice_rows(t, t + w_r),
        })
        .collect())
}

/// Scores for `t = start, start + 1, …`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSeries {
    pub start: usize,
    pub scores: Vec<f64>,
}

impl ScoreSeries {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Time index of the largest score (earliest on ties).
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &s) in self.scores.iter().enumerate() {
            if best.map_or(true, |(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        best.map(|(i, _)| self.start + i)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,score\n");
        for (i, v) in self.scores.iter().enumerate() {
            writeln!(s, "{},{v}", self.start + i).unwrap();
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some("t,score") {
            return Err(Error::Parse("score file must start with 't,score'".into()));
        }
        let mut start = None;
        let mut scores = Vec::new();
        for line in lines {
            let (t, v) = line
                .split_once(',')
                .ok_or_else(|| Error::Parse(format!("bad score row '{line}'")))?;
            let t: usize = t.trim().parse().map_err(|_| Error::Parse(format!("bad index '{t}'")))?;
            let v: f64 = v.trim().parse().map_err(|_| Error::Parse(format!("bad score '{v}'")))?;
            let s0 = *start.get_or_insert(t);
            if t != s0 + scores.len() {
                return Err(Error::Parse(format!("score indices not consecutive at {t}")));
            }
            scores.push(v);
        }
        Ok(Self {
            start: start.unwrap_or(0),
            scores,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv(&fs::read_to_string(path)?)
    }
}

/// Embeds every length-`w` window of the series once; entry `s` holds the
/// `w` embedded samples of window `[s, s + w)`.
fn embed_all(series: &Matrix, dk: &DeepKernel, w: usize) -> Result<Vec<Matrix>> {
    let n = series.rows() - w + 1;
    match dk.encoder() {
        None => Ok((0..n).map(|s| series.slice_rows(s, s + w)).collect()),
        Some(enc) => {
            if enc.d_in() != series.cols() {
                return Err(Error::Shape(format!(
                    "encoder expects {}-dim input, series has {}",
                    enc.d_in(),
                    series.cols()
                )));
            }
            let windows: Vec<Matrix> = (0..n).map(|s| series.slice_rows(s, s + w)).collect();
            let refs: Vec<&Matrix> = windows.iter().collect();
            let steps = enc.encode_batch(&SeqBatch::from_windows(&refs)?)?;
            (0..n)
                .map(|s| Matrix::from_rows(&steps.iter().map(|m| m.row(s)).collect::<Vec<_>>()))
                .collect()
        }
    }
}

/// Two-window MMD score at every `t ∈ [w, T − w]` under a deep kernel.
pub fn score_with_kernel(series: &Matrix, dk: &DeepKernel, w: usize) -> Result<ScoreSeries> {
    check_len(series.rows(), w, w)?;
    if w < 2 {
        return param_err("window length must be at least 2");
    }
    let emb = embed_all(series, dk, w)?;
    let mut scores = Vec::with_capacity(series.rows() - 2 * w + 1);
    for t in w..=series.rows() - w {
        let (x, y) = (&emb[t - w], &emb[t]);
        let k = dk.bandwidth.resolve(&x.vstack(y)?)?;
        scores.push(mmd2_unbiased(x, y, &k)?);
    }
    Ok(ScoreSeries { start: w, scores })
}

/// Scores a series under `mode`; learned modes need `dk`.
pub fn score(series: &Matrix, mode: Mode, dk: Option<&DeepKernel>, w: usize) -> Result<ScoreSeries> {
    match (mode, dk) {
        (Mode::Dataspace, _) => score_with_kernel(series, &DeepKernel::identity(Bandwidth::MedianHeuristic), w),
        (_, Some(dk)) if dk.encoder().is_some() => score_with_kernel(series, dk, w),
        (_, _) => Err(Error::Config(format!("mode {} needs a trained encoder", mode.name()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{deep_eval, RbfKernel};
    use crate::mmdstats::mmd2_from_grams;
    use crate::models::{SeqDecoder, SeqEncoder};
    use crate::rng::seeded;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn noise(len: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = seeded(seed);
        Matrix::from_vec(len, d, (0..len * d).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    #[test]
    fn pair_counts() {
        let s = Matrix::zeros(50, 1);
        let p = sliding_pairs(&s, 25, 25, 1).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].t, 25);
        assert_eq!(sliding_pairs(&Matrix::zeros(51, 1), 25, 25, 1).unwrap().len(), 2);
        assert_eq!(sliding_pairs(&s, 25, 25, 50).unwrap().len(), 1);
        assert_eq!(sliding_pairs(&Matrix::zeros(100, 1), 10, 20, 7).unwrap().len(), (100 - 30) / 7 + 1);
        assert!(sliding_pairs(&Matrix::zeros(49, 1), 25, 25, 1).is_err());
        assert!(sliding_pairs(&s, 25, 25, 0).is_err());
    }

    #[test]
    fn pair_windows_are_adjacent() {
        let s = Matrix::column(&(0..12).map(f64::from).collect::<Vec<_>>());
        let p = sliding_pairs(&s, 3, 4, 2).unwrap();
        assert_eq!(p[1].t, 5);
        assert_eq!(p[1].left.data(), &[2.0, 3.0, 4.0]);
        assert_eq!(p[1].right.data(), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn constant_series_scores_zero() {
        let s = Matrix::filled(80, 2, 0.7);
        let out = score(&s, Mode::Dataspace, None, 10).unwrap();
        assert_eq!(out.len(), 80 - 20 + 1);
        assert!(out.scores.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_series_learned_scores_flat_and_nonpositive() {
        // Recurrent states still move inside a window, so the two identical
        // embedded sets are not degenerate and the estimate sits below 0.
        let s = Matrix::filled(80, 2, 0.7);
        let mut rng = seeded(1);
        let enc = SeqEncoder::new(2, 3, &mut rng).unwrap();
        let dec = SeqDecoder::new(3, 2, &mut rng).unwrap();
        let dk = DeepKernel::learned(Bandwidth::MedianHeuristic, enc, dec).unwrap();
        for mode in [Mode::Codespace, Mode::Negsample, Mode::Klcpd] {
            let out = score(&s, mode, Some(&dk), 10).unwrap();
            assert!(out.scores.iter().all(|&v| v == out.scores[0] && v <= 0.0), "{mode:?}");
        }
    }

    #[test]
    fn step_series_peaks_at_jump() {
        let s = Matrix::column(&(0..200).map(|t| if t < 100 { 0.0 } else { 5.0 }).collect::<Vec<_>>());
        let out = score(&s, Mode::Dataspace, None, 25).unwrap();
        let am = out.argmax().unwrap();
        assert!((95..=105).contains(&am), "{am}");
    }

    #[test]
    fn dataspace_matches_identity_deep_kernel() {
        let s = noise(60, 2, 3);
        let out = score(&s, Mode::Dataspace, None, 10).unwrap();
        let dk = DeepKernel::identity(Bandwidth::MedianHeuristic);
        for (i, t) in (10..=50).enumerate() {
            let x = s.slice_rows(t - 10, t);
            let y = s.slice_rows(t, t + 10);
            let kxy = deep_eval(&x, &y, &dk).unwrap();
            let (_, k) = dk.eval_with_kernel(&x, &y).unwrap();
            let kxx = crate::kernels::gram(&x, &x, &k).unwrap();
            let kyy = crate::kernels::gram(&y, &y, &k).unwrap();
            assert!((out.scores[i] - mmd2_from_grams(&kxx, &kyy, &kxy)).abs() < 1e-12);
        }
    }

    #[test]
    fn learned_mode_uses_encoder_states() {
        let s = noise(40, 2, 4);
        let mut rng = seeded(2);
        let enc = SeqEncoder::with_scale(2, 3, 0.5, &mut rng).unwrap();
        let dec = SeqDecoder::new(3, 2, &mut rng).unwrap();
        let dk = DeepKernel::learned(Bandwidth::Fixed(RbfKernel::new(0.3).unwrap()), enc.clone(), dec).unwrap();
        let out = score(&s, Mode::Klcpd, Some(&dk), 8).unwrap();
        let t = 17;
        let x = enc.encode_window(&s.slice_rows(t - 8, t)).unwrap().states;
        let y = enc.encode_window(&s.slice_rows(t, t + 8)).unwrap().states;
        let direct = mmd2_unbiased(&x, &y, &RbfKernel::new(0.3).unwrap()).unwrap();
        assert!((out.scores[t - 8] - direct).abs() < 1e-12);
    }

    #[test]
    fn missing_kernel_is_config_error() {
        let s = noise(40, 1, 5);
        assert!(matches!(score(&s, Mode::Klcpd, None, 8), Err(Error::Config(_))));
        let ident = DeepKernel::identity(Bandwidth::MedianHeuristic);
        assert!(matches!(score(&s, Mode::Codespace, Some(&ident), 8), Err(Error::Config(_))));
    }

    #[test]
    fn argmax_invariant_under_scaling() {
        let mut s = noise(150, 1, 6);
        for t in 75..150 {
            *s.row_mut(t).first_mut().unwrap() += 2.0;
        }
        let base = score(&s, Mode::Dataspace, None, 20).unwrap().argmax();
        for a in [0.01, 0.5, 3.0, 100.0] {
            assert_eq!(score(&s.scale(a), Mode::Dataspace, None, 20).unwrap().argmax(), base);
        }
    }

    #[test]
    fn csv_round_trip() {
        let s = ScoreSeries {
            start: 25,
            scores: vec![0.1, -0.25, 1.0 / 3.0],
        };
        let text = s.to_csv();
        assert!(text.starts_with("t,score\n25,0.1\n"));
        assert_eq!(ScoreSeries::from_csv(&text).unwrap(), s);
        assert!(ScoreSeries::from_csv("t,score\n1,0\n3,0\n").is_err());
    }

    #[test]
    fn mode_names() {
        for m in Mode::ALL {
            assert_eq!(Mode::parse(m.name()).unwrap(), m);
        }
        assert!(Mode::parse("other").is_err());
    }
}
