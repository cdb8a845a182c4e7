use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use klcpd::datagen::{gen_highdim_variance_len, gen_jumping_mean_with, LabeledSeries, SegmentSchedule};
use klcpd::evalmod::{chrono_split, normalize, roc_auc, ToleranceMode};
use klcpd::kernels::{gram, Bandwidth, DeepKernel, RbfKernel};
use klcpd::mmdstats::{estimate, mmd2_unbiased, VarianceMethod};
use klcpd::models::{SeqDecoder, SeqEncoder};
use klcpd::pipeline::{score, Mode};
use klcpd::rng::seeded;
use klcpd::trainer::{fit, TrainConfig, TrainLog, TrainedModel};
use klcpd::tstest::{estimate_power_curve, FixedKernel};
use klcpd::Matrix;

fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = seeded(seed);
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

fn min_eigenvalue(m: &Matrix) -> f64 {
    SymmetricEigen::new(to_na(m)).eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Direct triple-sum form of the unbiased estimator.
fn mmd_oracle(x: &Matrix, y: &Matrix, s2: f64) -> f64 {
    let k = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum();
        (-d / (2.0 * s2)).exp()
    };
    let (m, n) = (x.rows(), y.rows());
    let mut xx = 0.0;
    let mut yy = 0.0;
    let mut xy = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                xx += k(x.row(i), x.row(j));
            }
        }
    }
    for i in 0..n {
        for j in 0..n {
            if i != j {
                yy += k(y.row(i), y.row(j));
            }
        }
    }
    for i in 0..m {
        for j in 0..n {
            xy += k(x.row(i), y.row(j));
        }
    }
    xx / (m * (m - 1)) as f64 + yy / (n * (n - 1)) as f64 - 2.0 * xy / (m * n) as f64
}

#[test]
fn matmul_agrees_with_nalgebra() {
    let a = random(7, 5, 1);
    let b = random(5, 3, 2);
    let ours = a.matmul(&b).unwrap();
    let theirs = to_na(&a) * to_na(&b);
    for i in 0..7 {
        for j in 0..3 {
            assert!((ours.get(i, j) - theirs[(i, j)]).abs() < 1e-12);
        }
    }
}

#[test]
fn deep_kernel_gram_is_psd() {
    let mut rng = seeded(3);
    let enc = SeqEncoder::with_scale(3, 6, 0.7, &mut rng).unwrap();
    let dec = SeqDecoder::new(6, 3, &mut rng).unwrap();
    let dk = DeepKernel::learned(Bandwidth::MedianHeuristic, enc, dec).unwrap();
    for seed in 0..5 {
        let w = random(20, 3, 10 + seed);
        let (g, _) = dk.eval_with_kernel(&w, &w).unwrap();
        assert!(min_eigenvalue(&g) >= -1e-8);
    }
    let x = random(30, 4, 99);
    assert!(min_eigenvalue(&gram(&x, &x, &RbfKernel::new(0.3).unwrap()).unwrap()) >= -1e-8);
}

#[test]
fn estimator_matches_direct_sum() {
    for seed in 0..5 {
        let x = random(12, 2, seed);
        let y = random(15, 2, 100 + seed).map(|v| v + 0.5);
        let x12 = x.clone();
        let s2 = 0.8;
        let k = RbfKernel::new(s2).unwrap();
        let y12 = y.slice_rows(0, 12);
        assert!((mmd2_unbiased(&x12, &y12, &k).unwrap() - mmd_oracle(&x12, &y12, s2)).abs() < 1e-13);
        let e = estimate(&x12, &y12, &k, VarianceMethod::Asymptotic, &mut seeded(0)).unwrap();
        assert!((e.value - mmd2_unbiased(&x12, &y12, &k).unwrap()).abs() < 1e-14);
        assert!(e.variance.unwrap() > 0.0);
    }
}

#[test]
fn power_decreases_with_smaller_alpha() {
    let p = |n: usize, rng: &mut klcpd::rng::Rng64| {
        Matrix::from_vec(n, 1, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
    };
    let q = |n: usize, rng: &mut klcpd::rng::Rng64| {
        Matrix::from_vec(n, 1, (0..n).map(|_| 0.5 + rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
    };
    let ch = FixedKernel(RbfKernel::new(1.0).unwrap());
    let pw = estimate_power_curve(&p, &q, &ch, 40, 100, &[0.01, 0.05, 0.1], 60, 7).unwrap();
    assert!(pw[0] <= pw[1] && pw[1] <= pw[2], "{pw:?}");
}

#[test]
fn dataspace_scores_peak_near_labels() {
    let noise = random(1500, 1, 8);
    let series = Matrix::from_vec(1500, 1, (0..1500).map(|t| noise.get(t, 0) + if (t / 150) % 2 == 1 { 3.0 } else { 0.0 }).collect()).unwrap();
    let labels: Vec<usize> = (1..10).map(|i| 150 * i).collect();
    let data = LabeledSeries::new(series, labels).unwrap();
    let s = score(&data.series, Mode::Dataspace, None, 25).unwrap();
    let auc = roc_auc(s.start, &s.scores, &data.labels, 10, ToleranceMode::Symmetric).unwrap();
    assert!(auc > 0.9, "{auc}");
}

#[test]
fn split_normalization_uses_training_range() {
    let data = gen_highdim_variance_len(3, 4, 1000).unwrap();
    let [train, val, test] = chrono_split(&data, [0.6, 0.2, 0.2]).unwrap();
    assert_eq!(train.len() + val.len() + test.len(), 1000);
    let (n, tf) = normalize(&train.series, &train.series).unwrap();
    for v in n.data() {
        assert!((0.0..=1.0).contains(v));
    }
    let back = tf.invert(&n).unwrap();
    for (a, b) in back.data().iter().zip(train.series.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    for l in test.labels.iter().chain(&val.labels) {
        assert!(*l < 200);
    }
}

#[test]
fn trained_model_file_round_trip_keeps_scores() {
    let data = gen_jumping_mean_with(1, 600, &SegmentSchedule::fixed(100)).unwrap();
    let cfg = TrainConfig {
        max_epochs: 2,
        window: 10,
        batch: 16,
        ..TrainConfig::default()
    };
    for mode in Mode::ALL {
        let out = fit(&data.series, mode, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        out.model.save(&path).unwrap();
        let back = TrainedModel::load(&path).unwrap();
        assert_eq!(back, out.model);
        assert_eq!(back.score(&data.series).unwrap(), out.model.score(&data.series).unwrap());
    }
}

#[test]
fn clipping_holds_after_training_and_log_is_ordered() {
    let data = gen_jumping_mean_with(2, 500, &SegmentSchedule::fixed(100)).unwrap();
    let cfg = TrainConfig {
        max_epochs: 3,
        window: 10,
        batch: 16,
        clip_c: 0.02,
        ..TrainConfig::default()
    };
    let out = fit(&data.series, Mode::Klcpd, &cfg).unwrap();
    let enc = out.model.kernel.encoder().unwrap();
    assert!(enc.params.max_abs() <= 0.02);
    let epochs: Vec<usize> = out.log.records.iter().map(|r| r.epoch).collect();
    assert!(epochs.windows(2).all(|p| p[0] < p[1]));
    let back = TrainLog::from_jsonl(&out.log.to_jsonl()).unwrap();
    assert_eq!(back.records.len(), out.log.records.len());
}

#[test]
fn labeled_series_file_round_trip() {
    let data = gen_jumping_mean_with(5, 400, &SegmentSchedule::fixed(100)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.csv");
    data.save(&p).unwrap();
    assert_eq!(LabeledSeries::load(&p).unwrap(), data);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn estimator_oracle_random_sets(seed in 0u64..10_000, m in 4usize..12, d in 1usize..4, s2 in 0.05f64..5.0) {
        let x = random(m, d, seed);
        let y = random(m, d, seed + 1).map(|v| 0.3 * v + 0.2);
        let k = RbfKernel::new(s2).unwrap();
        let ours = mmd2_unbiased(&x, &y, &k).unwrap();
        prop_assert!((ours - mmd_oracle(&x, &y, s2)).abs() < 1e-12);
        prop_assert!(ours.abs() <= 2.0);
    }

    #[test]
    fn gram_psd_for_random_points(seed in 0u64..10_000, n in 2usize..25, s2 in 0.05f64..10.0) {
        let x = random(n, 2, seed);
        let g = gram(&x, &x, &RbfKernel::new(s2).unwrap()).unwrap();
        prop_assert!(min_eigenvalue(&g) >= -1e-8);
    }
}
