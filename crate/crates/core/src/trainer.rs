//! Training of the deep kernel against the auxiliary generator, the two
//! ablation baselines, hyperparameter search and model checkpoints.

use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datagen::LabeledSeries;
use crate::diffcore::{AdamConfig, Checkpoint, Graph, Matrix, NodeId, ParamStore, RmsPropConfig};
use crate::error::{param_err, Error, Result};
use crate::evalmod::{chrono_split, roc_auc, EvalConfig, MinMaxTransform, ToleranceMode};
use crate::kernels::{median_heuristic, Bandwidth, DeepKernel, RbfKernel};
use crate::models::{Generator, NoiseDist, SeqBatch, SeqDecoder, SeqEncoder};
use crate::pipeline::{score, Mode, ScoreSeries};
use crate::rng::{derived, Rng64};

const INIT_STREAM: u64 = 1;
const DATA_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Step size of both optimizers.
    pub lr: f64,
    /// Encoder weights are clamped to `[-clip_c, clip_c]` after each kernel step.
    pub clip_c: f64,
    /// Kernel steps per generator step.
    pub n_c: usize,
    pub lambda: f64,
    pub beta: f64,
    /// Stop once the epoch-mean surrogate MMD is at most this value.
    pub epsilon: f64,
    pub max_epochs: usize,
    /// Window pairs per minibatch.
    pub batch: usize,
    pub window: usize,
    pub d_h: usize,
    pub seed: u64,
    pub noise: NoiseDist,
    /// Negative-sample noise level as a multiple of the per-dimension std.
    pub neg_noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            clip_c: 0.01,
            n_c: 5,
            lambda: 1.0,
            beta: 1e-1,
            epsilon: 1e-3,
            max_epochs: 30,
            batch: 64,
            window: 25,
            d_h: 10,
            seed: 0,
            noise: NoiseDist::Uniform,
            neg_noise: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return param_err(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.clip_c > 0.0) {
            return param_err(format!("clip_c must be positive, got {}", self.clip_c));
        }
        if self.n_c == 0 {
            return param_err("n_c must be at least 1");
        }
        if !(self.lambda >= 0.0) || !(self.beta >= 0.0) {
            return param_err("lambda and beta must be non-negative");
        }
        if !(self.epsilon > 0.0) {
            return param_err(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.batch == 0 || self.d_h == 0 || self.window < 2 {
            return param_err("batch and d_h must be positive and window at least 2");
        }
        if !(self.neg_noise >= 0.0) {
            return param_err("neg_noise must be non-negative");
        }
        Ok(())
    }

    /// Resolved settings as `(key, value)` pairs, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr", self.lr.to_string()),
            ("clip_c", self.clip_c.to_string()),
            ("n_c", self.n_c.to_string()),
            ("lambda", self.lambda.to_string()),
            ("beta", self.beta.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("batch", self.batch.to_string()),
            ("window", self.window.to_string()),
            ("d_h", self.d_h.to_string()),
            ("seed", self.seed.to_string()),
            ("noise", self.noise.name().to_string()),
            ("neg_noise", self.neg_noise.to_string()),
        ]
    }

    /// Sets one field from its key. Unknown keys return `Ok(false)`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value '{v}' for {key}")))
        }
        match key {
            "lr" => self.lr = num(key, value)?,
            "clip_c" => self.clip_c = num(key, value)?,
            "n_c" => self.n_c = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "epsilon" => self.epsilon = num(key, value)?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "window" => self.window = num(key, value)?,
            "d_h" => self.d_h = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "noise" => self.noise = NoiseDist::parse(value.trim())?,
            "neg_noise" => self.neg_noise = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Past windows `[s, s + w)` and current windows `[s + w, s + 2w)` for a
/// set of start indices.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub starts: Vec<usize>,
    pub past: SeqBatch,
    pub current: SeqBatch,
}

impl PairBatch {
    pub fn new(series: &Matrix, starts: &[usize], w: usize) -> Result<Self> {
        if starts.is_empty() {
            return param_err("empty minibatch");
        }
        if let Some(&s) = starts.iter().find(|&&s| s + 2 * w > series.rows()) {
            return param_err(format!("pair at {s} with window {w} overruns series of length {}", series.rows()));
        }
        let gather = |offset: usize| SeqBatch {
            steps: (0..w)
                .map(|k| series.select_rows(&starts.iter().map(|s| s + offset + k).collect::<Vec<_>>()))
                .collect(),
        };
        Ok(Self {
            starts: starts.to_vec(),
            past: gather(0),
            current: gather(w),
        })
    }

    pub fn size(&self) -> usize {
        self.starts.len()
    }

    pub fn window(&self) -> usize {
        self.past.len()
    }
}

/// Uniform start indices of window pairs that fit in a series of `len`.
pub fn sample_starts(len: usize, w: usize, batch: usize, rng: &mut Rng64) -> Result<Vec<usize>> {
    if len < 2 * w {
        return param_err(format!("series of length {len} holds no window pair of width {w}"));
    }
    let hi = len - 2 * w;
    Ok((0..batch).map(|_| rng.gen_range(0..=hi)).collect())
}

/// Where the surrogate sample `Z` comes from.
pub enum Surrogate<'a> {
    /// Drawn inside the graph so gradients reach the generator.
    Generated { gen: &'a Generator, omega: &'a Matrix },
    /// Fixed samples, constant for differentiation.
    Given(&'a SeqBatch),
}

/// Graph nodes of the three objective terms and their combination.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveNodes {
    /// `mmd_pg − λ·mmd_xx − β·recon`.
    pub total: NodeId,
    pub mmd_pg: NodeId,
    pub mmd_xx: NodeId,
    pub recon: NodeId,
}

/// Median-heuristic bandwidth per batch member over the pooled samples of
/// two step-major encodings.
pub fn pooled_bandwidths(left: &[&Matrix], right: &[&Matrix]) -> Result<Vec<f64>> {
    let b = left.first().map_or(0, |m| m.rows());
    (0..b)
        .map(|i| {
            let rows: Vec<&[f64]> = left.iter().chain(right).map(|m| m.row(i)).collect();
            median_heuristic(&Matrix::from_rows(&rows)?)
        })
        .collect()
}

/// Records the batch-mean objective
/// `M(f(X_r), f(Z)) − λ M(f(X_l), f(X_r)) − β E‖ν − F(f(ν))‖²` with `ν` over
/// `X_l`, `X_r` and `Z`.
///
/// Bandwidths default to the median heuristic on `f(X_l) ∪ f(X_r)` per pair
/// and are constants for differentiation. Returns the nodes and bandwidths.
pub fn build_objective(
    g: &mut Graph,
    encoder: &SeqEncoder,
    decoder: &SeqDecoder,
    batch: &PairBatch,
    surrogate: Surrogate<'_>,
    lambda: f64,
    beta: f64,
    sigma2: Option<&[f64]>,
) -> Result<(ObjectiveNodes, Vec<f64>)> {
    let xl = batch.past.inputs(g);
    let xr = batch.current.inputs(g);
    let z = match surrogate {
        Surrogate::Generated { gen, omega } => gen.generate_graph(g, &batch.past, &batch.current, omega)?,
        Surrogate::Given(zb) => {
            if zb.len() != batch.window() || zb.batch_size() != batch.size() {
                return Err(Error::Shape("surrogate batch does not match the window pairs".into()));
            }
            zb.inputs(g)
        }
    };
    let hl = encoder.encode_graph(g, &xl)?;
    let hr = encoder.encode_graph(g, &xr)?;
    let hz = encoder.encode_graph(g, &z)?;
    let s2 = match sigma2 {
        Some(s) => s.to_vec(),
        None => {
            let l: Vec<&Matrix> = hl.iter().map(|&n| g.value(n)).collect();
            let r: Vec<&Matrix> = hr.iter().map(|&n| g.value(n)).collect();
            pooled_bandwidths(&l, &r)?
        }
    };
    let pg = g.mmd2(&hr, &hz, &s2)?;
    let mmd_pg = g.mean(pg);
    let xx = g.mmd2(&hl, &hr, &s2)?;
    let mmd_xx = g.mean(xx);

    let mut acc: Option<NodeId> = None;
    for (inputs, hidden) in [(&xl, &hl), (&xr, &hr), (&z, &hz)] {
        let out = decoder.decode_graph(g, hidden)?;
        for (&o, &x) in out.iter().zip(inputs.iter()) {
            let diff = g.sub(o, x)?;
            let ss = g.sum_squares(diff);
            acc = Some(match acc {
                None => ss,
                Some(a) => g.add(a, ss)?,
            });
        }
    }
    let denom = (3 * batch.window() * batch.size()) as f64;
    let recon = g.scale(acc.expect("non-empty window"), 1.0 / denom);

    let neg_xx = g.scale(mmd_xx, -lambda);
    let neg_recon = g.scale(recon, -beta);
    let partial = g.add(mmd_pg, neg_xx)?;
    let total = g.add(partial, neg_recon)?;
    Ok((
        ObjectiveNodes {
            total,
            mmd_pg,
            mmd_xx,
            recon,
        },
        s2,
    ))
}

/// Objective terms seen by one update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub objective: f64,
    pub mmd_pg: f64,
    pub mmd_xx: f64,
    pub recon: f64,
}

fn ensure_finite_grads(stores: &[&ParamStore]) -> Result<()> {
    for s in stores {
        if s.flatten_grads().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("non-finite gradient, update skipped".into()));
        }
    }
    Ok(())
}

/// One RMSProp ascent step on the encoder and decoder, then clipping of the
/// encoder. The generator is not touched.
pub fn kernel_step(
    dk: &mut DeepKernel,
    batch: &PairBatch,
    surrogate: Surrogate<'_>,
    cfg: &TrainConfig,
) -> Result<StepStats> {
    let (enc, dec) = dk
        .learned_parts_mut()
        .ok_or_else(|| Error::Config("kernel step needs a learned encoder".into()))?;
    let mut g = Graph::new();
    let (nodes, _) = build_objective(&mut g, enc, dec, batch, surrogate, cfg.lambda, cfg.beta, None)?;
    let grads = g.backward(nodes.total)?;
    enc.params.load_grads(&grads);
    dec.params.load_grads(&grads);
    ensure_finite_grads(&[&enc.params, &dec.params])?;
    let rms = RmsPropConfig::default();
    enc.params.rmsprop_step(cfg.lr, true, rms)?;
    dec.params.rmsprop_step(cfg.lr, true, rms)?;
    enc.params.clip(cfg.clip_c)?;
    Ok(StepStats {
        objective: g.scalar(nodes.total),
        mmd_pg: g.scalar(nodes.mmd_pg),
        mmd_xx: g.scalar(nodes.mmd_xx),
        recon: g.scalar(nodes.recon),
    })
}

/// Batch-mean surrogate MMD between `f(X_r)` and `f(Z)` for in-graph `Z`.
fn surrogate_mmd(
    g: &mut Graph,
    gen: &Generator,
    encoder: &SeqEncoder,
    batch: &PairBatch,
    omega: &Matrix,
) -> Result<NodeId> {
    let hl = encoder.encode_batch(&batch.past)?;
    let hr = encoder.encode_batch(&batch.current)?;
    let s2 = pooled_bandwidths(&hl.iter().collect::<Vec<_>>(), &hr.iter().collect::<Vec<_>>())?;
    let z = gen.generate_graph(g, &batch.past, &batch.current, omega)?;
    let hz = encoder.encode_graph(g, &z)?;
    let hr_nodes: Vec<NodeId> = hr.into_iter().map(|m| g.input(m)).collect();
    let pg = g.mmd2(&hr_nodes, &hz, &s2)?;
    Ok(g.mean(pg))
}

/// One Adam descent step on the generator against the surrogate MMD. The
/// kernel is not touched. Returns the surrogate MMD before the step.
pub fn generator_step(
    gen: &mut Generator,
    dk: &DeepKernel,
    batch: &PairBatch,
    omega: &Matrix,
    cfg: &TrainConfig,
) -> Result<f64> {
    let enc = dk
        .encoder()
        .ok_or_else(|| Error::Config("generator step needs a learned encoder".into()))?;
    let mut g = Graph::new();
    let loss = surrogate_mmd(&mut g, gen, enc, batch, omega)?;
    let grads = g.backward(loss)?;
    gen.params.load_grads(&grads);
    ensure_finite_grads(&[&gen.params])?;
    gen.params.adam_step(cfg.lr, AdamConfig::default())?;
    Ok(g.scalar(loss))
}

/// One Adam descent step of the autoencoder on reconstruction error of both
/// windows. Returns the error before the step.
pub fn autoencoder_step(dk: &mut DeepKernel, batch: &PairBatch, cfg: &TrainConfig) -> Result<f64> {
    let (enc, dec) = dk
        .learned_parts_mut()
        .ok_or_else(|| Error::Config("autoencoder step needs a learned encoder".into()))?;
    let mut g = Graph::new();
    let mut acc: Option<NodeId> = None;
    for sb in [&batch.past, &batch.current] {
        let x = sb.inputs(&mut g);
        let h = enc.encode_graph(&mut g, &x)?;
        let out = dec.decode_graph(&mut g, &h)?;
        for (&o, &xi) in out.iter().zip(&x) {
            let diff = g.sub(o, xi)?;
            let ss = g.sum_squares(diff);
            acc = Some(match acc {
                None => ss,
                Some(a) => g.add(a, ss)?,
            });
        }
    }
    let loss = g.scale(acc.expect("non-empty window"), 1.0 / (2 * batch.window() * batch.size()) as f64);
    let grads = g.backward(loss)?;
    enc.params.load_grads(&grads);
    dec.params.load_grads(&grads);
    ensure_finite_grads(&[&enc.params, &dec.params])?;
    enc.params.adam_step(cfg.lr, AdamConfig::default())?;
    dec.params.adam_step(cfg.lr, AdamConfig::default())?;
    Ok(g.scalar(loss))
}

/// `X_r` plus Gaussian noise with per-dimension standard deviation `scale`.
pub fn negative_samples(current: &SeqBatch, scale: &[f64], rng: &mut Rng64) -> SeqBatch {
    SeqBatch {
        steps: current
            .steps
            .iter()
            .map(|m| {
                let mut out = m.clone();
                for i in 0..out.rows() {
                    for (v, s) in out.row_mut(i).iter_mut().zip(scale) {
                        *v += s * rng.sample::<f64, _>(StandardNormal);
                    }
                }
                out
            })
            .collect(),
    }
}

fn column_std(series: &Matrix) -> Vec<f64> {
    let n = series.rows() as f64;
    (0..series.cols())
        .map(|j| {
            let mean = series.row_iter().map(|r| r[j]).sum::<f64>() / n;
            (series.row_iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect()
}

/// Epoch means of the objective terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mmd_pg: f64,
    pub mmd_xx: f64,
    pub recon: f64,
    /// Seconds since training started.
    pub wallclock: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain record") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Parse(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { records })
    }
}

/// A kernel ready for scoring, with what is needed to reproduce it.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub mode: Mode,
    pub window: usize,
    pub kernel: DeepKernel,
    pub generator: Option<Generator>,
    /// Normalization fitted on the training split, applied before scoring.
    pub normalization: Option<MinMaxTransform>,
}

const META_MODE: &str = "mode";
const META_WINDOW: &str = "window";
const META_BANDWIDTH: &str = "bandwidth";
const META_NOISE: &str = "noise";

impl TrainedModel {
    /// Scores a series already in the model's normalized coordinates.
    pub fn score(&self, series: &Matrix) -> Result<ScoreSeries> {
        score(series, self.mode, Some(&self.kernel), self.window)
    }

    /// Applies the stored normalization, then scores.
    pub fn score_raw(&self, series: &Matrix) -> Result<ScoreSeries> {
        match &self.normalization {
            Some(tf) => self.score(&tf.apply(series)?),
            None => self.score(series),
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.set_meta(META_MODE, self.mode.name());
        ck.set_meta(META_WINDOW, self.window);
        ck.set_meta(
            META_BANDWIDTH,
            match &self.kernel.bandwidth {
                Bandwidth::MedianHeuristic => "median".to_string(),
                Bandwidth::Fixed(k) => format!("{:016x}", k.sigma2().to_bits()),
            },
        );
        if let (Some(enc), Some(dec)) = (self.kernel.encoder(), self.kernel.decoder()) {
            ck.push_store("enc/", &enc.params)?;
            ck.push_store("dec/", &dec.params)?;
        }
        if let Some(gen) = &self.generator {
            ck.set_meta(META_NOISE, gen.noise.name());
            ck.push_store("gen/", &gen.params)?;
        }
        if let Some(tf) = &self.normalization {
            ck.push_tensor("norm/min", Matrix::row_vector(&tf.min))?;
            ck.push_tensor("norm/max", Matrix::row_vector(&tf.max))?;
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mode = Mode::parse(ck.meta(META_MODE)?)?;
        let window: usize = ck
            .meta(META_WINDOW)?
            .parse()
            .map_err(|_| Error::Parse("bad window in checkpoint".into()))?;
        let bandwidth = match ck.meta(META_BANDWIDTH)? {
            "median" => Bandwidth::MedianHeuristic,
            hex => {
                let bits = u64::from_str_radix(hex, 16).map_err(|_| Error::Parse(format!("bad bandwidth '{hex}'")))?;
                Bandwidth::Fixed(RbfKernel::new(f64::from_bits(bits))?)
            }
        };
        let kernel = if mode.needs_kernel() {
            let enc = SeqEncoder::from_params(ck.extract_store("enc/")?)?;
            let dec = SeqDecoder::from_params(ck.extract_store("dec/")?)?;
            DeepKernel::learned(bandwidth, enc, dec)?
        } else {
            DeepKernel::identity(bandwidth)
        };
        let generator = match ck.meta(META_NOISE) {
            Ok(noise) => Some(Generator::from_params(ck.extract_store("gen/")?, NoiseDist::parse(noise)?)?),
            Err(_) => None,
        };
        let normalization = match (ck.tensor("norm/min"), ck.tensor("norm/max")) {
            (Some(lo), Some(hi)) => Some(MinMaxTransform {
                min: lo.data().to_vec(),
                max: hi.data().to_vec(),
            }),
            _ => None,
        };
        Ok(Self {
            mode,
            window,
            kernel,
            generator,
            normalization,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub log: TrainLog,
    /// True when the surrogate MMD stopping rule fired.
    pub converged: bool,
}

#[derive(Default)]
struct Accum {
    n: f64,
    pg: f64,
    xx: f64,
    recon: f64,
}

impl Accum {
    fn push(&mut self, s: &StepStats) {
        self.n += 1.0;
        self.pg += s.mmd_pg;
        self.xx += s.mmd_xx;
        self.recon += s.recon;
    }

    fn record(&self, epoch: usize, start: &Instant) -> EpochRecord {
        let n = self.n.max(1.0);
        EpochRecord {
            epoch,
            mmd_pg: self.pg / n,
            mmd_xx: self.xx / n,
            recon: self.recon / n,
            wallclock: start.elapsed().as_secs_f64(),
        }
    }
}

/// Trains the kernel for `mode` on a (normalized) training series.
///
/// An epoch draws about `ceil(pairs / batch)` minibatches. In the full
/// method these are grouped into `n_c` kernel steps followed by one
/// generator step. Training stops after `max_epochs` or once the
/// epoch-mean surrogate MMD is at most `epsilon`.
pub fn fit(train: &Matrix, mode: Mode, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let w = cfg.window;
    if train.rows() < 2 * w {
        return param_err(format!(
            "training series of length {} holds no window pair of width {w}",
            train.rows()
        ));
    }
    let d = train.cols();
    let mut init = derived(cfg.seed, INIT_STREAM);
    let mut rng = derived(cfg.seed, DATA_STREAM);
    let start = Instant::now();
    let mut log = TrainLog::default();

    if mode == Mode::Dataspace {
        return Ok(TrainOutcome {
            model: TrainedModel {
                mode,
                window: w,
                kernel: DeepKernel::identity(Bandwidth::MedianHeuristic),
                generator: None,
                normalization: None,
            },
            log,
            converged: false,
        });
    }

    let enc = SeqEncoder::new(d, cfg.d_h, &mut init)?;
    let dec = SeqDecoder::new(cfg.d_h, d, &mut init)?;
    let mut gen = Generator::new(d, cfg.d_h, cfg.noise, &mut init)?;
    let mut dk = DeepKernel::learned(Bandwidth::MedianHeuristic, enc, dec)?;
    let pairs = train.rows() - 2 * w + 1;
    let minibatches = pairs.div_ceil(cfg.batch);
    let neg_scale: Vec<f64> = column_std(train).iter().map(|s| s * cfg.neg_noise).collect();
    let mut converged = false;

    for epoch in 0..cfg.max_epochs {
        let mut acc = Accum::default();
        match mode {
            Mode::Klcpd => {
                let iters = minibatches.div_ceil(cfg.n_c + 1);
                for _ in 0..iters {
                    for _ in 0..cfg.n_c {
                        let batch = PairBatch::new(train, &sample_starts(train.rows(), w, cfg.batch, &mut rng)?, w)?;
                        let omega = gen.sample_noise(cfg.batch, &mut rng);
                        let z = gen.generate_batch(&batch.past, &batch.current, &omega)?;
                        acc.push(&kernel_step(&mut dk, &batch, Surrogate::Given(&z), cfg)?);
                    }
                    let batch = PairBatch::new(train, &sample_starts(train.rows(), w, cfg.batch, &mut rng)?, w)?;
                    let omega = gen.sample_noise(cfg.batch, &mut rng);
                    generator_step(&mut gen, &dk, &batch, &omega, cfg)?;
                }
            }
            Mode::Negsample => {
                for _ in 0..minibatches {
                    let batch = PairBatch::new(train, &sample_starts(train.rows(), w, cfg.batch, &mut rng)?, w)?;
                    let z = negative_samples(&batch.current, &neg_scale, &mut rng);
                    acc.push(&kernel_step(&mut dk, &batch, Surrogate::Given(&z), cfg)?);
                }
            }
            Mode::Codespace => {
                for _ in 0..minibatches {
                    let batch = PairBatch::new(train, &sample_starts(train.rows(), w, cfg.batch, &mut rng)?, w)?;
                    let recon = autoencoder_step(&mut dk, &batch, cfg)?;
                    acc.push(&StepStats {
                        recon,
                        ..StepStats::default()
                    });
                }
            }
            Mode::Dataspace => unreachable!(),
        }
        let rec = acc.record(epoch, &start);
        let stop = mode != Mode::Codespace && rec.mmd_pg <= cfg.epsilon;
        log.records.push(rec);
        if stop {
            converged = true;
            break;
        }
    }

    Ok(TrainOutcome {
        model: TrainedModel {
            mode,
            window: w,
            kernel: dk,
            generator: (mode == Mode::Klcpd).then_some(gen),
            normalization: None,
        },
        log,
        converged,
    })
}

/// Result of training on the first split and scoring the other two.
#[derive(Clone, Debug)]
pub struct SplitRun {
    pub model: TrainedModel,
    pub log: TrainLog,
    pub val_auc: f64,
    pub test_auc: f64,
    pub test_scores: ScoreSeries,
}

/// Chronological split, normalization fitted on the training part,
/// training, then AUC on the validation and test parts.
pub fn train_and_evaluate(data: &LabeledSeries, mode: Mode, cfg: &TrainConfig, eval: &EvalConfig) -> Result<SplitRun> {
    eval.validate()?;
    let [train, val, test] = chrono_split(data, eval.fractions)?;
    let tf = MinMaxTransform::fit(&train.series)?;
    let out = fit(&tf.apply(&train.series)?, mode, cfg)?;
    let mut model = out.model;
    model.normalization = Some(tf);
    let auc = |part: &LabeledSeries| -> Result<(f64, ScoreSeries)> {
        let s = model.score_raw(&part.series)?;
        let a = roc_auc(s.start, &s.scores, &part.labels, eval.tolerance, eval.tolerance_mode)?;
        Ok((a, s))
    };
    let (val_auc, _) = auc(&val)?;
    let (test_auc, test_scores) = auc(&test)?;
    Ok(SplitRun {
        model,
        log: out.log,
        val_auc,
        test_auc,
        test_scores,
    })
}

/// One point of the hyperparameter grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridPoint {
    pub lambda: f64,
    pub beta: f64,
    pub lr: f64,
}

/// `λ ∈ {0.1, 1, 10}` × `β ∈ {1e−3, 1e−1, 1, 10}` at a fixed learning rate.
pub fn default_grid(lr: f64) -> Vec<GridPoint> {
    let mut v = Vec::new();
    for lambda in [0.1, 1.0, 10.0] {
        for beta in [1e-3, 1e-1, 1.0, 10.0] {
            v.push(GridPoint { lambda, beta, lr });
        }
    }
    v
}

/// Trains once per grid point and keeps the configuration with the highest
/// validation AUC (first on ties).
pub fn select_hyperparameters(
    train: &Matrix,
    val: &LabeledSeries,
    mode: Mode,
    base: &TrainConfig,
    grid: &[GridPoint],
    tolerance: usize,
    tolerance_mode: ToleranceMode,
) -> Result<(TrainConfig, Vec<(GridPoint, f64)>)> {
    if grid.is_empty() {
        return param_err("empty hyperparameter grid");
    }
    let mut results = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, TrainConfig)> = None;
    for p in grid {
        let cfg = TrainConfig {
            lambda: p.lambda,
            beta: p.beta,
            lr: p.lr,
            ..base.clone()
        };
        let out = fit(train, mode, &cfg)?;
        let s = out.model.score(&val.series)?;
        let auc = roc_auc(s.start, &s.scores, &val.labels, tolerance, tolerance_mode)?;
        results.push((*p, auc));
        if best.as_ref().map_or(true, |(b, _)| auc > *b) {
            best = Some((auc, cfg));
        }
    }
    Ok((best.expect("non-empty grid").1, results))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn toy_series(len: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = seeded(seed);
        Matrix::from_vec(
            len,
            d,
            (0..len * d)
                .map(|i| ((i / d) as f64 / 7.0).sin() + 0.3 * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        )
        .unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            window: 4,
            d_h: 3,
            batch: 4,
            n_c: 2,
            max_epochs: 2,
            lr: 1e-3,
            ..TrainConfig::default()
        }
    }

    fn parts(d: usize, d_h: usize, seed: u64) -> (DeepKernel, Generator) {
        let mut rng = seeded(seed);
        let enc = SeqEncoder::with_scale(d, d_h, 0.5, &mut rng).unwrap();
        let dec = SeqDecoder::with_scale(d_h, d, 0.5, &mut rng).unwrap();
        let gen = Generator::new(d, d_h, NoiseDist::StandardNormal, &mut rng).unwrap();
        (DeepKernel::learned(Bandwidth::MedianHeuristic, enc, dec).unwrap(), gen)
    }

    #[test]
    fn config_validation_and_pairs() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { lr: 0.0, ..TrainConfig::default() },
            TrainConfig { clip_c: 0.0, ..TrainConfig::default() },
            TrainConfig { n_c: 0, ..TrainConfig::default() },
            TrainConfig { lambda: -1.0, ..TrainConfig::default() },
            TrainConfig { epsilon: 0.0, ..TrainConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        let mut c = TrainConfig::default();
        let src = TrainConfig { lr: 0.5, noise: NoiseDist::StandardNormal, ..TrainConfig::default() };
        for (k, v) in src.to_pairs() {
            assert!(c.set(k, &v).unwrap());
        }
        assert_eq!(c.lr, 0.5);
        assert_eq!(c.noise, NoiseDist::StandardNormal);
        assert!(!c.set("unknown", "1").unwrap());
        assert!(c.set("lr", "abc").is_err());
    }

    #[test]
    fn pair_batch_layout() {
        let s = Matrix::column(&(0..20).map(f64::from).collect::<Vec<_>>());
        let b = PairBatch::new(&s, &[0, 5], 3).unwrap();
        assert_eq!(b.past.window(1).data(), &[5.0, 6.0, 7.0]);
        assert_eq!(b.current.window(1).data(), &[8.0, 9.0, 10.0]);
        assert!(PairBatch::new(&s, &[15], 3).is_err());
        let mut rng = seeded(0);
        assert!(sample_starts(20, 3, 50, &mut rng).unwrap().iter().all(|&s| s <= 14));
    }

    #[test]
    fn lambda_beta_zero_is_surrogate_only() {
        let s = toy_series(30, 2, 1);
        let (dk, gen) = parts(2, 3, 2);
        let batch = PairBatch::new(&s, &[0, 7, 13], 4).unwrap();
        let omega = gen.sample_noise(3, &mut seeded(3));
        let mut g = Graph::new();
        let (n, _) = build_objective(
            &mut g,
            dk.encoder().unwrap(),
            dk.decoder().unwrap(),
            &batch,
            Surrogate::Generated { gen: &gen, omega: &omega },
            0.0,
            0.0,
            None,
        )
        .unwrap();
        assert_eq!(g.scalar(n.total), g.scalar(n.mmd_pg));
    }

    #[test]
    fn kernel_step_clips_encoder_only() {
        let s = toy_series(40, 2, 4);
        let (mut dk, gen) = parts(2, 3, 5);
        let cfg = TrainConfig { lr: 0.5, clip_c: 0.05, ..small_cfg() };
        let batch = PairBatch::new(&s, &[0, 10, 20], 4).unwrap();
        let omega = gen.sample_noise(3, &mut seeded(6));
        let gen_before = gen.params.clone();
        kernel_step(&mut dk, &batch, Surrogate::Generated { gen: &gen, omega: &omega }, &cfg).unwrap();
        assert!(dk.encoder().unwrap().params.max_abs() <= 0.05);
        assert!(dk.decoder().unwrap().params.max_abs() > 0.05);
        assert_eq!(gen.params, gen_before);
    }

    #[test]
    fn generator_step_leaves_kernel_unchanged() {
        let s = toy_series(40, 2, 7);
        let (dk, mut gen) = parts(2, 3, 8);
        let before = dk.clone();
        let batch = PairBatch::new(&s, &[1, 11], 4).unwrap();
        let omega = gen.sample_noise(2, &mut seeded(9));
        let g0 = gen.params.clone();
        generator_step(&mut gen, &dk, &batch, &omega, &small_cfg()).unwrap();
        assert_eq!(dk, before);
        assert_ne!(gen.params, g0);
    }

    #[test]
    fn generator_steps_reduce_surrogate_mmd() {
        let s = toy_series(60, 1, 10);
        let (dk, mut gen) = parts(1, 4, 11);
        let batch = PairBatch::new(&s, &[0, 9, 17, 25, 33, 41, 50], 5).unwrap();
        let omega = Matrix::zeros(7, 4);
        let cfg = TrainConfig { lr: 1e-2, ..small_cfg() };
        let first = generator_step(&mut gen, &dk, &batch, &omega, &cfg).unwrap();
        let mut last = first;
        for _ in 0..99 {
            last = generator_step(&mut gen, &dk, &batch, &omega, &cfg).unwrap();
        }
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn zero_epochs_keeps_initial_parameters() {
        let s = toy_series(40, 2, 12);
        let cfg = TrainConfig { max_epochs: 0, seed: 3, ..small_cfg() };
        let out = fit(&s, Mode::Klcpd, &cfg).unwrap();
        assert!(out.log.records.is_empty());
        let mut init = derived(3, INIT_STREAM);
        let enc = SeqEncoder::new(2, 3, &mut init).unwrap();
        assert_eq!(out.model.kernel.encoder().unwrap(), &enc);
    }

    #[test]
    fn huge_epsilon_stops_after_first_epoch() {
        let s = toy_series(40, 1, 13);
        let cfg = TrainConfig { epsilon: 1e9, max_epochs: 5, ..small_cfg() };
        for mode in [Mode::Klcpd, Mode::Negsample] {
            let out = fit(&s, mode, &cfg).unwrap();
            assert_eq!(out.log.records.len(), 1);
            assert!(out.converged);
        }
    }

    #[test]
    fn fit_is_deterministic_and_logs_epochs() {
        let s = toy_series(50, 2, 14);
        let cfg = TrainConfig { max_epochs: 3, seed: 9, ..small_cfg() };
        let a = fit(&s, Mode::Klcpd, &cfg).unwrap();
        let b = fit(&s, Mode::Klcpd, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.log.records.len(), 3);
        assert!(a.log.records.iter().enumerate().all(|(i, r)| r.epoch == i));
        assert!(a.model.kernel.encoder().unwrap().params.max_abs() <= cfg.clip_c);
        let text = a.log.to_jsonl();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(TrainLog::from_jsonl(&text).unwrap(), a.log);
    }

    #[test]
    fn codespace_reduces_reconstruction() {
        let s = toy_series(120, 1, 15);
        let cfg = TrainConfig { lr: 1e-2, max_epochs: 40, batch: 16, ..small_cfg() };
        let out = fit(&s, Mode::Codespace, &cfg).unwrap();
        let r = &out.log.records;
        assert!(r.last().unwrap().recon < r[0].recon);
        assert!(out.model.generator.is_none());
    }

    #[test]
    fn empty_training_data_rejected() {
        assert!(fit(&Matrix::zeros(5, 1), Mode::Klcpd, &small_cfg()).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let s = toy_series(50, 2, 16);
        let mut out = fit(&s, Mode::Klcpd, &small_cfg()).unwrap();
        out.model.normalization = Some(MinMaxTransform::fit(&s).unwrap());
        let ck = out.model.to_checkpoint().unwrap();
        let text = ck.to_text();
        let back = TrainedModel::from_checkpoint(&Checkpoint::from_text(&text).unwrap()).unwrap();
        assert_eq!(back, out.model);
        assert_eq!(back.score(&s).unwrap(), out.model.score(&s).unwrap());
        let ds = fit(&s, Mode::Dataspace, &small_cfg()).unwrap().model;
        assert_eq!(TrainedModel::from_checkpoint(&ds.to_checkpoint().unwrap()).unwrap(), ds);
    }

    #[test]
    fn negative_samples_scale() {
        let mut rng = seeded(17);
        let cur = SeqBatch {
            steps: vec![Matrix::zeros(2000, 2)],
        };
        let z = negative_samples(&cur, &[0.5, 0.0], &mut rng);
        let col0: Vec<f64> = z.steps[0].row_iter().map(|r| r[0]).collect();
        let sd = (col0.iter().map(|v| v * v).sum::<f64>() / 2000.0).sqrt();
        assert!((sd - 0.5).abs() < 0.05);
        assert!(z.steps[0].row_iter().all(|r| r[1] == 0.0));
    }
}
