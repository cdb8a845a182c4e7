//! Recurrent sequence models: the deep-kernel encoder/decoder pair and the
//! auxiliary conditional generator.
//!
//! Batches of windows are handled step-major: a [`SeqBatch`] stores one
//! `B×d` matrix per timestep whose row `b` belongs to window `b`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::diffcore::{Graph, Gru, Linear, Matrix, NodeId, ParamStore, INIT_SCALE};
use crate::error::{param_err, shape_err, Result};

/// Step-major batch of equally long windows.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqBatch {
    pub steps: Vec<Matrix>,
}

impl SeqBatch {
    /// Packs `w×d` windows (rows are timesteps) into step-major form.
    pub fn from_windows(windows: &[&Matrix]) -> Result<Self> {
        let Some(first) = windows.first() else {
            return param_err("empty window batch");
        };
        let (w, d) = first.shape();
        if windows.iter().any(|m| m.shape() != (w, d)) {
            return shape_err("windows in a batch must share one shape");
        }
        let steps = (0..w)
            .map(|t| {
                let mut m = Matrix::zeros(windows.len(), d);
                for (b, win) in windows.iter().enumerate() {
                    m.row_mut(b).copy_from_slice(win.row(t));
                }
                m
            })
            .collect();
        Ok(Self { steps })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn batch_size(&self) -> usize {
        self.steps.first().map_or(0, Matrix::rows)
    }

    pub fn dim(&self) -> usize {
        self.steps.first().map_or(0, Matrix::cols)
    }

    /// Unpacks window `b` as a `w×d` matrix.
    pub fn window(&self, b: usize) -> Matrix {
        let rows: Vec<&[f64]> = self.steps.iter().map(|m| m.row(b)).collect();
        Matrix::from_rows(&rows).expect("steps share a width")
    }

    /// `{0, x_0, …, x_{w-2}}` for every window.
    pub fn shift_right_one(&self) -> SeqBatch {
        let mut steps = Vec::with_capacity(self.steps.len());
        if let Some(first) = self.steps.first() {
            steps.push(Matrix::zeros(first.rows(), first.cols()));
            steps.extend(self.steps[..self.steps.len() - 1].iter().cloned());
        }
        SeqBatch { steps }
    }

    pub fn inputs(&self, g: &mut Graph) -> Vec<NodeId> {
        self.steps.iter().map(|m| g.input(m.clone())).collect()
    }
}

/// `{0, x_t, …, x_{t+w-2}}` for a single `w×d` window.
pub fn shift_right_one(window: &Matrix) -> Matrix {
    let (w, d) = window.shape();
    let mut out = Matrix::zeros(w, d);
    for t in 1..w {
        out.row_mut(t).copy_from_slice(window.row(t - 1));
    }
    out
}

/// Hidden states of an encoder over one window, one row per timestep
/// (`w×d_h`).
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedWindow {
    pub states: Matrix,
}

fn run_gru(gru: &Gru, store: &ParamStore, inputs: &[Matrix], h0: Matrix) -> Result<Vec<Matrix>> {
    let mut h = h0;
    let mut out = Vec::with_capacity(inputs.len());
    for x in inputs {
        h = gru.step(store, x, &h)?;
        out.push(h.clone());
    }
    Ok(out)
}

fn run_gru_graph(
    gru: &Gru,
    g: &mut Graph,
    store: &ParamStore,
    inputs: &[NodeId],
    h0: NodeId,
) -> Result<Vec<NodeId>> {
    let mut h = h0;
    let mut out = Vec::with_capacity(inputs.len());
    for &x in inputs {
        h = gru.step_graph(g, store, x, h)?;
        out.push(h);
    }
    Ok(out)
}

/// GRU encoder `f_φ`: a window maps to its sequence of hidden states,
/// starting from a zero state.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqEncoder {
    pub params: ParamStore,
    gru: Gru,
}

impl SeqEncoder {
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_h: usize, rng: &mut R) -> Result<Self> {
        Self::with_scale(d_in, d_h, INIT_SCALE, rng)
    }

    pub fn with_scale<R: Rng + ?Sized>(d_in: usize, d_h: usize, scale: f64, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        let gru = Gru::init(&mut params, "gru/", d_in, d_h, scale, rng)?;
        Ok(Self { params, gru })
    }

    pub fn from_params(params: ParamStore) -> Result<Self> {
        let gru = Gru::bind(&params, "gru/")?;
        Ok(Self { params, gru })
    }

    pub fn d_in(&self) -> usize {
        self.gru.d_in
    }

    pub fn d_h(&self) -> usize {
        self.gru.d_h
    }

    pub fn encode_window(&self, window: &Matrix) -> Result<EncodedWindow> {
        if window.rows() < 1 {
            return param_err("cannot encode an empty window");
        }
        let batch = SeqBatch::from_windows(&[window])?;
        let states = self.encode_batch(&batch)?;
        let rows: Vec<&[f64]> = states.iter().map(|m| m.row(0)).collect();
        Ok(EncodedWindow {
            states: Matrix::from_rows(&rows)?,
        })
    }

    pub fn encode_batch(&self, batch: &SeqBatch) -> Result<Vec<Matrix>> {
        let h0 = Matrix::zeros(batch.batch_size(), self.d_h());
        run_gru(&self.gru, &self.params, &batch.steps, h0)
    }

    pub fn encode_graph(&self, g: &mut Graph, inputs: &[NodeId]) -> Result<Vec<NodeId>> {
        let Some(&first) = inputs.first() else {
            return param_err("cannot encode an empty window");
        };
        let h0 = g.input(Matrix::zeros(g.value(first).rows(), self.d_h()));
        run_gru_graph(&self.gru, g, &self.params, inputs, h0)
    }
}

/// Decoder `F_ψ`: a GRU over the hidden-state sequence followed by a
/// per-timestep affine head back to data space.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqDecoder {
    pub params: ParamStore,
    gru: Gru,
    head: Linear,
}

impl SeqDecoder {
    pub fn new<R: Rng + ?Sized>(d_h: usize, d_out: usize, rng: &mut R) -> Result<Self> {
        Self::with_scale(d_h, d_out, INIT_SCALE, rng)
    }

    pub fn with_scale<R: Rng + ?Sized>(d_h: usize, d_out: usize, scale: f64, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        let gru = Gru::init(&mut params, "gru/", d_h, d_h, scale, rng)?;
        let head = Linear::init(&mut params, "head/", d_h, d_out, scale, rng)?;
        Ok(Self { params, gru, head })
    }

    pub fn from_params(params: ParamStore) -> Result<Self> {
        let gru = Gru::bind(&params, "gru/")?;
        let head = Linear::bind(&params, "head/")?;
        Ok(Self { params, gru, head })
    }

    pub fn d_h(&self) -> usize {
        self.gru.d_in
    }

    pub fn d_out(&self) -> usize {
        self.head.d_out
    }

    /// Maps encoded states back to a `w×d` window.
    pub fn reconstruct(&self, encoded: &EncodedWindow) -> Result<Matrix> {
        let h = &encoded.states;
        if h.cols() != self.d_h() {
            return shape_err(format!("decoder expects {}-dim states, got {}", self.d_h(), h.cols()));
        }
        let batch = SeqBatch::from_windows(&[h])?;
        let out = self.decode_batch(&batch)?;
        let rows: Vec<&[f64]> = out.iter().map(|m| m.row(0)).collect();
        Matrix::from_rows(&rows)
    }

    pub fn decode_batch(&self, states: &SeqBatch) -> Result<Vec<Matrix>> {
        let h0 = Matrix::zeros(states.batch_size(), self.gru.d_h);
        run_gru(&self.gru, &self.params, &states.steps, h0)?
            .iter()
            .map(|h| self.head.forward(&self.params, h))
            .collect()
    }

    pub fn decode_graph(&self, g: &mut Graph, states: &[NodeId]) -> Result<Vec<NodeId>> {
        let Some(&first) = states.first() else {
            return param_err("cannot decode an empty sequence");
        };
        let h0 = g.input(Matrix::zeros(g.value(first).rows(), self.gru.d_h));
        let hs = run_gru_graph(&self.gru, g, &self.params, states, h0)?;
        hs.into_iter()
            .map(|h| self.head.forward_graph(g, &self.params, h))
            .collect()
    }
}

/// Mean over windows and timesteps of the squared reconstruction error
/// norm.
pub fn reconstruction_loss(windows: &[&Matrix], recon: &[&Matrix]) -> Result<f64> {
    if windows.len() != recon.len() || windows.is_empty() {
        return shape_err("reconstruction loss needs matching, non-empty batches");
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (x, r) in windows.iter().zip(recon) {
        total += x.sub(r)?.sum_squares();
        count += x.rows();
    }
    Ok(total / count as f64)
}

/// Base distribution of the generator's noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseDist {
    /// Uniform on `[-1, 1]` per coordinate.
    Uniform,
    StandardNormal,
}

impl NoiseDist {
    pub fn name(&self) -> &'static str {
        match self {
            NoiseDist::Uniform => "uniform",
            NoiseDist::StandardNormal => "normal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(NoiseDist::Uniform),
            "normal" | "gaussian" => Ok(NoiseDist::StandardNormal),
            other => param_err(format!("unknown noise distribution {other}")),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rows: usize, cols: usize, rng: &mut R) -> Matrix {
        let data: Vec<f64> = match self {
            NoiseDist::Uniform => {
                let u = Uniform::new_inclusive(-1.0, 1.0);
                (0..rows * cols).map(|_| u.sample(rng)).collect()
            }
            NoiseDist::StandardNormal => (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect(),
        };
        Matrix::from_vec(rows, cols, data).expect("sized above")
    }
}

/// Conditional sequence generator `g_θ`.
///
/// The encoder reads the past window from a zero state; its final state is
/// perturbed by noise `ω` and seeds the decoder, which reads the current
/// window shifted right by one step and emits one sample per step.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub params: ParamStore,
    pub noise: NoiseDist,
    enc: Gru,
    dec: Gru,
    head: Linear,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(d: usize, d_h: usize, noise: NoiseDist, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        let enc = Gru::init(&mut params, "enc/", d, d_h, INIT_SCALE, rng)?;
        let dec = Gru::init(&mut params, "dec/", d, d_h, INIT_SCALE, rng)?;
        let head = Linear::init(&mut params, "head/", d_h, d, INIT_SCALE, rng)?;
        Ok(Self {
            params,
            noise,
            enc,
            dec,
            head,
        })
    }

    pub fn from_params(params: ParamStore, noise: NoiseDist) -> Result<Self> {
        let enc = Gru::bind(&params, "enc/")?;
        let dec = Gru::bind(&params, "dec/")?;
        let head = Linear::bind(&params, "head/")?;
        if enc.d_h != dec.d_h || enc.d_in != dec.d_in || head.d_in != dec.d_h || head.d_out != enc.d_in {
            return shape_err("inconsistent generator weights");
        }
        Ok(Self {
            params,
            noise,
            enc,
            dec,
            head,
        })
    }

    pub fn d(&self) -> usize {
        self.enc.d_in
    }

    pub fn d_h(&self) -> usize {
        self.enc.d_h
    }

    pub fn sample_noise<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Matrix {
        self.noise.sample(batch, self.d_h(), rng)
    }

    fn check(&self, past: &SeqBatch, current: &SeqBatch, omega: (usize, usize)) -> Result<()> {
        if past.len() != current.len() || past.is_empty() {
            return shape_err(format!("windows of length {} and {}", past.len(), current.len()));
        }
        if past.dim() != self.d() || current.dim() != self.d() {
            return shape_err(format!("generator expects {}-dim data", self.d()));
        }
        if omega != (past.batch_size(), self.d_h()) || current.batch_size() != past.batch_size() {
            return shape_err(format!(
                "noise {:?} for batch {} with d_h {}",
                omega,
                past.batch_size(),
                self.d_h()
            ));
        }
        Ok(())
    }

    pub fn generate_batch(&self, past: &SeqBatch, current: &SeqBatch, omega: &Matrix) -> Result<SeqBatch> {
        self.check(past, current, omega.shape())?;
        let h0 = Matrix::zeros(past.batch_size(), self.d_h());
        let hs = run_gru(&self.enc, &self.params, &past.steps, h0)?;
        let seed = hs.last().expect("non-empty").add(omega)?;
        let shifted = current.shift_right_one();
        let ds = run_gru(&self.dec, &self.params, &shifted.steps, seed)?;
        let steps = ds
            .iter()
            .map(|h| self.head.forward(&self.params, h))
            .collect::<Result<Vec<_>>>()?;
        Ok(SeqBatch { steps })
    }

    /// Single-window convenience wrapper around [`generate_batch`](Self::generate_batch).
    pub fn generate(&self, past: &Matrix, current: &Matrix, omega: &[f64]) -> Result<Matrix> {
        let p = SeqBatch::from_windows(&[past])?;
        let c = SeqBatch::from_windows(&[current])?;
        Ok(self.generate_batch(&p, &c, &Matrix::row_vector(omega))?.window(0))
    }

    pub fn generate_graph(
        &self,
        g: &mut Graph,
        past: &SeqBatch,
        current: &SeqBatch,
        omega: &Matrix,
    ) -> Result<Vec<NodeId>> {
        self.check(past, current, omega.shape())?;
        let past_in = past.inputs(g);
        let h0 = g.input(Matrix::zeros(past.batch_size(), self.d_h()));
        let hs = run_gru_graph(&self.enc, g, &self.params, &past_in, h0)?;
        let w = g.input(omega.clone());
        let seed = g.add(*hs.last().expect("non-empty"), w)?;
        let shifted = current.shift_right_one().inputs(g);
        let ds = run_gru_graph(&self.dec, g, &self.params, &shifted, seed)?;
        ds.into_iter()
            .map(|h| self.head.forward_graph(g, &self.params, h))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gru_cell;
    use crate::rng::seeded;

    fn window(rows: &[[f64; 2]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    fn zeroed(mut store: ParamStore) -> ParamStore {
        for i in 0..store.len() {
            store.value_mut(i).data_mut().fill(0.0);
        }
        store
    }

    #[test]
    fn zero_encoder_gives_zero_states() {
        let mut rng = seeded(1);
        let enc = SeqEncoder::new(2, 4, &mut rng).unwrap();
        let enc = SeqEncoder::from_params(zeroed(enc.params)).unwrap();
        let e = enc.encode_window(&window(&[[1.0, 2.0], [-1.0, 0.5], [3.0, 3.0]])).unwrap();
        assert_eq!(e.states, Matrix::zeros(3, 4));
    }

    #[test]
    fn single_step_encoding_is_one_cell() {
        let mut rng = seeded(2);
        let enc = SeqEncoder::new(2, 3, &mut rng).unwrap();
        let e = enc.encode_window(&window(&[[0.4, -0.2]])).unwrap();
        let h = gru_cell(&[0.4, -0.2], &[0.0; 3], &enc.params, "gru/").unwrap();
        assert_eq!(e.states.data(), h.as_slice());
    }

    #[test]
    fn encoding_is_causal() {
        let mut rng = seeded(3);
        let enc = SeqEncoder::with_scale(2, 3, 0.5, &mut rng).unwrap();
        let x = window(&[[0.1, 0.2], [0.3, -0.4], [1.0, 0.0], [0.5, 0.5]]);
        let full = enc.encode_window(&x).unwrap();
        let prefix = enc.encode_window(&x.slice_rows(0, 3)).unwrap();
        assert_eq!(full.states.slice_rows(0, 3), prefix.states);
        assert!(enc.encode_window(&Matrix::zeros(0, 2)).is_err());
        assert!(enc.encode_window(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn zero_decoder_reconstructs_zeros() {
        let mut rng = seeded(4);
        let enc = SeqEncoder::with_scale(2, 3, 0.5, &mut rng).unwrap();
        let dec = SeqDecoder::new(3, 2, &mut rng).unwrap();
        let dec = SeqDecoder::from_params(zeroed(dec.params)).unwrap();
        let x = window(&[[1.0, 2.0], [3.0, -1.0]]);
        let r = dec.reconstruct(&enc.encode_window(&x).unwrap()).unwrap();
        assert_eq!(r, Matrix::zeros(2, 2));
        // (1 + 4 + 9 + 1) / 2 timesteps
        assert_eq!(reconstruction_loss(&[&x], &[&r]).unwrap(), 7.5);
        assert_eq!(reconstruction_loss(&[&x], &[&x]).unwrap(), 0.0);
    }

    #[test]
    fn shift_right_inserts_zero_row() {
        let x = window(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        assert_eq!(shift_right_one(&x), window(&[[0.0, 0.0], [1.0, 2.0], [3.0, 4.0]]));
        let b = SeqBatch::from_windows(&[&x]).unwrap().shift_right_one();
        assert_eq!(b.window(0), shift_right_one(&x));
    }

    #[test]
    fn zero_noise_zero_decoder_gives_zero_samples() {
        let mut rng = seeded(5);
        let gen = Generator::new(2, 3, NoiseDist::Uniform, &mut rng).unwrap();
        let mut params = gen.params.clone();
        for name in ["dec/w", "dec/u_zr", "dec/u_n", "dec/b", "head/w", "head/b"] {
            params.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let gen = Generator::from_params(params, NoiseDist::Uniform).unwrap();
        let xl = window(&[[1.0, 2.0], [3.0, 4.0]]);
        let xr = window(&[[5.0, 6.0], [7.0, 8.0]]);
        assert_eq!(gen.generate(&xl, &xr, &[0.0; 3]).unwrap(), Matrix::zeros(2, 2));
    }

    #[test]
    fn generation_is_deterministic_and_shaped() {
        let mut rng = seeded(6);
        let gen = Generator::new(2, 3, NoiseDist::StandardNormal, &mut rng).unwrap();
        let xl = window(&[[1.0, 2.0], [3.0, 4.0], [0.0, 1.0]]);
        let xr = window(&[[5.0, 6.0], [7.0, 8.0], [1.0, 1.0]]);
        let omega = gen.sample_noise(1, &mut seeded(10));
        let z1 = gen.generate(&xl, &xr, omega.data()).unwrap();
        let omega2 = gen.sample_noise(1, &mut seeded(10));
        let z2 = gen.generate(&xl, &xr, omega2.data()).unwrap();
        assert_eq!(z1, z2);
        assert_eq!(z1.shape(), xr.shape());
        assert!(gen.generate(&xl, &xr.slice_rows(0, 2), omega.data()).is_err());
    }

    #[test]
    fn generation_is_continuous_in_noise() {
        let mut rng = seeded(7);
        let gen = Generator::new(1, 4, NoiseDist::Uniform, &mut rng).unwrap();
        let xl = Matrix::column(&[0.1, 0.5, -0.3, 0.9]);
        let xr = Matrix::column(&[0.2, 0.4, 0.6, 0.8]);
        let omega = [0.3, -0.7, 0.1, 0.5];
        let mut nudged = omega;
        nudged[1] += 1e-6;
        let a = gen.generate(&xl, &xr, &omega).unwrap();
        let b = gen.generate(&xl, &xr, &nudged).unwrap();
        assert!(a.sub(&b).unwrap().sum_squares().sqrt() < 1e-3);
    }

    #[test]
    fn graph_generation_matches_plain() {
        let mut rng = seeded(8);
        let gen = Generator::new(2, 3, NoiseDist::Uniform, &mut rng).unwrap();
        let xl = window(&[[1.0, 2.0], [3.0, 4.0]]);
        let xr = window(&[[5.0, 6.0], [7.0, 8.0]]);
        let p = SeqBatch::from_windows(&[&xl, &xr]).unwrap();
        let c = SeqBatch::from_windows(&[&xr, &xl]).unwrap();
        let omega = gen.sample_noise(2, &mut rng);
        let plain = gen.generate_batch(&p, &c, &omega).unwrap();
        let mut g = Graph::new();
        let nodes = gen.generate_graph(&mut g, &p, &c, &omega).unwrap();
        for (m, n) in plain.steps.iter().zip(nodes) {
            assert!(m.sub(g.value(n)).unwrap().max_abs() < 1e-14);
        }
    }
}
