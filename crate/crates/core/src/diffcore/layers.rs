//! GRU cell and affine layer, each with a plain batched forward and a
//! recorded forward on a [`Graph`].
//!
//! Gate convention (rows are batch members):
//!
//! ```text
//! z  = σ(x W_z + h U_z + b_z)
//! r  = σ(x W_r + h U_r + b_r)
//! n  = tanh(x W_n + (r ⊙ h) U_n + b_n)
//! h' = (1 - z) ⊙ h + z ⊙ n
//! ```
//!
//! `W = [W_z | W_r | W_n]` is stored fused as `d_in × 3h`, `U_zr` as `h × 2h`.

use rand::Rng;

use super::graph::{sigmoid, Graph, NodeId};
use super::matrix::{matmul_acc, Matrix};
use super::params::ParamStore;
use crate::error::{shape_err, Error, Result};

/// Default half-width of the uniform weight initialization.
pub const INIT_SCALE: f64 = 0.08;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gru {
    pub d_in: usize,
    pub d_h: usize,
    w: usize,
    u_zr: usize,
    u_n: usize,
    b: usize,
}

fn lookup(store: &ParamStore, name: &str) -> Result<usize> {
    store
        .index_of(name)
        .ok_or_else(|| Error::Parameter(format!("missing parameter {name}")))
}

impl Gru {
    /// Registers freshly initialized weights under `prefix` (biases zero).
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_h: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.insert_uniform(&format!("{prefix}w"), d_in, 3 * d_h, scale, rng)?;
        let u_zr = store.insert_uniform(&format!("{prefix}u_zr"), d_h, 2 * d_h, scale, rng)?;
        let u_n = store.insert_uniform(&format!("{prefix}u_n"), d_h, d_h, scale, rng)?;
        let b = store.insert(format!("{prefix}b"), Matrix::zeros(1, 3 * d_h))?;
        Ok(Self {
            d_in,
            d_h,
            w,
            u_zr,
            u_n,
            b,
        })
    }

    /// Binds to weights already present in `store`.
    pub fn bind(store: &ParamStore, prefix: &str) -> Result<Self> {
        let w = lookup(store, &format!("{prefix}w"))?;
        let u_zr = lookup(store, &format!("{prefix}u_zr"))?;
        let u_n = lookup(store, &format!("{prefix}u_n"))?;
        let b = lookup(store, &format!("{prefix}b"))?;
        let (d_in, three_h) = store.value(w).shape();
        if three_h % 3 != 0 {
            return shape_err(format!("{prefix}w has {three_h} columns, not a multiple of 3"));
        }
        let d_h = three_h / 3;
        if store.value(u_zr).shape() != (d_h, 2 * d_h)
            || store.value(u_n).shape() != (d_h, d_h)
            || store.value(b).shape() != (1, 3 * d_h)
        {
            return shape_err(format!("inconsistent GRU weights under prefix {prefix}"));
        }
        Ok(Self {
            d_in,
            d_h,
            w,
            u_zr,
            u_n,
            b,
        })
    }

    fn check(&self, x: (usize, usize), h: (usize, usize)) -> Result<()> {
        if x.1 != self.d_in || h.1 != self.d_h || x.0 != h.0 {
            return shape_err(format!(
                "GRU({}->{}) got input {:?} and state {:?}",
                self.d_in, self.d_h, x, h
            ));
        }
        Ok(())
    }

    /// Batched step: `x` is `B×d_in`, `h` is `B×d_h`.
    pub fn step(&self, store: &ParamStore, x: &Matrix, h: &Matrix) -> Result<Matrix> {
        self.check(x.shape(), h.shape())?;
        let dh = self.d_h;
        let bsz = x.rows();
        let mut a = Matrix::zeros(bsz, 3 * dh);
        matmul_acc(x, store.value(self.w), &mut a);
        let bias = store.value(self.b).data();
        let mut hzr = Matrix::zeros(bsz, 2 * dh);
        matmul_acc(h, store.value(self.u_zr), &mut hzr);
        let mut z = vec![0.0; dh];
        let mut rh = Matrix::zeros(bsz, dh);
        let mut zs = Matrix::zeros(bsz, dh);
        for r in 0..bsz {
            let ar = a.row(r);
            let hr = h.row(r);
            let gr = hzr.row(r);
            for j in 0..dh {
                z[j] = sigmoid(ar[j] + bias[j] + gr[j]);
                let rg = sigmoid(ar[dh + j] + bias[dh + j] + gr[dh + j]);
                rh.set(r, j, rg * hr[j]);
            }
            zs.row_mut(r).copy_from_slice(&z);
        }
        let mut un = Matrix::zeros(bsz, dh);
        matmul_acc(&rh, store.value(self.u_n), &mut un);
        let mut out = Matrix::zeros(bsz, dh);
        for r in 0..bsz {
            for j in 0..dh {
                let n = (a.get(r, 2 * dh + j) + bias[2 * dh + j] + un.get(r, j)).tanh();
                let zj = zs.get(r, j);
                out.set(r, j, (1.0 - zj) * h.get(r, j) + zj * n);
            }
        }
        Ok(out)
    }

    /// Recorded batched step.
    pub fn step_graph(&self, g: &mut Graph, store: &ParamStore, x: NodeId, h: NodeId) -> Result<NodeId> {
        self.check(g.value(x).shape(), g.value(h).shape())?;
        let dh = self.d_h;
        let w = g.param(store, self.w);
        let u_zr = g.param(store, self.u_zr);
        let u_n = g.param(store, self.u_n);
        let b = g.param(store, self.b);

        let xw = g.matmul(x, w)?;
        let a = g.add_row(xw, b)?;
        let hu = g.matmul(h, u_zr)?;
        let a_zr = g.slice_cols(a, 0, 2 * dh)?;
        let pre_zr = g.add(a_zr, hu)?;
        let zr = g.sigmoid(pre_zr);
        let z = g.slice_cols(zr, 0, dh)?;
        let r = g.slice_cols(zr, dh, dh)?;
        let rh = g.mul(r, h)?;
        let rhu = g.matmul(rh, u_n)?;
        let a_n = g.slice_cols(a, 2 * dh, dh)?;
        let pre_n = g.add(a_n, rhu)?;
        let n = g.tanh(pre_n);
        // h' = h + z ⊙ (n - h)
        let diff = g.sub(n, h)?;
        let zd = g.mul(z, diff)?;
        g.add(h, zd)
    }
}

/// Single GRU step on vectors using the weights stored under `prefix`.
pub fn gru_cell(x_t: &[f64], h_prev: &[f64], store: &ParamStore, prefix: &str) -> Result<Vec<f64>> {
    let gru = Gru::bind(store, prefix)?;
    let out = gru.step(store, &Matrix::row_vector(x_t), &Matrix::row_vector(h_prev))?;
    Ok(out.into_vec())
}

/// Affine map `x W + b` applied row-wise.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Linear {
    pub d_in: usize,
    pub d_out: usize,
    w: usize,
    b: usize,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.insert_uniform(&format!("{prefix}w"), d_in, d_out, scale, rng)?;
        let b = store.insert(format!("{prefix}b"), Matrix::zeros(1, d_out))?;
        Ok(Self { d_in, d_out, w, b })
    }

    pub fn bind(store: &ParamStore, prefix: &str) -> Result<Self> {
        let w = lookup(store, &format!("{prefix}w"))?;
        let b = lookup(store, &format!("{prefix}b"))?;
        let (d_in, d_out) = store.value(w).shape();
        if store.value(b).shape() != (1, d_out) {
            return shape_err(format!("inconsistent linear weights under prefix {prefix}"));
        }
        Ok(Self { d_in, d_out, w, b })
    }

    pub fn forward(&self, store: &ParamStore, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.d_in {
            return shape_err(format!("linear expects {} inputs, got {}", self.d_in, x.cols()));
        }
        let mut out = Matrix::zeros(x.rows(), self.d_out);
        matmul_acc(x, store.value(self.w), &mut out);
        let b = store.value(self.b).data();
        for r in 0..out.rows() {
            for (o, bv) in out.row_mut(r).iter_mut().zip(b) {
                *o += bv;
            }
        }
        Ok(out)
    }

    pub fn forward_graph(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }
}
