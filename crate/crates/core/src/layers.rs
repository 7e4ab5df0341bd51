//! LSTM recurrence, multi-head self-attention and dense projection.
//!
//! Parameters are plain [`Tensor`] holders; to use them in a computation they
//! are registered on a [`Tape`], which yields the matching `*Vars` handles.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::tensor::Tensor;

/// Glorot-uniform `[rows×cols]` matrix (fan_in = cols, fan_out = rows).
pub fn xavier_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches")
}

fn register(tape: &mut Tape, t: &Tensor, trainable: bool) -> Var {
    if trainable {
        tape.leaf(t.clone())
    } else {
        tape.constant(t.clone())
    }
}

/// LSTM weights. Row blocks of `w`, `u` and `b` are ordered as the input,
/// forget, output and candidate gates.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w: Tensor,
    pub u: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w: Var,
    pub u: Var,
    pub b: Var,
    pub hidden: usize,
}

impl LstmParams {
    /// Glorot-initialized weights, zero bias except a forget-gate bias of 1.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let w = xavier_uniform(4 * hidden, input, rng);
        let u = xavier_uniform(4 * hidden, hidden, rng);
        let mut b = Tensor::zeros(&[4 * hidden]);
        b.data_mut()[hidden..2 * hidden].fill(1.0);
        Self { w, u, b }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w: Tensor::zeros(&[4 * hidden, input]),
            u: Tensor::zeros(&[4 * hidden, hidden]),
            b: Tensor::zeros(&[4 * hidden]),
        }
    }

    /// Validates the weights and builds the struct.
    pub fn from_parts(w: Tensor, u: Tensor, b: Tensor) -> Result<Self> {
        let p = Self { w, u, b };
        p.check()?;
        Ok(p)
    }

    pub fn hidden(&self) -> usize {
        self.u.shape()[1]
    }

    pub fn input(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn check(&self) -> Result<()> {
        if self.u.rank() != 2 || self.w.rank() != 2 || self.b.rank() != 1 {
            return Err(Error::dim("lstm params", self.w.shape(), self.u.shape()));
        }
        let h = self.u.shape()[1];
        if self.u.shape()[0] != 4 * h {
            return Err(Error::dim("lstm recurrent weights", self.u.shape(), &[4 * h, h]));
        }
        if self.w.shape()[0] != 4 * h {
            return Err(Error::dim("lstm input weights", self.w.shape(), &[4 * h]));
        }
        if self.b.shape() != [4 * h] {
            return Err(Error::dim("lstm bias", self.b.shape(), &[4 * h]));
        }
        Ok(())
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> LstmVars {
        LstmVars {
            w: register(tape, &self.w, trainable),
            u: register(tape, &self.u, trainable),
            b: register(tape, &self.b, trainable),
            hidden: self.hidden(),
        }
    }

    /// One step on plain tensors, returning `(h_next, c_next)`.
    pub fn step(&self, x: &Tensor, h_prev: &Tensor, c_prev: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let x = tape.constant(x.clone());
        let h = tape.constant(h_prev.clone());
        let c = tape.constant(c_prev.clone());
        let (h, c) = lstm_step(&mut tape, x, h, c, &vars)?;
        Ok((tape.value(h).clone(), tape.value(c).clone()))
    }

    /// Hidden states for a whole sequence on plain tensors.
    pub fn run(&self, xs: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let xs: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let hs = lstm_sequence(&mut tape, &xs, &vars)?;
        Ok(hs.into_iter().map(|h| tape.value(h).clone()).collect())
    }
}

/// Single LSTM step:
///
/// ```text
/// i = σ(W_i x + U_i h + b_i)   f = σ(...)   o = σ(...)   g = tanh(...)
/// c' = f ⊙ c + i ⊙ g           h' = o ⊙ tanh(c')
/// ```
pub fn lstm_step(
    tape: &mut Tape,
    x: Var,
    h_prev: Var,
    c_prev: Var,
    p: &LstmVars,
) -> Result<(Var, Var)> {
    let hdim = p.hidden;
    if tape.shape(h_prev) != [hdim] || tape.shape(c_prev) != [hdim] {
        return Err(Error::dim("lstm_step state", tape.shape(h_prev), &[hdim]));
    }
    let wx = tape.matvec(p.w, x)?;
    let uh = tape.matvec(p.u, h_prev)?;
    let z = tape.add(wx, uh)?;
    let z = tape.add(z, p.b)?;
    let zi = tape.slice(z, 0, hdim)?;
    let zf = tape.slice(z, hdim, hdim)?;
    let zo = tape.slice(z, 2 * hdim, hdim)?;
    let zg = tape.slice(z, 3 * hdim, hdim)?;
    let i = tape.sigmoid(zi);
    let f = tape.sigmoid(zf);
    let o = tape.sigmoid(zo);
    let g = tape.tanh(zg);
    let fc = tape.mul(f, c_prev)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

/// Left-to-right unrolled LSTM from zero initial state; returns every `h_t`.
pub fn lstm_sequence(tape: &mut Tape, xs: &[Var], p: &LstmVars) -> Result<Vec<Var>> {
    if xs.is_empty() {
        return Err(Error::contract("lstm_sequence on an empty sequence"));
    }
    let d = tape.shape(xs[0]).to_vec();
    let mut h = tape.constant(Tensor::zeros(&[p.hidden]));
    let mut c = tape.constant(Tensor::zeros(&[p.hidden]));
    let mut out = Vec::with_capacity(xs.len());
    for &x in xs {
        if tape.shape(x) != d.as_slice() {
            return Err(Error::dim("lstm_sequence input", &d, tape.shape(x)));
        }
        (h, c) = lstm_step(tape, x, h, c, p)?;
        out.push(h);
    }
    Ok(out)
}

/// Query/key/value projections of one attention head, each `[d_k×d_model]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MhaParams {
    pub heads: Vec<HeadParams>,
    /// `[d_model × (H·d_k)]`
    pub w_o: Tensor,
}

#[derive(Debug, Clone)]
pub struct MhaVars {
    pub heads: Vec<(Var, Var, Var)>,
    pub w_o: Var,
    pub d_k: usize,
}

/// Checks that `d_model` splits evenly over `heads` and returns `d_k`.
pub fn head_dim(d_model: usize, heads: usize) -> Result<usize> {
    if heads == 0 || d_model == 0 || !d_model.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "d_model {d_model} is not divisible by head count {heads}"
        )));
    }
    Ok(d_model / heads)
}

impl MhaParams {
    pub fn init<R: Rng + ?Sized>(d_model: usize, heads: usize, rng: &mut R) -> Result<Self> {
        let d_k = head_dim(d_model, heads)?;
        let heads = (0..heads)
            .map(|_| HeadParams {
                w_q: xavier_uniform(d_k, d_model, rng),
                w_k: xavier_uniform(d_k, d_model, rng),
                w_v: xavier_uniform(d_k, d_model, rng),
            })
            .collect();
        let w_o = xavier_uniform(d_model, d_model, rng);
        Ok(Self { heads, w_o })
    }

    /// Every projection set to the identity (requires `H == 1`).
    pub fn identity(d_model: usize) -> Self {
        Self {
            heads: vec![HeadParams {
                w_q: Tensor::identity(d_model),
                w_k: Tensor::identity(d_model),
                w_v: Tensor::identity(d_model),
            }],
            w_o: Tensor::identity(d_model),
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_o.shape()[0]
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn check(&self) -> Result<()> {
        let d_model = self.d_model();
        let d_k = head_dim(d_model, self.heads.len())?;
        for h in &self.heads {
            for t in [&h.w_q, &h.w_k, &h.w_v] {
                if t.shape() != [d_k, d_model] {
                    return Err(Error::dim("attention projection", t.shape(), &[d_k, d_model]));
                }
            }
        }
        if self.w_o.shape() != [d_model, d_model] {
            return Err(Error::dim("attention output", self.w_o.shape(), &[d_model, d_model]));
        }
        Ok(())
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> MhaVars {
        let heads = self
            .heads
            .iter()
            .map(|h| {
                (
                    register(tape, &h.w_q, trainable),
                    register(tape, &h.w_k, trainable),
                    register(tape, &h.w_v, trainable),
                )
            })
            .collect();
        MhaVars {
            heads,
            w_o: register(tape, &self.w_o, trainable),
            d_k: self.d_model() / self.heads.len(),
        }
    }

    /// Attention on plain tensors: `(outputs, per-head weight matrices)`.
    pub fn run(&self, seq: &[Tensor]) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        self.check()?;
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let xs: Vec<Var> = seq.iter().map(|x| tape.constant(x.clone())).collect();
        let out = multi_head_attention(&mut tape, &xs, &vars)?;
        Ok((
            out.outputs.iter().map(|&v| tape.value(v).clone()).collect(),
            out.weights.iter().map(|&v| tape.value(v).clone()).collect(),
        ))
    }
}

/// Output sequence plus the `[T×T]` attention weights of each head.
#[derive(Debug, Clone)]
pub struct Attention {
    pub outputs: Vec<Var>,
    pub weights: Vec<Var>,
}

/// Full (non-causal) multi-head scaled dot-product self-attention.
pub fn multi_head_attention(tape: &mut Tape, seq: &[Var], p: &MhaVars) -> Result<Attention> {
    if seq.is_empty() {
        return Err(Error::contract("attention over an empty sequence"));
    }
    let x = tape.stack(seq)?;
    let scale = 1.0 / (p.d_k as f64).sqrt();
    let mut head_outputs = Vec::with_capacity(p.heads.len());
    let mut weights = Vec::with_capacity(p.heads.len());
    for &(wq, wk, wv) in &p.heads {
        let wq_t = tape.transpose(wq)?;
        let wk_t = tape.transpose(wk)?;
        let wv_t = tape.transpose(wv)?;
        let q = tape.matmul(x, wq_t)?;
        let k = tape.matmul(x, wk_t)?;
        let v = tape.matmul(x, wv_t)?;
        let k_t = tape.transpose(k)?;
        let scores = tape.matmul(q, k_t)?;
        let scores = tape.scale(scores, scale);
        let a = tape.softmax_rows(scores)?;
        weights.push(a);
        head_outputs.push(tape.matmul(a, v)?);
    }
    let cat = tape.concat_cols(&head_outputs)?;
    let wo_t = tape.transpose(p.w_o)?;
    let out = tape.matmul(cat, wo_t)?;
    let outputs = (0..seq.len())
        .map(|t| tape.row(out, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(Attention { outputs, weights })
}

/// `W x + b`.
pub fn dense(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let wx = tape.matvec(w, x)?;
    tape.add(wx, b)
}
