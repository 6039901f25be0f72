//! Weighted instance aggregation.
//!
//! An LSTM whose candidate-cell contribution is scaled by a dynamic weight
//! gate `d_t = sigmoid(x_t W_s + h_{t-1} U_s) ⊙ w_t`, where `w_t` are the
//! per-channel instance weights `softmax(H_t)` taken from the graph module's
//! output. The recurrent outputs then pass through residual multi-head
//! self-attention and a temporal mean.
//!
//! Weight matrices are stored input-major (`[in × out]`) and applied as `x · W`.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    /// `[C × C_h]`
    pub w: Tensor,
    /// `[C_h × C_h]`
    pub u: Tensor,
    /// `[C_h]`
    pub b: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub n_heads: usize,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WianParams {
    /// `W_s`, `[C × C_h]`
    pub w_s: Tensor,
    /// `U_s`, `[C_h × C_h]`
    pub u_s: Tensor,
    /// Maps the `C`-wide instance weights to the cell width; present only when `C != C_h`.
    pub w_proj: Option<Tensor>,
    pub forget: GateParams,
    pub input: GateParams,
    pub output: GateParams,
    pub candidate: GateParams,
    pub attention: AttentionParams,
}

#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    pub w: Var,
    pub u: Var,
    pub b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub n_heads: usize,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct WianVars {
    pub w_s: Var,
    pub u_s: Var,
    pub w_proj: Option<Var>,
    pub forget: GateVars,
    pub input: GateVars,
    pub output: GateVars,
    pub candidate: GateVars,
    pub attention: AttentionVars,
}

#[derive(Clone, Copy, Debug)]
pub struct RecurrentState {
    pub h: Var,
    pub c: Var,
}

fn uniform(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_in(-bound, bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

impl GateParams {
    fn init(c: usize, ch: usize, bias: f64, rng: &mut Rng) -> Self {
        let bound = 1.0 / (ch as f64).sqrt();
        GateParams {
            w: uniform(&[c, ch], bound, rng),
            u: uniform(&[ch, ch], bound, rng),
            b: Tensor::full(&[ch], bias),
        }
    }

    fn bind(&self, tape: &mut Tape) -> GateVars {
        GateVars {
            w: tape.param(self.w.clone()),
            u: tape.param(self.u.clone()),
            b: tape.param(self.b.clone()),
        }
    }
}

impl AttentionParams {
    pub fn init(width: usize, n_heads: usize, rng: &mut Rng) -> Result<Self> {
        if n_heads == 0 || !width.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "attention width {width} is not divisible by {n_heads} heads"
            )));
        }
        let bound = 1.0 / (width as f64).sqrt();
        Ok(AttentionParams {
            n_heads,
            wq: uniform(&[width, width], bound, rng),
            wk: uniform(&[width, width], bound, rng),
            wv: uniform(&[width, width], bound, rng),
            wo: uniform(&[width, width], bound, rng),
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> AttentionVars {
        AttentionVars {
            n_heads: self.n_heads,
            wq: tape.param(self.wq.clone()),
            wk: tape.param(self.wk.clone()),
            wv: tape.param(self.wv.clone()),
            wo: tape.param(self.wo.clone()),
        }
    }
}

impl WianParams {
    /// Uniform `[-1/√C_h, 1/√C_h]` weights, zero biases except the forget gate at +1.
    pub fn init(c: usize, ch: usize, n_heads: usize, rng: &mut Rng) -> Result<Self> {
        let bound = 1.0 / (ch as f64).sqrt();
        let w_s = uniform(&[c, ch], bound, rng);
        let u_s = uniform(&[ch, ch], bound, rng);
        let w_proj = (c != ch).then(|| uniform(&[c, ch], bound, rng));
        Ok(WianParams {
            w_s,
            u_s,
            w_proj,
            forget: GateParams::init(c, ch, 1.0, rng),
            input: GateParams::init(c, ch, 0.0, rng),
            output: GateParams::init(c, ch, 0.0, rng),
            candidate: GateParams::init(c, ch, 0.0, rng),
            attention: AttentionParams::init(ch, n_heads, rng)?,
        })
    }

    pub fn hidden(&self) -> usize {
        self.u_s.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape) -> WianVars {
        WianVars {
            w_s: tape.param(self.w_s.clone()),
            u_s: tape.param(self.u_s.clone()),
            w_proj: self.w_proj.as_ref().map(|p| tape.param(p.clone())),
            forget: self.forget.bind(tape),
            input: self.input.bind(tape),
            output: self.output.bind(tape),
            candidate: self.candidate.bind(tape),
            attention: self.attention.bind(tape),
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("wian.w_s".into(), &self.w_s),
            ("wian.u_s".into(), &self.u_s),
        ];
        if let Some(p) = &self.w_proj {
            out.push(("wian.w_proj".into(), p));
        }
        for (name, g) in self.gates() {
            out.push((format!("wian.{name}.w"), &g.w));
            out.push((format!("wian.{name}.u"), &g.u));
            out.push((format!("wian.{name}.b"), &g.b));
        }
        let a = &self.attention;
        out.push(("attn.wq".into(), &a.wq));
        out.push(("attn.wk".into(), &a.wk));
        out.push(("attn.wv".into(), &a.wv));
        out.push(("attn.wo".into(), &a.wo));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.w_s, &mut self.u_s];
        if let Some(p) = &mut self.w_proj {
            out.push(p);
        }
        for g in [
            &mut self.forget,
            &mut self.input,
            &mut self.output,
            &mut self.candidate,
        ] {
            out.push(&mut g.w);
            out.push(&mut g.u);
            out.push(&mut g.b);
        }
        let a = &mut self.attention;
        out.extend([&mut a.wq, &mut a.wk, &mut a.wv, &mut a.wo]);
        out
    }

    fn gates(&self) -> [(&'static str, &GateParams); 4] {
        [
            ("forget", &self.forget),
            ("input", &self.input),
            ("output", &self.output),
            ("candidate", &self.candidate),
        ]
    }
}

impl WianVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.w_s, self.u_s];
        out.extend(self.w_proj);
        for g in [self.forget, self.input, self.output, self.candidate] {
            out.extend([g.w, g.u, g.b]);
        }
        let a = self.attention;
        out.extend([a.wq, a.wk, a.wv, a.wo]);
        out
    }

    /// Rebuilds the handles from the order produced by [`WianVars::all`].
    pub fn take_from(it: &mut impl Iterator<Item = Var>, has_proj: bool, n_heads: usize) -> Self {
        let mut next = || it.next().expect("wian var");
        let w_s = next();
        let u_s = next();
        let w_proj = has_proj.then(&mut next);
        let mut gate = || GateVars {
            w: next(),
            u: next(),
            b: next(),
        };
        let (forget, input, output, candidate) = (gate(), gate(), gate(), gate());
        let attention = AttentionVars {
            n_heads,
            wq: next(),
            wk: next(),
            wv: next(),
            wo: next(),
        };
        WianVars {
            w_s,
            u_s,
            w_proj,
            forget,
            input,
            output,
            candidate,
            attention,
        }
    }
}

/// Per-channel instance weights: softmax over the last axis of the graph module output.
pub fn instance_weights(tape: &mut Tape, h: Var) -> Result<Var> {
    let axis = tape
        .shape(h)
        .len()
        .checked_sub(1)
        .ok_or(Error::Axis { axis: 0, rank: 0 })?;
    tape.softmax(h, axis)
}

fn affine(tape: &mut Tape, x: Var, h: Var, g: &GateVars) -> Result<Var> {
    let xw = tape.matmul(x, g.w)?;
    let hu = tape.matmul(h, g.u)?;
    let s = tape.add(xw, hu)?;
    tape.add(s, g.b)
}

/// `d_t = sigmoid(x_t W_s + h_prev U_s) ⊙ w_t`, with `w_t` already at cell width.
pub fn dwg(tape: &mut Tape, x_t: Var, h_prev: Var, w_t: Var, params: &WianVars) -> Result<Var> {
    let xw = tape.matmul(x_t, params.w_s)?;
    let hu = tape.matmul(h_prev, params.u_s)?;
    let pre = tape.add(xw, hu)?;
    let s = tape.sigmoid(pre);
    if tape.shape(s) != tape.shape(w_t) {
        return Err(Error::shape("dwg", tape.shape(s), tape.shape(w_t)));
    }
    tape.mul(s, w_t)
}

/// One recurrent step. `d_t = None` is the neutral gate (all ones), i.e. a plain LSTM step.
pub fn wian_cell(
    tape: &mut Tape,
    x_t: Var,
    state: RecurrentState,
    d_t: Option<Var>,
    params: &WianVars,
) -> Result<RecurrentState> {
    let f_pre = affine(tape, x_t, state.h, &params.forget)?;
    let f = tape.sigmoid(f_pre);
    let i_pre = affine(tape, x_t, state.h, &params.input)?;
    let i = tape.sigmoid(i_pre);
    let o_pre = affine(tape, x_t, state.h, &params.output)?;
    let o = tape.sigmoid(o_pre);
    let g_pre = affine(tape, x_t, state.h, &params.candidate)?;
    let g = tape.tanh(g_pre);

    let keep = tape.mul(f, state.c)?;
    let mut write = tape.mul(i, g)?;
    if let Some(d) = d_t {
        write = tape.mul(write, d)?;
    }
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok(RecurrentState { h, c })
}

pub fn zero_state(tape: &mut Tape, batch: usize, hidden: usize) -> RecurrentState {
    RecurrentState {
        h: tape.constant(Tensor::zeros(&[batch, hidden])),
        c: tape.constant(Tensor::zeros(&[batch, hidden])),
    }
}

/// Unrolls the gated cell over `T` from a zero state and returns every hidden state, `[B × T × C_h]`.
///
/// `weights = None` forces `d_t ≡ 1`.
pub fn wian_forward(
    tape: &mut Tape,
    h_geiim: Var,
    weights: Option<Var>,
    params: &WianVars,
) -> Result<Var> {
    let shape = tape.shape(h_geiim).to_vec();
    let [batch, steps, _] = shape[..] else {
        return Err(Error::shape("wian_forward", &shape, &[]));
    };
    if let Some(w) = weights {
        if tape.shape(w) != shape.as_slice() {
            return Err(Error::shape("wian_forward weights", tape.shape(w), &shape));
        }
    }
    let hidden = tape.shape(params.u_s)[0];
    let mut state = zero_state(tape, batch, hidden);
    let mut outputs = Vec::with_capacity(steps);
    for t in 0..steps {
        let x_t = tape.select(h_geiim, 1, t)?;
        let d_t = match weights {
            Some(w) => {
                let mut w_t = tape.select(w, 1, t)?;
                if let Some(p) = params.w_proj {
                    w_t = tape.matmul(w_t, p)?;
                }
                Some(dwg(tape, x_t, state.h, w_t, params)?)
            }
            None => None,
        };
        state = wian_cell(tape, x_t, state, d_t, params)?;
        outputs.push(state.h);
    }
    tape.stack(&outputs, 1)
}

/// Residual multi-head self-attention over `[B × T × C_h]`; also returns each head's
/// attention matrix `[B × T × T]`.
pub fn mhsa_with_weights(tape: &mut Tape, seq: Var, p: &AttentionVars) -> Result<(Var, Vec<Var>)> {
    let shape = tape.shape(seq).to_vec();
    let [_, _, width] = shape[..] else {
        return Err(Error::shape("mhsa", &shape, &[]));
    };
    if p.n_heads == 0 || !width.is_multiple_of(p.n_heads) {
        return Err(Error::Config(format!(
            "attention width {width} is not divisible by {} heads",
            p.n_heads
        )));
    }
    let head = width / p.n_heads;
    let scale = 1.0 / (head as f64).sqrt();
    let q = tape.matmul(seq, p.wq)?;
    let k = tape.matmul(seq, p.wk)?;
    let v = tape.matmul(seq, p.wv)?;
    let mut heads = Vec::with_capacity(p.n_heads);
    let mut weights = Vec::with_capacity(p.n_heads);
    for hd in 0..p.n_heads {
        let qh = tape.narrow(q, 2, hd * head, head)?;
        let kh = tape.narrow(k, 2, hd * head, head)?;
        let vh = tape.narrow(v, 2, hd * head, head)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax(scores, 2)?;
        heads.push(tape.matmul(attn, vh)?);
        weights.push(attn);
    }
    let cat = tape.concat(&heads, 2)?;
    let projected = tape.matmul(cat, p.wo)?;
    Ok((tape.add(seq, projected)?, weights))
}

pub fn mhsa(tape: &mut Tape, seq: Var, p: &AttentionVars) -> Result<Var> {
    Ok(mhsa_with_weights(tape, seq, p)?.0)
}

/// Temporal mean, `[B × T × C_h] -> [B × C_h]`.
pub fn aggregate(tape: &mut Tape, seq: Var) -> Result<Var> {
    tape.reduce(seq, 1, crate::tape::ReduceKind::Mean)
}
