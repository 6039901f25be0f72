//! Graph-enhanced instance interaction.
//!
//! A learnable adjacency over the `T` instances of a bag,
//! `A = softmax_rows(relu(N1 · N2))`, followed by one diffusion step
//! `H = α X + (1 - α) A X` with `α = sigmoid(alpha_raw)`.
//!
//! The adjacency depends only on the node embeddings, so a single `A` is
//! shared by every bag in the batch.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GeiimParams {
    /// `[T × d]`
    pub n1: Tensor,
    /// `[d × T]`
    pub n2: Tensor,
    /// Unconstrained scalar; the mixing coefficient is `sigmoid(alpha_raw)`.
    pub alpha_raw: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct GeiimVars {
    pub n1: Var,
    pub n2: Var,
    pub alpha_raw: Var,
}

impl GeiimParams {
    /// Embeddings uniform in `[-1/√d, 1/√d]`, `alpha_raw = 0` (α = 0.5).
    pub fn init(instances: usize, embed: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (embed as f64).sqrt();
        let mut draw = |shape: &[usize]| {
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.uniform_in(-bound, bound)).collect();
            Tensor::new(shape.to_vec(), data).expect("init shape")
        };
        let n1 = draw(&[instances, embed]);
        let n2 = draw(&[embed, instances]);
        GeiimParams {
            n1,
            n2,
            alpha_raw: Tensor::scalar(0.0),
        }
    }

    pub fn instances(&self) -> usize {
        self.n1.shape()[0]
    }

    pub fn alpha(&self) -> f64 {
        crate::tape::sigmoid(self.alpha_raw.item())
    }

    pub fn validate(&self, instances: usize) -> Result<()> {
        let (s1, s2) = (self.n1.shape(), self.n2.shape());
        if s1.len() != 2 || s2 != [s1[1], s1[0]] || s1[0] != instances {
            return Err(Error::shape("geiim embeddings", s1, s2));
        }
        if self.alpha_raw.len() != 1 {
            return Err(Error::shape("geiim alpha", self.alpha_raw.shape(), &[]));
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> GeiimVars {
        GeiimVars {
            n1: tape.param(self.n1.clone()),
            n2: tape.param(self.n2.clone()),
            alpha_raw: tape.param(self.alpha_raw.clone()),
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("geiim.n1", &self.n1),
            ("geiim.n2", &self.n2),
            ("geiim.alpha_raw", &self.alpha_raw),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.n1, &mut self.n2, &mut self.alpha_raw]
    }
}

impl GeiimVars {
    pub fn all(&self) -> Vec<Var> {
        vec![self.n1, self.n2, self.alpha_raw]
    }

    pub fn take_from(it: &mut impl Iterator<Item = Var>) -> Self {
        GeiimVars {
            n1: it.next().expect("n1"),
            n2: it.next().expect("n2"),
            alpha_raw: it.next().expect("alpha_raw"),
        }
    }
}

/// `A = softmax(relu(N1 · N2))`, normalized along rows.
pub fn build_adjacency(tape: &mut Tape, n1: Var, n2: Var) -> Result<Var> {
    let logits = tape.matmul(n1, n2)?;
    let r = tape.relu(logits);
    tape.softmax(r, 1)
}

/// `H = α X + (1 - α) A X` for `X` of shape `[B × T × C]` (or `[T × C]`) and `A` of `[T × T]`.
pub fn diffuse(tape: &mut Tape, x: Var, a: Var, alpha: Var) -> Result<Var> {
    let av = tape.value(alpha);
    if av.len() != 1 {
        return Err(Error::shape("diffuse alpha", av.shape(), &[]));
    }
    let al = av.item();
    if !(0.0..=1.0).contains(&al) {
        return Err(Error::InvalidArgument(format!(
            "mixing coefficient {al} outside [0, 1]"
        )));
    }
    let xs = tape.shape(x).to_vec();
    let t_len = xs.len().checked_sub(2).map(|i| xs[i]);
    if t_len != Some(tape.shape(a)[0]) {
        return Err(Error::shape("diffuse", &xs, tape.shape(a)));
    }
    let ax = tape.matmul(a, x)?;
    let keep = tape.mul(alpha, x)?;
    let rest = tape.rsub_scalar(1.0, alpha);
    let mixed = tape.mul(rest, ax)?;
    tape.add(keep, mixed)
}

/// Returns `(H, A)`.
pub fn geiim_forward(tape: &mut Tape, x: Var, params: &GeiimVars) -> Result<(Var, Var)> {
    let a = build_adjacency(tape, params.n1, params.n2)?;
    let alpha = tape.sigmoid(params.alpha_raw);
    let h = diffuse(tape, x, a, alpha)?;
    Ok((h, a))
}
