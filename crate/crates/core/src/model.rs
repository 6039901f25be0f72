//! End-to-end bag classifier: per-instance encoder → graph interaction →
//! gated recurrent aggregation → self-attention → temporal mean → linear head.

use crate::error::{Error, Result};
use crate::geiim::{geiim_forward, GeiimParams, GeiimVars};
use crate::mccl::{ScaleSet, ScaleVars};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::wian::{aggregate, instance_weights, mhsa, wian_forward, WianParams, WianVars};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// raw per-instance feature width
    pub c_in: usize,
    /// encoder output / graph module width
    pub c: usize,
    /// node-embedding width of the adjacency
    pub d: usize,
    /// recurrent and attention width
    pub c_h: usize,
    /// contrastive embedding width
    pub e: usize,
    pub n_heads: usize,
    pub k: usize,
    pub t: usize,
    pub scales: Vec<usize>,
    pub tau0: f64,
    pub log_form: bool,
    pub enc_hidden: usize,
    /// Use `H = X` exactly (α fixed at 1).
    pub geiim_bypass: bool,
    /// Replace the instance weights with the constant `1/C`.
    pub uniform_weights: bool,
    /// Force the dynamic weight gate to 1 (plain LSTM cell).
    pub dwg_bypass: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            c_in: 12,
            c: 16,
            d: 8,
            c_h: 16,
            e: 8,
            n_heads: 4,
            k: 7,
            t: 16,
            scales: vec![1, 8, 16],
            tau0: 0.1,
            log_form: false,
            enc_hidden: 16,
            geiim_bypass: false,
            uniform_weights: false,
            dwg_bypass: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("c_in", self.c_in),
            ("c", self.c),
            ("d", self.d),
            ("c_h", self.c_h),
            ("e", self.e),
            ("n_heads", self.n_heads),
            ("t", self.t),
            ("enc_hidden", self.enc_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.k < 2 {
            return Err(Error::Config(format!(
                "k must be at least 2, got {}",
                self.k
            )));
        }
        if !self.c_h.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "c_h = {} is not divisible by n_heads = {}",
                self.c_h, self.n_heads
            )));
        }
        if self.scales.is_empty() || self.scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "scales must be non-empty and strictly increasing, got {:?}",
                self.scales
            )));
        }
        if self.scales.iter().any(|&s| s == 0 || s > self.c_h) {
            return Err(Error::Config(format!(
                "scales {:?} must lie in [1, c_h = {}]",
                self.scales, self.c_h
            )));
        }
        if !(self.tau0 > 0.0 && self.tau0.is_finite()) {
            return Err(Error::Config(format!(
                "tau0 must be positive, got {}",
                self.tau0
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[in × out]`
    pub w: Tensor,
    /// `[out]`
    pub b: Tensor,
}

impl Linear {
    /// Uniform `[-1/√in, 1/√in]` weights, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.uniform_in(-bound, bound))
            .collect();
        Linear {
            w: Tensor::new(vec![fan_in, fan_out], data).expect("init shape"),
            b: Tensor::zeros(&[fan_out]),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

impl LinearVars {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.w)?;
        tape.add(y, self.b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub enc1: Linear,
    pub enc2: Linear,
    pub geiim: GeiimParams,
    pub wian: WianParams,
    pub scales: ScaleSet,
    pub classifier: Linear,
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub enc1: LinearVars,
    pub enc2: LinearVars,
    pub geiim: GeiimVars,
    pub wian: WianVars,
    pub scales: ScaleVars,
    pub classifier: LinearVars,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::fork(seed, 1);
        Ok(ModelParams {
            enc1: Linear::init(config.c_in, config.enc_hidden, &mut rng),
            enc2: Linear::init(config.enc_hidden, config.c, &mut rng),
            geiim: GeiimParams::init(config.t, config.d, &mut rng),
            wian: WianParams::init(config.c, config.c_h, config.n_heads, &mut rng)?,
            scales: ScaleSet::init(&config.scales, config.c_h, config.e, &mut rng)?,
            classifier: Linear::init(config.c_h, config.k, &mut rng),
        })
    }

    /// Every parameter with a stable, unique name. Order matches [`ModelVars::all`].
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("enc1.w".into(), &self.enc1.w),
            ("enc1.b".into(), &self.enc1.b),
            ("enc2.w".into(), &self.enc2.w),
            ("enc2.b".into(), &self.enc2.b),
        ];
        out.extend(
            self.geiim
                .named()
                .into_iter()
                .map(|(n, t)| (n.to_string(), t)),
        );
        out.extend(self.wian.named());
        out.extend(self.scales.named());
        out.push(("classifier.w".into(), &self.classifier.w));
        out.push(("classifier.b".into(), &self.classifier.b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.enc1.w,
            &mut self.enc1.b,
            &mut self.enc2.w,
            &mut self.enc2.b,
        ];
        out.extend(self.geiim.tensors_mut());
        out.extend(self.wian.tensors_mut());
        out.extend(self.scales.tensors_mut());
        out.push(&mut self.classifier.w);
        out.push(&mut self.classifier.b);
        out
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.named().into_iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        let lin = |tape: &mut Tape, l: &Linear| LinearVars {
            w: tape.param(l.w.clone()),
            b: tape.param(l.b.clone()),
        };
        ModelVars {
            enc1: lin(tape, &self.enc1),
            enc2: lin(tape, &self.enc2),
            geiim: self.geiim.bind(tape),
            wian: self.wian.bind(tape),
            scales: self.scales.bind(tape),
            classifier: lin(tape, &self.classifier),
        }
    }

    /// Rounds every parameter to `f32` precision, as stored in checkpoints.
    pub fn narrow_to_f32(&mut self) {
        for t in self.tensors_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

impl ModelVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.enc1.w, self.enc1.b, self.enc2.w, self.enc2.b];
        out.extend(self.geiim.all());
        out.extend(self.wian.all());
        out.extend(self.scales.proj.iter().copied());
        out.push(self.classifier.w);
        out.push(self.classifier.b);
        out
    }

    /// Inverse of [`ModelVars::all`] for a given configuration.
    pub fn from_vars(vars: &[Var], config: &ModelConfig) -> Self {
        let mut it = vars.iter().copied();
        let lin = |it: &mut dyn Iterator<Item = Var>| LinearVars {
            w: it.next().expect("w"),
            b: it.next().expect("b"),
        };
        let enc1 = lin(&mut it);
        let enc2 = lin(&mut it);
        let geiim = GeiimVars::take_from(&mut it);
        let wian = WianVars::take_from(&mut it, config.c != config.c_h, config.n_heads);
        let scales = ScaleVars {
            scales: config.scales.clone(),
            proj: (&mut it).take(config.scales.len()).collect(),
        };
        let classifier = lin(&mut it);
        ModelVars {
            enc1,
            enc2,
            geiim,
            wian,
            scales,
            classifier,
        }
    }
}

/// Per-instance two-layer encoder, `[B × T × C_in] -> [B × T × C]`.
pub fn encode(tape: &mut Tape, bags: Var, vars: &ModelVars) -> Result<Var> {
    let shape = tape.shape(bags).to_vec();
    let [b, t, c_in] = shape[..] else {
        return Err(Error::shape("encoder input", &shape, &[]));
    };
    let flat = tape.reshape(bags, &[b * t, c_in])?;
    let h = vars.enc1.apply(tape, flat)?;
    let h = tape.relu(h);
    let out = vars.enc2.apply(tape, h)?;
    let c = tape.shape(out)[1];
    tape.reshape(out, &[b, t, c])
}

/// Returns `(logits [B × K], bag embedding [B × C_h])`.
pub fn forward_model(
    tape: &mut Tape,
    bags: Var,
    vars: &ModelVars,
    config: &ModelConfig,
) -> Result<(Var, Var)> {
    let shape = tape.shape(bags);
    if shape.len() != 3 || shape[1] != config.t || shape[2] != config.c_in {
        return Err(Error::shape(
            "forward_model",
            shape,
            &[0, config.t, config.c_in],
        ));
    }
    let x = encode(tape, bags, vars)?;
    let h = if config.geiim_bypass {
        x
    } else {
        geiim_forward(tape, x, &vars.geiim)?.0
    };
    let weights = if config.dwg_bypass {
        None
    } else if config.uniform_weights {
        let s = tape.shape(h).to_vec();
        Some(tape.constant(Tensor::full(&s, 1.0 / config.c as f64)))
    } else {
        Some(instance_weights(tape, h)?)
    };
    let seq = wian_forward(tape, h, weights, &vars.wian)?;
    let attended = mhsa(tape, seq, &vars.wian.attention)?;
    let x_bag = aggregate(tape, attended)?;
    let logits = vars.classifier.apply(tape, x_bag)?;
    Ok((logits, x_bag))
}
