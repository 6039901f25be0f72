//! Fixed gradient-check workloads for each model component, shared by the
//! `gradcheck` command and the test suites.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geiim::{geiim_forward, GeiimParams, GeiimVars};
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::mccl::{cet_loss, mccl_loss, total_loss, ClassStats, ScaleSet, ScaleVars};
use crate::model::{forward_model, ModelConfig, ModelParams, ModelVars};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::wian::{
    aggregate, instance_weights, mhsa, wian_forward, AttentionParams, AttentionVars, WianParams,
    WianVars,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Module {
    Geiim,
    Wian,
    Mccl,
    All,
}

impl FromStr for Module {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "geiim" => Ok(Module::Geiim),
            "wian" => Ok(Module::Wian),
            "mccl" => Ok(Module::Mccl),
            "all" => Ok(Module::All),
            _ => Err(Error::InvalidArgument(format!(
                "unknown module {s:?} (expected geiim, wian, mccl or all)"
            ))),
        }
    }
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Module::Geiim => "geiim",
            Module::Wian => "wian",
            Module::Mccl => "mccl",
            Module::All => "all",
        })
    }
}

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub report: GradCheckReport,
}

const B: usize = 3;
const T: usize = 4;
const C: usize = 6;
const CH: usize = 8;
const HEADS: usize = 2;
const D: usize = 3;
const E: usize = 4;

fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.uniform_in(lo, hi)).collect(),
    )
    .expect("shape")
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output coordinate matters.
fn probe(tape: &mut Tape, out: Var, rng: &mut Rng) -> Result<Var> {
    let r = rand_tensor(tape.shape(out), -1.0, 1.0, rng);
    let r = tape.constant(r);
    let prod = tape.mul(out, r)?;
    Ok(tape.sum_all(prod))
}

fn toy_config() -> ModelConfig {
    ModelConfig {
        c_in: 5,
        c: C,
        d: D,
        c_h: CH,
        e: E,
        n_heads: HEADS,
        k: 3,
        t: T,
        scales: vec![1, 4, 8],
        tau0: 0.5,
        log_form: false,
        enc_hidden: 6,
        geiim_bypass: false,
        uniform_weights: false,
        dwg_bypass: false,
    }
}

/// Labels with a same-class partner for every anchor.
const LABELS: [usize; 4] = [0, 1, 0, 1];

fn check_geiim(eps: f64) -> Result<GradCheckReport> {
    let mut rng = Rng::new(11);
    let g = GeiimParams::init(T, D, &mut rng);
    let alpha_raw = Tensor::scalar(0.3);
    let x = rand_tensor(&[B, T, C], -1.0, 1.0, &mut rng);
    let probe_seed = rng.next_u64();
    grad_check(&[g.n1, g.n2, alpha_raw, x], eps, |tape, v| {
        let vars = GeiimVars {
            n1: v[0],
            n2: v[1],
            alpha_raw: v[2],
        };
        let (h, _) = geiim_forward(tape, v[3], &vars)?;
        probe(tape, h, &mut Rng::new(probe_seed))
    })
}

fn check_wian(eps: f64) -> Result<GradCheckReport> {
    let mut rng = Rng::new(12);
    let p = WianParams::init(C, CH, HEADS, &mut rng)?;
    let mut params: Vec<Tensor> = p.named().into_iter().map(|(_, t)| t.clone()).collect();
    let n_wian = params.len();
    params.push(rand_tensor(&[B, T, C], -1.0, 1.0, &mut rng));
    let probe_seed = rng.next_u64();
    grad_check(&params, eps, |tape, v| {
        let vars = WianVars::take_from(&mut v[..n_wian].iter().copied(), true, HEADS);
        let h = v[n_wian];
        let w = instance_weights(tape, h)?;
        let seq = wian_forward(tape, h, Some(w), &vars)?;
        probe(tape, seq, &mut Rng::new(probe_seed))
    })
}

fn check_attention(eps: f64) -> Result<GradCheckReport> {
    let mut rng = Rng::new(13);
    let a = AttentionParams::init(CH, HEADS, &mut rng)?;
    let seq = rand_tensor(&[B, T, CH], -1.0, 1.0, &mut rng);
    let probe_seed = rng.next_u64();
    grad_check(&[a.wq, a.wk, a.wv, a.wo, seq], eps, |tape, v| {
        let vars = AttentionVars {
            n_heads: HEADS,
            wq: v[0],
            wk: v[1],
            wv: v[2],
            wo: v[3],
        };
        let out = mhsa(tape, v[4], &vars)?;
        let pooled = aggregate(tape, out)?;
        probe(tape, pooled, &mut Rng::new(probe_seed))
    })
}

fn check_contrastive(eps: f64) -> Result<GradCheckReport> {
    let mut rng = Rng::new(14);
    let scales = [1, 4, 8];
    let set = ScaleSet::init(&scales, CH, E, &mut rng)?;
    let x_bag = rand_tensor(&[LABELS.len(), CH], -1.0, 1.0, &mut rng);
    let logits = rand_tensor(&[LABELS.len(), 2], -1.0, 1.0, &mut rng);
    // small counts keep the class weights near 1 so the check is not trivially tight
    let stats = ClassStats::new(vec![2, 1], 0.5)?;
    let mut params = set.proj.clone();
    params.push(x_bag);
    let n = scales.len();
    grad_check(&params, eps, |tape, v| {
        let sv = ScaleVars {
            scales: scales.to_vec(),
            proj: v[..n].to_vec(),
        };
        mccl_loss(tape, v[n], &LABELS, &stats, &logits, &sv, false)
    })
}

fn check_cet(eps: f64) -> Result<GradCheckReport> {
    let mut rng = Rng::new(15);
    let logits = rand_tensor(&[LABELS.len(), 3], -2.0, 2.0, &mut rng);
    grad_check(&[logits], eps, |tape, v| cet_loss(tape, v[0], &LABELS))
}

fn check_end_to_end(eps: f64) -> Result<GradCheckReport> {
    let cfg = toy_config();
    let params = ModelParams::init(&cfg, 16)?;
    let mut rng = Rng::new(17);
    let bags = rand_tensor(&[LABELS.len(), cfg.t, cfg.c_in], -1.0, 1.0, &mut rng);
    let stats = ClassStats::new(vec![2, 2, 1], cfg.tau0)?;
    // the contrastive weights read the logits detached; fix them at the initial point
    let logits = {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let x = tape.constant(bags.clone());
        let (logits, _) = forward_model(&mut tape, x, &vars, &cfg)?;
        tape.value(logits).clone()
    };
    grad_check(&params.tensors(), eps, |tape, v| {
        let vars = ModelVars::from_vars(v, &cfg);
        let x = tape.constant(bags.clone());
        let (logits_v, x_bag) = forward_model(tape, x, &vars, &cfg)?;
        let l_mc = mccl_loss(tape, x_bag, &LABELS, &stats, &logits, &vars.scales, false)?;
        let l_cet = cet_loss(tape, logits_v, &LABELS)?;
        total_loss(tape, l_mc, l_cet)
    })
}

/// Runs the checks belonging to `module`; `All` adds an end-to-end check of the full model.
pub fn run(module: Module, eps: f64) -> Result<Vec<SuiteResult>> {
    type Check = fn(f64) -> Result<GradCheckReport>;
    let checks: Vec<(&'static str, Check)> = match module {
        Module::Geiim => vec![("geiim", check_geiim)],
        Module::Wian => vec![("wian", check_wian), ("attention", check_attention)],
        Module::Mccl => vec![("mccl", check_contrastive), ("cet", check_cet)],
        Module::All => vec![
            ("geiim", check_geiim),
            ("wian", check_wian),
            ("attention", check_attention),
            ("mccl", check_contrastive),
            ("cet", check_cet),
            ("end_to_end", check_end_to_end),
        ],
    };
    checks
        .into_iter()
        .map(|(name, f)| {
            Ok(SuiteResult {
                name,
                report: f(eps)?,
            })
        })
        .collect()
}
