#![allow(dead_code)]

pub mod props;

use micacl_core::data::{gen_dataset, DatasetSpec};
use micacl_core::tape::{ReduceKind, Tape, Var};
use micacl_core::{Dataset, ModelConfig, ModelParams, Rng, Tensor, TrainConfig};

pub fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.uniform_in(lo, hi)).collect(),
    )
    .unwrap()
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * 1f64.max(a.abs()).max(b.abs())
}

/// Double-loop transcription of the per-scale contrastive loss on a row-major `B × B` similarity matrix.
pub fn brute_contrastive(s: &[f64], labels: &[usize], w: &[f64]) -> f64 {
    let b = labels.len();
    let mut total = 0.0;
    for i in 0..b {
        let mut num = 0.0;
        let mut den = 0.0;
        for k in 0..b {
            if k == i {
                continue;
            }
            let e = s[i * b + k].exp();
            den += e;
            if labels[k] == labels[i] {
                num += w[i] * e;
            }
        }
        total += num / den;
    }
    -total / b as f64
}

/// `S_ij = x_i·x_j / (τ ‖x_i‖ ‖x_j‖)` computed directly.
pub fn brute_similarity(x: &Tensor, tau: f64) -> Vec<f64> {
    let (b, e) = (x.shape()[0], x.shape()[1]);
    let row = |i: usize| &x.data()[i * e..(i + 1) * e];
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    let mut out = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            let (u, v) = (row(i), row(j));
            out[i * b + j] = dot(u, v) / (tau * dot(u, u).sqrt() * dot(v, v).sqrt());
        }
    }
    out
}

/// Model configuration small enough for exhaustive finite differences.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        c_in: 5,
        c: 6,
        d: 3,
        c_h: 8,
        e: 4,
        n_heads: 2,
        k: 3,
        t: 4,
        scales: vec![1, 4, 8],
        tau0: 0.5,
        log_form: false,
        enc_hidden: 6,
        geiim_bypass: false,
        uniform_weights: false,
        dwg_bypass: false,
    }
}

pub fn small_dataset(seed: u64) -> Dataset {
    gen_dataset(&DatasetSpec {
        num_classes: 3,
        instances: 4,
        feat_dim: 5,
        head_count: 12,
        imbalance_ratio: 4.0,
        key_instances: 2,
        noise_sigma: 0.3,
        seed,
    })
    .unwrap()
}

pub fn small_train_config(epochs: usize) -> TrainConfig {
    let text = format!(
        "c = 6\nc_h = 8\nn_heads = 2\nd = 3\nenc_hidden = 6\nepochs = {epochs}\nbatch_size = 4\nlr_max = 2e-3"
    );
    TrainConfig::for_dataset(&text, 3, 4, 5).unwrap()
}

/// Encoder, plain LSTM, residual attention, temporal mean and linear classifier,
/// written without the model's building blocks: fused gate matrices, per-bag
/// attention on 2-D slices, and its own AdamW.
pub struct Reference {
    pub names: Vec<&'static str>,
    pub params: Vec<Tensor>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
    hidden: usize,
    heads: usize,
}

fn hcat(parts: &[&Tensor]) -> Tensor {
    let rows = parts[0].shape()[0];
    let mut data = Vec::new();
    let mut width = 0;
    for p in parts {
        width += p.shape()[1];
    }
    for r in 0..rows {
        for p in parts {
            let w = p.shape()[1];
            data.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
        }
    }
    Tensor::new(vec![rows, width], data).unwrap()
}

fn vcat1(parts: &[&Tensor]) -> Tensor {
    Tensor::vector(parts.iter().flat_map(|p| p.data().to_vec()).collect())
}

impl Reference {
    /// Copies the initial weights of `model` that the reduced pipeline uses.
    pub fn from_model(model: &ModelParams, config: &ModelConfig) -> Self {
        let w = &model.wian;
        let gates = [&w.forget, &w.input, &w.output, &w.candidate];
        let w_all = hcat(&gates.map(|g| &g.w));
        let u_all = hcat(&gates.map(|g| &g.u));
        let b_all = vcat1(&gates.map(|g| &g.b));
        let a = &w.attention;
        let params = vec![
            model.enc1.w.clone(),
            model.enc1.b.clone(),
            model.enc2.w.clone(),
            model.enc2.b.clone(),
            w_all,
            u_all,
            b_all,
            a.wq.clone(),
            a.wk.clone(),
            a.wv.clone(),
            a.wo.clone(),
            model.classifier.w.clone(),
            model.classifier.b.clone(),
        ];
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        Reference {
            names: vec![
                "enc1.w", "enc1.b", "enc2.w", "enc2.b", "lstm.w", "lstm.u", "lstm.b", "wq", "wk",
                "wv", "wo", "cls.w", "cls.b",
            ],
            params,
            m: zeros.clone(),
            v: zeros,
            step: 0,
            hidden: config.c_h,
            heads: config.n_heads,
        }
    }

    fn logits(&self, tape: &mut Tape, p: &[Var], bags: Var) -> Var {
        let ch = self.hidden;
        let shape = tape.shape(bags).to_vec();
        let (b, t) = (shape[0], shape[1]);
        let z = tape.matmul(bags, p[0]).unwrap();
        let z = tape.add(z, p[1]).unwrap();
        let z = tape.relu(z);
        let z = tape.matmul(z, p[2]).unwrap();
        let enc = tape.add(z, p[3]).unwrap();

        let mut h = tape.constant(Tensor::zeros(&[b, ch]));
        let mut c = tape.constant(Tensor::zeros(&[b, ch]));
        let mut hs = Vec::new();
        for step in 0..t {
            let x = tape.select(enc, 1, step).unwrap();
            let zx = tape.matmul(x, p[4]).unwrap();
            let zh = tape.matmul(h, p[5]).unwrap();
            let zz = tape.add(zx, zh).unwrap();
            let zz = tape.add(zz, p[6]).unwrap();
            let part = |tape: &mut Tape, k: usize| tape.narrow(zz, 1, k * ch, ch).unwrap();
            let (f, i, o, g) = (part(tape, 0), part(tape, 1), part(tape, 2), part(tape, 3));
            let (f, i, o, g) = (
                tape.sigmoid(f),
                tape.sigmoid(i),
                tape.sigmoid(o),
                tape.tanh(g),
            );
            let fc = tape.mul(f, c).unwrap();
            let ig = tape.mul(i, g).unwrap();
            c = tape.add(fc, ig).unwrap();
            let tc = tape.tanh(c);
            h = tape.mul(o, tc).unwrap();
            hs.push(h);
        }

        let dh = ch / self.heads;
        let mut pooled = Vec::new();
        for bi in 0..b {
            let rows: Vec<Var> = hs
                .iter()
                .map(|&hv| tape.select(hv, 0, bi).unwrap())
                .collect();
            let s = tape.stack(&rows, 0).unwrap();
            let q = tape.matmul(s, p[7]).unwrap();
            let k = tape.matmul(s, p[8]).unwrap();
            let v = tape.matmul(s, p[9]).unwrap();
            let mut outs = Vec::new();
            for hd in 0..self.heads {
                let qh = tape.narrow(q, 1, hd * dh, dh).unwrap();
                let kh = tape.narrow(k, 1, hd * dh, dh).unwrap();
                let vh = tape.narrow(v, 1, hd * dh, dh).unwrap();
                let kt = tape.transpose(kh).unwrap();
                let sc = tape.matmul(qh, kt).unwrap();
                let sc = tape.scale(sc, 1.0 / (dh as f64).sqrt());
                let att = tape.softmax(sc, 1).unwrap();
                outs.push(tape.matmul(att, vh).unwrap());
            }
            let cat = tape.concat(&outs, 1).unwrap();
            let proj = tape.matmul(cat, p[10]).unwrap();
            let res = tape.add(s, proj).unwrap();
            pooled.push(tape.reduce(res, 0, ReduceKind::Mean).unwrap());
        }
        let pooled = tape.stack(&pooled, 0).unwrap();
        let out = tape.matmul(pooled, p[11]).unwrap();
        tape.add(out, p[12]).unwrap()
    }

    /// Mean cross-entropy of the batch, then one AdamW step. Returns the loss before the step.
    pub fn train_step(&mut self, bags: &Tensor, labels: &[usize], lr: f64, wd: f64) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.param(p.clone())).collect();
        let x = tape.constant(bags.clone());
        let logits = self.logits(&mut tape, &vars, x);
        let lsm = tape.log_softmax(logits, 1).unwrap();
        let mut picked = Vec::new();
        for (i, &y) in labels.iter().enumerate() {
            let row = tape.select(lsm, 0, i).unwrap();
            picked.push(tape.select(row, 0, y).unwrap());
        }
        let all = tape.stack(&picked, 0).unwrap();
        let mean = tape.reduce(all, 0, ReduceKind::Mean).unwrap();
        let loss = tape.neg(mean);
        let value = tape.value(loss).item();
        tape.backward(loss).unwrap();
        let grads: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v).unwrap()).collect();

        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        self.step += 1;
        for (pi, g) in grads.iter().enumerate() {
            for j in 0..g.len() {
                let p = &mut self.params[pi].data_mut()[j];
                *p *= 1.0 - lr * wd;
                let gj = g.data()[j];
                self.m[pi][j] = b1 * self.m[pi][j] + (1.0 - b1) * gj;
                self.v[pi][j] = b2 * self.v[pi][j] + (1.0 - b2) * gj * gj;
                let mh = self.m[pi][j] / (1.0 - b1.powi(self.step));
                let vh = self.v[pi][j] / (1.0 - b2.powi(self.step));
                *p -= lr * mh / (vh.sqrt() + eps);
            }
        }
        value
    }
}

pub fn reference_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if step >= total {
        return lr_min;
    }
    lr_min
        + 0.5
            * (lr_max - lr_min)
            * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// Runs `steps` CET-only steps of the full model (with the reductions switched on) and of
/// [`Reference`] on identical batches; returns the two per-step loss sequences.
pub fn reduction_losses(steps: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    use micacl_core::train::Trainer;
    use micacl_core::LossMode;

    let data = gen_dataset(&DatasetSpec {
        head_count: 40,
        ..DatasetSpec::default()
    })
    .unwrap();
    let mut cfg = TrainConfig::for_dataset(
        "geiim_bypass = false\nuniform_weights = true\ndwg_bypass = true\nloss = cet-only\nlr_max = 2e-3",
        data.num_classes,
        data.instances,
        data.feat_dim,
    )
    .unwrap();
    cfg.epochs = 2;
    assert_eq!(cfg.loss, LossMode::CetOnly);
    let mut trainer = Trainer::new(cfg.clone(), &data, seed).unwrap();
    // alpha = sigmoid(40) rounds to exactly 1, so the graph module returns its input unchanged
    trainer.params.geiim.alpha_raw = Tensor::scalar(40.0);
    let mut reference = Reference::from_model(&trainer.params, &cfg.model);

    let total = trainer.total_steps();
    let mut rng = Rng::new(seed ^ 0xA5A5);
    let mut model_losses = Vec::new();
    let mut ref_losses = Vec::new();
    for step in 0..steps {
        let batch: Vec<usize> = (0..cfg.batch_size).map(|_| rng.below(data.len())).collect();
        let out = trainer.step(&data, &batch).unwrap();
        model_losses.push(out.losses.loss_cet);
        let (x, labels) = data.batch(&batch);
        let lr = reference_lr(step, total, cfg.optim.lr_max, cfg.optim.lr_min);
        ref_losses.push(reference.train_step(&x, &labels, lr, cfg.optim.weight_decay));
    }
    (model_losses, ref_losses)
}
