//! Training loop, evaluation, and run artifacts.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::{LossMode, TrainConfig};
use crate::data::{class_counts, make_batches, read_dataset, write_dataset, Dataset};
use crate::error::{Error, Result};
use crate::mccl::{cet_loss, mccl_loss, total_loss, ClassStats};
use crate::metrics::{argmax, MetricsReport};
use crate::model::{forward_model, ModelConfig, ModelParams, ModelVars};
use crate::optim::{cosine_lr, OptimState};
use crate::rng::Rng;
use crate::tape::{Tape, Var};

pub const CSV_HEADER: &str = "epoch,lr,loss_mc,loss_cet,loss_all,war,uar";

/// Bags per evaluation forward pass.
const EVAL_CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub loss_mc: f64,
    pub loss_cet: f64,
    pub loss_all: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_mc: f64,
    pub loss_cet: f64,
    pub loss_all: f64,
    pub war: f64,
    pub uar: f64,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.lr, self.loss_mc, self.loss_cet, self.loss_all, self.war, self.uar
        )
    }
}

pub fn history_csv(records: &[EpochRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// Nodes of one batch's loss computation.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub logits: Var,
    pub loss_mc: Var,
    pub loss_cet: Var,
    /// the quantity that is differentiated for the given mode
    pub objective: Var,
}

/// Forward pass plus both loss terms. Contrastive weights read the logits detached.
pub fn batch_losses(
    tape: &mut Tape,
    vars: &ModelVars,
    config: &ModelConfig,
    stats: &ClassStats,
    bags: Var,
    labels: &[usize],
    mode: LossMode,
) -> Result<LossNodes> {
    let (logits, x_bag) = forward_model(tape, bags, vars, config)?;
    let loss_cet = cet_loss(tape, logits, labels)?;
    let logit_values = tape.value(logits).clone();
    let loss_mc = mccl_loss(
        tape,
        x_bag,
        labels,
        stats,
        &logit_values,
        &vars.scales,
        config.log_form,
    )?;
    let objective = match mode {
        LossMode::Full => total_loss(tape, loss_mc, loss_cet)?,
        LossMode::CetOnly => loss_cet,
        LossMode::MccOnly => loss_mc,
    };
    Ok(LossNodes {
        logits,
        loss_mc,
        loss_cet,
        objective,
    })
}

pub struct Trainer {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub stats: ClassStats,
    optim: OptimState,
    names: Vec<String>,
    seed: u64,
    step: usize,
    total_steps: usize,
    steps_per_epoch: usize,
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub losses: StepLosses,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Trainer {
    /// Parameters come from `seed`; class statistics from `train_set`.
    pub fn new(config: TrainConfig, train_set: &Dataset, seed: u64) -> Result<Self> {
        config.validate()?;
        let m = &config.model;
        if (
            train_set.num_classes,
            train_set.instances,
            train_set.feat_dim,
        ) != (m.k, m.t, m.c_in)
        {
            return Err(Error::Config(format!(
                "dataset has K={}, T={}, C_in={} but the model expects K={}, T={}, C_in={}",
                train_set.num_classes, train_set.instances, train_set.feat_dim, m.k, m.t, m.c_in
            )));
        }
        let stats = ClassStats::new(class_counts(train_set), m.tau0)?;
        let params = ModelParams::init(m, seed)?;
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        let optim = {
            let named = params.named();
            let refs: Vec<_> = named.iter().map(|(_, t)| *t).collect();
            OptimState::new(config.optim.clone(), &refs)
        };
        let steps_per_epoch = if train_set.len() < 2 {
            0
        } else {
            let full = train_set.len() / config.batch_size;
            full + usize::from(train_set.len() % config.batch_size >= 2)
        };
        if steps_per_epoch == 0 {
            return Err(Error::InvalidArgument(
                "training split needs at least 2 bags".into(),
            ));
        }
        Ok(Trainer {
            total_steps: steps_per_epoch * config.epochs,
            steps_per_epoch,
            config,
            params,
            stats,
            optim,
            names,
            seed,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn current_lr(&self) -> f64 {
        let o = &self.config.optim;
        cosine_lr(self.step, self.total_steps, o.lr_max, o.lr_min)
    }

    /// Shuffle seed of a given epoch.
    pub fn epoch_seed(&self, epoch: usize) -> u64 {
        Rng::fork(self.seed, 0x100 + epoch as u64).next_u64()
    }

    /// One optimizer step on the listed bags at the scheduled learning rate.
    pub fn step(&mut self, data: &Dataset, batch: &[usize]) -> Result<StepOutcome> {
        let lr = self.current_lr();
        let (x, labels) = data.batch(batch);
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let xv = tape.constant(x);
        let nodes = batch_losses(
            &mut tape,
            &vars,
            &self.config.model,
            &self.stats,
            xv,
            &labels,
            self.config.loss,
        )?;
        let losses = StepLosses {
            loss_mc: tape.value(nodes.loss_mc).item(),
            loss_cet: tape.value(nodes.loss_cet).item(),
            loss_all: tape.value(nodes.objective).item(),
        };
        if !(losses.loss_all.is_finite()
            && losses.loss_mc.is_finite()
            && losses.loss_cet.is_finite())
        {
            return Err(Error::NonFinite(format!(
                "loss at step {} (L_MC = {}, L_CET = {})",
                self.step, losses.loss_mc, losses.loss_cet
            )));
        }
        let predictions = tape
            .value(nodes.logits)
            .data()
            .chunks(self.config.model.k)
            .map(argmax)
            .collect();
        tape.backward(nodes.objective)?;
        let grads: Vec<_> = vars
            .all()
            .into_iter()
            .map(|v| tape.grad(v).expect("parameters require grad"))
            .collect();
        drop(tape);
        let mut params = self.params.tensors_mut();
        self.optim.step(&mut params, &grads, &self.names, lr)?;
        self.step += 1;
        Ok(StepOutcome {
            losses,
            predictions,
            labels,
        })
    }

    /// Runs one shuffled pass. Reported losses are step means; WAR/UAR come
    /// from the predictions made during the pass.
    pub fn run_epoch(&mut self, data: &Dataset, epoch: usize) -> Result<EpochRecord> {
        let batches = make_batches(data.len(), self.config.batch_size, self.epoch_seed(epoch))?;
        debug_assert_eq!(batches.len(), self.steps_per_epoch);
        let lr = self.current_lr();
        let (mut mc, mut cet, mut all) = (0.0, 0.0, 0.0);
        let (mut truth, mut pred) = (Vec::new(), Vec::new());
        for batch in &batches {
            let out = self.step(data, batch).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch}: {msg}")),
                other => other,
            })?;
            mc += out.losses.loss_mc;
            cet += out.losses.loss_cet;
            all += out.losses.loss_all;
            truth.extend(out.labels);
            pred.extend(out.predictions);
        }
        let n = batches.len() as f64;
        let m = MetricsReport::from_predictions(self.config.model.k, &truth, &pred)?;
        Ok(EpochRecord {
            epoch,
            lr,
            loss_mc: mc / n,
            loss_cet: cet / n,
            loss_all: all / n,
            war: m.war,
            uar: m.uar,
        })
    }
}

/// Predicted class per bag, in dataset order.
pub fn predict(
    params: &ModelParams,
    config: &ModelConfig,
    dataset: &Dataset,
) -> Result<Vec<usize>> {
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let chunks: Vec<Result<Vec<usize>>> = indices
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let (x, _) = dataset.batch(chunk);
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape);
            let xv = tape.constant(x);
            let (logits, _) = forward_model(&mut tape, xv, &vars, config)?;
            Ok(tape
                .value(logits)
                .data()
                .chunks(config.k)
                .map(argmax)
                .collect())
        })
        .collect();
    let mut out = Vec::with_capacity(dataset.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

pub fn evaluate(
    params: &ModelParams,
    config: &ModelConfig,
    dataset: &Dataset,
) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot evaluate an empty dataset".into(),
        ));
    }
    let pred = predict(params, config, dataset)?;
    MetricsReport::from_predictions(config.k, &dataset.labels(), &pred)
}

/// Both loss terms over the whole dataset as one batch, without updating anything.
pub fn dataset_losses(
    params: &ModelParams,
    config: &ModelConfig,
    stats: &ClassStats,
    dataset: &Dataset,
    mode: LossMode,
) -> Result<StepLosses> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    let (x, labels) = dataset.batch(&all);
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let xv = tape.constant(x);
    let nodes = batch_losses(&mut tape, &vars, config, stats, xv, &labels, mode)?;
    Ok(StepLosses {
        loss_mc: tape.value(nodes.loss_mc).item(),
        loss_cet: tape.value(nodes.loss_cet).item(),
        loss_all: tape.value(nodes.objective).item(),
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Final parameters, rounded to checkpoint (`f32`) precision.
    pub params: ModelParams,
    pub class_counts: Vec<usize>,
    pub train_set: Dataset,
    pub test_set: Dataset,
    /// Held-out metrics of the rounded parameters.
    pub test_metrics: MetricsReport,
}

impl TrainOutcome {
    pub fn checkpoint(&self, config: &TrainConfig) -> Checkpoint {
        Checkpoint {
            config: config.clone(),
            class_counts: self.class_counts.clone(),
            params: self.params.clone(),
        }
    }
}

/// Stratified split, full training run, and held-out evaluation.
pub fn train(config: &TrainConfig, dataset: &Dataset, seed: u64) -> Result<TrainOutcome> {
    let split_seed = Rng::fork(seed, 2).next_u64();
    let (train_set, test_set) = dataset.stratified_split(config.test_fraction, split_seed)?;
    let mut trainer = Trainer::new(config.clone(), &train_set, seed)?;
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        history.push(trainer.run_epoch(&train_set, epoch)?);
    }
    let mut params = trainer.params;
    params.narrow_to_f32();
    let eval_set = if test_set.is_empty() {
        &train_set
    } else {
        &test_set
    };
    let test_metrics = evaluate(&params, &config.model, eval_set)?;
    Ok(TrainOutcome {
        history,
        params,
        class_counts: trainer.stats.counts().to_vec(),
        train_set,
        test_set,
        test_metrics,
    })
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.mick";
pub const HELDOUT_FILE: &str = "heldout.mibg";
pub const CONFIG_FILE: &str = "config.txt";
pub const REPORT_FILE: &str = "heldout_report.txt";

/// Trains on a `.mibg` file and writes the run artifacts into `out_dir`.
pub fn train_to_dir(
    config: &TrainConfig,
    data_path: &Path,
    out_dir: &Path,
    seed: u64,
) -> Result<TrainOutcome> {
    let dataset = read_dataset(data_path)?;
    let outcome = train(config, &dataset, seed)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join(METRICS_FILE), history_csv(&outcome.history))?;
    std::fs::write(out_dir.join(CONFIG_FILE), config.to_kv())?;
    outcome
        .checkpoint(config)
        .write(out_dir.join(CHECKPOINT_FILE))?;
    write_dataset(&outcome.test_set, out_dir.join(HELDOUT_FILE))?;
    std::fs::write(
        out_dir.join(REPORT_FILE),
        format_report(&outcome.test_metrics),
    )?;
    Ok(outcome)
}

pub fn format_report(m: &MetricsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "war = {}", m.war);
    let _ = writeln!(s, "uar = {}", m.uar);
    for (i, r) in m.per_class_recall.iter().enumerate() {
        match r {
            Some(r) => {
                let _ = writeln!(s, "recall[{i}] = {r}");
            }
            None => {
                let _ = writeln!(s, "recall[{i}] = n/a");
            }
        }
    }
    let _ = writeln!(s, "confusion (rows = true class):");
    for row in &m.confusion {
        let cells: Vec<String> = row.iter().map(ToString::to_string).collect();
        let _ = writeln!(s, "  {}", cells.join(" "));
    }
    s
}
