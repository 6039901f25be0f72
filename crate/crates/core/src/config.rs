//! Training configuration and its flat `key = value` text form.
//!
//! One assignment per line; blank lines and `#` comments are ignored. Keys are
//! the field names of [`ModelConfig`], [`OptimConfig`] and the training-loop
//! settings below. Unknown keys are an error.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::OptimConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LossMode {
    /// contrastive + classification
    #[default]
    Full,
    CetOnly,
    MccOnly,
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(LossMode::Full),
            "cet-only" => Ok(LossMode::CetOnly),
            "mccl-only" => Ok(LossMode::MccOnly),
            _ => Err(Error::Config(format!(
                "unknown loss mode {s:?} (expected full, cet-only or mccl-only)"
            ))),
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossMode::Full => "full",
            LossMode::CetOnly => "cet-only",
            LossMode::MccOnly => "mccl-only",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub test_fraction: f64,
    pub loss: LossMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            epochs: 50,
            batch_size: 16,
            test_fraction: 0.2,
            loss: LossMode::Full,
        }
    }
}

/// `{1, c_h/2, c_h}` without duplicates.
pub fn default_scales(c_h: usize) -> Vec<usize> {
    let mut s: Vec<usize> = [1, c_h / 2, c_h].into_iter().filter(|&v| v > 0).collect();
    s.dedup();
    s
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse value {value:?} for key {key}")))
}

impl TrainConfig {
    /// Applies assignments from `text` and returns the set of keys it assigned.
    pub fn apply_kv(&mut self, text: &str) -> Result<BTreeSet<String>> {
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected key = value, got {raw:?}",
                    lineno + 1
                ))
            })?;
            let (key, value) = (key.trim(), value.trim());
            self.set(key, value)?;
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("key {key} assigned twice")));
            }
        }
        Ok(seen)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let o = &mut self.optim;
        match key {
            "c_in" => m.c_in = parse(key, value)?,
            "c" => m.c = parse(key, value)?,
            "d" => m.d = parse(key, value)?,
            "c_h" => m.c_h = parse(key, value)?,
            "e" => m.e = parse(key, value)?,
            "n_heads" => m.n_heads = parse(key, value)?,
            "k" => m.k = parse(key, value)?,
            "t" => m.t = parse(key, value)?,
            "scales" => {
                m.scales = value
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "tau0" => m.tau0 = parse(key, value)?,
            "log_form" => m.log_form = parse(key, value)?,
            "enc_hidden" => m.enc_hidden = parse(key, value)?,
            "geiim_bypass" => m.geiim_bypass = parse(key, value)?,
            "uniform_weights" => m.uniform_weights = parse(key, value)?,
            "dwg_bypass" => m.dwg_bypass = parse(key, value)?,
            "lr_max" => o.lr_max = parse(key, value)?,
            "lr_min" => o.lr_min = parse(key, value)?,
            "weight_decay" => o.weight_decay = parse(key, value)?,
            "beta1" => o.beta1 = parse(key, value)?,
            "beta2" => o.beta2 = parse(key, value)?,
            "eps" => o.eps = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "test_fraction" => self.test_fraction = parse(key, value)?,
            "loss" => self.loss = value.parse()?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Full configuration as text; `apply_kv` on a default config reproduces `self` exactly.
    pub fn to_kv(&self) -> String {
        let m = &self.model;
        let o = &self.optim;
        let scales: Vec<String> = m.scales.iter().map(ToString::to_string).collect();
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("c_in", m.c_in.to_string());
        put("c", m.c.to_string());
        put("d", m.d.to_string());
        put("c_h", m.c_h.to_string());
        put("e", m.e.to_string());
        put("n_heads", m.n_heads.to_string());
        put("k", m.k.to_string());
        put("t", m.t.to_string());
        put("scales", scales.join(","));
        put("tau0", m.tau0.to_string());
        put("log_form", m.log_form.to_string());
        put("enc_hidden", m.enc_hidden.to_string());
        put("geiim_bypass", m.geiim_bypass.to_string());
        put("uniform_weights", m.uniform_weights.to_string());
        put("dwg_bypass", m.dwg_bypass.to_string());
        put("lr_max", o.lr_max.to_string());
        put("lr_min", o.lr_min.to_string());
        put("weight_decay", o.weight_decay.to_string());
        put("beta1", o.beta1.to_string());
        put("beta2", o.beta2.to_string());
        put("eps", o.eps.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("test_fraction", self.test_fraction.to_string());
        put("loss", self.loss.to_string());
        s
    }

    /// Builds a configuration for a dataset with `k` classes, `t` instances and
    /// `c_in` features, then applies `text`.
    ///
    /// Dataset dimensions given in `text` must agree with the dataset. Unless
    /// assigned, `scales` follows `c_h` as `{1, c_h/2, c_h}` and `e` is `c_h/2`.
    pub fn for_dataset(text: &str, k: usize, t: usize, c_in: usize) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.model.k = k;
        cfg.model.t = t;
        cfg.model.c_in = c_in;
        let set = cfg.apply_kv(text)?;
        for (key, got, want) in [
            ("k", cfg.model.k, k),
            ("t", cfg.model.t, t),
            ("c_in", cfg.model.c_in, c_in),
        ] {
            if got != want {
                return Err(Error::Config(format!(
                    "{key} = {got} in config but the dataset has {want}"
                )));
            }
        }
        if !set.contains("scales") {
            cfg.model.scales = default_scales(cfg.model.c_h);
        }
        if !set.contains("e") {
            cfg.model.e = (cfg.model.c_h / 2).max(1);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config(format!(
                "test_fraction must lie in [0, 1), got {}",
                self.test_fraction
            )));
        }
        let o = &self.optim;
        if !(o.lr_max >= o.lr_min && o.lr_min >= 0.0) {
            return Err(Error::Config("need lr_max >= lr_min >= 0".into()));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::Config(
                "betas must lie in [0, 1) and eps must be positive".into(),
            ));
        }
        Ok(())
    }
}
