//! Training and evaluation settings, and their `key = value` text form.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Unknown and repeated keys are rejected with the offending line number.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelDims;
use crate::nn::AdamConfig;

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Adversarial class-targeting weight of the generator loss.
    pub lambda_g1: f64,
    /// Reconstruction weight of the generator loss.
    pub lambda_g2: f64,
    /// KL weight of the generator loss.
    pub lambda_g3: f64,
    /// Real-image term of the discriminator loss.
    pub lambda_d1: f64,
    /// Fake-class term of the discriminator loss.
    pub lambda_d2: f64,
    /// Latent agreement term of the backward cycle.
    pub lambda_bw1: f64,
    /// Image reconstruction term of the backward cycle.
    pub lambda_bw2: f64,
    pub enable_backward_cycle: bool,
    pub enable_z_cycle: bool,
    pub enable_x_cycle: bool,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub d_z: usize,
    /// Encoder and discriminator hidden widths; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub side: usize,
    pub n_s: usize,
    pub seed_init: u64,
    pub seed_data: u64,
    pub seed_codes: u64,
    pub seed_reparam: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lambda_g1: 1.0,
            lambda_g2: 10.0,
            lambda_g3: 0.1,
            lambda_d1: 1.0,
            lambda_d2: 1.0,
            lambda_bw1: 1.0,
            lambda_bw2: 10.0,
            enable_backward_cycle: true,
            enable_z_cycle: true,
            enable_x_cycle: true,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            batch_size: 64,
            epochs: 30,
            d_z: 16,
            hidden: vec![512, 256],
            side: 32,
            n_s: 4,
            seed_init: 1,
            seed_data: 2,
            seed_codes: 3,
            seed_reparam: 4,
        }
    }
}

/// The four training objectives compared in the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    ForwardOnly,
    ForwardZ,
    ForwardX,
    Full,
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fw" => Ok(Ablation::ForwardOnly),
            "fw+z" => Ok(Ablation::ForwardZ),
            "fw+x" => Ok(Ablation::ForwardX),
            "full" => Ok(Ablation::Full),
            _ => Err(Error::invalid(format!(
                "unknown ablation `{s}` (expected fw, fw+z, fw+x or full)"
            ))),
        }
    }
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::ForwardOnly => "fw",
            Ablation::ForwardZ => "fw+z",
            Ablation::ForwardX => "fw+x",
            Ablation::Full => "full",
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            ("lambda_g1", self.lambda_g1),
            ("lambda_g2", self.lambda_g2),
            ("lambda_g3", self.lambda_g3),
            ("lambda_d1", self.lambda_d1),
            ("lambda_d2", self.lambda_d2),
            ("lambda_bw1", self.lambda_bw1),
            ("lambda_bw2", self.lambda_bw2),
        ];
        for (k, v) in lambdas {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{k} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr must be positive"));
        }
        for (k, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{k} must lie in [0, 1)")));
            }
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(Error::invalid("adam_eps must be positive"));
        }
        if self.batch_size == 0 || self.d_z == 0 || self.side == 0 || self.n_s == 0 {
            return Err(Error::invalid(
                "batch_size, d_z, side and n_s must be positive",
            ));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        if self.enable_backward_cycle && self.n_s < 2 {
            return Err(Error::invalid("the backward cycle needs n_s >= 2"));
        }
        Ok(())
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            side: self.side,
            d_z: self.d_z,
            n_s: self.n_s,
            hidden: self.hidden.clone(),
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn apply_ablation(&mut self, a: Ablation) {
        let (z, x) = match a {
            Ablation::ForwardOnly => (false, false),
            Ablation::ForwardZ => (true, false),
            Ablation::ForwardX => (false, true),
            Ablation::Full => (true, true),
        };
        self.enable_z_cycle = z;
        self.enable_x_cycle = x;
        self.enable_backward_cycle = z || x;
    }

    fn set(&mut self, key: &str, v: &str) -> Option<std::result::Result<(), String>> {
        Some(match key {
            "lambda_g1" => parse_into(v, &mut self.lambda_g1),
            "lambda_g2" => parse_into(v, &mut self.lambda_g2),
            "lambda_g3" => parse_into(v, &mut self.lambda_g3),
            "lambda_d1" => parse_into(v, &mut self.lambda_d1),
            "lambda_d2" => parse_into(v, &mut self.lambda_d2),
            "lambda_bw1" => parse_into(v, &mut self.lambda_bw1),
            "lambda_bw2" => parse_into(v, &mut self.lambda_bw2),
            "enable_backward_cycle" => parse_into(v, &mut self.enable_backward_cycle),
            "enable_z_cycle" => parse_into(v, &mut self.enable_z_cycle),
            "enable_x_cycle" => parse_into(v, &mut self.enable_x_cycle),
            "lr" => parse_into(v, &mut self.lr),
            "beta1" => parse_into(v, &mut self.beta1),
            "beta2" => parse_into(v, &mut self.beta2),
            "adam_eps" => parse_into(v, &mut self.adam_eps),
            "batch_size" => parse_into(v, &mut self.batch_size),
            "epochs" => parse_into(v, &mut self.epochs),
            "d_z" => parse_into(v, &mut self.d_z),
            "hidden" => parse_list(v).map(|h| self.hidden = h),
            "side" => parse_into(v, &mut self.side),
            "n_s" => parse_into(v, &mut self.n_s),
            "seed_init" => parse_into(v, &mut self.seed_init),
            "seed_data" => parse_into(v, &mut self.seed_data),
            "seed_codes" => parse_into(v, &mut self.seed_codes),
            "seed_reparam" => parse_into(v, &mut self.seed_reparam),
            _ => return None,
        })
    }

    fn write(&self, s: &mut String) {
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        let _ = write!(
            s,
            "lambda_g1 = {}\nlambda_g2 = {}\nlambda_g3 = {}\nlambda_d1 = {}\nlambda_d2 = {}\n\
             lambda_bw1 = {}\nlambda_bw2 = {}\nenable_backward_cycle = {}\nenable_z_cycle = {}\n\
             enable_x_cycle = {}\nlr = {}\nbeta1 = {}\nbeta2 = {}\nadam_eps = {}\nbatch_size = {}\n\
             epochs = {}\nd_z = {}\nhidden = {}\nside = {}\nn_s = {}\nseed_init = {}\n\
             seed_data = {}\nseed_codes = {}\nseed_reparam = {}\n",
            self.lambda_g1,
            self.lambda_g2,
            self.lambda_g3,
            self.lambda_d1,
            self.lambda_d2,
            self.lambda_bw1,
            self.lambda_bw2,
            self.enable_backward_cycle,
            self.enable_z_cycle,
            self.enable_x_cycle,
            self.lr,
            self.beta1,
            self.beta2,
            self.adam_eps,
            self.batch_size,
            self.epochs,
            self.d_z,
            hidden.join(","),
            self.side,
            self.n_s,
            self.seed_init,
            self.seed_data,
            self.seed_codes,
            self.seed_reparam,
        );
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        self.write(&mut s);
        s
    }

    /// Parses training keys only; defaults fill the rest.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        parse_lines(text, |k, v| c.set(k, v))?;
        c.validate()?;
        Ok(c)
    }
}

/// Probe, estimator and split settings used by evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub train_fraction: f64,
    pub split_seed: u64,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub probe_batch: usize,
    pub probe_seed: u64,
    pub gls_seed: u64,
    /// Exponent of the quantitative generator label score.
    pub gls_p: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            split_seed: 5,
            probe_epochs: 60,
            probe_lr: 1e-3,
            probe_batch: 64,
            probe_seed: 6,
            gls_seed: 7,
            gls_p: 1.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::invalid("train_fraction must lie in (0, 1)"));
        }
        if self.probe_lr.is_nan() || self.probe_lr <= 0.0 || self.probe_batch == 0 {
            return Err(Error::invalid("probe_lr and probe_batch must be positive"));
        }
        if !(self.gls_p > 0.0 && self.gls_p.is_finite()) {
            return Err(Error::invalid("gls_p must be positive"));
        }
        Ok(())
    }

    fn set(&mut self, key: &str, v: &str) -> Option<std::result::Result<(), String>> {
        Some(match key {
            "train_fraction" => parse_into(v, &mut self.train_fraction),
            "split_seed" => parse_into(v, &mut self.split_seed),
            "probe_epochs" => parse_into(v, &mut self.probe_epochs),
            "probe_lr" => parse_into(v, &mut self.probe_lr),
            "probe_batch" => parse_into(v, &mut self.probe_batch),
            "probe_seed" => parse_into(v, &mut self.probe_seed),
            "gls_seed" => parse_into(v, &mut self.gls_seed),
            "gls_p" => parse_into(v, &mut self.gls_p),
            _ => return None,
        })
    }

    fn write(&self, s: &mut String) {
        let _ = write!(
            s,
            "train_fraction = {}\nsplit_seed = {}\nprobe_epochs = {}\nprobe_lr = {}\n\
             probe_batch = {}\nprobe_seed = {}\ngls_seed = {}\ngls_p = {}\n",
            self.train_fraction,
            self.split_seed,
            self.probe_epochs,
            self.probe_lr,
            self.probe_batch,
            self.probe_seed,
            self.gls_seed,
            self.gls_p,
        );
    }
}

/// A complete config file: training plus evaluation settings.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        parse_lines(text, |k, v| c.train.set(k, v).or_else(|| c.eval.set(k, v)))?;
        c.train.validate()?;
        c.eval.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# training\n");
        self.train.write(&mut s);
        s.push_str("# evaluation\n");
        self.eval.write(&mut s);
        s
    }
}

fn parse_into<T: FromStr>(v: &str, slot: &mut T) -> std::result::Result<(), String> {
    *slot = v
        .parse()
        .map_err(|_| format!("cannot parse `{v}`"))?;
    Ok(())
}

fn parse_list(v: &str) -> std::result::Result<Vec<usize>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| format!("cannot parse width `{}`", p.trim()))
        })
        .collect()
}

fn parse_lines(
    text: &str,
    mut set: impl FnMut(&str, &str) -> Option<std::result::Result<(), String>>,
) -> Result<()> {
    let mut seen: Vec<String> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let Some((k, v)) = body.split_once('=') else {
            return Err(Error::Config {
                line,
                msg: format!("expected `key = value`, got `{body}`"),
            });
        };
        let (k, v) = (k.trim(), v.trim());
        if seen.iter().any(|s| s == k) {
            return Err(Error::Config {
                line,
                msg: format!("key `{k}` appears twice"),
            });
        }
        match set(k, v) {
            None => {
                return Err(Error::Config {
                    line,
                    msg: format!("unknown key `{k}`"),
                })
            }
            Some(Err(msg)) => return Err(Error::Config { line, msg: format!("{k}: {msg}") }),
            Some(Ok(())) => seen.push(k.to_string()),
        }
    }
    Ok(())
}
