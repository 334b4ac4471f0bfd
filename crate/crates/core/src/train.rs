//! Forward/backward cyclic adversarial training.
//!
//! Every batch runs three separate optimizer steps:
//!
//! 1. the discriminator minimizes the negated discriminator objective, with
//!    synthesized images detached from the generator;
//! 2. encoder and decoder minimize the forward-cycle loss (adversarial class
//!    targeting, reconstruction and KL) with the discriminator frozen;
//! 3. when enabled, encoder and decoder minimize the backward-cycle loss:
//!    latent agreement between `x` and its class-swapped synthesis, and
//!    reconstruction of `x` through that synthesis.

use std::fs;
use std::path::Path;

use crate::autodiff::{Gradients, Graph, Var};
use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::format::{read_weights_from, write_weights_to, NamedTensor, Reader, Writer};
use crate::model::{BoundModels, EncodeMode, ModelSet, Trainable};
use crate::nn::{gaussian_kl, AdamConfig, AdamState, BoundMlp};
use crate::rng::{Purpose, RngStream};
use crate::tensor::{Real, Tensor};

/// Uniform draw from `{0, ..., n_s - 1}`.
pub fn sample_code(rng: &mut RngStream, n_s: usize) -> Result<usize> {
    if n_s == 0 {
        return Err(Error::invalid("need at least one class"));
    }
    Ok(rng.below(n_s))
}

/// Uniform draw from the `n_s - 1` classes other than `y`.
pub fn sample_code_excluding(rng: &mut RngStream, n_s: usize, y: usize) -> Result<usize> {
    if n_s < 2 {
        return Err(Error::invalid(
            "excluding a class needs at least two classes",
        ));
    }
    if y >= n_s {
        return Err(Error::Index(format!("class {y} with {n_s} classes")));
    }
    let v = rng.below(n_s - 1);
    Ok(if v >= y { v + 1 } else { v })
}

fn mean_log_prob<T: Real>(g: &mut Graph<T>, logits: Var, index: &[usize]) -> Result<Var> {
    let lp = g.log_softmax_prob(logits, index)?;
    Ok(g.mean(lp))
}

fn weighted<T: Real>(g: &mut Graph<T>, v: Var, w: f64) -> Var {
    g.scalar_mul(v, T::of(w))
}

fn zero<T: Real>(g: &mut Graph<T>) -> Var {
    g.constant(Tensor::scalar(T::zero()))
}

fn require_frozen<T: Real>(net: &BoundMlp<T>, g: &Graph<T>, what: &str) -> Result<()> {
    if net.params().iter().any(|&p| g.requires_grad(p)) {
        return Err(Error::invalid(format!(
            "{what} must be bound as frozen for this loss"
        )));
    }
    Ok(())
}

fn check_labels(labels: &[usize], rows: usize, n_s: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::shape(format!(
            "{} labels for a batch of {rows}",
            labels.len()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= n_s) {
        return Err(Error::Index(format!("class {y} with {n_s} classes")));
    }
    Ok(())
}

/// Loss weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub g1: f64,
    pub g2: f64,
    pub g3: f64,
    pub d1: f64,
    pub d2: f64,
    pub bw1: f64,
    pub bw2: f64,
    pub z_cycle: bool,
    pub x_cycle: bool,
}

impl From<&TrainConfig> for LossWeights {
    fn from(c: &TrainConfig) -> Self {
        Self {
            g1: c.lambda_g1,
            g2: c.lambda_g2,
            g3: c.lambda_g3,
            d1: c.lambda_d1,
            d2: c.lambda_d2,
            bw1: c.lambda_bw1,
            bw2: c.lambda_bw2,
            z_cycle: c.enable_z_cycle,
            x_cycle: c.enable_x_cycle,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DiscriminatorLoss {
    pub total: Var,
    pub real: Var,
    pub fake: Var,
}

/// `-λD1 E[log D_{y_s}(x)] - λD2 E[log D_fake(G(x, c(y')))]`, the quantity
/// the discriminator minimizes. The synthesized batch is detached, so the
/// encoder and decoder never receive gradient from it.
pub fn discriminator_loss<T: Real>(
    g: &mut Graph<T>,
    m: &BoundModels<T>,
    x: Var,
    y_s: &[usize],
    y_fake: &[usize],
    w: &LossWeights,
    rng: &mut RngStream,
) -> Result<DiscriminatorLoss> {
    let rows = g.value(x).rows();
    check_labels(y_s, rows, m.n_s)?;
    check_labels(y_fake, rows, m.n_s)?;
    let synth = m.generate(g, x, y_fake, EncodeMode::Stochastic, Some(rng))?;
    let synth = g.detach(synth);

    let real_logits = m.discriminate(g, x)?;
    let real = mean_log_prob(g, real_logits, y_s)?;
    let real = weighted(g, real, -w.d1);

    let fake_logits = m.discriminate(g, synth)?;
    let fake_class = vec![m.n_s; rows];
    let fake = mean_log_prob(g, fake_logits, &fake_class)?;
    let fake = weighted(g, fake, -w.d2);

    let total = g.add(real, fake)?;
    Ok(DiscriminatorLoss { total, real, fake })
}

#[derive(Debug, Clone, Copy)]
pub struct GeneratorLoss {
    pub total: Var,
    pub adversarial: Var,
    pub reconstruction: Var,
    pub kl: Var,
}

/// `-λG1 E[log D_{y'}(G(x, c(y')))] + λG2 E||x - G(x, c(y_s))||² + λG3 KL`.
///
/// Both generator evaluations share one stochastic encoding of `x`. The
/// discriminator must be bound frozen.
pub fn forward_generator_loss<T: Real>(
    g: &mut Graph<T>,
    m: &BoundModels<T>,
    x: Var,
    y_s: &[usize],
    y_fake: &[usize],
    w: &LossWeights,
    rng: &mut RngStream,
) -> Result<GeneratorLoss> {
    require_frozen(&m.discriminator, g, "the discriminator")?;
    let rows = g.value(x).rows();
    check_labels(y_s, rows, m.n_s)?;
    check_labels(y_fake, rows, m.n_s)?;
    let lat = m.encode(g, x, EncodeMode::Stochastic, Some(rng))?;

    let fake_codes = m.codes(g, y_fake)?;
    let synth = m.decode(g, lat.z, fake_codes)?;
    let logits = m.discriminate(g, synth)?;
    let adversarial = mean_log_prob(g, logits, y_fake)?;
    let adversarial = weighted(g, adversarial, -w.g1);

    let own_codes = m.codes(g, y_s)?;
    let recon = m.decode(g, lat.z, own_codes)?;
    let reconstruction = g.mse(x, recon)?;
    let reconstruction = weighted(g, reconstruction, w.g2);

    let kl = gaussian_kl(g, lat.mu, lat.logvar)?;
    let kl = weighted(g, kl, w.g3);

    let total = g.add(adversarial, reconstruction)?;
    let total = g.add(total, kl)?;
    Ok(GeneratorLoss {
        total,
        adversarial,
        reconstruction,
        kl,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct BackwardCycleLoss {
    pub total: Var,
    pub z_cycle: Var,
    pub x_cycle: Var,
}

/// `λbw1 E||z - z''||₁ + λbw2 E||x - Dec(Enc(x''), c(y_s))||²` with
/// `x'' = G(x, c(y''))`.
///
/// `z` and `z''` are the encoder means; the synthesis and the reconstruction
/// use sampled latents. Each term is dropped when its flag is off. The
/// discriminator must be bound frozen.
pub fn backward_cycle_loss<T: Real>(
    g: &mut Graph<T>,
    m: &BoundModels<T>,
    x: Var,
    y_s: &[usize],
    y_swap: &[usize],
    w: &LossWeights,
    rng: &mut RngStream,
) -> Result<BackwardCycleLoss> {
    require_frozen(&m.discriminator, g, "the discriminator")?;
    if m.n_s < 2 {
        return Err(Error::invalid("the backward cycle needs at least two classes"));
    }
    let rows = g.value(x).rows();
    check_labels(y_s, rows, m.n_s)?;
    check_labels(y_swap, rows, m.n_s)?;
    if !w.z_cycle && !w.x_cycle {
        let z = zero(g);
        return Ok(BackwardCycleLoss {
            total: z,
            z_cycle: z,
            x_cycle: z,
        });
    }
    let lat = m.encode(g, x, EncodeMode::Stochastic, Some(&mut *rng))?;
    let swap_codes = m.codes(g, y_swap)?;
    let swapped = m.decode(g, lat.z, swap_codes)?;
    let lat2 = m.encode(g, swapped, EncodeMode::Stochastic, Some(rng))?;

    let z_cycle = if w.z_cycle {
        let d = g.l1(lat.mu, lat2.mu)?;
        weighted(g, d, w.bw1)
    } else {
        zero(g)
    };
    let x_cycle = if w.x_cycle {
        let own_codes = m.codes(g, y_s)?;
        let back = m.decode(g, lat2.z, own_codes)?;
        let d = g.mse(x, back)?;
        weighted(g, d, w.bw2)
    } else {
        zero(g)
    };
    let total = g.add(z_cycle, x_cycle)?;
    Ok(BackwardCycleLoss {
        total,
        z_cycle,
        x_cycle,
    })
}

/// Adam states for the three optimizer steps of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizers {
    pub discriminator: AdamState,
    /// Encoder then decoder tensors, forward-cycle step.
    pub forward: AdamState,
    /// Encoder then decoder tensors, backward-cycle step.
    pub backward: AdamState,
}

impl Optimizers {
    pub fn new(models: &ModelSet, cfg: AdamConfig) -> Self {
        let gen: Vec<&Tensor> = models
            .encoder
            .tensors()
            .into_iter()
            .chain(models.decoder.tensors())
            .collect();
        Self {
            discriminator: AdamState::new(cfg, &models.discriminator.tensors()),
            forward: AdamState::new(cfg, &gen),
            backward: AdamState::new(cfg, &gen),
        }
    }
}

/// Random streams consumed by training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRngs {
    pub init: RngStream,
    pub data: RngStream,
    pub codes: RngStream,
    pub reparam: RngStream,
}

impl TrainRngs {
    pub fn from_config(c: &TrainConfig) -> Self {
        Self {
            init: RngStream::for_purpose(c.seed_init, Purpose::Init),
            data: RngStream::for_purpose(c.seed_data, Purpose::Data),
            codes: RngStream::for_purpose(c.seed_codes, Purpose::Codes),
            reparam: RngStream::for_purpose(c.seed_reparam, Purpose::Reparam),
        }
    }

    fn named(&self) -> [(&'static str, &RngStream); 4] {
        [
            ("rng.init", &self.init),
            ("rng.data", &self.data),
            ("rng.codes", &self.codes),
            ("rng.reparam", &self.reparam),
        ]
    }
}

/// A training batch.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B x side^2]`
    pub images: Tensor,
    pub labels: Vec<usize>,
}

/// Weighted loss components of one step, or epoch means of them.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepMetrics {
    pub loss_d: f64,
    pub loss_g_adv: f64,
    pub loss_g_rec: f64,
    pub loss_g_kl: f64,
    pub loss_bw_z: f64,
    pub loss_bw_x: f64,
    /// Optimizer steps taken on the encoder/decoder in this step.
    pub generator_updates: u32,
}

impl StepMetrics {
    pub fn values(&self) -> [f64; 6] {
        [
            self.loss_d,
            self.loss_g_adv,
            self.loss_g_rec,
            self.loss_g_kl,
            self.loss_bw_z,
            self.loss_bw_x,
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    fn accumulate(&mut self, o: &StepMetrics) {
        self.loss_d += o.loss_d;
        self.loss_g_adv += o.loss_g_adv;
        self.loss_g_rec += o.loss_g_rec;
        self.loss_g_kl += o.loss_g_kl;
        self.loss_bw_z += o.loss_bw_z;
        self.loss_bw_x += o.loss_bw_x;
        self.generator_updates += o.generator_updates;
    }

    fn scaled(&self, k: f64) -> StepMetrics {
        StepMetrics {
            loss_d: self.loss_d * k,
            loss_g_adv: self.loss_g_adv * k,
            loss_g_rec: self.loss_g_rec * k,
            loss_g_kl: self.loss_g_kl * k,
            loss_bw_z: self.loss_bw_z * k,
            loss_bw_x: self.loss_bw_x * k,
            generator_updates: self.generator_updates,
        }
    }
}

fn scalar_of(g: &Graph, v: Var) -> f64 {
    f64::from(g.value(v).item())
}

fn collect(grads: &Gradients, g: &Graph, params: &[Var]) -> Vec<Tensor> {
    params.iter().map(|&p| grads.get_or_zeros(g, p)).collect()
}

fn batch_codes(rng: &mut RngStream, n: usize, n_s: usize) -> Result<Vec<usize>> {
    (0..n).map(|_| sample_code(rng, n_s)).collect()
}

fn swap_codes(rng: &mut RngStream, labels: &[usize], n_s: usize) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&y| sample_code_excluding(rng, n_s, y))
        .collect()
}

/// Evaluates all loss components without updating anything.
pub fn evaluate_losses(
    models: &ModelSet,
    batch: &Batch,
    cfg: &TrainConfig,
    rngs: &mut TrainRngs,
) -> Result<StepMetrics> {
    let w = LossWeights::from(cfg);
    let n_s = models.dims.n_s;
    let y_fake = batch_codes(&mut rngs.codes, batch.labels.len(), n_s)?;
    let mut g = Graph::new();
    let m = models.bind(&mut g, Trainable::NONE);
    let x = g.constant(batch.images.clone());
    let d = discriminator_loss(&mut g, &m, x, &batch.labels, &y_fake, &w, &mut rngs.reparam)?;
    let fw = forward_generator_loss(&mut g, &m, x, &batch.labels, &y_fake, &w, &mut rngs.reparam)?;
    let mut metrics = StepMetrics {
        loss_d: scalar_of(&g, d.total),
        loss_g_adv: scalar_of(&g, fw.adversarial),
        loss_g_rec: scalar_of(&g, fw.reconstruction),
        loss_g_kl: scalar_of(&g, fw.kl),
        ..StepMetrics::default()
    };
    if cfg.enable_backward_cycle && n_s >= 2 {
        let y_swap = swap_codes(&mut rngs.codes, &batch.labels, n_s)?;
        let bw = backward_cycle_loss(&mut g, &m, x, &batch.labels, &y_swap, &w, &mut rngs.reparam)?;
        metrics.loss_bw_z = scalar_of(&g, bw.z_cycle);
        metrics.loss_bw_x = scalar_of(&g, bw.x_cycle);
    }
    Ok(metrics)
}

/// One discriminator step, one forward-cycle step and, if enabled, one
/// backward-cycle step.
pub fn train_step(
    models: &mut ModelSet,
    opt: &mut Optimizers,
    batch: &Batch,
    cfg: &TrainConfig,
    rngs: &mut TrainRngs,
) -> Result<StepMetrics> {
    let w = LossWeights::from(cfg);
    let n_s = models.dims.n_s;
    let mut metrics = StepMetrics::default();
    let y_fake = batch_codes(&mut rngs.codes, batch.labels.len(), n_s)?;

    {
        let mut g = Graph::new();
        let m = models.bind(&mut g, Trainable::DISCRIMINATOR);
        let x = g.constant(batch.images.clone());
        let loss = discriminator_loss(&mut g, &m, x, &batch.labels, &y_fake, &w, &mut rngs.reparam)?;
        metrics.loss_d = scalar_of(&g, loss.total);
        let grads = g.backward(loss.total)?;
        let gd = collect(&grads, &g, &m.discriminator.params());
        opt.discriminator
            .step(&mut models.discriminator.tensors_mut(), &gd)?;
    }

    {
        let mut g = Graph::new();
        let m = models.bind(&mut g, Trainable::GENERATOR);
        let x = g.constant(batch.images.clone());
        let loss =
            forward_generator_loss(&mut g, &m, x, &batch.labels, &y_fake, &w, &mut rngs.reparam)?;
        metrics.loss_g_adv = scalar_of(&g, loss.adversarial);
        metrics.loss_g_rec = scalar_of(&g, loss.reconstruction);
        metrics.loss_g_kl = scalar_of(&g, loss.kl);
        let grads = g.backward(loss.total)?;
        generator_update(models, &mut opt.forward, &grads, &g, &m)?;
        metrics.generator_updates += 1;
    }

    if cfg.enable_backward_cycle {
        let y_swap = swap_codes(&mut rngs.codes, &batch.labels, n_s)?;
        let mut g = Graph::new();
        let m = models.bind(&mut g, Trainable::GENERATOR);
        let x = g.constant(batch.images.clone());
        let loss =
            backward_cycle_loss(&mut g, &m, x, &batch.labels, &y_swap, &w, &mut rngs.reparam)?;
        metrics.loss_bw_z = scalar_of(&g, loss.z_cycle);
        metrics.loss_bw_x = scalar_of(&g, loss.x_cycle);
        let grads = g.backward(loss.total)?;
        generator_update(models, &mut opt.backward, &grads, &g, &m)?;
        metrics.generator_updates += 1;
    }
    Ok(metrics)
}

fn generator_update(
    models: &mut ModelSet,
    opt: &mut AdamState,
    grads: &Gradients,
    g: &Graph,
    m: &BoundModels,
) -> Result<()> {
    let mut params = m.encoder.params();
    params.extend(m.decoder.params());
    let gv = collect(grads, g, &params);
    let mut tensors = models.encoder.tensors_mut();
    tensors.extend(models.decoder.tensors_mut());
    opt.step(&mut tensors, &gv)
}

/// One row of the metric log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub epoch: u64,
    /// Optimizer batches completed so far.
    pub step: u64,
    pub metrics: StepMetrics,
}

pub const METRIC_HEADER: &str = "epoch,step,loss_d,loss_g_adv,loss_g_rec,loss_g_kl,loss_bw_z,loss_bw_x";

impl MetricRow {
    pub fn csv_line(&self) -> String {
        let mut s = format!("{},{}", self.epoch, self.step);
        for v in self.metrics.values() {
            s.push_str(&format!(",{v}"));
        }
        s
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRIC_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// Full training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub models: ModelSet,
    pub optimizers: Optimizers,
    pub epoch: u64,
    pub rngs: TrainRngs,
}

/// Resumable training loop.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub state: Checkpoint,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rngs = TrainRngs::from_config(&config);
        let models = ModelSet::init(config.model_dims(), &mut rngs.init)?;
        let optimizers = Optimizers::new(&models, config.adam());
        Ok(Self {
            state: Checkpoint {
                config,
                models,
                optimizers,
                epoch: 0,
                rngs,
            },
        })
    }

    pub fn resume(state: Checkpoint) -> Self {
        Self { state }
    }

    fn check_dataset(&self, data: &Dataset) -> Result<()> {
        let c = &self.state.config;
        if data.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        if data.n_s != c.n_s || data.side != c.side {
            return Err(Error::invalid(format!(
                "dataset has {} classes at side {}, config expects {} at side {}",
                data.n_s, data.side, c.n_s, c.side
            )));
        }
        if data.len() < c.batch_size {
            return Err(Error::invalid(format!(
                "{} records cannot fill a batch of {}",
                data.len(),
                c.batch_size
            )));
        }
        Ok(())
    }

    fn batch(data: &Dataset, idx: &[usize]) -> Result<Batch> {
        Ok(Batch {
            images: data.images(idx)?,
            labels: idx.iter().map(|&i| data.samples[i].shape_class).collect(),
        })
    }

    fn steps_per_epoch(&self, data: &Dataset) -> u64 {
        (data.len() / self.state.config.batch_size) as u64
    }

    /// Mean loss components over the dataset in batch order, using copies of
    /// the random streams so training continues unperturbed.
    pub fn evaluate(&self, data: &Dataset) -> Result<MetricRow> {
        self.check_dataset(data)?;
        let mut rngs = self.state.rngs.clone();
        let b = self.state.config.batch_size;
        let steps = data.len() / b;
        let mut sum = StepMetrics::default();
        for s in 0..steps {
            let idx: Vec<usize> = (s * b..(s + 1) * b).collect();
            let batch = Self::batch(data, &idx)?;
            let m = evaluate_losses(&self.state.models, &batch, &self.state.config, &mut rngs)?;
            sum.accumulate(&m);
        }
        Ok(MetricRow {
            epoch: self.state.epoch,
            step: self.state.epoch * steps as u64,
            metrics: sum.scaled(1.0 / steps as f64),
        })
    }

    /// One pass over a freshly shuffled order; returns the epoch means.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<MetricRow> {
        self.check_dataset(data)?;
        let st = &mut self.state;
        let b = st.config.batch_size;
        let mut order: Vec<usize> = (0..data.len()).collect();
        st.rngs.data.shuffle(&mut order);
        let steps = data.len() / b;
        let mut sum = StepMetrics::default();
        for chunk in order.chunks_exact(b) {
            let batch = Self::batch(data, chunk)?;
            let m = train_step(
                &mut st.models,
                &mut st.optimizers,
                &batch,
                &st.config,
                &mut st.rngs,
            )?;
            if !m.all_finite() {
                return Err(Error::Domain(format!(
                    "non-finite loss in epoch {}: {m:?}",
                    st.epoch + 1
                )));
            }
            sum.accumulate(&m);
        }
        st.epoch += 1;
        Ok(MetricRow {
            epoch: st.epoch,
            step: st.epoch * steps as u64,
            metrics: sum.scaled(1.0 / steps as f64),
        })
    }

    /// Trains until `config.epochs`. A fresh run first logs an epoch-0 row
    /// evaluated at initialization.
    pub fn run(&mut self, data: &Dataset, mut on_row: impl FnMut(&MetricRow)) -> Result<Vec<MetricRow>> {
        self.check_dataset(data)?;
        let _ = self.steps_per_epoch(data);
        let mut rows = Vec::new();
        if self.state.epoch == 0 {
            let r = self.evaluate(data)?;
            on_row(&r);
            rows.push(r);
        }
        while self.state.epoch < self.state.config.epochs as u64 {
            let r = self.run_epoch(data)?;
            on_row(&r);
            rows.push(r);
        }
        Ok(rows)
    }
}

/// Trains from scratch and returns the final state with the metric log.
pub fn train(data: &Dataset, config: &TrainConfig) -> Result<(Checkpoint, Vec<MetricRow>)> {
    let mut t = Trainer::new(config.clone())?;
    let rows = t.run(data, |_| {})?;
    Ok((t.state, rows))
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CYCK";
pub const CHECKPOINT_VERSION: u32 = 1;

// Checkpoint layout:
//   "CYCK" | u32 version
//   weights block (model arrays, then adam.<opt>.m.<i> / adam.<opt>.v.<i>)
//   u32 config_len | UTF-8 key = value config text
//   u32 count | count x ( u16 name_len | name | u32 len | len x u64 )

const OPT_NAMES: [&str; 3] = ["dis", "fw", "bw"];

impl Checkpoint {
    fn adam_states(&self) -> [&AdamState; 3] {
        [
            &self.optimizers.discriminator,
            &self.optimizers.forward,
            &self.optimizers.backward,
        ]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(Vec::new());
        w.bytes(CHECKPOINT_MAGIC)?;
        w.u32(CHECKPOINT_VERSION)?;

        let model = self.models.named_tensors();
        let mut owned: Vec<(String, &Tensor)> = model;
        for (name, st) in OPT_NAMES.iter().zip(self.adam_states()) {
            for (i, t) in st.m.iter().enumerate() {
                owned.push((format!("adam.{name}.m.{i}"), t));
            }
            for (i, t) in st.v.iter().enumerate() {
                owned.push((format!("adam.{name}.v.{i}"), t));
            }
        }
        let refs: Vec<(&str, &Tensor)> = owned.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        write_weights_to(&mut w, &refs)?;

        let text = self.config.to_text();
        w.u32(text.len() as u32)?;
        w.bytes(text.as_bytes())?;

        let mut words: Vec<(String, Vec<u64>)> = vec![("epoch".into(), vec![self.epoch])];
        for (name, st) in OPT_NAMES.iter().zip(self.adam_states()) {
            words.push((format!("adam.{name}.step"), vec![st.step]));
        }
        for (name, r) in self.rngs.named() {
            words.push((name.to_string(), r.state().to_vec()));
        }
        w.u32(words.len() as u32)?;
        for (name, v) in &words {
            w.name(name)?;
            w.u32(v.len() as u32)?;
            for &x in v {
                w.u64(x)?;
            }
        }
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        r.version(CHECKPOINT_VERSION)?;
        let arrays = read_weights_from(&mut r)?;
        let len = r.u32()? as usize;
        let text = String::from_utf8(r.bytes(len)?)
            .map_err(|_| Error::format("config block is not UTF-8"))?;
        let config = TrainConfig::parse(&text)?;
        let count = r.u32()? as usize;
        let mut words: Vec<(String, Vec<u64>)> = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let name = r.name()?;
            let n = r.u32()? as usize;
            let v = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            words.push((name, v));
        }
        r.finish()?;

        let word = |name: &str| -> Result<&[u64]> {
            words
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| v.as_slice())
                .ok_or_else(|| Error::format(format!("checkpoint lacks {name}")))
        };
        let single = |name: &str| -> Result<u64> {
            word(name)?
                .first()
                .copied()
                .ok_or_else(|| Error::format(format!("{name} is empty")))
        };

        let (model_arrays, adam_arrays): (Vec<NamedTensor>, Vec<NamedTensor>) =
            arrays.into_iter().partition(|(n, _)| !n.starts_with("adam."));
        let models = ModelSet::from_named(&model_arrays)?;
        if models.dims != config.model_dims() {
            return Err(Error::format(
                "checkpoint weights do not match its configuration",
            ));
        }
        let fresh = Optimizers::new(&models, config.adam());
        let mut states = [fresh.discriminator, fresh.forward, fresh.backward];
        for (name, st) in OPT_NAMES.iter().zip(states.iter_mut()) {
            for (kind, slot) in [("m", &mut st.m), ("v", &mut st.v)] {
                for (i, t) in slot.iter_mut().enumerate() {
                    let key = format!("adam.{name}.{kind}.{i}");
                    let found = adam_arrays
                        .iter()
                        .find(|(n, _)| *n == key)
                        .ok_or_else(|| Error::format(format!("checkpoint lacks {key}")))?;
                    if found.1.shape() != t.shape() {
                        return Err(Error::format(format!("{key} has the wrong shape")));
                    }
                    *t = found.1.clone();
                }
            }
            st.step = single(&format!("adam.{name}.step"))?;
        }
        let [discriminator, forward, backward] = states;
        let rngs = TrainRngs {
            init: RngStream::from_state(word("rng.init")?)?,
            data: RngStream::from_state(word("rng.data")?)?,
            codes: RngStream::from_state(word("rng.codes")?)?,
            reparam: RngStream::from_state(word("rng.reparam")?)?,
        };
        Ok(Self {
            config,
            models,
            optimizers: Optimizers {
                discriminator,
                forward,
                backward,
            },
            epoch: single("epoch")?,
            rngs,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            side: 4,
            n_s: 2,
            d_z: 2,
            hidden: vec![6],
            batch_size: 4,
            epochs: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn sample_code_properties() {
        let mut rng = RngStream::new(1, 3);
        assert!((0..100).all(|_| sample_code(&mut rng, 1).unwrap() == 0));
        assert!(sample_code_excluding(&mut rng, 1, 0).is_err());
        let mut a = RngStream::new(4, 3);
        let mut b = RngStream::new(4, 3);
        let sa: Vec<usize> = (0..50).map(|_| sample_code(&mut a, 5).unwrap()).collect();
        let sb: Vec<usize> = (0..50).map(|_| sample_code(&mut b, 5).unwrap()).collect();
        assert_eq!(sa, sb);
    }

    #[test]
    fn excluding_draws_are_uniform_over_the_rest() {
        let mut rng = RngStream::new(12, 3);
        let n = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[sample_code_excluding(&mut rng, 4, 2).unwrap()] += 1;
        }
        assert_eq!(counts[2], 0);
        for c in [0, 1, 3] {
            let p = counts[c] as f64 / n as f64;
            assert!((p - 1.0 / 3.0).abs() <= 0.02, "class {c}: {p}");
        }
    }

    #[test]
    fn generator_losses_refuse_trainable_discriminator() {
        let dims = ModelDims {
            side: 2,
            d_z: 1,
            n_s: 2,
            hidden: vec![],
        };
        let models = ModelSet::<f32>::init(dims, &mut RngStream::new(1, 1)).unwrap();
        let mut g = Graph::new();
        let m = models.bind(&mut g, Trainable::ALL);
        let x = g.constant(Tensor::filled(&[1, 4], 0.5).unwrap());
        let w = LossWeights::from(&TrainConfig::default());
        let mut rng = RngStream::new(1, 4);
        assert!(forward_generator_loss(&mut g, &m, x, &[0], &[1], &w, &mut rng).is_err());
        assert!(backward_cycle_loss(&mut g, &m, x, &[0], &[1], &w, &mut rng).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let t = Trainer::new(tiny_config()).unwrap();
        let bytes = t.state.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, t.state);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 7;
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]).is_err());
    }

    fn tiny_data(n: usize) -> Dataset {
        crate::data::generate_dataset(n, 2, 4, 11).unwrap()
    }

    fn all_tensors(m: &ModelSet) -> Vec<Tensor> {
        m.named_tensors().into_iter().map(|(_, t)| t.clone()).collect()
    }

    fn zero_discriminator(m: &mut ModelSet) {
        for t in m.discriminator.tensors_mut() {
            t.data_mut().fill(0.0);
        }
    }

    fn batch_of(data: &Dataset, n: usize) -> Batch {
        let idx: Vec<usize> = (0..n).collect();
        Trainer::batch(data, &idx).unwrap()
    }

    fn four_class_models() -> ModelSet {
        let dims = ModelDims {
            side: 2,
            d_z: 2,
            n_s: 4,
            hidden: vec![3],
        };
        ModelSet::init(dims, &mut RngStream::new(2, 1)).unwrap()
    }

    #[test]
    fn zero_discriminator_gives_log_five() {
        let mut models = four_class_models();
        zero_discriminator(&mut models);
        let mut g = Graph::new();
        let m = models.bind(&mut g, Trainable::NONE);
        let x = g.constant(Tensor::filled(&[4, 4], 0.4).unwrap());
        let ys = [0, 1, 2, 3];
        let yf = [3, 3, 0, 1];
        let mut w = LossWeights::from(&TrainConfig::default());
        w.d1 = 0.5;
        w.d2 = 2.0;
        w.g2 = 0.0;
        w.g3 = 0.0;
        let mut rng = RngStream::new(1, 4);
        let d = discriminator_loss(&mut g, &m, x, &ys, &yf, &w, &mut rng).unwrap();
        let fw = forward_generator_loss(&mut g, &m, x, &ys, &yf, &w, &mut rng).unwrap();
        let ln5 = 5f64.ln();
        assert!((scalar_of(&g, d.total) - 2.5 * ln5).abs() < 1e-5);
        assert!((scalar_of(&g, fw.total) - w.g1 * ln5).abs() < 1e-5);
    }

    #[test]
    fn perfect_copy_decoder_has_zero_reconstruction_loss() {
        let mut models = four_class_models();
        for t in models.decoder.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let b = 0.37f32;
        let last = models.decoder.layers.len() - 1;
        models.decoder.layers[last].bias.data_mut().fill(b);
        // the image every decoder output equals
        let mut g0 = Graph::new();
        let bv = g0.constant(Tensor::filled(&[2, 4], b).unwrap());
        let s = g0.sigmoid(bv);
        let x_img = g0.value(s).clone();

        let mut w = LossWeights::from(&TrainConfig::default());
        w.g1 = 0.0;
        w.g3 = 0.0;
        let mut g = Graph::new();
        let m = models.bind(&mut g, Trainable::GENERATOR);
        let x = g.constant(x_img);
        let mut rng = RngStream::new(3, 4);
        let fw = forward_generator_loss(&mut g, &m, x, &[0, 1], &[2, 3], &w, &mut rng).unwrap();
        assert_eq!(scalar_of(&g, fw.total), 0.0);
    }

    #[test]
    fn constant_encoder_has_zero_latent_cycle() {
        let mut models = four_class_models();
        for l in &mut models.encoder.layers {
            l.weight.data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let m = models.bind(&mut g, Trainable::GENERATOR);
        let x = g.constant(Tensor::filled(&[2, 4], 0.8).unwrap());
        let w = LossWeights::from(&TrainConfig::default());
        let mut rng = RngStream::new(3, 4);
        let bw = backward_cycle_loss(&mut g, &m, x, &[0, 1], &[2, 3], &w, &mut rng).unwrap();
        assert_eq!(scalar_of(&g, bw.z_cycle), 0.0);
        assert!(scalar_of(&g, bw.x_cycle) > 0.0);

        let off = LossWeights {
            z_cycle: false,
            x_cycle: false,
            ..w
        };
        let bw = backward_cycle_loss(&mut g, &m, x, &[0, 1], &[2, 3], &off, &mut rng).unwrap();
        assert_eq!(scalar_of(&g, bw.total), 0.0);
    }

    #[test]
    fn backward_cycle_rejects_one_class_and_bad_labels() {
        let dims = ModelDims {
            side: 2,
            d_z: 1,
            n_s: 1,
            hidden: vec![],
        };
        let models = ModelSet::<f32>::init(dims, &mut RngStream::new(1, 1)).unwrap();
        let mut g = Graph::new();
        let m = models.bind(&mut g, Trainable::GENERATOR);
        let x = g.constant(Tensor::filled(&[1, 4], 0.5).unwrap());
        let w = LossWeights::from(&TrainConfig::default());
        let mut rng = RngStream::new(1, 4);
        assert!(backward_cycle_loss(&mut g, &m, x, &[0], &[0], &w, &mut rng).is_err());
        assert!(discriminator_loss(&mut g, &m, x, &[1], &[0], &w, &mut rng).is_err());
        assert!(forward_generator_loss(&mut g, &m, x, &[0, 0], &[0], &w, &mut rng).is_err());
    }

    #[test]
    fn gradients_stay_isolated() {
        let models = four_class_models();
        let w = LossWeights::from(&TrainConfig::default());
        let x_img = Tensor::filled(&[2, 4], 0.3).unwrap();

        let mut g = Graph::new();
        let m = models.bind(&mut g, Trainable::ALL);
        let x = g.constant(x_img.clone());
        let mut rng = RngStream::new(5, 4);
        let d = discriminator_loss(&mut g, &m, x, &[0, 1], &[2, 3], &w, &mut rng).unwrap();
        let grads = g.backward(d.total).unwrap();
        for p in m.encoder.params().into_iter().chain(m.decoder.params()) {
            assert!(grads.get_or_zeros(&g, p).data().iter().all(|&v| v == 0.0));
        }
        assert!(m
            .discriminator
            .params()
            .iter()
            .any(|&p| grads.get_or_zeros(&g, p).data().iter().any(|&v| v != 0.0)));

        for backward in [false, true] {
            let mut g = Graph::new();
            let m = models.bind(&mut g, Trainable::GENERATOR);
            let x = g.constant(x_img.clone());
            let total = if backward {
                backward_cycle_loss(&mut g, &m, x, &[0, 1], &[2, 3], &w, &mut rng).unwrap().total
            } else {
                forward_generator_loss(&mut g, &m, x, &[0, 1], &[2, 3], &w, &mut rng).unwrap().total
            };
            let grads = g.backward(total).unwrap();
            for p in m.discriminator.params() {
                assert!(grads.get(p).is_none());
            }
            assert!(m
                .encoder
                .params()
                .iter()
                .any(|&p| grads.get_or_zeros(&g, p).data().iter().any(|&v| v != 0.0)));
        }
    }

    #[test]
    fn scaling_a_weight_scales_its_component() {
        let models = four_class_models();
        let base = TrainConfig::default();
        let data = crate::data::generate_dataset(8, 4, 2, 3).unwrap();
        let batch = batch_of(&data, 8);
        let run = |c: &TrainConfig| {
            let mut rngs = TrainRngs::from_config(c);
            evaluate_losses(&models, &batch, c, &mut rngs).unwrap()
        };
        let m0 = run(&base);
        let k = 2.0;
        type Scale = fn(&mut TrainConfig, f64);
        type Read = fn(&StepMetrics) -> f64;
        let cases: [(Scale, Read); 6] = [
            (|c, k| c.lambda_g1 *= k, |m| m.loss_g_adv),
            (|c, k| c.lambda_g2 *= k, |m| m.loss_g_rec),
            (|c, k| c.lambda_g3 *= k, |m| m.loss_g_kl),
            (|c, k| c.lambda_bw1 *= k, |m| m.loss_bw_z),
            (|c, k| c.lambda_bw2 *= k, |m| m.loss_bw_x),
            (
                |c, k| {
                    c.lambda_d1 *= k;
                    c.lambda_d2 *= k
                },
                |m| m.loss_d,
            ),
        ];
        for (scale, pick) in cases {
            let mut c = base.clone();
            scale(&mut c, k);
            let m1 = run(&c);
            assert_eq!(pick(&m1), k * pick(&m0));
        }
    }

    #[test]
    fn zero_weights_leave_parameters_unchanged() {
        let mut c = tiny_config();
        for l in [
            &mut c.lambda_g1,
            &mut c.lambda_g2,
            &mut c.lambda_g3,
            &mut c.lambda_d1,
            &mut c.lambda_d2,
            &mut c.lambda_bw1,
            &mut c.lambda_bw2,
        ] {
            *l = 0.0;
        }
        let data = tiny_data(8);
        let mut t = Trainer::new(c).unwrap();
        let before = all_tensors(&t.state.models);
        let st = &mut t.state;
        let m = train_step(&mut st.models, &mut st.optimizers, &batch_of(&data, 4), &st.config, &mut st.rngs)
            .unwrap();
        assert_eq!(m.loss_d, 0.0);
        assert_eq!(all_tensors(&t.state.models), before);
    }

    #[test]
    fn step_counts_follow_the_backward_flag() {
        let data = tiny_data(8);
        for on in [false, true] {
            let mut c = tiny_config();
            c.enable_backward_cycle = on;
            let mut t = Trainer::new(c).unwrap();
            let st = &mut t.state;
            let m = train_step(&mut st.models, &mut st.optimizers, &batch_of(&data, 4), &st.config, &mut st.rngs)
                .unwrap();
            assert!(m.all_finite());
            assert_eq!(m.generator_updates, if on { 2 } else { 1 });
            assert_eq!(st.optimizers.discriminator.step, 1);
            assert_eq!(st.optimizers.forward.step, 1);
            assert_eq!(st.optimizers.backward.step, u64::from(on));
            if !on {
                assert_eq!((m.loss_bw_z, m.loss_bw_x), (0.0, 0.0));
            }
        }
    }

    #[test]
    fn zero_epochs_return_initialization() {
        let mut c = tiny_config();
        c.epochs = 0;
        let (ckpt, rows) = train(&tiny_data(8), &c).unwrap();
        assert_eq!(ckpt, Trainer::new(c).unwrap().state);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].epoch, 0);
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let data = tiny_data(12);
        let mut c = tiny_config();
        c.epochs = 4;
        let (a, log_a) = train(&data, &c).unwrap();
        let (b, log_b) = train(&data, &c).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        assert_eq!(log_a, log_b);
        assert_eq!(log_a.len(), 5);
        assert_eq!(log_a[4].step, 4 * 3);

        let mut half = c.clone();
        half.epochs = 2;
        let (mid, _) = train(&data, &half).unwrap();
        let mut restored = Checkpoint::from_bytes(&mid.to_bytes().unwrap()).unwrap();
        restored.config.epochs = 4;
        let mut t = Trainer::resume(restored);
        let rows = t.run(&data, |_| {}).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[..], log_a[3..]);
        assert_eq!(t.state.to_bytes().unwrap(), a.to_bytes().unwrap());
    }

    #[test]
    fn empty_or_mismatched_data_is_rejected() {
        let c = tiny_config();
        let data = tiny_data(8);
        assert!(train(&data.subset(&[]), &c).is_err());
        let wrong = crate::data::generate_dataset(8, 4, 4, 1).unwrap();
        assert!(train(&wrong, &c).is_err());
    }

    #[test]
    fn metric_csv_header() {
        let rows = [MetricRow {
            epoch: 0,
            step: 0,
            metrics: StepMetrics::default(),
        }];
        let csv = metrics_csv(&rows);
        assert!(csv.starts_with(
            "epoch,step,loss_d,loss_g_adv,loss_g_rec,loss_g_kl,loss_bw_z,loss_bw_x\n0,0,0,0,0,0,0,0\n"
        ));
    }
}
