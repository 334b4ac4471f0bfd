//! Measurement: latent probes, baselines, generator label scores,
//! interpolation grids, prior samples and PGM export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::autodiff::Graph;
use crate::config::EvalConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{one_hot_batch, ModelSet};
use crate::nn::{AdamConfig, AdamState, Mlp, MlpSpec, OutputActivation};
use crate::rng::{Purpose, RngStream};
use crate::tensor::{softmax_rows, Tensor};
use crate::train::sample_code;

/// Deterministic encodings (`z = mu`) of each image row.
pub fn extract_latents(models: &ModelSet, images: &Tensor) -> Result<Tensor> {
    models.encode_mean(images)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeKind {
    Categorical { classes: usize },
    Quantitative { dims: usize },
}

impl ProbeKind {
    pub fn name(self) -> &'static str {
        match self {
            ProbeKind::Categorical { .. } => "categorical",
            ProbeKind::Quantitative { .. } => "quantitative",
        }
    }
}

/// Supervision for a probe: class indices or an `[n x d]` value matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes { labels: Vec<usize>, classes: usize },
    Values(Tensor),
}

impl Targets {
    fn rows(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Values(t) => t.rows(),
        }
    }

    fn kind(&self) -> ProbeKind {
        match self {
            Targets::Classes { classes, .. } => ProbeKind::Categorical { classes: *classes },
            Targets::Values(t) => ProbeKind::Quantitative { dims: t.cols() },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSettings {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            epochs: 60,
            lr: 1e-3,
            batch: 64,
            seed: 0,
        }
    }
}

impl ProbeSettings {
    pub fn from_eval(c: &EvalConfig, seed: u64) -> Self {
        Self {
            epochs: c.probe_epochs,
            lr: c.probe_lr,
            batch: c.probe_batch,
            seed,
            ..Self::default()
        }
    }
}

/// A predictor: class probabilities or regressed values per input row.
pub trait Estimator {
    fn predict(&self, x: &Tensor) -> Result<Tensor>;
}

/// Maps images to images under a target class code.
pub trait Generator {
    fn generate(&self, x: &Tensor, labels: &[usize]) -> Result<Tensor>;
}

impl Generator for ModelSet {
    fn generate(&self, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
        self.generate_images(x, labels)
    }
}

/// Per-column affine standardization.
#[derive(Debug, Clone, PartialEq)]
struct Standardizer {
    mean: Vec<f32>,
    std: Vec<f32>,
}

impl Standardizer {
    fn fit(x: &Tensor) -> Self {
        let (n, c) = (x.rows(), x.cols());
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for i in 0..n {
            for (m, &v) in mean.iter_mut().zip(x.row(i)) {
                *m += f64::from(v);
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for i in 0..n {
            for ((s, &m), &v) in var.iter_mut().zip(&mean).zip(x.row(i)) {
                *s += (f64::from(v) - m).powi(2);
            }
        }
        let std = var
            .iter()
            .map(|&s| {
                let sd = (s / n as f64).sqrt();
                if sd > 1e-6 {
                    sd as f32
                } else {
                    1.0
                }
            })
            .collect();
        Self {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std,
        }
    }

    fn identity(c: usize) -> Self {
        Self {
            mean: vec![0.0; c],
            std: vec![1.0; c],
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let c = self.mean.len();
        let mut out = x.clone();
        for (j, v) in out.data_mut().iter_mut().enumerate() {
            *v = (*v - self.mean[j % c]) / self.std[j % c];
        }
        out
    }

    fn inverse(&self, x: &Tensor) -> Tensor {
        let c = self.mean.len();
        let mut out = x.clone();
        for (j, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v * self.std[j % c] + self.mean[j % c];
        }
        out
    }
}

/// A trained probe with its input and target normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub kind: ProbeKind,
    pub net: Mlp,
    input: Standardizer,
    output: Standardizer,
}

impl Estimator for Probe {
    /// Class probabilities for categorical probes, values otherwise.
    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let out = self.net.infer(&self.input.forward(x))?;
        Ok(match self.kind {
            ProbeKind::Categorical { .. } => {
                let p = softmax_rows(out.data(), out.rows(), out.cols());
                Tensor::build(out.shape(), p)?
            }
            ProbeKind::Quantitative { .. } => self.output.inverse(&out),
        })
    }
}

impl Probe {
    /// Sum of all parameters, for detecting mutation.
    pub fn checksum(&self) -> f64 {
        self.net
            .tensors()
            .iter()
            .flat_map(|t| t.data())
            .map(|&v| f64::from(v))
            .sum()
    }
}

/// He-initialized hidden layers and a zero output layer, so an untrained
/// probe predicts the training mean (regression) or uniform classes.
fn init_probe_net(spec: &MlpSpec, rng: &mut RngStream) -> Result<Mlp> {
    let mut net = Mlp::init(spec, rng)?;
    if let Some(last) = net.layers.last_mut() {
        last.weight.data_mut().fill(0.0);
        last.bias.data_mut().fill(0.0);
    }
    Ok(net)
}

/// Trains a `[in, 64, 64, out]` leaky-relu MLP with Adam on minibatches of a
/// seeded shuffle. Categorical probes minimize cross-entropy; quantitative
/// ones minimize squared error on standardized targets.
pub fn train_probe(inputs: &Tensor, targets: &Targets, s: &ProbeSettings) -> Result<Probe> {
    if inputs.rank() != 2 {
        return Err(Error::shape("probe inputs must be a matrix"));
    }
    let n = inputs.rows();
    if targets.rows() != n {
        return Err(Error::shape(format!(
            "{n} input rows but {} targets",
            targets.rows()
        )));
    }
    if s.batch == 0 {
        return Err(Error::invalid("probe batch must be positive"));
    }
    let kind = targets.kind();
    let out_width = match kind {
        ProbeKind::Categorical { classes } => {
            if let Targets::Classes { labels, .. } = targets {
                if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
                    return Err(Error::Index(format!("label {y} with {classes} classes")));
                }
            }
            classes
        }
        ProbeKind::Quantitative { dims } => dims,
    };
    let mut widths = vec![inputs.cols()];
    widths.extend(&s.hidden);
    widths.push(out_width);
    let spec = MlpSpec::new(&widths, OutputActivation::Linear);
    let mut rng = RngStream::for_purpose(s.seed, Purpose::Probe);
    let mut net = init_probe_net(&spec, &mut rng)?;

    let input = Standardizer::fit(inputs);
    let output = match targets {
        Targets::Values(t) => Standardizer::fit(t),
        Targets::Classes { .. } => Standardizer::identity(out_width),
    };
    let x_all = input.forward(inputs);
    let y_all = match targets {
        Targets::Values(t) => Some(output.forward(t)),
        Targets::Classes { .. } => None,
    };
    let adam = AdamConfig {
        lr: s.lr,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    let mut opt = AdamState::new(adam, &net.tensors());
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..s.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(s.batch) {
            let mut g = Graph::new();
            let bound = net.bind(&mut g, true);
            let x = g.constant(x_all.gather_rows(chunk));
            let out = bound.forward(&mut g, x)?;
            let loss = match (targets, &y_all) {
                (Targets::Classes { labels, .. }, _) => {
                    let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                    g.softmax_cross_entropy(out, &y)?
                }
                (Targets::Values(_), Some(y_all)) => {
                    let y = g.constant(y_all.gather_rows(chunk));
                    g.mse(out, y)?
                }
                _ => unreachable!(),
            };
            let grads = g.backward(loss)?;
            let gv: Vec<Tensor> = bound
                .params()
                .iter()
                .map(|&p| grads.get_or_zeros(&g, p))
                .collect();
            opt.step(&mut net.tensors_mut(), &gv)?;
        }
    }
    Ok(Probe {
        kind,
        net,
        input,
        output,
    })
}

/// Percentage of rows whose arg-max prediction equals the label.
pub fn eval_ccr(est: &dyn Estimator, inputs: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::invalid("no samples to evaluate"));
    }
    let p = est.predict(inputs)?;
    Ok(ccr_of(&p, labels))
}

fn ccr_of(p: &Tensor, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(p.row(i)) == y)
        .count();
    100.0 * hits as f64 / labels.len() as f64
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean and population standard deviation of an absolute-error sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorStats {
    pub mean: f64,
    pub std: f64,
}

fn stats(errs: &[f64]) -> ErrorStats {
    let n = errs.len() as f64;
    let mean = errs.iter().sum::<f64>() / n;
    let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    ErrorStats {
        mean,
        std: var.sqrt(),
    }
}

/// Absolute errors per dimension and pooled over all dimensions.
pub fn absolute_errors(pred: &Tensor, targets: &Tensor) -> Result<(Vec<ErrorStats>, ErrorStats)> {
    if pred.shape() != targets.shape() {
        return Err(Error::shape(format!(
            "predictions {:?} vs targets {:?}",
            pred.shape(),
            targets.shape()
        )));
    }
    if targets.is_empty() {
        return Err(Error::invalid("no samples to evaluate"));
    }
    let d = targets.cols();
    let mut per: Vec<Vec<f64>> = vec![Vec::with_capacity(targets.rows()); d];
    let mut pooled = Vec::with_capacity(targets.len());
    for (j, (&p, &t)) in pred.data().iter().zip(targets.data()).enumerate() {
        let e = (f64::from(p) - f64::from(t)).abs();
        per[j % d].push(e);
        pooled.push(e);
    }
    Ok((per.iter().map(|e| stats(e)).collect(), stats(&pooled)))
}

/// Per-dimension mean absolute error with its standard deviation.
pub fn eval_mae(est: &dyn Estimator, inputs: &Tensor, targets: &Tensor) -> Result<Vec<ErrorStats>> {
    if targets.is_empty() || inputs.rows() != targets.rows() {
        return Err(Error::invalid("inputs and targets must be non-empty and aligned"));
    }
    let p = est.predict(inputs)?;
    Ok(absolute_errors(&p, targets)?.0)
}

pub fn chance_baseline(n_s: usize) -> f64 {
    100.0 / n_s as f64
}

/// Emits the per-dimension training median for every input.
#[derive(Debug, Clone, PartialEq)]
pub struct MedianPredictor {
    pub median: Vec<f32>,
}

impl Estimator for MedianPredictor {
    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.rows();
        let mut data = Vec::with_capacity(n * self.median.len());
        for _ in 0..n {
            data.extend_from_slice(&self.median);
        }
        Tensor::build(&[n, self.median.len()], data)
    }
}

pub fn median_baseline(train_targets: &Tensor) -> Result<MedianPredictor> {
    if train_targets.is_empty() {
        return Err(Error::invalid("median of an empty set"));
    }
    let (n, d) = (train_targets.rows(), train_targets.cols());
    let median = (0..d)
        .map(|j| {
            let mut col: Vec<f32> = (0..n).map(|i| train_targets.row(i)[j]).collect();
            col.sort_by(f32::total_cmp);
            if n % 2 == 1 {
                col[n / 2]
            } else {
                ((f64::from(col[n / 2 - 1]) + f64::from(col[n / 2])) / 2.0) as f32
            }
        })
        .collect();
    Ok(MedianPredictor { median })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Specified,
    Unspecified,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Specified => "specified",
            Role::Unspecified => "unspecified",
        }
    }
}

/// Per-sample generator label scores with their mean and spread.
#[derive(Debug, Clone, PartialEq)]
pub struct GlsValue {
    pub value: f64,
    pub std: f64,
    pub per_sample: Vec<f64>,
}

fn gls_value(per_sample: Vec<f64>) -> GlsValue {
    let s = stats(&per_sample);
    GlsValue {
        value: s.mean,
        std: s.std,
        per_sample,
    }
}

fn draw_codes(rng: &mut RngStream, n: usize, n_s: usize) -> Result<Vec<usize>> {
    (0..n).map(|_| sample_code(rng, n_s)).collect()
}

/// Mean estimator probability of the target label on `G(x, c(y'))`, with
/// `y'` drawn uniformly per image. The target is `y'` for the specified
/// role and `true_labels` otherwise.
pub fn gls_categorical(
    estimator: &dyn Estimator,
    generator: &dyn Generator,
    images: &Tensor,
    true_labels: &[usize],
    n_s: usize,
    role: Role,
    rng: &mut RngStream,
) -> Result<GlsValue> {
    let n = images.rows();
    if true_labels.len() != n {
        return Err(Error::shape("one label per test image is required"));
    }
    let codes = draw_codes(rng, n, n_s)?;
    let synth = generator.generate(images, &codes)?;
    let p = estimator.predict(&synth)?;
    let target = match role {
        Role::Specified => &codes,
        Role::Unspecified => true_labels,
    };
    let per = target
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            p.row(i)
                .get(y)
                .map(|&v| f64::from(v))
                .ok_or_else(|| Error::Index(format!("label {y} outside estimator output")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(gls_value(per))
}

/// Mean of `|F(G(x, c(y'))) - target|^p`, averaged over output dimensions.
/// The target is `targets` for the unspecified role and the drawn code `y'`
/// for the specified role.
#[allow(clippy::too_many_arguments)]
pub fn gls_quantitative(
    estimator: &dyn Estimator,
    generator: &dyn Generator,
    images: &Tensor,
    targets: &Tensor,
    n_s: usize,
    role: Role,
    p: f64,
    rng: &mut RngStream,
) -> Result<GlsValue> {
    let n = images.rows();
    if targets.rows() != n {
        return Err(Error::shape("one target row per test image is required"));
    }
    let codes = draw_codes(rng, n, n_s)?;
    let synth = generator.generate(images, &codes)?;
    let pred = estimator.predict(&synth)?;
    let d = pred.cols();
    let per = (0..n)
        .map(|i| {
            let row = pred.row(i);
            let err: f64 = match role {
                Role::Unspecified => {
                    if targets.cols() != d {
                        return Err(Error::shape("estimator width differs from targets"));
                    }
                    row.iter()
                        .zip(targets.row(i))
                        .map(|(&a, &b)| (f64::from(a) - f64::from(b)).abs().powf(p))
                        .sum()
                }
                Role::Specified => row
                    .iter()
                    .map(|&a| (f64::from(a) - codes[i] as f64).abs().powf(p))
                    .sum(),
            };
            Ok(err / d as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(gls_value(per))
}

/// `[steps_z * steps_c x S^2]` grid: row `r` holds `alpha_z = r/(steps_z-1)`,
/// column `c` holds `alpha_c = c/(steps_c-1)`; each cell decodes the convex
/// combination of the endpoint latent means and class codes.
pub fn interpolate(
    models: &ModelSet,
    x_initial: &[f32],
    x_final: &[f32],
    y_initial: usize,
    y_final: usize,
    steps_c: usize,
    steps_z: usize,
) -> Result<Tensor> {
    if steps_c < 2 || steps_z < 2 {
        return Err(Error::invalid("interpolation needs at least two steps"));
    }
    let ends = Tensor::stack_rows(&[x_initial, x_final])?;
    let z = models.encode_mean(&ends)?;
    let c = one_hot_batch::<f32>(&[y_initial, y_final], models.dims.n_s)?;
    let lerp = |a: &[f32], b: &[f32], t: f32| -> Vec<f32> {
        a.iter().zip(b).map(|(&u, &v)| (1.0 - t) * u + t * v).collect()
    };
    let mut zs = Vec::new();
    let mut cs = Vec::new();
    for r in 0..steps_z {
        let az = r as f32 / (steps_z - 1) as f32;
        let zr = lerp(z.row(0), z.row(1), az);
        for k in 0..steps_c {
            let ac = k as f32 / (steps_c - 1) as f32;
            zs.extend_from_slice(&zr);
            cs.extend(lerp(c.row(0), c.row(1), ac));
        }
    }
    let cells = steps_c * steps_z;
    let zt = Tensor::build(&[cells, models.dims.d_z], zs)?;
    let ct = Tensor::build(&[cells, models.dims.n_s], cs)?;
    models.decode_latent(&zt, &ct)
}

/// Decodes `n` standard-normal latents with the one-hot code of `y`.
pub fn sample_prior(models: &ModelSet, y: usize, n: usize, seed: u64) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    let mut rng = RngStream::for_purpose(seed, Purpose::Prior);
    let z = Tensor::randn_from(&[n, models.dims.d_z], &mut rng)?;
    let c = one_hot_batch(&vec![y; n], models.dims.n_s)?;
    models.decode_latent(&z, &c)
}

/// A binary greymap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Pgm {
    pub fn from_unit(width: usize, height: usize, values: &[f32]) -> Result<Self> {
        if values.len() != width * height || values.is_empty() {
            return Err(Error::shape(format!(
                "{} values for a {width}x{height} image",
                values.len()
            )));
        }
        let pixels = values
            .iter()
            .map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8)
            .collect();
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn to_unit(&self) -> Vec<f32> {
        self.pixels.iter().map(|&b| f32::from(b) / 255.0).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::format("PGM header is truncated"));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        if fields[0] != "P5" {
            return Err(Error::format(format!("not a binary PGM: {}", fields[0])));
        }
        let num = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::format(format!("bad PGM header field `{s}`")))
        };
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(Error::format(format!("unsupported maxval {maxval}")));
        }
        let n = width * height;
        if bytes.len() < pos || bytes.len() - pos != n {
            return Err(Error::format("PGM raster has the wrong length"));
        }
        Ok(Self {
            width,
            height,
            pixels: bytes[pos..].to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

/// Writes one square image with values in `[0, 1]`.
pub fn export_pgm(image: &[f32], side: usize, path: &Path) -> Result<()> {
    Pgm::from_unit(side, side, image)?.save(path)
}

/// Tiles `rows x cols` square images with 1-pixel white separators.
pub fn grid_pgm(images: &Tensor, side: usize, rows: usize, cols: usize) -> Result<Pgm> {
    if images.rows() != rows * cols || images.cols() != side * side {
        return Err(Error::shape(format!(
            "{:?} images do not fill a {rows}x{cols} grid of side {side}",
            images.shape()
        )));
    }
    let w = cols * side + cols - 1;
    let h = rows * side + rows - 1;
    let mut px = vec![1.0f32; w * h];
    for r in 0..rows {
        for c in 0..cols {
            let img = images.row(r * cols + c);
            for y in 0..side {
                let dst = (r * (side + 1) + y) * w + c * (side + 1);
                px[dst..dst + side].copy_from_slice(&img[y * side..(y + 1) * side]);
            }
        }
    }
    Pgm::from_unit(w, h, &px)
}

pub fn export_grid_pgm(images: &Tensor, side: usize, rows: usize, cols: usize, path: &Path) -> Result<()> {
    grid_pgm(images, side, rows, cols)?.save(path)
}

/// Factors scored by the probes and label scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Factor {
    Shape,
    Position,
    Scale,
    Brightness,
}

impl Factor {
    pub const ALL: [Factor; 4] = [Factor::Shape, Factor::Position, Factor::Scale, Factor::Brightness];

    pub fn name(self) -> &'static str {
        match self {
            Factor::Shape => "shape",
            Factor::Position => "position",
            Factor::Scale => "scale",
            Factor::Brightness => "brightness",
        }
    }

    pub fn role(self) -> Role {
        match self {
            Factor::Shape => Role::Specified,
            _ => Role::Unspecified,
        }
    }

    pub fn targets(self, data: &Dataset) -> Result<Targets> {
        let f = |pick: &dyn Fn(&crate::data::Factors) -> Vec<f32>| -> Result<Targets> {
            let rows: Vec<Vec<f32>> = data.samples.iter().map(|s| pick(&s.factors)).collect();
            let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
            Ok(Targets::Values(Tensor::stack_rows(&refs)?))
        };
        match self {
            Factor::Shape => Ok(Targets::Classes {
                labels: data.labels(),
                classes: data.n_s,
            }),
            Factor::Position => f(&|v| vec![v.cx, v.cy]),
            Factor::Scale => f(&|v| vec![v.scale]),
            Factor::Brightness => f(&|v| vec![v.brightness]),
        }
    }
}

/// One report line.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub factor: String,
    pub kind: String,
    pub role: String,
    pub metric: String,
    pub value: f64,
    pub std: Option<f64>,
    pub baseline: Option<f64>,
}

/// Latent-probe results.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub rows: Vec<ReportRow>,
}

/// Generator label score results.
#[derive(Debug, Clone, PartialEq)]
pub struct GlsReport {
    pub rows: Vec<ReportRow>,
}

pub const REPORT_HEADER: &str = "factor,kind,role,metric,value,std,baseline";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.factor,
            r.kind,
            r.role,
            r.metric,
            r.value,
            opt(r.std),
            opt(r.baseline)
        );
    }
    s
}

pub fn report_table(rows: &[ReportRow]) -> String {
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    let mut s = format!(
        "{:<12} {:<13} {:<12} {:<6} {:>10} {:>10} {:>10}\n",
        "factor", "kind", "role", "metric", "value", "std", "baseline"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<12} {:<13} {:<12} {:<6} {:>10.4} {:>10} {:>10}",
            r.factor,
            r.kind,
            r.role,
            r.metric,
            r.value,
            cell(r.std),
            cell(r.baseline)
        );
    }
    s
}

impl ProbeReport {
    pub fn row(&self, factor: Factor) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.factor == factor.name())
    }
}

impl GlsReport {
    pub fn row(&self, factor: Factor) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.factor == factor.name())
    }
}

/// Trains one latent probe per factor on training latents and scores it on
/// test latents against chance or the training-median predictor.
pub fn probe_report(models: &ModelSet, train: &Dataset, test: &Dataset, cfg: &EvalConfig) -> Result<ProbeReport> {
    let z_train = extract_latents(models, &train.all_images()?)?;
    let z_test = extract_latents(models, &test.all_images()?)?;
    let mut rows = Vec::new();
    for (k, factor) in Factor::ALL.into_iter().enumerate() {
        let settings = ProbeSettings::from_eval(cfg, cfg.probe_seed.wrapping_add(k as u64));
        let tr = factor.targets(train)?;
        let te = factor.targets(test)?;
        let probe = train_probe(&z_train, &tr, &settings)?;
        let row = match (&tr, &te) {
            (Targets::Classes { classes, .. }, Targets::Classes { labels, .. }) => ReportRow {
                factor: factor.name().into(),
                kind: probe.kind.name().into(),
                role: factor.role().name().into(),
                metric: "ccr".into(),
                value: eval_ccr(&probe, &z_test, labels)?,
                std: None,
                baseline: Some(chance_baseline(*classes)),
            },
            (Targets::Values(ytr), Targets::Values(yte)) => {
                let (_, err) = absolute_errors(&probe.predict(&z_test)?, yte)?;
                let median = median_baseline(ytr)?;
                let (_, base) = absolute_errors(&median.predict(&z_test)?, yte)?;
                ReportRow {
                    factor: factor.name().into(),
                    kind: probe.kind.name().into(),
                    role: factor.role().name().into(),
                    metric: "mae".into(),
                    value: err.mean,
                    std: Some(err.std),
                    baseline: Some(base.mean),
                }
            }
            _ => unreachable!(),
        };
        rows.push(row);
    }
    Ok(ProbeReport { rows })
}

/// Image-space estimators, one per factor, trained on real training images.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorSet {
    pub estimators: Vec<(Factor, Probe)>,
}

impl EstimatorSet {
    pub fn train(train: &Dataset, cfg: &EvalConfig) -> Result<Self> {
        let x = train.all_images()?;
        let estimators = Factor::ALL
            .into_iter()
            .enumerate()
            .map(|(k, f)| {
                let s = ProbeSettings::from_eval(cfg, cfg.gls_seed.wrapping_add(k as u64));
                Ok((f, train_probe(&x, &f.targets(train)?, &s)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { estimators })
    }

    pub fn get(&self, f: Factor) -> Option<&Probe> {
        self.estimators.iter().find(|(g, _)| *g == f).map(|(_, p)| p)
    }

    pub fn checksum(&self) -> f64 {
        self.estimators.iter().map(|(_, p)| p.checksum()).sum()
    }
}

/// Scores a generator with frozen image-space estimators. Baselines are
/// `1/N_s` for the categorical score and the estimator's own error on real
/// test images for quantitative scores.
pub fn gls_report(
    estimators: &EstimatorSet,
    generator: &dyn Generator,
    test: &Dataset,
    cfg: &EvalConfig,
) -> Result<GlsReport> {
    let x = test.all_images()?;
    let labels = test.labels();
    let mut rows = Vec::new();
    for (k, (factor, est)) in estimators.estimators.iter().enumerate() {
        let mut rng = RngStream::new(cfg.gls_seed, Purpose::Codes as u64 * 16 + k as u64);
        let row = match factor.targets(test)? {
            Targets::Classes { classes, .. } => {
                let v = gls_categorical(est, generator, &x, &labels, test.n_s, factor.role(), &mut rng)?;
                ReportRow {
                    factor: factor.name().into(),
                    kind: "categorical".into(),
                    role: factor.role().name().into(),
                    metric: "gls".into(),
                    value: v.value,
                    std: Some(v.std),
                    baseline: Some(1.0 / classes as f64),
                }
            }
            Targets::Values(t) => {
                let v = gls_quantitative(est, generator, &x, &t, test.n_s, factor.role(), cfg.gls_p, &mut rng)?;
                let pred = est.predict(&x)?;
                let real: f64 = pred
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(&a, &b)| (f64::from(a) - f64::from(b)).abs().powf(cfg.gls_p))
                    .sum::<f64>()
                    / t.len() as f64;
                ReportRow {
                    factor: factor.name().into(),
                    kind: "quantitative".into(),
                    role: factor.role().name().into(),
                    metric: "gls".into(),
                    value: v.value,
                    std: Some(v.std),
                    baseline: Some(real),
                }
            }
        };
        rows.push(row);
    }
    Ok(GlsReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;

    fn mat(rows: &[&[f32]]) -> Tensor {
        Tensor::stack_rows(rows).unwrap()
    }

    struct Fixed(Tensor);

    impl Estimator for Fixed {
        fn predict(&self, x: &Tensor) -> Result<Tensor> {
            let idx: Vec<usize> = (0..x.rows()).map(|i| i % self.0.rows()).collect();
            Ok(self.0.gather_rows(&idx))
        }
    }

    struct Identity;

    impl Generator for Identity {
        fn generate(&self, x: &Tensor, _labels: &[usize]) -> Result<Tensor> {
            Ok(x.clone())
        }
    }

    /// Writes the requested class into column 0 so an oracle can read it back.
    struct Stamp;

    impl Generator for Stamp {
        fn generate(&self, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
            let mut out = x.clone();
            let c = x.cols();
            for (i, &y) in labels.iter().enumerate() {
                out.data_mut()[i * c] = y as f32;
            }
            Ok(out)
        }
    }

    struct Oracle(usize);

    impl Estimator for Oracle {
        fn predict(&self, x: &Tensor) -> Result<Tensor> {
            let mut p = Tensor::zeros(&[x.rows(), self.0])?;
            for i in 0..x.rows() {
                let y = x.row(i)[0] as usize;
                p.data_mut()[i * self.0 + y] = 1.0;
            }
            Ok(p)
        }
    }

    fn tiny_models() -> ModelSet {
        let dims = ModelDims {
            side: 4,
            d_z: 3,
            n_s: 4,
            hidden: vec![8],
        };
        ModelSet::init(dims, &mut RngStream::new(9, 1)).unwrap()
    }

    #[test]
    fn latents_shape_and_determinism() {
        let m = tiny_models();
        let row = [0.3f32; 16];
        let x = mat(&[&row, &row, &[0.1; 16]]);
        let z = extract_latents(&m, &x).unwrap();
        assert_eq!(z.shape(), &[3, 3]);
        assert_eq!(z.row(0), z.row(1));
        assert_eq!(extract_latents(&m, &x).unwrap(), z);
    }

    #[test]
    fn ccr_and_mae_arithmetic() {
        let p = Fixed(mat(&[&[0.9, 0.1], &[0.2, 0.8]]));
        let x = Tensor::zeros(&[2, 1]).unwrap();
        assert_eq!(eval_ccr(&p, &x, &[0, 1]).unwrap(), 100.0);
        assert_eq!(eval_ccr(&p, &x, &[1, 1]).unwrap(), 50.0);
        assert!(eval_ccr(&p, &x, &[]).is_err());

        let y = mat(&[&[1.0], &[3.0]]);
        let exact = Fixed(y.clone());
        let e = eval_mae(&exact, &x, &y).unwrap();
        assert_eq!((e[0].mean, e[0].std), (0.0, 0.0));
        let zero = Fixed(mat(&[&[0.0]]));
        let e = eval_mae(&zero, &x, &y).unwrap();
        assert_eq!((e[0].mean, e[0].std), (2.0, 1.0));
    }

    #[test]
    fn baselines() {
        assert_eq!(chance_baseline(4), 25.0);
        let m = median_baseline(&mat(&[&[-1.0], &[0.0], &[1.0]])).unwrap();
        assert_eq!(m.predict(&Tensor::zeros(&[2, 1]).unwrap()).unwrap().data(), &[0.0, 0.0]);
        let m = median_baseline(&mat(&[&[1.0], &[2.0]])).unwrap();
        assert_eq!(m.median, vec![1.5]);
    }

    #[test]
    fn median_baseline_on_uniform_targets() {
        // E|U - 1/2| = 1/4 for U ~ uniform(0, 1)
        let mut rng = RngStream::new(3, 0);
        let n = 10_000;
        let v: Vec<f32> = (0..n).map(|_| rng.uniform() as f32).collect();
        let t = Tensor::build(&[n, 1], v).unwrap();
        let m = median_baseline(&t).unwrap();
        let e = eval_mae(&m, &t, &t).unwrap();
        assert!((e[0].mean - 0.25).abs() <= 0.01, "{}", e[0].mean);
    }

    #[test]
    fn probe_fits_constant_targets() {
        let mut rng = RngStream::new(5, 0);
        let x = Tensor::randn_from(&[64, 3], &mut rng).unwrap();
        let y = Tensor::filled(&[64, 1], 0.7).unwrap();
        let s = ProbeSettings {
            epochs: 200,
            batch: 64,
            seed: 1,
            ..ProbeSettings::default()
        };
        let p = train_probe(&x, &Targets::Values(y), &s).unwrap();
        let out = p.predict(&x).unwrap();
        let worst = out.data().iter().map(|v| (v - 0.7).abs()).fold(0.0, f32::max);
        assert!(worst <= 1e-2, "{worst}");
    }

    #[test]
    fn probe_separates_two_clusters() {
        let mut rng = RngStream::new(6, 0);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..100 {
            let c = (i % 2) as f32 * 4.0 - 2.0;
            rows.push(vec![c + 0.3 * rng.normal_f32(), c + 0.3 * rng.normal_f32()]);
            labels.push(i % 2);
        }
        let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
        let x = Tensor::stack_rows(&refs).unwrap();
        let t = Targets::Classes {
            labels: labels.clone(),
            classes: 2,
        };
        let s = ProbeSettings {
            epochs: 30,
            batch: 16,
            seed: 2,
            ..ProbeSettings::default()
        };
        let p = train_probe(&x, &t, &s).unwrap();
        assert_eq!(eval_ccr(&p, &x, &labels).unwrap(), 100.0);
        let again = train_probe(&x, &t, &s).unwrap();
        assert_eq!(again, p);
    }

    #[test]
    fn zero_epochs_keep_initialization() {
        let x = Tensor::zeros(&[4, 2]).unwrap();
        let t = Targets::Classes {
            labels: vec![0, 1, 0, 1],
            classes: 2,
        };
        let s = ProbeSettings {
            epochs: 0,
            seed: 8,
            ..ProbeSettings::default()
        };
        let p = train_probe(&x, &t, &s).unwrap();
        let spec = p.net.spec.clone();
        let init = init_probe_net(&spec, &mut RngStream::for_purpose(8, Purpose::Probe)).unwrap();
        assert_eq!(p.net, init);
        assert!(train_probe(&x, &Targets::Classes { labels: vec![0], classes: 2 }, &s).is_err());
    }

    #[test]
    fn gls_categorical_bounds_and_controls() {
        let x = Tensor::zeros(&[50, 3]).unwrap();
        let labels: Vec<usize> = (0..50).map(|i| i % 4).collect();
        let mut rng = RngStream::new(1, 3);
        let oracle = gls_categorical(&Oracle(4), &Stamp, &x, &labels, 4, Role::Specified, &mut rng).unwrap();
        assert_eq!(oracle.value, 1.0);
        let uniform = Fixed(Tensor::filled(&[1, 4], 0.25).unwrap());
        for gen in [&Stamp as &dyn Generator, &Identity] {
            let v = gls_categorical(&uniform, gen, &x, &labels, 4, Role::Specified, &mut rng).unwrap();
            assert!((v.value - 0.25).abs() <= 1e-6);
        }
    }

    #[test]
    fn gls_categorical_hand_enumeration() {
        let est = Fixed(mat(&[&[0.5, 0.3, 0.2], &[0.1, 0.6, 0.3], &[0.2, 0.2, 0.6]]));
        let x = Tensor::zeros(&[3, 1]).unwrap();
        let labels = [0, 2, 1];
        let mut rng = RngStream::new(2, 3);
        let v = gls_categorical(&est, &Identity, &x, &labels, 3, Role::Unspecified, &mut rng).unwrap();
        let expect = (0.5 + 0.3 + 0.2f32 as f64) / 3.0;
        let want = (f64::from(0.5f32) + f64::from(0.3f32) + f64::from(0.2f32)) / 3.0;
        assert!((v.value - want).abs() < 1e-12 && (v.value - expect).abs() < 1e-7);
    }

    #[test]
    fn gls_quantitative_arithmetic() {
        let x = mat(&[&[0.0], &[1.0], &[0.5], &[2.0]]);
        let mut rng = RngStream::new(3, 3);
        struct Echo;
        impl Estimator for Echo {
            fn predict(&self, x: &Tensor) -> Result<Tensor> {
                Ok(x.clone())
            }
        }
        let v = gls_quantitative(&Echo, &Identity, &x, &x, 2, Role::Unspecified, 1.0, &mut rng).unwrap();
        assert_eq!(v.value, 0.0);

        let c = Fixed(mat(&[&[0.3]]));
        let t = mat(&[&[0.0], &[1.0]]);
        let x2 = Tensor::zeros(&[2, 1]).unwrap();
        let v = gls_quantitative(&c, &Identity, &x2, &t, 2, Role::Unspecified, 1.0, &mut rng).unwrap();
        let want = (f64::from(0.3f32) + (f64::from(0.3f32) - 1.0).abs()) / 2.0;
        assert!((v.value - want).abs() < 1e-12);

        // four samples, p = 2: errors 0, 1, 0.5, 2 -> squares 0, 1, 0.25, 4
        let zero = Fixed(mat(&[&[0.0]]));
        let v = gls_quantitative(&zero, &Identity, &x, &x, 2, Role::Unspecified, 2.0, &mut rng).unwrap();
        assert!((v.value - 5.25 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn interpolation_endpoints_are_direct_generation() {
        let m = tiny_models();
        let mut rng = RngStream::new(4, 0);
        let a: Vec<f32> = (0..16).map(|_| rng.uniform() as f32).collect();
        let b: Vec<f32> = (0..16).map(|_| rng.uniform() as f32).collect();
        let grid = interpolate(&m, &a, &b, 1, 3, 3, 4).unwrap();
        assert_eq!(grid.shape(), &[12, 16]);
        let first = m.generate_images(&Tensor::build(&[1, 16], a).unwrap(), &[1]).unwrap();
        let last = m.generate_images(&Tensor::build(&[1, 16], b).unwrap(), &[3]).unwrap();
        assert_eq!(grid.row(0), first.data());
        assert_eq!(grid.row(11), last.data());
        assert!(grid.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(interpolate(&m, &[0.0; 16], &[0.0; 16], 0, 1, 1, 2).is_err());
    }

    #[test]
    fn prior_samples_are_seeded() {
        let m = tiny_models();
        let a = sample_prior(&m, 2, 5, 11).unwrap();
        assert_eq!(a.shape(), &[5, 16]);
        assert_eq!(a, sample_prior(&m, 2, 5, 11).unwrap());
        assert_ne!(a, sample_prior(&m, 2, 5, 12).unwrap());
        assert!(sample_prior(&m, 4, 5, 11).is_err());
    }

    #[test]
    fn pgm_bytes() {
        let p = Pgm::from_unit(2, 2, &[0.0; 4]).unwrap();
        assert_eq!(&p.to_bytes()[..], b"P5\n2 2\n255\n\0\0\0\0");
        let p = Pgm::from_unit(1, 1, &[1.0]).unwrap();
        assert_eq!(p.pixels, vec![255]);
        let q = Pgm::from_unit(3, 2, &[0.1, 0.2, 0.3, 0.4, 0.5, 1.0]).unwrap();
        let back = Pgm::from_bytes(&q.to_bytes()).unwrap();
        assert_eq!(back, q);
        assert!(Pgm::from_bytes(b"P2\n1 1\n255\n\0").is_err());
        assert!(Pgm::from_bytes(b"P5\n2 2\n255\n\0").is_err());
    }

    #[test]
    fn grid_has_white_separators() {
        let imgs = Tensor::zeros(&[4, 4]).unwrap();
        let g = grid_pgm(&imgs, 2, 2, 2).unwrap();
        assert_eq!((g.width, g.height), (5, 5));
        for y in 0..5 {
            for x in 0..5 {
                let sep = x == 2 || y == 2;
                assert_eq!(g.pixels[y * 5 + x], if sep { 255 } else { 0 });
            }
        }
    }
}
