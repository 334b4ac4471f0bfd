//! Built-in verification suite: finite-difference checks of every graph op,
//! the latent helpers, the networks and the three training losses, plus
//! hand-evaluated loss values on a fixed one-pixel model.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::gradcheck::grad_check;
use crate::model::{ModelDims, ModelSet, Trainable};
use crate::nn::{gaussian_kl, reparameterize, DenseLayer, Mlp, MlpSpec, OutputActivation};
use crate::rng::{Purpose, RngStream};
use crate::tensor::Tensor;
use crate::train::{
    backward_cycle_loss, discriminator_loss, forward_generator_loss, LossWeights,
};

/// Tolerance on the maximum relative error for single ops.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for whole-network composites.
pub const COMPOSITE_TOLERANCE: f64 = 1e-3;
/// Absolute tolerance of the hand-evaluated loss values.
pub const ORACLE_TOLERANCE: f64 = 1e-5;

const EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst error seen.
    pub error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!(
            "{} {:<40} err {:.3e} (tol {:.0e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.error,
            self.tolerance
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelfcheckOptions {
    /// Random evaluation points per gradient check.
    pub points: usize,
    pub seed: u64,
    /// Adds an op whose declared derivative has the wrong sign.
    pub inject_sign_error: bool,
}

impl Default for SelfcheckOptions {
    fn default() -> Self {
        Self {
            points: 10,
            seed: 17,
            inject_sign_error: false,
        }
    }
}

type LossFn = Box<dyn Fn(&mut Graph<f64>, Var) -> Result<Var>>;
type CaseMaker = Box<dyn Fn(&mut RngStream) -> Result<(Tensor<f64>, LossFn)>>;

/// One named check: draws its input and function for a given point.
struct Case {
    name: &'static str,
    tolerance: f64,
    make: CaseMaker,
}

fn randn(rng: &mut RngStream, shape: &[usize]) -> Result<Tensor<f64>> {
    Tensor::randn_from(shape, rng)
}

fn uniform(rng: &mut RngStream, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor<f64>> {
    let n = shape.iter().product();
    Tensor::build(shape, (0..n).map(|_| lo + (hi - lo) * rng.uniform()).collect())
}

/// Reduces a node to a scalar through fixed random weights so every output
/// coordinate carries a distinct upstream gradient.
fn project(g: &mut Graph<f64>, v: Var, w: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(w.clone());
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

/// `out = f(x)` projected onto random weights of the output's shape.
fn unary(
    name: &'static str,
    shape: &'static [usize],
    out_shape: &'static [usize],
    input: fn(&mut RngStream, &[usize]) -> Result<Tensor<f64>>,
    f: fn(&mut Graph<f64>, Var, &Tensor<f64>) -> Result<Var>,
) -> Case {
    Case {
        name,
        tolerance: OP_TOLERANCE,
        make: Box::new(move |rng| {
            let x = input(rng, shape)?;
            let aux = randn(rng, shape)?;
            let w = randn(rng, out_shape)?;
            let func: LossFn = Box::new(move |g, x| {
                let y = f(g, x, &aux)?;
                project(g, y, &w)
            });
            Ok((x, func))
        }),
    }
}

fn normal_input(rng: &mut RngStream, shape: &[usize]) -> Result<Tensor<f64>> {
    randn(rng, shape)
}

fn positive_input(rng: &mut RngStream, shape: &[usize]) -> Result<Tensor<f64>> {
    uniform(rng, shape, 0.5, 2.0)
}

fn cube(x: f64) -> f64 {
    x * x * x
}

fn cube_slope(x: f64) -> f64 {
    3.0 * x * x
}

fn wrong_cube_slope(x: f64) -> f64 {
    -3.0 * x * x
}

const M: &[usize] = &[3, 4];

fn op_cases() -> Vec<Case> {
    vec![
        unary("add", M, M, normal_input, |g, x, a| {
            let c = g.constant(a.clone());
            g.add(x, c)
        }),
        unary("sub", M, M, normal_input, |g, x, a| {
            let c = g.constant(a.clone());
            g.sub(c, x)
        }),
        unary("mul", M, M, normal_input, |g, x, a| {
            let c = g.constant(a.clone());
            let xc = g.mul(x, c)?;
            g.mul(xc, x)
        }),
        unary("scalar_mul", M, M, normal_input, |g, x, _| Ok(g.scalar_mul(x, -1.7))),
        unary("add_scalar", M, M, normal_input, |g, x, _| Ok(g.add_scalar(x, 0.3))),
        unary("add_bias", M, M, normal_input, |g, x, a| {
            let b = g.constant(Tensor::build(&[4], a.row(0).to_vec())?);
            g.add_bias(x, b)
        }),
        unary("add_bias.bias", &[4], M, normal_input, |g, b, _| {
            let m = g.constant(Tensor::filled(&[3, 4], 0.5)?);
            g.add_bias(m, b)
        }),
        unary("matmul", M, &[3, 2], normal_input, |g, x, a| {
            let b = g.constant(Tensor::build(&[4, 2], a.data()[..8].to_vec())?);
            g.matmul(x, b)
        }),
        unary("matmul.rhs", M, &[2, 4], normal_input, |g, x, a| {
            let l = g.constant(Tensor::build(&[2, 3], a.data()[..6].to_vec())?);
            g.matmul(l, x)
        }),
        unary("leaky_relu", M, M, normal_input, |g, x, _| Ok(g.leaky_relu(x, 0.2))),
        unary("sigmoid", M, M, normal_input, |g, x, _| Ok(g.sigmoid(x))),
        unary("tanh", M, M, normal_input, |g, x, _| Ok(g.tanh(x))),
        unary("exp", M, M, normal_input, |g, x, _| Ok(g.exp(x))),
        unary("log", M, M, positive_input, |g, x, _| g.log(x)),
        unary("abs", M, M, normal_input, |g, x, _| Ok(g.abs(x))),
        unary("map", M, M, normal_input, |g, x, _| Ok(g.map(x, cube, cube_slope))),
        unary("sum", M, &[1], normal_input, |g, x, _| Ok(g.sum(x))),
        unary("mean", M, &[1], normal_input, |g, x, _| Ok(g.mean(x))),
        unary("concat.rows", M, &[6, 4], normal_input, |g, x, a| {
            let c = g.constant(a.clone());
            g.concat(x, c, 0)
        }),
        unary("concat.cols", M, &[3, 8], normal_input, |g, x, a| {
            let c = g.constant(a.clone());
            g.concat(c, x, 1)
        }),
        unary("reshape", M, &[2, 6], normal_input, |g, x, _| g.reshape(x, &[2, 6])),
        unary("slice_cols", M, &[3, 2], normal_input, |g, x, _| g.slice_cols(x, 1, 2)),
        unary("softmax_cross_entropy", M, &[1], normal_input, |g, x, _| {
            g.softmax_cross_entropy(x, &[0, 3, 1])
        }),
        unary("log_softmax_prob", M, &[3], normal_input, |g, x, _| {
            g.log_softmax_prob(x, &[2, 0, 3])
        }),
        unary("mse", M, &[1], normal_input, |g, x, a| {
            let c = g.constant(a.clone());
            g.mse(x, c)
        }),
        unary("l1", M, &[1], normal_input, |g, x, a| {
            let c = g.constant(a.clone());
            g.l1(c, x)
        }),
    ]
}

fn small_dims() -> ModelDims {
    ModelDims {
        side: 2,
        d_z: 2,
        n_s: 3,
        hidden: vec![5],
    }
}

fn small_models(rng: &mut RngStream) -> Result<ModelSet<f64>> {
    ModelSet::<f64>::init(small_dims(), rng)
}

fn labels(rng: &mut RngStream, n: usize, n_s: usize) -> Vec<usize> {
    (0..n).map(|_| rng.below(n_s)).collect()
}

fn swapped(rng: &mut RngStream, ys: &[usize], n_s: usize) -> Vec<usize> {
    ys.iter()
        .map(|&y| (y + 1 + rng.below(n_s - 1)) % n_s)
        .collect()
}

#[derive(Clone, Copy)]
enum Wrt {
    Images,
    Encoder(usize),
    Decoder(usize),
    Discriminator(usize),
}

#[derive(Clone, Copy)]
enum LossKind {
    Discriminator,
    Generator,
    Backward,
}

fn loss_case(name: &'static str, kind: LossKind, wrt: Wrt) -> Case {
    Case {
        name,
        tolerance: COMPOSITE_TOLERANCE,
        make: Box::new(move |rng| {
            let models = small_models(rng)?;
            let b = 3;
            let images = uniform(rng, &[b, 4], 0.05, 0.95)?;
            let ys = labels(rng, b, 3);
            let other = swapped(rng, &ys, 3);
            let noise_seed = rng.next_u64();
            let weights = LossWeights {
                g1: 0.7,
                g2: 1.3,
                g3: 0.4,
                d1: 0.9,
                d2: 1.1,
                bw1: 0.6,
                bw2: 1.5,
                z_cycle: true,
                x_cycle: true,
            };
            let x0 = match wrt {
                Wrt::Images => images.clone(),
                Wrt::Encoder(i) => models.encoder.tensors()[i].clone(),
                Wrt::Decoder(i) => models.decoder.tensors()[i].clone(),
                Wrt::Discriminator(i) => models.discriminator.tensors()[i].clone(),
            };
            let func: LossFn = Box::new(move |g, v| {
                let mut m = models.bind(g, Trainable::NONE);
                let x = match wrt {
                    Wrt::Images => v,
                    Wrt::Encoder(i) => {
                        m.encoder.replace_param(i, v)?;
                        g.constant(images.clone())
                    }
                    Wrt::Decoder(i) => {
                        m.decoder.replace_param(i, v)?;
                        g.constant(images.clone())
                    }
                    Wrt::Discriminator(i) => {
                        m.discriminator.replace_param(i, v)?;
                        g.constant(images.clone())
                    }
                };
                let mut noise = RngStream::for_purpose(noise_seed, Purpose::Reparam);
                Ok(match kind {
                    LossKind::Discriminator => {
                        discriminator_loss(g, &m, x, &ys, &other, &weights, &mut noise)?.total
                    }
                    LossKind::Generator => {
                        forward_generator_loss(g, &m, x, &ys, &other, &weights, &mut noise)?.total
                    }
                    LossKind::Backward => {
                        backward_cycle_loss(g, &m, x, &ys, &other, &weights, &mut noise)?.total
                    }
                })
            });
            Ok((x0, func))
        }),
    }
}

fn composite_cases() -> Vec<Case> {
    vec![
        Case {
            name: "reparameterize",
            tolerance: OP_TOLERANCE,
            make: Box::new(|rng| {
                let lv = randn(rng, M)?;
                let w = randn(rng, M)?;
                let seed = rng.next_u64();
                let x = randn(rng, &[3, 8])?;
                let f: LossFn = Box::new(move |g, x| {
                    let mu = g.slice_cols(x, 0, 4)?;
                    let lv_x = g.slice_cols(x, 4, 4)?;
                    let lv_c = g.constant(lv.clone());
                    let lv = g.add(lv_x, lv_c)?;
                    let mut r = RngStream::new(seed, Purpose::Reparam as u64);
                    let z = reparameterize(g, mu, lv, &mut r)?;
                    project(g, z, &w)
                });
                Ok((x, f))
            }),
        },
        Case {
            name: "gaussian_kl",
            tolerance: OP_TOLERANCE,
            make: Box::new(|rng| {
                let x = randn(rng, &[3, 8])?;
                let f: LossFn = Box::new(|g, x| {
                    let mu = g.slice_cols(x, 0, 4)?;
                    let lv = g.slice_cols(x, 4, 4)?;
                    gaussian_kl(g, mu, lv)
                });
                Ok((x, f))
            }),
        },
        Case {
            name: "mlp",
            tolerance: COMPOSITE_TOLERANCE,
            make: Box::new(|rng| {
                let spec = MlpSpec::new(&[4, 6, 5, 3], OutputActivation::Sigmoid);
                let net = Mlp::<f64>::init(&spec, rng)?;
                let w = randn(rng, &[2, 3])?;
                let x = randn(rng, &[2, 4])?;
                let f: LossFn = Box::new(move |g, x| {
                    let y = net.bind(g, false).forward(g, x)?;
                    project(g, y, &w)
                });
                Ok((x, f))
            }),
        },
        Case {
            name: "mlp.weight",
            tolerance: COMPOSITE_TOLERANCE,
            make: Box::new(|rng| {
                let spec = MlpSpec::new(&[4, 6, 3], OutputActivation::Linear);
                let net = Mlp::<f64>::init(&spec, rng)?;
                let w = randn(rng, &[2, 3])?;
                let input = randn(rng, &[2, 4])?;
                let x = net.layers[0].weight.clone();
                let f: LossFn = Box::new(move |g, v| {
                    let mut b = net.bind(g, false);
                    b.replace_param(0, v)?;
                    let i = g.constant(input.clone());
                    let y = b.forward(g, i)?;
                    project(g, y, &w)
                });
                Ok((x, f))
            }),
        },
        loss_case("discriminator_loss.weight", LossKind::Discriminator, Wrt::Discriminator(0)),
        loss_case("discriminator_loss.bias", LossKind::Discriminator, Wrt::Discriminator(3)),
        loss_case("forward_generator_loss.images", LossKind::Generator, Wrt::Images),
        loss_case("forward_generator_loss.encoder", LossKind::Generator, Wrt::Encoder(0)),
        loss_case("forward_generator_loss.decoder", LossKind::Generator, Wrt::Decoder(2)),
        loss_case("backward_cycle_loss.images", LossKind::Backward, Wrt::Images),
        loss_case("backward_cycle_loss.encoder", LossKind::Backward, Wrt::Encoder(0)),
        loss_case("backward_cycle_loss.decoder", LossKind::Backward, Wrt::Decoder(0)),
    ]
}

fn run_case(case: &Case, opts: &SelfcheckOptions, index: u64) -> CheckResult {
    let mut rng = RngStream::new(opts.seed, 1000 + index);
    let mut worst = 0.0f64;
    for _ in 0..opts.points {
        let outcome = case
            .make
            .as_ref()(&mut rng)
            .and_then(|(x, f)| grad_check(f, &x, EPS));
        match outcome {
            Ok(r) => worst = worst.max(r.max_rel_err),
            Err(_) => worst = f64::INFINITY,
        }
    }
    CheckResult {
        name: case.name.to_string(),
        passed: worst <= case.tolerance,
        error: worst,
        tolerance: case.tolerance,
    }
}

/// Finite-difference checks of every op, helper and loss.
pub fn gradient_checks(opts: &SelfcheckOptions) -> Vec<CheckResult> {
    let mut cases = op_cases();
    cases.extend(composite_cases());
    if opts.inject_sign_error {
        cases.push(unary("map.sign_error", M, M, normal_input, |g, x, _| {
            Ok(g.map(x, cube, wrong_cube_slope))
        }));
    }
    cases
        .iter()
        .enumerate()
        .map(|(i, c)| run_case(c, opts, i as u64))
        .collect()
}

/// The fixed one-pixel model: one affine layer per network.
pub fn pixel_models() -> Result<ModelSet> {
    let dims = ModelDims {
        side: 1,
        d_z: 1,
        n_s: 2,
        hidden: vec![],
    };
    let layer = |w: &[f32], shape: [usize; 2], b: &[f32]| -> Result<DenseLayer> {
        Ok(DenseLayer {
            weight: Tensor::build(&shape, w.to_vec())?,
            bias: Tensor::build(&[b.len()], b.to_vec())?,
        })
    };
    let enc = Mlp::from_layers(
        &dims.encoder_spec(),
        vec![layer(&[0.8, -0.5], [1, 2], &[0.1, -1.2])?],
    )?;
    let dec = Mlp::from_layers(
        &dims.decoder_spec(),
        vec![layer(&[1.3, 0.7, -0.4], [3, 1], &[0.2])?],
    )?;
    let dis = Mlp::from_layers(
        &dims.discriminator_spec(),
        vec![layer(&[1.1, -0.6, 0.3], [1, 3], &[0.05, 0.2, -0.1])?],
    )?;
    ModelSet::from_parts(dims, enc, dec, dis)
}

pub const PIXEL_IMAGES: [f32; 2] = [0.6, 0.3];
pub const PIXEL_LABELS: [usize; 2] = [0, 1];
pub const PIXEL_OTHER: [usize; 2] = [1, 0];

pub fn pixel_weights() -> LossWeights {
    LossWeights {
        g1: 0.7,
        g2: 1.3,
        g3: 0.4,
        d1: 0.9,
        d2: 1.1,
        bw1: 0.6,
        bw2: 1.5,
        z_cycle: true,
        x_cycle: true,
    }
}

/// Scalar re-implementation of the one-pixel networks.
struct Pixel {
    enc: [f64; 4],
    dec: [f64; 4],
    dis: [f64; 6],
}

impl Pixel {
    fn new(m: &ModelSet) -> Self {
        let flat = |net: &Mlp| -> Vec<f64> {
            net.tensors()
                .iter()
                .flat_map(|t| t.data().iter().map(|&v| f64::from(v)))
                .collect()
        };
        let (e, d, s) = (flat(&m.encoder), flat(&m.decoder), flat(&m.discriminator));
        Self {
            enc: [e[0], e[1], e[2], e[3]],
            dec: [d[0], d[1], d[2], d[3]],
            dis: [s[0], s[1], s[2], s[3], s[4], s[5]],
        }
    }

    /// (mu, logvar)
    fn encode(&self, x: f64) -> (f64, f64) {
        (self.enc[0] * x + self.enc[2], self.enc[1] * x + self.enc[3])
    }

    fn decode(&self, z: f64, y: usize) -> f64 {
        let c = if y == 0 { self.dec[1] } else { self.dec[2] };
        let a = self.dec[0] * z + c + self.dec[3];
        1.0 / (1.0 + (-a).exp())
    }

    fn log_prob(&self, x: f64, k: usize) -> f64 {
        let l: Vec<f64> = (0..3).map(|j| self.dis[j] * x + self.dis[3 + j]).collect();
        let mx = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + l.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        l[k] - lse
    }
}

/// Hand-evaluated `(discriminator, forward generator, backward cycle)` loss
/// values on the one-pixel model, with noise drawn from `seed`.
pub fn pixel_oracle(m: &ModelSet, w: &LossWeights, seed: u64) -> [f64; 3] {
    let p = Pixel::new(m);
    let b = PIXEL_IMAGES.len() as f64;
    let x: Vec<f64> = PIXEL_IMAGES.iter().map(|&v| f64::from(v)).collect();
    let mut noise = RngStream::for_purpose(seed, Purpose::Reparam);
    let mut draw = || f64::from(noise.normal_f64() as f32);

    // discriminator
    let eps: Vec<f64> = x.iter().map(|_| draw()).collect();
    let mut real = 0.0;
    let mut fake = 0.0;
    for i in 0..x.len() {
        let (mu, lv) = p.encode(x[i]);
        let synth = p.decode(mu + (0.5 * lv).exp() * eps[i], PIXEL_OTHER[i]);
        real += p.log_prob(x[i], PIXEL_LABELS[i]);
        fake += p.log_prob(synth, 2);
    }
    let d = -w.d1 * real / b - w.d2 * fake / b;

    // forward generator
    let mut noise = RngStream::for_purpose(seed, Purpose::Reparam);
    let mut draw = || f64::from(noise.normal_f64() as f32);
    let eps: Vec<f64> = x.iter().map(|_| draw()).collect();
    let (mut adv, mut rec, mut kl) = (0.0, 0.0, 0.0);
    for i in 0..x.len() {
        let (mu, lv) = p.encode(x[i]);
        let z = mu + (0.5 * lv).exp() * eps[i];
        adv += p.log_prob(p.decode(z, PIXEL_OTHER[i]), PIXEL_OTHER[i]);
        rec += (x[i] - p.decode(z, PIXEL_LABELS[i])).powi(2);
        kl += mu * mu + lv.exp() - lv - 1.0;
    }
    let gen = -w.g1 * adv / b + w.g2 * rec / b + w.g3 * 0.5 * kl / b;

    // backward cycle
    let mut noise = RngStream::for_purpose(seed, Purpose::Reparam);
    let mut draw = || f64::from(noise.normal_f64() as f32);
    let eps1: Vec<f64> = x.iter().map(|_| draw()).collect();
    let eps2: Vec<f64> = x.iter().map(|_| draw()).collect();
    let (mut zt, mut xt) = (0.0, 0.0);
    for i in 0..x.len() {
        let (mu, lv) = p.encode(x[i]);
        let swapped = p.decode(mu + (0.5 * lv).exp() * eps1[i], PIXEL_OTHER[i]);
        let (mu2, lv2) = p.encode(swapped);
        zt += (mu - mu2).abs();
        xt += (x[i] - p.decode(mu2 + (0.5 * lv2).exp() * eps2[i], PIXEL_LABELS[i])).powi(2);
    }
    let bw = w.bw1 * zt / b + w.bw2 * xt / b;
    [d, gen, bw]
}

/// The three loss totals computed by the graph on the one-pixel model.
pub fn pixel_losses(m: &ModelSet, w: &LossWeights, seed: u64) -> Result<[f64; 3]> {
    let mut out = [0.0; 3];
    for (k, slot) in out.iter_mut().enumerate() {
        let mut g = Graph::new();
        let bound = m.bind(&mut g, Trainable::NONE);
        let x = g.constant(Tensor::build(&[2, 1], PIXEL_IMAGES.to_vec())?);
        let mut noise = RngStream::for_purpose(seed, Purpose::Reparam);
        let v = match k {
            0 => discriminator_loss(&mut g, &bound, x, &PIXEL_LABELS, &PIXEL_OTHER, w, &mut noise)?.total,
            1 => forward_generator_loss(&mut g, &bound, x, &PIXEL_LABELS, &PIXEL_OTHER, w, &mut noise)?.total,
            _ => backward_cycle_loss(&mut g, &bound, x, &PIXEL_LABELS, &PIXEL_OTHER, w, &mut noise)?.total,
        };
        *slot = f64::from(g.value(v).item());
    }
    Ok(out)
}

pub fn oracle_checks(seed: u64) -> Vec<CheckResult> {
    const NAMES: [&str; 3] = [
        "oracle.discriminator_loss",
        "oracle.forward_generator_loss",
        "oracle.backward_cycle_loss",
    ];
    let w = pixel_weights();
    let got = pixel_models().and_then(|m| Ok((pixel_oracle(&m, &w, seed), pixel_losses(&m, &w, seed)?)));
    NAMES
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let error = match &got {
                Ok((want, have)) => (want[k] - have[k]).abs(),
                Err(_) => f64::INFINITY,
            };
            CheckResult {
                name: name.to_string(),
                passed: error <= ORACLE_TOLERANCE,
                error,
                tolerance: ORACLE_TOLERANCE,
            }
        })
        .collect()
}

/// Every check, gradient checks first.
pub fn run(opts: &SelfcheckOptions) -> Vec<CheckResult> {
    let mut out = gradient_checks(opts);
    out.extend(oracle_checks(opts.seed));
    out
}
