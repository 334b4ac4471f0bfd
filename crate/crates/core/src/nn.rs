//! Dense networks, the Adam optimizer and the Gaussian latent helpers.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    Linear,
    Sigmoid,
}

/// Layer widths (input first), hidden leaky-relu slope and output activation.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub slope: f64,
    pub output: OutputActivation,
}

impl MlpSpec {
    pub fn new(widths: &[usize], output: OutputActivation) -> Self {
        Self {
            widths: widths.to_vec(),
            slope: 0.2,
            output,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::invalid("an MLP needs at least one layer"));
        }
        if self.widths.contains(&0) {
            return Err(Error::invalid(format!(
                "MLP widths must be positive: {:?}",
                self.widths
            )));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T: Real = f32> {
    /// `[in x out]`
    pub weight: Tensor<T>,
    /// `[out]`
    pub bias: Tensor<T>,
}

/// Parameters of a multi-layer perceptron.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T: Real = f32> {
    pub spec: MlpSpec,
    pub layers: Vec<DenseLayer<T>>,
}

impl<T: Real> Mlp<T> {
    /// He-uniform weights (bound `sqrt(6 / fan_in)`) and zero biases.
    pub fn init(spec: &MlpSpec, rng: &mut RngStream) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| T::of((2.0 * rng.uniform() - 1.0) * bound))
                    .collect();
                Ok(DenseLayer {
                    weight: Tensor::build(&[fan_in, fan_out], data)?,
                    bias: Tensor::zeros(&[fan_out])?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn init_seeded(spec: &MlpSpec, seed: u64) -> Result<Self> {
        Self::init(spec, &mut RngStream::new(seed, 0))
    }

    /// Builds an MLP from explicit layers, validating the shapes.
    pub fn from_layers(spec: &MlpSpec, layers: Vec<DenseLayer<T>>) -> Result<Self> {
        spec.validate()?;
        if layers.len() != spec.widths.len() - 1 {
            return Err(Error::shape("layer count does not match spec"));
        }
        for (l, w) in layers.iter().zip(spec.widths.windows(2)) {
            if l.weight.shape() != [w[0], w[1]] || l.bias.shape() != [w[1]] {
                return Err(Error::shape(format!(
                    "layer {:?}/{:?} does not match widths {w:?}",
                    l.weight.shape(),
                    l.bias.shape()
                )));
            }
        }
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    /// Weight then bias of each layer, in order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp {
            spec: self.spec.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
        }
    }

    /// Places the parameters on a graph, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundMlp<T> {
        let mut leaf = |t: &Tensor<T>| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let layers = self
            .layers
            .iter()
            .map(|l| (leaf(&l.weight), leaf(&l.bias)))
            .collect();
        BoundMlp {
            layers,
            slope: T::of(self.spec.slope),
            output: self.spec.output,
            input_width: self.spec.input_width(),
        }
    }

    /// Forward pass without recording gradients.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = bound.forward(&mut g, xv)?;
        Ok(g.value(y).clone())
    }
}

/// An [`Mlp`] whose parameters live on a graph.
#[derive(Debug, Clone)]
pub struct BoundMlp<T: Real = f32> {
    layers: Vec<(Var, Var)>,
    slope: T,
    output: OutputActivation,
    input_width: usize,
}

impl<T: Real> BoundMlp<T> {
    /// Affine maps with leaky-relu between them, then the output activation.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let xs = g.value(x).shape();
        if xs.len() != 2 || xs[1] != self.input_width {
            return Err(Error::shape(format!(
                "MLP expects [B x {}], got {:?}",
                self.input_width, xs
            )));
        }
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let a = g.matmul(h, w)?;
            h = g.add_bias(a, b)?;
            if i + 1 < self.layers.len() {
                h = g.leaky_relu(h, self.slope);
            }
        }
        Ok(match self.output {
            OutputActivation::Linear => h,
            OutputActivation::Sigmoid => g.sigmoid(h),
        })
    }

    /// Substitutes node `v` for parameter `index` (order of [`Mlp::tensors`]).
    pub fn replace_param(&mut self, index: usize, v: Var) -> Result<()> {
        let n = self.layers.len() * 2;
        let slot = self
            .layers
            .get_mut(index / 2)
            .ok_or_else(|| Error::Index(format!("parameter {index} of {n}")))?;
        if index.is_multiple_of(2) {
            slot.0 = v;
        } else {
            slot.1 = v;
        }
        Ok(())
    }

    /// Parameter leaves in the order of [`Mlp::tensors`].
    pub fn params(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| p.zeros_like()).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected Adam update.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(format!(
                "adam: {} moments, {} params, {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::shape(format!(
                    "adam: param {:?} with grad {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = (1.0 - c.beta1.powi(t)) as f32;
        let bc2 = (1.0 - c.beta2.powi(t)) as f32;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let (lr, eps) = (c.lr as f32, c.eps as f32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Mean over the batch of `KL(N(mu, exp(logvar)) || N(0, I))`.
pub fn gaussian_kl<T: Real>(g: &mut Graph<T>, mu: Var, logvar: Var) -> Result<Var> {
    let batch = g.value(mu).rows();
    let mu2 = g.mul(mu, mu)?;
    let var = g.exp(logvar);
    let s = g.add(mu2, var)?;
    let s = g.sub(s, logvar)?;
    let s = g.add_scalar(s, -T::one());
    let total = g.sum(s);
    Ok(g.scalar_mul(total, T::of(0.5 / batch as f64)))
}

/// `mu + exp(logvar / 2) * noise` with the noise held constant.
pub fn reparameterize<T: Real>(
    g: &mut Graph<T>,
    mu: Var,
    logvar: Var,
    rng: &mut RngStream,
) -> Result<Var> {
    let shape = g.value(mu).shape().to_vec();
    if g.value(logvar).shape() != shape.as_slice() {
        return Err(Error::shape("reparameterize: mu and logvar differ in shape"));
    }
    let noise = g.constant(Tensor::randn_from(&shape, rng)?);
    let half = g.scalar_mul(logvar, T::of(0.5));
    let std = g.exp(half);
    let scaled = g.mul(std, noise)?;
    g.add(mu, scaled)
}
