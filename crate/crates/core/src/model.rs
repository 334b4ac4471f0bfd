//! Encoder, decoder and the `(N_s + 1)`-way discriminator.
//!
//! The generator is `G(x, c) = Dec(Enc(x) ⊕ c)`: the encoder produces a
//! diagonal Gaussian over a `d_z`-dimensional latent, the decoder maps the
//! latent concatenated with a one-hot class code back to pixels. The
//! discriminator scores images over the `N_s` real classes plus a final
//! "fake" class at index `N_s`.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::format::{decode_weights, encode_weights, NamedTensor};
use crate::nn::{reparameterize, BoundMlp, DenseLayer, Mlp, MlpSpec, OutputActivation};
use crate::rng::RngStream;
use crate::tensor::{softmax_rows, Real, Tensor};

/// One-hot encoding of a specified-factor value.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCode(Vec<f32>);

impl ClassCode {
    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

pub fn one_hot(y: usize, n_s: usize) -> Result<ClassCode> {
    if y >= n_s {
        return Err(Error::Index(format!("class {y} with {n_s} classes")));
    }
    let mut v = vec![0.0; n_s];
    v[y] = 1.0;
    Ok(ClassCode(v))
}

/// `[B x n_s]` matrix of one-hot rows.
pub fn one_hot_batch<T: Real>(labels: &[usize], n_s: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); labels.len() * n_s];
    for (r, &y) in labels.iter().enumerate() {
        if y >= n_s {
            return Err(Error::Index(format!("class {y} with {n_s} classes")));
        }
        data[r * n_s + y] = T::one();
    }
    Tensor::build(&[labels.len(), n_s], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodeMode {
    /// `z` sampled by reparameterization.
    Stochastic,
    /// `z = mu`.
    Deterministic,
}

/// Encoder output on a graph.
#[derive(Debug, Clone, Copy)]
pub struct LatentDist {
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
}

/// Architecture of a [`ModelSet`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelDims {
    pub side: usize,
    pub d_z: usize,
    pub n_s: usize,
    /// Encoder/discriminator hidden widths; the decoder mirrors them.
    pub hidden: Vec<usize>,
}

impl ModelDims {
    pub fn pixels(&self) -> usize {
        self.side * self.side
    }

    pub fn encoder_spec(&self) -> MlpSpec {
        let mut w = vec![self.pixels()];
        w.extend(&self.hidden);
        w.push(2 * self.d_z);
        MlpSpec::new(&w, OutputActivation::Linear)
    }

    pub fn decoder_spec(&self) -> MlpSpec {
        let mut w = vec![self.d_z + self.n_s];
        w.extend(self.hidden.iter().rev());
        w.push(self.pixels());
        MlpSpec::new(&w, OutputActivation::Sigmoid)
    }

    pub fn discriminator_spec(&self) -> MlpSpec {
        let mut w = vec![self.pixels()];
        w.extend(&self.hidden);
        w.push(self.n_s + 1);
        MlpSpec::new(&w, OutputActivation::Linear)
    }

    fn validate(&self) -> Result<()> {
        if self.side == 0 || self.d_z == 0 || self.n_s == 0 {
            return Err(Error::invalid(format!("invalid model dims {self:?}")));
        }
        Ok(())
    }
}

/// Parameters of the three networks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSet<T: Real = f32> {
    pub dims: ModelDims,
    pub encoder: Mlp<T>,
    pub decoder: Mlp<T>,
    pub discriminator: Mlp<T>,
}

/// Which networks receive gradient when bound to a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub encoder: bool,
    pub decoder: bool,
    pub discriminator: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable {
        encoder: true,
        decoder: true,
        discriminator: true,
    };
    pub const NONE: Trainable = Trainable {
        encoder: false,
        decoder: false,
        discriminator: false,
    };
    pub const GENERATOR: Trainable = Trainable {
        encoder: true,
        decoder: true,
        discriminator: false,
    };
    pub const DISCRIMINATOR: Trainable = Trainable {
        encoder: false,
        decoder: false,
        discriminator: true,
    };
}

impl<T: Real> ModelSet<T> {
    /// Fresh parameters; the three networks draw from `rng` in the order
    /// encoder, decoder, discriminator.
    pub fn init(dims: ModelDims, rng: &mut RngStream) -> Result<Self> {
        dims.validate()?;
        let encoder = Mlp::init(&dims.encoder_spec(), rng)?;
        let decoder = Mlp::init(&dims.decoder_spec(), rng)?;
        let discriminator = Mlp::init(&dims.discriminator_spec(), rng)?;
        Ok(Self {
            dims,
            encoder,
            decoder,
            discriminator,
        })
    }

    pub fn from_parts(
        dims: ModelDims,
        encoder: Mlp<T>,
        decoder: Mlp<T>,
        discriminator: Mlp<T>,
    ) -> Result<Self> {
        dims.validate()?;
        let encoder = Mlp::from_layers(&dims.encoder_spec(), encoder.layers)?;
        let decoder = Mlp::from_layers(&dims.decoder_spec(), decoder.layers)?;
        let discriminator = Mlp::from_layers(&dims.discriminator_spec(), discriminator.layers)?;
        Ok(Self {
            dims,
            encoder,
            decoder,
            discriminator,
        })
    }

    pub fn cast<U: Real>(&self) -> ModelSet<U> {
        ModelSet {
            dims: self.dims.clone(),
            encoder: self.encoder.cast(),
            decoder: self.decoder.cast(),
            discriminator: self.discriminator.cast(),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: Trainable) -> BoundModels<T> {
        BoundModels {
            encoder: self.encoder.bind(g, trainable.encoder),
            decoder: self.decoder.bind(g, trainable.decoder),
            discriminator: self.discriminator.bind(g, trainable.discriminator),
            d_z: self.dims.d_z,
            n_s: self.dims.n_s,
        }
    }

    /// Named parameter arrays: `enc.<i>.weight`, `enc.<i>.bias`, then the
    /// same under `dec.` and `dis.`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (prefix, net) in [
            ("enc", &self.encoder),
            ("dec", &self.decoder),
            ("dis", &self.discriminator),
        ] {
            for (i, l) in net.layers.iter().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), &l.weight));
                out.push((format!("{prefix}.{i}.bias"), &l.bias));
            }
        }
        out
    }
}

impl ModelSet<f32> {
    /// Rebuilds a model set from named arrays, inferring the architecture
    /// from the array shapes.
    pub fn from_named(arrays: &[NamedTensor]) -> Result<Self> {
        let find = |name: &str| {
            arrays
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
        };
        let layers = |prefix: &str| -> Result<Vec<DenseLayer>> {
            let mut out = Vec::new();
            while let Some(weight) = find(&format!("{prefix}.{}.weight", out.len())) {
                let bias = find(&format!("{prefix}.{}.bias", out.len())).ok_or_else(|| {
                    Error::format(format!("missing {prefix}.{}.bias", out.len()))
                })?;
                out.push(DenseLayer { weight, bias });
            }
            if out.is_empty() {
                return Err(Error::format(format!("no {prefix} layers")));
            }
            Ok(out)
        };
        let (enc, dec, dis) = (layers("enc")?, layers("dec")?, layers("dis")?);
        let cols = |l: &DenseLayer| l.weight.shape().get(1).copied().unwrap_or(0);
        let pixels = enc[0].weight.shape()[0];
        let side = (pixels as f64).sqrt().round() as usize;
        if side * side != pixels {
            return Err(Error::format(format!("{pixels} inputs is not a square image")));
        }
        let d_z = cols(enc.last().unwrap()) / 2;
        let n_s = cols(dis.last().unwrap()).saturating_sub(1);
        let hidden = enc[..enc.len() - 1].iter().map(cols).collect();
        let dims = ModelDims {
            side,
            d_z,
            n_s,
            hidden,
        };
        let wrap = |spec: MlpSpec, layers| Mlp { spec, layers };
        Self::from_parts(
            dims.clone(),
            wrap(dims.encoder_spec(), enc),
            wrap(dims.decoder_spec(), dec),
            wrap(dims.discriminator_spec(), dis),
        )
        .map_err(|e| Error::format(e.to_string()))
    }

    pub fn to_weights_bytes(&self) -> Result<Vec<u8>> {
        let named = self.named_tensors();
        let refs: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        encode_weights(&refs)
    }

    pub fn from_weights_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_named(&decode_weights(bytes)?)
    }

    /// Deterministic latent means, `[n x d_z]`.
    pub fn encode_mean(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let m = self.bind(&mut g, Trainable::NONE);
        let xv = g.constant(x.clone());
        let lat = m.encode(&mut g, xv, EncodeMode::Deterministic, None)?;
        Ok(g.value(lat.mu).clone())
    }

    /// Decoder output for latents and (possibly non one-hot) codes.
    pub fn decode_latent(&self, z: &Tensor, codes: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let m = self.bind(&mut g, Trainable::NONE);
        let zv = g.constant(z.clone());
        let cv = g.constant(codes.clone());
        let out = m.decode(&mut g, zv, cv)?;
        Ok(g.value(out).clone())
    }

    /// Deterministic `G(x, c(y))` for each row.
    pub fn generate_images(&self, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let m = self.bind(&mut g, Trainable::NONE);
        let xv = g.constant(x.clone());
        let out = m.generate(&mut g, xv, labels, EncodeMode::Deterministic, None)?;
        Ok(g.value(out).clone())
    }

    /// Discriminator class probabilities, `[n x (N_s + 1)]`.
    pub fn discriminate_probs(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let m = self.bind(&mut g, Trainable::NONE);
        let xv = g.constant(x.clone());
        let logits = m.discriminate(&mut g, xv)?;
        let l = g.value(logits);
        let p = softmax_rows(l.data(), l.rows(), l.cols());
        Tensor::build(l.shape(), p)
    }
}

/// A [`ModelSet`] placed on a graph.
#[derive(Debug, Clone)]
pub struct BoundModels<T: Real = f32> {
    pub encoder: BoundMlp<T>,
    pub decoder: BoundMlp<T>,
    pub discriminator: BoundMlp<T>,
    pub d_z: usize,
    pub n_s: usize,
}

impl<T: Real> BoundModels<T> {
    /// Splits the encoder head into `(mu, logvar)`; stochastic mode needs `rng`.
    pub fn encode(
        &self,
        g: &mut Graph<T>,
        x: Var,
        mode: EncodeMode,
        rng: Option<&mut RngStream>,
    ) -> Result<LatentDist> {
        let head = self.encoder.forward(g, x)?;
        let mu = g.slice_cols(head, 0, self.d_z)?;
        let logvar = g.slice_cols(head, self.d_z, self.d_z)?;
        let z = match mode {
            EncodeMode::Deterministic => mu,
            EncodeMode::Stochastic => {
                let rng = rng.ok_or_else(|| {
                    Error::invalid("stochastic encoding needs a random stream")
                })?;
                reparameterize(g, mu, logvar, rng)?
            }
        };
        Ok(LatentDist { mu, logvar, z })
    }

    /// `Dec(z ⊕ codes)` with codes `[B x N_s]`.
    pub fn decode(&self, g: &mut Graph<T>, z: Var, codes: Var) -> Result<Var> {
        let (zs, cs) = (g.value(z).shape(), g.value(codes).shape());
        if zs.len() != 2 || zs[1] != self.d_z || cs.len() != 2 || cs[1] != self.n_s || cs[0] != zs[0]
        {
            return Err(Error::shape(format!(
                "decode: z {zs:?} with codes {cs:?} (d_z {}, N_s {})",
                self.d_z, self.n_s
            )));
        }
        let input = g.concat(z, codes, 1)?;
        self.decoder.forward(g, input)
    }

    /// Constant one-hot code matrix for `labels`.
    pub fn codes(&self, g: &mut Graph<T>, labels: &[usize]) -> Result<Var> {
        let c = one_hot_batch(labels, self.n_s)?;
        Ok(g.constant(c))
    }

    pub fn generate(
        &self,
        g: &mut Graph<T>,
        x: Var,
        labels: &[usize],
        mode: EncodeMode,
        rng: Option<&mut RngStream>,
    ) -> Result<Var> {
        let lat = self.encode(g, x, mode, rng)?;
        let c = self.codes(g, labels)?;
        self.decode(g, lat.z, c)
    }

    /// Raw logits `[B x (N_s + 1)]`; index `N_s` is the fake class.
    pub fn discriminate(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        self.discriminator.forward(g, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_dims() -> ModelDims {
        ModelDims {
            side: 4,
            d_z: 3,
            n_s: 4,
            hidden: vec![8],
        }
    }

    fn small_models(seed: u64) -> ModelSet {
        ModelSet::init(small_dims(), &mut RngStream::new(seed, 1)).unwrap()
    }

    fn images(n: usize, seed: u64) -> Tensor {
        let mut rng = RngStream::new(seed, 2);
        let data = (0..n * 16).map(|_| rng.uniform() as f32).collect();
        Tensor::build(&[n, 16], data).unwrap()
    }

    #[test]
    fn one_hot_examples() {
        assert_eq!(one_hot(2, 4).unwrap().as_slice(), &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(one_hot(0, 1).unwrap().as_slice(), &[1.0]);
        assert!(one_hot(4, 4).is_err());
    }

    #[test]
    fn one_hot_codes_are_orthonormal() {
        for a in 0..5 {
            for b in 0..5 {
                let (ca, cb) = (one_hot(a, 5).unwrap(), one_hot(b, 5).unwrap());
                let dot: f32 = ca.0.iter().zip(&cb.0).map(|(x, y)| x * y).sum();
                assert_eq!(dot, if a == b { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn deterministic_encoding_uses_mean() {
        let m = small_models(1);
        let mut g = Graph::new();
        let b = m.bind(&mut g, Trainable::NONE);
        let x = g.constant(images(3, 1));
        let lat = b.encode(&mut g, x, EncodeMode::Deterministic, None).unwrap();
        assert_eq!(lat.z, lat.mu);
        assert!(b.encode(&mut g, x, EncodeMode::Stochastic, None).is_err());
    }

    #[test]
    fn stochastic_encoding_is_seeded() {
        let m = small_models(1);
        let run = || {
            let mut g = Graph::new();
            let b = m.bind(&mut g, Trainable::NONE);
            let x = g.constant(images(3, 1));
            let mut rng = RngStream::new(5, 4);
            let lat = b
                .encode(&mut g, x, EncodeMode::Stochastic, Some(&mut rng))
                .unwrap();
            g.value(lat.z).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn identical_rows_encode_identically() {
        let m = small_models(2);
        let one = images(1, 3);
        let two = Tensor::stack_rows(&[one.row(0), one.row(0)]).unwrap();
        let mu = m.encode_mean(&two).unwrap();
        assert_eq!(mu.row(0), mu.row(1));
    }

    #[test]
    fn rows_are_independent_under_permutation() {
        let m = small_models(3);
        let x = images(5, 4);
        let perm = [3, 0, 4, 1, 2];
        let xp = x.gather_rows(&perm);
        let mu = m.encode_mean(&x).unwrap();
        let mup = m.encode_mean(&xp).unwrap();
        assert_eq!(mu.gather_rows(&perm), mup);
        let labels = [0, 1, 2, 3, 0];
        let plabels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let gx = m.generate_images(&x, &labels).unwrap();
        let gxp = m.generate_images(&xp, &plabels).unwrap();
        assert_eq!(gx.gather_rows(&perm), gxp);
        let d = m.discriminate_probs(&x).unwrap();
        let dp = m.discriminate_probs(&xp).unwrap();
        assert_eq!(d.gather_rows(&perm), dp);
    }

    #[test]
    fn decoder_output_in_unit_interval() {
        let m = small_models(4);
        let z = Tensor::randn(&[6, 3], 9).unwrap();
        let c = one_hot_batch(&[0, 1, 2, 3, 0, 1], 4).unwrap();
        let out = m.decode_latent(&z, &c).unwrap();
        assert_eq!(out.shape(), &[6, 16]);
        assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let bad = Tensor::randn(&[6, 2], 9).unwrap();
        assert!(m.decode_latent(&bad, &c).is_err());
    }

    #[test]
    fn generate_is_decode_of_encode() {
        let m = small_models(5);
        let x = images(3, 6);
        let labels = [2, 0, 1];
        let direct = m.generate_images(&x, &labels).unwrap();
        let z = m.encode_mean(&x).unwrap();
        let c = one_hot_batch(&labels, 4).unwrap();
        assert_eq!(m.decode_latent(&z, &c).unwrap(), direct);
        assert_eq!(m.generate_images(&x, &labels).unwrap(), direct);
        assert!(direct.all_finite());
        assert!(direct.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn discriminator_shape_and_simplex() {
        let m = small_models(6);
        let p = m.discriminate_probs(&images(3, 7)).unwrap();
        assert_eq!(p.shape(), &[3, 5]);
        for r in 0..3 {
            let s: f32 = p.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn weights_round_trip_is_byte_exact() {
        let m = small_models(8);
        let bytes = m.to_weights_bytes().unwrap();
        let back = ModelSet::from_weights_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_weights_bytes().unwrap(), bytes);
    }

    #[test]
    fn zero_discriminator_is_uniform() {
        let mut m = small_models(7);
        for t in m.discriminator.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let p = m.discriminate_probs(&images(2, 8)).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.2).abs() < 1e-7));
    }
}
