//! Encoder, decoder and latent classifier.
//!
//! The encoder is a stack of `k4 s2 p1` convolutions with ReLU, flattened
//! into two affine heads for the posterior mean and log-variance. The
//! decoder mirrors it: an affine map back to the smallest feature map
//! followed by transposed convolutions, with no output squashing. The
//! classifier is `affine(m -> hidden) -> ReLU -> affine(hidden -> C)`.
//!
//! Parameters are plain tensors owned by [`Model`]. A training step binds
//! them onto a fresh [`Tape`] as leaves ([`Model::bind`]) and the forward
//! functions in this module operate on the resulting [`Var`] handles.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::normal_tensor;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const KERNEL: usize = 4;
pub const STRIDE: usize = 2;
pub const PAD: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub const COLOR_28: Self = Self { channels: 3, height: 28, width: 28 };
    pub const COLOR_64: Self = Self { channels: 3, height: 64, width: 64 };

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub image: ImageShape,
    /// Output channels of each encoder convolution.
    pub conv_channels: Vec<usize>,
    pub latent_dim: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl Architecture {
    /// Two-layer CNN for 28x28 colored digits.
    pub fn small(latent_dim: usize) -> Self {
        Self { image: ImageShape::COLOR_28, conv_channels: vec![16, 32], latent_dim, hidden: 128, classes: 2 }
    }

    /// Four-layer backbone for 64x64 inputs (32-32-64-128 channels).
    pub fn backbone64(latent_dim: usize) -> Self {
        Self {
            image: ImageShape::COLOR_64,
            conv_channels: vec![32, 32, 64, 128],
            latent_dim,
            hidden: 128,
            classes: 2,
        }
    }

    /// Spatial extent of the deepest feature map.
    pub fn bottleneck(&self) -> (usize, usize) {
        let mut h = self.image.height;
        let mut w = self.image.width;
        for _ in &self.conv_channels {
            h = (h + 2 * PAD - KERNEL) / STRIDE + 1;
            w = (w + 2 * PAD - KERNEL) / STRIDE + 1;
        }
        (h, w)
    }

    pub fn flat_features(&self) -> usize {
        let (h, w) = self.bottleneck();
        h * w * self.conv_channels.last().copied().unwrap_or(self.image.channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.classes < 2 || self.hidden == 0 || self.conv_channels.is_empty() {
            return Err(Error::invalid("architecture", format!("{self:?}")));
        }
        let mut h = self.image.height;
        for _ in &self.conv_channels {
            if h % STRIDE != 0 || h < STRIDE {
                return Err(Error::invalid("architecture", format!("height {} does not halve cleanly", self.image.height)));
            }
            h /= STRIDE;
        }
        Ok(())
    }
}

/// Affine layer `x @ weight + bias` with `weight: in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Convolution (`out x in x k x k`) or transposed convolution
/// (`in x out x k x k`) weights plus per-output-channel bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

fn he_uniform<T: Scalar>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
}

impl<T: Scalar> Linear<T> {
    fn init(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Self {
        Self { weight: he_uniform(rng, &[fan_in, fan_out], fan_in), bias: Tensor::zeros(&[fan_out]) }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { weight: Tensor::zeros(&[fan_in, fan_out]), bias: Tensor::zeros(&[fan_out]) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub convs: Vec<Conv<T>>,
    pub mu_head: Linear<T>,
    pub log_var_head: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams<T> {
    pub project: Linear<T>,
    pub deconvs: Vec<Conv<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams<T> {
    pub hidden: Linear<T>,
    pub out: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub arch: Architecture,
    pub encoder: EncoderParams<T>,
    pub decoder: DecoderParams<T>,
    pub classifier: ClassifierParams<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub convs: Vec<ConvVars>,
    pub mu_head: LinearVars,
    pub log_var_head: LinearVars,
}

#[derive(Clone, Debug)]
pub struct DecoderVars {
    pub project: LinearVars,
    pub deconvs: Vec<ConvVars>,
    channels: usize,
    bottleneck: (usize, usize),
}

#[derive(Clone, Copy, Debug)]
pub struct ClassifierVars {
    pub hidden: LinearVars,
    pub out: LinearVars,
}

/// A model's parameters bound onto one tape.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub decoder: DecoderVars,
    pub classifier: ClassifierVars,
    all: Vec<Var>,
}

impl ModelVars {
    /// Every bound parameter, in [`Model::params`] order.
    pub fn all(&self) -> &[Var] {
        &self.all
    }
}

/// Posterior statistics and the sampled code for one batch.
///
/// `z = mu + exp(0.5 * log_var) * noise` holds elementwise; `noise` is a
/// constant so gradients reach only `mu` and `log_var`.
#[derive(Clone, Debug)]
pub struct LatentBatch<T> {
    pub mu: Var,
    pub log_var: Var,
    pub z: Var,
    pub noise: Tensor<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(arch: Architecture, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let k2 = KERNEL * KERNEL;
        let mut convs = Vec::new();
        let mut cin = arch.image.channels;
        for &cout in &arch.conv_channels {
            convs.push(Conv {
                weight: he_uniform(rng, &[cout, cin, KERNEL, KERNEL], cin * k2),
                bias: Tensor::zeros(&[cout]),
            });
            cin = cout;
        }
        let flat = arch.flat_features();
        let m = arch.latent_dim;
        let encoder = EncoderParams { convs, mu_head: Linear::init(rng, flat, m), log_var_head: Linear::init(rng, flat, m) };

        let project = Linear::init(rng, m, flat);
        let mut deconvs = Vec::new();
        let mut chans: Vec<usize> = arch.conv_channels.iter().rev().copied().collect();
        chans.push(arch.image.channels);
        for pair in chans.windows(2) {
            let (cin, cout) = (pair[0], pair[1]);
            // each output pixel sees (k / s)^2 taps per input channel
            let fan_in = cin * (KERNEL / STRIDE) * (KERNEL / STRIDE);
            deconvs.push(Conv { weight: he_uniform(rng, &[cin, cout, KERNEL, KERNEL], fan_in), bias: Tensor::zeros(&[cout]) });
        }
        let decoder = DecoderParams { project, deconvs };
        let classifier =
            ClassifierParams { hidden: Linear::init(rng, m, arch.hidden), out: Linear::init(rng, arch.hidden, arch.classes) };
        Ok(Self { arch, encoder, decoder, classifier })
    }

    /// Named parameters in a fixed order shared by [`Model::params_mut`],
    /// [`Model::bind`] and the checkpoint format.
    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, c) in self.encoder.convs.iter().enumerate() {
            out.push((format!("encoder.conv{i}.weight"), &c.weight));
            out.push((format!("encoder.conv{i}.bias"), &c.bias));
        }
        out.push(("encoder.mu.weight".into(), &self.encoder.mu_head.weight));
        out.push(("encoder.mu.bias".into(), &self.encoder.mu_head.bias));
        out.push(("encoder.log_var.weight".into(), &self.encoder.log_var_head.weight));
        out.push(("encoder.log_var.bias".into(), &self.encoder.log_var_head.bias));
        out.push(("decoder.project.weight".into(), &self.decoder.project.weight));
        out.push(("decoder.project.bias".into(), &self.decoder.project.bias));
        for (i, c) in self.decoder.deconvs.iter().enumerate() {
            out.push((format!("decoder.deconv{i}.weight"), &c.weight));
            out.push((format!("decoder.deconv{i}.bias"), &c.bias));
        }
        out.push(("classifier.hidden.weight".into(), &self.classifier.hidden.weight));
        out.push(("classifier.hidden.bias".into(), &self.classifier.hidden.bias));
        out.push(("classifier.out.weight".into(), &self.classifier.out.weight));
        out.push(("classifier.out.bias".into(), &self.classifier.out.bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        let e = &mut self.encoder;
        for c in &mut e.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.extend([&mut e.mu_head.weight, &mut e.mu_head.bias, &mut e.log_var_head.weight, &mut e.log_var_head.bias]);
        out.extend([&mut self.decoder.project.weight, &mut self.decoder.project.bias]);
        for c in &mut self.decoder.deconvs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        let c = &mut self.classifier;
        out.extend([&mut c.hidden.weight, &mut c.hidden.bias, &mut c.out.weight, &mut c.out.bias]);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Places every parameter on `tape`, as leaves when `trainable`,
    /// otherwise as constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> ModelVars {
        let mut all = Vec::new();
        let mut put = |t: &Tensor<T>| {
            let v = if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
            all.push(v);
            v
        };
        let lin = |l: &Linear<T>, put: &mut dyn FnMut(&Tensor<T>) -> Var| LinearVars { weight: put(&l.weight), bias: put(&l.bias) };
        let convs = self.encoder.convs.iter().map(|c| ConvVars { weight: put(&c.weight), bias: put(&c.bias) }).collect();
        let mu_head = lin(&self.encoder.mu_head, &mut put);
        let log_var_head = lin(&self.encoder.log_var_head, &mut put);
        let project = lin(&self.decoder.project, &mut put);
        let deconvs = self.decoder.deconvs.iter().map(|c| ConvVars { weight: put(&c.weight), bias: put(&c.bias) }).collect();
        let hidden = lin(&self.classifier.hidden, &mut put);
        let out = lin(&self.classifier.out, &mut put);
        ModelVars {
            encoder: EncoderVars { convs, mu_head, log_var_head },
            decoder: DecoderVars {
                project,
                deconvs,
                channels: *self.arch.conv_channels.last().expect("validated"),
                bottleneck: self.arch.bottleneck(),
            },
            classifier: ClassifierVars { hidden, out },
            all,
        }
    }

    /// Binds only the classifier head, for latent-space analyses.
    pub fn bind_classifier(&self, tape: &mut Tape<T>, trainable: bool) -> ClassifierVars {
        let mut put = |t: &Tensor<T>| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        let c = &self.classifier;
        ClassifierVars {
            hidden: LinearVars { weight: put(&c.hidden.weight), bias: put(&c.hidden.bias) },
            out: LinearVars { weight: put(&c.out.weight), bias: put(&c.out.bias) },
        }
    }

    /// Posterior means and log-variances for a batch of images, without
    /// gradient tracking. Large inputs are processed in chunks.
    pub fn encode_values(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        const CHUNK: usize = 256;
        let n = images.rows();
        let m = self.arch.latent_dim;
        let (mut mu, mut lv) = (Vec::with_capacity(n * m), Vec::with_capacity(n * m));
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let mut tape = Tape::new();
            let vars = self.bind_encoder_constants(&mut tape);
            let x = tape.constant(images.select_rows(&idx));
            let (mu_v, lv_v) = encode(&mut tape, &vars, x)?;
            mu.extend_from_slice(tape.value(mu_v).data());
            lv.extend_from_slice(tape.value(lv_v).data());
            start = end;
        }
        Ok((Tensor::new(&[n, m], mu)?, Tensor::new(&[n, m], lv)?))
    }

    fn bind_encoder_constants(&self, tape: &mut Tape<T>) -> EncoderVars {
        let mut put = |t: &Tensor<T>| tape.constant(t.clone());
        let e = &self.encoder;
        EncoderVars {
            convs: e.convs.iter().map(|c| ConvVars { weight: put(&c.weight), bias: put(&c.bias) }).collect(),
            mu_head: LinearVars { weight: put(&e.mu_head.weight), bias: put(&e.mu_head.bias) },
            log_var_head: LinearVars { weight: put(&e.log_var_head.weight), bias: put(&e.log_var_head.bias) },
        }
    }

    /// Decodes latent codes (`N x m`) without gradient tracking.
    pub fn decode_values(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let out = decode(&mut tape, &vars.decoder, zv)?;
        Ok(tape.value(out).clone())
    }

    /// Classifier logits for latent codes (`N x m`) without gradient tracking.
    pub fn classify_values(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.bind_classifier(&mut tape, false);
        let zv = tape.constant(z.clone());
        let out = classify(&mut tape, &vars, zv)?;
        Ok(tape.value(out).clone())
    }
}

fn affine<T: Scalar>(tape: &mut Tape<T>, l: &LinearVars, x: Var) -> Result<Var> {
    let h = tape.matmul(x, l.weight)?;
    tape.add_row_bias(h, l.bias)
}

fn check_finite<T: Scalar>(tape: &Tape<T>, v: Var, layer: &str) -> Result<()> {
    if tape.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(layer.to_string()))
    }
}

/// `x: N x C x H x W` to `(mu, log_var)`, each `N x m`.
pub fn encode<T: Scalar>(tape: &mut Tape<T>, vars: &EncoderVars, x: Var) -> Result<(Var, Var)> {
    let mut h = x;
    for (i, c) in vars.convs.iter().enumerate() {
        let pre = tape.conv2d(h, c.weight, c.bias, STRIDE, PAD)?;
        h = tape.relu(pre);
        check_finite(tape, h, &format!("encoder conv{i}"))?;
    }
    let n = tape.shape(h)[0];
    let flat: usize = tape.shape(h)[1..].iter().product();
    let h = tape.reshape(h, &[n, flat])?;
    let mu = affine(tape, &vars.mu_head, h)?;
    check_finite(tape, mu, "encoder mu head")?;
    let log_var = affine(tape, &vars.log_var_head, h)?;
    check_finite(tape, log_var, "encoder log_var head")?;
    Ok((mu, log_var))
}

/// Samples `z = mu + exp(0.5 log_var) * eps` with `eps ~ N(0, I)` from `rng`.
pub fn reparameterize<T: Scalar>(tape: &mut Tape<T>, mu: Var, log_var: Var, rng: &mut impl Rng) -> Result<LatentBatch<T>> {
    if tape.shape(mu) != tape.shape(log_var) {
        return Err(Error::shape("reparameterize", &[tape.shape(mu), tape.shape(log_var)]));
    }
    let noise = normal_tensor::<T>(rng, tape.shape(mu));
    let half = tape.scale(log_var, T::lit(0.5));
    let sigma = tape.exp(half);
    let eps = tape.constant(noise.clone());
    let spread = tape.mul(sigma, eps)?;
    let z = tape.add(mu, spread)?;
    Ok(LatentBatch { mu, log_var, z, noise })
}

/// `z: N x m` to an image batch.
pub fn decode<T: Scalar>(tape: &mut Tape<T>, vars: &DecoderVars, z: Var) -> Result<Var> {
    let n = tape.shape(z)[0];
    let h = affine(tape, &vars.project, z)?;
    let (bh, bw) = vars.bottleneck;
    let h = tape.reshape(h, &[n, vars.channels, bh, bw])?;
    let mut h = tape.relu(h);
    let last = vars.deconvs.len().saturating_sub(1);
    for (i, c) in vars.deconvs.iter().enumerate() {
        h = tape.conv_transpose2d(h, c.weight, c.bias, STRIDE, PAD)?;
        if i < last {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// `z: N x m` to logits `N x C`.
pub fn classify<T: Scalar>(tape: &mut Tape<T>, vars: &ClassifierVars, z: Var) -> Result<Var> {
    let h = affine(tape, &vars.hidden, z)?;
    let h = tape.relu(h);
    affine(tape, &vars.out, h)
}

// Checkpoint layout (all integers little-endian):
//   magic  b"SITARCKP"
//   u32    format version (1)
//   u32    image channels, height, width
//   u32    latent dim, classifier hidden width, classes
//   u32    number of encoder convolutions L, then L x u32 channel counts
//   u32    tensor count K
//   K x { u32 name length, UTF-8 name, u32 rank, rank x u64 extents }
//   all tensor values as f64 LE, in header order
const MAGIC: &[u8; 8] = b"SITARCKP";
const VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, x: usize) -> Result<()> {
    let x = u32::try_from(x).map_err(|_| Error::Format(format!("{x} exceeds u32")))?;
    w.write_all(&x.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

impl<T: Scalar> Model<T> {
    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        put_u32(w, VERSION as usize)?;
        let a = &self.arch;
        for x in [a.image.channels, a.image.height, a.image.width, a.latent_dim, a.hidden, a.classes, a.conv_channels.len()] {
            put_u32(w, x)?;
        }
        for &c in &a.conv_channels {
            put_u32(w, c)?;
        }
        let params = self.params();
        put_u32(w, params.len())?;
        for (name, t) in &params {
            put_u32(w, name.len())?;
            w.write_all(name.as_bytes())?;
            put_u32(w, t.ndim())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
        }
        for (_, t) in &params {
            for &x in t.data() {
                w.write_all(&x.as_f64().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = get_u32(r)?;
        if version != VERSION as usize {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut hdr = [0usize; 7];
        for h in hdr.iter_mut() {
            *h = get_u32(r)?;
        }
        let conv_channels = (0..hdr[6]).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
        let arch = Architecture {
            image: ImageShape { channels: hdr[0], height: hdr[1], width: hdr[2] },
            conv_channels,
            latent_dim: hdr[3],
            hidden: hdr[4],
            classes: hdr[5],
        };
        arch.validate()?;
        // a freshly shaped model fixes the expected names and shapes
        let mut model = Model::<T>::new(arch, &mut crate::rng::stream(0, 0))?;
        let expected: Vec<(String, Vec<usize>)> =
            model.params().iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
        let count = get_u32(r)?;
        if count != expected.len() {
            return Err(Error::Format(format!("expected {} tensors, found {count}", expected.len())));
        }
        for (name, shape) in &expected {
            let len = get_u32(r)?;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            let rank = get_u32(r)?;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                dims.push(u64::from_le_bytes(b) as usize);
            }
            if buf != name.as_bytes() || &dims != shape {
                return Err(Error::Format(format!(
                    "tensor {:?} {dims:?} does not match expected {name} {shape:?}",
                    String::from_utf8_lossy(&buf)
                )));
            }
        }
        for t in model.params_mut() {
            for x in t.data_mut() {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                *x = T::lit(f64::from_le_bytes(b));
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_checkpoint(&mut BufReader::new(File::open(path)?))
    }
}
