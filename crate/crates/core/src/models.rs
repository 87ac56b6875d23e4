//! Toy generator and conditional patch discriminator.

use rand::Rng;

use crate::error::{Error, Result};
use crate::losses::{discriminator_loss, generator_gan_loss, GanKind};
use crate::params::{bias_uniform, kaiming_uniform, leaky_relu_gain, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

const NORM_EPS: f64 = 1e-5;
const D_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub width: usize,
    pub res_blocks: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            in_channels: 3,
            out_channels: 3,
            width: 32,
            res_blocks: 2,
        }
    }
}

fn conv_weight<T: Scalar>(
    store: &mut ParamStore<T>,
    name: String,
    shape: [usize; 4],
    fan_in: usize,
    gain: f64,
    rng: &mut impl Rng,
) -> Result<ParamId> {
    store.add(name, kaiming_uniform(&shape, fan_in, gain, rng))
}

/// Encoder-decoder generator:
///
/// ```text
/// conv4/s2 -> IN -> relu -> conv4/s2 -> IN -> relu
///   -> R x [conv3 -> IN -> relu -> conv3 -> IN, + skip]
///   -> convT4/s2 -> IN -> relu -> convT4/s2 + bias -> tanh
/// ```
#[derive(Debug, Clone)]
pub struct Generator {
    spec: GeneratorSpec,
    down: [ParamId; 2],
    blocks: Vec<[ParamId; 2]>,
    up: [ParamId; 2],
    out_bias: ParamId,
}

impl Generator {
    pub fn new<T: Scalar>(spec: GeneratorSpec, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        if spec.in_channels == 0 || spec.out_channels == 0 || spec.width == 0 {
            return Err(Error::Config("generator channel counts must be positive".into()));
        }
        let (w, relu) = (spec.width, 2f64.sqrt());
        let d0 = conv_weight(store, "g.down0.w".into(), [4, 4, spec.in_channels, w], 16 * spec.in_channels, relu, rng)?;
        let d1 = conv_weight(store, "g.down1.w".into(), [4, 4, w, 2 * w], 16 * w, relu, rng)?;
        let mut blocks = Vec::with_capacity(spec.res_blocks);
        for b in 0..spec.res_blocks {
            let a = conv_weight(store, format!("g.res{b}.w0"), [3, 3, 2 * w, 2 * w], 18 * w, relu, rng)?;
            let c = conv_weight(store, format!("g.res{b}.w1"), [3, 3, 2 * w, 2 * w], 18 * w, relu, rng)?;
            blocks.push([a, c]);
        }
        // Transposed conv weights are (C_in, KH, KW, C_out); each output
        // pixel receives about C_in * 4 contributions at stride 2.
        let u0 = conv_weight(store, "g.up0.w".into(), [2 * w, 4, 4, w], 8 * w, relu, rng)?;
        let u1 = conv_weight(store, "g.up1.w".into(), [w, 4, 4, spec.out_channels], 4 * w, 1.0, rng)?;
        let out_bias = store.add("g.up1.b", bias_uniform(spec.out_channels, 4 * w, rng))?;
        Ok(Generator {
            spec,
            down: [d0, d1],
            blocks,
            up: [u0, u1],
            out_bias,
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    /// Maps NHWC inputs to NHWC outputs of the same spatial size in (-1, 1).
    /// Height and width must be multiples of 4.
    pub fn generate<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[3] != self.spec.in_channels {
            return Err(Error::invalid(
                "generate",
                format!("expected (N, H, W, {}) input, got {s:?}", self.spec.in_channels),
            ));
        }
        if s[1] % 4 != 0 || s[2] % 4 != 0 {
            return Err(Error::invalid("generate", format!("spatial size {}x{} is not a multiple of 4", s[1], s[2])));
        }
        let mut h = x;
        for id in self.down {
            let w = tape.param(store, id, true);
            h = tape.conv2d(h, w, 2, 1)?;
            h = tape.instance_norm(h, NORM_EPS)?;
            h = tape.relu(h)?;
        }
        for [a, b] in &self.blocks {
            let wa = tape.param(store, *a, true);
            let wb = tape.param(store, *b, true);
            let r = tape.conv2d(h, wa, 1, 1)?;
            let r = tape.instance_norm(r, NORM_EPS)?;
            let r = tape.relu(r)?;
            let r = tape.conv2d(r, wb, 1, 1)?;
            let r = tape.instance_norm(r, NORM_EPS)?;
            h = tape.add(h, r)?;
        }
        let w = tape.param(store, self.up[0], true);
        h = tape.conv_transpose2d(h, w, 2, 1)?;
        h = tape.instance_norm(h, NORM_EPS)?;
        h = tape.relu(h)?;
        let w = tape.param(store, self.up[1], true);
        h = tape.conv_transpose2d(h, w, 2, 1)?;
        let b = tape.param(store, self.out_bias, true);
        h = tape.add(h, b)?;
        tape.tanh(h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorSpec {
    pub in_channels: usize,
    pub layers: usize,
    pub width: usize,
    /// Start the final layer at zero so every logit is 0.
    pub zero_init_last: bool,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        DiscriminatorSpec {
            in_channels: 6,
            layers: 3,
            width: 32,
            zero_init_last: false,
        }
    }
}

#[derive(Debug, Clone)]
struct DLayer {
    weight: ParamId,
    bias: Option<ParamId>,
    norm: bool,
}

/// Patch discriminator over the channel concatenation of input and image.
/// Stride-2 k4 convs with leaky relu; instance norm on the hidden layers
/// after the first; the last layer emits one logit per patch.
#[derive(Debug, Clone)]
pub struct Discriminator {
    spec: DiscriminatorSpec,
    layers: Vec<DLayer>,
}

impl Discriminator {
    pub fn new<T: Scalar>(spec: DiscriminatorSpec, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        if spec.layers == 0 || spec.width == 0 {
            return Err(Error::Config("discriminator needs at least one layer".into()));
        }
        let mut layers = Vec::with_capacity(spec.layers);
        let mut cin = spec.in_channels;
        for i in 0..spec.layers {
            let last = i + 1 == spec.layers;
            let cout = if last { 1 } else { spec.width << i };
            let fan_in = 16 * cin;
            let w = if last && spec.zero_init_last {
                Tensor::zeros(&[4, 4, cin, cout])
            } else {
                let gain = if last { 1.0 } else { leaky_relu_gain(D_SLOPE) };
                kaiming_uniform(&[4, 4, cin, cout], fan_in, gain, rng)
            };
            let weight = store.add(format!("d.conv{i}.w"), w)?;
            let norm = !last && i > 0;
            let bias = if norm {
                None
            } else {
                let b = if last && spec.zero_init_last {
                    Tensor::zeros(&[cout])
                } else {
                    bias_uniform(cout, fan_in, rng)
                };
                Some(store.add(format!("d.conv{i}.b"), b)?)
            };
            layers.push(DLayer { weight, bias, norm });
            cin = cout;
        }
        Ok(Discriminator { spec, layers })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    /// Logit map for `(x, y)` pairs. With `trainable = false` the weights
    /// enter the tape as constants.
    pub fn discriminate<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, y: Var, trainable: bool) -> Result<Var> {
        let (sx, sy) = (tape.shape(x).to_vec(), tape.shape(y).to_vec());
        if sx.len() != 4 || sy.len() != 4 || sx[..3] != sy[..3] {
            return Err(Error::ShapeMismatch {
                op: "discriminate",
                lhs: sx,
                rhs: sy,
            });
        }
        if sx[3] + sy[3] != self.spec.in_channels {
            return Err(Error::invalid(
                "discriminate",
                format!("expected {} channels in total, got {}", self.spec.in_channels, sx[3] + sy[3]),
            ));
        }
        let mut h = tape.concat(&[x, y], 3)?;
        let count = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            let w = tape.param(store, layer.weight, trainable);
            h = tape.conv2d(h, w, 2, 1)?;
            if let Some(b) = layer.bias {
                let b = tape.param(store, b, trainable);
                h = tape.add(h, b)?;
            }
            if layer.norm {
                h = tape.instance_norm(h, NORM_EPS)?;
            }
            if i + 1 < count {
                h = tape.leaky_relu(h, D_SLOPE)?;
            }
        }
        Ok(h)
    }
}

/// Both conditional GAN terms for one batch. `d_loss` scores `y_fake`
/// behind a stop-gradient so only D receives its gradient; `g_loss` lets
/// gradients reach both the fake images and D's weights.
pub fn cgan_losses<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    disc: &Discriminator,
    x: Var,
    y_real: Var,
    y_fake: Var,
    kind: GanKind,
) -> Result<(Var, Var)> {
    let detached = tape.stop_gradient(y_fake);
    let real_logits = disc.discriminate(tape, store, x, y_real, true)?;
    let fake_logits = disc.discriminate(tape, store, x, detached, true)?;
    let d = discriminator_loss(tape, real_logits, fake_logits, kind)?;
    let live_logits = disc.discriminate(tape, store, x, y_fake, true)?;
    let g = generator_gan_loss(tape, live_logits, kind)?;
    Ok((d, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn input(n: usize, c: usize) -> Tensor<f64> {
        Tensor::from_fn(&[n, 32, 32, c], |i| ((i as f64) * 0.37).sin())
    }

    #[test]
    fn generator_shape_and_range() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Generator::new(GeneratorSpec::default(), &mut store, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(input(2, 3));
        let y = g.generate(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(y), &[2, 32, 32, 3]);
        assert!(tape.value(y).data().iter().all(|v| v.abs() < 1.0));
        let mut again = Tape::new();
        let x2 = again.constant(input(2, 3));
        let y2 = g.generate(&mut again, &store, x2).unwrap();
        assert_eq!(tape.value(y).data(), again.value(y2).data());
    }

    #[test]
    fn generator_rejects_wrong_channels() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Generator::new(GeneratorSpec::default(), &mut store, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(input(1, 4));
        assert!(g.generate(&mut tape, &store, x).is_err());
    }

    #[test]
    fn parameter_count_is_stable() {
        let count = || {
            let mut store = ParamStore::<f32>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            Generator::new(GeneratorSpec::default(), &mut store, &mut rng).unwrap();
            store.count("g.")
        };
        // 4*4*3*32 + 4*4*32*64 + 2*2*9*64*64 + 64*16*32 + 32*16*3 + 3
        assert_eq!(count(), 1536 + 32768 + 147456 + 32768 + 1536 + 3);
        assert_eq!(count(), count());
    }

    #[test]
    fn every_generator_parameter_gets_gradient() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = GeneratorSpec {
            width: 4,
            res_blocks: 1,
            ..GeneratorSpec::default()
        };
        let g = Generator::new(spec, &mut store, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 8, 8, 3], |i| ((i as f64) * 0.61).cos()));
        let y = g.generate(&mut tape, &store, x).unwrap();
        let w = tape.constant(Tensor::from_fn(&[2, 8, 8, 3], |i| ((i as f64) * 1.7).sin()));
        let p = tape.mul(y, w).unwrap();
        let loss = tape.sum_all(p).unwrap();
        tape.backward(loss).unwrap();
        let grads = tape.param_grads();
        assert_eq!(grads.len(), store.len());
        for (id, grad) in grads {
            assert!(grad.data().iter().any(|&v| v != 0.0), "{} has zero gradient", store.name(id));
        }
    }

    #[test]
    fn discriminator_logit_map() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = Discriminator::new(DiscriminatorSpec::default(), &mut store, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(input(2, 3));
        let y = tape.constant(input(2, 3));
        let z = d.discriminate(&mut tape, &store, x, y, true).unwrap();
        assert_eq!(tape.shape(z), &[2, 4, 4, 1]);
        let small = tape.constant(Tensor::zeros(&[2, 16, 16, 3]));
        assert!(d.discriminate(&mut tape, &store, x, small, true).is_err());
    }

    #[test]
    fn zero_init_gives_two_log_two() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = DiscriminatorSpec {
            zero_init_last: true,
            ..DiscriminatorSpec::default()
        };
        let d = Discriminator::new(spec, &mut store, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(input(1, 3));
        let y = tape.constant(input(1, 3));
        let z = d.discriminate(&mut tape, &store, x, y, true).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
        let loss = discriminator_loss(&mut tape, z, z, GanKind::Vanilla).unwrap();
        assert!((tape.value(loss).item() - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn frozen_discriminator_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = Discriminator::new(DiscriminatorSpec::default(), &mut store, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(input(1, 3));
        let y = tape.leaf(input(1, 3), true);
        let z = d.discriminate(&mut tape, &store, x, y, false).unwrap();
        let loss = tape.mean_all(z).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.param_grads().is_empty());
        assert!(tape.grad(y).unwrap().data().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn cgan_d_loss_leaves_fake_images_alone() {
        let mut store = ParamStore::<f64>::new();
        let spec = DiscriminatorSpec {
            in_channels: 6,
            layers: 2,
            width: 4,
            zero_init_last: false,
        };
        let disc = Discriminator::new(spec, &mut store, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(input(1, 3));
        let real = tape.constant(input(1, 3).cast::<f64>());
        let fake = tape.leaf(Tensor::from_fn(&[1, 32, 32, 3], |i| ((i as f64) * 0.11).cos()), true);
        let (d, g) = cgan_losses(&mut tape, &store, &disc, x, real, fake, GanKind::Vanilla).unwrap();
        tape.backward(d).unwrap();
        assert!(tape.grad(fake).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
        assert!(!tape.param_grads().is_empty());
        let mut tape2 = Tape::new();
        let x = tape2.constant(input(1, 3));
        let real = tape2.constant(input(1, 3));
        let fake2 = tape2.leaf(tape.value(fake).clone(), true);
        let (_, g2) = cgan_losses(&mut tape2, &store, &disc, x, real, fake2, GanKind::Vanilla).unwrap();
        assert_eq!(tape.value(g).item(), tape2.value(g2).item());
        tape2.backward(g2).unwrap();
        assert!(tape2.grad(fake2).unwrap().data().iter().any(|&v| v != 0.0));
    }
}
