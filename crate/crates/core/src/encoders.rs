//! Feature extractors with multi-layer taps, and the projection heads that
//! map tapped features to unit-norm embeddings.

use std::path::PathBuf;

use rand::Rng;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::params::{bias_uniform, kaiming_uniform, leaky_relu_gain, ParamId, ParamStore};
use crate::sampler::extract_pixel_patches;
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const INSTANCE_NORM_EPS: f64 = 1e-5;
pub const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    /// Raw multiscale pixel patches, flattened; no convolutions.
    PixelLinear,
    /// Stride-2 convolution stack tapped at the input and after every layer.
    ConvStack,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub in_channels: usize,
    /// Output channels of each conv layer (conv-stack only).
    pub channels: Vec<usize>,
    /// Strictly increasing tap ids. Conv-stack: 0 is the raw image, `i` the
    /// output of layer `i`. Pixel-linear: index into the pixel scales.
    pub taps: Vec<usize>,
    pub frozen: bool,
    pub weights: Option<PathBuf>,
    /// (size, stride) crops for the pixel-linear kind.
    pub pixel_scales: Vec<(usize, usize)>,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            kind: EncoderKind::ConvStack,
            in_channels: 3,
            channels: vec![16, 32, 64, 64],
            taps: vec![0, 1, 2, 3, 4],
            frozen: true,
            weights: None,
            pixel_scales: vec![(4, 2), (8, 4), (16, 8), (32, 16)],
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.taps.is_empty() {
            return Err(Error::Config("encoder needs at least one tap".into()));
        }
        if self.taps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "encoder taps must be strictly increasing, got {:?}",
                self.taps
            )));
        }
        let limit = match self.kind {
            EncoderKind::ConvStack => self.channels.len(),
            EncoderKind::PixelLinear => self.pixel_scales.len().saturating_sub(1),
        };
        if self.taps.iter().any(|&t| t > limit) {
            return Err(Error::Config(format!(
                "encoder tap ids {:?} exceed available layers ({limit})",
                self.taps
            )));
        }
        Ok(())
    }
}

/// Per-tap features of a batch: tensors of shape (N, S_l, D_l), locations
/// flattened row-major from the tap's spatial grid.
#[derive(Debug, Clone)]
pub struct FeatureStack {
    pub taps: Vec<Var>,
}

impl FeatureStack {
    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
}

/// Feature extractor. Each conv layer is conv(k3, s2, p1) + bias, leaky
/// relu, then instance norm.
#[derive(Debug, Clone)]
pub struct Encoder {
    spec: EncoderSpec,
    layers: Vec<ConvLayer>,
}

impl Encoder {
    /// Registers the encoder parameters under `f.` and, when a weights file
    /// is given, overwrites them from it.
    pub fn new<T: Scalar>(spec: EncoderSpec, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::new();
        if spec.kind == EncoderKind::ConvStack {
            let depth = spec.taps.last().copied().unwrap_or(0);
            let mut cin = spec.in_channels;
            for (i, &cout) in spec.channels.iter().take(depth).enumerate() {
                let fan_in = 9 * cin;
                let weight = store.add(
                    format!("f.conv{i}.weight"),
                    kaiming_uniform(&[3, 3, cin, cout], fan_in, leaky_relu_gain(LEAKY_SLOPE), rng),
                )?;
                let bias = store.add(format!("f.conv{i}.bias"), bias_uniform(cout, fan_in, rng))?;
                layers.push(ConvLayer { weight, bias });
                cin = cout;
            }
        }
        let encoder = Encoder { spec, layers };
        if let Some(path) = encoder.spec.weights.clone() {
            encoder.load_weights(store, &path)?;
        }
        Ok(encoder)
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn trainable(&self) -> bool {
        !self.spec.frozen && !self.layers.is_empty()
    }

    /// Copies every `f.` tensor of a checkpoint file into the store.
    pub fn load_weights<T: Scalar>(&self, store: &mut ParamStore<T>, path: &std::path::Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                msg: "encoder weights file missing".into(),
            });
        }
        let file = checkpoint::CheckpointFile::read(path)?;
        for layer in &self.layers {
            for id in [layer.weight, layer.bias] {
                let name = store.name(id).to_string();
                let t = file.tensor::<T>(&name).ok_or_else(|| Error::Checkpoint {
                    path: path.to_path_buf(),
                    msg: format!("missing tensor {name}"),
                })?;
                if t.shape() != store.get(id).shape() {
                    return Err(Error::Checkpoint {
                        path: path.to_path_buf(),
                        msg: format!("tensor {name} has shape {:?}", t.shape()),
                    });
                }
                *store.get_mut(id) = t;
            }
        }
        Ok(())
    }

    /// Feature dimension of every tap, in tap order.
    pub fn tap_dims(&self) -> Vec<usize> {
        self.spec
            .taps
            .iter()
            .map(|&t| match self.spec.kind {
                EncoderKind::ConvStack if t == 0 => self.spec.in_channels,
                EncoderKind::ConvStack => self.spec.channels[t - 1],
                EncoderKind::PixelLinear => {
                    let (size, _) = self.spec.pixel_scales[t];
                    size * size * self.spec.in_channels
                }
            })
            .collect()
    }

    /// Encodes a batch of NHWC images into a feature stack.
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, images: Var) -> Result<FeatureStack> {
        let shape = tape.shape(images).to_vec();
        if shape.len() != 4 || shape[3] != self.spec.in_channels {
            return Err(Error::invalid(
                "encode",
                format!(
                    "expected (N, H, W, {}) images, got {shape:?}",
                    self.spec.in_channels
                ),
            ));
        }
        let n = shape[0];
        let mut taps = Vec::with_capacity(self.spec.taps.len());
        match self.spec.kind {
            EncoderKind::PixelLinear => {
                for &t in &self.spec.taps {
                    let scale = self.spec.pixel_scales[t];
                    taps.push(extract_pixel_patches(tape, images, scale)?);
                }
            }
            EncoderKind::ConvStack => {
                let mut x = images;
                let flatten = |tape: &mut Tape<T>, v: Var| -> Result<Var> {
                    let s = tape.shape(v).to_vec();
                    tape.reshape(v, &[n, s[1] * s[2], s[3]])
                };
                if self.spec.taps[0] == 0 {
                    taps.push(flatten(tape, x)?);
                }
                let trainable = self.trainable();
                for (i, layer) in self.layers.iter().enumerate() {
                    let w = tape.param(store, layer.weight, trainable);
                    let b = tape.param(store, layer.bias, trainable);
                    let y = tape.conv2d(x, w, 2, 1)?;
                    let y = tape.add(y, b)?;
                    let y = tape.leaky_relu(y, LEAKY_SLOPE)?;
                    x = tape.instance_norm(y, INSTANCE_NORM_EPS)?;
                    if self.spec.taps.contains(&(i + 1)) {
                        taps.push(flatten(tape, x)?);
                    }
                }
            }
        }
        Ok(FeatureStack { taps })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadSpec {
    pub embed_dim: usize,
    /// Two-layer MLP (hidden width 2E, relu) instead of a single linear map.
    pub mlp: bool,
}

impl Default for HeadSpec {
    fn default() -> Self {
        HeadSpec {
            embed_dim: 64,
            mlp: false,
        }
    }
}

#[derive(Debug, Clone)]
struct HeadLayer {
    first: ParamId,
    second: Option<ParamId>,
}

/// Per-tap projection to the embedding space, followed by L2 normalization.
/// Bias-free, so projections are invariant to positive input scaling.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    spec: HeadSpec,
    in_dims: Vec<usize>,
    layers: Vec<HeadLayer>,
}

impl ProjectionHead {
    pub fn new<T: Scalar>(spec: HeadSpec, in_dims: &[usize], store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        if spec.embed_dim == 0 {
            return Err(Error::Config("head embed_dim must be positive".into()));
        }
        let e = spec.embed_dim;
        let mut layers = Vec::with_capacity(in_dims.len());
        for (l, &d) in in_dims.iter().enumerate() {
            let layer = if spec.mlp {
                let first = store.add(
                    format!("h.{l}.w1"),
                    kaiming_uniform(&[d, 2 * e], d, 2f64.sqrt(), rng),
                )?;
                let second = store.add(format!("h.{l}.w2"), kaiming_uniform(&[2 * e, e], 2 * e, 1.0, rng))?;
                HeadLayer {
                    first,
                    second: Some(second),
                }
            } else {
                let first = store.add(format!("h.{l}.w"), kaiming_uniform(&[d, e], d, 1.0, rng))?;
                HeadLayer { first, second: None }
            };
            layers.push(layer);
        }
        Ok(ProjectionHead {
            spec,
            in_dims: in_dims.to_vec(),
            layers,
        })
    }

    /// Linear head whose tap `l` uses the given weight matrix (D_l x E).
    pub fn from_weights<T: Scalar>(weights: Vec<crate::tensor::Tensor<T>>, store: &mut ParamStore<T>) -> Result<Self> {
        let mut layers = Vec::new();
        let mut in_dims = Vec::new();
        let mut embed_dim = 0;
        for (l, w) in weights.into_iter().enumerate() {
            if w.rank() != 2 {
                return Err(Error::invalid("head", "weights must be matrices"));
            }
            in_dims.push(w.shape()[0]);
            embed_dim = w.shape()[1];
            let first = store.add(format!("h.{l}.w"), w)?;
            layers.push(HeadLayer { first, second: None });
        }
        Ok(ProjectionHead {
            spec: HeadSpec { embed_dim, mlp: false },
            in_dims,
            layers,
        })
    }

    pub fn spec(&self) -> &HeadSpec {
        &self.spec
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Projects rows `(R, D_l)` of tap `l` to unit-norm rows `(R, E)`.
    pub fn project_rows<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, layer: usize, rows: Var) -> Result<Var> {
        let head = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::invalid("project", format!("no head for tap {layer}")))?;
        let s = tape.shape(rows).to_vec();
        if s.len() != 2 || s[1] != self.in_dims[layer] {
            return Err(Error::ShapeMismatch {
                op: "project",
                lhs: s,
                rhs: vec![self.in_dims[layer], self.spec.embed_dim],
            });
        }
        let w = tape.param(store, head.first, true);
        let mut y = tape.matmul(rows, w)?;
        if let Some(second) = head.second {
            y = tape.relu(y)?;
            let w2 = tape.param(store, second, true);
            y = tape.matmul(y, w2)?;
        }
        tape.l2_normalize(y, 1, NORMALIZE_EPS)
    }

    /// Projects batched features `(N, S, D_l)` to `(N, S, E)`.
    pub fn project_batch<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, layer: usize, feats: Var) -> Result<Var> {
        let s = tape.shape(feats).to_vec();
        if s.len() != 3 {
            return Err(Error::invalid("project", format!("expected (N, S, D), got {s:?}")));
        }
        let rows = tape.reshape(feats, &[s[0] * s[1], s[2]])?;
        let emb = self.project_rows(tape, store, layer, rows)?;
        tape.reshape(emb, &[s[0], s[1], self.spec.embed_dim])
    }
}
