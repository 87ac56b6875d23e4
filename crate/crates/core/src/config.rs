//! Experiment configuration and its flat `key = value` text form.
//!
//! The file format is a subset of TOML: dotted keys, quoted strings, bare
//! numbers and booleans, and arrays for list-valued keys. Unknown keys are
//! rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::{TaskKind, TaskSpec};
use crate::encoders::{EncoderKind, EncoderSpec, HeadSpec};
use crate::error::{Error, Result};
use crate::losses::{GanKind, LossConfig, LossVariant, Reduction};
use crate::models::{DiscriminatorSpec, GeneratorSpec};
use crate::optim::AdamConfig;
use crate::sampler::{NegativeSource, SamplerPolicy};
use crate::tensor::DType;

/// Environment variable overriding `train.seed`.
pub const SEED_ENV: &str = "PATCHNCE_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub task: TaskSpec,
    pub loss: LossConfig,
    pub encoder: EncoderSpec,
    pub head: HeadSpec,
    pub sampler: SamplerPolicy,
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
    pub optim: AdamConfig,
    pub iterations: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    pub precision: DType,
    pub hflip: bool,
    /// Record wall-clock step time in the CSV log.
    pub log_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: TaskSpec::default(),
            loss: LossConfig::default(),
            encoder: EncoderSpec::default(),
            head: HeadSpec::default(),
            sampler: SamplerPolicy::default(),
            generator: GeneratorSpec::default(),
            discriminator: DiscriminatorSpec::default(),
            optim: AdamConfig::default(),
            iterations: 2000,
            batch_size: 16,
            seed: 0,
            log_every: 10,
            checkpoint_every: 500,
            precision: DType::F32,
            hflip: true,
            log_time: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Value {
    Str(String),
    Int(i64),
    Float(f64),
    Bool(bool),
    List(Vec<Value>),
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, Value>) -> Result<()> {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out)?,
            other => {
                out.insert(key.clone(), convert(&key, other)?);
            }
        }
    }
    Ok(())
}

fn convert(key: &str, v: &toml::Value) -> Result<Value> {
    Ok(match v {
        toml::Value::String(s) => Value::Str(s.clone()),
        toml::Value::Integer(i) => Value::Int(*i),
        toml::Value::Float(f) => Value::Float(*f),
        toml::Value::Boolean(b) => Value::Bool(*b),
        toml::Value::Array(items) => Value::List(items.iter().map(|i| convert(key, i)).collect::<Result<_>>()?),
        _ => return Err(Error::Config(format!("{key}: unsupported value type"))),
    })
}

struct Fields {
    map: BTreeMap<String, Value>,
}

impl Fields {
    fn take(&mut self, key: &str) -> Option<Value> {
        self.map.remove(key)
    }

    fn string(&mut self, key: &str, out: &mut String) -> Result<bool> {
        match self.take(key) {
            None => Ok(false),
            Some(Value::Str(s)) => {
                *out = s;
                Ok(true)
            }
            Some(_) => Err(Error::Config(format!("{key} must be a quoted string"))),
        }
    }

    fn float(&mut self, key: &str, out: &mut f64) -> Result<()> {
        match self.take(key) {
            None => Ok(()),
            Some(Value::Float(f)) => {
                *out = f;
                Ok(())
            }
            Some(Value::Int(i)) => {
                *out = i as f64;
                Ok(())
            }
            Some(_) => Err(Error::Config(format!("{key} must be a number"))),
        }
    }

    fn uint<U: TryFrom<i64>>(&mut self, key: &str, out: &mut U) -> Result<()> {
        match self.take(key) {
            None => Ok(()),
            Some(Value::Int(i)) => {
                *out = U::try_from(i).map_err(|_| Error::Config(format!("{key} must be a nonnegative integer, got {i}")))?;
                Ok(())
            }
            Some(_) => Err(Error::Config(format!("{key} must be an integer"))),
        }
    }

    fn boolean(&mut self, key: &str, out: &mut bool) -> Result<()> {
        match self.take(key) {
            None => Ok(()),
            Some(Value::Bool(b)) => {
                *out = b;
                Ok(())
            }
            Some(_) => Err(Error::Config(format!("{key} must be true or false"))),
        }
    }

    fn uint_list(&mut self, key: &str, out: &mut Vec<usize>) -> Result<bool> {
        match self.take(key) {
            None => Ok(false),
            Some(Value::List(items)) => {
                let mut v = Vec::with_capacity(items.len());
                for item in items {
                    match item {
                        Value::Int(i) if i >= 0 => v.push(i as usize),
                        _ => return Err(Error::Config(format!("{key} must be a list of nonnegative integers"))),
                    }
                }
                *out = v;
                Ok(true)
            }
            Some(_) => Err(Error::Config(format!("{key} must be a list"))),
        }
    }

    fn pair_list(&mut self, key: &str, out: &mut Vec<(usize, usize)>) -> Result<()> {
        let bad = || Error::Config(format!("{key} must be a list of [size, stride] pairs"));
        match self.take(key) {
            None => Ok(()),
            Some(Value::List(items)) => {
                let mut v = Vec::with_capacity(items.len());
                for item in items {
                    match item {
                        Value::List(p) => match p.as_slice() {
                            [Value::Int(a), Value::Int(b)] if *a > 0 && *b > 0 => v.push((*a as usize, *b as usize)),
                            _ => return Err(bad()),
                        },
                        _ => return Err(bad()),
                    }
                }
                *out = v;
                Ok(())
            }
            Some(_) => Err(bad()),
        }
    }
}

fn choice<T: Copy>(key: &str, value: &str, options: &[(&str, T)]) -> Result<T> {
    options
        .iter()
        .find(|(name, _)| *name == value)
        .map(|(_, v)| *v)
        .ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            Error::Config(format!("{key} = \"{value}\" is not one of {}", names.join(", ")))
        })
}

const VARIANTS: &[(&str, LossVariant)] = &[
    ("standard-nce", LossVariant::StandardNce),
    ("bidirectional-nce", LossVariant::BidirectionalNce),
    ("bidirectional*", LossVariant::BidirectionalNce),
    ("feature-matching", LossVariant::FeatureMatching),
];

fn variant_name(v: LossVariant) -> &'static str {
    match v {
        LossVariant::StandardNce => "standard-nce",
        LossVariant::BidirectionalNce => "bidirectional-nce",
        LossVariant::FeatureMatching => "feature-matching",
    }
}

impl TrainConfig {
    /// Parses config text; keys absent from the text keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let mut map = BTreeMap::new();
        flatten("", &table, &mut map)?;
        let mut f = Fields { map };
        let mut c = TrainConfig::default();

        let mut s = String::new();
        if f.string("task.kind", &mut s)? {
            c.task.kind = match s.as_str() {
                "three-mode-color" => TaskKind::ThreeModeColor,
                "fixed-texture" => TaskKind::FixedTexture,
                "png-folder" => TaskKind::PngFolder(PathBuf::new()),
                other => {
                    return Err(Error::Config(format!(
                        "task.kind = \"{other}\" is not one of three-mode-color, fixed-texture, png-folder"
                    )))
                }
            };
        }
        let mut path = String::new();
        if f.string("task.path", &mut path)? {
            match &mut c.task.kind {
                TaskKind::PngFolder(p) => *p = PathBuf::from(&path),
                _ => return Err(Error::Config("task.path is only valid with task.kind = \"png-folder\"".into())),
            }
        } else if matches!(&c.task.kind, TaskKind::PngFolder(p) if p.as_os_str().is_empty()) {
            return Err(Error::Config("task.kind = \"png-folder\" needs task.path".into()));
        }
        f.uint("task.size", &mut c.task.size)?;
        f.uint("task.regions", &mut c.task.regions)?;
        f.uint("task.classes", &mut c.task.classes)?;
        f.uint("task.count", &mut c.task.count)?;
        f.uint("task.seed", &mut c.task.seed)?;

        let mut star = false;
        if f.string("loss.variant", &mut s)? {
            c.loss.variant = choice("loss.variant", &s, VARIANTS)?;
            star = s == "bidirectional*";
        }
        f.float("loss.temperature", &mut c.loss.temperature)?;
        f.uint("loss.fm_norm", &mut c.loss.fm_norm)?;
        f.float("loss.nce_weight", &mut c.loss.nce_weight)?;
        if f.string("loss.reduction", &mut s)? {
            c.loss.reduction = choice(
                "loss.reduction",
                &s,
                &[("per-layer-mean", Reduction::PerLayerMean), ("raw-sum", Reduction::RawSum)],
            )?;
        }
        f.boolean("gan.enabled", &mut c.loss.gan_enabled)?;
        f.float("gan.weight", &mut c.loss.gan_weight)?;
        if f.string("gan.kind", &mut s)? {
            c.loss.gan_kind = choice("gan.kind", &s, &[("vanilla", GanKind::Vanilla), ("hinge", GanKind::Hinge)])?;
        }
        f.uint("gan.layers", &mut c.discriminator.layers)?;
        f.uint("gan.width", &mut c.discriminator.width)?;
        f.boolean("gan.zero_init", &mut c.discriminator.zero_init_last)?;

        if f.string("encoder.kind", &mut s)? {
            c.encoder.kind = choice(
                "encoder.kind",
                &s,
                &[("conv-stack", EncoderKind::ConvStack), ("pixel-linear", EncoderKind::PixelLinear)],
            )?;
        }
        f.uint_list("encoder.channels", &mut c.encoder.channels)?;
        f.pair_list("encoder.pixel_scales", &mut c.encoder.pixel_scales)?;
        let explicit_taps = f.uint_list("encoder.taps", &mut c.encoder.taps)?;
        if !explicit_taps {
            let depth = match c.encoder.kind {
                EncoderKind::ConvStack => c.encoder.channels.len() + 1,
                EncoderKind::PixelLinear => c.encoder.pixel_scales.len(),
            };
            c.encoder.taps = (0..depth).collect();
            if star && depth > 1 {
                c.encoder.taps.remove(0);
            }
        }
        f.boolean("encoder.frozen", &mut c.encoder.frozen)?;
        if f.string("encoder.weights", &mut s)? {
            c.encoder.weights = Some(PathBuf::from(&s));
        }
        f.uint("head.embed_dim", &mut c.head.embed_dim)?;
        f.boolean("head.mlp", &mut c.head.mlp)?;

        f.uint("sampler.n_patches", &mut c.sampler.n_patches)?;
        if f.string("sampler.negatives", &mut s)? {
            c.sampler.negatives = choice(
                "sampler.negatives",
                &s,
                &[("same-image", NegativeSource::SameImage), ("same-batch", NegativeSource::SameBatch)],
            )?;
        }
        f.uint("generator.width", &mut c.generator.width)?;
        f.uint("generator.res_blocks", &mut c.generator.res_blocks)?;

        f.float("optim.lr", &mut c.optim.lr)?;
        f.float("optim.beta1", &mut c.optim.beta1)?;
        f.float("optim.beta2", &mut c.optim.beta2)?;
        f.float("optim.eps", &mut c.optim.eps)?;

        f.uint("train.iterations", &mut c.iterations)?;
        f.uint("train.batch_size", &mut c.batch_size)?;
        f.uint("train.seed", &mut c.seed)?;
        f.uint("train.log_every", &mut c.log_every)?;
        f.uint("train.checkpoint_every", &mut c.checkpoint_every)?;
        if f.string("train.precision", &mut s)? {
            c.precision = choice("train.precision", &s, &[("f32", DType::F32), ("f64", DType::F64)])?;
        }
        f.boolean("train.hflip", &mut c.hflip)?;
        f.boolean("log.time", &mut c.log_time)?;

        if let Some(key) = f.map.keys().next() {
            return Err(Error::Config(format!("unknown key {key}")));
        }
        c.sync_channels();
        c.validate()?;
        Ok(c)
    }

    /// Reads a config file and applies the seed override from the
    /// environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut c = Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        if let Ok(v) = std::env::var(SEED_ENV) {
            c.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got {v:?}")))?;
        }
        Ok(c)
    }

    /// Derives the channel counts that follow from the task.
    pub fn sync_channels(&mut self) {
        let x_channels = match self.task.kind {
            TaskKind::PngFolder(_) => 3,
            _ => self.task.classes,
        };
        self.generator.in_channels = x_channels;
        self.generator.out_channels = 3;
        self.encoder.in_channels = 3;
        self.discriminator.in_channels = x_channels + 3;
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.loss.validate()?;
        self.encoder.validate()?;
        self.sampler.validate()?;
        self.optim.validate()?;
        if self.iterations == 0 {
            return Err(Error::Config("train.iterations must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if self.log_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("train.log_every and train.checkpoint_every must be positive".into()));
        }
        Ok(())
    }

    /// Canonical text form: every key, sorted, parseable by [`Self::parse`].
    pub fn to_text(&self) -> String {
        let mut kv: BTreeMap<&str, String> = BTreeMap::new();
        let q = |s: &str| format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""));
        let num = |v: f64| {
            let s = format!("{v:?}");
            if s.contains(['.', 'e', 'E']) || s.contains("inf") || s.contains("NaN") {
                s
            } else {
                format!("{s}.0")
            }
        };
        let list = |v: &[usize]| format!("[{}]", v.iter().map(usize::to_string).collect::<Vec<_>>().join(", "));
        kv.insert("task.kind", q(self.task.kind.name()));
        if let TaskKind::PngFolder(p) = &self.task.kind {
            kv.insert("task.path", q(&p.to_string_lossy()));
        }
        kv.insert("task.size", self.task.size.to_string());
        kv.insert("task.regions", self.task.regions.to_string());
        kv.insert("task.classes", self.task.classes.to_string());
        kv.insert("task.count", self.task.count.to_string());
        kv.insert("task.seed", self.task.seed.to_string());
        kv.insert("loss.variant", q(variant_name(self.loss.variant)));
        kv.insert("loss.temperature", num(self.loss.temperature));
        kv.insert("loss.fm_norm", self.loss.fm_norm.to_string());
        kv.insert("loss.nce_weight", num(self.loss.nce_weight));
        kv.insert(
            "loss.reduction",
            q(match self.loss.reduction {
                Reduction::PerLayerMean => "per-layer-mean",
                Reduction::RawSum => "raw-sum",
            }),
        );
        kv.insert("gan.enabled", self.loss.gan_enabled.to_string());
        kv.insert("gan.weight", num(self.loss.gan_weight));
        kv.insert(
            "gan.kind",
            q(match self.loss.gan_kind {
                GanKind::Vanilla => "vanilla",
                GanKind::Hinge => "hinge",
            }),
        );
        kv.insert("gan.layers", self.discriminator.layers.to_string());
        kv.insert("gan.width", self.discriminator.width.to_string());
        kv.insert("gan.zero_init", self.discriminator.zero_init_last.to_string());
        kv.insert(
            "encoder.kind",
            q(match self.encoder.kind {
                EncoderKind::ConvStack => "conv-stack",
                EncoderKind::PixelLinear => "pixel-linear",
            }),
        );
        kv.insert("encoder.channels", list(&self.encoder.channels));
        kv.insert("encoder.taps", list(&self.encoder.taps));
        kv.insert(
            "encoder.pixel_scales",
            format!(
                "[{}]",
                self.encoder
                    .pixel_scales
                    .iter()
                    .map(|(a, b)| format!("[{a}, {b}]"))
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
        );
        kv.insert("encoder.frozen", self.encoder.frozen.to_string());
        if let Some(w) = &self.encoder.weights {
            kv.insert("encoder.weights", q(&w.to_string_lossy()));
        }
        kv.insert("head.embed_dim", self.head.embed_dim.to_string());
        kv.insert("head.mlp", self.head.mlp.to_string());
        kv.insert("sampler.n_patches", self.sampler.n_patches.to_string());
        kv.insert(
            "sampler.negatives",
            q(match self.sampler.negatives {
                NegativeSource::SameImage => "same-image",
                NegativeSource::SameBatch => "same-batch",
            }),
        );
        kv.insert("generator.width", self.generator.width.to_string());
        kv.insert("generator.res_blocks", self.generator.res_blocks.to_string());
        kv.insert("optim.lr", num(self.optim.lr));
        kv.insert("optim.beta1", num(self.optim.beta1));
        kv.insert("optim.beta2", num(self.optim.beta2));
        kv.insert("optim.eps", num(self.optim.eps));
        kv.insert("train.iterations", self.iterations.to_string());
        kv.insert("train.batch_size", self.batch_size.to_string());
        kv.insert("train.seed", self.seed.to_string());
        kv.insert("train.log_every", self.log_every.to_string());
        kv.insert("train.checkpoint_every", self.checkpoint_every.to_string());
        kv.insert(
            "train.precision",
            q(match self.precision {
                DType::F32 => "f32",
                DType::F64 => "f64",
            }),
        );
        kv.insert("train.hflip", self.hflip.to_string());
        kv.insert("log.time", self.log_time.to_string());
        kv.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
