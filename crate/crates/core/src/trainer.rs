//! Training loop: discriminator step, joint generator/head step, logging and
//! checkpointing.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint::CheckpointFile;
use crate::config::TrainConfig;
use crate::data::{Batch, BatchSchedule, Dataset};
use crate::encoders::{EncoderKind, Encoder, ProjectionHead};
use crate::error::{Error, Result};
use crate::losses::{
    discriminator_loss, feature_matching_loss, generator_gan_loss, patchnce_loss, total_objective, LossParts,
    LossReport,
};
use crate::models::{Discriminator, Generator};
use crate::optim::Adam;
use crate::params::{ParamId, ParamStore};
use crate::rng::{derive_rng, streams};
use crate::sampler::build_pair_sets;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

pub const LOG_HEADER: &str = "iter,loss_total,loss_nce,loss_fm,loss_g,loss_d,retrieval_acc,lr,time_ms";

/// Every network of a run and their parameters.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub store: ParamStore<T>,
    pub generator: Generator,
    pub discriminator: Option<Discriminator>,
    pub encoder: Encoder,
    pub head: Option<ProjectionHead>,
}

impl<T: Scalar> Model<T> {
    /// Initializes every network from the run seed. Each network draws from
    /// its own stream, so enabling one does not shift another's init.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let init = |k| derive_rng(cfg.seed, streams::INIT, k);
        let generator = Generator::new(cfg.generator.clone(), &mut store, &mut init(0))?;
        let discriminator = if cfg.loss.gan_active() {
            Some(Discriminator::new(cfg.discriminator.clone(), &mut store, &mut init(1))?)
        } else {
            None
        };
        let encoder = Encoder::new(cfg.encoder.clone(), &mut store, &mut init(2))?;
        let head = if cfg.loss.is_contrastive() && cfg.loss.main_enabled() {
            Some(ProjectionHead::new(cfg.head.clone(), &encoder.tap_dims(), &mut store, &mut init(3))?)
        } else {
            None
        };
        Ok(Model {
            store,
            generator,
            discriminator,
            encoder,
            head,
        })
    }

    /// Parameters updated by the joint generator step: G, H and F when F
    /// is trainable.
    pub fn generator_group(&self) -> Vec<ParamId> {
        let f = self.encoder.trainable();
        self.store
            .ids()
            .filter(|&id| {
                let n = self.store.name(id);
                n.starts_with("g.") || n.starts_with("h.") || (f && n.starts_with("f."))
            })
            .collect()
    }

    pub fn discriminator_group(&self) -> Vec<ParamId> {
        self.store.ids_with_prefix("d.").collect()
    }

    /// Runs the generator without recording gradients.
    pub fn generate(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = self.generator.generate(&mut tape, &self.store, xv)?;
        Ok(tape.value(y).clone())
    }

    /// Whether a parameter is written to checkpoints. Frozen encoder weights
    /// are rebuilt from the config instead.
    fn persisted(&self, id: ParamId) -> bool {
        !self.store.name(id).starts_with("f.") || self.encoder.trainable()
    }

    pub fn param_norms(&self) -> Vec<(String, f64)> {
        self.store.iter().map(|(n, t)| (n.to_string(), t.l2_norm())).collect()
    }

    /// Rebuilds the model recorded in a checkpoint.
    pub fn from_checkpoint(path: &Path) -> Result<(TrainConfig, Self)> {
        let file = CheckpointFile::read(path)?;
        let text = file
            .blob("config")
            .ok_or_else(|| Error::Checkpoint {
                path: path.to_path_buf(),
                msg: "no config recorded".into(),
            })?;
        let text = String::from_utf8(text.to_vec()).map_err(|_| Error::Checkpoint {
            path: path.to_path_buf(),
            msg: "config is not UTF-8".into(),
        })?;
        let cfg = TrainConfig::parse(&text)?;
        let mut model = Model::new(&cfg)?;
        for name in file.tensor_names() {
            if name.starts_with("opt.") {
                continue;
            }
            model.load_tensor(&file, name, path)?;
        }
        Ok((cfg, model))
    }

    fn load_tensor(&mut self, file: &CheckpointFile, name: &str, path: &Path) -> Result<()> {
        let id = self.store.id(name).ok_or_else(|| Error::Checkpoint {
            path: path.to_path_buf(),
            msg: format!("unknown tensor name {name}"),
        })?;
        let t: Tensor<T> = file.tensor(name).expect("listed tensor");
        if t.shape() != self.store.get(id).shape() {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                msg: format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), self.store.get(id).shape()),
            });
        }
        *self.store.get_mut(id) = t;
        Ok(())
    }
}

/// Training state for one run.
pub struct Trainer<T> {
    pub cfg: TrainConfig,
    pub model: Model<T>,
    pub data: Dataset,
    opt_g: Adam<T>,
    opt_d: Option<Adam<T>>,
    schedule: BatchSchedule,
    iteration: u64,
}

/// Per-step record written to the CSV log.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub iteration: u64,
    pub report: LossReport,
    pub time_ms: Option<f64>,
}

impl StepRecord {
    pub fn csv_row(&self, lr: f64) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let r = &self.report;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.iteration,
            r.total,
            opt(r.nce),
            opt(r.feature_matching),
            opt(r.gan_g),
            opt(r.gan_d),
            opt(r.retrieval_mean()),
            lr,
            self.time_ms.map(|t| format!("{t:.3}")).unwrap_or_default()
        )
    }
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        let data = Dataset::from_task(&cfg.task)?;
        Self::with_data(cfg, data)
    }

    /// Trainer over an already loaded dataset.
    pub fn with_data(mut cfg: TrainConfig, data: Dataset) -> Result<Self> {
        cfg.generator.in_channels = data.x_channels;
        cfg.discriminator.in_channels = data.x_channels + data.y_channels;
        cfg.validate()?;
        let model = Model::new(&cfg)?;
        let opt_g = Adam::new(cfg.optim, &model.store, model.generator_group());
        let opt_d = model
            .discriminator
            .as_ref()
            .map(|_| Adam::new(cfg.optim, &model.store, model.discriminator_group()));
        let schedule = BatchSchedule::new(data.len(), cfg.batch_size, cfg.seed, cfg.hflip)?;
        Ok(Trainer {
            cfg,
            model,
            data,
            opt_g,
            opt_d,
            schedule,
            iteration: 0,
        })
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Completed steps.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Optimizer steps taken so far by (generator group, discriminator).
    pub fn optimizer_steps(&self) -> (u64, Option<u64>) {
        (self.opt_g.step_count(), self.opt_d.as_ref().map(Adam::step_count))
    }

    pub fn batch(&self, iteration: u64) -> Result<Batch<T>> {
        let (idx, flips) = self.schedule.batch_at(iteration);
        self.data.gather(&idx, &flips)
    }

    /// One training step on the batch scheduled for the current iteration.
    pub fn step(&mut self) -> Result<LossReport> {
        let batch = self.batch(self.iteration)?;
        match self.step_on(&batch) {
            Ok(report) => {
                self.iteration += 1;
                Ok(report)
            }
            Err(Error::NonFinite { op }) => Err(Error::Diverged {
                iteration: self.iteration + 1,
                detail: self.diagnostics(op, &batch),
            }),
            Err(e) => Err(e),
        }
    }

    fn diagnostics(&self, op: &str, batch: &Batch<T>) -> String {
        let mut s = format!("non-finite value in {op}\nbatch indices: {:?}\nflips: {:?}\nparameter norms:\n", batch.indices, batch.flips);
        for (name, norm) in self.model.param_norms() {
            s.push_str(&format!("  {name} {norm}\n"));
        }
        s
    }

    fn step_on(&mut self, batch: &Batch<T>) -> Result<LossReport> {
        let cfg = &self.cfg;
        let model = &mut self.model;
        let mut tape = Tape::new();
        let x = tape.constant(batch.x.clone());
        let y = tape.constant(batch.y.clone());
        let fake = model.generator.generate(&mut tape, &model.store, x)?;
        let mut parts = LossParts::default();

        if let (Some(d), Some(opt)) = (&model.discriminator, &mut self.opt_d) {
            let mut dt = Tape::new();
            let dx = dt.constant(batch.x.clone());
            let dy = dt.constant(batch.y.clone());
            let dfake = dt.constant(tape.value(fake).clone());
            let real_logits = d.discriminate(&mut dt, &model.store, dx, dy, true)?;
            let fake_logits = d.discriminate(&mut dt, &model.store, dx, dfake, true)?;
            let d_loss = discriminator_loss(&mut dt, real_logits, fake_logits, cfg.loss.gan_kind)?;
            parts.gan_d = Some(dt.value(d_loss).item().as_f64());
            dt.backward(d_loss)?;
            opt.step(&mut model.store, &dt.param_grads())?;
            let logits = d.discriminate(&mut tape, &model.store, x, fake, false)?;
            parts.gan_g = Some(generator_gan_loss(&mut tape, logits, cfg.loss.gan_kind)?);
        }

        if cfg.loss.main_enabled() {
            let gen_feats = model.encoder.encode(&mut tape, &model.store, fake)?;
            let gt_feats = model.encoder.encode(&mut tape, &model.store, y)?;
            if let Some(head) = &model.head {
                let policy = match cfg.encoder.kind {
                    EncoderKind::PixelLinear => cfg.sampler.split_across(gen_feats.len()),
                    EncoderKind::ConvStack => cfg.sampler.clone(),
                };
                let mut rng = derive_rng(cfg.seed, streams::SAMPLER, self.iteration);
                let (a, b) = build_pair_sets(&mut tape, &model.store, &gen_feats, &gt_feats, head, &policy, &mut rng)?;
                parts.nce = Some(patchnce_loss(
                    &mut tape,
                    &a,
                    &b,
                    cfg.loss.temperature,
                    cfg.loss.variant,
                    cfg.sampler.negatives,
                    cfg.loss.reduction,
                )?);
            } else {
                parts.feature_matching = Some(feature_matching_loss(&mut tape, &gen_feats, &gt_feats, cfg.loss.fm_norm)?);
            }
        }

        let (total, report) = total_objective(&mut tape, &cfg.loss, &parts)?;
        tape.backward(total)?;
        self.opt_g.step(&mut model.store, &tape.param_grads())?;
        Ok(report)
    }

    /// Writes parameters, optimizer moments, counters and the config.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut file = CheckpointFile::new();
        let store = &self.model.store;
        for id in store.ids() {
            if self.model.persisted(id) {
                file.put_tensor(store.name(id), store.get(id));
            }
        }
        for (tag, opt) in [("gen", Some(&self.opt_g)), ("disc", self.opt_d.as_ref())] {
            let Some(opt) = opt else { continue };
            for (k, &id) in opt.ids().iter().enumerate() {
                let (m, v) = opt.moments(k);
                file.put_tensor(&format!("opt.{tag}.m.{}", store.name(id)), m);
                file.put_tensor(&format!("opt.{tag}.v.{}", store.name(id)), v);
            }
            file.put_u64(&format!("opt.{tag}.t"), opt.step_count());
        }
        file.put_u64("iteration", self.iteration);
        file.put_u64("seed", self.cfg.seed);
        file.put_blob("config", self.cfg.to_text().into_bytes());
        file.write(path)
    }

    /// Restores a state written by [`Self::save_checkpoint`].
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let file = CheckpointFile::read(path)?;
        let err = |msg: String| Error::Checkpoint {
            path: path.to_path_buf(),
            msg,
        };
        if let Some(text) = file.blob("config") {
            let saved = TrainConfig::parse(&String::from_utf8_lossy(text))?;
            if !same_model(&saved, &self.cfg) {
                return Err(err("checkpoint was written by an incompatible config".into()));
            }
        }
        for name in file.tensor_names() {
            if let Some(rest) = name.strip_prefix("opt.") {
                let (tag, rest) = rest.split_once('.').ok_or_else(|| err(format!("unknown tensor name {name}")))?;
                let (which, pname) = rest.split_once('.').ok_or_else(|| err(format!("unknown tensor name {name}")))?;
                let opt = match tag {
                    "gen" => Some(&mut self.opt_g),
                    "disc" => self.opt_d.as_mut(),
                    _ => None,
                }
                .ok_or_else(|| err(format!("unknown tensor name {name}")))?;
                let id = self.model.store.id(pname);
                let k = id
                    .and_then(|id| opt.ids().iter().position(|&i| i == id))
                    .ok_or_else(|| err(format!("unknown tensor name {name}")))?;
                let t: Tensor<T> = file.tensor(name).expect("listed tensor");
                let (m, v) = opt.moments_mut(k);
                let slot = match which {
                    "m" => m,
                    "v" => v,
                    _ => return Err(err(format!("unknown tensor name {name}"))),
                };
                if slot.shape() != t.shape() {
                    return Err(err(format!("tensor {name} has shape {:?}", t.shape())));
                }
                *slot = t;
            } else {
                self.model.load_tensor(&file, name, path)?;
            }
        }
        let counter = |name: &str| file.get_u64(name).ok_or_else(|| err(format!("missing counter {name}")));
        self.iteration = counter("iteration")?;
        self.opt_g.set_step_count(counter("opt.gen.t")?);
        if let Some(opt) = self.opt_d.as_mut() {
            opt.set_step_count(counter("opt.disc.t")?);
        }
        Ok(())
    }

    /// Trains until `cfg.iterations`, writing `log.csv`, periodic
    /// checkpoints under `checkpoints/` and `final.nckp` into `out`.
    pub fn run(&mut self, out: &Path, mut on_step: impl FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
        fs::create_dir_all(out.join("checkpoints"))?;
        let log_path = out.join("log.csv");
        let mut log = if self.iteration > 0 && log_path.exists() {
            fs::OpenOptions::new().append(true).open(&log_path)?
        } else {
            let mut f = fs::File::create(&log_path)?;
            writeln!(f, "{LOG_HEADER}")?;
            f
        };
        let mut records = Vec::new();
        while self.iteration < self.cfg.iterations {
            let start = Instant::now();
            let report = match self.step() {
                Ok(r) => r,
                Err(e @ Error::Diverged { .. }) => {
                    if let Error::Diverged { iteration, detail } = &e {
                        fs::write(out.join("divergence.txt"), format!("iteration {iteration}\n{detail}"))?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let it = self.iteration;
            let record = StepRecord {
                iteration: it,
                report,
                time_ms: self.cfg.log_time.then(|| start.elapsed().as_secs_f64() * 1e3),
            };
            let last = it == self.cfg.iterations;
            if it % self.cfg.log_every == 0 || last {
                writeln!(log, "{}", record.csv_row(self.cfg.optim.lr))?;
            }
            if it % self.cfg.checkpoint_every == 0 || last {
                self.save_checkpoint(&checkpoint_path(out, it))?;
            }
            on_step(&record);
            records.push(record);
        }
        log.flush()?;
        self.save_checkpoint(&out.join("final.nckp"))?;
        Ok(records)
    }

    /// Current projection of a batch through encoder and head, for tests
    /// and diagnostics.
    pub fn encode_batch(&self, tape: &mut Tape<T>, images: Var) -> Result<crate::encoders::FeatureStack> {
        self.model.encoder.encode(tape, &self.model.store, images)
    }
}

/// Path of the periodic checkpoint for `iteration`.
pub fn checkpoint_path(out: &Path, iteration: u64) -> PathBuf {
    out.join("checkpoints").join(format!("iter_{iteration:06}.nckp"))
}

/// Configs that build identical networks and optimizer groups.
fn same_model(a: &TrainConfig, b: &TrainConfig) -> bool {
    a.generator == b.generator
        && a.discriminator == b.discriminator
        && a.encoder == b.encoder
        && a.head == b.head
        && a.loss.gan_active() == b.loss.gan_active()
        && a.loss.is_contrastive() == b.loss.is_contrastive()
        && a.seed == b.seed
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(text: &str) -> TrainConfig {
        let base = "task.count = 16\ntask.size = 16\ntrain.batch_size = 2\ngenerator.width = 4\n\
                    generator.res_blocks = 1\nencoder.channels = [4, 8]\nhead.embed_dim = 8\n\
                    sampler.n_patches = 16\ngan.width = 4\ntrain.iterations = 3\nlog.time = false\n";
        TrainConfig::parse(&format!("{base}{text}")).unwrap()
    }

    #[test]
    fn one_optimizer_step_without_gan() {
        let mut t = Trainer::<f64>::new(tiny("")).unwrap();
        t.step().unwrap();
        assert_eq!(t.optimizer_steps(), (1, None));
        let mut t = Trainer::<f64>::new(tiny("gan.enabled = true")).unwrap();
        let r = t.step().unwrap();
        assert_eq!(t.optimizer_steps(), (1, Some(1)));
        assert!(r.gan_d.is_some() && r.gan_g.is_some());
    }

    #[test]
    fn zero_lr_repeats_loss() {
        let mut t = Trainer::<f64>::new(tiny("optim.lr = 0.0\ngan.enabled = true")).unwrap();
        let before = t.model.store.clone();
        let a = t.step().unwrap();
        for (x, y) in before.iter().zip(t.model.store.iter()) {
            assert_eq!(x.1, y.1);
        }
        t.iteration = 0;
        let b = t.step().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn frozen_encoder_is_untouched_and_trained_encoder_moves() {
        for frozen in [true, false] {
            let cfg = tiny(&format!("encoder.frozen = {frozen}"));
            let mut t = Trainer::<f64>::new(cfg).unwrap();
            let f_before: Vec<_> = t.model.store.iter().filter(|(n, _)| n.starts_with("f.")).map(|(_, v)| v.clone()).collect();
            t.step().unwrap();
            t.step().unwrap();
            let f_after: Vec<_> = t.model.store.iter().filter(|(n, _)| n.starts_with("f.")).map(|(_, v)| v.clone()).collect();
            assert_eq!(f_before == f_after, frozen);
        }
    }

    #[test]
    fn feature_matching_has_no_head() {
        let mut t = Trainer::<f64>::new(tiny("loss.variant = \"feature-matching\"")).unwrap();
        assert!(t.model.head.is_none());
        let r = t.step().unwrap();
        assert!(r.feature_matching.is_some() && r.nce.is_none());
    }

    #[test]
    fn checkpoint_round_trip_and_unknown_names() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::<f32>::new(tiny("gan.enabled = true\nencoder.frozen = false")).unwrap();
        t.step().unwrap();
        let p = dir.path().join("a.nckp");
        t.save_checkpoint(&p).unwrap();
        let mut u = Trainer::<f32>::new(tiny("gan.enabled = true\nencoder.frozen = false")).unwrap();
        u.load_checkpoint(&p).unwrap();
        let q = dir.path().join("b.nckp");
        u.save_checkpoint(&q).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
        assert_eq!(u.iteration(), 1);

        let mut file = CheckpointFile::read(&p).unwrap();
        file.put_tensor("g.bogus", &Tensor::<f32>::zeros(&[1]));
        file.write(&p).unwrap();
        let err = u.load_checkpoint(&p).unwrap_err();
        assert!(err.to_string().contains("g.bogus"));
    }

    #[test]
    fn divergence_is_reported() {
        let mut t = Trainer::<f64>::new(tiny("")).unwrap();
        let id = t.model.store.id("g.up1.b").unwrap();
        t.model.store.get_mut(id).data_mut()[0] = f64::NAN;
        match t.step() {
            Err(Error::Diverged { iteration, detail }) => {
                assert_eq!(iteration, 1);
                assert!(detail.contains("g.up1.b"));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
