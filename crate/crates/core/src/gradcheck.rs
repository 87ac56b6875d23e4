//! Verification suites shared by the tests and the CLI: finite-difference
//! gradient checks (`gradcheck`) and vectorized-vs-naive loss equivalence
//! (`oracle-check`).
//!
//! Every check evaluates a scalar function of f64 inputs twice: once through
//! the tape and backward, once through [`finite_diff_grad`] on plain forward
//! evaluations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoders::{Encoder, EncoderKind, EncoderSpec, HeadSpec, ProjectionHead};
use crate::error::Result;
use crate::losses::{
    contrastive_rows, feature_matching_loss, nce_term, patchnce_loss, GanKind, LossVariant, Reduction,
};
use crate::models::{cgan_losses, Discriminator, DiscriminatorSpec, Generator, GeneratorSpec};
use crate::oracle::{finite_diff_grad, max_rel_error, naive_patchnce, NaiveVariant};
use crate::params::ParamStore;
use crate::sampler::{build_pair_sets, LayerEmbeddings, NegativeSource, PatchEmbeddingSet, SamplerPolicy};
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;

/// Step used for every central difference.
pub const FD_STEP: f64 = 1e-5;
/// Per-op relative tolerance.
pub const OP_TOLERANCE: f64 = 1e-6;
/// Tolerance for deep compositions (models, end-to-end loss).
pub const COMPOSITE_TOLERANCE: f64 = 1e-4;

/// Result of one gradient comparison.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Inputs of one evaluation inside [`check_function`].
pub struct Probe<'a> {
    vars: &'a [Var],
    base: &'a [Tensor<f64>],
    analytic: bool,
}

impl Probe<'_> {
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        self.vars
    }

    /// Input `i` behind a stop-gradient. On the finite-difference side the
    /// detached branch is frozen at the unperturbed input.
    pub fn detached(&self, tape: &mut Tape<f64>, i: usize) -> Var {
        if self.analytic {
            tape.stop_gradient(self.vars[i])
        } else {
            tape.constant(self.base[i].clone())
        }
    }
}

/// Compares backward against finite differences for `f` at every input.
///
/// `f` builds a scalar on the tape from the leaves exposed by the probe.
pub fn check_function<F>(name: &str, inputs: &[Tensor<f64>], tolerance: f64, f: F) -> Result<CheckOutcome>
where
    F: Fn(&mut Tape<f64>, &Probe) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let probe = Probe {
        vars: &vars,
        base: inputs,
        analytic: true,
    };
    let loss = f(&mut tape, &probe)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).cloned().expect("leaf gradient"))
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let probe = Probe {
            vars: &vars,
            base: inputs,
            analytic: false,
        };
        let out = f(&mut tape, &probe)?;
        Ok(tape.value(out).item())
    };
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let mut xs = inputs.to_vec();
        let numeric = finite_diff_grad(
            |probe| {
                xs[i] = probe.clone();
                eval(&xs)
            },
            input,
            FD_STEP,
        )?;
        worst = worst.max(max_rel_error(analytic[i].data(), numeric.data()));
    }
    Ok(CheckOutcome {
        name: name.to_string(),
        max_rel_error: worst,
        tolerance,
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Uniform in [-1, 1] but bounded away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let u: f64 = rng.gen_range(-1.0..1.0);
        u.signum() * (0.1 + 0.9 * u.abs())
    })
}

/// Test cases for every op kind: (kind, inputs).
pub fn op_cases(seed: u64) -> Vec<(OpKind, Vec<Tensor<f64>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let clamp_input = Tensor::from_fn(&[3, 4], |i| [-0.9, -0.3, 0.1, 0.7][i % 4] + 0.01 * i as f64);
    vec![
        (OpKind::Add, vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)]),
        (OpKind::Sub, vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 3], -1.0, 1.0)]),
        (OpKind::Mul, vec![uniform(r, &[2, 3, 2], -1.0, 1.0), uniform(r, &[3, 2], -1.0, 1.0)]),
        (OpKind::MatMul, vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0)]),
        (OpKind::Transpose, vec![uniform(r, &[3, 5], -1.0, 1.0)]),
        (
            OpKind::Conv2d { stride: 2, pad: 1 },
            vec![uniform(r, &[2, 5, 5, 3], -1.0, 1.0), uniform(r, &[3, 3, 3, 4], -0.5, 0.5)],
        ),
        (
            OpKind::Conv2d { stride: 1, pad: 0 },
            vec![uniform(r, &[1, 4, 3, 2], -1.0, 1.0), uniform(r, &[2, 2, 2, 3], -0.5, 0.5)],
        ),
        (
            OpKind::ConvTranspose2d { stride: 2, pad: 1 },
            vec![uniform(r, &[2, 3, 3, 4], -1.0, 1.0), uniform(r, &[4, 4, 4, 3], -0.5, 0.5)],
        ),
        (OpKind::LeakyRelu { slope: 0.2 }, vec![away_from_zero(r, &[3, 4])]),
        (OpKind::Relu, vec![away_from_zero(r, &[3, 4])]),
        (OpKind::Tanh, vec![uniform(r, &[3, 4], -2.0, 2.0)]),
        (OpKind::Softplus, vec![uniform(r, &[3, 4], -3.0, 3.0)]),
        (OpKind::InstanceNorm { eps: 1e-5 }, vec![uniform(r, &[2, 3, 3, 2], -1.0, 1.0)]),
        (OpKind::Reshape { shape: vec![6, 2] }, vec![uniform(r, &[3, 4], -1.0, 1.0)]),
        (
            OpKind::Concat { axis: 1 },
            vec![uniform(r, &[2, 2, 3], -1.0, 1.0), uniform(r, &[2, 1, 3], -1.0, 1.0)],
        ),
        (
            OpKind::IndexSelect {
                axis: 1,
                indices: vec![2, 0, 2, 3],
            },
            vec![uniform(r, &[2, 4, 3], -1.0, 1.0)],
        ),
        (
            OpKind::L2Normalize { axis: 1, eps: 1e-12 },
            vec![uniform(r, &[3, 4], -1.0, 1.0)],
        ),
        (
            OpKind::L2Normalize { axis: 0, eps: 1e-12 },
            vec![uniform(r, &[3, 4], -1.0, 1.0)],
        ),
        (OpKind::L2Norm { axis: 1 }, vec![uniform(r, &[3, 4], -1.0, 1.0)]),
        (OpKind::Exp, vec![uniform(r, &[3, 4], -2.0, 2.0)]),
        (OpKind::Log, vec![uniform(r, &[3, 4], 0.2, 3.0)]),
        (OpKind::Abs, vec![away_from_zero(r, &[3, 4])]),
        (OpKind::Clamp { lo: -0.5, hi: 0.5 }, vec![clamp_input]),
        (OpKind::Sum { axes: vec![0, 2] }, vec![uniform(r, &[2, 3, 4], -1.0, 1.0)]),
        (OpKind::Mean { axes: vec![1] }, vec![uniform(r, &[2, 3, 4], -1.0, 1.0)]),
        (OpKind::LogSumExp { axis: 1 }, vec![uniform(r, &[3, 5], -3.0, 3.0)]),
        (OpKind::LogSumExp { axis: 0 }, vec![uniform(r, &[3, 5], -3.0, 3.0)]),
        (OpKind::Scale { factor: -1.7 }, vec![uniform(r, &[3, 4], -1.0, 1.0)]),
        (OpKind::StopGradient, vec![uniform(r, &[3, 4], -1.0, 1.0)]),
    ]
}

/// Reduces an op output to a scalar with fixed pseudo-random weights so every
/// output element contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape<f64>, out: Var) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let weights = Tensor::from_fn(&shape, |i| ((i as f64 + 1.0) * 0.731).sin() + 0.25);
    let w = tape.constant(weights);
    let prod = tape.mul(out, w)?;
    tape.sum_all(prod)
}

/// Checks every op kind against finite differences.
pub fn check_ops(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut outcomes = Vec::new();
    for (kind, inputs) in op_cases(seed) {
        let name = format!("op/{}", kind.name());
        let outcome = check_function(&name, &inputs, OP_TOLERANCE, |tape, probe| {
            let out = match kind {
                OpKind::StopGradient => probe.detached(tape, 0),
                _ => tape.forward(&kind, probe.vars())?,
            };
            weighted_sum(tape, out)
        })?;
        outcomes.push(outcome);
    }
    Ok(outcomes)
}

/// Duplicated use of one leaf must receive the sum of its path gradients:
/// compares `f(x, x)` against `f(x1, x2)` with the two gradients summed.
pub fn check_accumulation(seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, &[3, 3], -1.0, 1.0);
    let build = |tape: &mut Tape<f64>, a: Var, b: Var| -> Result<Var> {
        let p = tape.matmul(a, b)?;
        let t = tape.tanh(p)?;
        let s = tape.mul(t, a)?;
        tape.sum_all(s)
    };
    let mut shared = Tape::new();
    let xv = shared.leaf(x.clone(), true);
    let loss = build(&mut shared, xv, xv)?;
    shared.backward(loss)?;
    let single = shared.grad(xv).unwrap().data().to_vec();

    let mut split = Tape::new();
    let a = split.leaf(x.clone(), true);
    let b = split.leaf(x, true);
    let loss = build(&mut split, a, b)?;
    split.backward(loss)?;
    let summed: Vec<f64> = split
        .grad(a)
        .unwrap()
        .data()
        .iter()
        .zip(split.grad(b).unwrap().data())
        .map(|(p, q)| p + q)
        .collect();
    Ok(CheckOutcome {
        name: "tape/accumulation".into(),
        max_rel_error: max_rel_error(&single, &summed),
        tolerance: 1e-12,
    })
}

/// Compares backward against finite differences for every parameter of
/// `store`, with `f` reading parameters through `Tape::param`.
pub fn check_params<F>(name: &str, store: &ParamStore<f64>, tolerance: f64, f: F) -> Result<CheckOutcome>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss)?;
    let mut work = store.clone();
    let mut worst = 0.0f64;
    for id in store.ids() {
        let base = store.get(id);
        let analytic = tape.param_grad(id).cloned().unwrap_or_else(|| Tensor::zeros(base.shape()));
        let numeric = finite_diff_grad(
            |probe| {
                *work.get_mut(id) = probe.clone();
                let mut t = Tape::new();
                let out = f(&mut t, &work)?;
                Ok(t.value(out).item())
            },
            base,
            FD_STEP,
        )?;
        *work.get_mut(id) = base.clone();
        worst = worst.max(max_rel_error(analytic.data(), numeric.data()));
    }
    Ok(CheckOutcome {
        name: name.to_string(),
        max_rel_error: worst,
        tolerance,
    })
}

fn unit_embeddings(tape: &mut Tape<f64>, raw: Var) -> Result<Var> {
    tape.l2_normalize(raw, 2, crate::encoders::NORMALIZE_EPS)
}

fn single_layer_set(emb: Var, m: usize) -> PatchEmbeddingSet {
    PatchEmbeddingSet {
        layers: vec![LayerEmbeddings {
            indices: (0..m).collect(),
            embeddings: emb,
        }],
    }
}

/// Per-row bidirectional loss built from `nce_term`, with every negative
/// taken from the detached copy of its set.
fn bidirectional_reference(tape: &mut Tape<f64>, probe: &Probe, n: usize, m: usize, e: usize, tau: f64) -> Result<Var> {
    let gen = unit_embeddings(tape, probe.var(0))?;
    let gt = unit_embeddings(tape, probe.var(1))?;
    let gen_d = probe.detached(tape, 0);
    let gen_d = unit_embeddings(tape, gen_d)?;
    let gt_d = probe.detached(tape, 1);
    let gt_d = unit_embeddings(tape, gt_d)?;
    let flat = |tape: &mut Tape<f64>, v: Var| tape.reshape(v, &[n * m, e]);
    let (gen, gt, gen_d, gt_d) = (flat(tape, gen)?, flat(tape, gt)?, flat(tape, gen_d)?, flat(tape, gt_d)?);
    let mut terms = Vec::new();
    for img in 0..n {
        for i in 0..m {
            let row = img * m + i;
            let others: Vec<usize> = (0..m).filter(|&j| j != i).map(|j| img * m + j).collect();
            for (q, k, kd) in [(gen, gt, gt_d), (gt, gen, gen_d)] {
                let qi = tape.index_select(q, 0, &[row])?;
                let ki = tape.index_select(k, 0, &[row])?;
                let negs = tape.index_select(kd, 0, &others)?;
                let t = nce_term(tape, qi, ki, negs, tau)?;
                terms.push(tape.reshape(t, &[1])?);
            }
        }
    }
    let all = tape.concat(&terms, 0)?;
    let total = tape.sum_all(all)?;
    tape.scale(total, 0.5 / (n * m) as f64)
}

/// Bidirectional loss against a per-row reference whose negatives are
/// detached: the reference is checked by finite differences, then the
/// vectorized gradients are compared with the reference's.
pub fn check_bidirectional(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, m, e, tau) = (2, 6, 5, 0.5);
    let inputs = vec![uniform(&mut rng, &[n, m, e], -1.0, 1.0), uniform(&mut rng, &[n, m, e], -1.0, 1.0)];
    let reference = check_function("loss/bidirectional-reference", &inputs, COMPOSITE_TOLERANCE, |tape, probe| {
        bidirectional_reference(tape, probe, n, m, e, tau)
    })?;

    let grads = |vectorized: bool| -> Result<Vec<Tensor<f64>>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = if vectorized {
            let a = unit_embeddings(&mut tape, vars[0])?;
            let b = unit_embeddings(&mut tape, vars[1])?;
            let (a, b) = (single_layer_set(a, m), single_layer_set(b, m));
            patchnce_loss(
                &mut tape,
                &a,
                &b,
                tau,
                LossVariant::BidirectionalNce,
                NegativeSource::SameImage,
                Reduction::PerLayerMean,
            )?
            .total
        } else {
            let probe = Probe {
                vars: &vars,
                base: &inputs,
                analytic: true,
            };
            bidirectional_reference(&mut tape, &probe, n, m, e, tau)?
        };
        tape.backward(loss)?;
        Ok(vars.iter().map(|&v| tape.grad(v).cloned().expect("leaf gradient")).collect())
    };
    let (vec_g, ref_g) = (grads(true)?, grads(false)?);
    let worst = vec_g
        .iter()
        .zip(&ref_g)
        .map(|(a, b)| max_rel_error(a.data(), b.data()))
        .fold(0.0, f64::max);
    Ok(vec![
        reference,
        CheckOutcome {
            name: "loss/bidirectional-vectorized".into(),
            max_rel_error: worst,
            tolerance: 1e-10,
        },
    ])
}

/// Checks the negative-role gradient of the contrastive kernel is exactly
/// zero; reported as a check with zero tolerance.
pub fn check_stop_gradient(seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let q = tape.leaf(uniform(&mut rng, &[8, 4], -1.0, 1.0), true);
    let k = uniform(&mut rng, &[8, 4], -1.0, 1.0);
    let pos = tape.leaf(k.clone(), true);
    let neg = tape.leaf(k, true);
    let (loss, _) = contrastive_rows(&mut tape, q, pos, neg, true, 0.07)?;
    tape.backward(loss)?;
    let leaked = tape
        .grad(neg)
        .map_or(0.0, |g| g.data().iter().fold(0.0f64, |a, v| a.max(v.abs())));
    Ok(CheckOutcome {
        name: "loss/negative-role-gradient".into(),
        max_rel_error: leaked,
        tolerance: 0.0,
    })
}

fn image(rng: &mut ChaCha8Rng, n: usize, size: usize, c: usize) -> Tensor<f64> {
    uniform(rng, &[n, size, size, c], -1.0, 1.0)
}

/// Encoder, head and loss composed end to end, checked over every
/// parameter including both images.
pub fn check_end_to_end(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut outcomes = Vec::new();
    for (name, variant, mlp) in [
        ("end-to-end/standard-nce", LossVariant::StandardNce, false),
        ("end-to-end/standard-nce-mlp", LossVariant::StandardNce, true),
        ("end-to-end/feature-matching", LossVariant::FeatureMatching, false),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let spec = EncoderSpec {
            kind: EncoderKind::ConvStack,
            in_channels: 3,
            channels: vec![4, 5],
            taps: vec![0, 1, 2],
            frozen: false,
            ..EncoderSpec::default()
        };
        let encoder = Encoder::new(spec, &mut store, &mut rng)?;
        let head = ProjectionHead::new(HeadSpec { embed_dim: 6, mlp }, &encoder.tap_dims(), &mut store, &mut rng)?;
        let gen_id = store.add("x.gen", image(&mut rng, 2, 8, 3))?;
        let gt_id = store.add("x.gt", image(&mut rng, 2, 8, 3))?;
        let policy = SamplerPolicy {
            n_patches: 5,
            ..SamplerPolicy::default()
        };
        outcomes.push(check_params(name, &store, COMPOSITE_TOLERANCE, |tape, store| {
            let gen = tape.param(store, gen_id, true);
            let gt = tape.param(store, gt_id, true);
            let fg = encoder.encode(tape, store, gen)?;
            let ft = encoder.encode(tape, store, gt)?;
            if variant == LossVariant::FeatureMatching {
                return feature_matching_loss(tape, &fg, &ft, 1);
            }
            let mut srng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let (a, b) = build_pair_sets(tape, store, &fg, &ft, &head, &policy, &mut srng)?;
            Ok(patchnce_loss(tape, &a, &b, 0.5, variant, NegativeSource::SameImage, Reduction::PerLayerMean)?.total)
        })?);
    }
    Ok(outcomes)
}

/// Generator, discriminator and both conditional GAN losses.
pub fn check_models(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let generator = Generator::new(
        GeneratorSpec {
            in_channels: 2,
            out_channels: 3,
            width: 2,
            res_blocks: 1,
        },
        &mut store,
        &mut rng,
    )?;
    let disc = Discriminator::new(
        DiscriminatorSpec {
            in_channels: 5,
            layers: 2,
            width: 2,
            zero_init_last: false,
        },
        &mut store,
        &mut rng,
    )?;
    let x = image(&mut rng, 2, 8, 2);
    let real = image(&mut rng, 2, 8, 3);
    let mut outcomes = vec![check_params("model/generator", &store, COMPOSITE_TOLERANCE, |tape, store| {
        let xv = tape.constant(x.clone());
        let y = generator.generate(tape, store, xv)?;
        weighted_sum(tape, y)
    })?];
    outcomes.push(check_params("model/discriminator", &store, COMPOSITE_TOLERANCE, |tape, store| {
        let xv = tape.constant(x.clone());
        let yv = tape.constant(real.clone());
        let logits = disc.discriminate(tape, store, xv, yv, true)?;
        weighted_sum(tape, logits)
    })?);
    let fake_const = {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = generator.generate(&mut tape, &store, xv)?;
        tape.value(y).clone()
    };
    for (name, kind, d_side) in [
        ("gan/g-loss-vanilla", GanKind::Vanilla, false),
        ("gan/g-loss-hinge", GanKind::Hinge, false),
        ("gan/d-loss-vanilla", GanKind::Vanilla, true),
        ("gan/d-loss-hinge", GanKind::Hinge, true),
    ] {
        outcomes.push(check_params(name, &store, COMPOSITE_TOLERANCE, |tape, store| {
            let xv = tape.constant(x.clone());
            let yv = tape.constant(real.clone());
            let fake = if d_side {
                tape.constant(fake_const.clone())
            } else {
                generator.generate(tape, store, xv)?
            };
            let (d, g) = cgan_losses(tape, store, &disc, xv, yv, fake, kind)?;
            Ok(if d_side { d } else { g })
        })?);
    }
    Ok(outcomes)
}

/// Every finite-difference suite, in report order.
pub fn run_all(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut outcomes = check_ops(seed)?;
    outcomes.push(check_accumulation(seed)?);
    outcomes.push(check_stop_gradient(seed)?);
    outcomes.extend(check_bidirectional(seed)?);
    outcomes.extend(check_end_to_end(seed)?);
    outcomes.extend(check_models(seed)?);
    Ok(outcomes)
}

/// Shape of the random instances used by [`check_oracle`].
#[derive(Debug, Clone, Copy)]
pub struct OracleSuite {
    pub instances: usize,
    pub layers: usize,
    pub locations: usize,
    pub dim: usize,
    pub tau: f64,
}

impl Default for OracleSuite {
    fn default() -> Self {
        OracleSuite {
            instances: 100,
            layers: 3,
            locations: 32,
            dim: 16,
            tau: 0.07,
        }
    }
}

fn random_unit_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

/// Vectorized standard and bidirectional losses against the naive loops,
/// under both reductions; one outcome per variant and reduction holding the
/// worst relative difference over all instances.
pub fn check_oracle(seed: u64, suite: OracleSuite, tolerance: f64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases = [
        ("oracle/standard-sum", LossVariant::StandardNce, NaiveVariant::Standard, Reduction::RawSum),
        ("oracle/standard-mean", LossVariant::StandardNce, NaiveVariant::Standard, Reduction::PerLayerMean),
        ("oracle/bidirectional-sum", LossVariant::BidirectionalNce, NaiveVariant::Bidirectional, Reduction::RawSum),
        ("oracle/bidirectional-mean", LossVariant::BidirectionalNce, NaiveVariant::Bidirectional, Reduction::PerLayerMean),
    ];
    let mut worst = [0.0f64; 4];
    for _ in 0..suite.instances {
        let gen: Vec<_> = (0..suite.layers).map(|_| random_unit_rows(&mut rng, suite.locations, suite.dim)).collect();
        let gt: Vec<_> = (0..suite.layers).map(|_| random_unit_rows(&mut rng, suite.locations, suite.dim)).collect();
        let mut tape = Tape::<f64>::new();
        let to_set = |tape: &mut Tape<f64>, layers: &[Vec<Vec<f64>>]| PatchEmbeddingSet {
            layers: layers
                .iter()
                .map(|rows| LayerEmbeddings {
                    indices: (0..rows.len()).collect(),
                    embeddings: tape.constant(Tensor::new(&[1, rows.len(), suite.dim], rows.concat()).expect("instance shape")),
                })
                .collect(),
        };
        let (a, b) = (to_set(&mut tape, &gen), to_set(&mut tape, &gt));
        for (k, &(_, variant, naive, reduction)) in cases.iter().enumerate() {
            let out = patchnce_loss(&mut tape, &a, &b, suite.tau, variant, NegativeSource::SameImage, reduction)?;
            let got = tape.value(out.total).item();
            let expected = naive_patchnce(&gen, &gt, suite.tau, naive, reduction == Reduction::PerLayerMean);
            worst[k] = worst[k].max((got - expected).abs() / expected.abs().max(f64::MIN_POSITIVE));
        }
    }
    Ok(cases
        .iter()
        .zip(worst)
        .map(|(&(name, ..), w)| CheckOutcome {
            name: name.into(),
            max_rel_error: w,
            tolerance,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_finite_differences() {
        for outcome in check_ops(7).unwrap() {
            assert!(outcome.passed(), "{outcome:?}");
        }
    }

    #[test]
    fn accumulation_matches_split_paths() {
        assert!(check_accumulation(3).unwrap().passed());
    }

    #[test]
    fn composite_suites_pass() {
        for outcome in run_all(7).unwrap() {
            assert!(outcome.passed(), "{outcome:?}");
        }
    }

    #[test]
    fn oracle_suite_passes() {
        let suite = OracleSuite {
            instances: 5,
            ..OracleSuite::default()
        };
        for outcome in check_oracle(1, suite, 1e-6).unwrap() {
            assert!(outcome.passed(), "{outcome:?}");
        }
    }

    #[test]
    fn every_op_kind_has_a_case() {
        let names: std::collections::HashSet<_> =
            op_cases(0).iter().map(|(k, _)| k.name()).collect();
        assert_eq!(names.len(), 26);
    }
}
