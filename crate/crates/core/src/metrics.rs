//! Output quality metrics and checkpoint evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::encoders::{Encoder, EncoderKind, EncoderSpec, FeatureStack};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::params::{kaiming_uniform, ParamId, ParamStore};
use crate::rng::{derive_rng, streams};
use crate::sampler::{sample_locations, SamplerPolicy};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};
use crate::trainer::Model;

/// Reported PSNR when the prediction equals the reference.
pub const PSNR_CAP: f64 = 99.0;
/// Eigenvalues above this negative bound are treated as rounding noise.
pub const EIGEN_TOLERANCE: f64 = 1e-6;

/// Fraction of rows of `gen` whose logit against the same row of `gt`
/// strictly exceeds its logits against every other row.
pub fn retrieval_accuracy(gen: &Tensor<f64>, gt: &Tensor<f64>, tau: f64) -> Result<f64> {
    if gen.shape() != gt.shape() || gen.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "retrieval_accuracy",
            lhs: gen.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    let (m, e) = (gen.shape()[0], gen.shape()[1]);
    if m == 0 {
        return Err(Error::invalid("retrieval_accuracy", "empty sets"));
    }
    let (a, b) = (gen.data(), gt.data());
    let logit = |i: usize, j: usize| -> f64 { (0..e).map(|k| a[i * e + k] * b[j * e + k]).sum::<f64>() / tau };
    let wins = (0..m)
        .filter(|&i| {
            let pos = logit(i, i);
            (0..m).filter(|&j| j != i).all(|j| pos > logit(i, j))
        })
        .count();
    Ok(wins as f64 / m as f64)
}

/// Mean and covariance of a feature sample.
#[derive(Debug, Clone)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl GaussianStats {
    /// Stats of `rows` (one feature vector each); needs more rows than the
    /// feature dimension.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if d == 0 || n < d + 1 {
            return Err(Error::invalid(
                "frechet_feature_distance",
                format!("need at least {} samples of dimension {d}, got {n}", d + 1),
            ));
        }
        let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
        let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
        let mut centered = x;
        for j in 0..d {
            let mu = mean[j];
            centered.column_mut(j).add_scalar_mut(-mu);
        }
        let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
        Ok(GaussianStats { mean, cov, count: n })
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -EIGEN_TOLERANCE {
            return Err(Error::invalid("frechet_feature_distance", format!("matrix not positive semidefinite (eigenvalue {v})")));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)`.
pub fn frechet_feature_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::ShapeMismatch {
            op: "frechet_feature_distance",
            lhs: vec![a.mean.len()],
            rhs: vec![b.mean.len()],
        });
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let sa = psd_sqrt(&a.cov)?;
    let inner = &sa * &b.cov * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let mut cross = 0.0;
    for &v in eig.eigenvalues.iter() {
        if v < -EIGEN_TOLERANCE {
            return Err(Error::invalid("frechet_feature_distance", format!("negative eigenvalue {v}")));
        }
        cross += v.max(0.0).sqrt();
    }
    let d = diff + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    if d < -EIGEN_TOLERANCE {
        return Err(Error::invalid("frechet_feature_distance", format!("negative distance {d}")));
    }
    Ok(d.max(0.0))
}

/// Per-image statistics of an HWC image in [-1, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageStats {
    /// Mean over pixels of max minus min across RGB.
    pub chroma: f64,
    /// Mean magnitude of the forward-difference gradient, averaged over
    /// channels.
    pub sharpness: f64,
    pub psnr: Option<f64>,
}

fn check_hwc3(img: &Tensor<f64>) -> Result<(usize, usize)> {
    let s = img.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::invalid("image_stats", format!("expected (H, W, 3) image, got {s:?}")));
    }
    Ok((s[0], s[1]))
}

pub fn chroma(img: &Tensor<f64>) -> Result<f64> {
    check_hwc3(img)?;
    let px = img.data().chunks(3);
    let n = px.len();
    Ok(px.map(|p| p.iter().cloned().fold(f64::MIN, f64::max) - p.iter().cloned().fold(f64::MAX, f64::min)).sum::<f64>() / n as f64)
}

pub fn sharpness(img: &Tensor<f64>) -> Result<f64> {
    let (h, w) = check_hwc3(img)?;
    if h < 2 || w < 2 {
        return Ok(0.0);
    }
    let d = img.data();
    let at = |i: usize, j: usize, c: usize| d[(i * w + j) * 3 + c];
    let mut total = 0.0;
    for i in 0..h - 1 {
        for j in 0..w - 1 {
            for c in 0..3 {
                let dy = at(i + 1, j, c) - at(i, j, c);
                let dx = at(i, j + 1, c) - at(i, j, c);
                total += (dx * dx + dy * dy).sqrt();
            }
        }
    }
    Ok(total / ((h - 1) * (w - 1) * 3) as f64)
}

/// `10 log10(4 / MSE)` for images in [-1, 1], capped at [`PSNR_CAP`].
pub fn psnr(img: &Tensor<f64>, reference: &Tensor<f64>) -> Result<f64> {
    if img.shape() != reference.shape() {
        return Err(Error::ShapeMismatch {
            op: "psnr",
            lhs: img.shape().to_vec(),
            rhs: reference.shape().to_vec(),
        });
    }
    let mse = img.data().iter().zip(reference.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / img.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (4.0 / mse).log10()).min(PSNR_CAP))
}

pub fn image_stats(img: &Tensor<f64>, reference: Option<&Tensor<f64>>) -> Result<ImageStats> {
    Ok(ImageStats {
        chroma: chroma(img)?,
        sharpness: sharpness(img)?,
        psnr: reference.map(|r| psnr(img, r)).transpose()?,
    })
}

/// Conv-stack encoder trained once to reconstruct ground-truth images, then
/// frozen and shared by every method under evaluation.
#[derive(Debug, Clone)]
pub struct EvalEncoder {
    store: ParamStore<f32>,
    encoder: Encoder,
}

/// Settings of the evaluation encoder's reconstruction training.
#[derive(Debug, Clone, Copy)]
pub struct EvalEncoderConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for EvalEncoderConfig {
    fn default() -> Self {
        EvalEncoderConfig {
            iterations: 300,
            batch_size: 16,
            lr: 1e-3,
            seed: 1234,
        }
    }
}

impl EvalEncoder {
    /// Trains encoder plus a mirrored transposed-conv decoder with an L1
    /// reconstruction loss on the targets of `data`.
    pub fn train(data: &Dataset, cfg: EvalEncoderConfig) -> Result<Self> {
        let spec = EncoderSpec {
            kind: EncoderKind::ConvStack,
            frozen: false,
            ..EncoderSpec::default()
        };
        let mut store = ParamStore::<f32>::new();
        let encoder = Encoder::new(spec.clone(), &mut store, &mut derive_rng(cfg.seed, streams::EVAL, 0))?;
        let mut rng = derive_rng(cfg.seed, streams::EVAL, 1);
        let mut chans: Vec<usize> = spec.channels.iter().rev().cloned().collect();
        chans.push(spec.in_channels);
        let mut decoder: Vec<ParamId> = Vec::new();
        for (i, w) in chans.windows(2).enumerate() {
            let t = kaiming_uniform(&[w[0], 4, 4, w[1]], 4 * w[0], 2f64.sqrt(), &mut rng);
            decoder.push(store.add(format!("dec.{i}.w"), t)?);
        }
        let ids: Vec<ParamId> = store.ids().collect();
        let mut opt = Adam::new(
            AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
            &store,
            ids,
        );
        let schedule = crate::data::BatchSchedule::new(data.len(), cfg.batch_size, cfg.seed, false)?;
        let top = *spec.taps.last().expect("taps");
        for it in 0..cfg.iterations {
            let (idx, flips) = schedule.batch_at(it);
            let batch = data.gather::<f32>(&idx, &flips)?;
            let mut tape = Tape::new();
            let y = tape.constant(batch.y.clone());
            let mut h = y;
            for l in 0..top {
                let w = tape.param(&store, store.id(&format!("f.conv{l}.weight")).expect("layer"), true);
                let b = tape.param(&store, store.id(&format!("f.conv{l}.bias")).expect("layer"), true);
                h = tape.conv2d(h, w, 2, 1)?;
                h = tape.add(h, b)?;
                h = tape.leaky_relu(h, crate::encoders::LEAKY_SLOPE)?;
                h = tape.instance_norm(h, crate::encoders::INSTANCE_NORM_EPS)?;
            }
            for (i, &id) in decoder.iter().enumerate() {
                let w = tape.param(&store, id, true);
                h = tape.conv_transpose2d(h, w, 2, 1)?;
                h = if i + 1 < decoder.len() { tape.relu(h)? } else { tape.tanh(h)? };
            }
            let diff = tape.sub(h, y)?;
            let abs = tape.abs(diff)?;
            let loss = tape.mean_all(abs)?;
            tape.backward(loss)?;
            opt.step(&mut store, &tape.param_grads())?;
        }
        Ok(EvalEncoder { store, encoder })
    }

    /// Features of NHWC images, converted to f64 per tap `(N, S_l, D_l)`.
    pub fn features(&self, images: &Tensor<f32>) -> Result<Vec<Tensor<f64>>> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let FeatureStack { taps } = self.encoder.encode(&mut tape, &self.store, x)?;
        Ok(taps.into_iter().map(|t| tape.value(t).cast()).collect())
    }
}

/// Rows `indices` of image `n` of a `(N, S, D)` tensor, L2-normalized.
fn normalized_rows(t: &Tensor<f64>, n: usize, indices: &[usize]) -> Tensor<f64> {
    let (s, d) = (t.shape()[1], t.shape()[2]);
    let mut out = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        let row = &t.data()[(n * s + i) * d..(n * s + i + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        out.extend(row.iter().map(|v| v / norm));
    }
    Tensor::new(&[indices.len(), d], out).expect("row shape")
}

/// Evaluation results.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, f64>,
    pub samples: usize,
    pub config_hash: String,
    pub iteration: u64,
}

impl EvalReport {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).copied()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "config_hash = {}", self.config_hash).unwrap();
        writeln!(s, "iteration = {}", self.iteration).unwrap();
        writeln!(s, "samples = {}", self.samples).unwrap();
        for (k, v) in &self.metrics {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec!["config_hash".to_string(), "iteration".into(), "samples".into()];
        cols.extend(self.metrics.keys().cloned());
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.config_hash.clone(), self.iteration.to_string(), self.samples.to_string()];
        cols.extend(self.metrics.values().map(f64::to_string));
        cols.join(",")
    }

    /// Writes the key=value report and appends a row to `csv` (creating it
    /// with a header when absent).
    pub fn write(&self, out: &Path, csv: Option<&Path>) -> Result<()> {
        std::fs::write(out, self.to_text())?;
        if let Some(csv) = csv {
            let mut text = if csv.exists() {
                std::fs::read_to_string(csv)?
            } else {
                format!("{}\n", self.csv_header())
            };
            text.push_str(&self.csv_row());
            text.push('\n');
            std::fs::write(csv, text)?;
        }
        Ok(())
    }
}

/// Hex SHA-256 of the canonical config text.
pub fn config_hash(cfg: &TrainConfig) -> String {
    Sha256::digest(cfg.to_text().as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Options of [`evaluate`].
#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    /// Locations per tap for retrieval scoring.
    pub n_patches: usize,
    pub tau: f64,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            n_patches: 64,
            tau: 0.07,
            seed: 99,
            batch_size: 32,
        }
    }
}

/// Scores a set of predictions against its references.
///
/// Retrieval is computed per sample and per evaluation-encoder tap with at
/// least two locations, then averaged. FFD compares the distributions of
/// top-tap location features of predictions and references.
pub fn score_predictions(
    preds: &[Tensor<f64>],
    refs: &[Tensor<f64>],
    eval: &EvalEncoder,
    opts: EvalOptions,
) -> Result<BTreeMap<String, f64>> {
    if preds.len() != refs.len() || preds.is_empty() {
        return Err(Error::invalid("evaluate", "predictions and references must pair up"));
    }
    let n = preds.len();
    let (mut chroma_sum, mut sharp_sum, mut psnr_sum, mut ref_chroma) = (0.0, 0.0, 0.0, 0.0);
    for (p, r) in preds.iter().zip(refs) {
        let st = image_stats(p, Some(r))?;
        chroma_sum += st.chroma;
        sharp_sum += st.sharpness;
        psnr_sum += st.psnr.unwrap_or(PSNR_CAP);
        ref_chroma += chroma(r)?;
    }
    let policy = SamplerPolicy {
        n_patches: opts.n_patches,
        ..SamplerPolicy::default()
    };
    let mut top_pred = Vec::new();
    let mut top_ref = Vec::new();
    let mut retrieval = Vec::new();
    let mut layer_scores: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for start in (0..n).step_by(opts.batch_size.max(1)) {
        let end = (start + opts.batch_size.max(1)).min(n);
        let to_batch = |items: &[Tensor<f64>]| -> Result<Tensor<f32>> {
            Tensor::stack(&items.iter().map(|t| t.cast::<f32>()).collect::<Vec<_>>())
        };
        let fp = eval.features(&to_batch(&preds[start..end])?)?;
        let fr = eval.features(&to_batch(&refs[start..end])?)?;
        for k in 0..end - start {
            let mut rng = derive_rng(opts.seed, streams::EVAL, (start + k) as u64);
            for (l, (a, b)) in fp.iter().zip(&fr).enumerate() {
                let s = a.shape()[1];
                if s < 2 {
                    continue;
                }
                let idx = sample_locations(s, &policy, &mut rng);
                let acc = retrieval_accuracy(&normalized_rows(a, k, &idx), &normalized_rows(b, k, &idx), opts.tau)?;
                let e = layer_scores.entry(l).or_insert((0.0, 0));
                e.0 += acc;
                e.1 += 1;
                retrieval.push(acc);
            }
            let top_a = fp.last().expect("taps");
            let top_b = fr.last().expect("taps");
            top_pred.extend(location_rows(top_a, k));
            top_ref.extend(location_rows(top_b, k));
        }
    }
    let mut m = BTreeMap::new();
    m.insert("chroma".into(), chroma_sum / n as f64);
    m.insert("reference_chroma".into(), ref_chroma / n as f64);
    m.insert("sharpness".into(), sharp_sum / n as f64);
    m.insert("psnr".into(), psnr_sum / n as f64);
    m.insert("retrieval".into(), retrieval.iter().sum::<f64>() / retrieval.len().max(1) as f64);
    for (l, (sum, count)) in layer_scores {
        m.insert(format!("retrieval_tap{l}"), sum / count as f64);
    }
    if top_pred.len() > top_pred[0].len() {
        let a = GaussianStats::from_rows(&top_pred)?;
        let b = GaussianStats::from_rows(&top_ref)?;
        m.insert("ffd".into(), frechet_feature_distance(&a, &b)?);
    }
    Ok(m)
}

/// Feature vectors at every location of sample `n`.
fn location_rows(t: &Tensor<f64>, n: usize) -> Vec<Vec<f64>> {
    let (s, d) = (t.shape()[1], t.shape()[2]);
    t.data()[n * s * d..(n + 1) * s * d].chunks(d).map(<[f64]>::to_vec).collect()
}

/// Runs the generator of `model` over `data` and scores the outputs.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    cfg: &TrainConfig,
    iteration: u64,
    data: &Dataset,
    eval: &EvalEncoder,
    opts: EvalOptions,
) -> Result<EvalReport> {
    let mut preds = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(opts.batch_size.max(1)) {
        let batch = data.gather::<T>(chunk, &[])?;
        let out = model.generate(&batch.x)?;
        for k in 0..chunk.len() {
            preds.push(out.slice_leading(k)?.cast::<f64>());
        }
    }
    let refs: Vec<Tensor<f64>> = data.samples.iter().map(|s| s.y.clone()).collect();
    let metrics = score_predictions(&preds, &refs, eval, opts)?;
    Ok(EvalReport {
        metrics,
        samples: data.len(),
        config_hash: config_hash(cfg),
        iteration,
    })
}
