//! Training objectives: contrastive (standard and bidirectional), feature
//! matching, conditional GAN terms, and their weighted combination.

use crate::encoders::FeatureStack;
use crate::error::{Error, Result};
use crate::sampler::{NegativeSource, PatchEmbeddingSet};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Logits fed to the GAN losses are clamped to this magnitude.
pub const LOGIT_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossVariant {
    StandardNce,
    BidirectionalNce,
    FeatureMatching,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GanKind {
    Vanilla,
    Hinge,
}

/// How location sums are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Each layer's sum divided by its sampled location count.
    PerLayerMean,
    /// Unnormalized sum over layers and locations.
    RawSum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub variant: LossVariant,
    pub temperature: f64,
    /// Norm of the feature-matching distance, 1 or 2.
    pub fm_norm: u8,
    pub nce_weight: f64,
    pub gan_enabled: bool,
    pub gan_weight: f64,
    pub gan_kind: GanKind,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            variant: LossVariant::BidirectionalNce,
            temperature: 0.07,
            fm_norm: 1,
            nce_weight: 1.0,
            gan_enabled: false,
            gan_weight: 1.0,
            gan_kind: GanKind::Vanilla,
            reduction: Reduction::PerLayerMean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("loss.temperature must be positive, got {}", self.temperature)));
        }
        if self.fm_norm != 1 && self.fm_norm != 2 {
            return Err(Error::Config(format!("loss.fm_norm must be 1 or 2, got {}", self.fm_norm)));
        }
        if self.nce_weight < 0.0 || self.gan_weight < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if !self.main_enabled() && !self.gan_active() {
            return Err(Error::Config("every loss term has zero weight".into()));
        }
        Ok(())
    }

    /// Whether the contrastive or feature-matching term contributes.
    pub fn main_enabled(&self) -> bool {
        self.nce_weight > 0.0
    }

    pub fn gan_active(&self) -> bool {
        self.gan_enabled && self.gan_weight > 0.0
    }

    pub fn is_contrastive(&self) -> bool {
        matches!(self.variant, LossVariant::StandardNce | LossVariant::BidirectionalNce)
    }
}

/// One training step's scalar values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    /// Contrastive value of each layer under the configured reduction.
    pub nce_per_layer: Vec<f64>,
    /// Contrastive value of each layer per sampled location.
    pub nce_per_location: Vec<f64>,
    pub nce: Option<f64>,
    pub feature_matching: Option<f64>,
    pub gan_g: Option<f64>,
    pub gan_d: Option<f64>,
    /// Per layer fraction of generated queries whose positive logit is the
    /// strict maximum.
    pub retrieval: Vec<f64>,
}

impl LossReport {
    /// Mean retrieval accuracy over layers that were scored.
    pub fn retrieval_mean(&self) -> Option<f64> {
        if self.retrieval.is_empty() {
            None
        } else {
            Some(self.retrieval.iter().sum::<f64>() / self.retrieval.len() as f64)
        }
    }
}

/// `-log softmax` of the positive among `{positive} U negatives`, logits
/// `dot / tau`. `query` and `positive` are `(E,)` or `(1, E)`, negatives
/// `(K, E)`.
pub fn nce_term<T: Scalar>(tape: &mut Tape<T>, query: Var, positive: Var, negatives: Var, tau: f64) -> Result<Var> {
    let ns = tape.shape(negatives).to_vec();
    if ns.len() != 2 || ns[0] == 0 {
        return Err(Error::invalid("nce_term", format!("need a (K>=1, E) negative matrix, got {ns:?}")));
    }
    let e = ns[1];
    for v in [query, positive] {
        if tape.value(v).numel() != e {
            return Err(Error::ShapeMismatch {
                op: "nce_term",
                lhs: tape.shape(v).to_vec(),
                rhs: ns.clone(),
            });
        }
        let norm = tape.value(v).l2_norm();
        if (norm - 1.0).abs() > 1e-3 {
            log::warn!("nce_term input has norm {norm:.6}, expected unit vectors");
        }
    }
    let q = tape.reshape(query, &[1, e])?;
    let p = tape.reshape(positive, &[1, e])?;
    let pt = tape.transpose(p)?;
    let pos = tape.matmul(q, pt)?;
    let nt = tape.transpose(negatives)?;
    let neg = tape.matmul(q, nt)?;
    let logits = tape.concat(&[pos, neg], 1)?;
    let logits = tape.scale(logits, 1.0 / tau)?;
    let lse = tape.log_sum_exp(logits, 1)?;
    let pos = tape.reshape(pos, &[1])?;
    let pos = tape.scale(pos, 1.0 / tau)?;
    let out = tape.sub(lse, pos)?;
    tape.reshape(out, &[])
}

/// Negatives each query sees for a layer of `m` sampled locations.
pub fn negatives_per_query(m: usize, batch: usize, source: NegativeSource) -> usize {
    match source {
        NegativeSource::SameImage => m.saturating_sub(1),
        NegativeSource::SameBatch => (batch * m).saturating_sub(1),
    }
}

/// Output of [`patchnce_loss`].
#[derive(Debug, Clone)]
pub struct NceOutput {
    /// Sum over layers, averaged over the batch.
    pub total: Var,
    pub per_layer: Vec<f64>,
    pub per_location: Vec<f64>,
    pub retrieval: Vec<f64>,
}

/// Row-wise contrastive losses: query `i` against `positives[i]`, with the
/// rows `j != i` of `negatives` as its negatives. `positives` and
/// `negatives` must hold the same values; they are separate so callers can
/// route the two roles differently. With `detach_negatives` no gradient
/// reaches `negatives`. Returns the summed loss and the number of queries
/// whose positive strictly wins.
pub fn contrastive_rows<T: Scalar>(
    tape: &mut Tape<T>,
    queries: Var,
    positives: Var,
    negatives: Var,
    detach_negatives: bool,
    tau: f64,
) -> Result<(Var, usize)> {
    let (qs, ps, ns) = (tape.shape(queries).to_vec(), tape.shape(positives).to_vec(), tape.shape(negatives).to_vec());
    if qs.len() != 2 || qs != ps || qs != ns {
        return Err(Error::ShapeMismatch {
            op: "contrastive_rows",
            lhs: qs,
            rhs: if ps != ns { ns } else { ps },
        });
    }
    let m = qs[0];
    let qs = tape.scale(queries, 1.0 / tau)?;
    let prod = tape.mul(qs, positives)?;
    let pos = tape.sum(prod, &[1])?;
    let neg_keys = if detach_negatives {
        tape.stop_gradient(negatives)
    } else {
        negatives
    };
    let kt = tape.transpose(neg_keys)?;
    // Row i holds the positive at column i and the negatives elsewhere.
    let logits = tape.matmul(qs, kt)?;
    let lse = tape.log_sum_exp(logits, 1)?;
    let mut rows = tape.sub(lse, pos)?;
    if detach_negatives {
        // The detached logits drop the positive's gradient w.r.t. its key:
        // add softmax_ii * (d_i - sg(d_i)), zero in value.
        let weights = {
            let (lv, sv) = (tape.value(logits).data(), tape.value(lse).data());
            Tensor::from_fn(&[m], |i| (lv[i * m + i] - sv[i]).exp())
        };
        let qd = tape.stop_gradient(qs);
        let dp = tape.mul(qd, positives)?;
        let d = tape.sum(dp, &[1])?;
        let d_const = tape.stop_gradient(d);
        let delta = tape.sub(d, d_const)?;
        let w = tape.constant(weights);
        let corr = tape.mul(delta, w)?;
        rows = tape.add(rows, corr)?;
    }
    let loss = tape.sum_all(rows)?;
    let wins = tape
        .value(logits)
        .data()
        .chunks(m)
        .enumerate()
        .filter(|(i, row)| row.iter().enumerate().all(|(j, &v)| j == *i || row[*i] > v))
        .count();
    Ok((loss, wins))
}

/// Vectorized patchwise contrastive loss between paired embedding sets.
///
/// Standard: every query from `gen` against the `gt` key at its location,
/// with the other `gt` keys as negatives. Bidirectional: the mean of that
/// direction and the reversed one, with stop-gradient on the negatives of
/// each. Groups with fewer than two members are skipped.
pub fn patchnce_loss<T: Scalar>(
    tape: &mut Tape<T>,
    gen: &PatchEmbeddingSet,
    gt: &PatchEmbeddingSet,
    tau: f64,
    variant: LossVariant,
    negatives: NegativeSource,
    reduction: Reduction,
) -> Result<NceOutput> {
    gen.check_paired(gt)?;
    if variant == LossVariant::FeatureMatching {
        return Err(Error::invalid("patchnce_loss", "feature matching is not a contrastive variant"));
    }
    let mut layer_vars = Vec::new();
    let mut per_layer = Vec::new();
    let mut per_location = Vec::new();
    let mut retrieval = Vec::new();
    for (a, b) in gen.layers.iter().zip(&gt.layers) {
        let s = tape.shape(a.embeddings).to_vec();
        if tape.shape(b.embeddings) != s.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "patchnce_loss",
                lhs: s,
                rhs: tape.shape(b.embeddings).to_vec(),
            });
        }
        let (n, m, e) = (s[0], s[1], s[2]);
        let groups: Vec<(Var, Var)> = match negatives {
            NegativeSource::SameImage => {
                let mut out = Vec::with_capacity(n);
                for i in 0..n {
                    let mut pick = |v: Var| -> Result<Var> {
                        let one = tape.index_select(v, 0, &[i])?;
                        tape.reshape(one, &[m, e])
                    };
                    let q = pick(a.embeddings)?;
                    let k = pick(b.embeddings)?;
                    out.push((q, k));
                }
                out
            }
            NegativeSource::SameBatch => {
                let q = tape.reshape(a.embeddings, &[n * m, e])?;
                let k = tape.reshape(b.embeddings, &[n * m, e])?;
                vec![(q, k)]
            }
        };
        let group_len = tape.shape(groups[0].0)[0];
        if group_len < 2 {
            continue;
        }
        let mut sums = Vec::with_capacity(groups.len());
        let mut wins = 0;
        for (q, k) in groups {
            let term = match variant {
                LossVariant::StandardNce => {
                    let (l, w) = contrastive_rows(tape, q, k, k, false, tau)?;
                    wins += w;
                    l
                }
                _ => {
                    let (fwd, w) = contrastive_rows(tape, q, k, k, true, tau)?;
                    let (rev, _) = contrastive_rows(tape, k, q, q, true, tau)?;
                    wins += w;
                    let both = tape.add(fwd, rev)?;
                    tape.scale(both, 0.5)?
                }
            };
            sums.push(term);
        }
        let layer_sum = if sums.len() == 1 {
            sums[0]
        } else {
            let cols = sums
                .iter()
                .map(|&v| tape.reshape(v, &[1]))
                .collect::<Result<Vec<_>>>()?;
            let stacked = tape.concat(&cols, 0)?;
            tape.sum_all(stacked)?
        };
        let divisor = match reduction {
            Reduction::PerLayerMean => (n * m) as f64,
            Reduction::RawSum => n as f64,
        };
        let layer = tape.scale(layer_sum, 1.0 / divisor)?;
        let raw = tape.value(layer_sum).item().as_f64();
        per_layer.push(tape.value(layer).item().as_f64());
        per_location.push(raw / (n * m) as f64);
        retrieval.push(wins as f64 / (n * m) as f64);
        layer_vars.push(layer);
    }
    let total = match layer_vars.len() {
        0 => return Err(Error::invalid("patchnce_loss", "no layer has two or more sampled locations")),
        1 => layer_vars[0],
        _ => {
            let cols = layer_vars
                .iter()
                .map(|&v| tape.reshape(v, &[1]))
                .collect::<Result<Vec<_>>>()?;
            let stacked = tape.concat(&cols, 0)?;
            tape.sum_all(stacked)?
        }
    };
    Ok(NceOutput {
        total,
        per_layer,
        per_location,
        retrieval,
    })
}

/// `sum_l mean_s ||gen_l[s] - gt_l[s]||_p / L`, averaged over the batch.
pub fn feature_matching_loss<T: Scalar>(tape: &mut Tape<T>, gen: &FeatureStack, gt: &FeatureStack, p: u8) -> Result<Var> {
    if gen.len() != gt.len() || gen.is_empty() {
        return Err(Error::invalid(
            "feature_matching_loss",
            format!("{} vs {} layers", gen.len(), gt.len()),
        ));
    }
    let mut layers = Vec::with_capacity(gen.len());
    for (&a, &b) in gen.taps.iter().zip(&gt.taps) {
        let diff = tape.sub(a, b)?;
        let s = tape.shape(diff).to_vec();
        if tape.shape(a) != tape.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "feature_matching_loss",
                lhs: tape.shape(a).to_vec(),
                rhs: tape.shape(b).to_vec(),
            });
        }
        let last = s.len() - 1;
        let dist = match p {
            1 => {
                let abs = tape.abs(diff)?;
                tape.sum(abs, &[last])?
            }
            2 => tape.l2_norm(diff, last)?,
            _ => return Err(Error::invalid("feature_matching_loss", format!("unsupported norm {p}"))),
        };
        let mean = tape.mean_all(dist)?;
        layers.push(tape.reshape(mean, &[1])?);
    }
    let stacked = tape.concat(&layers, 0)?;
    tape.mean_all(stacked)
}

/// Discriminator loss on real and fake logit maps.
///
/// Vanilla: `mean softplus(-z_real) + mean softplus(z_fake)`, the negative
/// log-likelihood of the sigmoid classifier. Hinge: `mean relu(1 - z_real)
/// + mean relu(1 + z_fake)`.
pub fn discriminator_loss<T: Scalar>(tape: &mut Tape<T>, real: Var, fake: Var, kind: GanKind) -> Result<Var> {
    let real = tape.clamp(real, -LOGIT_CLAMP, LOGIT_CLAMP)?;
    let fake = tape.clamp(fake, -LOGIT_CLAMP, LOGIT_CLAMP)?;
    let (r, f) = match kind {
        GanKind::Vanilla => {
            let nr = tape.scale(real, -1.0)?;
            (tape.softplus(nr)?, tape.softplus(fake)?)
        }
        GanKind::Hinge => {
            let one_r = tape.constant(Tensor::scalar(T::one()));
            let nr = tape.sub(one_r, real)?;
            let pf = tape.add(fake, one_r)?;
            (tape.relu(nr)?, tape.relu(pf)?)
        }
    };
    let r = tape.mean_all(r)?;
    let f = tape.mean_all(f)?;
    tape.add(r, f)
}

/// Non-saturating generator loss on fake logits: `mean softplus(-z)` for the
/// vanilla form, `-mean z` for hinge.
pub fn generator_gan_loss<T: Scalar>(tape: &mut Tape<T>, fake: Var, kind: GanKind) -> Result<Var> {
    let fake = tape.clamp(fake, -LOGIT_CLAMP, LOGIT_CLAMP)?;
    let neg = tape.scale(fake, -1.0)?;
    match kind {
        GanKind::Vanilla => {
            let sp = tape.softplus(neg)?;
            tape.mean_all(sp)
        }
        GanKind::Hinge => tape.mean_all(neg),
    }
}

/// Terms available for [`total_objective`].
#[derive(Debug, Clone, Default)]
pub struct LossParts {
    pub nce: Option<NceOutput>,
    pub feature_matching: Option<Var>,
    pub gan_g: Option<Var>,
    /// Discriminator loss from its own step, reported only.
    pub gan_d: Option<f64>,
}

fn weighted<T: Scalar>(tape: &mut Tape<T>, v: Var, w: f64) -> Result<Var> {
    if w == 1.0 {
        Ok(v)
    } else {
        tape.scale(v, w)
    }
}

/// `lambda_nce * main + lambda_gan * g_loss`, where `main` is the
/// contrastive or feature-matching term selected by the variant.
pub fn total_objective<T: Scalar>(tape: &mut Tape<T>, cfg: &LossConfig, parts: &LossParts) -> Result<(Var, LossReport)> {
    if !cfg.main_enabled() && !cfg.gan_active() {
        return Err(Error::Config("every loss term has zero weight".into()));
    }
    let mut report = LossReport {
        gan_d: parts.gan_d,
        ..LossReport::default()
    };
    let mut terms = Vec::new();
    if let Some(nce) = &parts.nce {
        report.nce = Some(tape.value(nce.total).item().as_f64());
        report.nce_per_layer = nce.per_layer.clone();
        report.nce_per_location = nce.per_location.clone();
        report.retrieval = nce.retrieval.clone();
    }
    if let Some(fm) = parts.feature_matching {
        report.feature_matching = Some(tape.value(fm).item().as_f64());
    }
    if let Some(g) = parts.gan_g {
        report.gan_g = Some(tape.value(g).item().as_f64());
    }
    if cfg.main_enabled() {
        let main = if cfg.is_contrastive() {
            parts.nce.as_ref().map(|n| n.total)
        } else {
            parts.feature_matching
        };
        let main = main.ok_or_else(|| Error::invalid("total_objective", "enabled main loss term is missing"))?;
        terms.push(weighted(tape, main, cfg.nce_weight)?);
    }
    if cfg.gan_active() {
        let g = parts
            .gan_g
            .ok_or_else(|| Error::invalid("total_objective", "GAN enabled but generator term missing"))?;
        terms.push(weighted(tape, g, cfg.gan_weight)?);
    }
    let total = match terms.as_slice() {
        [one] => *one,
        [a, b] => tape.add(*a, *b)?,
        _ => unreachable!("at most two weighted terms"),
    };
    report.total = tape.value(total).item().as_f64();
    Ok((total, report))
}
