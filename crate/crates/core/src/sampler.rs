//! Spatial location sampling and assembly of paired embedding sets.

use rand::Rng;

use crate::encoders::{FeatureStack, ProjectionHead};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

/// Where the negatives of a query come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeSource {
    /// Other sampled locations of the same image.
    SameImage,
    /// Other sampled locations of every image in the batch.
    SameBatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerPolicy {
    /// Locations sampled per layer.
    pub n_patches: usize,
    pub negatives: NegativeSource,
    /// Random stream id mixed into the training seed.
    pub stream: u64,
}

impl Default for SamplerPolicy {
    fn default() -> Self {
        SamplerPolicy {
            n_patches: 256,
            negatives: NegativeSource::SameImage,
            stream: 2,
        }
    }
}

impl SamplerPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.n_patches < 2 {
            return Err(Error::Config(format!(
                "sampler.n_patches must be at least 2, got {}",
                self.n_patches
            )));
        }
        Ok(())
    }

    /// Policy whose patch budget is split equally over `layers` layers,
    /// keeping at least two per layer.
    pub fn split_across(&self, layers: usize) -> SamplerPolicy {
        SamplerPolicy {
            n_patches: (self.n_patches / layers.max(1)).max(2),
            ..self.clone()
        }
    }
}

/// `min(n, count)` distinct indices in `0..count`, uniform without
/// replacement.
pub fn sample_locations(count: usize, policy: &SamplerPolicy, rng: &mut impl Rng) -> Vec<usize> {
    let amount = policy.n_patches.min(count);
    rand::seq::index::sample(rng, count, amount).into_vec()
}

/// Number of crops of `size` at `stride` along an axis of length `extent`.
fn crops_along(extent: usize, size: usize, stride: usize) -> usize {
    (extent - size) / stride + 1
}

/// Flattened `size x size x C` crops of NHWC images on the stride grid,
/// returned as `(N, P, size*size*C)` with crops in row-major grid order.
pub fn extract_pixel_patches<T: Scalar>(tape: &mut Tape<T>, images: Var, scale: (usize, usize)) -> Result<Var> {
    let (size, stride) = scale;
    let s = tape.shape(images).to_vec();
    if s.len() != 4 {
        return Err(Error::invalid("extract_pixel_patches", format!("expected NHWC, got {s:?}")));
    }
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    if size == 0 || stride == 0 || size > h.min(w) {
        return Err(Error::invalid(
            "extract_pixel_patches",
            format!("patch {size} with stride {stride} does not fit a {h}x{w} image"),
        ));
    }
    let (ph, pw) = (crops_along(h, size, stride), crops_along(w, size, stride));
    let mut indices = Vec::with_capacity(ph * pw * size * size);
    for py in 0..ph {
        for px in 0..pw {
            for dy in 0..size {
                for dx in 0..size {
                    indices.push((py * stride + dy) * w + px * stride + dx);
                }
            }
        }
    }
    let flat = tape.reshape(images, &[n, h * w, c])?;
    let gathered = tape.index_select(flat, 1, &indices)?;
    tape.reshape(gathered, &[n, ph * pw, size * size * c])
}

/// Embeddings of one image batch at the sampled locations of each layer.
#[derive(Debug, Clone)]
pub struct PatchEmbeddingSet {
    pub layers: Vec<LayerEmbeddings>,
}

#[derive(Debug, Clone)]
pub struct LayerEmbeddings {
    pub indices: Vec<usize>,
    /// Unit rows, shape `(N, m, E)` with `m = indices.len()`.
    pub embeddings: Var,
}

impl PatchEmbeddingSet {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Checks that `other` was sampled at the same locations.
    pub fn check_paired(&self, other: &PatchEmbeddingSet) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::invalid(
                "patch sets",
                format!("{} layers vs {}", self.layers.len(), other.layers.len()),
            ));
        }
        for (l, (a, b)) in self.layers.iter().zip(&other.layers).enumerate() {
            if a.indices != b.indices {
                return Err(Error::invalid("patch sets", format!("layer {l} sampled at different locations")));
            }
        }
        Ok(())
    }
}

/// Samples one index list per layer, shared by the whole batch and by both
/// images of each pair, and projects the selected features.
pub fn build_pair_sets<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    gen: &FeatureStack,
    gt: &FeatureStack,
    head: &ProjectionHead,
    policy: &SamplerPolicy,
    rng: &mut impl Rng,
) -> Result<(PatchEmbeddingSet, PatchEmbeddingSet)> {
    if gen.len() != gt.len() || gen.len() != head.num_layers() {
        return Err(Error::invalid(
            "build_pair_sets",
            format!(
                "{} generated taps, {} ground-truth taps, {} heads",
                gen.len(),
                gt.len(),
                head.num_layers()
            ),
        ));
    }
    let mut gen_set = Vec::with_capacity(gen.len());
    let mut gt_set = Vec::with_capacity(gt.len());
    for (l, (&a, &b)) in gen.taps.iter().zip(&gt.taps).enumerate() {
        let (sa, sb) = (tape.shape(a).to_vec(), tape.shape(b).to_vec());
        if sa != sb || sa.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "build_pair_sets",
                lhs: sa,
                rhs: sb,
            });
        }
        let indices = sample_locations(sa[1], policy, rng);
        for (feats, out) in [(a, &mut gen_set), (b, &mut gt_set)] {
            let picked = tape.index_select(feats, 1, &indices)?;
            let embeddings = head.project_batch(tape, store, l, picked)?;
            out.push(LayerEmbeddings {
                indices: indices.clone(),
                embeddings,
            });
        }
    }
    Ok((PatchEmbeddingSet { layers: gen_set }, PatchEmbeddingSet { layers: gt_set }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::HeadSpec;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn policy(n: usize) -> SamplerPolicy {
        SamplerPolicy {
            n_patches: n,
            ..SamplerPolicy::default()
        }
    }

    #[test]
    fn exhausts_small_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut idx = sample_locations(4, &policy(1024), &mut rng);
        idx.sort_unstable();
        assert_eq!(idx, vec![0, 1, 2, 3]);
    }

    #[test]
    fn reproducible_under_seed() {
        let a = sample_locations(1024, &policy(256), &mut ChaCha8Rng::seed_from_u64(5));
        let b = sample_locations(1024, &policy(256), &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        let mut u = a.clone();
        u.sort_unstable();
        u.dedup();
        assert_eq!(u.len(), 256);
    }

    #[test]
    fn single_draw_frequencies_are_uniform() {
        let (count, draws) = (8usize, 10_000usize);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut hits = vec![0usize; count];
        for _ in 0..draws {
            hits[sample_locations(count, &policy(1), &mut rng)[0]] += 1;
        }
        let p = 1.0 / count as f64;
        let sigma = (p * (1.0 - p) / draws as f64).sqrt();
        for h in hits {
            assert!((h as f64 / draws as f64 - p).abs() <= 3.0 * sigma);
        }
    }

    fn image(n: usize, f: impl Fn(usize) -> f64) -> (Tape<f64>, Var) {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::from_fn(&[n, 32, 32, 3], f));
        (tape, v)
    }

    #[test]
    fn pixel_patch_shapes() {
        let (mut tape, img) = image(1, |i| i as f64 / 3072.0);
        let p = extract_pixel_patches(&mut tape, img, (4, 2)).unwrap();
        assert_eq!(tape.shape(p), &[1, 225, 48]);
        let whole = extract_pixel_patches(&mut tape, img, (32, 16)).unwrap();
        assert_eq!(tape.shape(whole), &[1, 1, 3072]);
        assert_eq!(tape.value(whole).data(), tape.value(img).data());
        assert!(extract_pixel_patches(&mut tape, img, (33, 1)).is_err());
    }

    #[test]
    fn pixel_patch_content() {
        let (mut tape, img) = image(1, |i| i as f64);
        let p = extract_pixel_patches(&mut tape, img, (4, 2)).unwrap();
        // Crop (row 1, col 2) starts at pixel (2, 4); first row of crop.
        let row = &tape.value(p).data()[(15 + 2) * 48..(15 + 2) * 48 + 12];
        let start = (2 * 32 + 4) * 3;
        let expected: Vec<f64> = (start..start + 12).map(|i| i as f64).collect();
        assert_eq!(row, &expected[..]);
    }

    #[test]
    fn constant_image_gives_identical_rows() {
        let (mut tape, img) = image(1, |_| 0.25);
        let p = extract_pixel_patches(&mut tape, img, (8, 4)).unwrap();
        let rows: Vec<&[f64]> = tape.value(p).data().chunks(192).collect();
        assert!(rows.windows(2).all(|w| w[0] == w[1]));
    }

    fn stack(tape: &mut Tape<f64>, n: usize, seed: u64) -> FeatureStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let taps = [(64usize, 3usize), (16, 5)]
            .iter()
            .map(|&(s, d)| tape.constant(Tensor::from_fn(&[n, s, d], |_| rng.gen_range(-1.0..1.0))))
            .collect();
        FeatureStack { taps }
    }

    #[test]
    fn pair_sets_share_indices_and_identical_inputs_match() {
        let mut tape = Tape::new();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = ProjectionHead::new(HeadSpec { embed_dim: 8, mlp: false }, &[3, 5], &mut store, &mut rng).unwrap();
        let gen = stack(&mut tape, 2, 1);
        let (g, t) = build_pair_sets(&mut tape, &store, &gen, &gen, &head, &policy(10), &mut rng).unwrap();
        g.check_paired(&t).unwrap();
        assert_eq!(g.layers[0].indices.len(), 10);
        for (a, b) in g.layers.iter().zip(&t.layers) {
            let (va, vb) = (tape.value(a.embeddings), tape.value(b.embeddings));
            for (x, y) in va.data().chunks(8).zip(vb.data().chunks(8)) {
                let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                assert!((dot - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn mismatched_taps_are_rejected() {
        let mut tape = Tape::new();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = ProjectionHead::new(HeadSpec::default(), &[3, 5], &mut store, &mut rng).unwrap();
        let gen = stack(&mut tape, 2, 1);
        let gt = stack(&mut tape, 1, 2);
        assert!(build_pair_sets(&mut tape, &store, &gen, &gt, &head, &policy(10), &mut rng).is_err());
    }

    #[test]
    fn split_keeps_two_per_layer() {
        assert_eq!(policy(1024).split_across(4).n_patches, 256);
        assert_eq!(policy(3).split_across(4).n_patches, 2);
    }
}
