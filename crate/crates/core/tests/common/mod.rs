#![allow(dead_code)]

use nalgebra::DMatrix;
use patchnce::encoders::FeatureStack;
use patchnce::losses::{feature_matching_loss, patchnce_loss, LossVariant, Reduction};
use patchnce::sampler::{LayerEmbeddings, NegativeSource, PatchEmbeddingSet};
use patchnce::{Tape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Embeddings per layer as (N, m, E) row-major data.
#[derive(Debug, Clone)]
pub struct Sets {
    pub n: usize,
    pub m: usize,
    pub e: usize,
    pub layers: Vec<Vec<f64>>,
}

pub fn normalize_rows(data: &mut [f64], e: usize) {
    for row in data.chunks_mut(e) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
}

pub fn random_sets(rng: &mut ChaCha8Rng, layers: usize, n: usize, m: usize, e: usize) -> Sets {
    let layers = (0..layers)
        .map(|_| {
            let mut d: Vec<f64> = (0..n * m * e).map(|_| rng.gen_range(-1.0..1.0)).collect();
            normalize_rows(&mut d, e);
            d
        })
        .collect();
    Sets { n, m, e, layers }
}

/// One image per layer with pairwise cosine at most `max_cos`, by
/// rejection.
pub fn separated_sets(rng: &mut ChaCha8Rng, layers: usize, m: usize, e: usize, max_cos: f64) -> Sets {
    let layers = (0..layers)
        .map(|_| {
            let mut rows: Vec<Vec<f64>> = Vec::with_capacity(m);
            while rows.len() < m {
                let mut v: Vec<f64> = (0..e).map(|_| rng.gen_range(-1.0..1.0)).collect();
                normalize_rows(&mut v, e);
                if rows.iter().all(|r| r.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() <= max_cos) {
                    rows.push(v);
                }
            }
            rows.concat()
        })
        .collect();
    Sets { n: 1, m, e, layers }
}

pub fn map_rows(s: &Sets, q: &DMatrix<f64>) -> Sets {
    let layers = s
        .layers
        .iter()
        .map(|d| {
            d.chunks(s.e)
                .flat_map(|row| (0..s.e).map(move |i| (0..s.e).map(|j| q[(i, j)] * row[j]).sum::<f64>()))
                .collect()
        })
        .collect();
    Sets { layers, ..s.clone() }
}

pub fn random_orthogonal(rng: &mut ChaCha8Rng, e: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(e, e, |_, _| rng.gen_range(-1.0..1.0));
    a.qr().q()
}

pub fn signed_permutation(rng: &mut ChaCha8Rng, e: usize) -> DMatrix<f64> {
    let mut perm: Vec<usize> = (0..e).collect();
    for i in (1..e).rev() {
        perm.swap(i, rng.gen_range(0..=i));
    }
    DMatrix::from_fn(e, e, |i, j| {
        if perm[i] == j {
            if rng.gen_bool(0.5) {
                1.0
            } else {
                -1.0
            }
        } else {
            0.0
        }
    })
}

pub fn to_set(tape: &mut Tape<f64>, s: &Sets) -> PatchEmbeddingSet {
    PatchEmbeddingSet {
        layers: s
            .layers
            .iter()
            .map(|d| LayerEmbeddings {
                indices: (0..s.m).collect(),
                embeddings: tape.constant(Tensor::new(&[s.n, s.m, s.e], d.clone()).unwrap()),
            })
            .collect(),
    }
}

pub fn nce(gen: &Sets, gt: &Sets, tau: f64, variant: LossVariant) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let (a, b) = (to_set(&mut tape, gen), to_set(&mut tape, gt));
    let out = patchnce_loss(&mut tape, &a, &b, tau, variant, NegativeSource::SameImage, Reduction::PerLayerMean).unwrap();
    (tape.value(out.total).item(), out.retrieval)
}

pub fn fm(gen: &Sets, gt: &Sets, p: u8) -> f64 {
    let mut tape = Tape::new();
    let stack = |tape: &mut Tape<f64>, s: &Sets| FeatureStack {
        taps: s
            .layers
            .iter()
            .map(|d| tape.constant(Tensor::new(&[s.n, s.m, s.e], d.clone()).unwrap()))
            .collect(),
    };
    let (a, b) = (stack(&mut tape, gen), stack(&mut tape, gt));
    let v = feature_matching_loss(&mut tape, &a, &b, p).unwrap();
    tape.value(v).item()
}

pub const VARIANTS: [LossVariant; 2] = [LossVariant::StandardNce, LossVariant::BidirectionalNce];
