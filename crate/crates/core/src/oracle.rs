//! Brute-force references: literal loop evaluations of the contrastive
//! losses with raw exponentials, and central finite-difference gradients.
//!
//! Nothing here calls into the tape or the vectorized loss path.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which contrastive objective the naive loop evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NaiveVariant {
    Standard,
    Bidirectional,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `-log(exp(q.p/tau) / (exp(q.p/tau) + sum_n exp(q.n/tau)))` with raw
/// exponentials.
pub fn naive_nce_term(query: &[f64], positive: &[f64], negatives: &[&[f64]], tau: f64) -> f64 {
    let num = (dot(query, positive) / tau).exp();
    let mut den = num;
    for neg in negatives {
        den += (dot(query, neg) / tau).exp();
    }
    -(num / den).ln()
}

/// Literal evaluation of the patchwise loss for one image pair.
///
/// `gen[l][s]` and `gt[l][s]` are the embeddings at sampled location `s` of
/// layer `l`. The negatives of location `s` are every other location of the
/// same layer. With `per_location_mean` each layer's sum is divided by its
/// location count. Layers with fewer than two locations contribute nothing.
pub fn naive_patchnce(
    gen: &[Vec<Vec<f64>>],
    gt: &[Vec<Vec<f64>>],
    tau: f64,
    variant: NaiveVariant,
    per_location_mean: bool,
) -> f64 {
    let mut total = 0.0;
    for l in 0..gen.len() {
        let count = gen[l].len();
        if count < 2 {
            continue;
        }
        let mut layer = 0.0;
        for s in 0..count {
            let mut gt_negs: Vec<&[f64]> = Vec::new();
            let mut gen_negs: Vec<&[f64]> = Vec::new();
            for n in 0..count {
                if n != s {
                    gt_negs.push(&gt[l][n]);
                    gen_negs.push(&gen[l][n]);
                }
            }
            let forward = naive_nce_term(&gen[l][s], &gt[l][s], &gt_negs, tau);
            layer += match variant {
                NaiveVariant::Standard => forward,
                NaiveVariant::Bidirectional => {
                    let reverse = naive_nce_term(&gt[l][s], &gen[l][s], &gen_negs, tau);
                    0.5 * (forward + reverse)
                }
            };
        }
        if per_location_mean {
            layer /= count as f64;
        }
        total += layer;
    }
    total
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every
/// coordinate of `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_diff_grad",
            });
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(x.shape(), grad)
}

/// Absolute differences at or below this are treated as agreement.
pub const ABS_FLOOR: f64 = 1e-8;

/// Worst elementwise relative error between two gradients; elements whose
/// absolute difference is within [`ABS_FLOOR`] count as exact.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let diff = (a - n).abs();
            if diff <= ABS_FLOOR {
                0.0
            } else {
                diff / a.abs().max(n.abs())
            }
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_terms() {
        let e1 = [1.0, 0.0, 0.0];
        let e2 = [0.0, 1.0, 0.0];
        let e3 = [0.0, 0.0, 1.0];
        let neg_e1 = [-1.0, 0.0, 0.0];
        let v = naive_nce_term(&e1, &e1, &[&neg_e1], 1.0);
        assert!((v - (1.0 + (-2f64).exp()).ln()).abs() < 1e-15);
        assert!((v - 0.126928).abs() < 1e-6);
        let v = naive_nce_term(&e1, &e2, &[&e3], 1.0);
        assert!((v - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn hand_computed_two_dim_case() {
        // One layer, two locations, 2-dim unit vectors, tau = 0.5.
        let c = std::f64::consts::FRAC_1_SQRT_2;
        let gen = vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]];
        let gt = vec![vec![vec![c, c], vec![0.0, 1.0]]];
        // s=0: q=(1,0), pos=(c,c), neg=(0,1): -log(e^{2c}/(e^{2c}+e^0))
        // s=1: q=(0,1), pos=(0,1), neg=(c,c): -log(e^{2}/(e^{2}+e^{2c}))
        let t0 = (1.0 + (-2.0 * c).exp()).ln();
        let t1 = (1.0 + (2.0 * c - 2.0).exp()).ln();
        let v = naive_patchnce(&gen, &gt, 0.5, NaiveVariant::Standard, false);
        assert!((v - (t0 + t1)).abs() < 1e-12);
        assert!((v - 0.660_169_300_120_263_9).abs() < 1e-12, "{v:.16}");
    }

    #[test]
    fn identity_sets_match_closed_form() {
        // l_id = -log(e^{1/tau} / (e^{1/tau} + sum_n e^{sim_n/tau}))
        let c = std::f64::consts::FRAC_1_SQRT_2;
        let set = vec![vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![c, c]]];
        let tau = 0.07;
        let mut expected = 0.0;
        for s in 0..3 {
            let pos = (1.0f64 / tau).exp();
            let den: f64 = (0..3)
                .filter(|&n| n != s)
                .map(|n| (dot(&set[0][s], &set[0][n]) / tau).exp())
                .sum();
            expected += -(pos / (pos + den)).ln();
        }
        for variant in [NaiveVariant::Standard, NaiveVariant::Bidirectional] {
            let v = naive_patchnce(&set, &set, tau, variant, false);
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn finite_differences_of_half_square_norm() {
        let x = Tensor::from_f64(&[4], &[0.3, -1.2, 2.5, 0.01]).unwrap();
        let g = finite_diff_grad(
            |t| Ok(0.5 * t.data().iter().map(|v| v * v).sum::<f64>()),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(max_rel_error(g.data(), x.data()) <= 1e-9);
    }

    #[test]
    fn finite_differences_reject_non_finite() {
        let x = Tensor::from_f64(&[1], &[0.0]).unwrap();
        assert!(finite_diff_grad(|t| Ok(t.data()[0].ln()), &x, 1e-5).is_err());
    }

    #[test]
    fn rel_error_uses_absolute_floor() {
        assert_eq!(max_rel_error(&[1e-12], &[2e-12]), 0.0);
        assert!((max_rel_error(&[1.0], &[1.1]) - 0.1 / 1.1).abs() < 1e-15);
    }
}
