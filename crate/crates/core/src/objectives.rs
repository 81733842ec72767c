//! Contrastive and generative losses.
//!
//! Each loss has a differentiable form that records onto a [`Graph`] and a
//! value form over plain matrices that wraps it.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{ClipsError, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::text::TokenSequence;

/// How per-token caption NLL is reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionReduction {
    /// Mean over every valid target token in the batch.
    #[default]
    Mean,
    /// Sum over tokens of each caption, mean over the batch.
    Sum,
}

impl std::str::FromStr for CaptionReduction {
    type Err = ClipsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "sum" => Ok(Self::Sum),
            _ => Err(ClipsError::config(format!("unknown caption reduction {s:?} (mean|sum)"))),
        }
    }
}

fn check_pair<T: Scalar>(g: &Graph<T>, a: Var, b: Var) -> Result<usize> {
    let (na, da) = g.value(a).shape();
    let (nb, db) = g.value(b).shape();
    if na != nb || da != db {
        return Err(ClipsError::invalid(format!("embedding batches differ: {na}x{da} vs {nb}x{db}")));
    }
    if na < 2 {
        return Err(ClipsError::invalid(format!("contrastive loss needs at least 2 pairs, got {na}")));
    }
    Ok(na)
}

/// Symmetric InfoNCE over unit-norm rows; `scale` is the `1×1` inverse temperature.
pub fn info_nce_graph<T: Scalar>(g: &mut Graph<T>, image: Var, text: Var, scale: Var) -> Result<Var> {
    let n = check_pair(g, image, text)?;
    let sim = g.matmul_t(image, text);
    let logits = g.mul_scalar(sim, scale);
    let logits_t = g.transpose(logits);
    let diag: Vec<Option<usize>> = (0..n).map(Some).collect();
    let w = T::from_f64_lossy(0.5 / n as f64);
    let li = g.cross_entropy(logits, &diag, w);
    let lt = g.cross_entropy(logits_t, &diag, w);
    Ok(g.add(li, lt))
}

/// Mean of the image/web-caption and image/sub-caption InfoNCE terms.
pub fn multi_positive_graph<T: Scalar>(
    g: &mut Graph<T>,
    image: Var,
    orig: Var,
    syn: Var,
    scale: Var,
) -> Result<Var> {
    let a = info_nce_graph(g, image, orig, scale)?;
    let b = info_nce_graph(g, image, syn, scale)?;
    let s = g.add(a, b);
    Ok(g.scale(s, T::from_f64_lossy(0.5)))
}

/// Per-position targets for caption logits laid out example-major.
pub fn caption_targets(targets: &[TokenSequence], output_len: usize) -> Result<Vec<Option<usize>>> {
    let mut out = Vec::with_capacity(targets.len() * output_len);
    for t in targets {
        if t.max_len() != output_len {
            return Err(ClipsError::invalid(format!(
                "target padded to {}, decoder emits {output_len} positions",
                t.max_len()
            )));
        }
        if t.valid_len() == 0 {
            return Err(ClipsError::invalid("caption target has no valid positions"));
        }
        out.extend(t.ids().iter().enumerate().map(|(i, &id)| (i < t.valid_len()).then_some(id as usize)));
    }
    Ok(out)
}

/// Negative log-likelihood of the targets; pad positions contribute nothing.
pub fn caption_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[TokenSequence],
    reduction: CaptionReduction,
) -> Result<Var> {
    if targets.is_empty() {
        return Err(ClipsError::invalid("empty caption batch"));
    }
    let rows = g.value(logits).rows();
    if rows % targets.len() != 0 {
        return Err(ClipsError::invalid(format!("{rows} logit rows for {} targets", targets.len())));
    }
    let lo = rows / targets.len();
    let t = caption_targets(targets, lo)?;
    if let Some(&id) = t.iter().flatten().find(|&&id| id >= g.value(logits).cols()) {
        return Err(ClipsError::invalid(format!("target id {id} outside logit width")));
    }
    let denom = match reduction {
        CaptionReduction::Mean => t.iter().flatten().count(),
        CaptionReduction::Sum => targets.len(),
    };
    Ok(g.cross_entropy(logits, &t, T::from_f64_lossy(1.0 / denom as f64)))
}

/// `alpha * contrastive + beta * generative`.
pub fn total_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    contrastive: Var,
    generative: Option<Var>,
    alpha: f64,
    beta: f64,
) -> Var {
    let c = g.scale(contrastive, T::from_f64_lossy(alpha));
    match generative {
        Some(gen) if beta != 0.0 => {
            let gw = g.scale(gen, T::from_f64_lossy(beta));
            g.add(c, gw)
        }
        _ => c,
    }
}

fn check_temperature<T: Scalar>(t: T) -> Result<T> {
    if !(t.is_finite() && t > T::zero()) {
        return Err(ClipsError::invalid(format!("temperature must be positive, got {t}")));
    }
    Ok(T::one() / t)
}

/// Symmetric InfoNCE with similarity `image · textᵀ / temperature`.
pub fn info_nce<T: Scalar>(image: &Matrix<T>, text: &Matrix<T>, temperature: T) -> Result<T> {
    let inv = check_temperature(temperature)?;
    let mut g = Graph::new();
    let (a, b) = (g.constant(image.clone()), g.constant(text.clone()));
    let s = g.constant(Matrix::scalar(inv));
    let l = info_nce_graph(&mut g, a, b, s)?;
    Ok(g.value(l).item())
}

pub fn multi_positive_contrastive<T: Scalar>(
    image: &Matrix<T>,
    orig: &Matrix<T>,
    syn: &Matrix<T>,
    temperature: T,
) -> Result<T> {
    let inv = check_temperature(temperature)?;
    let mut g = Graph::new();
    let (a, b, c) = (g.constant(image.clone()), g.constant(orig.clone()), g.constant(syn.clone()));
    let s = g.constant(Matrix::scalar(inv));
    let l = multi_positive_graph(&mut g, a, b, c, s)?;
    Ok(g.value(l).item())
}

/// Mean NLL over valid positions of a single caption.
pub fn caption_loss<T: Scalar>(logits: &Matrix<T>, target: &TokenSequence) -> Result<T> {
    caption_loss_batch(logits, std::slice::from_ref(target), CaptionReduction::Mean)
}

pub fn caption_loss_batch<T: Scalar>(
    logits: &Matrix<T>,
    targets: &[TokenSequence],
    reduction: CaptionReduction,
) -> Result<T> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let v = caption_loss_graph(&mut g, l, targets, reduction)?;
    Ok(g.value(v).item())
}

pub fn total_loss<T: Scalar>(contrastive: T, generative: T, alpha: T, beta: T) -> T {
    alpha * contrastive + beta * generative
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::pad_to_length;

    fn unit_rows(n: usize, d: usize, seed: u64) -> Matrix<f64> {
        let mut x = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Matrix::from_fn(n, d, |_, _| {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((x >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        })
        .l2_normalize_rows()
    }

    #[test]
    fn identical_embeddings_give_ln_n() {
        let e = Matrix::from_fn(4, 3, |_, c| if c == 0 { 1.0 } else { 0.0 });
        assert!((info_nce(&e, &e, 0.07).unwrap() - 4f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn two_by_two_hand_value() {
        let e = Matrix::<f64>::identity(2);
        let v = info_nce(&e, &e, 1.0).unwrap();
        assert!((v - (1.0 + (-1f64).exp()).ln()).abs() < 1e-4);
    }

    #[test]
    fn permutation_invariance() {
        let a = unit_rows(5, 4, 1);
        let b = unit_rows(5, 4, 2);
        let perm = [3, 0, 4, 1, 2];
        let pa = Matrix::from_fn(5, 4, |r, c| a.get(perm[r], c));
        let pb = Matrix::from_fn(5, 4, |r, c| b.get(perm[r], c));
        let x = info_nce(&a, &b, 0.1).unwrap();
        let y = info_nce(&pa, &pb, 0.1).unwrap();
        assert!((x - y).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let one = unit_rows(1, 4, 0);
        assert!(info_nce(&one, &one, 1.0).is_err());
        let a = unit_rows(3, 4, 0);
        assert!(info_nce(&a, &a, 0.0).is_err());
        assert!(info_nce(&a, &unit_rows(2, 4, 0), 1.0).is_err());
    }

    #[test]
    fn multi_positive_duplicate_equals_single() {
        let a = unit_rows(4, 6, 3);
        let b = unit_rows(4, 6, 4);
        let mp = multi_positive_contrastive(&a, &b, &b, 0.5).unwrap();
        assert_eq!(mp, info_nce(&a, &b, 0.5).unwrap());
    }

    #[test]
    fn caption_loss_cases() {
        let v = 64;
        let t = pad_to_length(&[2, 7, 9, 3], 6, 0);
        let uniform = Matrix::<f64>::zeros(6, v);
        assert!((caption_loss(&uniform, &t).unwrap() - 64f64.ln()).abs() < 1e-4);
        let mut sharp = Matrix::<f64>::zeros(6, v);
        for (i, &id) in t.valid().iter().enumerate() {
            sharp.set(i, id as usize, 20.0);
        }
        assert!(caption_loss(&sharp, &t).unwrap() <= 1e-3);
        // junk in pad rows is ignored
        let mut junk = sharp.clone();
        junk.row_mut(5).iter_mut().for_each(|x| *x = 1e3);
        assert_eq!(caption_loss(&junk, &t).unwrap(), caption_loss(&sharp, &t).unwrap());
        assert!(caption_loss(&uniform, &pad_to_length(&[], 6, 0)).is_err());
        assert!(caption_loss(&Matrix::<f64>::zeros(5, v), &t).is_err());
    }

    #[test]
    fn sum_reduction_scales_with_length() {
        let t = pad_to_length(&[2, 7, 9, 3], 6, 0);
        let uniform = Matrix::<f64>::zeros(6, 16);
        let s = caption_loss_batch(&uniform, std::slice::from_ref(&t), CaptionReduction::Sum).unwrap();
        assert!((s - 4.0 * 16f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(1.0, 0.5, 1.0, 2.0), 2.0);
        assert_eq!(total_loss(1.3, 0.5, 1.0, 0.0), 1.3);
        assert_eq!(total_loss(1.3, 0.5, 0.0, 1.0), 0.5);
    }
}
