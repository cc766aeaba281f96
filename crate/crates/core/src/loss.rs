//! Class-weighted cross-entropy over soft targets.
//!
//! `L = -(1/N) * sum_i sum_c w_c * t_ic * ln(max(p_ic, eps))`, averaged over
//! the `N` pixels of a batch.

use ndarray::{Array2, Array3, ArrayView2, NdFloat};

use crate::domain::{ClassId, DatasetSplit, LabelMap, SoftLabelMap, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::net::ops::{cast, softmax_columns};
use crate::net::Prediction;

/// Probabilities are clamped to at least this before the logarithm.
pub const PROB_EPS: f64 = 1e-7;

/// One positive weight per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    w: Vec<f64>,
}

impl ClassWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() || w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidValue(format!(
                "class weights must be positive and finite, got {w:?}"
            )));
        }
        Ok(Self { w })
    }

    pub fn uniform(num_classes: usize) -> Self {
        Self {
            w: vec![1.0; num_classes],
        }
    }

    /// `w_c = (1/f_c) / mean_k(1/f_k)` where `f_c` is the pixel fraction of class `c`.
    pub fn inverse_frequency(counts: &[u64]) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if let Some(code) = counts.iter().position(|&n| n == 0) {
            let name = ClassId::from_code(code as u8)
                .filter(|_| counts.len() == NUM_CLASSES)
                .map_or_else(|| format!("#{code}"), |c| c.name().to_string());
            return Err(Error::MissingClass { code, name });
        }
        let inv: Vec<f64> = counts.iter().map(|&n| total as f64 / n as f64).collect();
        let mean = inv.iter().sum::<f64>() / inv.len() as f64;
        Self::new(inv.into_iter().map(|v| v / mean).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.w.iter().map(|v| v * factor).collect())
    }

    pub(crate) fn cast<F: NdFloat>(&self) -> Vec<F> {
        self.w.iter().map(|&v| cast::<F>(v)).collect()
    }
}

/// Pixel counts per class over a set of label maps.
pub fn class_counts<'a>(maps: impl IntoIterator<Item = &'a LabelMap>) -> [u64; NUM_CLASSES] {
    let mut counts = [0u64; NUM_CLASSES];
    for m in maps {
        for (acc, n) in counts.iter_mut().zip(m.class_counts()) {
            *acc += n as u64;
        }
    }
    counts
}

/// Inverse-frequency weights from the labeled training slices.
pub fn class_weights(split: &DatasetSplit) -> Result<ClassWeights> {
    ClassWeights::inverse_frequency(&class_counts(split.labeled().map(|a| &a.labels)))
}

fn check_columns(k: usize, weights: usize) -> Result<()> {
    if k != weights {
        return Err(Error::ShapeMismatch {
            expected: vec![weights],
            actual: vec![k],
        });
    }
    Ok(())
}

/// Mean loss over the columns of `(K, N)` probabilities and targets.
pub fn soft_ce<F: NdFloat>(probs: ArrayView2<'_, F>, targets: ArrayView2<'_, F>, weights: &[F]) -> Result<F> {
    if probs.dim() != targets.dim() {
        return Err(Error::ShapeMismatch {
            expected: probs.shape().to_vec(),
            actual: targets.shape().to_vec(),
        });
    }
    let (k, n) = probs.dim();
    check_columns(k, weights.len())?;
    let eps = cast::<F>(PROB_EPS);
    let mut total = F::zero();
    for c in 0..k {
        let mut acc = F::zero();
        for (&p, &t) in probs.row(c).iter().zip(targets.row(c)) {
            if t != F::zero() {
                acc += t * p.max(eps).ln();
            }
        }
        total += weights[c] * acc;
    }
    Ok(-total / cast::<F>(n as f64))
}

/// Loss and its gradient with respect to the pre-softmax logits, both for
/// `(K, N)` column layout. Clamped probabilities contribute no gradient.
pub fn soft_ce_grad<F: NdFloat>(
    probs: ArrayView2<'_, F>,
    targets: ArrayView2<'_, F>,
    weights: &[F],
) -> Result<(F, Array2<F>)> {
    let loss = soft_ce(probs, targets, weights)?;
    let (k, n) = probs.dim();
    let eps = cast::<F>(PROB_EPS);
    let inv_n = F::one() / cast::<F>(n as f64);
    let mut grad = Array2::<F>::zeros((k, n));
    let mut a = vec![F::zero(); k];
    for j in 0..n {
        let mut live_mass = F::zero();
        for c in 0..k {
            let live = probs[[c, j]] >= eps;
            a[c] = if live { weights[c] * targets[[c, j]] } else { F::zero() };
            live_mass += a[c];
        }
        for c in 0..k {
            grad[[c, j]] = (probs[[c, j]] * live_mass - a[c]) * inv_n;
        }
    }
    Ok((loss, grad))
}

fn pixels_by_class<F: NdFloat>(a: &Array3<F>) -> ArrayView2<'_, F> {
    let (h, w, k) = a.dim();
    a.view()
        .into_shape_with_order((h * w, k))
        .expect("standard layout")
        .reversed_axes()
}

fn targets_as<F: NdFloat>(target: &SoftLabelMap) -> Array3<F> {
    target.targets().mapv(|v| cast::<F>(v as f64))
}

fn check_pair(pred: (usize, usize, usize), target: &SoftLabelMap) -> Result<()> {
    let (h, w, k) = pred;
    let t = target.targets().dim();
    if (h, w, k) != t {
        return Err(Error::ShapeMismatch {
            expected: vec![t.0, t.1, t.2],
            actual: vec![h, w, k],
        });
    }
    Ok(())
}

/// Loss of a single-slice prediction against soft targets.
pub fn weighted_soft_ce<F: NdFloat>(
    pred: &Prediction<F>,
    target: &SoftLabelMap,
    weights: &ClassWeights,
) -> Result<f64> {
    check_pair(pred.probs.dim(), target)?;
    let t = targets_as::<F>(target);
    let probs = pred.probs.as_standard_layout();
    let l = soft_ce(pixels_by_class(&probs.to_owned()), pixels_by_class(&t), &weights.cast::<F>())?;
    Ok(l.to_f64().expect("finite"))
}

/// `dL/dlogit` for `H x W x K` logits of one slice.
pub fn loss_gradient<F: NdFloat>(
    logits: &Array3<F>,
    target: &SoftLabelMap,
    weights: &ClassWeights,
) -> Result<Array3<F>> {
    check_pair(logits.dim(), target)?;
    let (h, w, k) = logits.dim();
    let logits = logits.as_standard_layout().to_owned();
    let probs = softmax_columns(pixels_by_class(&logits));
    let t = targets_as::<F>(target);
    let (_, grad) = soft_ce_grad(probs.view(), pixels_by_class(&t), &weights.cast::<F>())?;
    Ok(grad
        .reversed_axes()
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((h, w, k))
        .expect("same element count"))
}
