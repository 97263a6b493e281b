//! Batch contrastive objective over bilinear logits.
//!
//! `L = Y W Zᵀ`, `loss = −(1/B) Σᵢ log softmax(L[i])[i]`. With
//! `G = (softmax(L) − I) / B` the gradients are `∂W = Yᵀ G Z`,
//! `∂Y = G Z Wᵀ` and `∂Z = Gᵀ Y W`.

use ndarray::{Array2, ArrayView2, Axis};

use crate::encoder::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub loss: T,
    pub logits: Array2<T>,
    pub grad_anchors: Array2<T>,
    pub grad_positives: Array2<T>,
    pub grad_w: Array2<T>,
}

/// Mean softmax cross-entropy of each logit row against its diagonal entry,
/// with row-max subtraction. Also returns `softmax − I`.
pub fn cross_entropy_rows<T: Real>(logits: ArrayView2<T>) -> Result<(T, Array2<T>)> {
    let b = logits.nrows();
    if b == 0 || logits.ncols() != b {
        return Err(Error::Dimension {
            what: "logit matrix columns",
            expected: b,
            got: logits.ncols(),
        });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("contrastive logits"));
    }
    let mut probs = logits.to_owned();
    let mut total = T::zero();
    for (i, mut row) in probs.axis_iter_mut(Axis(0)).enumerate() {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        // log of the normalizer relative to the max
        total += sum.ln() - (logits[[i, i]] - max);
        row.mapv_inplace(|v| v / sum);
        row[i] -= T::one();
    }
    Ok((total / T::of(b as f64), probs))
}

/// Loss and gradients for anchor projections `Y` and positive projections
/// `Z` (both `B × d`).
pub fn contrastive_loss<T: Real>(
    anchors: ArrayView2<T>,
    positives: ArrayView2<T>,
    w: ArrayView2<T>,
) -> Result<LossOutput<T>> {
    if anchors.nrows() != positives.nrows() {
        return Err(Error::Dimension {
            what: "positive batch",
            expected: anchors.nrows(),
            got: positives.nrows(),
        });
    }
    if anchors.ncols() != w.nrows() || positives.ncols() != w.ncols() {
        return Err(Error::Dimension {
            what: "projection width",
            expected: w.nrows(),
            got: anchors.ncols(),
        });
    }
    if anchors
        .iter()
        .chain(positives.iter())
        .any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite("projections"));
    }
    let yw = anchors.dot(&w);
    let logits = yw.dot(&positives.t());
    let (loss, mut g) = cross_entropy_rows(logits.view())?;
    g /= T::of(anchors.nrows() as f64);
    let gz = g.dot(&positives);
    let grad_w = anchors.t().dot(&gz);
    let grad_anchors = gz.dot(&w.t());
    let grad_positives = g.t().dot(&yw);
    Ok(LossOutput {
        loss,
        logits,
        grad_anchors,
        grad_positives,
        grad_w,
    })
}
