use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let k = logits.row_len();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

/// Mean cross-entropy of `softmax(logits)` against `labels`, and its gradient
/// with respect to the logits: `(softmax - one_hot) / batch`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let batch = logits.batch();
    let k = logits.row_len();
    if labels.len() != batch {
        return Err(Error::Shape {
            layer: "loss".into(),
            expected: format!("{} labels", batch),
            actual: vec![labels.len()],
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    let inv_batch = T::one() / T::from_usize(batch.max(1)).unwrap();
    let mut grad = logits.clone();
    let mut loss = T::zero();
    for (row, &y) in grad.data_mut().chunks_mut(k).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        loss = loss + (lse - row[y]);
        for v in row.iter_mut() {
            *v = (*v - lse).exp() * inv_batch;
        }
        row[y] = row[y] - inv_batch;
    }
    Ok((loss * inv_batch, grad))
}
