use crate::error::{Error, Result};
use crate::nn::graph::{cross_entropy, softmax};
use crate::nn::Tensor;

/// `−log softmax(logits)[target]` and its gradient `softmax(logits) − onehot(target)`.
pub fn softmax_cross_entropy(logits: &Tensor, target: usize) -> Result<(f64, Tensor)> {
    let m = logits.len();
    if target >= m {
        return Err(Error::Index {
            what: "logits",
            index: target,
            len: m,
        });
    }
    let loss = cross_entropy(logits.values(), target);
    let mut grad = softmax(logits.values());
    grad[target] -= 1.0;
    Ok((loss, Tensor::from_parts(logits.shape().to_vec(), grad)))
}
