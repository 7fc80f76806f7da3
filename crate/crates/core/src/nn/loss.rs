use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (n, classes) = logits.shape();
    if labels.len() != n {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{} labels for {} rows", labels.len(), n),
        ));
    }
    if n == 0 {
        return Ok((0.0, Matrix::zeros(0, classes)));
    }
    let mut grad = Matrix::zeros(n, classes);
    let mut total = 0.0;
    let inv_n = 1.0 / n as f64;
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Contract(format!("label {y} outside 0..{classes}")));
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let g = grad.row_mut(i);
        let mut sum = 0.0;
        for (gj, &z) in g.iter_mut().zip(row) {
            *gj = (z - max).exp();
            sum += *gj;
        }
        total += sum.ln() - (row[y] - max);
        for gj in g.iter_mut() {
            *gj = *gj / sum * inv_n;
        }
        g[y] -= inv_n;
    }
    Ok((total * inv_n, grad))
}
