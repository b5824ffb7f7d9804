use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::softmax;

/// Mean softmax cross-entropy over rows; the last logit column is background.
/// Returns the value and its gradient with respect to the logits.
pub fn detection_loss(logits: &Array2<f64>, targets: &[usize]) -> Result<(f64, Array2<f64>)> {
    let n = logits.nrows();
    if targets.len() != n {
        return Err(Error::Shape(format!("{} targets for {n} logit rows", targets.len())));
    }
    let mut grad = Array2::zeros(logits.dim());
    if n == 0 {
        return Ok((0.0, grad));
    }
    let width = logits.ncols();
    let mut value = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t >= width {
            return Err(Error::Shape(format!("target {t} outside {width} classes")));
        }
        let row = logits.row(i);
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        value += lse - row[t];
        let mut g = softmax(row);
        g[t] -= 1.0;
        grad.row_mut(i).assign(&(g / n as f64));
    }
    Ok((value / n as f64, grad))
}
