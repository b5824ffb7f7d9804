//! Central finite-difference check of analytic parameter gradients.

use crate::error::{Error, Result};
use crate::model::{ModelGrads, ModelParams};

/// Compares `loss`'s analytic gradient against central differences at every
/// parameter and returns the worst relative error
/// `|g_a - g_fd| / max(1e-8, |g_a| + |g_fd|)`.
pub fn grad_check<F>(loss: F, params: &ModelParams, eps: f64) -> Result<f64>
where
    F: Fn(&ModelParams) -> Result<(f64, ModelGrads)>,
{
    if !(eps > 0.0) {
        return Err(Error::Numerical(format!("finite-difference step must be positive, got {eps}")));
    }
    let (value, analytic) = loss(params)?;
    if !value.is_finite() {
        return Err(Error::Numerical(format!("loss is not finite: {value}")));
    }
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for t in 0..analytic.tensors().len() {
        for i in 0..analytic.tensors()[t].len() {
            let orig = probe.tensors()[t][i];
            probe.tensors_mut()[t][i] = orig + eps;
            let (plus, _) = loss(&probe)?;
            probe.tensors_mut()[t][i] = orig - eps;
            let (minus, _) = loss(&probe)?;
            probe.tensors_mut()[t][i] = orig;
            if !(plus.is_finite() && minus.is_finite()) {
                return Err(Error::Numerical(format!(
                    "loss not finite around {}[{i}]",
                    ModelParams::TENSOR_NAMES[t]
                )));
            }
            let fd = (plus - minus) / (2.0 * eps);
            let ga = analytic.tensors()[t][i];
            let err = (ga - fd).abs() / (ga.abs() + fd.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;
    use crate::rng::substream;

    fn params() -> ModelParams {
        ModelParams::init(ModelDims { feature_dim: 3, hidden_dim: 4, embed_dim: 2, n_classes: 2 }, &mut substream(4, 0))
    }

    #[test]
    fn quadratic_is_exact() {
        let half_sq = |p: &ModelParams| {
            let v: f64 = p.tensors().iter().flat_map(|t| t.iter()).map(|w| 0.5 * w * w).sum();
            Ok((v, p.clone()))
        };
        let err = grad_check(half_sq, &params(), 1e-4).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn nan_loss_is_numerical_error() {
        let bad = |p: &ModelParams| Ok((f64::NAN, p.zeros_like()));
        assert!(matches!(grad_check(bad, &params(), 1e-5), Err(Error::Numerical(_))));
        let ok = |p: &ModelParams| Ok((0.0, p.zeros_like()));
        assert!(grad_check(ok, &params(), 0.0).is_err());
    }
}
