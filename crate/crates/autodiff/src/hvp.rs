use crate::error::{invalid, AutodiffError, Result};
use crate::map::{GradientMap, WeightSet};

/// Default finite-difference radius for [`hvp`], before scaling by `1/‖v‖₂`.
pub const DEFAULT_HVP_EPS: f64 = 0.01;

/// Directions shorter than this are rejected.
pub const MIN_DIRECTION_NORM: f64 = 1e-12;

/// Central-difference Hessian-vector product.
///
/// `grad_at(p)` returns a gradient evaluated at parameters `p`. The result is
/// `[grad_at(params + εv) − grad_at(params − εv)] / 2ε` with `ε = eps / ‖v‖₂`.
/// When `grad_at` differentiates with respect to a different variable group
/// than `params`, this is the mixed second derivative contracted with `v`.
pub fn hvp<F>(mut grad_at: F, params: &WeightSet, v: &WeightSet, eps: f64) -> Result<GradientMap>
where
    F: FnMut(&WeightSet) -> Result<GradientMap>,
{
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(invalid("hvp", format!("eps must be positive, got {eps}")));
    }
    let norm = v.norm();
    if !(norm >= MIN_DIRECTION_NORM) {
        return Err(AutodiffError::ZeroDirection(norm));
    }
    let step = eps / norm;

    let mut plus = params.clone();
    plus.axpy(step, v)?;
    let mut minus = params.clone();
    minus.axpy(-step, v)?;

    let g_plus = grad_at(&plus)?;
    let g_minus = grad_at(&minus)?;
    let mut out = g_plus.sub(&g_minus)?;
    for (_, t) in out.iter_mut() {
        for x in t.data_mut() {
            *x /= 2.0 * step;
        }
    }
    if !out.is_finite() {
        return Err(AutodiffError::NonFinite { op: "hvp" });
    }
    Ok(out)
}
