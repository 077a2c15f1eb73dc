//! Central finite-difference verification of reverse-mode gradients.
//!
//! The builder closure must be deterministic: it is re-invoked on a fresh
//! tape for every perturbed evaluation, so any internal randomness would
//! corrupt the comparison. Checks run in 64-bit; central differences are
//! unreliable in 32-bit.

use super::{Tape, TensorError, TensorRef, TensorResult};

/// Relative error floor, so zero gradients compare cleanly.
const REL_FLOOR: f64 = 1e-8;

/// Compare reverse-mode gradients of `build`'s scalar output against central
/// finite differences over every element of `params`.
///
/// Returns the maximum over elements of
/// `|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)`.
pub fn finite_difference_check<F>(
    params: &[(Vec<f64>, Vec<usize>)],
    eps: f64,
    build: F,
) -> TensorResult<f64>
where
    F: Fn(&mut Tape<f64>, &[TensorRef]) -> TensorResult<TensorRef>,
{
    if eps <= 0.0 {
        return Err(TensorError::InvalidArgument {
            op: "finite_difference_check",
            message: format!("eps must be > 0, got {eps}"),
        });
    }

    let eval = |data: &[Vec<f64>]| -> TensorResult<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorRef> = data
            .iter()
            .zip(params.iter())
            .map(|(d, (_, shape))| tape.param(d.clone(), shape.clone()))
            .collect::<TensorResult<_>>()?;
        let loss = build(&mut tape, &ids)?;
        if tape.numel(loss) != 1 {
            return Err(TensorError::NonScalarLoss { shape: tape.shape(loss).to_vec() });
        }
        let value = tape.scalar_value(loss);
        if !value.is_finite() {
            return Err(TensorError::NonFinite {
                context: "finite_difference_check: loss is not finite".to_string(),
            });
        }
        Ok(value)
    };

    // Reverse-mode gradients once.
    let mut tape = Tape::new();
    let ids: Vec<TensorRef> = params
        .iter()
        .map(|(d, shape)| tape.param(d.clone(), shape.clone()))
        .collect::<TensorResult<_>>()?;
    let loss = build(&mut tape, &ids)?;
    if tape.numel(loss) != 1 {
        return Err(TensorError::NonScalarLoss { shape: tape.shape(loss).to_vec() });
    }
    tape.backward(loss)?;
    let ad: Vec<Vec<f64>> = ids.iter().map(|&id| tape.grad(id).to_vec()).collect();

    let base: Vec<Vec<f64>> = params.iter().map(|(d, _)| d.clone()).collect();
    let mut max_rel = 0.0f64;
    for p in 0..base.len() {
        for i in 0..base[p].len() {
            let mut plus = base.clone();
            plus[p][i] += eps;
            let f_plus = eval(&plus)?;
            let mut minus = base.clone();
            minus[p][i] -= eps;
            let f_minus = eval(&minus)?;
            let fd = (f_plus - f_minus) / (2.0 * eps);
            let a = ad[p][i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(REL_FLOOR);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
