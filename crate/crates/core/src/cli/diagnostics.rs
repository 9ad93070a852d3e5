//! Numerical self-checks: round-trip error, a brute-force Jacobian oracle
//! for the log-determinant, and finite-difference gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Mode};
use crate::model::Cinn;
use crate::numerics::Tensor;

/// Step used by the central differences below.
pub const FD_STEP: f64 = 1e-5;

/// `max |g(f(x; c); c) − x|` over a batch.
pub fn invertibility_error(model: &Cinn, x: &Tensor, y: &Tensor) -> Result<f64> {
    let z = model.density(x, y)?.z;
    let back = model.inverse(&z, y)?;
    Ok(back.reshape(x.shape())?.max_abs_diff(x))
}

/// Central-difference Jacobian `∂f(x)/∂x` of one sample as a row-major
/// `d × d` matrix (row = output, column = input). All `2d` perturbed inputs
/// go through one eval-mode batch.
pub fn jacobian_fd(model: &Cinn, x: &Tensor, y: &Tensor, h: f64) -> Result<Vec<f64>> {
    if x.batch() != 1 || y.batch() != 1 {
        return Err(Error::contract("jacobian_fd takes a single sample"));
    }
    let d = model.dim();
    let mut rows = Vec::with_capacity(2 * d);
    for j in 0..d {
        for sign in [1.0, -1.0] {
            let mut xp = x.clone();
            xp.data_mut()[j] += sign * h;
            rows.push(xp);
        }
    }
    let xs = Tensor::stack_rows(&rows)?;
    let ys = Tensor::stack_rows(&vec![y.clone(); 2 * d])?;
    let z = model.density(&xs, &ys)?.z;
    let zd = z.data();
    let mut jac = vec![0.0; d * d];
    for j in 0..d {
        let plus = &zd[(2 * j) * d..(2 * j + 1) * d];
        let minus = &zd[(2 * j + 1) * d..(2 * j + 2) * d];
        for i in 0..d {
            jac[i * d + j] = (plus[i] - minus[i]) / (2.0 * h);
        }
    }
    Ok(jac)
}

/// `log|det A|` of a row-major `n × n` matrix by LU with partial pivoting.
pub fn log_abs_det(a: &[f64], n: usize) -> Result<f64> {
    if a.len() != n * n {
        return Err(Error::shape("log_abs_det", &[a.len()], &[n, n]));
    }
    let mut m = a.to_vec();
    let mut acc = 0.0;
    for k in 0..n {
        let p = (k..n)
            .max_by(|&i, &j| m[i * n + k].abs().total_cmp(&m[j * n + k].abs()))
            .expect("non-empty range");
        let pivot = m[p * n + k];
        if pivot == 0.0 {
            return Err(Error::NonFinite { op: "log_abs_det" });
        }
        if p != k {
            for c in 0..n {
                m.swap(k * n + c, p * n + c);
            }
        }
        acc += pivot.abs().ln();
        for i in k + 1..n {
            let f = m[i * n + k] / pivot;
            for c in k..n {
                m[i * n + c] -= f * m[k * n + c];
            }
        }
    }
    Ok(acc)
}

/// Largest `|analytic logdet − log|det J_fd||` over the samples of a batch.
pub fn logdet_error(model: &Cinn, x: &Tensor, y: &Tensor) -> Result<f64> {
    let analytic = model.density(x, y)?.logdet;
    let mut worst: f64 = 0.0;
    for i in 0..x.batch() {
        let jac = jacobian_fd(model, &x.sample(i), &y.sample(i), FD_STEP)?;
        let fd = log_abs_det(&jac, model.dim())?;
        worst = worst.max((analytic.data()[i] - fd).abs());
    }
    Ok(worst)
}

/// Batch loss in training mode (batch statistics) without touching the
/// running buffers.
fn train_loss(model: &Cinn, x: &Tensor, y: &Tensor) -> Result<f64> {
    let mut g = Graph::new(model.params(), Mode::Train);
    let (loss, _) = model.loss_on(&mut g, x, y)?;
    Ok(g.value(loss).item())
}

/// Agreement between tape gradients and central differences.
#[derive(Clone, Copy, Debug)]
pub struct GradientCheck {
    /// Number of scalar parameters compared.
    pub checked: usize,
    /// `‖g_tape − g_fd‖ / max(‖g_tape‖, ‖g_fd‖)` over all entries.
    pub relative_error: f64,
    /// Largest per-entry absolute difference.
    pub max_abs_error: f64,
}

/// Compare the gradient of the training loss with respect to every
/// trainable parameter against central differences.
pub fn gradient_check(model: &Cinn, x: &Tensor, y: &Tensor, h: f64) -> Result<GradientCheck> {
    gradient_check_sampled(model, x, y, h, usize::MAX)
}

/// Like [`gradient_check`] but compares at most `max_entries` parameters,
/// taken at a fixed stride through the flattened parameter list.
pub fn gradient_check_sampled(model: &Cinn, x: &Tensor, y: &Tensor, h: f64, max_entries: usize) -> Result<GradientCheck> {
    let mut work = model.clone();
    let analytic: Vec<(crate::numerics::ParamId, Tensor)> = {
        let mut g = Graph::new(work.params(), Mode::Train);
        let (loss, _) = work.loss_on(&mut g, x, y)?;
        let (tape, _) = g.into_parts();
        let store = work.params_mut();
        store.zero_grads();
        tape.backward(loss, store)?;
        store
            .iter()
            .filter(|(_, p)| p.trainable())
            .map(|(id, p)| (id, p.grad().clone()))
            .collect()
    };
    work.params_mut().zero_grads();
    let total: usize = analytic.iter().map(|(_, g)| g.len()).sum();
    let stride = total.div_ceil(max_entries.max(1)).max(1);
    let mut index = 0usize;
    let (mut diff2, mut a2, mut n2, mut max_abs, mut checked) = (0.0, 0.0, 0.0, 0.0f64, 0);
    for (id, grad) in analytic {
        for k in 0..grad.len() {
            index += 1;
            if !(index - 1).is_multiple_of(stride) {
                continue;
            }
            let orig = work.params().value(id).data()[k];
            work.params_mut().value_mut(id).data_mut()[k] = orig + h;
            let plus = train_loss(&work, x, y)?;
            work.params_mut().value_mut(id).data_mut()[k] = orig - h;
            let minus = train_loss(&work, x, y)?;
            work.params_mut().value_mut(id).data_mut()[k] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let a = grad.data()[k];
            diff2 += (a - fd) * (a - fd);
            a2 += a * a;
            n2 += fd * fd;
            max_abs = max_abs.max((a - fd).abs());
            checked += 1;
        }
    }
    let denom = f64::max(a2, n2).sqrt();
    let relative_error = if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom };
    Ok(GradientCheck {
        checked,
        relative_error,
        max_abs_error: max_abs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_abs_det_of_known_matrices() {
        assert_eq!(log_abs_det(&[1.0, 0.0, 0.0, 1.0], 2).unwrap(), 0.0);
        let v = log_abs_det(&[0.0, 2.0, -3.0, 1.0], 2).unwrap();
        assert!((v - 6f64.ln()).abs() < 1e-15);
        assert!(log_abs_det(&[1.0, 2.0, 2.0, 4.0], 2).is_err());
    }
}
