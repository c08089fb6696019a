//! Central finite differences, used as an independent oracle for the
//! hand-derived gradients.

use crate::nn::Tensors;

/// `(loss(p + eps) - loss(p - eps)) / 2 eps` for every scalar parameter,
/// returned per tensor in [`Tensors`] order.
pub fn finite_difference_grad<P, F>(mut loss_fn: F, params: &P, eps: f64) -> Vec<Vec<f64>>
where
    P: Tensors + Clone,
    F: FnMut(&P) -> f64,
{
    let mut probe = params.clone();
    let lens = params.tensor_lens();
    let mut out = Vec::with_capacity(lens.len());
    for (t, &n) in lens.iter().enumerate() {
        let mut g = Vec::with_capacity(n);
        for i in 0..n {
            let orig = probe.tensors()[t][i];
            probe.tensors_mut()[t][i] = orig + eps;
            let plus = loss_fn(&probe);
            probe.tensors_mut()[t][i] = orig - eps;
            let minus = loss_fn(&probe);
            probe.tensors_mut()[t][i] = orig;
            g.push((plus - minus) / (2.0 * eps));
        }
        out.push(g);
    }
    out
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Largest [`relative_error`] over matching tensor lists.
pub fn max_relative_error<A: AsRef<[f64]>, B: AsRef<[f64]>>(a: &[A], b: &[B]) -> f64 {
    assert_eq!(a.len(), b.len(), "tensor count mismatch");
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            let (x, y) = (x.as_ref(), y.as_ref());
            assert_eq!(x.len(), y.len(), "tensor length mismatch");
            x.iter().zip(y).map(|(&u, &v)| relative_error(u, v))
        })
        .fold(0.0, f64::max)
}
