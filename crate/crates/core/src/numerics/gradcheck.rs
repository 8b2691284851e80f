//! Finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Value};
use crate::numerics::params::ParamStore;

pub const DEFAULT_STEP: f64 = 1e-4;

/// Compare reverse-mode gradients of a scalar loss against central
/// differences over every entry of every parameter in the store.
///
/// `loss_fn` must build the loss node on the provided graph from the
/// store's current values; it is re-invoked for each perturbed evaluation.
/// Returns max over entries of |g_ad - g_fd| / max(1, |g_fd|).
pub fn grad_check<F>(loss_fn: F, params: &mut ParamStore, step: f64) -> Result<f64>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Value>,
{
    assert!(step > 0.0, "grad_check step must be positive");

    let eval = |params: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let loss = loss_fn(params, &mut g)?;
        let v = g.value(loss).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check loss".into()));
        }
        Ok(v)
    };

    // Analytic gradients once.
    let mut graph = Graph::new();
    let loss = loss_fn(params, &mut graph)?;
    if !graph.value(loss).item().is_finite() {
        return Err(Error::NonFinite("grad_check loss".into()));
    }
    let grads = graph.backward(loss);

    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut max_rel = 0.0f64;
    for name in &names {
        let len = params.get(name).expect("param").len();
        let analytic: Vec<f64> = match grads.named(name) {
            Some(g) => g.to_vec(),
            // Parameter unused by this loss: gradient is identically zero.
            None => vec![0.0; len],
        };
        for i in 0..len {
            let orig = params.get(name).expect("param").data()[i];

            params.get_mut(name).expect("param").data_mut()[i] = orig + step;
            let plus = eval(params)?;
            params.get_mut(name).expect("param").data_mut()[i] = orig - step;
            let minus = eval(params)?;
            params.get_mut(name).expect("param").data_mut()[i] = orig;

            let fd = (plus - minus) / (2.0 * step);
            let rel = (analytic[i] - fd).abs() / fd.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    #[test]
    fn quadratic_gradient_is_exact() {
        // f(x) = sum(x^2) at x = [3]: analytic 6, central difference 6.
        let mut params = ParamStore::new(0);
        params
            .insert("x", Tensor::vector(vec![3.0]))
            .unwrap();
        let err = grad_check(
            |p, g| {
                let x = g.param(p, "x");
                let sq = g.mul(x, x)?;
                Ok(g.sum_all(sq))
            },
            &mut params,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-10, "rel err {err}");
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        // f(W) = sum(softmax(W v)): softmax outputs sum to 1, so df/dW = 0.
        let mut params = ParamStore::new(3);
        params.add_uniform("w", vec![4, 4], 4).unwrap();
        let err = grad_check(
            |p, g| {
                let w = g.param(p, "w");
                let v = g.constant(Tensor::vector(vec![0.3, -1.2, 0.7, 2.0]));
                let wv = g.matvec(w, v)?;
                let s = g.softmax(wv)?;
                Ok(g.sum_all(s))
            },
            &mut params,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut params = ParamStore::new(0);
        params.insert("x", Tensor::vector(vec![1.0])).unwrap();
        let res = grad_check(
            |p, g| {
                let x = g.param(p, "x");
                let c = g.constant(Tensor::vector(vec![f64::INFINITY]));
                let y = g.mul(x, c)?;
                Ok(g.sum_all(y))
            },
            &mut params,
            DEFAULT_STEP,
        );
        assert!(matches!(res, Err(Error::NonFinite(_))));
    }
}
