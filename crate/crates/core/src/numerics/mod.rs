//! Minimal dense-tensor math with reverse-mode gradients.

pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod tensor;

pub use gradcheck::{grad_check, DEFAULT_STEP};
pub use graph::{Gradients, Graph, Value};
pub use params::ParamStore;
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn softmax_of(data: Vec<f64>) -> Vec<f64> {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(data));
        let s = g.softmax(x).unwrap();
        g.value(s).data().to_vec()
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let s = softmax_of(vec![0.0, 0.0, 0.0]);
        for v in s {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_singleton_is_one() {
        for x in [-1e6, -3.0, 0.0, 42.0, 1e6] {
            let s = softmax_of(vec![x]);
            assert_eq!(s, vec![1.0]);
        }
    }

    #[test]
    fn softmax_hand_example() {
        // [ln 1, ln 2, ln 3] -> [1/6, 2/6, 3/6]
        let s = softmax_of(vec![1.0f64.ln(), 2.0f64.ln(), 3.0f64.ln()]);
        assert!((s[0] - 1.0 / 6.0).abs() < 1e-12);
        assert!((s[1] - 2.0 / 6.0).abs() < 1e-12);
        assert!((s[2] - 3.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_empty_is_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![]));
        assert!(matches!(g.softmax(x), Err(Error::EmptyLogits)));
    }

    #[test]
    fn softmax_shift_invariance() {
        let logits = vec![0.3, -2.0, 5.5, 1.1];
        let a = softmax_of(logits.clone());
        let b = softmax_of(logits.iter().map(|v| v + 123.456).collect());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let ce = g.cross_entropy(x, 0).unwrap();
        assert!((g.value(ce).item() - 2.0f64.ln()).abs() < 1e-12);

        let y = g.constant(Tensor::vector(vec![0.0; 4]));
        let ce4 = g.cross_entropy(y, 3).unwrap();
        assert!((g.value(ce4).item() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_logits() {
        // -log softmax([10,-10])[0] = ln(1 + e^-20) ≈ 2.061e-9
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![10.0, -10.0]));
        let ce = g.cross_entropy(x, 0).unwrap();
        let expected = (1.0 + (-20.0f64).exp()).ln();
        assert!((g.value(ce).item() - expected).abs() < 1e-15);
        assert!(g.value(ce).item() < 3e-9);
    }

    #[test]
    fn cross_entropy_index_out_of_range() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
        assert!(g.cross_entropy(x, 2).is_err());
    }

    #[test]
    fn concat_and_mean_pool_and_identity_matmul() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant(Tensor::vector(vec![3.0]));
        let c = g.concat(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);

        let m = g
            .constant(Tensor::matrix(2, 2, vec![2.0, 4.0, 4.0, 8.0]).unwrap());
        let pooled = g.mean_rows(m).unwrap();
        assert_eq!(g.value(pooled).data(), &[3.0, 6.0]);

        let eye = g.constant(
            Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let v = g.constant(Tensor::matrix(3, 1, vec![0.5, -1.5, 2.0]).unwrap());
        let out = g.matmul(eye, v).unwrap();
        assert_eq!(g.value(out).data(), &[0.5, -1.5, 2.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "message was {msg}");
    }

    #[test]
    fn forward_values_are_deterministic() {
        let run = || {
            let mut p = ParamStore::new(99);
            p.add_uniform("w", vec![6, 6], 6).unwrap();
            let mut g = Graph::new();
            let w = g.param(&p, "w");
            let v = g.constant(Tensor::vector(vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
            let wv = g.matvec(w, v).unwrap();
            let s = g.softmax(wv).unwrap();
            let loss = g.mean_all(s);
            let grads = g.backward(loss);
            (
                g.value(s).data().to_vec(),
                grads.named("w").unwrap().to_vec(),
            )
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1, v2);
        assert_eq!(g1, g2);
    }
}
