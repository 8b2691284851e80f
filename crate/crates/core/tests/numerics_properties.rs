//! Property tests for the tensor primitives: gradient correctness of random
//! 3-deep compositions over 100 seeds, and softmax normalization over random
//! logit vectors.

use kgdial::numerics::{grad_check, Graph, ParamStore, Tensor, Value};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One randomly chosen differentiable primitive applied to a matrix state.
fn apply_primitive(
    g: &mut Graph,
    p: &ParamStore,
    rng: &mut ChaCha8Rng,
    x: Value,
    depth: usize,
) -> kgdial::Result<Value> {
    let (n, d) = g.value(x).dims2();
    let pick = rng.gen_range(0..6);
    Ok(match pick {
        0 => {
            let w = g.param(p, &format!("w{depth}"));
            g.matmul(x, w)?
        }
        1 => {
            let gain = g.param(p, &format!("gain{depth}"));
            let bias = g.param(p, &format!("bias{depth}"));
            g.layer_norm(x, gain, bias)?
        }
        2 => g.gelu(x),
        3 => g.row_softmax(x)?,
        4 => {
            let pooled = g.mean_rows(x)?; // d
            let back: Vec<Value> = (0..n).map(|_| pooled).collect();
            g.stack_rows(&back)?
        }
        _ => {
            let half = g.cols(x, 0, d / 2)?;
            let other = g.cols(x, d / 2, d - d / 2)?;
            g.concat_cols(&[other, half])?
        }
    })
}

#[test]
fn composed_primitives_pass_grad_check_over_100_seeds() {
    const D: usize = 6;
    for seed in 0..100u64 {
        let mut params = ParamStore::new(seed);
        params.add_uniform("x", vec![3, D], D).unwrap();
        for depth in 0..3 {
            params.add_uniform(&format!("w{depth}"), vec![D, D], D).unwrap();
            params.add_ones(&format!("gain{depth}"), vec![D]).unwrap();
            params.add_zeros(&format!("bias{depth}"), vec![D]).unwrap();
        }

        let err = grad_check(
            |p, g| {
                // The op chain is a pure function of the seed, so every
                // finite-difference evaluation sees the same composition.
                let mut chain = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31) + 7);
                let mut x = g.param(p, "x");
                for depth in 0..3 {
                    x = apply_primitive(g, p, &mut chain, x, depth)?;
                }
                // embedding_lookup joins as the readout gather.
                let gathered = g.embedding(x, &[0, 2, 1])?;
                let sq = g.mul(gathered, gathered)?;
                Ok(g.mean_all(sq))
            },
            &mut params,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6, "seed {seed}: max rel err {err}");
    }
}

#[test]
fn softmax_sums_to_one_for_1000_random_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..1000 {
        let n = rng.gen_range(1..=32);
        let logits: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 100.0 - 50.0).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(logits));
        let s = g.softmax(x).unwrap();
        let sum: f64 = g.value(s).data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9, "sum {sum}");
        assert!(g.value(s).data().iter().all(|&v| v > 0.0 && v <= 1.0));
    }
}

proptest! {
    #[test]
    fn softmax_shift_invariance_holds(values in prop::collection::vec(-50.0f64..50.0, 1..16), shift in -100.0f64..100.0) {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(values.clone()));
        let sa = g.softmax(a).unwrap();
        let b = g.constant(Tensor::vector(values.iter().map(|v| v + shift).collect()));
        let sb = g.softmax(b).unwrap();
        for (x, y) in g.value(sa).data().iter().zip(g.value(sb).data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn tokenizer_idempotent(words in prop::collection::vec("[a-z!\\.,\\?\"\\(\\)]{1,8}", 0..12)) {
        let line = words.join(" ");
        let once = kgdial::text::tokenize(&line);
        let twice = kgdial::text::tokenize(&once.join(" "));
        prop_assert_eq!(once, twice);
    }
}
