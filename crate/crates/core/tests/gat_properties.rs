//! Algebraic properties of the context-aware attention layers on random
//! instances: normalization, convex-hull bounds, permutation behavior,
//! context sensitivity, and naive-formula oracle equality.

use kgdial::gat::{aggregate_graph, aggregate_subgraph, aggregate_two_hop};
use kgdial::numerics::{grad_check, Graph, ParamStore, Tensor, Value};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const D: usize = 8;

fn rand_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect()
}

struct Instance {
    embs: Vec<Vec<f64>>,
    ctx: Vec<f64>,
    w: Vec<f64>,
}

fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.gen_range(1..=6);
    Instance {
        embs: (0..n).map(|_| rand_vec(rng, D)).collect(),
        ctx: rand_vec(rng, D),
        w: rand_vec(rng, 2 * D),
    }
}

fn run(inst: &Instance) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let embs: Vec<Value> = inst
        .embs
        .iter()
        .map(|e| g.constant(Tensor::vector(e.clone())))
        .collect();
    let c = g.constant(Tensor::vector(inst.ctx.clone()));
    let w = g.constant(Tensor::vector(inst.w.clone()));
    let (root, attn) = aggregate_subgraph(&mut g, &embs, c, w).unwrap();
    (
        g.value(root).data().to_vec(),
        g.value(attn).data().to_vec(),
    )
}

#[test]
fn attention_groups_sum_to_one_on_1000_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for _ in 0..1000 {
        let inst = random_instance(&mut rng);
        let (_, attn) = run(&inst);
        let s: f64 = attn.iter().sum();
        assert!((s - 1.0).abs() < 1e-6, "sum {s}");
        assert!(attn.iter().all(|&a| a > 0.0 && a <= 1.0));
    }
}

#[test]
fn roots_lie_in_coordinatewise_convex_hull() {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    for _ in 0..1000 {
        let inst = random_instance(&mut rng);
        let (root, _) = run(&inst);
        for j in 0..D {
            let lo = inst
                .embs
                .iter()
                .map(|e| e[j])
                .fold(f64::INFINITY, f64::min);
            let hi = inst
                .embs
                .iter()
                .map(|e| e[j])
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(
                root[j] >= lo - 1e-9 && root[j] <= hi + 1e-9,
                "coordinate {j}: {} outside [{lo}, {hi}]",
                root[j]
            );
        }
    }
}

#[test]
fn permuting_triples_permutes_attention_and_preserves_root() {
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    for _ in 0..200 {
        let mut inst = random_instance(&mut rng);
        if inst.embs.len() < 2 {
            inst.embs.push(rand_vec(&mut rng, D));
        }
        let (root_a, attn_a) = run(&inst);

        // Rotate the triple list by one.
        let mut rotated = inst.embs.clone();
        rotated.rotate_left(1);
        let inst_b = Instance {
            embs: rotated,
            ctx: inst.ctx.clone(),
            w: inst.w.clone(),
        };
        let (root_b, attn_b) = run(&inst_b);

        let n = attn_a.len();
        for i in 0..n {
            let j = (i + 1) % n;
            assert!((attn_a[j] - attn_b[i]).abs() < 1e-9);
        }
        for j in 0..D {
            assert!((root_a[j] - root_b[j]).abs() < 1e-9);
        }
    }
}

#[test]
fn permuting_subgraph_roots_preserves_global_root() {
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    for _ in 0..200 {
        let k = rng.gen_range(2..=5);
        let roots: Vec<Vec<f64>> = (0..k).map(|_| rand_vec(&mut rng, D)).collect();
        let ctx = rand_vec(&mut rng, D);
        let w = rand_vec(&mut rng, 2 * D);
        let eval = |order: &[usize]| {
            let mut g = Graph::new();
            let rs: Vec<Value> = order
                .iter()
                .map(|&i| g.constant(Tensor::vector(roots[i].clone())))
                .collect();
            let c = g.constant(Tensor::vector(ctx.clone()));
            let wn = g.constant(Tensor::vector(w.clone()));
            let (global, _) = aggregate_graph(&mut g, &rs, c, wn).unwrap();
            g.value(global).data().to_vec()
        };
        let fwd: Vec<usize> = (0..k).collect();
        let mut rev = fwd.clone();
        rev.reverse();
        let a = eval(&fwd);
        let b = eval(&rev);
        for j in 0..D {
            assert!((a[j] - b[j]).abs() < 1e-9);
        }
    }
}

#[test]
fn context_changes_attention_on_most_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let mut differing = 0;
    let total = 100;
    for _ in 0..total {
        let mut inst = random_instance(&mut rng);
        while inst.embs.len() < 2 {
            inst.embs.push(rand_vec(&mut rng, D));
        }
        let (_, attn_a) = run(&inst);
        let inst_b = Instance {
            embs: inst.embs.clone(),
            ctx: rand_vec(&mut rng, D),
            w: inst.w.clone(),
        };
        let (_, attn_b) = run(&inst_b);
        let max_diff = attn_a
            .iter()
            .zip(&attn_b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        if max_diff > 1e-6 {
            differing += 1;
        }
    }
    assert!(differing >= 95, "only {differing}/{total} instances differ");
}

#[test]
fn two_layer_composition_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(600);
    for _ in 0..100 {
        let n_sub = rng.gen_range(1..=4);
        let groups: Vec<Vec<Vec<f64>>> = (0..n_sub)
            .map(|_| {
                let n = rng.gen_range(1..=5);
                (0..n).map(|_| rand_vec(&mut rng, D)).collect()
            })
            .collect();
        let ctx = rand_vec(&mut rng, D);
        let w_g = rand_vec(&mut rng, 2 * D);
        let w_gsub = rand_vec(&mut rng, 2 * D);

        let mut g = Graph::new();
        let c = g.constant(Tensor::vector(ctx.clone()));
        let wg = g.constant(Tensor::vector(w_g.clone()));
        let wgs = g.constant(Tensor::vector(w_gsub.clone()));
        let mut roots = Vec::new();
        for group in &groups {
            let embs: Vec<Value> = group
                .iter()
                .map(|e| g.constant(Tensor::vector(e.clone())))
                .collect();
            let (root, _) = aggregate_subgraph(&mut g, &embs, c, wg).unwrap();
            roots.push(root);
        }
        let (global, _) = aggregate_graph(&mut g, &roots, c, wgs).unwrap();
        let got = g.value(global).data().to_vec();

        // Independent naive evaluation.
        let softmax = |betas: &[f64]| {
            let m = betas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = betas.iter().map(|b| (b - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|x| x / z).collect::<Vec<f64>>()
        };
        let score = |v: &[f64], w: &[f64]| -> f64 {
            v.iter()
                .chain(&ctx)
                .zip(w)
                .map(|(x, y)| x * y)
                .sum()
        };
        let naive_roots: Vec<Vec<f64>> = groups
            .iter()
            .map(|group| {
                let betas: Vec<f64> = group.iter().map(|e| score(e, &w_g)).collect();
                let a = softmax(&betas);
                let mut root = vec![0.0; D];
                for (aj, e) in a.iter().zip(group) {
                    for j in 0..D {
                        root[j] += aj * e[j];
                    }
                }
                root
            })
            .collect();
        let betas: Vec<f64> = naive_roots.iter().map(|r| score(r, &w_gsub)).collect();
        let a = softmax(&betas);
        let mut want = vec![0.0; D];
        for (ai, r) in a.iter().zip(&naive_roots) {
            for j in 0..D {
                want[j] += ai * r[j];
            }
        }
        for j in 0..D {
            assert!((got[j] - want[j]).abs() < 1e-12, "coordinate {j}");
        }
    }
}

#[test]
fn two_hop_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(700);
    for _ in 0..100 {
        let n_sub = rng.gen_range(1..=3);
        let groups: Vec<Vec<Vec<f64>>> = (0..n_sub)
            .map(|_| {
                let n = rng.gen_range(1..=4);
                (0..n).map(|_| rand_vec(&mut rng, D)).collect()
            })
            .collect();
        let rt1 = rand_vec(&mut rng, D);
        let ctx = rand_vec(&mut rng, D);
        let w2 = rand_vec(&mut rng, 3 * D);
        let wg2 = rand_vec(&mut rng, 3 * D);

        let mut g = Graph::new();
        let rt1_n = g.constant(Tensor::vector(rt1.clone()));
        let c = g.constant(Tensor::vector(ctx.clone()));
        let w2_n = g.constant(Tensor::vector(w2.clone()));
        let wg2_n = g.constant(Tensor::vector(wg2.clone()));
        let group_nodes: Vec<Vec<Value>> = groups
            .iter()
            .map(|group| {
                group
                    .iter()
                    .map(|e| g.constant(Tensor::vector(e.clone())))
                    .collect()
            })
            .collect();
        let (rt2, _, _) =
            aggregate_two_hop(&mut g, &group_nodes, rt1_n, c, w2_n, wg2_n).unwrap();
        let got = g.value(rt2).data().to_vec();

        let softmax = |betas: &[f64]| {
            let m = betas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = betas.iter().map(|b| (b - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|x| x / z).collect::<Vec<f64>>()
        };
        let score3 = |v: &[f64], w: &[f64]| -> f64 {
            v.iter()
                .chain(&rt1)
                .chain(&ctx)
                .zip(w)
                .map(|(x, y)| x * y)
                .sum()
        };
        let naive_roots: Vec<Vec<f64>> = groups
            .iter()
            .map(|group| {
                let betas: Vec<f64> = group.iter().map(|e| score3(e, &w2)).collect();
                let a = softmax(&betas);
                let mut root = vec![0.0; D];
                for (aj, e) in a.iter().zip(group) {
                    for j in 0..D {
                        root[j] += aj * e[j];
                    }
                }
                root
            })
            .collect();
        let betas: Vec<f64> = naive_roots.iter().map(|r| score3(r, &wg2)).collect();
        let a = softmax(&betas);
        let mut want = vec![0.0; D];
        for (ai, r) in a.iter().zip(&naive_roots) {
            for j in 0..D {
                want[j] += ai * r[j];
            }
        }
        for j in 0..D {
            assert!((got[j] - want[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn composed_aggregation_is_differentiable() {
    // grad_check through aggregate_subgraph ∘ aggregate_graph with a scalar
    // readout over the trainable score vectors and triple embeddings.
    let mut params = ParamStore::new(77);
    params.add_uniform("w_g", vec![2 * D], 2 * D).unwrap();
    params.add_uniform("w_gsub", vec![2 * D], 2 * D).unwrap();
    params.add_uniform("e0", vec![D], D).unwrap();
    params.add_uniform("e1", vec![D], D).unwrap();
    params.add_uniform("e2", vec![D], D).unwrap();
    params.add_uniform("ctx", vec![D], D).unwrap();

    let err = grad_check(
        |p, g| {
            let w_g = g.param(p, "w_g");
            let w_gsub = g.param(p, "w_gsub");
            let c = g.param(p, "ctx");
            let e0 = g.param(p, "e0");
            let e1 = g.param(p, "e1");
            let e2 = g.param(p, "e2");
            let (r1, _) = aggregate_subgraph(g, &[e0, e1], c, w_g)?;
            let (r2, _) = aggregate_subgraph(g, &[e2], c, w_g)?;
            let (global, _) = aggregate_graph(g, &[r1, r2], c, w_gsub)?;
            // Non-linear readout so every coordinate matters.
            let sq = g.mul(global, global)?;
            Ok(g.sum_all(sq))
        },
        &mut params,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-6, "max rel err {err}");
}
