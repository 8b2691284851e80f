//! Joint loss (language modeling + entity selection), optimizer, and the
//! training loop with checkpointing.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kb::{RetrievedKnowledge, Triple};
use crate::model::{save_checkpoint, ModelState};
use crate::numerics::{Graph, ParamStore, Value};
use crate::pipeline::{corpus_ppl, forward_example, response_nll, Prepared};

/// Per-batch loss components. `total = l_lm + lambda1*l_es_tau +
/// lambda2*l_es_g` by construction.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossBreakdown {
    pub l_lm: f64,
    pub l_es_tau: f64,
    pub l_es_g: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// Binary selection labels: one per retrieved one-hop triple (flattened in
/// subgraph order) and one per subgraph (1 when it holds a golden triple).
pub fn entity_labels(
    retrieved: &RetrievedKnowledge,
    golden: &[Triple],
) -> (Vec<usize>, Vec<usize>) {
    let golden_keys: HashSet<(&str, &str, &str)> = golden
        .iter()
        .map(|t| (t.head.as_str(), t.relation.as_str(), t.tail.as_str()))
        .collect();
    let mut triple_labels = Vec::new();
    let mut subgraph_labels = Vec::new();
    for sg in &retrieved.one_hop {
        let mut any = 0;
        for t in &sg.triples {
            let hit = golden_keys.contains(&(t.head.as_str(), t.relation.as_str(), t.tail.as_str()));
            triple_labels.push(hit as usize);
            any |= hit as usize;
        }
        subgraph_labels.push(any);
    }
    (triple_labels, subgraph_labels)
}

/// Two-class cross-entropy of the selection heads over triples and subgraph
/// roots, each averaged over its nodes. Returns loss nodes.
pub fn entity_selection_loss(
    g: &mut Graph,
    model: &ModelState,
    flat_triple_embs: &[Value],
    subgraph_roots: &[Value],
    triple_labels: &[usize],
    subgraph_labels: &[usize],
) -> Result<(Value, Value)> {
    if flat_triple_embs.len() != triple_labels.len()
        || subgraph_roots.len() != subgraph_labels.len()
    {
        return Err(Error::invalid(format!(
            "entity_selection_loss: {} embeddings vs {} labels, {} roots vs {} labels",
            flat_triple_embs.len(),
            triple_labels.len(),
            subgraph_roots.len(),
            subgraph_labels.len()
        )));
    }
    let w_tau = g.param(&model.params, "es.w_tau");
    let w_g = g.param(&model.params, "es.w_g");

    let embs = g.stack_rows(flat_triple_embs)?;
    let tau_logits = g.matmul(embs, w_tau)?;
    let tau_nll = g.cross_entropy_rows(tau_logits, triple_labels)?;
    let l_tau = g.mean_all(tau_nll);

    let roots = g.stack_rows(subgraph_roots)?;
    let g_logits = g.matmul(roots, w_g)?;
    let g_nll = g.cross_entropy_rows(g_logits, subgraph_labels)?;
    let l_g = g.mean_all(g_nll);
    Ok((l_tau, l_g))
}

struct ExampleLoss {
    lm: f64,
    es_tau: f64,
    es_g: f64,
    grads: Option<BTreeMap<String, Vec<f64>>>,
}

/// Forward (and optionally backward) one example under the joint loss.
fn run_example(
    model: &ModelState,
    prep: &Prepared,
    lambda1: f64,
    lambda2: f64,
    want_grads: bool,
) -> Result<ExampleLoss> {
    let mut g = Graph::new();
    let fwd = forward_example(&mut g, model, prep, false)?;
    let (nll, _count) = response_nll(&mut g, model, &fwd.memory, &prep.resp_ids)?;
    let l_lm = g.mean_all(nll);

    let es = if model.config.es_heads && !fwd.triple_embs.is_empty() {
        let (triple_labels, subgraph_labels) = entity_labels(&prep.retrieved, &prep.golden);
        let flat: Vec<Value> = fwd.triple_embs.iter().flatten().copied().collect();
        Some(entity_selection_loss(
            &mut g,
            model,
            &flat,
            &fwd.subgraph_roots,
            &triple_labels,
            &subgraph_labels,
        )?)
    } else {
        None
    };

    let mut total = l_lm;
    if let Some((l_tau, l_g)) = es {
        let t1 = g.scale(l_tau, lambda1);
        let t2 = g.scale(l_g, lambda2);
        let sum = g.add(t1, t2)?;
        total = g.add(total, sum)?;
    }

    let (es_tau, es_g) = match es {
        Some((a, b)) => (g.value(a).item(), g.value(b).item()),
        None => (0.0, 0.0),
    };
    let lm = g.value(l_lm).item();
    if !g.value(total).item().is_finite() {
        return Err(Error::NonFinite("example loss".into()));
    }

    let grads = if want_grads {
        let gr = g.backward(total);
        let mut map = BTreeMap::new();
        for name in gr.param_names().map(str::to_string).collect::<Vec<_>>() {
            if let Some(slice) = gr.named(&name) {
                map.insert(name, slice.to_vec());
            }
        }
        Some(map)
    } else {
        None
    };

    Ok(ExampleLoss {
        lm,
        es_tau,
        es_g,
        grads,
    })
}

fn summarize(parts: &[ExampleLoss], lambda1: f64, lambda2: f64) -> LossBreakdown {
    let n = parts.len().max(1) as f64;
    let l_lm = parts.iter().map(|p| p.lm).sum::<f64>() / n;
    let l_es_tau = parts.iter().map(|p| p.es_tau).sum::<f64>() / n;
    let l_es_g = parts.iter().map(|p| p.es_g).sum::<f64>() / n;
    LossBreakdown {
        l_lm,
        l_es_tau,
        l_es_g,
        total: l_lm + lambda1 * l_es_tau + lambda2 * l_es_g,
        lambda1,
        lambda2,
    }
}

/// Full-pipeline batch loss without gradients.
pub fn compute_loss(
    model: &ModelState,
    batch: &[Prepared],
    lambda1: f64,
    lambda2: f64,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::invalid("compute_loss: empty batch"));
    }
    let parts: Result<Vec<ExampleLoss>> = batch
        .par_iter()
        .map(|p| run_example(model, p, lambda1, lambda2, false))
        .collect();
    Ok(summarize(&parts?, lambda1, lambda2))
}

/// Batch loss with gradients accumulated into the parameter store, scaled by
/// 1/batch. Examples run in parallel; accumulation happens in input order so
/// results are bit-reproducible.
pub fn compute_loss_and_grads(
    model: &mut ModelState,
    batch: &[Prepared],
    lambda1: f64,
    lambda2: f64,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::invalid("compute_loss: empty batch"));
    }
    let shared: &ModelState = model;
    let parts: Result<Vec<ExampleLoss>> = batch
        .par_iter()
        .map(|p| run_example(shared, p, lambda1, lambda2, true))
        .collect();
    let parts = parts?;
    let scale = 1.0 / batch.len() as f64;
    model.params.zero_grads();
    for part in &parts {
        for (name, grad) in part.grads.as_ref().expect("grads requested") {
            model.params.accumulate_grad(name, grad, scale);
        }
    }
    Ok(summarize(&parts, lambda1, lambda2))
}

/// Adam with fixed learning rate and optional global-norm clipping.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: usize,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, clip_norm: Option<f64>) {
        let mut scale = 1.0;
        if let Some(clip) = clip_norm {
            let norm: f64 = params
                .iter()
                .filter_map(|(_, t)| t.grad.as_ref())
                .flat_map(|g| g.iter().map(|x| x * x))
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                scale = clip / norm;
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let tensor = params.get_mut(&name).expect("param");
            let n = tensor.len();
            let grad: Vec<f64> = match &tensor.grad {
                Some(g) => g.iter().map(|x| x * scale).collect(),
                None => continue,
            };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let data = tensor.data_mut();
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub clip_norm: f64,
    pub eval_every: usize,
    pub log_every: usize,
    pub seed: u64,
    /// Cap on validation examples per evaluation pass (0 = all).
    pub val_max: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 1000,
            batch_size: 16,
            lr: 3e-4,
            lambda1: 1.0,
            lambda2: 1.0,
            clip_norm: 1.0,
            eval_every: 100,
            log_every: 25,
            seed: 0,
            val_max: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub l_lm: f64,
    pub l_es_tau: f64,
    pub l_es_g: f64,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_ppl: Option<f64>,
}

pub struct TrainOutcome {
    pub log: Vec<TrainLogEntry>,
    pub best_val_ppl: f64,
    pub best_step: usize,
    pub final_l_lm: f64,
    /// Parameters at the best validation perplexity.
    pub best_model: ModelState,
    pub best_checkpoint: Option<PathBuf>,
}

/// Train with shuffled batches and periodic validation; keeps the
/// best-validation parameters (and writes best/last checkpoints plus a JSONL
/// log when `out_dir` is given).
pub fn train(
    model: &mut ModelState,
    train_set: &[Prepared],
    valid_set: &[Prepared],
    opts: &TrainOptions,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::invalid("train: empty training set"));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| crate::error::io_err(dir, e))?;
    }
    let val_slice = if opts.val_max > 0 && valid_set.len() > opts.val_max {
        &valid_set[..opts.val_max]
    } else {
        valid_set
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;

    let mut adam = Adam::new(opts.lr);
    let mut log = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_step = 0;
    let mut best_model = model.clone();
    let mut last_lm = f64::NAN;

    for step in 1..=opts.steps {
        let mut batch: Vec<Prepared> = Vec::with_capacity(opts.batch_size);
        let mut batch_indices = Vec::with_capacity(opts.batch_size);
        for _ in 0..opts.batch_size.min(train_set.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch_indices.push(order[cursor]);
            batch.push(train_set[order[cursor]].clone());
            cursor += 1;
        }

        let breakdown = match compute_loss_and_grads(model, &batch, opts.lambda1, opts.lambda2) {
            Ok(b) => b,
            Err(Error::NonFinite(what)) => {
                let dump = dump_bad_batch(out_dir, step, &batch_indices, &batch);
                return Err(Error::NonFinite(format!(
                    "{what} at step {step}{}",
                    dump.map(|p| format!(" (batch dumped to {})", p.display()))
                        .unwrap_or_default()
                )));
            }
            Err(e) => return Err(e),
        };
        if !breakdown.total.is_finite() {
            let dump = dump_bad_batch(out_dir, step, &batch_indices, &batch);
            return Err(Error::NonFinite(format!(
                "loss at step {step}{}",
                dump.map(|p| format!(" (batch dumped to {})", p.display()))
                    .unwrap_or_default()
            )));
        }
        adam.step(&mut model.params, Some(opts.clip_norm));
        last_lm = breakdown.l_lm;

        let val_due = step % opts.eval_every == 0 || step == opts.steps;
        let val_ppl = if val_due && !val_slice.is_empty() {
            let ppl = corpus_ppl(model, val_slice)?;
            if ppl < best_val {
                best_val = ppl;
                best_step = step;
                best_model = model.clone();
                if let Some(dir) = out_dir {
                    save_checkpoint(&best_model, &dir.join("best.ckpt"))?;
                }
            }
            Some(ppl)
        } else {
            None
        };

        if step % opts.log_every == 0 || val_ppl.is_some() || step == 1 {
            log.push(TrainLogEntry {
                step,
                l_lm: breakdown.l_lm,
                l_es_tau: breakdown.l_es_tau,
                l_es_g: breakdown.l_es_g,
                total: breakdown.total,
                val_ppl,
            });
        }
    }

    if valid_set.is_empty() {
        // No validation: the final parameters are the kept model.
        best_model = model.clone();
        best_step = opts.steps;
        if let Some(dir) = out_dir {
            save_checkpoint(&best_model, &dir.join("best.ckpt"))?;
        }
    }

    let mut best_checkpoint = None;
    if let Some(dir) = out_dir {
        save_checkpoint(model, &dir.join("last.ckpt"))?;
        best_checkpoint = Some(dir.join("best.ckpt"));
        let mut lines = String::new();
        for entry in &log {
            lines.push_str(&serde_json::to_string(entry).expect("log entry serializes"));
            lines.push('\n');
        }
        let log_path = dir.join("train_log.jsonl");
        std::fs::write(&log_path, lines).map_err(|e| crate::error::io_err(&log_path, e))?;
    }

    Ok(TrainOutcome {
        log,
        best_val_ppl: best_val,
        best_step,
        final_l_lm: last_lm,
        best_model,
        best_checkpoint,
    })
}

fn dump_bad_batch(
    out_dir: Option<&Path>,
    step: usize,
    indices: &[usize],
    batch: &[Prepared],
) -> Option<PathBuf> {
    let dir = out_dir?;
    let path = dir.join("diagnostic_dump.json");
    let payload = serde_json::json!({
        "step": step,
        "example_indices": indices,
        "posts": batch.iter().map(|p| p.post_tokens.join(" ")).collect::<Vec<_>>(),
        "responses": batch.iter().map(|p| p.resp_tokens.join(" ")).collect::<Vec<_>>(),
    });
    std::fs::write(&path, payload.to_string()).ok()?;
    Some(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::{KnowledgeBase, SubGraph};

    fn kb3() -> KnowledgeBase {
        KnowledgeBase::from_triples(vec![
            ("beer".into(), "IsA".into(), "drink".into()),
            ("beer".into(), "UsedFor".into(), "fun".into()),
            ("song".into(), "IsA".into(), "music".into()),
        ])
        .unwrap()
    }

    fn retrieved(kb: &KnowledgeBase) -> RetrievedKnowledge {
        RetrievedKnowledge {
            one_hop: vec![
                SubGraph {
                    anchor_entity: "beer".into(),
                    triples: vec![kb.triple(0).clone(), kb.triple(1).clone()],
                },
                SubGraph {
                    anchor_entity: "song".into(),
                    triples: vec![kb.triple(2).clone()],
                },
            ],
            two_hop: None,
        }
    }

    #[test]
    fn labels_mark_matching_triples_and_their_subgraphs() {
        let kb = kb3();
        let r = retrieved(&kb);
        let golden = vec![kb.triple(0).clone()];
        let (t, s) = entity_labels(&r, &golden);
        assert_eq!(t, vec![1, 0, 0]);
        assert_eq!(s, vec![1, 0]);
    }

    #[test]
    fn empty_golden_gives_all_zero_labels() {
        let kb = kb3();
        let r = retrieved(&kb);
        let (t, s) = entity_labels(&r, &[]);
        assert!(t.iter().all(|&x| x == 0));
        assert!(s.iter().all(|&x| x == 0));
    }

    #[test]
    fn labels_match_brute_force_membership() {
        let kb = kb3();
        let r = retrieved(&kb);
        let golden = vec![kb.triple(2).clone(), kb.triple(1).clone()];
        let (t, s) = entity_labels(&r, &golden);
        // Brute force: scan every retrieved triple against the golden list.
        let mut want_t = Vec::new();
        let mut want_s = Vec::new();
        for sg in &r.one_hop {
            let mut any = 0;
            for triple in &sg.triples {
                let hit = golden.iter().any(|g| {
                    g.head == triple.head && g.relation == triple.relation && g.tail == triple.tail
                }) as usize;
                want_t.push(hit);
                any |= hit;
            }
            want_s.push(any);
        }
        assert_eq!(t, want_t);
        assert_eq!(s, want_s);
    }
}
