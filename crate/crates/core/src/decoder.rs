//! Decoder memory assembly, teacher-forced decoding, and generation.

use crate::error::{Error, Result};
use crate::model::{decoder_block, embed_sequence, ModelState};
use crate::numerics::graph::softmax_slice;
use crate::numerics::{Graph, Value};
use crate::text::{BOS_ID, EOS_ID, PAD_ID};

/// Cross-attention memory: root row(s) first, then all post token states.
pub struct DecoderMemory {
    pub rows: Value,
    pub n_rows: usize,
    /// How many leading rows are aggregated knowledge roots (0, 1 or 2).
    pub root_rows: usize,
}

/// Assemble the memory `[rt_one; rt_two?; E_post]`. A null `rt_one` is
/// replaced by the learned null-root parameter so the layout stays stable.
pub fn build_memory(
    g: &mut Graph,
    model: &ModelState,
    rt_one: Option<Value>,
    rt_two: Option<Value>,
    post_states: Value,
    post_rows: usize,
) -> Result<DecoderMemory> {
    if rt_two.is_some() && rt_one.is_none() {
        return Err(Error::invalid("build_memory: rt_two without rt_one"));
    }
    let root_one = match rt_one {
        Some(v) => v,
        None => g.param(&model.params, "null_root"),
    };
    let mut roots = vec![root_one];
    roots.extend(rt_two);
    let root_mat = g.stack_rows(&roots)?;
    let rows = g.concat_rows(&[root_mat, post_states])?;
    Ok(DecoderMemory {
        rows,
        n_rows: roots.len() + post_rows,
        root_rows: roots.len(),
    })
}

/// Memory consisting of the post states alone (knowledge aggregation off).
pub fn post_only_memory(post_states: Value, post_rows: usize) -> DecoderMemory {
    DecoderMemory {
        rows: post_states,
        n_rows: post_rows,
        root_rows: 0,
    }
}

/// Teacher-forced decoder pass. The prefix must start with [BOS]; row i of
/// the returned logits predicts token i+1.
pub fn decode_forward(
    g: &mut Graph,
    model: &ModelState,
    memory: &DecoderMemory,
    prefix: &[usize],
) -> Result<Value> {
    if prefix.first() != Some(&BOS_ID) {
        return Err(Error::invalid("decode_forward: prefix must start with [BOS]"));
    }
    if prefix.len() > model.config.max_resp_len + 1 {
        return Err(Error::invalid(format!(
            "decode_forward: prefix length {} exceeds {}",
            prefix.len(),
            model.config.max_resp_len + 1
        )));
    }
    let mut x = embed_sequence(g, &model.params, prefix)?;
    for layer in 0..model.config.enc.n_layers {
        x = decoder_block(
            g,
            &model.params,
            layer,
            x,
            memory.rows,
            model.config.enc.n_heads,
        )?;
    }
    let w = g.param(&model.params, "out.w");
    g.matmul(x, w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

/// Generate a response from the memory. Greedy picks the argmax each step
/// (ties to the lowest token id); beam keeps `b` hypotheses ranked by
/// length-normalized summed log-probability. [PAD] and [BOS] are never
/// emitted; generation stops at [EOS] or `max_len` tokens.
pub fn generate(
    g: &mut Graph,
    model: &ModelState,
    memory: &DecoderMemory,
    max_len: usize,
    mode: DecodeMode,
) -> Result<Vec<usize>> {
    assert!(max_len >= 1, "max_len must be at least 1");
    let max_len = max_len.min(model.config.max_resp_len);
    match mode {
        DecodeMode::Greedy => generate_beam(g, model, memory, max_len, 1),
        DecodeMode::Beam(b) => generate_beam(g, model, memory, max_len, b.max(1)),
    }
}

#[derive(Clone)]
struct Hypothesis {
    ids: Vec<usize>,
    log_prob: f64,
    finished: bool,
}

impl Hypothesis {
    fn score(&self) -> f64 {
        self.log_prob / self.ids.len().max(1) as f64
    }
}

fn generate_beam(
    g: &mut Graph,
    model: &ModelState,
    memory: &DecoderMemory,
    max_len: usize,
    beam: usize,
) -> Result<Vec<usize>> {
    let mut hyps = vec![Hypothesis {
        ids: vec![],
        log_prob: 0.0,
        finished: false,
    }];
    for _ in 0..max_len {
        if hyps.iter().all(|h| h.finished) {
            break;
        }
        let mut candidates: Vec<(f64, usize, usize, Hypothesis)> = Vec::new();
        for (pi, hyp) in hyps.iter().enumerate() {
            if hyp.finished {
                candidates.push((hyp.score(), pi, usize::MAX, hyp.clone()));
                continue;
            }
            let mut prefix = Vec::with_capacity(hyp.ids.len() + 1);
            prefix.push(BOS_ID);
            prefix.extend_from_slice(&hyp.ids);
            let logits = decode_forward(g, model, memory, &prefix)?;
            let last = g.value(logits).row_slice(prefix.len() - 1).to_vec();
            let probs = softmax_slice(&last);
            for (tok, p) in probs.iter().enumerate() {
                if tok == PAD_ID || tok == BOS_ID {
                    continue;
                }
                let mut next = hyp.clone();
                next.ids.push(tok);
                next.log_prob += p.max(f64::MIN_POSITIVE).ln();
                next.finished = tok == EOS_ID;
                candidates.push((next.score(), pi, tok, next));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        candidates.truncate(beam);
        hyps = candidates.into_iter().map(|(_, _, _, h)| h).collect();
    }
    let best = hyps
        .into_iter()
        .max_by(|a, b| {
            a.score()
                .partial_cmp(&b.score())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(b.ids.cmp(&a.ids))
        })
        .expect("at least one hypothesis");
    let mut ids = best.ids;
    if ids.last() == Some(&EOS_ID) {
        ids.pop();
    }
    Ok(ids)
}
