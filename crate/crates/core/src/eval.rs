//! Automatic metrics, frequency-bucketed evaluation, and attention analysis.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::decoder::{generate, DecodeMode};
use crate::error::{Error, Result};
use crate::kb::{match_entities, KnowledgeBase};
use crate::model::ModelState;
use crate::numerics::Graph;
use crate::pipeline::{corpus_ppl, forward_example, PipelineContext, Prepared};
use crate::text::DialogueExample;

// ---------------------------------------------------------------------------
// n-gram utilities
// ---------------------------------------------------------------------------

fn ngrams(tokens: &[String], n: usize) -> Vec<Vec<String>> {
    if tokens.len() < n || n == 0 {
        return vec![];
    }
    tokens.windows(n).map(|w| w.to_vec()).collect()
}

fn counts(tokens: &[String], n: usize) -> HashMap<Vec<String>, usize> {
    let mut map = HashMap::new();
    for g in ngrams(tokens, n) {
        *map.entry(g).or_insert(0) += 1;
    }
    map
}

// ---------------------------------------------------------------------------
// Reference-based metrics
// ---------------------------------------------------------------------------

/// Corpus BLEU-n: geometric mean of modified 1..n-gram precisions times the
/// brevity penalty. For n >= 2, a zero match count falls back to add-one
/// smoothing; an order with no n-grams at all scores zero.
pub fn bleu_n(hypotheses: &[Vec<String>], references: &[Vec<String>], n: usize) -> Result<f64> {
    check_aligned(hypotheses, references, n)?;
    let mut log_sum = 0.0;
    for k in 1..=n {
        let mut matched = 0usize;
        let mut total = 0usize;
        for (hyp, rf) in hypotheses.iter().zip(references) {
            let hc = counts(hyp, k);
            let rc = counts(rf, k);
            for (g, c) in &hc {
                matched += (*c).min(rc.get(g).copied().unwrap_or(0));
            }
            total += hyp.len().saturating_sub(k - 1);
        }
        let p = if total == 0 {
            0.0
        } else if matched == 0 && k >= 2 {
            1.0 / (total + 1) as f64
        } else {
            matched as f64 / total as f64
        };
        if p == 0.0 {
            return Ok(0.0);
        }
        log_sum += p.ln();
    }
    let c: usize = hypotheses.iter().map(Vec::len).sum();
    let r: usize = references.iter().map(Vec::len).sum();
    if c == 0 {
        return Ok(0.0);
    }
    let bp = if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    Ok(bp * (log_sum / n as f64).exp())
}

/// NIST-n: information-weighted n-gram precision summed over orders 1..n,
/// times the NIST brevity factor. Information weights come from the
/// reference corpus.
pub fn nist_n(hypotheses: &[Vec<String>], references: &[Vec<String>], n: usize) -> Result<f64> {
    check_aligned(hypotheses, references, n)?;
    // Reference-corpus n-gram counts for information weights.
    let mut ref_counts: Vec<HashMap<Vec<String>, usize>> = vec![HashMap::new(); n + 1];
    let mut total_ref_unigrams = 0usize;
    for rf in references {
        total_ref_unigrams += rf.len();
        for (k, slot) in ref_counts.iter_mut().enumerate().take(n + 1).skip(1) {
            for g in ngrams(rf, k) {
                *slot.entry(g).or_insert(0) += 1;
            }
        }
    }
    let info = |gram: &[String]| -> f64 {
        let k = gram.len();
        let ck = ref_counts[k].get(gram).copied().unwrap_or(0);
        if ck == 0 {
            return 0.0;
        }
        let parent = if k == 1 {
            total_ref_unigrams
        } else {
            ref_counts[k - 1]
                .get(&gram[..k - 1].to_vec())
                .copied()
                .unwrap_or(0)
        };
        if parent == 0 {
            0.0
        } else {
            (parent as f64 / ck as f64).log2()
        }
    };

    let mut score = 0.0;
    for k in 1..=n {
        let mut weighted = 0.0;
        let mut total = 0usize;
        for (hyp, rf) in hypotheses.iter().zip(references) {
            let hc = counts(hyp, k);
            let rc = counts(rf, k);
            for (g, c) in &hc {
                let co = (*c).min(rc.get(g).copied().unwrap_or(0));
                if co > 0 {
                    weighted += co as f64 * info(g);
                }
            }
            total += hyp.len().saturating_sub(k - 1);
        }
        if total > 0 {
            score += weighted / total as f64;
        }
    }

    let c: usize = hypotheses.iter().map(Vec::len).sum();
    let r: usize = references.iter().map(Vec::len).sum();
    if c == 0 || r == 0 {
        return Ok(0.0);
    }
    let beta = 0.5f64.ln() / (2.0f64 / 3.0).ln().powi(2);
    let ratio = (c as f64 / r as f64).min(1.0);
    let brevity = (beta * ratio.ln().powi(2)).exp();
    Ok(score * brevity)
}

/// Exact-token METEOR variant: F-mean with recall weighted 9:1, times the
/// standard chunk fragmentation penalty. No stemming or synonymy.
pub fn meteor_lite(hypotheses: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    check_aligned(hypotheses, references, 1)?;
    let mut matches = 0usize;
    let mut chunks = 0usize;
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, rf) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len();
        ref_len += rf.len();
        let (m, ch) = align_exact(hyp, rf);
        matches += m;
        chunks += ch;
    }
    if matches == 0 || hyp_len == 0 || ref_len == 0 {
        return Ok(0.0);
    }
    let p = matches as f64 / hyp_len as f64;
    let r = matches as f64 / ref_len as f64;
    let f = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / matches as f64).powi(3);
    Ok(f * (1.0 - penalty))
}

/// Greedy left-to-right exact alignment: each hypothesis token takes the
/// leftmost unused identical reference token. Returns (matches, chunks)
/// where a chunk is a maximal run contiguous on both sides.
fn align_exact(hyp: &[String], rf: &[String]) -> (usize, usize) {
    let mut used = vec![false; rf.len()];
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for (hi, tok) in hyp.iter().enumerate() {
        for (ri, rtok) in rf.iter().enumerate() {
            if !used[ri] && rtok == tok {
                used[ri] = true;
                pairs.push((hi, ri));
                break;
            }
        }
    }
    if pairs.is_empty() {
        return (0, 0);
    }
    let mut chunks = 1;
    for w in pairs.windows(2) {
        if w[1].0 != w[0].0 + 1 || w[1].1 != w[0].1 + 1 {
            chunks += 1;
        }
    }
    (pairs.len(), chunks)
}

fn check_aligned(h: &[Vec<String>], r: &[Vec<String>], n: usize) -> Result<()> {
    if h.is_empty() || r.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    if h.len() != r.len() {
        return Err(Error::invalid(format!(
            "{} hypotheses vs {} references",
            h.len(),
            r.len()
        )));
    }
    if !(1..=4).contains(&n) {
        return Err(Error::invalid(format!("n-gram order {n} out of range 1..=4")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Unreferenced metrics
// ---------------------------------------------------------------------------

/// Distinct n-grams over total n-grams across the corpus.
pub fn dist_n(responses: &[Vec<String>], n: usize) -> Result<f64> {
    if responses.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    let mut distinct = HashMap::new();
    let mut total = 0usize;
    for r in responses {
        for g in ngrams(r, n) {
            *distinct.entry(g).or_insert(0usize) += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Ok(0.0);
    }
    Ok(distinct.len() as f64 / total as f64)
}

/// Shannon entropy of the corpus n-gram frequency distribution.
pub fn ent_n(responses: &[Vec<String>], n: usize) -> Result<f64> {
    if responses.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    let mut freq: HashMap<Vec<String>, usize> = HashMap::new();
    let mut total = 0usize;
    for r in responses {
        for g in ngrams(r, n) {
            *freq.entry(g).or_insert(0) += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Ok(0.0);
    }
    let total = total as f64;
    Ok(freq
        .values()
        .map(|&f| {
            let p = f as f64 / total;
            -p * p.ln()
        })
        .sum())
}

/// Mean per-response count of tokens that are KB entities.
pub fn entity_score(responses: &[Vec<String>], kb: &KnowledgeBase) -> Result<f64> {
    if responses.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    let total: usize = responses
        .iter()
        .map(|r| r.iter().filter(|t| kb.is_entity(t)).count())
        .sum();
    Ok(total as f64 / responses.len() as f64)
}

// ---------------------------------------------------------------------------
// Perplexity and generation
// ---------------------------------------------------------------------------

/// Corpus perplexity under teacher forcing ([EOS] counted, [PAD] never fed).
pub fn ppl(model: &ModelState, corpus: &[Prepared]) -> Result<f64> {
    corpus_ppl(model, corpus)
}

/// Generate a response for each example; returns token sequences.
pub fn generate_all(
    model: &ModelState,
    ctx: &PipelineContext,
    corpus: &[Prepared],
    mode: DecodeMode,
) -> Result<Vec<Vec<String>>> {
    let outs: Result<Vec<Vec<String>>> = corpus
        .par_iter()
        .map(|prep| {
            let mut g = Graph::new();
            let fwd = forward_example(&mut g, model, prep, false)?;
            let ids = generate(
                &mut g,
                model,
                &fwd.memory,
                model.config.max_resp_len,
                mode,
            )?;
            Ok(ctx.vocab.decode(&ids))
        })
        .collect();
    outs
}

// ---------------------------------------------------------------------------
// Frequency buckets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    High,
    Medium,
    Low,
    Oov,
}

impl Bucket {
    pub fn name(&self) -> &'static str {
        match self {
            Bucket::High => "high",
            Bucket::Medium => "medium",
            Bucket::Low => "low",
            Bucket::Oov => "oov",
        }
    }
}

/// Assign each test example to a frequency bucket. The per-example statistic
/// is the mean training-post frequency of its matched entities; terciles of
/// that statistic over entity-bearing test examples define low/medium/high,
/// and examples matching no entity go to the OOV bucket.
pub fn bucket_by_frequency(
    test: &[DialogueExample],
    train: &[DialogueExample],
    kb: &KnowledgeBase,
    stopwords: &std::collections::HashSet<String>,
) -> Vec<Bucket> {
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for ex in train {
        for tok in &ex.post {
            if kb.is_entity(tok) && !stopwords.contains(tok) {
                *freq.entry(tok.as_str()).or_insert(0) += 1;
            }
        }
    }
    let stats: Vec<Option<f64>> = test
        .iter()
        .map(|ex| {
            let matched = match_entities(&ex.post, kb, stopwords);
            if matched.is_empty() {
                None
            } else {
                let sum: usize = matched
                    .iter()
                    .map(|e| freq.get(e.as_str()).copied().unwrap_or(0))
                    .sum();
                Some(sum as f64 / matched.len() as f64)
            }
        })
        .collect();

    let mut ranked: Vec<(f64, usize)> = stats
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.map(|v| (v, i)))
        .collect();
    ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let n = ranked.len();
    let mut out = vec![Bucket::Oov; test.len()];
    for (rank, (_, idx)) in ranked.iter().enumerate() {
        out[*idx] = if rank < n / 3 {
            Bucket::Low
        } else if rank < 2 * n / 3 {
            Bucket::Medium
        } else {
            Bucket::High
        };
    }
    out
}

// ---------------------------------------------------------------------------
// Metric report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct BucketReport {
    pub examples: usize,
    pub ppl: f64,
    pub entity_score: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub ppl: f64,
    pub bleu: [f64; 4],
    pub nist: [f64; 4],
    pub meteor_lite: f64,
    pub dist: [f64; 2],
    pub ent4: f64,
    pub entity_score: f64,
    pub buckets: BTreeMap<String, BucketReport>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Full evaluation: perplexity, generation, reference and unreferenced
/// metrics, and per-bucket perplexity/entity score.
pub fn evaluate(
    model: &ModelState,
    ctx: &PipelineContext,
    test: &[DialogueExample],
    test_prep: &[Prepared],
    train: &[DialogueExample],
    mode: DecodeMode,
) -> Result<(MetricReport, Vec<Vec<String>>)> {
    if test.is_empty() {
        return Err(Error::invalid("evaluate: empty corpus"));
    }
    let refs: Vec<Vec<String>> = test.iter().map(|ex| ex.response.clone()).collect();
    let hyps = generate_all(model, ctx, test_prep, mode)?;
    let overall_ppl = ppl(model, test_prep)?;

    let mut bleu = [0.0; 4];
    let mut nist = [0.0; 4];
    for k in 1..=4 {
        bleu[k - 1] = bleu_n(&hyps, &refs, k)?;
        nist[k - 1] = nist_n(&hyps, &refs, k)?;
    }
    let meteor = meteor_lite(&hyps, &refs)?;
    let dist = [dist_n(&hyps, 1)?, dist_n(&hyps, 2)?];
    let ent4 = ent_n(&hyps, 4)?;
    let es = entity_score(&hyps, &ctx.kb)?;

    let assignment = bucket_by_frequency(test, train, &ctx.kb, &ctx.rules.stopwords);
    let mut buckets = BTreeMap::new();
    for bucket in [Bucket::High, Bucket::Medium, Bucket::Low, Bucket::Oov] {
        let idxs: Vec<usize> = (0..test.len())
            .filter(|&i| assignment[i] == bucket)
            .collect();
        let report = if idxs.is_empty() {
            BucketReport {
                examples: 0,
                ppl: 0.0,
                entity_score: 0.0,
            }
        } else {
            let sub_prep: Vec<Prepared> = idxs.iter().map(|&i| test_prep[i].clone()).collect();
            let sub_hyps: Vec<Vec<String>> = idxs.iter().map(|&i| hyps[i].clone()).collect();
            BucketReport {
                examples: idxs.len(),
                ppl: ppl(model, &sub_prep)?,
                entity_score: entity_score(&sub_hyps, &ctx.kb)?,
            }
        };
        buckets.insert(bucket.name().to_string(), report);
    }

    Ok((
        MetricReport {
            ppl: overall_ppl,
            bleu,
            nist,
            meteor_lite: meteor,
            dist,
            ent4,
            entity_score: es,
            buckets,
        },
        hyps,
    ))
}

// ---------------------------------------------------------------------------
// Attention analysis
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnTag {
    Golden,
    Output,
    Other,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttentionRow {
    pub example_id: usize,
    pub triple_id: usize,
    pub weight: f64,
    pub tag: AttnTag,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttentionSummary {
    pub triples: usize,
    pub mean_golden: f64,
    pub mean_output: f64,
    pub mean_other: f64,
    pub mean_overall: f64,
    pub mean_non_golden: f64,
}

/// First-layer attention weights per retrieved triple, tagged golden (in the
/// example's golden set), output (head or tail token appears in the
/// generated response) or other. Rows cover one-hop and, when present,
/// two-hop groups.
pub fn attention_report(
    model: &ModelState,
    ctx: &PipelineContext,
    corpus: &[Prepared],
) -> Result<(Vec<AttentionRow>, AttentionSummary)> {
    if model.config.mean_pool_aggregation || !model.config.ca_gat {
        return Err(Error::Config(
            "attention report requires attention aggregation (ca_gat on, mean-pool off)".into(),
        ));
    }
    let per_example: Result<Vec<Vec<AttentionRow>>> = corpus
        .par_iter()
        .enumerate()
        .map(|(ei, prep)| {
            let mut g = Graph::new();
            let fwd = forward_example(&mut g, model, prep, true)?;
            let mut rows = Vec::new();
            let Some(trace) = fwd.trace else {
                return Ok(rows);
            };
            let gen_ids = generate(
                &mut g,
                model,
                &fwd.memory,
                model.config.max_resp_len,
                DecodeMode::Greedy,
            )?;
            let gen_tokens = ctx.vocab.decode(&gen_ids);
            let golden_ids: Vec<usize> = prep.golden.iter().map(|t| t.id).collect();

            let push_group = |items: &[(usize, f64)], rows: &mut Vec<AttentionRow>| {
                for &(tid, w) in items {
                    let triple = ctx.kb.triple(tid);
                    let tag = if golden_ids.contains(&tid) {
                        AttnTag::Golden
                    } else if gen_tokens.contains(&triple.head)
                        || gen_tokens.contains(&triple.tail)
                    {
                        AttnTag::Output
                    } else {
                        AttnTag::Other
                    };
                    rows.push(AttentionRow {
                        example_id: ei,
                        triple_id: tid,
                        weight: w,
                        tag,
                    });
                }
            };
            for sg in &trace.per_subgraph {
                push_group(sg, &mut rows);
            }
            for sg in &trace.two_hop_per_subgraph {
                push_group(sg, &mut rows);
            }
            Ok(rows)
        })
        .collect();
    let rows: Vec<AttentionRow> = per_example?.into_iter().flatten().collect();

    let mean = |pred: &dyn Fn(&AttentionRow) -> bool| -> f64 {
        let sel: Vec<f64> = rows.iter().filter(|r| pred(r)).map(|r| r.weight).collect();
        if sel.is_empty() {
            0.0
        } else {
            sel.iter().sum::<f64>() / sel.len() as f64
        }
    };
    let summary = AttentionSummary {
        triples: rows.len(),
        mean_golden: mean(&|r| r.tag == AttnTag::Golden),
        mean_output: mean(&|r| matches!(r.tag, AttnTag::Output | AttnTag::Golden)),
        mean_other: mean(&|r| r.tag == AttnTag::Other),
        mean_overall: mean(&|_| true),
        mean_non_golden: mean(&|r| r.tag != AttnTag::Golden),
    };
    Ok((rows, summary))
}

/// CSV with header `example_id,triple_id,weight,tag`.
pub fn write_attention_csv(path: &Path, rows: &[AttentionRow]) -> Result<()> {
    let mut out = String::from("example_id,triple_id,weight,tag\n");
    for r in rows {
        let tag = match r.tag {
            AttnTag::Golden => "golden",
            AttnTag::Output => "output",
            AttnTag::Other => "other",
        };
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.example_id, r.triple_id, r.weight, tag
        ));
    }
    std::fs::write(path, out).map_err(|e| crate::error::io_err(path, e))
}
