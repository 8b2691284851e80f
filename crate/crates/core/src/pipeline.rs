//! Shared per-example pipeline: retrieval, encoding, knowledge aggregation
//! and decoder-memory assembly, plus teacher-forced NLL used by training and
//! perplexity evaluation.

use rayon::prelude::*;

use crate::decoder::{build_memory, decode_forward, post_only_memory, DecoderMemory};
use crate::encoder::{embed_triple, encode_post, PostEncoding};
use crate::error::Result;
use crate::gat::{aggregate_graph, aggregate_subgraph, aggregate_two_hop, AttentionTrace};
use crate::kb::{
    expand_two_hop, match_entities, retrieve_one_hop, FilterRules, KnowledgeBase,
    RetrievedKnowledge, TfidfModel, Triple,
};
use crate::model::{ModelConfig, ModelState};
use crate::numerics::{Graph, Value};
use crate::text::{tokenize, DialogueExample, Vocab, BOS_ID, EOS_ID};

/// Everything retrieval- and vocabulary-related that the model consumes;
/// immutable once built, shared across threads.
pub struct PipelineContext {
    pub kb: KnowledgeBase,
    pub vocab: Vocab,
    pub tfidf: TfidfModel,
    pub rules: FilterRules,
    pub two_hop_cap: usize,
}

impl PipelineContext {
    /// Vocabulary and TF-IDF statistics come from the training split only.
    pub fn build(kb: KnowledgeBase, train: &[DialogueExample]) -> Self {
        let docs: Vec<&[String]> = train
            .iter()
            .flat_map(|ex| [ex.post.as_slice(), ex.response.as_slice()])
            .collect();
        let vocab = Vocab::build(docs);
        let posts: Vec<Vec<String>> = train.iter().map(|ex| ex.post.clone()).collect();
        let tfidf = TfidfModel::fit(&posts);
        PipelineContext {
            kb,
            vocab,
            tfidf,
            rules: FilterRules::default(),
            two_hop_cap: 100,
        }
    }
}

/// A dataset example with retrieval done and all token ids resolved.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub post_tokens: Vec<String>,
    pub post_ids: Vec<usize>,
    pub resp_tokens: Vec<String>,
    pub resp_ids: Vec<usize>,
    pub retrieved: RetrievedKnowledge,
    /// Token ids of each one-hop triple's flattened text, per subgraph.
    pub one_hop_tokens: Vec<Vec<Vec<usize>>>,
    pub two_hop_tokens: Vec<Vec<Vec<usize>>>,
    pub golden: Vec<Triple>,
}

fn triple_token_ids(vocab: &Vocab, cfg: &ModelConfig, triple: &Triple) -> Vec<usize> {
    let toks = tokenize(&triple.text());
    let mut ids = vocab.encode(&toks);
    ids.truncate(cfg.max_triple_len);
    ids
}

pub fn prepare_example(
    ctx: &PipelineContext,
    cfg: &ModelConfig,
    ex: &DialogueExample,
) -> Prepared {
    let mut post_tokens = ex.post.clone();
    post_tokens.truncate(cfg.max_post_len);
    let mut resp_tokens = ex.response.clone();
    resp_tokens.truncate(cfg.max_resp_len.saturating_sub(1));

    let entities = match_entities(&post_tokens, &ctx.kb, &ctx.rules.stopwords);
    let one_hop = retrieve_one_hop(&entities, &ctx.kb, &ctx.rules);
    let two_hop = if cfg.two_hop && !one_hop.is_empty() {
        let expanded = expand_two_hop(
            &one_hop,
            &ctx.kb,
            &post_tokens,
            &ctx.tfidf,
            &ctx.rules,
            ctx.two_hop_cap,
        );
        if expanded.is_empty() {
            None
        } else {
            Some(expanded)
        }
    } else {
        None
    };

    let one_hop_tokens: Vec<Vec<Vec<usize>>> = one_hop
        .iter()
        .map(|sg| {
            sg.triples
                .iter()
                .map(|t| triple_token_ids(&ctx.vocab, cfg, t))
                .collect()
        })
        .collect();
    let two_hop_tokens: Vec<Vec<Vec<usize>>> = two_hop
        .as_deref()
        .unwrap_or(&[])
        .iter()
        .map(|sg| {
            sg.triples
                .iter()
                .map(|t| triple_token_ids(&ctx.vocab, cfg, t))
                .collect()
        })
        .collect();

    Prepared {
        post_ids: ctx.vocab.encode(&post_tokens),
        post_tokens,
        resp_ids: ctx.vocab.encode(&resp_tokens),
        resp_tokens,
        retrieved: RetrievedKnowledge { one_hop, two_hop },
        one_hop_tokens,
        two_hop_tokens,
        golden: ex.golden.clone(),
    }
}

pub fn prepare_all(
    ctx: &PipelineContext,
    cfg: &ModelConfig,
    examples: &[DialogueExample],
) -> Vec<Prepared> {
    examples
        .par_iter()
        .map(|ex| prepare_example(ctx, cfg, ex))
        .collect()
}

/// The model-side state of one example after encoding and aggregation.
pub struct ForwardPass {
    pub post: PostEncoding,
    pub memory: DecoderMemory,
    /// One-hop triple embeddings per subgraph (empty when aggregation off).
    pub triple_embs: Vec<Vec<Value>>,
    /// One-hop subgraph roots (attention-weighted, or plain means under the
    /// mean-pool ablation).
    pub subgraph_roots: Vec<Value>,
    pub trace: Option<AttentionTrace>,
}

pub fn forward_example(
    g: &mut Graph,
    model: &ModelState,
    prep: &Prepared,
    want_trace: bool,
) -> Result<ForwardPass> {
    let cfg = &model.config;
    let post = encode_post(g, model, &prep.post_ids)?;

    if !cfg.ca_gat {
        let memory = post_only_memory(post.token_states, post.rows);
        return Ok(ForwardPass {
            memory,
            post,
            triple_embs: vec![],
            subgraph_roots: vec![],
            trace: None,
        });
    }

    if prep.retrieved.one_hop.is_empty() {
        let memory = build_memory(g, model, None, None, post.token_states, post.rows)?;
        return Ok(ForwardPass {
            memory,
            post,
            triple_embs: vec![],
            subgraph_roots: vec![],
            trace: None,
        });
    }

    // Embed every one-hop triple with the shared table.
    let mut triple_embs: Vec<Vec<Value>> = Vec::with_capacity(prep.one_hop_tokens.len());
    for sg in &prep.one_hop_tokens {
        let embs: Result<Vec<Value>> = sg.iter().map(|ids| embed_triple(g, model, ids)).collect();
        triple_embs.push(embs?);
    }

    let mut trace = want_trace.then(AttentionTrace::default);
    let (rt_one, subgraph_roots) = if cfg.mean_pool_aggregation {
        // Aggregation ablation: mean over all flattened triple features.
        let flat: Vec<Value> = triple_embs.iter().flatten().copied().collect();
        let all = g.stack_rows(&flat)?;
        let rt = g.mean_rows(all)?;
        let mut roots = Vec::with_capacity(triple_embs.len());
        for embs in &triple_embs {
            let m = g.stack_rows(embs)?;
            roots.push(g.mean_rows(m)?);
        }
        (rt, roots)
    } else {
        let w_g = g.param(&model.params, "gat.w_g");
        let w_gsub = g.param(&model.params, "gat.w_gsub");
        let mut roots = Vec::with_capacity(triple_embs.len());
        for (si, embs) in triple_embs.iter().enumerate() {
            let (root, attn) = aggregate_subgraph(g, embs, post.emb_c, w_g)?;
            if let Some(tr) = trace.as_mut() {
                let ids = prep.retrieved.one_hop[si].triples.iter().map(|t| t.id);
                tr.per_subgraph
                    .push(ids.zip(g.value(attn).data().iter().copied()).collect());
            }
            roots.push(root);
        }
        let (rt, top_attn) = aggregate_graph(g, &roots, post.emb_c, w_gsub)?;
        if let Some(tr) = trace.as_mut() {
            tr.top_level = g.value(top_attn).data().to_vec();
        }
        (rt, roots)
    };

    let rt_two = if cfg.two_hop && !prep.two_hop_tokens.is_empty() {
        let mut groups: Vec<Vec<Value>> = Vec::with_capacity(prep.two_hop_tokens.len());
        for sg in &prep.two_hop_tokens {
            let embs: Result<Vec<Value>> =
                sg.iter().map(|ids| embed_triple(g, model, ids)).collect();
            groups.push(embs?);
        }
        if cfg.mean_pool_aggregation {
            let flat: Vec<Value> = groups.iter().flatten().copied().collect();
            let all = g.stack_rows(&flat)?;
            Some(g.mean_rows(all)?)
        } else {
            let w_g2 = g.param(&model.params, "gat.w_g2");
            let w_gsub2 = g.param(&model.params, "gat.w_gsub2");
            let (rt2, attns, top) =
                aggregate_two_hop(g, &groups, rt_one, post.emb_c, w_g2, w_gsub2)?;
            if let Some(tr) = trace.as_mut() {
                let two = prep.retrieved.two_hop.as_deref().unwrap_or(&[]);
                for (si, attn) in attns.iter().enumerate() {
                    let ids = two[si].triples.iter().map(|t| t.id);
                    tr.two_hop_per_subgraph
                        .push(ids.zip(g.value(*attn).data().iter().copied()).collect());
                }
                tr.two_hop_top_level = g.value(top).data().to_vec();
            }
            Some(rt2)
        }
    } else {
        None
    };

    let memory = build_memory(g, model, Some(rt_one), rt_two, post.token_states, post.rows)?;
    Ok(ForwardPass {
        memory,
        post,
        triple_embs,
        subgraph_roots,
        trace,
    })
}

/// Teacher-forced per-token negative log-likelihoods of the gold response
/// ([EOS] counted). Returns the NLL vector node and the target count.
pub fn response_nll(
    g: &mut Graph,
    model: &ModelState,
    memory: &DecoderMemory,
    resp_ids: &[usize],
) -> Result<(Value, usize)> {
    let mut prefix = Vec::with_capacity(resp_ids.len() + 1);
    prefix.push(BOS_ID);
    prefix.extend_from_slice(resp_ids);
    let mut targets = resp_ids.to_vec();
    targets.push(EOS_ID);
    let logits = decode_forward(g, model, memory, &prefix)?;
    let nll = g.cross_entropy_rows(logits, &targets)?;
    Ok((nll, targets.len()))
}

/// Sum of token NLLs and token count for one example.
pub fn example_nll(model: &ModelState, prep: &Prepared) -> Result<(f64, usize)> {
    let mut g = Graph::new();
    let fwd = forward_example(&mut g, model, prep, false)?;
    let (nll, count) = response_nll(&mut g, model, &fwd.memory, &prep.resp_ids)?;
    Ok((g.value(nll).data().iter().sum(), count))
}

/// Corpus perplexity: exp of the token-level mean NLL.
pub fn corpus_ppl(model: &ModelState, preps: &[Prepared]) -> Result<f64> {
    if preps.is_empty() {
        return Err(crate::error::Error::invalid("ppl: empty corpus"));
    }
    let per: Result<Vec<(f64, usize)>> = preps
        .par_iter()
        .map(|p| example_nll(model, p))
        .collect();
    let per = per?;
    let total_nll: f64 = per.iter().map(|(s, _)| s).sum();
    let total_tok: usize = per.iter().map(|(_, n)| n).sum();
    Ok((total_nll / total_tok as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderConfig;
    use crate::text::synth::{synth_corpus, SynthConfig};

    fn tiny_setup(two_hop: bool) -> (ModelState, PipelineContext, Vec<Prepared>) {
        let corpus = synth_corpus(&SynthConfig {
            seed: 3,
            n_examples: 40,
            ..SynthConfig::default()
        })
        .unwrap();
        let ctx = PipelineContext::build(corpus.kb.clone(), &corpus.train);
        let cfg = ModelConfig {
            enc: EncoderConfig {
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                ffn_mult: 2,
                vocab_size: ctx.vocab.len(),
            },
            two_hop,
            ..ModelConfig::default()
        };
        let model = ModelState::new(cfg.clone(), 5).unwrap();
        let preps = prepare_all(&ctx, &cfg, &corpus.train);
        (model, ctx, preps)
    }

    #[test]
    fn forward_builds_memory_for_every_example() {
        let (model, _ctx, preps) = tiny_setup(false);
        for prep in preps.iter().take(10) {
            let mut g = Graph::new();
            let fwd = forward_example(&mut g, &model, prep, true).unwrap();
            // One root row always: retrieval root or the learned null root.
            assert_eq!(fwd.memory.root_rows, 1);
            assert_eq!(fwd.memory.n_rows, 1 + prep.post_ids.len() + 1);
        }
    }

    #[test]
    fn two_hop_memory_has_one_extra_row() {
        let (model2, _ctx, preps) = tiny_setup(true);
        let mut cfg1 = model2.config.clone();
        cfg1.two_hop = false;
        let model1 = ModelState::new(cfg1, 5).unwrap();
        let with_two = preps
            .iter()
            .find(|p| !p.two_hop_tokens.is_empty())
            .expect("some example has two-hop knowledge");
        let mut g = Graph::new();
        let f2 = forward_example(&mut g, &model2, with_two, false).unwrap();
        let mut g1 = Graph::new();
        let f1 = forward_example(&mut g1, &model1, with_two, false).unwrap();
        assert_eq!(f2.memory.n_rows, f1.memory.n_rows + 1);
    }

    #[test]
    fn traces_groups_sum_to_one() {
        let (model, _ctx, preps) = tiny_setup(true);
        let prep = preps
            .iter()
            .find(|p| p.retrieved.one_hop.len() >= 2)
            .unwrap();
        let mut g = Graph::new();
        let fwd = forward_example(&mut g, &model, prep, true).unwrap();
        let tr = fwd.trace.unwrap();
        for sg in &tr.per_subgraph {
            let s: f64 = sg.iter().map(|(_, w)| w).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        let s: f64 = tr.top_level.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ppl_of_zeroed_output_projection_is_vocab_size() {
        let (mut model, ctx, preps) = tiny_setup(false);
        model
            .params
            .get_mut("out.w")
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let ppl = corpus_ppl(&model, &preps[..10.min(preps.len())]).unwrap();
        let v = ctx.vocab.len() as f64;
        assert!((ppl - v).abs() / v < 0.01, "ppl {ppl} vs vocab {v}");
    }
}
