//! Synthetic knowledge-grounded corpus generator.
//!
//! Produces a random KB plus dialogue examples whose responses verbalize
//! golden triples retrievable from the post, so retrieval, attention and
//! generation behavior can be measured end to end at desk scale. A
//! configurable fraction of examples chains a second-hop fact (the response
//! mentions an entity only reachable through two hops), and a small fraction
//! is entity-free chitchat so the no-retrieval path sees training signal.

use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kb::{
    default_stopwords, match_entities, retrieve_one_hop, save_triples, FilterRules,
    KnowledgeBase, Triple,
};
use crate::text::{tokenize, write_dataset, DialogueExample};

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_triples: usize,
    pub n_examples: usize,
    /// Fraction of examples whose response depends on a second-hop fact.
    pub two_hop_fraction: f64,
    /// Fraction of entity-free chitchat examples (exercises the
    /// zero-retrieval path).
    pub chitchat_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_entities: 50,
            n_relations: 8,
            n_triples: 300,
            n_examples: 2000,
            two_hop_fraction: 0.3,
            chitchat_fraction: 0.1,
        }
    }
}

#[derive(Debug)]
pub struct SynthCorpus {
    pub kb: KnowledgeBase,
    pub train: Vec<DialogueExample>,
    pub valid: Vec<DialogueExample>,
    pub test: Vec<DialogueExample>,
}

impl SynthCorpus {
    pub fn all_examples(&self) -> impl Iterator<Item = &DialogueExample> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }

    /// Write kb.tsv, train/valid/test.jsonl into a directory.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| crate::error::io_err(dir, e))?;
        save_triples(&self.kb, &dir.join("kb.tsv"))?;
        write_dataset(&dir.join("train.jsonl"), &self.train)?;
        write_dataset(&dir.join("valid.jsonl"), &self.valid)?;
        write_dataset(&dir.join("test.jsonl"), &self.test)?;
        Ok(())
    }
}

const SYLLABLES: [&str; 16] = [
    "ba", "ko", "mi", "ra", "tu", "ne", "so", "vi", "da", "lu", "pe", "gi", "fo", "za", "hy",
    "wu",
];

const RELATION_NAMES: [&str; 12] = [
    "isa", "usedfor", "partof", "madeof", "causes", "hasa", "foundin", "wants", "likes", "needs",
    "gives", "keeps",
];

const POST_FRAMES: [(&str, &str); 4] = [
    ("tell me about", ""),
    ("what do you know about", ""),
    ("i wonder about", ""),
    ("please explain", ""),
];

const CHAIN_FRAMES: [&str; 3] = [
    "tell me more about",
    "give me more on",
    "dig deeper into",
];

const RESPONSE_FRAMES: [(&str, &str); 3] = [("", ""), ("i think", ""), ("as i recall", "")];

const CHITCHAT_PAIRS: [(&str, &str); 8] = [
    ("hello there", "hi nice to meet you"),
    ("how are you doing today", "i am doing fine thanks"),
    ("good morning friend", "good morning to you too"),
    ("see you later", "sure take care"),
    ("thanks for the help", "you are welcome"),
    ("nice weather today", "yes it really is"),
    ("i am back again", "welcome back"),
    ("goodbye for now", "bye see you soon"),
];

/// Words the entity generator must never collide with.
fn reserved_words() -> HashSet<String> {
    let mut set = HashSet::new();
    for (a, b) in POST_FRAMES {
        set.extend(tokenize(a));
        set.extend(tokenize(b));
    }
    for f in CHAIN_FRAMES {
        set.extend(tokenize(f));
    }
    for (a, b) in RESPONSE_FRAMES {
        set.extend(tokenize(a));
        set.extend(tokenize(b));
    }
    for (p, r) in CHITCHAT_PAIRS {
        set.extend(tokenize(p));
        set.extend(tokenize(r));
    }
    for r in RELATION_NAMES {
        set.insert(r.to_string());
    }
    for w in ["the", "of", "and", "then", "its"] {
        set.insert(w.to_string());
    }
    set.extend(default_stopwords());
    set
}

pub fn synth_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    if cfg.n_relations > RELATION_NAMES.len() {
        return Err(Error::invalid(format!(
            "at most {} relations supported",
            RELATION_NAMES.len()
        )));
    }
    if cfg.n_triples > cfg.n_entities * cfg.n_entities {
        return Err(Error::invalid("n_triples exceeds n_entities^2"));
    }
    if cfg.n_triples > cfg.n_entities * cfg.n_relations {
        return Err(Error::invalid(
            "n_triples exceeds n_entities * n_relations (head-relation pairs are unique)",
        ));
    }
    if !(0.0..=1.0).contains(&cfg.two_hop_fraction)
        || !(0.0..=1.0).contains(&cfg.chitchat_fraction)
        || cfg.two_hop_fraction + cfg.chitchat_fraction > 1.0
    {
        return Err(Error::invalid("fractions must be in [0,1] and sum to <= 1"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let entities = gen_entities(&mut rng, cfg.n_entities)?;
    let relations: Vec<String> = RELATION_NAMES[..cfg.n_relations]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let kb = gen_kb(&mut rng, cfg, &entities, &relations)?;

    let rules = FilterRules::default();
    let stopwords = default_stopwords();

    // Entities usable as anchors: at least one head triple.
    let anchors_pool: Vec<String> = entities
        .iter()
        .filter(|e| kb.triples_of(e).iter().any(|&id| &kb.triple(id).head == *e))
        .cloned()
        .collect();
    if anchors_pool.is_empty() {
        return Err(Error::invalid("no entity has head triples"));
    }

    // Chain probability among knowledge examples such that the fraction over
    // all examples matches two_hop_fraction.
    let know_frac = 1.0 - cfg.chitchat_fraction;
    let chain_p = if know_frac > 0.0 {
        (cfg.two_hop_fraction / know_frac).min(1.0)
    } else {
        0.0
    };

    let mut examples = Vec::with_capacity(cfg.n_examples);
    while examples.len() < cfg.n_examples {
        if rng.gen::<f64>() < cfg.chitchat_fraction {
            let (p, r) = CHITCHAT_PAIRS[rng.gen_range(0..CHITCHAT_PAIRS.len())];
            examples.push(DialogueExample {
                post: tokenize(p),
                response: tokenize(r),
                golden: vec![],
            });
            continue;
        }
        let chained = rng.gen::<f64>() < chain_p;
        if let Some(ex) = gen_knowledge_example(&mut rng, &kb, &anchors_pool, chained) {
            // Guarantee: golden triples retrievable from the post one-hop.
            let matched = match_entities(&ex.post, &kb, &stopwords);
            let retrieved = retrieve_one_hop(&matched, &kb, &rules);
            let retrievable = ex.golden.iter().all(|g| {
                retrieved
                    .iter()
                    .any(|sg| sg.triples.iter().any(|t| t.id == g.id))
            });
            if retrievable {
                examples.push(ex);
            }
        }
    }

    let n = examples.len();
    let train_end = n * 8 / 10;
    let valid_end = n * 9 / 10;
    let test = examples.split_off(valid_end);
    let valid = examples.split_off(train_end);
    Ok(SynthCorpus {
        kb,
        train: examples,
        valid,
        test,
    })
}

fn gen_entities(rng: &mut ChaCha8Rng, n: usize) -> Result<Vec<String>> {
    let reserved = reserved_words();
    let mut out = Vec::with_capacity(n);
    let mut seen = HashSet::new();
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::invalid("unable to generate distinct entity names"));
        }
        let syls = rng.gen_range(2..=3);
        let word: String = (0..syls)
            .map(|_| SYLLABLES[rng.gen_range(0..SYLLABLES.len())])
            .collect();
        if reserved.contains(&word) || !seen.insert(word.clone()) {
            continue;
        }
        out.push(word);
    }
    Ok(out)
}

fn gen_kb(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    entities: &[String],
    relations: &[String],
) -> Result<KnowledgeBase> {
    // Degree cap keeps every entity's full triple list within the retrieval
    // cap, so golden triples are always retrievable.
    let degree_cap = FilterRules::default().per_entity_cap;
    let mut raw: Vec<(String, String, String)> = Vec::with_capacity(cfg.n_triples);
    let mut head_rel: HashSet<(usize, usize)> = HashSet::new();
    let mut degree = vec![0usize; entities.len()];
    let mut attempts = 0;
    while raw.len() < cfg.n_triples {
        attempts += 1;
        if attempts > 1_000_000 {
            return Err(Error::invalid(
                "unable to sample requested triple count under degree constraints",
            ));
        }
        let h = rng.gen_range(0..entities.len());
        let t = rng.gen_range(0..entities.len());
        if h == t {
            continue;
        }
        let r = rng.gen_range(0..relations.len());
        if degree[h] >= degree_cap || degree[t] >= degree_cap {
            continue;
        }
        if !head_rel.insert((h, r)) {
            continue;
        }
        degree[h] += 1;
        degree[t] += 1;
        raw.push((
            entities[h].clone(),
            relations[r].clone(),
            entities[t].clone(),
        ));
    }
    KnowledgeBase::from_triples(raw)
}

fn head_triples<'k>(kb: &'k KnowledgeBase, entity: &str) -> Vec<&'k Triple> {
    kb.triples_of(entity)
        .iter()
        .map(|&id| kb.triple(id))
        .filter(|t| t.head == entity)
        .collect()
}

fn gen_knowledge_example(
    rng: &mut ChaCha8Rng,
    kb: &KnowledgeBase,
    anchors_pool: &[String],
    chained: bool,
) -> Option<DialogueExample> {
    let n_anchors = if chained { 1 } else { rng.gen_range(1..=3) };
    let mut anchors: Vec<&str> = Vec::new();
    let mut goldens: Vec<Triple> = Vec::new();
    let mut chain: Option<Triple> = None;

    for _ in 0..n_anchors {
        let mut picked = None;
        for _ in 0..40 {
            let cand = anchors_pool[rng.gen_range(0..anchors_pool.len())].as_str();
            if anchors.contains(&cand) {
                continue;
            }
            let heads = head_triples(kb, cand);
            if heads.is_empty() {
                continue;
            }
            let golden = heads[rng.gen_range(0..heads.len())].clone();
            if chained {
                // Need the golden tail to have an outgoing triple to chain.
                let next = head_triples(kb, &golden.tail);
                let next: Vec<&&Triple> = next.iter().filter(|t| t.tail != cand).collect();
                if next.is_empty() {
                    continue;
                }
                chain = Some((**next[rng.gen_range(0..next.len())]).clone());
            }
            picked = Some((cand, golden));
            break;
        }
        let (anchor, golden) = picked?;
        anchors.push(anchor);
        goldens.push(golden);
    }

    // Post: relation-cued segments, e.g. "tell me about the isa of bako".
    let segs: Vec<String> = goldens
        .iter()
        .map(|g| format!("the {} of {}", g.relation, g.head))
        .collect();
    let post = if chained {
        let chain_t = chain.as_ref().expect("chained example has a chain triple");
        let frame = CHAIN_FRAMES[rng.gen_range(0..CHAIN_FRAMES.len())];
        format!(
            "{} {} and then its {}",
            frame,
            segs.join(" and "),
            chain_t.relation
        )
    } else {
        let frame = POST_FRAMES[rng.gen_range(0..POST_FRAMES.len())].0;
        format!("{} {}", frame, segs.join(" and "))
    };

    // Response: deterministic given the post content, so duplicated posts
    // always pair with identical responses.
    let mut core_parts: Vec<String> = goldens
        .iter()
        .map(|g| format!("{} {} {}", g.head, g.relation, g.tail))
        .collect();
    if let Some(c) = &chain {
        core_parts.push(format!("{} {} {}", c.head, c.relation, c.tail));
    }
    let core = core_parts.join(" and ");
    let frame_idx = det_hash(&post) as usize % RESPONSE_FRAMES.len();
    let (prefix, _) = RESPONSE_FRAMES[frame_idx];
    let response = if prefix.is_empty() {
        core
    } else {
        format!("{prefix} {core}")
    };

    Some(DialogueExample {
        post: tokenize(&post),
        response: tokenize(&response),
        golden: goldens,
    })
}

fn det_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::is_two_hop_dependent;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            seed: 7,
            n_examples: 300,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = synth_corpus(&small_cfg()).unwrap();
        let b = synth_corpus(&small_cfg()).unwrap();
        assert_eq!(a.kb.triple_count(), b.kb.triple_count());
        for (x, y) in a.kb.triples().iter().zip(b.kb.triples()) {
            assert_eq!(x, y);
        }
        for (x, y) in a.all_examples().zip(b.all_examples()) {
            assert_eq!(x.post, y.post);
            assert_eq!(x.response, y.response);
            assert_eq!(
                x.golden.iter().map(|t| t.id).collect::<Vec<_>>(),
                y.golden.iter().map(|t| t.id).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn golden_triples_always_retrievable() {
        let corpus = synth_corpus(&small_cfg()).unwrap();
        let rules = FilterRules::default();
        let stopwords = default_stopwords();
        for ex in corpus.all_examples() {
            let matched = match_entities(&ex.post, &corpus.kb, &stopwords);
            let retrieved = retrieve_one_hop(&matched, &corpus.kb, &rules);
            for g in &ex.golden {
                assert!(
                    retrieved
                        .iter()
                        .any(|sg| sg.triples.iter().any(|t| t.id == g.id)),
                    "golden {} not retrieved for post {:?}",
                    g.text(),
                    ex.post
                );
            }
        }
    }

    #[test]
    fn two_hop_fraction_is_calibrated() {
        let cfg = SynthConfig {
            seed: 13,
            n_examples: 2000,
            ..SynthConfig::default()
        };
        let corpus = synth_corpus(&cfg).unwrap();
        let dependent = corpus
            .all_examples()
            .filter(|ex| is_two_hop_dependent(ex, &corpus.kb))
            .count();
        let frac = dependent as f64 / 2000.0;
        assert!((frac - 0.3).abs() <= 0.05, "fraction {frac}");
    }

    #[test]
    fn split_sizes_are_80_10_10() {
        let corpus = synth_corpus(&small_cfg()).unwrap();
        assert_eq!(corpus.train.len(), 240);
        assert_eq!(corpus.valid.len(), 30);
        assert_eq!(corpus.test.len(), 30);
    }

    #[test]
    fn duplicate_posts_have_identical_responses() {
        let cfg = SynthConfig {
            seed: 5,
            n_examples: 1500,
            ..SynthConfig::default()
        };
        let corpus = synth_corpus(&cfg).unwrap();
        let mut by_post: std::collections::HashMap<String, Vec<String>> =
            std::collections::HashMap::new();
        for ex in corpus.all_examples() {
            by_post
                .entry(ex.post.join(" "))
                .or_default()
                .push(ex.response.join(" "));
        }
        for (post, responses) in by_post {
            for r in &responses {
                assert_eq!(r, &responses[0], "post {post:?} has divergent responses");
            }
        }
    }

    #[test]
    fn inconsistent_parameters_rejected() {
        let cfg = SynthConfig {
            n_entities: 5,
            n_triples: 100,
            ..SynthConfig::default()
        };
        assert!(synth_corpus(&cfg).is_err());
    }

    #[test]
    fn round_trip_through_jsonl_preserves_tokens() {
        let corpus = synth_corpus(&small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        corpus.write_to_dir(dir.path()).unwrap();
        let kb = crate::kb::load_triples(&dir.path().join("kb.tsv")).unwrap();
        let (train, unresolved) =
            crate::text::load_dataset(&dir.path().join("train.jsonl"), &kb).unwrap();
        assert_eq!(unresolved, 0);
        assert_eq!(train.len(), corpus.train.len());
        for (a, b) in train.iter().zip(&corpus.train) {
            assert_eq!(a.post, b.post);
            assert_eq!(a.response, b.response);
            assert_eq!(
                a.golden.iter().map(|t| t.id).collect::<Vec<_>>(),
                b.golden.iter().map(|t| t.id).collect::<Vec<_>>()
            );
        }
    }
}
