//! Triple store with entity matching, rule-filtered one-hop retrieval, and
//! two-hop expansion under context-similarity top-K selection.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use crate::error::{io_err, Error, Result};

/// A knowledge fact: head entity, relation, tail entity.
///
/// Entities are single lowercase tokens; `id` is the load-order index and is
/// stable across reloads of the same file.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub id: usize,
}

impl Triple {
    /// Flattened surface form "h r t" used for embeddings and similarity.
    pub fn text(&self) -> String {
        format!("{} {} {}", self.head, self.relation, self.tail)
    }
}

#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    triples: Vec<Triple>,
    entity_index: HashMap<String, Vec<usize>>,
    relations: BTreeSet<String>,
}

impl KnowledgeBase {
    pub fn from_triples(raw: Vec<(String, String, String)>) -> Result<Self> {
        let mut triples = Vec::new();
        let mut seen: HashSet<(String, String, String)> = HashSet::new();
        for (head, relation, tail) in raw {
            if head.is_empty() || tail.is_empty() {
                return Err(Error::invalid("triple with empty head or tail"));
            }
            if head.split_whitespace().count() != 1 || tail.split_whitespace().count() != 1 {
                return Err(Error::invalid(format!(
                    "entities must be single tokens: {head:?} / {tail:?}"
                )));
            }
            let key = (head.clone(), relation.clone(), tail.clone());
            if !seen.insert(key) {
                continue; // first occurrence wins
            }
            let id = triples.len();
            triples.push(Triple {
                head,
                relation,
                tail,
                id,
            });
        }
        let mut entity_index: HashMap<String, Vec<usize>> = HashMap::new();
        let mut relations = BTreeSet::new();
        for t in &triples {
            entity_index.entry(t.head.clone()).or_default().push(t.id);
            if t.tail != t.head {
                entity_index.entry(t.tail.clone()).or_default().push(t.id);
            }
            relations.insert(t.relation.clone());
        }
        Ok(KnowledgeBase {
            triples,
            entity_index,
            relations,
        })
    }

    pub fn triple(&self, id: usize) -> &Triple {
        &self.triples[id]
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn triple_count(&self) -> usize {
        self.triples.len()
    }

    pub fn entity_count(&self) -> usize {
        self.entity_index.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    pub fn is_entity(&self, token: &str) -> bool {
        self.entity_index.contains_key(token)
    }

    /// Triple ids touching the entity (as head or tail), ascending.
    pub fn triples_of(&self, entity: &str) -> &[usize] {
        self.entity_index
            .get(entity)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Resolve an (h, r, t) string triple against the KB.
    pub fn find(&self, head: &str, relation: &str, tail: &str) -> Option<&Triple> {
        self.triples_of(head)
            .iter()
            .map(|&id| &self.triples[id])
            .find(|t| t.head == head && t.relation == relation && t.tail == tail)
    }
}

/// Load a TSV triple file: `head\trelation\ttail` per line, `#` comments and
/// blank lines ignored, duplicates deduplicated (first wins).
pub fn load_triples(path: &Path) -> Result<KnowledgeBase> {
    let content = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut raw = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.trim().is_empty()) {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("expected head<TAB>relation<TAB>tail, got {line:?}"),
            });
        }
        raw.push((
            fields[0].trim().to_lowercase(),
            fields[1].trim().to_string(),
            fields[2].trim().to_lowercase(),
        ));
    }
    if raw.is_empty() {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: "no triples in file".into(),
        });
    }
    KnowledgeBase::from_triples(raw)
}

/// Write a KB back out in the TSV format `load_triples` reads.
pub fn save_triples(kb: &KnowledgeBase, path: &Path) -> Result<()> {
    let mut out = String::new();
    for t in kb.triples() {
        out.push_str(&format!("{}\t{}\t{}\n", t.head, t.relation, t.tail));
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Load a stopword file: one token per line.
pub fn load_stopwords(path: &Path) -> Result<HashSet<String>> {
    let content = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(content
        .lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty())
        .collect())
}

/// Small built-in English stopword list used when no file is supplied.
pub fn default_stopwords() -> HashSet<String> {
    [
        "a", "an", "the", "i", "you", "he", "she", "it", "we", "they", "me", "my", "your", "is",
        "am", "are", "was", "were", "be", "been", "to", "of", "and", "or", "in", "on", "at", "do",
        "does", "did", "not", "no", "yes", "this", "that", "these", "those", "what", "which",
        "who", "how", "when", "where", "why", "for", "with", "about", "as", "by", "so", "if",
        "then", "than", "but", "have", "has", "had", "will", "would", "can", "could", "there",
        "here",
    ]
    .into_iter()
    .map(str::to_string)
    .collect()
}

/// All retrieved triples anchored on one matched entity.
#[derive(Debug, Clone)]
pub struct SubGraph {
    pub anchor_entity: String,
    pub triples: Vec<Triple>,
}

/// One-hop retrieval result plus optional two-hop extension.
#[derive(Debug, Clone, Default)]
pub struct RetrievedKnowledge {
    pub one_hop: Vec<SubGraph>,
    pub two_hop: Option<Vec<SubGraph>>,
}

impl RetrievedKnowledge {
    pub fn one_hop_triple_count(&self) -> usize {
        self.one_hop.iter().map(|g| g.triples.len()).sum()
    }

    pub fn two_hop_triple_count(&self) -> usize {
        self.two_hop
            .as_ref()
            .map(|gs| gs.iter().map(|g| g.triples.len()).sum())
            .unwrap_or(0)
    }
}

/// Retrieval filter rules: relation blocklist, stopword endpoints dropped,
/// per-entity cap by ascending triple id.
#[derive(Debug, Clone)]
pub struct FilterRules {
    pub relation_blocklist: HashSet<String>,
    pub stopwords: HashSet<String>,
    pub per_entity_cap: usize,
}

impl Default for FilterRules {
    fn default() -> Self {
        FilterRules {
            relation_blocklist: HashSet::new(),
            stopwords: default_stopwords(),
            per_entity_cap: 20,
        }
    }
}

/// Distinct post tokens that are KB entities and not stopwords, in
/// first-occurrence order.
pub fn match_entities(
    post_tokens: &[String],
    kb: &KnowledgeBase,
    stopwords: &HashSet<String>,
) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for tok in post_tokens {
        if kb.is_entity(tok) && !stopwords.contains(tok) && seen.insert(tok.clone()) {
            out.push(tok.clone());
        }
    }
    out
}

/// One SubGraph per entity with at least one triple surviving the rules.
pub fn retrieve_one_hop(
    entities: &[String],
    kb: &KnowledgeBase,
    rules: &FilterRules,
) -> Vec<SubGraph> {
    let mut out = Vec::new();
    for entity in entities {
        let mut kept: Vec<Triple> = Vec::new();
        for &id in kb.triples_of(entity) {
            let t = kb.triple(id);
            if rules.relation_blocklist.contains(&t.relation) {
                continue;
            }
            let other = if &t.head == entity { &t.tail } else { &t.head };
            if rules.stopwords.contains(other) {
                continue;
            }
            kept.push(t.clone());
            if kept.len() == rules.per_entity_cap {
                break;
            }
        }
        if !kept.is_empty() {
            out.push(SubGraph {
                anchor_entity: entity.clone(),
                triples: kept,
            });
        }
    }
    out
}

/// Expand one-hop retrieval to the frontier entities' triples, scored by
/// TF-IDF cosine against the post, keeping the global top `cap`.
pub fn expand_two_hop(
    one_hop: &[SubGraph],
    kb: &KnowledgeBase,
    post_tokens: &[String],
    tfidf: &TfidfModel,
    rules: &FilterRules,
    cap: usize,
) -> Vec<SubGraph> {
    let anchors: HashSet<&str> = one_hop.iter().map(|g| g.anchor_entity.as_str()).collect();
    let one_hop_ids: HashSet<usize> = one_hop
        .iter()
        .flat_map(|g| g.triples.iter().map(|t| t.id))
        .collect();

    // Frontier entities in first-appearance order over one-hop triples.
    let mut frontier: Vec<String> = Vec::new();
    let mut frontier_seen = HashSet::new();
    for g in one_hop {
        for t in &g.triples {
            for e in [&t.head, &t.tail] {
                if !anchors.contains(e.as_str())
                    && !rules.stopwords.contains(e.as_str())
                    && frontier_seen.insert(e.clone())
                {
                    frontier.push(e.clone());
                }
            }
        }
    }

    // Candidate triples, each assigned to the first frontier entity that
    // reaches it; ordered scan keeps the assignment deterministic.
    let mut candidate_ids: Vec<(usize, usize)> = Vec::new(); // (triple id, frontier idx)
    let mut claimed = HashSet::new();
    for (fi, entity) in frontier.iter().enumerate() {
        for &id in kb.triples_of(entity) {
            if one_hop_ids.contains(&id) || !claimed.insert(id) {
                continue;
            }
            let t = kb.triple(id);
            if rules.relation_blocklist.contains(&t.relation) {
                continue;
            }
            candidate_ids.push((id, fi));
        }
    }

    // Global top-`cap` by similarity, ties by ascending triple id.
    let mut scored: Vec<(f64, usize, usize)> = candidate_ids
        .into_iter()
        .map(|(id, fi)| (tfidf.cosine(post_tokens, kb.triple(id)), id, fi))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    scored.truncate(cap);

    // Group survivors by frontier entity, preserving frontier order and
    // ascending triple id within each group.
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (_, id, fi) in &scored {
        groups.entry(*fi).or_default().push(*id);
    }
    groups
        .into_iter()
        .map(|(fi, mut ids)| {
            ids.sort_unstable();
            SubGraph {
                anchor_entity: frontier[fi].clone(),
                triples: ids.into_iter().map(|id| kb.triple(id).clone()).collect(),
            }
        })
        .collect()
}

/// TF-IDF document-frequency model fitted on training posts.
/// idf = ln((1+N)/(1+df)) + 1.
#[derive(Debug, Clone, Default)]
pub struct TfidfModel {
    doc_count: usize,
    df: HashMap<String, usize>,
}

impl TfidfModel {
    pub fn fit<S: AsRef<str>, D: AsRef<[S]>>(documents: &[D]) -> Self {
        let mut df: HashMap<String, usize> = HashMap::new();
        for doc in documents {
            let uniq: HashSet<&str> = doc.as_ref().iter().map(|t| t.as_ref()).collect();
            for tok in uniq {
                *df.entry(tok.to_string()).or_default() += 1;
            }
        }
        TfidfModel {
            doc_count: documents.len(),
            df,
        }
    }

    fn idf(&self, token: &str) -> f64 {
        let df = self.df.get(token).copied().unwrap_or(0);
        ((1 + self.doc_count) as f64 / (1 + df) as f64).ln() + 1.0
    }

    fn vector<'a>(&self, tokens: &'a [String]) -> HashMap<&'a str, f64> {
        let mut tf: HashMap<&str, f64> = HashMap::new();
        for tok in tokens {
            *tf.entry(tok.as_str()).or_default() += 1.0;
        }
        for (tok, w) in tf.iter_mut() {
            *w *= self.idf(tok);
        }
        tf
    }

    /// Cosine similarity between the post and the triple's flattened text.
    pub fn cosine(&self, post_tokens: &[String], triple: &Triple) -> f64 {
        let triple_tokens: Vec<String> = crate::text::tokenize(&triple.text());
        self.cosine_tokens(post_tokens, &triple_tokens)
    }

    pub fn cosine_tokens(&self, a: &[String], b: &[String]) -> f64 {
        let va = self.vector(a);
        let vb = self.vector(b);
        if va.is_empty() || vb.is_empty() {
            return 0.0;
        }
        let dot: f64 = va
            .iter()
            .filter_map(|(tok, wa)| vb.get(tok).map(|wb| wa * wb))
            .sum();
        let na: f64 = va.values().map(|w| w * w).sum::<f64>().sqrt();
        let nb: f64 = vb.values().map(|w| w * w).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            (dot / (na * nb)).clamp(0.0, 1.0)
        }
    }
}
