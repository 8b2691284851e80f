//! Tokenization, vocabulary, and dataset ingestion.

pub mod synth;

use std::collections::HashMap;
use std::path::Path;

use serde::Deserialize;

use crate::error::{io_err, Error, Result};
use crate::kb::{KnowledgeBase, Triple};

pub use synth::{synth_corpus, SynthConfig, SynthCorpus};

/// Punctuation stripped off token edges into separate tokens.
const EDGE_PUNCT: &[char] = &['.', ',', '!', '?', ';', ':', '"', '(', ')'];

/// Lowercase whitespace tokenizer; surrounding punctuation becomes separate
/// tokens, e.g. `"I like beer!"` → `["i", "like", "beer", "!"]`.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let lower = word.to_lowercase();
        let mut core = lower.as_str();
        let mut leading = Vec::new();
        while let Some(c) = core.chars().next() {
            if EDGE_PUNCT.contains(&c) {
                leading.push(c.to_string());
                core = &core[c.len_utf8()..];
            } else {
                break;
            }
        }
        let mut trailing = Vec::new();
        while let Some(c) = core.chars().last() {
            if EDGE_PUNCT.contains(&c) {
                trailing.push(c.to_string());
                core = &core[..core.len() - c.len_utf8()];
            } else {
                break;
            }
        }
        out.extend(leading);
        if !core.is_empty() {
            out.push(core.to_string());
        }
        out.extend(trailing.into_iter().rev());
    }
    out
}

pub const PAD: &str = "[PAD]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const BOS: &str = "[BOS]";
pub const EOS: &str = "[EOS]";
pub const UNK: &str = "[UNK]";

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const SEP_ID: usize = 2;
pub const BOS_ID: usize = 3;
pub const EOS_ID: usize = 4;
pub const UNK_ID: usize = 5;

const RESERVED: [&str; 6] = [PAD, CLS, SEP, BOS, EOS, UNK];

/// Token ↔ id map with fixed reserved ids; ids are contiguous from 0.
#[derive(Debug, Clone)]
pub struct Vocab {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Build from documents in first-occurrence order after the reserved ids.
    pub fn build<'a, I>(docs: I) -> Self
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut v = Vocab {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
        };
        for tok in RESERVED {
            v.push(tok);
        }
        for doc in docs {
            for tok in doc {
                if !v.token_to_id.contains_key(tok) {
                    v.push(tok);
                }
            }
        }
        v
    }

    fn push(&mut self, tok: &str) {
        self.token_to_id
            .insert(tok.to_string(), self.id_to_token.len());
        self.id_to_token.push(tok.to_string());
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// Dump as `token\tid` lines.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (id, tok) in self.id_to_token.iter().enumerate() {
            out.push_str(&format!("{tok}\t{id}\n"));
        }
        std::fs::write(path, out).map_err(|e| io_err(path, e))
    }
}

/// One conversation pair: post tokens, response tokens, golden triples.
#[derive(Debug, Clone)]
pub struct DialogueExample {
    pub post: Vec<String>,
    pub response: Vec<String>,
    pub golden: Vec<Triple>,
}

#[derive(Deserialize)]
struct RawExample {
    post: String,
    response: String,
    #[serde(default)]
    golden: Vec<[String; 3]>,
}

/// Load a JSONL dataset, resolving golden triples against the KB.
/// Returns the examples and the count of unresolvable golden annotations.
pub fn load_dataset(path: &Path, kb: &KnowledgeBase) -> Result<(Vec<DialogueExample>, usize)> {
    let content = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut examples = Vec::new();
    let mut unresolved = 0;
    for (lineno, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawExample = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        let post = tokenize(&raw.post);
        let response = tokenize(&raw.response);
        if post.is_empty() || response.is_empty() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: "post and response must be non-empty".into(),
            });
        }
        let mut golden = Vec::new();
        for [h, r, t] in &raw.golden {
            match kb.find(h, r, t) {
                Some(triple) => golden.push(triple.clone()),
                None => unresolved += 1,
            }
        }
        examples.push(DialogueExample {
            post,
            response,
            golden,
        });
    }
    Ok((examples, unresolved))
}

/// Write examples as JSONL in the format `load_dataset` reads.
pub fn write_dataset(path: &Path, examples: &[DialogueExample]) -> Result<()> {
    let mut out = String::new();
    for ex in examples {
        let golden: Vec<[&str; 3]> = ex
            .golden
            .iter()
            .map(|t| [t.head.as_str(), t.relation.as_str(), t.tail.as_str()])
            .collect();
        let rec = serde_json::json!({
            "post": ex.post.join(" "),
            "response": ex.response.join(" "),
            "golden": golden,
        });
        out.push_str(&rec.to_string());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Entity tokens in the reference response that cannot be explained by the
/// post or the golden triples — present exactly when the response leans on
/// second-hop knowledge.
pub fn dependent_entities(ex: &DialogueExample, kb: &KnowledgeBase) -> Vec<String> {
    let mut known: Vec<&str> = ex.post.iter().map(String::as_str).collect();
    for t in &ex.golden {
        known.push(&t.head);
        known.push(&t.tail);
    }
    let mut out = Vec::new();
    for tok in &ex.response {
        if kb.is_entity(tok) && !known.contains(&tok.as_str()) && !out.contains(tok) {
            out.push(tok.clone());
        }
    }
    out
}

/// True when the reference response mentions entities only reachable through
/// a second hop.
pub fn is_two_hop_dependent(ex: &DialogueExample, kb: &KnowledgeBase) -> bool {
    !dependent_entities(ex, kb).is_empty()
}
