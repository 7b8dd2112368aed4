//! Corpus, query and candidate-pool schemas, the word-level tokenizer, and
//! validated JSONL ingestion.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UaeError};
use crate::jsonl;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const SEP: TokenId = 2;
pub const BOS: TokenId = 3;
pub const EOS: TokenId = 4;
pub const NUM_RESERVED: usize = 5;

const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["[PAD]", "[UNK]", "[SEP]", "[BOS]", "[EOS]"];

pub const DEFAULT_POOL_SIZE: usize = 50;

/// Lowercases, replaces every non-alphanumeric character with a space and
/// splits on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

pub fn is_reserved(id: TokenId) -> bool {
    (id as usize) < NUM_RESERVED
}

/// Word-level vocabulary with dense ids. Ids `0..5` are reserved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    vocab: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
    min_freq: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenizerFile {
    min_freq: usize,
    tokens: Vec<String>,
}

impl Tokenizer {
    /// Builds a vocabulary from raw document texts.
    ///
    /// Tokens are sorted lexicographically before id assignment so the same
    /// corpus always yields the same ids.
    pub fn build<S: AsRef<str>>(texts: &[S], min_freq: usize) -> Result<Self> {
        if texts.is_empty() {
            return Err(UaeError::Ingest("cannot build a vocabulary from an empty corpus".into()));
        }
        if min_freq == 0 {
            return Err(UaeError::Config("min_freq must be >= 1".into()));
        }
        let mut freq: BTreeMap<String, usize> = BTreeMap::new();
        for text in texts {
            for tok in normalize(text.as_ref()) {
                *freq.entry(tok).or_default() += 1;
            }
        }
        let kept: Vec<String> = freq
            .into_iter()
            .filter(|(_, c)| *c >= min_freq)
            .map(|(t, _)| t)
            .collect();
        Ok(Self::from_tokens(kept, min_freq))
    }

    /// `tokens` must be in id order starting at id 5 and must not include the
    /// reserved tokens.
    fn from_tokens(tokens: Vec<String>, min_freq: usize) -> Self {
        let mut id_to_token: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(tokens);
        let vocab = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Tokenizer {
            vocab,
            id_to_token,
            min_freq,
        }
    }

    /// Rebuilds a tokenizer from its id-ordered token list (including the
    /// reserved prefix), as stored in checkpoints.
    pub fn from_id_table(table: Vec<String>, min_freq: usize) -> Result<Self> {
        if table.len() < NUM_RESERVED || table[..NUM_RESERVED] != RESERVED_TOKENS {
            return Err(UaeError::Checkpoint("token table lacks the reserved prefix".into()));
        }
        let tok = Self::from_tokens(table[NUM_RESERVED..].to_vec(), min_freq);
        if tok.vocab.len() != tok.id_to_token.len() {
            return Err(UaeError::Checkpoint("token table contains duplicates".into()));
        }
        Ok(tok)
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        normalize(text)
            .iter()
            .map(|t| self.vocab.get(t).copied().unwrap_or(UNK))
            .collect()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(RESERVED_TOKENS[UNK as usize]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.vocab.get(token).copied()
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn id_table(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = TokenizerFile {
            min_freq: self.min_freq,
            tokens: self.id_to_token[NUM_RESERVED..].to_vec(),
        };
        let text = serde_json::to_string(&file)?;
        std::fs::write(path, text).map_err(|e| UaeError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = jsonl::read_to_string(path)?;
        let file: TokenizerFile = serde_json::from_str(&text)?;
        let tok = Self::from_tokens(file.tokens, file.min_freq);
        if tok.vocab.len() != tok.id_to_token.len() {
            return Err(UaeError::Ingest(format!("{}: duplicate vocabulary entries", path.display())));
        }
        Ok(tok)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DocumentRecord {
    pub doc_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaExample {
    pub query_id: String,
    pub question: String,
    pub answers: Vec<String>,
    pub gold_doc_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidatePool {
    pub query_id: String,
    pub doc_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
    pub tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    pub pool_size: usize,
    pub min_freq: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            pool_size: DEFAULT_POOL_SIZE,
            min_freq: 1,
        }
    }
}

/// A fully validated, cross-linked dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub tokenizer: Tokenizer,
    pub corpus: Vec<Document>,
    pub queries: Vec<QaExample>,
    pub pools: Vec<CandidatePool>,
    doc_index: HashMap<String, usize>,
    query_index: HashMap<String, usize>,
    pool_index: HashMap<String, usize>,
}

impl Dataset {
    /// Validates and links in-memory records. Nothing is returned unless every
    /// check passes.
    pub fn from_records(
        docs: Vec<DocumentRecord>,
        queries: Vec<QaExample>,
        pools: Vec<CandidatePool>,
        opts: LoadOptions,
    ) -> Result<Self> {
        if docs.is_empty() {
            return Err(UaeError::Ingest("corpus is empty".into()));
        }
        let mut doc_index = HashMap::with_capacity(docs.len());
        for (i, d) in docs.iter().enumerate() {
            if doc_index.insert(d.doc_id.clone(), i).is_some() {
                return Err(UaeError::DuplicateId(d.doc_id.clone()));
            }
        }
        let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
        let tokenizer = Tokenizer::build(&texts, opts.min_freq)?;
        let corpus: Vec<Document> = docs
            .into_iter()
            .map(|d| {
                let tokens = tokenizer.tokenize(&d.text);
                if tokens.is_empty() {
                    return Err(UaeError::Ingest(format!(
                        "document {:?} has no tokens after normalization",
                        d.doc_id
                    )));
                }
                Ok(Document {
                    doc_id: d.doc_id,
                    text: d.text,
                    tokens,
                })
            })
            .collect::<Result<_>>()?;

        let mut query_index = HashMap::with_capacity(queries.len());
        for (i, q) in queries.iter().enumerate() {
            if query_index.insert(q.query_id.clone(), i).is_some() {
                return Err(UaeError::DuplicateId(q.query_id.clone()));
            }
            if q.answers.is_empty() {
                return Err(UaeError::Ingest(format!("query {:?} has no answers", q.query_id)));
            }
            if q.answers.iter().any(|a| normalize(a).is_empty()) {
                return Err(UaeError::Ingest(format!(
                    "query {:?} has a blank answer",
                    q.query_id
                )));
            }
            if q.gold_doc_ids.is_empty() {
                return Err(UaeError::Ingest(format!("query {:?} has no gold documents", q.query_id)));
            }
            for g in &q.gold_doc_ids {
                if !doc_index.contains_key(g) {
                    return Err(UaeError::DanglingReference {
                        context: format!("query {:?}", q.query_id),
                        doc_id: g.clone(),
                    });
                }
            }
        }

        let mut pool_index = HashMap::with_capacity(pools.len());
        for (i, p) in pools.iter().enumerate() {
            if !query_index.contains_key(&p.query_id) {
                return Err(UaeError::Ingest(format!(
                    "pool references unknown query {:?}",
                    p.query_id
                )));
            }
            if pool_index.insert(p.query_id.clone(), i).is_some() {
                return Err(UaeError::DuplicateId(format!("pool for {}", p.query_id)));
            }
            if p.doc_ids.len() != opts.pool_size {
                return Err(UaeError::PoolSize {
                    query_id: p.query_id.clone(),
                    expected: opts.pool_size,
                    actual: p.doc_ids.len(),
                });
            }
            let mut seen = HashSet::with_capacity(p.doc_ids.len());
            for d in &p.doc_ids {
                if !doc_index.contains_key(d) {
                    return Err(UaeError::DanglingReference {
                        context: format!("pool for query {:?}", p.query_id),
                        doc_id: d.clone(),
                    });
                }
                if !seen.insert(d.as_str()) {
                    return Err(UaeError::DuplicateId(format!(
                        "{} in pool for {}",
                        d, p.query_id
                    )));
                }
            }
        }

        Ok(Dataset {
            tokenizer,
            corpus,
            queries,
            pools,
            doc_index,
            query_index,
            pool_index,
        })
    }

    pub fn doc(&self, doc_id: &str) -> Option<&Document> {
        self.doc_index.get(doc_id).map(|&i| &self.corpus[i])
    }

    pub fn doc_position(&self, doc_id: &str) -> Option<usize> {
        self.doc_index.get(doc_id).copied()
    }

    pub fn query(&self, query_id: &str) -> Option<&QaExample> {
        self.query_index.get(query_id).map(|&i| &self.queries[i])
    }

    pub fn pool(&self, query_id: &str) -> Option<&CandidatePool> {
        self.pool_index.get(query_id).map(|&i| &self.pools[i])
    }

    pub fn query_tokens(&self, q: &QaExample) -> Vec<TokenId> {
        self.tokenizer.tokenize(&q.question)
    }

    pub fn answer_tokens(&self, q: &QaExample) -> Vec<Vec<TokenId>> {
        q.answers.iter().map(|a| self.tokenizer.tokenize(a)).collect()
    }

    pub fn doc_records(&self) -> Vec<DocumentRecord> {
        self.corpus
            .iter()
            .map(|d| DocumentRecord {
                doc_id: d.doc_id.clone(),
                text: d.text.clone(),
            })
            .collect()
    }

    /// Writes the dataset back in the line format it was loaded from.
    pub fn write(&self, corpus_path: &Path, queries_path: &Path, pools_path: &Path) -> Result<()> {
        jsonl::write_records(corpus_path, &self.doc_records())?;
        jsonl::write_records(queries_path, &self.queries)?;
        jsonl::write_records(pools_path, &self.pools)
    }
}

/// Reads and validates the three dataset files.
pub fn load_dataset(
    corpus_path: &Path,
    queries_path: &Path,
    pools_path: &Path,
    opts: LoadOptions,
) -> Result<Dataset> {
    let docs: Vec<DocumentRecord> = jsonl::read_records(corpus_path)?;
    let queries: Vec<QaExample> = jsonl::read_records(queries_path)?;
    let pools: Vec<CandidatePool> = jsonl::read_records(pools_path)?;
    Dataset::from_records(docs, queries, pools, opts)
}
