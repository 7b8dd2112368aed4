//! Synthetic QA benchmark with semantic distractors.
//!
//! Documents are grouped into topics that share a small word set, so every
//! document of a topic overlaps heavily with every query of that topic. Each
//! query asks for a relation of an entity; its gold document states the answer
//! in a sentence `the <rel> of <entity> equals <a1> <a2>`. Entities recur
//! across topics, at most once per topic. Entity distractors carry all of the
//! query's topic words around the same sentence with generic words in the
//! answer slot, so they are lexically closer to the query than the gold
//! document while carrying none of the answer.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{normalize, CandidatePool, DocumentRecord, QaExample};
use crate::error::{Result, UaeError};
use crate::jsonl;
use crate::seed::stream_seed;

/// Query words that carry no content.
pub const STOPWORDS: [&str; 5] = ["what", "is", "the", "of", "in"];

const TOPIC_WORDS: usize = 5;
const QUERY_TOPIC_WORDS: usize = 3;
const QUERIES_PER_TOPIC: usize = 10;
const FILLER_WORDS: usize = 300;
const MAX_ENTITY_DISTRACTORS: usize = 3;
/// Each entity is shared by about this many queries, never twice in a topic.
const QUERIES_PER_ENTITY: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_docs: usize,
    pub num_queries: usize,
    pub pool_size: usize,
    pub answer_vocab: usize,
    /// Share of the `N - 1` non-gold pool slots filled with lexical distractors.
    pub lexical_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_docs: 2000,
            num_queries: 500,
            pool_size: 50,
            answer_vocab: 200,
            lexical_fraction: 0.6,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_queries == 0 || self.pool_size < 2 {
            return Err(UaeError::Config("need at least one query and a pool size of at least 2".into()));
        }
        if self.num_docs < self.num_queries {
            return Err(UaeError::Config(format!(
                "{} documents cannot hold a gold document for each of {} queries",
                self.num_docs, self.num_queries
            )));
        }
        if self.pool_size > self.num_docs {
            return Err(UaeError::Config(format!(
                "pool size {} exceeds corpus size {}",
                self.pool_size, self.num_docs
            )));
        }
        if self.answer_vocab < 2 {
            return Err(UaeError::Config("answer_vocab must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.lexical_fraction) {
            return Err(UaeError::Config(format!(
                "lexical_fraction must be in [0,1], got {}",
                self.lexical_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub corpus: Vec<DocumentRecord>,
    pub queries: Vec<QaExample>,
    pub pools: Vec<CandidatePool>,
}

impl SynthData {
    pub fn write(&self, corpus: &Path, queries: &Path, pools: &Path) -> Result<()> {
        jsonl::write_records(corpus, &self.corpus)?;
        jsonl::write_records(queries, &self.queries)?;
        jsonl::write_records(pools, &self.pools)
    }
}

/// Distinct pronounceable words that collide with neither the stopwords nor
/// the articles removed by answer normalization.
fn word_bank(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    const ONSETS: &[u8] = b"bdfgklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = 2 + usize::from(rng.random_bool(0.5));
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(*ONSETS.choose(rng).expect("non-empty") as char);
            w.push(*VOWELS.choose(rng).expect("non-empty") as char);
        }
        if rng.random_bool(0.3) {
            w.push(*ONSETS.choose(rng).expect("non-empty") as char);
        }
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

struct QuerySpec {
    topic: usize,
    entity: String,
    topic_words: Vec<String>,
    answer: [String; 2],
}

fn sample<'a>(rng: &mut ChaCha8Rng, from: &'a [String], n: usize) -> Vec<&'a str> {
    from.choose_multiple(rng, n).map(String::as_str).collect()
}

/// Content words of a question: its normalized tokens minus stopwords.
pub fn content_words(question: &str) -> BTreeSet<String> {
    normalize(question)
        .into_iter()
        .filter(|w| !STOPWORDS.contains(&w.as_str()))
        .collect()
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, &["synth"]));
    let num_topics = spec.num_queries.div_ceil(QUERIES_PER_TOPIC);

    let num_entities = spec.num_queries.div_ceil(QUERIES_PER_ENTITY).max(QUERIES_PER_TOPIC);
    let bank = word_bank(
        &mut rng,
        num_topics * (TOPIC_WORDS + 1) + num_entities + spec.answer_vocab + FILLER_WORDS,
    );
    let mut words = bank.into_iter();
    let mut take = |n: usize| -> Vec<String> { words.by_ref().take(n).collect() };
    let topics: Vec<Vec<String>> = (0..num_topics).map(|_| take(TOPIC_WORDS)).collect();
    let relations = take(num_topics);
    let entities = take(num_entities);
    let answer_words = take(spec.answer_vocab);
    let filler = take(FILLER_WORDS);

    let mut topic_entities: Vec<Vec<String>> = (0..num_topics)
        .map(|_| sample(&mut rng, &entities, QUERIES_PER_TOPIC).into_iter().map(String::from).collect())
        .collect();
    let queries: Vec<QuerySpec> = (0..spec.num_queries)
        .map(|i| {
            let topic = i % num_topics;
            let entity = topic_entities[topic].pop().expect("one entity per query slot");
            let topic_words = sample(&mut rng, &topics[topic], QUERY_TOPIC_WORDS)
                .into_iter()
                .map(String::from)
                .collect();
            let pair = sample(&mut rng, &answer_words, 2);
            QuerySpec {
                topic,
                entity,
                topic_words,
                answer: [pair[0].to_string(), pair[1].to_string()],
            }
        })
        .collect();

    let fill = |rng: &mut ChaCha8Rng, n: usize| -> Vec<&str> { (0..n).map(|_| filler.choose(rng).expect("filler").as_str()).collect() };

    // (text, owning query for gold docs, topic)
    let mut docs: Vec<(String, Option<usize>, usize)> = Vec::with_capacity(spec.num_docs);
    let per_query = ((spec.num_docs - spec.num_queries) / spec.num_queries).min(MAX_ENTITY_DISTRACTORS);
    for (qi, q) in queries.iter().enumerate() {
        let rel = relations[q.topic].as_str();
        let mut intro: Vec<&str> = sample(&mut rng, &q.topic_words, 1);
        let others: Vec<&String> = topics[q.topic].iter().filter(|w| !q.topic_words.contains(w)).collect();
        intro.push(others.choose(&mut rng).expect("topic has spare words").as_str());
        intro.push(&q.entity);
        intro.shuffle(&mut rng);
        let mut gold = intro.join(" ");
        gold.push_str(&format!(". the {rel} of {} equals {} {}.", q.entity, q.answer[0], q.answer[1]));
        docs.push((gold, Some(qi), q.topic));

        for _ in 0..per_query {
            let mut intro: Vec<&str> = q.topic_words.iter().map(String::as_str).collect();
            intro.push(&q.entity);
                intro.shuffle(&mut rng);
            let text = format!(
                "{}. the {rel} of {} equals {} {}.",
                intro.join(" "),
                q.entity,
                fill(&mut rng, 1)[0],
                fill(&mut rng, 1)[0]
            );
            docs.push((text, None, q.topic));
        }
    }
    let mut t = 0;
    while docs.len() < spec.num_docs {
        let topic = t % num_topics;
        t += 1;
        let rel = relations[topic].as_str();
        let mut intro = sample(&mut rng, &topics[topic], TOPIC_WORDS - 1);
        intro.shuffle(&mut rng);
        let members: Vec<&QuerySpec> = queries.iter().filter(|q| q.topic == topic).collect();
        let other = members.choose(&mut rng).expect("every topic has a query").entity.as_str();
        let text = format!("{}. the {rel} of {other} {}.", intro.join(" "), fill(&mut rng, 1)[0]);
        docs.push((text, None, topic));
    }

    // Random ids so that id-based tie-breaking carries no signal.
    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.shuffle(&mut rng);
    let mut doc_ids = vec![String::new(); docs.len()];
    for (rank, &i) in order.iter().enumerate() {
        doc_ids[i] = format!("d{rank:05}");
    }
    let doc_tokens: Vec<HashSet<String>> = docs.iter().map(|(text, _, _)| normalize(text).into_iter().collect()).collect();
    let mut gold_of = vec![usize::MAX; queries.len()];
    for (i, (_, owner, _)) in docs.iter().enumerate() {
        if let Some(q) = owner {
            gold_of[*q] = i;
        }
    }

    let lexical_slots = ((spec.pool_size - 1) as f64 * spec.lexical_fraction).round() as usize;
    let mut out_queries = Vec::with_capacity(queries.len());
    let mut pools = Vec::with_capacity(queries.len());
    for (qi, q) in queries.iter().enumerate() {
        let query_id = format!("q{qi:04}");
        let question = format!(
            "what is the {} of {} in {}",
            relations[q.topic],
            q.entity,
            q.topic_words.join(" ")
        );
        let content = content_words(&question);
        let need = content.len().div_ceil(2);
        let gold = gold_of[qi];
        let answer_free = |i: usize| i != gold && q.answer.iter().all(|a| !doc_tokens[i].contains(a));
        let overlap = |i: usize| content.iter().filter(|w| doc_tokens[i].contains(*w)).count();

        let mut lexical: Vec<usize> = (0..docs.len()).filter(|&i| answer_free(i) && overlap(i) >= need).collect();
        lexical.shuffle(&mut rng);
        // Prefer the closest lexical matches so entity distractors always make it in.
        lexical.sort_by_key(|&i| std::cmp::Reverse(overlap(i)));
        lexical.truncate(lexical_slots);
        let mut chosen: Vec<usize> = vec![gold];
        chosen.extend(&lexical);
        let taken: HashSet<usize> = chosen.iter().copied().collect();
        let mut rest: Vec<usize> = (0..docs.len()).filter(|&i| answer_free(i) && !taken.contains(&i)).collect();
        if rest.len() + chosen.len() < spec.pool_size {
            return Err(UaeError::Config(format!(
                "query {query_id}: only {} answer-free documents for a pool of {}",
                rest.len() + chosen.len() - 1,
                spec.pool_size
            )));
        }
        rest.shuffle(&mut rng);
        chosen.extend(rest.into_iter().take(spec.pool_size - chosen.len()));
        chosen.shuffle(&mut rng);

        pools.push(CandidatePool {
            query_id: query_id.clone(),
            doc_ids: chosen.iter().map(|&i| doc_ids[i].clone()).collect(),
        });
        out_queries.push(QaExample {
            query_id,
            question,
            answers: vec![format!("{} {}", q.answer[0], q.answer[1])],
            gold_doc_ids: vec![doc_ids[gold].clone()],
        });
    }

    let mut corpus: Vec<DocumentRecord> = docs
        .into_iter()
        .zip(doc_ids)
        .map(|((text, _, _), doc_id)| DocumentRecord { doc_id, text })
        .collect();
    corpus.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    Ok(SynthData {
        corpus,
        queries: out_queries,
        pools,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{Dataset, LoadOptions};

    fn small() -> SynthSpec {
        SynthSpec {
            num_docs: 400,
            num_queries: 100,
            pool_size: 20,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn default_cardinalities() {
        let data = generate_synthetic(&SynthSpec::default()).unwrap();
        assert_eq!(data.corpus.len(), 2000);
        assert_eq!(data.queries.len(), 500);
        assert!(data.pools.iter().all(|p| p.doc_ids.len() == 50));
        Dataset::from_records(data.corpus, data.queries, data.pools, LoadOptions::default()).unwrap();
    }

    #[test]
    fn gold_contains_answer_and_distractors_do_not() {
        let data = generate_synthetic(&small()).unwrap();
        let text = |id: &str| {
            let d = data.corpus.iter().find(|d| d.doc_id == id).unwrap();
            normalize(&d.text).join(" ")
        };
        for (q, pool) in data.queries.iter().zip(&data.pools) {
            let answer = normalize(&q.answers[0]).join(" ");
            assert!(text(&q.gold_doc_ids[0]).contains(&answer));
            assert_eq!(pool.doc_ids.iter().filter(|d| **d == q.gold_doc_ids[0]).count(), 1);
            let answer_tokens = normalize(&q.answers[0]);
            let content = content_words(&q.question);
            let mut lexical = 0;
            for id in pool.doc_ids.iter().filter(|d| **d != q.gold_doc_ids[0]) {
                let toks: HashSet<String> = normalize(&text(id)).into_iter().collect();
                assert!(answer_tokens.iter().all(|a| !toks.contains(a)), "{id} leaks the answer");
                if content.iter().filter(|w| toks.contains(*w)).count() * 2 >= content.len() {
                    lexical += 1;
                }
            }
            assert!(lexical >= 11, "query {} has {lexical} lexical distractors", q.query_id);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic(&small()).unwrap();
        assert_eq!(a, generate_synthetic(&small()).unwrap());
        let other = SynthSpec { seed: 1, ..small() };
        assert_ne!(a, generate_synthetic(&other).unwrap());
    }

    #[test]
    fn rejects_pool_larger_than_corpus() {
        let spec = SynthSpec {
            num_docs: 30,
            num_queries: 10,
            pool_size: 31,
            ..SynthSpec::default()
        };
        assert!(matches!(generate_synthetic(&spec), Err(UaeError::Config(_))));
    }

    #[test]
    fn content_words_drop_stopwords() {
        let c = content_words("What is the color of Bob in rome");
        assert_eq!(c.into_iter().collect::<Vec<_>>(), ["bob", "color", "rome"]);
    }
}
