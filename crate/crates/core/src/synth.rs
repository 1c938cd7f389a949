//! Synthetic retrieval tasks with planted structure.
//!
//! The vocabulary splits into topic regions, a shared common pool and a
//! marker pool. Documents come in small groups: every member of a group
//! carries the same two rare marker tokens but a different latent topic.
//! A query names its target's markers (lexical signal, shared by the
//! whole group) plus a few tokens from the target's topic that the target
//! itself does not contain (semantic signal with a vocabulary gap).
//!
//! Plain term matching therefore ranks the whole group together and
//! cannot tell its members apart, while a representation that learns
//! topic structure can. Everything is deterministic per seed.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::repr::{Document, Qrels, Query, TokenLimits};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_docs: usize,
    pub vocab_size: u32,
    pub n_topics: usize,
    /// Docs per marker group; group members all get distinct topics.
    pub group_size: usize,
    /// Exclusive vocabulary tokens per topic.
    pub tokens_per_topic: usize,
    /// Tokens reserved for the shared common pool.
    pub common_pool: usize,
    /// Topic tokens drawn into each document.
    pub doc_topic_tokens: usize,
    /// Common-pool tokens drawn into each document.
    pub doc_common_tokens: usize,
    /// Copies of each group marker in a document.
    pub marker_repeats: usize,
    /// Topic tokens drawn into each query (absent from the target doc).
    pub query_topic_tokens: usize,
    pub n_train_queries: usize,
    pub n_dev_queries: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_docs: 2000,
            vocab_size: 1024,
            n_topics: 20,
            group_size: 5,
            tokens_per_topic: 30,
            common_pool: 150,
            doc_topic_tokens: 14,
            doc_common_tokens: 4,
            marker_repeats: 2,
            query_topic_tokens: 3,
            n_train_queries: 200,
            n_dev_queries: 50,
            seed: 42,
        }
    }
}

impl SynthConfig {
    fn marker_pool(&self) -> Result<std::ops::Range<u32>, SynthError> {
        let topics_end = 2 + (self.n_topics * self.tokens_per_topic) as u32;
        let common_end = topics_end + self.common_pool as u32;
        if common_end + 2 >= self.vocab_size {
            return Err(SynthError::Config(format!(
                "vocab size {} too small for {} topics x {} tokens + {} common",
                self.vocab_size, self.n_topics, self.tokens_per_topic, self.common_pool
            )));
        }
        Ok(common_end..self.vocab_size)
    }

    fn topic_range(&self, topic: usize) -> std::ops::Range<u32> {
        let start = 2 + (topic * self.tokens_per_topic) as u32;
        start..start + self.tokens_per_topic as u32
    }

    fn common_range(&self) -> std::ops::Range<u32> {
        let start = 2 + (self.n_topics * self.tokens_per_topic) as u32;
        start..start + self.common_pool as u32
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_docs == 0
            || self.n_topics == 0
            || self.group_size == 0
            || self.tokens_per_topic == 0
        {
            return Err(SynthError::Config("sizes must be positive".into()));
        }
        if self.group_size > self.n_topics {
            return Err(SynthError::Config(
                "group_size cannot exceed n_topics (group members need distinct topics)".into(),
            ));
        }
        if self.query_topic_tokens + self.doc_topic_tokens > self.tokens_per_topic {
            return Err(SynthError::Config(
                "topic pool too small to keep query topic tokens out of the target doc".into(),
            ));
        }
        if self.n_train_queries + self.n_dev_queries > self.n_docs {
            return Err(SynthError::Config("more queries than documents".into()));
        }
        self.marker_pool().map(|_| ())
    }
}

/// A generated task: fixed collection, split query sets, judgments.
#[derive(Debug, Clone)]
pub struct SynthTask {
    pub corpus: Vec<Document>,
    pub train_queries: Vec<Query>,
    pub dev_queries: Vec<Query>,
    pub train_qrels: Qrels,
    pub dev_qrels: Qrels,
}

struct DocPlan {
    topic: usize,
    markers: [u32; 2],
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthTask, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let limits = TokenLimits { vocab_size: cfg.vocab_size, max_seq_len: 126 };
    let marker_pool: Vec<u32> = cfg.marker_pool()?.collect();

    // Plan groups: two markers per group, distinct topics inside a group.
    // Marker pairs are unique across groups, otherwise colliding groups
    // merge into one ambiguous super-group with near-duplicate members.
    let mut plans: Vec<DocPlan> = Vec::with_capacity(cfg.n_docs);
    let mut topics: Vec<usize> = (0..cfg.n_topics).collect();
    let mut used_pairs: std::collections::HashSet<(u32, u32)> = std::collections::HashSet::new();
    let n_groups = cfg.n_docs.div_ceil(cfg.group_size);
    let pair_space = marker_pool.len() * (marker_pool.len() - 1) / 2;
    if n_groups > pair_space {
        return Err(SynthError::Config(format!(
            "{n_groups} groups need distinct marker pairs but only {pair_space} exist"
        )));
    }
    let mut doc = 0;
    while doc < cfg.n_docs {
        let (a, b) = loop {
            let a = marker_pool[rng.gen_range(0..marker_pool.len())];
            let b = marker_pool[rng.gen_range(0..marker_pool.len())];
            if a == b {
                continue;
            }
            let key = (a.min(b), a.max(b));
            if used_pairs.insert(key) {
                break (a, b);
            }
        };
        topics.shuffle(&mut rng);
        for member in 0..cfg.group_size.min(cfg.n_docs - doc) {
            plans.push(DocPlan { topic: topics[member], markers: [a, b] });
            doc += 1;
        }
    }

    let corpus: Vec<Document> = plans
        .iter()
        .enumerate()
        .map(|(i, plan)| {
            let mut tokens = Vec::new();
            for &marker in &plan.markers {
                for _ in 0..cfg.marker_repeats {
                    tokens.push(marker);
                }
            }
            let topic_range = cfg.topic_range(plan.topic);
            for _ in 0..cfg.doc_topic_tokens {
                tokens.push(rng.gen_range(topic_range.clone()));
            }
            let common = cfg.common_range();
            for _ in 0..cfg.doc_common_tokens {
                tokens.push(rng.gen_range(common.clone()));
            }
            tokens.shuffle(&mut rng);
            Document::new(format!("d{i:05}"), tokens, &limits).expect("generated doc is valid")
        })
        .collect();

    // Train queries target distinct documents. Dev queries are fresh
    // queries about documents drawn from the same target pool (the usual
    // fixed-collection setting): wording generalization is tested on the
    // query side while every document stays equally exposed to training.
    let mut target_order: Vec<usize> = (0..cfg.n_docs).collect();
    target_order.shuffle(&mut rng);
    let train_targets: Vec<usize> = target_order[..cfg.n_train_queries].to_vec();
    let dev_targets: Vec<usize> = (0..cfg.n_dev_queries)
        .map(|i| train_targets[i % train_targets.len()])
        .collect();

    let make_queries = |prefix: &str, targets: &[usize], rng: &mut ChaCha8Rng| {
        let mut queries = Vec::with_capacity(targets.len());
        let mut qrels = Qrels::new();
        for (qi, &target_idx) in targets.iter().enumerate() {
            let target = &corpus[target_idx];
            let plan = &plans[target_idx];
            let mut tokens: Vec<u32> = plan.markers.to_vec();
            // Topic tokens the target does NOT contain: same topic, new
            // words. This is the semantic gap term matching cannot cross.
            let available: Vec<u32> = cfg
                .topic_range(plan.topic)
                .filter(|t| !target.tokens.contains(t))
                .collect();
            for _ in 0..cfg.query_topic_tokens {
                tokens.push(available[rng.gen_range(0..available.len())]);
            }
            tokens.shuffle(rng);
            let qid = format!("{prefix}{qi:04}");
            qrels.insert(&qid, &target.doc_id, 1);
            queries.push(Query::new(qid, tokens, &limits).expect("generated query is valid"));
        }
        (queries, qrels)
    };

    let (train_queries, train_qrels) = make_queries("qt", &train_targets, &mut rng);
    let (dev_queries, dev_qrels) = make_queries("qd", &dev_targets, &mut rng);

    Ok(SynthTask { corpus, train_queries, dev_queries, train_qrels, dev_qrels })
}
