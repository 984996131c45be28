//! Chunked example corpus for retrieval-augmented prompting.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{parse_json, read_to_string, Error, Result};
use crate::exec::parallel_map;
use crate::keypath::{Location, Segment};
use crate::llm::EmbeddingProvider;
use crate::template::json_files;

pub const DEFAULT_K: usize = 3;
const EMBED_BATCH: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub contract_type: String,
    /// Normalized dot-path of the subtree; empty for a whole document.
    pub source_path: String,
    pub body: String,
    pub token_estimate: usize,
    /// Set when a single leaf alone exceeds the chunk budget.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub oversized: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector: Option<Vec<f32>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scorer {
    #[default]
    Lexical,
    Embedding,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    pub chunks: Vec<Chunk>,
    pub scorer: Scorer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_dim: Option<usize>,
    /// Weight of source-path token overlap added to lexical scores. Off by default.
    #[serde(default)]
    pub structural_weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored<'a> {
    pub chunk: &'a Chunk,
    pub score: f64,
}

/// Rough token count: one token per four characters.
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

/// Lowercased alphanumeric runs.
pub fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

fn token_set(text: &str) -> BTreeSet<String> {
    tokens(text).collect()
}

/// Chunks every example document under `example_dir`.
pub fn ingest_examples(example_dir: impl AsRef<Path>, contract_type: &str, chunk_budget: usize) -> Result<KnowledgeBase> {
    if chunk_budget == 0 {
        return Err(Error::Precondition("chunk budget must be positive".into()));
    }
    let dir = example_dir.as_ref();
    let files = json_files(dir)?;
    if files.is_empty() {
        return Err(Error::EmptyExampleDir(dir.to_path_buf()));
    }
    let mut kb = KnowledgeBase::default();
    for file in files {
        let value = parse_json(&file, &read_to_string(&file)?)?;
        let rel = file.strip_prefix(dir).unwrap_or(&file).with_extension("");
        let name = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/");
        kb.chunks.extend(chunk_document(&name, &value, contract_type, chunk_budget));
    }
    for c in kb.chunks.iter().filter(|c| c.oversized) {
        tracing::warn!(chunk = %c.chunk_id, tokens = c.token_estimate, budget = chunk_budget, "leaf exceeds chunk budget");
    }
    Ok(kb)
}

/// Splits one document along subtree boundaries: a subtree that fits the
/// budget becomes one chunk, otherwise its children are chunked.
pub fn chunk_document(doc_name: &str, value: &Value, contract_type: &str, budget: usize) -> Vec<Chunk> {
    let mut out = Vec::new();
    split(doc_name, value, &Location::root(), contract_type, budget, &mut out);
    out
}

fn chunk_body(location: &Location, value: &Value) -> Value {
    match location.0.last() {
        None => value.clone(),
        Some(Segment::Key(k)) => Value::Object(Map::from_iter([(k.clone(), value.clone())])),
        Some(Segment::Index(_)) => {
            let key = location.last_key().unwrap_or("items").to_string();
            Value::Object(Map::from_iter([(key, Value::Array(vec![value.clone()]))]))
        }
    }
}

fn split(doc_name: &str, value: &Value, location: &Location, contract_type: &str, budget: usize, out: &mut Vec<Chunk>) {
    let body = chunk_body(location, value).to_string();
    let token_estimate = estimate_tokens(&body);
    let children: Vec<(Location, &Value)> = match value {
        Value::Object(map) => map.iter().map(|(k, v)| (location.child_key(k), v)).collect(),
        Value::Array(items) => items.iter().enumerate().map(|(i, v)| (location.child_index(i), v)).collect(),
        _ => Vec::new(),
    };
    if token_estimate <= budget || children.is_empty() {
        out.push(Chunk {
            chunk_id: format!("{doc_name}:{location}"),
            contract_type: contract_type.to_string(),
            source_path: location.dot_path(),
            body,
            token_estimate,
            oversized: token_estimate > budget,
            vector: None,
        });
        return;
    }
    for (child, v) in children {
        split(doc_name, v, &child, contract_type, budget, out);
    }
}

impl KnowledgeBase {
    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn push(&mut self, chunk: Chunk) -> Result<()> {
        if self.chunks.iter().any(|c| c.chunk_id == chunk.chunk_id) {
            return Err(Error::Precondition(format!("duplicate chunk id `{}`", chunk.chunk_id)));
        }
        self.chunks.push(chunk);
        Ok(())
    }

    pub fn lexical_score(&self, query: &BTreeSet<String>, chunk: &Chunk) -> f64 {
        let body = token_set(&chunk.body);
        let mut score = if body.is_empty() {
            0.0
        } else {
            body.intersection(query).count() as f64 / body.len() as f64
        };
        if self.structural_weight > 0.0 {
            let path = token_set(&chunk.source_path);
            if !path.is_empty() {
                score += self.structural_weight * path.intersection(query).count() as f64 / path.len() as f64;
            }
        }
        score
    }

    /// Top-`k` chunks by the lexical scorer; ties go to the smaller chunk id.
    pub fn retrieve(&self, query: &str, k: usize) -> Vec<Scored<'_>> {
        let q = token_set(query);
        self.rank(k, |c| self.lexical_score(&q, c))
    }

    /// Top-`k` chunks by cosine similarity against stored unit vectors.
    pub fn retrieve_by_vector(&self, query: &[f32], k: usize) -> Result<Vec<Scored<'_>>> {
        if self.scorer != Scorer::Embedding {
            return Err(Error::Precondition("knowledge base has no embeddings".into()));
        }
        let dim = self.embedding_dim.unwrap_or(query.len());
        if query.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, found: query.len() });
        }
        let q = unit(query).ok_or(Error::DimensionMismatch { expected: dim, found: 0 })?;
        Ok(self.rank(k, |c| {
            c.vector
                .as_ref()
                .map(|v| v.iter().zip(&q).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum())
                .unwrap_or(f64::NEG_INFINITY)
        }))
    }

    /// Uses the embedding scorer when the corpus is embedded and an embedder
    /// is supplied, otherwise the lexical scorer.
    pub fn retrieve_with(&self, query: &str, k: usize, embedder: Option<&dyn EmbeddingProvider>) -> Result<Vec<Scored<'_>>> {
        match (self.scorer, embedder) {
            (Scorer::Embedding, Some(e)) => {
                let v = e
                    .embed(&[query.to_string()])?
                    .pop()
                    .ok_or_else(|| Error::ProviderUnavailable("embedder returned no vector".into()))?;
                self.retrieve_by_vector(&v, k)
            }
            _ => Ok(self.retrieve(query, k)),
        }
    }

    fn rank(&self, k: usize, score: impl Fn(&Chunk) -> f64) -> Vec<Scored<'_>> {
        let mut scored: Vec<Scored<'_>> = self
            .chunks
            .iter()
            .map(|c| Scored { chunk: c, score: score(c) })
            .collect();
        scored.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.chunk.chunk_id.cmp(&b.chunk.chunk_id))
        });
        scored.truncate(k.max(1));
        scored
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path.as_ref(), serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let value = parse_json(path, &read_to_string(path)?)?;
        serde_json::from_value(value).map_err(|e| Error::MalformedDocument {
            file: path.to_path_buf(),
            offset: 0,
            message: e.to_string(),
        })
    }
}

fn unit(v: &[f32]) -> Option<Vec<f32>> {
    if v.iter().any(|x| !x.is_finite()) {
        return None;
    }
    let norm = v.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return None;
    }
    Some(v.iter().map(|x| (f64::from(*x) / norm) as f32).collect())
}

/// Embeds every chunk body, stores unit vectors and switches to the embedding scorer.
pub fn embed_corpus(kb: &KnowledgeBase, provider: &dyn EmbeddingProvider, max_in_flight: usize) -> Result<KnowledgeBase> {
    let batches: Vec<Vec<String>> = kb
        .chunks
        .chunks(EMBED_BATCH)
        .map(|b| b.iter().map(|c| c.body.clone()).collect())
        .collect();
    let results = parallel_map(&batches, max_in_flight, |_, batch| provider.embed(batch));
    let mut vectors = Vec::with_capacity(kb.chunks.len());
    for (batch, r) in batches.iter().zip(results) {
        let r = r?;
        if r.len() != batch.len() {
            return Err(Error::ProviderUnavailable(format!("asked for {} embeddings, got {}", batch.len(), r.len())));
        }
        vectors.extend(r);
    }
    let mut dim = kb.embedding_dim;
    let mut out = kb.clone();
    for (chunk, v) in out.chunks.iter_mut().zip(vectors) {
        let expected = *dim.get_or_insert(v.len());
        if v.len() != expected {
            return Err(Error::DimensionMismatch { expected, found: v.len() });
        }
        chunk.vector = Some(unit(&v).ok_or_else(|| {
            Error::ProviderUnavailable(format!("embedding for `{}` is zero or non-finite", chunk.chunk_id))
        })?);
    }
    out.scorer = Scorer::Embedding;
    out.embedding_dim = dim;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::MockEmbedder;
    use serde_json::json;

    fn example() -> Value {
        json!({
            "trade": {"tradeDate": "2024-01-15", "party": [{"name": "Alpha"}, {"name": "Beta"}]},
            "product": {"economicTerms": {"notional": 1000000, "currency": "USD"}}
        })
    }

    fn leaf_multiset(chunks: &[Chunk]) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for c in chunks {
            let body: Value = serde_json::from_str(&c.body).unwrap();
            let parent = match c.source_path.rsplit_once('.') {
                Some((p, _)) => p.to_string(),
                None => String::new(),
            };
            collect(&body, &parent, &mut out);
        }
        out.sort();
        out
    }

    fn collect(v: &Value, prefix: &str, out: &mut Vec<(String, String)>) {
        match v {
            Value::Object(m) => m.iter().for_each(|(k, c)| collect(c, &crate::keypath::join(prefix, k), out)),
            Value::Array(a) => a.iter().for_each(|c| collect(c, prefix, out)),
            s => out.push((prefix.to_string(), s.to_string())),
        }
    }

    #[test]
    fn whole_document_fits() {
        let chunks = chunk_document("ex", &example(), "irs", 10_000);
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].source_path, "");
        assert_eq!(chunks[0].chunk_id, "ex:$");
    }

    #[test]
    fn split_at_top_level() {
        let doc = example();
        let whole = estimate_tokens(&doc.to_string());
        let trade = estimate_tokens(&json!({"trade": doc["trade"]}).to_string());
        let product = estimate_tokens(&json!({"product": doc["product"]}).to_string());
        let budget = trade.max(product);
        assert!(budget < whole);
        let chunks = chunk_document("ex", &doc, "irs", budget);
        let paths: Vec<_> = chunks.iter().map(|c| c.source_path.as_str()).collect();
        assert_eq!(paths, vec!["trade", "product"]);
        assert!(chunks.iter().all(|c| c.token_estimate <= budget && !c.oversized));
    }

    #[test]
    fn coverage_partition_at_every_budget() {
        let doc = example();
        let mut reference = Vec::new();
        collect(&doc, "", &mut reference);
        reference.sort();
        for budget in 1..60 {
            let chunks = chunk_document("ex", &doc, "irs", budget);
            assert_eq!(leaf_multiset(&chunks), reference, "budget {budget}");
            for c in &chunks {
                assert!(serde_json::from_str::<Value>(&c.body).is_ok());
                assert!(c.oversized || c.token_estimate <= budget);
            }
            let ids: BTreeSet<_> = chunks.iter().map(|c| &c.chunk_id).collect();
            assert_eq!(ids.len(), chunks.len());
        }
    }

    #[test]
    fn tiny_budget_flags_oversized_leaves() {
        let chunks = chunk_document("ex", &json!({"a": "a long leaf value"}), "t", 2);
        assert_eq!(chunks.len(), 1);
        assert!(chunks[0].oversized);
    }

    fn kb_of(bodies: &[(&str, &str)]) -> KnowledgeBase {
        let mut kb = KnowledgeBase::default();
        for (id, body) in bodies {
            kb.push(Chunk {
                chunk_id: id.to_string(),
                contract_type: "t".into(),
                source_path: String::new(),
                body: body.to_string(),
                token_estimate: estimate_tokens(body),
                oversized: false,
                vector: None,
            })
            .unwrap();
        }
        kb
    }

    #[test]
    fn zero_overlap_falls_back_to_id_order() {
        let kb = kb_of(&[("c", "alpha"), ("a", "beta"), ("b", "gamma")]);
        let got: Vec<_> = kb.retrieve("zzz", 10).iter().map(|s| (s.chunk.chunk_id.as_str(), s.score)).collect();
        assert_eq!(got, vec![("a", 0.0), ("b", 0.0), ("c", 0.0)]);
    }

    #[test]
    fn irrelevant_chunk_keeps_relative_order() {
        let mut kb = kb_of(&[("a", "rate swap"), ("b", "swap"), ("c", "option strike")]);
        let before: Vec<_> = kb.retrieve("swap rate", 3).iter().map(|s| s.chunk.chunk_id.clone()).collect();
        kb.push(kb_of(&[("0", "unrelated words")]).chunks.remove(0)).unwrap();
        let after: Vec<_> = kb
            .retrieve("swap rate", 4)
            .iter()
            .map(|s| s.chunk.chunk_id.clone())
            .filter(|id| id != "0")
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn embedding_retrieval_and_errors() {
        let kb = kb_of(&[("c1", "one"), ("c2", "two"), ("c3", "three")]);
        let embedder = MockEmbedder::new(3)
            .with_vector("one", vec![1.0, 0.0, 0.0])
            .with_vector("two", vec![0.0, 2.0, 0.0])
            .with_vector("three", vec![0.0, 0.0, 1.0]);
        let embedded = embed_corpus(&kb, &embedder, 2).unwrap();
        assert_eq!(embedded.scorer, Scorer::Embedding);
        assert_eq!(embedded.chunks[1].vector.as_deref(), Some(&[0.0, 1.0, 0.0][..]));
        let top = embedded.retrieve_by_vector(&[0.0, 1.0, 0.0], 1).unwrap();
        assert_eq!(top[0].chunk.chunk_id, "c2");
        assert!((top[0].score - 1.0).abs() < 1e-12);
        assert_eq!(embed_corpus(&embedded, &embedder, 1).unwrap(), embedded);

        let bad = MockEmbedder::new(3).with_vector("two", vec![1.0, 0.0]);
        assert!(matches!(embed_corpus(&kb, &bad, 1), Err(Error::DimensionMismatch { expected: 3, found: 2 })));
    }

    #[test]
    fn save_and_load_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("kb.json");
        let kb = embed_corpus(&kb_of(&[("a", "x y"), ("b", "z")]), &MockEmbedder::new(8), 1).unwrap();
        kb.save(&path).unwrap();
        assert_eq!(KnowledgeBase::load(&path).unwrap(), kb);
    }
}
