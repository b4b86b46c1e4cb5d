//! Entity linking by embedding similarity.
//!
//! A mention is embedded, compared by cosine against every indexed entity,
//! and linked to the argmax when that similarity reaches `epsilon_s`. Search
//! is exact; ties go to the lexicographically smallest entity id.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::kg::{EntityKind, KnowledgeGraph};
use crate::scalar::{convert_vec, dot, normalized, Scalar};
use crate::text::normalize_name;

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("embedding dimension mismatch for {id}: provider has {expected}, found {found}")]
    Dimension {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("embedding provider {provider} failed: {message}")]
    Provider { provider: String, message: String },
    #[error("invalid linker config: {0}")]
    Config(String),
}

pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;
    fn dimension(&self) -> usize;
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, LinkError>;

    fn embed(&self, text: &str) -> Result<Vec<f64>, LinkError> {
        let mut v = self.embed_batch(&[text])?;
        v.pop().ok_or_else(|| LinkError::Provider {
            provider: self.name().to_string(),
            message: "empty batch response".into(),
        })
    }
}

/// Offline embedder: every token of the normalized text is hashed (with a
/// seed) into a pseudo-random vector, the token vectors are summed and the
/// result L2-normalized. Identical strings therefore embed identically and
/// score 1.0; token reorderings also score 1.0; unrelated strings land near 0.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    seed: u64,
    dimension: usize,
}

impl MockEmbedder {
    pub const DEFAULT_DIMENSION: usize = 64;

    pub fn new(seed: u64) -> Self {
        Self::with_dimension(seed, Self::DEFAULT_DIMENSION)
    }

    pub fn with_dimension(seed: u64, dimension: usize) -> Self {
        assert!(dimension > 0);
        Self { seed, dimension }
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(token.as_bytes());
        let seed: [u8; 32] = hasher.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        (0..self.dimension)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect()
    }

    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        let norm = normalize_name(text);
        let mut acc = vec![0.0; self.dimension];
        for token in norm
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            for (a, x) in acc.iter_mut().zip(self.token_vector(token)) {
                *a += x;
            }
        }
        normalized(&acc)
    }
}

impl Default for MockEmbedder {
    fn default() -> Self {
        Self::new(0x5eed)
    }
}

impl EmbeddingProvider for MockEmbedder {
    fn name(&self) -> &str {
        "mock"
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, LinkError> {
        Ok(texts.iter().map(|t| self.embed_text(t)).collect())
    }
}

/// POSTs `{"texts":[…]}` and expects `{"vectors":[[…]]}`.
pub struct HttpEmbedder {
    endpoint: String,
    dimension: usize,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

impl HttpEmbedder {
    pub fn new(
        endpoint: impl Into<String>,
        dimension: usize,
        timeout: Duration,
    ) -> Result<Self, LinkError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| LinkError::Provider {
                provider: "http".into(),
                message: e.to_string(),
            })?;
        Ok(Self {
            endpoint: endpoint.into(),
            dimension,
            client,
        })
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn name(&self) -> &str {
        "http"
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, LinkError> {
        let fail = |message: String| LinkError::Provider {
            provider: "http".into(),
            message,
        };
        let resp: EmbedResponse = self
            .client
            .post(&self.endpoint)
            .json(&EmbedRequest { texts })
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| fail(e.to_string()))?
            .json()
            .map_err(|e| fail(e.to_string()))?;
        if resp.vectors.len() != texts.len() {
            return Err(fail(format!(
                "expected {} vectors, got {}",
                texts.len(),
                resp.vectors.len()
            )));
        }
        for (t, v) in texts.iter().zip(&resp.vectors) {
            if v.len() != self.dimension {
                return Err(LinkError::Dimension {
                    id: (*t).to_string(),
                    expected: self.dimension,
                    found: v.len(),
                });
            }
        }
        Ok(resp.vectors)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkerConfig {
    pub epsilon_s: f64,
}

impl LinkerConfig {
    pub const DEFAULT_EPSILON_S: f64 = 0.80;

    pub fn new(epsilon_s: f64) -> Result<Self, LinkError> {
        let c = Self { epsilon_s };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), LinkError> {
        if !(0.0..=1.0).contains(&self.epsilon_s) {
            return Err(LinkError::Config(format!(
                "epsilon_s must lie in [0, 1], got {}",
                self.epsilon_s
            )));
        }
        Ok(())
    }
}

impl Default for LinkerConfig {
    fn default() -> Self {
        Self {
            epsilon_s: Self::DEFAULT_EPSILON_S,
        }
    }
}

/// Exact cosine index over a fixed set of ids. Immutable once built.
pub struct SimilarityIndex<S: Scalar> {
    provider: Arc<dyn EmbeddingProvider>,
    ids: Vec<String>,
    vectors: Vec<Vec<S>>,
    position: HashMap<String, usize>,
}

impl<S: Scalar> std::fmt::Debug for SimilarityIndex<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimilarityIndex")
            .field("provider", &self.provider.name())
            .field("len", &self.ids.len())
            .finish()
    }
}

impl<S: Scalar> SimilarityIndex<S> {
    /// Indexes graph entities (optionally of one kind). Stored embeddings are
    /// used when present and must match the provider's dimension; otherwise
    /// the entity name is embedded.
    pub fn build(
        graph: &KnowledgeGraph,
        provider: Arc<dyn EmbeddingProvider>,
        kind_filter: Option<EntityKind>,
    ) -> Result<Self, LinkError> {
        let selected: Vec<_> = graph
            .entities()
            .filter(|e| kind_filter.is_none_or(|k| e.kind == k))
            .collect();
        let missing: Vec<&str> = selected
            .iter()
            .filter(|e| e.embedding.is_none())
            .map(|e| e.name.as_str())
            .collect();
        let mut fresh = if missing.is_empty() {
            Vec::new()
        } else {
            provider.embed_batch(&missing)?
        }
        .into_iter();
        let mut items = Vec::with_capacity(selected.len());
        for e in selected {
            let v = match &e.embedding {
                Some(v) => v.clone(),
                None => fresh.next().expect("one vector per missing embedding"),
            };
            items.push((e.id.clone(), v));
        }
        Self::from_items(provider, items)
    }

    /// Indexes arbitrary `(id, embedding)` pairs.
    pub fn from_items(
        provider: Arc<dyn EmbeddingProvider>,
        mut items: Vec<(String, Vec<f64>)>,
    ) -> Result<Self, LinkError> {
        let dim = provider.dimension();
        items.sort_by(|a, b| a.0.cmp(&b.0));
        items.dedup_by(|a, b| a.0 == b.0);
        let mut ids = Vec::with_capacity(items.len());
        let mut vectors = Vec::with_capacity(items.len());
        for (id, v) in items {
            if v.len() != dim {
                return Err(LinkError::Dimension {
                    id,
                    expected: dim,
                    found: v.len(),
                });
            }
            vectors.push(normalized(&convert_vec::<S>(&v)));
            ids.push(id);
        }
        let position = ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        Ok(Self {
            provider,
            ids,
            vectors,
            position,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn provider(&self) -> &Arc<dyn EmbeddingProvider> {
        &self.provider
    }

    pub fn vector(&self, id: &str) -> Option<&[S]> {
        self.position.get(id).map(|&i| self.vectors[i].as_slice())
    }

    pub fn embed_query(&self, text: &str) -> Result<Vec<S>, LinkError> {
        let v = self.provider.embed(text)?;
        if v.len() != self.provider.dimension() {
            return Err(LinkError::Dimension {
                id: text.to_string(),
                expected: self.provider.dimension(),
                found: v.len(),
            });
        }
        Ok(normalized(&convert_vec(&v)))
    }

    /// Argmax cosine over all entries; `query` must be unit length.
    pub fn nearest(&self, query: &[S]) -> Option<(&str, S)> {
        let mut best: Option<(usize, S)> = None;
        for (i, v) in self.vectors.iter().enumerate() {
            let s = dot(query, v);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        best.map(|(i, s)| (self.ids[i].as_str(), s))
    }

    /// Cosine between two indexed entries.
    pub fn similarity_between(&self, a: &str, b: &str) -> Option<S> {
        Some(dot(self.vector(a)?, self.vector(b)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct LinkResult<S: Scalar> {
    pub mention: String,
    pub matched: Option<String>,
    pub similarity: S,
}

/// Per-mention results plus the deduplicated matched set in first-seen order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct LinkOutcome<S: Scalar> {
    pub results: Vec<LinkResult<S>>,
    pub matched: Vec<String>,
}

pub fn link<S: Scalar>(
    mention: &str,
    index: &SimilarityIndex<S>,
    config: &LinkerConfig,
) -> Result<LinkResult<S>, LinkError> {
    if index.is_empty() {
        return Ok(LinkResult {
            mention: mention.to_string(),
            matched: None,
            similarity: -S::one(),
        });
    }
    let q = index.embed_query(mention)?;
    let (id, sim) = index.nearest(&q).expect("non-empty index");
    Ok(LinkResult {
        mention: mention.to_string(),
        matched: (sim >= S::lit(config.epsilon_s)).then(|| id.to_string()),
        similarity: sim,
    })
}

pub fn link_all<S: Scalar>(
    mentions: &[String],
    index: &SimilarityIndex<S>,
    config: &LinkerConfig,
) -> Result<LinkOutcome<S>, LinkError> {
    let results = mentions
        .iter()
        .map(|m| link(m, index, config))
        .collect::<Result<Vec<_>, _>>()?;
    let mut seen = BTreeSet::new();
    let matched = results
        .iter()
        .filter_map(|r| r.matched.clone())
        .filter(|id| seen.insert(id.clone()))
        .collect();
    Ok(LinkOutcome { results, matched })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{Entity, MergeBatch};

    /// Provider whose vectors come from a fixed table.
    struct TableEmbedder(HashMap<String, Vec<f64>>);

    impl EmbeddingProvider for TableEmbedder {
        fn name(&self) -> &str {
            "table"
        }
        fn dimension(&self) -> usize {
            3
        }
        fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, LinkError> {
            Ok(texts
                .iter()
                .map(|t| self.0.get(*t).cloned().unwrap_or(vec![0.0, 0.0, 1.0]))
                .collect())
        }
    }

    fn graph_of(names: &[(&str, &str)]) -> KnowledgeGraph {
        let mut g = KnowledgeGraph::new();
        g.merge_triples(&MergeBatch {
            entities: names
                .iter()
                .map(|(id, n)| Entity::new(*id, *n, EntityKind::Symptom))
                .collect(),
            triples: vec![],
        })
        .unwrap();
        g
    }

    #[test]
    fn mock_is_deterministic_and_unit() {
        let m = MockEmbedder::default();
        let a = m.embed_text("Blurred vision");
        assert_eq!(a, m.embed_text("blurred  vision"));
        assert_eq!(a, MockEmbedder::default().embed_text("blurred vision"));
        let n: f64 = a.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
        assert_eq!(a.len(), 64);
        assert_ne!(a, MockEmbedder::new(1).embed_text("blurred vision"));
    }

    #[test]
    fn empty_index_returns_no_match() {
        let g = KnowledgeGraph::new();
        let idx: SimilarityIndex<f64> =
            SimilarityIndex::build(&g, Arc::new(MockEmbedder::default()), None).unwrap();
        let r = link("headache", &idx, &LinkerConfig::default()).unwrap();
        assert_eq!(r.matched, None);
        assert_eq!(r.similarity, -1.0);
    }

    #[test]
    fn single_entity_is_always_argmax() {
        let g = graph_of(&[("s1", "headache")]);
        let idx: SimilarityIndex<f32> =
            SimilarityIndex::build(&g, Arc::new(MockEmbedder::default()), None).unwrap();
        for q in ["headache", "fever", "x y z"] {
            let cfg = LinkerConfig::new(0.0).unwrap();
            let r = link(q, &idx, &cfg).unwrap();
            if r.similarity >= 0.0 {
                assert_eq!(r.matched.as_deref(), Some("s1"));
            }
            let qv = idx.embed_query(q).unwrap();
            assert_eq!(idx.nearest(&qv).unwrap().0, "s1");
        }
    }

    #[test]
    fn exact_name_scores_one() {
        let g = graph_of(&[
            ("s1", "headache"),
            ("s2", "blurred vision"),
            ("s3", "fatigue"),
        ]);
        let idx: SimilarityIndex<f64> =
            SimilarityIndex::build(&g, Arc::new(MockEmbedder::default()), None).unwrap();
        let r = link("Blurred Vision", &idx, &LinkerConfig::default()).unwrap();
        assert_eq!(r.matched.as_deref(), Some("s2"));
        assert!((r.similarity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_three_entity_fixture() {
        // Query q = (0.83, sqrt(1-0.83^2), 0); X=(1,0,0), Y=(0,0,1), Z=(0,1,0).
        // cos(q,X)=0.83, cos(q,Z)=0.5578..., cos(q,Y)=0.
        let qy = (1.0f64 - 0.83 * 0.83).sqrt();
        let table = TableEmbedder(HashMap::from([
            ("x".to_string(), vec![1.0, 0.0, 0.0]),
            ("y".to_string(), vec![0.0, 0.0, 1.0]),
            ("z".to_string(), vec![0.0, 1.0, 0.0]),
            ("query".to_string(), vec![0.83, qy, 0.0]),
            ("orthogonal".to_string(), vec![0.0, 0.0, 0.0]),
        ]));
        let g = graph_of(&[("X", "x"), ("Y", "y"), ("Z", "z")]);
        let idx: SimilarityIndex<f64> = SimilarityIndex::build(&g, Arc::new(table), None).unwrap();
        let r = link("query", &idx, &LinkerConfig::new(0.8).unwrap()).unwrap();
        assert_eq!(r.matched.as_deref(), Some("X"));
        assert!((r.similarity - 0.83).abs() < 1e-12);
        let r = link("query", &idx, &LinkerConfig::new(0.9).unwrap()).unwrap();
        assert_eq!(r.matched, None);
        let r = link("orthogonal", &idx, &LinkerConfig::new(0.5).unwrap()).unwrap();
        assert_eq!(r.matched, None);
    }

    #[test]
    fn ties_prefer_smallest_id() {
        let table = TableEmbedder(HashMap::from([
            ("a".to_string(), vec![1.0, 0.0, 0.0]),
            ("b".to_string(), vec![2.0, 0.0, 0.0]),
            ("q".to_string(), vec![1.0, 0.0, 0.0]),
        ]));
        let g = graph_of(&[("zz", "a"), ("aa", "b")]);
        let idx: SimilarityIndex<f64> = SimilarityIndex::build(&g, Arc::new(table), None).unwrap();
        assert_eq!(
            link("q", &idx, &LinkerConfig::default())
                .unwrap()
                .matched
                .as_deref(),
            Some("aa")
        );
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let mut g = graph_of(&[("s1", "headache")]);
        g.merge_triples(&MergeBatch {
            entities: vec![Entity {
                embedding: Some(vec![1.0, 0.0]),
                ..Entity::new("s2", "odd", EntityKind::Symptom)
            }],
            triples: vec![],
        })
        .unwrap();
        let err =
            SimilarityIndex::<f64>::build(&g, Arc::new(MockEmbedder::default()), None).unwrap_err();
        assert!(matches!(err, LinkError::Dimension { found: 2, .. }));
    }

    #[test]
    fn link_all_dedups_matched_set() {
        let g = graph_of(&[("s1", "headache"), ("s2", "fatigue")]);
        let idx: SimilarityIndex<f64> =
            SimilarityIndex::build(&g, Arc::new(MockEmbedder::default()), None).unwrap();
        let out = link_all(&[], &idx, &LinkerConfig::default()).unwrap();
        assert!(out.results.is_empty() && out.matched.is_empty());
        let out = link_all(
            &["headache".into(), "Headache".into(), "nothing alike".into()],
            &idx,
            &LinkerConfig::default(),
        )
        .unwrap();
        assert_eq!(out.results.len(), 3);
        assert_eq!(out.matched, vec!["s1".to_string()]);
    }

    #[test]
    fn config_bounds() {
        assert!(LinkerConfig::new(1.2).is_err());
        assert!(LinkerConfig::new(-0.1).is_err());
        assert_eq!(LinkerConfig::default().epsilon_s, 0.8);
    }
}
