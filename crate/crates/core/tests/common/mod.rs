//! Independent oracles and fixture helpers shared by integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use casegraph_core::kg::{Entity, EntityKind, KnowledgeGraph, MergeBatch, Provenance, Triple};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn core_fixtures() -> PathBuf {
    let here = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    if here.join("fixtures/kg").exists() {
        here.join("fixtures")
    } else {
        here.join("../core/fixtures")
    }
}

pub fn fixture_graph() -> KnowledgeGraph {
    let dir = core_fixtures().join("kg");
    KnowledgeGraph::load_files(&dir.join("nodes.jsonl"), &dir.join("edges.jsonl")).unwrap()
}

/// A random graph plus its edge list over node indices `0..n`.
pub struct RandomGraph {
    pub graph: KnowledgeGraph,
    pub n: usize,
    pub edges: Vec<(usize, usize)>,
    pub diseases: Vec<usize>,
    pub symptoms: Vec<usize>,
}

pub fn id(i: usize) -> String {
    format!("n{i:02}")
}

pub fn random_graph(seed: u64, max_nodes: usize) -> RandomGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=max_nodes);
    let m = rng.random_range(0..=n * 2);
    let kinds: Vec<EntityKind> = (0..n)
        .map(|i| match i % 4 {
            0 => EntityKind::Disease,
            3 => EntityKind::Drug,
            _ => EntityKind::Symptom,
        })
        .collect();
    let mut edges = Vec::new();
    for _ in 0..m {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a != b {
            edges.push((a, b));
        }
    }
    let mut graph = KnowledgeGraph::new();
    graph
        .merge_triples(&MergeBatch {
            entities: (0..n)
                .map(|i| Entity::new(id(i), format!("entity {i}"), kinds[i]))
                .collect(),
            triples: edges
                .iter()
                .map(|&(a, b)| Triple::new(id(a), "rel", id(b), Provenance::seed()))
                .collect(),
        })
        .unwrap();
    RandomGraph {
        graph,
        n,
        diseases: (0..n)
            .filter(|i| kinds[*i] == EntityKind::Disease)
            .collect(),
        symptoms: (0..n)
            .filter(|i| kinds[*i] == EntityKind::Symptom)
            .collect(),
        edges,
    }
}

/// All-pairs undirected hop counts (Floyd–Warshall); `None` = unreachable.
pub fn all_pairs(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<Option<usize>>> {
    let mut d = vec![vec![None; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = Some(0);
    }
    for &(a, b) in edges {
        d[a][b] = Some(1);
        d[b][a] = Some(1);
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if let (Some(x), Some(y)) = (d[i][k], d[k][j]) {
                    if d[i][j].is_none_or(|c| x + y < c) {
                        d[i][j] = Some(x + y);
                    }
                }
            }
        }
    }
    d
}

/// Σ 1/dist over linked symptoms, zero for unreachable ones.
pub fn oracle_score(d: &[Vec<Option<usize>>], disease: usize, linked: &[usize]) -> f64 {
    linked
        .iter()
        .map(|&s| match d[disease][s] {
            Some(0) | None => 0.0,
            Some(k) => 1.0 / k as f64,
        })
        .sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Highest cosine, ties to the smallest id; matched only at or above `eps`.
pub fn brute_link(query: &[f64], items: &[(String, Vec<f64>)], eps: f64) -> (Option<String>, f64) {
    let mut best: Option<(&str, f64)> = None;
    for (id, v) in items {
        let s = cosine(query, v);
        let better = match best {
            None => true,
            Some((bid, bs)) => s > bs || (s == bs && id.as_str() < bid),
        };
        if better {
            best = Some((id, s));
        }
    }
    match best {
        None => (None, -1.0),
        Some((id, s)) => ((s >= eps).then(|| id.to_string()), s),
    }
}
