mod common;

use std::sync::Arc;

use casegraph_core::diagnosis::{
    kg_candidates_top, kg_score, rank_and_select, CandidateDiagnosis, CandidateSource,
};
use casegraph_core::evidence::build_bundle;
use casegraph_core::evolution::{
    apply_expert_edit, approve_and_merge, draft_subgraph, reject, EditAction, EditPayload,
    EvolutionConfig, EvolutionEvent, Trigger,
};
use casegraph_core::gateway::{Gateway, ScriptEntry, TemplateId};
use casegraph_core::kg::{
    Entity, EntityKind, KnowledgeGraph, MergeBatch, Provenance, Triple, TripleKey,
};
use casegraph_core::layout::{
    angle_about, focus_layout, global_layout, Canvas, Category, COMMON_RADIUS, DEFINITION_SECTOR,
    DRUG_SECTOR, PATIENT_SECTOR, POLYGON_RADIUS, SYMPTOM_SECTOR,
};
use casegraph_core::linker::{
    link, EmbeddingProvider, LinkerConfig, MockEmbedder, SimilarityIndex,
};
use chrono::{TimeZone, Utc};
use common::*;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(120))]

    #[test]
    fn distances_and_paths_match_floyd_warshall(seed in any::<u64>()) {
        let rg = random_graph(seed, 50);
        let d = all_pairs(rg.n, &rg.edges);
        for (a, row) in d.iter().enumerate() {
            for (b, &want) in row.iter().enumerate() {
                let got = rg.graph.shortest_path_distance(&id(a), &id(b)).unwrap();
                prop_assert_eq!(got, want);
                let path = rg.graph.shortest_path(&id(a), &id(b)).unwrap();
                match (path, want) {
                    (None, None) => {}
                    (Some(p), Some(k)) => {
                        prop_assert_eq!(p.len(), k + 1);
                        prop_assert_eq!(p.first(), Some(&id(a)));
                        prop_assert_eq!(p.last(), Some(&id(b)));
                        for w in p.windows(2) {
                            prop_assert!(rg.graph.neighbor_ids(&w[0]).contains(w[1].as_str()));
                        }
                    }
                    (p, k) => prop_assert!(false, "path {:?} vs distance {:?}", p, k),
                }
            }
        }
    }

    #[test]
    fn kg_score_matches_reciprocal_oracle(seed in any::<u64>(), pick in proptest::collection::vec(any::<prop::sample::Index>(), 0..=8)) {
        let rg = random_graph(seed, 50);
        prop_assume!(!rg.symptoms.is_empty());
        let mut linked: Vec<usize> = pick.iter().map(|i| rg.symptoms[i.index(rg.symptoms.len())]).collect();
        linked.sort();
        linked.dedup();
        let ids: Vec<String> = linked.iter().map(|&i| id(i)).collect();
        let d = all_pairs(rg.n, &rg.edges);
        for &dz in &rg.diseases {
            let got: f64 = kg_score(&rg.graph, &id(dz), &ids).unwrap();
            prop_assert!((got - oracle_score(&d, dz, &linked)).abs() < 1e-9);
        }
        for c in kg_candidates_top::<f64>(&rg.graph, &ids, usize::MAX).unwrap() {
            let i: usize = c.disease_id[1..].parse().unwrap();
            prop_assert!((c.kg_score - oracle_score(&d, i, &linked)).abs() < 1e-9);
        }
    }

    #[test]
    fn merge_is_idempotent_and_adjacency_consistent(seed in any::<u64>(), extra in proptest::collection::vec((0usize..40, 0usize..40), 0..30)) {
        let rg = random_graph(seed, 40);
        let mut g = rg.graph.clone();
        let batch = MergeBatch {
            entities: vec![],
            triples: extra
                .iter()
                .filter(|(a, b)| *a < rg.n && *b < rg.n && a != b)
                .map(|&(a, b)| Triple::new(id(a), "extra", id(b), Provenance::seed()))
                .collect(),
        };
        let first = g.merge_triples(&batch).unwrap();
        let after_once = g.clone();
        let second = g.merge_triples(&batch).unwrap();
        prop_assert!(second.added.is_empty());
        prop_assert_eq!(second.skipped.len(), batch.triples.len());
        prop_assert_eq!(&g, &after_once);
        prop_assert!(g.adjacency_consistent());
        prop_assert_eq!(g.triple_count(), rg.graph.triple_count() + first.added.len());
    }

    #[test]
    fn raising_the_threshold_never_adds_a_match(q in "[a-e]{1,3}( [a-e]{1,3}){0,2}", lo in 0.0f64..1.0, hi in 0.0f64..1.0) {
        let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
        let provider: Arc<dyn EmbeddingProvider> = Arc::new(MockEmbedder::default());
        let names = ["ab cd", "a b", "cde", "ea bc d", "b", "dd ee"];
        let items = names.iter().map(|n| (n.replace(' ', "-"), provider.embed_batch(&[n]).unwrap().remove(0))).collect();
        let index = SimilarityIndex::<f64>::from_items(provider, items).unwrap();
        let low = link(&q, &index, &LinkerConfig::new(lo).unwrap()).unwrap();
        let high = link(&q, &index, &LinkerConfig::new(hi).unwrap()).unwrap();
        prop_assert_eq!(low.similarity, high.similarity);
        if high.matched.is_some() {
            prop_assert_eq!(low.matched, high.matched);
        }
    }

    #[test]
    fn ranking_ignores_candidate_order(perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(), scores in proptest::collection::vec(0u8..=10, 6)) {
        let names = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta"];
        let cands: Vec<CandidateDiagnosis> = names
            .iter()
            .enumerate()
            .map(|(i, n)| CandidateDiagnosis {
                disease_id: n.to_string(),
                name: n.to_string(),
                source: CandidateSource::Kg,
                kg_score: (i % 3) as f64,
                distances: Default::default(),
                llm_likelihood: None,
                relative_likelihood: None,
                severity: 0,
            })
            .collect();
        let reply: String = names.iter().zip(&scores).map(|(n, s)| format!("{n}: {s}\n")).collect();
        let run = |cs: &[CandidateDiagnosis]| {
            let gw = Gateway::scripted([ScriptEntry::new(TemplateId::Rank, reply.clone())]);
            rank_and_select("h", "k", cs, &gw, 3).unwrap()
        };
        let shuffled: Vec<_> = perm.iter().map(|&i| cands[i].clone()).collect();
        let a = run(&cands);
        prop_assert_eq!(a.len(), 3);
        prop_assert_eq!(&a, &run(&shuffled));
        for c in &a {
            let r = c.relative_likelihood.unwrap();
            prop_assert!((0.0..=100.0).contains(&r));
        }
    }
}

#[test]
fn linker_matches_brute_force_over_a_thousand_entities() {
    let provider: Arc<dyn EmbeddingProvider> = Arc::new(MockEmbedder::default());
    let vocab = [
        "pain",
        "ache",
        "eye",
        "head",
        "red",
        "blurred",
        "vision",
        "nausea",
        "fever",
        "cough",
        "light",
        "sensitivity",
        "chest",
        "skin",
        "rash",
        "dry",
        "fatigue",
        "cold",
        "weight",
        "gain",
        "loss",
        "neck",
        "stiff",
        "swelling",
    ];
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(7);
    use rand::Rng;
    let phrase = |rng: &mut rand_chacha::ChaCha8Rng| {
        let k = rng.random_range(1..=3);
        (0..k)
            .map(|_| vocab[rng.random_range(0..vocab.len())])
            .collect::<Vec<_>>()
            .join(" ")
    };
    let items: Vec<(String, Vec<f64>)> = (0..1000)
        .map(|i| {
            let p = phrase(&mut rng);
            (
                format!("e{i:04}"),
                provider.embed_batch(&[&p]).unwrap().remove(0),
            )
        })
        .collect();
    let index = SimilarityIndex::<f64>::from_items(provider.clone(), items.clone()).unwrap();
    let cfg = LinkerConfig::default();
    for _ in 0..200 {
        let q = phrase(&mut rng);
        let got = link(&q, &index, &cfg).unwrap();
        let qv = provider.embed_batch(&[&q]).unwrap().remove(0);
        let (want, sim) = brute_link(&qv, &items, cfg.epsilon_s);
        assert!((got.similarity - sim).abs() < 1e-12, "{q}");
        if (sim - cfg.epsilon_s).abs() > 1e-12 {
            assert_eq!(got.matched, want, "{q}");
        }
    }
}

fn evolution_graph() -> KnowledgeGraph {
    let mut g = KnowledgeGraph::new();
    g.merge_triples(&MergeBatch {
        entities: vec![
            Entity::new("headache", "headache", EntityKind::Symptom),
            Entity::new("migraine", "migraine", EntityKind::Disease),
        ],
        triples: vec![Triple::new(
            "migraine",
            "has_symptom",
            "headache",
            Provenance::seed(),
        )],
    })
    .unwrap();
    g
}

const DRAFT: &str = "Definition: recurrent one-sided headache.\nCore symptoms:\n- headache\nRed-flag symptoms:\n- none\nTypical course: weeks\nFirst-line treatments:\n- oxygen\nSecond-line treatments:\n- verapamil";
const EXTRACT: &str =
    "cluster headache|has_symptom|headache\noxygen|first_line_treats|cluster headache";

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn event_status_never_moves_backwards(ops in proptest::collection::vec(0u8..5, 1..8)) {
        let provider: Arc<dyn EmbeddingProvider> = Arc::new(MockEmbedder::default());
        let now = Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).unwrap();
        let mut g = evolution_graph();
        let mut ev = EvolutionEvent::new(1, "cluster headache", None, Trigger::Absent, now);
        let cfg = EvolutionConfig::default();
        for op in ops {
            let before = ev.status;
            let next = match op {
                0 => {
                    let gw = Gateway::scripted([
                        ScriptEntry::new(TemplateId::DraftDisease, DRAFT),
                        ScriptEntry::new(TemplateId::ExtractTriples, EXTRACT),
                    ]);
                    draft_subgraph(&ev, &g, &gw, now).ok()
                }
                1 => apply_expert_edit(
                    &ev,
                    EditAction::new(EditPayload::RebalanceNote { note: "checked".into() }, "expert", now),
                    &g,
                )
                .ok(),
                2 => apply_expert_edit(
                    &ev,
                    EditAction::new(
                        EditPayload::DeleteTriple { triple: TripleKey::new("oxygen", "first_line_treats", "cluster-headache") },
                        "expert",
                        now,
                    ),
                    &g,
                )
                .ok(),
                3 => approve_and_merge(&ev, &mut g, &provider, &cfg, "expert", now).ok().map(|(e, _)| e),
                _ => reject(&ev, "expert", "not needed", now).ok(),
            };
            if let Some(e) = next {
                prop_assert!(e.status >= before, "{:?} -> {:?}", before, e.status);
                prop_assert!(e.version > ev.version);
                ev = e;
            }
            if before.is_terminal() {
                prop_assert_eq!(ev.status, before);
            }
        }
    }
}

fn layout_graph(k: usize, shared: usize) -> (KnowledgeGraph, Vec<String>) {
    let mut entities = Vec::new();
    let mut triples = Vec::new();
    let mut diseases = Vec::new();
    for s in 0..shared {
        entities.push(Entity::new(
            format!("common{s}"),
            format!("common {s}"),
            EntityKind::Symptom,
        ));
    }
    for d in 0..k {
        let did = format!("d{d}");
        entities.push(
            Entity::new(&did, format!("disease {d}"), EntityKind::Disease).with_severity(d as u8),
        );
        for s in 0..shared {
            triples.push(Triple::new(
                &did,
                "has_symptom",
                format!("common{s}"),
                Provenance::seed(),
            ));
        }
        for j in 0..=d {
            let sid = format!("own{d}-{j}");
            entities.push(Entity::new(&sid, &sid, EntityKind::Symptom));
            triples.push(Triple::new(&did, "has_symptom", &sid, Provenance::seed()));
        }
        let drug = format!("drug{d}");
        entities.push(Entity::new(&drug, &drug, EntityKind::Drug));
        triples.push(Triple::new(&drug, "treats", &did, Provenance::seed()));
        let def = format!("{did}-definition");
        entities.push(Entity::new(&def, &def, EntityKind::Definition).with_definition("text"));
        triples.push(Triple::new(
            &did,
            "has_definition",
            &def,
            Provenance::seed(),
        ));
        diseases.push(did);
    }
    entities.push(Entity::new(
        "patient",
        "patient symptom",
        EntityKind::Symptom,
    ));
    triples.push(Triple::new("own0-0", "rel", "patient", Provenance::seed()));
    let mut g = KnowledgeGraph::new();
    g.merge_triples(&MergeBatch { entities, triples }).unwrap();
    (g, diseases)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn layout_invariants(k in 1usize..=6, shared in 0usize..4, w in 200.0f64..2000.0, h in 200.0f64..2000.0, pick in any::<prop::sample::Index>()) {
        let (g, diseases) = layout_graph(k, shared);
        let bundles: Vec<_> = diseases
            .iter()
            .map(|d| build_bundle(&g, d, &["patient".to_string()]).unwrap())
            .collect();
        let canvas = Canvas::new(w, h);
        let (cx, cy) = canvas.center();
        let m = w.min(h);
        let gl = global_layout(&g, &bundles, 3, canvas, None).unwrap();
        let n = k.min(3);
        prop_assert_eq!(gl.diagnoses.len(), n);
        let pts: Vec<(f64, f64)> = gl.diagnoses.iter().map(|d| { let x = gl.node(d).unwrap(); (x.x, x.y) }).collect();
        if n >= 2 {
            for p in &pts {
                prop_assert!((((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt() - POLYGON_RADIUS * m).abs() < 1e-6);
            }
            let side = |i: usize, j: usize| ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt();
            for i in 0..n {
                prop_assert!((side(i, (i + 1) % n) - side(0, 1 % n)).abs() < 1e-6);
            }
        }
        for node in &gl.nodes {
            prop_assert_eq!(node.color_key, node.category.color());
            if node.category == Category::CommonSymptom {
                prop_assert!(((node.x - cx).powi(2) + (node.y - cy).powi(2)).sqrt() <= COMMON_RADIUS * m + 1e-9);
            }
        }
        if n >= 2 {
            for s in 0..shared {
                prop_assert_eq!(gl.node(&format!("common{s}")).unwrap().category, Category::CommonSymptom);
            }
        }

        let selected = &gl.diagnoses[pick.index(n)];
        let f = focus_layout(&g, selected, &gl, &bundles).unwrap();
        let sel = f.node(selected).unwrap();
        prop_assert!((sel.x - cx).abs() < 1e-9 && (sel.y - cy).abs() < 1e-9);
        let b = bundles.iter().find(|b| &b.disease_id == selected).unwrap();
        let related: std::collections::BTreeSet<String> = g.neighbor_ids(selected).into_iter().map(String::from)
            .chain(b.paths.keys().cloned())
            .collect();
        for node in &f.nodes {
            if &node.id == selected || related.contains(&node.id) {
                prop_assert!(!node.faded);
            } else {
                let before = gl.node(&node.id).unwrap();
                prop_assert!(node.faded);
                prop_assert_eq!((node.x, node.y), (before.x, before.y));
            }
        }
        let mut sectors: Vec<((f64, f64), Vec<f64>)> = vec![
            (SYMPTOM_SECTOR, vec![]), (DRUG_SECTOR, vec![]), (DEFINITION_SECTOR, vec![]), (PATIENT_SECTOR, vec![]),
        ];
        for node in f.nodes.iter().filter(|n| !n.faded && &n.id != selected) {
            let a = angle_about(&f.canvas, node.x, node.y);
            let slot = if b.paths.contains_key(&node.id) { 3 } else {
                match g.entity(&node.id).unwrap().kind {
                    EntityKind::Drug => 1,
                    EntityKind::Definition => 2,
                    _ => 0,
                }
            };
            let (lo, hi) = sectors[slot].0;
            prop_assert!(a >= lo - 1e-9 && a < hi + 1e-9, "{} at {} outside {:?}", node.id, a, (lo, hi));
            sectors[slot].1.push(a);
        }
        for ((lo, hi), mut angles) in sectors {
            angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let gap = (hi - lo) / (angles.len() + 1) as f64;
            for w in angles.windows(2) {
                prop_assert!(w[1] - w[0] >= gap - 1e-9);
            }
        }
    }
}
