//! One PASS/FAIL line per headline criterion. Exits non-zero if any fail.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use casegraph_core::config::AppConfig;
use casegraph_core::diagnosis::{
    kg_candidates_top, kg_score, rank_and_select, CandidateDiagnosis, CandidateSource,
    DiagnosisConfig, DEFAULT_TOP_K,
};
use casegraph_core::evidence::{build_bundle, categorize_evidence, EvidenceBundle, FinalizeFields};
use casegraph_core::evolution::{
    check_redundancy, detect_triggers, EvolutionConfig, Trigger, Worklist,
};
use casegraph_core::gateway::{Gateway, ScriptEntry, TemplateId};
use casegraph_core::history::{HistoryTemplate, Stage};
use casegraph_core::kg::{
    export_graph, Entity, EntityKind, GraphStore, KnowledgeGraph, MergeBatch, Provenance, Triple,
};
use casegraph_core::layout::{
    angle_about, focus_layout, global_layout, Canvas, Category, COMMON_RADIUS, DEFINITION_SECTOR,
    DRUG_SECTOR, PATIENT_SECTOR, SYMPTOM_SECTOR,
};
use casegraph_core::linker::{
    link, EmbeddingProvider, LinkerConfig, MockEmbedder, SimilarityIndex,
};
use casegraph_core::scenario::{eval_dir, pack_paths, run_scenario, ScenarioPack, ScenarioRun};
use casegraph_service::{Principal, Role, Service, ServiceConfig, SessionStatus, TokenGrant};
use chrono::{Duration, TimeZone, Utc};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn packs() -> Vec<ScenarioPack> {
    pack_paths(&core_fixtures().join("packs"))
        .unwrap()
        .iter()
        .map(|p| ScenarioPack::load(p).unwrap())
        .collect()
}

fn runs() -> Vec<(ScenarioPack, ScenarioRun)> {
    packs()
        .into_iter()
        .map(|p| {
            let r = run_scenario(&p, &AppConfig::default()).unwrap();
            (p, r)
        })
        .collect()
}

fn kg_score_oracle() -> Outcome {
    let started = Instant::now();
    let mut graphs = 0;
    let mut checked = 0;
    for seed in 0..150u64 {
        let rg = random_graph(seed, 50);
        if rg.symptoms.is_empty() || rg.diseases.is_empty() {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa11ce);
        let k = rng.random_range(0..=8usize.min(rg.symptoms.len()));
        let mut linked: Vec<usize> = (0..k)
            .map(|_| rg.symptoms[rng.random_range(0..rg.symptoms.len())])
            .collect();
        linked.sort();
        linked.dedup();
        let ids: Vec<String> = linked.iter().map(|&i| id(i)).collect();
        let d = all_pairs(rg.n, &rg.edges);
        for &dz in &rg.diseases {
            let got: f64 = kg_score(&rg.graph, &id(dz), &ids).unwrap();
            let want = oracle_score(&d, dz, &linked);
            ensure!(
                (got - want).abs() < 1e-9,
                "seed {seed} {}: {got} vs {want}",
                id(dz)
            );
            if linked.iter().all(|&s| d[dz][s].is_none()) {
                ensure!(got == 0.0, "unreachable contributed {got}");
            }
            checked += 1;
        }
        for c in kg_candidates_top::<f64>(&rg.graph, &ids, usize::MAX).unwrap() {
            let i: usize = c.disease_id[1..].parse().unwrap();
            ensure!(
                (c.kg_score - oracle_score(&d, i, &linked)).abs() < 1e-9,
                "candidate {}",
                c.disease_id
            );
        }
        graphs += 1;
    }
    let secs = started.elapsed().as_secs_f64();
    ensure!(graphs >= 100, "only {graphs} usable graphs");
    ensure!(secs < 10.0, "took {secs:.1}s");
    Ok(format!("{graphs} graphs, {checked} scores, {secs:.2}s"))
}

fn linking_oracle() -> Outcome {
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
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let phrase = |rng: &mut ChaCha8Rng| {
        (0..rng.random_range(1..=3))
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
    let mut matched = 0;
    for _ in 0..200 {
        let q = phrase(&mut rng);
        let got = link(&q, &index, &cfg).unwrap();
        let qv = provider.embed_batch(&[&q]).unwrap().remove(0);
        let (want, sim) = brute_link(&qv, &items, cfg.epsilon_s);
        ensure!(
            (got.similarity - sim).abs() < 1e-12,
            "{q}: similarity {} vs {sim}",
            got.similarity
        );
        if got.matched != want {
            // Only a rounding-level tie may pick a different id.
            let tied = |m: &Option<String>| {
                m.as_ref().is_some_and(|m| {
                    let v = &items.iter().find(|(i, _)| i == m).unwrap().1;
                    (cosine(&qv, v) - sim).abs() < 1e-12
                })
            };
            ensure!(
                tied(&got.matched) && tied(&want),
                "{q}: {:?} vs {want:?}",
                got.matched
            );
        }
        matched += usize::from(want.is_some());
    }
    for _ in 0..50 {
        let q = phrase(&mut rng);
        let (a, b): (f64, f64) = (rng.random(), rng.random());
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let low = link(&q, &index, &LinkerConfig::new(lo).unwrap()).unwrap();
        let high = link(&q, &index, &LinkerConfig::new(hi).unwrap()).unwrap();
        ensure!(low.similarity == high.similarity, "{q}");
        if high.matched.is_some() {
            ensure!(
                low.matched == high.matched,
                "{q}: raising ε changed the match"
            );
        }
        ensure!(
            high.matched.is_some() == (high.similarity >= hi),
            "{q} at {hi}"
        );
    }
    Ok(format!(
        "200 queries exact ({matched} matched), 50 threshold pairs monotone"
    ))
}

fn history_conformance() -> Outcome {
    let default_cap = AppConfig::default().history().max_ddx_questions;
    let allowed = HistoryTemplate::schema_slots();
    let (mut converged, mut capped) = (Vec::new(), Vec::new());
    for (p, run) in runs() {
        ensure!(
            run.stages == [Stage::Main, Stage::Other, Stage::Ddx, Stage::Done],
            "{}: stages {:?}",
            p.id,
            run.stages
        );
        for value in [&run.history.main_template, &run.history.other_template] {
            for (section, slots) in value.as_object().unwrap() {
                for slot in slots.as_object().unwrap().keys() {
                    ensure!(
                        allowed.contains(&(section.clone(), slot.clone())),
                        "{}: {section}.{slot}",
                        p.id
                    );
                }
            }
        }
        let cap = p.max_ddx_questions.unwrap_or(default_cap);
        let d = &run.dialogue;
        let top3: BTreeSet<String> = d
            .ddx
            .iter()
            .take(3)
            .map(|e| e.disease_name.to_lowercase())
            .collect();
        let prev: Option<BTreeSet<String>> = d
            .previous_top3
            .as_ref()
            .map(|s| s.iter().map(|n| n.to_lowercase()).collect());
        if d.ddx_questions_asked < cap && prev.as_ref() == Some(&top3) && top3.len() >= 3 {
            converged.push(p.id.clone());
        } else if d.ddx_questions_asked == cap {
            capped.push(p.id.clone());
        }
    }
    ensure!(!converged.is_empty(), "no pack stopped by convergence");
    ensure!(!capped.is_empty(), "no pack stopped at the question cap");
    Ok(format!("converged: {converged:?}, capped: {capped:?}"))
}

fn top_k_constant() -> Outcome {
    ensure!(DEFAULT_TOP_K == 3, "default k {DEFAULT_TOP_K}");
    ensure!(DiagnosisConfig::default().top_k == 3, "config default");
    ensure!(AppConfig::default().thresholds.k == 3, "threshold default");
    let names = ["a", "b", "c", "d", "e", "f"];
    for n in 1..=names.len() {
        let cands: Vec<CandidateDiagnosis> = names[..n]
            .iter()
            .map(|x| CandidateDiagnosis {
                disease_id: x.to_string(),
                name: x.to_string(),
                source: CandidateSource::Kg,
                kg_score: 1.0,
                distances: Default::default(),
                llm_likelihood: None,
                relative_likelihood: None,
                severity: 0,
            })
            .collect();
        // Out-of-range scores are clamped.
        let reply: String = names[..n]
            .iter()
            .enumerate()
            .map(|(i, x)| format!("{x}: {}\n", i as f64 * 4.0 - 3.0))
            .collect();
        let gw = Gateway::scripted([ScriptEntry::new(TemplateId::Rank, reply)]);
        let out = rank_and_select("h", "k", &cands, &gw, DiagnosisConfig::default().top_k).unwrap();
        ensure!(out.len() == n.min(3), "{n} candidates gave {}", out.len());
        for c in &out {
            let r = c.relative_likelihood.unwrap();
            ensure!((0.0..=100.0).contains(&r), "relative likelihood {r}");
        }
    }
    for (p, run) in runs() {
        ensure!(
            run.record.candidates.len() == run.record.combined.len().min(3),
            "{}",
            p.id
        );
        for c in &run.record.candidates {
            let r = c.relative_likelihood.unwrap();
            ensure!((0.0..=100.0).contains(&r), "{}: {r}", p.id);
        }
    }
    Ok("min(3, n) for n = 1..6 and every pack; likelihoods within [0, 100]".into())
}

fn evolution_loop() -> Outcome {
    let cfg = AppConfig::default();
    let ecfg = cfg.evolution();
    let p = packs()
        .into_iter()
        .find(|p| p.expert.is_some())
        .ok_or("no pack with an expert")?;
    let before = p.load_graph().unwrap();
    let name = "cluster headache".to_string();
    let hits = detect_triggers(&before, std::slice::from_ref(&name), &ecfg, p.started_at);
    ensure!(
        hits.len() == 1 && hits[0].trigger == Trigger::Absent,
        "(a) {hits:?}"
    );

    let run = run_scenario(&p, &cfg).unwrap();
    let within = p.started_at + Duration::days(ecfg.staleness_days - 1);
    for at in [p.started_at, within] {
        let again = detect_triggers(&run.graph, std::slice::from_ref(&name), &ecfg, at);
        ensure!(again.is_empty(), "(b) still triggers at {at}: {again:?}");
    }

    // (c) every existing triple is an exact duplicate; the near duplicates
    // restate existing edges under a new entity spelling.
    let g = before;
    let provider: Arc<dyn EmbeddingProvider> = Arc::new(MockEmbedder::default());
    let exact: Vec<Triple> = g.triples().cloned().collect();
    let staged = vec![
        Entity::new(
            "light-sensitivity-alt",
            "Light Sensitivity",
            EntityKind::Symptom,
        ),
        Entity::new("visual-aura-alt", "aura visual", EntityKind::Symptom),
        Entity::new("fatigue-alt", "FATIGUE", EntityKind::Symptom),
    ];
    let near = vec![
        Triple::new(
            "migraine",
            "has_symptom",
            "light-sensitivity-alt",
            Provenance::seed(),
        ),
        Triple::new(
            "migraine",
            "has_symptom",
            "visual-aura-alt",
            Provenance::seed(),
        ),
        Triple::new(
            "iron-deficiency-anemia",
            "has_symptom",
            "fatigue-alt",
            Provenance::seed(),
        ),
    ];
    let fresh = Triple::new("migraine", "has_symptom", "fever", Provenance::seed());
    let mut draft = exact.clone();
    draft.extend(near.clone());
    draft.push(fresh.clone());
    let (report, survivors) = check_redundancy(&draft, &staged, &g, &provider, &ecfg).unwrap();
    ensure!(
        report.exact_removed == exact.len(),
        "(c) exact {} of {}",
        report.exact_removed,
        exact.len()
    );
    ensure!(
        report.near_removed.len() == near.len(),
        "(c) near {:?}",
        report.near_removed
    );
    ensure!(survivors == vec![fresh], "(c) survivors {survivors:?}");
    ensure!(ecfg.epsilon_t == 0.90, "ε_t {}", ecfg.epsilon_t);

    let mut merged = run.graph.clone();
    let diff = &run.merge_diffs[0];
    let batch = MergeBatch {
        entities: diff.added_entities.clone(),
        triples: diff.added.clone(),
    };
    let second = merged.merge_triples(&batch).unwrap();
    ensure!(
        second.added.is_empty() && second.added_entities.is_empty(),
        "(d) {second:?}"
    );
    ensure!(merged == run.graph, "(d) graph changed");
    Ok(format!(
        "absent trigger, silent after merge, {} exact + {} near removed, re-merge added 0",
        report.exact_removed,
        report.near_removed.len()
    ))
}

fn bundles_for(run: &ScenarioRun) -> Vec<EvidenceBundle> {
    run.record
        .candidates
        .iter()
        .map(|c| {
            let b = build_bundle(&run.graph, &c.disease_id, &run.record.linked_symptoms).unwrap();
            categorize_evidence(&b, &run.record.linked_symptoms)
        })
        .collect()
}

fn layout_geometry() -> Outcome {
    let run = runs().into_iter().map(|(_, r)| r).next().unwrap();
    let g = &run.graph;
    let bundles = bundles_for(&run);
    let canvas = Canvas::new(1000.0, 800.0);
    let (cx, cy) = canvas.center();
    let global = global_layout(g, &bundles, 3, canvas, None).unwrap();
    ensure!(
        global.diagnoses.len() == 3,
        "{} diagnoses",
        global.diagnoses.len()
    );
    let pos = |id: &str| {
        let n = global.node(id).unwrap();
        (n.x, n.y)
    };
    let v: Vec<(f64, f64)> = global.diagnoses.iter().map(|d| pos(d)).collect();
    let dist = |a: (f64, f64), b: (f64, f64)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
    let sides = [dist(v[0], v[1]), dist(v[1], v[2]), dist(v[2], v[0])];
    ensure!(
        (sides[0] - sides[1]).abs() < 1e-6 && (sides[1] - sides[2]).abs() < 1e-6,
        "sides {sides:?}"
    );

    let one_hop = |d: &str| -> BTreeSet<String> {
        g.one_hop_neighbors(d, Some(EntityKind::Symptom))
            .unwrap()
            .into_iter()
            .map(|n| n.entity.id.clone())
            .collect()
    };
    let sets: Vec<BTreeSet<String>> = global.diagnoses.iter().map(|d| one_hop(d)).collect();
    let common: Vec<&String> = sets[0]
        .iter()
        .filter(|s| sets.iter().all(|x| x.contains(*s)))
        .collect();
    ensure!(!common.is_empty(), "fixture has no common symptom");
    let r_common = COMMON_RADIUS * canvas.min_dim();
    for s in &common {
        let n = global.node(s).ok_or(format!("common {s} not placed"))?;
        ensure!(
            n.category == Category::CommonSymptom,
            "{s} is {:?}",
            n.category
        );
        ensure!(
            dist((n.x, n.y), (cx, cy)) <= r_common + 1e-9,
            "{s} outside the cluster"
        );
    }

    let selected = global.diagnoses[1].clone();
    let b = bundles.iter().find(|b| b.disease_id == selected).unwrap();
    let focus = focus_layout(g, &selected, &global, &bundles).unwrap();
    let sel = focus.node(&selected).unwrap();
    ensure!(
        dist((sel.x, sel.y), (cx, cy)) < 1e-9,
        "selected not centered"
    );
    let mut related: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    for s in b.paths.keys() {
        related.insert(s.clone(), PATIENT_SECTOR);
    }
    for n in g.one_hop_neighbors(&selected, None).unwrap() {
        let sector = match n.entity.kind {
            EntityKind::Symptom => SYMPTOM_SECTOR,
            EntityKind::Drug => DRUG_SECTOR,
            EntityKind::Definition => DEFINITION_SECTOR,
            _ => continue,
        };
        related.entry(n.entity.id.clone()).or_insert(sector);
    }
    let mut faded = 0;
    for n in &focus.nodes {
        if n.id == selected {
            continue;
        }
        match related.get(&n.id) {
            Some(&(lo, hi)) => {
                ensure!(!n.faded, "{} related but faded", n.id);
                let a = angle_about(&canvas, n.x, n.y);
                ensure!(a > lo && a < hi, "{} at {a:.1}° outside ({lo}, {hi})", n.id);
            }
            None => {
                ensure!(n.faded, "{} unrelated but not faded", n.id);
                let before = global.node(&n.id).ok_or(format!("{} appeared", n.id))?;
                ensure!(before.x == n.x && before.y == n.y, "{} moved", n.id);
                faded += 1;
            }
        }
    }
    let sectors = [
        SYMPTOM_SECTOR,
        DRUG_SECTOR,
        DEFINITION_SECTOR,
        PATIENT_SECTOR,
    ];
    for (i, a) in sectors.iter().enumerate() {
        for b in &sectors[i + 1..] {
            ensure!(a.1 <= b.0 || b.1 <= a.0, "sectors {a:?} and {b:?} overlap");
        }
    }
    Ok(format!(
        "triangle side {:.3}, {} common symptoms in cluster, {faded} faded nodes unmoved",
        sides[0],
        common.len()
    ))
}

fn end_to_end() -> Outcome {
    let started = Instant::now();
    let a = runs();
    let b = runs();
    let mut top1 = 0;
    for ((p, x), (_, y)) in a.iter().zip(&b) {
        let (sx, sy) = (
            serde_json::to_string(&x.record).unwrap(),
            serde_json::to_string(&y.record).unwrap(),
        );
        ensure!(sx == sy, "{}: records differ", p.id);
        ensure!(
            x.metrics.top3_hit,
            "{}: top3 miss {:?}",
            p.id,
            x.metrics.top
        );
        top1 += usize::from(x.metrics.top1_hit);
    }
    ensure!(a.len() == 3, "{} packs", a.len());
    ensure!(top1 >= 2, "top1 hits {top1}");
    let m = eval_dir(&core_fixtures().join("packs"), &AppConfig::default()).unwrap();
    ensure!(
        m.packs.iter().all(|p| !p.top1_hit || p.top3_hit),
        "top1 without top3"
    );
    let secs = started.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "{secs:.1}s");
    Ok(format!(
        "3 packs byte-identical, top3 3/3, top1 {top1}/3, {secs:.2}s"
    ))
}

// ---- service-backed criteria ----

fn tick_clock() -> casegraph_service::Clock {
    let n = Arc::new(AtomicI64::new(0));
    let start = Utc.with_ymd_and_hms(2025, 3, 1, 9, 0, 0).unwrap();
    Arc::new(move || start + Duration::minutes(n.fetch_add(1, Ordering::SeqCst)))
}

fn service_config(dir: &std::path::Path) -> ServiceConfig {
    let mut c = ServiceConfig::default();
    c.app.storage.data_dir = Some(dir.to_path_buf());
    c.app.storage.seed_nodes = Some(core_fixtures().join("kg/nodes.jsonl"));
    c.app.storage.seed_edges = Some(core_fixtures().join("kg/edges.jsonl"));
    c.server.tokens.insert(
        "t".into(),
        TokenGrant {
            role: Role::Patient,
            actor: "p-001".into(),
        },
    );
    c
}

fn review_script(p: &ScenarioPack) -> Vec<ScriptEntry> {
    let mut s = p.llm_script.clone();
    s.push(ScriptEntry::new(TemplateId::RankEvidence, "S1"));
    s.push(ScriptEntry::new(
        TemplateId::Reason,
        "1. The history fits.\nTreatment:\n1. Rest",
    ));
    s.push(ScriptEntry::new(
        TemplateId::PatientRewrite,
        "Here is what we found and what to do next.",
    ));
    s
}

const PATIENT_FORBIDDEN: [&str; 14] = [
    "preliminary_ddx",
    "ddx",
    "disease_name",
    "disease_id",
    "likelihood",
    "relative_likelihood",
    "kg_score",
    "candidates",
    "kg_top",
    "diagnosis",
    "bars",
    "layout",
    "rationale",
    "reports",
];

fn scan(v: &Value, context: &str) -> Result<(), String> {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                ensure!(
                    !PATIENT_FORBIDDEN.contains(&k.as_str()),
                    "{context}: patient saw {k}"
                );
                scan(x, context)?;
            }
        }
        Value::Array(a) => {
            for x in a {
                scan(x, context)?;
            }
        }
        _ => {}
    }
    Ok(())
}

fn firewall_and_audit() -> Outcome {
    let patient = Principal {
        role: Role::Patient,
        actor: "p-001".into(),
    };
    let doctor = Principal {
        role: Role::Physician,
        actor: "dr-lee".into(),
    };
    let mut scanned = 0;
    for p in packs() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = service_config(dir.path());
        if let Some(m) = p.max_ddx_questions {
            cfg.app.thresholds.max_ddx_questions = m;
        }
        let svc = Service::open(cfg).unwrap().with_clock(tick_clock());
        let created = svc
            .create_session(&patient, Some(review_script(&p)))
            .map_err(|e| e.to_string())?;
        scan(&created, "create")?;
        let id = created["id"].as_str().unwrap().to_string();
        let slot = svc.slot(&id).unwrap();
        let mut s = slot.blocking_lock();
        for u in &p.patient_script {
            let out = svc
                .post_message(&patient, &mut s, u)
                .map_err(|e| format!("{}: {e}", p.id))?;
            for e in &out.events {
                scan(&e.data, &e.event)?;
                scanned += 1;
            }
            if out.run_pipeline {
                svc.run_pipeline(&mut s);
                break;
            }
        }
        for v in [
            svc.patient_summary(&patient, &s.session),
            svc.history_view(&patient, &s.session),
            svc.list_sessions(&patient),
        ] {
            scan(&v.map_err(|e| e.to_string())?, "view")?;
            scanned += 1;
        }
        ensure!(
            svc.diagnosis_view(&patient, &s.session).is_err(),
            "patient read the diagnosis"
        );
        ensure!(
            svc.open_case(&patient, &mut s).is_err(),
            "patient opened the case"
        );

        svc.open_case(&doctor, &mut s).map_err(|e| e.to_string())?;
        let top = s
            .session
            .diagnosis
            .as_ref()
            .ok_or("no diagnosis")?
            .candidates[0]
            .disease_id
            .clone();
        svc.select(&doctor, &mut s, &top)
            .map_err(|e| e.to_string())?;
        let fields = FinalizeFields {
            conclusion: "c".into(),
            plan: "p".into(),
            follow_up: "f".into(),
            precautions: "x".into(),
        };
        svc.finalize(&doctor, &mut s, &top, fields)
            .map_err(|e| e.to_string())?;
        scan(
            &svc.explanation(&patient, &s.session)
                .map_err(|e| e.to_string())?,
            "explanation",
        )?;

        let sess = &s.session;
        ensure!(
            sess.status == SessionStatus::Completed,
            "{}: {:?}",
            p.id,
            sess.status
        );
        let handover = sess
            .audit
            .iter()
            .find(|a| a.action == "handover")
            .ok_or("no handover entry")?;
        let fin = sess
            .audit
            .iter()
            .find(|a| a.action.starts_with("finalized"))
            .ok_or("no finalize entry")?;
        ensure!(handover.actor == fin.actor, "{}: two physicians", p.id);
        ensure!(
            sess.assigned_physician.as_deref() == Some(handover.actor.as_str()),
            "assignment"
        );
        ensure!(sess.handover_at == Some(handover.at), "handover timestamp");
        let f = sess.finalized.as_ref().ok_or("not finalized")?;
        ensure!(
            f.by == handover.actor && f.at == fin.at && f.at > handover.at,
            "finalize attribution"
        );
        let last_patient = sess.messages().iter().map(|m| m.timestamp).max().unwrap();
        ensure!(
            handover.at > last_patient,
            "handover before the history ended"
        );
    }
    Ok(format!(
        "3 sessions completed by one physician each; {scanned} patient payloads clean"
    ))
}

fn persistence() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = packs()
        .into_iter()
        .find(|p| p.id == "migraine-with-aura")
        .unwrap();
    let patient = Principal {
        role: Role::Patient,
        actor: "p-001".into(),
    };
    let (id, snapshot, used) = {
        let svc = Service::open(service_config(dir.path()))
            .unwrap()
            .with_clock(tick_clock());
        let id = svc
            .create_session(&patient, Some(p.llm_script.clone()))
            .unwrap()["id"]
            .as_str()
            .unwrap()
            .to_string();
        let slot = svc.slot(&id).unwrap();
        let mut s = slot.blocking_lock();
        let mut used = 0;
        while s.session.dialogue.state != Stage::Ddx {
            svc.post_message(&patient, &mut s, &p.patient_script[used])
                .map_err(|e| e.to_string())?;
            used += 1;
        }
        (id, serde_json::to_value(&s.session).unwrap(), used)
    };
    let svc = Service::open(service_config(dir.path()))
        .unwrap()
        .with_clock(tick_clock());
    let slot = svc.slot(&id).unwrap();
    let mut s = slot.blocking_lock();
    ensure!(
        serde_json::to_value(&s.session).unwrap() == snapshot,
        "session differs after reload"
    );
    ensure!(s.session.dialogue.state == Stage::Ddx, "not mid-Ddx");
    for u in &p.patient_script[used..] {
        if svc
            .post_message(&patient, &mut s, u)
            .map_err(|e| e.to_string())?
            .run_pipeline
        {
            break;
        }
    }
    let straight = run_scenario(&p, &AppConfig::default()).unwrap();
    ensure!(
        s.session.dialogue.state == Stage::Done,
        "resumed session did not finish"
    );
    ensure!(
        s.session.preliminary_ddx == straight.history.preliminary_ddx,
        "resumed differential differs"
    );
    drop(s);

    // Post-merge graph store.
    let cluster = packs().into_iter().find(|p| p.expert.is_some()).unwrap();
    let kg_dir = dir.path().join("merged-kg");
    let mut store = GraphStore::create(&kg_dir, cluster.load_graph().unwrap()).unwrap();
    let gw = Gateway::scripted(cluster.llm_script.clone());
    let provider: Arc<dyn EmbeddingProvider> = Arc::new(MockEmbedder::default());
    let mut wl = Worklist::new();
    let now = cluster.started_at;
    let ids = wl.detect(
        store.graph(),
        &["cluster headache".into()],
        &EvolutionConfig::default(),
        now,
    );
    wl.draft(ids[0], store.graph(), &gw, now)
        .map_err(|e| e.to_string())?;
    let diff = wl
        .approve(
            ids[0],
            None,
            &mut store,
            &provider,
            &EvolutionConfig::default(),
            "dr-okafor",
            now,
        )
        .map_err(|e| e.to_string())?;
    store.record_usage(&[diff.added[0].key()]).unwrap();
    let live: KnowledgeGraph = store.graph().clone();
    drop(store);
    let reopened = GraphStore::open(&kg_dir).unwrap();
    ensure!(reopened.graph() == &live, "journal replay differs");
    ensure!(
        export_graph(reopened.graph()) == export_graph(&live),
        "export differs"
    );
    let mut compacted = reopened;
    compacted.compact().unwrap();
    drop(compacted);
    let again = GraphStore::open(&kg_dir).unwrap();
    ensure!(again.graph() == &live, "compacted snapshot differs");
    Ok(format!(
        "mid-Ddx session after {used} turns reloads exactly; merged graph ({} triples) round-trips via journal and snapshot",
        live.triple_count()
    ))
}

fn main() {
    let started = Instant::now();
    let criteria: [Criterion; 9] = [
        ("kg_score oracle equivalence", kg_score_oracle),
        ("linking oracle equivalence", linking_oracle),
        ("history-taking conformance", history_conformance),
        ("top-k constant", top_k_constant),
        ("evolution loop", evolution_loop),
        ("layout geometry", layout_geometry),
        ("end-to-end determinism", end_to_end),
        ("role firewall and audit", firewall_and_audit),
        ("persistence round-trips", persistence),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match res {
            Ok(detail) => println!("PASS {} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {} {name}: {why}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.1}s",
        criteria.len() - failed,
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
