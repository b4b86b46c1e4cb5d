//! Deterministic coordinates for the diagnostic graph view.
//!
//! Angles are counter-clockwise from +x with y pointing up; a renderer with a
//! downward y axis flips the sign of `y - center.y`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnosis::CandidateDiagnosis;
use crate::evidence::EvidenceBundle;
use crate::kg::{EntityKind, KgError, KnowledgeGraph};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum LayoutError {
    #[error("k must be at least 1")]
    InvalidK,
    #[error("canvas must have positive finite size")]
    InvalidCanvas,
    #[error("{0} is not one of the current diagnoses")]
    UnknownDiagnosis(String),
    #[error("{0} is not in the layout")]
    UnknownNode(String),
    #[error(transparent)]
    Kg(#[from] KgError),
}

pub type Result<T, E = LayoutError> = std::result::Result<T, E>;

/// Circumradius of the diagnosis polygon, as a fraction of `min(w, h)`.
pub const POLYGON_RADIUS: f64 = 0.35;
/// Radius of the shared-symptom cluster.
pub const COMMON_RADIUS: f64 = 0.1;
const COMMON_RING: f64 = 0.06;
const PATIENT_RING: f64 = 0.2;
const OWNED_RING: f64 = 0.12;
const SINGLE_RING: f64 = 0.3;
const FOCUS_RING: f64 = 0.3;
const EXPAND_RING: f64 = 0.08;

/// Focus-mode sectors in degrees, `[start, end)`.
pub const SYMPTOM_SECTOR: (f64, f64) = (0.0, 144.0);
pub const DRUG_SECTOR: (f64, f64) = (144.0, 216.0);
pub const DEFINITION_SECTOR: (f64, f64) = (216.0, 288.0);
pub const PATIENT_SECTOR: (f64, f64) = (288.0, 360.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Diagnosis,
    CommonSymptom,
    PatientSymptom,
    Definition,
    Drug,
    /// Revealed by expanding a node; not one of the five primary categories.
    Context,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorKey {
    Diagnosis,
    YellowCommon,
    PurplePatient,
    BlueDefinition,
    GreenDrug,
    GrayContext,
}

impl Category {
    pub fn color(self) -> ColorKey {
        match self {
            Category::Diagnosis => ColorKey::Diagnosis,
            Category::CommonSymptom => ColorKey::YellowCommon,
            Category::PatientSymptom => ColorKey::PurplePatient,
            Category::Definition => ColorKey::BlueDefinition,
            Category::Drug => ColorKey::GreenDrug,
            Category::Context => ColorKey::GrayContext,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Canvas<S: Scalar = f64> {
    pub width: S,
    pub height: S,
}

impl<S: Scalar> Canvas<S> {
    pub fn new(width: S, height: S) -> Self {
        Self { width, height }
    }

    pub fn center(&self) -> (S, S) {
        let two = S::lit(2.0);
        (self.width / two, self.height / two)
    }

    pub fn min_dim(&self) -> S {
        self.width.min(self.height)
    }

    fn validate(&self) -> Result<()> {
        if self.width.is_finite()
            && self.height.is_finite()
            && self.width > S::zero()
            && self.height > S::zero()
        {
            Ok(())
        } else {
            Err(LayoutError::InvalidCanvas)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct LayoutNode<S: Scalar = f64> {
    pub id: String,
    pub name: String,
    pub x: S,
    pub y: S,
    pub category: Category,
    pub color_key: ColorKey,
    /// Patient symptoms shown collapsed carry their path length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub collapsed_path_length: Option<usize>,
    #[serde(default)]
    pub patient_reported: bool,
    #[serde(default)]
    pub expanded: bool,
    #[serde(default)]
    pub faded: bool,
    /// Definition bubble open.
    #[serde(default)]
    pub detail_open: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEdge {
    pub from: String,
    pub to: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<String>,
    pub emphasized: bool,
    pub faded: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayoutMode {
    Global,
    Focus { disease_id: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct LayoutResult<S: Scalar = f64> {
    pub mode: LayoutMode,
    pub canvas: Canvas<S>,
    pub diagnoses: Vec<String>,
    pub nodes: Vec<LayoutNode<S>>,
    pub edges: Vec<LayoutEdge>,
}

impl<S: Scalar> LayoutResult<S> {
    pub fn node(&self, id: &str) -> Option<&LayoutNode<S>> {
        self.nodes.iter().find(|n| n.id == id)
    }

    fn node_mut(&mut self, id: &str) -> Option<&mut LayoutNode<S>> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    fn has_edge(&self, a: &str, b: &str) -> bool {
        self.edges
            .iter()
            .any(|e| (e.from == a && e.to == b) || (e.from == b && e.to == a))
    }
}

fn polar<S: Scalar>(origin: (S, S), radius: S, degrees: f64) -> (S, S) {
    let t = S::lit(degrees.to_radians());
    (origin.0 + radius * t.cos(), origin.1 + radius * t.sin())
}

/// Vertex angles of a regular `n`-gon starting at 90°.
pub fn polygon_angles(n: usize) -> Vec<f64> {
    (0..n).map(|i| 90.0 + 360.0 * i as f64 / n as f64).collect()
}

/// Angles of `n` items inside a sector, `span/(n+1)` apart.
pub fn sector_angles(sector: (f64, f64), n: usize) -> Vec<f64> {
    let span = sector.1 - sector.0;
    (0..n)
        .map(|i| sector.0 + span * (i + 1) as f64 / (n + 1) as f64)
        .collect()
}

fn node<S: Scalar>(
    graph: &KnowledgeGraph,
    id: &str,
    category: Category,
    (x, y): (S, S),
) -> LayoutNode<S> {
    LayoutNode {
        id: id.to_string(),
        name: graph
            .entity(id)
            .map_or_else(|_| id.to_string(), |e| e.name.clone()),
        x,
        y,
        category,
        color_key: category.color(),
        collapsed_path_length: None,
        patient_reported: false,
        expanded: false,
        faded: false,
        detail_open: false,
    }
}

fn path_length(bundles: &[&EvidenceBundle], symptom: &str) -> Option<usize> {
    bundles
        .iter()
        .filter_map(|b| b.paths.get(symptom).map(|p| p.len().saturating_sub(1)))
        .min()
}

/// Items a bundle owns, by category, in bundle order.
fn owned(b: &EvidenceBundle) -> [(Category, Vec<(String, String)>); 3] {
    let far = |t: &crate::kg::Triple| t.other_end(&b.disease_id).to_string();
    [
        (
            Category::CommonSymptom,
            b.symptom_edges
                .iter()
                .map(|r| (far(&r.triple), r.triple.relation.clone()))
                .collect(),
        ),
        (
            Category::Definition,
            b.definition_edges
                .iter()
                .map(|t| (far(t), t.relation.clone()))
                .collect(),
        ),
        (
            Category::Drug,
            b.drug_edges
                .iter()
                .map(|r| (far(&r.triple), r.triple.relation.clone()))
                .collect(),
        ),
    ]
}

/// Polygon layout of up to `k` diagnoses (bundles in rank order) with their
/// evidence. Diagnoses below `min_severity` are left out.
pub fn global_layout<S: Scalar>(
    graph: &KnowledgeGraph,
    bundles: &[EvidenceBundle],
    k: usize,
    canvas: Canvas<S>,
    min_severity: Option<u8>,
) -> Result<LayoutResult<S>> {
    if k < 1 {
        return Err(LayoutError::InvalidK);
    }
    canvas.validate()?;
    let shown: Vec<&EvidenceBundle> = bundles
        .iter()
        .filter(|b| {
            min_severity.is_none_or(|min| {
                graph
                    .entity(&b.disease_id)
                    .ok()
                    .and_then(|e| e.severity)
                    .unwrap_or(0)
                    >= min
            })
        })
        .take(k)
        .collect();
    let n = shown.len();
    let center = canvas.center();
    let m = canvas.min_dim();
    let mut nodes: Vec<LayoutNode<S>> = Vec::new();
    let mut edges = Vec::new();
    let mut placed: BTreeSet<String> = BTreeSet::new();

    let angles = polygon_angles(n);
    let vertices: Vec<(S, S)> = if n == 1 {
        vec![center]
    } else {
        angles
            .iter()
            .map(|&a| polar(center, m * S::lit(POLYGON_RADIUS), a))
            .collect()
    };
    for (b, &v) in shown.iter().zip(&vertices) {
        nodes.push(node(graph, &b.disease_id, Category::Diagnosis, v));
        placed.insert(b.disease_id.clone());
    }

    let patient: BTreeSet<&str> = shown
        .iter()
        .flat_map(|b| b.paths.keys().map(String::as_str))
        .collect();

    // Symptoms one hop from every diagnosis.
    let common: Vec<String> = if n >= 2 {
        let sets: Vec<BTreeSet<String>> = shown
            .iter()
            .map(|b| owned(b)[0].1.iter().map(|(id, _)| id.clone()).collect())
            .collect();
        sets[0]
            .iter()
            .filter(|s| sets.iter().all(|x| x.contains(*s)) && !placed.contains(*s))
            .cloned()
            .collect()
    } else {
        Vec::new()
    };
    for (i, s) in common.iter().enumerate() {
        let pos = if common.len() == 1 {
            center
        } else {
            polar(
                center,
                m * S::lit(COMMON_RING),
                90.0 + 360.0 * i as f64 / common.len() as f64,
            )
        };
        let mut nd = node(graph, s, Category::CommonSymptom, pos);
        nd.patient_reported = patient.contains(s.as_str());
        nodes.push(nd);
        placed.insert(s.clone());
    }

    // Remaining owned items on an outward arc near their first owner.
    for (bi, b) in shown.iter().enumerate() {
        let items: Vec<(Category, String)> = owned(b)
            .into_iter()
            .flat_map(|(c, v)| v.into_iter().map(move |(id, _)| (c, id)))
            .filter(|(_, id)| !placed.contains(id) && !patient.contains(id.as_str()))
            .collect::<Vec<_>>();
        let mut seen = BTreeSet::new();
        let items: Vec<_> = items
            .into_iter()
            .filter(|(_, id)| seen.insert(id.clone()))
            .collect();
        let cnt = items.len();
        for (j, (cat, id)) in items.into_iter().enumerate() {
            let pos = if n == 1 {
                polar(
                    center,
                    m * S::lit(SINGLE_RING),
                    360.0 * j as f64 / cnt as f64,
                )
            } else {
                let a = angles[bi] - 60.0 + 120.0 * (j + 1) as f64 / (cnt + 1) as f64;
                polar(vertices[bi], m * S::lit(OWNED_RING), a)
            };
            // Owned but not shared by every diagnosis.
            let cat = if cat == Category::CommonSymptom {
                Category::Context
            } else {
                cat
            };
            let nd = node(graph, &id, cat, pos);
            nodes.push(nd);
            placed.insert(id);
        }
    }

    // Patient symptoms, collapsed, on an inner ring between the vertices.
    let pending: Vec<&str> = patient
        .iter()
        .copied()
        .filter(|s| !placed.contains(*s))
        .collect();
    for (j, s) in pending.iter().enumerate() {
        let a = 90.0 + 360.0 * (j as f64 + 0.5) / pending.len() as f64;
        let mut nd = node(
            graph,
            s,
            Category::PatientSymptom,
            polar(center, m * S::lit(PATIENT_RING), a),
        );
        nd.patient_reported = true;
        nd.collapsed_path_length = path_length(&shown, s);
        nodes.push(nd);
        placed.insert(s.to_string());
    }

    for b in &shown {
        for (_, items) in owned(b) {
            for (id, rel) in items {
                edges.push(LayoutEdge {
                    from: b.disease_id.clone(),
                    to: id,
                    relation: Some(rel),
                    emphasized: false,
                    faded: false,
                });
            }
        }
        for (s, p) in &b.paths {
            if p.len() > 2 {
                edges.push(LayoutEdge {
                    from: b.disease_id.clone(),
                    to: s.clone(),
                    relation: None,
                    emphasized: true,
                    faded: false,
                });
            } else if let Some(e) = edges
                .iter_mut()
                .find(|e| e.from == b.disease_id && e.to == *s)
            {
                e.emphasized = true;
            }
        }
    }

    Ok(LayoutResult {
        mode: LayoutMode::Global,
        canvas,
        diagnoses: shown.iter().map(|b| b.disease_id.clone()).collect(),
        nodes,
        edges,
    })
}

/// Centers one diagnosis and arranges its evidence in category sectors;
/// every other node keeps its global position and is faded.
pub fn focus_layout<S: Scalar>(
    graph: &KnowledgeGraph,
    selected: &str,
    global: &LayoutResult<S>,
    bundles: &[EvidenceBundle],
) -> Result<LayoutResult<S>> {
    if !global.diagnoses.iter().any(|d| d == selected) {
        return Err(LayoutError::UnknownDiagnosis(selected.to_string()));
    }
    let b = bundles
        .iter()
        .find(|b| b.disease_id == selected)
        .ok_or_else(|| LayoutError::UnknownDiagnosis(selected.to_string()))?;
    let canvas = global.canvas;
    let center = canvas.center();
    let r = canvas.min_dim() * S::lit(FOCUS_RING);

    let mut out = global.clone();
    out.mode = LayoutMode::Focus {
        disease_id: selected.to_string(),
    };
    for n in &mut out.nodes {
        n.faded = true;
    }

    let [symptoms, definitions, drugs] = owned(b);
    let patient: Vec<String> = b.paths.keys().cloned().collect();
    let dedup = |v: Vec<(String, String)>, skip: &BTreeSet<String>| {
        let mut seen = BTreeSet::new();
        v.into_iter()
            .map(|(id, _)| id)
            .filter(|id| !skip.contains(id) && seen.insert(id.clone()))
            .collect::<Vec<_>>()
    };
    let patient_set: BTreeSet<String> = patient.iter().cloned().collect();
    let groups: [(Category, (f64, f64), Vec<String>); 4] = [
        (
            Category::CommonSymptom,
            SYMPTOM_SECTOR,
            dedup(symptoms.1, &patient_set),
        ),
        (
            Category::Drug,
            DRUG_SECTOR,
            dedup(drugs.1, &BTreeSet::new()),
        ),
        (
            Category::Definition,
            DEFINITION_SECTOR,
            dedup(definitions.1, &BTreeSet::new()),
        ),
        (Category::PatientSymptom, PATIENT_SECTOR, patient),
    ];

    if let Some(sel) = out.node_mut(selected) {
        sel.x = center.0;
        sel.y = center.1;
        sel.faded = false;
    }
    for (cat, sector, ids) in groups {
        for (id, a) in ids.iter().zip(sector_angles(sector, ids.len())) {
            let (x, y) = polar(center, r, a);
            match out.node_mut(id) {
                Some(n) => {
                    n.x = x;
                    n.y = y;
                    n.faded = false;
                    if cat == Category::PatientSymptom {
                        n.collapsed_path_length =
                            b.paths.get(id).map(|p| p.len().saturating_sub(1));
                    }
                }
                None => {
                    let mut n = node(graph, id, cat, (x, y));
                    if cat == Category::PatientSymptom {
                        n.patient_reported = true;
                        n.collapsed_path_length =
                            b.paths.get(id).map(|p| p.len().saturating_sub(1));
                    }
                    out.nodes.push(n);
                }
            }
        }
    }
    for e in &mut out.edges {
        e.faded = !(e.from == selected || e.to == selected);
    }
    Ok(out)
}

/// Expands a collapsed patient symptom into its path, reveals a drug's
/// neighbors or opens a definition bubble. Idempotent; diagnosis vertices
/// never move.
pub fn expand_node<S: Scalar>(
    layout: &LayoutResult<S>,
    entity_id: &str,
    graph: &KnowledgeGraph,
) -> Result<LayoutResult<S>> {
    let target = layout
        .node(entity_id)
        .ok_or_else(|| LayoutError::UnknownNode(entity_id.to_string()))?
        .clone();
    let mut out = layout.clone();
    if target.expanded {
        return Ok(out);
    }
    let min = layout.canvas.min_dim();
    match target.category {
        Category::PatientSymptom if target.collapsed_path_length.is_some() => {
            let anchor = match &layout.mode {
                LayoutMode::Focus { disease_id } => Some(disease_id.clone()),
                LayoutMode::Global => {
                    let mut best: Option<(usize, &String)> = None;
                    for d in &layout.diagnoses {
                        if let Some(dist) = graph.shortest_path_distance(d, entity_id)? {
                            if best.is_none_or(|(b, _)| dist < b) {
                                best = Some((dist, d));
                            }
                        }
                    }
                    best.map(|(_, d)| d.clone())
                }
            };
            if let Some(anchor) = anchor {
                if let Some(path) = graph.shortest_path(&anchor, entity_id)? {
                    let a = out
                        .node(&anchor)
                        .map(|n| (n.x, n.y))
                        .unwrap_or(layout.canvas.center());
                    let t = (target.x, target.y);
                    let steps = S::lit((path.len() - 1) as f64);
                    for (i, id) in path
                        .iter()
                        .enumerate()
                        .skip(1)
                        .take(path.len().saturating_sub(2))
                    {
                        if out.node(id).is_none() {
                            let f = S::lit(i as f64) / steps;
                            let pos = (a.0 + (t.0 - a.0) * f, a.1 + (t.1 - a.1) * f);
                            out.nodes.push(node(graph, id, Category::Context, pos));
                        }
                    }
                    for w in path.windows(2) {
                        if !out.has_edge(&w[0], &w[1]) {
                            out.edges.push(LayoutEdge {
                                from: w[0].clone(),
                                to: w[1].clone(),
                                relation: None,
                                emphasized: true,
                                faded: false,
                            });
                        }
                    }
                }
            }
        }
        Category::Drug => {
            let fresh: Vec<String> = graph
                .neighbor_ids(entity_id)
                .into_iter()
                .filter(|id| out.node(id).is_none())
                .map(str::to_string)
                .collect();
            for (j, id) in fresh.iter().enumerate() {
                let pos = polar(
                    (target.x, target.y),
                    min * S::lit(EXPAND_RING),
                    360.0 * j as f64 / fresh.len() as f64,
                );
                let cat = match graph.entity(id)?.kind {
                    EntityKind::Drug => Category::Drug,
                    EntityKind::Definition => Category::Definition,
                    _ => Category::Context,
                };
                out.nodes.push(node(graph, id, cat, pos));
            }
            for n in graph.one_hop_neighbors(entity_id, None)? {
                if !out.has_edge(entity_id, &n.entity.id) {
                    out.edges.push(LayoutEdge {
                        from: n.triple.subject.clone(),
                        to: n.triple.object.clone(),
                        relation: Some(n.triple.relation.clone()),
                        emphasized: false,
                        faded: false,
                    });
                }
            }
        }
        Category::Definition => {
            out.node_mut(entity_id).expect("present").detail_open = true;
        }
        _ => {}
    }
    out.node_mut(entity_id).expect("present").expanded = true;
    Ok(out)
}

/// Likelihood bar (length) and severity (colour intensity) per diagnosis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct SeverityBar<S: Scalar = f64> {
    pub disease_id: String,
    pub name: String,
    pub relative_likelihood: S,
    pub severity: u8,
}

pub fn severity_bars<S: Scalar>(candidates: &[CandidateDiagnosis<S>]) -> Vec<SeverityBar<S>> {
    candidates
        .iter()
        .map(|c| SeverityBar {
            disease_id: c.disease_id.clone(),
            name: c.name.clone(),
            relative_likelihood: c.relative_likelihood.unwrap_or_else(S::zero),
            severity: c.severity,
        })
        .collect()
}

/// Angle of a point about the canvas center in `[0, 360)`.
pub fn angle_about<S: Scalar>(canvas: &Canvas<S>, x: S, y: S) -> f64 {
    let (cx, cy) = canvas.center();
    let a = (y - cy)
        .to_f64_lossy()
        .atan2((x - cx).to_f64_lossy())
        .to_degrees();
    if a < 0.0 {
        a + 360.0
    } else {
        a
    }
}

/// Nodes grouped by category, for callers that check sector membership.
pub fn by_category<S: Scalar>(layout: &LayoutResult<S>) -> BTreeMap<Category, Vec<&LayoutNode<S>>> {
    let mut out: BTreeMap<Category, Vec<&LayoutNode<S>>> = BTreeMap::new();
    for n in &layout.nodes {
        out.entry(n.category).or_default().push(n);
    }
    out
}
