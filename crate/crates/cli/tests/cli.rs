use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use casegraph_core::kg::{export_graph, KnowledgeGraph};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

fn casegraph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_casegraph"))
        .args(args)
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(casegraph(&[]).status.code(), Some(2));
    assert_eq!(casegraph(&["eval"]).status.code(), Some(2));
    assert_eq!(
        casegraph(&["eval", "--packs", ".", "--bogus"])
            .status
            .code(),
        Some(2)
    );
    let packs = fixtures().join("packs");
    assert_eq!(
        casegraph(&["eval", "--packs", s(&packs), "--top-k", "0"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(casegraph(&["--help"]).status.code(), Some(0));
}

#[test]
fn import_then_export_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let kg = fixtures().join("kg");
    let (nodes, edges) = (kg.join("nodes.jsonl"), kg.join("edges.jsonl"));
    let store = dir.path().join("store");
    let out = casegraph(&[
        "import-kg",
        "--nodes",
        s(&nodes),
        "--edges",
        s(&edges),
        "--out",
        s(&store),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("37 entities and 43 triples"));
    // A second import into the same place is refused.
    let again = casegraph(&[
        "import-kg",
        "--nodes",
        s(&nodes),
        "--edges",
        s(&edges),
        "--out",
        s(&store),
    ]);
    assert_eq!(again.status.code(), Some(1));

    let exported = dir.path().join("exported");
    let out = casegraph(&["export-kg", "--store", s(&store), "--out-dir", s(&exported)]);
    assert!(out.status.success());
    let a = KnowledgeGraph::load_files(&nodes, &edges).unwrap();
    let b =
        KnowledgeGraph::load_files(&exported.join("nodes.jsonl"), &exported.join("edges.jsonl"))
            .unwrap();
    assert_eq!(export_graph(&a), export_graph(&b));
}

#[test]
fn malformed_graph_files_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let nodes = dir.path().join("nodes.jsonl");
    let edges = dir.path().join("edges.jsonl");
    std::fs::write(
        &nodes,
        "{\"id\": \"a\", \"name\": \"a\", \"kind\": \"symptom\"}\nnot json\n",
    )
    .unwrap();
    std::fs::write(&edges, "").unwrap();
    let out = casegraph(&[
        "import-kg",
        "--nodes",
        s(&nodes),
        "--edges",
        s(&edges),
        "--out",
        s(&dir.path().join("store")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("line 2"),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let out = casegraph(&[
        "export-kg",
        "--store",
        s(&dir.path().join("missing")),
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn run_scenario_writes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("run.json");
    let pack = fixtures().join("packs/acute-glaucoma.json");
    let out = casegraph(&["run-scenario", "--pack", s(&pack), "--out", s(&out_path)]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    assert_eq!(v["metrics"]["top1_hit"], true);
    assert_eq!(
        v["record"]["candidates"][0]["disease_id"],
        "acute-angle-closure-glaucoma"
    );
    assert!(!v["llm_transcript"].as_array().unwrap().is_empty());

    let missing = casegraph(&["run-scenario", "--pack", s(&dir.path().join("nope.json"))]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn eval_reports_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let packs = fixtures().join("packs");
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    for p in [&a, &b] {
        let out = casegraph(&["eval", "--packs", s(&packs), "--out", s(p), "--stable"]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let table = String::from_utf8_lossy(&out.stdout).to_string();
        for id in ["migraine-with-aura", "acute-glaucoma", "cluster-headache"] {
            assert!(table.contains(id), "{table}");
        }
    }
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["aggregate"]["top3_count"], 3);
    assert_eq!(v["aggregate"]["top1_count"], 2);

    let empty = tempfile::tempdir().unwrap();
    let out = casegraph(&["eval", "--packs", s(empty.path())]);
    assert_eq!(out.status.code(), Some(0));

    std::fs::write(empty.path().join("broken.json"), "{").unwrap();
    let out = casegraph(&["eval", "--packs", s(empty.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn serve_rejects_bad_configs() {
    let dir = tempfile::tempdir().unwrap();
    let out = casegraph(&["serve", "--config", s(&dir.path().join("missing.toml"))]);
    assert_eq!(out.status.code(), Some(1));
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[thresholds]\nmax_questions_per_turn = 5\n").unwrap();
    let out = casegraph(&["serve", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(&cfg, "[server]\nbind = \"127.0.0.1:0\"\n").unwrap();
    let out = casegraph(&["serve", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2), "no data_dir");
    assert!(String::from_utf8_lossy(&out.stderr).contains("data_dir"));
}

#[test]
fn serve_answers_health_checks() {
    use std::io::{Read, Write};
    use std::net::{TcpListener, TcpStream};
    use std::time::{Duration, Instant};

    let dir = tempfile::tempdir().unwrap();
    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let cfg = dir.path().join("c.toml");
    let kg = fixtures().join("kg");
    std::fs::write(
        &cfg,
        format!(
            "[storage]\ndata_dir = \"data\"\nseed_nodes = \"{}\"\nseed_edges = \"{}\"\n[server]\nbind = \"127.0.0.1:{port}\"\n",
            s(&kg.join("nodes.jsonl")),
            s(&kg.join("edges.jsonl"))
        ),
    )
    .unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_casegraph"))
        .args(["serve", "--config", s(&cfg)])
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(20);
    let reply = loop {
        if let Ok(mut c) = TcpStream::connect(("127.0.0.1", port)) {
            c.write_all(b"GET /health HTTP/1.1\r\nhost: x\r\nconnection: close\r\n\r\n")
                .unwrap();
            let mut r = String::new();
            c.read_to_string(&mut r).unwrap();
            break r;
        }
        assert!(Instant::now() < deadline, "server did not start");
        std::thread::sleep(Duration::from_millis(50));
    };
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(reply.starts_with("HTTP/1.1 200"), "{reply}");
    assert!(reply.contains("\"ok\""));
    assert!(dir.path().join("data/kg/nodes.jsonl").exists());
}
