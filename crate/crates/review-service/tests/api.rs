use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

use sqg_core::kb::{save_kb, GeneratedQuestion};
use sqg_core::metrics::format_percent;
use sqg_core::review::{read_mark_log, DirCatalog, ReviewStore, MARKS_LOG, RUN_KB_FILE};
use sqg_core::{KnowledgeBase, Mode, QAPair};

fn write_run(runs: &Path, run_id: &str, candidates: usize) {
    let mut kb = KnowledgeBase::new("review");
    kb.pairs
        .push(QAPair::new("p1", "证明3-8个工作日开具", ["证明开具时间要多久？"]).unwrap());
    kb.pairs
        .push(QAPair::new("p2", "在设置页修改", ["怎么修改手机号"]).unwrap());
    for i in 0..candidates {
        let pair = if i % 2 == 0 { "p1" } else { "p2" };
        kb.pair_mut(pair)
            .unwrap()
            .generated
            .push(GeneratedQuestion::candidate(format!("候选问题{i}"), Mode::ContextAware));
    }
    let dir = runs.join(run_id);
    std::fs::create_dir_all(&dir).unwrap();
    save_kb(&kb, &dir.join(RUN_KB_FILE)).unwrap();
}

fn start(runs: &Path, data: &Path) -> String {
    let store = Arc::new(ReviewStore::open(DirCatalog::new(runs), data).unwrap());
    let (tx, rx) = std::sync::mpsc::channel::<SocketAddr>();
    std::thread::spawn(move || {
        tokio::runtime::Runtime::new().unwrap().block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, sqg_review_service::router(store)).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}

struct Api {
    base: String,
    http: Client,
}

impl Api {
    fn new(base: String) -> Self {
        Self {
            base,
            http: Client::new(),
        }
    }

    fn get(&self, path: &str) -> (StatusCode, Value) {
        let r = self.http.get(format!("{}{path}", self.base)).send().unwrap();
        (r.status(), r.json().unwrap())
    }

    fn post(&self, path: &str, body: Value) -> (StatusCode, Value) {
        let r = self
            .http
            .post(format!("{}{path}", self.base))
            .json(&body)
            .send()
            .unwrap();
        (r.status(), r.json().unwrap())
    }

    fn session(&self, run: &str, seed: u64) -> String {
        let (status, body) = self.post(
            "/sessions",
            json!({"run_id": run, "reviewer_id": "expert", "seed": seed}),
        );
        assert_eq!(status, StatusCode::CREATED, "{body}");
        body["session_id"].as_str().unwrap().to_string()
    }

    fn mark(&self, sid: &str, item: &str, verdict: &str) -> (StatusCode, Value) {
        self.post(
            &format!("/sessions/{sid}/marks"),
            json!({"item_id": item, "verdict": verdict}),
        )
    }
}

#[test]
fn hundred_item_session_reaches_eighty_four_percent() {
    let runs = tempfile::tempdir().unwrap();
    let data = tempfile::tempdir().unwrap();
    write_run(runs.path(), "run1", 100);
    let api = Api::new(start(runs.path(), data.path()));

    let sid = api.session("run1", 42);
    let (_, stats) = api.get(&format!("/sessions/{sid}/stats"));
    assert_eq!(stats["total"], 100);
    assert_eq!(stats["remaining"], 100);
    assert!(stats["acceptance_ratio"].is_null());

    let mut n = 0;
    loop {
        let (status, item) = api.get(&format!("/sessions/{sid}/next"));
        assert_eq!(status, StatusCode::OK);
        if item.get("done").is_some() {
            assert_eq!(item, json!({"done": true}));
            break;
        }
        assert_eq!(item["position"], n + 1);
        assert!(item["candidate"].as_str().unwrap().starts_with("候选问题"));
        let verdict = if n < 84 { "accept" } else { "reject" };
        let (status, stats) = api.mark(&sid, item["item_id"].as_str().unwrap(), verdict);
        assert_eq!(status, StatusCode::OK);
        assert_eq!(stats["marked"], n + 1);
        n += 1;
    }
    assert_eq!(n, 100);
    let (_, stats) = api.get(&format!("/sessions/{sid}/stats"));
    assert_eq!(
        (stats["accepted"].clone(), stats["rejected"].clone()),
        (json!(84), json!(16))
    );
    let ratio = stats["acceptance_ratio"].as_f64().unwrap();
    assert_eq!(ratio, 0.84);
    assert_eq!(format_percent(ratio), "84.0%");

    let log = read_mark_log(&data.path().join(MARKS_LOG)).unwrap();
    assert_eq!(log.len(), 100);
}

#[test]
fn same_seed_gives_same_order() {
    let runs = tempfile::tempdir().unwrap();
    let data = tempfile::tempdir().unwrap();
    write_run(runs.path(), "run1", 30);
    let api = Api::new(start(runs.path(), data.path()));
    let a = api.session("run1", 7);
    let b = api.session("run1", 7);
    api.session("run1", 8);
    let first = |sid: &str| api.get(&format!("/sessions/{sid}/next")).1["item_id"].clone();
    assert_eq!(first(&a), first(&b));
    let (_, list) = api.get("/sessions");
    assert_eq!(list.as_array().unwrap().len(), 3);
}

#[test]
fn error_statuses() {
    let runs = tempfile::tempdir().unwrap();
    let data = tempfile::tempdir().unwrap();
    write_run(runs.path(), "run1", 4);
    write_run(runs.path(), "empty", 0);
    let api = Api::new(start(runs.path(), data.path()));

    let (status, body) = api.post("/sessions", json!({"run_id": "nope", "reviewer_id": "r", "seed": 1}));
    assert_eq!(
        (status, body["error"].as_str()),
        (StatusCode::NOT_FOUND, Some("unknown_run"))
    );
    let (status, _) = api.post("/sessions", json!({"run_id": "../run1", "reviewer_id": "r", "seed": 1}));
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, body) = api.post("/sessions", json!({"run_id": "empty", "reviewer_id": "r", "seed": 1}));
    assert_eq!(
        (status, body["error"].as_str()),
        (StatusCode::UNPROCESSABLE_ENTITY, Some("empty_run"))
    );
    let (status, _) = api.post("/sessions", json!({"run_id": "run1"}));
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, _) = api.get("/sessions/missing/next");
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = api.get("/sessions/missing/stats");
    assert_eq!(status, StatusCode::NOT_FOUND);

    let sid = api.session("run1", 1);
    let item = api.get(&format!("/sessions/{sid}/next")).1["item_id"]
        .as_str()
        .unwrap()
        .to_string();
    let (status, body) = api.mark(&sid, &item, "maybe");
    assert_eq!(
        (status, body["error"].as_str()),
        (StatusCode::BAD_REQUEST, Some("bad_request"))
    );
    let (status, _) = api.mark(&sid, "p9#0", "accept");
    assert_eq!(status, StatusCode::NOT_FOUND);

    assert_eq!(api.mark(&sid, &item, "accept").0, StatusCode::OK);
    let (status, body) = api.mark(&sid, &item, "reject");
    assert_eq!(
        (status, body["error"].as_str()),
        (StatusCode::CONFLICT, Some("already_marked"))
    );
    let (_, stats) = api.get(&format!("/sessions/{sid}/stats"));
    assert_eq!(
        (stats["marked"].clone(), stats["accepted"].clone()),
        (json!(1), json!(1))
    );
}

#[test]
fn restart_preserves_sessions_and_marks() {
    let runs = tempfile::tempdir().unwrap();
    let data = tempfile::tempdir().unwrap();
    write_run(runs.path(), "run1", 10);
    let api = Api::new(start(runs.path(), data.path()));
    let sid = api.session("run1", 3);
    for k in 0..4 {
        let item = api.get(&format!("/sessions/{sid}/next")).1["item_id"]
            .as_str()
            .unwrap()
            .to_string();
        api.mark(&sid, &item, if k == 2 { "reject" } else { "accept" });
    }
    let (_, before) = api.get(&format!("/sessions/{sid}/stats"));
    let (_, next_before) = api.get(&format!("/sessions/{sid}/next"));

    let restarted = Api::new(start(runs.path(), data.path()));
    assert_eq!(restarted.get(&format!("/sessions/{sid}/stats")).1, before);
    assert_eq!(restarted.get(&format!("/sessions/{sid}/next")).1, next_before);
    assert_eq!(before["acceptance_ratio"], 0.75);
}

#[test]
fn concurrent_marks_are_serialized() {
    let runs = tempfile::tempdir().unwrap();
    let data = tempfile::tempdir().unwrap();
    write_run(runs.path(), "run1", 40);
    let base = start(runs.path(), data.path());
    let api = Api::new(base.clone());
    let sid = api.session("run1", 11);
    let store = ReviewStore::open(DirCatalog::new(runs.path()), data.path()).unwrap();
    let items: Vec<String> = store
        .session(&sid)
        .unwrap()
        .queue
        .into_iter()
        .map(|i| i.item_id)
        .collect();
    drop(store);

    std::thread::scope(|s| {
        for chunk in items.chunks(10) {
            let base = base.clone();
            let sid = sid.clone();
            s.spawn(move || {
                let api = Api::new(base);
                for item in chunk {
                    // Every item is submitted twice; exactly one attempt wins.
                    let a = api.mark(&sid, item, "accept").0;
                    let b = api.mark(&sid, item, "reject").0;
                    assert_eq!((a, b), (StatusCode::OK, StatusCode::CONFLICT));
                }
            });
        }
    });
    let (_, stats) = api.get(&format!("/sessions/{sid}/stats"));
    assert_eq!(
        (stats["marked"].clone(), stats["remaining"].clone()),
        (json!(40), json!(0))
    );
    assert_eq!(read_mark_log(&data.path().join(MARKS_LOG)).unwrap().len(), 40);
}
