#![allow(dead_code)]

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use futures::StreamExt;
use serde_json::Value;
use skillchain::skill_kb::SkillLibrary;
use skillchain_service::{router, AppState};

pub const DRYWALL_LIBRARY: &str = include_str!("../../../core/fixtures/drywall.json");
pub const DRYWALL_TASK: &str = include_str!("../../../core/fixtures/drywall_task.json");
pub const STUD_PAYLOAD: &[u8] = include_bytes!("../../../core/fixtures/stud_payload.json");

pub fn fixture_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name)
}

pub fn drywall() -> SkillLibrary {
    SkillLibrary::from_json(DRYWALL_LIBRARY).unwrap()
}

pub struct Server {
    pub base: String,
    pub state: Arc<AppState>,
    pub client: reqwest::Client,
}

pub async fn spawn(state: AppState) -> Server {
    let state = Arc::new(state);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr: SocketAddr = listener.local_addr().unwrap();
    let app = router(state.clone());
    tokio::spawn(async move {
        axum::serve(listener, app).await.unwrap();
    });
    Server { base: format!("http://{addr}"), state, client: reqwest::Client::new() }
}

impl Server {
    pub async fn get(&self, path: &str) -> (u16, Value) {
        let r = self.client.get(format!("{}{path}", self.base)).send().await.unwrap();
        let status = r.status().as_u16();
        (status, r.json().await.unwrap())
    }

    pub async fn post_bytes(&self, path: &str, body: impl Into<reqwest::Body>) -> (u16, Value) {
        let r = self.client.post(format!("{}{path}", self.base)).body(body).send().await.unwrap();
        let status = r.status().as_u16();
        (status, r.json().await.unwrap())
    }

    pub async fn post(&self, path: &str, body: Value) -> (u16, Value) {
        self.post_bytes(path, serde_json::to_vec(&body).unwrap()).await
    }

    /// Reads event frames from `/events?from=` until `stop` says so.
    pub async fn events_until(&self, from: u64, stop: impl Fn(&Value) -> bool) -> Vec<Value> {
        self.read_events(self.client.get(format!("{}/events?from={from}", self.base)), stop).await
    }

    pub async fn read_events(&self, req: reqwest::RequestBuilder, stop: impl Fn(&Value) -> bool) -> Vec<Value> {
        let r = req.send().await.unwrap();
        assert_eq!(r.status().as_u16(), 200);
        let mut body = r.bytes_stream();
        let mut buf = String::new();
        let mut out = Vec::new();
        loop {
            while let Some(end) = buf.find("\n\n") {
                let frame: String = buf.drain(..end + 2).collect();
                let data: Vec<&str> = frame.lines().filter_map(|l| l.strip_prefix("data:")).map(str::trim_start).collect();
                if data.is_empty() {
                    continue;
                }
                let v: Value = serde_json::from_str(&data.join("\n")).unwrap();
                let done = stop(&v);
                out.push(v);
                if done {
                    return out;
                }
            }
            let chunk = tokio::time::timeout(Duration::from_secs(10), body.next())
                .await
                .expect("event stream stalled")
                .expect("event stream closed")
                .unwrap();
            buf.push_str(std::str::from_utf8(&chunk).unwrap());
        }
    }
}

pub fn is_terminal(e: &Value) -> bool {
    e["kind"] == "plan_completed" || e["kind"] == "plan_failed"
}

pub fn status_state(snapshot: &Value) -> String {
    snapshot["session"]["status"]["state"].as_str().unwrap_or("none").to_string()
}
