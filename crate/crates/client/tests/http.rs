//! The client against a real gateway on a loopback port.

mod common;

use std::process::Command;
use std::sync::Arc;

use common::*;
use pipescan_client::remote::Remote;
use pipescan_client::spool::{Spool, SyncState};
use pipescan_client::transport::HttpTransport;
use pipescan_core::domain::PipelineParams;
use pipescan_core::store::Role;

struct Running {
    base: String,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl Drop for Running {
    fn drop(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn serve(s: &Server) -> Running {
    let api = s.api.clone();
    let (addr_tx, addr_rx) = std::sync::mpsc::channel();
    let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            addr_tx.send(listener.local_addr().unwrap()).unwrap();
            pipescan_server::http::serve(listener, api, async {
                let _ = stop_rx.await;
            })
            .await
            .unwrap();
        });
    });
    let addr = addr_rx.recv().unwrap();
    Running {
        base: format!("http://{addr}"),
        stop: Some(stop_tx),
        thread: Some(thread),
    }
}

#[test]
fn field_run_over_http() {
    let s = Server::new();
    s.api.store().users().upsert_user("op", "pw-12345", Role::Operator).unwrap();
    let srv = serve(&s);
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    write_frames(&input, 4, &[1, 2], 31);
    write_params(&dir.path().join("params.json"), &PipelineParams::default());
    write_model(&dir.path().join("model.json"), 4);
    let spool = dir.path().join("spool");
    let pipescan = || Command::new(env!("CARGO_BIN_EXE_pipescan"));

    let o = pipescan()
        .args(["login", "--server", &srv.base, "--username", "op"])
        .env("PIPESCAN_PASSWORD", "pw-12345")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let token = String::from_utf8(o.stdout).unwrap().trim().to_string();

    let o = pipescan()
        .arg("analyze")
        .arg("--input")
        .arg(&input)
        .arg("--params")
        .arg(dir.path().join("params.json"))
        .arg("--model")
        .arg(dir.path().join("model.json"))
        .arg("--out")
        .arg(dir.path().join("out.json"))
        .args(["--at", "2026-03-10T08:00:00Z", "--title", "pipe 12", "--tag", "east", "--spool"])
        .arg(&spool)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    for _ in 0..2 {
        let o = pipescan()
            .args(["sync", "--server", &srv.base, "--token", &token, "--spool"])
            .arg(&spool)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let entry = Spool::open(&spool).unwrap().list().unwrap().remove(0);
    assert_eq!(entry.state, SyncState::Synced);

    let remote = Remote::new(Arc::new(HttpTransport::new(&srv.base)), Some(token.clone()));
    let b = remote.bundle(&entry.inspection.id).unwrap();
    assert_eq!(b.bundle_hash, entry.inspection.bundle_hash());
    assert_eq!(b.bundle["tags"], serde_json::json!(["east"]));

    let review = dir.path().join("review");
    let o = pipescan()
        .args(["download", "--server", &srv.base, "--token", &token, "--id", &entry.inspection.id, "--class", "Junction", "--dir"])
        .arg(&review)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let review_cmd = |args: &[&str]| {
        pipescan().arg("review").arg(&review).args(args).env("PIPESCAN_TOKEN", &token).output().unwrap()
    };
    assert_eq!(review_cmd(&["add-defect", "--frame", "9", "--class", "Junction", "--box", "1,1,9,9"]).status.code(), Some(1));
    let o = review_cmd(&["add-defect", "--frame", "0", "--class", "Junction", "--box", "1,1,9,9", "--at", "2026-03-10T10:00:00Z"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(review_cmd(&["delete-defect", "0"]).status.success());
    assert!(review_cmd(&["save"]).status.success());
    let o = review_cmd(&["upload", "--server", &srv.base]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let shown = String::from_utf8(review_cmd(&["show"]).stdout).unwrap();
    assert_eq!(shown.lines().count(), entry.inspection.annotations.len());
    assert!(shown.lines().last().unwrap().contains("Manual"));

    let bad = Remote::new(Arc::new(HttpTransport::new(&srv.base)), Some("nope".into()));
    assert!(matches!(bad.me(), Err(pipescan_client::ClientError::Auth(_))));
}

#[test]
fn unreachable_server_is_a_network_error() {
    let r = Remote::new(Arc::new(HttpTransport::new("http://127.0.0.1:9")), None);
    let e = r.login("a", "b").unwrap_err();
    assert!(matches!(e, pipescan_client::ClientError::Network(_)), "{e}");
    assert_eq!(e.exit_code(), 2);
}
