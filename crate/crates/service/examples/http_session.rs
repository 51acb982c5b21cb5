//! Drives the session API over HTTP the way an annotation front end would:
//! create, inspect, fetch an uncertainty slice, add a landmark, refit, export.
//!
//! cargo run -p gpreg-service --example http_session

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::sync::Arc;

use gpreg::eval::{self, SyntheticSpec};
use gpreg_service::api::{self, SessionStore, SliceBody};
use serde_json::{json, Value};

/// Minimal HTTP/1.1 exchange; returns the status code and JSON body.
fn request(addr: SocketAddr, method: &str, path: &str, body: Option<&Value>) -> std::io::Result<(u16, Value)> {
    let mut stream = TcpStream::connect(addr)?;
    let payload = body.map(Value::to_string).unwrap_or_default();
    write!(
        stream,
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{payload}",
        payload.len()
    )?;
    let mut raw = String::new();
    stream.read_to_string(&mut raw)?;
    let status = raw.split_whitespace().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let body = raw.split_once("\r\n\r\n").map(|(_, b)| b).unwrap_or("");
    Ok((status, serde_json::from_str(body).unwrap_or(Value::Null)))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data_dir = std::env::temp_dir().join("gpreg-http-session");
    let runtime = tokio::runtime::Runtime::new()?;
    let listener = runtime.block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))?;
    let addr = listener.local_addr()?;
    let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
    let server = runtime.spawn(api::serve(listener, Arc::new(SessionStore::new(&data_dir)), async {
        let _ = stopped.await;
    }));
    println!("serving on http://{addr}");

    let case = eval::generate_synthetic_case(&SyntheticSpec { seed: 2, n_landmarks: 20, eval_fraction: 0.0, ..Default::default() })?;
    let create = json!({
        "landmarks": api::landmark_document(&case.all_landmarks()),
        "config": { "grid": { "origin": [0, 0, 0], "spacing": [5, 5, 5], "dims": [21, 21, 21] }, "kernel_mode": { "mode": "grid" } },
    });
    let (status, created) = request(addr, "POST", "/sessions", Some(&create))?;
    let id = created["id"].as_str().ok_or_else(|| format!("create failed ({status}): {created}"))?.to_string();
    println!("POST /sessions -> {status}, session {id}");

    let (_, state) = request(addr, "GET", &format!("/sessions/{id}/state"), None)?;
    println!("state: revision {}, {} landmarks, kernels from {}", state["summary"]["revision"], state["summary"]["n_landmarks"], state["summary"]["kernel_source"]);

    let (_, slice) = request(addr, "GET", &format!("/sessions/{id}/slices?kind=uncertainty&axis=z&index=10"), None)?;
    let slice: SliceBody = serde_json::from_value(slice)?;
    let values = slice.decode()?;
    let peak = values.iter().copied().fold(f32::MIN, f32::max);
    println!("uncertainty slice z=10: {:?} pixels, peak trace {peak:.3} mm²", slice.dims);

    let add = json!({ "pre": [80.0, 80.0, 50.0], "post": [81.5, 79.0, 50.5] });
    let (status, added) = request(addr, "POST", &format!("/sessions/{id}/landmarks"), Some(&add))?;
    println!("POST landmarks -> {status}, id {}, variance before {} after {}", added["id"], added["variance_before"], added["variance_after"]);

    let refit = json!({ "mode": "manual", "kernel": { "family": "gaussian", "sill": 3.0, "param": 400.0, "nugget": 0.05 } });
    let (status, refit) = request(addr, "POST", &format!("/sessions/{id}/kernel"), Some(&refit))?;
    println!("POST kernel -> {status}, revision {}, source {}", refit["revision"], refit["source"]);

    let (status, exported) = request(addr, "POST", &format!("/sessions/{id}/export"), Some(&json!({})))?;
    println!("POST export -> {status}, {} files in {}", exported["files"].as_array().map_or(0, Vec::len), exported["dir"]);

    let (status, err) = request(addr, "DELETE", &format!("/sessions/{id}/landmarks/9999"), None)?;
    println!("DELETE unknown landmark -> {status} {}", err["code"]);

    let _ = stop.send(());
    runtime.block_on(server)??;
    println!("session flushed under {}", data_dir.join("sessions").join(&id).display());
    Ok(())
}
