#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use brainroi_core::ipo::{mock_generate, PromptCandidate};
use serde_json::{json, Value};

pub fn brainroi(out_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_brainroi"))
        .arg("--out-dir")
        .arg(out_dir)
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Run and require exit 0.
pub fn ok(out_dir: &Path, args: &[&str]) -> String {
    let o = brainroi(out_dir, args);
    assert!(o.status.success(), "brainroi {args:?} failed: {}", stderr(&o));
    stdout(&o)
}

/// A config with shortened training so CLI tests stay fast.
pub fn quick_config(dir: &Path) -> PathBuf {
    let path = dir.join("quick.json");
    let cfg = json!({
        "train": {
            "stage1": {"epochs": 3},
            "stage2": {"epochs": 2}
        }
    });
    std::fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

/// Train the quick config under `dir` and return the config path.
pub fn quick_trained(dir: &Path) -> PathBuf {
    let cfg = quick_config(dir);
    ok(dir, &["--config", cfg.to_str().unwrap(), "train"]);
    cfg
}

pub fn read(path: impl AsRef<Path>) -> Vec<u8> {
    let path = path.as_ref();
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn read_json(path: impl AsRef<Path>) -> Value {
    serde_json::from_slice(&read(path)).unwrap()
}

/// How the stub answers one request.
#[derive(Debug, Clone)]
pub enum Reply {
    /// What the mock generator would have produced for this call.
    Mock,
    /// `k - 1` prompts.
    Short,
    /// Sleep before answering like `Mock`.
    Delay(Duration),
    /// A body that is not JSON.
    Garbage,
    /// A non-success status code.
    Status(u16),
}

/// Minimal single-route HTTP server for the prompt generator protocol.
///
/// Request `n` (1-based) is answered by `script[n - 1]`, falling back to
/// `Reply::Mock` past the end. Mock replies use seed `seed + n`, matching
/// the in-process mock generator call for call.
pub struct StubServer {
    pub url: String,
    pub requests: Arc<Mutex<Vec<Value>>>,
}

impl StubServer {
    pub fn start(seed: u64, script: Vec<Reply>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/generate", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&requests);
        thread::spawn(move || {
            for (n, stream) in listener.incoming().enumerate() {
                let Ok(stream) = stream else { continue };
                let reply = script.get(n).cloned().unwrap_or(Reply::Mock);
                let log = Arc::clone(&log);
                let call = n as u64 + 1;
                thread::spawn(move || serve(stream, reply, seed.wrapping_add(call), &log));
            }
        });
        StubServer { url, requests }
    }

    pub fn received(&self) -> Vec<Value> {
        self.requests.lock().unwrap().clone()
    }
}

fn read_request(stream: &TcpStream) -> Option<Value> {
    let mut reader = BufReader::new(stream);
    let mut len = 0usize;
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line).ok()? == 0 {
            return None;
        }
        let l = line.trim_end();
        if l.is_empty() {
            break;
        }
        if let Some((k, v)) = l.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().ok()?;
            }
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    serde_json::from_slice(&body).ok()
}

fn serve(mut stream: TcpStream, reply: Reply, seed: u64, log: &Mutex<Vec<Value>>) {
    let Some(req) = read_request(&stream) else { return };
    log.lock().unwrap().push(req.clone());
    let k = req["k"].as_u64().unwrap_or(0) as usize;
    let pool: Vec<PromptCandidate> = req["pool"]
        .as_array()
        .map(|a| a.iter().filter_map(|t| PromptCandidate::new(t.as_str()?, 0).ok()).collect())
        .unwrap_or_default();
    let prompts = |n: usize| json!({"prompts": mock_generate(&pool, k, seed)[..n].to_vec()}).to_string();
    let (status, body) = match reply {
        Reply::Mock => (200, prompts(k)),
        Reply::Short => (200, prompts(k.saturating_sub(1))),
        Reply::Delay(d) => {
            thread::sleep(d);
            (200, prompts(k))
        }
        Reply::Garbage => (200, "{\"prompts\": [oops".to_string()),
        Reply::Status(code) => (code, "{}".to_string()),
    };
    let _ = write!(
        stream,
        "HTTP/1.1 {status} STUB\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    let _ = stream.flush();
}
