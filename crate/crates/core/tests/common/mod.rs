#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use capeval::promptgen::PromptTemplate;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// How the mock server answers the n-th request (0-based).
#[derive(Clone, Copy)]
pub enum Script {
    /// Always 200 with the prompt's description span.
    Echo,
    /// 401 for every request.
    Unauthorized,
    /// 503 for the first `n` requests, then echo.
    FailFirst(usize),
    /// 500 for prompts whose description contains the given text.
    FailMatching(&'static str),
}

/// Minimal HTTP/1.1 completion endpoint counting every request it receives.
pub struct MockServer {
    pub url: String,
    hits: Arc<AtomicUsize>,
}

impl MockServer {
    pub fn start(script: Script) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/completions", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = Arc::clone(&hits);
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let n = counter.fetch_add(1, Ordering::SeqCst);
                thread::spawn(move || serve(stream, n, script));
            }
        });
        Self { url, hits }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

fn serve(stream: TcpStream, n: usize, script: Script) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut length = 0usize;
    let mut auth = String::new();
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        let lower = line.to_ascii_lowercase();
        if let Some(v) = lower.strip_prefix("content-length:") {
            length = v.trim().parse().unwrap_or(0);
        }
        if lower.starts_with("authorization:") {
            auth = line["authorization:".len()..].trim().to_owned();
        }
    }
    let mut body = vec![0u8; length];
    reader.read_exact(&mut body).unwrap();
    let json: serde_json::Value = serde_json::from_slice(&body).unwrap_or_default();
    let prompt = json["prompt"].as_str().unwrap_or("").to_owned();
    let description = PromptTemplate::default_template()
        .description_span(&prompt)
        .unwrap_or("")
        .to_owned();

    let (status, payload) = match script {
        Script::Unauthorized => ("401 Unauthorized", r#"{"error":"bad key"}"#.to_owned()),
        Script::FailFirst(k) if n < k => ("503 Service Unavailable", "{}".to_owned()),
        Script::FailMatching(s) if description.contains(s) => ("500 Internal Server Error", "{}".to_owned()),
        _ if auth != "Bearer test-key" => ("401 Unauthorized", r#"{"error":"bad key"}"#.to_owned()),
        _ => ("200 OK", serde_json::json!({"choices": [{"text": format!(" {description}\nmore")}]}).to_string()),
    };
    let mut stream = stream;
    let _ = write!(
        stream,
        "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    );
    let _ = stream.flush();
}

pub const KEY_ENV: &str = "CAPEVAL_TEST_KEY";

/// Sets the key the mock server accepts; every test uses the same value.
pub fn set_test_key() {
    std::env::set_var(KEY_ENV, "test-key");
}

/// Writes a run config into `dir` for the engineered fixture.
pub fn write_config(dir: &Path, generation: &str) -> PathBuf {
    let text = format!(
        r#"label = "fixture-model"
corpus = "{corpus}"
split = "test"
output_dir = "out"
failure_policy = "skip-and-flag"

[generation]
retry = {{ max_attempts = 3, base_delay_ms = 1, max_delay_ms = 5 }}
{generation}"#,
        corpus = fixture("engineered.jsonl").display(),
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

pub fn http_generation(url: &str) -> String {
    format!(
        "backend = \"completion-http\"\nmodel_id = \"mock-1\"\n[generation.http]\nendpoint = \"{url}\"\napi_key_env = \"{KEY_ENV}\"\ntimeout_secs = 5\n"
    )
}

pub fn fixed_generation(map: &str) -> String {
    format!("backend = \"fixed-map\"\nmodel_id = \"fixed\"\nfixed_map = \"{}\"\n", fixture(map).display())
}

pub fn run_cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = capeval::cli::run(args.iter().copied(), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}
