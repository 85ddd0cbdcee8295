#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use serde_json::Value;

/// Handler: request body and 0-based request number → (status, body).
pub type Handler = dyn Fn(&Value, usize) -> (u16, String) + Send + Sync;

/// A minimal HTTP/1.1 server on an ephemeral localhost port.
pub struct MockServer {
    pub url: String,
    hits: Arc<AtomicUsize>,
}

impl MockServer {
    pub fn start(handler: Arc<Handler>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/generate", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let n = counter.fetch_add(1, Ordering::SeqCst);
                let handler = handler.clone();
                thread::spawn(move || serve(stream, n, handler.as_ref()));
            }
        });
        Self { url, hits }
    }

    /// Echoes the user request back with the request seed appended.
    pub fn echo() -> Self {
        Self::start(Arc::new(|body: &Value, _| {
            let prompt = body["prompt"].as_str().unwrap_or_default();
            let seed = body["seed"].as_u64().unwrap_or(0);
            let request = prompt
                .lines()
                .find_map(|l| l.strip_prefix("User request:"))
                .unwrap_or(prompt);
            let text = format!("{} variant {seed}", request.trim());
            (200, serde_json::json!({ "candidates": [text] }).to_string())
        }))
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

fn serve(stream: TcpStream, n: usize, handler: &Handler) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut len = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0; len];
    if reader.read_exact(&mut body).is_err() {
        return;
    }
    let value: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
    let (status, text) = handler(&value, n);
    let reason = if status == 200 { "OK" } else { "Error" };
    let mut stream = stream;
    let _ = write!(
        stream,
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
        text.len()
    );
}
