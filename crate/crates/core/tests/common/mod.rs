#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use serde_json::Value;

#[derive(Debug, Clone)]
pub struct Request {
    pub path: String,
    pub authorization: Option<String>,
    pub body: Value,
}

pub type Handler = dyn Fn(&Request, usize) -> (u16, String) + Send + Sync;

/// Minimal HTTP/1.1 server on loopback. Each connection gets its own thread
/// so in-flight requests can be counted.
pub struct StubServer {
    pub url: String,
    requests: Arc<Mutex<Vec<Request>>>,
    in_flight: Arc<AtomicUsize>,
    max_in_flight: Arc<AtomicUsize>,
}

impl StubServer {
    /// `handler` gets the request and its zero-based arrival index.
    pub fn start(handler: impl Fn(&Request, usize) -> (u16, String) + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let in_flight = Arc::new(AtomicUsize::new(0));
        let max_in_flight = Arc::new(AtomicUsize::new(0));
        let handler: Arc<Handler> = Arc::new(handler);
        let (reqs, cur, max) = (requests.clone(), in_flight.clone(), max_in_flight.clone());
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let (reqs, cur, max, handler) = (reqs.clone(), cur.clone(), max.clone(), handler.clone());
                thread::spawn(move || serve(stream, &reqs, &cur, &max, handler.as_ref()));
            }
        });
        Self { url, requests, in_flight, max_in_flight }
    }

    pub fn requests(&self) -> Vec<Request> {
        self.requests.lock().unwrap().clone()
    }

    pub fn count(&self) -> usize {
        self.requests.lock().unwrap().len()
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }
}

fn serve(
    stream: TcpStream,
    reqs: &Mutex<Vec<Request>>,
    cur: &AtomicUsize,
    max: &AtomicUsize,
    handler: &Handler,
) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut line = String::new();
    if reader.read_line(&mut line).unwrap_or(0) == 0 {
        return;
    }
    let path = line.split_whitespace().nth(1).unwrap_or("").to_string();
    let mut len = 0;
    let mut authorization = None;
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).unwrap();
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            match k.to_ascii_lowercase().as_str() {
                "content-length" => len = v.trim().parse().unwrap(),
                "authorization" => authorization = Some(v.trim().to_string()),
                _ => {}
            }
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).unwrap();
    let req = Request { path, authorization, body: serde_json::from_slice(&body).unwrap_or(Value::Null) };

    let now = cur.fetch_add(1, Ordering::SeqCst) + 1;
    max.fetch_max(now, Ordering::SeqCst);
    let index = {
        let mut all = reqs.lock().unwrap();
        all.push(req.clone());
        all.len() - 1
    };
    let (status, payload) = handler(&req, index);
    cur.fetch_sub(1, Ordering::SeqCst);

    let mut stream = stream;
    let _ = write!(
        stream,
        "HTTP/1.1 {status} Stub\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    );
    let _ = stream.flush();
}

pub fn chat_reply(text: &str) -> String {
    serde_json::json!({
        "choices": [{"message": {"role": "assistant", "content": text}}],
        "usage": {"prompt_tokens": 10, "completion_tokens": 5}
    })
    .to_string()
}

/// User-prompt text of a chat-completions request body.
pub fn user_text(body: &Value) -> String {
    body.pointer("/messages/1/content/2/text").and_then(Value::as_str).unwrap_or_default().to_string()
}

/// Sets a uniquely named env var holding an API key and returns its name.
pub fn key_env(tag: &str) -> String {
    let name = format!("ADREASON_TEST_KEY_{}", tag.to_uppercase());
    std::env::set_var(&name, "sk-test");
    name
}
