//! Minimal HTTP/1.1 server for exercising the remote protocol.
#![allow(dead_code)]

pub mod protocol;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde_json::Value;

pub enum Reply {
    Json(u16, String),
    /// Sleep, then send the inner reply.
    Delay(Duration, Box<Reply>),
    /// Drop the connection without answering.
    Close,
}

pub type Handler = dyn Fn(&str, &Value) -> Reply + Send + Sync;

pub struct MockServer {
    pub url: String,
    pub requests: Arc<Mutex<Vec<(String, Value)>>>,
}

impl MockServer {
    pub fn start(handler: impl Fn(&str, &Value) -> Reply + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind");
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let handler: Arc<Handler> = Arc::new(handler);
        let log = Arc::clone(&requests);
        thread::spawn(move || {
            for stream in listener.incoming().flatten() {
                let handler = Arc::clone(&handler);
                let log = Arc::clone(&log);
                thread::spawn(move || serve(stream, handler.as_ref(), &log));
            }
        });
        Self { url, requests }
    }

    pub fn request_count(&self) -> usize {
        self.requests.lock().unwrap().len()
    }
}

fn serve(stream: TcpStream, handler: &Handler, log: &Mutex<Vec<(String, Value)>>) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut request_line = String::new();
    if reader.read_line(&mut request_line).is_err() {
        return;
    }
    let path = request_line.split_whitespace().nth(1).unwrap_or("").to_string();
    let mut length = 0;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
            break;
        }
        if let Some((name, value)) = line.split_once(':') {
            if name.eq_ignore_ascii_case("content-length") {
                length = value.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0; length];
    if reader.read_exact(&mut body).is_err() {
        return;
    }
    let body: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
    log.lock().unwrap().push((path.clone(), body.clone()));
    respond(stream, handler(&path, &body));
}

fn respond(mut stream: TcpStream, reply: Reply) {
    match reply {
        Reply::Json(status, body) => {
            let head = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                body.len()
            );
            let _ = stream.write_all(head.as_bytes());
            let _ = stream.write_all(body.as_bytes());
        }
        Reply::Delay(d, inner) => {
            thread::sleep(d);
            respond(stream, *inner);
        }
        Reply::Close => drop(stream),
    }
}

/// Answers `/v1/fill` with one fixed distribution per mask position.
pub fn uniform_fill(tokens: &'static [&'static str]) -> impl Fn(&str, &Value) -> Reply + Send + Sync {
    move |path, body| {
        if path != "/v1/fill" {
            return Reply::Json(404, r#"{"error": {"code": "not_found", "message": "no route"}}"#.into());
        }
        let n = body["mask_positions"].as_array().map_or(0, Vec::len);
        let p = 1.0 / tokens.len() as f64;
        let dist: Vec<Value> = tokens.iter().map(|t| serde_json::json!({"token": t, "p": p})).collect();
        Reply::Json(200, serde_json::json!({ "distributions": vec![dist; n] }).to_string())
    }
}
