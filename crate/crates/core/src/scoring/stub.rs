//! A minimal completions server for tests and offline runs.
//!
//! Tokenization: an optional leading-whitespace token, then one token per
//! whitespace-delimited word carrying its trailing whitespace. Each word gets
//! a scripted nll, so sums over texts are known exactly.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde_json::{json, Value};

#[derive(Debug, Clone, PartialEq)]
pub enum StubMode {
    Normal,
    /// Close every connection without answering.
    DropAll,
    /// Close the first `n` connections without answering.
    DropFirst(usize),
    /// Reject prompts longer than this many characters with a 400.
    MaxPromptChars(usize),
    /// Omit the last character of the echoed tokens.
    BadCoverage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StubScript {
    /// nll in nats for words without an entry in `word_nll`.
    pub default_nll: f64,
    pub word_nll: HashMap<String, f64>,
    /// Report a null log-probability for the first token.
    pub null_first: bool,
    /// Fixed completion for generation requests. When unset, the completion
    /// is the words of the prompt's last non-empty line in reverse order,
    /// followed by a newline and filler.
    pub completion: Option<String>,
}

impl Default for StubScript {
    fn default() -> Self {
        Self {
            default_nll: 0.5,
            word_nll: HashMap::new(),
            null_first: false,
            completion: None,
        }
    }
}

impl StubScript {
    pub fn with_word(mut self, word: &str, nll: f64) -> Self {
        self.word_nll.insert(word.to_string(), nll);
        self
    }

    pub fn nll_of(&self, word: &str) -> f64 {
        self.word_nll.get(word).copied().unwrap_or(self.default_nll)
    }

    /// Sum the server would report for `text`.
    pub fn expected_total(&self, text: &str) -> f64 {
        let tokens = stub_tokens(text);
        tokens
            .iter()
            .enumerate()
            .map(|(i, t)| self.token_nll(i, t))
            .sum()
    }

    fn token_nll(&self, index: usize, token: &str) -> f64 {
        let word = token.trim();
        if word.is_empty() || (index == 0 && self.null_first) {
            0.0
        } else {
            self.nll_of(word)
        }
    }

    fn complete(&self, prompt: &str) -> String {
        if let Some(c) = &self.completion {
            return c.clone();
        }
        let last = prompt.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("");
        let words: Vec<&str> = last.split_whitespace().rev().collect();
        format!(" {}\nfiller", words.join(" "))
    }
}

fn stub_tokens(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let body_start = text.len() - text.trim_start().len();
    if body_start > 0 {
        out.push(&text[..body_start]);
    }
    let mut start = body_start;
    let mut in_space = false;
    for (i, c) in text[body_start..].char_indices() {
        let i = i + body_start;
        if c.is_whitespace() {
            in_space = true;
        } else if in_space {
            out.push(&text[start..i]);
            start = i;
            in_space = false;
        }
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

struct Shared {
    script: StubScript,
    mode: StubMode,
    requests: AtomicUsize,
    connections: AtomicUsize,
    stop: AtomicBool,
}

/// Serves `POST` requests on a loopback port until dropped.
pub struct StubServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    thread: Option<JoinHandle<()>>,
}

impl StubServer {
    pub fn start(script: StubScript, mode: StubMode) -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            script,
            mode,
            requests: AtomicUsize::new(0),
            connections: AtomicUsize::new(0),
            stop: AtomicBool::new(false),
        });
        let worker = Arc::clone(&shared);
        let thread = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if worker.stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let shared = Arc::clone(&worker);
                std::thread::spawn(move || {
                    let _ = handle(stream, &shared);
                });
            }
        });
        Ok(Self {
            addr,
            shared,
            thread: Some(thread),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}/v1/completions", self.addr)
    }

    /// Requests answered with a response (dropped connections excluded).
    pub fn requests(&self) -> usize {
        self.shared.requests.load(Ordering::SeqCst)
    }

    /// Connections accepted, including dropped ones.
    pub fn connections(&self) -> usize {
        self.shared.connections.load(Ordering::SeqCst)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn handle(stream: TcpStream, shared: &Shared) -> std::io::Result<()> {
    let n = shared.connections.fetch_add(1, Ordering::SeqCst);
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut length = 0usize;
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        let trimmed = line.trim_end();
        if trimmed.is_empty() {
            break;
        }
        if let Some((name, value)) = trimmed.split_once(':') {
            if name.eq_ignore_ascii_case("content-length") {
                length = value.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; length];
    reader.read_exact(&mut body)?;

    let drop_it = match shared.mode {
        StubMode::DropAll => true,
        StubMode::DropFirst(k) => n < k,
        _ => false,
    };
    if drop_it {
        return stream.shutdown(Shutdown::Both);
    }
    shared.requests.fetch_add(1, Ordering::SeqCst);
    let (status, payload) = match serde_json::from_slice::<Value>(&body) {
        Ok(request) => respond(&request, shared),
        Err(e) => (400, json!({"error": {"message": format!("bad json: {e}")}})),
    };
    let payload = payload.to_string();
    let reason = if status == 200 { "OK" } else { "Error" };
    let mut out = stream;
    write!(
        out,
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    )?;
    out.flush()
}

fn respond(request: &Value, shared: &Shared) -> (u16, Value) {
    let prompt = request["prompt"].as_str().unwrap_or_default();
    if let StubMode::MaxPromptChars(max) = shared.mode {
        if prompt.chars().count() > max {
            return (
                400,
                json!({"error": {"message": format!("This model's maximum context length is {max} characters")}}),
            );
        }
    }
    let max_tokens = request["max_tokens"].as_u64().unwrap_or(0);
    if max_tokens > 0 {
        let mut text = shared.script.complete(prompt);
        if let Some(stop) = request["stop"].get(0).and_then(Value::as_str) {
            if let Some(i) = text.find(stop) {
                text.truncate(i);
            }
        }
        return (200, json!({"choices": [{"text": text, "index": 0}]}));
    }
    let mut tokens: Vec<String> = stub_tokens(prompt).into_iter().map(String::from).collect();
    if shared.mode == StubMode::BadCoverage {
        if let Some(last) = tokens.last_mut() {
            last.pop();
        }
    }
    let mut offsets = Vec::with_capacity(tokens.len());
    let mut logprobs = Vec::with_capacity(tokens.len());
    let mut pos = 0;
    for (i, t) in tokens.iter().enumerate() {
        offsets.push(pos);
        pos += t.len();
        if i == 0 && shared.script.null_first {
            logprobs.push(Value::Null);
        } else {
            logprobs.push(json!(-shared.script.token_nll(i, t)));
        }
    }
    (
        200,
        json!({"choices": [{
            "text": prompt,
            "index": 0,
            "logprobs": {"tokens": tokens, "token_logprobs": logprobs, "text_offset": offsets},
        }]}),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_tile_text() {
        for text in ["", "a", "  a b\n c ", "a  b", "\n"] {
            assert_eq!(stub_tokens(text).concat(), text);
        }
        assert_eq!(stub_tokens(" a b\nc"), vec![" ", "a ", "b\n", "c"]);
    }

    #[test]
    fn expected_totals() {
        let s = StubScript::default().with_word("b", 1.25);
        assert_eq!(s.expected_total("a b c d"), 0.5 + 1.25 + 0.5 + 0.5);
        let n = StubScript {
            null_first: true,
            ..StubScript::default()
        };
        assert_eq!(n.expected_total("a b"), 0.5);
    }
}
