//! Line-delimited JSON protocol for external prediction processes.
//!
//! ```text
//! engine  -> {"type":"hello","version":1}
//! adapter -> {"type":"ready","provides":["probs","attention","grads"]}
//! engine  -> {"type":"predict","id":"3","embeddings":[[...],...]}
//! adapter -> {"type":"result","id":"3","probs":[...],"attention":[...],"grads":[[...]]}
//! ```
//!
//! `attention` and `grads` are optional. One request is in flight at a time.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result, TransportError};
use crate::numerics::Matrix;

pub const PROTOCOL_VERSION: u32 = 1;

const PROB_SUM_TOLERANCE: f64 = 1e-6;

/// How to launch an adapter and how long to wait for each reply.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdapterEndpoint {
    pub program: String,
    pub args: Vec<String>,
    pub protocol_version: u32,
    pub timeout_ms: u64,
}

impl AdapterEndpoint {
    pub fn new(program: impl Into<String>, args: Vec<String>, timeout_ms: u64) -> Result<Self> {
        if timeout_ms == 0 {
            return Err(Error::Parameter("adapter timeout must be positive".into()));
        }
        Ok(AdapterEndpoint {
            program: program.into(),
            args,
            protocol_version: PROTOCOL_VERSION,
            timeout_ms,
        })
    }

    /// Splits a whitespace-separated command line into program and arguments.
    pub fn from_command_line(cmd: &str, timeout_ms: u64) -> Result<Self> {
        let mut parts = cmd.split_whitespace().map(str::to_owned);
        let program = parts
            .next()
            .ok_or_else(|| Error::Parameter("empty adapter command".into()))?;
        AdapterEndpoint::new(program, parts.collect(), timeout_ms)
    }
}

#[derive(Serialize, Deserialize, Debug)]
struct Hello {
    version: u32,
}

#[derive(Serialize, Deserialize, Debug)]
struct Ready {
    provides: Vec<String>,
}

#[derive(Serialize, Deserialize, Debug)]
struct Predict {
    id: String,
    embeddings: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize, Debug)]
struct Reply {
    id: String,
    probs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    attention: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grads: Option<Vec<Vec<f64>>>,
}

fn encode<T: Serialize>(kind: &str, body: &T) -> String {
    let mut value = serde_json::to_value(body).expect("protocol message serializes");
    if let Value::Object(map) = &mut value {
        map.insert("type".into(), Value::String(kind.into()));
    }
    value.to_string()
}

/// Parses a line and checks its `type` tag before decoding the body.
fn decode<T: for<'de> Deserialize<'de>>(line: &str, expected: &str) -> std::result::Result<T, TransportError> {
    let value: Value = serde_json::from_str(line.trim())
        .map_err(|e| TransportError::Malformed(format!("{e}: {}", line.trim())))?;
    let kind = value
        .get("type")
        .and_then(Value::as_str)
        .ok_or_else(|| TransportError::Protocol(format!("message without a type: {}", line.trim())))?;
    if kind != expected {
        return Err(TransportError::Protocol(format!(
            "expected a '{expected}' message, got '{kind}'"
        )));
    }
    serde_json::from_value(value).map_err(|e| TransportError::Malformed(e.to_string()))
}

/// Probabilities plus whatever optional signals the adapter provides.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterOutput {
    pub probs: Vec<f64>,
    pub attention: Option<Vec<f64>>,
    pub grads: Option<Matrix>,
}

fn validate_output(reply: Reply, tokens: usize, dim: usize) -> std::result::Result<AdapterOutput, TransportError> {
    let bad = |m: String| Err(TransportError::Validation(m));
    if reply.probs.is_empty() {
        return bad("empty probability vector".into());
    }
    if reply
        .probs
        .iter()
        .any(|p| !p.is_finite() || !(0.0..=1.0).contains(p))
    {
        return bad(format!("probabilities out of range: {:?}", reply.probs));
    }
    let total: f64 = reply.probs.iter().sum();
    if (total - 1.0).abs() > PROB_SUM_TOLERANCE {
        return bad(format!("probabilities sum to {total}"));
    }
    if let Some(att) = &reply.attention {
        if att.len() != tokens || att.iter().any(|v| !v.is_finite()) {
            return bad(format!("attention has {} entries for {tokens} tokens", att.len()));
        }
    }
    let grads = match reply.grads {
        None => None,
        Some(rows) => {
            let m = Matrix::from_rows(&rows)
                .map_err(|e| TransportError::Validation(format!("gradients: {e}")))?;
            if m.shape() != (tokens, dim) {
                return bad(format!("gradients are {:?}, expected ({tokens}, {dim})", m.shape()));
            }
            Some(m)
        }
    };
    Ok(AdapterOutput {
        probs: reply.probs,
        attention: reply.attention,
        grads,
    })
}

enum Line {
    Text(String),
    Eof,
    Failed(std::io::Error),
}

/// A running adapter process with a completed handshake.
pub struct AdapterClient {
    endpoint: AdapterEndpoint,
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<Line>,
    provides: Vec<String>,
    next_id: u64,
}

impl AdapterClient {
    pub fn start(endpoint: &AdapterEndpoint) -> Result<Self> {
        let mut child = Command::new(&endpoint.program)
            .args(&endpoint.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::io(&endpoint.program, e))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut reader = BufReader::new(stdout);
            loop {
                let mut buf = String::new();
                let msg = match reader.read_line(&mut buf) {
                    Ok(0) => Line::Eof,
                    Ok(_) => Line::Text(buf),
                    Err(e) => Line::Failed(e),
                };
                let done = !matches!(msg, Line::Text(_));
                if tx.send(msg).is_err() || done {
                    break;
                }
            }
        });
        let mut client = AdapterClient {
            endpoint: endpoint.clone(),
            child,
            stdin,
            lines: rx,
            provides: Vec::new(),
            next_id: 0,
        };
        client.send(&encode(
            "hello",
            &Hello {
                version: endpoint.protocol_version,
            },
        ))?;
        let line = client.receive()?;
        let ready: Ready = decode(&line, "ready")?;
        if !ready.provides.iter().any(|p| p == "probs") {
            return Err(TransportError::Protocol("adapter does not provide probs".into()).into());
        }
        client.provides = ready.provides;
        Ok(client)
    }

    pub fn provides(&self, signal: &str) -> bool {
        self.provides.iter().any(|p| p == signal)
    }

    fn send(&mut self, line: &str) -> std::result::Result<(), TransportError> {
        let write = self
            .stdin
            .write_all(line.as_bytes())
            .and_then(|_| self.stdin.write_all(b"\n"))
            .and_then(|_| self.stdin.flush());
        match write {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Err(self.exit_error()),
            Err(e) => Err(e.into()),
        }
    }

    fn receive(&mut self) -> std::result::Result<String, TransportError> {
        match self
            .lines
            .recv_timeout(Duration::from_millis(self.endpoint.timeout_ms))
        {
            Ok(Line::Text(s)) => Ok(s),
            Ok(Line::Failed(e)) => Err(e.into()),
            Ok(Line::Eof) | Err(RecvTimeoutError::Disconnected) => Err(self.exit_error()),
            Err(RecvTimeoutError::Timeout) => Err(TransportError::Timeout(self.endpoint.timeout_ms)),
        }
    }

    fn exit_error(&mut self) -> TransportError {
        // give a closing process a moment to be reaped
        for _ in 0..50 {
            if let Ok(Some(status)) = self.child.try_wait() {
                return TransportError::ProcessExit(status.to_string());
            }
            thread::sleep(Duration::from_millis(2));
        }
        TransportError::ProcessExit("output closed".into())
    }

    pub fn predict(&mut self, x: &Matrix) -> Result<AdapterOutput> {
        self.next_id += 1;
        let id = self.next_id.to_string();
        let request = Predict {
            id: id.clone(),
            embeddings: x.to_rows(),
        };
        self.send(&encode("predict", &request))?;
        let line = self.receive()?;
        let reply: Reply = decode(&line, "result")?;
        if reply.id != id {
            return Err(TransportError::Protocol(format!(
                "response id {} does not match request id {id}",
                reply.id
            ))
            .into());
        }
        Ok(validate_output(reply, x.rows(), x.cols())?)
    }
}

impl Drop for AdapterClient {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub fn adapter_predict(client: &mut AdapterClient, x: &Matrix) -> Result<AdapterOutput> {
    client.predict(x)
}

/// Adapter side of the protocol: answers requests from `input` on `output`
/// until end of input.
pub fn serve<R: BufRead, W: Write>(
    input: R,
    mut output: W,
    provides: &[&str],
    mut respond: impl FnMut(&Matrix) -> Result<AdapterOutput>,
) -> Result<()> {
    let io_err = |e| Error::io("<adapter stdio>", e);
    let mut lines = input.lines();
    let hello_line = match lines.next() {
        Some(line) => line.map_err(io_err)?,
        None => return Ok(()),
    };
    let hello: Hello = decode(&hello_line, "hello")?;
    if hello.version != PROTOCOL_VERSION {
        return Err(TransportError::Protocol(format!("unsupported version {}", hello.version)).into());
    }
    let ready = Ready {
        provides: provides.iter().map(|s| s.to_string()).collect(),
    };
    writeln!(output, "{}", encode("ready", &ready)).map_err(io_err)?;
    output.flush().map_err(io_err)?;
    for line in lines {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let req: Predict = decode(&line, "predict")?;
        let x = Matrix::from_rows(&req.embeddings)?;
        let out = respond(&x)?;
        let reply = Reply {
            id: req.id,
            probs: out.probs,
            attention: out.attention,
            grads: out.grads.map(|g| g.to_rows()),
        };
        writeln!(output, "{}", encode("result", &reply)).map_err(io_err)?;
        output.flush().map_err(io_err)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_distinguishes_malformed_from_protocol() {
        assert!(matches!(
            decode::<Ready>("not json", "ready"),
            Err(TransportError::Malformed(_))
        ));
        assert!(matches!(
            decode::<Ready>(r#"{"type":"result","id":"1","probs":[1.0]}"#, "ready"),
            Err(TransportError::Protocol(_))
        ));
        assert!(matches!(
            decode::<Ready>(r#"{"type":"ready"}"#, "ready"),
            Err(TransportError::Malformed(_))
        ));
        let r: Ready = decode(r#"{"type":"ready","provides":["probs"]}"#, "ready").unwrap();
        assert_eq!(r.provides, vec!["probs"]);
    }

    #[test]
    fn output_validation() {
        let reply = |probs: Vec<f64>| Reply {
            id: "1".into(),
            probs,
            attention: None,
            grads: None,
        };
        assert!(validate_output(reply(vec![0.25, 0.75]), 2, 3).is_ok());
        assert!(matches!(
            validate_output(reply(vec![0.3, 0.5]), 2, 3),
            Err(TransportError::Validation(_))
        ));
        assert!(matches!(
            validate_output(reply(vec![]), 2, 3),
            Err(TransportError::Validation(_))
        ));
        let mut r = reply(vec![1.0]);
        r.grads = Some(vec![vec![0.0; 3]]);
        assert!(matches!(validate_output(r, 2, 3), Err(TransportError::Validation(_))));
    }

    #[test]
    fn serve_round_trip_in_memory() {
        let input = concat!(
            r#"{"type":"hello","version":1}"#,
            "\n",
            r#"{"type":"predict","id":"a","embeddings":[[0.5,1.0]]}"#,
            "\n"
        );
        let mut out = Vec::new();
        serve(input.as_bytes(), &mut out, &["probs"], |_| {
            Ok(AdapterOutput {
                probs: vec![0.25, 0.75],
                attention: None,
                grads: None,
            })
        })
        .unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let ready: Ready = decode(lines[0], "ready").unwrap();
        assert_eq!(ready.provides, vec!["probs"]);
        let res: Reply = decode(lines[1], "result").unwrap();
        assert_eq!(res.id, "a");
        assert_eq!(res.probs, vec![0.25, 0.75]);
    }

    #[test]
    fn zero_timeout_rejected() {
        assert!(matches!(
            AdapterEndpoint::new("cat", vec![], 0),
            Err(Error::Parameter(_))
        ));
    }
}
