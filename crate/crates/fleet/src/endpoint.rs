//! TCP operator endpoint: newline-delimited JSON in both directions.
//!
//! Each connection first receives a `hello`, then every telemetry frame.
//! Client requests are answered on the same connection with `ack` or `error`.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use crate::protocol::{ClientMessage, ServerMessage};
use crate::server::FleetServer;
use crate::telemetry::TelemetryFrame;

#[derive(Debug, Clone, PartialEq)]
pub struct Incoming {
    pub client: u64,
    pub line: String,
}

type Clients = Arc<Mutex<BTreeMap<u64, TcpStream>>>;

pub struct Endpoint {
    addr: SocketAddr,
    clients: Clients,
    rx: Receiver<Incoming>,
}

impl Endpoint {
    /// Binds and starts accepting; `hello` is sent to every new connection.
    pub fn bind(addr: impl ToSocketAddrs, hello: ServerMessage) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let clients: Clients = Arc::default();
        let (tx, rx) = mpsc::channel();
        let accepted = Arc::clone(&clients);
        let hello = hello.to_line();
        thread::spawn(move || accept_loop(listener, accepted, tx, hello));
        Ok(Self { addr, clients, rx })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn client_count(&self) -> usize {
        self.clients.lock().expect("client table").len()
    }

    /// Requests received since the last poll, in arrival order.
    pub fn poll(&self) -> Vec<Incoming> {
        self.rx.try_iter().collect()
    }

    pub fn reply(&self, client: u64, msg: &ServerMessage) {
        let mut clients = self.clients.lock().expect("client table");
        if let Some(stream) = clients.get_mut(&client) {
            if stream.write_all(msg.to_line().as_bytes()).is_err() {
                clients.remove(&client);
            }
        }
    }

    /// Sends a line to every client, dropping those that fail.
    pub fn broadcast_line(&self, line: &str) {
        let mut clients = self.clients.lock().expect("client table");
        clients.retain(|_, s| s.write_all(line.as_bytes()).is_ok());
    }

    pub fn broadcast_frame(&self, frame: &TelemetryFrame) {
        self.broadcast_line(&ServerMessage::frame_line(&frame.to_json()));
    }
}

fn accept_loop(listener: TcpListener, clients: Clients, tx: Sender<Incoming>, hello: String) {
    let next = AtomicU64::new(1);
    for stream in listener.incoming() {
        let Ok(mut stream) = stream else { continue };
        let _ = stream.set_nodelay(true);
        let Ok(reader) = stream.try_clone() else { continue };
        if stream.write_all(hello.as_bytes()).is_err() {
            continue;
        }
        let id = next.fetch_add(1, Ordering::Relaxed);
        clients.lock().expect("client table").insert(id, stream);
        let tx = tx.clone();
        let gone = Arc::clone(&clients);
        thread::spawn(move || {
            for line in BufReader::new(reader).lines() {
                let Ok(line) = line else { break };
                if line.trim().is_empty() {
                    continue;
                }
                if tx.send(Incoming { client: id, line }).is_err() {
                    break;
                }
            }
            gone.lock().expect("client table").remove(&id);
        });
    }
}

/// Parses one request line; malformed input becomes a `BadRequest` error.
pub fn parse_client_line(line: &str) -> Result<ClientMessage, ServerMessage> {
    serde_json::from_str(line).map_err(|e| {
        let request_id = serde_json::from_str::<serde_json::Value>(line)
            .ok()
            .and_then(|v| v.get("request_id")?.as_str().map(str::to_owned));
        ServerMessage::Error {
            request_id,
            code: "BadRequest".into(),
            message: e.to_string(),
        }
    })
}

/// Answers all pending requests against `server`.
pub fn handle_requests(server: &mut FleetServer, endpoint: &Endpoint) {
    for Incoming { client, line } in endpoint.poll() {
        let reply = match parse_client_line(&line) {
            Ok(msg) => server.handle_client(msg),
            Err(e) => e,
        };
        endpoint.reply(client, &reply);
    }
}

/// Live loop: requests, tick, broadcast. `pace` sleeps between ticks.
/// Stops after `max_ticks` or, for non-interactive scenarios, once settled.
pub fn serve(
    server: &mut FleetServer,
    endpoint: &Endpoint,
    max_ticks: u64,
    pace: Option<Duration>,
    mut on_frame: impl FnMut(&TelemetryFrame),
) {
    let interactive = server.scenario().file.interactive;
    for _ in 0..max_ticks {
        handle_requests(server, endpoint);
        if !interactive && server.tick_count() > 0 && server.is_settled() {
            break;
        }
        let frame = server.tick();
        endpoint.broadcast_frame(&frame);
        on_frame(&frame);
        if let Some(p) = pace {
            thread::sleep(p);
        }
    }
}

/// Re-broadcasts recorded frame lines unchanged.
pub fn serve_replay(endpoint: &Endpoint, lines: &[String], pace: Option<Duration>) {
    for line in lines {
        endpoint.broadcast_line(&ServerMessage::frame_line(line));
        if let Some(p) = pace {
            thread::sleep(p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn malformed_line_keeps_request_id() {
        let err = parse_client_line(r#"{"type":"dispatch","request_id":"q7"}"#).unwrap_err();
        match err {
            ServerMessage::Error { request_id, code, .. } => {
                assert_eq!(request_id.as_deref(), Some("q7"));
                assert_eq!(code, "BadRequest");
            }
            other => panic!("{other:?}"),
        }
        assert!(parse_client_line("not json").is_err());
    }
}
