//! TCP realization of the update exchange.
//!
//! One connection per client stays open for the whole experiment. A client
//! opens with `HELLO` and receives `INIT_MODEL`. Each round it sends one
//! `UPDATE`; once the server holds all `n` updates for the round it sends
//! every client the packed updates (one `UPDATE` per sender, in client-id
//! order) followed by `ROUND_COMPLETE`. After the last round the server sends
//! `SHUTDOWN`.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc;
use std::thread::{self, JoinHandle};

use super::wire::{decode, encode, MessageType, WireMessage};
use super::Transport;
use crate::error::{Error, Result};
use crate::model::{ClientUpdate, ModelParams};

/// What the server needs to know to run an experiment.
#[derive(Debug, Clone)]
pub struct ServerSetup {
    pub n_clients: usize,
    pub rounds: u64,
    pub dim: usize,
    pub init: ModelParams,
}

/// Server-side events, in the order they happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceEvent {
    Connected {
        client_id: usize,
    },
    Received {
        round: u64,
        client_id: usize,
    },
    /// Packed updates for `round` were sent to every client.
    Released {
        round: u64,
    },
}

fn transport_err(client_id: Option<usize>, detail: impl Into<String>) -> Error {
    Error::Transport {
        client_id,
        detail: detail.into(),
    }
}

fn write_message(writer: &mut impl Write, msg: &WireMessage) -> std::io::Result<()> {
    writer.write_all(&encode(msg))
}

/// Reads one message; `Ok(None)` on a clean end of stream.
fn read_message(reader: &mut impl BufRead, dim: usize) -> Result<Option<WireMessage>> {
    let mut line = Vec::new();
    if reader.read_until(b'\n', &mut line)? == 0 {
        return Ok(None);
    }
    decode(&line, dim).map(Some)
}

enum Inbound {
    Message(WireMessage),
    Closed,
    Failed(String),
}

struct Connection {
    client_id: usize,
    writer: BufWriter<TcpStream>,
    stream: TcpStream,
}

impl Connection {
    fn send(&mut self, msg: &WireMessage) -> Result<()> {
        write_message(&mut self.writer, msg)
            .map_err(|e| transport_err(Some(self.client_id), format!("send failed: {e}")))
    }

    fn flush(&mut self) -> Result<()> {
        self.writer
            .flush()
            .map_err(|e| transport_err(Some(self.client_id), format!("send failed: {e}")))
    }
}

/// Accepts `n_clients` connections on `listener` and relays updates for
/// `setup.rounds` rounds. Returns the event trace.
pub fn serve(listener: &TcpListener, setup: &ServerSetup) -> Result<Vec<TraceEvent>> {
    let (tx, rx) = mpsc::channel::<(usize, Inbound)>();
    let mut connections: Vec<Option<Connection>> = (0..setup.n_clients).map(|_| None).collect();
    let result = relay(listener, setup, &tx, &rx, &mut connections);
    if result.is_err() {
        for conn in connections.iter().flatten() {
            let _ = conn.stream.shutdown(Shutdown::Both);
        }
    }
    result
}

fn relay(
    listener: &TcpListener,
    setup: &ServerSetup,
    tx: &mpsc::Sender<(usize, Inbound)>,
    rx: &mpsc::Receiver<(usize, Inbound)>,
    connections: &mut [Option<Connection>],
) -> Result<Vec<TraceEvent>> {
    let n = setup.n_clients;
    let dim = setup.dim;
    let mut trace = Vec::new();
    let init = setup.init.to_flat();

    for _ in 0..n {
        let (stream, peer) = listener.accept()?;
        stream.set_nodelay(true)?;
        let mut reader = BufReader::new(stream.try_clone()?);
        let hello = read_message(&mut reader, dim)?
            .ok_or_else(|| transport_err(None, format!("{peer} closed before HELLO")))?;
        let client_id = hello.client_id;
        if hello.msg_type != MessageType::Hello {
            return Err(Error::Protocol {
                round: 0,
                detail: format!("expected HELLO from {peer}, got {}", hello.msg_type),
            });
        }
        match connections.get(client_id) {
            None => {
                return Err(Error::Protocol {
                    round: 0,
                    detail: format!("HELLO from unknown client id {client_id}"),
                })
            }
            Some(Some(_)) => {
                return Err(Error::Protocol {
                    round: 0,
                    detail: format!("client {client_id} connected twice"),
                })
            }
            Some(None) => {}
        }
        let mut conn = Connection {
            client_id,
            writer: BufWriter::new(stream.try_clone()?),
            stream,
        };
        conn.send(&WireMessage::new(
            MessageType::InitModel,
            0,
            client_id,
            init.clone(),
        ))?;
        conn.flush()?;
        connections[client_id] = Some(conn);
        trace.push(TraceEvent::Connected { client_id });

        let tx = tx.clone();
        thread::spawn(move || loop {
            let event = match read_message(&mut reader, dim) {
                Ok(Some(msg)) => Inbound::Message(msg),
                Ok(None) => Inbound::Closed,
                Err(e) => Inbound::Failed(e.to_string()),
            };
            let stop = !matches!(event, Inbound::Message(_));
            if tx.send((client_id, event)).is_err() || stop {
                break;
            }
        });
    }

    for round in 0..setup.rounds {
        let mut received: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut pending = n;
        while pending > 0 {
            let (from, event) = rx
                .recv()
                .map_err(|_| transport_err(None, "all client readers stopped"))?;
            let msg = match event {
                Inbound::Message(msg) => msg,
                Inbound::Closed => {
                    return Err(transport_err(
                        Some(from),
                        format!("connection lost in round {round}"),
                    ))
                }
                Inbound::Failed(detail) => return Err(transport_err(Some(from), detail)),
            };
            let protocol = |detail: String| Error::Protocol { round, detail };
            if msg.msg_type != MessageType::Update {
                return Err(protocol(format!(
                    "client {from} sent {} while an UPDATE was expected",
                    msg.msg_type
                )));
            }
            if msg.client_id != from {
                return Err(protocol(format!(
                    "client {from} sent an UPDATE labelled client {}",
                    msg.client_id
                )));
            }
            if msg.round != round {
                return Err(protocol(format!(
                    "client {from} sent an UPDATE for round {}",
                    msg.round
                )));
            }
            if received[from].is_some() {
                return Err(protocol(format!("duplicate UPDATE from client {from}")));
            }
            received[from] = Some(msg.payload);
            pending -= 1;
            trace.push(TraceEvent::Received {
                round,
                client_id: from,
            });
        }

        let packed: Vec<WireMessage> = received
            .into_iter()
            .enumerate()
            .map(|(id, payload)| {
                WireMessage::new(
                    MessageType::Update,
                    round,
                    id,
                    payload.expect("all received"),
                )
            })
            .collect();
        for conn in connections.iter_mut().flatten() {
            for msg in &packed {
                conn.send(msg)?;
            }
            let done = WireMessage::new(MessageType::RoundComplete, round, conn.client_id, vec![]);
            conn.send(&done)?;
            conn.flush()?;
        }
        trace.push(TraceEvent::Released { round });
    }

    for conn in connections.iter_mut().flatten() {
        let bye = WireMessage::new(MessageType::Shutdown, setup.rounds, conn.client_id, vec![]);
        conn.send(&bye)?;
        conn.flush()?;
    }
    Ok(trace)
}

/// Client end of a server connection.
pub struct ClientConnection {
    client_id: usize,
    dim: usize,
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl ClientConnection {
    /// Connects, says HELLO and waits for the initial model.
    pub fn connect(
        addr: impl ToSocketAddrs,
        client_id: usize,
        dim: usize,
    ) -> Result<(Self, ModelParams)> {
        let stream = TcpStream::connect(addr)
            .map_err(|e| transport_err(Some(client_id), format!("connect failed: {e}")))?;
        stream.set_nodelay(true)?;
        let mut conn = Self {
            client_id,
            dim,
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
        };
        conn.send(&WireMessage::new(MessageType::Hello, 0, client_id, vec![]))?;
        let init = conn.expect(MessageType::InitModel)?;
        Ok((conn, ModelParams::from_flat(&init.payload)?))
    }

    pub fn client_id(&self) -> usize {
        self.client_id
    }

    fn send(&mut self, msg: &WireMessage) -> Result<()> {
        write_message(&mut self.writer, msg)
            .and_then(|_| self.writer.flush())
            .map_err(|e| transport_err(Some(self.client_id), format!("send failed: {e}")))
    }

    fn recv(&mut self) -> Result<WireMessage> {
        read_message(&mut self.reader, self.dim)
            .map_err(|e| match e {
                Error::Io(io) => {
                    transport_err(Some(self.client_id), format!("receive failed: {io}"))
                }
                other => other,
            })?
            .ok_or_else(|| transport_err(Some(self.client_id), "server closed the connection"))
    }

    fn expect(&mut self, msg_type: MessageType) -> Result<WireMessage> {
        let msg = self.recv()?;
        if msg.msg_type != msg_type {
            return Err(Error::Protocol {
                round: msg.round,
                detail: format!(
                    "client {} expected {msg_type}, got {}",
                    self.client_id, msg.msg_type
                ),
            });
        }
        Ok(msg)
    }

    pub fn send_update(&mut self, round: u64, delta: &[f64]) -> Result<()> {
        self.send(&WireMessage::new(
            MessageType::Update,
            round,
            self.client_id,
            delta.to_vec(),
        ))
    }

    /// Receives the packed updates of `round` as `(sender, payload)` pairs.
    pub fn recv_packed(&mut self, round: u64) -> Result<Vec<(usize, Vec<f64>)>> {
        let mut packed = Vec::new();
        loop {
            let msg = self.recv()?;
            if msg.round != round {
                return Err(Error::Protocol {
                    round,
                    detail: format!(
                        "client {} received a message for round {}",
                        self.client_id, msg.round
                    ),
                });
            }
            match msg.msg_type {
                MessageType::Update => packed.push((msg.client_id, msg.payload)),
                MessageType::RoundComplete => return Ok(packed),
                other => {
                    return Err(Error::Protocol {
                        round,
                        detail: format!("client {} received unexpected {other}", self.client_id),
                    })
                }
            }
        }
    }

    pub fn recv_shutdown(&mut self) -> Result<()> {
        self.expect(MessageType::Shutdown).map(|_| ())
    }

    /// Raw access for tests that need to misbehave on purpose.
    pub fn send_raw(&mut self, msg: &WireMessage) -> Result<()> {
        self.send(msg)
    }
}

/// Runs a relay server on localhost in a background thread and drives all
/// client connections from the calling thread.
pub struct TcpTransport {
    clients: Vec<ClientConnection>,
    train_sizes: Vec<usize>,
    server: Option<JoinHandle<Result<Vec<TraceEvent>>>>,
    init: ModelParams,
    addr: SocketAddr,
}

impl TcpTransport {
    pub fn start(setup: ServerSetup, train_sizes: Vec<usize>) -> Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let n = setup.n_clients;
        let dim = setup.dim;
        let server = thread::spawn(move || serve(&listener, &setup));
        let mut transport = Self {
            clients: Vec::with_capacity(n),
            train_sizes,
            server: Some(server),
            init: ModelParams::zeros(dim),
            addr,
        };
        for id in 0..n {
            match ClientConnection::connect(addr, id, dim) {
                Ok((conn, init)) => {
                    transport.init = init;
                    transport.clients.push(conn);
                }
                Err(e) => return Err(transport.fail(e)),
            }
        }
        Ok(transport)
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Prefers the server's own error, which is usually more specific than
    /// what the clients observed.
    fn fail(&mut self, client_side: Error) -> Error {
        for c in &self.clients {
            let _ = c.reader.get_ref().shutdown(Shutdown::Both);
        }
        match self.server.take().map(|h| h.join()) {
            Some(Ok(Err(server_side))) => server_side,
            _ => client_side,
        }
    }

    fn try_exchange(&mut self, round: u64, updates: &[ClientUpdate]) -> Result<Vec<ClientUpdate>> {
        let n = self.clients.len();
        for u in updates {
            let conn = self
                .clients
                .get_mut(u.client_id)
                .ok_or_else(|| Error::Protocol {
                    round,
                    detail: format!("update from unknown client {}", u.client_id),
                })?;
            conn.send_update(round, &u.delta)?;
        }
        let mut view: Option<Vec<(usize, Vec<f64>)>> = None;
        for conn in &mut self.clients {
            let packed = conn.recv_packed(round)?;
            if packed.len() != n || packed.iter().enumerate().any(|(i, (id, _))| *id != i) {
                return Err(Error::Protocol {
                    round,
                    detail: format!("client {} received a malformed pack", conn.client_id()),
                });
            }
            match &view {
                None => view = Some(packed),
                Some(first) if *first != packed => {
                    return Err(Error::Protocol {
                        round,
                        detail: format!("client {} received a different pack", conn.client_id()),
                    })
                }
                Some(_) => {}
            }
        }
        Ok(view
            .unwrap_or_default()
            .into_iter()
            .map(|(client_id, delta)| ClientUpdate {
                client_id,
                delta,
                train_size: self.train_sizes[client_id],
            })
            .collect())
    }

    /// Waits for SHUTDOWN on every connection and returns the server trace.
    pub fn finish_with_trace(mut self) -> Result<Vec<TraceEvent>> {
        for i in 0..self.clients.len() {
            if let Err(e) = self.clients[i].recv_shutdown() {
                return Err(self.fail(e));
            }
        }
        match self.server.take().map(|h| h.join()) {
            Some(Ok(result)) => result,
            Some(Err(_)) => Err(transport_err(None, "server thread panicked")),
            None => Err(transport_err(None, "server already stopped")),
        }
    }
}

impl Transport for TcpTransport {
    fn initial_model(&self) -> &ModelParams {
        &self.init
    }

    fn exchange_round(
        &mut self,
        round: u64,
        updates: Vec<ClientUpdate>,
    ) -> Result<Vec<ClientUpdate>> {
        self.try_exchange(round, &updates).map_err(|e| self.fail(e))
    }

    fn finish(self: Box<Self>) -> Result<()> {
        self.finish_with_trace().map(|_| ())
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        if self.server.is_some() {
            for c in &self.clients {
                let _ = c.reader.get_ref().shutdown(Shutdown::Both);
            }
        }
    }
}
