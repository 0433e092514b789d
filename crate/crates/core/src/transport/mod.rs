//! Moving client updates to the server and the packed round back.

pub mod tcp;
pub mod wire;

pub use tcp::{serve, ClientConnection, ServerSetup, TcpTransport, TraceEvent};
pub use wire::{decode, encode, MessageType, WireMessage};

use crate::error::Result;
use crate::model::{ClientUpdate, ModelParams};
use crate::strategy::check_round_updates;

/// One exchange per round: every client's update goes in, and the packed
/// updates every client receives come back in client-id order.
pub trait Transport: Send {
    /// The model the server broadcast at connection time.
    fn initial_model(&self) -> &ModelParams;

    fn exchange_round(
        &mut self,
        round: u64,
        updates: Vec<ClientUpdate>,
    ) -> Result<Vec<ClientUpdate>>;

    fn finish(self: Box<Self>) -> Result<()>;
}

/// Direct hand-off inside one process.
pub struct InProcessTransport {
    n_clients: usize,
    init: ModelParams,
}

impl InProcessTransport {
    pub fn new(n_clients: usize, init: ModelParams) -> Self {
        Self { n_clients, init }
    }
}

impl Transport for InProcessTransport {
    fn initial_model(&self) -> &ModelParams {
        &self.init
    }

    fn exchange_round(
        &mut self,
        round: u64,
        updates: Vec<ClientUpdate>,
    ) -> Result<Vec<ClientUpdate>> {
        check_round_updates(round, self.n_clients, &updates)
    }

    fn finish(self: Box<Self>) -> Result<()> {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    fn update(client_id: usize, x: f64) -> ClientUpdate {
        ClientUpdate {
            client_id,
            delta: vec![x, -x, x / 3.0],
            train_size: 10 + client_id,
        }
    }

    fn setup(n: usize, rounds: u64) -> ServerSetup {
        ServerSetup {
            n_clients: n,
            rounds,
            dim: 2,
            init: ModelParams {
                weights: vec![0.5, -0.25],
                bias: 0.1,
            },
        }
    }

    #[test]
    fn in_process_orders_by_client_id() {
        let mut t = InProcessTransport::new(3, ModelParams::zeros(2));
        let out = t
            .exchange_round(0, vec![update(2, 0.3), update(1, 0.2), update(0, 0.1)])
            .unwrap();
        assert_eq!(out, vec![update(0, 0.1), update(1, 0.2), update(2, 0.3)]);
    }

    #[test]
    fn in_process_rejects_duplicates() {
        let mut t = InProcessTransport::new(2, ModelParams::zeros(2));
        let err = t
            .exchange_round(3, vec![update(0, 0.1), update(0, 0.1)])
            .unwrap_err();
        assert!(matches!(err, Error::Protocol { round: 3, .. }));
    }

    #[test]
    fn single_client_tcp_exchange() {
        let sizes = vec![10];
        let mut t = TcpTransport::start(setup(1, 1), sizes).unwrap();
        assert_eq!(t.initial_model(), &setup(1, 1).init);
        let out = t.exchange_round(0, vec![update(0, 0.7)]).unwrap();
        assert_eq!(out, vec![update(0, 0.7)]);
        t.finish_with_trace().unwrap();
    }

    #[test]
    fn tcp_collects_in_id_order_whatever_the_arrival_order() {
        let sizes: Vec<usize> = (0..4).map(|i| 10 + i).collect();
        let mut t = TcpTransport::start(setup(4, 2), sizes).unwrap();
        for round in 0..2 {
            let sent: Vec<ClientUpdate> = (0..4)
                .rev()
                .map(|i| update(i, 0.1 * i as f64 + 0.01))
                .collect();
            let out = t.exchange_round(round, sent).unwrap();
            let expected: Vec<ClientUpdate> =
                (0..4).map(|i| update(i, 0.1 * i as f64 + 0.01)).collect();
            assert_eq!(out, expected);
        }
        t.finish_with_trace().unwrap();
    }

    #[test]
    fn tcp_rounds_are_barriers() {
        let n = 3;
        let mut t = TcpTransport::start(setup(n, 3), vec![5; n]).unwrap();
        for round in 0..3 {
            t.exchange_round(round, (0..n).map(|i| update(i, 1.0)).collect())
                .unwrap();
        }
        let trace = t.finish_with_trace().unwrap();
        let mut seen_this_round = 0;
        let mut current = 0;
        for event in trace {
            match event {
                TraceEvent::Connected { .. } => {}
                TraceEvent::Received { round, .. } => {
                    assert_eq!(round, current, "update for a later round before release");
                    seen_this_round += 1;
                }
                TraceEvent::Released { round } => {
                    assert_eq!(round, current);
                    assert_eq!(seen_this_round, n, "released before every update arrived");
                    seen_this_round = 0;
                    current += 1;
                }
            }
        }
        assert_eq!(current, 3);
    }

    #[test]
    fn tcp_duplicate_update_is_a_protocol_error() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || serve(&listener, &setup(2, 1)));
        let (mut c0, _) = ClientConnection::connect(addr, 0, 2).unwrap();
        let (_c1, _) = ClientConnection::connect(addr, 1, 2).unwrap();
        c0.send_update(0, &[0.1, 0.2, 0.3]).unwrap();
        c0.send_update(0, &[0.1, 0.2, 0.3]).unwrap();
        let err = server.join().unwrap().unwrap_err();
        assert!(
            matches!(&err, Error::Protocol { round: 0, detail } if detail.contains("duplicate")),
            "{err}"
        );
    }

    #[test]
    fn lost_connection_names_the_client() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || serve(&listener, &setup(2, 1)));
        let (mut c0, _) = ClientConnection::connect(addr, 0, 2).unwrap();
        let (c1, _) = ClientConnection::connect(addr, 1, 2).unwrap();
        c0.send_update(0, &[0.0, 0.0, 0.0]).unwrap();
        drop(c1);
        let err = server.join().unwrap().unwrap_err();
        assert!(
            matches!(
                err,
                Error::Transport {
                    client_id: Some(1),
                    ..
                }
            ),
            "{err}"
        );
    }
}
