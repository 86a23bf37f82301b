//! Exact communication accounting.
//!
//! Every protocol message is charged to one direction of one client. Values
//! are counted, then converted to bytes at the report width (4 or 8). The
//! wire format always carries 8-byte values; the report width only scales
//! the totals.
//!
//! Seeds sent with a `Request` are counted separately as `request_seeds`
//! and excluded from `total_values`: the same seeds reach every client again
//! inside its next rebuild payload, and the totals count each round's
//! seeds once through that path.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::Message;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Up,
    Down,
}

/// Values moved in one transfer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Charge {
    pub scalars: u64,
    pub seeds: u64,
    /// Coordinate indices of a sparse vector.
    pub indices: u64,
    /// One-byte quantized codes.
    pub quantized: u64,
}

impl Charge {
    pub fn scalars(n: u64) -> Self {
        Self { scalars: n, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientCounts {
    pub up_scalars: u64,
    pub up_indices: u64,
    pub up_quantized: u64,
    pub down_scalars: u64,
    pub down_seeds: u64,
    pub request_seeds: u64,
}

impl ClientCounts {
    pub fn up_values(&self) -> u64 {
        self.up_scalars + self.up_indices + self.up_quantized
    }

    pub fn down_values(&self) -> u64 {
        self.down_scalars + self.down_seeds
    }

    pub fn total_values(&self) -> u64 {
        self.up_values() + self.down_values()
    }

    pub fn bytes(&self, width: u64) -> u64 {
        (self.up_scalars + self.up_indices + self.down_scalars + self.down_seeds) * width + self.up_quantized
    }

    fn add(&mut self, other: &ClientCounts) {
        self.up_scalars += other.up_scalars;
        self.up_indices += other.up_indices;
        self.up_quantized += other.up_quantized;
        self.down_scalars += other.down_scalars;
        self.down_seeds += other.down_seeds;
        self.request_seeds += other.request_seeds;
    }
}

/// Cumulative totals over all clients at the end of a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundSnapshot {
    pub round: u64,
    pub totals: ClientCounts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommLedger {
    width: u64,
    clients: Vec<ClientCounts>,
    snapshots: Vec<RoundSnapshot>,
}

impl CommLedger {
    pub fn new(num_clients: usize, width: u64) -> Result<Self> {
        if width != 4 && width != 8 {
            return Err(Error::Config(format!("report width must be 4 or 8, got {width}")));
        }
        Ok(Self { width, clients: vec![ClientCounts::default(); num_clients], snapshots: Vec::new() })
    }

    pub fn width(&self) -> u64 {
        self.width
    }

    pub fn client(&self, id: usize) -> &ClientCounts {
        &self.clients[id]
    }

    pub fn snapshots(&self) -> &[RoundSnapshot] {
        &self.snapshots
    }

    pub fn charge(&mut self, direction: Direction, client: usize, charge: Charge) {
        let c = &mut self.clients[client];
        match direction {
            Direction::Up => {
                c.up_scalars += charge.scalars;
                c.up_indices += charge.indices;
                c.up_quantized += charge.quantized;
                // Seeds never travel uplink in any supported algorithm.
                debug_assert_eq!(charge.seeds, 0);
            }
            Direction::Down => {
                c.down_scalars += charge.scalars;
                c.down_seeds += charge.seeds;
                debug_assert_eq!(charge.indices + charge.quantized, 0);
            }
        }
    }

    /// Transport hook: charge one protocol message to `client`.
    pub fn charge_message(&mut self, client: usize, msg: &Message) {
        match msg {
            Message::Rebuild { records } => {
                let n: u64 = records.iter().map(|r| r.scalars.len() as u64).sum();
                let s: u64 = records.iter().map(|r| r.seeds.len() as u64).sum();
                self.charge(Direction::Down, client, Charge { scalars: n, seeds: s, ..Charge::default() });
            }
            Message::Request { seeds, .. } => {
                self.clients[client].request_seeds += seeds.len() as u64;
            }
            Message::Response { scalars, .. } => {
                self.charge(Direction::Up, client, Charge::scalars(scalars.len() as u64));
            }
            Message::Hello { .. } | Message::Setup { .. } | Message::Shutdown => {}
        }
    }

    pub fn totals(&self) -> ClientCounts {
        let mut t = ClientCounts::default();
        for c in &self.clients {
            t.add(c);
        }
        t
    }

    pub fn end_round(&mut self, round: u64) {
        self.snapshots.push(RoundSnapshot { round, totals: self.totals() });
    }

    pub fn report(&self) -> LedgerReport {
        let rounds = self.snapshots.len() as u64;
        let totals = self.totals();
        let per_round = |v: u64| if rounds == 0 { 0.0 } else { v as f64 / rounds as f64 };
        LedgerReport {
            width: self.width,
            rounds,
            clients: self
                .clients
                .iter()
                .enumerate()
                .map(|(id, c)| ClientReport {
                    client: id,
                    counts: *c,
                    total_values: c.total_values(),
                    bytes: c.bytes(self.width),
                })
                .collect(),
            total_values: totals.total_values(),
            total_bytes: totals.bytes(self.width),
            totals,
            up_values_per_round: per_round(totals.up_values()),
            down_values_per_round: per_round(totals.down_values()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientReport {
    pub client: usize,
    #[serde(flatten)]
    pub counts: ClientCounts,
    pub total_values: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerReport {
    pub width: u64,
    pub rounds: u64,
    pub clients: Vec<ClientReport>,
    pub totals: ClientCounts,
    pub total_values: u64,
    pub total_bytes: u64,
    pub up_values_per_round: f64,
    pub down_values_per_round: f64,
}

impl LedgerReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("client,up_scalars,up_indices,up_quantized,down_scalars,down_seeds,request_seeds,total_values,bytes\n");
        let mut row = |name: &str, c: &ClientCounts| {
            let _ = writeln!(
                out,
                "{name},{},{},{},{},{},{},{},{}",
                c.up_scalars,
                c.up_indices,
                c.up_quantized,
                c.down_scalars,
                c.down_seeds,
                c.request_seeds,
                c.total_values(),
                c.bytes(self.width)
            );
        };
        for c in &self.clients {
            row(&c.client.to_string(), &c.counts);
        }
        row("total", &self.totals);
        out
    }
}
