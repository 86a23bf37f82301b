//! Messages exchanged between the server and clients, and their wire codec.
//!
//! A frame is
//!
//! ```text
//! u32 LE payload length | u8 tag | payload
//! ```
//!
//! Integers in payloads are little-endian `u64`, scalars little-endian
//! IEEE-754 `f64` (bit-transparent, including `-0.0`, subnormals and NaN
//! payloads). Payload layouts, in field order:
//!
//! | tag | message    | payload                                                                  |
//! |-----|------------|--------------------------------------------------------------------------|
//! | 1   | `Rebuild`  | `count`, then per record: `round, K, P, K·P seeds, K·P scalars`          |
//! | 2   | `Request`  | `round, K, P, K·P seeds`                                                 |
//! | 3   | `Response` | `client_id, K, P, K·P scalars`                                           |
//! | 4   | `Hello`    | `client_id`                                                              |
//! | 5   | `Setup`    | `byte length`, UTF-8 JSON experiment config                              |
//! | 6   | `Shutdown` | empty                                                                    |
//!
//! Grids are row-major: all `P` entries of step 0, then step 1, and so on.
//! Tags 4–6 are session control for the TCP transport; only 1–3 carry
//! protocol traffic and are charged to the communication ledger.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::prng::SeedValue;

pub const TAG_REBUILD: u8 = 1;
pub const TAG_REQUEST: u8 = 2;
pub const TAG_RESPONSE: u8 = 3;
pub const TAG_HELLO: u8 = 4;
pub const TAG_SETUP: u8 = 5;
pub const TAG_SHUTDOWN: u8 = 6;

const HEADER_LEN: usize = 5;

/// A `K × P` array, row-major by local step.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    steps: usize,
    perturbations: usize,
    values: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(steps: usize, perturbations: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != steps * perturbations {
            return Err(Error::Contract(format!(
                "grid {steps}x{perturbations} given {} values",
                values.len()
            )));
        }
        Ok(Self { steps, perturbations, values })
    }

    pub fn filled(steps: usize, perturbations: usize, value: T) -> Self {
        Self { steps, perturbations, values: vec![value; steps * perturbations] }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn perturbations(&self) -> usize {
        self.perturbations
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    /// The `P` entries of local step `k`.
    pub fn step(&self, k: usize) -> &[T] {
        &self.values[k * self.perturbations..(k + 1) * self.perturbations]
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.steps == other.steps && self.perturbations == other.perturbations
    }
}

pub type SeedGrid = Grid<SeedValue>;
pub type ScalarGrid = Grid<f64>;

/// What the server keeps per round: the issued seeds and the averaged
/// gradient scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: u64,
    pub seeds: SeedGrid,
    pub scalars: ScalarGrid,
}

impl RoundRecord {
    pub fn new(round: u64, seeds: SeedGrid, scalars: ScalarGrid) -> Result<Self> {
        if !seeds.same_shape(&scalars) {
            return Err(Error::Contract("record seeds and scalars differ in shape".into()));
        }
        Ok(Self { round, seeds, scalars })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    /// Records for rounds `t_i .. r`, ascending.
    Rebuild { records: Vec<RoundRecord> },
    /// Run the local update of round `round` on these perturbation seeds.
    Request { round: u64, seeds: SeedGrid },
    /// The client's `K × P` local gradient scalars.
    Response { client_id: u64, scalars: ScalarGrid },
    Hello { client_id: u64 },
    Setup { config: String },
    Shutdown,
}

impl Message {
    pub fn tag(&self) -> u8 {
        match self {
            Message::Rebuild { .. } => TAG_REBUILD,
            Message::Request { .. } => TAG_REQUEST,
            Message::Response { .. } => TAG_RESPONSE,
            Message::Hello { .. } => TAG_HELLO,
            Message::Setup { .. } => TAG_SETUP,
            Message::Shutdown => TAG_SHUTDOWN,
        }
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_bits().to_le_bytes());
}

fn put_seeds(out: &mut Vec<u8>, seeds: &SeedGrid) {
    seeds.values().iter().for_each(|s| put_u64(out, s.0));
}

fn put_scalars(out: &mut Vec<u8>, scalars: &ScalarGrid) {
    scalars.values().iter().for_each(|v| put_f64(out, *v));
}

fn encode_payload(msg: &Message) -> Vec<u8> {
    let mut out = Vec::new();
    match msg {
        Message::Rebuild { records } => {
            put_u64(&mut out, records.len() as u64);
            for rec in records {
                put_u64(&mut out, rec.round);
                put_u64(&mut out, rec.seeds.steps() as u64);
                put_u64(&mut out, rec.seeds.perturbations() as u64);
                put_seeds(&mut out, &rec.seeds);
                put_scalars(&mut out, &rec.scalars);
            }
        }
        Message::Request { round, seeds } => {
            put_u64(&mut out, *round);
            put_u64(&mut out, seeds.steps() as u64);
            put_u64(&mut out, seeds.perturbations() as u64);
            put_seeds(&mut out, seeds);
        }
        Message::Response { client_id, scalars } => {
            put_u64(&mut out, *client_id);
            put_u64(&mut out, scalars.steps() as u64);
            put_u64(&mut out, scalars.perturbations() as u64);
            put_scalars(&mut out, scalars);
        }
        Message::Hello { client_id } => put_u64(&mut out, *client_id),
        Message::Setup { config } => {
            put_u64(&mut out, config.len() as u64);
            out.extend_from_slice(config.as_bytes());
        }
        Message::Shutdown => {}
    }
    out
}

pub fn encode_frame(msg: &Message) -> Vec<u8> {
    let payload = encode_payload(msg);
    let mut frame = Vec::with_capacity(HEADER_LEN + payload.len());
    frame.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    frame.push(msg.tag());
    frame.extend_from_slice(&payload);
    frame
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corruption(format!(
                "payload ends at byte {} but field needs {n} more",
                self.buf.len()
            )));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    /// `K`, `P`, rejecting shapes that cannot fit in what is left.
    fn shape(&mut self, bytes_per_entry: usize) -> Result<(usize, usize)> {
        let k = self.u64()?;
        let p = self.u64()?;
        let entries = k.checked_mul(p).and_then(|e| e.checked_mul(bytes_per_entry as u64));
        match entries {
            Some(bytes) if bytes <= self.remaining() as u64 => Ok((k as usize, p as usize)),
            _ => Err(Error::Corruption(format!("grid {k}x{p} exceeds payload"))),
        }
    }

    fn seeds(&mut self, k: usize, p: usize) -> Result<SeedGrid> {
        let values = (0..k * p).map(|_| self.u64().map(SeedValue)).collect::<Result<_>>()?;
        Grid::new(k, p, values)
    }

    fn scalars(&mut self, k: usize, p: usize) -> Result<ScalarGrid> {
        let values = (0..k * p).map(|_| self.f64()).collect::<Result<_>>()?;
        Grid::new(k, p, values)
    }
}

fn decode_payload(tag: u8, payload: &[u8]) -> Result<Message> {
    let mut cur = Cursor { buf: payload, pos: 0 };
    let msg = match tag {
        TAG_REBUILD => {
            let count = cur.u64()?;
            // Each record needs at least its 24-byte header.
            if count > (cur.remaining() / 24) as u64 {
                return Err(Error::Corruption(format!("{count} records exceed payload")));
            }
            let mut records = Vec::with_capacity(count as usize);
            for _ in 0..count {
                let round = cur.u64()?;
                let (k, p) = cur.shape(16)?;
                let seeds = cur.seeds(k, p)?;
                let scalars = cur.scalars(k, p)?;
                records.push(RoundRecord { round, seeds, scalars });
            }
            Message::Rebuild { records }
        }
        TAG_REQUEST => {
            let round = cur.u64()?;
            let (k, p) = cur.shape(8)?;
            Message::Request { round, seeds: cur.seeds(k, p)? }
        }
        TAG_RESPONSE => {
            let client_id = cur.u64()?;
            let (k, p) = cur.shape(8)?;
            Message::Response { client_id, scalars: cur.scalars(k, p)? }
        }
        TAG_HELLO => Message::Hello { client_id: cur.u64()? },
        TAG_SETUP => {
            let len = cur.u64()?;
            if len > cur.remaining() as u64 {
                return Err(Error::Corruption("setup text exceeds payload".into()));
            }
            let bytes = cur.take(len as usize)?;
            let config = String::from_utf8(bytes.to_vec()).map_err(|e| Error::Corruption(e.to_string()))?;
            Message::Setup { config }
        }
        TAG_SHUTDOWN => Message::Shutdown,
        other => return Err(Error::ProtocolVersion(other)),
    };
    if cur.remaining() != 0 {
        return Err(Error::Corruption(format!("{} trailing payload bytes", cur.remaining())));
    }
    Ok(msg)
}

fn header(bytes: &[u8]) -> Result<(usize, u8)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Framing { needed: HEADER_LEN, available: bytes.len() });
    }
    let len = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    Ok((len, bytes[4]))
}

/// Decode exactly one frame.
pub fn decode_frame(bytes: &[u8]) -> Result<Message> {
    let (len, tag) = header(bytes)?;
    if !(TAG_REBUILD..=TAG_SHUTDOWN).contains(&tag) {
        return Err(Error::ProtocolVersion(tag));
    }
    let available = bytes.len() - HEADER_LEN;
    if available < len {
        return Err(Error::Framing { needed: HEADER_LEN + len, available: bytes.len() });
    }
    if available > len {
        return Err(Error::Corruption(format!(
            "frame declares {len} payload bytes but carries {available}"
        )));
    }
    decode_payload(tag, &bytes[HEADER_LEN..])
}

/// Write one frame, returning the number of bytes written.
pub fn write_frame<W: Write>(w: &mut W, msg: &Message) -> Result<usize> {
    let frame = encode_frame(msg);
    w.write_all(&frame)?;
    w.flush()?;
    Ok(frame.len())
}

/// Read one frame from a stream.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Message> {
    let mut head = [0u8; HEADER_LEN];
    r.read_exact(&mut head)?;
    let (len, tag) = header(&head)?;
    if !(TAG_REBUILD..=TAG_SHUTDOWN).contains(&tag) {
        return Err(Error::ProtocolVersion(tag));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    decode_payload(tag, &payload)
}
