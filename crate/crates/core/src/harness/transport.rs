//! Moving protocol messages between the server driver and clients.
//!
//! Both transports push every message through the binary codec, so the
//! clients see exactly the bytes a network peer would.

use std::io::{BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};

use log::{debug, info};

use crate::client::ClientNode;
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::par::{for_each_mut, Execution};
use crate::protocol::{decode_frame, encode_frame, read_frame, write_frame, Message};

/// Messages for one client within a round, and its replies.
pub type Job = (usize, Vec<Message>);

pub trait Transport {
    /// Deliver each job's messages in order and return every reply, grouped
    /// per job in the order the jobs were given.
    fn exchange(&mut self, jobs: Vec<Job>) -> Result<Vec<Job>>;

    fn shutdown(&mut self) -> Result<()> {
        Ok(())
    }
}

fn through_codec(msg: &Message) -> Result<Message> {
    decode_frame(&encode_frame(msg))
}

/// In-process clients, driven concurrently within a round.
pub struct Loopback {
    exec: Execution,
    clients: Vec<ClientNode>,
}

impl Loopback {
    pub fn new(exec: Execution, clients: Vec<ClientNode>) -> Self {
        Self { exec, clients }
    }

    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let clients = cfg
            .local_data()?
            .into_iter()
            .enumerate()
            .map(|(id, data)| cfg.client_node(id, data))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(cfg.execution(), clients))
    }

    pub fn clients(&self) -> &[ClientNode] {
        &self.clients
    }
}

impl Transport for Loopback {
    fn exchange(&mut self, jobs: Vec<Job>) -> Result<Vec<Job>> {
        let mut work: Vec<(&mut ClientNode, Vec<Message>, Result<Vec<Message>>)> = Vec::with_capacity(jobs.len());
        let mut jobs = jobs;
        jobs.sort_by_key(|(id, _)| *id);
        let order: Vec<usize> = jobs.iter().map(|(id, _)| *id).collect();
        if order.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Contract("one job per client per exchange".into()));
        }
        let mut pending = jobs.into_iter().peekable();
        for node in self.clients.iter_mut() {
            if pending.peek().map(|(id, _)| *id) == Some(node.state.id()) {
                let (_, msgs) = pending.next().expect("peeked");
                work.push((node, msgs, Ok(Vec::new())));
            }
        }
        if let Some((id, _)) = pending.next() {
            return Err(Error::Contract(format!("no client with id {id}")));
        }
        for_each_mut(self.exec, &mut work, |(node, msgs, out)| {
            let mut replies = Vec::new();
            for msg in msgs.iter() {
                let result = through_codec(msg)
                    .and_then(|m| node.handle(&m))
                    .and_then(|reply| reply.map(|r| through_codec(&r)).transpose());
                match result {
                    Ok(Some(reply)) => replies.push(reply),
                    Ok(None) => {}
                    Err(e) => {
                        *out = Err(e);
                        return;
                    }
                }
            }
            *out = Ok(replies);
        });
        work.into_iter().map(|(node, _, out)| out.map(|r| (node.state.id(), r))).collect()
    }
}

/// How many replies a client owes for a batch of messages.
fn expected_replies(msgs: &[Message]) -> usize {
    msgs.iter().filter(|m| matches!(m, Message::Request { .. })).count()
}

struct Peer {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

/// Server end of the TCP transport: one connection per client.
pub struct TcpServer {
    peers: Vec<Peer>,
}

impl TcpServer {
    /// Accept connections until every client id in `0..num_clients` has
    /// said hello, then send each the experiment config.
    pub fn accept(listener: &TcpListener, cfg: &ExperimentConfig) -> Result<Self> {
        let mut slots: Vec<Option<Peer>> = (0..cfg.num_clients).map(|_| None).collect();
        let mut joined = 0;
        while joined < cfg.num_clients {
            let (stream, addr) = listener.accept()?;
            stream.set_nodelay(true)?;
            let mut reader = BufReader::new(stream.try_clone()?);
            let id = match read_frame(&mut reader)? {
                Message::Hello { client_id } => client_id as usize,
                other => return Err(Error::ProtocolOrder(format!("expected hello, got tag {}", other.tag()))),
            };
            if id >= cfg.num_clients || slots[id].is_some() {
                return Err(Error::ProtocolOrder(format!("client id {id} is invalid or already joined")));
            }
            debug!("client {id} joined from {addr}");
            let mut writer = BufWriter::new(stream);
            write_frame(&mut writer, &Message::Setup { config: cfg.to_json() })?;
            writer.flush()?;
            slots[id] = Some(Peer { reader, writer });
            joined += 1;
        }
        info!("all {} clients joined", cfg.num_clients);
        Ok(Self { peers: slots.into_iter().map(|p| p.expect("all joined")).collect() })
    }
}

impl Transport for TcpServer {
    fn exchange(&mut self, jobs: Vec<Job>) -> Result<Vec<Job>> {
        // Send everything first so clients work concurrently, then collect.
        for (id, msgs) in &jobs {
            let peer = self.peers.get_mut(*id).ok_or_else(|| Error::Contract(format!("no client {id}")))?;
            for msg in msgs {
                write_frame(&mut peer.writer, msg)?;
            }
            peer.writer.flush()?;
        }
        let mut out = Vec::with_capacity(jobs.len());
        for (id, msgs) in &jobs {
            let peer = &mut self.peers[*id];
            let replies = (0..expected_replies(msgs)).map(|_| read_frame(&mut peer.reader)).collect::<Result<Vec<_>>>()?;
            out.push((*id, replies));
        }
        Ok(out)
    }

    fn shutdown(&mut self) -> Result<()> {
        for peer in &mut self.peers {
            write_frame(&mut peer.writer, &Message::Shutdown)?;
            peer.writer.flush()?;
        }
        Ok(())
    }
}

/// Client end: connect, register as `id`, then serve messages until the
/// server says shutdown.
pub fn join<A: ToSocketAddrs>(addr: A, id: usize) -> Result<()> {
    let stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    write_frame(&mut writer, &Message::Hello { client_id: id as u64 })?;
    writer.flush()?;
    let cfg = match read_frame(&mut reader)? {
        Message::Setup { config } => ExperimentConfig::from_json(&config)?,
        other => return Err(Error::ProtocolOrder(format!("expected setup, got tag {}", other.tag()))),
    };
    let data = cfg
        .local_data()?
        .into_iter()
        .nth(id)
        .ok_or_else(|| Error::Config(format!("client id {id} out of range")))?;
    let mut node = cfg.client_node(id, data)?;
    loop {
        match read_frame(&mut reader)? {
            Message::Shutdown => return Ok(()),
            msg => {
                if let Some(reply) = node.handle(&msg)? {
                    write_frame(&mut writer, &reply)?;
                    writer.flush()?;
                }
            }
        }
    }
}
