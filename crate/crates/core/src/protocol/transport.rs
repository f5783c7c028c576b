//! Message transports between the two parties.
//!
//! A transport moves whole encoded [`WireMessage`](crate::wire::WireMessage)s.
//! Stream transports need no extra framing because the header carries the
//! payload length.

use std::io::{ErrorKind, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{channel, Receiver, Sender};

use crate::error::{Error, Result};
use crate::protocol::ledger::{Party, TrafficLedger};
use crate::wire::{MessageHeader, HEADER_LEN};

/// Blocking, ordered, reliable delivery of whole messages to one peer.
pub trait Transport: Send {
    fn send(&mut self, message: &[u8]) -> Result<()>;
    fn recv(&mut self) -> Result<Vec<u8>>;
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn send(&mut self, message: &[u8]) -> Result<()> {
        (**self).send(message)
    }

    fn recv(&mut self) -> Result<Vec<u8>> {
        (**self).recv()
    }
}

impl<T: Transport + ?Sized> Transport for &mut T {
    fn send(&mut self, message: &[u8]) -> Result<()> {
        (**self).send(message)
    }

    fn recv(&mut self) -> Result<Vec<u8>> {
        (**self).recv()
    }
}

/// One end of an in-process queue pair.
pub struct InProcTransport {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

pub fn inproc_pair() -> (InProcTransport, InProcTransport) {
    let (a_tx, b_rx) = channel();
    let (b_tx, a_rx) = channel();
    (
        InProcTransport { tx: a_tx, rx: a_rx },
        InProcTransport { tx: b_tx, rx: b_rx },
    )
}

impl Transport for InProcTransport {
    fn send(&mut self, message: &[u8]) -> Result<()> {
        self.tx.send(message.to_vec()).map_err(|_| Error::Disconnected)
    }

    fn recv(&mut self) -> Result<Vec<u8>> {
        self.rx.recv().map_err(|_| Error::Disconnected)
    }
}

pub struct TcpTransport {
    stream: TcpStream,
}

impl TcpTransport {
    pub fn new(stream: TcpStream) -> Result<Self> {
        stream.set_nodelay(true)?;
        Ok(Self { stream })
    }

    pub fn connect<A: ToSocketAddrs>(addr: A) -> Result<Self> {
        Self::new(TcpStream::connect(addr)?)
    }

    /// Accepts exactly one peer.
    pub fn accept(listener: &TcpListener) -> Result<Self> {
        let (stream, peer) = listener.accept()?;
        log::info!("accepted peer {peer}");
        Self::new(stream)
    }
}

fn read_exact_or_disconnect(stream: &mut TcpStream, buf: &mut [u8]) -> Result<()> {
    stream.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof | ErrorKind::ConnectionReset | ErrorKind::BrokenPipe => {
            Error::Disconnected
        }
        _ => Error::Transport(e),
    })
}

impl Transport for TcpTransport {
    fn send(&mut self, message: &[u8]) -> Result<()> {
        self.stream.write_all(message).map_err(|e| match e.kind() {
            ErrorKind::ConnectionReset | ErrorKind::BrokenPipe => Error::Disconnected,
            _ => Error::Transport(e),
        })
    }

    fn recv(&mut self) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; HEADER_LEN];
        read_exact_or_disconnect(&mut self.stream, &mut buf)?;
        let header = MessageHeader::parse(&buf)?;
        buf.resize(HEADER_LEN + header.payload_len as usize, 0);
        read_exact_or_disconnect(&mut self.stream, &mut buf[HEADER_LEN..])?;
        Ok(buf)
    }
}

/// Connected pair of TCP transports over an ephemeral loopback port.
pub fn tcp_loopback_pair() -> Result<(TcpTransport, TcpTransport)> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let client = TcpStream::connect(addr)?;
    let (server, _) = listener.accept()?;
    Ok((TcpTransport::new(client)?, TcpTransport::new(server)?))
}

/// Which ledger a metered transport currently charges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bucket {
    Training,
    Evaluation,
}

/// Transport wrapper that accounts every message it sends or receives.
pub struct Metered<T> {
    inner: T,
    party: Party,
    bucket: Bucket,
    training: TrafficLedger,
    evaluation: TrafficLedger,
}

impl<T: Transport> Metered<T> {
    pub fn new(inner: T, party: Party) -> Self {
        Self {
            inner,
            party,
            bucket: Bucket::Training,
            training: TrafficLedger::default(),
            evaluation: TrafficLedger::default(),
        }
    }

    pub fn set_bucket(&mut self, bucket: Bucket) {
        self.bucket = bucket;
    }

    pub fn training_ledger(&self) -> &TrafficLedger {
        &self.training
    }

    pub fn evaluation_ledger(&self) -> &TrafficLedger {
        &self.evaluation
    }

    fn charge(&mut self, sender: Party, message: &[u8]) -> Result<()> {
        let header = MessageHeader::parse(message)?;
        let ledger = match self.bucket {
            Bucket::Training => &mut self.training,
            Bucket::Evaluation => &mut self.evaluation,
        };
        ledger.record(sender, header.msg_type, message.len() - HEADER_LEN);
        Ok(())
    }
}

impl<T: Transport> Transport for Metered<T> {
    fn send(&mut self, message: &[u8]) -> Result<()> {
        self.inner.send(message)?;
        self.charge(self.party, message)
    }

    fn recv(&mut self) -> Result<Vec<u8>> {
        let message = self.inner.recv()?;
        self.charge(self.party.peer(), &message)?;
        Ok(message)
    }
}
