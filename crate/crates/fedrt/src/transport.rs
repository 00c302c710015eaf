//! Message transports. Both carry serialized FLRT frames, so the in-process
//! queue exercises the same codec as TCP.

use std::io::{self, BufReader, BufWriter};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::Instant;

use crate::error::{FedError, FedResult};
use crate::wire::{deserialize_message, read_message, serialize_message, write_message, Message, WireError};

/// One end of a bidirectional message link.
pub trait Link: Send {
    fn send(&mut self, msg: &Message) -> FedResult<()>;

    /// Block for the next message, giving up at `deadline` with
    /// [`FedError::Timeout`] if one is set.
    fn recv(&mut self, deadline: Option<Instant>) -> FedResult<Message>;
}

pub struct ChannelLink {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

/// A connected pair of in-process link ends.
pub fn channel_pair() -> (ChannelLink, ChannelLink) {
    let (a_tx, a_rx) = mpsc::channel();
    let (b_tx, b_rx) = mpsc::channel();
    (ChannelLink { tx: a_tx, rx: b_rx }, ChannelLink { tx: b_tx, rx: a_rx })
}

impl ChannelLink {
    /// Push raw bytes, bypassing the encoder.
    pub fn send_raw(&mut self, frame: Vec<u8>) -> FedResult<()> {
        self.tx.send(frame).map_err(|_| FedError::Disconnected)
    }
}

impl Link for ChannelLink {
    fn send(&mut self, msg: &Message) -> FedResult<()> {
        self.send_raw(serialize_message(msg)?)
    }

    fn recv(&mut self, deadline: Option<Instant>) -> FedResult<Message> {
        let frame = match deadline {
            None => self.rx.recv().map_err(|_| FedError::Disconnected)?,
            Some(d) => match self.rx.recv_timeout(d.saturating_duration_since(Instant::now())) {
                Ok(f) => f,
                Err(RecvTimeoutError::Timeout) => return Err(FedError::Timeout),
                Err(RecvTimeoutError::Disconnected) => return Err(FedError::Disconnected),
            },
        };
        Ok(deserialize_message(&frame)?)
    }
}

pub struct TcpLink {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl TcpLink {
    pub fn new(stream: TcpStream) -> io::Result<Self> {
        stream.set_nodelay(true)?;
        Ok(TcpLink {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
        })
    }

    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Self> {
        TcpLink::new(TcpStream::connect(addr)?)
    }

    /// Accept exactly `n` connections.
    pub fn accept(listener: &TcpListener, n: usize) -> io::Result<Vec<TcpLink>> {
        (0..n).map(|_| TcpLink::new(listener.accept()?.0)).collect()
    }
}

impl Link for TcpLink {
    fn send(&mut self, msg: &Message) -> FedResult<()> {
        Ok(write_message(&mut self.writer, msg)?)
    }

    fn recv(&mut self, deadline: Option<Instant>) -> FedResult<Message> {
        let timeout = match deadline {
            None => None,
            Some(d) => {
                let left = d.saturating_duration_since(Instant::now());
                if left.is_zero() {
                    return Err(FedError::Timeout);
                }
                Some(left)
            }
        };
        self.reader.get_ref().set_read_timeout(timeout)?;
        match read_message(&mut self.reader) {
            Err(WireError::Io(e)) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                Err(FedError::Timeout)
            }
            Err(WireError::Truncated) => Err(FedError::Disconnected),
            other => Ok(other?),
        }
    }
}
