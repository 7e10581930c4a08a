//! Peer-link transports: an in-process frame pair and a TCP stream, both
//! reliable and in-order (Reliable Connected semantics). Loopback needs no
//! link; it executes in the poster's context.

use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::time::Duration;

use parking_lot::Mutex;

use crate::error::{Error, Result};
use crate::fabric::wire::Frame;

pub(crate) enum TxHalf {
    Tcp(TcpStream),
    Pair(mpsc::Sender<Frame>),
}

pub(crate) struct LinkTx {
    inner: Mutex<TxHalf>,
}

impl LinkTx {
    pub(crate) fn new(half: TxHalf) -> LinkTx {
        LinkTx {
            inner: Mutex::new(half),
        }
    }

    pub(crate) fn send(&self, frame: &Frame) -> Result<()> {
        let mut tx = self.inner.lock();
        match &mut *tx {
            TxHalf::Tcp(stream) => frame.write_to(stream),
            TxHalf::Pair(sender) => sender
                .send(frame.clone())
                .map_err(|_| Error::Unreachable("peer link closed".into())),
        }
    }
}

pub(crate) enum RxHalf {
    Tcp(TcpStream),
    Pair(mpsc::Receiver<Frame>),
}

pub(crate) enum RecvOutcome {
    Frame(Frame),
    TimedOut,
    Closed,
}

impl RxHalf {
    /// One receive attempt. TCP blocks until a frame, EOF, or the socket
    /// is shut down; the pair half polls with a timeout so the stop flag
    /// stays responsive.
    pub(crate) fn recv(&mut self, stop: &AtomicBool) -> RecvOutcome {
        match self {
            RxHalf::Tcp(stream) => match Frame::read_from(stream) {
                Ok(Some(f)) => RecvOutcome::Frame(f),
                Ok(None) => RecvOutcome::Closed,
                Err(_) => RecvOutcome::Closed,
            },
            RxHalf::Pair(rx) => {
                if stop.load(Ordering::Acquire) {
                    return RecvOutcome::Closed;
                }
                match rx.recv_timeout(Duration::from_millis(5)) {
                    Ok(f) => RecvOutcome::Frame(f),
                    Err(mpsc::RecvTimeoutError::Timeout) => RecvOutcome::TimedOut,
                    Err(mpsc::RecvTimeoutError::Disconnected) => RecvOutcome::Closed,
                }
            }
        }
    }
}

pub(crate) struct LinkHalves {
    pub tx: TxHalf,
    pub rx: RxHalf,
    /// Clone kept for unblocking the progress thread at teardown.
    pub tcp_for_shutdown: Option<TcpStream>,
}

pub(crate) fn tcp_listen(addr: impl ToSocketAddrs) -> Result<LinkHalves> {
    let listener = TcpListener::bind(addr)?;
    let (stream, _peer) = listener.accept()?;
    stream.set_nodelay(true).ok();
    split_tcp(stream)
}

pub(crate) fn tcp_connect(addr: impl ToSocketAddrs + std::fmt::Debug) -> Result<LinkHalves> {
    let stream = TcpStream::connect(&addr)
        .map_err(|e| Error::Unreachable(format!("connect {addr:?}: {e}")))?;
    stream.set_nodelay(true).ok();
    split_tcp(stream)
}

fn split_tcp(stream: TcpStream) -> Result<LinkHalves> {
    let rx = stream.try_clone()?;
    let shutdown_handle = stream.try_clone()?;
    Ok(LinkHalves {
        tx: TxHalf::Tcp(stream),
        rx: RxHalf::Tcp(rx),
        tcp_for_shutdown: Some(shutdown_handle),
    })
}

pub(crate) fn shutdown_tcp(stream: &TcpStream) {
    let _ = stream.shutdown(Shutdown::Both);
}

/// Connected in-process pair.
pub(crate) fn pair() -> (LinkHalves, LinkHalves) {
    let (tx_a, rx_b) = mpsc::channel();
    let (tx_b, rx_a) = mpsc::channel();
    (
        LinkHalves {
            tx: TxHalf::Pair(tx_a),
            rx: RxHalf::Pair(rx_a),
            tcp_for_shutdown: None,
        },
        LinkHalves {
            tx: TxHalf::Pair(tx_b),
            rx: RxHalf::Pair(rx_b),
            tcp_for_shutdown: None,
        },
    )
}
