//! Loopback TCP transport with the same [`Network`] contract as the
//! simulated network. Frames are a 4-byte big-endian length followed by the
//! canonical message bytes. One reader thread per accepted connection feeds
//! a single channel, so the driving loop stays the only consumer and each
//! trusted core keeps a single owner.
//!
//! Not deterministic; meant for smoke tests only.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crate::types::{NodeId, Tick};

use super::{Frame, NetStats, Network};

const MAX_FRAME: usize = 16 << 20;

pub struct TcpNet {
    addrs: BTreeMap<NodeId, SocketAddr>,
    outbound: BTreeMap<(NodeId, NodeId), TcpStream>,
    rx: Receiver<(NodeId, Vec<u8>)>,
    shutdown: Arc<AtomicBool>,
    received: Arc<AtomicU64>,
    threads: Vec<JoinHandle<()>>,
    stats: NetStats,
}

impl std::fmt::Debug for TcpNet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TcpNet").field("addrs", &self.addrs).finish()
    }
}

fn read_frame(s: &mut TcpStream) -> io::Result<Vec<u8>> {
    let mut len = [0u8; 4];
    s.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "frame too large"));
    }
    let mut buf = vec![0u8; len];
    s.read_exact(&mut buf)?;
    Ok(buf)
}

fn reader(mut s: TcpStream, to: NodeId, tx: Sender<(NodeId, Vec<u8>)>, received: Arc<AtomicU64>) {
    while let Ok(buf) = read_frame(&mut s) {
        received.fetch_add(1, Ordering::SeqCst);
        if tx.send((to, buf)).is_err() {
            return;
        }
    }
}

fn acceptor(
    listener: TcpListener,
    to: NodeId,
    tx: Sender<(NodeId, Vec<u8>)>,
    shutdown: Arc<AtomicBool>,
    received: Arc<AtomicU64>,
) {
    while !shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((s, _)) => {
                let _ = s.set_nonblocking(false);
                let _ = s.set_nodelay(true);
                let (tx, received) = (tx.clone(), received.clone());
                thread::spawn(move || reader(s, to, tx, received));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                thread::sleep(Duration::from_millis(1));
            }
            Err(_) => return,
        }
    }
}

impl TcpNet {
    /// Binds one loopback listener per node.
    pub fn bind(nodes: &[NodeId]) -> io::Result<Self> {
        let (tx, rx) = mpsc::channel();
        let shutdown = Arc::new(AtomicBool::new(false));
        let received = Arc::new(AtomicU64::new(0));
        let mut addrs = BTreeMap::new();
        let mut threads = Vec::new();
        for &n in nodes {
            let l = TcpListener::bind("127.0.0.1:0")?;
            l.set_nonblocking(true)?;
            addrs.insert(n, l.local_addr()?);
            let (tx, sd, rc) = (tx.clone(), shutdown.clone(), received.clone());
            threads.push(thread::spawn(move || acceptor(l, n, tx, sd, rc)));
        }
        Ok(Self {
            addrs,
            outbound: BTreeMap::new(),
            rx,
            shutdown,
            received,
            threads,
            stats: NetStats::default(),
        })
    }

    pub fn addr(&self, n: NodeId) -> Option<SocketAddr> {
        self.addrs.get(&n).copied()
    }

    fn stream(&mut self, from: NodeId, to: NodeId) -> io::Result<&mut TcpStream> {
        if !self.outbound.contains_key(&(from, to)) {
            let addr = self
                .addrs
                .get(&to)
                .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, "unknown node"))?;
            let s = TcpStream::connect(addr)?;
            s.set_nodelay(true)?;
            self.outbound.insert((from, to), s);
        }
        Ok(self.outbound.get_mut(&(from, to)).expect("inserted above"))
    }
}

impl Network for TcpNet {
    fn send(&mut self, _now: Tick, frame: Frame) {
        self.stats.frames_sent += 1;
        self.stats.bytes_sent += frame.bytes.len() as u64;
        let mut buf = Vec::with_capacity(frame.bytes.len() + 4);
        buf.extend_from_slice(&(frame.bytes.len() as u32).to_be_bytes());
        buf.extend_from_slice(&frame.bytes);
        let ok = self
            .stream(frame.from, frame.to)
            .and_then(|s| s.write_all(&buf))
            .is_ok();
        if !ok {
            self.outbound.remove(&(frame.from, frame.to));
            self.stats.dropped += 1;
        }
    }

    fn deliver(&mut self, _now: Tick) -> Vec<Frame> {
        let mut out = Vec::new();
        while let Ok((to, bytes)) = self.rx.try_recv() {
            // The channel sender sits right after the 8-byte view.
            let from = bytes
                .get(8..12)
                .map(|b| NodeId(u32::from_le_bytes(b.try_into().expect("4 bytes"))))
                .unwrap_or(NodeId(u32::MAX));
            self.stats.frames_delivered += 1;
            out.push(Frame { from, to, bytes });
        }
        out
    }

    fn stats(&self) -> NetStats {
        self.stats
    }

    fn in_flight(&self) -> usize {
        let got = self.received.load(Ordering::SeqCst);
        let on_wire = (self.stats.frames_sent - self.stats.dropped).saturating_sub(got);
        let queued = got.saturating_sub(self.stats.frames_delivered);
        (on_wire + queued) as usize
    }

    fn pace(&self) {
        thread::sleep(Duration::from_micros(500));
    }
}

impl Drop for TcpNet {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        self.outbound.clear();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}
