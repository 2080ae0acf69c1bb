//! Frame carriers between the driver and its workers.
//!
//! Both transports move whole encoded frames; the in-process one through
//! channels, the socket one over one TCP stream per worker. Every frame a
//! worker sends lands in the driver's single inbox tagged with the worker
//! index and a generation number, so replies from a replaced worker can be
//! told apart from its successor's.

use super::wire::read_frame;
use super::worker::{serve, Link};
use std::io::{self, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, Sender};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Transport {
    /// One thread per worker, frames passed through channels.
    InProcess,
    /// One TCP stream per worker.
    Socket(SocketMode),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SocketMode {
    /// Workers run as threads of this process, connecting over loopback.
    Threads,
    /// Workers are child processes started as
    /// `program args.. --worker --env <name> --connect <addr>`.
    Processes { program: PathBuf, args: Vec<String> },
    /// Workers are started elsewhere and connect to `bind`.
    Attach { bind: SocketAddr },
}

#[derive(Debug)]
pub(crate) enum Event {
    Frame(Vec<u8>),
    Gone,
}

pub(crate) type Envelope = (usize, u64, Event);
pub(crate) type Inbox = Sender<Envelope>;

/// Driver-side handle of one worker.
pub(crate) trait Conn: Send {
    fn send(&mut self, frame: &[u8]) -> io::Result<()>;
    /// Stops the worker without waiting for it to cooperate.
    fn terminate(&mut self);
    fn is_finished(&mut self) -> bool;
    fn reap(&mut self);
}

pub(crate) trait Launcher: Send {
    fn launch(&mut self, index: usize, generation: u64, inbox: Inbox) -> Result<Box<dyn Conn>, String>;
}

pub(crate) fn launcher(
    transport: &Transport,
    env: &str,
    accept_timeout: Duration,
) -> io::Result<Box<dyn Launcher>> {
    Ok(match transport {
        Transport::InProcess => Box::new(InProcLauncher),
        Transport::Socket(mode) => {
            let bind = match mode {
                SocketMode::Attach { bind } => *bind,
                _ => SocketAddr::from(([127, 0, 0, 1], 0)),
            };
            let listener = TcpListener::bind(bind)?;
            listener.set_nonblocking(true)?;
            Box::new(TcpLauncher {
                addr: listener.local_addr()?,
                listener,
                mode: mode.clone(),
                env: env.to_string(),
                accept_timeout,
            })
        }
    })
}

struct ChannelLink {
    rx: Receiver<Vec<u8>>,
    tx: Inbox,
    index: usize,
    generation: u64,
}

impl Link for ChannelLink {
    fn recv(&mut self) -> io::Result<Option<Vec<u8>>> {
        Ok(self.rx.recv().ok())
    }

    fn send(&mut self, frame: Vec<u8>) -> io::Result<()> {
        self.tx
            .send((self.index, self.generation, Event::Frame(frame)))
            .map_err(|_| io::ErrorKind::BrokenPipe.into())
    }
}

struct InProcLauncher;

impl Launcher for InProcLauncher {
    fn launch(&mut self, index: usize, generation: u64, inbox: Inbox) -> Result<Box<dyn Conn>, String> {
        let (tx, rx) = mpsc::channel();
        let thread = std::thread::Builder::new()
            .name(format!("worker-{index}"))
            .spawn(move || {
                let gone = inbox.clone();
                let mut link = ChannelLink {
                    rx,
                    tx: inbox,
                    index,
                    generation,
                };
                let _ = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| serve(&mut link, None)));
                let _ = gone.send((index, generation, Event::Gone));
            })
            .map_err(|e| e.to_string())?;
        Ok(Box::new(InProcConn {
            tx: Some(tx),
            thread: Some(thread),
        }))
    }
}

struct InProcConn {
    tx: Option<Sender<Vec<u8>>>,
    thread: Option<JoinHandle<()>>,
}

impl Conn for InProcConn {
    fn send(&mut self, frame: &[u8]) -> io::Result<()> {
        match &self.tx {
            Some(tx) => tx.send(frame.to_vec()).map_err(|_| io::ErrorKind::BrokenPipe.into()),
            None => Err(io::ErrorKind::NotConnected.into()),
        }
    }

    fn terminate(&mut self) {
        // a thread cannot be killed; cutting its channel makes it exit as
        // soon as its current request is done, and it is then detached
        self.tx = None;
        self.thread = None;
    }

    fn is_finished(&mut self) -> bool {
        self.thread.as_ref().is_none_or(|t| t.is_finished())
    }

    fn reap(&mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

struct TcpWorkerLink {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl Link for TcpWorkerLink {
    fn recv(&mut self) -> io::Result<Option<Vec<u8>>> {
        read_frame(&mut self.reader)
    }

    fn send(&mut self, frame: Vec<u8>) -> io::Result<()> {
        self.writer.write_all(&frame)?;
        self.writer.flush()
    }
}

/// Worker entry point for the socket transport: connects to the driver at
/// `addr` and serves until CLOSE.
pub fn serve_tcp(addr: &str, expect_env: Option<&str>) -> io::Result<()> {
    let stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    let mut link = TcpWorkerLink {
        reader: BufReader::new(stream.try_clone()?),
        writer: BufWriter::new(stream),
    };
    serve(&mut link, expect_env)
}

struct TcpLauncher {
    listener: TcpListener,
    addr: SocketAddr,
    mode: SocketMode,
    env: String,
    accept_timeout: Duration,
}

enum Remote {
    Thread(Option<JoinHandle<()>>),
    Child(Child),
    External,
}

impl Launcher for TcpLauncher {
    fn launch(&mut self, index: usize, generation: u64, inbox: Inbox) -> Result<Box<dyn Conn>, String> {
        let addr = self.addr.to_string();
        let mut remote = match &self.mode {
            SocketMode::Threads => {
                let env = self.env.clone();
                let t = std::thread::Builder::new()
                    .name(format!("tcp-worker-{index}"))
                    .spawn(move || {
                        if let Err(e) = serve_tcp(&addr, Some(&env)) {
                            log_worker_exit(index, &e);
                        }
                    })
                    .map_err(|e| e.to_string())?;
                Remote::Thread(Some(t))
            }
            SocketMode::Processes { program, args } => {
                let child = Command::new(program)
                    .args(args)
                    .args(["--worker", "--env", &self.env, "--connect", &addr])
                    .stdin(Stdio::null())
                    .stdout(Stdio::null())
                    .spawn()
                    .map_err(|e| format!("cannot start {}: {e}", program.display()))?;
                Remote::Child(child)
            }
            SocketMode::Attach { .. } => Remote::External,
        };
        let deadline = Instant::now() + self.accept_timeout;
        let stream = loop {
            match self.listener.accept() {
                Ok((s, _)) => break s,
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    if let Remote::Child(c) = &mut remote {
                        if let Ok(Some(status)) = c.try_wait() {
                            return Err(format!("worker process exited early: {status}"));
                        }
                    }
                    if Instant::now() >= deadline {
                        if let Remote::Child(c) = &mut remote {
                            let _ = c.kill();
                            let _ = c.wait();
                        }
                        return Err(format!("no connection on {} within {:?}", self.addr, self.accept_timeout));
                    }
                    std::thread::sleep(Duration::from_millis(1));
                }
                Err(e) => return Err(e.to_string()),
            }
        };
        let setup = |s: &TcpStream| -> io::Result<TcpStream> {
            s.set_nonblocking(false)?;
            s.set_nodelay(true)?;
            s.try_clone()
        };
        let read_half = setup(&stream).map_err(|e| e.to_string())?;
        let reader = std::thread::Builder::new()
            .name(format!("tcp-reader-{index}"))
            .spawn(move || {
                let mut r = BufReader::new(read_half);
                while let Ok(Some(frame)) = read_frame(&mut r) {
                    if inbox.send((index, generation, Event::Frame(frame))).is_err() {
                        return;
                    }
                }
                let _ = inbox.send((index, generation, Event::Gone));
            })
            .map_err(|e| e.to_string())?;
        Ok(Box::new(TcpConn {
            stream,
            reader: Some(reader),
            remote,
        }))
    }
}

fn log_worker_exit(index: usize, e: &io::Error) {
    if !matches!(e.kind(), io::ErrorKind::ConnectionReset | io::ErrorKind::BrokenPipe | io::ErrorKind::UnexpectedEof) {
        eprintln!("worker {index}: {e}");
    }
}

struct TcpConn {
    stream: TcpStream,
    reader: Option<JoinHandle<()>>,
    remote: Remote,
}

impl Conn for TcpConn {
    fn send(&mut self, frame: &[u8]) -> io::Result<()> {
        self.stream.write_all(frame)
    }

    fn terminate(&mut self) {
        let _ = self.stream.shutdown(std::net::Shutdown::Both);
        match &mut self.remote {
            Remote::Child(c) => {
                let _ = c.kill();
                let _ = c.wait();
            }
            Remote::Thread(t) => *t = None,
            Remote::External => {}
        }
    }

    fn is_finished(&mut self) -> bool {
        match &mut self.remote {
            Remote::Thread(t) => t.as_ref().is_none_or(|t| t.is_finished()),
            Remote::Child(c) => !matches!(c.try_wait(), Ok(None)),
            Remote::External => self.reader.as_ref().is_none_or(|r| r.is_finished()),
        }
    }

    fn reap(&mut self) {
        match &mut self.remote {
            Remote::Thread(t) => {
                if let Some(t) = t.take() {
                    let _ = t.join();
                }
            }
            Remote::Child(c) => {
                let _ = c.wait();
            }
            Remote::External => {}
        }
        let _ = self.stream.shutdown(std::net::Shutdown::Both);
        if let Some(r) = self.reader.take() {
            let _ = r.join();
        }
    }
}
