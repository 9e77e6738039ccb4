//! Operator service.
//!
//! One structured message per line over plain TCP. A client whose first bytes
//! are an HTTP `GET` is upgraded to WebSocket and gets the same messages as
//! text frames.
//!
//! Server to client: `scene_state` at `telemetry.scene_state_rate` per
//! simulated second, `event` for every runtime event (its name under
//! `"event"`), `error` in reply to a rejected message. Client to server:
//! `prompt`, `set_object_pose`, `pause`, `resume`, `reset`.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use nalgebra::Vector3;
use serde::Deserialize;
use serde_json::{json, Value};
use thiserror::Error;
use tungstenite::{Message, WebSocket};

use super::{ClockMode, Event, Pacer, RuntimeError, Simulation};
use crate::config::Config;
use crate::geom::{EulerAngles, Pose};

const POLL: Duration = Duration::from_millis(5);
/// Upper bound on ticks advanced per lock, so commands are never starved.
const MAX_BATCH: usize = 50;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("socket: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub addr: String,
    pub seed: u64,
    /// `Virtual` plans inline (reproducible); `Realtime` plans on a worker.
    pub clock: ClockMode,
    /// Simulated seconds per wall-clock second.
    pub speed: f64,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self { addr: "127.0.0.1:8765".into(), seed: 0, clock: ClockMode::Realtime, speed: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    Prompt { text: String },
    SetObjectPose { id: String, p: [f64; 3], o: [f64; 3] },
    Pause,
    Resume,
    Reset,
}

pub fn parse_client_message(line: &str) -> Result<ClientMessage, String> {
    serde_json::from_str(line).map_err(|e| format!("malformed message: {e}"))
}

pub fn error_message(reason: &str) -> Value {
    json!({ "type": "error", "reason": reason })
}

/// `{"type":"event","t":..,"event":<name>, ..fields}`.
pub fn event_message(t: f64, event: &Event) -> Value {
    let mut v = serde_json::to_value(event).expect("events serialize");
    let map = v.as_object_mut().expect("events serialize to objects");
    let name = map.remove("type").unwrap_or(Value::Null);
    map.insert("event".into(), name);
    map.insert("type".into(), "event".into());
    map.insert("t".into(), t.into());
    v
}

struct Shared {
    cfg: Config,
    opts: ServeOptions,
    sim: Simulation,
    paused: bool,
    /// Set whenever pacing must restart from the current simulated time.
    repace: bool,
    clients: Vec<Sender<String>>,
}

impl Shared {
    fn broadcast(&mut self, msg: &Value) {
        let line = msg.to_string();
        self.clients.retain(|c| c.send(line.clone()).is_ok());
    }

    fn scene_state(&self) -> Value {
        let mut s = self.sim.scene_state();
        s["paused"] = self.paused.into();
        s
    }

    fn flush_events(&mut self) {
        for (t, e) in self.sim.drain_events() {
            self.broadcast(&event_message(t, &e));
        }
    }

    fn apply(&mut self, msg: ClientMessage) -> Result<(), String> {
        match msg {
            ClientMessage::Prompt { text } => self.sim.submit_prompt(&text)?,
            ClientMessage::SetObjectPose { id, p, o } => {
                let pose = Pose::from_euler(Vector3::from(p), EulerAngles::new(o[0], o[1], o[2]));
                self.sim.set_object_pose(&id, pose)?;
            }
            ClientMessage::Pause => self.paused = true,
            ClientMessage::Resume => {
                self.paused = false;
                self.repace = true;
            }
            ClientMessage::Reset => {
                self.sim = new_sim(&self.cfg, &self.opts).map_err(|e| e.to_string())?;
                self.repace = true;
            }
        }
        self.flush_events();
        let state = self.scene_state();
        self.broadcast(&state);
        Ok(())
    }
}

fn new_sim(cfg: &Config, opts: &ServeOptions) -> Result<Simulation, RuntimeError> {
    Simulation::new(cfg.clone(), opts.seed, opts.clock, false)
}

fn lock(shared: &Mutex<Shared>) -> MutexGuard<'_, Shared> {
    shared.lock().unwrap_or_else(|e| e.into_inner())
}

/// A running service; dropping it stops all threads.
pub struct Server {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl Server {
    /// Binds `opts.addr` and starts the paced simulation. The operator drives
    /// the task, so the configured prompt is not issued and the run has no
    /// time limit.
    pub fn start(mut cfg: Config, opts: ServeOptions) -> Result<Self, ServiceError> {
        if !(opts.speed > 0.0 && opts.speed.is_finite()) {
            return Err(RuntimeError::Setup("speed must be positive".into()).into());
        }
        cfg.task.duration = 1e9;
        let sim = new_sim(&cfg, &opts)?;
        let listener = TcpListener::bind(&opts.addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Mutex::new(Shared { cfg, opts, sim, paused: false, repace: true, clients: Vec::new() }));
        let stop = Arc::new(AtomicBool::new(false));
        let threads = vec![
            {
                let (shared, stop) = (Arc::clone(&shared), Arc::clone(&stop));
                std::thread::spawn(move || sim_loop(&shared, &stop))
            },
            {
                let stop = Arc::clone(&stop);
                std::thread::spawn(move || accept_loop(listener, shared, stop))
            },
        ];
        Ok(Self { addr, stop, threads })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the service threads exit (they only do on shutdown).
    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    pub fn shutdown(self) {}
}

impl Drop for Server {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

fn sim_loop(shared: &Mutex<Shared>, stop: &AtomicBool) {
    let mut pacer = Pacer::new(0.0, 1.0);
    let mut next_state = 0.0;
    let mut last_overrun = f64::NEG_INFINITY;
    while !stop.load(Ordering::SeqCst) {
        {
            let mut s = lock(shared);
            if s.repace {
                s.repace = false;
                pacer = Pacer::new(s.sim.time(), s.opts.speed);
                next_state = s.sim.time();
            }
            if !s.paused && !s.sim.is_finished() {
                let period = 1.0 / s.cfg.telemetry.scene_state_rate;
                let target = pacer.target();
                let mut n = 0;
                while s.sim.time() < target && n < MAX_BATCH && !s.sim.is_finished() {
                    s.sim.step();
                    n += 1;
                    s.flush_events();
                    if s.sim.time() >= next_state - 1e-9 {
                        next_state += period;
                        let state = s.scene_state();
                        s.broadcast(&state);
                    }
                }
                let lag = (target - s.sim.time()) / s.opts.speed;
                if lag > 0.05 && s.sim.time() - last_overrun > 1.0 {
                    last_overrun = s.sim.time();
                    s.sim.report_overrun(lag);
                    s.flush_events();
                }
            }
        }
        std::thread::sleep(Duration::from_millis(1));
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Mutex<Shared>>, stop: Arc<AtomicBool>) {
    let mut clients = Vec::new();
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let (shared, stop) = (Arc::clone(&shared), Arc::clone(&stop));
                clients.push(std::thread::spawn(move || {
                    let _ = serve_client(stream, &shared, &stop);
                }));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => std::thread::sleep(POLL),
            Err(_) => std::thread::sleep(POLL),
        }
        clients.retain(|c| !c.is_finished());
    }
    for c in clients {
        let _ = c.join();
    }
}

enum Conn {
    Lines { stream: TcpStream, pending: Vec<u8> },
    Ws(Box<WebSocket<TcpStream>>),
}

fn is_timeout(e: &io::Error) -> bool {
    matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut)
}

impl Conn {
    fn open(stream: TcpStream) -> io::Result<Self> {
        stream.set_nonblocking(false)?;
        stream.set_read_timeout(Some(Duration::from_millis(200)))?;
        let mut head = [0u8; 4];
        let upgrade = match stream.peek(&mut head) {
            Ok(n) => head[..n].starts_with(b"GET"),
            Err(e) if is_timeout(&e) => false,
            Err(e) => return Err(e),
        };
        if upgrade {
            stream.set_read_timeout(Some(Duration::from_secs(5)))?;
            let ws = tungstenite::accept(stream).map_err(|e| io::Error::other(e.to_string()))?;
            ws.get_ref().set_read_timeout(Some(POLL))?;
            Ok(Conn::Ws(Box::new(ws)))
        } else {
            stream.set_read_timeout(Some(POLL))?;
            Ok(Conn::Lines { stream, pending: Vec::new() })
        }
    }

    /// Complete incoming messages; `Err` once the peer is gone.
    fn poll(&mut self) -> io::Result<Vec<String>> {
        match self {
            Conn::Lines { stream, pending } => {
                let mut buf = [0u8; 4096];
                match stream.read(&mut buf) {
                    Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
                    Ok(n) => pending.extend_from_slice(&buf[..n]),
                    Err(e) if is_timeout(&e) => {}
                    Err(e) => return Err(e),
                }
                let mut out = Vec::new();
                while let Some(i) = pending.iter().position(|&b| b == b'\n') {
                    let line: Vec<u8> = pending.drain(..=i).collect();
                    let text = String::from_utf8_lossy(&line).trim().to_string();
                    if !text.is_empty() {
                        out.push(text);
                    }
                }
                Ok(out)
            }
            Conn::Ws(ws) => match ws.read() {
                Ok(Message::Text(t)) => Ok(vec![t.as_str().to_string()]),
                Ok(Message::Binary(b)) => Ok(vec![String::from_utf8_lossy(&b).into_owned()]),
                Ok(Message::Close(_)) => Err(io::ErrorKind::ConnectionAborted.into()),
                Ok(_) => Ok(vec![]),
                Err(tungstenite::Error::Io(e)) if is_timeout(&e) => Ok(vec![]),
                Err(e) => Err(io::Error::other(e.to_string())),
            },
        }
    }

    fn send(&mut self, line: &str) -> io::Result<()> {
        match self {
            Conn::Lines { stream, .. } => {
                stream.write_all(line.as_bytes())?;
                stream.write_all(b"\n")
            }
            Conn::Ws(ws) => ws.send(Message::text(line)).map_err(|e| io::Error::other(e.to_string())),
        }
    }
}

fn serve_client(stream: TcpStream, shared: &Mutex<Shared>, stop: &AtomicBool) -> io::Result<()> {
    let mut conn = Conn::open(stream)?;
    let (tx, rx): (Sender<String>, Receiver<String>) = mpsc::channel();
    let hello = {
        let mut s = lock(shared);
        s.clients.push(tx);
        s.scene_state().to_string()
    };
    conn.send(&hello)?;
    let mut last_flush = Instant::now();
    while !stop.load(Ordering::SeqCst) {
        for text in conn.poll()? {
            let reply = match parse_client_message(&text) {
                Ok(msg) => lock(shared).apply(msg).err(),
                Err(reason) => Some(reason),
            };
            if let Some(reason) = reply {
                conn.send(&error_message(&reason).to_string())?;
            }
        }
        while let Ok(line) = rx.try_recv() {
            conn.send(&line)?;
        }
        if let Conn::Ws(ws) = &mut conn {
            if last_flush.elapsed() > POLL {
                last_flush = Instant::now();
                match ws.flush() {
                    Err(tungstenite::Error::Io(e)) if is_timeout(&e) => {}
                    r => r.map_err(|e| io::Error::other(e.to_string()))?,
                }
            }
        }
    }
    Ok(())
}
