//! Framed binary protocol between the simulator and remote clients, and the
//! session server that speaks it.
//!
//! Every message is `magic u32 | type u8 | payload length u32 | payload`,
//! little-endian throughout. Raw TCP clients send the frames back to back;
//! WebSocket clients send one frame per binary message. Both share one port:
//! the first four bytes of a connection decide which it is.

use std::collections::HashMap;
use std::fmt;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender, SyncSender, TrySendError};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::dynamics::{self, StickInput, UavParams, UavState, TICK_RATE};
use crate::evalharness::out_of_bounds;
use crate::flightlog::{EventKind, FlightLog, LogEvent};
use crate::render::{self, CameraModel, ViewOffset};
use crate::track::timing::{LapTimer, RaceEvent};
use crate::track::TrackSpec;

pub const MAGIC: u32 = 0x5541_5652;
pub const HEADER_BYTES: usize = 9;
pub const DEFAULT_PORT: u16 = 5577;
/// Upper bound on a declared payload; larger headers are rejected before
/// anything is allocated.
pub const MAX_PAYLOAD: usize = 1 << 24;
/// FRAME payload bytes before the image.
pub const FRAME_FIXED_BYTES: usize = 8 + 12 + 12 + 16 + 16 + 4 + 2;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("bad magic {0:#010x}")]
    BadMagic(u32),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("truncated input: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("declared payload length {declared} does not match {actual}")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("payload length {0} exceeds limit")]
    PayloadTooLarge(usize),
    #[error("{kind} payload of {len} bytes is malformed")]
    BadPayload { kind: &'static str, len: usize },
    #[error("invalid {0} value")]
    BadValue(&'static str),
    #[error("string is not UTF-8")]
    Utf8,
    #[error("string longer than 65535 bytes")]
    StringTooLong,
    #[error("connection closed")]
    Closed,
    #[error("cannot listen on {0}: port busy")]
    PortBusy(SocketAddr),
    #[error("pacing is fixed once a session has started")]
    PacingLocked,
    #[error("websocket: {0}")]
    WebSocket(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl WireError {
    /// True for errors caused by the bytes themselves rather than the
    /// transport.
    pub fn is_protocol(&self) -> bool {
        !matches!(self, WireError::Closed | WireError::Io(_) | WireError::WebSocket(_) | WireError::PortBusy(_))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageType {
    Hello = 1,
    Config = 2,
    Frame = 3,
    Control = 4,
    Event = 5,
    Bye = 6,
    Record = 7,
}

impl MessageType {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => Self::Hello,
            2 => Self::Config,
            3 => Self::Frame,
            4 => Self::Control,
            5 => Self::Event,
            6 => Self::Bye,
            7 => Self::Record,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum SessionRole {
    Pilot = 0,
    Controller = 1,
    Observer = 2,
}

impl SessionRole {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => Self::Pilot,
            1 => Self::Controller,
            2 => Self::Observer,
            _ => return None,
        })
    }

    /// Pilot and controller sessions may steer; only one at a time.
    pub fn can_control(self) -> bool {
        self != SessionRole::Observer
    }
}

impl fmt::Display for SessionRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SessionRole::Pilot => "pilot",
            SessionRole::Controller => "controller",
            SessionRole::Observer => "observer",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum ByeReason {
    Normal = 0,
    Busy = 1,
    Malformed = 2,
    Shutdown = 3,
}

impl ByeReason {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => Self::Normal,
            1 => Self::Busy,
            2 => Self::Malformed,
            3 => Self::Shutdown,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hello {
    pub role: SessionRole,
    /// Requested resolution; 0 accepts the server's.
    pub width: u16,
    pub height: u16,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub width: u16,
    pub height: u16,
    pub fps: u16,
    pub track: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub tick: u64,
    pub position: [f32; 3],
    pub velocity: [f32; 3],
    /// (w, x, y, z)
    pub orientation: [f32; 4],
    /// Sticks that produced this state.
    pub sticks: [f32; 4],
    pub gates_passed: u32,
    pub lap: u16,
    /// Row-major RGB.
    pub image: Vec<u8>,
}

impl Frame {
    pub fn from_state(state: &UavState, sticks: StickInput, gates_passed: u32, lap: u16, image: Vec<u8>) -> Self {
        let v = |a: &nalgebra::Vector3<f64>| [a.x as f32, a.y as f32, a.z as f32];
        let q = state.orientation.quaternion();
        Self {
            tick: state.tick,
            position: v(&state.position),
            velocity: v(&state.velocity),
            orientation: [q.w as f32, q.i as f32, q.j as f32, q.k as f32],
            sticks: sticks.to_array(),
            gates_passed,
            lap,
            image,
        }
    }

    pub fn payload_len(&self) -> usize {
        FRAME_FIXED_BYTES + self.image.len()
    }

    /// Checks the image payload against a negotiated resolution.
    pub fn check_resolution(&self, width: u16, height: u16) -> Result<(), WireError> {
        let want = width as usize * height as usize * 3;
        if self.image.len() != want {
            return Err(WireError::BadPayload { kind: "FRAME image", len: self.image.len() });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Control {
    /// Tick of the FRAME this answers.
    pub tick: u64,
    pub sticks: [f32; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    pub kind: EventKind,
    pub tick: u64,
    pub index: u32,
    /// Seconds: gate split or lap time.
    pub split: f64,
}

impl Event {
    pub fn from_log(e: &LogEvent) -> Self {
        Self { kind: e.kind, tick: e.tick as u64, index: e.index, split: e.split }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub active: bool,
    /// Log name when starting; saved log id when stopped.
    pub name: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    Hello(Hello),
    Config(Config),
    Frame(Frame),
    Control(Control),
    Event(Event),
    Bye(ByeReason),
    Record(Record),
}

impl Message {
    pub fn message_type(&self) -> MessageType {
        match self {
            Message::Hello(_) => MessageType::Hello,
            Message::Config(_) => MessageType::Config,
            Message::Frame(_) => MessageType::Frame,
            Message::Control(_) => MessageType::Control,
            Message::Event(_) => MessageType::Event,
            Message::Bye(_) => MessageType::Bye,
            Message::Record(_) => MessageType::Record,
        }
    }
}

struct Put<'a>(&'a mut Vec<u8>);

impl Put<'_> {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) -> Result<(), WireError> {
        let n = u16::try_from(s.len()).map_err(|_| WireError::StringTooLong)?;
        self.u16(n);
        self.0.extend_from_slice(s.as_bytes());
        Ok(())
    }
}

struct Take<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Take<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(WireError::Truncated { needed: n, available });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn arr<const N: usize>(&mut self) -> Result<[u8; N], WireError> {
        Ok(self.bytes(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.arr::<1>()?[0])
    }
    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.arr()?))
    }
    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.arr()?))
    }
    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.arr()?))
    }
    fn f32s<const N: usize>(&mut self) -> Result<[f32; N], WireError> {
        let mut out = [0f32; N];
        for v in &mut out {
            *v = f32::from_le_bytes(self.arr()?);
        }
        Ok(out)
    }
    fn f64(&mut self) -> Result<f64, WireError> {
        Ok(f64::from_le_bytes(self.arr()?))
    }
    fn str(&mut self) -> Result<String, WireError> {
        let n = self.u16()? as usize;
        String::from_utf8(self.bytes(n)?.to_vec()).map_err(|_| WireError::Utf8)
    }
    fn rest(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn encode(msg: &Message) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::new();
    encode_into(msg, &mut out)?;
    Ok(out)
}

/// Appends one framed message to `out`.
pub fn encode_into(msg: &Message, out: &mut Vec<u8>) -> Result<(), WireError> {
    let start = out.len();
    out.extend_from_slice(&MAGIC.to_le_bytes());
    out.push(msg.message_type() as u8);
    out.extend_from_slice(&[0; 4]);
    let body = out.len();
    let mut p = Put(out);
    match msg {
        Message::Hello(h) => {
            p.u8(h.role as u8);
            p.u16(h.width);
            p.u16(h.height);
        }
        Message::Config(c) => {
            p.u16(c.width);
            p.u16(c.height);
            p.u16(c.fps);
            p.str(&c.track)?;
        }
        Message::Frame(f) => {
            p.u64(f.tick);
            p.f32s(&f.position);
            p.f32s(&f.velocity);
            p.f32s(&f.orientation);
            p.f32s(&f.sticks);
            p.u32(f.gates_passed);
            p.u16(f.lap);
            p.0.extend_from_slice(&f.image);
        }
        Message::Control(c) => {
            p.u64(c.tick);
            p.f32s(&c.sticks);
        }
        Message::Event(e) => {
            p.u8(e.kind as u8);
            p.u64(e.tick);
            p.u32(e.index);
            p.f64(e.split);
        }
        Message::Bye(r) => p.u8(*r as u8),
        Message::Record(r) => {
            p.u8(r.active as u8);
            p.str(&r.name)?;
        }
    }
    let len = out.len() - body;
    if len > MAX_PAYLOAD {
        out.truncate(start);
        return Err(WireError::PayloadTooLarge(len));
    }
    out[body - 4..body].copy_from_slice(&(len as u32).to_le_bytes());
    Ok(())
}

/// Validates a header and returns (type, payload length).
pub fn decode_header(bytes: &[u8]) -> Result<(MessageType, usize), WireError> {
    if bytes.len() < HEADER_BYTES {
        return Err(WireError::Truncated { needed: HEADER_BYTES, available: bytes.len() });
    }
    let magic = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes"));
    if magic != MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    let ty = MessageType::from_u8(bytes[4]).ok_or(WireError::UnknownType(bytes[4]))?;
    let len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    if len > MAX_PAYLOAD {
        return Err(WireError::PayloadTooLarge(len));
    }
    Ok((ty, len))
}

/// Decodes exactly one message occupying all of `bytes`.
pub fn decode(bytes: &[u8]) -> Result<Message, WireError> {
    let (ty, len) = decode_header(bytes)?;
    let actual = bytes.len() - HEADER_BYTES;
    if actual < len {
        return Err(WireError::Truncated { needed: HEADER_BYTES + len, available: bytes.len() });
    }
    if actual > len {
        return Err(WireError::LengthMismatch { declared: len, actual });
    }
    decode_payload(ty, &bytes[HEADER_BYTES..])
}

/// Decodes the first message of a byte stream. `Ok(None)` means more bytes
/// are needed; otherwise returns the message and the bytes it used.
pub fn decode_prefix(bytes: &[u8]) -> Result<Option<(Message, usize)>, WireError> {
    if bytes.len() < HEADER_BYTES {
        // Reject a wrong magic as soon as it is visible.
        let n = bytes.len().min(4);
        if bytes[..n] != MAGIC.to_le_bytes()[..n] {
            let mut m = [0u8; 4];
            m[..n].copy_from_slice(&bytes[..n]);
            return Err(WireError::BadMagic(u32::from_le_bytes(m)));
        }
        return Ok(None);
    }
    let (ty, len) = decode_header(bytes)?;
    if bytes.len() < HEADER_BYTES + len {
        return Ok(None);
    }
    let msg = decode_payload(ty, &bytes[HEADER_BYTES..HEADER_BYTES + len])?;
    Ok(Some((msg, HEADER_BYTES + len)))
}

fn decode_payload(ty: MessageType, payload: &[u8]) -> Result<Message, WireError> {
    let len = payload.len();
    let fixed = |kind: &'static str, want: usize| {
        if len == want {
            Ok(())
        } else {
            Err(WireError::BadPayload { kind, len })
        }
    };
    let mut t = Take { buf: payload, pos: 0 };
    let msg = match ty {
        MessageType::Hello => {
            fixed("HELLO", 5)?;
            let role = SessionRole::from_u8(t.u8()?).ok_or(WireError::BadValue("role"))?;
            Message::Hello(Hello { role, width: t.u16()?, height: t.u16()? })
        }
        MessageType::Config => {
            let (width, height, fps) = (t.u16()?, t.u16()?, t.u16()?);
            Message::Config(Config { width, height, fps, track: t.str()? })
        }
        MessageType::Frame => {
            if len < FRAME_FIXED_BYTES || (len - FRAME_FIXED_BYTES) % 3 != 0 {
                return Err(WireError::BadPayload { kind: "FRAME", len });
            }
            Message::Frame(Frame {
                tick: t.u64()?,
                position: t.f32s()?,
                velocity: t.f32s()?,
                orientation: t.f32s()?,
                sticks: t.f32s()?,
                gates_passed: t.u32()?,
                lap: t.u16()?,
                image: t.bytes(len - FRAME_FIXED_BYTES)?.to_vec(),
            })
        }
        MessageType::Control => {
            fixed("CONTROL", 24)?;
            Message::Control(Control { tick: t.u64()?, sticks: t.f32s()? })
        }
        MessageType::Event => {
            fixed("EVENT", 21)?;
            let kind = EventKind::from_u8(t.u8()?).ok_or(WireError::BadValue("event kind"))?;
            Message::Event(Event { kind, tick: t.u64()?, index: t.u32()?, split: t.f64()? })
        }
        MessageType::Bye => {
            fixed("BYE", 1)?;
            Message::Bye(ByeReason::from_u8(t.u8()?).ok_or(WireError::BadValue("bye reason"))?)
        }
        MessageType::Record => {
            let active = match t.u8()? {
                0 => false,
                1 => true,
                _ => return Err(WireError::BadValue("record flag")),
            };
            Message::Record(Record { active, name: t.str()? })
        }
    };
    if t.rest() != 0 {
        return Err(WireError::BadPayload { kind: "trailing bytes", len });
    }
    Ok(msg)
}

/// Reads one framed message from a byte stream.
pub fn read_message<R: Read>(r: &mut R) -> Result<Message, WireError> {
    let mut header = [0u8; HEADER_BYTES];
    match r.read_exact(&mut header) {
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Err(WireError::Closed),
        other => other?,
    }
    let (ty, len) = decode_header(&header)?;
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => WireError::Closed,
        _ => WireError::Io(e),
    })?;
    decode_payload(ty, &payload)
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> Result<(), WireError> {
    w.write_all(&encode(msg)?)?;
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pacing {
    /// Ticks follow the wall clock at 60 Hz.
    Locked,
    /// Ticks run as fast as the loop allows; with a controller attached each
    /// tick waits for its reply.
    Fastest,
}

impl FromStr for Pacing {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "locked" => Ok(Pacing::Locked),
            "fastest" => Ok(Pacing::Fastest),
            _ => Err(format!("unknown pacing {s:?}, expected locked or fastest")),
        }
    }
}

impl fmt::Display for Pacing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pacing::Locked => "locked",
            Pacing::Fastest => "fastest",
        })
    }
}

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub listen: SocketAddr,
    pub pacing: Pacing,
    pub camera: CameraModel,
    pub params: UavParams,
    pub laps: usize,
    /// Where recorded logs are written; recording is refused without it.
    pub record_dir: Option<PathBuf>,
    /// Stop after this many ticks.
    pub max_ticks: Option<u64>,
    /// In lockstep, how long to wait for a reply before holding the last
    /// sticks for the tick.
    pub reply_timeout: Duration,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            listen: SocketAddr::from(([127, 0, 0, 1], DEFAULT_PORT)),
            pacing: Pacing::Locked,
            camera: CameraModel::default(),
            params: UavParams::default(),
            laps: 2,
            record_dir: None,
            max_ticks: None,
            reply_timeout: Duration::from_secs(5),
        }
    }
}

/// What the session did, returned when it ends.
#[derive(Clone, Debug)]
pub struct SessionSummary {
    pub ticks: u64,
    pub frames_sent: u64,
    pub final_state: UavState,
    /// Position bits of every simulated tick, for comparing runs.
    pub trajectory_hash: u64,
    pub logs: Vec<PathBuf>,
}

pub struct Server {
    listener: TcpListener,
    track: TrackSpec,
    config: ServerConfig,
}

impl Server {
    pub fn bind(track: TrackSpec, config: ServerConfig) -> Result<Self, WireError> {
        config.camera.validate().map_err(|_| WireError::BadValue("camera"))?;
        config.params.validate().map_err(|_| WireError::BadValue("params"))?;
        if track.gates.is_empty() {
            return Err(WireError::BadValue("track"));
        }
        let listener = TcpListener::bind(config.listen).map_err(|e| match e.kind() {
            io::ErrorKind::AddrInUse => WireError::PortBusy(config.listen),
            _ => WireError::Io(e),
        })?;
        Ok(Self { listener, track, config })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, WireError> {
        Ok(self.listener.local_addr()?)
    }

    pub fn set_pacing(&mut self, pacing: Pacing) {
        self.config.pacing = pacing;
    }

    pub fn start(self) -> Result<ServerHandle, WireError> {
        let addr = self.listener.local_addr()?;
        self.listener.set_nonblocking(true)?;
        let stop = Arc::new(AtomicBool::new(false));
        let (tx, rx) = mpsc::channel();
        let accept = {
            let stop = stop.clone();
            let listener = self.listener;
            thread::spawn(move || accept_loop(listener, tx, stop))
        };
        let pacing = self.config.pacing;
        let sim = {
            let stop = stop.clone();
            let session = Session::new(self.track, self.config, rx, stop);
            thread::spawn(move || session.run())
        };
        Ok(ServerHandle { addr, pacing, stop, accept: Some(accept), sim: Some(sim) })
    }
}

pub struct ServerHandle {
    addr: SocketAddr,
    pacing: Pacing,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
    sim: Option<JoinHandle<Result<SessionSummary, WireError>>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn pacing(&self) -> Pacing {
        self.pacing
    }

    /// Always refused: a running session keeps its pacing.
    pub fn set_pacing(&self, _pacing: Pacing) -> Result<(), WireError> {
        Err(WireError::PacingLocked)
    }

    pub fn is_finished(&self) -> bool {
        self.sim.as_ref().is_none_or(|h| h.is_finished())
    }

    /// Ends the session and waits for it.
    pub fn stop(mut self) -> Result<SessionSummary, WireError> {
        self.stop.store(true, Ordering::SeqCst);
        self.finish()
    }

    /// Waits for the session to end on its own (tick limit).
    pub fn join(mut self) -> Result<SessionSummary, WireError> {
        let out = self.sim.take().expect("joined once").join().map_err(|_| WireError::BadValue("session panicked"))?;
        self.stop.store(true, Ordering::SeqCst);
        if let Some(a) = self.accept.take() {
            let _ = a.join();
        }
        out
    }

    fn finish(&mut self) -> Result<SessionSummary, WireError> {
        let out = self.sim.take().expect("joined once").join().map_err(|_| WireError::BadValue("session panicked"))?;
        if let Some(a) = self.accept.take() {
            let _ = a.join();
        }
        out
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(s) = self.sim.take() {
            let _ = s.join();
        }
        if let Some(a) = self.accept.take() {
            let _ = a.join();
        }
    }
}

enum Outbound {
    Bytes(Arc<Vec<u8>>),
    Close,
}

enum Inbound {
    Join { id: u64, hello: Hello, out: SyncSender<Outbound> },
    Msg { id: u64, msg: Message },
    Malformed { id: u64 },
    Leave { id: u64 },
}

const OUTBOX: usize = 64;

fn accept_loop(listener: TcpListener, tx: Sender<Inbound>, stop: Arc<AtomicBool>) {
    let ids = Arc::new(AtomicU64::new(1));
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let tx = tx.clone();
                let id = ids.fetch_add(1, Ordering::SeqCst);
                let stop = stop.clone();
                thread::spawn(move || {
                    if let Err(e) = serve_connection(stream, id, tx, stop) {
                        log::debug!("client {id}: {e}");
                    }
                });
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(2)),
            Err(e) => {
                log::warn!("accept failed: {e}");
                thread::sleep(Duration::from_millis(20));
            }
        }
    }
}

fn serve_connection(stream: TcpStream, id: u64, tx: Sender<Inbound>, stop: Arc<AtomicBool>) -> Result<(), WireError> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(Duration::from_secs(10)))?;
    let mut probe = [0u8; 4];
    let mut seen = 0;
    while seen < 4 {
        let n = stream.peek(&mut probe)?;
        if n == 0 {
            return Err(WireError::Closed);
        }
        seen = n;
        if seen < 4 {
            thread::sleep(Duration::from_millis(1));
        }
    }
    stream.set_read_timeout(None)?;
    if &probe == b"GET " {
        serve_websocket(stream, id, tx, stop)
    } else {
        serve_raw(stream, id, tx)
    }
}

fn serve_raw(stream: TcpStream, id: u64, tx: Sender<Inbound>) -> Result<(), WireError> {
    let mut reader = stream.try_clone()?;
    let hello = match read_message(&mut reader) {
        Ok(Message::Hello(h)) => h,
        Ok(_) | Err(_) => {
            let mut w = stream;
            let _ = write_message(&mut w, &Message::Bye(ByeReason::Malformed));
            let _ = w.shutdown(Shutdown::Both);
            return Ok(());
        }
    };
    let (out_tx, out_rx) = mpsc::sync_channel(OUTBOX);
    let mut writer = stream;
    let write_thread = thread::spawn(move || {
        for item in out_rx {
            match item {
                Outbound::Bytes(b) => {
                    if writer.write_all(&b).is_err() {
                        break;
                    }
                }
                Outbound::Close => break,
            }
        }
        let _ = writer.flush();
        let _ = writer.shutdown(Shutdown::Both);
    });
    if tx.send(Inbound::Join { id, hello, out: out_tx }).is_err() {
        return Ok(());
    }
    let mut reader = io::BufReader::new(reader);
    loop {
        match read_message(&mut reader) {
            Ok(msg) => {
                if tx.send(Inbound::Msg { id, msg }).is_err() {
                    break;
                }
            }
            Err(e) if e.is_protocol() => {
                let _ = tx.send(Inbound::Malformed { id });
                break;
            }
            Err(_) => {
                let _ = tx.send(Inbound::Leave { id });
                break;
            }
        }
    }
    let _ = write_thread.join();
    Ok(())
}

fn serve_websocket(stream: TcpStream, id: u64, tx: Sender<Inbound>, stop: Arc<AtomicBool>) -> Result<(), WireError> {
    use tungstenite::Message as Ws;
    let mut ws = tungstenite::accept(stream).map_err(|e| WireError::WebSocket(e.to_string()))?;
    ws.get_mut().set_read_timeout(Some(Duration::from_millis(1)))?;
    let mut out_rx: Option<Receiver<Outbound>> = None;
    let mut closing = false;
    while !stop.load(Ordering::SeqCst) || out_rx.is_some() {
        match ws.read() {
            Ok(Ws::Binary(b)) => {
                let parsed = decode(&b);
                match (parsed, out_rx.is_some()) {
                    (Ok(Message::Hello(hello)), false) => {
                        let (otx, orx) = mpsc::sync_channel(OUTBOX);
                        out_rx = Some(orx);
                        if tx.send(Inbound::Join { id, hello, out: otx }).is_err() {
                            break;
                        }
                    }
                    (Ok(msg), true) => {
                        if tx.send(Inbound::Msg { id, msg }).is_err() {
                            break;
                        }
                    }
                    (_, joined) => {
                        if joined {
                            let _ = tx.send(Inbound::Malformed { id });
                        } else {
                            let bye = encode(&Message::Bye(ByeReason::Malformed))?;
                            let _ = ws.send(Ws::Binary(bye.into()));
                            let _ = ws.close(None);
                            let _ = ws.flush();
                            return Ok(());
                        }
                    }
                }
            }
            Ok(Ws::Close(_)) => break,
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            Err(_) => break,
        }
        if let Some(rx) = &out_rx {
            loop {
                match rx.try_recv() {
                    Ok(Outbound::Bytes(b)) => {
                        if ws.send(Ws::Binary(b.as_ref().clone().into())).is_err() {
                            closing = true;
                            break;
                        }
                    }
                    Ok(Outbound::Close) | Err(mpsc::TryRecvError::Disconnected) => {
                        closing = true;
                        break;
                    }
                    Err(mpsc::TryRecvError::Empty) => break,
                }
            }
        }
        if closing {
            let _ = ws.close(None);
            let _ = ws.flush();
            return Ok(());
        }
    }
    if out_rx.is_some() {
        let _ = tx.send(Inbound::Leave { id });
    }
    let _ = ws.close(None);
    let _ = ws.flush();
    Ok(())
}

struct Client {
    out: SyncSender<Outbound>,
}

struct Session {
    track: TrackSpec,
    config: ServerConfig,
    inbox: Receiver<Inbound>,
    stop: Arc<AtomicBool>,
    clients: HashMap<u64, Client>,
    controller: Option<u64>,
    latest: Option<Control>,
    recording: Option<(FlightLog, String)>,
    logs: Vec<PathBuf>,
    frames_sent: u64,
    /// State the next step starts from.
    now: UavState,
}

impl Session {
    fn new(track: TrackSpec, config: ServerConfig, inbox: Receiver<Inbound>, stop: Arc<AtomicBool>) -> Self {
        Self {
            track,
            config,
            inbox,
            stop,
            clients: HashMap::new(),
            controller: None,
            latest: None,
            recording: None,
            logs: Vec::new(),
            frames_sent: 0,
            now: UavState::at_rest(Default::default(), 0.0),
        }
    }

    fn run(mut self) -> Result<SessionSummary, WireError> {
        let params = self.config.params.clone();
        let mut state = dynamics::spawn(&self.track).map_err(|_| WireError::BadValue("track"))?;
        let mut timer = LapTimer::new(&self.track, self.config.laps, state.tick);
        let mut sticks = dynamics::hover_trim(&params);
        let mut ticks = 0u64;
        let mut positions = Vec::new();
        let started = Instant::now();

        while !self.stopping() {
            if self.config.max_ticks.is_some_and(|m| ticks >= m) {
                break;
            }
            self.now = state;
            self.drain();
            if self.config.pacing == Pacing::Fastest && self.controller.is_none() {
                // Nothing to race for until a controller is attached.
                self.wait(Duration::from_millis(20));
                continue;
            }

            let image = render::render_view(&self.track, &render::camera_pose(&state, &self.config.camera, ViewOffset::ZERO), &self.config.camera);
            let frame = Frame::from_state(&state, sticks, timer.gates_passed() as u32, timer.laps_done() as u16, image.pixels);
            self.broadcast(&Message::Frame(frame), true);

            match self.config.pacing {
                Pacing::Fastest => self.await_reply(state.tick),
                Pacing::Locked => {
                    let deadline = started + Duration::from_secs_f64((ticks + 1) as f64 / TICK_RATE);
                    while let Some(left) = deadline.checked_duration_since(Instant::now()) {
                        if !self.wait(left) {
                            break;
                        }
                    }
                    self.drain();
                }
            }
            if let Some(c) = &self.latest {
                sticks = StickInput::from_array(c.sticks).clamped();
            }

            let next = dynamics::step(&state, sticks, &params).map_err(|_| WireError::BadValue("state"))?;
            if let Some((log, _)) = &mut self.recording {
                log.push(&state, sticks);
            }
            for e in timer.update(&self.track, state.tick, &state.position, &next.position) {
                let le = LogEvent::from_race(&e);
                if let Some((log, _)) = &mut self.recording {
                    log.events.push(le);
                }
                self.broadcast(&Message::Event(Event::from_log(&le)), false);
                if let RaceEvent::Finish { .. } = e {
                    self.finish_recording();
                }
            }
            state = next;
            ticks += 1;
            positions.extend(state.position.iter().flat_map(|v| v.to_le_bytes()));
            if timer.finished() {
                timer = LapTimer::new(&self.track, self.config.laps, state.tick);
            }
            if state.ground_contact || out_of_bounds(&state.position) {
                let le = LogEvent { tick: state.tick as u32 - 1, kind: EventKind::Crash, index: 0, split: 0.0 };
                if let Some((log, _)) = &mut self.recording {
                    log.events.push(le);
                }
                self.broadcast(&Message::Event(Event::from_log(&le)), false);
                self.finish_recording();
                let tick = state.tick;
                state = dynamics::spawn(&self.track).map_err(|_| WireError::BadValue("track"))?;
                state.tick = tick;
                timer = LapTimer::new(&self.track, self.config.laps, tick);
                sticks = dynamics::hover_trim(&params);
                self.latest = None;
            }
        }

        self.finish_recording();
        self.broadcast(&Message::Bye(ByeReason::Shutdown), true);
        for c in self.clients.values() {
            let _ = c.out.send(Outbound::Close);
        }
        Ok(SessionSummary {
            ticks,
            frames_sent: self.frames_sent,
            final_state: state,
            trajectory_hash: crate::track::hash64(&positions),
            logs: self.logs,
        })
    }

    fn stopping(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }

    /// Handles one inbound item or times out; false on timeout.
    fn wait(&mut self, timeout: Duration) -> bool {
        match self.inbox.recv_timeout(timeout) {
            Ok(m) => {
                self.handle(m);
                true
            }
            Err(RecvTimeoutError::Timeout) => false,
            Err(RecvTimeoutError::Disconnected) => {
                thread::sleep(timeout);
                false
            }
        }
    }

    fn drain(&mut self) {
        while let Ok(m) = self.inbox.try_recv() {
            self.handle(m);
        }
    }

    /// Lockstep: blocks until the controller answers `tick`, leaves, or the
    /// reply timeout passes.
    fn await_reply(&mut self, tick: u64) {
        let deadline = Instant::now() + self.config.reply_timeout;
        while self.controller.is_some() && !self.latest.as_ref().is_some_and(|c| c.tick >= tick) {
            let Some(left) = deadline.checked_duration_since(Instant::now()) else { break };
            if self.stopping() {
                break;
            }
            self.wait(left.min(Duration::from_millis(50)));
        }
    }

    fn handle(&mut self, item: Inbound) {
        match item {
            Inbound::Join { id, hello, out } => {
                if hello.role.can_control() && self.controller.is_some() {
                    Self::send_to(&out, &Message::Bye(ByeReason::Busy), true);
                    let _ = out.send(Outbound::Close);
                    return;
                }
                let cam = &self.config.camera;
                let config = Config {
                    width: cam.width as u16,
                    height: cam.height as u16,
                    fps: TICK_RATE as u16,
                    track: self.track.name.clone(),
                };
                Self::send_to(&out, &Message::Config(config), true);
                if hello.role.can_control() {
                    self.controller = Some(id);
                    self.latest = None;
                }
                self.clients.insert(id, Client { out });
            }
            Inbound::Msg { id, msg } => {
                let is_controller = self.controller == Some(id);
                match msg {
                    Message::Control(c) if is_controller => {
                        if self.latest.as_ref().is_none_or(|l| c.tick >= l.tick) {
                            self.latest = Some(c);
                        }
                    }
                    Message::Record(r) => self.on_record(id, is_controller, r),
                    Message::Bye(_) => self.drop_client(id),
                    Message::Hello(_) => self.reject(id),
                    _ => {}
                }
            }
            Inbound::Malformed { id } => self.reject(id),
            Inbound::Leave { id } => self.drop_client(id),
        }
    }

    fn on_record(&mut self, id: u64, is_controller: bool, r: Record) {
        let reply = if !is_controller || self.config.record_dir.is_none() {
            Record { active: false, name: String::new() }
        } else if r.active {
            if self.recording.is_none() {
                let log = FlightLog::new(&self.track.name, "pilot", &self.config.params, self.now);
                self.recording = Some((log, sanitize(&r.name)));
            }
            Record { active: true, name: self.recording.as_ref().map(|(_, n)| n.clone()).unwrap_or_default() }
        } else {
            let saved = self.finish_recording();
            Record { active: false, name: saved.unwrap_or_default() }
        };
        if let Some(c) = self.clients.get(&id) {
            Self::send_to(&c.out, &Message::Record(reply), true);
        }
    }

    /// Saves the active recording, returning its file name.
    fn finish_recording(&mut self) -> Option<String> {
        let (log, name) = self.recording.take()?;
        let dir = self.config.record_dir.clone()?;
        let mut path = dir.join(format!("{name}.uavl"));
        let mut k = 1;
        while path.exists() {
            path = dir.join(format!("{name}-{k}.uavl"));
            k += 1;
        }
        match log.save(&path) {
            Ok(()) => {
                let id = path.file_name().map(|f| f.to_string_lossy().into_owned());
                self.logs.push(path);
                id
            }
            Err(e) => {
                log::warn!("saving recording failed: {e}");
                None
            }
        }
    }

    fn reject(&mut self, id: u64) {
        if let Some(c) = self.clients.get(&id) {
            Self::send_to(&c.out, &Message::Bye(ByeReason::Malformed), true);
        }
        self.drop_client(id);
    }

    fn drop_client(&mut self, id: u64) {
        if let Some(c) = self.clients.remove(&id) {
            let _ = c.out.try_send(Outbound::Close);
        }
        if self.controller == Some(id) {
            self.controller = None;
        }
    }

    fn send_to(out: &SyncSender<Outbound>, msg: &Message, reliable: bool) -> bool {
        let Ok(bytes) = encode(msg) else { return false };
        let item = Outbound::Bytes(Arc::new(bytes));
        if reliable {
            out.send(item).is_ok()
        } else {
            !matches!(out.try_send(item), Err(TrySendError::Disconnected(_)))
        }
    }

    /// Frames to observers are dropped when their queue is full; the
    /// controller always gets everything.
    fn broadcast(&mut self, msg: &Message, count_frame: bool) {
        let Ok(bytes) = encode(msg) else { return };
        let bytes = Arc::new(bytes);
        let mut gone = Vec::new();
        for (&id, c) in &self.clients {
            let reliable = self.controller == Some(id) || !matches!(msg, Message::Frame(_));
            let item = Outbound::Bytes(bytes.clone());
            let ok = if reliable {
                c.out.send(item).is_ok()
            } else {
                !matches!(c.out.try_send(item), Err(TrySendError::Disconnected(_)))
            };
            if !ok {
                gone.push(id);
            }
        }
        for id in gone {
            self.drop_client(id);
        }
        if count_frame && matches!(msg, Message::Frame(_)) {
            self.frames_sent += 1;
        }
    }
}

fn sanitize(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .take(64)
        .collect();
    if s.is_empty() {
        "demo".into()
    } else {
        s
    }
}
