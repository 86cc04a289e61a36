//! Framed TCP access to a [`Broker`].
//!
//! A frame is a 4-byte big-endian length followed by the body. The body is a
//! canonical JSON command or response; with a transport key configured it is
//! instead the sealed form of that JSON (see [`crate::store::seal`]).
//!
//! Commands: `CREATE_TOPIC`, `APPEND`, `POLL`, `COMMIT`. Keys and payloads
//! travel base64-encoded.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::{Broker, BusConsumer, BusError, BusProducer, LogRecord, PollResult, Result, Topic};
use crate::canonical::to_canonical_vec;
use crate::domain::Timestamp;
use crate::store::seal::{Sealer, SealedPayload};

/// Frames larger than this are refused.
pub const MAX_FRAME: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Request {
    CreateTopic { name: String, partitions: u32, retention: u64 },
    DescribeTopic { name: String },
    Append { topic: String, key: String, payload: String },
    Poll { topic: String, group: String, max_records: usize, timeout_ms: u64, partition: Option<u32> },
    Commit { group: String, topic: String, partition: u32, offset: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRecord {
    pub partition: u32,
    pub offset: u64,
    pub key: String,
    pub payload: String,
    pub appended_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum Response {
    Ok(OkBody),
    Error { kind: String, message: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OkBody {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub topic: Option<Topic>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub partition: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub offset: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub records: Option<Vec<WireRecord>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gaps: Option<u64>,
}

fn error_kind(err: &BusError) -> &'static str {
    match err {
        BusError::DuplicateTopic(_) => "duplicate_topic",
        BusError::InvalidPartitions => "invalid_partitions",
        BusError::InvalidRetention => "invalid_retention",
        BusError::UnknownTopic(_) => "unknown_topic",
        BusError::UnknownPartition { .. } => "unknown_partition",
        BusError::OffsetBeyondHighWatermark { .. } => "offset_beyond_high_watermark",
        BusError::Unavailable(_) => "unavailable",
        BusError::Protocol(_) => "protocol",
        BusError::Io(_) => "io",
    }
}

fn decode_b64(s: &str) -> Result<Vec<u8>> {
    B64.decode(s).map_err(|e| BusError::Protocol(format!("bad base64: {e}")))
}

pub fn dispatch(broker: &Broker, request: Request) -> Response {
    let outcome = (|| -> Result<Response> {
        Ok(match request {
            Request::CreateTopic { name, partitions, retention } => {
                let topic = broker.create_topic(&name, partitions, retention)?;
                Response::Ok(OkBody { topic: Some(topic), ..Default::default() })
            }
            Request::DescribeTopic { name } => {
                Response::Ok(OkBody { topic: Some(broker.topic(&name)?), ..Default::default() })
            }
            Request::Append { topic, key, payload } => {
                let (p, o) = broker.append(&topic, &decode_b64(&key)?, &decode_b64(&payload)?)?;
                Response::Ok(OkBody { partition: Some(p), offset: Some(o), ..Default::default() })
            }
            Request::Poll { topic, group, max_records, timeout_ms, partition } => {
                let timeout = Duration::from_millis(timeout_ms.min(30_000));
                let res = match partition {
                    Some(p) => broker.poll_partition(&topic, &group, p, max_records, timeout)?,
                    None => broker.poll(&topic, &group, max_records, timeout)?,
                };
                let records = res
                    .records
                    .into_iter()
                    .map(|r| WireRecord {
                        partition: r.partition,
                        offset: r.offset,
                        key: B64.encode(&r.key),
                        payload: B64.encode(&r.payload),
                        appended_at: r.appended_at,
                    })
                    .collect();
                Response::Ok(OkBody { records: Some(records), gaps: Some(res.gaps), ..Default::default() })
            }
            Request::Commit { group, topic, partition, offset } => {
                broker.commit(&group, &topic, partition, offset)?;
                Response::Ok(OkBody::default())
            }
        })
    })();
    outcome.unwrap_or_else(|e| Response::Error { kind: error_kind(&e).to_string(), message: e.to_string() })
}

fn read_frame(stream: &mut impl Read) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match stream.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame of {len} bytes exceeds limit")));
    }
    let mut body = vec![0u8; len];
    stream.read_exact(&mut body)?;
    Ok(Some(body))
}

fn write_frame(stream: &mut impl Write, body: &[u8]) -> io::Result<()> {
    stream.write_all(&(body.len() as u32).to_be_bytes())?;
    stream.write_all(body)?;
    stream.flush()
}

fn encode_body<T: Serialize>(value: &T, sealer: Option<&Sealer>) -> Result<Vec<u8>> {
    let json = to_canonical_vec(value).map_err(|e| BusError::Protocol(e.to_string()))?;
    match sealer {
        None => Ok(json),
        Some(s) => Ok(s.seal(&json).map_err(|e| BusError::Protocol(e.to_string()))?.to_bytes()),
    }
}

fn decode_body<T: for<'de> Deserialize<'de>>(body: &[u8], sealer: Option<&Sealer>) -> Result<T> {
    let plain;
    let json = match sealer {
        None => body,
        Some(s) => {
            let sealed = SealedPayload::from_bytes(body).map_err(|e| BusError::Protocol(e.to_string()))?;
            plain = s.open(&sealed).map_err(|e| BusError::Protocol(e.to_string()))?;
            &plain[..]
        }
    };
    serde_json::from_slice(json).map_err(|e| BusError::Protocol(format!("bad frame: {e}")))
}

/// Accept loop serving one broker; one thread per connection.
pub struct BusServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl BusServer {
    pub fn bind(addr: impl ToSocketAddrs, broker: Arc<Broker>, transport: Option<Sealer>) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let accept = {
            let stop = Arc::clone(&stop);
            std::thread::Builder::new().name("bus-accept".into()).spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    match listener.accept() {
                        Ok((stream, _)) => {
                            let broker = Arc::clone(&broker);
                            let transport = transport.clone();
                            let stop = Arc::clone(&stop);
                            let _ = std::thread::Builder::new()
                                .name("bus-conn".into())
                                .spawn(move || serve_connection(stream, &broker, transport.as_ref(), &stop));
                        }
                        Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                            std::thread::sleep(Duration::from_millis(20));
                        }
                        Err(e) => {
                            log::warn!("bus accept failed: {e}");
                            std::thread::sleep(Duration::from_millis(50));
                        }
                    }
                }
            })?
        };
        Ok(BusServer { addr, stop, accept: Some(accept) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for BusServer {
    fn drop(&mut self) {
        self.stop_accepting();
    }
}

fn serve_connection(mut stream: TcpStream, broker: &Broker, transport: Option<&Sealer>, stop: &AtomicBool) {
    let _ = stream.set_nonblocking(false);
    let _ = stream.set_nodelay(true);
    let _ = stream.set_read_timeout(Some(Duration::from_millis(500)));
    loop {
        if stop.load(Ordering::SeqCst) {
            return;
        }
        let body = match read_frame(&mut stream) {
            Ok(Some(b)) => b,
            Ok(None) => return,
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => continue,
            Err(_) => return,
        };
        let response = match decode_body::<Request>(&body, transport) {
            Ok(req) => dispatch(broker, req),
            Err(e) => Response::Error { kind: error_kind(&e).to_string(), message: e.to_string() },
        };
        let Ok(out) = encode_body(&response, transport) else { return };
        if write_frame(&mut stream, &out).is_err() {
            return;
        }
    }
}

/// Client side of the framed protocol. Reconnects lazily after I/O errors.
pub struct BusClient {
    addr: SocketAddr,
    transport: Option<Sealer>,
    conn: Mutex<Option<TcpStream>>,
}

impl std::fmt::Debug for BusClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BusClient").field("addr", &self.addr).finish_non_exhaustive()
    }
}

impl BusClient {
    pub fn new(addr: impl ToSocketAddrs, transport: Option<Sealer>) -> io::Result<Self> {
        let addr = addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "no address"))?;
        Ok(BusClient { addr, transport, conn: Mutex::new(None) })
    }

    pub fn request(&self, req: &Request) -> Result<Response> {
        let mut guard = self.conn.lock().expect("connection lock");
        if guard.is_none() {
            let stream = TcpStream::connect_timeout(&self.addr, Duration::from_secs(2))
                .map_err(|e| BusError::Unavailable(format!("connect {}: {e}", self.addr)))?;
            stream.set_nodelay(true).ok();
            *guard = Some(stream);
        }
        let stream = guard.as_mut().expect("connected");
        let body = encode_body(req, self.transport.as_ref())?;
        let result = write_frame(stream, &body).and_then(|_| read_frame(stream));
        match result {
            Ok(Some(frame)) => decode_body(&frame, self.transport.as_ref()),
            Ok(None) => {
                *guard = None;
                Err(BusError::Unavailable("connection closed".into()))
            }
            Err(e) => {
                *guard = None;
                Err(BusError::Unavailable(e.to_string()))
            }
        }
    }

    fn expect_ok(&self, req: &Request) -> Result<Response> {
        match self.request(req)? {
            Response::Error { kind, message } => Err(match kind.as_str() {
                "unavailable" => BusError::Unavailable(message),
                "duplicate_topic" => BusError::DuplicateTopic(message),
                "invalid_partitions" => BusError::InvalidPartitions,
                "invalid_retention" => BusError::InvalidRetention,
                "unknown_topic" => BusError::UnknownTopic(message),
                _ => BusError::Protocol(format!("{kind}: {message}")),
            }),
            ok => Ok(ok),
        }
    }

    pub fn create_topic(&self, name: &str, partitions: u32, retention: u64) -> Result<Topic> {
        match self.expect_ok(&Request::CreateTopic { name: name.into(), partitions, retention })? {
            Response::Ok(OkBody { topic: Some(t), .. }) => Ok(t),
            other => Err(BusError::Protocol(format!("unexpected response {other:?}"))),
        }
    }

    pub fn describe_topic(&self, name: &str) -> Result<Topic> {
        match self.expect_ok(&Request::DescribeTopic { name: name.into() })? {
            Response::Ok(OkBody { topic: Some(t), .. }) => Ok(t),
            other => Err(BusError::Protocol(format!("unexpected response {other:?}"))),
        }
    }

    pub fn poll(
        &self,
        topic: &str,
        group: &str,
        partition: Option<u32>,
        max_records: usize,
        timeout: Duration,
    ) -> Result<PollResult> {
        let req = Request::Poll {
            topic: topic.into(),
            group: group.into(),
            max_records,
            timeout_ms: timeout.as_millis() as u64,
            partition,
        };
        match self.expect_ok(&req)? {
            Response::Ok(OkBody { records: Some(records), gaps, .. }) => {
                let records = records
                    .into_iter()
                    .map(|w| {
                        Ok(LogRecord {
                            partition: w.partition,
                            offset: w.offset,
                            key: decode_b64(&w.key)?,
                            payload: decode_b64(&w.payload)?,
                            appended_at: w.appended_at,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(PollResult { records, gaps: gaps.unwrap_or(0) })
            }
            other => Err(BusError::Protocol(format!("unexpected response {other:?}"))),
        }
    }

    pub fn commit(&self, group: &str, topic: &str, partition: u32, offset: u64) -> Result<()> {
        self.expect_ok(&Request::Commit { group: group.into(), topic: topic.into(), partition, offset })?;
        Ok(())
    }
}

impl BusProducer for BusClient {
    fn append(&self, topic: &str, key: &[u8], payload: &[u8]) -> Result<(u32, u64)> {
        let req = Request::Append { topic: topic.into(), key: B64.encode(key), payload: B64.encode(payload) };
        match self.expect_ok(&req)? {
            Response::Ok(OkBody { partition: Some(p), offset: Some(o), .. }) => Ok((p, o)),
            other => Err(BusError::Protocol(format!("unexpected response {other:?}"))),
        }
    }
}

impl BusConsumer for BusClient {
    fn partitions(&self, topic: &str) -> Result<u32> {
        Ok(self.describe_topic(topic)?.partitions)
    }

    fn poll_partition(
        &self,
        topic: &str,
        group: &str,
        partition: u32,
        max_records: usize,
        timeout: Duration,
    ) -> Result<PollResult> {
        self.poll(topic, group, Some(partition), max_records, timeout)
    }

    fn commit(&self, group: &str, topic: &str, partition: u32, offset: u64) -> Result<()> {
        BusClient::commit(self, group, topic, partition, offset)
    }
}
