use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::str::FromStr;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{EmbeddingProvider, FeatureError, EMBED_DIM, SECOND_SAMPLES};

pub const PROTO: &str = "embrpc/1";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

const MAX_FRAME: usize = 1 << 28;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// `tcp://host:port`
    Tcp(String),
    /// `stdio:program arg…`
    Stdio(Vec<String>),
}

impl FromStr for Endpoint {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if let Some(addr) = s.strip_prefix("tcp://") {
            if addr.is_empty() {
                return Err("empty tcp address".into());
            }
            Ok(Endpoint::Tcp(addr.to_string()))
        } else if let Some(cmd) = s.strip_prefix("stdio:") {
            let argv: Vec<String> = cmd.split_whitespace().map(String::from).collect();
            if argv.is_empty() {
                return Err("empty stdio command".into());
            }
            Ok(Endpoint::Stdio(argv))
        } else {
            Err(format!("endpoint '{s}' must start with tcp:// or stdio:"))
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Tcp(a) => write!(f, "tcp://{a}"),
            Endpoint::Stdio(argv) => write!(f, "stdio:{}", argv.join(" ")),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Handshake {
    proto: String,
    dim: usize,
}

enum Incoming {
    Hello(String),
    Frame(Vec<u8>),
    BadLength(u64),
    Closed(String),
}

struct Conn {
    writer: Box<dyn Write + Send>,
    rx: Receiver<Incoming>,
    child: Option<Child>,
    broken: bool,
}

impl Drop for Conn {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

fn read_loop(reader: Box<dyn Read + Send>, tx: mpsc::Sender<Incoming>) {
    let mut r = BufReader::new(reader);
    let mut line = String::new();
    match r.read_line(&mut line) {
        Ok(0) => {
            let _ = tx.send(Incoming::Closed("closed before handshake".into()));
            return;
        }
        Ok(_) => {
            if tx.send(Incoming::Hello(line)).is_err() {
                return;
            }
        }
        Err(e) => {
            let _ = tx.send(Incoming::Closed(e.to_string()));
            return;
        }
    }
    loop {
        let mut len = [0u8; 4];
        if let Err(e) = r.read_exact(&mut len) {
            let _ = tx.send(Incoming::Closed(e.to_string()));
            return;
        }
        let len = u32::from_le_bytes(len) as usize;
        if len > MAX_FRAME || len % 4 != 0 {
            let _ = tx.send(Incoming::BadLength(len as u64));
            return;
        }
        let mut buf = vec![0u8; len];
        if let Err(e) = r.read_exact(&mut buf) {
            let _ = tx.send(Incoming::Closed(e.to_string()));
            return;
        }
        if tx.send(Incoming::Frame(buf)).is_err() {
            return;
        }
    }
}

/// Client for an out-of-process encoder speaking EMBRPC over TCP or a child's stdio.
pub struct ExternalProvider {
    id: String,
    timeout: Duration,
    conn: Mutex<Conn>,
}

impl ExternalProvider {
    pub fn connect(endpoint: &Endpoint) -> Result<Self, FeatureError> {
        Self::connect_with_timeout(endpoint, DEFAULT_TIMEOUT)
    }

    pub fn connect_with_timeout(endpoint: &Endpoint, timeout: Duration) -> Result<Self, FeatureError> {
        let connect_err = |e: std::io::Error| FeatureError::Connect(format!("{endpoint}: {e}"));
        let (reader, writer, child): (Box<dyn Read + Send>, Box<dyn Write + Send>, Option<Child>) = match endpoint {
            Endpoint::Tcp(addr) => {
                let sock = addr
                    .to_socket_addrs()
                    .map_err(connect_err)?
                    .next()
                    .ok_or_else(|| FeatureError::Connect(format!("{endpoint}: no address")))?;
                let stream = TcpStream::connect_timeout(&sock, timeout).map_err(connect_err)?;
                stream.set_nodelay(true).map_err(connect_err)?;
                let reader = stream.try_clone().map_err(connect_err)?;
                (Box::new(reader), Box::new(stream), None)
            }
            Endpoint::Stdio(argv) => {
                let mut child = Command::new(&argv[0])
                    .args(&argv[1..])
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .spawn()
                    .map_err(connect_err)?;
                let stdout = child.stdout.take().unwrap();
                let stdin = child.stdin.take().unwrap();
                (Box::new(stdout), Box::new(stdin), Some(child))
            }
        };
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || read_loop(reader, tx));
        let mut conn = Conn {
            writer,
            rx,
            child,
            broken: false,
        };
        let hello = serde_json::to_string(&Handshake {
            proto: PROTO.into(),
            dim: EMBED_DIM,
        })
        .unwrap();
        writeln!(conn.writer, "{hello}")
            .and_then(|_| conn.writer.flush())
            .map_err(connect_err)?;
        let line = match conn.rx.recv_timeout(timeout) {
            Ok(Incoming::Hello(line)) => line,
            Ok(Incoming::Closed(why)) => return Err(FeatureError::Connect(format!("{endpoint}: {why}"))),
            Ok(_) => return Err(FeatureError::Protocol("expected handshake line".into())),
            Err(RecvTimeoutError::Timeout) => return Err(FeatureError::Timeout(timeout)),
            Err(RecvTimeoutError::Disconnected) => {
                return Err(FeatureError::Connect(format!("{endpoint}: reader stopped")))
            }
        };
        let theirs: Handshake = serde_json::from_str(line.trim())
            .map_err(|e| FeatureError::Protocol(format!("bad handshake {:?}: {e}", line.trim())))?;
        if theirs.proto != PROTO || theirs.dim != EMBED_DIM {
            return Err(FeatureError::Protocol(format!(
                "server speaks {} with dim {}, need {PROTO} with dim {EMBED_DIM}",
                theirs.proto, theirs.dim
            )));
        }
        Ok(Self {
            id: format!("external:{endpoint}"),
            timeout,
            conn: Mutex::new(conn),
        })
    }

    fn round_trip(&self, conn: &mut Conn, xs: &[&[f64]]) -> Result<Vec<Vec<f64>>, FeatureError> {
        let failure = |reason: String| FeatureError::ProviderFailure {
            window: 0,
            channel: None,
            reason,
        };
        let mut frame = Vec::with_capacity(4 + xs.len() * SECOND_SAMPLES * 4);
        frame.extend_from_slice(&((xs.len() * SECOND_SAMPLES * 4) as u32).to_le_bytes());
        for x in xs {
            if x.len() != SECOND_SAMPLES {
                return Err(FeatureError::Shape {
                    expected: format!("{SECOND_SAMPLES} samples"),
                    got: format!("{} samples", x.len()),
                });
            }
            for &v in *x {
                frame.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        conn.writer
            .write_all(&frame)
            .and_then(|_| conn.writer.flush())
            .map_err(|e| failure(format!("send failed: {e}")))?;
        let bytes = match conn.rx.recv_timeout(self.timeout) {
            Ok(Incoming::Frame(b)) => b,
            Ok(Incoming::BadLength(n)) => return Err(FeatureError::Protocol(format!("frame length {n} is invalid"))),
            Ok(Incoming::Hello(_)) => return Err(FeatureError::Protocol("unexpected handshake".into())),
            Ok(Incoming::Closed(why)) => return Err(failure(format!("server closed the connection: {why}"))),
            Err(RecvTimeoutError::Timeout) => return Err(FeatureError::Timeout(self.timeout)),
            Err(RecvTimeoutError::Disconnected) => return Err(failure("server closed the connection".into())),
        };
        let want = xs.len() * EMBED_DIM * 4;
        if bytes.len() != want {
            return Err(FeatureError::Protocol(format!(
                "response frame of {} bytes for a batch of {} (expected {want})",
                bytes.len(),
                xs.len()
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::Protocol("non-finite embedding values".into()));
        }
        Ok(values.chunks_exact(EMBED_DIM).map(|c| c.to_vec()).collect())
    }
}

impl EmbeddingProvider for ExternalProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        EMBED_DIM
    }

    fn embed_second(&self, x: &[f64]) -> Result<Vec<f64>, FeatureError> {
        Ok(self.embed_batch(&[x])?.remove(0))
    }

    fn embed_batch(&self, xs: &[&[f64]]) -> Result<Vec<Vec<f64>>, FeatureError> {
        let mut conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        if conn.broken {
            return Err(FeatureError::ProviderFailure {
                window: 0,
                channel: None,
                reason: "connection is no longer usable after an earlier failure".into(),
            });
        }
        let out = self.round_trip(&mut conn, xs);
        if out.is_err() {
            conn.broken = true;
        }
        out
    }
}

/// Runs the server side of EMBRPC until the client hangs up. `f` maps one
/// second of samples to one embedding.
pub fn serve_embrpc<R: BufRead, W: Write>(
    mut reader: R,
    mut writer: W,
    mut f: impl FnMut(&[f32]) -> Vec<f32>,
) -> std::io::Result<()> {
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let hello = serde_json::to_string(&Handshake {
        proto: PROTO.into(),
        dim: EMBED_DIM,
    })
    .unwrap();
    writeln!(writer, "{hello}")?;
    writer.flush()?;
    loop {
        let mut len = [0u8; 4];
        match reader.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => return Err(e),
        }
        let mut buf = vec![0u8; u32::from_le_bytes(len) as usize];
        reader.read_exact(&mut buf)?;
        let samples: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut out = Vec::with_capacity(samples.len() / SECOND_SAMPLES * EMBED_DIM * 4);
        for second in samples.chunks(SECOND_SAMPLES) {
            for v in f(second) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        writer.write_all(&(out.len() as u32).to_le_bytes())?;
        writer.write_all(&out)?;
        writer.flush()?;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Cohort, TrialKey};
    use crate::features::embed_trial;
    use crate::preprocess::{Provenance, WindowTensor, N_WINDOWS, WINDOW_SAMPLES};
    use ndarray::Array3;
    use std::net::TcpListener;

    fn windows(n_e: usize) -> WindowTensor {
        let prov = Provenance {
            key: TrialKey::new("P", 1, 0),
            cohort: Cohort::B,
            cropped: false,
            padded: false,
        };
        let data = Array3::from_shape_fn((N_WINDOWS, n_e, WINDOW_SAMPLES), |(t, e, i)| (t + e + i % 7) as f64);
        WindowTensor::new(data, prov).unwrap()
    }

    fn stub(f: impl Fn(&[f32]) -> Vec<f32> + Send + 'static) -> Endpoint {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        thread::spawn(move || {
            let (sock, _) = listener.accept().unwrap();
            let reader = BufReader::new(sock.try_clone().unwrap());
            let _ = serve_embrpc(reader, sock, f);
        });
        Endpoint::Tcp(addr.to_string())
    }

    #[test]
    fn endpoint_parsing() {
        assert_eq!("tcp://127.0.0.1:9".parse::<Endpoint>().unwrap(), Endpoint::Tcp("127.0.0.1:9".into()));
        assert_eq!(
            "stdio:python3 enc.py --fast".parse::<Endpoint>().unwrap(),
            Endpoint::Stdio(vec!["python3".into(), "enc.py".into(), "--fast".into()])
        );
        assert!("http://x".parse::<Endpoint>().is_err());
        assert!("stdio:".parse::<Endpoint>().is_err());
    }

    #[test]
    fn zero_server_gives_zero_features() {
        let ep = stub(|_| vec![0.0; EMBED_DIM]);
        let p = ExternalProvider::connect(&ep).unwrap();
        let h = embed_trial(&p, &windows(3)).unwrap();
        assert_eq!(h.data.dim(), (10, 3, 200));
        assert!(h.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn echo_of_mean_is_passed_through() {
        let ep = stub(|x| vec![x.iter().sum::<f32>() / x.len() as f32; EMBED_DIM]);
        let p = ExternalProvider::connect(&ep).unwrap();
        let v = p.embed_second(&[2.0; 200]).unwrap();
        assert!(v.iter().all(|&a| a == 2.0));
    }

    #[test]
    fn wrong_frame_length_is_a_protocol_error() {
        let ep = stub(|_| vec![1.0; EMBED_DIM - 1]);
        let p = ExternalProvider::connect(&ep).unwrap();
        assert!(matches!(p.embed_second(&[0.0; 200]), Err(FeatureError::Protocol(_))));
    }

    #[test]
    fn server_hangup_reports_window() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        // Answers three windows' worth of requests, then closes.
        thread::spawn(move || {
            let (sock, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(sock.try_clone().unwrap());
            let mut writer = sock;
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            writeln!(writer, "{{\"proto\":\"{PROTO}\",\"dim\":{EMBED_DIM}}}").unwrap();
            for _ in 0..3 {
                let mut len = [0u8; 4];
                reader.read_exact(&mut len).unwrap();
                let mut buf = vec![0u8; u32::from_le_bytes(len) as usize];
                reader.read_exact(&mut buf).unwrap();
                let out = vec![0u8; buf.len() / SECOND_SAMPLES * EMBED_DIM];
                writer.write_all(&(out.len() as u32).to_le_bytes()).unwrap();
                writer.write_all(&out).unwrap();
            }
        });
        let p = ExternalProvider::connect(&Endpoint::Tcp(addr.to_string())).unwrap();
        match embed_trial(&p, &windows(2)) {
            Err(FeatureError::ProviderFailure { window, .. }) => assert!(window < N_WINDOWS),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn silent_server_times_out() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        thread::spawn(move || {
            let (sock, _) = listener.accept().unwrap();
            thread::sleep(Duration::from_secs(2));
            drop(sock);
        });
        let err = ExternalProvider::connect_with_timeout(&Endpoint::Tcp(addr.to_string()), Duration::from_millis(200));
        assert!(matches!(err, Err(FeatureError::Timeout(_))));
    }

    #[test]
    fn refused_connection() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let err = ExternalProvider::connect(&Endpoint::Tcp(addr.to_string()));
        assert!(matches!(err, Err(FeatureError::Connect(_))));
    }
}
