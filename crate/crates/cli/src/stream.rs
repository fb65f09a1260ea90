//! `clstream/1`: a JSON handshake line, then frames of a u32 LE byte length
//! followed by f32 LE samples, channel-major within the frame.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::sync::mpsc::{sync_channel, SyncSender};
use std::thread;
use std::time::Instant;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use cogload::data::Montage;
use cogload::estimators::load_model;
use cogload::harness::{FeatureExtractor, PipelineConfig, WindowScorer};
use cogload::preprocess::{design_filters, CausalFilter, HOP_SAMPLES, TARGET_FS, WINDOW_SAMPLES};

use crate::error::CliError;
use crate::{Common, StreamArgs};

pub const PROTO: &str = "clstream/1";
const QUEUE_WINDOWS: usize = 4;
const MAX_HANDSHAKE_BYTES: u64 = 4096;
const MAX_FRAME_BYTES: usize = 64 << 20;

#[derive(Debug, Deserialize)]
struct Handshake {
    proto: String,
    channels: usize,
    fs: f64,
}

#[derive(Serialize)]
struct ScoreLine {
    t_s: f64,
    score: f64,
    latency_ms: f64,
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    error: &'a str,
}

enum Msg {
    Window { t_s: f64, data: Array2<f64>, done: Instant },
    Fail(String),
}

/// The most recent `WINDOW_SAMPLES` samples of every channel.
struct Ring {
    data: Array2<f64>,
    pos: usize,
    total: u64,
}

impl Ring {
    fn new(channels: usize) -> Self {
        Self {
            data: Array2::zeros((channels, WINDOW_SAMPLES)),
            pos: 0,
            total: 0,
        }
    }

    fn push(&mut self, column: ndarray::ArrayView1<f64>) {
        self.data.column_mut(self.pos).assign(&column);
        self.pos = (self.pos + 1) % WINDOW_SAMPLES;
        self.total += 1;
    }

    fn window_ready(&self) -> bool {
        self.total >= WINDOW_SAMPLES as u64 && (self.total - WINDOW_SAMPLES as u64) % HOP_SAMPLES as u64 == 0
    }

    /// Oldest sample first.
    fn snapshot(&self) -> Array2<f64> {
        let mut out = Array2::zeros(self.data.dim());
        let tail = WINDOW_SAMPLES - self.pos;
        out.slice_mut(s![.., ..tail]).assign(&self.data.slice(s![.., self.pos..]));
        out.slice_mut(s![.., tail..]).assign(&self.data.slice(s![.., ..self.pos]));
        out
    }
}

fn read_handshake<R: BufRead>(input: &mut R) -> Result<Handshake, String> {
    let mut line = String::new();
    input
        .by_ref()
        .take(MAX_HANDSHAKE_BYTES)
        .read_line(&mut line)
        .map_err(|e| format!("reading handshake: {e}"))?;
    if line.is_empty() {
        return Err("stream ended before the handshake".into());
    }
    if !line.ends_with('\n') {
        return Err("handshake line is not newline-terminated".into());
    }
    let h: Handshake = serde_json::from_str(line.trim_end()).map_err(|e| format!("malformed handshake: {e}"))?;
    if h.proto != PROTO {
        return Err(format!("unsupported protocol '{}', expected '{PROTO}'", h.proto));
    }
    if h.fs != TARGET_FS {
        return Err(format!("sampling rate {} Hz is not supported, expected {TARGET_FS}", h.fs));
    }
    if h.channels == 0 {
        return Err("handshake declares zero channels".into());
    }
    Ok(h)
}

/// Fills `buf` completely; `Ok(false)` on a clean end of stream before the first byte.
fn read_full<R: Read>(input: &mut R, buf: &mut [u8]) -> io::Result<bool> {
    let mut got = 0;
    while got < buf.len() {
        match input.read(&mut buf[got..]) {
            Ok(0) if got == 0 => return Ok(false),
            Ok(0) => return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated")),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(true)
}

fn read_frames<R: Read>(mut input: R, channels: usize, tx: &SyncSender<Msg>) -> Result<(), String> {
    let bank = design_filters(TARGET_FS).map_err(|e| e.to_string())?;
    let mut filter = CausalFilter::new(bank, channels);
    let mut ring = Ring::new(channels);
    let mut header = [0u8; 4];
    let mut payload = Vec::new();
    loop {
        match read_full(&mut input, &mut header) {
            Ok(false) => return Ok(()),
            Ok(true) => {}
            Err(e) => return Err(format!("frame header: {e}")),
        }
        let len = u32::from_le_bytes(header) as usize;
        let stride = 4 * channels;
        if len == 0 || len % stride != 0 || len > MAX_FRAME_BYTES {
            return Err(format!(
                "malformed frame length {len}: must be a positive multiple of {stride} bytes up to {MAX_FRAME_BYTES}"
            ));
        }
        payload.resize(len, 0);
        match read_full(&mut input, &mut payload) {
            Ok(true) => {}
            Ok(false) | Err(_) => return Err(format!("frame of {len} bytes is truncated")),
        }
        let m = len / stride;
        let mut chunk = Array2::zeros((channels, m));
        for (v, b) in chunk.iter_mut().zip(payload.chunks_exact(4)) {
            *v = f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        }
        if chunk.iter().any(|v| !v.is_finite()) {
            return Err("frame contains non-finite samples".into());
        }
        for (c, row) in chunk.rows_mut().into_iter().enumerate() {
            filter.process(c, row);
        }
        for col in chunk.columns() {
            ring.push(col);
            if ring.window_ready() {
                let msg = Msg::Window {
                    t_s: ring.total as f64 / TARGET_FS,
                    data: ring.snapshot(),
                    done: Instant::now(),
                };
                if tx.send(msg).is_err() {
                    return Ok(());
                }
            }
        }
    }
}

fn emit<W: Write, T: Serialize>(out: &mut W, line: &T) -> Result<(), CliError> {
    let text = serde_json::to_string(line).expect("line serializes");
    writeln!(out, "{text}")
        .and_then(|_| out.flush())
        .map_err(|e| CliError::data(format!("stdout: {e}")))
}

fn protocol_error<W: Write>(out: &mut W, msg: String) -> CliError {
    let _ = emit(out, &ErrorLine { error: &msg });
    CliError::stream(msg)
}

fn load_pipeline(model: &Path, explicit: &Option<std::path::PathBuf>) -> Result<PipelineConfig, CliError> {
    let path = explicit
        .clone()
        .unwrap_or_else(|| model.parent().unwrap_or(Path::new(".")).join("pipeline.json"));
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn run_session<R: Read + Send + 'static>(
    input: R,
    args: &StreamArgs,
    model: cogload::estimators::Model,
    cfg: &PipelineConfig,
) -> Result<(), CliError> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let mut input = BufReader::new(input);
    let hs = read_handshake(&mut input).map_err(|m| protocol_error(&mut out, m))?;
    let montage = match &args.montage {
        Some(name) => match Montage::shipped(name) {
            Some(m) => m,
            None => Montage::load(Path::new(name))?,
        },
        None => Montage::for_channel_count(hs.channels)
            .ok_or_else(|| protocol_error(&mut out, format!("no shipped montage has {} channels", hs.channels)))?,
    };
    if montage.n_channels() != hs.channels {
        return Err(protocol_error(
            &mut out,
            format!("handshake declares {} channels but the montage has {}", hs.channels, montage.n_channels()),
        ));
    }
    let ex = FeatureExtractor::open(&cfg.features)?.uncached();
    let scorer = WindowScorer::new(ex, model, montage, cfg)?;

    let (tx, rx) = sync_channel::<Msg>(QUEUE_WINDOWS);
    let channels = hs.channels;
    let reader = thread::spawn(move || {
        if let Err(m) = read_frames(input, channels, &tx) {
            let _ = tx.send(Msg::Fail(m));
        }
    });
    for msg in rx {
        match msg {
            Msg::Window { t_s, data, done } => {
                let score = scorer.score(data.view())?;
                if !score.is_finite() {
                    return Err(CliError::numeric(format!("non-finite score at t={t_s} s")));
                }
                let latency_ms = done.elapsed().as_secs_f64() * 1e3;
                emit(&mut out, &ScoreLine { t_s, score, latency_ms })?;
            }
            Msg::Fail(m) => return Err(protocol_error(&mut out, m)),
        }
    }
    let _ = reader.join();
    Ok(())
}

pub fn serve(_common: &Common, args: &StreamArgs) -> Result<(), CliError> {
    let model = load_model(&args.model)?;
    let cfg = load_pipeline(&args.model, &args.pipeline)?;
    match &args.listen {
        Some(addr) => {
            let listener = TcpListener::bind(addr).map_err(|e| CliError::data(format!("{addr}: {e}")))?;
            let local = listener.local_addr().map_err(|e| CliError::data(e.to_string()))?;
            eprintln!("listening on {local}");
            let (sock, peer) = listener.accept().map_err(|e| CliError::data(format!("{addr}: {e}")))?;
            log::info!("stream from {peer}");
            run_session(sock, args, model, &cfg)
        }
        None => run_session(io::stdin(), args, model, &cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_keeps_the_latest_window_in_order() {
        let mut r = Ring::new(1);
        let n = WINDOW_SAMPLES + HOP_SAMPLES + 7;
        let mut ready = Vec::new();
        for i in 0..n {
            r.push(ndarray::arr1(&[i as f64]).view());
            if r.window_ready() {
                ready.push(r.total);
            }
        }
        assert_eq!(ready, vec![WINDOW_SAMPLES as u64, (WINDOW_SAMPLES + HOP_SAMPLES) as u64]);
        let w = r.snapshot();
        assert_eq!(w[[0, 0]], (n - WINDOW_SAMPLES) as f64);
        assert_eq!(w[[0, WINDOW_SAMPLES - 1]], (n - 1) as f64);
    }

    #[test]
    fn handshake_validation() {
        let ok = format!("{{\"proto\":\"{PROTO}\",\"channels\":32,\"fs\":200}}\n");
        assert_eq!(read_handshake(&mut ok.as_bytes()).unwrap().channels, 32);
        for bad in [
            "{\"proto\":\"clstream/2\",\"channels\":32,\"fs\":200}\n",
            "{\"proto\":\"clstream/1\",\"channels\":32,\"fs\":250}\n",
            "{\"proto\":\"clstream/1\",\"channels\":0,\"fs\":200}\n",
            "{\"proto\":\"clstream/1\",\"channels\":32,\"fs\":200}",
            "not json\n",
            "",
        ] {
            assert!(read_handshake(&mut bad.as_bytes()).is_err(), "{bad}");
        }
    }

    #[test]
    fn bad_frame_lengths_are_rejected() {
        let (tx, _rx) = sync_channel(QUEUE_WINDOWS);
        let mut bytes = 6u32.to_le_bytes().to_vec();
        bytes.extend([0u8; 6]);
        assert!(read_frames(&bytes[..], 2, &tx).unwrap_err().contains("malformed frame length"));
        let mut bytes = 16u32.to_le_bytes().to_vec();
        bytes.extend([0u8; 8]);
        assert!(read_frames(&bytes[..], 2, &tx).unwrap_err().contains("truncated"));
        assert!(read_frames(&[1u8, 0][..], 2, &tx).is_err());
        assert!(read_frames(&[][..], 2, &tx).is_ok());
    }
}
