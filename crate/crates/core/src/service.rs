//! Inline inference over TCP.
//!
//! Every message is `u32 BE payload length` followed by the payload, which is
//! `u32 BE header length`, a JSON header, then raw bytes. Requests carry
//! `H·W` little-endian f32 pixels; responses carry none.

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::inference::Predictor;
use crate::landmarks::{LandmarkSet, View};
use crate::measure::longitudinal_shortening;

/// Largest accepted payload.
pub const MAX_PAYLOAD: usize = 64 << 20;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("payload of {len} bytes exceeds the {max}-byte limit")]
    Oversize { len: usize, max: usize },
    #[error("stream ended inside a frame: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("header length {header} does not fit a {payload}-byte payload")]
    HeaderLength { header: usize, payload: usize },
    #[error("bad frame header: {0}")]
    Header(String),
    #[error("pixel payload is {got} bytes, expected {expected} for the stated size")]
    PixelCount { expected: usize, got: usize },
    #[error("connection error: {0}")]
    Io(#[from] io::Error),
}

fn check_len(len: usize) -> Result<(), ProtocolError> {
    if len > MAX_PAYLOAD {
        return Err(ProtocolError::Oversize { len, max: MAX_PAYLOAD });
    }
    Ok(())
}

/// Build a payload from a header and body, without the outer length prefix.
pub fn encode_payload<H: Serialize>(header: &H, body: &[u8]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(4 + json.len() + body.len());
    out.extend_from_slice(&(json.len() as u32).to_be_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(body);
    Ok(out)
}

/// Prefix a payload with its length.
pub fn encode_frame(payload: &[u8]) -> Result<Vec<u8>, ProtocolError> {
    check_len(payload.len())?;
    let mut out = Vec::with_capacity(4 + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

/// Split a payload into its JSON header and body bytes.
pub fn split_payload(payload: &[u8]) -> Result<(&[u8], &[u8]), ProtocolError> {
    if payload.len() < 4 {
        return Err(ProtocolError::Truncated { needed: 4, available: payload.len() });
    }
    let header = u32::from_be_bytes(payload[..4].try_into().unwrap()) as usize;
    if header > payload.len() - 4 {
        return Err(ProtocolError::HeaderLength { header, payload: payload.len() });
    }
    Ok((&payload[4..4 + header], &payload[4 + header..]))
}

pub fn parse_payload<H: DeserializeOwned>(payload: &[u8]) -> Result<(H, &[u8]), ProtocolError> {
    let (json, body) = split_payload(payload)?;
    let header = serde_json::from_slice(json).map_err(|e| ProtocolError::Header(e.to_string()))?;
    Ok((header, body))
}

/// Incremental splitter for a byte stream of concatenated frames.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Bytes held that do not yet form a complete frame.
    pub fn pending(&self) -> usize {
        self.buf.len()
    }

    /// The next complete payload, if one is buffered. An oversize length
    /// prefix is reported as soon as it is seen.
    pub fn next_payload(&mut self) -> Result<Option<Vec<u8>>, ProtocolError> {
        if self.buf.len() < 4 {
            return Ok(None);
        }
        let len = u32::from_be_bytes(self.buf[..4].try_into().unwrap()) as usize;
        check_len(len)?;
        if self.buf.len() < 4 + len {
            return Ok(None);
        }
        let payload = self.buf[4..4 + len].to_vec();
        self.buf.drain(..4 + len);
        Ok(Some(payload))
    }
}

/// Read one payload. `None` on a clean end of stream between frames.
pub fn read_payload<R: Read>(reader: &mut R) -> Result<Option<Vec<u8>>, ProtocolError> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match reader.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(ProtocolError::Truncated { needed: 4, available: got }),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(len) as usize;
    check_len(len)?;
    let mut payload = Vec::with_capacity(len);
    let read = reader.take(len as u64).read_to_end(&mut payload)?;
    if read < len {
        return Err(ProtocolError::Truncated { needed: len, available: read });
    }
    Ok(Some(payload))
}

pub fn write_payload<W: Write>(writer: &mut W, payload: &[u8]) -> Result<(), ProtocolError> {
    writer.write_all(&encode_frame(payload)?)?;
    writer.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InlineFrameRequest {
    pub series_id: String,
    pub frame_index: u64,
    pub height: usize,
    pub width: usize,
    pub spacing_mm: (f64, f64),
    pub view: View,
    /// Marks the final frame of a series.
    #[serde(default)]
    pub last_frame: bool,
}

impl InlineFrameRequest {
    pub fn for_image(series_id: &str, frame_index: u64, image: &Image, view: View, last_frame: bool) -> Self {
        Self {
            series_id: series_id.into(),
            frame_index,
            height: image.height(),
            width: image.width(),
            spacing_mm: image.spacing_mm(),
            view,
            last_frame,
        }
    }

    pub fn to_payload(&self, pixels: &[f32]) -> Result<Vec<u8>> {
        let body: Vec<u8> = pixels.iter().flat_map(|v| v.to_le_bytes()).collect();
        encode_payload(self, &body)
    }

    pub fn from_payload(payload: &[u8]) -> Result<(Self, Image)> {
        let (req, body): (Self, _) = parse_payload(payload)?;
        let expected = req.height.checked_mul(req.width).and_then(|n| n.checked_mul(4)).unwrap_or(usize::MAX);
        if body.len() != expected {
            return Err(ProtocolError::PixelCount { expected, got: body.len() }.into());
        }
        let pixels = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let image = Image::new(req.height, req.width, pixels, req.spacing_mm)?;
        Ok((req, image))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseLength {
    pub frame_index: u64,
    pub lv_length_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InlineFrameResponse {
    pub series_id: String,
    pub frame_index: u64,
    /// Original-frame landmarks.
    pub landmarks: Option<LandmarkSet>,
    pub lv_length_mm: Option<f64>,
    /// Longest LV so far in this series.
    pub ed: Option<PhaseLength>,
    /// Shortest LV so far in this series.
    pub es: Option<PhaseLength>,
    /// Set on the last frame of a series with at least one measured length.
    pub shortening_pct: Option<f64>,
    pub error: Option<String>,
}

impl InlineFrameResponse {
    pub fn to_payload(&self) -> Result<Vec<u8>> {
        encode_payload(self, &[])
    }

    pub fn from_payload(payload: &[u8]) -> Result<Self> {
        let (resp, body): (Self, _) = parse_payload(payload)?;
        if !body.is_empty() {
            return Err(ProtocolError::PixelCount { expected: 0, got: body.len() }.into());
        }
        Ok(resp)
    }
}

/// Running ED/ES of one series: ED is the longest LV, ES the shortest; the
/// first frame wins ties.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SeriesTracker {
    pub ed: Option<PhaseLength>,
    pub es: Option<PhaseLength>,
}

impl SeriesTracker {
    pub fn observe(&mut self, frame_index: u64, length: f64) {
        let phase = PhaseLength { frame_index, lv_length_mm: length };
        if self.ed.is_none_or(|e| length > e.lv_length_mm) {
            self.ed = Some(phase);
        }
        if self.es.is_none_or(|e| length < e.lv_length_mm) {
            self.es = Some(phase);
        }
    }

    pub fn shortening(&self) -> Option<f64> {
        let (ed, es) = (self.ed?, self.es?);
        longitudinal_shortening(ed.lv_length_mm, es.lv_length_mm).ok()
    }
}

/// Series state of one connection plus the shared model.
pub struct Session<'a> {
    predictor: &'a Predictor,
    series: HashMap<String, SeriesTracker>,
}

impl<'a> Session<'a> {
    pub fn new(predictor: &'a Predictor) -> Self {
        Self { predictor, series: HashMap::new() }
    }

    pub fn handle(&mut self, payload: &[u8]) -> Result<InlineFrameResponse> {
        let (req, image) = InlineFrameRequest::from_payload(payload)?;
        let pred = self.predictor.predict(&image, req.view)?;
        let tracker = self.series.entry(req.series_id.clone()).or_default();
        if let Some(len) = pred.lv_length_mm {
            tracker.observe(req.frame_index, len);
        }
        let mut resp = InlineFrameResponse {
            series_id: req.series_id.clone(),
            frame_index: req.frame_index,
            landmarks: Some(pred.landmarks),
            lv_length_mm: pred.lv_length_mm,
            ed: tracker.ed,
            es: tracker.es,
            ..Default::default()
        };
        if req.last_frame {
            resp.shortening_pct = tracker.shortening();
            self.series.remove(&req.series_id);
        }
        Ok(resp)
    }
}

/// Serve one connection until the peer closes it or sends a bad frame.
pub fn handle_connection(predictor: &Predictor, mut stream: TcpStream) -> Result<()> {
    let mut session = Session::new(predictor);
    loop {
        let payload = match read_payload(&mut stream) {
            Ok(Some(p)) => p,
            Ok(None) => return Ok(()),
            Err(e) => {
                let resp = InlineFrameResponse { error: Some(e.to_string()), ..Default::default() };
                let _ = write_payload(&mut stream, &resp.to_payload()?);
                let _ = stream.shutdown(Shutdown::Both);
                return Err(e.into());
            }
        };
        match session.handle(&payload) {
            Ok(resp) => write_payload(&mut stream, &resp.to_payload()?)?,
            Err(e) => {
                let resp = InlineFrameResponse { error: Some(e.to_string()), ..Default::default() };
                let _ = write_payload(&mut stream, &resp.to_payload()?);
                let _ = stream.shutdown(Shutdown::Both);
                return Err(e);
            }
        }
    }
}

/// Thread-per-connection server over one shared model.
pub struct Server {
    listener: TcpListener,
    predictor: Arc<Predictor>,
    stop: Arc<AtomicBool>,
}

/// Stops a running [`Server`] from another thread.
#[derive(Debug, Clone)]
pub struct StopHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
}

impl StopHandle {
    pub fn stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the blocking accept
        let _ = TcpStream::connect(self.addr);
    }
}

impl Server {
    pub fn bind(addr: impl ToSocketAddrs, predictor: Arc<Predictor>) -> Result<Self> {
        let listener = TcpListener::bind(addr).map_err(ProtocolError::from)?;
        Ok(Self { listener, predictor, stop: Arc::new(AtomicBool::new(false)) })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr().map_err(ProtocolError::from)?)
    }

    pub fn stop_handle(&self) -> Result<StopHandle> {
        Ok(StopHandle { addr: self.local_addr()?, stop: self.stop.clone() })
    }

    /// Accept connections until stopped. Connection failures are reported
    /// through `on_error` and do not stop the server.
    pub fn run(self, on_error: impl Fn(&Error) + Send + Sync + 'static) -> Result<()> {
        let on_error = Arc::new(on_error);
        for stream in self.listener.incoming() {
            if self.stop.load(Ordering::SeqCst) {
                break;
            }
            let stream = match stream {
                Ok(s) => s,
                Err(e) => {
                    on_error(&ProtocolError::from(e).into());
                    continue;
                }
            };
            let predictor = self.predictor.clone();
            let on_error = on_error.clone();
            thread::spawn(move || {
                if let Err(e) = handle_connection(&predictor, stream) {
                    on_error(&e);
                }
            });
        }
        Ok(())
    }
}

/// Blocking client for one connection.
pub struct Client {
    stream: TcpStream,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let stream = TcpStream::connect(addr).map_err(ProtocolError::from)?;
        stream.set_nodelay(true).map_err(ProtocolError::from)?;
        Ok(Self { stream })
    }

    pub fn send(&mut self, request: &InlineFrameRequest, pixels: &[f32]) -> Result<InlineFrameResponse> {
        write_payload(&mut self.stream, &request.to_payload(pixels)?)?;
        self.receive()
    }

    pub fn receive(&mut self) -> Result<InlineFrameResponse> {
        match read_payload(&mut self.stream)? {
            Some(p) => InlineFrameResponse::from_payload(&p),
            None => Err(Error::Protocol(ProtocolError::Truncated { needed: 4, available: 0 })),
        }
    }

    pub fn stream_mut(&mut self) -> &mut TcpStream {
        &mut self.stream
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_split_across_chunks() {
        let payloads: Vec<Vec<u8>> = vec![vec![], vec![1, 2, 3], (0..=255).collect(), vec![9; 1000]];
        let mut stream = Vec::new();
        for p in &payloads {
            stream.extend(encode_frame(p).unwrap());
        }
        for chunk in [1, 3, 7, 64, stream.len()] {
            let mut dec = FrameDecoder::new();
            let mut out = Vec::new();
            for c in stream.chunks(chunk) {
                dec.push(c);
                while let Some(p) = dec.next_payload().unwrap() {
                    out.push(p);
                }
            }
            assert_eq!(out, payloads);
            assert_eq!(dec.pending(), 0);
        }
        let mut r = &stream[..];
        for p in &payloads {
            assert_eq!(read_payload(&mut r).unwrap().as_ref(), Some(p));
        }
        assert!(read_payload(&mut r).unwrap().is_none());
    }

    #[test]
    fn oversize_and_truncation() {
        let mut dec = FrameDecoder::new();
        dec.push(&((MAX_PAYLOAD + 1) as u32).to_be_bytes());
        assert!(matches!(dec.next_payload(), Err(ProtocolError::Oversize { .. })));
        let mut r: &[u8] = &[0, 0, 0, 10, 1, 2];
        assert!(matches!(read_payload(&mut r), Err(ProtocolError::Truncated { needed: 10, available: 2 })));
        let mut r: &[u8] = &[0, 0];
        assert!(matches!(read_payload(&mut r), Err(ProtocolError::Truncated { .. })));
        assert!(matches!(split_payload(&[0, 0, 0, 9, 1]), Err(ProtocolError::HeaderLength { .. })));
    }

    #[test]
    fn request_round_trip_and_pixel_check() {
        let img = Image::new(16, 20, (0..320).map(|i| i as f32 * 0.5).collect(), (1.5, 0.75)).unwrap();
        let req = InlineFrameRequest::for_image("s1", 7, &img, View::Ch4, true);
        let payload = req.to_payload(img.pixels()).unwrap();
        let (back, img2) = InlineFrameRequest::from_payload(&payload).unwrap();
        assert_eq!(back, req);
        assert_eq!(img2, img);
        let short = req.to_payload(&img.pixels()[1..]).unwrap();
        assert!(matches!(
            InlineFrameRequest::from_payload(&short),
            Err(Error::Protocol(ProtocolError::PixelCount { expected: 1280, got: 1276 }))
        ));
    }

    #[test]
    fn tracker_takes_extremes() {
        let mut t = SeriesTracker::default();
        for (i, len) in [70.0, 80.0, 65.0, 60.0, 80.0, 72.0].into_iter().enumerate() {
            t.observe(i as u64, len);
        }
        assert_eq!(t.ed, Some(PhaseLength { frame_index: 1, lv_length_mm: 80.0 }));
        assert_eq!(t.es, Some(PhaseLength { frame_index: 3, lv_length_mm: 60.0 }));
        assert_eq!(t.shortening(), Some(25.0));
        assert_eq!(SeriesTracker::default().shortening(), None);
    }
}
