//! The detector boundary.
//!
//! Detectors are reached through a [`DetectorHandle`], either in process or
//! as a subprocess speaking newline-delimited JSON over its standard
//! streams:
//!
//! ```text
//! endpoint -> {"proto":"redb/1","prenms":true,"train":true}
//! curator  -> {"cmd":"infer","frame_id":"f0","points":"/tmp/f0.bin"}
//! endpoint -> {"frame_id":"f0","postnms":[{"cx":..,"class":1,"score":0.9}],"prenms":[..]}
//! curator  -> {"cmd":"train","manifest":"/out/round_1/manifest.tsv"}
//! endpoint -> {"ok":true}
//! curator  -> {"cmd":"shutdown"}
//! ```
//!
//! Any request may instead be answered with `{"error":"..."}`.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use redb_core::{Box3D, InferenceResult, PointCloud};

use crate::error::{Error, Result};
use crate::io::{read_manifest, read_points, write_points, FrameManifest};

pub use redb_core::detection::filter_confident;

pub const PROTO_VERSION: &str = "redb/1";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub prenms: bool,
    pub train: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Handshake {
    pub proto: String,
    pub prenms: bool,
    pub train: bool,
}

impl Handshake {
    pub fn new(caps: Capabilities) -> Self {
        Handshake {
            proto: PROTO_VERSION.to_string(),
            prenms: caps.prenms,
            train: caps.train,
        }
    }

    pub fn capabilities(&self) -> Capabilities {
        Capabilities {
            prenms: self.prenms,
            train: self.train,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "lowercase")]
pub enum Request {
    Infer { frame_id: String, points: PathBuf },
    Train { manifest: PathBuf },
    Shutdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WireBox {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub yaw: f64,
    pub class: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl From<&Box3D> for WireBox {
    fn from(b: &Box3D) -> Self {
        WireBox {
            cx: b.cx,
            cy: b.cy,
            cz: b.cz,
            w: b.w,
            l: b.l,
            h: b.h,
            yaw: b.yaw,
            class: b.class_id,
            score: b.score,
        }
    }
}

impl WireBox {
    pub fn to_box(&self) -> Result<Box3D> {
        let b = Box3D {
            cx: self.cx,
            cy: self.cy,
            cz: self.cz,
            w: self.w,
            l: self.l,
            h: self.h,
            yaw: self.yaw,
            class_id: self.class,
            score: self.score,
        };
        b.validate()
            .map_err(|e| Error::Protocol(format!("malformed box record: {e}")))?;
        Ok(b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferResponse {
    pub frame_id: String,
    pub postnms: Vec<WireBox>,
    #[serde(default)]
    pub prenms: Vec<WireBox>,
}

impl From<&InferenceResult> for InferResponse {
    fn from(r: &InferenceResult) -> Self {
        InferResponse {
            frame_id: r.frame_id.clone(),
            postnms: r.postnms.iter().map(WireBox::from).collect(),
            prenms: r.prenms.iter().map(WireBox::from).collect(),
        }
    }
}

impl InferResponse {
    pub fn to_result(&self) -> Result<InferenceResult> {
        let convert = |v: &[WireBox]| v.iter().map(WireBox::to_box).collect::<Result<Vec<_>>>();
        let postnms = convert(&self.postnms)?;
        if postnms.iter().any(|b| b.score.is_none()) {
            return Err(Error::Protocol("postnms box without score".into()));
        }
        Ok(InferenceResult {
            frame_id: self.frame_id.clone(),
            postnms,
            prenms: convert(&self.prenms)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorReply {
    pub error: String,
}

pub fn encode_result(r: &InferenceResult) -> String {
    serde_json::to_string(&InferResponse::from(r)).expect("finite floats serialize")
}

pub fn decode_result(line: &str) -> Result<InferenceResult> {
    parse_reply::<InferResponse>(line)?.to_result()
}

/// Parses one reply line, turning `{"error":..}` into [`Error::Detector`].
pub fn parse_reply<T: DeserializeOwned>(line: &str) -> Result<T> {
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| Error::Protocol(format!("malformed record: {e}")))?;
    if let Some(msg) = value.get("error") {
        let msg = msg.as_str().map_or_else(|| msg.to_string(), str::to_string);
        if msg.starts_with("unsupported") {
            return Err(Error::Unsupported("train"));
        }
        return Err(Error::Detector(msg));
    }
    serde_json::from_value(value).map_err(|e| Error::Protocol(format!("malformed record: {e}")))
}

/// A 3D detector `F(.; theta)` behind the protocol. Implementations need not
/// be safe for concurrent use; the pipeline runs one request per handle.
pub trait Detector: Send {
    fn capabilities(&self) -> Capabilities;

    /// `path` is set when the cloud already exists on disk.
    fn infer(&mut self, frame_id: &str, cloud: &PointCloud, path: Option<&Path>) -> Result<InferenceResult>;

    fn train(&mut self, manifest_path: &Path, manifest: &FrameManifest) -> Result<()>;

    fn shutdown(&mut self) -> Result<()> {
        Ok(())
    }
}

/// A live or closed detector. Operations on a closed handle fail with
/// [`Error::HandleClosed`]; a handle whose endpoint died or timed out is
/// closed automatically.
pub struct DetectorHandle {
    inner: Option<Box<dyn Detector>>,
    caps: Capabilities,
}

impl std::fmt::Debug for DetectorHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DetectorHandle")
            .field("live", &self.is_live())
            .field("caps", &self.caps)
            .finish()
    }
}

impl DetectorHandle {
    pub fn new(detector: impl Detector + 'static) -> Self {
        Self::from_box(Box::new(detector))
    }

    pub fn from_box(detector: Box<dyn Detector>) -> Self {
        DetectorHandle {
            caps: detector.capabilities(),
            inner: Some(detector),
        }
    }

    pub fn spawn(argv: &[String], timeout: Duration) -> Result<Self> {
        Ok(Self::new(SubprocessDetector::spawn(argv, timeout)?))
    }

    pub fn capabilities(&self) -> Capabilities {
        self.caps
    }

    pub fn is_live(&self) -> bool {
        self.inner.is_some()
    }

    fn live(&mut self) -> Result<&mut Box<dyn Detector>> {
        self.inner.as_mut().ok_or(Error::HandleClosed)
    }

    fn fail(&mut self, e: Error) -> Error {
        if matches!(e, Error::Timeout(_) | Error::EndpointExited) {
            self.inner = None;
        }
        e
    }

    pub fn infer(&mut self, frame_id: &str, cloud: &PointCloud, path: Option<&Path>) -> Result<InferenceResult> {
        let prenms = self.caps.prenms;
        let mut r = match self.live()?.infer(frame_id, cloud, path) {
            Ok(r) => r,
            Err(e) => return Err(self.fail(e)),
        };
        if r.frame_id != frame_id {
            return Err(Error::Protocol(format!(
                "response for frame {:?} to a request for {frame_id:?}",
                r.frame_id
            )));
        }
        if !prenms {
            r.prenms.clear();
        }
        Ok(r)
    }

    /// The detector retrains on `manifest`. Only an
    /// acknowledgment is guaranteed.
    pub fn train(&mut self, manifest_path: &Path, manifest: &FrameManifest) -> Result<()> {
        if manifest.is_empty() {
            return Err(Error::Validation("train manifest is empty".into()));
        }
        manifest.require_labels().map_err(Error::Validation)?;
        self.live()?;
        if !self.caps.train {
            return Err(Error::Unsupported("train"));
        }
        match self.live()?.train(manifest_path, manifest) {
            Ok(()) => Ok(()),
            Err(e) => Err(self.fail(e)),
        }
    }

    pub fn close(&mut self) -> Result<()> {
        match self.inner.take() {
            Some(mut d) => d.shutdown(),
            None => Ok(()),
        }
    }
}

impl Drop for DetectorHandle {
    fn drop(&mut self) {
        let _ = self.close();
    }
}

/// An external endpoint launched as a child process.
pub struct SubprocessDetector {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
    timeout: Duration,
    caps: Capabilities,
    scratch: tempfile::TempDir,
    sent: u64,
}

impl SubprocessDetector {
    pub fn spawn(argv: &[String], timeout: Duration) -> Result<Self> {
        let Some((program, args)) = argv.split_first() else {
            return Err(Error::Config("empty detector command".into()));
        };
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::io(program, e))?;
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        let scratch = tempfile::Builder::new()
            .prefix("redb-detector-")
            .tempdir()
            .map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let mut det = SubprocessDetector {
            stdin: child.stdin.take(),
            child,
            lines: rx,
            timeout,
            caps: Capabilities {
                prenms: false,
                train: false,
            },
            scratch,
            sent: 0,
        };
        let hello: Handshake = parse_reply(&det.recv()?)?;
        if hello.proto != PROTO_VERSION {
            return Err(Error::Protocol(format!("unsupported protocol {:?}", hello.proto)));
        }
        det.caps = hello.capabilities();
        Ok(det)
    }

    fn send(&mut self, req: &Request) -> Result<()> {
        let stdin = self.stdin.as_mut().ok_or(Error::EndpointExited)?;
        let mut line = serde_json::to_string(req).expect("requests serialize");
        line.push('\n');
        stdin
            .write_all(line.as_bytes())
            .and_then(|()| stdin.flush())
            .map_err(|_| Error::EndpointExited)
    }

    fn recv(&mut self) -> Result<String> {
        loop {
            match self.lines.recv_timeout(self.timeout) {
                Ok(Ok(line)) if line.trim().is_empty() => continue,
                Ok(Ok(line)) => return Ok(line),
                Ok(Err(e)) => return Err(Error::Protocol(format!("unreadable reply: {e}"))),
                Err(RecvTimeoutError::Timeout) => return Err(Error::Timeout(self.timeout)),
                Err(RecvTimeoutError::Disconnected) => return Err(Error::EndpointExited),
            }
        }
    }
}

impl Detector for SubprocessDetector {
    fn capabilities(&self) -> Capabilities {
        self.caps
    }

    fn infer(&mut self, frame_id: &str, cloud: &PointCloud, path: Option<&Path>) -> Result<InferenceResult> {
        let scratch_file;
        let points = match path {
            Some(p) => p.to_path_buf(),
            None => {
                self.sent += 1;
                scratch_file = self.scratch.path().join(format!("cloud-{}.bin", self.sent));
                write_points(cloud, &scratch_file)?;
                scratch_file.clone()
            }
        };
        self.send(&Request::Infer {
            frame_id: frame_id.to_string(),
            points: points.clone(),
        })?;
        let reply = self.recv();
        if path.is_none() {
            let _ = std::fs::remove_file(&points);
        }
        decode_result(&reply?)
    }

    fn train(&mut self, manifest_path: &Path, _manifest: &FrameManifest) -> Result<()> {
        let manifest = std::path::absolute(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        self.send(&Request::Train { manifest })?;
        let ack: Ack = parse_reply(&self.recv()?)?;
        if ack.ok {
            Ok(())
        } else {
            Err(Error::Detector("train not acknowledged".into()))
        }
    }

    fn shutdown(&mut self) -> Result<()> {
        if self.send(&Request::Shutdown).is_ok() {
            // The acknowledgment is optional; any reply or EOF will do.
            let _ = self.lines.recv_timeout(Duration::from_secs(2).min(self.timeout));
        }
        self.stdin = None;
        let deadline = Instant::now() + Duration::from_secs(2);
        while Instant::now() < deadline {
            if let Ok(Some(_)) = self.child.try_wait() {
                return Ok(());
            }
            thread::sleep(Duration::from_millis(10));
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
        Ok(())
    }
}

impl Drop for SubprocessDetector {
    fn drop(&mut self) {
        if self.stdin.is_some() {
            let _ = self.shutdown();
        }
    }
}

fn write_line<W: Write>(out: &mut W, line: &str) -> Result<()> {
    out.write_all(line.as_bytes())
        .and_then(|()| out.write_all(b"\n"))
        .and_then(|()| out.flush())
        .map_err(|e| Error::io("<output>", e))
}

fn error_line(msg: impl std::fmt::Display) -> String {
    serde_json::to_string(&ErrorReply { error: msg.to_string() }).expect("strings serialize")
}

/// Serves `detector` over a line stream until `shutdown` or end of input.
/// Malformed requests and failed operations get an error record and the
/// loop continues.
pub fn serve<D, R, W>(detector: &mut D, input: R, mut output: W) -> Result<()>
where
    D: Detector + ?Sized,
    R: BufRead,
    W: Write,
{
    let caps = detector.capabilities();
    write_line(&mut output, &serde_json::to_string(&Handshake::new(caps)).expect("serialize"))?;
    let ok = serde_json::to_string(&Ack { ok: true }).expect("serialize");
    for line in input.lines() {
        let line = line.map_err(|e| Error::io("<input>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<Request>(&line) {
            Err(e) => error_line(format_args!("malformed request: {e}")),
            Ok(Request::Shutdown) => {
                write_line(&mut output, &ok)?;
                break;
            }
            Ok(Request::Infer { frame_id, points }) => {
                match read_points(&points).and_then(|c| detector.infer(&frame_id, &c, Some(&points))) {
                    Ok(mut r) => {
                        if !caps.prenms {
                            r.prenms.clear();
                        }
                        encode_result(&r)
                    }
                    Err(e) => error_line(e),
                }
            }
            Ok(Request::Train { manifest }) if !caps.train => {
                let _ = manifest;
                error_line("unsupported command: train")
            }
            Ok(Request::Train { manifest }) => {
                let trained = read_manifest(&manifest).and_then(|m| {
                    if m.is_empty() {
                        return Err(Error::Validation("train manifest is empty".into()));
                    }
                    detector.train(&manifest, &m)
                });
                match trained {
                    Ok(()) => ok.clone(),
                    Err(e) => error_line(e),
                }
            }
        };
        write_line(&mut output, &reply)?;
    }
    detector.shutdown()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wire_shapes() {
        let req: Request = serde_json::from_str(r#"{"points":"/p.bin","cmd":"infer","frame_id":"a","x":1}"#).unwrap();
        assert_eq!(
            req,
            Request::Infer {
                frame_id: "a".into(),
                points: "/p.bin".into()
            }
        );
        assert_eq!(serde_json::to_string(&Request::Shutdown).unwrap(), r#"{"cmd":"shutdown"}"#);
        let hs = serde_json::to_string(&Handshake::new(Capabilities { prenms: true, train: false })).unwrap();
        assert_eq!(hs, r#"{"proto":"redb/1","prenms":true,"train":false}"#);
    }

    #[test]
    fn reply_errors() {
        assert!(matches!(parse_reply::<Ack>(r#"{"error":"boom"}"#), Err(Error::Detector(m)) if m == "boom"));
        assert!(matches!(parse_reply::<Ack>("not json"), Err(Error::Protocol(_))));
        assert!(matches!(
            decode_result(r#"{"frame_id":"a","postnms":[{"cx":0,"cy":0,"cz":0,"w":1,"l":1,"h":1,"yaw":0,"class":1}]}"#),
            Err(Error::Protocol(_))
        ));
        assert!(matches!(
            decode_result(r#"{"frame_id":"a","postnms":[{"cx":0,"cy":0,"cz":0,"w":-1,"l":1,"h":1,"yaw":0,"class":1,"score":0.5}]}"#),
            Err(Error::Protocol(_))
        ));
        let r = decode_result(r#"{"frame_id":"a","postnms":[]}"#).unwrap();
        assert!(r.prenms.is_empty());
    }
}
