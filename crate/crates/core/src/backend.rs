//! The external segmenter protocol and backend implementations.
//!
//! A segmenter backend maps a multi-channel image patch to per-class
//! scores on the same voxel grid. The pipeline is agnostic to what
//! produces those scores: a trained network wrapped in a small adapter
//! script, a subprocess speaking the wire protocol below, or an
//! in-process rule-based stand-in.
//!
//! # Wire protocol
//!
//! Requests and responses share one frame format, exchanged over the
//! child process's stdin and stdout:
//!
//! ```text
//! offset  size  field
//! 0       4     magic, the bytes "SGB1"
//! 4       4     u32 LE  channels in this frame's payload
//! 8       4     u32 LE  classes the segmenter must score
//! 12      4     u32 LE  nx
//! 16      4     u32 LE  ny
//! 20      4     u32 LE  nz
//! 24      4     u32 LE  payload dtype; 1 = f32 little endian
//! 28      -     payload: channels * nx * ny * nz f32 values,
//!               channel-major, x fastest within a channel
//! ```
//!
//! A request carries the input channels; the response must carry one
//! payload channel per class, on the same dimensions. Exactly one request
//! is in flight per process at a time. A backend that echoes frames
//! verbatim (`/bin/cat`) is a valid segmenter whenever the channel count
//! equals the class count, which makes the subprocess plumbing testable
//! without any model tooling.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc;
use std::time::Duration;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{CoreError, Result};

/// Magic bytes opening every frame.
pub const FRAME_MAGIC: [u8; 4] = *b"SGB1";
/// Payload dtype code for little-endian f32, the only supported payload.
pub const DTYPE_F32: u32 = 1;
/// Environment variable overriding the response timeout, in whole seconds.
pub const TIMEOUT_ENV_VAR: &str = "DPARC_BACKEND_TIMEOUT_SECS";
/// Default response timeout.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(300);

/// Hard cap on payload elements per frame, to reject garbage headers
/// before allocating.
const MAX_FRAME_ELEMENTS: u64 = 1 << 31;

/// A dense multi-channel patch: `channels` scalar fields over one voxel
/// block, stored channel-major with x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTensor {
    channels: usize,
    dims: (usize, usize, usize),
    data: Vec<f32>,
}

impl PatchTensor {
    pub fn zeros(channels: usize, dims: (usize, usize, usize)) -> PatchTensor {
        let len = channels * dims.0 * dims.1 * dims.2;
        PatchTensor {
            channels,
            dims,
            data: vec![0.0; len],
        }
    }

    pub fn new(channels: usize, dims: (usize, usize, usize), data: Vec<f32>) -> Result<PatchTensor> {
        let expect = channels * dims.0 * dims.1 * dims.2;
        if data.len() != expect {
            return Err(CoreError::InvalidVolume(format!(
                "patch payload holds {} values, expected {} ({} channels over {}x{}x{})",
                data.len(),
                expect,
                channels,
                dims.0,
                dims.1,
                dims.2
            )));
        }
        Ok(PatchTensor { channels, dims, data })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    /// Voxels per channel.
    pub fn voxels(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize, c: usize) -> usize {
        let (nx, ny, nz) = self.dims;
        debug_assert!(x < nx && y < ny && z < nz && c < self.channels);
        x + nx * (y + ny * (z + nz * c))
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize, c: usize) -> f32 {
        self.data[self.index(x, y, z, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, c: usize, value: f32) {
        let i = self.index(x, y, z, c);
        self.data[i] = value;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// One channel's voxels as a contiguous slice.
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }
}

/// Writes one frame. `classes` goes into the header so a stateless
/// process can size its response from the request alone.
pub fn encode_frame(writer: &mut dyn Write, patch: &PatchTensor, classes: usize) -> Result<()> {
    let io_err = |e: std::io::Error| CoreError::BackendProcess(format!("writing request: {e}"));
    writer.write_all(&FRAME_MAGIC).map_err(io_err)?;
    writer
        .write_u32::<LittleEndian>(patch.channels as u32)
        .map_err(io_err)?;
    writer.write_u32::<LittleEndian>(classes as u32).map_err(io_err)?;
    writer.write_u32::<LittleEndian>(patch.dims.0 as u32).map_err(io_err)?;
    writer.write_u32::<LittleEndian>(patch.dims.1 as u32).map_err(io_err)?;
    writer.write_u32::<LittleEndian>(patch.dims.2 as u32).map_err(io_err)?;
    writer.write_u32::<LittleEndian>(DTYPE_F32).map_err(io_err)?;
    let mut bytes = Vec::with_capacity(patch.data.len() * 4);
    for v in &patch.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    writer.write_all(&bytes).map_err(io_err)?;
    writer.flush().map_err(io_err)
}

/// A decoded frame: the payload tensor plus the class count its header
/// announced.
#[derive(Debug, Clone)]
pub struct Frame {
    pub patch: PatchTensor,
    pub classes: usize,
}

/// Reads one frame, validating the header before allocating the payload.
pub fn decode_frame(reader: &mut dyn Read) -> Result<Frame> {
    let proto = |msg: String| CoreError::BackendProtocol(msg);
    let mut magic = [0u8; 4];
    reader
        .read_exact(&mut magic)
        .map_err(|e| proto(format!("reading frame header: {e}")))?;
    if magic != FRAME_MAGIC {
        return Err(proto(format!(
            "bad frame magic {magic:?}, expected {FRAME_MAGIC:?}"
        )));
    }
    let mut words = [0u32; 6];
    for w in &mut words {
        *w = reader
            .read_u32::<LittleEndian>()
            .map_err(|e| proto(format!("reading frame header: {e}")))?;
    }
    let [channels, classes, nx, ny, nz, dtype] = words;
    if dtype != DTYPE_F32 {
        return Err(proto(format!("unsupported payload dtype {dtype}, expected 1 (f32)")));
    }
    if channels == 0 || nx == 0 || ny == 0 || nz == 0 {
        return Err(proto(format!(
            "degenerate frame geometry: {channels} channels over {nx}x{ny}x{nz}"
        )));
    }
    let elements = channels as u128 * nx as u128 * ny as u128 * nz as u128;
    if elements > MAX_FRAME_ELEMENTS as u128 {
        return Err(proto(format!("frame payload of {elements} values exceeds the protocol cap")));
    }
    let mut bytes = vec![0u8; elements as usize * 4];
    reader
        .read_exact(&mut bytes)
        .map_err(|e| proto(format!("reading frame payload: {e}")))?;
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let patch = PatchTensor::new(
        channels as usize,
        (nx as usize, ny as usize, nz as usize),
        data,
    )?;
    Ok(Frame {
        patch,
        classes: classes as usize,
    })
}

/// A segmenter: scores `classes()` classes for every voxel of a patch
/// with `channels()` input channels.
pub trait SegmenterBackend {
    fn channels(&self) -> usize;
    fn classes(&self) -> usize;
    /// Scores one patch. The result has `classes()` channels on the input
    /// dimensions. Scores may be raw logits or probabilities; the caller
    /// normalizes.
    fn predict(&mut self, input: &PatchTensor) -> Result<PatchTensor>;
}

fn parse_timeout(raw: Option<&str>) -> Result<Duration> {
    match raw {
        None => Ok(DEFAULT_TIMEOUT),
        Some(text) => match text.trim().parse::<u64>() {
            Ok(secs) if secs > 0 => Ok(Duration::from_secs(secs)),
            _ => Err(CoreError::Config(format!(
                "{TIMEOUT_ENV_VAR} must be a positive integer number of seconds, found {text:?}"
            ))),
        },
    }
}

/// A segmenter running as a child process speaking the frame protocol.
///
/// One request is in flight at a time; the response is awaited on a
/// dedicated reader thread so a hung backend trips a timeout instead of
/// blocking the pipeline forever.
pub struct SubprocessBackend {
    describe: String,
    channels: usize,
    classes: usize,
    timeout: Duration,
    child: Child,
    stdin: Option<ChildStdin>,
    responses: mpsc::Receiver<Result<Frame>>,
}

impl SubprocessBackend {
    /// Spawns `command` (program plus arguments). The timeout comes from
    /// the `DPARC_BACKEND_TIMEOUT_SECS` environment variable, defaulting
    /// to five minutes.
    pub fn spawn(command: &[String], channels: usize, classes: usize) -> Result<SubprocessBackend> {
        let timeout = parse_timeout(std::env::var(TIMEOUT_ENV_VAR).ok().as_deref())?;
        Self::spawn_with_timeout(command, channels, classes, timeout)
    }

    pub fn spawn_with_timeout(
        command: &[String],
        channels: usize,
        classes: usize,
        timeout: Duration,
    ) -> Result<SubprocessBackend> {
        let program = command
            .first()
            .ok_or_else(|| CoreError::Config("backend command is empty".to_string()))?;
        if channels == 0 || classes == 0 {
            return Err(CoreError::Config(format!(
                "backend {program:?} declared with {channels} channels and {classes} classes; both must be positive"
            )));
        }
        let describe = command.join(" ");
        let mut child = Command::new(program)
            .args(&command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| CoreError::BackendProcess(format!("spawning {describe:?}: {e}")))?;
        let stdin = child.stdin.take().expect("stdin was piped");
        let mut stdout = child.stdout.take().expect("stdout was piped");
        let (tx, rx) = mpsc::channel();
        let reader_describe = describe.clone();
        std::thread::Builder::new()
            .name("backend-reader".to_string())
            .spawn(move || loop {
                // A clean end of stream at a frame boundary means the
                // process went away; mid-frame truncation is a protocol
                // violation reported by the decoder itself.
                let mut first = [0u8; 1];
                let frame = loop {
                    match stdout.read(&mut first) {
                        Ok(0) => {
                            break Err(CoreError::BackendProcess(format!(
                                "backend {reader_describe:?} closed its output before replying"
                            )))
                        }
                        Ok(_) => {
                            let mut rest = first.as_slice().chain(&mut stdout);
                            break decode_frame(&mut rest);
                        }
                        Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
                        Err(e) => {
                            break Err(CoreError::BackendProcess(format!(
                                "reading from backend {reader_describe:?}: {e}"
                            )))
                        }
                    }
                };
                let failed = frame.is_err();
                if tx.send(frame).is_err() || failed {
                    break;
                }
            })
            .map_err(|e| CoreError::BackendProcess(format!("starting reader thread: {e}")))?;
        Ok(SubprocessBackend {
            describe,
            channels,
            classes,
            timeout,
            child,
            stdin: Some(stdin),
            responses: rx,
        })
    }

    fn validate_response(&self, frame: Frame, input: &PatchTensor) -> Result<PatchTensor> {
        let got = &frame.patch;
        if got.channels() != self.classes {
            return Err(CoreError::BackendProtocol(format!(
                "backend {:?} replied with {} channels, expected one per class ({})",
                self.describe,
                got.channels(),
                self.classes
            )));
        }
        if got.dims() != input.dims() {
            return Err(CoreError::BackendProtocol(format!(
                "backend {:?} replied on a {:?} grid, request was {:?}",
                self.describe,
                got.dims(),
                input.dims()
            )));
        }
        Ok(frame.patch)
    }
}

impl SegmenterBackend for SubprocessBackend {
    fn channels(&self) -> usize {
        self.channels
    }

    fn classes(&self) -> usize {
        self.classes
    }

    fn predict(&mut self, input: &PatchTensor) -> Result<PatchTensor> {
        if input.channels() != self.channels {
            return Err(CoreError::BackendProtocol(format!(
                "request has {} channels, backend {:?} expects {}",
                input.channels(),
                self.describe,
                self.channels
            )));
        }
        let stdin = self.stdin.as_mut().ok_or_else(|| {
            CoreError::BackendProcess(format!("backend {:?} was already shut down", self.describe))
        })?;
        encode_frame(stdin, input, self.classes)
            .map_err(|e| CoreError::BackendProcess(format!("backend {:?}: {e}", self.describe)))?;
        match self.responses.recv_timeout(self.timeout) {
            Ok(Ok(frame)) => self.validate_response(frame, input),
            Ok(Err(e)) => Err(e),
            Err(mpsc::RecvTimeoutError::Timeout) => {
                let _ = self.child.kill();
                let _ = self.child.wait();
                Err(CoreError::BackendProcess(format!(
                    "backend {:?} did not reply within {}s (set {TIMEOUT_ENV_VAR} to adjust)",
                    self.describe,
                    self.timeout.as_secs()
                )))
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => {
                let status = self
                    .child
                    .try_wait()
                    .ok()
                    .flatten()
                    .map(|s| format!(" (exit status {s})"))
                    .unwrap_or_default();
                Err(CoreError::BackendProcess(format!(
                    "backend {:?} closed its output before replying{status}",
                    self.describe
                )))
            }
        }
    }
}

impl Drop for SubprocessBackend {
    fn drop(&mut self) {
        drop(self.stdin.take());
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// An in-process backend scoring every voxel with the same fixed vector,
/// regardless of input. Useful for exercising the inference driver: the
/// final labeling must be invariant to tiling choices.
#[derive(Debug, Clone)]
pub struct ConstantBackend {
    channels: usize,
    scores: Vec<f32>,
}

impl ConstantBackend {
    pub fn new(channels: usize, scores: Vec<f32>) -> ConstantBackend {
        assert!(!scores.is_empty(), "a backend needs at least one class");
        ConstantBackend { channels, scores }
    }
}

impl SegmenterBackend for ConstantBackend {
    fn channels(&self) -> usize {
        self.channels
    }

    fn classes(&self) -> usize {
        self.scores.len()
    }

    fn predict(&mut self, input: &PatchTensor) -> Result<PatchTensor> {
        let mut out = PatchTensor::zeros(self.scores.len(), input.dims());
        let n = out.voxels();
        for (c, &s) in self.scores.iter().enumerate() {
            out.data_mut()[c * n..(c + 1) * n].fill(s);
        }
        Ok(out)
    }
}

/// An in-process backend that reads an integer label straight out of one
/// input channel and emits the matching one-hot class scores.
///
/// Value `labels[j]` (after rounding) maps to class `j + 1`; anything
/// else maps to class 0. Stacking a label image into the decoded channel
/// therefore makes this backend a perfect segmenter for that image,
/// which pins down the whole inference path without any trained model.
#[derive(Debug, Clone)]
pub struct LabelDecodingBackend {
    channels: usize,
    decode_channel: usize,
    class_of: HashMap<i32, usize>,
    classes: usize,
}

impl LabelDecodingBackend {
    pub fn new(channels: usize, decode_channel: usize, labels: &[i32]) -> Result<LabelDecodingBackend> {
        if decode_channel >= channels {
            return Err(CoreError::Config(format!(
                "decode channel {decode_channel} out of range for {channels} channels"
            )));
        }
        let mut class_of = HashMap::new();
        for (j, &label) in labels.iter().enumerate() {
            if class_of.insert(label, j + 1).is_some() {
                return Err(CoreError::Config(format!("label {label} listed twice")));
            }
        }
        Ok(LabelDecodingBackend {
            channels,
            decode_channel,
            class_of,
            classes: labels.len() + 1,
        })
    }
}

impl SegmenterBackend for LabelDecodingBackend {
    fn channels(&self) -> usize {
        self.channels
    }

    fn classes(&self) -> usize {
        self.classes
    }

    fn predict(&mut self, input: &PatchTensor) -> Result<PatchTensor> {
        if input.channels() != self.channels {
            return Err(CoreError::BackendProtocol(format!(
                "request has {} channels, decoder expects {}",
                input.channels(),
                self.channels
            )));
        }
        let n = input.voxels();
        let mut out = PatchTensor::zeros(self.classes, input.dims());
        let coded = input.channel(self.decode_channel);
        for (i, &v) in coded.iter().enumerate() {
            let class = self
                .class_of
                .get(&(v.round() as i32))
                .copied()
                .unwrap_or(0);
            out.data_mut()[class * n + i] = 1.0;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn sample_patch() -> PatchTensor {
        let dims = (3, 2, 2);
        let mut patch = PatchTensor::zeros(2, dims);
        for (i, v) in patch.data_mut().iter_mut().enumerate() {
            *v = i as f32 * 0.5 - 3.0;
        }
        patch
    }

    #[test]
    fn frame_round_trips_through_the_wire_format() {
        let patch = sample_patch();
        let mut buf = Vec::new();
        encode_frame(&mut buf, &patch, 9).unwrap();
        assert_eq!(buf.len(), 28 + patch.data().len() * 4);
        assert_eq!(&buf[..4], b"SGB1");
        let frame = decode_frame(&mut Cursor::new(buf)).unwrap();
        assert_eq!(frame.classes, 9);
        assert_eq!(frame.patch, patch);
    }

    #[test]
    fn decode_rejects_corrupt_headers() {
        let patch = sample_patch();
        let mut good = Vec::new();
        encode_frame(&mut good, &patch, 4).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        let err = decode_frame(&mut Cursor::new(bad_magic)).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");

        let mut bad_dtype = good.clone();
        bad_dtype[24] = 7;
        let err = decode_frame(&mut Cursor::new(bad_dtype)).unwrap_err();
        assert!(err.to_string().contains("dtype"), "{err}");

        let truncated = &good[..good.len() - 3];
        let err = decode_frame(&mut Cursor::new(truncated.to_vec())).unwrap_err();
        assert!(err.to_string().contains("payload"), "{err}");

        let mut zero_dim = good.clone();
        zero_dim[12..16].fill(0);
        let err = decode_frame(&mut Cursor::new(zero_dim)).unwrap_err();
        assert!(err.to_string().contains("degenerate"), "{err}");
    }

    #[test]
    fn oversized_header_is_rejected_before_allocation() {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"SGB1");
        for word in [u32::MAX, 1, u32::MAX, u32::MAX, u32::MAX, 1] {
            buf.extend_from_slice(&word.to_le_bytes());
        }
        let err = decode_frame(&mut Cursor::new(buf)).unwrap_err();
        assert!(err.to_string().contains("cap"), "{err}");
    }

    #[test]
    fn cat_is_a_valid_echo_backend() {
        let mut backend =
            SubprocessBackend::spawn_with_timeout(&["/bin/cat".to_string()], 2, 2, Duration::from_secs(20))
                .unwrap();
        let patch = sample_patch();
        let out = backend.predict(&patch).unwrap();
        assert_eq!(out, patch);
        // A second round trip exercises frame boundaries on the stream.
        let out = backend.predict(&patch).unwrap();
        assert_eq!(out, patch);
    }

    #[test]
    fn echo_with_mismatched_class_count_is_a_protocol_error() {
        let mut backend =
            SubprocessBackend::spawn_with_timeout(&["/bin/cat".to_string()], 2, 5, Duration::from_secs(20))
                .unwrap();
        let err = backend.predict(&sample_patch()).unwrap_err();
        assert!(err.to_string().contains("expected one per class"), "{err}");
    }

    #[test]
    fn hung_backend_times_out() {
        let cmd = vec!["/bin/sh".to_string(), "-c".to_string(), "sleep 60".to_string()];
        let mut backend =
            SubprocessBackend::spawn_with_timeout(&cmd, 1, 1, Duration::from_millis(200)).unwrap();
        let err = backend.predict(&PatchTensor::zeros(1, (2, 2, 2))).unwrap_err();
        assert!(err.to_string().contains("did not reply"), "{err}");
        assert_eq!(err.kind(), crate::error::ErrorKind::Backend);
    }

    #[test]
    fn exiting_backend_reports_early_shutdown() {
        let cmd = vec!["/bin/sh".to_string(), "-c".to_string(), "exit 0".to_string()];
        let mut backend =
            SubprocessBackend::spawn_with_timeout(&cmd, 1, 1, Duration::from_secs(20)).unwrap();
        let err = backend.predict(&PatchTensor::zeros(1, (2, 2, 2))).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("before replying") || msg.contains("writing request"),
            "{msg}"
        );
    }

    #[test]
    fn timeout_env_parsing() {
        assert_eq!(parse_timeout(None).unwrap(), DEFAULT_TIMEOUT);
        assert_eq!(parse_timeout(Some("42")).unwrap(), Duration::from_secs(42));
        assert_eq!(parse_timeout(Some(" 7 ")).unwrap(), Duration::from_secs(7));
        assert!(parse_timeout(Some("0")).is_err());
        assert!(parse_timeout(Some("-3")).is_err());
        assert!(parse_timeout(Some("soon")).is_err());
    }

    #[test]
    fn constant_backend_fills_every_voxel() {
        let mut backend = ConstantBackend::new(3, vec![0.1, 0.7, 0.2]);
        let out = backend.predict(&PatchTensor::zeros(3, (2, 2, 1))).unwrap();
        assert_eq!(out.channels(), 3);
        for z in 0..1 {
            for y in 0..2 {
                for x in 0..2 {
                    assert_eq!(out.get(x, y, z, 1), 0.7);
                }
            }
        }
    }

    #[test]
    fn label_decoder_emits_one_hot_classes() {
        // Values 10 and 30 map to classes 1 and 2; everything else to 0.
        let mut backend = LabelDecodingBackend::new(2, 1, &[10, 30]).unwrap();
        let mut input = PatchTensor::zeros(2, (2, 1, 1));
        input.set(0, 0, 0, 1, 10.2);
        input.set(1, 0, 0, 1, 5.0);
        let out = backend.predict(&input).unwrap();
        assert_eq!(out.channels(), 3);
        assert_eq!(out.get(0, 0, 0, 0), 0.0);
        assert_eq!(out.get(0, 0, 0, 1), 1.0);
        assert_eq!(out.get(1, 0, 0, 0), 1.0);
        assert_eq!(out.get(1, 0, 0, 2), 0.0);
    }

    #[test]
    fn label_decoder_rejects_bad_configuration() {
        assert!(LabelDecodingBackend::new(2, 5, &[1]).is_err());
        assert!(LabelDecodingBackend::new(2, 0, &[1, 1]).is_err());
    }
}
