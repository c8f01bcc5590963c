//! A deterministic stand-in segmenter speaking the stdin/stdout frame
//! protocol.
//!
//! It decodes labels straight from one input channel: a voxel whose
//! channel value rounds to the j-th configured label scores one for
//! class j + 1, anything else scores the background class. Wiring a
//! pipeline's map channels so that this channel carries the expected
//! labels gives an exact, network-free end-to-end test of the
//! orchestration.

use std::io::{BufRead, BufReader, Write};
use std::process::ExitCode;

use clap::Parser;
use dparc_core::backend::{decode_frame, encode_frame, LabelDecodingBackend, SegmenterBackend};
use dparc_core::{CoreError, ErrorKind, Result};

#[derive(Parser)]
#[command(
    name = "dparc-oracle-backend",
    version,
    about = "Echo-style segmenter backend that decodes labels from an input channel"
)]
struct Args {
    /// Input channels per request.
    #[arg(long)]
    channels: usize,
    /// Classes per response: background plus one per label.
    #[arg(long)]
    classes: usize,
    /// Zero-based channel holding the encoded labels.
    #[arg(long, default_value_t = 0)]
    decode_channel: usize,
    /// Comma separated labels decoded to classes 1, 2, ...
    #[arg(long, value_delimiter = ',')]
    labels: Vec<i32>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    match serve(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(match err.kind() {
                ErrorKind::Validation => 2,
                ErrorKind::Runtime => 3,
                ErrorKind::Backend => 4,
            })
        }
    }
}

fn serve(args: Args) -> Result<()> {
    let mut backend = LabelDecodingBackend::new(args.channels, args.decode_channel, &args.labels)?;
    if backend.classes() != args.classes {
        return Err(CoreError::Config(format!(
            "{} labels imply {} classes, got --classes {}",
            args.labels.len(),
            backend.classes(),
            args.classes
        )));
    }

    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    let mut input = BufReader::new(stdin.lock());
    let mut output = stdout.lock();
    loop {
        let at_eof = input
            .fill_buf()
            .map_err(|e| CoreError::BackendProcess(format!("reading request: {e}")))?
            .is_empty();
        if at_eof {
            return Ok(());
        }
        let frame = decode_frame(&mut input)?;
        if frame.classes != args.classes {
            return Err(CoreError::BackendProtocol(format!(
                "request asks for {} classes, serving {}",
                frame.classes, args.classes
            )));
        }
        let scores = backend.predict(&frame.patch)?;
        encode_frame(&mut output, &scores, frame.classes)?;
        output
            .flush()
            .map_err(|e| CoreError::BackendProcess(format!("writing response: {e}")))?;
    }
}
