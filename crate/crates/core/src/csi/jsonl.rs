//! JSON-lines import. The first non-blank line is the header object
//! `{"n_sc":56,"n_r":3,"n_t":3,"label":1,"day_id":"d1"}` (label may be
//! `null`); every following line is a frame
//! `{"timestamp_us":0,"h":[[re,im],...]}` in canonical coefficient order.

use std::io::{BufRead, Write};

use ndarray::Array3;
use num_complex::Complex64;
use serde::Deserialize;

use super::{CsiError, CsiFrame, CsiWriter, Label, StreamHeader};

#[derive(Deserialize)]
struct HeaderLine {
    n_sc: usize,
    n_r: usize,
    n_t: usize,
    #[serde(default)]
    label: Option<u8>,
    #[serde(default)]
    day_id: String,
}

#[derive(Deserialize)]
struct FrameLine {
    timestamp_us: u64,
    h: Vec<[f64; 2]>,
}

/// Converts a JSON-lines stream into the canonical binary format. Returns the
/// header and number of frames written.
pub fn import_jsonl<R: BufRead, W: Write>(input: R, output: W) -> Result<(StreamHeader, usize), CsiError> {
    let mut writer = CsiWriter::new(output);
    let mut header: Option<StreamHeader> = None;
    let mut frames = 0usize;
    let mut offset = 0u64;
    for line in input.lines() {
        let line = line?;
        let line_offset = offset;
        offset += line.len() as u64 + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| CsiError::Parse {
            offset: line_offset,
            msg: e.to_string(),
        };
        match &header {
            None => {
                let h: HeaderLine = serde_json::from_str(trimmed).map_err(parse_err)?;
                let label = match h.label {
                    None | Some(255) => None,
                    Some(v) => Some(Label::from_u8(v).ok_or_else(|| CsiError::Parse {
                        offset: line_offset,
                        msg: format!("label must be 0, 1 or null, got {v}"),
                    })?),
                };
                let sh = StreamHeader::new(h.n_sc, h.n_r, h.n_t, label, h.day_id);
                writer.begin_stream(&sh, None)?;
                header = Some(sh);
            }
            Some(sh) => {
                let f: FrameLine = serde_json::from_str(trimmed).map_err(parse_err)?;
                let n = sh.n_sc * sh.n_r * sh.n_t;
                if f.h.len() != n {
                    return Err(CsiError::Parse {
                        offset: line_offset,
                        msg: format!("expected {n} coefficients, got {}", f.h.len()),
                    });
                }
                let data = f.h.iter().map(|[re, im]| Complex64::new(*re, *im)).collect();
                let h = Array3::from_shape_vec(sh.shape(), data).expect("length checked");
                writer
                    .write_frame(&CsiFrame::new(f.timestamp_us, h))
                    .map_err(|e| match e {
                        CsiError::NonMonotonicTimestamp { prev, got } => CsiError::Parse {
                            offset: line_offset,
                            msg: format!("timestamp {got} not after {prev}"),
                        },
                        other => other,
                    })?;
                frames += 1;
            }
        }
    }
    let header = header.ok_or(CsiError::Parse {
        offset: 0,
        msg: "empty input, no header line".into(),
    })?;
    writer.finish()?;
    Ok((header, frames))
}
