//! Canonical little-endian CSI stream format.
//!
//! ```text
//! "CSI1" | n_sc u16 | n_r u16 | n_t u16 | flags u16 | label u8 | day_id_len u16 | day_id
//!        | [frame_count u32 when flags bit 1]
//! frame: timestamp_us u64 | n_sc*n_r*n_t × (re f32, im f32)   subcarrier-major, then rx, then tx
//! ```
//!
//! Without bit 1 a stream runs to end of input. With bit 1 the header
//! announces its frame count and another header (or EOF) follows, so several
//! labeled segments can share one file.

use std::io::{ErrorKind, Read, Write};

use ndarray::Array3;
use num_complex::Complex64;

use super::{CsiError, CsiFrame, Label, StreamHeader};

pub const MAGIC: &[u8; 4] = b"CSI1";
pub const FLAG_LABEL: u16 = 0x0001;
pub const FLAG_SEGMENT_LEN: u16 = 0x0002;
const UNLABELED: u8 = 255;

/// Streaming encoder.
pub struct CsiWriter<W: Write> {
    inner: W,
    shape: Option<(usize, usize, usize)>,
    remaining: Option<u32>,
    last_ts: Option<u64>,
    buf: Vec<u8>,
}

impl<W: Write> CsiWriter<W> {
    pub fn new(inner: W) -> Self {
        Self {
            inner,
            shape: None,
            remaining: None,
            last_ts: None,
            buf: Vec::new(),
        }
    }

    /// Starts a stream. With `frame_count` the segment is self-delimiting and
    /// exactly that many frames must follow.
    pub fn begin_stream(&mut self, header: &StreamHeader, frame_count: Option<u32>) -> Result<(), CsiError> {
        if let Some(n) = self.remaining {
            if n != 0 {
                return Err(CsiError::InvalidHeader(format!("previous segment still expects {n} frames")));
            }
        } else if self.shape.is_some() {
            return Err(CsiError::InvalidHeader(
                "cannot start a new stream after an unbounded one".into(),
            ));
        }
        if header.n_sc == 0 || header.n_r == 0 || header.n_t == 0 {
            return Err(CsiError::InvalidHeader("zero dimension".into()));
        }
        for v in [header.n_sc, header.n_r, header.n_t, header.day_id.len()] {
            if v > u16::MAX as usize {
                return Err(CsiError::InvalidHeader(format!("field value {v} exceeds u16")));
            }
        }
        let mut flags = 0u16;
        if header.label.is_some() {
            flags |= FLAG_LABEL;
        }
        if frame_count.is_some() {
            flags |= FLAG_SEGMENT_LEN;
        }
        let mut out = Vec::with_capacity(20 + header.day_id.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.n_sc as u16).to_le_bytes());
        out.extend_from_slice(&(header.n_r as u16).to_le_bytes());
        out.extend_from_slice(&(header.n_t as u16).to_le_bytes());
        out.extend_from_slice(&flags.to_le_bytes());
        out.push(header.label.map_or(UNLABELED, Label::as_u8));
        out.extend_from_slice(&(header.day_id.len() as u16).to_le_bytes());
        out.extend_from_slice(header.day_id.as_bytes());
        if let Some(n) = frame_count {
            out.extend_from_slice(&n.to_le_bytes());
        }
        self.inner.write_all(&out)?;
        self.shape = Some(header.shape());
        self.remaining = frame_count;
        self.last_ts = None;
        Ok(())
    }

    pub fn write_frame(&mut self, frame: &CsiFrame) -> Result<(), CsiError> {
        let shape = self
            .shape
            .ok_or_else(|| CsiError::InvalidHeader("frame written before stream header".into()))?;
        if frame.shape() != shape {
            return Err(CsiError::ShapeMismatch {
                expected: shape,
                got: frame.shape(),
            });
        }
        if let Some(prev) = self.last_ts {
            if frame.timestamp_us <= prev {
                return Err(CsiError::NonMonotonicTimestamp {
                    prev,
                    got: frame.timestamp_us,
                });
            }
        }
        match &mut self.remaining {
            Some(0) => return Err(CsiError::InvalidHeader("segment frame count exceeded".into())),
            Some(n) => *n -= 1,
            None => {}
        }
        self.buf.clear();
        self.buf.extend_from_slice(&frame.timestamp_us.to_le_bytes());
        for v in frame.h.iter() {
            self.buf.extend_from_slice(&(v.re as f32).to_le_bytes());
            self.buf.extend_from_slice(&(v.im as f32).to_le_bytes());
        }
        self.inner.write_all(&self.buf)?;
        self.last_ts = Some(frame.timestamp_us);
        Ok(())
    }

    pub fn finish(mut self) -> Result<W, CsiError> {
        if let Some(n) = self.remaining {
            if n != 0 {
                return Err(CsiError::InvalidHeader(format!("segment is {n} frames short")));
            }
        }
        self.inner.flush()?;
        Ok(self.inner)
    }
}

/// One decoded item of a CSI file.
#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Header(StreamHeader),
    Frame(CsiFrame),
}

enum State {
    ExpectHeader,
    Frames { shape: (usize, usize, usize), remaining: Option<u32>, last_ts: Option<u64> },
}

/// Streaming decoder yielding headers and frames in file order.
pub struct CsiReader<R: Read> {
    inner: R,
    offset: u64,
    state: State,
    buf: Vec<u8>,
}

impl<R: Read> CsiReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            offset: 0,
            state: State::ExpectHeader,
            buf: Vec::new(),
        }
    }

    /// Byte offset of the next unread byte.
    pub fn offset(&self) -> u64 {
        self.offset
    }

    fn parse_err(&self, offset: u64, msg: impl Into<String>) -> CsiError {
        CsiError::Parse { offset, msg: msg.into() }
    }

    /// Fills `n` bytes into the scratch buffer. Returns false on a clean EOF
    /// before the first byte.
    fn fill(&mut self, n: usize) -> Result<bool, CsiError> {
        self.buf.resize(n, 0);
        let mut got = 0;
        while got < n {
            match self.inner.read(&mut self.buf[got..]) {
                Ok(0) => {
                    if got == 0 {
                        return Ok(false);
                    }
                    return Err(self.parse_err(self.offset + got as u64, "unexpected end of input"));
                }
                Ok(k) => got += k,
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += n as u64;
        Ok(true)
    }

    fn fill_required(&mut self, n: usize) -> Result<(), CsiError> {
        if self.fill(n)? {
            Ok(())
        } else {
            Err(self.parse_err(self.offset, "unexpected end of input"))
        }
    }

    fn u16_at(&self, at: usize) -> u16 {
        u16::from_le_bytes([self.buf[at], self.buf[at + 1]])
    }

    fn read_header(&mut self) -> Result<Option<StreamHeader>, CsiError> {
        let start = self.offset;
        if !self.fill(15)? {
            return Ok(None);
        }
        if &self.buf[0..4] != MAGIC {
            return Err(self.parse_err(start, "bad magic, expected \"CSI1\""));
        }
        let (n_sc, n_r, n_t) = (self.u16_at(4) as usize, self.u16_at(6) as usize, self.u16_at(8) as usize);
        let flags = self.u16_at(10);
        let label_byte = self.buf[12];
        let id_len = self.u16_at(13) as usize;
        if flags & !(FLAG_LABEL | FLAG_SEGMENT_LEN) != 0 {
            return Err(self.parse_err(start + 10, format!("unknown flag bits {flags:#06x}")));
        }
        if n_sc == 0 || n_r == 0 || n_t == 0 {
            return Err(self.parse_err(start + 4, "zero dimension in header"));
        }
        let label = if flags & FLAG_LABEL != 0 {
            Some(Label::from_u8(label_byte).ok_or_else(|| {
                self.parse_err(start + 12, format!("label flag set but label byte is {label_byte}"))
            })?)
        } else {
            None
        };
        self.fill_required(id_len)?;
        let day_id = String::from_utf8(self.buf.clone())
            .map_err(|_| self.parse_err(start + 15, "day_id is not valid UTF-8"))?;
        let remaining = if flags & FLAG_SEGMENT_LEN != 0 {
            self.fill_required(4)?;
            Some(u32::from_le_bytes([self.buf[0], self.buf[1], self.buf[2], self.buf[3]]))
        } else {
            None
        };
        self.state = State::Frames {
            shape: (n_sc, n_r, n_t),
            remaining,
            last_ts: None,
        };
        Ok(Some(StreamHeader::new(n_sc, n_r, n_t, label, day_id)))
    }

    /// Next record, or `None` at a clean end of input.
    pub fn next_record(&mut self) -> Result<Option<Record>, CsiError> {
        loop {
            match self.state {
                State::ExpectHeader => return Ok(self.read_header()?.map(Record::Header)),
                State::Frames {
                    remaining: Some(0), ..
                } => {
                    self.state = State::ExpectHeader;
                    continue;
                }
                State::Frames {
                    shape,
                    remaining,
                    last_ts,
                } => {
                    let start = self.offset;
                    let n = shape.0 * shape.1 * shape.2;
                    if !self.fill(8 + 8 * n)? {
                        if remaining.is_some() {
                            return Err(self.parse_err(start, "segment ended before its declared frame count"));
                        }
                        return Ok(None);
                    }
                    let mut ts_bytes = [0u8; 8];
                    ts_bytes.copy_from_slice(&self.buf[..8]);
                    let ts = u64::from_le_bytes(ts_bytes);
                    if let Some(prev) = last_ts {
                        if ts <= prev {
                            return Err(self.parse_err(start, format!("timestamp {ts} not after {prev}")));
                        }
                    }
                    let data: Vec<Complex64> = self.buf[8..]
                        .chunks_exact(8)
                        .map(|c| {
                            let re = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                            let im = f32::from_le_bytes([c[4], c[5], c[6], c[7]]);
                            Complex64::new(re as f64, im as f64)
                        })
                        .collect();
                    let h = Array3::from_shape_vec(shape, data).expect("length matches shape");
                    self.state = State::Frames {
                        shape,
                        remaining: remaining.map(|r| r - 1),
                        last_ts: Some(ts),
                    };
                    return Ok(Some(Record::Frame(CsiFrame::new(ts, h))));
                }
            }
        }
    }
}

impl<R: Read> Iterator for CsiReader<R> {
    type Item = Result<Record, CsiError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_record().transpose()
    }
}

/// Convenience: write a single unbounded stream to any writer.
pub fn write_stream<W: Write>(
    out: W,
    header: &StreamHeader,
    frames: impl IntoIterator<Item = CsiFrame>,
) -> Result<W, CsiError> {
    let mut w = CsiWriter::new(out);
    w.begin_stream(header, None)?;
    for f in frames {
        w.write_frame(&f)?;
    }
    w.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csi::Label;
    use proptest::prelude::*;

    fn sample_frame(ts: u64, seed: f64) -> CsiFrame {
        CsiFrame::new(
            ts,
            Array3::from_shape_fn((4, 2, 3), |(k, q, p)| {
                Complex64::new(seed + k as f64 * 0.25, (q * 3 + p) as f64 - 0.5)
            }),
        )
    }

    #[test]
    fn header_layout_is_bit_exact() {
        let header = StreamHeader::new(56, 3, 3, Some(Label::Motion), "day-1");
        let bytes = write_stream(Vec::new(), &header, []).unwrap();
        let mut expected = b"CSI1".to_vec();
        expected.extend_from_slice(&[56, 0, 3, 0, 3, 0, 1, 0, 1, 5, 0]);
        expected.extend_from_slice(b"day-1");
        assert_eq!(bytes, expected);
    }

    #[test]
    fn frame_layout_is_subcarrier_major() {
        let header = StreamHeader::new(2, 2, 1, None, "");
        let h = Array3::from_shape_fn((2, 2, 1), |(k, q, _)| Complex64::new((k * 2 + q) as f64, -1.0));
        let bytes = write_stream(Vec::new(), &header, [CsiFrame::new(7, h)]).unwrap();
        let body = &bytes[15..];
        assert_eq!(&body[..8], &7u64.to_le_bytes());
        // third coefficient is (k=1, q=0)
        let third = f32::from_le_bytes(body[8 + 16..8 + 20].try_into().unwrap());
        assert_eq!(third, 2.0);
        assert_eq!(bytes[12], UNLABELED);
    }

    #[test]
    fn multi_segment_file() {
        let mut w = CsiWriter::new(Vec::new());
        w.begin_stream(&StreamHeader::new(4, 2, 3, Some(Label::Empty), "a"), Some(2)).unwrap();
        w.write_frame(&sample_frame(0, 1.0)).unwrap();
        w.write_frame(&sample_frame(10, 2.0)).unwrap();
        w.begin_stream(&StreamHeader::new(4, 2, 3, Some(Label::Motion), "a"), Some(1)).unwrap();
        w.write_frame(&sample_frame(0, 3.0)).unwrap();
        let bytes = w.finish().unwrap();
        let recs: Vec<_> = CsiReader::new(&bytes[..]).collect::<Result<_, _>>().unwrap();
        assert_eq!(recs.len(), 5);
        assert!(matches!(&recs[3], Record::Header(h) if h.label == Some(Label::Motion)));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let header = StreamHeader::new(4, 2, 3, None, "x");
        let mut bytes = write_stream(Vec::new(), &header, [sample_frame(1, 0.5)]).unwrap();
        let truncated = &bytes[..bytes.len() - 3];
        let err = CsiReader::new(truncated).collect::<Result<Vec<_>, _>>().unwrap_err();
        assert!(matches!(err, CsiError::Parse { .. }));
        bytes[0] = b'X';
        let err = CsiReader::new(&bytes[..]).next().unwrap().unwrap_err();
        assert!(matches!(err, CsiError::Parse { offset: 0, .. }));
    }

    #[test]
    fn writer_rejects_non_monotonic() {
        let mut w = CsiWriter::new(Vec::new());
        w.begin_stream(&StreamHeader::new(4, 2, 3, None, ""), None).unwrap();
        w.write_frame(&sample_frame(5, 0.0)).unwrap();
        assert!(matches!(
            w.write_frame(&sample_frame(5, 0.0)),
            Err(CsiError::NonMonotonicTimestamp { .. })
        ));
    }

    proptest! {
        #[test]
        fn f32_values_round_trip(values in proptest::collection::vec(-1e3f32..1e3, 24), ts in 0u64..1<<40) {
            let h = Array3::from_shape_fn((4, 2, 3), |(k, q, p)| {
                let i = (k * 2 + q) * 3 + p;
                Complex64::new(values[i] as f64, -(values[23 - i] as f64))
            });
            let frame = CsiFrame::new(ts, h);
            let header = StreamHeader::new(4, 2, 3, Some(Label::Empty), "p");
            let bytes = write_stream(Vec::new(), &header, [frame.clone()]).unwrap();
            let recs: Vec<_> = CsiReader::new(&bytes[..]).collect::<Result<_, _>>().unwrap();
            prop_assert_eq!(&recs[0], &Record::Header(header));
            prop_assert_eq!(&recs[1], &Record::Frame(frame));
        }
    }
}
