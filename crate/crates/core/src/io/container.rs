//! The PSVID sequence container.
//!
//! Little-endian layout:
//!
//! ```text
//! "PSVID"  version:u16  id_len:u16 id:[u8]  label:i32 (-1 = none)
//! c_x:u16  c_y:u16  d:u16  frames:u32
//! per frame:
//!   features: f32 * (c_x * c_y * d), cells in raster order, channel fastest
//!   proposals:u16, then (cx, cy, w, h, score): 5 * f32 each
//!   gt:u16, then (cx, cy, w, h): 4 * f32 each
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{validate_boxes, FormatError, FrameRecord, VideoSequence};
use crate::localizer::BoundingBox;
use crate::numerics::FeatureMap;

pub const PSVID_MAGIC: &[u8; 5] = b"PSVID";
pub const PSVID_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceHeader {
    pub video_id: String,
    pub label: Option<i32>,
    pub dims: (usize, usize, usize),
    pub frame_count: usize,
}

fn eof_as_truncated(context: impl Into<String>) -> impl FnOnce(io::Error) -> FormatError {
    let context = context.into();
    move |e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            FormatError::Truncated(context)
        } else {
            FormatError::Io(e)
        }
    }
}

/// Reads frames one at a time without buffering the whole file.
pub struct SequenceReader<R> {
    inner: R,
    header: SequenceHeader,
    next: usize,
}

impl SequenceReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, FormatError> {
        Self::new(BufReader::new(File::open(path)?))
    }
}

impl<R: Read> SequenceReader<R> {
    pub fn new(mut inner: R) -> Result<Self, FormatError> {
        let mut magic = [0u8; 5];
        inner.read_exact(&mut magic).map_err(eof_as_truncated("magic"))?;
        if &magic != PSVID_MAGIC {
            return Err(FormatError::BadMagic {
                expected: "PSVID",
                found: magic.to_vec(),
            });
        }
        let version = inner.read_u16::<LittleEndian>().map_err(eof_as_truncated("version"))?;
        if version != PSVID_VERSION {
            return Err(FormatError::UnsupportedVersion {
                found: version,
                supported: PSVID_VERSION,
            });
        }
        let id_len = inner.read_u16::<LittleEndian>().map_err(eof_as_truncated("video id length"))?;
        let mut id = vec![0u8; id_len as usize];
        inner.read_exact(&mut id).map_err(eof_as_truncated("video id"))?;
        let video_id =
            String::from_utf8(id).map_err(|_| FormatError::InvalidRecord("video id is not UTF-8".into()))?;
        let label = inner.read_i32::<LittleEndian>().map_err(eof_as_truncated("label"))?;
        let label = match label {
            -1 => None,
            l if l >= 0 => Some(l),
            l => return Err(FormatError::InvalidRecord(format!("negative label id {l}"))),
        };
        let mut dims = [0usize; 3];
        for d in dims.iter_mut() {
            *d = inner.read_u16::<LittleEndian>().map_err(eof_as_truncated("dims"))? as usize;
        }
        if dims.contains(&0) {
            return Err(FormatError::Dims(format!("zero dimension in {dims:?}")));
        }
        let frame_count = inner.read_u32::<LittleEndian>().map_err(eof_as_truncated("frame count"))? as usize;
        Ok(Self {
            inner,
            header: SequenceHeader {
                video_id,
                label,
                dims: (dims[0], dims[1], dims[2]),
                frame_count,
            },
            next: 0,
        })
    }

    pub fn header(&self) -> &SequenceHeader {
        &self.header
    }

    fn read_f32s(&mut self, n: usize, context: &str) -> Result<Vec<f64>, FormatError> {
        let mut buf = vec![0f32; n];
        self.inner
            .read_f32_into::<LittleEndian>(&mut buf)
            .map_err(eof_as_truncated(context))?;
        Ok(buf.into_iter().map(f64::from).collect())
    }

    fn read_boxes(&mut self, scored: bool, frame: usize) -> Result<Vec<BoundingBox>, FormatError> {
        let what = if scored { "proposals" } else { "ground truth" };
        let count = self
            .inner
            .read_u16::<LittleEndian>()
            .map_err(eof_as_truncated(format!("frame {frame} {what} count")))? as usize;
        let stride = if scored { 5 } else { 4 };
        let raw = self.read_f32s(count * stride, &format!("frame {frame} {what}"))?;
        let boxes: Vec<BoundingBox> = raw
            .chunks_exact(stride)
            .map(|c| BoundingBox {
                cx: c[0],
                cy: c[1],
                w: c[2],
                h: c[3],
                score: scored.then(|| c[4]),
            })
            .collect();
        validate_boxes(&boxes, scored)?;
        Ok(boxes)
    }

    /// Next frame, or `None` once the declared frame count is exhausted.
    pub fn next_frame(&mut self) -> Result<Option<FrameRecord>, FormatError> {
        if self.next >= self.header.frame_count {
            return Ok(None);
        }
        let index = self.next;
        let (w, h, d) = self.header.dims;
        let data = self.read_f32s(w * h * d, &format!("frame {index} features"))?;
        let features = FeatureMap::new(w, h, d, data)
            .map_err(|e| FormatError::InvalidRecord(format!("frame {index}: {e}")))?;
        let proposals = self.read_boxes(true, index)?;
        let gt_boxes = self.read_boxes(false, index)?;
        self.next += 1;
        Ok(Some(FrameRecord {
            index,
            features,
            proposals,
            gt_boxes,
        }))
    }

    /// Fails if bytes remain after the last declared frame.
    pub fn finish(mut self) -> Result<(), FormatError> {
        if self.next < self.header.frame_count {
            return Err(FormatError::Truncated(format!(
                "stopped after {} of {} frames",
                self.next, self.header.frame_count
            )));
        }
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(FormatError::InvalidRecord("trailing bytes after the last frame".into())),
        }
    }
}

impl<R: Read> Iterator for SequenceReader<R> {
    type Item = Result<FrameRecord, FormatError>;

    fn next(&mut self) -> Option<Self::Item> {
        match self.next_frame() {
            Ok(Some(f)) => Some(Ok(f)),
            Ok(None) => None,
            Err(e) => {
                // Poison the reader so iteration stops after an error.
                self.next = self.header.frame_count;
                Some(Err(e))
            }
        }
    }
}

/// Streams frames into a container whose header was written up front.
pub struct SequenceWriter<W: Write> {
    inner: W,
    header: SequenceHeader,
    written: usize,
}

impl SequenceWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>, header: SequenceHeader) -> Result<Self, FormatError> {
        Self::new(BufWriter::new(File::create(path)?), header)
    }
}

impl<W: Write> SequenceWriter<W> {
    pub fn new(mut inner: W, header: SequenceHeader) -> Result<Self, FormatError> {
        let (w, h, d) = header.dims;
        let max = u16::MAX as usize;
        if w == 0 || h == 0 || d == 0 || w > max || h > max || d > max {
            return Err(FormatError::Dims(format!("unsupported dims {w}x{h}x{d}")));
        }
        let id = header.video_id.as_bytes();
        if id.len() > max {
            return Err(FormatError::InvalidRecord("video id longer than 65535 bytes".into()));
        }
        if header.frame_count > u32::MAX as usize {
            return Err(FormatError::InvalidRecord("too many frames".into()));
        }
        let label = match header.label {
            None => -1,
            Some(l) if l >= 0 => l,
            Some(l) => return Err(FormatError::InvalidRecord(format!("negative label id {l}"))),
        };
        inner.write_all(PSVID_MAGIC)?;
        inner.write_u16::<LittleEndian>(PSVID_VERSION)?;
        inner.write_u16::<LittleEndian>(id.len() as u16)?;
        inner.write_all(id)?;
        inner.write_i32::<LittleEndian>(label)?;
        for v in [w, h, d] {
            inner.write_u16::<LittleEndian>(v as u16)?;
        }
        inner.write_u32::<LittleEndian>(header.frame_count as u32)?;
        Ok(Self {
            inner,
            header,
            written: 0,
        })
    }

    pub fn write_frame(&mut self, frame: &FrameRecord) -> Result<(), FormatError> {
        if self.written >= self.header.frame_count {
            return Err(FormatError::InvalidRecord("more frames than declared".into()));
        }
        if frame.features.dims() != self.header.dims {
            return Err(FormatError::Dims(format!(
                "frame {} has dims {:?}, header declares {:?}",
                frame.index,
                frame.features.dims(),
                self.header.dims
            )));
        }
        validate_boxes(&frame.proposals, true)?;
        validate_boxes(&frame.gt_boxes, false)?;
        for v in frame.features.data() {
            self.inner.write_f32::<LittleEndian>(*v as f32)?;
        }
        self.inner.write_u16::<LittleEndian>(frame.proposals.len() as u16)?;
        for b in &frame.proposals {
            for v in [b.cx, b.cy, b.w, b.h, b.score.unwrap_or(0.0)] {
                self.inner.write_f32::<LittleEndian>(v as f32)?;
            }
        }
        self.inner.write_u16::<LittleEndian>(frame.gt_boxes.len() as u16)?;
        for b in &frame.gt_boxes {
            for v in [b.cx, b.cy, b.w, b.h] {
                self.inner.write_f32::<LittleEndian>(v as f32)?;
            }
        }
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W, FormatError> {
        if self.written != self.header.frame_count {
            return Err(FormatError::InvalidRecord(format!(
                "wrote {} of {} declared frames",
                self.written, self.header.frame_count
            )));
        }
        self.inner.flush()?;
        Ok(self.inner)
    }
}

impl VideoSequence {
    pub fn header(&self) -> SequenceHeader {
        SequenceHeader {
            video_id: self.video_id.clone(),
            label: self.label,
            dims: self.dims,
            frame_count: self.frames.len(),
        }
    }

    pub fn write_to<W: Write>(&self, out: W) -> Result<W, FormatError> {
        self.validate()?;
        let mut writer = SequenceWriter::new(out, self.header())?;
        for f in &self.frames {
            writer.write_frame(f)?;
        }
        writer.finish()
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self, FormatError> {
        let mut reader = SequenceReader::new(input)?;
        let header = reader.header().clone();
        let mut frames = Vec::with_capacity(header.frame_count.min(1 << 16));
        while let Some(frame) = reader.next_frame()? {
            frames.push(frame);
        }
        reader.finish()?;
        Ok(Self {
            video_id: header.video_id,
            label: header.label,
            dims: header.dims,
            frames,
        })
    }
}

pub fn write_sequence(seq: &VideoSequence, path: impl AsRef<Path>) -> Result<(), FormatError> {
    seq.write_to(BufWriter::new(File::create(path)?))?;
    Ok(())
}

pub fn read_sequence(path: impl AsRef<Path>) -> Result<VideoSequence, FormatError> {
    VideoSequence::read_from(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two 1x1x2 frames assembled byte by byte.
    fn hand_built() -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(b"PSVID");
        b.extend_from_slice(&1u16.to_le_bytes());
        b.extend_from_slice(&2u16.to_le_bytes());
        b.extend_from_slice(b"v1");
        b.extend_from_slice(&3i32.to_le_bytes());
        for d in [1u16, 1, 2] {
            b.extend_from_slice(&d.to_le_bytes());
        }
        b.extend_from_slice(&2u32.to_le_bytes());
        // frame 0: features, one proposal, no gt
        for v in [1.5f32, -2.0] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&1u16.to_le_bytes());
        for v in [0.5f32, 0.25, 0.5, 0.5, 0.75] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&0u16.to_le_bytes());
        // frame 1: features, no proposals, one gt
        for v in [0.0f32, 4.0] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&0u16.to_le_bytes());
        b.extend_from_slice(&1u16.to_le_bytes());
        for v in [0.5f32, 0.5, 1.0, 1.0] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    #[test]
    fn parses_hand_built_fixture() {
        let seq = VideoSequence::read_from(&hand_built()[..]).unwrap();
        assert_eq!(seq.video_id, "v1");
        assert_eq!(seq.label, Some(3));
        assert_eq!(seq.dims, (1, 1, 2));
        assert_eq!(seq.frames[0].features.data(), &[1.5, -2.0]);
        assert_eq!(seq.frames[0].proposals[0], BoundingBox { cx: 0.5, cy: 0.25, w: 0.5, h: 0.5, score: Some(0.75) });
        assert!(seq.frames[0].gt_boxes.is_empty());
        assert_eq!(seq.frames[1].features.data(), &[0.0, 4.0]);
        assert_eq!(seq.frames[1].gt_boxes, vec![BoundingBox::full_frame()]);
        // Writing it back reproduces the exact bytes.
        assert_eq!(seq.write_to(Vec::new()).unwrap(), hand_built());
    }

    #[test]
    fn every_truncation_is_typed() {
        let bytes = hand_built();
        for cut in 0..bytes.len() {
            match VideoSequence::read_from(&bytes[..cut]) {
                Err(FormatError::Truncated(_)) => {}
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_version_and_trailing() {
        let mut b = hand_built();
        b[0] = b'X';
        assert_eq!(VideoSequence::read_from(&b[..]).unwrap_err().code(), 1);
        let mut b = hand_built();
        b[5] = 9;
        assert!(matches!(
            VideoSequence::read_from(&b[..]),
            Err(FormatError::UnsupportedVersion { found: 9, .. })
        ));
        let mut b = hand_built();
        b.push(0);
        assert!(matches!(VideoSequence::read_from(&b[..]), Err(FormatError::InvalidRecord(_))));
        let mut b = hand_built();
        // zero channel count
        let d_offset = 5 + 2 + 2 + 2 + 4 + 4;
        b[d_offset] = 0;
        assert!(matches!(VideoSequence::read_from(&b[..]), Err(FormatError::Dims(_))));
    }

    #[test]
    fn writer_rejects_inconsistent_frames() {
        let header = SequenceHeader {
            video_id: "x".into(),
            label: None,
            dims: (2, 2, 1),
            frame_count: 1,
        };
        let mut w = SequenceWriter::new(Vec::new(), header).unwrap();
        let bad = FrameRecord::new(0, FeatureMap::zeros(1, 2, 1));
        assert!(matches!(w.write_frame(&bad), Err(FormatError::Dims(_))));
        assert!(w.finish().is_err());
    }
}
