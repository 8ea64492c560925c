//! Feature-sequence containers and the synthetic scene generator.

mod container;
mod synth;

pub use container::{read_sequence, write_sequence, SequenceHeader, SequenceReader, SequenceWriter, PSVID_MAGIC, PSVID_VERSION};
pub use synth::{synth_sequence, SynthSpec};

use thiserror::Error;

use crate::localizer::BoundingBox;
use crate::numerics::FeatureMap;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: &'static str, found: Vec<u8> },

    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },

    #[error("truncated payload while reading {0}")]
    Truncated(String),

    #[error("dimension inconsistency: {0}")]
    Dims(String),

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl FormatError {
    /// Stable numeric code for each failure class.
    pub fn code(&self) -> u8 {
        match self {
            FormatError::BadMagic { .. } => 1,
            FormatError::UnsupportedVersion { .. } => 2,
            FormatError::Truncated(_) => 3,
            FormatError::Dims(_) => 4,
            FormatError::InvalidRecord(_) => 5,
            FormatError::Io(_) => 6,
        }
    }
}

/// One frame: backbone features, class-agnostic proposals and (optionally)
/// ground-truth boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub index: usize,
    pub features: FeatureMap,
    pub proposals: Vec<BoundingBox>,
    /// Empty when the frame carries no annotation.
    pub gt_boxes: Vec<BoundingBox>,
}

impl FrameRecord {
    pub fn new(index: usize, features: FeatureMap) -> Self {
        Self {
            index,
            features,
            proposals: Vec::new(),
            gt_boxes: Vec::new(),
        }
    }
}

/// An ordered stream of frames from one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSequence {
    pub video_id: String,
    pub label: Option<i32>,
    /// `(c_x, c_y, d)`
    pub dims: (usize, usize, usize),
    pub frames: Vec<FrameRecord>,
}

impl VideoSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<(), FormatError> {
        let (w, h, d) = self.dims;
        if w == 0 || h == 0 || d == 0 || w > u16::MAX as usize || h > u16::MAX as usize || d > u16::MAX as usize {
            return Err(FormatError::Dims(format!("unsupported dims {w}x{h}x{d}")));
        }
        for f in &self.frames {
            if f.features.dims() != self.dims {
                return Err(FormatError::Dims(format!(
                    "frame {} has dims {:?}, sequence declares {:?}",
                    f.index,
                    f.features.dims(),
                    self.dims
                )));
            }
            validate_boxes(&f.proposals, true)?;
            validate_boxes(&f.gt_boxes, false)?;
        }
        Ok(())
    }
}

pub(crate) fn validate_boxes(boxes: &[BoundingBox], scored: bool) -> Result<(), FormatError> {
    if boxes.len() > u16::MAX as usize {
        return Err(FormatError::InvalidRecord(format!("{} boxes exceed the u16 count", boxes.len())));
    }
    for b in boxes {
        b.validate().map_err(|e| FormatError::InvalidRecord(e.to_string()))?;
        if scored && !b.score.is_some_and(|s| (0.0..=1.0).contains(&s)) {
            return Err(FormatError::InvalidRecord(format!("proposal score outside [0, 1]: {b:?}")));
        }
    }
    Ok(())
}
