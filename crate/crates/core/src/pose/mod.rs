//! Articulated pose sequences: `T x 178 x 3` frames split into body,
//! left hand, right hand and face.
//!
//! Joint order is fixed: body `0..8`, left hand `8..29`, right hand
//! `29..50`, face `50..178`. Body joint 0 is the neck and body joints 1 and
//! 2 are the shoulders.

mod corpus;
mod io;
mod normalize;
mod synth;

pub use corpus::{
    load_corpus, save_corpus, CorpusIndex, CorpusSample, IndexEntry, SyntheticCorpus,
};
pub use io::{decode_pose, encode_pose, load_pose, save_pose, PoseDtype};
pub use normalize::{normalize_pose, shoulder_width};
pub use synth::{
    crossfade_concat, generate_synthetic_corpus, rest_pose, token_primitives, SynthParams,
    CROSSFADE, EMBED_DIM, MIN_HAND_SEPARATION,
};

use std::ops::Range;

use thiserror::Error;

pub const NUM_JOINTS: usize = 178;
pub const FRAME_WIDTH: usize = NUM_JOINTS * 3;
pub const NECK: usize = 0;
pub const LEFT_SHOULDER: usize = 1;
pub const RIGHT_SHOULDER: usize = 2;

#[derive(Debug, Error)]
pub enum PoseError {
    #[error("frame {frame}: shoulder width {width:e} is degenerate")]
    DegenerateFrame { frame: usize, width: f64 },
    #[error("pose data has {len} values, not a multiple of {FRAME_WIDTH}")]
    BadLength { len: usize },
    #[error("pose sequence must have at least one frame")]
    Empty,
    #[error("pose contains a non-finite value at frame {frame}")]
    NonFinite { frame: usize },
    #[error("truncated header")]
    TruncatedHeader,
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("bad magic bytes")]
    Magic,
    #[error("unsupported format version {0}")]
    Version(u16),
    #[error("unsupported dtype tag {0}")]
    Dtype(u8),
    #[error("joint count {0} in header, expected {NUM_JOINTS}")]
    JointCount(u32),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus index: {0}")]
    Index(String),
    #[error("invalid corpus arguments: {0}")]
    InvalidArgs(String),
}

/// The four anatomical regions, in joint-storage order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Articulator {
    Body,
    LeftHand,
    RightHand,
    Face,
}

impl Articulator {
    /// Joint-storage order.
    pub const ALL: [Articulator; 4] = [
        Articulator::Body,
        Articulator::LeftHand,
        Articulator::RightHand,
        Articulator::Face,
    ];

    pub fn joints(self) -> Range<usize> {
        match self {
            Articulator::Body => 0..8,
            Articulator::LeftHand => 8..29,
            Articulator::RightHand => 29..50,
            Articulator::Face => 50..178,
        }
    }

    pub fn num_joints(self) -> usize {
        self.joints().len()
    }

    /// Flattened per-frame width (`joints * 3`).
    pub fn width(self) -> usize {
        self.num_joints() * 3
    }

    /// Coordinate range inside one flattened frame.
    pub fn coords(self) -> Range<usize> {
        let j = self.joints();
        j.start * 3..j.end * 3
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Articulator::Body => "body",
            Articulator::LeftHand => "lh",
            Articulator::RightHand => "rh",
            Articulator::Face => "face",
        }
    }

    pub fn is_hand(self) -> bool {
        matches!(self, Articulator::LeftHand | Articulator::RightHand)
    }
}

/// `T` frames of 178 joints, each `(x, y, z)`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSequence {
    data: Vec<f64>,
}

impl PoseSequence {
    pub fn new(data: Vec<f64>) -> Result<Self, PoseError> {
        if data.is_empty() {
            return Err(PoseError::Empty);
        }
        if !data.len().is_multiple_of(FRAME_WIDTH) {
            return Err(PoseError::BadLength { len: data.len() });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(PoseError::NonFinite {
                frame: i / FRAME_WIDTH,
            });
        }
        Ok(PoseSequence { data })
    }

    pub fn from_frames(frames: &[Vec<f64>]) -> Result<Self, PoseError> {
        if let Some(bad) = frames.iter().find(|f| f.len() != FRAME_WIDTH) {
            return Err(PoseError::BadLength { len: bad.len() });
        }
        PoseSequence::new(frames.concat())
    }

    pub fn len(&self) -> usize {
        self.data.len() / FRAME_WIDTH
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * FRAME_WIDTH..(t + 1) * FRAME_WIDTH]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(FRAME_WIDTH)
    }

    pub fn joint(&self, t: usize, j: usize) -> [f64; 3] {
        let f = self.frame(t);
        [f[3 * j], f[3 * j + 1], f[3 * j + 2]]
    }

    /// `T x width` block of one articulator's flattened coordinates.
    pub fn region(&self, a: Articulator) -> Vec<f64> {
        let r = a.coords();
        self.frames()
            .flat_map(|f| f[r.clone()].iter().copied())
            .collect()
    }
}

/// Per-region `T x J_a x 3` blocks in joint-storage order.
pub fn split_articulators(p: &PoseSequence) -> [Vec<f64>; 4] {
    Articulator::ALL.map(|a| p.region(a))
}

/// Inverse of [`split_articulators`].
pub fn concat_articulators(parts: &[Vec<f64>; 4]) -> Result<PoseSequence, PoseError> {
    let t = parts[0].len() / Articulator::Body.width();
    let mut data = Vec::with_capacity(t * FRAME_WIDTH);
    for frame in 0..t {
        for (a, part) in Articulator::ALL.iter().zip(parts) {
            let w = a.width();
            let chunk = part
                .get(frame * w..(frame + 1) * w)
                .ok_or(PoseError::BadLength { len: part.len() })?;
            data.extend_from_slice(chunk);
        }
    }
    PoseSequence::new(data)
}
