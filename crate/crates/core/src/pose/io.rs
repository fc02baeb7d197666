//! Pose file layout (all little-endian):
//!
//! | bytes | field                         |
//! |-------|-------------------------------|
//! | 4     | magic `A2VP`                  |
//! | 2     | version (`u16`, currently 1)  |
//! | 4     | frame count `T` (`u32`)       |
//! | 4     | joint count `J` (`u32`, 178)  |
//! | 1     | dtype tag: 1 = f32, 2 = f64   |
//! | ...   | `T * J * 3` row-major values  |

use std::fs;
use std::path::Path;

use super::{PoseError, PoseSequence, NUM_JOINTS};

const MAGIC: &[u8; 4] = b"A2VP";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoseDtype {
    F32,
    F64,
}

impl PoseDtype {
    fn tag(self) -> u8 {
        match self {
            PoseDtype::F32 => 1,
            PoseDtype::F64 => 2,
        }
    }

    fn size(self) -> usize {
        match self {
            PoseDtype::F32 => 4,
            PoseDtype::F64 => 8,
        }
    }
}

pub fn encode_pose(p: &PoseSequence, dtype: PoseDtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + p.data().len() * dtype.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(p.len() as u32).to_le_bytes());
    out.extend_from_slice(&(NUM_JOINTS as u32).to_le_bytes());
    out.push(dtype.tag());
    for &v in p.data() {
        match dtype {
            PoseDtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            PoseDtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

pub fn decode_pose(bytes: &[u8]) -> Result<PoseSequence, PoseError> {
    if bytes.len() < HEADER_LEN {
        return Err(PoseError::TruncatedHeader);
    }
    if &bytes[..4] != MAGIC {
        return Err(PoseError::Magic);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(PoseError::Version(version));
    }
    let frames = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let joints = u32::from_le_bytes(bytes[10..14].try_into().unwrap());
    if joints as usize != NUM_JOINTS {
        return Err(PoseError::JointCount(joints));
    }
    let dtype = match bytes[14] {
        1 => PoseDtype::F32,
        2 => PoseDtype::F64,
        other => return Err(PoseError::Dtype(other)),
    };
    let expected = frames * NUM_JOINTS * 3 * dtype.size();
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(PoseError::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    let data = match dtype {
        PoseDtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        PoseDtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    PoseSequence::new(data)
}

pub fn save_pose(path: &Path, p: &PoseSequence) -> Result<(), PoseError> {
    fs::write(path, encode_pose(p, PoseDtype::F64)).map_err(|source| PoseError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_pose(path: &Path) -> Result<PoseSequence, PoseError> {
    let bytes = fs::read(path).map_err(|source| PoseError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_pose(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::FRAME_WIDTH;

    fn sample() -> PoseSequence {
        PoseSequence::new(
            (0..2 * FRAME_WIDTH)
                .map(|i| (i as f64 * 0.013).cos() / 3.0)
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn save_load_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.a2vp");
        let p = sample();
        save_pose(&path, &p).unwrap();
        let q = load_pose(&path).unwrap();
        let bits = |s: &PoseSequence| s.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p), bits(&q));
    }

    #[test]
    fn f32_round_trip_is_lossless_at_stored_precision() {
        let p = sample();
        let q = decode_pose(&encode_pose(&p, PoseDtype::F32)).unwrap();
        for (a, b) in p.data().iter().zip(q.data()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn wrong_joint_count_is_rejected() {
        let mut bytes = encode_pose(&sample(), PoseDtype::F64);
        bytes[10..14].copy_from_slice(&100u32.to_le_bytes());
        let err = decode_pose(&bytes).unwrap_err();
        assert!(err.to_string().contains("joint count"), "{err}");
    }

    #[test]
    fn empty_and_truncated_files_are_rejected() {
        let err = decode_pose(&[]).unwrap_err();
        assert!(err.to_string().contains("truncated header"), "{err}");
        let bytes = encode_pose(&sample(), PoseDtype::F64);
        assert!(matches!(
            decode_pose(&bytes[..bytes.len() - 1]),
            Err(PoseError::TruncatedPayload { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_pose(&bad), Err(PoseError::Magic)));
    }
}
