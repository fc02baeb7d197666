use super::{PoseError, PoseSequence, FRAME_WIDTH, LEFT_SHOULDER, NECK, RIGHT_SHOULDER};

const MIN_SHOULDER_WIDTH: f64 = 1e-8;

pub fn shoulder_width(frame: &[f64]) -> f64 {
    let (l, r) = (3 * LEFT_SHOULDER, 3 * RIGHT_SHOULDER);
    let dx = frame[l] - frame[r];
    let dy = frame[l + 1] - frame[r + 1];
    let dz = frame[l + 2] - frame[r + 2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Translates every frame so the neck is at the origin and divides by that
/// frame's shoulder width. Rotation is left untouched.
pub fn normalize_pose(p: &PoseSequence) -> Result<PoseSequence, PoseError> {
    let mut data = Vec::with_capacity(p.data().len());
    for (t, frame) in p.frames().enumerate() {
        let width = shoulder_width(frame);
        if !(width >= MIN_SHOULDER_WIDTH) {
            return Err(PoseError::DegenerateFrame { frame: t, width });
        }
        let neck = [frame[3 * NECK], frame[3 * NECK + 1], frame[3 * NECK + 2]];
        data.extend(
            frame
                .iter()
                .enumerate()
                .map(|(i, v)| (v - neck[i % 3]) / width),
        );
    }
    debug_assert_eq!(data.len() % FRAME_WIDTH, 0);
    PoseSequence::new(data)
}
