//! Procedural sign corpus.
//!
//! Every token owns a short motion primitive: smooth sinusoid-driven
//! controls for both hands (wrist placement, finger curl and spread), the
//! arms that follow them, and small face and head movements. A sentence is
//! the time concatenation of its tokens' primitives with cosine crossfades.
//! Neck and shoulders never move, so every generated frame is already
//! normalized.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::StandardNormal;

use super::corpus::{CorpusSample, SyntheticCorpus};
use super::{Articulator, PoseError, PoseSequence, FRAME_WIDTH};
use crate::rng::{indexed_substream, substream, Rng};

pub const EMBED_DIM: usize = 768;
pub const CROSSFADE: usize = 4;
pub const MIN_PRIMITIVE_LEN: usize = 8;
pub const MAX_PRIMITIVE_LEN: usize = 16;
/// Minimum per-frame mean hand-joint distance between any two primitives.
pub const MIN_HAND_SEPARATION: f64 = 0.05;
const MAX_REDRAWS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthParams {
    pub vocab_size: usize,
    pub n_samples: usize,
    pub max_tokens: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug)]
struct Channel {
    offset: f64,
    amps: [f64; 2],
    phases: [f64; 2],
}

impl Channel {
    const REST: Channel = Channel {
        offset: 0.0,
        amps: [0.0; 2],
        phases: [0.0; 2],
    };

    fn draw(rng: &mut Rng, offset: (f64, f64), amp: (f64, f64)) -> Self {
        Channel {
            offset: rng.gen_range(offset.0..offset.1),
            amps: [rng.gen_range(amp.0..amp.1), rng.gen_range(amp.0..amp.1)],
            phases: [rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)],
        }
    }

    fn at(&self, u: f64) -> f64 {
        self.offset
            + self.amps[0] * (PI * u + self.phases[0]).sin()
            + self.amps[1] * (2.0 * PI * u + self.phases[1]).sin()
    }
}

#[derive(Clone, Copy, Debug)]
struct HandControls {
    wrist: [Channel; 3],
    curl: Channel,
    spread: Channel,
}

impl HandControls {
    const REST: HandControls = HandControls {
        wrist: [Channel::REST; 3],
        curl: Channel::REST,
        spread: Channel::REST,
    };

    fn draw(rng: &mut Rng, gain: f64) -> Self {
        HandControls {
            wrist: [
                Channel::draw(rng, (-0.3 * gain, 0.3 * gain), (0.05 * gain, 0.2 * gain)),
                Channel::draw(rng, (0.1, 0.9 * gain + 0.1), (0.05 * gain, 0.2 * gain)),
                Channel::draw(rng, (0.0, 0.3 * gain), (0.02 * gain, 0.1 * gain)),
            ],
            curl: Channel::draw(rng, (0.0, 1.2), (0.1, 0.5)),
            spread: Channel::draw(rng, (-0.5, 0.5), (0.1, 0.4)),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct FaceControls {
    mouth: Channel,
    brow: Channel,
    nod: [Channel; 2],
}

impl FaceControls {
    const REST: FaceControls = FaceControls {
        mouth: Channel::REST,
        brow: Channel::REST,
        nod: [Channel::REST; 2],
    };

    fn draw(rng: &mut Rng) -> Self {
        FaceControls {
            mouth: Channel::draw(rng, (0.0, 0.02), (0.005, 0.015)),
            brow: Channel::draw(rng, (-0.01, 0.01), (0.003, 0.01)),
            nod: [
                Channel::draw(rng, (-0.02, 0.02), (0.005, 0.02)),
                Channel::draw(rng, (-0.02, 0.02), (0.005, 0.02)),
            ],
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct TokenMotion {
    len: usize,
    left: HandControls,
    right: HandControls,
    face: FaceControls,
}

// Rest skeleton in normalized units: neck at the origin, shoulder width 1,
// y up, both hands hanging down.
const BODY_REST: [[f64; 3]; 8] = [
    [0.0, 0.0, 0.0],     // neck
    [0.5, 0.0, 0.0],     // left shoulder
    [-0.5, 0.0, 0.0],    // right shoulder
    [0.62, -0.65, 0.05], // left elbow
    [-0.62, -0.65, 0.05],
    [0.58, -1.3, 0.12], // left wrist
    [-0.58, -1.3, 0.12],
    [0.0, 0.42, 0.05], // head
];
const LEFT_ELBOW: usize = 3;
const LEFT_WRIST: usize = 5;
const HEAD: usize = 7;

#[derive(Clone, Copy, PartialEq)]
enum FaceGroup {
    Outline,
    Eye,
    Brow,
    Nose,
    Mouth,
}

/// 128 face landmarks relative to the head joint.
fn face_template() -> Vec<(FaceGroup, [f64; 3])> {
    let mut pts = Vec::with_capacity(128);
    let ring = |group, n: usize, c: (f64, f64), r: (f64, f64), pts: &mut Vec<_>| {
        for i in 0..n {
            let a = 2.0 * PI * i as f64 / n as f64;
            let (x, y) = (c.0 + r.0 * a.cos(), c.1 + r.1 * a.sin());
            pts.push((group, [x, y, 0.08 - 1.5 * x * x]));
        }
    };
    ring(FaceGroup::Outline, 36, (0.0, 0.0), (0.18, 0.24), &mut pts);
    ring(FaceGroup::Eye, 12, (0.07, 0.05), (0.035, 0.015), &mut pts);
    ring(FaceGroup::Eye, 12, (-0.07, 0.05), (0.035, 0.015), &mut pts);
    for side in [1.0, -1.0] {
        for i in 0..10 {
            let x = side * (0.03 + 0.01 * i as f64);
            pts.push((
                FaceGroup::Brow,
                [x, 0.1 + 0.008 * (PI * i as f64 / 9.0).sin(), 0.07],
            ));
        }
    }
    for i in 0..6 {
        pts.push((
            FaceGroup::Nose,
            [0.0, 0.04 - 0.016 * i as f64, 0.1 + 0.006 * i as f64],
        ));
    }
    for i in 0..6 {
        pts.push((FaceGroup::Nose, [-0.03 + 0.012 * i as f64, -0.05, 0.1]));
    }
    ring(FaceGroup::Mouth, 20, (0.0, -0.12), (0.06, 0.025), &mut pts);
    ring(FaceGroup::Mouth, 16, (0.0, -0.12), (0.04, 0.012), &mut pts);
    debug_assert_eq!(pts.len(), Articulator::Face.num_joints());
    pts
}

fn render_hand(out: &mut [f64], wrist: [f64; 3], c: &HandControls, u: f64, side: f64) {
    let curl = c.curl.at(u);
    let spread = c.spread.at(u);
    out[..3].copy_from_slice(&wrist);
    for f in 0..5 {
        let theta = (f as f64 - 2.0) * (0.3 + 0.25 * spread);
        let seg = if f == 0 { 0.04 } else { 0.05 };
        let mut p = [
            wrist[0] + 0.04 * side * theta.sin(),
            wrist[1] - 0.04 * theta.cos(),
            wrist[2],
        ];
        for s in 0..4 {
            let j = 1 + 4 * f + s;
            out[3 * j..3 * j + 3].copy_from_slice(&p);
            let phi = curl * 0.45 * (s + 1) as f64;
            p[0] += seg * side * theta.sin();
            p[1] -= seg * theta.cos() * phi.cos();
            p[2] += seg * theta.cos() * phi.sin();
        }
    }
}

fn render_frame(m: &TokenMotion, u: f64, face: &[(FaceGroup, [f64; 3])]) -> Vec<f64> {
    let mut frame = vec![0.0; FRAME_WIDTH];
    let mut body = BODY_REST;
    for (k, hand) in [(0usize, &m.left), (1, &m.right)] {
        let off = [
            hand.wrist[0].at(u),
            hand.wrist[1].at(u),
            hand.wrist[2].at(u),
        ];
        let side = if k == 0 { 1.0 } else { -1.0 };
        for d in 0..3 {
            let o = if d == 0 { side * off[0] } else { off[d] };
            body[LEFT_WRIST + k][d] += o;
            body[LEFT_ELBOW + k][d] += 0.5 * o;
        }
    }
    body[HEAD][0] += m.face.nod[0].at(u);
    body[HEAD][1] += m.face.nod[1].at(u);
    for (j, p) in body.iter().enumerate() {
        frame[3 * j..3 * j + 3].copy_from_slice(p);
    }
    for (a, hand, wrist_joint, side) in [
        (Articulator::LeftHand, &m.left, LEFT_WRIST, 1.0),
        (Articulator::RightHand, &m.right, LEFT_WRIST + 1, -1.0),
    ] {
        render_hand(&mut frame[a.coords()], body[wrist_joint], hand, u, side);
    }
    let mouth = m.face.mouth.at(u);
    let brow = m.face.brow.at(u);
    let head = body[HEAD];
    let base = Articulator::Face.coords().start;
    for (i, (group, p)) in face.iter().enumerate() {
        let mut q = [head[0] + p[0], head[1] + p[1], head[2] + p[2]];
        match group {
            FaceGroup::Brow => q[1] += brow,
            FaceGroup::Mouth if p[1] < -0.12 => q[1] -= mouth * (-0.12 - p[1]) / 0.025,
            _ => {}
        }
        frame[base + 3 * i..base + 3 * i + 3].copy_from_slice(&q);
    }
    frame
}

/// The neutral frame with both hands resting downward.
pub fn rest_pose() -> Vec<f64> {
    let rest = TokenMotion {
        len: 1,
        left: HandControls::REST,
        right: HandControls::REST,
        face: FaceControls::REST,
    };
    render_frame(&rest, 0.0, &face_template())
}

fn render_motion(m: &TokenMotion, face: &[(FaceGroup, [f64; 3])]) -> Vec<Vec<f64>> {
    (0..m.len)
        .map(|f| render_frame(m, f as f64 / (m.len - 1) as f64, face))
        .collect()
}

/// Mean over common frames and hand joints of the Euclidean distance.
pub(crate) fn hand_separation(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let frames = a.len().min(b.len());
    let mut total = 0.0;
    let mut count = 0;
    for t in 0..frames {
        for h in [Articulator::LeftHand, Articulator::RightHand] {
            for j in h.joints() {
                let d: f64 = (0..3)
                    .map(|k| (a[t][3 * j + k] - b[t][3 * j + k]).powi(2))
                    .sum();
                total += d.sqrt();
                count += 1;
            }
        }
    }
    total / count as f64
}

/// Per-token primitives, redrawn until every pair is separated by more
/// than [`MIN_HAND_SEPARATION`].
fn token_motions(vocab_size: usize, seed: u64) -> Vec<(TokenMotion, Vec<Vec<f64>>)> {
    let face = face_template();
    let mut out: Vec<(TokenMotion, Vec<Vec<f64>>)> = Vec::with_capacity(vocab_size);
    for k in 0..vocab_size {
        let mut rng = indexed_substream(seed, "token-primitive", k as u64);
        let mut candidate = None;
        for _ in 0..MAX_REDRAWS {
            let m = TokenMotion {
                len: rng.gen_range(MIN_PRIMITIVE_LEN..=MAX_PRIMITIVE_LEN),
                right: HandControls::draw(&mut rng, 1.0),
                left: HandControls::draw(&mut rng, 0.6),
                face: FaceControls::draw(&mut rng),
            };
            let frames = render_motion(&m, &face);
            if out
                .iter()
                .all(|(_, other)| hand_separation(other, &frames) > MIN_HAND_SEPARATION)
            {
                candidate = Some((m, frames));
                break;
            }
        }
        out.push(candidate.expect("separable primitive within the redraw budget"));
    }
    out
}

/// Rendered primitive of every token.
pub fn token_primitives(vocab_size: usize, seed: u64) -> Vec<PoseSequence> {
    token_motions(vocab_size, seed)
        .into_iter()
        .map(|(_, frames)| PoseSequence::from_frames(&frames).expect("finite primitive"))
        .collect()
}

/// Concatenates primitives in time, blending each seam over
/// [`CROSSFADE`] frames with a raised-cosine ramp.
pub fn crossfade_concat(parts: &[&[Vec<f64>]]) -> Result<PoseSequence, PoseError> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    for part in parts {
        if out.is_empty() {
            out.extend(part.iter().cloned());
            continue;
        }
        let start = out.len() - CROSSFADE;
        for i in 0..CROSSFADE {
            let w = 0.5 - 0.5 * (PI * (i + 1) as f64 / (CROSSFADE + 1) as f64).cos();
            for (o, n) in out[start + i].iter_mut().zip(&part[i]) {
                *o = (1.0 - w) * *o + w * n;
            }
        }
        out.extend(part[CROSSFADE..].iter().cloned());
    }
    PoseSequence::from_frames(&out)
}

fn unit_embedding(rng: &mut Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..EMBED_DIM).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

pub fn generate_synthetic_corpus(params: SynthParams) -> Result<SyntheticCorpus, PoseError> {
    if params.vocab_size < 2 {
        return Err(PoseError::InvalidArgs(format!(
            "vocab_size must be at least 2, got {}",
            params.vocab_size
        )));
    }
    if params.n_samples < 1 || params.max_tokens < 1 {
        return Err(PoseError::InvalidArgs(
            "n_samples and max_tokens must be at least 1".into(),
        ));
    }
    let motions = token_motions(params.vocab_size, params.seed);
    let mut emb_rng = substream(params.seed, "embeddings");
    let embeddings = (0..params.vocab_size)
        .map(|_| unit_embedding(&mut emb_rng))
        .collect();
    let mut samples = Vec::with_capacity(params.n_samples);
    for i in 0..params.n_samples {
        let mut rng = indexed_substream(params.seed, "sample", i as u64);
        let n = rng.gen_range(1..=params.max_tokens);
        let tokens: Vec<usize> = (0..n)
            .map(|_| rng.gen_range(0..params.vocab_size))
            .collect();
        let parts: Vec<&[Vec<f64>]> = tokens.iter().map(|&k| motions[k].1.as_slice()).collect();
        samples.push(CorpusSample {
            id: format!("sample_{i:05}"),
            tokens,
            pose: crossfade_concat(&parts)?,
        });
    }
    Ok(SyntheticCorpus::new(params, embeddings, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::{normalize_pose, shoulder_width};

    #[test]
    fn three_twelve_frame_primitives_give_28_frames() {
        let prim: Vec<Vec<f64>> = (0..12).map(|t| vec![t as f64; FRAME_WIDTH]).collect();
        let p = crossfade_concat(&[&prim, &prim, &prim]).unwrap();
        assert_eq!(p.len(), 12 * 3 - 4 * 2);
    }

    #[test]
    fn crossfade_blends_monotonically() {
        let a: Vec<Vec<f64>> = vec![vec![0.0; FRAME_WIDTH]; 8];
        let b: Vec<Vec<f64>> = vec![vec![1.0; FRAME_WIDTH]; 8];
        let p = crossfade_concat(&[&a, &b]).unwrap();
        let seam: Vec<f64> = (3..9).map(|t| p.frame(t)[0]).collect();
        assert_eq!(seam[0], 0.0);
        assert!(seam.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(seam[5], 1.0);
    }

    #[test]
    fn primitives_are_pairwise_separated_and_normalized() {
        let motions = token_motions(20, 7);
        for (i, (mi, fi)) in motions.iter().enumerate() {
            assert!((MIN_PRIMITIVE_LEN..=MAX_PRIMITIVE_LEN).contains(&mi.len));
            for (_, fj) in &motions[..i] {
                assert!(hand_separation(fi, fj) > MIN_HAND_SEPARATION);
            }
        }
    }

    #[test]
    fn rest_pose_hands_hang_below_shoulders() {
        let rest = rest_pose();
        assert!((shoulder_width(&rest) - 1.0).abs() < 1e-15);
        for h in [Articulator::LeftHand, Articulator::RightHand] {
            for j in h.joints() {
                assert!(rest[3 * j + 1] < -1.0);
            }
        }
    }

    #[test]
    fn corpus_is_prenormalized_and_deterministic() {
        let params = SynthParams {
            vocab_size: 6,
            n_samples: 5,
            max_tokens: 3,
            seed: 11,
        };
        let a = generate_synthetic_corpus(params).unwrap();
        let b = generate_synthetic_corpus(params).unwrap();
        for (sa, sb) in a.samples.iter().zip(&b.samples) {
            assert_eq!(sa.tokens, sb.tokens);
            assert_eq!(sa.pose, sb.pose);
            let n = normalize_pose(&sa.pose).unwrap();
            for (x, y) in n.data().iter().zip(sa.pose.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert_eq!(a.embeddings, b.embeddings);
        for e in &a.embeddings {
            let norm: f64 = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn vocab_of_one_is_rejected() {
        let err = generate_synthetic_corpus(SynthParams {
            vocab_size: 1,
            n_samples: 3,
            max_tokens: 2,
            seed: 0,
        });
        assert!(matches!(err, Err(PoseError::InvalidArgs(_))));
    }
}
