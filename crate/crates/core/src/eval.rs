//! DTW-aligned mean joint error between pose sequences.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{io_error, Error, Result};
use crate::pose::{load_pose, Articulator, PoseSequence, NUM_JOINTS};

/// Mean Euclidean distance over the given joints of two flattened frames.
pub fn joint_error(f: &[f64], g: &[f64], joints: std::ops::Range<usize>) -> f64 {
    let n = joints.len() as f64;
    joints
        .map(|j| {
            let dx = f[3 * j] - g[3 * j];
            let dy = f[3 * j + 1] - g[3 * j + 1];
            let dz = f[3 * j + 2] - g[3 * j + 2];
            (dx * dx + dy * dy + dz * dz).sqrt()
        })
        .sum::<f64>()
        / n
}

/// Mean over all 178 joints of the per-joint Euclidean distance.
pub fn mean_joint_error(f: &[f64], g: &[f64]) -> f64 {
    joint_error(f, g, 0..NUM_JOINTS)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DtwResult {
    /// Summed frame cost along the path divided by the path length.
    pub cost: f64,
    pub path: Vec<(usize, usize)>,
}

/// Classic DTW over a precomputed `n x m` cost matrix with steps
/// `(1,0)`, `(0,1)`, `(1,1)`. Ties prefer the diagonal step.
pub fn dtw_from_costs(costs: &[f64], n: usize, m: usize) -> Result<DtwResult> {
    if n == 0 || m == 0 {
        return Err(Error::Invalid("dtw needs non-empty sequences".into()));
    }
    let mut acc = vec![f64::INFINITY; n * m];
    for i in 0..n {
        for j in 0..m {
            let c = costs[i * m + j];
            let prev = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 {
                    acc[(i - 1) * m + j - 1]
                } else {
                    f64::INFINITY
                };
                let up = if i > 0 {
                    acc[(i - 1) * m + j]
                } else {
                    f64::INFINITY
                };
                let left = if j > 0 {
                    acc[i * m + j - 1]
                } else {
                    f64::INFINITY
                };
                diag.min(up).min(left)
            };
            acc[i * m + j] = prev + c;
        }
    }
    let (mut i, mut j) = (n - 1, m - 1);
    let mut path = vec![(i, j)];
    while i > 0 || j > 0 {
        (i, j) = if i == 0 {
            (0, j - 1)
        } else if j == 0 {
            (i - 1, 0)
        } else {
            let diag = acc[(i - 1) * m + j - 1];
            let up = acc[(i - 1) * m + j];
            let left = acc[i * m + j - 1];
            if diag <= up && diag <= left {
                (i - 1, j - 1)
            } else if up <= left {
                (i - 1, j)
            } else {
                (i, j - 1)
            }
        };
        path.push((i, j));
    }
    path.reverse();
    Ok(DtwResult {
        cost: acc[n * m - 1] / path.len() as f64,
        path,
    })
}

fn dtw_with(
    p: &PoseSequence,
    q: &PoseSequence,
    joints: std::ops::Range<usize>,
) -> Result<DtwResult> {
    let (n, m) = (p.len(), q.len());
    let mut costs = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            costs.push(joint_error(p.frame(i), q.frame(j), joints.clone()));
        }
    }
    dtw_from_costs(&costs, n, m)
}

pub fn dtw_mje(p: &PoseSequence, q: &PoseSequence) -> Result<DtwResult> {
    dtw_with(p, q, 0..NUM_JOINTS)
}

/// DTW-MJE with the frame cost restricted to one articulator's joints.
pub fn dtw_mje_region(p: &PoseSequence, q: &PoseSequence, a: Articulator) -> Result<DtwResult> {
    dtw_with(p, q, a.joints())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub dtw_mje: f64,
    /// Joint-storage order: body, left hand, right hand, face.
    pub regions: [f64; 4],
    pub generated_len: usize,
    pub reference_len: usize,
}

pub fn evaluate_pair(
    id: &str,
    generated: &PoseSequence,
    reference: &PoseSequence,
) -> Result<EvalRow> {
    let mut regions = [0.0; 4];
    for (r, a) in regions.iter_mut().zip(Articulator::ALL) {
        *r = dtw_mje_region(generated, reference, a)?.cost;
    }
    Ok(EvalRow {
        id: id.to_string(),
        dtw_mje: dtw_mje(generated, reference)?.cost,
        regions,
        generated_len: generated.len(),
        reference_len: reference.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    /// Mean of the per-sample DTW-MJE.
    pub fn aggregate(&self) -> f64 {
        self.rows.iter().map(|r| r.dtw_mje).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn region_aggregate(&self, a: Articulator) -> f64 {
        let k = Articulator::ALL
            .iter()
            .position(|&x| x == a)
            .expect("known region");
        self.rows.iter().map(|r| r.regions[k]).sum::<f64>() / self.rows.len().max(1) as f64
    }

    /// Per-sample rows followed by one `aggregate` row of column means.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "id,dtw_mje,dtw_body,dtw_lh,dtw_rh,dtw_face,generated_len,reference_len\n",
        );
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.id,
                r.dtw_mje,
                r.regions[0],
                r.regions[1],
                r.regions[2],
                r.regions[3],
                r.generated_len,
                r.reference_len
            )
            .expect("writing to a string");
        }
        let n = self.rows.len().max(1) as f64;
        let mean_len =
            |f: fn(&EvalRow) -> usize| self.rows.iter().map(|r| f(r) as f64).sum::<f64>() / n;
        writeln!(
            out,
            "aggregate,{},{},{},{},{},{},{}",
            self.aggregate(),
            self.region_aggregate(Articulator::Body),
            self.region_aggregate(Articulator::LeftHand),
            self.region_aggregate(Articulator::RightHand),
            self.region_aggregate(Articulator::Face),
            mean_len(|r| r.generated_len),
            mean_len(|r| r.reference_len),
        )
        .expect("writing to a string");
        out
    }
}

/// Scores `(id, generated, reference)` triples in parallel; rows keep the
/// input order.
pub fn evaluate_pairs(pairs: &[(String, PoseSequence, PoseSequence)]) -> Result<EvalReport> {
    let rows = pairs
        .par_iter()
        .map(|(id, g, r)| evaluate_pair(id, g, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { rows })
}

fn pose_files(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(io_error(dir))? {
        let path = entry.map_err(io_error(dir))?.path();
        if path.extension().is_some_and(|e| e == "a2vp") {
            let id = path
                .file_stem()
                .expect("file has a stem")
                .to_string_lossy()
                .into_owned();
            out.insert(id, path);
        }
    }
    Ok(out)
}

/// Pairs `*.a2vp` files by file stem. Any id present on only one side is an
/// error that lists the offenders.
pub fn evaluate_directories(generated: &Path, reference: &Path) -> Result<EvalReport> {
    let gen = pose_files(generated)?;
    let refs = pose_files(reference)?;
    let only_gen: Vec<&String> = gen.keys().filter(|k| !refs.contains_key(*k)).collect();
    let only_ref: Vec<&String> = refs.keys().filter(|k| !gen.contains_key(*k)).collect();
    if !only_gen.is_empty() || !only_ref.is_empty() {
        return Err(Error::Invalid(format!(
            "sample ids differ: only generated {only_gen:?}, only reference {only_ref:?}"
        )));
    }
    if gen.is_empty() {
        return Err(Error::Invalid(format!(
            "no .a2vp files in {}",
            generated.display()
        )));
    }
    let mut pairs = Vec::with_capacity(gen.len());
    for (id, path) in &gen {
        pairs.push((id.clone(), load_pose(path)?, load_pose(&refs[id])?));
    }
    evaluate_pairs(&pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::FRAME_WIDTH;
    use crate::rng::substream;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn random_seq(rng: &mut crate::rng::Rng, t: usize) -> PoseSequence {
        PoseSequence::new(
            (0..t * FRAME_WIDTH)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    /// Exhaustive search over monotone paths: minimum summed cost, ties
    /// broken towards the shorter path, reported as sum / length.
    fn brute_force(costs: &[f64], n: usize, m: usize) -> f64 {
        #[allow(clippy::too_many_arguments)]
        fn walk(
            c: &[f64],
            n: usize,
            m: usize,
            i: usize,
            j: usize,
            sum: f64,
            len: usize,
            best: &mut (f64, usize),
        ) {
            let sum = sum + c[i * m + j];
            let len = len + 1;
            if i == n - 1 && j == m - 1 {
                if sum < best.0 || (sum == best.0 && len < best.1) {
                    *best = (sum, len);
                }
                return;
            }
            if i + 1 < n {
                walk(c, n, m, i + 1, j, sum, len, best);
            }
            if j + 1 < m {
                walk(c, n, m, i, j + 1, sum, len, best);
            }
            if i + 1 < n && j + 1 < m {
                walk(c, n, m, i + 1, j + 1, sum, len, best);
            }
        }
        let mut best = (f64::INFINITY, 0);
        walk(costs, n, m, 0, 0, 0.0, 0, &mut best);
        best.0 / best.1 as f64
    }

    #[test]
    fn frame_error_cases() {
        let f: Vec<f64> = (0..FRAME_WIDTH).map(|i| i as f64 * 0.01).collect();
        assert_eq!(mean_joint_error(&f, &f), 0.0);
        let mut g = f.clone();
        for j in 0..NUM_JOINTS {
            g[3 * j] += 1.0;
        }
        assert!((mean_joint_error(&f, &g) - 1.0).abs() < 1e-12);
        let mut h = f.clone();
        for j in 0..NUM_JOINTS / 2 {
            h[3 * j + 1] += 2.0;
        }
        assert!((mean_joint_error(&f, &h) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_sequences_align_diagonally() {
        let mut rng = substream(1, "dtw");
        let p = random_seq(&mut rng, 5);
        let r = dtw_mje(&p, &p).unwrap();
        assert_eq!(r.cost, 0.0);
        assert_eq!(r.path, (0..5).map(|i| (i, i)).collect::<Vec<_>>());
    }

    #[test]
    fn single_frame_against_repeats() {
        let mut rng = substream(2, "dtw");
        let a = random_seq(&mut rng, 1);
        let aaa = PoseSequence::new([a.data(), a.data(), a.data()].concat()).unwrap();
        let r = dtw_mje(&a, &aaa).unwrap();
        assert_eq!(r.cost, 0.0);
        assert_eq!(r.path, vec![(0, 0), (0, 1), (0, 2)]);
    }

    #[test]
    fn three_by_three_toy_instance() {
        // frame costs chosen by hand; the best path is (0,0) (1,0) (2,1) (2,2)
        let c = [0.0, 5.0, 9.0, 1.0, 4.0, 6.0, 7.0, 2.0, 1.0];
        let r = dtw_from_costs(&c, 3, 3).unwrap();
        assert_eq!(r.path, vec![(0, 0), (1, 0), (2, 1), (2, 2)]);
        assert!((r.cost - 4.0 / 4.0).abs() < 1e-15);
        assert!((brute_force(&c, 3, 3) - r.cost).abs() < 1e-15);
    }

    #[test]
    fn empty_cost_matrix_is_an_error() {
        assert!(dtw_from_costs(&[], 0, 3).is_err());
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = substream(3, "dtw");
        for _ in 0..50 {
            let n = rng.gen_range(1..=6);
            let m = rng.gen_range(1..=6);
            let p = random_seq(&mut rng, n);
            let q = random_seq(&mut rng, m);
            let costs: Vec<f64> = (0..n * m)
                .map(|k| mean_joint_error(p.frame(k / m), q.frame(k % m)))
                .collect();
            let dp = dtw_mje(&p, &q).unwrap();
            assert!((dp.cost - brute_force(&costs, n, m)).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn path_is_monotone_and_symmetric(seed in 0u64..1000, n in 1usize..8, m in 1usize..8) {
            let mut rng = substream(seed, "prop");
            let p = random_seq(&mut rng, n);
            let q = random_seq(&mut rng, m);
            let a = dtw_mje(&p, &q).unwrap();
            let b = dtw_mje(&q, &p).unwrap();
            prop_assert!((a.cost - b.cost).abs() < 1e-12);
            prop_assert_eq!(a.path[0], (0, 0));
            prop_assert_eq!(*a.path.last().unwrap(), (n - 1, m - 1));
            for w in a.path.windows(2) {
                let step = (w[1].0 - w[0].0, w[1].1 - w[0].1);
                prop_assert!(matches!(step, (1, 0) | (0, 1) | (1, 1)));
            }
            if n == m {
                let diag: f64 = (0..n).map(|i| mean_joint_error(p.frame(i), q.frame(i))).sum::<f64>() / n as f64;
                prop_assert!(a.cost <= diag + 1e-12);
            }
        }
    }

    #[test]
    fn directory_report() {
        let mut rng = substream(4, "dirs");
        let gen = tempfile::tempdir().unwrap();
        let refs = tempfile::tempdir().unwrap();
        for id in ["a", "b"] {
            let p = random_seq(&mut rng, 3);
            crate::pose::save_pose(&gen.path().join(format!("{id}.a2vp")), &p).unwrap();
            crate::pose::save_pose(&refs.path().join(format!("{id}.a2vp")), &p).unwrap();
        }
        let report = evaluate_directories(gen.path(), refs.path()).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert!(report
            .rows
            .iter()
            .all(|r| r.dtw_mje == 0.0 && r.regions == [0.0; 4]));
        assert!(report.to_csv().ends_with("aggregate,0,0,0,0,0,3,3\n"));

        crate::pose::save_pose(&refs.path().join("c.a2vp"), &random_seq(&mut rng, 2)).unwrap();
        let err = evaluate_directories(gen.path(), refs.path())
            .unwrap_err()
            .to_string();
        assert!(err.contains("\"c\""), "{err}");
    }

    #[test]
    fn aggregate_is_the_mean() {
        let row = |id: &str, d: f64| EvalRow {
            id: id.into(),
            dtw_mje: d,
            regions: [d; 4],
            generated_len: 1,
            reference_len: 1,
        };
        let r = EvalReport {
            rows: vec![row("x", 1.0), row("y", 3.0)],
        };
        assert_eq!(r.aggregate(), 2.0);
    }
}
