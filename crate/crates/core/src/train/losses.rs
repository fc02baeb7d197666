//! Generator-side objectives: weighted latent L1, Gaussian KL and the
//! length-ratio loss.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::pose::Articulator;
use crate::tensor::{Graph, Var};
use crate::vae::{expand_mask, LatentDims, LATENT_ORDER};

/// Per-articulator weights of the latent L1 term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentWeights {
    pub body: f64,
    pub rh: f64,
    pub lh: f64,
    pub face: f64,
}

impl LatentWeights {
    pub fn uniform(w: f64) -> Self {
        LatentWeights {
            body: w,
            rh: w,
            lh: w,
            face: w,
        }
    }

    pub fn of(&self, a: Articulator) -> f64 {
        match a {
            Articulator::Body => self.body,
            Articulator::RightHand => self.rh,
            Articulator::LeftHand => self.lh,
            Articulator::Face => self.face,
        }
    }
}

/// Handles to the latent L1 objective.
pub struct LatentL1 {
    pub total: Var,
    /// Unweighted `mu` + `logvar` MAE per region, in latent order
    /// (body, right hand, left hand, face).
    pub regions: [Var; 4],
}

fn masked_slice_mae(
    g: &mut Graph,
    a: Var,
    b: Var,
    lo: usize,
    hi: usize,
    frame_mask: &[bool],
) -> Result<Var> {
    let x = g.slice(a, 1, lo, hi)?;
    let y = g.slice(b, 1, lo, hi)?;
    let d = g.sub(x, y)?;
    let d = g.abs(d);
    let m = expand_mask(frame_mask, hi - lo);
    Ok(g.mean(d, Some(&m))?)
}

/// `sum_a lambda_a (|mu_hat - mu|_1 + |logvar_hat - logvar|_1)` where each
/// norm is a mean over the region's latent slice and the valid frames.
#[allow(clippy::too_many_arguments)]
pub fn latent_l1_loss(
    g: &mut Graph,
    mu_hat: Var,
    logvar_hat: Var,
    mu: Var,
    logvar: Var,
    layout: &LatentDims,
    weights: &LatentWeights,
    frame_mask: &[bool],
) -> Result<LatentL1> {
    let mut regions = Vec::with_capacity(4);
    let mut total: Option<Var> = None;
    for a in LATENT_ORDER {
        let r = layout.range(a);
        let m = masked_slice_mae(g, mu_hat, mu, r.start, r.end, frame_mask)?;
        let v = masked_slice_mae(g, logvar_hat, logvar, r.start, r.end, frame_mask)?;
        let term = g.add(m, v)?;
        regions.push(term);
        let w = g.mul_scalar(term, weights.of(a));
        total = Some(match total {
            Some(t) => g.add(t, w)?,
            None => w,
        });
    }
    Ok(LatentL1 {
        total: total.expect("four regions"),
        regions: [regions[0], regions[1], regions[2], regions[3]],
    })
}

/// `KL(N(mu_hat, exp(logvar_hat)) || N(mu, exp(logvar)))`, summed over
/// latent dimensions and averaged over valid frames.
pub fn kl_gaussians(
    g: &mut Graph,
    mu_hat: Var,
    logvar_hat: Var,
    mu: Var,
    logvar: Var,
    frame_mask: &[bool],
) -> Result<Var> {
    let width = g.shape(mu)[1];
    let n = frame_mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(crate::Error::Invalid("mask has no valid frames".into()));
    }
    let dlv = g.sub(logvar, logvar_hat)?;
    let half_dlv = g.mul_scalar(dlv, 0.5);
    let var_hat = g.exp(logvar_hat);
    let dmu = g.sub(mu_hat, mu)?;
    let dmu2 = g.square(dmu);
    let num = g.add(var_hat, dmu2)?;
    let neg_lv = g.neg(logvar);
    let inv_var = g.exp(neg_lv);
    let ratio = g.mul(num, inv_var)?;
    let half_ratio = g.mul_scalar(ratio, 0.5);
    let per = g.add(half_dlv, half_ratio)?;
    let per = g.add_scalar(per, -0.5);
    let mask = expand_mask(frame_mask, width);
    let total = g.sum(per, Some(&mask))?;
    Ok(g.mul_scalar(total, 1.0 / n as f64))
}

/// `|ratio_hat - T / T_max|`.
pub fn length_loss(g: &mut Graph, ratio_hat: Var, target_ratio: f64) -> Result<Var> {
    let d = g.add_scalar(ratio_hat, -target_ratio);
    let a = g.abs(d);
    Ok(g.sum(a, None)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn consts(g: &mut Graph, rows: usize, fill: &[(usize, f64)]) -> Var {
        let mut t = Tensor::zeros(&[rows, 80]);
        for &(i, v) in fill {
            t.data_mut()[i] = v;
        }
        g.constant(t)
    }

    #[test]
    fn identical_predictions_cost_nothing() {
        let mut g = Graph::new();
        let mu = consts(&mut g, 2, &[(3, 0.4), (90, -1.0)]);
        let lv = consts(&mut g, 2, &[(10, -2.0)]);
        let l = latent_l1_loss(
            &mut g,
            mu,
            lv,
            mu,
            lv,
            &LatentDims::default(),
            &LatentWeights::uniform(1.0),
            &[true, true],
        )
        .unwrap();
        assert_eq!(g.value(l.total).item(), 0.0);
        let kl = kl_gaussians(&mut g, mu, lv, mu, lv, &[true, true]).unwrap();
        assert!(g.value(kl).item().abs() < 1e-15);
    }

    #[test]
    fn body_error_only_touches_body_terms() {
        let mut g = Graph::new();
        let zero = consts(&mut g, 1, &[]);
        // body occupies latent 0..8
        let mu_hat = consts(&mut g, 1, &[(0, 0.8)]);
        let lv_hat = consts(&mut g, 1, &[(5, -0.4)]);
        let l = latent_l1_loss(
            &mut g,
            mu_hat,
            lv_hat,
            zero,
            zero,
            &LatentDims::default(),
            &LatentWeights::uniform(1.0),
            &[true],
        )
        .unwrap();
        assert!((g.value(l.total).item() - (0.8 / 8.0 + 0.4 / 8.0)).abs() < 1e-15);
        assert!((g.value(l.regions[0]).item() - 0.15).abs() < 1e-15);
        for r in &l.regions[1..] {
            assert_eq!(g.value(*r).item(), 0.0);
        }
    }

    #[test]
    fn doubling_right_hand_weight_doubles_its_contribution() {
        let run = |rh: f64| {
            let mut g = Graph::new();
            let zero = consts(&mut g, 1, &[]);
            let mu_hat = consts(&mut g, 1, &[(0, 1.0), (10, 2.8)]);
            let w = LatentWeights {
                rh,
                ..LatentWeights::uniform(1.0)
            };
            let l = latent_l1_loss(
                &mut g,
                mu_hat,
                zero,
                zero,
                zero,
                &LatentDims::default(),
                &w,
                &[true],
            )
            .unwrap();
            g.value(l.total).item()
        };
        let body = 1.0 / 8.0;
        let rh = 2.8 / 28.0;
        assert!((run(1.0) - (body + rh)).abs() < 1e-15);
        assert!((run(2.0) - (body + 2.0 * rh)).abs() < 1e-15);
    }

    #[test]
    fn unit_mean_shift_gives_half() {
        let mut g = Graph::new();
        let mu_hat = g.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let mu = g.constant(Tensor::zeros(&[1, 1]));
        let lv = g.constant(Tensor::zeros(&[1, 1]));
        let kl = kl_gaussians(&mut g, mu_hat, lv, mu, lv, &[true]).unwrap();
        assert!((g.value(kl).item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn padded_frames_change_nothing() {
        let mut g = Graph::new();
        let a = consts(&mut g, 1, &[(1, 0.3), (50, -0.2)]);
        let b = consts(&mut g, 1, &[(70, 0.5)]);
        let a2 = consts(&mut g, 2, &[(1, 0.3), (50, -0.2), (81, 9.0)]);
        let b2 = consts(&mut g, 2, &[(70, 0.5), (100, -7.0)]);
        let w = LatentWeights {
            body: 1.0,
            rh: 3.5,
            lh: 2.5,
            face: 2.0,
        };
        let one = latent_l1_loss(&mut g, a, b, b, a, &LatentDims::default(), &w, &[true]).unwrap();
        let two = latent_l1_loss(
            &mut g,
            a2,
            b2,
            b2,
            a2,
            &LatentDims::default(),
            &w,
            &[true, false],
        )
        .unwrap();
        assert!((g.value(one.total).item() - g.value(two.total).item()).abs() < 1e-9);
        let k1 = kl_gaussians(&mut g, a, b, b, a, &[true]).unwrap();
        let k2 = kl_gaussians(&mut g, a2, b2, b2, a2, &[true, false]).unwrap();
        assert!((g.value(k1).item() - g.value(k2).item()).abs() < 1e-9);
    }

    #[test]
    fn length_loss_is_absolute_ratio_error() {
        let mut g = Graph::new();
        let r = g.input(Tensor::new(vec![1, 1], vec![0.3]).unwrap());
        let l = length_loss(&mut g, r, 0.5).unwrap();
        assert!((g.value(l).item() - 0.2).abs() < 1e-15);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(r).unwrap(), &[-1.0]);
    }
}
