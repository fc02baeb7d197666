//! Dynamic hand-weight boosting.
//!
//! Both hands share a boost factor `s` that grows while the hand loss stays
//! large relative to the remaining terms:
//! `s <- clip(s * (ema_hand / (ema_other + eps))^alpha, 1, s_max)`.

use serde::{Deserialize, Serialize};

use super::losses::LatentWeights;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoostConfig {
    /// When false, `s` stays at 1 and the hands use their base weights.
    pub dynamic: bool,
    pub base_rh: f64,
    pub base_lh: f64,
    pub s_max: f64,
    pub alpha: f64,
    /// EMA decay.
    pub rho: f64,
    pub eps: f64,
}

impl Default for BoostConfig {
    fn default() -> Self {
        BoostConfig {
            dynamic: true,
            base_rh: 3.5,
            base_lh: 2.5,
            s_max: 4.0,
            alpha: 0.5,
            rho: 0.99,
            eps: 1e-8,
        }
    }
}

impl BoostConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s_max >= 1.0) {
            return Err(Error::Config(format!(
                "s_max must be at least 1, got {}",
                self.s_max
            )));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config(format!(
                "ema decay must lie in [0, 1), got {}",
                self.rho
            )));
        }
        if !(self.alpha >= 0.0) || !(self.eps > 0.0) {
            return Err(Error::Config("alpha must be >= 0 and eps > 0".into()));
        }
        Ok(())
    }

    /// `(b_RH * s_max, b_LH * s_max)`.
    pub fn effective_cap(&self) -> (f64, f64) {
        (self.base_rh * self.s_max, self.base_lh * self.s_max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicWeightState {
    pub cfg: BoostConfig,
    pub s: f64,
    pub ema_hand: f64,
    pub ema_other: f64,
    pub updates: u64,
}

impl DynamicWeightState {
    pub fn new(cfg: BoostConfig) -> Self {
        DynamicWeightState {
            cfg,
            s: 1.0,
            ema_hand: 0.0,
            ema_other: 0.0,
            updates: 0,
        }
    }

    pub fn lambda_rh(&self) -> f64 {
        self.cfg.base_rh * self.s
    }

    pub fn lambda_lh(&self) -> f64 {
        self.cfg.base_lh * self.s
    }

    /// Latent-loss weights with the current boost applied to the hands.
    pub fn weights(&self, body: f64, face: f64) -> LatentWeights {
        LatentWeights {
            body,
            face,
            rh: self.lambda_rh(),
            lh: self.lambda_lh(),
        }
    }

    /// One EMA and boost update from this step's unweighted stream losses.
    pub fn update(&mut self, l_hand: f64, l_other: f64) -> Result<()> {
        if !(l_hand >= 0.0) || !(l_other >= 0.0) {
            return Err(Error::Divergence(format!(
                "boost update received hand loss {l_hand} and other loss {l_other}"
            )));
        }
        let rho = self.cfg.rho;
        self.ema_hand = rho * self.ema_hand + (1.0 - rho) * l_hand;
        self.ema_other = rho * self.ema_other + (1.0 - rho) * l_other;
        self.updates += 1;
        if self.cfg.dynamic {
            let ratio = self.ema_hand / (self.ema_other + self.cfg.eps);
            self.s = (self.s * ratio.powf(self.cfg.alpha)).clamp(1.0, self.cfg.s_max);
        }
        Ok(())
    }

    /// `1 <= s <= s_max` and the effective weights are `b * s`.
    pub fn check_invariants(&self, weights: &LatentWeights) -> Result<()> {
        let ok = (1.0..=self.cfg.s_max).contains(&self.s)
            && weights.rh == self.cfg.base_rh * self.s
            && weights.lh == self.cfg.base_lh * self.s;
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!(
                "boost invariant violated: s={}, weights=({}, {})",
                self.s, weights.rh, weights.lh
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_cap_is_fourteen_ten() {
        assert_eq!(BoostConfig::default().effective_cap(), (14.0, 10.0));
    }

    #[test]
    fn balanced_streams_keep_s() {
        let mut st = DynamicWeightState::new(BoostConfig::default());
        st.s = 2.0;
        st.ema_hand = 0.3;
        st.ema_other = 0.3;
        st.update(0.3, 0.3).unwrap();
        assert!((st.s - 2.0).abs() < 1e-7);
    }

    #[test]
    fn saturated_boost_stays_at_cap() {
        let mut st = DynamicWeightState::new(BoostConfig::default());
        st.s = 4.0;
        st.ema_hand = 1.0;
        st.ema_other = 0.1;
        st.update(1.0, 0.1).unwrap();
        assert_eq!(st.s, 4.0);
        assert_eq!((st.lambda_rh(), st.lambda_lh()), (14.0, 10.0));
    }

    #[test]
    fn first_update_follows_the_formula() {
        let mut st = DynamicWeightState::new(BoostConfig::default());
        st.update(2.0, 1.0).unwrap();
        let want = ((0.01f64 * 2.0) / (0.01 * 1.0 + 1e-8)).sqrt();
        assert_eq!(st.s, want.clamp(1.0, 4.0));
        assert!((st.ema_hand - 0.02).abs() < 1e-15);
    }

    #[test]
    fn static_mode_keeps_base_weights() {
        let mut st = DynamicWeightState::new(BoostConfig {
            dynamic: false,
            ..Default::default()
        });
        for _ in 0..10 {
            st.update(5.0, 0.1).unwrap();
        }
        assert_eq!(st.s, 1.0);
    }

    proptest! {
        #[test]
        fn s_stays_bounded(losses in prop::collection::vec((0.0f64..10.0, 0.0f64..10.0), 1..200)) {
            let mut st = DynamicWeightState::new(BoostConfig::default());
            for (h, o) in losses {
                st.update(h, o).unwrap();
                let w = st.weights(1.0, 2.0);
                prop_assert!(st.check_invariants(&w).is_ok());
            }
        }

        #[test]
        fn s_is_monotone_in_hand_ema(
            s in 1.0f64..4.0,
            other in 0.01f64..5.0,
            a in 0.0f64..5.0,
            b in 0.0f64..5.0,
            l in 0.0f64..5.0,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let run = |ema_hand: f64| {
                let mut st = DynamicWeightState::new(BoostConfig::default());
                st.s = s;
                st.ema_hand = ema_hand;
                st.ema_other = other;
                st.update(l, other).unwrap();
                st.s
            };
            prop_assert!(run(lo) <= run(hi));
        }
    }
}
