//! Multi-head attention and the decoder's local "gloss attention".
//!
//! Gloss attention restricts frame self-attention to a centered window of
//! `N` frames (radius `(N - 1) / 2`, clipped at the sequence ends).
//! Queries can first be smoothed over a short neighborhood, and the local
//! output can be blended with an unmasked global pass through a learned
//! gate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::rng::Rng;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Additive logit for disallowed (query, key) pairs.
pub const MASKED_LOGIT: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    None,
    /// Average over a `span`-frame neighborhood.
    Mean {
        span: usize,
    },
    /// Single-head attention over a `span`-frame neighborhood.
    Attention {
        span: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    LocalOnly,
    /// `y = lambda * local + (1 - lambda) * global`, `lambda = sigmoid(w)`.
    WeightedLocalGlobal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlossAttentionConfig {
    /// Total window size in frames; must be odd.
    pub window: usize,
    pub query_mode: QueryMode,
    pub fusion: Fusion,
}

impl Default for GlossAttentionConfig {
    fn default() -> Self {
        GlossAttentionConfig {
            window: 3,
            query_mode: QueryMode::None,
            fusion: Fusion::LocalOnly,
        }
    }
}

impl GlossAttentionConfig {
    pub fn validate(&self) -> Result<()> {
        check_window(self.window)?;
        match self.query_mode {
            QueryMode::Mean { span } | QueryMode::Attention { span } if span == 0 => {
                Err(Error::Config("query span must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn radius(&self) -> usize {
        (self.window - 1) / 2
    }
}

fn check_window(n: usize) -> Result<()> {
    if n == 0 || n.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "attention window must be odd and positive, got {n}"
        )));
    }
    Ok(())
}

/// `T x T` allowed-pair matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    len: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn allowed(&self, t: usize, u: usize) -> bool {
        self.allowed[t * self.len + u]
    }

    pub fn row(&self, t: usize) -> Vec<usize> {
        (0..self.len).filter(|&u| self.allowed(t, u)).collect()
    }

    /// Additive logit bias: 0 where allowed, [`MASKED_LOGIT`] elsewhere.
    pub fn to_bias(&self) -> Tensor {
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { 0.0 } else { MASKED_LOGIT })
            .collect();
        Tensor::new(vec![self.len, self.len], data).expect("square mask")
    }
}

fn validity(t: usize, pad_mask: Option<&[bool]>) -> Result<Vec<bool>> {
    match pad_mask {
        Some(m) if m.len() != t => Err(Error::Invalid(format!(
            "pad mask has {} entries for {t} frames",
            m.len()
        ))),
        Some(m) => Ok(m.to_vec()),
        None => Ok(vec![true; t]),
    }
}

/// `allowed[t][u]` iff `|t - u| <= (n - 1) / 2` and both frames are valid.
pub fn build_local_mask(t: usize, n: usize, pad_mask: Option<&[bool]>) -> Result<AttentionMask> {
    check_window(n)?;
    let valid = validity(t, pad_mask)?;
    let r = (n - 1) / 2;
    let mut allowed = vec![false; t * t];
    for q in 0..t {
        for k in q.saturating_sub(r)..t.min(q + r + 1) {
            allowed[q * t + k] = valid[q] && valid[k];
        }
    }
    Ok(AttentionMask { len: t, allowed })
}

/// Every valid frame sees every valid frame.
pub fn build_global_mask(t: usize, pad_mask: Option<&[bool]>) -> Result<AttentionMask> {
    build_local_mask(t, 2 * t.max(1) - 1, pad_mask)
}

/// Key-padding bias `[S]` that broadcasts over query rows.
pub fn key_padding_bias(mask: &[bool]) -> Tensor {
    let data = mask
        .iter()
        .map(|&m| if m { 0.0 } else { MASKED_LOGIT })
        .collect();
    Tensor::new(vec![mask.len()], data).expect("non-empty mask")
}

/// Neighborhood of `t` for a `span`-frame pooling window. Odd spans are
/// centered; even spans reach one frame further into the past.
fn neighborhood(t: usize, span: usize, valid: &[bool]) -> Vec<usize> {
    let left = span / 2;
    let right = (span - 1) / 2;
    (t.saturating_sub(left)..valid.len().min(t + right + 1))
        .filter(|&u| valid[u])
        .collect()
}

/// Row-stochastic pooling matrix for mean aggregation.
fn mean_pool_matrix(t: usize, span: usize, valid: &[bool]) -> Tensor {
    let mut data = vec![0.0; t * t];
    for q in 0..t {
        let nb = neighborhood(q, span, valid);
        if nb.is_empty() {
            data[q * t + q] = 1.0;
            continue;
        }
        let w = 1.0 / nb.len() as f64;
        for u in nb {
            data[q * t + u] = w;
        }
    }
    Tensor::new(vec![t, t], data).expect("square")
}

fn pool_bias(t: usize, span: usize, valid: &[bool]) -> Tensor {
    let mut data = vec![MASKED_LOGIT; t * t];
    for q in 0..t {
        for u in neighborhood(q, span, valid) {
            data[q * t + u] = 0.0;
        }
    }
    Tensor::new(vec![t, t], data).expect("square")
}

/// Scaled dot-product attention with `heads` heads over `[T, d]` inputs.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        d_model: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model width {d_model} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            wq: Linear::new(store, rng, &format!("{name}.q"), d_model, d_model)?,
            wk: Linear::new(store, rng, &format!("{name}.k"), d_model, d_model)?,
            wv: Linear::new(store, rng, &format!("{name}.v"), d_model, d_model)?,
            wo: Linear::new(store, rng, &format!("{name}.o"), d_model, d_model)?,
            heads,
            d_model,
        })
    }

    /// `queries: [T, d]`, `kv: [S, d]`, `bias: [T, S]` or `[S]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        queries: Var,
        kv: Var,
        bias: Option<&Tensor>,
    ) -> Result<Var> {
        Ok(self.forward_with_weights(g, queries, kv, bias)?.0)
    }

    /// Also returns each head's `[T, S]` attention weights.
    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        queries: Var,
        kv: Var,
        bias: Option<&Tensor>,
    ) -> Result<(Var, Vec<Var>)> {
        let q = self.wq.forward(g, queries)?;
        let k = self.wk.forward(g, kv)?;
        let v = self.wv.forward(g, kv)?;
        let dh = self.d_model / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let bias = bias.map(|b| g.constant(b.clone()));
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = g.slice(q, 1, lo, hi)?;
            let kh = g.slice(k, 1, lo, hi)?;
            let vh = g.slice(v, 1, lo, hi)?;
            let logits = g.matmul_nt(qh, kh)?;
            let mut logits = g.mul_scalar(logits, scale);
            if let Some(b) = bias {
                logits = g.add(logits, b)?;
            }
            let a = g.softmax(logits);
            outs.push(g.matmul(a, vh)?);
            weights.push(a);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat(&outs, 1)?
        };
        Ok((self.wo.forward(g, cat)?, weights))
    }
}

/// Windowed frame self-attention with optional query aggregation and
/// local/global fusion.
#[derive(Clone, Debug)]
pub struct GlossAttention {
    pub cfg: GlossAttentionConfig,
    pub attn: MultiHeadAttention,
    query_attn: Option<MultiHeadAttention>,
    fusion_gate: Option<ParamId>,
}

impl GlossAttention {
    pub fn new(
        cfg: GlossAttentionConfig,
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        d_model: usize,
        heads: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let attn = MultiHeadAttention::new(store, rng, &format!("{name}.attn"), d_model, heads)?;
        let query_attn = match cfg.query_mode {
            QueryMode::Attention { .. } => Some(MultiHeadAttention::new(
                store,
                rng,
                &format!("{name}.query_agg"),
                d_model,
                1,
            )?),
            _ => None,
        };
        // sigmoid(0) = 0.5
        let fusion_gate = match cfg.fusion {
            Fusion::WeightedLocalGlobal => {
                Some(store.add(format!("{name}.fusion_gate"), Tensor::zeros(&[1]))?)
            }
            Fusion::LocalOnly => None,
        };
        Ok(GlossAttention {
            cfg,
            attn,
            query_attn,
            fusion_gate,
        })
    }

    pub fn fusion_gate(&self) -> Option<ParamId> {
        self.fusion_gate
    }

    /// Builds the aggregated queries for `x: [T, d]`.
    pub fn aggregate_queries(
        &self,
        g: &mut Graph,
        x: Var,
        pad_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let t = g.shape(x)[0];
        let valid = validity(t, pad_mask)?;
        match self.cfg.query_mode {
            QueryMode::None => Ok(x),
            QueryMode::Mean { span } => {
                let p = g.constant(mean_pool_matrix(t, span, &valid));
                Ok(g.matmul(p, x)?)
            }
            QueryMode::Attention { span } => {
                let attn = self.query_attn.as_ref().expect("built with attention mode");
                attn.forward(g, x, x, Some(&pool_bias(t, span, &valid)))
            }
        }
    }

    /// `x: [T, d]` to `[T, d]`.
    pub fn forward(&self, g: &mut Graph, x: Var, pad_mask: Option<&[bool]>) -> Result<Var> {
        let t = g.shape(x)[0];
        let queries = self.aggregate_queries(g, x, pad_mask)?;
        let local = build_local_mask(t, self.cfg.window, pad_mask)?;
        let y_local = self.attn.forward(g, queries, x, Some(&local.to_bias()))?;
        let Some(gate) = self.fusion_gate else {
            return Ok(y_local);
        };
        let global = build_global_mask(t, pad_mask)?;
        let y_global = self.attn.forward(g, queries, x, Some(&global.to_bias()))?;
        let w = g.param(gate)?;
        let lambda = g.sigmoid(w);
        let neg = g.neg(lambda);
        let rest = g.add_scalar(neg, 1.0);
        let a = g.scale_by(y_local, lambda)?;
        let b = g.scale_by(y_global, rest)?;
        Ok(g.add(a, b)?)
    }
}
