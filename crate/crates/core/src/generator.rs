//! Non-autoregressive text-to-latent generator.
//!
//! Token embeddings are projected to the model width and encoded by a
//! pre-norm transformer. A pooled MLP predicts the normalized output length.
//! The decoder starts from time queries built from a neutral reference pose,
//! runs gloss attention over frames and global cross-attention over the
//! text, and emits per-frame `(mu, logvar)` for the VAE latent space in a
//! single parallel pass.

use serde::{Deserialize, Serialize};

use crate::attention::{
    key_padding_bias, GlossAttention, GlossAttentionConfig, MultiHeadAttention,
};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_encoding, LayerNorm, Linear};
use crate::pose::{rest_pose, EMBED_DIM, FRAME_WIDTH};
use crate::rng::Rng;
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::vae::LATENT_DIM;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackConfig {
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub d_model: usize,
    pub encoder: StackConfig,
    pub decoder: StackConfig,
    /// Longest target length in frames. 0 means "take it from the corpus".
    pub t_max: usize,
    pub length_hidden: usize,
    pub gloss_attention: GlossAttentionConfig,
    pub trainable_time_queries: bool,
    /// Flattened 178 x 3 neutral frame; `None` uses the built-in rest pose.
    pub reference_pose: Option<Vec<f64>>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            d_model: 512,
            encoder: StackConfig {
                layers: 3,
                heads: 4,
                ff: 1024,
            },
            decoder: StackConfig {
                layers: 6,
                heads: 8,
                ff: 1024,
            },
            t_max: 0,
            length_hidden: 128,
            gloss_attention: GlossAttentionConfig::default(),
            trainable_time_queries: true,
            reference_pose: None,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, s) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            if s.heads == 0 || !self.d_model.is_multiple_of(s.heads) {
                return Err(Error::Config(format!(
                    "d_model {} is not divisible by {name} heads {}",
                    self.d_model, s.heads
                )));
            }
            if s.layers == 0 || s.ff == 0 {
                return Err(Error::Config(format!(
                    "{name} needs at least one layer and ff width"
                )));
            }
        }
        if self.length_hidden == 0 {
            return Err(Error::Config("length_hidden must be positive".into()));
        }
        if let Some(p) = &self.reference_pose {
            if p.len() != FRAME_WIDTH {
                return Err(Error::Config(format!(
                    "reference pose has {} values, expected {FRAME_WIDTH}",
                    p.len()
                )));
            }
        }
        self.gloss_attention.validate()
    }

    pub fn reference_frame(&self) -> Vec<f64> {
        self.reference_pose.clone().unwrap_or_else(rest_pose)
    }
}

/// `clamp(round(ratio * t_max), 1, t_max)`.
pub fn decoded_length(ratio: f64, t_max: usize) -> usize {
    ((ratio * t_max as f64).round() as usize).clamp(1, t_max.max(1))
}

#[derive(Clone, Debug)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d: usize, ff: usize) -> Result<Self> {
        Ok(FeedForward {
            up: Linear::new(store, rng, &format!("{name}.up"), d, ff)?,
            down: Linear::new(store, rng, &format!("{name}.down"), ff, d)?,
        })
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h);
        Ok(self.down.forward(g, h)?)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    norm_attn: LayerNorm,
    attn: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff: FeedForward,
}

impl EncoderLayer {
    fn forward(&self, g: &mut Graph, x: Var, bias: Option<&Tensor>) -> Result<Var> {
        let h = self.norm_attn.forward(g, x)?;
        let a = self.attn.forward(g, h, h, bias)?;
        let x = g.add(x, a)?;
        let h = self.norm_ff.forward(g, x)?;
        let f = self.ff.forward(g, h)?;
        Ok(g.add(x, f)?)
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    norm_self: LayerNorm,
    gloss: GlossAttention,
    norm_cross: LayerNorm,
    cross: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff: FeedForward,
}

impl DecoderLayer {
    fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        memory: Var,
        frame_mask: Option<&[bool]>,
        text_bias: Option<&Tensor>,
    ) -> Result<Var> {
        let h = self.norm_self.forward(g, x)?;
        let a = self.gloss.forward(g, h, frame_mask)?;
        let x = g.add(x, a)?;
        let h = self.norm_cross.forward(g, x)?;
        let c = self.cross.forward(g, h, memory, text_bias)?;
        let x = g.add(x, c)?;
        let h = self.norm_ff.forward(g, x)?;
        let f = self.ff.forward(g, h)?;
        Ok(g.add(x, f)?)
    }
}

/// Graph handles of one generator pass.
pub struct GeneratorOutput {
    pub mu: Var,
    pub logvar: Var,
    /// `[1, 1]` sigmoid output.
    pub length_ratio: Var,
}

/// Detached generator predictions for one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedLatents {
    pub mu: Tensor,
    pub logvar: Tensor,
    pub length_ratio: f64,
}

#[derive(Clone, Debug)]
pub struct Generator {
    cfg: GeneratorConfig,
    input_proj: Linear,
    encoder: Vec<EncoderLayer>,
    encoder_norm: LayerNorm,
    length_hidden: Linear,
    length_out: Linear,
    query_proj: Linear,
    decoder: Vec<DecoderLayer>,
    decoder_norm: LayerNorm,
    head: Linear,
}

impl Generator {
    /// Registers all parameters under `prefix`. `cfg.t_max` must be set.
    pub fn new(
        cfg: GeneratorConfig,
        store: &mut ParamStore,
        rng: &mut Rng,
        prefix: &str,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.t_max == 0 {
            return Err(Error::Config(
                "generator t_max must be set before building".into(),
            ));
        }
        let d = cfg.d_model;
        let input_proj = Linear::new(store, rng, &format!("{prefix}.input_proj"), EMBED_DIM, d)?;
        let mut encoder = Vec::with_capacity(cfg.encoder.layers);
        for i in 0..cfg.encoder.layers {
            let n = format!("{prefix}.enc{i}");
            encoder.push(EncoderLayer {
                norm_attn: LayerNorm::new(store, &format!("{n}.norm_attn"), d)?,
                attn: MultiHeadAttention::new(
                    store,
                    rng,
                    &format!("{n}.attn"),
                    d,
                    cfg.encoder.heads,
                )?,
                norm_ff: LayerNorm::new(store, &format!("{n}.norm_ff"), d)?,
                ff: FeedForward::new(store, rng, &format!("{n}.ff"), d, cfg.encoder.ff)?,
            });
        }
        let encoder_norm = LayerNorm::new(store, &format!("{prefix}.enc_norm"), d)?;
        let length_hidden = Linear::new(
            store,
            rng,
            &format!("{prefix}.length.hidden"),
            d,
            cfg.length_hidden,
        )?;
        let length_out = Linear::new(
            store,
            rng,
            &format!("{prefix}.length.out"),
            cfg.length_hidden,
            1,
        )?;
        let query_proj = Linear::new(store, rng, &format!("{prefix}.query_proj"), FRAME_WIDTH, d)?;
        if !cfg.trainable_time_queries {
            store.set_trainable(&format!("{prefix}.query_proj."), false);
        }
        let mut decoder = Vec::with_capacity(cfg.decoder.layers);
        for i in 0..cfg.decoder.layers {
            let n = format!("{prefix}.dec{i}");
            decoder.push(DecoderLayer {
                norm_self: LayerNorm::new(store, &format!("{n}.norm_self"), d)?,
                gloss: GlossAttention::new(
                    cfg.gloss_attention,
                    store,
                    rng,
                    &format!("{n}.gloss"),
                    d,
                    cfg.decoder.heads,
                )?,
                norm_cross: LayerNorm::new(store, &format!("{n}.norm_cross"), d)?,
                cross: MultiHeadAttention::new(
                    store,
                    rng,
                    &format!("{n}.cross"),
                    d,
                    cfg.decoder.heads,
                )?,
                norm_ff: LayerNorm::new(store, &format!("{n}.norm_ff"), d)?,
                ff: FeedForward::new(store, rng, &format!("{n}.ff"), d, cfg.decoder.ff)?,
            });
        }
        let decoder_norm = LayerNorm::new(store, &format!("{prefix}.dec_norm"), d)?;
        let head = Linear::new(store, rng, &format!("{prefix}.head"), d, 2 * LATENT_DIM)?;
        Ok(Generator {
            cfg,
            input_proj,
            encoder,
            encoder_norm,
            length_hidden,
            length_out,
            query_proj,
            decoder,
            decoder_norm,
            head,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    /// `[S, 768]` embeddings to `[S, d]` with positional encoding added.
    pub fn embed_project(&self, g: &mut Graph, embeddings: Var) -> Result<Var> {
        let s = g.shape(embeddings)[0];
        let x = self.input_proj.forward(g, embeddings)?;
        let pe = g.constant(sinusoidal_encoding(s, self.cfg.d_model));
        Ok(g.add(x, pe)?)
    }

    pub fn encode_text(&self, g: &mut Graph, x: Var, text_mask: Option<&[bool]>) -> Result<Var> {
        let bias = text_mask.map(key_padding_bias);
        let mut h = x;
        for layer in &self.encoder {
            h = layer.forward(g, h, bias.as_ref())?;
        }
        Ok(self.encoder_norm.forward(g, h)?)
    }

    /// Mean over valid tokens, one hidden GELU layer, sigmoid. `[1, 1]`.
    pub fn predict_length(
        &self,
        g: &mut Graph,
        memory: Var,
        text_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let s = g.shape(memory)[0];
        let valid: Vec<bool> = text_mask
            .map(<[bool]>::to_vec)
            .unwrap_or_else(|| vec![true; s]);
        let n = valid.iter().filter(|&&v| v).count();
        if n == 0 {
            return Err(Error::Invalid("text mask has no valid tokens".into()));
        }
        let w: Vec<f64> = valid
            .iter()
            .map(|&v| if v { 1.0 / n as f64 } else { 0.0 })
            .collect();
        let pool = g.constant(Tensor::new(vec![1, s], w)?);
        let pooled = g.matmul(pool, memory)?;
        let h = self.length_hidden.forward(g, pooled)?;
        let h = g.gelu(h);
        let o = self.length_out.forward(g, h)?;
        Ok(g.sigmoid(o))
    }

    /// Reference pose projected to `d`, repeated `t` times, plus positional
    /// encoding. `[T, d]`.
    pub fn init_time_queries(&self, g: &mut Graph, t: usize) -> Result<Var> {
        if t == 0 {
            return Err(Error::Invalid("cannot decode zero frames".into()));
        }
        let pose = g.constant(Tensor::new(
            vec![1, FRAME_WIDTH],
            self.cfg.reference_frame(),
        )?);
        let q = self.query_proj.forward(g, pose)?;
        let ones = g.constant(Tensor::full(&[t, 1], 1.0));
        let rep = g.matmul(ones, q)?;
        let pe = g.constant(sinusoidal_encoding(t, self.cfg.d_model));
        Ok(g.add(rep, pe)?)
    }

    /// Decoder stack and head. Returns `(mu, logvar)`, each `[T, 80]`.
    pub fn decode_latents(
        &self,
        g: &mut Graph,
        queries: Var,
        memory: Var,
        frame_mask: Option<&[bool]>,
        text_mask: Option<&[bool]>,
    ) -> Result<(Var, Var)> {
        let bias = text_mask.map(key_padding_bias);
        let mut h = queries;
        for layer in &self.decoder {
            h = layer.forward(g, h, memory, frame_mask, bias.as_ref())?;
        }
        let h = self.decoder_norm.forward(g, h)?;
        let out = self.head.forward(g, h)?;
        let mu = g.slice(out, 1, 0, LATENT_DIM)?;
        let logvar = g.slice(out, 1, LATENT_DIM, 2 * LATENT_DIM)?;
        Ok((mu, logvar))
    }

    /// Full pass for one sentence decoded to `t` frames.
    pub fn forward(&self, g: &mut Graph, embeddings: &Tensor, t: usize) -> Result<GeneratorOutput> {
        let e = g.constant(embeddings.clone());
        let x = self.embed_project(g, e)?;
        let memory = self.encode_text(g, x, None)?;
        let length_ratio = self.predict_length(g, memory, None)?;
        let queries = self.init_time_queries(g, t)?;
        let (mu, logvar) = self.decode_latents(g, queries, memory, None, None)?;
        Ok(GeneratorOutput {
            mu,
            logvar,
            length_ratio,
        })
    }

    /// Predicts the length, then decodes that many frames, or `length`
    /// frames when given.
    pub fn infer(
        &self,
        store: &ParamStore,
        embeddings: &Tensor,
        length: Option<usize>,
    ) -> Result<PredictedLatents> {
        let mut g = Graph::with_params(store);
        let e = g.constant(embeddings.clone());
        let x = self.embed_project(&mut g, e)?;
        let memory = self.encode_text(&mut g, x, None)?;
        let ratio = self.predict_length(&mut g, memory, None)?;
        let length_ratio = g.value(ratio).item();
        let t = length.unwrap_or_else(|| decoded_length(length_ratio, self.cfg.t_max));
        let queries = self.init_time_queries(&mut g, t)?;
        let (mu, logvar) = self.decode_latents(&mut g, queries, memory, None, None)?;
        let out = PredictedLatents {
            mu: g.value(mu).clone(),
            logvar: g.value(logvar).clone(),
            length_ratio,
        };
        if !out.mu.is_finite() || !out.logvar.is_finite() || !length_ratio.is_finite() {
            return Err(Error::Divergence("non-finite generator output".into()));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::GlossAttentionConfig;
    use crate::rng::substream;
    use crate::vae::standard_normal;

    pub(crate) fn tiny_config() -> GeneratorConfig {
        GeneratorConfig {
            d_model: 16,
            encoder: StackConfig {
                layers: 1,
                heads: 2,
                ff: 32,
            },
            decoder: StackConfig {
                layers: 2,
                heads: 4,
                ff: 32,
            },
            t_max: 12,
            length_hidden: 8,
            ..Default::default()
        }
    }

    fn build(cfg: GeneratorConfig) -> (ParamStore, Generator) {
        let mut store = ParamStore::new();
        let mut rng = substream(21, "init");
        let gen = Generator::new(cfg, &mut store, &mut rng, "gen").unwrap();
        (store, gen)
    }

    fn text(s: usize, seed: u64) -> Tensor {
        standard_normal(&mut substream(seed, "text"), &[s, EMBED_DIM])
    }

    #[test]
    fn default_config_matches_reference_architecture() {
        let cfg = GeneratorConfig {
            t_max: 100,
            ..Default::default()
        };
        assert_eq!(cfg.d_model, 512);
        assert_eq!(
            (cfg.encoder.layers, cfg.encoder.heads, cfg.encoder.ff),
            (3, 4, 1024)
        );
        assert_eq!(
            (cfg.decoder.layers, cfg.decoder.heads, cfg.decoder.ff),
            (6, 8, 1024)
        );
        assert!(cfg.trainable_time_queries);
        let (_, gen) = build(cfg);
        assert_eq!(gen.head().num_scalars(), 512 * 160 + 160);
    }

    #[test]
    fn bad_head_count_is_rejected() {
        let mut cfg = tiny_config();
        cfg.decoder.heads = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn length_rule() {
        assert_eq!(decoded_length(0.5, 100), 50);
        assert_eq!(decoded_length(0.0, 100), 1);
        assert_eq!(decoded_length(1.0, 100), 100);
        assert_eq!(decoded_length(0.004, 100), 1);
    }

    #[test]
    fn output_shapes_and_determinism() {
        let (store, gen) = build(tiny_config());
        let e = text(3, 1);
        let a = gen.infer(&store, &e, Some(5)).unwrap();
        assert_eq!(a.mu.shape(), &[5, 80]);
        assert_eq!(a.logvar.shape(), &[5, 80]);
        assert!(a.length_ratio > 0.0 && a.length_ratio < 1.0);
        let b = gen.infer(&store, &e, Some(5)).unwrap();
        assert_eq!(a, b);
        let c = gen.infer(&store, &e, None).unwrap();
        assert_eq!(c.mu.rows(), decoded_length(c.length_ratio, 12));
    }

    #[test]
    fn zero_embedding_projection_is_positional_encoding() {
        let (mut store, gen) = build(tiny_config());
        for id in [gen.input_proj.weight, gen.input_proj.bias] {
            store.get_mut(id).value.data_mut().fill(0.0);
        }
        let mut g = Graph::with_params(&store);
        let e = g.constant(Tensor::zeros(&[4, EMBED_DIM]));
        let x = gen.embed_project(&mut g, e).unwrap();
        assert_eq!(g.value(x), &sinusoidal_encoding(4, 16));
    }

    #[test]
    fn time_query_rows_differ_only_by_position() {
        let (store, gen) = build(tiny_config());
        let mut g = Graph::with_params(&store);
        let q = gen.init_time_queries(&mut g, 4).unwrap();
        let pe = sinusoidal_encoding(4, 16);
        let q = g.value(q);
        for t in 1..4 {
            for c in 0..16 {
                let a = q.row(t)[c] - pe.row(t)[c];
                let b = q.row(0)[c] - pe.row(0)[c];
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frozen_time_queries_are_not_trainable() {
        let mut cfg = tiny_config();
        cfg.trainable_time_queries = false;
        let (store, gen) = build(cfg);
        assert!(!store.get(gen.query_proj.weight).trainable);
        assert!(store.get(gen.head.weight).trainable);
    }

    #[test]
    fn padded_tokens_do_not_affect_valid_outputs() {
        let (store, gen) = build(tiny_config());
        let mask = [true, true, false];
        let run = |e: Tensor| {
            let mut g = Graph::with_params(&store);
            let ev = g.constant(e);
            let x = gen.embed_project(&mut g, ev).unwrap();
            let m = gen.encode_text(&mut g, x, Some(&mask)).unwrap();
            let r = gen.predict_length(&mut g, m, Some(&mask)).unwrap();
            (g.value(m).clone(), g.value(r).item())
        };
        let e = text(3, 2);
        let mut e2 = e.clone();
        for v in &mut e2.data_mut()[2 * EMBED_DIM..] {
            *v = -5.0;
        }
        let (m1, r1) = run(e);
        let (m2, r2) = run(e2);
        assert_eq!(&m1.data()[..32], &m2.data()[..32]);
        assert_eq!(r1, r2);
    }

    #[test]
    fn decoder_self_attention_is_local_per_layer() {
        // Two decoder layers with radius 1: receptive field radius 2.
        let (store, gen) = build(tiny_config());
        let mut rng = substream(4, "q");
        let q = standard_normal(&mut rng, &[8, 16]);
        let e = text(2, 3);
        let run = |q: &Tensor| {
            let mut g = Graph::with_params(&store);
            let ev = g.constant(e.clone());
            let x = gen.embed_project(&mut g, ev).unwrap();
            let m = gen.encode_text(&mut g, x, None).unwrap();
            let qv = g.constant(q.clone());
            let (mu, _) = gen.decode_latents(&mut g, qv, m, None, None).unwrap();
            g.value(mu).clone()
        };
        let base = run(&q);
        let mut qp = q.clone();
        qp.data_mut()[16] += 1.0;
        let out = run(&qp);
        for t in 0..8 {
            assert_eq!(out.row(t) == base.row(t), t.abs_diff(1) > 2, "t={t}");
        }
    }

    #[test]
    fn cross_attention_reaches_every_frame() {
        let (store, gen) = build(tiny_config());
        let mut hits = 0;
        let trials = 20;
        for k in 0..trials {
            let e = text(3, 100 + k);
            let mut e2 = e.clone();
            let tok = (k % 3) as usize;
            e2.data_mut()[tok * EMBED_DIM + 7] += 0.5;
            let a = gen.infer(&store, &e, Some(10)).unwrap();
            let b = gen.infer(&store, &e2, Some(10)).unwrap();
            if (0..10).all(|t| a.mu.row(t) != b.mu.row(t)) {
                hits += 1;
            }
        }
        assert!(hits as f64 >= 0.95 * trials as f64, "{hits}/{trials}");
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let cfg = GeneratorConfig {
            gloss_attention: GlossAttentionConfig {
                window: 5,
                ..Default::default()
            },
            ..tiny_config()
        };
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<GeneratorConfig>(&json).unwrap(), cfg);
        assert!(serde_json::from_str::<GeneratorConfig>(r#"{"d_modl":8}"#).is_err());
    }
}
