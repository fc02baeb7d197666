//! Finite-difference checks of every training objective on small random
//! instances.

use rand::Rng as _;

use crate::attention::{Fusion, GlossAttentionConfig, QueryMode};
use crate::error::Result;
use crate::generator::{Generator, GeneratorConfig, StackConfig};
use crate::pose::{EMBED_DIM, FRAME_WIDTH};
use crate::rng::{substream, Rng};
use crate::tensor::{
    grad_check, grad_check_with, GradCheckOptions, GradCheckReport, ParamId, ParamStore, Tensor,
};
use crate::train::{kl_gaussians, latent_l1_loss, length_loss, LatentWeights};
use crate::vae::{
    kl_to_standard_normal, standard_normal, vae_loss, DisentangledVae, LatentDims, VaeConfig,
};

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_TOL: f64 = 1e-4;
/// Coordinates sampled per parameter tensor of the VAE and generator.
pub const MODEL_COORDS_PER_PARAM: usize = 96;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn model_options(seed: u64, h: f64, tol: f64) -> GradCheckOptions {
    GradCheckOptions {
        h,
        tol,
        max_coords_per_param: Some(MODEL_COORDS_PER_PARAM),
        seed,
    }
}

/// Values of magnitude in `[lo, hi)` with random sign, so L1 residuals
/// against small model outputs stay away from the kink at zero.
fn away_from_zero(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut t = uniform(rng, shape, lo, hi);
    for v in t.data_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .expect("shape")
}

struct LatentPair {
    store: ParamStore,
    mu_hat: ParamId,
    lv_hat: ParamId,
    mu: ParamId,
    lv: ParamId,
}

fn latent_pair(seed: u64, frames: usize) -> Result<LatentPair> {
    let mut rng = substream(seed, "gradsuite-latents");
    let mut store = ParamStore::new();
    let mu_hat = store.add("mu_hat", uniform(&mut rng, &[frames, 80], -1.0, 1.0))?;
    let lv_hat = store.add("logvar_hat", uniform(&mut rng, &[frames, 80], -1.5, 0.5))?;
    let mu = store.add("mu", uniform(&mut rng, &[frames, 80], -1.0, 1.0))?;
    let lv = store.add("logvar", uniform(&mut rng, &[frames, 80], -1.5, 0.5))?;
    Ok(LatentPair {
        store,
        mu_hat,
        lv_hat,
        mu,
        lv,
    })
}

/// Width-reduced generator used by the suite (`d_model = 16`).
pub fn tiny_generator_config(gloss: GlossAttentionConfig) -> GeneratorConfig {
    GeneratorConfig {
        d_model: 16,
        encoder: StackConfig {
            layers: 2,
            heads: 4,
            ff: 32,
        },
        decoder: StackConfig {
            layers: 2,
            heads: 8,
            ff: 32,
        },
        t_max: 6,
        length_hidden: 8,
        gloss_attention: gloss,
        ..Default::default()
    }
}

fn generator_entry(
    seed: u64,
    gloss: GlossAttentionConfig,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let gen = Generator::new(
        tiny_generator_config(gloss),
        &mut store,
        &mut substream(seed, "gradsuite-gen"),
        "gen",
    )?;
    let mut rng = substream(seed, "gradsuite-gen-data");
    let (s, t) = (3, 4);
    let text = standard_normal(&mut rng, &[s, EMBED_DIM]);
    let mu = away_from_zero(&mut rng, &[t, 80], 2.0, 3.0);
    let lv = away_from_zero(&mut rng, &[t, 80], 2.0, 3.0);
    let weights = LatentWeights {
        body: 1.0,
        face: 2.0,
        rh: 3.5,
        lh: 2.5,
    };
    let mask = [true, true, true, false];
    grad_check_with::<_, crate::Error>(
        &mut store,
        |g| {
            let out = gen.forward(g, &text, t)?;
            let m = g.constant(mu.clone());
            let v = g.constant(lv.clone());
            let l1 = latent_l1_loss(
                g,
                out.mu,
                out.logvar,
                m,
                v,
                &LatentDims::default(),
                &weights,
                &mask,
            )?;
            let len = length_loss(g, out.length_ratio, 0.6)?;
            Ok(g.add(l1.total, len)?)
        },
        &model_options(seed, h, tol),
    )
}

/// Runs every check. `tol` is the maximum relative error allowed.
pub fn run_grad_suite(seed: u64, h: f64, tol: f64) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    let frame_mask = [true, false, true];
    let weights = LatentWeights {
        body: 1.0,
        face: 2.0,
        rh: 7.0,
        lh: 5.0,
    };

    let mut p = latent_pair(seed, 3)?;
    let (a, b, c, d) = (p.mu_hat, p.lv_hat, p.mu, p.lv);
    let report = grad_check::<_, crate::Error>(
        &mut p.store,
        |g| {
            let (a, b, c, d) = (g.param(a)?, g.param(b)?, g.param(c)?, g.param(d)?);
            let l = latent_l1_loss(g, a, b, c, d, &LatentDims::default(), &weights, &frame_mask)?;
            Ok(l.total)
        },
        h,
        tol,
    )?;
    out.push(SuiteEntry {
        name: "latent_l1",
        report,
    });

    let report = grad_check::<_, crate::Error>(
        &mut p.store,
        |g| {
            let (a, b, c, d) = (g.param(a)?, g.param(b)?, g.param(c)?, g.param(d)?);
            kl_gaussians(g, a, b, c, d, &frame_mask)
        },
        h,
        tol,
    )?;
    out.push(SuiteEntry {
        name: "kl_gaussians",
        report,
    });

    let report = grad_check::<_, crate::Error>(
        &mut p.store,
        |g| {
            let (a, b) = (g.param(a)?, g.param(b)?);
            kl_to_standard_normal(g, a, b, &frame_mask)
        },
        h,
        tol,
    )?;
    out.push(SuiteEntry {
        name: "kl_standard_normal",
        report,
    });

    let mut store = ParamStore::new();
    let r = store.add("ratio", Tensor::new(vec![1, 1], vec![0.3])?)?;
    let report = grad_check::<_, crate::Error>(
        &mut store,
        |g| {
            let r = g.param(r)?;
            length_loss(g, r, 0.55)
        },
        h,
        tol,
    )?;
    out.push(SuiteEntry {
        name: "length",
        report,
    });

    for (name, variant) in [
        ("vae_objective", VaeConfig::default()),
        ("vae_objective_deep", VaeConfig::deep()),
    ] {
        let cfg = VaeConfig {
            beta: 0.05,
            ..variant
        };
        let mut store = ParamStore::new();
        let vae = DisentangledVae::new(
            cfg.clone(),
            &mut store,
            &mut substream(seed, "gradsuite-vae"),
            "vae",
        )?;
        let mut rng = substream(seed, "gradsuite-vae-data");
        let x = away_from_zero(&mut rng, &[2, FRAME_WIDTH], 2.0, 3.0);
        let eps = standard_normal(&mut rng, &[2, 80]);
        let report = grad_check_with::<_, crate::Error>(
            &mut store,
            |g| {
                let xv = g.constant(x.clone());
                let fwd = vae.forward(g, xv, eps.clone())?;
                let l = vae_loss(g, xv, fwd.recon, fwd.mu, fwd.logvar, &cfg, &[true, true])?;
                Ok(l.total)
            },
            &model_options(seed, h, tol),
        )?;
        out.push(SuiteEntry { name, report });
    }

    out.push(SuiteEntry {
        name: "generator",
        report: generator_entry(seed, GlossAttentionConfig::default(), h, tol)?,
    });
    out.push(SuiteEntry {
        name: "generator_fused_attention_queries",
        report: generator_entry(
            seed,
            GlossAttentionConfig {
                window: 3,
                query_mode: QueryMode::Attention { span: 3 },
                fusion: Fusion::WeightedLocalGlobal,
            },
            h,
            tol,
        )?,
    });
    out.push(SuiteEntry {
        name: "generator_mean_queries",
        report: generator_entry(
            seed,
            GlossAttentionConfig {
                window: 5,
                query_mode: QueryMode::Mean { span: 2 },
                fusion: Fusion::LocalOnly,
            },
            h,
            tol,
        )?,
    });
    Ok(out)
}
