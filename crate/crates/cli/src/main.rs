use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use a2v_core::artifacts::{load_generator, load_vae, save_generator, save_vae};
use a2v_core::eval::evaluate_directories;
use a2v_core::gradsuite::{run_grad_suite, DEFAULT_STEP, DEFAULT_TOL};
use a2v_core::pipeline::{synthesize_all, Models};
use a2v_core::pose::{
    generate_synthetic_corpus, load_corpus, normalize_pose, save_corpus, save_pose,
};
use a2v_core::train::{
    round_trip_error, teacher_targets, train_generator, train_vae, GenState, Phase,
};
use a2v_core::RunConfig;

#[derive(Parser)]
#[command(
    name = "a2v",
    version,
    about = "Articulator-disentangled text-to-pose pipeline"
)]
struct Cli {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Print the effective configuration and exit.
    #[arg(long)]
    print_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    GenData {
        #[arg(long)]
        vocab: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        max_tokens: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the articulator VAE on every corpus frame.
    TrainVae {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Loss curve CSV; defaults to the checkpoint path with `.csv`.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Train the generator against frozen VAE posteriors.
    TrainGen {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        vae: Option<PathBuf>,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
        phase: u8,
        /// Continue from a saved generator state.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Generate pose files from token sequences.
    Synthesize {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        vae: Option<PathBuf>,
        #[arg(long)]
        generator: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated token ids; repeatable. Defaults to every corpus
        /// sample.
        #[arg(long = "tokens")]
        tokens: Vec<String>,
        /// Decode the predicted means (`eps = 0`).
        #[arg(long)]
        deterministic: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the normalized corpus poses here, for `eval`.
        #[arg(long)]
        references: Option<PathBuf>,
    },
    /// Score generated poses against references with DTW-MJE.
    Eval {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every loss and the generator.
    GradCheck {
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
        #[arg(long, default_value_t = DEFAULT_STEP)]
        step: f64,
        #[arg(long, default_value_t = 11)]
        seed: u64,
    },
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("A2V_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| anyhow!("A2V_THREADS must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("building the worker pool")?;
    }
    Ok(())
}

fn with_extension(path: &Path, ext: &str) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(ext);
    PathBuf::from(p)
}

fn parse_tokens(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .with_context(|| format!("bad token id `{t}` in `{s}`"))
        })
        .collect()
}

fn run(cli: Cli) -> Result<bool> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cli.print_config {
        writeln!(io::stdout(), "{}", cfg.to_json())?;
        return Ok(true);
    }
    let Some(command) = cli.command else {
        bail!("no subcommand given (see --help)");
    };
    match command {
        Command::GenData {
            vocab,
            samples,
            max_tokens,
            seed,
            out,
        } => {
            cfg.data.vocab_size = vocab.unwrap_or(cfg.data.vocab_size);
            cfg.data.samples = samples.unwrap_or(cfg.data.samples);
            cfg.data.max_tokens = max_tokens.unwrap_or(cfg.data.max_tokens);
            let seed = seed.unwrap_or(cfg.seed);
            let out = out.unwrap_or(cfg.paths.corpus);
            let corpus = generate_synthetic_corpus(cfg.data.synth_params(seed))?;
            save_corpus(&out, &corpus)?;
            log::info!(
                "wrote {} samples (t_max {}) to {}",
                corpus.samples.len(),
                corpus.t_max(),
                out.display()
            );
        }
        Command::TrainVae {
            corpus,
            epochs,
            out,
            curve,
        } => {
            if let Some(e) = epochs {
                cfg.vae_training.epochs = e;
            }
            let corpus = load_corpus(&corpus.unwrap_or(cfg.paths.corpus))?;
            let out = out.unwrap_or(cfg.paths.vae_checkpoint);
            let trained = train_vae(&corpus, &cfg.vae, &cfg.vae_training, cfg.seed)?;
            save_vae(&out, &trained.vae, &trained.store)?;
            trained
                .curve
                .write_csv(&curve.unwrap_or_else(|| with_extension(&out, ".csv")))?;
            let rt = round_trip_error(&trained.vae, &trained.store, &corpus)?;
            log::info!(
                "round-trip MSE / variance: {:.4} (saved {})",
                rt.ratio(),
                out.display()
            );
        }
        Command::TrainGen {
            corpus,
            vae,
            phase,
            resume,
            epochs,
            out,
            curve,
        } => {
            if let Some(e) = epochs {
                cfg.generator_training.epochs = e;
            }
            let phase = Phase::from_number(phase)?;
            let corpus = load_corpus(&corpus.unwrap_or(cfg.paths.corpus))?;
            let vae_path = vae.unwrap_or(cfg.paths.vae_checkpoint);
            let (vae, vae_store) = load_vae(&vae_path, Some(&cfg.vae))
                .with_context(|| format!("loading VAE {}", vae_path.display()))?;
            if cfg.generator.t_max == 0 {
                cfg.generator.t_max = corpus.t_max();
            }
            let state = match &resume {
                Some(p) => load_generator(p, Some(&cfg.generator))
                    .with_context(|| format!("resuming from {}", p.display()))?,
                None => {
                    if phase == Phase::Two {
                        log::warn!("phase 2 without --resume starts from a fresh generator");
                    }
                    GenState::fresh(cfg.generator.clone(), &cfg.generator_training, cfg.seed)?
                }
            };
            let targets = teacher_targets(&vae, &vae_store, &corpus)?;
            let outcome = train_generator(
                &corpus,
                &targets,
                state,
                &cfg.generator_training,
                phase,
                cfg.seed,
            )?;
            let out = out.unwrap_or(cfg.paths.generator_checkpoint);
            save_generator(&out, &outcome.state)?;
            outcome
                .curve
                .write_csv(&curve.unwrap_or_else(|| with_extension(&out, ".csv")))?;
            log::info!(
                "phase {}: validation latent L1 {:.5} -> {:.5}{} (saved {})",
                phase.number(),
                outcome.initial_val_latent_l1,
                outcome.final_val_latent_l1,
                if outcome.stopped_early {
                    ", stopped early"
                } else {
                    ""
                },
                out.display()
            );
        }
        Command::Synthesize {
            corpus,
            vae,
            generator,
            out,
            tokens,
            deterministic,
            seed,
            references,
        } => {
            let corpus = load_corpus(&corpus.unwrap_or(cfg.paths.corpus))?;
            let (vae, vae_store) =
                load_vae(&vae.unwrap_or(cfg.paths.vae_checkpoint), Some(&cfg.vae))?;
            let state = load_generator(&generator.unwrap_or(cfg.paths.generator_checkpoint), None)?;
            let (ids, sequences): (Vec<String>, Vec<Vec<usize>>) = if tokens.is_empty() {
                corpus
                    .samples
                    .iter()
                    .map(|s| (s.id.clone(), s.tokens.clone()))
                    .unzip()
            } else {
                let mut ids = Vec::new();
                let mut seqs = Vec::new();
                for (i, t) in tokens.iter().enumerate() {
                    ids.push(format!("input-{i:04}"));
                    seqs.push(parse_tokens(t)?);
                }
                (ids, seqs)
            };
            let models = Models {
                generator: &state.generator,
                generator_store: &state.store,
                vae: &vae,
                vae_store: &vae_store,
            };
            let results = synthesize_all(
                &models,
                &corpus,
                &sequences,
                deterministic,
                seed.unwrap_or(cfg.seed),
            )?;
            let out = out.unwrap_or(cfg.paths.output);
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for (id, r) in ids.iter().zip(&results) {
                save_pose(&out.join(format!("{id}.a2vp")), &r.pose)?;
            }
            if let Some(dir) = references {
                if !tokens.is_empty() {
                    bail!("--references needs corpus samples, not --tokens");
                }
                fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                for s in &corpus.samples {
                    save_pose(
                        &dir.join(format!("{}.a2vp", s.id)),
                        &normalize_pose(&s.pose)?,
                    )?;
                }
            }
            log::info!("wrote {} pose files to {}", results.len(), out.display());
        }
        Command::Eval {
            generated,
            reference,
            out,
        } => {
            let report = evaluate_directories(&generated, &reference)?;
            let csv = report.to_csv();
            match out {
                Some(p) => {
                    fs::write(&p, csv).with_context(|| format!("writing {}", p.display()))?
                }
                None => io::stdout().write_all(csv.as_bytes())?,
            }
            log::info!(
                "aggregate DTW-MJE {:.6} over {} samples",
                report.aggregate(),
                report.rows.len()
            );
        }
        Command::GradCheck { tol, step, seed } => {
            let entries = run_grad_suite(seed, step, tol)?;
            let mut ok = true;
            let mut stdout = io::stdout().lock();
            writeln!(
                stdout,
                "{:<36} {:>12} {:>8}  result",
                "loss", "max_rel_err", "coords"
            )?;
            for e in &entries {
                let pass = e.report.passed();
                ok &= pass;
                writeln!(
                    stdout,
                    "{:<36} {:>12.3e} {:>8}  {}",
                    e.name,
                    e.report.max_rel_error,
                    e.report.coords_checked,
                    if pass { "pass" } else { "FAIL" }
                )?;
                if !pass {
                    if let (Some((name, i)), Some((a, n))) =
                        (&e.report.worst, e.report.worst_values)
                    {
                        writeln!(
                            stdout,
                            "    worst at {name}[{i}]: analytic {a:e}, numeric {n:e}"
                        )?;
                    }
                }
            }
            writeln!(
                stdout,
                "tolerance {tol:e}, step {step:e}: {}",
                if ok { "pass" } else { "FAIL" }
            )?;
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::FAILURE;
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        // A closed downstream pipe (`a2v eval | head`) is not a failure.
        Err(e)
            if e.downcast_ref::<io::Error>()
                .is_some_and(|io| io.kind() == io::ErrorKind::BrokenPipe) =>
        {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
