use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use congan::checkpoint::{Checkpoint, MANIFEST_FILE};
use congan::data::{build_fixed_size_test_sets, encode_ppm, read_suites, write_suites, Dataset, Suite};
use congan::eval::{cross_discriminator_scores, mcse, sample_conditional, sample_plain, EvalMeta, EvalReport};
use congan::semantic::{sample_color_triplets, train_triplet_phi, TripletTrainConfig};
use congan::training::{
    load_discriminator, load_plain_generator, phi_checkpoint, train, train_wgan_baseline, ModelKind, TrainConfig,
    TrainData, TrainedModel, Trainer, CHECKPOINT_DIR,
};
use congan::{Constraint, SemanticSpace};
use congan_service::{load_models, router, Service};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;

#[derive(Parser)]
#[command(name = "congan", version, about = "Constrained adversarial image generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON configuration file; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory.
    #[arg(long, default_value = "data/shapes")]
    data: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic shapes dataset and its evaluation suites.
    MakeData {
        #[arg(long, default_value = "data/shapes")]
        out: PathBuf,
        #[arg(long, default_value_t = 5000)]
        count: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        sets_per_k: usize,
    },
    /// Train the constrained generator.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "runs/congan")]
        out: PathBuf,
        /// Resume from this checkpoint instead of starting fresh.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Train the unconditional baseline.
    TrainWgan {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "runs/wgan")]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Train a triplet-network φ on color triplets.
    TrainPhi {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "runs/phi")]
        out: PathBuf,
        #[arg(long, default_value_t = 20000)]
        train_triplets: usize,
        #[arg(long, default_value_t = 2000)]
        test_triplets: usize,
    },
    /// Per-k MCSE on held-out suites, plus optional cross critic scores.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Baseline run whose samples and critic join the cross scores.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Suite directory; built from the checkpoint's φ when absent.
        #[arg(long)]
        suites: Option<PathBuf>,
        #[arg(long, default_value = "runs/eval")]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 200)]
        sets_per_k: usize,
        #[arg(long, default_value_t = 5)]
        max_k: usize,
    },
    /// Generate images for a constraint set given as `pos:neg` dataset ids.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "constraint", required = true)]
        constraints: Vec<String>,
        #[arg(long, default_value_t = 3)]
        samples: usize,
        #[arg(long, default_value = "runs/generated")]
        out: PathBuf,
    },
    /// Serve the interactive session API.
    Serve {
        #[command(flatten)]
        common: Common,
        /// Checkpoint, run directory, or directory of runs.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "runs/sessions")]
        sessions: PathBuf,
    },
}

fn read_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => Ok(serde_json::from_slice(&fs::read(p).with_context(|| format!("reading {}", p.display()))?)?),
        None => Ok(T::default()),
    }
}

fn checkpoint_dir(p: &Path) -> PathBuf {
    if p.join(MANIFEST_FILE).exists() {
        p.to_path_buf()
    } else {
        p.join(CHECKPOINT_DIR)
    }
}

fn print_record(r: &congan::training::MetricRecord) {
    if r.iteration % 50 == 0 {
        tracing::info!(
            iteration = r.iteration,
            w = r.w_estimate,
            d_loss = r.d_loss,
            g_loss = r.g_loss,
            constraint = r.constraint_loss,
            mcse = r.mcse_sample,
        );
    }
}

fn run_training(common: &Common, out: &Path, resume: Option<&Path>, iterations: Option<u64>, kind: ModelKind) -> Result<()> {
    let ds = Dataset::load(&common.data)?;
    if let Some(r) = resume {
        let ckpt = Checkpoint::load(&checkpoint_dir(r))?;
        let cfg: TrainConfig = serde_json::from_value(ckpt.config.clone())?;
        let data = TrainData::from_dataset(&ds, cfg.semantic.build()?)?;
        let mut t = Trainer::resume(&ckpt, &data)?;
        if let Some(n) = iterations {
            t.cfg.iterations = n;
        }
        t.run(Some(out), print_record)?;
        return Ok(());
    }
    let mut cfg: TrainConfig = match (&common.config, kind) {
        (Some(p), _) => read_json(Some(p))?,
        (None, ModelKind::Wgan) => TrainConfig::wgan(),
        (None, ModelKind::Congan) => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(n) = iterations {
        cfg.iterations = n;
    }
    let data = TrainData::from_dataset(&ds, cfg.semantic.build()?)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), serde_json::to_vec_pretty(&cfg)?)?;
    match kind {
        ModelKind::Congan => train(cfg, &data, Some(out), print_record)?,
        ModelKind::Wgan => train_wgan_baseline(cfg, &data, Some(out), print_record)?,
    };
    println!("checkpoint written to {}", out.join(CHECKPOINT_DIR).display());
    Ok(())
}

fn make_data(out: &Path, count: usize, size: usize, seed: u64, sets_per_k: usize) -> Result<()> {
    let ds = Dataset::generate(count, size, seed)?;
    ds.save(out)?;
    let space = SemanticSpace::channel_mean();
    let suites = build_fixed_size_test_sets(
        &space,
        &ds.embed_all(&space)?,
        &ds.bins(),
        &ds.manifest.split.test,
        &(1..=5).collect::<Vec<_>>(),
        sets_per_k,
        seed,
    )?;
    write_suites(&out.join("suites"), &suites)?;
    println!("wrote {count} images and {} suites to {}", suites.len(), out.display());
    Ok(())
}

fn train_phi(common: &Common, out: &Path, n_train: usize, n_test: usize) -> Result<()> {
    let ds = Dataset::load(&common.data)?;
    let mut cfg: TripletTrainConfig = read_json(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let bins = ds.bins();
    let pick = |ids: &[usize]| ids.iter().map(|&i| bins[i]).collect::<Vec<_>>();
    let (train_ids, test_ids) = (&ds.manifest.split.train, &ds.manifest.split.test);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train = sample_color_triplets(train_ids, &pick(train_ids), n_train, &mut rng)?;
    let test = sample_color_triplets(test_ids, &pick(test_ids), n_test, &mut rng)?;
    let (space, report) = train_triplet_phi(&ds.images, &train, &test, &cfg)?;
    phi_checkpoint(&space, serde_json::to_value(&report)?)?.save(out)?;
    println!(
        "held-out triplet satisfaction {:.2}% on {} triplets; φ written to {}",
        100.0 * report.test_satisfaction,
        report.test_triplets,
        out.display()
    );
    Ok(())
}

struct EvalArgs<'a> {
    checkpoint: &'a Path,
    baseline: Option<&'a Path>,
    suites: Option<&'a Path>,
    out: &'a Path,
    trials: usize,
    sets_per_k: usize,
    max_k: usize,
}

fn evaluate(common: &Common, a: EvalArgs<'_>) -> Result<()> {
    let ds = Dataset::load(&common.data)?;
    let ckpt = Checkpoint::load(&checkpoint_dir(a.checkpoint))?;
    let model = TrainedModel::from_checkpoint(&ckpt)?;
    let seed = common.seed.unwrap_or(0);
    let embeddings = ds.embed_all(&model.space)?;
    let ks: Vec<usize> = (1..=a.max_k).collect();
    let suites: Vec<Suite> = match a.suites {
        Some(dir) => read_suites(dir, &ks)?,
        None => {
            let s = build_fixed_size_test_sets(
                &model.space,
                &embeddings,
                &ds.bins(),
                &ds.manifest.split.test,
                &ks,
                a.sets_per_k,
                seed,
            )?;
            write_suites(&a.out.join("suites"), &s)?;
            s
        }
    };
    let rows = mcse(&model, &model.space, &ds.images, &embeddings, &suites, a.trials, seed)?;
    let cross_scores = match a.baseline {
        None => None,
        Some(b) => {
            let bckpt = Checkpoint::load(&checkpoint_dir(b))?;
            let (pg, pp, dist) = load_plain_generator(&bckpt)?;
            let n = 200;
            let real: Vec<_> = ds.manifest.split.test.iter().take(n).map(|&i| ds.images[i].clone()).collect();
            let samples = vec![
                ("congan".to_string(), sample_conditional(&model, &ds.images, &suites[0], n, seed)?),
                ("wgan".to_string(), sample_plain(&pg, &pp, dist, n, seed)?),
                ("real".to_string(), real),
            ];
            let (dc, pc) = load_discriminator(&ckpt)?;
            let (dw, pw) = load_discriminator(&bckpt)?;
            Some(cross_discriminator_scores(
                &samples,
                &[("congan".into(), &dc, &pc), ("wgan".into(), &dw, &pw)],
            )?)
        }
    };
    let report = EvalReport {
        meta: EvalMeta {
            checkpoint: a.checkpoint.display().to_string(),
            iteration: ckpt.iteration,
            seed,
            trials: a.trials,
        },
        mcse: rows,
        cross_scores,
    };
    report.emit(a.out)?;
    print!("{}", report.to_table());
    Ok(())
}

fn generate(common: &Common, checkpoint: &Path, specs: &[String], samples: usize, out: &Path) -> Result<()> {
    let ds = Dataset::load(&common.data)?;
    let model = TrainedModel::load(&checkpoint_dir(checkpoint))?;
    let mut pairs = Vec::new();
    for s in specs {
        let Some((p, n)) = s.split_once(':') else { bail!("constraint {s:?} is not pos:neg") };
        let (p, n): (usize, usize) = (p.trim().parse()?, n.trim().parse()?);
        pairs.push(Constraint::new(ds.image(p)?, ds.image(n)?));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(common.seed.unwrap_or(0));
    fs::create_dir_all(out)?;
    for i in 0..samples {
        let x = model.generate(&pairs, &model.sample_z(&mut rng))?;
        let e = model.space.embed_value(&x)?;
        let ok = pairs
            .iter()
            .map(|c| model.space.satisfies_image(&x, c))
            .collect::<congan::Result<Vec<_>>>()?;
        let path = out.join(format!("sample_{i:03}.ppm"));
        fs::write(&path, encode_ppm(&x)?)?;
        println!("{} phi={e:.3?} satisfied={ok:?}", path.display());
    }
    Ok(())
}

async fn serve(common: &Common, checkpoint: &Path, port: u16, sessions: &Path) -> Result<()> {
    let models = load_models(checkpoint)?;
    let ds = Dataset::load(&common.data)?;
    let service = Service::new(models, Some(ds), Some(sessions.to_path_buf()))?;
    let restored = service.restore_sessions()?;
    let app = router(Arc::new(service));
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    tracing::info!(port, restored, "serving");
    axum::serve(listener, app).await?;
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    match Cli::parse().command {
        Command::MakeData {
            out,
            count,
            size,
            seed,
            sets_per_k,
        } => make_data(&out, count, size, seed, sets_per_k),
        Command::Train {
            common,
            out,
            checkpoint,
            iterations,
        } => run_training(&common, &out, checkpoint.as_deref(), iterations, ModelKind::Congan),
        Command::TrainWgan {
            common,
            out,
            checkpoint,
            iterations,
        } => run_training(&common, &out, checkpoint.as_deref(), iterations, ModelKind::Wgan),
        Command::TrainPhi {
            common,
            out,
            train_triplets,
            test_triplets,
        } => train_phi(&common, &out, train_triplets, test_triplets),
        Command::Eval {
            common,
            checkpoint,
            baseline,
            suites,
            out,
            trials,
            sets_per_k,
            max_k,
        } => evaluate(
            &common,
            EvalArgs {
                checkpoint: &checkpoint,
                baseline: baseline.as_deref(),
                suites: suites.as_deref(),
                out: &out,
                trials,
                sets_per_k,
                max_k,
            },
        ),
        Command::Generate {
            common,
            checkpoint,
            constraints,
            samples,
            out,
        } => generate(&common, &checkpoint, &constraints, samples, &out),
        Command::Serve {
            common,
            checkpoint,
            port,
            sessions,
        } => tokio::runtime::Runtime::new()?.block_on(serve(&common, &checkpoint, port, &sessions)),
    }
}
