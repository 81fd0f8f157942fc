//! A short constrained-generator training run with checkpointing, resume
//! and a metrics log.
//!
//! `cargo run --release --example train_congan -- [iterations] [out_dir]`

use congan::checkpoint::Checkpoint;
use congan::data::Dataset;
use congan::training::{read_metrics, train, TrainConfig, TrainData, Trainer, CHECKPOINT_DIR, METRICS_FILE};
use congan::SemanticSpace;

fn main() -> congan::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(40);
    let out = std::path::PathBuf::from(args.next().unwrap_or_else(|| "target/train-example".into()));
    let _ = std::fs::remove_dir_all(&out);

    let ds = Dataset::generate(1000, 16, 0)?;
    let data = TrainData::from_dataset(&ds, SemanticSpace::channel_mean())?;
    let cfg = TrainConfig {
        iterations: iterations / 2,
        checkpoint_every: 10,
        ..TrainConfig::default()
    };
    train(cfg, &data, Some(&out), |r| {
        println!(
            "iter {:>4}  W≈{:>7.3}  d_loss {:>7.3}  g_loss {:>7.3}  constraint {:>7.4}  sampled MCSE {:.3}",
            r.iteration,
            r.w_estimate,
            r.d_loss,
            r.g_loss,
            r.constraint_loss.unwrap_or(f64::NAN),
            r.mcse_sample.unwrap_or(f64::NAN)
        )
    })?;

    let ckpt = Checkpoint::load(&out.join(CHECKPOINT_DIR))?;
    let mut t = Trainer::resume(&ckpt, &data)?;
    t.cfg.iterations = iterations;
    println!("resuming at iteration {}", t.iteration());
    t.run(Some(&out), |_| {})?;
    let metrics = read_metrics(&out.join(METRICS_FILE))?;
    println!("{} metric records; checkpoint in {}", metrics.len(), out.join(CHECKPOINT_DIR).display());
    Ok(())
}
