//! Trains the unconditional baseline briefly, then starts a constrained
//! run whose write network and critic are copied from it.

use congan::data::Dataset;
use congan::eval::{cross_discriminator_scores, sample_plain};
use congan::training::{load_discriminator, train, train_wgan_baseline, TrainConfig, TrainData, CHECKPOINT_DIR};
use congan::checkpoint::Checkpoint;
use congan::SemanticSpace;

fn main() -> congan::Result<()> {
    let root = std::path::PathBuf::from("target/warm-start-example");
    let _ = std::fs::remove_dir_all(&root);
    let ds = Dataset::generate(600, 16, 0)?;
    let data = TrainData::from_dataset(&ds, SemanticSpace::channel_mean())?;

    let base_cfg = TrainConfig {
        iterations: 20,
        ..TrainConfig::wgan()
    };
    let (base, _) = train_wgan_baseline(base_cfg, &data, Some(&root.join("wgan")), |_| {})?;
    let base_ckpt = root.join("wgan").join(CHECKPOINT_DIR);

    let cfg = TrainConfig {
        iterations: 10,
        warm_start: Some(base_ckpt.clone()),
        ..TrainConfig::default()
    };
    let (run, records) = train(cfg, &data, Some(&root.join("congan")), |_| {})?;
    let last = records.last().expect("ran");
    println!("constrained run after warm start: iteration {} W≈{:.3}", run.iteration(), last.w_estimate);

    let samples = sample_plain(
        base.plain_generator().expect("baseline"),
        &base.gen_params,
        base.cfg.z_dist,
        32,
        0,
    )?;
    let real: Vec<_> = ds.images.iter().take(32).cloned().collect();
    let (d_base, p_base) = load_discriminator(&Checkpoint::load(&base_ckpt)?)?;
    let scores = cross_discriminator_scores(
        &[("wgan".into(), samples), ("real".into(), real)],
        &[("wgan".into(), &d_base, &p_base), ("congan".into(), &run.disc, &run.disc_params)],
    )?;
    for (g, row) in scores.generators.iter().zip(&scores.scores) {
        println!("{g:>5} samples: mean critic scores {row:.3?} under {:?}", scores.discriminators);
    }
    Ok(())
}
