//! An in-process interactive session: constraints arrive one at a time,
//! outputs regenerate for three fixed noise vectors, and the persisted log
//! replays to the same state.
//!
//! `cargo run --release -p congan-service --example interactive_session -- [checkpoint]`
//! Without a checkpoint an untrained generator stands in.

use congan::data::Dataset;
use congan::training::{TrainConfig, TrainedModel};
use congan::SemanticSpace;
use congan_service::wire::{CreateSessionRequest, ImageRef, SessionState};
use congan_service::{load_models, ModelEntry, Service};

fn show(label: &str, s: &SessionState) {
    println!("{label}: {} constraints", s.history.len());
    for o in &s.outputs {
        println!("  seed {}: φ {:.3?} satisfied {:?}", o.seed, o.phi, o.satisfied);
    }
}

fn main() -> anyhow::Result<()> {
    let models = match std::env::args().nth(1) {
        Some(p) => load_models(p.as_ref())?,
        None => vec![ModelEntry::from_trained(
            "untrained",
            TrainedModel::untrained(TrainConfig::default(), SemanticSpace::channel_mean())?,
        )],
    };
    let ckpt = models[0].id.clone();
    let logs = std::path::PathBuf::from("target/session-example");
    let _ = std::fs::remove_dir_all(&logs);
    let ds = Dataset::generate(500, 16, 0)?;
    let service = Service::new(models, Some(ds.clone()), Some(logs.clone()))?;

    let id = service
        .create_session(CreateSessionRequest {
            checkpoint_id: ckpt.clone(),
            n_seeds: 3,
            rng_seed: Some(1),
        })?
        .id;
    show("first", &service.add_constraint(&id, ImageRef::Dataset(10), ImageRef::Dataset(20))?);
    show("second", &service.add_constraint(&id, ImageRef::Dataset(30), ImageRef::Dataset(40))?);
    show(
        "more like 7 than the last output of seed 0",
        &service.add_constraint(&id, ImageRef::Dataset(7), ImageRef::PreviousOutput(0))?,
    );
    let after_undo = service.undo(&id)?;
    show("undo", &after_undo);

    let models = match std::env::args().nth(1) {
        Some(p) => load_models(p.as_ref())?,
        None => vec![ModelEntry::from_trained(
            "untrained",
            TrainedModel::untrained(TrainConfig::default(), SemanticSpace::channel_mean())?,
        )],
    };
    let restored = Service::new(models, Some(ds), Some(logs.clone()))?;
    restored.restore_sessions()?;
    println!(
        "replayed from {}: identical state {}",
        restored.log_path(&id).expect("log dir").display(),
        restored.get_state(&id)? == after_undo
    );
    Ok(())
}
