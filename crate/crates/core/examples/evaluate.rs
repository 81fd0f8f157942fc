//! MCSE tables: an echo stub, an untrained generator, and optionally a
//! trained checkpoint given on the command line.
//!
//! `cargo run --release --example evaluate -- [checkpoint_dir]`

use congan::data::{build_fixed_size_test_sets, Dataset};
use congan::eval::{mcse, EchoPositive, EvalMeta, EvalReport};
use congan::training::{TrainConfig, TrainedModel};
use congan::SemanticSpace;

fn main() -> congan::Result<()> {
    let ds = Dataset::generate(5000, 16, 0)?;
    let space = SemanticSpace::channel_mean();
    let emb = ds.embed_all(&space)?;
    let suites = build_fixed_size_test_sets(&space, &emb, &ds.bins(), &ds.manifest.split.test, &[1, 2, 3, 4, 5], 40, 1)?;
    let table = |name: &str, rows| {
        let r = EvalReport {
            meta: EvalMeta {
                checkpoint: name.into(),
                iteration: 0,
                seed: 0,
                trials: 3,
            },
            mcse: rows,
            cross_scores: None,
        };
        println!("{name}\n{}", r.to_table());
    };
    table("echo positive", mcse(&EchoPositive, &space, &ds.images, &emb, &suites, 3, 0)?);
    let untrained = TrainedModel::untrained(TrainConfig::default(), space.clone())?;
    table("untrained", mcse(&untrained, &space, &ds.images, &emb, &suites, 3, 0)?);
    if let Some(dir) = std::env::args().nth(1) {
        let model = TrainedModel::load(dir.as_ref())?;
        table(&dir, mcse(&model, &model.space, &ds.images, &ds.embed_all(&model.space)?, &suites, 3, 0)?);
    }
    Ok(())
}
