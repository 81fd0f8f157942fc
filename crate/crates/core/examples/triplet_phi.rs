//! Learns φ with a triplet network on color triplets, saves it, and builds
//! a semantic space from the saved weights.
//!
//! `cargo run --release --example triplet_phi -- [iterations]`

use congan::checkpoint::Checkpoint;
use congan::data::Dataset;
use congan::semantic::{sample_color_triplets, train_triplet_phi, triplet_satisfaction, TripletTrainConfig};
use congan::training::{learned_space_from_checkpoint, phi_checkpoint};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> congan::Result<()> {
    let iterations = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(300);
    let ds = Dataset::generate(2000, 16, 0)?;
    let bins = ds.bins();
    let of = |ids: &[usize]| ids.iter().map(|&i| bins[i]).collect::<Vec<_>>();
    let (tr, te) = (&ds.manifest.split.train, &ds.manifest.split.test);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let train = sample_color_triplets(tr, &of(tr), 10000, &mut rng)?;
    let test = sample_color_triplets(te, &of(te), 1000, &mut rng)?;
    let cfg = TripletTrainConfig {
        iterations,
        ..TripletTrainConfig::default()
    };
    let (space, report) = train_triplet_phi(&ds.images, &train, &test, &cfg)?;
    println!(
        "after {iterations} iterations: train {:.1}%, held-out {:.1}% of {} triplets",
        100.0 * report.train_satisfaction,
        100.0 * report.test_satisfaction,
        report.test_triplets
    );

    let dir = std::path::Path::new("target/phi-example");
    phi_checkpoint(&space, serde_json::to_value(&report)?)?.save(dir)?;
    let reloaded = learned_space_from_checkpoint(&Checkpoint::load(dir)?, "phi")?;
    println!("reloaded space {} scores {:.1}%", reloaded.id(), 100.0 * triplet_satisfaction(&reloaded, &ds.images, &test)?);
    Ok(())
}
