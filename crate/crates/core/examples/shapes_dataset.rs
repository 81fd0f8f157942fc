//! Renders the shapes dataset, writes it to disk, and samples ground-truth
//! constraint sets and fixed-size evaluation suites from it.
//!
//! `cargo run --release --example shapes_dataset -- [out_dir]`

use congan::data::{build_fixed_size_test_sets, write_suites, ConstraintSampler, Dataset, SampleMode};
use congan::SemanticSpace;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> congan::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/shapes-example".into());
    let ds = Dataset::generate(1000, 16, 0)?;
    ds.save(out.as_ref())?;
    let back = Dataset::load(out.as_ref())?;
    assert_eq!(back.images, ds.images);
    println!(
        "{} images ({} train / {} test) written to {out}",
        ds.len(),
        ds.manifest.split.train.len(),
        ds.manifest.split.test.len()
    );

    let mut per_bin = [0usize; 8];
    for b in ds.bins() {
        per_bin[b] += 1;
    }
    println!("images per color bin: {per_bin:?}");

    let space = SemanticSpace::channel_mean();
    let emb = ds.embed_all(&space)?;
    let bins = ds.bins();
    let sampler = ConstraintSampler::new(&space, &emb, &bins, &ds.manifest.split.train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for mode in [SampleMode::Uniform, SampleMode::BinFocused] {
        let s = sampler.sample(1..=4, mode, &mut rng)?;
        println!("{mode:?}: reference {} focused {:?}", s.reference, s.focused_bin);
        for c in &s.constraints {
            let ok = space.satisfies(&emb[s.reference], &emb[c.positive], &emb[c.negative])?;
            println!("  more like {} than {} (reference agrees: {ok})", c.positive, c.negative);
        }
    }

    let suites = build_fixed_size_test_sets(&space, &emb, &bins, &ds.manifest.split.test, &[1, 2, 3], 20, 7)?;
    write_suites(&std::path::Path::new(&out).join("suites"), &suites)?;
    println!("wrote {} suites of 20 sets each", suites.len());
    Ok(())
}
