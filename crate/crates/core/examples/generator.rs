//! The read/process/write generator: one image per constraint set and
//! noise vector, with attention weights and order invariance on display.

use congan::data::Dataset;
use congan::generator::{GenConfig, Generator};
use congan::training::{sample_z, ZDist};
use congan::{Constraint, SemanticSpace, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> congan::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (gen, params) = Generator::build::<f32, _>(GenConfig::default(), &mut rng)?;
    println!("generator has {} parameters", params.num_scalars());

    let ds = Dataset::generate(50, 16, 2)?;
    let set = [(3, 8), (11, 20), (4, 9)];
    let mut cs: Vec<Constraint<_>> = set.iter().map(|&(p, n)| Constraint::new(&ds.images[p], &ds.images[n])).collect();
    let z = sample_z(ZDist::Uniform, gen.config.n_z, &mut rng);
    let x = gen.generate(&params, &cs, &z)?;
    cs.reverse();
    let y = gen.generate(&params, &cs, &z)?;
    println!("output shape {:?}; identical after reordering: {}", x.shape(), x == y);

    let space = SemanticSpace::channel_mean();
    println!("φ(x̂) = {:.3?}", space.embed_value(&x)?);

    let tape = Tape::new();
    let p = params.bind(&tape, false);
    let enc = cs
        .iter()
        .map(|c| gen.read_constraint(&p, Constraint::new(tape.constant(c.positive.clone()), tape.constant(c.negative.clone()))))
        .collect::<congan::Result<Vec<_>>>()?;
    let out = gen.process(&p, &enc, tape.constant(z))?;
    for (t, a) in out.attention.iter().enumerate() {
        println!("step {t}: attention {:.3?} over canonical order {:?}", a.value().data(), out.order);
    }
    Ok(())
}
