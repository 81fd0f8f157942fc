//! Semantic spaces: φ embeddings, the satisfaction predicate and the
//! t-kernel constraint critic.

use congan::data::{Dataset, ShapeKind};
use congan::semantic::PhiSpec;
use congan::training::space_from_spec;
use congan::{Constraint, MetricKind, SemanticSpace, Tape};

fn main() -> congan::Result<()> {
    let ds = Dataset::generate(12, 16, 4)?;
    let space = SemanticSpace::channel_mean();
    let e: Vec<Vec<f64>> = ds.embed_all(&space)?;
    for (m, v) in ds.meta.iter().zip(&e).take(4) {
        let kind = match m.shape_kind {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
        };
        println!("image {} {kind:<6} color {:?} -> φ {:.3?}", m.id, m.color, v);
    }

    let (x, pos, neg) = (&e[0], &e[1], &e[2]);
    println!("d(x, x+) = {:.4}", space.distance_value(x, pos)?);
    println!("p_S(x, x+, x-) = {:.4}", space.p_s_value(x, pos, neg)?);
    println!("x satisfies (x+, x-): {}", space.satisfies(x, pos, neg)?);

    let tape = Tape::<f32>::new();
    let xv = tape.param(ds.images[0].clone());
    let targets = vec![Constraint::new(pos.clone(), neg.clone()), Constraint::new(e[3].clone(), e[4].clone())];
    let loss = space.constraint_critic_loss(xv, &targets)?;
    let g = tape.grad(loss, &[xv], false)?[0];
    let gnorm: f32 = g.value().data().iter().map(|v| v * v).sum::<f32>().sqrt();
    println!("constraint critic loss {:.4}, |∇x| {gnorm:.2e}", loss.item());

    let patches = space_from_spec(&PhiSpec::PatchMean { grid: 2 }, MetricKind::Euclidean, 1.0, None)?;
    println!("patch-mean space {} embeds to {} dims", patches.id(), patches.embed_value(&ds.images[0])?.len());
    Ok(())
}
