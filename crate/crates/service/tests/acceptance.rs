//! Acceptance criteria, run sequentially with one PASS/FAIL line each.
//!
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 2 6`.

use std::path::Path;
use std::time::{Duration, Instant};

use congan::autodiff::{grad_check, Tape, Var};
use congan::checkpoint::{Checkpoint, MANIFEST_FILE, WEIGHTS_FILE};
use congan::data::{build_fixed_size_test_sets, Dataset, SampleMode, ConstraintSampler, Suite};
use congan::discriminator::{DiscConfig, Discriminator};
use congan::eval::{mcse, EvalMeta, EvalReport, McseRow};
use congan::generator::{GenConfig, Generator};
use congan::nn::{param_grads, AdamConfig, AdamState, Bound, ParamSet};
use congan::semantic::{sample_color_triplets, train_triplet_phi, TripletTrainConfig};
use congan::training::{
    gradient_penalty, generator_loss, generator_step, train, GenSample, ModelKind, TrainConfig, TrainData,
    TrainedModel, Trainer, CHECKPOINT_DIR, METRICS_FILE,
};
use congan::{Constraint, SemanticSpace, Tensor};
use congan_service::wire::{CreateSessionRequest, ImageRef};
use congan_service::{ModelEntry, Service};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Res<T> = Result<T, Box<dyn std::error::Error>>;

const GRAD_TOL: f64 = 1e-4;
const ORDER_TOL: f32 = 1e-5;
const MCSE_TARGET: f64 = 0.25;
const TRIPLET_TARGET: f64 = 0.90;
const SHORT_BUDGET: Duration = Duration::from_secs(120);
const TRIPLET_BUDGET: Duration = Duration::from_secs(600);
const TRAIN_BUDGET: Duration = Duration::from_secs(3600);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Res<Outcome> {
    Ok(Outcome {
        pass,
        detail: detail.into(),
    })
}

/// The shapes dataset shared by the training, sampler and oracle criteria.
fn shapes() -> Res<Dataset> {
    Ok(Dataset::generate(5000, 16, 0)?)
}

fn rand_image(side: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let data = (0..3 * side * side).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(&[3, side, side], data).expect("image shape")
}

/// Worst relative error between analytic and central-difference gradients
/// over every scalar of every parameter tensor.
fn param_grad_check(
    params: &ParamSet<f64>,
    f: impl for<'t> Fn(&'t Tape<f64>, &Bound<'t, f64>) -> congan::Result<Var<'t, f64>>,
    h: f64,
) -> Res<f64> {
    let tape = Tape::new();
    let bound = params.bind(&tape, true);
    let y = f(&tape, &bound)?;
    let analytic = param_grads(&tape, y, &bound)?;
    let eval = |p: &ParamSet<f64>| -> Res<f64> {
        let tape = Tape::new();
        let b = p.bind(&tape, false);
        Ok(f(&tape, &b)?.item())
    };
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for (ti, g) in analytic.iter().enumerate() {
        for i in 0..g.numel() {
            let orig = probe.tensors()[ti].data()[i];
            probe.tensors_mut()[ti].data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe.tensors_mut()[ti].data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe.tensors_mut()[ti].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = g.data()[i];
            worst = worst.max((a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs()));
        }
    }
    Ok(worst)
}

fn c1_gradients() -> Res<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = GenConfig::tiny();
    let side = cfg.image_size;
    let (gen, pg) = Generator::build::<f64, _>(cfg, &mut rng)?;
    let (disc, pd) = Discriminator::build::<f64, _>(DiscConfig::tiny(), &mut rng)?;
    let space = SemanticSpace::channel_mean();
    let (xp, xn, x) = (rand_image(side, &mut rng), rand_image(side, &mut rng), rand_image(side, &mut rng));

    let a = grad_check(
        |t, x| {
            let e = space.embed(x)?;
            let ep = space.embed(t.constant(xp.clone()))?;
            let en = space.embed(t.constant(xn.clone()))?;
            space.p_s(e, ep, en)
        },
        &x,
        1e-6,
    )?;

    let constraints: Vec<Constraint<Tensor<f64>>> = (0..3)
        .map(|_| Constraint::new(rand_image(side, &mut rng), rand_image(side, &mut rng)))
        .collect();
    let targets = constraints
        .iter()
        .map(|c| Ok(Constraint::new(space.embed_value(&c.positive)?, space.embed_value(&c.negative)?)))
        .collect::<congan::Result<Vec<_>>>()?;
    let b = grad_check(|_, x| space.constraint_critic_loss(x, &targets), &x, 1e-6)?;

    let (real, fake) = (rand_image(side, &mut rng), rand_image(side, &mut rng));
    let c = param_grad_check(
        &pd,
        |tape, p| gradient_penalty(tape, |v| disc.forward(p, v), &real, &fake, 0.37, 10.0),
        1e-6,
    )?;

    let sample = GenSample {
        constraints: constraints[..2].to_vec(),
        targets: targets[..2].to_vec(),
        z: Tensor::new(&[GenConfig::tiny().n_z], (0..GenConfig::tiny().n_z).map(|_| rng.random_range(-1.0..1.0)).collect())?,
    };
    let d = param_grad_check(
        &pg,
        |tape, p| {
            let b = pd.bind(tape, false);
            Ok(generator_loss(&gen, p, &disc, &b, &space, 10.0, &sample)?.total)
        },
        1e-5,
    )?;
    let worst = a.max(b).max(c).max(d);
    outcome(
        worst <= GRAD_TOL,
        format!("max rel err p_S∘φ {a:.1e}, constraint loss {b:.1e}, penalty/W {c:.1e}, generator loss/Θ {d:.1e} (tol {GRAD_TOL:.0e})"),
    )
}

fn c2_order_invariance() -> Res<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let ds = Dataset::generate(400, 16, 5)?;
    let (gen, p) = Generator::build::<f32, _>(GenConfig::default(), &mut rng)?;
    let n_z = gen.config.n_z;
    let mut worst = 0f32;
    let mut evaluated = 0usize;
    for k in 1..=10 {
        for _ in 0..100 {
            let mut set: Vec<Constraint<&Tensor<f32>>> = (0..k)
                .map(|_| {
                    let (a, b) = (rng.random_range(0..ds.len()), rng.random_range(0..ds.len()));
                    Constraint::new(&ds.images[a], &ds.images[b])
                })
                .collect();
            let z = Tensor::new(&[n_z], (0..n_z).map(|_| rng.random_range(-1.0f32..1.0)).collect())?;
            let base = gen.generate(&p, &set, &z)?;
            for _ in 0..20 {
                set.shuffle(&mut rng);
                let out = gen.generate(&p, &set, &z)?;
                let dev = base.data().iter().zip(out.data()).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
                worst = worst.max(dev);
                evaluated += 1;
            }
        }
    }
    outcome(
        worst <= ORDER_TOL,
        format!("{evaluated} permuted sets over sizes 1..=10, max pixel deviation {worst:e} (tol {ORDER_TOL:e})"),
    )
}

fn c3_wgan_reduction() -> Res<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let cfg = GenConfig::tiny();
    let side = cfg.image_size;
    let (gen, pg) = Generator::build::<f64, _>(cfg.clone(), &mut rng)?;
    let (disc, pd) = Discriminator::build::<f64, _>(DiscConfig::tiny(), &mut rng)?;
    let space = SemanticSpace::channel_mean();
    let batch: Vec<GenSample<f64>> = (1..=4)
        .map(|k| {
            let constraints: Vec<_> = (0..k)
                .map(|_| Constraint::new(rand_image(side, &mut rng), rand_image(side, &mut rng)))
                .collect();
            let targets = constraints
                .iter()
                .map(|c| Ok(Constraint::new(space.embed_value(&c.positive)?, space.embed_value(&c.negative)?)))
                .collect::<congan::Result<Vec<_>>>()?;
            let z = Tensor::new(&[cfg.n_z], (0..cfg.n_z).map(|_| rng.random_range(-1.0..1.0)).collect())?;
            Ok(GenSample { constraints, targets, z })
        })
        .collect::<congan::Result<_>>()?;

    let mut expected = 0.0;
    for s in &batch {
        let cs: Vec<_> = s.constraints.iter().map(|c| Constraint::new(&c.positive, &c.negative)).collect();
        expected += -disc.score(&pd, &gen.generate(&pg, &cs, &s.z)?)?;
    }
    expected /= batch.len() as f64;
    let adam = AdamConfig::default();
    let mut p0 = pg.clone();
    let stats = generator_step(&gen, &mut p0, &mut AdamState::new(&pg), &adam, &disc, &pd, &space, 0.0, &batch)?;
    let loss_exact = stats.loss.to_bits() == expected.to_bits();

    let mut zero_contribution = true;
    for s in &batch {
        let tape = Tape::new();
        let p = pg.bind(&tape, true);
        let b = pd.bind(&tape, false);
        let l = generator_loss(&gen, &p, &disc, &b, &space, 0.0, s)?;
        let weighted = l.constraint.scale(0.0)?;
        let g_total = param_grads(&tape, l.total, &p)?;
        let g_adv = param_grads(&tape, l.adversarial, &p)?;
        let g_con = param_grads(&tape, weighted, &p)?;
        zero_contribution &= g_total == g_adv && g_con.iter().all(|g| g.data().iter().all(|v| *v == 0.0));
    }

    let ds = Dataset::generate(200, 8, 2)?;
    let run = |gamma: f64| -> Res<(ParamSet<f32>, AdamState<f32>, f64, f64)> {
        let cfg = TrainConfig {
            generator: GenConfig::tiny(),
            discriminator: DiscConfig::tiny(),
            gamma,
            m: 4,
            seed: 3,
            ..TrainConfig::default()
        };
        let data = TrainData::from_dataset(&ds, SemanticSpace::channel_mean())?;
        let mut t = Trainer::new(cfg, &data, ModelKind::Congan)?;
        let r = t.step()?;
        Ok((t.disc_params.clone(), t.disc_optimizer().clone(), r.d_loss, r.w_estimate))
    };
    let (a, b) = (run(0.0)?, run(10.0)?);
    let disc_equal = a.0 == b.0
        && a.1 == b.1
        && a.2.to_bits() == b.2.to_bits()
        && a.3.to_bits() == b.3.to_bits()
        && a.0.tensors().iter().flat_map(|t| t.data()).zip(b.0.tensors().iter().flat_map(|t| t.data())).all(|(x, y)| x.to_bits() == y.to_bits());

    outcome(
        loss_exact && zero_contribution && disc_equal,
        format!(
            "γ=0 loss {} mean(−d(x̂)) bitwise: {loss_exact}; constraint gradient identically zero: {zero_contribution}; critic update bitwise equal for γ∈{{0,10}}: {disc_equal}",
            stats.loss
        ),
    )
}

fn held_out_suites(ds: &Dataset, space: &SemanticSpace, embeddings: &[Vec<f64>]) -> Res<Vec<Suite>> {
    Ok(build_fixed_size_test_sets(
        space,
        embeddings,
        &ds.bins(),
        &ds.manifest.split.test,
        &[1, 2, 3, 4, 5],
        200,
        1,
    )?)
}

fn c4_training(scratch: &Path) -> Res<Outcome> {
    let started = Instant::now();
    let ds = shapes()?;
    let space = SemanticSpace::channel_mean();
    let data = TrainData::from_dataset(&ds, space.clone())?;
    let cfg = TrainConfig::default();
    let desc = format!(
        "λ={} n_disc={} m={} γ={} p={} iterations={}",
        cfg.lambda_gp, cfg.n_disc, cfg.m, cfg.gamma, cfg.generator.p, cfg.iterations
    );
    let out = scratch.join("c4");
    let (trainer, records) = train(cfg, &data, Some(&out), |_| {})?;
    let trend = w_trend(&records);
    let train_time = started.elapsed();
    let model = TrainedModel::from_trainer(&trainer)?;
    let suites = held_out_suites(&ds, &space, &data.embeddings)?;
    let rows = mcse(&model, &space, &ds.images, &data.embeddings, &suites, 10, 7)?;
    let report = EvalReport {
        meta: EvalMeta {
            checkpoint: out.join(CHECKPOINT_DIR).display().to_string(),
            iteration: model.iteration,
            seed: 7,
            trials: 10,
        },
        mcse: rows,
        cross_scores: None,
    };
    report.emit(&out.join("eval"))?;
    let emitted = std::fs::read_to_string(out.join("eval").join("mcse.txt"))?;
    print!("{emitted}");
    let mean = report.mean_mcse();
    let elapsed = started.elapsed();
    outcome(
        mean <= MCSE_TARGET && elapsed <= TRAIN_BUDGET,
        format!(
            "{desc}: held-out MCSE over k=1..5 = {mean:.4} (target ≤ {MCSE_TARGET}), training {:.0}s, total {:.0}s (budget {}s), W by quarter {trend}",
            train_time.as_secs_f64(),
            elapsed.as_secs_f64(),
            TRAIN_BUDGET.as_secs()
        ),
    )
}

/// Mean Wasserstein estimate over each quarter of the run.
fn w_trend(records: &[congan::training::MetricRecord]) -> String {
    let q = (records.len() / 4).max(1);
    let means: Vec<String> = records
        .chunks(q)
        .map(|c| format!("{:.2}", c.iter().map(|r| r.w_estimate).sum::<f64>() / c.len() as f64))
        .collect();
    means.join(" → ")
}

fn c5_triplet_phi() -> Res<Outcome> {
    let started = Instant::now();
    let ds = shapes()?;
    let bins = ds.bins();
    let of = |ids: &[usize]| ids.iter().map(|&i| bins[i]).collect::<Vec<_>>();
    let (tr, te) = (&ds.manifest.split.train, &ds.manifest.split.test);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let train_t = sample_color_triplets(tr, &of(tr), 20000, &mut rng)?;
    let test_t = sample_color_triplets(te, &of(te), 2000, &mut rng)?;
    let (_, report) = train_triplet_phi(&ds.images, &train_t, &test_t, &TripletTrainConfig::default())?;
    let elapsed = started.elapsed();
    outcome(
        report.test_satisfaction >= TRIPLET_TARGET && elapsed <= TRIPLET_BUDGET,
        format!(
            "held-out triplet satisfaction {:.2}% on {} triplets (target ≥ {:.0}%), {:.0}s (budget {}s)",
            100.0 * report.test_satisfaction,
            report.test_triplets,
            100.0 * TRIPLET_TARGET,
            elapsed.as_secs_f64(),
            TRIPLET_BUDGET.as_secs()
        ),
    )
}

fn c6_sampler() -> Res<Outcome> {
    let ds = shapes()?;
    let space = SemanticSpace::channel_mean();
    let emb = ds.embed_all(&space)?;
    let bins = ds.bins();
    let sampler = ConstraintSampler::new(&space, &emb, &bins, &ds.manifest.split.train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let (mut constraints, mut satisfied, mut focused, mut focused_ok) = (0usize, 0usize, 0usize, 0usize);
    for _ in 0..10_000 {
        let s = sampler.sample(1..=10, SampleMode::BinFocused, &mut rng)?;
        let r = &emb[s.reference];
        for c in &s.constraints {
            constraints += 1;
            if space.satisfies(r, &emb[c.positive], &emb[c.negative])? {
                satisfied += 1;
            }
        }
        if let Some(b) = s.focused_bin {
            focused += 1;
            let ok = bins[s.reference] == b
                && s.constraints.iter().all(|c| {
                    bins[c.positive] == b && bins[c.negative] != b && c.positive != s.reference && c.negative != s.reference
                });
            focused_ok += usize::from(ok);
        }
    }
    outcome(
        satisfied == constraints && focused_ok == focused && focused > 0,
        format!(
            "10000 sets: reference satisfies {satisfied}/{constraints} constraints; focused invariants hold on {focused_ok}/{focused} focused sets"
        ),
    )
}

fn same_files(a: &Path, b: &Path, names: &[&str]) -> Res<bool> {
    for n in names {
        if std::fs::read(a.join(n))? != std::fs::read(b.join(n))? {
            return Ok(false);
        }
    }
    Ok(true)
}

fn c7_determinism(scratch: &Path) -> Res<Outcome> {
    let ds = Dataset::generate(300, 16, 9)?;
    let data = TrainData::from_dataset(&ds, SemanticSpace::channel_mean())?;
    let cfg = TrainConfig {
        iterations: 6,
        checkpoint_every: 3,
        seed: 21,
        ..TrainConfig::default()
    };
    let (r1, r2, r3) = (scratch.join("c7a"), scratch.join("c7b"), scratch.join("c7c"));
    train(cfg.clone(), &data, Some(&r1), |_| {})?;
    train(cfg.clone(), &data, Some(&r2), |_| {})?;
    let ck = |r: &Path| r.join(CHECKPOINT_DIR);
    let identical_runs = same_files(&ck(&r1), &ck(&r2), &[MANIFEST_FILE, WEIGHTS_FILE])?
        && same_files(&r1, &r2, &[METRICS_FILE])?;

    let loaded = Checkpoint::load(&ck(&r1))?;
    let resaved = scratch.join("c7-resaved");
    loaded.save(&resaved)?;
    let round_trip = same_files(&ck(&r1), &resaved, &[MANIFEST_FILE, WEIGHTS_FILE])?;

    let half = TrainConfig { iterations: 3, ..cfg };
    train(half, &data, Some(&r3), |_| {})?;
    let mut resumed = Trainer::resume(&Checkpoint::load(&ck(&r3))?, &data)?;
    resumed.cfg.iterations = 6;
    resumed.run(Some(&r3), |_| {})?;
    let resume_exact = same_files(&ck(&r1), &ck(&r3), &[MANIFEST_FILE, WEIGHTS_FILE])? && same_files(&r1, &r3, &[METRICS_FILE])?;

    let logs = scratch.join("c7-sessions");
    let entry = || -> Res<ModelEntry> { Ok(ModelEntry::from_trained("run", TrainedModel::load(&ck(&r1))?)) };
    let live = Service::new(vec![entry()?], Some(ds.clone()), Some(logs.clone()))?;
    let id = live
        .create_session(CreateSessionRequest {
            checkpoint_id: "run".into(),
            n_seeds: 3,
            rng_seed: Some(5),
        })?
        .id;
    let mut history = vec![live.add_constraint(&id, ImageRef::Dataset(3), ImageRef::Dataset(17))?];
    history.push(live.add_constraint(&id, ImageRef::Dataset(40), ImageRef::PreviousOutput(1))?);
    history.push(live.undo(&id)?);
    history.push(live.add_constraint(&id, ImageRef::PreviousOutput(2), ImageRef::Dataset(8))?);
    let log_text = std::fs::read_to_string(live.log_path(&id).expect("log dir set"))?;
    let restored = Service::new(vec![entry()?], Some(ds), Some(logs))?;
    restored.restore_sessions()?;
    let replay_exact = restored.get_state(&id)? == *history.last().expect("non-empty")
        && restored.session_log(&id)?.to_jsonl() == log_text
        && history[2] == history[0];

    outcome(
        identical_runs && round_trip && resume_exact && replay_exact,
        format!(
            "identical seeds give identical checkpoint and metrics bytes: {identical_runs}; save/load/save byte-identical: {round_trip}; resume matches uninterrupted run: {resume_exact}; session replay bit-for-bit: {replay_exact}"
        ),
    )
}

fn c8_chance(scratch: &Path) -> Res<Outcome> {
    let ds = shapes()?;
    let space = SemanticSpace::channel_mean();
    let emb = ds.embed_all(&space)?;
    let suites = held_out_suites(&ds, &space, &emb)?;
    let model = TrainedModel::untrained(TrainConfig::default(), space.clone())?;
    let rows = mcse(&model, &space, &ds.images, &emb, &suites, 10, 8)?;
    let within = |r: &McseRow| (r.mcse_mean - 0.5).abs() <= r.binomial_halfwidth(0.5, 3.0);
    let cells: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "k={} {:.4}±{:.4}{}",
                r.k,
                r.mcse_mean,
                r.binomial_halfwidth(0.5, 3.0),
                if within(r) { "" } else { "✗" }
            )
        })
        .collect();
    std::fs::write(scratch.join("c8.json"), serde_json::to_vec_pretty(&rows)?)?;
    outcome(
        rows.iter().all(within),
        format!("untrained generator MCSE vs 0.5 with 3σ binomial bounds: {}", cells.join(", ")),
    )
}

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let scratch = tempfile::tempdir().expect("scratch dir");
    let dir = scratch.path();
    let criteria: Vec<(u32, &str, Box<dyn Fn() -> Res<Outcome>>)> = vec![
        (1, "gradient correctness", Box::new(c1_gradients)),
        (2, "order invariance", Box::new(c2_order_invariance)),
        (3, "WGAN-GP reduction", Box::new(c3_wgan_reduction)),
        (4, "desk-scale training", Box::new(|| c4_training(dir))),
        (5, "triplet φ", Box::new(c5_triplet_phi)),
        (6, "sampler soundness", Box::new(c6_sampler)),
        (7, "determinism and persistence", Box::new(|| c7_determinism(dir))),
        (8, "chance-level oracle", Box::new(|| c8_chance(dir))),
    ];
    let budgets = |n: u32| match n {
        1 | 2 => Some(SHORT_BUDGET),
        _ => None,
    };
    let mut failed = Vec::new();
    for (n, name, run) in &criteria {
        if !selected.is_empty() && !selected.contains(n) {
            continue;
        }
        let started = Instant::now();
        let result = run();
        let elapsed = started.elapsed();
        let over = budgets(*n).filter(|b| elapsed > *b);
        let (pass, detail) = match result {
            Ok(o) => (o.pass && over.is_none(), o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let budget = over.map(|b| format!(", over {}s budget", b.as_secs())).unwrap_or_default();
        println!(
            "criterion {n} [{}] {name}: {detail} ({:.1}s{budget})",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
        if !pass {
            failed.push(*n);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
