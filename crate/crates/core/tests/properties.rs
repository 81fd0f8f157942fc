use congan::data::{
    build_fixed_size_test_sets, decode_ppm, encode_ppm, from_rgb8, quantize, to_rgb8, ConstraintSampler, Dataset,
    SampleMode,
};
use congan::discriminator::{DiscConfig, Discriminator};
use congan::eval::{mcse, EchoPositive};
use congan::generator::{GenConfig, Generator};
use congan::kernels::{conv2d, conv2d_transpose, ConvGeom};
use congan::nn::{layer_norm, AdamConfig, AdamState, LstmCell, ParamSet};
use congan::training::gradient_penalty;
use congan::{Constraint, SemanticSpace, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

fn cfg(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        ..ProptestConfig::default()
    }
}

fn vec3() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, 3)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn image(size: usize) -> impl Strategy<Value = Tensor<f32>> {
    prop::collection::vec(-1.0f32..1.0, 3 * size * size).prop_map(move |d| Tensor::new(&[3, size, size], d).unwrap())
}

struct Fixture {
    ds: Dataset,
    emb: Vec<Vec<f64>>,
    space: SemanticSpace,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let ds = Dataset::generate(120, 8, 4).unwrap();
        let space = SemanticSpace::channel_mean();
        let emb = ds.embed_all(&space).unwrap();
        Fixture { ds, emb, space }
    })
}

fn tiny_generator() -> &'static (Generator, ParamSet<f32>) {
    static G: OnceLock<(Generator, ParamSet<f32>)> = OnceLock::new();
    G.get_or_init(|| Generator::build(GenConfig::tiny(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap())
}

proptest! {
    #![proptest_config(cfg(48))]

    #[test]
    fn conv_and_transpose_are_adjoint(
        c_in in 1usize..4, c_out in 1usize..4, h in 3usize..9, w in 3usize..9,
        kh in 1usize..4, kw in 1usize..4, stride in 1usize..3, pad in 0usize..2, seed: u64,
    ) {
        prop_assume!(h + 2 * pad >= kh && w + 2 * pad >= kw);
        let geom = ConvGeom {
            c_in, h, w, c_out, kh, kw, stride, pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f32> { (0..n).map(|_| rand::Rng::random_range(&mut rng, -1.0f32..1.0)).collect() };
        let x = draw(c_in * h * w);
        let k = draw(c_out * c_in * kh * kw);
        let y = draw(c_out * geom.oh * geom.ow);
        let lhs: f64 = conv2d(&x, &k, &geom).iter().zip(&y).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let rhs: f64 = x.iter().zip(&conv2d_transpose(&y, &k, &geom)).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-5 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
    }

    #[test]
    fn softmax_normalizes_and_ignores_shifts(v in prop::collection::vec(-20.0f64..20.0, 1..12), shift in -50.0f64..50.0) {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::vector(v.clone())).softmax().unwrap().value();
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        let b = tape.constant(Tensor::vector(shifted)).softmax().unwrap().value();
        prop_assert!((a.data().iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        prop_assert!(a.data().iter().all(|&p| p >= 0.0));
        prop_assert!(a.max_abs_diff(&b) <= 1e-6);
    }

    #[test]
    fn layer_norm_standardizes(v in prop::collection::vec(-10.0f64..10.0, 4..40)) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        prop_assume!(v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n >= 0.1);
        let tape = Tape::<f64>::new();
        let d = v.len();
        let y = layer_norm(
            tape.constant(Tensor::vector(v)),
            tape.constant(Tensor::ones(&[d])),
            tape.constant(Tensor::zeros(&[d])),
        ).unwrap().value();
        let mean = y.data().iter().sum::<f64>() / n;
        let var = y.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        prop_assert!(mean.abs() <= 1e-6);
        prop_assert!((var - 1.0).abs() <= 1e-4, "{var}");
    }

    #[test]
    fn lstm_output_is_bounded(seed: u64, scale in 0.1f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::<f64>::new();
        let cell = LstmCell::new(&mut set, "l", 5, 10, 3, &mut rng);
        let mut draw = |n: usize| -> Tensor<f64> {
            Tensor::vector((0..n).map(|_| scale * rand::Rng::random_range(&mut rng, -1.0..1.0)).collect())
        };
        let tape = Tape::new();
        let p = set.bind(&tape, false);
        let (mut q, mut c) = (tape.constant(draw(10)), tape.constant(draw(5)));
        for _ in 0..4 {
            let (qt, ct) = cell.forward(&p, tape.constant(draw(3)), q, c).unwrap();
            prop_assert!(qt.value().data().iter().all(|v| v.abs() < 1.0));
            q = tape.concat(&[qt, tape.constant(draw(5))]).unwrap();
            c = ct;
        }
    }

    #[test]
    fn adam_first_step_has_learning_rate_magnitude(g in prop::sample::select(vec![1e-3, 1.0, 1e3]), sign in prop::bool::ANY, lr in 1e-5f64..1e-2) {
        let g = if sign { g } else { -g };
        let mut set = ParamSet::<f64>::new();
        set.add("w", Tensor::vector(vec![0.5]));
        let mut opt = AdamState::new(&set);
        let adam = AdamConfig { lr, beta1: 0.0, beta2: 0.9, eps: 1e-12 };
        opt.step(&adam, &mut set, &[Tensor::vector(vec![g])]).unwrap();
        let update = set.tensors()[0].data()[0] - 0.5;
        prop_assert!((update.abs() - lr).abs() <= 1e-6);
        prop_assert!(update.signum() == -g.signum());
    }

    #[test]
    fn p_s_complements(a in vec3(), b in vec3(), c in vec3()) {
        let s = SemanticSpace::channel_mean();
        let sum = s.p_s_value(&a, &b, &c).unwrap() + s.p_s_value(&a, &c, &b).unwrap();
        prop_assert!((sum - 1.0).abs() <= 1e-7);
    }

    #[test]
    fn p_s_decreases_with_distance_to_positive(a in vec3(), c in vec3(), u in vec3(), t1 in 0.0f64..2.0, dt in 1e-3f64..2.0) {
        let norm = dist(&u, &[0.0; 3]);
        prop_assume!(norm > 1e-3 && dist(&a, &c) > 1e-3);
        let at = |t: f64| -> Vec<f64> { a.iter().zip(&u).map(|(x, d)| x + t * d / norm).collect() };
        let s = SemanticSpace::channel_mean();
        prop_assert!(s.p_s_value(&a, &at(t1), &c).unwrap() > s.p_s_value(&a, &at(t1 + dt), &c).unwrap());
    }

    #[test]
    fn satisfaction_is_strict_and_matches_p_s(x in vec3(), p in vec3(), n in vec3()) {
        let s = SemanticSpace::channel_mean();
        let fwd = s.satisfies(&x, &p, &n).unwrap();
        let back = s.satisfies(&x, &n, &p).unwrap();
        prop_assert!(!(fwd && back));
        prop_assert_eq!(fwd, s.p_s_value(&x, &p, &n).unwrap() > 0.5);
        prop_assert!(!s.satisfies(&x, &p, &p).unwrap());
    }

    #[test]
    fn constraint_loss_is_in_open_unit_interval(
        x in image(4),
        targets in prop::collection::vec((vec3(), vec3()), 1..8),
    ) {
        let s = SemanticSpace::channel_mean();
        let targets: Vec<_> = targets.into_iter().map(|(p, n)| Constraint::new(p, n)).collect();
        let tape = Tape::<f32>::new();
        let l = s.constraint_critic_loss(tape.constant(x), &targets).unwrap().item();
        prop_assert!(l > -1.0 && l < 0.0, "{l}");
    }

    #[test]
    fn codec_quantizes_within_one_step(x in image(5)) {
        let q = quantize(&x).unwrap();
        prop_assert!(q.max_abs_diff(&x) <= 1.0 / 127.5);
        let (w, h, bytes) = to_rgb8(&q).unwrap();
        prop_assert_eq!(&from_rgb8(w, h, &bytes).unwrap(), &q);
        prop_assert_eq!(&decode_ppm(&encode_ppm(&x).unwrap()).unwrap(), &q);
    }

    #[test]
    fn rgb8_round_trip_is_exact(bytes in prop::collection::vec(any::<u8>(), 3 * 6 * 4)) {
        let t = from_rgb8(6, 4, &bytes).unwrap();
        prop_assert_eq!(to_rgb8(&t).unwrap(), (6, 4, bytes));
    }
}

proptest! {
    #![proptest_config(cfg(16))]

    #[test]
    fn gradient_penalty_is_non_negative(seed: u64, eps in 0.0f64..=1.0, lambda in 0.0f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (disc, params) = Discriminator::build::<f64, _>(DiscConfig::tiny(), &mut rng).unwrap();
        let mut draw = || Tensor::vector((0..3 * 64).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect()).reshape(&[3, 8, 8]).unwrap();
        let (real, fake) = (draw(), draw());
        let tape = Tape::new();
        let p = params.bind(&tape, true);
        let gp = gradient_penalty(&tape, |x| disc.forward(&p, x), &real, &fake, eps, lambda).unwrap().item();
        prop_assert!(gp >= 0.0 && gp.is_finite());
    }

    #[test]
    fn generator_attention_and_output_are_well_formed(seed: u64, k in 1usize..6) {
        let (gen, params) = tiny_generator();
        let f = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<usize> = (0..2 * k).map(|_| rand::Rng::random_range(&mut rng, 0..f.ds.len())).collect();
        let tape = Tape::<f32>::new();
        let p = params.bind(&tape, false);
        let enc: Vec<_> = ids
            .chunks(2)
            .map(|c| {
                let cs = Constraint::new(tape.constant(f.ds.images[c[0]].clone()), tape.constant(f.ds.images[c[1]].clone()));
                gen.read_constraint(&p, cs).unwrap()
            })
            .collect();
        let z = tape.constant(congan::training::sample_z(congan::training::ZDist::Uniform, 4, &mut rng));
        let out = gen.process(&p, &enc, z).unwrap();
        prop_assert_eq!(out.attention.len(), gen.config.p);
        for a in &out.attention {
            let a = a.value();
            prop_assert!(a.data().iter().all(|&w| w > 0.0));
            prop_assert!((a.data().iter().sum::<f32>() - 1.0).abs() <= 1e-5);
        }
        let x = gen.write(&p, out.s).unwrap().value();
        prop_assert_eq!(x.shape(), &[3, 8, 8]);
        prop_assert!(x.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn generator_ignores_constraint_order(seed: u64, k in 2usize..7) {
        let (gen, params) = tiny_generator();
        let f = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cs: Vec<_> = (0..k)
            .map(|_| {
                let i = rand::Rng::random_range(&mut rng, 0..f.ds.len());
                let j = rand::Rng::random_range(&mut rng, 0..f.ds.len());
                Constraint::new(&f.ds.images[i], &f.ds.images[j])
            })
            .collect();
        let z = congan::training::sample_z(congan::training::ZDist::Uniform, 4, &mut rng);
        let a = gen.generate(params, &cs, &z).unwrap();
        rand::seq::SliceRandom::shuffle(cs.as_mut_slice(), &mut rng);
        let b = gen.generate(params, &cs, &z).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-5);
    }

    #[test]
    fn sampled_sets_are_sound(seed: u64, focused in prop::bool::ANY, lo in 1usize..6, extra in 0usize..5) {
        let f = fixture();
        let pool = &f.ds.manifest.split.train;
        let sampler = ConstraintSampler::new(&f.space, &f.emb, &f.ds.bins(), pool).unwrap();
        let mode = if focused { SampleMode::BinFocused } else { SampleMode::Uniform };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bins = f.ds.bins();
        for _ in 0..10 {
            let s = sampler.sample(lo..=lo + extra, mode, &mut rng).unwrap();
            prop_assert!((lo..=lo + extra).contains(&s.constraints.len()));
            prop_assert!(pool.contains(&s.reference));
            if !focused {
                prop_assert_eq!(s.focused_bin, None);
            }
            for c in &s.constraints {
                prop_assert!(pool.contains(&c.positive) && pool.contains(&c.negative));
                prop_assert!(c.positive != c.negative && c.positive != s.reference && c.negative != s.reference);
                let e = &f.emb;
                prop_assert!(f.space.satisfies(&e[s.reference], &e[c.positive], &e[c.negative]).unwrap());
                if let Some(b) = s.focused_bin {
                    prop_assert_eq!(bins[s.reference], b);
                    prop_assert_eq!(bins[c.positive], b);
                    prop_assert!(bins[c.negative] != b);
                }
            }
        }
    }
}

#[test]
fn dataset_regeneration_is_deterministic() {
    let a = Dataset::generate(60, 8, 17).unwrap();
    let b = Dataset::generate(60, 8, 17).unwrap();
    assert_eq!(a.images, b.images);
    assert_eq!(a.meta, b.meta);
    assert_eq!(a.manifest, b.manifest);
    let c = Dataset::generate(60, 8, 18).unwrap();
    assert_ne!(a.images, c.images);
}

#[test]
fn mcse_is_a_deterministic_fraction() {
    let f = fixture();
    let suites =
        build_fixed_size_test_sets(&f.space, &f.emb, &f.ds.bins(), &f.ds.manifest.split.train, &[1, 3], 12, 2)
            .unwrap();
    let model = congan::training::TrainedModel::untrained(
        congan::training::TrainConfig {
            generator: GenConfig::tiny(),
            discriminator: DiscConfig::tiny(),
            ..Default::default()
        },
        f.space.clone(),
    )
    .unwrap();
    let a = mcse(&model, &f.space, &f.ds.images, &f.emb, &suites, 3, 9).unwrap();
    let b = mcse(&model, &f.space, &f.ds.images, &f.emb, &suites, 3, 9).unwrap();
    assert_eq!(a, b);
    for r in &a {
        assert!((0.0..=1.0).contains(&r.mcse_mean), "{r:?}");
        assert_eq!(r.total, (r.k * r.n_sets * r.n_trials) as u64);
    }
    let echo = mcse(&EchoPositive, &f.space, &f.ds.images, &f.emb, &suites[..1], 2, 9).unwrap();
    assert_eq!(echo[0].mcse_mean, 0.0);
}
