//! Adversarial training with a gradient-penalized critic and a
//! constraint-critic term on the generator.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::data::{ConstraintSampler, Dataset, SampleMode};
use crate::discriminator::{DiscConfig, Discriminator};
use crate::error::{invalid, Error, Result};
use crate::generator::{copy_matching, GenConfig, Generator, PlainGenerator};
use crate::nn::{param_grads, AdamConfig, AdamState, Bound, ParamSet};
use crate::semantic::{
    Constraint, LearnedPhi, MetricKind, Phi, PhiSpec, SemanticSpace, TripletNet, TripletNetConfig,
};
use crate::tensor::{Real, Tensor};

pub const GP_NORM_EPS: f64 = 1e-12;
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZDist {
    /// Uniform on `[−1, 1)` per coordinate.
    #[default]
    Uniform,
    StandardNormal,
}

pub fn sample_z<R: Rng>(dist: ZDist, n: usize, rng: &mut R) -> Tensor<f32> {
    let data = (0..n)
        .map(|_| match dist {
            ZDist::Uniform => rng.random_range(-1.0f32..1.0),
            ZDist::StandardNormal => rng.sample::<f32, _>(StandardNormal),
        })
        .collect();
    Tensor::new(&[n], data).expect("vector shape")
}

/// Which φ to use and where its weights live.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SemanticConfig {
    pub phi: PhiSpec,
    pub metric: MetricKind,
    pub alpha_dof: f64,
    /// Required when `phi` is learned.
    pub phi_checkpoint: Option<PathBuf>,
}

impl Default for SemanticConfig {
    fn default() -> Self {
        Self {
            phi: PhiSpec::ChannelMean,
            metric: MetricKind::SquaredEuclidean,
            alpha_dof: 1.0,
            phi_checkpoint: None,
        }
    }
}

impl SemanticConfig {
    pub fn build(&self) -> Result<SemanticSpace> {
        match &self.phi {
            PhiSpec::Learned { .. } => {
                let path = self
                    .phi_checkpoint
                    .as_ref()
                    .ok_or_else(|| invalid("a learned φ needs phi_checkpoint"))?;
                let ckpt = Checkpoint::load(path)?;
                let mut space = learned_space_from_checkpoint(&ckpt, "phi")?;
                space.metric = self.metric;
                space.alpha_dof = self.alpha_dof;
                Ok(space)
            }
            other => space_from_spec(other, self.metric, self.alpha_dof, None),
        }
    }
}

/// Rebuilds a space; learned φ weights are read from `{prefix}/…` tensors of `source`.
pub fn space_from_spec(
    spec: &PhiSpec,
    metric: MetricKind,
    alpha_dof: f64,
    source: Option<(&Checkpoint, &str)>,
) -> Result<SemanticSpace> {
    let phi = match spec {
        PhiSpec::ChannelMean => Phi::ChannelMean,
        PhiSpec::PatchMean { grid } => Phi::PatchMean { grid: *grid },
        PhiSpec::Learned { net } => {
            let (ckpt, prefix) = source.ok_or_else(|| invalid("learned φ weights not available"))?;
            Phi::Learned(load_learned_phi(ckpt, prefix, net.clone())?)
        }
    };
    SemanticSpace::new(phi, metric, alpha_dof)
}

fn load_learned_phi(ckpt: &Checkpoint, prefix: &str, net: TripletNetConfig) -> Result<LearnedPhi> {
    let (net, mut params) = TripletNet::build::<f32, _>(net, &mut ChaCha8Rng::seed_from_u64(0))?;
    ckpt.load_params(prefix, &mut params)?;
    Ok(LearnedPhi { net, params })
}

/// Checkpoint holding a trained triplet φ.
pub fn phi_checkpoint(space: &SemanticSpace, extra: serde_json::Value) -> Result<Checkpoint> {
    let Phi::Learned(l) = &space.phi else {
        return Err(invalid("only a learned φ has weights to save"));
    };
    let config = serde_json::json!({
        "net": l.net.config,
        "metric": space.metric,
        "alpha_dof": space.alpha_dof,
    });
    let mut c = Checkpoint::new("phi", config);
    c.extra = extra;
    c.push_params("phi", &l.params);
    Ok(c)
}

pub fn learned_space_from_checkpoint(ckpt: &Checkpoint, prefix: &str) -> Result<SemanticSpace> {
    if ckpt.kind != "phi" {
        return Err(invalid(format!("expected a phi checkpoint, got kind {:?}", ckpt.kind)));
    }
    let net: TripletNetConfig = serde_json::from_value(ckpt.config["net"].clone())?;
    let metric: MetricKind = serde_json::from_value(ckpt.config["metric"].clone())?;
    let alpha = ckpt.config["alpha_dof"]
        .as_f64()
        .ok_or_else(|| invalid("phi checkpoint lacks alpha_dof"))?;
    SemanticSpace::new(Phi::Learned(load_learned_phi(ckpt, prefix, net)?), metric, alpha)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub generator: GenConfig,
    pub discriminator: DiscConfig,
    pub semantic: SemanticConfig,
    pub lambda_gp: f64,
    pub gamma: f64,
    pub n_disc: usize,
    pub m: usize,
    pub adam: AdamConfig,
    pub z_dist: ZDist,
    /// Total generator updates.
    pub iterations: u64,
    pub seed: u64,
    pub min_set_size: usize,
    pub max_set_size: usize,
    pub sample_mode: SampleMode,
    /// Save a checkpoint every this many generator updates; 0 saves only at the end.
    pub checkpoint_every: u64,
    /// Unconditional run whose write network and critic initialize this one.
    pub warm_start: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            generator: GenConfig::default(),
            discriminator: DiscConfig::default(),
            semantic: SemanticConfig::default(),
            lambda_gp: 10.0,
            gamma: 10.0,
            n_disc: 5,
            m: 16,
            adam: AdamConfig::default(),
            z_dist: ZDist::Uniform,
            iterations: 3000,
            seed: 0,
            min_set_size: 1,
            max_set_size: 10,
            sample_mode: SampleMode::Uniform,
            checkpoint_every: 500,
            warm_start: None,
        }
    }
}

impl TrainConfig {
    /// Unconditional baseline defaults: normal noise, no constraint term.
    pub fn wgan() -> Self {
        Self {
            gamma: 0.0,
            z_dist: ZDist::StandardNormal,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_gp >= 0.0) || !(self.gamma >= 0.0) {
            return Err(invalid("lambda_gp and gamma must be non-negative"));
        }
        if self.n_disc == 0 || self.m == 0 {
            return Err(invalid("n_disc and m must be at least 1"));
        }
        if self.min_set_size == 0 || self.max_set_size < self.min_set_size {
            return Err(invalid("set size range must satisfy 1 ≤ min ≤ max"));
        }
        if self.generator.image_size != self.discriminator.image_size {
            return Err(invalid("generator and discriminator image sizes differ"));
        }
        self.generator.validate()?;
        self.adam.validate()?;
        Ok(())
    }
}

/// Images, the pool to draw real samples and constraints from, and cached φ values.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub images: Vec<Tensor<f32>>,
    pub bins: Vec<usize>,
    pub pool: Vec<usize>,
    pub space: SemanticSpace,
    pub embeddings: Vec<Vec<f64>>,
}

impl TrainData {
    /// Uses the dataset's train split as the pool.
    pub fn from_dataset(ds: &Dataset, space: SemanticSpace) -> Result<Self> {
        Self::new(ds.images.clone(), ds.bins(), ds.manifest.split.train.clone(), space)
    }

    pub fn new(images: Vec<Tensor<f32>>, bins: Vec<usize>, pool: Vec<usize>, space: SemanticSpace) -> Result<Self> {
        if pool.is_empty() {
            return Err(invalid("training pool is empty"));
        }
        let embeddings = images
            .iter()
            .map(|img| space.embed_value(img))
            .collect::<Result<_>>()?;
        Ok(Self {
            images,
            bins,
            pool,
            space,
            embeddings,
        })
    }
}

/// `λ (‖∇ critic(x̃)‖₂ − 1)²` at `x̃ = ε·real + (1 − ε)·fake`, differentiable in the critic's parameters.
pub fn gradient_penalty<'t, T: Real>(
    tape: &'t Tape<T>,
    critic: impl Fn(Var<'t, T>) -> Result<Var<'t, T>>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    eps: T,
    lambda: f64,
) -> Result<Var<'t, T>> {
    if real.shape() != fake.shape() {
        return Err(invalid(format!("real {:?} and fake {:?} differ in shape", real.shape(), fake.shape())));
    }
    if !(eps >= T::zero() && eps <= T::one()) {
        return Err(invalid(format!("interpolation weight {eps} outside [0, 1]")));
    }
    let data = real
        .data()
        .iter()
        .zip(fake.data())
        .map(|(&r, &f)| eps * r + (T::one() - eps) * f)
        .collect();
    let x = tape.param(Tensor::new(real.shape(), data)?);
    let score = critic(x)?;
    let g = tape.grad(score, &[x], true)?[0];
    let norm = g.dot(g)?.add_scalar(T::lit(GP_NORM_EPS))?.sqrt()?;
    let gap = norm.add_scalar(-T::one())?;
    Ok(gap.mul(gap)?.scale(T::lit(lambda))?)
}

/// One critic sample: a real image, a generated image, and the interpolation weight.
#[derive(Clone, Debug)]
pub struct CriticSample<T: Real> {
    pub real: Tensor<T>,
    pub fake: Tensor<T>,
    pub eps: T,
}

/// Per-sample critic loss `d(fake) − d(real) + penalty`, and `d(real) − d(fake)`.
pub fn critic_loss<'t, T: Real>(
    disc: &Discriminator,
    p: &Bound<'t, T>,
    sample: &CriticSample<T>,
    lambda: f64,
) -> Result<(Var<'t, T>, f64)> {
    let tape = p.vars()[0].tape();
    let d_real = disc.forward(p, tape.constant(sample.real.clone()))?;
    let d_fake = disc.forward(p, tape.constant(sample.fake.clone()))?;
    let gp = gradient_penalty(tape, |x| disc.forward(p, x), &sample.real, &sample.fake, sample.eps, lambda)?;
    let w = d_real.item().as_f64() - d_fake.item().as_f64();
    Ok((d_fake.sub(d_real)?.add(gp)?, w))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscStats {
    pub loss: f64,
    pub w_estimate: f64,
}

/// Mean critic loss over the batch and one Adam update of the critic.
pub fn discriminator_step<T: Real>(
    disc: &Discriminator,
    params: &mut ParamSet<T>,
    opt: &mut AdamState<T>,
    adam: &AdamConfig,
    lambda: f64,
    batch: &[CriticSample<T>],
) -> Result<DiscStats> {
    if batch.is_empty() {
        return Err(invalid("empty critic batch"));
    }
    let scale = T::lit(1.0 / batch.len() as f64);
    let mut total: Option<Vec<Tensor<T>>> = None;
    let (mut loss, mut w) = (0.0, 0.0);
    for sample in batch {
        let tape = Tape::new();
        let p = params.bind(&tape, true);
        let (l, wi) = critic_loss(disc, &p, sample, lambda)?;
        loss += l.item().as_f64();
        w += wi;
        let grads = param_grads(&tape, l.scale(scale)?, &p)?;
        accumulate(&mut total, grads)?;
    }
    opt.step(adam, params, &total.expect("non-empty batch"))?;
    let n = batch.len() as f64;
    Ok(DiscStats {
        loss: loss / n,
        w_estimate: w / n,
    })
}

fn accumulate<T: Real>(total: &mut Option<Vec<Tensor<T>>>, grads: Vec<Tensor<T>>) -> Result<()> {
    match total {
        None => *total = Some(grads),
        Some(acc) => {
            for (a, g) in acc.iter_mut().zip(grads) {
                for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                    *x += *y;
                }
            }
        }
    }
    Ok(())
}

/// One generator sample: constraint images, their φ values, and noise.
#[derive(Clone, Debug)]
pub struct GenSample<T: Real> {
    pub constraints: Vec<Constraint<Tensor<T>>>,
    pub targets: Vec<Constraint<Vec<f64>>>,
    pub z: Tensor<T>,
}

/// Terms of the per-sample generator loss.
pub struct GenLoss<'t, T: Real> {
    pub x_hat: Var<'t, T>,
    /// `−d(x̂)`.
    pub adversarial: Var<'t, T>,
    /// Constraint critic loss of `x̂`, before weighting.
    pub constraint: Var<'t, T>,
    /// `adversarial + γ·constraint`.
    pub total: Var<'t, T>,
}

pub fn generator_loss<'t, T: Real>(
    gen: &Generator,
    p_gen: &Bound<'t, T>,
    disc: &Discriminator,
    p_disc: &Bound<'t, T>,
    space: &SemanticSpace,
    gamma: f64,
    sample: &GenSample<T>,
) -> Result<GenLoss<'t, T>> {
    let tape = sample_tape(p_gen)?;
    let cs: Vec<_> = sample
        .constraints
        .iter()
        .map(|c| Constraint::new(tape.constant(c.positive.clone()), tape.constant(c.negative.clone())))
        .collect();
    let x_hat = gen.forward(p_gen, &cs, tape.constant(sample.z.clone()))?;
    let adversarial = disc.forward(p_disc, x_hat)?.neg()?;
    let constraint = space.constraint_critic_loss(x_hat, &sample.targets)?;
    let total = adversarial.add(constraint.scale(T::lit(gamma))?)?;
    Ok(GenLoss {
        x_hat,
        adversarial,
        constraint,
        total,
    })
}

fn sample_tape<'t, T: Real>(p: &Bound<'t, T>) -> Result<&'t Tape<T>> {
    p.vars()
        .first()
        .map(|v| v.tape())
        .ok_or_else(|| invalid("empty parameter set"))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenStats {
    pub loss: f64,
    pub adversarial: f64,
    pub constraint: f64,
    /// Constraints violated by the generated images.
    pub violated: usize,
    pub total_constraints: usize,
}

/// Mean generator loss over the batch and one Adam update of the generator.
#[allow(clippy::too_many_arguments)]
pub fn generator_step<T: Real>(
    gen: &Generator,
    params: &mut ParamSet<T>,
    opt: &mut AdamState<T>,
    adam: &AdamConfig,
    disc: &Discriminator,
    disc_params: &ParamSet<T>,
    space: &SemanticSpace,
    gamma: f64,
    batch: &[GenSample<T>],
) -> Result<GenStats> {
    if batch.is_empty() {
        return Err(invalid("empty generator batch"));
    }
    let scale = T::lit(1.0 / batch.len() as f64);
    let mut total: Option<Vec<Tensor<T>>> = None;
    let mut stats = GenStats {
        loss: 0.0,
        adversarial: 0.0,
        constraint: 0.0,
        violated: 0,
        total_constraints: 0,
    };
    for sample in batch {
        let tape = Tape::new();
        let p = params.bind(&tape, true);
        let pd = disc_params.bind(&tape, false);
        let l = generator_loss(gen, &p, disc, &pd, space, gamma, sample)?;
        stats.loss += l.total.item().as_f64();
        stats.adversarial += l.adversarial.item().as_f64();
        stats.constraint += l.constraint.item().as_f64();
        let e = space.embed_value(&l.x_hat.value())?;
        for c in &sample.targets {
            stats.total_constraints += 1;
            if !space.satisfies(&e, &c.positive, &c.negative)? {
                stats.violated += 1;
            }
        }
        let grads = param_grads(&tape, l.total.scale(scale)?, &p)?;
        accumulate(&mut total, grads)?;
    }
    opt.step(adam, params, &total.expect("non-empty batch"))?;
    let n = batch.len() as f64;
    stats.loss /= n;
    stats.adversarial /= n;
    stats.constraint /= n;
    Ok(stats)
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iteration: u64,
    /// Mean `d(real) − d(fake)` over this iteration's critic batches.
    pub w_estimate: f64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub constraint_loss: Option<f64>,
    /// Fraction of constraints violated by this iteration's generator batch.
    pub mcse_sample: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Congan,
    Wgan,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Congan => "congan",
            ModelKind::Wgan => "wgan",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "congan" => Ok(ModelKind::Congan),
            "wgan" => Ok(ModelKind::Wgan),
            other => Err(invalid(format!("checkpoint kind {other:?} is not a training run"))),
        }
    }
}

#[derive(Clone, Debug)]
enum Model {
    Congan(Generator),
    Plain(PlainGenerator),
}

/// Complete state of a training run.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    data: &'a TrainData,
    sampler: ConstraintSampler<'a>,
    model: Model,
    pub gen_params: ParamSet<f32>,
    pub disc: Discriminator,
    pub disc_params: ParamSet<f32>,
    opt_g: AdamState<f32>,
    opt_d: AdamState<f32>,
    rng: ChaCha8Rng,
    iteration: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, data: &'a TrainData, kind: ModelKind) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (model, mut gen_params) = match kind {
            ModelKind::Congan => {
                let (g, p) = Generator::build(cfg.generator.clone(), &mut rng)?;
                (Model::Congan(g), p)
            }
            ModelKind::Wgan => {
                let (g, p) = PlainGenerator::build(cfg.generator.clone(), &mut rng)?;
                (Model::Plain(g), p)
            }
        };
        let (disc, mut disc_params) = Discriminator::build(cfg.discriminator.clone(), &mut rng)?;
        if let Some(path) = &cfg.warm_start {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.kind != ModelKind::Wgan.as_str() {
                return Err(invalid(format!("warm start expects a wgan checkpoint, got {:?}", ckpt.kind)));
            }
            let (src_g, src_d) = split_params(&ckpt)?;
            let n = copy_matching(&src_g, &mut gen_params) + copy_matching(&src_d, &mut disc_params);
            if n == 0 {
                return Err(invalid("warm-start checkpoint shares no parameters with this model"));
            }
        }
        let sampler = ConstraintSampler::new(&data.space, &data.embeddings, &data.bins, &data.pool)?;
        Ok(Self {
            opt_g: AdamState::new(&gen_params),
            opt_d: AdamState::new(&disc_params),
            cfg,
            data,
            sampler,
            model,
            gen_params,
            disc,
            disc_params,
            rng,
            iteration: 0,
        })
    }

    /// Restores a run exactly as it was saved, including optimizer moments and RNG position.
    pub fn resume(ckpt: &Checkpoint, data: &'a TrainData) -> Result<Self> {
        let kind = ModelKind::parse(&ckpt.kind)?;
        let mut cfg: TrainConfig = serde_json::from_value(ckpt.config.clone())?;
        cfg.warm_start = None;
        let mut t = Self::new(cfg, data, kind)?;
        ckpt.load_params("gen", &mut t.gen_params)?;
        ckpt.load_params("disc", &mut t.disc_params)?;
        load_adam(ckpt, "opt_g", &t.gen_params, &mut t.opt_g)?;
        load_adam(ckpt, "opt_d", &t.disc_params, &mut t.opt_d)?;
        t.rng = ckpt
            .rng_state
            .clone()
            .ok_or_else(|| invalid("checkpoint lacks rng state"))?;
        t.iteration = ckpt.iteration;
        Ok(t)
    }

    pub fn kind(&self) -> ModelKind {
        match self.model {
            Model::Congan(_) => ModelKind::Congan,
            Model::Plain(_) => ModelKind::Wgan,
        }
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn plain_generator(&self) -> Option<&PlainGenerator> {
        match &self.model {
            Model::Plain(g) => Some(g),
            Model::Congan(_) => None,
        }
    }

    pub fn disc_optimizer(&self) -> &AdamState<f32> {
        &self.opt_d
    }

    pub fn gen_optimizer(&self) -> &AdamState<f32> {
        &self.opt_g
    }

    pub fn generator(&self) -> Option<&Generator> {
        match &self.model {
            Model::Congan(g) => Some(g),
            Model::Plain(_) => None,
        }
    }

    fn draw_set(&mut self) -> Result<Vec<Constraint<usize>>> {
        let range = self.cfg.min_set_size..=self.cfg.max_set_size;
        Ok(self
            .sampler
            .sample(range, self.cfg.sample_mode, &mut self.rng)?
            .constraints)
    }

    fn set_images(&self, set: &[Constraint<usize>]) -> Vec<Constraint<Tensor<f32>>> {
        set.iter()
            .map(|c| {
                Constraint::new(
                    self.data.images[c.positive].clone(),
                    self.data.images[c.negative].clone(),
                )
            })
            .collect()
    }

    fn critic_batch(&mut self) -> Result<Vec<CriticSample<f32>>> {
        (0..self.cfg.m)
            .map(|_| {
                let real_id = self.data.pool[self.rng.random_range(0..self.data.pool.len())];
                let fake = match &self.model {
                    Model::Congan(_) => {
                        let set = self.draw_set()?;
                        let z = sample_z(self.cfg.z_dist, self.cfg.generator.n_z, &mut self.rng);
                        let Model::Congan(g) = &self.model else { unreachable!() };
                        let cs: Vec<_> = set
                            .iter()
                            .map(|c| Constraint::new(&self.data.images[c.positive], &self.data.images[c.negative]))
                            .collect();
                        g.generate(&self.gen_params, &cs, &z)?
                    }
                    Model::Plain(g) => {
                        let z = sample_z(self.cfg.z_dist, self.cfg.generator.n_z, &mut self.rng);
                        g.generate(&self.gen_params, &z)?
                    }
                };
                let eps = self.rng.random::<f32>();
                Ok(CriticSample {
                    real: self.data.images[real_id].clone(),
                    fake,
                    eps,
                })
            })
            .collect()
    }

    fn plain_generator_step(&mut self, g: &PlainGenerator) -> Result<f64> {
        let scale = 1.0 / self.cfg.m as f32;
        let mut total: Option<Vec<Tensor<f32>>> = None;
        let mut loss = 0.0;
        for _ in 0..self.cfg.m {
            let z = sample_z(self.cfg.z_dist, self.cfg.generator.n_z, &mut self.rng);
            let tape = Tape::new();
            let p = self.gen_params.bind(&tape, true);
            let pd = self.disc_params.bind(&tape, false);
            let x = g.forward(&p, tape.constant(z))?;
            let l = self.disc.forward(&pd, x)?.neg()?;
            loss += l.item() as f64;
            accumulate(&mut total, param_grads(&tape, l.scale(scale)?, &p)?)?;
        }
        self.opt_g
            .step(&self.cfg.adam, &mut self.gen_params, &total.expect("m ≥ 1"))?;
        Ok(loss / self.cfg.m as f64)
    }

    /// `n_disc` critic updates followed by one generator update.
    pub fn step(&mut self) -> Result<MetricRecord> {
        let (mut w, mut d_loss) = (0.0, 0.0);
        for _ in 0..self.cfg.n_disc {
            let batch = self.critic_batch()?;
            let s = discriminator_step(
                &self.disc,
                &mut self.disc_params,
                &mut self.opt_d,
                &self.cfg.adam,
                self.cfg.lambda_gp,
                &batch,
            )?;
            w += s.w_estimate;
            d_loss += s.loss;
        }
        let nd = self.cfg.n_disc as f64;
        let record = match self.model.clone() {
            Model::Congan(g) => {
                let batch = (0..self.cfg.m)
                    .map(|_| {
                        let set = self.draw_set()?;
                        let z = sample_z(self.cfg.z_dist, self.cfg.generator.n_z, &mut self.rng);
                        Ok(GenSample {
                            constraints: self.set_images(&set),
                            targets: set
                                .iter()
                                .map(|c| c.map(|&i| self.data.embeddings[i].clone()))
                                .collect(),
                            z,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let s = generator_step(
                    &g,
                    &mut self.gen_params,
                    &mut self.opt_g,
                    &self.cfg.adam,
                    &self.disc,
                    &self.disc_params,
                    &self.data.space,
                    self.cfg.gamma,
                    &batch,
                )?;
                MetricRecord {
                    iteration: self.iteration + 1,
                    w_estimate: w / nd,
                    d_loss: d_loss / nd,
                    g_loss: s.loss,
                    constraint_loss: Some(s.constraint),
                    mcse_sample: Some(s.violated as f64 / s.total_constraints as f64),
                }
            }
            Model::Plain(g) => {
                let g_loss = self.plain_generator_step(&g)?;
                MetricRecord {
                    iteration: self.iteration + 1,
                    w_estimate: w / nd,
                    d_loss: d_loss / nd,
                    g_loss,
                    constraint_loss: None,
                    mcse_sample: None,
                }
            }
        };
        self.iteration += 1;
        Ok(record)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut cfg = self.cfg.clone();
        cfg.warm_start = None;
        let mut c = Checkpoint::new(self.kind().as_str(), serde_json::to_value(&cfg)?);
        c.iteration = self.iteration;
        c.rng_state = Some(self.rng.clone());
        c.extra = serde_json::json!({ "opt_g_t": self.opt_g.t, "opt_d_t": self.opt_d.t });
        c.push_params("gen", &self.gen_params);
        c.push_params("disc", &self.disc_params);
        c.push_tensors("opt_g.m", self.gen_params.names(), &self.opt_g.m);
        c.push_tensors("opt_g.v", self.gen_params.names(), &self.opt_g.v);
        c.push_tensors("opt_d.m", self.disc_params.names(), &self.opt_d.m);
        c.push_tensors("opt_d.v", self.disc_params.names(), &self.opt_d.v);
        if let Phi::Learned(l) = &self.data.space.phi {
            c.push_params("phi", &l.params);
        }
        Ok(c)
    }

    /// Runs until `cfg.iterations`, appending to `out_dir/metrics.jsonl` and
    /// saving `out_dir/checkpoint` at the configured cadence and at the end.
    pub fn run(&mut self, out_dir: Option<&Path>, mut on_record: impl FnMut(&MetricRecord)) -> Result<Vec<MetricRecord>> {
        let mut log = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                Some(
                    OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(dir.join(METRICS_FILE))?,
                )
            }
            None => None,
        };
        let mut records = Vec::new();
        while self.iteration < self.cfg.iterations {
            let r = self.step()?;
            if let Some(f) = log.as_mut() {
                let mut line = serde_json::to_vec(&r)?;
                line.push(b'\n');
                f.write_all(&line)?;
            }
            on_record(&r);
            records.push(r);
            let every = self.cfg.checkpoint_every;
            if let Some(dir) = out_dir {
                if every > 0 && self.iteration % every == 0 && self.iteration < self.cfg.iterations {
                    self.checkpoint()?.save(&dir.join(CHECKPOINT_DIR))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.checkpoint()?.save(&dir.join(CHECKPOINT_DIR))?;
        }
        Ok(records)
    }
}

fn load_adam(ckpt: &Checkpoint, prefix: &str, params: &ParamSet<f32>, opt: &mut AdamState<f32>) -> Result<()> {
    opt.m = ckpt.tensors_for(&format!("{prefix}.m"), params.names(), params.tensors())?;
    opt.v = ckpt.tensors_for(&format!("{prefix}.v"), params.names(), params.tensors())?;
    opt.t = ckpt.extra[format!("{prefix}_t")]
        .as_u64()
        .ok_or_else(|| invalid(format!("checkpoint lacks {prefix}_t")))?;
    Ok(())
}

/// Generator and critic parameters of a training checkpoint, keyed by their in-model names.
fn split_params(ckpt: &Checkpoint) -> Result<(ParamSet<f32>, ParamSet<f32>)> {
    let (mut g, mut d) = (ParamSet::new(), ParamSet::new());
    for (name, t) in &ckpt.tensors {
        if let Some(n) = name.strip_prefix("gen/") {
            g.add(n, t.clone());
        } else if let Some(n) = name.strip_prefix("disc/") {
            d.add(n, t.clone());
        }
    }
    if g.is_empty() || d.is_empty() {
        return Err(Error::Corrupt {
            path: crate::checkpoint::MANIFEST_FILE.into(),
            detail: "training checkpoint lacks generator or critic tensors".into(),
        });
    }
    Ok((g, d))
}

/// Trains the constrained generator.
pub fn train<'a>(
    cfg: TrainConfig,
    data: &'a TrainData,
    out_dir: Option<&Path>,
    on_record: impl FnMut(&MetricRecord),
) -> Result<(Trainer<'a>, Vec<MetricRecord>)> {
    let mut t = Trainer::new(cfg, data, ModelKind::Congan)?;
    let records = t.run(out_dir, on_record)?;
    Ok((t, records))
}

/// Trains the unconditional baseline with the same loop.
pub fn train_wgan_baseline<'a>(
    cfg: TrainConfig,
    data: &'a TrainData,
    out_dir: Option<&Path>,
    on_record: impl FnMut(&MetricRecord),
) -> Result<(Trainer<'a>, Vec<MetricRecord>)> {
    let mut t = Trainer::new(cfg, data, ModelKind::Wgan)?;
    let records = t.run(out_dir, on_record)?;
    Ok((t, records))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// A trained constrained generator with the φ it was trained against.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub generator: Generator,
    pub params: ParamSet<f32>,
    pub space: SemanticSpace,
    pub iteration: u64,
}

impl TrainedModel {
    pub fn load(dir: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(dir)?)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != ModelKind::Congan.as_str() {
            return Err(invalid(format!("expected a congan checkpoint, got kind {:?}", ckpt.kind)));
        }
        let config: TrainConfig = serde_json::from_value(ckpt.config.clone())?;
        let (generator, mut params) =
            Generator::build::<f32, _>(config.generator.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        ckpt.load_params("gen", &mut params)?;
        let sc = &config.semantic;
        let source = ckpt.has_prefix("phi").then_some((ckpt, "phi"));
        let space = space_from_spec(&sc.phi, sc.metric, sc.alpha_dof, source)?;
        Ok(Self {
            config,
            generator,
            params,
            space,
            iteration: ckpt.iteration,
        })
    }

    /// Freshly initialized weights from `config.seed`.
    pub fn untrained(config: TrainConfig, space: SemanticSpace) -> Result<Self> {
        config.validate()?;
        let (generator, params) =
            Generator::build::<f32, _>(config.generator.clone(), &mut ChaCha8Rng::seed_from_u64(config.seed))?;
        Ok(Self {
            config,
            generator,
            params,
            space,
            iteration: 0,
        })
    }

    pub fn from_trainer(t: &Trainer<'_>) -> Result<Self> {
        let generator = t
            .generator()
            .ok_or_else(|| invalid("baseline runs have no constrained generator"))?
            .clone();
        Ok(Self {
            config: t.cfg.clone(),
            generator,
            params: t.gen_params.clone(),
            space: t.data.space.clone(),
            iteration: t.iteration,
        })
    }

    pub fn generate(&self, cs: &[Constraint<&Tensor<f32>>], z: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.generator.generate(&self.params, cs, z)
    }

    pub fn sample_z<R: Rng>(&self, rng: &mut R) -> Tensor<f32> {
        sample_z(self.config.z_dist, self.config.generator.n_z, rng)
    }
}

/// Critic stored in a training checkpoint.
pub fn load_discriminator(ckpt: &Checkpoint) -> Result<(Discriminator, ParamSet<f32>)> {
    let config: TrainConfig = serde_json::from_value(ckpt.config.clone())?;
    let (d, mut p) = Discriminator::build::<f32, _>(config.discriminator, &mut ChaCha8Rng::seed_from_u64(0))?;
    ckpt.load_params("disc", &mut p)?;
    Ok((d, p))
}

/// Unconditional generator stored in a baseline checkpoint, with its noise distribution.
pub fn load_plain_generator(ckpt: &Checkpoint) -> Result<(PlainGenerator, ParamSet<f32>, ZDist)> {
    if ckpt.kind != ModelKind::Wgan.as_str() {
        return Err(invalid(format!("expected a wgan checkpoint, got kind {:?}", ckpt.kind)));
    }
    let config: TrainConfig = serde_json::from_value(ckpt.config.clone())?;
    let (g, mut p) = PlainGenerator::build::<f32, _>(config.generator, &mut ChaCha8Rng::seed_from_u64(0))?;
    ckpt.load_params("gen", &mut p)?;
    Ok((g, p, config.z_dist))
}
