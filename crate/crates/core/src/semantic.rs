//! Semantic spaces, relative constraints, and the t-STE constraint critic.
//!
//! A constraint `(positive, negative)` is satisfied by an image `x` when
//! `d(φ(x), φ(positive)) < d(φ(x), φ(negative))`, strictly. The critic scores
//! the same comparison smoothly with a Student-t kernel ratio.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::kernels::ConvGeom;
use crate::nn::{param_grads, AdamConfig, AdamState, Bound, Conv, Dense, LayerNorm, ParamSet};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    #[default]
    SquaredEuclidean,
    Euclidean,
}

/// One relative constraint: "more like `positive` than `negative`".
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Constraint<I> {
    pub positive: I,
    pub negative: I,
}

impl<I> Constraint<I> {
    pub fn new(positive: I, negative: I) -> Self {
        Self { positive, negative }
    }

    pub fn swapped(self) -> Self {
        Self {
            positive: self.negative,
            negative: self.positive,
        }
    }

    pub fn map<J>(&self, mut f: impl FnMut(&I) -> J) -> Constraint<J> {
        Constraint {
            positive: f(&self.positive),
            negative: f(&self.negative),
        }
    }
}

/// A non-empty, order-irrelevant collection of constraints.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Constraint<I>>", into = "Vec<Constraint<I>>")]
#[serde(bound(
    serialize = "I: Clone + Serialize",
    deserialize = "I: Deserialize<'de>"
))]
pub struct ConstraintSet<I> {
    constraints: Vec<Constraint<I>>,
}

impl<I> ConstraintSet<I> {
    pub fn new(constraints: Vec<Constraint<I>>) -> Result<Self> {
        if constraints.is_empty() {
            return Err(Error::EmptyConstraintSet);
        }
        Ok(Self { constraints })
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Constraint<I>> {
        self.constraints.iter()
    }

    pub fn as_slice(&self) -> &[Constraint<I>] {
        &self.constraints
    }

    pub fn map<J>(&self, f: impl FnMut(&I) -> J + Copy) -> ConstraintSet<J> {
        ConstraintSet {
            constraints: self.constraints.iter().map(|c| c.map(f)).collect(),
        }
    }

    pub fn try_map<J>(&self, mut f: impl FnMut(&I) -> Result<J>) -> Result<ConstraintSet<J>> {
        let constraints = self
            .constraints
            .iter()
            .map(|c| Ok(Constraint::new(f(&c.positive)?, f(&c.negative)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ConstraintSet { constraints })
    }
}

impl<I> TryFrom<Vec<Constraint<I>>> for ConstraintSet<I> {
    type Error = Error;
    fn try_from(v: Vec<Constraint<I>>) -> Result<Self> {
        Self::new(v)
    }
}

impl<I: Clone> From<ConstraintSet<I>> for Vec<Constraint<I>> {
    fn from(s: ConstraintSet<I>) -> Self {
        s.constraints
    }
}

/// Per-channel spatial mean of a `3 × H × W` image.
pub fn phi_channel_mean<'t, T: Real>(image: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(invalid(format!("expected a 3×H×W image, got {s:?}")));
    }
    Ok(image
        .channel_sum()?
        .scale(T::one() / T::lit((s[1] * s[2]) as f64))?)
}

/// Per-channel means over a `grid × grid` partition, cells in row-major
/// order with the three channel values of each cell adjacent.
pub fn phi_patch_mean<'t, T: Real>(image: Var<'t, T>, grid: usize) -> Result<Var<'t, T>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(invalid(format!("expected a 3×H×W image, got {s:?}")));
    }
    if grid == 0 || s[1] % grid != 0 || s[2] % grid != 0 {
        return Err(invalid(format!("{}×{} image not divisible by grid {grid}", s[1], s[2])));
    }
    let (ch, cw) = (s[1] / grid, s[2] / grid);
    if ch != cw {
        return Err(invalid("patch grid requires square cells"));
    }
    let area = T::lit((ch * cw) as f64);
    let mut k = Tensor::<T>::zeros(&[3, 3, ch, cw]);
    for c in 0..3 {
        let start = (c * 3 + c) * ch * cw;
        k.data_mut()[start..start + ch * cw].fill(T::one() / area);
    }
    let geom = ConvGeom {
        c_in: 3,
        h: s[1],
        w: s[2],
        c_out: 3,
        kh: ch,
        kw: cw,
        stride: ch,
        pad: 0,
        oh: grid,
        ow: grid,
    };
    let tape = image.tape();
    let pooled = image.conv2d_geom(tape.constant(k), geom)?;
    Ok(pooled
        .reshape(&[3, grid * grid])?
        .t()?
        .reshape(&[3 * grid * grid])?)
}

/// Student-t similarity kernel `(1 + d/α)^(−(α+1)/2)`.
pub fn t_kernel(d: f64, alpha_dof: f64) -> Result<f64> {
    if d < 0.0 || d.is_nan() {
        return Err(invalid(format!("kernel distance must be non-negative, got {d}")));
    }
    if alpha_dof <= 0.0 {
        return Err(invalid("alpha_dof must be positive"));
    }
    Ok((1.0 + d / alpha_dof).powf(-(alpha_dof + 1.0) / 2.0))
}

/// Architecture of the learned triplet embedding network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletNetConfig {
    pub image_size: usize,
    pub channels: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for TripletNetConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            channels: vec![8, 16],
            embed_dim: 2,
        }
    }
}

/// Small strided conv net mapping an image to `R^embed_dim`.
#[derive(Clone, Debug)]
pub struct TripletNet {
    pub config: TripletNetConfig,
    convs: Vec<(Conv, Option<LayerNorm>)>,
    head: Dense,
}

impl TripletNet {
    pub fn build<T: Real, R: Rng>(config: TripletNetConfig, rng: &mut R) -> Result<(Self, ParamSet<T>)> {
        if config.channels.is_empty() || config.embed_dim == 0 {
            return Err(invalid("triplet net needs at least one conv layer and a positive embedding dim"));
        }
        let mut set = ParamSet::new();
        let mut convs = Vec::new();
        let mut c_in = 3;
        let mut side = config.image_size;
        for (i, &c) in config.channels.iter().enumerate() {
            let conv = Conv::new(&mut set, &format!("phi.conv{i}"), c_in, c, 3, 2, 1, rng);
            let ln = (i % 2 == 1).then(|| LayerNorm::new(&mut set, &format!("phi.ln{i}"), c));
            convs.push((conv, ln));
            c_in = c;
            side = side.div_ceil(2);
        }
        let head = Dense::new(&mut set, "phi.head", c_in * side * side, config.embed_dim, rng);
        Ok((Self { config, convs, head }, set))
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut h = x;
        for (conv, ln) in &self.convs {
            h = conv.forward(p, h)?;
            if let Some(ln) = ln {
                h = ln.forward(p, h)?;
            }
            h = h.relu()?;
        }
        Ok(self.head.forward(p, h.flatten()?)?)
    }
}

/// A trained triplet network used as φ. Parameters are frozen.
#[derive(Clone, Debug)]
pub struct LearnedPhi {
    pub net: TripletNet,
    pub params: ParamSet<f32>,
}

#[derive(Clone, Debug)]
pub enum Phi {
    ChannelMean,
    PatchMean { grid: usize },
    Learned(LearnedPhi),
}

/// Serializable description of a semantic space (learned weights live in a checkpoint).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PhiSpec {
    ChannelMean,
    PatchMean { grid: usize },
    Learned { net: TripletNetConfig },
}

/// A differentiable map φ plus the metric and kernel used to compare its outputs.
#[derive(Clone, Debug)]
pub struct SemanticSpace {
    pub phi: Phi,
    pub metric: MetricKind,
    pub alpha_dof: f64,
}

impl SemanticSpace {
    pub fn new(phi: Phi, metric: MetricKind, alpha_dof: f64) -> Result<Self> {
        if !(alpha_dof > 0.0 && alpha_dof.is_finite()) {
            return Err(invalid(format!("alpha_dof must be positive, got {alpha_dof}")));
        }
        Ok(Self {
            phi,
            metric,
            alpha_dof,
        })
    }

    /// Channel-mean φ, squared Euclidean distance, α = 1.
    pub fn channel_mean() -> Self {
        Self {
            phi: Phi::ChannelMean,
            metric: MetricKind::SquaredEuclidean,
            alpha_dof: 1.0,
        }
    }

    pub fn spec(&self) -> PhiSpec {
        match &self.phi {
            Phi::ChannelMean => PhiSpec::ChannelMean,
            Phi::PatchMean { grid } => PhiSpec::PatchMean { grid: *grid },
            Phi::Learned(l) => PhiSpec::Learned {
                net: l.net.config.clone(),
            },
        }
    }

    /// Short identifier used in session logs.
    pub fn id(&self) -> String {
        match &self.phi {
            Phi::ChannelMean => "channel_mean".into(),
            Phi::PatchMean { grid } => format!("patch_mean_{grid}"),
            Phi::Learned(l) => format!("learned_{}d", l.net.config.embed_dim),
        }
    }

    pub fn embed<'t, T: Real>(&self, image: Var<'t, T>) -> Result<Var<'t, T>> {
        match &self.phi {
            Phi::ChannelMean => phi_channel_mean(image),
            Phi::PatchMean { grid } => phi_patch_mean(image, *grid),
            Phi::Learned(l) => {
                let params = l.params.cast::<T>();
                let bound = params.bind(image.tape(), false);
                l.net.forward(&bound, image)
            }
        }
    }

    /// φ of a concrete image, without keeping a graph.
    pub fn embed_value<T: Real>(&self, image: &Tensor<T>) -> Result<Vec<f64>> {
        let tape = Tape::<T>::new();
        let out = tape.no_grad(|| self.embed(tape.constant(image.clone())))?;
        Ok(out.value().to_f64_vec())
    }

    pub fn distance<'t, T: Real>(&self, a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
        if a.shape() != b.shape() {
            return Err(invalid(format!("embedding dims differ: {:?} vs {:?}", a.shape(), b.shape())));
        }
        let diff = a.sub(b)?;
        let sq = diff.dot(diff)?;
        Ok(match self.metric {
            MetricKind::SquaredEuclidean => sq,
            MetricKind::Euclidean => sq.sqrt()?,
        })
    }

    pub fn distance_value(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        if a.len() != b.len() {
            return Err(invalid(format!("embedding dims differ: {} vs {}", a.len(), b.len())));
        }
        let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        Ok(match self.metric {
            MetricKind::SquaredEuclidean => sq,
            MetricKind::Euclidean => sq.sqrt(),
        })
    }

    fn kernel<'t, T: Real>(&self, d: Var<'t, T>) -> Result<Var<'t, T>> {
        let a = self.alpha_dof;
        Ok(d
            .scale(T::lit(1.0 / a))?
            .add_scalar(T::one())?
            .powf(T::lit(-(a + 1.0) / 2.0))?)
    }

    /// `k(d(a,b)) / (k(d(a,b)) + k(d(a,c)))`: how strongly `a` sits closer to `b` than to `c`.
    pub fn p_s<'t, T: Real>(&self, a: Var<'t, T>, b: Var<'t, T>, c: Var<'t, T>) -> Result<Var<'t, T>> {
        let kb = self.kernel(self.distance(a, b)?)?;
        let kc = self.kernel(self.distance(a, c)?)?;
        Ok(kb.div(kb.add(kc)?)?)
    }

    pub fn p_s_value(&self, a: &[f64], b: &[f64], c: &[f64]) -> Result<f64> {
        let kb = t_kernel(self.distance_value(a, b)?, self.alpha_dof)?;
        let kc = t_kernel(self.distance_value(a, c)?, self.alpha_dof)?;
        Ok(kb / (kb + kc))
    }

    /// Strict satisfaction test on embeddings; ties are violations.
    pub fn satisfies(&self, x: &[f64], positive: &[f64], negative: &[f64]) -> Result<bool> {
        Ok(self.distance_value(x, positive)? < self.distance_value(x, negative)?)
    }

    /// Strict satisfaction test on images.
    pub fn satisfies_image<T: Real>(
        &self,
        x: &Tensor<T>,
        c: &Constraint<&Tensor<T>>,
    ) -> Result<bool> {
        let e = self.embed_value(x)?;
        self.satisfies(&e, &self.embed_value(c.positive)?, &self.embed_value(c.negative)?)
    }

    /// Negated mean t-STE probability over constraints given as φ-embeddings.
    /// Lies in `(−1, 0)`; decreasing it pulls `x_hat` toward the positives.
    pub fn constraint_critic_loss<'t, T: Real>(
        &self,
        x_hat: Var<'t, T>,
        targets: &[Constraint<Vec<f64>>],
    ) -> Result<Var<'t, T>> {
        if targets.is_empty() {
            return Err(Error::EmptyConstraintSet);
        }
        let tape = x_hat.tape();
        let e = self.embed(x_hat)?;
        let mut total: Option<Var<'t, T>> = None;
        for c in targets {
            let pos = tape.constant(Tensor::from_f64(&[c.positive.len()], &c.positive)?);
            let neg = tape.constant(Tensor::from_f64(&[c.negative.len()], &c.negative)?);
            let p = self.p_s(e, pos, neg)?;
            total = Some(match total {
                Some(t) => t.add(p)?,
                None => p,
            });
        }
        let total = total.expect("non-empty targets");
        Ok(total.scale(T::lit(-1.0 / targets.len() as f64))?)
    }

    /// Embeds both images of every constraint.
    pub fn embed_constraints<T: Real>(
        &self,
        cs: &[Constraint<&Tensor<T>>],
    ) -> Result<Vec<Constraint<Vec<f64>>>> {
        cs.iter()
            .map(|c| {
                Ok(Constraint::new(
                    self.embed_value(c.positive)?,
                    self.embed_value(c.negative)?,
                ))
            })
            .collect()
    }
}

/// `(anchor, positive, negative)` image indices: anchor is more similar to positive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Bin-based triplets: anchor and positive share a dominant color bin, the
/// negative comes from another bin. Bins are visited round-robin; bins with
/// fewer than two members are skipped.
///
/// `bins[i]` is the bin of item `ids[i]`; returned triplets carry ids.
pub fn sample_color_triplets<R: Rng>(
    ids: &[usize],
    bins: &[usize],
    n: usize,
    rng: &mut R,
) -> Result<Vec<Triplet>> {
    if ids.len() != bins.len() {
        return Err(invalid("ids and bins differ in length"));
    }
    let n_bins = bins.iter().copied().max().map_or(0, |b| b + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_bins];
    for (&id, &b) in ids.iter().zip(bins) {
        members[b].push(id);
    }
    let eligible: Vec<usize> = (0..n_bins)
        .filter(|&b| members[b].len() >= 2 && members[b].len() < ids.len())
        .collect();
    if eligible.is_empty() {
        return Err(Error::Sampling("no bin has two members and an outside image".into()));
    }
    let mut out = Vec::with_capacity(n);
    'outer: loop {
        for &b in &eligible {
            if out.len() == n {
                break 'outer;
            }
            let pair: Vec<_> = members[b].choose_multiple(rng, 2).copied().collect();
            let negative = loop {
                let i = rng.random_range(0..ids.len());
                if bins[i] != b {
                    break ids[i];
                }
            };
            out.push(Triplet {
                anchor: pair[0],
                positive: pair[1],
                negative,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletTrainConfig {
    pub net: TripletNetConfig,
    pub iterations: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub alpha_dof: f64,
    pub metric: MetricKind,
    pub seed: u64,
}

impl Default for TripletTrainConfig {
    fn default() -> Self {
        Self {
            net: TripletNetConfig::default(),
            iterations: 1500,
            batch_size: 32,
            adam: AdamConfig::standard(),
            alpha_dof: 1.0,
            metric: MetricKind::SquaredEuclidean,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletReport {
    pub final_loss: f64,
    pub train_satisfaction: f64,
    pub test_satisfaction: f64,
    pub test_triplets: usize,
}

/// Fraction of triplets whose anchor embeds closer to the positive than to the negative.
pub fn triplet_satisfaction(
    space: &SemanticSpace,
    images: &[Tensor<f32>],
    triplets: &[Triplet],
) -> Result<f64> {
    if triplets.is_empty() {
        return Err(invalid("no triplets to score"));
    }
    let mut cache: Vec<Option<Vec<f64>>> = vec![None; images.len()];
    let mut emb = |i: usize| -> Result<Vec<f64>> {
        if cache[i].is_none() {
            cache[i] = Some(space.embed_value(&images[i])?);
        }
        Ok(cache[i].clone().expect("filled"))
    };
    let mut ok = 0usize;
    for t in triplets {
        let (a, b, c) = (emb(t.anchor)?, emb(t.positive)?, emb(t.negative)?);
        if space.satisfies(&a, &b, &c)? {
            ok += 1;
        }
    }
    Ok(ok as f64 / triplets.len() as f64)
}

/// Trains a triplet network φ by maximizing `Σ log p_S(f(A), f(B), f(C))`.
pub fn train_triplet_phi(
    images: &[Tensor<f32>],
    train: &[Triplet],
    test: &[Triplet],
    cfg: &TripletTrainConfig,
) -> Result<(SemanticSpace, TripletReport)> {
    if train.is_empty() || test.is_empty() {
        return Err(invalid("triplet source is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(invalid("batch size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (net, mut params) = TripletNet::build::<f32, _>(cfg.net.clone(), &mut rng)?;
    let probe = SemanticSpace::new(Phi::ChannelMean, cfg.metric, cfg.alpha_dof)?;
    let mut adam = AdamState::new(&params);
    let mut final_loss = f64::NAN;
    for _ in 0..cfg.iterations {
        let tape = Tape::<f32>::new();
        let bound = params.bind(&tape, true);
        let mut total: Option<Var<f32>> = None;
        for _ in 0..cfg.batch_size {
            let t = train[rng.random_range(0..train.len())];
            let f = |i: usize| net.forward(&bound, tape.constant(images[i].clone()));
            let (a, b, c) = (f(t.anchor)?, f(t.positive)?, f(t.negative)?);
            let nll = probe.p_s(a, b, c)?.ln()?.neg()?;
            total = Some(match total {
                Some(acc) => acc.add(nll)?,
                None => nll,
            });
        }
        let loss = total
            .expect("batch is non-empty")
            .scale(1.0 / cfg.batch_size as f32)?;
        final_loss = loss.item() as f64;
        let grads = param_grads(&tape, loss, &bound)?;
        adam.step(&cfg.adam, &mut params, &grads)?;
    }
    let space = SemanticSpace::new(
        Phi::Learned(LearnedPhi { net, params }),
        cfg.metric,
        cfg.alpha_dof,
    )?;
    let report = TripletReport {
        final_loss,
        train_satisfaction: triplet_satisfaction(&space, images, &train[..train.len().min(2000)])?,
        test_satisfaction: triplet_satisfaction(&space, images, test)?,
        test_triplets: test.len(),
    };
    Ok((space, report))
}
