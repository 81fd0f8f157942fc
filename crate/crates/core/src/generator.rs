//! Set-conditioned generator: a shared read network encodes each constraint,
//! an attention-based recurrent process network pools the encodings into a
//! latent code, and a transpose-convolution write network renders the image.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::nn::{Bound, Conv, Dense, LayerNorm, LstmCell, ParamSet};
use crate::semantic::Constraint;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub image_size: usize,
    pub n_z: usize,
    /// Width of constraint encodings and of the recurrent state.
    pub h: usize,
    /// Process iterations.
    pub p: usize,
    /// Output channels of the stride-2 read convolutions.
    pub read_channels: Vec<usize>,
    /// Feature-map channels of the write network, starting at 4×4; one entry
    /// per resolution, so `log2(image_size / 4) + 1` entries.
    pub write_channels: Vec<usize>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            n_z: 32,
            h: 32,
            p: 5,
            read_channels: vec![16, 32, 32],
            write_channels: vec![64, 32, 16],
        }
    }
}

impl GenConfig {
    /// 8×8 images, h = 8, p = 2: small enough for exhaustive finite differences.
    pub fn tiny() -> Self {
        Self {
            image_size: 8,
            n_z: 4,
            h: 8,
            p: 2,
            read_channels: vec![4, 4],
            write_channels: vec![6, 4],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        if s < 8 || !s.is_power_of_two() {
            return Err(invalid(format!("image size must be a power of two ≥ 8, got {s}")));
        }
        if self.p == 0 || self.h == 0 || self.n_z == 0 {
            return Err(invalid("p, h and n_z must be positive"));
        }
        if self.read_channels.is_empty() || self.read_channels.contains(&0) {
            return Err(invalid("read network needs positive channel widths"));
        }
        let ups = (s / 4).trailing_zeros() as usize;
        if self.write_channels.len() != ups + 1 || self.write_channels.contains(&0) {
            return Err(invalid(format!(
                "{s}×{s} output needs {} positive write widths, got {:?}",
                ups + 1,
                self.write_channels
            )));
        }
        Ok(())
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [3, self.image_size, self.image_size]
    }
}

fn check_image<T: Real>(x: &Var<'_, T>, side: usize) -> Result<()> {
    if x.shape() != [3, side, side] {
        return Err(invalid(format!("expected a 3×{side}×{side} image, got {:?}", x.shape())));
    }
    Ok(())
}

/// Shared per-image features followed by a pair-combining dense layer.
#[derive(Clone, Debug)]
pub struct ReadNet {
    convs: Vec<(Conv, Option<LayerNorm>)>,
    fc: Dense,
    image_size: usize,
}

impl ReadNet {
    fn new<T: Real, R: Rng>(set: &mut ParamSet<T>, cfg: &GenConfig, rng: &mut R) -> Self {
        let mut convs = Vec::new();
        let mut c_in = 3;
        let mut side = cfg.image_size;
        for (i, &c) in cfg.read_channels.iter().enumerate() {
            let conv = Conv::new(set, &format!("read.conv{i}"), c_in, c, 3, 2, 1, rng);
            let ln = (i % 2 == 1).then(|| LayerNorm::new(set, &format!("read.ln{i}"), c));
            convs.push((conv, ln));
            c_in = c;
            side = side.div_ceil(2);
        }
        let fc = Dense::new(set, "read.fc", 2 * c_in * side * side, cfg.h, rng);
        Self {
            convs,
            fc,
            image_size: cfg.image_size,
        }
    }

    fn features<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        check_image(&x, self.image_size)?;
        let mut h = x;
        for (conv, ln) in &self.convs {
            h = conv.forward(p, h)?;
            if let Some(ln) = ln {
                h = ln.forward(p, h)?;
            }
            h = h.relu()?;
        }
        Ok(h.flatten()?)
    }

    /// `tanh(W [f(positive), f(negative)] + b)`.
    pub fn forward<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        positive: Var<'t, T>,
        negative: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let tape = positive.tape();
        let joint = tape.concat(&[self.features(p, positive)?, self.features(p, negative)?])?;
        Ok(self.fc.forward(p, joint)?.tanh()?)
    }
}

/// Dense projection to a 4×4 map, stride-2 transpose convolutions up to full
/// resolution, then a 3×3 convolution to RGB with tanh.
#[derive(Clone, Debug)]
pub struct WriteNet {
    fc: Dense,
    c0: usize,
    ups: Vec<(Conv, LayerNorm)>,
    out: Conv,
    pub in_dim: usize,
}

impl WriteNet {
    pub fn new<T: Real, R: Rng>(set: &mut ParamSet<T>, in_dim: usize, cfg: &GenConfig, rng: &mut R) -> Self {
        let ch = &cfg.write_channels;
        let fc = Dense::new(set, "write.fc", in_dim, ch[0] * 16, rng);
        let ups = ch
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                (
                    Conv::new_transpose(set, &format!("write.up{i}"), w[0], w[1], 4, 2, 1, rng),
                    LayerNorm::new(set, &format!("write.ln{i}"), w[1]),
                )
            })
            .collect();
        let out = Conv::new(set, "write.out", *ch.last().expect("validated"), 3, 3, 1, 1, rng);
        Self {
            fc,
            c0: ch[0],
            ups,
            out,
            in_dim,
        }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, s: Var<'t, T>) -> Result<Var<'t, T>> {
        if s.shape() != [self.in_dim] {
            return Err(invalid(format!("write input must have length {}, got {:?}", self.in_dim, s.shape())));
        }
        let mut h = self.fc.forward(p, s)?.relu()?.reshape(&[self.c0, 4, 4])?;
        for (up, ln) in &self.ups {
            h = ln.forward(p, up.forward(p, h)?)?.relu()?;
        }
        Ok(self.out.forward(p, h)?.tanh()?)
    }
}

/// Intermediate values of the process network, for inspection.
pub struct ProcessOutput<'t, T: Real> {
    pub s: Var<'t, T>,
    /// Attention weights per iteration, over encodings in canonical order.
    pub attention: Vec<Var<'t, T>>,
    /// Attention readout `r_t` per iteration.
    pub reads: Vec<Var<'t, T>>,
    /// Position of each input encoding in the canonical order.
    pub order: Vec<usize>,
}

/// Lexicographic order of encoding values; `order[j]` is the input index at position `j`.
fn canonical_order<T: Real>(encodings: &[Var<'_, T>]) -> Vec<usize> {
    let values: Vec<_> = encodings.iter().map(|e| e.value()).collect();
    let mut order: Vec<usize> = (0..encodings.len()).collect();
    order.sort_by(|&a, &b| {
        let (va, vb) = (values[a].data(), values[b].data());
        va.iter()
            .zip(vb)
            .map(|(x, y)| x.as_f64().total_cmp(&y.as_f64()))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GenConfig,
    pub read: ReadNet,
    pub lstm: LstmCell,
    pub fc_s: Dense,
    pub write: WriteNet,
}

impl Generator {
    pub fn build<T: Real, R: Rng>(config: GenConfig, rng: &mut R) -> Result<(Self, ParamSet<T>)> {
        config.validate()?;
        let mut set = ParamSet::new();
        let read = ReadNet::new(&mut set, &config, rng);
        let lstm = LstmCell::new(&mut set, "lstm", config.h, 2 * config.h, config.n_z, rng);
        let fc_s = Dense::new(&mut set, "fc_s", 2 * config.h, config.n_z, rng);
        let write = WriteNet::new(&mut set, config.n_z, &config, rng);
        Ok((
            Self {
                config,
                read,
                lstm,
                fc_s,
                write,
            },
            set,
        ))
    }

    pub fn read_constraint<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        c: Constraint<Var<'t, T>>,
    ) -> Result<Var<'t, T>> {
        self.read.forward(p, c.positive, c.negative)
    }

    /// Pools encodings with `p` rounds of content-based attention. Encodings
    /// are stacked in a canonical value order first, so the result does not
    /// depend on the order they are given in.
    pub fn process<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        encodings: &[Var<'t, T>],
        z: Var<'t, T>,
    ) -> Result<ProcessOutput<'t, T>> {
        let Some(first) = encodings.first() else {
            return Err(Error::EmptyConstraintSet);
        };
        let h = self.config.h;
        if let Some(bad) = encodings.iter().find(|e| e.shape() != [h]) {
            return Err(invalid(format!("encodings must have length {h}, got {:?}", bad.shape())));
        }
        if z.shape() != [self.config.n_z] {
            return Err(invalid(format!("z must have length {}, got {:?}", self.config.n_z, z.shape())));
        }
        let tape = first.tape();
        let order = canonical_order(encodings);
        let sorted: Vec<_> = order.iter().map(|&i| encodings[i]).collect();
        let n = sorted.len();
        let stack = tape.concat(&sorted)?.reshape(&[n, h])?;
        let mut q_star = tape.constant(Tensor::zeros(&[2 * h]));
        let mut cell = tape.constant(Tensor::zeros(&[h]));
        let mut attention = Vec::with_capacity(self.config.p);
        let mut reads = Vec::with_capacity(self.config.p);
        for _ in 0..self.config.p {
            let (q, c) = self.lstm.forward(p, z, q_star, cell)?;
            cell = c;
            let e = stack.matmul(q.reshape(&[h, 1])?)?.reshape(&[n])?;
            let a = e.softmax()?;
            let r = a.reshape(&[1, n])?.matmul(stack)?.reshape(&[h])?;
            q_star = tape.concat(&[q, r])?;
            attention.push(a);
            reads.push(r);
        }
        let s = self.fc_s.forward(p, q_star)?;
        Ok(ProcessOutput {
            s,
            attention,
            reads,
            order,
        })
    }

    pub fn write<'t, T: Real>(&self, p: &Bound<'t, T>, s: Var<'t, T>) -> Result<Var<'t, T>> {
        self.write.forward(p, s)
    }

    /// Full forward pass on the tape.
    pub fn forward<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        cs: &[Constraint<Var<'t, T>>],
        z: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        if cs.is_empty() {
            return Err(Error::EmptyConstraintSet);
        }
        let encodings = cs
            .iter()
            .map(|c| self.read_constraint(p, *c))
            .collect::<Result<Vec<_>>>()?;
        let s = self.process(p, &encodings, z)?.s;
        self.write(p, s)
    }

    /// Generates one image without recording gradients.
    pub fn generate<T: Real>(
        &self,
        params: &ParamSet<T>,
        cs: &[Constraint<&Tensor<T>>],
        z: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let tape = Tape::new();
        tape.no_grad(|| {
            let p = params.bind(&tape, false);
            let cs: Vec<_> = cs
                .iter()
                .map(|c| Constraint::new(tape.constant(c.positive.clone()), tape.constant(c.negative.clone())))
                .collect();
            let out = self.forward(&p, &cs, tape.constant(z.clone()))?;
            Ok((*out.value()).clone())
        })
    }
}

/// Unconditional generator: the write network fed directly by `z`.
#[derive(Clone, Debug)]
pub struct PlainGenerator {
    pub config: GenConfig,
    pub write: WriteNet,
}

impl PlainGenerator {
    /// Parameter names coincide with the write half of [`Generator`].
    pub fn build<T: Real, R: Rng>(config: GenConfig, rng: &mut R) -> Result<(Self, ParamSet<T>)> {
        config.validate()?;
        let mut set = ParamSet::new();
        let write = WriteNet::new(&mut set, config.n_z, &config, rng);
        Ok((Self { config, write }, set))
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, z: Var<'t, T>) -> Result<Var<'t, T>> {
        self.write.forward(p, z)
    }

    pub fn generate<T: Real>(&self, params: &ParamSet<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        tape.no_grad(|| {
            let p = params.bind(&tape, false);
            Ok((*self.forward(&p, tape.constant(z.clone()))?.value()).clone())
        })
    }
}

/// Copies every tensor of `from` whose name and shape match one in `to`.
/// Returns the number of tensors copied.
pub fn copy_matching<T: Real>(from: &ParamSet<T>, to: &mut ParamSet<T>) -> usize {
    let mut n = 0;
    for (name, t) in from.names().iter().zip(from.tensors()) {
        if let Some(id) = to.find(name) {
            if to.get(id).shape() == t.shape() {
                *to.get_mut(id) = t.clone();
                n += 1;
            }
        }
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(GenConfig::default().validate().is_ok());
        assert!(GenConfig::tiny().validate().is_ok());
        let mut c = GenConfig::default();
        c.image_size = 12;
        assert!(c.validate().is_err());
        c = GenConfig::default();
        c.write_channels.pop();
        assert!(c.validate().is_err());
        c = GenConfig::default();
        c.p = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn output_shape_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (g, params) = Generator::build::<f64, _>(GenConfig::default(), &mut rng).unwrap();
        let imgs: Vec<_> = (0..4).map(|_| rand_t(&[3, 16, 16], &mut rng)).collect();
        let cs = [Constraint::new(&imgs[0], &imgs[1]), Constraint::new(&imgs[2], &imgs[3])];
        let z = rand_t(&[32], &mut rng);
        let out = g.generate(&params, &cs, &z).unwrap();
        assert_eq!(out.shape(), &[3, 16, 16]);
        assert!(out.data().iter().all(|v| v.abs() < 1.0));
        assert_eq!(out, g.generate(&params, &cs, &z).unwrap());
        let z2 = rand_t(&[32], &mut rng);
        assert_ne!(out, g.generate(&params, &cs, &z2).unwrap());
        assert!(matches!(g.generate(&params, &[], &z), Err(Error::EmptyConstraintSet)));
    }

    #[test]
    fn single_encoding_gets_full_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (g, params) = Generator::build::<f64, _>(GenConfig::tiny(), &mut rng).unwrap();
        let tape = Tape::new();
        let p = params.bind(&tape, false);
        let c = tape.constant(rand_t(&[8], &mut rng).map(|v| v * 0.9));
        let z = tape.constant(rand_t(&[4], &mut rng));
        let out = g.process(&p, &[c], z).unwrap();
        for (a, r) in out.attention.iter().zip(&out.reads) {
            assert_eq!(a.value().data(), &[1.0]);
            assert_eq!(r.value().data(), c.value().data());
        }
        let twin = g.process(&p, &[c, c], z).unwrap();
        for (a, r) in twin.attention.iter().zip(&twin.reads) {
            assert_eq!(a.value().data(), &[0.5, 0.5]);
            assert!(r.value().max_abs_diff(&c.value()) < 1e-15);
        }
    }

    #[test]
    fn permutations_are_bitwise_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (g, params) = Generator::build::<f32, _>(GenConfig::tiny(), &mut rng).unwrap();
        let tape = Tape::<f32>::new();
        let p = params.bind(&tape, false);
        let enc: Vec<_> = (0..7)
            .map(|_| tape.constant(rand_t(&[8], &mut rng).cast::<f32>()))
            .collect();
        let z = tape.constant(rand_t(&[4], &mut rng).cast::<f32>());
        let base = g.process(&p, &enc, z).unwrap();
        for a in &base.attention {
            let s: f64 = a.value().data().iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(a.value().data().iter().all(|&v| v > 0.0));
        }
        let mut idx: Vec<usize> = (0..7).collect();
        for _ in 0..50 {
            rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
            let perm: Vec<_> = idx.iter().map(|&i| enc[i]).collect();
            let s = g.process(&p, &perm, z).unwrap().s;
            assert_eq!(s.value().data(), base.s.value().data());
        }
    }

    #[test]
    fn swapping_roles_changes_encoding() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (g, params) = Generator::build::<f64, _>(GenConfig::tiny(), &mut rng).unwrap();
        let tape = Tape::new();
        let p = params.bind(&tape, false);
        let a = tape.constant(rand_t(&[3, 8, 8], &mut rng));
        let b = tape.constant(rand_t(&[3, 8, 8], &mut rng));
        let e1 = g.read_constraint(&p, Constraint::new(a, b)).unwrap().value();
        let e2 = g.read_constraint(&p, Constraint::new(b, a)).unwrap().value();
        assert!(e1.max_abs_diff(&e2) > 1e-6);
        assert!(e1.data().iter().all(|v| v.abs() < 1.0));
        let e3 = g.read_constraint(&p, Constraint::new(a, b)).unwrap().value();
        assert_eq!(e1, e3);
        let wrong = tape.constant(rand_t(&[3, 4, 4], &mut rng));
        assert!(g.read_constraint(&p, Constraint::new(a, wrong)).is_err());
    }

    #[test]
    fn warm_start_names_line_up() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (_, plain) = PlainGenerator::build::<f32, _>(GenConfig::default(), &mut rng).unwrap();
        let (_, mut full) = Generator::build::<f32, _>(GenConfig::default(), &mut rng).unwrap();
        let n = copy_matching(&plain, &mut full);
        assert_eq!(n, plain.len());
        for (name, t) in plain.names().iter().zip(plain.tensors()) {
            assert_eq!(full.get(full.find(name).unwrap()), t);
        }
    }
}
