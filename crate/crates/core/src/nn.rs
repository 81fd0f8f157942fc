//! Parameter storage, layers, and the Adam optimizer.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::tensor::{Real, Result, Tensor, TensorError};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Zero-mean normal weights with variance `2 / fan_in`.
    pub fn add_he<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: f64,
        rng: &mut R,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let data = (0..n).map(|_| T::lit(normal.sample(rng))).collect();
        self.add(name, Tensor::new(shape, data).expect("shape matches data"))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Places every tensor on `tape`, as trainable leaves or as constants.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), trainable))
                .collect(),
        }
    }
}

/// A [`ParamSet`] placed on a tape.
pub struct Bound<'t, T: Real> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Real> Bound<'t, T> {
    pub fn get(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }
}

/// Gradient of `loss` with respect to every tensor of a bound parameter set.
pub fn param_grads<'t, T: Real>(
    tape: &'t Tape<T>,
    loss: Var<'t, T>,
    bound: &Bound<'t, T>,
) -> Result<Vec<Tensor<T>>> {
    Ok(tape
        .grad(loss, bound.vars(), false)?
        .into_iter()
        .map(|g| (*g.value()).clone())
        .collect())
}

/// Pointwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply<'t, T: Real>(self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => x.sigmoid(),
            Activation::Identity => Ok(x),
        }
    }
}

/// Fully connected layer `W·x + b` on vectors.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new<T: Real, R: Rng>(
        set: &mut ParamSet<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w = set.add_he(format!("{name}.w"), &[out_dim, in_dim], in_dim as f64, rng);
        let b = set.add(format!("{name}.b"), Tensor::zeros(&[out_dim]));
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let x = x.reshape(&[self.in_dim, 1])?;
        p.get(self.w)
            .matmul(x)?
            .reshape(&[self.out_dim])?
            .add(p.get(self.b))
    }
}

/// Convolution (or transpose convolution) with a per-channel bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub k: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub transpose: bool,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        set: &mut ParamSet<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (c_in * kernel * kernel) as f64;
        let k = set.add_he(format!("{name}.k"), &[c_out, c_in, kernel, kernel], fan_in, rng);
        let b = set.add(format!("{name}.b"), Tensor::zeros(&[c_out]));
        Self {
            k,
            b,
            stride,
            pad,
            transpose: false,
        }
    }

    /// Upsampling layer; kernels are stored `c_in × c_out × k × k`.
    #[allow(clippy::too_many_arguments)]
    pub fn new_transpose<T: Real, R: Rng>(
        set: &mut ParamSet<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (c_in * kernel * kernel) as f64 / (stride * stride) as f64;
        let k = set.add_he(format!("{name}.k"), &[c_in, c_out, kernel, kernel], fan_in, rng);
        let b = set.add(format!("{name}.b"), Tensor::zeros(&[c_out]));
        Self {
            k,
            b,
            stride,
            pad,
            transpose: true,
        }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = if self.transpose {
            x.conv2d_transpose(p.get(self.k), self.stride, self.pad)?
        } else {
            x.conv2d(p.get(self.k), self.stride, self.pad)?
        };
        let s = y.shape();
        y.add(p.get(self.b).channel_broadcast(s[1], s[2])?)
    }
}

/// Normalizes one sample over all of its features, then applies `gain·x̂ + bias`.
///
/// For a `C × H × W` input, gain and bias have length `C` and are shared
/// across space; for a vector input they match its length.
pub fn layer_norm<'t, T: Real>(
    x: Var<'t, T>,
    gain: Var<'t, T>,
    bias: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let centered = x.sub(x.mean()?)?;
    let var = centered.mul(centered)?.mean()?;
    let inv_std = var.add_scalar(T::lit(LAYER_NORM_EPS))?.powf(T::lit(-0.5))?;
    let normed = centered.mul(inv_std)?;
    let shape = x.shape();
    let (g, b) = if shape.len() == 3 {
        (
            gain.channel_broadcast(shape[1], shape[2])?,
            bias.channel_broadcast(shape[1], shape[2])?,
        )
    } else {
        (gain, bias)
    };
    normed.mul(g)?.add(b)
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(set: &mut ParamSet<T>, name: &str, features: usize) -> Self {
        Self {
            gain: set.add(format!("{name}.gain"), Tensor::ones(&[features])),
            bias: set.add(format!("{name}.bias"), Tensor::zeros(&[features])),
        }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        layer_norm(x, p.get(self.gain), p.get(self.bias))
    }
}

/// Standard LSTM cell whose hidden input is the previous attention-augmented
/// state `q*` and whose external input is the noise vector.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_o: ParamId,
    pub w_f: ParamId,
    pub w_i: ParamId,
    pub w_h: ParamId,
    pub b_o: ParamId,
    pub b_f: ParamId,
    pub b_i: ParamId,
    pub b_h: ParamId,
    pub hidden: usize,
    pub input: usize,
}

impl LstmCell {
    /// `state_dim` is the length of `q*` (hidden plus read width); `input_dim` is the noise length.
    pub fn new<T: Real, R: Rng>(
        set: &mut ParamSet<T>,
        name: &str,
        hidden: usize,
        state_dim: usize,
        input_dim: usize,
        rng: &mut R,
    ) -> Self {
        let cols = state_dim + input_dim;
        let mut w = |gate: &str, rng: &mut R| {
            set.add_he(format!("{name}.w_{gate}"), &[hidden, cols], cols as f64, rng)
        };
        let w_o = w("o", rng);
        let w_f = w("f", rng);
        let w_i = w("i", rng);
        let w_h = w("h", rng);
        let b_o = set.add(format!("{name}.b_o"), Tensor::zeros(&[hidden]));
        let b_f = set.add(format!("{name}.b_f"), Tensor::ones(&[hidden]));
        let b_i = set.add(format!("{name}.b_i"), Tensor::zeros(&[hidden]));
        let b_h = set.add(format!("{name}.b_h"), Tensor::zeros(&[hidden]));
        Self {
            w_o,
            w_f,
            w_i,
            w_h,
            b_o,
            b_f,
            b_i,
            b_h,
            hidden,
            input: cols,
        }
    }

    /// One step. Returns `(q_t, cell_state_t)`.
    pub fn forward<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        z: Var<'t, T>,
        q_star_prev: Var<'t, T>,
        cell_prev: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let tape = z.tape();
        let x = tape.concat(&[q_star_prev, z])?;
        if x.shape() != [self.input] || cell_prev.shape() != [self.hidden] {
            return Err(TensorError::ShapeMismatch {
                op: "lstm_cell",
                lhs: x.shape(),
                rhs: vec![self.input],
            });
        }
        let x = x.reshape(&[self.input, 1])?;
        let gate = |w: ParamId, b: ParamId| -> Result<Var<'t, T>> {
            p.get(w).matmul(x)?.reshape(&[self.hidden])?.add(p.get(b))
        };
        let o = gate(self.w_o, self.b_o)?.sigmoid()?;
        let f = gate(self.w_f, self.b_f)?.sigmoid()?;
        let i = gate(self.w_i, self.b_i)?.sigmoid()?;
        let candidate = gate(self.w_h, self.b_h)?.tanh()?;
        let cell = f.mul(cell_prev)?.add(i.mul(candidate)?)?;
        let q = o.mul(cell.tanh()?)?;
        Ok((q, cell))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    /// Learning rate and betas used for the adversarial updates.
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.0,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    /// The usual `(1e-3, 0.9, 0.999)` settings.
    pub fn standard() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(TensorError::Invalid {
                op: "adam",
                detail: format!("invalid hyperparameters {self:?}"),
            })
        }
    }
}

/// First and second moment accumulators, mirroring a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros: Vec<_> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// Bias-corrected Adam update of every parameter.
    pub fn step(
        &mut self,
        cfg: &AdamConfig,
        params: &mut ParamSet<T>,
        grads: &[Tensor<T>],
    ) -> Result<()> {
        cfg.validate()?;
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(TensorError::Invalid {
                op: "adam",
                detail: format!(
                    "{} params, {} grads, {} moments",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            });
        }
        for ((p, g), m) in params.tensors().iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.t += 1;
        let b1 = T::lit(cfg.beta1);
        let b2 = T::lit(cfg.beta2);
        let c1 = T::lit(1.0 - cfg.beta1.powi(self.t as i32));
        let c2 = T::lit(1.0 - cfg.beta2.powi(self.t as i32));
        let lr = T::lit(cfg.lr);
        let eps = T::lit(cfg.eps);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
