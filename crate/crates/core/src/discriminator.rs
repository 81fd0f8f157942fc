//! Critic network `d_W`: stride-2 convolutions and a final dense layer to an
//! unbounded scalar score.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Result};
use crate::nn::{Bound, Conv, Dense, LayerNorm, ParamSet};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscConfig {
    pub image_size: usize,
    pub channels: Vec<usize>,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            channels: vec![16, 32, 64],
        }
    }
}

impl DiscConfig {
    pub fn tiny() -> Self {
        Self {
            image_size: 8,
            channels: vec![4, 6],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub config: DiscConfig,
    convs: Vec<(Conv, Option<LayerNorm>)>,
    head: Dense,
}

impl Discriminator {
    pub fn build<T: Real, R: Rng>(config: DiscConfig, rng: &mut R) -> Result<(Self, ParamSet<T>)> {
        if config.image_size == 0 || config.channels.is_empty() || config.channels.contains(&0) {
            return Err(invalid("discriminator needs a positive image size and channel widths"));
        }
        let mut set = ParamSet::new();
        let mut convs = Vec::new();
        let mut c_in = 3;
        let mut side = config.image_size;
        for (i, &c) in config.channels.iter().enumerate() {
            let conv = Conv::new(&mut set, &format!("disc.conv{i}"), c_in, c, 3, 2, 1, rng);
            let ln = (i % 2 == 1).then(|| LayerNorm::new(&mut set, &format!("disc.ln{i}"), c));
            convs.push((conv, ln));
            c_in = c;
            side = side.div_ceil(2);
        }
        let head = Dense::new(&mut set, "disc.head", c_in * side * side, 1, rng);
        Ok((Self { config, convs, head }, set))
    }

    /// Scalar score; larger means "more like the data".
    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let side = self.config.image_size;
        if x.shape() != [3, side, side] {
            return Err(invalid(format!("expected a 3×{side}×{side} image, got {:?}", x.shape())));
        }
        let mut h = x;
        for (conv, ln) in &self.convs {
            h = conv.forward(p, h)?;
            if let Some(ln) = ln {
                h = ln.forward(p, h)?;
            }
            h = h.relu()?;
        }
        Ok(self.head.forward(p, h.flatten()?)?.reshape(&[])?)
    }

    pub fn score<T: Real>(&self, params: &ParamSet<T>, x: &Tensor<T>) -> Result<T> {
        let tape = Tape::new();
        tape.no_grad(|| {
            let p = params.bind(&tape, false);
            Ok(self.forward(&p, tape.constant(x.clone()))?.item())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_score_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (d, mut p) = Discriminator::build::<f64, _>(DiscConfig::default(), &mut rng).unwrap();
        for t in p.tensors_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let x = Tensor::full(&[3, 16, 16], 0.3);
        assert_eq!(d.score(&p, &x).unwrap(), 0.0);
    }

    #[test]
    fn input_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (d, p) = Discriminator::build::<f64, _>(DiscConfig::tiny(), &mut rng).unwrap();
        let x = Tensor::new(&[3, 8, 8], (0..192).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let s1 = d.score(&p, &x).unwrap();
        assert_eq!(s1, d.score(&p, &x).unwrap());
        let err = grad_check(
            |tape, x| {
                let b = p.bind(tape, false);
                d.forward(&b, x)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}
