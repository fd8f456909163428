//! Parameterized layers: a spec plus handles into a [`ParamStore`].

use rand::Rng;

use crate::conv::ConvSpec;
use crate::error::{CvsError, Result};
use crate::params::{kaiming_normal, uniform_fan_in, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Shape, Tensor4D};

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    /// Kaiming-normal weights, zero bias.
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: ConvSpec,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let fan_in = spec.in_per_group() * spec.kernel.0 * spec.kernel.1;
        let weight = store.add(format!("{name}.weight"), kaiming_normal(spec.weight_shape(), fan_in, rng));
        let bias = spec
            .has_bias
            .then(|| store.add_no_decay(format!("{name}.bias"), Tensor4D::zeros(spec.bias_shape())));
        Ok(Conv2d { spec, weight, bias })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.conv2d(x, w, b, self.spec)
    }
}

/// Linear map over spatial tokens (see [`Tape::token_linear`]).
#[derive(Clone, Debug)]
pub struct TokenLinear {
    pub tokens_in: usize,
    pub out_hw: (usize, usize),
    pub weight: ParamId,
    pub bias: ParamId,
}

impl TokenLinear {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        tokens_in: usize,
        out_hw: (usize, usize),
        rng: &mut R,
    ) -> Self {
        let tokens_out = out_hw.0 * out_hw.1;
        let weight =
            store.add(format!("{name}.weight"), uniform_fan_in(Shape::new(tokens_out, tokens_in, 1, 1), tokens_in, rng));
        let bias = store.add_no_decay(format!("{name}.bias"), Tensor4D::zeros(Shape::new(1, tokens_out, 1, 1)));
        TokenLinear { tokens_in, out_hw, weight, bias }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.token_linear(x, w, Some(b), self.out_hw.0, self.out_hw.1)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        let shape = Shape::new(out_features, in_features, 1, 1);
        let weight = store.add(format!("{name}.weight"), uniform_fan_in(shape, in_features, rng));
        let bias = store.add_no_decay(format!("{name}.bias"), Tensor4D::zeros(Shape::new(1, out_features, 1, 1)));
        Linear { in_features, out_features, weight, bias }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, Some(b))
    }
}

/// Channel-wise layer norm with affine gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let shape = Shape::new(1, channels, 1, 1);
        let gamma = store.add_no_decay(format!("{name}.gamma"), Tensor4D::full(shape, T::one()));
        let beta = store.add_no_decay(format!("{name}.beta"), Tensor4D::zeros(shape));
        LayerNorm { channels, gamma, beta }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        if tape.shape(x).c != self.channels {
            return Err(CvsError::shape("layer_norm", format!("{} channels, expected {}", tape.shape(x).c, self.channels)));
        }
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm_channels(x, g, b, Self::EPS)
    }
}
