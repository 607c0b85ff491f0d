//! Parameter-carrying layer descriptors. Each holds [`ParamId`]s into a
//! [`ParamStore`] and records its forward pass on a [`Graph`].

use rand::Rng;

use crate::tensor::{Bindings, Graph, ParamId, ParamStore, Real, Tensor, TensorError, Var};

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-normal initialised convolution with zero bias.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        (cin, cout, k): (usize, usize, usize),
        stride: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(&[cout, cin, k, k], std, rng),
        );
        Self::from_weight(store, name, weight, stride, k / 2, bias)
    }

    /// Wraps an already registered `[Cout, Cin, K, K]` weight.
    pub fn from_weight<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        weight: ParamId,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let cout = store.get(weight).shape()[0];
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bindings,
        x: Var,
    ) -> Result<Var, TensorError> {
        g.conv2d(
            x,
            p[self.weight],
            self.bias.map(|b| p[b]),
            self.stride,
            self.pad,
        )
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn from_weight<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        weight: ParamId,
        bias: bool,
    ) -> Self {
        let out = store.get(weight).shape()[0];
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out])));
        Self { weight, bias }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bindings,
        x: Var,
    ) -> Result<Var, TensorError> {
        g.linear(x, p[self.weight], self.bias.map(|b| p[b]))
    }
}

/// `[n, n]` identity plus Gaussian noise of the given deviation.
pub fn noisy_identity<T: Real>(n: usize, noise: f64, rng: &mut impl Rng) -> Tensor<T> {
    let noise = Tensor::<T>::randn(&[n, n], noise, rng);
    Tensor::from_fn(&[n, n], |i| {
        let eye = if i / n == i % n { T::one() } else { T::zero() };
        eye + noise.data()[i]
    })
}
