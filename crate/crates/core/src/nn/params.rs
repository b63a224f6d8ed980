use crate::error::Result;
use crate::nn::conv::{conv, ConvSpec};
use crate::tensor::rng::SeededRng;
use crate::tensor::{Scalar, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// An ordered, named collection of trainable tensors.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name `{name}`");
        self.names.push(name);
        self.tensors.push(tensor.requiring_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Replace a parameter's values with a fresh trainable leaf.
    pub fn set(&mut self, id: ParamId, data: Vec<T>) -> Result<()> {
        let shape = self.tensors[id.0].shape().to_vec();
        self.tensors[id.0] = Tensor::parameter(&shape, data)?;
        Ok(())
    }

    /// Copy of the store whose tensors record no graph: for inference and for
    /// using one network inside another network's loss without training it.
    pub fn frozen(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::detach).collect(),
        }
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Bitwise equality of names, shapes and values.
    pub fn bitwise_eq(&self, other: &ParamStore<T>) -> bool {
        self.names == other.names
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_f64().map(f64::to_bits) == y.to_f64().map(f64::to_bits))
            })
    }
}

/// He (fan-in) normal initialization: `N(0, 2/fan_in)` weights.
pub fn he_normal<T: Scalar>(spec: &ConvSpec, rng: &mut SeededRng) -> Result<Tensor<T>> {
    let std = (2.0 / spec.fan_in() as f64).sqrt();
    let shape = spec.weight_shape();
    let n = shape.iter().product();
    Tensor::from_vec(&shape, (0..n).map(|_| T::of(rng.normal() * std)).collect())
}

/// Deterministic weights for `spec` from `seed`.
pub fn init_params<T: Scalar>(spec: &ConvSpec, seed: u64) -> Result<Tensor<T>> {
    he_normal(spec, &mut SeededRng::new(seed))
}

/// Biases start at zero.
pub fn init_bias<T: Scalar>(spec: &ConvSpec) -> Result<Tensor<T>> {
    Tensor::zeros(&[spec.out_channels])
}

/// A convolution whose weight and bias live in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayer {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvLayer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, spec: ConvSpec, rng: &mut SeededRng) -> Result<Self> {
        let weight = store.push(format!("{name}.weight"), he_normal(&spec, rng)?);
        let bias = store.push(format!("{name}.bias"), init_bias(&spec)?);
        Ok(ConvLayer { spec, weight, bias })
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv(x, &self.spec, store.get(self.weight), Some(store.get(self.bias)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_tensor() {
        let spec = ConvSpec::conv2d(3, 8, 3, 1, 1);
        let a: Tensor<f64> = init_params(&spec, 9).unwrap();
        let b: Tensor<f64> = init_params(&spec, 9).unwrap();
        let c: Tensor<f64> = init_params(&spec, 10).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn variance_is_two_over_fan_in() {
        // 16·25·25 = 10⁴ samples, fan_in = 25·9
        let spec = ConvSpec::conv2d(25, 16, 3, 1, 1);
        let w: Tensor<f64> = init_params(&spec, 1).unwrap();
        assert_eq!(w.numel(), 3600);
        let spec = ConvSpec::conv2d(100, 100, 1, 1, 0);
        let w: Tensor<f64> = init_params(&spec, 1).unwrap();
        assert_eq!(w.numel(), 10_000);
        let mean = w.data().iter().sum::<f64>() / 1e4;
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 1e4;
        let expect = 2.0 / 100.0;
        assert!((var / expect - 1.0).abs() < 0.2, "var {var} vs {expect}");
    }

    #[test]
    fn bias_starts_at_zero() {
        let b: Tensor<f32> = init_bias(&ConvSpec::conv2d(3, 5, 3, 1, 1)).unwrap();
        assert_eq!(b.data(), &[0.0; 5]);
    }

    #[test]
    fn frozen_store_records_no_graph() {
        let mut rng = SeededRng::new(0);
        let mut store = ParamStore::<f64>::new();
        let layer = ConvLayer::new(&mut store, "c", ConvSpec::conv2d(1, 1, 3, 1, 1), &mut rng).unwrap();
        let x = Tensor::ones(&[1, 1, 4, 4]).unwrap();
        assert!(layer.forward(&store, &x).unwrap().requires_grad());
        assert!(!layer.forward(&store.frozen(), &x).unwrap().requires_grad());
        assert!(store.bitwise_eq(&store.frozen()));
    }
}
