//! Named parameter storage and its binding onto a tape.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Scalar, Tape, Tensor, Var};

/// Parameters keyed by dotted name, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F: Scalar = f32> {
    tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) {
        self.tensors.insert(name.into(), t.with_requires_grad(true));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<F>> {
        self.tensors.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Records every parameter on `tape` as a gradient-requiring leaf.
    pub fn bind(&self, tape: &mut Tape<F>) -> Bindings {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.param(v.clone())))
            .collect();
        Bindings { vars }
    }

    /// Adds the gradients of every bound parameter into its buffer. Parameters
    /// the loss does not reach receive zeros.
    pub fn accumulate_grads(&mut self, bindings: &Bindings, grads: &Gradients<F>) -> Result<()> {
        for (name, &var) in &bindings.vars {
            let t = self
                .tensors
                .get_mut(name)
                .ok_or_else(|| Error::Usage(format!("binding for unknown parameter {name}")))?;
            match grads.get(var) {
                Some(g) => t.accumulate_grad(g)?,
                None => t.accumulate_grad(&vec![F::zero(); t.numel()])?,
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}

/// Name → tape variable map produced by [`ParamStore::bind`].
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bindings {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Usage(format!("parameter {name} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Normal(0, sqrt(gain / fan_in)) initialisation.
pub(crate) fn fan_in_normal<F: Scalar, R: Rng>(
    rng: &mut R,
    dims: &[usize],
    fan_in: usize,
    gain: f64,
) -> Result<Tensor<F>> {
    let std = (gain / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
    Tensor::from_fn(dims, |_| F::lit(normal.sample(rng)))
}

/// Affine map over the last axis: `x[T×in] · W[in×out] + b[out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn init<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<()> {
        store.insert(
            format!("{prefix}.weight"),
            fan_in_normal(rng, &[fan_in, fan_out], fan_in, gain)?,
        );
        store.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out])?);
        Ok(())
    }

    pub fn bind(b: &Bindings, prefix: &str) -> Result<Self> {
        Ok(Linear {
            weight: b.var(&format!("{prefix}.weight"))?,
            bias: b.var(&format!("{prefix}.bias"))?,
        })
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        tape.add_bias(y, self.bias, 1)
    }
}

/// 2-D convolution with per-output-channel bias, "same" padding for odd kernels.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn init<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<()> {
        let fan_in = cin * kernel * kernel;
        store.insert(
            format!("{prefix}.weight"),
            fan_in_normal(rng, &[cout, cin, kernel, kernel], fan_in, gain)?,
        );
        store.insert(format!("{prefix}.bias"), Tensor::zeros(&[cout])?);
        Ok(())
    }

    pub fn bind(b: &Bindings, prefix: &str, stride: usize) -> Result<Self> {
        Ok(Conv {
            weight: b.var(&format!("{prefix}.weight"))?,
            bias: b.var(&format!("{prefix}.bias"))?,
            stride,
        })
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        let k = tape.shape(self.weight).dim(2);
        let y = tape.conv2d(x, self.weight, self.stride, k / 2)?;
        tape.add_bias(y, self.bias, 0)
    }
}

/// Layer-norm gain and bias.
#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: Var,
    pub bias: Var,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Norm {
    pub fn init<F: Scalar>(store: &mut ParamStore<F>, prefix: &str, dim: usize) -> Result<()> {
        store.insert(format!("{prefix}.gain"), Tensor::ones(&[dim])?);
        store.insert(format!("{prefix}.bias"), Tensor::zeros(&[dim])?);
        Ok(())
    }

    pub fn bind(b: &Bindings, prefix: &str) -> Result<Self> {
        Ok(Norm {
            gain: b.var(&format!("{prefix}.gain"))?,
            bias: b.var(&format!("{prefix}.bias"))?,
        })
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        tape.layer_norm(x, self.gain, self.bias, F::lit(LAYER_NORM_EPS))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unreached_parameters_get_zero_grads() {
        let mut store = ParamStore::<f64>::new();
        store.insert("a", Tensor::scalar(2.0));
        store.insert("b", Tensor::scalar(5.0));
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let a = b.var("a").unwrap();
        let sq = tape.mul(a, a).unwrap();
        let grads = tape.backward(sq).unwrap();
        store.accumulate_grads(&b, &grads).unwrap();
        assert_eq!(store.get("a").unwrap().grad(), Some(&[4.0][..]));
        assert_eq!(store.get("b").unwrap().grad(), Some(&[0.0][..]));
    }

    #[test]
    fn unbound_name_is_reported() {
        let b = Bindings::default();
        assert!(matches!(b.var("missing"), Err(Error::Usage(_))));
    }
}
